//! Data-driven wave speed `|∂t p / ∂x p|` and the mask of cells where that
//! ratio is kinematically meaningful.
//!
//! A cell is excluded when it is quiet (both derivatives below a threshold
//! tied to the reference amplitude), indeterminate (exactly one of them below
//! it), or when its signed velocity `-∂t p / ∂x p` disagrees with the median
//! of its active 3x3 neighbourhood, which is what superposed waves look like.
//! Flagged cells are dilated by one stencil width.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wavegen::{GridSpec, PressureField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeStencil {
    /// Second-order one-sided differences on the boundary rows and columns.
    #[default]
    OneSided,
    /// Boundary rows and columns are differentiated one-sided but never
    /// participate in the mask.
    Exclude,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StencilSpec {
    pub edges: EdgeStencil,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskThresholds {
    /// `ε_q`: a derivative is negligible below `ε_q * p_ref / h`.
    pub quiet: f64,
    /// Relative deviation from the neighbourhood median that marks interference.
    pub interference_tolerance: f64,
    /// Chebyshev radius by which interference flags are grown.
    pub dilation: usize,
    /// `p_ref`; the peak `|p|` of the analysed field when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_amplitude: Option<f64>,
}

impl Default for MaskThresholds {
    fn default() -> Self {
        MaskThresholds {
            quiet: 1e-3,
            interference_tolerance: 0.2,
            dilation: 1,
            reference_amplitude: None,
        }
    }
}

impl MaskThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.quiet > 0.0) || !(self.interference_tolerance > 0.0) {
            return Err(Error::Config("mask thresholds must be positive".into()));
        }
        if let Some(a) = self.reference_amplitude {
            if !(a > 0.0) {
                return Err(Error::Config("reference amplitude must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn with_reference(mut self, amplitude: f64) -> Self {
        self.reference_amplitude = Some(amplitude);
        self
    }
}

/// Finite-difference coefficients (index, weight) for the derivative at `i`
/// on a line of `n` samples with spacing `h`.
#[inline]
fn taps(i: usize, n: usize, h: f64) -> ([(usize, f64); 3], usize) {
    let s = 0.5 / h;
    if n == 2 {
        return ([(0, -1.0 / h), (1, 1.0 / h), (0, 0.0)], 2);
    }
    if i == 0 {
        ([(0, -3.0 * s), (1, 4.0 * s), (2, -s)], 3)
    } else if i == n - 1 {
        ([(n - 1, 3.0 * s), (n - 2, -4.0 * s), (n - 3, s)], 3)
    } else {
        ([(i - 1, -s), (i + 1, s), (0, 0.0)], 2)
    }
}

/// Partial derivatives of a row-major `rows x nx` block.
#[derive(Debug, Clone, PartialEq)]
pub struct Derivatives {
    pub rows: usize,
    pub nx: usize,
    /// `∂t p`.
    pub dt: Vec<f64>,
    /// `∂x p`.
    pub dx: Vec<f64>,
}

/// Second-order derivatives: centred in the interior, one-sided at the edges.
/// Two-row blocks fall back to a first-order time difference.
pub fn derivatives(values: &[f64], rows: usize, nx: usize, dt: f64, dx: f64) -> Derivatives {
    assert!(rows >= 2 && nx >= 3, "derivative block too small: {rows}x{nx}");
    assert_eq!(values.len(), rows * nx);
    let mut pt = vec![0.0; rows * nx];
    let mut px = vec![0.0; rows * nx];
    for r in 0..rows {
        let (tt, kt) = taps(r, rows, dt);
        for j in 0..nx {
            let mut acc = 0.0;
            for &(rr, w) in &tt[..kt] {
                acc += w * values[rr * nx + j];
            }
            pt[r * nx + j] = acc;
        }
        let row = &values[r * nx..(r + 1) * nx];
        for j in 0..nx {
            let (tx, kx) = taps(j, nx, dx);
            let mut acc = 0.0;
            for &(jj, w) in &tx[..kx] {
                acc += w * row[jj];
            }
            px[r * nx + j] = acc;
        }
    }
    Derivatives {
        rows,
        nx,
        dt: pt,
        dx: px,
    }
}

/// Adjoint of [`derivatives`]: accumulates `Dtᵀ g_t + Dxᵀ g_x` into `out`.
pub fn derivatives_adjoint(
    g_t: &[f64],
    g_x: &[f64],
    rows: usize,
    nx: usize,
    dt: f64,
    dx: f64,
    out: &mut [f64],
) {
    assert_eq!(out.len(), rows * nx);
    for r in 0..rows {
        let (tt, kt) = taps(r, rows, dt);
        for j in 0..nx {
            let g = g_t[r * nx + j];
            if g != 0.0 {
                for &(rr, w) in &tt[..kt] {
                    out[rr * nx + j] += w * g;
                }
            }
            let g = g_x[r * nx + j];
            if g != 0.0 {
                let (tx, kx) = taps(j, nx, dx);
                for &(jj, w) in &tx[..kx] {
                    out[r * nx + jj] += w * g;
                }
            }
        }
    }
}

/// Per-cell classification behind the mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellClass {
    Quiet,
    /// Exactly one derivative is negligible: the ratio is 0 or unbounded.
    Indeterminate,
    /// Active but inconsistent with its neighbourhood (or grown from one).
    Interference,
    Valid,
}

/// Classification plus estimated speeds on a block.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedEstimate {
    pub speeds: Vec<f64>,
    pub mask: Vec<bool>,
    pub classes: Vec<CellClass>,
}

/// Classifies every cell of a differentiated block. `reference` is `p_ref`.
pub fn classify(
    d: &Derivatives,
    step_t: f64,
    step_x: f64,
    reference: f64,
    thresholds: &MaskThresholds,
) -> SpeedEstimate {
    let (rows, nx) = (d.rows, d.nx);
    let n = rows * nx;
    let floor_t = thresholds.quiet * reference / step_t;
    let floor_x = thresholds.quiet * reference / step_x;

    let mut classes = vec![CellClass::Valid; n];
    let mut velocity = vec![0.0; n];
    for k in 0..n {
        let small_t = d.dt[k].abs() < floor_t;
        let small_x = d.dx[k].abs() < floor_x;
        classes[k] = match (small_t, small_x) {
            (true, true) => CellClass::Quiet,
            (true, false) | (false, true) => CellClass::Indeterminate,
            (false, false) => {
                velocity[k] = -d.dt[k] / d.dx[k];
                CellClass::Valid
            }
        };
    }

    let mut flagged: Vec<bool> = classes
        .iter()
        .map(|c| *c == CellClass::Indeterminate)
        .collect();

    // A single traveling wave also carries its speed in the slopes of its
    // derivatives: -∂x∂t p / ∂x∂x p equals -∂t p / ∂x p. Superposed waves
    // break that agreement however smoothly they vary, so this catches
    // overlaps the neighbourhood median misses on fine grids.
    let curvature = derivatives(&d.dx, rows, nx, step_t, step_x).dx;
    let mixed = derivatives(&d.dt, rows, nx, step_t, step_x).dx;
    let floor_xx = thresholds.quiet * reference / (step_x * step_x);
    for k in 0..n {
        if classes[k] == CellClass::Valid && curvature[k].abs() >= floor_xx {
            let v2 = -mixed[k] / curvature[k];
            if (v2 - velocity[k]).abs() > thresholds.interference_tolerance * velocity[k].abs() {
                flagged[k] = true;
            }
        }
    }
    let mut window = Vec::with_capacity(9);
    for r in 0..rows {
        for j in 0..nx {
            let k = r * nx + j;
            if classes[k] != CellClass::Valid {
                continue;
            }
            window.clear();
            for rr in r.saturating_sub(1)..(r + 2).min(rows) {
                for jj in j.saturating_sub(1)..(j + 2).min(nx) {
                    let kk = rr * nx + jj;
                    if classes[kk] == CellClass::Valid {
                        window.push(velocity[kk]);
                    }
                }
            }
            let med = median(&mut window);
            if (velocity[k] - med).abs() > thresholds.interference_tolerance * med.abs() {
                flagged[k] = true;
            }
        }
    }

    let radius = thresholds.dilation;
    let mut grown = flagged.clone();
    if radius > 0 {
        for r in 0..rows {
            for j in 0..nx {
                if !flagged[r * nx + j] {
                    continue;
                }
                for rr in r.saturating_sub(radius)..(r + radius + 1).min(rows) {
                    for jj in j.saturating_sub(radius)..(j + radius + 1).min(nx) {
                        grown[rr * nx + jj] = true;
                    }
                }
            }
        }
    }

    let mut speeds = vec![0.0; n];
    let mut mask = vec![false; n];
    for k in 0..n {
        if classes[k] == CellClass::Valid {
            if grown[k] {
                classes[k] = CellClass::Interference;
            } else {
                mask[k] = true;
                speeds[k] = velocity[k].abs();
            }
        }
    }
    SpeedEstimate {
        speeds,
        mask,
        classes,
    }
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Estimated wave speed on a field's grid; zero wherever `mask` is false.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveSpeedField {
    pub speeds: Vec<f64>,
    pub mask: Vec<bool>,
    pub grid: GridSpec,
}

impl WaveSpeedField {
    pub fn unmasked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn unmasked_mean(&self) -> Option<f64> {
        let n = self.unmasked_count();
        (n > 0).then(|| {
            self.speeds
                .iter()
                .zip(&self.mask)
                .filter(|(_, &m)| m)
                .map(|(s, _)| s)
                .sum::<f64>()
                / n as f64
        })
    }
}

fn check_field(field: &PressureField, thresholds: &MaskThresholds) -> Result<()> {
    thresholds.validate()?;
    if field.nt() < 3 || field.nx() < 3 {
        return Err(Error::Shape(format!(
            "wave speed needs at least 3x3 samples, field is {}x{}",
            field.nt(),
            field.nx()
        )));
    }
    Ok(())
}

fn estimate(
    field: &PressureField,
    stencil: &StencilSpec,
    thresholds: &MaskThresholds,
) -> Result<SpeedEstimate> {
    check_field(field, thresholds)?;
    let reference = thresholds
        .reference_amplitude
        .unwrap_or_else(|| field.peak_amplitude());
    let (nt, nx) = (field.nt(), field.nx());
    if reference == 0.0 {
        return Ok(SpeedEstimate {
            speeds: vec![0.0; nt * nx],
            mask: vec![false; nt * nx],
            classes: vec![CellClass::Quiet; nt * nx],
        });
    }
    let d = derivatives(&field.values, nt, nx, field.grid.dt, field.grid.dx);
    let mut est = classify(&d, field.grid.dt, field.grid.dx, reference, thresholds);
    if stencil.edges == EdgeStencil::Exclude {
        for n in 0..nt {
            for j in 0..nx {
                if n == 0 || n == nt - 1 || j == 0 || j == nx - 1 {
                    let k = n * nx + j;
                    est.mask[k] = false;
                    est.speeds[k] = 0.0;
                }
            }
        }
    }
    Ok(est)
}

pub fn wave_speed(
    field: &PressureField,
    stencil: &StencilSpec,
    thresholds: &MaskThresholds,
) -> Result<WaveSpeedField> {
    let est = estimate(field, stencil, thresholds)?;
    Ok(WaveSpeedField {
        speeds: est.speeds,
        mask: est.mask,
        grid: field.grid,
    })
}

/// `true` where a cell may take part in the kinematic regularizer.
pub fn interference_mask(field: &PressureField, thresholds: &MaskThresholds) -> Result<Vec<bool>> {
    Ok(estimate(field, &StencilSpec::default(), thresholds)?.mask)
}
