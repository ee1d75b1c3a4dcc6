//! Ground-truth pressure fields for the 1D acoustic wave equation.
//!
//! The solver is the classic explicit leapfrog scheme: second-order centred
//! differences in space, an explicit two-level march in time, and a Gaussian
//! monopole source term. [`analytic_traveling_wave`] produces exact rigidly
//! translating fields that the solver and the kinematics are tested against.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Homogeneous medium occupying `[-length/2, length/2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    /// Metres.
    pub length: f64,
    /// Metres per second.
    pub wave_speed: f64,
}

impl DomainSpec {
    pub fn new(length: f64, wave_speed: f64) -> Result<Self> {
        let d = DomainSpec { length, wave_speed };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length > 0.0 && self.length.is_finite()) {
            return Err(Error::Config(format!(
                "domain length must be positive, got {}",
                self.length
            )));
        }
        if !(self.wave_speed > 0.0 && self.wave_speed.is_finite()) {
            return Err(Error::Config(format!(
                "wave speed must be positive, got {}",
                self.wave_speed
            )));
        }
        Ok(())
    }

    /// Traversal time `L / c0`; every timestamp is reported as a fraction of it.
    pub fn period(&self) -> f64 {
        self.length / self.wave_speed
    }

    pub fn left(&self) -> f64 {
        -0.5 * self.length
    }

    pub fn right(&self) -> f64 {
        0.5 * self.length
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.left() && x <= self.right()
    }
}

/// Temporal behaviour of the monopole.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PulseShape {
    /// Forcing term `q0 * G(x) * sin(2πu) sin²(πu)` for `u = (t - t0)/duration`
    /// in `[0, 1]`. The envelope integrates to zero, so each emitted pulse is
    /// a compact positive hump of length `c0 * duration`.
    HannBurst { duration: f64 },
    /// Initial pressure `q0 * G(x)` at rest, released at `t0`.
    Impulsive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    /// Metres.
    pub location: f64,
    /// Seconds.
    pub onset: f64,
    /// Forcing amplitude (pressure / s²) for bursts, initial pressure for impulses.
    pub amplitude: f64,
    /// Standard deviation of the spatial Gaussian, metres.
    pub width: f64,
    pub shape: PulseShape,
}

impl SourceSpec {
    pub fn validate(&self, domain: &DomainSpec) -> Result<()> {
        if !domain.contains(self.location) {
            return Err(Error::Config(format!(
                "source location {} lies outside [{}, {}]",
                self.location,
                domain.left(),
                domain.right()
            )));
        }
        if !(self.onset >= 0.0) {
            return Err(Error::Config(format!(
                "source onset must be non-negative, got {}",
                self.onset
            )));
        }
        if !(self.width > 0.0) {
            return Err(Error::Config(format!(
                "source width must be positive, got {}",
                self.width
            )));
        }
        if !self.amplitude.is_finite() {
            return Err(Error::Config("source amplitude must be finite".into()));
        }
        if let PulseShape::HannBurst { duration } = self.shape {
            if !(duration > 0.0) {
                return Err(Error::Config(format!(
                    "burst duration must be positive, got {duration}"
                )));
            }
        }
        Ok(())
    }

    fn spatial(&self, x: f64) -> f64 {
        let r = (x - self.location) / self.width;
        (-0.5 * r * r).exp()
    }

    fn envelope(&self, t: f64) -> f64 {
        match self.shape {
            PulseShape::HannBurst { duration } => {
                let u = (t - self.onset) / duration;
                if (0.0..=1.0).contains(&u) {
                    let s = (std::f64::consts::PI * u).sin();
                    (2.0 * std::f64::consts::PI * u).sin() * s * s
                } else {
                    0.0
                }
            }
            PulseShape::Impulsive => 0.0,
        }
    }
}

/// Uniform space-time grid. Row `n` sits at `t = n * dt`, column `j` at
/// `x = -L/2 + j * dx`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub nt: usize,
    pub dx: f64,
    pub dt: f64,
}

impl GridSpec {
    /// Grid spanning the whole domain with `nx` points and `nt` time levels.
    pub fn for_domain(domain: &DomainSpec, nx: usize, nt: usize, dt: f64) -> Result<Self> {
        if nx < 2 {
            return Err(Error::Config(format!("need at least 2 grid points, got {nx}")));
        }
        if nt < 1 {
            return Err(Error::Config("need at least one time level".into()));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Config(format!("time step must be positive, got {dt}")));
        }
        Ok(GridSpec {
            nx,
            nt,
            dx: domain.length / (nx - 1) as f64,
            dt,
        })
    }

    pub fn courant_number(&self, domain: &DomainSpec) -> f64 {
        domain.wave_speed * self.dt / self.dx
    }

    pub fn x(&self, domain: &DomainSpec, j: usize) -> f64 {
        domain.left() + j as f64 * self.dx
    }

    pub fn t(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }

    pub fn len(&self) -> usize {
        self.nx * self.nt
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn check_against(&self, domain: &DomainSpec) -> Result<()> {
        let expected = domain.length / (self.nx.max(2) - 1) as f64;
        if (self.dx - expected).abs() > 1e-9 * expected {
            return Err(Error::Config(format!(
                "grid spacing {} does not match L/(nx-1) = {}",
                self.dx, expected
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryKind {
    /// Zero normal pressure gradient; reflections keep their sign.
    #[default]
    Rigid,
    /// Zero pressure; reflections invert.
    PressureRelease,
}

/// Dense `nt x nx` field of pressure fluctuations, row-major in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PressureField {
    pub values: Vec<f64>,
    pub grid: GridSpec,
    pub domain: DomainSpec,
    pub source: Option<SourceSpec>,
    pub boundary: Option<BoundaryKind>,
}

impl PressureField {
    pub fn zeros(grid: GridSpec, domain: DomainSpec) -> Self {
        PressureField {
            values: vec![0.0; grid.len()],
            grid,
            domain,
            source: None,
            boundary: None,
        }
    }

    pub fn from_values(values: Vec<f64>, grid: GridSpec, domain: DomainSpec) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Shape(format!(
                "{} values for a {}x{} grid",
                values.len(),
                grid.nt,
                grid.nx
            )));
        }
        Ok(PressureField {
            values,
            grid,
            domain,
            source: None,
            boundary: None,
        })
    }

    pub fn nt(&self) -> usize {
        self.grid.nt
    }

    pub fn nx(&self) -> usize {
        self.grid.nx
    }

    #[inline]
    pub fn at(&self, n: usize, j: usize) -> f64 {
        self.values[n * self.grid.nx + j]
    }

    pub fn row(&self, n: usize) -> &[f64] {
        let nx = self.grid.nx;
        &self.values[n * nx..(n + 1) * nx]
    }

    pub fn peak_amplitude(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Pointwise sum of two fields on the same grid.
    pub fn superpose(&self, other: &PressureField) -> Result<PressureField> {
        if self.grid != other.grid {
            return Err(Error::Shape("cannot superpose fields on different grids".into()));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        Ok(PressureField {
            values,
            grid: self.grid,
            domain: self.domain,
            source: None,
            boundary: None,
        })
    }

    pub fn scaled(&self, factor: f64) -> PressureField {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= factor);
        if let Some(src) = out.source.as_mut() {
            src.amplitude *= factor;
        }
        out
    }

    /// Spatial mirror `x -> -x`.
    pub fn mirrored(&self) -> PressureField {
        let nx = self.grid.nx;
        let mut out = self.clone();
        for n in 0..self.grid.nt {
            for j in 0..nx {
                out.values[n * nx + j] = self.values[n * nx + nx - 1 - j];
            }
        }
        out
    }
}

/// Leapfrog solution of `p_tt - c0² p_xx = q` between two walls.
pub fn solve_fdm(
    domain: &DomainSpec,
    source: &SourceSpec,
    grid: &GridSpec,
    boundary: BoundaryKind,
) -> Result<PressureField> {
    domain.validate()?;
    source.validate(domain)?;
    grid.check_against(domain)?;
    if grid.nx < 3 {
        return Err(Error::Config("solver needs at least 3 grid points".into()));
    }
    let courant = grid.courant_number(domain);
    if courant > 1.0 + 1e-12 {
        return Err(Error::Unstable { courant });
    }

    let nx = grid.nx;
    let nt = grid.nt;
    let c2 = courant * courant;
    let dt2 = grid.dt * grid.dt;
    let shape: Vec<f64> = (0..nx).map(|j| source.spatial(grid.x(domain, j))).collect();
    let mut values = vec![0.0; nt * nx];

    let first = match source.shape {
        PulseShape::Impulsive => {
            let n0 = (source.onset / grid.dt).round() as usize;
            if n0 >= nt {
                return Ok(finish(values, *grid, *domain, *source, boundary));
            }
            {
                let row = &mut values[n0 * nx..(n0 + 1) * nx];
                for (p, g) in row.iter_mut().zip(&shape) {
                    *p = source.amplitude * g;
                }
                enforce_walls(row, boundary);
            }
            if n0 + 1 >= nt {
                return Ok(finish(values, *grid, *domain, *source, boundary));
            }
            // Zero initial velocity: p¹ = p⁰ + ½ C² δ²p⁰.
            let (done, rest) = values.split_at_mut((n0 + 1) * nx);
            let prev = &done[n0 * nx..];
            let next = &mut rest[..nx];
            for j in 0..nx {
                next[j] = prev[j] + 0.5 * c2 * laplacian(prev, j, boundary);
            }
            enforce_walls(next, boundary);
            n0 + 1
        }
        PulseShape::HannBurst { .. } => {
            if nt < 2 {
                return Ok(finish(values, *grid, *domain, *source, boundary));
            }
            // Quiescent start; the first level sees half a step of forcing.
            let env = source.envelope(0.0);
            for j in 0..nx {
                values[nx + j] = 0.5 * dt2 * source.amplitude * env * shape[j];
            }
            enforce_walls(&mut values[nx..2 * nx], boundary);
            1
        }
    };

    for n in first..nt - 1 {
        let forcing = source.amplitude * source.envelope(grid.t(n));
        let (done, rest) = values.split_at_mut((n + 1) * nx);
        let prev = &done[(n - 1) * nx..n * nx];
        let cur = &done[n * nx..];
        let next = &mut rest[..nx];
        for j in 0..nx {
            next[j] = 2.0 * cur[j] - prev[j]
                + c2 * laplacian(cur, j, boundary)
                + dt2 * forcing * shape[j];
        }
        enforce_walls(next, boundary);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteField { step: n + 1 });
        }
    }

    Ok(finish(values, *grid, *domain, *source, boundary))
}

fn finish(
    values: Vec<f64>,
    grid: GridSpec,
    domain: DomainSpec,
    source: SourceSpec,
    boundary: BoundaryKind,
) -> PressureField {
    PressureField {
        values,
        grid,
        domain,
        source: Some(source),
        boundary: Some(boundary),
    }
}

/// `p[j-1] - 2 p[j] + p[j+1]` with mirror ghosts at rigid walls.
#[inline]
fn laplacian(p: &[f64], j: usize, boundary: BoundaryKind) -> f64 {
    let last = p.len() - 1;
    if j == 0 {
        match boundary {
            BoundaryKind::Rigid => 2.0 * (p[1] - p[0]),
            BoundaryKind::PressureRelease => 0.0,
        }
    } else if j == last {
        match boundary {
            BoundaryKind::Rigid => 2.0 * (p[last - 1] - p[last]),
            BoundaryKind::PressureRelease => 0.0,
        }
    } else {
        p[j - 1] - 2.0 * p[j] + p[j + 1]
    }
}

fn enforce_walls(row: &mut [f64], boundary: BoundaryKind) {
    if boundary == BoundaryKind::PressureRelease {
        let last = row.len() - 1;
        row[0] = 0.0;
        row[last] = 0.0;
    }
}

/// Discrete energy between levels `n` and `n + 1`. The leapfrog scheme with
/// mirror-ghost walls conserves it exactly in the absence of forcing.
pub fn discrete_energy(field: &PressureField, n: usize) -> f64 {
    let nx = field.nx();
    let dx = field.grid.dx;
    let dt = field.grid.dt;
    let c = field.domain.wave_speed;
    let a = field.row(n);
    let b = field.row(n + 1);
    let mut kinetic = 0.0;
    for j in 0..nx {
        let w = if j == 0 || j == nx - 1 { 0.5 } else { 1.0 };
        let v = (b[j] - a[j]) / dt;
        kinetic += w * v * v;
    }
    let mut potential = 0.0;
    for j in 0..nx - 1 {
        potential += (a[j + 1] - a[j]) * (b[j + 1] - b[j]) / (dx * dx);
    }
    0.5 * dx * (kinetic + c * c * potential)
}

/// Smooth compactly supported initial profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PulseProfile {
    /// Gaussian, treated as supported on `center ± 6 width`.
    Gaussian { center: f64, width: f64, amplitude: f64 },
    /// `A exp(1 - 1/(1 - r²))` for `|r| < 1`, `r = (x - center)/half_width`.
    Bump { center: f64, half_width: f64, amplitude: f64 },
}

impl PulseProfile {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            PulseProfile::Gaussian {
                center,
                width,
                amplitude,
            } => {
                let r = (x - center) / width;
                amplitude * (-0.5 * r * r).exp()
            }
            PulseProfile::Bump {
                center,
                half_width,
                amplitude,
            } => {
                let r = (x - center) / half_width;
                if r.abs() < 1.0 {
                    amplitude * (1.0 - 1.0 / (1.0 - r * r)).exp()
                } else {
                    0.0
                }
            }
        }
    }

    pub fn support(&self) -> (f64, f64) {
        match *self {
            PulseProfile::Gaussian { center, width, .. } => {
                (center - 6.0 * width, center + 6.0 * width)
            }
            PulseProfile::Bump {
                center, half_width, ..
            } => (center - half_width, center + half_width),
        }
    }

    pub fn center(&self) -> f64 {
        match *self {
            PulseProfile::Gaussian { center, .. } | PulseProfile::Bump { center, .. } => center,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Right,
    Left,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Right => 1.0,
            Direction::Left => -1.0,
        }
    }
}

/// Exact field `p(x, t) = f(x ∓ c0 t)` sampled on `grid`.
pub fn analytic_traveling_wave(
    profile: &PulseProfile,
    domain: &DomainSpec,
    grid: &GridSpec,
    direction: Direction,
) -> Result<PressureField> {
    domain.validate()?;
    grid.check_against(domain)?;
    let (lo, hi) = profile.support();
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::Config("pulse profile must have positive width".into()));
    }
    if lo < domain.left() || hi > domain.right() {
        return Err(Error::Config(format!(
            "profile support [{lo}, {hi}] exceeds the domain [{}, {}]",
            domain.left(),
            domain.right()
        )));
    }
    let s = direction.sign() * domain.wave_speed;
    let nx = grid.nx;
    let mut values = vec![0.0; grid.len()];
    for n in 0..grid.nt {
        let shift = s * grid.t(n);
        for j in 0..nx {
            values[n * nx + j] = profile.eval(grid.x(domain, j) - shift);
        }
    }
    PressureField::from_values(values, *grid, *domain)
}

/// d'Alembert solution for an initial profile released from rest.
pub fn dalembert(
    profile: &PulseProfile,
    domain: &DomainSpec,
    grid: &GridSpec,
) -> Result<PressureField> {
    let half = match *profile {
        PulseProfile::Gaussian {
            center,
            width,
            amplitude,
        } => PulseProfile::Gaussian {
            center,
            width,
            amplitude: 0.5 * amplitude,
        },
        PulseProfile::Bump {
            center,
            half_width,
            amplitude,
        } => PulseProfile::Bump {
            center,
            half_width,
            amplitude: 0.5 * amplitude,
        },
    };
    let right = analytic_traveling_wave(&half, domain, grid, Direction::Right)?;
    let left = analytic_traveling_wave(&half, domain, grid, Direction::Left)?;
    right.superpose(&left)
}
