//! Coarse-graining to the ML mesh, fixed-length sequence pairs, and the
//! train/test split.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::wavegen::{DomainSpec, GridSpec, PressureField, PulseShape, SourceSpec};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    /// Sequence length in ML time steps.
    pub tx: usize,
    /// ML time steps between consecutive window origins.
    pub stride: usize,
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tx < 2 {
            return Err(Error::Config(format!("Tx must be at least 2, got {}", self.tx)));
        }
        if self.stride < 1 {
            return Err(Error::Config("window stride must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of windows a field of `nt` steps yields.
    pub fn count(&self, nt: usize) -> usize {
        if nt < 2 * self.tx {
            0
        } else {
            (nt - 2 * self.tx) / self.stride + 1
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    /// Peak pressure amplitude of the training set.
    pub p0: f64,
}

impl NormalizationSpec {
    pub fn new(p0: f64) -> Result<Self> {
        if !(p0 > 0.0 && p0.is_finite()) {
            return Err(Error::Config(format!("p0 must be positive, got {p0}")));
        }
        Ok(NormalizationSpec { p0 })
    }

    pub fn normalize(&self, x: f64) -> f64 {
        x / self.p0
    }

    pub fn denormalize(&self, x: f64) -> f64 {
        x * self.p0
    }
}

/// Input window and the `tx` states that immediately follow it, divided by p0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequencePair {
    pub tx: usize,
    pub nx: usize,
    /// Row-major `tx x nx`.
    pub input: Vec<f64>,
    /// Row-major `tx x nx`.
    pub target: Vec<f64>,
    /// ML time index of the first input state.
    pub origin_step: usize,
    /// `t / T` of the first input state.
    pub origin_time: f64,
}

impl SequencePair {
    pub fn input_row(&self, k: usize) -> &[f64] {
        &self.input[k * self.nx..(k + 1) * self.nx]
    }

    pub fn target_row(&self, k: usize) -> &[f64] {
        &self.target[k * self.nx..(k + 1) * self.nx]
    }

    /// Half-open ML time span `[origin, origin + 2 tx)` covered by the pair.
    pub fn span(&self) -> (usize, usize) {
        (self.origin_step, self.origin_step + 2 * self.tx)
    }

    pub fn target_span(&self) -> (usize, usize) {
        (self.origin_step + self.tx, self.origin_step + 2 * self.tx)
    }
}

fn resample_axis(n_fine: usize, factor: usize, interpolate: bool, axis: &str) -> Result<(usize, f64)> {
    if (n_fine - 1).is_multiple_of(factor) {
        return Ok(((n_fine - 1) / factor + 1, factor as f64));
    }
    if !interpolate {
        return Err(Error::Config(format!(
            "coarsening factor {factor} does not divide the {axis} interval count {}",
            n_fine - 1
        )));
    }
    let n = ((n_fine - 1) as f64 / factor as f64).round().max(1.0) as usize + 1;
    Ok((n, (n_fine - 1) as f64 / (n - 1) as f64))
}

/// Samples every `factor`-th grid line in both axes. When the factor does not
/// divide the interval counts and `interpolate` is set, the coarse grid keeps
/// the same extent and is filled by bilinear interpolation.
pub fn coarsen(field: &PressureField, factor: usize, interpolate: bool) -> Result<PressureField> {
    if factor == 0 {
        return Err(Error::Config("coarsening factor must be positive".into()));
    }
    if factor == 1 {
        return Ok(field.clone());
    }
    let (nt, nx) = (field.nt(), field.nx());
    if nt < 2 || nx < 2 {
        return Err(Error::Shape("field too small to coarsen".into()));
    }
    let (nt_c, st) = resample_axis(nt, factor, interpolate, "time")?;
    let (nx_c, sx) = resample_axis(nx, factor, interpolate, "space")?;
    let aligned = st == factor as f64 && sx == factor as f64;

    let mut values = vec![0.0; nt_c * nx_c];
    for n in 0..nt_c {
        for j in 0..nx_c {
            values[n * nx_c + j] = if aligned {
                field.at(n * factor, j * factor)
            } else {
                bilinear(field, n as f64 * st, j as f64 * sx)
            };
        }
    }
    let grid = GridSpec {
        nx: nx_c,
        nt: nt_c,
        dx: field.grid.dx * sx,
        dt: field.grid.dt * st,
    };
    Ok(PressureField {
        values,
        grid,
        domain: field.domain,
        source: field.source,
        boundary: field.boundary,
    })
}

fn bilinear(field: &PressureField, n: f64, j: f64) -> f64 {
    let n0 = (n.floor() as usize).min(field.nt() - 2);
    let j0 = (j.floor() as usize).min(field.nx() - 2);
    let a = n - n0 as f64;
    let b = j - j0 as f64;
    (1.0 - a) * ((1.0 - b) * field.at(n0, j0) + b * field.at(n0, j0 + 1))
        + a * ((1.0 - b) * field.at(n0 + 1, j0) + b * field.at(n0 + 1, j0 + 1))
}

/// The pair whose first input state is ML step `origin`.
pub fn window_at(
    field: &PressureField,
    origin: usize,
    tx: usize,
    norm: &NormalizationSpec,
) -> Result<SequencePair> {
    let required = origin + 2 * tx;
    if field.nt() < required {
        return Err(Error::TooShort {
            required,
            available: field.nt(),
        });
    }
    let nx = field.nx();
    let rows = |from: usize| -> Vec<f64> {
        field.values[from * nx..(from + tx) * nx]
            .iter()
            .map(|&v| norm.normalize(v))
            .collect()
    };
    Ok(SequencePair {
        tx,
        nx,
        input: rows(origin),
        target: rows(origin + tx),
        origin_step: origin,
        origin_time: field.grid.t(origin) / field.domain.period(),
    })
}

/// Sliding windows with the configured stride, in time order.
pub fn make_windows(
    field: &PressureField,
    w: &WindowConfig,
    norm: &NormalizationSpec,
) -> Result<Vec<SequencePair>> {
    w.validate()?;
    let count = w.count(field.nt());
    if count == 0 {
        return Err(Error::TooShort {
            required: 2 * w.tx,
            available: field.nt(),
        });
    }
    (0..count)
        .map(|k| window_at(field, k * w.stride, w.tx, norm))
        .collect()
}

/// Indices (into the pair list) of the held-out pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestSelector {
    pub indices: Vec<usize>,
}

/// Partitions `pairs` into train and test. Rejects selectors that put the
/// same window in both sets or let a test target overlap any training pair.
pub fn split(
    pairs: &[SequencePair],
    selector: &TestSelector,
) -> Result<(Vec<SequencePair>, Vec<SequencePair>)> {
    let mut is_test = vec![false; pairs.len()];
    for &i in &selector.indices {
        if i >= pairs.len() {
            return Err(Error::Config(format!(
                "test index {i} out of range for {} pairs",
                pairs.len()
            )));
        }
        if is_test[i] {
            return Err(Error::Config(format!("test index {i} listed twice")));
        }
        is_test[i] = true;
    }
    let test: Vec<&SequencePair> = selector.indices.iter().map(|&i| &pairs[i]).collect();
    let train: Vec<&SequencePair> = pairs
        .iter()
        .zip(&is_test)
        .filter(|(_, &t)| !t)
        .map(|(p, _)| p)
        .collect();
    for t in &test {
        let (ts, te) = t.target_span();
        for r in &train {
            if r.origin_step == t.origin_step {
                return Err(Error::Leakage(format!(
                    "window at step {} is in both sets",
                    t.origin_step
                )));
            }
            let (rs, re) = r.span();
            if ts < re && rs < te {
                return Err(Error::Leakage(format!(
                    "test target [{ts}, {te}) overlaps training window [{rs}, {re})"
                )));
            }
        }
    }
    Ok((
        train.into_iter().cloned().collect(),
        test.into_iter().cloned().collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    WallReflection,
    Interference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveEvent {
    pub kind: EventKind,
    /// Seconds; the instant the pulse centre hits the wall, or the two
    /// pulse centres coincide.
    pub time: f64,
    pub position: f64,
}

/// Reflections and crossings of the two pulses a monopole emits, traced
/// geometrically up to `t_end`.
pub fn wave_events(domain: &DomainSpec, source: &SourceSpec, t_end: f64) -> Vec<WaveEvent> {
    let emit = match source.shape {
        PulseShape::HannBurst { duration } => source.onset + 0.5 * duration,
        PulseShape::Impulsive => source.onset,
    };
    let (lo, hi) = (domain.left(), domain.right());
    let l = domain.length;
    let c = domain.wave_speed;
    // Unfolded coordinate `u` moves at +c; fold it back into the domain.
    let fold = |u: f64| -> f64 {
        let period = 2.0 * l;
        let s = (u - lo).rem_euclid(period);
        if s <= l {
            lo + s
        } else {
            hi - (s - l)
        }
    };
    let x0 = source.location;
    let mut events = Vec::new();
    // Pulse A starts right-moving at x0. Pulse B, left-moving from x0, is the
    // image of a right-moving pulse starting at 2 lo - x0.
    let ua = x0;
    let ub = 2.0 * lo - x0;
    for u0 in [ua, ub] {
        // Wall hits occur whenever the unfolded coordinate reaches lo + k L.
        let mut k = ((u0 - lo) / l).floor() as i64 + 1;
        loop {
            let tau = (lo + k as f64 * l - u0) / c;
            let t = emit + tau;
            if t > t_end {
                break;
            }
            if tau > 0.0 {
                let position = if k.rem_euclid(2) == 1 { hi } else { lo };
                events.push(WaveEvent {
                    kind: EventKind::WallReflection,
                    time: t,
                    position,
                });
            }
            k += 1;
        }
    }
    // Crossings: sign changes of the folded gap, refined by bisection.
    let steps = ((t_end - emit).max(0.0) / domain.period() * 20000.0).ceil() as usize;
    let h = (t_end - emit).max(0.0) / steps.max(1) as f64;
    let gap = |tau: f64| fold(ua + c * tau) - fold(ub + c * tau);
    let mut last: Option<(f64, f64)> = None;
    for s in 0..=steps {
        let tau = s as f64 * h;
        let g = gap(tau);
        if g == 0.0 {
            continue;
        }
        if let Some((t_prev, sign)) = last {
            if g.signum() != sign {
                let (mut a, mut b) = (t_prev, tau);
                for _ in 0..80 {
                    let m = 0.5 * (a + b);
                    let gm = gap(m);
                    if gm != 0.0 && gm.signum() == sign {
                        a = m;
                    } else {
                        b = m;
                    }
                }
                let tm = 0.5 * (a + b);
                let x = fold(ua + c * tm);
                // Coincidence at a wall is a reflection, already recorded.
                if (x - lo).abs() > 1e-9 * l && (x - hi).abs() > 1e-9 * l {
                    events.push(WaveEvent {
                        kind: EventKind::Interference,
                        time: emit + tm,
                        position: x,
                    });
                }
            }
        }
        last = Some((tau, g.signum()));
    }
    events.sort_by(|a, b| a.time.total_cmp(&b.time));
    events
}

/// On-disk dataset: manifest JSON plus `inputs.bin` / `targets.bin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub domain: DomainSpec,
    #[serde(default)]
    pub source: Option<SourceSpec>,
    /// Grid of the ML mesh field the pairs were cut from.
    pub grid: GridSpec,
    pub factor: usize,
    pub window: WindowConfig,
    pub normalization: NormalizationSpec,
    pub origins: Vec<usize>,
    pub train: Vec<usize>,
    pub test: Vec<TestCase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCase {
    pub name: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub pairs: Vec<SequencePair>,
}

impl Dataset {
    pub fn tx(&self) -> usize {
        self.manifest.window.tx
    }

    pub fn nx(&self) -> usize {
        self.manifest.grid.nx
    }

    pub fn train_pairs(&self) -> Vec<&SequencePair> {
        self.manifest.train.iter().map(|&i| &self.pairs[i]).collect()
    }

    pub fn test_pair(&self, name: &str) -> Option<&SequencePair> {
        self.manifest
            .test
            .iter()
            .find(|t| t.name == name)
            .map(|t| &self.pairs[t.index])
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        io::ensure_dir(dir)?;
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for p in &self.pairs {
            inputs.extend_from_slice(&p.input);
            targets.extend_from_slice(&p.target);
        }
        io::write_f64s(&dir.join("inputs.bin"), &inputs)?;
        io::write_f64s(&dir.join("targets.bin"), &targets)?;
        io::write_json(&dir.join("manifest.json"), &self.manifest)
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let path = dir.join("manifest.json");
        let manifest: DatasetManifest = io::read_json(&path)?;
        if manifest.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::format(
                &path,
                format!("unsupported dataset version {}", manifest.format_version),
            ));
        }
        let tx = manifest.window.tx;
        let nx = manifest.grid.nx;
        let per = tx * nx;
        let n = manifest.origins.len();
        let inputs = io::read_f64s(&dir.join("inputs.bin"), Some(n * per))?;
        let targets = io::read_f64s(&dir.join("targets.bin"), Some(n * per))?;
        let period = manifest.domain.period();
        let pairs = manifest
            .origins
            .iter()
            .enumerate()
            .map(|(k, &origin)| SequencePair {
                tx,
                nx,
                input: inputs[k * per..(k + 1) * per].to_vec(),
                target: targets[k * per..(k + 1) * per].to_vec(),
                origin_step: origin,
                origin_time: manifest.grid.t(origin) / period,
            })
            .collect();
        Ok(Dataset { manifest, pairs })
    }
}
