//! Forecast error norms, seed ensembles and the training diagnostics.
//!
//! `e = p̂/p − 1` per cell; cells whose target magnitude is below the guard
//! (relative to `p0`) are skipped. L1 is the spatial mean of `|e|` and L∞ its
//! maximum, so `L1 <= L∞` holds on every record. Ensemble deviations use the
//! unbiased `n − 1` estimator.

use serde::{Deserialize, Serialize};

use crate::dataset::SequencePair;
use crate::error::{Error, Result};
use crate::seqmodel::{rollout_recursive, ModelParams};
use crate::training::{predicted_speeds, TrainingSet};

pub const DEFAULT_GUARD: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastMetrics {
    /// Forecast horizon of each step in periods.
    pub horizon: Vec<f64>,
    #[serde(with = "crate::io::nan_as_null_vec")]
    pub l1: Vec<f64>,
    #[serde(with = "crate::io::nan_as_null_vec")]
    pub linf: Vec<f64>,
    /// Cells skipped by the division guard per step.
    pub guarded: Vec<usize>,
}

/// Norms of `prediction / target − 1` for row-major `tx x nx` blocks of
/// normalized pressure.
pub fn block_errors(
    prediction: &[f64],
    target: &[f64],
    nx: usize,
    dt_periods: f64,
    guard: f64,
) -> ForecastMetrics {
    let tx = target.len() / nx;
    let mut m = ForecastMetrics {
        horizon: (1..=tx).map(|k| k as f64 * dt_periods).collect(),
        l1: vec![0.0; tx],
        linf: vec![0.0; tx],
        guarded: vec![0; tx],
    };
    for s in 0..tx {
        let mut sum = 0.0;
        let mut n = 0usize;
        for j in 0..nx {
            let (p, q) = (target[s * nx + j], prediction[s * nx + j]);
            if p.abs() < guard {
                m.guarded[s] += 1;
                continue;
            }
            let e = (q / p - 1.0).abs();
            sum += e;
            n += 1;
            m.linf[s] = m.linf[s].max(e);
        }
        if n > 0 {
            m.l1[s] = sum / n as f64;
        }
    }
    m
}

pub fn forecast_errors(
    params: &ModelParams,
    pair: &SequencePair,
    dt_periods: f64,
    guard: f64,
) -> Result<ForecastMetrics> {
    let pred = rollout_recursive(params, &pair.input, pair.tx)?;
    Ok(block_errors(&pred, &pair.target, pair.nx, dt_periods, guard))
}

/// `(physics − plain) / plain` per step; `None` where the plain norm is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeErrors {
    pub l1: Vec<Option<f64>>,
    pub linf: Vec<Option<f64>>,
}

fn rel(a: &[f64], b: &[f64]) -> Vec<Option<f64>> {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (y != 0.0).then(|| (x - y) / y))
        .collect()
}

pub fn relative_errors(physics: &ForecastMetrics, plain: &ForecastMetrics) -> Result<RelativeErrors> {
    if physics.l1.len() != plain.l1.len() {
        return Err(Error::Shape("metrics of different horizons".into()));
    }
    Ok(RelativeErrors {
        l1: rel(&physics.l1, &plain.l1),
        linf: rel(&physics.linf, &plain.linf),
    })
}

/// Relative norm change from the early-stopped to the final network.
pub fn overfit_delta(final_: &ForecastMetrics, early: &ForecastMetrics) -> Result<RelativeErrors> {
    relative_errors(final_, early)
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `(‖W_o,final‖ − ‖W_o,early‖) / ‖W_o,early‖` over the output-gate kernels.
pub fn weight_increment(final_: &ModelParams, early: &ModelParams) -> Result<f64> {
    if final_.arch != early.arch {
        return Err(Error::Shape("checkpoints of different architectures".into()));
    }
    let b = l2(&early.output_gate_weights());
    if b == 0.0 {
        return Err(Error::Shape("early output-gate weights are all zero".into()));
    }
    Ok((l2(&final_.output_gate_weights()) - b) / b)
}

/// L2 norm of `ĉ − c` (physical units) over the comparable cells of every
/// training window, divided by the square root of their count so networks
/// with different comparable sets stay on one scale.
pub fn training_speed_error(params: &ModelParams, set: &TrainingSet) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for w in 0..set.len() {
        let pair = &set.pairs[w];
        let pred = rollout_recursive(params, &pair.input, pair.tx)?;
        let (speeds, active) = predicted_speeds(set, w, &pred);
        let kin = &set.kinematics[w];
        for k in 0..speeds.len() {
            if active[k] {
                let d = speeds[k] - kin.speeds[k];
                sum += d * d;
                n += 1;
            }
        }
    }
    Ok(if n == 0 { 0.0 } else { (sum / n as f64).sqrt() })
}

/// Normalized difference `(a − b) / b` of two speed errors.
pub fn wavespeed_delta(error: f64, reference: f64) -> Option<f64> {
    (reference != 0.0).then(|| (error - reference) / reference)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    #[serde(with = "crate::io::nan_as_null")]
    pub mean: f64,
    #[serde(with = "crate::io::nan_as_null")]
    pub std: f64,
    pub n: usize,
}

/// Mean and unbiased standard deviation; `std` is 0 for a single sample.
pub fn mean_std(values: &[f64]) -> Stat {
    let n = values.len();
    if n == 0 {
        return Stat {
            mean: f64::NAN,
            std: f64::NAN,
            n: 0,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    Stat {
        mean,
        std: var.sqrt(),
        n,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub horizon: Vec<f64>,
    pub l1: Vec<Stat>,
    pub linf: Vec<Stat>,
    /// Runs present out of those expected.
    pub coverage: (usize, usize),
}

/// Per-step statistics over the runs that exist (`None` entries are missing
/// runs and only reduce the coverage).
pub fn ensemble(runs: &[Option<ForecastMetrics>]) -> Result<EnsembleStats> {
    let present: Vec<&ForecastMetrics> = runs.iter().flatten().collect();
    let first = present
        .first()
        .ok_or_else(|| Error::Missing("no runs to aggregate".into()))?;
    let tx = first.l1.len();
    if present.iter().any(|m| m.l1.len() != tx) {
        return Err(Error::Shape("runs of different horizons".into()));
    }
    let column = |f: &dyn Fn(&ForecastMetrics) -> f64| -> Vec<f64> { present.iter().map(|m| f(m)).collect() };
    Ok(EnsembleStats {
        horizon: first.horizon.clone(),
        l1: (0..tx).map(|s| mean_std(&column(&|m| m.l1[s]))).collect(),
        linf: (0..tx).map(|s| mean_std(&column(&|m| m.linf[s]))).collect(),
        coverage: (present.len(), runs.len()),
    })
}

/// Index of the run with the lowest rank sum, ranking the horizon-mean L1
/// and L∞ separately on every test case. Ties go to the earlier run.
/// `runs[r][c]` holds run `r`'s metrics on case `c`.
pub fn best_network(runs: &[Vec<ForecastMetrics>]) -> Option<usize> {
    let n = runs.len();
    if n == 0 {
        return None;
    }
    let cases = runs[0].len();
    let mut score = vec![0usize; n];
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    for c in 0..cases {
        for norm in 0..2 {
            let vals: Vec<f64> = runs
                .iter()
                .map(|r| {
                    let m = &r[c];
                    avg(if norm == 0 { &m.l1 } else { &m.linf })
                })
                .collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]).then(a.cmp(&b)));
            for (rank, &r) in order.iter().enumerate() {
                score[r] += rank;
            }
        }
    }
    (0..n).min_by_key(|&r| (score[r], r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqmodel::Architecture;
    use proptest::prelude::*;

    fn metrics(l1: Vec<f64>, linf: Vec<f64>) -> ForecastMetrics {
        ForecastMetrics {
            horizon: (1..=l1.len()).map(|k| k as f64).collect(),
            guarded: vec![0; l1.len()],
            l1,
            linf,
        }
    }

    #[test]
    fn exact_prediction_has_zero_error() {
        let t: Vec<f64> = (0..12).map(|k| (k as f64 * 0.7).sin()).collect();
        let m = block_errors(&t, &t, 4, 0.0127, DEFAULT_GUARD);
        assert!(m.l1.iter().chain(&m.linf).all(|&v| v == 0.0));
        assert_eq!(m.horizon.len(), 3);
        assert!((m.horizon[2] - 0.0381).abs() < 1e-12);
    }

    #[test]
    fn guard_skips_near_zero_targets() {
        let target = [1.0, 0.001, -2.0, 0.5];
        let pred = [1.5, 5.0, -1.0, 0.5];
        let m = block_errors(&pred, &target, 4, 1.0, DEFAULT_GUARD);
        assert_eq!(m.guarded, vec![1]);
        assert!((m.l1[0] - (0.5 + 0.5 + 0.0) / 3.0).abs() < 1e-15);
        assert_eq!(m.linf[0], 0.5);
    }

    #[test]
    fn relative_errors_of_identical_metrics_vanish() {
        let a = metrics(vec![0.1, 0.2], vec![0.3, 0.4]);
        let r = relative_errors(&a, &a).unwrap();
        assert!(r.l1.iter().chain(&r.linf).all(|v| *v == Some(0.0)));
        let z = metrics(vec![0.0, 0.2], vec![0.3, 0.4]);
        assert_eq!(relative_errors(&a, &z).unwrap().l1[0], None);
        let d = overfit_delta(&metrics(vec![0.15, 0.2], vec![0.3, 0.4]), &a).unwrap();
        assert!((d.l1[0].unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ensemble_matches_textbook_statistics() {
        let runs = vec![
            Some(metrics(vec![1.0], vec![2.0])),
            Some(metrics(vec![3.0], vec![2.0])),
            None,
            Some(metrics(vec![5.0], vec![2.0])),
        ];
        let e = ensemble(&runs).unwrap();
        assert_eq!(e.coverage, (3, 4));
        assert_eq!(e.l1[0].mean, 3.0);
        assert_eq!(e.l1[0].std, 2.0); // sqrt(((−2)² + 0 + 2²) / 2)
        assert_eq!(e.linf[0].std, 0.0);
        assert!(ensemble(&[None]).is_err());
    }

    #[test]
    fn best_network_uses_rank_sums() {
        let a = vec![metrics(vec![0.1], vec![0.5]), metrics(vec![0.2], vec![0.2])];
        let b = vec![metrics(vec![0.3], vec![0.1]), metrics(vec![0.1], vec![0.1])];
        let c = vec![metrics(vec![0.2], vec![0.9]), metrics(vec![0.9], vec![0.9])];
        assert_eq!(best_network(&[a.clone(), b.clone(), c.clone()]), Some(1));
        assert_eq!(best_network(&[a.clone(), a]), Some(0));
        assert_eq!(best_network(&[]), None);
    }

    #[test]
    fn weight_increment_matches_brute_force_norms() {
        let arch = Architecture::new(5, vec![3, 2]).unwrap();
        let early = ModelParams::init(arch.clone(), 1);
        let mut late = early.clone();
        late.data.iter_mut().enumerate().for_each(|(k, v)| *v *= 1.0 + 0.001 * k as f64);

        // Brute force: walk the flat layout and pick output-gate rows.
        let norm = |p: &ModelParams| {
            let mut s = 0.0;
            let mut off = 0;
            let mut input = 5;
            for &h in &[3usize, 2] {
                for (rows, cols) in [(4 * h, input), (4 * h, h)] {
                    for r in 0..rows {
                        for c in 0..cols {
                            if r >= 3 * h {
                                s += p.data[off + r * cols + c].powi(2);
                            }
                        }
                    }
                    off += rows * cols;
                }
                off += 4 * h;
                input = h;
            }
            f64::sqrt(s)
        };
        let expect = (norm(&late) - norm(&early)) / norm(&early);
        let got = weight_increment(&late, &early).unwrap();
        assert!((got - expect).abs() < 1e-14, "{got} vs {expect}");
        assert_eq!(weight_increment(&early, &early).unwrap(), 0.0);
    }

    #[test]
    fn wavespeed_delta_signs() {
        assert_eq!(wavespeed_delta(2.0, 2.0), Some(0.0));
        assert_eq!(wavespeed_delta(1.0, 2.0), Some(-0.5));
        assert_eq!(wavespeed_delta(1.0, 0.0), None);
    }

    proptest! {
        #[test]
        fn linf_dominates_l1(
            target in proptest::collection::vec(-2.0f64..2.0, 24),
            noise in proptest::collection::vec(-0.5f64..0.5, 24),
        ) {
            let pred: Vec<f64> = target.iter().zip(&noise).map(|(a, b)| a + b).collect();
            let m = block_errors(&pred, &target, 6, 0.1, DEFAULT_GUARD);
            for s in 0..4 {
                prop_assert!(m.l1[s] >= 0.0);
                prop_assert!(m.linf[s] >= m.l1[s]);
            }
        }
    }
}
