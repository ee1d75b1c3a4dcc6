//! Evaluation of persisted runs and the aggregated tables.
//!
//! Everything here reads checkpoints and datasets only, so re-running it on
//! the same artifacts reproduces the CSV and JSON outputs byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::{
    best_network, ensemble, forecast_errors, mean_std, overfit_delta, training_speed_error,
    wavespeed_delta, weight_increment, EnsembleStats, ForecastMetrics, Stat,
};
use crate::io;
use crate::pipeline::{checkpoint_path, training_set, RunRecord};
use crate::seqmodel::ModelParams;

/// Horizon steps (1-based) listed in the published tables.
pub const REPORTED_STEPS: [usize; 5] = [1, 3, 5, 7, 9];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case: String,
    pub final_: ForecastMetrics,
    pub early: Option<ForecastMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEval {
    pub dir: PathBuf,
    pub lambda: f64,
    pub seed: u64,
    pub final_epoch: usize,
    pub early_epoch: Option<usize>,
    pub cases: Vec<CaseResult>,
    pub speed_error: f64,
    pub speed_error_early: Option<f64>,
    pub weight_increment: Option<f64>,
}

impl RunEval {
    pub fn case(&self, name: &str) -> Option<&CaseResult> {
        self.cases.iter().find(|c| c.case == name)
    }
}

/// Evaluates the final and early checkpoints of one run directory.
pub fn evaluate_run(dir: &Path, ds: &Dataset, guard: f64) -> Result<RunEval> {
    let record: RunRecord = io::read_json(&dir.join("run.json"))?;
    let cfg = ExperimentConfig::load(&dir.join("config.toml"))?;
    let mut epochs = record.checkpoints.clone();
    epochs.sort_unstable();
    let final_epoch = *epochs
        .last()
        .ok_or_else(|| Error::Missing(format!("{} has no checkpoints", dir.display())))?;
    let early_epoch = epochs.iter().rev().nth(1).copied();
    let load = |e: usize| -> Result<ModelParams> {
        let (p, h) = ModelParams::load(&checkpoint_path(dir, e))?;
        if h.config_hash != record.config_hash {
            return Err(Error::format(checkpoint_path(dir, e), "checkpoint from another configuration"));
        }
        Ok(p)
    };
    let fin = load(final_epoch)?;
    let early = early_epoch.map(load).transpose()?;
    if fin.arch.nx != ds.nx() {
        return Err(Error::Shape(format!(
            "run {} does not match the dataset width",
            dir.display()
        )));
    }
    let dtp = ds.manifest.grid.dt / ds.manifest.domain.period();
    let mut cases = Vec::new();
    for case in &ds.manifest.test {
        let pair = &ds.pairs[case.index];
        cases.push(CaseResult {
            case: case.name.clone(),
            final_: forecast_errors(&fin, pair, dtp, guard)?,
            early: early
                .as_ref()
                .map(|p| forecast_errors(p, pair, dtp, guard))
                .transpose()?,
        });
    }
    let set = training_set(&cfg, ds)?;
    Ok(RunEval {
        dir: dir.to_path_buf(),
        lambda: record.lambda,
        seed: record.seed,
        final_epoch,
        early_epoch,
        cases,
        speed_error: training_speed_error(&fin, &set)?,
        speed_error_early: early.as_ref().map(|p| training_speed_error(p, &set)).transpose()?,
        weight_increment: early.as_ref().map(|p| weight_increment(&fin, p)).transpose()?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub case: String,
    pub final_: EnsembleStats,
    pub early: Option<EnsembleStats>,
    /// Per-step ensemble of `(L1_final − L1_early) / L1_early`.
    pub overfit_l1: Vec<Stat>,
    pub overfit_linf: Vec<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSummary {
    pub lambda: f64,
    pub seeds: Vec<u64>,
    pub cases: Vec<CaseSummary>,
    pub weight_increment: Stat,
    pub speed_error: Stat,
    /// Relative speed-error change from the early to the final checkpoint.
    pub case_a: Stat,
    /// Relative speed-error change against the plain network of the same seed.
    pub case_b: Option<Stat>,
    pub best_seed: Option<u64>,
}

impl LambdaSummary {
    pub fn case(&self, name: &str) -> Option<&CaseSummary> {
        self.cases.iter().find(|c| c.case == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub horizon: Vec<f64>,
    pub reported_steps: Vec<usize>,
    pub lambdas: Vec<LambdaSummary>,
}

impl EvalSummary {
    pub fn lambda(&self, lambda: f64) -> Option<&LambdaSummary> {
        self.lambdas.iter().find(|l| l.lambda == lambda)
    }
}

fn stat_of(values: impl Iterator<Item = Option<f64>>) -> Stat {
    let v: Vec<f64> = values.flatten().collect();
    mean_std(&v)
}

/// Groups runs by λ (ascending) and aggregates every metric over seeds.
pub fn summarize(runs: &[RunEval]) -> Result<EvalSummary> {
    let first = runs
        .first()
        .ok_or_else(|| Error::Missing("no runs to summarize".into()))?;
    let mut groups: BTreeMap<u64, Vec<&RunEval>> = BTreeMap::new();
    for r in runs {
        groups.entry(r.lambda.to_bits()).or_default().push(r);
    }
    let mut lambdas: Vec<f64> = groups.keys().map(|&b| f64::from_bits(b)).collect();
    lambdas.sort_by(|a, b| a.total_cmp(b));
    let plain: BTreeMap<u64, f64> = runs
        .iter()
        .filter(|r| r.lambda == 0.0)
        .map(|r| (r.seed, r.speed_error))
        .collect();
    let case_names: Vec<String> = first.cases.iter().map(|c| c.case.clone()).collect();

    let mut out = Vec::new();
    for lambda in lambdas {
        let mut group = groups[&lambda.to_bits()].clone();
        group.sort_by_key(|r| r.seed);
        let mut cases = Vec::new();
        for name in &case_names {
            let finals: Vec<Option<ForecastMetrics>> =
                group.iter().map(|r| r.case(name).map(|c| c.final_.clone())).collect();
            let earlies: Vec<Option<ForecastMetrics>> = group
                .iter()
                .map(|r| r.case(name).and_then(|c| c.early.clone()))
                .collect();
            let deltas: Vec<_> = group
                .iter()
                .filter_map(|r| {
                    let c = r.case(name)?;
                    overfit_delta(&c.final_, c.early.as_ref()?).ok()
                })
                .collect();
            let tx = first.cases[0].final_.l1.len();
            cases.push(CaseSummary {
                case: name.clone(),
                final_: ensemble(&finals)?,
                early: if earlies.iter().any(Option::is_some) {
                    Some(ensemble(&earlies)?)
                } else {
                    None
                },
                overfit_l1: (0..tx).map(|s| stat_of(deltas.iter().map(|d| d.l1[s]))).collect(),
                overfit_linf: (0..tx).map(|s| stat_of(deltas.iter().map(|d| d.linf[s]))).collect(),
            });
        }
        let complete: Vec<&&RunEval> = group
            .iter()
            .filter(|r| case_names.iter().all(|n| r.case(n).is_some()))
            .collect();
        let ranked: Vec<Vec<ForecastMetrics>> = complete
            .iter()
            .map(|r| case_names.iter().map(|n| r.case(n).unwrap().final_.clone()).collect())
            .collect();
        let case_b = (lambda != 0.0 && !plain.is_empty()).then(|| {
            stat_of(
                group
                    .iter()
                    .map(|r| plain.get(&r.seed).and_then(|&p| wavespeed_delta(r.speed_error, p))),
            )
        });
        out.push(LambdaSummary {
            lambda,
            seeds: group.iter().map(|r| r.seed).collect(),
            cases,
            weight_increment: stat_of(group.iter().map(|r| r.weight_increment)),
            speed_error: stat_of(group.iter().map(|r| Some(r.speed_error))),
            case_a: stat_of(
                group
                    .iter()
                    .map(|r| r.speed_error_early.and_then(|e| wavespeed_delta(r.speed_error, e))),
            ),
            case_b,
            best_seed: best_network(&ranked).map(|i| complete[i].seed),
        });
    }
    Ok(EvalSummary {
        horizon: first.cases[0].final_.horizon.clone(),
        reported_steps: REPORTED_STEPS.to_vec(),
        lambdas: out,
    })
}

/// One row per (λ, seed, epoch, case, step).
pub fn metrics_csv(runs: &[RunEval]) -> String {
    let mut s = String::from("lambda,seed,epoch,case,step,t_over_T,l1,linf,guarded\n");
    for r in runs {
        for c in &r.cases {
            let mut emit = |epoch: usize, m: &ForecastMetrics| {
                for k in 0..m.l1.len() {
                    s.push_str(&format!(
                        "{:e},{},{},{},{},{},{:e},{:e},{}\n",
                        r.lambda,
                        r.seed,
                        epoch,
                        c.case,
                        k + 1,
                        m.horizon[k],
                        m.l1[k],
                        m.linf[k],
                        m.guarded[k]
                    ));
                }
            };
            emit(r.final_epoch, &c.final_);
            if let (Some(e), Some(m)) = (r.early_epoch, &c.early) {
                emit(e, m);
            }
        }
    }
    s
}

pub fn diagnostics_csv(runs: &[RunEval]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    let mut s = String::from("lambda,seed,weight_increment,speed_error_early,speed_error_final,case_a\n");
    for r in runs {
        s.push_str(&format!(
            "{:e},{},{},{},{:e},{}\n",
            r.lambda,
            r.seed,
            opt(r.weight_increment),
            opt(r.speed_error_early),
            r.speed_error,
            opt(r.speed_error_early.and_then(|e| wavespeed_delta(r.speed_error, e)))
        ));
    }
    s
}

/// Table-shaped view: per case and norm, one row per reported step with a
/// `mean ± std` cell per λ.
pub fn tables_json(summary: &EvalSummary) -> serde_json::Value {
    let mut tables = serde_json::Map::new();
    let cases: Vec<String> = summary.lambdas[0].cases.iter().map(|c| c.case.clone()).collect();
    for case in &cases {
        for (norm, pick) in [("l1", 0), ("linf", 1)] {
            let rows: Vec<serde_json::Value> = summary
                .reported_steps
                .iter()
                .filter(|&&s| s <= summary.horizon.len())
                .map(|&s| {
                    let cells: Vec<serde_json::Value> = summary
                        .lambdas
                        .iter()
                        .filter_map(|l| l.case(case))
                        .zip(&summary.lambdas)
                        .map(|(c, l)| {
                            let st = if pick == 0 { c.final_.l1[s - 1] } else { c.final_.linf[s - 1] };
                            serde_json::json!({
                                "lambda": l.lambda,
                                "mean": st.mean,
                                "std": st.std,
                                "n": st.n,
                            })
                        })
                        .collect();
                    serde_json::json!({ "t_over_T": summary.horizon[s - 1], "cells": cells })
                })
                .collect();
            tables.insert(format!("{case}_{norm}"), serde_json::Value::Array(rows));
        }
    }
    serde_json::Value::Object(tables)
}

/// Plain-text rendering of the tables for the terminal.
pub fn render_tables(summary: &EvalSummary) -> String {
    let mut s = String::new();
    let cases: Vec<String> = summary.lambdas[0].cases.iter().map(|c| c.case.clone()).collect();
    for case in &cases {
        for norm in ["L1", "Linf"] {
            s.push_str(&format!("{case} {norm}\n{:>8}", "t/T"));
            for l in &summary.lambdas {
                s.push_str(&format!(" {:>20}", format!("lambda={:e}", l.lambda)));
            }
            s.push('\n');
            for &step in &summary.reported_steps {
                if step > summary.horizon.len() {
                    continue;
                }
                s.push_str(&format!("{:>8.4}", summary.horizon[step - 1]));
                for l in &summary.lambdas {
                    let cell = l.case(case).map(|c| {
                        let st = if norm == "L1" { c.final_.l1[step - 1] } else { c.final_.linf[step - 1] };
                        format!("{:.3} ± {:.3}", st.mean, st.std)
                    });
                    s.push_str(&format!(" {:>20}", cell.unwrap_or_else(|| "-".into())));
                }
                s.push('\n');
            }
            s.push('\n');
        }
    }
    s.push_str("lambda        weight_inc   case_A      case_B      best_seed\n");
    for l in &summary.lambdas {
        s.push_str(&format!(
            "{:<12e}  {:>+9.4}  {:>+9.4}  {:>10}  {:>9}\n",
            l.lambda,
            l.weight_increment.mean,
            l.case_a.mean,
            l.case_b.map(|c| format!("{:+.4}", c.mean)).unwrap_or_else(|| "-".into()),
            l.best_seed.map(|s| s.to_string()).unwrap_or_else(|| "-".into())
        ));
    }
    s
}

/// Writes `metrics.csv`, `diagnostics.csv`, `summary.json` and `tables.json`.
pub fn write_eval(dir: &Path, runs: &[RunEval]) -> Result<EvalSummary> {
    let summary = summarize(runs)?;
    io::ensure_dir(dir)?;
    io::write_text(&dir.join("metrics.csv"), &metrics_csv(runs))?;
    io::write_text(&dir.join("diagnostics.csv"), &diagnostics_csv(runs))?;
    io::write_json(&dir.join("summary.json"), &summary)?;
    io::write_json(&dir.join("tables.json"), &tables_json(&summary))?;
    Ok(summary)
}

/// Run directories (those holding `run.json`) below `root`, sorted.
pub fn find_runs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        if d.join("run.json").is_file() {
            out.push(d);
            continue;
        }
        let entries = std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))?;
        for e in entries {
            let p = e.map_err(|e| Error::io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}
