//! Stages wiring a configuration to artifacts on disk.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::dataset::{
    coarsen, make_windows, split, window_at, Dataset, DatasetManifest, NormalizationSpec,
    TestCase, TestSelector, DATASET_FORMAT_VERSION,
};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::io;
use crate::kinematics::{wave_speed, MaskThresholds, StencilSpec, WaveSpeedField};
use crate::seqmodel::{CheckpointHeader, ModelParams, CHECKPOINT_VERSION};
use crate::training::{metrics_csv, train, EpochRecord, TrainingSet};
use crate::wavegen::{solve_fdm, GridSpec, PressureField};

pub const FIELD_FORMAT_VERSION: u32 = 1;

/// Solver-mesh field, scaled so the training span of the ML mesh peaks at `p0`.
pub fn generate(cfg: &ExperimentConfig) -> Result<PressureField> {
    cfg.validate()?;
    let fine = solve_fdm(&cfg.domain, &cfg.source_spec(), &cfg.fine_grid()?, cfg.grid.boundary)?;
    let coarse = coarsen(&fine, cfg.grid.refinement, false)?;
    let w = &cfg.data.window;
    let end = (cfg.data.train_windows - 1) * w.stride + 2 * w.tx;
    let peak = coarse.values[..end * coarse.nx()]
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if !(peak > 0.0) {
        return Err(Error::Config("source produces no pressure in the training span".into()));
    }
    Ok(fine.scaled(cfg.data.p0 / peak))
}

pub fn ml_field(cfg: &ExperimentConfig, fine: &PressureField) -> Result<PressureField> {
    coarsen(fine, cfg.grid.refinement, false)
}

/// Training windows followed by the held-out cases.
pub fn build_dataset(cfg: &ExperimentConfig, ml: &PressureField) -> Result<Dataset> {
    let norm = NormalizationSpec::new(cfg.data.p0)?;
    let w = cfg.data.window;
    let mut pairs = make_windows(ml, &w, &norm)?;
    pairs.truncate(cfg.data.train_windows);
    if pairs.len() < cfg.data.train_windows {
        return Err(Error::TooShort {
            required: (cfg.data.train_windows - 1) * w.stride + 2 * w.tx,
            available: ml.nt(),
        });
    }
    let mut test = Vec::new();
    for case in &cfg.data.cases {
        let origin = cfg.case_origin(case)?;
        test.push(TestCase {
            name: case.name.clone(),
            index: pairs.len(),
        });
        pairs.push(window_at(ml, origin, w.tx, &norm)?);
    }
    let selector = TestSelector {
        indices: test.iter().map(|t| t.index).collect(),
    };
    split(&pairs, &selector)?;
    let train_idx: Vec<usize> = (0..cfg.data.train_windows).collect();
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        domain: cfg.domain,
        source: ml.source,
        grid: ml.grid,
        factor: cfg.grid.refinement,
        window: w,
        normalization: norm,
        origins: pairs.iter().map(|p| p.origin_step).collect(),
        train: train_idx,
        test,
    };
    Ok(Dataset { manifest, pairs })
}

pub fn training_set(cfg: &ExperimentConfig, ds: &Dataset) -> Result<TrainingSet> {
    TrainingSet::new(
        ds.train_pairs().into_iter().cloned().collect(),
        ds.manifest.grid.dt,
        ds.manifest.grid.dx,
        ds.manifest.normalization.p0,
        cfg.regularizer.thresholds,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FieldSidecar {
    format_version: u32,
    grid: GridSpec,
    domain: crate::wavegen::DomainSpec,
    source: Option<crate::wavegen::SourceSpec>,
    boundary: Option<crate::wavegen::BoundaryKind>,
}

/// `field.bin` (little-endian f64, row-major `nt x nx`) plus `field.json`.
pub fn save_field(dir: &Path, field: &PressureField) -> Result<()> {
    io::ensure_dir(dir)?;
    io::write_f64s(&dir.join("field.bin"), &field.values)?;
    io::write_json(
        &dir.join("field.json"),
        &FieldSidecar {
            format_version: FIELD_FORMAT_VERSION,
            grid: field.grid,
            domain: field.domain,
            source: field.source,
            boundary: field.boundary,
        },
    )
}

pub fn load_field(dir: &Path) -> Result<PressureField> {
    let path = dir.join("field.json");
    let meta: FieldSidecar = io::read_json(&path)?;
    if meta.format_version != FIELD_FORMAT_VERSION {
        return Err(Error::format(&path, "unsupported field version"));
    }
    let values = io::read_f64s(&dir.join("field.bin"), Some(meta.grid.len()))?;
    let mut f = PressureField::from_values(values, meta.grid, meta.domain)?;
    f.source = meta.source;
    f.boundary = meta.boundary;
    Ok(f)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SpeedSidecar {
    format_version: u32,
    grid: GridSpec,
    thresholds: MaskThresholds,
    unmasked: usize,
}

/// `speeds.bin`, `mask.bin` (bits packed LSB first) and `speeds.json`.
pub fn save_wave_speed(dir: &Path, ws: &WaveSpeedField, thresholds: &MaskThresholds) -> Result<()> {
    io::ensure_dir(dir)?;
    io::write_f64s(&dir.join("speeds.bin"), &ws.speeds)?;
    std::fs::write(dir.join("mask.bin"), io::pack_bits(&ws.mask))
        .map_err(|e| Error::io(dir.join("mask.bin"), e))?;
    io::write_json(
        &dir.join("speeds.json"),
        &SpeedSidecar {
            format_version: FIELD_FORMAT_VERSION,
            grid: ws.grid,
            thresholds: *thresholds,
            unmasked: ws.unmasked_count(),
        },
    )
}

pub fn load_wave_speed(dir: &Path) -> Result<WaveSpeedField> {
    let meta: SpeedSidecar = io::read_json(&dir.join("speeds.json"))?;
    let n = meta.grid.len();
    let speeds = io::read_f64s(&dir.join("speeds.bin"), Some(n))?;
    let bytes = io::read_bytes(&dir.join("mask.bin"))?;
    if bytes.len() != n.div_ceil(8) {
        return Err(Error::format(dir.join("mask.bin"), "mask size does not match grid"));
    }
    Ok(WaveSpeedField {
        speeds,
        mask: io::unpack_bits(&bytes, n),
        grid: meta.grid,
    })
}

pub fn compute_wave_speed(field: &PressureField, thresholds: &MaskThresholds) -> Result<WaveSpeedField> {
    wave_speed(field, &StencilSpec::default(), thresholds)
}

/// Location of one (λ, seed) run below the output root.
pub fn run_dir(root: &Path, lambda: f64, seed: u64) -> PathBuf {
    root.join(format!("lambda_{lambda:e}")).join(format!("seed_{seed}"))
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch}.wfck"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub lambda: f64,
    pub seed: u64,
    pub config_hash: String,
    pub version: String,
    pub checkpoints: Vec<usize>,
    pub final_mse: f64,
    pub final_reg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    pub force: bool,
    pub dry_run: bool,
}

/// Trains one configuration into `dir`: config snapshot, metrics CSV,
/// checkpoints and a run record. Refuses to overwrite an existing run of the
/// same configuration unless forced.
pub fn train_run(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    dir: &Path,
    opts: RunOptions,
    mode: ExecMode,
) -> Result<Option<RunRecord>> {
    cfg.validate()?;
    if ds.nx() != cfg.grid.nx_ml || ds.tx() != cfg.data.window.tx {
        return Err(Error::Config("dataset does not match the configuration".into()));
    }
    let hash = cfg.hash();
    let record_path = dir.join("run.json");
    if record_path.exists() && !opts.force {
        return Err(Error::RunExists(dir.to_path_buf()));
    }
    if opts.dry_run {
        return Ok(None);
    }
    io::ensure_dir(dir)?;
    io::write_text(&dir.join("config.toml"), &cfg.to_toml())?;
    let set = training_set(cfg, ds)?;
    let init = ModelParams::init(cfg.architecture(), cfg.seed);
    let header = |epoch| CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        architecture: cfg.architecture(),
        config_hash: hash.clone(),
        epoch,
        seed: cfg.seed,
        lambda: cfg.regularizer.lambda,
    };
    let outcome = train(
        init,
        &set,
        &cfg.regularizer,
        &cfg.optimizer,
        cfg.seed,
        mode,
        &mut |epoch, params| params.save(&checkpoint_path(dir, epoch), &header(epoch)),
    )?;
    io::write_text(&dir.join("metrics.csv"), &metrics_csv(&outcome.history))?;
    let last: &EpochRecord = outcome.history.last().unwrap();
    let record = RunRecord {
        lambda: cfg.regularizer.lambda,
        seed: cfg.seed,
        config_hash: hash,
        version: env!("CARGO_PKG_VERSION").to_string(),
        checkpoints: outcome.checkpoints.iter().map(|(e, _)| *e).collect(),
        final_mse: last.mse,
        final_reg: last.reg,
    };
    io::write_json(&record_path, &record)?;
    Ok(Some(record))
}

/// Every (λ, seed) combination of the sweep, run up to `workers` at a time.
/// Each run trains sequentially inside so concurrent runs do not compete for
/// the same pool; results come back in grid order.
pub fn sweep(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    root: &Path,
    opts: RunOptions,
) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let grid: Vec<(f64, u64)> = cfg
        .sweep
        .lambdas
        .iter()
        .flat_map(|&l| cfg.sweep.seeds.iter().map(move |&s| (l, s)))
        .collect();
    let workers = cfg.sweep.workers.max(1);
    let (outer, inner) = if workers > 1 && cfg.parallel {
        (ExecMode::Parallel, ExecMode::Sequential)
    } else {
        (ExecMode::Sequential, cfg.exec_mode())
    };
    let results = exec::with_workers(workers, || {
        exec::map(outer, &grid, |&(lambda, seed)| {
            let run = cfg.for_run(lambda, seed);
            train_run(&run, ds, &run_dir(root, lambda, seed), opts, inner)
        })
    });
    let mut out = Vec::new();
    for r in results {
        if let Some(rec) = r? {
            out.push(rec);
        }
    }
    Ok(out)
}
