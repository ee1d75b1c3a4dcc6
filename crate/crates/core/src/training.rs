//! Physics-regularized loss, its exact gradient and the ADAM training loop.
//!
//! The loss of a batch is
//! `½ p0² mean (p̂ − p)² + λ² mean_w [ Σ_masked (ĉ/c − 1)² / N_w ]`
//! where pressures are stored normalized by `p0`, so the data term is in
//! physical units and `λ` carries pressure units. `ĉ` is the speed of the
//! predicted block, `c` that of the target block, both obtained with the
//! kinematics stencil on `[last input state; block]`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::SequencePair;
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::kinematics::{classify, derivatives, derivatives_adjoint, MaskThresholds};
use crate::seqmodel::{backward_tape, rollout_tape, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizerConfig {
    /// Pressure units, like the input fields.
    pub lambda: f64,
    #[serde(default = "regularizer_thresholds")]
    pub thresholds: MaskThresholds,
}

/// Quiet threshold of the regularizer mask and prediction floor. Stricter
/// than the kinematics default: cells with barely detectable slopes give
/// ratio estimates whose gradients dwarf the data term.
pub const REGULARIZER_QUIET: f64 = 0.02;

fn regularizer_thresholds() -> MaskThresholds {
    MaskThresholds {
        quiet: REGULARIZER_QUIET,
        ..MaskThresholds::default()
    }
}

impl RegularizerConfig {
    pub fn plain() -> Self {
        RegularizerConfig {
            lambda: 0.0,
            thresholds: regularizer_thresholds(),
        }
    }

    pub fn with_lambda(lambda: f64) -> Self {
        RegularizerConfig {
            lambda,
            ..Self::plain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        self.thresholds.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSchedule {
    pub learning_rate: f64,
    pub decay: f64,
    /// Epochs between decays.
    pub decay_step: usize,
    pub epochs: usize,
    /// Epochs after which a checkpoint is emitted; the final epoch always is.
    #[serde(default)]
    pub checkpoints: Vec<usize>,
    /// Windows per update; the full training set when absent.
    #[serde(default)]
    pub batch_size: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerSchedule {
    fn default() -> Self {
        OptimizerSchedule {
            learning_rate: 5e-4,
            decay: 0.9,
            decay_step: 1000,
            epochs: 3500,
            checkpoints: vec![2750],
            batch_size: None,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerSchedule {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.learning_rate, self.decay, self.epsilon];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Config("learning rate, decay and epsilon must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("ADAM betas must lie in [0, 1)".into()));
        }
        if self.epochs == 0 || self.decay_step == 0 {
            return Err(Error::Config("epochs and decay step must be positive".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if let Some(&e) = self.checkpoints.iter().find(|&&e| e == 0 || e > self.epochs) {
            return Err(Error::Config(format!(
                "checkpoint epoch {e} outside 1..={}",
                self.epochs
            )));
        }
        Ok(())
    }

    /// Stepped decay: `lr0 * decay^floor(epoch / decay_step)`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay.powi((epoch / self.decay_step) as i32)
    }

    /// Sorted, deduplicated checkpoint epochs including the last one.
    pub fn checkpoint_epochs(&self) -> Vec<usize> {
        let mut v = self.checkpoints.clone();
        v.push(self.epochs);
        v.sort_unstable();
        v.dedup();
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub mse: f64,
    pub reg: f64,
}

/// Target speeds and mask of one window's forecast block.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetKinematics {
    /// Target speed per block cell (`tx x nx`), zero where masked.
    pub speeds: Vec<f64>,
    pub mask: Vec<bool>,
    pub count: usize,
}

/// Prepends the last input state so the time stencil has a past neighbour.
fn extended(pair: &SequencePair, block: &[f64]) -> Vec<f64> {
    let mut e = Vec::with_capacity((pair.tx + 1) * pair.nx);
    e.extend_from_slice(pair.input_row(pair.tx - 1));
    e.extend_from_slice(block);
    e
}

impl TargetKinematics {
    pub fn new(pair: &SequencePair, dt: f64, dx: f64, thresholds: &MaskThresholds) -> Self {
        let (tx, nx) = (pair.tx, pair.nx);
        let e = extended(pair, &pair.target);
        let d = derivatives(&e, tx + 1, nx, dt, dx);
        let reference = thresholds.reference_amplitude.unwrap_or(1.0);
        let est = classify(&d, dt, dx, reference, thresholds);
        let speeds = est.speeds[nx..].to_vec();
        let mask = est.mask[nx..].to_vec();
        let count = mask.iter().filter(|&&m| m).count();
        TargetKinematics { speeds, mask, count }
    }
}

/// Windows plus everything the loss needs besides the parameters.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub pairs: Vec<SequencePair>,
    pub kinematics: Vec<TargetKinematics>,
    pub dt: f64,
    pub dx: f64,
    pub p0: f64,
    pub thresholds: MaskThresholds,
}

impl TrainingSet {
    pub fn new(
        pairs: Vec<SequencePair>,
        dt: f64,
        dx: f64,
        p0: f64,
        thresholds: MaskThresholds,
    ) -> Result<Self> {
        thresholds.validate()?;
        if pairs.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        if !(dt > 0.0 && dx > 0.0 && p0 > 0.0) {
            return Err(Error::Config("grid steps and p0 must be positive".into()));
        }
        let (tx, nx) = (pairs[0].tx, pairs[0].nx);
        if pairs.iter().any(|p| p.tx != tx || p.nx != nx) {
            return Err(Error::Shape("windows of mixed shape".into()));
        }
        if nx < 3 {
            return Err(Error::Shape("windows need at least 3 spatial points".into()));
        }
        let kinematics = pairs
            .iter()
            .map(|p| TargetKinematics::new(p, dt, dx, &thresholds))
            .collect();
        Ok(TrainingSet {
            pairs,
            kinematics,
            dt,
            dx,
            p0,
            thresholds,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn all(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }
}

/// Predicted speed `|∂t p̂ / ∂x p̂|` on a forecast block and the cells where
/// it may be compared with the target (target mask minus the denominator
/// floor).
pub fn predicted_speeds(
    set: &TrainingSet,
    w: usize,
    prediction: &[f64],
) -> (Vec<f64>, Vec<bool>) {
    let pair = &set.pairs[w];
    let kin = &set.kinematics[w];
    let (tx, nx) = (pair.tx, pair.nx);
    let e = extended(pair, prediction);
    let d = derivatives(&e, tx + 1, nx, set.dt, set.dx);
    let floor = set.thresholds.quiet * set.thresholds.reference_amplitude.unwrap_or(1.0) / set.dx;
    let mut speeds = vec![0.0; tx * nx];
    let mut active = vec![false; tx * nx];
    for k in 0..tx * nx {
        let (pt, px) = (d.dt[nx + k], d.dx[nx + k]);
        if kin.mask[k] && px.abs() >= floor {
            active[k] = true;
            speeds[k] = (pt / px).abs();
        }
    }
    (speeds, active)
}

/// `Σ (ĉ/c − 1)² / N` over the comparable cells of one forecast block.
pub fn speed_misfit(set: &TrainingSet, w: usize, prediction: &[f64]) -> f64 {
    let kin = &set.kinematics[w];
    if kin.count == 0 {
        return 0.0;
    }
    let (speeds, active) = predicted_speeds(set, w, prediction);
    let sum: f64 = (0..speeds.len())
        .filter(|&k| active[k])
        .map(|k| (speeds[k] / kin.speeds[k] - 1.0).powi(2))
        .sum();
    sum / kin.count as f64
}

struct WindowTerms {
    mse: f64,
    misfit: f64,
    grad: Option<Vec<f64>>,
}

fn window_terms(
    params: &ModelParams,
    set: &TrainingSet,
    w: usize,
    lambda: f64,
    want_grad: bool,
) -> Result<WindowTerms> {
    let pair = &set.pairs[w];
    let kin = &set.kinematics[w];
    let (tx, nx) = (pair.tx, pair.nx);
    let cells = (tx * nx) as f64;
    let p0sq = set.p0 * set.p0;

    let tape = rollout_tape(params, &pair.input, tx)?;
    let pred = &tape.predictions;

    let mut mse = 0.0;
    let mut d_pred = vec![0.0; tx * nx];
    for k in 0..tx * nx {
        let diff = pred[k] - pair.target[k];
        mse += diff * diff;
        d_pred[k] = p0sq * diff / cells;
    }
    mse *= 0.5 * p0sq / cells;

    let mut misfit = 0.0;
    if lambda > 0.0 && kin.count > 0 {
        let e = extended(pair, pred);
        let d = derivatives(&e, tx + 1, nx, set.dt, set.dx);
        let floor =
            set.thresholds.quiet * set.thresholds.reference_amplitude.unwrap_or(1.0) / set.dx;
        let n = kin.count as f64;
        let scale = lambda * lambda / n;
        let mut g_t = vec![0.0; (tx + 1) * nx];
        let mut g_x = vec![0.0; (tx + 1) * nx];
        let mut any = false;
        for k in 0..tx * nx {
            if !kin.mask[k] {
                continue;
            }
            let (pt, px) = (d.dt[nx + k], d.dx[nx + k]);
            if px.abs() < floor {
                continue;
            }
            let c = kin.speeds[k];
            let s = (pt / px).abs() / c - 1.0;
            misfit += s * s;
            if want_grad {
                let coef = scale * 2.0 * s / c;
                g_t[nx + k] = coef * pt.signum() / px.abs();
                g_x[nx + k] = -coef * pt.abs() * px.signum() / (px * px);
                any = true;
            }
        }
        misfit /= n;
        if any {
            let mut out = vec![0.0; (tx + 1) * nx];
            derivatives_adjoint(&g_t, &g_x, tx + 1, nx, set.dt, set.dx, &mut out);
            for (dp, o) in d_pred.iter_mut().zip(&out[nx..]) {
                *dp += o;
            }
        }
    }

    let grad = want_grad.then(|| {
        let mut g = vec![0.0; params.data.len()];
        backward_tape(params, &tape, &d_pred, &mut g);
        g
    });
    Ok(WindowTerms { mse, misfit, grad })
}

fn batch_terms(
    params: &ModelParams,
    set: &TrainingSet,
    batch: &[usize],
    reg: &RegularizerConfig,
    mode: ExecMode,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    if let Some(&w) = batch.iter().find(|&&w| w >= set.len()) {
        return Err(Error::Shape(format!("window {w} outside the training set")));
    }
    if params.arch.nx != set.pairs[0].nx {
        return Err(Error::Shape(format!(
            "model width {} does not match windows of width {}",
            params.arch.nx, set.pairs[0].nx
        )));
    }
    let terms = exec::map(mode, batch, |&w| window_terms(params, set, w, reg.lambda, want_grad));
    let b = batch.len() as f64;
    let mut mse = 0.0;
    let mut misfit = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; params.data.len()]);
    for t in terms {
        let t = t?;
        mse += t.mse;
        misfit += t.misfit;
        if let (Some(acc), Some(g)) = (grad.as_mut(), t.grad) {
            for (a, v) in acc.iter_mut().zip(&g) {
                *a += v;
            }
        }
    }
    if let Some(g) = grad.as_mut() {
        g.iter_mut().for_each(|v| *v /= b);
    }
    let mse = mse / b;
    let reg_term = reg.lambda * reg.lambda * misfit / b;
    Ok((
        LossBreakdown {
            total: mse + reg_term,
            mse,
            reg: reg_term,
        },
        grad,
    ))
}

pub fn loss(
    params: &ModelParams,
    set: &TrainingSet,
    batch: &[usize],
    reg: &RegularizerConfig,
    mode: ExecMode,
) -> Result<LossBreakdown> {
    Ok(batch_terms(params, set, batch, reg, mode, false)?.0)
}

/// Loss and its exact gradient with respect to every parameter.
pub fn grad(
    params: &ModelParams,
    set: &TrainingSet,
    batch: &[usize],
    reg: &RegularizerConfig,
    mode: ExecMode,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let (l, g) = batch_terms(params, set, batch, reg, mode, true)?;
    let g = g.unwrap();
    if let Some(k) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient(params.arch.layout().name(k)));
    }
    Ok((l, g))
}

#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, s: &OptimizerSchedule) {
        self.t += 1;
        let c1 = 1.0 - s.beta1.powi(self.t);
        let c2 = 1.0 - s.beta2.powi(self.t);
        for k in 0..params.len() {
            let g = grad[k];
            self.m[k] = s.beta1 * self.m[k] + (1.0 - s.beta1) * g;
            self.v[k] = s.beta2 * self.v[k] + (1.0 - s.beta2) * g * g;
            let mh = self.m[k] / c1;
            let vh = self.v[k] / c2;
            params[k] -= lr * mh / (vh.sqrt() + s.epsilon);
        }
    }
}

/// Metrics of one completed epoch, measured on the batches it trained on
/// before each update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mse: f64,
    pub reg: f64,
    pub total: f64,
}

pub fn metrics_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,lr,mse,reg,total\n");
    for r in history {
        s.push_str(&format!("{},{:e},{:e},{:e},{:e}\n", r.epoch, r.lr, r.mse, r.reg, r.total));
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub checkpoints: Vec<(usize, ModelParams)>,
}

/// Trains from `init`. `on_checkpoint` sees every checkpoint as soon as it
/// is reached, so a later divergence leaves earlier ones persisted.
pub fn train(
    init: ModelParams,
    set: &TrainingSet,
    reg: &RegularizerConfig,
    schedule: &OptimizerSchedule,
    seed: u64,
    mode: ExecMode,
    on_checkpoint: &mut dyn FnMut(usize, &ModelParams) -> Result<()>,
) -> Result<TrainOutcome> {
    reg.validate()?;
    schedule.validate()?;
    init.validate()?;
    let mut params = init;
    let mut adam = Adam::new(params.data.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = set.all();
    let batch_size = schedule.batch_size.unwrap_or(set.len()).min(set.len());
    let marks = schedule.checkpoint_epochs();
    let mut history = Vec::with_capacity(schedule.epochs);
    let mut checkpoints = Vec::new();

    for epoch in 0..schedule.epochs {
        let lr = schedule.learning_rate_at(epoch);
        if batch_size < set.len() {
            order.shuffle(&mut rng);
        }
        let mut acc = LossBreakdown::default();
        let mut seen = 0usize;
        for batch in order.chunks(batch_size) {
            let (l, g) = grad(&params, set, batch, reg, mode).map_err(|e| match e {
                Error::NonFiniteActivation { .. } => Error::Diverged {
                    epoch: epoch + 1,
                    loss: f64::NAN,
                },
                other => other,
            })?;
            if !l.total.is_finite() {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    loss: l.total,
                });
            }
            let wgt = batch.len() as f64;
            acc.mse += l.mse * wgt;
            acc.reg += l.reg * wgt;
            acc.total += l.total * wgt;
            seen += batch.len();
            adam.step(&mut params.data, &g, lr, schedule);
        }
        let n = seen as f64;
        history.push(EpochRecord {
            epoch: epoch + 1,
            lr,
            mse: acc.mse / n,
            reg: acc.reg / n,
            total: acc.total / n,
        });
        if let Some(k) = params.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(params.arch.layout().name(k)));
        }
        if marks.contains(&(epoch + 1)) {
            on_checkpoint(epoch + 1, &params)?;
            checkpoints.push((epoch + 1, params.clone()));
        }
    }
    Ok(TrainOutcome {
        params,
        history,
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqmodel::Architecture;

    /// Windows cut from a sampled right-going sine so targets have clean speeds.
    fn wave_set(nx: usize, tx: usize, count: usize, speed: f64) -> Vec<SequencePair> {
        let dx = 1.0 / nx as f64;
        let dt = 0.5 * dx;
        let f = |n: usize, j: usize| {
            let (t, x) = (n as f64 * dt, j as f64 * dx);
            (2.0 * std::f64::consts::PI * (x - speed * t)).sin() * 0.9
        };
        (0..count)
            .map(|w| {
                let o = w * tx;
                let row = |n: usize| (0..nx).map(move |j| f(n, j));
                SequencePair {
                    tx,
                    nx,
                    input: (o..o + tx).flat_map(row).collect(),
                    target: (o + tx..o + 2 * tx).flat_map(row).collect(),
                    origin_step: o,
                    origin_time: o as f64 * dt,
                }
            })
            .collect()
    }

    fn set(nx: usize, tx: usize, count: usize, p0: f64) -> TrainingSet {
        let dx = 1.0 / nx as f64;
        TrainingSet::new(wave_set(nx, tx, count, 1.0), 0.5 * dx, dx, p0, MaskThresholds::default())
            .unwrap()
    }

    #[test]
    fn schedule_is_stepped() {
        let s = OptimizerSchedule::default();
        assert_eq!(s.learning_rate_at(999), 5e-4);
        assert!((s.learning_rate_at(1000) - 0.00045).abs() < 1e-15);
        assert!((s.learning_rate_at(2000) - 0.000405).abs() < 1e-15);
        assert_eq!(s.checkpoint_epochs(), vec![2750, 3500]);
    }

    #[test]
    fn schedule_validation() {
        let s = OptimizerSchedule {
            checkpoints: vec![4000],
            ..Default::default()
        };
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        let s = OptimizerSchedule {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(s.validate().is_err());
        assert!(RegularizerConfig::with_lambda(-1.0).validate().is_err());
    }

    #[test]
    fn zero_lambda_is_plain_mse() {
        let ts = set(8, 3, 3, 2.0);
        let p = ModelParams::init(Architecture::new(8, vec![5]).unwrap(), 1);
        let (l, g) = grad(&p, &ts, &ts.all(), &RegularizerConfig::plain(), ExecMode::Sequential).unwrap();
        assert_eq!(l.reg, 0.0);
        assert_eq!(l.total, l.mse);

        // Independent plain MSE and its gradient through the tape.
        let mut mse = 0.0;
        let mut g_ref = vec![0.0; p.data.len()];
        for pair in &ts.pairs {
            let tape = rollout_tape(&p, &pair.input, 3).unwrap();
            let n = (3 * 8) as f64;
            let d: Vec<f64> = tape
                .predictions
                .iter()
                .zip(&pair.target)
                .map(|(a, b)| 4.0 * (a - b) / n / 3.0)
                .collect();
            mse += tape
                .predictions
                .iter()
                .zip(&pair.target)
                .map(|(a, b)| 0.5 * 4.0 * (a - b) * (a - b) / n)
                .sum::<f64>()
                / 3.0;
            backward_tape(&p, &tape, &d, &mut g_ref);
        }
        assert!((l.mse - mse).abs() <= 1e-14 * mse);
        for (a, b) in g.iter().zip(&g_ref) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn perfect_prediction_has_zero_loss_and_gradient() {
        // A model whose head ignores the hidden state and outputs a constant
        // equal to a constant target field.
        let nx = 6;
        let a = Architecture::new(nx, vec![3]).unwrap();
        let layout = a.layout();
        let mut p = ModelParams::zeros(a);
        for j in 0..nx {
            p.data[layout.head_b + j] = 0.25;
        }
        let pair = SequencePair {
            tx: 2,
            nx,
            input: vec![0.25; 2 * nx],
            target: vec![0.25; 2 * nx],
            origin_step: 0,
            origin_time: 0.0,
        };
        let ts = TrainingSet::new(vec![pair], 0.1, 0.2, 1.0, MaskThresholds::default()).unwrap();
        let (l, g) = grad(&p, &ts, &[0], &RegularizerConfig::with_lambda(0.3), ExecMode::Sequential).unwrap();
        assert_eq!(l.total, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn double_speed_prediction_gives_unit_misfit() {
        let (nx, tx) = (64, 4);
        let dx = 1.0 / nx as f64;
        let slow = wave_set(nx, tx, 1, 1.0).remove(0);
        let fast = wave_set(nx, tx, 1, 2.0).remove(0);
        let target = TrainingSet::new(vec![slow], 0.5 * dx, dx, 1.0, MaskThresholds::default()).unwrap();
        // The forecast block is scored against the slow target kinematics but
        // its temporal ring comes from its own history.
        let mut ts = TrainingSet::new(vec![fast.clone()], 0.5 * dx, dx, 1.0, MaskThresholds::default()).unwrap();
        ts.kinematics = target.kinematics.clone();

        let kin = &mut ts.kinematics[0];
        let first = (nx..tx * nx).find(|&k| kin.mask[k] && k % nx > 2 && k % nx < nx - 3).unwrap();
        kin.mask.iter_mut().enumerate().for_each(|(k, m)| *m = k == first);
        kin.count = 1;

        let misfit = speed_misfit(&ts, 0, &fast.target);
        assert!((misfit - 1.0).abs() < 0.05, "misfit {misfit}");
        let l = loss(
            &ModelParams::init(Architecture::new(nx, vec![2]).unwrap(), 0),
            &ts,
            &[0],
            &RegularizerConfig::with_lambda(1.0),
            ExecMode::Sequential,
        )
        .unwrap();
        assert!(l.reg >= 0.0 && l.total >= l.mse);
    }

    #[test]
    fn masked_cells_carry_no_regularizer_gradient() {
        let mut ts = set(8, 3, 2, 1.0);
        let p = ModelParams::init(Architecture::new(8, vec![4]).unwrap(), 3);
        let reg = RegularizerConfig::with_lambda(0.5);
        let plain = RegularizerConfig::plain();
        // Fully masked: regularizer contributes nothing.
        for k in ts.kinematics.iter_mut() {
            k.mask.iter_mut().for_each(|m| *m = false);
            k.count = 0;
        }
        let (l, g) = grad(&p, &ts, &ts.all(), &reg, ExecMode::Sequential).unwrap();
        let (l0, g0) = grad(&p, &ts, &ts.all(), &plain, ExecMode::Sequential).unwrap();
        assert_eq!(l.reg, 0.0);
        assert_eq!(l.total, l0.total);
        assert_eq!(g, g0);
    }

    #[test]
    fn perturbing_masked_target_speeds_changes_nothing() {
        let ts = set(8, 3, 2, 1.0);
        let p = ModelParams::init(Architecture::new(8, vec![4]).unwrap(), 5);
        let reg = RegularizerConfig::with_lambda(0.5);
        let (l, g) = grad(&p, &ts, &ts.all(), &reg, ExecMode::Sequential).unwrap();
        let mut ts2 = ts.clone();
        for kin in ts2.kinematics.iter_mut() {
            for k in 0..kin.mask.len() {
                if !kin.mask[k] {
                    kin.speeds[k] = 123.0;
                }
            }
        }
        let (l2, g2) = grad(&p, &ts2, &ts2.all(), &reg, ExecMode::Sequential).unwrap();
        assert_eq!(l, l2);
        assert_eq!(g, g2);
    }

    #[test]
    fn full_batch_loss_ignores_window_order() {
        let ts = set(8, 3, 4, 1.0);
        let p = ModelParams::init(Architecture::new(8, vec![4]).unwrap(), 8);
        let reg = RegularizerConfig::with_lambda(0.2);
        let a = loss(&p, &ts, &[0, 1, 2, 3], &reg, ExecMode::Sequential).unwrap();
        let b = loss(&p, &ts, &[3, 1, 0, 2], &reg, ExecMode::Sequential).unwrap();
        assert!((a.total - b.total).abs() <= 1e-15 * a.total);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for lambda in [0.0, 0.3] {
            let ts = set(8, 3, 2, 0.5);
            let mut a = Architecture::new(8, vec![3]).unwrap();
            a.rollout = crate::seqmodel::RolloutMode::Stateless;
            let p = ModelParams::init(a, 21);
            let reg = RegularizerConfig::with_lambda(lambda);
            let (_, g) = grad(&p, &ts, &ts.all(), &reg, ExecMode::Sequential).unwrap();
            let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for k in 0..p.data.len() {
                let h = 1e-6 * p.data[k].abs().max(1.0);
                let mut q = p.clone();
                q.data[k] += h;
                let lp = loss(&q, &ts, &ts.all(), &reg, ExecMode::Sequential).unwrap().total;
                q.data[k] -= 2.0 * h;
                let lm = loss(&q, &ts, &ts.all(), &reg, ExecMode::Sequential).unwrap().total;
                let fd = (lp - lm) / (2.0 * h);
                let rel = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-8 * gmax);
                assert!(rel < 1e-4, "{}: fd {fd} analytic {} (lambda {lambda})", p.arch.layout().name(k), g[k]);
            }
        }
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let ts = set(8, 3, 3, 1.0);
        let a = Architecture::new(8, vec![6]).unwrap();
        let schedule = OptimizerSchedule {
            learning_rate: 1e-2,
            epochs: 60,
            checkpoints: vec![30],
            batch_size: Some(2),
            ..Default::default()
        };
        let reg = RegularizerConfig::with_lambda(0.1);
        let run = |mode| {
            let mut seen = Vec::new();
            let out = train(
                ModelParams::init(a.clone(), 4),
                &ts,
                &reg,
                &schedule,
                9,
                mode,
                &mut |e, _| {
                    seen.push(e);
                    Ok(())
                },
            )
            .unwrap();
            (out, seen)
        };
        let (o1, seen) = run(ExecMode::Sequential);
        let (o2, _) = run(ExecMode::Parallel);
        assert_eq!(seen, vec![30, 60]);
        assert_eq!(o1.checkpoints.len(), 2);
        assert!(o1.history.last().unwrap().mse < o1.history[0].mse);
        assert_eq!(
            o1.params.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            o2.params.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(metrics_csv(&o1.history), metrics_csv(&o2.history));
    }

    #[test]
    fn divergence_is_reported() {
        let ts = set(8, 3, 2, 1.0);
        let mut p = ModelParams::init(Architecture::new(8, vec![3]).unwrap(), 1);
        let n = p.data.len();
        p.data[n - 1] = f64::INFINITY;
        let err = train(
            p,
            &ts,
            &RegularizerConfig::plain(),
            &OptimizerSchedule {
                epochs: 2,
                checkpoints: vec![],
                ..Default::default()
            },
            0,
            ExecMode::Sequential,
            &mut |_, _| Ok(()),
        )
        .unwrap_err();
        assert_eq!(err.kind(), crate::error::ErrorKind::Numeric);
    }
}
