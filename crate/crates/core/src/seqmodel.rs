//! Stacked LSTM with a linear head, run recursively to forecast `Tx` states.
//!
//! Parameters live in one flat vector so the optimizer and the gradient
//! checker can treat them uniformly. Per layer the layout is
//! `W (4H x in) | U (4H x H) | b (4H)` with gate blocks ordered
//! input, forget, candidate, output; the head is `V (nx x H_top) | c (nx)`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const GATE_NAMES: [&str; 4] = ["i", "f", "g", "o"];

/// How state is handled between recursion iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RolloutMode {
    /// Warm up on the input window once, then feed each prediction back with
    /// the hidden and cell states carried over.
    #[default]
    Stateful,
    /// Every iteration restarts from zero state on the shifted window.
    Stateless,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Spatial points per state (input and output width).
    pub nx: usize,
    /// Hidden width of each stacked layer, bottom first.
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub rollout: RolloutMode,
}

impl Architecture {
    pub fn new(nx: usize, hidden: Vec<usize>) -> Result<Self> {
        let a = Architecture {
            nx,
            hidden,
            rollout: RolloutMode::Stateful,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 {
            return Err(Error::Config("state width must be positive".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config(
                "need at least one layer with positive hidden width".into(),
            ));
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.hidden.len()
    }

    fn layer_input(&self, l: usize) -> usize {
        if l == 0 {
            self.nx
        } else {
            self.hidden[l - 1]
        }
    }

    fn top(&self) -> usize {
        *self.hidden.last().unwrap()
    }

    pub fn layout(&self) -> Layout {
        let mut off = 0;
        let mut layers = Vec::with_capacity(self.layers());
        for (l, &h) in self.hidden.iter().enumerate() {
            let input = self.layer_input(l);
            let w = off;
            let u = w + 4 * h * input;
            let b = u + 4 * h * h;
            off = b + 4 * h;
            layers.push(LayerLayout {
                input,
                hidden: h,
                w,
                u,
                b,
            });
        }
        let v = off;
        let c = v + self.nx * self.top();
        Layout {
            layers,
            head_w: v,
            head_b: c,
            len: c + self.nx,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerLayout {
    pub input: usize,
    pub hidden: usize,
    pub w: usize,
    pub u: usize,
    pub b: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub layers: Vec<LayerLayout>,
    pub head_w: usize,
    pub head_b: usize,
    pub len: usize,
}

impl Layout {
    /// Human-readable name of a flat parameter index.
    pub fn name(&self, index: usize) -> String {
        for (l, ly) in self.layers.iter().enumerate() {
            let h = ly.hidden;
            if index >= ly.w && index < ly.u {
                let k = index - ly.w;
                let (row, col) = (k / ly.input, k % ly.input);
                return format!("layer{l}.W[{}][{},{}]", GATE_NAMES[row / h], row % h, col);
            }
            if index >= ly.u && index < ly.b {
                let k = index - ly.u;
                let (row, col) = (k / h, k % h);
                return format!("layer{l}.U[{}][{},{}]", GATE_NAMES[row / h], row % h, col);
            }
            if index >= ly.b && index < ly.b + 4 * h {
                let k = index - ly.b;
                return format!("layer{l}.b[{}][{}]", GATE_NAMES[k / h], k % h);
            }
        }
        if index >= self.head_w && index < self.head_b {
            let top = self.layers.last().unwrap().hidden;
            let k = index - self.head_w;
            return format!("head.V[{},{}]", k / top, k % top);
        }
        format!("head.c[{}]", index - self.head_b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: Architecture,
    pub data: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(arch: Architecture) -> Self {
        let n = arch.param_count();
        ModelParams {
            arch,
            data: vec![0.0; n],
        }
    }

    /// Glorot-uniform weights per gate block, zero biases except the forget
    /// gate, which starts at 1.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = arch.layout();
        let mut data = vec![0.0; layout.len];
        let mut fill = |slice: &mut [f64], fan_in: usize, fan_out: usize| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in slice.iter_mut() {
                *v = rng.gen_range(-limit..limit);
            }
        };
        for ly in &layout.layers {
            fill(&mut data[ly.w..ly.u], ly.input, ly.hidden);
            fill(&mut data[ly.u..ly.b], ly.hidden, ly.hidden);
            for v in &mut data[ly.b + ly.hidden..ly.b + 2 * ly.hidden] {
                *v = 1.0;
            }
        }
        fill(&mut data[layout.head_w..layout.head_b], arch.top(), arch.nx);
        ModelParams { arch, data }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.data.len() != self.arch.param_count() {
            return Err(Error::Shape(format!(
                "{} parameters for an architecture needing {}",
                self.data.len(),
                self.arch.param_count()
            )));
        }
        if let Some(k) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(format!(
                "parameter {} is not finite",
                self.arch.layout().name(k)
            )));
        }
        Ok(())
    }

    /// Output-gate weights (input and recurrent kernels) of every layer.
    pub fn output_gate_weights(&self) -> Vec<f64> {
        let layout = self.arch.layout();
        let mut out = Vec::new();
        for ly in &layout.layers {
            let h = ly.hidden;
            out.extend_from_slice(&self.data[ly.w + 3 * h * ly.input..ly.w + 4 * h * ly.input]);
            out.extend_from_slice(&self.data[ly.u + 3 * h * h..ly.u + 4 * h * h]);
        }
        out
    }

    pub fn save(&self, path: &Path, header: &CheckpointHeader) -> Result<()> {
        let json = serde_json::to_vec(header).map_err(|e| Error::format(path, e.to_string()))?;
        let mut bytes = Vec::with_capacity(16 + json.len() + 8 * self.data.len());
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&json);
        bytes.extend_from_slice(&io::f64s_to_bytes(&self.data));
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(ModelParams, CheckpointHeader)> {
        let bytes = io::read_bytes(path)?;
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "not a checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + hlen {
            return Err(Error::format(path, "truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&bytes[16..16 + hlen])
            .map_err(|e| Error::format(path, e.to_string()))?;
        let data = io::bytes_to_f64s(&bytes[16 + hlen..], path)?;
        let params = ModelParams {
            arch: header.architecture.clone(),
            data,
        };
        if params.data.len() != params.arch.param_count() {
            return Err(Error::format(path, "payload does not match the architecture"));
        }
        Ok((params, header))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub architecture: Architecture,
    pub config_hash: String,
    pub epoch: usize,
    pub seed: u64,
    pub lambda: f64,
}

/// Hidden and cell vectors of every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

impl CellState {
    pub fn zeros(arch: &Architecture) -> Self {
        CellState {
            h: arch.hidden.iter().map(|&n| vec![0.0; n]).collect(),
            c: arch.hidden.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Activations of one cell evaluation, kept for the backward pass.
#[derive(Debug, Clone)]
struct CellCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// `[i | f | g | o]` after their nonlinearities.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

fn cell_forward(
    data: &[f64],
    ly: &LayerLayout,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> (Vec<f64>, Vec<f64>, CellCache) {
    let h = ly.hidden;
    let w = &data[ly.w..ly.u];
    let u = &data[ly.u..ly.b];
    let b = &data[ly.b..ly.b + 4 * h];
    let mut gates = vec![0.0; 4 * h];
    for r in 0..4 * h {
        let z = b[r] + dot(&w[r * ly.input..(r + 1) * ly.input], x) + dot(&u[r * h..(r + 1) * h], h_prev);
        gates[r] = if r / h == 2 { z.tanh() } else { sigmoid(z) };
    }
    let mut c = vec![0.0; h];
    let mut out = vec![0.0; h];
    let mut tanh_c = vec![0.0; h];
    for k in 0..h {
        c[k] = gates[h + k] * c_prev[k] + gates[k] * gates[2 * h + k];
        tanh_c[k] = c[k].tanh();
        out[k] = gates[3 * h + k] * tanh_c[k];
    }
    let cache = CellCache {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        c_prev: c_prev.to_vec(),
        gates,
        tanh_c,
    };
    (out, c, cache)
}

/// One LSTM update of `layer`. Returns the new hidden vector and the updated
/// state (other layers untouched).
pub fn cell_step(
    params: &ModelParams,
    layer: usize,
    x_in: &[f64],
    state: &CellState,
) -> Result<(Vec<f64>, CellState)> {
    let layout = params.arch.layout();
    let ly = layout
        .layers
        .get(layer)
        .ok_or_else(|| Error::Shape(format!("no layer {layer}")))?;
    if params.data.len() != layout.len {
        return Err(Error::Shape("parameter vector does not match architecture".into()));
    }
    if x_in.len() != ly.input {
        return Err(Error::Shape(format!(
            "layer {layer} expects input width {}, got {}",
            ly.input,
            x_in.len()
        )));
    }
    if state.h.len() != layout.layers.len()
        || state.h[layer].len() != ly.hidden
        || state.c[layer].len() != ly.hidden
    {
        return Err(Error::Shape(format!("state does not match layer {layer}")));
    }
    let (h, c, _) = cell_forward(&params.data, ly, x_in, &state.h[layer], &state.c[layer]);
    let mut next = state.clone();
    next.h[layer] = h.clone();
    next.c[layer] = c;
    Ok((h, next))
}

fn head(data: &[f64], layout: &Layout, nx: usize, h: &[f64]) -> Vec<f64> {
    let top = h.len();
    let v = &data[layout.head_w..layout.head_b];
    let c = &data[layout.head_b..layout.head_b + nx];
    (0..nx).map(|j| c[j] + dot(&v[j * top..(j + 1) * top], h)).collect()
}

fn check_input(params: &ModelParams, input: &[f64], tx: usize) -> Result<()> {
    let nx = params.arch.nx;
    if tx == 0 || input.len() != tx * nx {
        return Err(Error::Shape(format!(
            "expected {tx} states of width {nx}, got {} values",
            input.len()
        )));
    }
    if params.data.len() != params.arch.param_count() {
        return Err(Error::Shape("parameter vector does not match architecture".into()));
    }
    Ok(())
}

/// Runs the stacked cells over `tx` input states from zero state. Returns
/// the head output after every step (`tx x nx`) and the final state.
pub fn forward_window(params: &ModelParams, input: &[f64], tx: usize) -> Result<(Vec<f64>, CellState)> {
    check_input(params, input, tx)?;
    let layout = params.arch.layout();
    let nx = params.arch.nx;
    let mut state = CellState::zeros(&params.arch);
    let mut outputs = Vec::with_capacity(tx * nx);
    for s in 0..tx {
        let mut x = input[s * nx..(s + 1) * nx].to_vec();
        for (l, ly) in layout.layers.iter().enumerate() {
            let (h, c, _) = cell_forward(&params.data, ly, &x, &state.h[l], &state.c[l]);
            if h.iter().chain(&c).any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation { layer: l, step: s });
            }
            state.h[l] = h.clone();
            state.c[l] = c;
            x = h;
        }
        let y = head(&params.data, &layout, nx, &x);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation {
                layer: layout.layers.len(),
                step: s,
            });
        }
        outputs.extend(y);
    }
    Ok((outputs, state))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Feed {
    Input(usize),
    Prediction(usize),
}

#[derive(Debug, Clone, Copy)]
struct PlanStep {
    feed: Feed,
    reset: bool,
    emit: Option<usize>,
    iteration: usize,
}

fn plan(tx: usize, mode: RolloutMode) -> Vec<PlanStep> {
    let mut steps = Vec::new();
    match mode {
        RolloutMode::Stateful => {
            for s in 0..tx {
                steps.push(PlanStep {
                    feed: Feed::Input(s),
                    reset: s == 0,
                    emit: (s == tx - 1).then_some(0),
                    iteration: 0,
                });
            }
            for k in 1..tx {
                steps.push(PlanStep {
                    feed: Feed::Prediction(k - 1),
                    reset: false,
                    emit: Some(k),
                    iteration: k,
                });
            }
        }
        RolloutMode::Stateless => {
            for k in 0..tx {
                let window: Vec<Feed> = (k..tx)
                    .map(Feed::Input)
                    .chain((0..k).map(Feed::Prediction))
                    .collect();
                let last = window.len() - 1;
                for (m, feed) in window.into_iter().enumerate() {
                    steps.push(PlanStep {
                        feed,
                        reset: m == 0,
                        emit: (m == last).then_some(k),
                        iteration: k,
                    });
                }
            }
        }
    }
    steps
}

/// Forward record of a full recursive rollout.
#[derive(Debug, Clone)]
pub struct Tape {
    tx: usize,
    mode: RolloutMode,
    caches: Vec<Vec<CellCache>>,
    tops: Vec<Vec<f64>>,
    /// Row-major `tx x nx` predictions.
    pub predictions: Vec<f64>,
}

/// Recursive forecast of `tx` new states, recording everything the
/// backward pass needs.
pub fn rollout_tape(params: &ModelParams, input: &[f64], tx: usize) -> Result<Tape> {
    check_input(params, input, tx)?;
    let mode = params.arch.rollout;
    let layout = params.arch.layout();
    let nx = params.arch.nx;
    let steps = plan(tx, mode);
    let mut predictions = vec![0.0; tx * nx];
    let mut state = CellState::zeros(&params.arch);
    let mut caches = Vec::with_capacity(steps.len());
    let mut tops = Vec::with_capacity(steps.len());
    for st in &steps {
        if st.reset {
            state = CellState::zeros(&params.arch);
        }
        let mut x = match st.feed {
            Feed::Input(s) => input[s * nx..(s + 1) * nx].to_vec(),
            Feed::Prediction(k) => predictions[k * nx..(k + 1) * nx].to_vec(),
        };
        let mut step_caches = Vec::with_capacity(layout.layers.len());
        for (l, ly) in layout.layers.iter().enumerate() {
            let (h, c, cache) = cell_forward(&params.data, ly, &x, &state.h[l], &state.c[l]);
            if h.iter().chain(&c).any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation {
                    layer: l,
                    step: st.iteration,
                });
            }
            state.h[l] = h.clone();
            state.c[l] = c;
            step_caches.push(cache);
            x = h;
        }
        if let Some(k) = st.emit {
            let y = head(&params.data, &layout, nx, &x);
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation {
                    layer: layout.layers.len(),
                    step: k,
                });
            }
            predictions[k * nx..(k + 1) * nx].copy_from_slice(&y);
        }
        caches.push(step_caches);
        tops.push(x);
    }
    Ok(Tape {
        tx,
        mode,
        caches,
        tops,
        predictions,
    })
}

/// Backpropagates `d_pred` (gradient of the loss w.r.t. the predictions)
/// through the whole recursion, accumulating into `grad`.
pub fn backward_tape(params: &ModelParams, tape: &Tape, d_pred: &[f64], grad: &mut [f64]) {
    let layout = params.arch.layout();
    let nx = params.arch.nx;
    let data = &params.data;
    let n_layers = layout.layers.len();
    assert_eq!(d_pred.len(), tape.tx * nx);
    assert_eq!(grad.len(), layout.len);

    let steps = plan(tape.tx, tape.mode);
    let mut d_pred_total = d_pred.to_vec();
    let mut dh_carry: Vec<Vec<f64>> = layout.layers.iter().map(|l| vec![0.0; l.hidden]).collect();
    let mut dc_carry = dh_carry.clone();
    let top = layout.layers[n_layers - 1].hidden;

    for (s, st) in steps.iter().enumerate().rev() {
        // Contribution of the head at emitting steps.
        let mut dh_above = vec![0.0; top];
        if let Some(k) = st.emit {
            let dy = &d_pred_total[k * nx..(k + 1) * nx];
            let h_top = &tape.tops[s];
            let (gv, gc) = grad[layout.head_w..].split_at_mut(layout.head_b - layout.head_w);
            let v = &data[layout.head_w..layout.head_b];
            for j in 0..nx {
                if dy[j] != 0.0 {
                    axpy(dy[j], h_top, &mut gv[j * top..(j + 1) * top]);
                    axpy(dy[j], &v[j * top..(j + 1) * top], &mut dh_above);
                }
                gc[j] += dy[j];
            }
        }
        for l in (0..n_layers).rev() {
            let ly = &layout.layers[l];
            let h = ly.hidden;
            let cache = &tape.caches[s][l];
            let g = &cache.gates;
            let mut dz = vec![0.0; 4 * h];
            let mut dc_prev = vec![0.0; h];
            for k in 0..h {
                let dh = dh_carry[l][k] + dh_above[k];
                let (gi, gf, gg, go) = (g[k], g[h + k], g[2 * h + k], g[3 * h + k]);
                let tc = cache.tanh_c[k];
                let dc = dc_carry[l][k] + dh * go * (1.0 - tc * tc);
                dz[k] = dc * gg * gi * (1.0 - gi);
                dz[h + k] = dc * cache.c_prev[k] * gf * (1.0 - gf);
                dz[2 * h + k] = dc * gi * (1.0 - gg * gg);
                dz[3 * h + k] = dh * tc * go * (1.0 - go);
                dc_prev[k] = dc * gf;
            }
            let w = &data[ly.w..ly.u];
            let u = &data[ly.u..ly.b];
            let mut dx = vec![0.0; ly.input];
            let mut dh_prev = vec![0.0; h];
            {
                let (gw, rest) = grad[ly.w..].split_at_mut(ly.u - ly.w);
                let (gu, gb) = rest.split_at_mut(ly.b - ly.u);
                for r in 0..4 * h {
                    let d = dz[r];
                    if d == 0.0 {
                        continue;
                    }
                    axpy(d, &cache.x, &mut gw[r * ly.input..(r + 1) * ly.input]);
                    axpy(d, &cache.h_prev, &mut gu[r * h..(r + 1) * h]);
                    gb[r] += d;
                    axpy(d, &w[r * ly.input..(r + 1) * ly.input], &mut dx);
                    axpy(d, &u[r * h..(r + 1) * h], &mut dh_prev);
                }
            }
            dh_carry[l] = dh_prev;
            dc_carry[l] = dc_prev;
            if l > 0 {
                dh_above = dx;
            } else if let Feed::Prediction(k) = st.feed {
                axpy(1.0, &dx, &mut d_pred_total[k * nx..(k + 1) * nx]);
            }
        }
        if st.reset {
            dh_carry.iter_mut().for_each(|v| v.iter_mut().for_each(|x| *x = 0.0));
            dc_carry.iter_mut().for_each(|v| v.iter_mut().for_each(|x| *x = 0.0));
        }
    }
}

/// Forecast of `tx` new states.
pub fn rollout_recursive(params: &ModelParams, input: &[f64], tx: usize) -> Result<Vec<f64>> {
    Ok(rollout_tape(params, input, tx)?.predictions)
}

/// The logical input window of every recursion iteration, as rows.
pub fn rollout_windows(input: &[f64], predictions: &[f64], tx: usize, nx: usize) -> Vec<Vec<Vec<f64>>> {
    (0..tx)
        .map(|k| {
            (k..tx)
                .map(|s| input[s * nx..(s + 1) * nx].to_vec())
                .chain((0..k).map(|p| predictions[p * nx..(p + 1) * nx].to_vec()))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arch(nx: usize, hidden: Vec<usize>) -> Architecture {
        Architecture::new(nx, hidden).unwrap()
    }

    fn input(tx: usize, nx: usize, phase: f64) -> Vec<f64> {
        (0..tx * nx).map(|k| (0.37 * k as f64 + phase).sin() * 0.8).collect()
    }

    #[test]
    fn zero_params_give_zero_hidden_state() {
        let a = arch(5, vec![3, 4]);
        let p = ModelParams::zeros(a.clone());
        let (h, next) = cell_step(&p, 0, &[0.3, -1.0, 2.0, 0.5, 0.1], &CellState::zeros(&a)).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
        assert!(next.c[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_gates_preserve_the_cell() {
        let a = arch(2, vec![3]);
        let mut p = ModelParams::zeros(a.clone());
        let ly = a.layout().layers[0];
        for k in 0..3 {
            p.data[ly.b + k] = -1e3; // input gate closed
            p.data[ly.b + 3 + k] = 1e3; // forget gate open
        }
        let mut state = CellState::zeros(&a);
        state.c[0] = vec![0.7, -0.2, 1.5];
        let (_, next) = cell_step(&p, 0, &[1.0, -2.0], &state).unwrap();
        assert_eq!(next.c[0], state.c[0]);
    }

    #[test]
    fn cell_step_matches_scalar_reference() {
        let a = arch(3, vec![2]);
        let p = ModelParams::init(a.clone(), 7);
        let d = &p.data;
        let x = [0.4, -0.9, 0.25];
        let h0 = [0.1, -0.3];
        let c0 = [0.5, 0.2];
        let state = CellState {
            h: vec![h0.to_vec()],
            c: vec![c0.to_vec()],
        };
        let (h, next) = cell_step(&p, 0, &x, &state).unwrap();

        // Independent scalar evaluation straight from the flat layout.
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let (ni, nh) = (3usize, 2usize);
        let w_off = 0;
        let u_off = 4 * nh * ni;
        let b_off = u_off + 4 * nh * nh;
        let pre = |gate: usize, k: usize| {
            let row = gate * nh + k;
            let mut z = d[b_off + row];
            for j in 0..ni {
                z += d[w_off + row * ni + j] * x[j];
            }
            for j in 0..nh {
                z += d[u_off + row * nh + j] * h0[j];
            }
            z
        };
        for k in 0..nh {
            let i = sig(pre(0, k));
            let f = sig(pre(1, k));
            let g = pre(2, k).tanh();
            let o = sig(pre(3, k));
            let c = f * c0[k] + i * g;
            let hk = o * c.tanh();
            assert!((next.c[0][k] - c).abs() < 1e-15);
            assert!((h[k] - hk).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = arch(4, vec![3]);
        let p = ModelParams::init(a.clone(), 1);
        assert!(matches!(
            cell_step(&p, 0, &[1.0, 2.0], &CellState::zeros(&a)),
            Err(Error::Shape(_))
        ));
        assert!(matches!(cell_step(&p, 1, &[0.0; 4], &CellState::zeros(&a)), Err(Error::Shape(_))));
        assert!(matches!(forward_window(&p, &[0.0; 7], 2), Err(Error::Shape(_))));
    }

    #[test]
    fn forward_window_shapes_and_determinism() {
        let a = arch(6, vec![6]);
        let p = ModelParams::init(a, 3);
        let x = input(4, 6, 0.0);
        let (y1, s1) = forward_window(&p, &x, 4).unwrap();
        let (y2, s2) = forward_window(&p, &x, 4).unwrap();
        assert_eq!(y1.len(), 4 * 6);
        assert_eq!(y1, y2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn single_step_rollout_equals_forward() {
        for mode in [RolloutMode::Stateful, RolloutMode::Stateless] {
            let mut a = arch(5, vec![4, 3]);
            a.rollout = mode;
            let p = ModelParams::init(a, 11);
            let x = input(1, 5, 0.3);
            let (y, _) = forward_window(&p, &x, 1).unwrap();
            assert_eq!(rollout_recursive(&p, &x, 1).unwrap(), y);
        }
    }

    #[test]
    fn stateful_rollout_first_prediction_is_last_forward_output() {
        let a = arch(5, vec![4, 3]);
        let p = ModelParams::init(a, 5);
        let x = input(3, 5, 1.0);
        let (y, _) = forward_window(&p, &x, 3).unwrap();
        let r = rollout_recursive(&p, &x, 3).unwrap();
        assert_eq!(&r[..5], &y[2 * 5..]);
    }

    #[test]
    fn stateless_iteration_matches_forward_on_shifted_window() {
        let mut a = arch(4, vec![5]);
        a.rollout = RolloutMode::Stateless;
        let p = ModelParams::init(a, 9);
        let tx = 3;
        let x = input(tx, 4, 0.2);
        let r = rollout_recursive(&p, &x, tx).unwrap();
        let windows = rollout_windows(&x, &r, tx, 4);
        for (k, w) in windows.iter().enumerate() {
            let flat: Vec<f64> = w.concat();
            let (y, _) = forward_window(&p, &flat, tx).unwrap();
            assert_eq!(&r[k * 4..(k + 1) * 4], &y[(tx - 1) * 4..]);
        }
    }

    #[test]
    fn rollout_windows_end_with_previous_prediction() {
        let a = arch(4, vec![5]);
        let p = ModelParams::init(a, 2);
        let tx = 4;
        let x = input(tx, 4, 0.0);
        let r = rollout_recursive(&p, &x, tx).unwrap();
        let w = rollout_windows(&x, &r, tx, 4);
        assert_eq!(w[0].last().unwrap(), &x[(tx - 1) * 4..].to_vec());
        for k in 1..tx {
            assert_eq!(w[k].len(), tx);
            assert_eq!(w[k].last().unwrap(), &r[(k - 1) * 4..k * 4].to_vec());
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let a = arch(3, vec![2, 2]);
        let p = ModelParams::init(a.clone(), 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            architecture: a,
            config_hash: "abc".into(),
            epoch: 10,
            seed: 4,
            lambda: 1e-4,
        };
        p.save(&path, &header).unwrap();
        let (q, h) = ModelParams::load(&path).unwrap();
        assert_eq!(q, p);
        assert_eq!(h, header);
        std::fs::write(&path, b"junk").unwrap();
        assert!(ModelParams::load(&path).is_err());
    }

    #[test]
    fn parameter_names_cover_the_layout() {
        let a = arch(3, vec![2]);
        let l = a.layout();
        assert_eq!(l.name(0), "layer0.W[i][0,0]");
        assert_eq!(l.name(l.layers[0].u), "layer0.U[i][0,0]");
        assert_eq!(l.name(l.layers[0].b + 2), "layer0.b[f][0]");
        assert_eq!(l.name(l.head_w + 1), "head.V[0,1]");
        assert_eq!(l.name(l.len - 1), "head.c[2]");
    }

    #[test]
    fn output_gate_weights_pick_the_right_rows() {
        let a = arch(2, vec![1]);
        let mut p = ModelParams::zeros(a.clone());
        let ly = a.layout().layers[0];
        p.data[ly.w + 3 * 2] = 5.0;
        p.data[ly.w + 3 * 2 + 1] = 6.0;
        p.data[ly.u + 3] = 7.0;
        assert_eq!(p.output_gate_weights(), vec![5.0, 6.0, 7.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn gates_stay_bounded(seed in 0u64..1000, scale in 0.1f64..20.0) {
            let a = arch(4, vec![3]);
            let p = ModelParams::init(a.clone(), seed);
            let x: Vec<f64> = (0..4).map(|k| scale * ((k as f64) + seed as f64).sin()).collect();
            let ly = a.layout().layers[0];
            let (_, _, cache) = cell_forward(&p.data, &ly, &x, &[0.2, -0.1, 0.4], &[1.0, -3.0, 0.5]);
            for (r, &g) in cache.gates.iter().enumerate() {
                if r / 3 == 2 {
                    prop_assert!((-1.0..=1.0).contains(&g));
                } else {
                    prop_assert!((0.0..=1.0).contains(&g));
                }
            }
        }

        #[test]
        fn rollout_is_bit_deterministic(seed in 0u64..1000) {
            let a = arch(5, vec![4, 4]);
            let p = ModelParams::init(a, seed);
            let x = input(3, 5, seed as f64);
            let r1 = rollout_recursive(&p, &x, 3).unwrap();
            let r2 = rollout_recursive(&p, &x, 3).unwrap();
            prop_assert_eq!(
                r1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                r2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
