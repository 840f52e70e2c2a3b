use super::{sigmoid, softmax, Model, ModelConfig, Padding, ParamIndex, SequenceSample};
use crate::error::{Error, Result};
use crate::fingerprint::Tensor3;

/// Activations of one forward pass, kept for the backward pass.
pub(crate) struct Trace {
    /// Per timestep, the input to each conv layer followed by the final output.
    conv_acts: Vec<Vec<Vec<f64>>>,
    /// Per timestep, the pre-activation of each conv layer.
    conv_pre: Vec<Vec<Vec<f64>>>,
    /// Per LSTM layer, per timestep.
    lstm: Vec<Vec<LstmStep>>,
    pub(crate) probs: Vec<Vec<f64>>,
}

#[derive(Clone)]
struct LstmStep {
    input: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Gate activations in order i, f, g, o.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
}

struct ConvGeom {
    in_rows: usize,
    in_cols: usize,
    in_ch: usize,
    out_rows: usize,
    out_cols: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    pad_top: usize,
    pad_left: usize,
}

fn conv_geometry(cfg: &ModelConfig) -> Vec<ConvGeom> {
    let (mut rows, mut cols, mut ch) = cfg.input_shape;
    cfg.conv_layers
        .iter()
        .map(|spec| {
            let (kh, kw) = spec.kernel;
            let (out_rows, out_cols, pad_top, pad_left) = match spec.padding {
                Padding::Same => (rows, cols, (kh - 1) / 2, (kw - 1) / 2),
                Padding::Valid => (rows + 1 - kh, cols + 1 - kw, 0, 0),
            };
            let g = ConvGeom {
                in_rows: rows,
                in_cols: cols,
                in_ch: ch,
                out_rows,
                out_cols,
                out_ch: spec.out_channels,
                kh,
                kw,
                pad_top,
                pad_left,
            };
            rows = out_rows;
            cols = out_cols;
            ch = spec.out_channels;
            g
        })
        .collect()
}

/// Calls `f(out_index, weight_index, in_index)` for every multiply of a convolution
/// (bias excluded).
#[inline]
fn for_each_tap(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize)) {
    for r in 0..g.out_rows {
        for c in 0..g.out_cols {
            for i in 0..g.kh {
                let Some(ir) = (r + i).checked_sub(g.pad_top).filter(|&x| x < g.in_rows) else {
                    continue;
                };
                for j in 0..g.kw {
                    let Some(ic) = (c + j).checked_sub(g.pad_left).filter(|&x| x < g.in_cols) else {
                        continue;
                    };
                    let in_base = (ir * g.in_cols + ic) * g.in_ch;
                    for o in 0..g.out_ch {
                        let out = (r * g.out_cols + c) * g.out_ch + o;
                        let w_base = ((o * g.kh + i) * g.kw + j) * g.in_ch;
                        for ci in 0..g.in_ch {
                            f(out, w_base + ci, in_base + ci);
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(g: &ConvGeom, w: &[f64], b: &[f64], input: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.out_rows * g.out_cols * g.out_ch];
    for (k, z) in out.iter_mut().enumerate() {
        *z = b[k % g.out_ch];
    }
    for r in 0..g.out_rows {
        for c in 0..g.out_cols {
            let out_base = (r * g.out_cols + c) * g.out_ch;
            for i in 0..g.kh {
                let Some(ir) = (r + i).checked_sub(g.pad_top).filter(|&x| x < g.in_rows) else {
                    continue;
                };
                for j in 0..g.kw {
                    let Some(ic) = (c + j).checked_sub(g.pad_left).filter(|&x| x < g.in_cols) else {
                        continue;
                    };
                    let x = &input[(ir * g.in_cols + ic) * g.in_ch..][..g.in_ch];
                    for o in 0..g.out_ch {
                        let wk = &w[((o * g.kh + i) * g.kw + j) * g.in_ch..][..g.in_ch];
                        out[out_base + o] += dot(wk, x);
                    }
                }
            }
        }
    }
    out
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out += M x` for a row-major `rows x x.len()` matrix.
#[inline]
fn matvec_acc(m: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (row, o) in m.chunks_exact(n).zip(out.iter_mut()) {
        *o += dot(row, x);
    }
}

/// `out += M^T y`.
#[inline]
fn matvec_t_acc(m: &[f64], y: &[f64], out: &mut [f64]) {
    let n = out.len();
    for (row, &yi) in m.chunks_exact(n).zip(y) {
        if yi != 0.0 {
            for (o, w) in out.iter_mut().zip(row) {
                *o += yi * w;
            }
        }
    }
}

/// `G += y x^T`.
#[inline]
fn outer_acc(g: &mut [f64], y: &[f64], x: &[f64]) {
    let n = x.len();
    for (row, &yi) in g.chunks_exact_mut(n).zip(y) {
        if yi != 0.0 {
            for (gw, xv) in row.iter_mut().zip(x) {
                *gw += yi * xv;
            }
        }
    }
}

impl Trace {
    pub(crate) fn run(model: &Model, sequence: &[Tensor3]) -> Result<Self> {
        let cfg = &model.config;
        let p = &model.params;
        if sequence.is_empty() {
            return Err(Error::InvalidInput("empty input sequence".into()));
        }
        for x in sequence {
            model.check_input(x)?;
        }
        let geoms = conv_geometry(cfg);
        let mut conv_acts = Vec::with_capacity(sequence.len());
        let mut conv_pre = Vec::with_capacity(sequence.len());
        for x in sequence {
            let mut acts = vec![x.data.clone()];
            let mut pres = Vec::with_capacity(geoms.len());
            for (l, g) in geoms.iter().enumerate() {
                let z = conv_forward(g, &p[ParamIndex::conv_w(l)].data, &p[ParamIndex::conv_b(l)].data, acts.last().unwrap());
                let act = cfg.conv_layers[l].activation;
                let a: Vec<f64> = z.iter().map(|&v| act.apply(v)).collect();
                pres.push(z);
                acts.push(a);
            }
            if acts.last().unwrap().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation("convolution"));
            }
            conv_acts.push(acts);
            conv_pre.push(pres);
        }

        let h = cfg.lstm_hidden;
        let mut lstm = Vec::with_capacity(cfg.lstm_layers);
        let mut inputs: Vec<Vec<f64>> = conv_acts.iter().map(|a| a.last().unwrap().clone()).collect();
        for k in 0..cfg.lstm_layers {
            let w_ih = &p[ParamIndex::lstm_ih(cfg, k)].data;
            let w_hh = &p[ParamIndex::lstm_hh(cfg, k)].data;
            let bias = &p[ParamIndex::lstm_b(cfg, k)].data;
            let mut h_prev = vec![0.0; h];
            let mut c_prev = vec![0.0; h];
            let mut steps = Vec::with_capacity(inputs.len());
            for input in inputs {
                let mut pre = bias.clone();
                matvec_acc(w_ih, &input, &mut pre);
                matvec_acc(w_hh, &h_prev, &mut pre);
                let mut gates = pre;
                for (idx, v) in gates.iter_mut().enumerate() {
                    *v = if idx / h == 2 { v.tanh() } else { sigmoid(*v) };
                }
                let mut c = vec![0.0; h];
                let mut tanh_c = vec![0.0; h];
                let mut hv = vec![0.0; h];
                for u in 0..h {
                    c[u] = gates[h + u] * c_prev[u] + gates[u] * gates[2 * h + u];
                    tanh_c[u] = c[u].tanh();
                    hv[u] = gates[3 * h + u] * tanh_c[u];
                }
                if hv.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteActivation("lstm"));
                }
                let step = LstmStep { input, h_prev, c_prev, gates, tanh_c, h: hv.clone() };
                h_prev = hv;
                c_prev = c;
                steps.push(step);
            }
            inputs = steps.iter().map(|s| s.h.clone()).collect();
            lstm.push(steps);
        }

        let fc_w = &p[ParamIndex::fc_w(cfg)].data;
        let fc_b = &p[ParamIndex::fc_b(cfg)].data;
        let probs = inputs
            .iter()
            .map(|hv| {
                let mut logits = fc_b.clone();
                matvec_acc(fc_w, hv, &mut logits);
                softmax(&logits)
            })
            .collect::<Vec<_>>();
        if probs.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation("softmax"));
        }
        Ok(Self { conv_acts, conv_pre, lstm, probs })
    }
}

/// Gradient tensors aligned with [`Model::params`].
pub type Gradients = Vec<Vec<f64>>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    /// Mean per-timestep cross-entropy over the batch.
    pub data: f64,
    pub regularization: f64,
    pub correct: usize,
    pub total: usize,
}

impl LossBreakdown {
    pub fn total_loss(&self) -> f64 {
        self.data + self.regularization
    }
}

fn regularization(model: &Model, grads: Option<&mut Gradients>) -> f64 {
    let cfg = &model.config;
    let mut reg = 0.0;
    let mut grads = grads;
    for (idx, p) in model.params.iter().enumerate() {
        if !p.regularized {
            continue;
        }
        let sum_sq: f64 = p.data.iter().map(|w| w * w).sum();
        reg += cfg.l2_base * sum_sq;
        if let Some(g) = grads.as_deref_mut() {
            for (gw, w) in g[idx].iter_mut().zip(&p.data) {
                *gw += 2.0 * cfg.l2_base * w;
            }
        }
    }
    // forget-gate recurrent rows carry their own factor instead of the base one
    let h = cfg.lstm_hidden;
    let extra = cfg.l2_forget_factor - cfg.l2_base;
    for k in 0..cfg.lstm_layers {
        let idx = ParamIndex::lstm_hh(cfg, k);
        let rows = h * h..2 * h * h;
        let w = &model.params[idx].data[rows.clone()];
        reg += extra * w.iter().map(|v| v * v).sum::<f64>();
        if let Some(g) = grads.as_deref_mut() {
            for (gw, v) in g[idx][rows.clone()].iter_mut().zip(w) {
                *gw += 2.0 * extra * v;
            }
        }
    }
    reg
}

/// Regularized mean cross-entropy of a batch and its exact gradient.
pub fn loss_and_gradients(model: &Model, batch: &[SequenceSample]) -> Result<(LossBreakdown, Gradients)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let cfg = &model.config;
    let p = &model.params;
    let mut grads: Gradients = p.iter().map(|t| vec![0.0; t.data.len()]).collect();
    let geoms = conv_geometry(cfg);
    let h = cfg.lstm_hidden;
    let fc_w_idx = ParamIndex::fc_w(cfg);
    let fc_b_idx = ParamIndex::fc_b(cfg);

    let mut data_loss = 0.0;
    let mut correct = 0;
    let mut total = 0;
    let batch_scale = 1.0 / batch.len() as f64;

    for sample in batch {
        if sample.inputs.len() != sample.labels.len() {
            return Err(Error::LengthMismatch { expected: sample.inputs.len(), actual: sample.labels.len() });
        }
        if let Some(&bad) = sample.labels.iter().find(|&&y| y >= cfg.n_classes) {
            return Err(Error::InvalidInput(format!("label {bad} outside {} classes", cfg.n_classes)));
        }
        let trace = Trace::run(model, &sample.inputs)?;
        let steps = sample.inputs.len();
        let scale = batch_scale / steps as f64;

        // read-out
        let top = trace.lstm.last().unwrap();
        let mut dh_above: Vec<Vec<f64>> = Vec::with_capacity(steps);
        for t in 0..steps {
            let probs = &trace.probs[t];
            let y = sample.labels[t];
            data_loss -= probs[y].max(f64::MIN_POSITIVE).ln() * scale;
            total += 1;
            if super::argmax(probs) == y {
                correct += 1;
            }
            let mut dlogits: Vec<f64> = probs.iter().map(|q| q * scale).collect();
            dlogits[y] -= scale;
            outer_acc(&mut grads[fc_w_idx], &dlogits, &top[t].h);
            for (g, d) in grads[fc_b_idx].iter_mut().zip(&dlogits) {
                *g += d;
            }
            let mut dh = vec![0.0; h];
            matvec_t_acc(&p[fc_w_idx].data, &dlogits, &mut dh);
            dh_above.push(dh);
        }

        // LSTM layers, top to bottom, each backwards through time
        for k in (0..cfg.lstm_layers).rev() {
            let ih = ParamIndex::lstm_ih(cfg, k);
            let hh = ParamIndex::lstm_hh(cfg, k);
            let bi = ParamIndex::lstm_b(cfg, k);
            let layer = &trace.lstm[k];
            let in_len = layer[0].input.len();
            let mut d_inputs = vec![vec![0.0; in_len]; steps];
            let mut dh_next = vec![0.0; h];
            let mut dc_next = vec![0.0; h];
            for t in (0..steps).rev() {
                let s = &layer[t];
                let mut dp = vec![0.0; 4 * h];
                for u in 0..h {
                    let (i, f, g, o) = (s.gates[u], s.gates[h + u], s.gates[2 * h + u], s.gates[3 * h + u]);
                    let dh = dh_above[t][u] + dh_next[u];
                    let dc = dc_next[u] + dh * o * (1.0 - s.tanh_c[u] * s.tanh_c[u]);
                    dp[u] = dc * g * i * (1.0 - i);
                    dp[h + u] = dc * s.c_prev[u] * f * (1.0 - f);
                    dp[2 * h + u] = dc * i * (1.0 - g * g);
                    dp[3 * h + u] = dh * s.tanh_c[u] * o * (1.0 - o);
                    dc_next[u] = dc * f;
                }
                outer_acc(&mut grads[ih], &dp, &s.input);
                outer_acc(&mut grads[hh], &dp, &s.h_prev);
                for (g, d) in grads[bi].iter_mut().zip(&dp) {
                    *g += d;
                }
                matvec_t_acc(&p[ih].data, &dp, &mut d_inputs[t]);
                dh_next.iter_mut().for_each(|v| *v = 0.0);
                matvec_t_acc(&p[hh].data, &dp, &mut dh_next);
            }
            dh_above = d_inputs;
        }

        // convolution stack, per timestep
        for t in 0..steps {
            let mut da = std::mem::take(&mut dh_above[t]);
            for (l, g) in geoms.iter().enumerate().rev() {
                let act = cfg.conv_layers[l].activation;
                let z = &trace.conv_pre[t][l];
                let a = &trace.conv_acts[t][l + 1];
                let dz: Vec<f64> = da.iter().zip(z).zip(a).map(|((d, &zv), &av)| d * act.derivative(zv, av)).collect();
                let input = &trace.conv_acts[t][l];
                let w_idx = ParamIndex::conv_w(l);
                for (k, d) in dz.iter().enumerate() {
                    grads[ParamIndex::conv_b(l)][k % g.out_ch] += d;
                }
                let gw = &mut grads[w_idx];
                for_each_tap(g, |out, wi, xi| gw[wi] += dz[out] * input[xi]);
                if l > 0 {
                    let w = &p[w_idx].data;
                    let mut din = vec![0.0; input.len()];
                    for_each_tap(g, |out, wi, xi| din[xi] += dz[out] * w[wi]);
                    da = din;
                }
            }
        }
    }

    let reg = regularization(model, Some(&mut grads));
    Ok((LossBreakdown { data: data_loss, regularization: reg, correct, total }, grads))
}

/// Regularized loss only, used by the finite-difference checks.
#[cfg(test)]
pub(crate) fn loss_only(model: &Model, batch: &[SequenceSample]) -> Result<f64> {
    let mut data = 0.0;
    for sample in batch {
        let trace = Trace::run(model, &sample.inputs)?;
        let scale = 1.0 / (batch.len() * sample.inputs.len()) as f64;
        for (probs, &y) in trace.probs.iter().zip(&sample.labels) {
            data -= probs[y].max(f64::MIN_POSITIVE).ln() * scale;
        }
    }
    Ok(data + regularization(model, None))
}
