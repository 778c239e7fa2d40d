//! GRU + dense flow layer replacing an ODE-solver cell. The forward map is a
//! residual, time-scaled, tanh-bounded head on top of a GRU hidden state:
//!
//!   Z_k = z0 + tau_k * s .* tanh(W_out h_k + b_out),   tau_0 = 0
//!
//! so Z_0 = z0 holds for any parameter values. Forward and backward passes
//! are hand-rolled (no autodiff); the tape records every gate activation
//! needed for exact reverse-mode gradients.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, Mat};
use crate::FORMAT_VERSION;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruWeights {
    pub w_update: Mat,
    pub w_reset: Mat,
    pub w_cand: Mat,
    pub b_update: Vec<f64>,
    pub b_reset: Vec<f64>,
    pub b_cand: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    pub w_out: Mat,
    pub b_out: Vec<f64>,
    /// Per-channel positive scale s = exp(log_scale), bounding |tau * head|.
    pub log_scale: Vec<f64>,
}

/// All learnable weights of the flow layer. The GRU consumes
/// `[h_prev ; z0 ; u(t_k) ; tau_k]`, so its input width is
/// `hidden_dim + state_dim + input_dim + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    pub hidden_dim: usize,
    pub state_dim: usize,
    pub input_dim: usize,
    pub gru: GruWeights,
    pub head: HeadWeights,
}

pub const DEFAULT_HIDDEN_DIM: usize = 16;

impl FlowParams {
    /// GRU input width (excluding the recurrent part).
    pub fn feed_dim(&self) -> usize {
        self.state_dim + self.input_dim + 1
    }

    /// Uniform init in +-1/sqrt(fan-in), zero biases, unit scale.
    pub fn init(hidden_dim: usize, state_dim: usize, input_dim: usize, seed: u64) -> Self {
        let d = state_dim + input_dim + 1;
        let cols = hidden_dim + d;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Mat::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound))
        };
        FlowParams {
            hidden_dim,
            state_dim,
            input_dim,
            gru: GruWeights {
                w_update: uniform(hidden_dim, cols, cols),
                w_reset: uniform(hidden_dim, cols, cols),
                w_cand: uniform(hidden_dim, cols, cols),
                b_update: vec![0.0; hidden_dim],
                b_reset: vec![0.0; hidden_dim],
                b_cand: vec![0.0; hidden_dim],
            },
            head: HeadWeights {
                w_out: uniform(state_dim, hidden_dim, hidden_dim),
                b_out: vec![0.0; state_dim],
                log_scale: vec![0.0; state_dim],
            },
        }
    }

    pub fn zeros_like(&self) -> Self {
        let cols = self.hidden_dim + self.feed_dim();
        FlowParams {
            hidden_dim: self.hidden_dim,
            state_dim: self.state_dim,
            input_dim: self.input_dim,
            gru: GruWeights {
                w_update: Mat::zeros(self.hidden_dim, cols),
                w_reset: Mat::zeros(self.hidden_dim, cols),
                w_cand: Mat::zeros(self.hidden_dim, cols),
                b_update: vec![0.0; self.hidden_dim],
                b_reset: vec![0.0; self.hidden_dim],
                b_cand: vec![0.0; self.hidden_dim],
            },
            head: HeadWeights {
                w_out: Mat::zeros(self.state_dim, self.hidden_dim),
                b_out: vec![0.0; self.state_dim],
                log_scale: vec![0.0; self.state_dim],
            },
        }
    }

    /// Total learnable parameter count:
    /// 3H(H+n+m+1) + 3H for the GRU, nH + n for the dense head, plus n
    /// per-channel head scales.
    pub fn param_count(&self) -> usize {
        let h = self.hidden_dim;
        let n = self.state_dim;
        let d = self.feed_dim();
        3 * h * (h + d) + 3 * h + n * h + n + n
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(&self.gru.w_update.data);
        out.extend_from_slice(&self.gru.w_reset.data);
        out.extend_from_slice(&self.gru.w_cand.data);
        out.extend_from_slice(&self.gru.b_update);
        out.extend_from_slice(&self.gru.b_reset);
        out.extend_from_slice(&self.gru.b_cand);
        out.extend_from_slice(&self.head.w_out.data);
        out.extend_from_slice(&self.head.b_out);
        out.extend_from_slice(&self.head.log_scale);
        out
    }

    pub fn unflatten(&self, flat: &[f64]) -> Result<FlowParams> {
        if flat.len() != self.param_count() {
            return Err(Error::InvalidArgument(format!(
                "flat parameter vector has {} entries, expected {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut out = self.zeros_like();
        let mut pos = 0usize;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&flat[pos..pos + dst.len()]);
            pos += dst.len();
        };
        take(&mut out.gru.w_update.data);
        take(&mut out.gru.w_reset.data);
        take(&mut out.gru.w_cand.data);
        take(&mut out.gru.b_update);
        take(&mut out.gru.b_reset);
        take(&mut out.gru.b_cand);
        take(&mut out.head.w_out.data);
        take(&mut out.head.b_out);
        take(&mut out.head.log_scale);
        Ok(out)
    }

    pub fn check_finite(&self) -> Result<()> {
        for (i, v) in self.flatten().iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::non_finite(&format!("param[{i}]"), "FlowParams"));
            }
        }
        Ok(())
    }

    /// JSON document with named arrays, explicit shapes, and a format-version
    /// field.
    pub fn to_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::json!({
            "format_version": FORMAT_VERSION,
            "params": self,
        }))
    }

    pub fn from_json(value: &serde_json::Value) -> Result<FlowParams> {
        let version = value
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Schema("missing format_version".into()))?;
        if version != FORMAT_VERSION as u64 {
            return Err(Error::Schema(format!(
                "unsupported format_version {version}"
            )));
        }
        let params = value
            .get("params")
            .ok_or_else(|| Error::Schema("missing params".into()))?;
        Ok(serde_json::from_value(params.clone())?)
    }

    /// Bit-exact binary serialization: magic, version, dims, then the flat
    /// parameter vector as little-endian f64.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"DTFLOW\0\0")?;
        for dim in [
            FORMAT_VERSION as u64,
            self.hidden_dim as u64,
            self.state_dim as u64,
            self.input_dim as u64,
        ] {
            w.write_all(&dim.to_le_bytes())?;
        }
        for v in self.flatten() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<FlowParams> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != b"DTFLOW\0\0" {
            return Err(Error::Schema("bad magic in flow parameter file".into()));
        }
        let mut word = [0u8; 8];
        let mut next = |r: &mut R| -> Result<u64> {
            r.read_exact(&mut word)?;
            Ok(u64::from_le_bytes(word))
        };
        let version = next(&mut r)?;
        if version != FORMAT_VERSION as u64 {
            return Err(Error::Schema(format!(
                "unsupported format_version {version}"
            )));
        }
        let hidden = next(&mut r)? as usize;
        let state = next(&mut r)? as usize;
        let input = next(&mut r)? as usize;
        let template = FlowParams::init(hidden, state, input, 0).zeros_like();
        let mut flat = vec![0.0; template.param_count()];
        for v in flat.iter_mut() {
            r.read_exact(&mut word)?;
            *v = f64::from_le_bytes(word);
        }
        template.unflatten(&flat)
    }
}

/// Gradients share the parameter layout.
pub type FlowGrads = FlowParams;

/// Per-step activations recorded during the forward pass; enough to replay
/// the step and to run exact BPTT.
#[derive(Debug, Clone, PartialEq)]
pub struct GruRecord {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub gate_update: Vec<f64>,
    pub gate_reset: Vec<f64>,
    pub h_cand: Vec<f64>,
    pub h_next: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowTape {
    pub taus: Vec<f64>,
    pub steps: Vec<GruRecord>,
    /// tanh(W_out h_k + b_out) per step, reused by the backward pass.
    pub head_tanh: Vec<Vec<f64>>,
    pub z0: Vec<f64>,
}

impl FlowTape {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One GRU update:
///   g_u = sigma(W_u [h;x] + b_u), g_r = sigma(W_r [h;x] + b_r)
///   h~  = tanh(W_c [g_r.*h ; x] + b_c)
///   h'  = (1-g_u).*h + g_u.*h~
pub fn gru_step(
    params: &FlowParams,
    h_prev: &[f64],
    x: &[f64],
) -> Result<(Vec<f64>, GruRecord)> {
    let h = params.hidden_dim;
    if h_prev.len() != h || x.len() != params.feed_dim() {
        return Err(Error::InvalidArgument(format!(
            "gru_step dimension mismatch: h_prev {} (want {}), x {} (want {})",
            h_prev.len(),
            h,
            x.len(),
            params.feed_dim()
        )));
    }
    let mut hx = Vec::with_capacity(h + x.len());
    hx.extend_from_slice(h_prev);
    hx.extend_from_slice(x);

    let mut gate_update = params.gru.w_update.matvec(&hx);
    let mut gate_reset = params.gru.w_reset.matvec(&hx);
    for i in 0..h {
        gate_update[i] = sigmoid(gate_update[i] + params.gru.b_update[i]);
        gate_reset[i] = sigmoid(gate_reset[i] + params.gru.b_reset[i]);
    }

    let mut cand_in = Vec::with_capacity(hx.len());
    for i in 0..h {
        cand_in.push(gate_reset[i] * h_prev[i]);
    }
    cand_in.extend_from_slice(x);
    let mut h_cand = params.gru.w_cand.matvec(&cand_in);
    for i in 0..h {
        h_cand[i] = (h_cand[i] + params.gru.b_cand[i]).tanh();
    }

    let mut h_next = Vec::with_capacity(h);
    for i in 0..h {
        h_next.push((1.0 - gate_update[i]) * h_prev[i] + gate_update[i] * h_cand[i]);
    }
    let record = GruRecord {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        gate_update,
        gate_reset,
        h_cand,
        h_next: h_next.clone(),
    };
    Ok((h_next, record))
}

/// Run the flow over a sampled horizon. `inputs[k]` is the external input at
/// `times[k]`. Returns the predicted states Z (N x n) and the tape.
pub fn flow_forward(
    params: &FlowParams,
    z0: &[f64],
    times: &[f64],
    inputs: &[Vec<f64>],
) -> Result<(Vec<Vec<f64>>, FlowTape)> {
    let n_samples = times.len();
    if n_samples < 2 {
        return Err(Error::InvalidArgument(format!(
            "flow_forward needs at least 2 samples, got {n_samples}"
        )));
    }
    if inputs.len() != n_samples {
        return Err(Error::InvalidArgument(
            "times/inputs length mismatch".into(),
        ));
    }
    if z0.len() != params.state_dim {
        return Err(Error::InvalidArgument(format!(
            "z0 dimension {} != state_dim {}",
            z0.len(),
            params.state_dim
        )));
    }
    let span = times[n_samples - 1] - times[0];
    if !(span > 0.0) {
        return Err(Error::InvalidArgument("time span must be positive".into()));
    }
    let scale: Vec<f64> = params.head.log_scale.iter().map(|v| v.exp()).collect();

    let mut h = vec![0.0; params.hidden_dim];
    let mut z_out = Vec::with_capacity(n_samples);
    let mut tape = FlowTape {
        taus: Vec::with_capacity(n_samples),
        steps: Vec::with_capacity(n_samples),
        head_tanh: Vec::with_capacity(n_samples),
        z0: z0.to_vec(),
    };
    for k in 0..n_samples {
        let tau = (times[k] - times[0]) / span;
        let mut x = Vec::with_capacity(params.feed_dim());
        x.extend_from_slice(z0);
        if inputs[k].len() != params.input_dim {
            return Err(Error::InvalidArgument(format!(
                "input row {k} has dimension {}, expected {}",
                inputs[k].len(),
                params.input_dim
            )));
        }
        x.extend_from_slice(&inputs[k]);
        x.push(tau);

        let (h_next, rec) = gru_step(params, &h, &x)?;
        h = h_next;

        let mut th = params.head.w_out.matvec(&h);
        for (i, v) in th.iter_mut().enumerate() {
            *v = (*v + params.head.b_out[i]).tanh();
        }
        let z_k = if tau == 0.0 {
            z0.to_vec() // identity at tau = 0, bit-exact
        } else {
            z0.iter()
                .enumerate()
                .map(|(i, &z)| z + tau * scale[i] * th[i])
                .collect()
        };
        tape.taus.push(tau);
        tape.steps.push(rec);
        tape.head_tanh.push(th);
        z_out.push(z_k);
    }
    Ok((z_out, tape))
}

/// Exact reverse-mode gradients of `flow_forward` with seed `dl_dz` (N x n).
pub fn flow_backward(
    params: &FlowParams,
    tape: &FlowTape,
    dl_dz: &[Vec<f64>],
) -> Result<FlowGrads> {
    let h_dim = params.hidden_dim;
    let n = params.state_dim;
    if dl_dz.len() != tape.len() {
        return Err(Error::InvalidArgument(format!(
            "gradient seed has {} rows, tape has {}",
            dl_dz.len(),
            tape.len()
        )));
    }
    if tape.z0.len() != n || tape.steps.iter().any(|s| s.h_prev.len() != h_dim) {
        return Err(Error::InvalidArgument(
            "tape does not match parameter shapes".into(),
        ));
    }
    let scale: Vec<f64> = params.head.log_scale.iter().map(|v| v.exp()).collect();
    let mut grads = params.zeros_like();
    let mut dh_next = vec![0.0; h_dim];

    for k in (0..tape.len()).rev() {
        let rec = &tape.steps[k];
        let tau = tape.taus[k];
        let th = &tape.head_tanh[k];
        let dz = &dl_dz[k];
        if dz.len() != n {
            return Err(Error::InvalidArgument(format!(
                "gradient row {k} has dimension {}, expected {n}",
                dz.len()
            )));
        }

        // head: Z_k = z0 + tau * s .* tanh(a), a = W_out h + b_out
        let mut da = vec![0.0; n];
        for c in 0..n {
            let upstream = tau * dz[c];
            grads.head.log_scale[c] += upstream * th[c] * scale[c];
            da[c] = upstream * scale[c] * (1.0 - th[c] * th[c]);
        }
        grads.head.w_out.add_outer(&da, &rec.h_next);
        axpy(1.0, &da, &mut grads.head.b_out);

        let mut dh: Vec<f64> = params.head.w_out.matvec_t(&da);
        axpy(1.0, &dh_next, &mut dh);

        // GRU backward
        let mut dh_prev = vec![0.0; h_dim];
        let mut d_cand_act = vec![0.0; h_dim];
        let mut dgu = vec![0.0; h_dim];
        for i in 0..h_dim {
            dgu[i] = dh[i] * (rec.h_cand[i] - rec.h_prev[i]);
            let dhc = dh[i] * rec.gate_update[i];
            d_cand_act[i] = dhc * (1.0 - rec.h_cand[i] * rec.h_cand[i]);
            dh_prev[i] = dh[i] * (1.0 - rec.gate_update[i]);
        }

        let mut cand_in = Vec::with_capacity(h_dim + rec.x.len());
        for i in 0..h_dim {
            cand_in.push(rec.gate_reset[i] * rec.h_prev[i]);
        }
        cand_in.extend_from_slice(&rec.x);
        grads.gru.w_cand.add_outer(&d_cand_act, &cand_in);
        axpy(1.0, &d_cand_act, &mut grads.gru.b_cand);

        let d_cand_in = params.gru.w_cand.matvec_t(&d_cand_act);
        let mut dgr = vec![0.0; h_dim];
        for i in 0..h_dim {
            dgr[i] = d_cand_in[i] * rec.h_prev[i];
            dh_prev[i] += d_cand_in[i] * rec.gate_reset[i];
        }

        let mut hx = Vec::with_capacity(h_dim + rec.x.len());
        hx.extend_from_slice(&rec.h_prev);
        hx.extend_from_slice(&rec.x);

        let mut dar = vec![0.0; h_dim];
        let mut dau = vec![0.0; h_dim];
        for i in 0..h_dim {
            dar[i] = dgr[i] * rec.gate_reset[i] * (1.0 - rec.gate_reset[i]);
            dau[i] = dgu[i] * rec.gate_update[i] * (1.0 - rec.gate_update[i]);
        }
        grads.gru.w_reset.add_outer(&dar, &hx);
        axpy(1.0, &dar, &mut grads.gru.b_reset);
        grads.gru.w_update.add_outer(&dau, &hx);
        axpy(1.0, &dau, &mut grads.gru.b_update);

        let back_r = params.gru.w_reset.matvec_t(&dar);
        let back_u = params.gru.w_update.matvec_t(&dau);
        for i in 0..h_dim {
            dh_prev[i] += back_r[i] + back_u[i];
        }
        dh_next = dh_prev;
    }
    Ok(grads)
}

/// Parameter-update rule. The adaptive variant is bias-corrected first/second
/// moment estimation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    Descent {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

impl StepRule {
    pub fn adam(lr: f64) -> Self {
        StepRule::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        OptimizerState {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step: 0,
        }
    }
}

/// Pure update: returns new parameters and new optimizer state.
pub fn apply_update(
    params: &[f64],
    grads: &[f64],
    state: &OptimizerState,
    rule: &StepRule,
) -> Result<(Vec<f64>, OptimizerState)> {
    if params.len() != grads.len() || state.first_moment.len() != params.len() {
        return Err(Error::InvalidArgument(
            "apply_update shape mismatch".into(),
        ));
    }
    match *rule {
        StepRule::Descent { lr } => {
            let next = params
                .iter()
                .zip(grads)
                .map(|(p, g)| p - lr * g)
                .collect();
            let mut st = state.clone();
            st.step += 1;
            Ok((next, st))
        }
        StepRule::Adam {
            lr,
            beta1,
            beta2,
            epsilon,
        } => {
            let t = state.step + 1;
            let mut m = state.first_moment.clone();
            let mut v = state.second_moment.clone();
            let mut next = Vec::with_capacity(params.len());
            let bc1 = 1.0 - beta1.powi(t as i32);
            let bc2 = 1.0 - beta2.powi(t as i32);
            for i in 0..params.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * grads[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * grads[i] * grads[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                next.push(params[i] - lr * m_hat / (v_hat.sqrt() + epsilon));
            }
            Ok((
                next,
                OptimizerState {
                    first_moment: m,
                    second_moment: v,
                    step: t,
                },
            ))
        }
    }
}

/// Result of the finite-difference gradient audit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compare `flow_backward` against central finite differences on a random
/// instance. The scalar loss is a fixed random linear functional of Z so the
/// FD route never touches the backward implementation. `corrupt_gradient`
/// deliberately breaks one analytic entry (negative-control hook).
pub fn gradient_check(
    hidden_dim: usize,
    state_dim: usize,
    input_dim: usize,
    n_samples: usize,
    seed: u64,
    n_coords: usize,
    corrupt_gradient: bool,
) -> Result<GradCheckReport> {
    const TOLERANCE: f64 = 1e-4;
    const EPS: f64 = 1e-5;
    let params = FlowParams::init(hidden_dim, state_dim, input_dim, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e3779b97f4a7c15));
    let z0: Vec<f64> = (0..state_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let times: Vec<f64> = (0..n_samples).map(|k| k as f64 * 0.1).collect();
    let inputs: Vec<Vec<f64>> = (0..n_samples)
        .map(|_| (0..input_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let seed_mat: Vec<Vec<f64>> = (0..n_samples)
        .map(|_| (0..state_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();

    let loss = |p: &FlowParams| -> Result<f64> {
        let (z, _) = flow_forward(p, &z0, &times, &inputs)?;
        Ok(z.iter()
            .zip(&seed_mat)
            .map(|(zk, sk)| zk.iter().zip(sk).map(|(a, b)| a * b).sum::<f64>())
            .sum())
    };

    let (_, tape) = flow_forward(&params, &z0, &times, &inputs)?;
    let mut analytic = flow_backward(&params, &tape, &seed_mat)?.flatten();
    if corrupt_gradient {
        analytic[0] += 1.0;
    }

    let flat = params.flatten();
    let total = flat.len();
    let mut max_rel = 0.0f64;
    let n_coords = n_coords.min(total);
    let mut coords: Vec<usize> = (0..total).collect();
    // Fisher-Yates prefix shuffle to pick coordinates without replacement.
    for i in 0..n_coords {
        let j = rng.gen_range(i..total);
        coords.swap(i, j);
    }
    for &c in &coords[..n_coords] {
        let mut fp = flat.clone();
        fp[c] += EPS;
        let mut fm = flat.clone();
        fm[c] -= EPS;
        let lp = loss(&params.unflatten(&fp)?)?;
        let lm = loss(&params.unflatten(&fm)?)?;
        let fd = (lp - lm) / (2.0 * EPS);
        let rel = (analytic[c] - fd).abs() / analytic[c].abs().max(1.0);
        max_rel = max_rel.max(rel);
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        coords_checked: n_coords,
        tolerance: TOLERANCE,
        passed: max_rel <= TOLERANCE,
    })
}
