//! Fixed-step ODE integration, adjoint-state gradients, and CNF
//! log-likelihood via the instantaneous change-of-variables formula.
//!
//! Solvers are deliberately fixed-step explicit (Euler, RK4): gradients of
//! the discretized objective are then exact and runs reproduce bit-for-bit.

use std::io::Write as _;
use std::path::Path;

use crate::ndtensor::{Activation, Matrix, NodeId, SplitRng, Tape};
use crate::{Error, Result};

/// Right-hand side of an ODE system.
pub trait Drift {
    fn dim(&self) -> usize;
    fn eval(&self, t: f64, y: &[f64], out: &mut [f64]);
}

/// Drift with an exactly computable input-Jacobian.
pub trait JacobianDrift: Drift {
    /// d x d matrix of partials df_j / dx_k at (t, y); row j, column k.
    fn jacobian(&self, t: f64, y: &[f64]) -> Matrix;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Method {
    Euler,
    Rk4,
}

/// One explicit step (dt may be negative for backward integration).
fn step(f: &mut impl FnMut(f64, &[f64], &mut [f64]), t: f64, y: &mut [f64], dt: f64, method: Method) {
    let n = y.len();
    match method {
        Method::Euler => {
            let mut k1 = vec![0.0; n];
            f(t, y, &mut k1);
            for i in 0..n {
                y[i] += dt * k1[i];
            }
        }
        Method::Rk4 => {
            let mut k1 = vec![0.0; n];
            let mut k2 = vec![0.0; n];
            let mut k3 = vec![0.0; n];
            let mut k4 = vec![0.0; n];
            let mut tmp = vec![0.0; n];
            f(t, y, &mut k1);
            for i in 0..n {
                tmp[i] = y[i] + 0.5 * dt * k1[i];
            }
            f(t + 0.5 * dt, &tmp, &mut k2);
            for i in 0..n {
                tmp[i] = y[i] + 0.5 * dt * k2[i];
            }
            f(t + 0.5 * dt, &tmp, &mut k3);
            for i in 0..n {
                tmp[i] = y[i] + dt * k3[i];
            }
            f(t + dt, &tmp, &mut k4);
            for i in 0..n {
                y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
    }
}

/// Fixed-step integration of an arbitrary RHS from `t0` to `t1` (either
/// direction). Returns the terminal state; errors on NaN with step index.
pub fn integrate_rhs(
    mut f: impl FnMut(f64, &[f64], &mut [f64]),
    y0: &[f64],
    t0: f64,
    t1: f64,
    steps: usize,
    method: Method,
) -> Result<Vec<f64>> {
    if steps < 1 {
        return Err(Error::Contract("integrate requires steps >= 1".into()));
    }
    let dt = (t1 - t0) / steps as f64;
    let mut y = y0.to_vec();
    for s in 0..steps {
        let t = t0 + s as f64 * dt;
        step(&mut f, t, &mut y, dt, method);
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite state at step {s}")));
        }
    }
    Ok(y)
}

/// Integrate a drift forward from t0 to t1 (t1 > t0).
pub fn integrate(
    f: &dyn Drift,
    h0: &[f64],
    t0: f64,
    t1: f64,
    steps: usize,
    method: Method,
) -> Result<Vec<f64>> {
    if t1 <= t0 {
        return Err(Error::Contract("integrate requires t1 > t0".into()));
    }
    if h0.len() != f.dim() {
        return Err(Error::Contract("state width does not match drift dimension".into()));
    }
    integrate_rhs(|t, y, out| f.eval(t, y, out), h0, t0, t1, steps, method)
}

/// Integrate and keep every step: (steps+1) x d matrix including the
/// initial state.
pub fn integrate_trajectory(
    f: &dyn Drift,
    h0: &[f64],
    t0: f64,
    t1: f64,
    steps: usize,
    method: Method,
) -> Result<Matrix> {
    if t1 <= t0 {
        return Err(Error::Contract("integrate requires t1 > t0".into()));
    }
    let d = f.dim();
    let dt = (t1 - t0) / steps as f64;
    let mut y = h0.to_vec();
    let mut traj = Matrix::zeros(steps + 1, d);
    traj.data_mut()[..d].copy_from_slice(&y);
    let mut g = |t: f64, s: &[f64], out: &mut [f64]| f.eval(t, s, out);
    for s in 0..steps {
        step(&mut g, t0 + s as f64 * dt, &mut y, dt, method);
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite state at step {s}")));
        }
        traj.data_mut()[(s + 1) * d..(s + 2) * d].copy_from_slice(&y);
    }
    Ok(traj)
}

/// Multilayer-perceptron drift f(t, h; theta). `layer_sizes` runs from the
/// input width (d, plus one when time-conditioned) through the hidden
/// widths to the output width d.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct OdeModel {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub theta: Vec<f64>,
    pub time_dependent: bool,
}

impl OdeModel {
    pub fn new(
        layer_sizes: Vec<usize>,
        activation: Activation,
        theta: Vec<f64>,
        time_dependent: bool,
    ) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Contract("OdeModel needs at least input and output layers".into()));
        }
        let d_out = *layer_sizes.last().unwrap();
        let d_in = layer_sizes[0];
        let expected_in = if time_dependent { d_out + 1 } else { d_out };
        if d_in != expected_in {
            return Err(Error::Contract(format!(
                "input width {d_in} does not match output width {d_out} (time_dependent={time_dependent})"
            )));
        }
        let model = OdeModel { layer_sizes, activation, theta, time_dependent };
        if model.theta.len() != model.param_count() {
            return Err(Error::Contract(format!(
                "theta length {} does not match architecture ({} params)",
                model.theta.len(),
                model.param_count()
            )));
        }
        Ok(model)
    }

    /// Random near-identity init: weights ~ N(0, scale^2), biases zero.
    pub fn random(
        d: usize,
        hidden: &[usize],
        activation: Activation,
        scale: f64,
        rng: &mut SplitRng,
    ) -> Self {
        let mut layer_sizes = vec![d];
        layer_sizes.extend_from_slice(hidden);
        layer_sizes.push(d);
        let mut model =
            OdeModel { layer_sizes, activation, theta: Vec::new(), time_dependent: false };
        let count = model.param_count();
        model.theta = (0..count).map(|_| rng.normal() * scale).collect();
        // zero the biases
        let mut off = 0;
        for l in 0..model.layers() {
            let (rows, cols) = model.layer_shape(l);
            off += rows * cols;
            for b in &mut model.theta[off..off + rows] {
                *b = 0.0;
            }
            off += rows;
        }
        model
    }

    pub fn data_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        (self.layer_sizes[l + 1], self.layer_sizes[l])
    }

    pub fn param_count(&self) -> usize {
        (0..self.layers())
            .map(|l| {
                let (r, c) = self.layer_shape(l);
                r * c + r
            })
            .sum()
    }

    /// Weight matrix and bias column for layer `l`, viewed into theta.
    pub fn layer_params(&self, l: usize) -> (Matrix, Matrix) {
        let mut off = 0;
        for k in 0..l {
            let (r, c) = self.layer_shape(k);
            off += r * c + r;
        }
        let (r, c) = self.layer_shape(l);
        let w = Matrix::from_vec(r, c, self.theta[off..off + r * c].to_vec());
        let b = Matrix::col_vec(&self.theta[off + r * c..off + r * c + r]);
        (w, b)
    }

    fn input_features(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut v = x.to_vec();
        if self.time_dependent {
            v.push(t);
        }
        v
    }

    /// Forward pass for a single state vector.
    pub fn forward(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut h = self.input_features(t, x);
        for l in 0..self.layers() {
            let (w, b) = self.layer_params(l);
            let mut out = vec![0.0; w.rows()];
            for (i, o) in out.iter_mut().enumerate() {
                let mut s = b.get(i, 0);
                for (j, &hj) in h.iter().enumerate() {
                    s += w.get(i, j) * hj;
                }
                *o = s;
            }
            if l + 1 < self.layers() {
                for o in &mut out {
                    *o = self.activation.apply(*o);
                }
            }
            h = out;
        }
        h
    }

    /// Exact input-Jacobian at (t, x): the chain product
    /// W_L diag(act'(a_{L-1})) ... diag(act'(a_1)) W_1, restricted to the
    /// state columns when time-conditioned.
    pub fn jacobian(&self, t: f64, x: &[f64]) -> Matrix {
        let d = self.data_dim();
        let mut h = self.input_features(t, x);
        // J starts as W_1 restricted to the d state columns
        let (w1, b1) = self.layer_params(0);
        let mut j = Matrix::zeros(w1.rows(), d);
        for r in 0..w1.rows() {
            for c in 0..d {
                j.set(r, c, w1.get(r, c));
            }
        }
        let mut pre = vec![0.0; w1.rows()];
        for (i, p) in pre.iter_mut().enumerate() {
            let mut s = b1.get(i, 0);
            for (k, &hk) in h.iter().enumerate() {
                s += w1.get(i, k) * hk;
            }
            *p = s;
        }
        for l in 1..self.layers() {
            // scale rows of J by act'(pre), then multiply by W_{l+1}
            for r in 0..j.rows() {
                let s = self.activation.deriv(pre[r]);
                for c in 0..d {
                    j.set(r, c, j.get(r, c) * s);
                }
            }
            h = pre.iter().map(|&p| self.activation.apply(p)).collect();
            let (w, b) = self.layer_params(l);
            j = w.matmul(&j);
            pre = vec![0.0; w.rows()];
            for (i, p) in pre.iter_mut().enumerate() {
                let mut s = b.get(i, 0);
                for (k, &hk) in h.iter().enumerate() {
                    s += w.get(i, k) * hk;
                }
                *p = s;
            }
        }
        j
    }

    /// Vector-Jacobian products a^T df/dx and a^T df/dtheta via one reverse
    /// pass on a throwaway tape.
    pub fn vjp(&self, t: f64, x: &[f64], a: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let params = self.params_on_tape(&mut tape);
        let input = tape.var(Matrix::col_vec(&self.input_features(t, x)));
        let (out, _) = self.forward_on_tape(&mut tape, &params, input);
        let seed = Matrix::col_vec(a);
        let weighted = tape.hadamard_const(out, &seed);
        let s = tape.sum(weighted);
        let mut wrt = vec![input];
        wrt.extend(params.weights.iter().copied());
        wrt.extend(params.biases.iter().copied());
        let grads = tape.grad(s, &wrt)?;
        let gx = grads[0].data()[..self.data_dim()].to_vec();
        let mut gtheta = Vec::with_capacity(self.param_count());
        let layers = self.layers();
        for l in 0..layers {
            gtheta.extend_from_slice(grads[1 + l].data());
            gtheta.extend_from_slice(grads[1 + layers + l].data());
        }
        Ok((gx, gtheta))
    }

    /// Register the parameters as tape leaves.
    pub fn params_on_tape(&self, tape: &mut Tape) -> MlpNodes {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..self.layers() {
            let (w, b) = self.layer_params(l);
            weights.push(tape.var(w));
            biases.push(tape.var(b));
        }
        MlpNodes { weights, biases }
    }

    /// Batched forward pass on the tape; `input` is d x B (autonomous drifts
    /// only). Returns the output node and the pre-activation nodes of each
    /// hidden layer, which the Jacobian/trace builders reuse.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        params: &MlpNodes,
        input: NodeId,
    ) -> (NodeId, Vec<NodeId>) {
        assert!(!self.time_dependent, "tape forward supports autonomous drifts only");
        let mut h = input;
        let mut preacts = Vec::new();
        for l in 0..self.layers() {
            let z = tape.matmul(params.weights[l], h);
            let z = tape.broadcast_add_col(z, params.biases[l]);
            if l + 1 < self.layers() {
                preacts.push(z);
                h = tape.activation(z, self.activation);
            } else {
                h = z;
            }
        }
        (h, preacts)
    }

    /// d x d input-Jacobian of one batch column as a tape node.
    pub fn jacobian_on_tape(
        &self,
        tape: &mut Tape,
        params: &MlpNodes,
        preacts: &[NodeId],
        column: usize,
    ) -> NodeId {
        let mut j = params.weights[0];
        for (l, &pre) in preacts.iter().enumerate() {
            let sp = tape.activation_prime(pre, self.activation);
            let s = tape.col(sp, column);
            let scaled = tape.row_scale(s, j);
            j = tape.matmul(params.weights[l + 1], scaled);
        }
        j
    }

    /// 1 x B row of per-sample Jacobian traces. Fast separable path for a
    /// single hidden layer; falls back to per-sample chains otherwise.
    pub fn trace_row_on_tape(
        &self,
        tape: &mut Tape,
        params: &MlpNodes,
        preacts: &[NodeId],
        batch: usize,
    ) -> NodeId {
        if self.layers() == 2 {
            // tr J_i = sum_m (W1 W2)[m,m] * act'(a1)[m,i]
            let w1w2 = tape.matmul(params.weights[0], params.weights[1]);
            let c = tape.diag_vec(w1w2);
            let ct = tape.transpose(c);
            let sp = tape.activation_prime(preacts[0], self.activation);
            tape.matmul(ct, sp)
        } else if self.layers() == 1 {
            // linear drift: trace is constant across the batch
            let c = tape.diag_vec(params.weights[0]);
            let ct = tape.transpose(c);
            let ones = Matrix::from_vec(self.layer_sizes[0], batch, vec![1.0; self.layer_sizes[0] * batch]);
            let on = tape.var(ones);
            tape.matmul(ct, on)
        } else {
            let mut row = tape.var(Matrix::zeros(1, batch));
            for i in 0..batch {
                let j = self.jacobian_on_tape(tape, params, preacts, i);
                let tr = j; // d x d
                let t = tape.trace(tr);
                // scatter the scalar into column i
                let mut mask = Matrix::zeros(1, batch);
                mask.set(0, i, 1.0);
                let ones = tape.var(Matrix::from_vec(1, batch, vec![1.0; batch]));
                let spread = tape.matmul(t, ones);
                let masked = tape.hadamard_const(spread, &mask);
                row = tape.add(row, masked);
            }
            row
        }
    }
}

/// Tape leaves for one MLP's parameters.
pub struct MlpNodes {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
}

impl Drift for OdeModel {
    fn dim(&self) -> usize {
        self.data_dim()
    }

    fn eval(&self, t: f64, y: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.forward(t, y));
    }
}

impl JacobianDrift for OdeModel {
    fn jacobian(&self, t: f64, y: &[f64]) -> Matrix {
        OdeModel::jacobian(self, t, y)
    }
}

/// Adjoint-state gradient: integrates [h, a, g_theta] backward from t1 with
/// the same method and step count as the forward pass. Returns
/// (dL/dh0, dL/dtheta) given the loss gradient at t1.
pub fn adjoint_grad(
    f: &OdeModel,
    h0: &[f64],
    t0: f64,
    t1: f64,
    steps: usize,
    method: Method,
    loss_grad_t1: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = f.data_dim();
    let p = f.param_count();
    if t1 == t0 {
        return Ok((loss_grad_t1.to_vec(), vec![0.0; p]));
    }
    if t1 < t0 {
        return Err(Error::Contract("adjoint_grad requires t1 >= t0".into()));
    }
    let h_t1 = integrate(f, h0, t0, t1, steps, method)?;
    let mut aug = Vec::with_capacity(2 * d + p);
    aug.extend_from_slice(&h_t1);
    aug.extend_from_slice(loss_grad_t1);
    aug.extend(std::iter::repeat(0.0).take(p));
    let rhs = |t: f64, y: &[f64], out: &mut [f64]| {
        let (h, rest) = y.split_at(d);
        let (a, _) = rest.split_at(d);
        f.eval(t, h, &mut out[..d]);
        match f.vjp(t, h, a) {
            Ok((jt_a, pt_a)) => {
                for i in 0..d {
                    out[d + i] = -jt_a[i];
                }
                for i in 0..p {
                    out[2 * d + i] = -pt_a[i];
                }
            }
            // the integrator's finiteness check surfaces this next step
            Err(_) => out[d..].fill(f64::NAN),
        }
    };
    let result = integrate_rhs(rhs, &aug, t1, t0, steps, method)?;
    let dl_dh0 = result[d..2 * d].to_vec();
    let dl_dtheta = result[2 * d..].to_vec();
    Ok((dl_dh0, dl_dtheta))
}

/// Terminal state, accumulated log-det, and (optionally) the per-step
/// states of one CNF evaluation.
#[derive(Debug, Clone)]
pub struct FlowResult {
    /// State at t0 after integrating backward from the data point at t1.
    pub z0: Vec<f64>,
    /// Accumulated -∫ Tr(df/dz) dt over [t0, t1].
    pub logdet: f64,
    pub states: Option<Matrix>,
}

/// Run the flow backward from a data point `x` living at t1 to the base
/// distribution at t0, accumulating the exact Jacobian trace.
pub fn cnf_flow(
    f: &(impl JacobianDrift + ?Sized),
    x: &[f64],
    t0: f64,
    t1: f64,
    steps: usize,
    method: Method,
    retain_states: bool,
) -> Result<FlowResult> {
    if t1 <= t0 {
        return Err(Error::Contract("cnf requires t1 > t0".into()));
    }
    let d = f.dim();
    if x.len() != d {
        return Err(Error::Contract("cnf input width mismatch".into()));
    }
    let mut aug = x.to_vec();
    aug.push(0.0); // running ∫ trace
    let rhs = |t: f64, y: &[f64], out: &mut [f64]| {
        let z = &y[..d];
        f.eval(t, z, &mut out[..d]);
        out[d] = f.jacobian(t, z).trace();
    };
    let mut states = retain_states.then(|| Matrix::zeros(steps + 1, d));
    if let Some(s) = &mut states {
        s.data_mut()[..d].copy_from_slice(x);
    }
    let dt = (t0 - t1) / steps as f64;
    let mut y = aug;
    let mut g = rhs;
    for s in 0..steps {
        step(&mut g, t1 + s as f64 * dt, &mut y, dt, method);
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite flow state at step {s}")));
        }
        if let Some(m) = &mut states {
            m.data_mut()[(s + 1) * d..(s + 2) * d].copy_from_slice(&y[..d]);
        }
    }
    // Integrating dl/dt = Tr from t1 down to t0 yields -∫_{t0}^{t1} Tr dt.
    Ok(FlowResult { z0: y[..d].to_vec(), logdet: y[d], states })
}

/// Standard-normal log-density.
pub fn std_normal_logpdf(z: &[f64]) -> f64 {
    let d = z.len() as f64;
    -0.5 * d * (2.0 * std::f64::consts::PI).ln() - 0.5 * z.iter().map(|v| v * v).sum::<f64>()
}

/// CNF log-density of a data point under the model: standard-normal base at
/// t0, data at t1, exact Jacobian trace (no stochastic estimation).
pub fn cnf_logp(
    f: &(impl JacobianDrift + ?Sized),
    x: &[f64],
    t0: f64,
    t1: f64,
    steps: usize,
) -> Result<f64> {
    let r = cnf_flow(f, x, t0, t1, steps, Method::Rk4, false)?;
    Ok(std_normal_logpdf(&r.z0) + r.logdet)
}

/// Model checkpoint: versioned JSON with theta stored as little-endian hex
/// so reload is bit-exact.
#[derive(serde::Serialize, serde::Deserialize)]
struct Checkpoint {
    version: u32,
    layer_sizes: Vec<usize>,
    activation: Activation,
    time_dependent: bool,
    theta_le_hex: String,
    seed: u64,
    config_hash: String,
}

pub fn save_checkpoint(
    model: &OdeModel,
    seed: u64,
    config_hash: &str,
    path: &Path,
) -> Result<()> {
    let bytes: Vec<u8> = model.theta.iter().flat_map(|v| v.to_le_bytes()).collect();
    let ck = Checkpoint {
        version: 1,
        layer_sizes: model.layer_sizes.clone(),
        activation: model.activation,
        time_dependent: model.time_dependent,
        theta_le_hex: hex::encode(bytes),
        seed,
        config_hash: config_hash.to_string(),
    };
    let mut file = std::fs::File::create(path)?;
    file.write_all(serde_json::to_string_pretty(&ck).unwrap().as_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(OdeModel, u64, String)> {
    let text = std::fs::read_to_string(path)?;
    let ck: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| Error::Parse { line: 0, msg: format!("bad checkpoint: {e}") })?;
    if ck.version != 1 {
        return Err(Error::Parse { line: 0, msg: format!("unknown checkpoint version {}", ck.version) });
    }
    let bytes = hex::decode(&ck.theta_le_hex)
        .map_err(|e| Error::Parse { line: 0, msg: format!("bad theta hex: {e}") })?;
    let theta: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let model = OdeModel::new(ck.layer_sizes, ck.activation, theta, ck.time_dependent)?;
    Ok((model, ck.seed, ck.config_hash))
}
