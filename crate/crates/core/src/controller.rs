//! Dynamic distributed control policies with Hamiltonian structure, plus a
//! distributed MLP baseline.
//!
//! The policy integrates an internal state `xi` through
//!
//! ```text
//!   xi'(t) = (J - R_c) dPhi/dxi + K y(t)
//!   u(t)   = -K^T dPhi/dxi
//! ```
//!
//! where J is skew-symmetric, R_c is PSD, and J, R_c, K live in the block
//! sparsity pattern of the communication graph raised to the structural
//! radius `l_y`. The controller energy `Phi` is a sum of per-node terms, so
//! information never travels farther than the pattern allows.

use crate::blocklin::{self, BlockMatrix};
use crate::graph::{self, BlockPattern, Graph};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::LN_2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("layer index {index} out of range for schedule of {layers} layers")]
    LayerOutOfRange { index: usize, layers: usize },
    #[error(
        "structural radii (l_y={l_y}, l_xi={l_xi}) violate targets (R_y={r_y}, R_xi={r_xi}): \
         require l_y <= R_y and l_y + 2*l_xi <= R_xi"
    )]
    RadiusCondition {
        l_y: usize,
        l_xi: usize,
        r_y: usize,
        r_xi: usize,
    },
    #[error("weights do not conform to the required sparsity pattern: {0}")]
    SparsityViolation(String),
    #[error("serialization: {0}")]
    Serialization(String),
    #[error(transparent)]
    Graph(#[from] crate::graph::GraphError),
}

/// Numerically safe log(cosh(z)); for large |z| this tends to |z| - ln 2.
#[inline]
pub fn log_cosh(z: f64) -> f64 {
    let a = z.abs();
    a + (-2.0 * a).exp().ln_1p() - LN_2
}

/// sech^2(z) without overflow.
#[inline]
pub fn sech2(z: f64) -> f64 {
    let e = (-z.abs()).exp();
    let s = 2.0 * e / (1.0 + e * e);
    s * s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    LogCosh,
}

impl Activation {
    #[inline]
    fn eval(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::LogCosh => log_cosh(z),
        }
    }

    #[inline]
    fn deriv(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => sech2(z),
            Activation::LogCosh => z.tanh(),
        }
    }
}

/// Shape of the controller energy. All variants are sums of per-node terms
/// (separability order zero); deeper variants trade closed-form derivatives
/// for expressivity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum EnergyVariant {
    /// Per node: 1^T log cosh(W xi + b) with hidden width per node.
    LogcoshSingle { hidden: Vec<usize> },
    /// Per node: w * act(W2 * act(W1 xi)); no biases.
    TwoLayer {
        h1: Vec<usize>,
        h2: Vec<usize>,
        activation: Activation,
    },
    /// Per node: a depth-layer log-cosh chain of square maps, summed.
    DeepStack { depth: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergySpec {
    pub xi_dims: Vec<usize>,
    #[serde(flatten)]
    pub variant: EnergyVariant,
}

impl EnergySpec {
    pub fn node_count(&self) -> usize {
        self.xi_dims.len()
    }

    pub fn xi_dim_total(&self) -> usize {
        self.xi_dims.iter().sum()
    }

    pub fn node_param_len(&self, i: usize) -> usize {
        let q = self.xi_dims[i];
        match &self.variant {
            EnergyVariant::LogcoshSingle { hidden } => hidden[i] * q + hidden[i],
            EnergyVariant::TwoLayer { h1, h2, .. } => h1[i] * q + h2[i] * h1[i] + h2[i],
            EnergyVariant::DeepStack { depth } => depth * (q * q + q),
        }
    }

    /// Total parameter length of one layer of the schedule.
    pub fn layer_param_len(&self) -> usize {
        (0..self.node_count()).map(|i| self.node_param_len(i)).sum()
    }

    pub fn node_param_offset(&self, i: usize) -> usize {
        (0..i).map(|j| self.node_param_len(j)).sum()
    }

    fn node_xi_offset(&self, i: usize) -> usize {
        self.xi_dims[..i].iter().sum()
    }

    fn check_theta(&self, theta: &[f64]) -> Result<(), ControllerError> {
        if theta.len() != self.layer_param_len() {
            return Err(ControllerError::DimensionMismatch(format!(
                "theta length {} != layer parameter length {}",
                theta.len(),
                self.layer_param_len()
            )));
        }
        Ok(())
    }

    fn node_value(&self, i: usize, xi: &[f64], theta: &[f64]) -> f64 {
        let q = self.xi_dims[i];
        match &self.variant {
            EnergyVariant::LogcoshSingle { hidden } => {
                let w = hidden[i];
                let (wm, b) = theta.split_at(w * q);
                let mut acc = 0.0;
                for a in 0..w {
                    let mut z = b[a];
                    for c in 0..q {
                        z += wm[a * q + c] * xi[c];
                    }
                    acc += log_cosh(z);
                }
                acc
            }
            EnergyVariant::TwoLayer { h1, h2, activation } => {
                let (n1, n2) = (h1[i], h2[i]);
                let (w1, rest) = theta.split_at(n1 * q);
                let (w2, wv) = rest.split_at(n2 * n1);
                let mut a1 = vec![0.0; n1];
                for a in 0..n1 {
                    let mut z = 0.0;
                    for c in 0..q {
                        z += w1[a * q + c] * xi[c];
                    }
                    a1[a] = activation.eval(z);
                }
                let mut acc = 0.0;
                for a in 0..n2 {
                    let mut z = 0.0;
                    for c in 0..n1 {
                        z += w2[a * n1 + c] * a1[c];
                    }
                    acc += wv[a] * activation.eval(z);
                }
                acc
            }
            EnergyVariant::DeepStack { depth } => {
                let mut state = xi.to_vec();
                let mut off = 0;
                for _ in 0..*depth {
                    let wm = &theta[off..off + q * q];
                    let b = &theta[off + q * q..off + q * q + q];
                    off += q * q + q;
                    let mut next = vec![0.0; q];
                    for a in 0..q {
                        let mut z = b[a];
                        for c in 0..q {
                            z += wm[a * q + c] * state[c];
                        }
                        next[a] = log_cosh(z);
                    }
                    state = next;
                }
                state.iter().sum()
            }
        }
    }

    fn node_gradient(&self, i: usize, xi: &[f64], theta: &[f64], out: &mut [f64]) {
        let q = self.xi_dims[i];
        match &self.variant {
            EnergyVariant::LogcoshSingle { hidden } => {
                let w = hidden[i];
                let (wm, b) = theta.split_at(w * q);
                out.iter_mut().for_each(|v| *v = 0.0);
                for a in 0..w {
                    let mut z = b[a];
                    for c in 0..q {
                        z += wm[a * q + c] * xi[c];
                    }
                    let t = z.tanh();
                    for c in 0..q {
                        out[c] += wm[a * q + c] * t;
                    }
                }
            }
            EnergyVariant::TwoLayer { h1, h2, activation } => {
                let (n1, n2) = (h1[i], h2[i]);
                let (w1, rest) = theta.split_at(n1 * q);
                let (w2, wv) = rest.split_at(n2 * n1);
                let mut z1 = vec![0.0; n1];
                let mut a1 = vec![0.0; n1];
                for a in 0..n1 {
                    let mut z = 0.0;
                    for c in 0..q {
                        z += w1[a * q + c] * xi[c];
                    }
                    z1[a] = z;
                    a1[a] = activation.eval(z);
                }
                let mut z2 = vec![0.0; n2];
                for a in 0..n2 {
                    let mut z = 0.0;
                    for c in 0..n1 {
                        z += w2[a * n1 + c] * a1[c];
                    }
                    z2[a] = z;
                }
                // reverse pass
                let mut d1 = vec![0.0; n1];
                for a in 0..n2 {
                    let s = wv[a] * activation.deriv(z2[a]);
                    for c in 0..n1 {
                        d1[c] += w2[a * n1 + c] * s;
                    }
                }
                out.iter_mut().for_each(|v| *v = 0.0);
                for a in 0..n1 {
                    let s = d1[a] * activation.deriv(z1[a]);
                    for c in 0..q {
                        out[c] += w1[a * q + c] * s;
                    }
                }
            }
            EnergyVariant::DeepStack { depth } => {
                // forward storing pre-activations, then reverse
                let mut states = Vec::with_capacity(depth + 1);
                states.push(xi.to_vec());
                let mut zs = Vec::with_capacity(*depth);
                let mut off = 0;
                for _ in 0..*depth {
                    let wm = &theta[off..off + q * q];
                    let b = &theta[off + q * q..off + q * q + q];
                    off += q * q + q;
                    let prev = states.last().unwrap();
                    let mut z = vec![0.0; q];
                    let mut next = vec![0.0; q];
                    for a in 0..q {
                        let mut acc = b[a];
                        for c in 0..q {
                            acc += wm[a * q + c] * prev[c];
                        }
                        z[a] = acc;
                        next[a] = log_cosh(acc);
                    }
                    zs.push(z);
                    states.push(next);
                }
                let mut delta = vec![1.0; q];
                for l in (0..*depth).rev() {
                    let off_l = l * (q * q + q);
                    let wm = &theta[off_l..off_l + q * q];
                    let mut next = vec![0.0; q];
                    for a in 0..q {
                        let s = zs[l][a].tanh() * delta[a];
                        for c in 0..q {
                            next[c] += wm[a * q + c] * s;
                        }
                    }
                    delta = next;
                }
                out.copy_from_slice(&delta);
            }
        }
    }

    fn node_hessian(&self, i: usize, xi: &[f64], theta: &[f64], out: &mut [f64]) {
        let q = self.xi_dims[i];
        match &self.variant {
            EnergyVariant::LogcoshSingle { hidden } => {
                let w = hidden[i];
                let (wm, b) = theta.split_at(w * q);
                out.iter_mut().for_each(|v| *v = 0.0);
                for a in 0..w {
                    let mut z = b[a];
                    for c in 0..q {
                        z += wm[a * q + c] * xi[c];
                    }
                    let s = sech2(z);
                    for r in 0..q {
                        let sr = s * wm[a * q + r];
                        for c in 0..q {
                            out[r * q + c] += sr * wm[a * q + c];
                        }
                    }
                }
            }
            _ => {
                // central differences of the gradient
                let step = 1e-5;
                let mut xp = xi.to_vec();
                let mut gp = vec![0.0; q];
                let mut gm = vec![0.0; q];
                for c in 0..q {
                    xp[c] = xi[c] + step;
                    self.node_gradient(i, &xp, theta, &mut gp);
                    xp[c] = xi[c] - step;
                    self.node_gradient(i, &xp, theta, &mut gm);
                    xp[c] = xi[c];
                    for r in 0..q {
                        out[r * q + c] = (gp[r] - gm[r]) / (2.0 * step);
                    }
                }
                // symmetrize to kill finite-difference asymmetry
                for r in 0..q {
                    for c in r + 1..q {
                        let v = 0.5 * (out[r * q + c] + out[c * q + r]);
                        out[r * q + c] = v;
                        out[c * q + r] = v;
                    }
                }
            }
        }
    }

    /// Accumulates d(demand . dPhi_i/dxi_i)/dtheta_i into `out`.
    fn node_param_grad(
        &self,
        i: usize,
        xi: &[f64],
        theta: &[f64],
        demand: &[f64],
        out: &mut [f64],
    ) {
        let q = self.xi_dims[i];
        match &self.variant {
            EnergyVariant::LogcoshSingle { hidden } => {
                let w = hidden[i];
                let (wm, b) = theta.split_at(w * q);
                let (gw, gb) = out.split_at_mut(w * q);
                for a in 0..w {
                    let mut z = b[a];
                    let mut wv = 0.0;
                    for c in 0..q {
                        z += wm[a * q + c] * xi[c];
                        wv += wm[a * q + c] * demand[c];
                    }
                    let t = z.tanh();
                    let sv = sech2(z) * wv;
                    for c in 0..q {
                        gw[a * q + c] += t * demand[c] + sv * xi[c];
                    }
                    gb[a] += sv;
                }
            }
            _ => {
                // central differences over the node's own parameters
                let step = 1e-5;
                let mut th = theta.to_vec();
                let mut gp = vec![0.0; q];
                let mut gm = vec![0.0; q];
                for p in 0..th.len() {
                    let orig = th[p];
                    th[p] = orig + step;
                    self.node_gradient(i, xi, &th, &mut gp);
                    th[p] = orig - step;
                    self.node_gradient(i, xi, &th, &mut gm);
                    th[p] = orig;
                    let mut acc = 0.0;
                    for c in 0..q {
                        acc += demand[c] * (gp[c] - gm[c]);
                    }
                    out[p] += acc / (2.0 * step);
                }
            }
        }
    }

    pub fn value(&self, xi: &[f64], theta: &[f64]) -> Result<f64, ControllerError> {
        self.check_theta(theta)?;
        if xi.len() != self.xi_dim_total() {
            return Err(ControllerError::DimensionMismatch(format!(
                "xi length {} != {}",
                xi.len(),
                self.xi_dim_total()
            )));
        }
        let mut acc = 0.0;
        for i in 0..self.node_count() {
            let xo = self.node_xi_offset(i);
            let po = self.node_param_offset(i);
            acc += self.node_value(
                i,
                &xi[xo..xo + self.xi_dims[i]],
                &theta[po..po + self.node_param_len(i)],
            );
        }
        Ok(acc)
    }

    pub fn gradient(&self, xi: &[f64], theta: &[f64]) -> Result<Vec<f64>, ControllerError> {
        self.check_theta(theta)?;
        if xi.len() != self.xi_dim_total() {
            return Err(ControllerError::DimensionMismatch(format!(
                "xi length {} != {}",
                xi.len(),
                self.xi_dim_total()
            )));
        }
        let mut out = vec![0.0; xi.len()];
        for i in 0..self.node_count() {
            let xo = self.node_xi_offset(i);
            let po = self.node_param_offset(i);
            let q = self.xi_dims[i];
            self.node_gradient(
                i,
                &xi[xo..xo + q],
                &theta[po..po + self.node_param_len(i)],
                &mut out[xo..xo + q],
            );
        }
        Ok(out)
    }

    /// Block-diagonal Hessian d2Phi/dxi2; the off-diagonal blocks of a
    /// separable energy are identically zero.
    pub fn hessian_blockdiag(
        &self,
        xi: &[f64],
        theta: &[f64],
    ) -> Result<BlockMatrix, ControllerError> {
        self.check_theta(theta)?;
        let mut out = BlockMatrix::zeros(self.xi_dims.clone(), self.xi_dims.clone());
        let mut buf = Vec::new();
        for i in 0..self.node_count() {
            let xo = self.node_xi_offset(i);
            let po = self.node_param_offset(i);
            let q = self.xi_dims[i];
            buf.clear();
            buf.resize(q * q, 0.0);
            self.node_hessian(
                i,
                &xi[xo..xo + q],
                &theta[po..po + self.node_param_len(i)],
                &mut buf,
            );
            out.set_block(i, i, &buf);
        }
        Ok(out)
    }

    /// Accumulates d(demand . dPhi/dxi)/dtheta into `out` (one layer).
    pub fn accumulate_param_grad(
        &self,
        xi: &[f64],
        theta: &[f64],
        demand: &[f64],
        out: &mut [f64],
    ) {
        debug_assert_eq!(out.len(), self.layer_param_len());
        for i in 0..self.node_count() {
            let xo = self.node_xi_offset(i);
            let po = self.node_param_offset(i);
            let q = self.xi_dims[i];
            let pl = self.node_param_len(i);
            self.node_param_grad(
                i,
                &xi[xo..xo + q],
                &theta[po..po + pl],
                &demand[xo..xo + q],
                &mut out[po..po + pl],
            );
        }
    }

    /// Index ranges of the weight-matrix entries inside one layer vector,
    /// excluding biases; the smoothness regularizer runs over these.
    pub fn weight_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        for i in 0..self.node_count() {
            let q = self.xi_dims[i];
            let po = self.node_param_offset(i);
            match &self.variant {
                EnergyVariant::LogcoshSingle { hidden } => {
                    out.push(po..po + hidden[i] * q);
                }
                EnergyVariant::TwoLayer { h1, h2, .. } => {
                    // all parameters are weights (no biases)
                    out.push(po..po + h1[i] * q + h2[i] * h1[i] + h2[i]);
                }
                EnergyVariant::DeepStack { depth } => {
                    for l in 0..*depth {
                        let lo = po + l * (q * q + q);
                        out.push(lo..lo + q * q);
                    }
                }
            }
        }
        out
    }

    /// Bias entries inside one layer vector.
    pub fn bias_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        for i in 0..self.node_count() {
            let q = self.xi_dims[i];
            let po = self.node_param_offset(i);
            match &self.variant {
                EnergyVariant::LogcoshSingle { hidden } => {
                    out.push(po + hidden[i] * q..po + hidden[i] * q + hidden[i]);
                }
                EnergyVariant::TwoLayer { .. } => {}
                EnergyVariant::DeepStack { depth } => {
                    for l in 0..*depth {
                        let lo = po + l * (q * q + q);
                        out.push(lo + q * q..lo + q * q + q);
                    }
                }
            }
        }
        out
    }
}

/// Piecewise-constant parameter schedule for the controller energy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "layers", rename_all = "snake_case")]
pub enum Schedule {
    /// One parameter vector per discretization interval.
    PerLayer(Vec<Vec<f64>>),
    /// A single vector shared by all intervals.
    Tied(Vec<f64>),
}

impl Schedule {
    pub fn layer_count(&self) -> usize {
        match self {
            Schedule::PerLayer(v) => v.len(),
            Schedule::Tied(_) => 1,
        }
    }

    pub fn is_tied(&self) -> bool {
        matches!(self, Schedule::Tied(_))
    }

    /// Parameters in effect at interval k; indices beyond the schedule hold
    /// the final value (frozen tail).
    pub fn theta_clamped(&self, k: usize) -> &[f64] {
        match self {
            Schedule::PerLayer(v) => &v[k.min(v.len() - 1)],
            Schedule::Tied(v) => v,
        }
    }
}

/// Damping parametrization of the controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RcParam {
    /// Non-trainable PSD block-diagonal matrix (flat row-major data).
    Fixed { data: Vec<f64> },
    /// Per-node square factors L_i; R_c = blkdiag(L_i L_i^T) stays PSD for
    /// any parameter value.
    Trainable { factors: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub a_len: usize,
    pub k_len: usize,
    pub rc_len: usize,
    pub theta_layer_len: usize,
    pub theta_layers: usize,
    pub total: usize,
}

impl ParamLayout {
    pub fn a_range(&self) -> std::ops::Range<usize> {
        0..self.a_len
    }

    pub fn k_range(&self) -> std::ops::Range<usize> {
        self.a_len..self.a_len + self.k_len
    }

    pub fn rc_range(&self) -> std::ops::Range<usize> {
        self.a_len + self.k_len..self.a_len + self.k_len + self.rc_len
    }

    pub fn theta_range(&self, layer: usize) -> std::ops::Range<usize> {
        let base = self.a_len + self.k_len + self.rc_len + layer * self.theta_layer_len;
        base..base + self.theta_layer_len
    }
}

/// The trainable distributed pH controller.
#[derive(Debug, Clone, PartialEq)]
pub struct Controller {
    graph: Graph,
    xi_dims: Vec<usize>,
    meas_dims: Vec<usize>,
    l_y: usize,
    l_xi: usize,
    pattern_sq: BlockPattern,
    pattern_a: BlockPattern,
    pattern_k: BlockPattern,
    a_free: BlockMatrix,
    k_gain: BlockMatrix,
    rc: RcParam,
    energy: EnergySpec,
    schedule: Schedule,
}

/// Damping choice at initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RcInit {
    /// Benchmark default: non-trainable 12 * blkdiag(I_2, 0) per node.
    BenchmarkFixed,
    /// No controller damping (lossless configurations).
    Zero,
    /// Trainable per-node factors, initialized at zero.
    Trainable,
}

#[derive(Debug, Clone)]
pub struct ControllerInit {
    pub graph: Graph,
    pub xi_dims: Vec<usize>,
    pub meas_dims: Vec<usize>,
    pub l_y: usize,
    pub l_xi: usize,
    /// Optional (R_y, R_xi) to validate against the structural radii.
    pub target_radii: Option<(usize, usize)>,
    pub variant: EnergyVariant,
    pub time_invariant: bool,
    pub n_layers: usize,
    pub rc: RcInit,
    pub seed: u64,
}

impl ControllerInit {
    /// Benchmark-shaped controller: one-hop pattern, per-node state of
    /// dimension 4, square single-layer log-cosh energy.
    pub fn benchmark(graph: Graph, meas_dims: Vec<usize>, n_layers: usize, seed: u64) -> Self {
        let m = graph.node_count();
        let xi_dims = vec![4usize; m];
        let hidden = xi_dims.clone();
        ControllerInit {
            graph,
            xi_dims,
            meas_dims,
            l_y: 1,
            l_xi: 0,
            target_radii: Some((1, 1)),
            variant: EnergyVariant::LogcoshSingle { hidden },
            time_invariant: false,
            n_layers,
            rc: RcInit::BenchmarkFixed,
            seed,
        }
    }
}

impl Controller {
    pub fn init(cfg: &ControllerInit) -> Result<Self, ControllerError> {
        let m = cfg.graph.node_count();
        if cfg.xi_dims.len() != m || cfg.meas_dims.len() != m {
            return Err(ControllerError::DimensionMismatch(format!(
                "expected {m} per-node dimension entries"
            )));
        }
        if let Some((r_y, r_xi)) = cfg.target_radii {
            if cfg.l_y > r_y || cfg.l_y + 2 * cfg.l_xi > r_xi {
                return Err(ControllerError::RadiusCondition {
                    l_y: cfg.l_y,
                    l_xi: cfg.l_xi,
                    r_y,
                    r_xi,
                });
            }
        }
        let pattern_sq =
            BlockPattern::from_power(&cfg.graph, cfg.l_y, cfg.xi_dims.clone(), cfg.xi_dims.clone())?;
        let pattern_a = pattern_sq.strictly_lower();
        let pattern_k =
            BlockPattern::from_power(&cfg.graph, cfg.l_y, cfg.xi_dims.clone(), cfg.meas_dims.clone())?;

        let energy = EnergySpec {
            xi_dims: cfg.xi_dims.clone(),
            variant: cfg.variant.clone(),
        };

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let q_total: usize = cfg.xi_dims.iter().sum();
        let p_total: usize = cfg.meas_dims.iter().sum();

        let a_free = sample_masked(&mut rng, q_total, q_total, &pattern_a)?;
        let k_gain = sample_masked(&mut rng, q_total, p_total, &pattern_k)?;

        let rc = match cfg.rc {
            RcInit::BenchmarkFixed => {
                let mut data = BlockMatrix::zeros(cfg.xi_dims.clone(), cfg.xi_dims.clone());
                let mut off = 0;
                for &q in &cfg.xi_dims {
                    for d in 0..q.min(2) {
                        data.set(off + d, off + d, 12.0);
                    }
                    off += q;
                }
                RcParam::Fixed {
                    data: data.data().to_vec(),
                }
            }
            RcInit::Zero => RcParam::Fixed {
                data: vec![0.0; q_total * q_total],
            },
            RcInit::Trainable => {
                let len: usize = cfg.xi_dims.iter().map(|&q| q * q).sum();
                RcParam::Trainable {
                    factors: vec![0.0; len],
                }
            }
        };

        // one layer of energy parameters, fan-in scaled, replicated over the
        // schedule so every layer starts identical
        let mut layer = vec![0.0; energy.layer_param_len()];
        for i in 0..m {
            let q = cfg.xi_dims[i];
            let po = energy.node_param_offset(i);
            let pl = energy.node_param_len(i);
            let sd = 1.0 / (q as f64).sqrt();
            let normal = Normal::new(0.0, sd).expect("positive sd");
            for v in &mut layer[po..po + pl] {
                *v = normal.sample(&mut rng);
            }
        }
        let schedule = if cfg.time_invariant {
            Schedule::Tied(layer)
        } else {
            Schedule::PerLayer(vec![layer; cfg.n_layers.max(1)])
        };

        Ok(Controller {
            graph: cfg.graph.clone(),
            xi_dims: cfg.xi_dims.clone(),
            meas_dims: cfg.meas_dims.clone(),
            l_y: cfg.l_y,
            l_xi: cfg.l_xi,
            pattern_sq,
            pattern_a,
            pattern_k,
            a_free,
            k_gain,
            rc,
            energy,
            schedule,
        })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn xi_dims(&self) -> &[usize] {
        &self.xi_dims
    }

    pub fn meas_dims(&self) -> &[usize] {
        &self.meas_dims
    }

    pub fn xi_dim_total(&self) -> usize {
        self.xi_dims.iter().sum()
    }

    pub fn meas_dim_total(&self) -> usize {
        self.meas_dims.iter().sum()
    }

    pub fn radii(&self) -> (usize, usize) {
        (self.l_y, self.l_xi)
    }

    pub fn energy(&self) -> &EnergySpec {
        &self.energy
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn schedule_mut(&mut self) -> &mut Schedule {
        &mut self.schedule
    }

    pub fn pattern_sq(&self) -> &BlockPattern {
        &self.pattern_sq
    }

    pub fn pattern_a(&self) -> &BlockPattern {
        &self.pattern_a
    }

    pub fn pattern_k(&self) -> &BlockPattern {
        &self.pattern_k
    }

    pub fn a_free(&self) -> &BlockMatrix {
        &self.a_free
    }

    pub fn k_gain(&self) -> &BlockMatrix {
        &self.k_gain
    }

    pub fn rc_param(&self) -> &RcParam {
        &self.rc
    }

    /// J = A - A^T; skew for every parameter value, sparse on the pattern.
    pub fn j_matrix(&self) -> BlockMatrix {
        blocklin::make_skew(&self.a_free).expect("a_free is square by construction")
    }

    pub fn rc_matrix(&self) -> BlockMatrix {
        match &self.rc {
            RcParam::Fixed { data } => {
                BlockMatrix::from_data(self.xi_dims.clone(), self.xi_dims.clone(), data.clone())
            }
            RcParam::Trainable { factors } => {
                let mut singles = Vec::with_capacity(self.xi_dims.len());
                let mut off = 0;
                for &q in &self.xi_dims {
                    singles.push(BlockMatrix::single(
                        q,
                        q,
                        factors[off..off + q * q].to_vec(),
                    ));
                    off += q * q;
                }
                blocklin::make_psd_blockdiag(&singles).expect("square factors")
            }
        }
    }

    pub fn theta_clamped(&self, k: usize) -> &[f64] {
        self.schedule.theta_clamped(k)
    }

    fn check_layer(&self, k: usize) -> Result<(), ControllerError> {
        if let Schedule::PerLayer(v) = &self.schedule {
            if k >= v.len() {
                return Err(ControllerError::LayerOutOfRange {
                    index: k,
                    layers: v.len(),
                });
            }
        }
        Ok(())
    }

    /// xi' = (J - R_c) dPhi/dxi + K y at layer k.
    pub fn dynamics(&self, xi: &[f64], y: &[f64], k: usize) -> Result<Vec<f64>, ControllerError> {
        self.check_layer(k)?;
        if y.len() != self.meas_dim_total() {
            return Err(ControllerError::DimensionMismatch(format!(
                "measurement length {} != {}",
                y.len(),
                self.meas_dim_total()
            )));
        }
        let grad = self.energy.gradient(xi, self.theta_clamped(k))?;
        let jr = self.j_matrix().sub(&self.rc_matrix());
        let mut out = jr.matvec(&grad);
        let ky = self.k_gain.matvec(y);
        for (a, b) in out.iter_mut().zip(&ky) {
            *a += b;
        }
        Ok(out)
    }

    /// u = -K^T dPhi/dxi at layer k.
    pub fn output(&self, xi: &[f64], k: usize) -> Result<Vec<f64>, ControllerError> {
        self.check_layer(k)?;
        let grad = self.energy.gradient(xi, self.theta_clamped(k))?;
        let mut u = self.k_gain.t_matvec(&grad);
        for v in &mut u {
            *v = -*v;
        }
        Ok(u)
    }

    /// Copy with the schedule collapsed to the parameters of layer k; the
    /// result is time-invariant, as required by the stability certificates.
    pub fn frozen_at(&self, k: usize) -> Controller {
        let mut out = self.clone();
        out.schedule = Schedule::Tied(self.schedule.theta_clamped(k).to_vec());
        out
    }

    pub fn time_invariant(&self) -> bool {
        self.schedule.is_tied()
    }

    pub fn layout(&self) -> ParamLayout {
        let a_len = self.a_free.data().len();
        let k_len = self.k_gain.data().len();
        let rc_len = match &self.rc {
            RcParam::Fixed { .. } => 0,
            RcParam::Trainable { factors } => factors.len(),
        };
        let theta_layer_len = self.energy.layer_param_len();
        let theta_layers = self.schedule.layer_count();
        ParamLayout {
            a_len,
            k_len,
            rc_len,
            theta_layer_len,
            theta_layers,
            total: a_len + k_len + rc_len + theta_layer_len * theta_layers,
        }
    }

    /// Dense parameter vector: [A | K | R_c factors | theta layers...].
    /// Structurally-zero entries of A and K are present but masked.
    pub fn params_flat(&self) -> Vec<f64> {
        let layout = self.layout();
        let mut out = Vec::with_capacity(layout.total);
        out.extend_from_slice(self.a_free.data());
        out.extend_from_slice(self.k_gain.data());
        if let RcParam::Trainable { factors } = &self.rc {
            out.extend_from_slice(factors);
        }
        match &self.schedule {
            Schedule::PerLayer(layers) => {
                for l in layers {
                    out.extend_from_slice(l);
                }
            }
            Schedule::Tied(v) => out.extend_from_slice(v),
        }
        out
    }

    /// Writes a dense parameter vector back, re-applying the sparsity masks.
    pub fn set_params_flat(&mut self, params: &[f64]) {
        let layout = self.layout();
        assert_eq!(params.len(), layout.total, "parameter vector length");
        self.a_free.data_mut().copy_from_slice(&params[layout.a_range()]);
        self.a_free = self
            .a_free
            .mask_apply(&self.pattern_a)
            .expect("pattern matches");
        self.k_gain.data_mut().copy_from_slice(&params[layout.k_range()]);
        self.k_gain = self
            .k_gain
            .mask_apply(&self.pattern_k)
            .expect("pattern matches");
        if let RcParam::Trainable { factors } = &mut self.rc {
            factors.copy_from_slice(&params[layout.rc_range()]);
        }
        match &mut self.schedule {
            Schedule::PerLayer(layers) => {
                for (l, layer) in layers.iter_mut().enumerate() {
                    layer.copy_from_slice(&params[layout.theta_range(l)]);
                }
            }
            Schedule::Tied(v) => v.copy_from_slice(&params[layout.theta_range(0)]),
        }
    }

    /// True where a parameter is free; false at structurally-zero slots.
    pub fn structural_mask(&self) -> Vec<bool> {
        let layout = self.layout();
        let mut out = Vec::with_capacity(layout.total);
        out.extend(self.pattern_a.scalar_mask());
        out.extend(self.pattern_k.scalar_mask());
        out.extend(std::iter::repeat(true).take(layout.rc_len));
        out.extend(std::iter::repeat(true).take(layout.theta_layer_len * layout.theta_layers));
        out
    }

    /// Number of free scalar parameters.
    pub fn trainable_count(&self) -> usize {
        self.structural_mask().iter().filter(|&&b| b).count()
    }
}

fn sample_masked(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    pattern: &BlockPattern,
) -> Result<BlockMatrix, ControllerError> {
    let fan_in = cols.max(1) as f64;
    let normal = Normal::new(0.0, 1.0 / fan_in.sqrt()).expect("positive sd");
    let data: Vec<f64> = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    let dense = BlockMatrix::from_data(
        pattern.row_blocks().to_vec(),
        pattern.col_blocks().to_vec(),
        data,
    );
    dense
        .mask_apply(pattern)
        .map_err(|e| ControllerError::DimensionMismatch(e.to_string()))
}

// -------------------------------------------------------------------------
// serialization

#[derive(Serialize, Deserialize)]
struct ControllerDoc {
    schema_version: u32,
    adjacency: Vec<Vec<u8>>,
    xi_dims: Vec<usize>,
    meas_dims: Vec<usize>,
    l_y: usize,
    l_xi: usize,
    energy: EnergyVariant,
    a_mask: Vec<Vec<u8>>,
    k_mask: Vec<Vec<u8>>,
    a_free: Vec<f64>,
    k_gain: Vec<f64>,
    rc: RcParam,
    schedule: Schedule,
}

pub const CONTROLLER_SCHEMA_VERSION: u32 = 1;

impl Controller {
    pub fn to_json(&self) -> String {
        let doc = ControllerDoc {
            schema_version: CONTROLLER_SCHEMA_VERSION,
            adjacency: self.graph.adjacency_rows(),
            xi_dims: self.xi_dims.clone(),
            meas_dims: self.meas_dims.clone(),
            l_y: self.l_y,
            l_xi: self.l_xi,
            energy: self.energy.variant.clone(),
            a_mask: self.pattern_a.mask_rows(),
            k_mask: self.pattern_k.mask_rows(),
            a_free: self.a_free.data().to_vec(),
            k_gain: self.k_gain.data().to_vec(),
            rc: self.rc.clone(),
            schedule: self.schedule.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self, ControllerError> {
        let doc: ControllerDoc =
            serde_json::from_str(text).map_err(|e| ControllerError::Serialization(e.to_string()))?;
        if doc.schema_version != CONTROLLER_SCHEMA_VERSION {
            return Err(ControllerError::Serialization(format!(
                "unsupported schema version {}",
                doc.schema_version
            )));
        }
        let graph = Graph::new(doc.adjacency)?;
        let pattern_sq =
            BlockPattern::from_power(&graph, doc.l_y, doc.xi_dims.clone(), doc.xi_dims.clone())?;
        let pattern_a = pattern_sq.strictly_lower();
        let pattern_k =
            BlockPattern::from_power(&graph, doc.l_y, doc.xi_dims.clone(), doc.meas_dims.clone())?;
        if pattern_a.mask_rows() != doc.a_mask || pattern_k.mask_rows() != doc.k_mask {
            return Err(ControllerError::Serialization(
                "stored masks do not match the graph and radius".into(),
            ));
        }
        let q_total: usize = doc.xi_dims.iter().sum();
        let p_total: usize = doc.meas_dims.iter().sum();
        if doc.a_free.len() != q_total * q_total || doc.k_gain.len() != q_total * p_total {
            return Err(ControllerError::Serialization(
                "parameter array length mismatch".into(),
            ));
        }
        let a_free =
            BlockMatrix::from_data(doc.xi_dims.clone(), doc.xi_dims.clone(), doc.a_free);
        let k_gain =
            BlockMatrix::from_data(doc.xi_dims.clone(), doc.meas_dims.clone(), doc.k_gain);
        if !graph::conforms(&a_free, &pattern_a)? || !graph::conforms(&k_gain, &pattern_k)? {
            return Err(ControllerError::SparsityViolation(
                "stored parameters violate their masks".into(),
            ));
        }
        let energy = EnergySpec {
            xi_dims: doc.xi_dims.clone(),
            variant: doc.energy,
        };
        let expect = energy.layer_param_len();
        let ok = match &doc.schedule {
            Schedule::PerLayer(layers) => layers.iter().all(|l| l.len() == expect),
            Schedule::Tied(v) => v.len() == expect,
        };
        if !ok {
            return Err(ControllerError::Serialization(
                "schedule entries do not match the energy layout".into(),
            ));
        }
        Ok(Controller {
            graph,
            xi_dims: doc.xi_dims,
            meas_dims: doc.meas_dims,
            l_y: doc.l_y,
            l_xi: doc.l_xi,
            pattern_sq,
            pattern_a,
            pattern_k,
            a_free,
            k_gain,
            rc: doc.rc,
            energy,
            schedule: doc.schedule,
        })
    }
}

// -------------------------------------------------------------------------
// distributed MLP baseline

/// Static, memoryless policy u = W2 tanh(W1 tanh(W0 y + b0) + b1) + b2 with
/// the first layer (weights and per-edge biases) sparse on the
/// communication graph and the rest block-diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpPolicy {
    graph: Graph,
    in_dims: Vec<usize>,
    out_dims: Vec<usize>,
    hidden: usize,
    w0: BlockMatrix,
    b0: BlockMatrix,
    w1: BlockMatrix,
    b1: Vec<f64>,
    w2: BlockMatrix,
    b2: Vec<f64>,
    p0: BlockPattern,
    p0b: BlockPattern,
    p1: BlockPattern,
    p2: BlockPattern,
}

pub struct MlpCache {
    y: Vec<f64>,
    h0: Vec<f64>,
    s0: Vec<f64>,
    h1: Vec<f64>,
    s1: Vec<f64>,
}

impl MlpPolicy {
    pub fn init(
        graph: Graph,
        in_dims: Vec<usize>,
        out_dims: Vec<usize>,
        hidden: usize,
        seed: u64,
    ) -> Result<Self, ControllerError> {
        let m = graph.node_count();
        if in_dims.len() != m || out_dims.len() != m {
            return Err(ControllerError::DimensionMismatch(format!(
                "expected {m} per-node dimension entries"
            )));
        }
        let hid_blocks = vec![hidden; m];
        let p0 = BlockPattern::from_power(&graph, 1, hid_blocks.clone(), in_dims.clone())?;
        let p0b = BlockPattern::from_power(&graph, 1, hid_blocks.clone(), vec![1; m])?;
        let p1 = BlockPattern::identity(hid_blocks.clone(), hid_blocks.clone());
        let p2 = BlockPattern::identity(out_dims.clone(), hid_blocks.clone());

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sample = |rows: usize, cols: usize, fan_in: usize| -> Vec<f64> {
            let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive sd");
            (0..rows * cols).map(|_| normal.sample(&mut rng)).collect()
        };
        let p_total: usize = in_dims.iter().sum();
        let u_total: usize = out_dims.iter().sum();
        let h_total = hidden * m;
        let avg_in = (p_total as f64 / m as f64).round() as usize;

        let w0 = BlockMatrix::from_data(
            hid_blocks.clone(),
            in_dims.clone(),
            sample(h_total, p_total, avg_in.max(1)),
        )
        .mask_apply(&p0)
        .expect("pattern matches");
        let b0 = BlockMatrix::from_data(
            hid_blocks.clone(),
            vec![1; m],
            sample(h_total, m, avg_in.max(1)),
        )
        .mask_apply(&p0b)
        .expect("pattern matches");
        let w1 = BlockMatrix::from_data(
            hid_blocks.clone(),
            hid_blocks.clone(),
            sample(h_total, h_total, hidden),
        )
        .mask_apply(&p1)
        .expect("pattern matches");
        let b1 = sample(h_total, 1, hidden);
        let w2 = BlockMatrix::from_data(
            out_dims.clone(),
            hid_blocks.clone(),
            sample(u_total, h_total, hidden),
        )
        .mask_apply(&p2)
        .expect("pattern matches");
        let b2 = sample(u_total, 1, hidden);

        Ok(MlpPolicy {
            graph,
            in_dims,
            out_dims,
            hidden,
            w0,
            b0,
            w1,
            b1,
            w2,
            b2,
            p0,
            p0b,
            p1,
            p2,
        })
    }

    /// Builds from explicit weights, rejecting any sparsity violation.
    #[allow(clippy::too_many_arguments)]
    pub fn from_weights(
        graph: Graph,
        in_dims: Vec<usize>,
        out_dims: Vec<usize>,
        hidden: usize,
        w0: BlockMatrix,
        b0: BlockMatrix,
        w1: BlockMatrix,
        b1: Vec<f64>,
        w2: BlockMatrix,
        b2: Vec<f64>,
    ) -> Result<Self, ControllerError> {
        let mut base = Self::init(graph, in_dims, out_dims, hidden, 0)?;
        if !graph::conforms(&w0, &base.p0)?
            || !graph::conforms(&b0, &base.p0b)?
            || !graph::conforms(&w1, &base.p1)?
            || !graph::conforms(&w2, &base.p2)?
        {
            return Err(ControllerError::SparsityViolation(
                "MLP weights must be sparse on the communication pattern".into(),
            ));
        }
        base.w0 = w0;
        base.b0 = b0;
        base.w1 = w1;
        base.b1 = b1;
        base.w2 = w2;
        base.b2 = b2;
        Ok(base)
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn in_dim_total(&self) -> usize {
        self.in_dims.iter().sum()
    }

    pub fn out_dim_total(&self) -> usize {
        self.out_dims.iter().sum()
    }

    pub fn forward(&self, y: &[f64]) -> Vec<f64> {
        self.forward_cached(y).0
    }

    pub fn forward_cached(&self, y: &[f64]) -> (Vec<f64>, MlpCache) {
        assert_eq!(y.len(), self.in_dim_total(), "measurement length");
        let m = self.graph.node_count();
        // z0 = W0 y + (sum of per-edge biases) = W0 y + b0 * ones
        let mut z0 = self.w0.matvec(y);
        let ones = vec![1.0; m];
        for (a, b) in z0.iter_mut().zip(self.b0.matvec(&ones)) {
            *a += b;
        }
        let h0: Vec<f64> = z0.iter().map(|&z| z.tanh()).collect();
        let s0: Vec<f64> = z0.iter().map(|&z| sech2(z)).collect();
        let mut z1 = self.w1.matvec(&h0);
        for (a, b) in z1.iter_mut().zip(&self.b1) {
            *a += b;
        }
        let h1: Vec<f64> = z1.iter().map(|&z| z.tanh()).collect();
        let s1: Vec<f64> = z1.iter().map(|&z| sech2(z)).collect();
        let mut u = self.w2.matvec(&h1);
        for (a, b) in u.iter_mut().zip(&self.b2) {
            *a += b;
        }
        (
            u,
            MlpCache {
                y: y.to_vec(),
                h0,
                s0,
                h1,
                s1,
            },
        )
    }

    /// Parameter order: [w0 | b0 | w1 | b1 | w2 | b2].
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.w0.data());
        out.extend_from_slice(self.b0.data());
        out.extend_from_slice(self.w1.data());
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(self.w2.data());
        out.extend_from_slice(&self.b2);
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) {
        let mut off = 0;
        let mut take = |len: usize| {
            let s = &params[off..off + len];
            off += len;
            s.to_vec()
        };
        let w0 = take(self.w0.data().len());
        self.w0.data_mut().copy_from_slice(&w0);
        let b0 = take(self.b0.data().len());
        self.b0.data_mut().copy_from_slice(&b0);
        let w1 = take(self.w1.data().len());
        self.w1.data_mut().copy_from_slice(&w1);
        self.b1 = take(self.b1.len());
        let w2 = take(self.w2.data().len());
        self.w2.data_mut().copy_from_slice(&w2);
        self.b2 = take(self.b2.len());
        assert_eq!(off, params.len());
        self.w0 = self.w0.mask_apply(&self.p0).expect("pattern matches");
        self.b0 = self.b0.mask_apply(&self.p0b).expect("pattern matches");
        self.w1 = self.w1.mask_apply(&self.p1).expect("pattern matches");
        self.w2 = self.w2.mask_apply(&self.p2).expect("pattern matches");
    }

    pub fn structural_mask(&self) -> Vec<bool> {
        let mut out = Vec::new();
        out.extend(self.p0.scalar_mask());
        out.extend(self.p0b.scalar_mask());
        out.extend(self.p1.scalar_mask());
        out.extend(std::iter::repeat(true).take(self.b1.len()));
        out.extend(self.p2.scalar_mask());
        out.extend(std::iter::repeat(true).take(self.b2.len()));
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.structural_mask().iter().filter(|&&b| b).count()
    }

    /// Reverse pass: given d(loss)/du, accumulates parameter gradients into
    /// `grads` (same layout as `params_flat`) and returns d(loss)/dy.
    pub fn reverse(&self, cache: &MlpCache, du: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let m = self.graph.node_count();
        let w0_len = self.w0.data().len();
        let b0_len = self.b0.data().len();
        let w1_len = self.w1.data().len();
        let b1_len = self.b1.len();
        let w2_len = self.w2.data().len();

        // u = W2 h1 + b2
        let (gw2, gb2) = {
            let base = w0_len + b0_len + w1_len + b1_len;
            (base, base + w2_len)
        };
        let h_total = cache.h1.len();
        for r in 0..du.len() {
            if du[r] != 0.0 {
                for c in 0..h_total {
                    grads[gw2 + r * h_total + c] += du[r] * cache.h1[c];
                }
                grads[gb2 + r] += du[r];
            }
        }
        let dh1 = self.w2.t_matvec(du);
        // h1 = tanh(z1), z1 = W1 h0 + b1
        let dz1: Vec<f64> = dh1.iter().zip(&cache.s1).map(|(d, s)| d * s).collect();
        let gw1 = w0_len + b0_len;
        let gb1 = gw1 + w1_len;
        for r in 0..h_total {
            if dz1[r] != 0.0 {
                for c in 0..h_total {
                    grads[gw1 + r * h_total + c] += dz1[r] * cache.h0[c];
                }
                grads[gb1 + r] += dz1[r];
            }
        }
        let dh0 = self.w1.t_matvec(&dz1);
        // h0 = tanh(z0), z0 = W0 y + b0 * ones
        let dz0: Vec<f64> = dh0.iter().zip(&cache.s0).map(|(d, s)| d * s).collect();
        let p_total = cache.y.len();
        for r in 0..h_total {
            if dz0[r] != 0.0 {
                for c in 0..p_total {
                    grads[r * p_total + c] += dz0[r] * cache.y[c];
                }
                for j in 0..m {
                    grads[w0_len + r * m + j] += dz0[r];
                }
            }
        }
        // project structural zeros
        let mask = self.structural_mask();
        for (g, keep) in grads.iter_mut().zip(mask) {
            if !keep {
                *g = 0.0;
            }
        }
        self.w0.t_matvec(&dz0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_single(q: usize, hidden: usize) -> EnergySpec {
        EnergySpec {
            xi_dims: vec![q],
            variant: EnergyVariant::LogcoshSingle {
                hidden: vec![hidden],
            },
        }
    }

    #[test]
    fn logcosh_zero_and_asymptote() {
        assert_eq!(log_cosh(0.0), 0.0);
        let z = 50.0;
        assert!((log_cosh(z) - (z - LN_2)).abs() < 1e-12);
        assert!((log_cosh(-z) - (z - LN_2)).abs() < 1e-12);
        assert!((log_cosh(1.0) - 0.4337808304830271).abs() < 1e-15);
    }

    #[test]
    fn energy_value_scalar_cases() {
        let spec = spec_single(1, 1);
        // W = [1], b = [0], xi = 1 -> log cosh 1
        let theta = vec![1.0, 0.0];
        let v = spec.value(&[1.0], &theta).unwrap();
        assert!((v - 0.4337808304830271).abs() < 1e-15);
        // xi = 0, b = 0 -> 0
        assert_eq!(spec.value(&[0.0], &theta).unwrap(), 0.0);
    }

    #[test]
    fn energy_gradient_scalar_case() {
        let spec = spec_single(1, 1);
        let theta = vec![2.0, 0.0];
        let g = spec.gradient(&[1.0], &theta).unwrap();
        assert!((g[0] - 2.0 * (2.0f64).tanh()).abs() < 1e-15);
        assert!((g[0] - 1.9280551601516338).abs() < 1e-12);
        let g0 = spec.gradient(&[0.0], &theta).unwrap();
        assert_eq!(g0[0], 0.0);
    }

    fn fd_gradient(spec: &EnergySpec, xi: &[f64], theta: &[f64]) -> Vec<f64> {
        let step = 1e-6;
        let mut out = vec![0.0; xi.len()];
        let mut x = xi.to_vec();
        for i in 0..xi.len() {
            x[i] = xi[i] + step;
            let vp = spec.value(&x, theta).unwrap();
            x[i] = xi[i] - step;
            let vm = spec.value(&x, theta).unwrap();
            x[i] = xi[i];
            out[i] = (vp - vm) / (2.0 * step);
        }
        out
    }

    #[test]
    fn gradient_matches_fd_all_variants() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let variants: Vec<EnergySpec> = vec![
            EnergySpec {
                xi_dims: vec![4, 3],
                variant: EnergyVariant::LogcoshSingle { hidden: vec![5, 4] },
            },
            EnergySpec {
                xi_dims: vec![4, 3],
                variant: EnergyVariant::TwoLayer {
                    h1: vec![5, 4],
                    h2: vec![3, 2],
                    activation: Activation::Tanh,
                },
            },
            EnergySpec {
                xi_dims: vec![4, 3],
                variant: EnergyVariant::DeepStack { depth: 5 },
            },
        ];
        for spec in variants {
            for _ in 0..20 {
                let xi: Vec<f64> = (0..spec.xi_dim_total())
                    .map(|_| rng.random_range(-1.5..1.5))
                    .collect();
                let theta: Vec<f64> = (0..spec.layer_param_len())
                    .map(|_| rng.random_range(-0.8..0.8))
                    .collect();
                let g = spec.gradient(&xi, &theta).unwrap();
                let fd = fd_gradient(&spec, &xi, &theta);
                for (a, b) in g.iter().zip(&fd) {
                    let denom = a.abs().max(1.0);
                    assert!(
                        (a - b).abs() / denom < 1e-6,
                        "variant {:?}: {a} vs {b}",
                        spec.variant
                    );
                }
            }
        }
    }

    #[test]
    fn hessian_scalar_case_and_symmetry() {
        use rand::Rng;
        let spec = spec_single(1, 1);
        let h = spec.hessian_blockdiag(&[0.0], &[1.0, 0.0]).unwrap();
        assert!((h.get(0, 0) - 1.0).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = EnergySpec {
            xi_dims: vec![4],
            variant: EnergyVariant::LogcoshSingle { hidden: vec![6] },
        };
        for _ in 0..20 {
            let xi: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let theta: Vec<f64> = (0..spec.layer_param_len())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let h = spec.hessian_blockdiag(&xi, &theta).unwrap();
            assert!(h.symmetry_error() < 1e-10);
        }
    }

    #[test]
    fn hessian_matches_fd_of_gradient() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let spec = EnergySpec {
            xi_dims: vec![3],
            variant: EnergyVariant::LogcoshSingle { hidden: vec![3] },
        };
        let xi: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let theta: Vec<f64> = (0..spec.layer_param_len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let h = spec.hessian_blockdiag(&xi, &theta).unwrap();
        let step = 1e-5;
        for c in 0..3 {
            let mut xp = xi.clone();
            let mut xm = xi.clone();
            xp[c] += step;
            xm[c] -= step;
            let gp = spec.gradient(&xp, &theta).unwrap();
            let gm = spec.gradient(&xm, &theta).unwrap();
            for r in 0..3 {
                let fd = (gp[r] - gm[r]) / (2.0 * step);
                let denom = h.get(r, c).abs().max(1.0);
                assert!((h.get(r, c) - fd).abs() / denom < 1e-5);
            }
        }
    }

    #[test]
    fn separable_energy_has_zero_cross_blocks() {
        let spec = EnergySpec {
            xi_dims: vec![3, 2],
            variant: EnergyVariant::LogcoshSingle { hidden: vec![3, 2] },
        };
        let theta: Vec<f64> = (0..spec.layer_param_len()).map(|i| 0.1 * i as f64).collect();
        let h = spec
            .hessian_blockdiag(&[0.3, -0.2, 0.5, 0.1, -0.4], &theta)
            .unwrap();
        assert_eq!(h.block(0, 1), vec![0.0; 6]);
        assert_eq!(h.block(1, 0), vec![0.0; 6]);
    }

    #[test]
    fn param_grad_matches_fd_logcosh() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let spec = EnergySpec {
            xi_dims: vec![4],
            variant: EnergyVariant::LogcoshSingle { hidden: vec![5] },
        };
        let xi: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let theta: Vec<f64> = (0..spec.layer_param_len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let demand: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut got = vec![0.0; theta.len()];
        spec.accumulate_param_grad(&xi, &theta, &demand, &mut got);
        let step = 1e-6;
        let mut th = theta.clone();
        for p in 0..theta.len() {
            th[p] = theta[p] + step;
            let gp = spec.gradient(&xi, &th).unwrap();
            th[p] = theta[p] - step;
            let gm = spec.gradient(&xi, &th).unwrap();
            th[p] = theta[p];
            let fd: f64 = demand
                .iter()
                .enumerate()
                .map(|(c, d)| d * (gp[c] - gm[c]) / (2.0 * step))
                .sum();
            assert!(
                (got[p] - fd).abs() / fd.abs().max(1.0) < 1e-6,
                "p={p}: {} vs {fd}",
                got[p]
            );
        }
    }

    fn bench_controller(seed: u64) -> Controller {
        let graph = Graph::ring(12);
        Controller::init(&ControllerInit::benchmark(graph, vec![2; 12], 100, seed)).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = bench_controller(17);
        let b = bench_controller(17);
        assert_eq!(a.params_flat(), b.params_flat());
        let c = bench_controller(18);
        assert_ne!(a.params_flat(), c.params_flat());
    }

    #[test]
    fn init_validates_radius_condition() {
        let graph = Graph::ring(12);
        let mut cfg = ControllerInit::benchmark(graph, vec![2; 12], 10, 0);
        cfg.l_y = 1;
        cfg.l_xi = 0;
        cfg.target_radii = Some((1, 1));
        assert!(Controller::init(&cfg).is_ok());
        cfg.l_xi = 1;
        // l_y + 2*l_xi = 3 > R_xi = 1
        assert!(matches!(
            Controller::init(&cfg),
            Err(ControllerError::RadiusCondition { .. })
        ));
    }

    #[test]
    fn j_is_skew_and_masked() {
        let c = bench_controller(3);
        let j = c.j_matrix();
        assert_eq!(j.skewness_error(), 0.0);
        assert!(graph::conforms(&j, c.pattern_sq()).unwrap());
        let rc = c.rc_matrix();
        assert!(graph::conforms(&rc, c.pattern_sq()).unwrap());
        assert!(graph::conforms(c.k_gain(), c.pattern_k()).unwrap());
    }

    #[test]
    fn benchmark_trainable_count_matches_reference() {
        // ring of 12, xi = 4 per node, y = 2 per node, 100 layers:
        // A strictly-lower ring blocks 12*16 = 192, K 36 blocks of 4x2 = 288,
        // theta 100 * 12 * (16+4) = 24000
        let c = bench_controller(0);
        assert_eq!(c.trainable_count(), 24480);
        // time-invariant 5-layer stack: 12 * 5 * 20 + 480 = 1680
        let graph = Graph::ring(12);
        let cfg = ControllerInit {
            graph,
            xi_dims: vec![4; 12],
            meas_dims: vec![2; 12],
            l_y: 1,
            l_xi: 0,
            target_radii: Some((1, 1)),
            variant: EnergyVariant::DeepStack { depth: 5 },
            time_invariant: true,
            n_layers: 100,
            rc: RcInit::BenchmarkFixed,
            seed: 0,
        };
        let ti = Controller::init(&cfg).unwrap();
        assert_eq!(ti.trainable_count(), 1680);
    }

    #[test]
    fn controller_dynamics_special_cases() {
        let mut c = bench_controller(5);
        // zero K: pure energy flow; at xi = 0 with b = 0 the gradient is 0
        let layout = c.layout();
        let mut params = c.params_flat();
        for v in &mut params[layout.k_range()] {
            *v = 0.0;
        }
        // zero the biases so dPhi/dxi(0) = 0
        for l in 0..layout.theta_layers {
            let r = layout.theta_range(l);
            let biases = c.energy().bias_ranges();
            for br in biases {
                for p in br {
                    params[r.start + p] = 0.0;
                }
            }
        }
        c.set_params_flat(&params);
        let xi = vec![0.0; c.xi_dim_total()];
        let y = vec![0.3; c.meas_dim_total()];
        let u = c.output(&xi, 0).unwrap();
        assert!(u.iter().all(|&v| v == 0.0));
        let dxi = c.dynamics(&xi, &y, 0).unwrap();
        assert!(dxi.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pure_integrator_when_only_k_identity() {
        // J = 0, R_c = 0, K = I -> xi' = y (needs square K, so 4-dim y)
        let graph = Graph::ring(3);
        let cfg = ControllerInit {
            graph,
            xi_dims: vec![2; 3],
            meas_dims: vec![2; 3],
            l_y: 1,
            l_xi: 0,
            target_radii: None,
            variant: EnergyVariant::LogcoshSingle { hidden: vec![2; 3] },
            time_invariant: false,
            n_layers: 4,
            rc: RcInit::Zero,
            seed: 2,
        };
        let mut c = Controller::init(&cfg).unwrap();
        let layout = c.layout();
        let mut params = c.params_flat();
        for v in &mut params[layout.a_range()] {
            *v = 0.0;
        }
        let k_off = layout.k_range().start;
        let p_total = c.meas_dim_total();
        for (i, v) in params[layout.k_range()].iter_mut().enumerate() {
            let (r, cc) = (i / p_total, i % p_total);
            *v = if r == cc { 1.0 } else { 0.0 };
        }
        c.set_params_flat(&params);
        let _ = k_off;
        let xi = vec![0.0; c.xi_dim_total()];
        let mut theta_zero_grad = true;
        let g = c
            .energy()
            .gradient(&xi, c.theta_clamped(0))
            .unwrap();
        for v in &g {
            if *v != 0.0 {
                theta_zero_grad = false;
            }
        }
        let y: Vec<f64> = (0..6).map(|i| i as f64 * 0.1).collect();
        let dxi = c.dynamics(&xi, &y, 0).unwrap();
        if theta_zero_grad {
            assert_eq!(dxi, y);
        } else {
            // gradient contribution is (J - Rc) dPhi = 0 since both are zero
            assert_eq!(dxi, y);
        }
    }

    #[test]
    fn layer_index_out_of_range_rejected() {
        let c = bench_controller(1);
        let xi = vec![0.0; c.xi_dim_total()];
        let y = vec![0.0; c.meas_dim_total()];
        assert!(c.dynamics(&xi, &y, 100).is_err());
        assert!(c.dynamics(&xi, &y, 99).is_ok());
        let f = c.frozen_at(99);
        assert!(f.dynamics(&xi, &y, 100_000).is_ok());
    }

    #[test]
    fn json_roundtrip_is_bit_exact() {
        let c = bench_controller(23);
        let text = c.to_json();
        let back = Controller::from_json(&text).unwrap();
        assert_eq!(c.params_flat(), back.params_flat());
        assert_eq!(c, back);
        // and the re-serialization is byte-identical
        assert_eq!(text, back.to_json());
    }

    #[test]
    fn json_rejects_mask_violation() {
        let c = bench_controller(2);
        let mut text = c.to_json();
        // corrupt one structurally-zero entry of a_free: entry (0, q_total-1)
        // is outside the strictly-lower ring pattern
        let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
        let mut doc = doc;
        let q_total = 48;
        doc["a_free"][q_total - 1] = serde_json::json!(1.5);
        text = serde_json::to_string(&doc).unwrap();
        assert!(Controller::from_json(&text).is_err());
    }

    #[test]
    fn mlp_parameter_count_matches_reference() {
        let g = Graph::ring(12);
        let mlp = MlpPolicy::init(g, vec![2; 12], vec![2; 12], 8, 0).unwrap();
        assert_eq!(mlp.trainable_count(), 1944);
    }

    #[test]
    fn mlp_zero_weights_zero_output() {
        let g = Graph::ring(4);
        let mut mlp = MlpPolicy::init(g, vec![2; 4], vec![2; 4], 8, 0).unwrap();
        let zeros = vec![0.0; mlp.params_flat().len()];
        mlp.set_params_flat(&zeros);
        let u = mlp.forward(&vec![0.7; 8]);
        assert!(u.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mlp_output_bounded_by_saturation() {
        let g = Graph::ring(4);
        let mlp = MlpPolicy::init(g, vec![2; 4], vec![2; 4], 8, 9).unwrap();
        // |u_r| <= sum_c |W2(r,c)| + |b2_r| since |tanh| < 1
        let u = mlp.forward(&vec![1e6; 8]);
        for r in 0..u.len() {
            let mut bound = mlp.b2[r].abs();
            for c in 0..mlp.w2.cols() {
                bound += mlp.w2.get(r, c).abs();
            }
            assert!(u[r].abs() <= bound + 1e-12);
        }
    }

    #[test]
    fn mlp_locality_by_perturbation() {
        let g = Graph::ring(6);
        let mlp = MlpPolicy::init(g.clone(), vec![2; 6], vec![2; 6], 8, 3).unwrap();
        let y: Vec<f64> = (0..12).map(|i| 0.1 * i as f64).collect();
        let u = mlp.forward(&y);
        // node 3 is outside the 1-hop neighborhood of node 0
        let mut y2 = y.clone();
        y2[6] += 10.0;
        y2[7] -= 3.0;
        let u2 = mlp.forward(&y2);
        assert_eq!(&u[0..2], &u2[0..2]);
        // but inside its own neighborhood the output moves
        let mut y3 = y.clone();
        y3[0] += 1.0;
        let u3 = mlp.forward(&y3);
        assert_ne!(&u[0..2], &u3[0..2]);
    }

    #[test]
    fn mlp_from_weights_rejects_dense() {
        let g = Graph::ring(4);
        let base = MlpPolicy::init(g.clone(), vec![2; 4], vec![2; 4], 8, 0).unwrap();
        let dense_w0 = BlockMatrix::from_data(
            vec![8; 4],
            vec![2; 4],
            (0..8 * 4 * 2 * 4).map(|i| i as f64).collect(),
        );
        let r = MlpPolicy::from_weights(
            g,
            vec![2; 4],
            vec![2; 4],
            8,
            dense_w0,
            base.b0.clone(),
            base.w1.clone(),
            base.b1.clone(),
            base.w2.clone(),
            base.b2.clone(),
        );
        assert!(matches!(r, Err(ControllerError::SparsityViolation(_))));
    }

    #[test]
    fn mlp_reverse_matches_fd() {
        use rand::Rng;
        let g = Graph::ring(3);
        let mlp = MlpPolicy::init(g, vec![2; 3], vec![2; 3], 4, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let du: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, cache) = mlp.forward_cached(&y);
        let mut grads = vec![0.0; mlp.params_flat().len()];
        let dy = mlp.reverse(&cache, &du, &mut grads);

        // oracle: scalar objective du . u
        let obj = |m: &MlpPolicy, yv: &[f64]| -> f64 {
            m.forward(yv).iter().zip(&du).map(|(a, b)| a * b).sum()
        };
        let step = 1e-6;
        let params = mlp.params_flat();
        let mask = mlp.structural_mask();
        let mut m2 = mlp.clone();
        for p in 0..params.len() {
            if !mask[p] {
                assert_eq!(grads[p], 0.0);
                continue;
            }
            let mut pv = params.clone();
            pv[p] = params[p] + step;
            m2.set_params_flat(&pv);
            let op = obj(&m2, &y);
            pv[p] = params[p] - step;
            m2.set_params_flat(&pv);
            let om = obj(&m2, &y);
            let fd = (op - om) / (2.0 * step);
            assert!(
                (grads[p] - fd).abs() / fd.abs().max(1.0) < 1e-5,
                "p={p}: {} vs {fd}",
                grads[p]
            );
        }
        for c in 0..y.len() {
            let mut yp = y.clone();
            let mut ym = y.clone();
            yp[c] += step;
            ym[c] -= step;
            let fd = (obj(&mlp, &yp) - obj(&mlp, &ym)) / (2.0 * step);
            assert!((dy[c] - fd).abs() / fd.abs().max(1.0) < 1e-5);
        }
    }
}
