//! Losses, reverse-mode gradients through the unrolled forward-Euler
//! closed loop, and Adam.
//!
//! Training treats the N-step rollout as an N-layer network. The backward
//! pass runs the adjoint recursion
//!
//! ```text
//!   a_N = 0,
//!   a_k = (I + h (Psi - S) HessP_k)^T a_{k+1} + d l_k / d zeta_k,
//! ```
//!
//! contracting each step's adjoint against the parameter Jacobians of the
//! layer map; gradients of structurally-zero blocks are projected out, so
//! sparsity survives every update.

use crate::blocklin::BlockMatrix;
use crate::controller::{Controller, MlpPolicy, RcParam, Schedule};
use crate::plant::PHNetwork;
use crate::simulate::{ClosedLoop, Method, MlpLoop, SimError, Trajectory};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("rollout diverged at step {step}")]
    Diverged { step: usize },
    #[error("rollout diverged during epoch {epoch}")]
    DivergedAtEpoch { epoch: usize },
    #[error("collision loss needs a plant that exposes node positions")]
    NoPositions,
    #[error("state cost needs a plant with quadratic energies (a target state)")]
    NoTarget,
    #[error("finite-difference oracle limited to small instances, got {0} parameters")]
    TooManyParameters(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Weights of the training objective. The state cost is
/// `q_scale * gamma^(T - t) * I`, the input cost `r_scale * I`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub gamma: f64,
    pub q_scale: f64,
    pub r_scale: f64,
    /// Safety distance D below which the collision penalty activates.
    pub safety_distance: f64,
    /// Offset keeping the collision penalty finite at zero distance.
    pub collision_eps: f64,
    pub alpha_ca: f64,
    pub alpha_w: f64,
    /// Whether the smoothness regularizer also covers bias schedules.
    pub rw_include_bias: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 0.95,
            q_scale: 1.0,
            r_scale: 0.5,
            safety_distance: 0.5,
            collision_eps: 1e-3,
            alpha_ca: 100.0,
            alpha_w: 25.0,
            rw_include_bias: false,
        }
    }
}

impl LossConfig {
    /// Evaluation variant: undiscounted state cost.
    pub fn testing(mut self) -> Self {
        self.gamma = 1.0;
        self
    }

    fn q_at(&self, t: f64, horizon: f64) -> f64 {
        self.q_scale * self.gamma.powf(horizon - t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub lx: f64,
    pub lca: f64,
    pub rw: f64,
}

/// State-and-input quadrature over the first `steps` intervals
/// (left endpoints, matching the forward-Euler layers).
pub fn loss_control_upto(
    traj: &Trajectory,
    targets: &[f64],
    cfg: &LossConfig,
    steps: usize,
) -> f64 {
    let n_x = targets.len();
    let horizon = traj.horizon();
    let mut acc = 0.0;
    for k in 0..steps {
        let q = cfg.q_at(traj.time(k), horizon);
        let x = &traj.states[k][..n_x];
        let mut state_term = 0.0;
        for (a, b) in x.iter().zip(targets) {
            state_term += (a - b) * (a - b);
        }
        let mut input_term = 0.0;
        for v in &traj.inputs[k] {
            input_term += v * v;
        }
        acc += traj.h * (q * state_term + cfg.r_scale * input_term);
    }
    acc
}

pub fn loss_control(traj: &Trajectory, targets: &[f64], cfg: &LossConfig) -> f64 {
    loss_control_upto(traj, targets, cfg, traj.step_count())
}

fn pair_distance(z: &[f64], pi: (usize, usize), pj: (usize, usize)) -> f64 {
    debug_assert_eq!(pi.1, 2, "planar positions expected");
    let dx = z[pi.0] - z[pj.0];
    let dy = z[pi.0 + 1] - z[pj.0 + 1];
    (dx * dx + dy * dy).sqrt()
}

/// Collision penalty: (d + eps)^-2 while two nodes sit within the safety
/// distance, integrated with the same left-endpoint rule.
pub fn loss_collision_upto(
    traj: &Trajectory,
    positions: &[(usize, usize)],
    cfg: &LossConfig,
    steps: usize,
) -> f64 {
    let m = positions.len();
    let mut acc = 0.0;
    for k in 0..steps {
        let z = &traj.states[k];
        for i in 0..m {
            for j in i + 1..m {
                let d = pair_distance(z, positions[i], positions[j]);
                if d <= cfg.safety_distance {
                    let s = d + cfg.collision_eps;
                    acc += traj.h / (s * s);
                }
            }
        }
    }
    acc
}

pub fn loss_collision(traj: &Trajectory, positions: &[(usize, usize)], cfg: &LossConfig) -> f64 {
    loss_collision_upto(traj, positions, cfg, traj.step_count())
}

/// h * sum_k ||W(t_{k+1}) - W(t_k)||_F^2 over the scheduled weight arrays;
/// zero for a tied schedule.
pub fn loss_weight_smoothness(controller: &Controller, h: f64, cfg: &LossConfig) -> f64 {
    let layers = match controller.schedule() {
        Schedule::Tied(_) => return 0.0,
        Schedule::PerLayer(layers) => layers,
    };
    if layers.len() < 2 {
        return 0.0;
    }
    let mut ranges = controller.energy().weight_ranges();
    if cfg.rw_include_bias {
        ranges.extend(controller.energy().bias_ranges());
    }
    let mut acc = 0.0;
    for w in layers.windows(2) {
        for r in &ranges {
            for p in r.clone() {
                let d = w[1][p] - w[0][p];
                acc += d * d;
            }
        }
    }
    h * acc
}

/// Full objective over a rollout: Lx + alpha_ca * Lca + alpha_w * Rw.
pub fn total_loss(
    traj: &Trajectory,
    plant: &PHNetwork,
    controller: Option<&Controller>,
    cfg: &LossConfig,
) -> Result<LossBreakdown, TrainError> {
    let targets = plant.target_state().ok_or(TrainError::NoTarget)?;
    let lx = loss_control(traj, &targets, cfg);
    let lca = if cfg.alpha_ca != 0.0 {
        let positions = plant.position_slices().ok_or(TrainError::NoPositions)?;
        loss_collision(traj, positions, cfg)
    } else {
        0.0
    };
    let rw = match controller {
        Some(c) if cfg.alpha_w != 0.0 => loss_weight_smoothness(c, traj.h, cfg),
        _ => 0.0,
    };
    Ok(LossBreakdown {
        total: lx + cfg.alpha_ca * lca + cfg.alpha_w * rw,
        lx,
        lca,
        rw,
    })
}

/// Gradient of the total loss, aligned with the controller's or policy's
/// flat parameter layout.
#[derive(Debug, Clone)]
pub struct GradientReport {
    pub grads: Vec<f64>,
    pub loss: LossBreakdown,
}

/// Adds the collision-penalty gradient w.r.t. the stacked state at one step
/// into `out` (already scaled by `scale`). The penalty is piecewise smooth;
/// exactly at the boundary d = D the zero subgradient is used, and at d = 0
/// the direction is left at zero.
fn add_collision_state_grad(
    z: &[f64],
    positions: &[(usize, usize)],
    cfg: &LossConfig,
    scale: f64,
    out: &mut [f64],
) {
    let m = positions.len();
    for i in 0..m {
        for j in i + 1..m {
            let d = pair_distance(z, positions[i], positions[j]);
            if d < cfg.safety_distance && d > 0.0 {
                let s = d + cfg.collision_eps;
                let coef = scale * (-2.0) / (s * s * s) / d;
                let dx = z[positions[i].0] - z[positions[j].0];
                let dy = z[positions[i].0 + 1] - z[positions[j].0 + 1];
                out[positions[i].0] += coef * dx;
                out[positions[i].0 + 1] += coef * dy;
                out[positions[j].0] -= coef * dx;
                out[positions[j].0 + 1] -= coef * dy;
            }
        }
    }
}

/// Reverse accumulation through the unrolled forward-Euler rollout.
///
/// Needs the trajectory produced with `Method::ForwardEuler` and the same
/// step count as the schedule; parameter gradients come out aligned with
/// `Controller::params_flat`.
pub fn backprop(
    cl: &ClosedLoop,
    traj: &Trajectory,
    cfg: &LossConfig,
) -> Result<GradientReport, TrainError> {
    let controller = cl.controller();
    let plant = cl.plant();
    let layout = controller.layout();
    let n = traj.step_count();
    let n_x = cl.plant_dim();
    let targets = plant.target_state().ok_or(TrainError::NoTarget)?;
    let positions = if cfg.alpha_ca != 0.0 {
        Some(plant.position_slices().ok_or(TrainError::NoPositions)?)
    } else {
        None
    };
    let loss = total_loss(traj, plant, Some(controller), cfg)?;

    let mut grads = vec![0.0; layout.total];
    let horizon = traj.horizon();
    let flow = cl.flow();
    // running adjoint and the accumulated sensitivity of the flow matrix
    let mut adjoint = vec![0.0; cl.dim()];
    let mut flow_bar = BlockMatrix::zeros(vec![n_x, cl.controller_dim()], vec![n_x, cl.controller_dim()]);
    // direct input-path gradient of K, accumulated as -phi du^T
    let mut k_bar = BlockMatrix::zeros(
        controller.xi_dims().to_vec(),
        plant.input_dims().to_vec(),
    );

    for k in (0..n).rev() {
        let layer = traj.theta_indices[k];
        let zeta = &traj.states[k];
        let (x, xi) = cl.split(zeta);
        let theta = controller.theta_clamped(layer);
        let phi = controller
            .energy()
            .gradient(xi, theta)
            .expect("dims fixed at assembly");
        let u = &traj.inputs[k];

        // dl_k/du
        let du: Vec<f64> = u.iter().map(|v| 2.0 * traj.h * cfg.r_scale * v).collect();

        // demand transported back through the layer map
        let mut w_vec = flow.t_matvec(&adjoint);
        for v in &mut w_vec {
            *v *= traj.h;
        }
        // flow sensitivity: dL/dflow += h a_{k+1} g_k^T
        let g = cl.grad_p(zeta, layer);
        flow_bar.add_outer(traj.h, &adjoint, &g);

        // demand on dPhi/dxi: state path plus the input path u = -K^T phi
        let k_du = controller.k_gain().matvec(&du);
        let mut v_xi = w_vec[n_x..].to_vec();
        for (a, b) in v_xi.iter_mut().zip(&k_du) {
            *a -= b;
        }
        // input path gradient of K
        k_bar.add_outer(-1.0, &phi, &du);

        // parameter gradients of this layer's energy
        let theta_layer = layer.min(layout.theta_layers - 1);
        controller.energy().accumulate_param_grad(
            xi,
            theta,
            &v_xi,
            &mut grads[layout.theta_range(theta_layer)],
        );

        // adjoint update: a_k = a_{k+1} + H * [v_x; v_xi] + direct terms
        let hx = plant.hessian_blockdiag(x);
        let hxi = controller
            .energy()
            .hessian_blockdiag(xi, theta)
            .expect("dims fixed at assembly");
        let prop_x = hx.matvec(&w_vec[..n_x]);
        let prop_xi = hxi.matvec(&v_xi);
        let qk = cfg.q_at(traj.time(k), horizon);
        for i in 0..n_x {
            adjoint[i] += prop_x[i] + 2.0 * traj.h * qk * (x[i] - targets[i]);
        }
        for (i, v) in prop_xi.iter().enumerate() {
            adjoint[n_x + i] += v;
        }
        if let Some(pos) = positions {
            add_collision_state_grad(
                zeta,
                pos,
                cfg,
                cfg.alpha_ca * traj.h,
                &mut adjoint[..],
            );
        }
    }

    // unpack the flow sensitivity into parameter gradients
    let xi_dims = controller.xi_dims().to_vec();
    let dj = BlockMatrix::from_data(xi_dims.clone(), xi_dims.clone(), flow_bar.block(1, 1));
    // J = A - A^T
    let da = dj.sub(&dj.transpose());
    let da = da
        .mask_apply(controller.pattern_a())
        .expect("pattern matches");
    grads[layout.a_range()].copy_from_slice(da.data());

    // K appears in Psi twice and in the input path
    let p_ll = BlockMatrix::from_data(
        xi_dims.clone(),
        plant.state_dims().to_vec(),
        flow_bar.block(1, 0),
    );
    let p_ur = BlockMatrix::from_data(
        plant.state_dims().to_vec(),
        xi_dims.clone(),
        flow_bar.block(0, 1),
    );
    let gt = plant.port().transpose();
    let dk = p_ll.sub(&p_ur.transpose()).matmul(&gt).add(&k_bar);
    let dk = dk
        .mask_apply(controller.pattern_k())
        .expect("pattern matches");
    grads[layout.k_range()].copy_from_slice(dk.data());

    // trainable damping: S enters with a minus sign; R_c,i = L_i L_i^T
    if let RcParam::Trainable { factors } = controller.rc_param() {
        let drc = BlockMatrix::from_data(xi_dims.clone(), xi_dims.clone(), flow_bar.block(1, 1))
            .scale(-1.0);
        let mut out = vec![0.0; factors.len()];
        let mut off_x = 0;
        let mut off_f = 0;
        for (i, &q) in xi_dims.iter().enumerate() {
            let b = drc.block(i, i);
            let l = &factors[off_f..off_f + q * q];
            // d/dL of <B, L L^T> is (B + B^T) L
            for r in 0..q {
                for c in 0..q {
                    let mut acc = 0.0;
                    for s in 0..q {
                        acc += (b[r * q + s] + b[s * q + r]) * l[s * q + c];
                    }
                    out[off_f + r * q + c] = acc;
                }
            }
            off_x += q;
            off_f += q * q;
        }
        let _ = off_x;
        grads[layout.rc_range()].copy_from_slice(&out);
    }

    // smoothness regularizer over the schedule
    if cfg.alpha_w != 0.0 {
        if let Schedule::PerLayer(layers) = controller.schedule() {
            if layers.len() >= 2 {
                let mut ranges = controller.energy().weight_ranges();
                if cfg.rw_include_bias {
                    ranges.extend(controller.energy().bias_ranges());
                }
                for l in 0..layers.len() {
                    let range = layout.theta_range(l);
                    for r in &ranges {
                        for p in r.clone() {
                            let mut gval = 0.0;
                            if l + 1 < layers.len() {
                                gval += 2.0 * (layers[l][p] - layers[l + 1][p]);
                            }
                            if l > 0 {
                                gval += 2.0 * (layers[l][p] - layers[l - 1][p]);
                            }
                            grads[range.start + p] += cfg.alpha_w * traj.h * gval;
                        }
                    }
                }
            }
        }
    }

    // structural zeros carry no gradient
    let mask = controller.structural_mask();
    for (g, keep) in grads.iter_mut().zip(mask) {
        if !keep {
            *g = 0.0;
        }
    }

    Ok(GradientReport { grads, loss })
}

/// Central-difference gradient of the total loss over every scalar
/// parameter; the independent oracle for `backprop`.
pub fn fd_gradient_oracle(
    plant: &PHNetwork,
    controller: &Controller,
    zeta0: &[f64],
    n: usize,
    h: f64,
    cfg: &LossConfig,
    step: f64,
) -> Result<GradientReport, TrainError> {
    let params = controller.params_flat();
    if params.len() > 5000 {
        return Err(TrainError::TooManyParameters(params.len()));
    }
    let eval = |c: &Controller| -> Result<f64, TrainError> {
        let cl = ClosedLoop::assemble(plant.clone(), c.clone())?;
        let traj = cl.integrate(zeta0, n, h, Method::ForwardEuler, None)?;
        Ok(total_loss(&traj, plant, Some(c), cfg)?.total)
    };
    let cl = ClosedLoop::assemble(plant.clone(), controller.clone())?;
    let traj = cl.integrate(zeta0, n, h, Method::ForwardEuler, None)?;
    let loss = total_loss(&traj, plant, Some(controller), cfg)?;

    let mut grads = vec![0.0; params.len()];
    let mut work = controller.clone();
    let mut pv = params.clone();
    for p in 0..params.len() {
        pv[p] = params[p] + step;
        work.set_params_flat(&pv);
        let fp = eval(&work)?;
        pv[p] = params[p] - step;
        work.set_params_flat(&pv);
        let fm = eval(&work)?;
        pv[p] = params[p];
        grads[p] = (fp - fm) / (2.0 * step);
    }
    work.set_params_flat(&pv);
    Ok(GradientReport { grads, loss })
}

// -------------------------------------------------------------------------
// Adam

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        AdamState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update; masked (structurally zero) entries stay
/// exactly zero.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &AdamConfig,
    mask: &[bool],
) {
    assert_eq!(params.len(), grads.len(), "parameter/gradient shape");
    assert_eq!(params.len(), state.m.len(), "optimizer state shape");
    assert_eq!(params.len(), mask.len(), "mask shape");
    state.t += 1;
    let b1t = 1.0 - cfg.beta1.powi(state.t as i32);
    let b2t = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        if !mask[i] {
            params[i] = 0.0;
            continue;
        }
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
        let mhat = state.m[i] / b1t;
        let vhat = state.v[i] / b2t;
        params[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}

// -------------------------------------------------------------------------
// training loops

#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub n_steps: usize,
    pub h: f64,
    pub epochs: usize,
    pub loss: LossConfig,
    pub adam: AdamConfig,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub controller: Controller,
    /// Loss before each update, plus the final loss: `epochs + 1` entries
    /// when training completes.
    pub history: Vec<LossBreakdown>,
    /// Set when a rollout diverged; the controller holds the last
    /// parameters that produced a finite rollout.
    pub diverged_at_epoch: Option<usize>,
    /// Parameter snapshots requested via `TrainSetup` fractions; filled by
    /// `train_controller_with_snapshots`.
    pub snapshots: Vec<(usize, Controller)>,
}

/// Full-batch gradient descent with Adam on one fixed initial condition.
/// Deterministic given the initial controller.
pub fn train_controller(
    plant: &PHNetwork,
    init: &Controller,
    zeta0: &[f64],
    setup: &TrainSetup,
) -> Result<TrainOutcome, TrainError> {
    train_controller_with_snapshots(plant, init, zeta0, setup, &[])
}

/// As `train_controller`, additionally cloning the parameters right after
/// the given epoch counts (e.g. early-stopping studies).
pub fn train_controller_with_snapshots(
    plant: &PHNetwork,
    init: &Controller,
    zeta0: &[f64],
    setup: &TrainSetup,
    snapshot_epochs: &[usize],
) -> Result<TrainOutcome, TrainError> {
    let mut controller = init.clone();
    let mut history = Vec::with_capacity(setup.epochs + 1);
    let mut snapshots = Vec::new();
    let mut params = controller.params_flat();
    let mask = controller.structural_mask();
    let mut adam = AdamState::new(params.len());
    if snapshot_epochs.contains(&0) {
        snapshots.push((0, controller.clone()));
    }
    for epoch in 0..setup.epochs {
        let cl = ClosedLoop::assemble(plant.clone(), controller.clone())?;
        let rollout = cl.integrate(zeta0, setup.n_steps, setup.h, Method::ForwardEuler, None);
        let traj = match rollout {
            Ok(t) => t,
            Err(SimError::Diverged { .. }) => {
                return Ok(TrainOutcome {
                    controller,
                    history,
                    diverged_at_epoch: Some(epoch),
                    snapshots,
                })
            }
            Err(e) => return Err(e.into()),
        };
        let report = backprop(&cl, &traj, &setup.loss)?;
        history.push(report.loss);
        adam_step(&mut params, &report.grads, &mut adam, &setup.adam, &mask);
        controller.set_params_flat(&params);
        if snapshot_epochs.contains(&(epoch + 1)) {
            snapshots.push((epoch + 1, controller.clone()));
        }
    }
    // final loss after the last update
    let cl = ClosedLoop::assemble(plant.clone(), controller.clone())?;
    match cl.integrate(zeta0, setup.n_steps, setup.h, Method::ForwardEuler, None) {
        Ok(traj) => history.push(total_loss(&traj, plant, Some(&controller), &setup.loss)?),
        Err(SimError::Diverged { .. }) => {
            return Ok(TrainOutcome {
                controller,
                history,
                diverged_at_epoch: Some(setup.epochs),
                snapshots,
            })
        }
        Err(e) => return Err(e.into()),
    }
    Ok(TrainOutcome {
        controller,
        history,
        diverged_at_epoch: None,
        snapshots,
    })
}

/// Reverse accumulation for the static MLP loop (no controller state, no
/// smoothness term).
pub fn backprop_mlp(
    lp: &MlpLoop,
    traj: &Trajectory,
    cfg: &LossConfig,
) -> Result<GradientReport, TrainError> {
    let plant = lp.plant();
    let policy = lp.policy();
    let n = traj.step_count();
    let targets = plant.target_state().ok_or(TrainError::NoTarget)?;
    let positions = if cfg.alpha_ca != 0.0 {
        Some(plant.position_slices().ok_or(TrainError::NoPositions)?)
    } else {
        None
    };
    let lx = loss_control(traj, &targets, cfg);
    let lca = match positions {
        Some(pos) => loss_collision(traj, pos, cfg),
        None => 0.0,
    };
    let loss = LossBreakdown {
        total: lx + cfg.alpha_ca * lca,
        lx,
        lca,
        rw: 0.0,
    };

    let mut grads = vec![0.0; policy.params_flat().len()];
    let horizon = traj.horizon();
    let flow = plant.flow();
    let mut adjoint = vec![0.0; plant.state_dim()];
    for k in (0..n).rev() {
        let x = &traj.states[k];
        let y = &traj.outputs[k];
        let u = &traj.inputs[k];
        let (_, cache) = policy.forward_cached(y);
        // demand on u: state path h G a + loss path 2 h r u
        let ga = plant.port().matvec(&adjoint);
        let ud: Vec<f64> = ga
            .iter()
            .zip(u)
            .map(|(g, uv)| traj.h * g + 2.0 * traj.h * cfg.r_scale * uv)
            .collect();
        let dy = policy.reverse(&cache, &ud, &mut grads);
        // demand on dV/dx: flow path + output path y = G dV/dx
        let mut vg = flow.t_matvec(&adjoint);
        for v in &mut vg {
            *v *= traj.h;
        }
        let gdy = plant.port().t_matvec(&dy);
        for (a, b) in vg.iter_mut().zip(&gdy) {
            *a += b;
        }
        let hx = plant.hessian_blockdiag(x);
        let prop = hx.matvec(&vg);
        let qk = cfg.q_at(traj.time(k), horizon);
        for i in 0..adjoint.len() {
            adjoint[i] += prop[i] + 2.0 * traj.h * qk * (x[i] - targets[i]);
        }
        if let Some(pos) = positions {
            add_collision_state_grad(x, pos, cfg, cfg.alpha_ca * traj.h, &mut adjoint);
        }
    }
    Ok(GradientReport { grads, loss })
}

#[derive(Debug, Clone)]
pub struct MlpTrainOutcome {
    pub policy: MlpPolicy,
    pub history: Vec<LossBreakdown>,
    pub diverged_at_epoch: Option<usize>,
}

pub fn train_mlp(
    plant: &PHNetwork,
    init: &MlpPolicy,
    x0: &[f64],
    setup: &TrainSetup,
) -> Result<MlpTrainOutcome, TrainError> {
    let mut policy = init.clone();
    let mut history = Vec::with_capacity(setup.epochs + 1);
    let mut params = policy.params_flat();
    let mask = policy.structural_mask();
    let mut adam = AdamState::new(params.len());
    for epoch in 0..setup.epochs {
        let lp = MlpLoop::assemble(plant.clone(), policy.clone())?;
        let traj = match lp.integrate(x0, setup.n_steps, setup.h, Method::ForwardEuler) {
            Ok(t) => t,
            Err(SimError::Diverged { .. }) => {
                return Ok(MlpTrainOutcome {
                    policy,
                    history,
                    diverged_at_epoch: Some(epoch),
                })
            }
            Err(e) => return Err(e.into()),
        };
        let report = backprop_mlp(&lp, &traj, &setup.loss)?;
        history.push(report.loss);
        adam_step(&mut params, &report.grads, &mut adam, &setup.adam, &mask);
        policy.set_params_flat(&params);
    }
    let lp = MlpLoop::assemble(plant.clone(), policy.clone())?;
    match lp.integrate(x0, setup.n_steps, setup.h, Method::ForwardEuler) {
        Ok(traj) => {
            let report = backprop_mlp(&lp, &traj, &setup.loss)?;
            history.push(report.loss);
        }
        Err(SimError::Diverged { .. }) => {
            return Ok(MlpTrainOutcome {
                policy,
                history,
                diverged_at_epoch: Some(setup.epochs),
            })
        }
        Err(e) => return Err(e.into()),
    }
    Ok(MlpTrainOutcome {
        policy,
        history,
        diverged_at_epoch: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::{ControllerInit, EnergyVariant, RcInit};
    use crate::graph::Graph;
    use crate::plant::{robot_benchmark, RobotFleet};

    fn small_fleet(n: usize) -> RobotFleet {
        let mut f = RobotFleet::evenly_spaced(n);
        f.initials = (0..n).map(|i| [i as f64, 0.0]).collect();
        f.targets = (0..n).map(|i| [i as f64 + 1.0, 1.0]).collect();
        f
    }

    fn two_robot_setup(seed: u64, n_steps: usize) -> (PHNetwork, Controller, Vec<f64>) {
        let fleet = small_fleet(2);
        let (plant, x0) = robot_benchmark(&fleet).unwrap();
        let ctrl = Controller::init(&ControllerInit::benchmark(
            Graph::ring(2),
            vec![2; 2],
            n_steps,
            seed,
        ))
        .unwrap();
        let mut zeta0 = x0;
        zeta0.extend_from_slice(&[3.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0]);
        (plant, ctrl, zeta0)
    }

    #[test]
    fn loss_control_zero_at_rest() {
        let (plant, ctrl, _) = two_robot_setup(0, 10);
        let mut zeta0 = plant.target_state().unwrap();
        // zero biases so the controller is quiet at xi = 0
        let mut c = ctrl;
        let layout = c.layout();
        let mut params = c.params_flat();
        for l in 0..layout.theta_layers {
            let r = layout.theta_range(l);
            for br in c.energy().bias_ranges() {
                for p in br {
                    params[r.start + p] = 0.0;
                }
            }
        }
        c.set_params_flat(&params);
        zeta0.extend(vec![0.0; c.xi_dim_total()]);
        let cl = ClosedLoop::assemble(plant.clone(), c).unwrap();
        let traj = cl
            .integrate(&zeta0, 10, 0.05, Method::ForwardEuler, None)
            .unwrap();
        let targets = plant.target_state().unwrap();
        let cfg = LossConfig::default();
        assert_eq!(loss_control(&traj, &targets, &cfg), 0.0);
    }

    #[test]
    fn loss_control_constant_offset_riemann_sum() {
        // constant offset e, u = 0, Q = I, T = 1, N = 100 -> approximately |e|^2
        let (plant, _) = robot_benchmark(&small_fleet(2)).unwrap();
        let targets = plant.target_state().unwrap();
        let offset = 0.3;
        let state: Vec<f64> = targets.iter().map(|v| v + offset).collect();
        let n = 100;
        let traj = Trajectory {
            h: 1.0 / n as f64,
            states: vec![state; n + 1],
            inputs: vec![vec![0.0; plant.input_dim()]; n + 1],
            outputs: vec![vec![0.0; plant.input_dim()]; n + 1],
            theta_indices: vec![0; n + 1],
        };
        let cfg = LossConfig {
            gamma: 1.0,
            q_scale: 1.0,
            r_scale: 0.0,
            alpha_ca: 0.0,
            alpha_w: 0.0,
            ..Default::default()
        };
        let e2 = offset * offset * targets.len() as f64;
        let got = loss_control(&traj, &targets, &cfg);
        assert!((got - e2).abs() < 1e-12, "{got} vs {e2}");
    }

    #[test]
    fn loss_collision_static_pair() {
        // two stationary robots at distance 0.4 for T = 1:
        // integrand (0.401)^-2, so the loss is 1/(0.401^2)
        let fleet = RobotFleet {
            count: 2,
            masses: vec![1.0; 2],
            springs: vec![1.0; 2],
            dampings: vec![0.0; 2],
            targets: vec![[0.0, 0.0], [0.4, 0.0]],
            initials: vec![[0.0, 0.0], [0.4, 0.0]],
        };
        let (plant, x0) = robot_benchmark(&fleet).unwrap();
        let n = 50;
        let traj = Trajectory {
            h: 1.0 / n as f64,
            states: vec![x0; n + 1],
            inputs: vec![vec![0.0; 4]; n + 1],
            outputs: vec![vec![0.0; 4]; n + 1],
            theta_indices: vec![0; n + 1],
        };
        let cfg = LossConfig::default();
        let got = loss_collision(&traj, plant.position_slices().unwrap(), &cfg);
        let expect = 1.0 / (0.401f64 * 0.401);
        assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
        assert!((expect - 6.218867420227486).abs() < 1e-10);
    }

    #[test]
    fn loss_collision_separated_is_zero_and_touching_is_finite() {
        let fleet = RobotFleet {
            count: 2,
            masses: vec![1.0; 2],
            springs: vec![1.0; 2],
            dampings: vec![0.0; 2],
            targets: vec![[0.0, 0.0], [3.0, 0.0]],
            initials: vec![[0.0, 0.0], [3.0, 0.0]],
        };
        let (plant, x0) = robot_benchmark(&fleet).unwrap();
        let mk = |x: Vec<f64>| Trajectory {
            h: 0.1,
            states: vec![x; 11],
            inputs: vec![vec![0.0; 4]; 11],
            outputs: vec![vec![0.0; 4]; 11],
            theta_indices: vec![0; 11],
        };
        let cfg = LossConfig::default();
        let pos = plant.position_slices().unwrap();
        assert_eq!(loss_collision(&mk(x0.clone()), pos, &cfg), 0.0);
        // coincident robots: finite eps^-2 per step
        let mut x_same = x0;
        x_same[6] = 0.0;
        let v = loss_collision(&mk(x_same), pos, &cfg);
        let expect = 1.0 / (cfg.collision_eps * cfg.collision_eps);
        assert!((v - expect).abs() / expect < 1e-12);
        assert!(v.is_finite());
    }

    #[test]
    fn smoothness_zero_for_constant_and_tied() {
        let (_, ctrl, _) = two_robot_setup(3, 10);
        let cfg = LossConfig::default();
        // freshly initialized schedules replicate one layer: zero smoothness
        assert_eq!(loss_weight_smoothness(&ctrl, 0.05, &cfg), 0.0);
        let frozen = ctrl.frozen_at(0);
        assert_eq!(loss_weight_smoothness(&frozen, 0.05, &cfg), 0.0);
    }

    #[test]
    fn smoothness_single_step_change() {
        // one scalar weight stepping 0 -> 1 once with h = 0.05 gives 0.05
        let graph = Graph::ring(2);
        let cfg_init = ControllerInit {
            graph,
            xi_dims: vec![1, 1],
            meas_dims: vec![1, 1],
            l_y: 1,
            l_xi: 0,
            target_radii: None,
            variant: EnergyVariant::LogcoshSingle { hidden: vec![1, 1] },
            time_invariant: false,
            n_layers: 3,
            rc: RcInit::Zero,
            seed: 0,
        };
        let mut ctrl = Controller::init(&cfg_init).unwrap();
        let layout = ctrl.layout();
        let mut params = ctrl.params_flat();
        // zero all theta, then set node 0 weight to 1 in layers 1 and 2
        for l in 0..3 {
            for p in layout.theta_range(l) {
                params[p] = 0.0;
            }
        }
        params[layout.theta_range(1).start] = 1.0;
        params[layout.theta_range(2).start] = 1.0;
        ctrl.set_params_flat(&params);
        let cfg = LossConfig::default();
        let rw = loss_weight_smoothness(&ctrl, 0.05, &cfg);
        assert!((rw - 0.05).abs() < 1e-15);
    }

    #[test]
    fn total_loss_breakdown_sums() {
        let (plant, ctrl, zeta0) = two_robot_setup(5, 10);
        let cl = ClosedLoop::assemble(plant.clone(), ctrl.clone()).unwrap();
        let traj = cl
            .integrate(&zeta0, 10, 0.05, Method::ForwardEuler, None)
            .unwrap();
        let cfg = LossConfig::default();
        let b = total_loss(&traj, &plant, Some(&ctrl), &cfg).unwrap();
        let manual = b.lx + cfg.alpha_ca * b.lca + cfg.alpha_w * b.rw;
        assert!((b.total - manual).abs() <= 1e-12 * manual.abs().max(1.0));
        // alpha = 0 collapses to the control cost
        let cfg0 = LossConfig {
            alpha_ca: 0.0,
            alpha_w: 0.0,
            ..Default::default()
        };
        let b0 = total_loss(&traj, &plant, Some(&ctrl), &cfg0).unwrap();
        assert_eq!(b0.total, b0.lx);
    }

    #[test]
    fn backprop_matches_fd_small_instance() {
        let (plant, ctrl, zeta0) = two_robot_setup(11, 10);
        let cfg = LossConfig::default();
        let cl = ClosedLoop::assemble(plant.clone(), ctrl.clone()).unwrap();
        let traj = cl
            .integrate(&zeta0, 10, 0.05, Method::ForwardEuler, None)
            .unwrap();
        let got = backprop(&cl, &traj, &cfg).unwrap();
        let fd = fd_gradient_oracle(&plant, &ctrl, &zeta0, 10, 0.05, &cfg, 1e-5).unwrap();
        let mut max_rel: f64 = 0.0;
        for (a, b) in got.grads.iter().zip(&fd.grads) {
            let rel = (a - b).abs() / b.abs().max(1e-6);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel <= 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn backprop_zero_k_zero_energy_grads() {
        // with K = 0 and no collisions from the target state, the plant cost
        // cannot see the energy parameters
        let fleet = small_fleet(2);
        let (plant, _) = robot_benchmark(&fleet).unwrap();
        let mut ctrl = Controller::init(&ControllerInit::benchmark(
            Graph::ring(2),
            vec![2; 2],
            5,
            7,
        ))
        .unwrap();
        let layout = ctrl.layout();
        let mut params = ctrl.params_flat();
        for v in &mut params[layout.k_range()] {
            *v = 0.0;
        }
        ctrl.set_params_flat(&params);
        let mut zeta0 = plant.target_state().unwrap();
        zeta0.extend(vec![0.4; ctrl.xi_dim_total()]);
        let cfg = LossConfig {
            alpha_ca: 0.0,
            alpha_w: 0.0,
            ..Default::default()
        };
        let cl = ClosedLoop::assemble(plant.clone(), ctrl.clone()).unwrap();
        let traj = cl
            .integrate(&zeta0, 5, 0.05, Method::ForwardEuler, None)
            .unwrap();
        let got = backprop(&cl, &traj, &cfg).unwrap();
        for l in 0..layout.theta_layers {
            for p in layout.theta_range(l) {
                assert_eq!(got.grads[p], 0.0);
            }
        }
        assert!(got.loss.total.abs() < 1e-24);
    }

    #[test]
    fn backprop_tied_equals_sum_of_layers() {
        let (plant, ctrl, zeta0) = two_robot_setup(13, 6);
        // time-varying gradients at tied parameters
        let tied = ctrl.frozen_at(0);
        let cfg = LossConfig {
            alpha_w: 0.0,
            ..Default::default()
        };
        let cl_tv = ClosedLoop::assemble(plant.clone(), ctrl.clone()).unwrap();
        let traj_tv = cl_tv
            .integrate(&zeta0, 6, 0.05, Method::ForwardEuler, None)
            .unwrap();
        let g_tv = backprop(&cl_tv, &traj_tv, &cfg).unwrap();
        let cl_ti = ClosedLoop::assemble(plant.clone(), tied.clone()).unwrap();
        let traj_ti = cl_ti
            .integrate(&zeta0, 6, 0.05, Method::ForwardEuler, None)
            .unwrap();
        let g_ti = backprop(&cl_ti, &traj_ti, &cfg).unwrap();

        let layout_tv = ctrl.layout();
        let layout_ti = tied.layout();
        let tl = layout_tv.theta_layer_len;
        for p in 0..tl {
            let mut sum = 0.0;
            for l in 0..layout_tv.theta_layers {
                sum += g_tv.grads[layout_tv.theta_range(l).start + p];
            }
            let ti = g_ti.grads[layout_ti.theta_range(0).start + p];
            assert!(
                (sum - ti).abs() <= 1e-9 * ti.abs().max(1.0),
                "p={p}: {sum} vs {ti}"
            );
        }
    }

    #[test]
    fn fd_oracle_quadratic_toy_and_richardson() {
        // halving the step shrinks the central-difference error about 4x on
        // a smooth instance
        let (plant, ctrl, zeta0) = two_robot_setup(17, 4);
        let cfg = LossConfig {
            alpha_ca: 0.0,
            ..Default::default()
        };
        let cl = ClosedLoop::assemble(plant.clone(), ctrl.clone()).unwrap();
        let traj = cl
            .integrate(&zeta0, 4, 0.05, Method::ForwardEuler, None)
            .unwrap();
        let exact = backprop(&cl, &traj, &cfg).unwrap();
        let coarse = fd_gradient_oracle(&plant, &ctrl, &zeta0, 4, 0.05, &cfg, 2e-3).unwrap();
        let fine = fd_gradient_oracle(&plant, &ctrl, &zeta0, 4, 0.05, &cfg, 1e-3).unwrap();
        let mask = ctrl.structural_mask();
        let err = |r: &GradientReport| -> f64 {
            r.grads
                .iter()
                .zip(&exact.grads)
                .zip(&mask)
                .filter(|(_, &m)| m)
                .map(|((a, b), _)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        let e_coarse = err(&coarse);
        let e_fine = err(&fine);
        assert!(e_fine < e_coarse, "{e_fine} !< {e_coarse}");
        let ratio = e_coarse / e_fine.max(1e-18);
        assert!(ratio > 2.5, "quadratic shrink expected, got ratio {ratio}");
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut params = vec![1.0, -2.0, 0.5];
        let grads = vec![0.0; 3];
        let mut st = AdamState::new(3);
        adam_step(
            &mut params,
            &grads,
            &mut st,
            &AdamConfig::default(),
            &[true; 3],
        );
        assert_eq!(params, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_first_step_magnitude() {
        let cfg = AdamConfig::default();
        let mut params = vec![0.0];
        let mut st = AdamState::new(1);
        adam_step(&mut params, &[1.0], &mut st, &cfg, &[true]);
        // bias-corrected first step is about -lr
        assert!((params[0] + cfg.lr).abs() < 1e-8 * cfg.lr.max(1e-12));
    }

    #[test]
    fn adam_masked_entries_stay_zero() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut params = vec![0.0; 10];
        let mask: Vec<bool> = (0..10).map(|i| i % 3 != 0).collect();
        let cfg = AdamConfig::default();
        let mut st = AdamState::new(10);
        for _ in 0..100 {
            let grads: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
            adam_step(&mut params, &grads, &mut st, &cfg, &mask);
        }
        for (i, &p) in params.iter().enumerate() {
            if !mask[i] {
                assert_eq!(p, 0.0);
            } else {
                assert_ne!(p, 0.0);
            }
        }
    }

    #[test]
    fn train_zero_epochs_keeps_controller() {
        let (plant, ctrl, zeta0) = two_robot_setup(19, 10);
        let setup = TrainSetup {
            n_steps: 10,
            h: 0.05,
            epochs: 0,
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
        };
        let out = train_controller(&plant, &ctrl, &zeta0, &setup).unwrap();
        assert_eq!(out.controller.params_flat(), ctrl.params_flat());
        assert_eq!(out.history.len(), 1);
    }

    #[test]
    fn train_two_robot_smoke_reduces_loss() {
        let (plant, ctrl, zeta0) = two_robot_setup(21, 10);
        let setup = TrainSetup {
            n_steps: 10,
            h: 0.05,
            epochs: 50,
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
        };
        let out = train_controller(&plant, &ctrl, &zeta0, &setup).unwrap();
        assert!(out.diverged_at_epoch.is_none());
        let first = out.history.first().unwrap().total;
        let last = out.history.last().unwrap().total;
        assert!(last < first, "{last} !< {first}");
    }

    #[test]
    fn train_is_deterministic() {
        let (plant, ctrl, zeta0) = two_robot_setup(23, 8);
        let setup = TrainSetup {
            n_steps: 8,
            h: 0.05,
            epochs: 5,
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
        };
        let a = train_controller(&plant, &ctrl, &zeta0, &setup).unwrap();
        let b = train_controller(&plant, &ctrl, &zeta0, &setup).unwrap();
        assert_eq!(a.controller.params_flat(), b.controller.params_flat());
        let ha: Vec<f64> = a.history.iter().map(|l| l.total).collect();
        let hb: Vec<f64> = b.history.iter().map(|l| l.total).collect();
        assert_eq!(ha, hb);
    }

    #[test]
    fn structure_preserved_across_updates() {
        let (plant, ctrl, zeta0) = two_robot_setup(29, 8);
        let setup = TrainSetup {
            n_steps: 8,
            h: 0.05,
            epochs: 25,
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
        };
        let out = train_controller(&plant, &ctrl, &zeta0, &setup).unwrap();
        let c = &out.controller;
        assert_eq!(c.j_matrix().skewness_error(), 0.0);
        assert!(crate::graph::conforms(&c.j_matrix(), c.pattern_sq()).unwrap());
        assert!(crate::graph::conforms(c.k_gain(), c.pattern_k()).unwrap());
        assert!(c.rc_matrix().min_eigenvalue_sym() >= -1e-12);
    }

    #[test]
    fn mlp_backprop_matches_fd() {
        let fleet = small_fleet(3);
        let (plant, x0) = robot_benchmark(&fleet).unwrap();
        let policy = MlpPolicy::init(Graph::ring(3), vec![2; 3], vec![2; 3], 4, 31).unwrap();
        let cfg = LossConfig {
            alpha_w: 0.0,
            ..Default::default()
        };
        let lp = MlpLoop::assemble(plant.clone(), policy.clone()).unwrap();
        let traj = lp.integrate(&x0, 8, 0.05, Method::ForwardEuler).unwrap();
        let got = backprop_mlp(&lp, &traj, &cfg).unwrap();

        let params = policy.params_flat();
        let mask = policy.structural_mask();
        let mut work = policy.clone();
        let step = 1e-5;
        let mut max_rel: f64 = 0.0;
        for p in 0..params.len() {
            if !mask[p] {
                assert_eq!(got.grads[p], 0.0);
                continue;
            }
            let mut pv = params.clone();
            pv[p] = params[p] + step;
            work.set_params_flat(&pv);
            let lp2 = MlpLoop::assemble(plant.clone(), work.clone()).unwrap();
            let tp = lp2.integrate(&x0, 8, 0.05, Method::ForwardEuler).unwrap();
            let fp = backprop_mlp(&lp2, &tp, &cfg).unwrap().loss.total;
            pv[p] = params[p] - step;
            work.set_params_flat(&pv);
            let lp2 = MlpLoop::assemble(plant.clone(), work.clone()).unwrap();
            let tm = lp2.integrate(&x0, 8, 0.05, Method::ForwardEuler).unwrap();
            let fm = backprop_mlp(&lp2, &tm, &cfg).unwrap().loss.total;
            let fd = (fp - fm) / (2.0 * step);
            max_rel = max_rel.max((got.grads[p] - fd).abs() / fd.abs().max(1e-6));
        }
        assert!(max_rel <= 1e-4, "max relative error {max_rel}");
    }
}
