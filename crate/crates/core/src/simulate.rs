//! Closed-loop assembly and fixed-step integration.
//!
//! The plant and controller together form one Hamiltonian system
//!
//! ```text
//!   zeta' = (Psi - S) dP/dzeta,   zeta = (x, xi),
//!   Psi   = [ Omega + F G   -G^T K^T ]     S = blkdiag(R, R_c)
//!           [ K G            J       ],
//!   P     = V(x) + Phi(xi, theta)
//! ```
//!
//! with `Psi` skew-symmetric and `S` PSD for every parameter value, which is
//! what the energy-decay and sensitivity guarantees rest on. Forward Euler
//! is used during training (one step = one layer); a fixed-step fifth-order
//! Dormand-Prince method approximates the continuous flow for evaluation.

use crate::blocklin::BlockMatrix;
use crate::controller::{Controller, ControllerError, MlpPolicy};
use crate::plant::PHNetwork;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("state diverged (non-finite) at step {step}")]
    Diverged { step: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("plant interconnection is not power-preserving; closed-loop guarantees would be void")]
    NotPowerPreserving,
    #[error("dissipative part failed the PSD check: quadratic form {0} < tolerance")]
    NotDissipative(f64),
    #[error(transparent)]
    Controller(#[from] ControllerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    ForwardEuler,
    RungeKutta5,
}

/// Time-indexed rollout. `states[k]` is the state at t = k*h; `inputs[k]`
/// and `outputs[k]` are the control input and plant output evaluated at
/// that state with the layer parameters in effect there.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub h: f64,
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
    pub theta_indices: Vec<usize>,
}

impl Trajectory {
    pub fn step_count(&self) -> usize {
        self.states.len() - 1
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.h
    }

    pub fn horizon(&self) -> f64 {
        self.step_count() as f64 * self.h
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("at least one state")
    }
}

/// The assembled closed loop.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    plant: PHNetwork,
    controller: Controller,
    psi: BlockMatrix,
    s_mat: BlockMatrix,
    flow: BlockMatrix,
    n_x: usize,
    n_xi: usize,
}

impl ClosedLoop {
    /// Builds Psi and S from the parts and refuses plants whose coupling
    /// could pump energy into the network.
    pub fn assemble(plant: PHNetwork, controller: Controller) -> Result<Self, SimError> {
        if !plant.check_power_preserving() {
            return Err(SimError::NotPowerPreserving);
        }
        if plant.input_dim() != controller.meas_dim_total() {
            return Err(SimError::DimensionMismatch(format!(
                "plant has {} ports, controller measures {}",
                plant.input_dim(),
                controller.meas_dim_total()
            )));
        }
        let n_x = plant.state_dim();
        let n_xi = controller.xi_dim_total();
        let mut blocks = plant.state_dims().to_vec();
        blocks.extend_from_slice(controller.xi_dims());

        let fg = plant.coupling().matmul(plant.port());
        let upper_left = plant.omega().add(&fg);
        let kg = controller.k_gain().matmul(plant.port());
        let gt_kt = kg.transpose().scale(-1.0);
        let j = controller.j_matrix();

        let mut psi = BlockMatrix::zeros(blocks.clone(), blocks.clone());
        psi.paste(0, 0, &upper_left);
        psi.paste(0, n_x, &gt_kt);
        psi.paste(n_x, 0, &kg);
        psi.paste(n_x, n_x, &j);

        let mut s_mat = BlockMatrix::zeros(blocks.clone(), blocks);
        s_mat.paste(0, 0, plant.rdiss());
        s_mat.paste(n_x, n_x, &controller.rc_matrix());

        // sampled PSD check of the dissipative part
        let dim = n_x + n_xi;
        for t in 0..64 {
            let x: Vec<f64> = (0..dim)
                .map(|i| (((i * 31 + t * 17 + 7) % 101) as f64 / 50.0) - 1.0)
                .collect();
            let sx = s_mat.matvec(&x);
            let q: f64 = x.iter().zip(&sx).map(|(a, b)| a * b).sum();
            let n2: f64 = x.iter().map(|a| a * a).sum();
            if q < -1e-12 * n2 {
                return Err(SimError::NotDissipative(q / n2));
            }
        }

        let flow = psi.sub(&s_mat);
        Ok(ClosedLoop {
            plant,
            controller,
            psi,
            s_mat,
            flow,
            n_x,
            n_xi,
        })
    }

    pub fn dim(&self) -> usize {
        self.n_x + self.n_xi
    }

    pub fn plant_dim(&self) -> usize {
        self.n_x
    }

    pub fn controller_dim(&self) -> usize {
        self.n_xi
    }

    pub fn plant(&self) -> &PHNetwork {
        &self.plant
    }

    pub fn controller(&self) -> &Controller {
        &self.controller
    }

    pub fn psi(&self) -> &BlockMatrix {
        &self.psi
    }

    pub fn s_matrix(&self) -> &BlockMatrix {
        &self.s_mat
    }

    /// Psi - S.
    pub fn flow(&self) -> &BlockMatrix {
        &self.flow
    }

    pub fn split<'a>(&self, zeta: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        zeta.split_at(self.n_x)
    }

    /// Layer index in effect at step k; the schedule end (or an explicit
    /// freeze point) pins the tail.
    pub fn effective_layer(&self, k: usize, freeze_after: Option<usize>) -> usize {
        let sched = self.controller.schedule().layer_count().saturating_sub(1);
        k.min(freeze_after.unwrap_or(usize::MAX)).min(sched)
    }

    /// dP/dzeta with the parameters of layer `layer`.
    pub fn grad_p(&self, zeta: &[f64], layer: usize) -> Vec<f64> {
        let (x, xi) = self.split(zeta);
        let mut out = self.plant.gradient(x);
        let theta = self.controller.theta_clamped(layer);
        let gxi = self
            .controller
            .energy()
            .gradient(xi, theta)
            .expect("dims fixed at assembly");
        out.extend_from_slice(&gxi);
        out
    }

    /// P(zeta) = V(x) + Phi(xi, theta_layer).
    pub fn total_energy(&self, zeta: &[f64], layer: usize) -> f64 {
        let (x, xi) = self.split(zeta);
        let theta = self.controller.theta_clamped(layer);
        self.plant.energy(x)
            + self
                .controller
                .energy()
                .value(xi, theta)
                .expect("dims fixed at assembly")
    }

    /// Block-diagonal Hessian of P.
    pub fn hess_p(&self, zeta: &[f64], layer: usize) -> BlockMatrix {
        let (x, xi) = self.split(zeta);
        let hx = self.plant.hessian_blockdiag(x);
        let hxi = self
            .controller
            .energy()
            .hessian_blockdiag(xi, self.controller.theta_clamped(layer))
            .expect("dims fixed at assembly");
        let mut blocks = self.plant.state_dims().to_vec();
        blocks.extend_from_slice(self.controller.xi_dims());
        let mut out = BlockMatrix::zeros(blocks.clone(), blocks);
        out.paste(0, 0, &hx);
        out.paste(self.n_x, self.n_x, &hxi);
        out
    }

    pub fn vector_field(&self, zeta: &[f64], layer: usize) -> Vec<f64> {
        self.flow.matvec(&self.grad_p(zeta, layer))
    }

    /// Control input and plant output at a state.
    pub fn io_at(&self, zeta: &[f64], layer: usize) -> (Vec<f64>, Vec<f64>) {
        let (x, xi) = self.split(zeta);
        let theta = self.controller.theta_clamped(layer);
        let gxi = self
            .controller
            .energy()
            .gradient(xi, theta)
            .expect("dims fixed at assembly");
        let mut u = self.controller.k_gain().t_matvec(&gxi);
        for v in &mut u {
            *v = -*v;
        }
        let y = self.plant.output(x);
        (u, y)
    }

    /// One forward-Euler layer.
    pub fn step_fe(&self, zeta: &[f64], layer: usize, h: f64) -> Result<Vec<f64>, SimError> {
        let f = self.vector_field(zeta, layer);
        let next: Vec<f64> = zeta.iter().zip(&f).map(|(z, d)| z + h * d).collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(SimError::Diverged { step: 0 });
        }
        Ok(next)
    }

    /// Jacobian of the forward-Euler layer map: I + h (Psi - S) HessP.
    pub fn layer_jacobian(&self, zeta: &[f64], layer: usize, h: f64) -> BlockMatrix {
        let hess = self.hess_p(zeta, layer);
        let mut jac = self.flow.matmul(&hess).scale(h);
        for i in 0..jac.rows() {
            let v = jac.get(i, i);
            jac.set(i, i, v + 1.0);
        }
        jac
    }

    fn rk5_step(&self, zeta: &[f64], layer: usize, h: f64) -> Vec<f64> {
        rk5_step_generic(zeta, h, |z| self.vector_field(z, layer))
    }

    /// Rolls the closed loop forward for `n` steps of size `h`. Layer
    /// parameters are piecewise constant per step; beyond the schedule (or
    /// `freeze_after`) they hold their final value.
    pub fn integrate(
        &self,
        zeta0: &[f64],
        n: usize,
        h: f64,
        method: Method,
        freeze_after: Option<usize>,
    ) -> Result<Trajectory, SimError> {
        assert!(n >= 1, "need at least one step");
        assert!(h > 0.0, "step size must be positive");
        if zeta0.len() != self.dim() {
            return Err(SimError::DimensionMismatch(format!(
                "initial state has length {}, expected {}",
                zeta0.len(),
                self.dim()
            )));
        }
        let mut states = Vec::with_capacity(n + 1);
        let mut inputs = Vec::with_capacity(n + 1);
        let mut outputs = Vec::with_capacity(n + 1);
        let mut theta_indices = Vec::with_capacity(n + 1);
        states.push(zeta0.to_vec());
        for k in 0..n {
            let layer = self.effective_layer(k, freeze_after);
            let (u, y) = self.io_at(&states[k], layer);
            inputs.push(u);
            outputs.push(y);
            theta_indices.push(layer);
            let next = match method {
                Method::ForwardEuler => self.step_fe(&states[k], layer, h),
                Method::RungeKutta5 => {
                    let z = self.rk5_step(&states[k], layer, h);
                    if z.iter().any(|v| !v.is_finite()) {
                        Err(SimError::Diverged { step: k })
                    } else {
                        Ok(z)
                    }
                }
            };
            let next = next.map_err(|e| match e {
                SimError::Diverged { .. } => SimError::Diverged { step: k },
                other => other,
            })?;
            states.push(next);
        }
        let layer = self.effective_layer(n, freeze_after);
        let (u, y) = self.io_at(&states[n], layer);
        inputs.push(u);
        outputs.push(y);
        theta_indices.push(layer);
        Ok(Trajectory {
            h,
            states,
            inputs,
            outputs,
            theta_indices,
        })
    }
}

/// Fifth-order Dormand-Prince stage formula at a fixed step.
pub fn rk5_step_generic<F>(state: &[f64], h: f64, f: F) -> Vec<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    const A: [[f64; 5]; 5] = [
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0],
        [
            19372.0 / 6561.0,
            -25360.0 / 2187.0,
            64448.0 / 6561.0,
            -212.0 / 729.0,
            0.0,
        ],
        [
            9017.0 / 3168.0,
            -355.0 / 33.0,
            46732.0 / 5247.0,
            49.0 / 176.0,
            -5103.0 / 18656.0,
        ],
    ];
    const B: [f64; 6] = [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ];
    let dim = state.len();
    let mut stages: Vec<Vec<f64>> = Vec::with_capacity(6);
    stages.push(f(state));
    for s in 0..5 {
        let mut arg = state.to_vec();
        for (j, stage) in stages.iter().enumerate() {
            let c = A[s][j];
            if c != 0.0 {
                for i in 0..dim {
                    arg[i] += h * c * stage[i];
                }
            }
        }
        stages.push(f(&arg));
    }
    let mut next = state.to_vec();
    for (j, stage) in stages.iter().enumerate() {
        if B[j] != 0.0 {
            for i in 0..dim {
                next[i] += h * B[j] * stage[i];
            }
        }
    }
    next
}

/// Open-loop rollout of a plant with u = 0.
pub fn integrate_open(
    plant: &PHNetwork,
    x0: &[f64],
    n: usize,
    h: f64,
    method: Method,
) -> Result<Trajectory, SimError> {
    assert!(n >= 1 && h > 0.0);
    if x0.len() != plant.state_dim() {
        return Err(SimError::DimensionMismatch(format!(
            "initial state has length {}, expected {}",
            x0.len(),
            plant.state_dim()
        )));
    }
    let u0 = vec![0.0; plant.input_dim()];
    let field = |x: &[f64]| plant.dynamics(x, &u0);
    let mut states = vec![x0.to_vec()];
    let mut outputs = vec![plant.output(x0)];
    for k in 0..n {
        let next = match method {
            Method::ForwardEuler => {
                let f = field(&states[k]);
                states[k].iter().zip(&f).map(|(z, d)| z + h * d).collect()
            }
            Method::RungeKutta5 => rk5_step_generic(&states[k], h, field),
        };
        let next: Vec<f64> = next;
        if next.iter().any(|v: &f64| !v.is_finite()) {
            return Err(SimError::Diverged { step: k });
        }
        outputs.push(plant.output(&next));
        states.push(next);
    }
    let inputs = vec![u0; n + 1];
    Ok(Trajectory {
        h,
        states,
        inputs,
        outputs,
        theta_indices: vec![0; n + 1],
    })
}

/// Plant in feedback with the static MLP policy: u = mlp(y).
#[derive(Debug, Clone)]
pub struct MlpLoop {
    plant: PHNetwork,
    policy: MlpPolicy,
}

impl MlpLoop {
    pub fn assemble(plant: PHNetwork, policy: MlpPolicy) -> Result<Self, SimError> {
        if plant.input_dim() != policy.out_dim_total()
            || plant.input_dim() != policy.in_dim_total()
        {
            return Err(SimError::DimensionMismatch(format!(
                "plant has {} ports, policy maps {} -> {}",
                plant.input_dim(),
                policy.in_dim_total(),
                policy.out_dim_total()
            )));
        }
        Ok(MlpLoop { plant, policy })
    }

    pub fn plant(&self) -> &PHNetwork {
        &self.plant
    }

    pub fn policy(&self) -> &MlpPolicy {
        &self.policy
    }

    pub fn vector_field(&self, x: &[f64]) -> Vec<f64> {
        let y = self.plant.output(x);
        let u = self.policy.forward(&y);
        self.plant.dynamics(x, &u)
    }

    pub fn integrate(
        &self,
        x0: &[f64],
        n: usize,
        h: f64,
        method: Method,
    ) -> Result<Trajectory, SimError> {
        assert!(n >= 1 && h > 0.0);
        if x0.len() != self.plant.state_dim() {
            return Err(SimError::DimensionMismatch(format!(
                "initial state has length {}, expected {}",
                x0.len(),
                self.plant.state_dim()
            )));
        }
        let mut states = vec![x0.to_vec()];
        let mut inputs = Vec::with_capacity(n + 1);
        let mut outputs = Vec::with_capacity(n + 1);
        for k in 0..n {
            let y = self.plant.output(&states[k]);
            let u = self.policy.forward(&y);
            let next = match method {
                Method::ForwardEuler => {
                    let f = self.plant.dynamics(&states[k], &u);
                    states[k].iter().zip(&f).map(|(z, d)| z + h * d).collect()
                }
                Method::RungeKutta5 => rk5_step_generic(&states[k], h, |x| self.vector_field(x)),
            };
            let next: Vec<f64> = next;
            inputs.push(u);
            outputs.push(y);
            if next.iter().any(|v: &f64| !v.is_finite()) {
                return Err(SimError::Diverged { step: k });
            }
            states.push(next);
        }
        let y = self.plant.output(&states[n]);
        inputs.push(self.policy.forward(&y));
        outputs.push(y);
        Ok(Trajectory {
            h,
            states,
            inputs,
            outputs,
            theta_indices: vec![0; n + 1],
        })
    }
}

/// Writes a robot-fleet trajectory as CSV, one row per (step, node):
/// `t,node,px,py,qx,qy,ux,uy,xi1..xi4`. Decimal formatting uses 17
/// significant digits so values round-trip bit-exactly.
pub fn write_robot_csv<W: Write>(
    traj: &Trajectory,
    n_nodes: usize,
    xi_per_node: usize,
    mut w: W,
) -> std::io::Result<()> {
    let mut header = String::from("t,node,px,py,qx,qy,ux,uy");
    for i in 1..=xi_per_node {
        header.push_str(&format!(",xi{i}"));
    }
    writeln!(w, "{header}")?;
    let n_x = 4 * n_nodes;
    for k in 0..traj.states.len() {
        let z = &traj.states[k];
        let u = &traj.inputs[k];
        for node in 0..n_nodes {
            let s = &z[4 * node..4 * node + 4];
            let un = &u[2 * node..2 * node + 2];
            let mut row = format!(
                "{},{},{},{},{},{},{},{}",
                fmt17(traj.time(k)),
                node,
                fmt17(s[0]),
                fmt17(s[1]),
                fmt17(s[2]),
                fmt17(s[3]),
                fmt17(un[0]),
                fmt17(un[1]),
            );
            for j in 0..xi_per_node {
                let v = if z.len() > n_x {
                    z[n_x + xi_per_node * node + j]
                } else {
                    0.0
                };
                row.push_str(&format!(",{}", fmt17(v)));
            }
            writeln!(w, "{row}")?;
        }
    }
    Ok(())
}

pub(crate) fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}
