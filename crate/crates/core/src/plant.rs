//! Networked port-Hamiltonian plant dynamics and the point-mass robot fleet
//! used by the formation benchmark.
//!
//! A network of M coupled subsystems evolves as
//!
//! ```text
//!   x'(t) = (Omega + F G - R) dV/dx + G^T u(t)
//!   y(t)  = G dV/dx
//! ```
//!
//! with block-diagonal skew `Omega`, block-diagonal PSD dissipation `R`,
//! coupling `F` sparse on the dynamics graph with zero diagonal blocks,
//! block-diagonal port matrix `G`, and separable energy V = sum_i V_i.

use crate::blocklin::BlockMatrix;
use crate::graph::{self, BlockPattern, Graph};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlantError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("interconnection structure invalid: {0}")]
    Structure(String),
    #[error("invalid physical parameter: {0}")]
    InvalidParameter(String),
}

type ValueFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type GradFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
type HessFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Per-node energy function V_i with derivative evaluators.
#[derive(Clone)]
pub enum NodeEnergy {
    /// V_i(x) = (x - target)^T U (x - target), U symmetric PSD.
    Quadratic { target: Vec<f64>, weight: Vec<f64> },
    /// User-supplied value/gradient and optional Hessian; when the Hessian
    /// is absent it falls back to central differences of the gradient.
    Custom {
        dim: usize,
        value: ValueFn,
        gradient: GradFn,
        hessian: Option<HessFn>,
    },
}

impl std::fmt::Debug for NodeEnergy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NodeEnergy::Quadratic { target, .. } => {
                write!(f, "Quadratic(dim={})", target.len())
            }
            NodeEnergy::Custom { dim, .. } => write!(f, "Custom(dim={dim})"),
        }
    }
}

impl NodeEnergy {
    pub fn dim(&self) -> usize {
        match self {
            NodeEnergy::Quadratic { target, .. } => target.len(),
            NodeEnergy::Custom { dim, .. } => *dim,
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            NodeEnergy::Quadratic { target, weight } => {
                let n = target.len();
                let mut acc = 0.0;
                for r in 0..n {
                    let mut row = 0.0;
                    for c in 0..n {
                        row += weight[r * n + c] * (x[c] - target[c]);
                    }
                    acc += (x[r] - target[r]) * row;
                }
                acc
            }
            NodeEnergy::Custom { value, .. } => value(x),
        }
    }

    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        match self {
            NodeEnergy::Quadratic { target, weight } => {
                let n = target.len();
                for r in 0..n {
                    let mut acc = 0.0;
                    for c in 0..n {
                        acc += weight[r * n + c] * (x[c] - target[c]);
                    }
                    out[r] = 2.0 * acc;
                }
            }
            NodeEnergy::Custom { gradient, .. } => gradient(x, out),
        }
    }

    /// Dense n x n Hessian, row-major.
    pub fn hessian(&self, x: &[f64], out: &mut [f64]) {
        match self {
            NodeEnergy::Quadratic { weight, .. } => {
                for (o, w) in out.iter_mut().zip(weight) {
                    *o = 2.0 * w;
                }
            }
            NodeEnergy::Custom {
                dim,
                gradient,
                hessian,
                ..
            } => {
                if let Some(h) = hessian {
                    h(x, out);
                } else {
                    // central differences of the gradient
                    let n = *dim;
                    let step = 1e-5;
                    let mut xp = x.to_vec();
                    let mut gp = vec![0.0; n];
                    let mut gm = vec![0.0; n];
                    for c in 0..n {
                        xp[c] = x[c] + step;
                        gradient(&xp, &mut gp);
                        xp[c] = x[c] - step;
                        gradient(&xp, &mut gm);
                        xp[c] = x[c];
                        for r in 0..n {
                            out[r * n + c] = (gp[r] - gm[r]) / (2.0 * step);
                        }
                    }
                }
            }
        }
    }
}

/// Networked port-Hamiltonian plant.
#[derive(Debug, Clone)]
pub struct PHNetwork {
    state_dims: Vec<usize>,
    input_dims: Vec<usize>,
    output_dims: Vec<usize>,
    omega: BlockMatrix,
    rdiss: BlockMatrix,
    coupling: BlockMatrix,
    port: BlockMatrix,
    energies: Vec<NodeEnergy>,
    dynamics_graph: Graph,
    /// (offset into the stacked state, length) of the planar position of
    /// each node, when the model has one.
    position_slices: Option<Vec<(usize, usize)>>,
    /// x' = (Omega + F G - R) dV/dx, precomputed.
    flow: BlockMatrix,
}

impl PHNetwork {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        state_dims: Vec<usize>,
        input_dims: Vec<usize>,
        omega: BlockMatrix,
        rdiss: BlockMatrix,
        coupling: BlockMatrix,
        port: BlockMatrix,
        energies: Vec<NodeEnergy>,
        dynamics_graph: Graph,
        position_slices: Option<Vec<(usize, usize)>>,
    ) -> Result<Self, PlantError> {
        let m = state_dims.len();
        let n_total: usize = state_dims.iter().sum();
        if input_dims.len() != m || energies.len() != m || dynamics_graph.node_count() != m {
            return Err(PlantError::DimensionMismatch(format!(
                "expected {m} nodes across all fields"
            )));
        }
        for (i, e) in energies.iter().enumerate() {
            if e.dim() != state_dims[i] {
                return Err(PlantError::DimensionMismatch(format!(
                    "energy {i} has dim {} but state dim is {}",
                    e.dim(),
                    state_dims[i]
                )));
            }
        }
        if omega.rows() != n_total || rdiss.rows() != n_total {
            return Err(PlantError::DimensionMismatch(
                "structure matrices must match total state dim".into(),
            ));
        }
        if omega.skewness_error() != 0.0 {
            return Err(PlantError::Structure("Omega must be skew-symmetric".into()));
        }
        if rdiss.symmetry_error() > 1e-12 {
            return Err(PlantError::Structure("R must be symmetric".into()));
        }
        // m_i = p_i port matching: outputs mirror inputs
        let output_dims = input_dims.clone();
        let p_total: usize = input_dims.iter().sum();
        if port.rows() != p_total || port.cols() != n_total {
            return Err(PlantError::DimensionMismatch(format!(
                "port matrix is {}x{}, expected {}x{}",
                port.rows(),
                port.cols(),
                p_total,
                n_total
            )));
        }
        if coupling.rows() != n_total || coupling.cols() != p_total {
            return Err(PlantError::DimensionMismatch(format!(
                "coupling matrix is {}x{}, expected {}x{}",
                coupling.rows(),
                coupling.cols(),
                n_total,
                p_total
            )));
        }
        for i in 0..m {
            if coupling.block(i, i).iter().any(|&v| v != 0.0) {
                return Err(PlantError::Structure(format!(
                    "coupling diagonal block {i} must be zero"
                )));
            }
        }
        let sd_pattern = BlockPattern::from_power(
            &dynamics_graph,
            1,
            state_dims.clone(),
            input_dims.clone(),
        )
        .map_err(|e| PlantError::Structure(e.to_string()))?;
        if !graph::conforms(&coupling, &sd_pattern)
            .map_err(|e| PlantError::Structure(e.to_string()))?
        {
            return Err(PlantError::Structure(
                "coupling must be sparse on the dynamics graph".into(),
            ));
        }
        let flow = omega.add(&coupling.matmul(&port)).sub(&rdiss);
        Ok(PHNetwork {
            state_dims,
            input_dims,
            output_dims,
            omega,
            rdiss,
            coupling,
            port,
            energies,
            dynamics_graph,
            position_slices,
            flow,
        })
    }

    pub fn node_count(&self) -> usize {
        self.state_dims.len()
    }

    pub fn state_dims(&self) -> &[usize] {
        &self.state_dims
    }

    pub fn input_dims(&self) -> &[usize] {
        &self.input_dims
    }

    pub fn output_dims(&self) -> &[usize] {
        &self.output_dims
    }

    pub fn state_dim(&self) -> usize {
        self.state_dims.iter().sum()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dims.iter().sum()
    }

    pub fn omega(&self) -> &BlockMatrix {
        &self.omega
    }

    pub fn rdiss(&self) -> &BlockMatrix {
        &self.rdiss
    }

    pub fn coupling(&self) -> &BlockMatrix {
        &self.coupling
    }

    pub fn port(&self) -> &BlockMatrix {
        &self.port
    }

    pub fn dynamics_graph(&self) -> &Graph {
        &self.dynamics_graph
    }

    pub fn position_slices(&self) -> Option<&[(usize, usize)]> {
        self.position_slices.as_deref()
    }

    /// Omega + F G - R.
    pub fn flow(&self) -> &BlockMatrix {
        &self.flow
    }

    /// Stacked target state when every node energy is quadratic.
    pub fn target_state(&self) -> Option<Vec<f64>> {
        let mut out = Vec::with_capacity(self.state_dim());
        for e in &self.energies {
            match e {
                NodeEnergy::Quadratic { target, .. } => out.extend_from_slice(target),
                NodeEnergy::Custom { .. } => return None,
            }
        }
        Some(out)
    }

    /// Either a node slice range or panic; internal helper.
    fn node_ranges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.state_dims.len());
        let mut off = 0;
        for &d in &self.state_dims {
            out.push((off, d));
            off += d;
        }
        out
    }

    pub fn energy(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.state_dim());
        let mut acc = 0.0;
        for ((off, d), e) in self.node_ranges().into_iter().zip(&self.energies) {
            acc += e.value(&x[off..off + d]);
        }
        acc
    }

    /// Concatenation of the per-node energy gradients dV_i/dx_i.
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.state_dim(), "state dimension mismatch");
        let mut out = vec![0.0; x.len()];
        for ((off, d), e) in self.node_ranges().into_iter().zip(&self.energies) {
            e.gradient(&x[off..off + d], &mut out[off..off + d]);
        }
        out
    }

    /// Block-diagonal Hessian of V at x.
    pub fn hessian_blockdiag(&self, x: &[f64]) -> BlockMatrix {
        let mut out = BlockMatrix::zeros(self.state_dims.clone(), self.state_dims.clone());
        let mut buf = Vec::new();
        for (i, ((off, d), e)) in self.node_ranges().into_iter().zip(&self.energies).enumerate() {
            buf.clear();
            buf.resize(d * d, 0.0);
            e.hessian(&x[off..off + d], &mut buf);
            out.set_block(i, i, &buf);
        }
        out
    }

    /// x' = (Omega + F G - R) dV/dx + G^T u.
    pub fn dynamics(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        assert_eq!(u.len(), self.input_dim(), "input dimension mismatch");
        let g = self.gradient(x);
        let mut dx = self.flow.matvec(&g);
        let gtu = self.port.t_matvec(u);
        for (a, b) in dx.iter_mut().zip(&gtu) {
            *a += b;
        }
        dx
    }

    /// y = G dV/dx.
    pub fn output(&self, x: &[f64]) -> Vec<f64> {
        self.port.matvec(&self.gradient(x))
    }

    /// True iff F G is skew-symmetric to machine precision and sparse on
    /// the dynamics graph; the interconnection then exchanges energy
    /// without creating it.
    pub fn check_power_preserving(&self) -> bool {
        let fg = self.coupling.matmul(&self.port);
        if fg.skewness_error() > 1e-12 {
            return false;
        }
        let pattern = BlockPattern::from_power(
            &self.dynamics_graph,
            1,
            self.state_dims.clone(),
            self.state_dims.clone(),
        )
        .expect("dims validated at construction");
        graph::conforms(&fg, &pattern).expect("dims validated at construction")
    }
}

/// Parameters of the planar point-mass fleet. Each robot carries a local
/// guidance law (spring toward its target plus damping on the momentum) and
/// accepts a force input.
#[derive(Debug, Clone)]
pub struct RobotFleet {
    pub count: usize,
    pub masses: Vec<f64>,
    pub springs: Vec<f64>,
    pub dampings: Vec<f64>,
    /// Target positions (x, y) per robot.
    pub targets: Vec<[f64; 2]>,
    /// Initial positions (x, y) per robot; initial momenta are zero.
    pub initials: Vec<[f64; 2]>,
}

impl RobotFleet {
    /// Default fleet: robots evenly spaced on a circle of radius 2, targets
    /// at the antipodal points, m = k = 1, b = 0.2.
    pub fn evenly_spaced(count: usize) -> Self {
        let initials: Vec<[f64; 2]> = (0..count)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / count as f64;
                [2.0 * a.cos(), 2.0 * a.sin()]
            })
            .collect();
        let targets = initials.iter().map(|p| [-p[0], -p[1]]).collect();
        RobotFleet {
            count,
            masses: vec![1.0; count],
            springs: vec![1.0; count],
            dampings: vec![0.2; count],
            targets,
            initials,
        }
    }

    /// Variant without damping, used by the non-vanishing-sensitivity checks.
    pub fn lossless(mut self) -> Self {
        self.dampings = vec![0.0; self.count];
        self
    }
}

/// Builds the point-mass fleet as a pH network. Per-node state ordering is
/// (p_x, p_y, q_x, q_y); the port matrix injects forces into the momentum
/// rows and reads velocities out. Returns the network and the stacked
/// initial state.
pub fn robot_benchmark(fleet: &RobotFleet) -> Result<(PHNetwork, Vec<f64>), PlantError> {
    let m = fleet.count;
    if m < 2 {
        return Err(PlantError::InvalidParameter(
            "fleet needs at least 2 robots".into(),
        ));
    }
    for (name, list) in [
        ("masses", &fleet.masses),
        ("springs", &fleet.springs),
        ("dampings", &fleet.dampings),
    ] {
        if list.len() != m {
            return Err(PlantError::InvalidParameter(format!(
                "{name} has length {}, expected {m}",
                list.len()
            )));
        }
    }
    if fleet.targets.len() != m || fleet.initials.len() != m {
        return Err(PlantError::InvalidParameter(
            "targets/initials must have one entry per robot".into(),
        ));
    }
    if fleet.masses.iter().any(|&v| v <= 0.0) {
        return Err(PlantError::InvalidParameter("masses must be > 0".into()));
    }
    if fleet.springs.iter().any(|&v| v < 0.0) || fleet.dampings.iter().any(|&v| v < 0.0) {
        return Err(PlantError::InvalidParameter(
            "springs and dampings must be >= 0".into(),
        ));
    }

    let state_dims = vec![4usize; m];
    let input_dims = vec![2usize; m];

    let mut omega = BlockMatrix::zeros(state_dims.clone(), state_dims.clone());
    let mut rdiss = BlockMatrix::zeros(state_dims.clone(), state_dims.clone());
    let mut port = BlockMatrix::zeros(input_dims.clone(), state_dims.clone());
    let mut energies = Vec::with_capacity(m);
    let mut x0 = Vec::with_capacity(4 * m);
    let mut positions = Vec::with_capacity(m);

    #[rustfmt::skip]
    let omega_i = [
        0.0, 0.0, -1.0,  0.0,
        0.0, 0.0,  0.0, -1.0,
        1.0, 0.0,  0.0,  0.0,
        0.0, 1.0,  0.0,  0.0,
    ];
    for i in 0..m {
        omega.set_block(i, i, &omega_i);
        let b = fleet.dampings[i];
        #[rustfmt::skip]
        rdiss.set_block(i, i, &[
            b, 0.0, 0.0, 0.0,
            0.0, b, 0.0, 0.0,
            0.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 0.0, 0.0,
        ]);
        #[rustfmt::skip]
        port.set_block(i, i, &[
            1.0, 0.0, 0.0, 0.0,
            0.0, 1.0, 0.0, 0.0,
        ]);
        // V_i = (1/2m)|p|^2 + (k/2)|q - q_target|^2 as a quadratic form
        let inv2m = 1.0 / (2.0 * fleet.masses[i]);
        let half_k = 0.5 * fleet.springs[i];
        #[rustfmt::skip]
        let weight = vec![
            inv2m, 0.0, 0.0, 0.0,
            0.0, inv2m, 0.0, 0.0,
            0.0, 0.0, half_k, 0.0,
            0.0, 0.0, 0.0, half_k,
        ];
        let target = vec![0.0, 0.0, fleet.targets[i][0], fleet.targets[i][1]];
        energies.push(NodeEnergy::Quadratic { target, weight });
        x0.extend_from_slice(&[0.0, 0.0, fleet.initials[i][0], fleet.initials[i][1]]);
        positions.push((4 * i + 2, 2));
    }

    let coupling = BlockMatrix::zeros(state_dims.clone(), input_dims.clone());
    let net = PHNetwork::new(
        state_dims,
        input_dims,
        omega,
        rdiss,
        coupling,
        port,
        energies,
        Graph::disconnected(m),
        Some(positions),
    )?;
    Ok((net, x0))
}

/// Two identical nodes chained through a power-preserving coupling; used in
/// tests of the compositional energy argument.
pub fn two_node_power_preserving_chain(damping: f64) -> Result<(PHNetwork, Vec<f64>), PlantError> {
    let fleet = RobotFleet {
        count: 2,
        masses: vec![1.0; 2],
        springs: vec![1.0; 2],
        dampings: vec![damping; 2],
        targets: vec![[1.0, 0.0], [-1.0, 0.0]],
        initials: vec![[0.0, 1.0], [0.0, -1.0]],
    };
    let (base, x0) = robot_benchmark(&fleet)?;
    // F12 = G^T, F21 = -G^T with identical per-node ports makes F G skew.
    let g_block = base.port().block(0, 0);
    let mut f12 = vec![0.0; 4 * 2];
    let mut f21 = vec![0.0; 4 * 2];
    for r in 0..4 {
        for c in 0..2 {
            // transpose of the 2x4 port block
            f12[r * 2 + c] = g_block[c * 4 + r];
            f21[r * 2 + c] = -g_block[c * 4 + r];
        }
    }
    let mut coupling = BlockMatrix::zeros(vec![4, 4], vec![2, 2]);
    coupling.set_block(0, 1, &f12);
    coupling.set_block(1, 0, &f21);
    let net = PHNetwork::new(
        base.state_dims().to_vec(),
        base.input_dims().to_vec(),
        base.omega().clone(),
        base.rdiss().clone(),
        coupling,
        base.port().clone(),
        vec![
            NodeEnergy::Quadratic {
                target: vec![0.0, 0.0, 1.0, 0.0],
                weight: quad_weight(1.0, 1.0),
            },
            NodeEnergy::Quadratic {
                target: vec![0.0, 0.0, -1.0, 0.0],
                weight: quad_weight(1.0, 1.0),
            },
        ],
        Graph::complete(2),
        None,
    )?;
    Ok((net, x0))
}

fn quad_weight(mass: f64, spring: f64) -> Vec<f64> {
    let inv2m = 1.0 / (2.0 * mass);
    let half_k = 0.5 * spring;
    #[rustfmt::skip]
    let w = vec![
        inv2m, 0.0, 0.0, 0.0,
        0.0, inv2m, 0.0, 0.0,
        0.0, 0.0, half_k, 0.0,
        0.0, 0.0, 0.0, half_k,
    ];
    w
}

/// A single undamped unit mass-spring node with state (p, q); period 2*pi.
/// Handy as an analytic test system.
pub fn lossless_oscillator() -> (PHNetwork, Vec<f64>) {
    let omega = BlockMatrix::single(2, 2, vec![0.0, -1.0, 1.0, 0.0]);
    let rdiss = BlockMatrix::zeros(vec![2], vec![2]);
    let port = BlockMatrix::from_data(vec![1], vec![2], vec![1.0, 0.0]);
    let coupling = BlockMatrix::zeros(vec![2], vec![1]);
    let energy = NodeEnergy::Quadratic {
        target: vec![0.0, 0.0],
        weight: vec![0.5, 0.0, 0.0, 0.5],
    };
    let net = PHNetwork::new(
        vec![2],
        vec![1],
        omega,
        rdiss,
        coupling,
        port,
        vec![energy],
        Graph::disconnected(1),
        None,
    )
    .expect("static parameters");
    (net, vec![1.0, 0.0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_robot() -> (PHNetwork, Vec<f64>) {
        let fleet = RobotFleet {
            count: 2,
            masses: vec![1.0, 1.0],
            springs: vec![1.0, 1.0],
            dampings: vec![0.2, 0.2],
            targets: vec![[0.0, 0.0], [5.0, 5.0]],
            initials: vec![[0.0, 0.0], [5.0, 5.0]],
        };
        robot_benchmark(&fleet).unwrap()
    }

    #[test]
    fn gradient_zero_at_target() {
        let (net, _) = single_robot();
        let xbar = net.target_state().unwrap();
        let g = net.gradient(&xbar);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_momentum_unit() {
        // m = 1, k = 1, x = (1,0,0,0) relative to zero target: dV = (1,0,0,0)
        let (net, _) = single_robot();
        let mut x = net.target_state().unwrap();
        x[0] = 1.0;
        let g = net.gradient(&x);
        assert_eq!(&g[0..4], &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let (net, _) = single_robot();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let step = 1e-6;
        for _ in 0..100 {
            let x: Vec<f64> = (0..net.state_dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
            let g = net.gradient(&x);
            for i in 0..x.len() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += step;
                xm[i] -= step;
                let fd = (net.energy(&xp) - net.energy(&xm)) / (2.0 * step);
                let denom = g[i].abs().max(1.0);
                assert!(
                    (g[i] - fd).abs() / denom < 1e-7,
                    "i={i} analytic={} fd={fd}",
                    g[i]
                );
            }
        }
    }

    #[test]
    fn dynamics_equilibrium_is_stationary() {
        let (net, _) = single_robot();
        let xbar = net.target_state().unwrap();
        let u = vec![0.0; net.input_dim()];
        let dx = net.dynamics(&xbar, &u);
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dynamics_damped_momentum() {
        // x = (1,0,0,0) relative to target, u = 0:
        // p' = -dV/dq - b dV/dp = -0.2, q' = dV/dp = 1
        let (net, _) = single_robot();
        let mut x = net.target_state().unwrap();
        x[0] = 1.0;
        let dx = net.dynamics(&x, &vec![0.0; net.input_dim()]);
        let expect = [-0.2, 0.0, 1.0, 0.0];
        for (a, b) in dx[0..4].iter().zip(expect) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn dynamics_force_enters_momentum_rows() {
        let (net, _) = single_robot();
        let xbar = net.target_state().unwrap();
        let mut u = vec![0.0; net.input_dim()];
        u[0] = 1.0;
        let dx = net.dynamics(&xbar, &u);
        assert_eq!(&dx[0..4], &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn output_is_velocity() {
        let (net, _) = single_robot();
        let mut x = net.target_state().unwrap();
        x[0] = 2.0;
        let y = net.output(&x);
        assert_eq!(&y[0..2], &[2.0, 0.0]);
    }

    #[test]
    fn output_scales_with_mass() {
        let fleet = RobotFleet {
            count: 2,
            masses: vec![2.0, 2.0],
            springs: vec![1.0; 2],
            dampings: vec![0.0; 2],
            targets: vec![[0.0, 0.0]; 2],
            initials: vec![[0.0, 0.0]; 2],
        };
        let (net, _) = robot_benchmark(&fleet).unwrap();
        let mut x = vec![0.0; net.state_dim()];
        x[0] = 2.0;
        let y = net.output(&x);
        assert!((y[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn benchmark_zero_coupling_is_power_preserving() {
        let (net, _) = robot_benchmark(&RobotFleet::evenly_spaced(12)).unwrap();
        assert!(net.check_power_preserving());
    }

    #[test]
    fn chained_ports_are_power_preserving() {
        let (net, _) = two_node_power_preserving_chain(0.2).unwrap();
        assert!(net.check_power_preserving());
        let fg = net.coupling().matmul(net.port());
        assert!(fg.max_abs() > 0.0);
    }

    #[test]
    fn symmetric_coupling_is_rejected_by_check() {
        // F12 = F21 = +G^T makes F G symmetric and nonzero
        let (base, _) = two_node_power_preserving_chain(0.2).unwrap();
        let g_block = base.port().block(0, 0);
        let mut f12 = vec![0.0; 8];
        for r in 0..4 {
            for c in 0..2 {
                f12[r * 2 + c] = g_block[c * 4 + r];
            }
        }
        let mut coupling = BlockMatrix::zeros(vec![4, 4], vec![2, 2]);
        coupling.set_block(0, 1, &f12);
        coupling.set_block(1, 0, &f12);
        let net = PHNetwork::new(
            base.state_dims().to_vec(),
            base.input_dims().to_vec(),
            base.omega().clone(),
            base.rdiss().clone(),
            coupling,
            base.port().clone(),
            vec![
                NodeEnergy::Quadratic {
                    target: vec![0.0; 4],
                    weight: quad_weight(1.0, 1.0),
                },
                NodeEnergy::Quadratic {
                    target: vec![0.0; 4],
                    weight: quad_weight(1.0, 1.0),
                },
            ],
            Graph::complete(2),
            None,
        )
        .unwrap();
        assert!(!net.check_power_preserving());
    }

    #[test]
    fn benchmark_rejects_bad_parameters() {
        let mut fleet = RobotFleet::evenly_spaced(4);
        fleet.masses[2] = 0.0;
        assert!(robot_benchmark(&fleet).is_err());
        let mut fleet = RobotFleet::evenly_spaced(4);
        fleet.dampings[0] = -0.1;
        assert!(robot_benchmark(&fleet).is_err());
        let fleet = RobotFleet::evenly_spaced(1);
        assert!(robot_benchmark(&fleet).is_err());
    }

    #[test]
    fn custom_energy_hessian_fallback() {
        let e = NodeEnergy::Custom {
            dim: 2,
            value: Arc::new(|x: &[f64]| x[0].powi(4) + x[0] * x[1] + x[1] * x[1]),
            gradient: Arc::new(|x: &[f64], out: &mut [f64]| {
                out[0] = 4.0 * x[0].powi(3) + x[1];
                out[1] = x[0] + 2.0 * x[1];
            }),
            hessian: None,
        };
        let mut h = vec![0.0; 4];
        e.hessian(&[0.5, -1.0], &mut h);
        // analytic: [[12 x^2, 1], [1, 2]]
        assert!((h[0] - 3.0).abs() < 1e-5);
        assert!((h[1] - 1.0).abs() < 1e-8);
        assert!((h[2] - 1.0).abs() < 1e-8);
        assert!((h[3] - 2.0).abs() < 1e-8);
    }
}
