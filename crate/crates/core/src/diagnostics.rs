//! Numerical certification of the structural guarantees: energy decay
//! under frozen parameters, non-vanishing backward sensitivities, the
//! conserved quadratic form of the lossless flow, information-radius
//! compliance, and collision counting.

use crate::blocklin::BlockMatrix;
use crate::graph;
use crate::simulate::{rk5_step_generic, ClosedLoop, Method, SimError, Trajectory};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiagError {
    #[error("trajectory diverged at step {0}")]
    Diverged(usize),
    #[error("check requires a lossless configuration (R = 0 and R_c = 0)")]
    NotLossless,
    #[error("check requires frozen (time-invariant) controller parameters")]
    NotFrozen,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BsmNorm {
    Spectral,
    Frobenius,
}

impl BsmNorm {
    fn apply(self, m: &BlockMatrix) -> f64 {
        match self {
            BsmNorm::Spectral => m.spectral_norm(),
            BsmNorm::Frobenius => m.frobenius(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BsmMode {
    /// The two families plotted in sensitivity studies: derivatives of the
    /// final state and of the midpoint state with respect to every earlier
    /// state.
    Families,
    /// Every pair (j, i) with i <= j; quadratic in the layer count.
    AllPairs,
}

/// Norms of the backward sensitivity matrices d(zeta_j)/d(zeta_i) along a
/// forward-Euler rollout. Entry (j, i) with i = j is the identity.
#[derive(Debug, Clone)]
pub struct BsmMap {
    pub n: usize,
    pub entries: Vec<BsmEntry>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct BsmEntry {
    pub j: usize,
    pub i: usize,
    pub norm: f64,
}

impl BsmMap {
    pub fn min_norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.norm)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn family(&self, j: usize) -> Vec<BsmEntry> {
        let mut v: Vec<BsmEntry> = self.entries.iter().copied().filter(|e| e.j == j).collect();
        v.sort_by_key(|e| e.i);
        v
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "j,i,norm")?;
        for e in &self.entries {
            writeln!(w, "{},{},{}", e.j, e.i, crate::simulate::fmt17(e.norm))?;
        }
        Ok(())
    }
}

/// Products of the forward-Euler layer Jacobians along a trajectory,
/// reduced to norms. Products accumulate left-to-right; at the benchmark
/// depth they stay well-conditioned without re-orthogonalization.
pub fn bsm_map(
    cl: &ClosedLoop,
    traj: &Trajectory,
    mode: BsmMode,
    norm: BsmNorm,
) -> Result<BsmMap, DiagError> {
    let n = traj.step_count();
    for (k, s) in traj.states.iter().enumerate() {
        if s.iter().any(|v| !v.is_finite()) {
            return Err(DiagError::Diverged(k));
        }
    }
    let jacobians: Vec<BlockMatrix> = (0..n)
        .map(|k| cl.layer_jacobian(&traj.states[k], traj.theta_indices[k], traj.h))
        .collect();
    let mut entries = Vec::new();
    match mode {
        BsmMode::Families => {
            for &j in &[n, n / 2] {
                entries.push(BsmEntry {
                    j,
                    i: j,
                    norm: 1.0,
                });
                // d zeta_j / d zeta_i = J_{j-1} ... J_i, grown rightward
                let mut prod = BlockMatrix::identity(jacobians[0].row_blocks().to_vec());
                for i in (0..j).rev() {
                    prod = prod.matmul(&jacobians[i]);
                    entries.push(BsmEntry {
                        j,
                        i,
                        norm: norm.apply(&prod),
                    });
                }
            }
        }
        BsmMode::AllPairs => {
            for i in 0..=n {
                entries.push(BsmEntry {
                    j: i,
                    i,
                    norm: 1.0,
                });
                let mut prod: Option<BlockMatrix> = None;
                for j in i + 1..=n {
                    let next = match &prod {
                        None => jacobians[j - 1].clone(),
                        Some(p) => jacobians[j - 1].matmul(p),
                    };
                    entries.push(BsmEntry {
                        j,
                        i,
                        norm: norm.apply(&next),
                    });
                    prod = Some(next);
                }
            }
        }
    }
    Ok(BsmMap { n, entries })
}

/// Maximum relative drift of Z^T Psi Z along the lossless flow, where Z is
/// the backward sensitivity of the final state. The variational equation
/// dZ/ds = -A(zeta(s))^T Z is co-integrated backward from the trajectory's
/// final state with the same fifth-order stepper, so the quantity would be
/// exactly constant in exact arithmetic.
pub fn check_conserved_form(cl: &ClosedLoop, traj: &Trajectory) -> Result<f64, DiagError> {
    if cl.s_matrix().max_abs() > 1e-14 {
        return Err(DiagError::NotLossless);
    }
    let dim = cl.dim();
    let n = traj.step_count();
    let psi = cl.psi();
    let psi_scale = psi.max_abs().max(1e-300);

    // augmented backward state: [zeta | Z columns]
    let mut aug = Vec::with_capacity(dim * (dim + 1));
    aug.extend_from_slice(traj.final_state());
    let eye = BlockMatrix::identity(vec![dim]);
    aug.extend_from_slice(eye.data());

    let field = |a: &[f64], layer: usize| -> Vec<f64> {
        let zeta = &a[..dim];
        let z = &a[dim..];
        let mut out = Vec::with_capacity(a.len());
        out.extend(cl.vector_field(zeta, layer));
        // dZ/ds = -(flow * HessP)^T Z = -HessP * flow^T * Z columnwise
        let hess = cl.hess_p(zeta, layer);
        for col in 0..dim {
            let zc: Vec<f64> = (0..dim).map(|r| z[r * dim + col]).collect();
            let t = cl.flow().t_matvec(&zc);
            let hz = hess.matvec(&t);
            out.extend(hz.iter().map(|v| -v));
        }
        // out currently column-major for the Z block; transpose into place
        let mut fixed = vec![0.0; a.len()];
        fixed[..dim].copy_from_slice(&out[..dim]);
        for col in 0..dim {
            for r in 0..dim {
                fixed[dim + r * dim + col] = out[dim + col * dim + r];
            }
        }
        fixed
    };

    let mut max_drift = 0.0f64;
    for back in 0..n {
        let k = n - back; // current time index, walking T -> 0
        let layer = traj.theta_indices[k.saturating_sub(1)];
        aug = rk5_step_generic(&aug, -traj.h, |a| field(a, layer));
        if aug.iter().any(|v| !v.is_finite()) {
            return Err(DiagError::Diverged(k));
        }
        let z = BlockMatrix::from_data(vec![dim], vec![dim], aug[dim..].to_vec());
        let zt_psi_z = z.transpose().matmul(psi).matmul(&z);
        let drift = zt_psi_z.sub(psi).max_abs() / psi_scale;
        max_drift = max_drift.max(drift);
    }
    Ok(max_drift)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct DissipationReport {
    pub monotone: bool,
    pub max_violation: f64,
    pub initial_energy: f64,
    pub final_energy: f64,
}

/// Evaluates P along a rollout with frozen parameters; an increase beyond
/// 1e-7 * (1 + |P|) per step counts as a violation. Refuses time-varying
/// schedules, for which no decay statement holds.
pub fn check_dissipation(
    cl: &ClosedLoop,
    zeta0: &[f64],
    n: usize,
    h: f64,
    method: Method,
) -> Result<DissipationReport, DiagError> {
    if cl.controller().schedule().layer_count() != 1 {
        return Err(DiagError::NotFrozen);
    }
    let traj = cl.integrate(zeta0, n, h, method, None)?;
    Ok(dissipation_along(cl, &traj))
}

/// The monotonicity scan itself, usable on any precomputed rollout with an
/// effectively constant schedule.
pub fn dissipation_along(cl: &ClosedLoop, traj: &Trajectory) -> DissipationReport {
    let mut prev = cl.total_energy(&traj.states[0], traj.theta_indices[0]);
    let initial_energy = prev;
    let mut monotone = true;
    let mut max_violation = 0.0f64;
    let mut last = prev;
    for (k, s) in traj.states.iter().enumerate().skip(1) {
        let e = cl.total_energy(s, traj.theta_indices[k.min(traj.theta_indices.len() - 1)]);
        let allowed = 1e-7 * (1.0 + prev.abs());
        if e > prev + allowed {
            monotone = false;
            max_violation = max_violation.max(e - prev);
        }
        prev = e;
        last = e;
    }
    DissipationReport {
        monotone,
        max_violation,
        initial_energy,
        final_energy: last,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DistributedReport {
    pub l_y: usize,
    pub l_xi: usize,
    pub r_y: usize,
    pub r_xi: usize,
    pub radius_condition_ok: bool,
    pub static_masks_ok: bool,
    pub dynamic_y_ok: bool,
    pub dynamic_xi_ok: bool,
    pub max_y_response: f64,
    pub max_xi_response: f64,
    pub pass: bool,
}

/// Certifies that the controller is distributed with output measurement
/// radius `r_y` and communication radius `r_xi`.
///
/// Statically, J, R_c, K must conform to the pattern of the communication
/// graph raised to l_y and the radii must satisfy l_y <= R_y and
/// l_y + 2 l_xi <= R_xi. Dynamically, perturbing y_j (resp. xi_j) outside a
/// node's radius must leave that node's input and state derivative
/// unchanged to 1e-12, across random evaluation points.
pub fn verify_distributed(
    cl: &ClosedLoop,
    r_y: usize,
    r_xi: usize,
    trials: usize,
    seed: u64,
) -> DistributedReport {
    let controller = cl.controller();
    let (l_y, l_xi) = controller.radii();
    let radius_condition_ok = l_y <= r_y && l_y + 2 * l_xi <= r_xi;

    let g = controller.graph();
    let xi_dims = controller.xi_dims().to_vec();
    let meas_dims = controller.meas_dims().to_vec();
    let pattern_sq =
        graph::BlockPattern::from_power(g, l_y, xi_dims.clone(), xi_dims.clone()).expect("dims");
    let pattern_k =
        graph::BlockPattern::from_power(g, l_y, xi_dims.clone(), meas_dims.clone()).expect("dims");
    let static_masks_ok = graph::conforms(&controller.j_matrix(), &pattern_sq).unwrap_or(false)
        && graph::conforms(&controller.rc_matrix(), &pattern_sq).unwrap_or(false)
        && graph::conforms(controller.k_gain(), &pattern_k).unwrap_or(false);

    let m = g.node_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q_total = controller.xi_dim_total();
    let p_total = controller.meas_dim_total();
    let xi_off: Vec<usize> = (0..m).map(|i| xi_dims[..i].iter().sum()).collect();
    let y_off: Vec<usize> = (0..m).map(|i| meas_dims[..i].iter().sum()).collect();
    let u_off = y_off.clone(); // port matching: input dims mirror outputs

    let mut max_y_response = 0.0f64;
    let mut max_xi_response = 0.0f64;
    for _ in 0..trials.max(1) {
        let xi: Vec<f64> = (0..q_total).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..p_total).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u0 = controller.output(&xi, 0).expect("dims");
        let dxi0 = controller.dynamics(&xi, &y, 0).expect("dims");
        for i in 0..m {
            let ny = g.k_hop_neighbors(i, r_y).expect("index");
            let nxi = g.k_hop_neighbors(i, r_xi).expect("index");
            for j in 0..m {
                if !ny.contains(&j) {
                    let mut yp = y.clone();
                    for t in 0..meas_dims[j] {
                        yp[y_off[j] + t] += 0.75 + t as f64;
                    }
                    let dxi1 = controller.dynamics(&xi, &yp, 0).expect("dims");
                    // u does not read y at all, but scan it anyway
                    let u1 = controller.output(&xi, 0).expect("dims");
                    for t in 0..xi_dims[i] {
                        max_y_response = max_y_response
                            .max((dxi1[xi_off[i] + t] - dxi0[xi_off[i] + t]).abs());
                    }
                    for t in 0..meas_dims[i] {
                        max_y_response =
                            max_y_response.max((u1[u_off[i] + t] - u0[u_off[i] + t]).abs());
                    }
                }
                if !nxi.contains(&j) {
                    let mut xip = xi.clone();
                    for t in 0..xi_dims[j] {
                        xip[xi_off[j] + t] += 0.5 + t as f64;
                    }
                    let u1 = controller.output(&xip, 0).expect("dims");
                    let dxi1 = controller.dynamics(&xip, &y, 0).expect("dims");
                    for t in 0..meas_dims[i] {
                        max_xi_response =
                            max_xi_response.max((u1[u_off[i] + t] - u0[u_off[i] + t]).abs());
                    }
                    for t in 0..xi_dims[i] {
                        max_xi_response = max_xi_response
                            .max((dxi1[xi_off[i] + t] - dxi0[xi_off[i] + t]).abs());
                    }
                }
            }
        }
    }
    let dynamic_y_ok = max_y_response <= 1e-12;
    let dynamic_xi_ok = max_xi_response <= 1e-12;
    DistributedReport {
        l_y,
        l_xi,
        r_y,
        r_xi,
        radius_condition_ok,
        static_masks_ok,
        dynamic_y_ok,
        dynamic_xi_ok,
        max_y_response,
        max_xi_response,
        pass: radius_condition_ok && static_masks_ok && dynamic_y_ok && dynamic_xi_ok,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CollisionCount {
    /// Entries into the violation region: contiguous runs of the same pair
    /// below the safety distance count once.
    pub events: usize,
    /// Raw number of (step, pair) samples below the safety distance.
    pub step_pairs: usize,
}

/// Counts pairwise proximity violations (d < safety distance) along a
/// trajectory.
pub fn count_collisions(
    traj: &Trajectory,
    positions: &[(usize, usize)],
    safety_distance: f64,
) -> CollisionCount {
    let m = positions.len();
    let mut events = 0;
    let mut step_pairs = 0;
    let mut below = vec![false; m * m];
    for z in &traj.states {
        for i in 0..m {
            for j in i + 1..m {
                let dx = z[positions[i].0] - z[positions[j].0];
                let dy = z[positions[i].0 + 1] - z[positions[j].0 + 1];
                let d = (dx * dx + dy * dy).sqrt();
                let idx = i * m + j;
                if d < safety_distance {
                    step_pairs += 1;
                    if !below[idx] {
                        events += 1;
                        below[idx] = true;
                    }
                } else {
                    below[idx] = false;
                }
            }
        }
    }
    CollisionCount { events, step_pairs }
}
