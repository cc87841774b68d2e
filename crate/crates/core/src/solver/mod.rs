//! Distributed identification iterations.
//!
//! Both schemes share the dummy-variable dynamics
//! `z ← z − α(L ⊗ I + Û Ûᵀ) z` and differ only in how `x` follows the local
//! gradient `g_i = U_lift,iᵀ z_i`: a plain step (`baseline`) or an Adam step
//! with bias-corrected moments (`adam`). Every agent touches only its own
//! blocks and its neighbors' `z`.

mod run;

pub use run::{run, Outcome, Problem, RunOptions, RunOutput, RunTrace, TraceRecord};

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;

use crate::datamodel::LocalBlocks;
use crate::error::{Error, Result};
use crate::graph::{apply_expanded_laplacian, laplacian_sqrt, CommGraph};

/// Certificate safety margin (relative).
const CERTIFICATE_MARGIN: f64 = 1e-9;
/// Below this `β^k` the bias correction is taken as exactly 1.
const BIAS_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub x: DVector<f64>,
    pub z: DVector<f64>,
    pub s1: DVector<f64>,
    pub s2: DVector<f64>,
    pub k: u64,
}

impl AgentState {
    pub fn new(x: DVector<f64>, z: DVector<f64>) -> Self {
        let len = x.len();
        Self {
            x,
            z,
            s1: DVector::zeros(len),
            s2: DVector::zeros(len),
            k: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Baseline,
    Adam,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "adam" => Ok(Mode::Adam),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected baseline or adam)"
            ))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::Adam => "adam",
        })
    }
}

/// Step size, Adam decay rates, denominator floor and iteration budget.
/// `alpha` is also the baseline step size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub iters: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            epsilon: 1e-8,
            iters: 200_000,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Initial model blocks and slack. `w0 = None` means zero slack, in which
/// case `z(0)` is computed from agent-local data only.
#[derive(Debug, Clone, PartialEq)]
pub struct InitSpec {
    pub x0: Vec<DVector<f64>>,
    pub w0: Option<Vec<DVector<f64>>>,
}

impl InitSpec {
    pub fn zeros(blocks: &[LocalBlocks]) -> Self {
        Self {
            x0: blocks.iter().map(|b| DVector::zeros(b.x_len())).collect(),
            w0: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertificateConfig {
    pub mu: f64,
}

impl Default for CertificateConfig {
    fn default() -> Self {
        Self { mu: 1e-7 }
    }
}

/// Sets up every agent with `z(0) = Û x(0) − Ŷ − (L^{1/2} ⊗ I) w(0)`.
pub fn init_state(blocks: &[LocalBlocks], graph: &CommGraph, init: &InitSpec) -> Result<Vec<AgentState>> {
    if !graph.is_connected() {
        return Err(Error::Disconnected);
    }
    if blocks.len() != graph.n_nodes() || init.x0.len() != blocks.len() {
        return Err(Error::Dimension(format!(
            "{} agents, {} graph nodes, {} initial blocks",
            blocks.len(),
            graph.n_nodes(),
            init.x0.len()
        )));
    }
    for (b, x) in blocks.iter().zip(&init.x0) {
        if x.len() != b.x_len() {
            return Err(Error::Dimension(format!(
                "agent {} expects x of length {}, got {}",
                b.agent() + 1,
                b.x_len(),
                x.len()
            )));
        }
    }
    let mut states: Vec<AgentState> = blocks
        .iter()
        .zip(&init.x0)
        .map(|(b, x)| AgentState::new(x.clone(), b.residual(x.as_slice())))
        .collect();

    if let Some(w0) = &init.w0 {
        if w0.len() != blocks.len() || w0.iter().zip(blocks).any(|(w, b)| w.len() != b.z_len()) {
            return Err(Error::Dimension("w0 must have one n·T block per agent".into()));
        }
        let root = laplacian_sqrt(graph)?;
        for (i, state) in states.iter_mut().enumerate() {
            for (j, w) in w0.iter().enumerate() {
                let c = root[(i, j)];
                if c != 0.0 {
                    state.z.axpy(-c, w, 1.0);
                }
            }
        }
    }
    Ok(states)
}

/// Per-agent quantities evaluated at the current `z`.
pub(crate) struct LocalRound {
    /// `g_i = U_lift,iᵀ z_i`
    pub g: DVector<f64>,
    /// `(L ⊗ I) z` restricted to block i
    pub lz: DVector<f64>,
}

impl LocalRound {
    pub(crate) fn new(block: &LocalBlocks, z: &DVector<f64>, lz: DVector<f64>) -> Self {
        Self {
            g: block.adjoint(z.as_slice()),
            lz,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum XUpdate {
    Gradient { alpha: f64 },
    Adam(AdamConfig),
}

impl XUpdate {
    fn alpha(&self) -> f64 {
        match self {
            XUpdate::Gradient { alpha } => *alpha,
            XUpdate::Adam(c) => c.alpha,
        }
    }
}

fn bias_correction(beta: f64, k: u64) -> f64 {
    let p = if k > i32::MAX as u64 { 0.0 } else { beta.powi(k as i32) };
    if p < BIAS_FLOOR {
        1.0
    } else {
        1.0 - p
    }
}

/// Applies one synchronous update to a single agent.
pub(crate) fn advance_agent(
    state: &mut AgentState,
    block: &LocalBlocks,
    round: LocalRound,
    update: XUpdate,
) -> Result<()> {
    let alpha = update.alpha();
    let LocalRound { g, lz } = round;
    state.k += 1;
    match update {
        XUpdate::Gradient { alpha } => state.x.axpy(-alpha, &g, 1.0),
        XUpdate::Adam(c) => {
            let c1 = bias_correction(c.beta1, state.k);
            let c2 = bias_correction(c.beta2, state.k);
            for (((x, s1), s2), gj) in state
                .x
                .iter_mut()
                .zip(state.s1.iter_mut())
                .zip(state.s2.iter_mut())
                .zip(g.iter())
            {
                *s1 = c.beta1 * *s1 + (1.0 - c.beta1) * gj;
                *s2 = c.beta2 * *s2 + (1.0 - c.beta2) * (gj * gj);
                let m_hat = *s1 / c1;
                let v_hat = *s2 / c2;
                *x -= alpha * (m_hat / (v_hat.sqrt() + c.epsilon));
            }
        }
    }
    // dz = (L ⊗ I) z_i + U_lift,i U_lift,iᵀ z_i, identical for both schemes.
    let mut dz = lz;
    dz += block.apply(g.as_slice());
    state.z.axpy(-alpha, &dz, 1.0);

    if !state.x.iter().chain(state.z.iter()).all(|v| v.is_finite()) {
        return Err(Error::Diverged {
            k: state.k,
            reason: format!("non-finite state at agent {}", block.agent() + 1),
        });
    }
    Ok(())
}

fn check_shapes(states: &[AgentState], graph: &CommGraph, blocks: &[LocalBlocks]) -> Result<()> {
    if states.len() != blocks.len() || states.len() != graph.n_nodes() {
        return Err(Error::Dimension(format!(
            "{} states, {} agent blocks, {} graph nodes",
            states.len(),
            blocks.len(),
            graph.n_nodes()
        )));
    }
    Ok(())
}

fn step_with(states: &mut [AgentState], graph: &CommGraph, blocks: &[LocalBlocks], update: XUpdate) -> Result<()> {
    check_shapes(states, graph, blocks)?;
    let z: Vec<DVector<f64>> = states.iter().map(|s| s.z.clone()).collect();
    let lz = apply_expanded_laplacian(&z, graph)?;
    for ((state, block), lz) in states.iter_mut().zip(blocks).zip(lz) {
        let round = LocalRound::new(block, &state.z, lz);
        advance_agent(state, block, round, update)?;
    }
    Ok(())
}

/// `x ← x − α Ûᵀz`, `z ← z − α(L ⊗ I + Û Ûᵀ)z`.
pub fn baseline_step(states: &mut [AgentState], graph: &CommGraph, blocks: &[LocalBlocks], alpha: f64) -> Result<()> {
    step_with(states, graph, blocks, XUpdate::Gradient { alpha })
}

/// One Adam round: moments from `g = Ûᵀz`, bias-corrected step on `x`,
/// and the same `z` update as [`baseline_step`].
pub fn adam_step(
    states: &mut [AgentState],
    graph: &CommGraph,
    blocks: &[LocalBlocks],
    config: &AdamConfig,
) -> Result<()> {
    config.validate()?;
    step_with(states, graph, blocks, XUpdate::Adam(*config))
}

/// Sufficient step-size condition at `P = I`: `λ_max(D) ≤ 2α/(α² + μ)`,
/// with a small relative margin.
pub fn step_size_certificate(lambda_max_d: f64, alpha: f64, mu: f64) -> bool {
    lambda_max_d <= certificate_bound(alpha, mu) * (1.0 - CERTIFICATE_MARGIN)
}

pub fn certificate_bound(alpha: f64, mu: f64) -> f64 {
    2.0 * alpha / (alpha * alpha + mu)
}

/// `(‖Ûᵀz‖₂, ‖(L ⊗ I)z‖₂)`; both vanish exactly at an optimal `z`.
pub fn kkt_residual(states: &[AgentState], graph: &CommGraph, blocks: &[LocalBlocks]) -> Result<(f64, f64)> {
    check_shapes(states, graph, blocks)?;
    let z: Vec<DVector<f64>> = states.iter().map(|s| s.z.clone()).collect();
    let lz = apply_expanded_laplacian(&z, graph)?;
    let mut stat = 0.0;
    let mut cons = 0.0;
    for ((state, block), lz) in states.iter().zip(blocks).zip(&lz) {
        stat += block.adjoint(state.z.as_slice()).norm_squared();
        cons += lz.norm_squared();
    }
    Ok((stat.sqrt(), cons.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{local_blocks, split_views, IoDataset, Partition};
    use crate::graph::global_norm;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn problem(
        rng: &mut ChaCha8Rng,
        sizes_u: &[usize],
        sizes_y: &[usize],
        t: usize,
    ) -> (Partition, Vec<LocalBlocks>, DMatrix<f64>) {
        let p = Partition::contiguous(sizes_u, sizes_y).unwrap();
        let a = DMatrix::from_fn(p.n(), p.m(), |_, _| rng.random_range(-1.0..1.0));
        let u = DMatrix::from_fn(p.m(), t, |_, _| rng.random_range(-1.0..1.0));
        let y = &a * &u;
        let ds = IoDataset::from_matrices(u, y).unwrap();
        let blocks = local_blocks(&split_views(&ds, &p).unwrap(), &p);
        (p, blocks, a)
    }

    fn exact_x(a: &DMatrix<f64>, p: &Partition) -> Vec<DVector<f64>> {
        (0..p.n_agents())
            .map(|i| DVector::from_column_slice(a.select_columns(p.input_rows(i)).as_slice()))
            .collect()
    }

    #[test]
    fn zero_start_gives_negative_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, blocks, _) = problem(&mut rng, &[2, 1], &[1, 2], 4);
        let g = CommGraph::path(2);
        let states = init_state(&blocks, &g, &InitSpec::zeros(&blocks)).unwrap();
        for (s, b) in states.iter().zip(&blocks) {
            assert_eq!(s.z.as_slice(), (-DVector::from_column_slice(b.y_lift())).as_slice());
            assert_eq!(s.k, 0);
            assert!(s.s1.iter().chain(s.s2.iter()).all(|v| *v == 0.0));
        }
    }

    #[test]
    fn init_rejects_disconnected_and_bad_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (_, blocks, _) = problem(&mut rng, &[1, 1], &[1, 1], 3);
        let g = crate::graph::laplacian(&[], 2).unwrap();
        assert!(matches!(
            init_state(&blocks, &g, &InitSpec::zeros(&blocks)),
            Err(Error::Disconnected)
        ));
        let mut init = InitSpec::zeros(&blocks);
        init.x0[0] = DVector::zeros(5);
        assert!(init_state(&blocks, &CommGraph::path(2), &init).is_err());
    }

    #[test]
    fn exact_solution_is_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (p, blocks, a) = problem(&mut rng, &[3], &[2], 5);
        let g = CommGraph::ring(1);
        let init = InitSpec {
            x0: exact_x(&a, &p),
            w0: None,
        };
        let mut states = init_state(&blocks, &g, &init).unwrap();
        assert!(global_norm(&[states[0].z.clone()]) < 1e-12);
        // Force exact zero to check the fixed point bitwise.
        states[0].z.fill(0.0);
        let before = states.clone();
        baseline_step(&mut states, &g, &blocks, 1e-3).unwrap();
        assert_eq!(states[0].x, before[0].x);
        assert_eq!(states[0].z, before[0].z);
        let mut adam = before.clone();
        adam_step(&mut adam, &g, &blocks, &AdamConfig::default()).unwrap();
        assert_eq!(adam[0].x, before[0].x);
        assert!(adam[0].s1.iter().chain(adam[0].s2.iter()).all(|v| *v == 0.0));
    }

    #[test]
    fn nonzero_slack_matches_dense_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (_, blocks, _) = problem(&mut rng, &[1, 2, 1], &[1, 1, 1], 2);
        let g = CommGraph::path(3);
        let len = blocks[0].z_len();
        let x0: Vec<_> = blocks
            .iter()
            .map(|b| DVector::from_fn(b.x_len(), |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let w0: Vec<_> = (0..3)
            .map(|_| DVector::from_fn(len, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let states = init_state(
            &blocks,
            &g,
            &InitSpec {
                x0: x0.clone(),
                w0: Some(w0.clone()),
            },
        )
        .unwrap();

        let root = laplacian_sqrt(&g).unwrap();
        let kron = root.kronecker(&DMatrix::<f64>::identity(len, len));
        let w_flat = DVector::from_iterator(3 * len, w0.iter().flat_map(|w| w.iter().copied()));
        let lw = kron * w_flat;
        for (i, s) in states.iter().enumerate() {
            let expected = blocks[i].residual(x0[i].as_slice()) - lw.rows(i * len, len);
            assert!((&s.z - expected).amax() < 1e-10);
        }
    }

    #[test]
    fn single_agent_baseline_solves_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = Partition::contiguous(&[3], &[2]).unwrap();
        let u = DMatrix::from_fn(3, 6, |_, _| rng.random_range(-1.0..1.0));
        let y = DMatrix::from_fn(2, 6, |_, _| rng.random_range(-1.0..1.0));
        let ds = IoDataset::from_matrices(u.clone(), y.clone()).unwrap();
        let blocks = local_blocks(&split_views(&ds, &p).unwrap(), &p);
        let g = CommGraph::ring(1);
        let mut states = init_state(&blocks, &g, &InitSpec::zeros(&blocks)).unwrap();
        for _ in 0..20_000 {
            baseline_step(&mut states, &g, &blocks, 0.05).unwrap();
        }
        // A = Y Uᵀ (U Uᵀ)⁻¹ solves the normal equations of the noisy problem.
        let gram = &u * u.transpose();
        let a = &y * u.transpose() * gram.try_inverse().unwrap();
        let x = DVector::from_column_slice(a.as_slice());
        assert!((&states[0].x - x).amax() < 1e-8);
    }

    #[test]
    fn symmetric_agents_stay_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let u_local = DMatrix::from_fn(2, 3, |_, _| rng.random_range(-1.0..1.0));
        let u = DMatrix::from_fn(4, 3, |r, c| u_local[(r % 2, c)]);
        let y = DMatrix::from_fn(2, 3, |_, c| (c as f64) - 1.0);
        let ds = IoDataset::from_matrices(u, y).unwrap();
        let p = Partition::contiguous(&[2, 2], &[1, 1]).unwrap();
        let blocks = local_blocks(&split_views(&ds, &p).unwrap(), &p);
        let g = CommGraph::path(2);
        let z0 = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        let mut states = vec![
            AgentState::new(DVector::zeros(4), z0.clone()),
            AgentState::new(DVector::zeros(4), z0),
        ];
        for _ in 0..500 {
            baseline_step(&mut states, &g, &blocks, 0.01).unwrap();
            assert!((&states[0].z - &states[1].z).amax() < 1e-12);
        }
    }

    #[test]
    fn zero_gradient_never_moves_x() {
        let blocks = {
            let p = Partition::contiguous(&[1], &[1]).unwrap();
            let ds = IoDataset::from_matrices(DMatrix::zeros(1, 2), DMatrix::zeros(1, 2)).unwrap();
            local_blocks(&split_views(&ds, &p).unwrap(), &p)
        };
        let g = CommGraph::ring(1);
        let mut states = vec![AgentState::new(
            DVector::from_vec(vec![0.7]),
            DVector::from_vec(vec![1.0, 2.0]),
        )];
        for _ in 0..50 {
            adam_step(&mut states, &g, &blocks, &AdamConfig::default()).unwrap();
        }
        assert_eq!(states[0].x[0], 0.7);
        assert_eq!(states[0].s1[0], 0.0);
        assert_eq!(states[0].s2[0], 0.0);
        assert_eq!(states[0].k, 50);
    }

    #[test]
    fn first_adam_step_is_normalized_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (_, blocks, _) = problem(&mut rng, &[2, 2], &[2, 1], 4);
        let g = CommGraph::path(2);
        let config = AdamConfig {
            alpha: 0.01,
            ..AdamConfig::default()
        };
        let mut states = init_state(&blocks, &g, &InitSpec::zeros(&blocks)).unwrap();
        let grads: Vec<_> = states
            .iter()
            .zip(&blocks)
            .map(|(s, b)| b.adjoint(s.z.as_slice()))
            .collect();
        adam_step(&mut states, &g, &blocks, &config).unwrap();
        for (s, grad) in states.iter().zip(&grads) {
            let expected = grad.map(|v| -config.alpha * v / (v.abs() + config.epsilon));
            assert!((&s.x - expected).amax() < 1e-15);
        }
    }

    #[test]
    fn constant_gradient_limit() {
        // Frozen g: ŝ1 → g and ŝ2 → g², so the step tends to −α g/(|g| + ε).
        let config = AdamConfig::default();
        let g = [3.0, -0.5, 1e-9];
        let mut s1 = [0.0; 3];
        let mut s2 = [0.0; 3];
        let mut step = [0.0; 3];
        for k in 1..=1000u64 {
            for j in 0..3 {
                s1[j] = config.beta1 * s1[j] + (1.0 - config.beta1) * g[j];
                s2[j] = config.beta2 * s2[j] + (1.0 - config.beta2) * g[j] * g[j];
                step[j] = -config.alpha * (s1[j] / bias_correction(config.beta1, k))
                    / ((s2[j] / bias_correction(config.beta2, k)).sqrt() + config.epsilon);
            }
        }
        for j in 0..3 {
            let limit = -config.alpha * g[j] / (g[j].abs() + config.epsilon);
            assert!((step[j] - limit).abs() < 1e-12 * config.alpha.max(limit.abs()));
        }
    }

    #[test]
    fn bias_correction_guard() {
        assert_eq!(bias_correction(0.9, 1), 1.0 - 0.9);
        assert_eq!(bias_correction(0.9, 100_000), 1.0);
        assert_eq!(bias_correction(0.0, 1), 1.0);
        assert_eq!(bias_correction(0.5, u64::MAX), 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(AdamConfig::default().validate().is_ok());
        for bad in [
            AdamConfig {
                alpha: 0.0,
                ..Default::default()
            },
            AdamConfig {
                beta1: 1.0,
                ..Default::default()
            },
            AdamConfig {
                beta2: -0.1,
                ..Default::default()
            },
            AdamConfig {
                epsilon: 0.0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
        assert_eq!("adam".parse::<Mode>().unwrap(), Mode::Adam);
        assert!("sgd".parse::<Mode>().is_err());
    }

    #[test]
    fn certificate_scalar_cases() {
        assert!(step_size_certificate(1.0, 1e-3, 1e-7));
        assert!(!step_size_certificate(1.0, 3.0, 1.0));
        assert!((certificate_bound(3.0, 1.0) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn kkt_residual_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (_, blocks, _) = problem(&mut rng, &[1, 1, 1], &[1, 1, 1], 2);
        let g = CommGraph::ring(3);
        let zeros: Vec<_> = blocks
            .iter()
            .map(|b| AgentState::new(DVector::zeros(b.x_len()), DVector::zeros(b.z_len())))
            .collect();
        assert_eq!(kkt_residual(&zeros, &g, &blocks).unwrap(), (0.0, 0.0));

        let common = DVector::from_fn(blocks[0].z_len(), |_, _| rng.random_range(-1.0..1.0));
        let consensus: Vec<_> = blocks
            .iter()
            .map(|b| AgentState::new(DVector::zeros(b.x_len()), common.clone()))
            .collect();
        let (stat, cons) = kkt_residual(&consensus, &g, &blocks).unwrap();
        assert_eq!(cons, 0.0);
        assert!(stat > 0.0);
    }
    /// `½‖z‖²` with `z = Ûx − Ŷ − (L^{1/2} ⊗ I)w` at a fixed `w`.
    fn objective(blocks: &[LocalBlocks], g: &CommGraph, x: &[DVector<f64>], w: &[DVector<f64>]) -> f64 {
        let init = InitSpec {
            x0: x.to_vec(),
            w0: Some(w.to_vec()),
        };
        let states = init_state(blocks, g, &init).unwrap();
        0.5 * states.iter().map(|s| s.z.norm_squared()).sum::<f64>()
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (_, blocks, _) = problem(&mut rng, &[2, 1, 2], &[1, 2, 1], 3);
        let g = CommGraph::path(3);
        let x: Vec<_> = blocks
            .iter()
            .map(|b| DVector::from_fn(b.x_len(), |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let w: Vec<_> = blocks
            .iter()
            .map(|b| DVector::from_fn(b.z_len(), |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let states = init_state(
            &blocks,
            &g,
            &InitSpec {
                x0: x.clone(),
                w0: Some(w.clone()),
            },
        )
        .unwrap();
        let h = 1e-6;
        for (i, b) in blocks.iter().enumerate() {
            let grad = b.adjoint(states[i].z.as_slice());
            for j in 0..b.x_len() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i][j] += h;
                xm[i][j] -= h;
                let fd = (objective(&blocks, &g, &xp, &w) - objective(&blocks, &g, &xm, &w)) / (2.0 * h);
                assert!(
                    (fd - grad[j]).abs() <= 1e-6 * grad[j].abs().max(1.0),
                    "agent {i} entry {j}"
                );
            }
        }
    }

    #[test]
    fn kkt_vanishes_at_consensus_optimum() {
        // Inconsistent data: the optimum has z_i = (A*U − Y)/N on every agent.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = Partition::contiguous(&[2, 1, 2], &[2, 1, 1]).unwrap();
        let u = DMatrix::from_fn(5, 8, |_, _| rng.random_range(-1.0..1.0));
        let y = DMatrix::from_fn(4, 8, |_, _| rng.random_range(-1.0..1.0));
        let a = &y * u.transpose() * (&u * u.transpose()).try_inverse().unwrap();
        let ds = IoDataset::from_matrices(u.clone(), y.clone()).unwrap();
        let blocks = local_blocks(&split_views(&ds, &p).unwrap(), &p);
        let g = CommGraph::ring(3);
        let r = (&a * &u - &y) / 3.0;
        let z = DVector::from_column_slice(r.as_slice());
        let states: Vec<_> = exact_x(&a, &p)
            .into_iter()
            .map(|x| AgentState::new(x, z.clone()))
            .collect();
        let (stat, cons) = kkt_residual(&states, &g, &blocks).unwrap();
        assert!(stat < 1e-8 && cons < 1e-12, "{stat} {cons}");
    }

    #[test]
    fn adam_path_length_is_bounded_by_gradient_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (_, blocks, _) = problem(&mut rng, &[2, 2], &[2, 1], 8);
        let g = CommGraph::path(2);
        let cfg = AdamConfig {
            alpha: 1e-2,
            epsilon: 1e-3,
            ..Default::default()
        };
        let mut states = init_state(&blocks, &g, &InitSpec::zeros(&blocks)).unwrap();
        let x0: Vec<_> = states.iter().map(|s| s.x.clone()).collect();
        let (mut path, mut grad_sum) = (0.0, 0.0);
        for _ in 0..3000 {
            let before: Vec<_> = states.iter().map(|s| s.x.clone()).collect();
            let (stat, _) = kkt_residual(&states, &g, &blocks).unwrap();
            grad_sum += stat;
            adam_step(&mut states, &g, &blocks, &cfg).unwrap();
            path += states
                .iter()
                .zip(&before)
                .map(|(s, b)| (&s.x - b).norm_squared())
                .sum::<f64>()
                .sqrt();
            let bound = cfg.alpha / (cfg.epsilon * (1.0 - cfg.beta1)) * grad_sum;
            assert!(path <= bound, "{path} > {bound}");
        }
        let moved = states
            .iter()
            .zip(&x0)
            .map(|(s, b)| (&s.x - b).norm_squared())
            .sum::<f64>()
            .sqrt();
        assert!(moved <= path + 1e-12);
    }

    #[test]
    fn certified_step_never_increases_z() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (_, blocks, _) = problem(&mut rng, &[2, 1, 1], &[1, 1, 2], 5);
        let g = CommGraph::ring(3);
        let lambda = crate::graph::spectral_radius_d(&g, &blocks).unwrap();
        let alpha = 0.9 / lambda;
        assert!(step_size_certificate(lambda, alpha, 1e-7));
        let mut base = init_state(&blocks, &g, &InitSpec::zeros(&blocks)).unwrap();
        let mut adam = base.clone();
        let cfg = AdamConfig {
            alpha,
            ..Default::default()
        };
        let norm = |s: &[AgentState]| s.iter().map(|a| a.z.norm_squared()).sum::<f64>().sqrt();
        let mut prev = norm(&base);
        for _ in 0..2000 {
            baseline_step(&mut base, &g, &blocks, alpha).unwrap();
            adam_step(&mut adam, &g, &blocks, &cfg).unwrap();
            let now = norm(&base);
            assert!(now <= prev);
            assert_eq!(now, norm(&adam));
            prev = now;
        }
    }

    proptest::proptest! {
        #[test]
        fn apply_and_adjoint_are_transposes(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (_, blocks, _) = problem(&mut rng, &[2, 3], &[1, 2], 4);
            for b in &blocks {
                let x = DVector::from_fn(b.x_len(), |_, _| rng.random_range(-1.0..1.0));
                let z = DVector::from_fn(b.z_len(), |_, _| rng.random_range(-1.0..1.0));
                let lhs = b.apply(x.as_slice()).dot(&z);
                let rhs = x.dot(&b.adjoint(z.as_slice()));
                proptest::prop_assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()));
            }
        }
    }
}
