use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::DVector;

use super::{advance_agent, certificate_bound, init_state, kkt_residual, step_size_certificate};
use super::{AdamConfig, AgentState, CertificateConfig, InitSpec, LocalRound, Mode, XUpdate};
use crate::datamodel::{local_blocks, split_views, write_text, IoDataset, LocalBlocks, Partition};
use crate::error::{Error, Result};
use crate::graph::{laplacian_block, spectral_radius_d, CommGraph};
use crate::netsim::{exchange_round, AuditReport, ModelIndex, Retention, StreamingAudit, WireLog, XHistory};
use crate::oracle::{block_error, ReferenceModel};

/// Everything a run needs besides its settings: the data, who owns what,
/// and who talks to whom.
#[derive(Debug, Clone)]
pub struct Problem {
    dataset: IoDataset,
    partition: Partition,
    graph: CommGraph,
    blocks: Vec<LocalBlocks>,
}

impl Problem {
    pub fn new(dataset: IoDataset, partition: Partition, graph: CommGraph) -> Result<Self> {
        if graph.n_nodes() != partition.n_agents() {
            return Err(Error::Dimension(format!(
                "graph has {} nodes but the partition has {} agents",
                graph.n_nodes(),
                partition.n_agents()
            )));
        }
        if !graph.is_connected() {
            return Err(Error::Disconnected);
        }
        let views = split_views(&dataset, &partition)?;
        let blocks = local_blocks(&views, &partition);
        Ok(Self {
            dataset,
            partition,
            graph,
            blocks,
        })
    }

    pub fn dataset(&self) -> &IoDataset {
        &self.dataset
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn graph(&self) -> &CommGraph {
        &self.graph
    }

    pub fn blocks(&self) -> &[LocalBlocks] {
        &self.blocks
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub mode: Mode,
    pub config: AdamConfig,
    pub certificate: CertificateConfig,
    /// Defaults to zero blocks and zero slack.
    pub init: Option<InitSpec>,
    /// Record a trace row every this many rounds; 0 keeps only the first
    /// and last rows.
    pub trace_every: u64,
    pub retention: Retention,
    /// Check every message as it is sent.
    pub audit: bool,
    /// Abort once `‖z‖` exceeds this.
    pub divergence_threshold: f64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            mode: Mode::Adam,
            config: AdamConfig::default(),
            certificate: CertificateConfig::default(),
            init: None,
            trace_every: 100,
            retention: Retention::CountsOnly,
            audit: true,
            divergence_threshold: 1e12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub k: u64,
    /// `max |A(x) − A*|`, when a reference model was supplied.
    pub err_max: Option<f64>,
    pub z_norm: f64,
    /// `‖Ûᵀz‖₂`
    pub r_stat: f64,
    /// `‖(L ⊗ I)z‖₂`
    pub r_cons: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunTrace {
    pub records: Vec<TraceRecord>,
}

impl RunTrace {
    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    /// First recorded round whose error is at or below `tol`.
    pub fn first_below(&self, tol: f64) -> Option<u64> {
        self.records
            .iter()
            .find(|r| r.err_max.is_some_and(|e| e <= tol))
            .map(|r| r.k)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,err_max,z_norm,r_stat,r_cons\n");
        for r in &self.records {
            let err = r.err_max.map(|e| format!("{e:e}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{:e},{:e},{:e}\n",
                r.k, err, r.z_norm, r.r_stat, r.r_cons
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_csv())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Completed,
    Diverged { k: u64, reason: String },
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub states: Vec<AgentState>,
    pub trace: RunTrace,
    pub outcome: Outcome,
    pub log: WireLog,
    pub audit: Option<AuditReport>,
    /// `x` of every agent at each round whose payloads were retained.
    pub x_history: XHistory,
    /// Order-sensitive hash of every `z` iterate, for bitwise comparisons.
    pub z_digest: u64,
    /// `None` when power iteration did not settle.
    pub lambda_max_d: Option<f64>,
    pub certificate_bound: f64,
    pub certificate_holds: bool,
    pub elapsed: Duration,
}

impl RunOutput {
    pub fn x_blocks(&self) -> Vec<DVector<f64>> {
        self.states.iter().map(|s| s.x.clone()).collect()
    }
}

/// FNV-style fold over the bit patterns of successive `z` iterates, one
/// word per entry, in four interleaved lanes.
#[derive(Debug, Clone, Copy)]
struct ZDigest([u64; 4]);

impl ZDigest {
    const PRIME: u64 = 0x0000_0100_0000_01b3;

    fn new() -> Self {
        Self([0xcbf2_9ce4_8422_2325; 4])
    }

    fn absorb(&mut self, states: &[AgentState]) {
        for s in states {
            let mut chunks = s.z.as_slice().chunks_exact(4);
            for c in &mut chunks {
                for (h, v) in self.0.iter_mut().zip(c) {
                    *h = (*h ^ v.to_bits()).wrapping_mul(Self::PRIME);
                }
            }
            for (h, v) in self.0.iter_mut().zip(chunks.remainder()) {
                *h = (*h ^ v.to_bits()).wrapping_mul(Self::PRIME);
            }
        }
        // Rotate lanes so that the block boundaries matter.
        self.0.rotate_left(1);
    }

    fn finish(&self) -> u64 {
        self.0
            .iter()
            .fold(0xcbf2_9ce4_8422_2325, |acc, h| (acc ^ h).wrapping_mul(Self::PRIME))
    }
}

fn z_norm(states: &[AgentState]) -> f64 {
    states.iter().map(|s| s.z.norm_squared()).sum::<f64>().sqrt()
}

/// Runs the message-passing iteration for `options.config.iters` rounds.
///
/// Each round every agent sends its `z_i` to its neighbors through the
/// wire log and then updates from its own blocks and what it received.
/// A run that blows up stops early with [`Outcome::Diverged`]; the trace up
/// to that point is kept.
pub fn run(problem: &Problem, options: &RunOptions, reference: Option<&ReferenceModel>) -> Result<RunOutput> {
    options.config.validate()?;
    if options.certificate.mu.is_nan() || options.certificate.mu <= 0.0 {
        return Err(Error::Config(format!("mu must be > 0, got {}", options.certificate.mu)));
    }
    let start = Instant::now();
    let graph = &problem.graph;
    let blocks = &problem.blocks;
    let alpha = options.config.alpha;

    let lambda_max_d = match spectral_radius_d(graph, blocks) {
        Ok(l) => Some(l),
        Err(Error::NoConvergence { .. }) => None,
        Err(e) => return Err(e),
    };
    let bound = certificate_bound(alpha, options.certificate.mu);
    let certificate_holds = lambda_max_d.is_some_and(|l| step_size_certificate(l, alpha, options.certificate.mu));

    let init = match &options.init {
        Some(init) => init.clone(),
        None => InitSpec::zeros(blocks),
    };
    let mut states = init_state(blocks, graph, &init)?;
    let targets = reference.map(|r| r.x_blocks(&problem.partition));
    let err_of = |states: &[AgentState]| targets.as_ref().map(|t| block_error(states.iter().map(|s| &s.x), t));

    let update = match options.mode {
        Mode::Baseline => XUpdate::Gradient { alpha },
        Mode::Adam => XUpdate::Adam(options.config),
    };
    let records_row = |k: u64| match options.trace_every {
        0 => k == 0,
        every => k.is_multiple_of(every),
    };

    let mut log = WireLog::new(options.retention);
    let mut audit = options
        .audit
        .then(|| StreamingAudit::new(&problem.partition, &problem.dataset));
    let mut x_history = XHistory::new();
    let mut trace = RunTrace::default();
    let mut digest = ZDigest::new();
    digest.absorb(&states);
    let mut outcome = Outcome::Completed;

    for k in 0..options.config.iters {
        let table = exchange_round(&states, graph, k, &mut log)?;
        let keep_x = log.retention().keeps_payloads(k);
        if audit.is_some() || keep_x {
            let xs: Vec<DVector<f64>> = states.iter().map(|s| s.x.clone()).collect();
            if let Some(audit) = audit.as_mut() {
                let models = ModelIndex::new([(k, xs.as_slice())]);
                let base = log.total_messages() - table.messages().len() as u64;
                for (j, msg) in table.messages().iter().enumerate() {
                    audit.check_message(base + j as u64, msg, graph, &models);
                }
            }
            if keep_x {
                x_history.insert(k, xs);
            }
        }

        let rounds: Vec<LocalRound> = states
            .iter()
            .zip(blocks)
            .enumerate()
            .map(|(i, (state, block))| {
                let received = table.received(i);
                let lz = laplacian_block(state.z.as_slice(), received.iter().map(|(_, p)| p.as_slice()));
                LocalRound::new(block, &state.z, lz)
            })
            .collect();

        let norm = z_norm(&states);
        if !norm.is_finite() || norm > options.divergence_threshold {
            outcome = Outcome::Diverged {
                k,
                reason: format!("‖z‖ = {norm:e}"),
            };
            break;
        }
        if records_row(k) {
            trace.records.push(TraceRecord {
                k,
                err_max: err_of(&states),
                z_norm: norm,
                r_stat: rounds.iter().map(|r| r.g.norm_squared()).sum::<f64>().sqrt(),
                r_cons: rounds.iter().map(|r| r.lz.norm_squared()).sum::<f64>().sqrt(),
            });
        }

        let mut failure = None;
        for ((state, block), round) in states.iter_mut().zip(blocks).zip(rounds) {
            match advance_agent(state, block, round, update) {
                Ok(()) => {}
                Err(Error::Diverged { reason, .. }) => {
                    failure = Some(reason);
                }
                Err(e) => return Err(e),
            }
        }
        if let Some(reason) = failure {
            outcome = Outcome::Diverged { k: k + 1, reason };
            break;
        }
        digest.absorb(&states);
    }

    if outcome == Outcome::Completed {
        let (r_stat, r_cons) = kkt_residual(&states, graph, blocks)?;
        let k = options.config.iters;
        if trace.last().is_none_or(|r| r.k != k) {
            trace.records.push(TraceRecord {
                k,
                err_max: err_of(&states),
                z_norm: z_norm(&states),
                r_stat,
                r_cons,
            });
        }
    }

    Ok(RunOutput {
        states,
        trace,
        outcome,
        log,
        audit: audit.map(StreamingAudit::into_report),
        x_history,
        z_digest: digest.finish(),
        lambda_max_d,
        certificate_bound: bound,
        certificate_holds,
        elapsed: start.elapsed(),
    })
}
