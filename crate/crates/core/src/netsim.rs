//! Synchronous message passing between agents.
//!
//! Each round every agent sends its current dummy block `z_i` to each
//! neighbor. Nothing else can be sent: [`exchange_round`] reads only the `z`
//! field of the agent states, and the only payload kind the solver can
//! produce is [`PayloadKind::DummyZ`]. The wire log records every message and
//! [`privacy_audit`] re-checks the log against the agents' private data.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::DVector;

use crate::datamodel::{IoDataset, Partition};
use crate::error::{Error, Result};
use crate::graph::CommGraph;
use crate::solver::AgentState;

/// Absolute elementwise tolerance for the payload match check.
pub const MATCH_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayloadKind {
    DummyZ,
    /// Anything else. Only reachable through [`WireMessage::from_raw_parts`].
    Other(u8),
}

impl fmt::Display for PayloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PayloadKind::DummyZ => f.write_str("dummy_z"),
            PayloadKind::Other(code) => write!(f, "other_{code}"),
        }
    }
}

/// Shared, immutable message body. One allocation per sender per round.
#[derive(Debug, Clone, PartialEq)]
pub struct Payload(Arc<[f64]>);

impl Payload {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    sender: usize,
    receiver: usize,
    round: u64,
    kind: PayloadKind,
    payload: Payload,
}

impl WireMessage {
    fn dummy_z(sender: usize, receiver: usize, round: u64, payload: Payload) -> Self {
        Self {
            sender,
            receiver,
            round,
            kind: PayloadKind::DummyZ,
            payload,
        }
    }

    /// Arbitrary message, for replaying dumps and for fault injection in
    /// audit tests. The solver never uses this.
    pub fn from_raw_parts(sender: usize, receiver: usize, round: u64, kind: PayloadKind, payload: Vec<f64>) -> Self {
        Self {
            sender,
            receiver,
            round,
            kind,
            payload: Payload(payload.into()),
        }
    }

    pub fn sender(&self) -> usize {
        self.sender
    }

    pub fn receiver(&self) -> usize {
        self.receiver
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn kind(&self) -> PayloadKind {
        self.kind
    }

    pub fn payload(&self) -> &Payload {
        &self.payload
    }
}

/// Per-message record kept even when payloads are discarded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MessageMeta {
    pub round: u64,
    pub sender: usize,
    pub receiver: usize,
    pub kind: PayloadKind,
    pub len: usize,
    pub payload_norm: f64,
}

impl From<&WireMessage> for MessageMeta {
    fn from(msg: &WireMessage) -> Self {
        Self {
            round: msg.round,
            sender: msg.sender,
            receiver: msg.receiver,
            kind: msg.kind,
            len: msg.payload.len(),
            payload_norm: msg.payload.norm(),
        }
    }
}

/// How much of the traffic the log keeps. Per-round counts are always kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Retention {
    CountsOnly,
    /// Metadata for every message, no payloads.
    Metadata,
    /// Metadata for every message and full payloads for every `every`-th
    /// round (round 0 included).
    Payloads {
        every: u64,
    },
}

impl Retention {
    pub fn keeps_payloads(&self, round: u64) -> bool {
        matches!(self, Retention::Payloads { every } if round.is_multiple_of((*every).max(1)))
    }

    fn keeps_metadata(&self) -> bool {
        !matches!(self, Retention::CountsOnly)
    }
}

/// Append-only record of the traffic.
#[derive(Debug, Clone)]
pub struct WireLog {
    retention: Retention,
    total: u64,
    round_counts: Vec<(u64, usize)>,
    metadata: Vec<MessageMeta>,
    retained: Vec<(u64, WireMessage)>,
}

impl WireLog {
    pub fn new(retention: Retention) -> Self {
        Self {
            retention,
            total: 0,
            round_counts: Vec::new(),
            metadata: Vec::new(),
            retained: Vec::new(),
        }
    }

    pub fn retention(&self) -> Retention {
        self.retention
    }

    /// Appends one message. Rounds must be nondecreasing.
    pub fn append(&mut self, msg: WireMessage) -> Result<()> {
        match self.round_counts.last_mut() {
            Some((round, count)) if *round == msg.round => *count += 1,
            Some((round, _)) if *round > msg.round => {
                return Err(Error::Dimension(format!(
                    "wire log rounds must be nondecreasing: {} after {}",
                    msg.round, round
                )))
            }
            _ => self.round_counts.push((msg.round, 1)),
        }
        if self.retention.keeps_metadata() {
            self.metadata.push(MessageMeta::from(&msg));
        }
        if self.retention.keeps_payloads(msg.round) {
            self.retained.push((self.total, msg));
        }
        self.total += 1;
        Ok(())
    }

    pub fn total_messages(&self) -> u64 {
        self.total
    }

    /// `(round, message count)` for every round that carried traffic.
    pub fn round_counts(&self) -> &[(u64, usize)] {
        &self.round_counts
    }

    pub fn metadata(&self) -> &[MessageMeta] {
        &self.metadata
    }

    /// Messages whose payloads were kept, with their global message index.
    pub fn retained(&self) -> &[(u64, WireMessage)] {
        &self.retained
    }

    /// CSV dump `round,sender,receiver,kind,payload_norm` (1-based agent ids).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "round,sender,receiver,kind,payload_norm").map_err(io)?;
        for m in &self.metadata {
            writeln!(
                w,
                "{},{},{},{},{}",
                m.round,
                m.sender + 1,
                m.receiver + 1,
                m.kind,
                m.payload_norm
            )
            .map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Binary payload sidecar: for each retained message in log order, a
    /// little-endian `u64` length followed by that many little-endian `f64`s.
    pub fn write_payloads(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        for (_, msg) in &self.retained {
            let body = msg.payload.as_slice();
            w.write_all(&(body.len() as u64).to_le_bytes()).map_err(io)?;
            for v in body {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }
}

/// Reads a payload sidecar written by [`WireLog::write_payloads`].
pub fn read_payloads(path: &Path) -> Result<Vec<Vec<f64>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut records = Vec::new();
    let mut word = [0u8; 8];
    loop {
        match r.read_exact(&mut word) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(Error::io(path, e)),
        }
        let len = u64::from_le_bytes(word) as usize;
        let mut record = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut word).map_err(|e| Error::io(path, e))?;
            record.push(f64::from_le_bytes(word));
        }
        records.push(record);
    }
    Ok(records)
}

/// Blocks received by each agent in one round, keyed by sender in ascending
/// order.
#[derive(Debug, Clone)]
pub struct NeighborTable {
    received: Vec<Vec<(usize, Payload)>>,
    messages: Vec<WireMessage>,
}

impl NeighborTable {
    /// Payloads delivered to `agent`, in ascending sender order.
    pub fn received(&self, agent: usize) -> &[(usize, Payload)] {
        &self.received[agent]
    }

    /// This round's messages in the order they were logged.
    pub fn messages(&self) -> &[WireMessage] {
        &self.messages
    }
}

/// Sends every agent's current `z` to each of its neighbors and logs the
/// `2|E|` messages in (sender, receiver) order.
pub fn exchange_round(
    states: &[AgentState],
    graph: &CommGraph,
    round: u64,
    log: &mut WireLog,
) -> Result<NeighborTable> {
    if states.len() != graph.n_nodes() {
        return Err(Error::Dimension(format!(
            "{} agent states for a graph with {} nodes",
            states.len(),
            graph.n_nodes()
        )));
    }
    let mut received = vec![Vec::new(); states.len()];
    let mut messages = Vec::with_capacity(2 * graph.edges().len());
    for (sender, state) in states.iter().enumerate() {
        let payload = Payload(state.z.as_slice().into());
        for &receiver in graph.neighbors(sender) {
            let msg = WireMessage::dummy_z(sender, receiver, round, payload.clone());
            log.append(msg.clone())?;
            messages.push(msg);
            received[receiver].push((sender, payload.clone()));
        }
    }
    Ok(NeighborTable { received, messages })
}

#[derive(Debug, Clone, PartialEq)]
pub enum ViolationKind {
    IllegalKind(PayloadKind),
    BadLength { len: usize, expected: usize },
    NotAnEdge,
    MatchesInputRow(usize),
    MatchesOutputRow(usize),
    MatchesModelBlock { agent: usize, round: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// Global index of the message in the log.
    pub message: u64,
    pub round: u64,
    pub sender: usize,
    pub receiver: usize,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuditReport {
    pub messages_checked: u64,
    pub payloads_checked: u64,
    pub violations: Vec<Violation>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn merge(&mut self, other: AuditReport) {
        self.messages_checked += other.messages_checked;
        self.payloads_checked += other.payloads_checked;
        self.violations.extend(other.violations);
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "result={}\nmessages_checked={}\npayloads_checked={}\nviolations={}\n",
            if self.passed() { "PASS" } else { "FAIL" },
            self.messages_checked,
            self.payloads_checked,
            self.violations.len()
        );
        for v in &self.violations {
            out.push_str(&format!(
                "message={} round={} sender={} receiver={} reason={:?}\n",
                v.message,
                v.round,
                v.sender + 1,
                v.receiver + 1,
                v.kind
            ));
        }
        out
    }
}

/// What a payload is compared against.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Secret {
    InputRow(usize),
    OutputRow(usize),
    Model { agent: usize, round: u64 },
}

/// Private vectors indexed by their first entry.
#[derive(Debug, Clone, Default)]
struct SecretIndex {
    vectors: Vec<(Secret, Vec<f64>)>,
    by_first: Vec<(f64, usize)>,
}

impl SecretIndex {
    fn push(&mut self, secret: Secret, v: Vec<f64>) {
        // All-zero vectors carry no information and would match any zero run.
        if v.is_empty() || v.iter().all(|x| *x == 0.0) {
            return;
        }
        self.by_first.push((v[0], self.vectors.len()));
        self.vectors.push((secret, v));
    }

    fn finish(&mut self) {
        self.by_first.sort_by(|a, b| a.0.total_cmp(&b.0));
    }

    /// Secrets found in `payload` starting at `start` with the given stride.
    fn scan(&self, payload: &[f64], start: usize, stride: usize, hits: &mut Vec<Secret>) {
        let head = payload[start];
        let lo = self.by_first.partition_point(|(v, _)| *v < head - MATCH_TOL);
        for &(first, id) in &self.by_first[lo..] {
            if first > head + MATCH_TOL {
                break;
            }
            let (secret, v) = &self.vectors[id];
            let last = start + (v.len() - 1) * stride;
            if last >= payload.len() {
                continue;
            }
            let equal = v
                .iter()
                .enumerate()
                .all(|(k, x)| (payload[start + k * stride] - x).abs() <= MATCH_TOL);
            if equal && !hits.contains(secret) {
                hits.push(*secret);
            }
        }
    }
}

/// Incremental audit of a run's traffic. The checks:
///
/// * schema: payload kind is `dummy_z` and length is `n·T`;
/// * endpoints: sender and receiver share an edge;
/// * leakage: no row of `U` or `Y`, and no `x_i` snapshot, appears in the
///   payload, either as a whole, as a contiguous window starting at a sample
///   boundary, or as a row of the payload's `n × T` reshaping.
///
/// Leakage matching is exact up to [`MATCH_TOL`] and is a structural
/// heuristic, not a proof of non-reconstructability.
#[derive(Debug, Clone)]
pub struct StreamingAudit {
    n: usize,
    z_len: usize,
    data: SecretIndex,
    report: AuditReport,
}

impl StreamingAudit {
    pub fn new(partition: &Partition, dataset: &IoDataset) -> Self {
        let mut data = SecretIndex::default();
        for (r, row) in dataset.u().row_iter().enumerate() {
            data.push(Secret::InputRow(r), row.iter().copied().collect());
        }
        for (r, row) in dataset.y().row_iter().enumerate() {
            data.push(Secret::OutputRow(r), row.iter().copied().collect());
        }
        data.finish();
        Self {
            n: partition.n(),
            z_len: partition.n() * dataset.samples(),
            data,
            report: AuditReport::default(),
        }
    }

    pub fn report(&self) -> &AuditReport {
        &self.report
    }

    pub fn into_report(self) -> AuditReport {
        self.report
    }

    /// Checks the schema and endpoints of a message seen only as metadata.
    pub fn check_meta(&mut self, index: u64, meta: &MessageMeta, graph: &CommGraph) {
        self.report.messages_checked += 1;
        let mut push = |kind| {
            self.report.violations.push(Violation {
                message: index,
                round: meta.round,
                sender: meta.sender,
                receiver: meta.receiver,
                kind,
            })
        };
        if meta.kind != PayloadKind::DummyZ {
            push(ViolationKind::IllegalKind(meta.kind));
        }
        if meta.len != self.z_len {
            push(ViolationKind::BadLength {
                len: meta.len,
                expected: self.z_len,
            });
        }
        if !graph.has_edge(meta.sender, meta.receiver) {
            push(ViolationKind::NotAnEdge);
        }
    }

    /// Full check of one message against the data rows and `models`.
    pub fn check_message(&mut self, index: u64, msg: &WireMessage, graph: &CommGraph, models: &ModelIndex) {
        self.check_meta(index, &MessageMeta::from(msg), graph);
        self.report.payloads_checked += 1;
        let payload = msg.payload.as_slice();
        if payload.is_empty() {
            return;
        }
        let mut hits = Vec::new();
        let step = self.n.max(1);
        // Rows of the n × T reshaping, and the payload laid out contiguously.
        for r in 0..step.min(payload.len()) {
            self.data.scan(payload, r, step, &mut hits);
        }
        for start in (0..payload.len()).step_by(step) {
            self.data.scan(payload, start, 1, &mut hits);
            models.0.scan(payload, start, 1, &mut hits);
        }
        for secret in hits {
            let kind = match secret {
                Secret::InputRow(r) => ViolationKind::MatchesInputRow(r),
                Secret::OutputRow(r) => ViolationKind::MatchesOutputRow(r),
                Secret::Model { agent, round } => ViolationKind::MatchesModelBlock { agent, round },
            };
            self.report.violations.push(Violation {
                message: index,
                round: msg.round,
                sender: msg.sender,
                receiver: msg.receiver,
                kind,
            });
        }
    }
}

/// Model blocks `x_i` a payload must not contain, tagged with the round
/// they were taken at.
#[derive(Debug, Clone, Default)]
pub struct ModelIndex(SecretIndex);

impl ModelIndex {
    pub fn new<'a>(snapshots: impl IntoIterator<Item = (u64, &'a [DVector<f64>])>) -> Self {
        let mut index = SecretIndex::default();
        for (round, blocks) in snapshots {
            for (agent, x) in blocks.iter().enumerate() {
                index.push(Secret::Model { agent, round }, x.as_slice().to_vec());
            }
        }
        index.finish();
        Self(index)
    }
}

/// Snapshots of every agent's `x_i`, keyed by round.
pub type XHistory = BTreeMap<u64, Vec<DVector<f64>>>;

/// Audits a completed log. Metadata is checked for every logged message;
/// retained payloads are additionally matched against the rows of `U` and
/// `Y` and against every snapshot in `x_history`.
pub fn privacy_audit(
    log: &WireLog,
    graph: &CommGraph,
    partition: &Partition,
    dataset: &IoDataset,
    x_history: &XHistory,
) -> AuditReport {
    let mut audit = StreamingAudit::new(partition, dataset);
    let models = ModelIndex::new(x_history.iter().map(|(r, x)| (*r, x.as_slice())));
    let mut retained = log.retained().iter().peekable();
    for (index, meta) in log.metadata().iter().enumerate() {
        let index = index as u64;
        match retained.peek() {
            Some((i, msg)) if *i == index => {
                audit.check_message(index, msg, graph, &models);
                retained.next();
            }
            _ => audit.check_meta(index, meta, graph),
        }
    }
    // Counts-only logs can still carry retained messages (none by default).
    for (index, msg) in retained {
        audit.check_message(*index, msg, graph, &models);
    }
    audit.into_report()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn state(z: Vec<f64>) -> AgentState {
        AgentState::new(DVector::zeros(2), DVector::from_vec(z))
    }

    #[test]
    fn message_counts_per_round() {
        let mut log = WireLog::new(Retention::Metadata);
        let k2 = CommGraph::path(2);
        exchange_round(&[state(vec![1.0]), state(vec![2.0])], &k2, 0, &mut log).unwrap();
        assert_eq!(log.total_messages(), 2);

        let ring = CommGraph::ring(5);
        let states: Vec<_> = (0..5).map(|i| state(vec![i as f64])).collect();
        let mut log = WireLog::new(Retention::CountsOnly);
        for round in 0..3 {
            exchange_round(&states, &ring, round, &mut log).unwrap();
        }
        assert_eq!(log.round_counts(), &[(0, 10), (1, 10), (2, 10)]);
        assert!(exchange_round(&states[..4], &ring, 3, &mut log).is_err());
    }

    #[test]
    fn table_is_keyed_by_sender() {
        let ring = CommGraph::ring(4);
        let states: Vec<_> = (0..4).map(|i| state(vec![i as f64, 0.5])).collect();
        let mut log = WireLog::new(Retention::Payloads { every: 1 });
        let table = exchange_round(&states, &ring, 0, &mut log).unwrap();
        let senders: Vec<_> = table.received(0).iter().map(|(s, _)| *s).collect();
        assert_eq!(senders, vec![1, 3]);
        assert_eq!(table.received(0)[1].1.as_slice(), &[3.0, 0.5]);
        assert!(log.retained().iter().all(|(_, m)| m.kind() == PayloadKind::DummyZ));
    }

    #[test]
    fn rounds_must_not_go_back() {
        let mut log = WireLog::new(Retention::Metadata);
        log.append(WireMessage::from_raw_parts(0, 1, 3, PayloadKind::DummyZ, vec![1.0]))
            .unwrap();
        assert!(log
            .append(WireMessage::from_raw_parts(0, 1, 2, PayloadKind::DummyZ, vec![1.0]))
            .is_err());
    }

    #[test]
    fn retention_policy() {
        assert!(Retention::Payloads { every: 3 }.keeps_payloads(0));
        assert!(!Retention::Payloads { every: 3 }.keeps_payloads(4));
        assert!(!Retention::Metadata.keeps_payloads(0));
    }

    fn tiny_problem() -> (Partition, IoDataset, CommGraph) {
        let p = Partition::contiguous(&[1, 1], &[1, 1]).unwrap();
        let u = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 4.0]);
        let y = DMatrix::from_row_slice(2, 3, &[7.0, 8.0, 9.0, 1.5, 2.5, 3.5]);
        (p, IoDataset::from_matrices(u, y).unwrap(), CommGraph::path(2))
    }

    #[test]
    fn audit_flags_copied_rows_and_schema() {
        let (p, ds, g) = tiny_problem();
        let mut log = WireLog::new(Retention::Payloads { every: 1 });
        // n·T = 6
        log.append(WireMessage::from_raw_parts(0, 1, 0, PayloadKind::DummyZ, vec![0.1; 6]))
            .unwrap();
        // Row 1 of U, contiguous at the start.
        log.append(WireMessage::from_raw_parts(
            1,
            0,
            0,
            PayloadKind::DummyZ,
            vec![1.0, 2.0, 3.0, 0.2, 0.3, 0.4],
        ))
        .unwrap();
        // Row 2 of Y as the second row of the 2 × 3 reshaping.
        log.append(WireMessage::from_raw_parts(
            0,
            1,
            1,
            PayloadKind::DummyZ,
            vec![0.0, 1.5, 0.0, 2.5, 0.0, 3.5],
        ))
        .unwrap();
        log.append(WireMessage::from_raw_parts(0, 1, 1, PayloadKind::DummyZ, vec![0.1; 7]))
            .unwrap();
        log.append(WireMessage::from_raw_parts(
            0,
            1,
            1,
            PayloadKind::Other(7),
            vec![0.1; 6],
        ))
        .unwrap();

        let report = privacy_audit(&log, &g, &p, &ds, &XHistory::new());
        assert!(!report.passed());
        let cited: Vec<_> = report.violations.iter().map(|v| (v.message, v.kind.clone())).collect();
        assert_eq!(
            cited,
            vec![
                (1, ViolationKind::MatchesInputRow(0)),
                (2, ViolationKind::MatchesOutputRow(1)),
                (3, ViolationKind::BadLength { len: 7, expected: 6 }),
                (4, ViolationKind::IllegalKind(PayloadKind::Other(7))),
            ]
        );
    }

    #[test]
    fn audit_flags_model_blocks_and_non_edges() {
        let (p, ds, _) = tiny_problem();
        let g = crate::graph::laplacian(&[], 2).unwrap();
        let mut log = WireLog::new(Retention::Payloads { every: 1 });
        let x0 = DVector::from_vec(vec![0.25, -0.75]);
        log.append(WireMessage::from_raw_parts(
            0,
            1,
            4,
            PayloadKind::DummyZ,
            vec![0.9, 0.8, 0.25, -0.75, 0.6, 0.1],
        ))
        .unwrap();
        let mut history = XHistory::new();
        history.insert(4, vec![x0, DVector::from_vec(vec![3.0, 3.0])]);
        let report = privacy_audit(&log, &g, &p, &ds, &history);
        let kinds: Vec<_> = report.violations.iter().map(|v| v.kind.clone()).collect();
        assert!(kinds.contains(&ViolationKind::NotAnEdge));
        assert!(kinds.contains(&ViolationKind::MatchesModelBlock { agent: 0, round: 4 }));
    }

    #[test]
    fn clean_log_passes() {
        let (p, ds, g) = tiny_problem();
        let mut log = WireLog::new(Retention::Payloads { every: 1 });
        let states = vec![
            state(vec![0.11, 0.12, 0.13, 0.14, 0.15, 0.16]),
            state(vec![-0.11, -0.12, -0.13, -0.14, -0.15, -0.16]),
        ];
        exchange_round(&states, &g, 0, &mut log).unwrap();
        let report = privacy_audit(&log, &g, &p, &ds, &XHistory::new());
        assert!(report.passed(), "{}", report.to_text());
        assert_eq!(report.messages_checked, 2);
        assert_eq!(report.payloads_checked, 2);
    }

    #[test]
    fn payload_sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = WireLog::new(Retention::Payloads { every: 1 });
        log.append(WireMessage::from_raw_parts(
            0,
            1,
            0,
            PayloadKind::DummyZ,
            vec![1.5, -2.0],
        ))
        .unwrap();
        log.append(WireMessage::from_raw_parts(
            1,
            0,
            0,
            PayloadKind::DummyZ,
            vec![f64::MIN_POSITIVE],
        ))
        .unwrap();
        let bin = dir.path().join("p.bin");
        log.write_payloads(&bin).unwrap();
        let bytes = std::fs::read(&bin).unwrap();
        assert_eq!(bytes.len(), 8 + 16 + 8 + 8);
        assert_eq!(&bytes[..8], &2u64.to_le_bytes());
        assert_eq!(
            read_payloads(&bin).unwrap(),
            vec![vec![1.5, -2.0], vec![f64::MIN_POSITIVE]]
        );

        let csv = dir.path().join("w.csv");
        log.write_csv(&csv).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        assert_eq!(text.lines().next(), Some("round,sender,receiver,kind,payload_norm"));
        assert_eq!(text.lines().nth(1), Some("0,1,2,dummy_z,2.5"));
    }
}
