//! Identification data: raw input/output matrices, the agent partition of
//! their rows, per-agent views and the lifted per-agent blocks.
//!
//! Indices are 0-based in memory. Text files use 1-based indices.
//!
//! Layout conventions used throughout the crate:
//!
//! * `x_i = vec(A_i)` stacks the columns of the `n × |D_u,i|` sub-model.
//! * A dummy block `z_i` has length `n·T`; sample `k` occupies
//!   `z_i[k·n .. (k+1)·n]`, i.e. it is the column-major vectorization of an
//!   `n × T` matrix.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Split of the input rows `{0..m}` and output rows `{0..n}` across agents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    m: usize,
    n: usize,
    input_rows: Vec<Vec<usize>>,
    output_rows: Vec<Vec<usize>>,
}

impl Partition {
    /// Validates and sorts the index sets. Every set must be non-empty, sets
    /// must be pairwise disjoint and jointly cover all rows.
    pub fn new(m: usize, n: usize, mut input_rows: Vec<Vec<usize>>, mut output_rows: Vec<Vec<usize>>) -> Result<Self> {
        if input_rows.is_empty() {
            return Err(Error::Partition("at least one agent is required".into()));
        }
        if input_rows.len() != output_rows.len() {
            return Err(Error::Partition(format!(
                "{} input sets but {} output sets",
                input_rows.len(),
                output_rows.len()
            )));
        }
        for sets in [&mut input_rows, &mut output_rows] {
            for s in sets.iter_mut() {
                s.sort_unstable();
            }
        }
        check_cover("input", m, &input_rows)?;
        check_cover("output", n, &output_rows)?;
        Ok(Self {
            m,
            n,
            input_rows,
            output_rows,
        })
    }

    /// Consecutive row ranges of the given sizes, in agent order.
    pub fn contiguous(input_sizes: &[usize], output_sizes: &[usize]) -> Result<Self> {
        let ranges = |sizes: &[usize]| {
            let mut start = 0;
            sizes
                .iter()
                .map(|&len| {
                    let r: Vec<usize> = (start..start + len).collect();
                    start += len;
                    r
                })
                .collect::<Vec<_>>()
        };
        Self::new(
            input_sizes.iter().sum(),
            output_sizes.iter().sum(),
            ranges(input_sizes),
            ranges(output_sizes),
        )
    }

    pub fn n_agents(&self) -> usize {
        self.input_rows.len()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn input_rows(&self, agent: usize) -> &[usize] {
        &self.input_rows[agent]
    }

    pub fn output_rows(&self, agent: usize) -> &[usize] {
        &self.output_rows[agent]
    }

    /// Length of `x_i`, i.e. `n·|D_u,i|`.
    pub fn x_len(&self, agent: usize) -> usize {
        self.n * self.input_rows[agent].len()
    }

    /// Parses the partition config: one line per agent, in agent order,
    /// `u=<rows> y=<rows>` with comma-separated 1-based row indices. An
    /// optional `<id>:` prefix is accepted and checked. Blank lines and
    /// `#` comments are skipped; a `#m=<m>,n=<n>` header pins the dimensions
    /// (otherwise they are inferred from the largest index).
    pub fn parse(text: &str) -> Result<Self> {
        let mut dims: Option<(usize, usize)> = None;
        let mut inputs = Vec::new();
        let mut outputs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let loc = || format!("partition line {}", lineno + 1);
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(header) = line.strip_prefix('#') {
                if header.trim_start().starts_with("m=") {
                    dims = Some(parse_mn_header(header, &loc())?);
                }
                continue;
            }
            let mut body = line;
            if let Some((id, rest)) = line.split_once(':') {
                let id: usize = id
                    .trim()
                    .parse()
                    .map_err(|_| Error::parse(loc(), format!("bad agent id `{id}`")))?;
                if id != inputs.len() + 1 {
                    return Err(Error::parse(
                        loc(),
                        format!("agent ids must be 1,2,.. in order; got {id}"),
                    ));
                }
                body = rest;
            }
            let mut u = None;
            let mut y = None;
            for field in body.split_whitespace() {
                let (key, list) = field
                    .split_once('=')
                    .ok_or_else(|| Error::parse(loc(), format!("expected key=list, got `{field}`")))?;
                let rows = parse_index_list(list, &loc())?;
                match key {
                    "u" => u = Some(rows),
                    "y" => y = Some(rows),
                    other => return Err(Error::parse(loc(), format!("unknown key `{other}`"))),
                }
            }
            inputs.push(u.ok_or_else(|| Error::parse(loc(), "missing u="))?);
            outputs.push(y.ok_or_else(|| Error::parse(loc(), "missing y="))?);
        }
        let (m, n) = match dims {
            Some(d) => d,
            None => {
                let max = |sets: &[Vec<usize>]| sets.iter().flatten().max().map_or(0, |v| v + 1);
                (max(&inputs), max(&outputs))
            }
        };
        Self::new(m, n, inputs, outputs)
    }

    pub fn to_text(&self) -> String {
        let list = |rows: &[usize]| rows.iter().map(|r| (r + 1).to_string()).collect::<Vec<_>>().join(",");
        let mut out = format!("#m={},n={}\n", self.m, self.n);
        for i in 0..self.n_agents() {
            let _ = writeln!(
                out,
                "{}: u={} y={}",
                i + 1,
                list(&self.input_rows[i]),
                list(&self.output_rows[i])
            );
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_text())
    }
}

fn check_cover(what: &str, dim: usize, sets: &[Vec<usize>]) -> Result<()> {
    let mut owner = vec![None; dim];
    for (agent, set) in sets.iter().enumerate() {
        if set.is_empty() {
            return Err(Error::Partition(format!("agent {} has an empty {what} set", agent + 1)));
        }
        for &row in set {
            let slot = owner
                .get_mut(row)
                .ok_or_else(|| Error::Partition(format!("{what} row {} out of range 1..={dim}", row + 1)))?;
            if let Some(prev) = slot.replace(agent) {
                return Err(Error::Partition(format!(
                    "{what} row {} claimed by agents {} and {}",
                    row + 1,
                    prev + 1,
                    agent + 1
                )));
            }
        }
    }
    if let Some(row) = owner.iter().position(Option::is_none) {
        return Err(Error::Partition(format!(
            "{what} row {} is not owned by any agent",
            row + 1
        )));
    }
    Ok(())
}

fn parse_index_list(list: &str, loc: &str) -> Result<Vec<usize>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            let v: usize = s
                .trim()
                .parse()
                .map_err(|_| Error::parse(loc, format!("bad index `{s}`")))?;
            if v == 0 {
                return Err(Error::parse(loc, "indices are 1-based"));
            }
            Ok(v - 1)
        })
        .collect()
}

pub(crate) fn parse_mn_header(header: &str, loc: &str) -> Result<(usize, usize)> {
    let mut m = None;
    let mut n = None;
    for kv in header.trim().split(',') {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::parse(loc, format!("bad header field `{kv}`")))?;
        let v: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::parse(loc, format!("bad header value `{v}`")))?;
        match k.trim() {
            "m" => m = Some(v),
            "n" => n = Some(v),
            _ => {}
        }
    }
    match (m, n) {
        (Some(m), Some(n)) => Ok((m, n)),
        _ => Err(Error::parse(loc, "header must define m and n")),
    }
}

/// Stateless transform applied to every raw sample before it becomes a
/// column of `U` or `Y`. Must preserve the vector length.
#[derive(Clone, Copy, Default)]
pub enum FeatureMap {
    #[default]
    Identity,
    Square,
    Elementwise {
        name: &'static str,
        f: fn(f64) -> f64,
    },
    Vector {
        name: &'static str,
        f: fn(&[f64]) -> Vec<f64>,
    },
}

impl FeatureMap {
    pub fn name(&self) -> &'static str {
        match self {
            FeatureMap::Identity => "identity",
            FeatureMap::Square => "square",
            FeatureMap::Elementwise { name, .. } | FeatureMap::Vector { name, .. } => name,
        }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        match self {
            FeatureMap::Identity => v.to_vec(),
            FeatureMap::Square => v.iter().map(|a| a * a).collect(),
            FeatureMap::Elementwise { f, .. } => v.iter().map(|&a| f(a)).collect(),
            FeatureMap::Vector { f, .. } => f(v),
        }
    }
}

impl fmt::Debug for FeatureMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Data matrices `U` (m×T) and `Y` (n×T).
#[derive(Debug, Clone)]
pub struct IoDataset {
    u: DMatrix<f64>,
    y: DMatrix<f64>,
    phi_u: FeatureMap,
    phi_y: FeatureMap,
}

impl IoDataset {
    pub fn from_matrices(u: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        if u.ncols() != y.ncols() {
            return Err(Error::Dimension(format!(
                "U has {} columns but Y has {}",
                u.ncols(),
                y.ncols()
            )));
        }
        if u.ncols() == 0 {
            return Err(Error::Dimension("dataset needs at least one sample".into()));
        }
        if u.nrows() == 0 || y.nrows() == 0 {
            return Err(Error::Dimension("empty input or output dimension".into()));
        }
        if !u.iter().chain(y.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("dataset".into()));
        }
        Ok(Self {
            u,
            y,
            phi_u: FeatureMap::Identity,
            phi_y: FeatureMap::Identity,
        })
    }

    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn m(&self) -> usize {
        self.u.nrows()
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn samples(&self) -> usize {
        self.u.ncols()
    }

    pub fn feature_maps(&self) -> (FeatureMap, FeatureMap) {
        (self.phi_u, self.phi_y)
    }

    /// Parses the delimited dataset format: a `#m=<m>,n=<n>` header, then one
    /// sample per line with `m` inputs followed by `n` outputs.
    pub fn parse(text: &str) -> Result<Self> {
        let mut dims = None;
        let mut samples = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let loc = format!("dataset line {}", lineno + 1);
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(header) = line.strip_prefix('#') {
                if dims.is_none() && header.trim_start().starts_with("m=") {
                    dims = Some(parse_mn_header(header, &loc)?);
                }
                continue;
            }
            let (m, n) = dims.ok_or_else(|| Error::parse(&loc, "missing #m=,n= header"))?;
            let values = parse_csv_row(line, &loc)?;
            if values.len() != m + n {
                return Err(Error::parse(
                    &loc,
                    format!("expected {} values, found {}", m + n, values.len()),
                ));
            }
            let (u, y) = values.split_at(m);
            samples.push((u.to_vec(), y.to_vec()));
        }
        build_dataset(&samples, FeatureMap::Identity, FeatureMap::Identity)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("#m={},n={}\n", self.m(), self.n());
        for k in 0..self.samples() {
            let row: Vec<String> = self
                .u
                .column(k)
                .iter()
                .chain(self.y.column(k).iter())
                .map(|v| v.to_string())
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_text())
    }
}

pub(crate) fn parse_csv_row(line: &str, loc: &str) -> Result<Vec<f64>> {
    line.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::parse(loc, format!("bad number `{}`", s.trim())))
        })
        .collect()
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Builds `U` and `Y` column by column from raw samples.
pub fn build_dataset(samples: &[(Vec<f64>, Vec<f64>)], phi_u: FeatureMap, phi_y: FeatureMap) -> Result<IoDataset> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Dimension("dataset needs at least one sample".into()))?;
    let (m, n) = (first.0.len(), first.1.len());
    let t = samples.len();
    let mut u = DMatrix::zeros(m, t);
    let mut y = DMatrix::zeros(n, t);
    for (k, (uk, yk)) in samples.iter().enumerate() {
        if uk.len() != m || yk.len() != n {
            return Err(Error::Dimension(format!(
                "sample {k} has dimensions ({}, {}), expected ({m}, {n})",
                uk.len(),
                yk.len()
            )));
        }
        let fu = phi_u.apply(uk);
        let fy = phi_y.apply(yk);
        if fu.len() != m || fy.len() != n {
            return Err(Error::Dimension(format!(
                "feature maps must preserve dimension (sample {k})"
            )));
        }
        u.column_mut(k).copy_from_slice(&fu);
        y.column_mut(k).copy_from_slice(&fy);
    }
    let mut ds = IoDataset::from_matrices(u, y)?;
    ds.phi_u = phi_u;
    ds.phi_y = phi_y;
    Ok(ds)
}

/// The rows of `U` and `Y` one agent can observe.
#[derive(Debug, Clone)]
pub struct AgentView {
    pub agent: usize,
    pub u_local: DMatrix<f64>,
    pub y_local: DMatrix<f64>,
}

pub fn split_views(dataset: &IoDataset, partition: &Partition) -> Result<Vec<AgentView>> {
    if dataset.m() != partition.m() || dataset.n() != partition.n() {
        return Err(Error::Dimension(format!(
            "partition is for m={}, n={} but dataset has m={}, n={}",
            partition.m(),
            partition.n(),
            dataset.m(),
            dataset.n()
        )));
    }
    Ok((0..partition.n_agents())
        .map(|i| AgentView {
            agent: i,
            u_local: dataset.u().select_rows(partition.input_rows(i)),
            y_local: dataset.y().select_rows(partition.output_rows(i)),
        })
        .collect())
}

/// Inverse of [`split_views`]: scatters every view's rows back to their
/// global positions.
pub fn reassemble(views: &[AgentView], partition: &Partition) -> (DMatrix<f64>, DMatrix<f64>) {
    let t = views.first().map_or(0, |v| v.u_local.ncols());
    let mut u = DMatrix::zeros(partition.m(), t);
    let mut y = DMatrix::zeros(partition.n(), t);
    for view in views {
        for (r, &row) in partition.input_rows(view.agent).iter().enumerate() {
            u.row_mut(row).copy_from(&view.u_local.row(r));
        }
        for (r, &row) in partition.output_rows(view.agent).iter().enumerate() {
            y.row_mut(row).copy_from(&view.y_local.row(r));
        }
    }
    (u, y)
}

/// Materialized lifted blocks of one agent: `U_lift,i` (nT × n|D_u,i|) and
/// `Y_lift,i` (nT).
#[derive(Debug, Clone)]
pub struct LiftedBlocks {
    pub agent: usize,
    pub u_lift: DMatrix<f64>,
    pub y_lift: DVector<f64>,
}

pub fn lift_agent_blocks(view: &AgentView, partition: &Partition) -> LiftedBlocks {
    let n = partition.n();
    let t = view.u_local.ncols();
    let d = view.u_local.nrows();
    let mut u_lift = DMatrix::zeros(n * t, n * d);
    for k in 0..t {
        for j in 0..d {
            let coeff = view.u_local[(j, k)];
            for r in 0..n {
                u_lift[(k * n + r, j * n + r)] = coeff;
            }
        }
    }
    let y_lift = DVector::from_column_slice(scatter_outputs(view, partition).as_slice());
    LiftedBlocks {
        agent: view.agent,
        u_lift,
        y_lift,
    }
}

/// `n × T` matrix holding the agent's measured output rows at their global
/// positions and zeros elsewhere.
fn scatter_outputs(view: &AgentView, partition: &Partition) -> DMatrix<f64> {
    let mut y = DMatrix::zeros(partition.n(), view.y_local.ncols());
    for (r, &row) in partition.output_rows(view.agent).iter().enumerate() {
        y.row_mut(row).copy_from(&view.y_local.row(r));
    }
    y
}

/// Factored form of one agent's lifted blocks used by the solvers.
///
/// `U_lift,i` is never formed: with `X_i` the `n × |D_u,i|` reshaping of
/// `x_i` and `Z_i` the `n × T` reshaping of `z_i`,
/// `U_lift,i x_i = vec(X_i U_local)` and `U_lift,iᵀ z_i = vec(Z_i U_localᵀ)`.
#[derive(Debug, Clone)]
pub struct LocalBlocks {
    agent: usize,
    n: usize,
    u_local: DMatrix<f64>,
    y_scatter: DMatrix<f64>,
}

impl LocalBlocks {
    pub fn new(view: &AgentView, partition: &Partition) -> Self {
        Self {
            agent: view.agent,
            n: partition.n(),
            u_local: view.u_local.clone(),
            y_scatter: scatter_outputs(view, partition),
        }
    }

    pub fn agent(&self) -> usize {
        self.agent
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn samples(&self) -> usize {
        self.u_local.ncols()
    }

    /// `|D_u,i|`
    pub fn inputs(&self) -> usize {
        self.u_local.nrows()
    }

    /// Length of the dummy block, `n·T`.
    pub fn z_len(&self) -> usize {
        self.n * self.samples()
    }

    /// Length of `x_i`, `n·|D_u,i|`.
    pub fn x_len(&self) -> usize {
        self.n * self.inputs()
    }

    pub fn u_local(&self) -> &DMatrix<f64> {
        &self.u_local
    }

    /// `Y_lift,i` as a flat `n·T` vector.
    pub fn y_lift(&self) -> &[f64] {
        self.y_scatter.as_slice()
    }

    /// `U_lift,i · x`
    pub fn apply(&self, x: &[f64]) -> DVector<f64> {
        let (n, d) = (self.n, self.inputs());
        assert_eq!(x.len(), n * d, "x has the wrong length");
        let u = self.u_local.as_slice();
        let mut out = vec![0.0; self.z_len()];
        for (k, out_k) in out.chunks_exact_mut(n.max(1)).enumerate() {
            for (c, x_c) in x.chunks_exact(n.max(1)).enumerate() {
                let coef = u[c + k * d];
                for (o, v) in out_k.iter_mut().zip(x_c) {
                    *o += coef * v;
                }
            }
        }
        DVector::from_vec(out)
    }

    /// `U_lift,iᵀ · z`
    pub fn adjoint(&self, z: &[f64]) -> DVector<f64> {
        let (n, d) = (self.n, self.inputs());
        assert_eq!(z.len(), self.z_len(), "z has the wrong length");
        let u = self.u_local.as_slice();
        let mut out = vec![0.0; n * d];
        for (k, z_k) in z.chunks_exact(n.max(1)).enumerate() {
            for (c, out_c) in out.chunks_exact_mut(n.max(1)).enumerate() {
                let coef = u[c + k * d];
                for (o, v) in out_c.iter_mut().zip(z_k) {
                    *o += coef * v;
                }
            }
        }
        DVector::from_vec(out)
    }

    /// `U_lift,i · x − Y_lift,i`
    pub fn residual(&self, x: &[f64]) -> DVector<f64> {
        let mut r = self.apply(x);
        r -= DVector::from_column_slice(self.y_lift());
        r
    }
}

/// Builds the solver blocks for every agent.
pub fn local_blocks(views: &[AgentView], partition: &Partition) -> Vec<LocalBlocks> {
    views.iter().map(|v| LocalBlocks::new(v, partition)).collect()
}
