//! Undirected communication graph between agents and the operators built on
//! its Laplacian.

use std::collections::VecDeque;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datamodel::{read_text, LocalBlocks};
use crate::error::{Error, Result};

/// Eigenvalues of `L` below this are treated as zero when taking the root.
const SQRT_CLAMP: f64 = 1e-12;
const POWER_ITER_CAP: usize = 10_000;
const POWER_ITER_TOL: f64 = 1e-9;
const POWER_ITER_SEED: u64 = 0x5eed_d1a6;

#[derive(Debug, Clone)]
pub struct CommGraph {
    n_nodes: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
    laplacian: DMatrix<f64>,
}

/// Builds the graph and its Laplacian from 0-based undirected edges.
/// Duplicate edges (in either orientation) collapse to one.
pub fn laplacian(edges: &[(usize, usize)], n_nodes: usize) -> Result<CommGraph> {
    let mut canon = Vec::with_capacity(edges.len());
    for &(a, b) in edges {
        if a == b {
            return Err(Error::Graph(format!("self-loop on node {}", a + 1)));
        }
        if a >= n_nodes || b >= n_nodes {
            return Err(Error::Graph(format!(
                "edge ({}, {}) out of range for {n_nodes} nodes",
                a + 1,
                b + 1
            )));
        }
        canon.push((a.min(b), a.max(b)));
    }
    canon.sort_unstable();
    canon.dedup();

    let mut neighbors = vec![Vec::new(); n_nodes];
    let mut degree = vec![0i64; n_nodes];
    let mut adjacency = vec![vec![0i64; n_nodes]; n_nodes];
    for &(a, b) in &canon {
        neighbors[a].push(b);
        neighbors[b].push(a);
        degree[a] += 1;
        degree[b] += 1;
        adjacency[a][b] = 1;
        adjacency[b][a] = 1;
    }
    for list in &mut neighbors {
        list.sort_unstable();
    }
    // Integer construction keeps L·1 = 0 exact.
    let laplacian = DMatrix::from_fn(n_nodes, n_nodes, |i, j| {
        let v = if i == j { degree[i] } else { -adjacency[i][j] };
        v as f64
    });
    Ok(CommGraph {
        n_nodes,
        edges: canon,
        neighbors,
        laplacian,
    })
}

impl CommGraph {
    pub fn ring(n: usize) -> Self {
        let edges: Vec<_> = if n < 2 {
            Vec::new()
        } else {
            (0..n).map(|i| (i, (i + 1) % n)).collect()
        };
        laplacian(&edges, n).expect("ring edges are valid")
    }

    pub fn path(n: usize) -> Self {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        laplacian(&edges, n).expect("path edges are valid")
    }

    pub fn complete(n: usize) -> Self {
        let edges: Vec<_> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        laplacian(&edges, n).expect("complete edges are valid")
    }

    pub fn preset(name: &str, n: usize) -> Option<Self> {
        match name {
            "ring" => Some(Self::ring(n)),
            "path" => Some(Self::path(n)),
            "complete" => Some(Self::complete(n)),
            _ => None,
        }
    }

    /// Parses an edge list: one `i j` (or `i-j`, `i,j`) pair of 1-based node
    /// ids per line; `#` starts a comment.
    pub fn parse_edge_list(text: &str, n_nodes: usize) -> Result<Self> {
        let mut edges = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let loc = format!("graph line {}", lineno + 1);
            let ids: Vec<&str> = line
                .split(|c: char| c.is_whitespace() || c == '-' || c == ',')
                .filter(|s| !s.is_empty())
                .collect();
            if ids.len() != 2 {
                return Err(Error::parse(&loc, format!("expected two node ids, got `{line}`")));
            }
            let mut pair = [0usize; 2];
            for (slot, id) in pair.iter_mut().zip(&ids) {
                let v: usize = id
                    .parse()
                    .map_err(|_| Error::parse(&loc, format!("bad node id `{id}`")))?;
                if v == 0 {
                    return Err(Error::parse(&loc, "node ids are 1-based"));
                }
                *slot = v - 1;
            }
            edges.push((pair[0], pair[1]));
        }
        laplacian(&edges, n_nodes)
    }

    /// Resolves a `--graph` value: a preset name or a path to an edge list.
    pub fn from_spec(spec: &str, n_nodes: usize) -> Result<Self> {
        if let Some(g) = Self::preset(spec, n_nodes) {
            return Ok(g);
        }
        let path = Path::new(spec);
        if !path.exists() {
            return Err(Error::Config(format!(
                "graph `{spec}` is neither a preset (ring, path, complete) nor an existing file"
            )));
        }
        Self::parse_edge_list(&read_text(path)?, n_nodes)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// Canonical edges `(a, b)` with `a < b`, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.neighbors[node].len()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        a < self.n_nodes && self.neighbors[a].binary_search(&b).is_ok()
    }

    pub fn laplacian(&self) -> &DMatrix<f64> {
        &self.laplacian
    }

    /// Single breadth-first sweep from node 0.
    pub fn is_connected(&self) -> bool {
        if self.n_nodes == 0 {
            return false;
        }
        let mut seen = vec![false; self.n_nodes];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = queue.pop_front() {
            for &w in &self.neighbors[v] {
                if !seen[w] {
                    seen[w] = true;
                    count += 1;
                    queue.push_back(w);
                }
            }
        }
        count == self.n_nodes
    }
}

/// One output block of `(L ⊗ I)z`: `deg·own − Σ neighbors`, neighbors summed
/// in the order given (ascending sender id everywhere in this crate).
pub(crate) fn laplacian_block<'a>(own: &[f64], neighbors: impl ExactSizeIterator<Item = &'a [f64]>) -> DVector<f64> {
    let degree = neighbors.len() as f64;
    let mut out = DVector::from_vec(own.iter().map(|v| degree * v).collect());
    for nb in neighbors {
        for (o, v) in out.iter_mut().zip(nb) {
            *o -= v;
        }
    }
    out
}

/// `(L ⊗ I)z` evaluated blockwise, reading only neighbor blocks.
pub fn apply_expanded_laplacian(z_blocks: &[DVector<f64>], graph: &CommGraph) -> Result<Vec<DVector<f64>>> {
    if z_blocks.len() != graph.n_nodes() {
        return Err(Error::Dimension(format!(
            "{} blocks for a graph with {} nodes",
            z_blocks.len(),
            graph.n_nodes()
        )));
    }
    if let Some(first) = z_blocks.first() {
        if z_blocks.iter().any(|b| b.len() != first.len()) {
            return Err(Error::Dimension("dummy blocks differ in length".into()));
        }
    }
    Ok((0..graph.n_nodes())
        .map(|i| {
            laplacian_block(
                z_blocks[i].as_slice(),
                graph.neighbors(i).iter().map(|&j| z_blocks[j].as_slice()),
            )
        })
        .collect())
}

/// Symmetric PSD square root of `L` by eigendecomposition.
pub fn laplacian_sqrt(graph: &CommGraph) -> Result<DMatrix<f64>> {
    if !graph.is_connected() {
        return Err(Error::Disconnected);
    }
    let eig = SymmetricEigen::try_new(graph.laplacian().clone(), f64::EPSILON, 0)
        .ok_or_else(|| Error::Graph("eigendecomposition of the Laplacian failed".into()))?;
    let roots = eig.eigenvalues.map(|l| if l < SQRT_CLAMP { 0.0 } else { l.sqrt() });
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&roots) * v.transpose())
}

/// `D z = (L ⊗ I)z + blkdiag(U_lift,i U_lift,iᵀ) z`, blockwise.
pub(crate) fn apply_d(z: &[DVector<f64>], graph: &CommGraph, blocks: &[LocalBlocks]) -> Vec<DVector<f64>> {
    (0..graph.n_nodes())
        .map(|i| {
            let mut out = laplacian_block(z[i].as_slice(), graph.neighbors(i).iter().map(|&j| z[j].as_slice()));
            let g = blocks[i].adjoint(z[i].as_slice());
            out += blocks[i].apply(g.as_slice());
            out
        })
        .collect()
}

/// Largest eigenvalue of `D = L ⊗ I + Û Ûᵀ` by power iteration, using only
/// neighbor exchanges and per-agent products.
pub fn spectral_radius_d(graph: &CommGraph, blocks: &[LocalBlocks]) -> Result<f64> {
    if blocks.len() != graph.n_nodes() {
        return Err(Error::Dimension(format!(
            "{} agent blocks for a graph with {} nodes",
            blocks.len(),
            graph.n_nodes()
        )));
    }
    let len = blocks.first().map_or(0, LocalBlocks::z_len);
    if blocks.iter().any(|b| b.z_len() != len) {
        return Err(Error::Dimension("agent blocks differ in n·T".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_ITER_SEED);
    let mut v: Vec<DVector<f64>> = blocks
        .iter()
        .map(|_| DVector::from_fn(len, |_, _| rng.random_range(-1.0..1.0)))
        .collect();
    normalize(&mut v);

    let mut previous = f64::NAN;
    for _ in 0..POWER_ITER_CAP {
        let dv = apply_d(&v, graph, blocks);
        let rayleigh: f64 = v.iter().zip(&dv).map(|(a, b)| a.dot(b)).sum();
        let norm = global_norm(&dv);
        if norm == 0.0 {
            return Ok(0.0);
        }
        if (rayleigh - previous).abs() <= POWER_ITER_TOL * rayleigh.abs() {
            return Ok(rayleigh);
        }
        previous = rayleigh;
        v = dv;
        for b in &mut v {
            *b /= norm;
        }
    }
    Err(Error::NoConvergence { iters: POWER_ITER_CAP })
}

pub(crate) fn global_norm(blocks: &[DVector<f64>]) -> f64 {
    blocks.iter().map(|b| b.norm_squared()).sum::<f64>().sqrt()
}

fn normalize(blocks: &mut [DVector<f64>]) {
    let norm = global_norm(blocks);
    if norm > 0.0 {
        for b in blocks {
            *b /= norm;
        }
    }
}
