//! Radial distribution feeder under the LinDistFlow approximation, with PV
//! agents, a dual-ascent voltage regulator and identification scenarios.
//!
//! Buses are numbered `1..=B`; bus 0 is the substation. Every bus has
//! exactly one line to its parent. Voltages are per-unit magnitudes with
//! `v = v0 + ½(R p + X q)` for net injections `p`, `q`.

mod control;
mod scenario;

pub use control::{controller_step, Band, DualState, Gains};
pub use scenario::{
    run_scenario, IdentificationSummary, LoadProfile, Scenario, ScenarioConfig, ScenarioOutcome, ScenarioRow,
    FEEDER_ITERS,
};

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::datamodel::{read_text, write_text, Partition};
use crate::error::{Error, Result};

/// PV inverter at `bus` with box limits on its injections.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PvSpec {
    pub bus: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
}

impl PvSpec {
    /// Clamps `(p, q)` into the box.
    pub fn project(&self, p: f64, q: f64) -> (f64, f64) {
        (p.clamp(self.p_min, self.p_max), q.clamp(self.q_min, self.q_max))
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.p_min + self.p_max), 0.5 * (self.q_min + self.q_max))
    }
}

/// One line of a feeder description: bus `bus` hangs off `parent`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSpec {
    pub bus: usize,
    pub parent: usize,
    pub r: f64,
    pub x: f64,
    pub pv: Option<PvSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeederModel {
    /// Parent of bus `b` at index `b − 1`; 0 is the substation.
    parent: Vec<usize>,
    r: Vec<f64>,
    x: Vec<f64>,
    v0: f64,
    pv: Vec<PvSpec>,
    r_mat: DMatrix<f64>,
    x_mat: DMatrix<f64>,
}

/// Per-bus active and reactive powers, indexed by `bus − 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct BusPower {
    pub p: DVector<f64>,
    pub q: DVector<f64>,
}

impl BusPower {
    pub fn zeros(buses: usize) -> Self {
        Self {
            p: DVector::zeros(buses),
            q: DVector::zeros(buses),
        }
    }

    pub fn uniform(buses: usize, p: f64, q: f64) -> Self {
        Self {
            p: DVector::from_element(buses, p),
            q: DVector::from_element(buses, q),
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            p: &self.p * c,
            q: &self.q * c,
        }
    }
}

/// Builds the sensitivity matrices of a radial feeder.
///
/// Lines may come in any order. Bus ids must be exactly `1..=B`.
pub fn build_feeder(lines: &[LineSpec], v0: f64) -> Result<FeederModel> {
    let b = lines.len();
    if b == 0 {
        return Err(Error::Feeder("a feeder needs at least one line".into()));
    }
    if !(v0 > 0.0 && v0.is_finite()) {
        return Err(Error::Feeder(format!("substation voltage must be positive, got {v0}")));
    }
    let mut parent = vec![usize::MAX; b];
    let mut r = vec![0.0; b];
    let mut x = vec![0.0; b];
    let mut pv = Vec::new();
    for line in lines {
        if line.bus == 0 || line.bus > b {
            return Err(Error::Feeder(format!(
                "bus {} out of range: ids must be 1..={b}",
                line.bus
            )));
        }
        let i = line.bus - 1;
        if parent[i] != usize::MAX {
            return Err(Error::Feeder(format!("bus {} declared twice", line.bus)));
        }
        if line.parent > b {
            return Err(Error::Feeder(format!(
                "bus {} has unknown parent {}",
                line.bus, line.parent
            )));
        }
        if line.parent == line.bus {
            return Err(Error::Feeder(format!("bus {} is its own parent", line.bus)));
        }
        if !(line.r >= 0.0 && line.x >= 0.0 && line.r.is_finite() && line.x.is_finite()) {
            return Err(Error::Feeder(format!(
                "line to bus {} needs finite nonnegative r and x",
                line.bus
            )));
        }
        parent[i] = line.parent;
        r[i] = line.r;
        x[i] = line.x;
        if let Some(spec) = line.pv {
            if spec.bus != line.bus || !(spec.p_min <= spec.p_max && spec.q_min <= spec.q_max) {
                return Err(Error::Feeder(format!("bad PV limits at bus {}", line.bus)));
            }
            pv.push(spec);
        }
    }
    pv.sort_by_key(|s| s.bus);

    let paths = root_paths(&parent)?;
    let cum_r = cumulative(&paths, &r);
    let cum_x = cumulative(&paths, &x);
    let mut r_mat = DMatrix::zeros(b, b);
    let mut x_mat = DMatrix::zeros(b, b);
    for i in 0..b {
        for j in 0..=i {
            // Paths share a prefix from the root; the last shared bus is the
            // deepest common ancestor.
            let shared = paths[i].iter().zip(&paths[j]).take_while(|(a, c)| a == c).count();
            if shared > 0 {
                let lca = paths[i][shared - 1];
                r_mat[(i, j)] = 2.0 * cum_r[lca];
                x_mat[(i, j)] = 2.0 * cum_x[lca];
                r_mat[(j, i)] = r_mat[(i, j)];
                x_mat[(j, i)] = x_mat[(i, j)];
            }
        }
    }
    Ok(FeederModel {
        parent,
        r,
        x,
        v0,
        pv,
        r_mat,
        x_mat,
    })
}

/// Bus indices from the first bus below the substation down to each bus.
fn root_paths(parent: &[usize]) -> Result<Vec<Vec<usize>>> {
    let b = parent.len();
    let mut paths = Vec::with_capacity(b);
    for start in 0..b {
        let mut path = vec![start];
        let mut cur = start;
        while parent[cur] != 0 {
            cur = parent[cur] - 1;
            if path.len() > b {
                return Err(Error::Feeder(format!(
                    "bus {} does not reach the substation (cycle)",
                    start + 1
                )));
            }
            path.push(cur);
        }
        path.reverse();
        paths.push(path);
    }
    Ok(paths)
}

fn cumulative(paths: &[Vec<usize>], w: &[f64]) -> Vec<f64> {
    paths.iter().map(|p| p.iter().map(|&h| w[h]).sum()).collect()
}

impl FeederModel {
    pub fn buses(&self) -> usize {
        self.parent.len()
    }

    pub fn parent(&self, bus: usize) -> usize {
        self.parent[bus - 1]
    }

    pub fn v0(&self) -> f64 {
        self.v0
    }

    pub fn pv(&self) -> &[PvSpec] {
        &self.pv
    }

    /// `R(i, j)`, indexed by `bus − 1`.
    pub fn r_matrix(&self) -> &DMatrix<f64> {
        &self.r_mat
    }

    pub fn x_matrix(&self) -> &DMatrix<f64> {
        &self.x_mat
    }

    /// Voltage magnitudes for the given injections and loads, plus optional
    /// Gaussian measurement noise.
    pub fn measure(&self, injections: &BusPower, loads: &BusPower, noise_std: f64, rng: &mut impl Rng) -> DVector<f64> {
        let p = &injections.p - &loads.p;
        let q = &injections.q - &loads.q;
        let mut v = (&self.r_mat * p + &self.x_mat * q) * 0.5;
        v.add_scalar_mut(self.v0);
        if noise_std > 0.0 {
            let normal = Normal::new(0.0, noise_std).expect("noise std is finite and positive");
            for vi in v.iter_mut() {
                *vi += normal.sample(rng);
            }
        }
        v
    }

    /// Bus injections from stacked PV controls `[p_1, q_1, p_2, q_2, …]`.
    pub fn scatter_controls(&self, u: &[f64]) -> BusPower {
        let mut out = BusPower::zeros(self.buses());
        for (k, spec) in self.pv.iter().enumerate() {
            out.p[spec.bus - 1] += u[2 * k];
            out.q[spec.bus - 1] += u[2 * k + 1];
        }
        out
    }

    /// `∂v/∂u`: one row per bus, columns `(p_k, q_k)` per PV agent.
    pub fn sensitivity(&self) -> DMatrix<f64> {
        let b = self.buses();
        let mut a = DMatrix::zeros(b, 2 * self.pv.len());
        for (k, spec) in self.pv.iter().enumerate() {
            let c = spec.bus - 1;
            for i in 0..b {
                a[(i, 2 * k)] = 0.5 * self.r_mat[(i, c)];
                a[(i, 2 * k + 1)] = 0.5 * self.x_mat[(i, c)];
            }
        }
        a
    }

    fn hop_distances(&self, from: usize) -> Vec<usize> {
        // Tree distance through the lowest common ancestor.
        let depth = |mut b: usize| {
            let mut d = 0;
            while b != 0 {
                b = self.parent[b - 1];
                d += 1;
            }
            d
        };
        let ancestors = |mut b: usize| {
            let mut out = vec![b];
            while b != 0 {
                b = self.parent[b - 1];
                out.push(b);
            }
            out
        };
        let from_anc = ancestors(from);
        let from_depth = depth(from);
        (1..=self.buses())
            .map(|bus| {
                let anc = ancestors(bus);
                let lca = *anc.iter().find(|a| from_anc.contains(a)).expect("root is shared");
                from_depth + depth(bus) - 2 * depth(lca)
            })
            .collect()
    }

    /// Agent ownership: agent `k` controls `(p, q)` at PV `k` (input rows
    /// `2k, 2k+1`) and measures every bus whose nearest PV bus is its own,
    /// ties going to the lower agent.
    pub fn partition(&self) -> Result<Partition> {
        if self.pv.is_empty() {
            return Err(Error::Feeder("the feeder has no PV buses".into()));
        }
        let dist: Vec<Vec<usize>> = self.pv.iter().map(|s| self.hop_distances(s.bus)).collect();
        let mut outputs = vec![Vec::new(); self.pv.len()];
        for bus in 0..self.buses() {
            let owner = (0..dist.len()).min_by_key(|&k| (dist[k][bus], k)).expect("non-empty");
            outputs[owner].push(bus);
        }
        let inputs = (0..self.pv.len()).map(|k| vec![2 * k, 2 * k + 1]).collect();
        Partition::new(2 * self.pv.len(), self.buses(), inputs, outputs)
    }

    /// Lines in the text format accepted by [`FeederModel::parse`].
    pub fn lines(&self) -> Vec<LineSpec> {
        (1..=self.buses())
            .map(|bus| LineSpec {
                bus,
                parent: self.parent[bus - 1],
                r: self.r[bus - 1],
                x: self.x[bus - 1],
                pv: self.pv.iter().find(|s| s.bus == bus).copied(),
            })
            .collect()
    }

    /// Parses lines `bus <id> parent <id> r <val> x <val> [pv pmin pmax qmin qmax]`,
    /// plus an optional `v0 <val>` line. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = Vec::new();
        let mut v0 = 1.0;
        for (no, raw) in text.lines().enumerate() {
            let loc = format!("line {}", no + 1);
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let tok: Vec<&str> = line.split_whitespace().collect();
            let num = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|_| Error::parse(&loc, format!("bad number `{s}`")))
            };
            let id = |s: &str| -> Result<usize> {
                s.parse::<usize>()
                    .map_err(|_| Error::parse(&loc, format!("bad bus id `{s}`")))
            };
            match tok.as_slice() {
                ["v0", value] => v0 = num(value)?,
                ["bus", bus, "parent", parent, "r", r, "x", x, rest @ ..] => {
                    let bus = id(bus)?;
                    let pv = match rest {
                        [] => None,
                        ["pv", a, b, c, d] => Some(PvSpec {
                            bus,
                            p_min: num(a)?,
                            p_max: num(b)?,
                            q_min: num(c)?,
                            q_max: num(d)?,
                        }),
                        _ => return Err(Error::parse(&loc, "expected `pv pmin pmax qmin qmax` after x")),
                    };
                    lines.push(LineSpec {
                        bus,
                        parent: id(parent)?,
                        r: num(r)?,
                        x: num(x)?,
                        pv,
                    });
                }
                _ => {
                    return Err(Error::parse(
                        &loc,
                        "expected `bus <id> parent <id> r <val> x <val> [pv pmin pmax qmin qmax]`",
                    ))
                }
            }
        }
        build_feeder(&lines, v0)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("v0 {}\n", self.v0);
        for l in self.lines() {
            out.push_str(&format!("bus {} parent {} r {} x {}", l.bus, l.parent, l.r, l.x));
            if let Some(s) = l.pv {
                out.push_str(&format!(" pv {} {} {} {}", s.p_min, s.p_max, s.q_min, s.q_max));
            }
            out.push('\n');
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?).map_err(|e| match e {
            Error::Parse { location, message } => Error::Parse {
                location: format!("{}: {location}", path.display()),
                message,
            },
            Error::Feeder(msg) => Error::Feeder(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_text())
    }
}

/// The default test feeder: an 8-bus trunk with a 4-bus lateral hanging off
/// each of trunk buses 2..=8, and a PV inverter at the end of every lateral.
pub fn default_feeder() -> FeederModel {
    const TRUNK: usize = 8;
    const LATERAL: usize = 4;
    let pv = |bus| PvSpec {
        bus,
        p_min: 0.0,
        p_max: 1.6,
        q_min: -0.8,
        q_max: 0.8,
    };
    let mut lines = Vec::new();
    for bus in 1..=TRUNK {
        lines.push(LineSpec {
            bus,
            parent: bus - 1,
            r: 0.0006,
            x: 0.0004,
            pv: None,
        });
    }
    let mut next = TRUNK + 1;
    for root in 2..=TRUNK {
        let mut parent = root;
        for step in 0..LATERAL {
            let bus = next;
            next += 1;
            lines.push(LineSpec {
                bus,
                parent,
                r: 0.0010,
                x: 0.0006,
                pv: (step == LATERAL - 1).then(|| pv(bus)),
            });
            parent = bus;
        }
    }
    build_feeder(&lines, 1.0).expect("default feeder is a valid tree")
}

/// Groups buses by parent, for walking the tree top-down.
pub fn children(feeder: &FeederModel) -> BTreeMap<usize, Vec<usize>> {
    let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for bus in 1..=feeder.buses() {
        out.entry(feeder.parent(bus)).or_default().push(bus);
    }
    out
}
