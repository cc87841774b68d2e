//! Centralized reference solutions and synthetic instances.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::datamodel::{parse_csv_row, read_text, write_text, IoDataset, Partition};
use crate::error::{Error, Result};

/// Above this condition number of `U Uᵀ` the normal equations are not
/// trusted and the pseudo-inverse is used instead.
pub const COND_LIMIT: f64 = 1e10;
/// Relative singular-value cutoff for rank decisions.
const RANK_TOL: f64 = 1e-12;
const MAX_REGENERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceModel {
    pub a_star: DMatrix<f64>,
    /// `U` has full row rank, so `a_star` is the only minimizer.
    pub unique: bool,
}

impl ReferenceModel {
    /// Columns of `a_star` owned by `agent`.
    pub fn block(&self, partition: &Partition, agent: usize) -> DMatrix<f64> {
        self.a_star.select_columns(partition.input_rows(agent))
    }

    /// Per-agent `vec(A*_i)`, the targets of the distributed iterates.
    pub fn x_blocks(&self, partition: &Partition) -> Vec<DVector<f64>> {
        vec_blocks(&self.a_star, partition)
    }
}

/// Least-squares fit `A* = argmin ‖Y − A U‖_F`.
///
/// Solves `(U Uᵀ) A*ᵀ = U Yᵀ` by Cholesky when `U Uᵀ` is well conditioned,
/// by QR of `Uᵀ` when `U` has full row rank but a poor condition number,
/// and otherwise returns the minimum-norm solution `Y U⁺`.
pub fn least_squares(dataset: &IoDataset) -> Result<ReferenceModel> {
    let u = dataset.u();
    let y = dataset.y();
    let m = dataset.m();
    let svd = u.clone().svd(false, false);
    let s_max = svd.singular_values.max();
    let s_min = if m > dataset.samples() {
        0.0
    } else {
        svd.singular_values.min()
    };
    let rank = svd
        .singular_values
        .iter()
        .filter(|s| **s > RANK_TOL * s_max.max(f64::MIN_POSITIVE))
        .count();
    let unique = rank == m;

    let cond = if s_min > 0.0 {
        (s_max / s_min).powi(2)
    } else {
        f64::INFINITY
    };
    if unique && cond <= COND_LIMIT {
        let gram = u * u.transpose();
        if let Some(chol) = gram.cholesky() {
            let at = chol.solve(&(u * y.transpose()));
            return Ok(ReferenceModel {
                a_star: at.transpose(),
                unique,
            });
        }
    }
    if unique {
        let qr = u.transpose().qr();
        let rhs = qr.q().transpose() * y.transpose();
        if let Some(at) = qr.r().solve_upper_triangular(&rhs) {
            return Ok(ReferenceModel {
                a_star: at.transpose(),
                unique,
            });
        }
    }
    let pinv = u
        .clone()
        .pseudo_inverse(RANK_TOL * s_max)
        .map_err(|e| Error::NonFinite(format!("pseudo-inverse of U failed: {e}")))?;
    Ok(ReferenceModel {
        a_star: y * pinv,
        unique,
    })
}

/// Splits `A` into the column-major vectorizations of its agent blocks.
pub fn vec_blocks(a: &DMatrix<f64>, partition: &Partition) -> Vec<DVector<f64>> {
    (0..partition.n_agents())
        .map(|i| DVector::from_column_slice(a.select_columns(partition.input_rows(i)).as_slice()))
        .collect()
}

/// Inverse of [`vec_blocks`].
pub fn unvec_blocks(x: &[DVector<f64>], partition: &Partition) -> Result<DMatrix<f64>> {
    if x.len() != partition.n_agents() {
        return Err(Error::Dimension(format!(
            "{} blocks for {} agents",
            x.len(),
            partition.n_agents()
        )));
    }
    let n = partition.n();
    let mut a = DMatrix::zeros(n, partition.m());
    for (i, xi) in x.iter().enumerate() {
        let cols = partition.input_rows(i);
        if xi.len() != n * cols.len() {
            return Err(Error::Dimension(format!(
                "agent {} block has length {}, expected {}",
                i + 1,
                xi.len(),
                n * cols.len()
            )));
        }
        for (c, &col) in cols.iter().enumerate() {
            a.column_mut(col).copy_from_slice(&xi.as_slice()[c * n..(c + 1) * n]);
        }
    }
    Ok(a)
}

/// `max |A(x) − A*|` over all entries, with `A(x)` assembled from blocks.
pub fn model_error(x: &[DVector<f64>], partition: &Partition, reference: &ReferenceModel) -> Result<f64> {
    let a = unvec_blocks(x, partition)?;
    if a.shape() != reference.a_star.shape() {
        return Err(Error::Dimension("reference model has the wrong shape".into()));
    }
    Ok((a - &reference.a_star).amax())
}

/// Same as [`model_error`] against pre-split targets, without assembling.
pub fn block_error<'a>(x: impl IntoIterator<Item = &'a DVector<f64>>, targets: &[DVector<f64>]) -> f64 {
    x.into_iter()
        .zip(targets)
        .map(|(a, b)| (a - b).amax())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmallScaleOptions {
    pub agents: usize,
    /// Inclusive range of inputs per agent.
    pub inputs: (usize, usize),
    /// Inclusive range of outputs per agent.
    pub outputs: (usize, usize),
    /// `T = samples_per_input · m`.
    pub samples_per_input: usize,
    /// Standard deviation of Gaussian output noise; zero gives `Y = A U`.
    pub noise_std: f64,
}

impl Default for SmallScaleOptions {
    fn default() -> Self {
        Self {
            agents: 5,
            inputs: (4, 5),
            outputs: (3, 4),
            samples_per_input: 2,
            noise_std: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub dataset: IoDataset,
    pub partition: Partition,
    /// The matrix the outputs were generated from.
    pub a_true: DMatrix<f64>,
    pub reference: ReferenceModel,
}

/// The default synthetic benchmark for `seed`.
pub fn generate_smallscale(seed: u64) -> Result<Instance> {
    generate_with(seed, &SmallScaleOptions::default())
}

/// Draws agent sizes, `A` and `U` with standard-normal entries, and
/// `Y = A U (+ noise)`. `U` is redrawn until it has full row rank.
pub fn generate_with(seed: u64, options: &SmallScaleOptions) -> Result<Instance> {
    let SmallScaleOptions {
        agents,
        inputs,
        outputs,
        samples_per_input,
        noise_std,
    } = *options;
    if agents == 0 || inputs.0 == 0 || outputs.0 == 0 || inputs.0 > inputs.1 || outputs.0 > outputs.1 {
        return Err(Error::Config(format!("invalid instance sizes {options:?}")));
    }
    if samples_per_input == 0 || !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::Config(format!("invalid sampling options {options:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input_sizes: Vec<usize> = (0..agents).map(|_| rng.random_range(inputs.0..=inputs.1)).collect();
    let output_sizes: Vec<usize> = (0..agents).map(|_| rng.random_range(outputs.0..=outputs.1)).collect();
    let partition = Partition::contiguous(&input_sizes, &output_sizes)?;
    let (m, n) = (partition.m(), partition.n());
    let t = samples_per_input * m;

    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let a_true = DMatrix::from_fn(n, m, |_, _| normal());
    let mut u = DMatrix::from_fn(m, t, |_, _| normal());
    let mut attempts = 1;
    while !full_row_rank(&u) {
        if attempts == MAX_REGENERATIONS {
            return Err(Error::Config("could not draw a full-rank input matrix".into()));
        }
        u = DMatrix::from_fn(m, t, |_, _| normal());
        attempts += 1;
    }
    let mut y = &a_true * &u;
    if noise_std > 0.0 {
        y += DMatrix::from_fn(n, t, |_, _| noise_std * normal());
    }
    let dataset = IoDataset::from_matrices(u, y)?;
    let reference = least_squares(&dataset)?;
    Ok(Instance {
        dataset,
        partition,
        a_true,
        reference,
    })
}

fn full_row_rank(u: &DMatrix<f64>) -> bool {
    if u.nrows() > u.ncols() {
        return false;
    }
    let s = u.singular_values();
    let max = s.max();
    max > 0.0 && s.min() > RANK_TOL * max
}

/// Writes `a` as comma-separated rows under a `#rows=..,cols=..` header.
pub fn save_matrix(path: &Path, a: &DMatrix<f64>) -> Result<()> {
    let mut text = format!("#rows={},cols={}\n", a.nrows(), a.ncols());
    for row in a.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    write_text(path, &text)
}

pub fn load_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let text = read_text(path)?;
    let loc = path.display().to_string();
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::parse(&loc, "empty matrix file"))?;
    let (rows, cols) = parse_shape(header.trim(), &loc)?;
    let mut data = Vec::with_capacity(rows * cols);
    let mut count = 0;
    for (no, line) in lines {
        let row = parse_csv_row(line, &format!("{loc}:{}", no + 1))?;
        if row.len() != cols {
            return Err(Error::parse(
                format!("{loc}:{}", no + 1),
                format!("expected {cols} values, found {}", row.len()),
            ));
        }
        data.extend(row);
        count += 1;
    }
    if count != rows {
        return Err(Error::parse(loc, format!("expected {rows} rows, found {count}")));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

fn parse_shape(header: &str, loc: &str) -> Result<(usize, usize)> {
    let body = header
        .strip_prefix('#')
        .ok_or_else(|| Error::parse(loc, "missing `#rows=..,cols=..` header"))?;
    let mut rows = None;
    let mut cols = None;
    for part in body.split(',') {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| Error::parse(loc, format!("bad header field `{part}`")))?;
        let value: usize = value
            .trim()
            .parse()
            .map_err(|_| Error::parse(loc, format!("bad header value `{value}`")))?;
        match key.trim() {
            "rows" => rows = Some(value),
            "cols" => cols = Some(value),
            other => return Err(Error::parse(loc, format!("unknown header key `{other}`"))),
        }
    }
    match (rows, cols) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::parse(loc, "header needs both rows and cols")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn recovers_generating_matrix_without_noise() {
        let inst = generate_smallscale(0).unwrap();
        assert!(inst.reference.unique);
        assert!((&inst.reference.a_star - &inst.a_true).amax() < 1e-10);
        let m = inst.partition.m();
        assert_eq!(inst.dataset.samples(), 2 * m);
    }

    #[test]
    fn instance_sizes_follow_options() {
        for seed in 0..20 {
            let inst = generate_smallscale(seed).unwrap();
            let p = &inst.partition;
            assert_eq!(p.n_agents(), 5);
            for i in 0..5 {
                assert!((4..=5).contains(&p.input_rows(i).len()));
                assert!((3..=4).contains(&p.output_rows(i).len()));
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_smallscale(7).unwrap();
        let b = generate_smallscale(7).unwrap();
        assert_eq!(a.dataset.u(), b.dataset.u());
        assert_eq!(a.dataset.y(), b.dataset.y());
        assert_eq!(a.partition, b.partition);
        assert_ne!(generate_smallscale(8).unwrap().dataset.u(), a.dataset.u());
    }

    #[test]
    fn noisy_fit_satisfies_normal_equations() {
        let inst = generate_with(
            3,
            &SmallScaleOptions {
                noise_std: 0.1,
                ..Default::default()
            },
        )
        .unwrap();
        let (u, y) = (inst.dataset.u(), inst.dataset.y());
        let a = &inst.reference.a_star;
        let residual = (y - a * u) * u.transpose();
        assert!(residual.amax() < 1e-9);
        assert!((a - &inst.a_true).amax() > 1e-6);
    }

    #[test]
    fn rank_deficient_input_uses_minimum_norm() {
        // Two identical input rows: any split of the weight fits, the
        // minimum-norm fit splits it evenly.
        let u = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let y = DMatrix::from_row_slice(1, 3, &[2.0, 4.0, 6.0]);
        let fit = least_squares(&IoDataset::from_matrices(u, y).unwrap()).unwrap();
        assert!(!fit.unique);
        assert!((fit.a_star[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((fit.a_star[(0, 1)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ill_conditioned_input_falls_back_to_qr() {
        let u = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 1.0, 1e-7, 0.0]);
        let a = DMatrix::from_row_slice(1, 2, &[2.0, -1.0]);
        let y = &a * &u;
        let fit = least_squares(&IoDataset::from_matrices(u, y).unwrap()).unwrap();
        assert!(fit.unique);
        assert!((&fit.a_star - &a).amax() < 1e-6, "{} vs {}", fit.a_star, a);
    }

    #[test]
    fn vec_round_trip_and_error() {
        let inst = generate_smallscale(1).unwrap();
        let x = inst.reference.x_blocks(&inst.partition);
        let back = unvec_blocks(&x, &inst.partition).unwrap();
        assert_eq!(back, inst.reference.a_star);
        assert_eq!(model_error(&x, &inst.partition, &inst.reference).unwrap(), 0.0);
        let mut bumped = x.clone();
        bumped[2][1] += 0.25;
        assert_eq!(model_error(&bumped, &inst.partition, &inst.reference).unwrap(), 0.25);
        assert_eq!(block_error(&bumped, &x), 0.25);
        assert_eq!(
            inst.reference.block(&inst.partition, 0).ncols(),
            inst.partition.input_rows(0).len()
        );
        assert!(unvec_blocks(&x[..4], &inst.partition).is_err());
    }

    #[test]
    fn matrix_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        let a = DMatrix::from_row_slice(2, 3, &[1.5, -2.0, 1e-17, 0.1, 3.0, -0.0]);
        save_matrix(&path, &a).unwrap();
        assert_eq!(load_matrix(&path).unwrap(), a);
        std::fs::write(&path, "#rows=2,cols=2\n1,2\n").unwrap();
        assert!(load_matrix(&path).is_err());
        std::fs::write(&path, "1,2\n").unwrap();
        assert!(load_matrix(&path).is_err());
    }

    proptest! {
        #[test]
        fn fit_is_optimal_against_perturbations(seed in 0u64..200, j in 0usize..12, delta in -1.0f64..1.0) {
            let inst = generate_with(seed, &SmallScaleOptions { agents: 2, inputs: (2, 3), outputs: (1, 2), noise_std: 0.5, ..Default::default() }).unwrap();
            let (u, y) = (inst.dataset.u(), inst.dataset.y());
            let cost = |a: &DMatrix<f64>| (y - a * u).norm_squared();
            let mut other = inst.reference.a_star.clone();
            let len = other.len();
            other[j % len] += delta;
            prop_assert!(cost(&other) >= cost(&inst.reference.a_star) - 1e-9);
        }
    }
}
