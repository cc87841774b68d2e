use nalgebra::{DMatrix, DVector};

use super::PvSpec;
use crate::datamodel::Partition;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Band {
    pub v_min: f64,
    pub v_max: f64,
}

impl Default for Band {
    fn default() -> Self {
        Self {
            v_min: 0.95,
            v_max: 1.05,
        }
    }
}

impl Band {
    /// Distance outside the band, zero inside.
    pub fn violation(&self, v: f64) -> f64 {
        (self.v_min - v).max(v - self.v_max).max(0.0)
    }

    pub fn shrink(&self, margin: f64) -> Self {
        Self {
            v_min: self.v_min + margin,
            v_max: self.v_max - margin,
        }
    }
}

/// Dual step `gamma` and primal step `eta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gains {
    pub gamma: f64,
    pub eta: f64,
}

impl Default for Gains {
    fn default() -> Self {
        Self { gamma: 1.0, eta: 40.0 }
    }
}

/// Multipliers of the upper and lower voltage limits, one per bus.
#[derive(Debug, Clone, PartialEq)]
pub struct DualState {
    pub upper: DVector<f64>,
    pub lower: DVector<f64>,
}

impl DualState {
    pub fn zeros(buses: usize) -> Self {
        Self {
            upper: DVector::zeros(buses),
            lower: DVector::zeros(buses),
        }
    }
}

/// One controller update.
///
/// Duals integrate band violations and stay nonnegative; then every agent
/// moves its own `(p, q)` against `A_iᵀ(λ⁺ − λ⁻)` using only its column
/// block `A_i` of `model`, and projects back onto its box.
#[allow(clippy::too_many_arguments)]
pub fn controller_step(
    duals: &mut DualState,
    model: &DMatrix<f64>,
    partition: &Partition,
    v: &DVector<f64>,
    band: Band,
    gains: Gains,
    pv: &[PvSpec],
    u: &mut [f64],
) {
    for (i, vi) in v.iter().enumerate() {
        duals.upper[i] = (duals.upper[i] + gains.gamma * (vi - band.v_max)).max(0.0);
        duals.lower[i] = (duals.lower[i] + gains.gamma * (band.v_min - vi)).max(0.0);
    }
    let net = &duals.upper - &duals.lower;
    for (k, spec) in pv.iter().enumerate() {
        let cols = partition.input_rows(k);
        let mut step = [0.0; 2];
        for (s, &c) in step.iter_mut().zip(cols) {
            *s = model.column(c).dot(&net);
        }
        let (p, q) = spec.project(u[cols[0]] - gains.eta * step[0], u[cols[1]] - gains.eta * step[1]);
        u[cols[0]] = p;
        u[cols[1]] = q;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::powerflow::default_feeder;

    fn setup() -> (DMatrix<f64>, Partition, Vec<PvSpec>) {
        let f = default_feeder();
        (f.sensitivity(), f.partition().unwrap(), f.pv().to_vec())
    }

    #[test]
    fn inside_band_is_stationary() {
        let (a, p, pv) = setup();
        let mut duals = DualState::zeros(36);
        let mut u: Vec<f64> = pv.iter().flat_map(|_| [0.5, 0.1]).collect();
        let before = u.clone();
        let v = DVector::from_element(36, 1.0);
        controller_step(&mut duals, &a, &p, &v, Band::default(), Gains::default(), &pv, &mut u);
        assert_eq!(duals, DualState::zeros(36));
        assert_eq!(u, before);
    }

    #[test]
    fn overvoltage_reduces_sensitive_injections() {
        let (a, p, pv) = setup();
        let mut duals = DualState::zeros(36);
        let mut u: Vec<f64> = pv.iter().flat_map(|_| [0.8, 0.0]).collect();
        let before = u.clone();
        let mut v = DVector::from_element(36, 1.0);
        let hot = pv[3].bus - 1;
        v[hot] = 1.06;
        controller_step(&mut duals, &a, &p, &v, Band::default(), Gains::default(), &pv, &mut u);
        assert!(duals.upper[hot] > 0.0);
        assert!(duals.lower.iter().all(|l| *l == 0.0));
        for c in 0..14 {
            if a[(hot, c)] > 0.0 {
                assert!(u[c] < before[c], "column {c}");
            } else {
                assert_eq!(u[c], before[c]);
            }
        }
    }

    #[test]
    fn projection_holds_limits() {
        let (a, p, pv) = setup();
        let mut duals = DualState::zeros(36);
        let mut u: Vec<f64> = pv.iter().flat_map(|s| [s.p_max, s.q_max]).collect();
        let v = DVector::from_element(36, 0.9);
        for _ in 0..10 {
            controller_step(&mut duals, &a, &p, &v, Band::default(), Gains::default(), &pv, &mut u);
            for (k, s) in pv.iter().enumerate() {
                assert_eq!((u[2 * k], u[2 * k + 1]), (s.p_max, s.q_max));
            }
        }
        assert!(duals.lower.iter().all(|l| *l > 0.0));
    }

    #[test]
    fn band_helpers() {
        let b = Band::default();
        assert_eq!(b.violation(1.0), 0.0);
        assert!((b.violation(0.94) - 0.01).abs() < 1e-15);
        assert!((b.violation(1.07) - 0.02).abs() < 1e-15);
        let s = b.shrink(0.01);
        assert!((s.v_min - 0.96).abs() < 1e-15 && (s.v_max - 1.04).abs() < 1e-15);
    }
}
