use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{controller_step, Band, BusPower, DualState, FeederModel, Gains};
use crate::datamodel::{write_text, IoDataset, Partition};
use crate::error::{Error, Result};
use crate::graph::CommGraph;
use crate::netsim::AuditReport;
use crate::oracle::{unvec_blocks, vec_blocks, ReferenceModel};
use crate::solver::{run, AdamConfig, InitSpec, Outcome, Problem, RunOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// Controller disabled.
    NoControl,
    /// Controller driven by the feeder's own sensitivity matrix.
    KnownModel,
    /// One identification run on an excitation window before control starts.
    OfflineIdentified,
    /// Sliding-window re-identification during operation.
    OnlineIdentified,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::NoControl,
        Scenario::KnownModel,
        Scenario::OfflineIdentified,
        Scenario::OnlineIdentified,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::NoControl => "no_control",
            Scenario::KnownModel => "known_model",
            Scenario::OfflineIdentified => "offline_identified",
            Scenario::OnlineIdentified => "online_identified",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario `{s}`")))
    }
}

/// Per-bus base loads scaled by a per-step multiplier. Steps past the end
/// of `multipliers` reuse its last entry; an empty list means 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadProfile {
    pub base: BusPower,
    pub multipliers: Vec<f64>,
}

impl LoadProfile {
    pub fn constant(base: BusPower) -> Self {
        Self {
            base,
            multipliers: Vec::new(),
        }
    }

    pub fn multiplier(&self, t: usize) -> f64 {
        self.multipliers
            .get(t)
            .or(self.multipliers.last())
            .copied()
            .unwrap_or(1.0)
    }

    pub fn at(&self, t: usize) -> BusPower {
        self.base.scaled(self.multiplier(t))
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub horizon: usize,
    /// Identification window length `T`.
    pub window: usize,
    /// Extra excitation steps kept out of the window to test predictions.
    pub held_out: usize,
    /// Online mode: re-identify every this many steps.
    pub refresh_every: usize,
    /// Online mode: solver rounds per re-identification.
    pub online_iters: u64,
    pub band: Band,
    /// The controller regulates to the band shrunk by this much.
    pub margin: f64,
    pub gains: Gains,
    /// Half-width of the uniform probing deviations on `(p, q)`.
    pub probe_amplitude: f64,
    /// Half-width of the uniform dither added in online mode.
    pub dither: f64,
    pub noise_std: f64,
    pub seed: u64,
    /// `None` uses a uniform per-bus load of `(0.5, 0.25)`.
    pub loads: Option<LoadProfile>,
    /// `None` is a ring over the agents.
    pub graph: Option<CommGraph>,
    /// Solver settings for the offline run; online refreshes override the
    /// iteration budget with `online_iters`.
    pub solver: RunOptions,
}

/// Offline identification budget on the default feeder. The baseline
/// iteration reaches a held-out prediction error near 1e-7 here.
pub const FEEDER_ITERS: u64 = 140_000;

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::NoControl,
            horizon: 400,
            window: 140,
            held_out: 40,
            refresh_every: 1,
            online_iters: 200,
            band: Band::default(),
            margin: 0.005,
            gains: Gains::default(),
            probe_amplitude: 0.5,
            dither: 0.02,
            noise_std: 0.0,
            seed: 0,
            loads: None,
            graph: None,
            solver: RunOptions {
                config: AdamConfig {
                    iters: FEEDER_ITERS,
                    ..AdamConfig::default()
                },
                trace_every: 1000,
                ..RunOptions::default()
            },
        }
    }
}

impl ScenarioConfig {
    pub fn default_loads(feeder: &FeederModel) -> LoadProfile {
        LoadProfile::constant(BusPower::uniform(feeder.buses(), 0.5, 0.25))
    }

    fn validate(&self, m: usize) -> Result<()> {
        if self.horizon == 0 || self.window == 0 || self.refresh_every == 0 {
            return Err(Error::Config(
                "horizon, window and refresh cadence must be positive".into(),
            ));
        }
        if !(self.probe_amplitude > 0.0 && self.dither >= 0.0 && self.noise_std >= 0.0 && self.margin >= 0.0) {
            return Err(Error::Config("amplitudes, noise and margin must be nonnegative".into()));
        }
        if self.band.v_min + 2.0 * self.margin >= self.band.v_max {
            return Err(Error::Config("voltage band is empty after the margin".into()));
        }
        if self.window < m {
            eprintln!(
                "warning: window of {} samples cannot excite {} inputs; the identified model is not unique",
                self.window, m
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioRow {
    pub t: usize,
    pub bus: usize,
    pub v: f64,
    pub p: f64,
    pub q: f64,
    pub err_max: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct IdentificationSummary {
    /// `max |Â − A|` against the feeder's sensitivity matrix.
    pub err_max: f64,
    /// `‖Â ΔU − ΔV‖_F / ‖ΔV‖_F` on the held-out excitation steps.
    pub prediction_rel: f64,
    pub audit: AuditReport,
    pub messages: u64,
    pub certificate_holds: bool,
    /// Identification runs performed.
    pub runs: usize,
}

#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub scenario: Scenario,
    pub rows: Vec<ScenarioRow>,
    /// Bus voltages at every step.
    pub voltages: Vec<DVector<f64>>,
    /// Share of steps with at least one bus outside the band.
    pub violation_fraction: f64,
    /// Largest band violation over the second half of the horizon.
    pub post_settle_max_violation: f64,
    pub identification: Option<IdentificationSummary>,
}

impl ScenarioOutcome {
    pub fn settled(&self) -> bool {
        self.post_settle_max_violation == 0.0
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,bus,v,p,q,err_max\n");
        for r in &self.rows {
            let err = r.err_max.map(|e| format!("{e:e}")).unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{},{}\n", r.t, r.bus, r.v, r.p, r.q, err));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_csv())
    }
}

/// Input/output deviations collected by probing around `u_nom`.
struct Excitation {
    train: IoDataset,
    test_u: DMatrix<f64>,
    test_y: DMatrix<f64>,
}

fn excite(
    feeder: &FeederModel,
    config: &ScenarioConfig,
    u_nom: &[f64],
    loads: &BusPower,
    probe_rng: &mut ChaCha8Rng,
    noise_rng: &mut ChaCha8Rng,
) -> Result<Excitation> {
    let m = u_nom.len();
    let steps = config.window + config.held_out;
    let v_nom = feeder.measure(&feeder.scatter_controls(u_nom), loads, 0.0, noise_rng);
    let mut du = DMatrix::zeros(m, steps);
    let mut dv = DMatrix::zeros(feeder.buses(), steps);
    let a = config.probe_amplitude;
    for t in 0..steps {
        let mut u = u_nom.to_vec();
        for (k, spec) in feeder.pv().iter().enumerate() {
            let (p, q) = spec.project(
                u_nom[2 * k] + probe_rng.random_range(-a..=a),
                u_nom[2 * k + 1] + probe_rng.random_range(-a..=a),
            );
            u[2 * k] = p;
            u[2 * k + 1] = q;
        }
        let v = feeder.measure(&feeder.scatter_controls(&u), loads, config.noise_std, noise_rng);
        for j in 0..m {
            du[(j, t)] = u[j] - u_nom[j];
        }
        dv.set_column(t, &(v - &v_nom));
    }
    let train = IoDataset::from_matrices(du.columns(0, config.window).into(), dv.columns(0, config.window).into())?;
    Ok(Excitation {
        train,
        test_u: du.columns(config.window, config.held_out).into(),
        test_y: dv.columns(config.window, config.held_out).into(),
    })
}

fn prediction_error(model: &DMatrix<f64>, u: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    if y.ncols() == 0 {
        return f64::NAN;
    }
    let scale = y.norm();
    let err = (model * u - y).norm();
    if scale > 0.0 {
        err / scale
    } else {
        err
    }
}

/// Running identification state shared by the offline and online modes.
struct Identifier<'a> {
    partition: &'a Partition,
    graph: CommGraph,
    truth: ReferenceModel,
    x: Vec<DVector<f64>>,
    audit: AuditReport,
    messages: u64,
    certificate_holds: bool,
    runs: usize,
}

impl Identifier<'_> {
    fn identify(&mut self, scenario: Scenario, data: IoDataset, options: &RunOptions) -> Result<()> {
        let problem = Problem::new(data, self.partition.clone(), self.graph.clone())?;
        let opts = RunOptions {
            init: Some(InitSpec {
                x0: self.x.clone(),
                w0: None,
            }),
            ..options.clone()
        };
        let out = run(&problem, &opts, Some(&self.truth))?;
        if let Outcome::Diverged { k, reason } = out.outcome {
            return Err(Error::Diverged {
                k,
                reason: format!("scenario {scenario}, identification run {}: {reason}", self.runs + 1),
            });
        }
        self.x = out.x_blocks();
        if let Some(report) = out.audit {
            self.audit.merge(report);
        }
        self.messages += out.log.total_messages();
        self.certificate_holds &= out.certificate_holds;
        self.runs += 1;
        Ok(())
    }

    fn model(&self) -> Result<DMatrix<f64>> {
        unvec_blocks(&self.x, self.partition)
    }

    fn summary(&self, test_u: &DMatrix<f64>, test_y: &DMatrix<f64>) -> Result<IdentificationSummary> {
        let model = self.model()?;
        Ok(IdentificationSummary {
            err_max: (&model - &self.truth.a_star).amax(),
            prediction_rel: prediction_error(&model, test_u, test_y),
            audit: self.audit.clone(),
            messages: self.messages,
            certificate_holds: self.certificate_holds,
            runs: self.runs,
        })
    }
}

/// Simulates one scenario on `feeder`.
///
/// Identification scenarios first probe the feeder for
/// `window + held_out` steps with the loads of step 0 and the controls at
/// their box centers. The control horizon then starts from the box centers
/// with zero duals.
pub fn run_scenario(feeder: &FeederModel, config: &ScenarioConfig) -> Result<ScenarioOutcome> {
    let partition = feeder.partition()?;
    let m = partition.m();
    config.validate(m)?;
    let graph = match &config.graph {
        Some(g) => g.clone(),
        None => CommGraph::ring(partition.n_agents()),
    };
    let loads = config
        .loads
        .clone()
        .unwrap_or_else(|| ScenarioConfig::default_loads(feeder));
    let truth = feeder.sensitivity();
    let mut probe_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));

    let u_nom: Vec<f64> = feeder
        .pv()
        .iter()
        .flat_map(|s| {
            let (p, q) = s.center();
            [p, q]
        })
        .collect();

    let scenario = config.scenario;
    let identifying = matches!(scenario, Scenario::OfflineIdentified | Scenario::OnlineIdentified);
    let mut identifier = Identifier {
        partition: &partition,
        graph,
        truth: ReferenceModel {
            a_star: truth.clone(),
            unique: true,
        },
        x: vec_blocks(&DMatrix::zeros(truth.nrows(), m), &partition),
        audit: AuditReport::default(),
        messages: 0,
        certificate_holds: true,
        runs: 0,
    };
    let excitation = if identifying {
        Some(excite(
            feeder,
            config,
            &u_nom,
            &loads.at(0),
            &mut probe_rng,
            &mut noise_rng,
        )?)
    } else {
        None
    };
    let online_opts = RunOptions {
        config: crate::solver::AdamConfig {
            iters: config.online_iters,
            ..config.solver.config
        },
        trace_every: 0,
        ..config.solver.clone()
    };
    if let Some(ex) = &excitation {
        let opts = if scenario == Scenario::OnlineIdentified {
            &online_opts
        } else {
            &config.solver
        };
        identifier.identify(scenario, ex.train.clone(), opts)?;
    }
    let mut model = match scenario {
        Scenario::NoControl | Scenario::KnownModel => truth.clone(),
        _ => identifier.model()?,
    };
    let err_now = |model: &DMatrix<f64>| identifying.then(|| (model - &truth).amax());

    let mut window_u: Option<DMatrix<f64>> = excitation.as_ref().map(|e| e.train.u().clone());
    let mut window_y: Option<DMatrix<f64>> = excitation.as_ref().map(|e| e.train.y().clone());
    let mut oldest = 0;

    let control_band = config.band.shrink(config.margin);
    let mut duals = DualState::zeros(feeder.buses());
    let mut u = u_nom.clone();
    let mut previous: Option<(Vec<f64>, DVector<f64>, f64)> = None;
    let mut rows = Vec::with_capacity(config.horizon * feeder.buses());
    let mut voltages = Vec::with_capacity(config.horizon);
    let mut violated_steps = 0;
    let mut post_settle = 0.0f64;
    let online = scenario == Scenario::OnlineIdentified;

    for t in 0..config.horizon {
        let mut applied = u.clone();
        if online && config.dither > 0.0 {
            for (k, spec) in feeder.pv().iter().enumerate() {
                let (p, q) = spec.project(
                    u[2 * k] + probe_rng.random_range(-config.dither..=config.dither),
                    u[2 * k + 1] + probe_rng.random_range(-config.dither..=config.dither),
                );
                applied[2 * k] = p;
                applied[2 * k + 1] = q;
            }
        }
        let load_mult = loads.multiplier(t);
        let injections = feeder.scatter_controls(&applied);
        let v = feeder.measure(&injections, &loads.at(t), config.noise_std, &mut noise_rng);

        // A new incremental pair replaces the oldest one in the window, as
        // long as the loads did not move between the two steps.
        if online {
            if let (Some((u_prev, v_prev, mult_prev)), Some(wu), Some(wy)) =
                (&previous, window_u.as_mut(), window_y.as_mut())
            {
                if *mult_prev == load_mult {
                    let du = DVector::from_iterator(m, applied.iter().zip(u_prev).map(|(a, b)| a - b));
                    wu.set_column(oldest, &du);
                    wy.set_column(oldest, &(&v - v_prev));
                    oldest = (oldest + 1) % wu.ncols();
                    if t % config.refresh_every == 0 {
                        let data = IoDataset::from_matrices(wu.clone(), wy.clone())?;
                        identifier.identify(scenario, data, &online_opts)?;
                        model = identifier.model()?;
                    }
                }
            }
            previous = Some((applied.clone(), v.clone(), load_mult));
        }

        let err = err_now(&model);
        let worst = v.iter().map(|vi| config.band.violation(*vi)).fold(0.0, f64::max);
        if worst > 0.0 {
            violated_steps += 1;
        }
        if t >= config.horizon / 2 {
            post_settle = post_settle.max(worst);
        }
        for bus in 1..=feeder.buses() {
            rows.push(ScenarioRow {
                t,
                bus,
                v: v[bus - 1],
                p: injections.p[bus - 1],
                q: injections.q[bus - 1],
                err_max: err,
            });
        }

        if scenario != Scenario::NoControl {
            controller_step(
                &mut duals,
                &model,
                &partition,
                &v,
                control_band,
                config.gains,
                feeder.pv(),
                &mut u,
            );
        }
        voltages.push(v);
    }

    let identification = match &excitation {
        Some(ex) => Some(identifier.summary(&ex.test_u, &ex.test_y)?),
        None => None,
    };
    Ok(ScenarioOutcome {
        scenario,
        rows,
        voltages,
        violation_fraction: violated_steps as f64 / config.horizon as f64,
        post_settle_max_violation: post_settle,
        identification,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::powerflow::default_feeder;
    use crate::solver::Mode;

    fn config(scenario: Scenario) -> ScenarioConfig {
        ScenarioConfig {
            scenario,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn scenario_names_round_trip() {
        for s in Scenario::ALL {
            assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
        }
        assert!("all".parse::<Scenario>().is_err());
    }

    #[test]
    fn load_profile_extends_last_multiplier() {
        let p = LoadProfile {
            base: BusPower::uniform(2, 1.0, 0.5),
            multipliers: vec![1.0, 2.0],
        };
        assert_eq!(p.multiplier(0), 1.0);
        assert_eq!(p.multiplier(7), 2.0);
        assert_eq!(p.at(5).p[1], 2.0);
        assert_eq!(LoadProfile::constant(BusPower::zeros(1)).multiplier(3), 1.0);
    }

    #[test]
    fn no_control_keeps_violating() {
        let f = default_feeder();
        let out = run_scenario(&f, &config(Scenario::NoControl)).unwrap();
        assert_eq!(out.violation_fraction, 1.0);
        assert!(out.post_settle_max_violation > 0.0);
        assert!(out.identification.is_none());
        assert_eq!(out.rows.len(), 400 * 36);
        // Constant loads and controls: every step is identical.
        assert_eq!(out.voltages[0], out.voltages[399]);
    }

    #[test]
    fn known_model_settles() {
        let f = default_feeder();
        let out = run_scenario(&f, &config(Scenario::KnownModel)).unwrap();
        assert!(out.settled(), "{}", out.post_settle_max_violation);
        let last = out.rows.iter().filter(|r| r.t == 399);
        for r in last {
            if let Some(spec) = f.pv().iter().find(|s| s.bus == r.bus) {
                assert!(r.p >= spec.p_min && r.p <= spec.p_max);
                assert!(r.q >= spec.q_min && r.q <= spec.q_max);
            }
        }
    }

    #[test]
    fn baseline_identification_predicts_held_out_steps() {
        let f = default_feeder();
        let mut cfg = config(Scenario::OfflineIdentified);
        cfg.horizon = 10;
        cfg.solver.mode = Mode::Baseline;
        cfg.solver.config = AdamConfig {
            iters: 3000,
            ..AdamConfig::default()
        };
        let out = run_scenario(&f, &cfg).unwrap();
        let id = out.identification.clone().unwrap();
        assert!(id.audit.passed());
        assert_eq!(id.messages, 3000 * 14);
        assert!(id.prediction_rel < 1.0);
        let csv = out.to_csv();
        assert!(csv.starts_with("t,bus,v,p,q,err_max\n"));
        assert_eq!(csv.lines().count(), 1 + 10 * 36);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let f = default_feeder();
        let mut cfg = config(Scenario::KnownModel);
        cfg.horizon = 0;
        assert!(matches!(run_scenario(&f, &cfg), Err(Error::Config(_))));
        let mut cfg = config(Scenario::KnownModel);
        cfg.margin = 0.06;
        assert!(run_scenario(&f, &cfg).is_err());
    }
}
