//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::Config;
use crate::datamodel::{write_text, IoDataset, Partition};
use crate::error::{Error, Result};
use crate::graph::CommGraph;
use crate::netsim::{AuditReport, Retention};
use crate::oracle::{generate_smallscale, load_matrix, save_matrix, unvec_blocks, ReferenceModel};
use crate::powerflow::{
    default_feeder, run_scenario, Band, BusPower, FeederModel, Gains, LoadProfile, Scenario, ScenarioConfig,
    FEEDER_ITERS,
};
use crate::solver::{run, AdamConfig, CertificateConfig, Mode, Outcome, Problem, RunOptions, RunOutput};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DIVERGED: i32 = 2;
pub const EXIT_AUDIT: i32 = 3;

const DEFAULT_ITERS: u64 = 200_000;

#[derive(Debug, Parser)]
#[command(
    name = "distid",
    version,
    about = "Distributed identification of linear input-output models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthetic benchmark: generate an instance, run both schemes, audit.
    Smallscale(Shared),
    /// Voltage-regulation scenarios on a radial feeder.
    Feeder {
        #[command(flatten)]
        shared: Shared,
        /// Feeder description; the built-in 36-bus feeder when omitted.
        #[arg(long)]
        feeder: Option<PathBuf>,
        /// no_control, known_model, offline_identified, online_identified or all.
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        online_iters: Option<u64>,
        #[arg(long)]
        noise_std: Option<f64>,
    },
    /// Identify a model from user-supplied data files.
    Identify {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        partition: Option<PathBuf>,
        /// Reference model to report errors against.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct Shared {
    /// `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    /// baseline or adam.
    #[arg(long)]
    mode: Option<String>,
    /// ring, path, complete, or an edge-list file.
    #[arg(long)]
    graph: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Trace row cadence in rounds.
    #[arg(long)]
    trace_every: Option<u64>,
    /// counts, metadata, or payloads:N.
    #[arg(long)]
    retention: Option<String>,
    /// Keep and write payloads of every N-th round.
    #[arg(long, value_name = "N")]
    dump_payloads: Option<u64>,
}

impl Shared {
    fn into_config(self) -> Result<Config> {
        let mut c = match &self.config {
            Some(path) => Config::load(path)?,
            None => Config::default(),
        };
        c.set_opt("seed", self.seed)?;
        c.set_opt("iters", self.iters)?;
        c.set_opt("alpha", self.alpha)?;
        c.set_opt("beta1", self.beta1)?;
        c.set_opt("beta2", self.beta2)?;
        c.set_opt("epsilon", self.epsilon)?;
        c.set_opt("mu", self.mu)?;
        c.set_opt("mode", self.mode)?;
        c.set_opt("graph", self.graph)?;
        c.set_opt("out", self.out.map(|p| p.display().to_string()))?;
        c.set_opt("trace_every", self.trace_every)?;
        c.set_opt("retention", self.retention)?;
        c.set_opt("dump_payloads", self.dump_payloads)?;
        Ok(c)
    }
}

/// Parses arguments, runs the command, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Smallscale(shared) => shared.into_config().and_then(|c| cmd_smallscale(&c)),
        Command::Feeder {
            shared,
            feeder,
            scenario,
            horizon,
            window,
            online_iters,
            noise_std,
        } => shared.into_config().and_then(|mut c| {
            c.set_opt("feeder", feeder.map(|p| p.display().to_string()))?;
            c.set_opt("scenario", scenario)?;
            c.set_opt("horizon", horizon)?;
            c.set_opt("window", window)?;
            c.set_opt("online_iters", online_iters)?;
            c.set_opt("noise_std", noise_std)?;
            cmd_feeder(&c)
        }),
        Command::Identify {
            shared,
            dataset,
            partition,
            reference,
        } => shared.into_config().and_then(|mut c| {
            c.set_opt("dataset", dataset.map(|p| p.display().to_string()))?;
            c.set_opt("partition", partition.map(|p| p.display().to_string()))?;
            c.set_opt("reference", reference.map(|p| p.display().to_string()))?;
            cmd_identify(&c)
        }),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Diverged { .. } => EXIT_DIVERGED,
                _ => EXIT_CONFIG,
            }
        }
    }
}

fn parse_retention(s: &str) -> Result<Retention> {
    match s {
        "counts" => Ok(Retention::CountsOnly),
        "metadata" => Ok(Retention::Metadata),
        other => match other.strip_prefix("payloads:").map(str::parse::<u64>) {
            Some(Ok(every)) if every > 0 => Ok(Retention::Payloads { every }),
            _ => Err(Error::Config(format!(
                "bad retention `{other}` (expected counts, metadata or payloads:N)"
            ))),
        },
    }
}

fn retention_name(r: Retention) -> String {
    match r {
        Retention::CountsOnly => "counts".into(),
        Retention::Metadata => "metadata".into(),
        Retention::Payloads { every } => format!("payloads:{every}"),
    }
}

/// Solver settings shared by all commands, with every default made explicit
/// in `resolved` for the manifest.
fn solver_options(config: &Config, resolved: &mut Config, default_iters: u64) -> Result<RunOptions> {
    let defaults = AdamConfig::default();
    let adam = AdamConfig {
        alpha: config.get_or("alpha", defaults.alpha)?,
        beta1: config.get_or("beta1", defaults.beta1)?,
        beta2: config.get_or("beta2", defaults.beta2)?,
        epsilon: config.get_or("epsilon", defaults.epsilon)?,
        iters: config.get_or("iters", default_iters)?,
    };
    adam.validate()?;
    let mu: f64 = config.get_or("mu", CertificateConfig::default().mu)?;
    if mu.is_nan() || mu <= 0.0 {
        return Err(Error::Config(format!("mu must be > 0, got {mu}")));
    }
    let trace_every: u64 = config.get_or("trace_every", 100)?;
    let mut retention = parse_retention(config.get_str("retention").unwrap_or("counts"))?;
    if let Some(every) = config.get_str("dump_payloads") {
        let every: u64 = every
            .parse()
            .ok()
            .filter(|e| *e > 0)
            .ok_or_else(|| Error::Config(format!("bad value `{every}` for `dump_payloads`")))?;
        retention = Retention::Payloads { every };
    }
    let audit: bool = config.get_or("audit", true)?;

    resolved.set("alpha", adam.alpha.to_string())?;
    resolved.set("beta1", adam.beta1.to_string())?;
    resolved.set("beta2", adam.beta2.to_string())?;
    resolved.set("epsilon", adam.epsilon.to_string())?;
    resolved.set("iters", adam.iters.to_string())?;
    resolved.set("mu", mu.to_string())?;
    resolved.set("trace_every", trace_every.to_string())?;
    resolved.set("retention", retention_name(retention))?;
    resolved.set("audit", audit.to_string())?;
    Ok(RunOptions {
        mode: Mode::Adam,
        config: adam,
        certificate: CertificateConfig { mu },
        init: None,
        trace_every,
        retention,
        audit,
        divergence_threshold: RunOptions::default().divergence_threshold,
    })
}

fn out_dir(config: &Config, resolved: &mut Config) -> Result<PathBuf> {
    let out = PathBuf::from(config.get_str("out").unwrap_or("out"));
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    resolved.set("out", out.display().to_string())?;
    Ok(out)
}

fn write_manifest(out: &Path, command: &str, resolved: &Config) -> Result<()> {
    let text = format!(
        "# distid {} {command}\n# rerun with: distid {command} --config {}\n{}",
        env!("CARGO_PKG_VERSION"),
        out.join("manifest.txt").display(),
        resolved.to_text()
    );
    write_text(&out.join("manifest.txt"), &text)
}

fn graph_for(config: &Config, resolved: &mut Config, agents: usize) -> Result<CommGraph> {
    let spec = config.get_str("graph").unwrap_or("ring");
    resolved.set("graph", spec)?;
    CommGraph::from_spec(spec, agents)
}

fn warn_certificate(label: &str, out: &RunOutput) {
    if !out.certificate_holds {
        let lambda = out
            .lambda_max_d
            .map_or_else(|| "unknown".to_string(), |l| format!("{l:.6e}"));
        eprintln!(
            "warning: {label}: step-size certificate fails (lambda_max(D) = {lambda}, bound = {:.6e})",
            out.certificate_bound
        );
    }
}

/// Writes the per-run artifacts and returns (diverged, audit passed).
fn write_run(out_dir: &Path, suffix: &str, out: &RunOutput) -> Result<(bool, bool)> {
    out.trace.write_csv(&out_dir.join(format!("trace{suffix}.csv")))?;
    if out.log.retention() != Retention::CountsOnly {
        out.log.write_csv(&out_dir.join(format!("wire{suffix}.csv")))?;
    }
    if matches!(out.log.retention(), Retention::Payloads { .. }) {
        out.log.write_payloads(&out_dir.join(format!("payloads{suffix}.bin")))?;
    }
    let diverged = matches!(out.outcome, Outcome::Diverged { .. });
    if let Outcome::Diverged { k, reason } = &out.outcome {
        eprintln!("error: run{suffix} diverged at iteration {k}: {reason}");
    }
    Ok((diverged, out.audit.as_ref().is_none_or(AuditReport::passed)))
}

fn exit_code(diverged: bool, audit_ok: bool) -> i32 {
    if diverged {
        EXIT_DIVERGED
    } else if !audit_ok {
        EXIT_AUDIT
    } else {
        EXIT_OK
    }
}

fn modes(config: &Config, default: &[Mode]) -> Result<Vec<Mode>> {
    match config.get_str("mode") {
        Some(m) => Ok(vec![m.parse()?]),
        None => Ok(default.to_vec()),
    }
}

fn audit_section(label: &str, report: Option<&AuditReport>) -> String {
    match report {
        Some(r) => format!("[{label}]\n{}", r.to_text()),
        None => format!("[{label}]\nresult=SKIPPED\n"),
    }
}

/// Generates the synthetic instance for `seed` and runs each requested
/// scheme on it.
pub fn cmd_smallscale(config: &Config) -> Result<i32> {
    let mut resolved = Config::default();
    let mut options = solver_options(config, &mut resolved, DEFAULT_ITERS)?;
    let seed: u64 = config.get_or("seed", 0)?;
    resolved.set("seed", seed.to_string())?;
    let modes = modes(config, &[Mode::Baseline, Mode::Adam])?;
    if modes.len() == 1 {
        resolved.set("mode", modes[0].to_string())?;
    }
    let out = out_dir(config, &mut resolved)?;

    let inst = generate_smallscale(seed)?;
    let graph = graph_for(config, &mut resolved, inst.partition.n_agents())?;
    inst.dataset.save(&out.join("dataset.csv"))?;
    inst.partition.save(&out.join("partition.txt"))?;
    save_matrix(&out.join("a_star.csv"), &inst.reference.a_star)?;
    write_manifest(&out, "smallscale", &resolved)?;

    let problem = Problem::new(inst.dataset.clone(), inst.partition.clone(), graph)?;
    let mut diverged = false;
    let mut audit_ok = true;
    let mut audit_text = String::new();
    for mode in modes {
        options.mode = mode;
        let result = run(&problem, &options, Some(&inst.reference))?;
        warn_certificate(&mode.to_string(), &result);
        let (d, a) = write_run(&out, &format!("_{mode}"), &result)?;
        diverged |= d;
        audit_ok &= a;
        audit_text.push_str(&audit_section(&mode.to_string(), result.audit.as_ref()));
        let last = result.trace.last();
        println!(
            "{mode}: iters={} err_max={} messages={} audit={} time={:.2?}",
            last.map_or(0, |r| r.k),
            last.and_then(|r| r.err_max)
                .map_or_else(|| "n/a".into(), |e| format!("{e:.3e}")),
            result.log.total_messages(),
            if a { "PASS" } else { "FAIL" },
            result.elapsed
        );
    }
    write_text(&out.join("audit.txt"), &audit_text)?;
    Ok(exit_code(diverged, audit_ok))
}

/// Runs the requested feeder scenarios and writes one trace per scenario.
pub fn cmd_feeder(config: &Config) -> Result<i32> {
    let mut resolved = Config::default();
    let mut solver = solver_options(config, &mut resolved, FEEDER_ITERS)?;
    let mode = modes(config, &[Mode::Adam])?[0];
    solver.mode = mode;
    resolved.set("mode", mode.to_string())?;

    let feeder = match config.get_str("feeder") {
        Some(path) => {
            resolved.set("feeder", path)?;
            FeederModel::load(Path::new(path))?
        }
        None => default_feeder(),
    };
    let base = ScenarioConfig::default();
    let seed: u64 = config.get_or("seed", base.seed)?;
    let band = Band {
        v_min: config.get_or("v_min", base.band.v_min)?,
        v_max: config.get_or("v_max", base.band.v_max)?,
    };
    let gains = Gains {
        gamma: config.get_or("gamma", base.gains.gamma)?,
        eta: config.get_or("eta", base.gains.eta)?,
    };
    let default_load = ScenarioConfig::default_loads(&feeder).base;
    let load_p: f64 = config.get_or("load_p", default_load.p[0])?;
    let load_q: f64 = config.get_or("load_q", default_load.q[0])?;
    let partition = feeder.partition()?;
    let graph = graph_for(config, &mut resolved, partition.n_agents())?;
    let template = ScenarioConfig {
        scenario: Scenario::NoControl,
        horizon: config.get_or("horizon", base.horizon)?,
        window: config.get_or("window", base.window)?,
        held_out: config.get_or("held_out", base.held_out)?,
        refresh_every: config.get_or("refresh_every", base.refresh_every)?,
        online_iters: config.get_or("online_iters", base.online_iters)?,
        band,
        margin: config.get_or("margin", base.margin)?,
        gains,
        probe_amplitude: config.get_or("probe_amplitude", base.probe_amplitude)?,
        dither: config.get_or("dither", base.dither)?,
        noise_std: config.get_or("noise_std", base.noise_std)?,
        seed,
        loads: Some(LoadProfile::constant(BusPower::uniform(feeder.buses(), load_p, load_q))),
        graph: Some(graph),
        solver,
    };
    for (key, value) in [
        ("seed", seed.to_string()),
        ("horizon", template.horizon.to_string()),
        ("window", template.window.to_string()),
        ("held_out", template.held_out.to_string()),
        ("refresh_every", template.refresh_every.to_string()),
        ("online_iters", template.online_iters.to_string()),
        ("v_min", band.v_min.to_string()),
        ("v_max", band.v_max.to_string()),
        ("margin", template.margin.to_string()),
        ("gamma", gains.gamma.to_string()),
        ("eta", gains.eta.to_string()),
        ("probe_amplitude", template.probe_amplitude.to_string()),
        ("dither", template.dither.to_string()),
        ("noise_std", template.noise_std.to_string()),
        ("load_p", load_p.to_string()),
        ("load_q", load_q.to_string()),
    ] {
        resolved.set(key, value)?;
    }
    let scenarios = match config.get_str("scenario").unwrap_or("all") {
        "all" => Scenario::ALL.to_vec(),
        name => vec![name.parse()?],
    };
    resolved.set("scenario", config.get_str("scenario").unwrap_or("all"))?;
    let out = out_dir(config, &mut resolved)?;
    write_manifest(&out, "feeder", &resolved)?;

    let mut audit_ok = true;
    let mut summary = String::new();
    let mut audit_text = String::new();
    for scenario in scenarios {
        let cfg = ScenarioConfig {
            scenario,
            ..template.clone()
        };
        let outcome = run_scenario(&feeder, &cfg)?;
        outcome.write_csv(&out.join(format!("scenario_{scenario}.csv")))?;
        let mut line = format!(
            "scenario={scenario} violation_fraction={} post_settle_max_violation={:e} settled={}",
            outcome.violation_fraction,
            outcome.post_settle_max_violation,
            outcome.settled()
        );
        if let Some(id) = &outcome.identification {
            line.push_str(&format!(
                " err_max={:e} prediction_rel={:e} runs={} messages={} audit={}",
                id.err_max,
                id.prediction_rel,
                id.runs,
                id.messages,
                if id.audit.passed() { "PASS" } else { "FAIL" }
            ));
            if !id.certificate_holds {
                eprintln!("warning: {scenario}: step-size certificate fails for alpha");
            }
            audit_ok &= id.audit.passed();
            audit_text.push_str(&audit_section(scenario.name(), Some(&id.audit)));
        }
        println!("{line}");
        summary.push_str(&line);
        summary.push('\n');
    }
    write_text(&out.join("summary.txt"), &summary)?;
    if !audit_text.is_empty() {
        write_text(&out.join("audit.txt"), &audit_text)?;
    }
    Ok(exit_code(false, audit_ok))
}

/// Identifies a model from dataset and partition files. Each agent's block
/// is written to its own file.
pub fn cmd_identify(config: &Config) -> Result<i32> {
    let mut resolved = Config::default();
    let mut options = solver_options(config, &mut resolved, DEFAULT_ITERS)?;
    let mode = modes(config, &[Mode::Adam])?[0];
    options.mode = mode;
    resolved.set("mode", mode.to_string())?;
    let required = |key: &str| {
        config
            .get_str(key)
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config(format!("`{key}` is required")))
    };
    let dataset_path = required("dataset")?;
    let partition_path = required("partition")?;
    resolved.set("dataset", dataset_path.display().to_string())?;
    resolved.set("partition", partition_path.display().to_string())?;
    let dataset = IoDataset::load(&dataset_path)?;
    let partition = Partition::load(&partition_path)?;
    let graph = graph_for(config, &mut resolved, partition.n_agents())?;
    let reference = match config.get_str("reference") {
        Some(path) => {
            resolved.set("reference", path)?;
            Some(ReferenceModel {
                a_star: load_matrix(Path::new(path))?,
                unique: true,
            })
        }
        None => None,
    };
    // Refuses disconnected graphs before any round runs.
    let problem = Problem::new(dataset, partition, graph)?;
    let out = out_dir(config, &mut resolved)?;
    write_manifest(&out, "identify", &resolved)?;

    let result = run(&problem, &options, reference.as_ref())?;
    warn_certificate(&mode.to_string(), &result);
    let (diverged, audit_ok) = write_run(&out, "", &result)?;
    write_text(
        &out.join("audit.txt"),
        &audit_section(&mode.to_string(), result.audit.as_ref()),
    )?;
    let model = unvec_blocks(&result.x_blocks(), problem.partition())?;
    for i in 0..problem.partition().n_agents() {
        let block = model.select_columns(problem.partition().input_rows(i));
        save_matrix(&out.join(format!("agent_{}.csv", i + 1)), &block)?;
    }
    let last = result.trace.last();
    println!(
        "{mode}: iters={} err_max={} audit={} time={:.2?}",
        last.map_or(0, |r| r.k),
        last.and_then(|r| r.err_max)
            .map_or_else(|| "n/a".into(), |e| format!("{e:.3e}")),
        if audit_ok { "PASS" } else { "FAIL" },
        result.elapsed
    );
    Ok(exit_code(diverged, audit_ok))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retention_names_round_trip() {
        for r in [
            Retention::CountsOnly,
            Retention::Metadata,
            Retention::Payloads { every: 5 },
        ] {
            assert_eq!(parse_retention(&retention_name(r)).unwrap(), r);
        }
        assert!(parse_retention("payloads:0").is_err());
        assert!(parse_retention("all").is_err());
    }

    #[test]
    fn exit_code_priority() {
        assert_eq!(exit_code(false, true), EXIT_OK);
        assert_eq!(exit_code(false, false), EXIT_AUDIT);
        assert_eq!(exit_code(true, false), EXIT_DIVERGED);
    }

    #[test]
    fn bad_flags_are_config_errors() {
        assert_eq!(main_with_args(["distid", "smallscale", "--alpha", "x"]), EXIT_CONFIG);
        assert_eq!(main_with_args(["distid", "frobnicate"]), EXIT_CONFIG);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().display().to_string();
        assert_eq!(
            main_with_args(["distid", "smallscale", "--mode", "sgd", "--out", &out]),
            EXIT_CONFIG
        );
    }

    #[test]
    fn solver_defaults_are_resolved() {
        let mut resolved = Config::default();
        let opts = solver_options(&Config::default(), &mut resolved, 7).unwrap();
        assert_eq!(opts.config.iters, 7);
        assert_eq!(resolved.get_str("beta2"), Some("0.95"));
        assert_eq!(resolved.get_str("retention"), Some("counts"));
    }
}
