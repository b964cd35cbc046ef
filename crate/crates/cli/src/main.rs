//! Command-line surface for the one-box exposure model: simulate chamber
//! experiments, fit the state-space model, smooth and forecast
//! concentrations, and summarize derived exposure quantities.
//!
//! Every command is reproducible from its inputs plus a single seed, and
//! each one echoes those inputs into its output directory. Exit codes
//! separate failure classes: 2 for configuration problems, 3 for bad data,
//! 4 for numerical failures.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use onebox::error::{Error, Result};
use onebox::experiment::{
    load_measurements, simulate_experiment, standard_schedule, write_measurements, CycleSchedule,
};
use onebox::mechanistic::{transition_coefficients, MechParams, ModelKind};
use onebox::model_eval::evaluate;
use onebox::predictive::{
    derived_posteriors, predict_observations, smooth_latent, write_predictions_csv,
    DerivedRequest, PredictionRequest, QuantileSummary,
};
use onebox::sampler::{
    read_samples_csv, run_chains, ChainConfig, FitModel, Posterior, PosteriorMeta,
};
use onebox::state_space::PriorSpec;

#[derive(Parser)]
#[command(name = "onebox", version, about = "Bayesian one-box exposure modeling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a cyclic chamber experiment from a config file.
    Simulate(SimulateArgs),
    /// Fit the state-space model to a measurement series.
    Fit(FitArgs),
    /// Posterior bands for the latent concentration at chosen times.
    Smooth(SmoothArgs),
    /// Posterior predictive measurements beyond the last sample.
    Forecast(ForecastArgs),
    /// Posterior summaries of derived exposure quantities.
    Derive(DeriveArgs),
    /// WAIC and fit metrics for a completed run.
    Waic(WaicArgs),
}

fn parse_model(s: &str) -> std::result::Result<ModelKind, String> {
    match s {
        "101" => Ok(ModelKind::Model101),
        "111" => Ok(ModelKind::Model111),
        other => Err(format!("unknown model {other:?}, expected 101 or 111")),
    }
}

fn model_label(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::Model101 => "101",
        ModelKind::Model111 => "111",
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulation config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

/// Shorthand for the conventional cycle layout, mirroring
/// `standard_schedule`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StandardScheduleSpec {
    n_cycles: usize,
    rise_min: f64,
    measure_min: f64,
    #[serde(default)]
    gap_min: f64,
    dt: f64,
}

/// Simulation config. Exactly one of `schedule` (explicit cycles) or
/// `standard_schedule` (conventional layout) must be present.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateConfig {
    model: ModelKind,
    params: MechParams,
    #[serde(default)]
    schedule: Option<CycleSchedule>,
    #[serde(default)]
    standard_schedule: Option<StandardScheduleSpec>,
    c0: f64,
    sigma2_v: f64,
    #[serde(default)]
    beta: Vec<f64>,
    #[serde(default)]
    covariates: Option<Vec<Vec<f64>>>,
    seed: u64,
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let text = read_text(&args.config)?;
    let cfg: SimulateConfig = serde_json::from_str(&text).map_err(|e| {
        Error::Config(format!("bad simulation config {}: {e}", args.config.display()))
    })?;
    let schedule = match (&cfg.schedule, &cfg.standard_schedule) {
        (Some(s), None) => {
            s.validate()?;
            s.clone()
        }
        (None, Some(sp)) => {
            standard_schedule(sp.n_cycles, sp.rise_min, sp.measure_min, sp.gap_min, sp.dt)?
        }
        _ => {
            return Err(Error::Config(
                "config needs exactly one of schedule or standard_schedule".into(),
            ))
        }
    };
    // The simulator itself integrates exactly, but a schedule whose dt
    // violates the discrete stability bound Q' dt / V < 1 produces data no
    // fit can use; reject it here rather than at fit time.
    transition_coefficients(&cfg.params, cfg.model, schedule.dt, true)?;
    let seed = args.seed.unwrap_or(cfg.seed);
    let sim = simulate_experiment(
        &cfg.params,
        cfg.model,
        &schedule,
        cfg.sigma2_v,
        &cfg.beta,
        cfg.covariates.as_deref(),
        cfg.c0,
        seed,
    )?;
    let out = ensure_out_dir(&args.out)?;
    write_measurements(&out.join("data.csv"), &schedule, &sim.series)?;
    write_latent_csv(&out.join("latent.csv"), &sim.latent_times, &sim.latent)?;
    write_text(&out.join("schedule.json"), &with_newline(schedule.to_json()))?;
    write_text(&out.join("config.json"), &text)?;
    println!("seed: {seed}");
    println!(
        "simulated {} samples over {} cycle(s) with model {}",
        sim.series.len(),
        schedule.cycles.len(),
        model_label(cfg.model)
    );
    Ok(())
}

#[derive(Args)]
struct FitArgs {
    /// Measurement CSV.
    #[arg(long)]
    data: PathBuf,
    /// Schedule JSON; inferred from the data when omitted.
    #[arg(long)]
    schedule: Option<PathBuf>,
    /// Prior JSON; defaults to the built-in priors.
    #[arg(long)]
    prior: Option<PathBuf>,
    /// Mechanistic model, 101 or 111.
    #[arg(long, value_parser = parse_model)]
    model: ModelKind,
    /// Chamber volume in cubic metres.
    #[arg(long)]
    volume: f64,
    /// Lets the transition noise scale grow during generation and shrink
    /// after, instead of staying constant.
    #[arg(long)]
    dynamic_variance: bool,
    /// Chain config JSON overriding run lengths and tuning; missing fields
    /// keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Independent chains, run concurrently.
    #[arg(long, default_value_t = 2)]
    chains: usize,
    /// Overrides the seed in the chain config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_fit(args: &FitArgs) -> Result<()> {
    let (inferred, series) = load_measurements(&args.data)?;
    let schedule = match &args.schedule {
        Some(p) => {
            let s = CycleSchedule::from_json(&read_text(p)?)?;
            series.validate(&s)?;
            s
        }
        None => inferred,
    };
    let prior = match &args.prior {
        Some(p) => PriorSpec::from_json(&read_text(p)?)?,
        None => PriorSpec::default(),
    };
    let mut cfg = match &args.config {
        Some(p) => serde_json::from_str::<ChainConfig>(&read_text(p)?)
            .map_err(|e| Error::Config(format!("bad chain config {}: {e}", p.display())))?,
        None => ChainConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let model = FitModel {
        kind: args.model,
        volume: args.volume,
        dynamic_variance: args.dynamic_variance,
    };
    let post = run_chains(&model, &prior, &schedule, &series, &cfg, args.chains)?;
    let out = ensure_out_dir(&args.out)?;
    post.write_samples_csv(&out.join("samples.csv"))?;
    let meta = post.meta(&cfg);
    write_text(&out.join("meta.json"), &to_pretty_json(&meta)?)?;
    copy_unless_same(&args.data, &out.join("data.csv"))?;
    write_text(&out.join("schedule.json"), &with_newline(schedule.to_json()))?;
    write_text(&out.join("prior.json"), &with_newline(prior.to_json()))?;
    print!("{}", format_fit_report(&meta));
    Ok(())
}

fn format_fit_report(meta: &PosteriorMeta) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let dynv = if meta.model.dynamic_variance { "on" } else { "off" };
    let _ = writeln!(
        out,
        "model {} in V = {} m3, dynamic variance {dynv}",
        model_label(meta.model.kind),
        meta.model.volume
    );
    let _ = writeln!(
        out,
        "{} draws kept across {} chain(s), {} burn-in each",
        meta.n_draws, meta.n_chains, meta.config.n_burn
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "{:<12}{:>14}{:>14}{:>10}{:>8}", "parameter", "mean", "sd", "ess", "rhat");
    for p in &meta.parameters {
        let rhat = match p.rhat {
            Some(r) => format!("{r:.3}"),
            None => "-".into(),
        };
        let note = if p.degenerate { "  constant" } else { "" };
        let _ = writeln!(
            out,
            "{:<12}{:>14.5}{:>14.5}{:>10.1}{:>8}{note}",
            p.name, p.mean, p.sd, p.ess, rhat
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "acceptance rates");
    for m in &meta.acceptance {
        let _ = writeln!(out, "  {:<14}{:.3}", m.name, m.rate);
    }
    out
}

/// Loads the artifacts a fit run leaves behind.
fn load_fit(dir: &Path) -> Result<(PosteriorMeta, CycleSchedule, Posterior)> {
    let meta: PosteriorMeta = serde_json::from_str(&read_text(&dir.join("meta.json"))?)
        .map_err(|e| Error::Data(format!("bad meta.json in {}: {e}", dir.display())))?;
    let schedule = CycleSchedule::from_json(&read_text(&dir.join("schedule.json"))?)?;
    let post = read_samples_csv(&dir.join("samples.csv"), &meta.model)?;
    Ok((meta, schedule, post))
}

#[derive(Args)]
struct SmoothArgs {
    /// Fit output directory holding samples.csv, meta.json, schedule.json.
    #[arg(long)]
    fit: PathBuf,
    /// Comma-separated times in minutes.
    #[arg(long, value_delimiter = ',')]
    times: Vec<f64>,
    /// Adds a uniform grid at this spacing over the sampled window.
    #[arg(long)]
    grid: Option<f64>,
    /// Seed for the predictive noise.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

fn grid_times(first: f64, last: f64, step: f64) -> Vec<f64> {
    let n = ((last - first) / step + 1e-9).floor() as usize;
    (0..=n).map(|k| first + k as f64 * step).collect()
}

fn cmd_smooth(args: &SmoothArgs) -> Result<()> {
    let (_, schedule, post) = load_fit(&args.fit)?;
    let mut times = args.times.clone();
    if let Some(step) = args.grid {
        if !(step > 0.0) || !step.is_finite() {
            return Err(Error::Config(format!("grid spacing must be positive, got {step}")));
        }
        times.extend(grid_times(schedule.cycles[0].start, schedule.horizon(), step));
    }
    if times.is_empty() {
        return Err(Error::Config("no times requested: pass --times or --grid".into()));
    }
    times.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    times.dedup();
    let req = PredictionRequest { times, x: None, seed: args.seed };
    let bands = smooth_latent(&post, &schedule, &req)?;
    let out = ensure_out_dir(&args.out)?;
    write_predictions_csv(&out.join("smooth.csv"), &bands)?;
    println!("smoothed {} time(s) from {} draws", bands.len(), post.n_draws());
    Ok(())
}

#[derive(Args)]
struct ForecastArgs {
    /// Fit output directory holding samples.csv, meta.json, schedule.json.
    #[arg(long)]
    fit: PathBuf,
    /// Minutes to extend past the last sample, generator off.
    #[arg(long)]
    horizon: f64,
    /// Spacing of forecast times; defaults to the sampling interval.
    #[arg(long)]
    step: Option<f64>,
    /// Seed for the predictive noise.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_forecast(args: &ForecastArgs) -> Result<()> {
    let (_, schedule, post) = load_fit(&args.fit)?;
    let step = args.step.unwrap_or(schedule.dt);
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Config(format!("step must be positive, got {step}")));
    }
    if !(args.horizon >= step) || !args.horizon.is_finite() {
        return Err(Error::Config(format!(
            "horizon must cover at least one step of {step}, got {}",
            args.horizon
        )));
    }
    let last = schedule.horizon();
    let n = (args.horizon / step + 1e-9).floor() as usize;
    let times: Vec<f64> = (1..=n).map(|k| last + k as f64 * step).collect();
    let req = PredictionRequest { times, x: None, seed: args.seed };
    let bands = predict_observations(&post, &schedule, &req)?;
    let out = ensure_out_dir(&args.out)?;
    write_predictions_csv(&out.join("forecast.csv"), &bands)?;
    println!("forecast {} time(s) past t = {last} min", bands.len());
    Ok(())
}

#[derive(Args)]
struct DeriveArgs {
    /// Fit output directory holding samples.csv, meta.json, schedule.json.
    #[arg(long)]
    fit: PathBuf,
    /// Averaging window in minutes; defaults to the experiment duration.
    #[arg(long)]
    t_avg: Option<f64>,
    /// Decay target as a fraction of the starting level; the decay time to
    /// such a threshold depends only on this ratio.
    #[arg(long, visible_alias = "thresholds", conflicts_with_all = ["decay_from", "decay_to"])]
    threshold: Option<f64>,
    /// Decay start concentration; requires --decay-to.
    #[arg(long, requires = "decay_to")]
    decay_from: Option<f64>,
    /// Decay end concentration; requires --decay-from.
    #[arg(long, requires = "decay_from")]
    decay_to: Option<f64>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_derive(args: &DeriveArgs) -> Result<()> {
    let (_, schedule, post) = load_fit(&args.fit)?;
    let t_avg = args
        .t_avg
        .unwrap_or_else(|| schedule.horizon() - schedule.cycles[0].start);
    let (decay_from, decay_to) = match args.threshold {
        Some(f) => {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!(
                    "threshold must be a fraction in (0, 1), got {f}"
                )));
            }
            (Some(1.0), Some(f))
        }
        None => (args.decay_from, args.decay_to),
    };
    let req = DerivedRequest { t_avg, decay_from, decay_to };
    let derived = derived_posteriors(&post, &req)?;
    let out = ensure_out_dir(&args.out)?;
    write_text(&out.join("derived.json"), &to_pretty_json(&derived)?)?;
    let line = |name: &str, q: &QuantileSummary| {
        println!("{name}: median {} (95% interval {} to {})", q.median, q.lower, q.upper);
    };
    line("steady-state concentration (mg/m3)", &derived.steady_state);
    line(
        &format!("average concentration over {t_avg} min (mg/m3)"),
        &derived.average,
    );
    line("removal rate (air changes per hour)", &derived.removal_rate_per_hour);
    if let Some(d) = &derived.decay_time {
        line("decay time (min)", d);
    }
    Ok(())
}

#[derive(Args)]
struct WaicArgs {
    /// Fit output directory holding samples.csv, meta.json, schedule.json.
    #[arg(long)]
    fit: PathBuf,
    /// Measurement CSV; defaults to the data echoed into the fit directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory; defaults to the fit directory itself.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_waic(args: &WaicArgs) -> Result<()> {
    let (_, schedule, post) = load_fit(&args.fit)?;
    let data = args.data.clone().unwrap_or_else(|| args.fit.join("data.csv"));
    let (_, series) = load_measurements(&data)?;
    series.validate(&schedule)?;
    let report = evaluate(&post, &schedule, &series)?;
    let out = ensure_out_dir(args.out.as_deref().unwrap_or(&args.fit))?;
    write_text(&out.join("eval.json"), &to_pretty_json(&report)?)?;
    println!("waic: {}", report.waic);
    println!("lppd: {}", report.lppd);
    println!("p_waic: {}", report.p_waic);
    println!("rss: {}", report.rss);
    println!("points: {}, draws: {}", report.n_points, report.n_draws);
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

fn with_newline(mut text: String) -> String {
    text.push('\n');
    text
}

fn to_pretty_json<T: serde::Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(with_newline)
        .map_err(|e| Error::Data(e.to_string()))
}

fn ensure_out_dir(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| {
        Error::Config(format!("cannot create output directory {}: {e}", dir.display()))
    })?;
    Ok(dir.to_path_buf())
}

/// Copies src to dst unless they are already the same file, as happens when
/// refitting from a previous run's own echo.
fn copy_unless_same(src: &Path, dst: &Path) -> Result<()> {
    if fs::canonicalize(src).ok() == fs::canonicalize(dst).ok() && dst.exists() {
        return Ok(());
    }
    fs::copy(src, dst)
        .map(|_| ())
        .map_err(|e| Error::Data(format!("cannot copy {} to {}: {e}", src.display(), dst.display())))
}

fn write_latent_csv(path: &Path, times: &[f64], latent: &[f64]) -> Result<()> {
    let mut text = String::from("time_min,concentration\n");
    for (t, c) in times.iter().zip(latent) {
        text.push_str(&format!("{t},{c}\n"));
    }
    write_text(path, &text)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Smooth(args) => cmd_smooth(args),
        Command::Forecast(args) => cmd_forecast(args),
        Command::Derive(args) => cmd_derive(args),
        Command::Waic(args) => cmd_waic(args),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) => 3,
        Error::Numerics(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_flag_parses_both_kinds() {
        assert_eq!(parse_model("101").unwrap(), ModelKind::Model101);
        assert_eq!(parse_model("111").unwrap(), ModelKind::Model111);
        assert!(parse_model("201").is_err());
    }

    #[test]
    fn simulate_config_requires_exactly_one_schedule_form() {
        let text = r#"{
            "model": "101",
            "params": {"G": 1000, "Q": 20, "Q_L": 0, "Q_R": 0,
                       "eps_L": 0, "eps_LF": 0, "eps_RF": 0, "V": 100},
            "standard_schedule": {"n_cycles": 1, "rise_min": 15.0,
                                  "measure_min": 20.0, "dt": 1.0},
            "c0": 10.0,
            "sigma2_v": 0.01,
            "seed": 7
        }"#;
        let cfg: SimulateConfig = serde_json::from_str(text).unwrap();
        assert!(cfg.schedule.is_none());
        assert_eq!(cfg.standard_schedule.as_ref().unwrap().n_cycles, 1);
        assert_eq!(cfg.standard_schedule.as_ref().unwrap().gap_min, 0.0);
        assert!(cfg.beta.is_empty());

        let both = text.replace(
            "\"standard_schedule\"",
            "\"schedule\": {\"dt\": 1.0, \"cycles\": []}, \"standard_schedule\"",
        );
        let cfg: SimulateConfig = serde_json::from_str(&both).unwrap();
        assert!(cfg.schedule.is_some() && cfg.standard_schedule.is_some());

        let unknown = text.replace("\"c0\"", "\"c_zero\"");
        assert!(serde_json::from_str::<SimulateConfig>(&unknown).is_err());
    }

    #[test]
    fn grid_covers_the_window_inclusively() {
        assert_eq!(grid_times(0.0, 3.0, 1.0), vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(grid_times(0.0, 3.0, 2.0), vec![0.0, 2.0]);
        let g = grid_times(0.0, 0.3, 0.1);
        assert_eq!(g.len(), 4);
        assert!((g[3] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn exit_codes_separate_error_classes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Data("x".into())), 3);
        assert_eq!(exit_code(&Error::Numerics("x".into())), 4);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
