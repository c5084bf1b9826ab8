//! `hipad`: scenario generation, training, evaluation, resampling and plots.

mod io;
mod plot;

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use hipad_core::config::RunConfig;
use hipad_core::error::{Error, Result};
use hipad_core::model::Model;
use hipad_core::planning_head::GranularityLayout;
use hipad_core::scene::{default_rig, generate_batch};
use hipad_core::simulator::{aggregate_metrics, run_batch, write_episode_csv, write_trace_csv, Policy};
use hipad_core::training::{build_samples, open_loop_eval, predict, train};
use hipad_core::trajectory::{build_gt, fit_path, resample_spatial, resample_temporal, write_set_rows, GT_CSV_HEADER};

#[derive(Parser)]
#[command(name = "hipad", version, about = "Multi-granularity planning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML run config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set training.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<String> {
        let mut v = self.overrides.clone();
        if let Some(s) = self.seed {
            v.push(format!("seed={s}"));
        }
        v
    }

    fn load(&self) -> Result<RunConfig> {
        io::load_config(self.config.as_deref(), &self.overrides())
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Model,
    Expert,
    Zero,
}

#[derive(Subcommand)]
enum Command {
    /// Write `count` scenarios cycling through every family, plus a manifest.
    GenScenarios {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train on a scenario directory; writes checkpoint, metrics and config.
    Train {
        #[arg(long)]
        scenarios: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Open-loop Avg. L2 of a checkpoint on a scenario set.
    EvalOpen {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scenarios: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-loop episodes; writes per-episode rows, traces and a summary.
    EvalClosed {
        /// Required for `--policy model`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        scenarios: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "model")]
        policy: PolicyArg,
        /// Disable the driving-style head.
        #[arg(long)]
        no_style: bool,
        /// Applied on top of the checkpoint's config (simulator and control
        /// values only for a model policy).
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Resample a trajectory or waypoint CSV under one granularity.
    Resample {
        #[arg(long)]
        input: PathBuf,
        /// `spatial:<meters>[:<points>]` or `temporal:<hz>[:<points>]`.
        #[arg(long)]
        spec: String,
        /// Defaults to stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Bird's-eye SVG of one training frame with ground truth and, given a
    /// checkpoint, the predicted waypoints.
    Plot {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Index into the scenario's training frames.
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

/// Exit status for an error: 2 config, 3 data, 4 training divergence,
/// 5 evaluation failure, 1 anything else.
fn exit_code(e: &Error, evaluating: bool) -> u8 {
    match e {
        Error::Config(_) | Error::Load(_) | Error::Layout(_) => 2,
        Error::Data(_) | Error::Parse { .. } | Error::Io(_) | Error::Json(_) | Error::DegeneratePath(_) => 3,
        Error::Divergence { .. } | Error::Training { .. } => 4,
        _ if evaluating => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let evaluating = matches!(cli.command, Command::EvalOpen { .. } | Command::EvalClosed { .. });
    match run(cli.command) {
        Ok(report) => {
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e, evaluating))
        }
    }
}

fn run(command: Command) -> Result<serde_json::Value> {
    match command {
        Command::GenScenarios { count, out, cfg } => gen_scenarios(count, &out, &cfg.load()?),
        Command::Train { scenarios, out, cfg } => cmd_train(&scenarios, &out, &cfg.load()?),
        Command::EvalOpen { checkpoint, scenarios, out } => eval_open(&checkpoint, &scenarios, out.as_deref()),
        Command::EvalClosed {
            checkpoint,
            scenarios,
            out,
            policy,
            no_style,
            cfg,
        } => eval_closed(checkpoint.as_deref(), &scenarios, &out, policy, !no_style, &cfg),
        Command::Resample { input, spec, output } => resample(&input, &spec, output.as_deref()),
        Command::Plot {
            scenario,
            checkpoint,
            frame,
            out,
            cfg,
        } => cmd_plot(&scenario, checkpoint.as_deref(), frame, &out, &cfg),
    }
}

fn gen_scenarios(count: usize, out: &Path, config: &RunConfig) -> Result<serde_json::Value> {
    let rig = default_rig(config.scene.image_width, config.scene.image_height);
    let scenarios = generate_batch(count, config.seed, &rig)?;
    io::create_dir(out)?;
    let hash = config.hash();
    let mut manifest = format!("{}\n", io::MANIFEST_HEADER);
    for (i, s) in scenarios.iter().enumerate() {
        let name = io::scenario_file_name(i);
        io::write_file(&out.join(&name), s.to_json())?;
        manifest.push_str(&format!("{name},{},{},{},{hash}\n", s.id, s.family.name(), s.seed));
    }
    io::write_file(&out.join(io::MANIFEST), manifest)?;
    Ok(json!({ "config_hash": hash, "scenarios": count, "out": out }))
}

fn cmd_train(scenarios: &Path, out: &Path, config: &RunConfig) -> Result<serde_json::Value> {
    let scn = io::load_scenarios(scenarios)?;
    io::create_dir(out)?;
    let hash = config.hash();
    io::write_file(&out.join("config.toml"), format!("# config_hash = \"{hash}\"\n{}", config.to_toml()))?;
    let metrics_path = out.join("metrics.csv");
    let mut metrics =
        File::create(&metrics_path).map_err(|e| Error::Data(format!("cannot write {}: {e}", metrics_path.display())))?;
    let trained = train(config, &scn, Some(&mut metrics as &mut dyn Write))?;
    trained.model.save(&out.join("checkpoint.bin"))?;
    let last = trained.log.last().expect("at least one epoch");
    let report = json!({
        "config_hash": hash,
        "epochs": trained.log.len(),
        "final_loss": last.loss.total,
        "open_loop_l2": last.open_loop_l2,
        "checkpoint": out.join("checkpoint.bin"),
    });
    io::write_file(&out.join("train_summary.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

fn eval_open(checkpoint: &Path, scenarios: &Path, out: Option<&Path>) -> Result<serde_json::Value> {
    let model = Model::load(checkpoint)?;
    let scn = io::load_scenarios(scenarios)?;
    let samples = build_samples(&scn, &model.layout, &model.config)?;
    let l2 = open_loop_eval(&model, &samples)?;
    let report = json!({
        "config_hash": model.config.hash(),
        "open_loop_l2": l2,
        "samples": samples.len(),
    });
    if let Some(p) = out {
        io::write_file(p, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}

fn eval_closed(
    checkpoint: Option<&Path>,
    scenarios: &Path,
    out: &Path,
    policy: PolicyArg,
    style_on: bool,
    cfg: &ConfigArgs,
) -> Result<serde_json::Value> {
    let model = match (policy, checkpoint) {
        (PolicyArg::Model, Some(p)) => Some(Model::load(p)?),
        (PolicyArg::Model, None) => return Err(Error::Config("--policy model needs --checkpoint".into())),
        _ => None,
    };
    let config = match &model {
        Some(m) => {
            if cfg.config.is_some() {
                return Err(Error::Config("--config is not accepted with a checkpoint; use --set".into()));
            }
            let base = m.config.to_toml();
            let c = io::apply_overrides(&base, &cfg.overrides())?;
            if c.model != m.config.model || c.granularity != m.config.granularity {
                return Err(Error::Config("overrides may not change the model or granularity config".into()));
            }
            c
        }
        None => cfg.load()?,
    };
    let scn = io::load_scenarios(scenarios)?;
    let pol = match (&model, policy) {
        (Some(m), _) => Policy::Model { model: m, style_on },
        (None, PolicyArg::Expert) => Policy::Expert,
        (None, _) => Policy::Zero,
    };
    let results = run_batch(&scn, pol, &config)?;
    let summary = aggregate_metrics(&results)?;
    let hash = config.hash();
    io::create_dir(out)?;
    let mut buf = Vec::new();
    write_episode_csv(&mut buf, &results)?;
    io::write_file(&out.join("episodes.csv"), io::with_hash_column(&String::from_utf8_lossy(&buf), &hash))?;
    let traces = io::create_dir(&out.join("traces"))?;
    for r in &results {
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &r.trace)?;
        io::write_file(
            &traces.join(format!("{}.csv", r.scenario)),
            io::with_hash_column(&String::from_utf8_lossy(&buf), &hash),
        )?;
    }
    let name = match policy {
        PolicyArg::Model => "model",
        PolicyArg::Expert => "expert",
        PolicyArg::Zero => "zero",
    };
    let report = json!({
        "config_hash": hash,
        "policy": name,
        "style_on": style_on,
        "summary": summary,
    });
    io::write_file(&out.join("summary.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Parses `kind:value[:points]`.
fn parse_spec(spec: &str) -> Result<(String, f64, Option<usize>)> {
    let bad = || Error::Config(format!("bad spec `{spec}`; expected spatial:<m>[:<n>] or temporal:<hz>[:<n>]"));
    let parts: Vec<&str> = spec.split(':').collect();
    if !(2..=3).contains(&parts.len()) || !matches!(parts[0], "spatial" | "temporal") {
        return Err(bad());
    }
    let value: f64 = parts[1].parse().map_err(|_| bad())?;
    if !(value.is_finite() && value > 0.0) {
        return Err(bad());
    }
    let n = match parts.get(2) {
        Some(s) => Some(s.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(bad)?),
        None => None,
    };
    Ok((parts[0].to_string(), value, n))
}

fn resample(input: &Path, spec: &str, output: Option<&Path>) -> Result<serde_json::Value> {
    let (kind, value, n) = parse_spec(spec)?;
    let file = File::open(input).map_err(|e| Error::Data(format!("{}: {e}", input.display())))?;
    let traj = io::read_trajectory(BufReader::new(file))?;
    let (set, speeds) = if kind == "spatial" {
        let path = fit_path(&traj)?;
        let n = n.unwrap_or(((path.length() / value) + 1e-9).floor() as usize).max(1);
        (resample_spatial(&path, value, n)?, Vec::new())
    } else {
        let n = n.unwrap_or((traj.duration() * value + 1e-9).floor() as usize).max(1);
        let set = resample_temporal(&traj, value, n)?;
        let gt = build_gt(&traj, std::slice::from_ref(&set.spec))?;
        (set, gt.step_speeds[0].clone())
    };
    let mut buf = format!("{GT_CSV_HEADER}\n").into_bytes();
    write_set_rows(&mut buf, &set, &speeds)?;
    match output {
        Some(p) => io::write_file(p, &buf)?,
        None => std::io::stdout().write_all(&buf)?,
    }
    Ok(json!({ "granularity_id": set.spec.id(), "rows": set.len(), "padded": set.len() - set.num_unpadded() }))
}

fn cmd_plot(scenario: &Path, checkpoint: Option<&Path>, frame: usize, out: &Path, cfg: &ConfigArgs) -> Result<serde_json::Value> {
    let model = checkpoint.map(Model::load).transpose()?;
    let config = match &model {
        Some(m) => m.config.clone(),
        None => cfg.load()?,
    };
    let layout = match &model {
        Some(m) => m.layout.clone(),
        None => GranularityLayout::from_config(&config.granularity, config.model.modalities)?,
    };
    let scn = io::load_scenario(scenario)?;
    let mut c = config.clone();
    c.scene.max_frames_per_scenario = frame + 1;
    let samples = build_samples(std::slice::from_ref(&scn), &layout, &c)?;
    let sample = samples
        .get(frame)
        .ok_or_else(|| Error::Data(format!("{} has {} frames, asked for {frame}", scn.id, samples.len())))?;
    let pred = model.as_ref().map(|m| predict(m, sample, true)).transpose()?;
    let hash = config.hash();
    let svg = plot::render(&sample.truth, &sample.gt, pred.as_ref(), &hash);
    io::write_file(out, svg)?;
    Ok(json!({ "config_hash": hash, "scenario": scn.id, "frame": sample.frame, "out": out }))
}
