use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{debug, info};
use ndarray::{Array1, ArrayD, Ix3};
use serde_json::json;

use drift_core::affinity::{FamilyId, FeatureTriplet};
use drift_core::config::{train_config_hash, ExperimentConfig};
use drift_core::drift_field::{compute_drift_field, unnormalized_drift_field};
use drift_core::generator::{AdamState, GeneratorState};
use drift_core::io::{read_tensor, write_atomic, write_tensor, Checkpoint};
use drift_core::mgda::coordinate_all;
use drift_core::trainer::{StepMetrics, TrainConfig, Trainer};
use drift_core::transport::{mixture_experiment, run_transport};
use drift_core::{DriftError, Result};

#[derive(Parser)]
#[command(name = "drift", version, about = "Drift-field experiments and desk-scale training")]
struct Cli {
    /// TOML experiment config; defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every seeded experiment.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `output`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dotted override, e.g. `train.epochs=2`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Particle transport toward a two-component mixture.
    Transport,
    /// Drift field of one N x M x C feature triplet.
    DriftField(DriftFieldArgs),
    /// MGDA coordination of k >= 2 gradient vectors.
    Mgda(MgdaArgs),
    /// Train the generator on synthetic phantoms.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out set.
    Eval(EvalArgs),
}

#[derive(Args)]
struct DriftFieldArgs {
    #[arg(long)]
    h: PathBuf,
    #[arg(long)]
    u_pos: PathBuf,
    #[arg(long)]
    u_neg: PathBuf,
}

#[derive(Args)]
struct MgdaArgs {
    /// Gradient tensor, flattened. Every gradient after the first is scaled by λ.
    #[arg(long = "grad", required = true)]
    grads: Vec<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Continue from a checkpoint written by an earlier run of the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop once this many steps are complete.
    #[arg(long)]
    stop_after: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| DriftError::InvalidArgument(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

fn rank3(t: ArrayD<f64>, path: &Path) -> Result<ndarray::Array3<f64>> {
    let shape = t.shape().to_vec();
    t.into_dimensionality::<Ix3>()
        .map_err(|_| DriftError::ShapeMismatch(format!("{} has shape {shape:?}, expected N x M x C", path.display())))
}

fn cmd_transport(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let t = &cfg.transport;
    let init = mixture_experiment(t.particles, t.targets, t.separation, t.sigma, t.eta, t.seed)?;
    let report = run_transport(&init, t.steps, &cfg.drift)?;
    write_text(&out.join("transport.csv"), &report.to_csv())?;
    write_tensor(&out.join("particles.dtf"), &report.final_particles.into_dyn())?;
    let first = report.energy_distance[0];
    let last = *report.energy_distance.last().expect("steps >= 1");
    println!("energy distance {first:.6e} -> {last:.6e}");
    Ok(())
}

fn cmd_drift_field(cfg: &ExperimentConfig, out: &Path, a: &DriftFieldArgs) -> Result<()> {
    let load = |p: &Path| read_tensor(p).and_then(|t| rank3(t, p));
    let triplet = FeatureTriplet::new(FamilyId::Raw, load(&a.h)?, load(&a.u_pos)?, load(&a.u_neg)?)?;
    let field = compute_drift_field(&triplet, &cfg.drift)?;
    let raw = unnormalized_drift_field(&triplet, &cfg.drift)?;
    write_tensor(&out.join("field.dtf"), &field.v.clone().into_dyn())?;
    let summary = json!({
        "shape": triplet.h.shape(),
        "scale": field.scale,
        "rms": field.rms(),
        "temperature_norms": field.temperature_norms,
        "unnormalized_mean_norm": raw.mean_vector_norm(),
    });
    write_json(&out.join("field.json"), &summary)?;
    println!("rms {:.6e} scale {:.6e}", field.rms(), field.scale);
    Ok(())
}

fn cmd_mgda(cfg: &ExperimentConfig, out: &Path, a: &MgdaArgs) -> Result<()> {
    if a.grads.len() < 2 {
        return Err(DriftError::InvalidArgument(format!(
            "mgda needs at least 2 gradients, got {}",
            a.grads.len()
        )));
    }
    let grads: Vec<Array1<f64>> = a
        .grads
        .iter()
        .map(|p| read_tensor(p).map(|t| t.iter().copied().collect()))
        .collect::<Result<_>>()?;
    let views: Vec<_> = grads.iter().map(|g| g.view()).collect();
    let (w, combined) = coordinate_all(&views, a.lambda, &cfg.mgda)?;
    write_tensor(&out.join("combined.dtf"), &combined.clone().into_dyn())?;
    write_json(
        &out.join("mgda.json"),
        &json!({
            "alpha": w.alpha,
            "lambda": a.lambda,
            "combined_norm": combined.dot(&combined).sqrt(),
        }),
    )?;
    let shown: Vec<String> = w.alpha.iter().map(|v| format!("{v:.6}")).collect();
    println!("alpha = ({})", shown.join(", "));
    Ok(())
}

fn state_from_checkpoint(ck: &Checkpoint, cfg: &TrainConfig, path: &Path) -> Result<GeneratorState> {
    if ck.config_hash != train_config_hash(cfg)? {
        return Err(DriftError::Config(format!(
            "{} was written with a different training config",
            path.display()
        )));
    }
    let mut state = GeneratorState::from_params(&cfg.generator, Array1::from(ck.params.clone()))?;
    state.opt = AdamState {
        m: Array1::from(ck.m.clone()),
        v: Array1::from(ck.v.clone()),
        t: ck.step,
    };
    state.validate()?;
    Ok(state)
}

fn checkpoint_of(trainer: &Trainer, hash: [u8; 32]) -> Checkpoint {
    let s = &trainer.state;
    Checkpoint {
        config_hash: hash,
        step: s.opt.t,
        params: s.params.to_vec(),
        m: s.opt.m.to_vec(),
        v: s.opt.v.to_vec(),
    }
}

fn metrics_csv(rows: &[String]) -> String {
    let mut text = String::from(StepMetrics::CSV_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    text
}

/// Data rows of an earlier metrics file up to and including `step`.
fn previous_rows(path: &Path, step: u64) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| {
            l.split(',')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s <= step)
        })
        .map(str::to_string)
        .collect())
}

fn write_eval(trainer: &Trainer, out: &Path) -> Result<()> {
    let report = trainer.evaluate()?;
    let value = serde_json::to_value(&report).map_err(|e| DriftError::InvalidArgument(e.to_string()))?;
    write_json(&out.join("eval.json"), &value)?;
    println!("eval mae {:.6e} feature energy distance {:.6e}", report.mae, report.feature_energy_distance);
    Ok(())
}

fn cmd_train(cfg: &ExperimentConfig, out: &Path, a: &TrainArgs) -> Result<()> {
    let hash = train_config_hash(&cfg.train)?;
    let metrics_path = out.join("metrics.csv");
    let (mut trainer, mut rows) = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::read(p)?;
            let state = state_from_checkpoint(&ck, &cfg.train, p)?;
            (Trainer::with_state(cfg.train.clone(), state)?, previous_rows(&metrics_path, ck.step)?)
        }
        None => (Trainer::new(cfg.train.clone())?, Vec::new()),
    };
    let total = cfg.train.total_steps();
    let stop = a.stop_after.unwrap_or(total).min(total);
    info!("training steps {}..{stop} of {total}", trainer.step_count());
    while trainer.step_count() < stop {
        let m = trainer.step()?;
        debug!("{}", m.csv_row());
        rows.push(m.csv_row());
        let every = cfg.train.checkpoint_every;
        if every > 0 && m.step % every == 0 {
            checkpoint_of(&trainer, hash).write(&out.join("checkpoints").join(format!("step_{:06}.dck", m.step)))?;
            write_text(&metrics_path, &metrics_csv(&rows))?;
            info!("step {} l_fid {:.4e} l_drift {:.4e}", m.step, m.l_fid, m.l_drift);
        }
    }
    write_text(&metrics_path, &metrics_csv(&rows))?;
    checkpoint_of(&trainer, hash).write(&out.join("checkpoint.dck"))?;
    if trainer.finished() {
        write_eval(&trainer, out)?;
    } else {
        println!("stopped after step {}", trainer.step_count());
    }
    Ok(())
}

fn cmd_eval(cfg: &ExperimentConfig, out: &Path, a: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::read(&a.checkpoint)?;
    let state = state_from_checkpoint(&ck, &cfg.train, &a.checkpoint)?;
    write_eval(&Trainer::with_state(cfg.train.clone(), state)?, out)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &cli.sets, cli.seed)?;
    let out = cli.out.clone().unwrap_or_else(|| cfg.output.clone());
    std::fs::create_dir_all(&out)?;
    write_text(&out.join("config.resolved.toml"), &cfg.to_toml()?)?;
    match &cli.cmd {
        Command::Transport => cmd_transport(&cfg, &out),
        Command::DriftField(a) => cmd_drift_field(&cfg, &out, a),
        Command::Mgda(a) => cmd_mgda(&cfg, &out, a),
        Command::Train(a) => cmd_train(&cfg, &out, a),
        Command::Eval(a) => cmd_eval(&cfg, &out, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
