//! Command-line shell: train the base model, foster per-interval experts,
//! assemble routers, sample, evaluate, and gradient-check — each driven by a
//! JSON config and emitting checkpoints, CSV traces, and JSON reports.
//!
//! Exit codes: 0 success, 1 runtime failure (including a failed gradient
//! check), 2 usage or configuration error, 3 training divergence, 4 stage or
//! compatibility mismatch.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use serde::Serialize;

use steplora::checkpoint::{self, Manifest};
use steplora::config::{RunConfig, SampleMode, Stage};
use steplora::data::sample_batch;
use steplora::error::Error;
use steplora::eval::{evaluate, EvalSettings};
use steplora::model::{Denoiser, ForwardMode};
use steplora::numerics::{finite_diff_check, Matrix, ParamStore};
use steplora::report;
use steplora::rng::CounterRng;
use steplora::sample::{sample, SamplerConfig};
use steplora::schedule::{forward_diffuse_batch, IntervalPartition, NoiseSchedule};
use steplora::train::{
    assemble_loss_on_batch, base_loss_on_batch, foster_loss_on_batch, train_assemble, train_base,
    train_foster, TrainReport,
};

const GRAD_CHECK_STEP: f64 = 1e-5;
const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

const USAGE: &str = "usage: steplora <command> --config <path> [--ckpt <dir>] [--out <dir>] [--seed <u64>]

commands:
  train-base    train the dense denoiser from scratch
  train-foster  fit one adapter per timestep interval over a frozen base
  assemble      train per-layer routers over frozen experts
  sample        run full-chain ancestral sampling from a checkpoint
  eval          score a checkpoint: interval losses, energy distance, drift
  grad-check    finite-difference audit of the training losses
";

struct Cli {
    command: String,
    config: PathBuf,
    ckpt: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
}

fn parse_args(args: &[String]) -> Result<Cli, String> {
    let mut it = args.iter();
    let command = it.next().ok_or_else(|| USAGE.to_string())?.clone();
    let mut config = None;
    let mut ckpt = None;
    let mut out = None;
    let mut seed = None;
    while let Some(flag) = it.next() {
        let mut value = || {
            it.next()
                .cloned()
                .ok_or_else(|| format!("flag {flag} needs a value"))
        };
        match flag.as_str() {
            "--config" => config = Some(PathBuf::from(value()?)),
            "--ckpt" => ckpt = Some(PathBuf::from(value()?)),
            "--out" => out = Some(PathBuf::from(value()?)),
            "--seed" => {
                seed = Some(
                    value()?
                        .parse::<u64>()
                        .map_err(|e| format!("bad --seed: {e}"))?,
                )
            }
            other => return Err(format!("unknown flag {other}\n{USAGE}")),
        }
    }
    let config = config.ok_or_else(|| format!("--config is required\n{USAGE}"))?;
    Ok(Cli {
        command,
        config,
        ckpt,
        out,
        seed,
    })
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::InvalidArg(_) => 2,
        Error::Divergence { .. } => 3,
        Error::StageMismatch { .. } | Error::MissingScale(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = match parse_args(&args) {
        Ok(cli) => cli,
        Err(msg) => {
            eprintln!("{msg}");
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn run(cli: &Cli) -> steplora::Result<ExitCode> {
    let mut config = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    match cli.command.as_str() {
        "train-base" => cmd_train_base(cli, &config),
        "train-foster" => cmd_train_foster(cli, &config),
        "assemble" => cmd_assemble(cli, &config),
        "sample" => cmd_sample(cli, &config),
        "eval" => cmd_eval(cli, &config),
        "grad-check" => cmd_grad_check(cli, &config),
        other => Err(Error::InvalidArg(format!(
            "unknown command {other}\n{USAGE}"
        ))),
    }
}

fn out_dir(cli: &Cli, config: &RunConfig) -> steplora::Result<PathBuf> {
    let dir = cli
        .out
        .clone()
        .or_else(|| config.out_dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::Config("no output directory (--out or out_dir)".into()))?;
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn require_ckpt(cli: &Cli) -> steplora::Result<&Path> {
    cli.ckpt
        .as_deref()
        .ok_or_else(|| Error::Config("this command needs --ckpt".into()))
}

/// A loaded checkpoint must have been produced under the same architecture
/// and schedule the current config describes.
fn check_compatible(config: &RunConfig, manifest: &Manifest) -> steplora::Result<()> {
    if config.model != manifest.config.model {
        return Err(Error::StageMismatch {
            expected: "matching model architecture".into(),
            found: "checkpoint with a different model section".into(),
        });
    }
    if config.schedule != manifest.config.schedule {
        return Err(Error::StageMismatch {
            expected: "matching schedule section".into(),
            found: "checkpoint with a different schedule".into(),
        });
    }
    Ok(())
}

fn expect_stage(manifest: &Manifest, expected: Stage) -> steplora::Result<()> {
    if manifest.stage != expected {
        return Err(Error::StageMismatch {
            expected: expected.to_string(),
            found: manifest.stage.to_string(),
        });
    }
    Ok(())
}

/// Stage-level training summary written next to the step trace.
#[derive(Serialize)]
struct TrainSummary {
    stage: String,
    steps: usize,
    final_loss: f64,
    trainable_scalars: usize,
    segments: Vec<Segment>,
}

#[derive(Serialize)]
struct Segment {
    #[serde(skip_serializing_if = "Option::is_none")]
    scale: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    interval: Option<usize>,
    start_step: usize,
    end_step: usize,
    final_loss: f64,
}

fn summarize(report: &TrainReport) -> TrainSummary {
    let mut segments: Vec<Segment> = Vec::new();
    for row in &report.trace {
        let same = segments
            .last()
            .map(|s| s.scale == row.scale && s.interval == row.interval)
            .unwrap_or(false);
        if same {
            let seg = segments.last_mut().unwrap();
            seg.end_step = row.step;
            seg.final_loss = row.loss;
        } else {
            segments.push(Segment {
                scale: row.scale,
                interval: row.interval,
                start_step: row.step,
                end_step: row.step,
                final_loss: row.loss,
            });
        }
    }
    TrainSummary {
        stage: report.stage.clone(),
        steps: report.trace.len(),
        final_loss: report.final_loss,
        trainable_scalars: report.trainable_scalars,
        segments,
    }
}

fn write_train_artifacts(
    dir: &Path,
    report: &TrainReport,
    store: &ParamStore,
    stage: Stage,
    config: &RunConfig,
    rng: &CounterRng,
) -> steplora::Result<()> {
    checkpoint::save(&dir.join("ckpt"), store, stage, config, rng.state())?;
    report::write_loss_csv(&dir.join("loss.csv"), report)?;
    report::write_json(&dir.join("report.json"), &summarize(report))?;
    println!(
        "{}: {} steps, final loss {:.6}, {} trainable scalars, {} ms",
        report.stage,
        report.trace.len(),
        report.final_loss,
        report.trainable_scalars,
        report.wall_ms
    );
    Ok(())
}

fn cmd_train_base(cli: &Cli, config: &RunConfig) -> steplora::Result<ExitCode> {
    if config.train.stage != Stage::Base {
        return Err(Error::Config(format!(
            "train-base needs train.stage = base, config says {}",
            config.train.stage
        )));
    }
    let dir = out_dir(cli, config)?;
    let sched = config.schedule.build()?;
    let model = Denoiser::new(config.model.clone(), sched.timesteps())?;
    let mut store = ParamStore::new();
    let root = CounterRng::seed(config.seed);
    model.init_base(&mut store, &mut root.derive("init-base"))?;
    let mut rng = root.derive("train-base");
    let report = train_base(
        &model,
        &mut store,
        &sched,
        &config.dataset,
        &config.train.params,
        &mut rng,
    )?;
    store.freeze_all();
    write_train_artifacts(&dir, &report, &store, Stage::Base, config, &rng)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_train_foster(cli: &Cli, config: &RunConfig) -> steplora::Result<ExitCode> {
    if config.train.stage != Stage::Foster {
        return Err(Error::Config(format!(
            "train-foster needs train.stage = foster, config says {}",
            config.train.stage
        )));
    }
    let adapters = config
        .adapters
        .clone()
        .ok_or_else(|| Error::Config("train-foster needs an adapters section".into()))?;
    let dir = out_dir(cli, config)?;
    let (mut store, manifest) = checkpoint::load(require_ckpt(cli)?)?;
    expect_stage(&manifest, Stage::Base)?;
    check_compatible(config, &manifest)?;

    let sched = config.schedule.build()?;
    let mut model = Denoiser::new(config.model.clone(), sched.timesteps())?;
    store.freeze_all();
    let root = CounterRng::seed(config.seed);
    model.attach_adapters(&mut store, adapters, &mut root.derive("attach-experts"))?;
    let mut rng = root.derive("train-foster");
    let report = train_foster(
        &model,
        &mut store,
        &sched,
        &config.dataset,
        &config.train.params,
        &mut rng,
    )?;
    write_train_artifacts(&dir, &report, &store, Stage::Foster, config, &rng)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_assemble(cli: &Cli, config: &RunConfig) -> steplora::Result<ExitCode> {
    if config.train.stage != Stage::Assemble {
        return Err(Error::Config(format!(
            "assemble needs train.stage = assemble, config says {}",
            config.train.stage
        )));
    }
    let adapters = config
        .adapters
        .clone()
        .ok_or_else(|| Error::Config("assemble needs an adapters section".into()))?;
    let dir = out_dir(cli, config)?;
    let (mut store, manifest) = checkpoint::load(require_ckpt(cli)?)?;
    expect_stage(&manifest, Stage::Foster)?;
    check_compatible(config, &manifest)?;

    // every configured scale must already have its experts in the checkpoint
    let sched = config.schedule.build()?;
    let mut model = Denoiser::new(config.model.clone(), sched.timesteps())?;
    for &scale in adapters.scales.scales() {
        let probe = steplora::model::expert_name(scale, 1, model.adapted_layers()[0], 'a');
        if !store.contains(&probe) {
            return Err(Error::MissingScale(scale));
        }
    }
    model.set_adapters(Some(adapters));
    store.freeze_all();
    model.attach_routers(&mut store)?;
    let mut rng = CounterRng::seed(config.seed).derive("train-assemble");
    let report = train_assemble(
        &model,
        &mut store,
        &sched,
        &config.dataset,
        &config.train.params,
        &mut rng,
    )?;
    write_train_artifacts(&dir, &report, &store, Stage::Assemble, config, &rng)?;
    Ok(ExitCode::SUCCESS)
}

/// Forward mode requested by the config, checked against what the
/// checkpoint actually contains.
fn resolve_mode(
    config: &RunConfig,
    manifest: &Manifest,
    model: &Denoiser,
    store: &ParamStore,
) -> steplora::Result<ForwardMode> {
    match config.sample.mode {
        SampleMode::Base => Ok(ForwardMode::Base),
        SampleMode::Foster => {
            let adapters = model.adapters().ok_or_else(|| Error::StageMismatch {
                expected: "checkpoint with experts (foster or assemble)".into(),
                found: manifest.stage.to_string(),
            })?;
            let scale = config
                .sample
                .foster_scale
                .unwrap_or_else(|| adapters.scales.core_scale());
            if !adapters.scales.contains(scale) {
                return Err(Error::MissingScale(scale));
            }
            Ok(ForwardMode::Foster { scale })
        }
        SampleMode::Assembled => {
            if model.adapters().is_none() || !model.has_routers(store) {
                return Err(Error::StageMismatch {
                    expected: "checkpoint with routers (assemble)".into(),
                    found: manifest.stage.to_string(),
                });
            }
            Ok(ForwardMode::Assembled)
        }
    }
}

/// Rebuild the model wrapper for a loaded checkpoint, binding the adapter
/// metadata recorded in its manifest.
fn model_for(
    manifest: &Manifest,
    config: &RunConfig,
) -> steplora::Result<(Denoiser, NoiseSchedule)> {
    check_compatible(config, manifest)?;
    let sched = config.schedule.build()?;
    let mut model = Denoiser::new(config.model.clone(), sched.timesteps())?;
    model.set_adapters(manifest.config.adapters.clone());
    Ok((model, sched))
}

fn cmd_sample(cli: &Cli, config: &RunConfig) -> steplora::Result<ExitCode> {
    let dir = out_dir(cli, config)?;
    let (store, manifest) = checkpoint::load(require_ckpt(cli)?)?;
    let (model, sched) = model_for(&manifest, config)?;
    let mode = resolve_mode(config, &manifest, &model, &store)?;
    let sampler = SamplerConfig {
        steps: sched.timesteps(),
        batch: config.sample.count,
        variance: config.sample.variance,
    };
    let mut rng = CounterRng::seed(config.seed).derive("sampling");
    let run = sample(&model, &store, &sched, &sampler, mode, None, &mut rng)?;
    report::write_samples_csv(&dir.join("samples.csv"), &run.samples)?;
    if !run.expert_log.is_empty() {
        report::write_expert_csv(&dir.join("experts.csv"), &run)?;
    }
    if !run.gate_log.is_empty() {
        report::write_gate_csv(&dir.join("gates.csv"), &run)?;
    }
    println!(
        "sampled {} vectors over {} reverse steps",
        config.sample.count,
        sched.timesteps()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(cli: &Cli, config: &RunConfig) -> steplora::Result<ExitCode> {
    let dir = out_dir(cli, config)?;
    let (store, manifest) = checkpoint::load(require_ckpt(cli)?)?;
    let (model, sched) = model_for(&manifest, config)?;
    let mode = resolve_mode(config, &manifest, &model, &store)?;
    let settings = EvalSettings {
        partition_intervals: config.eval.intervals,
        samples_per_interval: config.eval.samples_per_interval,
        generated_count: config.eval.generated,
        drift_layer: config.eval.drift_layer,
        drift_probes: config.eval.drift_probes,
        seed: config.seed,
    };
    let (eval_report, _run) = evaluate(&model, &store, &sched, &config.dataset, mode, &settings)?;
    report::write_json(&dir.join("eval.json"), &eval_report)?;
    let partition = IntervalPartition::new(sched.timesteps(), config.eval.intervals)?;
    report::write_interval_loss_csv(
        &dir.join("interval_loss.csv"),
        &partition,
        &eval_report.per_interval_loss,
    )?;
    report::write_drift_csv(&dir.join("drift.csv"), &eval_report.drift)?;
    print!("{}", report::eval_summary_text(&eval_report));
    Ok(ExitCode::SUCCESS)
}

fn cmd_grad_check(cli: &Cli, config: &RunConfig) -> steplora::Result<ExitCode> {
    let dir = out_dir(cli, config)?;
    let root = CounterRng::seed(config.seed);

    // either audit a checkpoint as-is, or a randomized fresh model
    let (mut store, mut model, sched) = match cli.ckpt.as_deref() {
        Some(path) => {
            let (store, manifest) = checkpoint::load(path)?;
            let (model, sched) = model_for(&manifest, config)?;
            (store, model, sched)
        }
        None => {
            let sched = config.schedule.build()?;
            let mut model = Denoiser::new(config.model.clone(), sched.timesteps())?;
            let mut store = ParamStore::new();
            model.init_base(&mut store, &mut root.derive("init-base"))?;
            if let Some(adapters) = config.adapters.clone() {
                let multi_scale = adapters.scales.len() > 1;
                model.attach_adapters(&mut store, adapters, &mut root.derive("attach-experts"))?;
                if multi_scale {
                    model.attach_routers(&mut store)?;
                }
                // move experts and routers off their neutral init so every
                // gradient path carries signal
                let mut jitter = root.derive("grad-check-jitter");
                let names: Vec<String> = store
                    .names()
                    .filter(|n| n.starts_with("expert.") || n.starts_with("router."))
                    .map(String::from)
                    .collect();
                for name in names {
                    for v in store.get_mut(&name)?.value.data_mut() {
                        *v += 0.05 * jitter.normal();
                    }
                }
            }
            (store, model, sched)
        }
    };
    if model.adapters().is_none() {
        if let Some(adapters) = config.adapters.clone() {
            model.set_adapters(Some(adapters));
        }
    }

    let mut batch_rng = root.derive("grad-check-batch");
    let batch = sample_batch(&config.dataset, config.train.params.batch, &mut batch_rng);
    let labels = model.config().num_classes.map(|_| batch.labels.clone());
    let mut eps = Matrix::zeros(batch.x0.rows(), batch.x0.cols());
    batch_rng.fill_normal(eps.data_mut());

    #[derive(Serialize)]
    struct CheckOutcome {
        loss: String,
        max_rel_error: f64,
        scalars_checked: usize,
        worst_tensor: String,
    }
    let mut outcomes: Vec<CheckOutcome> = Vec::new();

    match model.adapters().cloned() {
        None => {
            // no adapters configured: audit the dense model's own loss
            let ts: Vec<usize> = (0..batch.x0.cols())
                .map(|_| 1 + batch_rng.range(sched.timesteps() as u64) as usize)
                .collect();
            let x_t = forward_diffuse_batch(&batch.x0, &ts, &eps, &sched)?;
            store.set_trainable_where(|n| n.starts_with("base."));
            let loss = base_loss_on_batch(&model, &x_t, &ts, labels.as_deref(), &eps);
            let r = finite_diff_check(&mut store, GRAD_CHECK_STEP, &loss)?;
            outcomes.push(CheckOutcome {
                loss: "base".into(),
                max_rel_error: r.max_rel_error,
                scalars_checked: r.scalars_checked,
                worst_tensor: r.worst_tensor,
            });
        }
        Some(adapters) => {
            let scale = adapters.scales.core_scale();
            let partition = IntervalPartition::new(sched.timesteps(), scale)?;
            let interval = scale.div_ceil(2);
            let (lo, hi) = partition.bounds(interval)?;
            let ts: Vec<usize> = (0..batch.x0.cols())
                .map(|_| lo + batch_rng.range((hi - lo + 1) as u64) as usize)
                .collect();
            let x_t = forward_diffuse_batch(&batch.x0, &ts, &eps, &sched)?;
            let prefix = format!("expert.n{scale}.i{interval}.");
            store.set_trainable_where(|n| n.starts_with(&prefix));
            let loss = foster_loss_on_batch(&model, &x_t, &ts, labels.as_deref(), &eps, scale);
            let r = finite_diff_check(&mut store, GRAD_CHECK_STEP, &loss)?;
            outcomes.push(CheckOutcome {
                loss: "foster".into(),
                max_rel_error: r.max_rel_error,
                scalars_checked: r.scalars_checked,
                worst_tensor: r.worst_tensor,
            });

            if model.has_routers(&store) {
                let ts: Vec<usize> = (0..batch.x0.cols())
                    .map(|_| 1 + batch_rng.range(sched.timesteps() as u64) as usize)
                    .collect();
                let x_t = forward_diffuse_batch(&batch.x0, &ts, &eps, &sched)?;
                store.set_trainable_where(|n| n.starts_with("router."));
                let loss = assemble_loss_on_batch(&model, &x_t, &ts, labels.as_deref(), &eps);
                let r = finite_diff_check(&mut store, GRAD_CHECK_STEP, &loss)?;
                outcomes.push(CheckOutcome {
                    loss: "assemble".into(),
                    max_rel_error: r.max_rel_error,
                    scalars_checked: r.scalars_checked,
                    worst_tensor: r.worst_tensor,
                });
            }
        }
    }

    report::write_json(&dir.join("grad_check.json"), &outcomes)?;
    let mut ok = true;
    for o in &outcomes {
        let verdict = if o.max_rel_error < GRAD_CHECK_TOLERANCE {
            "pass"
        } else {
            ok = false;
            "FAIL"
        };
        println!(
            "{} loss: max rel error {:.3e} over {} scalars ({verdict})",
            o.loss, o.max_rel_error, o.scalars_checked
        );
    }
    Ok(if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
