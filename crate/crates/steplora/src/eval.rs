//! Quantitative harness: per-interval denoising losses, the energy distance
//! between sample sets, a per-timestep hidden-state drift profile, and the
//! parameter-matched comparison runner.
//!
//! Evaluation draws are a pure function of the evaluation seed (never of the
//! model), so two checkpoints scored with the same seed see identical
//! batches and are directly comparable.

use serde::{Deserialize, Serialize};

use crate::data::{sample_batch, DatasetConfig};
use crate::error::{Error, Result};
use crate::model::{AdapterConfig, Denoiser, ForwardMode, ModelConfig};
use crate::numerics::{Matrix, ParamStore};
use crate::rng::CounterRng;
use crate::sample::{sample, SampleRun, SamplerConfig, VarianceKind};
use crate::schedule::{forward_diffuse_batch, IntervalPartition, NoiseSchedule};
use crate::train::{train_assemble, train_base, train_foster, TrainParams};

/// Monte-Carlo estimate of the denoising objective restricted to each
/// interval of `partition`, with `samples_per_interval` paired draws.
#[allow(clippy::too_many_arguments)]
pub fn per_interval_loss(
    model: &Denoiser,
    store: &ParamStore,
    sched: &NoiseSchedule,
    dataset: &DatasetConfig,
    partition: &IntervalPartition,
    mode: ForwardMode,
    samples_per_interval: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if samples_per_interval == 0 {
        return Err(Error::InvalidArg(
            "samples_per_interval must be positive".into(),
        ));
    }
    let eval_rng = CounterRng::seed(seed).derive("interval-eval");
    let mut out = Vec::with_capacity(partition.intervals());
    for interval in 1..=partition.intervals() {
        let mut rng = eval_rng.derive(&format!("interval-{interval}"));
        let (lo, hi) = partition.bounds(interval)?;
        let batch = sample_batch(dataset, samples_per_interval, &mut rng);
        let ts: Vec<usize> = (0..samples_per_interval)
            .map(|_| lo + rng.range((hi - lo + 1) as u64) as usize)
            .collect();
        let mut eps = Matrix::zeros(batch.x0.rows(), samples_per_interval);
        rng.fill_normal(eps.data_mut());
        let x_t = forward_diffuse_batch(&batch.x0, &ts, &eps, sched)?;
        let labels = model.config().num_classes.map(|_| batch.labels.as_slice());

        // fostering weights are constant within an interval but the eval
        // interval may be coarser than the bank scale, so group by the
        // bank's own interval before batching
        let loss = match mode {
            ForwardMode::Foster { scale } => {
                let bank_partition = IntervalPartition::new(sched.timesteps(), scale)?;
                let mut total = 0.0;
                let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
                for (s, &t) in ts.iter().enumerate() {
                    groups.entry(bank_partition.index_of(t)?).or_default().push(s);
                }
                for cols in groups.values() {
                    let (xg, tg, lg, eg) = gather_columns(&x_t, &ts, labels, &eps, cols);
                    let eps_hat = model.predict(store, &xg, &tg, lg.as_deref(), mode)?;
                    total += eps_hat.sub(&eg)?.sum_sq();
                }
                total / samples_per_interval as f64
            }
            _ => {
                let eps_hat = model.predict(store, &x_t, &ts, labels, mode)?;
                eps_hat.sub(&eps)?.sum_sq() / samples_per_interval as f64
            }
        };
        out.push(loss);
    }
    Ok(out)
}

fn gather_columns(
    x: &Matrix,
    ts: &[usize],
    labels: Option<&[usize]>,
    eps: &Matrix,
    cols: &[usize],
) -> (Matrix, Vec<usize>, Option<Vec<usize>>, Matrix) {
    let mut xg = Matrix::zeros(x.rows(), cols.len());
    let mut eg = Matrix::zeros(eps.rows(), cols.len());
    let mut tg = Vec::with_capacity(cols.len());
    let mut lg = labels.map(|_| Vec::with_capacity(cols.len()));
    for (j, &s) in cols.iter().enumerate() {
        for i in 0..x.rows() {
            xg.set(i, j, x.get(i, s));
            eg.set(i, j, eps.get(i, s));
        }
        tg.push(ts[s]);
        if let (Some(lv), Some(l)) = (lg.as_mut(), labels) {
            lv.push(l[s]);
        }
    }
    (xg, tg, lg, eg)
}

/// Mean squared noise-prediction error over the full timestep range,
/// weighted by interval sizes so it matches the n = 1 estimate.
pub fn aggregate_loss(per_interval: &[f64], partition: &IntervalPartition) -> Result<f64> {
    if per_interval.len() != partition.intervals() {
        return Err(Error::InvalidArg(format!(
            "{} losses for {} intervals",
            per_interval.len(),
            partition.intervals()
        )));
    }
    let mut acc = 0.0;
    for (i, loss) in per_interval.iter().enumerate() {
        let (lo, hi) = partition.bounds(i + 1)?;
        acc += loss * (hi + 1 - lo) as f64;
    }
    Ok(acc / partition.timesteps() as f64)
}

/// Two-sample energy distance `2 E|X-Y| - E|X-X'| - E|Y-Y'|` with points as
/// columns.
///
/// Within-sample means run over all ordered pairs (V-statistic). That keeps
/// the estimate non-negative and exactly zero on identical sets; the i != j
/// variant trades those properties for unbiasedness and can go negative.
pub fn energy_distance(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.rows() != b.rows() {
        return Err(Error::ShapeMismatch {
            op: "energy_distance",
            lhs_rows: a.rows(),
            lhs_cols: a.cols(),
            rhs_rows: b.rows(),
            rhs_cols: b.cols(),
        });
    }
    if a.cols() == 0 || b.cols() == 0 {
        return Err(Error::InvalidArg("energy distance needs nonempty sets".into()));
    }
    let dist = |m: &Matrix, i: usize, n: &Matrix, j: usize| -> f64 {
        let mut acc = 0.0;
        for r in 0..m.rows() {
            let d = m.get(r, i) - n.get(r, j);
            acc += d * d;
        }
        acc.sqrt()
    };
    let (na, nb) = (a.cols(), b.cols());
    let mut cross = 0.0;
    for i in 0..na {
        for j in 0..nb {
            cross += dist(a, i, b, j);
        }
    }
    cross = 2.0 * cross / (na as f64 * nb as f64);

    let within = |m: &Matrix| -> f64 {
        let n = m.cols();
        if n < 2 {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                acc += dist(m, i, m, j);
            }
        }
        // ordered pairs including the zero diagonal
        2.0 * acc / (n as f64 * n as f64)
    };
    Ok(cross - within(a) - within(b))
}

/// Per-timestep mean activation norm of one hidden layer, measured on a
/// fixed probe batch diffused to every `t` with fixed noise.
pub fn hidden_state_drift(
    model: &Denoiser,
    store: &ParamStore,
    sched: &NoiseSchedule,
    dataset: &DatasetConfig,
    layer: usize,
    probes: usize,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    if probes == 0 {
        return Err(Error::InvalidArg("drift needs at least one probe".into()));
    }
    let mut rng = CounterRng::seed(seed).derive("drift-probes");
    let batch = sample_batch(dataset, probes, &mut rng);
    let mut eps = Matrix::zeros(batch.x0.rows(), probes);
    rng.fill_normal(eps.data_mut());
    let labels = model.config().num_classes.map(|_| batch.labels.as_slice());

    let mut out = Vec::with_capacity(sched.timesteps());
    for t in 1..=sched.timesteps() {
        let ts = vec![t; probes];
        let x_t = forward_diffuse_batch(&batch.x0, &ts, &eps, sched)?;
        let (_, trace) = model.predict_trace(store, &x_t, &ts, labels)?;
        let h = trace.get(layer).ok_or_else(|| {
            Error::InvalidArg(format!(
                "layer {layer} out of range for a trace of {}",
                trace.len()
            ))
        })?;
        // mean Euclidean norm of the probe columns
        let mut acc = 0.0;
        for s in 0..h.cols() {
            let mut sq = 0.0;
            for i in 0..h.rows() {
                sq += h.get(i, s) * h.get(i, s);
            }
            acc += sq.sqrt();
        }
        out.push((t, acc / probes as f64));
    }
    Ok(out)
}

/// Everything the `eval` command emits for one checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_interval_loss: Vec<f64>,
    pub aggregate_loss: f64,
    pub energy_distance: f64,
    pub drift: Vec<(usize, f64)>,
    pub total_scalars: usize,
    pub trainable_scalars: usize,
}

pub struct EvalSettings {
    pub partition_intervals: usize,
    pub samples_per_interval: usize,
    pub generated_count: usize,
    pub drift_layer: usize,
    pub drift_probes: usize,
    pub seed: u64,
}

/// Score one checkpoint: interval losses, sample quality against the
/// reference distribution, and the drift profile.
pub fn evaluate(
    model: &Denoiser,
    store: &ParamStore,
    sched: &NoiseSchedule,
    dataset: &DatasetConfig,
    mode: ForwardMode,
    settings: &EvalSettings,
) -> Result<(EvalReport, SampleRun)> {
    let partition = IntervalPartition::new(sched.timesteps(), settings.partition_intervals)?;
    let per_interval = per_interval_loss(
        model,
        store,
        sched,
        dataset,
        &partition,
        mode,
        settings.samples_per_interval,
        settings.seed,
    )?;
    let aggregate = aggregate_loss(&per_interval, &partition)?;

    let sampler = SamplerConfig {
        steps: sched.timesteps(),
        batch: settings.generated_count,
        variance: VarianceKind::Posterior,
    };
    let mut gen_rng = CounterRng::seed(settings.seed).derive("eval-sampling");
    let run = sample(model, store, sched, &sampler, mode, None, &mut gen_rng)?;
    let mut ref_rng = CounterRng::seed(settings.seed).derive("eval-reference");
    let reference = sample_batch(dataset, settings.generated_count, &mut ref_rng);
    let ed = energy_distance(&run.samples, &reference.x0)?;

    let drift = hidden_state_drift(
        model,
        store,
        sched,
        dataset,
        settings.drift_layer,
        settings.drift_probes,
        settings.seed,
    )?;

    Ok((
        EvalReport {
            per_interval_loss: per_interval,
            aggregate_loss: aggregate,
            energy_distance: ed,
            drift,
            total_scalars: store.scalar_count(),
            trainable_scalars: store.trainable_scalar_count(),
        },
        run,
    ))
}

/// One arm of the parameter-matched comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub adapter_scalars: usize,
    pub stage_trainable_scalars: usize,
    pub per_interval_loss: Vec<f64>,
    pub mean_interval_loss: f64,
    pub energy_distance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub seed: u64,
    pub rows: Vec<ComparisonRow>,
}

pub struct ComparisonConfig {
    pub model: ModelConfig,
    pub sched: NoiseSchedule,
    pub dataset_pretrain: DatasetConfig,
    pub dataset_target: DatasetConfig,
    /// Interval count of the expert split; the vanilla arm gets one adapter
    /// of rank `intervals * rank` so adapter budgets match exactly.
    pub intervals: usize,
    pub rank: usize,
    pub base_params: TrainParams,
    /// Per-adapter steps, identical across arms: the vanilla adapter and
    /// each split expert train for the same step count.
    pub foster_params: TrainParams,
    pub assemble_params: TrainParams,
    pub eval_samples_per_interval: usize,
    pub eval_generated: usize,
    pub seed: u64,
}

/// Train and score, under one seed: the untouched base, a single
/// parameter-matched adapter, the per-interval expert split, and the
/// router-assembled two-scale variant (plus its core-only reading).
pub fn compare_param_matched(cfg: &ComparisonConfig) -> Result<ComparisonTable> {
    let mut rows = Vec::new();
    let base_model = Denoiser::new(cfg.model.clone(), cfg.sched.timesteps())?;

    // shared pre-trained backbone
    let mut base_store = ParamStore::new();
    let mut rng = CounterRng::seed(cfg.seed).derive("compare-base");
    base_model.init_base(&mut base_store, &mut rng)?;
    train_base(
        &base_model,
        &mut base_store,
        &cfg.sched,
        &cfg.dataset_pretrain,
        &cfg.base_params,
        &mut rng,
    )?;
    base_store.freeze_all();

    let eval_partition = IntervalPartition::new(cfg.sched.timesteps(), cfg.intervals)?;
    let eval_row = |name: &str,
                        model: &Denoiser,
                        store: &ParamStore,
                        mode: ForwardMode,
                        stage_trainable: usize|
     -> Result<ComparisonRow> {
        let per_interval = per_interval_loss(
            model,
            store,
            &cfg.sched,
            &cfg.dataset_target,
            &eval_partition,
            mode,
            cfg.eval_samples_per_interval,
            cfg.seed,
        )?;
        let mean = per_interval.iter().sum::<f64>() / per_interval.len() as f64;
        let sampler = SamplerConfig {
            steps: cfg.sched.timesteps(),
            batch: cfg.eval_generated,
            variance: VarianceKind::Posterior,
        };
        let mut gen_rng = CounterRng::seed(cfg.seed).derive("compare-sampling");
        let run = sample(model, store, &cfg.sched, &sampler, mode, None, &mut gen_rng)?;
        let mut ref_rng = CounterRng::seed(cfg.seed).derive("compare-reference");
        let reference = sample_batch(&cfg.dataset_target, cfg.eval_generated, &mut ref_rng);
        Ok(ComparisonRow {
            name: name.to_string(),
            adapter_scalars: model.expert_bank_scalars(),
            stage_trainable_scalars: stage_trainable,
            per_interval_loss: per_interval,
            mean_interval_loss: mean,
            energy_distance: energy_distance(&run.samples, &reference.x0)?,
        })
    };

    // untouched backbone
    rows.push(eval_row("base", &base_model, &base_store, ForwardMode::Base, 0)?);

    // vanilla: one adapter at n*r rank, same per-adapter steps as the split
    {
        let mut model = Denoiser::new(cfg.model.clone(), cfg.sched.timesteps())?;
        let mut store = base_store.clone();
        let mut arm_rng = CounterRng::seed(cfg.seed).derive("compare-vanilla");
        model.attach_adapters(
            &mut store,
            AdapterConfig {
                scales: crate::schedule::ScaleSet::new(vec![1])?,
                rank: cfg.intervals * cfg.rank,
                alpha: (cfg.intervals * cfg.rank) as f64,
            },
            &mut arm_rng,
        )?;
        let report = train_foster(
            &model,
            &mut store,
            &cfg.sched,
            &cfg.dataset_target,
            &cfg.foster_params,
            &mut arm_rng,
        )?;
        rows.push(eval_row(
            "vanilla",
            &model,
            &store,
            ForwardMode::Foster { scale: 1 },
            report.trainable_scalars,
        )?);
    }

    // per-interval split: n experts of rank r
    {
        let mut model = Denoiser::new(cfg.model.clone(), cfg.sched.timesteps())?;
        let mut store = base_store.clone();
        let mut arm_rng = CounterRng::seed(cfg.seed).derive("compare-split");
        model.attach_adapters(
            &mut store,
            AdapterConfig {
                scales: crate::schedule::ScaleSet::new(vec![cfg.intervals])?,
                rank: cfg.rank,
                alpha: cfg.rank as f64,
            },
            &mut arm_rng,
        )?;
        let report = train_foster(
            &model,
            &mut store,
            &cfg.sched,
            &cfg.dataset_target,
            &cfg.foster_params,
            &mut arm_rng,
        )?;
        rows.push(eval_row(
            "split",
            &model,
            &store,
            ForwardMode::Foster { scale: cfg.intervals },
            report.trainable_scalars,
        )?);
    }

    // two-scale bank with routers: report both the core-only and the
    // assembled reading of the same checkpoint
    {
        let mut model = Denoiser::new(cfg.model.clone(), cfg.sched.timesteps())?;
        let mut store = base_store.clone();
        let mut arm_rng = CounterRng::seed(cfg.seed).derive("compare-two-stage");
        model.attach_adapters(
            &mut store,
            AdapterConfig {
                scales: crate::schedule::ScaleSet::new(vec![cfg.intervals, 1])?,
                rank: cfg.rank,
                alpha: cfg.rank as f64,
            },
            &mut arm_rng,
        )?;
        train_foster(
            &model,
            &mut store,
            &cfg.sched,
            &cfg.dataset_target,
            &cfg.foster_params,
            &mut arm_rng,
        )?;
        rows.push(eval_row(
            "two_stage_core_only",
            &model,
            &store,
            ForwardMode::Foster { scale: cfg.intervals },
            model.expert_bank_scalars(),
        )?);

        model.attach_routers(&mut store)?;
        let report = train_assemble(
            &model,
            &mut store,
            &cfg.sched,
            &cfg.dataset_target,
            &cfg.assemble_params,
            &mut arm_rng,
        )?;
        rows.push(eval_row(
            "two_stage_assembled",
            &model,
            &store,
            ForwardMode::Assembled,
            report.trainable_scalars,
        )?);
    }

    Ok(ComparisonTable {
        seed: cfg.seed,
        rows,
    })
}
