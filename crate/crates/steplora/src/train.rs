//! Two-stage optimization over the frozen base model.
//!
//! `train_base` fits the dense denoiser from scratch and stands in for a
//! pre-trained backbone. `train_foster` then fits one adapter per
//! (scale, interval) pair, sequentially, with timesteps drawn inside the
//! pair's bounds and everything else frozen. `train_assemble` finally
//! freezes the experts too and trains only the per-layer routers, with
//! timesteps uniform over the whole range.
//!
//! Every stage audits its freeze contract: frozen gradient buffers must
//! stay exactly zero, and the byte image of frozen tensors must be
//! identical before and after.

use serde::{Deserialize, Serialize};

use crate::data::{sample_batch, DatasetConfig};
use crate::error::{Error, Result};
use crate::model::{Denoiser, ForwardMode};
use crate::numerics::{loss_and_grads, Matrix, ParamStore, Tape, Var};
use crate::rng::CounterRng;
use crate::schedule::{forward_diffuse_batch, IntervalPartition, NoiseSchedule};

const DIVERGENCE_THRESHOLD: f64 = 1e6;

/// Optimizer and loop hyperparameters shared by all stages.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainParams {
    /// Optimizer steps; per adapter in the fostering stage, total otherwise.
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
}

fn default_weight_decay() -> f64 {
    1e-2
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("steps and batch must be positive".into()));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1)")));
            }
        }
        Ok(())
    }
}

/// Decoupled-weight-decay Adam with bias correction. Moment buffers are
/// keyed by tensor name and only trainable tensors move.
#[derive(Debug)]
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    moments: std::collections::BTreeMap<String, (Matrix, Matrix)>,
}

impl AdamW {
    pub fn new(params: &TrainParams) -> Self {
        Self {
            lr: params.lr,
            beta1: params.beta1,
            beta2: params.beta2,
            eps: 1e-8,
            weight_decay: params.weight_decay,
            step: 0,
            moments: Default::default(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let names = store.trainable_names();
        for name in names {
            let param = store.get_mut(&name)?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| {
                    (
                        Matrix::zeros(param.value.rows(), param.value.cols()),
                        Matrix::zeros(param.value.rows(), param.value.cols()),
                    )
                });
            for ((w, g), (mi, vi)) in param
                .value
                .data_mut()
                .iter_mut()
                .zip(param.grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                // decay is decoupled from the adaptive step
                *w *= 1.0 - self.lr * self.weight_decay;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// One row of a loss trace: stage-global step index plus the (scale,
/// interval) pair that was active, when any.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interval: Option<usize>,
    pub loss: f64,
}

/// Outcome of one training stage. Wall-clock is kept out of serialized
/// reports so fixed-seed reruns stay byte-identical.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: String,
    pub trace: Vec<TraceRow>,
    pub final_loss: f64,
    pub trainable_scalars: usize,
    #[serde(skip)]
    pub wall_ms: u128,
}

impl TrainReport {
    fn new(stage: &str, trainable_scalars: usize) -> Self {
        Self {
            stage: stage.to_string(),
            trace: Vec::new(),
            final_loss: f64::NAN,
            trainable_scalars,
            wall_ms: 0,
        }
    }
}

/// Uniform draw of a timestep inside one interval.
pub fn sample_timestep_in_interval(
    interval: usize,
    partition: &IntervalPartition,
    rng: &mut CounterRng,
) -> Result<usize> {
    let (lo, hi) = partition.bounds(interval)?;
    Ok(lo + rng.range((hi - lo + 1) as u64) as usize)
}

fn draw_batch(
    dataset: &DatasetConfig,
    count: usize,
    sched: &NoiseSchedule,
    ts: Vec<usize>,
    rng: &mut CounterRng,
) -> Result<(Matrix, Vec<usize>, Vec<usize>, Matrix)> {
    let batch = sample_batch(dataset, count, rng);
    let mut eps = Matrix::zeros(batch.x0.rows(), count);
    rng.fill_normal(eps.data_mut());
    let x_t = forward_diffuse_batch(&batch.x0, &ts, &eps, sched)?;
    Ok((x_t, ts, batch.labels, eps))
}

/// Mean over the batch of the squared noise-prediction error.
#[allow(clippy::too_many_arguments)]
fn denoising_loss_batched(
    model: &Denoiser,
    tape: &mut Tape,
    store: &ParamStore,
    x_t: &Matrix,
    ts: &[usize],
    labels: Option<&[usize]>,
    eps: &Matrix,
    mode: ForwardMode,
) -> Result<Var> {
    let eps_hat = model.forward(tape, store, x_t, ts, labels, mode)?;
    let target = tape.constant(eps.clone());
    let diff = tape.sub(eps_hat, target)?;
    let ss = tape.sum_sq(diff);
    Ok(tape.scale(ss, 1.0 / x_t.cols() as f64))
}

/// Assembled-mode loss: per-sample forwards summed on one tape, because each
/// sample carries its own gates and expert indices.
fn denoising_loss_per_sample(
    model: &Denoiser,
    tape: &mut Tape,
    store: &ParamStore,
    x_t: &Matrix,
    ts: &[usize],
    labels: Option<&[usize]>,
    eps: &Matrix,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for s in 0..x_t.cols() {
        let col = x_t.column(s);
        let lab = labels.map(|l| vec![l[s]]);
        let eps_hat = model.forward(
            tape,
            store,
            &col,
            &ts[s..=s],
            lab.as_deref(),
            ForwardMode::Assembled,
        )?;
        let target = tape.constant(eps.column(s));
        let diff = tape.sub(eps_hat, target)?;
        let ss = tape.sum_sq(diff);
        total = Some(match total {
            None => ss,
            Some(acc) => tape.add(acc, ss)?,
        });
    }
    let total = total.ok_or_else(|| Error::InvalidArg("empty batch".into()))?;
    Ok(tape.scale(total, 1.0 / x_t.cols() as f64))
}

fn labels_if_conditional<'a>(model: &Denoiser, labels: &'a [usize]) -> Option<&'a [usize]> {
    model.config().num_classes.map(|_| labels)
}

fn check_step(report: &TrainReport, step: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: format!("{} loss at step {step}", report.stage),
        });
    }
    if loss > DIVERGENCE_THRESHOLD {
        return Err(Error::Divergence { step, loss });
    }
    Ok(())
}

/// Fit all base parameters on the denoising objective with t uniform over
/// the full range.
pub fn train_base(
    model: &Denoiser,
    store: &mut ParamStore,
    sched: &NoiseSchedule,
    dataset: &DatasetConfig,
    params: &TrainParams,
    rng: &mut CounterRng,
) -> Result<TrainReport> {
    params.validate()?;
    if model.adapters().is_some() {
        return Err(Error::Config(
            "base stage runs before any adapters attach".into(),
        ));
    }
    store.set_trainable_where(|name| name.starts_with("base."));
    let started = std::time::Instant::now();
    let mut report = TrainReport::new("base", store.trainable_scalar_count());
    let mut opt = AdamW::new(params);
    let t_count = sched.timesteps() as u64;

    for step in 0..params.steps {
        let ts: Vec<usize> = (0..params.batch)
            .map(|_| 1 + rng.range(t_count) as usize)
            .collect();
        let (x_t, ts, labels, eps) = draw_batch(dataset, params.batch, sched, ts, rng)?;
        store.zero_grads();
        let loss = loss_and_grads(store, &|tape: &mut Tape, store: &ParamStore| {
            denoising_loss_batched(
                model,
                tape,
                store,
                &x_t,
                &ts,
                labels_if_conditional(model, &labels),
                &eps,
                ForwardMode::Base,
            )
        })?;
        check_step(&report, step, loss)?;
        opt.step(store)?;
        report.trace.push(TraceRow {
            step,
            scale: None,
            interval: None,
            loss,
        });
        report.final_loss = loss;
    }
    report.wall_ms = started.elapsed().as_millis();
    Ok(report)
}

/// Fit one adapter per (scale, interval) pair, sequentially, over the frozen
/// base. Each pair gets a fresh optimizer and `params.steps` steps with t
/// drawn inside its own bounds.
pub fn train_foster(
    model: &Denoiser,
    store: &mut ParamStore,
    sched: &NoiseSchedule,
    dataset: &DatasetConfig,
    params: &TrainParams,
    rng: &mut CounterRng,
) -> Result<TrainReport> {
    params.validate()?;
    let adapters = model
        .adapters()
        .ok_or_else(|| Error::Config("fostering needs an attached expert bank".into()))?
        .clone();
    let base_image = store.bytes_where(|n| n.starts_with("base."));
    let started = std::time::Instant::now();
    let mut report = TrainReport::new("foster", model.expert_bank_scalars());
    let mut global_step = 0usize;

    for &scale in adapters.scales.scales() {
        let partition = IntervalPartition::new(sched.timesteps(), scale)?;
        for interval in 1..=scale {
            let prefix = format!("expert.n{scale}.i{interval}.");
            store.set_trainable_where(|name| name.starts_with(&prefix));
            let mut opt = AdamW::new(params);
            for _ in 0..params.steps {
                let ts: Vec<usize> = (0..params.batch)
                    .map(|_| sample_timestep_in_interval(interval, &partition, rng))
                    .collect::<Result<_>>()?;
                let (x_t, ts, labels, eps) =
                    draw_batch(dataset, params.batch, sched, ts, rng)?;
                store.zero_grads();
                let loss = loss_and_grads(store, &|tape: &mut Tape, store: &ParamStore| {
                    denoising_loss_batched(
                        model,
                        tape,
                        store,
                        &x_t,
                        &ts,
                        labels_if_conditional(model, &labels),
                        &eps,
                        ForwardMode::Foster { scale },
                    )
                })?;
                check_step(&report, global_step, loss)?;
                if !store.all_frozen_grads_zero() {
                    return Err(Error::InvariantViolation(
                        "frozen tensor received gradient during fostering".into(),
                    ));
                }
                opt.step(store)?;
                report.trace.push(TraceRow {
                    step: global_step,
                    scale: Some(scale),
                    interval: Some(interval),
                    loss,
                });
                report.final_loss = loss;
                global_step += 1;
            }
        }
    }

    store.freeze_all();
    if store.bytes_where(|n| n.starts_with("base.")) != base_image {
        return Err(Error::InvariantViolation(
            "base tensors changed during fostering".into(),
        ));
    }
    report.wall_ms = started.elapsed().as_millis();
    Ok(report)
}

/// Train only the routers over frozen base and experts, with t uniform over
/// the full range.
pub fn train_assemble(
    model: &Denoiser,
    store: &mut ParamStore,
    sched: &NoiseSchedule,
    dataset: &DatasetConfig,
    params: &TrainParams,
    rng: &mut CounterRng,
) -> Result<TrainReport> {
    params.validate()?;
    if model.adapters().is_none() {
        return Err(Error::Config("assembling needs an expert bank".into()));
    }
    if !model.has_routers(store) {
        return Err(Error::Config("assembling needs attached routers".into()));
    }
    let frozen_image = store.bytes_where(|n| !n.starts_with("router."));
    store.set_trainable_where(|name| name.starts_with("router."));
    let started = std::time::Instant::now();
    let mut report = TrainReport::new("assemble", store.trainable_scalar_count());
    let mut opt = AdamW::new(params);
    let t_count = sched.timesteps() as u64;

    for step in 0..params.steps {
        let ts: Vec<usize> = (0..params.batch)
            .map(|_| 1 + rng.range(t_count) as usize)
            .collect();
        let (x_t, ts, labels, eps) = draw_batch(dataset, params.batch, sched, ts, rng)?;
        store.zero_grads();
        let loss = loss_and_grads(store, &|tape: &mut Tape, store: &ParamStore| {
            denoising_loss_per_sample(
                model,
                tape,
                store,
                &x_t,
                &ts,
                labels_if_conditional(model, &labels),
                &eps,
            )
        })?;
        check_step(&report, step, loss)?;
        if !store.all_frozen_grads_zero() {
            return Err(Error::InvariantViolation(
                "frozen tensor received gradient during assembling".into(),
            ));
        }
        opt.step(store)?;
        report.trace.push(TraceRow {
            step,
            scale: None,
            interval: None,
            loss,
        });
        report.final_loss = loss;
    }

    store.freeze_all();
    if store.bytes_where(|n| !n.starts_with("router.")) != frozen_image {
        return Err(Error::InvariantViolation(
            "expert or base tensors changed during assembling".into(),
        ));
    }
    report.wall_ms = started.elapsed().as_millis();
    Ok(report)
}

/// Loss builders reused by the gradient-check command and the acceptance
/// suite: a fostering loss on a fixed batch, and an assembling loss on a
/// fixed batch.
pub fn foster_loss_on_batch<'a>(
    model: &'a Denoiser,
    x_t: &'a Matrix,
    ts: &'a [usize],
    labels: Option<&'a [usize]>,
    eps: &'a Matrix,
    scale: usize,
) -> impl Fn(&mut Tape, &ParamStore) -> Result<Var> + 'a {
    move |tape, store| {
        denoising_loss_batched(
            model,
            tape,
            store,
            x_t,
            ts,
            labels,
            eps,
            ForwardMode::Foster { scale },
        )
    }
}

pub fn assemble_loss_on_batch<'a>(
    model: &'a Denoiser,
    x_t: &'a Matrix,
    ts: &'a [usize],
    labels: Option<&'a [usize]>,
    eps: &'a Matrix,
) -> impl Fn(&mut Tape, &ParamStore) -> Result<Var> + 'a {
    move |tape, store| denoising_loss_per_sample(model, tape, store, x_t, ts, labels, eps)
}

pub fn base_loss_on_batch<'a>(
    model: &'a Denoiser,
    x_t: &'a Matrix,
    ts: &'a [usize],
    labels: Option<&'a [usize]>,
    eps: &'a Matrix,
) -> impl Fn(&mut Tape, &ParamStore) -> Result<Var> + 'a {
    move |tape, store| {
        denoising_loss_batched(model, tape, store, x_t, ts, labels, eps, ForwardMode::Base)
    }
}
