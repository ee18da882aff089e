//! Ancestral sampling over the full reverse chain, with per-step expert
//! selection (fostering mode) or gate evaluation (assembled mode).
//!
//! The posterior update is
//!
//! ```text
//! x_{t-1} = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t)
//!           + sigma_t * z
//! ```
//!
//! with `z = 0` at the final step. The default variance is the posterior
//! choice `sigma_t^2 = beta_t * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)`;
//! `sigma_t^2 = beta_t` is available as a config option.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Denoiser, ForwardMode};
use crate::numerics::{Matrix, ParamStore};
use crate::rng::CounterRng;
use crate::schedule::{IntervalPartition, NoiseSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VarianceKind {
    #[default]
    Posterior,
    Beta,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Reverse steps to run; this sampler always walks the full chain, so it
    /// must equal the schedule's timestep count.
    pub steps: usize,
    pub batch: usize,
    #[serde(default)]
    pub variance: VarianceKind,
}

impl SamplerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("sampler batch must be positive".into()));
        }
        if self.steps != sched.timesteps() {
            return Err(Error::Config(format!(
                "this sampler walks the full chain: steps must equal {} (got {})",
                sched.timesteps(),
                self.steps
            )));
        }
        Ok(())
    }
}

/// Which expert interval was active at a reverse step, per bank scale.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertLogRow {
    pub t: usize,
    pub scale: usize,
    pub interval: usize,
}

/// Batch-mean gate vector of one adapted layer at one reverse step.
#[derive(Debug, Clone, PartialEq)]
pub struct GateLogRow {
    pub t: usize,
    pub layer: usize,
    pub gates: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SampleRun {
    /// One generated vector per column.
    pub samples: Matrix,
    pub expert_log: Vec<ExpertLogRow>,
    pub gate_log: Vec<GateLogRow>,
}

/// One reverse-process update given the model's noise prediction. `noise`
/// must be `None` exactly at `t = 1`, where the step is deterministic.
pub fn ancestral_step(
    x_t: &Matrix,
    eps_hat: &Matrix,
    t: usize,
    sched: &NoiseSchedule,
    noise: Option<&Matrix>,
    variance: VarianceKind,
) -> Result<Matrix> {
    let beta = sched.beta(t)?;
    let alpha = sched.alpha(t)?;
    let ab = sched.alpha_bar(t)?;
    let ab_prev = sched.alpha_bar_prev(t)?;

    let mean = x_t
        .sub(&eps_hat.scale(beta / (1.0 - ab).sqrt()))?
        .scale(1.0 / alpha.sqrt());

    match (t, noise) {
        (1, None) => Ok(mean),
        (1, Some(_)) => Err(Error::InvalidArg(
            "final reverse step injects no noise".into(),
        )),
        (_, None) => Err(Error::InvalidArg(format!(
            "reverse step at t={t} needs a noise draw"
        ))),
        (_, Some(z)) => {
            let sigma2 = match variance {
                VarianceKind::Posterior => beta * (1.0 - ab_prev) / (1.0 - ab),
                VarianceKind::Beta => beta,
            };
            mean.add(&z.scale(sigma2.sqrt()))
        }
    }
}

/// Run the full reverse chain from Gaussian noise.
///
/// The RNG draw order (initial noise, then one noise matrix per step above
/// t = 1) is independent of the forward mode, so runs with the same seed and
/// different modes see identical noise.
pub fn sample(
    model: &Denoiser,
    store: &ParamStore,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    mode: ForwardMode,
    labels: Option<&[usize]>,
    rng: &mut CounterRng,
) -> Result<SampleRun> {
    cfg.validate(sched)?;
    let dim = model.config().data_dim;
    let t_count = sched.timesteps();

    let mut x = Matrix::zeros(dim, cfg.batch);
    rng.fill_normal(x.data_mut());

    let mut expert_log = Vec::new();
    let mut gate_log = Vec::new();

    for t in (1..=t_count).rev() {
        let ts = vec![t; cfg.batch];
        let (eps_hat, gates) = model.predict_with_gates(store, &x, &ts, labels, mode)?;

        match mode {
            ForwardMode::Foster { scale } => {
                let interval = IntervalPartition::new(t_count, scale)?.index_of(t)?;
                expert_log.push(ExpertLogRow { t, scale, interval });
            }
            ForwardMode::Assembled => {
                let adapters = model.adapters().ok_or_else(|| {
                    Error::Config("assembled sampling needs an expert bank".into())
                })?;
                for (&scale, &interval) in adapters
                    .scales
                    .scales()
                    .iter()
                    .zip(adapters.scales.indices_of(t, t_count)?.iter())
                {
                    expert_log.push(ExpertLogRow { t, scale, interval });
                }
                for (gi, layer) in model.adapted_layers().iter().enumerate() {
                    if let Some(g) = gates.get(gi) {
                        gate_log.push(GateLogRow {
                            t,
                            layer: *layer,
                            gates: g.clone(),
                        });
                    }
                }
            }
            ForwardMode::Base => {}
        }

        let noise = if t > 1 {
            let mut z = Matrix::zeros(dim, cfg.batch);
            rng.fill_normal(z.data_mut());
            Some(z)
        } else {
            None
        };
        x = ancestral_step(&x, &eps_hat, t, sched, noise.as_ref(), cfg.variance)?;
        if !x.is_finite() {
            return Err(Error::NonFinite {
                context: format!("sample state at reverse step t={t}"),
            });
        }
    }

    Ok(SampleRun {
        samples: x,
        expert_log,
        gate_log,
    })
}
