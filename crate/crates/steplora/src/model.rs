//! The denoiser network and its adapter apparatus: per-interval low-rank
//! experts, multi-scale expert banks, per-layer gate routers, and the
//! assembled effective weights.
//!
//! Parameters live in a [`ParamStore`] under a fixed naming scheme:
//!
//! ```text
//! base.layer{i}.w / .b      dense stack (layer 0 = input proj, last = output proj)
//! base.time.w / .b          learned projection of the sinusoidal time embedding
//! base.cond.table           optional class embedding, hidden x num_classes
//! expert.n{n}.i{i}.layer{l}.a / .b   adapter factors for interval i of an n-way split
//! router.layer{l}.fw / .fb / .e      gate parameters of an adapted layer
//! ```
//!
//! An adapter contributes `(alpha/rank) * B * A` on top of the frozen host
//! weight. `B` starts at zero, so a freshly attached bank leaves every
//! forward bit-identical to the base model. In assembled mode the finest
//! partition's expert is applied ungated and each coarser expert is scaled
//! by one gate value produced from the layer input and the timestep.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamStore, Tape, Var};
use crate::rng::CounterRng;
use crate::schedule::{IntervalPartition, ScaleSet};
use serde::{Deserialize, Serialize};

/// Architecture of the dense noise-prediction network.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub data_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub time_embed_dim: usize,
    #[serde(default)]
    pub num_classes: Option<usize>,
    /// Host adapters on the input projection as well.
    #[serde(default)]
    pub adapt_input: bool,
    /// Host adapters on the output projection as well.
    #[serde(default)]
    pub adapt_output: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            data_dim: 2,
            hidden_width: 64,
            hidden_layers: 3,
            time_embed_dim: 32,
            num_classes: None,
            adapt_input: false,
            adapt_output: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.hidden_width == 0 || self.hidden_layers == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::Config("time_embed_dim must be even and >= 2".into()));
        }
        if self.num_classes == Some(0) {
            return Err(Error::Config("num_classes must be positive when set".into()));
        }
        Ok(())
    }

    /// Number of linear layers in the stack, input and output included.
    pub fn layer_count(&self) -> usize {
        self.hidden_layers + 2
    }

    /// (rows, cols) of layer `li`'s weight.
    pub fn layer_dims(&self, li: usize) -> (usize, usize) {
        let last = self.layer_count() - 1;
        if li == 0 {
            (self.hidden_width, self.data_dim)
        } else if li == last {
            (self.data_dim, self.hidden_width)
        } else {
            (self.hidden_width, self.hidden_width)
        }
    }
}

/// Shape of one expert bank: how the timestep axis splits and what rank the
/// adapters carry.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub scales: ScaleSet,
    pub rank: usize,
    pub alpha: f64,
}

impl AdapterConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Base,
    /// One expert bank scale drives the active adapter per timestep.
    Foster { scale: usize },
    /// Core expert plus gated context experts.
    Assembled,
}

pub fn base_weight_name(li: usize) -> String {
    format!("base.layer{li}.w")
}

pub fn base_bias_name(li: usize) -> String {
    format!("base.layer{li}.b")
}

pub fn expert_name(scale: usize, interval: usize, li: usize, factor: char) -> String {
    format!("expert.n{scale}.i{interval}.layer{li}.{factor}")
}

pub fn router_name(li: usize, part: &str) -> String {
    format!("router.layer{li}.{part}")
}

/// Sinusoidal embedding of an integer timestep.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut v = vec![0.0; dim];
    let denom = (half.saturating_sub(1)).max(1) as f64;
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / denom).exp();
        let angle = t as f64 * freq;
        v[i] = angle.sin();
        v[half + i] = angle.cos();
    }
    v
}

/// The denoiser: architecture plus the timestep count its routers are sized
/// for. Parameters themselves live in the store.
#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: ModelConfig,
    adapters: Option<AdapterConfig>,
    timesteps: usize,
}

impl Denoiser {
    pub fn new(cfg: ModelConfig, timesteps: usize) -> Result<Self> {
        cfg.validate()?;
        if timesteps < 1 {
            return Err(Error::Config("timestep count must be >= 1".into()));
        }
        Ok(Self {
            cfg,
            adapters: None,
            timesteps,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn adapters(&self) -> Option<&AdapterConfig> {
        self.adapters.as_ref()
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    /// Indices of layers that host adapters and routers.
    pub fn adapted_layers(&self) -> Vec<usize> {
        let mut v = Vec::new();
        if self.cfg.adapt_input {
            v.push(0);
        }
        v.extend(1..=self.cfg.hidden_layers);
        if self.cfg.adapt_output {
            v.push(self.cfg.layer_count() - 1);
        }
        v
    }

    // ── initialization ──────────────────────────────────────────────────

    /// Insert freshly initialized base parameters.
    pub fn init_base(&self, store: &mut ParamStore, rng: &mut CounterRng) -> Result<()> {
        for li in 0..self.cfg.layer_count() {
            let (d, k) = self.cfg.layer_dims(li);
            let mut w = Matrix::zeros(d, k);
            let std = (2.0 / k as f64).sqrt();
            for v in w.data_mut() {
                *v = std * rng.normal();
            }
            store.insert(&base_weight_name(li), w, true)?;
            store.insert(&base_bias_name(li), Matrix::zeros(d, 1), true)?;
        }
        let mut tw = Matrix::zeros(self.cfg.hidden_width, self.cfg.time_embed_dim);
        let std = (1.0 / self.cfg.time_embed_dim as f64).sqrt();
        for v in tw.data_mut() {
            *v = std * rng.normal();
        }
        store.insert("base.time.w", tw, true)?;
        store.insert("base.time.b", Matrix::zeros(self.cfg.hidden_width, 1), true)?;
        if let Some(classes) = self.cfg.num_classes {
            let mut table = Matrix::zeros(self.cfg.hidden_width, classes);
            for v in table.data_mut() {
                *v = 0.1 * rng.normal();
            }
            store.insert("base.cond.table", table, true)?;
        }
        Ok(())
    }

    /// Attach a multi-scale expert bank: one adapter per (scale, interval)
    /// per adapted layer. `A` is small Gaussian, `B` is all zeros, so the
    /// attachment does not change any forward until training moves `B`.
    pub fn attach_adapters(
        &mut self,
        store: &mut ParamStore,
        adapters: AdapterConfig,
        rng: &mut CounterRng,
    ) -> Result<()> {
        if adapters.rank == 0 || adapters.alpha <= 0.0 {
            return Err(Error::Config(
                "adapter rank and alpha must be positive".into(),
            ));
        }
        for &scale in adapters.scales.scales() {
            if scale > self.timesteps {
                return Err(Error::Config(format!(
                    "scale n={scale} exceeds timestep count {}",
                    self.timesteps
                )));
            }
        }
        for &li in &self.adapted_layers() {
            let (d, k) = self.cfg.layer_dims(li);
            if adapters.rank > d.min(k) / 2 {
                return Err(Error::Config(format!(
                    "rank {} too large for {}x{} host layer {} (max {})",
                    adapters.rank,
                    d,
                    k,
                    li,
                    d.min(k) / 2
                )));
            }
        }
        for &scale in adapters.scales.scales() {
            for interval in 1..=scale {
                for &li in &self.adapted_layers() {
                    let (d, k) = self.cfg.layer_dims(li);
                    let mut a = Matrix::zeros(adapters.rank, k);
                    let std = (1.0 / k as f64).sqrt();
                    for v in a.data_mut() {
                        *v = std * rng.normal();
                    }
                    store.insert(&expert_name(scale, interval, li, 'a'), a, false)?;
                    store.insert(
                        &expert_name(scale, interval, li, 'b'),
                        Matrix::zeros(d, adapters.rank),
                        false,
                    )?;
                }
            }
        }
        self.adapters = Some(adapters);
        Ok(())
    }

    /// Attach zero-initialized routers to every adapted layer. With all gate
    /// parameters at zero the assembled forward equals the core expert's.
    pub fn attach_routers(&self, store: &mut ParamStore) -> Result<()> {
        let adapters = self
            .adapters
            .as_ref()
            .ok_or_else(|| Error::Config("routers need an expert bank first".into()))?;
        let m = adapters.scales.len();
        if m < 2 {
            return Err(Error::Config(
                "routers need at least one context scale (m >= 2)".into(),
            ));
        }
        for &li in &self.adapted_layers() {
            let (_, k) = self.cfg.layer_dims(li);
            store.insert(&router_name(li, "fw"), Matrix::zeros(m - 1, k), false)?;
            store.insert(&router_name(li, "fb"), Matrix::zeros(m - 1, 1), false)?;
            store.insert(
                &router_name(li, "e"),
                Matrix::zeros(self.timesteps, m - 1),
                false,
            )?;
        }
        Ok(())
    }

    /// Rebind adapter metadata after loading a checkpoint.
    pub fn set_adapters(&mut self, adapters: Option<AdapterConfig>) {
        self.adapters = adapters;
    }

    pub fn has_routers(&self, store: &ParamStore) -> bool {
        self.adapted_layers()
            .iter()
            .all(|&li| store.contains(&router_name(li, "e")))
    }

    // ── effective weights ───────────────────────────────────────────────

    /// `(alpha/rank) * B * A` for one adapter.
    pub fn lora_delta(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        scale: usize,
        interval: usize,
        li: usize,
    ) -> Result<Var> {
        let adapters = self.require_adapters()?;
        let a = tape.param(store, &expert_name(scale, interval, li, 'a'))?;
        let b = tape.param(store, &expert_name(scale, interval, li, 'b'))?;
        let ba = tape.matmul(b, a)?;
        Ok(tape.scale(ba, adapters.scaling()))
    }

    /// Host weight plus the active interval's delta for one bank scale.
    pub fn effective_weight_foster(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        li: usize,
        t: usize,
        scale: usize,
    ) -> Result<Var> {
        let adapters = self.require_adapters()?;
        if !adapters.scales.contains(scale) {
            return Err(Error::MissingScale(scale));
        }
        let interval = IntervalPartition::new(self.timesteps, scale)?.index_of(t)?;
        let w = tape.param(store, &base_weight_name(li))?;
        let delta = self.lora_delta(tape, store, scale, interval, li)?;
        tape.add(w, delta)
    }

    /// Gate vector for one adapted layer: a linear map of the column-pooled
    /// layer input plus the learned row-`t` timestep embedding. One scalar
    /// per context scale; no normalization, gates may be negative.
    pub fn router_gate(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        li: usize,
        z: Var,
        t: usize,
    ) -> Result<Var> {
        if t < 1 || t > self.timesteps {
            return Err(Error::OutOfRange {
                what: "timestep",
                value: t as i64,
                lo: 1,
                hi: self.timesteps as i64,
            });
        }
        let fw = tape.param(store, &router_name(li, "fw"))?;
        let fb = tape.param(store, &router_name(li, "fb"))?;
        let e = tape.param(store, &router_name(li, "e"))?;
        let pooled = tape.mean_cols(z);
        let lin = tape.matmul(fw, pooled)?;
        let lin = tape.add(lin, fb)?;
        let emb = tape.row_as_col(e, t - 1)?;
        tape.add(lin, emb)
    }

    /// Host weight, plus the core (finest-scale) delta applied as-is, plus
    /// each context delta scaled by its gate.
    pub fn effective_weight_assembled(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        li: usize,
        z: Var,
        t: usize,
    ) -> Result<Var> {
        let adapters = self.require_adapters()?.clone();
        let indices = adapters.scales.indices_of(t, self.timesteps)?;
        let w = tape.param(store, &base_weight_name(li))?;
        let core = self.lora_delta(tape, store, adapters.scales.core_scale(), indices[0], li)?;
        let mut eff = tape.add(w, core)?;
        if adapters.scales.len() > 1 {
            let gate = self.router_gate(tape, store, li, z, t)?;
            let gate_len = tape.value(gate).rows();
            if gate_len != adapters.scales.len() - 1 {
                return Err(Error::InvariantViolation(format!(
                    "router on layer {li} emits {gate_len} gates for {} context scales",
                    adapters.scales.len() - 1
                )));
            }
            for (j, &scale) in adapters.scales.context_scales().iter().enumerate() {
                let delta = self.lora_delta(tape, store, scale, indices[j + 1], li)?;
                let g = tape.entry(gate, j, 0)?;
                let gated = tape.scale_by_scalar(delta, g)?;
                eff = tape.add(eff, gated)?;
            }
        }
        Ok(eff)
    }

    fn require_adapters(&self) -> Result<&AdapterConfig> {
        self.adapters
            .as_ref()
            .ok_or_else(|| Error::Config("no expert bank attached".into()))
    }

    // ── forward passes ──────────────────────────────────────────────────

    fn embed_inputs(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &Matrix,
        ts: &[usize],
        labels: Option<&[usize]>,
    ) -> Result<Var> {
        if x.rows() != self.cfg.data_dim {
            return Err(Error::InvalidArg(format!(
                "input has {} rows, model expects {}",
                x.rows(),
                self.cfg.data_dim
            )));
        }
        if ts.len() != x.cols() {
            return Err(Error::InvalidArg(format!(
                "{} timesteps for a batch of {}",
                ts.len(),
                x.cols()
            )));
        }
        for &t in ts {
            if t < 1 || t > self.timesteps {
                return Err(Error::OutOfRange {
                    what: "timestep",
                    value: t as i64,
                    lo: 1,
                    hi: self.timesteps as i64,
                });
            }
        }

        let x_var = tape.constant(x.clone());
        let w0 = tape.param(store, &base_weight_name(0))?;
        let b0 = tape.param(store, &base_bias_name(0))?;
        let h = tape.matmul(w0, x_var)?;
        let h = tape.add_col_vec(h, b0)?;
        let mut h = tape.silu(h);

        // per-column sinusoidal embedding, projected and added post-activation
        let mut emb = Matrix::zeros(self.cfg.time_embed_dim, ts.len());
        for (s, &t) in ts.iter().enumerate() {
            for (i, v) in time_embedding(t, self.cfg.time_embed_dim).iter().enumerate() {
                emb.set(i, s, *v);
            }
        }
        let emb = tape.constant(emb);
        let tw = tape.param(store, "base.time.w")?;
        let tb = tape.param(store, "base.time.b")?;
        let te = tape.matmul(tw, emb)?;
        let te = tape.add_col_vec(te, tb)?;
        h = tape.add(h, te)?;

        if let Some(classes) = self.cfg.num_classes {
            if let Some(labels) = labels {
                if labels.len() != x.cols() {
                    return Err(Error::InvalidArg(format!(
                        "{} labels for a batch of {}",
                        labels.len(),
                        x.cols()
                    )));
                }
                // one-hot selection keeps the lookup differentiable and batched
                let mut sel = Matrix::zeros(classes, labels.len());
                for (s, &c) in labels.iter().enumerate() {
                    if c >= classes {
                        return Err(Error::OutOfRange {
                            what: "class label",
                            value: c as i64,
                            lo: 0,
                            hi: classes as i64 - 1,
                        });
                    }
                    sel.set(c, s, 1.0);
                }
                let sel = tape.constant(sel);
                let table = tape.param(store, "base.cond.table")?;
                let ce = tape.matmul(table, sel)?;
                h = tape.add(h, ce)?;
            }
        }
        Ok(h)
    }

    fn finite_or_err(&self, tape: &Tape, v: Var, li: usize) -> Result<()> {
        if !tape.value(v).is_finite() {
            return Err(Error::NonFinite {
                context: format!("activations after layer {li}"),
            });
        }
        Ok(())
    }

    /// Noise prediction as a tape expression.
    ///
    /// `Base` and `Foster` accept any batch width; a fostering batch must sit
    /// inside a single interval so one merged weight serves every column.
    /// `Assembled` weights depend on each column's own gate, so that mode
    /// only accepts single-column input here; batch callers go through
    /// [`Denoiser::predict`].
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &Matrix,
        ts: &[usize],
        labels: Option<&[usize]>,
        mode: ForwardMode,
    ) -> Result<Var> {
        Ok(self.forward_impl(tape, store, x, ts, labels, mode, false)?.0)
    }

    /// Same forward, but with gate vectors of every adapted layer reported
    /// (empty unless assembled with context scales).
    pub fn forward_with_gates(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &Matrix,
        ts: &[usize],
        labels: Option<&[usize]>,
        mode: ForwardMode,
    ) -> Result<(Var, Vec<Var>)> {
        self.forward_impl(tape, store, x, ts, labels, mode, false)
    }

    /// Two-path variant: instead of merging deltas into the host weight, each
    /// adapter contribution flows through its own `B (A z)` product. Exists as
    /// the independent algebraic route for equivalence checks.
    pub fn forward_split(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &Matrix,
        ts: &[usize],
        labels: Option<&[usize]>,
        mode: ForwardMode,
    ) -> Result<Var> {
        Ok(self.forward_impl(tape, store, x, ts, labels, mode, true)?.0)
    }

    #[allow(clippy::too_many_arguments)]
    fn forward_impl(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &Matrix,
        ts: &[usize],
        labels: Option<&[usize]>,
        mode: ForwardMode,
        split_paths: bool,
    ) -> Result<(Var, Vec<Var>)> {
        match mode {
            ForwardMode::Base => {}
            ForwardMode::Foster { scale } => {
                let adapters = self.require_adapters()?;
                if !adapters.scales.contains(scale) {
                    return Err(Error::MissingScale(scale));
                }
                let p = IntervalPartition::new(self.timesteps, scale)?;
                let first = p.index_of(
                    *ts.first()
                        .ok_or_else(|| Error::InvalidArg("empty batch".into()))?,
                )?;
                for &t in ts {
                    if p.index_of(t)? != first {
                        return Err(Error::InvalidArg(
                            "fostering batch spans multiple intervals".into(),
                        ));
                    }
                }
            }
            ForwardMode::Assembled => {
                self.require_adapters()?;
                if !self.has_routers(store) {
                    return Err(Error::Config("assembled mode needs routers".into()));
                }
                if x.cols() != 1 {
                    return Err(Error::InvalidArg(
                        "assembled forward is per-sample; use predict for batches".into(),
                    ));
                }
            }
        }

        let mut h = self.embed_inputs(tape, store, x, ts, labels)?;
        let adapted = self.adapted_layers();
        let mut gates = Vec::new();
        let last = self.cfg.layer_count() - 1;

        for li in 1..=last {
            let is_adapted = adapted.contains(&li);
            let b = tape.param(store, &base_bias_name(li))?;
            let pre = match (mode, is_adapted) {
                (ForwardMode::Base, _) | (_, false) => {
                    let w = tape.param(store, &base_weight_name(li))?;
                    tape.matmul(w, h)?
                }
                (ForwardMode::Foster { scale }, true) => {
                    if split_paths {
                        self.split_foster_pre(tape, store, li, ts[0], scale, h)?
                    } else {
                        let w_eff =
                            self.effective_weight_foster(tape, store, li, ts[0], scale)?;
                        tape.matmul(w_eff, h)?
                    }
                }
                (ForwardMode::Assembled, true) => {
                    if split_paths {
                        let (pre, gate) = self.split_assembled_pre(tape, store, li, ts[0], h)?;
                        if let Some(gate) = gate {
                            gates.push(gate);
                        }
                        pre
                    } else {
                        let adapters = self.require_adapters()?;
                        if adapters.scales.len() > 1 {
                            // report the same gate expression the effective
                            // weight consumes; tape fan-out shares the value
                            let gate = self.router_gate(tape, store, li, h, ts[0])?;
                            gates.push(gate);
                        }
                        let w_eff =
                            self.effective_weight_assembled(tape, store, li, h, ts[0])?;
                        tape.matmul(w_eff, h)?
                    }
                }
            };
            let pre = tape.add_col_vec(pre, b)?;
            if li == last {
                self.finite_or_err(tape, pre, li)?;
                return Ok((pre, gates));
            }
            h = tape.silu(pre);
            self.finite_or_err(tape, h, li)?;
        }
        unreachable!("loop returns at the output layer");
    }

    /// `W z + (alpha/r) * B (A z)` without merging.
    fn split_foster_pre(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        li: usize,
        t: usize,
        scale: usize,
        z: Var,
    ) -> Result<Var> {
        let adapters = self.require_adapters()?;
        let interval = IntervalPartition::new(self.timesteps, scale)?.index_of(t)?;
        let w = tape.param(store, &base_weight_name(li))?;
        let base = tape.matmul(w, z)?;
        let a = tape.param(store, &expert_name(scale, interval, li, 'a'))?;
        let b = tape.param(store, &expert_name(scale, interval, li, 'b'))?;
        let az = tape.matmul(a, z)?;
        let b_az = tape.matmul(b, az)?;
        let scaled = tape.scale(b_az, adapters.scaling());
        tape.add(base, scaled)
    }

    fn split_assembled_pre(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        li: usize,
        t: usize,
        z: Var,
    ) -> Result<(Var, Option<Var>)> {
        let adapters = self.require_adapters()?.clone();
        let indices = adapters.scales.indices_of(t, self.timesteps)?;
        let core_scale = adapters.scales.core_scale();
        let mut out = self.split_foster_pre(tape, store, li, t, core_scale, z)?;
        let mut gate_var = None;
        if adapters.scales.len() > 1 {
            let gate = self.router_gate(tape, store, li, z, t)?;
            gate_var = Some(gate);
            for (j, &scale) in adapters.scales.context_scales().iter().enumerate() {
                let a = tape.param(store, &expert_name(scale, indices[j + 1], li, 'a'))?;
                let b = tape.param(store, &expert_name(scale, indices[j + 1], li, 'b'))?;
                let az = tape.matmul(a, z)?;
                let b_az = tape.matmul(b, az)?;
                let scaled = tape.scale(b_az, adapters.scaling());
                let g = tape.entry(gate, j, 0)?;
                let gated = tape.scale_by_scalar(scaled, g)?;
                out = tape.add(out, gated)?;
            }
        }
        Ok((out, gate_var))
    }

    // ── inference ───────────────────────────────────────────────────────

    /// Noise prediction without gradients. Assembled batches run column by
    /// column; the other modes run batched. Either way each output column is
    /// bit-identical to the single-sample result.
    pub fn predict(
        &self,
        store: &ParamStore,
        x: &Matrix,
        ts: &[usize],
        labels: Option<&[usize]>,
        mode: ForwardMode,
    ) -> Result<Matrix> {
        Ok(self.predict_with_gates(store, x, ts, labels, mode)?.0)
    }

    /// Prediction plus per-adapted-layer gate vectors averaged over the
    /// batch (empty unless assembled with context scales).
    pub fn predict_with_gates(
        &self,
        store: &ParamStore,
        x: &Matrix,
        ts: &[usize],
        labels: Option<&[usize]>,
        mode: ForwardMode,
    ) -> Result<(Matrix, Vec<Vec<f64>>)> {
        if mode == ForwardMode::Assembled && x.cols() > 1 {
            let mut out = Matrix::zeros(x.rows(), x.cols());
            let mut gate_sums: Vec<Vec<f64>> = Vec::new();
            for s in 0..x.cols() {
                let col = x.column(s);
                let lab = labels.map(|l| vec![l[s]]);
                let mut tape = Tape::new();
                let (y, gates) = self.forward_with_gates(
                    &mut tape,
                    store,
                    &col,
                    &ts[s..=s],
                    lab.as_deref(),
                    mode,
                )?;
                for i in 0..x.rows() {
                    out.set(i, s, tape.value(y).get(i, 0));
                }
                for (gi, g) in gates.iter().enumerate() {
                    let gv = tape.value(*g);
                    if gate_sums.len() <= gi {
                        gate_sums.push(vec![0.0; gv.rows()]);
                    }
                    for (r, slot) in gate_sums[gi].iter_mut().enumerate() {
                        *slot += gv.get(r, 0);
                    }
                }
            }
            let n = x.cols() as f64;
            for g in &mut gate_sums {
                for v in g.iter_mut() {
                    *v /= n;
                }
            }
            Ok((out, gate_sums))
        } else {
            let mut tape = Tape::new();
            let (y, gates) = self.forward_with_gates(&mut tape, store, x, ts, labels, mode)?;
            let out = tape.value(y).clone();
            let gate_vals = gates.iter().map(|&g| tape.value(g).col_vec(0)).collect();
            Ok((out, gate_vals))
        }
    }

    /// Base-mode forward that also returns the input of every layer in the
    /// stack (the post-embedding hidden states), for activation diagnostics.
    pub fn predict_trace(
        &self,
        store: &ParamStore,
        x: &Matrix,
        ts: &[usize],
        labels: Option<&[usize]>,
    ) -> Result<(Matrix, Vec<Matrix>)> {
        let mut tape = Tape::new();
        let mut h = self.embed_inputs(&mut tape, store, x, ts, labels)?;
        let mut trace = vec![tape.value(h).clone()];
        let last = self.cfg.layer_count() - 1;
        for li in 1..=last {
            let w = tape.param(store, &base_weight_name(li))?;
            let b = tape.param(store, &base_bias_name(li))?;
            let pre = tape.matmul(w, h)?;
            let pre = tape.add_col_vec(pre, b)?;
            if li == last {
                return Ok((tape.value(pre).clone(), trace));
            }
            h = tape.silu(pre);
            trace.push(tape.value(h).clone());
        }
        unreachable!()
    }

    // ── parameter accounting ────────────────────────────────────────────

    /// Closed-form scalar count of one adapter on layer `li`: `r * (d + k)`.
    pub fn adapter_scalars(&self, li: usize, rank: usize) -> usize {
        let (d, k) = self.cfg.layer_dims(li);
        rank * (d + k)
    }

    /// Closed-form scalar count of one router on layer `li`:
    /// `(m-1) * (k+1) + T * (m-1)`.
    pub fn router_scalars(&self, li: usize, m: usize) -> usize {
        let (_, k) = self.cfg.layer_dims(li);
        (m - 1) * (k + 1) + self.timesteps * (m - 1)
    }

    /// Total scalars across the whole expert bank.
    pub fn expert_bank_scalars(&self) -> usize {
        match &self.adapters {
            None => 0,
            Some(a) => {
                let per_layer: usize = self
                    .adapted_layers()
                    .iter()
                    .map(|&li| self.adapter_scalars(li, a.rank))
                    .sum();
                let intervals: usize = a.scales.scales().iter().sum();
                per_layer * intervals
            }
        }
    }

    /// Total scalars across all routers.
    pub fn router_total_scalars(&self) -> usize {
        match &self.adapters {
            None => 0,
            Some(a) => self
                .adapted_layers()
                .iter()
                .map(|&li| self.router_scalars(li, a.scales.len()))
                .sum(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            data_dim: 2,
            hidden_width: 8,
            hidden_layers: 2,
            time_embed_dim: 4,
            num_classes: None,
            adapt_input: false,
            adapt_output: false,
        }
    }

    fn adapter_cfg(scales: Vec<usize>, rank: usize) -> AdapterConfig {
        AdapterConfig {
            scales: ScaleSet::new(scales).unwrap(),
            rank,
            alpha: rank as f64,
        }
    }

    fn build(scales: Vec<usize>, with_routers: bool) -> (Denoiser, ParamStore) {
        let mut rng = CounterRng::seed(42);
        let mut model = Denoiser::new(tiny_config(), 40).unwrap();
        let mut store = ParamStore::new();
        model.init_base(&mut store, &mut rng).unwrap();
        model
            .attach_adapters(&mut store, adapter_cfg(scales, 2), &mut rng)
            .unwrap();
        if with_routers {
            model.attach_routers(&mut store).unwrap();
        }
        (model, store)
    }

    fn randomize_experts_and_routers(store: &mut ParamStore, seed: u64) {
        let mut rng = CounterRng::seed(seed);
        let names: Vec<String> = store
            .names()
            .filter(|n| n.starts_with("expert.") || n.starts_with("router."))
            .map(String::from)
            .collect();
        for name in names {
            let p = store.get_mut(&name).unwrap();
            for v in p.value.data_mut() {
                *v = 0.3 * rng.normal();
            }
        }
    }

    fn random_input(model: &Denoiser, cols: usize, seed: u64) -> Matrix {
        let mut rng = CounterRng::seed(seed);
        let mut x = Matrix::zeros(model.config().data_dim, cols);
        rng.fill_normal(x.data_mut());
        x
    }

    #[test]
    fn lora_delta_zero_init_and_hand_product() {
        let (model, mut store) = build(vec![4, 1], false);
        let mut tape = Tape::new();
        let d = model.lora_delta(&mut tape, &store, 4, 1, 1).unwrap();
        assert_eq!(tape.value(d), &Matrix::zeros(8, 8));

        // overwrite the factors and check (alpha/r) * B * A by hand
        let a_val = Matrix::from_vec(2, 8, vec![1.0; 16]).unwrap();
        let b_val = {
            let mut m = Matrix::zeros(8, 2);
            m.set(0, 0, 3.0);
            m.set(1, 0, 4.0);
            m
        };
        store.get_mut("expert.n4.i1.layer1.a").unwrap().value = a_val;
        store.get_mut("expert.n4.i1.layer1.b").unwrap().value = b_val;
        let mut tape = Tape::new();
        let d = model.lora_delta(&mut tape, &store, 4, 1, 1).unwrap();
        // alpha = r = 2 so the scaling factor is exactly 1
        assert_eq!(tape.value(d).get(0, 0), 3.0);
        assert_eq!(tape.value(d).get(1, 3), 4.0);
    }

    #[test]
    fn router_gate_hand_example() {
        // fw row = [1, 0, ...], fb = 0, E[t] = 0.5, z = [2, 7, 0, ...]
        let (model, mut store) = build(vec![4, 1], true);
        store
            .get_mut("router.layer1.fw")
            .unwrap()
            .value
            .set(0, 0, 1.0);
        let t = 5usize;
        store
            .get_mut("router.layer1.e")
            .unwrap()
            .value
            .set(t - 1, 0, 0.5);
        let mut z_val = Matrix::zeros(8, 1);
        z_val.set(0, 0, 2.0);
        z_val.set(1, 0, 7.0);
        let mut tape = Tape::new();
        let z = tape.constant(z_val);
        let g = model.router_gate(&mut tape, &store, 1, z, t).unwrap();
        assert_eq!(tape.value(g).get(0, 0), 2.5);
    }

    #[test]
    fn router_gate_zero_params_and_bad_t() {
        let (model, store) = build(vec![4, 1], true);
        let mut tape = Tape::new();
        let mut zm = Matrix::zeros(8, 3);
        let mut rng = CounterRng::seed(3);
        rng.fill_normal(zm.data_mut());
        let z3 = tape.constant(zm);
        let g = model.router_gate(&mut tape, &store, 1, z3, 7).unwrap();
        assert_eq!(tape.value(g), &Matrix::zeros(1, 1));
        assert!(model.router_gate(&mut tape, &store, 1, z3, 0).is_err());
        assert!(model.router_gate(&mut tape, &store, 1, z3, 41).is_err());
    }

    #[test]
    fn zero_init_neutrality_is_bit_exact() {
        let (model, store) = build(vec![4, 1], true);
        let x = random_input(&model, 5, 11);
        let ts = vec![7usize; 5];
        let base = model
            .predict(&store, &x, &ts, None, ForwardMode::Base)
            .unwrap();
        let foster = model
            .predict(&store, &x, &ts, None, ForwardMode::Foster { scale: 4 })
            .unwrap();
        let assembled = model
            .predict(&store, &x, &ts, None, ForwardMode::Assembled)
            .unwrap();
        for (a, b) in base.data().iter().zip(foster.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in base.data().iter().zip(assembled.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn zero_gates_reduce_assembled_to_core_bitwise() {
        let (model, mut store) = build(vec![4, 1], true);
        // move experts off zero but keep routers at zero
        let mut rng = CounterRng::seed(13);
        let names: Vec<String> = store
            .names()
            .filter(|n| n.starts_with("expert."))
            .map(String::from)
            .collect();
        for name in names {
            for v in store.get_mut(&name).unwrap().value.data_mut() {
                *v = 0.2 * rng.normal();
            }
        }
        let x = random_input(&model, 4, 17);
        let ts = vec![23usize; 4];
        let core = model
            .predict(&store, &x, &ts, None, ForwardMode::Foster { scale: 4 })
            .unwrap();
        let assembled = model
            .predict(&store, &x, &ts, None, ForwardMode::Assembled)
            .unwrap();
        for (a, b) in core.data().iter().zip(assembled.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn merged_and_split_paths_agree_within_1e_10() {
        let (model, mut store) = build(vec![4, 1], true);
        randomize_experts_and_routers(&mut store, 19);
        let x = random_input(&model, 1, 23);
        for t in [1usize, 11, 40] {
            for mode in [
                ForwardMode::Foster { scale: 4 },
                ForwardMode::Foster { scale: 1 },
                ForwardMode::Assembled,
            ] {
                let mut tape = Tape::new();
                let merged = model
                    .forward(&mut tape, &store, &x, &[t], None, mode)
                    .unwrap();
                let mut tape2 = Tape::new();
                let split = model
                    .forward_split(&mut tape2, &store, &x, &[t], None, mode)
                    .unwrap();
                let diff = tape.value(merged).max_abs_diff(tape2.value(split));
                assert!(diff < 1e-10, "mode {mode:?} t={t}: diff {diff}");
            }
        }
    }

    #[test]
    fn expert_locality_over_all_timesteps() {
        // perturbing adapter (scale, i) moves outputs only for t inside i
        let (model, store) = build(vec![4], false);
        let x = random_input(&model, 1, 29);
        let t_all: Vec<usize> = (1..=40).collect();
        let baseline: Vec<Matrix> = t_all
            .iter()
            .map(|&t| {
                model
                    .predict(&store, &x, &[t], None, ForwardMode::Foster { scale: 4 })
                    .unwrap()
            })
            .collect();
        let mut poked = store.clone();
        poked
            .get_mut("expert.n4.i2.layer1.b")
            .unwrap()
            .value
            .set(0, 0, 1.0);
        let p = IntervalPartition::new(40, 4).unwrap();
        for (idx, &t) in t_all.iter().enumerate() {
            let out = model
                .predict(&poked, &x, &[t], None, ForwardMode::Foster { scale: 4 })
                .unwrap();
            let changed = out.max_abs_diff(&baseline[idx]) > 0.0;
            let inside = p.index_of(t).unwrap() == 2;
            assert_eq!(changed, inside, "t={t}");
        }
    }

    #[test]
    fn gate_depends_only_on_own_timestep_row() {
        let (model, mut store) = build(vec![4, 1], true);
        randomize_experts_and_routers(&mut store, 31);
        let x = random_input(&model, 1, 37);
        let t = 9usize;
        let before = model
            .predict(&store, &x, &[t], None, ForwardMode::Assembled)
            .unwrap();
        // bump every embedding row except t-1: output must not move
        for s in 0..40 {
            if s != t - 1 {
                let e = &mut store.get_mut("router.layer1.e").unwrap().value;
                e.set(s, 0, e.get(s, 0) + 5.0);
            }
        }
        let after = model
            .predict(&store, &x, &[t], None, ForwardMode::Assembled)
            .unwrap();
        assert_eq!(before, after);
        // bumping row t-1 must move it
        let e = &mut store.get_mut("router.layer1.e").unwrap().value;
        e.set(t - 1, 0, e.get(t - 1, 0) + 5.0);
        let moved = model
            .predict(&store, &x, &[t], None, ForwardMode::Assembled)
            .unwrap();
        assert!(moved.max_abs_diff(&before) > 0.0);
    }

    #[test]
    fn assembled_batch_matches_per_sample_bitwise() {
        let (model, mut store) = build(vec![4, 1], true);
        randomize_experts_and_routers(&mut store, 47);
        let x = random_input(&model, 6, 53);
        let ts: Vec<usize> = vec![3, 3, 17, 22, 39, 40];
        let batched = model
            .predict(&store, &x, &ts, None, ForwardMode::Assembled)
            .unwrap();
        for s in 0..6 {
            let single = model
                .predict(&store, &x.column(s), &ts[s..=s], None, ForwardMode::Assembled)
                .unwrap();
            for i in 0..x.rows() {
                assert_eq!(batched.get(i, s).to_bits(), single.get(i, 0).to_bits());
            }
        }
    }

    #[test]
    fn parameter_counts_match_closed_forms() {
        let (model, store) = build(vec![4, 1], true);
        // experts: (4+1) intervals x 2 adapted layers x r(d+k) = 5 * 2 * 2*16
        assert_eq!(model.expert_bank_scalars(), 5 * 2 * (2 * (8 + 8)));
        assert_eq!(
            store.scalar_count_where(|n| n.starts_with("expert.")),
            model.expert_bank_scalars()
        );
        // routers: 2 layers x ((m-1)(k+1) + T(m-1)) with m=2, k=8, T=40
        assert_eq!(model.router_total_scalars(), 2 * (9 + 40));
        assert_eq!(
            store.scalar_count_where(|n| n.starts_with("router.")),
            model.router_total_scalars()
        );
    }

    #[test]
    fn conditional_embedding_moves_output_per_class() {
        let mut cfg = tiny_config();
        cfg.num_classes = Some(3);
        let mut rng = CounterRng::seed(7);
        let model = Denoiser::new(cfg, 40).unwrap();
        let mut store = ParamStore::new();
        model.init_base(&mut store, &mut rng).unwrap();
        let x = random_input(&model, 2, 59);
        let a = model
            .predict(&store, &x, &[5, 5], Some(&[0, 0]), ForwardMode::Base)
            .unwrap();
        let b = model
            .predict(&store, &x, &[5, 5], Some(&[1, 1]), ForwardMode::Base)
            .unwrap();
        assert!(a.max_abs_diff(&b) > 0.0);
        assert!(model
            .predict(&store, &x, &[5, 5], Some(&[0, 3]), ForwardMode::Base)
            .is_err());
    }

    #[test]
    fn rank_cap_is_enforced() {
        let mut rng = CounterRng::seed(8);
        let mut model = Denoiser::new(tiny_config(), 40).unwrap();
        let mut store = ParamStore::new();
        model.init_base(&mut store, &mut rng).unwrap();
        // hidden width 8 -> max rank 4
        let err = model.attach_adapters(&mut store, adapter_cfg(vec![2], 5), &mut rng);
        assert!(err.is_err());
    }

    #[test]
    fn foster_batch_must_stay_in_one_interval() {
        let (model, store) = build(vec![4], false);
        let x = random_input(&model, 2, 61);
        // t=10 is interval 1, t=11 is interval 2 under (T=40, n=4)
        let err = model.predict(&store, &x, &[10, 11], None, ForwardMode::Foster { scale: 4 });
        assert!(err.is_err());
        assert!(model
            .predict(&store, &x, &[9, 10], None, ForwardMode::Foster { scale: 4 })
            .is_ok());
    }
}
