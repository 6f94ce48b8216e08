//! Few-shot adaptation: a small two-layer dense projector mapping a new
//! montage's channels into the frozen model's input space, with the k-shot
//! and leave-one-subject-out protocols built on it.

mod protocol;

pub use protocol::{
    draw_kshot, kshot_protocol, loso_cv, stratified_folds, KshotConfig, KshotDraw, KshotEvaluation, KshotReport,
    LosoFold, LosoReport,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierModel, ForwardOptions, InputStage};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::signal::{pad_batch, Batch, Trial};
use crate::tensor::{AdamConfig, Graph, Initializer, OptimizerState, Var};

/// Trainable weights must stay strictly below this count.
pub const PARAM_BUDGET: usize = 2000;

/// Largest hidden width keeping `c_new*h + h*c_model` under the budget.
pub fn max_hidden(c_new: usize, c_model: usize) -> usize {
    (PARAM_BUDGET - 1) / (c_new + c_model).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    /// Hidden width; `None` picks [`max_hidden`].
    pub hidden: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Standard deviation of the truncated-normal weight init.
    pub init_std: f64,
    /// Number of leading ensemble members the adapter is trained and
    /// evaluated against; 0 uses all of them.
    pub ensemble_members: usize,
    pub adam: AdamConfig,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            hidden: None,
            epochs: 50,
            batch_size: 5,
            init_std: 0.3,
            ensemble_members: 0,
            adam: AdamConfig {
                lr: 5e-2,
                ..AdamConfig::default()
            },
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("adapter epochs and batch_size must be positive"));
        }
        if self.hidden == Some(0) {
            return Err(Error::config("adapter hidden width must be positive"));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::config("adapter init_std must be positive"));
        }
        Ok(())
    }

    /// The leading members of `models` selected by `ensemble_members`.
    pub fn members<'a>(&self, models: &'a [ClassifierModel]) -> &'a [ClassifierModel] {
        match self.ensemble_members {
            0 => models,
            n => &models[..n.min(models.len())],
        }
    }
}

/// Two dense layers with a GELU between them. The biases are plain zero
/// vectors kept outside the parameter store, so no optimizer ever sees them.
#[derive(Debug, Clone)]
pub struct Adapter {
    pub c_new: usize,
    pub c_model: usize,
    pub hidden: usize,
    pub params: ParamStore,
    b1: Vec<f64>,
    b2: Vec<f64>,
    w1: ParamId,
    w2: ParamId,
}

impl Adapter {
    pub fn new(c_new: usize, c_model: usize, hidden: usize, init: &mut Initializer) -> Result<Self> {
        if c_new == 0 || c_model == 0 || hidden == 0 {
            return Err(Error::config("adapter dimensions must be positive"));
        }
        let count = c_new * hidden + hidden * c_model;
        if count >= PARAM_BUDGET {
            return Err(Error::config(format!(
                "adapter with {c_new}x{hidden} and {hidden}x{c_model} weights has {count} parameters, budget is below {PARAM_BUDGET}"
            )));
        }
        let mut params = ParamStore::new();
        let w1 = params.add("adapter.w1", init.weight(&[c_new, hidden]));
        let w2 = params.add("adapter.w2", init.weight(&[hidden, c_model]));
        Ok(Adapter {
            c_new,
            c_model,
            hidden,
            params,
            b1: vec![0.0; hidden],
            b2: vec![0.0; c_model],
            w1,
            w2,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Hidden and output biases, always zero.
    pub fn biases(&self) -> (&[f64], &[f64]) {
        (&self.b1, &self.b2)
    }

    pub fn w1(&self) -> ParamId {
        self.w1
    }

    pub fn w2(&self) -> ParamId {
        self.w2
    }

    /// Maps a padded batch with `c_new` channels to the time-major model
    /// input `[batch*len x c_model]`; padded steps come out as exact zeros.
    pub fn forward(&self, g: &mut Graph, p: &Bound, batch: &Batch) -> Result<Var> {
        if batch.channels != self.c_new {
            return Err(Error::shape(format!(
                "adapter expects {} channels, batch has {}",
                self.c_new, batch.channels
            )));
        }
        let rows = batch.size() * batch.max_len;
        let x = g.constant(vec![rows, self.c_new], batch.time_major())?;
        let b1 = g.constant(vec![self.hidden], self.b1.clone())?;
        let b2 = g.constant(vec![self.c_model], self.b2.clone())?;
        let h = g.matmul(x, p[self.w1])?;
        let h = g.add_row(h, b1)?;
        let h = g.gelu(h);
        let y = g.matmul(h, p[self.w2])?;
        let y = g.add_row(y, b2)?;
        let keep = batch
            .mask
            .iter()
            .flat_map(|&m| std::iter::repeat_n(if m { 1.0 } else { 0.0 }, self.c_model))
            .collect();
        g.mul_const(y, keep)
    }
}

impl InputStage for Adapter {
    fn apply(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        let p = self.params.bind(g);
        self.forward(g, &p, batch)
    }
}

fn shared_channels(trials: &[Trial]) -> Result<usize> {
    let c = trials
        .first()
        .ok_or_else(|| Error::InsufficientData("no trials to adapt on".into()))?
        .channels();
    if trials.iter().any(|t| t.channels() != c) {
        return Err(Error::shape("adaptation trials differ in channel count"));
    }
    Ok(c)
}

/// Trains a fresh adapter in front of the frozen `models`. The loss is the
/// mean binary cross-entropy over the ensemble; only the two weight
/// matrices are updated.
pub fn train_adapter(trials: &[Trial], models: &[ClassifierModel], config: &AdapterConfig, seed: u64) -> Result<Adapter> {
    config.validate()?;
    let models = config.members(models);
    let first = models
        .first()
        .ok_or_else(|| Error::Contract("adapter training needs at least one frozen model".into()))?;
    let c_model = first.channels();
    if models.iter().any(|m| m.channels() != c_model) {
        return Err(Error::shape("ensemble members differ in input channel count"));
    }
    crate::classifier::require_both_classes(trials)?;
    let c_new = shared_channels(trials)?;
    let hidden = config.hidden.unwrap_or_else(|| max_hidden(c_new, c_model));

    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    init_rng.set_stream(4);
    let mut init = Initializer::new(init_rng);
    init.std = config.init_std;
    let mut adapter = Adapter::new(c_new, c_model, hidden, &mut init)?;
    let before: Vec<[u8; 32]> = models.iter().map(ClassifierModel::checksum).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(5);
    let mut opt = OptimizerState::new(config.adam);
    let mut order: Vec<usize> = (0..trials.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let refs: Vec<&Trial> = chunk.iter().map(|&i| &trials[i]).collect();
            let labels: Vec<f64> = refs.iter().map(|t| t.label.as_f64()).collect();
            let batch = pad_batch(&refs)?;
            let mut g = Graph::new();
            let pa = adapter.params.bind(&mut g);
            let x = adapter.forward(&mut g, &pa, &batch)?;
            let mut total: Option<Var> = None;
            for m in models {
                let b = m.bind(&mut g);
                let pass = m.forward(&mut g, &b, x, &batch, ForwardOptions::default(), None)?;
                let loss = g.bce_with_logits(pass.logits, &labels)?;
                total = Some(match total {
                    Some(t) => g.add(t, loss)?,
                    None => loss,
                });
            }
            let loss = g.scale(total.expect("at least one model"), 1.0 / models.len() as f64);
            let value = g.value(loss)[0];
            if !value.is_finite() {
                return Err(Error::Training {
                    epoch,
                    message: "adapter loss is not finite".into(),
                });
            }
            epoch_loss += value * refs.len() as f64;
            let mut grads = g.backward(loss)?;
            adapter.params.collect_grads(&pa, &mut grads)?;
            adapter.params.step(&mut opt)?;
            adapter.params.zero_grads();
        }
        log::debug!("adapter seed {seed} epoch {epoch}: loss {:.4}", epoch_loss / trials.len() as f64);
    }
    for (m, b) in models.iter().zip(&before) {
        if m.checksum() != *b {
            return Err(Error::Contract("a frozen model changed during adaptation".into()));
        }
    }
    adapter.params.set_trainable(false);
    Ok(adapter)
}

#[cfg(test)]
mod tests;
