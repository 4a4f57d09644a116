//! Masked fine-tuning: only the tensors named in a [`SelectionMask`] are
//! differentiated and updated; every other tensor keeps its exact bytes.

use std::collections::HashSet;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamRegistry, Prepared};
use crate::seed::{derive_seed, rng, stream};
use crate::sensitivity::SelectionMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam => "adam",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            epochs: 100,
            lr: 1e-3,
            batch: 16,
            optimizer: Optimizer::Adam,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    /// `lr = 0` is accepted and leaves every parameter unchanged.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "invalid training config: epochs={} batch={} lr={}",
                self.epochs, self.batch, self.lr
            )));
        }
        Ok(())
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

struct AdamState {
    m: Vec<f32>,
    v: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub model: Model,
    /// Mean training L1 per epoch.
    pub trace: Vec<f64>,
}

/// Mask selecting every trainable tensor.
pub fn full_mask(registry: &ParamRegistry) -> SelectionMask {
    SelectionMask {
        selected: registry.trainable_names().map(String::from).collect(),
        p_select: 1.0,
        sharpness: 0.0,
        scalar_fraction: 1.0,
    }
}

/// Fine-tune the masked tensors of a copy of `model` on `scenes`.
///
/// Scenes are ordered by id and split once into fixed batches; each epoch
/// visits the batches in a freshly shuffled order.
pub fn adapt(
    model: &Model,
    mask: &SelectionMask,
    scenes: &[Prepared],
    cfg: &AdaptConfig,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if mask.selected.is_empty() {
        return Err(Error::Config("selection mask is empty".into()));
    }
    if scenes.is_empty() {
        return Err(Error::Data("no scenes to adapt on".into()));
    }
    let trainable: HashSet<&str> = model.params().trainable_names().collect();
    if let Some(bad) = mask.selected.iter().find(|n| !trainable.contains(n.as_str())) {
        return Err(Error::Config(format!(
            "mask names `{bad}`, which is not a trainable tensor of the model"
        )));
    }
    let wanted: HashSet<String> = mask.selected.iter().cloned().collect();

    let mut ordered: Vec<&Prepared> = scenes.iter().collect();
    ordered.sort_by_key(|p| p.id);
    let batches: Vec<&[&Prepared]> = ordered.chunks(cfg.batch).collect();
    let total = ordered.len() as f64;

    let mut model = model.clone();
    let mut adam: Vec<Option<AdamState>> = model
        .params()
        .entries()
        .iter()
        .map(|e| {
            wanted.contains(&e.name).then(|| AdamState {
                m: vec![0.0; e.scalar_count()],
                v: vec![0.0; e.scalar_count()],
            })
        })
        .collect();
    let mut step = 0i32;
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut visit: Vec<usize> = (0..batches.len()).collect();

    for epoch in 0..cfg.epochs {
        visit.sort_unstable();
        visit.shuffle(&mut rng(derive_seed(cfg.seed, &[stream::SHUFFLE, epoch as u64])));
        let mut losses = vec![0.0f64; batches.len()];
        for &b in &visit {
            let (loss, grads) = model.loss_and_grads(batches[b], Some(&wanted))?;
            if !loss.is_finite() {
                return Err(Error::NonFinite { epoch });
            }
            losses[b] = loss as f64 * batches[b].len() as f64;
            step += 1;
            let (bc1, bc2) = (1.0 - BETA1.powi(step), 1.0 - BETA2.powi(step));
            for (entry, state) in model.params_mut().entries_mut().iter_mut().zip(adam.iter_mut()) {
                let Some(state) = state else { continue };
                let g = grads.get(&entry.name).expect("gradient per leaf").data();
                let p = entry.tensor.data_mut();
                match cfg.optimizer {
                    Optimizer::Sgd => {
                        for (p, &g) in p.iter_mut().zip(g) {
                            *p = (*p as f64 - cfg.lr * g as f64) as f32;
                        }
                    }
                    Optimizer::Adam => {
                        for k in 0..p.len() {
                            let g = g[k] as f64;
                            let m = BETA1 * state.m[k] as f64 + (1.0 - BETA1) * g;
                            let v = BETA2 * state.v[k] as f64 + (1.0 - BETA2) * g * g;
                            state.m[k] = m as f32;
                            state.v[k] = v as f32;
                            let update = cfg.lr * (m / bc1) / ((v / bc2).sqrt() + EPS);
                            p[k] = (p[k] as f64 - update) as f32;
                        }
                    }
                }
            }
        }
        if model.params().entries().iter().any(|e| !e.tensor.is_finite()) {
            return Err(Error::NonFinite { epoch });
        }
        let mean = losses.iter().sum::<f64>() / total;
        log::debug!("epoch {epoch}: mean L1 {mean:.6}");
        trace.push(mean);
    }
    Ok(AdaptOutcome { model, trace })
}

/// Update every trainable tensor on the full dataset.
pub fn full_retrain(model: &Model, scenes: &[Prepared], cfg: &AdaptConfig) -> Result<AdaptOutcome> {
    adapt(model, &full_mask(model.params()), scenes, cfg)
}

/// Build a fresh model from `seed` and train it on `scenes`.
pub fn pretrain(
    config: ModelConfig,
    scenes: &[Prepared],
    cfg: &AdaptConfig,
) -> Result<AdaptOutcome> {
    full_retrain(&Model::build(config, cfg.seed)?, scenes, cfg)
}

/// Mean L1 of `model` over `scenes`, batched by `batch`.
pub fn mean_l1(model: &Model, scenes: &[Prepared], batch: usize) -> Result<f64> {
    if scenes.is_empty() {
        return Err(Error::Data("no scenes to evaluate".into()));
    }
    let mut ordered: Vec<&Prepared> = scenes.iter().collect();
    ordered.sort_by_key(|p| p.id);
    let mut acc = 0.0f64;
    for chunk in ordered.chunks(batch.max(1)) {
        acc += model.loss(chunk)? as f64 * chunk.len() as f64;
    }
    Ok(acc / ordered.len() as f64)
}

pub fn trace_csv(trace: &[f64]) -> String {
    let mut out = String::from("epoch,mean_l1\n");
    for (i, v) in trace.iter().enumerate() {
        let _ = writeln!(out, "{},{v}", i + 1);
    }
    out
}
