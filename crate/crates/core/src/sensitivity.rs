//! Gradient-behaviour statistics per parameter tensor, the composite
//! sensitivity score, distribution sharpness, the dynamic selection ratio and
//! the resulting selection mask.
//!
//! All statistics are population moments accumulated in `f64`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model::{Model, ParamRegistry, Prepared};
use crate::seed::{derive_seed, rng, stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SensitivityConfig {
    pub alpha_mag: f64,
    pub beta_std: f64,
    pub gamma_gdc: f64,
    pub eta_min: f64,
    pub eta_max: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub microbatches: usize,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        SensitivityConfig {
            alpha_mag: 1.0 / 3.0,
            beta_std: 1.0 / 3.0,
            gamma_gdc: 1.0 / 3.0,
            eta_min: 0.10,
            eta_max: 0.60,
            h_min: 0.0,
            h_max: 1.5,
            microbatches: 8,
        }
    }
}

impl SensitivityConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha_mag, self.beta_std, self.gamma_gdc];
        if w.iter().any(|&v| !(v >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "score weights must be non-negative and sum to 1, got {} + {} + {}",
                w[0], w[1], w[2]
            )));
        }
        if !(self.eta_min > 0.0 && self.eta_min <= self.eta_max && self.eta_max <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 < eta_min <= eta_max <= 1, got {} and {}",
                self.eta_min, self.eta_max
            )));
        }
        if !(self.h_min < self.h_max) {
            return Err(Error::Config(format!(
                "need h_min < h_max, got {} and {}",
                self.h_min, self.h_max
            )));
        }
        if self.microbatches == 0 {
            return Err(Error::Config("microbatches must be >= 1".into()));
        }
        Ok(())
    }
}

/// Contiguous partition of the subset, in subset order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MicrobatchPlan {
    pub groups: Vec<Vec<usize>>,
}

impl MicrobatchPlan {
    /// Split `ids` into `m` contiguous groups whose sizes differ by at most one.
    pub fn new(ids: &[usize], m: usize) -> Result<Self> {
        if m == 0 || m > ids.len() {
            return Err(Error::Config(format!(
                "cannot split {} scenes into {m} non-empty microbatches",
                ids.len()
            )));
        }
        let (base, extra) = (ids.len() / m, ids.len() % m);
        let mut groups = Vec::with_capacity(m);
        let mut start = 0;
        for g in 0..m {
            let len = base + usize::from(g < extra);
            groups.push(ids[start..start + len].to_vec());
            start += len;
        }
        Ok(MicrobatchPlan { groups })
    }

    pub fn m(&self) -> usize {
        self.groups.len()
    }
}

/// Per-microbatch gradients of one parameter tensor.
#[derive(Clone, Debug)]
pub struct TensorGradients {
    pub name: String,
    pub per_batch: Vec<Tensor>,
}

/// Gradients of the mean L1 loss for every microbatch, in registry order.
/// The model is only read.
pub fn collect_gradients(
    model: &Model,
    scenes: &[Prepared],
    plan: &MicrobatchPlan,
) -> Result<Vec<TensorGradients>> {
    let by_id: HashMap<usize, &Prepared> = scenes.iter().map(|p| (p.id, p)).collect();
    let mut out: Vec<TensorGradients> = model
        .params()
        .names()
        .map(|n| TensorGradients {
            name: n.to_string(),
            per_batch: Vec::with_capacity(plan.m()),
        })
        .collect();
    for (i, group) in plan.groups.iter().enumerate() {
        let batch: Vec<&Prepared> = group
            .iter()
            .map(|id| {
                by_id
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::Data(format!("microbatch {i}: scene {id} not loaded")))
            })
            .collect::<Result<_>>()?;
        let (_, grads) = model.loss_and_grads(&batch, None).map_err(|e| {
            Error::Data(format!("microbatch {i} (scenes {group:?}) failed at scene {}: {e}", group[0]))
        })?;
        for t in out.iter_mut() {
            t.per_batch.push(grads.get(&t.name).expect("gradient per leaf").clone());
        }
    }
    Ok(out)
}

fn mean_f64(g: &[f32]) -> f64 {
    if g.is_empty() {
        return 0.0;
    }
    g.iter().map(|&v| v as f64).sum::<f64>() / g.len() as f64
}

/// `(1/M) Σ_i |mean(g_i)|`
pub fn compute_mag<G: AsRef<[f32]>>(grads: &[G]) -> f64 {
    if grads.is_empty() {
        return 0.0;
    }
    grads.iter().map(|g| mean_f64(g.as_ref()).abs()).sum::<f64>() / grads.len() as f64
}

/// Mean over microbatches of `max(N+, N-) / (N+ + N-)`; zeros are not
/// counted and a batch with no signed elements contributes 0.5.
pub fn compute_gdc<G: AsRef<[f32]>>(grads: &[G]) -> f64 {
    if grads.is_empty() {
        return 0.5;
    }
    grads
        .iter()
        .map(|g| {
            let (mut pos, mut neg) = (0usize, 0usize);
            for &v in g.as_ref() {
                if v > 0.0 {
                    pos += 1;
                } else if v < 0.0 {
                    neg += 1;
                }
            }
            if pos + neg == 0 {
                0.5
            } else {
                pos.max(neg) as f64 / (pos + neg) as f64
            }
        })
        .sum::<f64>()
        / grads.len() as f64
}

/// `sqrt((1/M) Σ_i Var(g_i))` with population variance.
pub fn compute_std<G: AsRef<[f32]>>(grads: &[G]) -> f64 {
    if grads.is_empty() {
        return 0.0;
    }
    let mean_var = grads
        .iter()
        .map(|g| {
            let g = g.as_ref();
            let m = mean_f64(g);
            if g.is_empty() {
                0.0
            } else {
                g.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / g.len() as f64
            }
        })
        .sum::<f64>()
        / grads.len() as f64;
    mean_var.sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensorStats {
    pub name: String,
    pub scalar_count: usize,
    pub mag: f64,
    pub gdc: f64,
    pub std: f64,
    pub mag_n: f64,
    pub gdc_n: f64,
    pub std_n: f64,
    pub score: f64,
}

impl ParamTensorStats {
    pub fn from_grads<G: AsRef<[f32]>>(name: &str, scalar_count: usize, grads: &[G]) -> Self {
        ParamTensorStats {
            name: name.to_string(),
            scalar_count,
            mag: compute_mag(grads),
            gdc: compute_gdc(grads),
            std: compute_std(grads),
            mag_n: 0.0,
            gdc_n: 0.0,
            std_n: 0.0,
            score: 0.0,
        }
    }
}

/// Min-max normalization; an all-equal list maps to 0.5 everywhere.
pub fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Fill the normalized fields and `S = α·MAG_n + β·(1 − STD_n) + γ·GDC_n`.
pub fn composite_score(stats: &mut [ParamTensorStats], cfg: &SensitivityConfig) -> Result<()> {
    cfg.validate()?;
    if stats.len() < 2 {
        return Err(Error::Data(format!(
            "score normalization needs at least 2 tensors, got {}",
            stats.len()
        )));
    }
    let col = |f: fn(&ParamTensorStats) -> f64| min_max(&stats.iter().map(f).collect::<Vec<_>>());
    let mag_n = col(|s| s.mag);
    let gdc_n = col(|s| s.gdc);
    let std_n = col(|s| s.std);
    for (i, s) in stats.iter_mut().enumerate() {
        s.mag_n = mag_n[i];
        s.gdc_n = gdc_n[i];
        s.std_n = std_n[i];
        s.score = cfg.alpha_mag * s.mag_n + cfg.beta_std * (1.0 - s.std_n) + cfg.gamma_gdc * s.gdc_n;
    }
    Ok(())
}

/// `H = std(v) + (max(v) − median(v))`, population std.
pub fn sharpness(mag_n: &[f64]) -> f64 {
    if mag_n.is_empty() {
        return 0.0;
    }
    let n = mag_n.len() as f64;
    if mag_n.iter().all(|&v| v == mag_n[0]) {
        return 0.0;
    }
    let mean = mag_n.iter().sum::<f64>() / n;
    let std = (mag_n.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let mut sorted = mag_n.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = sorted.len();
    let median = if k % 2 == 1 {
        sorted[k / 2]
    } else {
        0.5 * (sorted[k / 2 - 1] + sorted[k / 2])
    };
    std + (sorted[k - 1] - median)
}

/// `η_min + (η_max − η_min) · clip((H − H_min) / (H_max − H_min), 0, 1)`
pub fn dynamic_ratio(h: f64, cfg: &SensitivityConfig) -> f64 {
    let t = ((h - cfg.h_min) / (cfg.h_max - cfg.h_min)).clamp(0.0, 1.0);
    cfg.eta_min + (cfg.eta_max - cfg.eta_min) * t
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionMask {
    /// Selection order.
    pub selected: Vec<String>,
    pub p_select: f64,
    pub sharpness: f64,
    pub scalar_fraction: f64,
}

impl SelectionMask {
    pub fn contains(&self, name: &str) -> bool {
        self.selected.iter().any(|s| s == name)
    }
}

/// Take `(name, scalar_count)` items in the given order until the selected
/// scalar share reaches `p_select`. At least one item is taken.
fn greedy_fill<'a>(
    order: impl Iterator<Item = (&'a str, usize)>,
    total: usize,
    p_select: f64,
) -> (Vec<String>, f64) {
    let mut selected = Vec::new();
    let mut count = 0usize;
    for (name, n) in order {
        selected.push(name.to_string());
        count += n;
        if count as f64 / total as f64 >= p_select {
            break;
        }
    }
    (selected, count as f64 / total as f64)
}

/// Greedy selection in descending score; ties keep registry order.
pub fn select(stats: &[ParamTensorStats], p_select: f64, sharpness: f64) -> Result<SelectionMask> {
    if !(p_select > 0.0 && p_select <= 1.0) {
        return Err(Error::Config(format!("p_select must be in (0, 1], got {p_select}")));
    }
    if stats.is_empty() {
        return Err(Error::Data("no parameter tensors to select from".into()));
    }
    let mut order: Vec<usize> = (0..stats.len()).collect();
    order.sort_by(|&a, &b| stats[b].score.total_cmp(&stats[a].score));
    let total = stats.iter().map(|s| s.scalar_count).sum();
    let (selected, scalar_fraction) = greedy_fill(
        order.iter().map(|&i| (stats[i].name.as_str(), stats[i].scalar_count)),
        total,
        p_select,
    );
    Ok(SelectionMask {
        selected,
        p_select,
        sharpness,
        scalar_fraction,
    })
}

/// Baseline mask with the same scalar budget as a reference mask: tensors are
/// visited in seeded random order and kept while the running scalar share
/// stays within `fraction`. If nothing fits, the first visited tensor is
/// kept. Its sharpness field is 0.
pub fn random_mask(registry: &ParamRegistry, fraction: f64, seed: u64) -> Result<SelectionMask> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("mask fraction must be in (0, 1], got {fraction}")));
    }
    let mut items: Vec<(&str, usize)> = registry
        .entries()
        .iter()
        .filter(|e| e.trainable)
        .map(|e| (e.name.as_str(), e.scalar_count()))
        .collect();
    items.shuffle(&mut rng(derive_seed(seed, &[stream::MASK])));
    let total: usize = items.iter().map(|i| i.1).sum();
    let budget = (fraction * total as f64 + 1e-9).floor() as usize;
    let mut selected = Vec::new();
    let mut count = 0usize;
    for &(name, n) in &items {
        if count + n <= budget {
            selected.push(name.to_string());
            count += n;
        }
    }
    if selected.is_empty() {
        selected.push(items[0].0.to_string());
        count = items[0].1;
    }
    Ok(SelectionMask {
        selected,
        p_select: fraction,
        sharpness: 0.0,
        scalar_fraction: count as f64 / total as f64,
    })
}

/// Mask from an explicit fraction, reusing the scores of a prior analysis.
pub fn fixed_ratio_mask(analysis: &Analysis, p_select: f64) -> Result<SelectionMask> {
    select(&analysis.stats, p_select, analysis.mask.sharpness)
}

#[derive(Clone, Debug)]
pub struct Analysis {
    pub stats: Vec<ParamTensorStats>,
    pub mask: SelectionMask,
}

/// Probe `model` on `subset` (in subset order) and build the dynamic mask.
pub fn analyze(model: &Model, subset: &[Prepared], cfg: &SensitivityConfig) -> Result<Analysis> {
    cfg.validate()?;
    let ids: Vec<usize> = subset.iter().map(|p| p.id).collect();
    let plan = MicrobatchPlan::new(&ids, cfg.microbatches)?;
    let grads = collect_gradients(model, subset, &plan)?;
    let mut stats: Vec<ParamTensorStats> = grads
        .iter()
        .map(|g| ParamTensorStats::from_grads(&g.name, g.per_batch[0].numel(), &g.per_batch))
        .collect();
    composite_score(&mut stats, cfg)?;
    let mag_n: Vec<f64> = stats.iter().map(|s| s.mag_n).collect();
    let h = sharpness(&mag_n);
    let mask = select(&stats, dynamic_ratio(h, cfg), h)?;
    Ok(Analysis { stats, mask })
}

pub fn write_mask(path: &Path, mask: &SelectionMask) -> Result<()> {
    let mut text = format!(
        "p_select={} H={} scalar_fraction={}\n",
        mask.p_select, mask.sharpness, mask.scalar_fraction
    );
    for name in &mask.selected {
        text.push_str(name);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_mask(path: &Path) -> Result<SelectionMask> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::format(path, "empty mask file"))?;
    let mut fields: HashMap<&str, f64> = HashMap::new();
    for part in header.split_whitespace() {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("bad header field `{part}`")))?;
        let v = v
            .parse()
            .map_err(|_| Error::format(path, format!("bad number in `{part}`")))?;
        fields.insert(k, v);
    }
    let field = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| Error::format(path, format!("header lacks `{k}`")))
    };
    Ok(SelectionMask {
        p_select: field("p_select")?,
        sharpness: field("H")?,
        scalar_fraction: field("scalar_fraction")?,
        selected: lines
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
    })
}

pub fn stats_csv(stats: &[ParamTensorStats], mask: &SelectionMask) -> String {
    let mut out = String::from("name,scalar_count,mag,gdc,std,mag_n,gdc_n,std_n,score,selected\n");
    for s in stats {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            s.name,
            s.scalar_count,
            s.mag,
            s.gdc,
            s.std,
            s.mag_n,
            s.gdc_n,
            s.std_n,
            s.score,
            u8::from(mask.contains(&s.name))
        );
    }
    out
}
