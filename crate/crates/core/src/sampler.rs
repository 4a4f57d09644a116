//! Density-aware farthest point sampling of a scene collection, with a
//! uniform random baseline and a Gaussian MMD² fidelity score.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};

use crate::datagen::ScenePair;
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng, stream};
use crate::tensor::Tensor;

/// Pooled grid for LRMS bands and for PAN.
pub const LRMS_GRID: usize = 4;
pub const PAN_GRID: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct SampleFeature {
    pub id: usize,
    pub vec: Vec<f64>,
}

pub fn feature_dim(bands: usize) -> usize {
    LRMS_GRID * LRMS_GRID * bands + PAN_GRID * PAN_GRID
}

/// Area-average each channel onto a `grid x grid` lattice. Bin edges are
/// `floor(k * size / grid)`, so sizes need not divide evenly.
fn pool_grid(t: &Tensor, grid: usize, out: &mut Vec<f64>) -> Result<()> {
    let d = t.dims();
    if d.len() != 3 || d[1] < grid || d[2] < grid {
        return Err(Error::dim(
            "featurize",
            format!("[C, H, W] with H, W >= {grid}"),
            d,
        ));
    }
    let (h, w) = (d[1], d[2]);
    for c in 0..d[0] {
        let plane = t.channel(c);
        for gy in 0..grid {
            let (y0, y1) = (gy * h / grid, (gy + 1) * h / grid);
            for gx in 0..grid {
                let (x0, x1) = (gx * w / grid, (gx + 1) * w / grid);
                let mut acc = 0.0f64;
                for y in y0..y1 {
                    for &v in &plane[y * w + x0..y * w + x1] {
                        acc += v as f64;
                    }
                }
                out.push(acc / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    Ok(())
}

/// Pooled LRMS and PAN statistics of one scene, before normalization.
pub fn raw_feature(scene: &ScenePair) -> Result<SampleFeature> {
    let mut vec = Vec::with_capacity(feature_dim(scene.bands()));
    pool_grid(&scene.lrms, LRMS_GRID, &mut vec)?;
    pool_grid(&scene.pan, PAN_GRID, &mut vec)?;
    Ok(SampleFeature { id: scene.id, vec })
}

/// Z-score every dimension over the set. Constant dimensions are centered only.
pub fn normalize(features: &mut [SampleFeature]) {
    let Some(first) = features.first() else {
        return;
    };
    let n = features.len() as f64;
    for k in 0..first.vec.len() {
        let mean = features.iter().map(|f| f.vec[k]).sum::<f64>() / n;
        let var = features.iter().map(|f| (f.vec[k] - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        for f in features.iter_mut() {
            f.vec[k] -= mean;
            if sd > 0.0 {
                f.vec[k] /= sd;
            }
        }
    }
}

pub fn featurize(scenes: &[ScenePair]) -> Result<Vec<SampleFeature>> {
    let mut out: Vec<SampleFeature> = scenes.iter().map(raw_feature).collect::<Result<_>>()?;
    if let Some(first) = out.first() {
        let d = first.vec.len();
        if let Some(bad) = out.iter().find(|f| f.vec.len() != d) {
            return Err(Error::Data(format!(
                "scene {} has {} feature dims, expected {d}",
                bad.id,
                bad.vec.len()
            )));
        }
    }
    normalize(&mut out);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sigma {
    /// Median pairwise distance.
    Auto,
    Fixed(f64),
}

impl FromStr for Sigma {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Sigma::Auto);
        }
        match s.parse::<f64>() {
            Ok(v) if v > 0.0 && v.is_finite() => Ok(Sigma::Fixed(v)),
            _ => Err(Error::Config(format!("sigma must be `auto` or a positive number, got `{s}`"))),
        }
    }
}

impl fmt::Display for Sigma {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sigma::Auto => f.write_str("auto"),
            Sigma::Fixed(v) => write!(f, "{v}"),
        }
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Row-major `N x N` distance matrix.
pub fn pairwise_distances(features: &[SampleFeature]) -> Vec<f64> {
    let n = features.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = euclidean(&features[i].vec, &features[j].vec);
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Features sorted by id, with KDE densities and the bandwidth used.
#[derive(Clone, Debug)]
pub struct DensityLabeledSet {
    pub features: Vec<SampleFeature>,
    pub rho: Vec<f64>,
    pub sigma: f64,
    distances: Vec<f64>,
}

impl DensityLabeledSet {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.features.iter().map(|f| f.id).collect()
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.distances[i * self.len() + j]
    }

    /// MMD² between the scenes in `ids` and the whole set, at the density bandwidth.
    pub fn mmd_of(&self, ids: &[usize]) -> Result<f64> {
        let pos: Vec<usize> = ids
            .iter()
            .map(|id| {
                self.features
                    .binary_search_by_key(id, |f| f.id)
                    .map_err(|_| Error::Data(format!("subset id {id} not in feature set")))
            })
            .collect::<Result<_>>()?;
        let all: Vec<usize> = (0..self.len()).collect();
        Ok(mmd_from_distances(&pos, &all, |i, j| self.distance(i, j), self.sigma))
    }
}

/// `ρ_i = Σ_{j≠i} exp(-(d_ij / σ)²)`, with features reordered by id.
pub fn compute_density(mut features: Vec<SampleFeature>, sigma: Sigma) -> Result<DensityLabeledSet> {
    if features.len() < 2 {
        return Err(Error::Data(format!(
            "density estimation needs at least 2 samples, got {}",
            features.len()
        )));
    }
    features.sort_by_key(|f| f.id);
    if let Some(w) = features.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(Error::Data(format!("duplicate scene id {}", w[0].id)));
    }
    let n = features.len();
    let distances = pairwise_distances(&features);
    let sigma = match sigma {
        Sigma::Fixed(s) if s > 0.0 => s,
        Sigma::Fixed(s) => return Err(Error::Config(format!("sigma must be positive, got {s}"))),
        Sigma::Auto => {
            let mut upper = Vec::with_capacity(n * (n - 1) / 2);
            for i in 0..n {
                upper.extend_from_slice(&distances[i * n + i + 1..(i + 1) * n]);
            }
            let m = median(upper);
            if m > 0.0 {
                m
            } else {
                log::warn!("median pairwise distance is 0; using sigma = 1");
                1.0
            }
        }
    };
    let rho = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| (-(distances[i * n + j] / sigma).powi(2)).exp())
                .sum()
        })
        .collect();
    Ok(DensityLabeledSet {
        features,
        rho,
        sigma,
        distances,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMethod {
    DaFps,
    Random,
}

impl FromStr for SampleMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dafps" => Ok(SampleMethod::DaFps),
            "random" => Ok(SampleMethod::Random),
            other => Err(Error::Config(format!("unknown sampling method `{other}`"))),
        }
    }
}

impl fmt::Display for SampleMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SampleMethod::DaFps => "dafps",
            SampleMethod::Random => "random",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EssenceSubset {
    /// Selection order.
    pub ids: Vec<usize>,
    pub ratio: f64,
    /// `None` for random subsets.
    pub alpha_density: Option<f64>,
}

/// `floor(r * n)`, tolerant of representation error in `r`.
pub fn subset_size(n: usize, r: f64) -> Result<usize> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::Config(format!("sampling ratio must be in (0, 1], got {r}")));
    }
    let k = ((r * n as f64) + 1e-9).floor() as usize;
    if k == 0 {
        return Err(Error::Config(format!(
            "ratio too small for dataset: floor({r} * {n}) = 0"
        )));
    }
    Ok(k.min(n))
}

/// Weighted farthest point sampling. Ties resolve to the lowest id.
pub fn da_fps(labeled: &DensityLabeledSet, r: f64, alpha_density: f64) -> Result<EssenceSubset> {
    if !(0.0..=1.0).contains(&alpha_density) {
        return Err(Error::Config(format!(
            "alpha_density must be in [0, 1], got {alpha_density}"
        )));
    }
    let n = labeled.len();
    let k = subset_size(n, r)?;
    let rho = &labeled.rho;
    let max_rho = rho.iter().copied().fold(0.0, f64::max);
    let damp: Vec<f64> = rho
        .iter()
        .map(|&p| {
            let rel = if max_rho > 0.0 { p / max_rho } else { 0.0 };
            1.0 - alpha_density * rel
        })
        .collect();

    let mut seed = 0;
    for i in 1..n {
        if rho[i] < rho[seed] {
            seed = i;
        }
    }
    let mut taken = vec![false; n];
    let mut d_min = vec![f64::INFINITY; n];
    let mut order = Vec::with_capacity(k);
    let mut next = seed;
    loop {
        taken[next] = true;
        order.push(labeled.features[next].id);
        if order.len() == k {
            break;
        }
        for i in 0..n {
            d_min[i] = d_min[i].min(labeled.distance(i, next));
        }
        let mut best: Option<(usize, f64)> = None;
        for i in (0..n).filter(|&i| !taken[i]) {
            let w = d_min[i] * damp[i];
            if best.is_none_or(|(_, bw)| w > bw) {
                best = Some((i, w));
            }
        }
        next = best.expect("unselected samples remain").0;
    }
    Ok(EssenceSubset {
        ids: order,
        ratio: r,
        alpha_density: Some(alpha_density),
    })
}

/// Uniform sample without replacement; the result lists ids in draw order.
pub fn random_sample(ids: &[usize], r: f64, seed: u64) -> Result<EssenceSubset> {
    let k = subset_size(ids.len(), r)?;
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    let mut g = rng(derive_seed(seed, &[stream::SAMPLE]));
    let picked = index::sample(&mut g, sorted.len(), k)
        .into_iter()
        .map(|i| sorted[i])
        .collect();
    Ok(EssenceSubset {
        ids: picked,
        ratio: r,
        alpha_density: None,
    })
}

fn mmd_from_distances(
    xs: &[usize],
    ys: &[usize],
    dist: impl Fn(usize, usize) -> f64,
    sigma: f64,
) -> f64 {
    let k = |i: usize, j: usize| (-(dist(i, j) / sigma).powi(2)).exp();
    let mean = |a: &[usize], b: &[usize]| {
        let mut s = 0.0;
        for &i in a {
            for &j in b {
                s += k(i, j);
            }
        }
        s / (a.len() * b.len()) as f64
    };
    mean(xs, xs) + mean(ys, ys) - 2.0 * mean(xs, ys)
}

/// Biased Gaussian-kernel MMD² with `k(x, y) = exp(-(|x - y| / σ)²)`.
pub fn mmd<A: AsRef<[f64]>, B: AsRef<[f64]>>(subset: &[A], full: &[B], sigma: f64) -> Result<f64> {
    if subset.is_empty() || full.is_empty() {
        return Err(Error::Data("mmd needs two nonempty sets".into()));
    }
    let pts: Vec<&[f64]> = subset
        .iter()
        .map(AsRef::as_ref)
        .chain(full.iter().map(AsRef::as_ref))
        .collect();
    let xs: Vec<usize> = (0..subset.len()).collect();
    let ys: Vec<usize> = (subset.len()..pts.len()).collect();
    Ok(mmd_from_distances(&xs, &ys, |i, j| euclidean(pts[i], pts[j]), sigma))
}

/// Cluster centers, unit-variance spread and mass shares of [`clustered_points`].
pub const CLUSTER_CENTERS: [[f64; 2]; 3] = [[0.0, 0.0], [6.0, 0.0], [0.0, 6.0]];
pub const CLUSTER_MASS: [f64; 3] = [0.80, 0.15, 0.05];

/// Planar point set with three isotropic Gaussian clusters holding 80%, 15%
/// and 5% of the `n` points (ids `0..n`, majority cluster first).
pub fn clustered_points(n: usize, seed: u64) -> Vec<SampleFeature> {
    let big = (CLUSTER_MASS[0] * n as f64).round() as usize;
    let mid = ((CLUSTER_MASS[1] * n as f64).round() as usize).min(n - big.min(n));
    let counts = [big.min(n), mid, n - big.min(n) - mid];
    let mut g = rng(derive_seed(seed, &[stream::SAMPLE, 1]));
    let mut out = Vec::with_capacity(n);
    for (c, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            let vec = CLUSTER_CENTERS[c]
                .iter()
                .map(|&m| {
                    let z: f64 = StandardNormal.sample(&mut g);
                    m + z
                })
                .collect();
            out.push(SampleFeature { id: out.len(), vec });
        }
    }
    out
}

pub fn write_subset(path: &Path, subset: &EssenceSubset) -> Result<()> {
    let text: String = subset.ids.iter().map(|id| format!("{id}\n")).collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_subset(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ids: Vec<usize> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.parse()
                .map_err(|_| Error::format(path, format!("line {}: `{l}` is not a scene id", i + 1)))
        })
        .collect::<Result<_>>()?;
    if ids.is_empty() {
        return Err(Error::format(path, "empty subset"));
    }
    Ok(ids)
}
