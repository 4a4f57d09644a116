//! Synthetic multi-sensor scenes and reduced-resolution (Wald) degradation.
//!
//! A scene is a smooth multi-band reflectance field built from a land-cover
//! spectral signature, a linear illumination gradient, Gaussian blobs,
//! sharp-edged rectangular parcels and fine texture. A [`SensorProfile`]
//! turns that ground truth into the LRMS/PAN pair a given sensor would
//! record; two profiles with different spectral response, PSF, radiometry
//! and noise define a source and a target domain.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kv::{join, KeyValues};
use crate::seed::{derive_seed, rng, stream};
use crate::tensor::kernels::{decimate, gaussian_blur};
use crate::tensor::{read_swtn, write_swtn, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SensorProfile {
    pub name: String,
    pub bands: usize,
    pub ratio: usize,
    /// PAN response as a convex combination of the bands.
    pub spectral_weights: Vec<f64>,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl SensorProfile {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("profile `{}`: {m}", self.name)));
        if self.bands == 0 {
            return bad("bands must be positive".into());
        }
        for (what, v) in [
            ("spectral_weights", &self.spectral_weights),
            ("gain", &self.gain),
            ("bias", &self.bias),
        ] {
            if v.len() != self.bands {
                return bad(format!("{what} has {} entries for {} bands", v.len(), self.bands));
            }
        }
        if self.spectral_weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return bad("spectral_weights must be nonnegative".into());
        }
        let total: f64 = self.spectral_weights.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return bad(format!("spectral_weights sum to {total}, expected 1"));
        }
        if self.ratio < 2 {
            return bad(format!("ratio {} < 2", self.ratio));
        }
        if !(self.blur_sigma > 0.0) {
            return bad("blur_sigma must be positive".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be nonnegative".into());
        }
        Ok(())
    }

    /// A clean sensor with a broad, slightly red-weighted PAN response.
    pub fn source(bands: usize) -> Self {
        let raw: Vec<f64> = (0..bands).map(|b| 1.0 + 0.3 * b as f64 / bands as f64).collect();
        let total: f64 = raw.iter().sum();
        SensorProfile {
            name: "source-sim".into(),
            bands,
            ratio: 4,
            spectral_weights: raw.iter().map(|w| w / total).collect(),
            blur_sigma: 1.0,
            noise_sigma: 0.004,
            gain: vec![1.0; bands],
            bias: vec![0.0; bands],
        }
    }

    /// A sensor with a blue-peaked PAN response, wider PSF, band-dependent
    /// radiometric distortion and stronger noise.
    pub fn target(bands: usize) -> Self {
        let raw: Vec<f64> = (0..bands)
            .map(|b| {
                let t = b as f64 / (bands.max(2) - 1) as f64;
                (-(t - 0.2) * (t - 0.2) / 0.18).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        SensorProfile {
            name: "target-sim".into(),
            bands,
            ratio: 4,
            spectral_weights: raw.iter().map(|w| w / total).collect(),
            blur_sigma: 1.7,
            noise_sigma: 0.008,
            gain: (0..bands).map(|b| if b % 2 == 0 { 0.85 } else { 1.12 }).collect(),
            bias: (0..bands).map(|b| if b % 2 == 0 { -0.01 } else { 0.02 }).collect(),
        }
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let req = |k: &str| Error::Config(format!("profile: missing `{k}`"));
        let bands: usize = kv.get("bands")?.ok_or_else(|| req("bands"))?;
        let p = SensorProfile {
            name: kv.raw("name").unwrap_or("sensor").to_string(),
            bands,
            ratio: kv.get_or("ratio", 4)?,
            spectral_weights: kv
                .get_list("spectral_weights")?
                .ok_or_else(|| req("spectral_weights"))?,
            blur_sigma: kv.get("blur_sigma")?.ok_or_else(|| req("blur_sigma"))?,
            noise_sigma: kv.get_or("noise_sigma", 0.0)?,
            gain: kv.get_list("gain")?.unwrap_or_else(|| vec![1.0; bands]),
            bias: kv.get_list("bias")?.unwrap_or_else(|| vec![0.0; bands]),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&KeyValues::load(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "name = {}", self.name);
        let _ = writeln!(s, "bands = {}", self.bands);
        let _ = writeln!(s, "ratio = {}", self.ratio);
        let _ = writeln!(s, "spectral_weights = {}", join(&self.spectral_weights));
        let _ = writeln!(s, "blur_sigma = {}", self.blur_sigma);
        let _ = writeln!(s, "noise_sigma = {}", self.noise_sigma);
        let _ = writeln!(s, "gain = {}", join(&self.gain));
        let _ = writeln!(s, "bias = {}", join(&self.bias));
        s
    }
}

/// One GT / LRMS / PAN triple.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair {
    pub id: usize,
    pub sensor: String,
    /// `[bands, H, W]`
    pub gt: Tensor,
    /// `[bands, H / ratio, W / ratio]`
    pub lrms: Tensor,
    /// `[1, H, W]`
    pub pan: Tensor,
}

impl ScenePair {
    pub fn bands(&self) -> usize {
        self.gt.dims()[0]
    }

    pub fn ratio(&self) -> usize {
        self.pan.dims()[1] / self.lrms.dims()[1]
    }
}

#[derive(Clone, Copy)]
enum Cover {
    Vegetation,
    Urban,
    Water,
}

fn cover_signature(cover: Cover, bands: usize, r: &mut impl Rng) -> Vec<f64> {
    (0..bands)
        .map(|b| {
            let t = b as f64 / (bands.max(2) - 1) as f64;
            let base = match cover {
                Cover::Vegetation => 0.12 + 0.45 * t.powi(3),
                Cover::Urban => 0.38 + 0.08 * t,
                Cover::Water => 0.16 - 0.1 * t,
            };
            base + r.random_range(-0.04..0.04)
        })
        .collect()
}

/// Add `amp[b] * exp(-d^2 / 2 sigma^2)` around `(cy, cx)` to every band.
fn add_blob(img: &mut [f64], size: usize, cy: f64, cx: f64, sigma: f64, amp: &[f64]) {
    let plane = size * size;
    let reach = (3.5 * sigma).ceil() as i64;
    let (y0, y1) = ((cy as i64 - reach).max(0), (cy as i64 + reach + 1).min(size as i64));
    let (x0, x1) = ((cx as i64 - reach).max(0), (cx as i64 + reach + 1).min(size as i64));
    for y in y0..y1 {
        for x in x0..x1 {
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            let k = (-d2 / (2.0 * sigma * sigma)).exp();
            let idx = y as usize * size + x as usize;
            for (b, a) in amp.iter().enumerate() {
                img[b * plane + idx] += a * k;
            }
        }
    }
}

/// Synthetic ground-truth scene `[bands, size, size]` in `[0, 1]`.
pub fn generate_scene(seed: u64, size: usize, bands: usize, ratio: usize) -> Result<Tensor> {
    if size == 0 || ratio == 0 || size % ratio != 0 {
        return Err(Error::Config(format!(
            "scene size {size} is not a positive multiple of ratio {ratio}"
        )));
    }
    if bands == 0 {
        return Err(Error::Config("bands must be positive".into()));
    }
    let mut r = rng(seed);
    let cover = match r.random_range(0.0..1.0) {
        u if u < 0.6 => Cover::Vegetation,
        u if u < 0.9 => Cover::Urban,
        _ => Cover::Water,
    };
    let sig = cover_signature(cover, bands, &mut r);
    let sig_mean = sig.iter().sum::<f64>() / bands as f64;
    let plane = size * size;
    let s = size as f64;
    let mut img = vec![0.0f64; bands * plane];

    let theta: f64 = r.random_range(0.0..std::f64::consts::TAU);
    let slope: f64 = r.random_range(0.03..0.15);
    for b in 0..bands {
        let scale = slope * (0.6 + 0.8 * sig[b] / sig_mean.max(1e-3)) * r.random_range(0.8..1.2);
        for y in 0..size {
            for x in 0..size {
                let (u, v) = (x as f64 / s - 0.5, y as f64 / s - 0.5);
                img[b * plane + y * size + x] = sig[b] + scale * (u * theta.cos() + v * theta.sin());
            }
        }
    }

    let blobs = match cover {
        Cover::Vegetation => r.random_range(4..9),
        Cover::Urban => r.random_range(1..4),
        Cover::Water => r.random_range(1..3),
    };
    for _ in 0..blobs {
        let (cy, cx) = (r.random_range(0.0..s), r.random_range(0.0..s));
        let sigma = r.random_range(1.5..(s / 5.0).max(1.6));
        let a: f64 = r.random_range(-0.15..0.2);
        let amp: Vec<f64> = sig
            .iter()
            .map(|v| a * (v / sig_mean.max(1e-3)) * r.random_range(0.7..1.3))
            .collect();
        add_blob(&mut img, size, cy, cx, sigma, &amp);
    }

    let parcels = match cover {
        Cover::Vegetation => r.random_range(0..3),
        Cover::Urban => r.random_range(4..10),
        Cover::Water => 0,
    };
    for _ in 0..parcels {
        let (h, w) = (r.random_range(2..=size / 2), r.random_range(2..=size / 2));
        let (y0, x0) = (r.random_range(0..=size - h), r.random_range(0..=size - w));
        let level: f64 = r.random_range(0.25..0.8);
        let roof: Vec<f64> = (0..bands).map(|_| level + r.random_range(-0.08..0.08)).collect();
        for (b, v) in roof.iter().enumerate() {
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    let p = &mut img[b * plane + y * size + x];
                    *p = 0.2 * *p + 0.8 * v;
                }
            }
        }
    }

    let specks = r.random_range(6..16);
    for _ in 0..specks {
        let (cy, cx) = (r.random_range(0.0..s), r.random_range(0.0..s));
        let sigma = r.random_range(0.6..1.2);
        let a: f64 = r.random_range(-0.06..0.06);
        let amp: Vec<f64> = sig.iter().map(|v| a * v / sig_mean.max(1e-3)).collect();
        add_blob(&mut img, size, cy, cx, sigma, &amp);
    }

    Tensor::new(
        vec![bands, size, size],
        img.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(),
    )
}

/// Simulate what `profile` records for ground truth `gt`.
pub fn wald_degrade(gt: &Tensor, profile: &SensorProfile, seed: u64) -> Result<ScenePair> {
    profile.validate()?;
    let d = gt.dims();
    if d.len() != 3 || d[0] != profile.bands {
        return Err(Error::dim("wald_degrade", format!("[{}, H, W]", profile.bands), d));
    }
    let (bands, h, w) = (d[0], d[1], d[2]);
    let plane = h * w;
    let mut distorted = gt.clone();
    for (b, chunk) in distorted.data_mut().chunks_mut(plane).enumerate() {
        let (g, o) = (profile.gain[b] as f32, profile.bias[b] as f32);
        chunk.iter_mut().for_each(|v| *v = g * *v + o);
    }
    let mut lrms = decimate(&gaussian_blur(&distorted, profile.blur_sigma)?, profile.ratio)?;

    let mut pan_data = vec![0.0f64; plane];
    for b in 0..bands {
        let wb = profile.spectral_weights[b];
        for (p, &v) in pan_data.iter_mut().zip(gt.channel(b)) {
            *p += wb * v as f64;
        }
    }
    let mut pan = Tensor::new(vec![1, h, w], pan_data.into_iter().map(|v| v as f32).collect())?;

    if profile.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, profile.noise_sigma).expect("validated sigma");
        let mut r = rng(seed);
        for v in lrms.data_mut().iter_mut().chain(pan.data_mut().iter_mut()) {
            *v += noise.sample(&mut r) as f32;
        }
    }
    lrms.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    pan.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));

    Ok(ScenePair {
        id: 0,
        sensor: profile.name.clone(),
        gt: gt.clone(),
        lrms,
        pan,
    })
}

/// Scene `id` of the dataset keyed by `seed`.
pub fn generate_pair(profile: &SensorProfile, id: usize, size: usize, seed: u64) -> Result<ScenePair> {
    let gt = generate_scene(
        derive_seed(seed, &[stream::SCENE, id as u64]),
        size,
        profile.bands,
        profile.ratio,
    )?;
    let mut pair = wald_degrade(&gt, profile, derive_seed(seed, &[stream::DEGRADE, id as u64]))?;
    pair.id = id;
    Ok(pair)
}

/// In-memory dataset of `n` scenes with ids `0..n`.
pub fn generate_dataset(profile: &SensorProfile, n: usize, size: usize, seed: u64) -> Result<Vec<ScenePair>> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    profile.validate()?;
    (0..n).map(|id| generate_pair(profile, id, size, seed)).collect()
}

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: usize,
    pub gt: PathBuf,
    pub lrms: PathBuf,
    pub pan: PathBuf,
    pub sensor: String,
}

/// Generate and persist a dataset under `out_dir`; returns the scenes and
/// the manifest path.
pub fn make_dataset(
    profile: &SensorProfile,
    n: usize,
    size: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<(Vec<ScenePair>, PathBuf)> {
    let scenes = generate_dataset(profile, n, size, seed)?;
    let manifest = write_dataset(&scenes, out_dir)?;
    let profile_path = out_dir.join("profile.txt");
    fs::write(&profile_path, profile.to_text()).map_err(|e| Error::io(&profile_path, e))?;
    Ok((scenes, manifest))
}

/// Write SWTN files and a manifest for `scenes`. Manifest paths are
/// relative to the manifest's directory.
pub fn write_dataset(scenes: &[ScenePair], out_dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = String::new();
    for s in scenes {
        let names = ["gt", "lrms", "pan"].map(|k| format!("scene_{:05}_{k}.swtn", s.id));
        for (name, t) in names.iter().zip([&s.gt, &s.lrms, &s.pan]) {
            write_swtn(&out_dir.join(name), t)?;
        }
        let _ = writeln!(
            manifest,
            "{}\t{}\t{}\t{}\t{}",
            s.id, names[0], names[1], names[2], s.sensor
        );
    }
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(Error::format(path, format!("line {}: expected 5 tab-separated columns", i + 1)));
            }
            let id = cols[0]
                .parse()
                .map_err(|_| Error::format(path, format!("line {}: bad id `{}`", i + 1, cols[0])))?;
            Ok(ManifestEntry {
                id,
                gt: base.join(cols[1]),
                lrms: base.join(cols[2]),
                pan: base.join(cols[3]),
                sensor: cols[4].to_string(),
            })
        })
        .collect()
}

pub fn load_scene(entry: &ManifestEntry) -> Result<ScenePair> {
    Ok(ScenePair {
        id: entry.id,
        sensor: entry.sensor.clone(),
        gt: read_swtn(&entry.gt)?,
        lrms: read_swtn(&entry.lrms)?,
        pan: read_swtn(&entry.pan)?,
    })
}

pub fn load_dataset(manifest: &Path) -> Result<Vec<ScenePair>> {
    read_manifest(manifest)?.iter().map(load_scene).collect()
}
