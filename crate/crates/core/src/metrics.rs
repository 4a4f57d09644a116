//! Pansharpening quality indices.
//!
//! Reduced resolution (with reference): SAM, ERGAS, SCC, Q2n.
//! Full resolution (no reference): D_lambda, D_s and HQNR.
//! Every image argument is a `[bands, H, W]` tensor; arithmetic is `f64`.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::datagen::ScenePair;
use crate::error::{Error, Result};
use crate::model::{Model, Prepared};
use crate::tensor::kernels::{decimate, gaussian_blur};
use crate::tensor::Tensor;

/// Q-index block edge at full resolution.
pub const Q_BLOCK: usize = 32;
/// MTF gain at Nyquist of the Gaussian used to degrade PAN for D_s.
pub const PAN_NYQUIST_GAIN: f64 = 0.3;
/// Exponents of the D_lambda and D_s sums.
pub const P_EXP: u32 = 1;
pub const Q_EXP: u32 = 1;

pub const REDUCED_METRICS: [&str; 4] = ["SAM", "ERGAS", "SCC", "Q2N"];
pub const FULL_METRICS: [&str; 3] = ["D_lambda", "D_s", "HQNR"];

fn same_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rank() != 3 || a.dims() != b.dims() {
        return Err(Error::dim(op, format!("[B, H, W] equal to {:?}", b.dims()), a.dims()));
    }
    Ok(())
}

/// Mean spectral angle in degrees. Pixels where either spectrum is zero are skipped.
pub fn sam(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    same_dims("sam", pred, gt)?;
    let (b, hw) = (gt.dims()[0], gt.dims()[1] * gt.dims()[2]);
    let (p, g) = (pred.data(), gt.data());
    let mut total = 0.0;
    let mut used = 0usize;
    let mut pu = vec![0.0f64; b];
    let mut gu = vec![0.0f64; b];
    for px in 0..hw {
        for k in 0..b {
            pu[k] = p[k * hw + px] as f64;
            gu[k] = g[k * hw + px] as f64;
        }
        let pn = pu.iter().map(|v| v * v).sum::<f64>().sqrt();
        let gn = gu.iter().map(|v| v * v).sum::<f64>().sqrt();
        if pn == 0.0 || gn == 0.0 {
            continue;
        }
        // Angle between unit vectors as 2·atan2(|u − v|, |u + v|): exact near 0.
        let (mut diff, mut sum) = (0.0, 0.0);
        for k in 0..b {
            let (u, v) = (pu[k] / pn, gu[k] / gn);
            diff += (u - v) * (u - v);
            sum += (u + v) * (u + v);
        }
        total += 2.0 * diff.sqrt().atan2(sum.sqrt());
        used += 1;
    }
    if used == 0 {
        return Err(Error::Data("sam: every pixel has a zero spectrum".into()));
    }
    if used < hw {
        log::debug!("sam: skipped {} zero pixels", hw - used);
    }
    Ok((total / used as f64).to_degrees())
}

pub fn ergas(pred: &Tensor, gt: &Tensor, ratio: usize) -> Result<f64> {
    same_dims("ergas", pred, gt)?;
    if ratio == 0 {
        return Err(Error::Config("ergas: ratio must be positive".into()));
    }
    let b = gt.dims()[0];
    let mut acc = 0.0;
    for k in 0..b {
        let (p, g) = (pred.channel(k), gt.channel(k));
        let n = g.len() as f64;
        let mean = g.iter().map(|&v| v as f64).sum::<f64>() / n;
        if mean == 0.0 {
            return Err(Error::Data(format!("ergas: band {k} of the reference has zero mean")));
        }
        let mse = p.iter().zip(g).map(|(&a, &c)| (a as f64 - c as f64).powi(2)).sum::<f64>() / n;
        acc += mse / (mean * mean);
    }
    Ok(100.0 / ratio as f64 * (acc / b as f64).sqrt())
}

/// Valid-region 3x3 Laplacian `[[-1,-1,-1],[-1,8,-1],[-1,-1,-1]]`.
pub fn laplacian(plane: &[f32], h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h.saturating_sub(2) * w.saturating_sub(2));
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let mut s = 0.0f64;
            for dy in 0..3 {
                for dx in 0..3 {
                    s -= plane[(y + dy - 1) * w + x + dx - 1] as f64;
                }
            }
            s += 9.0 * plane[y * w + x] as f64;
            out.push(s);
        }
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    (va > 0.0 && vb > 0.0).then(|| cov / (va.sqrt() * vb.sqrt()))
}

/// Mean per-band correlation of Laplacian-filtered bands.
pub fn scc(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    same_dims("scc", pred, gt)?;
    let (b, h, w) = (gt.dims()[0], gt.dims()[1], gt.dims()[2]);
    if h < 3 || w < 3 {
        return Err(Error::dim("scc", "H, W >= 3".to_string(), gt.dims()));
    }
    let mut vals = Vec::with_capacity(b);
    for k in 0..b {
        let lp = laplacian(pred.channel(k), h, w);
        let lg = laplacian(gt.channel(k), h, w);
        match pearson(&lp, &lg) {
            Some(r) => vals.push(r),
            None => log::debug!("scc: band {k} has a flat high-pass and is skipped"),
        }
    }
    if vals.is_empty() {
        return Err(Error::Data("scc: every band has a flat high-pass".into()));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Hypercomplex arithmetic on `2^n` real components, Cayley-Dickson style.
pub mod hyper {
    pub fn conj(a: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = a.iter().map(|v| -v).collect();
        out[0] = a[0];
        out
    }

    /// `(a, b)(c, d) = (ac − d*b, da + bc*)`
    pub fn mul(x: &[f64], y: &[f64]) -> Vec<f64> {
        let n = x.len();
        debug_assert_eq!(n, y.len());
        debug_assert!(n.is_power_of_two());
        if n == 1 {
            return vec![x[0] * y[0]];
        }
        let h = n / 2;
        let (a, b) = x.split_at(h);
        let (c, d) = y.split_at(h);
        let ac = mul(a, c);
        let db = mul(&conj(d), b);
        let da = mul(d, a);
        let bc = mul(b, &conj(c));
        let mut out = Vec::with_capacity(n);
        out.extend(ac.iter().zip(&db).map(|(p, q)| p - q));
        out.extend(da.iter().zip(&bc).map(|(p, q)| p + q));
        out
    }

    pub fn norm_sq(a: &[f64]) -> f64 {
        a.iter().map(|v| v * v).sum()
    }
}

/// Tiling of an `h x w` plane into `block`-sized tiles; the whole plane is
/// used when it is smaller than one block. Remainders are dropped.
fn tiles(h: usize, w: usize, block: usize) -> impl Iterator<Item = (usize, usize, usize, usize)> {
    let (bh, bw) = (block.min(h).max(1), block.min(w).max(1));
    (0..h / bh).flat_map(move |ty| (0..w / bw).map(move |tx| (ty * bh, tx * bw, bh, bw)))
}

/// Hypercomplex quality index of one block, `None` when degenerate.
fn q2n_block(pred: &Tensor, gt: &Tensor, y0: usize, x0: usize, bh: usize, bw: usize, dim: usize) -> Option<f64> {
    let (b, w) = (gt.dims()[0], gt.dims()[2]);
    let hw = gt.dims()[1] * w;
    let n = (bh * bw) as f64;
    let pixel = |t: &Tensor, y: usize, x: usize| {
        let mut v = vec![0.0f64; dim];
        for k in 0..b {
            v[k] = t.data()[k * hw + y * w + x] as f64;
        }
        v
    };
    let mut mz = vec![0.0; dim];
    let mut mx = vec![0.0; dim];
    for y in y0..y0 + bh {
        for x in x0..x0 + bw {
            let (z, r) = (pixel(pred, y, x), pixel(gt, y, x));
            for k in 0..dim {
                mz[k] += z[k];
                mx[k] += r[k];
            }
        }
    }
    mz.iter_mut().for_each(|v| *v /= n);
    mx.iter_mut().for_each(|v| *v /= n);
    let mut cov = vec![0.0; dim];
    let (mut vz, mut vx) = (0.0, 0.0);
    for y in y0..y0 + bh {
        for x in x0..x0 + bw {
            let z: Vec<f64> = pixel(pred, y, x).iter().zip(&mz).map(|(a, m)| a - m).collect();
            let r: Vec<f64> = pixel(gt, y, x).iter().zip(&mx).map(|(a, m)| a - m).collect();
            let prod = hyper::mul(&z, &hyper::conj(&r));
            for k in 0..dim {
                cov[k] += prod[k];
            }
            vz += hyper::norm_sq(&z);
            vx += hyper::norm_sq(&r);
        }
    }
    let (vz, vx) = (vz / n, vx / n);
    let cov_norm = hyper::norm_sq(&cov).sqrt() / n;
    let (mz2, mx2) = (hyper::norm_sq(&mz), hyper::norm_sq(&mx));
    let den = (vz + vx) * (mz2 + mx2);
    (den > 0.0).then(|| 4.0 * cov_norm * mz2.sqrt() * mx2.sqrt() / den)
}

/// Block-averaged hypercomplex quality index. Bands are zero-padded to the
/// next power of two.
pub fn q2n(pred: &Tensor, gt: &Tensor, block: usize) -> Result<f64> {
    same_dims("q2n", pred, gt)?;
    let (b, h, w) = (gt.dims()[0], gt.dims()[1], gt.dims()[2]);
    let dim = b.next_power_of_two();
    let mut vals = Vec::new();
    let mut skipped = 0usize;
    for (y0, x0, bh, bw) in tiles(h, w, block) {
        match q2n_block(pred, gt, y0, x0, bh, bw, dim) {
            Some(q) => vals.push(q),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::debug!("q2n: skipped {skipped} constant blocks");
    }
    if vals.is_empty() {
        return Err(Error::Data("q2n: every block is constant".into()));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

fn uiqi_block(a: &[f32], b: &[f32], w: usize, y0: usize, x0: usize, bh: usize, bw: usize) -> Option<f64> {
    let n = (bh * bw) as f64;
    let (mut sa, mut sb) = (0.0, 0.0);
    for y in y0..y0 + bh {
        for x in x0..x0 + bw {
            sa += a[y * w + x] as f64;
            sb += b[y * w + x] as f64;
        }
    }
    let (ma, mb) = (sa / n, sb / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for y in y0..y0 + bh {
        for x in x0..x0 + bw {
            let (da, db) = (a[y * w + x] as f64 - ma, b[y * w + x] as f64 - mb);
            cov += da * db;
            va += da * da;
            vb += db * db;
        }
    }
    let den = (va + vb) / n * (ma * ma + mb * mb);
    (den > 0.0).then(|| 4.0 * cov / n * ma * mb / den)
}

/// Block-averaged universal image quality index of two `h x w` planes.
pub fn uiqi(a: &[f32], b: &[f32], h: usize, w: usize, block: usize) -> Result<f64> {
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::dim("uiqi", format!("{h} x {w} planes"), &[a.len(), b.len()]));
    }
    let vals: Vec<f64> = tiles(h, w, block)
        .filter_map(|(y0, x0, bh, bw)| uiqi_block(a, b, w, y0, x0, bh, bw))
        .collect();
    if vals.is_empty() {
        return Err(Error::Data("uiqi: every block is constant".into()));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

fn resolution_ratio(op: &'static str, pred: &Tensor, lrms: &Tensor) -> Result<usize> {
    let (p, l) = (pred.dims(), lrms.dims());
    if p.len() != 3 || l.len() != 3 || p[0] != l[0] || p[1] % l[1] != 0 || p[2] % l[2] != 0 || p[1] / l[1] != p[2] / l[2] {
        return Err(Error::dim(op, format!("lrms [{}, H/r, W/r]", p.first().copied().unwrap_or(0)), l));
    }
    Ok(p[1] / l[1])
}

fn lr_block(ratio: usize) -> usize {
    (Q_BLOCK / ratio).max(1)
}

/// Spectral distortion: mean absolute change of inter-band Q between the
/// fused image and the LRMS.
pub fn d_lambda(pred: &Tensor, lrms: &Tensor) -> Result<f64> {
    let ratio = resolution_ratio("d_lambda", pred, lrms)?;
    let b = pred.dims()[0];
    if b < 2 {
        return Ok(0.0);
    }
    let (h, w) = (pred.dims()[1], pred.dims()[2]);
    let (lh, lw) = (lrms.dims()[1], lrms.dims()[2]);
    let mut acc = 0.0;
    for l in 0..b {
        for r in 0..b {
            if l == r {
                continue;
            }
            let qf = uiqi(pred.channel(l), pred.channel(r), h, w, Q_BLOCK)?;
            let qm = uiqi(lrms.channel(l), lrms.channel(r), lh, lw, lr_block(ratio))?;
            acc += (qf - qm).abs().powi(P_EXP as i32);
        }
    }
    Ok((acc / (b * (b - 1)) as f64).powf(1.0 / P_EXP as f64))
}

/// Gaussian width whose frequency response is `PAN_NYQUIST_GAIN` at the
/// low-resolution Nyquist frequency.
pub fn pan_blur_sigma(ratio: usize) -> f64 {
    ratio as f64 * (-2.0 * PAN_NYQUIST_GAIN.ln()).sqrt() / std::f64::consts::PI
}

/// PAN brought to the LRMS grid. Ratio 1 leaves it untouched.
pub fn degrade_pan(pan: &Tensor, ratio: usize) -> Result<Tensor> {
    if ratio == 1 {
        return Ok(pan.clone());
    }
    decimate(&gaussian_blur(pan, pan_blur_sigma(ratio))?, ratio)
}

/// Spatial distortion: mean absolute change of band-to-PAN Q across scales.
pub fn d_s(pred: &Tensor, lrms: &Tensor, pan: &Tensor) -> Result<f64> {
    let ratio = resolution_ratio("d_s", pred, lrms)?;
    let (b, h, w) = (pred.dims()[0], pred.dims()[1], pred.dims()[2]);
    if pan.dims() != [1, h, w] {
        return Err(Error::dim("d_s", format!("pan [1, {h}, {w}]"), pan.dims()));
    }
    let pan_lr = degrade_pan(pan, ratio)?;
    let (lh, lw) = (lrms.dims()[1], lrms.dims()[2]);
    let mut acc = 0.0;
    for l in 0..b {
        let qh = uiqi(pred.channel(l), pan.data(), h, w, Q_BLOCK)?;
        let ql = uiqi(lrms.channel(l), pan_lr.data(), lh, lw, lr_block(ratio))?;
        acc += (qh - ql).abs().powi(Q_EXP as i32);
    }
    Ok((acc / b as f64).powf(1.0 / Q_EXP as f64))
}

pub fn hqnr(d_lambda: f64, d_s: f64) -> f64 {
    (1.0 - d_lambda) * (1.0 - d_s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    Reduced,
    Full,
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reduced" => Ok(Protocol::Reduced),
            "full" => Ok(Protocol::Full),
            other => Err(Error::Config(format!("unknown protocol `{other}`"))),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Reduced => "reduced",
            Protocol::Full => "full",
        })
    }
}

impl Protocol {
    pub fn metric_names(self) -> &'static [&'static str] {
        match self {
            Protocol::Reduced => &REDUCED_METRICS,
            Protocol::Full => &FULL_METRICS,
        }
    }
}

/// Metric values of one fused image, in `protocol.metric_names()` order.
/// The full protocol scores the fused image against its own LRMS and PAN.
pub fn score_image(pred: &Tensor, scene: &ScenePair, protocol: Protocol) -> Result<Vec<f64>> {
    match protocol {
        Protocol::Reduced => Ok(vec![
            sam(pred, &scene.gt)?,
            ergas(pred, &scene.gt, scene.ratio())?,
            scc(pred, &scene.gt)?,
            q2n(pred, &scene.gt, Q_BLOCK)?,
        ]),
        Protocol::Full => {
            let dl = d_lambda(pred, &scene.lrms)?;
            let ds = d_s(pred, &scene.lrms, &scene.pan)?;
            Ok(vec![dl, ds, hqnr(dl, ds)])
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub protocol: Protocol,
    /// `(scene id, values in metric order)`
    pub per_image: Vec<(usize, Vec<f64>)>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl EvalReport {
    pub fn metric_names(&self) -> &'static [&'static str] {
        self.protocol.metric_names()
    }

    /// `(mean, population std)` per metric.
    pub fn aggregate(&self) -> Vec<(f64, f64)> {
        (0..self.metric_names().len())
            .map(|k| mean_std(&self.per_image.iter().map(|r| r.1[k]).collect::<Vec<_>>()))
            .collect()
    }

    pub fn mean_of(&self, metric: &str) -> Option<f64> {
        let k = self.metric_names().iter().position(|m| *m == metric)?;
        Some(self.aggregate()[k].0)
    }

    pub fn constants_header() -> String {
        format!(
            "# q_block={Q_BLOCK} lr_q_block=q_block/ratio d_lambda_p={P_EXP} d_s_q={Q_EXP} \
             pan_lr=gaussian(nyquist_gain={PAN_NYQUIST_GAIN})+decimate scc_highpass=laplacian3x3 \
             sam_unit=degrees std=population\n"
        )
    }

    pub fn to_csv(&self) -> String {
        let mut out = Self::constants_header();
        let _ = writeln!(out, "# protocol={}", self.protocol);
        let _ = writeln!(out, "id,{}", self.metric_names().join(","));
        for (id, vals) in &self.per_image {
            let cells: Vec<String> = vals.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{id},{}", cells.join(","));
        }
        let agg = self.aggregate();
        let means: Vec<String> = agg.iter().map(|a| a.0.to_string()).collect();
        let stds: Vec<String> = agg.iter().map(|a| a.1.to_string()).collect();
        let _ = writeln!(out, "mean,{}", means.join(","));
        let _ = writeln!(out, "std,{}", stds.join(","));
        out
    }
}

/// Run `model` on every scene and score it, in id order.
pub fn evaluate(model: &Model, scenes: &[ScenePair], protocol: Protocol) -> Result<EvalReport> {
    let mut ordered: Vec<&ScenePair> = scenes.iter().collect();
    ordered.sort_by_key(|s| s.id);
    let per_image = ordered
        .into_iter()
        .map(|s| {
            let pred = model.predict_prepared(&Prepared::new(s)?)?;
            Ok((s.id, score_image(&pred, s, protocol)?))
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport { protocol, per_image })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_pair, SensorProfile};
    use num_complex::Complex64;

    fn scene() -> ScenePair {
        generate_pair(&SensorProfile::target(4), 1, 32, 7).unwrap()
    }

    #[test]
    fn sam_cases() {
        let s = scene();
        assert_eq!(sam(&s.gt, &s.gt).unwrap(), 0.0);
        assert_eq!(sam(&s.gt.map(|v| 2.0 * v), &s.gt).unwrap(), 0.0);
        let a = Tensor::new(vec![2, 1, 2], vec![1.0, 0.0, 0.0, 3.0]).unwrap();
        let b = Tensor::new(vec![2, 1, 2], vec![0.0, 2.0, 5.0, 0.0]).unwrap();
        assert!((sam(&a, &b).unwrap() - 90.0).abs() < 1e-12);
        assert!(sam(&Tensor::zeros(&[2, 2, 2]), &b.map(|v| v + 1.0).reshape(&[2, 1, 2]).unwrap()).is_err());
    }

    #[test]
    fn ergas_cases() {
        let s = scene();
        assert_eq!(ergas(&s.gt, &s.gt, 4).unwrap(), 0.0);
        // RMSE equal to the band mean.
        let gt = Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap();
        let pred = Tensor::new(vec![1, 1, 2], vec![2.0, 0.0]).unwrap();
        assert!((ergas(&pred, &gt, 4).unwrap() - 25.0).abs() < 1e-12);
        let zero = Tensor::new(vec![2, 1, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let err = ergas(&zero, &zero, 4).unwrap_err();
        assert!(err.to_string().contains("band 1"));
    }

    #[test]
    fn ergas_scalar_oracle() {
        let gt = Tensor::new(vec![2, 2, 2], vec![0.2, 0.4, 0.6, 0.8, 0.1, 0.3, 0.5, 0.9]).unwrap();
        let pred = Tensor::new(vec![2, 2, 2], vec![0.25, 0.35, 0.6, 0.7, 0.2, 0.3, 0.4, 0.95]).unwrap();
        let g: Vec<f64> = gt.data().iter().map(|&v| v as f64).collect();
        let p: Vec<f64> = pred.data().iter().map(|&v| v as f64).collect();
        let mut terms = 0.0;
        for b in 0..2 {
            let (gs, ps) = (&g[b * 4..b * 4 + 4], &p[b * 4..b * 4 + 4]);
            let mean = gs.iter().sum::<f64>() / 4.0;
            let rmse = (gs.iter().zip(ps).map(|(a, c)| (a - c) * (a - c)).sum::<f64>() / 4.0).sqrt();
            terms += (rmse / mean).powi(2);
        }
        let expected = 100.0 / 4.0 * (terms / 2.0).sqrt();
        assert!((ergas(&pred, &gt, 4).unwrap() - expected).abs() < 1e-6);
    }

    #[test]
    fn scc_cases() {
        let s = scene();
        assert!((scc(&s.gt, &s.gt).unwrap() - 1.0).abs() < 1e-12);
        let centered = s.gt.map(|v| v - 0.5);
        assert!((scc(&centered.map(|v| -v), &centered).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn scc_hand_case() {
        let gt = Tensor::new(vec![1, 4, 4], (0..16).map(|i| ((i * 7) % 5) as f32).collect()).unwrap();
        let pred = Tensor::new(vec![1, 4, 4], (0..16).map(|i| ((i * 3) % 4) as f32).collect()).unwrap();
        let hp = |t: &Tensor| -> Vec<f64> {
            let d = t.data();
            let mut out = vec![];
            for y in 1..3 {
                for x in 1..3 {
                    let mut s = 0.0;
                    for yy in y - 1..=y + 1 {
                        for xx in x - 1..=x + 1 {
                            let v = d[yy * 4 + xx] as f64;
                            s += if yy == y && xx == x { 8.0 * v } else { -v };
                        }
                    }
                    out.push(s);
                }
            }
            out
        };
        let (a, b) = (hp(&pred), hp(&gt));
        let ma = a.iter().sum::<f64>() / 4.0;
        let mb = b.iter().sum::<f64>() / 4.0;
        let num: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let da: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let db: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        let expected = num / (da * db).sqrt();
        assert!((scc(&pred, &gt).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn hypercomplex_identities() {
        let a = [1.0, 2.0, -0.5, 0.25];
        let b = [0.3, -1.0, 2.0, 0.5];
        let n = hyper::norm_sq(&hyper::mul(&a, &b));
        assert!((n - hyper::norm_sq(&a) * hyper::norm_sq(&b)).abs() < 1e-12);
        let zz = hyper::mul(&a, &hyper::conj(&a));
        assert!((zz[0] - hyper::norm_sq(&a)).abs() < 1e-12);
        assert!(zz[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn q2n_cases() {
        let s = scene();
        assert!((q2n(&s.gt, &s.gt, 32).unwrap() - 1.0).abs() < 1e-12);
        let shifted = s.gt.map(|v| v + 5.0);
        assert!(q2n(&shifted, &s.gt, 32).unwrap() < 0.9);
        assert!(q2n(&Tensor::full(&[4, 8, 8], 1.0), &Tensor::full(&[4, 8, 8], 1.0), 32).is_err());
    }

    #[test]
    fn q2n_two_band_complex_oracle() {
        let gt = Tensor::from_fn(&[2, 4, 4], |i| ((i * 37) % 11) as f32 / 10.0 + 0.1);
        let pred = Tensor::from_fn(&[2, 4, 4], |i| ((i * 17) % 7) as f32 / 6.0 + 0.2);
        let cz = |t: &Tensor| -> Vec<Complex64> {
            (0..16).map(|p| Complex64::new(t.data()[p] as f64, t.data()[16 + p] as f64)).collect()
        };
        let (z, x) = (cz(&pred), cz(&gt));
        let mz = z.iter().sum::<Complex64>() / 16.0;
        let mx = x.iter().sum::<Complex64>() / 16.0;
        let cov = z.iter().zip(&x).map(|(a, b)| (a - mz) * (b - mx).conj()).sum::<Complex64>() / 16.0;
        let vz = z.iter().map(|a| (a - mz).norm_sqr()).sum::<f64>() / 16.0;
        let vx = x.iter().map(|b| (b - mx).norm_sqr()).sum::<f64>() / 16.0;
        let expected = 4.0 * cov.norm() * mz.norm() * mx.norm() / ((vz + vx) * (mz.norm_sqr() + mx.norm_sqr()));
        assert!((q2n(&pred, &gt, 32).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn hqnr_identity() {
        assert_eq!(hqnr(0.0, 0.0), 1.0);
        assert!((hqnr(0.035, 0.066) - 0.901_31).abs() < 1e-9);
    }

    #[test]
    fn no_reference_identity() {
        let s = scene();
        assert_eq!(d_lambda(&s.gt, &s.gt).unwrap(), 0.0);
        assert_eq!(d_s(&s.gt, &s.gt, &s.pan).unwrap(), 0.0);
        let dl = d_lambda(&s.gt, &s.lrms).unwrap();
        let ds = d_s(&s.gt, &s.lrms, &s.pan).unwrap();
        assert!(dl >= 0.0 && ds >= 0.0);
        assert!(d_s(&s.gt, &s.lrms, &Tensor::zeros(&[1, 16, 16])).is_err());
    }

    #[test]
    fn report_aggregates_and_csv() {
        let r = EvalReport {
            protocol: Protocol::Full,
            per_image: vec![(0, vec![0.1, 0.2, 0.72]), (1, vec![0.3, 0.0, 0.7])],
        };
        let agg = r.aggregate();
        assert!((agg[0].0 - 0.2).abs() < 1e-12);
        assert!((agg[0].1 - 0.1).abs() < 1e-12);
        let csv = r.to_csv();
        assert!(csv.contains("id,D_lambda,D_s,HQNR\n"));
        assert!(csv.lines().last().unwrap().starts_with("std,"));
        assert!(csv.starts_with("# q_block=32"));
    }
}
