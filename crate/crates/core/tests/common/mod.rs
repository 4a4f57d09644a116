//! Independent f64 reference implementations used as test oracles.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use swiftpan::datagen::{generate_dataset, SensorProfile};
use swiftpan::model::{prepare_all, Arch, Model, ModelConfig, ParamRegistry, Prepared};
use swiftpan::tensor::{Graph, Tensor};

/// Direct-loop zero-padded stride-1 cross-correlation.
/// `x` is `[n, c, h, w]`, `w` is `[co, c, k, k]`; returns `[n, co, oh, ow]`.
pub fn conv2d_ref(
    x: &[f64],
    xd: [usize; 4],
    w: &[f64],
    wd: [usize; 4],
    b: Option<&[f64]>,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, wi] = xd;
    let [co, ci, k, _] = wd;
    assert_eq!(c, ci);
    let (oh, ow) = (h + 2 * pad + 1 - k, wi + 2 * pad + 1 - k);
    let mut out = vec![0.0; n * co * oh * ow];
    for s in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b[o]);
                    for i in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (sy, sx) = ((y + ky) as isize - pad as isize, (xx + kx) as isize - pad as isize);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wi as isize {
                                    continue;
                                }
                                acc += w[((o * c + i) * k + ky) * k + kx]
                                    * x[((s * c + i) * h + sy as usize) * wi + sx as usize];
                            }
                        }
                    }
                    out[((s * co + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    (out, [n, co, oh, ow])
}

fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Model loss in f64 plus the sign pattern of every ReLU input and every
/// L1 residual (a probe whose perturbation flips any of them straddles a kink).
pub fn model_loss_ref(cfg: &ModelConfig, params: &[Vec<f64>], batch: &[&Prepared]) -> (f64, Vec<bool>) {
    let n = batch.len();
    let (b, h, w) = (cfg.bands, batch[0].gt.dims()[1], batch[0].gt.dims()[2]);
    let plane = h * w;
    let mut x = Vec::with_capacity(n * (b + 1) * plane);
    let mut up = Vec::with_capacity(n * b * plane);
    for p in batch {
        x.extend(f64s(&p.lrms_up));
        x.extend(f64s(&p.pan));
        up.extend(f64s(&p.lrms_up));
    }
    let mut signs = Vec::new();
    let mut dims = [n, b + 1, h, w];
    for i in 0..cfg.depth {
        let cout = if i + 1 == cfg.depth { b } else { cfg.channels };
        let wd = [cout, dims[1], 3, 3];
        let (mut y, yd) = conv2d_ref(&x, dims, &params[2 * i], wd, Some(&params[2 * i + 1]), 1);
        if i + 1 < cfg.depth {
            for v in y.iter_mut() {
                signs.push(*v > 0.0);
                *v = v.max(0.0);
            }
        }
        x = y;
        dims = yd;
    }
    if cfg.arch == Arch::TinyResidual {
        for (v, u) in x.iter_mut().zip(&up) {
            *v += u;
        }
    }
    let mut total = 0.0;
    let mut k = 0;
    for p in batch {
        for &g in p.gt.data() {
            let r = x[k] - g as f64;
            signs.push(r > 0.0);
            total += r.abs();
            k += 1;
        }
    }
    (total / x.len() as f64, signs)
}

/// Outcome of one gradient probe.
#[derive(Clone, Debug)]
pub struct Probe {
    pub what: String,
    pub autodiff: f64,
    pub numeric: f64,
}

impl Probe {
    /// Relative error with an absolute floor below which both values count as zero.
    pub fn rel_err(&self, floor: f64) -> f64 {
        (self.autodiff - self.numeric).abs() / self.autodiff.abs().max(self.numeric.abs()).max(floor)
    }
}

pub const FD_STEP: f64 = 1e-4;

/// Central differences of `f` at coordinate `k` of `theta`, or `None` when
/// the ± perturbations change the kink signature.
fn central_diff(
    theta: &mut [Vec<f64>],
    t: usize,
    k: usize,
    f: &dyn Fn(&[Vec<f64>]) -> (f64, Vec<bool>),
) -> Option<f64> {
    let base = theta[t][k];
    let (_, s0) = f(theta);
    theta[t][k] = base + FD_STEP;
    let (lp, sp) = f(theta);
    theta[t][k] = base - FD_STEP;
    let (lm, sm) = f(theta);
    theta[t][k] = base;
    (sp == s0 && sm == s0).then(|| (lp - lm) / (2.0 * FD_STEP))
}

pub struct ProbeRun {
    pub probes: Vec<Probe>,
    pub rejected: usize,
}

fn small_scenes(seed: u64) -> Vec<Prepared> {
    prepare_all(&generate_dataset(&SensorProfile::target(4), 2, 16, seed).unwrap()).unwrap()
}

/// Probe every parameter tensor of a small network, `per_tensor` accepted
/// probes each.
pub fn model_probes(arch: Arch, seed: u64, per_tensor: usize) -> ProbeRun {
    let cfg = ModelConfig {
        arch,
        bands: 4,
        channels: 6,
        depth: 3,
    };
    let mut model = Model::build(cfg, seed).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // Nonzero biases so bias gradients see mixed ReLU states.
    for e in model.params_mut().entries_mut() {
        if e.name.ends_with("bias") {
            for v in e.tensor.data_mut() {
                *v = r.random_range(-0.05..0.05);
            }
        }
    }
    let scenes = small_scenes(seed);
    let batch: Vec<&Prepared> = scenes.iter().collect();
    let (_, grads) = model.loss_and_grads(&batch, None).unwrap();
    let mut theta: Vec<Vec<f64>> = model.params().entries().iter().map(|e| f64s(&e.tensor)).collect();
    let names: Vec<String> = model.params().names().map(String::from).collect();
    let f = |th: &[Vec<f64>]| model_loss_ref(&cfg, th, &batch);
    let mut run = ProbeRun { probes: Vec::new(), rejected: 0 };
    for (t, name) in names.iter().enumerate() {
        let g = grads.get(name).unwrap().data();
        let mut accepted = 0;
        let mut attempts = 0;
        while accepted < per_tensor && attempts < 50 * per_tensor {
            attempts += 1;
            let k = r.random_range(0..theta[t].len());
            match central_diff(&mut theta, t, k, &f) {
                Some(numeric) => {
                    run.probes.push(Probe {
                        what: format!("{arch}/{name}[{k}]"),
                        autodiff: g[k] as f64,
                        numeric,
                    });
                    accepted += 1;
                }
                None => run.rejected += 1,
            }
        }
    }
    run
}

/// Graph exercising the ops the network does not use:
/// `loss = mean(1.7 * relu(conv(concat((a - b) * (a + b), a), w, c))) + 0.01 * sum(b * b)`
/// with an unpadded convolution.
pub fn op_graph() -> Graph {
    let mut g = Graph::new();
    let (a, b, w, c) = (g.leaf("a"), g.leaf("b"), g.leaf("w"), g.leaf("c"));
    let d = g.sub(a, b);
    let s = g.add(a, b);
    let u = g.mul(d, s);
    let x = g.concat_channels(&[u, a]);
    let y = g.conv2d(x, w, Some(c), 0);
    let y = g.relu(y);
    let y = g.scale(y, 1.7);
    let m = g.mean(y);
    let bb = g.mul(b, b);
    let q = g.sum(bb);
    let q = g.scale(q, 0.01);
    let out = g.add(m, q);
    g.set_output(out);
    g
}

pub const OP_DIMS: [(&str, &[usize]); 4] = [
    ("a", &[2, 2, 5, 5]),
    ("b", &[2, 2, 5, 5]),
    ("w", &[3, 4, 3, 3]),
    ("c", &[3]),
];

pub fn op_graph_ref(th: &[Vec<f64>]) -> (f64, Vec<bool>) {
    let (a, b, w, c) = (&th[0], &th[1], &th[2], &th[3]);
    let [n, ch, h, wd] = [2, 2, 5, 5];
    let plane = ch * h * wd;
    let mut x = Vec::with_capacity(2 * n * plane);
    for s in 0..n {
        for k in 0..plane {
            let (av, bv) = (a[s * plane + k], b[s * plane + k]);
            x.push((av - bv) * (av + bv));
        }
        x.extend_from_slice(&a[s * plane..(s + 1) * plane]);
    }
    let (y, _) = conv2d_ref(&x, [n, 2 * ch, h, wd], w, [3, 4, 3, 3], Some(c), 0);
    let signs: Vec<bool> = y.iter().map(|&v| v > 0.0).collect();
    let m = y.iter().map(|&v| 1.7 * v.max(0.0)).sum::<f64>() / y.len() as f64;
    (m + 0.01 * b.iter().map(|v| v * v).sum::<f64>(), signs)
}

pub fn op_probes(seed: u64, per_leaf: usize) -> ProbeRun {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut reg = ParamRegistry::default();
    for (name, dims) in OP_DIMS {
        reg.push(name, Tensor::from_fn(dims, |_| r.random_range(-1.0..1.0)));
    }
    let mut g = op_graph();
    g.forward(&reg, &[]).unwrap();
    let grads = g.backward().unwrap();
    let mut theta: Vec<Vec<f64>> = reg.entries().iter().map(|e| f64s(&e.tensor)).collect();
    let mut run = ProbeRun { probes: Vec::new(), rejected: 0 };
    for (t, (name, _)) in OP_DIMS.iter().enumerate() {
        let gd = grads.get(name).unwrap().data();
        let mut accepted = 0;
        let mut attempts = 0;
        while accepted < per_leaf && attempts < 50 * per_leaf {
            attempts += 1;
            let k = r.random_range(0..theta[t].len());
            match central_diff(&mut theta, t, k, &op_graph_ref) {
                Some(numeric) => {
                    run.probes.push(Probe {
                        what: format!("ops/{name}[{k}]"),
                        autodiff: gd[k] as f64,
                        numeric,
                    });
                    accepted += 1;
                }
                None => run.rejected += 1,
            }
        }
    }
    run
}

/// Relative-error floor: gradients below this magnitude are compared
/// absolutely. f32 accumulation leaves ~1e-9 of noise on near-zero entries.
pub const GRAD_FLOOR: f64 = 1e-5;

/// All probes used by the gradient criterion.
pub fn all_probes() -> ProbeRun {
    let mut all = ProbeRun { probes: Vec::new(), rejected: 0 };
    for run in [
        model_probes(Arch::TinyResidual, 1, 10),
        model_probes(Arch::TinyPnn, 2, 10),
        op_probes(3, 10),
    ] {
        all.probes.extend(run.probes);
        all.rejected += run.rejected;
    }
    all
}

// ---------------------------------------------------------------------------
// DA-FPS brute force

/// Point sets for the sampler oracle: shuffled, non-contiguous ids; half
/// of them on a small integer lattice so exact distance ties occur.
pub fn oracle_point_sets(count: usize, seed: u64) -> Vec<Vec<(usize, Vec<f64>)>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|set| {
            let n = r.random_range(4..=50);
            let dim = r.random_range(1..=4);
            let lattice = set % 2 == 0;
            let mut ids: Vec<usize> = (0..n).map(|i| 3 * i + 7).collect();
            for i in (1..n).rev() {
                ids.swap(i, r.random_range(0..=i));
            }
            ids.into_iter()
                .map(|id| {
                    let v = (0..dim)
                        .map(|_| {
                            if lattice {
                                r.random_range(0..4) as f64
                            } else {
                                r.random_range(-2.0..2.0)
                            }
                        })
                        .collect();
                    (id, v)
                })
                .collect()
        })
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Literal transcription of the three sampling equations: KDE density,
/// argmin-density seed, then repeated argmax of the density-weighted
/// minimum distance, recomputed from scratch every round. Ties go to the
/// lowest id. `sigma = None` uses the median of all pairwise distances.
pub fn brute_force_dafps(points: &[(usize, Vec<f64>)], r: f64, alpha: f64, sigma: Option<f64>) -> Vec<usize> {
    let mut pts = points.to_vec();
    pts.sort_by_key(|p| p.0);
    let n = pts.len();
    let sigma = sigma.unwrap_or_else(|| {
        let mut d: Vec<f64> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| dist(&pts[i].1, &pts[j].1))
            .collect();
        d.sort_by(f64::total_cmp);
        let m = d.len();
        let med = if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) };
        if med > 0.0 { med } else { 1.0 }
    });
    let rho: Vec<f64> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| (-(dist(&pts[i].1, &pts[j].1) / sigma).powi(2)).exp())
                .sum()
        })
        .collect();
    let max_rho = rho.iter().copied().fold(0.0, f64::max);
    let k = ((r * n as f64) + 1e-9).floor() as usize;
    let mut chosen: Vec<usize> = Vec::new();
    // Seed: smallest density, earliest (lowest id) on ties.
    let mut seed = 0;
    for i in 0..n {
        if rho[i] < rho[seed] {
            seed = i;
        }
    }
    chosen.push(seed);
    while chosen.len() < k {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            if chosen.contains(&i) {
                continue;
            }
            let d_min = chosen
                .iter()
                .map(|&s| dist(&pts[i].1, &pts[s].1))
                .fold(f64::INFINITY, f64::min);
            let rel = if max_rho > 0.0 { rho[i] / max_rho } else { 0.0 };
            let w = d_min * (1.0 - alpha * rel);
            match best {
                Some((_, bw)) if w <= bw => {}
                _ => best = Some((i, w)),
            }
        }
        chosen.push(best.unwrap().0);
    }
    chosen.into_iter().map(|i| pts[i].0).collect()
}

// ---------------------------------------------------------------------------
// Sensitivity statistics, recomputed one scalar at a time

pub fn ref_mag(g: &[Vec<f32>]) -> f64 {
    let mut acc = 0.0;
    for b in g {
        let mut s = 0.0;
        for &v in b {
            s += v as f64;
        }
        acc += (s / b.len() as f64).abs();
    }
    acc / g.len() as f64
}

pub fn ref_gdc(g: &[Vec<f32>]) -> f64 {
    let mut acc = 0.0;
    for b in g {
        let pos = b.iter().filter(|&&v| v > 0.0).count() as f64;
        let neg = b.iter().filter(|&&v| v < 0.0).count() as f64;
        acc += if pos + neg == 0.0 { 0.5 } else { pos.max(neg) / (pos + neg) };
    }
    acc / g.len() as f64
}

/// Welford variance per batch.
pub fn ref_std(g: &[Vec<f32>]) -> f64 {
    let mut acc = 0.0;
    for b in g {
        let (mut mean, mut m2) = (0.0f64, 0.0f64);
        for (k, &v) in b.iter().enumerate() {
            let x = v as f64;
            let d = x - mean;
            mean += d / (k + 1) as f64;
            m2 += d * (x - mean);
        }
        acc += m2 / b.len() as f64;
    }
    (acc / g.len() as f64).sqrt()
}

pub fn ref_min_max(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    v.iter().map(|x| if hi == lo { 0.5 } else { (x - lo) / (hi - lo) }).collect()
}

pub fn ref_sharpness(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| x * x).sum::<f64>() / n - mean * mean;
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let median = if s.len() % 2 == 1 {
        s[s.len() / 2]
    } else {
        (s[s.len() / 2 - 1] + s[s.len() / 2]) / 2.0
    };
    var.max(0.0).sqrt() + s[s.len() - 1] - median
}

pub fn ref_p_select(h: f64, eta_min: f64, eta_max: f64, h_min: f64, h_max: f64) -> f64 {
    let t = (h - h_min) / (h_max - h_min);
    let t = if t < 0.0 { 0.0 } else if t > 1.0 { 1.0 } else { t };
    eta_min + t * (eta_max - eta_min)
}

/// Random per-microbatch gradient sets: `tensors` tensors of random size,
/// each with `m` microbatch gradients.
pub fn random_grad_sets(seed: u64, tensors: usize, m: usize) -> Vec<Vec<Vec<f32>>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..tensors)
        .map(|_| {
            let len = r.random_range(1..40);
            let shift = r.random_range(-0.5..0.5);
            (0..m)
                .map(|_| (0..len).map(|_| r.random_range(-1.0f32..1.0) + shift).collect())
                .collect()
        })
        .collect()
}
