//! Tiny pansharpening networks with a named parameter registry.
//!
//! Both architectures read the bicubic-upsampled LRMS concatenated with the
//! PAN image and run `depth` 3x3 convolutions with ReLU in between.
//! `TinyPnn` predicts the HRMS directly; `TinyResidual` predicts a detail
//! residual that is added to the upsampled LRMS.

use std::collections::HashSet;
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};

use crate::datagen::ScenePair;
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::seed::{derive_seed, rng, stream};
use crate::tensor::kernels::upsample_bicubic;
use crate::tensor::{read_swtn, write_swtn, Gradients, Graph, LeafSource, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    TinyPnn,
    TinyResidual,
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny_pnn" => Ok(Arch::TinyPnn),
            "tiny_residual" => Ok(Arch::TinyResidual),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::TinyPnn => "tiny_pnn",
            Arch::TinyResidual => "tiny_residual",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub bands: usize,
    /// Hidden width.
    pub channels: usize,
    /// Number of convolutions.
    pub depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: Arch::TinyResidual,
            bands: 4,
            channels: 16,
            depth: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bands == 0 || self.channels < 4 || self.depth < 2 {
            return Err(Error::Config(format!(
                "invalid model config: bands={} channels={} (>= 4) depth={} (>= 2)",
                self.bands, self.channels, self.depth
            )));
        }
        Ok(())
    }

    /// `(name, dims)` of every parameter in registry order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::with_capacity(2 * self.depth);
        for i in 0..self.depth {
            let cin = if i == 0 { self.bands + 1 } else { self.channels };
            let cout = if i + 1 == self.depth { self.bands } else { self.channels };
            out.push((format!("conv{i}.weight"), vec![cout, cin, 3, 3]));
            out.push((format!("conv{i}.bias"), vec![cout]));
        }
        out
    }

    fn to_kv(self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("arch", self.arch);
        kv.set("bands", self.bands);
        kv.set("channels", self.channels);
        kv.set("depth", self.depth);
        kv
    }

    fn from_kv(kv: &KeyValues) -> Result<Self> {
        let missing = |k: &str| Error::Config(format!("model config: missing `{k}`"));
        let cfg = ModelConfig {
            arch: kv.raw("arch").ok_or_else(|| missing("arch"))?.parse()?,
            bands: kv.get("bands")?.ok_or_else(|| missing("bands"))?,
            channels: kv.get("channels")?.ok_or_else(|| missing("channels"))?,
            depth: kv.get("depth")?.ok_or_else(|| missing("depth"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

impl ParamEntry {
    pub fn scalar_count(&self) -> usize {
        self.tensor.numel()
    }
}

/// Ordered named parameter tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamRegistry {
    entries: Vec<ParamEntry>,
}

impl ParamRegistry {
    pub fn push(&mut self, name: &str, tensor: Tensor) {
        assert!(self.get(name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry {
            name: name.to_string(),
            tensor,
            trainable: true,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|e| e.name == name)
            .map(|e| &mut e.tensor)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(ParamEntry::scalar_count).sum()
    }

    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(ParamEntry::scalar_count)
            .sum()
    }

    pub fn bit_eq(&self, other: &ParamRegistry) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.tensor.bit_eq(&b.tensor))
    }
}

impl LeafSource for ParamRegistry {
    fn leaf(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

/// Network inputs derived from one scene.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: usize,
    /// `[bands, H, W]`
    pub lrms_up: Tensor,
    /// `[1, H, W]`
    pub pan: Tensor,
    /// `[bands, H, W]`
    pub gt: Tensor,
}

fn resolution_ratio(lrms: &Tensor, pan: &Tensor, bands: usize) -> Result<usize> {
    let (l, p) = (lrms.dims(), pan.dims());
    if l.len() != 3 || l[0] != bands {
        return Err(Error::dim("predict", format!("lrms [{bands}, h, w]"), l));
    }
    if p.len() != 3 || p[0] != 1 || p[1] % l[1] != 0 || p[2] % l[2] != 0 || p[1] / l[1] != p[2] / l[2] {
        return Err(Error::dim(
            "predict",
            format!("pan [1, r*{}, r*{}]", l[1], l[2]),
            p,
        ));
    }
    Ok(p[1] / l[1])
}

impl Prepared {
    pub fn new(scene: &ScenePair) -> Result<Self> {
        let ratio = resolution_ratio(&scene.lrms, &scene.pan, scene.bands())?;
        Ok(Prepared {
            id: scene.id,
            lrms_up: upsample_bicubic(&scene.lrms, ratio)?,
            pan: scene.pan.clone(),
            gt: scene.gt.clone(),
        })
    }
}

pub fn prepare_all(scenes: &[ScenePair]) -> Result<Vec<Prepared>> {
    scenes.iter().map(Prepared::new).collect()
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamRegistry,
    predict_graph: Graph,
    loss_graph: Graph,
}

fn build_graph(config: &ModelConfig, with_loss: bool) -> Graph {
    let mut g = Graph::new();
    let lrms_up = g.input("lrms_up");
    let pan = g.input("pan");
    let mut h = g.concat_channels(&[lrms_up, pan]);
    for i in 0..config.depth {
        let w = g.leaf(&format!("conv{i}.weight"));
        let b = g.leaf(&format!("conv{i}.bias"));
        h = g.conv2d(h, w, Some(b), 1);
        if i + 1 < config.depth {
            h = g.relu(h);
        }
    }
    if config.arch == Arch::TinyResidual {
        h = g.add(h, lrms_up);
    }
    if with_loss {
        let gt = g.input("gt");
        h = g.l1_loss(h, gt);
    }
    g.set_output(h);
    g
}

impl Model {
    /// He-initialized model, deterministic in `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng(derive_seed(seed, &[stream::INIT]));
        let mut params = ParamRegistry::default();
        let layout = config.param_layout();
        let last = layout.len() - 2;
        for (i, (name, dims)) in layout.into_iter().enumerate() {
            let t = if dims.len() == 4 {
                let fan_in = (dims[1] * dims[2] * dims[3]) as f64;
                let mut std = (2.0 / fan_in).sqrt();
                if i == last && config.arch == Arch::TinyResidual {
                    // Start close to the plain upsampler.
                    std *= 0.1;
                }
                let normal = Normal::new(0.0, std).expect("positive std");
                Tensor::from_fn(&dims, |_| normal.sample(&mut r) as f32)
            } else {
                Tensor::zeros(&dims)
            };
            params.push(&name, t);
        }
        Self::from_params(config, params)
    }

    /// Assemble a model from an existing registry, checking names and dims.
    pub fn from_params(config: ModelConfig, params: ParamRegistry) -> Result<Self> {
        config.validate()?;
        let layout = config.param_layout();
        if layout.len() != params.len() {
            return Err(Error::Config(format!(
                "registry has {} tensors, architecture needs {}",
                params.len(),
                layout.len()
            )));
        }
        for ((name, dims), e) in layout.iter().zip(params.entries()) {
            if name != &e.name || dims.as_slice() != e.tensor.dims() {
                return Err(Error::Config(format!(
                    "registry entry `{}` {:?} does not match expected `{name}` {dims:?}",
                    e.name,
                    e.tensor.dims()
                )));
            }
        }
        Ok(Model {
            config,
            params,
            predict_graph: build_graph(&config, false),
            loss_graph: build_graph(&config, true),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamRegistry {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamRegistry {
        &mut self.params
    }

    /// Batched forward on prepared samples; returns `[N, bands, H, W]`.
    pub fn forward_batch(&self, batch: &[&Prepared]) -> Result<Tensor> {
        let (up, pan) = stack_inputs(batch, self.config.bands)?;
        let mut g = self.predict_graph.clone();
        g.forward(&self.params, &[("lrms_up", &up), ("pan", &pan)])
    }

    pub fn predict(&self, lrms: &Tensor, pan: &Tensor) -> Result<Tensor> {
        let ratio = resolution_ratio(lrms, pan, self.config.bands)?;
        let prepared = Prepared {
            id: 0,
            lrms_up: upsample_bicubic(lrms, ratio)?,
            pan: pan.clone(),
            gt: Tensor::zeros(&[1]),
        };
        self.predict_prepared(&prepared)
    }

    pub fn predict_prepared(&self, p: &Prepared) -> Result<Tensor> {
        let out = self.forward_batch(&[p])?;
        let dims = out.dims()[1..].to_vec();
        out.reshape(&dims)
    }

    /// Mean L1 loss of the batch against ground truth.
    pub fn loss(&self, batch: &[&Prepared]) -> Result<f32> {
        let mut g = self.loss_graph.clone();
        let (up, pan, gt) = stack_with_gt(batch, self.config.bands)?;
        let l = g.forward(&self.params, &[("lrms_up", &up), ("pan", &pan), ("gt", &gt)])?;
        Ok(l.item().expect("scalar loss"))
    }

    /// Batch loss and gradients. With `wanted`, only those tensors are
    /// differentiated and the rest report zeros.
    pub fn loss_and_grads(
        &self,
        batch: &[&Prepared],
        wanted: Option<&HashSet<String>>,
    ) -> Result<(f32, Gradients)> {
        let mut g = self.loss_graph.clone();
        let (up, pan, gt) = stack_with_gt(batch, self.config.bands)?;
        let l = g.forward(&self.params, &[("lrms_up", &up), ("pan", &pan), ("gt", &gt)])?;
        let grads = g.backward_for(wanted)?;
        Ok((l.item().expect("scalar loss"), grads))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join("model.txt");
        fs::write(&cfg_path, self.config.to_kv().to_text()).map_err(|e| Error::io(&cfg_path, e))?;
        let mut index = String::new();
        for e in self.params.entries() {
            let file = format!("{}.swtn", e.name);
            write_swtn(&dir.join(&file), &e.tensor)?;
            let dims: Vec<String> = e.tensor.dims().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(index, "{}\t{}\t{}", e.name, dims.join("x"), file);
        }
        let reg = dir.join("registry.txt");
        fs::write(&reg, index).map_err(|e| Error::io(&reg, e))
    }

    /// Load a model saved by [`Model::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let config = ModelConfig::from_kv(&KeyValues::load(&dir.join("model.txt"))?)?;
        Self::load_with(dir, config)
    }

    /// Load, requiring the stored tensors to fit `config`.
    pub fn load_with(dir: &Path, config: ModelConfig) -> Result<Self> {
        let reg = dir.join("registry.txt");
        let text = fs::read_to_string(&reg).map_err(|e| Error::io(&reg, e))?;
        let mut params = ParamRegistry::default();
        for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::format(&reg, format!("line {}: expected name, dims, file", i + 1)));
            }
            let dims: Vec<usize> = cols[1]
                .split('x')
                .map(|d| d.parse().map_err(|_| Error::format(&reg, format!("line {}: bad dims", i + 1))))
                .collect::<Result<_>>()?;
            let t = read_swtn(&dir.join(cols[2]))?;
            if t.dims() != dims.as_slice() {
                return Err(Error::format(
                    dir.join(cols[2]),
                    format!("dims {:?} disagree with registry {:?}", t.dims(), dims),
                ));
            }
            params.push(cols[0], t);
        }
        Self::from_params(config, params).map_err(|e| Error::format(&reg, e.to_string()))
    }
}

fn stack_inputs(batch: &[&Prepared], bands: usize) -> Result<(Tensor, Tensor)> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    for p in batch {
        if p.lrms_up.dims()[0] != bands {
            return Err(Error::dim("predict", format!("[{bands}, H, W]"), p.lrms_up.dims()));
        }
    }
    let up: Vec<&Tensor> = batch.iter().map(|p| &p.lrms_up).collect();
    let pan: Vec<&Tensor> = batch.iter().map(|p| &p.pan).collect();
    Ok((Tensor::stack(&up)?, Tensor::stack(&pan)?))
}

fn stack_with_gt(batch: &[&Prepared], bands: usize) -> Result<(Tensor, Tensor, Tensor)> {
    let (up, pan) = stack_inputs(batch, bands)?;
    let gt: Vec<&Tensor> = batch.iter().map(|p| &p.gt).collect();
    Ok((up, pan, Tensor::stack(&gt)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_pair, SensorProfile};

    fn scene() -> ScenePair {
        generate_pair(&SensorProfile::source(4), 3, 32, 1).unwrap()
    }

    #[test]
    fn registry_has_weight_and_bias_per_conv() {
        let cfg = ModelConfig {
            arch: Arch::TinyPnn,
            bands: 4,
            channels: 16,
            depth: 3,
        };
        let m = Model::build(cfg, 0).unwrap();
        assert_eq!(m.params().len(), 6);
        let names: Vec<&str> = m.params().names().collect();
        assert_eq!(names[0], "conv0.weight");
        assert_eq!(names[5], "conv2.bias");
        assert!(m.params().total_scalars() <= 100_000);
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = ModelConfig::default();
        assert!(Model::build(cfg, 4).unwrap().params().bit_eq(Model::build(cfg, 4).unwrap().params()));
        assert!(!Model::build(cfg, 4).unwrap().params().bit_eq(Model::build(cfg, 5).unwrap().params()));
    }

    #[test]
    fn zero_residual_reproduces_bicubic_upsample() {
        let mut m = Model::build(ModelConfig::default(), 1).unwrap();
        for e in m.params_mut().entries_mut() {
            e.tensor.data_mut().fill(0.0);
        }
        let s = scene();
        let out = m.predict(&s.lrms, &s.pan).unwrap();
        let up = upsample_bicubic(&s.lrms, 4).unwrap();
        assert_eq!(out.dims(), &[4, 32, 32]);
        assert!(out.bit_eq(&up));
    }

    #[test]
    fn predict_shape_and_determinism() {
        let m = Model::build(ModelConfig::default(), 2).unwrap();
        let s = scene();
        let a = m.predict(&s.lrms, &s.pan).unwrap();
        assert_eq!(a.dims(), s.gt.dims());
        assert!(a.is_finite());
        assert!(a.bit_eq(&m.predict(&s.lrms, &s.pan).unwrap()));
    }

    #[test]
    fn predict_rejects_mismatched_inputs() {
        let m = Model::build(ModelConfig::default(), 2).unwrap();
        let s = scene();
        assert!(matches!(m.predict(&s.lrms, &Tensor::zeros(&[1, 30, 30])), Err(Error::Dim { .. })));
        assert!(matches!(m.predict(&Tensor::zeros(&[3, 8, 8]), &s.pan), Err(Error::Dim { .. })));
    }

    #[test]
    fn unknown_arch_and_bad_config() {
        assert!("resnet".parse::<Arch>().is_err());
        let cfg = ModelConfig {
            channels: 2,
            ..ModelConfig::default()
        };
        assert!(Model::build(cfg, 0).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::build(ModelConfig::default(), 9).unwrap();
        m.save(dir.path()).unwrap();
        let back = Model::load(dir.path()).unwrap();
        assert!(back.params().bit_eq(m.params()));
        let order: Vec<&str> = back.params().names().collect();
        assert_eq!(order, m.params().names().collect::<Vec<_>>());
        let s = scene();
        assert!(m.predict(&s.lrms, &s.pan).unwrap().bit_eq(&back.predict(&s.lrms, &s.pan).unwrap()));

        let wrong = ModelConfig {
            bands: 8,
            ..ModelConfig::default()
        };
        assert!(Model::load_with(dir.path(), wrong).is_err());
    }

    #[test]
    fn load_detects_corrupt_tensor() {
        let dir = tempfile::tempdir().unwrap();
        Model::build(ModelConfig::default(), 9).unwrap().save(dir.path()).unwrap();
        let f = dir.path().join("conv1.weight.swtn");
        let mut bytes = fs::read(&f).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&f, bytes).unwrap();
        assert!(matches!(Model::load(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn batch_loss_gradient_is_mean_of_scene_gradients() {
        let m = Model::build(ModelConfig::default(), 3).unwrap();
        let p = SensorProfile::target(4);
        let prepared: Vec<Prepared> = (0..3)
            .map(|i| Prepared::new(&generate_pair(&p, i, 32, 5).unwrap()).unwrap())
            .collect();
        let refs: Vec<&Prepared> = prepared.iter().collect();
        let (_, batch) = m.loss_and_grads(&refs, None).unwrap();
        let singles: Vec<Gradients> = refs
            .iter()
            .map(|p| m.loss_and_grads(&[*p], None).unwrap().1)
            .collect();
        for (name, g) in batch.iter() {
            for (k, &v) in g.data().iter().enumerate() {
                let mean: f64 = singles.iter().map(|s| s.get(name).unwrap().data()[k] as f64).sum::<f64>() / 3.0;
                assert!((v as f64 - mean).abs() < 1e-6, "{name}[{k}]");
            }
        }
    }
}
