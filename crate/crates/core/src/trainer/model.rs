//! Full network: backbone → graph layers → patch encoder → linear classifier.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig};
use crate::config::{join, parse_bool, parse_list, parse_value, KvMap};
use crate::error::{Error, Result};
use crate::graphmod::{
    Affinity, BipartiteAdjacency, ContextGraph, ContextGraphConfig, Fusion, MultiStageGraph, MultiStageGraphConfig,
};
use crate::layers::Linear;
use crate::ndtensor::{Graph, ParamStore, Tensor, Var};
use crate::patchenc::{fuse_global, PatchConfig, PatchEncoder};

/// Module sets matching the ablation rows FE, FE+CAG, FE+CAG+MAG and the
/// full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Fe,
    Cag,
    Mag,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Fe, Ablation::Cag, Ablation::Mag, Ablation::Full];

    /// `(cag, mag, pe)` flags.
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Ablation::Fe => (false, false, false),
            Ablation::Cag => (true, false, false),
            Ablation::Mag => (true, true, false),
            Ablation::Full => (true, true, true),
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fe" => Ok(Ablation::Fe),
            "cag" => Ok(Ablation::Cag),
            "mag" => Ok(Ablation::Mag),
            "full" => Ok(Ablation::Full),
            _ => Err(Error::Config(format!(
                "unknown ablation {s:?}; expected fe, cag, mag or full"
            ))),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Fe => "fe",
            Ablation::Cag => "cag",
            Ablation::Mag => "mag",
            Ablation::Full => "full",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_size: usize,
    pub backbone: BackboneConfig,
    /// Stage the context-aware graph runs on (0-based).
    pub cag_stage: usize,
    /// Query/key/value width; 0 selects `ceil(C/2)`.
    pub attn_channels: usize,
    pub affinity: Affinity,
    pub cag_residual: bool,
    pub mag: MultiStageGraphConfig,
    pub enable_cag: bool,
    pub enable_mag: bool,
    pub enable_pe: bool,
    pub patch: PatchConfig,
    pub codebook_size: usize,
    pub classes: usize,
}

impl Default for ModelConfig {
    /// Three stages on 64×64 inputs, leaving an 8×8 final map so every
    /// default window size (3, 5, 7) fits.
    fn default() -> Self {
        Self {
            input_size: 64,
            backbone: BackboneConfig {
                channels: vec![8, 16, 32],
                ..BackboneConfig::default()
            },
            cag_stage: 2,
            attn_channels: 0,
            affinity: Affinity::EmbeddedGaussian,
            cag_residual: true,
            mag: MultiStageGraphConfig {
                source_stage: 1,
                target_stage: 2,
                ..MultiStageGraphConfig::default()
            },
            enable_cag: true,
            enable_mag: true,
            enable_pe: true,
            patch: PatchConfig::default(),
            codebook_size: 16,
            classes: 4,
        }
    }
}

pub const MODEL_KEYS: &[&str] = &[
    "model.input_size",
    "model.channels",
    "model.blocks",
    "model.cag_stage",
    "model.attn_channels",
    "model.affinity",
    "model.cag_residual",
    "model.mag_source",
    "model.mag_target",
    "model.dilation",
    "model.context_kernel",
    "model.neighbors",
    "model.cag",
    "model.mag",
    "model.pe",
    "model.codebook_size",
    "model.classes",
    "patch.windows",
    "patch.stride",
    "patch.weights",
    "patch.embed_dim",
    "patch.normalize",
];

impl ModelConfig {
    /// Small configuration for end-to-end gradient checks on 16×16 inputs.
    pub fn gradcheck_small() -> Self {
        Self {
            input_size: 16,
            backbone: BackboneConfig {
                channels: vec![4, 8],
                ..BackboneConfig::default()
            },
            cag_stage: 1,
            mag: MultiStageGraphConfig {
                source_stage: 0,
                target_stage: 1,
                ..MultiStageGraphConfig::default()
            },
            patch: PatchConfig {
                windows: vec![2, 3],
                weights: vec![0.6, 0.4],
                embed_dim: 4,
                ..PatchConfig::default()
            },
            codebook_size: 4,
            classes: 3,
            ..Self::default()
        }
    }

    pub fn set_ablation(&mut self, a: Ablation) {
        (self.enable_cag, self.enable_mag, self.enable_pe) = a.flags();
    }

    pub fn attn_width(&self) -> usize {
        match self.attn_channels {
            0 => self.backbone.channels[self.cag_stage].div_ceil(2),
            n => n,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.patch.validate()?;
        let stages = self.backbone.stages();
        if self.classes < 2 {
            return Err(Error::Config(format!("class count must be ≥ 2, got {}", self.classes)));
        }
        if self.codebook_size == 0 {
            return Err(Error::Config("codebook size must be ≥ 1".into()));
        }
        if self.input_size < self.backbone.min_input() {
            return Err(Error::Config(format!(
                "input size {} below the backbone minimum {}",
                self.input_size,
                self.backbone.min_input()
            )));
        }
        let extents = self.backbone.stage_extents(self.input_size);
        let last = *extents.last().expect("non-empty backbone");
        if self.enable_cag && self.cag_stage >= stages {
            return Err(Error::Config(format!(
                "cag stage {} does not exist ({stages} stages)",
                self.cag_stage
            )));
        }
        if self.enable_mag {
            let (s, t) = (self.mag.source_stage, self.mag.target_stage);
            if s >= stages || t >= stages || s == t {
                return Err(Error::Config(format!(
                    "mag stages ({s}, {t}) must be two distinct stages below {stages}"
                )));
            }
            if self.mag.kernel < 3 || self.mag.kernel.is_multiple_of(2) || self.mag.dilation == 0 {
                return Err(Error::Config(
                    "mag context kernel must be odd ≥ 3 and dilation ≥ 1".into(),
                ));
            }
            let targets = extents[t] * extents[t];
            if self.mag.neighbors == 0 || self.mag.neighbors > targets {
                return Err(Error::Config(format!(
                    "mag neighbour count {} must lie in 1..={targets}",
                    self.mag.neighbors
                )));
            }
        }
        if self.enable_pe {
            self.patch
                .check_extent(last, last)
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn to_kv(&self, map: &mut KvMap) {
        let mut put = |k: &str, v: String| {
            map.insert(k.to_string(), v);
        };
        put("model.input_size", self.input_size.to_string());
        put("model.channels", join(&self.backbone.channels));
        put("model.blocks", self.backbone.blocks.to_string());
        put("model.cag_stage", self.cag_stage.to_string());
        put("model.attn_channels", self.attn_channels.to_string());
        put(
            "model.affinity",
            match self.affinity {
                Affinity::EmbeddedGaussian => "embedded",
                Affinity::Gaussian => "gaussian",
            }
            .into(),
        );
        put("model.cag_residual", self.cag_residual.to_string());
        put("model.mag_source", self.mag.source_stage.to_string());
        put("model.mag_target", self.mag.target_stage.to_string());
        put("model.dilation", self.mag.dilation.to_string());
        put("model.context_kernel", self.mag.kernel.to_string());
        put("model.neighbors", self.mag.neighbors.to_string());
        put("model.cag", self.enable_cag.to_string());
        put("model.mag", self.enable_mag.to_string());
        put("model.pe", self.enable_pe.to_string());
        put("model.codebook_size", self.codebook_size.to_string());
        put("model.classes", self.classes.to_string());
        put("patch.windows", join(&self.patch.windows));
        put("patch.stride", self.patch.stride.to_string());
        put("patch.weights", join(&self.patch.weights));
        put("patch.embed_dim", self.patch.embed_dim.to_string());
        put("patch.normalize", self.patch.normalize.to_string());
    }

    /// Applies one key; `Ok(false)` when the key is not a model key.
    pub fn apply(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "model.input_size" => self.input_size = parse_value(key, v)?,
            "model.channels" => self.backbone.channels = parse_list(key, v)?,
            "model.blocks" => self.backbone.blocks = parse_value(key, v)?,
            "model.cag_stage" => self.cag_stage = parse_value(key, v)?,
            "model.attn_channels" => self.attn_channels = parse_value(key, v)?,
            "model.affinity" => {
                self.affinity = match v {
                    "embedded" => Affinity::EmbeddedGaussian,
                    "gaussian" => Affinity::Gaussian,
                    _ => {
                        return Err(Error::Config(format!(
                            "{key}: expected embedded or gaussian, got {v:?}"
                        )))
                    }
                }
            }
            "model.cag_residual" => self.cag_residual = parse_bool(key, v)?,
            "model.mag_source" => self.mag.source_stage = parse_value(key, v)?,
            "model.mag_target" => self.mag.target_stage = parse_value(key, v)?,
            "model.dilation" => self.mag.dilation = parse_value(key, v)?,
            "model.context_kernel" => self.mag.kernel = parse_value(key, v)?,
            "model.neighbors" => self.mag.neighbors = parse_value(key, v)?,
            "model.cag" => self.enable_cag = parse_bool(key, v)?,
            "model.mag" => self.enable_mag = parse_bool(key, v)?,
            "model.pe" => self.enable_pe = parse_bool(key, v)?,
            "model.codebook_size" => self.codebook_size = parse_value(key, v)?,
            "model.classes" => self.classes = parse_value(key, v)?,
            "patch.windows" => self.patch.windows = parse_list(key, v)?,
            "patch.stride" => self.patch.stride = parse_value(key, v)?,
            "patch.weights" => self.patch.weights = parse_list(key, v)?,
            "patch.embed_dim" => self.patch.embed_dim = parse_value(key, v)?,
            "patch.normalize" => self.patch.normalize = parse_bool(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Rebuilds a config from canonical text, ignoring non-model keys.
    pub fn from_kv(map: &KvMap) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in map {
            cfg.apply(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Values recorded during one forward pass.
pub struct ForwardTrace {
    pub logits: Var,
    pub z: Var,
    pub q: Var,
    pub attention: Option<Var>,
    pub adjacency: Option<BipartiteAdjacency>,
    pub gate: Option<Var>,
    pub assignment: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore<f64>,
    backbone: Backbone,
    cag: Option<ContextGraph>,
    mag: Option<MultiStageGraph>,
    fusion: Option<Fusion>,
    encoder: Option<PatchEncoder>,
    classifier: Linear,
}

/// Per-example result of a forward/backward pass.
pub struct SampleGrad {
    pub loss: f64,
    pub predicted: usize,
    /// One gradient per parameter, in store order.
    pub grads: Vec<Tensor<f64>>,
}

impl Model {
    /// Builds the model and draws all parameters from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let ch = &cfg.backbone.channels;
        let last = *ch.last().expect("validated");
        let backbone = Backbone::new(cfg.backbone.clone(), &mut params, &mut rng)?;
        let cag = cfg.enable_cag.then(|| {
            let gc = ContextGraphConfig {
                channels: ch[cfg.cag_stage],
                attn_channels: cfg.attn_width(),
                affinity: cfg.affinity,
                residual: cfg.cag_residual,
            };
            ContextGraph::new(&mut params, "cag", gc, &mut rng)
        });
        let mag = cfg.enable_mag.then(|| {
            MultiStageGraph::new(
                &mut params,
                "mag",
                cfg.mag.clone(),
                ch[cfg.mag.source_stage],
                ch[cfg.mag.target_stage],
                &mut rng,
            )
        });
        let fused_in = cag.as_ref().map_or(0, |c| c.cfg.channels) + mag.as_ref().map_or(0, |m| m.proj.outputs);
        let fusion = (fused_in > 0).then(|| Fusion::new(&mut params, "fuse", fused_in, last, &mut rng));
        let encoder = if cfg.enable_pe {
            Some(PatchEncoder::new(
                &mut params,
                "pe",
                cfg.patch.clone(),
                last,
                cfg.codebook_size,
                &mut rng,
            )?)
        } else {
            None
        };
        let z_dim = last
            + if cfg.enable_pe {
                cfg.codebook_size * cfg.patch.embed_dim
            } else {
                0
            };
        let classifier = Linear::new(&mut params, "classifier", z_dim, cfg.classes, true, &mut rng);
        Ok(Self {
            cfg,
            params,
            backbone,
            cag,
            mag,
            fusion,
            encoder,
            classifier,
        })
    }

    pub fn classifier(&self) -> &Linear {
        &self.classifier
    }

    pub fn forward(&self, g: &mut Graph<f64>, image: Var) -> Result<ForwardTrace> {
        let store = &self.params;
        let stages = self.backbone.forward(g, store, image)?;
        let f_last = *stages.last().expect("non-empty backbone");

        let mut graph_feats = Vec::new();
        let mut attention = None;
        if let Some(cag) = &self.cag {
            let o = cag.forward(g, store, stages[self.cfg.cag_stage])?;
            graph_feats.push(o.out);
            attention = Some(o.attention);
        }
        let mut adjacency = None;
        if let Some(mag) = &self.mag {
            let o = mag.forward(g, store, stages[mag.cfg.source_stage], stages[mag.cfg.target_stage])?;
            graph_feats.push(o.out);
            adjacency = Some(o.adjacency);
        }
        let (q, gate) = match &self.fusion {
            Some(f) => {
                let o = f.forward(g, store, &graph_feats, f_last)?;
                (o.q, Some(o.gate))
            }
            None => (f_last, None),
        };
        let (u, assignment) = match &self.encoder {
            Some(enc) => {
                let a = enc.forward(g, store, q)?;
                (Some(a.u), Some(a.assignment))
            }
            None => (None, None),
        };
        let z = fuse_global(g, q, u)?;
        let z_row = g.reshape(z, &[1, g.shape(z)[0]])?;
        let logits = self.classifier.forward(g, store, z_row)?;
        let logits = g.reshape(logits, &[self.cfg.classes])?;
        Ok(ForwardTrace {
            logits,
            z,
            q,
            attention,
            adjacency,
            gate,
            assignment,
        })
    }

    pub fn logits(&self, image: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let t = self.forward(&mut g, x)?;
        Ok(g.value(t.logits).clone())
    }

    /// Loss, prediction, and parameter gradients for one labelled image.
    pub fn sample_grad(&self, image: &Tensor<f64>, label: usize) -> Result<SampleGrad> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let t = self.forward(&mut g, x)?;
        let loss = g.cross_entropy(t.logits, label)?;
        let grads = g.backward(loss)?;
        let mut per_param: Vec<Tensor<f64>> = self.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        for &(id, v) in g.param_vars() {
            if let Some(gv) = grads.get(v) {
                per_param[id.index()] = gv.clone();
            }
        }
        Ok(SampleGrad {
            loss: g.value(loss).data()[0],
            predicted: argmax(g.value(t.logits).data()),
            grads: per_param,
        })
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &v)| if v > best.1 { (i, v) } else { best },
        )
        .0
}

/// `−log softmax(logits)[label]`.
pub fn cross_entropy(logits: &Tensor<f64>, label: usize) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = g.cross_entropy(l, label)?;
    Ok(g.value(loss).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        let mut kv = KvMap::new();
        cfg.to_kv(&mut kv);
        assert_eq!(ModelConfig::from_kv(&kv).unwrap(), cfg);
        assert_eq!(kv.len(), MODEL_KEYS.len());
        assert!(MODEL_KEYS.iter().all(|k| kv.contains_key(*k)));
    }

    #[test]
    fn rejects_windows_larger_than_final_map() {
        let mut cfg = ModelConfig::default();
        cfg.backbone.channels = vec![8, 16, 32, 64];
        cfg.mag.source_stage = 2;
        cfg.mag.target_stage = 3;
        cfg.cag_stage = 3;
        assert!(cfg.validate().is_err());
        cfg.set_ablation(Ablation::Mag);
        cfg.validate().unwrap();
    }

    #[test]
    fn fe_model_is_linear_on_pooled_features() {
        let mut cfg = ModelConfig::gradcheck_small();
        cfg.set_ablation(Ablation::Fe);
        let model = Model::new(cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Tensor::uniform(&[16, 16, 3], 0.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(img.clone());
        let t = model.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(t.z), &[8]);
        assert!(t.attention.is_none() && t.adjacency.is_none() && t.assignment.is_none());
        let z = g.value(t.z).data().to_vec();
        let w = &model.params.get(model.classifier.weight).value;
        let b = &model.params.get(model.classifier.bias.unwrap()).value;
        for c in 0..3 {
            let expect: f64 = b.data()[c] + z.iter().enumerate().map(|(i, zi)| zi * w.at(&[i, c])).sum::<f64>();
            assert!((g.value(t.logits).data()[c] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_classifier_gives_bias_logits() {
        let mut cfg = ModelConfig::gradcheck_small();
        cfg.classes = 2;
        let mut model = Model::new(cfg, 3).unwrap();
        let (w, b) = (model.classifier.weight, model.classifier.bias.unwrap());
        model
            .params
            .get_mut(w)
            .value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        model.params.get_mut(b).value = Tensor::new(&[2], vec![0.25, -1.5]).unwrap();
        let img = Tensor::full(&[16, 16, 3], 0.3);
        assert_eq!(model.logits(&img).unwrap().data(), &[0.25, -1.5]);
    }

    #[test]
    fn cross_entropy_values() {
        let l = Tensor::zeros(&[4]);
        assert!((cross_entropy(&l, 1).unwrap() - 4f64.ln()).abs() <= 1e-12);
        assert!(cross_entropy(&l, 4).is_err());
    }
}
