//! Multi-stage convolutional feature extractor.
//!
//! Each stage is `blocks` conv(3×3)+bias+relu blocks; the first block of a
//! stage has stride 2, so stage extents follow `ceil(prev / 2)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::Conv;
use crate::ndtensor::{ConvSpec, Graph, ParamStore, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    /// Output channels of each stage, shallow to deep.
    pub channels: Vec<usize>,
    pub blocks: usize,
    pub in_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: vec![8, 16, 32, 64],
            blocks: 1,
            in_channels: 3,
        }
    }
}

impl BackboneConfig {
    pub fn stages(&self) -> usize {
        self.channels.len()
    }

    /// Smallest accepted input extent, `2^stages`.
    pub fn min_input(&self) -> usize {
        1 << self.stages()
    }

    /// Spatial extent of every stage for an `extent`-sized input axis.
    pub fn stage_extents(&self, extent: usize) -> Vec<usize> {
        let mut e = extent;
        self.channels
            .iter()
            .map(|_| {
                e = e.div_ceil(2);
                e
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config(format!(
                "backbone channels must be a non-empty list of positive counts, got {:?}",
                self.channels
            )));
        }
        if self.blocks == 0 || self.in_channels == 0 {
            return Err(Error::Config("backbone blocks and input channels must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    stages: Vec<Vec<Conv>>,
}

impl Backbone {
    /// Registers all backbone parameters in `store`.
    pub fn new<R: Rng + ?Sized>(cfg: BackboneConfig, store: &mut ParamStore<f64>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut cin = cfg.in_channels;
        let mut stages = Vec::with_capacity(cfg.stages());
        for (s, &cout) in cfg.channels.iter().enumerate() {
            let mut blocks = Vec::with_capacity(cfg.blocks);
            for b in 0..cfg.blocks {
                let spec = ConvSpec {
                    stride: if b == 0 { 2 } else { 1 },
                    pad: 1,
                    ..ConvSpec::default()
                };
                blocks.push(Conv::new(
                    store,
                    &format!("backbone.s{s}.b{b}"),
                    3,
                    cin,
                    cout,
                    spec,
                    rng,
                ));
                cin = cout;
            }
            stages.push(blocks);
        }
        Ok(Self { cfg, stages })
    }

    /// Feature maps of every stage, ordered shallow to deep.
    pub fn forward(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, image: Var) -> Result<Vec<Var>> {
        let (h, w, c) = g.value(image).hwc("backbone")?;
        let min = self.cfg.min_input();
        if h < min || w < min || c != self.cfg.in_channels {
            return Err(Error::shape(
                "backbone",
                &[h, w, c],
                format!(
                    "input must be at least {min}×{min}×{} for {} stages",
                    self.cfg.in_channels,
                    self.cfg.stages()
                ),
            ));
        }
        let mut x = image;
        let mut outs = Vec::with_capacity(self.stages.len());
        for blocks in &self.stages {
            for conv in blocks {
                let y = conv.forward(g, store, x)?;
                x = g.relu(y);
            }
            outs.push(x);
        }
        Ok(outs)
    }
}

/// Fresh backbone parameters drawn deterministically from `seed`.
pub fn init_params(cfg: &BackboneConfig, seed: u64) -> Result<(Backbone, ParamStore<f64>)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bb = Backbone::new(cfg.clone(), &mut store, &mut rng)?;
    Ok((bb, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::Tensor;

    #[test]
    fn default_extents_halve() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.stage_extents(64), vec![32, 16, 8, 4]);
        let (bb, store) = init_params(&cfg, 3).unwrap();
        let mut g = Graph::new();
        let img = g.constant(Tensor::full(&[64, 64, 3], 0.5));
        let outs = bb.forward(&mut g, &store, img).unwrap();
        let shapes: Vec<_> = outs.iter().map(|&v| g.shape(v).to_vec()).collect();
        assert_eq!(
            shapes,
            vec![vec![32, 32, 8], vec![16, 16, 16], vec![8, 8, 32], vec![4, 4, 64]]
        );
    }

    #[test]
    fn zero_input_gives_zero_maps() {
        let cfg = BackboneConfig::default();
        let (bb, store) = init_params(&cfg, 9).unwrap();
        let mut g = Graph::new();
        let img = g.constant(Tensor::zeros(&[16, 16, 3]));
        for v in bb.forward(&mut g, &store, img).unwrap() {
            assert!(g.value(v).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn too_small_input_names_minimum() {
        let cfg = BackboneConfig::default();
        let (bb, store) = init_params(&cfg, 0).unwrap();
        let mut g = Graph::new();
        let img = g.constant(Tensor::zeros(&[8, 16, 3]));
        let msg = bb.forward(&mut g, &store, img).unwrap_err().to_string();
        assert!(msg.contains("16×16"), "{msg}");
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = BackboneConfig::default();
        let (_, a) = init_params(&cfg, 5).unwrap();
        let (_, b) = init_params(&cfg, 5).unwrap();
        let (_, c) = init_params(&cfg, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for p in a.iter().filter(|p| p.name.ends_with(".bias")) {
            assert!(p.value.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn fan_in_scaling() {
        let cfg = BackboneConfig::default();
        let (_, store) = init_params(&cfg, 11).unwrap();
        for p in store.iter().filter(|p| p.name.ends_with(".weight")) {
            let s = p.value.shape();
            let fan_in = s[0] * s[1] * s[2];
            if fan_in < 64 {
                continue;
            }
            let n = p.value.len() as f64;
            let mean = p.value.sum_all() / n;
            let var = p.value.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let target = 1.0 / (fan_in as f64).sqrt();
            assert!(
                (var.sqrt() - target).abs() <= 0.2 * target,
                "{}: {} vs {target}",
                p.name,
                var.sqrt()
            );
        }
    }
}
