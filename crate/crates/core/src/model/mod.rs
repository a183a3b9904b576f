//! The conditional synthesis model: mask-modulated generator, style
//! encoder without normalization layers, multiscale patch discriminator
//! and the loss suite. Everything runs in f64 on the reverse-mode graph.

pub mod graph;
pub mod losses;
pub mod nets;
pub mod ops;
pub mod spade;

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use graph::{Graph, NodeId};
pub use losses::{loss_suite, LossTerms, LossWeights, PerceptualFeatures};
pub use nets::{
    discriminator_forward, generator_forward, reparameterize, style_encoder_forward, ScaleOutput,
    StyleLatent,
};
pub use spade::{spade_normalize, spade_normalize_node, spade_resblock_node};

/// Architecture hyperparameters. The generator starts from a
/// `image_size >> (num_spade_blocks - 1)` grid and doubles resolution after
/// every block except the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub image_size: usize,
    /// Generator width at the initial grid; halves after every upsample
    /// (floor 4). Also the discriminator's first-layer width.
    pub base_channels: usize,
    pub num_spade_blocks: usize,
    pub latent_dim: usize,
    pub use_vae: bool,
    pub modulation_hidden_channels: usize,
    pub discriminator_scales: usize,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 4,
            image_size: 128,
            base_channels: 64,
            num_spade_blocks: 6,
            latent_dim: 256,
            use_vae: false,
            modulation_hidden_channels: 128,
            discriminator_scales: 2,
            leaky_slope: 0.2,
        }
    }
}

/// Epsilon inside every normalization denominator.
pub const NORM_EPS: f64 = 1e-5;

impl ModelConfig {
    pub fn num_upsamples(&self) -> usize {
        self.num_spade_blocks - 1
    }

    pub fn initial_grid(&self) -> usize {
        self.image_size >> self.num_upsamples()
    }

    /// Generator channel width entering block `k` (k = 0 is the initial
    /// grid); the final entry is the width entering the output conv.
    pub fn generator_widths(&self) -> Vec<usize> {
        (0..=self.num_spade_blocks)
            .map(|i| (self.base_channels >> i).max(4))
            .collect()
    }

    /// Encoder downsampling conv widths (stride-2 each), ending at a
    /// spatial grid in [4, 8).
    pub fn encoder_widths(&self) -> Result<Vec<usize>> {
        let mut widths = Vec::new();
        let mut size = self.image_size;
        let mut w = self.base_channels;
        while size >= 8 {
            if !size.is_multiple_of(2) {
                return Err(Error::Config(format!(
                    "image_size {} does not halve cleanly for the encoder",
                    self.image_size
                )));
            }
            widths.push(w.min(8 * self.base_channels).min(512));
            size /= 2;
            w *= 2;
        }
        Ok(widths)
    }

    pub fn encoder_final_grid(&self) -> usize {
        let mut size = self.image_size;
        while size >= 8 {
            size /= 2;
        }
        size
    }

    /// Discriminator body widths (three stride-2 convs).
    pub fn discriminator_widths(&self) -> Vec<usize> {
        (0..3).map(|i| (self.base_channels << i).min(512)).collect()
    }

    pub fn validate(&self) -> Result<ModelConfig> {
        let mut errors = Vec::new();
        for (name, v) in [
            ("num_classes", self.num_classes),
            ("image_size", self.image_size),
            ("base_channels", self.base_channels),
            ("num_spade_blocks", self.num_spade_blocks),
            ("latent_dim", self.latent_dim),
            ("modulation_hidden_channels", self.modulation_hidden_channels),
            ("discriminator_scales", self.discriminator_scales),
        ] {
            if v < 1 {
                errors.push(format!("{name}: must be >= 1, got {v}"));
            }
        }
        if self.num_spade_blocks >= 1 {
            let g = self.initial_grid();
            if g < 2 || g << self.num_upsamples() != self.image_size {
                errors.push(format!(
                    "image_size: {} is not (initial grid >= 2) * 2^{} for {} blocks",
                    self.image_size,
                    self.num_upsamples(),
                    self.num_spade_blocks
                ));
            }
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            errors.push(format!("leaky_slope: must lie in [0, 1), got {}", self.leaky_slope));
        }
        if !self.image_size.is_multiple_of(1 << (self.discriminator_scales - 1).min(8)) {
            errors.push(format!(
                "discriminator_scales: image_size {} cannot be pooled {} times",
                self.image_size,
                self.discriminator_scales - 1
            ));
        }
        if self.use_vae {
            if let Err(e) = self.encoder_widths() {
                errors.push(e.to_string());
            }
        }
        if errors.is_empty() {
            Ok(self.clone())
        } else {
            Err(Error::InvalidParams(errors))
        }
    }
}

/// Named parameter tensors. Names follow component/block-index/layer/kind,
/// e.g. `generator/block2/norm1/gamma/kernel`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub params: BTreeMap<String, ArrayD<f64>>,
}

impl ModelWeights {
    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::msg(format!("missing parameter {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|a| a.iter().all(|v| v.is_finite()))
    }

    /// Parameter shape map of a freshly initialized model; used to check
    /// checkpoints against a config.
    pub fn shape_map(config: &ModelConfig) -> Result<BTreeMap<String, Vec<usize>>> {
        let w = ModelWeights::init(config, 0)?;
        Ok(w.params
            .iter()
            .map(|(k, v)| (k.clone(), v.shape().to_vec()))
            .collect())
    }

    pub fn matches_config(&self, config: &ModelConfig) -> Result<()> {
        let expected = Self::shape_map(config)?;
        for (name, shape) in &expected {
            match self.params.get(name) {
                None => {
                    return Err(Error::CheckpointConfigMismatch(format!(
                        "parameter {name} missing"
                    )))
                }
                Some(a) if a.shape() != shape.as_slice() => {
                    return Err(Error::CheckpointConfigMismatch(format!(
                        "parameter {name}: shape {:?} vs expected {:?}",
                        a.shape(),
                        shape
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = self.params.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::CheckpointConfigMismatch(format!(
                "unexpected parameter {extra}"
            )));
        }
        Ok(())
    }

    /// Initialize all parameters: kernels and linear weights from
    /// N(0, 0.02), biases zero. Each tensor gets its own stream derived
    /// from (seed, name), so initialization is order-independent.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<ModelWeights> {
        let config = config.validate()?;
        let mut params = BTreeMap::new();

        let add_conv = |params: &mut BTreeMap<String, ArrayD<f64>>,
                            name: &str,
                            c_out: usize,
                            c_in: usize,
                            k: usize| {
            params.insert(
                format!("{name}/kernel"),
                gaussian_tensor(&[c_out, c_in, k, k], seed, &format!("{name}/kernel"), 0.02),
            );
            params.insert(
                format!("{name}/bias"),
                ArrayD::zeros(IxDyn(&[c_out])),
            );
        };
        let add_linear = |params: &mut BTreeMap<String, ArrayD<f64>>,
                          name: &str,
                          f_in: usize,
                          f_out: usize| {
            params.insert(
                format!("{name}/weight"),
                gaussian_tensor(&[f_in, f_out], seed, &format!("{name}/weight"), 0.02),
            );
            params.insert(format!("{name}/bias"), ArrayD::zeros(IxDyn(&[f_out])));
        };

        // Generator.
        let widths = config.generator_widths();
        let g0 = config.initial_grid();
        add_linear(
            &mut params,
            "generator/head",
            config.latent_dim,
            widths[0] * g0 * g0,
        );
        let mh = config.modulation_hidden_channels;
        for k in 0..config.num_spade_blocks {
            let (cin, cout) = (widths[k], widths[k + 1]);
            let cmid = cin.min(cout);
            let p = format!("generator/block{k}");
            for (norm, ch) in [("norm1", cin), ("norm2", cmid)] {
                add_conv(&mut params, &format!("{p}/{norm}/hidden"), mh, config.num_classes, 3);
                add_conv(&mut params, &format!("{p}/{norm}/gamma"), ch, mh, 3);
                add_conv(&mut params, &format!("{p}/{norm}/beta"), ch, mh, 3);
            }
            add_conv(&mut params, &format!("{p}/conv1"), cmid, cin, 3);
            add_conv(&mut params, &format!("{p}/conv2"), cout, cmid, 3);
            if cin != cout {
                add_conv(&mut params, &format!("{p}/norms/hidden"), mh, config.num_classes, 3);
                add_conv(&mut params, &format!("{p}/norms/gamma"), cin, mh, 3);
                add_conv(&mut params, &format!("{p}/norms/beta"), cin, mh, 3);
                add_conv(&mut params, &format!("{p}/skip"), cout, cin, 1);
            }
        }
        add_conv(&mut params, "generator/out", 1, widths[config.num_spade_blocks], 3);

        // Style encoder (only in VAE mode). Strictly convolution + linear:
        // no normalization layers of any kind.
        if config.use_vae {
            let enc = config.encoder_widths()?;
            let mut prev = 1;
            for (i, &w) in enc.iter().enumerate() {
                add_conv(&mut params, &format!("encoder/conv{i}"), w, prev, 4);
                prev = w;
            }
            let flat = prev * config.encoder_final_grid() * config.encoder_final_grid();
            add_linear(&mut params, "encoder/mu", flat, config.latent_dim);
            add_linear(&mut params, "encoder/logvar", flat, config.latent_dim);
        }

        // Multiscale discriminator: independent weights per scale.
        let dw = config.discriminator_widths();
        for s in 0..config.discriminator_scales {
            let mut prev = 1 + config.num_classes;
            for (i, &w) in dw.iter().enumerate() {
                add_conv(&mut params, &format!("discriminator/scale{s}/conv{i}"), w, prev, 4);
                prev = w;
            }
            add_conv(&mut params, &format!("discriminator/scale{s}/out"), 1, prev, 3);
        }

        Ok(ModelWeights { params })
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic N(0, std) tensor keyed by (seed, name).
fn gaussian_tensor(shape: &[usize], seed: u64, name: &str, std: f64) -> ArrayD<f64> {
    use rand::Rng as _;
    let mut rng = crate::train::rng_from_seed(seed ^ fnv1a(name.as_bytes()));
    let n = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        // Box-Muller on two uniform draws.
        let u1: f64 = ((rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
        let u2: f64 = ((rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out.push(std * r * theta.cos());
        if out.len() < n {
            out.push(std * r * theta.sin());
        }
    }
    ArrayD::from_shape_vec(IxDyn(shape), out).expect("shape")
}

/// Binds parameters into a graph (once each) and remembers the node ids so
/// gradients can be collected by name after `backward`.
pub struct Binder<'w> {
    weights: &'w ModelWeights,
    trainable: Box<dyn Fn(&str) -> bool>,
    bound: BTreeMap<String, NodeId>,
}

impl<'w> Binder<'w> {
    pub fn new(weights: &'w ModelWeights, trainable: impl Fn(&str) -> bool + 'static) -> Self {
        Binder {
            weights,
            trainable: Box::new(trainable),
            bound: BTreeMap::new(),
        }
    }

    /// Bind everything as non-trainable (inference).
    pub fn frozen(weights: &'w ModelWeights) -> Self {
        Binder::new(weights, |_| false)
    }

    pub fn param(&mut self, g: &mut Graph, name: &str) -> NodeId {
        if let Some(&id) = self.bound.get(name) {
            return id;
        }
        let value = self
            .weights
            .params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .clone();
        let id = g.leaf(value, (self.trainable)(name));
        self.bound.insert(name.to_string(), id);
        id
    }

    /// Gradients of every bound trainable parameter, by name.
    pub fn grads(&self, g: &Graph) -> BTreeMap<String, ArrayD<f64>> {
        self.bound
            .iter()
            .filter_map(|(name, &id)| g.grad(id).map(|gr| (name.clone(), gr.clone())))
            .collect()
    }
}

/// One-hot encode a label slice into `[num_classes, H, W]`.
pub fn one_hot(label: &Array2<u8>, num_classes: usize) -> Result<Array3<f64>> {
    let (h, w) = label.dim();
    let mut out = Array3::<f64>::zeros((num_classes, h, w));
    for ((y, x), &v) in label.indexed_iter() {
        if v as usize >= num_classes {
            return Err(Error::UnknownLabel {
                value: v as i64,
                path: "<one_hot input>".into(),
            });
        }
        out[[v as usize, y, x]] = 1.0;
    }
    Ok(out)
}

/// Stack per-item one-hot masks into `[N, num_classes, H, W]`.
pub fn one_hot_batch(labels: &[Array2<u8>], num_classes: usize) -> Result<ndarray::Array4<f64>> {
    assert!(!labels.is_empty());
    let (h, w) = labels[0].dim();
    let mut out = ndarray::Array4::<f64>::zeros((labels.len(), num_classes, h, w));
    for (i, l) in labels.iter().enumerate() {
        if l.dim() != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "label {i}: {:?} vs {:?}",
                l.dim(),
                (h, w)
            )));
        }
        out.index_axis_mut(ndarray::Axis(0), i)
            .assign(&one_hot(l, num_classes)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn initial_grid_derivation() {
        let c = ModelConfig::default();
        assert_eq!(c.initial_grid(), 4);
        let small = ModelConfig {
            image_size: 64,
            num_spade_blocks: 5,
            ..c
        };
        assert_eq!(small.initial_grid(), 4);
        assert!(small.validate().is_ok());
        let bad = ModelConfig {
            image_size: 100,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn weights_are_deterministic_and_finite() {
        let c = ModelConfig {
            image_size: 16,
            num_spade_blocks: 3,
            base_channels: 8,
            modulation_hidden_channels: 8,
            latent_dim: 8,
            use_vae: true,
            ..ModelConfig::default()
        };
        let a = ModelWeights::init(&c, 42).unwrap();
        let b = ModelWeights::init(&c, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.all_finite());
        let c2 = ModelWeights::init(&c, 43).unwrap();
        assert_ne!(a, c2);
    }

    #[test]
    fn encoder_has_no_normalization_parameters() {
        let c = ModelConfig {
            image_size: 32,
            num_spade_blocks: 4,
            base_channels: 8,
            use_vae: true,
            latent_dim: 16,
            modulation_hidden_channels: 8,
            ..ModelConfig::default()
        };
        let w = ModelWeights::init(&c, 1).unwrap();
        let enc_names: Vec<&str> = w.names().filter(|n| n.starts_with("encoder/")).collect();
        assert!(!enc_names.is_empty());
        for n in enc_names {
            assert!(
                !n.contains("norm") && !n.contains("gamma") && !n.contains("beta"),
                "unexpected normalization parameter {n}"
            );
        }
    }

    #[test]
    fn one_hot_round_trip_and_errors() {
        let label = Array2::from_shape_fn((5, 7), |(y, x)| ((y + x) % 4) as u8);
        let oh = one_hot(&label, 4).unwrap();
        // Exactly one channel active per pixel.
        for y in 0..5 {
            for x in 0..7 {
                let sum: f64 = (0..4).map(|c| oh[[c, y, x]]).sum();
                assert_eq!(sum, 1.0);
                let argmax = (0..4).max_by(|&a, &b| {
                    oh[[a, y, x]].partial_cmp(&oh[[b, y, x]]).unwrap()
                });
                assert_eq!(argmax.unwrap() as u8, label[[y, x]]);
            }
        }
        let all_bg = Array2::<u8>::zeros((3, 3));
        let oh_bg = one_hot(&all_bg, 4).unwrap();
        assert!(oh_bg.index_axis(ndarray::Axis(0), 0).iter().all(|&v| v == 1.0));

        let bad = Array2::from_elem((2, 2), 7u8);
        assert!(one_hot(&bad, 4).is_err());
    }
}
