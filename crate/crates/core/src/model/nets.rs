//! Generator, style encoder and multiscale discriminator as graph builders
//! plus array-in/array-out inference wrappers.

use ndarray::{Array2, Array4};
use rand::Rng;

use crate::error::{Error, Result};
use crate::exec::Exec;

use super::graph::{Graph, NodeId};
use super::ops::resize_nearest;
use super::spade::spade_resblock_node;
use super::{Binder, ModelConfig, ModelWeights};

/// Style distribution parameters produced by the encoder.
#[derive(Debug, Clone)]
pub struct StyleLatent {
    pub mu: Array2<f64>,
    pub logvar: Array2<f64>,
}

/// Nearest-resized one-hot mask stack for every generator resolution.
pub fn mask_pyramid(mask: &Array4<f64>, config: &ModelConfig) -> Vec<Array4<f64>> {
    let g0 = config.initial_grid();
    (0..config.num_spade_blocks)
        .map(|k| {
            let size = g0 << k;
            resize_nearest(&mask.view(), size, size)
        })
        .collect()
}

/// Build the generator: latent -> initial grid -> residual blocks with
/// mask modulation, 2x nearest upsampling between blocks, final conv and
/// tanh squashing. Returns the image node `[N, 1, S, S]`.
pub fn generator_node(
    g: &mut Graph,
    binder: &mut Binder<'_>,
    z: NodeId,
    masks: &[NodeId],
    config: &ModelConfig,
) -> NodeId {
    let widths = config.generator_widths();
    let g0 = config.initial_grid();
    let n = g.value(z).shape()[0];

    let hw = binder.param(g, "generator/head/weight");
    let hb = binder.param(g, "generator/head/bias");
    let head = g.linear(z, hw, hb);
    let mut x = g.reshape(head, &[n, widths[0], g0, g0]);

    for k in 0..config.num_spade_blocks {
        x = spade_resblock_node(
            g,
            binder,
            x,
            masks[k],
            &format!("generator/block{k}"),
            widths[k],
            widths[k + 1],
            config.leaky_slope,
        );
        if k + 1 < config.num_spade_blocks {
            x = g.upsample2x(x);
        }
    }

    let act = g.leaky_relu(x, config.leaky_slope);
    let ow = binder.param(g, "generator/out/kernel");
    let ob = binder.param(g, "generator/out/bias");
    let img = g.conv2d(act, ow, ob, 1, 1);
    g.tanh(img)
}

/// Inference wrapper: one latent per batch item, one label slice each.
pub fn generator_forward(
    z: &Array2<f64>,
    masks: &Array4<f64>,
    weights: &ModelWeights,
    config: &ModelConfig,
    exec: Exec,
) -> Result<Array4<f64>> {
    let s = config.image_size;
    if masks.dim().2 != s || masks.dim().3 != s {
        return Err(Error::ShapeMismatch(format!(
            "label maps {:?} vs model size {s}",
            masks.dim()
        )));
    }
    if z.dim().1 != config.latent_dim {
        return Err(Error::ShapeMismatch(format!(
            "latent {:?} vs latent_dim {}",
            z.dim(),
            config.latent_dim
        )));
    }
    let mut g = Graph::new(exec);
    let mut binder = Binder::frozen(weights);
    let zi = g.constant(z.clone().into_dyn());
    let mask_ids: Vec<NodeId> = mask_pyramid(masks, config)
        .into_iter()
        .map(|m| g.constant(m.into_dyn()))
        .collect();
    let out = generator_node(&mut g, &mut binder, zi, &mask_ids, config);
    Ok(g.value(out)
        .clone()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("rank"))
}

/// Build the style encoder: strided convolutions with leaky rectification
/// and no normalization of any kind, then two linear heads.
pub fn encoder_node(
    g: &mut Graph,
    binder: &mut Binder<'_>,
    image: NodeId,
    config: &ModelConfig,
) -> Result<(NodeId, NodeId)> {
    let widths = config.encoder_widths()?;
    let n = g.value(image).shape()[0];
    let mut x = image;
    for (i, _) in widths.iter().enumerate() {
        let wk = binder.param(g, &format!("encoder/conv{i}/kernel"));
        let wb = binder.param(g, &format!("encoder/conv{i}/bias"));
        x = g.conv2d(x, wk, wb, 2, 1);
        x = g.leaky_relu(x, config.leaky_slope);
    }
    let grid = config.encoder_final_grid();
    let flat = widths.last().unwrap() * grid * grid;
    let xf = g.reshape(x, &[n, flat]);

    let mw = binder.param(g, "encoder/mu/weight");
    let mb = binder.param(g, "encoder/mu/bias");
    let mu = g.linear(xf, mw, mb);
    let lw = binder.param(g, "encoder/logvar/weight");
    let lb = binder.param(g, "encoder/logvar/bias");
    let logvar = g.linear(xf, lw, lb);
    Ok((mu, logvar))
}

/// Inference wrapper over [`encoder_node`].
pub fn style_encoder_forward(
    images: &Array4<f64>,
    weights: &ModelWeights,
    config: &ModelConfig,
    exec: Exec,
) -> Result<StyleLatent> {
    if !config.use_vae {
        return Err(Error::NotVaeCheckpoint);
    }
    let s = config.image_size;
    if images.dim().2 != s || images.dim().3 != s || images.dim().1 != 1 {
        return Err(Error::ShapeMismatch(format!(
            "encoder input {:?} vs [N, 1, {s}, {s}]",
            images.dim()
        )));
    }
    let mut g = Graph::new(exec);
    let mut binder = Binder::frozen(weights);
    let xi = g.constant(images.clone().into_dyn());
    let (mu, logvar) = encoder_node(&mut g, &mut binder, xi, config)?;
    Ok(StyleLatent {
        mu: g.value(mu).clone().into_dimensionality().expect("rank"),
        logvar: g.value(logvar).clone().into_dimensionality().expect("rank"),
    })
}

/// z = mu + exp(0.5 * logvar) (.) n with n drawn standard normal.
pub fn reparameterize(latent: &StyleLatent, rng: &mut impl Rng) -> Array2<f64> {
    let noise = standard_normal(latent.mu.dim(), rng);
    &latent.mu + &(latent.logvar.mapv(|lv| (0.5 * lv).exp()) * &noise)
}

/// Deterministic Box-Muller normal draws in row-major order.
pub fn standard_normal(dim: (usize, usize), rng: &mut impl Rng) -> Array2<f64> {
    let n = dim.0 * dim.1;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: f64 = ((rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
        let u2: f64 = ((rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out.push(r * theta.cos());
        if out.len() < n {
            out.push(r * theta.sin());
        }
    }
    Array2::from_shape_vec(dim, out).expect("shape")
}

/// Per-scale discriminator output nodes.
pub struct ScaleNodes {
    pub logits: NodeId,
    pub features: Vec<NodeId>,
}

/// Number of feature maps reported per scale.
pub const FEATURES_PER_SCALE: usize = 3;

/// Build the multiscale patch discriminator on an image/mask pair. Scale k
/// sees the input average-pooled k times; each scale has independent
/// weights and returns its intermediate features for feature matching.
pub fn discriminator_node(
    g: &mut Graph,
    binder: &mut Binder<'_>,
    image: NodeId,
    mask: NodeId,
    config: &ModelConfig,
) -> Vec<ScaleNodes> {
    let widths = config.discriminator_widths();
    let mut input = g.concat_channels(&[image, mask]);
    let mut out = Vec::new();
    for s in 0..config.discriminator_scales {
        if s > 0 {
            input = g.avg_pool2x(input);
        }
        let mut x = input;
        let mut features = Vec::new();
        for (i, _) in widths.iter().enumerate() {
            let wk = binder.param(g, &format!("discriminator/scale{s}/conv{i}/kernel"));
            let wb = binder.param(g, &format!("discriminator/scale{s}/conv{i}/bias"));
            x = g.conv2d(x, wk, wb, 2, 1);
            x = g.leaky_relu(x, config.leaky_slope);
            features.push(x);
        }
        let ok = binder.param(g, &format!("discriminator/scale{s}/out/kernel"));
        let ob = binder.param(g, &format!("discriminator/scale{s}/out/bias"));
        let logits = g.conv2d(x, ok, ob, 1, 1);
        out.push(ScaleNodes { logits, features });
    }
    out
}

/// Inference output of one discriminator scale.
#[derive(Debug, Clone)]
pub struct ScaleOutput {
    pub logits: Array4<f64>,
    pub features: Vec<Array4<f64>>,
}

/// Inference wrapper over [`discriminator_node`].
pub fn discriminator_forward(
    images: &Array4<f64>,
    masks: &Array4<f64>,
    weights: &ModelWeights,
    config: &ModelConfig,
    exec: Exec,
) -> Result<Vec<ScaleOutput>> {
    if images.dim().0 != masks.dim().0
        || images.dim().2 != masks.dim().2
        || images.dim().3 != masks.dim().3
    {
        return Err(Error::ShapeMismatch(format!(
            "images {:?} vs masks {:?}",
            images.dim(),
            masks.dim()
        )));
    }
    let mut g = Graph::new(exec);
    let mut binder = Binder::frozen(weights);
    let ii = g.constant(images.clone().into_dyn());
    let mi = g.constant(masks.clone().into_dyn());
    let scales = discriminator_node(&mut g, &mut binder, ii, mi, config);
    Ok(scales
        .into_iter()
        .map(|s| ScaleOutput {
            logits: g.value(s.logits).clone().into_dimensionality().expect("rank"),
            features: s
                .features
                .iter()
                .map(|&f| g.value(f).clone().into_dimensionality().expect("rank"))
                .collect(),
        })
        .collect())
}

/// Patch-logit spatial size after the three stride-2 convs and the 3x3
/// head, for an input of size `s`.
pub fn discriminator_logit_size(mut s: usize) -> usize {
    for _ in 0..3 {
        s = (s + 2 - 4) / 2 + 1;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{one_hot_batch, ModelWeights};
    use ndarray::Array2;
    use rand::SeedableRng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            num_classes: 4,
            image_size: 16,
            base_channels: 8,
            num_spade_blocks: 3,
            latent_dim: 6,
            use_vae: true,
            modulation_hidden_channels: 6,
            discriminator_scales: 2,
            leaky_slope: 0.2,
        }
    }

    fn labels(n: usize, s: usize, seed: usize) -> Vec<Array2<u8>> {
        (0..n)
            .map(|i| Array2::from_shape_fn((s, s), |(y, x)| ((y / 2 + x / 3 + i + seed) % 4) as u8))
            .collect()
    }

    fn rand_images(n: usize, s: usize, seed: u64) -> Array4<f64> {
        let mut state = seed;
        Array4::from_shape_fn((n, 1, s, s), |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 1.8 - 0.9
        })
    }

    #[test]
    fn generator_output_shape_and_range() {
        let cfg = tiny_config();
        let w = ModelWeights::init(&cfg, 5).unwrap();
        let masks = one_hot_batch(&labels(2, 16, 0), 4).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let z = standard_normal((2, cfg.latent_dim), &mut rng);
        let img = generator_forward(&z, &masks, &w, &cfg, Exec::Sequential).unwrap();
        assert_eq!(img.dim(), (2, 1, 16, 16));
        for &v in img.iter() {
            assert!(v > -1.0 && v < 1.0, "tanh keeps values strictly inside (-1, 1)");
        }
    }

    #[test]
    fn generator_is_deterministic_and_mask_sensitive() {
        let cfg = tiny_config();
        let w = ModelWeights::init(&cfg, 6).unwrap();
        let masks_a = one_hot_batch(&labels(1, 16, 0), 4).unwrap();
        let masks_b = one_hot_batch(&labels(1, 16, 2), 4).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let z = standard_normal((1, cfg.latent_dim), &mut rng);
        let a1 = generator_forward(&z, &masks_a, &w, &cfg, Exec::Sequential).unwrap();
        let a2 = generator_forward(&z, &masks_a, &w, &cfg, Exec::default()).unwrap();
        assert_eq!(a1, a2, "bit-identical across schedules");
        let b = generator_forward(&z, &masks_b, &w, &cfg, Exec::Sequential).unwrap();
        assert_ne!(a1, b, "different label maps give different images");
    }

    #[test]
    fn encoder_shapes_and_spatial_sensitivity() {
        let cfg = tiny_config();
        let w = ModelWeights::init(&cfg, 7).unwrap();
        let img = rand_images(1, 16, 3);
        let lat = style_encoder_forward(&img, &w, &cfg, Exec::Sequential).unwrap();
        assert_eq!(lat.mu.dim(), (1, cfg.latent_dim));
        assert!(lat.mu.iter().all(|v| v.is_finite()));
        assert!(lat.logvar.iter().all(|v| v.is_finite()));

        // Zero out a patch: mu must respond.
        let mut img2 = img.clone();
        for y in 4..12 {
            for x in 4..12 {
                img2[[0, 0, y, x]] = 0.0;
            }
        }
        let lat2 = style_encoder_forward(&img2, &w, &cfg, Exec::Sequential).unwrap();
        let delta: f64 = (&lat.mu - &lat2.mu).iter().map(|d| d * d).sum::<f64>().sqrt();
        assert!(delta > 0.0, "patch perturbation must move mu");

        // Global rescale: no normalization anywhere, so mu must respond.
        let img3 = img.mapv(|v| v * 0.5);
        let lat3 = style_encoder_forward(&img3, &w, &cfg, Exec::Sequential).unwrap();
        let delta3: f64 = (&lat.mu - &lat3.mu).iter().map(|d| d * d).sum::<f64>().sqrt();
        assert!(delta3 > 0.0, "contrast change must move mu");
    }

    #[test]
    fn reparameterize_limits_and_statistics() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let latent = StyleLatent {
            mu: Array2::from_elem((1, 8), 0.7),
            logvar: Array2::from_elem((1, 8), -100.0),
        };
        let z = reparameterize(&latent, &mut rng);
        for &v in z.iter() {
            assert!((v - 0.7).abs() < 1e-15, "zero-variance limit returns mu");
        }

        // Monte-Carlo mean over many draws approaches mu.
        let latent = StyleLatent {
            mu: Array2::from_elem((1, 4), 0.25),
            logvar: Array2::zeros((1, 4)),
        };
        let n = 100_000;
        let mut acc = [0.0f64; 4];
        for _ in 0..n {
            let z = reparameterize(&latent, &mut rng);
            for (a, &v) in acc.iter_mut().zip(z.iter()) {
                *a += v;
            }
        }
        let bound = 3.0 / (n as f64).sqrt();
        for a in acc {
            let mean = a / n as f64;
            assert!((mean - 0.25).abs() < bound, "mean {mean} not within {bound}");
        }
    }

    #[test]
    fn reparameterize_is_deterministic_per_seed() {
        let latent = StyleLatent {
            mu: Array2::zeros((2, 5)),
            logvar: Array2::zeros((2, 5)),
        };
        let mut r1 = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let mut r2 = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        assert_eq!(reparameterize(&latent, &mut r1), reparameterize(&latent, &mut r2));
    }

    #[test]
    fn discriminator_shapes_follow_stride_arithmetic() {
        let cfg = tiny_config();
        let w = ModelWeights::init(&cfg, 8).unwrap();
        let imgs = rand_images(2, 16, 5);
        let masks = one_hot_batch(&labels(2, 16, 1), 4).unwrap();
        let scales = discriminator_forward(&imgs, &masks, &w, &cfg, Exec::Sequential).unwrap();
        assert_eq!(scales.len(), 2);
        let s0 = discriminator_logit_size(16);
        assert_eq!(scales[0].logits.dim(), (2, 1, s0, s0));
        let s1 = discriminator_logit_size(8);
        assert_eq!(scales[1].logits.dim(), (2, 1, s1, s1));
        for s in &scales {
            assert_eq!(s.features.len(), FEATURES_PER_SCALE);
        }
    }
}
