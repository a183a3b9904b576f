//! Hinge adversarial losses, discriminator feature matching, optional
//! perceptual term and the KL penalty for the style encoder.

use ndarray::Array2;

use super::graph::{Graph, NodeId};
use super::nets::ScaleNodes;

/// Loss weights. The perceptual extractor is pluggable and disabled unless
/// one is supplied to the training step.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_fm: f64,
    pub lambda_perceptual: f64,
    pub lambda_kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_fm: 10.0,
            lambda_perceptual: 10.0,
            lambda_kl: 0.05,
        }
    }
}

/// A pre-trained feature extractor for the perceptual term. Implementors
/// build their feature maps in the same graph so gradients flow.
pub trait PerceptualFeatures {
    fn build(&self, g: &mut Graph, images: NodeId) -> Vec<NodeId>;
}

/// Scalar loss nodes assembled by [`generator_loss_nodes`] /
/// [`discriminator_loss_node`].
pub struct LossTerms {
    pub g_adv: NodeId,
    pub feature_match: NodeId,
    pub perceptual: Option<NodeId>,
    pub kl: Option<NodeId>,
    pub total: NodeId,
}

/// Hinge discriminator loss, averaged over scales:
/// mean(max(0, 1 - D(real))) + mean(max(0, 1 + D(fake))).
pub fn discriminator_loss_node(
    g: &mut Graph,
    real_scales: &[ScaleNodes],
    fake_scales: &[ScaleNodes],
) -> NodeId {
    let mut parts = Vec::new();
    for (r, f) in real_scales.iter().zip(fake_scales) {
        let neg_r = g.affine(r.logits, -1.0, 1.0); // 1 - D(real)
        let hinge_r = g.relu(neg_r);
        let m_r = g.mean_all(hinge_r);
        let pos_f = g.affine(f.logits, 1.0, 1.0); // 1 + D(fake)
        let hinge_f = g.relu(pos_f);
        let m_f = g.mean_all(hinge_f);
        parts.push(g.add(m_r, m_f));
    }
    g.mean_of(&parts)
}

/// Generator-side losses: adversarial term, feature matching between real
/// and fake discriminator features, optional perceptual term, optional KL.
#[allow(clippy::too_many_arguments)]
pub fn generator_loss_nodes(
    g: &mut Graph,
    fake_scales: &[ScaleNodes],
    real_scales: &[ScaleNodes],
    fake_images: NodeId,
    real_images: NodeId,
    latent: Option<(NodeId, NodeId)>,
    perceptual: Option<(&dyn PerceptualFeatures, f64)>,
    weights: &LossWeights,
) -> LossTerms {
    // g_adv = -mean(D(fake)), averaged over scales.
    let adv_parts: Vec<NodeId> = fake_scales
        .iter()
        .map(|s| {
            let m = g.mean_all(s.logits);
            g.affine(m, -1.0, 0.0)
        })
        .collect();
    let g_adv = g.mean_of(&adv_parts);

    // Feature matching: mean over scales and layers of L1 distances.
    let mut fm_parts = Vec::new();
    for (f, r) in fake_scales.iter().zip(real_scales) {
        for (&ff, &rf) in f.features.iter().zip(r.features.iter()) {
            let diff = g.sub(ff, rf);
            let l1 = g.abs(diff);
            fm_parts.push(g.mean_all(l1));
        }
    }
    let feature_match = g.mean_of(&fm_parts);

    // Perceptual term between pluggable extractor features.
    let perceptual_node = perceptual.map(|(extractor, _)| {
        let fake_feats = extractor.build(g, fake_images);
        let real_feats = extractor.build(g, real_images);
        let parts: Vec<NodeId> = fake_feats
            .iter()
            .zip(real_feats.iter())
            .map(|(&ff, &rf)| {
                let diff = g.sub(ff, rf);
                let l1 = g.abs(diff);
                g.mean_all(l1)
            })
            .collect();
        g.mean_of(&parts)
    });

    // kl = -0.5 * sum(1 + logvar - mu^2 - exp(logvar)), mean over batch.
    let kl_node = latent.map(|(mu, logvar)| kl_node(g, mu, logvar));

    let fm_scaled = g.affine(feature_match, weights.lambda_fm, 0.0);
    let mut total = g.add(g_adv, fm_scaled);
    if let Some(p) = perceptual_node {
        let p_scaled = g.affine(p, weights.lambda_perceptual, 0.0);
        total = g.add(total, p_scaled);
    }
    if let Some(k) = kl_node {
        let k_scaled = g.affine(k, weights.lambda_kl, 0.0);
        total = g.add(total, k_scaled);
    }

    LossTerms {
        g_adv,
        feature_match,
        perceptual: perceptual_node,
        kl: kl_node,
        total,
    }
}

/// KL divergence of N(mu, exp(logvar)) from N(0, I), summed over the
/// latent dimension and averaged over the batch.
pub fn kl_node(g: &mut Graph, mu: NodeId, logvar: NodeId) -> NodeId {
    let batch = g.value(mu).shape()[0] as f64;
    let one_plus = g.affine(logvar, 1.0, 1.0);
    let mu2 = g.square(mu);
    let exp_lv = g.exp(logvar);
    let a = g.sub(one_plus, mu2);
    let inner = g.sub(a, exp_lv);
    let total = g.sum_all(inner);
    g.affine(total, -0.5 / batch, 0.0)
}

/// Closed-form KL for plain arrays (inference-side checks and reports).
pub fn kl_value(mu: &Array2<f64>, logvar: &Array2<f64>) -> f64 {
    let batch = mu.dim().0 as f64;
    let sum: f64 = mu
        .iter()
        .zip(logvar.iter())
        .map(|(&m, &lv)| 1.0 + lv - m * m - lv.exp())
        .sum();
    -0.5 * sum / batch
}

/// Convenience container for the scalar values of one loss evaluation.
#[derive(Debug, Clone, Copy, Default, serde::Serialize)]
pub struct LossValues {
    pub d_loss: f64,
    pub g_adv: f64,
    pub feature_match: f64,
    pub perceptual: f64,
    pub kl: f64,
    pub g_total: f64,
    pub l1_to_real: f64,
}

/// Array-level loss suite on precomputed discriminator outputs, mirroring
/// the graph-side forms; used for reporting and closed-form checks.
pub fn loss_suite(
    real_logits: &[ndarray::Array4<f64>],
    fake_logits: &[ndarray::Array4<f64>],
    real_features: &[Vec<ndarray::Array4<f64>>],
    fake_features: &[Vec<ndarray::Array4<f64>>],
    latent: Option<(&Array2<f64>, &Array2<f64>)>,
    weights: &LossWeights,
) -> LossValues {
    let mean = |a: &ndarray::Array4<f64>| a.iter().sum::<f64>() / a.len() as f64;

    let mut d_loss = 0.0;
    let mut g_adv = 0.0;
    for (r, f) in real_logits.iter().zip(fake_logits) {
        let hinge_r = r.mapv(|v| (1.0 - v).max(0.0));
        let hinge_f = f.mapv(|v| (1.0 + v).max(0.0));
        d_loss += mean(&hinge_r) + mean(&hinge_f);
        g_adv += -mean(f);
    }
    d_loss /= real_logits.len() as f64;
    g_adv /= real_logits.len() as f64;

    let mut fm_parts = Vec::new();
    for (fs, rs) in fake_features.iter().zip(real_features) {
        for (ff, rf) in fs.iter().zip(rs.iter()) {
            let diff = ff - rf;
            fm_parts.push(diff.mapv(f64::abs).iter().sum::<f64>() / diff.len() as f64);
        }
    }
    let feature_match = if fm_parts.is_empty() {
        0.0
    } else {
        fm_parts.iter().sum::<f64>() / fm_parts.len() as f64
    };

    let kl = latent.map(|(mu, lv)| kl_value(mu, lv)).unwrap_or(0.0);
    let g_total = g_adv + weights.lambda_fm * feature_match + weights.lambda_kl * kl;

    LossValues {
        d_loss,
        g_adv,
        feature_match,
        perceptual: 0.0,
        kl,
        g_total,
        l1_to_real: 0.0,
    }
}
