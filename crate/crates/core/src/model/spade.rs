//! Spatially-adaptive normalization: activations are normalized per
//! channel over the whole batch, then modulated with a learned scale and
//! bias that are themselves spatial maps computed from the segmentation
//! mask. The (1 + gamma) form makes zero-initialized modulation heads an
//! exact identity on the normalized activations.

use ndarray::Array4;

use crate::exec::Exec;

use super::graph::{Graph, NodeId};
use super::{Binder, ModelWeights, NORM_EPS};

/// Graph builder: `out = xhat * (1 + gamma(mask)) + beta(mask)` where
/// gamma/beta come from a shared hidden conv plus two head convs, all 3x3.
/// `mask` must already be resized to the activation resolution.
pub fn spade_normalize_node(
    g: &mut Graph,
    binder: &mut Binder<'_>,
    x: NodeId,
    mask: NodeId,
    prefix: &str,
) -> NodeId {
    let xn = g.channel_norm(x, NORM_EPS);

    let hk = binder.param(g, &format!("{prefix}/hidden/kernel"));
    let hb = binder.param(g, &format!("{prefix}/hidden/bias"));
    let hidden = g.conv2d(mask, hk, hb, 1, 1);
    let hidden = g.relu(hidden);

    let gk = binder.param(g, &format!("{prefix}/gamma/kernel"));
    let gb = binder.param(g, &format!("{prefix}/gamma/bias"));
    let gamma = g.conv2d(hidden, gk, gb, 1, 1);

    let bk = binder.param(g, &format!("{prefix}/beta/kernel"));
    let bb = binder.param(g, &format!("{prefix}/beta/bias"));
    let beta = g.conv2d(hidden, bk, bb, 1, 1);

    let scaled = g.mul(xn, gamma);
    let with_scale = g.add(xn, scaled);
    g.add(with_scale, beta)
}

/// Residual block with mask-modulated normalization: two
/// (normalize -> leaky rectify -> conv) stages plus a learned skip
/// (normalize -> 1x1 conv) when the channel count changes.
#[allow(clippy::too_many_arguments)]
pub fn spade_resblock_node(
    g: &mut Graph,
    binder: &mut Binder<'_>,
    x: NodeId,
    mask: NodeId,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    slope: f64,
) -> NodeId {
    let n1 = spade_normalize_node(g, binder, x, mask, &format!("{prefix}/norm1"));
    let a1 = g.leaky_relu(n1, slope);
    let w1 = binder.param(g, &format!("{prefix}/conv1/kernel"));
    let b1 = binder.param(g, &format!("{prefix}/conv1/bias"));
    let h = g.conv2d(a1, w1, b1, 1, 1);

    let n2 = spade_normalize_node(g, binder, h, mask, &format!("{prefix}/norm2"));
    let a2 = g.leaky_relu(n2, slope);
    let w2 = binder.param(g, &format!("{prefix}/conv2/kernel"));
    let b2 = binder.param(g, &format!("{prefix}/conv2/bias"));
    let main = g.conv2d(a2, w2, b2, 1, 1);

    let skip = if c_in == c_out {
        x
    } else {
        let ns = spade_normalize_node(g, binder, x, mask, &format!("{prefix}/norms"));
        let ws = binder.param(g, &format!("{prefix}/skip/kernel"));
        let bs = binder.param(g, &format!("{prefix}/skip/bias"));
        g.conv2d(ns, ws, bs, 1, 0)
    };
    g.add(main, skip)
}

/// Standalone forward pass of one normalization layer, for inspection and
/// tests: `x` is `[N, C, H, W]`, `mask` a one-hot stack already at (H, W).
pub fn spade_normalize(
    x: &Array4<f64>,
    mask: &Array4<f64>,
    weights: &ModelWeights,
    prefix: &str,
    exec: Exec,
) -> crate::Result<Array4<f64>> {
    if mask.dim().2 != x.dim().2 || mask.dim().3 != x.dim().3 {
        return Err(crate::Error::ShapeMismatch(format!(
            "mask {:?} vs activations {:?}",
            mask.dim(),
            x.dim()
        )));
    }
    let mut g = Graph::new(exec);
    let mut binder = Binder::frozen(weights);
    let xi = g.constant(x.clone().into_dyn());
    let mi = g.constant(mask.clone().into_dyn());
    let out = spade_normalize_node(&mut g, &mut binder, xi, mi, prefix);
    Ok(g.value(out)
        .clone()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("rank"))
}
