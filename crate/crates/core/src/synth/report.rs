//! Coherence metrics over a synthetic dataset: per-class intensity
//! statistics under the label masks, plus mean structural similarity
//! between adjacent frames and adjacent slices against a shuffled-pair
//! baseline.

use ndarray::ArrayView2;
use rand::RngExt;

use crate::error::{Error, Result};
use crate::train::rng_from_seed;
use crate::volume::NUM_CLASSES;

use super::SyntheticDataset;

/// Mean SSIM between two equally sized grids with a 7x7 uniform window,
/// for intensities in [-1, 1] (dynamic range 2).
pub fn ssim(a: &ArrayView2<'_, f64>, b: &ArrayView2<'_, f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    const WIN: usize = 7;
    let (h, w) = a.dim();
    assert!(h >= WIN && w >= WIN, "grids too small for the SSIM window");
    let c1 = (0.01f64 * 2.0).powi(2);
    let c2 = (0.03f64 * 2.0).powi(2);
    let n = (WIN * WIN) as f64;

    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=(h - WIN) {
        for x0 in 0..=(w - WIN) {
            let mut sa = 0.0;
            let mut sb = 0.0;
            let mut saa = 0.0;
            let mut sbb = 0.0;
            let mut sab = 0.0;
            for y in y0..y0 + WIN {
                for x in x0..x0 + WIN {
                    let va = a[[y, x]];
                    let vb = b[[y, x]];
                    sa += va;
                    sb += vb;
                    saa += va * va;
                    sbb += vb * vb;
                    sab += va * vb;
                }
            }
            let ma = sa / n;
            let mb = sb / n;
            let va = (saa / n - ma * ma).max(0.0);
            let vb = (sbb / n - mb * mb).max(0.0);
            let cov = sab / n - ma * mb;
            let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            total += s;
            count += 1;
        }
    }
    total / count as f64
}

/// Per-class intensity statistics.
#[derive(Debug, Clone, Copy, Default)]
pub struct ClassStats {
    pub voxels: usize,
    pub mean: f64,
    pub std: f64,
}

/// Everything [`coherence_report`] measures.
#[derive(Debug, Clone)]
pub struct CoherenceReport {
    pub class_stats: [ClassStats; NUM_CLASSES],
    pub adjacent_frame_ssim: f64,
    pub adjacent_slice_ssim: f64,
    pub shuffled_frame_ssim: f64,
    pub shuffled_slice_ssim: f64,
    pub shuffled_pairs: usize,
}

impl CoherenceReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("class\tvoxels\tmean\tstd\n");
        for (c, s) in self.class_stats.iter().enumerate() {
            out.push_str(&format!("{c}\t{}\t{:.6}\t{:.6}\n", s.voxels, s.mean, s.std));
        }
        out.push_str(&format!(
            "adjacent_frame_ssim\t{:.6}\nadjacent_slice_ssim\t{:.6}\n",
            self.adjacent_frame_ssim, self.adjacent_slice_ssim
        ));
        out.push_str(&format!(
            "shuffled_frame_ssim\t{:.6}\nshuffled_slice_ssim\t{:.6}\nshuffled_pairs\t{}\n",
            self.shuffled_frame_ssim, self.shuffled_slice_ssim, self.shuffled_pairs
        ));
        out
    }
}

/// Number of random non-adjacent pairs in each shuffled baseline.
pub const BASELINE_PAIRS: usize = 128;

/// Quantify cross-frame and cross-slice coherence of the synthetic images.
/// Needs at least 2 frames and 2 slices.
pub fn coherence_report(dataset: &SyntheticDataset) -> Result<CoherenceReport> {
    let (nt, nz) = (dataset.labels.num_frames(), dataset.labels.num_slices());
    if nt < 2 || nz < 2 {
        return Err(Error::msg(format!(
            "coherence report needs >= 2 frames and >= 2 slices, got {nt} x {nz}"
        )));
    }

    // Per-class intensity statistics under the label masks.
    let mut sums = [0.0f64; NUM_CLASSES];
    let mut sq = [0.0f64; NUM_CLASSES];
    let mut counts = [0usize; NUM_CLASSES];
    for (v, &l) in dataset.images.iter().zip(dataset.labels.data.iter()) {
        let c = l as usize;
        sums[c] += v;
        sq[c] += v * v;
        counts[c] += 1;
    }
    let mut class_stats = [ClassStats::default(); NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        if counts[c] > 0 {
            let mean = sums[c] / counts[c] as f64;
            let var = (sq[c] / counts[c] as f64 - mean * mean).max(0.0);
            class_stats[c] = ClassStats {
                voxels: counts[c],
                mean,
                std: var.sqrt(),
            };
        }
    }

    let frame_img = |t: usize, z: usize| {
        dataset
            .images
            .index_axis(ndarray::Axis(0), t)
            .index_axis_move(ndarray::Axis(0), z)
    };

    // Adjacent frames at every fixed slice.
    let mut acc = 0.0;
    let mut n = 0usize;
    for z in 0..nz {
        for t in 0..nt - 1 {
            acc += ssim(&frame_img(t, z).view(), &frame_img(t + 1, z).view());
            n += 1;
        }
    }
    let adjacent_frame_ssim = acc / n as f64;

    // Adjacent slices at every fixed frame.
    let mut acc = 0.0;
    let mut n = 0usize;
    for t in 0..nt {
        for z in 0..nz - 1 {
            acc += ssim(&frame_img(t, z).view(), &frame_img(t, z + 1).view());
            n += 1;
        }
    }
    let adjacent_slice_ssim = acc / n as f64;

    // Shuffled baselines: random non-adjacent pairs, seeded. Axes too
    // short to have non-adjacent pairs fall back to distinct pairs.
    let mut rng = rng_from_seed(0xc0_4e7a);
    let min_gap_t = if nt >= 3 { 2 } else { 1 };
    let min_gap_z = if nz >= 3 { 2 } else { 1 };
    let mut acc_f = 0.0;
    let mut drawn_f = 0usize;
    while drawn_f < BASELINE_PAIRS {
        let z = rng.random_range(0..nz);
        let t1 = rng.random_range(0..nt);
        let t2 = rng.random_range(0..nt);
        if (t1 as i64 - t2 as i64).abs() < min_gap_t {
            continue;
        }
        acc_f += ssim(&frame_img(t1, z).view(), &frame_img(t2, z).view());
        drawn_f += 1;
    }
    let mut acc_s = 0.0;
    let mut drawn_s = 0usize;
    while drawn_s < BASELINE_PAIRS {
        let t = rng.random_range(0..nt);
        let z1 = rng.random_range(0..nz);
        let z2 = rng.random_range(0..nz);
        if (z1 as i64 - z2 as i64).abs() < min_gap_z {
            continue;
        }
        acc_s += ssim(&frame_img(t, z1).view(), &frame_img(t, z2).view());
        drawn_s += 1;
    }

    Ok(CoherenceReport {
        class_stats,
        adjacent_frame_ssim,
        adjacent_slice_ssim,
        shuffled_frame_ssim: acc_f / BASELINE_PAIRS as f64,
        shuffled_slice_ssim: acc_s / BASELINE_PAIRS as f64,
        shuffled_pairs: BASELINE_PAIRS,
    })
}
