//! In-plane resampling, center cropping and intensity normalization.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::exec::{self, Exec};

/// (image, mask, updated (row, col, slice) spacing).
pub type ResampledPair = (Array3<f64>, Array3<u8>, (f64, f64, f64));

/// Resample both grids in-plane to `target_spacing` mm/pixel, bilinear for
/// the image and nearest-neighbor for the mask. The slice axis is left
/// untouched. Output sizes are `round(n_in * s_in / s_out)` per axis and
/// grids stay center-aligned.
pub fn resample_inplane(
    image: &Array3<f64>,
    mask: &Array3<u8>,
    spacing: (f64, f64, f64),
    target_spacing: f64,
    exec: Exec,
) -> Result<ResampledPair> {
    let (row_mm, col_mm, slice_mm) = spacing;
    if row_mm <= 0.0 || col_mm <= 0.0 || target_spacing <= 0.0 {
        return Err(Error::msg(format!(
            "non-positive spacing: rows {row_mm} mm, cols {col_mm} mm, target {target_spacing} mm"
        )));
    }
    if image.dim() != mask.dim() {
        return Err(Error::ShapeMismatch(format!(
            "image {:?} vs mask {:?}",
            image.dim(),
            mask.dim()
        )));
    }
    let (nz, h_in, w_in) = image.dim();
    let h_out = ((h_in as f64 * row_mm / target_spacing).round() as usize).max(1);
    let w_out = ((w_in as f64 * col_mm / target_spacing).round() as usize).max(1);

    // Center-aligned index mapping: output pixel i sits at physical
    // (i - (n_out-1)/2) * s_out, sampled from the input at the matching
    // physical position.
    let src_row = |i: usize| -> f64 {
        (i as f64 - (h_out as f64 - 1.0) / 2.0) * target_spacing / row_mm
            + (h_in as f64 - 1.0) / 2.0
    };
    let src_col = |j: usize| -> f64 {
        (j as f64 - (w_out as f64 - 1.0) / 2.0) * target_spacing / col_mm
            + (w_in as f64 - 1.0) / 2.0
    };

    let img_src = image.as_standard_layout();
    let img_slice = img_src.as_slice().expect("standard layout");
    let msk_src = mask.as_standard_layout();
    let msk_slice = msk_src.as_slice().expect("standard layout");

    let mut out_img = vec![0f64; nz * h_out * w_out];
    exec::for_each_chunk_mut(&mut out_img, h_out * w_out, exec, |z, plane| {
        let src = &img_slice[z * h_in * w_in..(z + 1) * h_in * w_in];
        for i in 0..h_out {
            let fy = src_row(i).clamp(0.0, h_in as f64 - 1.0);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h_in - 1);
            let wy = fy - y0 as f64;
            for j in 0..w_out {
                let fx = src_col(j).clamp(0.0, w_in as f64 - 1.0);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w_in - 1);
                let wx = fx - x0 as f64;
                let v00 = src[y0 * w_in + x0];
                let v01 = src[y0 * w_in + x1];
                let v10 = src[y1 * w_in + x0];
                let v11 = src[y1 * w_in + x1];
                plane[i * w_out + j] = v00 * (1.0 - wy) * (1.0 - wx)
                    + v01 * (1.0 - wy) * wx
                    + v10 * wy * (1.0 - wx)
                    + v11 * wy * wx;
            }
        }
    });

    let mut out_msk = vec![0u8; nz * h_out * w_out];
    exec::for_each_chunk_mut(&mut out_msk, h_out * w_out, exec, |z, plane| {
        let src = &msk_slice[z * h_in * w_in..(z + 1) * h_in * w_in];
        for i in 0..h_out {
            let fy = src_row(i).clamp(0.0, h_in as f64 - 1.0);
            let y = (fy + 0.5).floor() as usize;
            let y = y.min(h_in - 1);
            for j in 0..w_out {
                let fx = src_col(j).clamp(0.0, w_in as f64 - 1.0);
                let x = ((fx + 0.5).floor() as usize).min(w_in - 1);
                plane[i * w_out + j] = src[y * w_in + x];
            }
        }
    });

    Ok((
        Array3::from_shape_vec((nz, h_out, w_out), out_img).expect("shape"),
        Array3::from_shape_vec((nz, h_out, w_out), out_msk).expect("shape"),
        (target_spacing, target_spacing, slice_mm),
    ))
}

/// Offsets and padding for a centered crop of `n_in` down/up to `size`.
/// Inputs smaller than `size` are padded symmetrically first (extra pixel
/// goes to the trailing side).
fn crop_bounds(n_in: usize, size: usize) -> (usize, usize) {
    if n_in >= size {
        ((n_in - size) / 2, 0)
    } else {
        (0, (size - n_in) / 2)
    }
}

/// Spatially centered `size x size` crop of both grids. Smaller inputs are
/// zero-padded (image) / background-padded (mask) symmetrically.
pub fn center_crop(
    image: &Array3<f64>,
    mask: &Array3<u8>,
    size: usize,
) -> (Array3<f64>, Array3<u8>) {
    let (nz, h_in, w_in) = image.dim();
    let (off_y, pad_y) = crop_bounds(h_in, size);
    let (off_x, pad_x) = crop_bounds(w_in, size);

    let mut out_img = Array3::<f64>::zeros((nz, size, size));
    let mut out_msk = Array3::<u8>::zeros((nz, size, size));
    for z in 0..nz {
        for i in 0..size {
            let (src_y, dst_y) = if h_in >= size {
                (i + off_y, i)
            } else {
                if i >= h_in {
                    continue;
                }
                (i, i + pad_y)
            };
            for j in 0..size {
                let (src_x, dst_x) = if w_in >= size {
                    (j + off_x, j)
                } else {
                    if j >= w_in {
                        continue;
                    }
                    (j, j + pad_x)
                };
                out_img[[z, dst_y, dst_x]] = image[[z, src_y, src_x]];
                out_msk[[z, dst_y, dst_x]] = mask[[z, src_y, src_x]];
            }
        }
    }
    (out_img, out_msk)
}

/// How intensities are mapped into [-1, 1].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityMode {
    /// Clip at per-volume 1st/99th percentile order statistics, then map
    /// that window onto [-1, 1].
    Percentile,
    /// Plain min-max mapping.
    MinMax,
}

/// Order-statistic percentile: the value at index floor(p/100 * (n-1)) of
/// the sorted data for the low tail, ceil for the high tail. Taking actual
/// order statistics (rather than interpolating) makes the scale operation
/// exactly idempotent.
fn percentile_bounds(values: &[f64], lo_pct: f64, hi_pct: f64) -> (f64, f64) {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite intensities"));
    let n = sorted.len();
    let lo_idx = ((lo_pct / 100.0) * (n as f64 - 1.0)).floor() as usize;
    let hi_idx = ((hi_pct / 100.0) * (n as f64 - 1.0)).ceil() as usize;
    (sorted[lo_idx], sorted[hi_idx.min(n - 1)])
}

/// Map a volume into [-1, 1]: clip at the per-volume intensity window, then
/// apply the affine map window -> [-1, 1]. Errors on constant volumes.
pub fn scale_intensity(image: &Array3<f64>, mode: IntensityMode) -> Result<Array3<f64>> {
    let flat = image.as_standard_layout();
    let values = flat.as_slice().expect("standard layout");
    let (lo, hi) = match mode {
        IntensityMode::Percentile => percentile_bounds(values, 1.0, 99.0),
        IntensityMode::MinMax => values.iter().fold(
            (f64::INFINITY, f64::NEG_INFINITY),
            |(lo, hi), &v| (lo.min(v), hi.max(v)),
        ),
    };
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::DegenerateIntensity);
    }
    let scale = 2.0 / (hi - lo);
    Ok(image.mapv(|v| ((v.clamp(lo, hi) - lo) * scale - 1.0).clamp(-1.0, 1.0)))
}

/// One 2D slice of both grids.
pub fn split_slices(image: &Array3<f64>, mask: &Array3<u8>) -> Vec<(Array2<f64>, Array2<u8>)> {
    (0..image.dim().0)
        .map(|z| {
            (
                image.index_axis(ndarray::Axis(0), z).to_owned(),
                mask.index_axis(ndarray::Axis(0), z).to_owned(),
            )
        })
        .collect()
}
