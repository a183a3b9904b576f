//! Figure-style montages: a two-row grid (label maps over synthetic
//! images) across time or slice, as PNG, with an optional animated GIF
//! over time.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

use super::SyntheticDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MontageAxis {
    /// Vary the frame at a fixed slice.
    Time,
    /// Vary the slice at a fixed frame.
    Slice,
}

impl std::str::FromStr for MontageAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "time" => Ok(MontageAxis::Time),
            "slice" => Ok(MontageAxis::Slice),
            other => Err(Error::msg(format!(
                "unknown montage axis {other:?} (expected time or slice)"
            ))),
        }
    }
}

pub const GUTTER: usize = 2;

fn label_to_gray(v: u8) -> u8 {
    v.saturating_mul(85)
}

fn image_to_gray(v: f64) -> u8 {
    (((v + 1.0) * 0.5).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Pixel dimensions of a 2 x n grid of s x s cells with gutters.
pub fn grid_dimensions(n_cells: usize, cell: usize) -> (usize, usize) {
    (
        n_cells * cell + (n_cells + 1) * GUTTER,
        2 * cell + 3 * GUTTER,
    )
}

fn write_png(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let file = std::fs::File::create(path)?;
    let w = std::io::BufWriter::new(file);
    let mut encoder = png::Encoder::new(w, width as u32, height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| Error::msg(e.to_string()))?;
    writer
        .write_image_data(pixels)
        .map_err(|e| Error::msg(e.to_string()))?;
    Ok(())
}

fn blit(canvas: &mut [u8], canvas_w: usize, x0: usize, y0: usize, cell: &Array2<u8>) {
    let (h, w) = cell.dim();
    for y in 0..h {
        for x in 0..w {
            canvas[(y0 + y) * canvas_w + x0 + x] = cell[[y, x]];
        }
    }
}

/// Selected (frame, slice) index pairs for a montage.
fn montage_indices(
    dataset: &SyntheticDataset,
    axis: MontageAxis,
    fixed_index: usize,
    count: Option<usize>,
) -> Result<Vec<(usize, usize)>> {
    let (nt, nz) = (dataset.labels.num_frames(), dataset.labels.num_slices());
    match axis {
        MontageAxis::Time => {
            if fixed_index >= nz {
                return Err(Error::IndexOutOfRange(format!("slice {fixed_index} of {nz}")));
            }
            let n = count.unwrap_or(nt).min(nt);
            Ok((0..n).map(|t| (t, fixed_index)).collect())
        }
        MontageAxis::Slice => {
            if fixed_index >= nt {
                return Err(Error::IndexOutOfRange(format!("frame {fixed_index} of {nt}")));
            }
            let n = count.unwrap_or(nz).min(nz);
            Ok((0..n).map(|z| (fixed_index, z)).collect())
        }
    }
}

/// Render the 2 x N grid (labels over images) and write it as a grayscale
/// PNG. Returns the number of columns.
pub fn render_montage(
    dataset: &SyntheticDataset,
    axis: MontageAxis,
    fixed_index: usize,
    count: Option<usize>,
    path: impl AsRef<Path>,
) -> Result<usize> {
    let cells = montage_indices(dataset, axis, fixed_index, count)?;
    let s = dataset.labels.height();
    let (width, height) = grid_dimensions(cells.len(), s);
    let mut canvas = vec![255u8; width * height];

    for (col, &(t, z)) in cells.iter().enumerate() {
        let x0 = GUTTER + col * (s + GUTTER);
        let label = dataset
            .labels
            .data
            .index_axis(ndarray::Axis(0), t)
            .index_axis_move(ndarray::Axis(0), z)
            .mapv(label_to_gray);
        blit(&mut canvas, width, x0, GUTTER, &label);
        let image = dataset
            .images
            .index_axis(ndarray::Axis(0), t)
            .index_axis_move(ndarray::Axis(0), z)
            .mapv(image_to_gray);
        blit(&mut canvas, width, x0, 2 * GUTTER + s, &image);
    }

    write_png(path.as_ref(), width, height, &canvas)?;
    Ok(cells.len())
}

/// Animated GIF over time at a fixed slice: each frame stacks the label
/// map over the synthetic image.
pub fn render_gif(dataset: &SyntheticDataset, slice: usize, path: impl AsRef<Path>) -> Result<()> {
    let nz = dataset.labels.num_slices();
    if slice >= nz {
        return Err(Error::IndexOutOfRange(format!("slice {slice} of {nz}")));
    }
    let s = dataset.labels.height();
    let (width, height) = (s + 2 * GUTTER, 2 * s + 3 * GUTTER);

    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut palette = Vec::with_capacity(256 * 3);
    for v in 0..=255u8 {
        palette.extend_from_slice(&[v, v, v]);
    }
    let file = std::fs::File::create(path)?;
    let mut encoder = gif::Encoder::new(file, width as u16, height as u16, &palette)
        .map_err(|e| Error::msg(e.to_string()))?;
    encoder
        .set_repeat(gif::Repeat::Infinite)
        .map_err(|e| Error::msg(e.to_string()))?;

    let nt = dataset.labels.num_frames();
    let dt_cs = if dataset.labels.frame_times.len() >= 2 {
        ((dataset.labels.frame_times[1] - dataset.labels.frame_times[0]) * 100.0).round() as u16
    } else {
        4
    };
    for t in 0..nt {
        let mut canvas = vec![255u8; width * height];
        let label = dataset
            .labels
            .data
            .index_axis(ndarray::Axis(0), t)
            .index_axis_move(ndarray::Axis(0), slice)
            .mapv(label_to_gray);
        blit(&mut canvas, width, GUTTER, GUTTER, &label);
        let image = dataset
            .images
            .index_axis(ndarray::Axis(0), t)
            .index_axis_move(ndarray::Axis(0), slice)
            .mapv(image_to_gray);
        blit(&mut canvas, width, GUTTER, 2 * GUTTER + s, &image);
        let mut frame = gif::Frame::from_indexed_pixels(width as u16, height as u16, canvas, None);
        frame.delay = dt_cs.max(2);
        encoder.write_frame(&frame).map_err(|e| Error::msg(e.to_string()))?;
    }
    Ok(())
}
