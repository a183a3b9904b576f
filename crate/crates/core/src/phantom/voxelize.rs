//! Rasterization of the implicit heart surfaces onto the label grid.

use ndarray::{Array3, Array4};

use crate::error::Result;
use crate::exec::{self, Exec};
use crate::volume::LabelVolume4D;

use super::geometry::PhantomModel;
use super::PhantomParams;

/// Voxelize one frame into `[slices, height, width]` class ids.
///
/// Voxel class is decided by a containment test at the voxel center;
/// precedence LV pool > myocardium > RV pool > background. The result is a
/// pure function of the parameters; the execution mode only changes the
/// schedule, never the bytes.
pub fn voxelize_frame_with(
    params: &PhantomParams,
    frame_index: usize,
    exec: Exec,
) -> Result<Array3<u8>> {
    let params = params.validate()?;
    let model = PhantomModel::new(&params)?;
    voxelize_frame_inner(&params, &model, frame_index, exec)
}

pub(crate) fn voxelize_frame_inner(
    params: &PhantomParams,
    model: &PhantomModel,
    frame_index: usize,
    exec: Exec,
) -> Result<Array3<u8>> {
    if frame_index >= params.num_frames {
        return Err(crate::error::Error::IndexOutOfRange(format!(
            "frame {frame_index} of {}",
            params.num_frames
        )));
    }
    let t_fraction = frame_index as f64 / params.num_frames as f64;
    let geom = model.frame_geometry(params, frame_index, t_fraction)?;

    let n = params.grid_size;
    let ip = params.in_plane_spacing;
    let (cx, cy) = model.grid_center;
    let half = (n as f64 - 1.0) / 2.0;

    let mut data = vec![0u8; params.num_slices * n * n];
    let slice_z = model.slice_z.clone();
    exec::for_each_chunk_mut(&mut data, n * n, exec, |slice_idx, plane| {
        let z = slice_z[slice_idx];
        for iy in 0..n {
            let y = (iy as f64 - half) * ip + cy;
            for ix in 0..n {
                let x = (ix as f64 - half) * ip + cx;
                plane[iy * n + ix] = geom.classify([x, y, z]);
            }
        }
    });

    Ok(Array3::from_shape_vec((params.num_slices, n, n), data).expect("shape"))
}

/// Voxelize every frame of the cycle into a [`LabelVolume4D`].
pub fn generate_label_sequence_with(params: &PhantomParams, exec: Exec) -> Result<LabelVolume4D> {
    let params = params.validate()?;
    let model = PhantomModel::new(&params)?;

    let frames: Vec<Result<Array3<u8>>> = exec::map_collect(params.num_frames, exec, |k| {
        voxelize_frame_inner(&params, &model, k, exec)
    });

    let n = params.grid_size;
    let mut data = Array4::<u8>::zeros((params.num_frames, params.num_slices, n, n));
    for (k, frame) in frames.into_iter().enumerate() {
        data.index_axis_mut(ndarray::Axis(0), k).assign(&frame?);
    }

    let frame_times = (0..params.num_frames)
        .map(|k| k as f64 * params.cycle_length / params.num_frames as f64)
        .collect();

    Ok(LabelVolume4D {
        data,
        in_plane_spacing: params.in_plane_spacing,
        slice_spacing: model.slice_spacing,
        frame_times,
    })
}
