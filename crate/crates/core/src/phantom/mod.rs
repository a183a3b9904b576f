//! Controllable 4D voxelized heart label generator.
//!
//! A compact parameter set (cycle length, five-phase cavity volumes, phase
//! timing, wall volume, geometry and grid spec) drives an analytic
//! implicit-surface heart whose short-axis label maps serve as synthesis
//! ground truth. All operations are pure functions of their inputs and
//! deterministic regardless of the parallel schedule.

mod curve;
mod geometry;
mod voxelize;

pub use curve::VolumeCurve;
pub use geometry::{solve_endo_scale, Ellipsoid, FrameGeometry, PhantomModel};
pub use voxelize::{generate_label_sequence_with, voxelize_frame_with};

use ndarray::{Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::volume::{LabelVolume4D, CLASS_LV_MYO, CLASS_LV_POOL};

/// Controllable heart model parameters.
///
/// `lv_volumes` are in mL, ordered (ED, intermediate-1, ES, intermediate-2,
/// intermediate-3) along the cycle; `phase_fractions` give the cycle
/// fraction of each phase and must start at 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomParams {
    /// Duration of one heartbeat in seconds.
    pub cycle_length: f64,
    /// Frames rendered per cycle.
    pub num_frames: usize,
    /// Cavity volumes at the five phases, mL.
    pub lv_volumes: [f64; 5],
    /// Cycle fraction of each phase, strictly increasing in [0, 1),
    /// first element 0.
    pub phase_fractions: [f64; 5],
    /// Anisotropic whole-heart scale (x, y, z).
    pub geometric_scale: (f64, f64, f64),
    /// Wall volume in mL, held constant over the cycle.
    pub myocardial_volume: f64,
    /// RV cavity volume as a multiple of the LV cavity volume, per frame.
    pub rv_ratio: f64,
    /// Base-plane descent toward the apex at end-systole, as a fraction of
    /// the apex-to-base length. In [0, 0.3].
    pub longitudinal_shortening: f64,
    /// Short-axis slice count.
    pub num_slices: usize,
    /// In-plane voxel spacing, mm/pixel (isotropic in plane).
    pub in_plane_spacing: f64,
    /// Slice spacing in mm; omit to divide the apex-to-base extent evenly
    /// over `num_slices`.
    pub slice_spacing: Option<f64>,
    /// Square in-plane grid size in pixels.
    pub grid_size: usize,
}

impl PhantomParams {
    /// Index of end-systole in `lv_volumes` / `phase_fractions`.
    pub const ES_INDEX: usize = 2;

    /// Check every invariant; returns the params unchanged when all hold,
    /// otherwise the complete list of violations.
    pub fn validate(&self) -> Result<PhantomParams> {
        let mut errors = Vec::new();

        if self.cycle_length <= 0.0 {
            errors.push(format!("cycle_length: must be > 0, got {}", self.cycle_length));
        }
        if self.num_frames < 1 {
            errors.push(format!("num_frames: must be >= 1, got {}", self.num_frames));
        }
        if self.num_slices < 1 {
            errors.push(format!("num_slices: must be >= 1, got {}", self.num_slices));
        }
        if self.grid_size < 8 {
            errors.push(format!("grid_size: must be >= 8, got {}", self.grid_size));
        }
        for (i, v) in self.lv_volumes.iter().enumerate() {
            if *v <= 0.0 {
                errors.push(format!("lv_volumes[{i}]: must be > 0, got {v}"));
            }
        }
        if self.lv_volumes[Self::ES_INDEX] >= self.lv_volumes[0] {
            errors.push(format!(
                "lv_volumes: ES must be < ED, got ES={} ED={}",
                self.lv_volumes[Self::ES_INDEX],
                self.lv_volumes[0]
            ));
        }
        if self.phase_fractions[0] != 0.0 {
            errors.push(format!(
                "phase_fractions[0]: must be 0.0, got {}",
                self.phase_fractions[0]
            ));
        }
        for w in self.phase_fractions.windows(2) {
            if w[1] <= w[0] {
                errors.push(format!(
                    "phase_fractions: must be strictly increasing, got {:?}",
                    self.phase_fractions
                ));
                break;
            }
        }
        for f in self.phase_fractions.iter() {
            if !(0.0..1.0).contains(f) {
                errors.push(format!(
                    "phase_fractions: all values must lie in [0, 1), got {:?}",
                    self.phase_fractions
                ));
                break;
            }
        }
        if self.myocardial_volume <= 0.0 {
            errors.push(format!(
                "myocardial_volume: must be > 0, got {}",
                self.myocardial_volume
            ));
        }
        if self.rv_ratio < 0.0 {
            errors.push(format!("rv_ratio: must be >= 0, got {}", self.rv_ratio));
        }
        if !(0.0..=0.3).contains(&self.longitudinal_shortening) {
            errors.push(format!(
                "longitudinal_shortening: must lie in [0, 0.3], got {}",
                self.longitudinal_shortening
            ));
        }
        let (gx, gy, gz) = self.geometric_scale;
        if gx <= 0.0 || gy <= 0.0 || gz <= 0.0 {
            errors.push(format!(
                "geometric_scale: all components must be > 0, got {:?}",
                self.geometric_scale
            ));
        }
        if self.in_plane_spacing <= 0.0 {
            errors.push(format!(
                "in_plane_spacing: must be > 0, got {}",
                self.in_plane_spacing
            ));
        }
        if let Some(s) = self.slice_spacing {
            if s <= 0.0 {
                errors.push(format!("slice_spacing: must be > 0, got {s}"));
            }
        }

        if errors.is_empty() {
            Ok(self.clone())
        } else {
            Err(Error::InvalidParams(errors))
        }
    }
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            cycle_length: 1.0,
            num_frames: 25,
            lv_volumes: [120.0, 85.0, 50.0, 90.0, 115.0],
            phase_fractions: [0.0, 0.175, 0.35, 0.60, 0.80],
            geometric_scale: (1.0, 1.0, 1.0),
            myocardial_volume: 130.0,
            rv_ratio: 0.9,
            longitudinal_shortening: 0.15,
            num_slices: 18,
            in_plane_spacing: 1.0,
            slice_spacing: None,
            grid_size: 128,
        }
    }
}

/// Evaluate the C1 periodic monotone cavity-volume interpolant at a cycle
/// fraction. Passes through each (phase fraction, volume) knot exactly.
pub fn lv_volume_curve(params: &PhantomParams, t_fraction: f64) -> Result<f64> {
    let params = params.validate()?;
    Ok(VolumeCurve::new(&params.phase_fractions, &params.lv_volumes).eval(t_fraction))
}

/// Voxelize one frame with the default execution mode.
pub fn voxelize_frame(params: &PhantomParams, frame_index: usize) -> Result<Array3<u8>> {
    voxelize_frame_with(params, frame_index, Exec::default())
}

/// Voxelize the whole cycle with the default execution mode.
pub fn generate_label_sequence(params: &PhantomParams) -> Result<LabelVolume4D> {
    generate_label_sequence_with(params, Exec::default())
}

/// True when the myocardium in this slice forms a single 4-connected ring
/// enclosing the LV pool: the slice contains both classes, all myocardial
/// pixels are one 4-connected component, and no LV-pool pixel can be
/// reached from the slice border without crossing myocardium.
pub fn has_closed_myocardial_ring(slice: ArrayView2<'_, u8>) -> bool {
    let (h, w) = slice.dim();
    let myo_total = slice.iter().filter(|&&v| v == CLASS_LV_MYO).count();
    let pool_total = slice.iter().filter(|&&v| v == CLASS_LV_POOL).count();
    if myo_total == 0 || pool_total == 0 {
        return false;
    }

    // Single 4-connected myocardial component.
    let start = slice
        .indexed_iter()
        .find(|(_, &v)| v == CLASS_LV_MYO)
        .map(|((y, x), _)| (y, x))
        .expect("nonzero myo count");
    let mut seen = vec![false; h * w];
    let mut stack = vec![start];
    seen[start.0 * w + start.1] = true;
    let mut component = 0usize;
    while let Some((y, x)) = stack.pop() {
        component += 1;
        for (dy, dx) in [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)] {
            let (ny, nx) = (y as i64 + dy, x as i64 + dx);
            if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                continue;
            }
            let (ny, nx) = (ny as usize, nx as usize);
            if !seen[ny * w + nx] && slice[[ny, nx]] == CLASS_LV_MYO {
                seen[ny * w + nx] = true;
                stack.push((ny, nx));
            }
        }
    }
    if component != myo_total {
        return false;
    }

    // Flood the complement of the myocardium from the border; a closed
    // ring keeps the LV pool unreachable.
    let mut reach = vec![false; h * w];
    let mut stack = Vec::new();
    for y in 0..h {
        for x in [0, w - 1] {
            if slice[[y, x]] != CLASS_LV_MYO && !reach[y * w + x] {
                reach[y * w + x] = true;
                stack.push((y, x));
            }
        }
    }
    for x in 0..w {
        for y in [0, h - 1] {
            if slice[[y, x]] != CLASS_LV_MYO && !reach[y * w + x] {
                reach[y * w + x] = true;
                stack.push((y, x));
            }
        }
    }
    while let Some((y, x)) = stack.pop() {
        for (dy, dx) in [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)] {
            let (ny, nx) = (y as i64 + dy, x as i64 + dx);
            if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                continue;
            }
            let (ny, nx) = (ny as usize, nx as usize);
            if !reach[ny * w + nx] && slice[[ny, nx]] != CLASS_LV_MYO {
                reach[ny * w + nx] = true;
                stack.push((ny, nx));
            }
        }
    }
    !slice
        .indexed_iter()
        .any(|((y, x), &v)| v == CLASS_LV_POOL && reach[y * w + x])
}

/// True when some slice in the middle third of `labels` at `frame`
/// satisfies [`has_closed_myocardial_ring`].
pub fn frame_has_mid_ventricular_ring(labels: &LabelVolume4D, frame: usize) -> bool {
    let n = labels.num_slices();
    let lo = n / 3;
    let hi = (2 * n).div_ceil(3).max(lo + 1);
    (lo..hi.min(n)).any(|s| {
        let slice = labels
            .data
            .index_axis(ndarray::Axis(0), frame)
            .index_axis_move(ndarray::Axis(0), s);
        has_closed_myocardial_ring(slice.view())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn defaults_are_valid() {
        assert!(PhantomParams::default().validate().is_ok());
    }

    #[test]
    fn es_greater_than_ed_is_rejected() {
        let p = PhantomParams {
            lv_volumes: [120.0, 130.0, 160.0, 140.0, 125.0],
            ..PhantomParams::default()
        };
        let err = p.validate().unwrap_err();
        assert!(err.to_string().contains("ES must be < ED"), "{err}");
    }

    #[test]
    fn non_increasing_fractions_are_rejected() {
        let p = PhantomParams {
            phase_fractions: [0.0, 0.2, 0.2, 0.5, 0.8],
            ..PhantomParams::default()
        };
        let err = p.validate().unwrap_err();
        assert!(err.to_string().contains("strictly increasing"), "{err}");
    }

    #[test]
    fn all_violations_are_reported() {
        let p = PhantomParams {
            cycle_length: -1.0,
            in_plane_spacing: 0.0,
            phase_fractions: [0.1, 0.2, 0.3, 0.4, 0.5],
            ..PhantomParams::default()
        };
        match p.validate() {
            Err(Error::InvalidParams(list)) => assert!(list.len() >= 3, "{list:?}"),
            other => panic!("expected InvalidParams, got {other:?}"),
        }
    }

    #[test]
    fn curve_hits_knots_through_public_op() {
        let p = PhantomParams::default();
        for k in 0..5 {
            let v = lv_volume_curve(&p, p.phase_fractions[k]).unwrap();
            assert!((v - p.lv_volumes[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn ring_detector_accepts_annulus_and_rejects_gap() {
        let mut slice = Array2::<u8>::zeros((16, 16));
        for y in 0..16 {
            for x in 0..16 {
                let dy = y as f64 - 7.5;
                let dx = x as f64 - 7.5;
                let r = (dy * dy + dx * dx).sqrt();
                if r < 3.0 {
                    slice[[y, x]] = CLASS_LV_POOL;
                } else if r < 6.0 {
                    slice[[y, x]] = CLASS_LV_MYO;
                }
            }
        }
        assert!(has_closed_myocardial_ring(slice.view()));
        // Punch a hole through the wall.
        for x in 0..16 {
            if slice[[7, x]] == CLASS_LV_MYO {
                slice[[7, x]] = 0;
            }
            if slice[[8, x]] == CLASS_LV_MYO {
                slice[[8, x]] = 0;
            }
        }
        assert!(!has_closed_myocardial_ring(slice.view()));
    }

    #[test]
    fn single_frame_sequence_is_static_ed() {
        let p = PhantomParams {
            num_frames: 1,
            grid_size: 64,
            in_plane_spacing: 2.0,
            num_slices: 8,
            ..PhantomParams::default()
        };
        let labels = generate_label_sequence(&p).unwrap();
        assert_eq!(labels.num_frames(), 1);
        assert_eq!(labels.frame_times, vec![0.0]);
        // ED cavity volume within tolerance of the first knot.
        let v = labels.class_volume_ml(0, CLASS_LV_POOL);
        assert!((v - 120.0).abs() / 120.0 < 0.05, "v = {v}");
    }
}
