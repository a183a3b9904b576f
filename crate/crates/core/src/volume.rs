//! Grid containers shared across the pipeline.
//!
//! Axis convention for all 4D grids is `[frame][slice][row][col]`
//! (`[t][z][y][x]`), which in row-major memory puts `x` fastest — the same
//! element order NIfTI uses on disk.

use ndarray::{Array2, Array3, Array4};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 4;
pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_RV_POOL: u8 = 1;
pub const CLASS_LV_MYO: u8 = 2;
pub const CLASS_LV_POOL: u8 = 3;

/// 4D integer class grid with spacing metadata; the synthesis ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume4D {
    /// Class ids, shape `[frames, slices, height, width]`.
    pub data: Array4<u8>,
    /// In-plane voxel spacing in mm (isotropic in-plane).
    pub in_plane_spacing: f64,
    /// Slice-to-slice spacing in mm.
    pub slice_spacing: f64,
    /// Acquisition time of each frame in seconds.
    pub frame_times: Vec<f64>,
}

impl LabelVolume4D {
    pub fn num_frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn num_slices(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }

    /// Physical volume of one voxel in mm^3.
    pub fn voxel_volume_mm3(&self) -> f64 {
        self.in_plane_spacing * self.in_plane_spacing * self.slice_spacing
    }

    /// Voxel count of `class` in one frame.
    pub fn class_count(&self, frame: usize, class: u8) -> usize {
        self.data
            .index_axis(ndarray::Axis(0), frame)
            .iter()
            .filter(|&&v| v == class)
            .count()
    }

    /// Voxel-counted volume of `class` in one frame, in mL.
    pub fn class_volume_ml(&self, frame: usize, class: u8) -> f64 {
        self.class_count(frame, class) as f64 * self.voxel_volume_mm3() / 1000.0
    }

    /// Every voxel must carry a declared class id.
    pub fn validate_classes(&self) -> Result<()> {
        for &v in self.data.iter() {
            if v as usize >= NUM_CLASSES {
                return Err(Error::UnknownLabel {
                    value: v as i64,
                    path: "<in-memory label volume>".into(),
                });
            }
        }
        Ok(())
    }
}

/// Real-valued 3D intensity grid with spacing metadata, `[slice, row, col]`.
#[derive(Debug, Clone)]
pub struct ImageVolume3 {
    pub data: Array3<f64>,
    /// (row mm, col mm, slice mm).
    pub spacing: (f64, f64, f64),
}

/// Real-valued 4D intensity grid aligned to a [`LabelVolume4D`].
#[derive(Debug, Clone)]
pub struct ImageVolume4 {
    pub data: Array4<f64>,
    pub in_plane_spacing: f64,
    pub slice_spacing: f64,
    pub frame_times: Vec<f64>,
}

/// One normalized 2D image/label training example.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    /// Intensities in [-1, 1], shape `[rows, cols]`.
    pub image: Array2<f64>,
    /// Class ids aligned to `image`.
    pub label: Array2<u8>,
    pub case_id: String,
    pub phase: Phase,
    pub slice_index: usize,
}

impl TrainingPair {
    pub fn validate(&self) -> Result<()> {
        if self.image.dim() != self.label.dim() {
            return Err(Error::ShapeMismatch(format!(
                "training pair {}/{:?}/{}: image {:?} vs label {:?}",
                self.case_id,
                self.phase,
                self.slice_index,
                self.image.dim(),
                self.label.dim()
            )));
        }
        for &v in self.image.iter() {
            if !(-1.0..=1.0).contains(&v) {
                return Err(Error::msg(format!(
                    "training pair intensity {v} outside [-1, 1]"
                )));
            }
        }
        for &l in self.label.iter() {
            if l as usize >= NUM_CLASSES {
                return Err(Error::UnknownLabel {
                    value: l as i64,
                    path: "<training pair>".into(),
                });
            }
        }
        Ok(())
    }
}

/// Cardiac phase of an annotated frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Phase {
    /// End-diastole: maximal filling.
    ED,
    /// End-systole: maximal contraction.
    ES,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::ED => write!(f, "ED"),
            Phase::ES => write!(f, "ES"),
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ED" => Ok(Phase::ED),
            "ES" => Ok(Phase::ES),
            other => Err(Error::msg(format!("unknown phase tag {other:?}"))),
        }
    }
}
