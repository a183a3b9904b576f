//! Analytic implicit-surface heart model.
//!
//! The left ventricle is a truncated thick-walled half-ellipsoid: blood
//! pool inside the endocardial ellipsoid below the base plane, myocardium
//! between the endocardial and epicardial ellipsoids. The right-ventricular
//! pool is the crescent carved from a laterally offset ellipsoid by the
//! epicardium. The long axis is z, the apex points toward negative z, and
//! the base plane truncates all tissue above it.
//!
//! Sizes are solved per frame so that cavity and wall volumes hit their
//! targets. The op-level scale solve uses the continuous cap-volume
//! formula; the voxelizer's internal solves integrate over the actual
//! slice grid so that voxel counts land on target as well.

use crate::error::{Error, Result};

use super::{curve::VolumeCurve, PhantomParams};

/// Baseline endocardial semi-axes in mm before any volume solve. The
/// per-frame isotropic solve rescales these, so only the aspect matters.
const ENDO_AX: f64 = 25.0;
const ENDO_AY: f64 = 25.0;
const ENDO_AZ: f64 = 45.0;
/// Base-plane truncation fraction of the long semi-axis at end-diastole.
const BASE_FRACTION: f64 = 0.4;

/// RV ellipsoid shape relative to the frame's epicardial ellipsoid.
const RV_AX: f64 = 0.85;
const RV_AY: f64 = 1.30;
const RV_AZ: f64 = 0.95;
/// RV center x offset as a multiple of the epicardial x semi-axis.
const RV_CENTER_X: f64 = -1.05;

pub(crate) const ENDO_SCALE_LO: f64 = 0.2;
pub(crate) const ENDO_SCALE_HI: f64 = 3.0;
const EPI_SCALE_LO: f64 = 1.000_001;
const EPI_SCALE_HI: f64 = 3.0;
const RV_SCALE_LO: f64 = 0.05;
const RV_SCALE_HI: f64 = 3.0;
const VOLUME_TOL_MM3: f64 = 100.0; // 0.1 mL

/// Axis-aligned ellipsoid.
#[derive(Debug, Clone, Copy)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let dx = (p[0] - self.center[0]) / self.semi[0];
        let dy = (p[1] - self.center[1]) / self.semi[1];
        let dz = (p[2] - self.center[2]) / self.semi[2];
        dx * dx + dy * dy + dz * dz <= 1.0
    }

    /// Half-width of the ellipsoid in y at the given (x, z), or None when
    /// the ellipsoid does not reach that line.
    fn y_half_width(&self, x: f64, z: f64) -> Option<f64> {
        let dx = (x - self.center[0]) / self.semi[0];
        let dz = (z - self.center[2]) / self.semi[2];
        let r = 1.0 - dx * dx - dz * dz;
        if r <= 0.0 {
            None
        } else {
            Some(self.semi[1] * r.sqrt())
        }
    }

    /// Cross-section area at height z.
    fn section_area(&self, z: f64) -> f64 {
        let dz = (z - self.center[2]) / self.semi[2];
        let r = 1.0 - dz * dz;
        if r <= 0.0 {
            0.0
        } else {
            std::f64::consts::PI * self.semi[0] * self.semi[1] * r
        }
    }
}

/// Volume of the portion of an origin-centered ellipsoid with z <= plane_z,
/// in mm^3.
pub(crate) fn truncated_ellipsoid_volume(a: f64, b: f64, c: f64, plane_z: f64) -> f64 {
    let u = (plane_z / c).clamp(-1.0, 1.0);
    std::f64::consts::PI * a * b * c * (u - u * u * u / 3.0 + 2.0 / 3.0)
}

/// Generic bisection for a monotone nondecreasing volume function.
/// Returns the scale whose volume is within `tol` of `target`, or an
/// unachievable-volume error when the bracket does not enclose the target.
fn bisect_volume(
    target: f64,
    lo: f64,
    hi: f64,
    tol: f64,
    mut volume_at: impl FnMut(f64) -> f64,
) -> Result<f64> {
    let v_lo = volume_at(lo);
    let v_hi = volume_at(hi);
    if target < v_lo - tol || target > v_hi + tol {
        return Err(Error::UnachievableVolume {
            target_ml: target / 1000.0,
            lo,
            hi,
        });
    }
    let (mut lo, mut hi) = (lo, hi);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if volume_at(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-10 {
            break;
        }
    }
    let s = 0.5 * (lo + hi);
    let achieved = volume_at(s);
    if (achieved - target).abs() > tol {
        return Err(Error::UnachievableVolume {
            target_ml: target / 1000.0,
            lo,
            hi,
        });
    }
    Ok(s)
}

/// Baseline endocardial semi-axes after applying the anisotropic
/// geometric scale.
pub(crate) fn base_axes(params: &PhantomParams) -> [f64; 3] {
    [
        ENDO_AX * params.geometric_scale.0,
        ENDO_AY * params.geometric_scale.1,
        ENDO_AZ * params.geometric_scale.2,
    ]
}

/// Analytic cavity volume (mm^3) of the truncated endocardial ellipsoid at
/// scale `s`, with the base plane at the fixed fraction of the scaled long
/// semi-axis. Scales as s^3.
pub(crate) fn analytic_cavity_volume(params: &PhantomParams, scale: f64) -> f64 {
    let [ax, ay, az] = base_axes(params);
    truncated_ellipsoid_volume(
        scale * ax,
        scale * ay,
        scale * az,
        BASE_FRACTION * scale * az,
    )
}

/// Solve the isotropic endocardial scale whose analytic cavity volume
/// matches `target_ml`, by bisection over [0.2, 3.0].
pub fn solve_endo_scale(params: &PhantomParams, target_ml: f64) -> Result<f64> {
    if target_ml <= 0.0 {
        return Err(Error::msg(format!(
            "target volume must be positive, got {target_ml} mL"
        )));
    }
    bisect_volume(
        target_ml * 1000.0,
        ENDO_SCALE_LO,
        ENDO_SCALE_HI,
        VOLUME_TOL_MM3,
        |s| analytic_cavity_volume(params, s),
    )
}

/// All surfaces of one time frame, in mm coordinates.
#[derive(Debug, Clone)]
pub struct FrameGeometry {
    pub endo: Ellipsoid,
    pub epi: Ellipsoid,
    pub rv: Ellipsoid,
    /// Tissue exists at z <= base_z.
    pub base_z: f64,
}

impl FrameGeometry {
    /// Class of the voxel at physical point `p`. Containment precedence:
    /// LV pool over myocardium over RV pool over background.
    pub fn classify(&self, p: [f64; 3]) -> u8 {
        if p[2] > self.base_z {
            return crate::volume::CLASS_BACKGROUND;
        }
        if self.endo.contains(p) {
            crate::volume::CLASS_LV_POOL
        } else if self.epi.contains(p) {
            crate::volume::CLASS_LV_MYO
        } else if self.rv.contains(p) {
            crate::volume::CLASS_RV_POOL
        } else {
            crate::volume::CLASS_BACKGROUND
        }
    }
}

/// Precomputed reference geometry, volume curve and slice grid for one
/// parameter set. Frame geometries are derived from this.
#[derive(Debug, Clone)]
pub struct PhantomModel {
    pub(crate) curve: VolumeCurve,
    axes: [f64; 3],
    /// End-diastolic base plane height.
    zb_ed: f64,
    /// Apex-to-base length of the reference (ED) heart.
    length_ref: f64,
    v_ed_ml: f64,
    v_es_ml: f64,
    /// Slice centers in mm, most apical first.
    pub slice_z: Vec<f64>,
    pub slice_spacing: f64,
    /// Grid center in (x, y) mm.
    pub grid_center: (f64, f64),
}

impl PhantomModel {
    pub fn new(params: &PhantomParams) -> Result<Self> {
        let curve = VolumeCurve::new(&params.phase_fractions, &params.lv_volumes);
        let axes = base_axes(params);
        let v_ed_ml = params.lv_volumes[0];
        let v_es_ml = params.lv_volumes[PhantomParams::ES_INDEX];

        // Reference (ED) solves on the continuous formulas.
        let s_ed = solve_endo_scale(params, v_ed_ml)?;
        let zb_ed = BASE_FRACTION * s_ed * axes[2];
        let endo_ed = [s_ed * axes[0], s_ed * axes[1], s_ed * axes[2]];
        let myo_mm3 = params.myocardial_volume * 1000.0;
        let cavity_ed = truncated_ellipsoid_volume(endo_ed[0], endo_ed[1], endo_ed[2], zb_ed);
        let w_ed = bisect_volume(myo_mm3 + cavity_ed, EPI_SCALE_LO, EPI_SCALE_HI, VOLUME_TOL_MM3, |w| {
            truncated_ellipsoid_volume(w * endo_ed[0], w * endo_ed[1], w * endo_ed[2], zb_ed)
        })
        .map_err(|_| Error::GeometryInfeasible {
            frame: 0,
            reason: format!(
                "myocardial volume {} mL cannot be realized around a {} mL cavity",
                params.myocardial_volume, v_ed_ml
            ),
        })?;
        let apex_ed = -w_ed * endo_ed[2];
        let length_ref = zb_ed - apex_ed;

        let slice_spacing = match params.slice_spacing {
            Some(s) => s,
            None => length_ref / params.num_slices as f64,
        };
        let mid_z = zb_ed - 0.5 * length_ref;
        let n = params.num_slices as f64;
        let slice_z: Vec<f64> = (0..params.num_slices)
            .map(|k| mid_z + (k as f64 - (n - 1.0) / 2.0) * slice_spacing)
            .collect();

        // Center the in-plane grid on the ED bounding box of epicardium
        // plus RV so both chambers stay in frame at every scale.
        let a_epi_ed = w_ed * endo_ed[0];
        let rv_cx = RV_CENTER_X * a_epi_ed;
        let rv_rx = RV_AX * a_epi_ed;
        let x_min = (rv_cx - 1.4 * rv_rx).min(-a_epi_ed);
        let x_max = a_epi_ed;
        let grid_center = (0.5 * (x_min + x_max), 0.0);

        Ok(PhantomModel {
            curve,
            axes,
            zb_ed,
            length_ref,
            v_ed_ml,
            v_es_ml,
            slice_z,
            slice_spacing,
            grid_center,
        })
    }

    /// Normalized contraction at a cycle fraction: 0 at ED volume, 1 at ES.
    fn contraction(&self, t_fraction: f64) -> f64 {
        let v = self.curve.eval(t_fraction);
        ((self.v_ed_ml - v) / (self.v_ed_ml - self.v_es_ml)).clamp(0.0, 1.0)
    }

    /// Cavity volume by midpoint quadrature over the scanner slice grid,
    /// for an endocardial scale `s` and a fixed base plane. This is the
    /// volume a voxel count converges to as the in-plane spacing shrinks.
    fn sliced_cavity_volume(&self, s: f64, base_z: f64) -> f64 {
        let e = Ellipsoid {
            center: [0.0; 3],
            semi: [s * self.axes[0], s * self.axes[1], s * self.axes[2]],
        };
        self.slice_z
            .iter()
            .filter(|&&z| z <= base_z)
            .map(|&z| e.section_area(z) * self.slice_spacing)
            .sum()
    }

    fn sliced_myo_volume(&self, endo: &Ellipsoid, w: f64, base_z: f64) -> f64 {
        let epi = Ellipsoid {
            center: [0.0; 3],
            semi: [w * endo.semi[0], w * endo.semi[1], w * endo.semi[2]],
        };
        self.slice_z
            .iter()
            .filter(|&&z| z <= base_z)
            .map(|&z| (epi.section_area(z) - endo.section_area(z)).max(0.0) * self.slice_spacing)
            .sum()
    }

    /// RV crescent volume (inside `rv`, outside `epi`, below the base
    /// plane) by slice-grid quadrature. Both ellipsoids are centered on
    /// y = 0, so at fixed (x, z) the crescent's y-extent is the difference
    /// of half-widths and a 1D x-integral per slice is exact up to
    /// quadrature resolution.
    fn sliced_rv_volume(&self, rv: &Ellipsoid, epi: &Ellipsoid, base_z: f64) -> f64 {
        const NX: usize = 256;
        let mut total = 0.0;
        for &z in self.slice_z.iter().filter(|&&z| z <= base_z) {
            let dz = (z - rv.center[2]) / rv.semi[2];
            let r = 1.0 - dz * dz;
            if r <= 0.0 {
                continue;
            }
            let half_x = rv.semi[0] * r.sqrt();
            let x0 = rv.center[0] - half_x;
            let step = 2.0 * half_x / NX as f64;
            let mut area = 0.0;
            for i in 0..NX {
                let x = x0 + (i as f64 + 0.5) * step;
                let y_rv = rv.y_half_width(x, z).unwrap_or(0.0);
                let y_epi = epi.y_half_width(x, z).unwrap_or(0.0);
                area += 2.0 * (y_rv - y_epi).max(0.0) * step;
            }
            total += area * self.slice_spacing;
        }
        total
    }

    /// Solve all surfaces for the frame at cycle fraction `t_fraction`.
    pub fn frame_geometry(
        &self,
        params: &PhantomParams,
        frame: usize,
        t_fraction: f64,
    ) -> Result<FrameGeometry> {
        let target_ml = self.curve.eval(t_fraction);
        let kappa = self.contraction(t_fraction);
        let base_z = self.zb_ed - params.longitudinal_shortening * kappa * self.length_ref;

        let infeasible = |reason: String| Error::GeometryInfeasible { frame, reason };

        let s = bisect_volume(
            target_ml * 1000.0,
            ENDO_SCALE_LO,
            ENDO_SCALE_HI,
            VOLUME_TOL_MM3,
            |s| self.sliced_cavity_volume(s, base_z),
        )
        .map_err(|e| infeasible(format!("endocardial solve: {e}")))?;
        let endo = Ellipsoid {
            center: [0.0; 3],
            semi: [s * self.axes[0], s * self.axes[1], s * self.axes[2]],
        };

        let w = bisect_volume(
            params.myocardial_volume * 1000.0,
            EPI_SCALE_LO,
            EPI_SCALE_HI,
            VOLUME_TOL_MM3,
            |w| self.sliced_myo_volume(&endo, w, base_z),
        )
        .map_err(|e| infeasible(format!("epicardial solve: {e}")))?;
        let epi = Ellipsoid {
            center: [0.0; 3],
            semi: [w * endo.semi[0], w * endo.semi[1], w * endo.semi[2]],
        };

        let rv_target_ml = params.rv_ratio * target_ml;
        let rv_center = [RV_CENTER_X * epi.semi[0], 0.0, 0.0];
        let rv_base = [RV_AX * epi.semi[0], RV_AY * epi.semi[1], RV_AZ * epi.semi[2]];
        let rv = if rv_target_ml <= 0.0 {
            // Degenerate ellipsoid that contains nothing.
            Ellipsoid {
                center: rv_center,
                semi: [1e-6; 3],
            }
        } else {
            let sr = bisect_volume(rv_target_ml * 1000.0, RV_SCALE_LO, RV_SCALE_HI, 1000.0, |sr| {
                let rv = Ellipsoid {
                    center: rv_center,
                    semi: [sr * rv_base[0], sr * rv_base[1], sr * rv_base[2]],
                };
                self.sliced_rv_volume(&rv, &epi, base_z)
            })
            .map_err(|e| infeasible(format!("right-ventricular solve: {e}")))?;
            Ellipsoid {
                center: rv_center,
                semi: [sr * rv_base[0], sr * rv_base[1], sr * rv_base[2]],
            }
        };

        Ok(FrameGeometry {
            endo,
            epi,
            rv,
            base_z,
        })
    }
}
