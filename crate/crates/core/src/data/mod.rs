//! Ingestion of annotated cine MR cases into normalized 2D training pairs.
//!
//! Cases are discovered by a glob pattern, loaded from NIfTI, resampled to
//! a fixed in-plane resolution, center-cropped, intensity-normalized and
//! split into per-slice image/label pairs. Every step is deterministic
//! given the seed, regardless of the execution schedule.

pub mod cache;
pub mod preprocess;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nifti;
use crate::volume::{Phase, TrainingPair, CLASS_LV_POOL, NUM_CLASSES};

pub use preprocess::{center_crop, resample_inplane, scale_intensity, IntensityMode};

/// One annotated case: an image volume and its aligned segmentation.
#[derive(Debug, Clone)]
pub struct CaseRecord {
    pub case_id: String,
    /// Raw intensities `[slice, row, col]`, native spacing.
    pub image: Array3<f64>,
    /// Class ids aligned to `image`.
    pub mask: Array3<u8>,
    pub phase: Phase,
    /// (row mm, col mm, slice mm).
    pub spacing: (f64, f64, f64),
}

impl CaseRecord {
    /// The raw intensities bundled with their native spacing.
    pub fn image_volume(&self) -> crate::volume::ImageVolume3 {
        crate::volume::ImageVolume3 {
            data: self.image.clone(),
            spacing: self.spacing,
        }
    }
}

/// Preprocessing settings for [`build_training_set`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Target in-plane spacing in mm.
    pub target_spacing: f64,
    /// Output square size in pixels.
    pub crop_size: usize,
    pub intensity_mode: IntensityMode,
    /// Shuffle the emitted pair order (deterministic given the seed).
    pub shuffle: bool,
    pub seed: u64,
    /// Fraction of cases held out for validation, split by case id.
    pub val_fraction: f64,
    /// Glob for image files below the data root. `*` matches within one
    /// path component, `**` matches across components.
    pub image_glob: String,
    /// Mask path = image path with this inserted before the extension.
    pub mask_suffix: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            target_spacing: 1.3,
            crop_size: 128,
            intensity_mode: IntensityMode::Percentile,
            shuffle: true,
            seed: 0,
            val_fraction: 0.0,
            image_glob: "**/*_frame*.nii.gz".to_string(),
            mask_suffix: "_gt".to_string(),
        }
    }
}

/// Load one case from an image path plus its aligned segmentation path.
/// Mask values must already use the canonical class set {0, 1, 2, 3}.
pub fn load_case(
    image_path: impl AsRef<Path>,
    mask_path: impl AsRef<Path>,
    case_id: impl Into<String>,
    phase: Phase,
) -> Result<CaseRecord> {
    let image_path = image_path.as_ref();
    let mask_path = mask_path.as_ref();
    let img = nifti::read(image_path)?;
    let spacing = (
        img.header.pixdim[2] as f64,
        img.header.pixdim[1] as f64,
        img.header.pixdim[3] as f64,
    );
    if spacing.0 <= 0.0 || spacing.1 <= 0.0 {
        return Err(Error::Nifti {
            path: image_path.to_path_buf(),
            reason: format!("non-positive pixdim {spacing:?}"),
        });
    }
    let image = img.into_array3()?;

    let msk = nifti::read(mask_path)?;
    let mask_f = msk.into_array3()?;
    if mask_f.dim() != image.dim() {
        return Err(Error::ShapeMismatch(format!(
            "{}: image {:?} vs mask {:?}",
            mask_path.display(),
            image.dim(),
            mask_f.dim()
        )));
    }
    let mut mask = Array3::<u8>::zeros(mask_f.dim());
    for (dst, &v) in mask.iter_mut().zip(mask_f.iter()) {
        let r = v.round();
        if (v - r).abs() > 1e-6 || !(0.0..NUM_CLASSES as f64).contains(&r) {
            return Err(Error::UnknownLabel {
                value: v.round() as i64,
                path: mask_path.to_path_buf(),
            });
        }
        *dst = r as u8;
    }

    Ok(CaseRecord {
        case_id: case_id.into(),
        image,
        mask,
        phase,
        spacing,
    })
}

/// Minimal glob matching: `*` matches within a path component, `**`
/// anywhere, `?` a single character.
fn glob_match(pattern: &str, path: &str) -> bool {
    fn inner(p: &[u8], s: &[u8]) -> bool {
        if p.is_empty() {
            return s.is_empty();
        }
        match p[0] {
            b'*' => {
                if p.len() >= 2 && p[1] == b'*' {
                    // `**` spans separators (and swallows a following '/').
                    let rest = if p.len() >= 3 && p[2] == b'/' { &p[3..] } else { &p[2..] };
                    (0..=s.len()).any(|k| inner(rest, &s[k..]))
                } else {
                    (0..=s.len())
                        .take_while(|&k| k == 0 || s[k - 1] != b'/')
                        .any(|k| inner(&p[1..], &s[k..]))
                }
            }
            b'?' => !s.is_empty() && s[0] != b'/' && inner(&p[1..], &s[1..]),
            c => !s.is_empty() && s[0] == c && inner(&p[1..], &s[1..]),
        }
    }
    inner(pattern.as_bytes(), path.as_bytes())
}

fn walk_files(root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(root)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            walk_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Mask path for an image path: insert `suffix` before the `.nii[.gz]`
/// extension.
fn mask_path_for(image: &Path, suffix: &str) -> PathBuf {
    let name = image.file_name().unwrap_or_default().to_string_lossy();
    let (stem, ext) = if let Some(s) = name.strip_suffix(".nii.gz") {
        (s, ".nii.gz")
    } else if let Some(s) = name.strip_suffix(".nii") {
        (s, ".nii")
    } else {
        (name.as_ref(), "")
    };
    image.with_file_name(format!("{stem}{suffix}{ext}"))
}

fn case_id_for(image: &Path) -> String {
    let name = image.file_name().unwrap_or_default().to_string_lossy();
    let stem = name
        .strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))
        .unwrap_or(&name);
    match stem.find("_frame") {
        Some(k) => stem[..k].to_string(),
        None => stem.to_string(),
    }
}

/// Find (image, mask) file pairs below `root` matching the configured glob.
/// Results are sorted by path for determinism.
pub fn discover_cases(root: impl AsRef<Path>, config: &PipelineConfig) -> Result<Vec<(PathBuf, PathBuf)>> {
    let root = root.as_ref();
    let mut files = Vec::new();
    walk_files(root, &mut files)?;
    files.sort();
    let mut pairs = Vec::new();
    for f in files {
        let rel = f.strip_prefix(root).unwrap_or(&f).to_string_lossy().replace('\\', "/");
        if !glob_match(&config.image_glob, &rel) {
            continue;
        }
        // The glob also matches the mask files themselves; skip those.
        if rel.contains(&config.mask_suffix) {
            continue;
        }
        let mask = mask_path_for(&f, &config.mask_suffix);
        if mask.exists() {
            pairs.push((f, mask));
        }
    }
    Ok(pairs)
}

/// Load all discovered cases. When a case id has two annotated frames the
/// one with the larger LV pool is tagged ED and the other ES; a lone frame
/// is tagged ED.
pub fn load_cases(root: impl AsRef<Path>, config: &PipelineConfig) -> Result<Vec<CaseRecord>> {
    let pairs = discover_cases(root, config)?;
    let mut by_case: BTreeMap<String, Vec<(PathBuf, PathBuf)>> = BTreeMap::new();
    for (img, msk) in pairs {
        by_case.entry(case_id_for(&img)).or_default().push((img, msk));
    }

    let mut records = Vec::new();
    for (case_id, files) in by_case {
        let mut loaded: Vec<CaseRecord> = files
            .iter()
            .map(|(img, msk)| load_case(img, msk, case_id.clone(), Phase::ED))
            .collect::<Result<_>>()?;
        if loaded.len() >= 2 {
            let pool_count = |r: &CaseRecord| r.mask.iter().filter(|&&v| v == CLASS_LV_POOL).count();
            let ed_idx = (0..loaded.len())
                .max_by_key(|&i| pool_count(&loaded[i]))
                .unwrap();
            for (i, rec) in loaded.iter_mut().enumerate() {
                rec.phase = if i == ed_idx { Phase::ED } else { Phase::ES };
            }
        }
        records.extend(loaded);
    }
    Ok(records)
}

/// Run the preprocessing chain on one case and split it into slices.
pub fn preprocess_case(
    case: &CaseRecord,
    config: &PipelineConfig,
    exec: Exec,
) -> Result<Vec<TrainingPair>> {
    let (img, msk, _spacing) = resample_inplane(
        &case.image,
        &case.mask,
        case.spacing,
        config.target_spacing,
        exec,
    )?;
    let (img, msk) = center_crop(&img, &msk, config.crop_size);
    let img = scale_intensity(&img, config.intensity_mode)?;
    let pairs = preprocess::split_slices(&img, &msk)
        .into_iter()
        .enumerate()
        .map(|(slice_index, (image, label))| TrainingPair {
            image,
            label,
            case_id: case.case_id.clone(),
            phase: case.phase,
            slice_index,
        })
        .collect();
    Ok(pairs)
}

/// Result of [`build_training_set`]: training pairs plus an optional
/// case-disjoint validation split.
#[derive(Debug)]
pub struct TrainingSet {
    pub train: Vec<TrainingPair>,
    pub validation: Vec<TrainingPair>,
}

/// Apply the full preprocessing chain to every case and emit per-slice 2D
/// pairs in a deterministic order. The validation split (if requested)
/// never mixes slices of one case across partitions.
pub fn build_training_set(
    cases: &[CaseRecord],
    config: &PipelineConfig,
    exec: Exec,
) -> Result<TrainingSet> {
    if cases.is_empty() {
        return Err(Error::EmptyDataset("no cases supplied".into()));
    }

    // Deterministic case order: by id then phase.
    let mut order: Vec<usize> = (0..cases.len()).collect();
    order.sort_by_key(|&i| (cases[i].case_id.clone(), cases[i].phase != Phase::ED));

    // Case-id level validation split.
    let mut ids: Vec<String> = cases.iter().map(|c| c.case_id.clone()).collect();
    ids.sort();
    ids.dedup();
    let n_val = (ids.len() as f64 * config.val_fraction).floor() as usize;
    let val_ids: std::collections::BTreeSet<String> = if n_val > 0 {
        use rand::seq::SliceRandom;
        let mut rng = crate::train::rng_from_seed(config.seed ^ 0x5eed_0517);
        let mut shuffled = ids.clone();
        shuffled.shuffle(&mut rng);
        shuffled.into_iter().take(n_val).collect()
    } else {
        Default::default()
    };

    let mut train = Vec::new();
    let mut validation = Vec::new();
    for &i in &order {
        let case = &cases[i];
        let pairs = preprocess_case(case, config, exec)?;
        if val_ids.contains(&case.case_id) {
            validation.extend(pairs);
        } else {
            train.extend(pairs);
        }
    }

    if config.shuffle {
        use rand::seq::SliceRandom;
        let mut rng = crate::train::rng_from_seed(config.seed);
        train.shuffle(&mut rng);
    }

    if train.is_empty() {
        return Err(Error::EmptyDataset(
            "preprocessing produced no training pairs".into(),
        ));
    }
    for p in train.iter().chain(validation.iter()) {
        p.validate()?;
    }
    Ok(TrainingSet { train, validation })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glob_basics() {
        assert!(glob_match("**/*_frame*.nii.gz", "p01/p01_frame01.nii.gz"));
        assert!(glob_match("**/*_frame*.nii.gz", "a/b/p01_frame01.nii.gz"));
        assert!(glob_match("*_frame*.nii.gz", "p01_frame01.nii.gz"));
        assert!(!glob_match("*_frame*.nii.gz", "p01/p01_frame01.nii.gz"));
        assert!(!glob_match("**/*_frame*.nii.gz", "p01/p01_image.nii.gz"));
        assert!(glob_match("p??.nii", "p01.nii"));
        assert!(!glob_match("p?.nii", "p01.nii"));
    }

    #[test]
    fn mask_path_insertion() {
        assert_eq!(
            mask_path_for(Path::new("d/p01_frame02.nii.gz"), "_gt"),
            PathBuf::from("d/p01_frame02_gt.nii.gz")
        );
        assert_eq!(
            mask_path_for(Path::new("x.nii"), "_gt"),
            PathBuf::from("x_gt.nii")
        );
    }

    #[test]
    fn case_id_strips_frame_suffix() {
        assert_eq!(case_id_for(Path::new("p/patient007_frame01.nii.gz")), "patient007");
        assert_eq!(case_id_for(Path::new("case3.nii")), "case3");
    }
}
