//! Label-swap synthesis: drive a trained generator with phantom label
//! sequences and export labeled synthetic 4D datasets.

pub mod montage;
pub mod report;

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3, Array4};
use sha2::Digest;

use crate::data::{center_crop, resample_inplane};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{nets, one_hot_batch, ModelConfig, ModelWeights};
use crate::train::{load_checkpoint, rng_from_seed};
use crate::volume::LabelVolume4D;

pub use montage::{render_gif, render_montage, MontageAxis};
pub use report::{coherence_report, ssim, CoherenceReport};

/// Where the style vector comes from.
#[derive(Debug, Clone)]
pub enum StyleSource {
    /// Sample z ~ N(0, I) from the request seed.
    Random,
    /// Encode a reference image (VAE checkpoints only); uses mu, no
    /// sampling, so the transfer is deterministic.
    Encode(Array2<f64>),
    /// Explicit latent vector.
    Fixed(Array1<f64>),
}

impl StyleSource {
    fn descriptor(&self) -> String {
        match self {
            StyleSource::Random => "random".to_string(),
            StyleSource::Encode(_) => "encoded".to_string(),
            StyleSource::Fixed(_) => "fixed".to_string(),
        }
    }
}

/// Everything needed for one synthesis run.
#[derive(Debug, Clone)]
pub struct SynthesisRequest {
    pub checkpoint: PathBuf,
    pub labels: LabelVolume4D,
    pub style: StyleSource,
    pub seed: u64,
    /// One shared z for the whole sequence (default) or one per slice.
    pub shared_style: bool,
    /// Resample labels to this in-plane spacing before cropping (matches
    /// the training statistics); None crops/pads the native grid.
    pub resample_to_spacing: Option<f64>,
    /// Hash describing the label provenance; computed from the label bytes
    /// when absent.
    pub params_hash: Option<String>,
    pub batch_slices: usize,
}

impl SynthesisRequest {
    pub fn new(checkpoint: impl Into<PathBuf>, labels: LabelVolume4D) -> Self {
        SynthesisRequest {
            checkpoint: checkpoint.into(),
            labels,
            style: StyleSource::Random,
            seed: 0,
            shared_style: true,
            resample_to_spacing: None,
            params_hash: None,
            batch_slices: 8,
        }
    }
}

/// Synthesis provenance, written as a key: value sidecar.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub checkpoint_id: String,
    pub params_hash: String,
    pub style: String,
    pub seed: u64,
}

/// Aligned synthetic images and their ground-truth labels.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    /// `[frames, slices, S, S]`, values in (-1, 1).
    pub images: Array4<f64>,
    /// Labels actually fed to the generator, same grid as `images`.
    pub labels: LabelVolume4D,
    pub provenance: Provenance,
}

impl SyntheticDataset {
    /// The image grid bundled with its spacing metadata.
    pub fn image_volume(&self) -> crate::volume::ImageVolume4 {
        crate::volume::ImageVolume4 {
            data: self.images.clone(),
            in_plane_spacing: self.labels.in_plane_spacing,
            slice_spacing: self.labels.slice_spacing,
            frame_times: self.labels.frame_times.clone(),
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = sha2::Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of a phantom parameter set, for provenance.
pub fn phantom_params_hash(params: &crate::phantom::PhantomParams) -> String {
    let text = toml::to_string(params).expect("params serialize");
    sha256_hex(text.as_bytes())
}

/// Fit one label slice onto the model grid: optional nearest-neighbor
/// resample to a target spacing, then centered crop/pad.
fn fit_label_slice(
    label: &Array2<u8>,
    native_spacing: f64,
    resample_to: Option<f64>,
    size: usize,
    exec: Exec,
) -> Result<Array2<u8>> {
    let (h, w) = label.dim();
    let as3 = label.clone().insert_axis(ndarray::Axis(0));
    let dummy = Array3::<f64>::zeros((1, h, w));
    let (img3, lab3) = match resample_to {
        Some(target) => {
            let (i, l, _) = resample_inplane(
                &dummy,
                &as3,
                (native_spacing, native_spacing, 1.0),
                target,
                exec,
            )?;
            (i, l)
        }
        None => (dummy, as3),
    };
    let (_, cropped) = center_crop(&img3, &lab3, size);
    Ok(cropped.index_axis(ndarray::Axis(0), 0).to_owned())
}

fn style_vector(
    style: &StyleSource,
    seed: u64,
    weights: &ModelWeights,
    config: &ModelConfig,
    exec: Exec,
) -> Result<Array1<f64>> {
    match style {
        StyleSource::Random => {
            let mut rng = rng_from_seed(seed);
            Ok(nets::standard_normal((1, config.latent_dim), &mut rng)
                .index_axis(ndarray::Axis(0), 0)
                .to_owned())
        }
        StyleSource::Fixed(z) => {
            if z.len() != config.latent_dim {
                return Err(Error::ShapeMismatch(format!(
                    "style vector length {} vs latent_dim {}",
                    z.len(),
                    config.latent_dim
                )));
            }
            Ok(z.clone())
        }
        StyleSource::Encode(image) => encode_style_with(image, weights, config, exec),
    }
}

fn encode_style_with(
    image: &Array2<f64>,
    weights: &ModelWeights,
    config: &ModelConfig,
    exec: Exec,
) -> Result<Array1<f64>> {
    let s = config.image_size;
    if image.dim() != (s, s) {
        return Err(Error::ShapeMismatch(format!(
            "style image {:?} vs model input ({s}, {s})",
            image.dim()
        )));
    }
    let mut batch = Array4::<f64>::zeros((1, 1, s, s));
    batch
        .index_axis_mut(ndarray::Axis(0), 0)
        .index_axis_move(ndarray::Axis(0), 0)
        .assign(image);
    let latent = nets::style_encoder_forward(&batch, weights, config, exec)?;
    Ok(latent.mu.index_axis(ndarray::Axis(0), 0).to_owned())
}

/// Deterministic style encoding of a reference image: mu of the encoder
/// posterior, no sampling. Requires a VAE checkpoint.
pub fn encode_style(checkpoint: impl AsRef<Path>, image: &Array2<f64>, exec: Exec) -> Result<Array1<f64>> {
    let ckpt = load_checkpoint(checkpoint, None)?;
    encode_style_with(image, &ckpt.weights, &ckpt.model_config, exec)
}

/// Run the generator over every (frame, slice) label map of the sequence.
/// One style vector is shared across the whole dataset unless
/// `shared_style` is off, in which case each slice draws its own from the
/// seed.
pub fn synthesize_sequence(request: &SynthesisRequest, exec: Exec) -> Result<SyntheticDataset> {
    let ckpt = load_checkpoint(&request.checkpoint, None)?;
    let weights = &ckpt.weights;
    let config = &ckpt.model_config;
    let s = config.image_size;

    let labels = &request.labels;
    labels.validate_classes()?;
    let max_class = labels.data.iter().copied().max().unwrap_or(0) as usize;
    if max_class >= config.num_classes {
        return Err(Error::Config(format!(
            "labels use class {max_class} but the model has {} classes",
            config.num_classes
        )));
    }

    let (nt, nz) = (labels.num_frames(), labels.num_slices());
    let spacing = match request.resample_to_spacing {
        Some(t) => t,
        None => labels.in_plane_spacing,
    };

    // Fit every slice to the model grid first; these fitted maps are the
    // exported ground truth.
    let mut fitted = Array4::<u8>::zeros((nt, nz, s, s));
    for t in 0..nt {
        for z in 0..nz {
            let slice = labels
                .data
                .index_axis(ndarray::Axis(0), t)
                .index_axis_move(ndarray::Axis(0), z)
                .to_owned();
            let f = fit_label_slice(
                &slice,
                labels.in_plane_spacing,
                request.resample_to_spacing,
                s,
                exec,
            )?;
            fitted.index_axis_mut(ndarray::Axis(0), t).index_axis_move(ndarray::Axis(0), z).assign(&f);
        }
    }

    let z_shared = style_vector(&request.style, request.seed, weights, config, exec)?;

    let mut images = Array4::<f64>::zeros((nt, nz, s, s));
    let flat_count = nt * nz;
    let chunk = request.batch_slices.max(1);
    let mut idx = 0;
    while idx < flat_count {
        let count = chunk.min(flat_count - idx);
        let slice_labels: Vec<Array2<u8>> = (idx..idx + count)
            .map(|k| {
                fitted
                    .index_axis(ndarray::Axis(0), k / nz)
                    .index_axis_move(ndarray::Axis(0), k % nz)
                    .to_owned()
            })
            .collect();
        let masks = one_hot_batch(&slice_labels, config.num_classes)?;
        let mut zs = ndarray::Array2::<f64>::zeros((count, config.latent_dim));
        for (row, k) in (idx..idx + count).enumerate() {
            if request.shared_style {
                zs.row_mut(row).assign(&z_shared);
            } else {
                let mut rng = rng_from_seed(request.seed.wrapping_add(1 + k as u64));
                let z = nets::standard_normal((1, config.latent_dim), &mut rng);
                zs.row_mut(row).assign(&z.index_axis(ndarray::Axis(0), 0));
            }
        }
        let out = nets::generator_forward(&zs, &masks, weights, config, exec)?;
        for (row, k) in (idx..idx + count).enumerate() {
            images
                .index_axis_mut(ndarray::Axis(0), k / nz)
                .index_axis_move(ndarray::Axis(0), k % nz)
                .assign(&out.index_axis(ndarray::Axis(0), row).index_axis_move(ndarray::Axis(0), 0));
        }
        idx += count;
    }

    let params_hash = request.params_hash.clone().unwrap_or_else(|| {
        sha256_hex(fitted.as_slice().expect("standard layout"))
    });
    let checkpoint_id = request
        .checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());

    Ok(SyntheticDataset {
        images,
        labels: LabelVolume4D {
            data: fitted,
            in_plane_spacing: spacing,
            slice_spacing: labels.slice_spacing,
            frame_times: labels.frame_times.clone(),
        },
        provenance: Provenance {
            checkpoint_id,
            params_hash,
            style: request.style.descriptor(),
            seed: request.seed,
        },
    })
}

const IMAGES_NAME: &str = "images.nii.gz";
const LABELS_NAME: &str = "labels.nii.gz";
const PROVENANCE_NAME: &str = "provenance.txt";
const FRAME_TIMES_NAME: &str = "frame_times.txt";

/// Write the paired 4D NIfTI image and label files plus the provenance
/// sidecar. Refuses to overwrite existing outputs unless `overwrite`.
pub fn export_dataset(dataset: &SyntheticDataset, dir: impl AsRef<Path>, overwrite: bool) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for name in [IMAGES_NAME, LABELS_NAME, PROVENANCE_NAME] {
        let p = dir.join(name);
        if p.exists() && !overwrite {
            return Err(Error::WouldOverwrite(p));
        }
    }
    let labels = &dataset.labels;
    let dt = if labels.frame_times.len() >= 2 {
        labels.frame_times[1] - labels.frame_times[0]
    } else {
        0.0
    };
    crate::nifti::write_images4(
        dir.join(IMAGES_NAME),
        &dataset.images,
        labels.in_plane_spacing,
        labels.slice_spacing,
        dt,
    )?;
    crate::nifti::write_labels4(
        dir.join(LABELS_NAME),
        &labels.data,
        labels.in_plane_spacing,
        labels.slice_spacing,
        dt,
    )?;
    let p = &dataset.provenance;
    let mut sidecar = String::new();
    sidecar.push_str(&format!("checkpoint: {}\n", p.checkpoint_id));
    sidecar.push_str(&format!("params_hash: {}\n", p.params_hash));
    sidecar.push_str(&format!("style: {}\n", p.style));
    sidecar.push_str(&format!("seed: {}\n", p.seed));
    sidecar.push_str(&format!("frames: {}\n", labels.num_frames()));
    sidecar.push_str(&format!("slices: {}\n", labels.num_slices()));
    std::fs::write(dir.join(PROVENANCE_NAME), sidecar)?;
    let times: String = labels
        .frame_times
        .iter()
        .map(|t| format!("{t:.9}\n"))
        .collect();
    std::fs::write(dir.join(FRAME_TIMES_NAME), times)?;
    Ok(())
}

/// Reload an exported dataset; labels come back bit-identical, images at
/// float32 serialization precision.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<SyntheticDataset> {
    let dir = dir.as_ref();
    let img_vol = crate::nifti::read(dir.join(IMAGES_NAME))?;
    let in_plane = img_vol.header.pixdim[1] as f64;
    let slice_sp = img_vol.header.pixdim[3] as f64;
    let dt = img_vol.header.pixdim[4] as f64;
    let images = img_vol.into_array4()?;
    let lab_vol = crate::nifti::read(dir.join(LABELS_NAME))?;
    let labels4 = lab_vol.into_array4()?.mapv(|v| v as u8);

    let mut provenance = Provenance {
        checkpoint_id: String::new(),
        params_hash: String::new(),
        style: String::new(),
        seed: 0,
    };
    let sidecar_path = dir.join(PROVENANCE_NAME);
    let sidecar = std::fs::read_to_string(&sidecar_path)
        .map_err(|_| Error::MissingFile(sidecar_path.clone()))?;
    for line in sidecar.lines() {
        if let Some((k, v)) = line.split_once(':') {
            let v = v.trim();
            match k.trim() {
                "checkpoint" => provenance.checkpoint_id = v.to_string(),
                "params_hash" => provenance.params_hash = v.to_string(),
                "style" => provenance.style = v.to_string(),
                "seed" => provenance.seed = v.parse().unwrap_or(0),
                _ => {}
            }
        }
    }

    let nt = images.dim().0;
    let frame_times = (0..nt).map(|k| k as f64 * dt).collect();
    Ok(SyntheticDataset {
        images,
        labels: LabelVolume4D {
            data: labels4,
            in_plane_spacing: in_plane,
            slice_spacing: slice_sp,
            frame_times,
        },
        provenance,
    })
}
