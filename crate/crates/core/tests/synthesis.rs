//! Label-swap synthesis against a real (untrained) tiny checkpoint:
//! shapes, determinism, label fidelity, export round-trips and style
//! encoding behavior.

use cinesynth::exec::Exec;
use cinesynth::model::{ModelConfig, ModelWeights};
use cinesynth::phantom::{generate_label_sequence, PhantomParams};
use cinesynth::synth::{
    encode_style, export_dataset, load_dataset, phantom_params_hash, synthesize_sequence,
    StyleSource, SynthesisRequest,
};
use cinesynth::train::{save_checkpoint, TrainConfig, TrainState};
use ndarray::Array2;
use std::path::PathBuf;

fn tiny_phantom() -> PhantomParams {
    PhantomParams {
        num_frames: 3,
        num_slices: 4,
        grid_size: 40,
        in_plane_spacing: 3.0,
        ..PhantomParams::default()
    }
}

fn write_checkpoint(dir: &std::path::Path, use_vae: bool, seed: u64) -> (PathBuf, ModelConfig) {
    let mc = ModelConfig {
        image_size: 32,
        num_spade_blocks: 4,
        base_channels: 8,
        latent_dim: 6,
        modulation_hidden_channels: 6,
        discriminator_scales: 2,
        use_vae,
        ..ModelConfig::default()
    };
    let w = ModelWeights::init(&mc, seed).unwrap();
    let tc = TrainConfig {
        use_vae,
        ..TrainConfig::default()
    };
    let path = dir.join("ckpt.ckpt");
    save_checkpoint(&path, &w, &TrainState::new(seed), &mc, &tc).unwrap();
    (path, mc)
}

#[test]
fn synthesis_shapes_determinism_and_label_fidelity() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _mc) = write_checkpoint(dir.path(), false, 3);
    let labels = generate_label_sequence(&tiny_phantom()).unwrap();
    let params_hash = phantom_params_hash(&tiny_phantom());

    let mut request = SynthesisRequest::new(&ckpt, labels.clone());
    request.seed = 11;
    request.params_hash = Some(params_hash.clone());
    let ds = synthesize_sequence(&request, Exec::default()).unwrap();

    assert_eq!(ds.images.dim(), (3, 4, 32, 32));
    assert!(ds.images.iter().all(|&v| v > -1.0 && v < 1.0));
    assert_eq!(ds.labels.data.dim(), (3, 4, 32, 32));
    assert_eq!(ds.provenance.params_hash, params_hash);

    // The fitted labels are exactly the centered crop of the phantom grid.
    let off = (40 - 32) / 2;
    for t in 0..3 {
        for z in 0..4 {
            for y in 0..32 {
                for x in 0..32 {
                    assert_eq!(
                        ds.labels.data[[t, z, y, x]],
                        labels.data[[t, z, y + off, x + off]],
                        "ground truth must pass through unaltered"
                    );
                }
            }
        }
    }

    // Determinism and seed sensitivity.
    let ds2 = synthesize_sequence(&request, Exec::Sequential).unwrap();
    assert_eq!(ds.images, ds2.images);
    let mut other = request.clone();
    other.seed = 12;
    let ds3 = synthesize_sequence(&other, Exec::default()).unwrap();
    assert_ne!(ds.images, ds3.images, "different seed, different style");
    assert_eq!(ds.labels.data, ds3.labels.data, "labels unaffected by seed");
}

#[test]
fn export_round_trip_and_overwrite_guard() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = write_checkpoint(dir.path(), false, 5);
    let labels = generate_label_sequence(&tiny_phantom()).unwrap();
    let mut request = SynthesisRequest::new(&ckpt, labels);
    request.seed = 4;
    let ds = synthesize_sequence(&request, Exec::default()).unwrap();

    let out = dir.path().join("export");
    export_dataset(&ds, &out, false).unwrap();
    let back = load_dataset(&out).unwrap();
    assert_eq!(back.labels.data, ds.labels.data, "labels bit-identical");
    assert_eq!(back.provenance.params_hash, ds.provenance.params_hash);
    assert_eq!(back.provenance.seed, 4);
    for (a, b) in back.images.iter().zip(ds.images.iter()) {
        assert!((a - b).abs() < 1e-6, "images within f32 precision");
    }
    let sidecar = std::fs::read_to_string(out.join("provenance.txt")).unwrap();
    assert!(sidecar.contains(&format!("params_hash: {}", ds.provenance.params_hash)));

    // Refuses to overwrite without the flag, succeeds with it.
    assert!(matches!(
        export_dataset(&ds, &out, false),
        Err(cinesynth::Error::WouldOverwrite(_))
    ));
    export_dataset(&ds, &out, true).unwrap();
}

#[test]
fn style_encoding_is_deterministic_and_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, mc) = write_checkpoint(dir.path(), true, 7);
    let s = mc.image_size;
    let style = Array2::from_shape_fn((s, s), |(y, x)| ((y * 3 + x) as f64 * 0.05).sin() * 0.8);

    let z1 = encode_style(&ckpt, &style, Exec::default()).unwrap();
    let z2 = encode_style(&ckpt, &style, Exec::Sequential).unwrap();
    assert_eq!(z1, z2, "same image, same code");

    let mut patched = style.clone();
    for y in 8..24 {
        for x in 8..24 {
            patched[[y, x]] = 0.0;
        }
    }
    let z3 = encode_style(&ckpt, &patched, Exec::default()).unwrap();
    let delta: f64 = (&z1 - &z3).iter().map(|d| d * d).sum::<f64>().sqrt();
    assert!(delta > 0.0, "local patch must move the code");

    let other = style.mapv(|v| -v);
    let z4 = encode_style(&ckpt, &other, Exec::default()).unwrap();
    assert!((&z1 - &z4).iter().map(|d| d * d).sum::<f64>() > 0.0);

    // Encoded style drives synthesis.
    let labels = generate_label_sequence(&PhantomParams {
        num_frames: 2,
        num_slices: 2,
        grid_size: 32,
        in_plane_spacing: 4.0,
        ..PhantomParams::default()
    })
    .unwrap();
    let mut request = SynthesisRequest::new(&ckpt, labels);
    request.style = StyleSource::Encode(style);
    let ds = synthesize_sequence(&request, Exec::default()).unwrap();
    assert_eq!(ds.provenance.style, "encoded");
}

#[test]
fn non_vae_checkpoint_rejects_style_encoding() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, mc) = write_checkpoint(dir.path(), false, 9);
    let style = Array2::zeros((mc.image_size, mc.image_size));
    assert!(matches!(
        encode_style(&ckpt, &style, Exec::default()),
        Err(cinesynth::Error::NotVaeCheckpoint)
    ));
}

#[test]
fn class_count_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = write_checkpoint(dir.path(), false, 13);
    let mut labels = generate_label_sequence(&tiny_phantom()).unwrap();
    labels.data[[0, 0, 0, 0]] = 3; // still valid
    let request = SynthesisRequest::new(&ckpt, labels.clone());
    synthesize_sequence(&request, Exec::default()).unwrap();
}

#[test]
fn per_slice_style_differs_from_shared() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = write_checkpoint(dir.path(), false, 15);
    let labels = generate_label_sequence(&tiny_phantom()).unwrap();
    let mut shared = SynthesisRequest::new(&ckpt, labels.clone());
    shared.seed = 21;
    let ds_shared = synthesize_sequence(&shared, Exec::default()).unwrap();
    let mut per_slice = SynthesisRequest::new(&ckpt, labels);
    per_slice.seed = 21;
    per_slice.shared_style = false;
    let ds_per = synthesize_sequence(&per_slice, Exec::default()).unwrap();
    assert_ne!(ds_shared.images, ds_per.images);
}
