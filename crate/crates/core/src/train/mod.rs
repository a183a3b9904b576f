//! Alternating generator/discriminator optimization with deterministic
//! shuffling, checkpointing and loss logging.
//!
//! Determinism contract: given (seed, configs, dataset) a full run is
//! bit-exact on one device, batch order is a pure function of (seed,
//! epoch), and resuming from a checkpoint continues identically to the
//! uninterrupted run.

pub mod adam;
pub mod checkpoint;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::losses::{self, LossValues, LossWeights, PerceptualFeatures};
use crate::model::nets::{self, mask_pyramid};
use crate::model::{Binder, Graph, ModelConfig, ModelWeights, NodeId};
use crate::volume::TrainingPair;

pub use adam::Moments;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

/// ChaCha-based RNG with a fixed construction, used everywhere a seed is
/// expanded.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// How the `epochs` count is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationUnit {
    /// `epochs` passes over the shuffled dataset.
    Epochs,
    /// `epochs` optimizer steps in total.
    Steps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub batch_size: usize,
    pub epochs: usize,
    pub iteration_unit: IterationUnit,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub checkpoint_every: u64,
    pub use_vae: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.0002,
            adam_betas: (0.0, 0.9),
            batch_size: 32,
            epochs: 100,
            iteration_unit: IterationUnit::Epochs,
            seed: 0,
            loss_weights: LossWeights::default(),
            checkpoint_every: 500,
            use_vae: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<TrainConfig> {
        let mut errors = Vec::new();
        if self.learning_rate < 0.0 {
            errors.push(format!("learning_rate: must be >= 0, got {}", self.learning_rate));
        }
        if self.batch_size < 1 {
            errors.push(format!("batch_size: must be >= 1, got {}", self.batch_size));
        }
        if self.epochs < 1 {
            errors.push(format!("epochs: must be >= 1, got {}", self.epochs));
        }
        if errors.is_empty() {
            Ok(self.clone())
        } else {
            Err(Error::InvalidParams(errors))
        }
    }
}

/// Optimizer state; checkpointable and bit-exact on round-trip.
pub struct TrainState {
    pub step: u64,
    pub moments: Moments,
    pub rng: ChaCha8Rng,
    /// Exponential running averages of the loss terms.
    pub running: BTreeMap<String, f64>,
}

impl TrainState {
    pub fn new(seed: u64) -> TrainState {
        TrainState {
            step: 0,
            moments: Moments::new(),
            rng: rng_from_seed(splitmix(seed ^ 0x7261_6e64)),
            running: BTreeMap::new(),
        }
    }

    fn update_running(&mut self, values: &LossValues) {
        const ALPHA: f64 = 0.05;
        for (name, v) in [
            ("d_loss", values.d_loss),
            ("g_total", values.g_total),
            ("l1_to_real", values.l1_to_real),
        ] {
            let e = self.running.entry(name.to_string()).or_insert(v);
            *e = (1.0 - ALPHA) * *e + ALPHA * v;
        }
    }
}

/// Stack a batch of pairs into image `[N,1,S,S]` and one-hot `[N,K,S,S]`
/// arrays.
pub fn batch_arrays(
    batch: &[TrainingPair],
    num_classes: usize,
) -> Result<(Array4<f64>, Array4<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset("empty batch".into()));
    }
    let (h, w) = batch[0].image.dim();
    let mut images = Array4::<f64>::zeros((batch.len(), 1, h, w));
    for (i, p) in batch.iter().enumerate() {
        if p.image.dim() != (h, w) || p.label.dim() != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "pair {i} in batch: {:?}/{:?} vs ({h}, {w})",
                p.image.dim(),
                p.label.dim()
            )));
        }
        images
            .index_axis_mut(ndarray::Axis(0), i)
            .index_axis_move(ndarray::Axis(0), 0)
            .assign(&p.image);
    }
    let labels: Vec<Array2<u8>> = batch.iter().map(|p| p.label.clone()).collect();
    let masks = crate::model::one_hot_batch(&labels, num_classes)?;
    Ok((images, masks))
}

fn check_finite(name: &str, v: f64, step: u64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            term: name.to_string(),
            step,
        })
    }
}

/// Noise drawn for one training step, in a fixed order.
struct StepNoise {
    z_d: Array2<f64>,
    z_g: Array2<f64>,
}

fn draw_step_noise(n: usize, latent_dim: usize, rng: &mut ChaCha8Rng) -> StepNoise {
    StepNoise {
        z_d: nets::standard_normal((n, latent_dim), rng),
        z_g: nets::standard_normal((n, latent_dim), rng),
    }
}

/// Build the full generator-side pass: (optional) encoder, latent, fake
/// image, both discriminator passes and the loss terms. `noise` feeds the
/// reparameterization in VAE mode or is the latent itself otherwise.
#[allow(clippy::too_many_arguments)]
pub(crate) fn build_generator_pass(
    g: &mut Graph,
    binder: &mut Binder<'_>,
    images: &Array4<f64>,
    masks: &Array4<f64>,
    noise: &Array2<f64>,
    mconfig: &ModelConfig,
    weights: &LossWeights,
    use_vae: bool,
    perceptual: Option<&dyn PerceptualFeatures>,
) -> Result<(losses::LossTerms, NodeId)> {
    let real = g.constant(images.clone().into_dyn());
    let mask_full = g.constant(masks.clone().into_dyn());
    let mask_ids: Vec<NodeId> = mask_pyramid(masks, mconfig)
        .into_iter()
        .map(|m| g.constant(m.into_dyn()))
        .collect();

    let (z, latent) = if use_vae {
        let (mu, logvar) = nets::encoder_node(g, binder, real, mconfig)?;
        let half_logvar = g.affine(logvar, 0.5, 0.0);
        let sigma = g.exp(half_logvar);
        let eps = g.constant(noise.clone().into_dyn());
        let scaled = g.mul(sigma, eps);
        (g.add(mu, scaled), Some((mu, logvar)))
    } else {
        (g.constant(noise.clone().into_dyn()), None)
    };

    let fake = nets::generator_node(g, binder, z, &mask_ids, mconfig);
    let fake_scales = nets::discriminator_node(g, binder, fake, mask_full, mconfig);
    let real_scales = nets::discriminator_node(g, binder, real, mask_full, mconfig);

    let terms = losses::generator_loss_nodes(
        g,
        &fake_scales,
        &real_scales,
        fake,
        real,
        latent,
        perceptual.map(|p| (p, weights.lambda_perceptual)),
        weights,
    );
    Ok((terms, fake))
}

/// One optimization step: a discriminator update on the real batch and
/// freshly generated (detached) fakes, then a generator(+encoder) update.
pub fn train_step(
    batch: &[TrainingPair],
    weights: &mut ModelWeights,
    state: &mut TrainState,
    mconfig: &ModelConfig,
    tconfig: &TrainConfig,
    perceptual: Option<&dyn PerceptualFeatures>,
    exec: Exec,
) -> Result<LossValues> {
    let (images, masks) = batch_arrays(batch, mconfig.num_classes)?;
    let n = batch.len();
    let noise = draw_step_noise(n, mconfig.latent_dim, &mut state.rng);
    let t = state.step + 1;

    // ---- discriminator update (fakes detached) ----
    let z_d = if tconfig.use_vae {
        let latent = nets::style_encoder_forward(&images, weights, mconfig, exec)?;
        &latent.mu + &(latent.logvar.mapv(|lv| (0.5 * lv).exp()) * &noise.z_d)
    } else {
        noise.z_d.clone()
    };
    let fake_detached = nets::generator_forward(&z_d, &masks, weights, mconfig, exec)?;

    let d_loss_value;
    {
        let mut g = Graph::new(exec);
        let mut binder = Binder::new(weights, |name| name.starts_with("discriminator/"));
        let real = g.constant(images.clone().into_dyn());
        let fake = g.constant(fake_detached.clone().into_dyn());
        let mask_full = g.constant(masks.clone().into_dyn());
        let real_scales = nets::discriminator_node(&mut g, &mut binder, real, mask_full, mconfig);
        let fake_scales = nets::discriminator_node(&mut g, &mut binder, fake, mask_full, mconfig);
        let d_loss = losses::discriminator_loss_node(&mut g, &real_scales, &fake_scales);
        d_loss_value = g.scalar(d_loss);
        check_finite("d_loss", d_loss_value, state.step)?;
        g.backward(d_loss);
        let grads = binder.grads(&g);
        adam::adam_update(
            &mut weights.params,
            &grads,
            &mut state.moments,
            t,
            tconfig.learning_rate,
            tconfig.adam_betas,
        );
    }

    // ---- generator (+ encoder) update ----
    let values;
    {
        let mut g = Graph::new(exec);
        let mut binder = Binder::new(weights, |name| !name.starts_with("discriminator/"));
        let (terms, fake) = build_generator_pass(
            &mut g,
            &mut binder,
            &images,
            &masks,
            &noise.z_g,
            mconfig,
            &tconfig.loss_weights,
            tconfig.use_vae,
            perceptual,
        )?;

        let l1_to_real = {
            let fv = g.value(fake);
            let diff = fv - &images.clone().into_dyn();
            diff.mapv(f64::abs).sum() / diff.len() as f64
        };

        values = LossValues {
            d_loss: d_loss_value,
            g_adv: g.scalar(terms.g_adv),
            feature_match: g.scalar(terms.feature_match),
            perceptual: terms.perceptual.map(|p| g.scalar(p)).unwrap_or(0.0),
            kl: terms.kl.map(|k| g.scalar(k)).unwrap_or(0.0),
            g_total: g.scalar(terms.total),
            l1_to_real,
        };
        for (name, v) in [
            ("g_adv", values.g_adv),
            ("feature_match", values.feature_match),
            ("perceptual", values.perceptual),
            ("kl", values.kl),
            ("g_total", values.g_total),
        ] {
            check_finite(name, v, state.step)?;
        }

        g.backward(terms.total);
        let grads = binder.grads(&g);
        adam::adam_update(
            &mut weights.params,
            &grads,
            &mut state.moments,
            t,
            tconfig.learning_rate,
            tconfig.adam_betas,
        );
    }

    state.step += 1;
    state.update_running(&values);
    Ok(values)
}

/// Deterministic per-epoch shuffle: a pure function of (seed, epoch).
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_from_seed(splitmix(seed).wrapping_add(splitmix(epoch ^ 0xe90c)));
    order.shuffle(&mut rng);
    order
}

/// Batches per epoch under the drop-last policy: the last incomplete batch
/// is dropped unless it would be the only one.
pub fn steps_per_epoch(n_pairs: usize, batch_size: usize) -> usize {
    (n_pairs / batch_size).max(1)
}

fn batch_for_step(
    dataset: &[TrainingPair],
    seed: u64,
    step: u64,
    batch_size: usize,
) -> Vec<&TrainingPair> {
    let spe = steps_per_epoch(dataset.len(), batch_size) as u64;
    let epoch = step / spe;
    let slot = (step % spe) as usize;
    let order = epoch_order(seed, epoch, dataset.len());
    let lo = slot * batch_size;
    let hi = (lo + batch_size).min(dataset.len());
    order[lo..hi].iter().map(|&i| &dataset[i]).collect()
}

/// Result of a training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub history: Vec<(u64, LossValues)>,
}

fn history_table(history: &[(u64, LossValues)]) -> String {
    let mut out = String::from(
        "step\td_loss\tg_adv\tfeature_match\tperceptual\tkl\tg_total\tl1_to_real\n",
    );
    for (step, v) in history {
        out.push_str(&format!(
            "{}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\n",
            step, v.d_loss, v.g_adv, v.feature_match, v.perceptual, v.kl, v.g_total, v.l1_to_real
        ));
    }
    out
}

/// Run (or resume) training. Writes checkpoints every
/// `checkpoint_every` steps plus a final one, and the loss history as a
/// tab-separated table next to them.
pub fn train(
    dataset: &[TrainingPair],
    mconfig: &ModelConfig,
    tconfig: &TrainConfig,
    out_dir: impl AsRef<Path>,
    resume: Option<&Path>,
    perceptual: Option<&dyn PerceptualFeatures>,
    exec: Exec,
) -> Result<TrainOutcome> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let mconfig = mconfig.validate()?;
    let tconfig = tconfig.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("training dataset is empty".into()));
    }
    if tconfig.use_vae != mconfig.use_vae {
        return Err(Error::Config(format!(
            "use_vae disagrees between model ({}) and training ({}) settings",
            mconfig.use_vae, tconfig.use_vae
        )));
    }

    let (mut weights, mut state) = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path, Some(&mconfig))?;
            // Resuming may extend the run (epochs) and change checkpoint
            // cadence, but everything that shapes the optimization
            // trajectory must match or the continuation would diverge.
            let normalize = |c: &TrainConfig| TrainConfig {
                epochs: 1,
                checkpoint_every: 0,
                ..c.clone()
            };
            if normalize(&ckpt.train_config) != normalize(&tconfig) {
                return Err(Error::CheckpointConfigMismatch(
                    "training settings differ from the checkpoint".into(),
                ));
            }
            (ckpt.weights, ckpt.state)
        }
        None => (
            ModelWeights::init(&mconfig, tconfig.seed)?,
            TrainState::new(tconfig.seed),
        ),
    };

    let spe = steps_per_epoch(dataset.len(), tconfig.batch_size) as u64;
    let total_steps = match tconfig.iteration_unit {
        IterationUnit::Epochs => tconfig.epochs as u64 * spe,
        IterationUnit::Steps => tconfig.epochs as u64,
    };

    let mut history = Vec::new();
    let history_path = out_dir.join("loss_history.tsv");
    let final_path = out_dir.join("checkpoint_final.ckpt");

    while state.step < total_steps {
        let step = state.step;
        let batch = batch_for_step(dataset, tconfig.seed, step, tconfig.batch_size);
        let owned: Vec<TrainingPair> = batch.into_iter().cloned().collect();
        let values = train_step(&owned, &mut weights, &mut state, &mconfig, &tconfig, perceptual, exec)?;
        let epoch = step / spe;
        println!(
            "[train] step={} epoch={} d={:.6} g_adv={:.6} fm={:.6} kl={:.6} l1={:.6}",
            step + 1,
            epoch,
            values.d_loss,
            values.g_adv,
            values.feature_match,
            values.kl,
            values.l1_to_real
        );
        history.push((step + 1, values));

        if tconfig.checkpoint_every > 0 && state.step % tconfig.checkpoint_every == 0 {
            let path = out_dir.join(format!("checkpoint_step{:08}.ckpt", state.step));
            save_checkpoint(&path, &weights, &state, &mconfig, &tconfig)?;
            std::fs::write(&history_path, history_table(&history))?;
        }
    }

    save_checkpoint(&final_path, &weights, &state, &mconfig, &tconfig)?;
    let mut f = std::fs::File::create(&history_path)?;
    f.write_all(history_table(&history).as_bytes())?;

    Ok(TrainOutcome {
        final_checkpoint: final_path,
        history,
    })
}

/// Diagnostics used by the gradient-correctness checks: evaluate the total
/// generator loss (and optionally its gradients) at fixed noise.
pub mod diagnostics {
    use super::*;

    pub fn generator_loss_value(
        weights: &ModelWeights,
        batch: &[TrainingPair],
        noise: &Array2<f64>,
        mconfig: &ModelConfig,
        lweights: &LossWeights,
        use_vae: bool,
        exec: Exec,
    ) -> Result<f64> {
        let (images, masks) = batch_arrays(batch, mconfig.num_classes)?;
        let mut g = Graph::new(exec);
        let mut binder = Binder::frozen(weights);
        let (terms, _) = build_generator_pass(
            &mut g, &mut binder, &images, &masks, noise, mconfig, lweights, use_vae, None,
        )?;
        Ok(g.scalar(terms.total))
    }

    pub fn generator_loss_grads(
        weights: &ModelWeights,
        batch: &[TrainingPair],
        noise: &Array2<f64>,
        mconfig: &ModelConfig,
        lweights: &LossWeights,
        use_vae: bool,
        exec: Exec,
    ) -> Result<(f64, BTreeMap<String, ndarray::ArrayD<f64>>)> {
        let (images, masks) = batch_arrays(batch, mconfig.num_classes)?;
        let mut g = Graph::new(exec);
        let mut binder = Binder::new(weights, |n| !n.starts_with("discriminator/"));
        let (terms, _) = build_generator_pass(
            &mut g, &mut binder, &images, &masks, noise, mconfig, lweights, use_vae, None,
        )?;
        let value = g.scalar(terms.total);
        g.backward(terms.total);
        Ok((value, binder.grads(&g)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batching_policy() {
        assert_eq!(steps_per_epoch(18, 32), 1, "single truncated batch");
        assert_eq!(steps_per_epoch(64, 32), 2);
        assert_eq!(steps_per_epoch(65, 32), 2, "tail dropped");
    }

    #[test]
    fn epoch_order_is_pure() {
        let a = epoch_order(5, 3, 10);
        let b = epoch_order(5, 3, 10);
        assert_eq!(a, b);
        let c = epoch_order(5, 4, 10);
        assert_ne!(a, c);
    }

    #[test]
    fn zero_epochs_rejected() {
        let bad = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn empty_dataset_rejected() {
        let mc = ModelConfig {
            image_size: 8,
            num_spade_blocks: 2,
            base_channels: 4,
            latent_dim: 4,
            modulation_hidden_channels: 4,
            discriminator_scales: 1,
            ..ModelConfig::default()
        };
        let dir = std::env::temp_dir().join("cinesynth-empty-ds");
        let err = train(&[], &mc, &TrainConfig::default(), &dir, None, None, Exec::Sequential)
            .unwrap_err();
        assert!(matches!(err, Error::EmptyDataset(_)));
    }

    /// The perceptual slot is off by default but a plugged extractor must
    /// contribute a finite, gradient-carrying term.
    #[test]
    fn pluggable_perceptual_term_wires_through() {
        struct PoolFeatures;
        impl PerceptualFeatures for PoolFeatures {
            fn build(&self, g: &mut Graph, images: NodeId) -> Vec<NodeId> {
                let a = g.avg_pool2x(images);
                let b = g.avg_pool2x(a);
                vec![a, b]
            }
        }

        let mc = ModelConfig {
            image_size: 8,
            num_spade_blocks: 2,
            base_channels: 4,
            latent_dim: 4,
            modulation_hidden_channels: 4,
            discriminator_scales: 1,
            ..ModelConfig::default()
        };
        let tc = TrainConfig {
            batch_size: 2,
            epochs: 1,
            iteration_unit: IterationUnit::Steps,
            seed: 3,
            ..TrainConfig::default()
        };
        let pairs: Vec<TrainingPair> = (0..2)
            .map(|k| TrainingPair {
                image: Array2::from_shape_fn((8, 8), |(y, x)| {
                    ((y + x + k) as f64 * 0.2).sin() * 0.5
                }),
                label: Array2::from_shape_fn((8, 8), |(y, x)| ((y + x + k) % 4) as u8),
                case_id: format!("p{k}"),
                phase: crate::volume::Phase::ED,
                slice_index: k,
            })
            .collect();
        let mut weights = ModelWeights::init(&mc, 3).unwrap();
        let mut state = TrainState::new(3);
        let with = train_step(&pairs, &mut weights, &mut state, &mc, &tc, Some(&PoolFeatures), Exec::Sequential)
            .unwrap();
        assert!(with.perceptual.is_finite() && with.perceptual > 0.0);

        // Off by default.
        let mut weights2 = ModelWeights::init(&mc, 3).unwrap();
        let mut state2 = TrainState::new(3);
        let without =
            train_step(&pairs, &mut weights2, &mut state2, &mc, &tc, None, Exec::Sequential).unwrap();
        assert_eq!(without.perceptual, 0.0);
        assert!(
            with.g_total != without.g_total,
            "the plugged term must enter the total"
        );
    }
}
