//! Command-line entry point for the cardiac MR synthesis pipeline.
//!
//! Every subcommand reads one declarative TOML config (flags override it),
//! writes a resolved-config snapshot beside its outputs, exits 0 on
//! success, and prints a single-line `error: ...` to stderr otherwise.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use cinesynth::config::RunConfig;
use cinesynth::data::{build_training_set, cache, load_cases};
use cinesynth::exec::Exec;
use cinesynth::phantom::generate_label_sequence;
use cinesynth::synth::{
    coherence_report, export_dataset, load_dataset, phantom_params_hash, render_gif,
    render_montage, synthesize_sequence, MontageAxis, StyleSource, SynthesisRequest,
};
use cinesynth::train::train;

/// Environment variable holding the default root for `--out` paths.
const ENV_OUT_ROOT: &str = "CINESYNTH_OUT_ROOT";
/// Environment variable holding the default root for preprocessed caches.
const ENV_CACHE_ROOT: &str = "CINESYNTH_CACHE_ROOT";

#[derive(Parser)]
#[command(
    name = "cinesynth",
    version,
    about = "Labeled 4D short-axis cardiac MR synthesis: phantom labels, conditional GAN training, label-swap synthesis",
    after_help = "Relative --out/--cache paths resolve under $CINESYNTH_OUT_ROOT / $CINESYNTH_CACHE_ROOT when those are set."
)]
struct Cli {
    /// Path to the TOML run configuration; omitted means all defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a 4D heart label sequence and export it as NIfTI.
    Phantom {
        /// Output directory (labels.nii.gz, frame_times.txt, snapshot).
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the preprocessed training cache from an annotated dataset.
    Preprocess {
        /// Dataset root holding NIfTI cases.
        #[arg(long)]
        data: PathBuf,
        /// Cache directory to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the synthesis model on a preprocessed cache.
    Train {
        /// Cache directory produced by `preprocess`.
        #[arg(long)]
        data: PathBuf,
        /// Run directory for checkpoints and the loss history.
        #[arg(long)]
        out: PathBuf,
        /// Resume from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Synthesize a labeled dataset from a checkpoint and label source.
    Synth {
        /// Trained checkpoint file.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Label sequence exported earlier (labels.nii.gz); mutually
        /// exclusive with --phantom.
        #[arg(long, conflicts_with = "phantom")]
        labels: Option<PathBuf>,
        /// Generate the labels from the configured phantom parameters.
        #[arg(long)]
        phantom: bool,
        /// Optional style reference image (NIfTI slice or 2D volume).
        #[arg(long)]
        style: Option<PathBuf>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the configured style seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Replace existing outputs.
        #[arg(long)]
        overwrite: bool,
    },
    /// Render a 2xN label/image grid from an exported dataset.
    Montage {
        /// Dataset directory produced by `synth`.
        #[arg(long)]
        dataset: PathBuf,
        /// Grid axis: time (fixed slice) or slice (fixed frame).
        #[arg(long, default_value = "time")]
        axis: String,
        /// The fixed slice (axis=time) or frame (axis=slice) index.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Limit the number of grid columns.
        #[arg(long)]
        count: Option<usize>,
        /// Output PNG path.
        #[arg(long)]
        out: PathBuf,
        /// Also write an animated GIF over time at the fixed slice.
        #[arg(long)]
        gif: bool,
    },
    /// Compute the coherence report of an exported dataset.
    Report {
        /// Dataset directory produced by `synth`.
        #[arg(long)]
        dataset: PathBuf,
        /// Output text file.
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve_under(root_var: &str, path: PathBuf) -> PathBuf {
    if path.is_absolute() {
        return path;
    }
    match std::env::var_os(root_var) {
        Some(root) if !root.is_empty() => Path::new(&root).join(path),
        _ => path,
    }
}

fn load_config(path: &Option<PathBuf>) -> anyhow::Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::from_file(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn snapshot_next_to(config: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let dir = if out.extension().is_some() {
        out.parent().unwrap_or(Path::new(".")).to_path_buf()
    } else {
        out.to_path_buf()
    };
    config.write_snapshot(&dir)?;
    Ok(())
}

fn read_style_slice(path: &Path, size: usize) -> anyhow::Result<ndarray::Array2<f64>> {
    let vol = cinesynth::nifti::read(path)?;
    let grid = vol.into_array4()?;
    let (_, _, h, w) = grid.dim();
    if h != size || w != size {
        bail!(
            "style image is {h}x{w} but the model expects {size}x{size}; \
             preprocess it to the model grid first"
        );
    }
    // Middle frame, middle slice.
    let t = grid.dim().0 / 2;
    let z = grid.dim().1 / 2;
    Ok(grid
        .index_axis(ndarray::Axis(0), t)
        .index_axis_move(ndarray::Axis(0), z)
        .to_owned())
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let config = load_config(&cli.config)?;
    let exec = Exec::default();

    match cli.command {
        Command::Phantom { out } => {
            let out = resolve_under(ENV_OUT_ROOT, out);
            let labels = generate_label_sequence(&config.phantom)?;
            std::fs::create_dir_all(&out)?;
            let dt = config.phantom.cycle_length / config.phantom.num_frames as f64;
            cinesynth::nifti::write_labels4(
                out.join("labels.nii.gz"),
                &labels.data,
                labels.in_plane_spacing,
                labels.slice_spacing,
                dt,
            )?;
            let times: String = labels.frame_times.iter().map(|t| format!("{t:.9}\n")).collect();
            std::fs::write(out.join("frame_times.txt"), times)?;
            snapshot_next_to(&config, &out)?;
            println!(
                "wrote {} ({} frames x {} slices x {} x {})",
                out.join("labels.nii.gz").display(),
                labels.num_frames(),
                labels.num_slices(),
                labels.height(),
                labels.width()
            );
        }
        Command::Preprocess { data, out } => {
            let out = resolve_under(ENV_CACHE_ROOT, out);
            let cases = load_cases(&data, &config.data)
                .with_context(|| format!("scanning {}", data.display()))?;
            if cases.is_empty() {
                bail!("no cases matched {} under {}", config.data.image_glob, data.display());
            }
            let set = build_training_set(&cases, &config.data, exec)?;
            cache::write_cache(&out, &set.train)?;
            if !set.validation.is_empty() {
                cache::write_cache(out.join("validation"), &set.validation)?;
            }
            snapshot_next_to(&config, &out)?;
            println!(
                "cached {} training pairs ({} validation) in {}",
                set.train.len(),
                set.validation.len(),
                out.display()
            );
        }
        Command::Train {
            data,
            out,
            resume,
            epochs,
            seed,
        } => {
            let out = resolve_under(ENV_OUT_ROOT, out);
            let data = resolve_under(ENV_CACHE_ROOT, data);
            let mut cfg = config.clone();
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let pairs = cache::read_cache(&data)
                .with_context(|| format!("reading cache {}", data.display()))?;
            snapshot_next_to(&cfg, &out)?;
            let outcome = train(
                &pairs,
                &cfg.model,
                &cfg.train,
                &out,
                resume.as_deref(),
                None,
                exec,
            )?;
            println!("final checkpoint: {}", outcome.final_checkpoint.display());
        }
        Command::Synth {
            checkpoint,
            labels,
            phantom,
            style,
            out,
            seed,
            overwrite,
        } => {
            let out = resolve_under(ENV_OUT_ROOT, out);
            let mut cfg = config.clone();
            if let Some(s) = seed {
                cfg.synth.seed = s;
            }

            let (label_volume, params_hash) = if phantom {
                let labels = generate_label_sequence(&cfg.phantom)?;
                let hash = phantom_params_hash(&cfg.phantom);
                (labels, Some(hash))
            } else if let Some(path) = labels {
                let vol = cinesynth::nifti::read(&path)?;
                let in_plane = vol.header.pixdim[1] as f64;
                let slice_sp = vol.header.pixdim[3] as f64;
                let dt = vol.header.pixdim[4] as f64;
                let data = vol.into_array4()?.mapv(|v| v as u8);
                let nt = data.dim().0;
                (
                    cinesynth::volume::LabelVolume4D {
                        data,
                        in_plane_spacing: in_plane,
                        slice_spacing: slice_sp,
                        frame_times: (0..nt).map(|k| k as f64 * dt).collect(),
                    },
                    None,
                )
            } else {
                bail!("pass either --labels <file> or --phantom");
            };

            let mut request = SynthesisRequest::new(&checkpoint, label_volume);
            request.seed = cfg.synth.seed;
            request.shared_style = cfg.synth.shared_style;
            request.batch_slices = cfg.synth.batch_slices;
            request.params_hash = params_hash;
            if cfg.synth.resample_to_training {
                request.resample_to_spacing = Some(cfg.data.target_spacing);
            }
            if let Some(style_path) = style {
                let ckpt = cinesynth::train::load_checkpoint(&checkpoint, None)?;
                let image = read_style_slice(&style_path, ckpt.model_config.image_size)?;
                request.style = StyleSource::Encode(image);
            }

            let dataset = synthesize_sequence(&request, exec)?;
            export_dataset(&dataset, &out, overwrite)?;
            snapshot_next_to(&cfg, &out)?;
            println!(
                "synthesized {} frames x {} slices into {}",
                dataset.labels.num_frames(),
                dataset.labels.num_slices(),
                out.display()
            );
        }
        Command::Montage {
            dataset,
            axis,
            index,
            count,
            out,
            gif,
        } => {
            let out = resolve_under(ENV_OUT_ROOT, out);
            let axis: MontageAxis = axis.parse()?;
            let ds = load_dataset(&dataset)?;
            let cells = render_montage(&ds, axis, index, count, &out)?;
            if gif {
                let slice = match axis {
                    MontageAxis::Time => index,
                    MontageAxis::Slice => ds.labels.num_slices() / 2,
                };
                render_gif(&ds, slice, out.with_extension("gif"))?;
            }
            snapshot_next_to(&config, &out)?;
            println!("wrote {} ({} columns)", out.display(), cells);
        }
        Command::Report { dataset, out } => {
            let out = resolve_under(ENV_OUT_ROOT, out);
            let ds = load_dataset(&dataset)?;
            let report = coherence_report(&ds)?;
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            std::fs::write(&out, report.to_text())?;
            snapshot_next_to(&config, &out)?;
            print!("{}", report.to_text());
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        // One machine-parsable line.
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
