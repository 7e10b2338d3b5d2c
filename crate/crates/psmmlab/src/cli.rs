//! Command-line front end. Exit codes: 0 success, 2 input error,
//! 3 numerical failure, 4 artifact incompatibility.

use crate::eval::{run_eval, EvalSettings};
use crate::model::{parse_modalities, Model, Variant};
use crate::pool::{run_pool, PoolSettings};
use crate::report::run_report;
use crate::synth::{generate_synthetic, SynthSpec};
use crate::train::{resolve_protocol, run_train, TrainSettings};
use crate::{AppError, AppResult};
use clap::{Args, Parser, Subcommand};
use psmmlab_core::graph::Mode;
use psmmlab_core::protocol::{protocol_split, render_manifest, Split, SplitOptions};
use psmmlab_core::sdnet::{NormMode, Preset};
use psmmlab_core::seed::rng_for;
use psmmlab_core::tensor::Tensor;
use rand::Rng;
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(
    name = "psmmlab",
    about = "Desk-scale face anti-spoofing lab: rank-pooled dynamic images, \
             static-dynamic networks, partially shared multi-modal fusion.",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Network family: psmm, psmm-wobf, nhf, or sdnet.
    #[arg(long, default_value = "psmm")]
    pub variant: String,
    /// Trunk preset: toy (32px) or resnet18 (112px).
    #[arg(long, default_value = "toy")]
    pub preset: String,
    /// Comma-separated streams, e.g. color,depth,ir.
    #[arg(long, default_value = "color,depth,ir")]
    pub modalities: String,
    /// Normalization inside residual blocks: batch or none.
    #[arg(long, default_value = "batch")]
    pub norm: String,
}

impl ModelArgs {
    pub fn variant(&self) -> AppResult<Variant> {
        Variant::from_name(&self.variant)
            .ok_or_else(|| AppError::Input(format!("unknown variant {:?}", self.variant)))
    }

    pub fn preset(&self) -> AppResult<Preset> {
        Preset::from_name(&self.preset)
            .ok_or_else(|| AppError::Input(format!("unknown preset {:?}", self.preset)))
    }

    pub fn norm(&self) -> AppResult<NormMode> {
        match self.norm.as_str() {
            "batch" => Ok(NormMode::Batch),
            "none" => Ok(NormMode::None),
            other => Err(AppError::Input(format!("unknown norm mode {other:?}"))),
        }
    }

    pub fn modality_list(&self) -> AppResult<Vec<psmmlab_core::protocol::Modality>> {
        parse_modalities(&self.modalities)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a deterministic synthetic dataset tree.
    Synth {
        #[arg(long)]
        root: PathBuf,
        /// 2D subjects per ethnicity (1..=500).
        #[arg(long, default_value_t = 2)]
        subjects: u32,
        #[arg(long, default_value_t = 9)]
        frames: u32,
        #[arg(long, default_value_t = 32)]
        side: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also generate mask3d and silica attack clips.
        #[arg(long, default_value_t = false)]
        include_3d: bool,
    },
    /// Write rank-pooled dynamic images under each clip's dyn/ folder.
    Pool {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value_t = 7)]
        k: usize,
        /// Window stride; defaults to k (non-overlapping).
        #[arg(long)]
        stride: Option<usize>,
        /// Restrict to these streams (comma separated).
        #[arg(long)]
        modalities: Option<String>,
    },
    /// Materialize a protocol's train/valid/test manifests.
    Split {
        #[arg(long)]
        root: PathBuf,
        /// Sub-protocol id such as 1_1 or 4_3.
        #[arg(long)]
        protocol: String,
        #[arg(long)]
        out: PathBuf,
        /// Override the built-in protocol table.
        #[arg(long)]
        protocol_table: Option<PathBuf>,
        #[arg(long, default_value_t = false)]
        include_3d: bool,
    },
    /// Train a model on one sub-protocol.
    Train {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        protocol: String,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 25)]
        epochs: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        /// Epochs after which the rate is cut by 10, e.g. 15,20.
        #[arg(long, default_value = "15,20")]
        decay_epochs: String,
        #[arg(long, default_value_t = 7)]
        k: usize,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        protocol_table: Option<PathBuf>,
        #[arg(long, default_value_t = false)]
        include_3d: bool,
    },
    /// Score a split with a trained checkpoint and report PAD metrics.
    Eval {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        protocol: String,
        /// Checkpoint directory written by train.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Split to score: train, valid, or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Fixed decision threshold; otherwise EER on threshold-split.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, default_value = "valid")]
        threshold_split: String,
        #[arg(long)]
        stride: Option<usize>,
        /// Cross-check the checkpoint against this variant.
        #[arg(long)]
        variant: Option<String>,
        /// Cross-check the checkpoint against this preset.
        #[arg(long)]
        preset: Option<String>,
        /// Report the worst single instrument instead of pooled APCER.
        #[arg(long, default_value_t = false)]
        worst_pai: bool,
        #[arg(long)]
        protocol_table: Option<PathBuf>,
        #[arg(long, default_value_t = false)]
        include_3d: bool,
    },
    /// Aggregate per-sub-protocol report.kv files into one table.
    Report {
        /// report.kv files, one per sub-protocol.
        files: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the analytic gradients.
    Gradcheck {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_decay(s: &str) -> AppResult<Vec<usize>> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.push(
            part.parse()
                .map_err(|_| AppError::Input(format!("bad decay epoch {part:?}")))?,
        );
    }
    Ok(out)
}

fn parse_split(s: &str) -> AppResult<Split> {
    Split::from_name(s).ok_or_else(|| AppError::Input(format!("unknown split {s:?}")))
}

/// Caps rayon's worker count from PSMMLAB_THREADS when set.
pub fn configure_threads() -> AppResult<()> {
    match std::env::var("PSMMLAB_THREADS") {
        Err(_) => Ok(()),
        Ok(v) => {
            let n: usize = v
                .parse()
                .map_err(|_| AppError::Input(format!("PSMMLAB_THREADS={v:?} is not a number")))?;
            if n == 0 {
                return Err(AppError::input("PSMMLAB_THREADS must be positive"));
            }
            // Ignore the error if a global pool already exists.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            Ok(())
        }
    }
}

pub fn run(cli: Cli) -> AppResult<()> {
    match cli.command {
        Command::Synth { root, subjects, frames, side, seed, include_3d } => {
            let spec = SynthSpec {
                subjects_per_ethnicity: subjects,
                frames_per_clip: frames,
                side,
                seed,
                include_3d,
            };
            let plans = generate_synthetic(&root, &spec)?;
            println!("wrote {} clips under {}", plans.len(), root.display());
            Ok(())
        }
        Command::Pool { root, k, stride, modalities } => {
            let modalities = modalities.as_deref().map(parse_modalities).transpose()?;
            let windows = run_pool(&PoolSettings {
                root,
                k,
                stride: stride.unwrap_or(k),
                modalities,
            })?;
            println!("pooled {windows} windows");
            Ok(())
        }
        Command::Split { root, protocol, out, protocol_table, include_3d } => {
            let spec = resolve_protocol(protocol_table.as_deref(), &protocol)?;
            let catalog = crate::catalog::scan_catalog(&root)?;
            if catalog.is_empty() {
                return Err(AppError::Input(format!("no clips found under {}", root.display())));
            }
            let split = protocol_split(&catalog, &spec, &SplitOptions { include_3d })?;
            std::fs::create_dir_all(&out)?;
            for (name, manifest) in [
                ("train", &split.train),
                ("valid", &split.valid),
                ("test", &split.test),
            ] {
                let path = out.join(format!("{name}.txt"));
                std::fs::write(&path, render_manifest(manifest))?;
                println!("{name}: {} rows -> {}", manifest.len(), path.display());
                if manifest.is_empty() {
                    eprintln!("warning: {name} split of protocol {} is empty", spec.id());
                }
            }
            Ok(())
        }
        Command::Train {
            root,
            protocol,
            model,
            epochs,
            batch,
            lr,
            decay_epochs,
            k,
            stride,
            seed,
            out,
            protocol_table,
            include_3d,
        } => {
            let outcome = run_train(&TrainSettings {
                root,
                protocol,
                protocol_table,
                include_3d,
                variant: model.variant()?,
                preset: model.preset()?,
                modalities: model.modality_list()?,
                norm: model.norm()?,
                epochs,
                batch,
                lr,
                decay_epochs: parse_decay(&decay_epochs)?,
                k,
                stride: stride.unwrap_or(k),
                seed,
                out,
            })?;
            println!("checkpoint: {}", outcome.checkpoint_dir.display());
            println!("log: {}", outcome.log_path.display());
            Ok(())
        }
        Command::Eval {
            root,
            protocol,
            ckpt,
            out,
            split,
            threshold,
            threshold_split,
            stride,
            variant,
            preset,
            worst_pai,
            protocol_table,
            include_3d,
        } => {
            let expect_variant = variant
                .as_deref()
                .map(|v| {
                    Variant::from_name(v)
                        .ok_or_else(|| AppError::Input(format!("unknown variant {v:?}")))
                })
                .transpose()?;
            let expect_preset = preset
                .as_deref()
                .map(|p| {
                    Preset::from_name(p)
                        .ok_or_else(|| AppError::Input(format!("unknown preset {p:?}")))
                })
                .transpose()?;
            let outcome = run_eval(&EvalSettings {
                root,
                protocol,
                protocol_table,
                include_3d,
                checkpoint: ckpt,
                expect_variant,
                expect_preset,
                split: parse_split(&split)?,
                threshold,
                threshold_split: parse_split(&threshold_split)?,
                stride,
                worst_pai,
                out,
            })?;
            println!("threshold={}", outcome.threshold);
            print!("{}", psmmlab_core::metrics::format_keyvalue(&outcome.report));
            print!("{}", psmmlab_core::metrics::format_table(&outcome.report));
            Ok(())
        }
        Command::Report { files, out } => {
            let table = run_report(&files, out.as_deref())?;
            print!("{table}");
            Ok(())
        }
        Command::Gradcheck { model, samples, seed } => {
            let variant = model.variant()?;
            let preset = model.preset()?;
            let modalities = model.modality_list()?;
            let mut net = Model::build(variant, preset, &modalities, model.norm()?, seed)?;
            let side = preset.input_side();
            let mut rng = rng_for(seed, "gradcheck.data");
            let mut rand_image = |n: usize| {
                let data: Vec<f64> =
                    (0..n * 3 * side * side).map(|_| rng.random_range(0.05..0.95)).collect();
                Tensor::from_vec(&[n, 3, side, side], data).unwrap()
            };
            let batch = 2;
            let inputs: Vec<(psmmlab_core::protocol::Modality, Tensor, Tensor)> = modalities
                .iter()
                .map(|&m| (m, rand_image(batch), rand_image(batch)))
                .collect();
            let labels = Tensor::from_vec(&[batch, 1], vec![1.0, 0.0]).unwrap();
            let batch = crate::loader::Batch { inputs, labels };

            // Materialize the feed list once so central differences can
            // re-run the identical forward.
            net.forward_batch(&batch, Mode::Train)?;
            let report = match &mut net {
                Model::Sd(sd) => {
                    let feeds = [
                        (sd.handles.static_input, &batch.inputs[0].1),
                        (sd.handles.dynamic_input, &batch.inputs[0].2),
                        (sd.handles.label, &batch.labels),
                    ];
                    psmmlab_core::gradcheck::check_gradients(
                        &mut sd.graph,
                        sd.handles.total_loss,
                        &feeds,
                        &psmmlab_core::gradcheck::GradCheckConfig {
                            samples,
                            seed,
                            ..Default::default()
                        },
                    )?
                }
                Model::Psmm(ps) => {
                    let mut feeds: Vec<(psmmlab_core::graph::NodeId, &Tensor)> = Vec::new();
                    for (m, s, d) in &batch.inputs {
                        let (si, di) = ps.input_ids(*m).expect("configured modality");
                        feeds.push((si, s));
                        feeds.push((di, d));
                    }
                    feeds.push((ps.handles.label, &batch.labels));
                    psmmlab_core::gradcheck::check_gradients(
                        &mut ps.graph,
                        ps.handles.total_loss,
                        &feeds,
                        &psmmlab_core::gradcheck::GradCheckConfig {
                            samples,
                            seed,
                            ..Default::default()
                        },
                    )?
                }
            };
            println!(
                "checked={} max_rel_error={} tolerance={} pass={}",
                report.checked,
                report.max_rel_error,
                report.tolerance,
                report.passed()
            );
            if let Some(worst) = &report.worst {
                println!(
                    "worst param={} index={} analytic={} numeric={}",
                    worst.param, worst.index, worst.analytic, worst.numeric
                );
            }
            if !report.passed() {
                return Err(AppError::Numerical(format!(
                    "gradient check failed: max relative error {}",
                    report.max_rel_error
                )));
            }
            Ok(())
        }
    }
}
