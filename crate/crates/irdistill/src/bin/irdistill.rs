//! Thin command-line front end over the library pipeline.
//!
//! Every subcommand maps onto one library entry point; all behavior lives
//! in the crate so it stays testable. Config resolution order is defaults,
//! then `--config FILE`, then repeated `--set key=value`, then dedicated
//! flags. Exit codes: 0 on success, 2 on a failed gradient check, 1 on any
//! other error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use irdistill::datagen::{gen_dataset, make_splits, Manifest, Provenance};
use irdistill::metrics::MetricsReport;
use irdistill::pipeline::{
    ablation_csv, evaluate_model, format_gradcheck_line, generate_pseudo_labels, gradcheck_ok,
    run_ablation, run_gradcheck, train_student, train_teacher, AblationAxis, GradScope,
    StudentMode, TrainConfig,
};
use irdistill::{Error, Result};

#[derive(Parser)]
#[command(name = "irdistill", version, about = "Two-stage semi-supervised IR small-target distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Shared config plumbing for the training-family subcommands.
#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines (# comments allowed).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set lr=0.002 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Dataset directory (overrides data_dir).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for checkpoints and logs (overrides out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        for pair in &self.set {
            let (key, value) = pair.split_once('=').ok_or_else(|| {
                Error::Config(format!("--set {pair:?}: expected key=value"))
            })?;
            cfg.apply(key.trim(), value.trim())?;
        }
        if let Some(data) = &self.data {
            cfg.data_dir = data.clone();
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic IR scenes, masks, and an unlabeled manifest.
    GenData {
        /// Output dataset directory.
        #[arg(long, default_value = "data")]
        out: PathBuf,
        /// Train-pool scenes (labeled + unlabeled after `split`).
        #[arg(long, default_value_t = 400)]
        scenes: usize,
        /// Held-out validation scenes.
        #[arg(long, default_value_t = 80)]
        val_scenes: usize,
        /// Scene generator seed.
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Re-split a manifest into labeled and unlabeled rows.
    Split {
        /// Manifest to split.
        #[arg(long)]
        manifest: PathBuf,
        /// Fraction of the train pool to label, in (0, 1].
        #[arg(long, default_value_t = 0.1)]
        fraction: f64,
        /// Split seed.
        #[arg(long, default_value_t = 11)]
        seed: u64,
        /// Where to write the split manifest (defaults to in place).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage One: train the adapter + decoder teacher on labeled scenes.
    TrainTeacher {
        #[command(flatten)]
        config: ConfigArgs,
        /// Split manifest (TSV) to train from.
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Run a teacher over the train pool and write pseudo-label masks.
    GenPseudo {
        /// Teacher checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory the manifest paths are relative to.
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Split manifest (TSV) naming the train pool.
        #[arg(long)]
        manifest: PathBuf,
        /// Where to write the pseudo manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage Two: train the student on pseudo-labels (or labels directly).
    TrainStudent {
        #[command(flatten)]
        config: ConfigArgs,
        /// Training manifest: pseudo rows in pseudo mode, labeled in direct.
        #[arg(long)]
        manifest: PathBuf,
        /// Manifest holding the validation rows (defaults to --manifest).
        #[arg(long)]
        val_manifest: Option<PathBuf>,
        /// pseudo: teacher masks only; direct: ground-truth labeled rows.
        #[arg(long, default_value = "pseudo")]
        mode: String,
    },
    /// Score a checkpoint on one provenance split of a manifest.
    Eval {
        /// Teacher or student checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory the manifest paths are relative to.
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Manifest naming the evaluation rows.
        #[arg(long)]
        manifest: PathBuf,
        /// Which provenance to score: labeled, unlabeled, pseudo, or val.
        #[arg(long, default_value = "val")]
        split: String,
        /// Binarization threshold (defaults to the checkpoint's).
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Finite-difference audit of analytic gradients (exit 2 on failure).
    Gradcheck {
        /// all, primitives, experts, router, or losses.
        #[arg(long, default_value = "all")]
        scope: String,
    },
    /// Sweep one design axis, training one teacher per setting.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Split manifest (TSV) to train from.
        #[arg(long)]
        manifest: PathBuf,
        /// insertion, experts, or lambda_sparse.
        #[arg(long)]
        axis: String,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, scenes, val_scenes, seed } => {
            let manifest = gen_dataset(&out, scenes, val_scenes, seed)?;
            let path = out.join("manifest.tsv");
            manifest.save(&path)?;
            println!(
                "wrote {} scenes (+{} val) under {} and manifest {}",
                scenes,
                val_scenes,
                out.display(),
                path.display()
            );
        }
        Command::Split { manifest, fraction, seed, out } => {
            let loaded = Manifest::load(&manifest)?;
            let split = make_splits(&loaded, fraction, seed)?;
            let target = out.unwrap_or(manifest);
            split.save(&target)?;
            let labeled = split.with_provenance(Provenance::Labeled).len();
            let unlabeled = split.with_provenance(Provenance::Unlabeled).len();
            println!(
                "{}: {labeled} labeled / {unlabeled} unlabeled (fraction {fraction}, seed {seed})",
                target.display()
            );
        }
        Command::TrainTeacher { config, manifest } => {
            let cfg = config.resolve()?;
            let loaded = Manifest::load(&manifest)?;
            let report = train_teacher(&cfg, &cfg.data_dir, &loaded)?;
            println!(
                "teacher: final loss {:.6}, checkpoint {}",
                report.final_loss,
                report.checkpoint.display()
            );
            if let Some(miou) = report.best_val_miou {
                println!("best val mIoU {miou:.6}");
            }
        }
        Command::GenPseudo { checkpoint, data, manifest, out } => {
            let loaded = Manifest::load(&manifest)?;
            let pseudo = generate_pseudo_labels(&checkpoint, &data, &loaded)?;
            pseudo.save(&out)?;
            println!("wrote {} pseudo-labeled rows to {}", pseudo.entries.len(), out.display());
        }
        Command::TrainStudent { config, manifest, val_manifest, mode } => {
            let cfg = config.resolve()?;
            let mode: StudentMode = mode.parse()?;
            let train = Manifest::load(&manifest)?;
            let val = match val_manifest {
                Some(p) => Some(Manifest::load(&p)?),
                None => None,
            };
            let val_ref = val.as_ref().or(Some(&train));
            let report = train_student(&cfg, &cfg.data_dir, &train, val_ref, mode)?;
            println!(
                "student: final loss {:.6}, checkpoint {}",
                report.final_loss,
                report.checkpoint.display()
            );
            if let Some(miou) = report.best_val_miou {
                println!("best val mIoU {miou:.6}");
            }
        }
        Command::Eval { checkpoint, data, manifest, split, threshold } => {
            let loaded = Manifest::load(&manifest)?;
            let split = Provenance::parse(&split)?;
            let report = evaluate_model(&checkpoint, &data, &loaded, split, threshold)?;
            println!("{}", MetricsReport::csv_header());
            println!("{}", report.csv_row(&checkpoint.display().to_string(), split.as_str()));
        }
        Command::Gradcheck { scope } => {
            let scope: GradScope = scope.parse()?;
            let lines = run_gradcheck(scope)?;
            for line in &lines {
                println!("{}", format_gradcheck_line(line));
            }
            if !gradcheck_ok(&lines) {
                return Err(Error::Gradcheck(
                    "at least one component failed; see lines above".into(),
                ));
            }
        }
        Command::Ablate { config, manifest, axis } => {
            let cfg = config.resolve()?;
            let axis: AblationAxis = axis.parse()?;
            let loaded = Manifest::load(&manifest)?;
            let rows = run_ablation(axis, &cfg, &cfg.data_dir, &loaded)?;
            let csv = ablation_csv(&rows);
            let path = cfg.out_dir.join(format!("ablation_{}.csv", axis.as_str()));
            std::fs::write(&path, &csv)?;
            print!("{csv}");
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
