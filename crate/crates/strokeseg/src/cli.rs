//! Command-line entry points: `split`, `train`, `infer`, `evaluate`.
//!
//! Every command is deterministic given its config and seed; runs persist
//! the fully-resolved configuration and its content hash alongside their
//! outputs. Exit status is 0 iff all requested work completed.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{load_config, PipelineConfig};
use crate::error::{Error, Result};
use crate::infer::{binarize, ensemble_predict_with, foreground_probability, load_ensemble, EnsembleSpec};
use crate::io::{load_manifest, save_manifest, save_mask, save_volume};
use crate::metrics::{evaluate_cases, Connectivity, LesionMatching};
use crate::preprocess::preprocess_case;
use crate::train::{crossval_summary, make_folds, run_crossval, train_fold};

#[derive(Parser)]
#[command(
    name = "strokeseg",
    about = "3D MRI stroke lesion segmentation pipeline",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Assign labeled manifest cases to k random folds.
    Split(SplitArgs),
    /// Train one fold or a full (optionally repeated) cross-validation.
    Train(TrainArgs),
    /// Predict native-space masks with a (possibly ensembled) model.
    Infer(InferArgs),
    /// Compute the four challenge metrics against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct SplitArgs {
    /// Input dataset manifest (JSON).
    #[arg(long)]
    manifest: PathBuf,
    /// Number of folds.
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Shuffle seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output manifest path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Pipeline configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Train a single fold.
    #[arg(long, conflicts_with = "all_folds")]
    fold: Option<usize>,
    /// Train every fold.
    #[arg(long)]
    all_folds: bool,
    /// Full cross-validation repeats (with --all-folds).
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    /// Resume from the latest checkpoint if present.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct InferArgs {
    /// Pipeline configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint path(s); repeat the flag to ensemble.
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
    /// Manifest of cases to predict (defaults to the config's manifest).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory for native-space masks.
    #[arg(long)]
    out_dir: PathBuf,
    /// Report per-case failures but keep processing the rest.
    #[arg(long)]
    keep_going: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory of predicted masks (<case_id>.nii.gz).
    #[arg(long)]
    pred_dir: PathBuf,
    /// Manifest with ground-truth labels.
    #[arg(long)]
    manifest: PathBuf,
    /// Component connectivity: 6, 18 or 26.
    #[arg(long, default_value = "26")]
    connectivity: String,
    /// Greedy one-to-one lesion matching instead of any-overlap.
    #[arg(long)]
    one_to_one: bool,
    /// Skip (but list) cases without predictions instead of failing.
    #[arg(long)]
    allow_missing: bool,
    /// Where to write metrics.csv / metrics.json (defaults to pred_dir).
    #[arg(long)]
    report_dir: Option<PathBuf>,
}

/// Run the CLI; returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let mut argv: Vec<std::ffi::OsString> = vec!["strokeseg".into()];
    argv.extend(args.into_iter().map(|a| a.into()));
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let outcome = match cli.command {
        Command::Split(args) => cmd_split(args),
        Command::Train(args) => cmd_train(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Evaluate(args) => cmd_evaluate(args),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn cmd_split(args: SplitArgs) -> Result<()> {
    let manifest = load_manifest(&args.manifest)?;
    let split = make_folds(&manifest, args.k, args.seed)?;
    save_manifest(&split, &args.out)?;
    println!(
        "split {} labeled cases into {} folds (sizes {:?}) -> {}",
        split.folds.len(),
        args.k,
        split.fold_sizes(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg: PipelineConfig = load_config(&args.config)?;
    cfg.train.resume = args.resume;
    let manifest = load_manifest(&cfg.manifest)?;
    if manifest.num_folds() == 0 {
        return Err(Error::Train(
            "manifest has no folds; run `strokeseg split` first".into(),
        ));
    }
    cfg.echo_to(&cfg.train.checkpoint_dir)?;

    if args.all_folds {
        let results = run_crossval(
            &manifest,
            &cfg.network,
            &cfg.train,
            &cfg.preprocess,
            args.repeats,
        )?;
        print!("{}", crossval_summary(&results, cfg.train.folds));
        println!("{} checkpoints under {}", results.len(), cfg.train.checkpoint_dir.display());
    } else {
        let fold = args.fold.ok_or_else(|| {
            Error::Config("pass --fold <N> or --all-folds".into())
        })?;
        let result = train_fold(&manifest, fold, &cfg.network, &cfg.train, &cfg.preprocess)?;
        if !result.pretrained_skipped.is_empty() {
            println!(
                "pretrained weights: skipped {} mismatched tensor(s): {}",
                result.pretrained_skipped.len(),
                result.pretrained_skipped.join(", ")
            );
        }
        println!(
            "fold {fold}: best validation dice {:.4} ({} epochs) -> {}",
            result.best_val_dice,
            result.history.len(),
            result.checkpoint_path.display()
        );
    }
    Ok(())
}

fn cmd_infer(args: InferArgs) -> Result<()> {
    let cfg: PipelineConfig = load_config(&args.config)?;
    let manifest_path = args.manifest.clone().unwrap_or_else(|| cfg.manifest.clone());
    let manifest = load_manifest(&manifest_path)?;
    // Strict-load every member before any inference work.
    let spec = EnsembleSpec {
        checkpoint_paths: args.checkpoints.clone(),
        network: cfg.network.clone(),
    };
    let nets = load_ensemble(&spec)?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    cfg.echo_to(&args.out_dir)?;

    let mut failures = Vec::new();
    for case in &manifest.cases {
        let attempt = (|| -> Result<()> {
            let (vol, _, geometry) = preprocess_case(case, &cfg.preprocess)?;
            let pm = ensemble_predict_with(&nets, &vol, &cfg.inference)?;
            let mask = binarize(&pm);
            let native = crate::infer::restore_native(&mask, &geometry)?;
            save_mask(&native, args.out_dir.join(format!("{}.nii.gz", case.case_id)))?;
            if cfg.inference.save_probs {
                let prob = foreground_probability(&pm);
                save_volume(
                    &prob,
                    args.out_dir.join(format!("{}_prob.nii.gz", case.case_id)),
                )?;
            }
            Ok(())
        })();
        match attempt {
            Ok(()) => println!("predicted {}", case.case_id),
            Err(e) if args.keep_going => {
                eprintln!("case {} failed: {e}", case.case_id);
                failures.push(case.case_id.clone());
            }
            Err(e) => {
                return Err(Error::Evaluation(format!(
                    "case {} failed: {e}",
                    case.case_id
                )))
            }
        }
    }
    if !failures.is_empty() {
        return Err(Error::Evaluation(format!(
            "{} case(s) failed: {}",
            failures.len(),
            failures.join(", ")
        )));
    }
    println!(
        "wrote {} mask(s) from a {}-model ensemble to {}",
        manifest.cases.len(),
        nets.len(),
        args.out_dir.display()
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let manifest = load_manifest(&args.manifest)?;
    let connectivity: Connectivity = args.connectivity.parse()?;
    let matching = if args.one_to_one {
        LesionMatching::OneToOne
    } else {
        LesionMatching::AnyOverlap
    };
    let report = evaluate_cases(
        &args.pred_dir,
        &manifest,
        connectivity,
        matching,
        args.allow_missing,
    )?;
    let report_dir = args.report_dir.unwrap_or_else(|| args.pred_dir.clone());
    report.write(&report_dir)?;
    if !report.missing.is_empty() {
        println!("missing predictions: {}", report.missing.join(", "));
    }
    println!("cases evaluated: {}", report.cases.len());
    println!("dice  lesion_f1  avd_ml  lesion_count_diff");
    println!(
        "{:.3} {:.3}      {:.3}   {:.1}",
        report.mean_dice,
        report.mean_lesion_f1,
        report.mean_avd_ml,
        report.mean_lesion_count_diff
    );
    Ok(())
}
