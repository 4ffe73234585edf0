//! `bundlegraph`: train, evaluate, and probe multi-view bundle recommenders
//! from the command line.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use bundlegraph_core::augment::PassPerturbation;
use bundlegraph_core::dataset::{
    dataset_stats, load_dataset, sparsify_bi, sparsify_dir_name, write_dataset, Dataset,
};
use bundlegraph_core::eval::{
    alignment_dispersion, decomposed_eval, eval_setup, evaluate_ranking, group_hit_analysis,
    rank_all, MetricsReport, Scorer,
};
use bundlegraph_core::fusion::{fuse, ScoringMode};
use bundlegraph_core::num::Real;
use bundlegraph_core::rng::{stream_rng, Stream};
use bundlegraph_core::train::{train, TrainConfig};
use bundlegraph_core::views::{
    compute_views, read_checkpoint, write_checkpoint, BundleGraphs, EmbeddingTable,
    ViewRepresentations,
};
use bundlegraph_core::{Error, Result};

use config::{
    load_config, parse_contrast, parse_lambda_csv, parse_views, Overrides, Precision, RunConfig,
};

#[derive(Parser)]
#[command(name = "bundlegraph", version, about = "Multi-view bundle recommendation engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, log, and test report.
    Train(CommonArgs),
    /// Score a checkpoint on the test split.
    Evaluate(EvaluateArgs),
    /// Write a derived dataset with a fraction of affiliation edges removed.
    Sparsify(SparsifyArgs),
    /// Print dataset statistics.
    Stats(CommonArgs),
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (overrides the file).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Output directory (overrides the file).
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 means all cores.
    #[arg(long)]
    threads: Option<usize>,
    /// Force single-threaded execution.
    #[arg(long)]
    deterministic: bool,
    /// Numeric precision: single or double.
    #[arg(long)]
    precision: Option<Precision>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    hops: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    /// Fusion coefficients, e.g. 0.4,0.3,0.3.
    #[arg(long, value_parser = parse_lambda_csv)]
    lambda: Option<bundlegraph_core::fusion::FusionCoefficients>,
    /// Enabled views, e.g. ub,ui,bi.
    #[arg(long, value_parser = parse_views)]
    views: Option<bundlegraph_core::views::ViewMask>,
    /// fused_self, pairwise_cross, or off.
    #[arg(long, value_parser = parse_contrast)]
    contrast_mode: Option<bundlegraph_core::train::ContrastMode>,
    /// Ranking cutoffs, e.g. 20,40.
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    /// Mask validation edges during test ranking too.
    #[arg(long)]
    mask_valid: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint file (default: <output>/model.ckpt).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Also rank by the ego and cross parts of the score.
    #[arg(long)]
    decompose: bool,
    /// Cold-item-rate bucket boundaries for hit analysis, e.g. 0,0.2,0.4,0.6,0.8,1.0.
    #[arg(long, value_delimiter = ',')]
    groups: Option<Vec<f64>>,
    /// Print cross-view alignment and dispersion.
    #[arg(long)]
    diagnostics: bool,
}

#[derive(Args)]
struct SparsifyArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Fraction of affiliation edges to remove, in [0,1).
    #[arg(long)]
    rate: f64,
    /// Overwrite the derived directory if it exists.
    #[arg(long)]
    force: bool,
}

fn check_boundaries(out: &[f64]) -> Result<()> {
    if out.len() < 2 {
        return Err(Error::config("group boundaries: need at least two values"));
    }
    if out.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("group boundaries must be strictly increasing"));
    }
    Ok(())
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            data_dir: self.data_dir.clone(),
            output_dir: self.output.clone(),
            seed: self.seed,
            threads: self.threads,
            deterministic: self.deterministic,
            precision: self.precision,
            dim: self.dim,
            hops: self.hops,
            epochs: self.epochs,
            lr: self.lr,
            tau: self.tau,
            beta1: self.beta1,
            beta2: self.beta2,
            lambda: self.lambda,
            views: self.views,
            contrast_mode: self.contrast_mode,
            ks: self.ks.clone(),
            mask_valid: self.mask_valid,
        }
    }

    fn resolve(&self) -> Result<RunConfig> {
        let cfg = load_config(self.config.as_deref(), &self.overrides())?;
        if cfg.deterministic {
            info!("deterministic mode: one worker thread");
        }
        if cfg.threads != 0 {
            // Ignore the error from a second init in-process; the pool is set
            // once per invocation.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(&args),
        Command::Evaluate(args) => cmd_evaluate(&args),
        Command::Sparsify(args) => cmd_sparsify(&args),
        Command::Stats(args) => cmd_stats(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Data(_) => 3,
                Error::Numeric(_) => 4,
            })
        }
    }
}

fn cmd_train(args: &CommonArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let d = load_dataset(&cfg.data_dir)?;
    match cfg.precision {
        Precision::Single => run_train::<f32>(&cfg, &d),
        Precision::Double => run_train::<f64>(&cfg, &d),
    }
}

fn run_train<S: Real>(cfg: &RunConfig, d: &Dataset) -> Result<()> {
    info!(
        "training on {} ({} users, {} bundles, {} items)",
        cfg.data_dir.display(),
        d.users(),
        d.bundles(),
        d.items()
    );
    let outcome = train::<S>(d, &cfg.train)?;
    // All validation passed and training finished; only now touch the disk.
    std::fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| Error::data(format!("cannot create {}: {e}", cfg.output_dir.display())))?;
    write_checkpoint(&outcome.table, cfg.train.seed, cfg.output_dir.join("model.ckpt"))?;
    std::fs::write(cfg.output_dir.join("train_log.tsv"), outcome.log.render_tsv())
        .map_err(|e| Error::data(format!("cannot write train_log.tsv: {e}")))?;

    let report = test_report(d, &cfg.train, &outcome.table, &cfg.ks, cfg.mask_valid)?;
    std::fs::write(cfg.output_dir.join("report.txt"), report.render_kv())
        .map_err(|e| Error::data(format!("cannot write report.txt: {e}")))?;
    std::fs::write(cfg.output_dir.join("report.tsv"), report.render_tsv())
        .map_err(|e| Error::data(format!("cannot write report.tsv: {e}")))?;
    info!("best epoch {}", outcome.log.best_epoch + 1);
    print!("{}", report.render_kv());
    Ok(())
}

/// Clean views of a trained table, scored on the test split.
fn test_views<S: Real>(
    d: &Dataset,
    train_cfg: &TrainConfig,
    table: &EmbeddingTable<S>,
) -> Result<ViewRepresentations<S>> {
    let graphs = BundleGraphs::<S>::from_dataset(d);
    compute_views(table, &graphs, &train_cfg.view_settings(), &PassPerturbation::clean())
}

fn masks(d: &Dataset, mask_valid: bool) -> Vec<&bundlegraph_core::dataset::InteractionMatrix> {
    let mut m = vec![&d.train_ub];
    if mask_valid {
        m.push(&d.valid_ub);
    }
    m
}

fn test_report<S: Real>(
    d: &Dataset,
    train_cfg: &TrainConfig,
    table: &EmbeddingTable<S>,
    ks: &[usize],
    mask_valid: bool,
) -> Result<MetricsReport> {
    let views = test_views(d, train_cfg, table)?;
    let lambda = train_cfg.lambda.restricted_to(train_cfg.views)?;
    let report = match train_cfg.scoring {
        ScoringMode::Fused => {
            let fused = fuse(&views, &lambda);
            evaluate_ranking(&Scorer::Fused(&fused), &d.test_ub, &masks(d, mask_valid), ks)
        }
        ScoringMode::PerViewSum => evaluate_ranking(
            &Scorer::PerViewSum { views: &views, mask: train_cfg.views },
            &d.test_ub,
            &masks(d, mask_valid),
            ks,
        ),
    };
    Ok(report)
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    let d = load_dataset(&cfg.data_dir)?;
    let ckpt = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("model.ckpt"));
    match cfg.precision {
        Precision::Single => run_evaluate::<f32>(args, &cfg, &d, &ckpt),
        Precision::Double => run_evaluate::<f64>(args, &cfg, &d, &ckpt),
    }
}

fn run_evaluate<S: Real>(
    args: &EvaluateArgs,
    cfg: &RunConfig,
    d: &Dataset,
    ckpt: &Path,
) -> Result<()> {
    let (table, _seed) = read_checkpoint::<S>(ckpt)?;
    let want = (d.users(), d.bundles(), d.items(), cfg.train.dim);
    let got = (table.users.count(), table.bundles.count(), table.items.count(), table.dim());
    if want != got {
        return Err(Error::data(format!(
            "checkpoint shape mismatch: dataset+config needs (users, bundles, items, dim) = \
             {want:?} but {} holds {got:?}",
            ckpt.display()
        )));
    }

    let report = test_report(d, &cfg.train, &table, &cfg.ks, cfg.mask_valid)?;
    print!("{}", report.render_kv());

    let views = test_views(d, &cfg.train, &table)?;
    let lambda = cfg.train.lambda.restricted_to(cfg.train.views)?;

    if args.decompose {
        let parts = decomposed_eval(&views, &lambda, &d.test_ub, &masks(d, cfg.mask_valid), &cfg.ks);
        for (label, rep) in
            [("total", &parts.total), ("ego", &parts.ego), ("cross", &parts.cross)]
        {
            for line in rep.render_kv().lines() {
                println!("{label}.{line}");
            }
        }
    }

    if let Some(boundaries) = &args.groups {
        check_boundaries(boundaries)?;
        let (users, truth, mask_lists) =
            eval_setup(&d.test_ub, &masks(d, cfg.mask_valid));
        let k = cfg.ks.iter().copied().max().unwrap_or(20);
        let fused = fuse(&views, &lambda);
        let ranking = rank_all(&Scorer::Fused(&fused), &users, &mask_lists, k);
        let rates = dataset_stats(d).biu_sparsity;
        for bucket in group_hit_analysis(&ranking, &truth, &rates, boundaries) {
            println!("{}", bucket.render(k));
        }
    }

    if args.diagnostics {
        let fused = fuse(&views, &lambda);
        let mut rng = stream_rng(cfg.train.seed, Stream::Eval);
        let diag = alignment_dispersion(&views, &fused, 100_000, &mut rng);
        print!("{}", diag.render());
    }
    Ok(())
}

fn cmd_sparsify(args: &SparsifyArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    if !(0.0..1.0).contains(&args.rate) {
        return Err(Error::config(format!("sparsify rate must be in [0,1), got {}", args.rate)));
    }
    let d = load_dataset(&cfg.data_dir)?;
    let out = sparsify_dir_name(&cfg.data_dir, args.rate, cfg.train.seed);
    if out.exists() && !args.force {
        return Err(Error::data(format!(
            "{} already exists; pass --force to overwrite",
            out.display()
        )));
    }
    let mut rng = stream_rng(cfg.train.seed, Stream::Init);
    let derived = sparsify_bi(&d, args.rate, &mut rng)?;
    write_dataset(&derived, &out)?;
    println!(
        "wrote {} ({} of {} affiliation edges kept)",
        out.display(),
        derived.bi.len(),
        d.bi.len()
    );
    Ok(())
}

fn cmd_stats(args: &CommonArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let d = load_dataset(&cfg.data_dir)?;
    print!("{}", dataset_stats(&d).render());
    Ok(())
}
