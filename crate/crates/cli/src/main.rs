use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use protocaps::checkpoint::{load_checkpoint, save_checkpoint};
use protocaps::data::{
    exclusion_filter, load_dataset, stratified_folds, synth_generate, write_dataset, AttributeSchema, Dataset,
    NoduleSample,
};
use protocaps::evaluation::{evaluate, explain_sample, format_table, Stat, TableRow};
use protocaps::model::Profile;
use protocaps::prototypes::export_prototypes;
use protocaps::training::{assign_label_fraction, init_model, train, write_epochs_csv, Ablation, TrainConfig};
use protocaps::{PrototypeBank32, ProtoCaps32};

const CONFIG_FILE: &str = "config.json";
const SPLIT_FILE: &str = "split.json";
const EPOCHS_FILE: &str = "epochs.csv";
const CHECKPOINT_FILE: &str = "best.pcap";
const PROTOTYPE_DIR: &str = "prototypes";
const REPORT_FILE: &str = "report.json";
const DEFAULT_FOLDS: usize = 5;

/// Exit status for invalid input, configuration or preconditions.
const EXIT_VALIDATION: u8 = 2;
/// Exit status when training diverges.
const EXIT_DIVERGENCE: u8 = 3;

#[derive(Parser)]
#[command(name = "protocaps", version, about = "Prototype capsule networks for nodule malignancy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Number of stratified folds recorded in the manifest.
        #[arg(long, default_value_t = DEFAULT_FOLDS)]
        folds: usize,
    },
    /// Train one fold (or all folds) into a run directory.
    Train(TrainArgs),
    /// Evaluate a run directory on its test split.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// full | wo_use | wo_learn. Defaults to the run's ablation.
        #[arg(long)]
        mode: Option<Ablation>,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
    },
    /// Explain one sample by its nearest prototypes.
    Explain {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sample_id: String,
        /// Defaults to `<run>/explain/<sample-id>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write prototype images and their index.
    ExportPrototypes {
        #[arg(long)]
        run: PathBuf,
        /// Defaults to `<run>/prototypes`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Test fold index, `all`, or `none` (train on everything).
    #[arg(long, default_value = "0")]
    fold: FoldArg,
    /// Start from a config.json of an earlier run or a bare training config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    attr_fraction: Option<f64>,
    #[arg(long)]
    ablation: Option<Ablation>,
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
    #[arg(long)]
    lr_params: Option<f64>,
    #[arg(long)]
    lr_prototypes: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    push_start_epoch: Option<usize>,
    #[arg(long)]
    push_every: Option<usize>,
    #[arg(long)]
    lambda_recon: Option<f64>,
    #[arg(long)]
    lambda_proto: Option<f64>,
    #[arg(long)]
    lambda_sep_inner: Option<f64>,
    #[arg(long)]
    dist_max: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum ProfileArg {
    Full,
    Reduced,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
enum SplitName {
    Train,
    Val,
    Test,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum FoldArg {
    One(usize),
    All,
    None,
}

impl std::str::FromStr for FoldArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "all" => Ok(Self::All),
            "none" => Ok(Self::None),
            n => n
                .parse()
                .map(Self::One)
                .map_err(|_| format!("expected a fold index, `all` or `none`, got `{n}`")),
        }
    }
}

/// Contents of a run's config.json.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunFile {
    train: TrainConfig,
    data: PathBuf,
    /// Test fold, `None` when trained on the whole dataset.
    fold: Option<usize>,
    folds: usize,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    labeled_count: usize,
    best_epoch: usize,
    best_val_malignancy_within1: f64,
}

/// Sample ids of each split of a run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct SplitFile {
    train: Vec<String>,
    val: Vec<String>,
    test: Vec<String>,
}

/// Errors the user can fix by changing the invocation.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Usage(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match configure_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return EXIT_VALIDATION;
    }
    match e.downcast_ref::<protocaps::Error>() {
        Some(protocaps::Error::Divergence { .. }) => EXIT_DIVERGENCE,
        Some(protocaps::Error::Io(_)) => 1,
        Some(_) => EXIT_VALIDATION,
        None => 1,
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("PROTOCAPS_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("PROTOCAPS_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { n, seed, out, folds } => cmd_synth(n, seed, &out, folds),
        Command::Train(args) => cmd_train(&args),
        Command::Eval { run, data, mode, split } => cmd_eval(&run, &data, mode, split),
        Command::Explain {
            run,
            data,
            sample_id,
            out,
        } => cmd_explain(&run, &data, &sample_id, out),
        Command::ExportPrototypes { run, out } => {
            let (_, bank, _) = load_run(&run)?;
            let dir = out.unwrap_or_else(|| run.join(PROTOTYPE_DIR));
            let index = export_prototypes(&bank, &dir)?;
            println!(
                "exported {} of {} prototypes to {}",
                index.iter().filter(|p| p.file.is_some()).count(),
                index.len(),
                dir.display()
            );
            Ok(())
        }
    }
}

fn cmd_synth(n: usize, seed: u64, out: &Path, k: usize) -> anyhow::Result<()> {
    if n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    if out.exists() && fs::read_dir(out)?.next().is_some() {
        return Err(usage(format!("{} exists and is not empty", out.display())));
    }
    let samples = synth_generate(n, seed);
    let folds = if n >= k { Some(stratified_folds(&samples, k, seed)?) } else { None };
    write_dataset(out, &samples, &AttributeSchema::lidc(), folds)?;
    println!("wrote {n} samples to {}", out.display());
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn base_config(args: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let Some(path) = &args.config else {
        return Ok(TrainConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(run) = serde_json::from_str::<RunFile>(&text) {
        return Ok(run.train);
    }
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn train_config(args: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let mut c = base_config(args)?;
    macro_rules! set {
        ($($field:ident <- $arg:ident),* $(,)?) => {
            $(if let Some(v) = args.$arg { c.$field = v; })*
        };
    }
    set!(
        attr_label_fraction <- attr_fraction,
        ablation <- ablation,
        lr_params <- lr_params,
        lr_prototypes <- lr_prototypes,
        batch_size <- batch_size,
        max_epochs <- max_epochs,
        patience <- patience,
        push_start_epoch <- push_start_epoch,
        push_every <- push_every,
        lambda_recon <- lambda_recon,
        lambda_proto <- lambda_proto,
        lambda_sep_inner <- lambda_sep_inner,
        dist_max <- dist_max,
        seed <- seed,
    );
    if let Some(p) = args.profile {
        c.profile = match p {
            ProfileArg::Full => Profile::Full,
            ProfileArg::Reduced => Profile::Reduced,
        };
    }
    Ok(c)
}

/// Train/val/test indices into `data.samples` for one fold, with excluded
/// samples removed.
fn fold_split(data: &Dataset, fold: Option<usize>, seed: u64) -> anyhow::Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let keep = |idx: Vec<usize>| -> Vec<usize> {
        idx.into_iter()
            .filter(|&i| !protocaps::data::is_excluded(&data.samples[i].labels))
            .collect()
    };
    let Some(fold) = fold else {
        let all = keep((0..data.samples.len()).collect());
        return Ok((all.clone(), Vec::new(), all));
    };
    let folds = match &data.manifest.folds {
        Some(f) => f.clone(),
        None => stratified_folds(&data.samples, DEFAULT_FOLDS, seed)?,
    };
    if fold >= folds.k {
        return Err(usage(format!("--fold {fold} out of range; the dataset has {} folds", folds.k)));
    }
    let split = folds.split(&data.samples, fold)?;
    Ok((keep(split.train), keep(split.val), keep(split.test)))
}

fn fold_count(data: &Dataset) -> usize {
    data.manifest.folds.as_ref().map_or(DEFAULT_FOLDS, |f| f.k)
}

fn cmd_train(args: &TrainArgs) -> anyhow::Result<()> {
    let cfg = train_config(args)?;
    if let Err(protocaps::Error::InvalidConfig(errs)) = cfg.validate() {
        return Err(usage(format!("invalid configuration:\n  {}", errs.join("\n  "))));
    }
    let data = load_dataset(&args.data)?;
    let excluded = data.samples.len() - exclusion_filter(data.samples.clone()).len();
    if excluded > 0 {
        log::info!("excluding {excluded} samples (indeterminate malignancy or fewer than 3 raters)");
    }
    match args.fold {
        FoldArg::One(f) => train_fold(&data, &args.data, &cfg, Some(f), &args.out),
        FoldArg::None => train_fold(&data, &args.data, &cfg, None, &args.out),
        FoldArg::All => {
            for f in 0..fold_count(&data) {
                log::info!("fold {f}");
                train_fold(&data, &args.data, &cfg, Some(f), &args.out.join(format!("fold{f}")))?;
            }
            Ok(())
        }
    }
}

fn train_fold(data: &Dataset, data_path: &Path, cfg: &TrainConfig, fold: Option<usize>, out: &Path) -> anyhow::Result<()> {
    let (train_idx, val_idx, test_idx) = fold_split(data, fold, cfg.seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| data.samples[i].clone()).collect::<Vec<NoduleSample>>();
    let mut train_set = pick(&train_idx);
    let val_set = pick(&val_idx);
    if train_set.is_empty() {
        return Err(usage("no training samples left after exclusion"));
    }
    let labeled_count = assign_label_fraction(&mut train_set, cfg.attr_label_fraction, cfg.seed)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let (mut model, mut bank) = init_model::<f32>(cfg)?;
    let outcome = train(&mut model, &mut bank, &train_set, &val_set, cfg)?;
    write_epochs_csv(&out.join(EPOCHS_FILE), &outcome.reports)?;
    save_checkpoint(&out.join(CHECKPOINT_FILE), &model, &bank, Some(cfg), Some(outcome.best_epoch))?;
    export_prototypes(&bank, &out.join(PROTOTYPE_DIR))?;
    let ids = |idx: &[usize]| idx.iter().map(|&i| data.samples[i].id().to_owned()).collect();
    write_json(
        &out.join(SPLIT_FILE),
        &SplitFile {
            train: ids(&train_idx),
            val: ids(&val_idx),
            test: ids(&test_idx),
        },
    )?;
    write_json(
        &out.join(CONFIG_FILE),
        &RunFile {
            train: cfg.clone(),
            data: data_path.to_path_buf(),
            fold,
            folds: fold.map_or(0, |_| fold_count(data)),
            n_train: train_idx.len(),
            n_val: val_idx.len(),
            n_test: test_idx.len(),
            labeled_count,
            best_epoch: outcome.best_epoch,
            best_val_malignancy_within1: outcome.best_val_malignancy_within1,
        },
    )?;
    println!(
        "{}: best epoch {} (val malignancy Within-1 {:.3})",
        out.display(),
        outcome.best_epoch,
        outcome.best_val_malignancy_within1
    );
    Ok(())
}

fn load_run(run: &Path) -> anyhow::Result<(ProtoCaps32, PrototypeBank32, RunFile)> {
    let ckpt = run.join(CHECKPOINT_FILE);
    if !ckpt.is_file() {
        return Err(usage(format!("{} has no {CHECKPOINT_FILE}", run.display())));
    }
    let (model, bank, _) = load_checkpoint::<f32>(&ckpt)?;
    Ok((model, bank, read_json(&run.join(CONFIG_FILE))?))
}

/// Run directories below `run`: itself, or its `fold*` children.
fn run_dirs(run: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if run.join(CHECKPOINT_FILE).is_file() {
        return Ok(vec![run.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(run)
        .with_context(|| format!("reading {}", run.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(CHECKPOINT_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!(usage(format!("{} contains no trained run", run.display())));
    }
    Ok(dirs)
}

fn cmd_eval(run: &Path, data_path: &Path, mode: Option<Ablation>, split: SplitName) -> anyhow::Result<()> {
    let data = load_dataset(data_path)?;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for dir in run_dirs(run)? {
        let (model, bank, info) = load_run(&dir)?;
        let unlabeled = info.labeled_count == 0;
        // without attribute labels nothing was pushed; only the dense head exists
        let mode = mode.unwrap_or(if unlabeled { Ablation::WoUse } else { info.train.ablation });
        let splits: SplitFile = read_json(&dir.join(SPLIT_FILE))?;
        let ids = match split {
            SplitName::Train => splits.train,
            SplitName::Val => splits.val,
            SplitName::Test => splits.test,
            SplitName::All => splits.train.into_iter().chain(splits.val).chain(splits.test).collect(),
        };
        let samples = select(&data, &ids)?;
        let mut report = evaluate(&model, &bank, &samples, mode)?;
        report.config = Some(info.train.clone());
        write_json(&dir.join(REPORT_FILE), &report)?;
        let label = dir.file_name().map_or_else(|| "run".into(), |n| n.to_string_lossy().into_owned());
        let mut row = report.table_row(label);
        if unlabeled {
            row.attributes = None;
        }
        rows.push(row);
        reports.push(report);
    }
    if rows.len() > 1 {
        let stat = |f: &dyn Fn(&protocaps::evaluation::EvalReport) -> f64| {
            Stat::of(&reports.iter().map(f).collect::<Vec<_>>())
        };
        let attributes = rows.iter().all(|r| r.attributes.is_some()).then(|| {
            (0..reports[0].attribute_within1.len())
                .map(|a| stat(&|r| r.attribute_within1[a]))
                .collect()
        });
        rows.push(TableRow {
            label: "mean".into(),
            attributes,
            malignancy: stat(&|r| r.malignancy_within1),
        });
    }
    print!("{}", format_table(&rows));
    Ok(())
}

fn select(data: &Dataset, ids: &[String]) -> anyhow::Result<Vec<NoduleSample>> {
    ids.iter()
        .map(|id| find_sample(data, id).cloned())
        .collect()
}

fn find_sample<'a>(data: &'a Dataset, id: &str) -> anyhow::Result<&'a NoduleSample> {
    data.samples
        .iter()
        .find(|s| s.id() == id)
        .ok_or_else(|| usage(format!("sample `{id}` is not in the dataset")))
}

fn cmd_explain(run: &Path, data_path: &Path, sample_id: &str, out: Option<PathBuf>) -> anyhow::Result<()> {
    let data = load_dataset(data_path)?;
    let sample = find_sample(&data, sample_id)?;
    let (model, bank, _) = load_run(run)?;
    if !bank.is_pushed() {
        return Err(usage("the run's prototypes were never pushed; nothing to explain with"));
    }
    let dir = out.unwrap_or_else(|| run.join("explain").join(sample_id));
    let bundle = explain_sample(&model, &bank, sample, &dir)?;
    println!("{sample_id}: predicted malignancy {:.2}", bundle.malignancy_pred);
    for a in &bundle.attributes {
        println!(
            "  {:<18} {:.2}  prototype {:>2} from {} (score {:.2}, distance {:.4})",
            a.attribute, a.predicted_score, a.prototype_id, a.source_sample_id, a.source_gt_score, a.distance
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}
