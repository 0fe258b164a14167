//! `gearfault` command-line tool. Exit status 0 on success, 1 on runtime or
//! data errors, 2 on usage errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gearfault::config::RunConfig;
use gearfault::dataset::{load_csv, make_split_plan, save_csv, Dataset, SplitPlan};
use gearfault::eda::{channel_stats, class_stats, export_stats};
use gearfault::ensemble::{combine_tables, EnsembleRule, ProbabilityTable};
use gearfault::eval::{
    confusion_accuracy_percent, confusion_matrix, ensemble_cv, make_classifier, render_report, run_cv, run_fold, summarize, CvSummary,
    FoldReport, Method, RunContext, CONFUSION_AXES,
};
use gearfault::synthgen::{generate, GenConfig};
use gearfault::{Error, Result};

#[derive(Parser)]
#[command(name = "gearfault", version, about = "Fault classification for multichannel vibration series")]
struct Cli {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Seed applied to every seeded component.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labelled dataset.
    Gen(GenArgs),
    /// Per-sample and per-class statistics as long-format CSV.
    Eda(DataArgs),
    /// Fit one model on one fold and score its test split.
    Train(TrainArgs),
    /// Combine per-model probability CSVs.
    Ensemble(EnsembleArgs),
    /// Summarise fold reports into tables and confusion matrices.
    Report(ReportArgs),
    /// Full cross-validation of every model plus both ensembles.
    Cv(DataArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    classes: usize,
    #[arg(long)]
    per_class: usize,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    length: Option<usize>,
    /// Dataset CSV to write.
    #[arg(short = 'o', long = "output")]
    output: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset CSV.
    #[arg(long)]
    data: PathBuf,
    /// Points per channel (default from the config).
    #[arg(long)]
    length: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Msresnet,
    Lstmfcn,
    Minirocket,
}

impl From<ModelArg> for Method {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Msresnet => Method::MsResNet,
            ModelArg::Lstmfcn => Method::LstmFcn,
            ModelArg::Minirocket => Method::MiniRocket,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    model: ModelArg,
    #[command(flatten)]
    data: DataArgs,
    /// Seed of the fold plan (default from the config).
    #[arg(long)]
    plan_seed: Option<u64>,
    #[arg(long)]
    fold: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    Average,
    Max,
}

impl From<RuleArg> for EnsembleRule {
    fn from(r: RuleArg) -> Self {
        match r {
            RuleArg::Average => EnsembleRule::Average,
            RuleArg::Max => EnsembleRule::Max,
        }
    }
}

#[derive(Args)]
struct EnsembleArgs {
    #[arg(long, value_enum)]
    rule: RuleArg,
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    /// Fold index recorded in the report.
    #[arg(long, default_value_t = 0)]
    fold: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding `report_*.json` files (default: the output directory).
    #[arg(long)]
    inputs: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io { path: path.to_path_buf(), source: e }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.reseed(seed);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve_config(&cli)?;
    std::fs::create_dir_all(&cli.out).map_err(io_err(&cli.out))?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::Gen(args) => cmd_gen(&mut cfg, args),
        Command::Eda(args) => {
            let ds = load(&mut cfg, args)?;
            export_stats(&channel_stats(&ds)?, &out.join("eda_samples.csv"))?;
            export_stats(&class_stats(&ds)?, &out.join("eda_classes.csv"))?;
            cfg.save(&out.join("resolved_config.json"))
        }
        Command::Train(args) => cmd_train(&mut cfg, args, out),
        Command::Ensemble(args) => cmd_ensemble(args, out),
        Command::Report(args) => cmd_report(args.inputs.as_deref().unwrap_or(out), out),
        Command::Cv(args) => cmd_cv(&mut cfg, args, out),
    }
}

fn cmd_gen(cfg: &mut RunConfig, args: &GenArgs) -> Result<()> {
    let channels = args.channels.unwrap_or(cfg.data.num_channels);
    if args.classes != cfg.data.num_classes || channels != cfg.data.num_channels {
        let length = cfg.data.series_length;
        cfg.data = GenConfig { series_length: length, ..GenConfig::with_shape(args.classes, args.per_class, channels, cfg.data.seed) };
    }
    cfg.data.samples_per_class = args.per_class;
    if let Some(l) = args.length {
        cfg.data.series_length = l;
    }
    let ds = generate(&cfg.data)?;
    save_csv(&ds, &args.output)?;
    cfg.save(&args.output.with_extension("config.json"))?;
    eprintln!("wrote {} samples to {}", ds.len(), args.output.display());
    Ok(())
}

fn load(cfg: &mut RunConfig, args: &DataArgs) -> Result<Dataset> {
    if let Some(l) = args.length {
        cfg.data.series_length = l;
    }
    if let Some(c) = args.channels {
        cfg.data.num_channels = c;
    }
    load_csv(&args.data, cfg.data.series_length, cfg.data.num_channels)
}

fn plan_for(cfg: &RunConfig, ds: &Dataset) -> Result<SplitPlan> {
    let s = &cfg.split;
    make_split_plan(ds, s.num_folds, s.fractions, s.seed, s.stratified)
}

fn cmd_train(cfg: &mut RunConfig, args: &TrainArgs, out: &Path) -> Result<()> {
    let ds = load(cfg, &args.data)?;
    if let Some(seed) = args.plan_seed {
        cfg.split.seed = seed;
    }
    let plan = plan_for(cfg, &ds)?;
    let fold = plan
        .folds
        .get(args.fold)
        .ok_or_else(|| Error::Argument(format!("fold {} does not exist; the plan has {} folds", args.fold, plan.folds.len())))?;
    let method = Method::from(args.model);
    let mut clf = make_classifier(method, cfg);
    let ctx = RunContext { seed: plan.seed, config_hash: cfg.hash(), out_dir: Some(out) };
    let (report, _) = run_fold(&ds, args.fold, fold, method.as_str(), clf.as_mut(), &ctx).map_err(|e| e.in_fold(args.fold))?;
    let ext = if method == Method::MiniRocket { "json" } else { "ckpt" };
    clf.save(&out.join(format!("model_{method}_{}.{ext}", args.fold)))?;
    report.save(&out.join(format!("report_{method}_{}.json", args.fold)))?;
    cfg.save(&out.join("resolved_config.json"))?;
    println!("{method} fold {}: accuracy {}%", args.fold, report.accuracy_percent);
    Ok(())
}

fn cmd_ensemble(args: &EnsembleArgs, out: &Path) -> Result<()> {
    let tables = args.inputs.iter().map(|p| ProbabilityTable::read(p)).collect::<Result<Vec<_>>>()?;
    let rule = EnsembleRule::from(args.rule);
    let combined = combine_tables(&tables, rule)?;
    let k = combined.values.ncols();
    combined.write(&out.join(format!("probs_{}_{}.csv", rule.tag(), args.fold)))?;
    let confusion = confusion_matrix(&combined.truth, &combined.predictions, k)?;
    let report = FoldReport {
        fold_index: args.fold,
        method: rule.tag().into(),
        accuracy_percent: confusion_accuracy_percent(&confusion),
        confusion,
        confusion_axes: CONFUSION_AXES.into(),
        train_seconds: None,
        seed: String::new(),
        config_hash: String::new(),
    };
    report.save(&out.join(format!("report_{}_{}.json", rule.tag(), args.fold)))?;
    println!("{} fold {}: accuracy {}%", rule.tag(), args.fold, report.accuracy_percent);
    Ok(())
}

fn cmd_report(inputs: &Path, out: &Path) -> Result<()> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(inputs)
        .map_err(io_err(inputs))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.starts_with("report_") && name.ends_with(".json")
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Argument(format!("no report_*.json files in {}", inputs.display())));
    }
    let mut by_method: BTreeMap<String, Vec<FoldReport>> = BTreeMap::new();
    for p in &paths {
        let r = FoldReport::load(p)?;
        by_method.entry(r.method.clone()).or_default().push(r);
    }
    let mut summaries = Vec::new();
    let mut reports = Vec::new();
    for (_, mut rs) in by_method {
        rs.sort_by_key(|r| r.fold_index);
        summaries.push(summarize(&rs)?);
        reports.extend(rs);
    }
    render_report(&summaries, &reports, out)?;
    print_summaries(&summaries);
    Ok(())
}

fn print_summaries(summaries: &[CvSummary]) {
    for s in summaries {
        println!("{}: {:.3} ± {:.3}", s.method, s.mean, s.std);
    }
}

fn cmd_cv(cfg: &mut RunConfig, args: &DataArgs, out: &Path) -> Result<()> {
    let ds = load(cfg, args)?;
    let plan = plan_for(cfg, &ds)?;
    let mut summaries = Vec::new();
    let mut reports = Vec::new();
    for method in Method::ALL {
        eprintln!("cross-validating {method}");
        let rs = run_cv(&ds, method, &plan, cfg, Some(out))?;
        summaries.push(summarize(&rs)?);
        reports.extend(rs);
    }
    let ctx = RunContext { seed: plan.seed, config_hash: cfg.hash(), out_dir: Some(out) };
    let names: Vec<&str> = Method::ALL.iter().map(|m| m.as_str()).collect();
    for rule in [EnsembleRule::Average, EnsembleRule::Max] {
        let rs = ensemble_cv(out, &names, plan.folds.len(), ds.num_classes(), rule, &ctx)?;
        summaries.push(summarize(&rs)?);
        reports.extend(rs);
    }
    for r in &reports {
        r.save(&out.join(format!("report_{}_{}.json", r.method, r.fold_index)))?;
    }
    render_report(&summaries, &reports, out)?;
    cfg.save(&out.join("resolved_config.json"))?;
    print_summaries(&summaries);
    Ok(())
}
