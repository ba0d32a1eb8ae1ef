//! `uefilter` command-line interface.
//!
//! Exit codes: 0 success, 2 usage errors, 1 runtime failures.

mod kv;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use kv::KvConfig;
use std::path::PathBuf;
use uefilter::filtering::FilterConfig;
use uefilter::harness::{
    load_source, run_curves, run_detect, run_eval, run_mix, run_poison, run_table, truth_of,
    DatasetSource, ExperimentConfig, GeneratorKind, PoisonSetup,
};
use uefilter::poisons::EmConfig;
use uefilter::trainer::{Architecture, ClassifierConfig};

#[derive(Parser)]
#[command(
    name = "uefilter",
    version,
    about = "Generate unlearnable-example poisons, mix datasets, and detect poisoned samples via iterative filtering"
)]
struct Cli {
    /// Flat key=value config file; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate perturbations for a dataset and archive the poisoned copy.
    Poison(PoisonArgs),
    /// Mix a clean dataset with a fully poisoned one at a given ratio.
    Mix(MixArgs),
    /// Run iterative filtering on a mixed dataset.
    Detect(DetectArgs),
    /// Sweep {generator x ratio x seed} and tabulate Acc/FAR/FRR/HTER.
    Table(TableArgs),
    /// Learning-curve experiment (with and without additional classes).
    Curves(CurvesArgs),
    /// Score an existing verdict CSV against ground truth.
    Eval(EvalArgs),
}

#[derive(Args, Clone)]
struct CommonOut {
    /// Output directory.
    #[arg(long, env = "UEFILTER_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct TrainerArgs {
    /// Classifier architecture: small-cnn | resnet18.
    #[arg(long)]
    arch: Option<Architecture>,
    /// Early-stopping horizon E (epochs per training run).
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    learning_rate: Option<f32>,
    #[arg(long)]
    momentum: Option<f32>,
    #[arg(long)]
    weight_decay: Option<f32>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Enable flip/crop augmentation (off by default; augmentations blur the
    /// shortcut signal).
    #[arg(long)]
    augmentation: bool,
    /// Stop a training run early once train accuracy on first-C labels
    /// reaches 99%.
    #[arg(long)]
    adaptive_early_stop: bool,
}

impl TrainerArgs {
    fn resolve(&self, kv: &KvConfig) -> Result<ClassifierConfig> {
        let d = ClassifierConfig::default();
        Ok(ClassifierConfig {
            architecture: match &self.arch {
                Some(a) => *a,
                None => kv.get_parsed_with("arch", d.architecture, |s| {
                    s.parse::<Architecture>().map_err(anyhow::Error::msg)
                })?,
            },
            output_dim: 0, // set by the harness per dataset
            epochs: kv.resolve("epochs", self.epochs, d.epochs)?,
            learning_rate: kv.resolve("learning_rate", self.learning_rate, d.learning_rate)?,
            momentum: kv.resolve("momentum", self.momentum, d.momentum)?,
            weight_decay: kv.resolve("weight_decay", self.weight_decay, d.weight_decay)?,
            batch_size: kv.resolve("batch_size", self.batch_size, d.batch_size)?,
            seed: 0, // set per run
            augmentation: self.augmentation || kv.get_bool("augmentation")?,
            adaptive_early_stop: self.adaptive_early_stop || kv.get_bool("adaptive_early_stop")?,
            exec_mode: Default::default(),
        })
    }
}

#[derive(Args, Clone)]
struct FilterArgs {
    #[command(flatten)]
    trainer: TrainerArgs,
    /// Train fraction p of the active pool per iteration.
    #[arg(long)]
    split_fraction: Option<f64>,
    /// Stopping threshold as a fraction of the dataset size.
    #[arg(long)]
    stop_threshold: Option<f64>,
    /// Retrieval fires every K iterations.
    #[arg(long)]
    retrieval_period: Option<u32>,
    #[arg(long)]
    max_iterations: Option<u32>,
    /// Drop flagged samples from training instead of relabeling to y+C.
    #[arg(long)]
    no_additional_classes: bool,
    /// Disable the retrieval step.
    #[arg(long)]
    no_retrieval: bool,
    /// Compare the cumulative flagged count against the threshold.
    #[arg(long)]
    stop_on_cumulative: bool,
    #[arg(long)]
    seed: Option<u64>,
}

impl FilterArgs {
    fn resolve(&self, kv: &KvConfig) -> Result<FilterConfig> {
        let d = FilterConfig::default();
        Ok(FilterConfig {
            split_fraction: kv.resolve("split_fraction", self.split_fraction, d.split_fraction)?,
            stop_threshold_fraction: kv.resolve(
                "stop_threshold",
                self.stop_threshold,
                d.stop_threshold_fraction,
            )?,
            retrieval_period: kv.resolve(
                "retrieval_period",
                self.retrieval_period,
                d.retrieval_period,
            )?,
            max_iterations: kv.resolve("max_iterations", self.max_iterations, d.max_iterations)?,
            use_additional_classes: !(self.no_additional_classes
                || kv.get_bool("no_additional_classes")?),
            use_retrieval: !(self.no_retrieval || kv.get_bool("no_retrieval")?),
            stop_on_cumulative: self.stop_on_cumulative || kv.get_bool("stop_on_cumulative")?,
            trainer: self.trainer.resolve(kv)?,
            seed: kv.resolve("seed", self.seed, d.seed)?,
        })
    }
}

#[derive(Args, Clone)]
struct PoisonProfileArgs {
    /// desk (reduced EM schedule) or paper (full EM schedule).
    #[arg(long, default_value = "desk")]
    profile: String,
    /// LSP patch size.
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    em_outer_steps: Option<u32>,
    #[arg(long)]
    em_inner_steps: Option<u32>,
    #[arg(long)]
    em_step_size: Option<f32>,
    /// One shared delta per class for EM instead of per-sample noise.
    #[arg(long)]
    em_class_wise: bool,
}

impl PoisonProfileArgs {
    fn resolve(&self, kv: &KvConfig, trainer: &ClassifierConfig) -> Result<PoisonSetup> {
        let mut setup = match self.profile.as_str() {
            "desk" => PoisonSetup::desk_scale(),
            "paper" => PoisonSetup::default(),
            other => bail!("unknown profile '{other}' (expected desk|paper)"),
        };
        setup.em_trainer = ClassifierConfig {
            output_dim: 0,
            ..trainer.clone()
        };
        setup.lsp_patch_size = kv.resolve("patch_size", self.patch_size, setup.lsp_patch_size)?;
        setup.em = EmConfig {
            outer_steps: kv.resolve("em_outer_steps", self.em_outer_steps, setup.em.outer_steps)?,
            inner_noise_steps: kv.resolve(
                "em_inner_steps",
                self.em_inner_steps,
                setup.em.inner_noise_steps,
            )?,
            step_size: kv.resolve("em_step_size", self.em_step_size, setup.em.step_size)?,
            class_wise: self.em_class_wise || kv.get_bool("em_class_wise")?,
            ..setup.em
        };
        Ok(setup)
    }
}

#[derive(Args)]
struct PoisonArgs {
    /// Dataset source: synth:…, archive:DIR, cifar:PATH, imagedir:DIR, or a
    /// bare path.
    #[arg(long)]
    dataset: Option<String>,
    /// Use only the first N samples.
    #[arg(long)]
    subset: Option<usize>,
    /// Poison generator: em | lsp | ops.
    #[arg(long)]
    generator: Option<GeneratorKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    profile: PoisonProfileArgs,
    #[command(flatten)]
    trainer: TrainerArgs,
    #[command(flatten)]
    out: CommonOut,
}

#[derive(Args)]
struct MixArgs {
    /// Clean dataset source.
    #[arg(long)]
    clean: Option<String>,
    /// Fully poisoned dataset source (e.g. the poison command's output).
    #[arg(long)]
    poisoned: Option<String>,
    /// Poison ratio in [0, 1].
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    out: CommonOut,
}

#[derive(Args)]
struct DetectArgs {
    /// Mixed dataset source.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    subset: Option<usize>,
    #[command(flatten)]
    filter: FilterArgs,
    #[command(flatten)]
    out: CommonOut,
}

#[derive(Args)]
struct TableArgs {
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    subset: Option<usize>,
    /// Comma-separated generator list, e.g. em,lsp,ops.
    #[arg(long)]
    generators: Option<String>,
    /// Comma-separated ratio list, e.g. 0.2,0.4,0.6,0.8.
    #[arg(long)]
    ratios: Option<String>,
    /// Comma-separated seed list.
    #[arg(long)]
    seeds: Option<String>,
    /// Concurrent cells.
    #[arg(long)]
    workers: Option<usize>,
    #[command(flatten)]
    profile: PoisonProfileArgs,
    #[command(flatten)]
    filter: FilterArgs,
    #[command(flatten)]
    out: CommonOut,
}

#[derive(Args)]
struct CurvesArgs {
    /// Mixed dataset source (must carry ground-truth flags).
    #[arg(long)]
    dataset: Option<String>,
    /// Extra clean pool for the additional-classes regime.
    #[arg(long)]
    extra: Option<String>,
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long)]
    eval_seed: Option<u64>,
    #[command(flatten)]
    trainer: TrainerArgs,
    #[command(flatten)]
    out: CommonOut,
}

#[derive(Args)]
struct EvalArgs {
    /// Verdict CSV produced by the detect command.
    #[arg(long)]
    verdicts: Option<PathBuf>,
    /// Dataset supplying ground truth when the CSV lacks the column.
    #[arg(long)]
    dataset: Option<String>,
    #[command(flatten)]
    out: CommonOut,
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|e| anyhow::anyhow!("bad {what} '{p}': {e}"))
        })
        .collect()
}

fn required_source(
    flag: &Option<String>,
    kv: &KvConfig,
    key: &str,
) -> Result<DatasetSource> {
    let raw = match flag {
        Some(s) => s.clone(),
        None => kv
            .get_string(key)
            .with_context(|| format!("--{key} is required (flag or config file)"))?,
    };
    raw.parse::<DatasetSource>().map_err(anyhow::Error::from)
}

fn out_dir(out: &CommonOut, kv: &KvConfig) -> Result<PathBuf> {
    match &out.out {
        Some(p) => Ok(p.clone()),
        None => match kv.get_string("out") {
            Ok(s) => Ok(PathBuf::from(s)),
            Err(_) => Ok(PathBuf::from("uefilter-out")),
        },
    }
}

fn cmd_poison(args: PoisonArgs, kv: &KvConfig) -> Result<()> {
    let source = required_source(&args.dataset, kv, "dataset")?;
    let subset = kv.resolve_opt("subset", args.subset)?;
    let generator = match args.generator {
        Some(g) => g,
        None => kv
            .get_string("generator")
            .context("--generator is required")?
            .parse::<GeneratorKind>()
            .map_err(anyhow::Error::msg)?,
    };
    let seed = kv.resolve("seed", args.seed, 0)?;
    let trainer = args.trainer.resolve(kv)?;
    let setup = args.profile.resolve(kv, &trainer)?;
    let out = out_dir(&args.out, kv)?;

    let outcome = run_poison(&source, subset, generator, &setup, seed, &out)?;
    println!(
        "wrote {} and {}",
        outcome.perturbations_dir.display(),
        outcome.poisoned_dir.display()
    );
    println!(
        "budget check: norm {} bound {} max measured {:.6} -> {}",
        outcome.budget.norm,
        outcome.budget.bound,
        outcome.max_measured_norm,
        if outcome.max_measured_norm <= outcome.budget.bound + 1e-6 {
            "ok"
        } else {
            "VIOLATED"
        }
    );
    Ok(())
}

fn cmd_mix(args: MixArgs, kv: &KvConfig) -> Result<()> {
    let clean = required_source(&args.clean, kv, "clean")?;
    let poisoned = required_source(&args.poisoned, kv, "poisoned")?;
    let ratio = match args.ratio {
        Some(r) => r,
        None => kv.get_string("ratio").context("--ratio is required")?.parse()?,
    };
    let subset = kv.resolve_opt("subset", args.subset)?;
    let seed = kv.resolve("seed", args.seed, 0)?;
    let out = out_dir(&args.out, kv)?;
    let dir = run_mix(&clean, &poisoned, subset, ratio, seed, &out)?;
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_detect(args: DetectArgs, kv: &KvConfig) -> Result<()> {
    let source = required_source(&args.dataset, kv, "dataset")?;
    let subset = kv.resolve_opt("subset", args.subset)?;
    let config = args.filter.resolve(kv)?;
    let out = out_dir(&args.out, kv)?;
    let dataset = load_source(&source, subset)?;
    let outcome = run_detect(&dataset, &config, &out)?;
    println!(
        "verdicts: {} | history: {}",
        outcome.verdicts_csv.display(),
        outcome.history_json.display()
    );
    match (&outcome.rates, &outcome.metrics_json) {
        (Some(r), Some(p)) => println!(
            "metrics: {} | acc {:.4} far {:.4} frr {:.4} hter {:.4}",
            p.display(),
            r.accuracy,
            r.far,
            r.frr,
            r.hter
        ),
        _ => println!("no ground truth present; metrics skipped"),
    }
    println!(
        "terminal reason: {:?} after {} iterations",
        outcome.report.terminal_reason,
        outcome.report.history.len()
    );
    Ok(())
}

fn cmd_table(args: TableArgs, kv: &KvConfig) -> Result<()> {
    let source = required_source(&args.dataset, kv, "dataset")?;
    let subset = kv.resolve_opt("subset", args.subset)?;
    let generators: Vec<GeneratorKind> = match &args.generators {
        Some(s) => parse_list(s, "generator")?,
        None => match kv.get_string("generators") {
            Ok(s) => parse_list(&s, "generator")?,
            Err(_) => vec![GeneratorKind::Em, GeneratorKind::Lsp, GeneratorKind::Ops],
        },
    };
    let ratios: Vec<f64> = match &args.ratios {
        Some(s) => parse_list(s, "ratio")?,
        None => match kv.get_string("ratios") {
            Ok(s) => parse_list(&s, "ratio")?,
            Err(_) => vec![0.2, 0.4, 0.6, 0.8],
        },
    };
    let seeds: Vec<u64> = match &args.seeds {
        Some(s) => parse_list(s, "seed")?,
        None => match kv.get_string("seeds") {
            Ok(s) => parse_list(&s, "seed")?,
            Err(_) => vec![0],
        },
    };
    let filter = args.filter.resolve(kv)?;
    let trainer = filter.trainer.clone();
    let poison = args.profile.resolve(kv, &trainer)?;
    let out = out_dir(&args.out, kv)?;

    let config = ExperimentConfig {
        source,
        subset,
        generators,
        ratios,
        seeds,
        filter,
        poison,
        out_dir: out,
        workers: kv.resolve("workers", args.workers, 1)?,
    };
    let output = run_table(&config)?;
    print!("{}", uefilter::harness::render_text(&output.rows));
    println!(
        "wrote {} and {}",
        output.csv_path.display(),
        output.text_path.display()
    );
    Ok(())
}

fn cmd_curves(args: CurvesArgs, kv: &KvConfig) -> Result<()> {
    let source = required_source(&args.dataset, kv, "dataset")?;
    let subset = kv.resolve_opt("subset", args.subset)?;
    let mixed = load_source(&source, subset)?;
    let extra = match &args.extra {
        Some(s) => Some(load_source(&s.parse::<DatasetSource>()?, None)?),
        None => match kv.get_string("extra") {
            Ok(s) => Some(load_source(&s.parse::<DatasetSource>()?, None)?),
            Err(_) => None,
        },
    };
    let trainer = args.trainer.resolve(kv)?;
    let eval_seed = kv.resolve("eval_seed", args.eval_seed, 0)?;
    let out = out_dir(&args.out, kv)?;

    let outcome = run_curves(&mixed, extra.as_ref(), &trainer, eval_seed, &out)?;
    println!("wrote {}", outcome.base_csv.display());
    if let Some(p) = &outcome.extra_csv {
        println!("wrote {}", p.display());
    } else {
        println!("no --extra pool given; additional-classes regime skipped");
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs, kv: &KvConfig) -> Result<()> {
    let verdicts = match args.verdicts {
        Some(p) => p,
        None => PathBuf::from(kv.get_string("verdicts").context("--verdicts is required")?),
    };
    let dataset = match &args.dataset {
        Some(s) => Some(load_source(&s.parse::<DatasetSource>()?, None)?),
        None => match kv.get_string("dataset") {
            Ok(s) => Some(load_source(&s.parse::<DatasetSource>()?, None)?),
            Err(_) => None,
        },
    };
    if let Some(ds) = &dataset {
        if truth_of(ds).is_none() {
            bail!("dataset given for eval has incomplete ground-truth flags");
        }
    }
    let out = out_dir(&args.out, kv)?;
    std::fs::create_dir_all(&out)?;
    let metrics_path = out.join("metrics.json");
    let r = run_eval(&verdicts, dataset.as_ref(), &metrics_path)?;
    println!(
        "wrote {} | acc {:.4} far {:.4} frr {:.4} hter {:.4}",
        metrics_path.display(),
        r.accuracy,
        r.far,
        r.frr,
        r.hter
    );
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let kv = match &cli.config {
        Some(path) => match KvConfig::load(path) {
            Ok(kv) => kv,
            Err(e) => {
                eprintln!("error: {e:#}");
                std::process::exit(1);
            }
        },
        None => KvConfig::empty(),
    };
    let result = match cli.command {
        Command::Poison(args) => cmd_poison(args, &kv),
        Command::Mix(args) => cmd_mix(args, &kv),
        Command::Detect(args) => cmd_detect(args, &kv),
        Command::Table(args) => cmd_table(args, &kv),
        Command::Curves(args) => cmd_curves(args, &kv),
        Command::Eval(args) => cmd_eval(args, &kv),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
