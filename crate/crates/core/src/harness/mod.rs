//! Experiment orchestration: dataset sources, poison pipelines, detection
//! runs with exported artifacts, the results table, and learning-curve
//! experiments. The CLI is a thin wrapper over this module.

mod table;

pub use table::{render_text, run_table, ExperimentConfig, TableCell, TableOutput, TableRow};

use crate::data::{
    generate_synthetic, load_archive, load_dataset, mix, save_archive, DataError, DatasetFormat,
    MixedDataset, SampleRecord, SynthSpec,
};
use crate::filtering::{
    self, write_history_json, write_verdicts_csv, DetectionReport, FilterConfig, FilterError,
};
use crate::metrics::{confusion, rates, MetricsError, Rates};
use crate::poisons::{
    apply, generate_em, generate_lsp, generate_ops, measure_l0_positions, measure_l2,
    measure_linf, save_perturbations, EmConfig, NormKind, PerturbationBudget, PerturbationSet,
    PoisonError,
};
use crate::trainer::{learning_curves, ClassifierConfig, CurveRow, TrainError};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Poison(#[from] PoisonError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Where a dataset comes from. The string form accepts explicit prefixes
/// (`synth:`, `archive:`, `cifar:`, `imagedir:`) or a bare path, which is
/// sniffed by layout.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    CifarBinary(PathBuf),
    ImageDirectory(PathBuf),
    Archive(PathBuf),
    Synthetic(SynthSpec),
}

impl std::fmt::Display for DatasetSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DatasetSource::CifarBinary(p) => write!(f, "cifar:{}", p.display()),
            DatasetSource::ImageDirectory(p) => write!(f, "imagedir:{}", p.display()),
            DatasetSource::Archive(p) => write!(f, "archive:{}", p.display()),
            DatasetSource::Synthetic(s) => write!(
                f,
                "synth:n={},c={},h={},w={},seed={}",
                s.num_samples, s.num_classes, s.height, s.width, s.seed
            ),
        }
    }
}

impl Serialize for DatasetSource {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

fn parse_synth_spec(body: &str) -> Result<SynthSpec, HarnessError> {
    let mut spec = SynthSpec::default();
    if body.is_empty() {
        return Ok(spec);
    }
    for part in body.split(',') {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("bad synth parameter '{part}'")))?;
        let parse_err = |_| HarnessError::Config(format!("bad synth value '{v}' for '{k}'"));
        match k {
            "n" => spec.num_samples = v.parse().map_err(parse_err)?,
            "c" => spec.num_classes = v.parse().map_err(parse_err)?,
            "h" => spec.height = v.parse().map_err(parse_err)?,
            "w" => spec.width = v.parse().map_err(parse_err)?,
            "seed" => spec.seed = v.parse().map_err(parse_err)?,
            other => {
                return Err(HarnessError::Config(format!(
                    "unknown synth parameter '{other}'"
                )))
            }
        }
    }
    Ok(spec)
}

impl std::str::FromStr for DatasetSource {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(body) = s.strip_prefix("synth:") {
            return Ok(DatasetSource::Synthetic(parse_synth_spec(body)?));
        }
        if s == "synth" {
            return Ok(DatasetSource::Synthetic(SynthSpec::default()));
        }
        if let Some(p) = s.strip_prefix("archive:") {
            return Ok(DatasetSource::Archive(PathBuf::from(p)));
        }
        if let Some(p) = s.strip_prefix("cifar:") {
            return Ok(DatasetSource::CifarBinary(PathBuf::from(p)));
        }
        if let Some(p) = s.strip_prefix("imagedir:") {
            return Ok(DatasetSource::ImageDirectory(PathBuf::from(p)));
        }
        // Bare path: sniff the layout.
        let path = PathBuf::from(s);
        if path.is_dir() {
            if path.join("meta.txt").exists() {
                return Ok(DatasetSource::Archive(path));
            }
            return Ok(DatasetSource::ImageDirectory(path));
        }
        if path.extension().is_some_and(|e| e == "bin") {
            return Ok(DatasetSource::CifarBinary(path));
        }
        Err(HarnessError::Config(format!(
            "cannot interpret dataset source '{s}'"
        )))
    }
}

/// Load (or synthesize) a dataset, optionally truncated to its first
/// `subset` samples.
pub fn load_source(
    source: &DatasetSource,
    subset: Option<usize>,
) -> Result<MixedDataset, HarnessError> {
    let ds = match source {
        DatasetSource::CifarBinary(p) => load_dataset(p, DatasetFormat::CifarBinary)?,
        DatasetSource::ImageDirectory(p) => load_dataset(p, DatasetFormat::ImageDirectory)?,
        DatasetSource::Archive(p) => load_archive(p)?,
        DatasetSource::Synthetic(spec) => {
            let spec = match subset {
                // Prefix-stable generation makes truncation equal to
                // generating fewer samples directly.
                Some(n) if n < spec.num_samples => SynthSpec {
                    num_samples: n,
                    ..spec.clone()
                },
                _ => spec.clone(),
            };
            generate_synthetic(&spec)?
        }
    };
    match subset {
        Some(n) if n < ds.len() => {
            let samples: Vec<SampleRecord> = ds.samples()[..n].to_vec();
            Ok(MixedDataset::new(
                samples,
                ds.num_classes(),
                ds.metadata.clone(),
            )?)
        }
        _ => Ok(ds),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GeneratorKind {
    #[serde(rename = "em")]
    Em,
    #[serde(rename = "lsp")]
    Lsp,
    #[serde(rename = "ops")]
    Ops,
}

impl std::str::FromStr for GeneratorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "em" => Ok(GeneratorKind::Em),
            "lsp" => Ok(GeneratorKind::Lsp),
            "ops" => Ok(GeneratorKind::Ops),
            other => Err(format!("unknown generator '{other}' (expected em|lsp|ops)")),
        }
    }
}

impl std::fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GeneratorKind::Em => "em",
            GeneratorKind::Lsp => "lsp",
            GeneratorKind::Ops => "ops",
        })
    }
}

/// Generator parameters shared by the poison/table commands.
#[derive(Debug, Clone, Serialize)]
pub struct PoisonSetup {
    pub em: EmConfig,
    /// Reference classifier for EM generation; its head is set to C.
    pub em_trainer: ClassifierConfig,
    pub lsp_patch_size: usize,
    pub em_budget: PerturbationBudget,
    pub lsp_budget: PerturbationBudget,
    pub ops_budget: PerturbationBudget,
}

impl Default for PoisonSetup {
    fn default() -> Self {
        PoisonSetup {
            em: EmConfig::default(),
            em_trainer: ClassifierConfig::default(),
            lsp_patch_size: 8,
            em_budget: PerturbationBudget::em_default(),
            lsp_budget: PerturbationBudget::lsp_default(),
            ops_budget: PerturbationBudget::ops_default(),
        }
    }
}

impl PoisonSetup {
    /// Desk-scale profile: a reduced EM schedule that keeps generation
    /// minutes-scale, and wider LSP tiles whose per-pixel amplitude clears
    /// the synthetic noise floor.
    pub fn desk_scale() -> Self {
        PoisonSetup {
            em: EmConfig {
                outer_steps: 5,
                inner_noise_steps: 8,
                ..EmConfig::default()
            },
            lsp_patch_size: 16,
            ..PoisonSetup::default()
        }
    }
}

/// Generate one family's perturbations for every sample of `dataset`.
pub fn generate_perturbations(
    dataset: &MixedDataset,
    kind: GeneratorKind,
    setup: &PoisonSetup,
    seed: u64,
) -> Result<PerturbationSet, HarnessError> {
    let set = match kind {
        GeneratorKind::Lsp => generate_lsp(dataset, &setup.lsp_budget, setup.lsp_patch_size, seed)?,
        GeneratorKind::Ops => generate_ops(dataset, &setup.ops_budget, seed)?,
        GeneratorKind::Em => {
            let trainer = ClassifierConfig {
                output_dim: dataset.num_classes(),
                seed,
                ..setup.em_trainer.clone()
            };
            generate_em(dataset, &setup.em_budget, &trainer, &setup.em)?
        }
    };
    Ok(set)
}

/// Max measured applied norm per sample, in the budget's own norm.
pub fn max_applied_norm(
    clean: &MixedDataset,
    poisoned: &MixedDataset,
    norm: NormKind,
) -> f64 {
    let shape = clean.image_shape();
    clean
        .samples()
        .iter()
        .zip(poisoned.samples())
        .map(|(a, b)| match norm {
            NormKind::Linf => measure_linf(a.image.pixels(), b.image.pixels()),
            NormKind::L2 => measure_l2(a.image.pixels(), b.image.pixels()),
            NormKind::L0 => {
                measure_l0_positions(a.image.pixels(), b.image.pixels(), shape) as f64
            }
        })
        .fold(0.0, f64::max)
}

/// Outputs of the poison command.
#[derive(Debug)]
pub struct PoisonOutcome {
    pub perturbations_dir: PathBuf,
    pub poisoned_dir: PathBuf,
    pub max_measured_norm: f64,
    pub budget: PerturbationBudget,
}

/// Generate perturbations for the whole dataset, apply them everywhere, and
/// archive both the perturbation set and the poisoned dataset.
pub fn run_poison(
    source: &DatasetSource,
    subset: Option<usize>,
    kind: GeneratorKind,
    setup: &PoisonSetup,
    seed: u64,
    out_dir: &Path,
) -> Result<PoisonOutcome, HarnessError> {
    let clean = load_source(source, subset)?;
    let set = generate_perturbations(&clean, kind, setup, seed)?;
    let poisoned = apply(&clean, &set, &clean.ids())?;

    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let perturbations_dir = out_dir.join("perturbations");
    let poisoned_dir = out_dir.join("poisoned");
    save_perturbations(&set, &perturbations_dir)?;
    save_archive(&poisoned, &poisoned_dir)?;

    Ok(PoisonOutcome {
        perturbations_dir,
        poisoned_dir,
        max_measured_norm: max_applied_norm(&clean, &poisoned, set.budget.norm),
        budget: set.budget,
    })
}

/// Mix a clean source with a fully poisoned source at `ratio` and archive
/// the result.
pub fn run_mix(
    clean: &DatasetSource,
    poisoned: &DatasetSource,
    subset: Option<usize>,
    ratio: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<PathBuf, HarnessError> {
    let clean = load_source(clean, subset)?;
    let poisoned = load_source(poisoned, subset)?;
    let mixed = mix(&clean, &poisoned, ratio, seed)?;
    let dir = out_dir.join("mixed");
    save_archive(&mixed, &dir)?;
    Ok(dir)
}

/// Ground-truth map of a dataset, if every sample carries a flag.
pub fn truth_of(dataset: &MixedDataset) -> Option<HashMap<u64, bool>> {
    if !dataset.has_ground_truth() {
        return None;
    }
    Some(
        dataset
            .samples()
            .iter()
            .map(|s| (s.id, s.ground_truth_poisoned == Some(true)))
            .collect(),
    )
}

/// Outputs of a detection run.
#[derive(Debug)]
pub struct DetectOutcome {
    pub report: DetectionReport,
    pub rates: Option<Rates>,
    pub verdicts_csv: PathBuf,
    pub history_json: PathBuf,
    pub metrics_json: Option<PathBuf>,
}

/// Run iterative filtering on a mixed dataset and export verdicts, history,
/// and (when ground truth is present) metrics. Partial outputs are removed
/// if anything fails.
pub fn run_detect(
    dataset: &MixedDataset,
    config: &FilterConfig,
    out_dir: &Path,
) -> Result<DetectOutcome, HarnessError> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let verdicts_csv = out_dir.join("verdicts.csv");
    let history_json = out_dir.join("history.json");
    let metrics_json = out_dir.join("metrics.json");

    let result = (|| -> Result<DetectOutcome, HarnessError> {
        let report = filtering::run(dataset, config)?;
        let truth = truth_of(dataset);
        write_verdicts_csv(&report, config, truth.as_ref(), &verdicts_csv)?;
        write_history_json(&report, config, &history_json)?;
        let mut rates_out = None;
        let mut metrics_path = None;
        if let Some(truth) = truth {
            let r = rates(confusion(&report, &truth)?);
            write_metrics_json(&r, config, &metrics_json)?;
            rates_out = Some(r);
            metrics_path = Some(metrics_json.clone());
        }
        Ok(DetectOutcome {
            report,
            rates: rates_out,
            verdicts_csv: verdicts_csv.clone(),
            history_json: history_json.clone(),
            metrics_json: metrics_path,
        })
    })();

    if result.is_err() {
        for p in [&verdicts_csv, &history_json, &metrics_json] {
            let _ = std::fs::remove_file(p);
        }
    }
    result
}

pub fn write_metrics_json(
    rates: &Rates,
    config: &FilterConfig,
    path: &Path,
) -> Result<(), HarnessError> {
    let doc = serde_json::json!({
        "config": config,
        "accuracy": rates.accuracy,
        "far": rates.far,
        "frr": rates.frr,
        "hter": rates.hter,
        "counts": rates.counts,
        "degenerate": rates.degenerate,
    });
    std::fs::write(path, serde_json::to_string_pretty(&doc).unwrap()).map_err(io_err(path))
}

/// Learning-curve outputs, one CSV per regime.
#[derive(Debug)]
pub struct CurvesOutcome {
    pub base_rows: Vec<CurveRow>,
    pub extra_rows: Option<Vec<CurveRow>>,
    pub base_csv: PathBuf,
    pub extra_csv: Option<PathBuf>,
}

/// Run the learning-curve experiment on a mixed dataset (regime 1), and —
/// when an extra clean pool is supplied — again with that pool relabeled to
/// `y + C` (regime 2).
pub fn run_curves(
    mixed: &MixedDataset,
    extra_clean: Option<&MixedDataset>,
    trainer: &ClassifierConfig,
    eval_split_seed: u64,
    out_dir: &Path,
) -> Result<CurvesOutcome, HarnessError> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let config = ClassifierConfig {
        output_dim: 2 * mixed.num_classes(),
        ..trainer.clone()
    };

    let base_rows = learning_curves(mixed, None, &config, eval_split_seed)?;
    let base_csv = out_dir.join("curves_mixed.csv");
    write_curves_csv(&base_rows, &config, &base_csv)?;

    let (extra_rows, extra_csv) = match extra_clean {
        Some(extra) => {
            let relabeled = relabel_plus_c(extra, mixed.num_classes())?;
            let rows = learning_curves(mixed, Some(&relabeled), &config, eval_split_seed)?;
            let path = out_dir.join("curves_additional_classes.csv");
            write_curves_csv(&rows, &config, &path)?;
            (Some(rows), Some(path))
        }
        None => (None, None),
    };

    Ok(CurvesOutcome {
        base_rows,
        extra_rows,
        base_csv,
        extra_csv,
    })
}

/// Copy `extra`'s samples with `current_label = original + C`, offsetting
/// ids above every id in use so the pools never collide.
pub fn relabel_plus_c(
    extra: &MixedDataset,
    num_classes: u16,
) -> Result<Vec<SampleRecord>, HarnessError> {
    if extra.num_classes() != num_classes {
        return Err(HarnessError::Config(format!(
            "extra clean pool has {} classes, mixed dataset has {num_classes}",
            extra.num_classes()
        )));
    }
    Ok(extra
        .samples()
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.current_label = s.original_label + num_classes;
            s
        })
        .collect())
}

pub fn write_curves_csv(
    rows: &[CurveRow],
    config: &ClassifierConfig,
    path: &Path,
) -> Result<(), HarnessError> {
    let mut file = std::fs::File::create(path).map_err(io_err(path))?;
    let config_json = serde_json::to_string(config)
        .map_err(|e| HarnessError::Config(format!("config encode: {e}")))?;
    writeln!(file, "# config: {config_json}").map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["epoch", "acc_poisoned", "acc_clean"])
        .map_err(|e| HarnessError::Config(format!("csv write: {e}")))?;
    for row in rows {
        w.write_record([
            row.epoch.to_string(),
            format!("{:.6}", row.acc_poisoned),
            format!("{:.6}", row.acc_clean),
        ])
        .map_err(|e| HarnessError::Config(format!("csv write: {e}")))?;
    }
    w.flush().map_err(io_err(path))
}

/// Read a verdict CSV (written by [`run_detect`]) and score it against the
/// ground-truth column or a dataset's flags.
pub fn run_eval(
    verdicts_csv: &Path,
    dataset: Option<&MixedDataset>,
    out_path: &Path,
) -> Result<Rates, HarnessError> {
    let file = std::fs::File::open(verdicts_csv).map_err(io_err(verdicts_csv))?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| HarnessError::Config(format!("bad verdict csv: {e}")))?
        .clone();
    let id_col = headers.iter().position(|h| h == "id");
    let verdict_col = headers.iter().position(|h| h == "verdict");
    let truth_col = headers.iter().position(|h| h == "ground_truth");
    let (Some(id_col), Some(verdict_col)) = (id_col, verdict_col) else {
        return Err(HarnessError::Config(
            "verdict csv must have 'id' and 'verdict' columns".into(),
        ));
    };

    let dataset_truth = dataset.and_then(truth_of);
    let mut counts = crate::metrics::ConfusionCounts::default();
    for record in reader.records() {
        let record = record.map_err(|e| HarnessError::Config(format!("bad verdict csv: {e}")))?;
        let id: u64 = record[id_col]
            .parse()
            .map_err(|_| HarnessError::Config(format!("bad id '{}'", &record[id_col])))?;
        let verdict_poisoned = match &record[verdict_col] {
            "poisoned" => true,
            "clean" => false,
            other => {
                return Err(HarnessError::Config(format!("bad verdict '{other}'")));
            }
        };
        let truth_poisoned = match (truth_col.map(|c| record[c].to_string()), &dataset_truth) {
            (Some(t), _) if t == "poisoned" => true,
            (Some(t), _) if t == "clean" => false,
            (_, Some(map)) => *map
                .get(&id)
                .ok_or(MetricsError::MissingTruth(id))
                .map_err(HarnessError::Metrics)?,
            _ => {
                return Err(HarnessError::Config(
                    "no ground truth available: csv lacks the column and no dataset given".into(),
                ))
            }
        };
        match (truth_poisoned, verdict_poisoned) {
            (true, true) => counts.tp += 1,
            (true, false) => counts.fn_ += 1,
            (false, true) => counts.fp += 1,
            (false, false) => counts.tn += 1,
        }
    }
    let r = rates(counts);
    let doc = serde_json::json!({
        "accuracy": r.accuracy,
        "far": r.far,
        "frr": r.frr,
        "hter": r.hter,
        "counts": r.counts,
        "degenerate": r.degenerate,
    });
    std::fs::write(out_path, serde_json::to_string_pretty(&doc).unwrap())
        .map_err(io_err(out_path))?;
    Ok(r)
}
