//! The results-table experiment: a {generator x ratio x seed} sweep with
//! per-cell detection metrics, aggregated into seed-mean rows in the column
//! order Acc, FAR, FRR, HTER.

use super::{
    generate_perturbations, load_source, run_detect, DatasetSource, GeneratorKind, HarnessError,
    PoisonSetup,
};
use crate::data::mix;
use crate::filtering::FilterConfig;
use crate::poisons::apply;
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Full sweep description.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub source: DatasetSource,
    pub subset: Option<usize>,
    pub generators: Vec<GeneratorKind>,
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
    pub filter: FilterConfig,
    pub poison: PoisonSetup,
    pub out_dir: PathBuf,
    /// Concurrent cells; each cell already parallelizes internally, so 1 is
    /// the sensible default on small machines.
    pub workers: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.generators.is_empty() {
            return Err(HarnessError::Config("no generators selected".into()));
        }
        if self.ratios.is_empty() || self.ratios.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return Err(HarnessError::Config(
                "ratios must be non-empty and in (0, 1]".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("at least one seed required".into()));
        }
        if self.workers == 0 {
            return Err(HarnessError::Config("workers must be positive".into()));
        }
        Ok(())
    }
}

/// One (generator, ratio, seed) run.
#[derive(Debug, Clone, Serialize)]
pub struct TableCell {
    pub generator: GeneratorKind,
    pub ratio: f64,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub far: Option<f64>,
    pub frr: Option<f64>,
    pub hter: Option<f64>,
    pub error: Option<String>,
}

/// Aggregated (generator, ratio) row: seed means and spreads.
#[derive(Debug, Clone, Serialize)]
pub struct TableRow {
    pub generator: GeneratorKind,
    pub ratio: f64,
    pub seeds_ok: usize,
    pub acc_mean: f64,
    pub acc_spread: f64,
    pub far_mean: f64,
    pub far_spread: f64,
    pub frr_mean: f64,
    pub frr_spread: f64,
    pub hter_mean: f64,
    pub hter_spread: f64,
    pub errors: Vec<String>,
}

#[derive(Debug)]
pub struct TableOutput {
    pub cells: Vec<TableCell>,
    pub rows: Vec<TableRow>,
    pub csv_path: PathBuf,
    pub text_path: PathBuf,
}

fn run_cell(
    base: &crate::data::MixedDataset,
    config: &ExperimentConfig,
    generator: GeneratorKind,
    ratio: f64,
    seed: u64,
) -> Result<(f64, f64, f64, f64), HarnessError> {
    // One perturbation set per (generator, seed) would be cheaper across
    // ratios, but per-cell generation keeps cells independent for the
    // worker pool; the poisoned dataset shares pixel buffers via Arc.
    let set = generate_perturbations(base, generator, &config.poison, seed)?;
    let poisoned = apply(base, &set, &base.ids())?;
    drop(set);
    let mixed = mix(base, &poisoned, ratio, seed)?;
    drop(poisoned);

    let filter = FilterConfig {
        seed,
        ..config.filter.clone()
    };
    let cell_dir = config.out_dir.join(format!(
        "cells/{generator}_r{:02}_s{seed}",
        (ratio * 100.0).round() as u32
    ));
    let outcome = run_detect(&mixed, &filter, &cell_dir)?;
    let rates = outcome
        .rates
        .expect("mixed datasets always carry ground truth");
    Ok((rates.accuracy, rates.far, rates.frr, rates.hter))
}

/// Run the sweep. Cell failures are recorded in their row; remaining cells
/// still run.
pub fn run_table(config: &ExperimentConfig) -> Result<TableOutput, HarnessError> {
    config.validate()?;
    let base = load_source(&config.source, config.subset)?;
    std::fs::create_dir_all(&config.out_dir).map_err(super::io_err(&config.out_dir))?;

    let mut jobs: Vec<(GeneratorKind, f64, u64)> = Vec::new();
    for &generator in &config.generators {
        for &ratio in &config.ratios {
            for &seed in &config.seeds {
                jobs.push((generator, ratio, seed));
            }
        }
    }

    let cells: Vec<TableCell> = if config.workers <= 1 {
        jobs.iter()
            .map(|&(generator, ratio, seed)| {
                to_cell(generator, ratio, seed, run_cell(&base, config, generator, ratio, seed))
            })
            .collect()
    } else {
        // Static round-robin assignment keeps the output order and the
        // per-cell work deterministic regardless of scheduling.
        let results: Vec<(usize, TableCell)> = std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for w in 0..config.workers {
                let jobs = &jobs;
                let base = &base;
                handles.push(scope.spawn(move || {
                    let mut out = Vec::new();
                    for (i, &(generator, ratio, seed)) in jobs.iter().enumerate() {
                        if i % config.workers == w {
                            let cell = to_cell(
                                generator,
                                ratio,
                                seed,
                                run_cell(base, config, generator, ratio, seed),
                            );
                            out.push((i, cell));
                        }
                    }
                    out
                }));
            }
            let mut all: Vec<(usize, TableCell)> = handles
                .into_iter()
                .flat_map(|h| h.join().expect("table worker panicked"))
                .collect();
            all.sort_by_key(|(i, _)| *i);
            all
        });
        results.into_iter().map(|(_, c)| c).collect()
    };

    let rows = aggregate(config, &cells);
    let csv_path = config.out_dir.join("results.csv");
    let text_path = config.out_dir.join("results.txt");
    write_csv(&rows, config, &csv_path)?;
    let text = render_text(&rows);
    std::fs::write(&text_path, &text).map_err(super::io_err(&text_path))?;

    Ok(TableOutput {
        cells,
        rows,
        csv_path,
        text_path,
    })
}

fn to_cell(
    generator: GeneratorKind,
    ratio: f64,
    seed: u64,
    result: Result<(f64, f64, f64, f64), HarnessError>,
) -> TableCell {
    match result {
        Ok((accuracy, far, frr, hter)) => TableCell {
            generator,
            ratio,
            seed,
            accuracy: Some(accuracy),
            far: Some(far),
            frr: Some(frr),
            hter: Some(hter),
            error: None,
        },
        Err(e) => TableCell {
            generator,
            ratio,
            seed,
            accuracy: None,
            far: None,
            frr: None,
            hter: None,
            error: Some(e.to_string()),
        },
    }
}

fn mean_spread(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let spread = values
        .iter()
        .map(|v| (v - mean).abs())
        .fold(0.0, f64::max);
    (mean, spread)
}

fn aggregate(config: &ExperimentConfig, cells: &[TableCell]) -> Vec<TableRow> {
    let mut rows = Vec::new();
    for &generator in &config.generators {
        for &ratio in &config.ratios {
            let group: Vec<&TableCell> = cells
                .iter()
                .filter(|c| c.generator == generator && c.ratio == ratio)
                .collect();
            let ok: Vec<&TableCell> = group.iter().filter(|c| c.error.is_none()).copied().collect();
            let collect = |f: fn(&TableCell) -> Option<f64>| -> Vec<f64> {
                ok.iter().filter_map(|c| f(c)).collect()
            };
            let (acc_mean, acc_spread) = mean_spread(&collect(|c| c.accuracy));
            let (far_mean, far_spread) = mean_spread(&collect(|c| c.far));
            let (frr_mean, frr_spread) = mean_spread(&collect(|c| c.frr));
            let (hter_mean, hter_spread) = mean_spread(&collect(|c| c.hter));
            rows.push(TableRow {
                generator,
                ratio,
                seeds_ok: ok.len(),
                acc_mean,
                acc_spread,
                far_mean,
                far_spread,
                frr_mean,
                frr_spread,
                hter_mean,
                hter_spread,
                errors: group.iter().filter_map(|c| c.error.clone()).collect(),
            });
        }
    }
    rows
}

fn write_csv(
    rows: &[TableRow],
    config: &ExperimentConfig,
    path: &Path,
) -> Result<(), HarnessError> {
    let mut file = std::fs::File::create(path).map_err(super::io_err(path))?;
    let echo = serde_json::to_string(config)
        .map_err(|e| HarnessError::Config(format!("config encode: {e}")))?;
    writeln!(file, "# config: {echo}").map_err(super::io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record([
        "generator",
        "ratio",
        "seeds_ok",
        "acc_mean",
        "acc_spread",
        "far_mean",
        "far_spread",
        "frr_mean",
        "frr_spread",
        "hter_mean",
        "hter_spread",
        "errors",
    ])
    .map_err(|e| HarnessError::Config(format!("csv write: {e}")))?;
    for r in rows {
        w.write_record([
            r.generator.to_string(),
            format!("{}", r.ratio),
            r.seeds_ok.to_string(),
            format!("{:.4}", r.acc_mean),
            format!("{:.4}", r.acc_spread),
            format!("{:.4}", r.far_mean),
            format!("{:.4}", r.far_spread),
            format!("{:.4}", r.frr_mean),
            format!("{:.4}", r.frr_spread),
            format!("{:.4}", r.hter_mean),
            format!("{:.4}", r.hter_spread),
            r.errors.join("; "),
        ])
        .map_err(|e| HarnessError::Config(format!("csv write: {e}")))?;
    }
    w.flush().map_err(super::io_err(path))
}

/// Aligned text table mirroring the Acc, FAR, FRR, HTER column order.
pub fn render_text(rows: &[TableRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<6} {:>6} {:>6} {:>8} {:>8} {:>8} {:>8}  {}\n",
        "gen", "ratio", "seeds", "Acc", "FAR", "FRR", "HTER", "errors"
    ));
    for r in rows {
        out.push_str(&format!(
            "{:<6} {:>6.2} {:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.4}  {}\n",
            r.generator.to_string(),
            r.ratio,
            r.seeds_ok,
            r.acc_mean,
            r.far_mean,
            r.frr_mean,
            r.hter_mean,
            if r.errors.is_empty() {
                String::new()
            } else {
                r.errors.join("; ")
            }
        ));
    }
    out
}
