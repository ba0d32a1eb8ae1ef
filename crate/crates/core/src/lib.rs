//! Unlearnable-example tooling: poison generators, dataset mixing, and the
//! iterative-filtering detector, with FAR/FRR/HTER scoring.
//!
//! The crate is organized around the pipeline:
//!
//! 1. [`data`] — load or synthesize image datasets, mix clean and poisoned
//!    samples at a controlled ratio, split by seed.
//! 2. [`poisons`] — generate LSP / OPS / EM perturbations under their norm
//!    budgets and apply them.
//! 3. [`trainer`] — train compact CNN classifiers over an expanded 2C label
//!    space with early stopping; learning-curve experiments.
//! 4. [`filtering`] — the iterative split/train/test/relabel/retrieve loop
//!    that separates poisoned from clean samples.
//! 5. [`metrics`] — confusion counts and Acc/FAR/FRR/HTER.
//! 6. [`harness`] — experiment orchestration behind the CLI.
//!
//! Heavy inner loops are data-parallel via rayon (the default `parallel`
//! feature); disabling the feature falls back to sequential execution with
//! bit-identical results.

pub mod data;
pub mod exec;
pub mod filtering;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod poisons;
pub mod rng;
pub mod trainer;
