//! Seeded train/test splits and Monte Carlo cross-validation.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`), whose output stream is
//! fixed for a given seed on every platform. Shuffling is a Fisher–Yates pass
//! with rejection-sampled bounds drawn straight from the generator's `u64`
//! stream, so assignments do not depend on `rand`'s sampling internals.

use std::fmt::Write as _;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::Backend;
use crate::dataset::DatasetIndex;
use crate::evaluation::{aggregate, evaluate, AggregateReport, EvalConfig, EvalError, EvalReport};
use crate::pipeline::{run_dataset, FailurePolicy, Mode, PipelineConfig, PipelineError};
use crate::wire::FORMAT_VERSION;

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("need at least 2 images to split, got {0}")]
    TooFew(usize),
    #[error("train fraction must be in (0, 1), got {0}")]
    Fraction(f64),
    #[error("k must be at least 1")]
    NoRuns,
    #[error("run {run}: {source}")]
    Pipeline {
        run: usize,
        #[source]
        source: PipelineError,
    },
    #[error("run {run}: {source}")]
    Eval {
        run: usize,
        #[source]
        source: EvalError,
    },
    #[error("run {run}: {message}")]
    Config { run: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train_fraction: f64, seed: u64) -> Result<Self, SplitError> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(SplitError::Fraction(train_fraction));
        }
        Ok(Self { train_fraction, seed })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvSpec {
    pub k: usize,
    pub train_fraction: f64,
    pub master_seed: u64,
}

impl CvSpec {
    pub fn new(k: usize, train_fraction: f64, master_seed: u64) -> Result<Self, SplitError> {
        if k == 0 {
            return Err(SplitError::NoRuns);
        }
        SplitSpec::new(train_fraction, 0)?;
        Ok(Self {
            k,
            train_fraction,
            master_seed,
        })
    }

    /// Per-run seeds: the first `k` outputs of ChaCha8 seeded with the
    /// master seed.
    pub fn run_seeds(&self) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        (0..self.k).map(|_| rng.next_u64()).collect()
    }

    pub fn run_specs(&self) -> Vec<SplitSpec> {
        self.run_seeds()
            .into_iter()
            .map(|seed| SplitSpec {
                train_fraction: self.train_fraction,
                seed,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub run: usize,
    pub seed: u64,
    /// Sorted.
    pub train: Vec<String>,
    /// Sorted.
    pub test: Vec<String>,
}

/// Uniform integer in `0..n` by rejection sampling.
fn bounded(rng: &mut ChaCha8Rng, n: u64) -> u64 {
    let zone = u64::MAX - (u64::MAX % n);
    loop {
        let v = rng.next_u64();
        if v < zone {
            return v % n;
        }
    }
}

/// Number of training images: `round(fraction · n)` kept within `1..n` so
/// neither side is empty.
pub fn train_size(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).round() as usize).clamp(1, n - 1)
}

pub fn make_split(index: &DatasetIndex, spec: &SplitSpec, run: usize) -> Result<SplitAssignment, SplitError> {
    let n = index.len();
    if n < 2 {
        return Err(SplitError::TooFew(n));
    }
    SplitSpec::new(spec.train_fraction, spec.seed)?;
    let mut ids: Vec<String> = index.image_ids().map(String::from).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for i in (1..n).rev() {
        let j = bounded(&mut rng, i as u64 + 1) as usize;
        ids.swap(i, j);
    }
    let mut test = ids.split_off(train_size(n, spec.train_fraction));
    ids.sort();
    test.sort();
    Ok(SplitAssignment {
        run,
        seed: spec.seed,
        train: ids,
        test,
    })
}

/// Backends for the two arms of a comparison.
pub struct ModeBackends<'a> {
    pub resized: &'a dyn Backend,
    pub tiled: &'a dyn Backend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub split: SplitAssignment,
    pub original: EvalReport,
    pub mspad: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub version: u32,
    pub cv: CvSpec,
    pub eval: EvalConfig,
    pub runs: Vec<RunResult>,
    pub original: AggregateReport,
    pub mspad: AggregateReport,
}

fn run_mode(
    run: usize,
    test: &DatasetIndex,
    config: &PipelineConfig,
    backends: &ModeBackends,
    eval: &EvalConfig,
) -> Result<EvalReport, SplitError> {
    let out = run_dataset(test, config, backends.resized, backends.tiled, FailurePolicy::FailFast)
        .map_err(|source| SplitError::Pipeline { run, source })?;
    evaluate(test, &out.scored(), eval).map_err(|source| SplitError::Eval { run, source })
}

/// Runs `cv.k` splits; each split's test set goes through the resize-only
/// configuration and the MS-PAD configuration, and both are evaluated on
/// the same images.
pub fn run_monte_carlo(
    index: &DatasetIndex,
    cv: &CvSpec,
    original_config: &PipelineConfig,
    mspad_config: &PipelineConfig,
    original: &ModeBackends,
    mspad: &ModeBackends,
    eval: &EvalConfig,
) -> Result<MonteCarloReport, SplitError> {
    if original_config.mode != Mode::ResizeOnly || mspad_config.mode != Mode::Mspad {
        return Err(SplitError::Config {
            run: 0,
            message: "expected a resize-only and an mspad configuration".into(),
        });
    }
    let runs: Vec<RunResult> = cv
        .run_specs()
        .par_iter()
        .enumerate()
        .map(|(run, spec)| {
            let split = make_split(index, spec, run)?;
            let test = index.subset(split.test.iter().map(String::as_str));
            let original = run_mode(run, &test, original_config, original, eval)?;
            let mspad = run_mode(run, &test, mspad_config, mspad, eval)?;
            Ok(RunResult { split, original, mspad })
        })
        .collect::<Result<_, SplitError>>()?;

    let agg = |pick: fn(&RunResult) -> &EvalReport| {
        let reports: Vec<EvalReport> = runs.iter().map(|r| pick(r).clone()).collect();
        aggregate(&reports).map_err(|source| SplitError::Eval { run: 0, source })
    };
    Ok(MonteCarloReport {
        version: FORMAT_VERSION,
        cv: *cv,
        eval: *eval,
        original: agg(|r| &r.original)?,
        mspad: agg(|r| &r.mspad)?,
        runs,
    })
}

impl MonteCarloReport {
    /// Per-split AP table (one Original/MS-PAD column pair per run) followed
    /// by the side-by-side averages.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let labels: Vec<&str> = self.original.classes.iter().map(|c| c.label.as_str()).collect();
        let _ = write!(s, "{:<12}", "AP");
        for r in &self.runs {
            let _ = write!(s, " {:>17}", format!("k = {}", r.split.run + 1));
        }
        s.push('\n');
        let _ = write!(s, "{:<12}", "");
        for _ in &self.runs {
            let _ = write!(s, " {:>8} {:>8}", "Original", "MS-PAD");
        }
        s.push('\n');
        for (ci, label) in labels.iter().enumerate() {
            let _ = write!(s, "{label:<12}");
            for r in &self.runs {
                let _ = write!(s, " {:>8.3} {:>8.3}", r.original.classes[ci].ap, r.mspad.classes[ci].ap);
            }
            s.push('\n');
        }
        let _ = write!(s, "{:<12}", "mAP");
        for r in &self.runs {
            let _ = write!(s, " {:>8.3} {:>8.3}", r.original.map, r.mspad.map);
        }
        s.push_str("\n\n");

        let _ = writeln!(s, "{:<12} {:>8} {:>8}", "Average", "Original", "MS-PAD");
        for (o, m) in self.original.classes.iter().zip(&self.mspad.classes) {
            let _ = writeln!(s, "{:<12} {:>8.3} {:>8.3}", o.label, o.mean_ap, m.mean_ap);
        }
        let _ = writeln!(s, "{:<12} {:>8.3} {:>8.3}", "mAP", self.original.mean_map, self.mspad.mean_map);
        s
    }
}
