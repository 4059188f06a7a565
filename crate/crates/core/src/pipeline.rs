//! Raw interactions to labelled train/validation/test samples.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::corpus::{self, Catalog, CorpusError, Dataset, DatasetReport, Interaction, Splits};
use crate::diffcore::DiffError;
use crate::eval::{self, MetricsTable};
use crate::model::{Model, ModelError};
use crate::pmsa::ShiftBucketizer;
use crate::train::{self, FitResult, TrainError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrepareConfig {
    /// Users and items with fewer interactions are dropped.
    pub min_count: usize,
    /// Window length `o`.
    pub max_len: usize,
    /// Number of shift levels V.
    pub levels: usize,
    /// Probability of dropping each category label before labelling samples.
    pub label_dropout: f64,
    pub label_dropout_seed: u64,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self {
            min_count: 5,
            max_len: 50,
            levels: 5,
            label_dropout: 0.0,
            label_dropout_seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    /// Catalog used for shift levels (after label dropout).
    pub catalog: Catalog,
    pub splits: Splits,
    pub report: DatasetReport,
}

pub fn prepare(interactions: Vec<Interaction>, cfg: &PrepareConfig) -> Result<Prepared, CorpusError> {
    let filtered = corpus::filter_min_count(interactions, cfg.min_count)?;
    let dataset = corpus::build_sequences(&filtered);
    let catalog = if cfg.label_dropout > 0.0 {
        corpus::label_dropout(&dataset.catalog, cfg.label_dropout, cfg.label_dropout_seed)?
    } else {
        dataset.catalog.clone()
    };
    let bucketizer = ShiftBucketizer::new(cfg.levels)?;
    let splits = corpus::build_splits(&dataset, &catalog, cfg.max_len, &bucketizer)?;
    let report = DatasetReport::new(&dataset);
    Ok(Prepared {
        dataset,
        catalog,
        splits,
        report,
    })
}

/// A trained model with its test metrics and timings.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub fit: FitResult,
    pub test: MetricsTable,
    pub train_seconds: f64,
    /// Wall-clock of one full-ranking pass over the test split.
    pub eval_seconds: f64,
}

/// Initializes a model from `cfg.train.seed`, fits it and scores the test split.
pub fn train_and_evaluate(splits: &Splits, num_items: usize, cfg: &RunConfig) -> Result<RunOutcome, PipelineError> {
    let model = Model::new(cfg.model.clone(), num_items, cfg.train.seed)?;
    let start = Instant::now();
    let fit = train::fit(model, &splits.train, &splits.val, &cfg.train)?;
    let train_seconds = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let test = eval::rank_metrics(&fit.model, &splits.test, &cfg.eval.ks, cfg.eval.batch_size)?;
    let eval_seconds = start.elapsed().as_secs_f64();
    Ok(RunOutcome {
        fit,
        test,
        train_seconds,
        eval_seconds,
    })
}
