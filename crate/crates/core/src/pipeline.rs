//! End-to-end orchestration shared by the command-line driver and the
//! acceptance harness: synthesize or load data, size the model to it, train or
//! cross-validate, and evaluate.

use std::fmt::Write as _;
use std::path::Path;

use crate::dataio::{synth_generate, Dataset, SignSample, Split, SynthConfig, Vocabs};
use crate::error::{GlotError, Result};
use crate::model::{checkpoint, GlotConfig, GlotModel};
use crate::training::{self, derive_seed, CrossValidation, Evaluation, FoldReport, TrainConfig};

/// Folds used by [`cross_validate`].
pub const FOLDS: usize = 5;

const MODEL_SEED_SALT: u64 = 1000;

/// Vocabularies come from the cv split, so a test split can be re-scored
/// against any checkpoint trained on the same manifest.
pub fn vocabularies(dataset: &Dataset) -> Vocabs {
    let cv = dataset.subset(&dataset.indices(Split::Cv));
    if cv.is_empty() {
        Vocabs::build(&dataset.samples)
    } else {
        Vocabs::build(&cv)
    }
}

/// Fills in the data-dependent sizes of `base`.
pub fn fit_config(base: &GlotConfig, dataset: &Dataset, vocabs: &Vocabs) -> GlotConfig {
    GlotConfig {
        feat_dim: dataset.feat_dim,
        max_frames: dataset.max_frames(),
        max_target_len: dataset.max_target_len() + 2,
        gloss_vocab_size: vocabs.gloss.len(),
        text_vocab_size: vocabs.text.len(),
        ..base.clone()
    }
}

/// Rejects a model whose sizes cannot serve `dataset`.
pub fn check_compatible(model: &GlotModel, dataset: &Dataset, vocabs: &Vocabs) -> Result<()> {
    let c = model.config();
    let mut problems = Vec::new();
    if c.feat_dim != dataset.feat_dim {
        problems.push(format!("feat_dim {} vs data {}", c.feat_dim, dataset.feat_dim));
    }
    if c.gloss_vocab_size != vocabs.gloss.len() {
        problems.push(format!("gloss vocabulary {} vs data {}", c.gloss_vocab_size, vocabs.gloss.len()));
    }
    if c.text_vocab_size != vocabs.text.len() {
        problems.push(format!("text vocabulary {} vs data {}", c.text_vocab_size, vocabs.text.len()));
    }
    if c.max_frames < dataset.max_frames() {
        problems.push(format!("max_frames {} below longest sample {}", c.max_frames, dataset.max_frames()));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(GlotError::Config(format!("checkpoint does not match data: {}", problems.join(", "))))
    }
}

fn split_samples(dataset: &Dataset, split: Split) -> Result<Vec<SignSample>> {
    let s = dataset.subset(&dataset.indices(split));
    if s.is_empty() {
        return Err(GlotError::Data(format!("{split} split is empty")));
    }
    Ok(s)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: GlotModel,
    pub vocabs: Vocabs,
    pub report: FoldReport,
}

/// Trains on the cv split; validation BLEU is measured on `val_split`.
pub fn train_dataset(
    dataset: &Dataset,
    base: &GlotConfig,
    cfg: &TrainConfig,
    val_split: Split,
) -> Result<TrainOutcome> {
    let vocabs = vocabularies(dataset);
    let model_cfg = fit_config(base, dataset, &vocabs);
    let tr = split_samples(dataset, Split::Cv)?;
    let val = split_samples(dataset, val_split)?;
    let mut model = GlotModel::new(model_cfg, derive_seed(cfg.seed, MODEL_SEED_SALT))?;
    let report = training::train(&mut model, &tr, &val, &vocabs, cfg, 0)?;
    Ok(TrainOutcome { model, vocabs, report })
}

#[derive(Clone, Debug)]
pub struct CrossValOutcome {
    pub cv: CrossValidation,
    pub vocabs: Vocabs,
    /// Best-fold model on the test split, when the dataset has one.
    pub test: Option<Evaluation>,
}

pub fn cross_validate_dataset(dataset: &Dataset, base: &GlotConfig, cfg: &TrainConfig) -> Result<CrossValOutcome> {
    let vocabs = vocabularies(dataset);
    let model_cfg = fit_config(base, dataset, &vocabs);
    let cv_set = split_samples(dataset, Split::Cv)?;
    let cv = training::cross_validate(&cv_set, FOLDS, &model_cfg, &vocabs, cfg)?;
    let test_set = dataset.subset(&dataset.indices(Split::Test));
    let test = if test_set.is_empty() {
        None
    } else {
        Some(training::evaluate(&cv.best_model, &test_set, &vocabs, cfg.max_decode_len, cfg.exec)?)
    };
    Ok(CrossValOutcome { cv, vocabs, test })
}

pub fn evaluate_split(
    model: &GlotModel,
    dataset: &Dataset,
    vocabs: &Vocabs,
    split: Split,
    cfg: &TrainConfig,
) -> Result<Evaluation> {
    check_compatible(model, dataset, vocabs)?;
    let samples = split_samples(dataset, split)?;
    training::evaluate(model, &samples, vocabs, cfg.max_decode_len, cfg.exec)
}

/// `gloss …` and `text …` BLEU record lines.
pub fn evaluation_record(eval: &Evaluation) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "gloss {}", eval.gloss.to_record());
    let _ = writeln!(s, "text {}", eval.text.to_record());
    s
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub checkpoint: Vec<u8>,
    pub train_log: String,
    pub eval_record: String,
}

/// Synthesizes a corpus under `dir`, trains on its cv split, and scores the
/// test split.
pub fn full_run(synth: &SynthConfig, dir: &Path, base: &GlotConfig, cfg: &TrainConfig) -> Result<RunArtifacts> {
    let manifest = synth_generate(synth, dir)?;
    let dataset = Dataset::load(&manifest)?;
    let out = train_dataset(&dataset, base, cfg, Split::Cv)?;
    let eval = evaluate_split(&out.model, &dataset, &out.vocabs, Split::Test, cfg)?;
    Ok(RunArtifacts {
        checkpoint: checkpoint::to_bytes(&out.model)?,
        train_log: out.report.to_log(),
        eval_record: evaluation_record(&eval),
    })
}
