//! Cross-entropy training with Adam, learning-rate schedules, and k-fold
//! cross-validation.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::{SignSample, Vocabs};
use crate::error::{GlotError, Result};
use crate::metrics::{corpus_bleu_single, BleuReport};
use crate::model::{checkpoint, Decoded, GlotConfig, GlotModel, HyperSet};
use crate::numcore::kernels::{map_indexed, Exec};
use crate::numcore::Tensor;

mod adam;
mod schedule;

pub use adam::{Adam, BETA1, BETA2, EPSILON};
pub use schedule::{LrSchedule, ScheduleKind};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub hyper_set: HyperSet,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_floor: f64,
    pub lr_factor: f64,
    pub plateau_patience: usize,
    pub schedule: ScheduleKind,
    pub seed: u64,
    /// Where the best checkpoint is written; `None` keeps it in memory only.
    pub checkpoint_dir: Option<PathBuf>,
    /// Greedy decoding limit during validation; `None` uses the model's.
    pub max_decode_len: Option<usize>,
    /// Fan-out over the samples of a batch and over folds.
    pub exec: Exec,
}

impl TrainConfig {
    pub fn preset(set: HyperSet) -> Self {
        let (lr_initial, lr_floor, lr_factor, schedule) = match set {
            HyperSet::Set1 => (5e-5, 2e-6, 0.5, ScheduleKind::Plateau),
            HyperSet::Set2 => (1e-3, 1e-3, 1.0, ScheduleKind::Constant),
        };
        TrainConfig {
            hyper_set: set,
            epochs: 30,
            batch_size: 32,
            lr_initial,
            lr_floor,
            lr_factor,
            plateau_patience: 3,
            schedule,
            seed: 0,
            checkpoint_dir: None,
            max_decode_len: None,
            exec: if cfg!(feature = "parallel") { Exec::Parallel } else { Exec::Sequential },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(GlotError::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr_initial > 0.0 && self.lr_floor > 0.0 && self.lr_floor <= self.lr_initial) {
            return Err(GlotError::Config(format!(
                "need 0 < lr_floor {} <= lr_initial {}",
                self.lr_floor, self.lr_initial
            )));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) {
            return Err(GlotError::Config(format!("lr_factor {} outside (0, 1]", self.lr_factor)));
        }
        if self.schedule == ScheduleKind::Plateau && self.plateau_patience == 0 {
            return Err(GlotError::Config("plateau_patience must be positive".into()));
        }
        Ok(())
    }

    pub fn schedule_state(&self) -> LrSchedule {
        LrSchedule::new(
            self.schedule,
            self.lr_initial,
            self.lr_factor,
            self.lr_floor,
            self.plateau_patience,
            self.epochs,
        )
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let dir = self.checkpoint_dir.as_ref().map_or("-".to_string(), |p| p.display().to_string());
        for (k, v) in [
            ("hparams", self.hyper_set.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr_initial", self.lr_initial.to_string()),
            ("lr_floor", self.lr_floor.to_string()),
            ("lr_factor", self.lr_factor.to_string()),
            ("plateau_patience", self.plateau_patience.to_string()),
            ("schedule", self.schedule.to_string()),
            ("seed", self.seed.to_string()),
            ("checkpoint_dir", dir),
        ] {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

/// Deterministic child seed for a numbered sub-task.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation text BLEU-1..4.
    pub bleu: [f64; 4],
    /// Learning rate used during this epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldReport {
    /// 1-based; 0 for a plain training run.
    pub fold_index: usize,
    pub batches_per_epoch: usize,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_text: BleuReport,
    pub best_gloss: BleuReport,
    pub checkpoint: Option<PathBuf>,
}

impl FoldReport {
    pub fn best_bleu4(&self) -> f64 {
        self.best_text.bleu(4)
    }

    /// One line per epoch followed by a summary line.
    pub fn to_log(&self) -> String {
        let mut s = String::new();
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "epoch={} train_loss={} bleu1={} bleu2={} bleu3={} bleu4={} lr={}",
                e.epoch, e.train_loss, e.bleu[0], e.bleu[1], e.bleu[2], e.bleu[3], e.lr
            );
        }
        let ckpt = self.checkpoint.as_ref().map_or("-".to_string(), |p| p.display().to_string());
        let b = &self.best_text.bleu;
        let _ = writeln!(
            s,
            "summary fold={} best_epoch={} bleu1={} bleu2={} bleu3={} bleu4={} checkpoint={ckpt}",
            self.fold_index, self.best_epoch, b[0], b[1], b[2], b[3]
        );
        s
    }
}

/// Corpus BLEU of greedy decodes against the reference streams.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub gloss: BleuReport,
    pub text: BleuReport,
    pub decoded: Vec<Decoded>,
    pub hypotheses: Vec<(Vec<String>, Vec<String>)>,
}

pub fn evaluate(
    model: &GlotModel,
    samples: &[SignSample],
    vocabs: &Vocabs,
    max_len: Option<usize>,
    exec: Exec,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(GlotError::Data("evaluation split is empty".into()));
    }
    let max_len = max_len.unwrap_or(model.config().max_target_len);
    let decoded = map_indexed(samples.len(), exec, |i| model.greedy_decode(&samples[i].features, max_len))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let hypotheses = decoded
        .iter()
        .map(|d| Ok((vocabs.gloss.decode_content(&d.gloss)?, vocabs.text.decode_content(&d.text)?)))
        .collect::<Result<Vec<_>>>()?;
    let (g_hyp, t_hyp): (Vec<_>, Vec<_>) = hypotheses.iter().cloned().unzip();
    let g_ref: Vec<Vec<String>> = samples.iter().map(|s| s.gloss.clone()).collect();
    let t_ref: Vec<Vec<String>> = samples.iter().map(|s| s.text.clone()).collect();
    Ok(Evaluation {
        gloss: corpus_bleu_single(&g_hyp, &g_ref)?,
        text: corpus_bleu_single(&t_hyp, &t_ref)?,
        decoded,
        hypotheses,
    })
}

/// Ordering key for checkpoint selection: BLEU-4, then BLEU-3, -2, -1.
fn rank_key(r: &BleuReport) -> [f64; 4] {
    [r.bleu(4), r.bleu(3), r.bleu(2), r.bleu(1)]
}

fn better(a: &BleuReport, b: &BleuReport) -> bool {
    rank_key(a).partial_cmp(&rank_key(b)) == Some(std::cmp::Ordering::Greater)
}

fn diverged(e: GlotError, epoch: usize, batch: usize) -> GlotError {
    match e {
        GlotError::NonFinite { .. } => GlotError::Divergence { epoch, batch, loss: f64::NAN },
        other => other,
    }
}

/// Trains `model` in place and leaves it holding the parameters of the best
/// validation epoch.
pub fn train(
    model: &mut GlotModel,
    train_set: &[SignSample],
    val_set: &[SignSample],
    vocabs: &Vocabs,
    cfg: &TrainConfig,
    fold_index: usize,
) -> Result<FoldReport> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(GlotError::precondition("train", "train and validation subsets must be non-empty"));
    }
    let encoded: Vec<_> = train_set.iter().map(|s| vocabs.encode(s)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.params());
    let mut schedule = cfg.schedule_state();
    let mut lr = schedule.lr();
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let batches_per_epoch = encoded.len().div_ceil(cfg.batch_size);

    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, Evaluation, _)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let m: &GlotModel = model;
            let per_sample = map_indexed(chunk.len(), cfg.exec, |j| {
                let salt = ((epoch * batches_per_epoch + b) * cfg.batch_size + j) as u64;
                let mut tape = m.tape().train(derive_seed(cfg.seed, salt));
                let loss = m.loss(&mut tape, &encoded[chunk[j]])?;
                let value = tape.value(loss.total).item();
                Ok((value, tape.backward(loss.total)?.into_params()))
            });
            let mut grads: Vec<Option<Tensor>> = vec![None; model.params().len()];
            let mut batch_loss = 0.0;
            for r in per_sample {
                let (value, g) = r.map_err(|e| diverged(e, epoch, b))?;
                batch_loss += value;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    match (acc.as_mut(), gi) {
                        (Some(a), Some(gi)) => a.data_mut().iter_mut().zip(gi.data()).for_each(|(x, y)| *x += y),
                        (None, Some(gi)) => *acc = Some(gi),
                        _ => {}
                    }
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            grads.iter_mut().flatten().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= inv));
            let batch_loss = batch_loss * inv;
            if !batch_loss.is_finite() {
                return Err(GlotError::Divergence { epoch, batch: b, loss: batch_loss });
            }
            adam.step(model.params_mut(), &grads, lr)?;
            if !model.params().all_finite() {
                return Err(GlotError::Divergence { epoch, batch: b, loss: batch_loss });
            }
            loss_sum += batch_loss * chunk.len() as f64;
        }

        let eval = evaluate(model, val_set, vocabs, cfg.max_decode_len, cfg.exec)?;
        logs.push(EpochLog { epoch, train_loss: loss_sum / encoded.len() as f64, bleu: eval.text.bleu, lr });
        if best.as_ref().is_none_or(|(_, e, _)| better(&eval.text, &e.text)) {
            best = Some((epoch, eval.clone(), model.params().clone()));
        }
        lr = schedule.step(eval.text.bleu(4));
    }

    let (best_epoch, eval, params) = best.expect("at least one epoch ran");
    model.load_params(params)?;
    let checkpoint = match &cfg.checkpoint_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| GlotError::io(dir, e))?;
            let path =
                dir.join(if fold_index == 0 { "best.ckpt".to_string() } else { format!("fold{fold_index}.ckpt") });
            checkpoint::save(model, &path)?;
            Some(path)
        }
        None => None,
    };
    Ok(FoldReport {
        fold_index,
        batches_per_epoch,
        epochs: logs,
        best_epoch,
        best_text: eval.text,
        best_gloss: eval.gloss,
        checkpoint,
    })
}

/// Seeded shuffle of `0..n` cut into `k` contiguous folds; the first `n % k`
/// folds hold one extra sample.
pub fn kfold_partition(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 || n < k {
        return Err(GlotError::Config(format!("cannot split {n} samples into {k} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut at = 0;
    for i in 0..k {
        let size = base + usize::from(i < extra);
        folds.push(idx[at..at + size].to_vec());
        at += size;
    }
    Ok(folds)
}

/// Index of the largest value; ties go to the lowest index.
pub fn select_best(scores: &[f64]) -> Option<usize> {
    (0..scores.len()).reduce(|best, i| if scores[i] > scores[best] { i } else { best })
}

#[derive(Clone, Debug)]
pub struct CrossValidation {
    pub folds: Vec<FoldReport>,
    pub partition: Vec<Vec<usize>>,
    /// 0-based position in `folds`.
    pub best: usize,
    pub best_model: GlotModel,
}

impl CrossValidation {
    pub fn best_fold(&self) -> &FoldReport {
        &self.folds[self.best]
    }

    pub fn to_log(&self) -> String {
        let mut s: String = self.folds.iter().map(FoldReport::to_log).collect();
        let _ = writeln!(s, "selected fold={} bleu4={}", self.best_fold().fold_index, self.best_fold().best_bleu4());
        s
    }
}

/// Fold `i` validates while the other folds train; folds run concurrently
/// on independent models seeded from `cfg.seed` and the fold index.
pub fn cross_validate(
    samples: &[SignSample],
    k: usize,
    model_cfg: &GlotConfig,
    vocabs: &Vocabs,
    cfg: &TrainConfig,
) -> Result<CrossValidation> {
    let partition = kfold_partition(samples.len(), k, cfg.seed)?;
    let runs = map_indexed(k, cfg.exec, |i| {
        let val: Vec<SignSample> = partition[i].iter().map(|&j| samples[j].clone()).collect();
        let tr: Vec<SignSample> = partition
            .iter()
            .enumerate()
            .filter(|&(f, _)| f != i)
            .flat_map(|(_, p)| p.iter().map(|&j| samples[j].clone()))
            .collect();
        let fold_cfg = TrainConfig { seed: derive_seed(cfg.seed, 1 + i as u64), ..cfg.clone() };
        let mut model = GlotModel::new(model_cfg.clone(), derive_seed(cfg.seed, 1000 + i as u64))?;
        let report = train(&mut model, &tr, &val, vocabs, &fold_cfg, i + 1)?;
        Ok((report, model))
    });
    let (folds, models): (Vec<_>, Vec<_>) = runs.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
    let scores: Vec<f64> = folds.iter().map(FoldReport::best_bleu4).collect();
    let best = select_best(&scores).expect("k > 0");
    let best_model = models.into_iter().nth(best).expect("one model per fold");
    Ok(CrossValidation { folds, partition, best, best_model })
}

#[cfg(test)]
mod tests;
