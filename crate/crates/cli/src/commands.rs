use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use glot_core::dataio::{synth_generate, Dataset, SynthConfig};
use glot_core::model::{checkpoint, EncodedSample, GlotConfig, GlotModel, LssaDepth};
use glot_core::numcore::{grad_check_params, Fault, Tape, Tensor};
use glot_core::pipeline::{self, evaluation_record};
use glot_core::sparse_attention::{count_attention_pairs, floor_log2, AttentionMode};
use glot_core::training::{ScheduleKind, TrainConfig};
use glot_core::{GlotError, Result};
use rand::SeedableRng;
use sha2::{Digest, Sha256};

use crate::args::{BenchArgs, EvalArgs, GradcheckArgs, SynthArgs, TrainArgs};
use crate::{EXIT_CHECK_FAILED, EXIT_OK};

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| GlotError::Io { path: path.to_path_buf(), source: e })
}

pub fn synth(a: &SynthArgs) -> Result<u8> {
    let cfg = SynthConfig {
        seed: a.seed,
        n_samples: a.samples,
        n_signs: a.signs,
        feat_dim: a.feat_dim,
        noise_sigma: a.noise,
    };
    let manifest = synth_generate(&cfg, &a.out)?;
    println!("manifest={} samples={} test={}", manifest.display(), cfg.n_samples, cfg.n_test());
    Ok(EXIT_OK)
}

/// Preset values with the command-line overrides applied.
fn effective(a: &TrainArgs) -> Result<(GlotConfig, TrainConfig)> {
    let mut m = GlotConfig::preset(a.hparams);
    m.encoder_kind = a.encoder;
    if let Some(v) = a.d_model {
        m.d_model = v;
    }
    if let Some(v) = a.ff_size {
        m.ff_size = v;
    }
    if let Some(v) = a.heads {
        m.n_heads = v;
    }
    if let Some(v) = a.dropout {
        m.dropout = v;
    }
    if let Some(v) = a.positional {
        m.positional = v;
    }
    if let Some(v) = a.lssa_layers {
        m.n_lssa_layers = LssaDepth::Fixed(v);
    }
    m.validate()?;

    let mut t = TrainConfig::preset(a.hparams);
    t.seed = a.seed;
    t.checkpoint_dir = a.out.clone();
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.schedule {
        t.schedule = v;
    }
    if let Some(v) = a.lr {
        t.lr_initial = v;
        if t.schedule == ScheduleKind::Constant || t.lr_floor > v {
            t.lr_floor = v;
        }
    }
    t.validate()?;
    Ok((m, t))
}

fn print_config(m: &GlotConfig, t: &TrainConfig) {
    println!("# model");
    print!("{}", m.to_kv());
    println!("# training");
    print!("{}", t.to_kv());
}

fn load_for_training(a: &TrainArgs) -> Result<(Dataset, PathBuf)> {
    let manifest = a.manifest.as_ref().ok_or_else(|| GlotError::Config("--manifest is required".into()))?;
    let out = a.out.clone().ok_or_else(|| GlotError::Config("--out is required".into()))?;
    let dataset = Dataset::load(manifest)?;
    fs::create_dir_all(&out).map_err(|e| GlotError::Io { path: out.clone(), source: e })?;
    Ok((dataset, out))
}

fn report_checkpoint(path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| GlotError::Io { path: path.to_path_buf(), source: e })?;
    println!("checkpoint={} sha256={}", path.display(), sha256_hex(&bytes));
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<u8> {
    let (m, t) = effective(a)?;
    if a.dry_run {
        print_config(&m, &t);
        return Ok(EXIT_OK);
    }
    let (dataset, out) = load_for_training(a)?;
    print_config(&pipeline::fit_config(&m, &dataset, &pipeline::vocabularies(&dataset)), &t);
    let run = pipeline::train_dataset(&dataset, &m, &t, a.val_split)?;
    let log = run.report.to_log();
    write(&out.join("train.log"), &log)?;
    print!("{log}");
    if let Some(p) = &run.report.checkpoint {
        report_checkpoint(p)?;
    }
    Ok(EXIT_OK)
}

pub fn crossval(a: &TrainArgs) -> Result<u8> {
    let (m, t) = effective(a)?;
    if a.dry_run {
        print_config(&m, &t);
        return Ok(EXIT_OK);
    }
    let (dataset, out) = load_for_training(a)?;
    print_config(&pipeline::fit_config(&m, &dataset, &pipeline::vocabularies(&dataset)), &t);
    let run = pipeline::cross_validate_dataset(&dataset, &m, &t)?;
    let log = run.cv.to_log();
    write(&out.join("crossval.log"), &log)?;
    print!("{log}");
    if let Some(p) = &run.cv.best_fold().checkpoint {
        report_checkpoint(p)?;
    }
    if let Some(test) = &run.test {
        let rec = evaluation_record(test);
        write(&out.join("test_bleu.txt"), &rec)?;
        print!("{rec}");
    }
    Ok(EXIT_OK)
}

fn load_eval(a: &EvalArgs) -> Result<(Dataset, GlotModel, glot_core::dataio::Vocabs)> {
    let dataset = Dataset::load(&a.manifest)?;
    let model = checkpoint::load(&a.checkpoint)?;
    let vocabs = pipeline::vocabularies(&dataset);
    pipeline::check_compatible(&model, &dataset, &vocabs)?;
    Ok((dataset, model, vocabs))
}

fn emit(text: &str, out: &Option<PathBuf>) -> Result<()> {
    print!("{text}");
    match out {
        Some(p) => write(p, text),
        None => Ok(()),
    }
}

pub fn eval(a: &EvalArgs) -> Result<u8> {
    let (dataset, model, vocabs) = load_eval(a)?;
    let cfg = TrainConfig::preset(glot_core::model::HyperSet::Set2);
    let e = pipeline::evaluate_split(&model, &dataset, &vocabs, a.split, &cfg)?;
    emit(&evaluation_record(&e), &a.out)?;
    Ok(EXIT_OK)
}

pub fn decode(a: &EvalArgs) -> Result<u8> {
    let (dataset, model, vocabs) = load_eval(a)?;
    let cfg = TrainConfig::preset(glot_core::model::HyperSet::Set2);
    let e = pipeline::evaluate_split(&model, &dataset, &vocabs, a.split, &cfg)?;
    let ids = dataset.indices(a.split);
    let mut text = String::new();
    for ((i, (gloss, words)), d) in ids.iter().zip(&e.hypotheses).zip(&e.decoded) {
        let mark = |t: bool| if t { " [truncated]" } else { "" };
        text.push_str(&format!(
            "{}\tgloss: {}{}\ttext: {}{}\n",
            dataset.samples[*i].id,
            gloss.join(" "),
            mark(d.gloss_truncated),
            words.join(" "),
            mark(d.text_truncated)
        ));
    }
    emit(&text, &a.out)?;
    Ok(EXIT_OK)
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<u8> {
    let cfg = GlotConfig { encoder_kind: a.encoder, ..GlotConfig::tiny() };
    let model = GlotModel::new(cfg.clone(), a.seed)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(a.seed);
    let sample = EncodedSample {
        features: Tensor::uniform(&[cfg.max_frames, cfg.feat_dim], 1.0, &mut rng),
        gloss: vec![5, 6, 5],
        text: vec![7, 8, 9, 10],
    };
    let fault = a.corrupt_backward.then_some(Fault::SigmoidBackward);
    let checks = grad_check_params(model.params(), |tape| Ok(model.loss(tape, &sample)?.total), 1e-6, a.tol, fault)?;
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    println!("{:width$}  {:>12}  {:>6}  result", "parameter", "max_rel_err", "coords");
    for c in &checks {
        let verdict = if c.report.pass { "PASS" } else { "FAIL" };
        println!("{:width$}  {:>12.3e}  {:>6}  {verdict}", c.name, c.report.max_rel_err, c.report.checked);
    }
    let failed = checks.iter().filter(|c| !c.report.pass).count();
    println!("{} of {} parameters pass at tol {:e}", checks.len() - failed, checks.len(), a.tol);
    Ok(if failed == 0 { EXIT_OK } else { EXIT_CHECK_FAILED })
}

/// Counts from the instrumented kernel and the time of one scores → softmax →
/// weighted-sum pass, best of `reps`.
fn measure(len: usize, mode: AttentionMode, dim: usize, reps: usize) -> Result<(u64, f64)> {
    let mask = Arc::new(mode.mask(len)?);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(len as u64);
    let q = Tensor::uniform(&[len, dim], 1.0, &mut rng);
    let k = Tensor::uniform(&[len, dim], 1.0, &mut rng);
    let mut best = f64::INFINITY;
    let mut count = 0;
    for _ in 0..reps.max(1) {
        let mut tape = Tape::new();
        let (qv, kv) = (tape.constant(q.clone())?, tape.constant(k.clone())?);
        let start = Instant::now();
        let s = tape.masked_scores(qv, kv, &mask, 1.0 / (dim as f64).sqrt())?;
        let p = tape.masked_softmax_rows(s, &mask)?;
        tape.masked_weighted_sum(p, kv, &mask)?;
        best = best.min(start.elapsed().as_secs_f64() * 1e3);
        count = tape.score_evaluations();
    }
    Ok((count, best))
}

pub fn bench_attn(a: &BenchArgs) -> Result<u8> {
    if a.lengths.contains(&0) || a.dim == 0 {
        return Err(GlotError::Config("lengths and --dim must be positive".into()));
    }
    let modes = [AttentionMode::Dense, AttentionMode::CausalDense, AttentionMode::LogSparse];
    println!(
        "{:>6} {:>10} {:>10} {:>10} {:>10} {:>9} {:>10} {:>10} {:>10}",
        "L", "dense", "causal", "logsparse", "bound", "counts", "dense_ms", "causal_ms", "sparse_ms"
    );
    let mut ok = true;
    for &len in &a.lengths {
        let mut counts = [0u64; 3];
        let mut times = [0f64; 3];
        let mut agree = true;
        for (i, &mode) in modes.iter().enumerate() {
            let (measured, ms) = measure(len, mode, a.dim, a.reps)?;
            counts[i] = count_attention_pairs(len, mode);
            agree &= measured == counts[i];
            times[i] = ms;
        }
        let bound = (len * (floor_log2(len) + 2)) as u64;
        let row_ok = agree && counts[2] <= bound && counts[0] == (len * len) as u64;
        ok &= row_ok;
        println!(
            "{:>6} {:>10} {:>10} {:>10} {:>10} {:>9} {:>10.3} {:>10.3} {:>10.3}",
            len,
            counts[0],
            counts[1],
            counts[2],
            bound,
            if row_ok { "exact" } else { "MISMATCH" },
            times[0],
            times[1],
            times[2]
        );
    }
    Ok(if ok { EXIT_OK } else { EXIT_CHECK_FAILED })
}
