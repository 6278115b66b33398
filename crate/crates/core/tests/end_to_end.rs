use glot_core::dataio::{synth_generate, Dataset, Split, SynthConfig};
use glot_core::model::{checkpoint, EncoderKind, GlotConfig, HyperSet};
use glot_core::pipeline;
use glot_core::training::TrainConfig;

fn base(kind: EncoderKind) -> GlotConfig {
    GlotConfig { d_model: 16, ff_size: 32, n_heads: 2, encoder_kind: kind, ..GlotConfig::preset(HyperSet::Set2) }
}

#[test]
fn checkpoint_file_reproduces_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig { seed: 21, n_samples: 15, noise_sigma: 0.1, ..SynthConfig::default() };
    let manifest = synth_generate(&synth, dir.path()).unwrap();
    let dataset = Dataset::load(&manifest).unwrap();
    assert_eq!(dataset.indices(Split::Test).len(), 3);

    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        checkpoint_dir: Some(dir.path().join("run")),
        ..TrainConfig::preset(HyperSet::Set2)
    };
    let run = pipeline::train_dataset(&dataset, &base(EncoderKind::Glot), &cfg, Split::Test).unwrap();
    let path = run.report.checkpoint.clone().unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    assert_eq!(loaded.params(), run.model.params());

    let a = pipeline::evaluate_split(&run.model, &dataset, &run.vocabs, Split::Test, &cfg).unwrap();
    let b = pipeline::evaluate_split(&loaded, &dataset, &pipeline::vocabularies(&dataset), Split::Test, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.text, run.report.best_text);
}

#[test]
fn encoder_kinds_share_the_pipeline() {
    let samples =
        glot_core::dataio::generate_samples(&SynthConfig { seed: 2, n_samples: 10, ..SynthConfig::default() }).unwrap();
    let dataset = Dataset::new(samples).unwrap();
    let cfg = TrainConfig { epochs: 2, batch_size: 4, ..TrainConfig::preset(HyperSet::Set2) };
    for kind in [EncoderKind::Glot, EncoderKind::DenseBaseline] {
        let run = pipeline::train_dataset(&dataset, &base(kind), &cfg, Split::Cv).unwrap();
        assert_eq!(run.model.config().encoder_kind, kind);
        assert_eq!(run.report.epochs.len(), 2);
        assert!(run.report.epochs.iter().all(|e| e.train_loss.is_finite()));
    }
}

#[test]
fn training_stays_finite_across_seeds() {
    let cfg = TrainConfig { epochs: 1, batch_size: 4, ..TrainConfig::preset(HyperSet::Set2) };
    let tiny = GlotConfig { d_model: 8, ff_size: 16, n_heads: 2, ..GlotConfig::preset(HyperSet::Set2) };
    for seed in 0..100 {
        let synth = SynthConfig { seed, n_samples: 4, n_signs: 4, feat_dim: 4, noise_sigma: 0.5 };
        let dataset = Dataset::new(glot_core::dataio::generate_samples(&synth).unwrap()).unwrap();
        let run = pipeline::train_dataset(&dataset, &tiny, &TrainConfig { seed, ..cfg.clone() }, Split::Cv).unwrap();
        assert!(run.model.params().all_finite(), "seed {seed}");
    }
}
