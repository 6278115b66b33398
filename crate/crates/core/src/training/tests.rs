use std::collections::HashSet;

use proptest::prelude::*;

use super::*;
use crate::dataio::{generate_samples, SynthConfig};

fn corpus(n: usize, seed: u64) -> Vec<SignSample> {
    let cfg = SynthConfig { seed, n_samples: n, n_signs: 4, feat_dim: 4, noise_sigma: 0.0 };
    generate_samples(&cfg).unwrap().into_iter().map(|(s, _)| s).collect()
}

fn model_cfg(samples: &[SignSample], vocabs: &Vocabs) -> GlotConfig {
    GlotConfig {
        feat_dim: samples[0].features.cols(),
        max_frames: samples.iter().map(|s| s.features.rows()).max().unwrap(),
        max_target_len: samples.iter().map(|s| s.text.len().max(s.gloss.len())).max().unwrap() + 2,
        gloss_vocab_size: vocabs.gloss.len(),
        text_vocab_size: vocabs.text.len(),
        ..GlotConfig::tiny()
    }
}

fn fast(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 4, lr_initial: 3e-3, lr_floor: 3e-3, ..TrainConfig::preset(HyperSet::Set2) }
}

#[test]
fn presets_follow_table() {
    let s1 = TrainConfig::preset(HyperSet::Set1);
    assert_eq!((s1.epochs, s1.batch_size, s1.lr_initial, s1.lr_factor, s1.lr_floor), (30, 32, 5e-5, 0.5, 2e-6));
    assert_eq!((s1.schedule, s1.plateau_patience), (ScheduleKind::Plateau, 3));
    let s2 = TrainConfig::preset(HyperSet::Set2);
    assert_eq!((s2.epochs, s2.batch_size, s2.lr_initial, s2.schedule), (30, 32, 1e-3, ScheduleKind::Constant));
}

#[test]
fn fold_sizes() {
    let sizes = |n| kfold_partition(n, 5, 1).unwrap().iter().map(Vec::len).collect::<Vec<_>>();
    assert_eq!(sizes(10), [2; 5]);
    assert_eq!(sizes(11), [3, 2, 2, 2, 2]);
    assert!(matches!(kfold_partition(4, 5, 0), Err(GlotError::Config(_))));
    assert_eq!(kfold_partition(20, 5, 9).unwrap(), kfold_partition(20, 5, 9).unwrap());
}

#[test]
fn best_fold_ties_to_lowest() {
    assert_eq!(select_best(&[0.1, 0.4, 0.4, 0.2]), Some(1));
    assert_eq!(select_best(&[0.0; 5]), Some(0));
    assert_eq!(select_best(&[]), None);
}

#[test]
fn derived_seeds_differ() {
    let seeds: HashSet<u64> = (0..100).map(|i| derive_seed(7, i)).collect();
    assert_eq!(seeds.len(), 100);
}

#[test]
fn identical_seeds_give_identical_runs() {
    let data = corpus(6, 2);
    let vocabs = Vocabs::build(&data);
    let mcfg = model_cfg(&data, &vocabs);
    let run = |exec| {
        let mut m = GlotModel::new(mcfg.clone(), 1).unwrap();
        let cfg = TrainConfig { exec, ..fast(3) };
        let r = train(&mut m, &data[..4], &data[4..], &vocabs, &cfg, 0).unwrap();
        (r, m.params().clone())
    };
    let (a, pa) = run(Exec::Parallel);
    let (b, pb) = run(Exec::Parallel);
    let (c, pc) = run(Exec::Sequential);
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    assert_eq!(a, c);
    assert_eq!(pa, pc);
    assert_eq!(a.batches_per_epoch, 1);
    assert_eq!(a.to_log().lines().count(), 4);
}

#[test]
fn batch_count_is_ceiling() {
    let data = corpus(35, 4);
    let vocabs = Vocabs::build(&data);
    let mut m = GlotModel::new(model_cfg(&data, &vocabs), 0).unwrap();
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::preset(HyperSet::Set2) };
    let r = train(&mut m, &data[..33], &data[33..], &vocabs, &cfg, 0).unwrap();
    assert_eq!(r.batches_per_epoch, 2);
}

#[test]
fn overfits_two_samples() {
    let data = corpus(2, 5);
    let vocabs = Vocabs::build(&data);
    let mut m = GlotModel::new(model_cfg(&data, &vocabs), 3).unwrap();
    let r = train(&mut m, &data, &data, &vocabs, &fast(200), 0).unwrap();
    assert!(r.best_text.bleu(1) >= 0.9, "{}", r.best_text);
    let again = evaluate(&m, &data, &vocabs, None, Exec::Sequential).unwrap();
    assert_eq!(again.text, r.best_text);
}

#[test]
fn cross_validation_covers_every_sample_once() {
    let data = corpus(10, 6);
    let vocabs = Vocabs::build(&data);
    let cv = cross_validate(&data, 5, &model_cfg(&data, &vocabs), &vocabs, &fast(2)).unwrap();
    assert_eq!(cv.folds.len(), 5);
    let all: Vec<usize> = cv.partition.iter().flatten().copied().collect();
    assert_eq!(all.len(), 10);
    assert_eq!(all.iter().collect::<HashSet<_>>().len(), 10);
    let scores: Vec<f64> = cv.folds.iter().map(FoldReport::best_bleu4).collect();
    assert_eq!(cv.best, select_best(&scores).unwrap());
    assert_eq!(cv.folds.iter().map(|f| f.fold_index).collect::<Vec<_>>(), [1, 2, 3, 4, 5]);
}

#[test]
fn divergence_is_reported() {
    let data = corpus(3, 8);
    let vocabs = Vocabs::build(&data);
    let mut m = GlotModel::new(model_cfg(&data, &vocabs), 0).unwrap();
    let id = m.params().find("frame_embedding").unwrap();
    m.params_mut().get_mut(id).data_mut()[0] = f64::NAN;
    let err = train(&mut m, &data, &data, &vocabs, &fast(1), 0).unwrap_err();
    assert!(matches!(err, GlotError::Divergence { epoch: 1, .. }), "{err}");
}

proptest! {
    #[test]
    fn partition_is_exact_cover(n in 1usize..200, k in 1usize..12, seed in any::<u64>()) {
        prop_assume!(n >= k);
        let folds = kfold_partition(n, k, seed).unwrap();
        prop_assert_eq!(folds.len(), k);
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let (lo, hi) = (folds.iter().map(Vec::len).min().unwrap(), folds.iter().map(Vec::len).max().unwrap());
        prop_assert!(hi - lo <= 1);
    }
}
