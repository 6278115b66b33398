use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numcore::grad_check_params;

fn frames(f: usize, w: usize, seed: u64) -> Tensor {
    Tensor::uniform(&[f, w], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn sample() -> EncodedSample {
    EncodedSample { features: frames(6, 4, 9), gloss: vec![5, 6, 5], text: vec![7, 8, 9, 10] }
}

#[test]
fn zero_frames_embed_to_positions() {
    let m = GlotModel::new(GlotConfig::tiny(), 0).unwrap();
    let mut tape = m.tape();
    let x = m.embed_frames(&mut tape, &Tensor::zeros(&[3, 4])).unwrap();
    assert_eq!(tape.value(x), &positional_encoding(3, 8).unwrap());
    assert!(m.embed_frames(&mut tape, &Tensor::zeros(&[3, 5])).is_err());
    assert!(m.embed_frames(&mut tape, &Tensor::zeros(&[7, 4])).is_err());
}

#[test]
fn forward_shapes_for_both_encoders() {
    for kind in [EncoderKind::Glot, EncoderKind::DenseBaseline] {
        let cfg = GlotConfig { encoder_kind: kind, ..GlotConfig::tiny() };
        let m = GlotModel::new(cfg, 1).unwrap();
        let s = sample();
        let mut tape = m.tape();
        let mem = m.encode(&mut tape, &s.features).unwrap();
        assert_eq!(tape.shape(mem), [6, 8]);
        let (g, t) = m.s2g2t_forward(&mut tape, &s.features, &s.gloss, &s.text).unwrap();
        assert_eq!(tape.shape(g), [4, 7]);
        assert_eq!(tape.shape(t), [5, 11]);
        let loss = m.loss(&mut tape, &s).unwrap();
        assert!(tape.value(loss.total).item().is_finite());
        assert!((tape.value(loss.total).item() - loss.gloss - loss.text).abs() < 1e-12);
    }
}

#[test]
fn initial_loss_is_near_uniform() {
    let m = GlotModel::new(GlotConfig::tiny(), 2).unwrap();
    let mut tape = m.tape();
    let l = m.loss(&mut tape, &sample()).unwrap();
    assert!((l.gloss - 7f64.ln()).abs() < 1.5, "gloss loss {}", l.gloss);
    assert!((l.text - 11f64.ln()).abs() < 1.5, "text loss {}", l.text);
}

#[test]
fn seeded_initialization_is_reproducible() {
    let a = GlotModel::new(GlotConfig::tiny(), 4).unwrap();
    let b = GlotModel::new(GlotConfig::tiny(), 4).unwrap();
    let c = GlotModel::new(GlotConfig::tiny(), 5).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
    let gate = a.params().get(a.params().find("encoder0.gate.w").unwrap());
    assert!(gate.data().iter().all(|v| v.abs() <= 0.1));
}

#[test]
fn out_of_vocabulary_targets_are_rejected() {
    let m = GlotModel::new(GlotConfig::tiny(), 0).unwrap();
    let mut s = sample();
    s.gloss.push(7);
    assert!(matches!(m.loss(&mut m.tape(), &s), Err(GlotError::Data(_))));
}

fn check_all(cfg: GlotConfig) {
    let m = GlotModel::new(cfg, 3).unwrap();
    let s = sample();
    let checks = grad_check_params(m.params(), |tape| Ok(m.loss(tape, &s)?.total), 1e-6, 1e-3, None).unwrap();
    assert_eq!(checks.len(), m.params().len());
    for c in &checks {
        assert!(c.report.pass, "{}: {:e}", c.name, c.report.max_rel_err);
    }
}

#[test]
fn glot_gradients_match_finite_differences() {
    check_all(GlotConfig::tiny());
}

#[test]
fn dense_gradients_match_finite_differences() {
    check_all(GlotConfig {
        encoder_kind: EncoderKind::DenseBaseline,
        positional: Positional::Learned,
        ..GlotConfig::tiny()
    });
}

#[test]
fn greedy_decode_respects_limits() {
    let m = GlotModel::new(GlotConfig::tiny(), 6).unwrap();
    let d = m.greedy_decode(&sample().features, 5).unwrap();
    assert!(d.gloss.len() <= 5 && d.text.len() <= 5);
    assert_eq!(d.gloss_truncated, d.gloss.len() == 5);
    assert!(d.gloss.iter().all(|&t| t != EOS_ID && t < 7));
    assert_eq!(d, m.greedy_decode(&sample().features, 5).unwrap());
}

#[test]
fn argmax_prefers_lowest_index() {
    assert_eq!(argmax(&[0.1, 0.7, 0.7, -1.0]), 1);
    assert_eq!(argmax(&[2.0]), 0);
}

#[test]
fn concurrent_evaluation_agrees() {
    let m = GlotModel::new(GlotConfig::tiny(), 8).unwrap();
    let s = sample();
    let serial = m.loss(&mut m.tape(), &s).unwrap().gloss;
    let results: Vec<f64> = std::thread::scope(|sc| {
        let hs: Vec<_> = (0..4).map(|_| sc.spawn(|| m.loss(&mut m.tape(), &s).unwrap().gloss)).collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert!(results.iter().all(|&r| r.to_bits() == serial.to_bits()));
}
