//! Log-sparse causal self-attention.
//!
//! Query position `p` (1-based) attends to itself and to every earlier
//! position at a power-of-two distance: `{p − 2^k : k = ⌊log₂ p⌋ … 0} ∪ {p}`,
//! dropping the candidate 0 that appears when `p` is a power of two. One
//! layer therefore evaluates `O(L log L)` scores, and `⌈log₂ L⌉` stacked
//! layers reach every earlier position.
//!
//! The layer has query and key projections only; attention weights are
//! applied to the layer input rows directly.

use std::sync::Arc;

use crate::error::{GlotError, Result};
use crate::numcore::{AttentionMask, Tape, Var};

/// Positions (1-based, ascending) that query `position` may attend to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexSet {
    position: usize,
    members: Vec<usize>,
}

impl IndexSet {
    pub fn position(&self) -> usize {
        self.position
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, q: usize) -> bool {
        self.members.binary_search(&q).is_ok()
    }
}

/// `⌊log₂ p⌋` for `p ≥ 1`.
pub fn floor_log2(p: usize) -> usize {
    (usize::BITS - 1 - p.leading_zeros()) as usize
}

/// `⌈log₂ n⌉` for `n ≥ 1`.
pub fn ceil_log2(n: usize) -> usize {
    if n <= 1 {
        0
    } else {
        floor_log2(n - 1) + 1
    }
}

pub fn log_index_set(p: usize) -> Result<IndexSet> {
    if p < 1 {
        return Err(GlotError::Domain("log-sparse positions are 1-based; got 0".into()));
    }
    // k descending gives ascending members; strictly distinct since 2^k differ.
    let mut members: Vec<usize> = (0..=floor_log2(p)).rev().map(|k| p - (1usize << k)).filter(|&q| q >= 1).collect();
    members.push(p);
    Ok(IndexSet { position: p, members })
}

/// `L × L` log-sparse causal mask (0-based rows and columns).
pub fn build_mask(len: usize) -> Result<AttentionMask> {
    if len < 1 {
        return Err(GlotError::Domain("mask length must be at least 1".into()));
    }
    let members = (1..=len)
        .map(|p| log_index_set(p).map(|s| s.members.iter().map(|q| q - 1).collect()))
        .collect::<Result<Vec<Vec<usize>>>>()?;
    AttentionMask::from_members(len, len, members)
}

/// Default stack depth for sequences up to `max_len`.
pub fn default_depth(max_len: usize) -> usize {
    ceil_log2(max_len.max(1)).max(1)
}

/// Query and key projections of one layer, bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LssaWeights {
    pub w_q: Var,
    pub w_k: Var,
}

/// One layer, returning the output and the attention weights.
pub fn lssa_layer_with_weights(
    tape: &mut Tape<'_>,
    x: Var,
    weights: &LssaWeights,
    mask: &Arc<AttentionMask>,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let (f, d) = tape.value(x).require_matrix("lssa_layer")?;
    if !mask.same_shape(f, f) {
        return Err(GlotError::shape("lssa_layer", format!("mask {}x{} for {f} positions", mask.rows(), mask.cols())));
    }
    if heads == 0 || d % heads != 0 {
        return Err(GlotError::Config(format!("LSSA width {d} not divisible by {heads} heads")));
    }
    let q = tape.matmul(x, weights.w_q)?;
    let k = tape.matmul(x, weights.w_k)?;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    if heads == 1 {
        let s = tape.masked_scores(q, k, mask, scale)?;
        let a = tape.masked_softmax_rows(s, mask)?;
        let out = tape.masked_weighted_sum(a, x, mask)?;
        return Ok((out, vec![a]));
    }
    let mut outs = Vec::with_capacity(heads);
    let mut alphas = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let xh = tape.slice_cols(x, lo, hi)?;
        let s = tape.masked_scores(qh, kh, mask, scale)?;
        let a = tape.masked_softmax_rows(s, mask)?;
        outs.push(tape.masked_weighted_sum(a, xh, mask)?);
        alphas.push(a);
    }
    Ok((tape.concat_cols(&outs)?, alphas))
}

pub fn lssa_layer(
    tape: &mut Tape<'_>,
    x: Var,
    weights: &LssaWeights,
    mask: &Arc<AttentionMask>,
    heads: usize,
) -> Result<Var> {
    lssa_layer_with_weights(tape, x, weights, mask, heads).map(|(out, _)| out)
}

pub fn stacked_lssa(
    tape: &mut Tape<'_>,
    x: Var,
    layers: &[LssaWeights],
    mask: &Arc<AttentionMask>,
    heads: usize,
) -> Result<Var> {
    if layers.is_empty() {
        return Err(GlotError::Config("stacked LSSA needs at least one layer".into()));
    }
    layers.iter().try_fold(x, |h, w| lssa_layer(tape, h, w, mask, heads))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    Dense,
    CausalDense,
    LogSparse,
}

impl AttentionMode {
    pub fn mask(self, len: usize) -> Result<AttentionMask> {
        if len < 1 {
            return Err(GlotError::Domain("attention length must be at least 1".into()));
        }
        Ok(match self {
            AttentionMode::Dense => AttentionMask::full(len, len),
            AttentionMode::CausalDense => AttentionMask::causal(len),
            AttentionMode::LogSparse => build_mask(len)?,
        })
    }
}

/// Exact (query, key) score evaluations of one single-head layer.
pub fn count_attention_pairs(len: usize, mode: AttentionMode) -> u64 {
    let l = len as u64;
    match mode {
        AttentionMode::Dense => l * l,
        AttentionMode::CausalDense => l * (l + 1) / 2,
        AttentionMode::LogSparse => (1..=len)
            .map(|p| {
                let k = floor_log2(p);
                // k+1 offsets plus self, minus the zero candidate at powers of two
                (k + 2 - usize::from(p.is_power_of_two())) as u64
            })
            .sum(),
    }
}

/// Positions reachable from each query after `depth` stacked layers.
pub fn receptive_field(mask: &AttentionMask, depth: usize) -> Vec<Vec<bool>> {
    let n = mask.rows();
    let mut reach: Vec<Vec<bool>> = (0..n).map(|i| (0..n).map(|j| i == j).collect()).collect();
    for _ in 0..depth {
        reach = (0..n)
            .map(|i| {
                let mut row = vec![false; n];
                for &j in mask.row(i) {
                    for (r, &b) in row.iter_mut().zip(&reach[j]) {
                        *r |= b;
                    }
                }
                row
            })
            .collect();
    }
    reach
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numcore::{grad_check_params, ParamStore, Tensor};

    #[test]
    fn index_set_examples() {
        assert_eq!(log_index_set(1).unwrap().members(), &[1]);
        assert_eq!(log_index_set(5).unwrap().members(), &[1, 3, 4, 5]);
        assert_eq!(log_index_set(8).unwrap().members(), &[4, 6, 7, 8]);
        assert!(matches!(log_index_set(0), Err(GlotError::Domain(_))));
    }

    #[test]
    fn mask_examples() {
        assert_eq!(build_mask(1).unwrap().to_bools(), vec![vec![true]]);
        let m4 = build_mask(4).unwrap();
        let rows: Vec<Vec<usize>> = (0..4).map(|r| m4.row(r).iter().map(|c| c + 1).collect()).collect();
        assert_eq!(rows, vec![vec![1], vec![1, 2], vec![1, 2, 3], vec![2, 3, 4]]);
        assert_eq!(build_mask(8).unwrap().count(), 25);
        assert!(build_mask(0).is_err());
    }

    #[test]
    fn pair_counts_at_eight() {
        assert_eq!(count_attention_pairs(8, AttentionMode::Dense), 64);
        assert_eq!(count_attention_pairs(8, AttentionMode::CausalDense), 36);
        assert_eq!(count_attention_pairs(8, AttentionMode::LogSparse), 25);
    }

    #[test]
    fn three_layers_cover_eight_positions() {
        let reach = receptive_field(&build_mask(8).unwrap(), 3);
        for (i, row) in reach.iter().enumerate() {
            for (j, &r) in row.iter().enumerate() {
                assert_eq!(r, j <= i);
            }
        }
        // two layers are not enough: position 8 cannot reach position 1
        assert!(!receptive_field(&build_mask(8).unwrap(), 2)[7][0]);
    }

    fn bind(tape: &mut Tape<'_>, wq: Tensor, wk: Tensor) -> LssaWeights {
        LssaWeights { w_q: tape.constant(wq).unwrap(), w_k: tape.constant(wk).unwrap() }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn single_position_is_identity() {
        let mut tape = Tape::new();
        let xt = random(&[1, 4], 1);
        let x = tape.constant(xt.clone()).unwrap();
        let w = bind(&mut tape, random(&[4, 4], 2), random(&[4, 4], 3));
        let mask = Arc::new(build_mask(1).unwrap());
        let y = lssa_layer(&mut tape, x, &w, &mask, 1).unwrap();
        assert_eq!(tape.value(y), &xt);
    }

    #[test]
    fn zero_projections_average_over_index_set() {
        let f = 7;
        let xt = random(&[f, 3], 4);
        let mut tape = Tape::new();
        let x = tape.constant(xt.clone()).unwrap();
        let w = bind(&mut tape, Tensor::zeros(&[3, 3]), Tensor::zeros(&[3, 3]));
        let mask = Arc::new(build_mask(f).unwrap());
        let (y, alphas) = lssa_layer_with_weights(&mut tape, x, &w, &mask, 1).unwrap();
        for p in 1..=f {
            let set = log_index_set(p).unwrap();
            for c in 0..3 {
                let mean = set.members().iter().map(|&q| xt.at(q - 1, c)).sum::<f64>() / set.len() as f64;
                assert!((tape.value(y).at(p - 1, c) - mean).abs() < 1e-12);
            }
            let alpha = tape.value(alphas[0]).row(p - 1).to_vec();
            assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (j, a) in alpha.iter().enumerate() {
                if !set.contains(j + 1) {
                    assert_eq!(*a, 0.0);
                }
            }
        }
    }

    #[test]
    fn stacked_depth_and_shape() {
        let mask = Arc::new(build_mask(6).unwrap());
        let mut tape = Tape::new();
        let x = tape.constant(random(&[6, 4], 5)).unwrap();
        let w = bind(&mut tape, random(&[4, 4], 6), random(&[4, 4], 7));
        let one = stacked_lssa(&mut tape, x, &[w], &mask, 1).unwrap();
        let direct = lssa_layer(&mut tape, x, &w, &mask, 1).unwrap();
        assert_eq!(tape.value(one), tape.value(direct));
        let deep = stacked_lssa(&mut tape, x, &[w; 4], &mask, 2).unwrap();
        assert_eq!(tape.shape(deep), &[6, 4]);
        assert!(matches!(stacked_lssa(&mut tape, x, &[], &mask, 1), Err(GlotError::Config(_))));
        assert_eq!(default_depth(8), 3);
        assert_eq!(default_depth(9), 4);
        assert_eq!(default_depth(1), 1);
    }

    #[test]
    fn gradients_pass_check() {
        let mut store = ParamStore::new();
        let x = store.add("x", random(&[6, 4], 8));
        let wq = store.add("w_q", random(&[4, 4], 9));
        let wk = store.add("w_k", random(&[4, 4], 10));
        let probe = random(&[6, 4], 11);
        let mask = Arc::new(build_mask(6).unwrap());
        let checks = grad_check_params(
            &store,
            |t| {
                let w = LssaWeights { w_q: t.param(wq), w_k: t.param(wk) };
                let xv = t.param(x);
                let y = stacked_lssa(t, xv, &[w, w], &mask, 1)?;
                let p = t.constant(probe.clone())?;
                let y = t.mul(y, p)?;
                t.sum(y)
            },
            1e-6,
            1e-4,
            None,
        )
        .unwrap();
        for c in checks {
            assert!(c.report.pass, "{}: {:?}", c.name, c.report);
        }
    }

    #[test]
    fn score_counter_matches_pair_count() {
        for len in [1, 5, 8, 33] {
            let mask = Arc::new(build_mask(len).unwrap());
            let mut tape = Tape::new();
            let x = tape.constant(random(&[len, 4], 12)).unwrap();
            let w = bind(&mut tape, random(&[4, 4], 13), random(&[4, 4], 14));
            lssa_layer(&mut tape, x, &w, &mask, 1).unwrap();
            assert_eq!(tape.score_evaluations(), count_attention_pairs(len, AttentionMode::LogSparse));
        }
    }

    proptest! {
        #[test]
        fn prop_index_set_invariants(p in 1usize..100_000) {
            let s = log_index_set(p).unwrap();
            prop_assert_eq!(*s.members().last().unwrap(), p);
            prop_assert!(s.members().windows(2).all(|w| w[0] < w[1]));
            prop_assert!(s.len() <= floor_log2(p) + 2);
            for &q in &s.members()[..s.len() - 1] {
                prop_assert!((p - q).is_power_of_two());
            }
        }

        #[test]
        fn prop_feature_permutation_covariance(seed in any::<u64>(), f in 1usize..10) {
            let d = 4;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut perm: Vec<usize> = (0..d).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            let (xt, wq, wk) = (random(&[f, d], seed ^ 1), random(&[d, d], seed ^ 2), random(&[d, d], seed ^ 3));
            // x' = x P, W' = Pᵀ W P  =>  x'W' = (xW) P
            let permute_cols = |t: &Tensor| {
                let rows: Vec<Vec<f64>> = t.to_rows().iter().map(|r| perm.iter().map(|&j| r[j]).collect()).collect();
                Tensor::from_rows(&rows).unwrap()
            };
            let permute_both = |t: &Tensor| {
                let rows: Vec<Vec<f64>> = perm.iter().map(|&i| perm.iter().map(|&j| t.at(i, j)).collect()).collect();
                Tensor::from_rows(&rows).unwrap()
            };
            let mask = Arc::new(build_mask(f).unwrap());
            let run = |x: Tensor, q: Tensor, k: Tensor| {
                let mut tape = Tape::new();
                let xv = tape.constant(x).unwrap();
                let w = bind(&mut tape, q, k);
                let y = lssa_layer(&mut tape, xv, &w, &mask, 1).unwrap();
                tape.value(y).clone()
            };
            let base = run(xt.clone(), wq.clone(), wk.clone());
            let permuted = run(permute_cols(&xt), permute_both(&wq), permute_both(&wk));
            prop_assert!(permuted.max_abs_diff(&permute_cols(&base)) < 1e-12);
        }
    }
}
