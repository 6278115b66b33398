//! BLEU-1..4: clipped n-gram precision, brevity penalty, sentence and corpus
//! scoring. No smoothing: a zero precision zeroes every BLEU-n that uses it.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::hash::Hash;

use crate::error::{GlotError, Result};

pub const MAX_N: usize = 4;

/// Clipped match count over candidate n-gram count. `total == 0` marks a
/// candidate shorter than `n`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Precision {
    pub matched: usize,
    pub total: usize,
}

impl Precision {
    pub fn value(self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.matched as f64 / self.total as f64
        }
    }

    pub fn is_degenerate(self) -> bool {
        self.total == 0
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

pub fn ngram_clipped_precision<T: Eq + Hash>(candidate: &[T], references: &[&[T]], n: usize) -> Result<Precision> {
    if n == 0 {
        return Err(GlotError::precondition("ngram_clipped_precision", "n must be at least 1"));
    }
    let cand = ngram_counts(candidate, n);
    let refs: Vec<_> = references.iter().map(|r| ngram_counts(r, n)).collect();
    let matched =
        cand.iter().map(|(g, &c)| c.min(refs.iter().map(|r| r.get(g).copied().unwrap_or(0)).max().unwrap_or(0))).sum();
    Ok(Precision { matched, total: candidate.len().saturating_sub(n - 1) })
}

/// `1` when `c > r`, otherwise `exp(1 − r/c)`; `c = 0` gives 0.
pub fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

/// Reference length closest to `c`; ties go to the shorter reference.
pub fn closest_ref_len(c: usize, ref_lens: impl IntoIterator<Item = usize>) -> usize {
    ref_lens.into_iter().min_by_key(|&r| (r.abs_diff(c), r)).unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BleuReport {
    /// `bleu[n-1]` is BLEU-n; entries past `max_n` are 0.
    pub bleu: [f64; MAX_N],
    pub precisions: [Precision; MAX_N],
    pub brevity_penalty: f64,
    pub candidate_length: usize,
    pub reference_length: usize,
    pub max_n: usize,
}

impl BleuReport {
    fn from_counts(precisions: [Precision; MAX_N], c: usize, r: usize, max_n: usize) -> Self {
        let bp = brevity_penalty(c, r);
        let mut bleu = [0.0; MAX_N];
        for n in 1..=max_n {
            let ps = &precisions[..n];
            if ps.iter().all(|p| p.matched > 0) {
                let log_mean = ps.iter().map(|p| p.value().ln()).sum::<f64>() / n as f64;
                bleu[n - 1] = bp * log_mean.exp();
            }
        }
        BleuReport { bleu, precisions, brevity_penalty: bp, candidate_length: c, reference_length: r, max_n }
    }

    pub fn bleu(&self, n: usize) -> f64 {
        self.bleu[n - 1]
    }

    pub fn p(&self, n: usize) -> f64 {
        self.precisions[n - 1].value()
    }

    /// `bleu1=… bleu2=… bleu3=… bleu4=… p1=… p2=… p3=… p4=… bp=… c=… r=…`
    pub fn to_record(&self) -> String {
        self.to_string()
    }

    /// Parses a record written by [`BleuReport::to_record`] into its fields.
    pub fn parse_record(line: &str) -> Result<BTreeMap<String, f64>> {
        line.split_whitespace()
            .filter(|t| t.contains('='))
            .map(|t| {
                let (k, v) = t.split_once('=').unwrap();
                let v = v.parse().map_err(|_| GlotError::format("bleu record", format!("bad value in {t}")))?;
                Ok((k.to_string(), v))
            })
            .collect()
    }
}

impl fmt::Display for BleuReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, b) in self.bleu.iter().enumerate() {
            write!(f, "bleu{}={} ", i + 1, b)?;
        }
        for (i, p) in self.precisions.iter().enumerate() {
            write!(f, "p{}={} ", i + 1, p.value())?;
        }
        write!(f, "bp={} c={} r={}", self.brevity_penalty, self.candidate_length, self.reference_length)
    }
}

fn check_max_n(max_n: usize) -> Result<()> {
    if !(1..=MAX_N).contains(&max_n) {
        return Err(GlotError::precondition("bleu", format!("max_n must be in 1..={MAX_N}, got {max_n}")));
    }
    Ok(())
}

fn pair_counts<T: Eq + Hash>(
    candidate: &[T],
    references: &[&[T]],
    max_n: usize,
) -> Result<([Precision; MAX_N], usize, usize)> {
    if references.is_empty() {
        return Err(GlotError::precondition("bleu", "at least one reference is required"));
    }
    let mut ps = [Precision::default(); MAX_N];
    for (n, p) in ps.iter_mut().enumerate().take(max_n) {
        *p = ngram_clipped_precision(candidate, references, n + 1)?;
    }
    let c = candidate.len();
    Ok((ps, c, closest_ref_len(c, references.iter().map(|r| r.len()))))
}

pub fn sentence_bleu<T: Eq + Hash>(candidate: &[T], references: &[&[T]], max_n: usize) -> Result<BleuReport> {
    check_max_n(max_n)?;
    let (ps, c, r) = pair_counts(candidate, references, max_n)?;
    Ok(BleuReport::from_counts(ps, c, r, max_n))
}

/// Counts and lengths are summed over all pairs before forming ratios.
pub fn corpus_bleu<T: Eq + Hash>(pairs: &[(&[T], Vec<&[T]>)], max_n: usize) -> Result<BleuReport> {
    check_max_n(max_n)?;
    if pairs.is_empty() {
        return Err(GlotError::Contract("corpus BLEU needs at least one pair".into()));
    }
    let mut acc = [Precision::default(); MAX_N];
    let (mut c, mut r) = (0, 0);
    for (cand, refs) in pairs {
        let (ps, pc, pr) = pair_counts(cand, refs, max_n)?;
        for (a, p) in acc.iter_mut().zip(ps) {
            a.matched += p.matched;
            a.total += p.total;
        }
        c += pc;
        r += pr;
    }
    Ok(BleuReport::from_counts(acc, c, r, max_n))
}

/// Corpus BLEU-4 over single-reference string pairs.
pub fn corpus_bleu_single(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<BleuReport> {
    if candidates.len() != references.len() {
        return Err(GlotError::precondition("corpus_bleu", "candidate and reference counts differ"));
    }
    let pairs: Vec<(&[String], Vec<&[String]>)> =
        candidates.iter().zip(references).map(|(c, r)| (c.as_slice(), vec![r.as_slice()])).collect();
    corpus_bleu(&pairs, MAX_N)
}

pub fn tokenize(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}
