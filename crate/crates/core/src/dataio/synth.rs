//! Seeded synthetic sign → gloss → text corpus.
//!
//! A sample strings together 3 to 8 latent signs. Each sign contributes its
//! prototype feature vector for 2 to 4 consecutive frames, plus Gaussian
//! noise. The gloss names the signs in order; the text applies a fixed
//! rewrite: the last sign's word moves to the front, `the` precedes every
//! later word, and a final `.` closes the sentence. The rewrite is injective.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{write_feature_file, Manifest, ManifestEntry, SignSample, Split};
use crate::error::{GlotError, Result};
use crate::numcore::Tensor;

pub const SIGNS_PER_SAMPLE: (usize, usize) = (3, 8);
pub const FRAMES_PER_SIGN: (usize, usize) = (2, 4);
/// Directory under the output root that holds the feature files.
pub const FEATURE_DIR: &str = "features";
pub const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_samples: usize,
    pub n_signs: usize,
    pub feat_dim: usize,
    pub noise_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { seed: 0, n_samples: 16, n_signs: 10, feat_dim: 8, noise_sigma: 0.0 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_signs < 2 {
            return Err(GlotError::Config(format!("n_signs must be at least 2, got {}", self.n_signs)));
        }
        if self.feat_dim < 2 {
            return Err(GlotError::Config(format!("feat_dim must be at least 2, got {}", self.feat_dim)));
        }
        if self.n_samples == 0 {
            return Err(GlotError::Config("n_samples must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(GlotError::Config(format!(
                "noise_sigma must be finite and non-negative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    /// Samples tagged `test`: the last fifth, rounded down.
    pub fn n_test(&self) -> usize {
        self.n_samples / 5
    }

    fn digits(&self) -> usize {
        (self.n_signs - 1).to_string().len().max(2)
    }

    pub fn gloss_token(&self, sign: usize) -> String {
        format!("G{:0w$}", sign, w = self.digits())
    }

    pub fn word_token(&self, sign: usize) -> String {
        format!("w{:0w$}", sign, w = self.digits())
    }
}

/// The gloss → text rewrite applied to a sign sequence.
pub fn rewrite(words: &[String]) -> Vec<String> {
    let Some((last, rest)) = words.split_last() else {
        return Vec::new();
    };
    let mut out = vec![last.clone()];
    for w in rest {
        out.push("the".to_string());
        out.push(w.clone());
    }
    out.push(".".to_string());
    out
}

/// Generates samples in memory, tagged with their split.
pub fn generate_samples(cfg: &SynthConfig) -> Result<Vec<(SignSample, Split)>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prototypes: Vec<Vec<f64>> =
        (0..cfg.n_signs).map(|_| (0..cfg.feat_dim).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| GlotError::Config(e.to_string()))?;
    let n_cv = cfg.n_samples - cfg.n_test();
    let width = cfg.n_samples.saturating_sub(1).to_string().len().max(3);

    let mut out = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let n_signs = rng.random_range(SIGNS_PER_SAMPLE.0..=SIGNS_PER_SAMPLE.1);
        let signs: Vec<usize> = (0..n_signs).map(|_| rng.random_range(0..cfg.n_signs)).collect();
        let mut frames = Vec::new();
        for &s in &signs {
            for _ in 0..rng.random_range(FRAMES_PER_SIGN.0..=FRAMES_PER_SIGN.1) {
                frames.extend(prototypes[s].iter().map(|&p| {
                    if cfg.noise_sigma > 0.0 {
                        p + noise.sample(&mut rng)
                    } else {
                        p
                    }
                }));
            }
        }
        let f = frames.len() / cfg.feat_dim;
        let words: Vec<String> = signs.iter().map(|&s| cfg.word_token(s)).collect();
        let sample = SignSample {
            id: format!("s{i:0width$}"),
            features: Tensor::matrix(f, cfg.feat_dim, frames)?,
            gloss: signs.iter().map(|&s| cfg.gloss_token(s)).collect(),
            text: rewrite(&words),
        };
        out.push((sample, if i < n_cv { Split::Cv } else { Split::Test }));
    }
    Ok(out)
}

/// Writes the corpus under `out`: `manifest.tsv` plus one feature file per
/// sample in `features/`. Returns the manifest path.
pub fn synth_generate(cfg: &SynthConfig, out: &Path) -> Result<PathBuf> {
    let samples = generate_samples(cfg)?;
    let feat_dir = out.join(FEATURE_DIR);
    fs::create_dir_all(&feat_dir).map_err(|e| GlotError::io(&feat_dir, e))?;
    let mut manifest = Manifest::default();
    for (s, split) in samples {
        let rel = Path::new(FEATURE_DIR).join(format!("{}.feat", s.id));
        write_feature_file(&out.join(&rel), &s.features)?;
        manifest.entries.push(ManifestEntry {
            id: s.id,
            path: rel,
            gloss: s.gloss.join(" "),
            text: s.text.join(" "),
            split,
        });
    }
    let path = out.join(MANIFEST_NAME);
    manifest.write(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;

    #[test]
    fn rewrite_example() {
        let w: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        assert_eq!(rewrite(&w).join(" "), "c the a the b .");
    }

    #[test]
    fn noise_free_frames_repeat_prototypes() {
        let cfg = SynthConfig { seed: 3, n_samples: 6, ..SynthConfig::default() };
        for (s, _) in generate_samples(&cfg).unwrap() {
            let rows = s.features.to_rows();
            let distinct = rows.windows(2).filter(|w| w[0] != w[1]).count() + 1;
            assert!(distinct <= s.gloss.len());
            assert!((SIGNS_PER_SAMPLE.0..=SIGNS_PER_SAMPLE.1).contains(&s.gloss.len()));
            assert!(rows.len() >= 2 * s.gloss.len() && rows.len() <= 4 * s.gloss.len());
        }
    }

    #[test]
    fn rewrite_is_injective_on_corpus() {
        let cfg = SynthConfig { seed: 11, n_samples: 400, n_signs: 4, noise_sigma: 0.2, ..SynthConfig::default() };
        let mut by_text: HashMap<Vec<String>, Vec<String>> = HashMap::new();
        for (s, _) in generate_samples(&cfg).unwrap() {
            let prev = by_text.entry(s.text.clone()).or_insert_with(|| s.gloss.clone());
            assert_eq!(prev, &s.gloss);
        }
    }

    #[test]
    fn split_tags_and_validation() {
        let cfg = SynthConfig { n_samples: 80, ..SynthConfig::default() };
        let s = generate_samples(&cfg).unwrap();
        assert_eq!(s.iter().filter(|(_, t)| *t == Split::Test).count(), 16);
        assert!(generate_samples(&SynthConfig { n_signs: 1, ..cfg.clone() }).is_err());
        assert!(generate_samples(&SynthConfig { feat_dim: 1, ..cfg }).is_err());
    }

    #[test]
    fn files_are_byte_identical_across_runs() {
        let cfg = SynthConfig { seed: 7, noise_sigma: 0.1, ..SynthConfig::default() };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = synth_generate(&cfg, a.path()).unwrap();
        let mb = synth_generate(&cfg, b.path()).unwrap();
        assert_eq!(fs::read(&ma).unwrap(), fs::read(&mb).unwrap());
        assert_eq!(fs::read_to_string(&ma).unwrap().lines().count(), 16);
        for e in Manifest::read(&ma).unwrap().entries {
            assert_eq!(fs::read(a.path().join(&e.path)).unwrap(), fs::read(b.path().join(&e.path)).unwrap());
        }
    }
}
