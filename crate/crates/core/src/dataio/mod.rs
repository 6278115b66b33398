//! Dataset formats, vocabularies and the synthetic corpus generator.

use std::path::Path;

use crate::error::{GlotError, Result};
use crate::model::EncodedSample;
use crate::numcore::Tensor;

mod features;
mod manifest;
pub mod synth;
pub mod vocab;

pub use features::{
    decode_features, encode_features, read_feature_file, write_feature_file, FEATURE_MAGIC, FEATURE_VERSION,
};
pub use manifest::{Manifest, ManifestEntry, Split};
pub use synth::{generate_samples, synth_generate, SynthConfig};
pub use vocab::{Vocabulary, BOS_ID, EOS_ID, PAD_ID, SEP_ID, UNK_ID};

#[derive(Clone, Debug, PartialEq)]
pub struct SignSample {
    pub id: String,
    /// F×feat_dim frame features.
    pub features: Tensor,
    pub gloss: Vec<String>,
    pub text: Vec<String>,
}

/// A loaded corpus: samples in manifest order with their split tags.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<SignSample>,
    pub splits: Vec<Split>,
    pub feat_dim: usize,
}

impl Dataset {
    pub fn new(tagged: Vec<(SignSample, Split)>) -> Result<Self> {
        let feat_dim =
            tagged.first().map(|(s, _)| s.features.cols()).ok_or_else(|| GlotError::Data("dataset is empty".into()))?;
        for (s, _) in &tagged {
            if s.features.cols() != feat_dim {
                return Err(GlotError::Data(format!(
                    "sample {} has width {}, expected {feat_dim}",
                    s.id,
                    s.features.cols()
                )));
            }
            if s.gloss.is_empty() || s.text.is_empty() {
                return Err(GlotError::Data(format!("sample {} has an empty gloss or text", s.id)));
            }
        }
        let (samples, splits) = tagged.into_iter().unzip();
        Ok(Dataset { samples, splits, feat_dim })
    }

    /// Loads every entry of the manifest at `path`; feature paths resolve
    /// against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest = Manifest::read(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let tagged = manifest
            .entries
            .into_iter()
            .map(|e| {
                let features = read_feature_file(&base.join(&e.path))?;
                let sample = SignSample {
                    id: e.id,
                    features,
                    gloss: e.gloss.split_whitespace().map(String::from).collect(),
                    text: e.text.split_whitespace().map(String::from).collect(),
                };
                Ok((sample, e.split))
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(tagged)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Vec<SignSample> {
        idx.iter().map(|&i| self.samples[i].clone()).collect()
    }

    pub fn max_frames(&self) -> usize {
        self.samples.iter().map(|s| s.features.rows()).max().unwrap_or(1)
    }

    pub fn max_target_len(&self) -> usize {
        self.samples.iter().map(|s| s.gloss.len().max(s.text.len())).max().unwrap_or(1)
    }
}

/// Gloss and text vocabularies of a corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabs {
    pub gloss: Vocabulary,
    pub text: Vocabulary,
}

impl Vocabs {
    pub fn build(samples: &[SignSample]) -> Self {
        let gloss: Vec<String> = samples.iter().map(|s| s.gloss.join(" ")).collect();
        let text: Vec<String> = samples.iter().map(|s| s.text.join(" ")).collect();
        Vocabs {
            gloss: Vocabulary::build(gloss.iter().map(String::as_str)),
            text: Vocabulary::build(text.iter().map(String::as_str)),
        }
    }

    pub fn encode(&self, s: &SignSample) -> EncodedSample {
        EncodedSample {
            features: s.features.clone(),
            gloss: self.gloss.encode(&s.gloss, false),
            text: self.text.encode(&s.text, false),
        }
    }
}
