use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{GlotError, Result};
use crate::sparse_attention::default_depth;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Glot,
    DenseBaseline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Positional {
    Sinusoidal,
    Learned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LssaDepth {
    /// `max(1, ⌈log₂ max_frames⌉)`
    Auto,
    Fixed(usize),
}

/// The two hyperparameter sets used for the model comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HyperSet {
    Set1,
    Set2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlotConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoders: usize,
    pub n_decoders: usize,
    pub ff_size: usize,
    pub dropout: f64,
    pub conv_kernel: usize,
    pub n_lssa_layers: LssaDepth,
    pub lssa_heads: usize,
    pub max_frames: usize,
    pub max_target_len: usize,
    pub feat_dim: usize,
    pub gloss_vocab_size: usize,
    pub text_vocab_size: usize,
    pub encoder_kind: EncoderKind,
    pub positional: Positional,
    pub layer_norm_eps: f64,
}

impl GlotConfig {
    /// Table values for `set`; data-dependent sizes are filled in by the caller.
    pub fn preset(set: HyperSet) -> Self {
        let (d_model, ff_size, dropout) = match set {
            HyperSet::Set1 => (512, 2048, 0.1),
            HyperSet::Set2 => (256, 256, 0.0),
        };
        GlotConfig {
            d_model,
            n_heads: 8,
            n_encoders: 1,
            n_decoders: 1,
            ff_size,
            dropout,
            conv_kernel: 3,
            n_lssa_layers: LssaDepth::Auto,
            lssa_heads: 1,
            max_frames: 256,
            max_target_len: 64,
            feat_dim: 1,
            gloss_vocab_size: 5,
            text_vocab_size: 5,
            encoder_kind: EncoderKind::Glot,
            positional: Positional::Sinusoidal,
            layer_norm_eps: 1e-5,
        }
    }

    /// Small configuration for gradient checks and fast experiments.
    pub fn tiny() -> Self {
        GlotConfig {
            d_model: 8,
            n_heads: 2,
            ff_size: 16,
            dropout: 0.0,
            max_frames: 6,
            max_target_len: 12,
            feat_dim: 4,
            gloss_vocab_size: 7,
            text_vocab_size: 11,
            ..GlotConfig::preset(HyperSet::Set2)
        }
    }

    pub fn branch_width(&self) -> usize {
        self.d_model / 2
    }

    pub fn lssa_depth(&self) -> usize {
        match self.n_lssa_layers {
            LssaDepth::Auto => default_depth(self.max_frames),
            LssaDepth::Fixed(n) => n,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(GlotError::Config(m));
        if self.d_model == 0 || !self.d_model.is_multiple_of(2) {
            return fail(format!("d_model must be even and positive, got {}", self.d_model));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads));
        }
        if self.lssa_heads == 0 || !self.branch_width().is_multiple_of(self.lssa_heads) {
            return fail(format!(
                "branch width {} not divisible by {} LSSA heads",
                self.branch_width(),
                self.lssa_heads
            ));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return fail(format!("conv_kernel must be odd, got {}", self.conv_kernel));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.layer_norm_eps <= 0.0 {
            return fail("layer_norm_eps must be positive".into());
        }
        if matches!(self.n_lssa_layers, LssaDepth::Fixed(0)) {
            return fail("n_lssa_layers must be positive".into());
        }
        for (name, v) in [
            ("n_encoders", self.n_encoders),
            ("n_decoders", self.n_decoders),
            ("ff_size", self.ff_size),
            ("max_frames", self.max_frames),
            ("max_target_len", self.max_target_len),
            ("feat_dim", self.feat_dim),
            ("gloss_vocab_size", self.gloss_vocab_size),
            ("text_vocab_size", self.text_vocab_size),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        Ok(())
    }

    /// One `key=value` pair per line, keys in a fixed order.
    pub fn to_kv(&self) -> String {
        let lssa = match self.n_lssa_layers {
            LssaDepth::Auto => "auto".to_string(),
            LssaDepth::Fixed(n) => n.to_string(),
        };
        let pairs: [(&str, String); 17] = [
            ("d_model", self.d_model.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("n_encoders", self.n_encoders.to_string()),
            ("n_decoders", self.n_decoders.to_string()),
            ("ff_size", self.ff_size.to_string()),
            ("dropout", self.dropout.to_string()),
            ("conv_kernel", self.conv_kernel.to_string()),
            ("n_lssa_layers", lssa),
            ("lssa_heads", self.lssa_heads.to_string()),
            ("max_frames", self.max_frames.to_string()),
            ("max_target_len", self.max_target_len.to_string()),
            ("feat_dim", self.feat_dim.to_string()),
            ("gloss_vocab_size", self.gloss_vocab_size.to_string()),
            ("text_vocab_size", self.text_vocab_size.to_string()),
            ("encoder_kind", self.encoder_kind.to_string()),
            ("positional", self.positional.to_string()),
            ("layer_norm_eps", self.layer_norm_eps.to_string()),
        ];
        pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) =
                line.split_once('=').ok_or_else(|| GlotError::format("config", format!("line without '=': {line}")))?;
            if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(GlotError::format("config", format!("duplicate key {k}")));
            }
        }
        let mut take =
            |key: &str| map.remove(key).ok_or_else(|| GlotError::format("config", format!("missing key {key}")));
        fn parse<T: FromStr>(key: &str, v: String) -> Result<T> {
            v.parse().map_err(|_| GlotError::format("config", format!("bad value for {key}: {v}")))
        }
        let lssa = take("n_lssa_layers")?;
        let cfg = GlotConfig {
            d_model: parse("d_model", take("d_model")?)?,
            n_heads: parse("n_heads", take("n_heads")?)?,
            n_encoders: parse("n_encoders", take("n_encoders")?)?,
            n_decoders: parse("n_decoders", take("n_decoders")?)?,
            ff_size: parse("ff_size", take("ff_size")?)?,
            dropout: parse("dropout", take("dropout")?)?,
            conv_kernel: parse("conv_kernel", take("conv_kernel")?)?,
            n_lssa_layers: if lssa == "auto" {
                LssaDepth::Auto
            } else {
                LssaDepth::Fixed(parse("n_lssa_layers", lssa)?)
            },
            lssa_heads: parse("lssa_heads", take("lssa_heads")?)?,
            max_frames: parse("max_frames", take("max_frames")?)?,
            max_target_len: parse("max_target_len", take("max_target_len")?)?,
            feat_dim: parse("feat_dim", take("feat_dim")?)?,
            gloss_vocab_size: parse("gloss_vocab_size", take("gloss_vocab_size")?)?,
            text_vocab_size: parse("text_vocab_size", take("text_vocab_size")?)?,
            encoder_kind: parse("encoder_kind", take("encoder_kind")?)?,
            positional: parse("positional", take("positional")?)?,
            layer_norm_eps: parse("layer_norm_eps", take("layer_norm_eps")?)?,
        };
        if let Some(k) = map.keys().next() {
            return Err(GlotError::format("config", format!("unknown key {k}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::Glot => "glot",
            EncoderKind::DenseBaseline => "dense",
        })
    }
}

impl FromStr for EncoderKind {
    type Err = GlotError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "glot" => Ok(EncoderKind::Glot),
            "dense" | "dense_baseline" => Ok(EncoderKind::DenseBaseline),
            _ => Err(GlotError::Config(format!("unknown encoder kind {s:?} (glot|dense)"))),
        }
    }
}

impl fmt::Display for Positional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Positional::Sinusoidal => "sinusoidal",
            Positional::Learned => "learned",
        })
    }
}

impl FromStr for Positional {
    type Err = GlotError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sinusoidal" => Ok(Positional::Sinusoidal),
            "learned" => Ok(Positional::Learned),
            _ => Err(GlotError::Config(format!("unknown positional encoding {s:?} (sinusoidal|learned)"))),
        }
    }
}

impl fmt::Display for HyperSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HyperSet::Set1 => "set1",
            HyperSet::Set2 => "set2",
        })
    }
}

impl FromStr for HyperSet {
    type Err = GlotError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "set1" => Ok(HyperSet::Set1),
            "set2" => Ok(HyperSet::Set2),
            _ => Err(GlotError::Config(format!("unknown hyperparameter set {s:?} (set1|set2)"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_table_values() {
        let s1 = GlotConfig::preset(HyperSet::Set1);
        assert_eq!((s1.d_model, s1.n_heads, s1.n_encoders, s1.n_decoders, s1.ff_size), (512, 8, 1, 1, 2048));
        assert_eq!(s1.dropout, 0.1);
        let s2 = GlotConfig::preset(HyperSet::Set2);
        assert_eq!((s2.d_model, s2.n_heads, s2.n_encoders, s2.n_decoders, s2.ff_size), (256, 8, 1, 1, 256));
        assert_eq!(s2.dropout, 0.0);
        s1.validate().unwrap();
        s2.validate().unwrap();
    }

    #[test]
    fn kv_round_trip_and_strictness() {
        let mut c = GlotConfig::tiny();
        c.n_lssa_layers = LssaDepth::Fixed(2);
        c.positional = Positional::Learned;
        assert_eq!(GlotConfig::from_kv(&c.to_kv()).unwrap(), c);
        let extra = format!("{}bogus=1\n", c.to_kv());
        assert!(GlotConfig::from_kv(&extra).is_err());
    }

    #[test]
    fn validation_rejects_bad_widths() {
        let mut c = GlotConfig::tiny();
        c.d_model = 7;
        assert!(c.validate().is_err());
        let mut c = GlotConfig::tiny();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = GlotConfig::tiny();
        c.conv_kernel = 4;
        assert!(c.validate().is_err());
    }
}
