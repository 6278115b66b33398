//! The GLoT sign → gloss → text model.
//!
//! Encoder block (GLoT variant), for an F×d input `x`:
//!
//! ```text
//! x1, x2  = x[:, ..d/2], x[:, d/2..]
//! a       = conv1d_same(x1)
//! l       = stacked_lssa(x2)
//! gap     = mean_rows(x2 · W_v)
//! g       = sigmoid(l · w + b)                 (F×1)
//! fused   = g ⊙ l + (1 − g) ⊙ gap
//! y       = layer_norm(x + [a | fused])
//! ```
//!
//! The dense baseline swaps the block for a post-norm transformer encoder
//! layer. Two decoders follow the standard post-norm transformer layout: the
//! gloss decoder attends over the encoder memory and the text decoder over the
//! memory extended with the embedded gloss sequence.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::vocab::{BOS_ID, EOS_ID, PAD_ID};
use crate::error::{GlotError, Result};
use crate::numcore::{AttentionMask, ParamId, ParamStore, Tape, Tensor, Var};
use crate::sparse_attention::{build_mask, stacked_lssa, LssaWeights};

pub mod checkpoint;
mod config;
mod layers;

pub use config::{EncoderKind, GlotConfig, HyperSet, LssaDepth, Positional};
pub use layers::{gate_value, gating_combine, positional_encoding};

use layers::{FeedForward, Linear, MultiHead, Norm};

/// Which decoder a call addresses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Gloss,
    Text,
}

#[derive(Clone, Debug)]
struct GlotBlock {
    conv_w: ParamId,
    conv_b: ParamId,
    lssa: Vec<(ParamId, ParamId)>,
    w_v: ParamId,
    gate_w: ParamId,
    gate_b: ParamId,
    norm: Norm,
}

#[derive(Clone, Debug)]
struct DenseBlock {
    attn: MultiHead,
    norm1: Norm,
    ff: FeedForward,
    norm2: Norm,
}

#[derive(Clone, Debug)]
enum EncoderBlock {
    Glot(GlotBlock),
    Dense(DenseBlock),
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: MultiHead,
    norm1: Norm,
    cross_attn: MultiHead,
    norm2: Norm,
    ff: FeedForward,
    norm3: Norm,
}

#[derive(Clone, Debug)]
struct Decoder {
    embedding: ParamId,
    pos: Option<ParamId>,
    layers: Vec<DecoderLayer>,
    out: Linear,
    vocab: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    frame_embedding: ParamId,
    frame_pos: Option<ParamId>,
    encoder: Vec<EncoderBlock>,
    gloss: Decoder,
    text: Decoder,
}

struct Builder {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl Builder {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> ParamId {
        self.store.add(name, Tensor::uniform(shape, bound, &mut self.rng))
    }

    fn fixed(&mut self, name: String, t: Tensor) -> ParamId {
        self.store.add(name, t)
    }

    fn projection(&mut self, name: String, fan_in: usize, fan_out: usize) -> ParamId {
        self.uniform(name, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let w = self.projection(format!("{name}.w"), fan_in, fan_out);
        let b = self.fixed(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Linear { w, b: Some(b) }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gain: self.fixed(format!("{name}.gain"), Tensor::filled(&[d], 1.0)),
            bias: self.fixed(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> MultiHead {
        MultiHead {
            w_q: self.projection(format!("{name}.w_q"), d, d),
            w_k: self.projection(format!("{name}.w_k"), d, d),
            w_v: self.projection(format!("{name}.w_v"), d, d),
            w_o: self.projection(format!("{name}.w_o"), d, d),
        }
    }

    fn feed_forward(&mut self, name: &str, d: usize, ff: usize) -> FeedForward {
        FeedForward {
            inner: self.linear(&format!("{name}.inner"), d, ff),
            outer: self.linear(&format!("{name}.outer"), ff, d),
        }
    }

    fn positional(&mut self, name: &str, cfg: &GlotConfig, len: usize) -> Result<Option<ParamId>> {
        Ok(match cfg.positional {
            Positional::Sinusoidal => None,
            Positional::Learned => Some(self.fixed(name.to_string(), positional_encoding(len, cfg.d_model)?)),
        })
    }

    fn decoder(&mut self, name: &str, cfg: &GlotConfig, vocab: usize) -> Result<Decoder> {
        let d = cfg.d_model;
        let embedding = self.uniform(format!("{name}.embedding"), &[vocab, d], 1.0 / (d as f64).sqrt());
        let pos = self.positional(&format!("{name}.positional"), cfg, cfg.max_target_len)?;
        let layers = (0..cfg.n_decoders)
            .map(|i| {
                let p = format!("{name}.layer{i}");
                DecoderLayer {
                    self_attn: self.attention(&format!("{p}.self_attn"), d),
                    norm1: self.norm(&format!("{p}.norm1"), d),
                    cross_attn: self.attention(&format!("{p}.cross_attn"), d),
                    norm2: self.norm(&format!("{p}.norm2"), d),
                    ff: self.feed_forward(&format!("{p}.ff"), d, cfg.ff_size),
                    norm3: self.norm(&format!("{p}.norm3"), d),
                }
            })
            .collect();
        let out = self.linear(&format!("{name}.out"), d, vocab);
        Ok(Decoder { embedding, pos, layers, out, vocab })
    }
}

/// Token sequences and features of one training example, without framing.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSample {
    pub features: Tensor,
    pub gloss: Vec<usize>,
    pub text: Vec<usize>,
}

/// Loss of one example, split by stage.
#[derive(Clone, Copy, Debug)]
pub struct SampleLoss {
    pub total: Var,
    pub gloss: f64,
    pub text: f64,
}

/// Greedy decoding output. A stage is truncated when it hit `max_len`
/// without emitting EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    pub gloss: Vec<usize>,
    pub text: Vec<usize>,
    pub gloss_truncated: bool,
    pub text_truncated: bool,
}

#[derive(Clone, Debug)]
pub struct GlotModel {
    config: GlotConfig,
    params: ParamStore,
    layout: Layout,
}

impl GlotModel {
    /// Seeded initialization: projections from `U(±1/√fan_in)`, gates from
    /// `U(±0.1)`, norms at unit gain and zero bias.
    pub fn new(config: GlotConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let cfg = &config;
        let d = cfg.d_model;
        let db = cfg.branch_width();
        let mut b = Builder { store: ParamStore::new(), rng: ChaCha8Rng::seed_from_u64(seed) };

        let frame_embedding = b.projection("frame_embedding".into(), cfg.feat_dim, d);
        let frame_pos = b.positional("frame_positional", cfg, cfg.max_frames)?;
        let mut encoder = Vec::with_capacity(cfg.n_encoders);
        for i in 0..cfg.n_encoders {
            let p = format!("encoder{i}");
            let block = match cfg.encoder_kind {
                EncoderKind::Glot => {
                    let k = cfg.conv_kernel;
                    let conv_w = b.uniform(format!("{p}.conv.w"), &[db, db, k], 1.0 / ((db * k) as f64).sqrt());
                    let conv_b = b.fixed(format!("{p}.conv.b"), Tensor::zeros(&[db]));
                    let lssa = (0..cfg.lssa_depth())
                        .map(|j| {
                            (
                                b.projection(format!("{p}.lssa{j}.w_q"), db, db),
                                b.projection(format!("{p}.lssa{j}.w_k"), db, db),
                            )
                        })
                        .collect();
                    let w_v = b.projection(format!("{p}.w_v"), db, db);
                    let gate_w = b.uniform(format!("{p}.gate.w"), &[db, 1], 0.1);
                    let gate_b = b.uniform(format!("{p}.gate.b"), &[1], 0.1);
                    let norm = b.norm(&format!("{p}.norm"), d);
                    EncoderBlock::Glot(GlotBlock { conv_w, conv_b, lssa, w_v, gate_w, gate_b, norm })
                }
                EncoderKind::DenseBaseline => EncoderBlock::Dense(DenseBlock {
                    attn: b.attention(&format!("{p}.attn"), d),
                    norm1: b.norm(&format!("{p}.norm1"), d),
                    ff: b.feed_forward(&format!("{p}.ff"), d, cfg.ff_size),
                    norm2: b.norm(&format!("{p}.norm2"), d),
                }),
            };
            encoder.push(block);
        }
        let gloss = b.decoder("gloss_decoder", cfg, cfg.gloss_vocab_size)?;
        let text = b.decoder("text_decoder", cfg, cfg.text_vocab_size)?;
        let layout = Layout { frame_embedding, frame_pos, encoder, gloss, text };
        Ok(GlotModel { config, params: b.store, layout })
    }

    pub fn config(&self) -> &GlotConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces every parameter; names and shapes must match this layout.
    pub fn load_params(&mut self, store: ParamStore) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(GlotError::format(
                "parameters",
                format!("expected {} tensors, found {}", self.params.len(), store.len()),
            ));
        }
        for (id, name, t) in store.iter() {
            if name != self.params.name(id) || t.shape() != self.params.get(id).shape() {
                return Err(GlotError::format(
                    format!("parameter {name}"),
                    format!(
                        "expected {} {:?}, found {name} {:?}",
                        self.params.name(id),
                        self.params.get(id).shape(),
                        t.shape()
                    ),
                ));
            }
        }
        self.params = store;
        Ok(())
    }

    pub fn tape(&self) -> Tape<'_> {
        Tape::with_params(&self.params)
    }

    fn positions(&self, tape: &mut Tape<'_>, pos: Option<ParamId>, len: usize, max: usize) -> Result<Var> {
        if len > max {
            return Err(GlotError::Data(format!("sequence of {len} exceeds maximum length {max}")));
        }
        match pos {
            None => tape.constant(positional_encoding(len, self.config.d_model)?),
            Some(id) => {
                let table = tape.param(id);
                let rows: Vec<usize> = (0..len).collect();
                tape.gather_rows(table, &rows)
            }
        }
    }

    /// Flattened frames (F×feat_dim) → F×d_model, positional encoding added.
    pub fn embed_frames(&self, tape: &mut Tape<'_>, frames: &Tensor) -> Result<Var> {
        let (f, w) = frames.require_matrix("embed_frames")?;
        if w != self.config.feat_dim {
            return Err(GlotError::shape(
                "embed_frames",
                format!("frame width {w}, model expects {}", self.config.feat_dim),
            ));
        }
        let x = tape.constant(frames.clone())?;
        let e = tape.param(self.layout.frame_embedding);
        let h = tape.matmul(x, e)?;
        let pe = self.positions(tape, self.layout.frame_pos, f, self.config.max_frames)?;
        tape.add(h, pe)
    }

    fn glot_block(&self, tape: &mut Tape<'_>, x: Var, blk: &GlotBlock) -> Result<Var> {
        let cfg = &self.config;
        let db = cfg.branch_width();
        let f = tape.value(x).rows();
        let x1 = tape.slice_cols(x, 0, db)?;
        let x2 = tape.slice_cols(x, db, cfg.d_model)?;

        let (cw, cb) = (tape.param(blk.conv_w), tape.param(blk.conv_b));
        let local = tape.conv1d_same(x1, cw, cb)?;

        let mask = Arc::new(build_mask(f)?);
        let layers: Vec<LssaWeights> =
            blk.lssa.iter().map(|&(q, k)| LssaWeights { w_q: tape.param(q), w_k: tape.param(k) }).collect();
        let lssa = stacked_lssa(tape, x2, &layers, &mask, cfg.lssa_heads)?;

        let wv = tape.param(blk.w_v);
        let v = tape.matmul(x2, wv)?;
        let gap = tape.mean_rows(v)?;

        let (gw, gb) = (tape.param(blk.gate_w), tape.param(blk.gate_b));
        let g = gate_value(tape, lssa, gw, gb)?;
        let fused = gating_combine(tape, g, lssa, gap)?;

        let branches = tape.concat_cols(&[local, fused])?;
        let branches = tape.dropout(branches, cfg.dropout)?;
        let y = tape.add(x, branches)?;
        blk.norm.forward(tape, y, cfg.layer_norm_eps)
    }

    fn dense_block(&self, tape: &mut Tape<'_>, x: Var, blk: &DenseBlock) -> Result<Var> {
        let cfg = &self.config;
        let f = tape.value(x).rows();
        let mask = Arc::new(AttentionMask::full(f, f));
        let a = blk.attn.forward(tape, x, x, cfg.n_heads, &mask)?;
        let a = tape.dropout(a, cfg.dropout)?;
        let h = tape.add(x, a)?;
        let h = blk.norm1.forward(tape, h, cfg.layer_norm_eps)?;
        let ff = blk.ff.forward(tape, h, cfg.dropout)?;
        let ff = tape.dropout(ff, cfg.dropout)?;
        let y = tape.add(h, ff)?;
        blk.norm2.forward(tape, y, cfg.layer_norm_eps)
    }

    /// Runs the encoder stack on an already embedded F×d_model input.
    pub fn encoder_forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let (f, d) = tape.value(x).require_matrix("encoder_forward")?;
        if d != self.config.d_model || f == 0 {
            return Err(GlotError::shape("encoder_forward", format!("input {f}x{d}, d_model {}", self.config.d_model)));
        }
        self.layout.encoder.iter().try_fold(x, |h, blk| match blk {
            EncoderBlock::Glot(b) => self.glot_block(tape, h, b),
            EncoderBlock::Dense(b) => self.dense_block(tape, h, b),
        })
    }

    /// Embeds frames and runs the encoder.
    pub fn encode(&self, tape: &mut Tape<'_>, frames: &Tensor) -> Result<Var> {
        let x = self.embed_frames(tape, frames)?;
        self.encoder_forward(tape, x)
    }

    fn decoder(&self, stage: Stage) -> &Decoder {
        match stage {
            Stage::Gloss => &self.layout.gloss,
            Stage::Text => &self.layout.text,
        }
    }

    fn embed_tokens(&self, tape: &mut Tape<'_>, dec: &Decoder, tokens: &[usize]) -> Result<Var> {
        let table = tape.param(dec.embedding);
        let e = tape.gather_rows(table, tokens)?;
        let e = tape.scale(e, (self.config.d_model as f64).sqrt())?;
        let pe = self.positions(tape, dec.pos, tokens.len(), self.config.max_target_len)?;
        tape.add(e, pe)
    }

    /// Teacher-forced decoder pass; returns L×vocab logits for `inputs`.
    pub fn decoder_forward(&self, tape: &mut Tape<'_>, memory: Var, inputs: &[usize], stage: Stage) -> Result<Var> {
        let cfg = &self.config;
        let dec = self.decoder(stage);
        if inputs.is_empty() {
            return Err(GlotError::Data("decoder input is empty".into()));
        }
        if let Some(&bad) = inputs.iter().find(|&&t| t >= dec.vocab) {
            return Err(GlotError::Data(format!("token id {bad} outside {stage:?} vocabulary of {}", dec.vocab)));
        }
        let len = inputs.len();
        let mem_len = tape.value(memory).rows();
        let causal = Arc::new(AttentionMask::causal(len));
        let cross = Arc::new(AttentionMask::full(len, mem_len));

        let x = self.embed_tokens(tape, dec, inputs)?;
        let mut h = tape.dropout(x, cfg.dropout)?;
        for layer in &dec.layers {
            let a = layer.self_attn.forward(tape, h, h, cfg.n_heads, &causal)?;
            let a = tape.dropout(a, cfg.dropout)?;
            let s = tape.add(h, a)?;
            let s = layer.norm1.forward(tape, s, cfg.layer_norm_eps)?;
            let c = layer.cross_attn.forward(tape, s, memory, cfg.n_heads, &cross)?;
            let c = tape.dropout(c, cfg.dropout)?;
            let s2 = tape.add(s, c)?;
            let s2 = layer.norm2.forward(tape, s2, cfg.layer_norm_eps)?;
            let ff = layer.ff.forward(tape, s2, cfg.dropout)?;
            let ff = tape.dropout(ff, cfg.dropout)?;
            let s3 = tape.add(s2, ff)?;
            h = layer.norm3.forward(tape, s3, cfg.layer_norm_eps)?;
        }
        dec.out.forward(tape, h)
    }

    /// Encoder memory extended with the embedded gloss sequence.
    pub fn text_memory(&self, tape: &mut Tape<'_>, memory: Var, gloss: &[usize]) -> Result<Var> {
        if gloss.is_empty() {
            return Ok(memory);
        }
        let g = self.embed_tokens(tape, &self.layout.gloss, gloss)?;
        tape.concat_rows(&[memory, g])
    }

    /// Teacher-forced pass for both stages. `gloss` and `text` are unframed
    /// token sequences; decoder inputs are BOS-shifted.
    pub fn s2g2t_forward(
        &self,
        tape: &mut Tape<'_>,
        frames: &Tensor,
        gloss: &[usize],
        text: &[usize],
    ) -> Result<(Var, Var)> {
        let memory = self.encode(tape, frames)?;
        let gloss_logits = self.decoder_forward(tape, memory, &shift_right(gloss), Stage::Gloss)?;
        let text_mem = self.text_memory(tape, memory, gloss)?;
        let text_logits = self.decoder_forward(tape, text_mem, &shift_right(text), Stage::Text)?;
        Ok((gloss_logits, text_logits))
    }

    /// `CE(gloss) + CE(text)` under teacher forcing.
    pub fn loss(&self, tape: &mut Tape<'_>, sample: &EncodedSample) -> Result<SampleLoss> {
        let (gl, tl) = self.s2g2t_forward(tape, &sample.features, &sample.gloss, &sample.text)?;
        let g = tape.cross_entropy(gl, &append_eos(&sample.gloss), Some(PAD_ID))?;
        let t = tape.cross_entropy(tl, &append_eos(&sample.text), Some(PAD_ID))?;
        let (gv, tv) = (tape.value(g).item(), tape.value(t).item());
        let total = tape.add(g, t)?;
        Ok(SampleLoss { total, gloss: gv, text: tv })
    }

    fn greedy_stage(&self, memory: &Tensor, stage: Stage, max_len: usize) -> Result<(Vec<usize>, bool)> {
        let max_len = max_len.min(self.config.max_target_len);
        let mut out = Vec::new();
        while out.len() < max_len {
            let mut tape = self.tape();
            let mem = tape.constant(memory.clone())?;
            let mut inputs = Vec::with_capacity(out.len() + 1);
            inputs.push(BOS_ID);
            inputs.extend_from_slice(&out);
            let logits = self.decoder_forward(&mut tape, mem, &inputs, stage)?;
            let next = argmax(tape.value(logits).row(inputs.len() - 1));
            if next == EOS_ID {
                return Ok((out, false));
            }
            out.push(next);
        }
        Ok((out, true))
    }

    /// Autoregressive argmax decoding, gloss first, then text conditioned on
    /// the predicted gloss.
    pub fn greedy_decode(&self, frames: &Tensor, max_len: usize) -> Result<Decoded> {
        let memory = {
            let mut tape = self.tape();
            let m = self.encode(&mut tape, frames)?;
            tape.value(m).clone()
        };
        let (gloss, gloss_truncated) = self.greedy_stage(&memory, Stage::Gloss, max_len)?;
        let text_memory = {
            let mut tape = self.tape();
            let m = tape.constant(memory)?;
            let tm = self.text_memory(&mut tape, m, &gloss)?;
            tape.value(tm).clone()
        };
        let (text, text_truncated) = self.greedy_stage(&text_memory, Stage::Text, max_len)?;
        Ok(Decoded { gloss, text, gloss_truncated, text_truncated })
    }
}

fn shift_right(tokens: &[usize]) -> Vec<usize> {
    std::iter::once(BOS_ID).chain(tokens.iter().copied()).collect()
}

fn append_eos(tokens: &[usize]) -> Vec<usize> {
    tokens.iter().copied().chain(std::iter::once(EOS_ID)).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests;
