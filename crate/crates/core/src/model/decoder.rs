use super::encoder::{Embeddings, EncoderOutput};
use super::layers::{add_norm, attention_bias, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use super::params::{ParamLayout, ParamStore};
use super::{CouplingMode, ModelConfig, ModelError, TokenBatch};
use crate::tensor::{Tape, Tensor, Var};

/// Counter bumped once per cross-decoder attention call.
pub const CROSS_ATTENTION_COUNTER: &str = "decoder.cross_attention";

/// Attention from one decoder stream into the other.
#[derive(Debug, Clone)]
pub struct CrossBlock {
    /// Maps the other stream's states before they are used as keys/values.
    pub projection: Linear,
    pub attention: MultiHeadAttention,
    pub norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attention: MultiHeadAttention,
    pub self_norm: LayerNorm,
    pub encoder_attention: MultiHeadAttention,
    pub encoder_norm: LayerNorm,
    pub cross: Option<CrossBlock>,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub embeddings: Embeddings,
    pub layers: Vec<DecoderLayer>,
    pub output: Linear,
}

impl Decoder {
    fn declare(layout: &mut ParamLayout, name: &str, vocab: usize, config: &ModelConfig) -> Self {
        let d = config.hidden_dim;
        let h = config.num_heads;
        let embeddings = Embeddings::declare(layout, &format!("{name}.embeddings"), vocab, config.max_seq_len, d);
        let layers = (0..config.num_layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                let self_attention = MultiHeadAttention::declare(layout, &format!("{p}.self_attention"), d, h);
                let self_norm = LayerNorm::declare(layout, &format!("{p}.self_norm"), d);
                let encoder_attention = MultiHeadAttention::declare(layout, &format!("{p}.encoder_attention"), d, h);
                let encoder_norm = LayerNorm::declare(layout, &format!("{p}.encoder_norm"), d);
                let cross = config.coupling.is_coupled().then(|| CrossBlock {
                    projection: Linear::declare(layout, &format!("{p}.cross.projection"), d, d),
                    attention: MultiHeadAttention::declare(layout, &format!("{p}.cross.attention"), d, h),
                    norm: LayerNorm::declare(layout, &format!("{p}.cross.norm"), d),
                });
                let ffn = FeedForward::declare(layout, &format!("{p}.ffn"), d, config.ffn_dim);
                let ffn_norm = LayerNorm::declare(layout, &format!("{p}.ffn_norm"), d);
                DecoderLayer { self_attention, self_norm, encoder_attention, encoder_norm, cross, ffn, ffn_norm }
            })
            .collect();
        let output = Linear::declare(layout, &format!("{name}.output"), d, vocab);
        Self { embeddings, layers, output }
    }
}

/// Precomputed attention biases for one stream.
struct StreamMasks {
    causal: Tensor,
    encoder: Tensor,
    /// Queries from this stream over keys of the other stream.
    cross: Tensor,
}

impl StreamMasks {
    fn new(own: &TokenBatch, other: &TokenBatch, enc: &EncoderOutput) -> Self {
        let b = own.batch;
        Self {
            causal: attention_bias(&own.mask, b, own.len, own.len, true),
            encoder: attention_bias(&enc.mask, b, own.len, enc.len, false),
            cross: attention_bias(&other.mask, b, own.len, other.len, true),
        }
    }
}

/// Base- and mixing-language decoders sharing one encoder.
#[derive(Debug, Clone)]
pub struct DualDecoder {
    pub base: Decoder,
    pub mix: Decoder,
    pub coupling: CouplingMode,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct DualDecoderOutput {
    /// `[B, T_base, V_base]`
    pub base_logits: Var,
    /// `[B, T_mix, V_mix]`
    pub mix_logits: Var,
    pub base_hidden: Var,
    pub mix_hidden: Var,
}

impl DualDecoder {
    pub fn declare(layout: &mut ParamLayout, config: &ModelConfig) -> Self {
        Self {
            base: Decoder::declare(layout, "decoder.base", config.base_vocab, config),
            mix: Decoder::declare(layout, "decoder.mix", config.mix_vocab, config),
            coupling: config.coupling,
            dropout: config.dropout,
        }
    }

    fn attend(&self, tape: &mut Tape, params: &ParamStore, layer: &DecoderLayer, x: Var, enc: Var, m: &StreamMasks) -> Result<Var, ModelError> {
        let (s, _) = layer.self_attention.forward(tape, params, x, x, &m.causal, self.dropout)?;
        let x = add_norm(tape, params, &layer.self_norm, x, s)?;
        let (e, _) = layer.encoder_attention.forward(tape, params, x, enc, &m.encoder, self.dropout)?;
        Ok(add_norm(tape, params, &layer.encoder_norm, x, e)?)
    }

    fn cross(&self, tape: &mut Tape, params: &ParamStore, layer: &DecoderLayer, x: Var, other: Var, bias: &Tensor) -> Result<Var, ModelError> {
        let block = layer.cross.as_ref().expect("coupled layer has a cross block");
        tape.count(CROSS_ATTENTION_COUNTER);
        let memory = block.projection.forward(tape, params, other)?;
        let (c, _) = block.attention.forward(tape, params, x, memory, bias, self.dropout)?;
        Ok(add_norm(tape, params, &block.norm, x, c)?)
    }

    fn finish(&self, tape: &mut Tape, params: &ParamStore, layer: &DecoderLayer, x: Var) -> Result<Var, ModelError> {
        let f = layer.ffn.forward(tape, params, x, self.dropout)?;
        Ok(add_norm(tape, params, &layer.ffn_norm, x, f)?)
    }

    /// Runs both decoders with teacher forcing. Position `i` of either
    /// stream only depends on positions `<= i` of both streams.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        enc: &EncoderOutput,
        base: &TokenBatch,
        mix: &TokenBatch,
    ) -> Result<DualDecoderOutput, ModelError> {
        if base.batch != enc.batch || mix.batch != enc.batch {
            return Err(ModelError::BatchMismatch { encoder: enc.batch, base: base.batch, mix: mix.batch });
        }
        let base_masks = StreamMasks::new(base, mix, enc);
        let mix_masks = StreamMasks::new(mix, base, enc);
        let mut hb = self.base.embeddings.forward(tape, params, base)?;
        let mut hm = self.mix.embeddings.forward(tape, params, mix)?;
        for (lb, lm) in self.base.layers.iter().zip(&self.mix.layers) {
            let ab = self.attend(tape, params, lb, hb, enc.hidden, &base_masks)?;
            let am = self.attend(tape, params, lm, hm, enc.hidden, &mix_masks)?;
            let (cb, cm) = match self.coupling {
                CouplingMode::None => (ab, am),
                CouplingMode::Synchronous => (
                    self.cross(tape, params, lb, ab, am, &base_masks.cross)?,
                    self.cross(tape, params, lm, am, ab, &mix_masks.cross)?,
                ),
                // `hb`/`hm` still hold the previous layer's outputs (the
                // embeddings for the first layer).
                CouplingMode::Asynchronous => (
                    self.cross(tape, params, lb, ab, hm, &base_masks.cross)?,
                    self.cross(tape, params, lm, am, hb, &mix_masks.cross)?,
                ),
            };
            hb = self.finish(tape, params, lb, cb)?;
            hm = self.finish(tape, params, lm, cm)?;
        }
        let base_logits = self.base.output.forward(tape, params, hb)?;
        let mix_logits = self.mix.output.forward(tape, params, hm)?;
        Ok(DualDecoderOutput { base_logits, mix_logits, base_hidden: hb, mix_hidden: hm })
    }
}
