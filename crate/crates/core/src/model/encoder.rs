use super::layers::{add_norm, attention_bias, FeedForward, LayerNorm, MultiHeadAttention};
use super::params::{Init, ParamLayout, ParamStore, INIT_STD};
use super::{ModelConfig, ModelError, TokenBatch};
use crate::tensor::{ParamId, Tape, Var};

/// Token plus learned absolute position embeddings.
#[derive(Debug, Clone)]
pub struct Embeddings {
    pub token: ParamId,
    pub position: ParamId,
    pub max_len: usize,
}

impl Embeddings {
    pub fn declare(layout: &mut ParamLayout, name: &str, vocab: usize, max_len: usize, dim: usize) -> Self {
        Self {
            token: layout.declare(format!("{name}.token"), &[vocab, dim], Init::Normal(INIT_STD)),
            position: layout.declare(format!("{name}.position"), &[max_len, dim], Init::Normal(INIT_STD)),
            max_len,
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamStore, batch: &TokenBatch) -> Result<Var, ModelError> {
        if batch.len > self.max_len {
            return Err(ModelError::SequenceTooLong { len: batch.len, max: self.max_len });
        }
        let table = tape.param(self.token, params.get(self.token));
        let x = tape.embedding(table, &batch.ids, &[batch.batch, batch.len])?;
        let pos_table = tape.param(self.position, params.get(self.position));
        let pos = tape.narrow(pos_table, 0, 0, batch.len)?;
        Ok(tape.add(x, pos)?)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attention: MultiHeadAttention,
    pub attention_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

/// Post-norm bidirectional transformer encoder.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub embeddings: Embeddings,
    pub layers: Vec<EncoderLayer>,
    pub dropout: f64,
}

/// Encoder result for one batch.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `[B, T, d]`
    pub hidden: Var,
    /// Attention probabilities `[B, H, T, T]`, one per layer.
    pub attentions: Vec<Var>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl Encoder {
    pub fn declare(layout: &mut ParamLayout, config: &ModelConfig) -> Self {
        let d = config.hidden_dim;
        let embeddings = Embeddings::declare(layout, "encoder.embeddings", config.src_vocab, config.max_seq_len, d);
        let layers = (0..config.num_layers)
            .map(|l| {
                let p = format!("encoder.layer{l}");
                EncoderLayer {
                    attention: MultiHeadAttention::declare(layout, &format!("{p}.attention"), d, config.num_heads),
                    attention_norm: LayerNorm::declare(layout, &format!("{p}.attention_norm"), d),
                    ffn: FeedForward::declare(layout, &format!("{p}.ffn"), d, config.ffn_dim),
                    ffn_norm: LayerNorm::declare(layout, &format!("{p}.ffn_norm"), d),
                }
            })
            .collect();
        Self { embeddings, layers, dropout: config.dropout }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamStore, batch: &TokenBatch) -> Result<EncoderOutput, ModelError> {
        let mut x = self.embeddings.forward(tape, params, batch)?;
        let bias = attention_bias(&batch.mask, batch.batch, batch.len, batch.len, false);
        let mut attentions = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (a, probs) = layer.attention.forward(tape, params, x, x, &bias, self.dropout)?;
            attentions.push(probs);
            x = add_norm(tape, params, &layer.attention_norm, x, a)?;
            let f = layer.ffn.forward(tape, params, x, self.dropout)?;
            x = add_norm(tape, params, &layer.ffn_norm, x, f)?;
        }
        Ok(EncoderOutput { hidden: x, attentions, mask: batch.mask.clone(), batch: batch.batch, len: batch.len })
    }
}
