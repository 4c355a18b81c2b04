//! Shared encoder, coupled dual decoder and the pre-training heads.

mod checkpoint;
mod config;
mod decoder;
mod encoder;
pub mod layers;
mod params;

use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointKind, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{CouplingMode, ModelConfig};
pub use decoder::{Decoder, DualDecoder, DualDecoderOutput, CROSS_ATTENTION_COUNTER};
pub use encoder::{Encoder, EncoderOutput};
pub use params::{Init, ParamLayout, ParamSpec, ParamStore, INIT_STD};

use crate::tensor::{Tape, TensorError, Var};
use crate::tokenizer::{Encoding, PAD_ID};
use layers::Linear;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence length {len} exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("batch size mismatch: encoder {encoder}, base {base}, mix {mix}")]
    BatchMismatch { encoder: usize, base: usize, mix: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Padded token ids for a batch, row-major `[batch, len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    /// False at padding positions.
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl TokenBatch {
    /// Right-pads every sequence with `[PAD]` to the longest one.
    pub fn from_sequences(seqs: &[Vec<usize>]) -> Self {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut mask = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend(s.iter().copied().chain(std::iter::repeat(PAD_ID).take(len - s.len())));
            mask.extend(std::iter::repeat(true).take(s.len()).chain(std::iter::repeat(false).take(len - s.len())));
        }
        Self { ids, mask, batch: seqs.len(), len }
    }

    pub fn from_encodings(encodings: &[&Encoding]) -> Self {
        let seqs: Vec<Vec<usize>> = encodings.iter().map(|e| e.ids.clone()).collect();
        Self::from_sequences(&seqs)
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.len..(b + 1) * self.len]
    }

    pub fn row_mask(&self, b: usize) -> &[bool] {
        &self.mask[b * self.len..(b + 1) * self.len]
    }
}

/// Untied linear heads over encoder states.
#[derive(Debug, Clone)]
pub struct Heads {
    pub mlm: Linear,
    pub spp: Linear,
    pub btsp: Linear,
    pub tlc: Linear,
    pub cmi: Linear,
}

impl Heads {
    fn declare(layout: &mut ParamLayout, config: &ModelConfig) -> Self {
        let d = config.hidden_dim;
        Self {
            mlm: Linear::declare(layout, "heads.mlm", d, config.src_vocab),
            spp: Linear::declare(layout, "heads.spp", d, 1),
            btsp: Linear::declare(layout, "heads.btsp", d, 1),
            tlc: Linear::declare(layout, "heads.tlc", d, 1),
            cmi: Linear::declare(layout, "heads.cmi", d, 1),
        }
    }
}

fn cls_state(tape: &mut Tape, enc: &EncoderOutput) -> Result<Var, ModelError> {
    let d = tape.shape(enc.hidden)[2];
    let cls = tape.narrow(enc.hidden, 1, 0, 1)?;
    Ok(tape.reshape(cls, &[enc.batch, d])?)
}

fn token_scalar(tape: &mut Tape, params: &ParamStore, head: &Linear, enc: &EncoderOutput) -> Result<Var, ModelError> {
    let y = head.forward(tape, params, enc.hidden)?;
    Ok(tape.reshape(y, &[enc.batch, enc.len])?)
}

fn cls_scalar(tape: &mut Tape, params: &ParamStore, head: &Linear, enc: &EncoderOutput) -> Result<Var, ModelError> {
    let cls = cls_state(tape, enc)?;
    let y = head.forward(tape, params, cls)?;
    Ok(tape.reshape(y, &[enc.batch])?)
}

/// Parameter totals grouped by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParameterBreakdown {
    pub encoder: usize,
    pub decoders: usize,
    /// Cross-decoder projections, attention and norms (part of `decoders`).
    pub cross_decoder: usize,
    pub heads: usize,
    pub total: usize,
}

/// Closed-form encoder size: embeddings plus `L` post-norm layers.
pub fn encoder_parameter_count(config: &ModelConfig) -> usize {
    let d = config.hidden_dim;
    let f = config.ffn_dim;
    let per_layer = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d;
    config.src_vocab * d + config.max_seq_len * d + config.num_layers * per_layer
}

/// The full pre-training model.
#[derive(Debug, Clone)]
pub struct CmlFormer {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub decoders: DualDecoder,
    pub heads: Heads,
    layout: ParamLayout,
}

impl CmlFormer {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut layout = ParamLayout::new();
        let encoder = Encoder::declare(&mut layout, &config);
        let decoders = DualDecoder::declare(&mut layout, &config);
        let heads = Heads::declare(&mut layout, &config);
        Ok(Self { config, encoder, decoders, heads, layout })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        ParamStore::init(&self.layout, seed)
    }

    pub fn parameter_breakdown(&self) -> ParameterBreakdown {
        let cross = self
            .layout
            .specs()
            .iter()
            .filter(|s| s.name.contains(".cross."))
            .map(ParamSpec::numel)
            .sum();
        ParameterBreakdown {
            encoder: self.layout.numel_with_prefix("encoder."),
            decoders: self.layout.numel_with_prefix("decoder."),
            cross_decoder: cross,
            heads: self.layout.numel_with_prefix("heads."),
            total: self.layout.numel(),
        }
    }

    pub fn encode(&self, tape: &mut Tape, params: &ParamStore, batch: &TokenBatch) -> Result<EncoderOutput, ModelError> {
        self.encoder.forward(tape, params, batch)
    }

    pub fn decode(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        enc: &EncoderOutput,
        base: &TokenBatch,
        mix: &TokenBatch,
    ) -> Result<DualDecoderOutput, ModelError> {
        self.decoders.forward(tape, params, enc, base, mix)
    }

    /// `[B, T, V]` vocabulary logits.
    pub fn mlm_logits(&self, tape: &mut Tape, params: &ParamStore, enc: &EncoderOutput) -> Result<Var, ModelError> {
        tape.count("head.mlm");
        Ok(self.heads.mlm.forward(tape, params, enc.hidden)?)
    }

    /// `[B, T]` switching-point logits.
    pub fn spp_logits(&self, tape: &mut Tape, params: &ParamStore, enc: &EncoderOutput) -> Result<Var, ModelError> {
        tape.count("head.spp");
        token_scalar(tape, params, &self.heads.spp, enc)
    }

    /// `[B, T]` token-language logits.
    pub fn tlc_logits(&self, tape: &mut Tape, params: &ParamStore, enc: &EncoderOutput) -> Result<Var, ModelError> {
        tape.count("head.tlc");
        token_scalar(tape, params, &self.heads.tlc, enc)
    }

    /// `[B]` sentence-pair logits from the `[CLS]` state.
    pub fn btsp_logits(&self, tape: &mut Tape, params: &ParamStore, enc: &EncoderOutput) -> Result<Var, ModelError> {
        tape.count("head.btsp");
        cls_scalar(tape, params, &self.heads.btsp, enc)
    }

    /// `[B]` code-mixing index regression from the `[CLS]` state.
    pub fn cmi_prediction(&self, tape: &mut Tape, params: &ParamStore, enc: &EncoderOutput) -> Result<Var, ModelError> {
        tape.count("head.cmi");
        cls_scalar(tape, params, &self.heads.cmi, enc)
    }
}

/// Pre-trained encoder with a linear classifier over the `[CLS]` state.
#[derive(Debug, Clone)]
pub struct SequenceClassifier {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub classifier: Linear,
    pub num_classes: usize,
    layout: ParamLayout,
}

impl SequenceClassifier {
    pub fn new(config: ModelConfig, num_classes: usize) -> Result<Self, ModelError> {
        config.validate()?;
        if num_classes < 2 {
            return Err(ModelError::InvalidConfig(format!("{num_classes} classes")));
        }
        let mut layout = ParamLayout::new();
        let encoder = Encoder::declare(&mut layout, &config);
        let classifier = Linear::declare(&mut layout, "classifier", config.hidden_dim, num_classes);
        Ok(Self { config, encoder, classifier, num_classes, layout })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    /// Fresh parameters with the encoder copied from `pretrained`.
    pub fn init_from(&self, pretrained: &ParamStore, seed: u64) -> Result<ParamStore, ModelError> {
        let mut params = ParamStore::init(&self.layout, seed);
        let copied = params.copy_matching(pretrained)?;
        let expected = self.layout.specs().iter().filter(|s| s.name.starts_with("encoder.")).count();
        if copied != expected {
            return Err(ModelError::Checkpoint(format!("copied {copied} of {expected} encoder tensors")));
        }
        Ok(params)
    }

    /// `[B, classes]` logits.
    pub fn logits(&self, tape: &mut Tape, params: &ParamStore, batch: &TokenBatch) -> Result<Var, ModelError> {
        let enc = self.encoder.forward(tape, params, batch)?;
        let cls = cls_state(tape, &enc)?;
        Ok(self.classifier.forward(tape, params, cls)?)
    }
}
