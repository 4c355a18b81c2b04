use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GradientSet, MetricReport, TrainConfig, TrainError};
use crate::model::{Checkpoint, CheckpointKind, ModelError, ParamStore, SequenceClassifier, TokenBatch};
use crate::tensor::{Tape, IGNORE_INDEX};
use crate::tokenizer::{encode, Vocabulary};

pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledExample {
    pub text: String,
    pub label: usize,
}

/// One `{"text": ..., "label": 0|1}` object per line; blank lines skipped.
pub fn load_labeled_jsonl(path: &Path) -> Result<Vec<LabeledExample>, TrainError> {
    let text = fs::read_to_string(path).map_err(|e| TrainError::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: LabeledExample =
            serde_json::from_str(line).map_err(|e| TrainError::Data(format!("line {}: {e}", i + 1)))?;
        if ex.label >= NUM_CLASSES {
            return Err(TrainError::Data(format!("line {}: label {} is not 0 or 1", i + 1, ex.label)));
        }
        out.push(ex);
    }
    if out.is_empty() {
        return Err(TrainError::Data(format!("{} has no examples", path.display())));
    }
    Ok(out)
}

fn batch_of(examples: &[&LabeledExample], vocab: &Vocabulary, max_len: usize) -> TokenBatch {
    let seqs: Vec<Vec<usize>> = examples.iter().map(|e| encode(&e.text, vocab, true, max_len).ids).collect();
    TokenBatch::from_sequences(&seqs)
}

#[derive(Debug, Clone)]
pub struct FinetuneResult {
    pub classifier: SequenceClassifier,
    pub params: ParamStore,
    /// Mean cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
}

impl FinetuneResult {
    /// Encoder plus classifier only; decoders and pre-training heads are
    /// not part of the model any more.
    pub fn checkpoint(&self, vocab: &Vocabulary) -> Checkpoint {
        Checkpoint {
            kind: CheckpointKind::Classifier { num_classes: self.classifier.num_classes },
            config: self.classifier.config.clone(),
            vocab: vocab.tokens().to_vec(),
            params: self.params.clone(),
        }
    }
}

/// Trains the pre-trained encoder and a fresh classification head jointly.
pub fn finetune(pretrained: &Checkpoint, examples: &[LabeledExample], cfg: &TrainConfig) -> Result<FinetuneResult, TrainError> {
    cfg.validate()?;
    if pretrained.kind != CheckpointKind::Pretrained {
        return Err(TrainError::InvalidConfig("fine-tuning needs a pre-training checkpoint".into()));
    }
    if examples.len() < cfg.batch_size {
        return Err(TrainError::InvalidConfig(format!(
            "batch_size {} exceeds the {} available examples",
            cfg.batch_size,
            examples.len()
        )));
    }
    let vocab = Vocabulary::from_tokens(pretrained.vocab.clone()).map_err(|e| TrainError::Data(e.to_string()))?;
    let classifier = SequenceClassifier::new(pretrained.config.clone(), NUM_CLASSES)?;
    let mut params = classifier.init_from(&pretrained.params, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut optimizer = cfg.optimizer.build();
    let max_len = classifier.config.max_seq_len;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate(epoch);
        order.shuffle(&mut rng);
        let (mut sum, mut steps) = (0.0, 0usize);
        for chunk in order.chunks_exact(cfg.batch_size) {
            let picked: Vec<&LabeledExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let batch = batch_of(&picked, &vocab, max_len);
            let targets: Vec<i64> = picked.iter().map(|e| e.label as i64).collect();
            let mut tape = Tape::with_dropout(rng.gen());
            let logits = classifier.logits(&mut tape, &params, &batch)?;
            let loss = tape.cross_entropy(logits, &targets, IGNORE_INDEX).map_err(ModelError::from)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss { objective: "classification".into(), epoch, detail: format!("loss {value}") });
            }
            sum += value;
            let grads = tape.backward(loss).map_err(ModelError::from)?;
            let mut grads = GradientSet::from_gradients(&grads)?;
            grads.clip_norm(cfg.clip_norm);
            optimizer.step(&mut params, &grads, lr);
            steps += 1;
        }
        let mean = sum / steps as f64;
        log::info!("finetune epoch {epoch}: lr {lr:e}, loss {mean:.6}");
        epoch_losses.push(mean);
    }
    Ok(FinetuneResult { classifier, params, epoch_losses })
}

/// Class ids by argmax, evaluated without dropout.
pub fn predict(
    classifier: &SequenceClassifier,
    params: &ParamStore,
    vocab: &Vocabulary,
    examples: &[LabeledExample],
) -> Result<Vec<usize>, TrainError> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(32) {
        let picked: Vec<&LabeledExample> = chunk.iter().collect();
        let batch = batch_of(&picked, vocab, classifier.config.max_seq_len);
        let mut tape = Tape::new();
        let logits = classifier.logits(&mut tape, params, &batch)?;
        for row in tape.value(logits).data().chunks(classifier.num_classes) {
            let best = (1..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            out.push(best);
        }
    }
    Ok(out)
}

pub fn evaluate(
    classifier: &SequenceClassifier,
    params: &ParamStore,
    vocab: &Vocabulary,
    examples: &[LabeledExample],
) -> Result<MetricReport, TrainError> {
    let predictions = predict(classifier, params, vocab, examples)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    Ok(MetricReport::from_predictions(&labels, &predictions))
}
