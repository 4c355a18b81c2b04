use rand::Rng;

use super::sampling::{apply_mlm_masking, btsp_sample, tlc_build_input, MaskedSequence};
use super::{LossBreakdown, LossWeights, Objective, ObjectiveError};
use crate::corpus::{align_word_labels, derive_switching_points, CmiConfig, CorpusRecord};
use crate::model::{CmlFormer, ModelError, ParamStore, TokenBatch};
use crate::tensor::{Tape, Tensor, Var, IGNORE_INDEX};
use crate::tokenizer::{encode, encode_segments, Encoding, Vocabulary};

/// Tokenized views of one record, computed once before training.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedRecord {
    /// `[CLS] C [SEP]`
    pub cm: Encoding,
    /// `[CLS] B [SEP]`
    pub base: Encoding,
    /// `[CLS] M [SEP]`
    pub mix: Encoding,
    /// Switching points on first subwords of `cm`.
    pub spp_labels: Vec<i64>,
    pub cmi: f64,
}

pub fn prepare_corpus(
    records: &[CorpusRecord],
    vocab: &Vocabulary,
    max_len: usize,
    cmi: &CmiConfig,
) -> Result<Vec<PreparedRecord>, ObjectiveError> {
    records
        .iter()
        .enumerate()
        .map(|(index, r)| {
            let fail = |reason: String| ObjectiveError::Prepare { index, reason };
            r.validate().map_err(|e| fail(e.to_string()))?;
            let cm = encode(&r.cm_text, vocab, true, max_len);
            let switches = if r.switching_points.len() == r.labels.len() {
                r.switching_points.clone()
            } else {
                derive_switching_points(&r.labels).map_err(|e| fail(e.to_string()))?
            };
            let word_t: Vec<i64> = switches.iter().map(|&t| t as i64).collect();
            let spp_labels =
                align_word_labels(&cm.select_words(&word_t), &cm, IGNORE_INDEX).map_err(|e| fail(e.to_string()))?;
            let cmi = match r.cmi {
                Some(v) => v,
                None => r.cmi_with(cmi).map_err(|e| fail(e.to_string()))?,
            };
            Ok(PreparedRecord {
                base: encode(&r.base_text, vocab, true, max_len),
                mix: encode(&r.mix_text, vocab, true, max_len),
                cm,
                spp_labels,
                cmi,
            })
        })
        .collect()
}

/// Loss graph for one batch, plus detached values for logging.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub mlm_correct: usize,
    pub mlm_predictions: usize,
}

/// Builds every enabled objective's loss on a shared tape.
pub struct LossComputer<'a> {
    pub model: &'a CmlFormer,
    pub vocab: &'a Vocabulary,
    pub records: &'a [CorpusRecord],
    pub prepared: &'a [PreparedRecord],
    pub weights: LossWeights,
    /// Fixed masks per record for the C, B and M views. When absent, masks
    /// are drawn afresh on every call.
    pub static_masks: Option<&'a [[MaskedSequence; 3]]>,
}

/// Draws one mask per record and view, in record order.
pub fn draw_static_masks<R: Rng + ?Sized>(prepared: &[PreparedRecord], vocab_size: usize, rng: &mut R) -> Vec<[MaskedSequence; 3]> {
    prepared
        .iter()
        .map(|p| [&p.cm, &p.base, &p.mix].map(|e| apply_mlm_masking(&e.ids, &e.special_mask(), vocab_size, rng)))
        .collect()
}

fn padded_labels(rows: &[Vec<i64>], len: usize) -> Vec<i64> {
    let mut out = Vec::with_capacity(rows.len() * len);
    for r in rows {
        out.extend(r.iter().copied().chain(std::iter::repeat(IGNORE_INDEX).take(len - r.len())));
    }
    out
}

fn flatten_logits(tape: &mut Tape, logits: Var) -> Result<Var, ModelError> {
    let s = tape.shape(logits).to_vec();
    let rows = s[..s.len() - 1].iter().product();
    Ok(tape.reshape(logits, &[rows, s[s.len() - 1]])?)
}

fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best }).0
}

/// `(a + b + ...) / n`
fn average(tape: &mut Tape, parts: &[Var]) -> Result<Var, ModelError> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = tape.add(acc, p)?;
    }
    Ok(tape.scale(acc, 1.0 / parts.len() as f64)?)
}

impl LossComputer<'_> {
    fn wrap<T>(objective: Objective, r: Result<T, ModelError>) -> Result<T, ObjectiveError> {
        r.map_err(|source| ObjectiveError::Model { objective, source })
    }

    /// Computes the weighted total for the records at `indices`. Random
    /// draws happen in a fixed order (masks, pairs, segment orders) and only
    /// for enabled objectives.
    pub fn batch_loss<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        indices: &[usize],
        rng: &mut R,
    ) -> Result<BatchLoss, ObjectiveError> {
        let w = self.weights;
        let mut terms: Vec<(Objective, Var)> = Vec::new();
        let mut mlm_correct = 0;
        let mut mlm_predictions = 0;

        if w.enabled(Objective::Mlm) {
            let (loss, correct, total) = Self::wrap(Objective::Mlm, self.mlm(tape, params, indices, rng))?;
            terms.push((Objective::Mlm, loss));
            mlm_correct = correct;
            mlm_predictions = total;
        }

        let needs_c = [Objective::Spp, Objective::Cmi, Objective::Biltm].iter().any(|&o| w.enabled(o));
        if needs_c {
            let seqs: Vec<Vec<usize>> = indices.iter().map(|&i| self.prepared[i].cm.ids.clone()).collect();
            let batch = TokenBatch::from_sequences(&seqs);
            let first = [Objective::Spp, Objective::Cmi, Objective::Biltm].into_iter().find(|&o| w.enabled(o)).unwrap();
            let enc = Self::wrap(first, self.model.encode(tape, params, &batch))?;
            if w.enabled(Objective::Spp) {
                let r = (|| {
                    let logits = self.model.spp_logits(tape, params, &enc)?;
                    let rows: Vec<Vec<i64>> = indices.iter().map(|&i| self.prepared[i].spp_labels.clone()).collect();
                    Ok(tape.binary_cross_entropy_with_logits(logits, &padded_labels(&rows, batch.len), IGNORE_INDEX)?)
                })();
                terms.push((Objective::Spp, Self::wrap(Objective::Spp, r)?));
            }
            if w.enabled(Objective::Cmi) {
                let r = (|| {
                    let pred = self.model.cmi_prediction(tape, params, &enc)?;
                    let target: Vec<f64> = indices.iter().map(|&i| self.prepared[i].cmi).collect();
                    Ok(tape.mse(pred, &Tensor::new(vec![indices.len()], target)?)?)
                })();
                terms.push((Objective::Cmi, Self::wrap(Objective::Cmi, r)?));
            }
            if w.enabled(Objective::Biltm) {
                let r = self.biltm(tape, params, indices, &enc);
                terms.push((Objective::Biltm, Self::wrap(Objective::Biltm, r)?));
            }
        }

        if w.enabled(Objective::Btsp) {
            let r = self.btsp(tape, params, indices, rng);
            terms.push((Objective::Btsp, Self::wrap(Objective::Btsp, r)?));
        }

        if w.enabled(Objective::Tlc) {
            let r = self.tlc(tape, params, indices, rng);
            terms.push((Objective::Tlc, Self::wrap(Objective::Tlc, r)?));
        }

        terms.sort_by_key(|(o, _)| *o);
        let mut breakdown = LossBreakdown::default();
        let mut total: Option<Var> = None;
        for &(o, v) in &terms {
            breakdown.set(o, tape.value(v).item());
            let r = (|| {
                let scaled = tape.scale(v, w.get(o))?;
                Ok(match total {
                    None => scaled,
                    Some(t) => tape.add(t, scaled)?,
                })
            })();
            total = Some(Self::wrap(o, r)?);
        }
        let total = total.unwrap_or_else(|| tape.input(Tensor::scalar(0.0)));
        breakdown.total = tape.value(total).item();
        Ok(BatchLoss { total, breakdown, mlm_correct, mlm_predictions })
    }

    fn mlm<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        indices: &[usize],
        rng: &mut R,
    ) -> Result<(Var, usize, usize), ModelError> {
        let vocab_size = self.model.config.src_vocab;
        let mut parts = Vec::with_capacity(3);
        let (mut correct, mut total) = (0, 0);
        for view in 0..3 {
            let mut seqs = Vec::with_capacity(indices.len());
            let mut labels = Vec::with_capacity(indices.len());
            for &i in indices {
                let p = &self.prepared[i];
                let enc = [&p.cm, &p.base, &p.mix][view];
                let m = match self.static_masks {
                    Some(masks) => masks[i][view].clone(),
                    None => apply_mlm_masking(&enc.ids, &enc.special_mask(), vocab_size, rng),
                };
                seqs.push(m.ids);
                labels.push(m.labels);
            }
            let batch = TokenBatch::from_sequences(&seqs);
            let targets = padded_labels(&labels, batch.len);
            let enc = self.model.encode(tape, params, &batch)?;
            let logits = self.model.mlm_logits(tape, params, &enc)?;
            let logits = flatten_logits(tape, logits)?;
            let values = tape.value(logits).data();
            for (row, &t) in values.chunks(vocab_size).zip(&targets) {
                if t != IGNORE_INDEX {
                    total += 1;
                    correct += usize::from(argmax(row) == t as usize);
                }
            }
            parts.push(tape.cross_entropy(logits, &targets, IGNORE_INDEX)?);
        }
        Ok((average(tape, &parts)?, correct, total))
    }

    /// Share of masked positions whose argmax prediction is the true token,
    /// evaluated without dropout on the given masks.
    pub fn mlm_accuracy(&self, params: &ParamStore, masks: &[[MaskedSequence; 3]]) -> Result<f64, ModelError> {
        let vocab_size = self.model.config.src_vocab;
        let (mut correct, mut total) = (0usize, 0usize);
        for view in 0..3 {
            let seqs: Vec<Vec<usize>> = masks.iter().map(|m| m[view].ids.clone()).collect();
            let labels: Vec<Vec<i64>> = masks.iter().map(|m| m[view].labels.clone()).collect();
            let batch = TokenBatch::from_sequences(&seqs);
            let targets = padded_labels(&labels, batch.len);
            let mut tape = Tape::new();
            let enc = self.model.encode(&mut tape, params, &batch)?;
            let logits = self.model.mlm_logits(&mut tape, params, &enc)?;
            for (row, &t) in tape.value(logits).data().chunks(vocab_size).zip(&targets) {
                if t != IGNORE_INDEX {
                    total += 1;
                    correct += usize::from(argmax(row) == t as usize);
                }
            }
        }
        Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
    }

    fn biltm(&self, tape: &mut Tape, params: &ParamStore, indices: &[usize], enc: &crate::model::EncoderOutput) -> Result<Var, ModelError> {
        // Teacher forcing: input `[CLS] t1..tn`, target `t1..tn [SEP]`.
        let shifted = |pick: fn(&PreparedRecord) -> &Encoding| {
            let mut inputs = Vec::with_capacity(indices.len());
            let mut targets = Vec::with_capacity(indices.len());
            for &i in indices {
                let ids = &pick(&self.prepared[i]).ids;
                inputs.push(ids[..ids.len() - 1].to_vec());
                targets.push(ids[1..].iter().map(|&t| t as i64).collect::<Vec<_>>());
            }
            let batch = TokenBatch::from_sequences(&inputs);
            let targets = padded_labels(&targets, batch.len);
            (batch, targets)
        };
        let (base_in, base_tgt) = shifted(|p| &p.base);
        let (mix_in, mix_tgt) = shifted(|p| &p.mix);
        let out = self.model.decode(tape, params, enc, &base_in, &mix_in)?;
        let bl = flatten_logits(tape, out.base_logits)?;
        let ml = flatten_logits(tape, out.mix_logits)?;
        let lb = tape.cross_entropy(bl, &base_tgt, IGNORE_INDEX)?;
        let lm = tape.cross_entropy(ml, &mix_tgt, IGNORE_INDEX)?;
        average(tape, &[lb, lm])
    }

    fn btsp<R: Rng + ?Sized>(&self, tape: &mut Tape, params: &ParamStore, indices: &[usize], rng: &mut R) -> Result<Var, ModelError> {
        let max_len = self.model.config.max_seq_len;
        let mut seqs = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = btsp_sample(i, self.records.len(), rng);
            let pair = encode_segments(&[&self.records[i].cm_text, s.text(self.records, i)], self.vocab, max_len);
            seqs.push(pair.ids);
            labels.push(s.label);
        }
        let batch = TokenBatch::from_sequences(&seqs);
        let enc = self.model.encode(tape, params, &batch)?;
        let logits = self.model.btsp_logits(tape, params, &enc)?;
        Ok(tape.binary_cross_entropy_with_logits(logits, &labels, IGNORE_INDEX)?)
    }

    fn tlc<R: Rng + ?Sized>(&self, tape: &mut Tape, params: &ParamStore, indices: &[usize], rng: &mut R) -> Result<Var, ModelError> {
        let max_len = self.model.config.max_seq_len;
        let mut seqs = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let input = tlc_build_input(&self.records[i], self.vocab, max_len, rng);
            seqs.push(input.encoding.ids);
            labels.push(input.labels);
        }
        let batch = TokenBatch::from_sequences(&seqs);
        let enc = self.model.encode(tape, params, &batch)?;
        let logits = self.model.tlc_logits(tape, params, &enc)?;
        Ok(tape.binary_cross_entropy_with_logits(logits, &padded_labels(&labels, batch.len), IGNORE_INDEX)?)
    }
}
