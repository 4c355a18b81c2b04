use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GradientSet, TrainConfig, TrainError};
use crate::corpus::{CmiConfig, CorpusRecord};
use crate::model::{Checkpoint, CheckpointKind, CmlFormer, ModelError, ParamStore};
use crate::objectives::{draw_static_masks, prepare_corpus, LossBreakdown, LossComputer, MaskedSequence, Objective, ObjectiveError};
use crate::tensor::{OpCounters, Tape, TensorError};
use crate::tokenizer::Vocabulary;

pub const LOSS_CSV_HEADER: &str = "epoch,mlm,spp,btsp,biltm,tlc,cmi,total";

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// Counted from 0, matching the learning-rate exponent.
    pub epoch: usize,
    pub lr: f64,
    /// Means over the epoch's batches.
    pub losses: LossBreakdown,
    /// Share of masked positions predicted correctly, before each update.
    pub mlm_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossLog {
    pub epochs: Vec<EpochLog>,
}

impl LossLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(LOSS_CSV_HEADER);
        out.push('\n');
        for e in &self.epochs {
            let l = &e.losses;
            let _ = writeln!(out, "{},{},{},{},{},{},{},{}", e.epoch, l.mlm, l.spp, l.btsp, l.biltm, l.tlc, l.cmi, l.total);
        }
        out
    }

    /// Reads back `(epoch, losses)` rows written by [`LossLog::to_csv`].
    pub fn parse_csv(text: &str) -> Result<Vec<(usize, LossBreakdown)>, TrainError> {
        let mut lines = text.lines();
        if lines.next() != Some(LOSS_CSV_HEADER) {
            return Err(TrainError::Data("loss log header mismatch".into()));
        }
        lines
            .enumerate()
            .map(|(i, line)| {
                let bad = || TrainError::Data(format!("loss log row {}: `{line}`", i + 1));
                let cells: Vec<&str> = line.split(',').collect();
                if cells.len() != 8 {
                    return Err(bad());
                }
                let epoch = cells[0].parse().map_err(|_| bad())?;
                let v: Vec<f64> = cells[1..].iter().map(|c| c.parse()).collect::<Result<_, _>>().map_err(|_| bad())?;
                let losses =
                    LossBreakdown { mlm: v[0], spp: v[1], btsp: v[2], biltm: v[3], tlc: v[4], cmi: v[5], total: v[6] };
                Ok((epoch, losses))
            })
            .collect()
    }
}

/// Files rewritten at the end of every epoch.
#[derive(Debug, Clone)]
pub struct PretrainOutputs {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
}

#[derive(Debug, Clone)]
pub struct PretrainResult {
    pub params: ParamStore,
    pub log: LossLog,
    /// Forward-pass counters summed over every step.
    pub counters: OpCounters,
    /// The fixed MLM masks, when training used them.
    pub static_masks: Option<Vec<[MaskedSequence; 3]>>,
}

fn objective_failure(err: ObjectiveError, epoch: usize) -> TrainError {
    match err {
        ObjectiveError::Model { objective, source: ModelError::Tensor(TensorError::NonFinite { op }) } => {
            TrainError::NonFiniteLoss { objective: objective.name().into(), epoch, detail: format!("{op} produced NaN or Inf") }
        }
        other => TrainError::Objective(other),
    }
}

/// Joint multi-objective pre-training. Parameters start from `init` or a
/// fresh draw from `cfg.seed`; every random choice comes from that seed.
pub fn pretrain(
    model: &CmlFormer,
    vocab: &Vocabulary,
    records: &[CorpusRecord],
    cfg: &TrainConfig,
    init: Option<ParamStore>,
    outputs: Option<&PretrainOutputs>,
) -> Result<PretrainResult, TrainError> {
    cfg.validate()?;
    if cfg.weights.enabled_objectives().is_empty() {
        return Err(TrainError::InvalidConfig("no objective enabled".into()));
    }
    if vocab.len() != model.config.src_vocab {
        return Err(TrainError::InvalidConfig(format!(
            "vocabulary has {} entries, model expects {}",
            vocab.len(),
            model.config.src_vocab
        )));
    }
    if records.len() < cfg.batch_size {
        return Err(TrainError::InvalidConfig(format!(
            "batch_size {} exceeds the {} available records",
            cfg.batch_size,
            records.len()
        )));
    }
    let prepared = prepare_corpus(records, vocab, model.config.max_seq_len, &CmiConfig::default())?;
    let mut params = match init {
        Some(p) => {
            p.check_layout(model.layout())?;
            p
        }
        None => model.init_params(cfg.seed),
    };
    let static_masks = cfg.static_masks.then(|| {
        let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        mask_rng.set_stream(3);
        draw_static_masks(&prepared, model.config.src_vocab, &mut mask_rng)
    });
    let computer = LossComputer {
        model,
        vocab,
        records,
        prepared: &prepared,
        weights: cfg.weights,
        static_masks: static_masks.as_deref(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut optimizer = cfg.optimizer.build();
    let mut log = LossLog::default();
    let mut counters = OpCounters::default();
    let mut order: Vec<usize> = (0..records.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate(epoch);
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        let (mut correct, mut predicted, mut steps) = (0usize, 0usize, 0usize);
        for batch in order.chunks_exact(cfg.batch_size) {
            let mut tape = Tape::with_dropout(rng.gen());
            let loss = computer.batch_loss(&mut tape, &params, batch, &mut rng).map_err(|e| objective_failure(e, epoch))?;
            for o in Objective::ALL {
                let v = loss.breakdown.get(o);
                if !v.is_finite() {
                    return Err(TrainError::NonFiniteLoss { objective: o.name().into(), epoch, detail: format!("loss {v}") });
                }
                sums.set(o, sums.get(o) + v);
            }
            sums.total += loss.breakdown.total;
            correct += loss.mlm_correct;
            predicted += loss.mlm_predictions;
            let grads = tape.backward(loss.total).map_err(ModelError::from)?;
            let mut grads = GradientSet::from_gradients(&grads)?;
            grads.clip_norm(cfg.clip_norm);
            optimizer.step(&mut params, &grads, lr);
            counters.merge(tape.counters());
            steps += 1;
        }
        let n = steps as f64;
        let mut mean = LossBreakdown::default();
        for o in Objective::ALL {
            mean.set(o, sums.get(o) / n);
        }
        mean.total = sums.total / n;
        let mlm_accuracy = (predicted > 0).then(|| correct as f64 / predicted as f64);
        log::info!("epoch {epoch}: lr {lr:e}, total {:.6}", mean.total);
        log.epochs.push(EpochLog { epoch, lr, losses: mean, mlm_accuracy });

        if let Some(out) = outputs {
            fs::write(&out.loss_csv, log.to_csv()).map_err(|e| TrainError::io(out.loss_csv.display().to_string(), e))?;
            let ck = Checkpoint {
                kind: CheckpointKind::Pretrained,
                config: model.config.clone(),
                vocab: vocab.tokens().to_vec(),
                params: params.clone(),
            };
            ck.save(&out.checkpoint)?;
        }
    }
    Ok(PretrainResult { params, log, counters, static_masks })
}
