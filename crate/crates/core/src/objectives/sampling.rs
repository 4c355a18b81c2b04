use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{align_word_labels, CorpusRecord, BASE_LANG, MIX_LANG};
use crate::tensor::IGNORE_INDEX;
use crate::tokenizer::{encode_segments, Encoding, Vocabulary, MASK_ID, NUM_SPECIAL};

pub const MLM_SELECT_PROB: f64 = 0.15;
pub const MLM_MASK_PROB: f64 = 0.8;
pub const MLM_RANDOM_PROB: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAction {
    Mask,
    Random,
    Keep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSequence {
    pub ids: Vec<usize>,
    /// True id at selected positions, `-100` elsewhere.
    pub labels: Vec<i64>,
    /// What happened at each selected position.
    pub actions: Vec<Option<MaskAction>>,
}

/// Selects each non-special token independently with probability 0.15.
/// A selected token becomes `[MASK]` (80%), a random non-special id (10%)
/// or stays as it is (10%).
pub fn apply_mlm_masking<R: Rng + ?Sized>(ids: &[usize], special: &[bool], vocab_size: usize, rng: &mut R) -> MaskedSequence {
    assert_eq!(ids.len(), special.len(), "special mask length");
    let mut out = MaskedSequence {
        ids: ids.to_vec(),
        labels: vec![IGNORE_INDEX; ids.len()],
        actions: vec![None; ids.len()],
    };
    for i in 0..ids.len() {
        if special[i] || rng.gen::<f64>() >= MLM_SELECT_PROB {
            continue;
        }
        out.labels[i] = ids[i] as i64;
        let r = rng.gen::<f64>();
        let action = if r < MLM_MASK_PROB {
            out.ids[i] = MASK_ID;
            MaskAction::Mask
        } else if r < MLM_MASK_PROB + MLM_RANDOM_PROB {
            out.ids[i] = rng.gen_range(NUM_SPECIAL..vocab_size);
            MaskAction::Random
        } else {
            MaskAction::Keep
        };
        out.actions[i] = Some(action);
    }
    out
}

/// Where the second sentence of a pair came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BtspSource {
    OwnBase,
    OwnMix,
    OtherBase(usize),
    OtherMix(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BtspSample {
    pub source: BtspSource,
    /// 1 when the second sentence is a translation of the first.
    pub label: i64,
}

impl BtspSample {
    pub fn text<'a>(&self, records: &'a [CorpusRecord], index: usize) -> &'a str {
        match self.source {
            BtspSource::OwnBase => &records[index].base_text,
            BtspSource::OwnMix => &records[index].mix_text,
            BtspSource::OtherBase(j) => &records[j].base_text,
            BtspSource::OtherMix(j) => &records[j].mix_text,
        }
    }
}

/// Draws one of four equally likely cases: own base or mix translation
/// (positive), or another record's base or mix translation (negative).
/// With a single record there is nothing to draw a negative from, so the
/// pair falls back to a positive.
pub fn btsp_sample<R: Rng + ?Sized>(index: usize, dataset_len: usize, rng: &mut R) -> BtspSample {
    let quadrant = rng.gen_range(0..4u8);
    let other = |rng: &mut R| {
        let j = rng.gen_range(0..dataset_len - 1);
        if j >= index {
            j + 1
        } else {
            j
        }
    };
    let source = match quadrant {
        0 => BtspSource::OwnBase,
        1 => BtspSource::OwnMix,
        q if dataset_len < 2 => {
            log::warn!("single-record dataset: sentence-pair negative replaced by a positive");
            if q == 2 {
                BtspSource::OwnBase
            } else {
                BtspSource::OwnMix
            }
        }
        2 => BtspSource::OtherBase(other(rng)),
        _ => BtspSource::OtherMix(other(rng)),
    };
    let label = i64::from(matches!(source, BtspSource::OwnBase | BtspSource::OwnMix));
    BtspSample { source, label }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Segment {
    CodeMixed,
    Base,
    Mix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TlcInput {
    pub encoding: Encoding,
    /// Per-token language label on first subwords, `-100` elsewhere.
    pub labels: Vec<i64>,
    pub order: [Segment; 3],
}

/// Concatenates the code-mixed sentence and both translations in a random
/// order. Base-segment words are labelled 0, mix-segment words 1 and
/// code-mixed words keep their annotation.
pub fn tlc_build_input<R: Rng + ?Sized>(record: &CorpusRecord, vocab: &Vocabulary, max_len: usize, rng: &mut R) -> TlcInput {
    let mut order = [Segment::CodeMixed, Segment::Base, Segment::Mix];
    order.shuffle(rng);
    let mut texts = Vec::with_capacity(3);
    let mut word_labels: Vec<i64> = Vec::new();
    for seg in order {
        let text = match seg {
            Segment::CodeMixed => &record.cm_text,
            Segment::Base => &record.base_text,
            Segment::Mix => &record.mix_text,
        };
        let words = text.split_whitespace().count();
        match seg {
            Segment::CodeMixed => word_labels.extend(record.labels.iter().map(|&l| l as i64)),
            Segment::Base => word_labels.extend(std::iter::repeat(BASE_LANG as i64).take(words)),
            Segment::Mix => word_labels.extend(std::iter::repeat(MIX_LANG as i64).take(words)),
        }
        texts.push(text.as_str());
    }
    let encoding = encode_segments(&texts, vocab, max_len);
    let kept = encoding.select_words(&word_labels);
    let labels = align_word_labels(&kept, &encoding, IGNORE_INDEX).expect("labels cover every word");
    TlcInput { encoding, labels, order }
}
