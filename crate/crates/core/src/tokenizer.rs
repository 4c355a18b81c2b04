//! Shared-vocabulary WordPiece tokenizer.
//!
//! Training starts from single characters (word-initial and `##`-prefixed
//! continuation forms) and greedily merges the most frequent adjacent pair
//! until the vocabulary budget is spent. Ties go to the lexicographically
//! smallest `(left, right)` pair so the result never depends on hash order.
//!
//! Encoding splits on whitespace and applies greedy longest-match per word.
//! A word with any unmatched span becomes a single `[UNK]`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const MASK_ID: usize = 4;
pub const NUM_SPECIAL: usize = 5;

pub const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = [PAD, UNK, CLS, SEP, MASK];
pub const CONTINUATION_PREFIX: &str = "##";
pub const DEFAULT_VOCAB_SIZE: usize = 4_000;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("training corpus contains no words")]
    EmptyCorpus,
    #[error("vocab size {requested} is below the {required} entries needed for specials and the alphabet")]
    VocabTooSmall { requested: usize, required: usize },
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Bijective token/id table. Ids `0..5` are the special tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, TokenizerError> {
        if tokens.len() < NUM_SPECIAL || tokens[..NUM_SPECIAL].iter().zip(SPECIAL_TOKENS).any(|(a, b)| a != b) {
            return Err(TokenizerError::InvalidVocab(format!("first {NUM_SPECIAL} tokens must be {SPECIAL_TOKENS:?}")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, token) in tokens.iter().enumerate() {
            if token.is_empty() || token.chars().any(char::is_whitespace) {
                return Err(TokenizerError::InvalidVocab(format!("token {id} is empty or contains whitespace")));
            }
            if index.insert(token.clone(), id).is_some() {
                return Err(TokenizerError::InvalidVocab(format!("duplicate token {token:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: usize) -> bool {
        id < NUM_SPECIAL
    }

    /// Non-special id for a vocabulary piece.
    fn piece_id(&self, piece: &str) -> Option<usize> {
        self.id(piece).filter(|&id| !Self::is_special(id))
    }

    /// One token per line; line number is the id.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for token in &self.tokens {
            out.push_str(token);
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn parse(contents: &str) -> Result<Self, TokenizerError> {
        Self::from_tokens(contents.lines().map(str::to_owned).collect())
    }
}

fn split_word(word: &str) -> Vec<String> {
    word.chars()
        .enumerate()
        .map(|(i, c)| if i == 0 { c.to_string() } else { format!("{CONTINUATION_PREFIX}{c}") })
        .collect()
}

fn normalized_words(text: &str) -> Vec<String> {
    let nfc: String = text.nfc().collect();
    nfc.split_whitespace().map(str::to_owned).collect()
}

/// Trains a vocabulary of at most `vocab_size` entries. Pairs seen fewer
/// than `min_freq` times are never merged.
pub fn train_vocab<I, S>(texts: I, vocab_size: usize, min_freq: usize) -> Result<Vocabulary, TokenizerError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut word_freq: BTreeMap<String, usize> = BTreeMap::new();
    for text in texts {
        for word in normalized_words(text.as_ref()) {
            *word_freq.entry(word).or_insert(0) += 1;
        }
    }
    if word_freq.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }

    let mut alphabet: BTreeSet<String> = BTreeSet::new();
    for word in word_freq.keys() {
        for c in word.chars() {
            alphabet.insert(c.to_string());
        }
        alphabet.extend(split_word(word).into_iter().skip(1));
    }
    let required = alphabet.len() + NUM_SPECIAL;
    if vocab_size < required {
        return Err(TokenizerError::VocabTooSmall { requested: vocab_size, required });
    }

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    let mut in_vocab: BTreeSet<String> = tokens.iter().cloned().collect();
    for symbol in &alphabet {
        if in_vocab.insert(symbol.clone()) {
            tokens.push(symbol.clone());
        }
    }

    // Symbol table for the merge loop, separate from vocabulary ids.
    let mut symbols: Vec<String> = Vec::new();
    let mut symbol_ids: HashMap<String, u32> = HashMap::new();
    let mut intern = |s: &str, symbols: &mut Vec<String>| -> u32 {
        if let Some(&id) = symbol_ids.get(s) {
            return id;
        }
        let id = symbols.len() as u32;
        symbols.push(s.to_owned());
        symbol_ids.insert(s.to_owned(), id);
        id
    };

    let mut words: Vec<(Vec<u32>, usize)> = word_freq
        .iter()
        .map(|(w, &f)| (split_word(w).iter().map(|s| intern(s, &mut symbols)).collect(), f))
        .collect();

    let mut pair_counts: HashMap<(u32, u32), usize> = HashMap::new();
    let mut pair_words: HashMap<(u32, u32), BTreeSet<usize>> = HashMap::new();
    for (wi, (syms, freq)) in words.iter().enumerate() {
        for pair in syms.windows(2) {
            let key = (pair[0], pair[1]);
            *pair_counts.entry(key).or_insert(0) += freq;
            pair_words.entry(key).or_default().insert(wi);
        }
    }

    while tokens.len() < vocab_size {
        let best = pair_counts
            .iter()
            .filter(|(_, &count)| count >= min_freq.max(1))
            .max_by(|(ka, ca), (kb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let a = (&symbols[ka.0 as usize], &symbols[ka.1 as usize]);
                    let b = (&symbols[kb.0 as usize], &symbols[kb.1 as usize]);
                    b.cmp(&a)
                })
            })
            .map(|(&k, _)| k);
        let Some((left, right)) = best else {
            break;
        };
        let right_str = &symbols[right as usize];
        let merged_str = format!("{}{}", symbols[left as usize], &right_str[CONTINUATION_PREFIX.len()..]);
        let merged = intern(&merged_str, &mut symbols);
        if in_vocab.insert(merged_str.clone()) {
            tokens.push(merged_str);
        }

        let affected = pair_words.remove(&(left, right)).unwrap_or_default();
        pair_counts.remove(&(left, right));
        for wi in affected {
            let (syms, freq) = &mut words[wi];
            let freq = *freq;
            for pair in syms.windows(2) {
                let key = (pair[0], pair[1]);
                if let Some(c) = pair_counts.get_mut(&key) {
                    *c -= freq;
                    if *c == 0 {
                        pair_counts.remove(&key);
                    }
                }
                if let Some(set) = pair_words.get_mut(&key) {
                    set.remove(&wi);
                }
            }
            let mut next = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == left && syms[i + 1] == right {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(syms[i]);
                    i += 1;
                }
            }
            *syms = next;
            for pair in syms.windows(2) {
                let key = (pair[0], pair[1]);
                *pair_counts.entry(key).or_insert(0) += freq;
                pair_words.entry(key).or_default().insert(wi);
            }
        }
    }

    Vocabulary::from_tokens(tokens)
}

/// Token ids with their source-word mapping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoding {
    pub ids: Vec<usize>,
    /// Index of the whitespace word each token came from; `None` for
    /// `[CLS]`/`[SEP]`/`[PAD]`.
    pub word_ids: Vec<Option<usize>>,
    pub attention_mask: Vec<bool>,
    /// For each word kept in this encoding, its index in the untruncated
    /// input. Identity unless truncation dropped whole words.
    pub source_words: Vec<usize>,
}

impl Encoding {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn word_count(&self) -> usize {
        self.source_words.len()
    }

    /// Picks the entries of a per-input-word list that survived truncation.
    pub fn select_words<T: Copy>(&self, all: &[T]) -> Vec<T> {
        self.source_words.iter().map(|&w| all[w]).collect()
    }

    /// True for structural tokens (`[CLS]`, `[SEP]`, `[PAD]`).
    pub fn special_mask(&self) -> Vec<bool> {
        self.word_ids.iter().map(Option::is_none).collect()
    }
}

fn word_pieces(word: &str, vocab: &Vocabulary) -> Vec<usize> {
    let chars: Vec<char> = word.chars().collect();
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut found = None;
        for end in (start + 1..=chars.len()).rev() {
            let body: String = chars[start..end].iter().collect();
            let piece = if start == 0 { body } else { format!("{CONTINUATION_PREFIX}{body}") };
            if let Some(id) = vocab.piece_id(&piece) {
                found = Some((id, end));
                break;
            }
        }
        match found {
            Some((id, end)) => {
                pieces.push(id);
                start = end;
            }
            None => return vec![UNK_ID],
        }
    }
    pieces
}

/// Encodes one text. With `add_specials` the result is `[CLS] … [SEP]`;
/// truncation to `max_len` keeps both markers.
pub fn encode(text: &str, vocab: &Vocabulary, add_specials: bool, max_len: usize) -> Encoding {
    if add_specials {
        encode_segments(&[text], vocab, max_len)
    } else {
        let mut words: Vec<Vec<usize>> = normalized_words(text).iter().map(|w| word_pieces(w, vocab)).collect();
        truncate_words(&mut [&mut words], max_len);
        assemble(&[words], false)
    }
}

/// Encodes `[CLS] s₁ [SEP] s₂ [SEP] …`. Word indices run across segments.
pub fn encode_segments(segments: &[&str], vocab: &Vocabulary, max_len: usize) -> Encoding {
    let mut segs: Vec<Vec<Vec<usize>>> = segments
        .iter()
        .map(|s| normalized_words(s).iter().map(|w| word_pieces(w, vocab)).collect())
        .collect();
    let budget = max_len.max(1 + segments.len()).saturating_sub(1 + segments.len());
    let mut refs: Vec<&mut Vec<Vec<usize>>> = segs.iter_mut().collect();
    let kept = truncate_words(&mut refs, budget);
    let mut enc = assemble(&segs, true);
    enc.source_words = kept;
    enc
}

/// Removes trailing pieces from the longest segment until the piece total
/// fits `budget`. Returns the original global indices of surviving words.
fn truncate_words(segments: &mut [&mut Vec<Vec<usize>>], budget: usize) -> Vec<usize> {
    let offsets: Vec<usize> = segments
        .iter()
        .scan(0, |acc, s| {
            let start = *acc;
            *acc += s.len();
            Some(start)
        })
        .collect();
    let pieces = |s: &Vec<Vec<usize>>| s.iter().map(Vec::len).sum::<usize>();
    loop {
        let total: usize = segments.iter().map(|s| pieces(s)).sum();
        if total <= budget {
            break;
        }
        let longest = (0..segments.len()).max_by_key(|&i| (pieces(segments[i]), std::cmp::Reverse(i))).expect("segments");
        let seg = &mut segments[longest];
        let last = seg.last_mut().expect("non-empty segment");
        last.pop();
        if last.is_empty() {
            seg.pop();
        }
    }
    segments
        .iter()
        .zip(offsets)
        .flat_map(|(s, off)| (0..s.len()).map(move |w| off + w))
        .collect()
}

fn assemble(segments: &[Vec<Vec<usize>>], add_specials: bool) -> Encoding {
    let mut ids = Vec::new();
    let mut word_ids = Vec::new();
    let mut word = 0;
    if add_specials {
        ids.push(CLS_ID);
        word_ids.push(None);
    }
    for seg in segments {
        for pieces in seg {
            for &p in pieces {
                ids.push(p);
                word_ids.push(Some(word));
            }
            word += 1;
        }
        if add_specials {
            ids.push(SEP_ID);
            word_ids.push(None);
        }
    }
    let attention_mask = vec![true; ids.len()];
    Encoding { ids, word_ids, attention_mask, source_words: (0..word).collect() }
}

/// Renders ids back to text. Structural specials and `[MASK]` are dropped;
/// `[UNK]` is kept literally.
pub fn decode(ids: &[usize], vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for &id in ids {
        if matches!(id, PAD_ID | CLS_ID | SEP_ID | MASK_ID) {
            continue;
        }
        let Some(token) = vocab.token(id) else {
            continue;
        };
        match token.strip_prefix(CONTINUATION_PREFIX) {
            Some(rest) if id != UNK_ID && !out.is_empty() => out.push_str(rest),
            _ => {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(token);
            }
        }
    }
    out
}
