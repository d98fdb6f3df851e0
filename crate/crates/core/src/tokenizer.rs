//! Byte-level BPE.
//!
//! Text is split into pieces before every ASCII space (the space stays attached
//! to the following word), pieces are mapped to byte symbols, and learned merges
//! are applied inside each piece in rank order. Merges never cross piece
//! boundaries, so a whole word plus its leading space can become one token.
//!
//! Ids `0..4` are reserved for the special tokens, ids `4..260` are the 256 byte
//! symbols, and merged symbols follow in the order they were learned.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const CLS: TokenId = 1;
pub const SEP: TokenId = 2;
pub const MASK: TokenId = 3;
pub const NUM_SPECIAL: usize = 4;
pub const BYTE_OFFSET: TokenId = NUM_SPECIAL as TokenId;
pub const BASE_VOCAB: usize = NUM_SPECIAL + 256;

const SPECIAL_NAMES: [&str; NUM_SPECIAL] = ["‹pad›", "‹cls›", "‹sep›", "‹mask›"];
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum TokenizerError {
    #[error("cannot train on an empty corpus")]
    EmptyCorpus,
    #[error("target vocabulary {0} is below the base size {BASE_VOCAB}")]
    VocabTooSmall(usize),
    #[error("unknown token id {0}")]
    UnknownId(TokenId),
    #[error("tokenizer file: {0}")]
    Format(String),
    #[error("tokenizer io: {0}")]
    Io(#[from] std::io::Error),
    #[error("tokenizer json: {0}")]
    Json(#[from] serde_json::Error),
}

pub fn is_special(id: TokenId) -> bool {
    (id as usize) < NUM_SPECIAL
}

/// GPT-2 style reversible mapping from bytes to printable characters, used only
/// to give symbols readable names in the tokenizer file.
fn byte_to_char_table() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut printable: Vec<u32> = (b'!' as u32..=b'~' as u32).collect();
    printable.extend(0xA1..=0xAC);
    printable.extend(0xAE..=0xFF);
    let mut extra = 0;
    for b in 0..256u32 {
        table[b as usize] = if printable.contains(&b) {
            char::from_u32(b).unwrap()
        } else {
            extra += 1;
            char::from_u32(255 + extra).unwrap()
        };
    }
    table
}

fn symbol_name(bytes: &[u8], table: &[char; 256]) -> String {
    bytes.iter().map(|&b| table[b as usize]).collect()
}

/// Splits before every ASCII space; concatenating the pieces gives back `text`.
pub fn pretokenize(text: &str) -> Vec<(usize, &str)> {
    let bytes = text.as_bytes();
    let mut pieces = Vec::new();
    let mut start = 0;
    for i in 1..bytes.len() {
        if bytes[i] == b' ' {
            pieces.push((start, &text[start..i]));
            start = i;
        }
    }
    if start < bytes.len() {
        pieces.push((start, &text[start..]));
    }
    pieces
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    /// byte expansion of every non-special id
    symbols: Vec<Vec<u8>>,
    /// (left, right) in rank order, with the id each merge produces
    merges: Vec<(TokenId, TokenId, TokenId)>,
    ranks: HashMap<(TokenId, TokenId), (usize, TokenId)>,
}

/// A token id with the byte range of the input it covers. Specials have an
/// empty range at the boundary they were inserted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenSpan {
    pub id: TokenId,
    pub start: usize,
    pub end: usize,
}

impl BpeModel {
    /// A merge-free model: specials plus the 256 byte symbols.
    pub fn byte_level() -> Self {
        let mut symbols = vec![Vec::new(); NUM_SPECIAL];
        symbols.extend((0..=255u8).map(|b| vec![b]));
        Self {
            symbols,
            merges: Vec::new(),
            ranks: HashMap::new(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.symbols.len()
    }

    pub fn num_merges(&self) -> usize {
        self.merges.len()
    }

    pub fn merges(&self) -> impl Iterator<Item = (TokenId, TokenId)> + '_ {
        self.merges.iter().map(|&(a, b, _)| (a, b))
    }

    /// Bytes of a non-special symbol.
    pub fn symbol_bytes(&self, id: TokenId) -> Option<&[u8]> {
        if is_special(id) {
            return None;
        }
        self.symbols.get(id as usize).map(|v| v.as_slice())
    }

    fn push_merge(&mut self, left: TokenId, right: TokenId, lookup: &mut HashMap<Vec<u8>, TokenId>) -> TokenId {
        let mut bytes = self.symbols[left as usize].clone();
        bytes.extend_from_slice(&self.symbols[right as usize]);
        let id = *lookup.entry(bytes.clone()).or_insert_with(|| {
            self.symbols.push(bytes);
            (self.symbols.len() - 1) as TokenId
        });
        self.ranks.insert((left, right), (self.merges.len(), id));
        self.merges.push((left, right, id));
        id
    }

    fn bytes_lookup(&self) -> HashMap<Vec<u8>, TokenId> {
        self.symbols
            .iter()
            .enumerate()
            .skip(NUM_SPECIAL)
            .map(|(i, s)| (s.clone(), i as TokenId))
            .collect()
    }

    fn encode_piece(&self, piece: &[u8]) -> Vec<TokenId> {
        let mut syms: Vec<TokenId> = piece.iter().map(|&b| b as TokenId + BYTE_OFFSET).collect();
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&(r, id)| (r, w[0], w[1], id)))
                .min();
            let Some((_, left, right, id)) = best else { break };
            let mut merged = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == left && syms[i + 1] == right {
                    merged.push(id);
                    i += 2;
                } else {
                    merged.push(syms[i]);
                    i += 1;
                }
            }
            syms = merged;
        }
        syms
    }

    /// Encodes with byte offsets into `text`.
    pub fn encode_with_offsets(&self, text: &str, add_specials: bool) -> Vec<TokenSpan> {
        let mut out = Vec::new();
        if add_specials {
            out.push(TokenSpan { id: CLS, start: 0, end: 0 });
        }
        let mut cache: HashMap<&str, Vec<TokenId>> = HashMap::new();
        for (offset, piece) in pretokenize(text) {
            let ids = cache
                .entry(piece)
                .or_insert_with(|| self.encode_piece(piece.as_bytes()));
            let mut pos = offset;
            for &id in ids.iter() {
                let len = self.symbols[id as usize].len();
                out.push(TokenSpan {
                    id,
                    start: pos,
                    end: pos + len,
                });
                pos += len;
            }
        }
        if add_specials {
            out.push(TokenSpan {
                id: SEP,
                start: text.len(),
                end: text.len(),
            });
        }
        out
    }

    pub fn encode(&self, text: &str, add_specials: bool) -> Vec<TokenId> {
        self.encode_with_offsets(text, add_specials)
            .into_iter()
            .map(|t| t.id)
            .collect()
    }

    /// Raw bytes of `ids` with specials dropped.
    pub fn decode_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>, TokenizerError> {
        let mut out = Vec::new();
        for &id in ids {
            let sym = self.symbols.get(id as usize).ok_or(TokenizerError::UnknownId(id))?;
            out.extend_from_slice(sym);
        }
        Ok(out)
    }

    /// Inverse of [`encode`](Self::encode) with special tokens dropped. Id
    /// sequences that split a multi-byte character decode lossily.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String, TokenizerError> {
        let bytes = self.decode_bytes(ids)?;
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    pub fn to_file(&self) -> TokenizerFile {
        let table = byte_to_char_table();
        let name = |id: TokenId| -> String {
            if is_special(id) {
                SPECIAL_NAMES[id as usize].to_string()
            } else {
                symbol_name(&self.symbols[id as usize], &table)
            }
        };
        TokenizerFile {
            version: FORMAT_VERSION,
            special_tokens: SPECIAL_NAMES
                .iter()
                .enumerate()
                .map(|(i, n)| (n.to_string(), i as TokenId))
                .collect(),
            merges: self.merges.iter().map(|&(a, b, _)| [name(a), name(b)]).collect(),
            vocab: (0..self.symbols.len() as TokenId).map(|i| (name(i), i)).collect(),
        }
    }

    pub fn from_file(file: &TokenizerFile) -> Result<Self, TokenizerError> {
        if file.version != FORMAT_VERSION {
            return Err(TokenizerError::Format(format!("unsupported version {}", file.version)));
        }
        for (i, n) in SPECIAL_NAMES.iter().enumerate() {
            if file.special_tokens.get(*n) != Some(&(i as TokenId)) {
                return Err(TokenizerError::Format(format!("special token {n} must have id {i}")));
            }
        }
        let table = byte_to_char_table();
        let mut model = Self::byte_level();
        let mut lookup = model.bytes_lookup();
        let mut by_name: HashMap<String, TokenId> = (0..BASE_VOCAB as TokenId)
            .skip(NUM_SPECIAL)
            .map(|id| (symbol_name(&model.symbols[id as usize], &table), id))
            .collect();
        for [a, b] in &file.merges {
            let left = *by_name
                .get(a)
                .ok_or_else(|| TokenizerError::Format(format!("merge references unknown symbol {a:?}")))?;
            let right = *by_name
                .get(b)
                .ok_or_else(|| TokenizerError::Format(format!("merge references unknown symbol {b:?}")))?;
            let id = model.push_merge(left, right, &mut lookup);
            by_name.insert(symbol_name(&model.symbols[id as usize], &table), id);
        }
        let rebuilt = model.to_file();
        if rebuilt.vocab != file.vocab {
            return Err(TokenizerError::Format("vocab does not match the merge list".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_file())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let file: TokenizerFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_file(&file)
    }
}

/// On-disk tokenizer layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerFile {
    pub version: u32,
    pub special_tokens: BTreeMap<String, TokenId>,
    pub merges: Vec<[String; 2]>,
    pub vocab: BTreeMap<String, TokenId>,
}

/// Greedy BPE training: merge the most frequent adjacent pair until the
/// vocabulary reaches `target_vocab` or no pair remains. Ties go to the
/// smallest (left id, right id).
pub fn train_bpe<'a, I>(corpus: I, target_vocab: usize) -> Result<BpeModel, TokenizerError>
where
    I: IntoIterator<Item = &'a str>,
{
    if target_vocab < BASE_VOCAB {
        return Err(TokenizerError::VocabTooSmall(target_vocab));
    }
    let mut piece_counts: HashMap<&str, i64> = HashMap::new();
    let mut any_doc = false;
    for text in corpus {
        any_doc = true;
        for (_, piece) in pretokenize(text) {
            *piece_counts.entry(piece).or_default() += 1;
        }
    }
    if !any_doc {
        return Err(TokenizerError::EmptyCorpus);
    }
    // sort so word indices do not depend on hash order
    let mut pieces: Vec<(&str, i64)> = piece_counts.into_iter().collect();
    pieces.sort_unstable();
    let mut words: Vec<Vec<TokenId>> = pieces
        .iter()
        .map(|(p, _)| p.bytes().map(|b| b as TokenId + BYTE_OFFSET).collect())
        .collect();
    let counts: Vec<i64> = pieces.iter().map(|&(_, c)| c).collect();

    let mut pair_counts: HashMap<(TokenId, TokenId), i64> = HashMap::new();
    let mut pair_words: HashMap<(TokenId, TokenId), BTreeSet<usize>> = HashMap::new();
    for (w, syms) in words.iter().enumerate() {
        for pair in syms.windows(2) {
            let key = (pair[0], pair[1]);
            *pair_counts.entry(key).or_default() += counts[w];
            pair_words.entry(key).or_default().insert(w);
        }
    }
    let mut queue: BTreeSet<(Reverse<i64>, TokenId, TokenId)> = pair_counts
        .iter()
        .filter(|(_, &c)| c > 0)
        .map(|(&(a, b), &c)| (Reverse(c), a, b))
        .collect();

    let mut model = BpeModel::byte_level();
    let mut lookup = model.bytes_lookup();
    while model.vocab_size() < target_vocab {
        let Some((Reverse(_), left, right)) = queue.pop_first() else { break };
        let new_id = model.push_merge(left, right, &mut lookup);
        let affected: Vec<usize> = pair_words
            .remove(&(left, right))
            .map(|s| s.into_iter().collect())
            .unwrap_or_default();
        pair_counts.remove(&(left, right));
        let mut deltas: BTreeMap<(TokenId, TokenId), i64> = BTreeMap::new();
        for w in affected {
            let old = std::mem::take(&mut words[w]);
            for pair in old.windows(2) {
                *deltas.entry((pair[0], pair[1])).or_default() -= counts[w];
            }
            let mut merged = Vec::with_capacity(old.len());
            let mut i = 0;
            while i < old.len() {
                if i + 1 < old.len() && old[i] == left && old[i + 1] == right {
                    merged.push(new_id);
                    i += 2;
                } else {
                    merged.push(old[i]);
                    i += 1;
                }
            }
            for pair in merged.windows(2) {
                let key = (pair[0], pair[1]);
                *deltas.entry(key).or_default() += counts[w];
                pair_words.entry(key).or_default().insert(w);
            }
            words[w] = merged;
        }
        for (key, delta) in deltas {
            if key == (left, right) || delta == 0 {
                continue;
            }
            let old = pair_counts.get(&key).copied().unwrap_or(0);
            let new = old + delta;
            if old > 0 {
                queue.remove(&(Reverse(old), key.0, key.1));
            }
            if new > 0 {
                pair_counts.insert(key, new);
                queue.insert((Reverse(new), key.0, key.1));
            } else {
                pair_counts.remove(&key);
            }
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Brute-force pair counter over pretokenized pieces.
    fn brute_force_best_pair(corpus: &[&str]) -> (TokenId, TokenId) {
        let mut counts: BTreeMap<(TokenId, TokenId), i64> = BTreeMap::new();
        for text in corpus {
            for (_, piece) in pretokenize(text) {
                let b = piece.as_bytes();
                for i in 0..b.len().saturating_sub(1) {
                    *counts
                        .entry((b[i] as TokenId + BYTE_OFFSET, b[i + 1] as TokenId + BYTE_OFFSET))
                        .or_default() += 1;
                }
            }
        }
        let max = *counts.values().max().unwrap();
        *counts.iter().find(|(_, &c)| c == max).unwrap().0
    }

    fn byte_id(c: char) -> TokenId {
        c as TokenId + BYTE_OFFSET
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let corpus = ["abab abab"];
        let model = train_bpe(corpus.iter().copied(), 261).unwrap();
        let first = model.merges().next().unwrap();
        assert_eq!(first, (byte_id('a'), byte_id('b')));
        assert_eq!(first, brute_force_best_pair(&corpus));
    }

    #[test]
    fn no_budget_means_no_merges() {
        let model = train_bpe(["hello world"].iter().copied(), BASE_VOCAB).unwrap();
        assert_eq!(model.num_merges(), 0);
        assert_eq!(model, BpeModel::byte_level());
    }

    #[test]
    fn document_order_does_not_matter() {
        let a = ["the cat sat", "on the mat", "the cat ran"];
        let b = ["the cat ran", "the cat sat", "on the mat"];
        let ma = train_bpe(a.iter().copied(), 300).unwrap();
        let mb = train_bpe(b.iter().copied(), 300).unwrap();
        assert_eq!(ma.merges().collect::<Vec<_>>(), mb.merges().collect::<Vec<_>>());
    }

    #[test]
    fn errors() {
        assert!(matches!(
            train_bpe(std::iter::empty::<&str>(), 300),
            Err(TokenizerError::EmptyCorpus)
        ));
        assert!(matches!(
            train_bpe(["x"].iter().copied(), 259),
            Err(TokenizerError::VocabTooSmall(259))
        ));
        let m = BpeModel::byte_level();
        assert!(matches!(
            m.decode(&[m.vocab_size() as TokenId]),
            Err(TokenizerError::UnknownId(_))
        ));
    }

    #[test]
    fn specials() {
        let m = BpeModel::byte_level();
        assert_eq!(m.encode("", true), vec![CLS, SEP]);
        assert_eq!(m.decode(&[CLS, SEP]).unwrap(), "");
    }

    #[test]
    fn whole_words_become_single_tokens() {
        let text = "w1 w2 w3 w1 w2 w3 cue1 w2";
        let m = train_bpe([text].iter().copied(), 400).unwrap();
        let ids = m.encode(text, false);
        assert_eq!(ids.len(), text.split(' ').count());
    }

    #[test]
    fn offsets_cover_input() {
        let m = train_bpe(["pt seen at 10am. pt seen"].iter().copied(), 300).unwrap();
        let text = "pt seen again";
        let spans = m.encode_with_offsets(text, false);
        let mut pos = 0;
        for s in &spans {
            assert_eq!(s.start, pos);
            assert_eq!(&text.as_bytes()[s.start..s.end], m.symbol_bytes(s.id).unwrap());
            pos = s.end;
        }
        assert_eq!(pos, text.len());
    }

    #[test]
    fn file_round_trip() {
        let m = train_bpe(["abab abab cdcd ab cd", "é è ü"].iter().copied(), 290).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tok.json");
        m.save(&p).unwrap();
        let loaded = BpeModel::load(&p).unwrap();
        assert_eq!(loaded, m);

        let mut bad = m.to_file();
        bad.version = 7;
        assert!(BpeModel::from_file(&bad).is_err());
    }

    #[test]
    fn merges_reference_earlier_symbols() {
        let m = train_bpe(["aaaa bbbb abab aabb"].iter().copied(), 280).unwrap();
        for (left, right, id) in &m.merges {
            assert!(*left < *id || m.symbols[*id as usize].len() > 1);
            assert!((*left as usize) < m.vocab_size() && (*right as usize) < m.vocab_size());
            assert!(!is_special(*left) && !is_special(*right));
        }
        // applying any prefix of merges stays inside the vocabulary
        for k in 0..=m.merges.len() {
            let mut prefix = BpeModel::byte_level();
            let mut lookup = prefix.bytes_lookup();
            for &(l, r, _) in &m.merges[..k] {
                prefix.push_merge(l, r, &mut lookup);
            }
            for id in prefix.encode("aaaa bbbb abab aabb", false) {
                assert!((id as usize) < m.vocab_size());
                assert_eq!(prefix.symbols[id as usize], m.symbols[id as usize]);
            }
        }
    }

    #[test]
    fn retraining_is_deterministic() {
        let corpus = ["the patient was seen", "patient seen again", "again and again"];
        let a = train_bpe(corpus.iter().copied(), 320).unwrap();
        let b = train_bpe(corpus.iter().copied(), 320).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn round_trip(s in "\\PC{0,40}") {
            let model = trained();
            prop_assert_eq!(model.decode(&model.encode(&s, true)).unwrap(), s.clone());
            let bytes = BpeModel::byte_level();
            let ids = bytes.encode(&s, false);
            prop_assert_eq!(bytes.encode(&bytes.decode(&ids).unwrap(), false), ids);
        }
    }

    fn trained() -> &'static BpeModel {
        static M: std::sync::OnceLock<BpeModel> = std::sync::OnceLock::new();
        M.get_or_init(|| {
            train_bpe(
                ["pt seen @ 10am. temp 38 c stable, denies chest pain", "chest pain resolved; pt stable"]
                    .iter()
                    .copied(),
                340,
            )
            .unwrap()
        })
    }
}
