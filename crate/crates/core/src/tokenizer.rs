//! Byte-level BPE with special tokens and an optional whole-word lexicon.
//!
//! Id layout: `0..256` raw bytes, then BOS, EOS, PAD, then one id per learned
//! merge in rank order, then lexicon entries (each term as a bare word and
//! with a leading space).
//!
//! Text is first split into pre-tokens (a run of letters, digits, or other
//! symbols, optionally carrying one leading space; or a whitespace run), and
//! merges never cross pre-token boundaries.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const BOS_TEXT: &str = "<|bos|>";
pub const EOS_TEXT: &str = "<|eos|>";
pub const PAD_TEXT: &str = "<|pad|>";

const BYTE_TOKENS: u32 = 256;
const SPECIAL_COUNT: u32 = 3;
const FILE_MAGIC: &str = "endoreport-bpe";
const FILE_VERSION: u32 = 1;

const GENERIC_CORPUS: &str = include_str!("../data/generic_corpus.txt");
pub const GENERIC_VOCAB_SIZE: usize = 600;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub bos: u32,
    pub eos: u32,
    pub pad: u32,
}

/// Text as token ids.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct TokenizerModel {
    tokens: Vec<Vec<u8>>,
    merges: Vec<(u32, u32)>,
    merge_rank: HashMap<(u32, u32), (usize, u32)>,
    terms: Vec<String>,
    whole_words: HashMap<String, u32>,
    special: SpecialIds,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Letter,
    Digit,
    Space,
    Other,
}

fn class_of(c: char) -> CharClass {
    if c.is_whitespace() {
        CharClass::Space
    } else if c.is_alphabetic() {
        CharClass::Letter
    } else if c.is_numeric() {
        CharClass::Digit
    } else {
        CharClass::Other
    }
}

/// Splits text into pre-tokens whose concatenation is the input.
pub fn pre_tokenize(text: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let end_of = |k: usize| chars.get(k).map_or(text.len(), |c| c.0);
    let mut out = Vec::new();
    let mut k = 0;
    while k < chars.len() {
        let start = k;
        if chars[k].1.is_whitespace() {
            let mut j = k;
            while j < chars.len() && chars[j].1.is_whitespace() {
                j += 1;
            }
            // A single trailing ' ' before a word belongs to that word.
            let gives_space = j < chars.len() && chars[j - 1].1 == ' ';
            if !gives_space {
                out.push(&text[end_of(start)..end_of(j)]);
                k = j;
                continue;
            }
            if j - 1 > start {
                out.push(&text[end_of(start)..end_of(j - 1)]);
            }
            k = j - 1;
        }
        let chunk_start = k;
        if chars[k].1 == ' ' {
            k += 1;
        }
        let cls = class_of(chars[k].1);
        while k < chars.len() && class_of(chars[k].1) == cls {
            k += 1;
        }
        out.push(&text[end_of(chunk_start)..end_of(k)]);
    }
    out
}

fn count_pairs(words: &[(Vec<u32>, u64)]) -> HashMap<(u32, u32), u64> {
    let mut counts = HashMap::new();
    for (w, c) in words {
        for p in w.windows(2) {
            *counts.entry((p[0], p[1])).or_insert(0) += c;
        }
    }
    counts
}

fn merge_word(w: &[u32], pair: (u32, u32), id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(w.len());
    let mut i = 0;
    while i < w.len() {
        if i + 1 < w.len() && (w[i], w[i + 1]) == pair {
            out.push(id);
            i += 2;
        } else {
            out.push(w[i]);
            i += 1;
        }
    }
    out
}

impl TokenizerModel {
    fn base() -> Self {
        let mut tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        tokens.push(BOS_TEXT.as_bytes().to_vec());
        tokens.push(EOS_TEXT.as_bytes().to_vec());
        tokens.push(PAD_TEXT.as_bytes().to_vec());
        Self {
            tokens,
            merges: Vec::new(),
            merge_rank: HashMap::new(),
            terms: Vec::new(),
            whole_words: HashMap::new(),
            special: SpecialIds {
                bos: BYTE_TOKENS,
                eos: BYTE_TOKENS + 1,
                pad: BYTE_TOKENS + 2,
            },
        }
    }

    fn push_merge(&mut self, pair: (u32, u32)) -> u32 {
        let id = self.tokens.len() as u32;
        let mut bytes = self.tokens[pair.0 as usize].clone();
        bytes.extend_from_slice(&self.tokens[pair.1 as usize]);
        self.tokens.push(bytes);
        self.merge_rank.insert(pair, (self.merges.len(), id));
        self.merges.push(pair);
        id
    }

    fn push_term(&mut self, term: &str) {
        self.terms.push(term.to_string());
        for form in [term.to_string(), format!(" {term}")] {
            let id = self.tokens.len() as u32;
            self.tokens.push(form.as_bytes().to_vec());
            self.whole_words.insert(form, id);
        }
    }

    /// Learns merges until the vocabulary reaches `vocab_size` or no pair
    /// remains. Ties in pair frequency go to the lexicographically smaller
    /// pair of byte strings.
    pub fn train_bpe<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<Self> {
        let min = (BYTE_TOKENS + SPECIAL_COUNT) as usize;
        if vocab_size <= min {
            return Err(Error::Tokenizer(format!("vocab_size must exceed {min}, got {vocab_size}")));
        }
        let mut freq: HashMap<&str, u64> = HashMap::new();
        for text in corpus {
            for chunk in pre_tokenize(text.as_ref()) {
                *freq.entry(chunk).or_insert(0) += 1;
            }
        }
        if freq.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut words: Vec<(Vec<u32>, u64)> = freq
            .into_iter()
            .map(|(w, c)| (w.bytes().map(u32::from).collect(), c))
            .collect();
        words.sort();

        let mut model = Self::base();
        while model.tokens.len() < vocab_size {
            let counts = count_pairs(&words);
            let best = counts.into_iter().max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (&model.tokens[pa.0 as usize], &model.tokens[pa.1 as usize]);
                    let kb = (&model.tokens[pb.0 as usize], &model.tokens[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            });
            let Some((pair, _)) = best else { break };
            let id = model.push_merge(pair);
            for (w, _) in &mut words {
                if w.len() > 1 {
                    *w = merge_word(w, pair, id);
                }
            }
        }
        Ok(model)
    }

    /// A vocabulary trained on general English prose, standing in for an
    /// off-the-shelf tokenizer that has never seen clinical terms.
    pub fn generic() -> Self {
        let lines: Vec<&str> = GENERIC_CORPUS.lines().collect();
        Self::train_bpe(&lines, GENERIC_VOCAB_SIZE).expect("embedded corpus is non-empty")
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn special(&self) -> SpecialIds {
        self.special
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn is_special(&self, id: u32) -> bool {
        id == self.special.bos || id == self.special.eos || id == self.special.pad
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    /// Display form of one token (lossy for partial UTF-8 sequences).
    pub fn token_str(&self, id: u32) -> String {
        self.token_bytes(id)
            .map(|b| String::from_utf8_lossy(b).into_owned())
            .unwrap_or_else(|| format!("<unk:{id}>"))
    }

    fn encode_chunk(&self, chunk: &str, out: &mut Vec<u32>) {
        if let Some(&id) = self.whole_words.get(chunk) {
            out.push(id);
            return;
        }
        let mut w: Vec<u32> = chunk.bytes().map(u32::from).collect();
        loop {
            let best = w
                .windows(2)
                .filter_map(|p| self.merge_rank.get(&(p[0], p[1])).map(|&(r, id)| (r, (p[0], p[1]), id)))
                .min_by_key(|&(r, _, _)| r);
            match best {
                Some((_, pair, id)) => w = merge_word(&w, pair, id),
                None => break,
            }
        }
        out.extend_from_slice(&w);
    }

    pub fn encode(&self, text: &str, wrap: bool) -> TokenSequence {
        let mut ids = Vec::new();
        if wrap {
            ids.push(self.special.bos);
        }
        for chunk in pre_tokenize(text) {
            self.encode_chunk(chunk, &mut ids);
        }
        if wrap {
            ids.push(self.special.eos);
        }
        TokenSequence { ids }
    }

    /// Concatenates token bytes, skipping special tokens.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            if self.is_special(id) {
                continue;
            }
            let b = self.token_bytes(id).ok_or(Error::UnknownToken(id))?;
            bytes.extend_from_slice(b);
        }
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    /// Returns a copy where every term is a single token when it appears as a
    /// whole pre-token. Decoded text is unaffected.
    pub fn apply_domain_lexicon<S: AsRef<str>>(&self, terms: &[S]) -> Result<Self> {
        let mut model = self.clone();
        for t in terms {
            let t = t.as_ref();
            if t.is_empty() {
                return Err(Error::Tokenizer("empty lexicon term".into()));
            }
            if [BOS_TEXT, EOS_TEXT, PAD_TEXT].contains(&t) {
                return Err(Error::Tokenizer(format!("lexicon term `{t}` collides with a special token")));
            }
            let pieces = pre_tokenize(t);
            if pieces.len() != 1 || t.starts_with(char::is_whitespace) {
                return Err(Error::Tokenizer(format!("lexicon term `{t}` is not a single word")));
            }
            if !model.terms.iter().any(|x| x == t) {
                model.push_term(t);
            }
        }
        Ok(model)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{FILE_MAGIC} v{FILE_VERSION} vocab_size={} bos={} eos={} pad={} merges={} terms={}",
            self.vocab_size(),
            self.special.bos,
            self.special.eos,
            self.special.pad,
            self.merges.len(),
            self.terms.len()
        );
        for (a, b) in &self.merges {
            let _ = writeln!(s, "{a} {b}");
        }
        for t in &self.terms {
            let _ = writeln!(s, "term {t}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Tokenizer(format!("line {line}: {msg}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad(1, "missing header"))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some(FILE_MAGIC) {
            return Err(bad(1, "not a tokenizer file"));
        }
        if fields.next() != Some(&format!("v{FILE_VERSION}")[..]) {
            return Err(bad(1, "unsupported version"));
        }
        let mut kv = HashMap::new();
        for f in fields {
            let (k, v) = f.split_once('=').ok_or_else(|| bad(1, "malformed header field"))?;
            let v: usize = v.parse().map_err(|_| bad(1, "non-numeric header value"))?;
            kv.insert(k, v);
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(1, &format!("missing `{k}`")));
        let (vocab, n_merges, n_terms) = (get("vocab_size")?, get("merges")?, get("terms")?);
        let mut model = Self::base();
        if (get("bos")?, get("eos")?, get("pad")?)
            != (model.special.bos as usize, model.special.eos as usize, model.special.pad as usize)
        {
            return Err(bad(1, "unexpected special ids"));
        }
        for i in 0..n_merges {
            let line_no = i + 2;
            let line = lines.next().ok_or_else(|| bad(line_no, "missing merge"))?;
            let (a, b) = line.split_once(' ').ok_or_else(|| bad(line_no, "malformed merge"))?;
            let a: u32 = a.parse().map_err(|_| bad(line_no, "bad id"))?;
            let b: u32 = b.parse().map_err(|_| bad(line_no, "bad id"))?;
            let n = model.tokens.len() as u32;
            if a >= n || b >= n || model.is_special(a) || model.is_special(b) {
                return Err(bad(line_no, "merge references an unavailable id"));
            }
            model.push_merge((a, b));
        }
        for i in 0..n_terms {
            let line_no = n_merges + i + 2;
            let line = lines.next().ok_or_else(|| bad(line_no, "missing term"))?;
            let term = line.strip_prefix("term ").ok_or_else(|| bad(line_no, "malformed term"))?;
            model = model.apply_domain_lexicon(&[term])?;
        }
        if model.vocab_size() != vocab {
            return Err(bad(1, "vocab_size does not match contents"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Hex SHA-256 of the serialized form; identifies the vocabulary a
    /// checkpoint was trained with.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
