//! Wordpiece-style subword tokenizer.
//!
//! Whole words seen at least `min_freq` times become tokens. Rarer words
//! contribute substrings (word-initial pieces, and `##`-prefixed
//! continuation pieces) which are kept when they in turn reach `min_freq`.
//! Encoding is greedy longest-match; a word that cannot be fully covered
//! becomes `<unk>`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
const CONTINUATION: &str = "##";
const MAX_PIECE_CHARS: usize = 12;

pub const DEFAULT_MIN_FREQ: usize = 10;
pub const DEFAULT_MAX_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

/// BOS-framed token ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Ids between the BOS and EOS markers.
    pub fn content(&self) -> &[u32] {
        let start = usize::from(self.ids.first() == Some(&BOS));
        let end = if self.ids.len() > start && self.ids.last() == Some(&EOS) {
            self.ids.len() - 1
        } else {
            self.ids.len()
        };
        &self.ids[start..end]
    }
}

/// Lowercased whitespace tokens.
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied().filter(|&id| id > UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Learns a vocabulary from captions. `max_vocab` caps the total size,
    /// reserved ids included.
    pub fn train<'a, I>(corpus: I, min_freq: usize, max_vocab: usize) -> Result<Vocab>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if min_freq == 0 {
            return Err(Error::Config("min_freq must be positive".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut lines = 0usize;
        for caption in corpus {
            lines += 1;
            for w in words(caption) {
                *counts.entry(w).or_default() += 1;
            }
        }
        if lines == 0 {
            return Err(Error::Data("cannot train a vocabulary on an empty corpus".into()));
        }

        let by_count = |a: &(String, usize), b: &(String, usize)| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0));

        let mut whole: Vec<(String, usize)> = counts
            .iter()
            .filter(|(_, &c)| c >= min_freq)
            .map(|(w, &c)| (w.clone(), c))
            .collect();
        whole.sort_by(by_count);

        let mut piece_counts: HashMap<String, usize> = HashMap::new();
        for (word, &c) in counts.iter().filter(|(_, &c)| c < min_freq) {
            let chars: Vec<char> = word.chars().collect();
            for start in 0..chars.len() {
                for end in start + 1..=chars.len().min(start + MAX_PIECE_CHARS) {
                    let sub: String = chars[start..end].iter().collect();
                    let piece = if start == 0 {
                        sub
                    } else {
                        format!("{CONTINUATION}{sub}")
                    };
                    *piece_counts.entry(piece).or_default() += c;
                }
            }
        }
        let mut pieces: Vec<(String, usize)> = piece_counts
            .into_iter()
            .filter(|(p, c)| *c >= min_freq && !counts.get(p).is_some_and(|&wc| wc >= min_freq))
            .collect();
        pieces.sort_by(by_count);

        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(whole.into_iter().map(|(w, _)| w))
            .chain(pieces.into_iter().map(|(p, _)| p))
            .take(max_vocab.max(RESERVED.len()))
            .collect();
        Ok(Vocab::from_tokens(tokens))
    }

    fn segment(&self, word: &str, out: &mut Vec<u32>) {
        let chars: Vec<char> = word.chars().collect();
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut found = None;
            for end in (start + 1..=chars.len()).rev() {
                let sub: String = chars[start..end].iter().collect();
                let key = if start == 0 {
                    sub
                } else {
                    format!("{CONTINUATION}{sub}")
                };
                if let Some(id) = self.id(&key) {
                    found = Some((id, end));
                    break;
                }
            }
            match found {
                Some((id, end)) => {
                    pieces.push(id);
                    start = end;
                }
                None => {
                    out.push(UNK);
                    return;
                }
            }
        }
        out.extend(pieces);
    }

    /// Lowercases, splits on whitespace, segments, keeps at most `max_len`
    /// content tokens, and frames with BOS/EOS.
    pub fn encode(&self, text: &str, max_len: usize) -> TokenSeq {
        let mut content = Vec::new();
        for w in words(text) {
            self.segment(&w, &mut content);
            if content.len() >= max_len {
                break;
            }
        }
        content.truncate(max_len);
        let mut ids = Vec::with_capacity(content.len() + 2);
        ids.push(BOS);
        ids.extend(content);
        ids.push(EOS);
        TokenSeq { ids }
    }

    /// Joins pieces back into words. Framing and padding ids are dropped.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut words: Vec<String> = Vec::new();
        for &id in ids {
            let tok = self
                .token(id)
                .ok_or_else(|| Error::Data(format!("token id {id} not in vocabulary of {}", self.len())))?;
            match id {
                PAD | BOS | EOS => {}
                _ => match tok.strip_prefix(CONTINUATION) {
                    Some(rest) if id != UNK && !words.is_empty() => words.last_mut().unwrap().push_str(rest),
                    Some(rest) if id != UNK => words.push(rest.to_string()),
                    _ => words.push(tok.to_string()),
                },
            }
        }
        Ok(words.join(" "))
    }

    /// `token<TAB>id` per line, in id order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(out, "{t}\t{i}").unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Vocab> {
        let mut tokens = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::Data(format!("vocab line {}: expected token<TAB>id", lineno + 1)))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::Data(format!("vocab line {}: bad id {id:?}", lineno + 1)))?;
            if id != tokens.len() {
                return Err(Error::Data(format!(
                    "vocab line {}: id {id} out of order, expected {}",
                    lineno + 1,
                    tokens.len()
                )));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Data("vocab does not start with the reserved tokens".into()));
        }
        Ok(Vocab::from_tokens(tokens))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::from_text(&text)
    }
}
