// SPDX-License-Identifier: MIT OR Apache-2.0

//! Byte-level BPE compatible with the released GPT-2 `vocab.json` /
//! `merges.txt` pair.
//!
//! Text is split with the GPT-2 pre-tokenizer pattern, each piece's UTF-8
//! bytes are mapped through the fixed byte-to-unicode table, and merges are
//! applied greedily by lowest rank until none apply. Special tokens are not
//! recognised inside text: `"<|endoftext|>"` encodes as ordinary characters,
//! exactly as the reference encoder does.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use fancy_regex::Regex;
use thiserror::Error;

/// GPT-2 pre-tokenizer pattern.
const PRETOKENIZE_PATTERN: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

/// Surface form of GPT-2's end-of-text token, used as BOS.
pub const END_OF_TEXT: &str = "<|endoftext|>";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("vocab file is not a JSON object of token -> id: {0}")]
    VocabJson(String),
    #[error("vocab ids are not dense in [0, {len}): missing id {missing}")]
    SparseIds { len: usize, missing: u32 },
    #[error("vocab is missing the byte token {0:?}")]
    MissingByteToken(char),
    #[error("merges line {line}: malformed entry {content:?}")]
    MalformedMerge { line: usize, content: String },
    #[error("merges line {line}: merge result {token:?} is not in the vocab")]
    DanglingMerge { line: usize, token: String },
}

/// Loaded vocabulary and merge table. Immutable after construction.
#[derive(Debug)]
pub struct BpeVocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    merge_ranks: HashMap<(String, String), usize>,
    byte_encoder: [char; 256],
    byte_decoder: HashMap<char, u8>,
    pattern: Regex,
}

/// GPT-2's reversible map from bytes to printable unicode code points.
pub fn bytes_to_unicode() -> [char; 256] {
    let mut printable: Vec<u32> = Vec::with_capacity(256);
    printable.extend(u32::from(b'!')..=u32::from(b'~'));
    printable.extend(0xA1..=0xAC);
    printable.extend(0xAE..=0xFF);
    let mut table = ['\0'; 256];
    let mut extra = 0u32;
    for b in 0..256u32 {
        let cp = if printable.contains(&b) {
            b
        } else {
            extra += 1;
            255 + extra
        };
        table[b as usize] = char::from_u32(cp).expect("valid code point");
    }
    table
}

impl BpeVocab {
    /// Load `vocab.json` and `merges.txt`.
    pub fn load_vocab(vocab_file: &Path, merges_file: &Path) -> Result<Self, TokenizerError> {
        let read = |p: &Path| {
            fs::read_to_string(p).map_err(|source| TokenizerError::Io {
                path: p.display().to_string(),
                source,
            })
        };
        Self::from_strs(&read(vocab_file)?, &read(merges_file)?)
    }

    /// Build from file contents.
    pub fn from_strs(vocab_json: &str, merges_txt: &str) -> Result<Self, TokenizerError> {
        let token_to_id: HashMap<String, u32> =
            serde_json::from_str(vocab_json).map_err(|e| TokenizerError::VocabJson(e.to_string()))?;
        let mut id_to_token = vec![None; token_to_id.len()];
        for (tok, &id) in &token_to_id {
            match id_to_token.get_mut(id as usize) {
                Some(slot) => *slot = Some(tok.clone()),
                None => {
                    return Err(TokenizerError::SparseIds {
                        len: token_to_id.len(),
                        missing: (0..token_to_id.len() as u32)
                            .find(|i| !token_to_id.values().any(|v| v == i))
                            .unwrap_or(0),
                    })
                }
            }
        }
        let id_to_token: Vec<String> = id_to_token
            .into_iter()
            .enumerate()
            .map(|(i, t)| {
                t.ok_or(TokenizerError::SparseIds {
                    len: token_to_id.len(),
                    missing: i as u32,
                })
            })
            .collect::<Result<_, _>>()?;

        let byte_encoder = bytes_to_unicode();
        for &c in &byte_encoder {
            if !token_to_id.contains_key(&c.to_string()) {
                return Err(TokenizerError::MissingByteToken(c));
            }
        }
        let byte_decoder = byte_encoder
            .iter()
            .enumerate()
            .map(|(b, &c)| (c, b as u8))
            .collect();

        let mut merge_ranks = HashMap::new();
        for (idx, line) in merges_txt.lines().enumerate() {
            let line_no = idx + 1;
            if idx == 0 && line.starts_with("#version") {
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            let (Some(left), Some(right), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(TokenizerError::MalformedMerge {
                    line: line_no,
                    content: line.to_string(),
                });
            };
            if left.is_empty() || right.is_empty() {
                return Err(TokenizerError::MalformedMerge {
                    line: line_no,
                    content: line.to_string(),
                });
            }
            let merged = format!("{left}{right}");
            if !token_to_id.contains_key(&merged) {
                return Err(TokenizerError::DanglingMerge {
                    line: line_no,
                    token: merged,
                });
            }
            let rank = merge_ranks.len();
            merge_ranks
                .entry((left.to_string(), right.to_string()))
                .or_insert(rank);
        }

        Ok(Self {
            token_to_id,
            id_to_token,
            merge_ranks,
            byte_encoder,
            byte_decoder,
            pattern: Regex::new(PRETOKENIZE_PATTERN).expect("static pattern compiles"),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn num_merges(&self) -> usize {
        self.merge_ranks.len()
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_str(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Id of `<|endoftext|>`, if present.
    pub fn end_of_text_id(&self) -> Option<u32> {
        self.token_id(END_OF_TEXT)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for piece in self.pretokenize(text) {
            let mapped: String = piece.bytes().map(|b| self.byte_encoder[b as usize]).collect();
            for sym in self.bpe(&mapped) {
                // Every symbol is either a byte char or a merge result, both
                // checked at load time.
                ids.push(self.token_to_id[&sym]);
            }
        }
        ids
    }

    /// Raw bytes for a token id sequence; unknown ids are skipped.
    pub fn decode_bytes(&self, ids: &[u32]) -> Vec<u8> {
        ids.iter()
            .filter_map(|&id| self.token_str(id))
            .flat_map(|t| t.chars())
            .filter_map(|c| self.byte_decoder.get(&c).copied())
            .collect()
    }

    /// Decode to text, replacing invalid UTF-8 sequences.
    pub fn decode(&self, ids: &[u32]) -> String {
        String::from_utf8_lossy(&self.decode_bytes(ids)).into_owned()
    }

    /// `true` iff `" " + word` encodes to exactly one token.
    pub fn is_single_token(&self, word: &str) -> bool {
        !word.is_empty() && self.encode(&format!(" {word}")).len() == 1
    }

    fn pretokenize<'t>(&self, text: &'t str) -> Vec<&'t str> {
        let mut pieces = Vec::new();
        let mut pos = 0;
        while pos < text.len() {
            match self.pattern.find_from_pos(text, pos) {
                Ok(Some(m)) if m.end() > m.start() => {
                    if m.start() > pos {
                        pieces.push(&text[pos..m.start()]);
                    }
                    pieces.push(m.as_str());
                    pos = m.end();
                }
                // The alternation covers every character class, so neither
                // arm is reachable for valid UTF-8; keep the rest as one piece
                // rather than dropping bytes.
                _ => {
                    pieces.push(&text[pos..]);
                    break;
                }
            }
        }
        pieces
    }

    fn bpe(&self, word: &str) -> Vec<String> {
        let mut symbols: Vec<String> = word.chars().map(String::from).collect();
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .filter_map(|w| {
                    self.merge_ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&r| (r, w[0].clone(), w[1].clone()))
                })
                .min_by_key(|(r, _, _)| *r);
            let Some((_, left, right)) = best else {
                break;
            };
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
                    merged.push(format!("{left}{right}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            symbols = merged;
        }
        symbols
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Vocab with all 256 byte tokens plus a few merges.
    fn toy() -> (String, String) {
        let enc = bytes_to_unicode();
        let mut map = serde_json::Map::new();
        for (i, c) in enc.iter().enumerate() {
            map.insert(c.to_string(), i.into());
        }
        for (i, t) in ["he", "ll", "hell", "hello", "Ġw"].iter().enumerate() {
            map.insert(t.to_string(), (256 + i).into());
        }
        let merges = "#version: 0.2\nh e\nl l\nhe ll\nhell o\nĠ w\n".to_string();
        (serde_json::Value::Object(map).to_string(), merges)
    }

    #[test]
    fn byte_table_is_a_bijection() {
        let t = bytes_to_unicode();
        let mut seen: Vec<char> = t.to_vec();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 256);
        assert_eq!(t[b' ' as usize], 'Ġ');
        assert_eq!(t[b'A' as usize], 'A');
    }

    #[test]
    fn toy_merges_apply_by_rank() {
        let (v, m) = toy();
        let vocab = BpeVocab::from_strs(&v, &m).unwrap();
        assert_eq!(vocab.num_merges(), 5);
        assert_eq!(vocab.encode("hello"), vec![259]);
        assert_eq!(vocab.encode(" w"), vec![260]);
        assert_eq!(vocab.decode(&vocab.encode("hello world")), "hello world");
        assert!(vocab.encode("").is_empty());
    }

    #[test]
    fn empty_merges_body_falls_back_to_bytes() {
        let (v, _) = toy();
        let vocab = BpeVocab::from_strs(&v, "#version: 0.2\n").unwrap();
        assert_eq!(vocab.num_merges(), 0);
        assert_eq!(vocab.encode("hello").len(), 5);
        assert!(!vocab.is_single_token("hi"));
        assert!(!vocab.is_single_token(""));
    }

    #[test]
    fn dangling_merge_is_a_load_error() {
        let (v, _) = toy();
        let err = BpeVocab::from_strs(&v, "#version: 0.2\nh e\nx y\n").unwrap_err();
        assert!(matches!(err, TokenizerError::DanglingMerge { line: 3, .. }), "{err}");
    }

    #[test]
    fn malformed_merge_reports_line() {
        let (v, _) = toy();
        let err = BpeVocab::from_strs(&v, "#version: 0.2\nh e\nhello\n").unwrap_err();
        assert!(matches!(err, TokenizerError::MalformedMerge { line: 3, .. }));
    }

    #[test]
    fn sparse_ids_are_rejected() {
        let err = BpeVocab::from_strs(r#"{"a": 0, "b": 5}"#, "").unwrap_err();
        assert!(matches!(err, TokenizerError::SparseIds { .. }));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err = BpeVocab::load_vocab(Path::new("/nonexistent/vocab.json"), Path::new("/x")).unwrap_err();
        assert!(matches!(err, TokenizerError::Io { .. }));
    }
}
