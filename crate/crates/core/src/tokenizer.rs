//! Byte-level BPE tokenizer with the CLIP vocabulary layout.
//!
//! Text is whitespace-collapsed and lowercased, split with the CLIP
//! pre-tokenizer pattern, mapped byte-by-byte onto printable code points,
//! and merged greedily by merge rank. The last symbol of every word carries
//! the `</w>` end-of-word marker.
//!
//! Vocabulary files hold one `token id` pair per line; merge files hold one
//! `left right` pair per line in priority order (a leading `#version` line
//! is skipped).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use regex::Regex;

use crate::error::{Error, Result};

const END_OF_WORD: &str = "</w>";
const START_NAMES: [&str; 2] = ["<start_of_text>", "<|startoftext|>"];
const END_NAMES: [&str; 2] = ["<end_of_text>", "<|endoftext|>"];

/// Fixed-length id sequence fed to the text encoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedPrompt {
    pub ids: Vec<u32>,
    pub eot_index: usize,
}

#[derive(Clone, Debug)]
pub struct TokenizerSpec {
    encoder: HashMap<String, u32>,
    ranks: HashMap<(String, String), usize>,
    byte_encoder: [char; 256],
    pattern: Regex,
    pub start_id: u32,
    pub end_id: u32,
    pub pad_id: u32,
    pub context_length: usize,
}

/// The reversible byte → code-point table used by byte-level BPE. Printable
/// Latin-1 bytes map to themselves; the rest map to `U+0100` onward.
pub fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let printable = |b: u32| (0x21..=0x7E).contains(&b) || (0xA1..=0xAC).contains(&b) || (0xAE..=0xFF).contains(&b);
    let mut next = 256u32;
    for b in 0..256u32 {
        table[b as usize] = if printable(b) {
            char::from_u32(b).expect("latin-1")
        } else {
            let c = char::from_u32(next).expect("valid code point");
            next += 1;
            c
        };
    }
    table
}

impl TokenizerSpec {
    pub fn from_files(vocab: &Path, merges: &Path, context_length: usize) -> Result<Self> {
        let v = fs::read_to_string(vocab).map_err(|e| Error::io(vocab, e))?;
        let m = fs::read_to_string(merges).map_err(|e| Error::io(merges, e))?;
        Self::from_strs(&v, &m, context_length)
    }

    pub fn from_strs(vocab: &str, merges: &str, context_length: usize) -> Result<Self> {
        let mut encoder = HashMap::new();
        for (lineno, line) in vocab.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (tok, id) = line
                .rsplit_once(' ')
                .ok_or_else(|| Error::Config(format!("vocab line {}: expected `token id`", lineno + 1)))?;
            let id: u32 = id
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("vocab line {}: bad id `{id}`", lineno + 1)))?;
            if encoder.insert(tok.to_string(), id).is_some() {
                return Err(Error::Config(format!("vocab line {}: duplicate token `{tok}`", lineno + 1)));
            }
        }
        let mut merge_list = Vec::new();
        for (lineno, line) in merges.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || (lineno == 0 && line.starts_with("#version")) {
                continue;
            }
            let (a, b) = line
                .split_once(' ')
                .ok_or_else(|| Error::Config(format!("merges line {}: expected `left right`", lineno + 1)))?;
            merge_list.push((a.to_string(), b.to_string()));
        }
        Self::build(encoder, merge_list, context_length)
    }

    /// Builds the CLIP layout in memory: 256 byte symbols in code-point
    /// order, their `</w>` forms, one token per merge, then the start and
    /// end tokens.
    pub fn with_merges(merges: Vec<(String, String)>, context_length: usize) -> Result<Self> {
        let mut bytes = bytes_to_unicode();
        bytes.sort_unstable();
        let mut vocab: Vec<String> = bytes.iter().map(|c| c.to_string()).collect();
        vocab.extend(bytes.iter().map(|c| format!("{c}{END_OF_WORD}")));
        vocab.extend(merges.iter().map(|(a, b)| format!("{a}{b}")));
        vocab.push(START_NAMES[0].to_string());
        vocab.push(END_NAMES[0].to_string());
        let encoder = vocab.into_iter().enumerate().map(|(i, t)| (t, i as u32)).collect();
        Self::build(encoder, merges, context_length)
    }

    fn build(encoder: HashMap<String, u32>, merges: Vec<(String, String)>, context_length: usize) -> Result<Self> {
        if context_length < 2 {
            return Err(Error::Config("context_length must be at least 2".into()));
        }
        let find = |names: &[&'static str]| names.iter().find_map(|n| encoder.get(*n).map(|&id| (*n, id)));
        let (start_name, start_id) =
            find(&START_NAMES).ok_or_else(|| Error::Config("vocab lacks a start-of-text token".into()))?;
        let (end_name, end_id) =
            find(&END_NAMES).ok_or_else(|| Error::Config("vocab lacks an end-of-text token".into()))?;

        let byte_encoder = bytes_to_unicode();
        for c in byte_encoder {
            for sym in [c.to_string(), format!("{c}{END_OF_WORD}")] {
                if !encoder.contains_key(&sym) {
                    return Err(Error::Config(format!("vocab lacks byte symbol `{sym}`")));
                }
            }
        }
        let n = encoder.len() as u32;
        if let Some((tok, id)) = encoder.iter().find(|(_, &id)| id >= n) {
            return Err(Error::Config(format!("token `{tok}` has id {id} outside dense range 0..{n}")));
        }
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, (a, b)) in merges.into_iter().enumerate() {
            let joined = format!("{a}{b}");
            if !encoder.contains_key(&joined) {
                return Err(Error::Config(format!("merge `{a} {b}` produces `{joined}`, absent from vocab")));
            }
            ranks.entry((a, b)).or_insert(rank);
        }
        let pattern = Regex::new(&format!(
            r"(?i){}|{}|'s|'t|'re|'ve|'m|'ll|'d|\p{{L}}+|\p{{N}}|[^\s\p{{L}}\p{{N}}]+",
            regex::escape(start_name),
            regex::escape(end_name)
        ))
        .expect("static pattern");
        Ok(TokenizerSpec {
            encoder,
            ranks,
            byte_encoder,
            pattern,
            start_id,
            end_id,
            pad_id: 0,
            context_length,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.encoder.len()
    }

    /// BPE ids for the text, without start/end tokens.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let cleaned = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        let mut ids = Vec::new();
        for m in self.pattern.find_iter(&cleaned) {
            let piece = m.as_str();
            if let Some(&id) = self.encoder.get(piece).filter(|_| {
                START_NAMES.contains(&piece) || END_NAMES.contains(&piece)
            }) {
                ids.push(id);
                continue;
            }
            let mapped: Vec<char> = piece.bytes().map(|b| self.byte_encoder[b as usize]).collect();
            for sym in self.bpe(&mapped) {
                match self.encoder.get(&sym) {
                    Some(&id) => ids.push(id),
                    None => ids.extend(self.byte_fallback(&sym)),
                }
            }
        }
        ids
    }

    /// Splits an unknown symbol into its single-character pieces, all of
    /// which are guaranteed to exist.
    fn byte_fallback(&self, sym: &str) -> Vec<u32> {
        let (body, eow) = match sym.strip_suffix(END_OF_WORD) {
            Some(b) => (b, true),
            None => (sym, false),
        };
        let chars: Vec<char> = body.chars().collect();
        chars
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let s = if eow && i + 1 == chars.len() {
                    format!("{c}{END_OF_WORD}")
                } else {
                    c.to_string()
                };
                self.encoder[&s]
            })
            .collect()
    }

    fn bpe(&self, chars: &[char]) -> Vec<String> {
        let mut word: Vec<String> = chars.iter().map(|c| c.to_string()).collect();
        if let Some(last) = word.last_mut() {
            last.push_str(END_OF_WORD);
        }
        while word.len() > 1 {
            let best = word
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0].clone(), p[1].clone())).map(|&r| (r, p[0].clone(), p[1].clone())))
                .min_by_key(|(r, _, _)| *r);
            let Some((_, first, second)) = best else { break };
            let mut merged = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && word[i] == first && word[i + 1] == second {
                    merged.push(format!("{first}{second}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut word[i]));
                    i += 1;
                }
            }
            word = merged;
        }
        word
    }

    /// Start token, BPE ids, end token, padded with `pad_id`. Over-long
    /// input is truncated with the end token kept in the last slot.
    pub fn tokenize(&self, text: &str) -> TokenizedPrompt {
        let mut ids = Vec::with_capacity(self.context_length);
        ids.push(self.start_id);
        ids.extend(self.encode(text));
        ids.push(self.end_id);
        if ids.len() > self.context_length {
            ids.truncate(self.context_length);
            *ids.last_mut().expect("non-empty") = self.end_id;
        }
        let eot_index = ids.len() - 1;
        ids.resize(self.context_length, self.pad_id);
        TokenizedPrompt { ids, eot_index }
    }
}
