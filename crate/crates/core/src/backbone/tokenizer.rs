//! Tokenizers for the text tower.
//!
//! The tiny backbone uses a fixed word vocabulary; pretrained CLIP weights use
//! the byte-level BPE scheme from the original release, driven by its merges
//! file.

use std::collections::HashMap;
use std::path::Path;

use regex::Regex;

use crate::error::{Error, Result};

const BUILTIN_WORDS: &[&str] = &[
    "<pad>",
    "<sos>",
    "<eot>",
    "abnormal",
    "normal",
    "damaged",
    "flawless",
    "a",
    "an",
    "the",
    "photo",
    "of",
    "object",
    "texture",
    "surface",
    "image", // generic
    "bottle",
    "cable",
    "capsule",
    "carpet",
    "grid",
    "hazelnut",
    "leather",
    "metal",
    "nut",
    "pill",
    "screw",
    "tile",
    "toothbrush",
    "transistor",
    "wood",
    "zipper", // MVTec-AD
    "candle",
    "capsules",
    "cashew",
    "chewinggum",
    "chewing",
    "gum",
    "fryum",
    "macaroni1",
    "macaroni2",
    "pcb1",
    "pcb2",
    "pcb3",
    "pcb4",
    "pipe",
    "macaroni",
    "pcb", // VisA
    "fabric",
    "mesh",
    "grain",
    "weave",
    "noise",
    "synthetic",
    "stripes",
    "dots",
    "marble",
    "cloth",
    "sand",
    "paper",
    "stone",
    "plastic",
    "glass",
    "concrete", // synthetic / misc
];

pub(crate) fn builtin_vocab_len() -> usize {
    BUILTIN_WORDS.len()
}

/// Whitespace/underscore word tokenizer over a closed vocabulary.
#[derive(Debug, Clone)]
pub struct WordVocab {
    ids: HashMap<String, u32>,
}

impl WordVocab {
    pub fn builtin() -> Self {
        Self::new(BUILTIN_WORDS.iter().copied())
    }

    /// The first three words are taken as pad, start and end markers.
    pub fn new<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let ids = words
            .into_iter()
            .enumerate()
            .map(|(i, w)| (w.to_string(), i as u32))
            .collect();
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn encode(&self, text: &str, class: &str) -> Result<Vec<u32>> {
        text.split(|c: char| c.is_whitespace() || c == '_')
            .filter(|w| !w.is_empty())
            .map(|w| {
                let w = w.to_lowercase();
                self.ids.get(&w).copied().ok_or_else(|| Error::Tokenizer {
                    class: class.to_string(),
                    token: w,
                })
            })
            .collect()
    }
}

/// CLIP byte-level BPE.
#[derive(Debug, Clone)]
pub struct BpeTokenizer {
    encoder: HashMap<String, u32>,
    ranks: HashMap<(String, String), usize>,
    byte_encoder: [char; 256],
    pattern: Regex,
    sot: u32,
    eot: u32,
}

fn bytes_to_unicode() -> [char; 256] {
    let mut printable: Vec<u32> = (b'!' as u32..=b'~' as u32).collect();
    printable.extend(0xA1..=0xAC);
    printable.extend(0xAE..=0xFF);
    let mut table = ['\0'; 256];
    let mut extra = 0;
    for b in 0..256u32 {
        let c = if printable.contains(&b) {
            b
        } else {
            extra += 1;
            255 + extra
        };
        table[b as usize] = char::from_u32(c).expect("valid codepoint");
    }
    table
}

impl BpeTokenizer {
    /// Reads an uncompressed `bpe_simple_vocab_16e6.txt`-style merges file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_merges(&text, 49152 - 256 - 2)
    }

    /// Builds the vocabulary from merges text (first line is a header).
    pub fn from_merges(text: &str, max_merges: usize) -> Result<Self> {
        let merges: Vec<(String, String)> = text
            .lines()
            .skip(1)
            .take(max_merges)
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let mut it = l.split_whitespace();
                match (it.next(), it.next()) {
                    (Some(a), Some(b)) => Ok((a.to_string(), b.to_string())),
                    _ => Err(Error::config(format!("malformed merge line {l:?}"))),
                }
            })
            .collect::<Result<_>>()?;
        let byte_encoder = bytes_to_unicode();
        let mut vocab: Vec<String> = byte_encoder.iter().map(|c| c.to_string()).collect();
        let with_end: Vec<String> = vocab.iter().map(|v| format!("{v}</w>")).collect();
        vocab.extend(with_end);
        vocab.extend(merges.iter().map(|(a, b)| format!("{a}{b}")));
        vocab.push("<|startoftext|>".into());
        vocab.push("<|endoftext|>".into());
        let encoder: HashMap<String, u32> = vocab
            .into_iter()
            .enumerate()
            .map(|(i, v)| (v, i as u32))
            .collect();
        let ranks = merges
            .into_iter()
            .enumerate()
            .map(|(i, m)| (m, i))
            .collect();
        let pattern = Regex::new(
            r"(?i)<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|\p{L}+|\p{N}|[^\s\p{L}\p{N}]+",
        )
        .expect("static regex");
        let sot = encoder["<|startoftext|>"];
        let eot = encoder["<|endoftext|>"];
        Ok(Self {
            encoder,
            ranks,
            byte_encoder,
            pattern,
            sot,
            eot,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.encoder.len()
    }

    fn bpe(&self, token: &str) -> Vec<String> {
        let mut word: Vec<String> = token.chars().map(|c| c.to_string()).collect();
        if let Some(last) = word.last_mut() {
            last.push_str("</w>");
        }
        loop {
            let best = word
                .windows(2)
                .enumerate()
                .filter_map(|(i, p)| {
                    self.ranks
                        .get(&(p[0].clone(), p[1].clone()))
                        .map(|&r| (r, i))
                })
                .min();
            let Some((_, at)) = best else { break };
            let pair = (word[at].clone(), word[at + 1].clone());
            let mut merged = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && word[i] == pair.0 && word[i + 1] == pair.1 {
                    merged.push(format!("{}{}", pair.0, pair.1));
                    i += 2;
                } else {
                    merged.push(word[i].clone());
                    i += 1;
                }
            }
            word = merged;
            if word.len() == 1 {
                break;
            }
        }
        word
    }

    fn encode(&self, text: &str, class: &str) -> Result<Vec<u32>> {
        let cleaned = text
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ")
            .to_lowercase();
        let mut ids = Vec::new();
        for m in self.pattern.find_iter(&cleaned) {
            let mapped: String = m
                .as_str()
                .bytes()
                .map(|b| self.byte_encoder[b as usize])
                .collect();
            for piece in self.bpe(&mapped) {
                let id = self.encoder.get(&piece).ok_or_else(|| Error::Tokenizer {
                    class: class.to_string(),
                    token: piece.clone(),
                })?;
                ids.push(*id);
            }
        }
        Ok(ids)
    }
}

#[derive(Debug, Clone)]
pub enum Tokenizer {
    Word(WordVocab),
    Bpe(BpeTokenizer),
}

impl Tokenizer {
    pub fn builtin() -> Self {
        Tokenizer::Word(WordVocab::builtin())
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Tokenizer::Word(v) => v.len(),
            Tokenizer::Bpe(b) => b.vocab_size(),
        }
    }

    fn markers(&self) -> (u32, u32) {
        match self {
            Tokenizer::Word(_) => (1, 2),
            Tokenizer::Bpe(b) => (b.sot, b.eot),
        }
    }

    /// Token ids `[start, text..., end]`. `class` is only used in error messages.
    pub fn encode_prompt(&self, text: &str, class: &str) -> Result<Vec<u32>> {
        let (sot, eot) = self.markers();
        let body = match self {
            Tokenizer::Word(v) => v.encode(text, class)?,
            Tokenizer::Bpe(b) => b.encode(text, class)?,
        };
        let mut ids = Vec::with_capacity(body.len() + 2);
        ids.push(sot);
        ids.extend(body);
        ids.push(eot);
        Ok(ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn word_vocab_splits_underscores() {
        let t = Tokenizer::builtin();
        let ids = t.encode_prompt("abnormal metal_nut", "metal_nut").unwrap();
        assert_eq!(ids.len(), 5);
        assert_eq!(ids[0], 1);
        assert_eq!(*ids.last().unwrap(), 2);
    }

    #[test]
    fn unknown_word_names_the_class() {
        let t = Tokenizer::builtin();
        let err = t.encode_prompt("abnormal gizmo", "gizmo").unwrap_err();
        match err {
            Error::Tokenizer { class, token } => {
                assert_eq!(class, "gizmo");
                assert_eq!(token, "gizmo");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn byte_table_is_a_bijection() {
        let t = bytes_to_unicode();
        let mut seen: Vec<char> = t.to_vec();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 256);
        assert_eq!(t[b'a' as usize], 'a');
        assert_eq!(t[b' ' as usize], 'Ġ');
    }

    #[test]
    fn bpe_applies_merges_in_rank_order() {
        let merges = "#version: 0.2\nb o\nbo t\nbot t\nl e</w>\nt le</w>\n";
        let bpe = BpeTokenizer::from_merges(merges, 100).unwrap();
        assert_eq!(bpe.bpe("bottle"), vec!["bott", "le</w>"]);
        let t = Tokenizer::Bpe(bpe.clone());
        let ids = t.encode_prompt("Bottle", "bottle").unwrap();
        assert_eq!(ids.first(), Some(&bpe.sot));
        assert_eq!(ids.last(), Some(&bpe.eot));
        assert_eq!(ids.len(), 4);
        assert_eq!(bpe.vocab_size(), 512 + 5 + 2);
    }
}
