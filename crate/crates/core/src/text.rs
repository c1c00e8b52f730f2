//! Word-level vocabulary for the synthetic caption grammar, with a
//! per-character fallback for anything outside it.

use std::collections::HashMap;

use crate::embedding::SpecialIds;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const IMAGE: &str = "<image>";
pub const UNK: &str = "<unk>";

/// Words of the procedural caption/description/instruction grammar.
pub const GRAMMAR_WORDS: &[&str] = &[
    "'s", "caption", ":", "?", ".", ",", "describe", "the", "image", "there", "is", "are", "a", "at", "and",
    "how", "many", "what", "color", "shape", "where", "nothing", "object", "objects", "in", "it", "red",
    "green", "blue", "yellow", "square", "circle", "cross", "squares", "circles", "crosses", "top", "bottom",
    "left", "right", "small", "large", "0", "1", "2", "3", "4",
];

#[derive(Clone, Debug)]
pub struct TextVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    char_base: usize,
    size: usize,
}

impl TextVocab {
    /// Fixed total size of the textual embedding table.
    pub const SIZE: usize = 256;

    pub fn standard() -> Self {
        let mut tokens: Vec<String> = [PAD, BOS, EOS, IMAGE, UNK].iter().map(|s| s.to_string()).collect();
        tokens.extend(GRAMMAR_WORDS.iter().map(|s| s.to_string()));
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let char_base = tokens.len();
        // Printable ASCII, one id per character.
        tokens.extend((0x21u8..=0x7e).map(|c| (c as char).to_string()));
        assert!(tokens.len() <= Self::SIZE);
        Self {
            tokens,
            index,
            char_base,
            size: Self::SIZE,
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn special(&self) -> SpecialIds {
        SpecialIds {
            pad: 0,
            bos: 1,
            eos: 2,
            image: 3,
        }
    }

    pub fn eos(&self) -> usize {
        self.special().eos
    }

    pub fn image(&self) -> usize {
        self.special().image
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    fn char_id(&self, c: char) -> usize {
        match c {
            '!'..='~' => self.char_base + (c as usize - 0x21),
            _ => self.index[UNK],
        }
    }

    fn push_word(&self, word: &str, out: &mut Vec<usize>) {
        match self.id(word) {
            Some(id) => out.push(id),
            None => out.extend(word.chars().map(|c| self.char_id(c))),
        }
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        let mut rest = text;
        while let Some(c) = rest.chars().next() {
            if c.is_whitespace() {
                rest = &rest[c.len_utf8()..];
            } else if let Some(r) = rest.strip_prefix(IMAGE) {
                out.push(self.image());
                rest = r;
            } else if let Some(r) = rest.strip_prefix("'s") {
                out.push(self.index["'s"]);
                rest = r;
            } else if c.is_ascii_alphanumeric() {
                let end = rest.find(|ch: char| !ch.is_ascii_alphanumeric()).unwrap_or(rest.len());
                self.push_word(&rest[..end], &mut out);
                rest = &rest[end..];
            } else {
                self.push_word(&rest[..c.len_utf8()], &mut out);
                rest = &rest[c.len_utf8()..];
            }
        }
        out
    }

    /// Space-joined words; runs of fallback characters are glued back together.
    /// Decoding stops at the first end-of-sequence id.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        let mut prev_char = false;
        for &id in ids {
            if id == self.eos() {
                break;
            }
            let tok = self.tokens.get(id).map_or(UNK, String::as_str);
            let is_char = id >= self.char_base && id < self.tokens.len();
            if !out.is_empty() && !(is_char && prev_char) {
                out.push(' ');
            }
            out.push_str(tok);
            prev_char = is_char;
        }
        out
    }
}

impl Default for TextVocab {
    fn default() -> Self {
        Self::standard()
    }
}
