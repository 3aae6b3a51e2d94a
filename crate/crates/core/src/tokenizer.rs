//! Word-level vocabulary with fixed special ids and one language token per
//! language.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::synthlang::CorpusLine;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const EOS: TokenId = 1;
pub const UNK: TokenId = 2;
pub const EXTRACT: TokenId = 3;

const SPECIALS: [&str; 4] = ["<pad>", "</s>", "<unk>", "<extract>"];

pub fn lang_token_name(lang_id: &str) -> String {
    format!("<2{lang_id}>")
}

fn is_lang_token(tok: &str) -> bool {
    tok.starts_with("<2") && tok.ends_with('>') && tok.len() > 3
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    langs: Vec<(String, TokenId)>,
}

impl Vocabulary {
    /// Builds a vocabulary from corpora. Language tokens follow the specials in
    /// order of first appearance, then words in order of first appearance.
    pub fn build(corpora: &[&[CorpusLine]]) -> Result<Self> {
        if corpora.iter().all(|c| c.is_empty()) {
            return Err(Error::NoData("cannot build a vocabulary from empty corpora".into()));
        }
        let mut langs: Vec<String> = Vec::new();
        for line in corpora.iter().flat_map(|c| c.iter()) {
            if !langs.contains(&line.lang_id) {
                langs.push(line.lang_id.clone());
            }
        }
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(langs.iter().map(|l| lang_token_name(l)));
        let mut seen: HashMap<String, TokenId> = HashMap::new();
        for line in corpora.iter().flat_map(|c| c.iter()) {
            for w in line.text.split_whitespace() {
                if !seen.contains_key(w) {
                    seen.insert(w.to_string(), 0);
                    tokens.push(w.to_string());
                }
            }
        }
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Format(format!("vocabulary must start with special token {s} at id {i}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        let mut langs = Vec::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Format(format!("invalid token at id {i}")));
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Format(format!("duplicate token `{t}`")));
            }
            if i >= SPECIALS.len() && is_lang_token(t) {
                langs.push((t[2..t.len() - 1].to_string(), i as TokenId));
            }
        }
        Ok(Vocabulary { tokens, index, langs })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn lang_token(&self, lang_id: &str) -> Result<TokenId> {
        self.langs
            .iter()
            .find(|(l, _)| l == lang_id)
            .map(|(_, id)| *id)
            .ok_or_else(|| Error::UnknownLanguage(lang_id.to_string()))
    }

    pub fn languages(&self) -> Vec<String> {
        self.langs.iter().map(|(l, _)| l.clone()).collect()
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        (id as usize) < SPECIALS.len() || self.langs.iter().any(|(_, t)| *t == id)
    }

    /// Whitespace-split encoding; unknown words and special-token spellings map to UNK.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .map(|w| match self.index.get(w) {
                Some(&id) if !self.is_special(id) => id,
                _ => UNK,
            })
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = self.token(id).ok_or(Error::TokenOutOfRange { id, size: self.len() })?;
            words.push(tok);
        }
        Ok(words.join(" "))
    }

    /// Decodes generated ids, stopping at EOS and skipping other specials.
    pub fn decode_output(&self, ids: &[TokenId]) -> Result<String> {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            if id == EOS {
                break;
            }
            let tok = self.token(id).ok_or(Error::TokenOutOfRange { id, size: self.len() })?;
            if !self.is_special(id) {
                words.push(tok);
            }
        }
        Ok(words.join(" "))
    }

    /// One token per line; line number = id.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// SHA-256 of the serialized vocabulary, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(text: &str, lang: &str) -> CorpusLine {
        CorpusLine { text: text.into(), lang_id: lang.into(), attr_value: "positive".into(), line_id: 0 }
    }

    fn vocab() -> Vocabulary {
        let a = vec![line("alpha beta gamma", "aa"), line("beta delta", "aa")];
        let b = vec![line("omega psi", "bb")];
        Vocabulary::build(&[&a, &b]).unwrap()
    }

    #[test]
    fn specials_are_fixed() {
        let v = vocab();
        assert_eq!(v.token(EXTRACT), Some("<extract>"));
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.lang_token("aa").unwrap(), 4);
        assert_eq!(v.lang_token("bb").unwrap(), 5);
        assert!(v.lang_token("cc").is_err());
    }

    #[test]
    fn build_is_deterministic() {
        assert_eq!(vocab(), vocab());
        assert!(Vocabulary::build(&[&[]]).is_err());
    }

    #[test]
    fn encode_decode_round_trip() {
        let v = vocab();
        let ids = v.encode("alpha  delta   omega");
        assert_eq!(v.decode(&ids).unwrap(), "alpha delta omega");
    }

    #[test]
    fn unknown_words_and_special_spellings_become_unk() {
        let v = vocab();
        assert_eq!(v.encode("alpha zzz <extract> <2aa>"), vec![v.id("alpha").unwrap(), UNK, UNK, UNK]);
    }

    #[test]
    fn decode_out_of_range_errors() {
        assert!(matches!(vocab().decode(&[99999]), Err(Error::TokenOutOfRange { .. })));
    }

    #[test]
    fn text_round_trip_and_hash() {
        let v = vocab();
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
        assert_eq!(back.languages(), vec!["aa".to_string(), "bb".to_string()]);
    }

    proptest! {
        #[test]
        fn encode_never_emits_specials(words in proptest::collection::vec("[a-z<>2/]{1,8}", 0..20)) {
            let v = vocab();
            let text = words.join(" ");
            let ids = v.encode(&text);
            prop_assert_eq!(ids.len(), text.split_whitespace().count());
            for id in ids {
                prop_assert!(id == UNK || !v.is_special(id));
            }
        }
    }
}
