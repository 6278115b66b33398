use std::collections::{BTreeMap, HashMap};

use crate::error::{GlotError, Result};

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const UNK_ID: usize = 4;

/// Surface forms of the reserved ids, in id order.
pub const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<sep>", "<unk>"];

/// Token ↔ id map. Ids 0..5 are reserved; corpus tokens follow in
/// (descending frequency, ascending token) order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from whitespace-tokenized lines.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(lines: I) -> Self {
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        for line in lines {
            for tok in line.split_whitespace() {
                if !RESERVED.contains(&tok) {
                    *freq.entry(tok).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = RESERVED.iter().copied().chain(ranked.into_iter().map(|(t, _)| t)).map(String::from).collect();
        Self::from_tokens(tokens).expect("reserved and corpus tokens are distinct")
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()].iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(GlotError::format("vocabulary", "reserved tokens missing or out of order"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(GlotError::format("vocabulary", format!("invalid token {t:?} at id {i}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(GlotError::format("vocabulary", format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S], add_bos_eos: bool) -> Vec<usize> {
        let body = tokens.iter().map(|t| self.id(t.as_ref()));
        if add_bos_eos {
            std::iter::once(BOS_ID).chain(body).chain(std::iter::once(EOS_ID)).collect()
        } else {
            body.collect()
        }
    }

    pub fn encode_line(&self, line: &str, add_bos_eos: bool) -> Vec<usize> {
        let toks: Vec<&str> = line.split_whitespace().collect();
        self.encode(&toks, add_bos_eos)
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&i| {
                self.token(i)
                    .map(String::from)
                    .ok_or_else(|| GlotError::Data(format!("id {i} outside vocabulary of {}", self.len())))
            })
            .collect()
    }

    /// Decodes and drops reserved tokens; the form scored by BLEU.
    pub fn decode_content(&self, ids: &[usize]) -> Result<Vec<String>> {
        Ok(self
            .decode(ids)?
            .into_iter()
            .zip(ids)
            .filter(|(_, &i)| i >= RESERVED.len() || i == UNK_ID)
            .map(|(t, _)| t)
            .collect())
    }
}
