//! Rule-based tokenizer: whitespace splitting with every punctuation or
//! symbol character isolated as its own token. Offsets are character
//! (Unicode scalar) indices into the source text.

use std::collections::HashMap;

use serde::Serialize;

pub type TokenId = u32;

/// Reserved marker tokens. Their ids are their discriminants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum Special {
    Prompt = 0,
    Entity = 1,
    Child = 2,
    Label = 3,
    Sep = 4,
    Unk = 5,
    Pad = 6,
}

impl Special {
    pub const ALL: [Special; 7] = [
        Special::Prompt,
        Special::Entity,
        Special::Child,
        Special::Label,
        Special::Sep,
        Special::Unk,
        Special::Pad,
    ];

    pub fn id(self) -> TokenId {
        self as TokenId
    }

    pub fn surface(self) -> &'static str {
        match self {
            Special::Prompt => "[P]",
            Special::Entity => "[E]",
            Special::Child => "[C]",
            Special::Label => "[L]",
            Special::Sep => "[SEP]",
            Special::Unk => "[UNK]",
            Special::Pad => "[PAD]",
        }
    }
}

pub const NUM_SPECIAL: usize = Special::ALL.len();

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
}

/// One surface token of a source string.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Piece<'a> {
    pub text: &'a str,
    pub char_start: usize,
    pub char_end: usize,
    pub byte_start: usize,
    pub byte_end: usize,
}

fn is_isolated(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Splits `text` into surface pieces under the tokenization rule.
pub fn pieces<'a>(text: &'a str) -> Vec<Piece<'a>> {
    let mut out = Vec::new();
    // (char_start, byte_start) of the word currently being accumulated
    let mut word: Option<(usize, usize)> = None;
    let mut char_idx = 0;
    let flush = |word: &mut Option<(usize, usize)>, out: &mut Vec<Piece<'a>>, ci, bi| {
        if let Some((cs, bs)) = word.take() {
            out.push(Piece {
                text: &text[bs..bi],
                char_start: cs,
                char_end: ci,
                byte_start: bs,
                byte_end: bi,
            });
        }
    };
    for (byte_idx, c) in text.char_indices() {
        if c.is_whitespace() {
            flush(&mut word, &mut out, char_idx, byte_idx);
        } else if is_isolated(c) {
            flush(&mut word, &mut out, char_idx, byte_idx);
            let end = byte_idx + c.len_utf8();
            out.push(Piece {
                text: &text[byte_idx..end],
                char_start: char_idx,
                char_end: char_idx + 1,
                byte_start: byte_idx,
                byte_end: end,
            });
        } else if word.is_none() {
            word = Some((char_idx, byte_idx));
        }
        char_idx += 1;
    }
    flush(&mut word, &mut out, char_idx, text.len());
    out
}

impl Vocabulary {
    /// Specials plus the `max_size - 7` most frequent corpus tokens, ties
    /// broken lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Self {
        assert!(max_size > NUM_SPECIAL, "max_size must leave room for text tokens");
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for doc in corpus {
            for p in pieces(doc.as_ref()) {
                *counts.entry(p.text).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - NUM_SPECIAL);
        Self::from_tokens(
            Special::ALL
                .iter()
                .map(|s| s.surface().to_string())
                .chain(ranked.into_iter().map(|(t, _)| t.to_string()))
                .collect(),
        )
        .expect("built vocabulary is well formed")
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(id_to_token: Vec<String>) -> Result<Self, String> {
        if id_to_token.len() < NUM_SPECIAL {
            return Err("vocabulary shorter than the special-token block".into());
        }
        for s in Special::ALL {
            if id_to_token[s.id() as usize] != s.surface() {
                return Err(format!("id {} is not {}", s.id(), s.surface()));
            }
        }
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, t) in id_to_token.iter().enumerate() {
            if token_to_id.insert(t.clone(), i as TokenId).is_some() {
                return Err(format!("duplicate vocabulary entry {t:?}"));
            }
        }
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Id for a text token; [`Special::Unk`] when absent. Never yields a
    /// special id for text, since special surfaces cannot be produced by
    /// [`pieces`].
    pub fn text_id(&self, token: &str) -> TokenId {
        match self.id(token) {
            Some(id) if id as usize >= NUM_SPECIAL => id,
            _ => Special::Unk.id(),
        }
    }

    pub fn tokenize(&self, text: &str) -> TokenSeq {
        let ps = pieces(text);
        TokenSeq {
            ids: ps.iter().map(|p| self.text_id(p.text)).collect(),
            offsets: ps.iter().map(|p| (p.char_start, p.char_end)).collect(),
            byte_offsets: ps.iter().map(|p| (p.byte_start, p.byte_end)).collect(),
            source: text.to_string(),
        }
    }

    /// Ids for a prompt fragment (label, name, description).
    pub fn encode_words(&self, text: &str) -> Vec<TokenId> {
        pieces(text).iter().map(|p| self.text_id(p.text)).collect()
    }
}

/// Tokenized text with exact offsets back into `source`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TokenSeq {
    pub ids: Vec<TokenId>,
    /// Character offsets `(start, end)` per token, end exclusive.
    pub offsets: Vec<(usize, usize)>,
    #[serde(skip)]
    byte_offsets: Vec<(usize, usize)>,
    pub source: String,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Surface text of the inclusive token range `first..=last`, sliced
    /// from the source so interior whitespace is preserved.
    pub fn surface(&self, first: usize, last: usize) -> &str {
        let start = self.byte_offsets[first].0;
        let end = self.byte_offsets[last].1;
        &self.source[start..end]
    }

    pub fn char_span(&self, first: usize, last: usize) -> (usize, usize) {
        (self.offsets[first].0, self.offsets[last].1)
    }
}

/// `&source[start..end]` with character indices.
pub fn slice_chars(source: &str, start: usize, end: usize) -> Option<&str> {
    if start > end {
        return None;
    }
    let mut indices = source.char_indices().map(|(b, _)| b).chain([source.len()]);
    let b_start = indices.nth(start)?;
    let b_end = if end == start {
        b_start
    } else {
        indices.nth(end - start - 1)?
    };
    Some(&source[b_start..b_end])
}
