use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub type TokenId = u32;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";

/// How raw text is cut into pieces before vocabulary lookup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerMode {
    /// Whitespace-separated words, with digit runs, letter runs and `#` runs
    /// split apart and every other symbol standing alone. Newlines are kept
    /// as their own token.
    #[default]
    Word,
    /// One token per character, whitespace included.
    Char,
}

/// Ordered token alphabet with four reserved ids at the front.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    mode: TokenizerMode,
    tokens: Vec<String>,
    #[serde(skip)]
    id_of: HashMap<String, TokenId>,
}

impl Vocab {
    pub const PAD: TokenId = 0;
    pub const BOS: TokenId = 1;
    pub const EOS: TokenId = 2;
    pub const UNK: TokenId = 3;

    /// Builds a vocabulary from every piece found in `texts`. Pieces are
    /// sorted so the id assignment does not depend on input order.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>, mode: TokenizerMode) -> Self {
        let mut pieces = BTreeSet::new();
        for text in texts {
            for (piece, _) in pretokenize(text, mode) {
                pieces.insert(piece.to_string());
            }
        }
        Self::from_pieces(pieces, mode)
    }

    pub fn from_pieces(pieces: impl IntoIterator<Item = String>, mode: TokenizerMode) -> Self {
        let mut tokens: Vec<String> = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut seen: BTreeSet<String> = tokens.iter().cloned().collect();
        for p in pieces {
            if seen.insert(p.clone()) {
                tokens.push(p);
            }
        }
        let mut vocab = Vocab {
            mode,
            tokens,
            id_of: HashMap::new(),
        };
        vocab.rebuild_index();
        vocab
    }

    /// Restores the lookup table after deserialization.
    pub fn rebuild_index(&mut self) {
        self.id_of = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
    }

    pub fn mode(&self) -> TokenizerMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or(UNK_TOKEN)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: TokenId) -> bool {
        id <= Self::UNK
    }
}

/// Token ids plus the byte span of each token in the source text.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub offsets: Vec<(usize, usize)>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Appends a token that has no source text (e.g. end-of-sequence).
    pub fn push_synthetic(&mut self, id: TokenId) {
        let end = self.offsets.last().map(|o| o.1).unwrap_or(0);
        self.ids.push(id);
        self.offsets.push((end, end));
    }

    pub fn from_ids(ids: Vec<TokenId>) -> Self {
        let offsets = vec![(0, 0); ids.len()];
        TokenSequence { ids, offsets }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    Digit,
    Letter,
    Hash,
}

fn class_of(c: char) -> Option<Class> {
    if c.is_ascii_digit() {
        Some(Class::Digit)
    } else if c.is_alphabetic() {
        Some(Class::Letter)
    } else if c == '#' {
        Some(Class::Hash)
    } else {
        None
    }
}

/// Splits text into pieces with their byte spans, without consulting a vocabulary.
pub fn pretokenize(text: &str, mode: TokenizerMode) -> Vec<(&str, (usize, usize))> {
    let mut out = Vec::new();
    match mode {
        TokenizerMode::Char => {
            for (i, c) in text.char_indices() {
                let end = i + c.len_utf8();
                out.push((&text[i..end], (i, end)));
            }
        }
        TokenizerMode::Word => {
            let mut run: Option<(Class, usize)> = None;
            let flush = |run: &mut Option<(Class, usize)>, end: usize, out: &mut Vec<_>| {
                if let Some((_, start)) = run.take() {
                    out.push((&text[start..end], (start, end)));
                }
            };
            for (i, c) in text.char_indices() {
                let end = i + c.len_utf8();
                if c == '\n' {
                    flush(&mut run, i, &mut out);
                    out.push((&text[i..end], (i, end)));
                } else if c.is_whitespace() {
                    flush(&mut run, i, &mut out);
                } else if let Some(class) = class_of(c) {
                    match run {
                        Some((current, _)) if current == class => {}
                        _ => {
                            flush(&mut run, i, &mut out);
                            run = Some((class, i));
                        }
                    }
                } else {
                    flush(&mut run, i, &mut out);
                    out.push((&text[i..end], (i, end)));
                }
            }
            flush(&mut run, text.len(), &mut out);
        }
    }
    out
}

pub fn tokenize(text: &str, vocab: &Vocab) -> TokenSequence {
    let mut seq = TokenSequence::default();
    for (piece, span) in pretokenize(text, vocab.mode()) {
        seq.ids.push(vocab.id(piece).unwrap_or(Vocab::UNK));
        seq.offsets.push(span);
    }
    seq
}

fn join_pieces<'a>(pieces: impl IntoIterator<Item = &'a str>, mode: TokenizerMode) -> String {
    let mut out = String::new();
    match mode {
        TokenizerMode::Char => pieces.into_iter().for_each(|p| out.push_str(p)),
        TokenizerMode::Word => {
            let mut line_start = true;
            for p in pieces {
                if p == "\n" {
                    out.push('\n');
                    line_start = true;
                } else {
                    if !line_start {
                        out.push(' ');
                    }
                    out.push_str(p);
                    line_start = false;
                }
            }
        }
    }
    out
}

/// Renders ids back to text. Special tokens other than `<unk>` are dropped.
pub fn detokenize(ids: &[TokenId], vocab: &Vocab) -> String {
    let pieces = ids
        .iter()
        .filter(|&&id| !Vocab::is_special(id) || id == Vocab::UNK)
        .map(|&id| vocab.token(id));
    join_pieces(pieces, vocab.mode())
}

/// Canonical spacing of `text` under the word rule: one space between
/// pieces, none around newlines.
pub fn normalize(text: &str, mode: TokenizerMode) -> String {
    join_pieces(pretokenize(text, mode).into_iter().map(|(p, _)| p), mode)
}
