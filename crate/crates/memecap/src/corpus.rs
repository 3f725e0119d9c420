//! Dataset ingestion: tokenization, vocabulary construction, and the
//! line-oriented TSV formats for datasets and vocabularies.
//!
//! Captions are lowercased and split into word tokens (maximal runs of
//! letters, digits, and apostrophes) and single-character punctuation
//! tokens. Rare words fall below `min_count` and encode to UNK; captions
//! with more than two interior UNKs are dropped.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const START_TOKEN: &str = "<s>";
pub const END_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";

pub const START_ID: TokenId = 0;
pub const END_ID: TokenId = 1;
pub const UNK_ID: TokenId = 2;

pub const DEFAULT_MIN_COUNT: u64 = 3;

/// Maximum interior UNK tokens a caption may carry and still be kept.
pub const MAX_UNKS: usize = 2;

/// Characters that become standalone tokens. Symbols outside this set and
/// outside word characters are separators and never appear in output.
const PUNCTUATION: &[char] = &['.', ',', '!', '?', '\'', '"', ';', ':', '(', ')', '-'];

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '\''
}

/// Split lowercased text into word and punctuation tokens.
///
/// A run of word characters containing at least one letter or digit is one
/// word token; a run of apostrophes alone is emitted as individual
/// punctuation tokens.
pub fn tokenize(raw: &str) -> Vec<String> {
    let lowered = raw.to_lowercase();
    let mut tokens = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, tokens: &mut Vec<String>| {
        if word.is_empty() {
            return;
        }
        if word.chars().all(|c| c == '\'') {
            for _ in 0..word.chars().count() {
                tokens.push("'".to_string());
            }
        } else {
            tokens.push(std::mem::take(word));
        }
        word.clear();
    };
    for c in lowered.chars() {
        if is_word_char(c) {
            word.push(c);
        } else {
            flush(&mut word, &mut tokens);
            if PUNCTUATION.contains(&c) {
                tokens.push(c.to_string());
            }
        }
    }
    flush(&mut word, &mut tokens);
    tokens
}

/// Token table with START/END/UNK at fixed ids 0, 1, 2. Non-special ids
/// are ordered by descending corpus frequency, ties broken lexicographically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
    counts: Vec<u64>,
}

impl Vocabulary {
    /// Count tokens across `captions` and keep those seen at least
    /// `min_count` times. Specials are always present with count 0.
    pub fn build(captions: &[Vec<String>], min_count: u64) -> Vocabulary {
        let mut freq: HashMap<&str, u64> = HashMap::new();
        for caption in captions {
            for token in caption {
                *freq.entry(token).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(&str, u64)> = freq
            .into_iter()
            .filter(|&(_, n)| n >= min_count)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut vocab = Vocabulary::specials_only();
        for (token, n) in kept {
            vocab.push(token.to_string(), n);
        }
        vocab
    }

    /// Just the three special tokens, each with count 0.
    pub fn specials_only() -> Vocabulary {
        let mut vocab = Vocabulary {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
            counts: Vec::new(),
        };
        for special in [START_TOKEN, END_TOKEN, UNK_TOKEN] {
            vocab.push(special.to_string(), 0);
        }
        vocab
    }

    fn push(&mut self, token: String, count: u64) {
        let id = self.id_to_token.len();
        self.token_to_id.insert(token.clone(), id);
        self.id_to_token.push(token);
        self.counts.push(count);
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    /// Id for `token`, falling back to UNK when out of vocabulary.
    pub fn id_or_unk(&self, token: &str) -> TokenId {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.id_to_token[id]
    }

    pub fn count(&self, id: TokenId) -> u64 {
        self.counts[id]
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    /// Tokens in id order.
    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.id_to_token.iter().map(String::as_str)
    }

    /// Serialize as `token \t count` lines in id order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (token, count) in self.id_to_token.iter().zip(&self.counts) {
            let _ = writeln!(out, "{token}\t{count}");
        }
        out
    }

    /// Parse the `to_text` format. The first three entries must be the
    /// special tokens in their fixed order.
    pub fn from_text(text: &str, origin: &str) -> Result<Vocabulary> {
        let mut vocab = Vocabulary {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
            counts: Vec::new(),
        };
        for (index, line) in text.lines().enumerate() {
            let number = index + 1;
            let (token, count) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(origin, number, "expected `token<TAB>count`"))?;
            let count: u64 = count.trim().parse().map_err(|_| {
                Error::parse(origin, number, format!("invalid count {count:?}"))
            })?;
            if vocab.token_to_id.contains_key(token) {
                return Err(Error::parse(
                    origin,
                    number,
                    format!("duplicate token {token:?}"),
                ));
            }
            vocab.push(token.to_string(), count);
        }
        let specials = [START_TOKEN, END_TOKEN, UNK_TOKEN];
        let head: Vec<&str> = vocab.id_to_token.iter().take(3).map(String::as_str).collect();
        if head != specials {
            return Err(Error::Format {
                what: "vocabulary",
                msg: format!("first three entries must be {specials:?}, found {head:?}"),
            });
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io_at(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        Vocabulary::from_text(&text, &path.display().to_string())
    }
}

/// Encode caption tokens as ids bracketed by START/END. Returns the ids and
/// the number of interior UNKs (START/END are never UNK).
pub fn encode_caption(tokens: &[String], vocab: &Vocabulary) -> (Vec<TokenId>, usize) {
    let mut ids = Vec::with_capacity(tokens.len() + 2);
    ids.push(START_ID);
    let mut unk_count = 0;
    for token in tokens {
        let id = vocab.id_or_unk(token);
        if id == UNK_ID {
            unk_count += 1;
        }
        ids.push(id);
    }
    ids.push(END_ID);
    (ids, unk_count)
}

/// Encode label tokens as bare ids, OOV mapping to UNK. No bracketing.
pub fn encode_words(tokens: &[String], vocab: &Vocabulary) -> Vec<TokenId> {
    tokens.iter().map(|t| vocab.id_or_unk(t)).collect()
}

/// Surface forms for a sequence of ids.
pub fn decode(ids: &[TokenId], vocab: &Vocabulary) -> Vec<String> {
    ids.iter().map(|&id| vocab.token(id).to_string()).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemeExample {
    pub image_id: String,
    pub label_ids: Vec<TokenId>,
    /// Bracketed by START/END.
    pub caption_ids: Vec<TokenId>,
}

impl MemeExample {
    /// UNKs strictly between START and END.
    pub fn interior_unk_count(&self) -> usize {
        let interior = &self.caption_ids[1..self.caption_ids.len() - 1];
        interior.iter().filter(|&&id| id == UNK_ID).count()
    }
}

/// Keep only examples whose captions carry at most [`MAX_UNKS`] interior
/// UNKs, preserving order.
pub fn filter_dataset(examples: Vec<MemeExample>) -> Vec<MemeExample> {
    examples
        .into_iter()
        .filter(|e| e.interior_unk_count() <= MAX_UNKS)
        .collect()
}

/// One raw line of the dataset file, before tokenization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawExample {
    pub image_id: String,
    pub label: String,
    pub caption: String,
}

/// Parse the dataset TSV: one `image_id \t label \t caption` per line.
pub fn read_raw_examples(path: &Path) -> Result<Vec<RawExample>> {
    let origin = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    let mut raws = Vec::new();
    for (index, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                &origin,
                index + 1,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        raws.push(RawExample {
            image_id: fields[0].to_string(),
            label: fields[1].to_string(),
            caption: fields[2].to_string(),
        });
    }
    Ok(raws)
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub examples: Vec<MemeExample>,
    pub vocab: Vocabulary,
}

impl Dataset {
    /// Tokenize raw examples, build a vocabulary from the captions, encode,
    /// and drop captions with excess UNKs.
    pub fn build(raws: &[RawExample], min_count: u64) -> Dataset {
        let captions: Vec<Vec<String>> = raws.iter().map(|r| tokenize(&r.caption)).collect();
        let vocab = Vocabulary::build(&captions, min_count);
        Dataset::encode(raws, &captions, vocab)
    }

    /// Encode raw examples against an existing vocabulary (for evaluation
    /// against a trained model's token table).
    pub fn encode_with(raws: &[RawExample], vocab: Vocabulary) -> Dataset {
        let captions: Vec<Vec<String>> = raws.iter().map(|r| tokenize(&r.caption)).collect();
        Dataset::encode(raws, &captions, vocab)
    }

    fn encode(raws: &[RawExample], captions: &[Vec<String>], vocab: Vocabulary) -> Dataset {
        let examples = raws
            .iter()
            .zip(captions)
            .map(|(raw, tokens)| {
                let (caption_ids, _) = encode_caption(tokens, &vocab);
                MemeExample {
                    image_id: raw.image_id.clone(),
                    label_ids: encode_words(&tokenize(&raw.label), &vocab),
                    caption_ids,
                }
            })
            .collect();
        Dataset {
            examples: filter_dataset(examples),
            vocab,
        }
    }

    pub fn load(path: &Path, min_count: u64) -> Result<Dataset> {
        Ok(Dataset::build(&read_raw_examples(path)?, min_count))
    }
}
