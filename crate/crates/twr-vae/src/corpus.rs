//! Vocabulary, corpus loading, batching and pretrained-embedding import.
//!
//! Text is whitespace-tokenised, one sentence per line. Dialogue corpora put
//! one conversation per line with utterances separated by tabs. Four special
//! tokens occupy the lowest ids in fixed order — `<pad>`, `<unk>`, `<bos>`,
//! `<eos>` — so `pad = 0` can double as the padding fill value everywhere.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::rng::RngState;
use crate::autodiff::tensor::Tensor;
use crate::cells::WEIGHT_INIT_RANGE;
use crate::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Token ↔ id bijection with reserved special ids.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Rank tokens by frequency (descending), breaking ties lexicographically,
    /// drop those seen fewer than `min_count` times, and keep the top
    /// `max_size - 4` after the specials.
    pub fn build<S: AsRef<str>>(
        sentences: &[Vec<S>],
        max_size: usize,
        min_count: usize,
    ) -> Result<Vocab> {
        if max_size <= SPECIALS.len() {
            return Err(Error::invalid(format!(
                "max_size must exceed {} (the specials), got {max_size}",
                SPECIALS.len()
            )));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for sent in sentences {
            for tok in sent {
                *counts.entry(tok.as_ref()).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> =
            counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - SPECIALS.len());

        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().map(|(t, _)| t.to_string()));
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Vocab { tokens, index })
    }

    /// Rebuild from an exported token list (id order).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < SPECIALS.len()
            || SPECIALS.iter().zip(&tokens).any(|(s, t)| s != t)
        {
            return Err(Error::data(
                "vocab export must start with <pad>, <unk>, <bos>, <eos>".to_string(),
            ));
        }
        let index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != tokens.len() {
            return Err(Error::data("vocab export contains duplicate tokens".to_string()));
        }
        Ok(Vocab { tokens, index })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Wrap a sentence in `<bos> … <eos>`, mapping unknown tokens to `<unk>`.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        let mut ids = Vec::with_capacity(tokens.len() + 2);
        ids.push(BOS);
        ids.extend(tokens.iter().map(|t| self.id(t.as_ref())));
        ids.push(EOS);
        ids
    }

    /// Drop special ids and map the rest back to tokens.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id >= SPECIALS.len() && id < self.tokens.len())
            .map(|&id| self.tokens[id].clone())
            .collect()
    }

    /// One token per line, id order — the exported form hashed into
    /// checkpoints.
    pub fn export(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            let _ = writeln!(s, "{t}");
        }
        s
    }

    /// Stable FNV-1a fingerprint of the exported token list.
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        for b in self.export().as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        format!("{h:016x}")
    }
}

/// A padded batch of encoded (`<bos> … <eos>`-wrapped) sentences.
#[derive(Debug, Clone)]
pub struct Batch {
    pub rows: usize,
    /// Padded length; equals the longest wrapped sentence in this batch.
    pub max_len: usize,
    /// Row-major `[rows, max_len]` id matrix, `<pad>`-filled past each length.
    pub ids: Vec<usize>,
    /// Wrapped length (content + 2) per row.
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn id(&self, row: usize, t: usize) -> usize {
        self.ids[row * self.max_len + t]
    }

    /// True while `t` is inside the wrapped sentence of `row`.
    pub fn in_range(&self, row: usize, t: usize) -> bool {
        t < self.lengths[row]
    }

    /// Number of next-token predictions for a row: every position after
    /// `<bos>` up to and including `<eos>`.
    pub fn predicted_tokens(&self, row: usize) -> usize {
        self.lengths[row] - 1
    }
}

/// Pad a group of encoded sentences (indices into `encoded`) into one batch.
fn pad_chunk(encoded: &[Vec<usize>], chunk: &[usize]) -> Batch {
    let max_len = chunk.iter().map(|&i| encoded[i].len()).max().unwrap_or(0);
    let mut ids = vec![PAD; chunk.len() * max_len];
    let mut lengths = Vec::with_capacity(chunk.len());
    for (r, &i) in chunk.iter().enumerate() {
        ids[r * max_len..r * max_len + encoded[i].len()].copy_from_slice(&encoded[i]);
        lengths.push(encoded[i].len());
    }
    Batch { rows: chunk.len(), max_len, ids, lengths }
}

fn check_encoded(encoded: &[Vec<usize>], batch_size: usize) -> Result<()> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    for (i, s) in encoded.iter().enumerate() {
        if s.len() < 2 {
            return Err(Error::invalid(format!(
                "sentence {i} has length {} — encoded sentences carry <bos> and <eos>",
                s.len()
            )));
        }
    }
    Ok(())
}

/// Shuffle sentences with `rng` and cut them into `batch_size` chunks, each
/// padded to its own longest member. Every sentence appears exactly once.
pub fn make_batches(encoded: &[Vec<usize>], batch_size: usize, rng: &mut RngState) -> Result<Vec<Batch>> {
    check_encoded(encoded, batch_size)?;
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    rng.shuffle(&mut order);
    Ok(order.chunks(batch_size).map(|c| pad_chunk(encoded, c)).collect())
}

/// Cut sentences into batches in their given order (no shuffling) — for
/// evaluation passes that must be reproducible without an rng.
pub fn make_batches_ordered(encoded: &[Vec<usize>], batch_size: usize) -> Result<Vec<Batch>> {
    check_encoded(encoded, batch_size)?;
    let order: Vec<usize> = (0..encoded.len()).collect();
    Ok(order.chunks(batch_size).map(|c| pad_chunk(encoded, c)).collect())
}

/// Whitespace-tokenised sentences, one per line; blank lines are skipped.
pub fn load_sentences(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(parse_sentences(&text))
}

pub fn parse_sentences(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect::<Vec<_>>())
        .filter(|t: &Vec<String>| !t.is_empty())
        .collect()
}

/// Conversations, one per line, utterances tab-separated, tokens
/// whitespace-separated. Blank lines and empty utterances are dropped.
pub fn load_conversations(path: &Path) -> Result<Vec<Vec<Vec<String>>>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(parse_conversations(&text))
}

pub fn parse_conversations(text: &str) -> Vec<Vec<Vec<String>>> {
    text.lines()
        .map(|line| {
            line.split('\t')
                .map(|utt| utt.split_whitespace().map(str::to_string).collect::<Vec<_>>())
                .filter(|u: &Vec<String>| !u.is_empty())
                .collect::<Vec<_>>()
        })
        .filter(|c: &Vec<Vec<String>>| !c.is_empty())
        .collect()
}

/// Pretrained embeddings in text form: `token v1 v2 … v_dim` per line.
///
/// Returns the `[vocab, dim]` table and the fraction of non-special vocab
/// tokens found in the file. Tokens absent from the file keep a fresh
/// uniform `[-0.08, 0.08]` initialisation; rows for tokens outside the vocab
/// are ignored; a repeated token keeps its last row.
pub fn load_embeddings(
    path: &Path,
    vocab: &Vocab,
    dim: usize,
    rng: &mut RngState,
) -> Result<(Tensor, f64)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut table = Tensor::zeros(&[vocab.size(), dim]);
    rng.fill_uniform(table.data_mut(), -WEIGHT_INIT_RANGE, WEIGHT_INIT_RANGE);

    let mut covered = vec![false; vocab.size()];
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().expect("non-empty line has a first field");
        let values: Vec<&str> = parts.collect();
        if values.len() != dim {
            return Err(Error::data(format!(
                "embedding line {}: token '{token}' has {} values, expected {dim}",
                lineno + 1,
                values.len()
            )));
        }
        let id = vocab.id(token);
        if id == UNK && token != SPECIALS[UNK] {
            continue; // out-of-vocab row
        }
        for (j, v) in values.iter().enumerate() {
            let parsed: f64 = v.parse().map_err(|_| {
                Error::data(format!(
                    "embedding line {}: cannot parse '{v}' as a number",
                    lineno + 1
                ))
            })?;
            table.data_mut()[id * dim + j] = parsed;
        }
        covered[id] = true;
    }
    let non_special = vocab.size() - SPECIALS.len();
    let coverage = if non_special == 0 {
        0.0
    } else {
        covered[SPECIALS.len()..].iter().filter(|&&c| c).count() as f64 / non_special as f64
    };
    Ok((table, coverage))
}
