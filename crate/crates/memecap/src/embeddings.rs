//! Pretrained word vectors aligned to the vocabulary.
//!
//! The loader reads the text format `word v1 v2 ... v300` and fills one row
//! per vocabulary id. Tokens absent from the file, and the three special
//! tokens, get a seeded uniform init in [-0.08, 0.08] so runs reproduce.

use std::fs;
use std::path::Path;

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Scalar, Vector};
use crate::rng::Prng;

pub const EMBED_DIM: usize = 300;
pub const INIT_RANGE: f64 = 0.08;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix<F> {
    pub table: Matrix<F>,
    pub trainable: bool,
    /// Fraction of non-special vocabulary tokens found in the pretrained file.
    pub coverage: f64,
}

impl<F: Scalar> EmbeddingMatrix<F> {
    /// Fully random table (no pretrained file), used by toy models and tests.
    pub fn seeded_random(vocab_size: usize, dim: usize, seed: u64) -> Self {
        let mut rng = Prng::new(seed);
        let mut table = Matrix::zeros(vocab_size, dim);
        for x in table.data_mut() {
            *x = F::from_f64(rng.uniform(-INIT_RANGE, INIT_RANGE));
        }
        EmbeddingMatrix {
            table,
            trainable: true,
            coverage: 0.0,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.table.rows()
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    /// Row for `id`, bounds-checked.
    pub fn lookup(&self, id: usize) -> Result<Vector<F>> {
        if id >= self.table.rows() {
            return Err(Error::Config(format!(
                "embedding id {id} out of range for vocabulary of {}",
                self.table.rows()
            )));
        }
        Ok(Vector::from_vec(self.table.row(id).to_vec()))
    }

    /// Unchecked row view for hot paths.
    pub fn row(&self, id: usize) -> &[F] {
        self.table.row(id)
    }
}

/// Arithmetic mean of the rows for `ids`. Empty `ids` is an error; callers
/// that allow empty labels substitute the UNK row themselves.
pub fn average_embeddings<F: Scalar>(emb: &EmbeddingMatrix<F>, ids: &[usize]) -> Result<Vector<F>> {
    if ids.is_empty() {
        return Err(Error::Empty("average_embeddings"));
    }
    let dim = emb.dim();
    let mut sum = Vector::zeros(dim);
    for &id in ids {
        if id >= emb.vocab_size() {
            return Err(Error::Config(format!(
                "embedding id {id} out of range for vocabulary of {}",
                emb.vocab_size()
            )));
        }
        for (acc, &x) in sum.data_mut().iter_mut().zip(emb.row(id)) {
            *acc += x;
        }
    }
    let n = F::from_f64(ids.len() as f64);
    for x in sum.data_mut() {
        *x = *x / n;
    }
    Ok(sum)
}

/// Load pretrained vectors for `vocab`. Each line is `word v1 .. v300`,
/// single-space separated. Words are matched exactly against the (already
/// lowercase) vocabulary; unseen tokens and specials are seeded-random.
pub fn load_glove<F: Scalar>(
    path: &Path,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<EmbeddingMatrix<F>> {
    let origin = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    let mut file_rows: std::collections::HashMap<&str, Vec<F>> = std::collections::HashMap::new();
    for (index, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let number = index + 1;
        let mut parts = line.split(' ');
        let word = parts
            .next()
            .ok_or_else(|| Error::parse(&origin, number, "empty line"))?;
        if vocab.id(word).is_none() {
            // Still validate dimension so a malformed file fails loudly.
            let n = parts.clone().count();
            if n != EMBED_DIM {
                return Err(Error::parse(
                    &origin,
                    number,
                    format!("expected {EMBED_DIM} values, found {n}"),
                ));
            }
            continue;
        }
        let mut values = Vec::with_capacity(EMBED_DIM);
        for part in parts {
            let x: f64 = part.parse().map_err(|_| {
                Error::parse(&origin, number, format!("invalid number {part:?}"))
            })?;
            values.push(F::from_f64(x));
        }
        if values.len() != EMBED_DIM {
            return Err(Error::parse(
                &origin,
                number,
                format!("expected {EMBED_DIM} values, found {}", values.len()),
            ));
        }
        file_rows.insert(word, values);
    }

    let mut rng = Prng::new(seed);
    let mut table = Matrix::zeros(vocab.len(), EMBED_DIM);
    let mut found = 0usize;
    for (id, token) in vocab.tokens().enumerate() {
        let from_file = if id >= 3 { file_rows.get(token) } else { None };
        match from_file {
            Some(values) => {
                found += 1;
                table.row_mut(id).copy_from_slice(values);
            }
            None => {
                for x in table.row_mut(id) {
                    *x = F::from_f64(rng.uniform(-INIT_RANGE, INIT_RANGE));
                }
            }
        }
    }
    let non_special = vocab.len().saturating_sub(3);
    let coverage = if non_special == 0 {
        1.0
    } else {
        found as f64 / non_special as f64
    };
    Ok(EmbeddingMatrix {
        table,
        trainable: true,
        coverage,
    })
}
