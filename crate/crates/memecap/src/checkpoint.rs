//! Binary model checkpoints.
//!
//! Layout: an 8-byte magic, seven little-endian u32 header fields (encoder
//! variant tag, layer count, hidden size, vocabulary size, embedding dim,
//! image dim, float width in bits), every parameter tensor raw in
//! [`Model::all_tensors`] order, then the vocabulary as a u64-length-
//! prefixed UTF-8 text block. Saving and reloading reproduces the model
//! bit for bit.

use std::fs;
use std::path::Path;

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{EncoderVariant, Model, ModelConfig};
use crate::numerics::Scalar;

pub const MAGIC: &[u8; 8] = b"MEMELM01";

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        msg: msg.into(),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or_else(|| {
            format_err(format!("length overflow reading {what}"))
        })?;
        if end > self.bytes.len() {
            return Err(format_err(format!(
                "truncated: needed {n} bytes for {what}, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn header_u32(value: usize, what: &str) -> Result<u32> {
    u32::try_from(value).map_err(|_| format_err(format!("{what} {value} exceeds u32")))
}

pub fn to_bytes<F: Scalar>(model: &Model<F>) -> Result<Vec<u8>> {
    let cfg = &model.config;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for (value, what) in [
        (cfg.variant.tag() as usize, "variant"),
        (cfg.layers, "layers"),
        (cfg.hidden, "hidden"),
        (model.vocab.len(), "vocab size"),
        (cfg.embed_dim, "embed dim"),
        (cfg.image_dim, "image dim"),
        (F::BITS as usize, "precision"),
    ] {
        out.extend_from_slice(&header_u32(value, what)?.to_le_bytes());
    }
    for tensor in model.all_tensors() {
        for &x in tensor {
            x.write_le(&mut out);
        }
    }
    let vocab_text = model.vocab.to_text();
    out.extend_from_slice(&(vocab_text.len() as u64).to_le_bytes());
    out.extend_from_slice(vocab_text.as_bytes());
    Ok(out)
}

pub fn save<F: Scalar>(model: &Model<F>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)?).map_err(|e| Error::io_at(path, e))?;
    Ok(())
}

struct Header {
    config: ModelConfig,
    vocab_size: usize,
    precision: u32,
}

fn read_header(cursor: &mut Cursor) -> Result<Header> {
    let magic = cursor.take(MAGIC.len(), "magic")?;
    if magic != MAGIC {
        return Err(format_err(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(MAGIC)
        )));
    }
    let variant = EncoderVariant::from_tag(cursor.u32("variant tag")?)?;
    let layers = cursor.u32("layer count")? as usize;
    let hidden = cursor.u32("hidden size")? as usize;
    let vocab_size = cursor.u32("vocab size")? as usize;
    let embed_dim = cursor.u32("embed dim")? as usize;
    let image_dim = cursor.u32("image dim")? as usize;
    let precision = cursor.u32("precision")?;
    if precision != 32 && precision != 64 {
        return Err(format_err(format!("unsupported precision {precision}")));
    }
    Ok(Header {
        config: ModelConfig {
            variant,
            layers,
            hidden,
            embed_dim,
            image_dim,
        },
        vocab_size,
        precision,
    })
}

fn parse_body<F: Scalar>(cursor: &mut Cursor, header: &Header) -> Result<Model<F>> {
    if header.precision != F::BITS {
        return Err(format_err(format!(
            "stored at {} bits but loaded as {} bits",
            header.precision,
            F::BITS
        )));
    }
    let word = (F::BITS / 8) as usize;
    // The tensor region's extent follows from the header alone, so the
    // vocabulary behind it can be parsed first and checked for agreement.
    let placeholder = Vocabulary::specials_only();
    let probe = Model::<F>::with_zero_weights(placeholder, header.config)?;
    let tensor_elems: usize = probe.all_tensors().iter().map(|t| t.len()).sum::<usize>()
        - probe.w_out.data().len()
        - probe.embeddings.table.data().len()
        + header.vocab_size * header.config.hidden
        + header.vocab_size * header.config.embed_dim;
    let tensor_bytes = cursor.take(tensor_elems * word, "parameter tensors")?;
    let vocab_len = cursor.u64("vocabulary length")?;
    let vocab_len = usize::try_from(vocab_len)
        .map_err(|_| format_err("vocabulary length exceeds usize"))?;
    let vocab_bytes = cursor.take(vocab_len, "vocabulary text")?;
    if cursor.remaining() != 0 {
        return Err(format_err(format!(
            "{} trailing bytes after vocabulary",
            cursor.remaining()
        )));
    }
    let vocab_text = std::str::from_utf8(vocab_bytes)
        .map_err(|e| format_err(format!("vocabulary is not UTF-8: {e}")))?;
    let vocab = Vocabulary::from_text(vocab_text, "checkpoint vocabulary")?;
    if vocab.len() != header.vocab_size {
        return Err(format_err(format!(
            "header says {} vocabulary entries, text block has {}",
            header.vocab_size,
            vocab.len()
        )));
    }
    let mut model = Model::<F>::with_zero_weights(vocab, header.config)?;
    let mut offset = 0;
    for tensor in model.all_tensors_mut() {
        for x in tensor {
            *x = F::read_le(&tensor_bytes[offset..offset + word]);
            offset += word;
        }
    }
    debug_assert_eq!(offset, tensor_bytes.len());
    Ok(model)
}

pub fn from_bytes<F: Scalar>(bytes: &[u8]) -> Result<Model<F>> {
    let mut cursor = Cursor { bytes, pos: 0 };
    let header = read_header(&mut cursor)?;
    parse_body(&mut cursor, &header)
}

pub fn load<F: Scalar>(path: &Path) -> Result<Model<F>> {
    from_bytes(&fs::read(path).map_err(|e| Error::io_at(path, e))?)
}

/// A checkpoint at whichever precision it was trained.
pub enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

impl AnyModel {
    pub fn precision_bits(&self) -> u32 {
        match self {
            AnyModel::F32(_) => 32,
            AnyModel::F64(_) => 64,
        }
    }
}

pub fn load_any(path: &Path) -> Result<AnyModel> {
    let bytes = fs::read(path).map_err(|e| Error::io_at(path, e))?;
    let mut cursor = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    let header = read_header(&mut cursor)?;
    match header.precision {
        32 => Ok(AnyModel::F32(parse_body(&mut cursor, &header)?)),
        64 => Ok(AnyModel::F64(parse_body(&mut cursor, &header)?)),
        other => Err(format_err(format!("unsupported precision {other}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::EmbeddingMatrix;
    use tempfile::tempdir;

    fn vocab_with(extra: usize) -> Vocabulary {
        let caption: Vec<String> = (0..extra)
            .flat_map(|i| {
                let w = format!("w{i:02}");
                vec![w.clone(), w.clone(), w]
            })
            .collect();
        Vocabulary::build(&[caption], 3)
    }

    fn sample_model(variant: EncoderVariant, seed: u64) -> Model<f32> {
        let vocab = vocab_with(4);
        let emb = EmbeddingMatrix::seeded_random(vocab.len(), 3, seed ^ 7);
        Model::init(
            vocab,
            emb,
            ModelConfig {
                variant,
                layers: 2,
                hidden: 4,
                embed_dim: 3,
                image_dim: 5,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_byte_exact() {
        for variant in [
            EncoderVariant::ImageOnly,
            EncoderVariant::GloveAverage,
            EncoderVariant::AttentionLabels,
        ] {
            let model = sample_model(variant, 11);
            let bytes = to_bytes(&model).unwrap();
            let loaded = from_bytes::<f32>(&bytes).unwrap();
            assert_eq!(bytes, to_bytes(&loaded).unwrap());
            assert_eq!(model.config, loaded.config);
            for (a, b) in model.all_tensors().iter().zip(loaded.all_tensors()) {
                assert_eq!(a, &b);
            }
            assert_eq!(
                model.vocab.tokens().collect::<Vec<_>>(),
                loaded.vocab.tokens().collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn round_trip_through_files() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let model = sample_model(EncoderVariant::GloveAverage, 13);
        save(&model, &path).unwrap();
        let loaded = load::<f32>(&path).unwrap();
        assert_eq!(to_bytes(&model).unwrap(), to_bytes(&loaded).unwrap());
    }

    #[test]
    fn f64_round_trip_preserves_exact_values() {
        let vocab = vocab_with(2);
        let emb = EmbeddingMatrix::<f64>::seeded_random(vocab.len(), 3, 5);
        let model = Model::init(
            vocab,
            emb,
            ModelConfig {
                variant: EncoderVariant::ImageOnly,
                layers: 1,
                hidden: 3,
                embed_dim: 3,
                image_dim: 4,
            },
            17,
        )
        .unwrap();
        let loaded = from_bytes::<f64>(&to_bytes(&model).unwrap()).unwrap();
        for (a, b) in model.all_tensors().iter().zip(loaded.all_tensors()) {
            assert_eq!(a, &b);
        }
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let model = sample_model(EncoderVariant::ImageOnly, 19);
        let mut bytes = to_bytes(&model).unwrap();
        bytes[0] = b'X';
        let err = from_bytes::<f32>(&bytes).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn truncation_is_rejected() {
        let model = sample_model(EncoderVariant::ImageOnly, 19);
        let bytes = to_bytes(&model).unwrap();
        for cut in [4, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(from_bytes::<f32>(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let model = sample_model(EncoderVariant::ImageOnly, 19);
        let mut bytes = to_bytes(&model).unwrap();
        bytes.push(0);
        let err = from_bytes::<f32>(&bytes).unwrap_err().to_string();
        assert!(err.contains("trailing"), "{err}");
    }

    #[test]
    fn precision_mismatch_is_rejected() {
        let model = sample_model(EncoderVariant::ImageOnly, 23);
        let bytes = to_bytes(&model).unwrap();
        let err = from_bytes::<f64>(&bytes).unwrap_err().to_string();
        assert!(err.contains("bits"), "{err}");
    }

    #[test]
    fn bad_variant_tag_is_rejected() {
        let model = sample_model(EncoderVariant::ImageOnly, 23);
        let mut bytes = to_bytes(&model).unwrap();
        bytes[8] = 9;
        assert!(from_bytes::<f32>(&bytes).is_err());
    }

    #[test]
    fn load_any_dispatches_on_stored_precision() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let model = sample_model(EncoderVariant::AttentionLabels, 29);
        save(&model, &path).unwrap();
        match load_any(&path).unwrap() {
            AnyModel::F32(m) => {
                assert_eq!(to_bytes(&m).unwrap(), to_bytes(&model).unwrap());
            }
            AnyModel::F64(_) => panic!("stored as f32"),
        }
    }
}
