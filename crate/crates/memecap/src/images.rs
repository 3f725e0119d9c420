//! Image embedding storage and a deterministic stand-in embedder.
//!
//! Real deployments extract 2048-dim CNN features offline; this module
//! stores them in a flat binary format (magic `IMGE0001`, then per record
//! a u32 LE id length, the UTF-8 id, and 2048 f32 LE values) and can also
//! fabricate a pseudo-embedding from raw bytes so the pipeline runs end to
//! end without a vision model: the bytes are hashed and the digest seeds a
//! generator that draws a unit-norm Gaussian vector.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Vector};
use crate::rng::Prng;

pub const MAGIC: &[u8; 8] = b"IMGE0001";
pub const EMBED_DIM: usize = 2048;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format {
        what: "image embeddings",
        msg: msg.into(),
    }
}

/// Image-id to embedding map that remembers insertion order, so saving is
/// reproducible.
#[derive(Clone, Debug, Default)]
pub struct ImageEmbeddings {
    ids: Vec<String>,
    by_id: HashMap<String, Vec<f32>>,
}

impl ImageEmbeddings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: &str, embedding: Vec<f32>) -> Result<()> {
        if embedding.len() != EMBED_DIM {
            return Err(Error::shape(
                "image_embedding",
                format!("{EMBED_DIM} dims"),
                format!("{} dims for id {id}", embedding.len()),
            ));
        }
        if self.by_id.contains_key(id) {
            return Err(format_err(format!("duplicate image id {id}")));
        }
        self.ids.push(id.to_string());
        self.by_id.insert(id.to_string(), embedding);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.by_id.get(id).map(|v| v.as_slice())
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn to_vector<F: Scalar>(&self, id: &str) -> Result<Vector<F>> {
        let raw = self
            .get(id)
            .ok_or_else(|| Error::Config(format!("no embedding stored for image id {id}")))?;
        Ok(Vector::from_vec(
            raw.iter().map(|&x| F::from_f64(x as f64)).collect(),
        ))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for &x in &self.by_id[id] {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ImageEmbeddings> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(format_err("bad or missing magic"));
        }
        let mut store = ImageEmbeddings::new();
        let mut pos = MAGIC.len();
        while pos < bytes.len() {
            if bytes.len() - pos < 4 {
                return Err(format_err("truncated record header"));
            }
            let id_len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
            pos += 4;
            if bytes.len() - pos < id_len {
                return Err(format_err("truncated image id"));
            }
            let id = std::str::from_utf8(&bytes[pos..pos + id_len])
                .map_err(|e| format_err(format!("image id is not UTF-8: {e}")))?
                .to_string();
            pos += id_len;
            let need = EMBED_DIM * 4;
            if bytes.len() - pos < need {
                return Err(format_err(format!("truncated embedding for id {id}")));
            }
            let embedding: Vec<f32> = bytes[pos..pos + need]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos += need;
            store.insert(&id, embedding)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io_at(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ImageEmbeddings> {
        ImageEmbeddings::from_bytes(&fs::read(path).map_err(|e| Error::io_at(path, e))?)
    }
}

/// Deterministic content-addressed embedding: identical bytes always map
/// to the same unit-length vector, different bytes to an unrelated one.
pub fn pseudo_embed(bytes: &[u8]) -> Vec<f32> {
    let digest = Sha256::digest(bytes);
    let mut rng = Prng::from_key(digest.into());
    let raw: Vec<f64> = (0..EMBED_DIM).map(|_| rng.normal()).collect();
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    debug_assert!(norm > 0.0);
    raw.iter().map(|&x| (x / norm) as f32).collect()
}

/// One image vector per dataset example, in example order. Fails by name
/// on ids the store lacks.
pub fn resolve<F: Scalar>(
    store: &ImageEmbeddings,
    examples: &[crate::corpus::MemeExample],
) -> Result<Vec<Vector<F>>> {
    let mut missing: Vec<&str> = examples
        .iter()
        .filter(|e| store.get(&e.image_id).is_none())
        .map(|e| e.image_id.as_str())
        .collect();
    if !missing.is_empty() {
        missing.sort_unstable();
        missing.dedup();
        return Err(Error::Config(format!(
            "no stored embedding for image id(s): {}",
            missing.join(", ")
        )));
    }
    examples
        .iter()
        .map(|e| store.to_vector(&e.image_id))
        .collect()
}
