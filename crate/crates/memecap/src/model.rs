//! The captioning network: an encoder that maps (image, label) to an
//! initial decoder state, a multi-layer LSTM decoder over word embeddings,
//! and an output projection to vocabulary logits.
//!
//! The LSTM cell carries no bias terms:
//!
//! ```text
//! i = sigmoid(W_ix x + W_im m_prev)
//! f = sigmoid(W_fx x + W_fm m_prev)
//! o = sigmoid(W_ox x + W_om m_prev)
//! c = f . c_prev + i . tanh(W_cx x + W_cm m_prev)
//! m = o . c
//! ```
//!
//! Encoder variants: 1 projects the image alone; 2 projects the image
//! concatenated with the mean label embedding; 3 runs the projected image
//! and then each label embedding through an encoder LSTM, keeping the
//! label-step outputs as attention keys for the decoder.

use crate::corpus::{TokenId, Vocabulary, UNK_ID};
use crate::embeddings::{average_embeddings, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::numerics::{
    add, concat, hadamard, log_softmax, sigmoid, softmax, tanh, Matrix, Scalar, Vector,
};
use crate::rng::Prng;

pub const DEFAULT_HIDDEN: usize = 300;
pub const IMAGE_DIM: usize = 2048;
pub const MAX_LAYERS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderVariant {
    /// q = W_1 p + b_1
    ImageOnly,
    /// q = W_2 (p || mean(label embeddings)) + b_2
    GloveAverage,
    /// Encoder LSTM over the projected image then label embeddings;
    /// q = final output, keys = label-step outputs.
    AttentionLabels,
}

impl EncoderVariant {
    pub fn tag(self) -> u32 {
        match self {
            EncoderVariant::ImageOnly => 1,
            EncoderVariant::GloveAverage => 2,
            EncoderVariant::AttentionLabels => 3,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            1 => Ok(EncoderVariant::ImageOnly),
            2 => Ok(EncoderVariant::GloveAverage),
            3 => Ok(EncoderVariant::AttentionLabels),
            _ => Err(Error::Format {
                what: "checkpoint",
                msg: format!("unknown encoder variant tag {tag}"),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub variant: EncoderVariant,
    pub layers: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub image_dim: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.layers > MAX_LAYERS {
            return Err(Error::Config(format!(
                "layers must be 1..={MAX_LAYERS}, got {}",
                self.layers
            )));
        }
        if self.hidden == 0 || self.embed_dim == 0 || self.image_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// One LSTM layer's eight gate matrices. The x-matrices are H x D_in,
/// the m-matrices H x H.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayerWeights<F> {
    pub w_ix: Matrix<F>,
    pub w_im: Matrix<F>,
    pub w_fx: Matrix<F>,
    pub w_fm: Matrix<F>,
    pub w_ox: Matrix<F>,
    pub w_om: Matrix<F>,
    pub w_cx: Matrix<F>,
    pub w_cm: Matrix<F>,
}

/// Everything the backward pass needs about one cell application.
#[derive(Clone, Debug)]
pub struct LstmStepCache<F> {
    pub x: Vector<F>,
    pub c_prev: Vector<F>,
    pub m_prev: Vector<F>,
    pub i: Vector<F>,
    pub f: Vector<F>,
    pub o: Vector<F>,
    pub g: Vector<F>,
    pub c: Vector<F>,
    pub m: Vector<F>,
}

impl<F: Scalar> LstmLayerWeights<F> {
    pub fn zeros(hidden: usize, input_dim: usize) -> Self {
        LstmLayerWeights {
            w_ix: Matrix::zeros(hidden, input_dim),
            w_im: Matrix::zeros(hidden, hidden),
            w_fx: Matrix::zeros(hidden, input_dim),
            w_fm: Matrix::zeros(hidden, hidden),
            w_ox: Matrix::zeros(hidden, input_dim),
            w_om: Matrix::zeros(hidden, hidden),
            w_cx: Matrix::zeros(hidden, input_dim),
            w_cm: Matrix::zeros(hidden, hidden),
        }
    }

    #[cfg(test)]
    fn init(rng: &mut Prng, hidden: usize, input_dim: usize, range: f64) -> Self {
        let mut w = Self::zeros(hidden, input_dim);
        for t in w.tensors_mut() {
            for x in t {
                *x = F::from_f64(rng.uniform(-range, range));
            }
        }
        w
    }

    pub fn hidden(&self) -> usize {
        self.w_ix.rows()
    }

    pub fn tensors(&self) -> Vec<&[F]> {
        vec![
            self.w_ix.data(),
            self.w_im.data(),
            self.w_fx.data(),
            self.w_fm.data(),
            self.w_ox.data(),
            self.w_om.data(),
            self.w_cx.data(),
            self.w_cm.data(),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        vec![
            self.w_ix.data_mut(),
            self.w_im.data_mut(),
            self.w_fx.data_mut(),
            self.w_fm.data_mut(),
            self.w_ox.data_mut(),
            self.w_om.data_mut(),
            self.w_cx.data_mut(),
            self.w_cm.data_mut(),
        ]
    }

    /// Apply the cell equations to one input, returning the full cache.
    pub fn step(
        &self,
        x: &Vector<F>,
        c_prev: &Vector<F>,
        m_prev: &Vector<F>,
    ) -> Result<LstmStepCache<F>> {
        let i = sigmoid(&add(&self.w_ix.matvec(x)?, &self.w_im.matvec(m_prev)?)?);
        let f = sigmoid(&add(&self.w_fx.matvec(x)?, &self.w_fm.matvec(m_prev)?)?);
        let o = sigmoid(&add(&self.w_ox.matvec(x)?, &self.w_om.matvec(m_prev)?)?);
        let g = tanh(&add(&self.w_cx.matvec(x)?, &self.w_cm.matvec(m_prev)?)?);
        let c = add(&hadamard(&f, c_prev)?, &hadamard(&i, &g)?)?;
        let m = hadamard(&o, &c)?;
        Ok(LstmStepCache {
            x: x.clone(),
            c_prev: c_prev.clone(),
            m_prev: m_prev.clone(),
            i,
            f,
            o,
            g,
            c,
            m,
        })
    }
}

/// Per-layer recurrent state.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState<F> {
    pub c: Vector<F>,
    pub m: Vector<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmState<F> {
    pub layers: Vec<LayerState<F>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum EncoderWeights<F> {
    ImageOnly {
        w1: Matrix<F>,
        b1: Vector<F>,
    },
    GloveAverage {
        w2: Matrix<F>,
        b2: Vector<F>,
    },
    AttentionLabels {
        w3: Matrix<F>,
        b3: Vector<F>,
        lstm: LstmLayerWeights<F>,
        /// Bilinear attention scoring matrix, H x H.
        w_a: Matrix<F>,
        /// Combines (context || h) back to H.
        w_c: Matrix<F>,
    },
}

impl<F: Scalar> EncoderWeights<F> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (e, p, h) = (cfg.embed_dim, cfg.image_dim, cfg.hidden);
        match cfg.variant {
            EncoderVariant::ImageOnly => EncoderWeights::ImageOnly {
                w1: Matrix::zeros(e, p),
                b1: Vector::zeros(e),
            },
            EncoderVariant::GloveAverage => EncoderWeights::GloveAverage {
                w2: Matrix::zeros(e, p + e),
                b2: Vector::zeros(e),
            },
            EncoderVariant::AttentionLabels => EncoderWeights::AttentionLabels {
                w3: Matrix::zeros(e, p),
                b3: Vector::zeros(e),
                lstm: LstmLayerWeights::zeros(h, e),
                w_a: Matrix::zeros(h, h),
                w_c: Matrix::zeros(h, 2 * h),
            },
        }
    }

    pub fn tensors(&self) -> Vec<&[F]> {
        match self {
            EncoderWeights::ImageOnly { w1, b1 } => vec![w1.data(), b1.data()],
            EncoderWeights::GloveAverage { w2, b2 } => vec![w2.data(), b2.data()],
            EncoderWeights::AttentionLabels { w3, b3, lstm, w_a, w_c } => {
                let mut t = vec![w3.data(), b3.data()];
                t.extend(lstm.tensors());
                t.push(w_a.data());
                t.push(w_c.data());
                t
            }
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        match self {
            EncoderWeights::ImageOnly { w1, b1 } => vec![w1.data_mut(), b1.data_mut()],
            EncoderWeights::GloveAverage { w2, b2 } => vec![w2.data_mut(), b2.data_mut()],
            EncoderWeights::AttentionLabels { w3, b3, lstm, w_a, w_c } => {
                let mut t = vec![w3.data_mut(), b3.data_mut()];
                t.extend(lstm.tensors_mut());
                t.push(w_a.data_mut());
                t.push(w_c.data_mut());
                t
            }
        }
    }
}

/// Encoder output: the initial-state vector plus, for the attention
/// variant, the key memory and the activation cache the backward pass
/// replays.
#[derive(Clone, Debug)]
pub struct Encoded<F> {
    pub q: Vector<F>,
    /// Attention keys; empty except for the attention variant.
    pub keys: Vec<Vector<F>>,
    pub cache: EncoderCache<F>,
}

#[derive(Clone, Debug)]
pub enum EncoderCache<F> {
    ImageOnly {
        p: Vector<F>,
    },
    GloveAverage {
        p: Vector<F>,
        mean: Vector<F>,
        /// Ids the mean was taken over; empty means the UNK row stood in.
        label_ids: Vec<TokenId>,
    },
    AttentionLabels {
        p: Vector<F>,
        steps: Vec<LstmStepCache<F>>,
        /// Ids actually fed (UNK substituted when the label was empty).
        label_ids: Vec<TokenId>,
    },
}

/// One attention application, cached for backward.
#[derive(Clone, Debug)]
pub struct AttentionCache<F> {
    pub h: Vector<F>,
    pub weights: Vector<F>,
    pub context: Vector<F>,
    /// context || h
    pub z: Vector<F>,
    pub h_tilde: Vector<F>,
    /// W_a k for each key, reused by the backward pass.
    pub wak: Vec<Vector<F>>,
}

/// Luong "general" attention: scores s_k = h^T W_a k, weights = softmax(s),
/// context = sum a_k k, output = tanh(W_c (context || h)).
pub fn luong_attention<F: Scalar>(
    h: &Vector<F>,
    keys: &[Vector<F>],
    w_a: &Matrix<F>,
    w_c: &Matrix<F>,
) -> Result<AttentionCache<F>> {
    if keys.is_empty() {
        return Err(Error::Empty("luong_attention keys"));
    }
    let wak: Vec<Vector<F>> = keys.iter().map(|k| w_a.matvec(k)).collect::<Result<_>>()?;
    let scores = Vector::from_vec(wak.iter().map(|t| h.dot(t)).collect::<Result<_>>()?);
    let weights = softmax(&scores)?;
    let mut context = Vector::zeros(keys[0].len());
    for (k, &a) in keys.iter().zip(weights.data()) {
        context.add_scaled(k, a)?;
    }
    let z = concat(&context, h);
    let h_tilde = tanh(&w_c.matvec(&z)?);
    Ok(AttentionCache {
        h: h.clone(),
        weights,
        context,
        z,
        h_tilde,
        wak,
    })
}

/// Teacher-forced forward pass over one caption, with every activation
/// cached for backpropagation.
#[derive(Debug)]
pub struct Forward<F> {
    pub logits: Vec<Vector<F>>,
    /// steps[t][layer]
    pub steps: Vec<Vec<LstmStepCache<F>>>,
    pub attn: Vec<Option<AttentionCache<F>>>,
    pub input_ids: Vec<TokenId>,
}

#[derive(Clone, Debug)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub encoder: EncoderWeights<F>,
    /// Maps the encoder's q (embed_dim) to the hidden size when they
    /// differ; absent for the attention variant, whose q is already H.
    pub q_proj: Option<Matrix<F>>,
    pub layers: Vec<LstmLayerWeights<F>>,
    pub w_out: Matrix<F>,
    pub embeddings: EmbeddingMatrix<F>,
    pub vocab: Vocabulary,
}

impl<F: Scalar> Model<F> {
    /// All-zero weights and embeddings in the shapes `config` implies.
    /// The checkpoint loader fills these in; tests overwrite them.
    pub fn with_zero_weights(vocab: Vocabulary, config: ModelConfig) -> Result<Model<F>> {
        config.validate()?;
        Ok(Model {
            config,
            encoder: EncoderWeights::zeros(&config),
            q_proj: Model::<F>::needs_q_proj(&config)
                .then(|| Matrix::zeros(config.hidden, config.embed_dim)),
            layers: (0..config.layers)
                .map(|l| {
                    let input = if l == 0 { config.embed_dim } else { config.hidden };
                    LstmLayerWeights::zeros(config.hidden, input)
                })
                .collect(),
            w_out: Matrix::zeros(vocab.len(), config.hidden),
            embeddings: EmbeddingMatrix {
                table: Matrix::zeros(vocab.len(), config.embed_dim),
                trainable: true,
                coverage: 0.0,
            },
            vocab,
        })
    }

    /// Seeded uniform init for all weights except the embedding table,
    /// which arrives pre-built (pretrained or random).
    pub fn init(
        vocab: Vocabulary,
        embeddings: EmbeddingMatrix<F>,
        config: ModelConfig,
        seed: u64,
    ) -> Result<Model<F>> {
        if embeddings.vocab_size() != vocab.len() {
            return Err(Error::Config(format!(
                "embedding rows {} != vocabulary size {}",
                embeddings.vocab_size(),
                vocab.len()
            )));
        }
        if embeddings.dim() != config.embed_dim {
            return Err(Error::Config(format!(
                "embedding dim {} != configured embed_dim {}",
                embeddings.dim(),
                config.embed_dim
            )));
        }
        const RANGE: f64 = 0.08;
        let mut rng = Prng::new(seed);
        let mut model = Model::with_zero_weights(vocab, config)?;
        model.embeddings = embeddings;
        for t in model.weight_tensors_mut() {
            for x in t {
                *x = F::from_f64(rng.uniform(-RANGE, RANGE));
            }
        }
        Ok(model)
    }

    fn needs_q_proj(config: &ModelConfig) -> bool {
        config.variant != EncoderVariant::AttentionLabels && config.hidden != config.embed_dim
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Every non-embedding weight tensor, in checkpoint order.
    fn weight_tensors_mut(&mut self) -> Vec<&mut [F]> {
        let mut t = self.encoder.tensors_mut();
        if let Some(q) = &mut self.q_proj {
            t.push(q.data_mut());
        }
        for layer in &mut self.layers {
            t.extend(layer.tensors_mut());
        }
        t.push(self.w_out.data_mut());
        t
    }

    /// All parameter tensors in checkpoint order, embeddings last.
    pub fn all_tensors(&self) -> Vec<&[F]> {
        let mut t = self.encoder.tensors();
        if let Some(q) = &self.q_proj {
            t.push(q.data());
        }
        for layer in &self.layers {
            t.extend(layer.tensors());
        }
        t.push(self.w_out.data());
        t.push(self.embeddings.table.data());
        t
    }

    pub fn all_tensors_mut(&mut self) -> Vec<&mut [F]> {
        let mut t = self.encoder.tensors_mut();
        if let Some(q) = &mut self.q_proj {
            t.push(q.data_mut());
        }
        for layer in &mut self.layers {
            t.extend(layer.tensors_mut());
        }
        t.push(self.w_out.data_mut());
        t.push(self.embeddings.table.data_mut());
        t
    }

    /// Tensors the optimizer may update: everything, minus the embedding
    /// table when it is frozen.
    pub fn trainable_tensors_mut(&mut self) -> Vec<&mut [F]> {
        let trainable = self.embeddings.trainable;
        let mut t = self.all_tensors_mut();
        if !trainable {
            t.pop();
        }
        t
    }

    pub fn encode(&self, p: &Vector<F>, label_ids: &[TokenId]) -> Result<Encoded<F>> {
        match self.config.variant {
            EncoderVariant::ImageOnly => self.encode_v1(p),
            EncoderVariant::GloveAverage => self.encode_v2(p, label_ids),
            EncoderVariant::AttentionLabels => self.encode_v3(p, label_ids),
        }
    }

    /// q = W_1 p + b_1.
    pub fn encode_v1(&self, p: &Vector<F>) -> Result<Encoded<F>> {
        let EncoderWeights::ImageOnly { w1, b1 } = &self.encoder else {
            return Err(Error::Config(
                "encode_v1 called on a model with a different encoder variant".into(),
            ));
        };
        let q = add(&w1.matvec(p)?, b1)?;
        Ok(Encoded {
            q,
            keys: Vec::new(),
            cache: EncoderCache::ImageOnly { p: p.clone() },
        })
    }

    /// q = W_2 (p || mean of label embeddings) + b_2. An empty label uses
    /// the UNK embedding in place of the mean.
    pub fn encode_v2(&self, p: &Vector<F>, label_ids: &[TokenId]) -> Result<Encoded<F>> {
        let EncoderWeights::GloveAverage { w2, b2 } = &self.encoder else {
            return Err(Error::Config(
                "encode_v2 called on a model with a different encoder variant".into(),
            ));
        };
        let mean = if label_ids.is_empty() {
            self.embeddings.lookup(UNK_ID)?
        } else {
            average_embeddings(&self.embeddings, label_ids)?
        };
        let q = add(&w2.matvec(&concat(p, &mean))?, b2)?;
        Ok(Encoded {
            q,
            keys: Vec::new(),
            cache: EncoderCache::GloveAverage {
                p: p.clone(),
                mean,
                label_ids: label_ids.to_vec(),
            },
        })
    }

    /// Runs the encoder LSTM over W_3 p + b_3 and then each label
    /// embedding; q is the final output and the label-step outputs
    /// (excluding the image step) become attention keys.
    pub fn encode_v3(&self, p: &Vector<F>, label_ids: &[TokenId]) -> Result<Encoded<F>> {
        let EncoderWeights::AttentionLabels { w3, b3, lstm, .. } = &self.encoder else {
            return Err(Error::Config(
                "encode_v3 called on a model with a different encoder variant".into(),
            ));
        };
        let used_ids: Vec<TokenId> = if label_ids.is_empty() {
            vec![UNK_ID]
        } else {
            label_ids.to_vec()
        };
        let hidden = lstm.hidden();
        let mut c = Vector::zeros(hidden);
        let mut m = Vector::zeros(hidden);
        let mut steps = Vec::with_capacity(1 + used_ids.len());
        let x0 = add(&w3.matvec(p)?, b3)?;
        let cache = lstm.step(&x0, &c, &m)?;
        c = cache.c.clone();
        m = cache.m.clone();
        steps.push(cache);
        let mut keys = Vec::with_capacity(used_ids.len());
        for &id in &used_ids {
            let x = self.embeddings.lookup(id)?;
            let cache = lstm.step(&x, &c, &m)?;
            c = cache.c.clone();
            m = cache.m.clone();
            keys.push(cache.m.clone());
            steps.push(cache);
        }
        Ok(Encoded {
            q: m,
            keys,
            cache: EncoderCache::AttentionLabels {
                p: p.clone(),
                steps,
                label_ids: used_ids,
            },
        })
    }

    /// q mapped into the hidden space, ready to seed layer 1's m.
    pub fn project_q(&self, q: &Vector<F>) -> Result<Vector<F>> {
        match &self.q_proj {
            Some(w) => w.matvec(q),
            None => Ok(q.clone()),
        }
    }

    /// Layer 1 starts from m = projected q, c = 0; upper layers from zero.
    pub fn initial_state(&self, encoded: &Encoded<F>) -> Result<LstmState<F>> {
        let hidden = self.config.hidden;
        let mut layers = Vec::with_capacity(self.config.layers);
        layers.push(LayerState {
            c: Vector::zeros(hidden),
            m: self.project_q(&encoded.q)?,
        });
        for _ in 1..self.config.layers {
            layers.push(LayerState {
                c: Vector::zeros(hidden),
                m: Vector::zeros(hidden),
            });
        }
        Ok(LstmState { layers })
    }

    /// Feed one token through every layer (and attention, when active).
    /// Returns the next state and the log-probability vector over the
    /// vocabulary.
    pub fn decode_step(
        &self,
        state: &LstmState<F>,
        token: TokenId,
        keys: &[Vector<F>],
    ) -> Result<(LstmState<F>, Vector<F>)> {
        let mut x = self.embeddings.lookup(token)?;
        let mut layers = Vec::with_capacity(self.config.layers);
        for (weights, prev) in self.layers.iter().zip(&state.layers) {
            let cache = weights.step(&x, &prev.c, &prev.m)?;
            x = cache.m.clone();
            layers.push(LayerState {
                c: cache.c,
                m: cache.m,
            });
        }
        let top = self.top_output(&x, keys)?;
        let log_probs = log_softmax(&self.w_out.matvec(&top)?)?;
        Ok((LstmState { layers }, log_probs))
    }

    fn top_output(&self, m_top: &Vector<F>, keys: &[Vector<F>]) -> Result<Vector<F>> {
        if let EncoderWeights::AttentionLabels { w_a, w_c, .. } = &self.encoder {
            if !keys.is_empty() {
                return Ok(luong_attention(m_top, keys, w_a, w_c)?.h_tilde);
            }
        }
        Ok(m_top.clone())
    }

    /// Teacher-forced pass: `input_ids[t]` is embedded and fed at step t;
    /// logits[t] scores the token at position t+1.
    pub fn forward(&self, encoded: &Encoded<F>, input_ids: &[TokenId]) -> Result<Forward<F>> {
        if input_ids.is_empty() {
            return Err(Error::Empty("decoder input"));
        }
        let init = self.initial_state(encoded)?;
        let mut prev: Vec<(Vector<F>, Vector<F>)> = init
            .layers
            .iter()
            .map(|l| (l.c.clone(), l.m.clone()))
            .collect();
        let mut logits = Vec::with_capacity(input_ids.len());
        let mut steps = Vec::with_capacity(input_ids.len());
        let mut attn = Vec::with_capacity(input_ids.len());
        for &token in input_ids {
            let mut x = self.embeddings.lookup(token)?;
            let mut layer_caches = Vec::with_capacity(self.config.layers);
            for (l, weights) in self.layers.iter().enumerate() {
                let cache = weights.step(&x, &prev[l].0, &prev[l].1)?;
                x = cache.m.clone();
                prev[l] = (cache.c.clone(), cache.m.clone());
                layer_caches.push(cache);
            }
            let (top, attn_cache) = match &self.encoder {
                EncoderWeights::AttentionLabels { w_a, w_c, .. } if !encoded.keys.is_empty() => {
                    let cache = luong_attention(&x, &encoded.keys, w_a, w_c)?;
                    (cache.h_tilde.clone(), Some(cache))
                }
                _ => (x.clone(), None),
            };
            logits.push(self.w_out.matvec(&top)?);
            steps.push(layer_caches);
            attn.push(attn_cache);
        }
        Ok(Forward {
            logits,
            steps,
            attn,
            input_ids: input_ids.to_vec(),
        })
    }
}
