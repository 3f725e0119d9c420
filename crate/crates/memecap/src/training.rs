//! Loss, exact gradients by backpropagation through time, finite-difference
//! gradient checking, SGD and Momentum with global-norm clipping, and the
//! epoch loop.
//!
//! Gradients flow through the output projection, attention (when active),
//! every decoder layer across all time steps, the initial-state path into
//! the encoder, and into the embedding rows that were touched. Batch
//! gradients are an ordered sum over examples, so results do not depend on
//! the worker thread count.

use crate::corpus::{Dataset, TokenId, UNK_ID};
use crate::error::{Error, Result};
use crate::model::{
    AttentionCache, Encoded, EncoderCache, EncoderVariant, EncoderWeights, Forward,
    LstmLayerWeights, Model, ModelConfig,
};
use crate::numerics::{concat, hadamard, softmax, Matrix, Scalar, Vector};
use crate::rng::Prng;

/// Mean over time steps of the negative log-probability assigned to each
/// target token.
pub fn cross_entropy<F: Scalar>(logits: &[Vector<F>], targets: &[TokenId]) -> Result<F> {
    if logits.len() != targets.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} steps", logits.len()),
            format!("{} targets", targets.len()),
        ));
    }
    if logits.is_empty() {
        return Err(Error::Empty("cross_entropy"));
    }
    let mut total = F::zero();
    for (l, &t) in logits.iter().zip(targets) {
        let lp = crate::numerics::log_softmax(l)?;
        total = total - lp.get(t);
    }
    Ok(total / F::from_f64(logits.len() as f64))
}

/// Gradient accumulator shape-matched to a model's parameters. The weight
/// structs double as storage; the embedding gradient is a dense table.
#[derive(Clone, Debug)]
pub struct Gradients<F> {
    pub encoder: EncoderWeights<F>,
    pub q_proj: Option<Matrix<F>>,
    pub layers: Vec<LstmLayerWeights<F>>,
    pub w_out: Matrix<F>,
    pub embeddings: Matrix<F>,
    include_embeddings: bool,
}

impl<F: Scalar> Gradients<F> {
    pub fn zeros_like(model: &Model<F>) -> Self {
        let cfg = &model.config;
        Gradients {
            encoder: EncoderWeights::zeros(cfg),
            q_proj: model
                .q_proj
                .as_ref()
                .map(|m| Matrix::zeros(m.rows(), m.cols())),
            layers: model
                .layers
                .iter()
                .map(|l| LstmLayerWeights::zeros(l.hidden(), l.w_ix.cols()))
                .collect(),
            w_out: Matrix::zeros(model.w_out.rows(), model.w_out.cols()),
            embeddings: Matrix::zeros(model.embeddings.vocab_size(), model.embeddings.dim()),
            include_embeddings: model.embeddings.trainable,
        }
    }

    /// Tensors in the same order as [`Model::all_tensors`].
    pub fn all_tensors(&self) -> Vec<&[F]> {
        let mut t = self.encoder.tensors();
        if let Some(q) = &self.q_proj {
            t.push(q.data());
        }
        for layer in &self.layers {
            t.extend(layer.tensors());
        }
        t.push(self.w_out.data());
        t.push(self.embeddings.data());
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
        t.push(self.embeddings.data_mut());
        t
    }

    /// Tensors the optimizer consumes, aligned with
    /// [`Model::trainable_tensors_mut`].
    pub fn trainable_tensors(&self) -> Vec<&[F]> {
        let mut t = self.all_tensors();
        if !self.include_embeddings {
            t.pop();
        }
        t
    }

    pub fn trainable_tensors_mut(&mut self) -> Vec<&mut [F]> {
        let include = self.include_embeddings;
        let mut t = self.all_tensors_mut();
        if !include {
            t.pop();
        }
        t
    }

    pub fn add_assign(&mut self, other: &Gradients<F>) {
        let mut mine = self.all_tensors_mut();
        let theirs = other.all_tensors();
        for (a, b) in mine.iter_mut().zip(theirs) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for t in self.all_tensors_mut() {
            for x in t {
                *x = *x * s;
            }
        }
    }

    /// L2 norm over the trainable tensors, accumulated at 64-bit.
    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for t in self.trainable_tensors() {
            for &x in t {
                let v = x.to_f64();
                acc += v * v;
            }
        }
        acc.sqrt()
    }
}

/// Scale gradients down so their global norm is at most `clip_norm`.
/// Returns the pre-clip norm.
pub fn clip_gradients<F: Scalar>(grads: &mut Gradients<F>, clip_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > clip_norm {
        grads.scale(F::from_f64(clip_norm / norm));
    }
    norm
}

fn sigmoid_backward<F: Scalar>(d: &Vector<F>, y: &Vector<F>) -> Result<Vector<F>> {
    // y = sigmoid(a): da = d * y * (1 - y)
    let one_minus: Vector<F> = Vector::from_vec(y.data().iter().map(|&v| F::one() - v).collect());
    hadamard(&hadamard(d, y)?, &one_minus)
}

fn tanh_backward<F: Scalar>(d: &Vector<F>, y: &Vector<F>) -> Result<Vector<F>> {
    // y = tanh(a): da = d * (1 - y^2)
    let deriv: Vector<F> = Vector::from_vec(y.data().iter().map(|&v| F::one() - v * v).collect());
    hadamard(d, &deriv)
}

/// Backward through one attention application. Accumulates into the W_a and
/// W_c gradients and `dkeys`, and returns the gradient w.r.t. the query h.
fn attention_backward<F: Scalar>(
    cache: &AttentionCache<F>,
    d_h_tilde: &Vector<F>,
    keys: &[Vector<F>],
    w_a: &Matrix<F>,
    w_c: &Matrix<F>,
    g_w_a: &mut Matrix<F>,
    g_w_c: &mut Matrix<F>,
    dkeys: &mut [Vector<F>],
) -> Result<Vector<F>> {
    let hidden = cache.h.len();
    let du = tanh_backward(d_h_tilde, &cache.h_tilde)?;
    g_w_c.add_outer(&du, &cache.z)?;
    let dz = w_c.matvec_t(&du)?;
    let dcontext = Vector::from_vec(dz.data()[..hidden].to_vec());
    let mut dh = Vector::from_vec(dz.data()[hidden..].to_vec());

    // context = sum a_k key_k
    let mut da = Vec::with_capacity(keys.len());
    for (k, dk) in keys.iter().zip(dkeys.iter_mut()) {
        da.push(k.dot(&dcontext)?);
        let a_k = cache.weights.get(da.len() - 1);
        dk.add_scaled(&dcontext, a_k)?;
    }

    // a = softmax(s): ds_j = a_j (da_j - sum_i a_i da_i)
    let mut adot = F::zero();
    for (i, &d) in da.iter().enumerate() {
        adot = adot + cache.weights.get(i) * d;
    }
    let wat_h = w_a.matvec_t(&cache.h)?;
    for (j, key) in keys.iter().enumerate() {
        let ds = cache.weights.get(j) * (da[j] - adot);
        if ds == F::zero() {
            continue;
        }
        // s_j = h . (W_a key_j)
        dh.add_scaled(&cache.wak[j], ds)?;
        let scaled_h: Vector<F> =
            Vector::from_vec(cache.h.data().iter().map(|&x| x * ds).collect());
        g_w_a.add_outer(&scaled_h, key)?;
        dkeys[j].add_scaled(&wat_h, ds)?;
    }
    Ok(dh)
}

struct LayerBackward<F> {
    /// Gradient w.r.t. this layer's input at each step.
    dx: Vec<Vector<F>>,
    /// Gradient w.r.t. the layer's initial m (before step 0).
    dm_init: Vector<F>,
}

/// Sweep one layer backward across time. `d_into_m[t]` is the gradient
/// flowing into m_t from outside the layer (upper layer or output path).
fn layer_backward<F: Scalar>(
    weights: &LstmLayerWeights<F>,
    grads: &mut LstmLayerWeights<F>,
    caches: &[&crate::model::LstmStepCache<F>],
    d_into_m: &[Vector<F>],
) -> Result<LayerBackward<F>> {
    let hidden = weights.hidden();
    let steps = caches.len();
    let mut dm_rec = Vector::zeros(hidden);
    let mut dc_carry = Vector::zeros(hidden);
    let mut dx = vec![Vector::zeros(0); steps];
    for t in (0..steps).rev() {
        let cache = caches[t];
        let mut dm = d_into_m[t].clone();
        dm.add_scaled(&dm_rec, F::one())?;
        // m = o . c
        let do_ = hadamard(&dm, &cache.c)?;
        let mut dc = hadamard(&dm, &cache.o)?;
        dc.add_scaled(&dc_carry, F::one())?;
        // c = f . c_prev + i . g
        let df = hadamard(&dc, &cache.c_prev)?;
        let di = hadamard(&dc, &cache.g)?;
        let dg = hadamard(&dc, &cache.i)?;
        dc_carry = hadamard(&dc, &cache.f)?;

        let da_i = sigmoid_backward(&di, &cache.i)?;
        let da_f = sigmoid_backward(&df, &cache.f)?;
        let da_o = sigmoid_backward(&do_, &cache.o)?;
        let da_g = tanh_backward(&dg, &cache.g)?;

        grads.w_ix.add_outer(&da_i, &cache.x)?;
        grads.w_im.add_outer(&da_i, &cache.m_prev)?;
        grads.w_fx.add_outer(&da_f, &cache.x)?;
        grads.w_fm.add_outer(&da_f, &cache.m_prev)?;
        grads.w_ox.add_outer(&da_o, &cache.x)?;
        grads.w_om.add_outer(&da_o, &cache.m_prev)?;
        grads.w_cx.add_outer(&da_g, &cache.x)?;
        grads.w_cm.add_outer(&da_g, &cache.m_prev)?;

        let mut dxt = weights.w_ix.matvec_t(&da_i)?;
        dxt.add_scaled(&weights.w_fx.matvec_t(&da_f)?, F::one())?;
        dxt.add_scaled(&weights.w_ox.matvec_t(&da_o)?, F::one())?;
        dxt.add_scaled(&weights.w_cx.matvec_t(&da_g)?, F::one())?;
        dx[t] = dxt;

        dm_rec = weights.w_im.matvec_t(&da_i)?;
        dm_rec.add_scaled(&weights.w_fm.matvec_t(&da_f)?, F::one())?;
        dm_rec.add_scaled(&weights.w_om.matvec_t(&da_o)?, F::one())?;
        dm_rec.add_scaled(&weights.w_cm.matvec_t(&da_g)?, F::one())?;
    }
    Ok(LayerBackward {
        dx,
        dm_init: dm_rec,
    })
}

fn add_to_row<F: Scalar>(table: &mut Matrix<F>, row: usize, d: &Vector<F>) {
    for (x, &g) in table.row_mut(row).iter_mut().zip(d.data()) {
        *x += g;
    }
}

/// Exact gradients of [`cross_entropy`] w.r.t. every trainable tensor of
/// the model, for one teacher-forced example.
pub fn backward<F: Scalar>(
    model: &Model<F>,
    encoded: &Encoded<F>,
    fwd: &Forward<F>,
    targets: &[TokenId],
) -> Result<Gradients<F>> {
    let steps = fwd.logits.len();
    if steps != targets.len() {
        return Err(Error::shape(
            "backward",
            format!("{steps} steps"),
            format!("{} targets", targets.len()),
        ));
    }
    let num_layers = model.config.layers;
    let hidden = model.config.hidden;
    let inv_steps = F::from_f64(1.0 / steps as f64);
    let mut grads = Gradients::zeros_like(model);
    let mut dkeys: Vec<Vector<F>> = encoded
        .keys
        .iter()
        .map(|k| Vector::zeros(k.len()))
        .collect();

    // Output path: softmax cross-entropy then (optionally) attention, down
    // into the top layer's m at each step.
    let mut d_into_m: Vec<Vec<Vector<F>>> =
        vec![vec![Vector::zeros(hidden); steps]; num_layers];
    for t in 0..steps {
        let mut dlogit = softmax(&fwd.logits[t])?;
        let target = targets[t];
        dlogit.data_mut()[target] = dlogit.get(target) - F::one();
        for x in dlogit.data_mut() {
            *x = *x * inv_steps;
        }
        let top: &Vector<F> = match &fwd.attn[t] {
            Some(cache) => &cache.h_tilde,
            None => &fwd.steps[t][num_layers - 1].m,
        };
        grads.w_out.add_outer(&dlogit, top)?;
        let dout = model.w_out.matvec_t(&dlogit)?;
        let dm_top = match &fwd.attn[t] {
            Some(cache) => {
                let EncoderWeights::AttentionLabels { w_a, w_c, .. } = &model.encoder else {
                    return Err(Error::Config(
                        "attention cache present without attention weights".into(),
                    ));
                };
                let (g_w_a, g_w_c) = match &mut grads.encoder {
                    EncoderWeights::AttentionLabels { w_a, w_c, .. } => (w_a, w_c),
                    _ => unreachable!("gradients mirror the model's encoder variant"),
                };
                attention_backward(cache, &dout, &encoded.keys, w_a, w_c, g_w_a, g_w_c, &mut dkeys)?
            }
            None => dout,
        };
        d_into_m[num_layers - 1][t] = dm_top;
    }

    // Decoder layers, top down; each layer's dx feeds the layer below.
    let mut dq0 = Vector::zeros(hidden);
    for l in (0..num_layers).rev() {
        let caches: Vec<&crate::model::LstmStepCache<F>> =
            (0..steps).map(|t| &fwd.steps[t][l]).collect();
        let out = layer_backward(&model.layers[l], &mut grads.layers[l], &caches, &d_into_m[l])?;
        if l > 0 {
            for t in 0..steps {
                d_into_m[l - 1][t].add_scaled(&out.dx[t], F::one())?;
            }
        } else {
            for t in 0..steps {
                add_to_row(&mut grads.embeddings, fwd.input_ids[t], &out.dx[t]);
            }
            // Layer 1's initial m is the (projected) encoder output.
            dq0 = out.dm_init;
        }
    }

    // Initial-state path into the encoder.
    let dq = match (&model.q_proj, &mut grads.q_proj) {
        (Some(w), Some(g)) => {
            g.add_outer(&dq0, &encoded.q)?;
            w.matvec_t(&dq0)?
        }
        (None, None) => dq0,
        _ => unreachable!("gradients mirror the model's projection"),
    };
    encoder_backward(model, &mut grads, encoded, dq, &dkeys)?;
    Ok(grads)
}

fn encoder_backward<F: Scalar>(
    model: &Model<F>,
    grads: &mut Gradients<F>,
    encoded: &Encoded<F>,
    dq: Vector<F>,
    dkeys: &[Vector<F>],
) -> Result<()> {
    match (&model.encoder, &encoded.cache, &mut grads.encoder) {
        (
            EncoderWeights::ImageOnly { .. },
            EncoderCache::ImageOnly { p },
            EncoderWeights::ImageOnly { w1: g_w1, b1: g_b1 },
        ) => {
            g_w1.add_outer(&dq, p)?;
            g_b1.add_scaled(&dq, F::one())?;
        }
        (
            EncoderWeights::GloveAverage { w2, .. },
            EncoderCache::GloveAverage { p, mean, label_ids },
            EncoderWeights::GloveAverage { w2: g_w2, b2: g_b2 },
        ) => {
            let z = concat(p, mean);
            g_w2.add_outer(&dq, &z)?;
            g_b2.add_scaled(&dq, F::one())?;
            let dz = w2.matvec_t(&dq)?;
            let dmean = Vector::from_vec(dz.data()[p.len()..].to_vec());
            if label_ids.is_empty() {
                add_to_row(&mut grads.embeddings, UNK_ID, &dmean);
            } else {
                let share = F::from_f64(1.0 / label_ids.len() as f64);
                let scaled: Vector<F> =
                    Vector::from_vec(dmean.data().iter().map(|&x| x * share).collect());
                for &id in label_ids {
                    add_to_row(&mut grads.embeddings, id, &scaled);
                }
            }
        }
        (
            EncoderWeights::AttentionLabels { lstm, .. },
            EncoderCache::AttentionLabels { p, steps, label_ids },
            EncoderWeights::AttentionLabels {
                w3: g_w3,
                b3: g_b3,
                lstm: g_lstm,
                ..
            },
        ) => {
            let hidden = lstm.hidden();
            let n = steps.len();
            // Step 0 is the image step; steps 1..n produced the keys.
            let mut d_into_m = vec![Vector::zeros(hidden); n];
            for (j, dk) in dkeys.iter().enumerate() {
                d_into_m[j + 1].add_scaled(dk, F::one())?;
            }
            d_into_m[n - 1].add_scaled(&dq, F::one())?;
            let caches: Vec<&crate::model::LstmStepCache<F>> = steps.iter().collect();
            let out = layer_backward(lstm, g_lstm, &caches, &d_into_m)?;
            // x_0 = W_3 p + b_3; later inputs are label embeddings.
            g_w3.add_outer(&out.dx[0], p)?;
            g_b3.add_scaled(&out.dx[0], F::one())?;
            for (s, &id) in label_ids.iter().enumerate() {
                add_to_row(&mut grads.embeddings, id, &out.dx[s + 1]);
            }
        }
        _ => {
            return Err(Error::Config(
                "encoder weights, cache, and gradients disagree on the variant".into(),
            ))
        }
    }
    Ok(())
}

/// One teacher-forced example pass: loss plus gradients.
pub fn example_pass<F: Scalar>(
    model: &Model<F>,
    image: &Vector<F>,
    label_ids: &[TokenId],
    caption_ids: &[TokenId],
) -> Result<(f64, Gradients<F>)> {
    if caption_ids.len() < 2 {
        return Err(Error::Empty("caption"));
    }
    let encoded = model.encode(image, label_ids)?;
    let input = &caption_ids[..caption_ids.len() - 1];
    let targets = &caption_ids[1..];
    let fwd = model.forward(&encoded, input)?;
    let loss = cross_entropy(&fwd.logits, targets)?.to_f64();
    let grads = backward(model, &encoded, &fwd, targets)?;
    Ok((loss, grads))
}

/// Loss only, for evaluation and finite differences.
pub fn example_loss<F: Scalar>(
    model: &Model<F>,
    image: &Vector<F>,
    label_ids: &[TokenId],
    caption_ids: &[TokenId],
) -> Result<f64> {
    if caption_ids.len() < 2 {
        return Err(Error::Empty("caption"));
    }
    let encoded = model.encode(image, label_ids)?;
    let input = &caption_ids[..caption_ids.len() - 1];
    let targets = &caption_ids[1..];
    let fwd = model.forward(&encoded, input)?;
    Ok(cross_entropy(&fwd.logits, targets)?.to_f64())
}

/// |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1e-8f64.max(analytic.abs() + numeric.abs())
}

/// Compare analytic gradients against 64-bit central finite differences.
/// Checks every trainable entry on small models; on larger ones a seeded
/// stratified sample of at least 500 entries. Returns the max relative
/// error.
pub fn grad_check(
    model: &mut Model<f64>,
    image: &Vector<f64>,
    label_ids: &[TokenId],
    caption_ids: &[TokenId],
    epsilon: f64,
) -> Result<f64> {
    let (loss, analytic) = example_pass(model, image, label_ids, caption_ids)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss}")));
    }
    let analytic_tensors: Vec<Vec<f64>> = analytic
        .trainable_tensors()
        .into_iter()
        .map(|t| t.to_vec())
        .collect();
    let sizes: Vec<usize> = {
        let ts = model.trainable_tensors_mut();
        ts.iter().map(|t| t.len()).collect()
    };
    let total: usize = sizes.iter().sum();
    const FULL_LIMIT: usize = 5000;
    const MIN_SAMPLED: usize = 500;
    let per_tensor_cap = if total <= FULL_LIMIT {
        usize::MAX
    } else {
        (MIN_SAMPLED / sizes.len().max(1) + 1).max(64)
    };
    let mut sample_rng = Prng::new(0xFD);
    let mut max_err = 0.0f64;
    for (ti, &len) in sizes.iter().enumerate() {
        let indices: Vec<usize> = if len <= per_tensor_cap {
            (0..len).collect()
        } else {
            (0..per_tensor_cap).map(|_| sample_rng.below(len)).collect()
        };
        for j in indices {
            let orig = {
                let mut ts = model.trainable_tensors_mut();
                let orig = ts[ti][j];
                ts[ti][j] = orig + epsilon;
                orig
            };
            let loss_plus = example_loss(model, image, label_ids, caption_ids)?;
            {
                let mut ts = model.trainable_tensors_mut();
                ts[ti][j] = orig - epsilon;
            }
            let loss_minus = example_loss(model, image, label_ids, caption_ids)?;
            {
                let mut ts = model.trainable_tensors_mut();
                ts[ti][j] = orig;
            }
            if !loss_plus.is_finite() || !loss_minus.is_finite() {
                return Err(Error::Numeric("non-finite loss during perturbation".into()));
            }
            let numeric = (loss_plus - loss_minus) / (2.0 * epsilon);
            let err = relative_error(analytic_tensors[ti][j], numeric);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Momentum { mu: f64 },
}

/// theta <- theta - lr * g
pub fn sgd_step<F: Scalar>(model: &mut Model<F>, grads: &Gradients<F>, lr: f64) -> Result<()> {
    let g = grads.trainable_tensors();
    let mut p = model.trainable_tensors_mut();
    check_aligned(&p, &g)?;
    let lr = F::from_f64(lr);
    for (param, grad) in p.iter_mut().zip(g) {
        for (x, &d) in param.iter_mut().zip(grad) {
            *x = *x - lr * d;
        }
    }
    Ok(())
}

/// v <- mu v - lr g; theta <- theta + v
pub fn momentum_step<F: Scalar>(
    model: &mut Model<F>,
    grads: &Gradients<F>,
    velocity: &mut Gradients<F>,
    lr: f64,
    mu: f64,
) -> Result<()> {
    {
        let g = grads.trainable_tensors();
        let mut v = velocity.trainable_tensors_mut();
        check_aligned_mut(&v, &g)?;
        let lr = F::from_f64(lr);
        let mu = F::from_f64(mu);
        for (vel, grad) in v.iter_mut().zip(g) {
            for (x, &d) in vel.iter_mut().zip(grad) {
                *x = mu * *x - lr * d;
            }
        }
    }
    let v = velocity.trainable_tensors();
    let mut p = model.trainable_tensors_mut();
    check_aligned(&p, &v)?;
    for (param, vel) in p.iter_mut().zip(v) {
        for (x, &d) in param.iter_mut().zip(vel) {
            *x = *x + d;
        }
    }
    Ok(())
}

fn check_aligned<F>(params: &[&mut [F]], grads: &[&[F]]) -> Result<()> {
    if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
        return Err(Error::shape(
            "optimizer_step",
            format!("{} param tensors", params.len()),
            format!("{} grad tensors", grads.len()),
        ));
    }
    Ok(())
}

fn check_aligned_mut<F>(a: &[&mut [F]], b: &[&[F]]) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.len() != y.len()) {
        return Err(Error::shape(
            "momentum_velocity",
            format!("{} tensors", a.len()),
            format!("{} tensors", b.len()),
        ));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrDecay {
    pub factor: f64,
    pub every_n_epochs: usize,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub lr_decay: LrDecay,
    pub batch_size: usize,
    pub epochs: usize,
    pub layers: usize,
    pub hidden: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub freeze_embeddings: bool,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.1,
            lr_decay: LrDecay {
                factor: 0.5,
                every_n_epochs: 5,
            },
            batch_size: 16,
            epochs: 10,
            layers: 1,
            hidden: crate::model::DEFAULT_HIDDEN,
            seed: 42,
            clip_norm: 5.0,
            freeze_embeddings: false,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validation_errors(&self) -> Vec<String> {
        let mut errors = Vec::new();
        if !(self.learning_rate > 0.0) {
            errors.push(format!("learning rate must be > 0, got {}", self.learning_rate));
        }
        if let OptimizerKind::Momentum { mu } = self.optimizer {
            if !(0.0..1.0).contains(&mu) {
                errors.push(format!("momentum mu must be in [0, 1), got {mu}"));
            }
        }
        if self.batch_size == 0 {
            errors.push("batch size must be >= 1".into());
        }
        if self.epochs == 0 {
            errors.push("epochs must be >= 1".into());
        }
        if self.layers == 0 || self.layers > crate::model::MAX_LAYERS {
            errors.push(format!(
                "layers must be 1..={}, got {}",
                crate::model::MAX_LAYERS,
                self.layers
            ));
        }
        if !(self.clip_norm > 0.0) {
            errors.push(format!("clip norm must be > 0, got {}", self.clip_norm));
        }
        if !(self.lr_decay.factor > 0.0) {
            errors.push(format!(
                "lr decay factor must be > 0, got {}",
                self.lr_decay.factor
            ));
        }
        if self.lr_decay.every_n_epochs == 0 {
            errors.push("lr decay interval must be >= 1 epoch".into());
        }
        if self.threads == 0 {
            errors.push("threads must be >= 1".into());
        }
        errors
    }

    pub fn validate(&self) -> Result<()> {
        let errors = self.validation_errors();
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors.join("; ")))
        }
    }

    /// Learning rate for a 0-based epoch index under the decay schedule.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let k = (epoch / self.lr_decay.every_n_epochs) as i32;
        self.learning_rate * self.lr_decay.factor.powi(k)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_perplexity: f64,
}

/// Map `f` over items on up to `threads` workers, preserving input order in
/// the output regardless of scheduling.
pub fn parallel_map_ordered<T, U, G>(items: &[T], threads: usize, f: G) -> Vec<U>
where
    T: Sync,
    U: Send,
    G: Fn(&T) -> U + Sync,
{
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let workers = threads.min(items.len());
    let chunk = items.len().div_ceil(workers);
    let mut out: Vec<Option<U>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let f = &f;
        let mut handles = Vec::new();
        for slice in items.chunks(chunk) {
            handles.push(scope.spawn(move || slice.iter().map(f).collect::<Vec<U>>()));
        }
        let mut pos = 0;
        for handle in handles {
            for u in handle.join().expect("worker thread panicked") {
                out[pos] = Some(u);
                pos += 1;
            }
        }
    });
    out.into_iter().map(|o| o.expect("all slots filled")).collect()
}

/// Train a fresh model on `dataset`. `images[i]` is the embedding for
/// `dataset.examples[i]`. Returns the model and per-epoch metrics; the
/// eval perplexity column is measured on the training captions themselves.
pub fn train<F: Scalar>(
    dataset: &Dataset,
    images: &[Vector<F>],
    embeddings: crate::embeddings::EmbeddingMatrix<F>,
    variant: EncoderVariant,
    config: &TrainConfig,
) -> Result<(Model<F>, Vec<EpochMetrics>)> {
    config.validate()?;
    if dataset.examples.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    if images.len() != dataset.examples.len() {
        return Err(Error::shape(
            "train_images",
            format!("{} examples", dataset.examples.len()),
            format!("{} image vectors", images.len()),
        ));
    }
    let image_dim = images[0].len();
    if images.iter().any(|p| p.len() != image_dim) {
        return Err(Error::Config("image vectors differ in length".into()));
    }
    let model_config = ModelConfig {
        variant,
        layers: config.layers,
        hidden: config.hidden,
        embed_dim: embeddings.dim(),
        image_dim,
    };
    let mut model = Model::init(dataset.vocab.clone(), embeddings, model_config, config.seed)?;
    model.embeddings.trainable = !config.freeze_embeddings;

    let mut shuffle_rng = Prng::new(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut velocity = Gradients::zeros_like(&model);
    let mut metrics = Vec::with_capacity(config.epochs);
    let n = dataset.examples.len();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..config.epochs {
        let lr = config.lr_at_epoch(epoch);
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss_sum = 0.0f64;
        for (batch_index, batch) in order.chunks(config.batch_size).enumerate() {
            let results = parallel_map_ordered(batch, config.threads, |&i| {
                let example = &dataset.examples[i];
                example_pass(&model, &images[i], &example.label_ids, &example.caption_ids)
            });
            let mut total = Gradients::zeros_like(&model);
            for result in results {
                let (loss, grads) = result?;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss in epoch {}, batch {}",
                        epoch + 1,
                        batch_index + 1
                    )));
                }
                epoch_loss_sum += loss;
                total.add_assign(&grads);
            }
            total.scale(F::from_f64(1.0 / batch.len() as f64));
            clip_gradients(&mut total, config.clip_norm);
            match config.optimizer {
                OptimizerKind::Sgd => sgd_step(&mut model, &total, lr)?,
                OptimizerKind::Momentum { mu } => {
                    momentum_step(&mut model, &total, &mut velocity, lr, mu)?
                }
            }
        }
        let nlls = parallel_map_ordered(&order, config.threads, |&i| {
            let example = &dataset.examples[i];
            example_loss(&model, &images[i], &example.label_ids, &example.caption_ids)
        });
        let mut nll_sum = 0.0;
        for nll in nlls {
            nll_sum += nll?;
        }
        metrics.push(EpochMetrics {
            epoch: epoch + 1,
            train_loss: epoch_loss_sum / n as f64,
            eval_perplexity: (nll_sum / n as f64).exp(),
        });
    }
    Ok((model, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{RawExample, Vocabulary, END_ID, START_ID};
    use crate::embeddings::EmbeddingMatrix;

    fn v64(xs: &[f64]) -> Vector<f64> {
        Vector::from_f64_slice(xs)
    }

    fn toy_vocab(extra: usize) -> Vocabulary {
        let caption: Vec<String> = (0..extra)
            .flat_map(|i| {
                let w = format!("w{i:02}");
                vec![w.clone(), w.clone(), w]
            })
            .collect();
        Vocabulary::build(&[caption], 3)
    }

    fn tiny_model(variant: EncoderVariant, layers: usize, seed: u64) -> Model<f64> {
        let vocab = toy_vocab(5);
        let emb = EmbeddingMatrix::seeded_random(vocab.len(), 4, seed ^ 1);
        Model::init(
            vocab,
            emb,
            ModelConfig {
                variant,
                layers,
                hidden: 3,
                embed_dim: 4,
                image_dim: 5,
            },
            seed,
        )
        .unwrap()
    }

    /// Redraw every parameter at a larger scale. The production init range
    /// leaves toy-model states so small that some true gradients sit at
    /// ~1e-8, where finite differences are pure rounding noise; O(1)
    /// weights keep all gradients comfortably above that without
    /// saturating the gates.
    fn boost_weights(model: &mut Model<f64>, seed: u64, scale: f64) {
        let mut rng = Prng::new(seed);
        for t in model.all_tensors_mut() {
            for x in t {
                *x = rng.uniform(-scale, scale);
            }
        }
    }

    #[test]
    fn cross_entropy_uniform_is_log_vocab() {
        let logits = vec![Vector::<f64>::zeros(7), Vector::zeros(7)];
        let loss = cross_entropy(&logits, &[2, 4]).unwrap();
        assert!((loss - 7.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_model_near_zero() {
        let mut logits = Vector::<f64>::zeros(4);
        logits.data_mut()[2] = 120.0;
        let loss = cross_entropy(&[logits], &[2]).unwrap();
        assert!(loss >= 0.0);
        assert!(loss < 1e-20);
    }

    #[test]
    fn cross_entropy_closed_form_two_classes() {
        // logits (0, ln 3) put probability 3/4 on index 1.
        let logits: Vector<f64> = Vector::from_f64_slice(&[0.0, 3.0f64.ln()]);
        let loss = cross_entropy(&[logits], &[1]).unwrap();
        assert!((loss - -(0.75f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_length_mismatch_errors() {
        let logits = vec![Vector::<f64>::zeros(4)];
        assert!(cross_entropy(&logits, &[1, 2]).is_err());
    }

    #[test]
    fn untouched_embedding_rows_get_zero_gradient() {
        let model = tiny_model(EncoderVariant::ImageOnly, 1, 3);
        let image = v64(&[0.5, -0.5, 1.0, 0.0, 0.3]);
        let caption = vec![START_ID, 3, 4, END_ID];
        let (_, grads) = example_pass(&model, &image, &[], &caption).unwrap();
        // Row 5 and up were never inputs (targets alone produce no
        // embedding gradient with an untied output projection).
        for row in 5..model.vocab_size() {
            assert!(grads.embeddings.row(row).iter().all(|&x| x == 0.0));
        }
        assert!(grads.embeddings.row(3).iter().any(|&x| x != 0.0));
    }

    #[test]
    fn near_perfect_model_has_vanishing_gradients() {
        // Hand-built model whose END logit towers over the rest at every
        // step, so softmax(logits) is a one-hot on the target up to ~e^-150
        // and every gradient entry collapses with it.
        let mut model = tiny_model(EncoderVariant::ImageOnly, 1, 5);
        for t in model.all_tensors_mut() {
            for x in t {
                *x = 0.0;
            }
        }
        for x in model.embeddings.table.row_mut(START_ID) {
            *x = 1.0;
        }
        // Drive o and g into saturation so the state is solidly nonzero.
        for x in model.layers[0].w_ox.data_mut() {
            *x = 10.0;
        }
        for x in model.layers[0].w_cx.data_mut() {
            *x = 10.0;
        }
        for x in model.w_out.row_mut(END_ID) {
            *x = 100.0;
        }
        let image = v64(&[0.0; 5]);
        let caption = vec![START_ID, END_ID];
        let (loss, grads) = example_pass(&model, &image, &[], &caption).unwrap();
        assert!((0.0..1e-20).contains(&loss), "loss {loss}");
        let mut saw_nonzero = false;
        for t in grads.all_tensors() {
            for &g in t {
                assert!(g.abs() < 1e-20, "gradient entry {g}");
                saw_nonzero |= g != 0.0;
            }
        }
        // The off-target softmax mass is ~e^-150, tiny but not zero.
        assert!(saw_nonzero);
    }

    #[test]
    fn gradient_check_variant1_single_layer() {
        let mut model = tiny_model(EncoderVariant::ImageOnly, 1, 7);
        boost_weights(&mut model, 107, 0.5);
        let image = v64(&[0.5, -0.5, 1.0, 0.0, 0.3]);
        let caption = vec![START_ID, 3, 5, 4, END_ID];
        let err = grad_check(&mut model, &image, &[], &caption, 1e-5).unwrap();
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn gradient_check_variant2_with_labels() {
        // The longer caption matters: a two-layer stack starts its top
        // layer at zero state, and short unrolls leave that layer's
        // recurrent-weight gradients down in finite-difference noise.
        let mut model = tiny_model(EncoderVariant::GloveAverage, 2, 9);
        boost_weights(&mut model, 103, 1.0);
        let image = v64(&[0.5, -0.5, 1.0, 0.0, 0.3]);
        let caption = vec![START_ID, 3, 5, 4, 6, 3, 7, 5, END_ID];
        let err = grad_check(&mut model, &image, &[3, 5], &caption, 1e-5).unwrap();
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn gradient_check_variant3_attention() {
        let mut model = tiny_model(EncoderVariant::AttentionLabels, 2, 11);
        boost_weights(&mut model, 106, 1.0);
        let image = v64(&[0.5, -0.5, 1.0, 0.0, 0.3]);
        let caption = vec![START_ID, 3, 5, 4, 6, 3, 7, 5, END_ID];
        let err = grad_check(&mut model, &image, &[4, 5], &caption, 1e-5).unwrap();
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn gradient_check_frozen_embeddings() {
        let mut model = tiny_model(EncoderVariant::ImageOnly, 1, 13);
        boost_weights(&mut model, 113, 0.5);
        model.embeddings.trainable = false;
        let image = v64(&[0.5, -0.5, 1.0, 0.0, 0.3]);
        let caption = vec![START_ID, 3, END_ID];
        let err = grad_check(&mut model, &image, &[], &caption, 1e-5).unwrap();
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn scaled_gradient_is_detectable() {
        // Doubling the analytic value against a matching numeric value
        // produces |2a - a| / (|2a| + |a|) = 1/3.
        assert!((relative_error(2.0, 1.0) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn relative_error_zero_edge() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
    }

    #[test]
    fn sgd_zero_gradient_is_identity() {
        let mut model = tiny_model(EncoderVariant::ImageOnly, 1, 17);
        let before: Vec<Vec<f64>> = model.all_tensors().iter().map(|t| t.to_vec()).collect();
        let grads = Gradients::zeros_like(&model);
        sgd_step(&mut model, &grads, 0.5).unwrap();
        let after: Vec<Vec<f64>> = model.all_tensors().iter().map(|t| t.to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn sgd_zero_lr_is_identity() {
        let mut model = tiny_model(EncoderVariant::ImageOnly, 1, 17);
        let image = v64(&[0.5, -0.5, 1.0, 0.0, 0.3]);
        let (_, grads) = example_pass(&model, &image, &[], &[START_ID, 3, END_ID]).unwrap();
        let before: Vec<Vec<f64>> = model.all_tensors().iter().map(|t| t.to_vec()).collect();
        sgd_step(&mut model, &grads, 0.0).unwrap();
        let after: Vec<Vec<f64>> = model.all_tensors().iter().map(|t| t.to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn momentum_mu_zero_equals_sgd() {
        let mut a = tiny_model(EncoderVariant::ImageOnly, 1, 19);
        let mut b = a.clone();
        let image = v64(&[0.5, -0.5, 1.0, 0.0, 0.3]);
        let (_, grads) = example_pass(&a, &image, &[], &[START_ID, 3, 4, END_ID]).unwrap();
        sgd_step(&mut a, &grads, 0.1).unwrap();
        let mut velocity = Gradients::zeros_like(&b);
        momentum_step(&mut b, &grads, &mut velocity, 0.1, 0.0).unwrap();
        for (ta, tb) in a.all_tensors().iter().zip(b.all_tensors()) {
            assert_eq!(ta, &tb);
        }
    }

    #[test]
    fn momentum_two_steps_constant_gradient() {
        // mu=0.9, lr=1: v1 = -g, v2 = -1.9g, displacement -2.9g.
        let mut model = tiny_model(EncoderVariant::ImageOnly, 1, 23);
        let start: Vec<Vec<f64>> = model.all_tensors().iter().map(|t| t.to_vec()).collect();
        let mut grads = Gradients::zeros_like(&model);
        for t in grads.all_tensors_mut() {
            for x in t {
                *x = 0.01;
            }
        }
        let mut velocity = Gradients::zeros_like(&model);
        momentum_step(&mut model, &grads, &mut velocity, 1.0, 0.9).unwrap();
        momentum_step(&mut model, &grads, &mut velocity, 1.0, 0.9).unwrap();
        let end: Vec<Vec<f64>> = model.all_tensors().iter().map(|t| t.to_vec()).collect();
        for (ts, te) in start.iter().zip(&end) {
            for (s, e) in ts.iter().zip(te) {
                assert!(((e - s) - -2.9 * 0.01).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn clipping_caps_global_norm() {
        let model = tiny_model(EncoderVariant::ImageOnly, 1, 29);
        let mut grads = Gradients::zeros_like(&model);
        for t in grads.all_tensors_mut() {
            for x in t {
                *x = 1.0;
            }
        }
        let before = grads.global_norm();
        assert!(before > 5.0);
        clip_gradients(&mut grads, 5.0);
        assert!((grads.global_norm() - 5.0).abs() < 1e-6);
    }

    #[test]
    fn clipping_leaves_small_gradients_alone() {
        let model = tiny_model(EncoderVariant::ImageOnly, 1, 29);
        let mut grads = Gradients::zeros_like(&model);
        grads.embeddings.set(0, 0, 0.25);
        let data_before = grads.embeddings.get(0, 0);
        clip_gradients(&mut grads, 5.0);
        assert_eq!(grads.embeddings.get(0, 0), data_before);
    }

    fn toy_dataset() -> (Dataset, Vec<Vector<f64>>) {
        let raws: Vec<RawExample> = (0..6)
            .map(|i| RawExample {
                image_id: format!("img{}", i % 2),
                label: "cat".into(),
                caption: format!("w{i} cat sat on the mat"),
            })
            .collect();
        let dataset = Dataset::build(&raws, 1);
        let mut rng = Prng::new(99);
        let images: Vec<Vector<f64>> = dataset
            .examples
            .iter()
            .map(|_| Vector::from_vec((0..5).map(|_| rng.uniform(-1.0, 1.0)).collect()))
            .collect();
        (dataset, images)
    }

    #[test]
    fn loss_non_increasing_over_first_sgd_steps() {
        let (dataset, images) = toy_dataset();
        let emb = EmbeddingMatrix::seeded_random(dataset.vocab.len(), 4, 31);
        let config = ModelConfig {
            variant: EncoderVariant::ImageOnly,
            layers: 1,
            hidden: 4,
            embed_dim: 4,
            image_dim: 5,
        };
        let mut model = Model::init(dataset.vocab.clone(), emb, config, 37).unwrap();
        let batch_loss = |model: &Model<f64>| -> f64 {
            dataset
                .examples
                .iter()
                .zip(&images)
                .map(|(e, p)| example_loss(model, p, &e.label_ids, &e.caption_ids).unwrap())
                .sum::<f64>()
                / dataset.examples.len() as f64
        };
        let mut prev = batch_loss(&model);
        for _ in 0..10 {
            let mut total = Gradients::zeros_like(&model);
            for (e, p) in dataset.examples.iter().zip(&images) {
                let (_, g) = example_pass(&model, p, &e.label_ids, &e.caption_ids).unwrap();
                total.add_assign(&g);
            }
            total.scale(1.0 / dataset.examples.len() as f64);
            sgd_step(&mut model, &total, 1e-3).unwrap();
            let now = batch_loss(&model);
            assert!(now <= prev + 1e-12, "loss rose from {prev} to {now}");
            prev = now;
        }
    }

    #[test]
    fn train_same_seed_same_metrics() {
        let (dataset, images) = toy_dataset();
        let config = TrainConfig {
            epochs: 3,
            hidden: 4,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let run = || {
            let emb = EmbeddingMatrix::<f64>::seeded_random(dataset.vocab.len(), 4, 41);
            train(&dataset, &images, emb, EncoderVariant::ImageOnly, &config).unwrap()
        };
        let (model_a, metrics_a) = run();
        let (model_b, metrics_b) = run();
        assert_eq!(metrics_a, metrics_b);
        for (ta, tb) in model_a.all_tensors().iter().zip(model_b.all_tensors()) {
            assert_eq!(ta, &tb);
        }
    }

    #[test]
    fn train_is_thread_count_invariant() {
        let (dataset, images) = toy_dataset();
        let base = TrainConfig {
            epochs: 2,
            hidden: 4,
            batch_size: 6,
            ..TrainConfig::default()
        };
        let run = |threads: usize| {
            let emb = EmbeddingMatrix::<f64>::seeded_random(dataset.vocab.len(), 4, 43);
            let config = TrainConfig { threads, ..base.clone() };
            train(&dataset, &images, emb, EncoderVariant::ImageOnly, &config).unwrap()
        };
        let (model_1, metrics_1) = run(1);
        let (model_3, metrics_3) = run(3);
        assert_eq!(metrics_1, metrics_3);
        for (ta, tb) in model_1.all_tensors().iter().zip(model_3.all_tensors()) {
            assert_eq!(ta, &tb);
        }
    }

    #[test]
    fn train_memorizes_single_example() {
        let raws = vec![RawExample {
            image_id: "img0".into(),
            label: "cat".into(),
            caption: "the cat sat".into(),
        }];
        let dataset = Dataset::build(&raws, 1);
        let images = vec![v64(&[0.4, -0.2, 0.9, 0.1, -0.5])];
        let emb = EmbeddingMatrix::<f64>::seeded_random(dataset.vocab.len(), 6, 47);
        // Zero-bias gates leave early logits near zero, so the loss sits
        // at ln(V) for many epochs before the weights co-amplify; the
        // learning rate has to be large enough to leave that plateau.
        let config = TrainConfig {
            epochs: 150,
            hidden: 8,
            batch_size: 1,
            learning_rate: 5.0,
            lr_decay: LrDecay { factor: 1.0, every_n_epochs: 1 },
            ..TrainConfig::default()
        };
        let (model, metrics) = train(&dataset, &images, emb, EncoderVariant::ImageOnly, &config).unwrap();
        let final_loss = example_loss(
            &model,
            &images[0],
            &dataset.examples[0].label_ids,
            &dataset.examples[0].caption_ids,
        )
        .unwrap();
        assert!(
            final_loss < 0.05,
            "final loss {final_loss}, last metrics {:?}",
            metrics.last()
        );
    }

    #[test]
    fn lr_schedule_halves_on_interval() {
        let config = TrainConfig {
            learning_rate: 0.2,
            lr_decay: LrDecay { factor: 0.5, every_n_epochs: 5 },
            ..TrainConfig::default()
        };
        assert_eq!(config.lr_at_epoch(0), 0.2);
        assert_eq!(config.lr_at_epoch(4), 0.2);
        assert_eq!(config.lr_at_epoch(5), 0.1);
        assert_eq!(config.lr_at_epoch(14), 0.05);
    }

    #[test]
    fn config_validation_lists_all_problems() {
        let config = TrainConfig {
            learning_rate: -1.0,
            batch_size: 0,
            layers: 7,
            ..TrainConfig::default()
        };
        let errors = config.validation_errors();
        assert_eq!(errors.len(), 3, "{errors:?}");
    }

    #[test]
    fn parallel_map_preserves_order() {
        let items: Vec<usize> = (0..37).collect();
        let doubled = parallel_map_ordered(&items, 4, |&x| x * 2);
        assert_eq!(doubled, items.iter().map(|&x| x * 2).collect::<Vec<_>>());
    }
}
