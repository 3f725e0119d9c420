//! Caption generation: greedy decoding, beam search, and a sampled beam
//! variant that draws each hypothesis's children from its tempered
//! top-`top_m` next-word distribution.

use std::cmp::Ordering;

use crate::corpus::{tokenize, TokenId, Vocabulary, END_ID, START_ID};
use crate::error::{Error, Result};
use crate::model::{Encoded, LstmState, Model};
use crate::numerics::{Scalar, Vector};
use crate::rng::Prng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam,
    TemperatureBeam,
}

/// Decoding knobs. `k` is the beam width; `top_m` bounds the sampling
/// pool for [`DecodeMode::TemperatureBeam`].
#[derive(Clone, Debug)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub k: usize,
    pub temperature: f64,
    pub top_m: usize,
    /// Generated tokens allowed per caption, the end marker included.
    pub max_len: usize,
    pub seed: u64,
    /// Rank by mean per-token log-probability instead of the sum.
    pub length_normalize: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            mode: DecodeMode::Beam,
            k: 5,
            temperature: 1.0,
            top_m: 100,
            max_len: 30,
            seed: 42,
            length_normalize: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config(format!("beam width must be at least 1, got {}", self.k)));
        }
        if self.top_m < self.k {
            return Err(Error::Config(format!(
                "sampling pool ({}) must be at least the beam width ({})",
                self.top_m, self.k
            )));
        }
        if self.max_len < 1 {
            return Err(Error::Config("max caption length must be at least 1".into()));
        }
        if !self.temperature.is_finite() || self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// A finished caption: token ids bracketed by the start marker (and the
/// end marker unless length-truncated) plus the summed log-probability
/// of everything after the start marker.
#[derive(Clone, Debug)]
pub struct ScoredCaption {
    pub token_ids: Vec<TokenId>,
    pub log_prob: f64,
}

struct Hypothesis<F> {
    token_ids: Vec<TokenId>,
    log_prob: f64,
    state: LstmState<F>,
    finished: bool,
}

/// Sharpen (T < 1) or flatten (T > 1) a probability distribution:
/// p_i^(1/T) renormalized. Ranking is preserved for every positive
/// temperature. Computed in log space so small entries survive the
/// exponent; exact zeros stay exactly zero.
pub fn apply_temperature<F: Scalar>(p: &Vector<F>, temperature: f64) -> Result<Vector<F>> {
    if !temperature.is_finite() || temperature <= 0.0 {
        return Err(Error::Config(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    if p.is_empty() {
        return Err(Error::Empty("apply_temperature"));
    }
    let mut sum = 0.0;
    for &x in p.data() {
        let x = x.to_f64();
        if !(x >= 0.0) {
            return Err(Error::Numeric(format!("probability entry {x} is negative or NaN")));
        }
        sum += x;
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Numeric(format!("probabilities must sum to 1, got {sum}")));
    }
    let logs: Vec<f64> = p.data().iter().map(|&x| x.to_f64().ln() / temperature).collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logs.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    Ok(Vector::from_vec(
        logs.iter().map(|&l| F::from_f64((l - lse).exp())).collect(),
    ))
}

/// Pick the single most probable token at every step until the end
/// marker or `max_len` generated tokens. Ties go to the lowest id.
pub fn greedy_decode<F: Scalar>(
    model: &Model<F>,
    encoded: &Encoded<F>,
    max_len: usize,
) -> Result<Vec<TokenId>> {
    let mut state = model.initial_state(encoded)?;
    let mut ids = vec![START_ID];
    for _ in 0..max_len {
        let last = *ids.last().expect("starts non-empty");
        let (next, log_probs) = model.decode_step(&state, last, &encoded.keys)?;
        let best = log_probs.argmax().ok_or(Error::Empty("greedy_decode"))?;
        ids.push(best);
        state = next;
        if best == END_ID {
            break;
        }
    }
    Ok(ids)
}

/// Standard beam search: each live hypothesis proposes its `k` most
/// probable next tokens, the candidate pool is pruned to the global
/// top `k` by summed log-probability, and hypotheses that emit the end
/// marker retire. Anything still alive at `max_len` is returned as a
/// truncated caption.
pub fn beam_search<F: Scalar>(
    model: &Model<F>,
    encoded: &Encoded<F>,
    cfg: &DecodeConfig,
) -> Result<Vec<ScoredCaption>> {
    cfg.validate()?;
    decode_beam(model, encoded, cfg, None)
}

/// Beam search whose children are drawn without replacement from each
/// hypothesis's tempered top-`top_m` next-word distribution. Pruning
/// still uses the true untempered log-probabilities, so reported scores
/// mean the same thing as in [`beam_search`]; the temperature only
/// widens (or narrows) which children get considered.
pub fn temperature_beam_search<F: Scalar>(
    model: &Model<F>,
    encoded: &Encoded<F>,
    cfg: &DecodeConfig,
) -> Result<Vec<ScoredCaption>> {
    cfg.validate()?;
    decode_beam(model, encoded, cfg, Some(Prng::new(cfg.seed)))
}

fn decode_beam<F: Scalar>(
    model: &Model<F>,
    encoded: &Encoded<F>,
    cfg: &DecodeConfig,
    mut sampler: Option<Prng>,
) -> Result<Vec<ScoredCaption>> {
    let mut live = vec![Hypothesis {
        token_ids: vec![START_ID],
        log_prob: 0.0,
        state: model.initial_state(encoded)?,
        finished: false,
    }];
    let mut completed: Vec<ScoredCaption> = Vec::new();
    for _ in 0..cfg.max_len {
        if live.is_empty() {
            break;
        }
        let mut candidates: Vec<Hypothesis<F>> = Vec::new();
        for hyp in &live {
            let last = *hyp.token_ids.last().expect("starts non-empty");
            let (next, log_probs) = model.decode_step(&hyp.state, last, &encoded.keys)?;
            let children = match &mut sampler {
                None => top_tokens(&log_probs, cfg.k),
                Some(rng) => sample_children(&log_probs, cfg, rng)?,
            };
            for (token, lp) in children {
                let mut token_ids = hyp.token_ids.clone();
                token_ids.push(token);
                candidates.push(Hypothesis {
                    token_ids,
                    log_prob: hyp.log_prob + lp,
                    state: next.clone(),
                    finished: token == END_ID,
                });
            }
        }
        candidates.sort_by(compare_hypotheses);
        candidates.truncate(cfg.k);
        live = Vec::new();
        for cand in candidates {
            if cand.finished {
                completed.push(ScoredCaption {
                    token_ids: cand.token_ids,
                    log_prob: cand.log_prob,
                });
            } else {
                live.push(cand);
            }
        }
    }
    completed.extend(live.into_iter().map(|h| ScoredCaption {
        token_ids: h.token_ids,
        log_prob: h.log_prob,
    }));
    let normalize = cfg.length_normalize;
    completed.sort_by(|a, b| {
        let ka = ranking_score(a, normalize);
        let kb = ranking_score(b, normalize);
        kb.partial_cmp(&ka)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.token_ids.cmp(&b.token_ids))
    });
    completed.truncate(cfg.k);
    Ok(completed)
}

fn ranking_score(caption: &ScoredCaption, normalize: bool) -> f64 {
    if normalize {
        // Generated tokens only; the start marker is given, not scored.
        caption.log_prob / (caption.token_ids.len() - 1).max(1) as f64
    } else {
        caption.log_prob
    }
}

fn compare_hypotheses<F>(a: &Hypothesis<F>, b: &Hypothesis<F>) -> Ordering {
    b.log_prob
        .partial_cmp(&a.log_prob)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.token_ids.cmp(&b.token_ids))
}

/// The `n` most probable tokens with their ln probabilities, descending,
/// ties to the lowest id.
fn top_tokens<F: Scalar>(log_probs: &Vector<F>, n: usize) -> Vec<(TokenId, f64)> {
    let mut scored: Vec<(TokenId, f64)> = log_probs
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| (i, x.to_f64()))
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    scored.truncate(n);
    scored
}

/// Draw up to `k` distinct children from the tempered top-`top_m` pool.
/// Zero-probability tokens never enter the pool; when the tempered mass
/// underflows (tiny temperatures) the draw falls back to pool order,
/// which is exactly the argmax limit.
fn sample_children<F: Scalar>(
    log_probs: &Vector<F>,
    cfg: &DecodeConfig,
    rng: &mut Prng,
) -> Result<Vec<(TokenId, f64)>> {
    let mut pool = top_tokens(log_probs, cfg.top_m);
    pool.retain(|&(_, lp)| lp > f64::NEG_INFINITY);
    if pool.is_empty() {
        return Err(Error::Numeric("no token has nonzero probability".into()));
    }
    let mass: f64 = pool.iter().map(|&(_, lp)| lp.exp()).sum();
    let renormalized: Vec<f64> = pool.iter().map(|&(_, lp)| lp.exp() / mass).collect();
    let tempered = apply_temperature(&Vector::from_vec(renormalized), cfg.temperature)?;
    let mut weights: Vec<f64> = tempered.data().to_vec();
    let mut used = vec![false; pool.len()];
    let draws = cfg.k.min(pool.len());
    let mut children = Vec::with_capacity(draws);
    for _ in 0..draws {
        let total: f64 = weights
            .iter()
            .zip(&used)
            .filter(|&(_, &u)| !u)
            .map(|(&w, _)| w)
            .sum();
        let chosen = if total > 0.0 {
            let mut r = rng.uniform(0.0, 1.0) * total;
            let mut hit = None;
            let mut last_weighted = None;
            for (i, (&w, &u)) in weights.iter().zip(&used).enumerate() {
                if u {
                    continue;
                }
                if w > 0.0 {
                    last_weighted = Some(i);
                }
                r -= w;
                if r < 0.0 {
                    hit = Some(i);
                    break;
                }
            }
            // Rounding can leave a sliver of r; land on the last live entry.
            hit.or(last_weighted).expect("positive total implies a weighted entry")
        } else {
            used.iter().position(|&u| !u).expect("draws bounded by pool size")
        };
        used[chosen] = true;
        weights[chosen] = 0.0;
        children.push(pool[chosen]);
    }
    Ok(children)
}

/// Sum of per-step ln probabilities the model assigns to a caption's
/// tokens after the start marker.
pub fn score_caption<F: Scalar>(
    model: &Model<F>,
    encoded: &Encoded<F>,
    token_ids: &[TokenId],
) -> Result<f64> {
    let mut state = model.initial_state(encoded)?;
    let mut total = 0.0;
    for pair in token_ids.windows(2) {
        let (next, log_probs) = model.decode_step(&state, pair[0], &encoded.keys)?;
        total += log_probs.get(pair[1]).to_f64();
        state = next;
    }
    Ok(total)
}

/// Surface text: special markers dropped, tokens joined by spaces.
pub fn detokenize(vocab: &Vocabulary, token_ids: &[TokenId]) -> String {
    token_ids
        .iter()
        .filter(|&&id| id != START_ID && id != END_ID)
        .map(|&id| vocab.token(id))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Encode one image (plus an optional label, used by the label-aware
/// encoder variants and ignored by the image-only one) and decode per
/// the configured mode. Returns `(log_prob, text)` pairs, best first.
pub fn generate<F: Scalar>(
    model: &Model<F>,
    image: &Vector<F>,
    label_text: &str,
    cfg: &DecodeConfig,
) -> Result<Vec<(f64, String)>> {
    cfg.validate()?;
    let label_ids: Vec<TokenId> = tokenize(label_text)
        .iter()
        .map(|t| model.vocab.id_or_unk(t))
        .collect();
    let encoded = model.encode(image, &label_ids)?;
    let scored = match cfg.mode {
        DecodeMode::Greedy => {
            let token_ids = greedy_decode(model, &encoded, cfg.max_len)?;
            let log_prob = score_caption(model, &encoded, &token_ids)?;
            vec![ScoredCaption { token_ids, log_prob }]
        }
        DecodeMode::Beam => beam_search(model, &encoded, cfg)?,
        DecodeMode::TemperatureBeam => temperature_beam_search(model, &encoded, cfg)?,
    };
    Ok(scored
        .into_iter()
        .map(|c| (c.log_prob, detokenize(&model.vocab, &c.token_ids)))
        .collect())
}
