//! Evaluation: corpus perplexity and a training-set duplicate detector
//! for measuring how much generated output is copied from the data.

use std::collections::{HashMap, HashSet};

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Scalar, Vector};
use crate::training::example_loss;

/// Bigram-Jaccard similarity at or above this counts as a near-copy.
pub const DEFAULT_NEAR_THRESHOLD: f64 = 0.8;

#[derive(Clone, Debug)]
pub struct EvalReport {
    /// exp(mean over captions of mean per-token negative log-probability).
    pub perplexity: f64,
    pub per_example_pp: Vec<f64>,
    /// Filled in when generated captions were checked against a
    /// duplicate index; perplexity alone leaves it unset.
    pub percent_in_data: Option<f64>,
    pub near_dup_threshold: f64,
}

/// Teacher-forced perplexity of every caption in `dataset`, conditioning
/// each one on its image (and label, for label-aware encoders). A
/// caption's token count includes the end marker and excludes the start
/// marker. The corpus number averages the per-caption mean NLLs before
/// exponentiating, so long captions don't dominate.
pub fn perplexity<F: Scalar>(
    model: &Model<F>,
    dataset: &Dataset,
    images: &[Vector<F>],
) -> Result<EvalReport> {
    if dataset.examples.is_empty() {
        return Err(Error::Empty("perplexity"));
    }
    if images.len() != dataset.examples.len() {
        return Err(Error::shape(
            "perplexity",
            format!("{} examples", dataset.examples.len()),
            format!("{} images", images.len()),
        ));
    }
    let mut nlls = Vec::with_capacity(dataset.examples.len());
    for (example, image) in dataset.examples.iter().zip(images) {
        nlls.push(example_loss(model, image, &example.label_ids, &example.caption_ids)?);
    }
    let mean = nlls.iter().sum::<f64>() / nlls.len() as f64;
    Ok(EvalReport {
        perplexity: mean.exp(),
        per_example_pp: nlls.iter().map(|&n| n.exp()).collect(),
        percent_in_data: None,
        near_dup_threshold: DEFAULT_NEAR_THRESHOLD,
    })
}

type Bigram = (String, String);

/// Training-caption lookup structure: exact token sequences plus
/// per-caption bigram multisets for near-duplicate scoring.
#[derive(Clone, Debug, Default)]
pub struct DupIndex {
    exact: HashSet<Vec<String>>,
    profiles: Vec<HashMap<Bigram, usize>>,
}

/// Index tokenized training captions (start/end markers must already be
/// absent; these are surface token sequences).
pub fn build_dup_index(captions: &[Vec<String>]) -> DupIndex {
    DupIndex {
        exact: captions.iter().cloned().collect(),
        profiles: captions.iter().map(|c| bigram_profile(c)).collect(),
    }
}

fn bigram_profile(tokens: &[String]) -> HashMap<Bigram, usize> {
    let mut profile = HashMap::new();
    for pair in tokens.windows(2) {
        *profile.entry((pair[0].clone(), pair[1].clone())).or_insert(0) += 1;
    }
    profile
}

/// Multiset Jaccard over bigrams: sum of per-bigram minimum counts over
/// sum of maximum counts. Symmetric; 0 when either side has no bigrams.
fn bigram_jaccard(a: &HashMap<Bigram, usize>, b: &HashMap<Bigram, usize>) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut intersection = 0usize;
    let mut union = 0usize;
    for (bigram, &count_a) in a {
        let count_b = b.get(bigram).copied().unwrap_or(0);
        intersection += count_a.min(count_b);
        union += count_a.max(count_b);
    }
    for (bigram, &count_b) in b {
        if !a.contains_key(bigram) {
            union += count_b;
        }
    }
    intersection as f64 / union as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CopyVerdict {
    /// Token-for-token present in the training set.
    Exact,
    /// Best bigram similarity reached the near-duplicate threshold.
    Near(f64),
    /// Best bigram similarity stayed below the threshold.
    Original(f64),
}

impl CopyVerdict {
    pub fn counts_as_copy(&self) -> bool {
        matches!(self, CopyVerdict::Exact | CopyVerdict::Near(_))
    }
}

/// Classify one tokenized caption against the training index.
pub fn copy_check(tokens: &[String], index: &DupIndex, threshold: f64) -> CopyVerdict {
    if index.exact.contains(tokens) {
        return CopyVerdict::Exact;
    }
    let profile = bigram_profile(tokens);
    let best = index
        .profiles
        .iter()
        .map(|p| bigram_jaccard(&profile, p))
        .fold(0.0, f64::max);
    if best >= threshold {
        CopyVerdict::Near(best)
    } else {
        CopyVerdict::Original(best)
    }
}

/// Share of generated captions that are exact or near copies, as a
/// percentage of the set.
pub fn percent_in_data(
    captions: &[Vec<String>],
    index: &DupIndex,
    threshold: f64,
) -> Result<f64> {
    if captions.is_empty() {
        return Err(Error::Empty("percent_in_data"));
    }
    let copies = captions
        .iter()
        .filter(|c| copy_check(c, index, threshold).counts_as_copy())
        .count();
    Ok(100.0 * copies as f64 / captions.len() as f64)
}
