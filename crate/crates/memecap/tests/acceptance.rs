//! Acceptance gate: one test per shipping criterion, each printing a
//! single `criterion N PASS` line (run with `--nocapture` to see them).
//! Every tolerance here is part of the contract; loosening one is a
//! behavior change, not a test fix.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use memecap::corpus::{Dataset, RawExample, Vocabulary, END_ID, START_ID, TokenId, UNK_ID};
use memecap::embeddings::EmbeddingMatrix;
use memecap::eval::{build_dup_index, copy_check, percent_in_data, perplexity, CopyVerdict};
use memecap::images::pseudo_embed;
use memecap::inference::{
    apply_temperature, beam_search, greedy_decode, temperature_beam_search, DecodeConfig,
    DecodeMode,
};
use memecap::model::{luong_attention, EncoderVariant, LstmState, Model, ModelConfig};
use memecap::numerics::{Matrix, Vector};
use memecap::rng::Prng;
use memecap::training::{grad_check, train, LrDecay, OptimizerKind, TrainConfig};

/// Vocabulary of `extra` distinct words (each frequent enough to keep)
/// plus the three specials.
fn word_vocab(extra: usize) -> Vocabulary {
    let caption: Vec<String> = (0..extra)
        .flat_map(|i| {
            let w = format!("w{i:02}");
            vec![w.clone(), w.clone(), w]
        })
        .collect();
    Vocabulary::build(&[caption], 3)
}

/// Redraw every tensor at O(1) scale. The production init range leaves
/// tiny-model states so small that some true gradients sit below the
/// finite-difference noise floor; unit-scale weights lift all of them
/// clear of it without saturating the gates.
fn redraw_unit_scale(model: &mut Model<f64>, seed: u64) {
    let mut rng = Prng::new(seed);
    for t in model.all_tensors_mut() {
        for x in t {
            *x = rng.uniform(-1.0, 1.0);
        }
    }
}

fn checkable_model(variant: EncoderVariant, layers: usize, redraw_seed: u64) -> Model<f64> {
    let vocab = word_vocab(17);
    let emb = EmbeddingMatrix::seeded_random(vocab.len(), 7, 3);
    let mut model = Model::init(
        vocab,
        emb,
        ModelConfig {
            variant,
            layers,
            hidden: 8,
            embed_dim: 7,
            image_dim: 6,
        },
        3,
    )
    .unwrap();
    redraw_unit_scale(&mut model, redraw_seed);
    model
}

#[test]
fn criterion_1_gradients_match_finite_differences() {
    let start = Instant::now();
    let combos = [
        (EncoderVariant::ImageOnly, 1, 102),
        (EncoderVariant::ImageOnly, 2, 100),
        (EncoderVariant::ImageOnly, 3, 111),
        (EncoderVariant::GloveAverage, 1, 104),
        (EncoderVariant::GloveAverage, 2, 100),
        (EncoderVariant::GloveAverage, 3, 122),
        (EncoderVariant::AttentionLabels, 1, 101),
        (EncoderVariant::AttentionLabels, 2, 101),
        (EncoderVariant::AttentionLabels, 3, 120),
    ];
    let image = Vector::from_f64_slice(&[0.9, -0.6, 1.1, 0.4, -1.0, 0.7]);
    let caption: Vec<TokenId> = vec![START_ID, 5, 9, 14, 7, 12, 16, 4, 11, END_ID];
    let mut worst = 0.0f64;
    for (variant, layers, redraw_seed) in combos {
        let mut model = checkable_model(variant, layers, redraw_seed);
        let labels: &[TokenId] = if variant == EncoderVariant::ImageOnly {
            &[]
        } else {
            &[4, 11]
        };
        let err = grad_check(&mut model, &image, labels, &caption, 1e-5).unwrap();
        assert!(
            err < 1e-5,
            "{variant:?} x {layers} layers: max relative error {err:.3e}"
        );
        worst = worst.max(err);
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 60, "took {elapsed:?}");
    println!(
        "criterion 1 PASS: 3 encoder variants x 1..3 layers, max relative \
         gradient error {worst:.2e} < 1e-5 in {:.1}s",
        elapsed.as_secs_f64()
    );
}

/// Five pseudo-images, ten captions each. The second word picks one of
/// ten continuations shared across images, so a perfect model is left
/// with exactly one irreducible ln(10) surprise per caption.
fn memorization_corpus() -> Vec<RawExample> {
    let mut raws = Vec::new();
    for i in 0..5 {
        for j in 0..10 {
            let mut words = vec![format!("s{i}")];
            for d in 0..7 {
                words.push(format!("t{}", (j + d) % 10));
            }
            raws.push(RawExample {
                image_id: format!("m{i}"),
                label: format!("template {i}"),
                caption: words.join(" "),
            });
        }
    }
    raws
}

#[test]
fn criterion_2_training_memorizes_small_corpus() {
    let start = Instant::now();
    let raws = memorization_corpus();
    let dataset = Dataset::build(&raws, 1);
    assert_eq!(dataset.examples.len(), 50);
    let images: Vec<Vector<f64>> = dataset
        .examples
        .iter()
        .map(|e| {
            Vector::from_vec(
                pseudo_embed(e.image_id.as_bytes())
                    .iter()
                    .map(|&x| x as f64)
                    .collect(),
            )
        })
        .collect();
    let base = TrainConfig {
        learning_rate: 5.0,
        lr_decay: LrDecay {
            factor: 1.0,
            every_n_epochs: 1,
        },
        batch_size: 10,
        epochs: 200,
        hidden: 16,
        seed: 11,
        threads: 1,
        ..TrainConfig::default()
    };
    let mut results = Vec::new();
    for (name, config) in [
        ("sgd", base.clone()),
        (
            "momentum",
            TrainConfig {
                optimizer: OptimizerKind::Momentum { mu: 0.9 },
                learning_rate: 1.0,
                ..base.clone()
            },
        ),
    ] {
        let embeddings = EmbeddingMatrix::<f64>::seeded_random(dataset.vocab.len(), 16, 11);
        let (model, _) = train(
            &dataset,
            &images,
            embeddings,
            EncoderVariant::GloveAverage,
            &config,
        )
        .unwrap();
        let report = perplexity(&model, &dataset, &images).unwrap();
        assert!(
            report.perplexity < 1.5,
            "{name}: eval perplexity {} after {} epochs",
            report.perplexity,
            config.epochs
        );
        results.push(format!("{name} {:.3}", report.perplexity));
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 300, "took {elapsed:?}");
    println!(
        "criterion 2 PASS: 50-caption corpus memorized to eval perplexity \
         [{}] < 1.5 within 200 epochs in {:.1}s",
        results.join(", "),
        elapsed.as_secs_f64()
    );
}

#[test]
fn criterion_3_temperature_matches_direct_evaluation() {
    let mut rng = Prng::new(77);
    let mut cases = 0;
    for case in 0..100 {
        let n = 2 + case % 9;
        let weights: Vec<f64> = (0..n).map(|_| rng.uniform(0.1, 1.0)).collect();
        let total: f64 = weights.iter().sum();
        let p = Vector::from_vec(weights.iter().map(|w| w / total).collect());
        for t in [0.25, 0.5, 1.0, 2.0, 10.0] {
            let got = apply_temperature(&p, t).unwrap();
            let powered: Vec<f64> = p.data().iter().map(|&x| x.powf(1.0 / t)).collect();
            let mass: f64 = powered.iter().sum();
            for (i, &q) in powered.iter().enumerate() {
                assert!(
                    (got.get(i) - q / mass).abs() < 1e-9,
                    "case {case}, T={t}, entry {i}"
                );
            }
            cases += 1;
        }
        let identity = apply_temperature(&p, 1.0).unwrap();
        for i in 0..p.len() {
            assert!((identity.get(i) - p.get(i)).abs() < 1e-12, "T=1 drifted");
        }
    }
    println!(
        "criterion 3 PASS: {cases} (distribution, temperature) cases within \
         1e-9 of direct p^(1/T) evaluation; T=1 is the identity within 1e-12"
    );
}

/// Five-token decoder with unit-scale weights, deterministic per seed.
fn toy_decoder(seed: u64) -> Model<f64> {
    let vocab = word_vocab(2);
    let emb = EmbeddingMatrix::seeded_random(vocab.len(), 4, seed ^ 1);
    let mut model = Model::init(
        vocab,
        emb,
        ModelConfig {
            variant: EncoderVariant::ImageOnly,
            layers: 1,
            hidden: 3,
            embed_dim: 4,
            image_dim: 5,
        },
        seed,
    )
    .unwrap();
    redraw_unit_scale(&mut model, seed ^ 2);
    model
}

/// Sequence log-probability recomputed one decode step at a time,
/// independently of the search code under test.
fn stepwise_score(model: &Model<f64>, image: &Vector<f64>, ids: &[TokenId]) -> f64 {
    let encoded = model.encode(image, &[]).unwrap();
    let mut state = model.initial_state(&encoded).unwrap();
    let mut total = 0.0;
    for pair in ids.windows(2) {
        let (next, log_probs) = model.decode_step(&state, pair[0], &encoded.keys).unwrap();
        total += log_probs.get(pair[1]);
        state = next;
    }
    total
}

#[test]
fn criterion_4_decoding_matches_oracles() {
    let image = Vector::from_f64_slice(&[0.3, -0.8, 0.5, 0.1, -0.2]);
    let mut checked_scores = 0;
    for seed in [61, 62, 63] {
        let model = toy_decoder(seed);
        assert_eq!(model.vocab_size(), 5);
        let encoded = model.encode(&image, &[]).unwrap();
        let cfg = DecodeConfig {
            k: 3,
            max_len: 3,
            ..DecodeConfig::default()
        };

        let beam = beam_search(&model, &encoded, &cfg).unwrap();
        assert!(!beam.is_empty());
        for r in &beam {
            let recomputed = stepwise_score(&model, &image, &r.token_ids);
            assert!(
                (recomputed - r.log_prob).abs() < 1e-6,
                "seed {seed}: reported {} vs recomputed {recomputed}",
                r.log_prob
            );
            checked_scores += 1;
        }

        let single = DecodeConfig { k: 1, ..cfg.clone() };
        let narrow = beam_search(&model, &encoded, &single).unwrap();
        let greedy = greedy_decode(&model, &encoded, cfg.max_len).unwrap();
        assert_eq!(narrow[0].token_ids, greedy, "seed {seed}: k=1 beam vs greedy");

        let cold = DecodeConfig {
            mode: DecodeMode::TemperatureBeam,
            temperature: 1e-6,
            top_m: 5,
            seed,
            ..cfg.clone()
        };
        let sampled = temperature_beam_search(&model, &encoded, &cold).unwrap();
        assert_eq!(beam.len(), sampled.len());
        for (a, b) in beam.iter().zip(&sampled) {
            assert_eq!(a.token_ids, b.token_ids, "seed {seed}: T->0 expansion drifted");
            assert!((a.log_prob - b.log_prob).abs() < 1e-9);
        }

        // Every sequence of up to max_len generated tokens, scored exactly.
        let mut best_exhaustive = f64::NEG_INFINITY;
        let mut stack = vec![vec![START_ID]];
        while let Some(prefix) = stack.pop() {
            let done = prefix.len() > 1 && *prefix.last().unwrap() == END_ID;
            if done || prefix.len() == 1 + cfg.max_len {
                best_exhaustive = best_exhaustive.max(stepwise_score(&model, &image, &prefix));
                continue;
            }
            for id in 0..model.vocab_size() {
                let mut next = prefix.clone();
                next.push(id);
                stack.push(next);
            }
        }
        assert!(
            best_exhaustive >= beam[0].log_prob - 1e-9,
            "seed {seed}: beam {} beat exhaustive {best_exhaustive}",
            beam[0].log_prob
        );
    }
    println!(
        "criterion 4 PASS: {checked_scores} beam scores recomputed within 1e-6; \
         k=1 equals greedy; T=1e-6 equals standard beam; exhaustive top-1 bounds beam"
    );
}

fn fixture_line(id: usize, caption: &str) -> RawExample {
    RawExample {
        image_id: format!("L{id:02}"),
        label: "meme".into(),
        caption: caption.into(),
    }
}

#[test]
fn criterion_5_preprocessing_keeps_and_drops_by_hand_derived_rules() {
    // Word counts across the 30 captions: alpha/beta/gamma are common,
    // bravo appears exactly 3 times (kept boundary), charlie exactly
    // twice (dropped boundary); everything past L25 is rarer still.
    let mut raws: Vec<RawExample> =
        (1..=20).map(|i| fixture_line(i, "alpha beta gamma")).collect();
    raws.push(fixture_line(21, "alpha bravo beta"));
    raws.push(fixture_line(22, "beta bravo gamma"));
    raws.push(fixture_line(23, "gamma bravo alpha"));
    raws.push(fixture_line(24, "alpha charlie beta"));
    raws.push(fixture_line(25, "beta charlie gamma"));
    raws.push(fixture_line(26, "alpha delta echo beta"));
    raws.push(fixture_line(27, "alpha delta foxtrot beta"));
    raws.push(fixture_line(28, "alpha golf hotel india beta"));
    raws.push(fixture_line(29, "juliet kilo lima mike"));
    raws.push(fixture_line(30, "alpha beta gamma"));
    assert_eq!(raws.len(), 30);

    let dataset = Dataset::build(&raws, 3);
    for word in ["alpha", "beta", "gamma", "bravo"] {
        assert!(dataset.vocab.id(word).is_some(), "{word} belongs in the vocabulary");
    }
    for word in ["charlie", "delta", "echo", "golf", "juliet"] {
        assert!(dataset.vocab.id(word).is_none(), "{word} is below min count");
    }
    assert_eq!(dataset.vocab.len(), 7);

    let kept: Vec<&str> = dataset.examples.iter().map(|e| e.image_id.as_str()).collect();
    let expected: Vec<String> = (1..=30)
        .filter(|i| ![28, 29].contains(i))
        .map(|i| format!("L{i:02}"))
        .collect();
    assert_eq!(kept, expected.iter().map(String::as_str).collect::<Vec<_>>());

    let unks_of = |id: &str| {
        dataset
            .examples
            .iter()
            .find(|e| e.image_id == id)
            .unwrap()
            .interior_unk_count()
    };
    assert_eq!(unks_of("L24"), 1);
    assert_eq!(unks_of("L26"), 2, "two unknowns is still acceptable");
    assert_eq!(unks_of("L27"), 2);
    let l24 = dataset.examples.iter().find(|e| e.image_id == "L24").unwrap();
    assert_eq!(l24.caption_ids.iter().filter(|&&id| id == UNK_ID).count(), 1);

    println!(
        "criterion 5 PASS: 30-line fixture keeps 28 captions, removes the two \
         with >2 unknowns; count-3 word kept, count-2 word mapped to UNK"
    );
}

fn tiny_dataset(captions: &[&str]) -> Dataset {
    let raws: Vec<RawExample> = captions
        .iter()
        .enumerate()
        .map(|(i, c)| RawExample {
            image_id: format!("img{i}"),
            label: String::new(),
            caption: (*c).to_string(),
        })
        .collect();
    Dataset::build(&raws, 1)
}

fn zeroed_model(dataset: &Dataset, hidden: usize) -> Model<f64> {
    let emb = EmbeddingMatrix::seeded_random(dataset.vocab.len(), 4, 5);
    let mut model = Model::init(
        dataset.vocab.clone(),
        emb,
        ModelConfig {
            variant: EncoderVariant::ImageOnly,
            layers: 1,
            hidden,
            embed_dim: 4,
            image_dim: 5,
        },
        5,
    )
    .unwrap();
    for t in model.all_tensors_mut() {
        for x in t {
            *x = 0.0;
        }
    }
    model
}

#[test]
fn criterion_6_perplexity_closed_forms() {
    // All-zero weights leave every logit at zero: a uniform predictor.
    let dataset = tiny_dataset(&["alpha beta gamma", "beta delta", "gamma"]);
    let model = zeroed_model(&dataset, 3);
    let images =
        vec![Vector::from_f64_slice(&[0.1, 0.2, 0.3, 0.4, 0.5]); dataset.examples.len()];
    let uniform_pp = perplexity(&model, &dataset, &images).unwrap().perplexity;
    let v = dataset.vocab.len() as f64;
    assert!(
        (uniform_pp - v).abs() / v < 1e-6,
        "uniform predictor gave {uniform_pp}, vocabulary size {v}"
    );

    // Saturated gates pin the hidden state; two identical output rows
    // split the probability mass while every other row underflows, so
    // each target is predicted with probability exactly one half.
    let dataset = tiny_dataset(&["word word"]);
    let mut model = zeroed_model(&dataset, 3);
    for x in model.embeddings.table.data_mut() {
        *x = 1.0;
    }
    for x in model.layers[0].w_ox.data_mut() {
        *x = 10.0;
    }
    for x in model.layers[0].w_cx.data_mut() {
        *x = 10.0;
    }
    let word_id = dataset.vocab.id("word").unwrap();
    for r in 0..model.vocab_size() {
        let value = if r == word_id || r == END_ID { 1.0 } else { -1000.0 };
        for x in model.w_out.row_mut(r) {
            *x = value;
        }
    }
    let images = vec![Vector::from_f64_slice(&[0.0; 5])];
    let half_pp = perplexity(&model, &dataset, &images).unwrap().perplexity;
    assert!(
        (half_pp - 2.0).abs() < 1e-12,
        "constant-half predictor gave {half_pp}"
    );

    println!(
        "criterion 6 PASS: uniform predictor perplexity {uniform_pp:.6} == \
         V={v} within 1e-6 relative; P=0.5 predictor perplexity {half_pp} == 2"
    );
}

#[test]
fn criterion_7_copy_detector_flags_exact_near_and_original() {
    let base: Vec<String> = (0..18).map(|i| format!("b{i:02}")).collect();
    let mut indexed = base.clone();
    indexed.push("tail".into());
    let mut training: Vec<Vec<String>> = vec![indexed.clone()];
    for n in 1..20 {
        training.push(vec![
            format!("c{n:02}x"),
            format!("c{n:02}y"),
            format!("c{n:02}z"),
        ]);
    }
    assert_eq!(training.len(), 20);
    let index = build_dup_index(&training);

    let exact = percent_in_data(&[indexed.clone()], &index, 0.8).unwrap();
    assert_eq!(exact, 100.0);

    let disjoint: Vec<String> = ["fresh", "words", "only"].map(String::from).to_vec();
    let pct = percent_in_data(&[disjoint.clone()], &index, 0.8).unwrap();
    assert_eq!(pct, 0.0);

    // 18 shared tokens give 17 shared bigrams; the two tails differ, so
    // the union holds 20 distinct bigrams: similarity 17/20 = 0.85.
    let mut near = base.clone();
    near.push("zig".into());
    near.push("zag".into());
    match copy_check(&near, &index, 0.8) {
        CopyVerdict::Near(j) => assert!((j - 0.85).abs() < 1e-12, "similarity {j}"),
        other => panic!("expected a near-duplicate verdict, got {other:?}"),
    }
    let mixed = percent_in_data(&[indexed, disjoint, near], &index, 0.8).unwrap();
    assert!((mixed - 200.0 / 3.0).abs() < 1e-9);

    println!(
        "criterion 7 PASS: 20-caption index flags exact copies (100%), \
         disjoint captions (0%), and a 0.85 bigram-overlap near-duplicate"
    );
}

fn memecap_bin(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_memecap"))
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "command {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_pipeline(dir: &Path, raw: &Path) -> (Vec<u8>, Vec<u8>) {
    let prep = dir.join("prep");
    memecap_bin(&[
        "preprocess",
        "--data",
        raw.to_str().unwrap(),
        "--out-dir",
        prep.to_str().unwrap(),
        "--min-count",
        "1",
    ]);
    let ckpt = dir.join("model.ckpt");
    memecap_bin(&[
        "train",
        "--data",
        prep.join("dataset.tsv").to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--min-count",
        "1",
        "--variant",
        "2",
        "--hidden",
        "8",
        "--embed-dim",
        "8",
        "--epochs",
        "3",
        "--seed",
        "7",
        "--threads",
        "2",
    ]);
    let captions = memecap_bin(&[
        "generate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--image-id",
        "m0",
        "--label",
        "template 0",
        "--k",
        "3",
        "--max-len",
        "10",
        "--seed",
        "7",
    ]);
    (fs::read(&ckpt).unwrap(), captions.stdout)
}

#[test]
fn criterion_8_seeded_pipeline_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.tsv");
    let mut text = String::new();
    for r in memorization_corpus() {
        text.push_str(&format!("{}\t{}\t{}\n", r.image_id, r.label, r.caption));
    }
    fs::write(&raw, text).unwrap();

    let first = run_pipeline(&dir.path().join("a"), &raw);
    let second = run_pipeline(&dir.path().join("b"), &raw);
    assert_eq!(first.0, second.0, "checkpoints differ between identical runs");
    assert_eq!(first.1, second.1, "caption TSVs differ between identical runs");
    assert!(!first.1.is_empty());

    println!(
        "criterion 8 PASS: two seeded preprocess/train/generate runs produced \
         byte-identical checkpoints ({} bytes) and caption TSVs",
        first.0.len()
    );
}

fn random_vector(rng: &mut Prng, n: usize) -> Vector<f64> {
    Vector::from_vec((0..n).map(|_| rng.uniform(-1.0, 1.0)).collect())
}

fn random_matrix(rng: &mut Prng, rows: usize, cols: usize) -> Matrix<f64> {
    let mut m = Matrix::zeros(rows, cols);
    for x in m.data_mut() {
        *x = rng.uniform(-1.0, 1.0);
    }
    m
}

#[test]
fn criterion_9_attention_weights_are_a_distribution() {
    let mut rng = Prng::new(99);
    let hidden = 3;

    let h = random_vector(&mut rng, hidden);
    let w_a = random_matrix(&mut rng, hidden, hidden);
    let w_c = random_matrix(&mut rng, hidden, 2 * hidden);
    let single = luong_attention(&h, &[random_vector(&mut rng, hidden)], &w_a, &w_c).unwrap();
    assert_eq!(single.weights.len(), 1);
    assert_eq!(single.weights.get(0), 1.0);

    let zero_scores = Matrix::zeros(hidden, hidden);
    let keys: Vec<Vector<f64>> = (0..4).map(|_| random_vector(&mut rng, hidden)).collect();
    let uniform = luong_attention(&h, &keys, &zero_scores, &w_c).unwrap();
    for i in 0..4 {
        assert!((uniform.weights.get(i) - 0.25).abs() < 1e-12);
    }

    let mut checked = 0;
    for _ in 0..20 {
        let n = 1 + (rng.uniform(0.0, 5.0) as usize);
        let h = random_vector(&mut rng, hidden);
        let w_a = random_matrix(&mut rng, hidden, hidden);
        let w_c = random_matrix(&mut rng, hidden, 2 * hidden);
        let keys: Vec<Vector<f64>> = (0..n).map(|_| random_vector(&mut rng, hidden)).collect();
        let cache = luong_attention(&h, &keys, &w_a, &w_c).unwrap();
        let mut sum = 0.0;
        for i in 0..n {
            let w = cache.weights.get(i);
            assert!((0.0..=1.0).contains(&w));
            sum += w;
        }
        assert!((sum - 1.0).abs() < 1e-6, "weights summed to {sum}");
        checked += 1;
    }

    // The label-attention encoder end to end: one key per label token.
    let model = checkable_model(EncoderVariant::AttentionLabels, 1, 120);
    let image = Vector::from_f64_slice(&[0.9, -0.6, 1.1, 0.4, -1.0, 0.7]);
    let encoded = model.encode(&image, &[4, 11]).unwrap();
    assert_eq!(encoded.keys.len(), 2);
    let state: LstmState<f64> = model.initial_state(&encoded).unwrap();
    model.decode_step(&state, START_ID, &encoded.keys).unwrap();

    println!(
        "criterion 9 PASS: single-key weight 1.0 exactly, zero scores give \
         uniform weights, {checked} random cases sum to 1 within 1e-6"
    );
}
