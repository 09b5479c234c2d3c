//! Cross-module checks: attention gradients against finite differences,
//! subword generalization of trained embeddings, and save/load consistency
//! through the full training path.

use attnsent::attention::{multi_head, multi_head_dual, MultiHeadParams, PadMask};
use attnsent::model::{Model, ModelConfig};
use attnsent::tensor::Matrix;
use attnsent::text::{Document, Label, VocabOptions};
use attnsent::train::{evaluate, train, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-0.5..0.5)).unwrap()
}

fn random_heads(rng: &mut ChaCha8Rng, d_model: usize, heads: usize) -> MultiHeadParams {
    let d_k = d_model / heads;
    let head_params = (0..heads)
        .map(|_| {
            attnsent::attention::AttentionHeadParams::new(
                random_matrix(rng, d_model, d_k),
                random_matrix(rng, d_model, d_k),
                random_matrix(rng, d_model, d_k),
            )
            .unwrap()
        })
        .collect();
    MultiHeadParams::new(head_params, random_matrix(rng, d_model, d_model)).unwrap()
}

// L = Σ C ⊙ multi_head(x); dL/dY = C.
fn readout(y: &Matrix, c: &Matrix) -> f64 {
    y.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
}

fn check_multi_head_gradients(mask: Option<&PadMask>) {
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let (n, d_model, heads) = (3, 8, 2);
    let mut params = random_heads(&mut rng, d_model, heads);
    let mut x = random_matrix(&mut rng, n, d_model);
    let c = random_matrix(&mut rng, n, d_model);

    let dual = multi_head_dual(&x, &params, mask).unwrap();
    let grads = dual.ctx.backward(&params, &c).unwrap();

    let eps = 1e-6;
    let tol = 1e-5;
    // Masked keys make some true gradients exactly zero, where finite
    // differences only deliver cancellation noise; accept on absolute error
    // there and on relative error everywhere else.
    let close = |a: f64, n: f64| {
        (a - n).abs() < 1e-7 || (a - n).abs() / a.abs().max(n.abs()).max(1e-6) < tol
    };

    let head_count = params.head_count();
    for h in 0..head_count {
        for (which, analytic) in [
            (0usize, grads.heads[h].wq.clone()),
            (1, grads.heads[h].wk.clone()),
            (2, grads.heads[h].wv.clone()),
        ] {
            let len = analytic.data().len();
            for idx in 0..len {
                let mut probe = |delta: f64| -> f64 {
                    {
                        let head = &mut params.heads_mut()[h];
                        let target = match which {
                            0 => &mut head.wq,
                            1 => &mut head.wk,
                            _ => &mut head.wv,
                        };
                        target.data_mut()[idx] += delta;
                    }
                    let y = multi_head(&x, &params, mask).unwrap();
                    {
                        let head = &mut params.heads_mut()[h];
                        let target = match which {
                            0 => &mut head.wq,
                            1 => &mut head.wk,
                            _ => &mut head.wv,
                        };
                        target.data_mut()[idx] -= delta;
                    }
                    readout(&y, &c)
                };
                let numeric = (probe(eps) - probe(-eps)) / (2.0 * eps);
                let a = analytic.data()[idx];
                assert!(
                    close(a, numeric),
                    "head {h} proj {which} idx {idx}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }
    for idx in 0..grads.wo.data().len() {
        let mut probe = |delta: f64| -> f64 {
            params.split_mut().1.data_mut()[idx] += delta;
            let y = multi_head(&x, &params, mask).unwrap();
            params.split_mut().1.data_mut()[idx] -= delta;
            readout(&y, &c)
        };
        let numeric = (probe(eps) - probe(-eps)) / (2.0 * eps);
        let a = grads.wo.data()[idx];
        assert!(close(a, numeric), "wo idx {idx}: {a} vs {numeric}");
    }
    for idx in 0..grads.x.data().len() {
        let mut probe = |delta: f64| -> f64 {
            x.data_mut()[idx] += delta;
            let y = multi_head(&x, &params, mask).unwrap();
            x.data_mut()[idx] -= delta;
            readout(&y, &c)
        };
        let numeric = (probe(eps) - probe(-eps)) / (2.0 * eps);
        let a = grads.x.data()[idx];
        assert!(close(a, numeric), "x idx {idx}: {a} vs {numeric}");
    }
}

#[test]
fn multi_head_gradients_match_finite_differences() {
    check_multi_head_gradients(None);
}

#[test]
fn multi_head_gradients_match_finite_differences_under_padding() {
    let mask = PadMask::new(vec![true, true, false]).unwrap();
    check_multi_head_gradients(Some(&mask));
}

fn doc(text: &str, label: Label) -> Document {
    Document { text: text.into(), label: Some(label) }
}

fn toy_corpus() -> Vec<Document> {
    let fillers = ["giao hàng nhanh", "đóng gói ổn", "shop phản hồi", "dùng một tuần"];
    let mut corpus = Vec::new();
    for i in 0..16 {
        let f = fillers[i % fillers.len()];
        corpus.push(doc(&format!("{f} máy tốt lắm {i}"), Label::Positive));
        corpus.push(doc(&format!("{f} quá tệ hỏng {i}"), Label::Negative));
    }
    corpus
}

fn toy_model_config() -> ModelConfig {
    ModelConfig {
        d_emb: 8,
        d_pe: 8,
        heads: 4,
        se_reduction: 4,
        max_len: 16,
        ..ModelConfig::default()
    }
}

fn toy_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 120,
        batch_size: 8,
        learning_rate: 3e-3,
        seed: 7,
        split: [1.0, 0.0, 0.0],
        vocab: VocabOptions { min_count: 1, bucket_count: 4096, ..VocabOptions::default() },
        ..TrainConfig::default()
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn trained_subword_buckets_generalize_to_near_oov_words() {
    let outcome = train(&toy_corpus(), &toy_model_config(), &toy_train_config()).unwrap();
    let model = outcome.model;
    let embed_one = |word: &str| -> Vec<f64> {
        let token = model.vocab().encode_token(word);
        let (matrix, _) = model.params().embedding.embed(std::slice::from_ref(&token)).unwrap();
        matrix.row(0).to_vec()
    };
    // "tốtt" is out of vocabulary but shares most character n-grams with the
    // trained word "tốt"; "xuynh" shares none. The subword buckets must pull
    // the near-miss closer.
    let anchor = embed_one("tốt");
    let near = embed_one("tốtt");
    let far = embed_one("xuynh");
    assert!(model.vocab().word_id("tốtt").is_none(), "test needs an OOV probe");
    assert!(model.vocab().word_id("xuynh").is_none());
    let near_sim = cosine(&anchor, &near);
    let far_sim = cosine(&anchor, &far);
    assert!(
        near_sim > far_sim,
        "subword sharing should dominate: near {near_sim} vs far {far_sim}"
    );
}

#[test]
fn saved_and_reloaded_models_evaluate_identically() {
    let corpus = toy_corpus();
    let config = TrainConfig { epochs: 20, ..toy_train_config() };
    let outcome = train(&corpus, &toy_model_config(), &config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    outcome.model.save(&path).unwrap();
    let reloaded = Model::load(&path).unwrap();

    let original = evaluate(&outcome.model, &corpus).unwrap();
    let restored = evaluate(&reloaded, &corpus).unwrap();
    assert_eq!(original.confusion, restored.confusion);
    assert_eq!(original.accuracy, restored.accuracy);
    assert_eq!(original.macro_f1, restored.macro_f1);
    let twice = Model::load(&path).unwrap();
    for text in ["giao hàng nhanh máy tốt", "quá tệ hỏng rồi"] {
        let a = outcome.model.predict(text).unwrap();
        let b = reloaded.predict(text).unwrap();
        // The file stores parameters as f32, so the reloaded model deviates
        // from the in-memory one by rounding only; two loads are identical.
        for (pa, pb) in a.probs.iter().zip(b.probs.iter()) {
            assert!((pa - pb).abs() < 1e-6, "{text}: {pa} vs {pb}");
        }
        assert_eq!(a.label(), b.label());
        assert_eq!(b.probs, twice.predict(text).unwrap().probs);
    }
}

#[test]
fn trained_model_reads_word_order_through_positional_encoding() {
    // With concatenated positional encoding the token-position pairing is
    // part of the input, so permuting a sentence must move the logits.
    // Attention alone is permutation-equivariant and mean pooling erases
    // order, so any movement here is attributable to the PE channel.
    let corpus = toy_corpus();
    let outcome = train(&corpus, &toy_model_config(), &toy_train_config()).unwrap();
    let words = ["giao".to_string(), "máy".to_string(), "tốt".to_string(), "lắm".to_string()];
    let mut reversed = words.to_vec();
    reversed.reverse();
    let forward_of = |tokens: &[String]| {
        let encoded = outcome.model.vocab().encode(tokens);
        outcome.model.forward(&encoded).unwrap().probs
    };
    let original = forward_of(&words);
    let repeat = forward_of(&words);
    assert_eq!(original, repeat, "forward must be deterministic");
    let moved: f64 = original
        .iter()
        .zip(forward_of(&reversed).iter())
        .map(|(a, b)| (a - b).abs())
        .sum();
    assert!(moved > 1e-9, "reversing the sentence should change the output");
}
