use super::*;
use crate::data::Candidate;
use crate::numeric::{gradient_check, AttentionPattern, Objective};
use crate::rng::{Purpose, Rng, SeedStream};
use crate::tokenizer::{pack_ids, GlobalAttention};
use proptest::prelude::*;

fn rng(i: u64) -> Rng {
    SeedStream::new(99).derive(Purpose::Test, i)
}

/// Dense reference: materializes the full boolean mask and a masked softmax
/// with −∞ on excluded positions.
fn dense_attention(q: &Tensor, k: &Tensor, v: &Tensor, window: usize, global: &[u8], attn: &[u8]) -> Tensor {
    let (n, d) = q.dims2().unwrap();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let scores: Vec<f64> = (0..n)
            .map(|j| {
                let allowed = attn[j] == 1 && (i.abs_diff(j) <= window / 2 || global[i] == 1 || global[j] == 1);
                if allowed {
                    (0..d).map(|c| q.at(i, c) * k.at(j, c)).sum::<f64>() * scale
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = w.iter().sum();
        for c in 0..d {
            out.data_mut()[i * d + c] = (0..n).map(|j| w[j] / z * v.at(j, c)).sum();
        }
    }
    out
}

#[test]
fn window_covering_sequence_equals_full_attention() {
    let mut r = rng(0);
    let q = Tensor::randn(&[3, 4], 1.0, &mut r);
    let k = Tensor::randn(&[3, 4], 1.0, &mut r);
    let v = Tensor::randn(&[3, 4], 1.0, &mut r);
    let (sparse, evals) = sliding_window_attention_eval(&q, &k, &v, 8, &[0, 0, 0], &[1, 1, 1]).unwrap();
    assert_eq!(evals, 9);
    let full = dense_attention(&q, &k, &v, 1000, &[0, 0, 0], &[1, 1, 1]);
    assert!(sparse.max_abs_diff(&full) < 1e-12);
}

#[test]
fn sixty_four_tokens_with_five_globals() {
    let mut r = rng(1);
    let n = 64;
    let q = Tensor::randn(&[n, 8], 1.0, &mut r);
    let k = Tensor::randn(&[n, 8], 1.0, &mut r);
    let v = Tensor::randn(&[n, 8], 1.0, &mut r);
    let global: Vec<u8> = (0..n).map(|i| u8::from(i < 5)).collect();
    let attn = vec![1u8; n];
    let (sparse, _) = sliding_window_attention_eval(&q, &k, &v, 8, &global, &attn).unwrap();
    let dense = dense_attention(&q, &k, &v, 8, &global, &attn);
    assert!(sparse.max_abs_diff(&dense) < 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn sparse_matches_dense(n in 1usize..=64, half in 1usize..=4, seed in 0u64..10_000, gdens in 0u32..4, pdens in 0u32..4) {
        let window = 2 * half;
        let mut r = rng(seed);
        let q = Tensor::randn(&[n, 3], 1.0, &mut r);
        let k = Tensor::randn(&[n, 3], 1.0, &mut r);
        let v = Tensor::randn(&[n, 3], 1.0, &mut r);
        let u = Tensor::uniform(&[2 * n], 0.0, 1.0, &mut r);
        let global: Vec<u8> = (0..n).map(|i| u8::from(u.data()[i] < 0.1 * gdens as f64)).collect();
        let attn: Vec<u8> = (0..n).map(|i| u8::from(u.data()[n + i] >= 0.15 * pdens as f64)).collect();
        let (sparse, _) = sliding_window_attention_eval(&q, &k, &v, window, &global, &attn).unwrap();
        let dense = dense_attention(&q, &k, &v, window, &global, &attn);
        prop_assert!(sparse.max_abs_diff(&dense) < 1e-10);

        // permitted weights sum to one per non-empty row
        let pattern = sliding_window_pattern(window, &global, &attn).unwrap();
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.param(&q), tape.param(&k), tape.constant(Tensor::full(&[n, 3], 1.0)));
        let ones = tape.attention(qv, kv, vv, 1, Rc::new(pattern.clone())).unwrap();
        for i in 0..n {
            let expect = if pattern.row(i).is_empty() { 0.0 } else { 1.0 };
            prop_assert!((tape.value(ones)[i * 3] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn score_counter_is_linear_in_length() {
    let count = |n: usize| {
        let global: Vec<u8> = (0..n).map(|i| u8::from(i < 3)).collect();
        sliding_window_pattern(16, &global, &vec![1; n]).unwrap().nnz() as f64
    };
    for n in [128usize, 256, 512] {
        let ratio = count(2 * n) / count(n);
        assert!(ratio < 2.2, "n={n} ratio={ratio}");
    }
}

struct AttentionObjective {
    heads: usize,
    pattern: Rc<AttentionPattern>,
    target: Tensor,
}

impl Objective for AttentionObjective {
    fn loss(&self, p: &ParamStore) -> Result<f64> {
        Ok(self.loss_and_grad(p)?.0)
    }

    fn loss_and_grad(&self, p: &ParamStore) -> Result<(f64, Vec<Tensor>)> {
        let mut t = Tape::new();
        let vars: Vec<_> = p.tensors().iter().map(|x| t.param(x)).collect();
        let out = t.attention(vars[0], vars[1], vars[2], self.heads, self.pattern.clone())?;
        let target = t.constant(self.target.clone());
        let prod = t.mul(out, target)?;
        let l = t.sum(prod);
        let mut g = t.backward(l)?;
        Ok((t.scalar_value(l), vars.iter().map(|&v| g.take(v)).collect()))
    }
}

#[test]
fn multi_head_attention_gradients() {
    let mut r = rng(2);
    let n = 12;
    let global: Vec<u8> = (0..n).map(|i| u8::from(i == 0 || i == 7)).collect();
    let mut attn = vec![1u8; n];
    attn[11] = 0;
    let pattern = Rc::new(sliding_window_pattern(4, &global, &attn).unwrap());
    let mut p = ParamStore::new();
    for name in ["q", "k", "v"] {
        p.push(name, Tensor::randn(&[n, 6], 1.0, &mut r));
    }
    let obj = AttentionObjective {
        heads: 3,
        pattern,
        target: Tensor::randn(&[n, 6], 1.0, &mut r),
    };
    let report = gradient_check(&obj, &p, 1e-4, 1e-6).unwrap();
    assert!(report.passed(), "{}", report.render());
}

fn sample_seq(config: &ModelConfig, q: usize, d: usize, r: &mut Rng) -> TokenSequence {
    let ids = Tensor::uniform(&[q + d], 4.0, config.vocab_size as f64, r);
    let ids: Vec<u32> = ids.data().iter().map(|&x| x as u32).collect();
    pack_ids(&ids[..q], &ids[q..], config.max_len, config.global_attention).unwrap()
}

#[test]
fn encoder_output_shape_and_determinism() {
    let config = ModelConfig {
        dropout_rate: 0.2,
        ..ModelConfig::tiny(30)
    };
    let mut r = rng(3);
    let params = ModelParams::init(&config, &mut r).unwrap();
    let seq = sample_seq(&config, 3, 20, &mut r);
    let a = encoder_forward(&seq, &params, false, &mut rng(10)).unwrap();
    let b = encoder_forward(&seq, &params, false, &mut rng(11)).unwrap();
    assert_eq!(a.shape(), [seq.len(), 16]);
    assert_eq!(a, b);
    let c = encoder_forward(&seq, &params, true, &mut rng(12)).unwrap();
    let d = encoder_forward(&seq, &params, true, &mut rng(12)).unwrap();
    assert_eq!(c, d);
    assert_ne!(a, c);
}

#[test]
fn shared_projection_variant_runs() {
    let config = ModelConfig {
        separate_global_projections: false,
        ..ModelConfig::tiny(30)
    };
    let mut r = rng(4);
    let params = ModelParams::init(&config, &mut r).unwrap();
    assert!(params.store().index_of("layers.0.attn.query_global.weight").is_none());
    let seq = sample_seq(&config, 2, 10, &mut r);
    assert_eq!(encoder_forward(&seq, &params, false, &mut r).unwrap().shape(), [15, 16]);
}

#[test]
fn out_of_range_token_is_an_error() {
    let config = ModelConfig::tiny(10);
    let params = ModelParams::zeros(&config).unwrap();
    let seq = pack_ids(&[4], &[10], 32, GlobalAttention::ClsAndQuery).unwrap();
    assert!(encoder_forward(&seq, &params, false, &mut rng(0)).is_err());
}

#[test]
fn zero_head_gives_uniform_probabilities() {
    let config = ModelConfig::tiny(10);
    let params = ModelParams::zeros(&config).unwrap();
    let logits = relevance_head(&Tensor::full(&[16], 0.3), &params, false, &mut rng(0)).unwrap();
    assert_eq!(logits.data(), [0.0, 0.0]);
    assert_eq!(softmax2(logits.data()), [0.5, 0.5]);
}

#[test]
fn scalar_head_matches_closed_form() {
    let config = ModelConfig {
        hidden_dim: 1,
        num_heads: 1,
        classifier_hidden_dim: 1,
        ..ModelConfig::tiny(10)
    };
    let mut params = ModelParams::zeros(&config).unwrap();
    let set = |p: &mut ModelParams, name: &str, vals: &[f64]| {
        let i = p.store().index_of(name).unwrap();
        p.store_mut().get_mut(i).data_mut().copy_from_slice(vals);
    };
    // W1·h0 + b1 = 2·0.75 − 0.5 = 1, and gelu(1) = Φ(1) = 0.841344746068543
    set(&mut params, "head.dense.weight", &[2.0]);
    set(&mut params, "head.dense.bias", &[-0.5]);
    set(&mut params, "head.out.weight", &[-1.0, 3.0]);
    set(&mut params, "head.out.bias", &[0.25, 0.1]);
    let logits = relevance_head(&Tensor::vector(vec![0.75]), &params, false, &mut rng(0)).unwrap();
    let g = 0.841_344_746_068_543;
    assert!((logits.data()[0] - (0.25 - g)).abs() < 1e-12);
    assert!((logits.data()[1] - (0.1 + 3.0 * g)).abs() < 1e-12);
    let p = softmax2(logits.data());
    assert!((p[0] + p[1] - 1.0).abs() < 1e-15);
}

fn fixture() -> (Vocabulary, DocumentStore, Query) {
    let docs: DocumentStore = [
        ("d1", "rust ownership and borrowing"),
        ("d2", "python garbage collection"),
        ("d3", "memory safety in rust"),
        ("d0", "systems programming"),
    ]
    .into_iter()
    .map(|(id, body)| Document {
        doc_id: id.into(),
        url: String::new(),
        title: "t".into(),
        body: body.into(),
    })
    .collect();
    let query = Query {
        query_id: "q1".into(),
        text: "rust memory".into(),
    };
    let queries = [query.clone()].into_iter().collect();
    let vocab = Vocabulary::build(&docs, &queries, DocumentText::TitleBody, 64).unwrap();
    (vocab, docs, query)
}

fn candidates(ids: &[&str]) -> CandidateSet {
    CandidateSet {
        query_id: "q1".into(),
        candidates: ids
            .iter()
            .enumerate()
            .map(|(i, d)| Candidate {
                doc_id: d.to_string(),
                score: 10.0 - i as f64,
            })
            .collect(),
    }
}

#[test]
fn pair_scores_are_probabilities_and_repeatable() {
    let (vocab, docs, query) = fixture();
    let config = ModelConfig {
        init_std: 0.2,
        ..ModelConfig::tiny(64)
    };
    let params = ModelParams::init(&config, &mut rng(5)).unwrap();
    for doc in docs.iter() {
        let s = score_pair(&query, doc, &vocab, &params).unwrap();
        assert!(s > 0.0 && s < 1.0);
        assert_eq!(s, score_pair(&query, doc, &vocab, &params).unwrap());
    }
}

#[test]
fn rerank_is_a_permutation_independent_of_candidate_order() {
    let (vocab, docs, query) = fixture();
    let config = ModelConfig {
        init_std: 0.2,
        ..ModelConfig::tiny(64)
    };
    let params = ModelParams::init(&config, &mut rng(6)).unwrap();
    let a = rerank(&query, &candidates(&["d1", "d2", "d3", "d0"]), &docs, &vocab, &params, "t").unwrap();
    let b = rerank(&query, &candidates(&["d0", "d3", "d2", "d1"]), &docs, &vocab, &params, "t").unwrap();
    assert_eq!(a, b);
    let mut ids: Vec<_> = a.iter().map(|e| e.doc_id.clone()).collect();
    ids.sort();
    assert_eq!(ids, ["d0", "d1", "d2", "d3"]);
    assert_eq!(a.iter().map(|e| e.rank).collect::<Vec<_>>(), [1, 2, 3, 4]);
    for e in &a {
        let doc = docs.get(&e.doc_id).unwrap();
        assert_eq!(e.score, score_pair(&query, doc, &vocab, &params).unwrap());
    }
}

#[test]
fn rerank_edge_cases() {
    let (vocab, docs, query) = fixture();
    let params = ModelParams::zeros(&ModelConfig::tiny(64)).unwrap();
    let single = rerank(&query, &candidates(&["d2"]), &docs, &vocab, &params, "t").unwrap();
    assert_eq!(single[0].rank, 1);
    // all-zero weights give every document probability 0.5
    let tied = rerank(&query, &candidates(&["d3", "d1", "d0"]), &docs, &vocab, &params, "t").unwrap();
    assert_eq!(tied.iter().map(|e| e.doc_id.as_str()).collect::<Vec<_>>(), ["d0", "d1", "d3"]);
    assert!(rerank(&query, &candidates(&[]), &docs, &vocab, &params, "t").is_err());
    assert!(rerank(&query, &candidates(&["missing"]), &docs, &vocab, &params, "t").is_err());
}

proptest! {
    #[test]
    fn ordering_survives_monotone_transforms(scores in proptest::collection::vec(0.0f64..1.0, 1..30)) {
        let named: Vec<(String, f64)> = scores.iter().enumerate().map(|(i, &s)| (format!("d{i:02}"), s)).collect();
        let transformed: Vec<(String, f64)> = named.iter().map(|(d, s)| (d.clone(), (3.0 * s).exp() - 7.0)).collect();
        let a: Vec<String> = rank_scored("q", named, "t").into_iter().map(|e| e.doc_id).collect();
        let b: Vec<String> = rank_scored("q", transformed, "t").into_iter().map(|e| e.doc_id).collect();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn small_model_gradient_check() {
    let config = ModelConfig {
        init_std: 0.2,
        max_len: 32,
        ..ModelConfig::tiny(12)
    };
    let params = ModelParams::init(&config, &mut rng(7)).unwrap();
    let seq = sample_seq(&config, 4, 24, &mut rng(8));
    let report = crate::training::model_gradient_check(&params, &[(seq, 1)], 1e-3, 1e-4).unwrap();
    assert_eq!(report.tensors.len(), params.store().len());
    assert!(report.passed(), "{}", report.render());
}

#[test]
fn config_file_roundtrip_and_validation() {
    let config = ModelConfig {
        dropout_rate: 0.15,
        separate_global_projections: false,
        global_attention: GlobalAttention::ClsOnly,
        ..ModelConfig::tiny(50)
    };
    let f = tempfile::NamedTempFile::new().unwrap();
    config.save(f.path()).unwrap();
    assert_eq!(ModelConfig::load(f.path()).unwrap(), config);
    let mut kv = KvConfig::new();
    kv.set("window", "5");
    assert!(ModelConfig::default().with_overrides(&kv).is_err());
    let mut kv = KvConfig::new();
    kv.set("hidden_dim", "30");
    assert!(ModelConfig::default().with_overrides(&kv).is_err());
    let mut kv = KvConfig::new();
    kv.set("colour", "blue");
    assert!(ModelConfig::default().with_overrides(&kv).is_err());
}

#[test]
fn checkpoint_roundtrip_and_mismatch() {
    let config = ModelConfig::tiny(20);
    let params = ModelParams::init(&config, &mut rng(9)).unwrap();
    let f = tempfile::NamedTempFile::new().unwrap();
    params.save(f.path()).unwrap();
    let back = ModelParams::load(&config, f.path()).unwrap();
    assert_eq!(back.store(), params.store());
    let other = ModelConfig {
        hidden_dim: 8,
        ..config
    };
    assert!(matches!(ModelParams::load(&other, f.path()), Err(Error::Checkpoint(_))));
}
