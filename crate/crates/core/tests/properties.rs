use lft_core::corpus::{self, special};
use lft_core::encoder::apply_prefix;
use lft_core::eval::{self, group_run, Qrels};
use lft_core::lft::{lora_forward, lora_merge};
use lft_core::encoder::LoraHook;
use lft_core::rankers;
use lft_core::tensor::{layer_norm, softmax_rows, Graph, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, range: f64) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-range..range, rows * cols).prop_map(move |v| Tensor::new(&[rows, cols], v).unwrap())
}

fn shaped(max_rows: usize, max_cols: usize, range: f64) -> impl Strategy<Value = Tensor<f64>> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(move |(r, c)| matrix(r, c, range))
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(x in shaped(6, 9, 50.0)) {
        let s = softmax_rows(&x);
        for i in 0..s.rows() {
            let total: f64 = s.row(i).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            prop_assert!(s.row(i).iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(x in shaped(5, 12, 10.0)) {
        prop_assume!(x.cols() >= 2);
        let c = x.cols();
        let y = layer_norm(&x, &Tensor::full(&[c], 1.0), &Tensor::zeros(&[c]), 1e-12).unwrap();
        for i in 0..x.rows() {
            let row = x.row(i);
            let m = row.iter().sum::<f64>() / c as f64;
            let spread = row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / c as f64;
            prop_assume!(spread > 1e-6);
            let out = y.row(i);
            let mu = out.iter().sum::<f64>() / c as f64;
            let var = out.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / c as f64;
            prop_assert!(mu.abs() < 1e-6);
            prop_assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn maxsim_never_drops_when_a_document_row_is_added(
        q in matrix(3, 4, 1.0),
        d in shaped(6, 4, 1.0).prop_filter("four columns", |t| t.cols() == 4),
        extra in matrix(1, 4, 1.0),
    ) {
        let before = rankers::score_colbert_values(&q, &d).unwrap();
        let mut data = d.data().to_vec();
        data.extend_from_slice(extra.data());
        let grown = Tensor::new(&[d.rows() + 1, 4], data).unwrap();
        let after = rankers::score_colbert_values(&q, &grown).unwrap();
        prop_assert!(after >= before);
    }

    #[test]
    fn maxsim_ignores_document_row_order(q in matrix(2, 3, 1.0), d in matrix(5, 3, 1.0), rot in 0usize..5) {
        let rows: Vec<&[f64]> = (0..5).map(|i| d.row((i + rot) % 5)).collect();
        let shuffled = Tensor::from_rows(&rows);
        let a = rankers::score_colbert_values(&q, &d).unwrap();
        let b = rankers::score_colbert_values(&q, &shuffled).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn twin_features_are_symmetric_in_the_interaction_blocks(q in matrix(1, 5, 2.0), d in matrix(1, 5, 2.0)) {
        let feats = |a: &Tensor<f64>, b: &Tensor<f64>| {
            let mut g = Graph::new();
            let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
            let f = rankers::twin_features(&mut g, va, vb).unwrap();
            g.value(f).data().to_vec()
        };
        let (fw, bw) = (feats(&q, &d), feats(&d, &q));
        prop_assert_eq!(&fw[10..], &bw[10..]);
        prop_assert_eq!(&fw[..5], &bw[5..10]);
        prop_assert_eq!(&fw[5..10], &bw[..5]);
    }

    #[test]
    fn triplet_loss_is_a_decreasing_probability(a in -15.0f64..15.0, b in -15.0f64..15.0, step in 0.01f64..5.0) {
        let l = eval::triplet_loss(a, b);
        prop_assert!(l > 0.0 && l < 1.0);
        prop_assert!(eval::triplet_loss(a + step, b) <= l);
        prop_assert!(eval::triplet_loss(a, b + step) >= l);
    }

    #[test]
    fn metrics_stay_in_unit_interval_and_ideal_runs_score_one(
        rels in prop::collection::vec(0u32..4, 1..15),
        k in 1usize..12,
    ) {
        let mut qrels = Qrels::default();
        for (i, &r) in rels.iter().enumerate() {
            qrels.insert("q", &format!("d{i:02}"), r);
        }
        // Scores equal to the grade give the ideal ordering.
        let scored: Vec<(String, f64)> = rels.iter().enumerate().map(|(i, &r)| (format!("d{i:02}"), r as f64)).collect();
        let run = group_run(eval::rerank_scores("q", scored, "t"));
        let n = eval::ndcg_at_k(&run, &qrels, k).unwrap().mean();
        let p = eval::precision_at_k(&run, &qrels, k).unwrap().mean();
        prop_assert!((0.0..=1.0).contains(&p));
        if rels.iter().any(|&r| r > 0) {
            prop_assert!((n - 1.0).abs() < 1e-12);
        } else {
            prop_assert_eq!(n, 0.0);
        }
    }

    #[test]
    fn t_test_tails_are_complementary(
        a in prop::collection::vec(0.0f64..1.0, 2..12),
        b in prop::collection::vec(0.0f64..1.0, 2..12),
    ) {
        let ab = eval::t_test_one_tailed(&a, &b).unwrap();
        let ba = eval::t_test_one_tailed(&b, &a).unwrap();
        prop_assert!((ab.p + ba.p - 1.0).abs() < 1e-12);
        prop_assert!((ab.t + ba.t).abs() < 1e-12);
    }

    #[test]
    fn folds_partition_the_queries(n in 3usize..40, folds in 3usize..6, seed in any::<u64>()) {
        prop_assume!(n >= folds);
        let qids: Vec<String> = (0..n).map(|i| format!("q{i:02}")).collect();
        let f = eval::fold_split(&qids, folds, seed).unwrap();
        let mut all: Vec<String> = f.folds.iter().flatten().cloned().collect();
        all.sort();
        prop_assert_eq!(&all, &qids);
        for r in 0..folds {
            let s = f.rotation(r).unwrap();
            prop_assert_eq!(s.train.len() + s.val.len() + s.test.len(), n);
            prop_assert!(s.test.iter().all(|q| !s.train.contains(q) && !s.val.contains(q)));
        }
    }

    #[test]
    fn zero_b_leaves_the_projection_unchanged(x in matrix(3, 4, 2.0), w in matrix(5, 4, 1.0), a in matrix(2, 4, 1.0)) {
        let mut g = Graph::<f64>::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let bias = g.constant(Tensor::zeros(&[5]));
        let hook = LoraHook { a: g.constant(a.clone()), b: g.constant(Tensor::zeros(&[5, 2])), scale: 3.0, dropout: 0.0 };
        let plain = lora_forward(&mut g, xv, wv, bias, None).unwrap();
        let adapted = lora_forward(&mut g, xv, wv, bias, Some(hook)).unwrap();
        prop_assert!(g.value(plain).bit_eq(g.value(adapted)));
        prop_assert!(lora_merge(&w, &a, &Tensor::zeros(&[5, 2]), 3.0).unwrap().bit_eq(&w));
    }

    #[test]
    fn merged_weights_match_the_adapter_path(x in matrix(3, 4, 2.0), w in matrix(5, 4, 1.0), a in matrix(2, 4, 1.0), b in matrix(5, 2, 1.0)) {
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x.clone());
        let bias = g.constant(Tensor::zeros(&[5]));
        let wv = g.constant(w.clone());
        let hook = LoraHook { a: g.constant(a.clone()), b: g.constant(b.clone()), scale: 0.5, dropout: 0.0 };
        let adapted = lora_forward(&mut g, xv, wv, bias, Some(hook)).unwrap();
        let merged = g.constant(lora_merge(&w, &a, &b, 0.5).unwrap());
        let folded = lora_forward(&mut g, xv, merged, bias, None).unwrap();
        prop_assert!(g.value(adapted).max_abs_diff(g.value(folded)) < 1e-10);
    }

    #[test]
    fn prefix_replaces_slots_and_keeps_the_rest(hidden in matrix(6, 3, 5.0), prefix in shaped(6, 3, 5.0).prop_filter("three columns", |t| t.cols() == 3)) {
        let mut g = Graph::<f64>::new();
        let (h, p) = (g.constant(hidden.clone()), g.constant(prefix.clone()));
        let out = apply_prefix(&mut g, h, p).unwrap();
        let v = g.value(out);
        for i in 0..6 {
            let want = if i < prefix.rows() { prefix.row(i) } else { hidden.row(i) };
            prop_assert_eq!(v.row(i), want);
        }
    }

    #[test]
    fn vocabulary_round_trips_known_words(words in prop::collection::vec("[a-z]{1,6}", 1..20)) {
        let text = words.join(" ");
        let vocab = corpus::build_vocab([text.as_str()], 1000).unwrap();
        let ids = vocab.encode(&text);
        prop_assert!(ids.iter().all(|&i| i >= special::FIRST_WORD));
        prop_assert_eq!(vocab.decode(&ids), words.iter().map(String::as_str).collect::<Vec<_>>());
    }
}
