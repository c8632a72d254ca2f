use std::collections::BTreeMap;
use std::path::Path;

use lft_core::eval::{Qrels, RunRecord, Triplet};
use lft_core::tensor::{ParamStore, Tensor};
use lft_core::train::EpochLog;
use lft_lab::{checkpoint, formats};
use proptest::prelude::*;

fn token() -> impl Strategy<Value = String> {
    "[A-Za-z0-9_.-]{1,8}"
}

fn p() -> &'static Path {
    Path::new("mem")
}

proptest! {
    #[test]
    fn runs_round_trip_through_files(
        rows in prop::collection::vec((token(), token(), 1usize..500, -1e3f64..1e3), 0..20),
        tag in token(),
    ) {
        let records: Vec<RunRecord> = rows
            .into_iter()
            .map(|(qid, docid, rank, score)| RunRecord {
                qid,
                docid,
                rank,
                // Files carry six decimals.
                score: (score * 1e6).round() / 1e6,
                tag: tag.clone(),
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.run");
        formats::write_run(&path, &records).unwrap();
        let back = formats::read_run(&path).unwrap();
        prop_assert_eq!(back.len(), records.len());
        for (a, b) in back.iter().zip(&records) {
            prop_assert_eq!((&a.qid, &a.docid, a.rank, &a.tag), (&b.qid, &b.docid, b.rank, &b.tag));
            prop_assert!((a.score - b.score).abs() < 1e-9);
        }
        let text = formats::format_run(&records).unwrap();
        prop_assert_eq!(formats::format_run(&formats::parse_run(&text, p()).unwrap()).unwrap(), text);
    }

    #[test]
    fn qrels_round_trip(rows in prop::collection::btree_map((token(), token()), 0u32..4, 0..30)) {
        let mut q = Qrels::default();
        for ((qid, d), r) in &rows {
            q.insert(qid, d, *r);
        }
        let text = formats::format_qrels(&q).unwrap();
        let back = formats::parse_qrels(&text, p()).unwrap();
        for ((qid, d), r) in &rows {
            prop_assert_eq!(back.get(qid, d), *r);
        }
        prop_assert_eq!(formats::format_qrels(&back).unwrap(), text);
    }

    #[test]
    fn texts_triplets_and_candidates_round_trip(
        texts in prop::collection::btree_map(token(), "[a-z]{1,6}( [a-z]{1,6}){0,5}", 1..10),
        cands in prop::collection::btree_map(token(), prop::collection::vec(token(), 1..5), 0..6),
    ) {
        let items: Vec<(String, String)> = texts.clone().into_iter().collect();
        let t = formats::format_texts(&items).unwrap();
        prop_assert_eq!(formats::parse_texts(&t, p()).unwrap(), items.clone());

        let triplets: Vec<Triplet> = items
            .windows(2)
            .map(|w| Triplet { query: w[0].1.clone(), positive: w[0].0.clone(), negative: w[1].0.clone() })
            .collect();
        let t = formats::format_triplets(&triplets).unwrap();
        prop_assert_eq!(formats::parse_triplets(&t, p()).unwrap(), triplets);

        let c = formats::format_candidates(&cands).unwrap();
        let back: BTreeMap<String, Vec<String>> = formats::parse_candidates(&c, p()).unwrap();
        prop_assert_eq!(back, cands);
    }

    #[test]
    fn epoch_logs_round_trip(rows in prop::collection::vec((0.0f64..2.0, 0.0f64..1.0, prop::bool::ANY), 0..12)) {
        let log: Vec<EpochLog> = rows
            .iter()
            .enumerate()
            .map(|(i, &(l, v, s))| EpochLog {
                epoch: i + 1,
                train_loss: (l * 1e6).round() / 1e6,
                val_metric: (v * 1e6).round() / 1e6,
                stage: if s { "stage1" } else { "stage2" }.into(),
            })
            .collect();
        let text = formats::format_epoch_log(&log).unwrap();
        let back = formats::parse_epoch_log(&text, p()).unwrap();
        prop_assert_eq!(formats::format_epoch_log(&back).unwrap(), text);
        prop_assert_eq!(back.len(), log.len());
    }

    #[test]
    fn f32_checkpoints_round_trip_exactly(
        tensors in prop::collection::btree_map("[a-z]{1,4}(\\.[a-z0-9]{1,3}){0,3}", (1usize..4, 1usize..5), 1..6),
        seed in any::<u32>(),
    ) {
        let mut store = ParamStore::<f32>::new();
        let mut k = seed;
        for (name, (r, c)) in &tensors {
            let data: Vec<f32> = (0..r * c)
                .map(|_| {
                    k = k.wrapping_mul(1_664_525).wrapping_add(1_013_904_223);
                    f32::from_bits(k >> 9 | 0x3f80_0000) - 1.5
                })
                .collect();
            store.insert(name.clone(), Tensor::new(&[*r, *c], data).unwrap(), k % 2 == 0).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.lftr");
        checkpoint::save(&store, &path).unwrap();
        let back: ParamStore<f32> = checkpoint::load(&path).unwrap();
        prop_assert_eq!(back.len(), store.len());
        for (name, param) in store.iter() {
            prop_assert!(back.get(name).unwrap().bit_eq(&param.tensor));
        }
        prop_assert_eq!(checkpoint::encode(&back), checkpoint::encode(&store));
    }
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let mut store = ParamStore::<f32>::new();
    store.insert("w", Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true).unwrap();
    let bytes = checkpoint::encode(&store);
    for cut in [0, 4, bytes.len() / 2, bytes.len() - 1] {
        assert!(checkpoint::decode(&bytes[..cut], p()).is_err(), "cut at {cut}");
    }
    assert!(checkpoint::decode(&bytes, p()).is_ok());
}
