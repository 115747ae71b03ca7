//! Property tests for the spec-level invariants.

use proptest::prelude::*;

use rct_core::analysis::{head_counters, top_k_interactions};
use rct_core::data::{split_dataset, Dataset, FeatureValue, RateCard};
use rct_core::embeddings::{EncodedValue, ModelInput, RateCardEmbedder, Reduction};
use rct_core::graph::Graph;
use rct_core::preprocess::fit_preprocess;
use rct_core::schema::{FeatureSchema, FeatureSpec, GroupKind};
use rct_core::synthgen::{self, oracle_cost, CostOracle};
use rct_core::tensor::Tensor;
use rct_core::training::mae_percent;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-60.0f64..60.0, 1..12)) {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(values));
        let y = g.softmax(x);
        let sum: f64 = g.value(y).data().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);
        prop_assert!(g.value(y).data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn sequence_length_formula_holds(
        m_d in 1usize..3, n_d in 1usize..3,
        m_r in 1usize..3, n_r in 1usize..3,
        m_s in 1usize..3, n_s in 1usize..3,
        n_items in 1usize..5, n_charges in 0usize..4,
    ) {
        let numericals = |m: usize, tag: &str| -> Vec<FeatureSpec> {
            (0..m).map(|i| FeatureSpec::numerical(&format!("{tag}_num{i}"))).collect()
        };
        let cats = |n: usize, tag: &str| -> Vec<FeatureSpec> {
            (0..n).map(|i| FeatureSpec::categorical(&format!("{tag}_cat{i}"), 3)).collect()
        };
        let mut dimension = numericals(m_d, "d");
        dimension.extend(cats(n_d, "d"));
        let mut route = numericals(m_r, "r");
        route.extend(cats(n_r, "r"));
        let mut service = numericals(m_s, "s");
        service.extend(cats(n_s, "s"));
        let schema = FeatureSchema {
            dimension,
            route,
            service,
            item: vec![FeatureSpec::numerical("i_num"), FeatureSpec::categorical("i_cat", 3)],
            charge: vec![FeatureSpec::numerical("c_num")],
        };
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let embedder = RateCardEmbedder::<f64>::new(&schema, 4, Reduction::Mean, &mut rng);
        let group = |specs: &[FeatureSpec]| -> Vec<EncodedValue<f64>> {
            specs.iter().map(|s| match s.cardinality {
                Some(_) => EncodedValue::Cat(1),
                None => EncodedValue::Num(0.5),
            }).collect()
        };
        let input = ModelInput {
            dimension: group(&schema.dimension),
            route: group(&schema.route),
            service: group(&schema.service),
            items: (0..n_items).map(|_| group(&schema.item)).collect(),
            charges: (0..n_charges).map(|_| group(&schema.charge)).collect(),
            heuristic_std: 0.0,
            heuristic_cost: 1.0,
            actual_cost: Some(1.0),
        };
        let mut g = Graph::new();
        let seq = embedder.embed(&mut g, &input).unwrap();
        let expected = (m_d + n_d) + (m_r + n_r) + (m_s + n_s) + n_items + n_charges + 1;
        prop_assert_eq!(g.value(seq).shape(), &[expected, 4]);
    }

    #[test]
    fn variable_embedding_is_permutation_equivariant(
        entries in prop::collection::vec((0usize..4, -2.0f64..2.0), 1..6),
        seed in 0u64..50,
    ) {
        let schema = FeatureSchema {
            dimension: vec![FeatureSpec::numerical("w")],
            route: vec![FeatureSpec::numerical("d")],
            service: vec![FeatureSpec::numerical("f")],
            item: vec![FeatureSpec::categorical("cat", 3), FeatureSpec::numerical("x")],
            charge: vec![FeatureSpec::numerical("u")],
        };
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let embedder = RateCardEmbedder::<f64>::new(&schema, 4, Reduction::Mean, &mut rng);
        let entries: Vec<Vec<EncodedValue<f64>>> = entries
            .into_iter()
            .map(|(c, x)| vec![EncodedValue::Cat(c), EncodedValue::Num(x)])
            .collect();
        let mut reversed = entries.clone();
        reversed.reverse();
        let mut g = Graph::new();
        let fwd = embedder.item.embed_variable(&mut g, &entries, Reduction::Mean).unwrap();
        let rev = embedder.item.embed_variable(&mut g, &reversed, Reduction::Mean).unwrap();
        for (i, r) in rev.iter().enumerate() {
            let f = fwd[fwd.len() - 1 - i];
            prop_assert_eq!(g.value(f).data(), g.value(*r).data());
        }
    }

    #[test]
    fn split_is_an_exact_partition(n in 10usize..120, seed in 0u64..1000) {
        let schema = FeatureSchema {
            dimension: vec![FeatureSpec::numerical("id")],
            route: vec![FeatureSpec::numerical("r")],
            service: vec![FeatureSpec::numerical("s")],
            item: vec![FeatureSpec::numerical("x")],
            charge: vec![FeatureSpec::numerical("u")],
        };
        let records: Vec<RateCard> = (0..n)
            .map(|i| RateCard {
                dimension: vec![FeatureValue::Number(i as f64)],
                route: vec![FeatureValue::Number(0.0)],
                service: vec![FeatureValue::Number(0.0)],
                items: vec![vec![FeatureValue::Number(0.0)]],
                charges: vec![],
                heuristic_cost: 1.0,
                actual_cost: Some(1.0),
            })
            .collect();
        let ds = Dataset { schema, records, encoded: false };
        let (tr, va, te) = split_dataset(&ds, (0.7, 0.2, 0.1), seed).unwrap();
        let mut ids: Vec<i64> = tr.records.iter()
            .chain(&va.records)
            .chain(&te.records)
            .map(|r| r.dimension[0].as_number().unwrap() as i64)
            .collect();
        ids.sort_unstable();
        let expected: Vec<i64> = (0..n as i64).collect();
        prop_assert_eq!(ids, expected);
    }

    #[test]
    fn category_encoding_is_bijective_on_training_set(
        cats in prop::collection::btree_set("[a-z]{1,6}", 1..8),
    ) {
        let schema = FeatureSchema {
            dimension: vec![FeatureSpec::categorical("c", 8)],
            route: vec![FeatureSpec::numerical("r")],
            service: vec![FeatureSpec::numerical("s")],
            item: vec![FeatureSpec::numerical("x")],
            charge: vec![FeatureSpec::numerical("u")],
        };
        let records: Vec<RateCard> = cats.iter()
            .map(|c| RateCard {
                dimension: vec![FeatureValue::Text(c.clone())],
                route: vec![FeatureValue::Number(0.0)],
                service: vec![FeatureValue::Number(0.0)],
                items: vec![vec![FeatureValue::Number(0.0)]],
                charges: vec![],
                heuristic_cost: 1.0,
                actual_cost: Some(1.0),
            })
            .collect();
        let ds = Dataset { schema, records, encoded: false };
        let state = fit_preprocess(&ds).unwrap();
        for c in &cats {
            let idx = state.encode_category(
                GroupKind::Dimension, "c", &FeatureValue::Text(c.clone()));
            prop_assert!(idx >= 1);
            prop_assert_eq!(state.decode_category(GroupKind::Dimension, "c", idx), Some(c.as_str()));
        }
        let unseen = state.encode_category(
            GroupKind::Dimension, "c", &FeatureValue::Text("UNSEEN-@@".into()));
        prop_assert_eq!(unseen, 0);
    }

    #[test]
    fn mae_percent_is_permutation_invariant(
        rows in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0, 0.0f64..100.0), 2..20),
        swap_a in 0usize..19, swap_b in 0usize..19,
    ) {
        let n = rows.len();
        let (a, b) = (swap_a % n, swap_b % n);
        let pred: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let actual: Vec<f64> = rows.iter().map(|r| r.1 + 0.5).collect();
        let heur: Vec<f64> = rows.iter().map(|r| r.2 + 101.0).collect();
        let base = mae_percent(&pred, &actual, &heur).unwrap();
        let mut rows2 = rows.clone();
        rows2.swap(a, b);
        let pred2: Vec<f64> = rows2.iter().map(|r| r.0).collect();
        let actual2: Vec<f64> = rows2.iter().map(|r| r.1 + 0.5).collect();
        let heur2: Vec<f64> = rows2.iter().map(|r| r.2 + 101.0).collect();
        let permuted = mae_percent(&pred2, &actual2, &heur2).unwrap();
        prop_assert!((base - permuted).abs() < 1e-9);
    }

    #[test]
    fn top_k_selection_matches_independent_sort(
        raw in prop::collection::vec(0.0f64..1.0, 9..36),
        k in 1usize..12,
    ) {
        let n = (raw.len() as f64).sqrt() as usize;
        let weights: Vec<Vec<f64>> = (0..n)
            .map(|i| raw[i * n..(i + 1) * n].to_vec())
            .collect();
        let got = top_k_interactions(&weights, k);
        // independent brute force over all n*n interactions
        let mut all: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .collect();
        all.sort_by(|&(i1, j1), &(i2, j2)| {
            weights[i2][j2].total_cmp(&weights[i1][j1]).then_with(|| (i1, j1).cmp(&(i2, j2)))
        });
        all.truncate(k.min(n * n));
        prop_assert_eq!(got, all);
        // counters consistent with the selection
        let counters = head_counters(&weights, k);
        prop_assert_eq!(counters.iter().sum::<usize>(), k.min(n * n));
    }

    #[test]
    fn oracle_cost_is_item_and_charge_order_invariant(index in 0usize..60, rot in 1usize..4) {
        let (mut config, schema) = synthgen::synth_std();
        config.n_records = 64;
        let ds = synthgen::generate(&config, &schema).unwrap();
        let oracle = CostOracle::new(&config, &schema);
        let record = &ds.records[index % ds.records.len()];
        let mut permuted = record.clone();
        let item_rot = rot % permuted.items.len().max(1);
        permuted.items.rotate_left(item_rot);
        if !permuted.charges.is_empty() {
            let charge_rot = rot % permuted.charges.len();
            permuted.charges.rotate_left(charge_rot);
        }
        let a = oracle_cost(&oracle, &config, &schema, record);
        let b = oracle_cost(&oracle, &config, &schema, &permuted);
        prop_assert!((a - b).abs() < 1e-9);
    }
}
