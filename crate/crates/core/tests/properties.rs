use std::collections::BTreeMap;

use ndarray::Array2;
use proptest::prelude::*;

use dse_core::evalharness::{pearson, precision, spearman};
use dse_core::graph::{parse_dataset, parse_graph, selection_size, serialize_dataset, serialize_graph, Edge, EdgeMask};
use dse_core::{top_fraction_mask, Graph};

fn arb_graph() -> impl Strategy<Value = Graph> {
    (1usize..12, 1usize..4, 0usize..3, "[a-z][a-z0-9_-]{0,8}").prop_flat_map(|(n, d, label, id)| {
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        let k = pairs.len();
        (
            proptest::sample::subsequence(pairs, 0..=k),
            proptest::collection::vec(-1e6f64..1e6, n * d),
            any::<bool>(),
        )
            .prop_map(move |(edges, feats, with_gt)| {
                let gt = (with_gt && !edges.is_empty()).then(|| edges[..edges.len().div_ceil(2)].to_vec());
                let f = Array2::from_shape_vec((n, d), feats).unwrap();
                Graph::new(id.clone(), n, edges, f, label, gt).unwrap()
            })
    })
}

fn arb_scores() -> impl Strategy<Value = BTreeMap<Edge, f64>> {
    proptest::collection::btree_map((0usize..20, 0usize..20), -10.0f64..10.0, 1..60).prop_map(|m| {
        m.into_iter()
            .filter(|((u, v), _)| u != v)
            .map(|((u, v), s)| (Edge::new(u, v), s))
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn graph_serialization_roundtrips(g in arb_graph()) {
        let back = parse_graph(&serialize_graph(&g)).unwrap();
        prop_assert_eq!(back, g);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn dataset_serialization_roundtrips(gs in proptest::collection::vec(arb_graph(), 0..6)) {
        // Ids must be unique within a dataset.
        let gs: Vec<Graph> = gs
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let edges = g.edges().iter().map(|e| (e.0, e.1));
                let gt = g.ground_truth().map(|s| s.iter().map(|e| (e.0, e.1)).collect());
                Graph::new(format!("{}-{i}", g.id()), g.node_count(), edges, g.features().clone(), g.label(), gt).unwrap()
            })
            .collect();
        prop_assert_eq!(parse_dataset(&serialize_dataset(&gs)).unwrap(), gs);
    }

    #[test]
    fn top_fraction_selects_ceil_of_ratio(scores in arb_scores(), ratio in 0.01f64..=1.0) {
        prop_assume!(!scores.is_empty());
        let n = scores.len();
        let m = top_fraction_mask("g", scores.clone(), ratio).unwrap();
        prop_assert_eq!(m.selected.len(), selection_size(n, ratio));
        prop_assert_eq!(m.selected.len(), ((ratio * n as f64) - 1e-9).ceil().max(0.0) as usize);
        // Nothing left out scores strictly higher than something selected.
        let lo = m.selected.iter().map(|e| scores[e]).fold(f64::INFINITY, f64::min);
        prop_assert!(scores.iter().filter(|(e, _)| !m.selected.contains(e)).all(|(_, s)| *s <= lo));
    }

    #[test]
    fn precision_is_a_fraction(g in arb_graph(), keep in proptest::collection::vec(any::<bool>(), 66)) {
        prop_assume!(g.ground_truth().is_some());
        let sel: Vec<Edge> = g.edges().iter().zip(&keep).filter(|(_, k)| **k).map(|(e, _)| *e).collect();
        let mask = EdgeMask::from_selection(&g, sel).unwrap();
        let p = precision(&mask, &g).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        let gt = EdgeMask::ground_truth(&g).unwrap();
        prop_assert_eq!(precision(&gt, &g).unwrap(), 1.0);
    }

    #[test]
    fn spearman_is_invariant_to_joint_permutation(
        pairs in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..20),
        rot in 0usize..20,
    ) {
        let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let Ok(r) = spearman(&xs, &ys) else { return Ok(()) };
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        let k = rot % xs.len();
        let (mut xr, mut yr) = (xs.clone(), ys.clone());
        xr.rotate_left(k);
        yr.rotate_left(k);
        prop_assert!((spearman(&xr, &yr).unwrap() - r).abs() < 1e-12);
        // Monotone transforms leave ranks unchanged.
        let xe: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
        prop_assert!((spearman(&xe, &ys).unwrap() - r).abs() < 1e-12);
    }

    #[test]
    fn pearson_is_bounded_and_symmetric(pairs in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..20)) {
        let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let Ok(r) = pearson(&xs, &ys) else { return Ok(()) };
        prop_assert!(r.abs() <= 1.0 + 1e-12);
        prop_assert!((pearson(&ys, &xs).unwrap() - r).abs() < 1e-12);
    }
}
