mod common;

use common::{brute_force_split, oracle_entropy, oracle_gini, random_dataset};
use ftdrf::tree::{best_split_standard, fit_tree, impurity, Node};
use ftdrf::{seed, Criterion, TreeParams};
use proptest::prelude::*;

fn library_split(data: &ftdrf::Dataset, criterion: Criterion) -> Option<(usize, f64, f64)> {
    let rows: Vec<usize> = (0..data.n_samples()).collect();
    let subset: Vec<usize> = (0..data.n_features()).collect();
    best_split_standard(
        &rows,
        data.features(),
        data.labels(),
        data.n_classes(),
        &subset,
        criterion,
    )
    .unwrap()
    .map(|c| (c.feature, c.threshold, c.impurity_decrease))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn standard_split_matches_exhaustive_search(
        seed in any::<u64>(),
        n in 2usize..=64,
        d in 1usize..=4,
        k in 2usize..=3,
        gini in any::<bool>(),
    ) {
        prop_assume!(n >= k);
        let data = random_dataset(seed, n, d, k);
        let criterion = if gini { Criterion::Gini } else { Criterion::Entropy };
        prop_assert_eq!(library_split(&data, criterion), brute_force_split(&data, gini));
    }

    #[test]
    fn tree_root_is_the_exhaustive_best(seed in any::<u64>(), n in 4usize..=64, d in 1usize..=4) {
        let data = random_dataset(seed, n, d, 3);
        let params = TreeParams::standard().with_mtry(Some(d)).with_bootstrap(false);
        let tree = fit_tree(&data, &params, &mut seed::rng_from_seed(seed)).unwrap();
        match (tree.nodes()[0], brute_force_split(&data, false)) {
            (Node::Split { feature, threshold, .. }, Some((f, t, _))) => {
                prop_assert_eq!((feature, threshold), (f, t));
            }
            (Node::Leaf { .. }, None) => {}
            (root, oracle) => prop_assert!(false, "root {:?} vs oracle {:?}", root, oracle),
        }
    }

    #[test]
    fn impurity_matches_reference_formulas(counts in prop::collection::vec(0usize..50, 2..=10)) {
        prop_assume!(counts.iter().sum::<usize>() > 0);
        let k = counts.len() as f64;
        let h = impurity(&counts, Criterion::Entropy).unwrap();
        let g = impurity(&counts, Criterion::Gini).unwrap();
        prop_assert_eq!(h, oracle_entropy(&counts));
        prop_assert_eq!(g, oracle_gini(&counts));
        prop_assert!(h >= 0.0 && h <= k.log2() + 1e-12);
        prop_assert!(g >= 0.0 && g <= 1.0 - 1.0 / k + 1e-12);
    }
}

#[test]
fn worked_examples() {
    let data = ftdrf::Dataset::new(
        ftdrf::Matrix::new(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        vec![0, 0, 1, 1],
        2,
    )
    .unwrap();
    assert_eq!(
        library_split(&data, Criterion::Entropy),
        Some((0, 2.5, 1.0))
    );
    assert_eq!(brute_force_split(&data, false), Some((0, 2.5, 1.0)));
    assert_eq!(impurity(&[8, 4, 4], Criterion::Entropy).unwrap(), 1.5);
}
