use diffcore::gaussian::{kl_value, nll_value};
use diffcore::rng::stream;
use diffcore::{snapshot, Graph, ParameterSet, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nll_is_smallest_at_the_mean(x in values(3), mean in values(3), lv in prop::collection::vec(-3.0f64..2.0, 3)) {
        prop_assert!(nll_value(&x, &x, &lv) <= nll_value(&x, &mean, &lv) + 1e-12);
    }

    #[test]
    fn kl_is_nonnegative(mq in values(4), lq in values(4), mp in values(4), lp in values(4)) {
        prop_assert!(kl_value(&mq, &lq, &mp, &lp) >= -1e-12);
    }

    #[test]
    fn streams_are_reproducible_and_distinct(seed in any::<u64>(), index in 0u64..1000) {
        let draw = |name: &str, i: u64| -> Vec<u64> {
            let mut r = stream(seed, name, i);
            (0..4).map(|_| r.random()).collect()
        };
        prop_assert_eq!(draw("a", index), draw("a", index));
        prop_assert_ne!(draw("a", index), draw("a", index + 1));
        prop_assert_ne!(draw("a", index), draw("b", index));
    }

    #[test]
    fn square_sum_gradient_is_twice_the_input(x in prop::collection::vec(-10.0f64..10.0, 1..12)) {
        let mut ps = ParameterSet::new();
        ps.insert("x", Tensor::row(&x));
        let mut g = Graph::new();
        let v = g.param(&ps, "x").unwrap();
        let sq = g.square(v);
        let l = g.sum(sq);
        let grads = g.backward(l, &ps).unwrap();
        for (gi, xi) in grads.get("x").unwrap().data().iter().zip(&x) {
            prop_assert_eq!(*gi, 2.0 * xi);
        }
    }

    #[test]
    fn snapshots_round_trip_exactly(seed in any::<u64>(), shapes in prop::collection::vec((1usize..4, 1usize..5), 1..5)) {
        let mut rng = stream(seed, "prop-snapshot", 0);
        let mut ps = ParameterSet::new();
        for (i, (r, c)) in shapes.iter().enumerate() {
            let data = (0..r * c).map(|_| rng.random_range(-1e6..1e6)).collect();
            ps.insert(&format!("p{i}.w"), Tensor::new(vec![*r, *c], data).unwrap());
        }
        let back = snapshot::decode(&snapshot::encode(&ps)).unwrap();
        prop_assert_eq!(snapshot::encode(&back), snapshot::encode(&ps));
        for (name, t) in ps.iter() {
            prop_assert_eq!(back.get(name).unwrap(), t);
        }
    }
}
