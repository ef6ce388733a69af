//! Property-based invariants over randomized inputs.

use proptest::prelude::*;

use normlab_core::checkpoint;
use normlab_core::context::{CnSpec, ContextNorm};
use normlab_core::gmm::GmmModel;
use normlab_core::kernels::{self, ReduceSet};
use normlab_core::param::ParamStore;
use normlab_core::tensor::{Shape4, Tensor4};

fn arb_shape() -> impl Strategy<Value = Shape4> {
    (1usize..4, 1usize..5, 1usize..4, 1usize..4).prop_map(|(n, c, h, w)| Shape4::new(n, c, h, w))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn responsibility_rows_are_distributions(
        k in 1usize..4,
        dim in 1usize..4,
        m in 1usize..6,
        raw in prop::collection::vec(-4.0f64..4.0, 64),
        wraw in prop::collection::vec(0.1f64..1.0, 4),
    ) {
        let means: Vec<f64> = raw.iter().cycle().take(k * dim).cloned().collect();
        let vars: Vec<f64> = raw.iter().map(|v| 0.2 + v.abs()).cycle().take(k * dim).collect();
        let total: f64 = wraw[..k].iter().sum();
        let weights: Vec<f64> = wraw[..k].iter().map(|w| w / total).collect();
        let gmm = GmmModel::new(k, dim, weights, means, vars).unwrap();
        let x: Vec<f64> = raw.iter().cycle().take(m * dim).map(|v| v * 0.5).collect();
        let resp = gmm.responsibilities(&x, m).unwrap();
        for i in 0..m {
            let row = resp.row(i);
            prop_assert!(row.iter().all(|&t| (0.0..=1.0).contains(&t)));
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12, "row {i} sums to {sum}");
        }
    }

    /// `expand` is the linear adjoint of summed reduction:
    /// `<expand(v), w> = <v, reduce_sum(w)>` must hold exactly.
    #[test]
    fn expand_is_adjoint_to_reduce_sum(
        shape in arb_shape(),
        seed_v in prop::collection::vec(-2.0f64..2.0, 64),
        seed_w in prop::collection::vec(-2.0f64..2.0, 256),
    ) {
        for set in [
            ReduceSet::All,
            ReduceSet::PerChannel,
            ReduceSet::PerSample,
            ReduceSet::PerSampleChannel,
            ReduceSet::PerSampleGroup(1),
        ] {
            let rshape = set.reduced_shape(shape).unwrap();
            let v = Tensor4::from_vec(
                rshape,
                seed_v.iter().cycle().take(rshape.numel()).cloned().collect(),
            ).unwrap();
            let w = Tensor4::from_vec(
                shape,
                seed_w.iter().cycle().take(shape.numel()).cloned().collect(),
            ).unwrap();
            let big = kernels::expand(&v, set, shape).unwrap();
            let small = kernels::reduce_sum(&w, set).unwrap();
            let lhs = dot(big.data(), w.data());
            let rhs = dot(v.data(), small.data());
            prop_assert!(
                (lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()),
                "{set:?}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn checkpoint_round_trips_any_store(
        specs in prop::collection::vec(
            ((1usize..3, 1usize..4, 1usize..3, 1usize..3), prop::collection::vec(-10.0f64..10.0, 1)),
            1..5,
        ),
    ) {
        let mut store = ParamStore::<f64>::new();
        for (i, ((n, c, h, w), fill)) in specs.iter().enumerate() {
            let shape = Shape4::new(*n, *c, *h, *w);
            let data: Vec<f64> = (0..shape.numel()).map(|j| fill[0] + j as f64 * 0.25).collect();
            store
                .insert(&format!("t{i}"), Tensor4::from_vec(shape, data).unwrap(), i % 2 == 0)
                .unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        checkpoint::save(&store, &path).unwrap();
        let back = checkpoint::load::<f64>(&path).unwrap();
        prop_assert_eq!(back.len(), store.len());
        for (name, entry) in store.iter() {
            let loaded = back.tensor(name).unwrap();
            prop_assert_eq!(loaded.shape(), entry.tensor.shape());
            for (a, b) in entry.tensor.data().iter().zip(loaded.data()) {
                prop_assert!((*a as f32 - *b as f32).abs() == 0.0, "{name}: {a} vs {b}");
            }
        }
    }

    /// Re-normalizing with the source context undoes a style transfer.
    #[test]
    fn style_transfer_there_and_back_is_identity(
        seed in 0u64..500,
        from in 0usize..3,
        to in 0usize..3,
        pix in prop::collection::vec(-2.0f64..2.0, 2 * 3 * 4),
    ) {
        let mut store = ParamStore::<f64>::new();
        let cn = ContextNorm::init(&mut store, "cn", 3, &CnSpec::new(3), seed).unwrap();
        let x = Tensor4::from_vec(Shape4::new(2, 3, 2, 2), pix).unwrap();
        let there = cn.style_transfer(&store, &x, from, to).unwrap();
        let back = cn.style_transfer(&store, &there, to, from).unwrap();
        for (a, b) in x.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }
    }
}
