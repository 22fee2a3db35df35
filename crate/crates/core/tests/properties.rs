use af_core::backbone::Image;
use af_core::experiment::{ExperimentConfig, Model};
use af_core::gcd_head::{mean_entropy, BatchViews, GcdHead, HeadHyper};
use af_core::numcore::matrix::softmax_rows;
use af_core::synthdata::{generate, SynthSpec};
use af_core::{Graph, Matrix, ParamStore};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-30.0f64..30.0, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn head(seed: u64, d: usize, k: usize) -> (ParamStore, GcdHead) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let head = GcdHead::init(d, k, HeadHyper::default(), &mut store, &mut rng).unwrap();
    (store, head)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_shift_invariant_distributions(m in matrix(3, 7), shifts in prop::collection::vec(-100.0f64..100.0, 3)) {
        let p = softmax_rows(&m);
        let mut shifted = m.clone();
        for (r, s) in shifts.iter().enumerate() {
            shifted.row_mut(r).iter_mut().for_each(|v| *v += s);
        }
        let q = softmax_rows(&shifted);
        for r in 0..3 {
            prop_assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(p.row(r).iter().all(|&v| v >= 0.0));
        }
        for (a, b) in p.data().iter().zip(q.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn proto_probs_lie_on_the_simplex_and_ignore_feature_scale(seed in 0u64..1000, h in matrix(4, 6), scale in 0.01f64..100.0) {
        let (store, head) = head(seed, 6, 5);
        let mut g = Graph::new();
        let b = store.bind(&mut g, |_| true);
        let x = g.constant(h.clone());
        let xs = g.constant(h.scale(scale));
        let p = head.proto_probs(&mut g, &b, x, 0.1).unwrap();
        let q = head.proto_probs(&mut g, &b, xs, 0.1).unwrap();
        let (p, q) = (g.value(p), g.value(q));
        for r in 0..4 {
            prop_assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(p.row(r).iter().all(|&v| v >= 0.0));
        }
        for (a, b) in p.data().iter().zip(q.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn mean_entropy_is_largest_at_uniform(raw in prop::collection::vec(0.01f64..1.0, 8)) {
        let total: f64 = raw.iter().sum();
        let probs = Matrix::row_vector(&raw.iter().map(|v| v / total).collect::<Vec<_>>());
        let mut g = Graph::new();
        let p = g.constant(probs.clone());
        let u = g.constant(Matrix::filled(1, 8, 0.125));
        let hp = mean_entropy(&mut g, p).unwrap();
        let hu = mean_entropy(&mut g, u).unwrap();
        let (hp, hu) = (g.value(hp).item(), g.value(hu).item());
        prop_assert!((hu - 8f64.ln()).abs() < 1e-12);
        let off_uniform = probs.data().iter().any(|&v| (v - 0.125).abs() > 1e-9);
        if off_uniform {
            prop_assert!(hp < hu);
        }
    }

    #[test]
    fn gcd_losses_ignore_batch_order(seed in 0u64..1000, v1 in matrix(6, 6), v2 in matrix(6, 6), rot in 1usize..6) {
        let (store, head) = head(seed, 6, 4);
        let labels = vec![Some(0), None, Some(1), Some(0), None, Some(3)];
        let order: Vec<usize> = (0..6).map(|i| (i + rot) % 6).collect();
        let eval = |a: &Matrix, b: &Matrix, labels: Vec<Option<usize>>| {
            let mut g = Graph::new();
            let bind = store.bind(&mut g, |_| true);
            let view1 = g.constant(a.clone());
            let view2 = g.constant(b.clone());
            let parts = head.losses(&mut g, &bind, &BatchViews { view1, view2, labels }, 3).unwrap();
            [parts.rep_unsup, parts.rep_sup, parts.cls, parts.gcd].map(|v| g.value(v).item())
        };
        let base = eval(&v1, &v2, labels.clone());
        let permuted = eval(
            &v1.select_rows(&order),
            &v2.select_rows(&order),
            order.iter().map(|&i| labels[i]).collect(),
        );
        for (a, b) in base.iter().zip(&permuted) {
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn attention_maps_are_row_stochastic(seed in 0u64..1000, pixels in prop::collection::vec(-3.0f64..3.0, 32 * 32)) {
        let cfg = ExperimentConfig { seed, ..ExperimentConfig::desk() };
        let model = Model::init(&cfg).unwrap();
        let mut image = Image::zeros(32, 1);
        image.data.copy_from_slice(&pixels);
        let (pooled, out) = model.infer(&cfg, &image).unwrap();
        prop_assert!(pooled.is_finite());
        prop_assert!(!out.tapped_attention.is_empty());
        for map in &out.tapped_attention {
            for r in 0..map.rows() {
                prop_assert!((map.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
        let n = cfg.backbone.num_patches();
        prop_assert_eq!(out.outcome.retained.len() + out.outcome.pruned.len(), n);
    }

    #[test]
    fn generated_splits_follow_the_spec(seed in 0u64..10_000, per_class in 4usize..12, objects in 1usize..6) {
        let spec = SynthSpec { seed, samples_per_class: per_class, object_patch_count: objects, ..SynthSpec::default() };
        let data = generate(&spec).unwrap();
        prop_assert_eq!(data.samples.len(), spec.num_classes * per_class);
        for class in 0..spec.num_classes {
            let members: Vec<_> = data.samples.iter().filter(|s| s.label == class).collect();
            prop_assert_eq!(members.len(), per_class);
            let labeled = members.iter().filter(|s| s.labeled).count();
            prop_assert_eq!(labeled, if class < spec.num_known { spec.labeled_per_class() } else { 0 });
        }
        for s in &data.samples {
            prop_assert_eq!(s.object_mask.len(), objects);
            prop_assert!(s.object_mask.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(s.object_mask.iter().all(|&p| p < spec.num_patches()));
        }
        prop_assert_eq!(generate(&spec).unwrap().samples.iter().map(|s| s.image.data.clone()).collect::<Vec<_>>(),
            data.samples.iter().map(|s| s.image.data.clone()).collect::<Vec<_>>());
    }
}
