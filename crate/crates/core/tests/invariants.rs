use ndarray::{Array1, Array2, Axis};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

use incr3d_core::advisor::AdvisorState;
use incr3d_core::exec::Execution;
use incr3d_core::kernel_attention::{kernel_matrix, AttentionInputs, RandomFeatureMap};
use incr3d_core::model::{token_scores, Mode, Model, ModelConfig, ModelInput, TokenBatch, TrainScope};
use incr3d_core::pointcloud::{dist, prepare_groups, Label};
use incr3d_core::rpp::{rpp_loss, PerturbationConfig};
use incr3d_core::seed;
use incr3d_core::synthgen::{
    build_task_stream, defect_region, generate_normal, inject_defect, CategorySpec, DefectKind, DefectSpec, Shape,
    SplitSizes,
};

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(lo..hi))
}

fn small_spec(shape: Shape) -> CategorySpec {
    CategorySpec {
        points_per_cloud: 512,
        ..CategorySpec::new(shape)
    }
}

fn tiny_model(seed: u64) -> Model {
    let cfg = ModelConfig {
        dim: 8,
        features: 6,
        blocks: 2,
        embed_hidden: 8,
        centers: 16,
        group_size: 8,
        seed,
        ..ModelConfig::default()
    };
    let mut model = Model::new(cfg).unwrap();
    let mut rng = seed::rng(seed ^ 0x5eed);
    for a in model.advisors_mut() {
        a.set_matrix(uniform(&mut rng, 8, 6, -0.3, 0.3));
    }
    model
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn streams_keep_train_normal_nested_and_disjoint(seed in any::<u64>(), tasks in 1usize..4) {
        let shapes = &Shape::ALL[..2 * tasks];
        let cats: Vec<_> = shapes.iter().map(|&s| small_spec(s)).collect();
        let partition: Vec<Vec<usize>> = (0..tasks).map(|t| vec![2 * t, 2 * t + 1]).collect();
        let sizes = SplitSizes { train: 2, normal_test: 1, anomalous_test: 1 };
        let stream = build_task_stream(&cats, &partition, sizes, &DefectSpec::default_mix(), seed).unwrap();
        prop_assert!(stream.validate().is_ok());
        let mut seen = std::collections::HashSet::new();
        for (t, task) in stream.tasks().iter().enumerate() {
            for s in &task.train {
                prop_assert_eq!(s.label(), Label::Normal);
                prop_assert!(seen.insert(s.id.clone()));
            }
            if t > 0 {
                for s in &stream.tasks()[t - 1].test {
                    prop_assert!(task.test.iter().any(|x| x.id == s.id));
                }
            }
        }
    }

    #[test]
    fn defects_leave_points_outside_the_region_untouched(
        seed in any::<u64>(),
        kind in prop::sample::select(vec![DefectKind::Bump, DefectKind::Dent, DefectKind::NoisePatch]),
        amplitude in 0.05f64..0.5,
        extent in 0.05f64..0.3,
    ) {
        let cloud = generate_normal(&small_spec(Shape::Torus), seed).unwrap();
        let defect = DefectSpec { kind, amplitude, extent };
        let out = inject_defect(&cloud, &defect, seed);
        prop_assume!(out.is_ok(), "region too sparse for a defect");
        let out = out.unwrap();
        let region = defect_region(&cloud, &defect, seed);
        prop_assert_eq!(out.len(), cloud.len());
        for (a, b) in cloud.points().iter().zip(out.points()) {
            if dist(a, &region.anchor) > region.radius {
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn batch_update_is_the_mean_of_single_token_steps(
        seed in any::<u64>(),
        n in 1usize..8,
        alpha in 0.0f64..=1.0,
        beta in 0.01f64..=1.0,
    ) {
        let mut rng = seed::rng(seed);
        let (d, m) = (5, 7);
        let s = uniform(&mut rng, d, m, -1.0, 1.0);
        let phi = uniform(&mut rng, n, m, 0.0, 1.5);
        let v = uniform(&mut rng, n, d, -1.0, 1.0);
        let mut expected = s.clone();
        for (p, vv) in phi.axis_iter(Axis(0)).zip(v.axis_iter(Axis(0))) {
            let coef = s.dot(&p) - &vv * (1.0 + alpha);
            for r in 0..d {
                for c in 0..m {
                    expected[[r, c]] -= beta * coef[r] * p[c] / n as f64;
                }
            }
        }
        let mut st = AdvisorState::from_parts(s, 3, alpha, beta).unwrap();
        st.update(phi.view(), v.view()).unwrap();
        prop_assert_eq!(st.update_count(), 4);
        for (a, b) in st.matrix().iter().zip(expected.iter()) {
            prop_assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
        }
    }

    #[test]
    fn small_advisor_steps_do_not_increase_the_loss(seed in any::<u64>(), beta in 0.001f64..=0.1) {
        let mut rng = seed::rng(seed);
        let (d, m) = (4, 6);
        let phi: Array1<f64> = Array1::from_shape_simple_fn(m, || rng.random_range(0.0..1.0));
        let v: Array1<f64> = Array1::from_shape_simple_fn(d, || rng.random_range(-1.0..1.0));
        let mut st = AdvisorState::from_parts(uniform(&mut rng, d, m, -1.0, 1.0), 0, 0.7, beta).unwrap();
        let before = st.loss(phi.view(), v.view());
        st.update(phi.view().insert_axis(Axis(0)), v.view().insert_axis(Axis(0))).unwrap();
        prop_assert!(st.loss(phi.view(), v.view()) <= before + 1e-12);
    }

    #[test]
    fn kernel_weights_are_positive(seed in any::<u64>(), n in 1usize..20, d in 1usize..10, m in 1usize..40) {
        let mut rng = seed::rng(seed);
        let inputs = AttentionInputs::new(
            uniform(&mut rng, n, d, -2.0, 2.0),
            uniform(&mut rng, n, d, -2.0, 2.0),
            uniform(&mut rng, n, d, -1.0, 1.0),
        ).unwrap();
        let map = RandomFeatureMap::new(d, m, seed).unwrap();
        prop_assert!(kernel_matrix(&inputs, &map).iter().all(|&w| w > 0.0));
    }

    #[test]
    fn perturbation_loss_is_null_feasible_and_isolated(seed in 0u64..1000, epsilon in 0.0f64..1.0, steps in 0usize..4) {
        let model = tiny_model(seed);
        let mut rng = seed::rng(seed);
        let batch = TokenBatch { tokens: uniform(&mut rng, 6, 8, -1.0, 1.0), centers: vec![[0.0; 3]; 6] };
        let inputs = [ModelInput::Tokens(&batch)];
        let before = model.clone();
        let cfg = PerturbationConfig { epsilon, ascent_steps: steps, seed, ..PerturbationConfig::default() };
        let out = rpp_loss(&model, &inputs, &cfg, TrainScope::EncoderDecoder, Execution::Sequential).unwrap();
        prop_assert_eq!(&model, &before);
        prop_assert!(out.delta.norm(TrainScope::All) <= epsilon + 1e-6);
        let zero = PerturbationConfig { epsilon: 0.0, ..cfg };
        prop_assert_eq!(rpp_loss(&model, &inputs, &zero, TrainScope::All, Execution::Sequential).unwrap().loss, 0.0);
    }

    #[test]
    fn permuting_groups_permutes_token_scores(seed in 0u64..1000) {
        let model = tiny_model(seed);
        let cloud = generate_normal(&small_spec(Shape::Cylinder), seed).unwrap();
        let groups = prepare_groups(&cloud, &model.config.grouping(), seed).unwrap();
        let mut perm: Vec<usize> = (0..groups.len()).collect();
        perm.shuffle(&mut seed::rng(seed));
        let score = |g| {
            let tokens = model.embed_groups(g).unwrap();
            let out = model.forward(&tokens, Mode::Eval).unwrap();
            token_scores(&tokens, &out.recon)
        };
        let base = score(&groups);
        let moved = score(&groups.permuted(&perm));
        for (i, &p) in perm.iter().enumerate() {
            prop_assert!((moved[i] - base[p]).abs() <= 1e-10 * base[p].abs().max(1e-3));
        }
        let top = |s: &[f64]| s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!((top(&base) - top(&moved)).abs() <= 1e-10 * top(&base).max(1e-3));
    }
}
