use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use coiflow::discrete::DecodeSchedule;
use coiflow::features::FeatureSequence;
use coiflow::flow::{
    masked_mse, ot_path_point, ot_target_field, sample_mask, sample_prior, ChainMode, FlowBatch, PriorMode, PriorSpec,
    TemporalMask,
};
use coiflow::ode::{integrate, integrate_batch, stub::LinearField, OdeProblem, SolverSpec};
use coiflow::rvq::{train_codebooks, RvqConfig};
use coiflow::semantic_ar::VocabLayout;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-4.0f64..4.0, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn pair() -> impl Strategy<Value = (Array2<f64>, Array2<f64>)> {
    (1usize..6, 1usize..5).prop_flat_map(|(r, c)| (matrix(r, c), matrix(r, c)))
}

fn close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) -> bool {
    a.dim() == b.dim() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

fn small_rvq(seed: u64) -> (coiflow::rvq::RvqModel, Vec<FeatureSequence>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<FeatureSequence> = (0..6)
        .map(|_| {
            let m = Array2::from_shape_simple_fn((12, 4), || rand::Rng::random_range(&mut rng, -2.0..2.0));
            FeatureSequence::new(m).unwrap()
        })
        .collect();
    let cfg = RvqConfig {
        num_layers: 3,
        codebook_size: 6,
        dim: 4,
        semantic_teacher_weight: 0.0,
        kmeans_iters: 5,
        ..RvqConfig::default()
    };
    (train_codebooks(&data, None, &cfg, seed).unwrap(), data)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ot_path_hits_both_endpoints((x0, x1) in pair(), sigma_min in 0.0f64..0.1) {
        let start = ot_path_point(x0.view(), x1.view(), 0.0, sigma_min).unwrap();
        let end = ot_path_point(x0.view(), x1.view(), 1.0, sigma_min).unwrap();
        prop_assert!(close(&start, &x0, 1e-12));
        prop_assert!(close(&end, &(&x1 + &(&x0 * sigma_min)), 1e-12));
    }

    #[test]
    fn ot_path_moves_along_target_field((x0, x1) in pair(), t in 0.0f64..0.9, dt in 0.01f64..0.1, sigma_min in 0.0f64..0.1) {
        let a = ot_path_point(x0.view(), x1.view(), t, sigma_min).unwrap();
        let b = ot_path_point(x0.view(), x1.view(), t + dt, sigma_min).unwrap();
        let u = ot_target_field(x0.view(), x1.view(), sigma_min).unwrap();
        prop_assert!(close(&((&b - &a) / dt), &u, 1e-9));
    }

    #[test]
    fn ot_path_rejects_t_outside_unit_interval((x0, x1) in pair(), t in prop_oneof![-3.0f64..-1e-9, 1.0 + 1e-9..3.0]) {
        prop_assert!(ot_path_point(x0.view(), x1.view(), t, 0.0).is_err());
    }

    #[test]
    fn mask_split_stays_below_length(len in 1usize..200, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = sample_mask(len, &mut rng).unwrap();
        prop_assert!(m.split() < len);
        prop_assert_eq!(m.num_target(), len - m.split());
        let v = m.values();
        prop_assert!(v.iter().take(m.split()).all(|&x| x == 0.0));
        prop_assert!(v.iter().skip(m.split()).all(|&x| x == 1.0));
    }

    #[test]
    fn masked_mse_ignores_prompt_rows((a, b) in pair(), noise in -5.0f64..5.0) {
        let rows = a.nrows();
        let mask = TemporalMask::new(rows - 1, rows).unwrap().values();
        let mut c = a.clone();
        for j in 0..c.ncols() {
            for i in 0..rows - 1 {
                c[[i, j]] += noise;
            }
        }
        let l1 = masked_mse(a.view(), b.view(), &mask);
        let l2 = masked_mse(c.view(), b.view(), &mask);
        prop_assert!((l1 - l2).abs() <= 1e-12 * (1.0 + l1.abs()));
    }

    #[test]
    fn semantic_prior_centres_on_mean(mean in matrix(40, 3), seed in any::<u64>()) {
        let m = FeatureSequence::new(mean.clone()).unwrap();
        let spec = PriorSpec::semantic(m, 1.0, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut acc = Array2::<f64>::zeros((40, 3));
        let draws = 200;
        for _ in 0..draws {
            acc = acc + sample_prior(&spec, (40, 3), &mut rng).unwrap().frames();
        }
        let avg = acc / draws as f64;
        let gap = (&avg - &mean).mapv(f64::abs).mean().unwrap();
        // each entry's error has sd 1/sqrt(200) ≈ 0.07
        prop_assert!(gap < 0.12, "mean absolute gap {}", gap);
    }

    #[test]
    fn point_mass_prior_is_exact(mean in matrix(5, 2), seed in any::<u64>()) {
        let m = FeatureSequence::new(mean.clone()).unwrap();
        let spec = PriorSpec::point_mass(PriorMode::Semantic, Some(m)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw = sample_prior(&spec, (5, 2), &mut rng).unwrap();
        prop_assert_eq!(draw.frames(), &mean);
    }

    #[test]
    fn flow_batches_are_internally_consistent((v1, vfull) in pair(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for mode in [ChainMode::Explicit, ChainMode::Implicit] {
            let b = FlowBatch::sample(mode, mode.prior_mode(), v1.view(), vfull.view(), 1.0, 1e-4, &mut rng).unwrap();
            prop_assert!(b.validate().is_ok());
            prop_assert!((0.0..1.0).contains(&b.t));
            let n = b.mask.split();
            prop_assert!(b.x_pmt.slice(ndarray::s![n.., ..]).iter().all(|&v| v == 0.0));
            prop_assert!(b.x_tgt.slice(ndarray::s![..n, ..]).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn cosine_schedule_commits_every_position(iterations in 1usize..32, n in 0usize..500) {
        let s = DecodeSchedule::cosine(iterations).unwrap();
        let counts = s.counts(n);
        prop_assert_eq!(counts.len(), iterations);
        prop_assert_eq!(counts.iter().sum::<usize>(), n);
        let total: f64 = s.fractions().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn vocab_targets_round_trip(src_size in 1u32..50, tgt_size in 1u32..50, ids in prop::collection::vec(0u32..1000, 0..20)) {
        let v = VocabLayout::new(src_size, tgt_size);
        let tgt: Vec<u32> = ids.iter().map(|i| i % tgt_size).collect();
        let src: Vec<u32> = ids.iter().map(|i| i % src_size).collect();
        let sample = v.sample(&src, &tgt);
        prop_assert_eq!(v.decode_targets(&sample.tokens), tgt);
        prop_assert!(sample.tokens.iter().all(|&t| (t as usize) < v.size()));
        prop_assert_eq!(sample.loss_from, src.len() + 2);
    }

    #[test]
    fn clamped_rows_never_move(x in matrix(6, 2), clamp_rows in 0usize..=6, steps in 1usize..10) {
        let zero = Array2::zeros((6, 2));
        let p = OdeProblem { x0: x.clone(), z: zero.clone(), x_pmt: zero, clamp_rows };
        for spec in [SolverSpec::euler(steps).unwrap(), SolverSpec::midpoint(steps).unwrap()] {
            let out = integrate_batch(&LinearField, std::slice::from_ref(&p), spec).unwrap().remove(0);
            prop_assert_eq!(out.slice(ndarray::s![..clamp_rows, ..]), x.slice(ndarray::s![..clamp_rows, ..]));
        }
    }

    #[test]
    fn euler_matches_closed_form_on_linear_field(x in matrix(3, 2), steps in 1usize..40) {
        let x0 = FeatureSequence::new(x.clone()).unwrap();
        let zero = FeatureSequence::zeros(3, 2);
        let out = integrate(&LinearField, &x0, &zero, &zero, SolverSpec::euler(steps).unwrap()).unwrap();
        let growth = (1.0 + 1.0 / steps as f64).powi(steps as i32);
        prop_assert!(close(out.frames(), &(&x * growth), 1e-12));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn rvq_residuals_shrink_and_layers_sum(seed in 0u64..1000, probe in matrix(20, 4)) {
        let (rvq, _) = small_rvq(seed);
        let x = FeatureSequence::new(probe * 2.0).unwrap();
        let (stack, norms) = rvq.encode_with_residuals(&x).unwrap();
        for row in norms.outer_iter() {
            for w in row.as_slice().unwrap().windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
        }
        let q = rvq.num_layers();
        let total = rvq.sum_layers(&stack, 1, q).unwrap();
        let mut manual = rvq.embed_layer(stack.layer(1), 1).unwrap().into_frames();
        for l in 2..=q {
            manual = manual + rvq.embed_layer(stack.layer(l), l).unwrap().frames();
        }
        prop_assert_eq!(&manual, total.frames());
        prop_assert_eq!(rvq.encode(&x).unwrap(), stack);
    }

    #[test]
    fn rvq_training_is_seed_deterministic(seed in 0u64..1000) {
        prop_assert_eq!(small_rvq(seed).0, small_rvq(seed).0);
    }
}
