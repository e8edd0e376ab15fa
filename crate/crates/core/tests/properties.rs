use proptest::prelude::*;

use frod_core::adapter::{
    count_params, enumerate_params, sample_offdiag_support, support_size, FrodLayer, Scheme,
};
use frod_core::analysis::{orthogonality_residual, split_update, weyl_check};
use frod_core::decomp::{hjd_decompose, AggregationMode};
use frod_core::landscape::{loss_grid, Directions, GridSpec};
use frod_core::linalg::{qr_thin, svd_thin, Matrix};
use frod_core::tensorio::{
    generate_synthetic_stack, NamedTensor, StackDistribution, TensorContainer,
};
use frod_core::train::cosine_lr;
use frod_core::SplitMix64;

fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = SplitMix64::new(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn container_round_trip(shapes in prop::collection::vec(prop::collection::vec(1usize..5, 1..4), 0..5), seed in any::<u64>()) {
        let mut c = TensorContainer::new();
        let mut rng = SplitMix64::new(seed);
        for (i, shape) in shapes.iter().enumerate() {
            let len = shape.iter().product();
            let t = if i % 2 == 0 {
                NamedTensor::f64(format!("t{i}"), shape.clone(), rng.normals(len, 1.0)).unwrap()
            } else {
                NamedTensor::f32(format!("t{i}"), shape.clone(), (0..len).map(|_| rng.normal() as f32).collect()).unwrap()
            };
            c.push(t).unwrap();
        }
        let bytes = c.to_bytes().unwrap();
        let back = TensorContainer::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn qr_and_svd_reconstruct(rows in 1usize..12, cols in 1usize..12, seed in any::<u64>()) {
        let a = random(rows, cols, seed);
        if rows >= cols {
            let (q, r) = qr_thin(&a).unwrap();
            prop_assert!(q.matmul(&r).max_abs_diff(&a) <= 1e-12 * (1.0 + a.max_abs()));
            prop_assert!(q.t_matmul(&q).max_abs_diff(&Matrix::identity(cols)) <= 1e-12);
        }
        let svd = svd_thin(&a).unwrap();
        let rec = svd.u.scale_columns(&svd.s).matmul(&svd.v.transpose());
        prop_assert!(rec.max_abs_diff(&a) <= 1e-11 * (1.0 + a.max_abs()));
        prop_assert!(svd.s.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn support_is_offdiagonal_and_distinct(n in 2usize..20, s in 0.0f64..=1.0, seed in any::<u64>()) {
        let sp = sample_offdiag_support(n, s, seed).unwrap();
        prop_assert_eq!(sp.nnz(), support_size(n, s));
        prop_assert!(sp.support.iter().all(|&(i, j)| i != j && i < n && j < n));
        prop_assert!(sp.support.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn decomposition_reconstructs(cats in 1usize..4, layers in 1usize..4, n in 1usize..8, extra in 0usize..6, seed in any::<u64>(), literal in any::<bool>()) {
        let m = n + extra;
        let stack = generate_synthetic_stack(seed, cats, layers, m, n, StackDistribution::Gaussian).unwrap();
        let mode = if literal { AggregationMode::Literal } else { AggregationMode::Blockwise };
        let dec = hjd_decompose(&stack, 1e-3, mode).unwrap();
        let err = dec.reconstruction_errors(&stack).unwrap();
        let worst = err.iter().fold(0.0f64, |a, e| a.max(e.max_abs_error));
        prop_assert!(worst <= 1e-10 * stack.max_abs());
        prop_assert!(dec.z_orthogonality_error() <= 1e-12);
    }

    #[test]
    fn frod_merge_matches_forward_and_weyl_holds(n in 2usize..10, extra in 0usize..4, s in 0.05f64..0.9, scale in 1e-3f64..1.0, seed in any::<u64>()) {
        let m = n + extra;
        let stack = generate_synthetic_stack(seed, 1, 2, m, n, StackDistribution::Gaussian).unwrap();
        let dec = hjd_decompose(&stack, 1e-3, AggregationMode::Blockwise).unwrap();
        let mut layer = FrodLayer::from_decomposition(&dec, 0, 1, s, seed ^ 1).unwrap();
        let mut rng = SplitMix64::new(seed ^ 2);
        for v in &mut layer.s.values {
            *v = scale * rng.uniform(-1.0, 1.0);
        }
        for x in &mut layer.sigma {
            *x *= 1.0 + 0.1 * rng.normal();
        }
        let x = rng.normals(n, 1.0);
        let merged = layer.merge_weights().matvec(&x);
        let fwd = layer.forward(&x).unwrap();
        let diff = merged.iter().zip(&fwd).fold(0.0f64, |a, (p, q)| a.max((p - q).abs()));
        prop_assert!(diff <= 1e-10 * (1.0 + merged.iter().fold(0.0f64, |a, v| a.max(v.abs()))));

        let w = weyl_check(&layer.sigma, &layer.s, scale).unwrap();
        prop_assert!(w.pass, "{:?}", w);

        let split = split_update(&layer);
        let orth = orthogonality_residual(&split, &layer.u, &layer.vt);
        prop_assert_eq!(orth.latent, 0.0);
    }

    #[test]
    fn count_matches_enumeration(scheme_idx in 0usize..7, m in 2usize..9, n in 2usize..9, layers in 1usize..4, r in 1usize..3, s in 0.0f64..=1.0, seed in any::<u64>()) {
        let scheme = Scheme::ALL[scheme_idx];
        let r = r.min(m.min(n));
        let a = count_params(scheme, m, n, layers, r, s).unwrap();
        let b = enumerate_params(scheme, m, n, layers, r, s, seed).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn cosine_schedule_stays_in_range(total in 1usize..500, warm in 0.0f64..0.9, base in 1e-6f64..1.0) {
        let mut prev = f64::INFINITY;
        let w = (warm * total as f64).ceil() as usize;
        for t in 0..=total {
            let lr = cosine_lr(t, total, warm, base).unwrap();
            prop_assert!((0.0..=base * (1.0 + 1e-15)).contains(&lr));
            if t >= w {
                prop_assert!(lr <= prev + 1e-15);
                prev = lr;
            }
        }
    }

    #[test]
    fn grid_is_symmetric_for_even_loss(t0 in -1.0f64..1.0, t1 in -1.0f64..1.0) {
        let theta = vec![0.0, 0.0];
        let dirs = Directions { d1: vec![1.0, t0], d2: vec![t1, 1.0], explained: None };
        let loss = |p: &[f64]| -> Result<f64, String> { Ok(0.5 * (p[0] * p[0] + p[1] * p[1])) };
        let spec = GridSpec { points: 9, half_width: 1.0 };
        let g = loss_grid(&theta, &dirs, spec, false, loss).unwrap();
        let k = spec.points;
        for i in 0..k {
            for j in 0..k {
                prop_assert!((g.at(i, j) - g.at(k - 1 - i, k - 1 - j)).abs() <= 1e-10);
            }
        }
    }
}
