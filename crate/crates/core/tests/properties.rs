use bne::baselines::project_simplex;
use bne::ensemble::{mixture_cdf_pdf, softmax_weights, PredictiveDistribution};
use bne::evaluation::{coverage_curve, grid_quantile};
use bne::inference::{cvm_hat, linspace};
use bne::kernels::{cross_matrix, KernelFamily, KernelSpec};
use bne::Points;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn kernel_strategy() -> impl Strategy<Value = KernelSpec> {
    (prop_oneof![Just(KernelFamily::Rbf), Just(KernelFamily::Ou)], 0.01f64..2.0, 0.1f64..3.0)
        .prop_map(|(f, l, v)| KernelSpec::new(f, l, v).unwrap())
}

proptest! {
    #[test]
    fn softmax_columns_lie_on_the_simplex(vals in prop::collection::vec(-50.0f64..50.0, 12), temp in 0.05f64..5.0) {
        let g = DMatrix::from_vec(3, 4, vals);
        let w = softmax_weights(&g, temp).unwrap();
        for col in w.column_iter() {
            prop_assert!(col.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((col.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_ignores_a_common_shift(vals in prop::collection::vec(-20.0f64..20.0, 8), shift in -100.0f64..100.0, temp in 0.1f64..3.0) {
        let g = DMatrix::from_vec(4, 2, vals);
        let a = softmax_weights(&g, temp).unwrap();
        let b = softmax_weights(&g.add_scalar(shift), temp).unwrap();
        prop_assert!((a - b).amax() < 1e-10);
    }

    #[test]
    fn mixture_cdf_is_a_cdf(
        means in prop::collection::vec(-3.0f64..3.0, 6),
        sigma in prop::collection::vec(0.05f64..2.0, 3),
    ) {
        let means = DMatrix::from_vec(3, 2, means);
        let grid = linspace(-6.0, 6.0, 40);
        let (cdf, pdf) = mixture_cdf_pdf(&means, &sigma, &grid);
        for i in 0..2 {
            for j in 0..grid.len() {
                prop_assert!((0.0..=1.0).contains(&cdf[(i, j)]));
                prop_assert!(pdf[(i, j)] >= 0.0);
                if j > 0 {
                    prop_assert!(cdf[(i, j)] >= cdf[(i, j - 1)]);
                }
            }
        }
    }

    #[test]
    fn cvm_hat_is_bounded(y in -5.0f64..5.0, raw in prop::collection::vec(0.0f64..1.0, 10)) {
        let mut cdf = raw;
        cdf.sort_by(f64::total_cmp);
        let grid = linspace(-4.0, 4.0, 10);
        let v = cvm_hat(y, &cdf, &grid).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn coverage_is_nondecreasing_in_level(
        mean in prop::collection::vec(-1.0f64..1.0, 15),
        sd in 0.1f64..2.0,
        truth in prop::collection::vec(-3.0f64..3.0, 15),
    ) {
        let grid = linspace(-10.0, 10.0, 200);
        let pd = PredictiveDistribution::gaussian(&mean, &vec![sd; 15], &grid).unwrap();
        let levels: Vec<f64> = (1..20).map(|i| i as f64 / 20.0).collect();
        let c = coverage_curve(&pd, &truth, &levels).unwrap();
        prop_assert!(c.coverage.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn grid_quantile_is_monotone(qs in prop::collection::vec(0.001f64..0.999, 2)) {
        let grid = linspace(-3.0, 3.0, 61);
        let cdf: Vec<f64> = grid.iter().map(|&y| 1.0 / (1.0 + (-2.0 * y).exp())).collect();
        let (a, b) = (qs[0].min(qs[1]), qs[0].max(qs[1]));
        prop_assert!(grid_quantile(|j| cdf[j], &grid, a) <= grid_quantile(|j| cdf[j], &grid, b));
    }

    #[test]
    fn kernels_are_symmetric_and_bounded(k in kernel_strategy(), pts in prop::collection::vec(-2.0f64..2.0, 10)) {
        let p = Points::new(2, pts).unwrap();
        let c = cross_matrix(&k, &p, &p);
        for i in 0..p.len() {
            prop_assert!((c[(i, i)] - k.variance).abs() < 1e-12);
            for j in 0..p.len() {
                prop_assert_eq!(c[(i, j)], c[(j, i)]);
                prop_assert!(c[(i, j)] >= 0.0 && c[(i, j)] <= k.variance);
            }
        }
    }

    #[test]
    fn simplex_projection_is_feasible_and_idempotent(v in prop::collection::vec(-5.0f64..5.0, 1..8)) {
        let p = project_simplex(&v);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let q = project_simplex(&p);
        prop_assert!(p.iter().zip(&q).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}
