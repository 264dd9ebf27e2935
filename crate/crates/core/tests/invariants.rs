use proptest::prelude::*;
use weaklab::euler::{euler_exact_law_affine, gbm_euler_power_moment, BrownianSlice};
use weaklab::montecarlo::{fit_rate, richardson_table};
use weaklab::report::{csv_bytes, ReportRow};
use weaklab::{make_constant_model, make_ou_model, Matrix, RngStream};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn coarsened_path_keeps_the_terminal_value(seed in any::<u64>(), k in 0u32..5, n in 1usize..20, t in 0.1f64..1.0) {
        let fine_n = n << k;
        let mut src = RngStream::new(seed, 0).normals();
        let fine = BrownianSlice::<f64>::generate(fine_n, t, 2, &mut src);
        let coarse = fine.coarsen(n).unwrap();
        let (mut a, mut b) = ([0.0; 2], [0.0; 2]);
        fine.terminal(&mut a);
        coarse.terminal(&mut b);
        for i in 0..2 {
            prop_assert!((a[i] - b[i]).abs() <= 1e-12 * (1.0 + a[i].abs()));
        }
    }

    #[test]
    fn rate_fit_ignores_sign_and_scale(c in 0.01f64..10.0, p in 0.5f64..2.5, negate in any::<bool>()) {
        let pts: Vec<(f64, f64, f64)> = [4.0f64, 8.0, 16.0, 32.0]
            .iter()
            .map(|&n| (n, if negate { -c } else { c } * n.powf(-p), 0.0))
            .collect();
        let fit = fit_rate(&pts).unwrap();
        prop_assert!((fit.slope + p).abs() < 1e-9);
    }

    #[test]
    fn two_level_richardson_is_romberg(n in 1usize..200, a in -5.0f64..5.0, b in -5.0f64..5.0) {
        let r = richardson_table(&[(n, a), (2 * n, b)], 2).unwrap();
        prop_assert!((r - (2.0 * b - a)).abs() <= 1e-12 * (1.0 + a.abs() + b.abs()));
    }

    #[test]
    fn constant_model_euler_law_is_exact(
        b in proptest::collection::vec(-1.0f64..1.0, 2),
        s in proptest::collection::vec(-1.0f64..1.0, 4),
        n in 1usize..64,
        t in 0.05f64..1.0,
    ) {
        let sigma = Matrix::from_row_major(2, 2, s);
        let model = make_constant_model(b.clone(), sigma.clone()).unwrap();
        let law = euler_exact_law_affine(&model, &[0.2, -0.1], n, t).unwrap();
        let cov = sigma.matmul(&sigma.transpose()).scale(t);
        prop_assert!(law.cov.max_abs_diff(&cov) < 1e-13);
        prop_assert!((law.mean[0] - (0.2 + b[0] * t)).abs() < 1e-13);
        prop_assert!((law.mean[1] - (-0.1 + b[1] * t)).abs() < 1e-13);
    }

    #[test]
    fn ou_euler_mean_follows_the_recursion(theta in 0.1f64..3.0, x in -2.0f64..2.0, n in 1usize..100) {
        let model = make_ou_model(theta, 0.7).unwrap();
        let law = euler_exact_law_affine(&model, &[x], n, 1.0).unwrap();
        let mean = x * (1.0 - theta / n as f64).powi(n as i32);
        prop_assert!((law.mean[0] - mean).abs() < 1e-12);
    }

    #[test]
    fn gbm_first_moment_is_compound_growth(mu in -0.5f64..0.5, sigma in 0.05f64..0.6, n in 1usize..200) {
        let v = gbm_euler_power_moment(mu, sigma, 1.3, 1, n, 1.0).unwrap();
        let exact = 1.3 * (1.0 + mu / n as f64).powi(n as i32);
        prop_assert!((v - exact).abs() <= 1e-12 * exact.abs());
    }

    #[test]
    fn csv_is_deterministic(values in proptest::collection::vec(-1e6f64..1e6, 1..8)) {
        let rows: Vec<ReportRow> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| ReportRow {
                study: "weak-rate".into(),
                model: "ou".into(),
                f: "y^2".into(),
                t: 1.0,
                x: "1".into(),
                n: i + 1,
                samples: 10,
                estimate: v,
                truth: 0.0,
                bias: v,
                ci_halfwidth: 0.0,
                oracle: "exact".into(),
            })
            .collect();
        let a = csv_bytes(&rows).unwrap();
        prop_assert_eq!(&a, &csv_bytes(&rows).unwrap());
        prop_assert_eq!(a.iter().filter(|&&c| c == b'\n').count(), rows.len() + 1);
    }
}
