use advdiff::attacks::{self, AttackConfig, AttackKind, TimestepSelection};
use advdiff::autodiff::Tape;
use advdiff::data::{self, CorruptionMode, CorruptionSpec, DatasetKind, DatasetSpec};
use advdiff::denoiser::{Activation, Architecture, DenoiserParams};
use advdiff::io;
use advdiff::metrics;
use advdiff::rng;
use advdiff::sampler::{timestep_grid, SampleConfig, SamplerMode};
use advdiff::training;
use advdiff::{NoiseSchedule, RaySchedule, Tensor};
use proptest::prelude::*;

fn schedule() -> impl Strategy<Value = NoiseSchedule> {
    (50usize..400, 0.01f64..1.0, 12.0f64..40.0)
        .prop_map(|(steps, lo, hi)| NoiseSchedule::linear(steps, lo / steps as f64, hi / steps as f64).unwrap())
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-10.0f64..10.0, rows * cols).prop_map(move |v| Tensor::matrix(rows, cols, v).unwrap())
}

fn small_params(seed: u64, skip: bool) -> DenoiserParams {
    let arch = Architecture {
        data_dim: 3,
        hidden_dims: vec![16, 16],
        time_embed_dim: 8,
        activation: Activation::Silu,
        max_timestep: 30,
        input_skip: skip,
    };
    let mut r = rng::from_seed(seed);
    DenoiserParams::unflatten(arch.clone(), &rng::uniform_vec(&mut r, arch.num_params(), 0.5)).unwrap()
}

proptest! {
    #[test]
    fn alpha_bar_decreases_from_one(ns in schedule()) {
        prop_assert_eq!(ns.alpha_bar(0), 1.0);
        for t in 1..=ns.steps() {
            prop_assert!(ns.alpha_bar(t) < ns.alpha_bar(t - 1));
            prop_assert!(ns.alpha_bar(t) > 0.0);
        }
    }

    #[test]
    fn effective_ray_is_scaled_ray(ns in schedule(), omega in 1.0f64..8.0, beta in 0.5f64..2.0, frac in 0.0f64..1.0) {
        let rs = RaySchedule { omega, ..RaySchedule::default() };
        let t = 1 + ((ns.steps() - 1) as f64 * frac) as usize;
        let s = (1.0 - ns.alpha_bar(t)).sqrt();
        let r = rs.ray(&ns, t, beta).unwrap();
        let eff = rs.effective_ray(&ns, t, beta).unwrap();
        prop_assert!((eff - s * r).abs() <= 1e-12 * eff.max(1.0));
        prop_assert!((eff - (s.powf(omega) + rs.gamma * beta)).abs() <= 1e-12 * eff.max(1.0));
        prop_assert!(r > 0.0);
    }

    #[test]
    fn lambda_t_decreases_with_the_ray(lambda in 0.001f64..10.0, r1 in 0.01f64..50.0, r2 in 0.01f64..50.0) {
        let (a, b) = (training::lambda_t(lambda, r1).unwrap(), training::lambda_t(lambda, r2).unwrap());
        prop_assert_eq!(r1 < r2, a > b);
        prop_assert!((a * r1 - lambda * 3f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn random_delta_stays_within_its_ray(ns in schedule(), seed in any::<u64>(), rows in 1usize..8, dim in 1usize..10) {
        let rs = RaySchedule::default();
        let mut r = rng::from_seed(seed);
        let ts: Vec<usize> = (0..rows).map(|_| rng::uniform_int(&mut r, 1, ns.steps())).collect();
        let betas = training::draw_betas(&rs, rows, true, &mut r);
        let out = training::sample_delta_random(&rs, &ns, &ts, &betas, dim, &mut r).unwrap();
        out.check_bound().unwrap();
        for (i, (&t, &b)) in ts.iter().zip(&betas).enumerate() {
            prop_assert!(b >= rs.beta_low && b <= rs.beta_high);
            prop_assert_eq!(out.rays[i], rs.ray(&ns, t, b).unwrap());
        }
    }

    #[test]
    fn adversarial_delta_stays_within_its_ray(seed in any::<u64>(), t in 1usize..=30) {
        let params = small_params(seed, seed % 2 == 0);
        let ns = NoiseSchedule::linear_default(30).unwrap();
        let rs = RaySchedule::default();
        let mut r = rng::from_seed(seed);
        let x = Tensor::matrix(4, 3, rng::normal_vec(&mut r, 12)).unwrap();
        let random = training::sample_delta_random(&rs, &ns, &[t; 4], &[1.3], 3, &mut r).unwrap();
        let adv = training::sample_delta_adversarial(&params, &x, &[t], &random, &ns, None).unwrap();
        adv.check_bound().unwrap();
        let (j_rand, _) = training::perturbation_objective(&params, &x, &random.delta, &[t], &ns, &params.predict(&x, &[t]).unwrap()).unwrap();
        prop_assert!(j_rand.is_finite());
    }

    #[test]
    fn rho_ignores_in_span_shifts(seed in any::<u64>(), k in 1usize..4, shift in prop::collection::vec(-5.0f64..5.0, 3)) {
        let mut r = rng::from_seed(seed);
        let d = 6;
        let u = data::orthonormal_rows(&mut r, k, d);
        let mu = rng::normal_vec(&mut r, d);
        let x = Tensor::matrix(5, d, rng::normal_vec(&mut r, 5 * d)).unwrap();
        let base = metrics::rho(&x, &u, &mu, true).unwrap();
        let mut moved = x.clone();
        for i in 0..5 {
            for (c, s) in shift.iter().take(k).enumerate() {
                for (v, b) in moved.row_mut(i).iter_mut().zip(u.row(c)) {
                    *v += s * b;
                }
            }
        }
        let after = metrics::rho(&moved, &u, &mu, true).unwrap();
        for (a, b) in base.iter().zip(&after) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn plane_distance_ignores_in_plane_shifts(x in matrix(6, 3), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        // Directions (1,-1,0) and (1,1,-2) both lie in the plane x+y+z = 30.
        let d0 = metrics::plane_distance(&x, &[1.0, 1.0, 1.0], 30.0).unwrap();
        let moved = x.map(|v| v);
        let mut moved = moved;
        for i in 0..6 {
            let row = moved.row_mut(i);
            row[0] += a + b;
            row[1] += -a + b;
            row[2] += -2.0 * b;
        }
        let d1 = metrics::plane_distance(&moved, &[2.0, 2.0, 2.0], 60.0).unwrap();
        for (p, q) in d0.iter().zip(&d1) {
            prop_assert!((p - q).abs() <= 1e-9);
        }
    }

    #[test]
    fn psnr_is_symmetric_and_peak_scaled(x in matrix(3, 4), y in matrix(3, 4), peak in 0.1f64..10.0) {
        let a = metrics::psnr(&x, &y, peak).unwrap();
        let b = metrics::psnr(&y, &x, peak).unwrap();
        prop_assert_eq!(a, b);
        let c = metrics::psnr(&x, &y, 2.0 * peak).unwrap();
        prop_assert!((c - a - 20.0 * 2f64.log10()).abs() <= 1e-9);
    }

    #[test]
    fn denoiser_commutes_with_batch_permutation(seed in any::<u64>(), perm in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle()) {
        let params = small_params(seed, true);
        let mut r = rng::from_seed(seed ^ 1);
        let x = Tensor::matrix(5, 3, rng::normal_vec(&mut r, 15)).unwrap();
        let ts = [3, 9, 14, 22, 30];
        let out = params.predict(&x, &ts).unwrap();
        let pts: Vec<usize> = perm.iter().map(|&i| ts[i]).collect();
        let pout = params.predict(&x.gather_rows(&perm), &pts).unwrap();
        prop_assert_eq!(pout, out.gather_rows(&perm));
    }

    #[test]
    fn corruption_leaves_clean_points_untouched(seed in any::<u64>(), frac in 0.0f64..1.0, which in 0usize..3) {
        let spec = DatasetSpec { kind: DatasetKind::oblique_plane(), n_samples: 60, seed };
        let set = data::generate(&spec).unwrap();
        let mode = match which {
            0 => CorruptionMode::UniformOutliers { fraction: frac, inflate: 1.5 },
            1 => CorruptionMode::AmbientGaussian { p: frac, sigma: 0.5 },
            _ => CorruptionMode::Inlier { sigma_scale: 1.0 + 3.0 * frac },
        };
        let out = data::corrupt(&set, &CorruptionSpec { mode, seed: seed ^ 7 }).unwrap();
        prop_assert_eq!(out.original.as_ref().unwrap(), &set.points);
        for i in 0..60 {
            if out.clean_mask[i] {
                prop_assert_eq!(out.points.row(i), set.points.row(i));
            }
        }
        if which < 2 {
            let expected = (frac * 60.0).round() as usize;
            prop_assert_eq!(out.clean_mask.iter().filter(|c| !**c).count(), expected);
        }
    }

    #[test]
    fn timestep_grid_is_a_strictly_descending_cover(total in 1usize..500, frac in 0.0f64..1.0) {
        let steps = 1 + ((total - 1) as f64 * frac) as usize;
        let grid = timestep_grid(total, steps);
        prop_assert_eq!(grid.len(), steps);
        prop_assert_eq!(grid[0], total);
        prop_assert!(*grid.last().unwrap() >= 1);
        prop_assert!(grid.windows(2).all(|w| w[0] > w[1]));
        if steps == total {
            prop_assert_eq!(grid, (1..=total).rev().collect::<Vec<_>>());
        }
    }

    #[test]
    fn selected_timesteps_are_distinct_and_eligible(total in 2usize..300, ratio in 0.0f64..=1.0, sel in 0usize..3) {
        let selection = [TimestepSelection::PrefixFromT, TimestepSelection::SuffixTo0, TimestepSelection::EvenlySpaced][sel];
        let ts = attacks::select_timesteps(total, ratio, selection);
        let k = ((ratio * total as f64).ceil() as usize).min(total - 1);
        prop_assert_eq!(ts.len(), k);
        prop_assert!(ts.iter().all(|&t| (2..=total).contains(&t)));
        prop_assert!(ts.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn points_csv_round_trips_exactly(x in matrix(7, 3), mask in prop::collection::vec(any::<bool>(), 7)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        io::write_points_csv(&path, &x, &mask).unwrap();
        let (y, m) = io::read_points_csv(&path).unwrap();
        prop_assert_eq!(y, x);
        prop_assert_eq!(m, mask);
    }

    #[test]
    fn backward_is_linear_in_the_root(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let params = small_params(seed, false);
        let mut r = rng::from_seed(seed);
        let x = Tensor::matrix(2, 3, rng::normal_vec(&mut r, 6)).unwrap();
        let grads = |ca: f64, cb: f64| {
            let mut tape = Tape::new();
            let pv = params.register(&mut tape, false);
            let xv = tape.leaf(x.clone());
            let out = params.forward_on(&mut tape, &pv, xv, &[11]).unwrap();
            let f = tape.l2_norm_sq(out);
            let g = tape.sum(out);
            let fa = tape.scale(f, ca);
            let gb = tape.scale(g, cb);
            let root = tape.add(fa, gb).unwrap();
            tape.backward(root, &[xv]).unwrap().remove(0)
        };
        let combined = grads(a, b);
        let split = grads(1.0, 0.0).scale(a).add(&grads(0.0, 1.0).scale(b)).unwrap();
        prop_assert!(combined.sub(&split).unwrap().max_abs() <= 1e-9 * (1.0 + split.max_abs()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attacks_respect_the_legitimacy_bound(seed in any::<u64>(), ratio in 0.05f64..1.0, pgd in any::<bool>(), phi in 0.1f64..1.0) {
        let params = small_params(seed, true);
        let ns = NoiseSchedule::linear_default(30).unwrap();
        let attack = AttackConfig {
            kind: if pgd { AttackKind::PgdTraj } else { AttackKind::FgsmTraj },
            attack_ratio: ratio,
            phi,
            pgd_iters: 3,
            seed,
            ..AttackConfig::default()
        };
        let sample = SampleConfig { n: 6, mode: SamplerMode::Ancestral, seed, ..SampleConfig::default() };
        let (_, _, report) = attacks::attacked_sample(&params, &ns, &attack, &sample).unwrap();
        prop_assert!(report.summary.max_delta_over_sigma <= 1.0 + 1e-12);
        for row in &report.rows {
            prop_assert!(row.delta_inf_norm <= ns.sigma(row.t));
            prop_assert_eq!(row.attacked, report.summary.attacked_timesteps.contains(&row.t));
        }
    }
}
