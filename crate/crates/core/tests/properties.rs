use powerdelay::chain::evaluate;
use powerdelay::mdp::{check_monotone, drop_price, solve_lattice, Multipliers, SolverOptions};
use powerdelay::mincost::min_power_curve;
use powerdelay::model::ModelSpec;
use powerdelay::suite::random_instance;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn instance(seed: u64) -> (ModelSpec, f64) {
    let (spec, beta, _) = random_instance(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (spec, beta)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn curve_is_convex_and_nondecreasing(seed in any::<u64>()) {
        let (spec, _) = instance(seed);
        let curve = min_power_curve(&spec).unwrap();
        prop_assert_eq!(curve.vertices[0], (0.0, 0.0));
        prop_assert!(curve.vertices.windows(2).all(|w| w[1].0 > w[0].0 && w[1].1 >= w[0].1));
        prop_assert!(curve.slopes.windows(2).all(|w| w[1] > w[0]));
        for b in curve.breakpoints() {
            prop_assert!(b > 0.0 && b < curve.s_max());
        }
        let n = 40;
        for k in 1..n {
            let (x, y) = (curve.s_max() * (k - 1) as f64 / n as f64, curve.s_max() * (k + 1) as f64 / n as f64);
            let mid = curve.eval((x + y) / 2.0);
            prop_assert!(mid <= (curve.eval(x) + curve.eval(y)) / 2.0 + 1e-9);
        }
    }

    #[test]
    fn optimal_policies_are_monotone_and_conserve_flow(seed in any::<u64>()) {
        let (spec, beta) = instance(seed);
        let lat = spec.lattice().unwrap();
        let q_max = 40;
        let opts = SolverOptions {
            service_price: drop_price(&lat),
            ..SolverOptions::default()
        };
        let sol = solve_lattice(&lat, Multipliers { beta, theta: None }, q_max, &opts, None).unwrap();
        prop_assert!(check_monotone(&sol.policy).is_monotone(), "{:?}", sol.policy.serve);
        let (dist, avg) = evaluate(&lat, &sol.policy).unwrap();
        prop_assert!(dist.residual <= 1e-10);
        let s_max = lat.s_max as f64 * lat.unit;
        prop_assert!((avg.s_bar - lat.lambda).abs() <= 10.0 * dist.tail_mass * s_max + 1e-12);
    }

    #[test]
    fn spec_survives_json(seed in any::<u64>()) {
        let (spec, _) = instance(seed);
        let text = serde_json::to_string(&spec).unwrap();
        prop_assert_eq!(serde_json::from_str::<ModelSpec>(&text).unwrap(), spec);
    }
}
