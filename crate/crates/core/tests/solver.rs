use powerdelay::chain::evaluate;
use powerdelay::mdp::{check_monotone, drop_price, solve_lattice, solve_mdp, Multipliers, Policy, SolverOptions};
use powerdelay::mincost::curve_from_lattice;
use powerdelay::model::{example_system, ArrivalSpec, FadeLaw, Mode, ModelSpec, PowerSpec};
use powerdelay::suite::{average_cost_from_empty, monotone_oracle, random_instance};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bernoulli_link() -> ModelSpec {
    ModelSpec {
        arrival: ArrivalSpec::Pmf { values: vec![0.7, 0.3] },
        fade: FadeLaw::single(1.0),
        power: PowerSpec::Example,
        s_max: 1,
        mode: Mode::Int,
        admission: false,
    }
}

#[test]
fn tiny_bernoulli_link_matches_enumeration() {
    let lat = bernoulli_link().lattice().unwrap();
    let opts = SolverOptions { tol: 1e-12, ..SolverOptions::default() };
    let sol = solve_lattice(&lat, Multipliers { beta: 1.0, theta: None }, 3, &opts, None).unwrap();
    let (g, best) = monotone_oracle(&lat, 1.0, 0.0, 3).unwrap();
    assert!((sol.g_star - g).abs() < 1e-8, "{} vs {g}", sol.g_star);
    assert!((average_cost_from_empty(&lat, &sol.policy, 1.0, 0.0) - g).abs() < 1e-8);
    assert_eq!(sol.policy.serve, best.serve);
}

#[test]
fn zero_power_weight_serves_everything() {
    let spec = example_system(5, 0.16, FadeLaw::example()).unwrap();
    let sol = solve_mdp(&spec, 0.0, 60, 1e-10).unwrap();
    let lat = spec.lattice().unwrap();
    assert_eq!(sol.policy, Policy::serve_min(&lat, lat.s_max, 60));
}

#[test]
fn random_instances_match_monotone_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..20 {
        let (spec, beta, q_max) = random_instance(&mut rng).unwrap();
        let lat = spec.lattice().unwrap();
        let price = drop_price(&lat);
        let opts = SolverOptions { tol: 1e-12, service_price: price, ..SolverOptions::default() };
        let sol = solve_lattice(&lat, Multipliers { beta, theta: None }, q_max, &opts, None).unwrap();
        let (g, _) = monotone_oracle(&lat, beta, price, q_max).unwrap();
        assert!((sol.g_star - g).abs() < 1e-8, "{spec:?} beta={beta}: {} vs {g}", sol.g_star);
    }
}

#[test]
fn power_approaches_minimum_from_above() {
    let spec = example_system(5, 0.16, FadeLaw::example()).unwrap();
    let lat = spec.lattice().unwrap();
    let c = curve_from_lattice(&lat).eval(0.8);
    let mut last = f64::INFINITY;
    let mut first = None;
    for beta in [1.0, 10.0, 100.0] {
        let sol = solve_mdp(&spec, beta, 400, 1e-10).unwrap();
        assert!(check_monotone(&sol.policy).is_monotone());
        let (dist, avg) = evaluate(&lat, &sol.policy).unwrap();
        assert!(dist.tail_mass < 1e-9);
        assert!(avg.p_bar >= c - 1e-9 && avg.p_bar <= last + 1e-9, "beta={beta}: {}", avg.p_bar);
        last = avg.p_bar;
        first.get_or_insert(avg.p_bar);
    }
    assert!(last - c < (first.unwrap() - c) / 4.0, "{last} vs {c}");
}
