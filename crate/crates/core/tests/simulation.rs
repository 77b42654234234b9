use powerdelay::chain::evaluate;
use powerdelay::mdp::{solve_mdp, Policy};
use powerdelay::model::{example_system, ArrivalSpec, FadeLaw, Mode, ModelSpec, PowerSpec};
use powerdelay::sim::{golden_trace, pool, simulate, simulate_replications};

/// Pinned digest of the first 1000 slots of the example system under its
/// β = 10 optimal policy, seed 42, ChaCha8 stream.
const EXAMPLE_DIGEST: &str = "b6919161318240a2592a2301dc2b0dd684333412d5237f666fed7aa1041b27ee";

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

fn example_policy() -> (ModelSpec, Policy) {
    let spec = example_system(5, 0.16, FadeLaw::example()).unwrap();
    let sol = solve_mdp(&spec, 10.0, 120, 1e-10).unwrap();
    (spec, sol.policy)
}

#[test]
fn serve_one_bernoulli_queue() {
    let spec = bernoulli_link();
    let lat = spec.lattice().unwrap();
    let est = simulate(&spec, &Policy::serve_min(&lat, 1, 20), 200_000, 20_000, 3).unwrap();
    assert!((est.q_bar - 0.3).abs() < 3.0 * est.se.q_bar, "{} ± {}", est.q_bar, est.se.q_bar);
    assert_eq!(est.delay_direct, 1.0);
}

#[test]
fn example_system_agrees_with_chain() {
    let (spec, policy) = example_policy();
    let lat = spec.lattice().unwrap();
    let (_, exact) = evaluate(&lat, &policy).unwrap();
    let est = simulate(&spec, &policy, 400_000, 40_000, 11).unwrap();
    assert!((est.q_bar - exact.q_bar).abs() < 3.0 * est.se.q_bar, "{} vs {}", est.q_bar, exact.q_bar);
    assert!((est.p_bar - exact.p_bar).abs() < 3.0 * est.se.p_bar, "{} vs {}", est.p_bar, exact.p_bar);
    assert!(est.little_gap(&lat, false) < 3.0);
}

#[test]
fn pooled_replications_agree_with_chain() {
    let (spec, policy) = example_policy();
    let lat = spec.lattice().unwrap();
    let (_, exact) = evaluate(&lat, &policy).unwrap();
    let reps = simulate_replications(&lat, &policy, 100_000, 10_000, &[1, 2, 3, 4]).unwrap();
    assert_eq!(reps[2], simulate(&spec, &policy, 100_000, 10_000, 3).unwrap());
    let pooled = pool(&reps).unwrap();
    assert!((pooled.q_bar - exact.q_bar).abs() < 3.0 * pooled.se.q_bar);
}

#[test]
fn golden_digest_is_pinned() {
    let (spec, policy) = example_policy();
    let lat = spec.lattice().unwrap();
    let digest = golden_trace(&lat, &policy, 42, 1000).unwrap();
    assert_eq!(digest, EXAMPLE_DIGEST);
    assert_ne!(digest, golden_trace(&lat, &policy, 43, 1000).unwrap());
}

#[test]
fn digest_ignores_policy_table_row_order() {
    let (spec, policy) = example_policy();
    let lat = spec.lattice().unwrap();
    let mut buf = Vec::new();
    policy.write_csv(&lat, &mut buf, "t").unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    let (head, rows) = lines.split_at_mut(2);
    rows.reverse();
    let shuffled = [head.join("\n"), rows.join("\n")].join("\n");
    let reread = Policy::read_csv(&lat, shuffled.as_bytes()).unwrap();
    assert_eq!(reread, policy);
    assert_eq!(
        golden_trace(&lat, &reread, 42, 1000).unwrap(),
        golden_trace(&lat, &policy, 42, 1000).unwrap()
    );
}
