use powerdelay::asymptotics::{fit_scaling, ScalingClass};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn basis(class: ScalingClass, v: f64) -> f64 {
    match class {
        ScalingClass::Log => (1.0 / v).ln(),
        ScalingClass::InvSqrt => 1.0 / v.sqrt(),
        ScalingClass::Inv => 1.0 / v,
        _ => unreachable!(),
    }
}

/// 25 points over three decades, as a sweep with ten points per decade
/// would produce after trimming.
fn noisy_series(class: ScalingClass, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let noise = Normal::new(0.0, 0.01).unwrap();
    let b = rng.gen_range(0.5..5.0);
    let alpha = rng.gen_range(0.0..2.0);
    let top = rng.gen_range(-1.5..-0.5f64);
    (0..25)
        .map(|i| {
            let v = 10f64.powf(top - 3.0 * i as f64 / 24.0);
            let q = (alpha + b * basis(class, v)) * (1.0 + noise.sample(rng));
            (v, q)
        })
        .collect()
}

#[test]
fn recovers_each_growth_class_under_one_percent_noise() {
    for (k, class) in [ScalingClass::Log, ScalingClass::InvSqrt, ScalingClass::Inv].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + k as u64);
        let hits = (0..200)
            .filter(|_| fit_scaling(&noisy_series(class, &mut rng)).unwrap().class == class)
            .count();
        assert!(hits >= 190, "{class}: recovered {hits}/200");
    }
}

#[test]
fn flat_series_under_noise_is_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let noise = Normal::new(0.0, 0.001).unwrap();
    let points: Vec<_> = (0..25)
        .map(|i| {
            let v = 10f64.powf(-1.0 - 3.0 * i as f64 / 24.0);
            (v, 2.0 * (1.0 + noise.sample(&mut rng)))
        })
        .collect();
    assert_eq!(fit_scaling(&points).unwrap().class, ScalingClass::Bounded);
}
