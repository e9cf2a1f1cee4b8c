use matformer::rng::substream;
use matformer::scaling::*;
use matformer::Error;
use rand_distr::{Distribution, Normal};

fn synth(a: f64, b: f64, c: f64, noise: f64, seed: u64) -> Vec<ScalingPoint> {
    let mut rng = substream(seed, "scaling");
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut out = Vec::new();
    for i in 0..8 {
        for j in 0..8 {
            let n = 10f64.powf(1.0 + 0.25 * i as f64);
            let d = 10f64.powf(0.5 * j as f64 / 2.0);
            let clean = a * (n * d).powf(b) + c;
            out.push(ScalingPoint::new(n, d, clean * (1.0 + noise * normal.sample(&mut rng))));
        }
    }
    out
}

fn rel(x: f64, y: f64) -> f64 {
    (x - y).abs() / y.abs()
}

#[test]
fn noiseless_recovery() {
    for &(a, b, c) in &[(2.0, -0.5, 1.0), (5.0, -0.2, 0.3), (0.7, -0.35, 2.0)] {
        let pts = synth(a, b, c, 0.0, 0);
        let f = fit_power_law(&pts).unwrap();
        assert!(rel(f.a, a) < 1e-6 && rel(f.b, b) < 1e-6 && rel(f.c, c) < 1e-6, "{f:?}");
        for p in &pts {
            assert!(rel(eval_scaling(&f, p.n, p.d), p.loss) < 1e-5);
        }
    }
}

#[test]
fn one_percent_noise_recovery() {
    for seed in 0..3 {
        let f = fit_power_law(&synth(2.0, -0.5, 1.0, 0.01, seed)).unwrap();
        assert!(rel(f.a, 2.0) < 0.05 && rel(f.b, -0.5) < 0.05 && rel(f.c, 1.0) < 0.05, "{f:?}");
    }
}

#[test]
fn constant_losses() {
    let pts: Vec<ScalingPoint> = (1..10).map(|i| ScalingPoint::new(i as f64 * 10.0, 100.0, 2.25)).collect();
    let f = fit_power_law(&pts).unwrap();
    assert!(f.rmse < 1e-10, "{f:?}");
    for p in &pts {
        assert!((eval_scaling(&f, p.n, p.d) - 2.25).abs() < 1e-9);
    }
}

#[test]
fn never_worse_than_a_constant() {
    let mut rng = substream(1, "junk");
    use rand::Rng;
    for _ in 0..20 {
        let pts: Vec<ScalingPoint> = (0..12)
            .map(|i| ScalingPoint::new((i + 1) as f64 * 3.0, 10.0, rng.gen_range(1.0..3.0)))
            .collect();
        let f = fit_power_law(&pts).unwrap();
        assert!(f.rmse <= constant_rmse(&pts) + 1e-12, "{} vs {}", f.rmse, constant_rmse(&pts));
    }
}

#[test]
fn monotone_prediction_for_negative_exponent() {
    let f = ScalingFit { a: 3.0, b: -0.2, c: 1.0, rmse: 0.0 };
    let mut prev = f64::INFINITY;
    for k in 0..30 {
        let v = eval_scaling(&f, 10f64.powi(k), 1.0);
        assert!(v < prev);
        prev = v;
    }
}

#[test]
fn too_few_distinct_points() {
    let pts = vec![
        ScalingPoint::new(1.0, 10.0, 2.0),
        ScalingPoint::new(10.0, 1.0, 2.1),
        ScalingPoint::new(2.0, 1.0, 1.9),
        ScalingPoint::new(3.0, 1.0, 1.8),
    ];
    assert!(matches!(fit_power_law(&pts), Err(Error::Fit(_))));
    assert!(matches!(fit_power_law(&[ScalingPoint::new(-1.0, 1.0, 1.0)]), Err(Error::Fit(_))));
}
