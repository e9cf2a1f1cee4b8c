use matformer::model::all_configs;
use matformer::search::*;
use matformer::{Error, LayerConfig, ModelConfig};

fn widths_cost(widths: &[u64]) -> impl Fn(&LayerConfig) -> u64 + '_ {
    move |c| c.iter().map(|&i| widths[i]).sum()
}

#[test]
fn width_budget_example() {
    let widths = [4, 8, 16, 32];
    let got = heuristic_select_by(4, 4, 40, widths_cost(&widths)).unwrap();
    assert_eq!(got.to_one_based(), vec![2, 2, 2, 3]);
    assert_eq!(got, LayerConfig::new(vec![1, 1, 1, 2]));

    // exhaustive oracle: max cost among feasible non-decreasing configs over
    // at most two adjacent levels
    let cost = widths_cost(&widths);
    let best = all_configs(4, 4)
        .filter(|c| {
            let v = c.as_slice();
            c.is_non_decreasing() && v[v.len() - 1] - v[0] <= 1 && cost(c) <= 40
        })
        .max_by_key(|c| cost(c))
        .unwrap();
    assert_eq!(best, got);
}

#[test]
fn heuristic_matches_oracle_for_every_budget() {
    let widths = [4, 8, 16, 32];
    let cost = widths_cost(&widths);
    for limit in 16..=128 {
        let got = heuristic_select_by(4, 4, limit, &cost).unwrap();
        let feasible: Vec<_> = all_configs(4, 4)
            .filter(|c| {
                let v = c.as_slice();
                c.is_non_decreasing() && v[3] - v[0] <= 1 && cost(c) <= limit
            })
            .collect();
        let best = feasible.iter().map(|c| cost(c)).max().unwrap();
        assert_eq!(cost(&got), best, "limit {limit}");
        assert!(got.is_non_decreasing() && cost(&got) <= limit);
    }
    assert!(matches!(heuristic_select_by(4, 4, 15, &cost), Err(Error::Budget(_))));
}

#[test]
fn unconstrained_budget_gives_full_model() {
    let m = ModelConfig::standard(64, 4, 4, 259, 64);
    let b = Budget::params(u64::MAX);
    assert_eq!(heuristic_select(&b, &m).unwrap(), m.full());
    let b = Budget { metric: BudgetMetric::FlopsPerToken, limit: u64::MAX };
    assert_eq!(heuristic_select(&b, &m).unwrap(), m.full());
}

#[test]
fn infeasible_budget_is_rejected() {
    let m = ModelConfig::standard(64, 4, 4, 259, 64);
    let smallest = Budget::params(0).cost(&m, &m.uniform(0));
    assert!(matches!(heuristic_select(&Budget::params(smallest - 1), &m), Err(Error::Budget(_))));
    assert_eq!(heuristic_select(&Budget::params(smallest), &m).unwrap(), m.uniform(0));
}

#[test]
fn prefers_balanced_shape_over_lopsided() {
    // widths in units of d/2: S=1, M=2, L=4, XL=8
    let widths = [1, 2, 4, 8];
    let lopsided = LayerConfig::new(vec![0, 0, 0, 0, 0, 3, 3]);
    let cost = widths_cost(&widths);
    let got = heuristic_select_by(7, 4, cost(&lopsided), &cost).unwrap();
    assert_eq!(got, LayerConfig::new(vec![1, 1, 1, 1, 2, 2, 2]));
}

#[test]
fn increasing_family_example() {
    let inc: Vec<Vec<usize>> = enumerate_family(ShapeFamily::Increasing, 3, 2).iter().map(|c| c.to_one_based()).collect();
    assert_eq!(inc, vec![vec![1, 1, 1], vec![1, 1, 2], vec![1, 2, 2], vec![2, 2, 2]]);
}

#[test]
fn decreasing_is_reverse_of_increasing() {
    for (l, g) in [(3, 2), (4, 4), (5, 3)] {
        let mut rev: Vec<Vec<usize>> = enumerate_family(ShapeFamily::Increasing, l, g)
            .iter()
            .map(|c| c.as_slice().iter().rev().copied().collect())
            .collect();
        rev.sort();
        let dec: Vec<Vec<usize>> = enumerate_family(ShapeFamily::Decreasing, l, g).iter().map(|c| c.as_slice().to_vec()).collect();
        assert_eq!(rev, dec);
    }
}

/// Brute-force shape predicates written independently of the library.
fn brute(family: ShapeFamily, v: &[usize]) -> bool {
    let inc = v.windows(2).all(|w| w[0] <= w[1]);
    let dec = v.windows(2).all(|w| w[0] >= w[1]);
    let split_ok = |first_up: bool| {
        (0..v.len()).any(|p| {
            let (a, b) = v.split_at(p + 1);
            let a_ok = a.windows(2).all(|w| if first_up { w[0] <= w[1] } else { w[0] >= w[1] });
            let mut tail = vec![a[a.len() - 1]];
            tail.extend_from_slice(b);
            let b_ok = tail.windows(2).all(|w| if first_up { w[0] >= w[1] } else { w[0] <= w[1] });
            a_ok && b_ok
        })
    };
    match family {
        ShapeFamily::Increasing => inc,
        ShapeFamily::Decreasing => dec,
        ShapeFamily::IncreasingDecreasing => split_ok(true) && !inc && !dec,
        ShapeFamily::DecreasingIncreasing => split_ok(false) && !inc && !dec,
    }
}

#[test]
fn family_sizes_match_brute_force_filter() {
    for (l, g) in [(1, 3), (2, 2), (3, 2), (4, 4), (5, 3), (6, 4)] {
        for family in ShapeFamily::ALL {
            let expected: Vec<LayerConfig> = all_configs(g, l).filter(|c| brute(family, c.as_slice())).collect();
            let got = enumerate_family(family, l, g);
            assert_eq!(got, expected, "{family:?} l={l} g={g}");
            assert!(got.iter().all(|c| in_family(family, c)));
        }
        let total = enumerate_balanced(l, g).count();
        let by_family: usize = ShapeFamily::ALL.iter().map(|&f| enumerate_family(f, l, g).len()).sum();
        assert_eq!(total, by_family);
    }
}

fn model44() -> ModelConfig {
    ModelConfig::standard(16, 4, 2, 16, 8)
}

#[test]
fn predictor_recovers_linear_target() {
    let m = model44();
    let w = [[0.0, -0.1, -0.15, -0.17], [0.0, -0.05, -0.2, -0.22], [0.0, -0.03, -0.04, -0.3], [0.0, -0.2, -0.21, -0.25]];
    let target = |c: &LayerConfig| 3.0 + c.iter().enumerate().map(|(j, &i)| w[j][i]).sum::<f64>();
    let data = PredictorDataset::from_pairs(all_configs(4, 4).map(|c| {
        let y = target(&c);
        (c, y)
    }))
    .unwrap();
    let p = fit_predictor(&data, &m, 1).unwrap();
    assert!(p.heldout_mse < 1e-10, "{}", p.heldout_mse);
    assert_eq!(p.train_size + p.heldout_size, 256);
    assert_eq!(p.train_size, 154);
}

#[test]
fn predictor_on_constant_losses() {
    let m = model44();
    let data = PredictorDataset::from_pairs(all_configs(4, 4).take(40).map(|c| (c, 2.5))).unwrap();
    let p = fit_predictor(&data, &m, 0).unwrap();
    assert!(p.heldout_mse < 1e-20);
    assert!((p.predict_config(&m.full()) - 2.5).abs() < 1e-9);
}

#[test]
fn predictor_needs_enough_pairs_and_dedupes() {
    let m = model44();
    let mut data = PredictorDataset::new();
    assert!(data.push(m.full(), 1.0).unwrap());
    assert!(!data.push(m.full(), 2.0).unwrap());
    assert_eq!(data.len(), 1);
    assert!(data.push(m.uniform(0), f64::NAN).is_err());
    let small = PredictorDataset::from_pairs(all_configs(4, 4).take(31).map(|c| (c, 1.0))).unwrap();
    assert!(matches!(fit_predictor(&small, &m, 0), Err(Error::Fit(_))));
}

#[test]
fn evolution_with_monotone_oracle_matches_exhaustive() {
    let m = model44();
    let full = Budget::params(0).cost(&m, &m.full()) as f64;
    // loss falls with size, with a per-layer twist so the argmin is unique
    let oracle = |c: &LayerConfig| {
        let size = Budget::params(0).cost(&m, c) as f64 / full;
        2.0 - size + 1e-4 * c.iter().enumerate().map(|(j, &i)| (j * 7 + i * 3) % 5).sum::<usize>() as f64
    };
    let smallest = Budget::params(0).cost(&m, &m.uniform(0));
    let largest = Budget::params(0).cost(&m, &m.full());
    for frac in [0.0, 0.2, 0.45, 0.7, 1.0] {
        let budget = Budget::params(smallest + ((largest - smallest) as f64 * frac) as u64);
        let best = all_configs(4, 4)
            .filter(|c| budget.admits(&m, c))
            .min_by(|a, b| oracle(a).total_cmp(&oracle(b)))
            .unwrap();
        let (found, predicted) = evolutionary_search(&oracle, &budget, &m, &EvolutionParams { seed: 3, ..Default::default() }).unwrap();
        assert_eq!(found, best, "frac {frac}");
        assert_eq!(predicted, oracle(&best));
    }
    let (found, _) = evolutionary_search(&oracle, &Budget::params(largest), &m, &EvolutionParams::default()).unwrap();
    assert_eq!(found, m.full());
    assert!(matches!(
        evolutionary_search(&oracle, &Budget::params(smallest - 1), &m, &EvolutionParams::default()),
        Err(Error::Budget(_))
    ));
}

#[test]
fn frontier_is_monotone_and_ignores_dominated_points() {
    let mk = |p, l| SweepPoint { config: LayerConfig::new(vec![0]), params: p, loss: l, on_frontier: false };
    let mut pts: Vec<SweepPoint> = (0..50u64).map(|i| mk(i * 37 % 101, 3.0 - (i * 13 % 17) as f64 * 0.1)).collect();
    mark_frontier(&mut pts);
    let frontier: Vec<(u64, f64)> = pts.iter().filter(|p| p.on_frontier).map(|p| (p.params, p.loss)).collect();
    assert!(frontier.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 > w[1].1));
    // add a point dominated by an existing frontier point
    let (p0, l0) = frontier[frontier.len() / 2];
    pts.push(mk(p0 + 1, l0 + 0.01));
    mark_frontier(&mut pts);
    let again: Vec<(u64, f64)> = pts.iter().filter(|p| p.on_frontier).map(|p| (p.params, p.loss)).collect();
    assert_eq!(frontier, again);
}
