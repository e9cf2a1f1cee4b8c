use matformer::checkpoint;
use matformer::data::{synthetic_text, Corpus, BYTE_VOCAB};
use matformer::graph::Graph;
use matformer::kernels::nll;
use matformer::model::all_configs;
use matformer::rng::substream;
use matformer::train::*;
use matformer::{Error, LayerConfig, MatDecoderModel, ModelConfig};

fn corpus() -> Corpus {
    Corpus::from_bytes(synthetic_text(5, 30_000).as_bytes(), 0.1, 5).unwrap()
}

fn small() -> ModelConfig {
    ModelConfig::standard(16, 2, 2, BYTE_VOCAB, 32)
}

fn strategy(kind: StrategyKind, steps: usize) -> TrainingStrategy {
    let mut s = TrainingStrategy::new(kind, steps, 64, 16, 3);
    s.lr.warmup_steps = 5;
    s
}

#[test]
fn smallest_only_sampling_leaves_wider_rows_untouched() {
    let c = corpus();
    let init = MatDecoderModel::new(small(), 1).unwrap();
    let mut m = init.clone();
    let mut s = strategy(StrategyKind::Matformer, 30);
    s.sampling_probs = Some(vec![1.0, 0.0, 0.0, 0.0]);
    let log = train_matformer(&mut m, &s, &c).unwrap();
    assert!(log.records.iter().all(|r| r.granularity == Some(1)));
    let m1 = small().granularity.width(0);
    for (a, b) in m.layers.iter().zip(&init.layers) {
        for (ta, tb) in [(&a.w1, &b.w1), (&a.w2, &b.w2)] {
            let d = ta.row_len();
            let tail_a: Vec<u64> = ta.data()[m1 * d..].iter().map(|v| v.to_bits()).collect();
            let tail_b: Vec<u64> = tb.data()[m1 * d..].iter().map(|v| v.to_bits()).collect();
            assert_eq!(tail_a, tail_b);
            assert_ne!(ta.data()[..m1 * d], tb.data()[..m1 * d]);
        }
        assert_ne!(a.wq.data(), b.wq.data());
    }
    assert_ne!(m.token_embedding.data(), init.token_embedding.data());
}

#[test]
fn training_is_bitwise_reproducible() {
    let c = corpus();
    let s = strategy(StrategyKind::Matformer, 12);
    let mut a = MatDecoderModel::new(small(), 2).unwrap();
    let mut b = MatDecoderModel::new(small(), 2).unwrap();
    let la = train_matformer(&mut a, &s, &c).unwrap();
    let lb = train_matformer(&mut b, &s, &c).unwrap();
    assert_eq!(la, lb);
    let null = serde_json::Value::Null;
    assert_eq!(checkpoint::model_to_bytes(&a, &null).unwrap(), checkpoint::model_to_bytes(&b, &null).unwrap());
    let mut other = s.clone();
    other.seed += 1;
    let mut d = MatDecoderModel::new(small(), 2).unwrap();
    train_matformer(&mut d, &other, &c).unwrap();
    assert_ne!(checkpoint::model_to_bytes(&a, &null).unwrap(), checkpoint::model_to_bytes(&d, &null).unwrap());
}

#[test]
fn granularity_draws_follow_the_sampling_probabilities() {
    let n = 20_000;
    for probs in [vec![0.25; 4], vec![0.44, 0.31, 0.15, 0.10]] {
        let mut rng = substream(9, "sampling");
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[sample_granularity(&mut rng, &probs).unwrap()] += 1;
        }
        for (c, p) in counts.iter().zip(&probs) {
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((*c as f64 - n as f64 * p).abs() < 4.0 * sd, "{counts:?} vs {probs:?}");
        }
    }
}

#[test]
fn table_probabilities_are_accepted_and_logged() {
    let c = corpus();
    let mut m = MatDecoderModel::new(small(), 3).unwrap();
    let mut s = strategy(StrategyKind::Matformer, 40);
    s.sampling_probs = Some(vec![0.44, 0.31, 0.15, 0.10]);
    let log = train_matformer(&mut m, &s, &c).unwrap();
    assert_eq!(log.records.len(), 40);
    let mut seen: Vec<usize> = log.records.iter().filter_map(|r| r.granularity).collect();
    seen.sort();
    seen.dedup();
    assert!(seen.len() >= 3 && seen.iter().all(|&g| (1..=4).contains(&g)));
    assert_eq!(log.records.last().unwrap().tokens_seen, 40 * 64);
    let mut buf = Vec::new();
    log.write_jsonl(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 40);
    for key in ["step", "strategy", "granularity", "loss", "lr", "tokens_seen"] {
        assert!(text.lines().next().unwrap().contains(&format!("\"{key}\"")));
    }
}

#[test]
fn dynabert_gradient_is_mean_of_per_granularity_gradients() {
    let c = corpus();
    let m = MatDecoderModel::new(small(), 4).unwrap();
    let mut rng = substream(0, "data");
    let batches: Vec<_> = (0..4).map(|_| c.sample_batch(&mut rng, 2, 8).unwrap()).collect();

    let mut g = Graph::new();
    let bound = m.bind(&mut g);
    let loss = dynabert_loss(&mut g, &m, &bound, &batches, 2, 8).unwrap();
    let joint = g.backward(loss).unwrap();

    let mut mean: Vec<Vec<f64>> = m.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
    for (i, (x, y)) in batches.iter().enumerate() {
        let mut g = Graph::new();
        let bound = m.bind(&mut g);
        let loss = m.graph_lm_loss(&mut g, &bound, x, y, 2, 8, &LayerConfig::uniform(i, 2)).unwrap();
        let grads = g.backward(loss).unwrap();
        for (acc, v) in mean.iter_mut().zip(bound.vars()) {
            if let Some(gr) = grads.get(*v) {
                acc.iter_mut().zip(gr).for_each(|(a, b)| *a += b / 4.0);
            }
        }
    }
    for (acc, v) in mean.iter().zip(bound.vars()) {
        let got = joint.get(*v).unwrap();
        for (a, b) in got.iter().zip(acc) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }
}

#[test]
fn dynabert_with_one_granularity_is_plain_training() {
    let c = corpus();
    let base = small().baseline(64);
    let mut a = MatDecoderModel::new(base.clone(), 6).unwrap();
    let mut b = MatDecoderModel::new(base, 6).unwrap();
    let la = train_dynabert(&mut a, &strategy(StrategyKind::Dynabert, 10), &c).unwrap();
    let lb = train_matformer(&mut b, &strategy(StrategyKind::Matformer, 10), &c).unwrap();
    let losses = |l: &TrainingLog| l.records.iter().map(|r| r.loss).collect::<Vec<_>>();
    assert_eq!(losses(&la), losses(&lb));
    let null = serde_json::Value::Null;
    assert_eq!(checkpoint::model_to_bytes(&a, &null).unwrap(), checkpoint::model_to_bytes(&b, &null).unwrap());
}

#[test]
fn equal_token_budgets() {
    let m = strategy(StrategyKind::Matformer, 400);
    let d = m.budget_matched(StrategyKind::Dynabert, 4);
    let o = m.budget_matched(StrategyKind::Ofa, 4);
    let i = m.budget_matched(StrategyKind::Independent, 4);
    assert_eq!(d.steps * 4 * d.batch_tokens, m.steps * m.batch_tokens);
    assert_eq!(o.total_tokens(4), m.total_tokens(4));
    assert_eq!(i.total_tokens(4), m.total_tokens(4));
    assert_eq!(i.steps, 100);
}

#[test]
fn dynabert_log_counts_all_batches() {
    let c = corpus();
    let mut m = MatDecoderModel::new(small(), 7).unwrap();
    let log = train_dynabert(&mut m, &strategy(StrategyKind::Dynabert, 3), &c).unwrap();
    assert_eq!(log.records.last().unwrap().tokens_seen, 3 * 4 * 64);
}

#[test]
fn ofa_per_layer_granularity_is_uniform() {
    // chi-square goodness of fit, 3 degrees of freedom, critical value at p = 0.01
    let mut rng = substream(1, "sampling");
    let (g, l, n) = (4, 4, 10_000);
    let mut counts = vec![[0f64; 4]; l];
    for _ in 0..n {
        for (layer, &gran) in sample_ofa_config(&mut rng, g, l).iter().enumerate() {
            counts[layer][gran] += 1.0;
        }
    }
    let e = n as f64 / g as f64;
    for (layer, row) in counts.iter().enumerate() {
        let chi2: f64 = row.iter().map(|c| (c - e).powi(2) / e).sum();
        assert!(chi2 < 11.345, "layer {layer}: chi2 {chi2}");
    }
}

#[test]
fn ofa_exact_config_probability_and_mid_size_concentration() {
    let (g, l) = (4usize, 2usize);
    let mut rng = substream(2, "sampling");
    let n = 64_000;
    let mut xl = 0;
    let mut totals = vec![0usize; l * (g - 1) + 1];
    for _ in 0..n {
        let c = sample_ofa_config(&mut rng, g, l);
        xl += usize::from(c.iter().all(|&i| i == g - 1));
        totals[c.iter().sum::<usize>()] += 1;
    }
    let p = (g as f64).powi(-(l as i32));
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    assert!((xl as f64 - n as f64 * p).abs() < 4.0 * sd);
    // exact counts of each total by enumeration: 1,2,3,4,3,2,1 out of 16
    let exact: Vec<usize> = (0..totals.len()).map(|t| all_configs(g, l).filter(|c| c.iter().sum::<usize>() == t).count()).collect();
    assert_eq!(exact, vec![1, 2, 3, 4, 3, 2, 1]);
    let mid = totals.len() / 2;
    assert!(totals[mid] > totals[0] * 3 && totals[mid] > totals[totals.len() - 1] * 3);
}

#[test]
fn independent_baselines_have_doubling_widths_and_own_tensors() {
    let base = small();
    let configs = baseline_configs(&base);
    let widths: Vec<usize> = configs.iter().map(|c| c.d_ff).collect();
    assert_eq!(widths, vec![8, 16, 32, 64]);
    let c = corpus();
    let s = strategy(StrategyKind::Independent, 2);
    let models = train_independent(&configs, &s, &c).unwrap();
    assert_eq!(models.len(), 4);
    for (i, (a, la)) in models.iter().enumerate() {
        assert_eq!(la.records.len(), 2);
        assert!(la.records.iter().all(|r| r.model == Some(i + 1)));
        for (b, _) in models.iter().skip(i + 1) {
            for ta in a.tensors() {
                for tb in b.tensors() {
                    assert!(!ta.shares_storage(tb));
                }
            }
            assert_ne!(a.token_embedding.data(), b.token_embedding.data());
        }
    }
    let total: u64 = models.iter().map(|(_, l)| l.records.last().unwrap().tokens_seen).sum();
    assert_eq!(total, s.total_tokens(4));
}

#[test]
fn zero_logits_give_log_vocab_loss() {
    let c = corpus();
    let mut m = MatDecoderModel::new(small(), 0).unwrap();
    m.token_embedding.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let loss = evaluate_loss(&m, &m.full_config(), &c, 16).unwrap();
    assert!((loss - (BYTE_VOCAB as f64).ln()).abs() < 1e-12);
}

#[test]
fn extracted_submodel_has_identical_loss() {
    let c = corpus();
    let m = MatDecoderModel::new(small(), 8).unwrap();
    for cfg in [LayerConfig::new(vec![0, 2]), m.full_config()] {
        let x = m.extract_submodel(&cfg).unwrap();
        assert_eq!(evaluate_loss(&m, &cfg, &c, 16).unwrap(), evaluate_loss(&x, &cfg, &c, 16).unwrap());
    }
}

#[test]
fn loss_matches_per_token_script() {
    let c = corpus();
    let m = MatDecoderModel::new(small(), 9).unwrap();
    let cfg = LayerConfig::new(vec![1, 3]);
    let tokens: Vec<usize> = c.validation()[..1000].to_vec();
    // predict every token from its own window of up to 32 preceding tokens,
    // window boundaries every 32 predictions
    let mut total = 0.0;
    for t in 1..tokens.len() {
        let start = ((t - 1) / 32) * 32;
        let logits = m.forward(&tokens[start..t], &cfg).unwrap();
        total += nll(logits.row(t - 1 - start), tokens[t]);
    }
    let script = total / (tokens.len() - 1) as f64;
    let got = evaluate_tokens(&m, &cfg, &tokens, 32).unwrap();
    assert!((got - script).abs() < 1e-12, "{got} vs {script}");
}

#[test]
fn wrong_strategy_kind_and_bad_config_are_rejected() {
    let c = corpus();
    let mut m = MatDecoderModel::new(small(), 0).unwrap();
    assert!(matches!(train_matformer(&mut m, &strategy(StrategyKind::Ofa, 1), &c), Err(Error::Config(_))));
    let mut s = strategy(StrategyKind::Matformer, 1);
    s.seq_len = 64;
    s.batch_tokens = 128;
    assert!(matches!(train_matformer(&mut m, &s, &c), Err(Error::Length(_))));
}

#[test]
fn non_finite_loss_aborts() {
    let c = corpus();
    let mut m = MatDecoderModel::new(small(), 0).unwrap();
    m.final_gain.data_mut()[0] = f64::NAN;
    let err = train_matformer(&mut m, &strategy(StrategyKind::Matformer, 2), &c).unwrap_err();
    assert!(err.is_numeric(), "{err}");
}

#[test]
fn checkpoint_round_trip_preserves_forward() {
    let m = MatDecoderModel::new(small(), 10).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.matf");
    checkpoint::save_model(&p, &m, &serde_json::json!({"note": "x"})).unwrap();
    let (back, extras) = checkpoint::load_model(&p).unwrap();
    assert_eq!(extras["note"], "x");
    assert_eq!(back.forward(&[1, 2, 3], &m.full_config()).unwrap(), m.forward(&[1, 2, 3], &m.full_config()).unwrap());
    let s = m.extract_submodel(&LayerConfig::new(vec![0, 1])).unwrap();
    checkpoint::save_model(&p, &s, &serde_json::Value::Null).unwrap();
    let (back, _) = checkpoint::load_model(&p).unwrap();
    assert_eq!(back.layer_caps(), &LayerConfig::new(vec![0, 1]));
    assert_eq!(checkpoint::model_fingerprint(&back), checkpoint::model_fingerprint(&s));
}
