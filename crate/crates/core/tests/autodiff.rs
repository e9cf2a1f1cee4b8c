use matformer::gradcheck::grad_check;
use matformer::kernels::{self, Activation};
use matformer::model::{BoundParams, MatDecoderModel, ModelConfig};
use matformer::rng::substream;
use matformer::{Error, Graph, Tensor, Var};

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut substream(seed, "autodiff"))
}

fn weighted_sum(g: &mut Graph, v: Var, seed: u64) -> matformer::Result<Var> {
    let shape = g.value(v).shape().to_vec();
    let rows = shape[0];
    let cols: usize = shape[1..].iter().product();
    let w = g.constant(&rand(&[cols, 1], seed));
    let col = g.matmul(v, w)?; // [rows, 1]
    let ones = g.constant(&Tensor::full(&[1, rows], 1.0));
    g.matmul(ones, col)
}

#[test]
fn matmul_gradients() {
    let err = grad_check(
        |g, p| {
            let c = g.matmul(p[0], p[1])?;
            weighted_sum(g, c, 1)
        },
        &[rand(&[3, 4], 2), rand(&[4, 5], 3)],
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn batched_matmul_gradients() {
    let err = grad_check(
        |g, p| {
            let c = g.matmul(p[0], p[1])?;
            let flat = g.reshape(c, &[6, 2])?;
            weighted_sum(g, flat, 4)
        },
        &[rand(&[2, 3, 4], 4), rand(&[2, 4, 2], 5)],
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
    let mut g = Graph::new();
    let a = g.param(&rand(&[2, 3, 4], 1));
    assert!(matches!(g.softmax_cross_entropy(a, &[0, 1]), Err(Error::Dimension(_))));
}

#[test]
fn matmul_nt_transpose_scale_add_gradients() {
    let err = grad_check(
        |g, p| {
            let c = g.matmul_nt(p[0], p[1])?; // [3,5]
            let t = g.transpose(c)?; // [5,3]
            let t = g.transpose(t)?;
            let s = g.scale(t, -1.7)?;
            let a = g.add(s, p[2])?;
            weighted_sum(g, a, 6)
        },
        &[rand(&[3, 4], 7), rand(&[5, 4], 8), rand(&[3, 5], 9)],
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn activation_gradients() {
    for (kind, seed) in [(Activation::Gelu, 10), (Activation::SquaredRelu, 11)] {
        let err = grad_check(
            |g, p| {
                let a = g.activation(p[0], kind)?;
                weighted_sum(g, a, seed)
            },
            &[rand(&[4, 6], seed)],
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "{kind:?}: {err}");
    }
}

#[test]
fn layer_norm_gradients() {
    let err = grad_check(
        |g, p| {
            let y = g.layer_norm(p[0], p[1], p[2])?;
            weighted_sum(g, y, 12)
        },
        &[rand(&[3, 6], 13), rand(&[6], 14), rand(&[6], 15)],
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn embedding_and_cross_entropy_gradients() {
    let err = grad_check(
        |g, p| {
            let e = g.embedding(p[0], &[2, 0, 2, 4])?;
            let logits = g.matmul_nt(e, p[1])?;
            g.softmax_cross_entropy(logits, &[1, 0, 5, 3])
        },
        &[rand(&[5, 3], 16), rand(&[6, 3], 17)],
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn attention_gradients() {
    let err = grad_check(
        |g, p| {
            let a = g.causal_attention(p[0], p[1], p[2], 2, 3, 2)?;
            weighted_sum(g, a, 18)
        },
        &[rand(&[6, 4], 19), rand(&[6, 4], 20), rand(&[6, 4], 21)],
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn mean_pool_and_row_slice_gradients() {
    let err = grad_check(
        |g, p| {
            let s = g.row_slice(p[0], 4)?;
            let pooled = g.mean_pool(s, 2, 2)?;
            weighted_sum(g, pooled, 22)
        },
        &[rand(&[6, 3], 23)],
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn linear_model_gradient_is_near_exact() {
    let x = rand(&[5, 3], 24);
    let err = grad_check(
        |g, p| {
            let xv = g.constant(&x);
            let y = g.matmul_nt(xv, p[0])?;
            weighted_sum(g, y, 25)
        },
        &[rand(&[2, 3], 26)],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-7, "{err}");
}

#[test]
fn empty_parameter_list_has_zero_error() {
    let err = grad_check(|g, _| Ok(g.constant(&Tensor::scalar(1.0))), &[], EPS).unwrap();
    assert_eq!(err, 0.0);
    assert!(grad_check(|g, _| Ok(g.constant(&Tensor::scalar(1.0))), &[], 0.0).is_err());
}

#[test]
fn two_layer_matformer_gradients_at_every_granularity() {
    let cfg = ModelConfig::standard(8, 2, 2, 7, 6);
    let model = MatDecoderModel::new(cfg.clone(), 3).unwrap();
    let params: Vec<Tensor> = model.tensors().into_iter().cloned().collect();
    let inputs = [1, 4, 2, 6, 0, 3];
    let targets = [4, 2, 6, 0, 3, 5];
    for gran in 0..cfg.g() {
        let config = cfg.uniform(gran);
        let err = grad_check(
            |g, vars| {
                let bound = BoundParams::from_vars(vars.to_vec());
                model.graph_lm_loss(g, &bound, &inputs, &targets, 2, 3, &config)
            },
            &params,
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "granularity {gran}: {err}");
    }
}

#[test]
fn row_slice_gradient_lands_in_parent_prefix() {
    let w = rand(&[5, 3], 30);
    let mut g = Graph::new();
    let wv = g.param(&w);
    let s = g.row_slice(wv, 2).unwrap();
    assert!(g.value(s).shares_storage(&w));
    let x = g.constant(&rand(&[4, 3], 31));
    let y = g.matmul_nt(x, s).unwrap();
    let loss = weighted_sum(&mut g, y, 32).unwrap();
    let grads = g.backward(loss).unwrap();
    let gw = grads.get(wv).unwrap();
    assert_eq!(gw.len(), 15);
    assert!(gw[..6].iter().any(|&v| v != 0.0));
    assert!(gw[6..].iter().all(|&v| v == 0.0));
}

#[test]
fn fan_out_gradients_accumulate() {
    let mut g = Graph::new();
    let a = g.param(&Tensor::new(&[1, 1], vec![3.0]).unwrap());
    let b = g.add(a, a).unwrap();
    let c = g.add(b, a).unwrap();
    let grads = g.backward(c).unwrap();
    assert_eq!(grads.get(a).unwrap(), &[3.0]);
}

#[test]
fn cross_entropy_cases() {
    let mut g = Graph::new();
    let l = g.constant(&Tensor::full(&[2, 4], 0.5));
    let loss = g.softmax_cross_entropy(l, &[0, 3]).unwrap();
    assert!((g.value(loss).data()[0] - 4f64.ln()).abs() < 1e-15);
    assert!(matches!(g.softmax_cross_entropy(l, &[0, 4]), Err(Error::Index(_))));

    let logits = rand(&[2, 5], 40);
    let targets = [3, 1];
    let l = g.constant(&logits);
    let loss = g.softmax_cross_entropy(l, &targets).unwrap();
    let mut want = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        want += -(row[t].exp() / z).ln();
    }
    assert!((g.value(loss).data()[0] - want / 2.0).abs() < 1e-14);
}

#[test]
fn non_finite_values_are_rejected() {
    let mut g = Graph::new();
    let a = g.param(&Tensor::new(&[1, 1], vec![1e200]).unwrap());
    assert!(matches!(g.scale(a, 1e200), Err(Error::Numeric(_))));
    let b = g.param(&Tensor::new(&[1, 1], vec![1e160]).unwrap());
    assert!(matches!(g.matmul(b, b), Err(Error::Numeric(_))));
}

#[test]
fn shape_errors() {
    let mut g = Graph::new();
    let a = g.param(&rand(&[2, 3], 1));
    let b = g.param(&rand(&[2, 3], 2));
    assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
    let c = g.param(&rand(&[3, 2], 3));
    assert!(matches!(g.add(a, c), Err(Error::Dimension(_))));
    assert!(matches!(g.embedding(a, &[5]), Err(Error::Index(_))));
}

#[test]
fn backward_is_deterministic() {
    let build = || {
        let mut g = Graph::new();
        let a = g.param(&rand(&[4, 4], 50));
        let q = g.causal_attention(a, a, a, 1, 4, 2).unwrap();
        let loss = weighted_sum(&mut g, q, 51).unwrap();
        let grads = g.backward(loss).unwrap();
        grads.get(a).unwrap().to_vec()
    };
    assert_eq!(build(), build());
}

#[test]
fn softmax_kernel_normalises() {
    let mut row = vec![1000.0, -1000.0, 3.0];
    kernels::softmax_in_place(&mut row);
    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}
