//! Central finite-difference checks for every differentiable primitive and
//! every layer forward. The checker rebuilds the graph from perturbed
//! inputs, so it is independent of the backward implementation it verifies.

use mars_core::autodiff::{Tape, Var};
use mars_core::decomp;
use mars_core::layers::{
    DenseConvLayer, DenseLinearLayer, Layer, LowRankLinearLayer, TTLinearLayer, Tucker2ConvLayer,
};
use mars_core::rng::Rng;
use mars_core::DenseTensor;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-5;

/// Compare reverse-mode gradients of a scalar-valued builder against
/// central finite differences on every coordinate of every input.
fn check_gradients<F>(name: &str, inputs: &[DenseTensor], tol: f64, build: F)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let eval = |tensors: &[DenseTensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        build(&tape, &vars).scalar_value()
    };

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&tape, &vars);
    assert_eq!(out.dims(), vec![1], "{name}: builder must end in a scalar");
    let grads = out.backward().unwrap();

    for (i, input) in inputs.iter().enumerate() {
        let grad = grads.get_or_zeros(vars[i], input.dims());
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += EPS;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= EPS;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * EPS);
            let got = grad.data()[j];
            let denom = fd.abs().max(got.abs()).max(1.0);
            assert!(
                ((got - fd) / denom).abs() <= tol,
                "{name}: input {i} coord {j}: reverse {got} vs fd {fd}"
            );
        }
    }
}

fn tensor(dims: &[usize], rng: &mut Rng) -> DenseTensor {
    DenseTensor::from_fn(dims, |_| rng.normal())
}

/// Values kept away from 0 so relu/log/div kinks are not sampled.
fn positive_tensor(dims: &[usize], rng: &mut Rng) -> DenseTensor {
    DenseTensor::from_fn(dims, |_| 0.5 + rng.uniform())
}

#[test]
fn elementwise_primitives_pass_finite_differences() {
    let mut rng = Rng::from_seed(100);
    for trial in 0..20 {
        let a = tensor(&[2, 3], &mut rng);
        let b = tensor(&[2, 3], &mut rng);
        check_gradients(&format!("add#{trial}"), &[a.clone(), b.clone()], TOL, |_, v| {
            v[0].add(v[1]).sum()
        });
        check_gradients(&format!("sub#{trial}"), &[a.clone(), b.clone()], TOL, |_, v| {
            v[0].sub(v[1]).sum()
        });
        check_gradients(&format!("mul#{trial}"), &[a.clone(), b.clone()], TOL, |_, v| {
            v[0].mul(v[1]).sigmoid().sum()
        });
        check_gradients(&format!("neg_scale#{trial}"), &[a.clone()], TOL, |_, v| {
            v[0].neg().scale(1.7).add_scalar(0.3).sum()
        });
        check_gradients(&format!("sigmoid#{trial}"), &[a.clone()], TOL, |_, v| {
            v[0].sigmoid().sum()
        });
        check_gradients(&format!("exp#{trial}"), &[a.clone()], TOL, |_, v| {
            v[0].exp().sum()
        });

        let p = positive_tensor(&[2, 3], &mut rng);
        let q = positive_tensor(&[2, 3], &mut rng);
        check_gradients(&format!("log#{trial}"), &[p.clone()], TOL, |_, v| {
            v[0].log().unwrap().sum()
        });
        check_gradients(&format!("div#{trial}"), &[p, q], TOL, |_, v| {
            v[0].div(v[1]).unwrap().sum()
        });
    }
}

#[test]
fn clamp_and_relu_pass_away_from_kinks() {
    let mut rng = Rng::from_seed(101);
    for trial in 0..20 {
        // Sample points at least 1e-3 from the clamp boundaries at 0 and 1.
        let a = DenseTensor::from_fn(&[6], |_| loop {
            let x = rng.uniform_in(-0.5, 1.5);
            if (x - 0.0).abs() > 1e-3 && (x - 1.0).abs() > 1e-3 {
                break x;
            }
        });
        check_gradients(&format!("clamp#{trial}"), &[a.clone()], 1e-6, |_, v| {
            v[0].clamp(0.0, 1.0).unwrap().scale(2.0).sum()
        });
        check_gradients(&format!("relu#{trial}"), &[a], 1e-6, |_, v| {
            v[0].relu().sum()
        });
    }
}

#[test]
fn contraction_primitives_pass_finite_differences() {
    let mut rng = Rng::from_seed(102);
    // The stated oracle case: sum(contract(A, B)) on 3x4 and 4x2.
    for trial in 0..5 {
        let a = tensor(&[3, 4], &mut rng);
        let b = tensor(&[4, 2], &mut rng);
        check_gradients(&format!("matmul#{trial}"), &[a, b], 1e-6, |_, v| {
            v[0].matmul(v[1]).sum()
        });
    }
    // Multi-mode contraction through the composite path.
    let a = tensor(&[2, 3, 4], &mut rng);
    let b = tensor(&[4, 3, 2], &mut rng);
    check_gradients("contract_multi", &[a, b], TOL, |_, v| {
        v[0].contract(v[1], &[2, 1], &[0, 1]).sigmoid().sum()
    });
    // Reshape and permute are linear; check through a nonlinearity.
    let c = tensor(&[2, 3, 4], &mut rng);
    check_gradients("permute_reshape", &[c], TOL, |_, v| {
        v[0].permute(&[2, 0, 1]).reshape(&[4, 6]).sigmoid().sum()
    });
}

#[test]
fn hadamard_and_add_row_pass_finite_differences() {
    let mut rng = Rng::from_seed(103);
    let a = tensor(&[2, 3, 4], &mut rng);
    let w = tensor(&[3], &mut rng);
    check_gradients("hadamard_mode_k", &[a, w], TOL, |_, v| {
        v[0].hadamard_mode_k(v[1], 1).sigmoid().sum()
    });
    let x = tensor(&[4, 5], &mut rng);
    let bias = tensor(&[5], &mut rng);
    check_gradients("add_row", &[x, bias], TOL, |_, v| {
        v[0].add_row(v[1]).sigmoid().sum()
    });
}

#[test]
fn hadamard_weight_grad_is_slice_sum_of_mode() {
    let mut rng = Rng::from_seed(104);
    let a = tensor(&[3, 4, 2], &mut rng);
    let tape = Tape::new();
    let av = tape.leaf(a.clone());
    let wv = tape.leaf(DenseTensor::ones(&[4]));
    let grads = av.hadamard_mode_k(wv, 1).sum().backward().unwrap();
    let gw = grads.get(wv).unwrap();
    for s in 0..4 {
        let mut want = 0.0;
        for i in 0..3 {
            for j in 0..2 {
                want += a.get(&[i, s, j]);
            }
        }
        assert!((gw.data()[s] - want).abs() <= 1e-12);
    }
}

#[test]
fn pooling_and_im2col_pass_finite_differences() {
    let mut rng = Rng::from_seed(105);
    let x = tensor(&[2, 2, 4, 4], &mut rng);
    check_gradients("im2col", &[x.clone()], TOL, |_, v| {
        v[0].im2col(3, 1, 1).unwrap().sigmoid().sum()
    });
    // Ties in max pooling are measure-zero under normal sampling.
    check_gradients("max_pool2", &[x], TOL, |_, v| {
        v[0].max_pool2().unwrap().sigmoid().sum()
    });
}

#[test]
fn softmax_cross_entropy_passes_finite_differences() {
    let mut rng = Rng::from_seed(106);
    for trial in 0..5 {
        let logits = tensor(&[4, 3], &mut rng);
        let labels = [0usize, 2, 1, 2];
        check_gradients(&format!("softmax_ce#{trial}"), &[logits], 1e-6, |_, v| {
            v[0].softmax_cross_entropy_sum(&labels).unwrap()
        });
    }
}

/// FD over every parameter of a layer, with and without relaxed masks.
fn check_layer(name: &str, layer: &Layer, x: &DenseTensor, mask_values: Option<Vec<Vec<f64>>>) {
    let params: Vec<DenseTensor> = layer.param_tensors().into_iter().cloned().collect();
    let n_params = params.len();
    let mut inputs = params;
    if let Some(mv) = &mask_values {
        for m in mv {
            inputs.push(DenseTensor::new(vec![m.len()], m.clone()).unwrap());
        }
    }
    check_gradients(name, &inputs, TOL, |tape, vars| {
        let xv = tape.constant(x.clone());
        let masks: Option<Vec<Var>> = mask_values.as_ref().map(|mv| {
            (0..mv.len()).map(|i| vars[n_params + i]).collect()
        });
        layer
            .forward_tape(xv, &vars[..n_params], masks.as_deref())
            .unwrap()
            .sigmoid()
            .sum()
    });
}

#[test]
fn tt_linear_gradients_with_and_without_masks() {
    let mut rng = Rng::from_seed(107);
    let weights = decomp::init_glorot_tt_matrix(&[2, 2], &[3, 2], &[3], &mut rng).unwrap();
    let layer = Layer::TTLinear(TTLinearLayer {
        bias: tensor(&[4], &mut rng),
        weights,
        mask_ids: vec![0],
    });
    let x = tensor(&[3, 6], &mut rng);
    check_layer("tt_linear", &layer, &x, None);
    let mask = vec![vec![0.9, 0.4, 0.7]];
    check_layer("tt_linear_masked", &layer, &x, Some(mask));
}

#[test]
fn low_rank_gradients_with_and_without_masks() {
    let mut rng = Rng::from_seed(108);
    let weights = decomp::init_kaiming_low_rank(3, 5, 2, &mut rng).unwrap();
    let layer = Layer::LowRank(LowRankLinearLayer {
        bias: tensor(&[3], &mut rng),
        weights,
        mask_id: 0,
    });
    let x = tensor(&[4, 5], &mut rng);
    check_layer("low_rank", &layer, &x, None);
    check_layer("low_rank_masked", &layer, &x, Some(vec![vec![0.6, 0.2]]));
}

#[test]
fn tucker_conv_gradients_with_and_without_masks() {
    let mut rng = Rng::from_seed(109);
    let weights = decomp::init_kaiming_tucker2(2, 3, 3, 2, 2, &mut rng).unwrap();
    let layer = Layer::Tucker2Conv(Tucker2ConvLayer {
        bias: tensor(&[3], &mut rng),
        weights,
        stride: 1,
        padding: 1,
        mask_ids: [0, 1],
    });
    let x = tensor(&[2, 2, 4, 4], &mut rng);
    check_layer("tucker2_conv", &layer, &x, None);
    check_layer(
        "tucker2_conv_masked",
        &layer,
        &x,
        Some(vec![vec![0.8, 0.3], vec![0.5, 0.9]]),
    );
}

#[test]
fn dense_layers_pass_finite_differences() {
    let mut rng = Rng::from_seed(110);
    let linear = Layer::Dense(DenseLinearLayer {
        weight: tensor(&[3, 4], &mut rng),
        bias: tensor(&[3], &mut rng),
    });
    check_layer("dense", &linear, &tensor(&[2, 4], &mut rng), None);

    let conv = Layer::DenseConv(DenseConvLayer {
        kernel: tensor(&[2, 3, 3, 3], &mut rng),
        bias: tensor(&[3], &mut rng),
        stride: 1,
        padding: 0,
    });
    check_layer("dense_conv", &conv, &tensor(&[2, 2, 5, 5], &mut rng), None);
}
