//! Cross-implementation equivalence and behavioral property tests:
//! reconstruction oracles, mask-application equivalences, pruning
//! equivalence over random models, initializer statistics, chain cost
//! accounting, gradient decomposition, and training-loop contracts.

use std::path::PathBuf;

use mars_core::autodiff::{Tape, Var};
use mars_core::checkpoint::Checkpoint;
use mars_core::config::{self, DatasetSpec, ExperimentConfig, LayerSpec, ModelSpec};
use mars_core::data;
use mars_core::decomp::{self, TTMatrix};
use mars_core::layers::{
    DenseLinearLayer, Layer, LowRankLinearLayer, TTLinearLayer, Tucker2ConvLayer,
};
use mars_core::masks::{self, MaskSet};
use mars_core::model::TensorizedModel;
use mars_core::prune;
use mars_core::rng::Rng;
use mars_core::tensor::kernels;
use mars_core::trainer::{TrainConfig, Trainer};
use mars_core::DenseTensor;

fn tensor(dims: &[usize], rng: &mut Rng) -> DenseTensor {
    DenseTensor::from_fn(dims, |_| rng.normal())
}

/// Per-element TT-matrix evaluation: product of the (r x r) core slices
/// picked by the row/column multi-indices.
fn tt_matrix_entry(ttm: &TTMatrix, row: usize, col: usize) -> f64 {
    let d = ttm.cores().len();
    let (mut r, mut c) = (row, col);
    let mut row_idx = vec![0usize; d];
    let mut col_idx = vec![0usize; d];
    for k in (0..d).rev() {
        row_idx[k] = r % ttm.row_dims()[k];
        r /= ttm.row_dims()[k];
        col_idx[k] = c % ttm.col_dims()[k];
        c /= ttm.col_dims()[k];
    }
    // Running row vector times successive slices.
    let mut acc = vec![1.0f64];
    for k in 0..d {
        let core = &ttm.cores()[k];
        let (rl, rr) = (core.dims()[0], core.dims()[3]);
        let mut next = vec![0.0f64; rr];
        for (b, nb) in next.iter_mut().enumerate() {
            for (a, &va) in acc.iter().enumerate() {
                *nb += va * core.get(&[a, row_idx[k], col_idx[k], b]);
            }
        }
        debug_assert_eq!(acc.len(), rl);
        acc = next;
    }
    acc[0]
}

#[test]
fn tt_matrix_reconstruct_matches_per_element_oracle() {
    let mut rng = Rng::from_seed(21);
    let ttm = decomp::init_glorot_tt_matrix(&[2, 3, 2], &[3, 2, 2], &[2, 3], &mut rng).unwrap();
    let full = ttm.reconstruct().unwrap();
    assert_eq!(full.dims(), &[12, 12]);
    for i in 0..12 {
        for j in 0..12 {
            let want = tt_matrix_entry(&ttm, i, j);
            let got = full.get(&[i, j]);
            assert!((got - want).abs() <= 1e-12, "({i},{j}): {got} vs {want}");
        }
    }
}

#[test]
fn tt_reconstruct_matches_slice_product_oracle() {
    let mut rng = Rng::from_seed(22);
    let tt = decomp::init_glorot_tt(&[2, 3, 2], &[2, 2], &mut rng).unwrap();
    let full = tt.reconstruct().unwrap();
    for idx in full.iter_indices() {
        // Product of matrix slices G1[:, i1, :] G2[:, i2, :] G3[:, i3, :].
        let mut acc = vec![1.0f64];
        for (k, core) in tt.cores().iter().enumerate() {
            let rr = core.dims()[2];
            let mut next = vec![0.0f64; rr];
            for (b, nb) in next.iter_mut().enumerate() {
                for (a, &va) in acc.iter().enumerate() {
                    *nb += va * core.get(&[a, idx[k], b]);
                }
            }
            acc = next;
        }
        assert!((full.get(&idx) - acc[0]).abs() <= 1e-12);
    }
}

#[test]
fn zeroed_rank_slice_subtracts_its_chain_contribution() {
    let mut rng = Rng::from_seed(23);
    let tt = decomp::init_glorot_tt(&[2, 3, 2], &[3, 2], &mut rng).unwrap();
    let full = tt.reconstruct().unwrap();
    // Zero slice s of interior rank r_1 (between cores 0 and 1).
    for s in 0..3 {
        let mut masked = tt.clone();
        let mut mask = vec![1.0; 3];
        mask[s] = 0.0;
        masked.cores_mut()[0] = masked.cores()[0].mode_k_hadamard(&mask, 2).unwrap();
        masked.cores_mut()[1] = masked.cores()[1].mode_k_hadamard(&mask, 0).unwrap();
        let masked_full = masked.reconstruct().unwrap();

        let mut only = tt.clone();
        only.cores_mut()[0] = only.cores()[0].take(2, &[s]).unwrap();
        only.cores_mut()[1] = only.cores()[1].take(0, &[s]).unwrap();
        let contribution = only.reconstruct().unwrap();

        for ((m, f), c) in masked_full
            .data()
            .iter()
            .zip(full.data())
            .zip(contribution.data())
        {
            assert!((m - (f - c)).abs() <= 1e-12, "slice {s}");
        }
    }
}

fn layer_forward(layer: &Layer, x: &DenseTensor, masks: Option<&[Vec<f64>]>) -> DenseTensor {
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let params = layer.bind(&tape);
    let mask_vars: Option<Vec<Var>> = masks.map(|ms| {
        ms.iter()
            .map(|m| tape.constant(DenseTensor::new(vec![m.len()], m.clone()).unwrap()))
            .collect()
    });
    layer
        .forward_tape(xv, &params, mask_vars.as_deref())
        .unwrap()
        .value()
}

#[test]
fn masked_activations_equal_masked_cores_for_tt() {
    let mut rng = Rng::from_seed(24);
    let weights =
        decomp::init_glorot_tt_matrix(&[2, 2, 2], &[2, 3, 2], &[3, 4], &mut rng).unwrap();
    let bias = tensor(&[8], &mut rng);
    let layer = Layer::TTLinear(TTLinearLayer {
        weights: weights.clone(),
        bias: bias.clone(),
        mask_ids: vec![0, 1],
    });
    let x = tensor(&[5, 12], &mut rng);
    let mask_values = vec![vec![0.9, 0.2, 0.65], vec![0.1, 1.0, 0.0, 0.75]];

    // Implementation under test: one multiplication per mask, applied to
    // the intermediate activations.
    let got = layer_forward(&layer, &x, Some(&mask_values));

    // Reference: bake each mask once into the cores, then go dense.
    let masked = masks::apply_masks_tt_matrix(&weights, &mask_values).unwrap();
    let w = masked.reconstruct().unwrap();
    let want = x.matmul(&w.transpose().unwrap()).unwrap();
    for (row, (g, e)) in got.data().chunks(8).zip(want.data().chunks(8)).enumerate() {
        for j in 0..8 {
            let v = e[j] + bias.data()[j];
            assert!((g[j] - v).abs() <= 1e-12, "row {row} col {j}: {} vs {v}", g[j]);
        }
    }
}

#[test]
fn binary_masks_make_all_modes_and_single_application_agree() {
    let mut rng = Rng::from_seed(25);
    let weights =
        decomp::init_glorot_tt_matrix(&[2, 2, 2], &[2, 3, 2], &[3, 4], &mut rng).unwrap();
    let bits = vec![vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 1.0, 0.0]];
    let single = masks::apply_masks_tt_matrix(&weights, &bits)
        .unwrap()
        .reconstruct()
        .unwrap();
    let all_modes = masks::apply_masks_tt_matrix_all_modes(&weights, &bits)
        .unwrap()
        .reconstruct()
        .unwrap();
    assert_eq!(single.dims(), all_modes.dims());
    for (a, b) in single.data().iter().zip(all_modes.data()) {
        assert_eq!(a, b);
    }

    let tucker = decomp::init_kaiming_tucker2(3, 4, 3, 2, 3, &mut rng).unwrap();
    let (m1, m2) = (vec![1.0, 0.0], vec![0.0, 1.0, 1.0]);
    let single = masks::apply_masks_tucker2(&tucker, &m1, &m2)
        .unwrap()
        .reconstruct()
        .unwrap();
    let all_modes = masks::apply_masks_tucker2_all_modes(&tucker, &m1, &m2)
        .unwrap()
        .reconstruct()
        .unwrap();
    for (a, b) in single.data().iter().zip(all_modes.data()) {
        assert_eq!(a, b);
    }
}

/// Direct convolution with an explicit (C_in, C_out, k, k) kernel.
fn direct_conv(x: &DenseTensor, kernel: &DenseTensor, bias: &[f64], padding: usize) -> DenseTensor {
    let (b, c_in, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let (c_out, k) = (kernel.dims()[1], kernel.dims()[2]);
    let oh = h + 2 * padding - k + 1;
    let ow = w + 2 * padding - k + 1;
    DenseTensor::from_fn(&[b, c_out, oh, ow], |idx| {
        let (bi, co, oi, oj) = (idx[0], idx[1], idx[2], idx[3]);
        let mut acc = bias[co];
        for ci in 0..c_in {
            for ki in 0..k {
                for kj in 0..k {
                    let i = (oi + ki) as isize - padding as isize;
                    let j = (oj + kj) as isize - padding as isize;
                    if i >= 0 && (i as usize) < h && j >= 0 && (j as usize) < w {
                        acc += kernel.get(&[ci, co, ki, kj])
                            * x.get(&[bi, ci, i as usize, j as usize]);
                    }
                }
            }
        }
        acc
    })
}

#[test]
fn masked_tucker_conv_equals_masked_kernel_convolution() {
    let mut rng = Rng::from_seed(26);
    let weights = decomp::init_kaiming_tucker2(2, 3, 3, 3, 2, &mut rng).unwrap();
    let bias = tensor(&[3], &mut rng);
    let layer = Layer::Tucker2Conv(Tucker2ConvLayer {
        weights: weights.clone(),
        bias: bias.clone(),
        stride: 1,
        padding: 1,
        mask_ids: [0, 1],
    });
    let x = tensor(&[2, 2, 5, 5], &mut rng);
    let mask_values = vec![vec![0.7, 0.0, 1.0], vec![0.4, 0.9]];
    let got = layer_forward(&layer, &x, Some(&mask_values));

    let masked = masks::apply_masks_tucker2(&weights, &mask_values[0], &mask_values[1]).unwrap();
    let kernel = masked.reconstruct().unwrap();
    let want = direct_conv(&x, &kernel, bias.data(), 1);
    assert_eq!(got.dims(), want.dims());
    for (a, b) in got.data().iter().zip(want.data()) {
        assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
    }
}

/// Random small model portfolio for the pruning equivalence sweep.
fn random_model(variant: usize, rng: &mut Rng) -> TensorizedModel {
    let mut maskset = MaskSet::new();
    let sigma = 2.0;
    match variant % 4 {
        0 => {
            let weights =
                decomp::init_glorot_tt_matrix(&[2, 2], &[3, 2], &[rng.index(3) + 2], rng).unwrap();
            let r = weights.ranks()[1];
            let m = maskset.add_mask("l0.r1", r, 0.0, sigma, rng).unwrap();
            TensorizedModel::new(
                vec![Layer::TTLinear(TTLinearLayer {
                    weights,
                    bias: tensor(&[4], rng),
                    mask_ids: vec![m],
                })],
                maskset,
                vec![6],
            )
            .unwrap()
        }
        1 => {
            let rank = rng.index(3) + 2;
            let weights = decomp::init_kaiming_low_rank(3, 5, rank, rng).unwrap();
            let m = maskset.add_mask("l0.r", rank, 0.0, sigma, rng).unwrap();
            TensorizedModel::new(
                vec![
                    Layer::LowRank(LowRankLinearLayer {
                        weights,
                        bias: tensor(&[3], rng),
                        mask_id: m,
                    }),
                    Layer::Relu,
                    Layer::Dense(DenseLinearLayer {
                        weight: tensor(&[2, 3], rng),
                        bias: tensor(&[2], rng),
                    }),
                ],
                maskset,
                vec![5],
            )
            .unwrap()
        }
        2 => {
            let (r1, r2) = (rng.index(2) + 2, rng.index(2) + 2);
            let weights = decomp::init_kaiming_tucker2(2, 3, 3, r1, r2, rng).unwrap();
            let m1 = maskset.add_mask("l0.r1", r1, 0.0, sigma, rng).unwrap();
            let m2 = maskset.add_mask("l0.r2", r2, 0.0, sigma, rng).unwrap();
            TensorizedModel::new(
                vec![
                    Layer::Tucker2Conv(Tucker2ConvLayer {
                        weights,
                        bias: tensor(&[3], rng),
                        stride: 1,
                        padding: 1,
                        mask_ids: [m1, m2],
                    }),
                    Layer::Flatten,
                    Layer::Dense(DenseLinearLayer {
                        weight: tensor(&[2, 3 * 4 * 4], rng),
                        bias: tensor(&[2], rng),
                    }),
                ],
                maskset,
                vec![2, 4, 4],
            )
            .unwrap()
        }
        _ => {
            let weights =
                decomp::init_glorot_tt_matrix(&[2, 2], &[2, 3], &[rng.index(3) + 2], rng).unwrap();
            let r = weights.ranks()[1];
            let m0 = maskset.add_mask("l0.r1", r, 0.0, sigma, rng).unwrap();
            let rank = rng.index(3) + 2;
            let lr = decomp::init_kaiming_low_rank(2, 4, rank, rng).unwrap();
            let m1 = maskset.add_mask("l2.r", rank, 0.0, sigma, rng).unwrap();
            TensorizedModel::new(
                vec![
                    Layer::TTLinear(TTLinearLayer {
                        weights,
                        bias: tensor(&[4], rng),
                        mask_ids: vec![m0],
                    }),
                    Layer::Relu,
                    Layer::LowRank(LowRankLinearLayer {
                        weights: lr,
                        bias: tensor(&[2], rng),
                        mask_id: m1,
                    }),
                ],
                maskset,
                vec![6],
            )
            .unwrap()
        }
    }
}

#[test]
fn masked_forward_equals_pruned_forward_on_100_random_models() {
    let mut rng = Rng::from_seed(27);
    let mut rescued_seen = 0;
    for variant in 0..100 {
        let model = random_model(variant, &mut rng);
        let rounded = masks::round_masks(&model.masks);
        rescued_seen += rounded.rescued().len();
        let (compact, report) = prune::prune(&model, &rounded).unwrap();
        assert!(report.max_deviation <= prune::EQUIVALENCE_TOLERANCE);

        let mask_values: Vec<Vec<f64>> =
            model.masks.iter().map(|(id, _)| rounded.values(id)).collect();
        let x = tensor(&[8, model.input_len()], &mut rng);
        let masked = model.forward_values(&x, Some(&mask_values)).unwrap();
        let pruned = compact.forward_values(&x, None).unwrap();
        assert_eq!(masked.dims(), pruned.dims());
        for (a, b) in masked.data().iter().zip(pruned.data()) {
            assert_eq!(a, b, "variant {variant}");
        }
    }
    // The random logits should have exercised the all-zero rescue path.
    assert!(rescued_seen > 0, "rescue path never exercised");
}

#[test]
fn glorot_tt_matrix_hits_target_variance_band() {
    let mut rng = Rng::from_seed(28);
    let ttm =
        decomp::init_glorot_tt_matrix(&[5, 5, 5], &[4, 4, 5], &[6, 6], &mut rng).unwrap();
    let full = ttm.reconstruct().unwrap();
    assert_eq!(full.len(), 10_000);
    let mean = full.sum() / full.len() as f64;
    let var = full
        .data()
        .iter()
        .map(|x| (x - mean) * (x - mean))
        .sum::<f64>()
        / full.len() as f64;
    let target = 2.0 / (125.0 + 80.0);
    assert!(
        var >= 0.5 * target && var <= 2.0 * target,
        "var {var}, target {target}"
    );
}

/// Analytic multiply-add count of the right-to-left chain, batch 1.
fn chain_cost(m: &[usize], n: &[usize], interior: &[usize]) -> u64 {
    let d = m.len();
    let mut r = vec![1usize];
    r.extend_from_slice(interior);
    r.push(1);
    let mut total = 0u64;
    for k in (0..d).rev() {
        let pre: usize = n[..k].iter().product();
        let tail: usize = m[k..].iter().product();
        total += (pre * tail * n[k] * r[k] * r[k + 1]) as u64;
    }
    total
}

#[test]
fn tt_chain_flops_match_analytic_count_and_complexity_bound() {
    let grid: &[(&[usize], &[usize], &[usize])] = &[
        (&[5, 5, 5, 5], &[7, 4, 7, 4], &[20, 20, 20]),
        (&[5, 2], &[25, 25], &[20]),
        (&[4, 4, 4], &[4, 4, 4], &[8, 8]),
        (&[3, 2], &[2, 2], &[3]),
        (&[8, 4], &[8, 4], &[12]),
        (&[2, 3, 2], &[3, 2, 2], &[5, 5]),
    ];
    let mut rng = Rng::from_seed(29);
    for &(m, n, interior) in grid {
        let weights = decomp::init_glorot_tt_matrix(m, n, interior, &mut rng).unwrap();
        let rows = weights.nrows();
        let cols = weights.ncols();
        let layer = Layer::TTLinear(TTLinearLayer {
            weights,
            bias: DenseTensor::zeros(&[rows]),
            mask_ids: (0..interior.len()).collect(),
        });
        let x = tensor(&[1, cols], &mut rng);
        kernels::reset_flops();
        let _ = layer_forward(&layer, &x, None);
        let counted = kernels::flops();
        // Chain multiply-adds plus the bias adds; nothing else is counted.
        let expected = chain_cost(m, n, interior) + rows as u64;
        assert_eq!(counted, expected, "shape {m:?} x {n:?}");

        let d = m.len() as u64;
        let r = *interior.iter().max().unwrap() as u64;
        let n_max = *n.iter().max().unwrap() as u64;
        let bound = d * r * r * n_max * rows.max(cols) as u64;
        assert!(
            counted <= bound,
            "shape {m:?} x {n:?}: counted {counted} exceeds d r^2 n max(M,N) = {bound}"
        );
    }
}

#[test]
fn phi_gradient_splits_into_data_term_plus_prior_constant() {
    let mut rng = Rng::from_seed(30);
    let weights = decomp::init_kaiming_low_rank(2, 6, 3, &mut rng).unwrap();
    let bias = tensor(&[2], &mut rng);
    let x = tensor(&[4, 6], &mut rng);
    let labels = [0usize, 1, 1, 0];
    let pi: f64 = 0.01;
    let tau = 0.4;
    let phi0 = [0.6, 0.45, 0.7];
    let noise = DenseTensor::new(vec![3], vec![0.05, -0.1, 0.2]).unwrap();

    // Builds the objective with phi as the leaf; `with_prior` toggles the
    // mask prior term.
    let grad_phi = |with_prior: bool| -> Vec<f64> {
        let tape = Tape::new();
        let phi = tape.leaf(DenseTensor::new(vec![3], phi0.to_vec()).unwrap());
        let lam = phi
            .log()
            .unwrap()
            .sub(phi.neg().add_scalar(1.0).log().unwrap());
        let relaxed = masks::relaxed_node(&tape, lam, &noise, tau).unwrap();
        let u1 = tape.constant(weights.u1.clone());
        let u2 = tape.constant(weights.u2.clone());
        let b = tape.constant(bias.clone());
        let xv = tape.constant(x.clone());
        let z = xv
            .matmul(u2.permute(&[1, 0]))
            .hadamard_mode_k(relaxed, 1)
            .matmul(u1.permute(&[1, 0]))
            .add_row(b);
        let mut obj = z.softmax_cross_entropy_sum(&labels).unwrap().neg();
        if with_prior {
            let keep = phi.scale(pi.ln());
            let drop = phi.neg().add_scalar(1.0).scale((1.0 - pi).ln());
            obj = obj.add(keep.add(drop).sum());
        }
        let grads = obj.backward().unwrap();
        grads.get(phi).unwrap().data().to_vec()
    };

    let total = grad_phi(true);
    let data_only = grad_phi(false);
    let constant = pi.ln() - (1.0 - pi).ln();
    for (t, d) in total.iter().zip(&data_only) {
        assert!(
            (t - (d + constant)).abs() <= 1e-10,
            "{t} vs {} + {constant}",
            d
        );
    }
}

fn toy_config(pi: f64, alpha: f64, seed: u64, epochs: usize) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSpec::SyntheticLowRank {
            classes: 2,
            features: 12,
            true_rank: 1,
            samples: 256,
            noise: 0.0,
            data_seed: 33,
        },
        model: ModelSpec {
            input_dims: vec![12],
            layers: vec![LayerSpec::LowRank {
                rows: 2,
                cols: 12,
                rank: 4,
            }],
        },
        train: TrainConfig {
            pi,
            alpha,
            epochs,
            warmup_epochs: 2,
            batch_size: 32,
            learning_rate: 0.01,
            seed,
            ..TrainConfig::default()
        },
        output_dir: "out/test".into(),
    }
}

fn run_toy(cfg: &ExperimentConfig) -> (Trainer, Vec<u8>) {
    let (train_data, _) = config::load_dataset(&cfg.dataset).unwrap();
    let mut rng = Rng::from_seed(cfg.train.seed);
    let model = config::build_model(&cfg.model, &cfg.train, &mut rng).unwrap();
    let mut trainer = Trainer::new(model, cfg.train.clone(), train_data.len()).unwrap();
    let mut sink = Vec::new();
    while trainer.epoch < trainer.cfg.epochs {
        trainer.run_epoch(&train_data, &mut sink).unwrap();
    }
    (trainer, sink)
}

#[test]
fn expected_compression_is_monotone_in_pi() {
    let mut finals = Vec::new();
    for &pi in &[0.5, 0.1, 0.01] {
        let cfg = toy_config(pi, 0.0, 5, 14);
        let (trainer, _) = run_toy(&cfg);
        let rounded = masks::round_masks(&trainer.model.masks);
        let compression = trainer.model.dense_total_count() as f64
            / trainer.model.param_count_with_rounded(&rounded) as f64;
        finals.push((pi, compression));
    }
    assert!(
        finals[0].1 <= finals[1].1 + 1e-12 && finals[1].1 <= finals[2].1 + 1e-12,
        "compression not monotone: {finals:?}"
    );
}

#[test]
fn keep_everything_prior_keeps_every_rank() {
    let cfg = toy_config(0.999, 3.0, 6, 8);
    let (trainer, _) = run_toy(&cfg);
    let rounded = masks::round_masks(&trainer.model.masks);
    assert_eq!(rounded.kept_count(0), 4, "phi {:?}", trainer.model.masks.phi(0));
}

#[test]
fn checkpoint_resume_reproduces_the_metric_trace() {
    let cfg = toy_config(0.1, 0.5, 7, 6);
    let (train_data, _) = config::load_dataset(&cfg.dataset).unwrap();
    let config_text = config::serialize(&cfg);

    // Uninterrupted run.
    let (_, full_log) = run_toy(&cfg);

    // Interrupted: 3 epochs, checkpoint, restore into a fresh trainer.
    let mut rng = Rng::from_seed(cfg.train.seed);
    let model = config::build_model(&cfg.model, &cfg.train, &mut rng).unwrap();
    let mut first = Trainer::new(model, cfg.train.clone(), train_data.len()).unwrap();
    let mut log_a = Vec::new();
    for _ in 0..3 {
        first.run_epoch(&train_data, &mut log_a).unwrap();
    }
    let saved = Checkpoint::capture(&first, config_text);

    let dir = std::env::temp_dir().join(format!("mars-resume-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("mid.ckpt");
    saved.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, saved);

    let mut rng = Rng::from_seed(cfg.train.seed);
    let model = config::build_model(&cfg.model, &cfg.train, &mut rng).unwrap();
    let mut resumed = Trainer::new(model, cfg.train.clone(), train_data.len()).unwrap();
    loaded.restore_into(&mut resumed).unwrap();
    assert_eq!(resumed.epoch, 3);
    let mut log_b = Vec::new();
    while resumed.epoch < resumed.cfg.epochs {
        resumed.run_epoch(&train_data, &mut log_b).unwrap();
    }

    let mut stitched = log_a;
    stitched.extend_from_slice(&log_b);
    assert_eq!(
        String::from_utf8(stitched).unwrap(),
        String::from_utf8(full_log).unwrap()
    );
}

fn mnist_dir() -> Option<PathBuf> {
    let candidate = match std::env::var("MARS_MNIST_DIR") {
        Ok(dir) => PathBuf::from(dir),
        Err(_) => PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"),
    };
    candidate
        .join("train-images-idx3-ubyte")
        .exists()
        .then_some(candidate)
}

#[test]
fn frozen_masks_reduce_to_maximum_likelihood_training() {
    let Some(dir) = mnist_dir() else {
        eprintln!("skipping: MNIST not found (set MARS_MNIST_DIR)");
        return;
    };
    let (train_data, _) = data::load_mnist(&dir).unwrap();
    let subset = train_data.head(2000);

    // All epochs observed here are warm-up epochs: unmasked forward, which
    // equals all-ones masks; pi = 0.5 and a huge prior variance disable the
    // prior terms.
    let spec = ModelSpec {
        input_dims: vec![784],
        layers: vec![
            LayerSpec::TTLinear {
                row_dims: vec![5, 5, 5, 5],
                col_dims: vec![7, 4, 7, 4],
                ranks: vec![8, 8, 8],
            },
            LayerSpec::Relu,
            LayerSpec::TTLinear {
                row_dims: vec![5, 2],
                col_dims: vec![25, 25],
                ranks: vec![8],
            },
        ],
    };
    let train_cfg = TrainConfig {
        pi: 0.5,
        alpha: 0.0,
        core_prior_var: 1e12,
        epochs: 6,
        warmup_epochs: 5,
        batch_size: 128,
        seed: 3,
        ..TrainConfig::default()
    };
    let mut rng = Rng::from_seed(train_cfg.seed);
    let model = config::build_model(&spec, &train_cfg, &mut rng).unwrap();
    let mut trainer = Trainer::new(model, train_cfg, subset.len()).unwrap();
    let mut sink = std::io::sink();
    let mut losses = Vec::new();
    for _ in 0..5 {
        let summary = trainer.run_epoch(&subset, &mut sink).unwrap();
        losses.push(summary.mean_loss);
    }
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "loss not strictly decreasing: {losses:?}");
    }
}
