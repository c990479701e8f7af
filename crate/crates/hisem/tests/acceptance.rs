//! Acceptance gate: ten criteria covering published-score arithmetic,
//! gradient correctness, routing invariants, the curriculum contract,
//! metric oracles, end-to-end overfitting, routing dominance, and
//! bit-level determinism.

use std::collections::HashMap;
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

use hisem::bdam::{attention_bias, bdam_forward, BdamLayerParams, BiTemporalFeatures};
use hisem::data::{build_vocab, synth_generate, GenConfig};
use hisem::decoder::{caption_loss, CaptionBatch, BOS, EOS};
use hisem::hasd::{
    expert_scores, group_constrained_select, moe_forward, routing_loss, HasdParams, MoEConfig,
};
use hisem::metrics::{
    bleu_n, cider_d, meteor_lite, rho_conversion, rouge_l, s_star_m, stem, tokenize,
};
use hisem::model::{record_tensor, HiSemModel, ModelConfig};
use hisem::nn::{init_uniform, Linear};
use hisem::tensor::gradcheck::grad_check;
use hisem::tensor::Tensor;
use hisem::training::{ramp_factor, train_loop, CurriculumConfig, EpochRow, OptimizerState};

const BIN: &str = env!("CARGO_BIN_EXE_hisem");

// ---------------------------------------------------------------- 1

/// Published benchmark rows (BLEU-4, METEOR, ROUGE-L, CIDEr-D, headline
/// mean) for two RSICC datasets; the headline column must be the mean of
/// the four components.
#[test]
fn c01_headline_mean_reproduces_published_rows() {
    let levir: [(&str, f64, f64, f64, f64, f64); 14] = [
        ("RSICCFormer", 62.77, 39.61, 74.12, 134.12, 77.66),
        ("Chg2Cap", 64.39, 40.03, 75.12, 136.61, 79.04),
        ("PSNet", 62.11, 38.80, 73.60, 132.62, 76.78),
        ("CTMTNet", 64.69, 39.49, 74.54, 134.94, 78.42),
        ("Sen", 64.09, 39.59, 74.57, 136.02, 78.57),
        ("SFT", 62.87, 39.93, 74.69, 137.05, 78.64),
        ("Pix4Cap", 63.78, 39.96, 75.12, 136.76, 78.91),
        ("RSCaMa", 65.24, 39.91, 75.24, 136.56, 79.24),
        ("Diffusion-RSCC", 60.90, 37.80, 71.50, 125.60, 73.95),
        ("Mask Approx Net", 64.32, 39.91, 75.67, 137.71, 79.40),
        ("Prompt-CC", 63.54, 38.82, 73.72, 136.44, 78.13),
        ("Chareption", 62.53, 40.38, 74.72, 137.83, 77.58),
        ("KCFI", 65.30, 39.42, 75.47, 138.25, 79.61),
        ("HiSem", 65.82, 40.39, 75.77, 138.86, 80.21),
    ];
    let whu: [(&str, f64, f64, f64, f64, f64); 10] = [
        ("RSICCFormer", 66.54, 42.65, 73.91, 133.44, 79.14),
        ("Chg2Cap", 62.71, 41.46, 77.95, 144.18, 81.58),
        ("PSNet", 60.32, 36.97, 71.60, 130.52, 74.85),
        ("Sen", 61.97, 36.76, 71.70, 133.57, 76.00),
        ("SFT", 60.27, 37.34, 72.63, 134.64, 76.22),
        ("Prompt-CC", 61.45, 36.99, 71.88, 134.50, 76.21),
        ("Diffusion-RSCC", 63.76, 40.18, 73.80, 127.96, 76.43),
        ("Mask Approx Net", 67.73, 43.89, 75.41, 135.31, 80.59),
        ("CTMTNet", 69.00, 45.39, 79.23, 149.40, 85.76),
        ("HiSem", 76.52, 48.77, 82.00, 158.35, 91.41),
    ];
    let mut failures = Vec::new();
    for (dataset, rows) in [("LEVIR-CC", &levir[..]), ("WHU-CDC", &whu[..])] {
        for &(method, b4, met, rl, cd, expected) in rows {
            let got = s_star_m(b4, rl, met, cd);
            if (got - expected).abs() >= 0.01 {
                failures.push(format!(
                    "{dataset}/{method}: mean of components is {got:.3}, row prints {expected}"
                ));
            }
        }
    }
    assert!(
        failures.is_empty(),
        "headline means off by ≥0.01:\n{}",
        failures.join("\n")
    );
}

// ---------------------------------------------------------------- 2

/// Published conversion-efficiency cells: ρ = ΔScore/ΔAcc must match the
/// printed value within 0.01 for every stratum and metric.
#[test]
fn c02_conversion_efficiency_reproduces_published_cells() {
    // (dataset, stratum, acc_pre, acc_gt, [(metric, pre, gt, rho)])
    let cells: Vec<(&str, &str, f64, f64, Vec<(&str, f64, f64, f64)>)> = vec![
        (
            "LEVIR-CC",
            "unchanged",
            96.91,
            100.0,
            vec![
                ("bleu1", 97.22, 100.0, 0.90),
                ("bleu2", 96.80, 100.0, 1.04),
                ("bleu3", 96.57, 100.0, 1.11),
                ("bleu4", 96.41, 100.0, 1.16),
                ("meteor", 75.75, 100.0, 7.85),
                ("rouge_l", 97.55, 100.0, 0.79),
            ],
        ),
        (
            "LEVIR-CC",
            "changed",
            91.06,
            100.0,
            vec![
                ("bleu1", 77.89, 79.69, 0.20),
                ("bleu2", 63.94, 65.96, 0.23),
                ("bleu3", 51.15, 52.95, 0.20),
                ("bleu4", 40.41, 41.78, 0.15),
                ("meteor", 25.92, 27.05, 0.13),
                ("rouge_l", 53.96, 56.32, 0.26),
                ("cider_d", 65.12, 69.54, 0.49),
                ("s_star_m", 46.35, 48.67, 0.26),
            ],
        ),
        (
            "LEVIR-CC",
            "all",
            93.99,
            100.0,
            vec![
                ("bleu1", 86.60, 88.53, 0.32),
                ("bleu2", 78.74, 80.91, 0.36),
                ("bleu3", 71.73, 73.82, 0.35),
                ("bleu4", 65.82, 67.69, 0.31),
                ("meteor", 40.39, 41.89, 0.25),
                ("rouge_l", 75.77, 78.17, 0.40),
                ("cider_d", 138.86, 144.63, 0.96),
                ("s_star_m", 80.21, 83.09, 0.48),
            ],
        ),
        (
            "WHU-CDC",
            "unchanged",
            97.40,
            100.0,
            vec![
                ("bleu1", 98.07, 100.0, 0.74),
                ("bleu2", 97.85, 100.0, 0.83),
                ("bleu3", 97.77, 100.0, 0.86),
                ("bleu4", 97.74, 100.0, 0.87),
                ("meteor", 77.94, 100.0, 8.48),
                ("rouge_l", 97.89, 100.0, 0.81),
            ],
        ),
        (
            "WHU-CDC",
            "changed",
            80.08,
            100.0,
            vec![
                ("bleu1", 65.51, 70.97, 0.27),
                ("bleu2", 50.92, 57.42, 0.33),
                ("bleu3", 37.89, 43.80, 0.30),
                ("bleu4", 28.49, 33.15, 0.23),
                ("meteor", 22.45, 25.12, 0.13),
                ("rouge_l", 47.78, 53.66, 0.30),
                ("cider_d", 58.98, 71.49, 0.63),
                ("s_star_m", 39.42, 45.86, 0.32),
            ],
        ),
        (
            "WHU-CDC",
            "all",
            91.91,
            100.0,
            vec![
                ("bleu1", 87.49, 90.37, 0.36),
                ("bleu2", 82.89, 86.16, 0.40),
                ("bleu3", 79.17, 82.26, 0.38),
                ("bleu4", 76.52, 79.28, 0.34),
                ("meteor", 48.77, 51.06, 0.28),
                ("rouge_l", 82.00, 85.30, 0.41),
                ("cider_d", 158.35, 167.27, 1.10),
                ("s_star_m", 91.41, 95.73, 0.53),
            ],
        ),
    ];
    for (dataset, stratum, acc_pre, acc_gt, metrics) in cells {
        for (metric, pre, gt, expected) in metrics {
            let got = rho_conversion(pre, gt, acc_pre, acc_gt).unwrap();
            assert!(
                (got - expected).abs() < 0.01,
                "{dataset}/{stratum}/{metric}: rho {got:.4} vs published {expected}"
            );
        }
    }
}

// ---------------------------------------------------------------- 3

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Deterministic mixing mask so a non-scalar op output becomes a scalar
/// loss with nontrivial weights on every coordinate. The small final
/// scale keeps central-difference cancellation noise (∝ ulp(|f|)/2ε)
/// below the comparison floor on near-zero-gradient coordinates.
fn mix(t: &Tensor) -> Tensor {
    let mask: Vec<f64> = (0..t.len()).map(|i| 0.3 * ((i % 5) as f64 - 2.0) + 0.1).collect();
    t.mul_const(&mask).unwrap().sum_all().scale(0.05)
}

fn op_check(name: &str, shapes: &[&[usize]], f: impl Fn(&[Tensor]) -> Tensor) {
    for seed in [1u64, 2, 3] {
        let mut rng = rng_for(seed.wrapping_mul(0x9e3779b9) ^ name.len() as u64);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| init_uniform(&mut rng, s, 1)).collect();
        let err = grad_check(&f, &inputs, 1e-4);
        assert!(err < 1e-4, "{name} seed {seed}: rel err {err}");
    }
}

#[test]
fn c03_gradient_suite_ops() {
    op_check("matmul", &[&[3, 4], &[4, 2]], |x| {
        mix(&x[0].matmul(&x[1]).unwrap())
    });
    op_check("transpose", &[&[3, 4]], |x| mix(&x[0].transpose().unwrap()));
    op_check("add", &[&[3, 4], &[3, 4]], |x| mix(&x[0].add(&x[1]).unwrap()));
    op_check("sub", &[&[3, 4], &[3, 4]], |x| mix(&x[0].sub(&x[1]).unwrap()));
    op_check("mul", &[&[3, 4], &[3, 4]], |x| mix(&x[0].mul(&x[1]).unwrap()));
    // shifted away from the |·| and relu kinks
    op_check("abs", &[&[3, 4]], |x| mix(&x[0].affine(1.0, 3.0).abs()));
    op_check("relu", &[&[3, 4]], |x| mix(&x[0].affine(1.0, 3.0).relu()));
    op_check("sigmoid", &[&[3, 4]], |x| mix(&x[0].sigmoid()));
    op_check("silu", &[&[3, 4]], |x| mix(&x[0].silu()));
    op_check("affine", &[&[3, 4]], |x| mix(&x[0].affine(0.7, -0.3)));
    op_check("scale", &[&[3, 4]], |x| mix(&x[0].scale(1.3)));
    op_check("mul_scalar_t", &[&[3, 4], &[1]], |x| {
        mix(&x[0].mul_scalar_t(&x[1]).unwrap())
    });
    op_check("softmax_lastdim", &[&[2, 5]], |x| mix(&x[0].softmax_lastdim()));
    op_check("layer_norm", &[&[3, 4], &[4], &[4]], |x| {
        mix(&x[0].layer_norm(&x[1].affine(1.0, 2.0), &x[2], 1e-5).unwrap())
    });
    op_check("conv3x3", &[&[3, 3, 2], &[3, 3, 2, 2], &[2]], |x| {
        mix(&x[0].conv3x3(&x[1], &x[2]).unwrap())
    });
    op_check("sum_all", &[&[3, 4]], |x| x[0].sum_all().scale(0.05));
    op_check("add_rowvec", &[&[3, 4], &[4]], |x| {
        mix(&x[0].add_rowvec(&x[1]).unwrap())
    });
    op_check("concat_cols", &[&[3, 2], &[3, 3]], |x| {
        mix(&x[0].concat_cols(&x[1]).unwrap())
    });
    op_check("mean_rows", &[&[3, 4]], |x| mix(&x[0].mean_rows().unwrap()));
    op_check("sum_lastdim", &[&[3, 4]], |x| mix(&x[0].sum_lastdim().unwrap()));
    op_check("div_colvec", &[&[3, 4], &[3, 1]], |x| {
        mix(&x[0].div_colvec(&x[1].affine(1.0, 3.0)).unwrap())
    });
    op_check("mul_colvec", &[&[3, 4], &[3, 1]], |x| {
        mix(&x[0].mul_colvec(&x[1]).unwrap())
    });
    op_check("slice_col", &[&[3, 4]], |x| mix(&x[0].slice_col(2).unwrap()));
    op_check("mul_const", &[&[3, 4]], |x| {
        mix(&x[0].mul_const(&vec![0.5; 12]).unwrap())
    });
    op_check("add_const", &[&[3, 4]], |x| {
        mix(&x[0].add_const(&vec![0.25; 12]).unwrap())
    });
    op_check("embedding", &[&[5, 3]], |x| {
        mix(&x[0].embedding(&[0, 2, 2, 4]).unwrap())
    });
    op_check("slice_rows", &[&[4, 3]], |x| {
        mix(&x[0].slice_rows(1, 2).unwrap())
    });
    op_check("cross_entropy_sum", &[&[3, 5]], |x| {
        x[0].cross_entropy_sum(&[1, 0, 4], &[1.0, 1.0, 1.0]).unwrap().scale(0.05)
    });
    op_check("reshape", &[&[3, 4]], |x| mix(&x[0].reshape(&[2, 6]).unwrap()));
}

#[test]
fn c03_gradient_suite_composites() {
    // three-layer differential-attention stack
    for seed in [5u64, 6, 7] {
        let mut rng = rng_for(seed);
        let d = 3;
        let layers: Vec<BdamLayerParams> =
            (0..3).map(|_| BdamLayerParams::new(&mut rng, d, d)).collect();
        let a = init_uniform(&mut rng, &[4, d], 1);
        let b = init_uniform(&mut rng, &[4, d], 1);
        let err = grad_check(
            |xs| {
                let x = BiTemporalFeatures::new(xs[0].clone(), xs[1].clone(), (2, 2)).unwrap();
                let y = bdam_forward(&x, &layers).unwrap();
                y.f_t1.sum_all().add(&y.f_t2.sum_all()).unwrap().scale(1.0 / 128.0)
            },
            &[a, b],
            1e-4,
        );
        assert!(err < 1e-4, "bdam stack seed {seed}: rel err {err}");
    }

    // routed changed path: scorer → sparse mixture
    for seed in [8u64, 9, 10] {
        let mut rng = rng_for(seed);
        let d = 4;
        let cfg = MoEConfig {
            expert_hidden_dim: 4,
            ..MoEConfig::default()
        };
        let p = HasdParams::new(&mut rng, d, cfg).unwrap();
        let f_h = init_uniform(&mut rng, &[4, d], 1);
        let err = grad_check(
            |xs| {
                let s = expert_scores(&xs[0], &p.w_c).unwrap();
                let routing = group_constrained_select(&s, &p.cfg).unwrap();
                moe_forward(&xs[0], &s, &routing, &p)
                    .unwrap()
                    .sum_all()
                    .scale(1.0 / 64.0)
            },
            &[f_h],
            1e-4,
        );
        assert!(err < 1e-4, "changed path seed {seed}: rel err {err}");
    }

    // one decoder layer through the caption loss
    for seed in [11u64, 12, 13] {
        let mut rng = rng_for(seed);
        let p = hisem::decoder::DecoderParams::new(&mut rng, 7, 3, 8, 1, 6);
        let caps = CaptionBatch::new(vec![vec![BOS, 4, 5, EOS]], 7).unwrap();
        let visual = init_uniform(&mut rng, &[4, 3], 1);
        let err = grad_check(
            |xs| {
                let logits = hisem::decoder::decoder_forward(&xs[0], &caps, &p).unwrap();
                caption_loss(&logits, &caps).unwrap().scale(0.02)
            },
            &[visual],
            1e-4,
        );
        assert!(err < 1e-4, "decoder seed {seed}: rel err {err}");
    }

    // full model loss
    for seed in [14u64, 15, 16] {
        let mut rng = rng_for(seed);
        let cfg = ModelConfig {
            bdam_depth: 2,
            bdam_hidden: 2,
            decoder_hidden: 4,
            moe: MoEConfig {
                expert_hidden_dim: 4,
                ..MoEConfig::default()
            },
            ..ModelConfig::desk(2, (2, 2), 7)
        };
        let m = HiSemModel::new(&mut rng, cfg).unwrap();
        let caps = CaptionBatch::new(vec![vec![BOS, 4, 6, EOS]], 7).unwrap();
        let a = init_uniform(&mut rng, &[4, 2], 1);
        let b = init_uniform(&mut rng, &[4, 2], 1);
        let err = grad_check(
            |xs| {
                let out = m.forward(&xs[0], &xs[1], &caps, Some(1)).unwrap();
                let l_cap = caption_loss(&out.caption_logits, &caps).unwrap();
                let l_cls = routing_loss(&out.routing_logits, 1).unwrap();
                l_cap.add(&l_cls.scale(0.8)).unwrap().scale(0.02)
            },
            &[a, b],
            1e-4,
        );
        assert!(err < 1e-4, "full model seed {seed}: rel err {err}");
    }
}

// ---------------------------------------------------------------- 4

#[test]
fn c04_routing_invariants_thousand_batches() {
    let d = 6;
    let cfg = MoEConfig {
        expert_hidden_dim: 5,
        ..MoEConfig::default()
    };
    let per_group = cfg.num_experts / cfg.num_groups;
    let mut rng = rng_for(404);
    let p = HasdParams::new(&mut rng, d, cfg).unwrap();
    for batch in 0..1000 {
        let l = 1 + batch % 5;
        let f_h = init_uniform(&mut rng, &[l, d], 1);
        let s = expert_scores(&f_h, &p.w_c).unwrap();
        let routing = group_constrained_select(&s, &p.cfg).unwrap();
        let scores = s.to_vec();
        for (n, picks) in routing.iter().enumerate() {
            // (a) normalized weights
            let wsum: f64 = picks.iter().map(|&(_, w)| w).sum();
            assert!((wsum - 1.0).abs() < 1e-9, "batch {batch} token {n}: sum {wsum}");
            // (b) exactly k active experts
            assert_eq!(picks.len(), p.cfg.experts_topk, "batch {batch} token {n}");
            // (c) brute-force group membership: every active expert lies
            // in one of the top-k_g groups by max score
            let row = &scores[n * p.cfg.num_experts..(n + 1) * p.cfg.num_experts];
            let mut group_max: Vec<(usize, f64)> = (0..p.cfg.num_groups)
                .map(|g| {
                    let m = row[g * per_group..(g + 1) * per_group]
                        .iter()
                        .cloned()
                        .fold(f64::NEG_INFINITY, f64::max);
                    (g, m)
                })
                .collect();
            group_max.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let allowed: Vec<usize> =
                group_max[..p.cfg.groups_topk].iter().map(|&(g, _)| g).collect();
            for &(e, _) in picks {
                assert!(
                    allowed.contains(&(e / per_group)),
                    "batch {batch} token {n}: expert {e} outside groups {allowed:?}"
                );
            }
        }
        // (d) sparse mixture equals the dense oracle
        let y = moe_forward(&f_h, &s, &routing, &p).unwrap().to_vec();
        let mut oracle = vec![0.0; l * d];
        for (n, picks) in routing.iter().enumerate() {
            let x = f_h.slice_rows(n, 1).unwrap();
            let total: f64 = picks.iter().map(|&(e, _)| scores[n * p.cfg.num_experts + e]).sum();
            for &(e, _) in picks {
                let alpha = scores[n * p.cfg.num_experts + e] / total;
                let out = p.experts[e].forward(&x).unwrap().to_vec();
                for (j, v) in out.iter().enumerate() {
                    oracle[n * d + j] += alpha * v;
                }
            }
            for sh in &p.shared {
                let out = sh.forward(&x).unwrap().to_vec();
                for (j, v) in out.iter().enumerate() {
                    oracle[n * d + j] += v;
                }
            }
        }
        for (a, b) in y.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12, "batch {batch}: {a} vs oracle {b}");
        }
    }
}

// ---------------------------------------------------------------- 5

#[test]
fn c05_tied_mode_fixed_point() {
    let d = 6;
    let mut rng = rng_for(55);
    let layers: Vec<BdamLayerParams> =
        (0..3).map(|_| BdamLayerParams::new_tied(&mut rng, d, d)).collect();
    let f = init_uniform(&mut rng, &[9, d], 1);
    let x = BiTemporalFeatures::new(f.clone(), f.clone(), (3, 3)).unwrap();
    let y = bdam_forward(&x, &layers).unwrap();
    let diff: Vec<f64> = y
        .f_t1
        .to_vec()
        .iter()
        .zip(y.f_t2.to_vec())
        .map(|(a, b)| (a - b).abs())
        .collect();
    let max = diff.iter().cloned().fold(0.0f64, f64::max);
    assert!(max < 1e-10, "max |F̃_T1−F̃_T2| = {max}");

    // zero discrepancy gives a bias of exactly zero
    let proj = Linear::new(&mut rng, d, 1, false);
    let alpha = hisem::nn::ones_param(&[1]);
    let zero = Tensor::from_vec(vec![0.0; 9 * d], &[9, d]);
    let bias = attention_bias(&zero, &proj, &alpha).unwrap();
    assert!(bias.to_vec().iter().all(|&v| v == 0.0));
}

// ---------------------------------------------------------------- 6

#[test]
fn c06_curriculum_contract() {
    let cfg = CurriculumConfig {
        total_epochs: 30,
        warmup_epochs: 6,
        ..CurriculumConfig::default()
    };
    // ramp table: zero through warm-up, 1 at the end, monotone
    for e in 0..cfg.warmup_epochs {
        assert_eq!(ramp_factor(e, &cfg).unwrap(), 0.0);
    }
    assert_eq!(ramp_factor(cfg.total_epochs, &cfg).unwrap(), 1.0);
    let mut prev = -1.0;
    for e in 0..=cfg.total_epochs {
        let a = ramp_factor(e, &cfg).unwrap();
        assert!(a >= prev && (0.0..=1.0).contains(&a));
        prev = a;
    }

    // gradient through the classification-logit path: blocked during
    // warm-up, active after (λ = 0.8)
    let mut rng = rng_for(66);
    let model_cfg = ModelConfig {
        bdam_depth: 1,
        bdam_hidden: 2,
        decoder_hidden: 4,
        moe: MoEConfig {
            expert_hidden_dim: 4,
            ..MoEConfig::default()
        },
        ..ModelConfig::desk(2, (2, 2), 7)
    };
    let m = HiSemModel::new(&mut rng, model_cfg).unwrap();
    let caps = CaptionBatch::new(vec![vec![BOS, 4, 5, EOS]], 7).unwrap();
    let a = init_uniform(&mut rng, &[4, 2], 1);
    let b = init_uniform(&mut rng, &[4, 2], 1);
    let w_g = m
        .params()
        .into_iter()
        .find(|(n, _)| n == "hasd.w_g")
        .unwrap()
        .1;

    let loss_at = |epoch: usize| {
        let out = m.forward(&a, &b, &caps, Some(1)).unwrap();
        let l_cap = caption_loss(&out.caption_logits, &caps).unwrap();
        let logits = if epoch < cfg.warmup_epochs {
            out.routing_logits.detach()
        } else {
            out.routing_logits
        };
        let l_cls = routing_loss(&logits, 1).unwrap();
        hisem::training::total_loss(&l_cap, &l_cls, epoch, &cfg).unwrap()
    };

    for (epoch, expect_grad) in [(2usize, false), (30usize, true)] {
        for (_, p) in m.params() {
            p.zero_grad();
        }
        loss_at(epoch).backward().unwrap();
        let g = w_g.grad_vec().unwrap_or_else(|| vec![0.0; w_g.len()]);
        let norm: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if expect_grad {
            assert!(norm > 1e-8, "epoch {epoch}: expected nonzero routing grad");
        } else {
            assert_eq!(norm, 0.0, "epoch {epoch}: routing grad leaked: {norm}");
        }

        // finite-difference probe on one coordinate of the scorer
        let base = w_g.to_vec();
        let l0 = loss_at(epoch).item();
        let mut bumped = base.clone();
        bumped[0] += 1e-3;
        w_g.set_data(&bumped);
        let l1 = loss_at(epoch).item();
        w_g.set_data(&base);
        if expect_grad {
            assert!((l1 - l0).abs() > 1e-10, "epoch {epoch}: loss flat after warm-up");
        } else {
            assert_eq!(l1, l0, "epoch {epoch}: loss moved during warm-up");
        }
    }
}

// ---------------------------------------------------------------- 7

/// Brute-force TF-IDF caption-similarity oracle, written independently
/// of the library implementation: string-keyed maps, explicit vectors.
fn cider_oracle(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> f64 {
    fn grams(tokens: &[String], n: usize) -> HashMap<String, f64> {
        let mut m = HashMap::new();
        if tokens.len() >= n {
            for w in tokens.windows(n) {
                *m.entry(w.join(" ")).or_insert(0.0) += 1.0;
            }
        }
        m
    }
    let n_imgs = refs.len() as f64;
    let mut total = 0.0;
    for order in 1..=4 {
        let mut df: HashMap<String, f64> = HashMap::new();
        for rs in refs {
            let mut seen: Vec<String> = Vec::new();
            for r in rs {
                for g in grams(r, order).into_keys() {
                    if !seen.contains(&g) {
                        seen.push(g);
                    }
                }
            }
            for g in seen {
                *df.entry(g).or_insert(0.0) += 1.0;
            }
        }
        let idf =
            |g: &str| n_imgs.ln() - df.get(g).copied().unwrap_or(0.0).max(1.0).ln();
        let mut order_sum = 0.0;
        for (c, rs) in cands.iter().zip(refs) {
            let cg = grams(c, order);
            let cnorm: f64 = cg.iter().map(|(g, k)| (k * idf(g)).powi(2)).sum::<f64>().sqrt();
            let mut img = 0.0;
            for r in rs {
                let rg = grams(r, order);
                let rnorm: f64 =
                    rg.iter().map(|(g, k)| (k * idf(g)).powi(2)).sum::<f64>().sqrt();
                if cnorm == 0.0 || rnorm == 0.0 {
                    continue;
                }
                let mut dot = 0.0;
                let mut keys: Vec<&String> = cg.keys().collect();
                keys.sort();
                for g in keys {
                    if let Some(rk) = rg.get(g) {
                        let w = idf(g);
                        dot += cg[g].min(*rk) * w * rk * w;
                    }
                }
                let delta = c.len() as f64 - r.len() as f64;
                img += (-delta * delta / 72.0).exp() * dot / (cnorm * rnorm);
            }
            order_sum += img / rs.len() as f64;
        }
        total += order_sum / cands.len() as f64;
    }
    10.0 * total / 4.0
}

#[test]
fn c07_metric_oracles() {
    let pair = |c: &str, rs: &[&str]| {
        (
            vec![c.to_string()],
            vec![rs.iter().map(|s| s.to_string()).collect::<Vec<_>>()],
        )
    };

    // hand-computed single-pair scores
    let (c, r) = pair("the the the", &["the cat"]);
    assert!((bleu_n(&c, &r, 1).unwrap() - 100.0 / 3.0).abs() < 1e-4);
    let (c, r) = pair("a road appears in the corner", &["a road appears in the corner"]);
    assert!((bleu_n(&c, &r, 4).unwrap() - 100.0).abs() < 1e-4);
    let (c, r) = pair("a b", &["a b c d"]);
    // brevity penalty exp(1 − 4/2)
    assert!((bleu_n(&c, &r, 1).unwrap() - 100.0 * (-1.0f64).exp()).abs() < 1e-4);
    let (c, r) = pair("a b c", &["a c d"]);
    // LCS 2: P = R = 2/3, F = (1+1.44)·(2/3)²/((2/3)+1.44·(2/3))
    assert!((rouge_l(&c, &r).unwrap() - 200.0 / 3.0).abs() < 1e-4);
    let (c, r) = pair("a road appears here", &["a road appears here"]);
    // m=4, chunks=1: F=1, penalty 0.5·(1/4)³
    assert!((meteor_lite(&c, &r).unwrap() - 100.0 * (1.0 - 0.5 / 64.0)).abs() < 1e-4);
    assert_eq!(stem("disappears"), "disappear");
    assert_eq!(stem("boxes"), "box");
    assert_eq!(stem("running"), "run");

    // exhaustive brute-force comparison over a seeded corpus family
    let vocab = ["a", "road", "house", "appears", "the", "in", "corner", "now"];
    let mut rng = rng_for(707);
    for corpus in 0..200 {
        let n_sents = rng.gen_range(1..=4);
        let sentence = |rng: &mut ChaCha8Rng| -> String {
            let len = rng.gen_range(1..=6);
            (0..len)
                .map(|_| vocab[rng.gen_range(0..vocab.len())])
                .collect::<Vec<_>>()
                .join(" ")
        };
        let cands: Vec<String> = (0..n_sents).map(|_| sentence(&mut rng)).collect();
        let refs: Vec<Vec<String>> = (0..n_sents)
            .map(|_| {
                let k = rng.gen_range(1..=3);
                (0..k).map(|_| sentence(&mut rng)).collect()
            })
            .collect();
        let got = cider_d(&cands, &refs).unwrap();
        let want = cider_oracle(
            &cands.iter().map(|c| tokenize(c)).collect::<Vec<_>>(),
            &refs
                .iter()
                .map(|rs| rs.iter().map(|r| tokenize(r)).collect())
                .collect::<Vec<_>>(),
        );
        assert!(
            (got - want).abs() < 1e-10,
            "corpus {corpus}: {got} vs oracle {want}"
        );
    }
}

// ---------------------------------------------------------------- 8

#[test]
fn c08_end_to_end_overfit() {
    let t0 = std::time::Instant::now();
    let records = synth_generate(50, &GenConfig::default(), 42).unwrap();
    let captions: Vec<String> = records.iter().flat_map(|r| r.captions.clone()).collect();
    let vocab = build_vocab(&captions, 1).unwrap();
    let mut rng = rng_for(7);
    let model = HiSemModel::new(&mut rng, ModelConfig::desk(64, (7, 7), vocab.len())).unwrap();
    let cfg = CurriculumConfig {
        total_epochs: 300,
        warmup_epochs: 10,
        lr: 1e-3,
        batch_size: 8,
        seed: 7,
        ..CurriculumConfig::default()
    };
    let mut opt = OptimizerState::new(cfg.lr);
    let stop = |row: &EpochRow| row.caption_loss < 0.03 && row.router_accuracy == 100.0;
    let out = train_loop(
        &model,
        &records,
        &vocab,
        &cfg,
        &mut opt,
        0,
        None,
        Some(&stop),
    )
    .unwrap();
    assert_eq!(out.final_router_accuracy, 100.0, "router accuracy");
    assert!(
        out.final_caption_loss < 0.05,
        "caption loss {}",
        out.final_caption_loss
    );

    let mut preds = Vec::new();
    let mut refs = Vec::new();
    for r in &records {
        let f1 = record_tensor(&r.f_t1, r.h, r.w, r.d);
        let f2 = record_tensor(&r.f_t2, r.h, r.w, r.d);
        let (caption, _) = model.describe(&f1, &f2, &vocab, None).unwrap();
        preds.push(caption);
        refs.push(r.captions.clone());
    }
    let b4 = bleu_n(&preds, &refs, 4).unwrap();
    assert!(b4 > 90.0, "training-set BLEU-4 {b4}");
    println!(
        "overfit: {} epochs, cap loss {:.4}, BLEU-4 {:.2}, {:?}",
        out.report.rows.len(),
        out.final_caption_loss,
        b4,
        t0.elapsed()
    );
}

// ---------------------------------------------------------------- 9

fn run_ok(args: &[&str]) -> String {
    let out = Command::new(BIN).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "hisem {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn c09_ground_truth_routing_dominates() {
    let dir = tempdir().unwrap();
    let root = dir.path();
    let gen = GenConfig {
        h: 3,
        w: 3,
        d: 16,
        ..GenConfig::default()
    };
    let train = root.join("train.jsonl");
    hisem::data::save_dataset(&synth_generate(40, &gen, 11).unwrap(), &train).unwrap();

    let out_dir = root.join("out");
    let cfg = serde_json::json!({
        "d": 16, "grid_h": 3, "grid_w": 3,
        "bdam_depth": 2, "bdam_hidden": 16,
        "decoder_hidden": 32, "n_max": 16,
        "moe": {"expert_hidden_dim": 16},
        "curriculum": {"total_epochs": 40, "warmup_epochs": 5, "lr": 1e-3, "batch_size": 8},
        "data": train, "out_dir": out_dir, "seed": 11
    });
    let cfg_path = root.join("cfg.json");
    std::fs::write(&cfg_path, cfg.to_string()).unwrap();
    run_ok(&["train", "--config", cfg_path.to_str().unwrap()]);

    // raise held-out noise until the router starts missing
    let ckpt = out_dir.join("model.ckpt");
    let held = root.join("held.jsonl");
    let mut pre: Option<serde_json::Value> = None;
    for noise in [1.0, 2.0, 3.0, 4.0, 6.0] {
        let g = GenConfig {
            noise_amp: noise,
            ..gen
        };
        hisem::data::save_dataset(&synth_generate(100, &g, 99).unwrap(), &held).unwrap();
        let _ = std::fs::remove_file(out_dir.join("eval_pre.json"));
        let _ = std::fs::remove_file(out_dir.join("eval_gt.json"));
        run_ok(&[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            held.to_str().unwrap(),
            "--routing",
            "pre",
        ]);
        let doc: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(out_dir.join("eval_pre.json")).unwrap(),
        )
        .unwrap();
        let acc = doc["reports"][0]["router_accuracy"].as_f64().unwrap();
        if acc < 100.0 {
            pre = Some(doc);
            break;
        }
    }
    let pre = pre.expect("router never dropped below 100% accuracy");
    run_ok(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        held.to_str().unwrap(),
        "--routing",
        "gt",
    ]);
    let gt: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("eval_gt.json")).unwrap())
            .unwrap();
    assert_eq!(gt["reports"][0]["router_accuracy"].as_f64().unwrap(), 100.0);
    let s_pre = pre["reports"][0]["s_star_m"].as_f64().unwrap();
    let s_gt = gt["reports"][0]["s_star_m"].as_f64().unwrap();
    assert!(
        s_gt >= s_pre,
        "ground-truth routing S*_m {s_gt} below predicted {s_pre}"
    );
}

// ---------------------------------------------------------------- 10

#[test]
fn c10_training_is_byte_deterministic() {
    let dir = tempdir().unwrap();
    let root = dir.path();
    let gen = GenConfig {
        h: 3,
        w: 3,
        d: 8,
        ..GenConfig::default()
    };
    let data = root.join("data.jsonl");
    hisem::data::save_dataset(&synth_generate(10, &gen, 5).unwrap(), &data).unwrap();

    for run in ["a", "b"] {
        let out_dir = root.join(run);
        let cfg = serde_json::json!({
            "d": 8, "grid_h": 3, "grid_w": 3,
            "bdam_depth": 2, "bdam_hidden": 8,
            "decoder_hidden": 16, "n_max": 16,
            "moe": {"expert_hidden_dim": 8},
            "curriculum": {"total_epochs": 4, "warmup_epochs": 1, "batch_size": 4},
            "data": data, "out_dir": out_dir, "seed": 13
        });
        let cfg_path = root.join(format!("cfg_{run}.json"));
        std::fs::write(&cfg_path, cfg.to_string()).unwrap();
        run_ok(&["train", "--config", cfg_path.to_str().unwrap()]);
    }
    for file in ["model.ckpt", "report.json", "report.csv", "vocab.txt"] {
        let a = std::fs::read(root.join("a").join(file)).unwrap();
        let b = std::fs::read(root.join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
}
