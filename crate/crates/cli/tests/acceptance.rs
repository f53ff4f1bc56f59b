//! Acceptance suite. Each test exercises one gate criterion end to end and
//! prints a single PASS line with the measured numbers; failures carry the
//! same numbers in the panic message. The expensive cross-validation runs
//! are shared between criteria through lazy fixtures.

use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use cafo_core::data::Benchmark;
use cafo_core::harness::{
    averaged_gi_rank, cross_validate, fold_agreement, gi_consistency, pseudo_experiment, roar,
    RunRecord, TrainConfig,
};
use cafo_core::metrics::{
    abc, calinski_harabasz, cwri, da_at_20, drop_in_accuracy, global_importance, gt_agreement,
    kendall_tau_b, rank_correlations, spearman_rho, weighted_drop, wda_weights, GtVariant,
    RoarCurve,
};
use cafo_core::model::{model_forward, ModelParams, ModelVars};
use cafo_core::qr::{qr_decompose, qr_ortho_loss, qr_ortho_loss_graph, strict_upper_count};
use cafo_core::rng::seed_stream;
use cafo_core::synth::{gen_squidgame, PseudoKind, SquidGameConfig};
use cafo_core::tensor::{Graph, Tensor, Var};
use rand::Rng;

/// Epochs for the criterion-4/5/8 cross-validation runs.
const CV_EPOCHS: usize = 6;
const CV_BATCH: usize = 32;

fn pass(criterion: usize, detail: &str) {
    println!("[PASS] criterion {}: {}", criterion, detail);
}

// ----------------------------------------------------------------------
// shared fixtures
// ----------------------------------------------------------------------

struct CvFixture {
    bench: Benchmark,
    lambda1: Vec<RunRecord>,
    lambda0: Vec<RunRecord>,
}

fn cv_fixture() -> &'static CvFixture {
    static FIXTURE: OnceLock<CvFixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let bench = gen_squidgame(&SquidGameConfig {
            n_per_class: 2000,
            ..SquidGameConfig::default()
        })
        .expect("benchmark generation");
        let cfg = TrainConfig {
            epochs: CV_EPOCHS,
            batch_size: CV_BATCH,
            lambda: 1.0,
            ..TrainConfig::default()
        };
        let lambda1 = cross_validate(&bench.train, &bench.test, &cfg).expect("lambda=1 runs");
        let cfg0 = TrainConfig { lambda: 0.0, ..cfg };
        let lambda0 = cross_validate(&bench.train, &bench.test, &cfg0).expect("lambda=0 runs");
        CvFixture { bench, lambda1, lambda0 }
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// ----------------------------------------------------------------------
// criterion 1: gradient correctness of the model loss and the QR loss
// ----------------------------------------------------------------------

const FD_H: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

/// Central-difference check of d(scalar f)/d(inputs); the oracle evaluates
/// only the forward path.
fn max_fd_error(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let eval = |tensors: &[Tensor]| -> f64 {
        let mut g = Graph::inference();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).data()[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (ti, t) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[ti]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[ti].data_mut()[i] += FD_H;
            minus[ti].data_mut()[i] -= FD_H;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_H);
            let an = analytic.data()[i];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn criterion_1_gradient_correctness() {
    let start = Instant::now();
    let mut rng = seed_stream(4242, 1);
    let cfg = cafo_core::model::ModelConfig {
        depca: cafo_core::model::DepCaConfig { gamma: 2, kernel_size: 3, stride: 1, padding: 1 },
        backbone: cafo_core::model::BackboneConfig {
            conv_blocks: vec![cafo_core::model::ConvBlock {
                out_channels: 3,
                kernel_size: 3,
                stride: 2,
            }],
            hidden_width: None,
            num_classes: 3,
        },
    };
    let mut worst_model: f64 = 0.0;
    for trial in 0..10u64 {
        let mut params = ModelParams::init(&cfg, 3, 9000 + trial).unwrap();
        for t in params.tensors.iter_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        let stack_data: Vec<f64> = (0..2 * 3 * 36).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let stack = Tensor::new(vec![2, 3, 6, 6], stack_data).unwrap();
        let labels = vec![(trial % 3) as usize, ((trial + 2) % 3) as usize];
        let cfg_ref = cfg.clone();
        let f = move |g: &mut Graph, vars: &[Var]| -> Var {
            let stack_var = g.constant(stack.clone());
            let shell =
                ModelParams { cfg: cfg_ref.clone(), in_features: 3, tensors: vec![] };
            let mv = ModelVars { vars: vars.to_vec() };
            let (logits, _) = model_forward(g, stack_var, &shell, &mv).unwrap();
            g.softmax_cross_entropy(logits, &labels).unwrap()
        };
        worst_model = worst_model.max(max_fd_error(&params.tensors.clone(), &f));
    }
    let mut worst_qr: f64 = 0.0;
    for _ in 0..10 {
        let a = loop {
            let data: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let cand = Tensor::new(vec![3, 5], data).unwrap();
            let f = qr_decompose(&cand).unwrap();
            if (0..3).all(|i| f.r.at2(i, i).abs() > 1e-3) {
                break cand;
            }
        };
        worst_qr =
            worst_qr.max(max_fd_error(&[a], &|g, v| qr_ortho_loss_graph(g, v[0]).unwrap()));
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(
        worst_model < FD_TOL && worst_qr < FD_TOL,
        "criterion 1 FAILED: model rel err {worst_model:.3e}, qr rel err {worst_qr:.3e}"
    );
    assert!(elapsed < 60.0, "criterion 1 FAILED: runtime {elapsed:.1}s exceeds 1 minute");
    pass(
        1,
        &format!(
            "model loss max rel err {worst_model:.2e}, qr loss max rel err {worst_qr:.2e}, {elapsed:.1}s (10 instances each, h=1e-5, tol 1e-4)"
        ),
    );
}

// ----------------------------------------------------------------------
// criterion 2: QR factorization against a brute-force oracle
// ----------------------------------------------------------------------

/// Classical Gram-Schmidt with explicit projection sums; independent of the
/// modified in-place elimination under test.
fn brute_force_loss(a: &Tensor) -> f64 {
    let (rows, cols) = (a.shape()[0], a.shape()[1]);
    let col = |j: usize| -> Vec<f64> { (0..rows).map(|i| a.at2(i, j)).collect() };
    let p = rows.min(cols);
    let mut q: Vec<Vec<f64>> = Vec::new();
    for i in 0..p {
        let ai = col(i);
        let mut residual = ai.clone();
        for qk in &q {
            let proj: f64 = qk.iter().zip(&ai).map(|(x, y)| x * y).sum();
            for (r, qv) in residual.iter_mut().zip(qk) {
                *r -= proj * qv;
            }
        }
        let norm = residual.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            q.push(vec![0.0; rows]);
        } else {
            q.push(residual.into_iter().map(|x| x / norm).collect());
        }
    }
    let mut acc = 0.0;
    for (i, qi) in q.iter().enumerate() {
        for j in (i + 1)..cols {
            let aj = col(j);
            let rij: f64 = qi.iter().zip(&aj).map(|(x, y)| x * y).sum();
            acc += rij.abs();
        }
    }
    acc / strict_upper_count(rows, cols) as f64
}

#[test]
fn criterion_2_qr_oracle_equivalence() {
    let mut rng = seed_stream(4242, 2);
    let mut checked = 0;
    let mut max_ortho: f64 = 0.0;
    let mut max_recon: f64 = 0.0;
    let mut max_loss_diff: f64 = 0.0;
    while checked < 200 {
        let rows = rng.gen_range(2..=6usize);
        let cols = rng.gen_range(2..=12usize);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = Tensor::new(vec![rows, cols], data).unwrap();
        let f = qr_decompose(&a).unwrap();
        let p = rows.min(cols);
        if (0..p).any(|i| f.r.at2(i, i).abs() < 1e-3) {
            continue; // skip near-degenerate draws; the criterion covers full-rank cases
        }
        checked += 1;
        for i in 0..p {
            for j in 0..p {
                let dot: f64 = (0..rows).map(|r| f.q.at2(r, i) * f.q.at2(r, j)).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                max_ortho = max_ortho.max((dot - want).abs());
            }
        }
        for r in 0..rows {
            for ccol in 0..cols {
                let got: f64 = (0..p).map(|k| f.q.at2(r, k) * f.r.at2(k, ccol)).sum();
                max_recon = max_recon.max((got - a.at2(r, ccol)).abs());
            }
        }
        let loss = qr_ortho_loss(&a).unwrap();
        max_loss_diff = max_loss_diff.max((loss - brute_force_loss(&a)).abs());
    }
    assert!(
        max_ortho < 1e-8 && max_recon < 1e-8 && max_loss_diff < 1e-10,
        "criterion 2 FAILED: QtQ err {max_ortho:.2e}, recon err {max_recon:.2e}, loss diff {max_loss_diff:.2e}"
    );
    pass(
        2,
        &format!(
            "200 matrices up to 6x12: QtQ err {max_ortho:.1e} < 1e-8, QR err {max_recon:.1e} < 1e-8, loss vs brute force {max_loss_diff:.1e} < 1e-10"
        ),
    );
}

// ----------------------------------------------------------------------
// criterion 3: metric hand-check suite (exact closed-form values)
// ----------------------------------------------------------------------

#[test]
fn criterion_3_metric_hand_checks() {
    let tol = 1e-12;
    let close = |got: f64, want: f64, what: &str| {
        assert!(
            (got - want).abs() < tol,
            "criterion 3 FAILED: {what}: got {got}, want {want}"
        );
    };

    // ABC
    let c = |t: Vec<f64>, i: Vec<f64>| RoarCurve {
        removed: (0..t.len()).collect(),
        truth_acc: t,
        inverse_acc: i,
    };
    close(abc(&c(vec![0.5, 0.5], vec![0.5, 0.5])).unwrap(), 0.0, "abc identical");
    close(abc(&c(vec![0.0, 0.0], vec![1.0, 1.0])).unwrap(), 1.0, "abc unit gap");
    close(
        abc(&c(vec![1.0, 0.0, 0.0], vec![1.0, 0.5, 0.0])).unwrap(),
        0.25,
        "abc two trapezoids",
    );

    // DA
    close(drop_in_accuracy(0.90, 0.72).unwrap(), 20.0, "da 20 percent");
    close(drop_in_accuracy(0.6, 0.6).unwrap(), 0.0, "da zero");
    assert!(drop_in_accuracy(0.6, 0.7).unwrap() < 0.0, "criterion 3 FAILED: da negative");

    // WDA including the D=14 weight prefix
    let w = wda_weights(14);
    close(w[0], 1.0, "wda w0");
    close(w[1], 12.0 / 13.0, "wda w1 (0.923)");
    close(w[2], 11.0 / 13.0, "wda w2 (0.846)");
    assert!((w[1] * 1000.0).round() / 1000.0 == 0.923 && (w[2] * 1000.0).round() / 1000.0 == 0.846);
    close(weighted_drop(0.8, &vec![0.8; 14]).unwrap(), 0.0, "wda all equal");
    close(weighted_drop(0.9, &[0.9, 0.8]).unwrap(), 0.0, "wda d2 weights [1,0]");

    // rank correlations
    let (rho, tau) = rank_correlations(&[vec![0, 1, 2, 3], vec![0, 1, 2, 3]]).unwrap();
    close(rho, 1.0, "spearman identical");
    close(tau, 1.0, "kendall identical");
    let (rho, tau) = rank_correlations(&[vec![0, 1, 2, 3], vec![3, 2, 1, 0]]).unwrap();
    close(rho, -1.0, "spearman reversed");
    close(tau, -1.0, "kendall reversed");
    close(
        spearman_rho(&[0, 1, 2, 3], &[0, 2, 1, 3]).unwrap(),
        0.8,
        "spearman single swap",
    );
    close(
        kendall_tau_b(&[0, 1, 2, 3], &[0, 2, 1, 3]).unwrap(),
        2.0 / 3.0,
        "kendall single swap",
    );

    // CWRI: antisymmetry, the three-class column, and the zero-column-sum identity
    let two = cwri(&Tensor::new(vec![2, 1], vec![0.9, 0.4]).unwrap()).unwrap();
    close(two.scores.at2(0, 0), 0.5, "cwri two-class");
    close(two.scores.at2(0, 0) + two.scores.at2(1, 0), 0.0, "cwri antisymmetric");
    let three = cwri(&Tensor::new(vec![3, 1], vec![0.9, 0.1, 0.2]).unwrap()).unwrap();
    close(three.scores.at2(0, 0), 0.75, "cwri 0.75");
    close(three.scores.at2(1, 0), -0.45, "cwri -0.45");
    close(three.scores.at2(2, 0), -0.30, "cwri -0.30");
    let col_sum: f64 = (0..3).map(|ci| three.scores.at2(ci, 0)).sum();
    assert!(col_sum.abs() < 1e-9, "criterion 3 FAILED: cwri column sum {col_sum}");
    // the paper's illustrative column (+1.7, -1.4, -0.3) is a valid output:
    // it sums to zero and is reproduced from prototypes built to invert it
    let proto = Tensor::new(vec![3, 1], vec![1.7 * 2.0 / 3.0, -1.4 * 2.0 / 3.0, -0.3 * 2.0 / 3.0])
        .unwrap();
    let m = cwri(&proto).unwrap();
    close(m.scores.at2(0, 0), 1.7, "cwri paper column +1.7");
    close(m.scores.at2(1, 0), -1.4, "cwri paper column -1.4");
    close(m.scores.at2(2, 0), -0.3, "cwri paper column -0.3");

    // GI
    let gi = global_importance(&Tensor::new(vec![2, 2], vec![0.2, 0.8, 0.4, 0.6]).unwrap())
        .unwrap();
    close(gi.gi[0], 0.3, "gi mean 0");
    close(gi.gi[1], 0.7, "gi mean 1");
    assert_eq!(gi.rank_desc, vec![1, 0], "criterion 3 FAILED: gi rank");
    let tied =
        global_importance(&Tensor::new(vec![1, 3], vec![0.5, 0.5, 0.5]).unwrap()).unwrap();
    assert_eq!(tied.rank_desc, vec![0, 1, 2], "criterion 3 FAILED: gi tie-break");

    // F1 / Jaccard / IACC confusion-matrix arithmetic
    let gt = cafo_core::data::GroundTruthMask {
        variant_a: vec![vec![true, true, false, true, false, false]],
        variant_b: vec![vec![false, false, true, false, true, true]],
    };
    let pred = vec![vec![true, true, true, false, false, false]];
    let scored = gt_agreement(&pred, &gt).unwrap();
    close(scored.f1, 2.0 / 3.0, "f1 2/3");
    close(scored.jaccard, 0.5, "jaccard 1/2");
    close(scored.iacc, 2.0 / 3.0, "iacc 2/3");
    assert_eq!(scored.variant, GtVariant::A);
    // the complement prediction selects variant B perfectly
    let complement = vec![vec![false, false, true, false, true, true]];
    let scored_b = gt_agreement(&complement, &gt).unwrap();
    close(scored_b.f1, 1.0, "variant B f1");
    assert_eq!(scored_b.variant, GtVariant::B);

    // Calinski-Harabasz hand example
    let points = Tensor::new(vec![4, 1], vec![0.0, 0.2, 10.0, 10.2]).unwrap();
    let ch = calinski_harabasz(&points, &[0, 0, 1, 1]).unwrap();
    assert!((ch - 5000.0).abs() < 1e-9, "criterion 3 FAILED: CH {ch} != 5000");

    pass(3, "every closed-form metric example reproduced at 1e-12 (ABC, DA, WDA incl. D=14 weights, rho_S, rho_K, CWRI incl. zero column sums, F1, Jaccard, IACC, CH)");
}

// ----------------------------------------------------------------------
// criteria 4, 5, 8: the shared cross-validated runs
// ----------------------------------------------------------------------

#[test]
fn criterion_4_cwri_identification() {
    let fx = cv_fixture();
    let gt = fx.bench.ground_truth.as_ref().unwrap();
    let f1_l1: Vec<f64> = fx
        .lambda1
        .iter()
        .map(|r| fold_agreement(r, gt).unwrap().f1)
        .collect();
    let f1_l0: Vec<f64> = fx
        .lambda0
        .iter()
        .map(|r| fold_agreement(r, gt).unwrap().f1)
        .collect();
    let mean_f1 = mean(&f1_l1);
    let wins = f1_l1.iter().zip(&f1_l0).filter(|(a, b)| a > b).count();
    assert!(
        mean_f1 >= 0.85,
        "criterion 4 FAILED: mean CE+QR F1 {mean_f1:.3} < 0.85 (per fold {f1_l1:?})"
    );
    assert!(
        wins >= 4,
        "criterion 4 FAILED: CE+QR beats CE on {wins}/5 folds (l1 {f1_l1:?} vs l0 {f1_l0:?})"
    );
    pass(
        4,
        &format!(
            "CE+QR mean F1 {mean_f1:.3} >= 0.85; beats CE-only on {wins}/5 folds (CE+QR {:?} vs CE {:?})",
            f1_l1.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>(),
            f1_l0.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>()
        ),
    );
}

#[test]
fn criterion_5_orthogonality_effect() {
    let fx = cv_fixture();
    let off_l1: Vec<f64> = fx.lambda1.iter().map(|r| r.final_val_offdiag()).collect();
    let off_l0: Vec<f64> = fx.lambda0.iter().map(|r| r.final_val_offdiag()).collect();
    let ratio = mean(&off_l0) / mean(&off_l1);
    let ch_l1: Vec<f64> = fx
        .lambda1
        .iter()
        .map(|r| calinski_harabasz(&r.test_attentions, &r.test_labels).unwrap())
        .collect();
    let ch_l0: Vec<f64> = fx
        .lambda0
        .iter()
        .map(|r| calinski_harabasz(&r.test_attentions, &r.test_labels).unwrap())
        .collect();
    assert!(
        ratio >= 5.0,
        "criterion 5 FAILED: off-diagonal ratio {ratio:.2} < 5 (lambda0 {off_l0:?}, lambda1 {off_l1:?})"
    );
    assert!(
        mean(&ch_l1) > mean(&ch_l0),
        "criterion 5 FAILED: CH lambda1 {:.2} not above lambda0 {:.2}",
        mean(&ch_l1),
        mean(&ch_l0)
    );
    pass(
        5,
        &format!(
            "mean |R_ij|: lambda0 {:.4} vs lambda1 {:.4} (ratio {ratio:.1} >= 5); CH {:.1} > {:.1}",
            mean(&off_l0),
            mean(&off_l1),
            mean(&ch_l1),
            mean(&ch_l0)
        ),
    );
}

#[test]
fn criterion_8_rank_consistency() {
    let fx = cv_fixture();
    let (rho_l1, _) = gi_consistency(&fx.lambda1).unwrap();
    let (rho_l0, _) = gi_consistency(&fx.lambda0).unwrap();
    assert!(
        rho_l1 > rho_l0,
        "criterion 8 FAILED: CE+QR rho_S {rho_l1:.3} not above CE-only {rho_l0:.3}"
    );
    pass(8, &format!("pairwise GI rho_S: CE+QR {rho_l1:.3} > CE-only {rho_l0:.3}"));
}

// ----------------------------------------------------------------------
// criterion 6: pseudo-signal robustness
// ----------------------------------------------------------------------

#[test]
fn criterion_6_pseudo_signal_robustness() {
    let bench = gen_squidgame(&SquidGameConfig {
        n_per_class: 500,
        ..SquidGameConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 10,
        batch_size: CV_BATCH,
        lambda: 1.0,
        ..TrainConfig::default()
    };
    let kinds = [PseudoKind::WhiteNoise, PseudoKind::Sinusoid, PseudoKind::Gp];
    let outcome = pseudo_experiment(&bench.train, &bench.test, &cfg, &kinds).unwrap();
    let mut fold_hits = 0;
    let mut detail = Vec::new();
    for record in &outcome.records {
        let final_gi = record.gi_trajectory.last().unwrap();
        let rank = cafo_core::metrics::rank_descending(final_gi);
        let d_total = rank.len();
        let cutoff = d_total - (d_total as f64 * 0.2).ceil() as usize;
        let mut position = vec![0usize; d_total];
        for (pos, &f) in rank.iter().enumerate() {
            position[f] = pos;
        }
        let positions: Vec<usize> =
            outcome.pseudo_indices.iter().map(|&j| position[j]).collect();
        let all_bottom = positions.iter().all(|&p| p >= cutoff);
        if all_bottom {
            fold_hits += 1;
        }
        detail.push(format!("fold {}: ranks {:?}", record.fold_id, positions));
    }
    assert!(
        fold_hits >= 4,
        "criterion 6 FAILED: pseudo features in bottom 20% on {fold_hits}/5 folds ({})",
        detail.join("; ")
    );
    pass(
        6,
        &format!(
            "3 pseudo features in bottom 20% (ranks >= 26 of 33) on {fold_hits}/5 folds after 10 epochs; {}",
            detail.join("; ")
        ),
    );
}

// ----------------------------------------------------------------------
// criterion 7: remove-and-retrain on the reduced benchmark
// ----------------------------------------------------------------------

#[test]
fn criterion_7_roar_sanity() {
    let fx = cv_fixture();
    let (_, gi_rank) = averaged_gi_rank(&fx.lambda1);
    let reduced = gen_squidgame(&SquidGameConfig {
        n_per_class: 500,
        ..SquidGameConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: CV_BATCH,
        lambda: 1.0,
        ..TrainConfig::default()
    };
    let curve = roar(&reduced.train, &reduced.test, &cfg, &gi_rank).unwrap();
    let abc_value = abc(&curve).unwrap();
    let da_value = da_at_20(&curve).unwrap();
    assert!(
        abc_value > 0.0,
        "criterion 7 FAILED: ABC {abc_value:.4} <= 0 (truth {:?}, inverse {:?})",
        curve.truth_acc,
        curve.inverse_acc
    );
    assert!(da_value > 0.0, "criterion 7 FAILED: DA at 20% {da_value:.3} <= 0");
    pass(
        7,
        &format!(
            "60 retrains at 3 epochs: ABC {abc_value:.4} > 0, DA@20% {da_value:.2} > 0 (base acc {:.3})",
            curve.truth_acc[0]
        ),
    );
}

// ----------------------------------------------------------------------
// criterion 9: byte-identical artifacts from repeated single-threaded runs
// ----------------------------------------------------------------------

#[test]
fn criterion_9_cli_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let status = Command::new(env!("CARGO_BIN_EXE_cafo"))
        .args(["generate", "squidgame", "--n-per-class", "100", "--seed", "42", "--out"])
        .arg(&data)
        .status()
        .unwrap();
    assert!(status.success());
    let run = |out: &Path| {
        let status = Command::new(env!("CARGO_BIN_EXE_cafo"))
            .args(["cv", "--threads", "1", "--epochs", "2", "--batch-size", "32", "--data"])
            .arg(&data)
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    };
    let out_a = dir.path().join("runs_a");
    let out_b = dir.path().join("runs_b");
    run(&out_a);
    run(&out_b);
    let mut compared = 0;
    for fold in 0..5 {
        let a = std::fs::read(out_a.join(format!("fold_{fold}/metrics.csv"))).unwrap();
        let b = std::fs::read(out_b.join(format!("fold_{fold}/metrics.csv"))).unwrap();
        assert_eq!(
            a, b,
            "criterion 9 FAILED: fold {fold} metrics.csv differs between runs"
        );
        compared += 1;
    }
    pass(9, &format!("two single-threaded cv runs produced byte-identical metrics.csv for {compared}/5 folds"));
}
