//! Acceptance suite: one test per criterion, each printing a PASS line when
//! it holds (run with `--nocapture` to see them). Oracles here are written
//! independently of the library's computation paths: explicit padding,
//! explicit loops, scripted attention.

use std::process::Command;
use std::time::Instant;

use magcrn::config::{ModelConfig, Variant};
use magcrn::data::{self, Scaler, SynthSpec};
use magcrn::gcrn;
use magcrn::model;
use magcrn::nawg::{self, AttnLayerIds, NormIds};
use magcrn::numerics::{Tape, Tensor};
use magcrn::params;
use magcrn::rng;
use magcrn::trainer::{self, TrainSettings};

fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut rand_chacha::ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape.to_vec(), lo, hi, r)
}

// ── criterion 1: gradient fidelity ─────────────────────────────────────
// Reverse-mode gradients of the L1 loss match central finite differences
// (h = 1e-5) for every parameter tensor at < 1e-4 relative error, on the
// pinned small configuration, for the full model and each ablation variant,
// each within the runtime bound.

#[test]
fn c1_gradient_fidelity_every_variant() {
    for variant in Variant::ALL {
        let mut config = ModelConfig::tiny(); // N=4 C=3 D=6 T=3 L_F=3 j=2 L=1
        config.variant = variant;
        let started = Instant::now();
        let rows = model::grad_check(&config, 2, 1e-5, 1e-4, false).unwrap();
        let elapsed = started.elapsed().as_secs_f64();
        assert!(!rows.is_empty());
        for row in &rows {
            assert!(
                row.pass,
                "criterion 1 [{variant}]: tensor {} max rel err {:.3e} >= 1e-4",
                row.name, row.max_rel_err
            );
        }
        assert!(
            elapsed < 60.0,
            "criterion 1 [{variant}]: took {elapsed:.1}s, bound is 60s"
        );
        println!(
            "ACCEPTANCE 1 [{}]: gradient fidelity PASS ({} tensors, {:.2}s)",
            variant,
            rows.len(),
            elapsed
        );
    }
}

// ── criterion 2: oracle equivalence ────────────────────────────────────
// Core kernels match naive explicit-loop oracles on >= 500 random small
// instances each, max abs diff < 1e-10.

#[test]
fn c2_conv_matches_padding_oracle() {
    let mut r = rng::stream(201, "acc-conv");
    for _ in 0..500 {
        let d = 1 + rng::next_index(&mut r, 32);
        let lf = loop {
            let l = 1 + rng::next_index(&mut r, 2 * d - 1);
            if l % 2 == 1 {
                break l;
            }
        };
        let signal: Vec<f64> = (0..d)
            .map(|_| rng::next_uniform(&mut r, -3.0, 3.0))
            .collect();
        let kernel: Vec<f64> = (0..lf)
            .map(|_| rng::next_uniform(&mut r, -3.0, 3.0))
            .collect();
        let got = magcrn::numerics::conv1d_same(&signal, &kernel);
        // oracle: explicit zero padding then a plain sliding dot product
        let off = (lf - 1) / 2;
        let mut padded = vec![0.0; d + 2 * off];
        padded[off..off + d].copy_from_slice(&signal);
        for i in 0..d {
            let want: f64 = (0..lf).map(|k| padded[i + k] * kernel[k]).sum();
            assert!((got[i] - want).abs() < 1e-10);
        }
    }
    println!("ACCEPTANCE 2a: conv1d_same oracle equivalence PASS (500 instances)");
}

#[test]
fn c2_node_params_matches_contraction_oracle() {
    let mut r = rng::stream(202, "acc-np");
    for _ in 0..500 {
        let (n, c, di, dj) = (
            1 + rng::next_index(&mut r, 5),
            1 + rng::next_index(&mut r, 4),
            1 + rng::next_index(&mut r, 4),
            1 + rng::next_index(&mut r, 4),
        );
        let e = uniform(&[n, c], -2.0, 2.0, &mut r);
        let w = uniform(&[c, di, dj], -2.0, 2.0, &mut r);
        let b = uniform(&[c, dj], -2.0, 2.0, &mut r);
        let mut tape = Tape::new();
        let eid = tape.param(e.clone());
        let pool = gcrn::GatePoolIds {
            weight: tape.param(w.clone()),
            bias: tape.param(b.clone()),
        };
        let np = gcrn::node_params(&mut tape, eid, &pool).unwrap();
        for node in 0..n {
            for i in 0..di {
                for j in 0..dj {
                    let mut want = 0.0;
                    for cc in 0..c {
                        want += e.at2(node, cc) * w.at3(cc, i, j);
                    }
                    let got = tape.value(np.theta).at2(node, i * dj + j);
                    assert!((got - want).abs() < 1e-10);
                }
            }
            for j in 0..dj {
                let mut want = 0.0;
                for cc in 0..c {
                    want += e.at2(node, cc) * b.at2(cc, j);
                }
                assert!((tape.value(np.omega).at2(node, j) - want).abs() < 1e-10);
            }
        }
    }
    println!("ACCEPTANCE 2b: node_params oracle equivalence PASS (500 instances)");
}

#[test]
fn c2_napl_gcn_matches_explicit_loops() {
    let mut r = rng::stream(203, "acc-napl");
    for _ in 0..500 {
        let (b, n, di, dj) = (
            1 + rng::next_index(&mut r, 2),
            1 + rng::next_index(&mut r, 4),
            1 + rng::next_index(&mut r, 3),
            1 + rng::next_index(&mut r, 3),
        );
        let adj = uniform(&[n, n], 0.0, 1.0, &mut r);
        let x = uniform(&[b, n, di], -2.0, 2.0, &mut r);
        let theta = uniform(&[n, di * dj], -2.0, 2.0, &mut r);
        let omega = uniform(&[n, dj], -2.0, 2.0, &mut r);
        let mut tape = Tape::new();
        let (a_id, x_id) = (tape.input(adj.clone()), tape.input(x.clone()));
        let np = gcrn::NodeParamIds {
            theta: tape.input(theta.clone()),
            omega: tape.input(omega.clone()),
        };
        let out = gcrn::napl_gcn(&mut tape, a_id, x_id, np, gcrn::Activation::Tanh).unwrap();
        for bi in 0..b {
            for node in 0..n {
                for j in 0..dj {
                    let mut pre = omega.at2(node, j);
                    for i in 0..di {
                        let mut mixed = 0.0;
                        for m in 0..n {
                            mixed += adj.at2(node, m) * x.at3(bi, m, i);
                        }
                        pre += mixed * theta.at2(node, i * dj + j);
                    }
                    let got = tape.value(out).at3(bi, node, j);
                    assert!((got - pre.tanh()).abs() < 1e-10);
                }
            }
        }
    }
    println!("ACCEPTANCE 2c: napl_gcn oracle equivalence PASS (500 instances)");
}

#[test]
fn c2_generate_filters_matches_matmul_oracle() {
    let mut r = rng::stream(204, "acc-filters");
    for _ in 0..500 {
        let (n, dd, t, lf) = (
            1 + rng::next_index(&mut r, 4),
            1 + rng::next_index(&mut r, 6),
            1 + rng::next_index(&mut r, 4),
            1 + 2 * rng::next_index(&mut r, 3),
        );
        let theta = uniform(&[n, dd], -2.0, 2.0, &mut r);
        let u = uniform(&[dd, t * lf], -2.0, 2.0, &mut r);
        let mut tape = Tape::new();
        let t_id = tape.input(theta.clone());
        let u_id = tape.param(u.clone());
        let f = magcrn::nmpl::generate_filters(&mut tape, t_id, u_id).unwrap();
        for node in 0..n {
            for col in 0..t * lf {
                let mut want = 0.0;
                for i in 0..dd {
                    want += theta.at2(node, i) * u.at2(i, col);
                }
                assert!((tape.value(f).at2(node, col) - want).abs() < 1e-10);
            }
        }
    }
    println!("ACCEPTANCE 2d: generate_filters oracle equivalence PASS (500 instances)");
}

#[test]
fn c2_single_head_attention_matches_scripted_reference() {
    let mut r = rng::stream(205, "acc-attn");
    for _ in 0..500 {
        let (n, t, d) = (
            1 + rng::next_index(&mut r, 3),
            1 + rng::next_index(&mut r, 4),
            1 + rng::next_index(&mut r, 4),
        );
        let h = uniform(&[n, t, d], -2.0, 2.0, &mut r);
        let m = uniform(&[n, t, d], -2.0, 2.0, &mut r);
        let wq = uniform(&[d, d], -1.0, 1.0, &mut r);
        let wk = uniform(&[d, d], -1.0, 1.0, &mut r);
        let wv = uniform(&[d, d], -1.0, 1.0, &mut r);
        let mut tape = Tape::new();
        let ids = AttnLayerIds {
            wq: tape.param(wq.clone()),
            wk: tape.param(wk.clone()),
            wv: tape.param(wv.clone()),
            wo: None,
            ffn_w1: tape.param(Tensor::zeros(vec![d, d])),
            ffn_b1: tape.param(Tensor::zeros(vec![d])),
            ffn_w2: tape.param(Tensor::zeros(vec![d, d])),
            ffn_b2: tape.param(Tensor::zeros(vec![d])),
            norm1: NormIds {
                gamma: tape.param(Tensor::full(vec![d], 1.0)),
                beta: tape.param(Tensor::zeros(vec![d])),
            },
            norm2: NormIds {
                gamma: tape.param(Tensor::full(vec![d], 1.0)),
                beta: tape.param(Tensor::zeros(vec![d])),
            },
            site_prefix: "acc".to_string(),
        };
        let h_id = tape.input(h.clone());
        let m_id = tape.input(m.clone());
        let out = nawg::cross_attention(&mut tape, h_id, h_id, m_id, &ids, 1).unwrap();

        // scripted single-head reference: softmax(Q K^T / sqrt(D)) (M Wv)
        for node in 0..n {
            let proj = |x: &Tensor, w: &Tensor, pos: usize, j: usize| -> f64 {
                (0..d).map(|i| x.at3(node, pos, i) * w.at2(i, j)).sum()
            };
            for qpos in 0..t {
                let mut row = vec![0.0; t];
                for (kpos, rv) in row.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for j in 0..d {
                        dot += proj(&h, &wq, qpos, j) * proj(&h, &wk, kpos, j);
                    }
                    *rv = dot / (d as f64).sqrt();
                }
                let maxv = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for rv in row.iter_mut() {
                    *rv = (*rv - maxv).exp();
                    sum += *rv;
                }
                for rv in row.iter_mut() {
                    *rv /= sum;
                }
                for j in 0..d {
                    let mut want = 0.0;
                    for kpos in 0..t {
                        want += row[kpos] * proj(&m, &wv, kpos, j);
                    }
                    let got = tape.value(out.out).at3(node, qpos, j);
                    assert!((got - want).abs() < 1e-10);
                }
            }
        }
    }
    println!("ACCEPTANCE 2e: single-head attention oracle equivalence PASS (500 instances)");
}

#[test]
fn c2_metrics_match_explicit_loops() {
    let mut r = rng::stream(206, "acc-metrics");
    for _ in 0..500 {
        let (w, t, n) = (
            1 + rng::next_index(&mut r, 4),
            1 + rng::next_index(&mut r, 4),
            1 + rng::next_index(&mut r, 4),
        );
        let pred = uniform(&[w, t, n], -50.0, 150.0, &mut r);
        let mut truth = uniform(&[w, t, n], -50.0, 150.0, &mut r);
        // sprinkle exact zeros to exercise the MAPE mask
        for v in truth.data_mut().iter_mut() {
            if rng::next_unit(&mut r) < 0.15 {
                *v = 0.0;
            }
        }
        let report = trainer::compute_metrics(&pred, &truth);
        for ti in 0..t {
            let mut abs = 0.0;
            let mut sq = 0.0;
            let mut ape = 0.0;
            let mut ape_n = 0usize;
            for wi in 0..w {
                for ni in 0..n {
                    let e = (pred.at3(wi, ti, ni) - truth.at3(wi, ti, ni)).abs();
                    abs += e;
                    sq += e * e;
                    let y = truth.at3(wi, ti, ni);
                    if y != 0.0 {
                        ape += e / y.abs();
                        ape_n += 1;
                    }
                }
            }
            let cnt = (w * n) as f64;
            assert!((report.per_horizon[ti].mae - abs / cnt).abs() < 1e-10);
            assert!((report.per_horizon[ti].rmse - (sq / cnt).sqrt()).abs() < 1e-10);
            match report.per_horizon[ti].mape {
                Some(got) => {
                    assert!((got - 100.0 * ape / ape_n as f64).abs() < 1e-10);
                }
                None => assert_eq!(ape_n, 0),
            }
        }
    }
    println!("ACCEPTANCE 2f: MAE/RMSE/MAPE oracle equivalence PASS (500 instances)");
}

// ── criterion 3: normalization invariants ──────────────────────────────

#[test]
fn c3_normalization_invariants() {
    for draw in 0..100u64 {
        let mut config = ModelConfig::tiny();
        config.seed = 1000 + draw;
        let state = params::init(&config).unwrap();
        let mut r = rng::stream(300 + draw, "acc-norm-x");
        let x = uniform(&[2, config.t_in, config.nodes, 1], -2.0, 2.0, &mut r);
        let mut tape = Tape::new();
        let bound = model::bind(&mut tape, &state, &config).unwrap();
        let mut observed = Vec::new();
        let mut mode = nawg::Mode::Train {
            observed: &mut observed,
        };
        let trace = model::forward(&mut tape, &bound, &x, &config, &mut mode).unwrap();

        let n = config.nodes;
        for row in tape.value(trace.adjacency).data().chunks(n) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "adjacency row sums to {sum}");
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        for layer in &trace.attention {
            for head in layer {
                let t = *tape.shape(*head).last().unwrap();
                for row in tape.value(*head).data().chunks(t) {
                    let sum: f64 = row.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-9, "attention row sums to {sum}");
                    assert!(row.iter().all(|&v| v >= 0.0));
                }
            }
        }
        for h in &trace.h_seq {
            for &v in tape.value(*h).data() {
                assert!(v > -1.0 && v < 1.0, "hidden state {v} left (-1, 1)");
            }
        }
    }
    println!("ACCEPTANCE 3: normalization invariants PASS (100 draws)");
}

// ── criterion 4: overfit smoke ─────────────────────────────────────────
// Full model on a fixed synthetic set (N=8, 2000 steps), protocol windows
// (12 in / 12 out), at most 300 epochs: final training MAE under 0.1x the
// mean-predictor baseline, in under 10 minutes.

#[test]
fn c4_overfit_smoke() {
    let started = Instant::now();
    let spec = SynthSpec {
        noise: 0.5,
        ..SynthSpec::new(8, 2000, 42)
    };
    let raw = data::synth_generate(&spec).unwrap();
    let (tr, va, _te) = data::split(&raw, 0.6, 0.2, 24).unwrap();
    let scaler = Scaler::fit(&tr.values, false).unwrap();
    let train_w = data::windows(&tr, &scaler, 12, 12);
    let val_w = data::windows(&va, &scaler, 12, 12);
    let baseline = trainer::mean_predictor_mae(&train_w);

    let config = ModelConfig {
        nodes: 8,
        embed_dim: 4,
        hidden_dim: 24,
        t_in: 12,
        t_out: 12,
        filter_len: 3,
        heads: 4,
        attn_layers: 1,
        ffn_dim: 24,
        variant: Variant::Full,
        seed: 1,
        ..ModelConfig::protocol(8)
    };
    let mut settings = TrainSettings::new(64, 0.003, 300, 300);
    settings.stop_at_train_loss = Some(0.07 * baseline);
    let (state, history) =
        trainer::train(&config, &settings, &train_w, &val_w, &scaler, None).unwrap();

    let train_report = trainer::evaluate(&config, &state, &train_w, &scaler, 64).unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    assert!(
        train_report.average.mae < 0.1 * baseline,
        "criterion 4: train MAE {:.3} not below 0.1 x baseline {:.3} (epochs {})",
        train_report.average.mae,
        baseline,
        history.records.len()
    );
    assert!(history.records.len() <= 300);
    assert!(
        elapsed < 600.0,
        "criterion 4: took {elapsed:.0}s, bound is 600s"
    );
    println!(
        "ACCEPTANCE 4: overfit smoke PASS (train MAE {:.3} vs baseline {:.3}, {} epochs, {:.0}s)",
        train_report.average.mae,
        baseline,
        history.records.len(),
        elapsed
    );
}

// ── criterion 5: ablation harness ──────────────────────────────────────
// The `ablate` command trains full + all four variants with early stopping,
// emits a table-shaped report with finite metrics, and the full model's
// validation MAE stays within 1.10x of the best variant's.

#[test]
fn c5_ablation_harness() {
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_magcrn"))
            .args(args)
            .current_dir(dir.path())
            .output()
            .expect("binary runs");
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8_lossy(&out.stdout).into_owned()
    };
    run(&[
        "synth",
        "--nodes",
        "8",
        "--steps",
        "1200",
        "--seed",
        "42",
        "--out",
        "series.txt",
        "--manifest",
        "data.manifest",
    ]);
    run(&[
        "ablate",
        "--manifest",
        "data.manifest",
        "--out-dir",
        "ab",
        "--embed-dim",
        "4",
        "--hidden-dim",
        "16",
        "--t-in",
        "12",
        "--t-out",
        "12",
        "--filter-len",
        "3",
        "--heads",
        "4",
        "--attn-layers",
        "1",
        "--ffn-dim",
        "16",
        "--epochs",
        "45",
        "--patience",
        "12",
        "--learning-rate",
        "0.01",
        "--batch-size",
        "64",
        "--seed",
        "1",
    ]);

    let report = std::fs::read_to_string(dir.path().join("ab/ablation.txt")).unwrap();
    println!("{report}");
    let mut lines = report.lines();
    let header: Vec<&str> = lines.next().unwrap().split_whitespace().collect();
    assert_eq!(
        &header[1..],
        &["full", "no_nawg", "no_nmpl", "query", "key"],
        "report must cover the full model and all four variants"
    );
    let mut table: Vec<(String, Vec<f64>)> = Vec::new();
    for line in lines {
        let mut parts = line.split_whitespace();
        let label = parts.next().unwrap().to_string();
        let values: Vec<f64> = parts.map(|v| v.parse().expect("finite metric")).collect();
        assert_eq!(values.len(), 5, "row {label}");
        assert!(
            values.iter().all(|v| v.is_finite()),
            "row {label} has non-finite entries"
        );
        table.push((label, values));
    }
    assert_eq!(table.len(), 4, "val_mae + test mae/rmse/mape rows");

    let val_row = &table.iter().find(|(l, _)| l == "val_mae").unwrap().1;
    let full = val_row[0];
    let best = val_row.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(
        full <= 1.10 * best,
        "criterion 5: full val MAE {full:.4} exceeds 1.10 x best variant {best:.4}"
    );
    println!(
        "ACCEPTANCE 5: ablation harness PASS (full {:.4} vs best {:.4}, ratio {:.3})",
        full,
        best,
        full / best
    );
}

// ── criterion 6: parameter accounting ──────────────────────────────────
// At the protocol configuration (C=8, L_F=9, L=2, D=64, j=4, N=307, T=12):
// count(full) within [1.0M, 5.0M], count(no_nmpl) < count(full), and the
// reduction factor within [2, 6].

#[test]
fn c6_parameter_accounting() {
    let mut config = ModelConfig::protocol(307);
    config.variant = Variant::Full;
    let full = model::count_params(&config).unwrap();
    config.variant = Variant::NoNmpl;
    let no_nmpl = model::count_params(&config).unwrap();
    let ratio = full as f64 / no_nmpl as f64;

    let subset_ok = no_nmpl < full;
    let ratio_ok = (2.0..=6.0).contains(&ratio);
    let range_ok = (1_000_000..=5_000_000).contains(&full);
    println!("ACCEPTANCE 6: count(full)={full}, count(no_nmpl)={no_nmpl}, ratio={ratio:.2}");
    println!(
        "ACCEPTANCE 6: subset {} | ratio in [2,6] {} | full in [1.0M,5.0M] {}",
        if subset_ok { "PASS" } else { "FAIL" },
        if ratio_ok { "PASS" } else { "FAIL" },
        if range_ok { "PASS" } else { "FAIL" },
    );
    assert!(
        subset_ok,
        "criterion 6: no_nmpl ({no_nmpl}) must be smaller than full ({full})"
    );
    assert!(
        ratio_ok,
        "criterion 6: reduction factor {ratio:.2} outside [2, 6]"
    );
    assert!(
        range_ok,
        "criterion 6: count(full) = {full} outside [1.0M, 5.0M]"
    );
}

// ── criterion 7: pipeline arithmetic ───────────────────────────────────

#[test]
fn c7_pipeline_arithmetic() {
    let spec = SynthSpec {
        noise: 1.0,
        ..SynthSpec::new(3, 16992, 9)
    };
    let mut raw = data::synth_generate(&spec).unwrap();
    // punch missing runs: interior stretches plus a leading run on node 1
    let nodes = 3;
    let mut holes: Vec<(usize, usize)> = Vec::new(); // (start, len) on node 0
    for start in [100usize, 5000, 9000, 16000] {
        let len = 4 + (start % 5);
        holes.push((start, len));
        for t in start..start + len {
            raw.values.data_mut()[t * nodes] = f64::NAN;
        }
    }
    for t in 0..6 {
        raw.values.data_mut()[t * nodes + 1] = f64::NAN;
    }

    let fixed = data::interpolate_missing(&raw).unwrap();
    assert!(
        fixed.values.all_finite(),
        "criterion 7: NaN sentinels survived"
    );
    for &(start, len) in &holes {
        for t in start..start + len {
            let a = fixed.values.at2(t - 1, 0);
            let b = fixed.values.at2(t, 0);
            let c = fixed.values.at2(t + 1, 0);
            assert!(
                (a - 2.0 * b + c).abs() < 1e-12,
                "criterion 7: second difference at {t} is {}",
                (a - 2.0 * b + c).abs()
            );
        }
    }

    let (tr, va, te) = data::split(&fixed, 0.6, 0.2, 24).unwrap();
    assert_eq!(
        (tr.steps(), va.steps(), te.steps()),
        (10195, 3398, 3399),
        "criterion 7: split sizes"
    );
    let scaler = Scaler::fit(&tr.values, false).unwrap();
    for (segment, len) in [(&tr, 10195), (&va, 3398), (&te, 3399)] {
        let wins = data::windows(segment, &scaler, 12, 12);
        assert_eq!(
            wins.len(),
            len - 23,
            "criterion 7: window count for len {len}"
        );
    }
    println!("ACCEPTANCE 7: pipeline arithmetic PASS (10195/3398/3399, windows len-23)");
}

// ── criterion 8: determinism ───────────────────────────────────────────
// Two end-to-end runs with identical seeds and flags produce bitwise
// identical checkpoints and metric reports.

#[test]
fn c8_end_to_end_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| -> String {
        let out = Command::new(env!("CARGO_BIN_EXE_magcrn"))
            .args(args)
            .current_dir(dir.path())
            .output()
            .expect("binary runs");
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8_lossy(&out.stdout).into_owned()
    };
    run(&[
        "synth",
        "--nodes",
        "4",
        "--steps",
        "200",
        "--seed",
        "11",
        "--out",
        "series.txt",
        "--manifest",
        "data.manifest",
    ]);
    let train_flags = |out_dir: &str| -> Vec<String> {
        [
            "train",
            "--manifest",
            "data.manifest",
            "--out-dir",
            out_dir,
            "--embed-dim",
            "2",
            "--hidden-dim",
            "4",
            "--t-in",
            "3",
            "--t-out",
            "3",
            "--filter-len",
            "3",
            "--heads",
            "2",
            "--attn-layers",
            "1",
            "--ffn-dim",
            "4",
            "--epochs",
            "3",
            "--batch-size",
            "16",
            "--seed",
            "5",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect()
    };
    let eval_flags = |ckpt: &str| -> Vec<String> {
        [
            "eval",
            "--checkpoint",
            ckpt,
            "--split",
            "test",
            "--per-horizon",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect()
    };

    let run_owned = |args: Vec<String>| -> String {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        run(&refs)
    };
    run_owned(train_flags("r1"));
    run_owned(train_flags("r2"));
    let ckpt1 = std::fs::read(dir.path().join("r1/checkpoint.ckpt")).unwrap();
    let ckpt2 = std::fs::read(dir.path().join("r2/checkpoint.ckpt")).unwrap();
    assert_eq!(ckpt1, ckpt2, "criterion 8: checkpoints differ");
    let hist1 = std::fs::read(dir.path().join("r1/history.log")).unwrap();
    let hist2 = std::fs::read(dir.path().join("r2/history.log")).unwrap();
    assert_eq!(hist1, hist2, "criterion 8: history logs differ");

    let report1 = run_owned(eval_flags("r1/checkpoint.ckpt"));
    let report2 = run_owned(eval_flags("r2/checkpoint.ckpt"));
    assert_eq!(report1, report2, "criterion 8: metric reports differ");
    assert!(report1.contains("horizon=avg"));
    println!("ACCEPTANCE 8: determinism PASS (identical checkpoints, logs, reports)");
}
