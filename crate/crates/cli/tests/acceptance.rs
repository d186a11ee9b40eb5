//! Release gate: each test prints one `criterion N (...): PASS/FAIL/SKIP`
//! line (visible with `--nocapture`) and then asserts its claim.
//!
//! Criteria 1 and 8 need the WS-DREAM temporal logs, which are not shipped
//! with the repository; point `TPMCF_WSDREAM_RT` / `TPMCF_WSDREAM_TP` at the
//! extracted `rtdata.txt` / `tpdata.txt` to enable them. Criterion 8 is the
//! long-running real-data reproduction and stays `#[ignore]`d.

use std::time::Instant;

use tpmcf::config::{ExperimentConfig, Mode};
use tpmcf::dataset::{isolation_forest_filter, load_qos_log, synth_tensor, SynthParams};
use tpmcf::eval::{improvement_over, nmae, run_experiment, run_experiment_with};
use tpmcf::features::{mf_grad, mf_loss, AutoencoderModel};
use tpmcf::gcmf::{gcmf_step_grads, gcmf_step_loss, GcmfModel};
use tpmcf::graph::{normalize_adjacency, Qig};
use tpmcf::numcore::{cauchy_loss, cauchy_loss_grad, grad_check, Matrix, DEFAULT_STEP};
use tpmcf::pte::{pte_grads, pte_loss, sdpa, InputEmbedding, PteConfig, PteModel};
use tpmcf::features::InitialEmbedding;

fn verdict(n: usize, slug: &str, pass: bool, detail: &str) {
    let word = if pass { "PASS" } else { "FAIL" };
    println!("criterion {n} ({slug}): {word} - {detail}");
    assert!(pass, "criterion {n} ({slug}): {detail}");
}

fn skip(n: usize, slug: &str, reason: &str) {
    println!("criterion {n} ({slug}): SKIP - {reason}");
}

fn within(actual: f64, expected: f64, rel: f64) -> bool {
    (actual - expected).abs() <= rel * expected.abs()
}

#[test]
fn criterion_1_dataset_fidelity() {
    let rt = std::env::var("TPMCF_WSDREAM_RT").ok();
    let tp = std::env::var("TPMCF_WSDREAM_TP").ok();
    if rt.is_none() && tp.is_none() {
        skip(1, "dataset-fidelity", "set TPMCF_WSDREAM_RT / TPMCF_WSDREAM_TP");
        return;
    }
    let start = Instant::now();
    let mut detail = String::new();
    let mut pass = true;
    // (label, path, mean, median, sd, max; max < 0 = unchecked)
    let checks = [
        ("rt", rt, 3.177, 0.442, 6.128, 20.0),
        ("tp", tp, 11.345, 1.852, 54.276, -1.0),
    ];
    for (label, path, mean, median, sd, max) in checks {
        let Some(path) = path else { continue };
        let tensor = load_qos_log::<f64>(path.as_ref(), 142, 4500, 64).unwrap();
        let s = tensor.summarize().unwrap();
        let mut ok = within(s.mean, mean, 0.005)
            && within(s.median, median, 0.005)
            && within(s.std, sd, 0.005);
        if max > 0.0 {
            ok &= within(s.max, max, 0.005);
        }
        pass &= ok;
        detail.push_str(&format!(
            "{label}: mean {:.3} median {:.3} sd {:.3} max {:.1} ({}); ",
            s.mean,
            s.median,
            s.std,
            s.max,
            if ok { "within 0.5%" } else { "out of band" }
        ));
    }
    let elapsed = start.elapsed().as_secs_f64();
    pass &= elapsed < 30.0;
    detail.push_str(&format!("{elapsed:.1}s"));
    verdict(1, "dataset-fidelity", pass, &detail);
}

#[test]
fn criterion_2_metric_identities() {
    let a = nmae(0.4973f64, &[3.177]).unwrap();
    let b = nmae(0.7881f64, &[11.345]).unwrap();
    let imp = improvement_over(0.4973, 0.5260).unwrap();
    let pass = (a - 0.1565).abs() <= 1e-4 && (b - 0.0695).abs() <= 1e-4 && (imp - 5.46).abs() <= 0.01;
    verdict(
        2,
        "metric-identities",
        pass,
        &format!("nmae {a:.4}/{b:.4}, improvement {imp:.2}%"),
    );
}

#[test]
fn criterion_3_gradient_oracle() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    let mut note = |err: f64| {
        worst = worst.max(err);
        checked += 1;
    };

    // Matrix factorization over both factor matrices.
    let user = Matrix::<f64>::uniform_seeded(4, 3, 0.1, 1.5, 21);
    let service = Matrix::<f64>::uniform_seeded(5, 3, 0.1, 1.5, 22);
    let entries = [(0u32, 1u32, 1.0), (1, 2, 0.5), (2, 0, 2.0), (3, 4, 0.9), (0, 0, 1.3)];
    let (gu, gs) = mf_grad(&user, &service, &entries, 0.01);
    note(
        grad_check(
            |u| Ok(mf_loss(u, &service, &entries, 0.01)),
            &user,
            &gu,
            DEFAULT_STEP,
        )
        .unwrap(),
    );
    note(
        grad_check(
            |s| Ok(mf_loss(&user, s, &entries, 0.01)),
            &service,
            &gs,
            DEFAULT_STEP,
        )
        .unwrap(),
    );

    // Autoencoder over all eight weight/bias matrices.
    let ae = AutoencoderModel::<f64>::new(5, 4, 2, 3);
    let x = Matrix::<f64>::uniform_seeded(6, 5, 0.1, 2.0, 8);
    let (ag, _) = ae.grads(&x).unwrap();
    let analytic = [&ag.w1, &ag.b1, &ag.w2, &ag.b2, &ag.w3, &ag.b3, &ag.w4, &ag.b4];
    for (k, grad) in analytic.into_iter().enumerate() {
        let shot = {
            let mut probe = ae.clone();
            probe.params_mut()[k].clone()
        };
        note(
            grad_check(
                |cand| {
                    let mut m = ae.clone();
                    *m.params_mut()[k] = cand.clone();
                    m.mse(&x)
                },
                &shot,
                grad,
                DEFAULT_STEP,
            )
            .unwrap(),
        );
    }

    // One GCMF time step over both shared weight matrices.
    let qig = Qig::from_pairs(3, 4, 0, vec![(0, 0), (0, 1), (1, 2), (2, 3), (1, 0)]).unwrap();
    let adj = normalize_adjacency::<f64>(&qig);
    let feats = InitialEmbedding {
        t: 0,
        n: 3,
        m: 4,
        matrix: Matrix::uniform_seeded(7, 5, -1.0, 1.0, 17),
    };
    let obs = [(0u32, 0u32, 1.2), (0, 1, 0.7), (1, 2, 2.0), (2, 3, 0.4), (1, 0, 1.5)];
    let gm = GcmfModel::<f64>::new(5, 3, 0.5, 11);
    let (_, dw1, dw2) = gcmf_step_grads(&gm, &adj, &feats, &obs).unwrap();
    note(
        grad_check(
            |cand| {
                let mut m = gm.clone();
                m.w1 = cand.clone();
                gcmf_step_loss(&m, &adj, &feats, &obs)
            },
            &gm.w1,
            &dw1,
            DEFAULT_STEP,
        )
        .unwrap(),
    );
    note(
        grad_check(
            |cand| {
                let mut m = gm.clone();
                m.w2 = cand.clone();
                gcmf_step_loss(&m, &adj, &feats, &obs)
            },
            &gm.w2,
            &dw2,
            DEFAULT_STEP,
        )
        .unwrap(),
    );

    // Micro temporal encoder: window 2, width 4, one head, over every
    // parameter matrix in the flat order.
    let pcfg = PteConfig {
        window: 2,
        c1: 1,
        heads: 1,
        d_k: 3,
        d_v: 3,
        gamma_t: 1.0,
        dropout: 0.0,
        ..PteConfig::new(9)
    };
    let pm = PteModel::<f64>::new(4, &pcfg).unwrap();
    let windows = [
        (
            InputEmbedding { user: 0, service: 0, t: 1, matrix: Matrix::uniform_seeded(2, 4, -1.0, 1.0, 31) },
            0.8,
        ),
        (
            InputEmbedding { user: 1, service: 2, t: 1, matrix: Matrix::uniform_seeded(2, 4, -1.0, 1.0, 32) },
            1.7,
        ),
    ];
    let (_, pg) = pte_grads(&pm, &windows, None).unwrap();
    let flats = pg.flat();
    for k in 0..pm.params().len() {
        note(
            grad_check(
                |cand| {
                    let mut m = pm.clone();
                    *m.params_mut()[k] = cand.clone();
                    pte_loss(&m, &windows, None)
                },
                pm.params()[k],
                flats[k],
                DEFAULT_STEP,
            )
            .unwrap(),
        );
    }

    let elapsed = start.elapsed().as_secs_f64();
    let pass = worst < 1e-4 && elapsed < 60.0;
    verdict(
        3,
        "gradient-oracle",
        pass,
        &format!("max rel err {worst:.2e} over {checked} matrices, {elapsed:.1}s"),
    );
}

/// Largest |eigenvalue| of a symmetric matrix by power iteration.
fn spectral_radius(a: &Matrix<f64>) -> f64 {
    let n = a.rows();
    let mut v = Matrix::<f64>::uniform_seeded(n, 1, 0.5, 1.5, 77);
    let mut rho = 0.0;
    for _ in 0..300 {
        let w = a.matmul(&v).unwrap();
        let norm = w.frobenius_sq().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        rho = norm / v.frobenius_sq().sqrt();
        v = w.scale(1.0 / norm);
    }
    rho
}

#[test]
fn criterion_4_shapes_and_normalization() {
    let mut max_asym: f64 = 0.0;
    let mut max_form: f64 = 0.0;
    let mut max_rho: f64 = 0.0;
    for (seed, (n, m)) in [(5u32, 7u32), (10, 15), (20, 30), (3, 2), (12, 8), (25, 25)]
        .into_iter()
        .enumerate()
    {
        let coin = Matrix::<f64>::uniform_seeded(n as usize, m as usize, 0.0, 1.0, seed as u64);
        let mut pairs: Vec<(u32, u32)> = (0..n)
            .flat_map(|i| (0..m).map(move |j| (i, j)))
            .filter(|&(i, j)| coin.get(i as usize, j as usize) < 0.35)
            .collect();
        if pairs.is_empty() {
            pairs.push((0, 0));
        }
        let mut deg = vec![0usize; (n + m) as usize];
        for &(i, j) in &pairs {
            deg[i as usize] += 1;
            deg[(n + j) as usize] += 1;
        }
        let qig = Qig::from_pairs(n, m, 0, pairs.clone()).unwrap();
        let adj = normalize_adjacency::<f64>(&qig);
        let dense = adj.to_dense();
        let size = adj.size();

        let mut expected = Matrix::<f64>::zeros(size, size);
        for u in 0..size {
            expected.set(u, u, 1.0 / (deg[u] as f64 + 1.0));
        }
        for &(i, j) in &pairs {
            let (u, v) = (i as usize, (n + j) as usize);
            let w = 1.0 / ((deg[u] as f64 + 1.0) * (deg[v] as f64 + 1.0)).sqrt();
            expected.set(u, v, w);
            expected.set(v, u, w);
        }
        max_form = max_form.max(dense.max_abs_diff(&expected));
        for u in 0..size {
            for v in 0..u {
                max_asym = max_asym.max((dense.get(u, v) - dense.get(v, u)).abs());
            }
        }
        max_rho = max_rho.max(spectral_radius(&dense));
    }

    let pcfg = PteConfig {
        window: 5,
        c1: 1,
        heads: 2,
        d_k: 3,
        d_v: 4,
        dropout: 0.0,
        ..PteConfig::new(2)
    };
    let pm = PteModel::<f64>::new(8, &pcfg).unwrap();
    let x = Matrix::<f64>::uniform_seeded(5, 8, -1.0, 1.0, 6);
    let mha_out = pm.blocks[0].mha.forward(&x).unwrap();
    let block_out = pm.blocks[0].apply(&x).unwrap();
    let shapes_ok = mha_out.shape() == (5, 8) && block_out.shape() == (5, 8);

    // Fresh blocks carry unit gain and zero bias, so the block output is a
    // raw layer-norm result: per-row mean 0 and population variance 1.
    let mut max_mean: f64 = 0.0;
    let mut max_var_err: f64 = 0.0;
    for r in 0..block_out.rows() {
        let row = block_out.row(r);
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / row.len() as f64;
        max_mean = max_mean.max(mean.abs());
        max_var_err = max_var_err.max((var - 1.0).abs());
    }

    let q = Matrix::<f64>::uniform_seeded(6, 4, -1.0, 1.0, 41);
    let k = Matrix::<f64>::uniform_seeded(6, 4, -1.0, 1.0, 42);
    let mut eye = Matrix::<f64>::zeros(6, 6);
    for d in 0..6 {
        eye.set(d, d, 1.0);
    }
    let attn = sdpa(&q, &k, &eye).unwrap();
    let mut max_row_err: f64 = 0.0;
    for r in 0..6 {
        let sum: f64 = attn.row(r).iter().sum();
        max_row_err = max_row_err.max((sum - 1.0).abs());
    }

    let pass = max_asym < 1e-12
        && max_form < 1e-12
        && max_rho <= 1.0 + 1e-9
        && shapes_ok
        && max_row_err <= 1e-9
        && max_mean <= 1e-6
        && max_var_err <= 1e-6;
    verdict(
        4,
        "shapes-and-normalization",
        pass,
        &format!(
            "asym {max_asym:.1e}, closed form {max_form:.1e}, rho {max_rho:.9}, \
             attn rows {max_row_err:.1e}, ln mean {max_mean:.1e} var {max_var_err:.1e}"
        ),
    );
}

#[test]
fn criterion_5_robust_loss() {
    let mut pass = true;
    let mut worst_bound: f64 = 0.0;
    for gamma in [0.5, 0.75, 1.0] {
        let bound = 1.0 / gamma;
        let mut prev = -1.0f64;
        for step in 0..10_000 {
            let r = -50.0 + step as f64 * 0.01;
            let here = cauchy_loss(&[r], gamma).unwrap();
            let mirrored = cauchy_loss(&[-r], gamma).unwrap();
            pass &= (here - mirrored).abs() <= 1e-12;
            let g = cauchy_loss_grad(r, gamma).unwrap().abs();
            worst_bound = worst_bound.max(g * gamma);
            pass &= g <= bound + 1e-12;

            let abs_r = step as f64 * 0.005;
            let on_half_line = cauchy_loss(&[abs_r], gamma).unwrap();
            pass &= on_half_line >= prev - 1e-15;
            prev = on_half_line;
        }
    }
    verdict(
        5,
        "robust-loss",
        pass,
        &format!("even, monotone in |r|, max |grad|*gamma {worst_bound:.6} <= 1"),
    );
}

#[test]
fn criterion_6_outlier_filter_efficacy() {
    let start = Instant::now();
    // Separable plant: flat scales keep the x10 spikes unambiguous.
    let plant = synth_tensor::<f64>(&SynthParams {
        amplitude: (0.3, 0.6),
        ..SynthParams::new(24, 60, 8, 2, 0.3, 0.0, 0.02, 5)
    })
    .unwrap();
    let (_, report) = isolation_forest_filter(&plant.tensor, 0.02, 100, 256, 9).unwrap();
    let removed: std::collections::HashSet<_> = report.removed.iter().cloned().collect();
    let hits = plant.planted.iter().filter(|t| removed.contains(t)).count();
    let recovery = hits as f64 / plant.planted.len() as f64;

    let data = synth_tensor::<f64>(&SynthParams {
        service_scale_range: (0.125, 8.0),
        amplitude: (0.4, 0.8),
        ..SynthParams::new(16, 48, 8, 2, 0.25, 0.0, 0.02, 13)
    })
    .unwrap();
    let mut cfg = ExperimentConfig::new("synth");
    cfg.n = 16;
    cfg.m = 48;
    cfg.t_len = 8;
    cfg.density = 0.85;
    cfg.f_q = 6;
    cfg.f_c = 3;
    cfg.mf_iterations = 150;
    cfg.ae_hidden = 16;
    cfg.ae_epochs = 60;
    cfg.f_prime = 8;
    cfg.gamma_s = 1.0;
    cfg.lr_gcmf = 5e-3;
    cfg.epochs_gcmf = 3000;
    cfg.window = 4;
    cfg.c1 = 2;
    cfg.heads = 2;
    cfg.d_k = 8;
    cfg.d_v = 8;
    cfg.gamma_t = 1.0;
    cfg.epochs_pte = 30;
    cfg.batch_size = 128;
    cfg.seeds = vec![1];
    cfg.mode = Mode::Full;
    cfg.lambda = 0.0;
    let raw = run_experiment_with(&data.tensor, &cfg).unwrap();
    cfg.lambda = 0.02;
    let filtered = run_experiment_with(&data.tensor, &cfg).unwrap();

    let elapsed = start.elapsed().as_secs_f64();
    let pass = recovery >= 0.90 && filtered.mae < raw.mae && elapsed < 300.0;
    verdict(
        6,
        "outlier-filter-efficacy",
        pass,
        &format!(
            "recovery {recovery:.3}, mae {:.4} (filtered) vs {:.4} (raw), {elapsed:.0}s",
            filtered.mae, raw.mae
        ),
    );
}

#[test]
fn criterion_7_synthetic_end_to_end() {
    let start = Instant::now();
    let data = synth_tensor::<f64>(&SynthParams {
        service_scale_range: (0.125, 8.0),
        amplitude: (0.4, 0.8),
        ..SynthParams::new(40, 120, 32, 3, 0.2, 0.0, 0.0, 1)
    })
    .unwrap();
    let mut cfg = ExperimentConfig::new("synth");
    cfg.n = 40;
    cfg.m = 120;
    cfg.t_len = 32;
    cfg.density = 0.85;
    cfg.lambda = 0.0;
    cfg.f_q = 8;
    cfg.f_c = 4;
    cfg.mf_iterations = 150;
    cfg.ae_hidden = 16;
    cfg.ae_epochs = 60;
    cfg.f_prime = 8;
    cfg.gamma_s = 1.0;
    cfg.lr_gcmf = 5e-3;
    cfg.epochs_gcmf = 4000;
    cfg.window = 8;
    cfg.c1 = 2;
    cfg.heads = 2;
    cfg.d_k = 16;
    cfg.d_v = 16;
    cfg.gamma_t = 1.0;
    cfg.lr_pte = 1e-3;
    cfg.epochs_pte = 40;
    cfg.batch_size = 256;
    cfg.seeds = vec![1];

    cfg.mode = Mode::Gcmf;
    let gcmf = run_experiment_with(&data.tensor, &cfg).unwrap();
    cfg.mode = Mode::Full;
    let full = run_experiment_with(&data.tensor, &cfg).unwrap();

    let elapsed = start.elapsed().as_secs_f64();
    let vs_mean = full.mae / full.mean_predictor_mae;
    let vs_gcmf = full.mae / gcmf.mae;
    let pass = vs_mean <= 0.50 && vs_gcmf <= 0.90 && elapsed < 900.0;
    verdict(
        7,
        "synthetic-end-to-end",
        pass,
        &format!(
            "mae {:.4} = {:.2}x mean baseline ({:.4}), {:.2}x spatial-only ({:.4}), {elapsed:.0}s",
            full.mae, vs_mean, full.mean_predictor_mae, vs_gcmf, gcmf.mae
        ),
    );
}

/// Full reproduction on the real RT log; takes hours, so it never runs in
/// the default suite. `cargo test -p tpmcf-cli --test acceptance -- --ignored`
/// with `TPMCF_WSDREAM_RT` set runs it.
#[test]
#[ignore]
fn criterion_8_real_data_reproduction() {
    let Ok(path) = std::env::var("TPMCF_WSDREAM_RT") else {
        skip(8, "real-data-reproduction", "set TPMCF_WSDREAM_RT");
        return;
    };
    let mut cfg = ExperimentConfig::new(path);
    cfg.lambda = 0.1;
    cfg.gamma_s = 0.5;
    cfg.gamma_t = 0.75;
    cfg.density = 0.1;
    cfg.seeds = vec![1, 2, 3, 4, 5];
    cfg.mode = Mode::Full;
    let report = run_experiment(&cfg).unwrap();
    verdict(
        8,
        "real-data-reproduction",
        report.mae <= 0.62,
        &format!("mean mae {:.4} over 5 seeds (target <= 0.62)", report.mae),
    );
}

#[test]
fn criterion_9_determinism() {
    let data = synth_tensor::<f64>(&SynthParams {
        amplitude: (0.3, 0.6),
        ..SynthParams::new(8, 16, 4, 2, 0.5, 0.0, 0.0, 4)
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::new();
    for &(i, j, t, v) in data.tensor.entries() {
        text.push_str(&format!("{i} {j} {t} {v}\n"));
    }
    std::fs::write(dir.path().join("tiny.txt"), text).unwrap();
    std::fs::write(
        dir.path().join("tiny.cfg"),
        "dataset = tiny.txt\nn = 8\nm = 16\nt_len = 4\ndensity = 0.8\nlambda = 0.0\n\
         f_q = 3\nf_c = 2\nmf_iterations = 40\nae_hidden = 6\nae_epochs = 20\n\
         f_prime = 4\ngamma_s = 1.0\nlr_gcmf = 5e-3\nepochs_gcmf = 300\n\
         window = 2\nc1 = 1\nheads = 1\nd_k = 4\nd_v = 4\ngamma_t = 1.0\n\
         epochs_pte = 3\nbatch_size = 64\nseeds = 1\ncache_dir = cachedir\n",
    )
    .unwrap();
    let run = || {
        std::process::Command::new(env!("CARGO_BIN_EXE_tpmcf"))
            .current_dir(dir.path())
            .args(["--config", "tiny.cfg", "evaluate"])
            .output()
            .expect("binary runs")
    };
    let first = run();
    let second = run();
    let pass = first.status.code() == Some(0)
        && first.stdout == second.stdout
        && !first.stdout.is_empty();
    verdict(
        9,
        "determinism",
        pass,
        &format!("two runs, {} identical bytes", first.stdout.len()),
    );
}
