//! Acceptance suite: one test per criterion, each printing a single
//! pass/fail line (run with `--nocapture` to see the lines as they come).

use std::path::PathBuf;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use rgc_core::eval as ev;
use rgc_core::mcrbm::{self, Hyperparams, LatentState, McRbmModel};
use rgc_core::rates as rt;
use rgc_pipeline::{ExperimentConfig, Protocol, Runner};

fn verdict(name: &str, ok: bool, detail: &str) {
    println!("criterion {name}: {} ({detail})", if ok { "pass" } else { "FAIL" });
    assert!(ok, "criterion {name} failed: {detail}");
}

/// A tiny model with all parameters perturbed away from their init values.
fn random_model(rng: &mut ChaCha8Rng, n_vis: usize, n_mean: usize, n_factors: usize, n_cov: usize) -> McRbmModel {
    let mut hyper = Hyperparams::new(n_vis);
    hyper.n_mean = n_mean;
    hyper.n_factors = n_factors;
    hyper.n_cov = n_cov;
    hyper.seed = rng.random();
    let mut m = McRbmModel::init(&hyper).unwrap();
    let randn = |scale: f64, rng: &mut ChaCha8Rng| {
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        scale * z
    };
    for x in m.w.iter_mut() {
        *x = randn(0.5, rng);
    }
    for x in m.a.iter_mut() {
        *x = randn(0.5, rng);
    }
    for x in m.c.iter_mut() {
        *x = randn(0.5, rng);
    }
    for x in m.r.iter_mut() {
        *x = randn(1.0, rng);
    }
    for x in m.p.iter_mut() {
        *x = -randn(0.5, rng).abs();
    }
    for x in m.d.iter_mut() {
        *x = randn(0.5, rng);
    }
    // Restore the model invariants: unit-norm factor columns.
    for mut col in m.r.columns_mut() {
        let norm = col.dot(&col).sqrt();
        if norm > 0.0 {
            col.mapv_inplace(|x| x / norm);
        }
    }
    m
}

fn random_visible(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| {
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        z
    })
}

fn bits(idx: usize, n: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |j| ((idx >> j) & 1) as f64)
}

#[test]
fn criterion_01_free_energy_matches_brute_force() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n_vis = rng.random_range(1..=4);
        let n_mean = rng.random_range(1..=5);
        let n_cov = rng.random_range(1..=(10 - n_mean).min(5));
        let n_factors = rng.random_range(1..=4);
        let m = random_model(&mut rng, n_vis, n_mean, n_factors, n_cov);
        let v = random_visible(&mut rng, n_vis);
        let f = m.free_energy(&v.view()).unwrap();
        // Brute force: log-sum-exp over every joint hidden configuration.
        let mut energies = Vec::new();
        for im in 0..(1usize << n_mean) {
            for ic in 0..(1usize << n_cov) {
                let h_m = bits(im, n_mean);
                let h_c = bits(ic, n_cov);
                energies.push(-m.total_energy(&v.view(), &h_m.view(), &h_c.view()).unwrap());
            }
        }
        let peak = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = energies.iter().map(|e| (e - peak).exp()).sum();
        let f_brute = -(peak + sum.ln());
        // Relative error of e^{-F} against the enumerated partition sum.
        let rel = ((f_brute - f).exp() - 1.0).abs();
        worst = worst.max(rel);
    }
    let elapsed = started.elapsed().as_secs_f64();
    verdict(
        "1 free-energy oracle",
        worst < 1e-10 && elapsed < 10.0,
        &format!("worst rel err {worst:.2e}, {elapsed:.2}s"),
    );
}

#[test]
fn criterion_02_gradients_match_finite_differences() {
    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-5;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n_vis = rng.random_range(1..=4);
        let (nm, nf, nc) =
            (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3));
        let m = random_model(&mut rng, n_vis, nm, nf, nc);
        let v = random_visible(&mut rng, n_vis);
        let g = m.free_energy_grads(&v.view()).unwrap();
        let mut check = |get: &dyn Fn(&McRbmModel) -> Vec<f64>,
                         set: &dyn Fn(&mut McRbmModel, usize, f64),
                         analytic: &[f64]| {
            for (i, &ga) in analytic.iter().enumerate() {
                let x0 = get(&m)[i];
                let mut hi = m.clone();
                set(&mut hi, i, x0 + STEP);
                let mut lo = m.clone();
                set(&mut lo, i, x0 - STEP);
                let fd = (hi.free_energy(&v.view()).unwrap() - lo.free_energy(&v.view()).unwrap())
                    / (2.0 * STEP);
                let rel = (ga - fd).abs() / ga.abs().max(fd.abs()).max(1e-3);
                worst = worst.max(rel);
            }
        };
        check(
            &|m| m.w.iter().cloned().collect(),
            &|m, i, x| *m.w.iter_mut().nth(i).unwrap() = x,
            &g.w.iter().cloned().collect::<Vec<_>>(),
        );
        check(
            &|m| m.a.to_vec(),
            &|m, i, x| m.a[i] = x,
            &g.a.to_vec(),
        );
        check(
            &|m| m.c.to_vec(),
            &|m, i, x| m.c[i] = x,
            &g.c.to_vec(),
        );
        check(
            &|m| m.r.iter().cloned().collect(),
            &|m, i, x| *m.r.iter_mut().nth(i).unwrap() = x,
            &g.r.iter().cloned().collect::<Vec<_>>(),
        );
        check(
            &|m| m.p.iter().cloned().collect(),
            &|m, i, x| *m.p.iter_mut().nth(i).unwrap() = x,
            &g.p.iter().cloned().collect::<Vec<_>>(),
        );
        check(
            &|m| m.d.to_vec(),
            &|m, i, x| m.d[i] = x,
            &g.d.to_vec(),
        );
    }
    let elapsed = started.elapsed().as_secs_f64();
    verdict(
        "2 gradient check",
        worst < TOL && elapsed < 30.0,
        &format!("worst rel err {worst:.2e}, {elapsed:.2}s"),
    );
}

#[test]
fn criterion_03_conditionals_match_energy_differences() {
    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n_vis = rng.random_range(1..=4);
        let n_mean = rng.random_range(1..=3);
        let n_cov = rng.random_range(1..=3);
        let nf = rng.random_range(1..=3);
        let m = random_model(&mut rng, n_vis, n_mean, nf, n_cov);
        let v = random_visible(&mut rng, n_vis);
        let (p_m, p_c) = m.infer_hidden(&v.view()).unwrap();
        // Flip one random bit of each layer inside a random configuration;
        // the conditional must equal sigma(-(E_on - E_off)).
        let base_m = bits(rng.random_range(0..(1usize << n_mean)), n_mean);
        let base_c = bits(rng.random_range(0..(1usize << n_cov)), n_cov);
        let jm = rng.random_range(0..n_mean);
        let jc = rng.random_range(0..n_cov);
        let mut on = base_m.clone();
        on[jm] = 1.0;
        let mut off = base_m.clone();
        off[jm] = 0.0;
        let de = m.total_energy(&v.view(), &on.view(), &base_c.view()).unwrap()
            - m.total_energy(&v.view(), &off.view(), &base_c.view()).unwrap();
        worst = worst.max((p_m[jm] - sigmoid(-de)).abs());
        let mut on = base_c.clone();
        on[jc] = 1.0;
        let mut off = base_c.clone();
        off[jc] = 0.0;
        let de = m.total_energy(&v.view(), &base_m.view(), &on.view()).unwrap()
            - m.total_energy(&v.view(), &base_m.view(), &off.view()).unwrap();
        worst = worst.max((p_c[jc] - sigmoid(-de)).abs());
    }
    verdict("3 conditional consistency", worst < 1e-12, &format!("worst abs err {worst:.2e}"));
}

#[test]
fn criterion_04_sampler_moments_match_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let m = random_model(&mut rng, 2, 2, 3, 2);
    let h_m = ndarray::arr1(&[1.0, 0.0]);
    let h_c = ndarray::arr1(&[1.0, 1.0]);
    // Closed form: precision M, Sigma = M^-1, mu = Sigma (W h_m + a).
    let prec = m.visible_precision(&h_c.view()).unwrap();
    let det = prec[(0, 0)] * prec[(1, 1)] - prec[(0, 1)] * prec[(1, 0)];
    let sigma = ndarray::arr2(&[
        [prec[(1, 1)] / det, -prec[(0, 1)] / det],
        [-prec[(1, 0)] / det, prec[(0, 0)] / det],
    ]);
    let mu = sigma.dot(&(m.w.dot(&h_m) + &m.a));
    let n = 100_000usize;
    let mut mean = Array1::<f64>::zeros(2);
    let mut sq = Array2::<f64>::zeros((2, 2));
    for _ in 0..n {
        let v = m.sample_visible(&h_m.view(), &h_c.view(), &mut rng).unwrap();
        mean += &v;
        for i in 0..2 {
            for j in 0..2 {
                sq[(i, j)] += v[i] * v[j];
            }
        }
    }
    mean /= n as f64;
    let mut cov = Array2::<f64>::zeros((2, 2));
    for i in 0..2 {
        for j in 0..2 {
            cov[(i, j)] = sq[(i, j)] / n as f64 - mean[i] * mean[j];
        }
    }
    let frob = |a: &Array2<f64>| a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cov_err = frob(&(&cov - &sigma)) / frob(&sigma);
    let mean_err = {
        let d = &mean - &mu;
        let scale = mu.dot(&mu).sqrt().max(sigma.diag().sum().sqrt());
        d.dot(&d).sqrt() / scale
    };
    verdict(
        "4 sampler moments",
        cov_err < 0.05 && mean_err < 0.05,
        &format!("cov err {cov_err:.3}, mean err {mean_err:.3} over {n} draws"),
    );
}

#[test]
fn criterion_05_mutual_information_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst = 0.0f64;
    let mut bounds_ok = true;
    for _ in 0..50 {
        let ns = rng.random_range(1..=8usize);
        let nl = rng.random_range(1..=8usize);
        let mut counts = std::collections::BTreeMap::new();
        for s in 0..ns {
            for l in 0..nl {
                let c = rng.random_range(0..20u64);
                if c > 0 {
                    counts.insert((format!("s{s}"), l as i64), c);
                }
            }
        }
        if counts.is_empty() {
            counts.insert(("s0".to_string(), 0), 1);
        }
        let report = ev::mutual_information_from_counts(counts.clone(), false).unwrap();
        // Direct evaluation: sum_ij p_ij log2(p_ij / (p_i q_j)).
        let total: u64 = counts.values().sum();
        let mut ps = std::collections::BTreeMap::new();
        let mut ql = std::collections::BTreeMap::new();
        for ((s, l), &c) in &counts {
            *ps.entry(s.clone()).or_insert(0u64) += c;
            *ql.entry(*l).or_insert(0u64) += c;
        }
        let mut mi = 0.0;
        for ((s, l), &c) in &counts {
            let pij = c as f64 / total as f64;
            let pi = ps[s] as f64 / total as f64;
            let qj = ql[l] as f64 / total as f64;
            mi += pij * (pij / (pi * qj)).log2();
        }
        worst = worst.max((mi - report.mi_bits).abs());
        fn entropy(counts: impl Iterator<Item = u64>, total: u64) -> f64 {
            counts
                .map(|c| {
                    let p = c as f64 / total as f64;
                    -p * p.log2()
                })
                .sum()
        }
        let cap =
            entropy(ps.values().cloned(), total).min(entropy(ql.values().cloned(), total));
        if report.mi_bits < -1e-12 || report.mi_bits > cap + 1e-9 {
            bounds_ok = false;
        }
    }
    // Bounds fuzz on raw latent states as well.
    for _ in 0..50 {
        let n = rng.random_range(1..200usize);
        let states: Vec<LatentState> = (0..n)
            .map(|_| LatentState {
                h_m: (0..3).map(|_| rng.random_range(0..2u8)).collect(),
                h_c: (0..2).map(|_| rng.random_range(0..2u8)).collect(),
            })
            .collect();
        let labels: Vec<i64> = (0..n).map(|_| rng.random_range(0..5i64)).collect();
        let r = ev::mutual_information(&states, &labels, false).unwrap();
        if r.mi_bits < -1e-12 || r.mi_bits > r.h_states_bits.min(r.h_labels_bits) + 1e-9 {
            bounds_ok = false;
        }
        if !(0.0..=1.0 + 1e-12).contains(&r.normalized_mi) {
            bounds_ok = false;
        }
    }
    verdict(
        "5 mutual-information oracle",
        worst < 1e-12 && bounds_ok,
        &format!("worst abs err {worst:.2e}, bounds {}", if bounds_ok { "hold" } else { "violated" }),
    );
}

fn test_out_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("rgc_acceptance_{name}"));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

#[test]
fn criterion_06_gratings_normalized_mi_and_triggered_average() {
    let started = Instant::now();
    let out = test_out_dir("gratings8");
    let cfg = ExperimentConfig::default_for(Protocol::Gratings8, out.clone(), 7);
    Runner::new(cfg, None).unwrap().run().unwrap();
    let mut mis = Vec::new();
    let mut best_state: Option<(u64, f64)> = None; // (count, pearson r)
    for entry in std::fs::read_dir(out.join("eval/all")).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        if !name.ends_with(".summary.json") {
            continue;
        }
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        mis.push(v["normalized_mi"].as_f64().unwrap());
        for st in v["top_states"].as_array().unwrap() {
            let count = st["count"].as_u64().unwrap();
            let r = st["pearson_r_vs_label_mean"].as_f64().unwrap();
            if best_state.map_or(true, |(c, _)| count > c) {
                best_state = Some((count, r));
            }
        }
    }
    let mean_mi = mis.iter().sum::<f64>() / mis.len() as f64;
    let (top_count, top_r) = best_state.expect("at least one sufficiently occupied state");
    let elapsed = started.elapsed().as_secs_f64();
    verdict(
        "6 gratings desk-scale",
        mean_mi >= 0.5 && top_r >= 0.6 && elapsed < 900.0,
        &format!(
            "held-out normalized MI {mean_mi:.3} over {} patches, top state count {top_count} r {top_r:.3}, {elapsed:.0}s",
            mis.len()
        ),
    );
}

#[test]
fn criterion_07_gaba_mi_ordering_over_seeds() {
    let out_base = test_out_dir("gaba3");
    let seeds = [1u64, 2, 3, 4, 5];
    // freq -> number of seeds with the non-increasing ordering.
    let mut ordered_count: std::collections::BTreeMap<String, u32> = std::collections::BTreeMap::new();
    for &seed in &seeds {
        let out = out_base.join(format!("seed{seed}"));
        let mut cfg = ExperimentConfig::default_for(Protocol::Gaba3, out.clone(), seed);
        cfg.stimulus.gaba_duration_s = 40.0;
        Runner::new(cfg, None).unwrap().run().unwrap();
        let csv = std::fs::read_to_string(out.join("eval/gaba_verdict.csv")).unwrap();
        for line in csv.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            let (freq, ordered) = (cols[0], cols[3] == "true");
            let e = ordered_count.entry(freq.to_string()).or_insert(0);
            if ordered {
                *e += 1;
            }
        }
    }
    let ok = !ordered_count.is_empty() && ordered_count.values().all(|&c| c >= 4);
    let detail: Vec<String> =
        ordered_count.iter().map(|(f, c)| format!("{f} cpd {c}/5")).collect();
    verdict("7 gaba stage ordering", ok, &detail.join(", "));
}

#[test]
fn criterion_08_active_selection_keeps_exactly_modulated_neurons() {
    let n_samples = 200;
    let n = 20;
    let mut values = Array2::<f64>::zeros((n_samples, n));
    for t in 0..n_samples {
        for k in 0..n {
            values[(t, k)] = if k < 10 {
                5.0 // constant-rate neurons
            } else {
                10.0 + 5.0 * (t as f64 * 0.1 + k as f64).sin()
            };
        }
    }
    let rm = rt::RateMatrix {
        values,
        sample_times_s: (0..n_samples).map(|t| 0.01 * (t as f64 + 0.5)).collect(),
        neuron_ids: (0..n as u64).collect(),
        neuron_pos_um: (0..n).map(|k| (k as f64, 0.0)).collect(),
        labels: vec![-1; n_samples],
        standardized: false,
        col_means: None,
        col_stds: None,
        bin_s: 0.01,
    };
    let kept = rt::select_active(&rm, 1e-8).unwrap();
    let expect: Vec<u64> = (10..20).collect();
    verdict(
        "8 active-neuron selection",
        kept.neuron_ids == expect,
        &format!("kept {:?}", kept.neuron_ids),
    );
}

#[test]
fn criterion_09_repeated_runs_produce_identical_digests() {
    // A compact gratings8 configuration keeps the double run quick; every
    // stage still executes end to end.
    let make_cfg = |out: PathBuf| {
        let mut cfg = ExperimentConfig::default_for(Protocol::Gratings8, out, 7);
        cfg.stimulus.height = 16;
        cfg.stimulus.width = 16;
        cfg.stimulus.n_orientations = 2;
        cfg.stimulus.repetitions = 2;
        cfg.retina.n_neurons = 32;
        cfg.retina.region_rows = (0, 16);
        cfg.retina.region_cols = (0, 16);
        cfg.model.n_mean = 8;
        cfg.model.n_factors = 8;
        cfg.model.n_cov = 4;
        cfg.model.epochs = 3;
        cfg.model.n_chains = 20;
        cfg
    };
    let out_a = test_out_dir("determinism_a");
    let out_b = test_out_dir("determinism_b");
    Runner::new(make_cfg(out_a.clone()), None).unwrap().run().unwrap();
    Runner::new(make_cfg(out_b.clone()), None).unwrap().run().unwrap();
    let read = |out: &PathBuf| -> serde_json::Value {
        let text = std::fs::read_to_string(out.join("manifest.json")).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        // Wall-clock timings are the only fields allowed to differ.
        for (_, stage) in v["stages"].as_object_mut().unwrap() {
            stage.as_object_mut().unwrap().remove("wall_ms");
        }
        v
    };
    let (a, b) = (read(&out_a), read(&out_b));
    verdict(
        "9 determinism",
        a == b,
        &format!(
            "{} stages, {} files digested",
            a["stages"].as_object().map_or(0, |s| s.len()),
            a["stages"]
                .as_object()
                .map_or(0, |s| s.values().map(|v| v["files"].as_object().unwrap().len()).sum())
        ),
    );
}

#[test]
fn criterion_10_checkpoint_roundtrip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let dir = test_out_dir("checkpoint");
    std::fs::create_dir_all(&dir).unwrap();
    let m = random_model(&mut rng, 4, 3, 5, 3);
    let path = dir.join("model.mcrb");
    mcrbm::checkpoint::save(&m, &path).unwrap();
    let loaded = mcrbm::checkpoint::load(&path).unwrap();
    let mut ok = true;
    for _ in 0..100 {
        let v = random_visible(&mut rng, 4);
        let (pm0, pc0) = m.infer_hidden(&v.view()).unwrap();
        let (pm1, pc1) = loaded.infer_hidden(&v.view()).unwrap();
        let same = pm0.iter().zip(pm1.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
            && pc0.iter().zip(pc1.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            ok = false;
        }
    }
    verdict("10 checkpoint round-trip", ok, "100 random inputs bit-exact");
}
