//! One PASS/FAIL line per acceptance criterion. Lines are written straight to
//! stdout so they show up even when the harness captures output.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use advdepth::diffkernel::{DifferentiableFn, FnBuilder};
use advdepth::guidance::{energy_gradient, jvpg_direction, EnergyFunction, GuidanceHook, GuidanceMode};
use advdepth::pipeline::{compare_with_random_regions, run_ensemble, AttackConfig, EnsembleReport};
use advdepth::sampler::{ddim_step, posterior_mean, sample, SamplerConfig};
use advdepth::schedule::NoiseSchedule;
use advdepth::scoremodels::{Condition, GaussianMixtureScore, LinearScore, MlpScore, ScoreModel};
use advdepth::spectra::{anisotropic_mixture, extremal_singular, full_jacobian, full_svd, injection_experiment, Extremal, InjectionConfig};
use advdepth::tensor::{max_abs_diff, relative_error};
use advdepth::victim::{mrsr, Mask, MaskRole, VictimModel};
use advdepth::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Criteria with runtime budgets are timed one at a time.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: usize, name: &str, pass: bool, detail: &str) -> bool {
    let line = format!("criterion {n:>2} {name}: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    pass
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// ---------------------------------------------------------------------------
// 1. differentiation oracle

fn random_net(rng: &mut ChaCha8Rng) -> DifferentiableFn {
    let n_in = rng.random_range(1..=16);
    let n_out = rng.random_range(1..=16);
    let hidden = rng.random_range(2..=64);
    let mut b = FnBuilder::new();
    let x = b.input(&[n_in]);
    let dense = |b: &mut FnBuilder, rng: &mut ChaCha8Rng, from: usize, to: usize, input| {
        let w = b.constant(Tensor::randn(&[to, from], rng).scale(1.0 / (from as f64).sqrt()));
        let bias = b.constant(Tensor::randn(&[to], rng).scale(0.1));
        b.affine(w, input, bias).unwrap()
    };
    let out = if rng.random_bool(0.5) {
        let h = dense(&mut b, rng, n_in, hidden, x);
        let h = b.tanh(h);
        let h2 = dense(&mut b, rng, hidden, hidden, h);
        let h2 = b.softplus(h2);
        dense(&mut b, rng, hidden, n_out, h2)
    } else {
        // Two branches multiplied together.
        let h = dense(&mut b, rng, n_in, hidden, x);
        let h = b.tanh(h);
        let g = dense(&mut b, rng, n_in, hidden, x);
        let g = b.softplus(g);
        let p = b.mul(h, g).unwrap();
        dense(&mut b, rng, hidden, n_out, p)
    };
    b.build(out).unwrap()
}

fn central_jvp(f: &DifferentiableFn, x: &Tensor, v: &Tensor, h: f64) -> Tensor {
    let plus = f.evaluate(&[&x.axpy(h, v).unwrap()]).unwrap();
    let minus = f.evaluate(&[&x.axpy(-h, v).unwrap()]).unwrap();
    plus.sub(&minus).unwrap().scale(0.5 / h)
}

#[test]
fn criterion_01_differentiation_oracle() {
    let _g = serial();
    let start = Instant::now();
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_rel, mut worst_adj) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let f = random_net(&mut rng);
        let n_in = f.input_shapes()[0][0];
        let n_out = f.output_shape()[0];
        let x = Tensor::randn(&[n_in], &mut rng);
        let v = Tensor::randn(&[n_in], &mut rng);
        let w = Tensor::randn(&[n_out], &mut rng);

        let jv = f.jvp(&x, &v).unwrap();
        worst_rel = worst_rel.max(relative_error(&jv, &central_jvp(&f, &x, &v, h), 1e-3).unwrap());

        // Jᵀw against a finite-difference Jacobian, column by column.
        let jtw = f.vjp(&x, &w).unwrap();
        let fd_jtw: Vec<f64> = (0..n_in)
            .map(|i| central_jvp(&f, &x, &Tensor::basis(&[n_in], i), h).dot(&w).unwrap())
            .collect();
        worst_rel = worst_rel.max(relative_error(&jtw, &Tensor::vector(fd_jtw), 1e-3).unwrap());

        // Gradient of the scalar ½‖f(x)‖².
        let mut b = FnBuilder::new();
        let xi = b.input(&[n_in]);
        let y = b.call(&f, &[xi]).unwrap();
        let s = b.sum_squares(y);
        let s = b.scale(s, 0.5);
        let e = b.build(s).unwrap();
        let g = e.grad(&x).unwrap();
        let fd_g: Vec<f64> = (0..n_in)
            .map(|i| central_jvp(&e, &x, &Tensor::basis(&[n_in], i), h).item().unwrap())
            .collect();
        worst_rel = worst_rel.max(relative_error(&g, &Tensor::vector(fd_g), 1e-3).unwrap());

        let lhs = w.dot(&jv).unwrap();
        let rhs = jtw.dot(&v).unwrap();
        worst_adj = worst_adj.max((lhs - rhs).abs() / lhs.abs().max(1.0));
    }
    let t = start.elapsed();
    let pass = worst_rel <= 1e-6 && worst_adj <= 1e-10 && t < Duration::from_secs(10);
    let detail = format!("max rel err {worst_rel:.2e} <= 1e-6, adjoint {worst_adj:.2e} <= 1e-10, {:.2} s < 10 s", secs(t));
    assert!(report(1, "differentiation oracle", pass, &detail), "{detail}");
}

// ---------------------------------------------------------------------------
// 2. DDIM exactness

#[test]
fn criterion_02_ddim_exactness() {
    let _g = serial();
    let start = Instant::now();
    let sched = NoiseSchedule::linear_beta(50, 1e-4, 0.2, 0.0).unwrap();
    let model = GaussianMixtureScore::unit_gaussian(&[2], sched.clone());
    let c = Condition::none();
    let n = 10_000;
    let terminals: Vec<Tensor> = (0..n)
        .map(|s| sample(&model, &c, &SamplerConfig::seeded(s), None).unwrap().terminal().clone())
        .collect();
    let (mut worst_mean, mut worst_var) = (0.0f64, 0.0f64);
    for d in 0..2 {
        let xs: Vec<f64> = terminals.iter().map(|z| z.data()[d]).collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n as f64 - 1.0);
        worst_mean = worst_mean.max(m.abs());
        worst_var = worst_var.max((v - 1.0).abs());
    }

    // Point mass at mu: the offset from sqrt(abar) mu shrinks by
    // sqrt((1 - abar_{t-1}) / (1 - abar_t)) per step.
    let mu = Tensor::vector(vec![0.7, -1.3, 2.1]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut z = Tensor::randn(&[3], &mut rng);
    let zero = Tensor::zeros(&[3]);
    let mut worst_step = 0.0f64;
    for t in (1..=sched.steps()).rev() {
        let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t - 1));
        let score = z.axpy(-ab.sqrt(), &mu).unwrap().scale(-1.0 / (1.0 - ab));
        let next = ddim_step(&z, t, &score, &zero, &sched).unwrap();
        let ratio = ((1.0 - ab_prev) / (1.0 - ab)).sqrt();
        let expect = mu.scale(ab_prev.sqrt()).axpy(ratio, &z.axpy(-ab.sqrt(), &mu).unwrap()).unwrap();
        worst_step = worst_step.max(max_abs_diff(&next, &expect).unwrap());
        z = next;
    }
    let t = start.elapsed();
    let pass = worst_mean <= 0.05 && worst_var <= 0.1 && worst_step <= 1e-12 && t < Duration::from_secs(30);
    let detail = format!(
        "|mean| {worst_mean:.4} <= 0.05, |var - 1| {worst_var:.4} <= 0.1, point-mass step err {worst_step:.2e} <= 1e-12, {:.2} s < 30 s",
        secs(t)
    );
    assert!(report(2, "ddim exactness", pass, &detail), "{detail}");
}

// ---------------------------------------------------------------------------
// 3. posterior mean

#[test]
fn criterion_03_tweedie() {
    let _g = serial();
    let sched = NoiseSchedule::desk_default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 8;
    let m = Tensor::randn(&[n], &mut rng);
    let v = Tensor::vector((0..n).map(|_| rng.random_range(0.05..3.0)).collect());
    let model = GaussianMixtureScore::gaussian(m.clone(), v.clone(), sched.clone()).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let t = rng.random_range(0..=sched.steps());
        let z = Tensor::randn(&[n], &mut rng).scale(2.0);
        let got = posterior_mean(&z, t, &model, &Condition::none()).unwrap();
        let ab = sched.alpha_bar(t);
        let expect: Vec<f64> = (0..n)
            .map(|i| {
                let (mi, vi, zi) = (m.data()[i], v.data()[i], z.data()[i]);
                mi + ab.sqrt() * vi / (ab * vi + 1.0 - ab) * (zi - ab.sqrt() * mi)
            })
            .collect();
        worst = worst.max(max_abs_diff(&got, &Tensor::vector(expect)).unwrap());
    }
    let pass = worst <= 1e-10;
    let detail = format!("max err {worst:.2e} <= 1e-10 over 1000 draws");
    assert!(report(3, "posterior mean", pass, &detail), "{detail}");
}

// ---------------------------------------------------------------------------
// 4. guidance monotonicity

#[test]
fn criterion_04_guidance_monotonicity() {
    let _g = serial();
    let sched = NoiseSchedule::desk_default();
    let model = GaussianMixtureScore::unit_gaussian(&[4], sched);
    let goal = Tensor::vector(vec![2.0, -1.0, 1.5, 0.5]);
    let gammas = [0.0, 0.5, 1.0, 2.0];
    let dists: Vec<f64> = gammas
        .iter()
        .map(|&g| {
            let hook = GuidanceHook::new(GuidanceMode::EnergyDps, EnergyFunction::quadratic(goal.clone()), g);
            (0..200u64)
                .map(|s| {
                    let traj = sample(&model, &Condition::none(), &SamplerConfig::seeded(s), Some(&hook)).unwrap();
                    traj.terminal().sub(&goal).unwrap().norm()
                })
                .sum::<f64>()
                / 200.0
        })
        .collect();
    let pass = dists.windows(2).all(|w| w[1] < w[0]);
    let detail = format!("mean distance at gamma {gammas:?}: {}", fmt_list(&dists));
    assert!(report(4, "guidance monotonicity", pass, &detail), "{detail}");
}

fn fmt_list(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

// ---------------------------------------------------------------------------
// 5. spectral modulation

#[test]
fn criterion_05_spectral_modulation() {
    let _g = serial();
    // J = -R diag(4, 1) Rᵀ with a 30 degree rotation R.
    let (c, s) = (30f64.to_radians().cos(), 30f64.to_radians().sin());
    let r = Tensor::matrix(2, 2, vec![c, -s, s, c]).unwrap();
    let mut a = vec![0.0; 4];
    for i in 0..2 {
        for j in 0..2 {
            a[i * 2 + j] = -(4.0 * r.at2(i, 0) * r.at2(j, 0) + r.at2(i, 1) * r.at2(j, 1));
        }
    }
    let sched = NoiseSchedule::desk_default();
    let model = LinearScore::new(&[2], Tensor::matrix(2, 2, a).unwrap(), None, sched).unwrap();
    let cond = Condition::none();
    let z = Tensor::vector(vec![0.3, -0.8]);
    let goal = Tensor::vector(vec![-0.4, 0.9]);
    // t = 0, where abar = 1.
    let delta = energy_gradient(&EnergyFunction::quadratic(goal), &z, 0, &model, &cond).unwrap().grad_zt;
    let d = jvpg_direction(&model, &z, 0, &cond, &delta).unwrap();
    let svd = full_svd(&full_jacobian(&model, &z, 0, &cond).unwrap()).unwrap();
    let gain = |i: usize| svd.left[i].dot(&d).unwrap().abs() / svd.right[i].dot(&delta).unwrap().abs();
    let ratio = gain(0) / gain(1);
    let pass = (ratio - 4.0).abs() <= 1e-9;
    let detail = format!("u+/u- gain ratio {ratio:.12}, |ratio - 4| = {:.2e} <= 1e-9", (ratio - 4.0).abs());
    assert!(report(5, "spectral modulation", pass, &detail), "{detail}");
}

// ---------------------------------------------------------------------------
// 6. spectrum correctness

#[test]
fn criterion_06_spectrum() {
    let _g = serial();
    let sched = NoiseSchedule::desk_default();
    let cond = Condition::none();
    let n = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let var: Vec<f64> = (0..n).map(|i| 0.1 * 1.25f64.powi(i as i32)).collect();
    let gauss = GaussianMixtureScore::gaussian(Tensor::zeros(&[n]), Tensor::vector(var.clone()), sched.clone()).unwrap();
    let mut worst_analytic = 0.0f64;
    for t in [0, 5, 20, 35, 50] {
        let ab = sched.alpha_bar(t);
        let sv: Vec<f64> = var.iter().map(|v| 1.0 / (ab * v + 1.0 - ab)).collect();
        let hi = sv.iter().cloned().fold(f64::MIN, f64::max);
        let lo = sv.iter().cloned().fold(f64::MAX, f64::min);
        let z = Tensor::randn(&[n], &mut rng);
        let top = extremal_singular(&gauss, &z, t, &cond, Extremal::Top, 50_000, 1e-15, 0).unwrap();
        let bottom = extremal_singular(&gauss, &z, t, &cond, Extremal::Bottom, 50_000, 1e-15, 0).unwrap();
        worst_analytic = worst_analytic.max((top.values[0] - hi).abs()).max((bottom.values[0] - lo).abs());
    }
    let mut worst_dense = 0.0f64;
    for seed in 0..10u64 {
        let net = MlpScore::seeded(&[n], &[32], 0, seed, sched.clone()).unwrap();
        let t = rng.random_range(1..=sched.steps());
        let z = Tensor::randn(&[n], &mut rng);
        let dense = full_svd(&full_jacobian(&net, &z, t, &cond).unwrap()).unwrap();
        let top = extremal_singular(&net, &z, t, &cond, Extremal::Top, 200_000, 1e-15, seed).unwrap();
        let bottom = extremal_singular(&net, &z, t, &cond, Extremal::Bottom, 200_000, 1e-15, seed).unwrap();
        worst_dense = worst_dense
            .max((top.values[0] - dense.values[0]).abs())
            .max((bottom.values[0] - dense.values[n - 1]).abs());
    }
    let pass = worst_analytic <= 1e-6 && worst_dense <= 1e-6;
    let detail = format!("analytic err {worst_analytic:.2e} <= 1e-6, dense svd err {worst_dense:.2e} <= 1e-6");
    assert!(report(6, "spectrum correctness", pass, &detail), "{detail}");
}

// ---------------------------------------------------------------------------
// 7. structured vs destructive injection

#[test]
fn criterion_07_injection() {
    let _g = serial();
    let start = Instant::now();
    let model = anisotropic_mixture(NoiseSchedule::desk_default()).unwrap();
    let cfg = InjectionConfig::for_schedule(model.schedule());
    let seeds: Vec<u64> = (0..500).collect();
    let summary = injection_experiment(&model, &Condition::none(), &seeds, &cfg).unwrap();
    let t = start.elapsed();
    let rate = summary.top_win_rate();
    let (base, top, bottom) = summary.mean_log_density();
    let pass = rate >= 0.9 && t < Duration::from_secs(120);
    let detail = format!(
        "u+ beats u- on {rate:.3} of 500 seeds (need >= 0.9); mean log-density none {base:.3} u+ {top:.3} u- {bottom:.3}; {:.1} s < 120 s",
        secs(t)
    );
    assert!(report(7, "top vs bottom injection", pass, &detail), "{detail}");
}

// ---------------------------------------------------------------------------
// 8 and 9 share one ensemble run.

fn ensemble() -> &'static (EnsembleReport, Duration) {
    static CELL: OnceLock<(EnsembleReport, Duration)> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = AttackConfig::default();
        assert_eq!(cfg.lambda, 2.0);
        assert_eq!(cfg.mode, GuidanceMode::Jvpg);
        assert_eq!(cfg.ensemble.scenes, 100);
        let start = Instant::now();
        let rep = run_ensemble(&cfg).unwrap();
        (rep, start.elapsed())
    })
}

#[test]
fn criterion_08_planted_recovery() {
    let _g = serial();
    let (rep, _) = ensemble();
    let top1 = rep.planted_top1_rate();
    let cmp = compare_with_random_regions(rep, 20).unwrap();
    let wins = cmp.srs_win_rate();
    let pass = top1 >= 0.95 && wins >= 0.9 && rep.failures() == 0;
    let random_mean = cmp.random_mean_xi.iter().sum::<f64>() / cmp.random_mean_xi.len() as f64;
    let detail = format!(
        "planted top-1 {top1:.2} >= 0.95; srs beats random on {wins:.2} of 20 draws >= 0.9 (srs {:.4}, random mean {random_mean:.4})",
        cmp.srs_mean_xi
    );
    assert!(report(8, "planted recovery", pass, &detail), "{detail}");
}

#[test]
fn criterion_09_attack_trend() {
    let _g = serial();
    let (rep, t) = ensemble();
    let xi = rep.mean_xi();
    let ctrl = rep.mean_abs_control_xi();
    let monotone = xi.windows(2).all(|w| w[1] >= w[0]);
    let worst_ctrl = ctrl.iter().cloned().fold(0.0, f64::max);
    let pass = xi.len() == 4 && xi[3] >= 0.2 && worst_ctrl <= 0.05 && monotone && *t < Duration::from_secs(600);
    let detail = format!(
        "mean mrsr k=1..4 {} (k=4 >= 0.2, non-decreasing); control |mrsr| max {worst_ctrl:.4} <= 0.05; {:.1} s < 600 s",
        fmt_list(&xi),
        secs(*t)
    );
    assert!(report(9, "attack trend", pass, &detail), "{detail}");
}

// ---------------------------------------------------------------------------
// 10. shift-ratio semantics

#[test]
fn criterion_10_mrsr_semantics() {
    let _g = serial();
    // Depth equals intensity.
    let mut b = FnBuilder::new();
    let x = b.input(&[1, 6, 6]);
    let d = b.reshape(x, &[6, 6]).unwrap();
    let victim = VictimModel::custom(b.build(d).unwrap(), "identity").unwrap();
    let mask = Mask::from_box(6, 6, 2, 1, 3, 4, MaskRole::Target).unwrap();
    let img = Tensor::full(&[1, 6, 6], 0.4);
    let shifted = Tensor::full(&[1, 6, 6], 0.6);
    let xi = mrsr(&victim, &img, &shifted, &mask).unwrap();
    let same = mrsr(&victim, &img, &img, &mask).unwrap();
    let pass = (xi - 0.5).abs() <= 1e-12 && same == 0.0;
    let detail = format!("uniform shift gives {xi:.15} (|err| {:.1e} <= 1e-12), identity gives {same}", (xi - 0.5).abs());
    assert!(report(10, "mrsr semantics", pass, &detail), "{detail}");
}

// ---------------------------------------------------------------------------
// 11. CLI determinism

fn run_cli(args: &[&str]) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_advdepth")).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn criterion_11_cli_determinism() {
    let _g = serial();
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let small = ["--set", "scenes=4", "--set", "srs_iterations=4"];
    let cases: Vec<(&str, Vec<String>)> = vec![
        ("schedule", vec![]),
        ("sample", vec!["--class".into(), "2".into(), "--gamma".into(), "0.5".into()]),
        ("srs", vec![]),
        ("attack", vec![]),
        ("attack-ensemble", vec!["--ensemble".into(), "--random-draws".into(), "3".into()]),
        ("compare", vec!["--seeds".into(), "0..2".into()]),
        ("spectrum", vec!["--seeds".into(), "0..3".into()]),
    ];
    let mut failed = Vec::new();
    for (name, extra) in &cases {
        let sub = name.split('-').next().unwrap();
        let mut outputs = Vec::new();
        for rep in 0..2 {
            let dir = root.join(format!("{name}_{rep}"));
            let mut args: Vec<String> = vec![sub.into(), "--out".into()];
            args.push(if sub == "schedule" { dir.with_extension("txt") } else { dir.clone() }.display().to_string());
            args.extend(small.iter().map(|s| s.to_string()));
            args.extend(extra.iter().cloned());
            let refs: Vec<&str> = args.iter().map(String::as_str).collect();
            let stdout = run_cli(&refs);
            let files = if sub == "schedule" {
                vec![(PathBuf::new(), std::fs::read(dir.with_extension("txt")).unwrap())]
            } else {
                tree(&dir)
            };
            outputs.push((stdout, files));
        }
        if outputs[0] != outputs[1] || outputs[0].1.is_empty() {
            failed.push(name.to_string());
        }
    }
    // eval-mrsr on the single-scene attack images.
    let a = root.join("attack_0");
    let args = [
        "eval-mrsr",
        "--image",
        &a.join("scene.pgm").display().to_string(),
        "--attacked",
        &a.join("attacked.pgm").display().to_string(),
        "--mask",
        &a.join("target_mask.pgm").display().to_string(),
    ]
    .map(|s| s.to_string());
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    if run_cli(&refs) != run_cli(&refs) {
        failed.push("eval-mrsr".into());
    }
    let pass = failed.is_empty();
    let detail = if pass {
        "8 subcommand runs byte-identical".to_string()
    } else {
        format!("differing outputs: {}", failed.join(", "))
    };
    assert!(report(11, "cli determinism", pass, &detail), "{detail}");
}
