//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! The two criteria that train full-length runs (6 and 10) are skipped by
//! default; run them with
//! `cargo test --release -p ucdgan-cli --test acceptance -- --ignored`
//! (only those two) or `-- --include-ignored` (everything).

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ucdgan::config::{TrainConfig, Variant};
use ucdgan::dino::{dino_loss, dino_term_for_step, run_student, run_teacher, DinoState, Views};
use ucdgan::gradcheck::LossPath;
use ucdgan::losses::{
    config_c_d_loss, ucd_d_loss, vanilla_d_loss, ClassLossKind, GanLossKind, LossWeights,
};
use ucdgan::metrics::{frechet_distance, knn_precision_recall, GaussianSummary};
use ucdgan::nets::{select_logit, DiscriminatorNet, HeadKind};
use ucdgan::oracle::{
    builtin_suite, classifier_property_check, closed_form_dstar, optimize_tabular_d, OracleBudget, OracleLoss,
    LAMBDA1_GRID,
};
use ucdgan::probe::{accuracy_from_scores, probe_auto};
use ucdgan::trainer::{latent_batch, run_training, RunSummary};
use ucdgan::{Graph, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

/// `(id, name, check)`
type Criterion = (u32, &'static str, fn() -> Outcome);
/// `(lambda1, lambda2, frechet_pooled, probe_top1, seed)`
type AblationRow = (f64, f64, f64, f64, u64);

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ucdgan"))
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn c1_oracle() -> Outcome {
    let out = scratch("oracle");
    let start = Instant::now();
    let status = bin()
        .args(["oracle", "--random-games", "60", "--seed", "0", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    let elapsed = start.elapsed();
    let report = std::fs::read_to_string(out.join("report.jsonl")).unwrap_or_default();
    let records: Vec<serde_json::Value> = report.lines().filter_map(|l| serde_json::from_str(l).ok()).collect();
    let worst = records
        .iter()
        .filter_map(|r| r["max_deviation"].as_f64())
        .fold(0.0, f64::max);

    // equilibrium games must land on one half wherever there is mass
    let suite = builtin_suite(0, 60);
    let random = suite.iter().filter(|(n, _)| n.starts_with("random-")).count();
    let shapes_ok = suite
        .iter()
        .filter(|(n, _)| n.starts_with("random-"))
        .all(|(_, g)| (2..=10).contains(&g.points()) && (2..=4).contains(&g.classes()));
    let mut eq_worst: f64 = 0.0;
    for (_, game) in suite.iter().filter(|(n, _)| n.ends_with("equilibrium")) {
        let mut losses = vec![OracleLoss::Adversarial];
        losses.extend(LAMBDA1_GRID.map(|lambda1| OracleLoss::WithClassification {
            lambda1,
            kind: ClassLossKind::CrossEntropy,
        }));
        for loss in losses {
            let sol = optimize_tabular_d(game, loss, OracleBudget::default()).unwrap();
            for x in 0..game.points() {
                let c = game.labels()[x];
                if game.q(x, c) > 0.0 {
                    eq_worst = eq_worst.max((sol.d.get(x, c) - 0.5).abs());
                }
            }
        }
    }
    let pass = status.status.success()
        && random >= 50
        && shapes_ok
        && worst < 1e-3
        && eq_worst < 1e-3
        && elapsed < Duration::from_secs(120);
    outcome(
        pass,
        format!(
            "{random} random games, {} records, worst |d - q/(q+p)| = {worst:.2e}, worst equilibrium |d - 0.5| = {eq_worst:.2e}, {:.1}s",
            records.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn c2_gradients() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut worst_path = None;
    for path in LossPath::all() {
        for seed in 0..20 {
            let e = path.check(seed, 40).unwrap();
            if e > worst {
                worst = e;
                worst_path = Some(path);
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-3 && elapsed < Duration::from_secs(60),
        format!(
            "{} loss paths x 20 points, max relative error {worst:.2e} ({worst_path:?}), {:.1}s",
            LossPath::all().len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn c3_reductions() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_cb: f64 = 0.0;
    let mut worst_bv: f64 = 0.0;
    for _ in 0..200 {
        let k = rng.random_range(2..9);
        let n = rng.random_range(1..17);
        let rl = Tensor::new(vec![n, k], (0..n * k).map(|_| rng.random_range(-6.0..6.0)).collect()).unwrap();
        let fl = Tensor::new(vec![n, k], (0..n * k).map(|_| rng.random_range(-6.0..6.0)).collect()).unwrap();
        let ry: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let fy: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let l1 = rng.random_range(0.0..1.0);
        for gan in [GanLossKind::LeastSquares, GanLossKind::NonSaturating] {
            for class in [ClassLossKind::CrossEntropy, ClassLossKind::MulticlassHinge { margin: 1.0 }] {
                let mut g = Graph::new();
                let r = g.constant(rl.clone());
                let f = g.constant(fl.clone());
                let dino = g.constant(Tensor::scalar(rng.random_range(0.0..5.0)));
                let w = LossWeights::new(l1, 0.0).unwrap();
                let c = config_c_d_loss(&mut g, r, &ry, f, &fy, w, gan, class, dino).unwrap().total;
                let b = ucd_d_loss(&mut g, r, &ry, f, &fy, w, gan, class).unwrap().total;
                worst_cb = worst_cb.max((g.value(c).item().unwrap() - g.value(b).item().unwrap()).abs());
                let w0 = LossWeights::new(0.0, 0.0).unwrap();
                let b0 = ucd_d_loss(&mut g, r, &ry, f, &fy, w0, gan, class).unwrap().total;
                let rs = select_logit(&mut g, r, &ry).unwrap();
                let fs = select_logit(&mut g, f, &fy).unwrap();
                let v = vanilla_d_loss(&mut g, rs, fs, gan).unwrap();
                worst_bv = worst_bv.max((g.value(b0).item().unwrap() - g.value(v).item().unwrap()).abs());
            }
        }
    }
    outcome(
        worst_cb <= 1e-12 && worst_bv <= 1e-12,
        format!("800 random cases: |C(l2=0) - B| <= {worst_cb:.1e}, |B(l1=0) - vanilla| <= {worst_bv:.1e}"),
    )
}

fn c4_chance() -> Outcome {
    let (n, k) = (10_000usize, 8usize);
    let sigma3 = 3.0 * (0.125f64 * 0.875 / n as f64).sqrt();
    let mut parts = Vec::new();
    let mut pass = true;
    for (kind, seed) in [(HeadKind::ConditionalScalar, 41), (HeadKind::UnconditionalLogits, 42)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = DiscriminatorNet::init(2, &[256, 256], 128, k, kind, &mut rng);
        // labels independent of inputs: every fixed classifier is right w.p. 1/8
        let x = latent_batch(n, 2, &mut rng);
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let rep = probe_auto(&net, &x, &y, &[1], 0).unwrap();
        let top1 = rep.accuracy(1).unwrap();
        pass &= (top1 - 0.125).abs() <= sigma3;
        parts.push(format!("{:?} top-1 {top1:.4}", rep.kind));
    }
    outcome(pass, format!("{} (band 0.125 +/- {sigma3:.4})", parts.join(", ")))
}

fn c5_classifier() -> Outcome {
    let suite = builtin_suite(5, 60);
    let mut worst: f64 = 1.0;
    let mut n = 0;
    for (_, game) in &suite {
        let d = closed_form_dstar(game);
        let scores = Tensor::new(vec![game.points(), game.classes()], d.values.clone()).unwrap();
        let acc = accuracy_from_scores(&scores, game.labels(), &[1]).unwrap()[&1];
        worst = worst.min(acc).min(classifier_property_check(game));
        n += 1;
    }
    outcome(worst == 1.0, format!("{n} disjoint-support games, minimum argmax accuracy {worst}"))
}

fn c7_dino() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let k = 8;
    // teacher rows
    let mut sum_err: f64 = 0.0;
    for _ in 0..50 {
        let logits = latent_batch(32, k, &mut rng);
        let tau = rng.random_range(0.02..2.0);
        let mut st = DinoState::new(k, tau, 0.9).unwrap();
        let t = run_teacher(&logits, &mut st).unwrap();
        for r in 0..t.rows() {
            sum_err = sum_err.max((t.row(r).iter().sum::<f64>() - 1.0).abs());
        }
    }
    // center against the closed-form EMA
    let mut ema_err: f64 = 0.0;
    for _ in 0..20 {
        let m = rng.random_range(0.0..0.99);
        let c0: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut st = DinoState::from_parts(c0.clone(), 0.1, m).unwrap();
        let mut means = Vec::new();
        for _ in 0..rng.random_range(1..30) {
            let t = run_teacher(&latent_batch(16, k, &mut rng), &mut st).unwrap();
            means.push((0..k).map(|j| (0..16).map(|r| t.get2(r, j)).sum::<f64>() / 16.0).collect::<Vec<_>>());
        }
        let n = means.len() as i32;
        for j in 0..k {
            let mut want = m.powi(n) * c0[j];
            for (i, b) in means.iter().enumerate() {
                want += (1.0 - m) * m.powi(n - 1 - i as i32) * b[j];
            }
            ema_err = ema_err.max((st.center()[j] - want).abs());
        }
    }
    // gradient of the per-step term equals that of the student branch alone
    let mut grad_gap: f64 = 0.0;
    for seed in 0..5 {
        let mut r = ChaCha8Rng::seed_from_u64(100 + seed);
        let net = DiscriminatorNet::init(2, &[32, 32], 16, k, HeadKind::UnconditionalLogits, &mut r);
        let mut v = || latent_batch(24, 2, &mut r);
        let (real, fake) = (Views { first: v(), second: v() }, Views { first: v(), second: v() });
        let state = DinoState::new(k, 0.1, 0.9).unwrap();
        let mut g = Graph::new();
        let gv = net.bind(&mut g, true);
        let lib = dino_term_for_step(&mut g, &net, &gv, &real, &fake, &mut state.clone()).unwrap();
        g.backward(lib).unwrap();
        let mut h = Graph::new();
        let hv = net.bind(&mut h, true);
        let mut st = state.clone();
        let mut parts = Vec::new();
        for views in [&real, &fake] {
            let t = run_teacher(&net.logits_eval(&views.first).unwrap(), &mut st).unwrap();
            let x = h.constant(views.second.clone());
            let l = net.logits(&mut h, &hv, x).unwrap();
            let s = run_student(&mut h, l);
            parts.push(dino_loss(&mut h, &t, s).unwrap());
        }
        let sum = h.add(parts[0], parts[1]).unwrap();
        let manual = h.scale(sum, 0.5);
        h.backward(manual).unwrap();
        for (a, b) in gv.all().into_iter().zip(hv.all()) {
            for (x, y) in g.grad(a).unwrap().iter().zip(h.grad(b).unwrap()) {
                grad_gap = grad_gap.max((x - y).abs());
            }
        }
    }
    // uniform teacher against uniform student
    let mut g = Graph::new();
    let zeros = g.constant(Tensor::zeros(&[4, k]));
    let s = run_student(&mut g, zeros);
    let l = dino_loss(&mut g, &Tensor::full(&[4, k], 1.0 / k as f64), s).unwrap();
    let uni_err = (g.value(l).item().unwrap() - (k as f64).ln()).abs();
    outcome(
        sum_err <= 1e-9 && ema_err <= 1e-12 && grad_gap == 0.0 && uni_err <= 1e-9,
        format!(
            "row sums {sum_err:.1e}, EMA {ema_err:.1e}, teacher-path gradient gap {grad_gap:e}, |H(u,u) - ln 8| {uni_err:.1e}"
        ),
    )
}

fn c8_determinism() -> Outcome {
    let dir = scratch("determinism");
    let run = |name: &str| {
        bin()
            .args(["train", "--seed", "21", "--set", "variant=C", "--set", "steps=300", "--set", "log.iter_ms=false"])
            .args(["--set", "probe.every=100", "--set", "metrics.every=150", "--set", "metrics.samples=4000"])
            .arg("--out")
            .arg(dir.join(name))
            .status()
            .unwrap()
            .success()
    };
    let ok = run("a") && run("b");
    let same = |f: &str| std::fs::read(dir.join("a").join(f)).ok() == std::fs::read(dir.join("b").join(f)).ok();
    let (log, ckpt) = (same("log.jsonl"), same("final.ckpt"));
    outcome(ok && log && ckpt, format!("config C, 300 steps, two runs: log identical {log}, checkpoint identical {ckpt}"))
}

fn c9_metrics() -> Outcome {
    let a = GaussianSummary::new(vec![0.0], vec![1.0], 0).unwrap();
    let b = GaussianSummary::new(vec![1.0], vec![1.0], 0).unwrap();
    let fd = frechet_distance(&a, &b).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = latent_batch(500, 2, &mut rng);
    let same = knn_precision_recall(&x, &x, 3).unwrap();
    let far = Tensor::new(vec![500, 2], x.data().iter().map(|v| v + 1e3).collect()).unwrap();
    let apart = knn_precision_recall(&x, &far, 3).unwrap();
    outcome(
        (fd - 1.0).abs() <= 1e-9
            && (same.precision, same.recall) == (1.0, 1.0)
            && (apart.precision, apart.recall) == (0.0, 0.0),
        format!(
            "FD(N(0,1), N(1,1)) = {fd}, identical P/R = {}/{}, far P/R = {}/{}",
            same.precision, same.recall, apart.precision, apart.recall
        ),
    )
}

fn c6_ordering() -> Outcome {
    let dir = scratch("ordering");
    let seeds = [0u64, 1, 2, 3, 4];
    let mut rows = Vec::new();
    let mut slowest: f64 = 0.0;
    for v in [Variant::A, Variant::B, Variant::C] {
        for &seed in &seeds {
            let mut cfg = TrainConfig::for_variant(v);
            cfg.seed = seed;
            let start = Instant::now();
            let s: RunSummary = run_training(&cfg, &dir.join(format!("{v}-{seed}"))).unwrap();
            let secs = start.elapsed().as_secs_f64();
            slowest = slowest.max(secs);
            eprintln!(
                "  {v} seed {seed}: top1 {:?} frechet {:.5} modes {:?} ({secs:.0}s)",
                s.probe_top1, s.eval.frechet_pooled, s.eval.modes_covered
            );
            rows.push((v, s.probe_top1.unwrap_or(f64::NAN), s.eval.frechet_pooled, s.eval.modes_covered.unwrap_or(0)));
        }
    }
    let col = |v: Variant, f: fn(&(Variant, f64, f64, usize)) -> f64| {
        median(rows.iter().filter(|r| r.0 == v).map(f).collect())
    };
    let top1 = |v| col(v, |r| r.1);
    let fd = |v| col(v, |r| r.2);
    let full = |v: Variant| rows.iter().filter(|r| r.0 == v && r.3 == 8).count();
    let (ta, tb, tc) = (top1(Variant::A), top1(Variant::B), top1(Variant::C));
    let (fa, fb, fc) = (fd(Variant::A), fd(Variant::B), fd(Variant::C));
    let pass = tc >= tb
        && tb >= ta
        && tc - ta >= 0.05
        && fc <= fb
        && fb <= fa
        && full(Variant::B) >= 4
        && full(Variant::C) >= 4
        && slowest < 1800.0;
    let table: String = rows
        .iter()
        .map(|r| format!("{},{},{},{}\n", r.0, r.1, r.2, r.3))
        .collect();
    std::fs::write(dir.join("summary.csv"), format!("variant,probe_top1,frechet_pooled,modes_covered\n{table}")).unwrap();
    outcome(
        pass,
        format!(
            "median top-1 A {ta:.4} B {tb:.4} C {tc:.4}; median FD A {fa:.5} B {fb:.5} C {fc:.5}; 8/8 modes B {}/5 C {}/5; slowest run {slowest:.0}s",
            full(Variant::B),
            full(Variant::C)
        ),
    )
}

fn ablate(dir: &Path, args: &[&str]) -> Option<Vec<AblationRow>> {
    let ok = bin().arg("ablate").arg("--out").arg(dir).args(args).status().ok()?.success();
    if !ok {
        return None;
    }
    let csv = std::fs::read_to_string(dir.join("ablation.csv")).ok()?;
    csv.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            Some((f[0].parse().ok()?, f[1].parse().ok()?, f[2].parse().ok()?, f[3].parse().ok()?, f[4].parse().ok()?))
        })
        .collect()
}

fn c10_ablation() -> Outcome {
    let dir = scratch("ablation");
    let l1 = ablate(
        &dir.join("lambda1"),
        &["--set", "variant=B", "--grid", "lambda1=0.005,0.01,0.02,0.05", "--grid", "seed=0,1,2"],
    );
    let l2 = ablate(
        &dir.join("lambda2"),
        &["--set", "variant=C", "--set", "lambda1=0.01", "--grid", "lambda2=0.05,0.1,0.2,0.5"],
    );
    let (Some(l1), Some(l2)) = (l1, l2) else {
        return outcome(false, "an ablation run failed");
    };
    let distinct = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v.len()
    };
    let l1_rows = distinct(&l1.iter().map(|r| r.0).collect::<Vec<_>>());
    let l2_rows = distinct(&l2.iter().map(|r| r.1).collect::<Vec<_>>());
    let med: Vec<(f64, f64)> = LAMBDA1_GRID
        .iter()
        .map(|&l| (l, median(l1.iter().filter(|r| r.0 == l).map(|r| r.2).collect())))
        .collect();
    let worst = med.iter().find(|m| m.0 == 0.05).map_or(f64::NAN, |m| m.1);
    let best = med.iter().map(|m| m.1).fold(f64::INFINITY, f64::min);
    let shown: Vec<String> = med.iter().map(|(l, f)| format!("{l}: {f:.5}")).collect();
    let l2_shown: Vec<String> = l2.iter().map(|r| format!("{}: {:.5}", r.1, r.2)).collect();
    outcome(
        l1_rows == 4 && l2_rows == 4 && worst > best,
        format!(
            "{l1_rows} lambda1 rows, {l2_rows} lambda2 rows; median FD by lambda1 [{}]; FD by lambda2 [{}]",
            shown.join(", "),
            l2_shown.join(", ")
        ),
    )
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let only_heavy = args.iter().any(|a| a == "--ignored");
    let all = args.iter().any(|a| a == "--include-ignored");
    let light: [Criterion; 8] = [
        (1, "tabular oracle", c1_oracle),
        (2, "gradient correctness", c2_gradients),
        (3, "reduction equalities", c3_reductions),
        (4, "probe chance level", c4_chance),
        (5, "classifier property", c5_classifier),
        (7, "distillation mechanics", c7_dino),
        (8, "determinism", c8_determinism),
        (9, "metric sanity", c9_metrics),
    ];
    let heavy: [Criterion; 2] = [(6, "variant ordering", c6_ordering), (10, "ablation harness", c10_ablation)];

    let mut failed = 0;
    let mut report = |id: u32, name: &str, o: Outcome| {
        println!("criterion {id:>2} {:<24} {}  {}", name, if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed += 1;
        }
    };
    if !only_heavy {
        for (id, name, f) in light {
            report(id, name, f());
        }
    }
    for (id, name, f) in heavy {
        if only_heavy || all {
            report(id, name, f());
        } else {
            println!("criterion {id:>2} {name:<24} SKIP  full-length training; run with -- --ignored");
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
