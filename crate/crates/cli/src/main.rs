//! `ucdgan` command line: training runs, weight ablations, the tabular
//! oracle, offline probing and evaluation of checkpoints, and plot export.
//!
//! Exit codes: 0 success, 1 failed assertion or diverged run, 2 usage,
//! config or input error.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;
use ucdgan::checkpoint::Checkpoint;
use ucdgan::config::TrainConfig;
use ucdgan::data::{stream, streams};
use ucdgan::losses::ClassLossKind;
use ucdgan::metrics::{frechet_distance, knn_precision_recall, mode_coverage, per_class_frechet, GaussianSummary};
use ucdgan::oracle::{builtin_suite, run_suite, OracleBudget, TabularGame, Theorem1Tolerances, LAMBDA1_GRID};
use ucdgan::probe::probe_auto;
use ucdgan::trainer::{latent_batch, run_training};
use ucdgan::Error;

#[derive(Parser)]
#[command(name = "ucdgan", version, about = "Conditional GANs with an unconditional discriminator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// KEY=VALUE override, applied in order after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`, applied last.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one run and write log.jsonl, final.ckpt and resolved-config.txt.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the cross-product of `--grid` values and tabulate final metrics.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// KEY=v1,v2,... (repeatable); the last key varies fastest.
        #[arg(long, value_name = "KEY=V1,V2,...")]
        grid: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check optimal discriminators on tabular games against the closed form.
    Oracle {
        /// Directory of game files; the builtin suite when omitted.
        #[arg(long)]
        games: Option<PathBuf>,
        /// Random games in the builtin suite.
        #[arg(long, default_value_t = 60)]
        random_games: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for report.jsonl.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Probe a saved discriminator as a classifier on held-out data.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,3")]
        ks: Vec<usize>,
        /// Directory whose probe.jsonl receives the record.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample a saved generator and compute the run metrics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory whose eval.jsonl receives the record.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract `step` plus chosen fields from a run log as CSV.
    ExportPlot {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        fields: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
struct Failure {
    code: u8,
    msg: String,
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: 2, msg: msg.into() }
}

fn failed(msg: impl Into<String>) -> Failure {
    Failure { code: 1, msg: msg.into() }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite { .. } | Error::NonConvergence { .. } | Error::Contract(_) => 1,
            _ => 2,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        usage(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let res = match cli.cmd {
        Cmd::Train { cfg, out } => cmd_train(&cfg, &out),
        Cmd::Ablate { cfg, grid, out } => cmd_ablate(&cfg, &grid, &out),
        Cmd::Oracle {
            games,
            random_games,
            seed,
            out,
        } => cmd_oracle(games.as_deref(), random_games, seed, &out),
        Cmd::Probe {
            checkpoint,
            cfg,
            ks,
            out,
        } => cmd_probe(&checkpoint, &cfg, &ks, out.as_deref()),
        Cmd::Eval { checkpoint, cfg, out } => cmd_eval(&checkpoint, &cfg, out.as_deref()),
        Cmd::ExportPlot { log, fields, out } => cmd_export_plot(&log, &fields, &out),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<TrainConfig, Failure> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    let mut overrides = args.overrides.clone();
    if let Some(s) = args.seed {
        overrides.push(format!("seed={s}"));
    }
    cfg.apply_overrides(&overrides)?;
    Ok(cfg)
}

fn cmd_train(args: &ConfigArgs, out: &Path) -> Outcome {
    let cfg = load_config(args)?;
    let s = run_training(&cfg, out)?;
    println!(
        "trained {} steps: probe_top1={} frechet_pooled={}",
        s.steps,
        opt(s.probe_top1),
        s.eval.frechet_pooled
    );
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Parse `KEY=v1,v2,...` specs into their cross-product of override lists.
fn grid_cells(grid: &[String]) -> Result<Vec<Vec<String>>, Failure> {
    if grid.is_empty() {
        return Err(usage("ablate needs at least one --grid KEY=v1,v2,..."));
    }
    let mut cells: Vec<Vec<String>> = vec![Vec::new()];
    for spec in grid {
        let (key, values) = spec
            .split_once('=')
            .ok_or_else(|| usage(format!("grid spec {spec:?} is not KEY=v1,v2,...")))?;
        let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(usage(format!("grid key {key} has no values")));
        }
        cells = cells
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push(format!("{}={v}", key.trim()));
                    c
                })
            })
            .collect();
    }
    Ok(cells)
}

fn cmd_ablate(args: &ConfigArgs, grid: &[String], out: &Path) -> Outcome {
    let base = load_config(args)?;
    let cells = grid_cells(grid)?;
    // every cell must configure cleanly before any training starts
    let configs = cells
        .iter()
        .map(|c| {
            let mut cfg = base.clone();
            cfg.apply_overrides(c).map(|_| cfg)
        })
        .collect::<Result<Vec<_>, _>>()?;
    fs::create_dir_all(out)?;
    let mut csv = String::from("lambda1,lambda2,frechet_pooled,probe_top1,seed\n");
    for (i, cfg) in configs.iter().enumerate() {
        let dir = out.join(format!("cell-{i:03}"));
        let s = run_training(cfg, &dir)?;
        let w = cfg.weights();
        let row = format!(
            "{},{},{},{},{}\n",
            w.lambda1,
            w.lambda2,
            s.eval.frechet_pooled,
            opt(s.probe_top1),
            cfg.seed
        );
        eprint!("[{}/{}] {}", i + 1, configs.len(), row);
        csv.push_str(&row);
    }
    fs::write(out.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_oracle(games: Option<&Path>, random_games: usize, seed: u64, out: &Path) -> Outcome {
    let suite = match games {
        None => builtin_suite(seed, random_games),
        Some(dir) => {
            let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
                .map(|e| e.map(|e| e.path()))
                .collect::<Result<_, _>>()?;
            paths.retain(|p| p.is_file());
            paths.sort();
            paths
                .into_iter()
                .map(|p| {
                    let name = p.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
                    TabularGame::load(&p)
                        .map(|g| (name.clone(), g))
                        .map_err(|e| usage(format!("{name}: {e}")))
                })
                .collect::<Result<Vec<_>, _>>()?
        }
    };
    let report = run_suite(
        &suite,
        &LAMBDA1_GRID,
        ClassLossKind::CrossEntropy,
        Theorem1Tolerances::default(),
        OracleBudget::default(),
    )?;
    fs::create_dir_all(out)?;
    fs::write(out.join("report.jsonl"), report.to_jsonl())?;
    let cells = report.theorem.len();
    let worst = report.theorem.iter().map(|r| r.max_deviation).fold(0.0, f64::max);
    println!(
        "{} games, {cells} optimizations, worst deviation {worst:.3e}",
        suite.len()
    );
    if report.all_pass() {
        return Ok(());
    }
    let mut msg = String::from("oracle assertions failed:");
    for r in report.theorem.iter().filter(|r| !r.pass) {
        let _ = write!(
            msg,
            "\n  {} lambda1={:?}: max deviation {:.3e}, off-class mass {:?}",
            r.game, r.lambda1, r.max_deviation, r.max_off_class_mass
        );
        for (x, c, got, want) in &r.offending {
            let _ = write!(msg, "\n    d({x})_{c} = {got} vs {want}");
        }
    }
    for r in report.classifier.iter().filter(|r| !r.pass) {
        let _ = write!(msg, "\n  {}: classifier accuracy {}", r.game, r.classifier_accuracy);
    }
    Err(failed(msg))
}

fn load_matching(checkpoint: &Path, cfg: &TrainConfig) -> Result<(Checkpoint, ucdgan::data::Dataset), Failure> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let data = cfg.build_dataset()?;
    let d = &ckpt.discriminator;
    if d.cardinality != data.classes() || d.input_dim() != data.dim() {
        return Err(usage(format!(
            "checkpoint has {} conditions over {}-d inputs, dataset has {} classes over {}-d inputs",
            d.cardinality,
            d.input_dim(),
            data.classes(),
            data.dim()
        )));
    }
    Ok((ckpt, data))
}

fn append_line(dir: Option<&Path>, file: &str, line: &str) -> Outcome {
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
        let mut f = fs::OpenOptions::new().create(true).append(true).open(dir.join(file))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

fn cmd_probe(checkpoint: &Path, args: &ConfigArgs, ks: &[usize], out: Option<&Path>) -> Outcome {
    let cfg = load_config(args)?;
    let (ckpt, data) = load_matching(checkpoint, &cfg)?;
    if ks.iter().any(|&k| k == 0 || k > data.classes()) {
        return Err(usage(format!("--ks must lie in 1..={}", data.classes())));
    }
    let mut rng = stream(cfg.seed, streams::PROBE);
    let (x, y) = data.sample_labeled(cfg.probe_samples, &mut rng);
    let rep = probe_auto(&ckpt.discriminator, &x, &y, ks, 0)?;
    for (k, acc) in &rep.top_k {
        println!("top{k} = {acc}");
    }
    let rec = serde_json::json!({
        "checkpoint": checkpoint.display().to_string(),
        "kind": format!("{:?}", rep.kind),
        "n_samples": rep.n_samples,
        "forward_rows": rep.forward_rows,
        "top_k": rep.top_k,
    });
    append_line(out, "probe.jsonl", &rec.to_string())
}

fn cmd_eval(checkpoint: &Path, args: &ConfigArgs, out: Option<&Path>) -> Outcome {
    let cfg = load_config(args)?;
    let (ckpt, data) = load_matching(checkpoint, &cfg)?;
    let n = cfg.metrics_samples;
    let mut rng = stream(cfg.seed, streams::EVAL);
    let (real, real_y) = data.sample_labeled(n, &mut rng);
    let fake_y = data.sample_labeled(n, &mut rng).1;
    let z = latent_batch(n, ckpt.generator.latent_dim, &mut rng);
    let fake = ckpt.generator.sample(&z, &fake_y)?;
    let pooled = frechet_distance(
        &GaussianSummary::from_samples(&real)?,
        &GaussianSummary::from_samples(&fake)?,
    )?;
    let per_class = per_class_frechet(&real, &real_y, &fake, &fake_y, data.classes())?;
    let pr = knn_precision_recall(&real, &fake, cfg.metrics_k)?;
    let modes = data.mixture().map(|m| mode_coverage(fake.data(), m, None).covered);
    let rec = serde_json::json!({
        "checkpoint": checkpoint.display().to_string(),
        "samples": n,
        "frechet_pooled": pooled,
        "frechet_per_class": per_class,
        "precision": pr.precision,
        "recall": pr.recall,
        "modes_covered": modes,
    });
    println!("{rec}");
    append_line(out, "eval.jsonl", &rec.to_string())
}

/// Numeric fields of a run-log record that can be plotted against `step`.
const PLOT_FIELDS: &[&str] = &[
    "g_loss",
    "d_loss",
    "class_loss",
    "dino_loss",
    "probe_top1",
    "probe_top3",
    "frechet_pooled",
    "precision",
    "recall",
    "modes_covered",
    "iter_ms",
];

fn cmd_export_plot(log: &Path, fields: &[String], out: &Path) -> Outcome {
    if let Some(bad) = fields.iter().find(|f| !PLOT_FIELDS.contains(&f.as_str())) {
        return Err(usage(format!(
            "unknown field {bad:?}; valid fields: {}",
            PLOT_FIELDS.join(", ")
        )));
    }
    let text = fs::read_to_string(log).map_err(|e| usage(format!("{}: {e}", log.display())))?;
    let mut csv = format!("step,{}\n", fields.join(","));
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Value = serde_json::from_str(line)
            .map_err(|e| usage(format!("{}:{}: {e}", log.display(), i + 1)))?;
        let Some(step) = rec.get("step").and_then(Value::as_u64) else {
            continue;
        };
        let vals: Option<Vec<String>> = fields
            .iter()
            .map(|f| rec.get(f).and_then(Value::as_f64).map(|v| v.to_string()))
            .collect();
        if let Some(vals) = vals {
            let _ = writeln!(csv, "{step},{}", vals.join(","));
        }
    }
    fs::write(out, csv)?;
    Ok(())
}
