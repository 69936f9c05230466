use clap::{Args, Parser, Subcommand};
use icd::analysis::discrepancy;
use icd::data::{self, eval_batches, Splits};
use icd::losses::dump::{compute_gram_pairs, write_gram_dump};
use icd::losses::{kl_divergence, Method};
use icd::nn::{Checkpoint, LogitMap};
use icd::tensor::softmax;
use icd::train::{
    ablate_gamma, ablate_scales, ablation_csv, evaluate, train_student, train_teacher, Check, RunConfig, RunMetrics,
};
use icd::{gradsuite, Result};
use serde_json::json;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "icd", version, about = "Implicit clustering distillation on a small CPU autodiff core")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` config file; unset keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train a teacher with cross entropy only.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
    },
    /// Train a student against a frozen teacher.
    TrainStudent {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_method)]
        method: Method,
        /// Teacher checkpoint directory.
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Train and test accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference check of every op and of the full objective.
    GradCheck {
        #[command(flatten)]
        common: Common,
    },
    /// Teacher and student Gram matrices of every cell for the first test batch.
    GramDump {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
    },
    /// iCD students over every scale set, plus a KD baseline.
    AblateScales {
        #[command(flatten)]
        common: Common,
        /// Teacher checkpoint; trained from the config when omitted.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// iCD students over a range of gamma values.
    AblateGamma {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0])]
        gammas: Vec<f64>,
    },
    /// Teacher/student logit-correlation discrepancy on the test split.
    Discrepancy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
    },
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: icd::Error| e.to_string())
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::parse(&fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v).expect("json values always serialize");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

struct Run {
    cfg: RunConfig,
    splits: Splits,
    out: PathBuf,
}

fn prepare(c: &Common) -> Result<Run> {
    let cfg = load_config(c)?;
    fs::create_dir_all(&c.out)?;
    fs::write(c.out.join("config.txt"), cfg.to_text())?;
    let splits = data::load(&cfg.data)?;
    Ok(Run {
        cfg,
        splits,
        out: c.out.clone(),
    })
}

fn write_training(run: &Run, ck: &Checkpoint, metrics: &RunMetrics) -> Result<bool> {
    ck.save(run.out.join("checkpoint"))?;
    fs::write(run.out.join("metrics.csv"), metrics.to_csv())?;
    let mut summary = metrics.to_json();
    summary["normalization"] = json!(run.splits.normalization);
    write_json(&run.out.join("summary.json"), &summary)?;
    log::info!("{} finished in {:.1}s, test accuracy {:.4}", metrics.role, metrics.wall_seconds(), metrics.final_test_acc());
    Ok(metrics.checks_passed())
}

fn checks_json(checks: &[Check]) -> serde_json::Value {
    json!({ "checks_passed": checks.iter().all(|c| c.passed), "checks": checks })
}

fn teacher_or_train(run: &Run, path: Option<&PathBuf>) -> Result<(Checkpoint, bool)> {
    match path {
        Some(p) => Ok((Checkpoint::load(p)?, true)),
        None => {
            let (ck, m) = train_teacher(&run.cfg, &run.splits)?;
            ck.save(run.out.join("teacher"))?;
            fs::write(run.out.join("teacher_metrics.csv"), m.to_csv())?;
            Ok((ck, m.checks_passed()))
        }
    }
}

fn execute(cmd: Command) -> Result<bool> {
    match cmd {
        Command::TrainTeacher { common } => {
            let run = prepare(&common)?;
            let (ck, m) = train_teacher(&run.cfg, &run.splits)?;
            write_training(&run, &ck, &m)
        }
        Command::TrainStudent { common, method, teacher } => {
            let run = prepare(&common)?;
            let teacher = Checkpoint::load(teacher)?;
            let (ck, m) = train_student(&run.cfg, &run.splits, &teacher, method)?;
            write_training(&run, &ck, &m)
        }
        Command::Eval { common, checkpoint } => {
            let run = prepare(&common)?;
            let ck = Checkpoint::load(checkpoint)?;
            let bs = run.cfg.train.batch_size;
            let train = evaluate(&ck.net, &run.splits.train, bs)?;
            let test = evaluate(&ck.net, &run.splits.test, bs)?;
            fs::write(
                run.out.join("eval.csv"),
                format!(
                    "split,samples,accuracy\ntrain,{},{train}\ntest,{},{test}\n",
                    run.splits.train.len(),
                    run.splits.test.len()
                ),
            )?;
            let checks = vec![Check::new(
                "accuracy_range",
                (0.0..=1.0).contains(&train) && (0.0..=1.0).contains(&test),
                "accuracies within [0, 1]",
            )];
            let mut summary = checks_json(&checks);
            summary["role"] = json!(ck.role);
            summary["train_acc"] = json!(train);
            summary["test_acc"] = json!(test);
            write_json(&run.out.join("summary.json"), &summary)?;
            Ok(checks.iter().all(|c| c.passed))
        }
        Command::GradCheck { common } => {
            let cfg = load_config(&common)?;
            fs::create_dir_all(&common.out)?;
            let reports = gradsuite::run(cfg.train.seed)?;
            let mut csv = String::from("op,max_abs_err,max_rel_err,tolerance,passed\n");
            for r in &reports {
                csv.push_str(&format!("{},{},{},{},{}\n", r.op_name, r.max_abs_err, r.max_rel_err, r.tolerance, r.passed));
            }
            fs::write(common.out.join("gradcheck.csv"), csv)?;
            let passed = reports.iter().all(|r| r.passed);
            write_json(
                &common.out.join("summary.json"),
                &json!({ "checks_passed": passed, "checks": reports }),
            )?;
            Ok(passed)
        }
        Command::GramDump { common, teacher, student } => {
            let run = prepare(&common)?;
            let (t, s) = (Checkpoint::load(teacher)?, Checkpoint::load(student)?);
            let batch = eval_batches(&run.splits.test, run.cfg.train.batch_size)?.remove(0);
            let tm: LogitMap = t.net.logit_map(&batch.images)?;
            let sm: LogitMap = s.net.logit_map(&batch.images)?;
            let d = &run.cfg.train.distill;
            let pairs = compute_gram_pairs(&tm, &sm, &d.scales, d.gram_mode, d.eps)?;
            write_gram_dump(BufWriter::new(fs::File::create(run.out.join("grams.bin"))?), &pairs)?;
            let mut csv = String::from("scale,cell,dim,kl\n");
            let mut max_asym = 0.0f64;
            for p in &pairs {
                let n = p.teacher.shape()[0];
                for g in [&p.teacher, &p.student] {
                    for i in 0..n {
                        for j in 0..n {
                            max_asym = max_asym.max((g.at(&[i, j]) - g.at(&[j, i])).abs());
                        }
                    }
                }
                let kl = kl_divergence(&softmax(&p.teacher, 1)?, &softmax(&p.student, 1)?, 1)?;
                csv.push_str(&format!("{},{},{},{}\n", p.scale, p.cell, n, kl));
            }
            fs::write(run.out.join("grams.csv"), csv)?;
            let checks = vec![Check::new("gram_symmetry", max_asym <= 1e-10, format!("max asymmetry {max_asym:e}"))];
            let mut summary = checks_json(&checks);
            summary["records"] = json!(pairs.len());
            summary["batch"] = json!(batch.labels.len());
            summary["mode"] = json!(d.gram_mode);
            write_json(&run.out.join("summary.json"), &summary)?;
            Ok(checks.iter().all(|c| c.passed))
        }
        Command::AblateScales { common, teacher } => {
            let run = prepare(&common)?;
            let (teacher, ok) = teacher_or_train(&run, teacher.as_ref())?;
            let rows = ablate_scales(&run.cfg, &run.splits, &teacher)?;
            fs::write(run.out.join("ablate_scales.csv"), ablation_csv(&rows))?;
            let passed = ok && rows.iter().all(|r| r.checks_passed);
            write_json(&run.out.join("summary.json"), &json!({ "checks_passed": passed, "rows": rows }))?;
            Ok(passed)
        }
        Command::AblateGamma { common, teacher, gammas } => {
            let run = prepare(&common)?;
            let (teacher, ok) = teacher_or_train(&run, teacher.as_ref())?;
            let rows = ablate_gamma(&run.cfg, &run.splits, &teacher, &gammas)?;
            fs::write(run.out.join("ablate_gamma.csv"), ablation_csv(&rows))?;
            let passed = ok && rows.iter().all(|r| r.checks_passed);
            write_json(&run.out.join("summary.json"), &json!({ "checks_passed": passed, "rows": rows }))?;
            Ok(passed)
        }
        Command::Discrepancy { common, teacher, student } => {
            let run = prepare(&common)?;
            let (t, s) = (Checkpoint::load(teacher)?, Checkpoint::load(student)?);
            let rep = discrepancy(&t.net, &s.net, &run.splits.test, &run.cfg.train.distill, run.cfg.train.batch_size)?;
            fs::write(run.out.join("discrepancy.csv"), rep.to_csv())?;
            let d = rep.matrix.data();
            let k = rep.matrix.shape()[0];
            let symmetric = (0..k).all(|i| (0..k).all(|j| (d[i * k + j] - d[j * k + i]).abs() <= 1e-12));
            let mean_ok = (rep.mean - d.iter().sum::<f64>() / d.len() as f64).abs() <= 1e-12;
            let checks = vec![
                Check::new("symmetric", symmetric, "discrepancy matrix symmetric within 1e-12"),
                Check::new("nonnegative", d.iter().all(|&x| x >= 0.0), "entries >= 0"),
                Check::new("mean", mean_ok, "reported mean equals the matrix mean"),
            ];
            let mut summary = rep.to_json();
            summary["checks_passed"] = json!(checks.iter().all(|c| c.passed));
            summary["checks"] = json!(checks);
            write_json(&run.out.join("summary.json"), &summary)?;
            Ok(checks.iter().all(|c| c.passed))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            log::error!("run completed but an invariant check failed; see summary.json");
            ExitCode::from(1)
        }
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(2)
        }
    }
}
