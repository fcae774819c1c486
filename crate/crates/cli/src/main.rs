//! `rectrack`: synthesize data, train a variant, track, evaluate and compare
//! reports.
//!
//! Exit codes: 0 ok, 2 input error, 3 training abort, 4 tracking fault.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rectrack::config::RunConfig;
use rectrack::eval::{
    export_report, load_report, run_ope, EvalReport, ModelFactory, OracleFactory, TrackerFactory,
};
use rectrack::model::Model;
use rectrack::synth::{export_suite, import_sequence, import_suite, SynthFile};
use rectrack::tracker::{NetworkTracker, Tracker, TrackerOptions};
use rectrack::trainer::{Trainer, Transition, LOG_FILE};
use rectrack::Error;

#[derive(Parser)]
#[command(name = "rectrack", version, about = "Recurrent single-object tracker")]
struct Cli {
    /// Worker threads. With 1, every command is bitwise reproducible.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Root that relative data paths (suites, sequences, training data)
    /// resolve against.
    #[arg(long, global = true, env = "RECTRACK_DATA", default_value = ".")]
    data_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic suite as OTB-style sequence directories.
    Synth {
        /// TOML file with a `[suite]` table and/or `[[sequence]]` entries.
        /// Without it the default 40-sequence benchmark is generated.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value = "benchmark")]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train a model from a run configuration.
    Train {
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides `out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `train.iterations`.
        #[arg(long)]
        iterations: Option<u64>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// One-pass evaluation over a suite; writes report.json and curve CSVs.
    Eval {
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Replay ground truth instead of running a model (harness self-test).
        #[arg(long, conflicts_with = "checkpoint")]
        oracle: bool,
        #[arg(long, default_value = "benchmark")]
        suite: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Zero the recurrent state every this many frames.
        #[arg(long)]
        reset_interval: Option<usize>,
        /// Tracker name in the report (defaults to the variant).
        #[arg(long)]
        label: Option<String>,
    },
    /// Track one sequence, writing "x,y,w,h" for every frame after the first.
    Track {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        reset_interval: Option<usize>,
    },
    /// Compare evaluation reports made on the same suite.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Also write a "tracker,subset,auc" CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

enum Failure {
    Input(String),
    Abort(String),
    Fault(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match &e {
            Error::TrainingAborted { checkpoint, .. } => Failure::Abort(match checkpoint {
                Some(p) => format!("{e}\nlast good checkpoint: {}", p.display()),
                None => format!("{e}\nno checkpoint was written"),
            }),
            Error::TrackingFault { .. } => Failure::Fault(e.to_string()),
            _ => Failure::Input(e.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Input(format!("{}: {e}", path.display()))
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .expect("thread pool is configured once");
    }
    let root = cli.data_root.as_path();
    let outcome = match cli.command {
        Command::Synth { spec, out, seed } => synth(spec.as_deref(), &resolve(root, &out), seed),
        Command::Train {
            config,
            resume,
            out,
            iterations,
            seed,
        } => train(root, &config, resume.as_deref(), out, iterations, seed),
        Command::Eval {
            checkpoint,
            oracle: _,
            suite,
            out,
            reset_interval,
            label,
        } => eval(
            checkpoint.as_deref(),
            &resolve(root, &suite),
            &out,
            TrackerOptions { reset_interval },
            label,
        ),
        Command::Track {
            checkpoint,
            sequence,
            out,
            reset_interval,
        } => track(
            &checkpoint,
            &resolve(root, &sequence),
            &out,
            TrackerOptions { reset_interval },
        ),
        Command::Report { reports, csv } => report(&reports, csv.as_deref()),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Abort(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
        Err(Failure::Fault(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(4)
        }
    }
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn synth(spec: Option<&Path>, out: &Path, seed: u64) -> Outcome {
    let file = match spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| io_failure(p, e))?;
            SynthFile::from_toml(&text)
                .map_err(|e| Failure::Input(format!("{}: {e}", p.display())))?
        }
        None => SynthFile::default(),
    };
    let suite = file.generate(seed)?;
    export_suite(&suite, out)?;
    let frames: usize = suite.iter().map(|s| s.len()).sum();
    println!(
        "wrote {} sequences ({frames} frames) to {}",
        suite.len(),
        out.display()
    );
    let mut counts = std::collections::BTreeMap::new();
    for s in &suite {
        for t in &s.tags {
            *counts.entry(t.name()).or_insert(0usize) += 1;
        }
    }
    for (tag, n) in counts {
        println!("  {tag:<16} {n}");
    }
    Ok(())
}

fn print_transition(t: &Transition) {
    println!(
        "iteration {}: plateau {} -> batch {} unrolls {} p_pred {:.2} (was {} / {} / {:.2})",
        t.iteration,
        t.plateaus,
        t.to.batch,
        t.to.unrolls,
        t.to.p_pred(),
        t.from.batch,
        t.from.unrolls,
        t.from.p_pred()
    );
}

fn train(
    root: &Path,
    config: &Path,
    resume: Option<&Path>,
    out: Option<PathBuf>,
    iterations: Option<u64>,
    seed: Option<u64>,
) -> Outcome {
    let mut cfg = RunConfig::load(config)?;
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    if let Some(n) = iterations {
        cfg.train.iterations = n;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let model_cfg = cfg.model_config()?;
    let hash = cfg.hash();
    let dataset = cfg.training_set(root)?;
    let mut trainer = match resume {
        Some(path) => {
            let t = Trainer::resume(path, cfg.train.clone(), &dataset, &hash)?;
            if t.model.net.config != model_cfg {
                return Err(Failure::Input(format!(
                    "{} holds a different architecture than {}",
                    path.display(),
                    config.display()
                )));
            }
            println!("resuming at iteration {}", t.iteration);
            t
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            let model = Model::new(model_cfg, &mut rng)?;
            Trainer::new(model, cfg.train.clone(), &dataset, &hash)?
        }
    };
    trainer = trainer.with_output(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml())
        .map_err(|e| io_failure(&cfg.out_dir, e))?;
    println!(
        "training {} ({}) for {} iterations on {} sequences",
        cfg.variant,
        cfg.scale,
        cfg.train.iterations,
        dataset.len()
    );
    let checkpoint = trainer.run(print_transition)?;
    if let Some((first, last)) = trainer.log.smoothed(100.min(trainer.log.entries.len())) {
        println!("smoothed loss {first:.5} -> {last:.5}");
    }
    if let Some(p) = checkpoint {
        println!("checkpoint {}", p.display());
    }
    println!("log {}", cfg.out_dir.join(LOG_FILE).display());
    Ok(())
}

fn eval(
    checkpoint: Option<&Path>,
    suite_dir: &Path,
    out: &Path,
    options: TrackerOptions,
    label: Option<String>,
) -> Outcome {
    let suite = import_suite(suite_dir)?;
    let report = match checkpoint {
        Some(path) => {
            let (model, meta, _) = Model::load(path)?;
            let factory = ModelFactory {
                label: label.unwrap_or_else(|| model.variant().to_string()),
                model: &model,
                options,
            };
            run_ope(&factory, &suite, meta.seed, &meta.config_hash)?
        }
        None => {
            let factory = OracleFactory;
            let mut r = run_ope(&factory, &suite, 0, "")?;
            r.tracker = label.unwrap_or_else(|| factory.name());
            r
        }
    };
    export_report(&report, out)?;
    println!("tracker      {}", report.tracker);
    println!(
        "suite        {} ({} sequences)",
        report.suite_hash,
        report.sequences.len()
    );
    println!("mean IoU     {:.4}", report.mean_iou);
    println!("lost targets {}", report.lost_targets);
    for (subset, c) in &report.curves {
        println!("AUC {subset:<16} {:.4}", c.auc);
    }
    println!("report written to {}", out.display());
    if report.faulted > 0 {
        let names: Vec<&str> = report
            .sequences
            .iter()
            .filter(|s| s.fault.is_some())
            .map(|s| s.name.as_str())
            .collect();
        return Err(Failure::Fault(format!(
            "{} sequence(s) faulted: {}",
            report.faulted,
            names.join(", ")
        )));
    }
    Ok(())
}

fn track(checkpoint: &Path, sequence: &Path, out: &Path, options: TrackerOptions) -> Outcome {
    let (model, _, _) = Model::load(checkpoint)?;
    let seq = import_sequence(sequence)?;
    if seq.len() < 2 {
        return Err(Failure::Input(format!(
            "{} has fewer than 2 frames",
            sequence.display()
        )));
    }
    let file = File::create(out).map_err(|e| io_failure(out, e))?;
    let mut w = BufWriter::new(file);
    let mut tracker = NetworkTracker::new(&model, options);
    tracker.init(&seq.frames[0], seq.boxes[0])?;
    let mut result = Ok(());
    for frame in &seq.frames[1..] {
        match tracker.step(frame) {
            Ok(b) => writeln!(w, "{}", b.to_rect_line()).map_err(|e| io_failure(out, e))?,
            Err(e) => {
                result = Err(Failure::from(e));
                break;
            }
        }
    }
    w.flush().map_err(|e| io_failure(out, e))?;
    result
}

fn report(paths: &[PathBuf], csv: Option<&Path>) -> Outcome {
    let reports = paths
        .iter()
        .map(|p| load_report(p))
        .collect::<Result<Vec<EvalReport>, _>>()?;
    let hash = &reports[0].suite_hash;
    if let Some((p, _)) = paths
        .iter()
        .zip(&reports)
        .find(|(_, r)| &r.suite_hash != hash)
    {
        return Err(Failure::Input(format!(
            "{} was made on a different suite than {}",
            p.display(),
            paths[0].display()
        )));
    }
    let subsets: BTreeSet<&str> = reports
        .iter()
        .flat_map(|r| r.curves.keys().map(String::as_str))
        .collect();
    print!("{:<16} {:>8} {:>6}", "tracker", "mean IoU", "lost");
    for s in &subsets {
        print!(" {s:>16}");
    }
    println!();
    let mut rows = String::from("tracker,subset,auc\n");
    for r in &reports {
        print!(
            "{:<16} {:>8.4} {:>6}",
            r.tracker, r.mean_iou, r.lost_targets
        );
        for s in &subsets {
            match r.curve(s) {
                Some(c) => {
                    print!(" {:>16.4}", c.auc);
                    rows.push_str(&format!("{},{s},{:.6}\n", r.tracker, c.auc));
                }
                None => print!(" {:>16}", "-"),
            }
        }
        println!();
    }
    if let Some(p) = csv {
        std::fs::write(p, rows).map_err(|e| io_failure(p, e))?;
    }
    Ok(())
}
