use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use rectrack::config::RunConfig;
use rectrack::eval::load_report;
use rectrack::recurrent::{Scale, Variant};
use rectrack::synth::{export_sequence, SuiteParams, SynthFile};
use rectrack::Frame;
use tempfile::TempDir;

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rectrack"))
        .args(args)
        .current_dir(cwd)
        .env_remove("RECTRACK_DATA")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn tiny_config(variant: Variant, iterations: u64) -> RunConfig {
    let mut cfg = RunConfig::preset(variant, Scale::Desk);
    cfg.train.iterations = iterations;
    cfg.train.checkpoint_every = 0;
    cfg.train.curriculum.initial_batch = 2;
    cfg.data.count = 4;
    cfg.data.length = 24;
    cfg.data.frame_size = 48;
    cfg.out_dir = PathBuf::from("run");
    cfg
}

/// A small suite plus a briefly trained checkpoint, shared by the tests.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn suite(&self) -> PathBuf {
        self.dir.path().join("suite")
    }

    fn checkpoint(&self) -> PathBuf {
        self.dir.path().join("run/model.rtlb")
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let spec = dir.path().join("small.toml");
        fs::write(
            &spec,
            "[suite]\ncount = 4\nwidth = 48\nheight = 48\nlength = 24\n",
        )
        .unwrap();
        let o = run(
            &[
                "synth",
                "--spec",
                "small.toml",
                "--out",
                "suite",
                "--seed",
                "3",
            ],
            dir.path(),
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        fs::write(
            dir.path().join("tiny.toml"),
            tiny_config(Variant::Plain, 4).to_toml(),
        )
        .unwrap();
        let o = run(&["--threads", "1", "train", "tiny.toml"], dir.path());
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        Fixture { dir }
    })
}

fn tree_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn default_synth_writes_forty_sequences_reproducibly() {
    let dir = TempDir::new().unwrap();
    for out in ["a", "b"] {
        let o = run(&["synth", "--out", out, "--seed", "7"], dir.path());
        assert_eq!(code(&o), 0);
    }
    let a = dir.path().join("a");
    assert_eq!(fs::read_dir(&a).unwrap().count(), 40);
    assert!(tree_bytes(&a) == tree_bytes(&dir.path().join("b")));
}

#[test]
fn data_root_comes_from_the_environment() {
    let dir = TempDir::new().unwrap();
    fs::write(
        dir.path().join("s.toml"),
        "[suite]\ncount = 2\nwidth = 48\nheight = 48\nlength = 24\n",
    )
    .unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_rectrack"))
        .args(["synth", "--spec", "s.toml", "--out", "here"])
        .current_dir(dir.path())
        .env("RECTRACK_DATA", dir.path().join("data"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(
        fs::read_dir(dir.path().join("data/here")).unwrap().count(),
        2
    );
}

#[test]
fn malformed_synth_spec_exits_2() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("bad.toml"), "[suite]\ncount = \"many\"\n").unwrap();
    let o = run(&["synth", "--spec", "bad.toml", "--out", "x"], dir.path());
    assert_eq!(code(&o), 2);
    let o = run(
        &["synth", "--spec", "missing.toml", "--out", "x"],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn residual_width_mismatch_is_refused_before_training() {
    let dir = TempDir::new().unwrap();
    let mut cfg = tiny_config(Variant::Residual, 4);
    cfg.model.feature_width = Some(100);
    let text = cfg.to_toml();
    fs::write(dir.path().join("r.toml"), text).unwrap();
    let o = run(&["train", "r.toml"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("residual"));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn train_writes_checkpoint_and_log() {
    let f = fixture();
    assert!(f.checkpoint().is_file());
    let log = fs::read_to_string(f.dir.path().join("run/train_log.csv")).unwrap();
    assert!(log.starts_with("iteration,loss,batch,unrolls,p_pred,lr\n"));
    assert_eq!(log.lines().count(), 1 + 4);
}

#[test]
fn resume_continues_the_iteration_counter() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    fs::write(
        dir.path().join("tiny.toml"),
        tiny_config(Variant::Plain, 6).to_toml(),
    )
    .unwrap();
    let ckpt = f.checkpoint();
    let o = run(
        &[
            "--threads",
            "1",
            "train",
            "tiny.toml",
            "--resume",
            ckpt.to_str().unwrap(),
            "--out",
            "more",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("resuming at iteration 4"));
    let log = fs::read_to_string(dir.path().join("more/train_log.csv")).unwrap();
    let iters: Vec<&str> = log
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(iters, ["0", "1", "2", "3", "4", "5"]);
}

#[test]
fn oracle_eval_scores_one() {
    let f = fixture();
    let out = TempDir::new().unwrap();
    let suite = f.suite();
    let o = run(
        &[
            "eval",
            "--oracle",
            "--suite",
            suite.to_str().unwrap(),
            "--out",
            "rep",
        ],
        out.path(),
    );
    assert_eq!(code(&o), 0);
    let r = load_report(&out.path().join("rep/report.json")).unwrap();
    assert_eq!(r.mean_iou, 1.0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("mean IoU     1.0000"));
    assert!(out.path().join("rep/curve_all.csv").is_file());
}

#[test]
fn model_eval_and_report_compare_on_one_suite() {
    let f = fixture();
    let out = TempDir::new().unwrap();
    let suite = f.suite();
    let ckpt = f.checkpoint();
    let o = run(
        &[
            "--threads",
            "1",
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--suite",
            suite.to_str().unwrap(),
            "--out",
            "model",
        ],
        out.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(
        &[
            "eval",
            "--oracle",
            "--suite",
            suite.to_str().unwrap(),
            "--out",
            "oracle",
        ],
        out.path(),
    );
    assert_eq!(code(&o), 0);
    let o = run(
        &[
            "report",
            "model/report.json",
            "oracle/report.json",
            "--csv",
            "auc.csv",
        ],
        out.path(),
    );
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("plain") && text.contains("oracle"));
    let csv = fs::read_to_string(out.path().join("auc.csv")).unwrap();
    assert!(csv.starts_with("tracker,subset,auc\n"));
    assert!(csv.contains("oracle,all,"));
}

#[test]
fn report_refuses_mixed_suites() {
    let out = TempDir::new().unwrap();
    for (name, seed) in [("s1", "1"), ("s2", "2")] {
        fs::write(
            out.path().join("s.toml"),
            "[suite]\ncount = 2\nwidth = 48\nheight = 48\nlength = 24\n",
        )
        .unwrap();
        assert_eq!(
            code(&run(
                &["synth", "--spec", "s.toml", "--out", name, "--seed", seed],
                out.path()
            )),
            0
        );
        let r = format!("r{name}");
        assert_eq!(
            code(&run(
                &["eval", "--oracle", "--suite", name, "--out", &r],
                out.path()
            )),
            0
        );
    }
    let o = run(
        &["report", "rs1/report.json", "rs2/report.json"],
        out.path(),
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn unreadable_inputs_exit_2() {
    let f = fixture();
    let out = TempDir::new().unwrap();
    fs::write(out.path().join("junk.rtlb"), b"not a checkpoint").unwrap();
    let suite = f.suite();
    let o = run(
        &[
            "eval",
            "--checkpoint",
            "junk.rtlb",
            "--suite",
            suite.to_str().unwrap(),
            "--out",
            "r",
        ],
        out.path(),
    );
    assert_eq!(code(&o), 2);
    let o = run(
        &["eval", "--oracle", "--suite", "nowhere", "--out", "r"],
        out.path(),
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn track_writes_one_line_per_later_frame() {
    let f = fixture();
    let out = TempDir::new().unwrap();
    let seq = f.suite().join("seq_000");
    let ckpt = f.checkpoint();
    let o = run(
        &[
            "track",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--sequence",
            seq.to_str().unwrap(),
            "--out",
            "boxes.txt",
        ],
        out.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.path().join("boxes.txt")).unwrap();
    assert_eq!(text.lines().count(), 23);
    for line in text.lines() {
        let parts: Vec<&str> = line.split(',').collect();
        assert_eq!(parts.len(), 4, "{line}");
        assert!(parts.iter().all(|p| p.parse::<i64>().is_ok()), "{line}");
    }
}

#[test]
fn tracking_fault_keeps_partial_output_and_exits_4() {
    let f = fixture();
    let out = TempDir::new().unwrap();
    // Frame 6 switches to three channels, which the grayscale model refuses.
    let mut seq = SynthFile {
        suite: Some(SuiteParams {
            count: 1,
            width: 48,
            height: 48,
            length: 24,
        }),
        sequences: vec![],
    }
    .generate(5)
    .unwrap()
    .remove(0);
    let k = 6;
    seq.frames[k] = Frame::filled(48, 48, 3, 0.5);
    let dir = out.path().join("broken");
    export_sequence(&seq, &dir).unwrap();
    let ckpt = f.checkpoint();
    let o = run(
        &[
            "track",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--sequence",
            "broken",
            "--out",
            "boxes.txt",
        ],
        out.path(),
    );
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.path().join("boxes.txt")).unwrap();
    assert_eq!(text.lines().count(), k - 1);
}

#[test]
fn single_threaded_training_is_bitwise_reproducible() {
    let dir = TempDir::new().unwrap();
    fs::write(
        dir.path().join("tiny.toml"),
        tiny_config(Variant::Dense, 3).to_toml(),
    )
    .unwrap();
    for out in ["a", "b"] {
        let o = run(
            &["--threads", "1", "train", "tiny.toml", "--out", out],
            dir.path(),
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for file in ["train_log.csv", "model.rtlb"] {
        assert!(
            fs::read(dir.path().join("a").join(file)).unwrap()
                == fs::read(dir.path().join("b").join(file)).unwrap(),
            "{file} differs"
        );
    }
}
