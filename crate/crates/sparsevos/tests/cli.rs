use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sparsevos"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn sparsevos")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A short scene, a default config and freshly initialised weights.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("spec.txt"), "frames = 6\nvelocity = 1.5,0.5\nseed = 9\n").unwrap();
        fs::write(dir.path().join("model.cfg"), config).unwrap();
        let f = Self { dir };
        ok(&["gen", "--spec", &f.p("spec.txt"), "--out", &f.p("corpus")]);
        ok(&["init-weights", "--config", &f.p("model.cfg"), "--out", &f.p("w.esmw"), "--seed", "4"]);
        f
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn p(&self, rel: &str) -> String {
        self.path(rel).to_string_lossy().into_owned()
    }

    fn model(&self) -> Vec<String> {
        vec!["--weights".into(), self.p("w.esmw"), "--config".into(), self.p("model.cfg")]
    }

    fn cmd(&self, sub: &str, extra: &[&str]) -> Output {
        let mut args: Vec<String> = vec![sub.into()];
        args.extend(self.model());
        args.extend(["--corpus".into(), self.p("corpus")]);
        args.extend(extra.iter().map(|s| s.to_string()));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        run(&refs)
    }
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_writes_matching_counts_and_is_deterministic() {
    let f = Fixture::new("");
    assert_eq!(fs::read_dir(f.path("corpus/frames")).unwrap().count(), 6);
    assert_eq!(fs::read_dir(f.path("corpus/masks")).unwrap().count(), 6);
    ok(&["gen", "--spec", &f.p("spec.txt"), "--out", &f.p("again")]);
    assert_eq!(files(&f.path("corpus")), files(&f.path("again")));
}

#[test]
fn gen_missing_spec_reports_not_found() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["gen", "--spec", "/nonexistent/spec.txt", "--out", &dir.path().to_string_lossy()]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("spec not found"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn init_weights_is_reproducible() {
    let f = Fixture::new("");
    ok(&["init-weights", "--config", &f.p("model.cfg"), "--out", &f.p("w2.esmw"), "--seed", "4"]);
    assert_eq!(fs::read(f.path("w.esmw")).unwrap(), fs::read(f.path("w2.esmw")).unwrap());
}

#[test]
fn run_missing_weights_fails_before_reading_frames() {
    let f = Fixture::new("");
    let out = run(&[
        "run", "--weights", &f.p("missing.esmw"), "--config", &f.p("model.cfg"), "--corpus", "/nonexistent/corpus",
        "--out", &f.p("r.csv"),
    ]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("missing.esmw") && !err.contains("corpus"), "{err}");
    assert!(!f.path("r.csv").exists());
}

#[test]
fn invalid_config_is_rejected_before_running() {
    let f = Fixture::new("");
    fs::write(f.path("bad.cfg"), "router.tau = 1.5\n").unwrap();
    let out = run(&[
        "run", "--weights", &f.p("w.esmw"), "--config", &f.p("bad.cfg"), "--corpus", "/nonexistent", "--out",
        &f.p("r.csv"),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).starts_with("error: config error"), "{}", stderr(&out));
}

#[test]
fn dense_and_both_share_frame_zero_and_weights_are_untouched() {
    let f = Fixture::new("");
    let before = fs::read(f.path("w.esmw")).unwrap();
    assert!(f.cmd("run", &["--out", &f.p("dense.csv"), "--dense"]).status.success());
    assert!(f.cmd("run", &["--out", &f.p("both.csv"), "--both", "--masks-out", &f.p("masks")]).status.success());
    assert_eq!(fs::read(f.path("w.esmw")).unwrap(), before);
    let row0 = |name: &str| {
        let text = fs::read_to_string(f.path(name)).unwrap();
        let line = text.lines().nth(1).unwrap().to_owned();
        line.split_once(',').unwrap().1.to_owned()
    };
    assert_eq!(row0("dense.csv"), row0("both.csv"));
    let text = fs::read_to_string(f.path("both.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 6);
    assert_eq!(fs::read_dir(f.path("masks/corpus")).unwrap().count(), 6);
}

#[test]
fn run_is_idempotent() {
    let f = Fixture::new("");
    assert!(f.cmd("run", &["--out", &f.p("a.csv"), "--both"]).status.success());
    assert!(f.cmd("run", &["--out", &f.p("b.csv"), "--both"]).status.success());
    assert_eq!(fs::read(f.path("a.csv")).unwrap(), fs::read(f.path("b.csv")).unwrap());
}

#[test]
fn smr_at_zero_sparsity_tracks_dense() {
    let f = Fixture::new("smr.s = 0\n");
    assert!(f.cmd("run", &["--out", &f.p("smr.csv"), "--smr"]).status.success());
    let text = fs::read_to_string(f.path("smr.csv")).unwrap();
    let mut lines = text.lines();
    let col = lines.next().unwrap().split(',').position(|c| c == "iou_dense").unwrap();
    for l in lines {
        let v: f64 = l.split(',').nth(col).unwrap().parse().unwrap();
        assert!(v >= 0.999, "{l}");
    }
}

#[test]
fn diagnose_dumps() {
    let f = Fixture::new("");
    assert!(f.cmd("diagnose", &["--frame", "0", "--out", &f.p("d0"), "--dump-routing"]).status.success());
    let routing = fs::read_to_string(f.path("d0/routing.csv")).unwrap();
    let row: Vec<&str> = routing.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row.last().unwrap().parse::<f64>().unwrap(), 0.0);

    assert!(f.cmd("diagnose", &["--frame", "1", "--out", &f.p("d1"), "--dump-patterns"]).status.success());
    assert_eq!(fs::read_to_string(f.path("d1/patterns.txt")).unwrap(), "");

    assert!(f.cmd("diagnose", &["--frame", "3", "--out", &f.p("d3"), "--dump-attention", "--dump-bank"]).status.success());
    // default model: 8x8 query tokens; prompt plus frames 1 and 2, 16 tokens each
    for l in 0..2 {
        let pgm = fs::read(f.path(&format!("d3/attention_layer{l}.pgm"))).unwrap();
        assert!(pgm.starts_with(b"P5\n48 64\n255\n"), "{:?}", String::from_utf8_lossy(&pgm[..12]));
    }
    let bank = fs::read_to_string(f.path("d3/bank.csv")).unwrap();
    assert_eq!(bank.lines().count(), 1 + 4);
}

#[test]
fn diagnose_frame_out_of_range_is_argument_error() {
    let f = Fixture::new("");
    let out = f.cmd("diagnose", &["--frame", "6", "--out", &f.p("d")]);
    assert!(!out.status.success());
    assert!(stderr(&out).starts_with("error: argument error"), "{}", stderr(&out));
}

#[test]
fn unknown_flags_are_rejected_with_usage() {
    let out = run(&["run", "--frobnicate"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("Usage"));
    let out = run(&["run", "--dense", "--both", "--weights", "w", "--config", "c", "--corpus", "x", "--out", "o"]);
    assert!(!out.status.success());
}

#[test]
fn help_documents_every_subcommand() {
    let out = ok(&["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["gen", "init-weights", "train-shortcut", "run", "bench", "diagnose"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
    let out = ok(&["diagnose", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in ["--frame", "--dump-attention", "--dump-patterns", "--dump-routing"] {
        assert!(text.contains(flag), "{flag} missing");
    }
}

#[test]
fn train_shortcut_writes_weights_and_log() {
    let f = Fixture::new("");
    let mut args: Vec<String> = vec!["train-shortcut".into()];
    args.extend(f.model());
    args.extend(
        [
            "--out", &f.p("trained.esmw"), "--streams", "1", "--frames", "40", "--held-out", "1",
            "--held-out-frames", "10", "--epochs", "1", "--log", &f.p("loss.csv"),
        ]
        .map(String::from),
    );
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&refs);
    let log = fs::read_to_string(f.path("loss.csv")).unwrap();
    assert!(log.starts_with("step,epoch,loss\n"));
    assert_eq!(log.lines().count(), 1 + 2);
    assert_ne!(fs::read(f.path("trained.esmw")).unwrap(), fs::read(f.path("w.esmw")).unwrap());
}

#[test]
fn bench_writes_reports_and_plots() {
    let f = Fixture::new("");
    let out = f.cmd("bench", &["--out", &f.p("bench"), "--taus", "0.5,0.9", "--sparsities", "0,0.95"]);
    assert!(out.status.success(), "{}", stderr(&out));
    for name in ["report.csv", "summary.csv", "tau_sweep.csv", "s_sweep.csv", "plots/accuracy_vs_speedup.svg"] {
        assert!(f.path("bench").join(name).is_file(), "{name}");
    }
    let summary = fs::read_to_string(f.path("bench/summary.csv")).unwrap();
    let dense = summary.lines().find(|l| l.starts_with("dense,")).unwrap();
    let fields: Vec<&str> = dense.split(',').collect();
    // all five speedups of the dense run are exactly one
    assert!(fields[6..11].iter().all(|v| v.parse::<f64>().unwrap() == 1.0), "{dense}");
}
