use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn capenext(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capenext")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = "seed=5\ndim=16\nencoder_layers=1\ndecoder_layers=2\nsteps=6\nbatch_size=2\n\
                     train_categories=0,1\nval_categories=2\ntest_categories=3\n";

fn train_small(root: &Path) -> std::path::PathBuf {
    let cfg = root.join("small.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let out = root.join("run");
    let o = capenext(&["train", "--config", s(&cfg), "--out", s(&out), "--log-every", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

#[test]
fn gen_data_writes_loadable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = capenext(&["gen-data", "--seed", "3", "--out", s(&out), "--categories", "3", "--instances", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ds = capenext::harness::load_dataset(&out).unwrap();
    assert_eq!(ds.samples.len(), 6);
    assert_eq!(ds, capenext::harness::synth_dataset(3, 3, 2).unwrap());
}

#[test]
fn train_then_eval_csv() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_small(dir.path());
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 7);

    let o = capenext(&["eval", "--ckpt", s(&run.join("checkpoint.bin")), "--thresholds", "0.1,0.2", "--id", "small"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "config,split,samples,pck@0.1,pck@0.2,mean_pck,heatmap_loss,offset_loss,total_loss");
    let splits: Vec<&str> = lines[1..].iter().map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(splits, ["train", "val", "test"]);
    assert!(lines[1..].iter().all(|l| l.starts_with("small,")));
}

#[test]
fn noise_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_small(dir.path());
    let out = dir.path().join("noise");
    let o = capenext(&[
        "noise", "--ckpt", s(&run.join("checkpoint.bin")), "--kind", "typo", "--rate", "1", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("metric,value\n"));
    assert!(summary.contains("keypoint_prompts_changed,1\n"), "{summary}");
    assert_eq!(fs::read_to_string(out.join("metrics.csv")).unwrap().lines().count(), 3);
}

#[test]
fn gradcheck_single_module() {
    let o = capenext(&["gradcheck", "--module", "gates"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("gates"));
}

#[test]
fn errors_exit_nonzero_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let bad_cfg = dir.path().join("bad.cfg");
    fs::write(&bad_cfg, "seed=1\nwidth=3\n").unwrap();
    let garbage = dir.path().join("garbage.bin");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    let out = dir.path().join("x");
    let cases: [Vec<&str>; 6] = [
        vec!["train", "--config", s(&bad_cfg), "--out", s(&out)],
        vec!["train", "--config", "/nonexistent/cfg", "--out", s(&out)],
        vec!["eval", "--ckpt", s(&garbage)],
        vec!["eval", "--ckpt", "/nonexistent/ckpt"],
        vec!["gradcheck", "--module", "nope"],
        vec!["noise", "--ckpt", s(&garbage), "--kind", "class", "--rate", "2"],
    ];
    for args in cases {
        let o = capenext(&args);
        assert!(!o.status.success(), "{args:?} succeeded");
        let err = stderr(&o);
        assert!(err.starts_with("error: ") && err.lines().count() == 1, "{args:?}: {err}");
    }
    let o = capenext(&["eval", "--ckpt", s(&garbage), "--thresholds", "0.1,-2"]);
    assert!(!o.status.success());
}
