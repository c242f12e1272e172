use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str =
    "# small model for end-to-end checks\nd = 8\nd0 = 8\nd1 = 4\nn_subjects = 2\nepochs = 1\nbase_lr = 1e-3\n";

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_corrtalk")).args(args).current_dir(cwd).output().unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = run(args, cwd);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn setup(dir: &Path) {
    ok(
        &["generate", "--out", "data", "--sequences", "3", "--frames", "40", "--vertices", "12", "--subjects", "2"],
        dir,
    );
    fs::write(dir.join("tiny.cfg"), TINY).unwrap();
}

#[test]
fn train_synthesize_evaluate_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    let msg = ok(&["train", "--config", "tiny.cfg", "--data", "data", "--out", "run"], dir);
    assert!(msg.contains("trained 3 steps"), "{msg}");
    let steps = fs::read_to_string(dir.join("run/steps.csv")).unwrap();
    assert_eq!(steps.lines().count(), 4);
    assert_eq!(fs::read_to_string(dir.join("run/epochs.csv")).unwrap().lines().count(), 2);

    ok(
        &[
            "synthesize",
            "data/seq000.wav",
            "data/neutral.fneu",
            "--style",
            "1",
            "--checkpoint",
            "run/model.ckpt",
            "--out",
            "pred.fmsq",
        ],
        dir,
    );
    for f in ["pred.fmsq", "pred.strong.fmsq", "pred.weak.fmsq"] {
        assert!(dir.join(f).exists(), "missing {f}");
    }
    let table = ok(&["evaluate", "pred.fmsq", "data/seq000.fmsq", "data/neutral.fneu", "data/regions.txt"], dir);
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("lip_vertex_error,fdd"));
    let values: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!(values[0] > 0.0 && values[1].is_finite());
    assert!(table.contains("lip_vertex_error"));
}

#[test]
fn resume_extends_the_schedule() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    ok(&["train", "--config", "tiny.cfg", "--data", "data", "--out", "a"], dir);
    fs::write(dir.join("longer.cfg"), TINY.replace("epochs = 1", "epochs = 2")).unwrap();
    let msg = ok(&["train", "--config", "longer.cfg", "--data", "data", "--out", "b", "--resume", "a/model.ckpt"], dir);
    assert!(msg.contains("trained 6 steps"), "{msg}");
    ok(&["train", "--config", "longer.cfg", "--data", "data", "--out", "c"], dir);
    assert_eq!(fs::read(dir.join("b/model.ckpt")).unwrap(), fs::read(dir.join("c/model.ckpt")).unwrap());

    fs::write(dir.join("other.cfg"), TINY.replace("d1 = 4", "d1 = 2")).unwrap();
    let out = run(&["train", "--config", "other.cfg", "--data", "data", "--out", "d", "--resume", "a/model.ckpt"], dir);
    assert!(!out.status.success());
}

#[test]
fn inspection_commands_write_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);

    ok(&["fai", "analyze", "data/seq000.fmsq", "data/neutral.fneu", "--out", "fai"], dir);
    let m0 = fs::read_to_string(dir.join("fai/m0.csv")).unwrap();
    assert_eq!(m0.lines().count(), 13);
    let m: Vec<f64> = m0.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(m.iter().all(|x| (0.0..=1.0).contains(x)));
    assert_eq!(fs::read_to_string(dir.join("fai/i0.csv")).unwrap().lines().count(), 41);
    let pgm = fs::read(dir.join("fai/i0.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n40 12\n255\n"));
    assert_eq!(pgm.len(), b"P5\n40 12\n255\n".len() + 40 * 12);

    let feats = ok(&["features", "extract", "data/seq000.wav", "--config", "tiny.cfg"], dir);
    assert!(feats.starts_with("frame,f0,"));
    assert_eq!(feats.lines().next().unwrap().split(',').count(), 9);

    ok(&["encode", "data/seq000.wav", "--config", "tiny.cfg", "--out", "enc"], dir);
    for f in ["h1.csv", "h4.csv", "weights_strong.csv", "weights_weak.csv", "features_strong.csv", "features_weak.csv"]
    {
        assert!(dir.join("enc").join(f).exists(), "missing {f}");
    }
    let w = fs::read_to_string(dir.join("enc/weights_strong.csv")).unwrap();
    for row in w.lines().skip(1) {
        let sum: f64 = row.split(',').skip(1).map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }
}

#[test]
fn ablate_emits_one_row_per_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    let csv = ok(&["ablate", "--config", "tiny.cfg", "--data", "data", "--out", "ablation.csv"], dir);
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "variant,lip_vertex_error,fdd,l_rec,l_total");
    assert_eq!(rows.len(), 6);
    assert_eq!(fs::read_to_string(dir.join("ablation.csv")).unwrap(), csv);
}

#[test]
fn bad_config_reports_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    fs::write(dir.join("bad.cfg"), "d = 8\nwidth = 3\n").unwrap();
    let out = run(&["train", "--config", "bad.cfg", "--data", "data", "--out", "run"], dir);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains('2') && err.contains("width"), "{err}");
}
