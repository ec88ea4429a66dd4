use std::path::Path;
use std::process::{Command, Output};

fn ftn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ftn")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = ftn(args);
    assert!(
        out.status.success(),
        "ftn {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_train_eval_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    for (split, seed) in [("train", "1"), ("val", "2"), ("test", "3")] {
        let msg = ok(&["synth", "--seed", seed, "--count", "2", "--size", "64", "--out", s(&data), "--split", split]);
        assert!(msg.contains("wrote 2 pairs"), "{msg}");
    }
    assert!(data.join("train/label/synth_00001.png").is_file());

    let run = dir.path().join("run");
    let config = dir.path().join("train.cfg");
    std::fs::write(
        &config,
        format!(
            "# tiny run\nbatch_size=2\nmax_steps=2\ndataset_root={}\noutput_dir={}\n",
            s(&data),
            s(&run)
        ),
    )
    .unwrap();
    let log = ok(&["train", "--config", s(&config), "--profile", "desk"]);
    assert_eq!(log.lines().next().unwrap(), "epoch,lr,train_loss,val_f1,val_iou");
    assert_eq!(log.lines().count(), 3);
    for file in ["best.ckpt", "last.ckpt", "log.csv", "config.txt"] {
        assert!(run.join(file).is_file(), "{file} missing");
    }

    let ckpt = run.join("last.ckpt");
    let metrics = ok(&["eval", "--ckpt", s(&ckpt), "--split", "test"]);
    let keys: Vec<_> = metrics.lines().map(|l| l.split_once('=').unwrap().0).collect();
    assert_eq!(keys, ["precision", "recall", "f1", "iou", "oa"]);

    let out = dir.path().join("pred");
    let a = data.join("test/A/synth_00000.png");
    let b = data.join("test/B/synth_00000.png");
    ok(&["predict", "--ckpt", s(&ckpt), "--a", s(&a), "--b", s(&b), "--out", s(&out)]);
    for file in ["probability.png", "mask.png", "overlay.png"] {
        assert!(out.join(file).is_file(), "{file} missing");
    }

    let report = ok(&["import-weights", "--src", s(&ckpt), "--profile", "desk"]);
    assert!(report.lines().any(|l| l.starts_with("loaded=") && l != "loaded=0"), "{report}");
    assert!(report.contains("ignored="));
}

#[test]
fn bad_inputs_fail_loudly() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.cfg");
    std::fs::write(&config, "learning_rate=0.1\n").unwrap();
    let out = ftn(&["train", "--config", s(&config), "--profile", "desk"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key 'learning_rate'"));

    let out = ftn(&["eval", "--ckpt", s(&dir.path().join("missing.ckpt")), "--split", "test"]);
    assert!(!out.status.success());
    let out = ftn(&["synth", "--seed", "1", "--count", "1", "--size", "64", "--out", s(dir.path()), "--split", "holdout"]);
    assert!(!out.status.success());
}
