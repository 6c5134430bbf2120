use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
n_train = 24
n_val = 8
n_test = 8
img_size = 8
sigma = 0.8
d = 16
r = 4
n_emb = 4
emb_hidden = 8
hidden1 = 16
hidden2 = 16
head_hidden = 16
batch_size = 8
finetune_batch_size = 8
epochs = 2
finetune_epochs = 2
";

fn isomorph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_isomorph"))
        .args(args)
        .env("TI_LOG_LEVEL", "error")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn write_config(dir: &Path, extra: &str) -> String {
    let p = dir.join("run.cfg");
    fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn verify_group_passes_and_catches_the_sign_fault() {
    let ok = isomorph(&["verify-group", "--trials", "2000"]);
    assert_eq!(code(&ok), 0, "{}", text(&ok));
    assert!(text(&ok).contains("associativity"));
    let bad = isomorph(&["verify-group", "--trials", "200", "--fault", "sign-flip"]);
    assert_eq!(code(&bad), 5, "{}", text(&bad));
    assert!(text(&bad).contains("violation: anti-commutation"));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bogus = 3\n");
    let o = isomorph(&["gen-data", "--config", &cfg, "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(text(&o).contains("line 17"), "{}", text(&o));
    let o = isomorph(&["pretrain", "--mode", "sideways", "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
}

#[test]
fn pretraining_is_byte_identical_across_reruns() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        let cfg = write_config(d, "");
        let o = isomorph(&["pretrain", "--config", &cfg, "--seed", "3", "--out", s(d)]);
        assert_eq!(code(&o), 0, "{}", text(&o));
    }
    for f in ["pretrain_ti_s3.csv", "pretrain_ti_s3.ckpt", "dataset.bin"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let csv = fs::read_to_string(a.path().join("pretrain_ti_s3.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 1 + 2 * 2);
    assert!(!a.path().join(".lock").exists());
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let short = write_config(a.path(), "");
    fs::write(a.path().join("run.cfg"), TINY.replace("epochs = 2\nfinetune", "epochs = 1\nfinetune")).unwrap();
    let o = isomorph(&["pretrain", "--config", &short, "--mode", "invariance", "--out", s(a.path())]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    fs::write(a.path().join("run.cfg"), TINY).unwrap();
    let o = isomorph(&["pretrain", "--config", &short, "--mode", "invariance", "--resume", "--out", s(a.path())]);
    assert_eq!(code(&o), 0, "{}", text(&o));

    let full = write_config(b.path(), "");
    let o = isomorph(&["pretrain", "--config", &full, "--mode", "invariance", "--out", s(b.path())]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    for f in ["pretrain_invariance_s0.csv", "pretrain_invariance_s0.ckpt"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }

    // a different trajectory config is refused
    let other = write_config(a.path(), "w = 0.5\n");
    let o = isomorph(&["pretrain", "--config", &other, "--mode", "invariance", "--resume", "--out", s(a.path())]);
    assert_eq!(code(&o), 2, "{}", text(&o));
}

#[test]
fn finetune_eval_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "");
    for mode in ["ti", "recon_only"] {
        let o = isomorph(&["pretrain", "--config", &cfg, "--mode", mode, "--out", s(d)]);
        assert_eq!(code(&o), 0, "{}", text(&o));
        let ck = d.join(format!("pretrain_{mode}_s0.ckpt"));
        let o = isomorph(&["finetune", "--config", &cfg, "--checkpoint", s(&ck), "--out", s(d)]);
        assert_eq!(code(&o), 0, "{}", text(&o));
    }
    let o = isomorph(&["finetune", "--config", &cfg, "--out", s(d)]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let ft = d.join("finetune_ti_s0.ckpt");
    let o = isomorph(&["eval", "--checkpoint", s(&ft), "--out", s(d)]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(text(&o).contains("test"));
    let eval_csv = fs::read_to_string(d.join("eval_ti_s0.csv")).unwrap();
    assert_eq!(eval_csv.lines().count(), 4);

    let o = isomorph(&["report", "--out", s(d)]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(text(&o).contains("ft-random-s0"));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("summary.json")).unwrap()).unwrap();
    assert!(summary["finetune"]["ti"]["median_final_mpjpe"].is_number());
    assert!(summary["pretrain"]["recon_only"]["median_consistency_ratio"].is_number());
    assert!(summary["finetune"]["ti"]["median_test_mpjpe"].is_number());

    // a pretraining checkpoint is not a pose model
    let pre = d.join("pretrain_ti_s0.ckpt");
    let o = isomorph(&["eval", "--checkpoint", s(&pre), "--out", s(d)]);
    assert_eq!(code(&o), 3);
}

#[test]
fn finetune_rejects_latent_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "");
    assert_eq!(code(&isomorph(&["pretrain", "--config", &cfg, "--out", s(d)])), 0);
    let wide = write_config(d, "").replace("run.cfg", "wide.cfg");
    fs::write(&wide, TINY.replace("d = 16", "d = 20")).unwrap();
    let ck = d.join("pretrain_ti_s0.ckpt");
    let o = isomorph(&["finetune", "--config", &wide, "--checkpoint", s(&ck), "--out", s(d)]);
    assert_eq!(code(&o), 3, "{}", text(&o));
    assert!(text(&o).contains("dimension mismatch"));
}

#[test]
fn missing_and_corrupt_inputs_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = d.join("nope.ckpt");
    let o = isomorph(&["eval", "--checkpoint", s(&missing), "--out", s(d)]);
    assert_eq!(code(&o), 3);
    assert!(text(&o).contains("nope.ckpt"), "{}", text(&o));

    let header = "run_id,mode,seed,epoch,split,l_classic,l_ord,l_sec,l_ti,mpjpe,pa_mpjpe";
    fs::write(d.join("a.csv"), format!("{header}\nr,ti,0,0,val,,,,,0.5,0.2\nr,ti,0,x,val,,,,,0.5,0.2\n")).unwrap();
    let o = isomorph(&["report", "--out", s(d)]);
    assert_eq!(code(&o), 3);
    assert!(text(&o).contains("a.csv:3"), "{}", text(&o));
    fs::write(d.join("a.csv"), "run,mode\nr,ti\n").unwrap();
    let o = isomorph(&["report", "--out", s(d)]);
    assert_eq!(code(&o), 3);
    assert!(text(&o).contains("schema mismatch"));

    let cfg = write_config(d, "");
    fs::write(d.join("dataset.bin"), b"TIDS garbage").unwrap();
    let o = isomorph(&["pretrain", "--config", &cfg, "--out", s(d)]);
    assert_eq!(code(&o), 3, "{}", text(&o));
}

#[test]
fn held_lock_blocks_a_second_writer() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join(".lock"), "").unwrap();
    let o = isomorph(&["gen-data", "--out", s(dir.path())]);
    assert_eq!(code(&o), 3);
    assert!(text(&o).contains(".lock"));
}

#[test]
fn diverging_training_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "learning_rate = 1e300\n");
    let o = isomorph(&["pretrain", "--config", &cfg, "--out", s(dir.path())]);
    assert_eq!(code(&o), 4, "{}", text(&o));
    assert!(text(&o).contains("epoch"));
}
