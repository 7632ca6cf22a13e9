use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = "[data]\nn_train_normal = 12\nn_val_normal = 4\nn_test_normal = 6\nn_test_contrast = 3\nn_test_texture = 3\nsize = 32\n\
[model]\nlatent_channels = 8\nbase_width = 4\n\
[train]\nepochs = 1\nbatch_size = 4\n";

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_popusense")).args(args).env_remove("POPUSENSE_SEED_OVERRIDE").output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn end_to_end_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "small.toml", SMALL);
    let data = d.join("data");

    let o = cli(&["gen-data", "--config", p(&cfg), "--out", p(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = std::fs::read_to_string(data.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 28);

    let ck = d.join("pdc.ckpt");
    let o = cli(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&ck)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stats = std::fs::read_to_string(d.join("pdc.ckpt.stats.csv")).unwrap();
    assert!(stats.starts_with("epoch,train_loss,val_loss,seconds\n1,"));

    let ck2 = d.join("pdc2.ckpt");
    let o = cli(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&ck2), "--stats", p(&d.join("s.csv"))]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(&ck).unwrap(), std::fs::read(&ck2).unwrap());

    let rep = d.join("pdc.json");
    let o = cli(&["eval", "--ckpt", p(&ck), "--data", p(&data), "--out", p(&rep)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rep2 = d.join("pdc2.json");
    cli(&["eval", "--ckpt", p(&ck), "--data", p(&data), "--out", p(&rep2)]);
    assert_eq!(std::fs::read(&rep).unwrap(), std::fs::read(&rep2).unwrap());
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&rep).unwrap()).unwrap();
    assert_eq!(json["schema_version"], 1);
    assert_eq!(json["rows"][0]["configuration"], "PDCCore");
    for kind in ["contrast", "texture"] {
        for m in ["image_auroc", "image_ap", "pixel_auroc", "best_dice"] {
            let v = json["rows"][0]["cells"][kind][m].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&v), "{kind} {m} = {v}");
        }
    }

    let table = d.join("table.txt");
    let o = cli(&["report", "--in", p(&rep), "--out", p(&table)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&table).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("PDCCore ")).count(), 2);
    assert!(d.join("table.json").exists());

    // Same arm, different seed: a conflicting cell.
    let cfg_b = write_config(d, "seed2.toml", &format!("{SMALL}seed = 2\n"));
    let ck_b = d.join("b.ckpt");
    assert!(cli(&["train", "--config", p(&cfg_b), "--data", p(&data), "--out", p(&ck_b)]).status.success());
    let rep_b = d.join("b.json");
    assert!(cli(&["eval", "--ckpt", p(&ck_b), "--data", p(&data), "--out", p(&rep_b)]).status.success());
    let o = cli(&["report", "--in", p(&rep), p(&rep_b), "--out", p(&d.join("t2.txt"))]);
    assert_eq!(o.status.code(), Some(2));
    let a_hash = json["rows"][0]["config_hash"].as_str().unwrap().to_string();
    let b_json: serde_json::Value = serde_json::from_slice(&std::fs::read(&rep_b).unwrap()).unwrap();
    let b_hash = b_json["rows"][0]["config_hash"].as_str().unwrap();
    let err = stderr(&o);
    assert!(err.contains(&a_hash) && err.contains(b_hash), "{err}");
}

#[test]
fn config_errors_exit_two_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "[train]\nlearning_rat = 0.1\n");
    let o = cli(&["gen-data", "--config", p(&cfg), "--out", p(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rat"), "{}", stderr(&o));

    let o = Command::new(env!("CARGO_BIN_EXE_popusense"))
        .args(["gen-data", "--config", p(&write_config(dir.path(), "ok.toml", "")), "--out", p(&dir.path().join("y"))])
        .env("POPUSENSE_SEED_OVERRIDE", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_exits_one_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    let o = cli(&["eval", "--ckpt", p(&missing), "--data", p(dir.path()), "--out", p(&dir.path().join("r.json"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope.ckpt"));
}

#[test]
fn zero_epochs_and_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    let cfg0 = write_config(d, "zero.toml", &SMALL.replace("epochs = 1", "epochs = 0"));
    assert!(cli(&["gen-data", "--config", p(&cfg0), "--out", p(&data)]).status.success());
    let o = cli(&["train", "--config", p(&cfg0), "--data", p(&data), "--out", p(&d.join("init.ckpt"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(d.join("init.ckpt.stats.csv")).unwrap(), "epoch,train_loss,val_loss,seconds\n");

    let hot =
        write_config(d, "hot.toml", &format!("{}learning_rate = 1e3\n", SMALL.replace("epochs = 1", "epochs = 3")));
    let o = cli(&["train", "--config", p(&hot), "--data", p(&data), "--out", p(&d.join("hot.ckpt"))]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(!d.join("hot.ckpt").exists());
}

#[test]
fn help_lists_flags() {
    for (cmd, flags) in [
        ("gen-data", &["--config", "--out"][..]),
        ("train", &["--config", "--data", "--out", "--stats"]),
        ("eval", &["--ckpt", "--data", "--out"]),
        ("report", &["--in", "--out", "--json"]),
    ] {
        let o = cli(&[cmd, "--help"]);
        assert!(o.status.success());
        let text = String::from_utf8_lossy(&o.stdout);
        for f in flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
    assert_eq!(cli(&["train"]).status.code(), Some(2));
}
