use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn advnli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advnli"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(&o));
    o
}

fn path_arg(key: &str, p: &Path) -> String {
    format!("--{key}={}", p.display())
}

/// A small synthetic corpus plus a trained model under `dir`.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let data = dir.path().join("data");
        ok(advnli(&[
            "synth",
            "--seed",
            "3",
            "--out",
            data.to_str().unwrap(),
            "--synth-train=200",
            "--synth-dev=60",
            "--synth-test=60",
        ]));
        let f = Fixture { dir };
        f.train(&f.path("model"));
        f
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn data(&self, key: &str) -> String {
        path_arg(key, &self.path(&format!("data/{key}.jsonl")))
    }

    fn train(&self, out: &Path) -> Output {
        ok(advnli(&[
            "train",
            "--seed",
            "9",
            "--out",
            out.to_str().unwrap(),
            &self.data("train"),
            &self.data("dev"),
            "--epochs=2",
            "--embedding-dim=6",
            "--hidden-dim=6",
        ]))
    }

    /// Arguments pointing at the trained model and its language model.
    fn model_args(&self) -> Vec<String> {
        vec![
            path_arg("checkpoint", &self.path("model/model.ckpt")),
            path_arg("lm", &self.path("model/lm.txt")),
        ]
    }

    fn run(&self, cmd: &str, out: &str, extra: &[String]) -> Output {
        let out = self.path(out);
        let mut args = vec![cmd.to_owned(), "--seed".into(), "4".into(), "--out".into()];
        args.push(out.display().to_string());
        args.extend(self.model_args());
        args.extend(extra.iter().cloned());
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        advnli(&refs)
    }
}

#[test]
fn train_writes_outputs_and_is_deterministic() {
    let f = Fixture::new();
    for name in ["model.ckpt", "best.ckpt", "lm.txt", "train.tsv", "train.config"] {
        assert!(f.path("model").join(name).exists(), "missing {name}");
    }
    let tsv = fs::read_to_string(f.path("model/train.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 3, "{tsv}");
    assert!(tsv.starts_with("epoch\tdata_loss\tadv_loss\tdev_acc\t"));

    f.train(&f.path("again"));
    for name in ["model.ckpt", "best.ckpt", "lm.txt"] {
        assert_eq!(
            fs::read(f.path("model").join(name)).unwrap(),
            fs::read(f.path("again").join(name)).unwrap(),
            "{name} differs between identical runs"
        );
    }
    // everything but the wall-clock column
    let without_seconds = |dir: &str| -> Vec<String> {
        fs::read_to_string(f.path(dir).join("train.tsv"))
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once('\t').unwrap().0.to_owned())
            .collect()
    };
    assert_eq!(without_seconds("model"), without_seconds("again"));
}

#[test]
fn missing_input_names_the_path() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("no_such.jsonl");
    let o = advnli(&["train", "--out", dir.path().to_str().unwrap(), &path_arg("train", &missing)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no_such.jsonl"), "{}", stderr(&o));
}

#[test]
fn unknown_key_is_rejected() {
    let o = advnli(&["synth", "--no-such-key=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no_such_key"), "{}", stderr(&o));
}

#[test]
fn finetune_writes_one_checkpoint_per_lambda() {
    let f = Fixture::new();
    ok(f.run(
        "finetune",
        "ft",
        &[
            f.data("train"),
            f.data("dev"),
            "--lambdas=0,0.1".into(),
            "--epochs=1".into(),
            "--seeds-per-round=4".into(),
            "--pool-size=64".into(),
        ],
    ));
    for tag in ["0", "0.1"] {
        assert!(f.path(&format!("ft/finetune_lambda{tag}.ckpt")).exists());
        assert!(f.path(&format!("ft/finetune_lambda{tag}.tsv")).exists());
    }
    let curve = fs::read_to_string(f.path("ft/violations_curve.tsv")).unwrap();
    let rows: Vec<&str> = curve.lines().collect();
    assert_eq!(rows[0], "lambda\trule\tbody\tviolations\tpct\tdev_acc");
    // r5 has three variables and is not audited
    assert_eq!(rows.len(), 1 + 2 * 4, "{curve}");
    for row in &rows[1..] {
        let cols: Vec<&str> = row.split('\t').collect();
        assert_eq!(cols.len(), 6);
        let body: usize = cols[2].parse().unwrap();
        let viol: usize = cols[3].parse().unwrap();
        assert!(viol <= body);
    }
}

#[test]
fn attack_is_reproducible_and_tolerates_an_empty_result() {
    let f = Fixture::new();
    let args = [f.data("train"), "--seeds-per-round=6".into(), "--pool-size=64".into()];
    ok(f.run("attack", "a1", &args));
    ok(f.run("attack", "a2", &args));
    let first = fs::read(f.path("a1/attack.jsonl")).unwrap();
    assert!(!first.is_empty());
    assert_eq!(first, fs::read(f.path("a2/attack.jsonl")).unwrap());
    for line in String::from_utf8(first).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["loss"].as_f64().unwrap() >= 0.0);
        assert!(v["rule"].is_string());
    }

    let mut strict = args.to_vec();
    strict.push("--tau=0.01".into());
    ok(f.run("attack", "a3", &strict));
    assert_eq!(fs::read_to_string(f.path("a3/attack.jsonl")).unwrap(), "");
}

#[test]
fn malformed_rules_report_the_line() {
    let f = Fixture::new();
    let rules = f.path("bad.rules");
    fs::write(&rules, "r1: true => ent(X1,X1)\nr2: con(X1,X2 => con(X2,X1)\n").unwrap();
    let o = f.run("attack", "bad", &[f.data("train"), path_arg("rules", &rules)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn craft_audit_and_eval() {
    let f = Fixture::new();
    ok(f.run("craft", "c", &[f.data("dev"), "--k=25".into()]));
    let crafted = fs::read_to_string(f.path("c/crafted_k25.jsonl")).unwrap();
    assert_eq!(crafted.lines().count(), 50);
    let annotation = fs::read_to_string(f.path("c/crafted_k25.annotation.tsv")).unwrap();
    // one row per swapped pair to be labeled
    assert_eq!(annotation.lines().count(), 26);

    let o = f.run("craft", "c0", &[f.data("dev"), "--k=0".into()]);
    assert_eq!(o.status.code(), Some(1));

    let o = ok(f.run("audit", "au", &[f.data("dev")]));
    let tsv = fs::read_to_string(f.path("au/violations.tsv")).unwrap();
    assert!(tsv.starts_with("rule\tbody\tviolations\tpct\n"), "{tsv}");
    assert_eq!(tsv.lines().count(), 5);
    assert_eq!(String::from_utf8_lossy(&o.stdout), tsv);

    let o = ok(f.run("eval", "ev", &[f.data("test")]));
    let line = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(line.starts_with("accuracy "), "{line}");
    assert!(line.contains("of 60 labeled"), "{line}");

    // the swapped half of the crafted set carries no gold labels
    let unlabeled = f.path("unlabeled.jsonl");
    let only_swaps: String = crafted.lines().skip(1).step_by(2).map(|l| format!("{l}\n")).collect();
    fs::write(&unlabeled, only_swaps).unwrap();
    let o = f.run("eval", "ev2", &[path_arg("test", &unlabeled)]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}
