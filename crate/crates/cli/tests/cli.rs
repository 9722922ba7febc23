use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_interpcnn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

const TINY_NET: &str = r#"
[train]
epochs = 2
batch_size = 4
features = "xyz"

[train.optimizer]
lr = 0.01
decay = 1.0
decay_every = 10

[classifier]
stem = 8
head = [16]
dropout = 0.0
interpolation = "gaussian"
normalization = "by_count"

[[classifier.modules]]
width = 8
lengths = [0.2, 0.4]

[[classifier.modules]]
width = 16
lengths = [0.4, 0.8]
"#;

fn synthetic_config(dir: &Path) -> std::path::PathBuf {
    let cfg = format!(
        "task = \"classification\"\n[data]\nsource = \"synthetic\"\ntrain = 6\ntest = 3\npoints = 64\n{TINY_NET}"
    );
    let path = dir.join("tiny.toml");
    fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn verify_list_names_checks_without_running() {
    let o = run(&["verify", "--list"]);
    assert!(o.status.success());
    let out = text(&o.stdout);
    assert!(out.lines().count() >= 20, "{out}");
    assert!(
        out.contains("grid.dense_equivalence") && !out.contains("checks passed"),
        "{out}"
    );
}

#[test]
fn verify_filter_runs_only_matching_checks_and_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "verify",
        "--filter",
        "grid",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    let out = text(&o.stdout);
    assert!(out.starts_with("pass grid.dense_equivalence"), "{out}");
    assert!(out.contains("1 of 1 checks passed"), "{out}");
    let csv = fs::read_to_string(dir.path().join("verify.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn mutant_fails_the_duplication_checks() {
    let o = run(&["verify", "--filter", "sparsity", "--mutant", "off-by-one"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(text(&o.stdout).matches("fail sparsity").count(), 2);
}

#[test]
fn missing_manifest_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("m.toml");
    fs::write(
        &cfg,
        format!("task = \"classification\"\n[data]\nsource = \"manifest\"\nmanifest = \"nowhere/list.csv\"\npoints = 64\n{TINY_NET}"),
    )
    .unwrap();
    let o = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        text(&o.stderr).contains("nowhere/list.csv"),
        "{}",
        text(&o.stderr)
    );
}

#[test]
fn config_errors_exit_2_with_position() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "task = \"classification\"\n[data]\nsource = \"synthetic\"\ntrain = 6\ntest = 3\npoints = 64\nnoize = 0.1\n").unwrap();
    let o = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = text(&o.stderr);
    assert!(err.contains("noize") && err.contains("line 7"), "{err}");
}

#[test]
fn corrupt_checkpoint_exits_2_with_bad_magic() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("x.icnn");
    fs::write(&ck, b"NOPE0 and some bytes").unwrap();
    let o = run(&["eval", ck.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("bad magic"), "{}", text(&o.stderr));
}

#[test]
fn train_writes_outputs_reruns_identically_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synthetic_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&[
            "train",
            "--config",
            cfg,
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "5",
            "--deterministic",
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
        for f in ["metrics.csv", "best.icnn", "effective.toml"] {
            assert!(out.join(f).exists(), "{f} missing");
        }
    }
    let ma = fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(ma, fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(text(&ma).lines().count(), 1 + 2 * 2);
    let eff = fs::read_to_string(a.join("effective.toml")).unwrap();
    assert!(
        eff.contains("seed = 5") && eff.contains("decay_every = 10"),
        "{eff}"
    );

    let o = run(&["eval", a.join("best.icnn").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    assert!(text(&o.stdout).contains("accuracy"));
    let csv = fs::read_to_string(a.join("eval_test.csv")).unwrap();
    assert!(
        csv.starts_with("split,clouds,loss,accuracy,miou_cat,miou_inst\ntest,3,"),
        "{csv}"
    );

    let cloud = dir.path().join("c.xyz");
    fs::write(&cloud, sphere(40).join("\n")).unwrap();
    let o = run(&[
        "infer",
        a.join("best.icnn").to_str().unwrap(),
        cloud.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    assert!(
        text(&o.stdout).starts_with("class,probabilities\n"),
        "{}",
        text(&o.stdout)
    );
}

/// Golden-spiral points on the unit sphere as `x y z` rows.
fn sphere(n: usize) -> Vec<String> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let t = golden * i as f64;
            format!("{} {} {}", r * t.cos(), r * t.sin(), z)
        })
        .collect()
}

/// Points on the faces of the unit cube.
fn cube(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| {
            let u = ((i * 37) % 101) as f64 / 50.0 - 1.0;
            let v = ((i * 53) % 97) as f64 / 48.0 - 1.0;
            let s = if i % 2 == 0 { 1.0 } else { -1.0 };
            match i % 3 {
                0 => format!("{s} {u} {v}"),
                1 => format!("{u} {s} {v}"),
                _ => format!("{u} {v} {s}"),
            }
        })
        .collect()
}

#[test]
fn memorized_two_cloud_set_evaluates_to_full_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("s.xyz"), sphere(64).join("\n")).unwrap();
    fs::write(dir.path().join("c.xyz"), cube(64).join("\n")).unwrap();
    fs::write(
        dir.path().join("list.csv"),
        "name,path,split,label\nball,s.xyz,train,sphere\nbox,c.xyz,train,cube\nball2,s.xyz,test,sphere\nbox2,c.xyz,test,cube\n",
    )
    .unwrap();
    let cfg = TINY_NET
        .replace("epochs = 2", "epochs = 40")
        .replace("batch_size = 4", "batch_size = 2\nrecalibrate_bn = true");
    let cfg = format!("task = \"classification\"\n[data]\nsource = \"manifest\"\nmanifest = \"list.csv\"\npoints = 64\n\n[train.augment]\nscale_min = 1.0\nscale_max = 1.0\njitter_std = 0.0\n{cfg}");
    let path = dir.path().join("mem.toml");
    fs::write(&path, cfg).unwrap();
    let out = dir.path().join("run");
    let o = run(&[
        "train",
        "--config",
        path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    let o = run(&[
        "eval",
        out.join("best.icnn").to_str().unwrap(),
        "--split",
        "train",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    let csv = fs::read_to_string(out.join("eval_train.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[3], "1.000000", "{csv}");
}

#[test]
fn bench_reports_rows_and_the_analytic_parameter_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synthetic_config(dir.path());
    let mut text_cfg = fs::read_to_string(&cfg).unwrap();
    text_cfg.push_str(
        "\n[bench]\npoints = [32, 64]\nbatch = 2\nwarmup = 0\nrepetitions = 2\nclasses = 4\n",
    );
    fs::write(&cfg, text_cfg).unwrap();
    let o = run(&["bench", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    let out = text(&o.stdout);
    let first = out.lines().next().unwrap();
    let nums: Vec<&str> = first
        .split(|c: char| !c.is_ascii_digit())
        .filter(|s| !s.is_empty())
        .collect();
    assert_eq!(nums.len(), 2, "{first}");
    assert_eq!(nums[0], nums[1], "{first}");
    assert!(out.contains("points,batch,pass,mean_ms,std_ms,repetitions"));
    assert!(
        out.contains("64,2,forward,") && out.contains("32,2,train_step,"),
        "{out}"
    );
}
