use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const BIN: &str = env!("CARGO_BIN_EXE_graphten");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Every file under `root`, relative path → bytes.
fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

/// A small two-class dataset and a model trained to fit it, shared by tests.
struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    run: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let run_dir = dir.path().join("run");
        let o = run(&[
            "gen-data",
            "--classes",
            "checkerboard,stripes",
            "--per-class",
            "8",
            "--split",
            "1,0,0",
            "--out",
            p(&data),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let o = run(&[
            "train",
            "--data",
            p(&data),
            "--epochs",
            "25",
            "--batch-size",
            "4",
            "--out",
            p(&run_dir),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        Fixture {
            _dir: dir,
            data,
            run: run_dir,
        }
    })
}

#[test]
fn gen_data_writes_layout_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = run(&[
            "gen-data",
            "--per-class",
            "5",
            "--size",
            "24",
            "--seed",
            "3",
            "--out",
            p(out),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let t = tree(&a);
    assert_eq!(
        t.iter()
            .filter(|(f, _)| f.extension().is_some_and(|e| e == "ppm"))
            .count(),
        20
    );
    assert!(t.iter().any(|(f, _)| f == Path::new("spec.txt")));
    let spec = String::from_utf8(fs::read(a.join("spec.txt")).unwrap()).unwrap();
    assert!(spec.contains("data.seed=3"), "{spec}");
    assert_eq!(t, tree(&b));
}

#[test]
fn gen_data_usage_errors_and_refusal() {
    let o = run(&["gen-data", "--per-class", "2"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--out"));

    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("keep.txt"), "x").unwrap();
    let o = run(&["gen-data", "--per-class", "2", "--size", "16", "--out", p(tmp.path())]);
    assert_eq!(code(&o), 1);
    assert!(tmp.path().join("keep.txt").exists());
    let o = run(&[
        "gen-data",
        "--per-class",
        "2",
        "--size",
        "16",
        "--force",
        "--out",
        p(tmp.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(!tmp.path().join("keep.txt").exists());

    assert_eq!(code(&run(&["gen-data", "--classes", "zebra", "--out", "x"])), 2);
    assert_eq!(code(&run(&["gen-data", "--bogus"])), 2);
    assert_eq!(code(&run(&[])), 2);
}

#[test]
fn unknown_config_keys_suggest_the_nearest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# comment\ntrain.epochz = 3\n").unwrap();
    let o = run(&["train", "--config", p(&cfg), "--data", "d", "--out", "o"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("train.epochs"), "{}", stderr(&o));
    let o = run(&["train", "--set", "model.pe=maybe", "--data", "d", "--out", "o"]);
    assert_eq!(code(&o), 2);
    assert_eq!(
        code(&run(&["train", "--ablate", "nope", "--data", "d", "--out", "o"])),
        2
    );
}

#[test]
fn train_writes_history_checkpoint_and_summary() {
    let f = fixture();
    let hist = csv_rows(&f.run.join("history.csv"));
    assert_eq!(hist[0].join(","), "epoch,train_loss,train_acc,val_loss,val_acc,lr");
    assert_eq!(hist.len(), 26);
    assert_eq!(hist[25][0], "25");
    assert!(f.run.join("model.ckpt").is_file());
    assert!(fs::read_to_string(f.run.join("config.txt"))
        .unwrap()
        .contains("model.classes=2"));
    let summary = csv_rows(&f.run.join("summary.csv"));
    assert_eq!(summary[0].join(","), "split,items,accuracy,loss");
    assert_eq!(summary[1][..2], ["train".to_string(), "16".to_string()]);
}

#[test]
fn train_refuses_a_non_empty_output_dir() {
    let f = fixture();
    let o = run(&["train", "--data", p(&f.data), "--epochs", "1", "--out", p(&f.run)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--force"));
}

#[test]
fn eval_on_the_training_split_of_an_overfit_run() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let ck = f.run.join("model.ckpt");
    let o = run(&[
        "eval",
        "--checkpoint",
        p(&ck),
        "--data",
        p(&f.data),
        "--split",
        "train",
        "--out",
        p(tmp.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics = csv_rows(&tmp.path().join("metrics.csv"));
    let acc: f64 = metrics[1][2].parse().unwrap();
    assert!(acc >= 0.99, "train accuracy {acc}");

    let confusion = csv_rows(&tmp.path().join("confusion.csv"));
    assert_eq!(confusion[0].join(","), "true\\pred,checkerboard,stripes");
    for row in &confusion[1..] {
        let total: usize = row[1..].iter().map(|v| v.parse::<usize>().unwrap()).sum();
        assert_eq!(total, 8, "{row:?}");
    }
}

#[test]
fn eval_errors() {
    let f = fixture();
    let missing = f.run.join("absent.ckpt");
    let o = run(&["eval", "--checkpoint", p(&missing), "--data", p(&f.data)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains(p(&missing)), "{}", stderr(&o));

    let tmp = tempfile::tempdir().unwrap();
    let three = tmp.path().join("three");
    let o = run(&[
        "gen-data",
        "--classes",
        "dots,blobs,noise",
        "--per-class",
        "2",
        "--out",
        p(&three),
    ]);
    assert_eq!(code(&o), 0);
    let o = run(&[
        "eval",
        "--checkpoint",
        p(&f.run.join("model.ckpt")),
        "--data",
        p(&three),
        "--split",
        "all",
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("classes"));

    let corrupt = tmp.path().join("bad.ckpt");
    let mut bytes = fs::read(f.run.join("model.ckpt")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(&corrupt, bytes).unwrap();
    let o = run(&["eval", "--checkpoint", p(&corrupt), "--data", p(&f.data)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("checksum"), "{}", stderr(&o));
}

#[test]
fn inspect_dumps_consistent_csvs() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let image = f.data.join("stripes/0000.ppm");
    let o = run(&[
        "inspect",
        "--checkpoint",
        p(&f.run.join("model.ckpt")),
        "--image",
        p(&image),
        "--out",
        p(tmp.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let att = csv_rows(&tmp.path().join("attention.csv"));
    let nodes = att.len() - 1;
    assert_eq!(att[0].len(), nodes + 1);
    for row in &att[1..] {
        let s: f64 = row[1..].iter().map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((s - 1.0).abs() <= 1e-9, "{s}");
    }

    let adj = csv_rows(&tmp.path().join("adjacency.csv"));
    assert_eq!(adj[0].join(","), "source,src_y,src_x,rank,target,tgt_y,tgt_x,distance");
    let mut per_source = std::collections::BTreeMap::new();
    for row in &adj[1..] {
        *per_source.entry(row[0].clone()).or_insert(0usize) += 1;
    }
    let n = *per_source.values().next().unwrap();
    assert!(per_source.values().all(|&c| c == n));
    assert_eq!(n, 4);

    let asg = csv_rows(&tmp.path().join("assignment.csv"));
    for row in &asg[1..] {
        let s: f64 = row[1..].iter().map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((s - 1.0).abs() <= 1e-9, "{s}");
    }
    let z = csv_rows(&tmp.path().join("z.csv"));
    assert_eq!(z[0].join(","), "index,value");
    assert!(z.len() > 1);

    // Output files are not overwritten without --force.
    let o = run(&[
        "inspect",
        "--checkpoint",
        p(&f.run.join("model.ckpt")),
        "--image",
        p(&image),
        "--out",
        p(tmp.path()),
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn gradcheck_filter_and_injected_fault() {
    let o = run(&["gradcheck", "--op", "softmax"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.lines().any(|l| l.starts_with("softmax")));
    assert!(!table.contains("matmul"));

    let o = run(&["gradcheck", "--op", "faulty_square", "--inject-fault"]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("faulty_square") && err.contains("input 0["), "{err}");

    assert_eq!(code(&run(&["gradcheck", "--op", "sofmax"])), 2);
    assert_eq!(code(&run(&["gradcheck", "--step", "-1"])), 2);
}
