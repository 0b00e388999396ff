use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use graphten::gradsuite;
use graphten::ndtensor::Graph;
use graphten::texdata::{self, load_dir, read_ppm, square_resize, write_dir, Dataset, Item, Split};
use graphten::trainer::{
    config_text, history_csv, load_checkpoint, save_checkpoint, Checkpoint, Evaluation, Model, Trainer,
};
use graphten::{Error, Tensor};

use crate::run_config::RunConfig;

fn required<'a>(value: &'a Option<PathBuf>, flag: &str, cmd: &str) -> graphten::Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::Config(format!("{cmd} needs {flag}")))
}

fn is_nonempty_dir(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Creates `dir`, refusing to reuse a non-empty one unless forced.
fn claim_dir(dir: &Path, force: bool) -> anyhow::Result<()> {
    if is_nonempty_dir(dir) && !force {
        bail!("{} exists and is not empty; pass --force to overwrite", dir.display());
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Refuses to overwrite any of `files` in `dir` unless forced.
fn claim_files(dir: &Path, files: &[&str], force: bool) -> anyhow::Result<()> {
    if !force {
        if let Some(f) = files.iter().map(|f| dir.join(f)).find(|p| p.exists()) {
            bail!("{} already exists; pass --force to overwrite", f.display());
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn counts_line(ds: &Dataset, split: Split) -> String {
    let per: Vec<String> = ds
        .classes
        .iter()
        .zip(ds.counts(split))
        .map(|(c, n)| format!("{c}={n}"))
        .collect();
    format!("{split}: {} ({})", ds.subset(split).len(), per.join(" "))
}

pub fn gen_data(rc: &RunConfig, force: bool) -> anyhow::Result<()> {
    let out = required(&rc.out, "--out", "gen-data")?;
    rc.data.validate()?;
    if is_nonempty_dir(out) {
        if !force {
            bail!("{} exists and is not empty; pass --force to overwrite", out.display());
        }
        fs::remove_dir_all(out).with_context(|| format!("clearing {}", out.display()))?;
    }
    let mut ds = texdata::generate(&rc.data)?;
    texdata::split(&mut ds, rc.split, rc.data.seed)?;
    write_dir(&ds, out, Some(&rc.data_text()))?;
    println!("wrote {} images to {}", ds.items.len(), out.display());
    for s in Split::ALL {
        println!("{}", counts_line(&ds, s));
    }
    Ok(())
}

/// Loads the dataset and tags splits, falling back to a seeded split.
fn load_data(rc: &RunConfig, input_size: usize, seed: u64, cmd: &str) -> anyhow::Result<Dataset> {
    let dir = required(&rc.data_dir, "--data", cmd)?;
    let report = load_dir(dir, input_size, rc.strict).with_context(|| format!("loading {}", dir.display()))?;
    for e in &report.skipped {
        eprintln!("warning: skipped {e}");
    }
    let mut ds = report.dataset;
    if !report.has_splits {
        texdata::split(&mut ds, rc.split, seed)?;
    }
    ds.validate()?;
    Ok(ds)
}

fn metrics_row(split: &str, n: usize, e: &Evaluation) -> String {
    format!("{split},{n},{},{}\n", e.accuracy, e.loss)
}

const METRICS_HEADER: &str = "split,items,accuracy,loss\n";

pub fn train(rc: &RunConfig, force: bool) -> anyhow::Result<()> {
    let out = required(&rc.out, "--out", "train")?.to_path_buf();
    rc.train.validate()?;
    let ds = load_data(rc, rc.model.input_size, rc.train.seed, "train")?;
    let mut model_cfg = rc.model.clone();
    model_cfg.classes = ds.num_classes();
    model_cfg.validate()?;
    if ds.subset(Split::Train).is_empty() {
        return Err(Error::Config("the train split is empty".into()).into());
    }
    claim_dir(&out, force)?;

    let model = Model::new(model_cfg, rc.train.seed)?;
    println!(
        "{} parameters, {} training images",
        model.params.iter().map(|p| p.value.len()).sum::<usize>(),
        ds.subset(Split::Train).len()
    );
    let mut trainer = Trainer::new(model, rc.train.clone())?;
    let start = Instant::now();
    let epochs = rc.train.epochs;
    let history = trainer.fit(&ds, |r| {
        let val = match r.val_acc {
            Some(a) => format!(" val_acc={a:.4}"),
            None => String::new(),
        };
        println!(
            "epoch {}/{epochs} loss={:.4} acc={:.4}{val} lr={:.3e}",
            r.epoch, r.train_loss, r.train_acc, r.lr
        );
    })?;
    eprintln!("trained in {:.1}s", start.elapsed().as_secs_f64());

    write_file(&out.join("history.csv"), &history_csv(&history))?;
    write_file(&out.join("config.txt"), &config_text(&trainer.model.cfg, &trainer.cfg))?;
    save_checkpoint(&out.join("model.ckpt"), &trainer.checkpoint())?;
    let mut summary = String::from(METRICS_HEADER);
    for s in Split::ALL {
        let items = ds.subset(s);
        if items.is_empty() {
            continue;
        }
        let e = trainer.evaluate(&items)?;
        summary.push_str(&metrics_row(&s.to_string(), items.len(), &e));
        println!("{s} accuracy {:.4} ({} images)", e.accuracy, items.len());
    }
    write_file(&out.join("summary.csv"), &summary)?;
    Ok(())
}

fn load_trainer(rc: &RunConfig, cmd: &str) -> anyhow::Result<(Checkpoint, Trainer)> {
    let path = required(&rc.checkpoint, "--checkpoint", cmd)?;
    let ck = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let mut t = Trainer::from_checkpoint(&ck).with_context(|| format!("checkpoint {}", path.display()))?;
    t.set_threads(rc.train.threads)?;
    Ok((ck, t))
}

pub fn eval(rc: &RunConfig, split: &str, force: bool) -> anyhow::Result<()> {
    let (_, trainer) = load_trainer(rc, "eval")?;
    let model = &trainer.model;
    let ds = load_data(rc, model.cfg.input_size, trainer.cfg.seed, "eval")?;
    if ds.num_classes() != model.cfg.classes {
        return Err(Error::Config(format!(
            "checkpoint has {} classes but the dataset has {}",
            model.cfg.classes,
            ds.num_classes()
        ))
        .into());
    }
    let items: Vec<&Item> = match split {
        "all" => ds.items.iter().collect(),
        s => ds.subset(
            s.parse()
                .map_err(|_| Error::Config(format!("unknown split {s:?}; expected train, val, test or all")))?,
        ),
    };
    if items.is_empty() {
        bail!("the {split} split is empty");
    }
    let e = trainer.evaluate(&items)?;
    println!(
        "{split} accuracy {:.4} loss {:.4} ({} images)",
        e.accuracy,
        e.loss,
        items.len()
    );
    let confusion = e.confusion_csv(&ds.classes);
    if let Some(out) = &rc.out {
        claim_files(out, &["confusion.csv", "metrics.csv"], force)?;
        write_file(&out.join("confusion.csv"), &confusion)?;
        write_file(
            &out.join("metrics.csv"),
            &format!("{METRICS_HEADER}{}", metrics_row(split, items.len(), &e)),
        )?;
    } else {
        print!("{confusion}");
    }
    Ok(())
}

pub fn gradcheck(filter: Option<&str>, step: Option<f64>, inject_fault: bool, seed: u64) -> anyhow::Result<()> {
    if let Some(h) = step {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::Config(format!("--step must be positive, got {h}")).into());
        }
    }
    let mut checks = gradsuite::select(filter, inject_fault)?;
    if let Some(h) = step {
        checks.iter_mut().for_each(|c| c.step = h);
    }
    let start = Instant::now();
    println!(
        "{:<28} {:>6} {:>12} {:>10}  result",
        "check", "trials", "max_rel_err", "tolerance"
    );
    let mut failures = Vec::new();
    for c in &checks {
        let r = c.run(seed).with_context(|| format!("gradient check {}", c.name))?;
        println!(
            "{:<28} {:>6} {:>12.3e} {:>10.0e}  {}",
            r.name,
            r.trials,
            r.max_rel_error,
            r.tolerance,
            if r.passed { "ok" } else { "FAIL" }
        );
        if !r.passed {
            failures.push(r);
        }
    }
    println!("{} checks in {:.2}s", checks.len(), start.elapsed().as_secs_f64());
    if let Some(first) = failures.first() {
        let names: Vec<&str> = failures.iter().map(|r| r.name).collect();
        bail!(
            "{} check(s) above tolerance: {}; worst in {}: {} (rel error {:.3e})",
            failures.len(),
            names.join(", "),
            first.name,
            first.worst,
            first.max_rel_error
        );
    }
    Ok(())
}

fn matrix_csv(first: &str, prefix: &str, t: &Tensor) -> String {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    let mut s = String::from(first);
    for c in 0..cols {
        let _ = write!(s, ",{prefix}{c}");
    }
    s.push('\n');
    for (r, row) in t.data().chunks(cols).enumerate().take(rows) {
        let _ = write!(s, "{r}");
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

pub fn inspect(rc: &RunConfig, image: &Path, force: bool) -> anyhow::Result<()> {
    let out = required(&rc.out, "--out", "inspect")?;
    let (_, trainer) = load_trainer(rc, "inspect")?;
    let model = &trainer.model;
    let img = read_ppm(image)?;
    let img = square_resize(&img, model.cfg.input_size)?;
    let files = [
        "attention.csv",
        "adjacency.csv",
        "assignment.csv",
        "z.csv",
        "logits.csv",
    ];
    claim_files(out, &files, force)?;

    let mut g = Graph::new();
    let x = g.input(img);
    let tr = model.forward(&mut g, x)?;
    let mut written = Vec::new();
    if let Some(a) = tr.attention {
        write_file(&out.join("attention.csv"), &matrix_csv("node", "n", g.value(a)))?;
        written.push("attention.csv");
    }
    if let Some(adj) = &tr.adjacency {
        let mut s = String::from("source,src_y,src_x,rank,target,tgt_y,tgt_x,distance\n");
        let (sw, tw) = (adj.source.1, adj.target.1);
        for src in 0..adj.sources() {
            for (rank, (&t, d)) in adj.neighbors(src).iter().zip(adj.distances(src)).enumerate() {
                let _ = writeln!(
                    s,
                    "{src},{},{},{rank},{t},{},{},{d}",
                    src / sw,
                    src % sw,
                    t / tw,
                    t % tw
                );
            }
        }
        write_file(&out.join("adjacency.csv"), &s)?;
        written.push("adjacency.csv");
    }
    if let Some(a) = tr.assignment {
        write_file(&out.join("assignment.csv"), &matrix_csv("pixel", "k", g.value(a)))?;
        written.push("assignment.csv");
    }
    let mut z = String::from("index,value\n");
    for (i, v) in g.value(tr.z).data().iter().enumerate() {
        let _ = writeln!(z, "{i},{v}");
    }
    write_file(&out.join("z.csv"), &z)?;
    written.push("z.csv");
    let logits = g.value(tr.logits).data();
    let mut l = String::from("class,logit\n");
    for (i, v) in logits.iter().enumerate() {
        let _ = writeln!(l, "{i},{v}");
    }
    write_file(&out.join("logits.csv"), &l)?;
    written.push("logits.csv");
    println!(
        "predicted class {} ; wrote {} to {}",
        graphten::trainer::argmax(logits),
        written.join(", "),
        out.display()
    );
    Ok(())
}
