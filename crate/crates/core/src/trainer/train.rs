//! Mini-batch training, plateau schedule, and evaluation.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::model::{argmax, Model, SampleGrad};
use super::sgd::{sgd_step, SgdConfig, SgdState};
use crate::config::{parse_value, KvMap};
use crate::error::{Error, Result};
use crate::ndtensor::Tensor;
use crate::texdata::{Dataset, Item, Split};

/// Minimum absolute drop in validation error that counts as progress.
pub const PLATEAU_DELTA: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Divisor applied to the learning rate on a plateau.
    pub lr_drop: f64,
    /// Epochs without progress before the learning rate drops.
    pub patience: usize,
    pub seed: u64,
    /// Worker threads for per-sample gradients. Results do not depend on it.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.004,
            momentum: 0.9,
            weight_decay: 0.001,
            batch_size: 8,
            epochs: 50,
            lr_drop: 10.0,
            patience: 5,
            seed: 7,
            threads: 1,
        }
    }
}

pub const TRAIN_KEYS: &[&str] = &[
    "train.lr",
    "train.momentum",
    "train.weight_decay",
    "train.batch_size",
    "train.epochs",
    "train.lr_drop",
    "train.patience",
    "train.seed",
    "train.threads",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight decay must be ≥ 0, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 || self.threads == 0 {
            return Err(Error::Config("batch size and thread count must be ≥ 1".into()));
        }
        if self.lr_drop.is_nan() || self.lr_drop < 1.0 {
            return Err(Error::Config(format!(
                "lr drop factor must be ≥ 1, got {}",
                self.lr_drop
            )));
        }
        Ok(())
    }

    pub fn sgd(&self, lr: f64) -> SgdConfig {
        SgdConfig {
            lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    /// Thread count is left out: it never changes results.
    pub fn to_kv(&self, map: &mut KvMap) {
        for (k, v) in [
            ("train.lr", self.lr.to_string()),
            ("train.momentum", self.momentum.to_string()),
            ("train.weight_decay", self.weight_decay.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.epochs", self.epochs.to_string()),
            ("train.lr_drop", self.lr_drop.to_string()),
            ("train.patience", self.patience.to_string()),
            ("train.seed", self.seed.to_string()),
        ] {
            map.insert(k.into(), v);
        }
    }

    pub fn apply(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "train.lr" => self.lr = parse_value(key, v)?,
            "train.momentum" => self.momentum = parse_value(key, v)?,
            "train.weight_decay" => self.weight_decay = parse_value(key, v)?,
            "train.batch_size" => self.batch_size = parse_value(key, v)?,
            "train.epochs" => self.epochs = parse_value(key, v)?,
            "train.lr_drop" => self.lr_drop = parse_value(key, v)?,
            "train.patience" => self.patience = parse_value(key, v)?,
            "train.seed" => self.seed = parse_value(key, v)?,
            "train.threads" => self.threads = parse_value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_kv(map: &KvMap) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in map {
            cfg.apply(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,lr";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            self.train_loss,
            self.train_acc,
            opt(self.val_loss),
            opt(self.val_acc),
            self.lr
        )
    }
}

pub fn history_csv(records: &[EpochRecord]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Mutable schedule state carried across epochs and checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub lr: f64,
    pub best_err: f64,
    pub stale: usize,
    /// Shuffling RNG.
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        // Parameter initialisation uses stream 0 of the same seed.
        rng.set_stream(1);
        Self {
            epoch: 0,
            lr: cfg.lr,
            best_err: f64::INFINITY,
            stale: 0,
            rng,
        }
    }

    /// Plateau rule on the epoch's error; returns whether the rate dropped.
    pub fn observe(&mut self, err: f64, cfg: &TrainConfig) -> bool {
        if err < self.best_err - PLATEAU_DELTA {
            self.best_err = err;
            self.stale = 0;
            return false;
        }
        self.stale += 1;
        if self.stale >= cfg.patience {
            self.lr /= cfg.lr_drop;
            self.stale = 0;
            return true;
        }
        false
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<usize>,
}

impl Evaluation {
    pub fn confusion_csv(&self, classes: &[String]) -> String {
        let mut out = String::from("true\\pred");
        for c in classes {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (row, name) in self.confusion.iter().zip(classes) {
            out.push_str(name);
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

fn check_items(op: &'static str, items: &[&Item], classes: usize) -> Result<()> {
    if items.is_empty() {
        return Err(Error::contract(op, "empty dataset"));
    }
    if let Some(it) = items.iter().find(|it| it.label >= classes) {
        return Err(Error::contract(
            op,
            format!("{}: label {} outside 0..{classes}", it.id, it.label),
        ));
    }
    Ok(())
}

/// Runs `f` over `items` in order, on `pool` when present.
fn map_items<R: Send>(
    pool: Option<&rayon::ThreadPool>,
    items: &[&Item],
    f: impl Fn(&Item) -> Result<R> + Sync + Send,
) -> Result<Vec<R>> {
    match pool {
        Some(p) => p.install(|| items.par_iter().map(|it| f(it)).collect()),
        None => items.iter().map(|it| f(it)).collect(),
    }
}

fn evaluate_in(model: &Model, items: &[&Item], pool: Option<&rayon::ThreadPool>) -> Result<Evaluation> {
    let k = model.cfg.classes;
    check_items("evaluate", items, k)?;
    let outs = map_items(pool, items, |it| {
        let logits = model.logits(&it.image)?;
        Ok((super::model::cross_entropy(&logits, it.label)?, argmax(logits.data())))
    })?;
    let mut confusion = vec![vec![0; k]; k];
    let mut loss = 0.0;
    for (it, &(l, p)) in items.iter().zip(&outs) {
        confusion[it.label][p] += 1;
        loss += l;
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    Ok(Evaluation {
        accuracy: correct as f64 / items.len() as f64,
        loss: loss / items.len() as f64,
        confusion,
        predictions: outs.into_iter().map(|(_, p)| p).collect(),
    })
}

/// Accuracy, mean loss, and confusion matrix over `items`.
pub fn evaluate(model: &Model, items: &[&Item]) -> Result<Evaluation> {
    evaluate_in(model, items, None)
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub sgd: SgdState,
    pub state: TrainState,
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let pool = Self::pool(cfg.threads)?;
        Ok(Self {
            sgd: SgdState::new(&model.params),
            state: TrainState::new(&cfg),
            cfg,
            model,
            pool,
        })
    }

    fn pool(threads: usize) -> Result<Option<Arc<rayon::ThreadPool>>> {
        if threads <= 1 {
            return Ok(None);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map(|p| Some(Arc::new(p)))
            .map_err(|e| Error::Config(format!("thread pool: {e}")))
    }

    pub fn set_threads(&mut self, threads: usize) -> Result<()> {
        if threads == 0 {
            return Err(Error::Config("thread count must be ≥ 1".into()));
        }
        self.cfg.threads = threads;
        self.pool = Self::pool(threads)?;
        Ok(())
    }

    pub fn evaluate(&self, items: &[&Item]) -> Result<Evaluation> {
        evaluate_in(&self.model, items, self.pool.as_deref())
    }

    /// One optimiser step on `batch`; returns the per-sample results.
    ///
    /// Gradients are averaged over the batch, summing in sample order.
    pub fn step(&mut self, batch: &[&Item]) -> Result<Vec<SampleGrad>> {
        check_items("train", batch, self.model.cfg.classes)?;
        let model = &self.model;
        let samples = map_items(self.pool.as_deref(), batch, |it| model.sample_grad(&it.image, it.label))?;
        let mut total: Vec<Tensor<f64>> = samples[0].grads.clone();
        for s in &samples[1..] {
            for (t, g) in total.iter_mut().zip(&s.grads) {
                t.add_assign(g)?;
            }
        }
        let inv = 1.0 / batch.len() as f64;
        for t in &mut total {
            t.data_mut().iter_mut().for_each(|v| *v *= inv);
        }
        sgd_step(
            &mut self.model.params,
            &total,
            &mut self.sgd,
            &self.cfg.sgd(self.state.lr),
        )?;
        Ok(samples)
    }

    /// One pass over `train` in a freshly shuffled order.
    pub fn epoch(&mut self, train: &[&Item], val: &[&Item]) -> Result<EpochRecord> {
        check_items("train", train, self.model.cfg.classes)?;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.state.rng);
        let lr = self.state.lr;
        let (mut loss, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<&Item> = chunk.iter().map(|&i| train[i]).collect();
            for (s, it) in self.step(&batch)?.iter().zip(&batch) {
                loss += s.loss;
                correct += (s.predicted == it.label) as usize;
            }
        }
        let n = train.len() as f64;
        let (train_loss, train_acc) = (loss / n, correct as f64 / n);
        let (val_loss, val_acc) = if val.is_empty() {
            (None, None)
        } else {
            let e = self.evaluate(val)?;
            (Some(e.loss), Some(e.accuracy))
        };
        self.state.epoch += 1;
        self.state.observe(1.0 - val_acc.unwrap_or(train_acc), &self.cfg);
        Ok(EpochRecord {
            epoch: self.state.epoch,
            train_loss,
            train_acc,
            val_loss,
            val_acc,
            lr,
        })
    }

    /// Trains on the train split until `cfg.epochs` epochs are complete,
    /// validating on the val split. `on_epoch` sees each record as it lands.
    pub fn fit(&mut self, ds: &Dataset, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<Vec<EpochRecord>> {
        let train = ds.subset(Split::Train);
        let val = ds.subset(Split::Val);
        check_items("train", &train, self.model.cfg.classes)?;
        let mut history = Vec::new();
        while self.state.epoch < self.cfg.epochs {
            let rec = self.epoch(&train, &val)?;
            on_epoch(&rec);
            history.push(rec);
        }
        Ok(history)
    }
}

/// Trains `model` in place and returns the per-epoch history.
pub fn train(model: &mut Model, ds: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochRecord>> {
    let placeholder = Model::new(model.cfg.clone(), cfg.seed)?;
    let mut t = Trainer::new(std::mem::replace(model, placeholder), cfg.clone())?;
    let out = t.fit(ds, |_| {});
    *model = t.model;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::texdata::{generate, Jitter, Pattern, SyntheticSpec};
    use crate::trainer::model::{Ablation, ModelConfig};

    fn tiny_data() -> Dataset {
        generate(&SyntheticSpec {
            classes: vec![Pattern::Checkerboard, Pattern::Stripes, Pattern::Dots],
            per_class: 2,
            size: 16,
            seed: 1,
            cell: 4,
            jitter: Jitter::NONE,
        })
        .unwrap()
    }

    fn tiny_model() -> Model {
        Model::new(ModelConfig::gradcheck_small(), 5).unwrap()
    }

    #[test]
    fn single_example_descends() {
        let ds = tiny_data();
        let one = [&ds.items[0]];
        let mut model = tiny_model();
        let before = model.sample_grad(&one[0].image, one[0].label).unwrap().loss;
        let single = Dataset {
            classes: ds.classes.clone(),
            items: vec![ds.items[0].clone()],
        };
        let cfg = TrainConfig {
            lr: 1e-3,
            epochs: 1,
            ..TrainConfig::default()
        };
        train(&mut model, &single, &cfg).unwrap();
        let after = model.sample_grad(&one[0].image, one[0].label).unwrap().loss;
        assert!(after < before, "{after} ≥ {before}");
    }

    #[test]
    fn zero_epochs_changes_nothing() {
        let ds = tiny_data();
        let mut model = tiny_model();
        let before = model.params.clone();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(train(&mut model, &ds, &cfg).unwrap().is_empty());
        assert!(model.params.iter().zip(before.iter()).all(|(a, b)| a.value == b.value));
    }

    #[test]
    fn deterministic_across_runs_and_threads() {
        let ds = tiny_data();
        let run = |threads| {
            let mut cfg = ModelConfig::gradcheck_small();
            cfg.set_ablation(Ablation::Full);
            let mut t = Trainer::new(
                Model::new(cfg, 9).unwrap(),
                TrainConfig {
                    epochs: 2,
                    batch_size: 4,
                    threads,
                    ..TrainConfig::default()
                },
            )
            .unwrap();
            let h = t.fit(&ds, |_| {}).unwrap();
            (
                history_csv(&h),
                t.model.params.iter().map(|p| p.value.clone()).collect::<Vec<_>>(),
            )
        };
        let a = run(1);
        assert_eq!(a, run(1));
        assert_eq!(a, run(3));
    }

    #[test]
    fn plateau_drops_rate() {
        let cfg = TrainConfig {
            patience: 2,
            ..TrainConfig::default()
        };
        let mut st = TrainState::new(&cfg);
        assert!(!st.observe(0.5, &cfg));
        assert!(!st.observe(0.49995, &cfg));
        assert!(st.observe(0.5, &cfg));
        assert_eq!(st.lr, 0.0004);
    }

    #[test]
    fn evaluation_accounting() {
        let ds = tiny_data();
        let mut model = tiny_model();
        let items: Vec<&Item> = ds.items.iter().collect();
        let e = evaluate(&model, &items).unwrap();
        for (c, row) in e.confusion.iter().enumerate() {
            assert_eq!(
                row.iter().sum::<usize>(),
                ds.items.iter().filter(|it| it.label == c).count()
            );
        }
        let trace: usize = (0..3).map(|c| e.confusion[c][c]).sum();
        assert_eq!(e.accuracy, trace as f64 / 6.0);
        // loop oracle
        let mut loss = 0.0;
        for (it, &p) in items.iter().zip(&e.predictions) {
            let l = model.logits(&it.image).unwrap();
            assert_eq!(argmax(l.data()), p);
            loss += super::super::model::cross_entropy(&l, it.label).unwrap();
        }
        assert_eq!(e.loss, loss / 6.0);

        // always class 0: zero weights and a winning bias
        let (w, b) = (model.classifier().weight, model.classifier().bias.unwrap());
        model
            .params
            .get_mut(w)
            .value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        model.params.get_mut(b).value = Tensor::new(&[3], vec![1.0, 0.0, 0.0]).unwrap();
        let two: Vec<&Item> = ds.items.iter().filter(|it| it.label < 2).collect();
        assert_eq!(evaluate(&model, &two).unwrap().accuracy, 0.5);
        assert!(evaluate(&model, &[]).is_err());
    }

    #[test]
    fn config_checks_and_csv() {
        assert!(TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            momentum: 1.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            weight_decay: -1.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        let r = EpochRecord {
            epoch: 1,
            train_loss: 0.5,
            train_acc: 0.25,
            val_loss: None,
            val_acc: Some(1.0),
            lr: 0.004,
        };
        assert_eq!(history_csv(&[r]), format!("{HISTORY_HEADER}\n1,0.5,0.25,,1,0.004\n"));
    }
}
