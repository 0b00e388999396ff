//! Texture datasets: procedural generation, stratified splits, PPM folders.

mod dir;
mod ppm;
mod synth;

pub use dir::{load_dir, square_resize, write_dir, LoadReport};
pub use ppm::{decode_ppm, encode_ppm, read_ppm, write_ppm};
pub use synth::{generate, render, Jitter, Pattern, SyntheticSpec, DATA_KEYS};

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ndtensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Dataset(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    /// `H×W×3`, values in `[0, 1]`.
    pub image: Tensor<f64>,
    pub label: usize,
    /// Path relative to the dataset root, without extension.
    pub id: String,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    /// Class names indexed by label.
    pub classes: Vec<String>,
    pub items: Vec<Item>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn subset(&self, split: Split) -> Vec<&Item> {
        self.items.iter().filter(|it| it.split == split).collect()
    }

    pub fn counts(&self, split: Split) -> Vec<usize> {
        let mut c = vec![0; self.classes.len()];
        for it in self.items.iter().filter(|it| it.split == split) {
            c[it.label] += 1;
        }
        c
    }

    /// Checks that labels are dense in `[0, classes)` and images are `H×W×3`.
    pub fn validate(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::Dataset("no items".into()));
        }
        let mut seen = vec![false; self.classes.len()];
        for it in &self.items {
            if it.label >= self.classes.len() {
                return Err(Error::Dataset(format!(
                    "{}: label {} outside 0..{}",
                    it.id,
                    it.label,
                    self.classes.len()
                )));
            }
            seen[it.label] = true;
            let s = it.image.shape();
            if s.len() != 3 || s[2] != 3 {
                return Err(Error::Dataset(format!("{}: expected an H×W×3 image, got {s:?}", it.id)));
            }
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(Error::Dataset(format!("class {:?} has no items", self.classes[c])));
        }
        Ok(())
    }
}

/// Tags every item train/val/test, stratified by class.
///
/// Each class is shuffled with the seeded RNG; items are then ordered by
/// their relative rank within the class (ties broken by label), and the
/// ordered list is cut at `round(f_train·N)` and `round((f_train+f_val)·N)`.
/// Totals are therefore exact up to rounding and every class receives its
/// share within one item.
pub fn split(ds: &mut Dataset, fractions: [f64; 3], seed: u64) -> Result<()> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be in [0,1] and sum to 1"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes.len()];
    for (i, it) in ds.items.iter().enumerate() {
        let row = by_class
            .get_mut(it.label)
            .ok_or_else(|| Error::Dataset(format!("{}: label {} outside class list", it.id, it.label)))?;
        row.push(i);
    }
    // (rank numerator, class size, label, item index)
    let mut order = Vec::with_capacity(ds.items.len());
    for (label, members) in by_class.iter_mut().enumerate() {
        members.shuffle(&mut rng);
        let n = members.len();
        for (r, &i) in members.iter().enumerate() {
            order.push((2 * r + 1, n, label, i));
        }
    }
    order.sort_by(|a, b| (a.0 * b.1).cmp(&(b.0 * a.1)).then(a.2.cmp(&b.2)));
    let n = order.len() as f64;
    let cut1 = (fractions[0] * n).round() as usize;
    let cut2 = (((fractions[0] + fractions[1]) * n).round() as usize).max(cut1);
    for (pos, &(_, _, _, i)) in order.iter().enumerate() {
        ds.items[i].split = if pos < cut1 {
            Split::Train
        } else if pos < cut2 {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(per_class: &[usize]) -> Dataset {
        let mut items = Vec::new();
        for (label, &n) in per_class.iter().enumerate() {
            for i in 0..n {
                items.push(Item {
                    image: Tensor::zeros(&[1, 1, 3]),
                    label,
                    id: format!("c{label}/{i}"),
                    split: Split::Train,
                });
            }
        }
        Dataset {
            classes: (0..per_class.len()).map(|c| format!("c{c}")).collect(),
            items,
        }
    }

    #[test]
    fn hundred_items_split_exactly() {
        let mut ds = toy(&[25; 4]);
        split(&mut ds, [0.8, 0.1, 0.1], 7).unwrap();
        let totals: Vec<usize> = Split::ALL.iter().map(|&s| ds.subset(s).len()).collect();
        assert_eq!(totals, vec![80, 10, 10]);
        for (s, f) in Split::ALL.iter().zip([0.8, 0.1, 0.1]) {
            for c in ds.counts(*s) {
                assert!((c as f64 - 25.0 * f).abs() <= 1.0, "{s}: {c}");
            }
        }
    }

    #[test]
    fn all_train_and_determinism() {
        let mut a = toy(&[3, 5]);
        split(&mut a, [1.0, 0.0, 0.0], 1).unwrap();
        assert!(a.items.iter().all(|it| it.split == Split::Train));
        let (mut b, mut c) = (toy(&[10, 10]), toy(&[10, 10]));
        split(&mut b, [0.5, 0.25, 0.25], 9).unwrap();
        split(&mut c, [0.5, 0.25, 0.25], 9).unwrap();
        assert_eq!(b, c);
    }

    #[test]
    fn bad_fractions() {
        assert!(matches!(
            split(&mut toy(&[2, 2]), [0.5, 0.5, 0.5], 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn validate_catches_missing_class() {
        let mut ds = toy(&[2, 2]);
        ds.classes.push("empty".into());
        assert!(ds.validate().is_err());
    }
}
