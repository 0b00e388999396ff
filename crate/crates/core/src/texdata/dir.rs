//! On-disk layout: `root/<class>/<image>.ppm`, with optional
//! `manifest.tsv` (`class<TAB>dirname`, fixing label order) and
//! `split.tsv` (`relative/path.ppm<TAB>train|val|test`).

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::ppm::{read_ppm, write_ppm};
use super::{Dataset, Item, Split};
use crate::error::{Error, Result};
use crate::ndtensor::{resize_nearest, Tensor};

pub const MANIFEST: &str = "manifest.tsv";
pub const SPLITS: &str = "split.tsv";

pub struct LoadReport {
    pub dataset: Dataset,
    /// Files skipped in non-strict mode, with the reason.
    pub skipped: Vec<Error>,
    /// Whether `split.tsv` tagged the items.
    pub has_splits: bool,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn tsv_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.split_once('\t')
                .map(|(a, b)| (a.trim().to_string(), b.trim().to_string()))
                .ok_or_else(|| Error::File {
                    path: path.to_path_buf(),
                    msg: format!("line {}: expected two tab-separated fields", n + 1),
                })
        })
        .collect()
}

/// `(class name, directory)` in label order.
fn class_dirs(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    let manifest = root.join(MANIFEST);
    if manifest.is_file() {
        return Ok(tsv_pairs(&manifest)?
            .into_iter()
            .map(|(class, dir)| (class, root.join(dir)))
            .collect());
    }
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().is_dir() {
            dirs.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    dirs.sort();
    Ok(dirs.into_iter().map(|d| (d.clone(), root.join(d))).collect())
}

fn center_crop(img: &Tensor<f64>, side: usize) -> Result<Tensor<f64>> {
    let (h, w, c) = img.hwc("center_crop")?;
    let (y0, x0) = ((h - side) / 2, (w - side) / 2);
    Ok(Tensor::from_fn(&[side, side, c], |i| {
        let (y, rest) = (i / (side * c), i % (side * c));
        let (x, ch) = (rest / c, rest % c);
        img.at(&[y0 + y, x0 + x, ch])
    }))
}

/// Centre-crops `img` to a square and resizes it (nearest) to `size×size`.
pub fn square_resize(img: &Tensor<f64>, size: usize) -> Result<Tensor<f64>> {
    let (h, w, _) = img.hwc("square_resize")?;
    let side = h.min(w);
    let sq = if h == w { img.clone() } else { center_crop(img, side)? };
    if side == size {
        Ok(sq)
    } else {
        resize_nearest(&sq, size, size)
    }
}

/// Loads a class-per-directory PPM dataset.
///
/// Labels follow `manifest.tsv` when present, otherwise lexicographic
/// directory order. Images of differing sizes are centre-cropped to the
/// smallest side over the whole dataset, then resized (nearest) to
/// `input_size`. A malformed file is an error in strict mode and is skipped
/// and reported otherwise.
pub fn load_dir(root: &Path, input_size: usize, strict: bool) -> Result<LoadReport> {
    if input_size == 0 {
        return Err(Error::Config("input size must be positive".into()));
    }
    let classes = class_dirs(root)?;
    if classes.is_empty() {
        return Err(Error::Dataset(format!("{}: no class directories", root.display())));
    }
    let mut files = Vec::new();
    for (label, (name, dir)) in classes.iter().enumerate() {
        let mut found: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
            .collect();
        if found.is_empty() {
            return Err(Error::Dataset(format!(
                "class {name:?} ({}) has no .ppm images",
                dir.display()
            )));
        }
        found.sort();
        files.extend(found.into_iter().map(|p| (label, p)));
    }
    let decoded: Vec<_> = files.par_iter().map(|(_, p)| read_ppm(p)).collect();

    let mut skipped = Vec::new();
    let mut raw = Vec::new();
    for ((label, path), img) in files.into_iter().zip(decoded) {
        match img {
            Ok(img) => raw.push((label, path, img)),
            Err(e) if strict => return Err(e),
            Err(e) => skipped.push(e),
        }
    }
    for (label, (name, _)) in classes.iter().enumerate() {
        if !raw.iter().any(|(l, _, _)| *l == label) {
            return Err(Error::Dataset(format!("class {name:?} has no readable images")));
        }
    }
    let side = raw
        .iter()
        .map(|(_, _, img)| img.shape()[0].min(img.shape()[1]))
        .min()
        .expect("non-empty");

    let splits: HashMap<String, Split> = if root.join(SPLITS).is_file() {
        tsv_pairs(&root.join(SPLITS))?
            .into_iter()
            .map(|(p, s)| Ok((p, s.parse()?)))
            .collect::<Result<_>>()?
    } else {
        HashMap::new()
    };
    let has_splits = !splits.is_empty();

    let mut items = Vec::with_capacity(raw.len());
    for (label, path, img) in raw {
        let img = if img.shape()[0] == side && img.shape()[1] == side {
            img
        } else {
            center_crop(&img, side)?
        };
        let img = if side == input_size {
            img
        } else {
            resize_nearest(&img, input_size, input_size)?
        };
        let rel = path.strip_prefix(root).unwrap_or(&path);
        let rel_str = rel.to_string_lossy().replace('\\', "/");
        let split = match splits.get(&rel_str) {
            Some(&s) => s,
            None if has_splits => {
                return Err(Error::Dataset(format!("{rel_str} is missing from {SPLITS}")));
            }
            None => Split::Train,
        };
        items.push(Item {
            image: img,
            label,
            id: rel_str.trim_end_matches(".ppm").to_string(),
            split,
        });
    }
    Ok(LoadReport {
        dataset: Dataset {
            classes: classes.into_iter().map(|(n, _)| n).collect(),
            items,
        },
        skipped,
        has_splits,
    })
}

/// Writes images, `manifest.tsv`, `split.tsv`, and optionally `spec.txt`.
pub fn write_dir(ds: &Dataset, root: &Path, spec_text: Option<&str>) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut manifest = String::new();
    for name in &ds.classes {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        manifest.push_str(&format!("{name}\t{name}\n"));
    }
    let mut splits = String::new();
    for it in &ds.items {
        let rel = format!("{}.ppm", it.id);
        write_ppm(&root.join(&rel), &it.image)?;
        splits.push_str(&format!("{rel}\t{}\n", it.split));
    }
    let write = |name: &str, text: &str| {
        let p = root.join(name);
        fs::write(&p, text).map_err(|e| Error::io(p, e))
    };
    write(MANIFEST, &manifest)?;
    write(SPLITS, &splits)?;
    if let Some(spec) = spec_text {
        write("spec.txt", spec)?;
    }
    Ok(())
}
