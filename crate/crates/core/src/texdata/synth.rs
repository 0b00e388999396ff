//! Procedural texture classes.
//!
//! Every pattern is a function of rotated, scaled, shifted coordinates
//! `(u, v)`. With all jitter off the transform is the identity, so the
//! closed forms below hold exactly in pixel coordinates.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{Dataset, Item, Split};
use crate::config::{parse_bool, parse_list, parse_value, KvMap};
use crate::error::{Error, Result};
use crate::ndtensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    Checkerboard,
    Stripes,
    Dots,
    Blobs,
    Noise,
    Weave,
}

impl Pattern {
    pub const ALL: [Pattern; 6] = [
        Pattern::Checkerboard,
        Pattern::Stripes,
        Pattern::Dots,
        Pattern::Blobs,
        Pattern::Noise,
        Pattern::Weave,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pattern::Checkerboard => "checkerboard",
            Pattern::Stripes => "stripes",
            Pattern::Dots => "dots",
            Pattern::Blobs => "blobs",
            Pattern::Noise => "noise",
            Pattern::Weave => "weave",
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Pattern::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            let names: Vec<_> = Pattern::ALL.iter().map(|p| p.name()).collect();
            Error::Config(format!("unknown texture class {s:?}; known: {}", names.join(", ")))
        })
    }
}

/// Per-image random variation. Zero everywhere gives the canonical pattern.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    /// Random translation of the pattern.
    pub phase: bool,
    /// Maximum absolute rotation, radians.
    pub rotation: f64,
    /// Relative scale range `1 ± scale`.
    pub scale: f64,
    /// Additive brightness range `± brightness`.
    pub brightness: f64,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    /// Per-primitive placement offset as a fraction of the period.
    pub placement: f64,
}

impl Jitter {
    pub const NONE: Jitter = Jitter {
        phase: false,
        rotation: 0.0,
        scale: 0.0,
        brightness: 0.0,
        noise: 0.0,
        placement: 0.0,
    };
}

impl Default for Jitter {
    fn default() -> Self {
        Self {
            phase: true,
            rotation: PI,
            scale: 0.15,
            brightness: 0.1,
            noise: 0.03,
            placement: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: Vec<Pattern>,
    pub per_class: usize,
    /// Square image side in pixels.
    pub size: usize,
    pub seed: u64,
    /// Base primitive size in pixels.
    pub cell: usize,
    pub jitter: Jitter,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: vec![Pattern::Checkerboard, Pattern::Stripes, Pattern::Dots, Pattern::Blobs],
            per_class: 100,
            size: 64,
            seed: 7,
            cell: 8,
            jitter: Jitter::default(),
        }
    }
}

pub const DATA_KEYS: &[&str] = &[
    "data.classes",
    "data.per_class",
    "data.size",
    "data.seed",
    "data.cell",
    "jitter.phase",
    "jitter.rotation",
    "jitter.scale",
    "jitter.brightness",
    "jitter.noise",
    "jitter.placement",
];

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Config("at least two texture classes are required".into()));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if self.classes[..i].contains(c) {
                return Err(Error::Config(format!("texture class {c} listed twice")));
            }
        }
        if self.per_class < 2 {
            return Err(Error::Config(format!(
                "images per class must be ≥ 2, got {}",
                self.per_class
            )));
        }
        if self.size == 0 || self.cell == 0 {
            return Err(Error::Config("image size and cell size must be positive".into()));
        }
        let j = &self.jitter;
        if [j.rotation, j.scale, j.brightness, j.noise, j.placement]
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0)
            || j.scale >= 1.0
        {
            return Err(Error::Config(format!("invalid jitter {j:?}")));
        }
        Ok(())
    }

    pub fn to_kv(&self, map: &mut KvMap) {
        let names: Vec<_> = self.classes.iter().map(|p| p.name()).collect();
        let j = &self.jitter;
        for (k, v) in [
            ("data.classes", names.join(",")),
            ("data.per_class", self.per_class.to_string()),
            ("data.size", self.size.to_string()),
            ("data.seed", self.seed.to_string()),
            ("data.cell", self.cell.to_string()),
            ("jitter.phase", j.phase.to_string()),
            ("jitter.rotation", j.rotation.to_string()),
            ("jitter.scale", j.scale.to_string()),
            ("jitter.brightness", j.brightness.to_string()),
            ("jitter.noise", j.noise.to_string()),
            ("jitter.placement", j.placement.to_string()),
        ] {
            map.insert(k.into(), v);
        }
    }

    /// Applies one key; `Ok(false)` when the key is not a data key.
    pub fn apply(&mut self, key: &str, v: &str) -> Result<bool> {
        let j = &mut self.jitter;
        match key {
            "data.classes" => self.classes = parse_list(key, v)?,
            "data.per_class" => self.per_class = parse_value(key, v)?,
            "data.size" => self.size = parse_value(key, v)?,
            "data.seed" => self.seed = parse_value(key, v)?,
            "data.cell" => self.cell = parse_value(key, v)?,
            "jitter.phase" => j.phase = parse_bool(key, v)?,
            "jitter.rotation" => j.rotation = parse_value(key, v)?,
            "jitter.scale" => j.scale = parse_value(key, v)?,
            "jitter.brightness" => j.brightness = parse_value(key, v)?,
            "jitter.noise" => j.noise = parse_value(key, v)?,
            "jitter.placement" => j.placement = parse_value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Integer lattice hash to `[0, 1)`.
fn hash01(key: u64, i: i64, j: i64) -> f64 {
    let mut z = key ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (j as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

struct Placement {
    key: u64,
    amount: f64,
}

impl Placement {
    /// Jittered primitive centre for lattice cell `(i, j)` of period `p`.
    fn centre(&self, i: i64, j: i64, p: f64) -> (f64, f64) {
        let off = |salt: i64| (hash01(self.key, i.wrapping_mul(2).wrapping_add(salt), j) - 0.5) * 2.0 * self.amount;
        ((i as f64 + 0.5 + off(0)) * p, (j as f64 + 0.5 + off(1)) * p)
    }
}

fn value_at(pattern: Pattern, u: f64, v: f64, cell: f64, place: &Placement) -> f64 {
    match pattern {
        Pattern::Checkerboard => ((u / cell).floor() + (v / cell).floor()).rem_euclid(2.0),
        Pattern::Stripes => 0.5 + 0.5 * (PI * u / cell).sin(),
        Pattern::Dots => {
            let p = 2.0 * cell;
            let (i, j) = ((u / p).floor() as i64, (v / p).floor() as i64);
            let mut best = f64::INFINITY;
            for di in -1..=1 {
                for dj in -1..=1 {
                    let (cu, cv) = place.centre(i + di, j + dj, p);
                    best = best.min(((u - cu).powi(2) + (v - cv).powi(2)).sqrt());
                }
            }
            (0.3 * p - best + 0.5).clamp(0.0, 1.0)
        }
        Pattern::Blobs => {
            let p = 3.0 * cell;
            let (i, j) = ((u / p).floor() as i64, (v / p).floor() as i64);
            let mut acc = 0.0;
            for di in -1..=1 {
                for dj in -1..=1 {
                    let (ci, cj) = (i + di, j + dj);
                    let cu = (ci as f64 + hash01(place.key ^ 1, ci, cj)) * p;
                    let cv = (cj as f64 + hash01(place.key ^ 2, ci, cj)) * p;
                    let sigma = (0.15 + 0.2 * hash01(place.key ^ 3, ci, cj)) * p;
                    acc += (-((u - cu).powi(2) + (v - cv).powi(2)) / (2.0 * sigma * sigma)).exp();
                }
            }
            acc.min(1.0)
        }
        Pattern::Noise => {
            let s = (cell / 2.0).max(1.0);
            let (x, y) = (u / s, v / s);
            let (i, j) = (x.floor(), y.floor());
            let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
            let (tx, ty) = (smooth(x - i), smooth(y - j));
            let (i, j) = (i as i64, j as i64);
            let h = |a, b| hash01(place.key ^ 4, a, b);
            let top = h(i, j) * (1.0 - tx) + h(i + 1, j) * tx;
            let bottom = h(i, j + 1) * (1.0 - tx) + h(i + 1, j + 1) * tx;
            top * (1.0 - ty) + bottom * ty
        }
        Pattern::Weave => {
            let block = 2.0 * cell;
            let parity = ((u / block).floor() + (v / block).floor()).rem_euclid(2.0);
            let along = if parity == 0.0 { v } else { u };
            0.5 + 0.5 * (4.0 * PI * along / cell).cos()
        }
    }
}

fn symmetric<R: Rng>(rng: &mut R, r: f64) -> f64 {
    if r > 0.0 {
        rng.gen_range(-r..=r)
    } else {
        0.0
    }
}

/// Renders image `index` of `pattern`; grey values replicated over RGB.
pub fn render(pattern: Pattern, spec: &SyntheticSpec, index: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let j = &spec.jitter;
    let cell = spec.cell as f64;
    let theta = symmetric(&mut rng, j.rotation);
    let scale = 1.0 + symmetric(&mut rng, j.scale);
    let (pu, pv) = if j.phase {
        (rng.gen_range(0.0..4.0 * cell), rng.gen_range(0.0..4.0 * cell))
    } else {
        (0.0, 0.0)
    };
    let bright = symmetric(&mut rng, j.brightness);
    let place = Placement {
        key: rng.gen(),
        amount: j.placement,
    };
    let noise = (j.noise > 0.0).then(|| Normal::new(0.0, j.noise).expect("validated sigma"));
    let (cos, sin) = (theta.cos(), theta.sin());
    let n = spec.size;
    let mut data = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        for x in 0..n {
            let (xf, yf) = (x as f64, y as f64);
            let u = (xf * cos + yf * sin) / scale + pu;
            let v = (yf * cos - xf * sin) / scale + pv;
            let mut val = value_at(pattern, u, v, cell, &place) + bright;
            if let Some(d) = &noise {
                val += d.sample(&mut rng);
            }
            let val = val.clamp(0.0, 1.0);
            data.extend([val; 3]);
        }
    }
    Tensor::new(&[n, n, 3], data).expect("positive extents")
}

/// Balanced dataset: `per_class` images of each class, all tagged train.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let jobs: Vec<(usize, usize)> = (0..spec.classes.len())
        .flat_map(|c| (0..spec.per_class).map(move |i| (c, i)))
        .collect();
    let items = jobs
        .par_iter()
        .map(|&(label, i)| {
            let pattern = spec.classes[label];
            Item {
                image: render(pattern, spec, (label * spec.per_class + i) as u64),
                label,
                id: format!("{}/{i:04}", pattern.name()),
                split: Split::Train,
            }
        })
        .collect();
    Ok(Dataset {
        classes: spec.classes.iter().map(|p| p.name().to_string()).collect(),
        items,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::join;

    fn spec(classes: Vec<Pattern>, per_class: usize, jitter: Jitter) -> SyntheticSpec {
        SyntheticSpec {
            classes,
            per_class,
            size: 32,
            seed: 3,
            cell: 8,
            jitter,
        }
    }

    #[test]
    fn zero_jitter_checkerboard_is_parity() {
        let s = spec(vec![Pattern::Checkerboard, Pattern::Stripes], 2, Jitter::NONE);
        let img = render(Pattern::Checkerboard, &s, 0);
        for y in 0..32 {
            for x in 0..32 {
                let want = ((x / 8 + y / 8) % 2) as f64;
                for c in 0..3 {
                    assert_eq!(img.at(&[y, x, c]), want, "({x},{y})");
                }
            }
        }
    }

    #[test]
    fn balanced_deterministic_and_bounded() {
        let s = spec(Pattern::ALL.to_vec(), 3, Jitter::default());
        let a = generate(&s).unwrap();
        assert_eq!(a.items.len(), 18);
        for l in 0..6 {
            assert_eq!(a.items.iter().filter(|it| it.label == l).count(), 3);
        }
        assert!(a
            .items
            .iter()
            .all(|it| it.image.data().iter().all(|v| (0.0..=1.0).contains(v))));
        assert_eq!(a, generate(&s).unwrap());
        let other = generate(&SyntheticSpec { seed: 4, ..s }).unwrap();
        assert_ne!(a.items[0].image, other.items[0].image);
    }

    #[test]
    fn unknown_class_and_kv_round_trip() {
        assert!(matches!("plaid".parse::<Pattern>(), Err(Error::Config(_))));
        let s = SyntheticSpec::default();
        let mut kv = KvMap::new();
        s.to_kv(&mut kv);
        assert_eq!(kv.len(), DATA_KEYS.len());
        let mut t = SyntheticSpec {
            per_class: 2,
            jitter: Jitter::NONE,
            ..SyntheticSpec::default()
        };
        for (k, v) in &kv {
            assert!(t.apply(k, v).unwrap());
        }
        assert_eq!(s, t);
        assert_eq!(join(&[1, 2]), "1,2");
    }

    #[test]
    fn rejects_degenerate_specs() {
        assert!(spec(vec![Pattern::Dots], 2, Jitter::NONE).validate().is_err());
        assert!(spec(vec![Pattern::Dots, Pattern::Dots], 2, Jitter::NONE)
            .validate()
            .is_err());
        assert!(spec(vec![Pattern::Dots, Pattern::Noise], 1, Jitter::NONE)
            .validate()
            .is_err());
    }
}
