//! Named finite-difference checks for every differentiable operation, the
//! network modules, and the assembled model.
//!
//! Scalar outputs are formed as `Σ y ⊙ R` with a fixed random `R`, so every
//! output coordinate contributes a distinct weight to the gradient.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig};
use crate::config::nearest_key;
use crate::error::{Error, Result};
use crate::graphmod::{
    bipartite_propagate, dilated_context, dilated_context_var, topn_neighbors, Affinity, ContextGraph,
    ContextGraphConfig, Fusion, MultiStageGraph, MultiStageGraphConfig,
};
use crate::layers::Linear;
use crate::ndtensor::{grad_check, ConvSpec, CustomOp, Graph, PadMode, ParamStore, Tensor, Var, DEFAULT_STEP};
use crate::patchenc::{encode_patch, Codebook, PatchConfig, PatchEncoder};
use crate::trainer::{Model, ModelConfig};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Step for the end-to-end check, near the cube root of machine epsilon.
///
/// Attention projections start out with gradients around 1e-9, where the
/// default step leaves the difference quotient dominated by rounding.
pub const MODEL_STEP: f64 = 1e-5;

/// Largest relative error found by one check, and where.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub max_rel_error: f64,
    /// E.g. `input 1[4]` or `param cag.key.weight[7]`.
    pub worst: String,
}

impl Outcome {
    fn merge(self, other: Outcome) -> Outcome {
        if other.max_rel_error > self.max_rel_error {
            other
        } else {
            self
        }
    }

    fn zero() -> Self {
        Outcome {
            max_rel_error: 0.0,
            worst: "-".into(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: &'static str,
    pub tolerance: f64,
    pub trials: usize,
    pub max_rel_error: f64,
    pub worst: String,
    pub passed: bool,
}

type Runner = fn(&mut ChaCha8Rng, f64) -> Result<Outcome>;

#[derive(Clone, Copy)]
pub struct Check {
    pub name: &'static str,
    pub tolerance: f64,
    pub trials: usize,
    /// Central-difference step.
    pub step: f64,
    run: Runner,
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Values bounded away from zero, for kinked functions.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen() {
            m
        } else {
            -m
        }
    })
}

/// `Σ y ⊙ r`.
fn weigh(g: &mut Graph<f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = g.constant(r.clone());
    let p = g.mul(y, rv)?;
    g.sum_all(p)
}

/// Checks `build` against each of `inputs` in turn, the rest held constant,
/// then against every parameter in `store`.
fn check_all<F>(h: f64, inputs: &[Tensor<f64>], store: &ParamStore<f64>, build: F) -> Result<Outcome>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let mut out = Outcome::zero();
    for i in 0..inputs.len() {
        let r = grad_check(
            |g, x| {
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| if j == i { x } else { g.constant(t.clone()) })
                    .collect();
                build(g, store, &vars)
            },
            &inputs[i],
            h,
        )?;
        out = out.merge(Outcome {
            max_rel_error: r.max_rel_error,
            worst: format!(
                "input {i}[{}] (analytic {:e}, numeric {:e})",
                r.worst,
                r.analytic.data()[r.worst],
                r.numeric.data()[r.worst]
            ),
        });
    }
    for id in store.ids() {
        let p = store.get(id);
        let r = grad_check(
            |g, x| {
                g.bind_param(id, x);
                let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
                build(g, store, &vars)
            },
            &p.value,
            h,
        )?;
        out = out.merge(Outcome {
            max_rel_error: r.max_rel_error,
            worst: format!(
                "param {}[{}] (analytic {:e}, numeric {:e})",
                p.name,
                r.worst,
                r.analytic.data()[r.worst],
                r.numeric.data()[r.worst]
            ),
        });
    }
    Ok(out)
}

fn check_inputs<F>(h: f64, inputs: &[Tensor<f64>], build: F) -> Result<Outcome>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check_all(h, inputs, &ParamStore::new(), |g, _, v| build(g, v))
}

/// `x ↦ x²` with a correct adjoint, exercising the custom-op hook.
struct Square;

/// `x ↦ x²` whose adjoint forgets the factor 2.
struct FaultySquare;

impl CustomOp<f64> for Square {
    fn name(&self) -> &str {
        "square"
    }

    fn forward(&self, inputs: &[&Tensor<f64>]) -> Result<Tensor<f64>> {
        Ok(inputs[0].map(|v| v * v))
    }

    fn backward(&self, inputs: &[&Tensor<f64>], _: &Tensor<f64>, gout: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        Ok(vec![inputs[0].zip_map(gout, "square", |x, g| 2.0 * x * g)?])
    }
}

impl CustomOp<f64> for FaultySquare {
    fn name(&self) -> &str {
        "faulty_square"
    }

    fn forward(&self, inputs: &[&Tensor<f64>]) -> Result<Tensor<f64>> {
        Ok(inputs[0].map(|v| v * v))
    }

    fn backward(&self, inputs: &[&Tensor<f64>], _: &Tensor<f64>, gout: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        Ok(vec![inputs[0].zip_map(gout, "faulty_square", |x, g| x * g)?])
    }
}

fn unary(
    rng: &mut ChaCha8Rng,
    h: f64,
    x: Tensor<f64>,
    f: impl Fn(&mut Graph<f64>, Var) -> Result<Var>,
) -> Result<Outcome> {
    let probe = {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let y = f(&mut g, v)?;
        g.shape(y).to_vec()
    };
    let r = uniform(&probe, rng);
    check_inputs(h, &[x], |g, v| {
        let y = f(g, v[0])?;
        weigh(g, y, &r)
    })
}

fn binary(
    rng: &mut ChaCha8Rng,
    h: f64,
    a: Tensor<f64>,
    b: Tensor<f64>,
    f: impl Fn(&mut Graph<f64>, Var, Var) -> Result<Var>,
) -> Result<Outcome> {
    let probe = {
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let y = f(&mut g, av, bv)?;
        g.shape(y).to_vec()
    };
    let r = uniform(&probe, rng);
    check_inputs(h, &[a, b], |g, v| {
        let y = f(g, v[0], v[1])?;
        weigh(g, y, &r)
    })
}

fn op_checks() -> Vec<(&'static str, Runner)> {
    vec![
        ("matmul", |r, h| {
            let (a, b) = (uniform(&[3, 4], r), uniform(&[4, 2], r));
            binary(r, h, a, b, |g, a, b| g.matmul(a, b))
        }),
        ("transpose", |r, h| {
            let a = uniform(&[3, 4], r);
            unary(r, h, a, |g, a| g.transpose(a))
        }),
        ("reshape", |r, h| {
            let a = uniform(&[2, 6], r);
            unary(r, h, a, |g, a| g.reshape(a, &[3, 4]))
        }),
        ("conv2d", |r, h| {
            let (x, w) = (uniform(&[5, 5, 2], r), uniform(&[3, 3, 2, 3], r));
            let spec = ConvSpec {
                stride: 2,
                pad: 1,
                ..ConvSpec::default()
            };
            binary(r, h, x, w, move |g, x, w| g.conv2d(x, w, spec))
        }),
        ("conv2d_dilated_replicate", |r, h| {
            let (x, w) = (uniform(&[6, 6, 2], r), uniform(&[3, 3, 2, 2], r));
            let spec = ConvSpec {
                stride: 1,
                pad: 2,
                dilation: 2,
                pad_mode: PadMode::Replicate,
            };
            binary(r, h, x, w, move |g, x, w| g.conv2d(x, w, spec))
        }),
        ("add", |r, h| {
            let (a, b) = (uniform(&[3, 4], r), uniform(&[3, 4], r));
            binary(r, h, a, b, |g, a, b| g.add(a, b))
        }),
        ("sub", |r, h| {
            let (a, b) = (uniform(&[3, 4], r), uniform(&[3, 4], r));
            binary(r, h, a, b, |g, a, b| g.sub(a, b))
        }),
        ("mul", |r, h| {
            let (a, b) = (uniform(&[3, 4], r), uniform(&[3, 4], r));
            binary(r, h, a, b, |g, a, b| g.mul(a, b))
        }),
        ("scale", |r, h| {
            let a = uniform(&[3, 4], r);
            unary(r, h, a, |g, a| Ok(g.scale(a, -1.7)))
        }),
        ("exp", |r, h| {
            let a = uniform(&[3, 4], r);
            unary(r, h, a, |g, a| Ok(g.exp(a)))
        }),
        ("relu", |r, h| {
            let a = away_from_zero(&[3, 4], r);
            unary(r, h, a, |g, a| Ok(g.relu(a)))
        }),
        ("sigmoid", |r, h| {
            let a = uniform(&[3, 4], r).map(|v| 4.0 * v);
            unary(r, h, a, |g, a| Ok(g.sigmoid(a)))
        }),
        ("add_along", |r, h| {
            let (x, v) = (uniform(&[2, 3, 4], r), uniform(&[3], r));
            binary(r, h, x, v, |g, x, v| g.add_along(x, v, 1))
        }),
        ("mul_along", |r, h| {
            let (x, v) = (uniform(&[3, 4], r), uniform(&[4], r));
            binary(r, h, x, v, |g, x, v| g.mul_along(x, v, 1))
        }),
        ("softmax", |r, h| {
            let x = uniform(&[3, 5], r).map(|v| 3.0 * v);
            unary(r, h, x, |g, x| g.softmax(x, 1))
        }),
        ("sum", |r, h| {
            let x = uniform(&[2, 3, 4], r);
            unary(r, h, x, |g, x| g.sum(x, &[0, 2]))
        }),
        ("mean", |r, h| {
            let x = uniform(&[2, 3, 4], r);
            unary(r, h, x, |g, x| g.mean(x, &[1]))
        }),
        ("concat", |r, h| {
            let (a, b) = (uniform(&[2, 2, 3], r), uniform(&[2, 2, 1], r));
            binary(r, h, a, b, |g, a, b| g.concat(&[a, b], 2))
        }),
        ("resize_nearest", |r, h| {
            let x = uniform(&[3, 3, 2], r);
            unary(r, h, x, |g, x| g.resize_nearest(x, 5, 4))
        }),
        ("global_avg_pool", |r, h| {
            let x = uniform(&[3, 4, 2], r);
            unary(r, h, x, |g, x| g.global_avg_pool(x))
        }),
        ("pairwise_sq_dist", |r, h| {
            let (a, b) = (uniform(&[4, 3], r), uniform(&[5, 3], r));
            binary(r, h, a, b, |g, a, b| g.pairwise_sq_dist(a, b))
        }),
        ("gather_rows", |r, h| {
            let x = uniform(&[5, 3], r);
            unary(r, h, x, |g, x| g.gather_rows(x, vec![4, 0, 4, 2]))
        }),
        ("residual_aggregate", |r, h| {
            let a = Tensor::uniform(&[6, 3], 0.1, 1.0, r);
            let (v, c) = (uniform(&[6, 2], r), uniform(&[3, 2], r));
            let w = uniform(&[3, 2], r);
            check_inputs(h, &[a, v, c], |g, x| {
                let y = g.residual_aggregate(x[0], x[1], x[2])?;
                weigh(g, y, &w)
            })
        }),
        ("l2_normalize", |r, h| {
            let x = uniform(&[7], r);
            unary(r, h, x, |g, x| Ok(g.l2_normalize(x, 1e-12)))
        }),
        ("cross_entropy", |r, h| {
            let x = uniform(&[5], r).map(|v| 2.0 * v);
            let label = r.gen_range(0..5);
            check_inputs(h, &[x], move |g, x| g.cross_entropy(x[0], label))
        }),
        ("custom", |r, h| {
            let x = uniform(&[3, 4], r);
            unary(r, h, x, |g, x| g.custom(Arc::new(Square), &[x]))
        }),
    ]
}

fn module_checks() -> Vec<(&'static str, Runner)> {
    vec![
        ("dilated_context", |r, h| {
            let f = uniform(&[6, 6, 2], r);
            unary(r, h, f, |g, f| dilated_context_var(g, f, 2, 3))
        }),
        ("context_graph", |r, h| {
            let mut store = ParamStore::new();
            let cg = ContextGraph::new(&mut store, "cag", ContextGraphConfig::for_channels(4), r);
            let (f, w) = (uniform(&[3, 3, 4], r), uniform(&[3, 3, 4], r));
            check_all(h, &[f], &store, |g, s, v| {
                let y = cg.forward(g, s, v[0])?.out;
                weigh(g, y, &w)
            })
        }),
        ("context_graph_gaussian", |r, h| {
            let mut store = ParamStore::new();
            let cfg = ContextGraphConfig {
                affinity: Affinity::Gaussian,
                ..ContextGraphConfig::for_channels(3)
            };
            let cg = ContextGraph::new(&mut store, "cag", cfg, r);
            let (f, w) = (uniform(&[2, 3, 3], r), uniform(&[2, 3, 3], r));
            check_all(h, &[f], &store, |g, s, v| {
                let y = cg.forward(g, s, v[0])?.out;
                weigh(g, y, &w)
            })
        }),
        ("bipartite_propagate", |r, h| {
            let mut store = ParamStore::new();
            let proj = Linear::new(&mut store, "proj", 3, 2, false, r);
            let f0 = uniform(&[3, 3, 2], r);
            let f1 = uniform(&[2, 2, 3], r);
            let fc1 = uniform(&[2, 2, 2], r);
            let adj = topn_neighbors(&dilated_context(&f0, 1, 3)?, &fc1, 2)?;
            let w = uniform(&[3, 3, 2], r);
            check_all(h, &[f1], &store, |g, s, v| {
                let y = bipartite_propagate(g, s, v[0], &adj, &proj)?;
                weigh(g, y, &w)
            })
        }),
        ("multi_stage_graph", |r, h| {
            let mut store = ParamStore::new();
            let cfg = MultiStageGraphConfig {
                source_stage: 0,
                target_stage: 1,
                dilation: 1,
                kernel: 3,
                neighbors: 2,
            };
            let mag = MultiStageGraph::new(&mut store, "mag", cfg, 2, 3, r);
            let (f0, f1, w) = (uniform(&[4, 4, 2], r), uniform(&[2, 2, 3], r), uniform(&[4, 4, 2], r));
            check_all(h, &[f0, f1], &store, |g, s, v| {
                let y = mag.forward(g, s, v[0], v[1])?.out;
                weigh(g, y, &w)
            })
        }),
        ("fusion", |r, h| {
            let mut store = ParamStore::new();
            let fusion = Fusion::new(&mut store, "fuse", 5, 4, r);
            let (a, b, f) = (uniform(&[2, 2, 3], r), uniform(&[4, 4, 2], r), uniform(&[2, 2, 4], r));
            let w = uniform(&[2, 2, 4], r);
            check_all(h, &[a, b, f], &store, |g, s, v| {
                let y = fusion.forward(g, s, &[v[0], v[1]], v[2])?.q;
                weigh(g, y, &w)
            })
        }),
        ("encode_patch", |r, h| {
            let mut store = ParamStore::new();
            let cb = Codebook::new(&mut store, "cb", 3, 4, r);
            store.get_mut(cb.smoothing).value = Tensor::uniform(&[3], 0.5, 1.5, r);
            let (p, w) = (uniform(&[3, 3, 4], r), uniform(&[3, 4], r));
            check_all(h, &[p], &store, |g, s, v| {
                let y = encode_patch(g, s, v[0], &cb)?.hist;
                weigh(g, y, &w)
            })
        }),
        ("aggregate_multiscale", |r, h| {
            let mut store = ParamStore::new();
            let cfg = PatchConfig {
                windows: vec![2, 3],
                weights: vec![0.6, 0.4],
                embed_dim: 3,
                ..PatchConfig::default()
            };
            let enc = PatchEncoder::new(&mut store, "pe", cfg, 3, 2, r)?;
            let (q, w) = (uniform(&[4, 4, 3], r), uniform(&[6], r));
            check_all(h, &[q], &store, |g, s, v| {
                let y = enc.forward(g, s, v[0])?.u;
                weigh(g, y, &w)
            })
        }),
        ("backbone", |r, h| {
            let mut store = ParamStore::new();
            let cfg = BackboneConfig {
                channels: vec![2, 3],
                blocks: 1,
                in_channels: 3,
            };
            let bb = Backbone::new(cfg, &mut store, r)?;
            let (x, w) = (Tensor::uniform(&[4, 4, 3], 0.0, 1.0, r), uniform(&[1, 1, 3], r));
            check_all(h, &[x], &store, |g, s, v| {
                let y = *bb.forward(g, s, v[0])?.last().expect("two stages");
                weigh(g, y, &w)
            })
        }),
    ]
}

/// Cross-entropy of the small model on a random 16×16 image, checked
/// against the image and every parameter.
fn model_check(r: &mut ChaCha8Rng, h: f64) -> Result<Outcome> {
    let model = Model::new(ModelConfig::gradcheck_small(), r.gen())?;
    let image = Tensor::uniform(&[16, 16, 3], 0.0, 1.0, r);
    let label = r.gen_range(0..model.cfg.classes);
    check_all(h, &[image], &model.params, |g, _, v| {
        let t = model.forward(g, v[0])?;
        g.cross_entropy(t.logits, label)
    })
}

fn faulty_check(r: &mut ChaCha8Rng, h: f64) -> Result<Outcome> {
    let x = uniform(&[3, 4], r);
    unary(r, h, x, |g, x| g.custom(Arc::new(FaultySquare), &[x]))
}

pub const FAULTY_CHECK: &str = "faulty_square";

/// All checks in report order; the faulty fixture only when asked for.
pub fn checks(inject_fault: bool) -> Vec<Check> {
    let mut out: Vec<Check> = op_checks()
        .into_iter()
        .map(|(name, run)| Check {
            name,
            tolerance: OP_TOLERANCE,
            trials: 10,
            step: DEFAULT_STEP,
            run,
        })
        .chain(module_checks().into_iter().map(|(name, run)| Check {
            name,
            tolerance: OP_TOLERANCE,
            trials: 3,
            step: DEFAULT_STEP,
            run,
        }))
        .collect();
    out.push(Check {
        name: "model",
        tolerance: MODEL_TOLERANCE,
        trials: 1,
        step: MODEL_STEP,
        run: model_check,
    });
    if inject_fault {
        out.push(Check {
            name: FAULTY_CHECK,
            tolerance: OP_TOLERANCE,
            trials: 1,
            step: DEFAULT_STEP,
            run: faulty_check,
        });
    }
    out
}

impl Check {
    /// Runs every trial from a name-independent seed sequence.
    pub fn run(&self, seed: u64) -> Result<CheckReport> {
        let mut worst = Outcome::zero();
        for t in 0..self.trials {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let o = (self.run)(&mut rng, self.step)?;
            if o.max_rel_error > worst.max_rel_error {
                worst = Outcome {
                    worst: format!("trial {t}, {}", o.worst),
                    ..o
                };
            }
        }
        Ok(CheckReport {
            name: self.name,
            tolerance: self.tolerance,
            trials: self.trials,
            passed: worst.max_rel_error <= self.tolerance,
            max_rel_error: worst.max_rel_error,
            worst: worst.worst,
        })
    }
}

/// Selects checks by exact name; an unknown name suggests the nearest one.
pub fn select(filter: Option<&str>, inject_fault: bool) -> Result<Vec<Check>> {
    let all = checks(inject_fault);
    match filter {
        None => Ok(all),
        Some(name) => {
            let picked: Vec<Check> = all.iter().copied().filter(|c| c.name == name).collect();
            if picked.is_empty() {
                let near = nearest_key(name, all.iter().map(|c| c.name)).unwrap_or("-");
                return Err(Error::Config(format!(
                    "unknown check {name:?} (did you mean {near:?}?)"
                )));
            }
            Ok(picked)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let all = checks(true);
        for (i, c) in all.iter().enumerate() {
            assert!(all[..i].iter().all(|d| d.name != c.name), "{}", c.name);
        }
    }

    #[test]
    fn faulty_fixture_fails_and_names_itself() {
        let r = select(Some(FAULTY_CHECK), true).unwrap()[0].run(0).unwrap();
        assert!(!r.passed);
        assert!(r.max_rel_error > 0.1, "{}", r.max_rel_error);
        assert!(r.worst.starts_with("trial 0, input 0["), "{}", r.worst);
    }

    #[test]
    fn single_op_filter() {
        let picked = select(Some("softmax"), false).unwrap();
        assert_eq!(picked.len(), 1);
        assert!(picked[0].run(1).unwrap().passed);
        let e = select(Some("sofmax"), false).err().unwrap().to_string();
        assert!(e.contains("\"softmax\""), "{e}");
        assert!(select(Some(FAULTY_CHECK), false).is_err());
    }
}
