//! Small parameterised building blocks shared by the model modules.

use rand::Rng;

use crate::error::Result;
use crate::ndtensor::{ConvSpec, Graph, ParamId, ParamStore, Tensor, Var};

/// Zero-mean uniform weights with standard deviation `1/sqrt(fan_in)`.
pub fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<f64> {
    let a = (3.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -a, a, rng)
}

/// Dense map `x·W (+ b)` over the rows of a matrix; a 1×1 convolution when
/// applied to the pixels of a feature map.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f64>,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            fan_in_uniform(&[inputs, outputs], inputs, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[outputs])));
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_along(y, b, 1)
            }
            None => Ok(y),
        }
    }

    /// Applies the map to every pixel of an `H×W×C` feature map.
    pub fn forward_map(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, x: Var) -> Result<Var> {
        let (h, w, c) = g.value(x).hwc("linear")?;
        let flat = g.reshape(x, &[h * w, c])?;
        let y = self.forward(g, store, flat)?;
        g.reshape(y, &[h, w, self.outputs])
    }
}

/// `k×k` convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
}

impl Conv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f64>,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        spec: ConvSpec,
        rng: &mut R,
    ) -> Self {
        let fan_in = k * k * cin;
        let weight = store.add(
            format!("{name}.weight"),
            fan_in_uniform(&[k, k, cin, cout], fan_in, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { weight, bias, spec }
    }

    pub fn forward(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.conv2d(x, w, self.spec)?;
        g.add_along(y, b, 2)
    }
}
