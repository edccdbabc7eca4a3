//! The value network and the generator, with their boundary-condition wrappers.
//!
//! Both players share one residual body:
//!
//! ```text
//! h1 = act(W1 [x; t] + b1)
//! hk = h(k-1) + skip * act(Wk h(k-1) + bk)      k = 2..=hidden_layers
//! N  = Wout h_last + bout
//! ```
//!
//! The value function is `phi = (1 - s) N(x, t) + s g(x)` and the generator is
//! `G = (1 - s) z + s N(z, t)`, with `s = t / T`. Time is fed to the body as
//! an ordinary extra input row.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Activation, Gradients, LinearId, NodeId, Tape};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Value,
    Generator,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResNetConfig {
    /// Spatial dimension plus one for time.
    pub input_dim: usize,
    pub width: usize,
    pub hidden_layers: usize,
    pub skip_weight: f64,
    pub activation: Activation,
    pub output_dim: usize,
}

impl ResNetConfig {
    /// Tanh body with a scalar output.
    pub fn value(dim: usize) -> Self {
        ResNetConfig {
            input_dim: dim + 1,
            width: 100,
            hidden_layers: 3,
            skip_weight: 0.5,
            activation: Activation::Tanh,
            output_dim: 1,
        }
    }

    /// ReLU body mapping `(z, t)` to a point.
    pub fn generator(dim: usize) -> Self {
        ResNetConfig {
            input_dim: dim + 1,
            width: 100,
            hidden_layers: 3,
            skip_weight: 0.5,
            activation: Activation::Relu,
            output_dim: dim,
        }
    }

    pub fn with_width(mut self, width: usize, hidden_layers: usize) -> Self {
        self.width = width;
        self.hidden_layers = hidden_layers;
        self
    }

    /// `(rows, cols)` of each weight matrix, input layer first.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = vec![(self.width, self.input_dim)];
        for _ in 1..self.hidden_layers {
            shapes.push((self.width, self.width));
        }
        shapes.push((self.output_dim, self.width));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(r, c)| r * c + r).sum()
    }
}

/// Weights and biases stored contiguously, layer by layer (weight row-major, then bias).
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub config: ResNetConfig,
    pub role: Role,
    flat: Vec<f64>,
}

/// Uniform weights on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, zero biases.
pub fn init_params(config: &ResNetConfig, role: Role, seed: u64) -> NetworkParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flat = Vec::with_capacity(config.param_count());
    for (rows, cols) in config.layer_shapes() {
        let bound = (1.0 / cols as f64).sqrt();
        flat.extend((0..rows * cols).map(|_| rng.random_range(-bound..=bound)));
        flat.extend(std::iter::repeat_n(0.0, rows));
    }
    NetworkParams {
        config: config.clone(),
        role,
        flat,
    }
}

impl NetworkParams {
    pub fn from_flat(config: ResNetConfig, role: Role, flat: Vec<f64>) -> Result<Self> {
        if flat.len() != config.param_count() {
            return Err(Error::dim("parameter count", config.param_count(), flat.len()));
        }
        Ok(NetworkParams { config, role, flat })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.flat
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    fn offsets(&self) -> Vec<(usize, usize, usize)> {
        let mut off = 0;
        self.config
            .layer_shapes()
            .into_iter()
            .map(|(r, c)| {
                let o = off;
                off += r * c + r;
                (o, r, c)
            })
            .collect()
    }

    /// Views of `(weight, bias)` for every layer.
    pub fn layers(&self) -> Vec<(ArrayView2<'_, f64>, ArrayView1<'_, f64>)> {
        self.offsets()
            .into_iter()
            .map(|(o, r, c)| {
                let w = ArrayView2::from_shape((r, c), &self.flat[o..o + r * c]).expect("layer shape");
                let b = ArrayView1::from(&self.flat[o + r * c..o + r * c + r]);
                (w, b)
            })
            .collect()
    }

    /// Registers every layer on `tape`, as trainable or frozen.
    pub fn register<'p>(&'p self, tape: &mut Tape<'p>, tracked: bool) -> Vec<LinearId> {
        self.layers()
            .into_iter()
            .map(|(w, b)| if tracked { tape.param(w, b) } else { tape.frozen(w, b) })
            .collect()
    }

    /// Records the residual body on `tape` and returns its output node.
    pub fn body(&self, tape: &mut Tape<'_>, linears: &[LinearId], input: NodeId) -> Result<NodeId> {
        let act = self.config.activation;
        let (first, rest) = linears.split_first().expect("at least one layer");
        let (last, hidden) = rest.split_last().expect("an output layer");
        let pre = tape.affine(*first, input, None)?;
        let mut h = tape.activate(act, pre);
        for lin in hidden {
            let pre = tape.affine(*lin, h, None)?;
            let a = tape.activate(act, pre);
            h = tape.combine(h, 1.0, a, self.config.skip_weight)?;
        }
        tape.affine(*last, h, None)
    }

    /// Flattens tape gradients for the linears returned by [`Self::register`].
    pub fn flat_gradient(&self, grads: &Gradients, linears: &[LinearId]) -> Vec<f64> {
        let mut out = vec![0.0; self.flat.len()];
        for ((o, r, c), lin) in self.offsets().into_iter().zip(linears) {
            if let Some(g) = grads.linear(*lin) {
                for (dst, src) in out[o..o + r * c].iter_mut().zip(g.weight.iter()) {
                    *dst = *src;
                }
                out[o + r * c..o + r * c + r].copy_from_slice(g.bias.as_slice().expect("contiguous bias"));
            }
        }
        out
    }
}

/// A scalar field of the spatial coordinates that can be recorded on a tape.
pub trait TerminalField {
    /// `x` holds `dim` spatial rows followed by a time row; returns a one-row node.
    fn record(&self, tape: &mut Tape<'_>, x: NodeId, dim: usize) -> Result<NodeId>;
}

/// The interior part of the value function.
#[derive(Debug, Clone, PartialEq)]
pub enum ValueModel {
    Network(NetworkParams),
    /// `N(x, t) = alpha |x|^2 / 2`; reproduces the closed-form quadratic solution.
    ClosedForm { alpha: f64 },
}

impl ValueModel {
    pub fn params(&self) -> Option<&NetworkParams> {
        match self {
            ValueModel::Network(p) => Some(p),
            ValueModel::ClosedForm { .. } => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut NetworkParams> {
        match self {
            ValueModel::Network(p) => Some(p),
            ValueModel::ClosedForm { .. } => None,
        }
    }
}

/// Nodes recorded by [`value_eval`].
pub struct ValueEval {
    pub phi: NodeId,
    pub interior: NodeId,
    pub linears: Vec<LinearId>,
}

fn time_weights(tape: &mut Tape<'_>, x: NodeId, dim: usize, horizon: f64) -> Result<(NodeId, NodeId)> {
    let mut sel = Array2::zeros((1, dim + 1));
    sel[[0, dim]] = 1.0 / horizon;
    let s = tape.constant(sel.clone(), Array1::zeros(1));
    let one_minus = tape.constant(-sel, Array1::ones(1));
    Ok((tape.affine(s, x, None)?, tape.affine(one_minus, x, None)?))
}

/// `phi(x, t) = (1 - t/T) N(x, t) + (t/T) g(x)` on a node of `dim + 1` rows.
///
/// `x` may be a lifted leaf or the lift of generator outputs; its layout
/// decides whether derivatives are propagated.
pub fn value_eval<'p>(
    model: &'p ValueModel,
    terminal: &dyn TerminalField,
    horizon: f64,
    tape: &mut Tape<'p>,
    x: NodeId,
    tracked: bool,
) -> Result<ValueEval> {
    let rows = tape.rows(x);
    let dim = rows - 1;
    let (linears, interior) = match model {
        ValueModel::Network(params) => {
            if params.config.input_dim != rows {
                return Err(Error::dim("value network input", params.config.input_dim, rows));
            }
            let linears = params.register(tape, tracked);
            let n = params.body(tape, &linears, x)?;
            (linears, n)
        }
        ValueModel::ClosedForm { alpha } => {
            let sq = tape.mul(x, x)?;
            let mut w = Array2::from_elem((1, rows), 0.5 * alpha);
            w[[0, dim]] = 0.0;
            let lin = tape.constant(w, Array1::zeros(1));
            (Vec::new(), tape.affine(lin, sq, None)?)
        }
    };
    let g = terminal.record(tape, x, dim)?;
    let (s, one_minus) = time_weights(tape, x, dim, horizon)?;
    let a = tape.mul(one_minus, interior)?;
    let b = tape.mul(s, g)?;
    let phi = tape.add(a, b)?;
    Ok(ValueEval {
        phi,
        interior,
        linears,
    })
}

/// Nodes recorded by [`generator_eval`].
pub struct GeneratorEval {
    /// `dim` rows: the generated points.
    pub points: NodeId,
    pub linears: Vec<LinearId>,
}

/// `G(z, t) = (1 - t/T) z + (t/T) N(z, t)` on a value node of `dim + 1` rows.
pub fn generator_eval<'p>(
    params: &'p NetworkParams,
    horizon: f64,
    tape: &mut Tape<'p>,
    zt: NodeId,
    tracked: bool,
) -> Result<GeneratorEval> {
    let rows = tape.rows(zt);
    if params.config.input_dim != rows {
        return Err(Error::dim("generator input", params.config.input_dim, rows));
    }
    let dim = rows - 1;
    let linears = params.register(tape, tracked);
    let n = params.body(tape, &linears, zt)?;
    let mut select = Array2::zeros((dim, rows));
    for i in 0..dim {
        select[[i, i]] = 1.0;
    }
    let sel = tape.constant(select, Array1::zeros(dim));
    let z = tape.affine(sel, zt, None)?;
    let (s, one_minus) = time_weights(tape, zt, dim, horizon)?;
    let a = tape.mul(z, one_minus)?;
    let b = tape.mul(n, s)?;
    let points = tape.add(a, b)?;
    Ok(GeneratorEval { points, linears })
}

/// Stacks spatial points (`dim x B`) and times (`B`) into a `dim + 1` row matrix.
pub fn stack_time(points: ArrayView2<'_, f64>, times: ArrayView1<'_, f64>) -> Array2<f64> {
    let (dim, b) = points.dim();
    let mut out = Array2::zeros((dim + 1, b));
    out.slice_mut(ndarray::s![..dim, ..]).assign(&points);
    out.row_mut(dim).assign(&times);
    out
}

/// Generator outputs without recording anything for differentiation.
pub fn generate(
    params: &NetworkParams,
    horizon: f64,
    z: ArrayView2<'_, f64>,
    t: ArrayView1<'_, f64>,
) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let zt = tape.leaf_values(stack_time(z, t));
    let out = generator_eval(params, horizon, &mut tape, zt, false)?;
    Ok(tape.values(out.points).to_owned())
}
