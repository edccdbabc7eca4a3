//! Batched reverse-mode tape over an augmented forward pass.
//!
//! Every node holds, for each of its rows and each sample in the batch, a
//! value together with its exact derivatives with respect to the `jac` input
//! coordinates and the trace of its Hessian over the first `spatial` of
//! them. The whole bundle is stored as one `rows x cols` matrix whose columns
//! are grouped in blocks of `batch` samples:
//!
//! ```text
//! | value | d/du_0 | d/du_1 | ... | d/du_{jac-1} | laplacian |
//! ```
//!
//! A node with `jac == 0` is a plain value node and has no Laplacian block.
//! Affine maps act on all blocks with the same matrix, so a layer of the
//! augmented pass is a single matrix product.
//!
//! The reverse sweep differentiates the augmented quantities themselves, so
//! gradients of e.g. a Laplacian with respect to parameters or to the values
//! feeding a [`Tape::lift`] come out of one backward call. Elementwise
//! functions therefore need derivatives up to third order.

use std::ops::Range;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, CowArray, Ix1, Ix2};

use crate::error::{Error, Result};

/// Column layout shared by every node of a computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub batch: usize,
    pub jac: usize,
    pub spatial: usize,
}

impl Layout {
    pub fn values(batch: usize) -> Self {
        Layout {
            batch,
            jac: 0,
            spatial: 0,
        }
    }

    pub fn augmented(batch: usize, jac: usize, spatial: usize) -> Self {
        assert!(spatial <= jac, "spatial coordinates must be a prefix of the jacobian");
        Layout {
            batch,
            jac,
            spatial,
        }
    }

    pub fn has_lap(&self) -> bool {
        self.jac > 0
    }

    pub fn blocks(&self) -> usize {
        1 + self.jac + usize::from(self.has_lap())
    }

    pub fn cols(&self) -> usize {
        self.batch * self.blocks()
    }

    pub fn value_cols(&self) -> Range<usize> {
        0..self.batch
    }

    pub fn jac_cols(&self, k: usize) -> Range<usize> {
        debug_assert!(k < self.jac);
        let start = self.batch * (1 + k);
        start..start + self.batch
    }

    pub fn lap_cols(&self) -> Range<usize> {
        debug_assert!(self.has_lap());
        let start = self.batch * (1 + self.jac);
        start..start + self.batch
    }
}

/// Scalar field value bundled with its input derivatives at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct AugState {
    pub value: f64,
    /// Derivatives with respect to the spatial inputs followed by time.
    pub jac: Vec<f64>,
    /// Trace of the Hessian over the spatial inputs only.
    pub lap: f64,
}

impl AugState {
    /// Leaf state for input coordinate `index` out of `jac_len`.
    pub fn coordinate(value: f64, index: usize, jac_len: usize) -> Self {
        let mut jac = vec![0.0; jac_len];
        jac[index] = 1.0;
        AugState {
            value,
            jac,
            lap: 0.0,
        }
    }
}

/// Elementwise scalar functions with derivatives up to third order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    /// `max(x, 0)`; every derivative is taken as zero at the kink.
    Relu,
    Identity,
    Square,
    /// Defined for positive arguments only.
    Sqrt,
}

impl Activation {
    /// `[f, f', f'', f''']` at `x`.
    #[inline]
    pub fn derivatives(self, x: f64) -> [f64; 4] {
        match self {
            Activation::Tanh => {
                let s = x.tanh();
                let d1 = 1.0 - s * s;
                let d2 = -2.0 * s * d1;
                let d3 = -2.0 * (d1 * d1 + s * d2);
                [s, d1, d2, d3]
            }
            Activation::Relu => {
                if x > 0.0 {
                    [x, 1.0, 0.0, 0.0]
                } else {
                    [0.0, 0.0, 0.0, 0.0]
                }
            }
            Activation::Identity => [x, 1.0, 0.0, 0.0],
            Activation::Square => [x * x, 2.0 * x, 2.0, 0.0],
            Activation::Sqrt => {
                let r = x.sqrt();
                let d1 = 0.5 / r;
                let d2 = -0.5 * d1 / x;
                let d3 = -1.5 * d2 / x;
                [r, d1, d2, d3]
            }
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        self.derivatives(x)[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LinearId(usize);

impl LinearId {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Linear<'p> {
    weight: CowArray<'p, f64, Ix2>,
    bias: CowArray<'p, f64, Ix1>,
    tracked: bool,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine {
        input: NodeId,
        linear: LinearId,
        skip: Option<(f64, NodeId)>,
    },
    Unary {
        input: NodeId,
        func: Activation,
    },
    Combine {
        a: NodeId,
        b: NodeId,
        wa: f64,
        wb: f64,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Concat {
        parts: Vec<NodeId>,
    },
    Lift {
        input: NodeId,
    },
}

struct Node {
    op: Op,
    layout: Layout,
    data: Array2<f64>,
}

/// Gradient of a weight/bias pair.
#[derive(Debug, Clone)]
pub struct LinearGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Result of a reverse sweep: adjoints of every leaf and of every tracked linear.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: Vec<Option<Array2<f64>>>,
    linears: Vec<Option<LinearGrad>>,
}

impl Gradients {
    /// Adjoint of a leaf node, laid out like the leaf's data.
    pub fn leaf(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.leaves.get(id.0).and_then(Option::as_ref)
    }

    pub fn linear(&self, id: LinearId) -> Option<&LinearGrad> {
        self.linears.get(id.0).and_then(Option::as_ref)
    }
}

/// A single-owner computation record. Parameters are borrowed for `'p`.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node>,
    linears: Vec<Linear<'p>>,
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            linears: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a trainable weight/bias pair; `backward` reports its gradient.
    pub fn param(&mut self, weight: ArrayView2<'p, f64>, bias: ArrayView1<'p, f64>) -> LinearId {
        self.push_linear(weight.into(), bias.into(), true)
    }

    /// Registers borrowed weights that are treated as constants.
    pub fn frozen(&mut self, weight: ArrayView2<'p, f64>, bias: ArrayView1<'p, f64>) -> LinearId {
        self.push_linear(weight.into(), bias.into(), false)
    }

    /// Registers an owned constant affine map.
    pub fn constant(&mut self, weight: Array2<f64>, bias: Array1<f64>) -> LinearId {
        self.push_linear(weight.into(), bias.into(), false)
    }

    fn push_linear(
        &mut self,
        weight: CowArray<'p, f64, Ix2>,
        bias: CowArray<'p, f64, Ix1>,
        tracked: bool,
    ) -> LinearId {
        assert_eq!(weight.nrows(), bias.len(), "bias length must match weight rows");
        self.linears.push(Linear {
            weight,
            bias,
            tracked,
        });
        LinearId(self.linears.len() - 1)
    }

    fn push(&mut self, op: Op, layout: Layout, data: Array2<f64>) -> NodeId {
        debug_assert_eq!(data.ncols(), layout.cols());
        self.nodes.push(Node { op, layout, data });
        NodeId(self.nodes.len() - 1)
    }

    pub fn layout(&self, id: NodeId) -> Layout {
        self.nodes[id.0].layout
    }

    pub fn rows(&self, id: NodeId) -> usize {
        self.nodes[id.0].data.nrows()
    }

    /// Full data block of a node.
    pub fn data(&self, id: NodeId) -> ArrayView2<'_, f64> {
        self.nodes[id.0].data.view()
    }

    pub fn values(&self, id: NodeId) -> ArrayView2<'_, f64> {
        let node = &self.nodes[id.0];
        node.data.slice(s![.., node.layout.value_cols()])
    }

    pub fn jac_block(&self, id: NodeId, k: usize) -> ArrayView2<'_, f64> {
        let node = &self.nodes[id.0];
        node.data.slice(s![.., node.layout.jac_cols(k)])
    }

    pub fn lap_block(&self, id: NodeId) -> ArrayView2<'_, f64> {
        let node = &self.nodes[id.0];
        node.data.slice(s![.., node.layout.lap_cols()])
    }

    /// The augmented state of one row of one sample.
    pub fn aug_state(&self, id: NodeId, row: usize, sample: usize) -> AugState {
        let node = &self.nodes[id.0];
        let l = node.layout;
        let r = node.data.row(row);
        AugState {
            value: r[sample],
            jac: (0..l.jac).map(|k| r[l.jac_cols(k).start + sample]).collect(),
            lap: if l.has_lap() {
                r[l.lap_cols().start + sample]
            } else {
                0.0
            },
        }
    }

    /// A leaf with arbitrary augmented data.
    pub fn leaf(&mut self, layout: Layout, data: Array2<f64>) -> Result<NodeId> {
        if data.ncols() != layout.cols() {
            return Err(Error::dim("leaf columns", layout.cols(), data.ncols()));
        }
        Ok(self.push(Op::Leaf, layout, data))
    }

    /// A value-only leaf; `values` is `rows x batch`.
    pub fn leaf_values(&mut self, values: Array2<f64>) -> NodeId {
        let layout = Layout::values(values.ncols());
        self.push(Op::Leaf, layout, values)
    }

    /// A leaf assembled from per-row augmented states of a single sample.
    pub fn leaf_states(&mut self, states: &[AugState], spatial: usize) -> Result<NodeId> {
        let jac = states.first().map_or(0, |s| s.jac.len());
        let layout = Layout::augmented(1, jac, spatial);
        let mut data = Array2::zeros((states.len(), layout.cols()));
        for (i, st) in states.iter().enumerate() {
            if st.jac.len() != jac {
                return Err(Error::dim("leaf jacobian length", jac, st.jac.len()));
            }
            data[[i, 0]] = st.value;
            for k in 0..jac {
                data[[i, 1 + k]] = st.jac[k];
            }
            if layout.has_lap() {
                data[[i, 1 + jac]] = st.lap;
            }
        }
        self.leaf(layout, data)
    }

    /// Starts a fresh augmented computation from the values of `input`.
    ///
    /// Each of the `rows` inputs becomes an independent coordinate: the
    /// output jacobian is the identity and the Laplacian (over the first
    /// `spatial` rows) is zero. Only the values of `input` carry gradient.
    pub fn lift(&mut self, input: NodeId, spatial: usize) -> Result<NodeId> {
        let src = &self.nodes[input.0];
        let rows = src.data.nrows();
        if spatial > rows {
            return Err(Error::dim("lift spatial coordinates", rows, spatial));
        }
        let batch = src.layout.batch;
        let layout = Layout::augmented(batch, rows, spatial);
        let mut data = Array2::zeros((rows, layout.cols()));
        data.slice_mut(s![.., layout.value_cols()])
            .assign(&src.data.slice(s![.., src.layout.value_cols()]));
        for k in 0..rows {
            data.slice_mut(s![k, layout.jac_cols(k)]).fill(1.0);
        }
        Ok(self.push(Op::Lift { input }, layout, data))
    }

    /// `weight * input + bias (+ skip_weight * skip)`, applied to every block.
    /// The bias only enters the value block.
    pub fn affine(
        &mut self,
        linear: LinearId,
        input: NodeId,
        skip: Option<(f64, NodeId)>,
    ) -> Result<NodeId> {
        let lin = &self.linears[linear.0];
        let src = &self.nodes[input.0];
        if lin.weight.ncols() != src.data.nrows() {
            return Err(Error::dim("affine input rows", lin.weight.ncols(), src.data.nrows()));
        }
        let layout = src.layout;
        let rows = lin.weight.nrows();
        let mut out = Array2::zeros((rows, layout.cols()));
        general_mat_mul(1.0, &lin.weight, &src.data, 0.0, &mut out);
        {
            let mut vals = out.slice_mut(s![.., layout.value_cols()]);
            vals += &lin.bias.view().insert_axis(Axis(1));
        }
        if let Some((w, skip_id)) = skip {
            let sk = &self.nodes[skip_id.0];
            if sk.layout != layout {
                return Err(Error::InvalidArgument("skip input layout differs".into()));
            }
            if sk.data.nrows() != rows {
                return Err(Error::dim("affine skip rows", rows, sk.data.nrows()));
            }
            out.scaled_add(w, &sk.data);
        }
        Ok(self.push(
            Op::Affine {
                input,
                linear,
                skip,
            },
            layout,
            out,
        ))
    }

    /// Elementwise `func` with second-order pushforward of the Laplacian.
    pub fn activate(&mut self, func: Activation, input: NodeId) -> NodeId {
        let src = &self.nodes[input.0];
        let layout = src.layout;
        let (b, m, sp) = (layout.batch, layout.jac, layout.spatial);
        let mut out = Array2::zeros(src.data.raw_dim());
        for (row_in, mut row_out) in src.data.rows().into_iter().zip(out.rows_mut()) {
            for j in 0..b {
                let d = func.derivatives(row_in[j]);
                row_out[j] = d[0];
                if m == 0 {
                    continue;
                }
                let mut sq = 0.0;
                for k in 0..m {
                    let jk = row_in[b * (1 + k) + j];
                    row_out[b * (1 + k) + j] = d[1] * jk;
                    if k < sp {
                        sq += jk * jk;
                    }
                }
                let lap = b * (1 + m) + j;
                row_out[lap] = d[2] * sq + d[1] * row_in[lap];
            }
        }
        self.push(Op::Unary { input, func }, layout, out)
    }

    /// `wa * a + wb * b`.
    pub fn combine(&mut self, a: NodeId, wa: f64, b: NodeId, wb: f64) -> Result<NodeId> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.layout != nb.layout {
            return Err(Error::InvalidArgument("combine layouts differ".into()));
        }
        if na.data.nrows() != nb.data.nrows() {
            return Err(Error::dim("combine rows", na.data.nrows(), nb.data.nrows()));
        }
        let mut out = &na.data * wa;
        out.scaled_add(wb, &nb.data);
        let layout = na.layout;
        Ok(self.push(Op::Combine { a, b, wa, wb }, layout, out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.combine(a, 1.0, b, 1.0)
    }

    /// Elementwise product; `b` may have a single row broadcast over `a`.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.layout != nb.layout {
            return Err(Error::InvalidArgument("mul layouts differ".into()));
        }
        let rows = na.data.nrows();
        if nb.data.nrows() != rows && nb.data.nrows() != 1 {
            return Err(Error::dim("mul rows", rows, nb.data.nrows()));
        }
        let layout = na.layout;
        let (bs, m, sp) = (layout.batch, layout.jac, layout.spatial);
        let mut out = Array2::zeros(na.data.raw_dim());
        for i in 0..rows {
            let ra = na.data.row(i);
            let rb = nb.data.row(if nb.data.nrows() == 1 { 0 } else { i });
            let mut ro = out.row_mut(i);
            for j in 0..bs {
                let (va, vb) = (ra[j], rb[j]);
                ro[j] = va * vb;
                if m == 0 {
                    continue;
                }
                let mut cross = 0.0;
                for k in 0..m {
                    let c = bs * (1 + k) + j;
                    ro[c] = va * rb[c] + vb * ra[c];
                    if k < sp {
                        cross += ra[c] * rb[c];
                    }
                }
                let l = bs * (1 + m) + j;
                ro[l] = va * rb[l] + vb * ra[l] + 2.0 * cross;
            }
        }
        Ok(self.push(Op::Mul { a, b }, layout, out))
    }

    /// Stacks the rows of several nodes with identical layouts.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let layout = self.nodes[first.0].layout;
        if parts.iter().any(|p| self.nodes[p.0].layout != layout) {
            return Err(Error::InvalidArgument("concat layouts differ".into()));
        }
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].data.view()).collect();
        let data = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
            },
            layout,
            data,
        ))
    }

    /// Reverse sweep from a scalar node (one row, one sample), seeding its value.
    pub fn backward_scalar(&self, seed: NodeId) -> Result<Gradients> {
        let node = &self.nodes[seed.0];
        if node.data.nrows() != 1 || node.layout.batch != 1 {
            return Err(Error::NonScalarSeed {
                rows: node.data.nrows(),
                batch: node.layout.batch,
            });
        }
        let mut adj = Array2::zeros(node.data.raw_dim());
        adj[[0, 0]] = 1.0;
        self.backward(vec![(seed, adj)])
    }

    /// Reverse sweep from arbitrary adjoint seeds (shaped like the seeded nodes' data).
    pub fn backward(&self, seeds: Vec<(NodeId, Array2<f64>)>) -> Result<Gradients> {
        let mut adj: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        for (id, a) in seeds {
            let node = self
                .nodes
                .get(id.0)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown node {}", id.0)))?;
            if a.raw_dim() != node.data.raw_dim() {
                return Err(Error::InvalidArgument(format!(
                    "seed shape {:?} does not match node shape {:?}",
                    a.shape(),
                    node.data.shape()
                )));
            }
            accumulate(&mut adj[id.0], a.view(), 1.0);
        }

        let mut grads = Gradients {
            leaves: vec![None; self.nodes.len()],
            linears: vec![None; self.linears.len()],
        };

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => grads.leaves[idx] = Some(g),
                Op::Affine {
                    input,
                    linear,
                    skip,
                } => {
                    let lin = &self.linears[linear.0];
                    let src = &self.nodes[input.0];
                    if lin.tracked {
                        let entry = grads.linears[linear.0].get_or_insert_with(|| LinearGrad {
                            weight: Array2::zeros(lin.weight.raw_dim()),
                            bias: Array1::zeros(lin.bias.len()),
                        });
                        general_mat_mul(1.0, &g, &src.data.t(), 1.0, &mut entry.weight);
                        entry.bias += &g
                            .slice(s![.., node.layout.value_cols()])
                            .sum_axis(Axis(1));
                    }
                    let slot = adj[input.0]
                        .get_or_insert_with(|| Array2::zeros(src.data.raw_dim()));
                    general_mat_mul(1.0, &lin.weight.t(), &g, 1.0, slot);
                    if let Some((w, skip_id)) = skip {
                        accumulate(&mut adj[skip_id.0], g.view(), *w);
                    }
                }
                Op::Unary { input, func } => {
                    let src = &self.nodes[input.0];
                    let gin = unary_backward(*func, node.layout, &src.data, &g);
                    accumulate(&mut adj[input.0], gin.view(), 1.0);
                }
                Op::Combine { a, b, wa, wb } => {
                    accumulate(&mut adj[a.0], g.view(), *wa);
                    accumulate(&mut adj[b.0], g.view(), *wb);
                }
                Op::Mul { a, b } => {
                    let (ga, gb) = mul_backward(
                        node.layout,
                        &self.nodes[a.0].data,
                        &self.nodes[b.0].data,
                        &g,
                    );
                    accumulate(&mut adj[a.0], ga.view(), 1.0);
                    accumulate(&mut adj[b.0], gb.view(), 1.0);
                }
                Op::Concat { parts } => {
                    let mut start = 0;
                    for p in parts {
                        let rows = self.nodes[p.0].data.nrows();
                        accumulate(&mut adj[p.0], g.slice(s![start..start + rows, ..]), 1.0);
                        start += rows;
                    }
                }
                Op::Lift { input } => {
                    let src = &self.nodes[input.0];
                    let slot = adj[input.0]
                        .get_or_insert_with(|| Array2::zeros(src.data.raw_dim()));
                    let mut vals = slot.slice_mut(s![.., src.layout.value_cols()]);
                    vals += &g.slice(s![.., node.layout.value_cols()]);
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: ArrayView2<'_, f64>, w: f64) {
    match slot {
        Some(acc) => acc.scaled_add(w, &g),
        None => *slot = Some(if w == 1.0 { g.to_owned() } else { &g * w }),
    }
}

fn unary_backward(func: Activation, layout: Layout, x: &Array2<f64>, g: &Array2<f64>) -> Array2<f64> {
    let (b, m, sp) = (layout.batch, layout.jac, layout.spatial);
    let mut gin = Array2::zeros(x.raw_dim());
    for ((row_x, row_g), mut row_in) in x.rows().into_iter().zip(g.rows()).zip(gin.rows_mut()) {
        for j in 0..b {
            let d = func.derivatives(row_x[j]);
            let mut gv = row_g[j] * d[1];
            if m > 0 {
                let lap = b * (1 + m) + j;
                let glap = row_g[lap];
                let mut sq = 0.0;
                for k in 0..m {
                    let c = b * (1 + k) + j;
                    let jk = row_x[c];
                    gv += row_g[c] * d[2] * jk;
                    let mut gj = row_g[c] * d[1];
                    if k < sp {
                        sq += jk * jk;
                        gj += 2.0 * glap * d[2] * jk;
                    }
                    row_in[c] = gj;
                }
                gv += glap * (d[3] * sq + d[2] * row_x[lap]);
                row_in[lap] = glap * d[1];
            }
            row_in[j] = gv;
        }
    }
    gin
}

fn mul_backward(
    layout: Layout,
    a: &Array2<f64>,
    b: &Array2<f64>,
    g: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let (bs, m, sp) = (layout.batch, layout.jac, layout.spatial);
    let broadcast = b.nrows() == 1 && a.nrows() != 1;
    let mut ga = Array2::zeros(a.raw_dim());
    let mut gb = Array2::zeros(b.raw_dim());
    for i in 0..a.nrows() {
        let bi = if broadcast { 0 } else { i };
        let (ra, rb, rg) = (a.row(i), b.row(bi), g.row(i));
        for j in 0..bs {
            let (va, vb, gv) = (ra[j], rb[j], rg[j]);
            let mut dva = gv * vb;
            let mut dvb = gv * va;
            if m > 0 {
                let l = bs * (1 + m) + j;
                let gl = rg[l];
                dva += gl * rb[l];
                dvb += gl * ra[l];
                for k in 0..m {
                    let c = bs * (1 + k) + j;
                    let gj = rg[c];
                    dva += gj * rb[c];
                    dvb += gj * ra[c];
                    let mut dja = gj * vb;
                    let mut djb = gj * va;
                    if k < sp {
                        dja += 2.0 * gl * rb[c];
                        djb += 2.0 * gl * ra[c];
                    }
                    ga[[i, c]] += dja;
                    gb[[bi, c]] += djb;
                }
                ga[[i, l]] += gl * vb;
                gb[[bi, l]] += gl * va;
            }
            ga[[i, j]] += dva;
            gb[[bi, j]] += dvb;
        }
    }
    (ga, gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn scalar(tape: &mut Tape<'_>, v: f64) -> NodeId {
        tape.leaf_values(array![[v]])
    }

    #[test]
    fn product_rule() {
        let mut tape = Tape::new();
        let a = scalar(&mut tape, 2.0);
        let b = scalar(&mut tape, 3.0);
        let y = tape.mul(a, b).unwrap();
        let g = tape.backward_scalar(y).unwrap();
        assert_eq!(g.leaf(a).unwrap()[[0, 0]], 3.0);
        assert_eq!(g.leaf(b).unwrap()[[0, 0]], 2.0);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let a = scalar(&mut tape, 5.0);
        let y = tape.add(a, a).unwrap();
        let g = tape.backward_scalar(y).unwrap();
        assert_eq!(g.leaf(a).unwrap()[[0, 0]], 2.0);
    }

    #[test]
    fn non_scalar_seed_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf_values(array![[1.0, 2.0]]);
        assert!(matches!(
            tape.backward_scalar(a),
            Err(Error::NonScalarSeed { rows: 1, batch: 2 })
        ));
    }

    #[test]
    fn affine_identity_is_exact() {
        let mut tape = Tape::new();
        let x = tape
            .leaf_states(
                &[
                    AugState {
                        value: 0.3,
                        jac: vec![1.0, 0.2, -0.5],
                        lap: 0.7,
                    },
                    AugState {
                        value: -1.1,
                        jac: vec![0.0, 1.0, 0.4],
                        lap: -0.2,
                    },
                ],
                2,
            )
            .unwrap();
        let id = tape.constant(Array2::eye(2), Array1::zeros(2));
        let y = tape.affine(id, x, None).unwrap();
        assert_eq!(tape.data(x), tape.data(y));
    }

    #[test]
    fn affine_one_dimensional() {
        let mut tape = Tape::new();
        let x = tape
            .leaf_states(&[AugState::coordinate(1.0, 0, 2)], 1)
            .unwrap();
        let lin = tape.constant(array![[2.0]], array![3.0]);
        let y = tape.affine(lin, x, None).unwrap();
        let st = tape.aug_state(y, 0, 0);
        assert_eq!(st.value, 5.0);
        assert_eq!(st.jac, vec![2.0, 0.0]);
        assert_eq!(st.lap, 0.0);
    }

    #[test]
    fn affine_of_constant_input_has_no_derivatives() {
        let mut tape = Tape::new();
        let layout = Layout::augmented(3, 2, 1);
        let mut data = Array2::zeros((2, layout.cols()));
        data.slice_mut(s![.., layout.value_cols()])
            .assign(&array![[1.0, 2.0, 3.0], [-1.0, 0.5, 4.0]]);
        let x = tape.leaf(layout, data).unwrap();
        let lin = tape.constant(array![[1.5, -2.0], [0.3, 0.7], [9.0, 1.0]], array![1.0, 2.0, 3.0]);
        let y = tape.affine(lin, x, None).unwrap();
        let d = tape.data(y);
        assert!(d.slice(s![.., 3..]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf_values(array![[1.0], [2.0]]);
        let lin = tape.constant(Array2::eye(3), Array1::zeros(3));
        assert!(matches!(tape.affine(lin, x, None), Err(Error::Dimension { .. })));
    }

    #[test]
    fn activation_examples() {
        let mut tape = Tape::new();
        let x0 = tape.leaf_states(&[AugState::coordinate(0.0, 0, 2)], 1).unwrap();
        let y0 = tape.activate(Activation::Tanh, x0);
        assert_eq!(
            tape.aug_state(y0, 0, 0),
            AugState {
                value: 0.0,
                jac: vec![1.0, 0.0],
                lap: 0.0
            }
        );

        let xr = tape
            .leaf_states(
                &[AugState {
                    value: -1.0,
                    jac: vec![0.3, -2.0],
                    lap: 5.0,
                }],
                1,
            )
            .unwrap();
        let yr = tape.activate(Activation::Relu, xr);
        assert_eq!(
            tape.aug_state(yr, 0, 0),
            AugState {
                value: 0.0,
                jac: vec![0.0, 0.0],
                lap: 0.0
            }
        );

        let x1 = tape.leaf_states(&[AugState::coordinate(1.0, 0, 2)], 1).unwrap();
        let y1 = tape.activate(Activation::Tanh, x1);
        let st = tape.aug_state(y1, 0, 0);
        assert!((st.value - 0.761_594_155_955_764_9).abs() < 1e-15);
        assert!((st.jac[0] - 0.419_974_341_614_026_1).abs() < 1e-15);
        assert_eq!(st.jac[1], 0.0);
        // tanh''(1) = -2 tanh(1) (1 - tanh^2(1)) with |jac_0|^2 = 1
        assert!((st.lap + 2.0 * 0.761_594_155_955_764_9 * 0.419_974_341_614_026_1).abs() < 1e-14);
    }

    #[test]
    fn relu_derivative_at_kink_is_zero() {
        assert_eq!(Activation::Relu.derivatives(0.0), [0.0; 4]);
    }

    #[test]
    fn tanh_derivative_identities() {
        for &x in &[-2.0, -0.3, 0.0, 0.7, 1.9] {
            let [s, d1, d2, d3] = Activation::Tanh.derivatives(x);
            let h = 1e-5;
            let fd3 = (Activation::Tanh.derivatives(x + h)[2] - Activation::Tanh.derivatives(x - h)[2])
                / (2.0 * h);
            assert!((d1 - (1.0 - s * s)).abs() < 1e-15);
            assert!((d2 + 2.0 * s * d1).abs() < 1e-15);
            assert!((d3 - fd3).abs() < 1e-8);
        }
    }

    #[test]
    fn lap_gradient_matches_finite_differences() {
        // d lap / d v of tanh at v = 1 with jac = [1, 0], lap = 0.
        let lap_of = |v: f64| {
            let mut tape = Tape::new();
            let x = tape.leaf_states(&[AugState::coordinate(v, 0, 2)], 1).unwrap();
            let y = tape.activate(Activation::Tanh, x);
            (tape.aug_state(y, 0, 0).lap, tape, x, y)
        };
        let (_, tape, x, y) = lap_of(1.0);
        let layout = tape.layout(y);
        let mut seed = Array2::zeros((1, layout.cols()));
        seed[[0, layout.lap_cols().start]] = 1.0;
        let g = tape.backward(vec![(y, seed)]).unwrap();
        let analytic = g.leaf(x).unwrap()[[0, 0]];
        let h = 1e-5;
        let fd = (lap_of(1.0 + h).0 - lap_of(1.0 - h).0) / (2.0 * h);
        assert!(((analytic - fd) / fd).abs() < 1e-6, "{analytic} vs {fd}");
    }

    #[test]
    fn sqrt_derivatives() {
        let x = 2.5_f64;
        let [r, d1, d2, d3] = Activation::Sqrt.derivatives(x);
        assert!((r - x.sqrt()).abs() < 1e-15);
        assert!((d1 - 0.5 * x.powf(-0.5)).abs() < 1e-15);
        assert!((d2 + 0.25 * x.powf(-1.5)).abs() < 1e-15);
        assert!((d3 - 0.375 * x.powf(-2.5)).abs() < 1e-15);
    }

    #[test]
    fn mul_laplacian_of_square() {
        // phi(x) = x0^2 + x1^2 built as x * x then summed: lap = 4 for d = 2.
        let mut tape = Tape::new();
        let x = tape.leaf_values(array![[0.7], [-1.3], [0.25]]);
        let lifted = tape.lift(x, 2).unwrap();
        let sq = tape.mul(lifted, lifted).unwrap();
        let sum = tape.constant(array![[1.0, 1.0, 0.0]], array![0.0]);
        let phi = tape.affine(sum, sq, None).unwrap();
        let st = tape.aug_state(phi, 0, 0);
        assert_eq!(st.lap, 4.0);
        assert_eq!(st.jac, vec![1.4, -2.6, 0.0]);
        let g = tape.backward_scalar(phi).unwrap();
        let gx = g.leaf(x).unwrap();
        assert_eq!(gx.column(0).to_vec(), vec![1.4, -2.6, 0.0]);
    }
}
