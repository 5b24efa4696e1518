//! An eager tape for reverse-mode differentiation of scalar losses.
//!
//! Forward calls record one node per operation; [`Tape::backward`] walks
//! the recording in reverse, accumulating adjoints. Values are dense
//! `f64` matrices with batch rows. The op set is the minimum the losses in
//! this crate need — there is no broadcasting beyond the bias add, and no
//! graph reuse: build a fresh tape per loss evaluation.

use std::collections::BTreeMap;

use ndarray::{concatenate, s, Array2, Axis};

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(String),
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    Relu(usize),
    Tanh(usize),
    Exp(usize),
    TanhSqCorr(usize),
    Clamp(usize, f64, f64),
    SumAll(usize),
    MeanAll(usize),
    SumRows(usize),
    Concat(usize, usize),
    Slice(usize, usize, usize),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// ln(1 + e^z) without overflow on either tail.
pub(crate) fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// ln(1 − tanh²(u)), computed as 2(ln 2 − u − softplus(−2u)) so it stays
/// finite where 1 − tanh²(u) underflows. Exactly zero at u = 0.
pub(crate) fn tanh_sq_corr(u: f64) -> f64 {
    if u == 0.0 {
        0.0
    } else {
        2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant leaf. Its adjoint is available after backward,
    /// but no parameter gradient flows from it.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Input)
    }

    /// Records a leaf bound to `name` in `store`, copying the current value.
    /// Binding the same parameter twice is allowed; backward sums both uses.
    pub fn param(&mut self, store: &super::store::ParamStore, name: &str) -> Result<Var> {
        let value = store.get(name)?.clone();
        Ok(self.push(value, Op::Param(name.to_string())))
    }

    /// The value computed at `v`.
    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// (rows, cols) of `v`.
    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ca != rb {
            return Err(Error::Shape(format!(
                "matmul of {ra}×{ca} by {rb}×{cb} is undefined"
            )));
        }
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        Ok(self.push(value, Op::MatMul(a.0, b.0)))
    }

    /// Adds a 1×m bias row to every row of an n×m matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cx) = self.shape(x);
        let (rb, cb) = self.shape(bias);
        if rb != 1 || cb != cx {
            return Err(Error::Shape(format!(
                "bias must be 1×{cx}, got {rb}×{cb}"
            )));
        }
        let value = &self.nodes[x.0].value + &self.nodes[bias.0].value;
        Ok(self.push(value, Op::AddBias(x.0, bias.0)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        Ok(self.push(value, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        Ok(self.push(value, Op::Sub(a.0, b.0)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        Ok(self.push(value, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.nodes[x.0].value.mapv(|v| c * v);
        self.push(value, Op::Scale(x.0, c))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let value = self.nodes[x.0].value.mapv(|v| v + c);
        self.push(value, Op::AddConst(x.0))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(|v| v.max(0.0));
        self.push(value, Op::Relu(x.0))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(f64::tanh);
        self.push(value, Op::Tanh(x.0))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(f64::exp);
        self.push(value, Op::Exp(x.0))
    }

    /// Elementwise ln(1 − tanh²(x)), the log-density correction of a tanh
    /// squash.
    pub fn tanh_sq_corr(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(tanh_sq_corr);
        self.push(value, Op::TanhSqCorr(x.0))
    }

    /// Clamps into [lo, hi]; the gradient is zero outside the open interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo < hi) {
            return Err(Error::Contract(format!("clamp needs lo < hi, got [{lo}, {hi}]")));
        }
        let value = self.nodes[x.0].value.mapv(|v| v.clamp(lo, hi));
        Ok(self.push(value, Op::Clamp(x.0, lo, hi)))
    }

    /// Sum of every entry, as 1×1.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.nodes[x.0].value.sum());
        self.push(value, Op::SumAll(x.0))
    }

    /// Mean of every entry, as 1×1.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let value = Array2::from_elem((1, 1), v.sum() / v.len() as f64);
        self.push(value, Op::MeanAll(x.0))
    }

    /// Per-row sums: n×m → n×1.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::SumRows(x.0))
    }

    /// Concatenates columns of two matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, _) = self.shape(a);
        let (rb, _) = self.shape(b);
        if ra != rb {
            return Err(Error::Shape(format!(
                "concat needs equal row counts, got {ra} and {rb}"
            )));
        }
        let value = concatenate(
            Axis(1),
            &[self.nodes[a.0].value.view(), self.nodes[b.0].value.view()],
        )
        .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.push(value, Op::Concat(a.0, b.0)))
    }

    /// Column range [start, end).
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (_, cols) = self.shape(x);
        if start >= end || end > cols {
            return Err(Error::Shape(format!(
                "column slice [{start}, {end}) out of range for {cols} columns"
            )));
        }
        let value = self.nodes[x.0].value.slice(s![.., start..end]).to_owned();
        Ok(self.push(value, Op::Slice(x.0, start, end)))
    }

    /// Reverse pass from a 1×1 root. Returns adjoints for every node on
    /// the path and gradients summed per parameter name.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Contract("backward root is not on this tape".into()));
        }
        if self.shape(root) != (1, 1) {
            let (r, c) = self.shape(root);
            return Err(Error::Shape(format!("backward root must be 1×1, got {r}×{c}")));
        }
        let mut adj: Vec<Option<Array2<f64>>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=root.0).rev() {
            let Some(d) = adj[i].clone() else { continue };
            match &self.nodes[i].op {
                Op::Input | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let da = d.dot(&self.nodes[*b].value.t());
                    let db = self.nodes[*a].value.t().dot(&d);
                    acc(&mut adj, *a, da);
                    acc(&mut adj, *b, db);
                }
                Op::AddBias(x, bias) => {
                    let db = d.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut adj, *x, d);
                    acc(&mut adj, *bias, db);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, d.clone());
                    acc(&mut adj, *b, d);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *b, d.mapv(|v| -v));
                    acc(&mut adj, *a, d);
                }
                Op::Mul(a, b) => {
                    let da = &d * &self.nodes[*b].value;
                    let db = &d * &self.nodes[*a].value;
                    acc(&mut adj, *a, da);
                    acc(&mut adj, *b, db);
                }
                Op::Scale(x, c) => acc(&mut adj, *x, d.mapv(|v| c * v)),
                Op::AddConst(x) => acc(&mut adj, *x, d),
                Op::Relu(x) => {
                    let mask = &self.nodes[*x].value;
                    let dx = ndarray::Zip::from(&d)
                        .and(mask)
                        .map_collect(|&g, &v| if v > 0.0 { g } else { 0.0 });
                    acc(&mut adj, *x, dx);
                }
                Op::Tanh(x) => {
                    let y = &self.nodes[i].value;
                    let dx = ndarray::Zip::from(&d)
                        .and(y)
                        .map_collect(|&g, &t| g * (1.0 - t * t));
                    acc(&mut adj, *x, dx);
                }
                Op::Exp(x) => {
                    let dx = &d * &self.nodes[i].value;
                    acc(&mut adj, *x, dx);
                }
                Op::TanhSqCorr(x) => {
                    let dx = ndarray::Zip::from(&d)
                        .and(&self.nodes[*x].value)
                        .map_collect(|&g, &u| g * (-2.0 * u.tanh()));
                    acc(&mut adj, *x, dx);
                }
                Op::Clamp(x, lo, hi) => {
                    let dx = ndarray::Zip::from(&d)
                        .and(&self.nodes[*x].value)
                        .map_collect(|&g, &v| if v > *lo && v < *hi { g } else { 0.0 });
                    acc(&mut adj, *x, dx);
                }
                Op::SumAll(x) => {
                    let g = d[[0, 0]];
                    let dx = Array2::from_elem(self.nodes[*x].value.dim(), g);
                    acc(&mut adj, *x, dx);
                }
                Op::MeanAll(x) => {
                    let n = self.nodes[*x].value.len() as f64;
                    let dx = Array2::from_elem(self.nodes[*x].value.dim(), d[[0, 0]] / n);
                    acc(&mut adj, *x, dx);
                }
                Op::SumRows(x) => {
                    let (r, c) = self.nodes[*x].value.dim();
                    let mut dx = Array2::zeros((r, c));
                    for row in 0..r {
                        let g = d[[row, 0]];
                        dx.row_mut(row).fill(g);
                    }
                    acc(&mut adj, *x, dx);
                }
                Op::Concat(a, b) => {
                    let ca = self.nodes[*a].value.dim().1;
                    let da = d.slice(s![.., ..ca]).to_owned();
                    let db = d.slice(s![.., ca..]).to_owned();
                    acc(&mut adj, *a, da);
                    acc(&mut adj, *b, db);
                }
                Op::Slice(x, start, end) => {
                    let mut dx = Array2::zeros(self.nodes[*x].value.dim());
                    dx.slice_mut(s![.., *start..*end]).assign(&d);
                    acc(&mut adj, *x, dx);
                }
            }
        }

        let mut params: BTreeMap<String, Array2<f64>> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate().take(root.0 + 1) {
            if let (Op::Param(name), Some(g)) = (&node.op, &adj[i]) {
                params
                    .entry(name.clone())
                    .and_modify(|acc| *acc += g)
                    .or_insert_with(|| g.clone());
            }
        }
        Ok(Gradients { adjoints: adj, params })
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if (ra, ca) != (rb, cb) {
            return Err(Error::Shape(format!(
                "{what} needs equal shapes, got {ra}×{ca} and {rb}×{cb}"
            )));
        }
        Ok(())
    }
}

fn acc(adj: &mut [Option<Array2<f64>>], idx: usize, delta: Array2<f64>) {
    match &mut adj[idx] {
        Some(existing) => *existing += &delta,
        slot @ None => *slot = Some(delta),
    }
}

/// Adjoints produced by one backward pass.
pub struct Gradients {
    adjoints: Vec<Option<Array2<f64>>>,
    params: BTreeMap<String, Array2<f64>>,
}

impl Gradients {
    /// Gradient for a parameter name, summed over all of its bindings.
    pub fn param(&self, name: &str) -> Option<&Array2<f64>> {
        self.params.get(name)
    }

    /// All parameter gradients in name order.
    pub fn params(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.params.iter()
    }

    /// Adjoint of an arbitrary node, if any gradient reached it.
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.adjoints.get(v.0).and_then(|a| a.as_ref())
    }

    /// Drops every parameter gradient whose name does not start with
    /// `prefix`, so one backward pass can drive an optimizer that owns
    /// only a subset of the bound parameters.
    pub fn retain_prefix(&mut self, prefix: &str) {
        self.params.retain(|name, _| name.starts_with(prefix));
    }
}
