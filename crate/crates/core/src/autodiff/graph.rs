use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Floor added inside the logarithm of [`Graph::cross_entropy`].
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    Concat {
        parts: Vec<Var>,
        outer: usize,
    },
    Slice {
        src: Var,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    Gather {
        table: Var,
        row: usize,
    },
    CrossEntropy {
        dist: Var,
        target: usize,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
}

/// Define-by-run computation graph.
///
/// Nodes are appended in evaluation order, which is therefore a valid
/// topological order; [`Graph::backward`] walks it in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn shape_str(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("({})", dims.join("×"))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub(crate) fn input(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Var {
        assert_eq!(numel(&shape), data.len(), "input shape/data mismatch");
        self.push(Op::Input, shape, data, requires_grad)
    }

    /// Records `tensor` as a leaf; it is differentiated iff it requires grad.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.input(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            tensor.requires_grad(),
        )
    }

    pub fn constant(&mut self, data: Vec<f64>) -> Var {
        let n = data.len();
        assert!(n > 0, "empty constant");
        self.input(vec![n], data, false)
    }

    pub fn zeros(&mut self, n: usize) -> Var {
        self.constant(vec![0.0; n])
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn width(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor::new(node.shape.clone(), node.value.clone()).expect("node shape is valid")
    }

    /// Matrix product. A rank-1 left operand is a row vector and a rank-1
    /// right operand a column vector; the corresponding output axis is dropped.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (m, k1, a_row) = match sa.as_slice() {
            [k] => (1, *k, true),
            [m, k] => (*m, *k, false),
            _ => {
                return Err(Error::Dimension(format!(
                    "matmul operand {} is not a matrix",
                    shape_str(&sa)
                )))
            }
        };
        let (k2, n, b_col) = match sb.as_slice() {
            [k] => (*k, 1, true),
            [k, n] => (*k, *n, false),
            _ => {
                return Err(Error::Dimension(format!(
                    "matmul operand {} is not a matrix",
                    shape_str(&sb)
                )))
            }
        };
        if k1 != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions disagree: {} × {}",
                shape_str(&sa),
                shape_str(&sb)
            )));
        }
        let k = k1;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, bb) in row.iter_mut().zip(brow) {
                    *o += x * bb;
                }
            }
        }
        let shape = match (a_row, b_col) {
            (true, true) => vec![1],
            (true, false) => vec![n],
            (false, true) => vec![m],
            (false, false) => vec![m, n],
        };
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::MatMul { a, b, m, k, n }, shape, out, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what}: shapes {} and {} differ",
                shape_str(self.shape(a)),
                shape_str(self.shape(b))
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs(&[a, b]);
        self.push(op, shape, value, rg)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.nodes[a.0].value.iter().map(|x| f(*x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs(&[a]);
        self.push(op, shape, value, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    /// Softmax over all entries, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let value = softmax_values(x);
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs(&[a]);
        self.push(Op::Softmax(a), shape, value, rg)
    }

    /// Concatenates along `axis`; every part must agree on all other axes.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero parts".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Dimension(format!(
                "concat axis {axis} out of range for {}",
                shape_str(&base)
            )));
        }
        let mut along = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::Dimension(format!(
                    "concat along axis {axis}: {} does not match {}",
                    shape_str(s),
                    shape_str(&base)
                )));
            }
            along += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let mut value = Vec::with_capacity(parts.iter().map(|p| self.width(*p)).sum());
        for o in 0..outer {
            for &p in parts {
                let chunk = self.width(p) / outer;
                value.extend_from_slice(&self.nodes[p.0].value[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = along;
        let rg = self.needs(parts);
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
                outer,
            },
            shape,
            value,
            rg,
        ))
    }

    /// Contiguous range `[start, start + len)` of a rank-1 tensor.
    pub fn slice(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(src);
        if s.len() != 1 || len == 0 || start + len > s[0] {
            return Err(Error::Dimension(format!(
                "slice [{start}, {}) of {}",
                start + len,
                shape_str(s)
            )));
        }
        let value = self.nodes[src.0].value[start..start + len].to_vec();
        let rg = self.needs(&[src]);
        Ok(self.push(Op::Slice { src, start }, vec![len], value, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.width(a) || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "cannot reshape {} into {}",
                shape_str(self.shape(a)),
                shape_str(shape)
            )));
        }
        let value = self.nodes[a.0].value.clone();
        let rg = self.needs(&[a]);
        Ok(self.push(Op::Reshape(a), shape.to_vec(), value, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        let rg = self.needs(&[a]);
        self.push(Op::Sum(a), vec![1], vec![s], rg)
    }

    /// Sum of scalar nodes.
    pub fn sum_all(&mut self, terms: &[Var]) -> Result<Var> {
        let joined = self.concat(terms, 0)?;
        Ok(self.sum(joined))
    }

    /// Row `row` of a rank-2 table, as a rank-1 tensor (embedding lookup).
    pub fn gather(&mut self, table: Var, row: usize) -> Result<Var> {
        let (rows, cols) = match self.shape(table) {
            [r, c] => (*r, *c),
            s => {
                return Err(Error::Dimension(format!(
                    "gather needs a matrix, got {}",
                    shape_str(s)
                )))
            }
        };
        if row >= rows {
            return Err(Error::Index {
                index: row,
                size: rows,
            });
        }
        let value = self.nodes[table.0].value[row * cols..(row + 1) * cols].to_vec();
        let rg = self.needs(&[table]);
        Ok(self.push(Op::Gather { table, row }, vec![cols], value, rg))
    }

    /// `-ln(dist[target] + LOG_FLOOR)` as a scalar node.
    pub fn cross_entropy(&mut self, dist: Var, target: usize) -> Result<Var> {
        let size = self.width(dist);
        if target >= size {
            return Err(Error::Index {
                index: target,
                size,
            });
        }
        let p = self.nodes[dist.0].value[target];
        let rg = self.needs(&[dist]);
        Ok(self.push(
            Op::CrossEntropy { dist, target },
            vec![1],
            vec![-(p + LOG_FLOOR).ln()],
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`. Gradients of every node that
    /// requires grad become available through [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.width(loss) != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {}",
                shape_str(self.shape(loss))
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &dy);
            self.grads[i] = Some(dy);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, dy: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        match nodes[i].op.clone() {
            Op::Input => {}
            Op::MatMul { a, b, m, k, n } => {
                if nodes[a.0].requires_grad {
                    let bv = &nodes[b.0].value;
                    let ga = acc(nodes, grads, a).expect("requires grad");
                    for r in 0..m {
                        let dyr = &dy[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            ga[r * k + p] += dyr.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if nodes[b.0].requires_grad {
                    let av = &nodes[a.0].value;
                    let gb = acc(nodes, grads, b).expect("requires grad");
                    for r in 0..m {
                        let dyr = &dy[r * n..(r + 1) * n];
                        for p in 0..k {
                            let x = av[r * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            let row = &mut gb[p * n..(p + 1) * n];
                            for (g, d) in row.iter_mut().zip(dyr) {
                                *g += x * d;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(a, 1.0), (b, 1.0)] {
                    if let Some(g) = acc(nodes, grads, v) {
                        g.iter_mut().zip(dy).for_each(|(g, d)| *g += sign * d);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(a, 1.0), (b, -1.0)] {
                    if let Some(g) = acc(nodes, grads, v) {
                        g.iter_mut().zip(dy).for_each(|(g, d)| *g += sign * d);
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                if let Some(g) = acc(nodes, grads, a) {
                    for ((g, d), y) in g.iter_mut().zip(dy).zip(bv) {
                        *g += d * y;
                    }
                }
                if let Some(g) = acc(nodes, grads, b) {
                    for ((g, d), x) in g.iter_mut().zip(dy).zip(av) {
                        *g += d * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(g) = acc(nodes, grads, a) {
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += c * d);
                }
            }
            Op::Tanh(a) => {
                let y = &nodes[i].value;
                if let Some(g) = acc(nodes, grads, a) {
                    for ((g, d), y) in g.iter_mut().zip(dy).zip(y) {
                        *g += d * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = &nodes[i].value;
                if let Some(g) = acc(nodes, grads, a) {
                    for ((g, d), y) in g.iter_mut().zip(dy).zip(y) {
                        *g += d * y * (1.0 - y);
                    }
                }
            }
            Op::Softmax(a) => {
                let y = &nodes[i].value;
                let dot: f64 = dy.iter().zip(y).map(|(d, y)| d * y).sum();
                if let Some(g) = acc(nodes, grads, a) {
                    for ((g, d), y) in g.iter_mut().zip(dy).zip(y) {
                        *g += y * (d - dot);
                    }
                }
            }
            Op::Concat { parts, outer } => {
                let mut offset = 0;
                let total = dy.len() / outer;
                for p in parts {
                    let chunk = nodes[p.0].value.len() / outer;
                    if let Some(g) = acc(nodes, grads, p) {
                        for o in 0..outer {
                            let src = &dy[o * total + offset..o * total + offset + chunk];
                            g[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(g, d)| *g += d);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Slice { src, start } => {
                if let Some(g) = acc(nodes, grads, src) {
                    g[start..start + dy.len()]
                        .iter_mut()
                        .zip(dy)
                        .for_each(|(g, d)| *g += d);
                }
            }
            Op::Reshape(a) => {
                if let Some(g) = acc(nodes, grads, a) {
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
            }
            Op::Sum(a) => {
                let d = dy[0];
                if let Some(g) = acc(nodes, grads, a) {
                    g.iter_mut().for_each(|g| *g += d);
                }
            }
            Op::Gather { table, row } => {
                let cols = dy.len();
                if let Some(g) = acc(nodes, grads, table) {
                    g[row * cols..(row + 1) * cols]
                        .iter_mut()
                        .zip(dy)
                        .for_each(|(g, d)| *g += d);
                }
            }
            Op::CrossEntropy { dist, target } => {
                let p = nodes[dist.0].value[target];
                if let Some(g) = acc(nodes, grads, dist) {
                    g[target] -= dy[0] / (p + LOG_FLOOR);
                }
            }
        }
    }
}

fn acc<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

/// Numerically stable softmax of a slice.
pub fn softmax_values(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}
