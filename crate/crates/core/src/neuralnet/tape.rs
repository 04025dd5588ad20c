// Reverse-mode differentiation over dense matrices.
//
// Every operation appends a node holding its forward value. `backward` walks
// the nodes in reverse insertion order, which is a valid topological order
// because a node can only reference nodes created before it.

use ndarray::{s, Array2, Axis};

use super::Matrix;
use crate::error::{Error, Result};
use crate::linalg;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    MatMul(NodeId, NodeId),
    /// a · bᵀ
    MatMulBt(NodeId, NodeId),
    /// aᵀ · b
    MatMulAt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// r×c plus a 1×c row broadcast over rows
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    ClampMin(NodeId, f64),
    Sum(NodeId),
    MeanRows(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize),
    /// A⁻¹ B for symmetric positive definite A; keeps the Cholesky factor.
    Solve(NodeId, NodeId, Array2<f64>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
}

/// Gradients for every registered parameter, in registration order.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub names: Vec<String>,
    pub grads: Vec<Matrix>,
}

impl Gradients {
    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so the global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            let f = max_norm / norm;
            for g in &mut self.grads {
                g.mapv_inplace(|v| v * f);
            }
        }
        norm
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.names.iter().position(|n| n == name).map(|i| &self.grads[i])
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Constant)
    }

    pub fn scalar_constant(&mut self, v: f64) -> NodeId {
        self.constant(Array2::from_elem((1, 1), v))
    }

    /// Registers a learnable leaf. Its gradient is reported by `backward`.
    pub fn param(&mut self, name: impl Into<String>, value: &Matrix) -> NodeId {
        let id = self.push(value.clone(), Op::Param);
        self.params.push((name.into(), id));
        id
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    fn dims(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.dim()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulBt(a, b))
    }

    pub fn matmul_at(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).t().dot(self.value(b));
        self.push(v, Op::MatMulAt(a, b))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) {
        assert_eq!(self.dims(a), self.dims(b), "{what}: shape mismatch");
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b, "add");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b, "sub");
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b, "mul");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b, "div");
        let v = self.value(a) / self.value(b);
        self.push(v, Op::Div(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (_, c) = self.dims(a);
        assert_eq!(self.dims(row), (1, c), "add_row: bias must be 1x{c}");
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, f: f64) -> NodeId {
        let v = self.value(a) * f;
        self.push(v, Op::Scale(a, f))
    }

    pub fn offset(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) + c;
        self.push(v, Op::Offset(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(super::sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Elementwise `max(a, floor)`; the gradient is zero where the floor binds.
    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(floor));
        self.push(v, Op::ClampMin(a, floor))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column means: r×c → 1×c.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let v = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean_rows of empty matrix")
            .insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    /// `A⁻¹ B` for symmetric positive definite `A`.
    pub fn solve(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let l = linalg::cholesky(self.value(a).view())?;
        let v = linalg::cholesky_solve(&l, self.value(b).view());
        Ok(self.push(v, Op::Solve(a, b, l)))
    }

    /// Reverse pass from a 1×1 loss node. Returns gradients for every
    /// registered parameter (zeros when the loss does not depend on it).
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.dims(loss) != (1, 1) {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got {:?}",
                self.dims(loss)
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let val = &node.value;
            match &node.op {
                Op::Constant => {}
                Op::Param => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulBt(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulAt(a, b) => {
                    let ga = self.value(*b).dot(&g.t());
                    let gb = self.value(*a).dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    let ga = &g / bv;
                    let gb = -(&g * val) / bv;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::Scale(a, f) => acc(&mut grads, *a, g * *f),
                Op::Offset(a) => acc(&mut grads, *a, g),
                Op::Sigmoid(a) => {
                    let d = val.mapv(|y| y * (1.0 - y));
                    acc(&mut grads, *a, g * d);
                }
                Op::Tanh(a) => {
                    let d = val.mapv(|y| 1.0 - y * y);
                    acc(&mut grads, *a, g * d);
                }
                Op::Log(a) => {
                    let ga = g / self.value(*a);
                    acc(&mut grads, *a, ga);
                }
                Op::Sqrt(a) => {
                    let ga = g / &val.mapv(|y| 2.0 * y);
                    acc(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let ga = g * &self.value(*a).mapv(|x| 2.0 * x);
                    acc(&mut grads, *a, ga);
                }
                Op::ClampMin(a, floor) => {
                    let mut ga = g;
                    ndarray::Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|gv, &x| {
                            if x < *floor {
                                *gv = 0.0;
                            }
                        });
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(self.dims(*a), g[[0, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::MeanRows(a) => {
                    let (r, c) = self.dims(*a);
                    let row = g.row(0).mapv(|v| v / r as f64);
                    let ga = row.broadcast((r, c)).expect("broadcast").to_owned();
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.dims(*p).1;
                        acc(&mut grads, *p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.dims(*a));
                    let w = g.ncols();
                    ga.slice_mut(s![.., *start..*start + w]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::Solve(a, b, l) => {
                    // C = A⁻¹B  ⇒  dB = A⁻ᵀ G,  dA = −dB Cᵀ
                    let gb = linalg::cholesky_solve(l, g.view());
                    let ga = -gb.dot(&val.t());
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
            }
        }

        let mut names = Vec::with_capacity(self.params.len());
        let mut out = Vec::with_capacity(self.params.len());
        for (name, id) in &self.params {
            names.push(name.clone());
            out.push(
                grads[id.0]
                    .clone()
                    .unwrap_or_else(|| Array2::zeros(self.dims(*id))),
            );
        }
        Ok(Gradients { names, grads: out })
    }
}

fn acc(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut grads[id.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd_check(build: impl Fn(&mut Tape, NodeId) -> NodeId, x0: Matrix) {
        let mut tape = Tape::new();
        let x = tape.param("x", &x0);
        let loss = build(&mut tape, x);
        let g = tape.backward(loss).unwrap();
        let h = 1e-6;
        for idx in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                *xp.iter_mut().nth(idx).unwrap() += delta;
                let mut t = Tape::new();
                let x = t.param("x", &xp);
                let l = build(&mut t, x);
                t.scalar(l)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = *g.grads[0].iter().nth(idx).unwrap();
            let err = (fd - an).abs() / (fd.abs().max(an.abs()).max(1e-8));
            assert!(err < 1e-5, "idx {idx}: fd {fd} vs analytic {an}");
        }
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut tape = Tape::new();
        let p = tape.param("p", &array![[1.0, 2.0]]);
        let c = tape.scalar_constant(3.0);
        let g = tape.backward(c).unwrap();
        assert_eq!(g.grads[0], Array2::<f64>::zeros((1, 2)));
        let _ = p;
    }

    #[test]
    fn sum_of_params_has_unit_gradient() {
        let mut tape = Tape::new();
        let p = tape.param("p", &array![[1.0, -2.0], [0.5, 4.0]]);
        let q = tape.param("q", &array![[7.0]]);
        let sp = tape.sum(p);
        let l = tape.add(sp, q);
        let g = tape.backward(l).unwrap();
        assert!(g.grads.iter().all(|m| m.iter().all(|&v| v == 1.0)));
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let mut tape = Tape::new();
        let p = tape.param("p", &array![[1.0, 2.0]]);
        assert!(matches!(tape.backward(p), Err(Error::Usage(_))));
    }

    #[test]
    fn elementwise_ops_match_fd() {
        let x0 = array![[0.3, -0.7, 1.2], [0.9, 0.2, -0.4]];
        fd_check(
            |t, x| {
                let s = t.sigmoid(x);
                let th = t.tanh(x);
                let m = t.mul(s, th);
                let sq = t.square(x);
                let o = t.offset(sq, 1.0);
                let lg = t.log(o);
                let r = t.sqrt(o);
                let d = t.div(lg, r);
                let a = t.add(m, d);
                let mr = t.mean_rows(a);
                let cs = t.clamp_min(mr, -10.0);
                t.sum(cs)
            },
            x0,
        );
    }

    #[test]
    fn matmul_family_matches_fd() {
        let x0 = array![[0.3, -0.7], [0.9, 0.2], [0.1, 0.5]];
        let w = array![[1.0, 0.5], [-0.3, 0.8]];
        fd_check(
            move |t, x| {
                let wn = t.constant(w.clone());
                let a = t.matmul(x, wn);
                let b = t.matmul_bt(x, a);
                let c = t.matmul_at(x, b);
                let row = t.slice_cols(a, 1, 1);
                let cat = t.concat_cols(&[a, row]);
                let sq = t.square(cat);
                let s1 = t.sum(sq);
                let s2 = t.sum(c);
                let sc = t.scale(s2, 0.1);
                t.add(s1, sc)
            },
            x0,
        );
    }

    #[test]
    fn solve_matches_fd() {
        let d0 = array![[1.0, 0.3], [0.2, 1.1], [0.7, -0.4], [0.5, 0.9]];
        fd_check(
            |t, d| {
                let gram = t.matmul_at(d, d);
                let ridge = t.constant(Array2::eye(2) * 0.1);
                let a = t.add(gram, ridge);
                let y = t.constant(array![[1.0], [2.0], [0.5], [-1.0]]);
                let rhs = t.matmul_at(d, y);
                let coef = t.solve(a, rhs).unwrap();
                let fit = t.matmul(d, coef);
                let r = t.sub(y, fit);
                let sq = t.square(r);
                t.sum(sq)
            },
            d0,
        );
    }

    #[test]
    fn add_row_broadcast_matches_fd() {
        let b0 = array![[0.1, -0.2, 0.3]];
        fd_check(
            |t, b| {
                let x = t.constant(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
                let y = t.add_row(x, b);
                let z = t.tanh(y);
                t.sum(z)
            },
            b0,
        );
    }
}
