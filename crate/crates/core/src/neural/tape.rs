//! Reverse-mode differentiation over batched matrix primitives.
//!
//! Grouped ops treat a `(n·k) × c` matrix as `n` consecutive groups of `k` rows
//! (one group per cluster) and reduce or broadcast within each group.

use super::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    Gather(Var, Vec<usize>),
    /// Channelwise max per group; stores the winning row of each output entry.
    GroupMax(Var, Vec<usize>),
    GroupBroadcast(Var, usize),
    /// Softmax over each group of a single-column input.
    GroupSoftmax(Var, usize),
    /// `out[g] = Σ_j w[g·k + j] · v[g·k + j]`, `w` one column wide.
    GroupWeightedSum(Var, Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of every node after a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of `shape` if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// Adds the `1 × c` row `bias` to every row of `a`.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(bias));
        assert_eq!(bv.shape(), (1, av.cols()), "bias shape");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.row(0)) {
                *o += b;
            }
        }
        self.push(out, Op::AddRowBias(a, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let v = concat_cols(self.value(a), self.value(b));
        self.push(v, Op::ConcatCols(a, b))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "concat_rows widths");
        let mut data = av.as_slice().to_vec();
        data.extend_from_slice(bv.as_slice());
        let v = Matrix::from_vec(av.rows() + bv.rows(), av.cols(), data).unwrap();
        self.push(v, Op::ConcatRows(a, b))
    }

    pub fn gather(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let av = self.value(a);
        let mut out = Matrix::zeros(rows.len(), av.cols());
        for (o, &r) in rows.iter().enumerate() {
            out.row_mut(o).copy_from_slice(av.row(r));
        }
        self.push(out, Op::Gather(a, rows))
    }

    pub fn group_max(&mut self, a: Var, k: usize) -> Var {
        let (v, arg) = group_max(self.value(a), k);
        self.push(v, Op::GroupMax(a, arg))
    }

    pub fn group_broadcast(&mut self, a: Var, k: usize) -> Var {
        let av = self.value(a);
        let mut out = Matrix::zeros(av.rows() * k, av.cols());
        for g in 0..av.rows() {
            for j in 0..k {
                out.row_mut(g * k + j).copy_from_slice(av.row(g));
            }
        }
        self.push(out, Op::GroupBroadcast(a, k))
    }

    pub fn group_softmax(&mut self, a: Var, k: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.cols(), 1, "group_softmax expects one column");
        let mut out = Matrix::zeros(av.rows(), 1);
        for (src, dst) in av
            .as_slice()
            .chunks_exact(k)
            .zip(out.as_mut_slice().chunks_exact_mut(k))
        {
            dst.copy_from_slice(&softmax(src));
        }
        self.push(out, Op::GroupSoftmax(a, k))
    }

    pub fn group_weighted_sum(&mut self, w: Var, values: Var, k: usize) -> Var {
        let (wv, vv) = (self.value(w), self.value(values));
        assert_eq!(wv.cols(), 1, "weights must be one column");
        assert_eq!(wv.rows(), vv.rows(), "weights and values rows");
        let groups = vv.rows() / k;
        let mut out = Matrix::zeros(groups, vv.cols());
        for g in 0..groups {
            for j in 0..k {
                let r = g * k + j;
                let wr = wv[(r, 0)];
                for (o, x) in out.row_mut(g).iter_mut().zip(vv.row(r)) {
                    *o += wr * x;
                }
            }
        }
        self.push(out, Op::GroupWeightedSum(w, values, k))
    }

    /// Propagates `seeds` (output gradients) back through the tape.
    pub fn backward(&self, seeds: &[(Var, Matrix)]) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.value(*v).shape(), "seed shape");
            accumulate(&mut grads, *v, g.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRowBias(a, b) => {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, x) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&node.value, |x, s| x * s * (1.0 - s));
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols();
                    let (ga, gb) = split_cols(&g, ca);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::ConcatRows(a, b) => {
                    let ra = self.value(*a).rows();
                    let c = g.cols();
                    let (top, bottom) = g.as_slice().split_at(ra * c);
                    let ga = Matrix::from_vec(ra, c, top.to_vec()).unwrap();
                    let gb = Matrix::from_vec(g.rows() - ra, c, bottom.to_vec()).unwrap();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Gather(a, rows) => {
                    let av = self.value(*a);
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    for (o, &r) in rows.iter().enumerate() {
                        for (d, x) in ga.row_mut(r).iter_mut().zip(g.row(o)) {
                            *d += x;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::GroupMax(a, arg) => {
                    let av = self.value(*a);
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    let c = av.cols();
                    for gi in 0..g.rows() {
                        for ch in 0..c {
                            ga[(arg[gi * c + ch], ch)] += g[(gi, ch)];
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::GroupBroadcast(a, k) => {
                    let av = self.value(*a);
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    for r in 0..g.rows() {
                        for (d, x) in ga.row_mut(r / k).iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::GroupSoftmax(a, k) => {
                    let s = node.value.as_slice();
                    let mut ga = Matrix::zeros(s.len(), 1);
                    for ((sg, gg), dst) in s
                        .chunks_exact(*k)
                        .zip(g.as_slice().chunks_exact(*k))
                        .zip(ga.as_mut_slice().chunks_exact_mut(*k))
                    {
                        let dot: f64 = sg.iter().zip(gg).map(|(x, y)| x * y).sum();
                        for ((d, x), y) in dst.iter_mut().zip(sg).zip(gg) {
                            *d = x * (y - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::GroupWeightedSum(w, v, k) => {
                    let (wv, vv) = (self.value(*w), self.value(*v));
                    let mut gw = Matrix::zeros(wv.rows(), 1);
                    let mut gv = Matrix::zeros(vv.rows(), vv.cols());
                    for r in 0..vv.rows() {
                        let go = g.row(r / k);
                        gw[(r, 0)] = go.iter().zip(vv.row(r)).map(|(x, y)| x * y).sum();
                        let wr = wv[(r, 0)];
                        for (d, x) in gv.row_mut(r).iter_mut().zip(go) {
                            *d = wr * x;
                        }
                    }
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *v, gv);
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Channelwise max over each group of `k` rows; ties go to the lowest row.
pub fn group_max(a: &Matrix, k: usize) -> (Matrix, Vec<usize>) {
    let groups = a.rows() / k;
    let c = a.cols();
    let mut out = Matrix::zeros(groups, c);
    let mut arg = vec![0; groups * c];
    for g in 0..groups {
        for ch in 0..c {
            let mut best = g * k;
            for r in g * k + 1..(g + 1) * k {
                if a[(r, ch)] > a[(best, ch)] {
                    best = r;
                }
            }
            out[(g, ch)] = a[(best, ch)];
            arg[g * c + ch] = best;
        }
    }
    (out, arg)
}

pub fn concat_cols(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.rows(), b.rows(), "concat_cols rows");
    let mut out = Matrix::zeros(a.rows(), a.cols() + b.cols());
    for r in 0..a.rows() {
        let row = out.row_mut(r);
        row[..a.cols()].copy_from_slice(a.row(r));
        row[a.cols()..].copy_from_slice(b.row(r));
    }
    out
}

fn split_cols(g: &Matrix, left: usize) -> (Matrix, Matrix) {
    let mut a = Matrix::zeros(g.rows(), left);
    let mut b = Matrix::zeros(g.rows(), g.cols() - left);
    for r in 0..g.rows() {
        a.row_mut(r).copy_from_slice(&g.row(r)[..left]);
        b.row_mut(r).copy_from_slice(&g.row(r)[left..]);
    }
    (a, b)
}
