use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Result, SmdtError};

const LAYER_NORM_EPS: f64 = 1e-6;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRows(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    Sigmoid(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        rows: Vec<(usize, usize)>,
        smoothing: f64,
        pad: Option<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation tape. Nodes are appended in evaluation order, so every operand
/// precedes its consumers.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    train: bool,
    rng: ChaCha8Rng,
}

impl Graph {
    /// `train` enables dropout; `seed` drives the dropout masks.
    pub fn new(train: bool, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn eval() -> Self {
        Graph::new(false, 0)
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Accumulated gradient of a leaf after one or more [`Graph::backward`] calls.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.leaf_grads.get_mut(v.0).and_then(Option::take)
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k, m) = (av.rows(), av.cols(), bv.cols());
        if bv.rows() != k || bv.shape().len() != 2 {
            return Err(SmdtError::shape(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = vec![0.0; n * m];
        let (ad, bd) = (av.data(), bv.data());
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let x = ad[i * k + p];
                if x != 0.0 {
                    axpy(orow, x, &bd[p * m..(p + 1) * m]);
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k, m) = (av.rows(), av.cols(), bv.rows());
        if bv.cols() != k {
            return Err(SmdtError::shape(
                "matmul_nt",
                format!("{:?} x {:?}ᵀ", av.shape(), bv.shape()),
            ));
        }
        let mut out = vec![0.0; n * m];
        let (ad, bd) = (av.data(), bv.data());
        for i in 0..n {
            let arow = &ad[i * k..(i + 1) * k];
            for j in 0..m {
                out[i * m + j] = dot(arow, &bd[j * k..(j + 1) * k]);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() != 2 {
            return Err(SmdtError::shape("transpose", format!("{:?}", av.shape())));
        }
        let (n, m) = (av.rows(), av.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = av.data()[i * m + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Transpose(a), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(SmdtError::shape(
                op,
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data).expect("shape checked");
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a row vector (length = columns of `a`) to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let m = av.cols();
        if bv.numel() != m {
            return Err(SmdtError::shape(
                "add_row",
                format!("{:?} + row {:?}", av.shape(), bv.shape()),
            ));
        }
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv.data()[i % m])
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(t, Op::AddRow(a, bias), rg))
    }

    /// Scales row `r` of `a` by `weights[r]`.
    pub fn mul_rows(&mut self, a: Var, weights: Var) -> Result<Var> {
        let (av, wv) = (self.value(a), self.value(weights));
        let m = av.cols();
        if wv.numel() != av.rows() {
            return Err(SmdtError::shape(
                "mul_rows",
                format!("{:?} by weights {:?}", av.shape(), wv.shape()),
            ));
        }
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * wv.data()[i / m])
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(weights);
        Ok(self.push(t, Op::MulRows(a, weights), rg))
    }

    /// Multiplies every entry of `a` by the single value held in `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let (av, sv) = (self.value(a), self.value(s));
        if sv.numel() != 1 {
            return Err(SmdtError::shape("mul_scalar", format!("{:?}", sv.shape())));
        }
        let c = sv.data()[0];
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x * c).collect())?;
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(t, Op::MulScalar(a, s), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x * c).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let m = av.cols();
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(m.max(1)) {
            softmax_in_place(row);
        }
        let t = Tensor::new(av.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Softmax(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| sigmoid(x)).collect();
        let t = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Sigmoid(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x.max(0.0)).collect();
        let t = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    /// Normalises each row to zero mean and unit variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let m = xv.cols();
        if gv.numel() != m || bv.numel() != m {
            return Err(SmdtError::shape(
                "layer_norm",
                format!("{:?} with gain {:?}", xv.shape(), gv.shape()),
            ));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; rows * m];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * m];
        for r in 0..rows {
            let row = &xv.data()[r * m..(r + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..m {
                let h = (row[c] - mean) * rs;
                xhat[r * m + c] = h;
                out[r * m + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Selects rows of a `[vocab, d]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (v, d) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(SmdtError::shape(
                    "gather",
                    format!("id {id} out of range for table of {v} rows"),
                ));
            }
            out.extend_from_slice(tv.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenates 2-D tensors along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.value(p).rows(),
            None => return Err(SmdtError::shape("concat", "no inputs")),
        };
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(SmdtError::shape("concat", "row counts differ"));
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w].copy_from_slice(pv.row(r));
            }
            offset += w;
        }
        let t = Tensor::new(vec![rows, total], out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, m) = (xv.rows(), xv.cols());
        if start > end || end > m {
            return Err(SmdtError::shape(
                "slice",
                format!("{start}..{end} of {m} columns"),
            ));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&xv.row(r)[start..end]);
        }
        let t = Tensor::new(vec![rows, w], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Slice { x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = Tensor::new(shape, self.value(x).data().to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Inverted dropout. Survivors are scaled by `1/(1-p)`; outside training mode
    /// (or for `p = 0`) the input handle is returned unchanged.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(SmdtError::InvalidArgument(format!(
                "dropout rate must lie in [0, 1), got {p}"
            )));
        }
        if !self.train || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Dropout { x, mask }, rg))
    }

    /// Mean label-smoothed cross-entropy over rows with a target.
    ///
    /// `targets[r] = None` (or the `pad` id) excludes row `r`. The smoothing mass
    /// is spread uniformly over every class except `pad`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        smoothing: f64,
        pad: Option<usize>,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (n, v) = (lv.rows(), lv.cols());
        if targets.len() != n {
            return Err(SmdtError::shape(
                "cross_entropy",
                format!("{n} rows but {} targets", targets.len()),
            ));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(SmdtError::InvalidArgument(format!(
                "label smoothing must lie in [0, 1), got {smoothing}"
            )));
        }
        let rows: Vec<(usize, usize)> = targets
            .iter()
            .enumerate()
            .filter_map(|(r, t)| t.filter(|&t| Some(t) != pad).map(|t| (r, t)))
            .collect();
        if rows.is_empty() {
            return Err(SmdtError::InvalidArgument(
                "cross_entropy needs at least one target".into(),
            ));
        }
        if let Some(&(_, t)) = rows.iter().find(|&&(_, t)| t >= v) {
            return Err(SmdtError::shape(
                "cross_entropy",
                format!("target {t} out of range for {v} classes"),
            ));
        }
        let smooth_classes = (v - usize::from(pad.is_some_and(|p| p < v))) as f64;
        let mut probs = Vec::with_capacity(rows.len() * v);
        let mut total = 0.0;
        for &(r, gold) in &rows {
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            let mut loss = 0.0;
            for (k, &x) in row.iter().enumerate() {
                let logp = x - lse;
                let q = target_mass(k, gold, smoothing, smooth_classes, pad);
                if q != 0.0 {
                    loss -= q * logp;
                }
                probs.push(logp.exp());
            }
            total += loss;
        }
        let value = total / rows.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                rows,
                smoothing,
                pad,
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Reverse sweep from a scalar output. Leaf gradients accumulate across calls
    /// until [`Graph::zero_grad`].
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).numel() != 1 {
            return Err(SmdtError::InvalidArgument(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[idx] {
                    Some(acc) => axpy(acc, 1.0, &g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut acc = |v: Var, contribution: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => axpy(existing, 1.0, &contribution),
                slot => *slot = Some(contribution),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                if self.rg(*a) {
                    let mut da = vec![0.0; n * k];
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            da[i * k + p] = dot(grow, &bv.data()[p * m..(p + 1) * m]);
                        }
                    }
                    acc(*a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * m];
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let x = av.data()[i * k + p];
                            if x != 0.0 {
                                axpy(&mut db[p * m..(p + 1) * m], x, grow);
                            }
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.rows());
                if self.rg(*a) {
                    let mut da = vec![0.0; n * k];
                    for i in 0..n {
                        let drow = &mut da[i * k..(i + 1) * k];
                        for j in 0..m {
                            let gij = g[i * m + j];
                            if gij != 0.0 {
                                axpy(drow, gij, &bv.data()[j * k..(j + 1) * k]);
                            }
                        }
                    }
                    acc(*a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; m * k];
                    for i in 0..n {
                        let arow = &av.data()[i * k..(i + 1) * k];
                        for j in 0..m {
                            let gij = g[i * m + j];
                            if gij != 0.0 {
                                axpy(&mut db[j * k..(j + 1) * k], gij, arow);
                            }
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::Transpose(a) => {
                let (n, m) = (out.rows(), out.cols());
                let mut da = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        da[j * n + i] = g[i * m + j];
                    }
                }
                acc(*a, da);
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|x| -x).collect());
            }
            Op::AddRow(a, bias) => {
                acc(*a, g.to_vec());
                let m = out.cols();
                let mut db = vec![0.0; m];
                for row in g.chunks(m) {
                    axpy(&mut db, 1.0, row);
                }
                acc(*bias, db);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                acc(*b, g.iter().zip(av).map(|(x, y)| x * y).collect());
            }
            Op::MulRows(a, w) => {
                let (av, wv) = (self.value(*a), self.value(*w));
                let m = av.cols();
                acc(
                    *a,
                    g.iter()
                        .enumerate()
                        .map(|(i, x)| x * wv.data()[i / m])
                        .collect(),
                );
                let dw = g
                    .chunks(m)
                    .zip(av.data().chunks(m))
                    .map(|(gr, ar)| dot(gr, ar))
                    .collect();
                acc(*w, dw);
            }
            Op::MulScalar(a, s) => {
                let c = self.value(*s).data()[0];
                acc(*a, g.iter().map(|x| x * c).collect());
                acc(*s, vec![dot(g, self.value(*a).data())]);
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|x| x * c).collect()),
            Op::Softmax(a) => {
                let m = out.cols();
                let mut da = vec![0.0; g.len()];
                for ((dr, gr), yr) in da.chunks_mut(m).zip(g.chunks(m)).zip(out.data().chunks(m)) {
                    let s = dot(gr, yr);
                    for c in 0..m {
                        dr[c] = yr[c] * (gr[c] - s);
                    }
                }
                acc(*a, da);
            }
            Op::Sigmoid(a) => acc(
                *a,
                g.iter()
                    .zip(out.data())
                    .map(|(gx, y)| gx * y * (1.0 - y))
                    .collect(),
            ),
            Op::Relu(a) => acc(
                *a,
                g.iter()
                    .zip(self.value(*a).data())
                    .map(|(gx, &x)| if x > 0.0 { *gx } else { 0.0 })
                    .collect(),
            ),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let m = out.cols();
                let gv = self.value(*gain).data();
                if self.rg(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for r in 0..rstd.len() {
                        let gr = &g[r * m..(r + 1) * m];
                        let hr = &xhat[r * m..(r + 1) * m];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for c in 0..m {
                            let d = gr[c] * gv[c];
                            mean_d += d;
                            mean_dh += d * hr[c];
                        }
                        mean_d /= m as f64;
                        mean_dh /= m as f64;
                        for c in 0..m {
                            let d = gr[c] * gv[c];
                            dx[r * m + c] = rstd[r] * (d - mean_d - hr[c] * mean_dh);
                        }
                    }
                    acc(*x, dx);
                }
                let mut dg = vec![0.0; m];
                let mut db = vec![0.0; m];
                for (gr, hr) in g.chunks(m).zip(xhat.chunks(m)) {
                    for c in 0..m {
                        dg[c] += gr[c] * hr[c];
                        db[c] += gr[c];
                    }
                }
                acc(*gain, dg);
                acc(*bias, db);
            }
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let d = tv.cols();
                let mut dt = vec![0.0; tv.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    axpy(&mut dt[id * d..(id + 1) * d], 1.0, &g[r * d..(r + 1) * d]);
                }
                acc(*table, dt);
            }
            Op::Concat(parts) => {
                let (rows, total) = (out.rows(), out.cols());
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut dp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    acc(p, dp);
                    offset += w;
                }
            }
            Op::Slice { x, start } => {
                let xv = self.value(*x);
                let (m, w) = (xv.cols(), out.cols());
                let mut dx = vec![0.0; xv.numel()];
                for r in 0..xv.rows() {
                    dx[r * m + start..r * m + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                acc(*x, dx);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Dropout { x, mask } => acc(*x, g.iter().zip(mask).map(|(a, m)| a * m).collect()),
            Op::CrossEntropy {
                logits,
                rows,
                smoothing,
                pad,
                probs,
            } => {
                let lv = self.value(*logits);
                let v = lv.cols();
                let smooth_classes = (v - usize::from(pad.is_some_and(|p| p < v))) as f64;
                let scale = g[0] / rows.len() as f64;
                let mut dl = vec![0.0; lv.numel()];
                for (i, &(r, gold)) in rows.iter().enumerate() {
                    for k in 0..v {
                        let q = target_mass(k, gold, *smoothing, smooth_classes, *pad);
                        dl[r * v + k] = scale * (probs[i * v + k] - q);
                    }
                }
                acc(*logits, dl);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).numel()]),
        }
    }
}

fn target_mass(k: usize, gold: usize, smoothing: f64, classes: f64, pad: Option<usize>) -> f64 {
    if Some(k) == pad {
        return 0.0;
    }
    let base = smoothing / classes;
    if k == gold {
        1.0 - smoothing + base
    } else {
        base
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}
