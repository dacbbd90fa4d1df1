//! Dense f64 tensors plus a reverse-mode tape.
//!
//! Values are computed eagerly as operations are recorded; `backward` replays
//! the tape in exact reverse execution order and accumulates (never
//! overwrites) gradients. Everything is single-threaded and deterministic:
//! replaying the same tape twice yields bitwise-identical gradients.

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Plain dense value: row-major data plus shape. Vectors are 1xN rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dim(format!("zero-sized dimension in shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::Dim(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; numel] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn row(data: Vec<f64>) -> Self {
        Tensor { shape: vec![1, data.len()], data }
    }

    /// Gaussian init with the given std, consuming the rng deterministically.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gaussian() * std).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Rows/cols of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Dim(format!("expected rank-2 tensor, got shape {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Collapse the row axis: [m, n] -> [1, n].
    Rows,
    /// Collapse the column axis: [m, n] -> [m, 1].
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose { x: Var },
    Reshape { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Relu { x: Var },
    Square { x: Var },
    MinConst { x: Var, c: f64 },
    SoftmaxRows { x: Var },
    LogSoftmaxRows { x: Var, softmax: Vec<f64> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    SumAxis { x: Var, axis: Axis },
    MeanAxis { x: Var, axis: Axis },
    SumAll { x: Var },
    MeanAll { x: Var },
    RepeatRow { x: Var },
    ConcatRows { xs: Vec<Var> },
    Row { x: Var, index: usize },
    Gather { x: Var, coords: Vec<(usize, usize)> },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    PairwiseSqDist { a: Var, b: Var },
    FrobeniusNorm { x: Var },
    Conv2dStride2 { x: Var, kernel: Var, bias: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a dense buffer; unreachable vars receive zeros.
    pub fn dense(&self, v: Var, numel: usize) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; numel],
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Result<Var> {
        if !t.is_finite() {
            return Err(Error::Numeric("leaf tensor contains non-finite values".into()));
        }
        Ok(self.push(t, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, false)
    }

    // ── Linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Dim(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul { a, b }, needs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor { shape: vec![n, m], data: out }, Op::Transpose { x }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::Dim(format!(
                "reshape {:?} -> {:?} changes element count",
                self.value(x).shape(),
                shape
            )));
        }
        let t = Tensor { shape: shape.to_vec(), data: self.value(x).data().to_vec() };
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape { x }, needs))
    }

    // ── Elementwise ─────────────────────────────────────────────────

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dim(format!(
                "{what} requires equal shapes: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data: Vec<f64> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor { shape: self.value(a).shape().to_vec(), data };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add { a, b }, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data: Vec<f64> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect();
        let t = Tensor { shape: self.value(a).shape().to_vec(), data };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Sub { a, b }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data: Vec<f64> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor { shape: self.value(a).shape().to_vec(), data };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v * c).collect();
        let t = Tensor { shape: self.value(x).shape().to_vec(), data };
        let needs = self.needs(x);
        Ok(self.push(t, Op::Scale { x, c }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let t = Tensor { shape: self.value(x).shape().to_vec(), data };
        let needs = self.needs(x);
        Ok(self.push(t, Op::Relu { x }, needs))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v * v).collect();
        let t = Tensor { shape: self.value(x).shape().to_vec(), data };
        let needs = self.needs(x);
        Ok(self.push(t, Op::Square { x }, needs))
    }

    /// Elementwise min(x, c). Subgradient at x == c passes through to x.
    pub fn min_const(&mut self, x: Var, c: f64) -> Result<Var> {
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v.min(c)).collect();
        let t = Tensor { shape: self.value(x).shape().to_vec(), data };
        let needs = self.needs(x);
        Ok(self.push(t, Op::MinConst { x, c }, needs))
    }

    // ── Normalizations ──────────────────────────────────────────────

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if !self.value(x).is_finite() {
            return Err(Error::Numeric("softmax input contains non-finite values".into()));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                out[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                out[i * n + j] /= sum;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::SoftmaxRows { x }, needs))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if !self.value(x).is_finite() {
            return Err(Error::Numeric("log-softmax input contains non-finite values".into()));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        let mut soft = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                sum += (row[j] - max).exp();
            }
            let log_z = max + sum.ln();
            for j in 0..n {
                out[i * n + j] = row[j] - log_z;
                soft[i * n + j] = out[i * n + j].exp();
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor { shape: vec![m, n], data: out },
            Op::LogSoftmaxRows { x, softmax: soft },
            needs,
        ))
    }

    /// Per-row normalization over the last dimension with biased variance:
    /// y = (x - mean) / sqrt(var + eps) * gain + bias. Gain/bias are 1xD rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if n < 2 {
            return Err(Error::Dim(format!(
                "layer_norm needs a last dimension >= 2, got shape {:?}",
                self.value(x).shape()
            )));
        }
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::Dim(format!(
                "layer_norm gain/bias must have {n} elements, got {} and {}",
                self.value(gain).numel(),
                self.value(bias).numel()
            )));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            if !is.is_finite() {
                return Err(Error::Numeric(format!(
                    "layer_norm row {i} has zero variance and eps={eps}"
                )));
            }
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            Tensor { shape: vec![m, n], data: out },
            Op::LayerNorm { x, gain, bias, xhat, inv_std },
            needs,
        ))
    }

    /// Per-column normalization over the batch (row) dimension with biased
    /// variance. Returns the output var plus the batch mean/var per column so
    /// callers can maintain running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::Dim(format!(
                "batch_norm gain/bias must have {n} elements, got {} and {}",
                self.value(gain).numel(),
                self.value(bias).numel()
            )));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut mean = vec![0.0; n];
        let mut var = vec![0.0; n];
        for j in 0..n {
            let mut s = 0.0;
            for i in 0..m {
                s += src[i * n + j];
            }
            mean[j] = s / m as f64;
            let mut v = 0.0;
            for i in 0..m {
                let d = src[i * n + j] - mean[j];
                v += d * d;
            }
            var[j] = v / m as f64;
        }
        let mut out = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; n];
        for j in 0..n {
            let is = 1.0 / (var[j] + eps).sqrt();
            if !is.is_finite() {
                return Err(Error::Numeric(format!(
                    "batch_norm column {j} has zero variance and eps={eps}"
                )));
            }
            inv_std[j] = is;
        }
        for i in 0..m {
            for j in 0..n {
                let h = (src[i * n + j] - mean[j]) * inv_std[j];
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        let v = self.push(
            Tensor { shape: vec![m, n], data: out },
            Op::BatchNorm { x, gain, bias, xhat, inv_std },
            needs,
        );
        Ok((v, mean, var))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        let mut norms = vec![0.0; m];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::Numeric(format!("cannot L2-normalize zero row {i}")));
            }
            norms[i] = norm;
            for j in 0..n {
                out[i * n + j] = row[j] / norm;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor { shape: vec![m, n], data: out },
            Op::L2NormalizeRows { x, norms },
            needs,
        ))
    }

    // ── Reductions ──────────────────────────────────────────────────

    pub fn sum_axis(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let t = match axis {
            Axis::Rows => {
                let mut out = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        out[j] += src[i * n + j];
                    }
                }
                Tensor { shape: vec![1, n], data: out }
            }
            Axis::Cols => {
                let mut out = vec![0.0; m];
                for i in 0..m {
                    for j in 0..n {
                        out[i] += src[i * n + j];
                    }
                }
                Tensor { shape: vec![m, 1], data: out }
            }
        };
        let needs = self.needs(x);
        Ok(self.push(t, Op::SumAxis { x, axis }, needs))
    }

    pub fn mean_axis(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let t = match axis {
            Axis::Rows => {
                let mut out = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        out[j] += src[i * n + j];
                    }
                }
                for v in &mut out {
                    *v /= m as f64;
                }
                Tensor { shape: vec![1, n], data: out }
            }
            Axis::Cols => {
                let mut out = vec![0.0; m];
                for i in 0..m {
                    for j in 0..n {
                        out[i] += src[i * n + j];
                    }
                }
                for v in &mut out {
                    *v /= n as f64;
                }
                Tensor { shape: vec![m, 1], data: out }
            }
        };
        let needs = self.needs(x);
        Ok(self.push(t, Op::MeanAxis { x, axis }, needs))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::SumAll { x }, needs))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s: f64 = self.value(x).data().iter().sum::<f64>() / n as f64;
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::MeanAll { x }, needs))
    }

    pub fn frobenius_norm(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::FrobeniusNorm { x }, needs))
    }

    // ── Structure ───────────────────────────────────────────────────

    /// Broadcast a 1xN row to M identical rows.
    pub fn repeat_row(&mut self, x: Var, times: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if m != 1 {
            return Err(Error::Dim(format!(
                "repeat_row expects a 1xN row, got {:?}",
                self.value(x).shape()
            )));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(times * n);
        for _ in 0..times {
            out.extend_from_slice(src);
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor { shape: vec![times, n], data: out }, Op::RepeatRow { x }, needs))
    }

    /// Stack rank-2 tensors with equal column counts along the row axis.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Contract("concat_rows of an empty list".into()));
        }
        let (_, n) = self.value(xs[0]).dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &v in xs {
            let (m, n2) = self.value(v).dims2()?;
            if n2 != n {
                return Err(Error::Dim(format!(
                    "concat_rows column mismatch: {n} vs {n2}"
                )));
            }
            rows += m;
            data.extend_from_slice(self.value(v).data());
        }
        let needs = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            Tensor { shape: vec![rows, n], data },
            Op::ConcatRows { xs: xs.to_vec() },
            needs,
        ))
    }

    /// Extract row `index` of a rank-2 tensor as a 1xN row.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if index >= m {
            return Err(Error::Contract(format!("row index {index} out of range for {m} rows")));
        }
        let data = self.value(x).data()[index * n..(index + 1) * n].to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor { shape: vec![1, n], data }, Op::Row { x, index }, needs))
    }

    /// Gather entries of a rank-2 tensor at (row, col) coordinates into a 1xL row.
    pub fn gather(&mut self, x: Var, coords: &[(usize, usize)]) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let mut data = Vec::with_capacity(coords.len());
        for &(r, c) in coords {
            if r >= m || c >= n {
                return Err(Error::Contract(format!(
                    "gather coordinate ({r},{c}) out of range for shape [{m},{n}]"
                )));
            }
            data.push(self.value(x).at2(r, c));
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor { shape: vec![1, coords.len()], data },
            Op::Gather { x, coords: coords.to_vec() },
            needs,
        ))
    }

    /// Squared Euclidean distances between row sets: out[i][j] = ||a_i - b_j||^2.
    pub fn pairwise_sqdist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, d) = self.value(a).dims2()?;
        let (n, d2) = self.value(b).dims2()?;
        if d != d2 {
            return Err(Error::Dim(format!(
                "pairwise_sqdist feature dims disagree: {d} vs {d2}"
            )));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for t in 0..d {
                    let diff = av[i * d + t] - bv[j * d + t];
                    s += diff * diff;
                }
                out[i * n + j] = s;
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::PairwiseSqDist { a, b }, needs))
    }

    /// 3x3 convolution with stride 2 and zero padding 1 plus bias.
    /// x: [H, W, Cin], kernel: [3, 3, Cin, Cout], bias: 1xCout -> [H/2, W/2, Cout].
    pub fn conv2d_stride2(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ks = self.value(kernel).shape().to_vec();
        if xs.len() != 3 {
            return Err(Error::Dim(format!("conv input must be [H,W,C], got {xs:?}")));
        }
        if ks.len() != 4 || ks[0] != 3 || ks[1] != 3 || ks[2] != xs[2] {
            return Err(Error::Dim(format!(
                "conv kernel must be [3,3,{},Cout], got {ks:?}",
                xs[2]
            )));
        }
        let (h, w, ci, co) = (xs[0], xs[1], xs[2], ks[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!(
                "conv input dims must be divisible by 2, got {h}x{w}"
            )));
        }
        if self.value(bias).numel() != co {
            return Err(Error::Dim(format!(
                "conv bias must have {co} elements, got {}",
                self.value(bias).numel()
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let kv = self.value(kernel).data();
        let bv = self.value(bias).data();
        let mut out = vec![0.0; ho * wo * co];
        for oh in 0..ho {
            for ow in 0..wo {
                for c_out in 0..co {
                    let mut s = bv[c_out];
                    for kh in 0..3 {
                        for kw in 0..3 {
                            let ih = (oh * 2 + kh) as isize - 1;
                            let iw = (ow * 2 + kw) as isize - 1;
                            if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                continue;
                            }
                            for c_in in 0..ci {
                                s += xv[(ih as usize * w + iw as usize) * ci + c_in]
                                    * kv[((kh * 3 + kw) * ci + c_in) * co + c_out];
                            }
                        }
                    }
                    out[(oh * wo + ow) * co + c_out] = s;
                }
            }
        }
        let needs = self.needs(x) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(
            Tensor { shape: vec![ho, wo, co], data: out },
            Op::Conv2dStride2 { x, kernel, bias },
            needs,
        ))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Every reachable var accumulates its
    /// gradient; unreachable vars read back as zero via [`Gradients::dense`].
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss var is not on this tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, contribution: impl FnOnce(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.value(v).numel()]);
        }
        contribution(slot.as_mut().unwrap());
    }

    fn accumulate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).shape()[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                // dA = g . B^T
                self.acc(grads, *a, |da| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[p * n + j];
                            }
                            da[i * k + p] += s;
                        }
                    }
                });
                // dB = A^T . g
                self.acc(grads, *b, |db| {
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += av[i * k + p] * g[i * n + j];
                            }
                            db[p * n + j] += s;
                        }
                    }
                });
            }
            Op::Transpose { x } => {
                let (n, m) = self.value(Var(id)).dims2().unwrap();
                self.acc(grads, *x, |dx| {
                    for i in 0..n {
                        for j in 0..m {
                            dx[j * n + i] += g[i * m + j];
                        }
                    }
                });
            }
            Op::Reshape { x } => {
                self.acc(grads, *x, |dx| {
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
            Op::Add { a, b } => {
                self.acc(grads, *a, |da| {
                    for (d, gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                self.acc(grads, *b, |db| {
                    for (d, gv) in db.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
            Op::Sub { a, b } => {
                self.acc(grads, *a, |da| {
                    for (d, gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                self.acc(grads, *b, |db| {
                    for (d, gv) in db.iter_mut().zip(g) {
                        *d -= gv;
                    }
                });
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc(grads, *a, |da| {
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                });
                self.acc(grads, *b, |db| {
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale { x, c } => {
                let c = *c;
                self.acc(grads, *x, |dx| {
                    for i in 0..g.len() {
                        dx[i] += g[i] * c;
                    }
                });
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |dx| {
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            dx[i] += g[i];
                        }
                    }
                });
            }
            Op::Square { x } => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |dx| {
                    for i in 0..g.len() {
                        dx[i] += 2.0 * xv[i] * g[i];
                    }
                });
            }
            Op::MinConst { x, c } => {
                let c = *c;
                let xv = self.value(*x).data();
                self.acc(grads, *x, |dx| {
                    for i in 0..g.len() {
                        if xv[i] <= c {
                            dx[i] += g[i];
                        }
                    }
                });
            }
            Op::SoftmaxRows { x } => {
                let y = self.value(Var(id)).data();
                let (m, n) = self.value(Var(id)).dims2().unwrap();
                self.acc(grads, *x, |dx| {
                    for i in 0..m {
                        let mut dot = 0.0;
                        for j in 0..n {
                            dot += g[i * n + j] * y[i * n + j];
                        }
                        for j in 0..n {
                            dx[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows { x, softmax } => {
                let (m, n) = self.value(Var(id)).dims2().unwrap();
                self.acc(grads, *x, |dx| {
                    for i in 0..m {
                        let mut gsum = 0.0;
                        for j in 0..n {
                            gsum += g[i * n + j];
                        }
                        for j in 0..n {
                            dx[i * n + j] += g[i * n + j] - softmax[i * n + j] * gsum;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (m, n) = self.value(Var(id)).dims2().unwrap();
                let gv = self.value(*gain).data();
                self.acc(grads, *gain, |dg| {
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                });
                self.acc(grads, *bias, |db| {
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += g[i * n + j];
                        }
                    }
                });
                self.acc(grads, *x, |dx| {
                    for i in 0..m {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_xhat = 0.0;
                        for j in 0..n {
                            let dh = g[i * n + j] * gv[j];
                            mean_dh += dh;
                            mean_dh_xhat += dh * xhat[i * n + j];
                        }
                        mean_dh /= n as f64;
                        mean_dh_xhat /= n as f64;
                        for j in 0..n {
                            let dh = g[i * n + j] * gv[j];
                            dx[i * n + j] +=
                                inv_std[i] * (dh - mean_dh - xhat[i * n + j] * mean_dh_xhat);
                        }
                    }
                });
            }
            Op::BatchNorm { x, gain, bias, xhat, inv_std } => {
                let (m, n) = self.value(Var(id)).dims2().unwrap();
                let gv = self.value(*gain).data();
                self.acc(grads, *gain, |dg| {
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                });
                self.acc(grads, *bias, |db| {
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += g[i * n + j];
                        }
                    }
                });
                self.acc(grads, *x, |dx| {
                    for j in 0..n {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_xhat = 0.0;
                        for i in 0..m {
                            let dh = g[i * n + j] * gv[j];
                            mean_dh += dh;
                            mean_dh_xhat += dh * xhat[i * n + j];
                        }
                        mean_dh /= m as f64;
                        mean_dh_xhat /= m as f64;
                        for i in 0..m {
                            let dh = g[i * n + j] * gv[j];
                            dx[i * n + j] +=
                                inv_std[j] * (dh - mean_dh - xhat[i * n + j] * mean_dh_xhat);
                        }
                    }
                });
            }
            Op::SumAxis { x, axis } => {
                let (m, n) = self.value(*x).dims2().unwrap();
                let axis = *axis;
                self.acc(grads, *x, |dx| match axis {
                    Axis::Rows => {
                        for i in 0..m {
                            for j in 0..n {
                                dx[i * n + j] += g[j];
                            }
                        }
                    }
                    Axis::Cols => {
                        for i in 0..m {
                            for j in 0..n {
                                dx[i * n + j] += g[i];
                            }
                        }
                    }
                });
            }
            Op::MeanAxis { x, axis } => {
                let (m, n) = self.value(*x).dims2().unwrap();
                let axis = *axis;
                self.acc(grads, *x, |dx| match axis {
                    Axis::Rows => {
                        for i in 0..m {
                            for j in 0..n {
                                dx[i * n + j] += g[j] / m as f64;
                            }
                        }
                    }
                    Axis::Cols => {
                        for i in 0..m {
                            for j in 0..n {
                                dx[i * n + j] += g[i] / n as f64;
                            }
                        }
                    }
                });
            }
            Op::SumAll { x } => {
                self.acc(grads, *x, |dx| {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                });
            }
            Op::MeanAll { x } => {
                let n = self.value(*x).numel() as f64;
                self.acc(grads, *x, |dx| {
                    for d in dx.iter_mut() {
                        *d += g[0] / n;
                    }
                });
            }
            Op::FrobeniusNorm { x } => {
                let norm = self.value(Var(id)).data()[0];
                let xv = self.value(*x).data();
                self.acc(grads, *x, |dx| {
                    if norm > 0.0 {
                        for i in 0..dx.len() {
                            dx[i] += g[0] * xv[i] / norm;
                        }
                    }
                });
            }
            Op::RepeatRow { x } => {
                let n = self.value(*x).numel();
                let times = g.len() / n;
                self.acc(grads, *x, |dx| {
                    for t in 0..times {
                        for j in 0..n {
                            dx[j] += g[t * n + j];
                        }
                    }
                });
            }
            Op::ConcatRows { xs } => {
                let mut offset = 0;
                for &v in xs {
                    let len = self.value(v).numel();
                    let seg = &g[offset..offset + len];
                    self.acc(grads, v, |dx| {
                        for (d, gv) in dx.iter_mut().zip(seg) {
                            *d += gv;
                        }
                    });
                    offset += len;
                }
            }
            Op::Row { x, index } => {
                let (_, n) = self.value(*x).dims2().unwrap();
                let index = *index;
                self.acc(grads, *x, |dx| {
                    for j in 0..n {
                        dx[index * n + j] += g[j];
                    }
                });
            }
            Op::Gather { x, coords } => {
                let (_, n) = self.value(*x).dims2().unwrap();
                self.acc(grads, *x, |dx| {
                    for (l, &(r, c)) in coords.iter().enumerate() {
                        dx[r * n + c] += g[l];
                    }
                });
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = self.value(Var(id)).data();
                let (m, n) = self.value(Var(id)).dims2().unwrap();
                self.acc(grads, *x, |dx| {
                    for i in 0..m {
                        let mut dot = 0.0;
                        for j in 0..n {
                            dot += g[i * n + j] * y[i * n + j];
                        }
                        for j in 0..n {
                            dx[i * n + j] += (g[i * n + j] - y[i * n + j] * dot) / norms[i];
                        }
                    }
                });
            }
            Op::PairwiseSqDist { a, b } => {
                let (m, d) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).shape()[0];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc(grads, *a, |da| {
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for t in 0..d {
                                da[i * d + t] += 2.0 * gv * (av[i * d + t] - bv[j * d + t]);
                            }
                        }
                    }
                });
                self.acc(grads, *b, |db| {
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for t in 0..d {
                                db[j * d + t] += 2.0 * gv * (bv[j * d + t] - av[i * d + t]);
                            }
                        }
                    }
                });
            }
            Op::Conv2dStride2 { x, kernel, bias } => {
                let xs = self.value(*x).shape();
                let (h, w, ci) = (xs[0], xs[1], xs[2]);
                let co = self.value(*kernel).shape()[3];
                let (ho, wo) = (h / 2, w / 2);
                let xv = self.value(*x).data();
                let kv = self.value(*kernel).data();
                self.acc(grads, *bias, |db| {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            for c_out in 0..co {
                                db[c_out] += g[(oh * wo + ow) * co + c_out];
                            }
                        }
                    }
                });
                self.acc(grads, *kernel, |dk| {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            for kh in 0..3 {
                                for kw in 0..3 {
                                    let ih = (oh * 2 + kh) as isize - 1;
                                    let iw = (ow * 2 + kw) as isize - 1;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                        continue;
                                    }
                                    for c_in in 0..ci {
                                        let xval = xv[(ih as usize * w + iw as usize) * ci + c_in];
                                        for c_out in 0..co {
                                            dk[((kh * 3 + kw) * ci + c_in) * co + c_out] +=
                                                xval * g[(oh * wo + ow) * co + c_out];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                self.acc(grads, *x, |dx| {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            for kh in 0..3 {
                                for kw in 0..3 {
                                    let ih = (oh * 2 + kh) as isize - 1;
                                    let iw = (ow * 2 + kw) as isize - 1;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                        continue;
                                    }
                                    for c_in in 0..ci {
                                        let mut s = 0.0;
                                        for c_out in 0..co {
                                            s += kv[((kh * 3 + kw) * ci + c_in) * co + c_out]
                                                * g[(oh * wo + ow) * co + c_out];
                                        }
                                        dx[(ih as usize * w + iw as usize) * ci + c_in] += s;
                                    }
                                }
                            }
                        }
                    }
                });
            }
        }
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}
