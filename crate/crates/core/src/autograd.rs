//! A small reverse-mode automatic differentiation tape over dense `f64`
//! tensors.
//!
//! Every forward pass builds a fresh [`Graph`]; nodes are appended in
//! evaluation order so the backward sweep is a single reverse iteration.
//! Only the operations the scoring network needs are provided.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// A `1 x n` row vector.
    pub fn row(data: Vec<f64>) -> Self {
        Self {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
        }
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> (usize, usize) {
        debug_assert_eq!(self.shape.len(), 2, "expected a matrix, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let (_, c) = self.dims2();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Abs(Var),
    Transpose(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Vec<f64>,
        rstd: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MeanRows(Var),
    MeanAll(Var),
    Expand(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    GlobalAvgPool(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn check2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::Shape(format!("{what}: expected a matrix, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.check2(a, "matmul lhs")?;
        let (k2, n) = self.check2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul: {m}x{k} by {k2}x{n}")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b), rg))
    }

    /// Adds a `1 x c` row to every row of an `r x c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.check2(a, "add_row")?;
        if self.shape(row) != [1, c] {
            return Err(Error::Shape(format!(
                "add_row: bias {:?} for {r}x{c}",
                self.shape(row)
            )));
        }
        let bias = self.value(row).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (x, b) in chunk.iter_mut().zip(&bias) {
                *x += b;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(Tensor { shape: vec![r, c], data }, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|x| x * c).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&x| f(x)).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(t, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.check2(a, "transpose")?;
        let src = self.value(a).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape: vec![c, r], data }, Op::Transpose(a), rg))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.check2(a, "softmax")?;
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape: vec![r, c], data }, Op::Softmax(a), rg))
    }

    /// Row-wise layer normalization with affine `1 x c` gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.check2(x, "layer_norm")?;
        if self.shape(gamma) != [1, c] || self.shape(beta) != [1, c] {
            return Err(Error::Shape(format!("layer_norm: affine params for width {c}")));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut normed = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let n = (row[j] - mean) * rs;
                normed[i * c + j] = n;
                out[i * c + j] = n * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor { shape: vec![r, c], data: out },
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                rstd,
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Shape("concat_rows: no inputs".into()));
        };
        let (_, c) = self.check2(first, "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = self.check2(p, "concat_rows")?;
            if pc != c {
                return Err(Error::Shape(format!("concat_rows: width {pc} vs {c}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor { shape: vec![rows, c], data },
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Shape("concat_cols: no inputs".into()));
        };
        let (r, _) = self.check2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.check2(p, "concat_cols")?;
            if pr != r {
                return Err(Error::Shape(format!("concat_cols: height {pr} vs {r}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor { shape: vec![r, total], data },
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.check2(a, "slice_rows")?;
        if start + len > r || len == 0 {
            return Err(Error::Shape(format!("slice_rows: {start}+{len} of {r}")));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape: vec![len, c], data }, Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.check2(a, "slice_cols")?;
        if start + len > c || len == 0 {
            return Err(Error::Shape(format!("slice_cols: {start}+{len} of {c}")));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape: vec![r, len], data }, Op::SliceCols(a, start), rg))
    }

    /// Column means: `r x c` to `1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.check2(a, "mean_rows")?;
        let src = self.value(a).data();
        let mut data = vec![0.0; c];
        for row in src.chunks(c) {
            for (d, x) in data.iter_mut().zip(row) {
                *d += x;
            }
        }
        for d in data.iter_mut() {
            *d /= r as f64;
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape: vec![1, c], data }, Op::MeanRows(a), rg))
    }

    /// Mean of all elements as a `1 x 1` tensor.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.data.iter().sum::<f64>() / v.data.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(m), Op::MeanAll(a), rg)
    }

    /// Repeats a `1 x 1` scalar into a `1 x n` row.
    pub fn expand(&mut self, a: Var, n: usize) -> Result<Var> {
        if self.shape(a) != [1, 1] {
            return Err(Error::Shape(format!("expand: expected 1x1, got {:?}", self.shape(a))));
        }
        let s = self.value(a).data()[0];
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::row(vec![s; n]), Op::Expand(a), rg))
    }

    /// 2-D convolution of a `C x H x W` input with `O x C x k x k` weights
    /// and an `O`-length bias, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] {
            return Err(Error::Shape(format!("conv2d: input {xs:?}, weight {ws:?}")));
        }
        if self.shape(b) != [ws[0]] {
            return Err(Error::Shape(format!("conv2d: bias {:?}", self.shape(b))));
        }
        if stride == 0 || xs[1] + 2 * pad < ws[2] || xs[2] + 2 * pad < ws[2] {
            return Err(Error::Shape(format!("conv2d: kernel {} too large for {xs:?}", ws[2])));
        }
        let g = ConvGeom::new(&xs, &ws, stride, pad);
        let data = conv_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &g,
        );
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(
            Tensor { shape: vec![g.out_c, g.oh, g.ow], data },
            Op::Conv2d { x, w, b, stride, pad },
            rg,
        ))
    }

    /// Spatial mean of a `C x H x W` tensor as a `1 x C` row.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(Error::Shape(format!("global_avg_pool: {s:?}")));
        }
        let hw = s[1] * s[2];
        let data = self
            .value(a)
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape: vec![1, s[0]], data }, Op::GlobalAvgPool(a), rg))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Grads> {
        if self.value(output).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::filled(self.shape(output), 1.0));

        for idx in (0..=output.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.dims2();
                let (_, n) = bv.dims2();
                if self.needs(*a) {
                    // dA = dC * B^T
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &bv.data[p * n..(p + 1) * n];
                            let grow = &gd[i * n..(i + 1) * n];
                            da[i * k + p] = dot(grow, brow);
                        }
                    }
                    self.accumulate(grads, *a, Tensor { shape: vec![m, k], data: da });
                }
                if self.needs(*b) {
                    // dB = A^T * dC
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av.data[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let drow = &mut db[p * n..(p + 1) * n];
                            for (d, g) in drow.iter_mut().zip(grow) {
                                *d += aip * g;
                            }
                        }
                    }
                    self.accumulate(grads, *b, Tensor { shape: vec![k, n], data: db });
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                if self.needs(*b) {
                    let neg = Tensor {
                        shape: gout.shape.clone(),
                        data: gd.iter().map(|g| -g).collect(),
                    };
                    self.accumulate(grads, *b, neg);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let data = zip_map(gout, self.value(*b), |g, y| g * y);
                    self.accumulate(grads, *a, Tensor { shape: gout.shape.clone(), data });
                }
                if self.needs(*b) {
                    let data = zip_map(gout, self.value(*a), |g, x| g * x);
                    self.accumulate(grads, *b, Tensor { shape: gout.shape.clone(), data });
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, gout.clone());
                if self.needs(*row) {
                    let (_, c) = gout.dims2();
                    let mut db = vec![0.0; c];
                    for chunk in gd.chunks(c) {
                        for (d, g) in db.iter_mut().zip(chunk) {
                            *d += g;
                        }
                    }
                    self.accumulate(grads, *row, Tensor::row(db));
                }
            }
            Op::Scale(a, c) => {
                let data = gd.iter().map(|g| g * c).collect();
                self.accumulate(grads, *a, Tensor { shape: gout.shape.clone(), data });
            }
            Op::Relu(a) => {
                let data = zip_map(gout, self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                self.accumulate(grads, *a, Tensor { shape: gout.shape.clone(), data });
            }
            Op::Gelu(a) => {
                let data = zip_map(gout, self.value(*a), |g, x| g * gelu_grad(x));
                self.accumulate(grads, *a, Tensor { shape: gout.shape.clone(), data });
            }
            Op::Abs(a) => {
                let data = zip_map(gout, self.value(*a), |g, x| g * sign(x));
                self.accumulate(grads, *a, Tensor { shape: gout.shape.clone(), data });
            }
            Op::Transpose(a) => {
                let (r, c) = gout.dims2();
                let mut data = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        data[j * r + i] = gd[i * c + j];
                    }
                }
                self.accumulate(grads, *a, Tensor { shape: vec![c, r], data });
            }
            Op::Softmax(a) => {
                let (_, c) = gout.dims2();
                let y = node.value.data();
                let mut data = vec![0.0; y.len()];
                for ((drow, yrow), grow) in data.chunks_mut(c).zip(y.chunks(c)).zip(gd.chunks(c)) {
                    let s = dot(yrow, grow);
                    for j in 0..c {
                        drow[j] = yrow[j] * (grow[j] - s);
                    }
                }
                self.accumulate(grads, *a, Tensor { shape: gout.shape.clone(), data });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                rstd,
            } => {
                let (r, c) = gout.dims2();
                let g = self.value(*gamma).data();
                if self.needs(*gamma) {
                    let mut dg = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            dg[j] += gd[i * c + j] * normed[i * c + j];
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::row(dg));
                }
                if self.needs(*beta) {
                    let mut db = vec![0.0; c];
                    for chunk in gd.chunks(c) {
                        for (d, v) in db.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *beta, Tensor::row(db));
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let nrow = &normed[i * c..(i + 1) * c];
                        let dn: Vec<f64> = (0..c).map(|j| gd[i * c + j] * g[j]).collect();
                        let mean_dn = dn.iter().sum::<f64>() / c as f64;
                        let mean_dn_n = dot(&dn, nrow) / c as f64;
                        for j in 0..c {
                            dx[i * c + j] = rstd[i] * (dn[j] - mean_dn - nrow[j] * mean_dn_n);
                        }
                    }
                    self.accumulate(grads, *x, Tensor { shape: vec![r, c], data: dx });
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.needs(p) {
                        let t = Tensor {
                            shape: self.shape(p).to_vec(),
                            data: gd[offset..offset + n].to_vec(),
                        };
                        self.accumulate(grads, p, t);
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = gout.dims2();
                let mut start = 0;
                for &p in parts {
                    let (_, w) = self.value(p).dims2();
                    if self.needs(p) {
                        let mut data = Vec::with_capacity(r * w);
                        for i in 0..r {
                            data.extend_from_slice(&gd[i * total + start..i * total + start + w]);
                        }
                        self.accumulate(grads, p, Tensor { shape: vec![r, w], data });
                    }
                    start += w;
                }
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let (_, c) = src.dims2();
                let mut t = Tensor::zeros(src.shape());
                t.data[start * c..start * c + gd.len()].copy_from_slice(gd);
                self.accumulate(grads, *a, t);
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let (r, c) = src.dims2();
                let (_, len) = gout.dims2();
                let mut t = Tensor::zeros(src.shape());
                for i in 0..r {
                    t.data[i * c + start..i * c + start + len]
                        .copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                self.accumulate(grads, *a, t);
            }
            Op::MeanRows(a) => {
                let src = self.value(*a);
                let (r, c) = src.dims2();
                let mut data = Vec::with_capacity(r * c);
                for _ in 0..r {
                    data.extend(gd.iter().map(|g| g / r as f64));
                }
                self.accumulate(grads, *a, Tensor { shape: vec![r, c], data });
            }
            Op::MeanAll(a) => {
                let src = self.value(*a);
                let g = gd[0] / src.len() as f64;
                self.accumulate(grads, *a, Tensor::filled(src.shape(), g));
            }
            Op::Expand(a) => {
                self.accumulate(grads, *a, Tensor::scalar(gd.iter().sum()));
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let g = ConvGeom::new(xv.shape(), wv.shape(), *stride, *pad);
                if self.needs(*b) {
                    let ohw = g.oh * g.ow;
                    let db = gd.chunks(ohw).map(|ch| ch.iter().sum()).collect();
                    self.accumulate(grads, *b, Tensor { shape: vec![g.out_c], data: db });
                }
                let (dx, dw) = conv_backward(xv.data(), wv.data(), gd, &g, self.needs(*x), self.needs(*w));
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor { shape: xv.shape().to_vec(), data: dx });
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, Tensor { shape: wv.shape().to_vec(), data: dw });
                }
            }
            Op::GlobalAvgPool(a) => {
                let s = self.shape(*a);
                let hw = s[1] * s[2];
                let mut data = Vec::with_capacity(s[0] * hw);
                for g in gd {
                    data.extend(std::iter::repeat_n(g / hw as f64, hw));
                }
                self.accumulate(grads, *a, Tensor { shape: s.to_vec(), data });
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}

struct ConvGeom {
    in_c: usize,
    h: usize,
    w: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Self {
        let k = ws[2];
        Self {
            in_c: xs[0],
            h: xs[1],
            w: xs[2],
            out_c: ws[0],
            k,
            stride,
            pad,
            oh: (xs[1] + 2 * pad - k) / stride + 1,
            ow: (xs[2] + 2 * pad - k) / stride + 1,
        }
    }

    /// Input coordinate for output position `o` and kernel tap `t`, if it
    /// falls inside the unpadded input.
    #[inline]
    fn src(&self, o: usize, t: usize, limit: usize) -> Option<usize> {
        let p = (o * self.stride + t).checked_sub(self.pad)?;
        (p < limit).then_some(p)
    }
}

fn conv_forward(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ohw = g.oh * g.ow;
    let kk = g.k * g.k;
    let mut out = vec![0.0; g.out_c * ohw];
    for o in 0..g.out_c {
        let plane = &mut out[o * ohw..(o + 1) * ohw];
        plane.iter_mut().for_each(|v| *v = b[o]);
        for c in 0..g.in_c {
            let xin = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
            let wk = &w[(o * g.in_c + c) * kk..(o * g.in_c + c + 1) * kk];
            for oy in 0..g.oh {
                for ky in 0..g.k {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for ox in 0..g.ow {
                        let mut acc = 0.0;
                        for kx in 0..g.k {
                            if let Some(ix) = g.src(ox, kx, g.w) {
                                acc += wk[ky * g.k + kx] * xin[iy * g.w + ix];
                            }
                        }
                        plane[oy * g.ow + ox] += acc;
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let ohw = g.oh * g.ow;
    let kk = g.k * g.k;
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dw = want_dw.then(|| vec![0.0; w.len()]);
    for o in 0..g.out_c {
        let gplane = &gout[o * ohw..(o + 1) * ohw];
        for c in 0..g.in_c {
            let base = c * g.h * g.w;
            let wbase = (o * g.in_c + c) * kk;
            for oy in 0..g.oh {
                for ky in 0..g.k {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for ox in 0..g.ow {
                        let go = gplane[oy * g.ow + ox];
                        if go == 0.0 {
                            continue;
                        }
                        for kx in 0..g.k {
                            if let Some(ix) = g.src(ox, kx, g.w) {
                                let xi = base + iy * g.w + ix;
                                let wi = wbase + ky * g.k + kx;
                                if let Some(dw) = dw.as_mut() {
                                    dw[wi] += go * x[xi];
                                }
                                if let Some(dx) = dx.as_mut() {
                                    dx[xi] += go * w[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Central differences of `f` around `x`, perturbing every entry.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut plus = x.clone();
                plus.data[i] += h;
                let mut minus = x.clone();
                minus.data[i] -= h;
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64]) {
        for (x, y) in a.iter().zip(b) {
            let scale = x.abs().max(y.abs()).max(1e-3);
            assert!((x - y).abs() / scale < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn matmul_values() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.constant(t(&[2, 1], &[5., 6.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[17., 39.]);
        assert!(g.matmul(b, b).is_err());
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let x0 = t(&[2, 3], &[0.3, -0.2, 0.9, 0.1, 0.5, -0.7]);
        let w0 = t(&[3, 3], &[0.2, -0.1, 0.4, 0.3, 0.8, -0.5, -0.6, 0.1, 0.2]);
        let gam = t(&[1, 3], &[1.1, 0.9, 1.3]);
        let bet = t(&[1, 3], &[0.1, -0.2, 0.05]);

        let run = |x: &Tensor, w: &Tensor, grad: bool| -> (f64, Option<(Vec<f64>, Vec<f64>)>) {
            let mut g = Graph::new();
            let xv = g.variable(x.clone());
            let wv = g.variable(w.clone());
            let gv = g.constant(gam.clone());
            let bv = g.constant(bet.clone());
            let h = g.matmul(xv, wv).unwrap();
            let h = g.layer_norm(h, gv, bv).unwrap();
            let s = g.softmax(h).unwrap();
            let ht = g.transpose(h).unwrap();
            let q = g.matmul(s, ht).unwrap();
            let q = g.gelu(q);
            let m = g.mean_rows(q).unwrap();
            let m = g.abs(m);
            let loss = g.mean_all(m);
            let out = g.value(loss).data()[0];
            if grad {
                let gr = g.backward(loss).unwrap();
                (
                    out,
                    Some((
                        gr.get(xv).unwrap().data().to_vec(),
                        gr.get(wv).unwrap().data().to_vec(),
                    )),
                )
            } else {
                (out, None)
            }
        };
        let (_, grads) = run(&x0, &w0, true);
        let (gx, gw) = grads.unwrap();
        assert_close(&gx, &numeric_grad(&x0, &|x| run(x, &w0, false).0));
        assert_close(&gw, &numeric_grad(&w0, &|w| run(&x0, w, false).0));
    }

    #[test]
    fn conv_gradient_matches_finite_differences() {
        let x0 = t(&[2, 5, 4], &(0..40).map(|i| ((i * 7 % 11) as f64 - 5.0) / 7.0).collect::<Vec<_>>());
        let w0 = t(&[3, 2, 3, 3], &(0..54).map(|i| ((i * 5 % 13) as f64 - 6.0) / 10.0).collect::<Vec<_>>());
        let b0 = t(&[3], &[0.1, -0.3, 0.2]);
        let run = |x: &Tensor, w: &Tensor, b: &Tensor| -> (f64, [Vec<f64>; 3]) {
            let mut g = Graph::new();
            let xv = g.variable(x.clone());
            let wv = g.variable(w.clone());
            let bv = g.variable(b.clone());
            let y = g.conv2d(xv, wv, bv, 2, 1).unwrap();
            let y = g.gelu(y);
            let p = g.global_avg_pool(y).unwrap();
            let l = g.mean_all(p);
            let gr = g.backward(l).unwrap();
            (
                g.value(l).data()[0],
                [
                    gr.get(xv).unwrap().data().to_vec(),
                    gr.get(wv).unwrap().data().to_vec(),
                    gr.get(bv).unwrap().data().to_vec(),
                ],
            )
        };
        let (_, [gx, gw, gb]) = run(&x0, &w0, &b0);
        assert_close(&gx, &numeric_grad(&x0, &|x| run(x, &w0, &b0).0));
        assert_close(&gw, &numeric_grad(&w0, &|w| run(&x0, w, &b0).0));
        assert_close(&gb, &numeric_grad(&b0, &|b| run(&x0, &w0, b).0));
    }

    #[test]
    fn conv_output_shape() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 32, 32]));
        let w = g.constant(Tensor::zeros(&[8, 3, 3, 3]));
        let b = g.constant(Tensor::zeros(&[8]));
        let y = g.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[8, 16, 16]);
    }

    #[test]
    fn slicing_and_concat_roundtrip_gradients() {
        let x0 = t(&[3, 4], &(0..12).map(|i| i as f64 * 0.1 - 0.5).collect::<Vec<_>>());
        let run = |x: &Tensor| -> (f64, Vec<f64>) {
            let mut g = Graph::new();
            let xv = g.variable(x.clone());
            let a = g.slice_cols(xv, 0, 2).unwrap();
            let b = g.slice_cols(xv, 2, 2).unwrap();
            let ab = g.mul(a, b).unwrap();
            let c = g.concat_cols(&[ab, a]).unwrap();
            let r0 = g.slice_rows(c, 0, 1).unwrap();
            let r2 = g.slice_rows(c, 2, 1).unwrap();
            let s = g.sub(r0, r2).unwrap();
            let e = g.slice_cols(s, 1, 1).unwrap();
            let e = g.expand(e, 3).unwrap();
            let cat = g.concat_rows(&[e, e]).unwrap();
            let sq = g.mul(cat, cat).unwrap();
            let l = g.mean_all(sq);
            let gr = g.backward(l).unwrap();
            (g.value(l).data()[0], gr.get(xv).unwrap().data().to_vec())
        };
        let (_, gx) = run(&x0);
        assert_close(&gx, &numeric_grad(&x0, &|x| run(x).0));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(2.0));
        let b = g.variable(Tensor::scalar(3.0));
        let c = g.mul(a, b).unwrap();
        let gr = g.backward(c).unwrap();
        assert!(gr.get(a).is_none());
        assert_eq!(gr.get(b).unwrap().data(), &[2.0]);
    }
}
