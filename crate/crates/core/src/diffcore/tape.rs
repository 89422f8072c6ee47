//! Define-by-run computation tape with reverse-mode gradients.
//!
//! A [`Tape`] owns every tensor produced during one forward pass. Operations
//! append nodes; [`Tape::backward`] walks the nodes in reverse and accumulates
//! adjoints into the leaves that were created with `requires_grad = true`.
//! The tape is rebuilt from scratch for every training step.

use super::kernels;
use super::tensor::Tensor;
use super::DiffError;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum OpRecord {
    Leaf,
    Matmul { a: usize, b: usize },
    /// `broadcast` marks a last-dim bias add (rhs rank 1).
    Add { a: usize, b: usize, broadcast: bool },
    Scale { x: usize, c: f64 },
    SoftmaxLastDim { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize },
    Gelu { x: usize },
    Relu { x: usize },
    Sigmoid { x: usize },
    ConcatLastDim { xs: Vec<usize> },
    BilinearSample2d { grid: usize, coords: usize },
    Transpose2d { x: usize },
    Mean { x: usize },
    Bce { logits: usize, targets: usize },
    Conv2d { x: usize, w: usize, b: usize, ksize: usize },
    UpsampleNearest2x { x: usize },
    Reshape { x: usize },
}

struct Node {
    tensor: Tensor,
    op: OpRecord,
    /// True when this node's value depends on a grad-requiring leaf.
    needs_grad: bool,
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

    /// Register an input tensor. Gradients are written back into the node's
    /// tensor when `t.requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad;
        self.push(t, OpRecord::Leaf, needs)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    /// Gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    fn push(&mut self, tensor: Tensor, op: OpRecord, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            tensor,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].tensor.data()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    fn mismatch(&self, op: &'static str, vars: &[Var]) -> DiffError {
        DiffError::ShapeMismatch {
            op,
            shapes: vars.iter().map(|v| self.shape(*v).to_vec()).collect(),
        }
    }

    // ── Operations ──────────────────────────────────────────────────

    /// 2-D matrix product (m x k) * (k x n).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch("matmul", &[a, b]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::gemm(self.data(a), self.data(b), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, OpRecord::Matmul { a: a.0, b: b.0 }, needs))
    }

    /// Elementwise add; `b` may also be a rank-1 vector matching the last dim
    /// of `a` (row-broadcast bias).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let broadcast = sa != sb;
        if broadcast && !(sb.len() == 1 && sb[0] == *sa.last().unwrap()) {
            return Err(self.mismatch("add", &[a, b]));
        }
        let (da, db) = (self.data(a), self.data(b));
        let last = *sa.last().unwrap();
        let mut out = da.to_vec();
        if broadcast {
            for (i, o) in out.iter_mut().enumerate() {
                *o += db[i % last];
            }
        } else {
            for (o, v) in out.iter_mut().zip(db) {
                *o += v;
            }
        }
        let t = Tensor::new(sa, out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, OpRecord::Add { a: a.0, b: b.0, broadcast }, needs))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.data(x).iter().map(|v| v * c).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        let needs = self.needs(x);
        self.push(t, OpRecord::Scale { x: x.0, c }, needs)
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let last = self.nodes[x.0].tensor.last_dim();
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(last) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        let needs = self.needs(x);
        self.push(t, OpRecord::SoftmaxLastDim { x: x.0 }, needs)
    }

    /// Layer normalization over the last dim with learned gain/bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, DiffError> {
        let last = self.nodes[x.0].tensor.last_dim();
        let (sg, sb) = (self.shape(gamma), self.shape(beta));
        if sg != [last] || sb != [last] {
            return Err(self.mismatch("layer_norm", &[x, gamma, beta]));
        }
        let (dx, dg, db) = (self.data(x), self.data(gamma), self.data(beta));
        let mut out = vec![0.0; dx.len()];
        for (r, row) in dx.chunks(last).enumerate() {
            let mean = row.iter().sum::<f64>() / last as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / last as f64;
            let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..last {
                out[r * last + j] = (row[j] - mean) * inv_std * dg[j] + db[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            t,
            OpRecord::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0 },
            needs,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.data(x).iter().map(|&v| kernels::gelu(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        let needs = self.needs(x);
        self.push(t, OpRecord::Gelu { x: x.0 }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        let needs = self.needs(x);
        self.push(t, OpRecord::Relu { x: x.0 }, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.data(x).iter().map(|&v| kernels::sigmoid(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        let needs = self.needs(x);
        self.push(t, OpRecord::Sigmoid { x: x.0 }, needs)
    }

    /// Concatenate along the last dim; all leading dims must match.
    pub fn concat_lastdim(&mut self, xs: &[Var]) -> Result<Var, DiffError> {
        if xs.is_empty() {
            return Err(DiffError::ShapeMismatch { op: "concat_lastdim", shapes: vec![] });
        }
        let lead: Vec<usize> = {
            let s = self.shape(xs[0]);
            s[..s.len() - 1].to_vec()
        };
        let mut total_last = 0;
        for &v in xs {
            let s = self.shape(v);
            if s[..s.len() - 1] != lead[..] {
                return Err(self.mismatch("concat_lastdim", xs));
            }
            total_last += *s.last().unwrap();
        }
        let rows: usize = lead.iter().product();
        let mut out = vec![0.0; rows * total_last];
        let mut offset = 0;
        for &v in xs {
            let last = self.nodes[v.0].tensor.last_dim();
            let d = self.data(v);
            for r in 0..rows {
                out[r * total_last + offset..r * total_last + offset + last]
                    .copy_from_slice(&d[r * last..(r + 1) * last]);
            }
            offset += last;
        }
        let mut shape = lead;
        shape.push(total_last);
        let t = Tensor::new(shape, out)?;
        let needs = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            t,
            OpRecord::ConcatLastDim { xs: xs.iter().map(|v| v.0).collect() },
            needs,
        ))
    }

    /// Sample a (C x H x W) grid at N normalized (x, y) coordinates in
    /// [-1, 1]^2, align-corners convention: -1 maps to index 0 and +1 to the
    /// last index. Output is (N x C).
    pub fn bilinear_sample_2d(&mut self, grid: Var, coords: Var) -> Result<Var, DiffError> {
        let sg = self.shape(grid).to_vec();
        let sc = self.shape(coords).to_vec();
        if sg.len() != 3 || sc.len() != 2 || sc[1] != 2 {
            return Err(self.mismatch("bilinear_sample_2d", &[grid, coords]));
        }
        let (c, h, w) = (sg[0], sg[1], sg[2]);
        let n = sc[0];
        let dc = self.data(coords);
        for i in 0..n {
            let (x, y) = (dc[2 * i], dc[2 * i + 1]);
            if !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&x) || !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&y)
            {
                return Err(DiffError::CoordOutOfRange { index: i, x, y });
            }
        }
        let dg = self.data(grid);
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let (x, y) = (dc[2 * i].clamp(-1.0, 1.0), dc[2 * i + 1].clamp(-1.0, 1.0));
            let (x0, x1, wx, y0, y1, wy) = bilinear_cell(x, y, w, h);
            for ch in 0..c {
                let base = ch * h * w;
                let v00 = dg[base + y0 * w + x0];
                let v01 = dg[base + y0 * w + x1];
                let v10 = dg[base + y1 * w + x0];
                let v11 = dg[base + y1 * w + x1];
                out[i * c + ch] = v00 * (1.0 - wx) * (1.0 - wy)
                    + v01 * wx * (1.0 - wy)
                    + v10 * (1.0 - wx) * wy
                    + v11 * wx * wy;
            }
        }
        let t = Tensor::new(vec![n, c], out)?;
        let needs = self.needs(grid) || self.needs(coords);
        Ok(self.push(
            t,
            OpRecord::BilinearSample2d { grid: grid.0, coords: coords.0 },
            needs,
        ))
    }

    pub fn transpose_2d(&mut self, x: Var) -> Result<Var, DiffError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(self.mismatch("transpose_2d", &[x]));
        }
        let (m, n) = (s[0], s[1]);
        let d = self.data(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        let needs = self.needs(x);
        Ok(self.push(t, OpRecord::Transpose2d { x: x.0 }, needs))
    }

    /// Mean over all elements, producing a scalar (shape [1]).
    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let needs = self.needs(x);
        self.push(Tensor::scalar(m), OpRecord::Mean { x: x.0 }, needs)
    }

    /// Elementwise binary cross-entropy computed from logits; `targets` holds
    /// 0/1 labels and never receives gradients.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Var) -> Result<Var, DiffError> {
        if self.shape(logits) != self.shape(targets) {
            return Err(self.mismatch("bce", &[logits, targets]));
        }
        let out: Vec<f64> = self
            .data(logits)
            .iter()
            .zip(self.data(targets))
            .map(|(&z, &y)| kernels::bce_with_logit(z, y))
            .collect();
        let t = Tensor::new(self.shape(logits).to_vec(), out)?;
        let needs = self.needs(logits);
        Ok(self.push(t, OpRecord::Bce { logits: logits.0, targets: targets.0 }, needs))
    }

    /// Stride-1 square convolution with zero padding `ksize / 2`.
    /// x: (C_in x H x W), w: (C_out x C_in x k x k), b: (C_out).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, ksize: usize) -> Result<Var, DiffError> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let sb = self.shape(b).to_vec();
        if sx.len() != 3
            || sw.len() != 4
            || sw[1] != sx[0]
            || sw[2] != ksize
            || sw[3] != ksize
            || sb != [sw[0]]
            || ksize % 2 != 1
        {
            return Err(self.mismatch("conv2d", &[x, w, b]));
        }
        let (c_in, h, wd) = (sx[0], sx[1], sx[2]);
        let c_out = sw[0];
        let cols = kernels::im2col(self.data(x), c_in, h, wd, ksize);
        // (C_out x C_in*k*k) * (C_in*k*k x H*W)
        let mut out = kernels::gemm(self.data(w), &cols, c_out, c_in * ksize * ksize, h * wd);
        let db = self.data(b);
        for ch in 0..c_out {
            let bias = db[ch];
            for v in out[ch * h * wd..(ch + 1) * h * wd].iter_mut() {
                *v += bias;
            }
        }
        let t = Tensor::new(vec![c_out, h, wd], out)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(t, OpRecord::Conv2d { x: x.0, w: w.0, b: b.0, ksize }, needs))
    }

    /// Nearest-neighbour 2x spatial upsample of a (C x H x W) map.
    pub fn upsample_nearest_2x(&mut self, x: Var) -> Result<Var, DiffError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(self.mismatch("upsample_nearest_2x", &[x]));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let d = self.data(x);
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xx] = d[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let t = Tensor::new(vec![c, 2 * h, 2 * w], out)?;
        let needs = self.needs(x);
        Ok(self.push(t, OpRecord::UpsampleNearest2x { x: x.0 }, needs))
    }

    /// Row-major reinterpretation; element count must be preserved.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, DiffError> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].tensor.numel() {
            return Err(self.mismatch("reshape", &[x]));
        }
        let t = Tensor::new(shape, self.data(x).to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(t, OpRecord::Reshape { x: x.0 }, needs))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates `grad` on every
    /// grad-requiring leaf at or below `loss`; leaves not reachable from the
    /// loss end up with a zero gradient buffer.
    pub fn backward(&mut self, loss: Var) -> Result<(), DiffError> {
        if self.nodes[loss.0].tensor.numel() != 1 {
            return Err(DiffError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            adj[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(gout) = adj[i].take() else { continue };
            self.propagate(i, &gout, &mut adj);
            if self.nodes[i].tensor.requires_grad {
                self.nodes[i].tensor.accumulate_grad(&gout);
            }
        }
        // Unreached grad-requiring leaves get explicit zeros.
        for node in &mut self.nodes {
            if node.tensor.requires_grad && node.tensor.grad.is_none() {
                node.tensor.accumulate_grad(&vec![0.0; node.tensor.numel()]);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gout: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let add_to = |adj: &mut [Option<Vec<f64>>], idx: usize, delta: &[f64], nodes: &[Node]| {
            if !nodes[idx].needs_grad {
                return;
            }
            let buf = adj[idx].get_or_insert_with(|| vec![0.0; nodes[idx].tensor.numel()]);
            for (b, d) in buf.iter_mut().zip(delta) {
                *b += d;
            }
        };
        match &self.nodes[i].op {
            OpRecord::Leaf => {}
            OpRecord::Matmul { a, b } => {
                let sa = self.nodes[*a].tensor.shape();
                let sb = self.nodes[*b].tensor.shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[*a].needs_grad {
                    // dA = dC * B^T
                    let da = kernels::gemm_a_bt(gout, self.nodes[*b].tensor.data(), m, n, k);
                    add_to(adj, *a, &da, &self.nodes);
                }
                if self.nodes[*b].needs_grad {
                    // dB = A^T * dC
                    let db = kernels::gemm_at_b(self.nodes[*a].tensor.data(), gout, k, m, n);
                    add_to(adj, *b, &db, &self.nodes);
                }
            }
            OpRecord::Add { a, b, broadcast } => {
                add_to(adj, *a, gout, &self.nodes);
                if self.nodes[*b].needs_grad {
                    if *broadcast {
                        let last = self.nodes[*b].tensor.numel();
                        let mut db = vec![0.0; last];
                        for (j, g) in gout.iter().enumerate() {
                            db[j % last] += g;
                        }
                        add_to(adj, *b, &db, &self.nodes);
                    } else {
                        add_to(adj, *b, gout, &self.nodes);
                    }
                }
            }
            OpRecord::Scale { x, c } => {
                let dx: Vec<f64> = gout.iter().map(|g| g * c).collect();
                add_to(adj, *x, &dx, &self.nodes);
            }
            OpRecord::SoftmaxLastDim { x } => {
                let p = self.nodes[i].tensor.data();
                let last = self.nodes[i].tensor.last_dim();
                let mut dx = vec![0.0; p.len()];
                for r in 0..p.len() / last {
                    let row = &p[r * last..(r + 1) * last];
                    let grow = &gout[r * last..(r + 1) * last];
                    let dot: f64 = row.iter().zip(grow).map(|(pi, gi)| pi * gi).sum();
                    for j in 0..last {
                        dx[r * last + j] = row[j] * (grow[j] - dot);
                    }
                }
                add_to(adj, *x, &dx, &self.nodes);
            }
            OpRecord::LayerNorm { x, gamma, beta } => {
                let dx_in = self.nodes[*x].tensor.data();
                let dg = self.nodes[*gamma].tensor.data();
                let last = self.nodes[*x].tensor.last_dim();
                let rows = dx_in.len() / last;
                let mut grad_x = vec![0.0; dx_in.len()];
                let mut grad_g = vec![0.0; last];
                let mut grad_b = vec![0.0; last];
                for r in 0..rows {
                    let row = &dx_in[r * last..(r + 1) * last];
                    let go = &gout[r * last..(r + 1) * last];
                    let mean = row.iter().sum::<f64>() / last as f64;
                    let var =
                        row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / last as f64;
                    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                    let gxhat: Vec<f64> = go.iter().zip(dg).map(|(g, gm)| g * gm).collect();
                    let mean_g = gxhat.iter().sum::<f64>() / last as f64;
                    let mean_gx = gxhat.iter().zip(&xhat).map(|(g, xh)| g * xh).sum::<f64>()
                        / last as f64;
                    for j in 0..last {
                        grad_x[r * last + j] =
                            inv_std * (gxhat[j] - mean_g - xhat[j] * mean_gx);
                        grad_g[j] += go[j] * xhat[j];
                        grad_b[j] += go[j];
                    }
                }
                add_to(adj, *x, &grad_x, &self.nodes);
                add_to(adj, *gamma, &grad_g, &self.nodes);
                add_to(adj, *beta, &grad_b, &self.nodes);
            }
            OpRecord::Gelu { x } => {
                let din = self.nodes[*x].tensor.data();
                let dx: Vec<f64> = din
                    .iter()
                    .zip(gout)
                    .map(|(&v, g)| g * kernels::gelu_grad(v))
                    .collect();
                add_to(adj, *x, &dx, &self.nodes);
            }
            OpRecord::Relu { x } => {
                let din = self.nodes[*x].tensor.data();
                let dx: Vec<f64> = din
                    .iter()
                    .zip(gout)
                    .map(|(&v, g)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                add_to(adj, *x, &dx, &self.nodes);
            }
            OpRecord::Sigmoid { x } => {
                let s = self.nodes[i].tensor.data();
                let dx: Vec<f64> = s.iter().zip(gout).map(|(&s, g)| g * s * (1.0 - s)).collect();
                add_to(adj, *x, &dx, &self.nodes);
            }
            OpRecord::ConcatLastDim { xs } => {
                let total_last = self.nodes[i].tensor.last_dim();
                let rows = self.nodes[i].tensor.numel() / total_last;
                let mut offset = 0;
                for &xi in xs {
                    let last = self.nodes[xi].tensor.last_dim();
                    if self.nodes[xi].needs_grad {
                        let mut dx = vec![0.0; rows * last];
                        for r in 0..rows {
                            dx[r * last..(r + 1) * last].copy_from_slice(
                                &gout[r * total_last + offset..r * total_last + offset + last],
                            );
                        }
                        add_to(adj, xi, &dx, &self.nodes);
                    }
                    offset += last;
                }
            }
            OpRecord::BilinearSample2d { grid, coords } => {
                let sg = self.nodes[*grid].tensor.shape();
                let (c, h, w) = (sg[0], sg[1], sg[2]);
                let dc = self.nodes[*coords].tensor.data();
                let dg = self.nodes[*grid].tensor.data();
                let n = self.nodes[*coords].tensor.shape()[0];
                let mut grad_grid = vec![0.0; c * h * w];
                let mut grad_coords = vec![0.0; n * 2];
                for p in 0..n {
                    let (x, y) = (dc[2 * p].clamp(-1.0, 1.0), dc[2 * p + 1].clamp(-1.0, 1.0));
                    let (x0, x1, wx, y0, y1, wy) = bilinear_cell(x, y, w, h);
                    // d(index)/d(normalized coord), align-corners
                    let du_dx = (w - 1) as f64 / 2.0;
                    let dv_dy = (h - 1) as f64 / 2.0;
                    for ch in 0..c {
                        let g = gout[p * c + ch];
                        let base = ch * h * w;
                        grad_grid[base + y0 * w + x0] += g * (1.0 - wx) * (1.0 - wy);
                        grad_grid[base + y0 * w + x1] += g * wx * (1.0 - wy);
                        grad_grid[base + y1 * w + x0] += g * (1.0 - wx) * wy;
                        grad_grid[base + y1 * w + x1] += g * wx * wy;
                        let v00 = dg[base + y0 * w + x0];
                        let v01 = dg[base + y0 * w + x1];
                        let v10 = dg[base + y1 * w + x0];
                        let v11 = dg[base + y1 * w + x1];
                        let dval_dwx = (v01 - v00) * (1.0 - wy) + (v11 - v10) * wy;
                        let dval_dwy = (v10 - v00) * (1.0 - wx) + (v11 - v01) * wx;
                        grad_coords[2 * p] += g * dval_dwx * du_dx;
                        grad_coords[2 * p + 1] += g * dval_dwy * dv_dy;
                    }
                }
                add_to(adj, *grid, &grad_grid, &self.nodes);
                add_to(adj, *coords, &grad_coords, &self.nodes);
            }
            OpRecord::Transpose2d { x } => {
                let s = self.nodes[i].tensor.shape(); // (n, m)
                let (n, m) = (s[0], s[1]);
                let mut dx = vec![0.0; m * n];
                for r in 0..n {
                    for cidx in 0..m {
                        dx[cidx * n + r] = gout[r * m + cidx];
                    }
                }
                add_to(adj, *x, &dx, &self.nodes);
            }
            OpRecord::Mean { x } => {
                let numel = self.nodes[*x].tensor.numel();
                let g = gout[0] / numel as f64;
                let dx = vec![g; numel];
                add_to(adj, *x, &dx, &self.nodes);
            }
            OpRecord::Bce { logits, targets } => {
                let z = self.nodes[*logits].tensor.data();
                let y = self.nodes[*targets].tensor.data();
                let dx: Vec<f64> = z
                    .iter()
                    .zip(y)
                    .zip(gout)
                    .map(|((&z, &y), g)| g * (kernels::sigmoid(z) - y))
                    .collect();
                add_to(adj, *logits, &dx, &self.nodes);
            }
            OpRecord::Conv2d { x, w, b, ksize } => {
                let sx = self.nodes[*x].tensor.shape();
                let sw = self.nodes[*w].tensor.shape();
                let (c_in, h, wd) = (sx[0], sx[1], sx[2]);
                let c_out = sw[0];
                let k2 = c_in * ksize * ksize;
                if self.nodes[*w].needs_grad {
                    // dW = dOut (C_out x HW) * cols^T (HW x C_in*k*k)
                    let cols = kernels::im2col(self.nodes[*x].tensor.data(), c_in, h, wd, *ksize);
                    let dw = kernels::gemm_a_bt(gout, &cols, c_out, h * wd, k2);
                    add_to(adj, *w, &dw, &self.nodes);
                }
                if self.nodes[*b].needs_grad {
                    let mut dbias = vec![0.0; c_out];
                    for ch in 0..c_out {
                        dbias[ch] = gout[ch * h * wd..(ch + 1) * h * wd].iter().sum();
                    }
                    add_to(adj, *b, &dbias, &self.nodes);
                }
                if self.nodes[*x].needs_grad {
                    // dcols = W^T (k2 x C_out) * dOut (C_out x HW), then fold back.
                    let dcols =
                        kernels::gemm_at_b(self.nodes[*w].tensor.data(), gout, k2, c_out, h * wd);
                    let dx = kernels::col2im(&dcols, c_in, h, wd, *ksize);
                    add_to(adj, *x, &dx, &self.nodes);
                }
            }
            OpRecord::UpsampleNearest2x { x } => {
                let s = self.nodes[*x].tensor.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dx[(ch * h + y / 2) * w + xx / 2] +=
                                gout[(ch * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                add_to(adj, *x, &dx, &self.nodes);
            }
            OpRecord::Reshape { x } => {
                add_to(adj, *x, gout, &self.nodes);
            }
        }
    }
}

/// Cell indices and fractional weights for align-corners bilinear sampling.
fn bilinear_cell(x: f64, y: f64, w: usize, h: usize) -> (usize, usize, f64, usize, usize, f64) {
    let u = (x + 1.0) / 2.0 * (w - 1) as f64;
    let v = (y + 1.0) / 2.0 * (h - 1) as f64;
    let x0 = (u.floor() as usize).min(w - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y0 = (v.floor() as usize).min(h - 1);
    let y1 = (y0 + 1).min(h - 1);
    (x0, x1, u - x0 as f64, y0, y1, v - y0 as f64)
}
