//! A small reverse-mode tape over f64 matrices, with exactly the operations
//! a mixer block needs.
//!
//! Batches are stacked along rows: `B` sequences of length `L` form a
//! `[B·L × C]` matrix, and the sequence-aware ops (reversal, causal conv,
//! scan, cosine loss) work segment by segment.

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn row_vec(data: Vec<f64>) -> Self {
        Self::from_vec(1, data.len(), data)
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }

    fn same_shape(&self, o: &Mat) -> bool {
        self.rows == o.rows && self.cols == o.cols
    }

    fn add_assign(&mut self, o: &Mat) {
        debug_assert!(self.same_shape(o));
        for (a, b) in self.data.iter_mut().zip(&o.data) {
            *a += b;
        }
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    /// Position on the tape; indexes the vector returned by [`Tape::backward`].
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-row quantizer settings of a [`Tape::quant_input`] node.
#[derive(Debug, Clone)]
pub struct QuantSpec {
    pub eps: Vec<i32>,
    pub qmax: i32,
    /// Rows per sequence; row `r` uses parameter group `r % seg`.
    pub seg: usize,
    /// `true` when every row shares group 0 (per-tensor).
    pub shared: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Clip {
    In,
    Low,
    High,
}

enum Op {
    Leaf,
    QuantInput {
        x: Var,
        s: Var,
        dx: Var,
        spec: QuantSpec,
        // u = x / s, the rounding residual and the clip state per element.
        u: Vec<f64>,
        resid: Vec<f64>,
        clip: Vec<Clip>,
    },
    QLinear {
        x: Var,
        dw: Var,
        w: Mat,
        z: Mat,
    },
    Linear {
        x: Var,
        w: Mat,
    },
    AddRow {
        x: Var,
    },
    MulRow {
        x: Var,
        row: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
        cols: usize,
    },
    Silu {
        x: Var,
    },
    Softplus {
        x: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        k: f64,
    },
    Reverse {
        x: Var,
        seg: usize,
    },
    Conv {
        x: Var,
        w: Mat,
        seg: usize,
    },
    Scan {
        u: Var,
        dt: Var,
        b: Var,
        c: Var,
        a: Mat,
        d: Option<Vec<f64>>,
        seg: usize,
        states: Vec<f64>,
    },
    Cosine {
        x: Var,
        target: Mat,
        seg: usize,
    },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Rounding residuals and clip states of every quantizer node, in tape
/// order. Replaying them turns the fake-quant graph into the smooth
/// straight-through surrogate `x̂ = u + Δ·r` (`r` held fixed), whose exact
/// gradient is the one [`Tape::backward`] returns at the recording point.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Rounding {
    nodes: Vec<(Vec<f64>, Vec<Clip>)>,
}

impl Rounding {
    /// Smallest distance of any in-range element to a rounding tie, in
    /// units of its step size (0.5 means every value sat on a code).
    pub fn min_margin(&self) -> f64 {
        self.nodes
            .iter()
            .flat_map(|(r, c)| r.iter().zip(c).filter(|(_, c)| **c == Clip::In).map(|(r, _)| 0.5 - r.abs()))
            .fold(0.5, f64::min)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    frozen: Option<Rounding>,
    quant_seen: usize,
}

fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose quantizer nodes replay `at` instead of rounding.
    pub fn frozen(at: Rounding) -> Self {
        Self {
            frozen: Some(at),
            ..Self::default()
        }
    }

    /// Rounding state of the quantizer nodes recorded so far.
    pub fn rounding(&self) -> Rounding {
        let nodes = self
            .nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::QuantInput { resid, clip, .. } => Some((resid.clone(), clip.clone())),
                _ => None,
            })
            .collect();
        Rounding { nodes }
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A constant or a trainable parameter.
    pub fn leaf(&mut self, value: Mat, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    /// Smoothing divide and fake quantization: `x̂ = Δ·(clip(round(u/Δ)+ε) − ε)`
    /// with `u = x / s`. Gradients follow the straight-through convention.
    pub fn quant_input(&mut self, x: Var, s: Var, dx: Var, spec: QuantSpec) -> Var {
        let qi = self.quant_seen;
        self.quant_seen += 1;
        let xv = self.value(x);
        let sv = &self.value(s).data;
        let dv = &self.value(dx).data;
        let (rows, cols) = (xv.rows, xv.cols);
        let mut out = Mat::zeros(rows, cols);
        let mut u = vec![0.0; rows * cols];
        let mut resid = vec![0.0; rows * cols];
        let mut clip = vec![Clip::In; rows * cols];
        let replay = self.frozen.as_ref().map(|f| &f.nodes[qi]);
        if let Some((r0, _)) = replay {
            assert_eq!(r0.len(), rows * cols, "replayed rounding does not match the graph");
        }
        for r in 0..rows {
            let g = if spec.shared { 0 } else { r % spec.seg };
            let (d, e) = (dv[g], spec.eps[g]);
            for c in 0..cols {
                let k = r * cols + c;
                let uv = xv.data[k] / sv[c];
                let t = uv / d;
                u[k] = uv;
                if let Some((r0, c0)) = replay {
                    clip[k] = c0[k];
                    resid[k] = r0[k];
                    out.data[k] = match c0[k] {
                        Clip::Low => -d * e as f64,
                        Clip::High => d * (spec.qmax - e) as f64,
                        Clip::In => d * (t + r0[k]),
                    };
                    continue;
                }
                let code = t.round() + e as f64;
                if code < 0.0 {
                    clip[k] = Clip::Low;
                    out.data[k] = -d * e as f64;
                } else if code > spec.qmax as f64 {
                    clip[k] = Clip::High;
                    out.data[k] = d * (spec.qmax - e) as f64;
                } else {
                    resid[k] = t.round() - t;
                    out.data[k] = d * t.round();
                }
            }
        }
        self.push(
            out,
            Op::QuantInput {
                x,
                s,
                dx,
                spec,
                u,
                resid,
                clip,
            },
            &[x, s, dx],
        )
    }

    /// `y = x · (diag(dw)·W̄)ᵀ` with frozen codes `w: [out × in]`.
    pub fn qlinear(&mut self, x: Var, dw: Var, w: Mat) -> Var {
        let z = matmul_nt(self.value(x), &w);
        let d = &self.value(dw).data;
        let mut y = z.clone();
        for r in 0..y.rows {
            for o in 0..y.cols {
                *y.at_mut(r, o) *= d[o];
            }
        }
        self.push(y, Op::QLinear { x, dw, w, z }, &[x, dw])
    }

    /// `y = x · wᵀ` with a constant weight.
    pub fn linear(&mut self, x: Var, w: Mat) -> Var {
        let y = matmul_nt(self.value(x), &w);
        self.push(y, Op::Linear { x, w }, &[x])
    }

    /// Adds a constant row vector to every row.
    pub fn add_row(&mut self, x: Var, row: &[f64]) -> Var {
        let mut y = self.value(x).clone();
        for r in 0..y.rows {
            for (c, b) in row.iter().enumerate() {
                *y.at_mut(r, c) += b;
            }
        }
        self.push(y, Op::AddRow { x }, &[x])
    }

    /// Multiplies every row elementwise by a constant `row`.
    pub fn mul_row(&mut self, x: Var, row: &[f64]) -> Var {
        let xv = self.value(x);
        let y = Mat::from_vec(
            xv.rows,
            xv.cols,
            xv.data.iter().enumerate().map(|(i, v)| v * row[i % xv.cols]).collect(),
        );
        self.push(y, Op::MulRow { x, row: row.to_vec() }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, cols: usize) -> Var {
        let xv = self.value(x);
        let mut y = Mat::zeros(xv.rows, cols);
        for r in 0..xv.rows {
            for c in 0..cols {
                *y.at_mut(r, c) = xv.at(r, start + c);
            }
        }
        self.push(y, Op::SliceCols { x, start, cols }, &[x])
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Mat {
        let xv = self.value(x);
        Mat::from_vec(xv.rows, xv.cols, xv.data.iter().map(|&v| f(v)).collect())
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let y = self.map(x, silu);
        self.push(y, Op::Silu { x }, &[x])
    }

    /// Softplus floored at the smallest positive f32, as in the model.
    pub fn softplus(&mut self, x: Var) -> Var {
        let y = self.map(x, |v| softplus(v).max(f32::MIN_POSITIVE as f64));
        self.push(y, Op::Softplus { x }, &[x])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(av.same_shape(bv));
        let y = Mat::from_vec(av.rows, av.cols, av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect());
        self.push(y, Op::Mul { a, b }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        self.push(y, Op::Add { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let y = self.map(x, |v| v * k);
        self.push(y, Op::Scale { x, k }, &[x])
    }

    /// Reverses the row order inside every segment of `seg` rows.
    pub fn reverse(&mut self, x: Var, seg: usize) -> Var {
        let y = reverse_segments(self.value(x), seg);
        self.push(y, Op::Reverse { x, seg }, &[x])
    }

    /// Causal depthwise conv (`w: [C × width]`) without bias; bias goes
    /// through [`Tape::add_row`].
    pub fn conv(&mut self, x: Var, w: Mat, seg: usize) -> Var {
        let xv = self.value(x);
        let (rows, c) = (xv.rows, xv.cols);
        let k = w.cols;
        let mut y = Mat::zeros(rows, c);
        for r in 0..rows {
            let t = r % seg;
            for j in 0..k {
                let back = k - 1 - j;
                if t < back {
                    continue;
                }
                for ch in 0..c {
                    *y.at_mut(r, ch) += w.at(ch, j) * xv.at(r - back, ch);
                }
            }
        }
        self.push(y, Op::Conv { x, w, seg }, &[x])
    }

    /// Selective scan with `B̄ = Δ̄·B`, `h₀ = 0` at every segment start.
    #[allow(clippy::too_many_arguments)]
    pub fn scan(&mut self, u: Var, dt: Var, b: Var, c: Var, a: Mat, d: Option<Vec<f64>>, seg: usize) -> Var {
        let (uv, dtv, bv, cv) = (self.value(u), self.value(dt), self.value(b), self.value(c));
        let (rows, e) = (uv.rows, uv.cols);
        let n = a.cols;
        let mut states = vec![0.0; rows * e * n];
        let mut y = Mat::zeros(rows, e);
        for r in 0..rows {
            let first = r % seg == 0;
            for ch in 0..e {
                let delta = dtv.at(r, ch);
                let x = uv.at(r, ch);
                let mut acc = 0.0;
                for s in 0..n {
                    let prev = if first { 0.0 } else { states[((r - 1) * e + ch) * n + s] };
                    let h = (delta * a.at(ch, s)).exp() * prev + delta * bv.at(r, s) * x;
                    states[(r * e + ch) * n + s] = h;
                    acc += cv.at(r, s) * h;
                }
                if let Some(d) = &d {
                    acc += d[ch] * x;
                }
                *y.at_mut(r, ch) = acc;
            }
        }
        self.push(
            y,
            Op::Scan {
                u,
                dt,
                b,
                c,
                a,
                d,
                seg,
                states,
            },
            &[u, dt, b, c],
        )
    }

    /// `mean over segments of 1 − cos(target, x)`; a zero-norm target
    /// segment contributes 0.
    pub fn cosine_loss(&mut self, x: Var, target: Mat, seg: usize) -> Var {
        let xv = self.value(x);
        let loss = cosine_loss_rows(&xv.data, &target.data, seg * xv.cols);
        self.push(Mat::row_vec(vec![loss]), Op::Cosine { x, target, seg }, &[x])
    }

    /// Gradients of the sum of `loss`'s entries with respect to every node that needs
    /// one; `None` elsewhere.
    pub fn backward(&self, loss: Var) -> Vec<Option<Mat>> {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed = &self.nodes[loss.0].value;
        grads[loss.0] = Some(Mat::from_vec(seed.rows, seed.cols, vec![1.0; seed.data.len()]));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        grads
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        match &node.op {
            Op::Leaf => {}
            Op::QuantInput {
                x,
                s,
                dx,
                spec,
                u,
                resid,
                clip,
            } => {
                let xv = self.value(*x);
                let sv = &self.value(*s).data;
                let dv = &self.value(*dx).data;
                let (rows, cols) = (xv.rows, xv.cols);
                let mut gx = Mat::zeros(rows, cols);
                let mut gs = Mat::zeros(1, cols);
                let mut gd = Mat::zeros(1, dv.len());
                for r in 0..rows {
                    let grp = if spec.shared { 0 } else { r % spec.seg };
                    let e = spec.eps[grp];
                    for c in 0..cols {
                        let k = r * cols + c;
                        let gk = g.data[k];
                        match clip[k] {
                            Clip::In => {
                                gd.data[grp] += gk * resid[k];
                                gx.data[k] = gk / sv[c];
                                gs.data[c] -= gk * u[k] / sv[c];
                            }
                            Clip::Low => gd.data[grp] += gk * -(e as f64),
                            Clip::High => gd.data[grp] += gk * (spec.qmax - e) as f64,
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *s, gs);
                self.accumulate(grads, *dx, gd);
            }
            Op::QLinear { x, dw, w, z } => {
                let d = &self.value(*dw).data;
                let mut gscaled = g.clone();
                let mut gd = Mat::zeros(1, d.len());
                for r in 0..g.rows {
                    for o in 0..g.cols {
                        gd.data[o] += g.at(r, o) * z.at(r, o);
                        *gscaled.at_mut(r, o) *= d[o];
                    }
                }
                self.accumulate(grads, *x, matmul(&gscaled, w));
                self.accumulate(grads, *dw, gd);
            }
            Op::Linear { x, w } => self.accumulate(grads, *x, matmul(g, w)),
            Op::AddRow { x } => self.accumulate(grads, *x, g.clone()),
            Op::MulRow { x, row } => {
                let gx = Mat::from_vec(
                    g.rows,
                    g.cols,
                    g.data.iter().enumerate().map(|(i, v)| v * row[i % g.cols]).collect(),
                );
                self.accumulate(grads, *x, gx);
            }
            Op::SliceCols { x, start, cols } => {
                let xv = self.value(*x);
                let mut gx = Mat::zeros(xv.rows, xv.cols);
                for r in 0..xv.rows {
                    for c in 0..*cols {
                        *gx.at_mut(r, start + c) = g.at(r, c);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Silu { x } => {
                let xv = self.value(*x);
                let gx = xv.data.iter().zip(&g.data).map(|(&v, &gv)| gv * silu_grad(v)).collect();
                self.accumulate(grads, *x, Mat::from_vec(xv.rows, xv.cols, gx));
            }
            Op::Softplus { x } => {
                let xv = self.value(*x);
                let gx = xv
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(&v, &gv)| gv / (1.0 + (-v).exp()))
                    .collect();
                self.accumulate(grads, *x, Mat::from_vec(xv.rows, xv.cols, gx));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = bv.data.iter().zip(&g.data).map(|(y, gv)| y * gv).collect();
                let gb = av.data.iter().zip(&g.data).map(|(y, gv)| y * gv).collect();
                self.accumulate(grads, *a, Mat::from_vec(av.rows, av.cols, ga));
                self.accumulate(grads, *b, Mat::from_vec(bv.rows, bv.cols, gb));
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Scale { x, k } => {
                let gx = Mat::from_vec(g.rows, g.cols, g.data.iter().map(|v| v * k).collect());
                self.accumulate(grads, *x, gx);
            }
            Op::Reverse { x, seg } => self.accumulate(grads, *x, reverse_segments(g, *seg)),
            Op::Conv { x, w, seg } => {
                let (rows, c) = (g.rows, g.cols);
                let k = w.cols;
                let mut gx = Mat::zeros(rows, c);
                for r in 0..rows {
                    let t = r % seg;
                    for j in 0..k {
                        let back = k - 1 - j;
                        if t < back {
                            continue;
                        }
                        for ch in 0..c {
                            *gx.at_mut(r - back, ch) += w.at(ch, j) * g.at(r, ch);
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Scan {
                u,
                dt,
                b,
                c,
                a,
                d,
                seg,
                states,
            } => {
                let (uv, dtv, bv, cv) = (self.value(*u), self.value(*dt), self.value(*b), self.value(*c));
                let (rows, e) = (uv.rows, uv.cols);
                let n = a.cols;
                let mut gu = Mat::zeros(rows, e);
                let mut gdt = Mat::zeros(rows, e);
                let mut gb = Mat::zeros(rows, n);
                let mut gc = Mat::zeros(rows, n);
                let mut gh = vec![0.0; e * n];
                for r in (0..rows).rev() {
                    let t = r % seg;
                    if t == seg - 1 {
                        gh.iter_mut().for_each(|v| *v = 0.0);
                    }
                    for ch in 0..e {
                        let gy = g.at(r, ch);
                        let delta = dtv.at(r, ch);
                        let x = uv.at(r, ch);
                        if let Some(d) = d {
                            *gu.at_mut(r, ch) += gy * d[ch];
                        }
                        for s in 0..n {
                            let h = states[(r * e + ch) * n + s];
                            *gc.at_mut(r, s) += gy * h;
                            let ghs = gh[ch * n + s] + gy * cv.at(r, s);
                            let prev = if t == 0 { 0.0 } else { states[((r - 1) * e + ch) * n + s] };
                            let decay = (delta * a.at(ch, s)).exp();
                            *gdt.at_mut(r, ch) += ghs * (prev * decay * a.at(ch, s) + bv.at(r, s) * x);
                            *gb.at_mut(r, s) += ghs * delta * x;
                            *gu.at_mut(r, ch) += ghs * delta * bv.at(r, s);
                            gh[ch * n + s] = ghs * decay;
                        }
                    }
                }
                self.accumulate(grads, *u, gu);
                self.accumulate(grads, *dt, gdt);
                self.accumulate(grads, *b, gb);
                self.accumulate(grads, *c, gc);
            }
            Op::Cosine { x, target, seg } => {
                let xv = self.value(*x);
                let gx = cosine_loss_grad(&xv.data, &target.data, seg * xv.cols, g.data[0]);
                self.accumulate(grads, *x, Mat::from_vec(xv.rows, xv.cols, gx));
            }
        }
    }
}

const COS_GUARD: f64 = 1e-12;

/// `mean over chunks of 1 − ⟨t, x⟩ / (‖t‖‖x‖ + 1e-12)`; chunks whose target
/// has zero norm contribute 0.
pub fn cosine_loss_rows(x: &[f64], target: &[f64], chunk: usize) -> f64 {
    let segs = x.len() / chunk;
    let mut total = 0.0;
    for s in 0..segs {
        let (xs, ts) = (&x[s * chunk..(s + 1) * chunk], &target[s * chunk..(s + 1) * chunk]);
        let nt = ts.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nt == 0.0 {
            continue;
        }
        let nx = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dot: f64 = xs.iter().zip(ts).map(|(a, b)| a * b).sum();
        total += 1.0 - dot / (nt * nx + COS_GUARD);
    }
    total / segs as f64
}

fn cosine_loss_grad(x: &[f64], target: &[f64], chunk: usize, g: f64) -> Vec<f64> {
    let segs = x.len() / chunk;
    let mut out = vec![0.0; x.len()];
    for s in 0..segs {
        let range = s * chunk..(s + 1) * chunk;
        let (xs, ts) = (&x[range.clone()], &target[range.clone()]);
        let nt = ts.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nx = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nt == 0.0 || nx == 0.0 {
            continue;
        }
        let dot: f64 = xs.iter().zip(ts).map(|(a, b)| a * b).sum();
        let den = nt * nx + COS_GUARD;
        let k = -g / segs as f64;
        for (o, (&xv, &tv)) in out[range].iter_mut().zip(xs.iter().zip(ts)) {
            *o = k * (tv / den - dot * nt * xv / (nx * den * den));
        }
    }
    out
}

fn reverse_segments(x: &Mat, seg: usize) -> Mat {
    let mut y = Mat::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let base = r - r % seg;
        let src = base + seg - 1 - r % seg;
        y.data[r * x.cols..(r + 1) * x.cols].copy_from_slice(&x.data[src * x.cols..(src + 1) * x.cols]);
    }
    y
}

/// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
pub fn matmul_nt(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.cols);
    let mut y = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = &a.data[i * a.cols..(i + 1) * a.cols];
        for j in 0..b.rows {
            let br = &b.data[j * b.cols..(j + 1) * b.cols];
            y.data[i * b.rows + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    y
}

/// `a · b` for `a: [m×k]`, `b: [k×n]`.
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows);
    let mut y = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for p in 0..a.cols {
            let av = a.data[i * a.cols + p];
            if av == 0.0 {
                continue;
            }
            let br = &b.data[p * b.cols..(p + 1) * b.cols];
            for (o, bv) in y.data[i * b.cols..(i + 1) * b.cols].iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    y
}
