//! A small reverse-mode tape over `ndarray`, in f64.
//!
//! The network is rebuilt on a fresh [`Tape`] per forward pass: every
//! operation appends a node holding its value and enough metadata to run the
//! backward step. Gradients are accumulated by walking the tape in reverse.
//! Everything is single-threaded and deterministic; parallelism happens one
//! level up (across scenes), never inside a tape.

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Axis, IxDyn};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const CLAMP_EPS: f64 = 1e-7;

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

enum Op {
    Input,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        cols: Array2<f64>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    SqrtEps {
        x: Var,
    },
    Recip {
        x: Var,
    },
    Scale {
        x: Var,
        k: f64,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddMany {
        xs: Vec<Var>,
    },
    Mul {
        a: Var,
        b: Var,
    },
    ConcatC {
        xs: Vec<Var>,
    },
    SliceC {
        x: Var,
        start: usize,
        len: usize,
    },
    Resize {
        x: Var,
        plan_r: Vec<(usize, usize, f64)>,
        plan_c: Vec<(usize, usize, f64)>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Transpose2 {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    RowSum {
        x: Var,
    },
    MulCol {
        a: Var,
        col: Var,
    },
    RoiAlign {
        x: Var,
        // (row0, col0, row1, col1) in edge coordinates; pixel k covers [k, k+1).
        bbox: [f64; 4],
        out: usize,
    },
    GatherCells {
        x: Var,
        cells: Vec<(usize, usize)>,
    },
    SumAll {
        x: Var,
    },
    FocalLoss {
        p: Var,
        target: ArrayD<f64>,
        alpha: f64,
        gamma: f64,
        norm: f64,
    },
    SmoothL1 {
        pred: Var,
        target: Array3<f64>,
        valid: Array3<f64>,
        weight: Array3<f64>,
        norm: f64,
    },
    DiceSum {
        p: Var,
        target: Array2<f64>,
        eps: f64,
    },
    SoftmaxCeMap {
        logits: Var,
        target: Array2<usize>,
    },
    SoftmaxFocalVec {
        logits: Var,
        target: usize,
        alpha: f64,
        gamma: f64,
    },
    AddScaled {
        terms: Vec<(f64, Var)>,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients(Vec<Option<ArrayD<f64>>>);

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.0[v.0].as_ref()
    }
}

fn as2(a: &ArrayD<f64>) -> Array2<f64> {
    a.view().into_dimensionality().expect("2d value").to_owned()
}

fn as3(a: &ArrayD<f64>) -> Array3<f64> {
    a.view().into_dimensionality().expect("3d value").to_owned()
}

/// Source taps for one output coordinate of a half-pixel bilinear resize.
fn resize_plan(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
            let lo = src.floor();
            let w_hi = src - lo;
            let i0 = (lo.max(0.0) as usize).min(n_in - 1);
            let i1 = ((lo + 1.0).max(0.0) as usize).min(n_in - 1);
            (i0, i1, w_hi)
        })
        .collect()
}

/// Channelwise half-pixel bilinear resize of a (C, H, W) feature.
pub fn bilinear_resize3(x: &Array3<f64>, oh: usize, ow: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    if h == oh && w == ow {
        return x.clone();
    }
    let pr = resize_plan(h, oh);
    let pc = resize_plan(w, ow);
    let mut out = Array3::<f64>::zeros((c, oh, ow));
    for ch in 0..c {
        for (r, &(r0, r1, wr)) in pr.iter().enumerate() {
            for (cc, &(c0, c1, wc)) in pc.iter().enumerate() {
                let v00 = x[(ch, r0, c0)];
                let v01 = x[(ch, r0, c1)];
                let v10 = x[(ch, r1, c0)];
                let v11 = x[(ch, r1, c1)];
                out[(ch, r, cc)] = (1.0 - wr) * ((1.0 - wc) * v00 + wc * v01)
                    + wr * ((1.0 - wc) * v10 + wc * v11);
            }
        }
    }
    out
}

/// Single-channel convenience wrapper around [`bilinear_resize3`].
pub fn bilinear_resize2(x: &Array2<f64>, oh: usize, ow: usize) -> Array2<f64> {
    let (h, w) = x.dim();
    let x3 = x
        .clone()
        .into_shape_with_order((1, h, w))
        .expect("reshape");
    let out = bilinear_resize3(&x3, oh, ow);
    out.into_shape_with_order((oh, ow)).expect("reshape")
}

/// im2col for a (C, H, W) input and k x k kernel.
fn im2col(x: &Array3<f64>, k: usize, stride: usize, pad: usize) -> (Array2<f64>, usize, usize) {
    let (c, h, w) = x.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut cols = Array2::<f64>::zeros((c * k * k, oh * ow));
    for ch in 0..c {
        for kr in 0..k {
            for kc in 0..k {
                let row = (ch * k + kr) * k + kc;
                for or_ in 0..oh {
                    let ir = (or_ * stride + kr) as isize - pad as isize;
                    if ir < 0 || ir >= h as isize {
                        continue;
                    }
                    for oc in 0..ow {
                        let ic = (oc * stride + kc) as isize - pad as isize;
                        if ic < 0 || ic >= w as isize {
                            continue;
                        }
                        cols[(row, or_ * ow + oc)] = x[(ch, ir as usize, ic as usize)];
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array3<f64> {
    let mut dx = Array3::<f64>::zeros((c, h, w));
    for ch in 0..c {
        for kr in 0..k {
            for kc in 0..k {
                let row = (ch * k + kr) * k + kc;
                for or_ in 0..oh {
                    let ir = (or_ * stride + kr) as isize - pad as isize;
                    if ir < 0 || ir >= h as isize {
                        continue;
                    }
                    for oc in 0..ow {
                        let ic = (oc * stride + kc) as isize - pad as isize;
                        if ic < 0 || ic >= w as isize {
                            continue;
                        }
                        dx[(ch, ir as usize, ic as usize)] += dcols[(row, or_ * ow + oc)];
                    }
                }
            }
        }
    }
    dx
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn value2(&self, v: Var) -> Array2<f64> {
        as2(self.value(v))
    }

    pub fn value3(&self, v: Var) -> Array3<f64> {
        as3(self.value(v))
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1);
        val.iter().next().copied().unwrap()
    }

    pub fn input(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn input1(&mut self, value: Array1<f64>) -> Var {
        self.push(value.into_dyn(), Op::Input)
    }

    pub fn input2(&mut self, value: Array2<f64>) -> Var {
        self.push(value.into_dyn(), Op::Input)
    }

    pub fn input3(&mut self, value: Array3<f64>) -> Var {
        self.push(value.into_dyn(), Op::Input)
    }

    pub fn input4(&mut self, value: Array4<f64>) -> Var {
        self.push(value.into_dyn(), Op::Input)
    }

    /// 2D convolution of a (C, H, W) input with (Cout, Cin, k, k) weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = as3(self.value(x));
        let wv: Array4<f64> = self
            .value(w)
            .view()
            .into_dimensionality()
            .expect("4d weight")
            .to_owned();
        let (cout, cin, k, k2) = wv.dim();
        assert_eq!(k, k2);
        assert_eq!(cin, xv.dim().0, "conv input channels");
        let (cols, oh, ow) = im2col(&xv, k, stride, pad);
        let wmat = wv.into_shape_with_order((cout, cin * k * k)).unwrap();
        let mut out = wmat.dot(&cols);
        if let Some(b) = b {
            let bv = self.value(b).clone();
            for (mut row, &bias) in out.axis_iter_mut(Axis(0)).zip(bv.iter()) {
                row += bias;
            }
        }
        let out = out.into_shape_with_order((cout, oh, ow)).unwrap();
        self.push(
            out.into_dyn(),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
        )
    }

    /// Fully connected layer: x (n) -> w (m, n) x + b (m).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv: Array1<f64> = self
            .value(x)
            .view()
            .into_dimensionality()
            .expect("1d input")
            .to_owned();
        let wv = as2(self.value(w));
        let bv: Array1<f64> = self
            .value(b)
            .view()
            .into_dimensionality()
            .expect("1d bias")
            .to_owned();
        let out = wv.dot(&xv) + &bv;
        self.push(out.into_dyn(), Op::Linear { x, w, b })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.max(0.0));
        self.push(out, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(sigmoid_scalar);
        self.push(out, Op::Sigmoid { x })
    }

    pub fn sqrt_eps(&mut self, x: Var, eps: f64) -> Var {
        let out = self.value(x).mapv(|v| (v + eps).sqrt());
        self.push(out, Op::SqrtEps { x })
    }

    pub fn recip_eps(&mut self, x: Var, eps: f64) -> Var {
        let out = self.value(x).mapv(|v| 1.0 / (v + eps));
        self.push(out, Op::Recip { x })
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).mapv(|v| v * k);
        self.push(out, Op::Scale { x, k })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add { a, b })
    }

    pub fn add_many(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let mut out = self.value(xs[0]).clone();
        for &x in &xs[1..] {
            out += self.value(x);
        }
        self.push(out, Op::AddMany { xs: xs.to_vec() })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul { a, b })
    }

    /// Concatenate (C_i, H, W) features along the channel axis.
    pub fn concat_c(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let views: Vec<Array3<f64>> = xs.iter().map(|&x| as3(self.value(x))).collect();
        let (_, h, w) = views[0].dim();
        let total: usize = views.iter().map(|v| v.dim().0).sum();
        let mut out = Array3::<f64>::zeros((total, h, w));
        let mut at = 0;
        for v in &views {
            let c = v.dim().0;
            out.slice_mut(ndarray::s![at..at + c, .., ..]).assign(v);
            at += c;
        }
        self.push(out.into_dyn(), Op::ConcatC { xs: xs.to_vec() })
    }

    pub fn slice_c(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = as3(self.value(x));
        let out = xv.slice(ndarray::s![start..start + len, .., ..]).to_owned();
        self.push(out.into_dyn(), Op::SliceC { x, start, len })
    }

    /// Half-pixel bilinear resize of a (C, H, W) feature.
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let xv = as3(self.value(x));
        let (_, h, w) = xv.dim();
        let plan_r = resize_plan(h, oh);
        let plan_c = resize_plan(w, ow);
        let out = bilinear_resize3(&xv, oh, ow);
        self.push(out.into_dyn(), Op::Resize { x, plan_r, plan_c })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = as2(self.value(a));
        let bv = as2(self.value(b));
        let out = av.dot(&bv);
        self.push(out.into_dyn(), Op::MatMul { a, b })
    }

    pub fn transpose2(&mut self, x: Var) -> Var {
        let out = as2(self.value(x)).t().as_standard_layout().to_owned();
        self.push(out.into_dyn(), Op::Transpose2 { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self
            .value(x)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size");
        self.push(out, Op::Reshape { x })
    }

    /// (m, n) -> (m, 1) row sums.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let xv = as2(self.value(x));
        let m = xv.nrows();
        let out = xv.sum_axis(Axis(1)).into_shape_with_order((m, 1)).unwrap();
        self.push(out.into_dyn(), Op::RowSum { x })
    }

    /// Broadcast multiply: (m, n) * (m, 1).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let av = as2(self.value(a));
        let cv = as2(self.value(col));
        let out = &av * &cv;
        self.push(out.into_dyn(), Op::MulCol { a, col })
    }

    /// Region-aligned resampling: a (C, out, out) patch sampled from the bbox
    /// (row0, col0, row1, col1) given in edge coordinates, one bilinear
    /// sample per bin center.
    pub fn roi_align(&mut self, x: Var, bbox: [f64; 4], out: usize) -> Var {
        let xv = as3(self.value(x));
        let mut res = Array3::<f64>::zeros((xv.dim().0, out, out));
        roi_align_apply(&xv, bbox, out, |c, r, cc, idx, wgt| {
            res[(c, r, cc)] += wgt * xv[idx];
        });
        self.push(res.into_dyn(), Op::RoiAlign { x, bbox, out })
    }

    /// Gather per-cell channel vectors from a (C, H, W) feature into (M, C).
    pub fn gather_cells(&mut self, x: Var, cells: Vec<(usize, usize)>) -> Var {
        let xv = as3(self.value(x));
        let c = xv.dim().0;
        let mut out = Array2::<f64>::zeros((cells.len(), c));
        for (m, &(r, cc)) in cells.iter().enumerate() {
            for ch in 0..c {
                out[(m, ch)] = xv[(ch, r, cc)];
            }
        }
        self.push(out.into_dyn(), Op::GatherCells { x, cells })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(scalar_arr(s), Op::SumAll { x })
    }

    /// Focal loss on probabilities against a binary target of the same shape,
    /// summed and normalized by max(1, positive count).
    pub fn focal_loss(&mut self, p: Var, target: ArrayD<f64>, alpha: f64, gamma: f64) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.shape(), target.shape(), "focal loss shape mismatch");
        let pos = target.iter().filter(|&&t| t != 0.0).count();
        let norm = (pos as f64).max(1.0);
        let mut sum = 0.0;
        for (&pi, &t) in pv.iter().zip(target.iter()) {
            let q = pi.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
            if t != 0.0 {
                sum += -alpha * (1.0 - q).powf(gamma) * q.ln();
            } else {
                sum += -(1.0 - alpha) * q.powf(gamma) * (1.0 - q).ln();
            }
        }
        self.push(
            scalar_arr(sum / norm),
            Op::FocalLoss {
                p,
                target,
                alpha,
                gamma,
                norm,
            },
        )
    }

    /// Scale-weighted smooth-l1 on offset maps. `pred` is (2*C_P, S, S);
    /// `valid`/`weight` are (C_P, S, S). Normalized by max(1, sum of
    /// valid*weight).
    pub fn smooth_l1_masked(
        &mut self,
        pred: Var,
        target: Array3<f64>,
        valid: Array3<f64>,
        weight: Array3<f64>,
    ) -> Var {
        let pv = as3(self.value(pred));
        assert_eq!(pv.dim(), target.dim());
        let (c2, s0, s1) = pv.dim();
        let c_p = c2 / 2;
        assert_eq!(valid.dim(), (c_p, s0, s1));
        let mut wsum = 0.0;
        let mut sum = 0.0;
        for p in 0..c_p {
            for r in 0..s0 {
                for c in 0..s1 {
                    if valid[(p, r, c)] == 0.0 {
                        continue;
                    }
                    let wgt = weight[(p, r, c)];
                    wsum += wgt;
                    for comp in 0..2 {
                        let d = pv[(2 * p + comp, r, c)] - target[(2 * p + comp, r, c)];
                        let rho = if d.abs() < 1.0 {
                            0.5 * d * d
                        } else {
                            d.abs() - 0.5
                        };
                        sum += wgt * rho;
                    }
                }
            }
        }
        let norm = wsum.max(1.0);
        self.push(
            scalar_arr(sum / norm),
            Op::SmoothL1 {
                pred,
                target,
                valid,
                weight,
                norm,
            },
        )
    }

    /// Sum of per-row dice losses of (M, N) soft masks against binary
    /// targets, squared-denominator form. The caller divides by M to average
    /// over positive samples.
    pub fn dice_sum(&mut self, p: Var, target: Array2<f64>) -> Var {
        let pv = as2(self.value(p));
        assert_eq!(pv.dim(), target.dim());
        let eps = 1e-6;
        let mut total = 0.0;
        for m in 0..pv.nrows() {
            let mut inter = 0.0;
            let mut den = eps;
            for n in 0..pv.ncols() {
                let (pi, g) = (pv[(m, n)], target[(m, n)]);
                inter += pi * g;
                den += pi * pi + g * g;
            }
            total += 1.0 - 2.0 * inter / den;
        }
        self.push(scalar_arr(total), Op::DiceSum { p, target, eps })
    }

    /// Mean per-pixel cross entropy of a (K, H, W) logit map against integer
    /// class targets.
    pub fn softmax_ce_map(&mut self, logits: Var, target: Array2<usize>) -> Var {
        let lv = as3(self.value(logits));
        let (k, h, w) = lv.dim();
        assert_eq!(target.dim(), (h, w));
        let mut sum = 0.0;
        for r in 0..h {
            for c in 0..w {
                let mut mx = f64::NEG_INFINITY;
                for ch in 0..k {
                    mx = mx.max(lv[(ch, r, c)]);
                }
                let mut lse = 0.0;
                for ch in 0..k {
                    lse += (lv[(ch, r, c)] - mx).exp();
                }
                let lse = lse.ln() + mx;
                sum += lse - lv[(target[(r, c)], r, c)];
            }
        }
        let mean = sum / (h * w) as f64;
        self.push(scalar_arr(mean), Op::SoftmaxCeMap { logits, target })
    }

    /// Multi-class focal loss on a logit vector.
    pub fn softmax_focal(&mut self, logits: Var, target: usize, alpha: f64, gamma: f64) -> Var {
        let lv = self.value(logits);
        let p = softmax_vec(lv.iter().copied().collect());
        let pt = p[target].clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
        let loss = -alpha * (1.0 - pt).powf(gamma) * pt.ln();
        self.push(
            scalar_arr(loss),
            Op::SoftmaxFocalVec {
                logits,
                target,
                alpha,
                gamma,
            },
        )
    }

    /// Left-to-right weighted sum of scalars: ((k0*v0 + k1*v1) + ...).
    pub fn add_scaled(&mut self, terms: &[(f64, Var)]) -> Var {
        let mut acc = 0.0;
        for &(k, v) in terms {
            acc += k * self.scalar(v);
        }
        self.push(
            scalar_arr(acc),
            Op::AddScaled {
                terms: terms.to_vec(),
            },
        )
    }

    /// Run the backward pass from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::ones(self.nodes[root.0].value.raw_dim()));
        for idx in (0..=root.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.step_backward(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Gradients(grads)
    }

    fn step_backward(&self, idx: usize, gout: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        fn acc(grads: &mut [Option<ArrayD<f64>>], v: Var, g: ArrayD<f64>) {
            match &mut grads[v.0] {
                Some(a) => *a += &g,
                slot => *slot = Some(g),
            }
        }
        match &self.nodes[idx].op {
            Op::Input => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let xv = as3(self.value(*x));
                let (cin, h, wd) = xv.dim();
                let wv: Array4<f64> = self
                    .value(*w)
                    .view()
                    .into_dimensionality()
                    .unwrap()
                    .to_owned();
                let (cout, _, k, _) = wv.dim();
                let g3 = as3(gout);
                let (_, oh, ow) = g3.dim();
                let gmat = g3.into_shape_with_order((cout, oh * ow)).unwrap();
                let wmat = wv.into_shape_with_order((cout, cin * k * k)).unwrap();
                let dw = gmat.dot(&cols.t());
                acc(
                    grads,
                    *w,
                    dw.into_shape_with_order(IxDyn(&[cout, cin, k, k])).unwrap(),
                );
                if let Some(b) = b {
                    acc(grads, *b, gmat.sum_axis(Axis(1)).into_dyn());
                }
                let dcols = wmat.t().dot(&gmat);
                let dx = col2im(&dcols, cin, h, wd, k, *stride, *pad, oh, ow);
                acc(grads, *x, dx.into_dyn());
            }
            Op::Linear { x, w, b } => {
                let g: Array1<f64> = gout.view().into_dimensionality().unwrap().to_owned();
                let xv: Array1<f64> = self
                    .value(*x)
                    .view()
                    .into_dimensionality()
                    .unwrap()
                    .to_owned();
                let wv = as2(self.value(*w));
                let m = g.len();
                let n = xv.len();
                let mut dw = Array2::<f64>::zeros((m, n));
                for i in 0..m {
                    for j in 0..n {
                        dw[(i, j)] = g[i] * xv[j];
                    }
                }
                acc(grads, *w, dw.into_dyn());
                acc(grads, *b, g.clone().into_dyn());
                acc(grads, *x, wv.t().dot(&g).into_dyn());
            }
            Op::Relu { x } => {
                let mask = self.value(*x).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                acc(grads, *x, gout * &mask);
            }
            Op::Sigmoid { x } => {
                let y = &self.nodes[idx].value;
                acc(grads, *x, gout * &(y * &y.mapv(|v| 1.0 - v)));
            }
            Op::SqrtEps { x } => {
                let y = &self.nodes[idx].value;
                acc(grads, *x, gout * &y.mapv(|v| 0.5 / v));
            }
            Op::Recip { x } => {
                let y = &self.nodes[idx].value;
                acc(grads, *x, gout * &y.mapv(|v| -v * v));
            }
            Op::Scale { x, k } => {
                let k = *k;
                acc(grads, *x, gout.mapv(|v| v * k));
            }
            Op::Add { a, b } => {
                acc(grads, *a, gout.clone());
                acc(grads, *b, gout.clone());
            }
            Op::AddMany { xs } => {
                for &x in xs {
                    acc(grads, x, gout.clone());
                }
            }
            Op::Mul { a, b } => {
                acc(grads, *a, gout * self.value(*b));
                acc(grads, *b, gout * self.value(*a));
            }
            Op::ConcatC { xs } => {
                let g = as3(gout);
                let mut at = 0;
                for &x in xs {
                    let c = as3(self.value(x)).dim().0;
                    let part = g.slice(ndarray::s![at..at + c, .., ..]).to_owned();
                    acc(grads, x, part.into_dyn());
                    at += c;
                }
            }
            Op::SliceC { x, start, len } => {
                let xv = as3(self.value(*x));
                let mut dx = Array3::<f64>::zeros(xv.dim());
                dx.slice_mut(ndarray::s![*start..*start + *len, .., ..])
                    .assign(&as3(gout));
                acc(grads, *x, dx.into_dyn());
            }
            Op::Resize { x, plan_r, plan_c } => {
                let xv = as3(self.value(*x));
                let g = as3(gout);
                let (c, ..) = xv.dim();
                let mut dx = Array3::<f64>::zeros(xv.dim());
                for ch in 0..c {
                    for (r, &(r0, r1, wr)) in plan_r.iter().enumerate() {
                        for (cc, &(c0, c1, wc)) in plan_c.iter().enumerate() {
                            let gv = g[(ch, r, cc)];
                            dx[(ch, r0, c0)] += gv * (1.0 - wr) * (1.0 - wc);
                            dx[(ch, r0, c1)] += gv * (1.0 - wr) * wc;
                            dx[(ch, r1, c0)] += gv * wr * (1.0 - wc);
                            dx[(ch, r1, c1)] += gv * wr * wc;
                        }
                    }
                }
                acc(grads, *x, dx.into_dyn());
            }
            Op::MatMul { a, b } => {
                let g = as2(gout);
                let av = as2(self.value(*a));
                let bv = as2(self.value(*b));
                acc(grads, *a, g.dot(&bv.t()).into_dyn());
                acc(grads, *b, av.t().dot(&g).into_dyn());
            }
            Op::Transpose2 { x } => {
                let g = as2(gout).t().as_standard_layout().to_owned();
                acc(grads, *x, g.into_dyn());
            }
            Op::Reshape { x } => {
                let shape = self.value(*x).raw_dim();
                acc(grads, *x, gout.clone().into_shape_with_order(shape).unwrap());
            }
            Op::RowSum { x } => {
                let xv = as2(self.value(*x));
                let g = as2(gout);
                let mut dx = Array2::<f64>::zeros(xv.dim());
                for m in 0..xv.nrows() {
                    dx.row_mut(m).fill(g[(m, 0)]);
                }
                acc(grads, *x, dx.into_dyn());
            }
            Op::MulCol { a, col } => {
                let g = as2(gout);
                let av = as2(self.value(*a));
                let cv = as2(self.value(*col));
                acc(grads, *a, (&g * &cv).into_dyn());
                let dcol = (&g * &av).sum_axis(Axis(1));
                let m = dcol.len();
                acc(
                    grads,
                    *col,
                    dcol.into_shape_with_order((m, 1)).unwrap().into_dyn(),
                );
            }
            Op::RoiAlign { x, bbox, out } => {
                let xv = as3(self.value(*x));
                let g = as3(gout);
                let mut dx = Array3::<f64>::zeros(xv.dim());
                roi_align_apply(&xv, *bbox, *out, |c, r, cc, idx2, wgt| {
                    dx[idx2] += wgt * g[(c, r, cc)];
                });
                acc(grads, *x, dx.into_dyn());
            }
            Op::GatherCells { x, cells } => {
                let xv = as3(self.value(*x));
                let g = as2(gout);
                let mut dx = Array3::<f64>::zeros(xv.dim());
                for (m, &(r, cc)) in cells.iter().enumerate() {
                    for ch in 0..xv.dim().0 {
                        dx[(ch, r, cc)] += g[(m, ch)];
                    }
                }
                acc(grads, *x, dx.into_dyn());
            }
            Op::SumAll { x } => {
                let g = gout.iter().next().copied().unwrap();
                let shape = self.value(*x).raw_dim();
                acc(grads, *x, ArrayD::from_elem(shape, g));
            }
            Op::FocalLoss {
                p,
                target,
                alpha,
                gamma,
                norm,
            } => {
                let g = gout.iter().next().copied().unwrap();
                let pv = self.value(*p);
                let mut dp = ArrayD::<f64>::zeros(pv.raw_dim());
                for ((d, &pi), &t) in dp.iter_mut().zip(pv.iter()).zip(target.iter()) {
                    if !(CLAMP_EPS..=1.0 - CLAMP_EPS).contains(&pi) {
                        continue; // clamped region
                    }
                    let q = pi;
                    let grad = if t != 0.0 {
                        alpha * gamma * (1.0 - q).powf(gamma - 1.0) * q.ln()
                            - alpha * (1.0 - q).powf(*gamma) / q
                    } else {
                        -(1.0 - alpha) * gamma * q.powf(gamma - 1.0) * (1.0 - q).ln()
                            + (1.0 - alpha) * q.powf(*gamma) / (1.0 - q)
                    };
                    *d = g * grad / norm;
                }
                acc(grads, *p, dp);
            }
            Op::SmoothL1 {
                pred,
                target,
                valid,
                weight,
                norm,
            } => {
                let g = gout.iter().next().copied().unwrap();
                let pv = as3(self.value(*pred));
                let (c2, s0, s1) = pv.dim();
                let c_p = c2 / 2;
                let mut dp = Array3::<f64>::zeros(pv.dim());
                for p in 0..c_p {
                    for r in 0..s0 {
                        for c in 0..s1 {
                            if valid[(p, r, c)] == 0.0 {
                                continue;
                            }
                            let wgt = weight[(p, r, c)];
                            for comp in 0..2 {
                                let d = pv[(2 * p + comp, r, c)] - target[(2 * p + comp, r, c)];
                                let drho = if d.abs() < 1.0 { d } else { d.signum() };
                                dp[(2 * p + comp, r, c)] = g * wgt * drho / norm;
                            }
                        }
                    }
                }
                acc(grads, *pred, dp.into_dyn());
            }
            Op::DiceSum { p, target, eps } => {
                let g = gout.iter().next().copied().unwrap();
                let pv = as2(self.value(*p));
                let mut dp = Array2::<f64>::zeros(pv.dim());
                for m in 0..pv.nrows() {
                    let mut inter = 0.0;
                    let mut den = *eps;
                    for n in 0..pv.ncols() {
                        let (pi, gt) = (pv[(m, n)], target[(m, n)]);
                        inter += pi * gt;
                        den += pi * pi + gt * gt;
                    }
                    for n in 0..pv.ncols() {
                        let (pi, gt) = (pv[(m, n)], target[(m, n)]);
                        dp[(m, n)] = g * (-2.0 * gt * den + 4.0 * inter * pi) / (den * den);
                    }
                }
                acc(grads, *p, dp.into_dyn());
            }
            Op::SoftmaxCeMap { logits, target } => {
                let g = gout.iter().next().copied().unwrap();
                let lv = as3(self.value(*logits));
                let (k, h, w) = lv.dim();
                let mut dl = Array3::<f64>::zeros(lv.dim());
                let scale = g / (h * w) as f64;
                for r in 0..h {
                    for c in 0..w {
                        let col: Vec<f64> = (0..k).map(|ch| lv[(ch, r, c)]).collect();
                        let p = softmax_vec(col);
                        for ch in 0..k {
                            let y = if ch == target[(r, c)] { 1.0 } else { 0.0 };
                            dl[(ch, r, c)] = scale * (p[ch] - y);
                        }
                    }
                }
                acc(grads, *logits, dl.into_dyn());
            }
            Op::SoftmaxFocalVec {
                logits,
                target,
                alpha,
                gamma,
            } => {
                let g = gout.iter().next().copied().unwrap();
                let lv: Vec<f64> = self.value(*logits).iter().copied().collect();
                let p = softmax_vec(lv);
                let pt = p[*target].clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
                // dL/dpt, then chain through the softmax jacobian row.
                let dpt = alpha * gamma * (1.0 - pt).powf(gamma - 1.0) * pt.ln()
                    - alpha * (1.0 - pt).powf(*gamma) / pt;
                let mut dl = Array1::<f64>::zeros(p.len());
                for j in 0..p.len() {
                    let jac = if j == *target {
                        pt * (1.0 - pt)
                    } else {
                        -pt * p[j]
                    };
                    dl[j] = g * dpt * jac;
                }
                acc(grads, *logits, dl.into_dyn());
            }
            Op::AddScaled { terms } => {
                let g = gout.iter().next().copied().unwrap();
                for &(k, v) in terms {
                    acc(grads, v, scalar_arr(g * k));
                }
            }
        }
    }
}

fn scalar_arr(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[1]), v)
}

pub(crate) fn softmax_vec(mut v: Vec<f64>) -> Vec<f64> {
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - mx).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
    v
}

/// Visit every bilinear tap of a ROI-align sampling. `f(c, bin_r, bin_c,
/// source_index, weight)`.
fn roi_align_apply<F: FnMut(usize, usize, usize, (usize, usize, usize), f64)>(
    x: &Array3<f64>,
    bbox: [f64; 4],
    out: usize,
    mut f: F,
) {
    let (c, h, w) = x.dim();
    let [r0, c0, r1, c1] = bbox;
    let bh = (r1 - r0).max(1e-9);
    let bw = (c1 - c0).max(1e-9);
    for br in 0..out {
        let sy = r0 + (br as f64 + 0.5) * bh / out as f64 - 0.5;
        let y0 = sy.floor();
        let wy = sy - y0;
        let iy0 = (y0.max(0.0) as usize).min(h - 1);
        let iy1 = ((y0 + 1.0).max(0.0) as usize).min(h - 1);
        for bc in 0..out {
            let sx = c0 + (bc as f64 + 0.5) * bw / out as f64 - 0.5;
            let x0 = sx.floor();
            let wx = sx - x0;
            let ix0 = (x0.max(0.0) as usize).min(w - 1);
            let ix1 = ((x0 + 1.0).max(0.0) as usize).min(w - 1);
            for ch in 0..c {
                f(ch, br, bc, (ch, iy0, ix0), (1.0 - wy) * (1.0 - wx));
                f(ch, br, bc, (ch, iy0, ix1), (1.0 - wy) * wx);
                f(ch, br, bc, (ch, iy1, ix0), wy * (1.0 - wx));
                f(ch, br, bc, (ch, iy1, ix1), wy * wx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand3(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite-difference check of d(scalar_fn)/d(input).
    fn gradcheck<F>(input: ArrayD<f64>, tol: f64, f: F)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut tape = Tape::new();
        let x = tape.input(input.clone());
        let root = f(&mut tape, x);
        assert_eq!(tape.value(root).len(), 1, "root must be scalar");
        let grads = tape.backward(root);
        let analytic = grads.wrt(x).expect("input gradient").clone();

        let h = 1e-5;
        let flat = input.as_slice().unwrap().to_vec();
        for i in 0..flat.len() {
            let eval = |v: f64| {
                let mut data = input.clone();
                data.as_slice_mut().unwrap()[i] = v;
                let mut t = Tape::new();
                let vv = t.input(data);
                let r = f(&mut t, vv);
                t.scalar(r)
            };
            let numeric = (eval(flat[i] + h) - eval(flat[i] - h)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (a - numeric).abs() / denom < tol,
                "grad mismatch at {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn conv2d_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand3(&mut rng, 3, 6, 5);
        let w = Array4::from_shape_fn((4, 3, 3, 3), |_| rng.gen_range(-1.0..1.0));
        let b = Array1::from_shape_fn(4, |_| rng.gen_range(-1.0..1.0));
        let mut tape = Tape::new();
        let xv = tape.input3(x.clone());
        let wv = tape.input4(w.clone());
        let bv = tape.input1(b.clone());
        let out = tape.conv2d(xv, wv, Some(bv), 1, 1);
        let got = tape.value3(out);
        for co in 0..4 {
            for r in 0..6 {
                for c in 0..5 {
                    let mut acc = b[co];
                    for ci in 0..3 {
                        for kr in 0..3 {
                            for kc in 0..3 {
                                let ir = r as isize + kr as isize - 1;
                                let ic = c as isize + kc as isize - 1;
                                if ir >= 0 && ir < 6 && ic >= 0 && ic < 5 {
                                    acc += w[(co, ci, kr, kc)] * x[(ci, ir as usize, ic as usize)];
                                }
                            }
                        }
                    }
                    assert!((got[(co, r, c)] - acc).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Array4::from_shape_fn((2, 2, 3, 3), |_| rng.gen_range(-1.0..1.0));
        let x = rand3(&mut rng, 2, 5, 4);
        let wc = w.clone();
        gradcheck(x.clone().into_dyn(), 1e-6, move |t, v| {
            let wv = t.input4(wc.clone());
            let y = t.conv2d(v, wv, None, 2, 1);
            let s = t.sigmoid(y);
            t.sum_all(s)
        });
        let xc = x;
        gradcheck(w.into_dyn(), 1e-6, move |t, v| {
            let xv = t.input3(xc.clone());
            let y = t.conv2d(xv, v, None, 1, 1);
            let s = t.sigmoid(y);
            t.sum_all(s)
        });
    }

    #[test]
    fn resize_identity_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand3(&mut rng, 2, 5, 5);
        let mut tape = Tape::new();
        let v = tape.input3(x.clone());
        let same = tape.resize_bilinear(v, 5, 5);
        assert_eq!(tape.value3(same), x);

        gradcheck(x.into_dyn(), 1e-6, |t, v| {
            let y = t.resize_bilinear(v, 7, 3);
            let s = t.sigmoid(y);
            t.sum_all(s)
        });
    }

    #[test]
    fn pointwise_and_matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array2::from_shape_fn((3, 4), |_| rng.gen_range(0.2..1.5));
        let other = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
        let o = other.clone();
        gradcheck(x.clone().into_dyn(), 1e-6, move |t, v| {
            let w = t.input2(o.clone());
            let mm = t.matmul(v, w);
            let sq = t.sqrt_eps(mm, 2.0);
            let r = t.recip_eps(sq, 0.5);
            let rs = t.row_sum(r);
            t.sum_all(rs)
        });

        gradcheck(x.into_dyn(), 1e-6, |t, v| {
            let tr = t.transpose2(v);
            let s = t.sigmoid(tr);
            let rs = t.row_sum(s);
            let rec = t.recip_eps(rs, 1.0);
            let m = t.mul_col(s, rec);
            t.sum_all(m)
        });
    }

    #[test]
    fn roi_align_and_gather_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand3(&mut rng, 2, 6, 6);
        gradcheck(x.clone().into_dyn(), 1e-6, |t, v| {
            let roi = t.roi_align(v, [0.7, 1.2, 4.9, 5.3], 3);
            let s = t.sigmoid(roi);
            t.sum_all(s)
        });
        gradcheck(x.into_dyn(), 1e-6, |t, v| {
            let g = t.gather_cells(v, vec![(0, 0), (3, 2), (3, 2), (5, 5)]);
            let s = t.sigmoid(g);
            t.sum_all(s)
        });
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let b = Array1::from_shape_fn(3, |_| rng.gen_range(-1.0..1.0));
        let x = Array1::from_shape_fn(4, |_| rng.gen_range(-1.0..1.0));
        let (wc, bc) = (w.clone(), b.clone());
        gradcheck(x.clone().into_dyn(), 1e-6, move |t, v| {
            let wv = t.input2(wc.clone());
            let bv = t.input1(bc.clone());
            let y = t.linear(v, wv, bv);
            let s = t.sigmoid(y);
            t.sum_all(s)
        });
        let xc = x;
        gradcheck(w.into_dyn(), 1e-6, move |t, v| {
            let xv = t.input1(xc.clone());
            let bv = t.input1(Array1::zeros(3));
            let y = t.linear(xv, v, bv);
            let s = t.sigmoid(y);
            t.sum_all(s)
        });
    }

    #[test]
    fn loss_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = Array2::from_shape_fn((6, 6), |_| rng.gen_range(0.05..0.95));
        let target = Array2::from_shape_fn((6, 6), |_| f64::from(rng.gen_bool(0.3)));
        let tc = target.clone();
        gradcheck(p.clone().into_dyn(), 1e-5, move |t, v| {
            t.focal_loss(v, tc.clone().into_dyn(), 0.25, 2.0)
        });

        let g = Array2::from_shape_fn((4, 9), |_| f64::from(rng.gen_bool(0.5)));
        let soft = Array2::from_shape_fn((4, 9), |_| rng.gen_range(0.05..0.95));
        let gc = g.clone();
        gradcheck(soft.into_dyn(), 1e-5, move |t, v| t.dice_sum(v, gc.clone()));

        let tgt = Array3::from_shape_fn((4, 5, 5), |_| rng.gen_range(-3.0..3.0));
        let valid = Array3::from_shape_fn((2, 5, 5), |_| f64::from(rng.gen_bool(0.4)));
        let weight = Array3::from_shape_fn((2, 5, 5), |_| rng.gen_range(0.2..2.0));
        let pred = Array3::from_shape_fn((4, 5, 5), |_| rng.gen_range(-3.0..3.0));
        gradcheck(pred.into_dyn(), 1e-5, move |t, v| {
            t.smooth_l1_masked(v, tgt.clone(), valid.clone(), weight.clone())
        });

        let logits = Array3::from_shape_fn((3, 4, 4), |_| rng.gen_range(-2.0..2.0));
        let cls = Array2::from_shape_fn((4, 4), |_| rng.gen_range(0..3usize));
        gradcheck(logits.into_dyn(), 1e-5, move |t, v| {
            t.softmax_ce_map(v, cls.clone())
        });

        let lv = Array1::from_shape_fn(5, |_| rng.gen_range(-2.0..2.0));
        gradcheck(lv.into_dyn(), 1e-5, |t, v| t.softmax_focal(v, 2, 0.25, 2.0));
    }

    #[test]
    fn concat_slice_add_scaled() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand3(&mut rng, 4, 3, 3);
        gradcheck(x.into_dyn(), 1e-6, |t, v| {
            let a = t.slice_c(v, 0, 2);
            let b = t.slice_c(v, 2, 2);
            let cat = t.concat_c(&[a, b]);
            let s1 = t.sigmoid(cat);
            let s = t.sum_all(s1);
            let m = t.mul(s1, s1);
            let sm = t.sum_all(m);
            t.add_scaled(&[(2.0, s), (0.5, sm)])
        });
    }
}
