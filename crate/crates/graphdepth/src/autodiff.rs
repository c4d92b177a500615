//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] records every operation applied to tracked [`Var`]s; calling
//! [`Tape::backward`] on a scalar output walks the recording in reverse and
//! accumulates gradients for every tracked node. Variables built with
//! [`Var::constant`] carry no tape and cost nothing extra, so inference can
//! run through the same code paths without recording anything.
//!
//! Values are stored channels-first: images and feature maps are `[C, H, W]`,
//! node-feature matrices are `[N, C]`, scalars are single-element tensors.

use ndarray::{ArrayD, Axis, IxDyn};
use std::cell::RefCell;
use std::rc::Rc;

pub type Arr = ArrayD<f64>;

/// Backward function: receives the gradient at the node's output, returns one
/// gradient per tracked parent (same order as `parents`).
type BackwardFn = Box<dyn Fn(&Arr) -> Vec<Arr>>;

struct Node {
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
struct TapeInner {
    nodes: RefCell<Vec<Node>>,
}

/// Recording of a differentiable computation.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<TapeInner>,
}

/// Gradients produced by [`Tape::backward`], indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Arr>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `v`, if `v` is tracked
    /// and received any gradient.
    pub fn wrt(&self, v: &Var) -> Option<&Arr> {
        v.node.and_then(|id| self.grads.get(id).and_then(|g| g.as_ref()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, parents: Vec<usize>, backward: Option<BackwardFn>) -> usize {
        let mut nodes = self.inner.nodes.borrow_mut();
        nodes.push(Node { parents, backward });
        nodes.len() - 1
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Create a tracked leaf (a parameter or any input we want gradients for).
    pub fn leaf(&self, value: Arr) -> Var {
        let id = self.push(Vec::new(), None);
        Var {
            value: Rc::new(value),
            node: Some(id),
            tape: Some(self.clone()),
        }
    }

    /// Run reverse accumulation from a scalar root. The root may have any
    /// shape; the seed gradient is all-ones.
    pub fn backward(&self, root: &Var) -> Gradients {
        let nodes = self.inner.nodes.borrow();
        let mut grads: Vec<Option<Arr>> = vec![None; nodes.len()];
        let root_id = root.node.expect("backward root is not tracked on a tape");
        grads[root_id] = Some(Arr::ones(root.value.raw_dim()));
        for id in (0..=root_id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if let Some(back) = &node.backward {
                let parent_grads = back(&grad);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (pid, pg) in node.parents.iter().zip(parent_grads) {
                    match &mut grads[*pid] {
                        Some(acc) => *acc += &pg,
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(grad);
        }
        Gradients { grads }
    }
}

/// A tensor value, optionally tracked on a tape.
#[derive(Clone)]
pub struct Var {
    value: Rc<Arr>,
    node: Option<usize>,
    tape: Option<Tape>,
}

fn same_tape<'a>(a: &'a Var, b: &'a Var) -> Option<&'a Tape> {
    match (&a.tape, &b.tape) {
        (Some(ta), Some(tb)) => {
            assert!(Rc::ptr_eq(&ta.inner, &tb.inner), "vars from different tapes");
            Some(ta)
        }
        (Some(t), None) | (None, Some(t)) => Some(t),
        (None, None) => None,
    }
}

/// Record a new op node. `tracked` lists (node id, index into `grads` result)
/// implicitly by order: the backward fn must return gradients in the same
/// order as `tracked`.
fn record(tape: Option<&Tape>, value: Arr, tracked: Vec<usize>, backward: BackwardFn) -> Var {
    match tape {
        Some(t) if !tracked.is_empty() => {
            let id = t.push(tracked, Some(backward));
            Var {
                value: Rc::new(value),
                node: Some(id),
                tape: Some(t.clone()),
            }
        }
        _ => Var::constant(value),
    }
}

impl Var {
    /// An untracked value: participates in computations but never receives a
    /// gradient and records nothing.
    pub fn constant(value: Arr) -> Self {
        Var {
            value: Rc::new(value),
            node: None,
            tape: None,
        }
    }

    pub fn scalar_const(v: f64) -> Self {
        Var::constant(Arr::from_elem(IxDyn(&[1]), v))
    }

    pub fn value(&self) -> &Arr {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Single element of a one-element tensor.
    pub fn scalar(&self) -> f64 {
        debug_assert_eq!(self.value.len(), 1);
        *self.value.iter().next().expect("empty tensor")
    }

    /// Drop tape tracking, keeping the value.
    pub fn detach(&self) -> Var {
        Var {
            value: self.value.clone(),
            node: None,
            tape: None,
        }
    }

    // ---- elementwise binary ----

    pub fn add(&self, rhs: &Var) -> Var {
        assert_eq!(self.shape(), rhs.shape(), "add: shape mismatch");
        let value = &*self.value + &*rhs.value;
        binary(self, rhs, value, move |g, _, _| (g.clone(), g.clone()))
    }

    pub fn sub(&self, rhs: &Var) -> Var {
        assert_eq!(self.shape(), rhs.shape(), "sub: shape mismatch");
        let value = &*self.value - &*rhs.value;
        binary(self, rhs, value, move |g, _, _| (g.clone(), -g))
    }

    pub fn mul(&self, rhs: &Var) -> Var {
        assert_eq!(self.shape(), rhs.shape(), "mul: shape mismatch");
        let value = &*self.value * &*rhs.value;
        binary(self, rhs, value, move |g, a, b| (g * b, g * a))
    }

    pub fn div(&self, rhs: &Var) -> Var {
        assert_eq!(self.shape(), rhs.shape(), "div: shape mismatch");
        let value = &*self.value / &*rhs.value;
        binary(self, rhs, value, move |g, a, b| {
            let ga = g / b;
            let gb = -(g * a) / (b * b);
            (ga, gb)
        })
    }

    /// Elementwise minimum; the gradient follows the selected side (ties go
    /// to `self`).
    pub fn min2(&self, rhs: &Var) -> Var {
        assert_eq!(self.shape(), rhs.shape(), "min2: shape mismatch");
        let a = self.value.clone();
        let b = rhs.value.clone();
        let mut value = (*a).clone();
        value.zip_mut_with(&b, |x, &y| *x = x.min(y));
        binary(self, rhs, value, move |g, a, b| {
            let mut ga = g.clone();
            let mut gb = g.clone();
            ndarray::Zip::from(&mut ga).and(&mut gb).and(a).and(b).for_each(
                |ga, gb, &x, &y| {
                    if x <= y {
                        *gb = 0.0;
                    } else {
                        *ga = 0.0;
                    }
                },
            );
            (ga, gb)
        })
    }

    // ---- elementwise unary ----

    pub fn neg(&self) -> Var {
        unary(self, -&*self.value, |g, _x, _y| -g)
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        unary(self, &*self.value + c, |g, _x, _y| g.clone())
    }

    pub fn mul_scalar(&self, c: f64) -> Var {
        unary(self, &*self.value * c, move |g, _x, _y| g * c)
    }

    pub fn abs(&self) -> Var {
        unary(self, self.value.mapv(f64::abs), |g, x, _y| {
            let mut out = g.clone();
            out.zip_mut_with(x, |g, &x| *g *= if x >= 0.0 { 1.0 } else { -1.0 });
            out
        })
    }

    pub fn exp(&self) -> Var {
        unary(self, self.value.mapv(f64::exp), |g, _x, y| g * y)
    }

    pub fn ln(&self) -> Var {
        unary(self, self.value.mapv(f64::ln), |g, x, _y| g / x)
    }

    pub fn sqrt(&self) -> Var {
        unary(self, self.value.mapv(f64::sqrt), |g, _x, y| g / (y * 2.0))
    }

    pub fn square(&self) -> Var {
        unary(self, self.value.mapv(|v| v * v), |g, x, _y| g * x * 2.0)
    }

    pub fn reciprocal(&self) -> Var {
        unary(self, self.value.mapv(f64::recip), |g, _x, y| -(g * y * y))
    }

    pub fn sigmoid(&self) -> Var {
        unary(self, self.value.mapv(|v| 1.0 / (1.0 + (-v).exp())), |g, _x, y| {
            let mut out = g.clone();
            out.zip_mut_with(y, |g, &s| *g *= s * (1.0 - s));
            out
        })
    }

    pub fn relu(&self) -> Var {
        unary(self, self.value.mapv(|v| v.max(0.0)), |g, x, _y| {
            let mut out = g.clone();
            out.zip_mut_with(x, |g, &x| {
                if x <= 0.0 {
                    *g = 0.0;
                }
            });
            out
        })
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        unary(
            self,
            self.value.mapv(|v| if v > 0.0 { v } else { slope * v }),
            move |g, x, _y| {
                let mut out = g.clone();
                out.zip_mut_with(x, |g, &x| {
                    if x <= 0.0 {
                        *g *= slope;
                    }
                });
                out
            },
        )
    }

    // ---- reductions / reshaping ----

    pub fn sum_all(&self) -> Var {
        let total: f64 = self.value.sum();
        let shape = self.value.raw_dim();
        unary_shaped(self, Arr::from_elem(IxDyn(&[1]), total), move |g, _x, _y| {
            Arr::from_elem(shape.clone(), g[[0]])
        })
    }

    pub fn mean_all(&self) -> Var {
        let n = self.value.len() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let orig = self.value.raw_dim();
        let value = self
            .value
            .to_shape(IxDyn(shape))
            .expect("reshape: incompatible size")
            .to_owned();
        unary_shaped(self, value, move |g, _x, _y| {
            g.to_shape(orig.clone()).expect("reshape back").to_owned()
        })
    }

    /// Contiguous slice along axis 0.
    pub fn slice0(&self, start: usize, len: usize) -> Var {
        let value = self
            .value
            .slice_axis(Axis(0), ndarray::Slice::from(start..start + len))
            .to_owned();
        let full = self.value.raw_dim();
        unary_shaped(self, value, move |g, _x, _y| {
            let mut out = Arr::zeros(full.clone());
            out.slice_axis_mut(Axis(0), ndarray::Slice::from(start..start + len))
                .assign(g);
            out
        })
    }

    /// Concatenate along `axis`. All parts must share the remaining dims.
    pub fn concat(axis: usize, parts: &[&Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| p.value.view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat: shape mismatch");
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let tape = parts.iter().filter_map(|p| p.tape.as_ref()).next().cloned();
        if let Some(t) = &tape {
            for p in parts {
                if let Some(pt) = &p.tape {
                    assert!(Rc::ptr_eq(&t.inner, &pt.inner), "vars from different tapes");
                }
            }
        }
        let tracked: Vec<(usize, usize)> = parts
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.node.map(|n| (i, n)))
            .collect();
        let part_index: Vec<usize> = tracked.iter().map(|(i, _)| *i).collect();
        let nodes: Vec<usize> = tracked.iter().map(|(_, n)| *n).collect();
        record(
            tape.as_ref(),
            value,
            nodes,
            Box::new(move |g| {
                let mut offsets = Vec::with_capacity(sizes.len());
                let mut acc = 0;
                for s in &sizes {
                    offsets.push(acc);
                    acc += s;
                }
                part_index
                    .iter()
                    .map(|&i| {
                        g.slice_axis(
                            Axis(axis),
                            ndarray::Slice::from(offsets[i]..offsets[i] + sizes[i]),
                        )
                        .to_owned()
                    })
                    .collect()
            }),
        )
    }

    // ---- linear algebra ----

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, rhs: &Var) -> Var {
        let a = as2(&self.value);
        let b = as2(&rhs.value);
        assert_eq!(a.ncols(), b.nrows(), "matmul: inner dims");
        let value = a.dot(&b).into_dyn();
        binary(self, rhs, value, move |g, a, b| {
            let g2 = as2(g);
            let ga = g2.dot(&as2(b).t()).into_dyn();
            let gb = as2(a).t().dot(&g2).into_dyn();
            (ga, gb)
        })
    }

    pub fn transpose2(&self) -> Var {
        let value = as2(&self.value).t().to_owned().into_dyn();
        unary_shaped(self, value, |g, _x, _y| as2(g).t().to_owned().into_dyn())
    }

    // ---- spatial ops on [C, H, W] ----

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Var {
        assert!(factor >= 1);
        let (c, h, w) = dims3(&self.value);
        let mut value = Arr::zeros(IxDyn(&[c, h * factor, w * factor]));
        {
            let x = &self.value;
            for ci in 0..c {
                for i in 0..h * factor {
                    for j in 0..w * factor {
                        value[[ci, i, j]] = x[[ci, i / factor, j / factor]];
                    }
                }
            }
        }
        unary_shaped(self, value, move |g, _x, _y| {
            let mut out = Arr::zeros(IxDyn(&[c, h, w]));
            for ci in 0..c {
                for i in 0..h * factor {
                    for j in 0..w * factor {
                        out[[ci, i / factor, j / factor]] += g[[ci, i, j]];
                    }
                }
            }
            out
        })
    }

    /// Average pooling by an integer factor (dims must divide evenly).
    pub fn avg_pool(&self, factor: usize) -> Var {
        let (c, h, w) = dims3(&self.value);
        assert!(h % factor == 0 && w % factor == 0, "avg_pool: non-divisible dims");
        let (ho, wo) = (h / factor, w / factor);
        let inv = 1.0 / (factor * factor) as f64;
        let mut value = Arr::zeros(IxDyn(&[c, ho, wo]));
        for ci in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = 0.0;
                    for di in 0..factor {
                        for dj in 0..factor {
                            s += self.value[[ci, i * factor + di, j * factor + dj]];
                        }
                    }
                    value[[ci, i, j]] = s * inv;
                }
            }
        }
        unary_shaped(self, value, move |g, _x, _y| {
            let mut out = Arr::zeros(IxDyn(&[c, h, w]));
            for ci in 0..c {
                for i in 0..ho {
                    for j in 0..wo {
                        let gv = g[[ci, i, j]] * inv;
                        for di in 0..factor {
                            for dj in 0..factor {
                                out[[ci, i * factor + di, j * factor + dj]] = gv;
                            }
                        }
                    }
                }
            }
            out
        })
    }

    /// 2x2 max pooling with stride 2; gradient routes to the argmax.
    pub fn max_pool2(&self) -> Var {
        let (c, h, w) = dims3(&self.value);
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2: odd dims");
        let (ho, wo) = (h / 2, w / 2);
        let mut value = Arr::zeros(IxDyn(&[c, ho, wo]));
        let mut arg: Vec<(usize, usize)> = Vec::with_capacity(c * ho * wo);
        for ci in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = (2 * i, 2 * j);
                    for di in 0..2 {
                        for dj in 0..2 {
                            let v = self.value[[ci, 2 * i + di, 2 * j + dj]];
                            if v > best {
                                best = v;
                                at = (2 * i + di, 2 * j + dj);
                            }
                        }
                    }
                    value[[ci, i, j]] = best;
                    arg.push(at);
                }
            }
        }
        unary_shaped(self, value, move |g, _x, _y| {
            let mut out = Arr::zeros(IxDyn(&[c, h, w]));
            let mut k = 0;
            for ci in 0..c {
                for i in 0..ho {
                    for j in 0..wo {
                        let (ai, aj) = arg[k];
                        out[[ci, ai, aj]] += g[[ci, i, j]];
                        k += 1;
                    }
                }
            }
            out
        })
    }

    /// 3x3 box filter with reflect padding (border row/col mirrored without
    /// repeating the edge sample). Used by the structural-similarity loss.
    pub fn mean_pool3_reflect(&self) -> Var {
        let (c, h, w) = dims3(&self.value);
        assert!(h >= 2 && w >= 2, "mean_pool3_reflect: needs at least 2x2");
        let refl = |i: isize, n: usize| -> usize {
            if i < 0 {
                (-i) as usize
            } else if i as usize >= n {
                2 * n - 2 - i as usize
            } else {
                i as usize
            }
        };
        let mut value = Arr::zeros(IxDyn(&[c, h, w]));
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let mut s = 0.0;
                    for di in -1..=1_isize {
                        for dj in -1..=1_isize {
                            s += self.value[[ci, refl(i as isize + di, h), refl(j as isize + dj, w)]];
                        }
                    }
                    value[[ci, i, j]] = s / 9.0;
                }
            }
        }
        unary_shaped(self, value, move |g, _x, _y| {
            let refl = |i: isize, n: usize| -> usize {
                if i < 0 {
                    (-i) as usize
                } else if i as usize >= n {
                    2 * n - 2 - i as usize
                } else {
                    i as usize
                }
            };
            let mut out = Arr::zeros(IxDyn(&[c, h, w]));
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let gv = g[[ci, i, j]] / 9.0;
                        for di in -1..=1_isize {
                            for dj in -1..=1_isize {
                                out[[ci, refl(i as isize + di, h), refl(j as isize + dj, w)]] += gv;
                            }
                        }
                    }
                }
            }
            out
        })
    }

    /// Per-channel mean over the spatial extent: `[C,H,W] -> [C]`.
    pub fn spatial_mean(&self) -> Var {
        let (c, h, w) = dims3(&self.value);
        let inv = 1.0 / (h * w) as f64;
        let mut value = Arr::zeros(IxDyn(&[c]));
        for ci in 0..c {
            let mut s = 0.0;
            for i in 0..h {
                for j in 0..w {
                    s += self.value[[ci, i, j]];
                }
            }
            value[[ci]] = s * inv;
        }
        unary_shaped(self, value, move |g, _x, _y| {
            let mut out = Arr::zeros(IxDyn(&[c, h, w]));
            for ci in 0..c {
                let gv = g[[ci]] * inv;
                for i in 0..h {
                    for j in 0..w {
                        out[[ci, i, j]] = gv;
                    }
                }
            }
            out
        })
    }

    // ---- convolution ----

    /// 2-D convolution over `[Cin,H,W]` with kernel `[Cout,Cin,kh,kw]`,
    /// zero padding and the given stride.
    pub fn conv2d(&self, kernel: &Var, bias: Option<&Var>, stride: usize, pad: usize) -> Var {
        let (cin, h, w) = dims3(&self.value);
        let kshape = kernel.shape().to_vec();
        assert_eq!(kshape.len(), 4, "conv2d: kernel must be [Cout,Cin,kh,kw]");
        let (cout, kcin, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        assert_eq!(cin, kcin, "conv2d: channel mismatch");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;

        let cols = im2col(&self.value, kh, kw, stride, pad, ho, wo);
        let kmat = kernel
            .value
            .to_shape(IxDyn(&[cout, cin * kh * kw]))
            .expect("kernel reshape")
            .to_owned();
        let mut out2 = as2(&kmat).dot(&as2(&cols));
        if let Some(b) = bias {
            assert_eq!(b.shape(), [cout]);
            for co in 0..cout {
                let bv = b.value[[co]];
                out2.row_mut(co).mapv_inplace(|v| v + bv);
            }
        }
        let value = out2
            .into_dyn()
            .to_shape(IxDyn(&[cout, ho, wo]))
            .expect("conv out reshape")
            .to_owned();

        let tape = {
            let t = same_tape(self, kernel).cloned();
            match (t, bias.and_then(|b| b.tape.clone())) {
                (Some(t), _) => Some(t),
                (None, bt) => bt,
            }
        };
        let x_val = self.value.clone();
        let k_val = kernel.value.clone();
        let cols_rc = Rc::new(cols);

        let mut tracked = Vec::new();
        let mut roles = Vec::new(); // 0 = input, 1 = kernel, 2 = bias
        if let Some(n) = self.node {
            tracked.push(n);
            roles.push(0);
        }
        if let Some(n) = kernel.node {
            tracked.push(n);
            roles.push(1);
        }
        if let Some(n) = bias.and_then(|b| b.node) {
            tracked.push(n);
            roles.push(2);
        }
        record(
            tape.as_ref(),
            value,
            tracked,
            Box::new(move |g| {
                let g2 = g
                    .to_shape(IxDyn(&[cout, ho * wo]))
                    .expect("grad reshape")
                    .to_owned();
                let g2v = as2(&g2);
                roles
                    .iter()
                    .map(|role| match role {
                        0 => {
                            let kmat = k_val
                                .to_shape(IxDyn(&[cout, cin * kh * kw]))
                                .expect("kernel reshape")
                                .to_owned();
                            let gcols = as2(&kmat).t().dot(&g2v).into_dyn();
                            col2im(&gcols, cin, h, w, kh, kw, stride, pad, ho, wo)
                        }
                        1 => {
                            let gk = g2v.dot(&as2(&cols_rc).t()).into_dyn();
                            gk.to_shape(IxDyn(&[cout, cin, kh, kw]))
                                .expect("gk reshape")
                                .to_owned()
                        }
                        _ => {
                            let mut gb = Arr::zeros(IxDyn(&[cout]));
                            for co in 0..cout {
                                gb[[co]] = g2v.row(co).sum();
                            }
                            gb
                        }
                    })
                    .collect::<Vec<_>>()
            }),
        )
        .with_unused(&x_val)
    }

    /// Per-channel normalization over the spatial extent with learnable
    /// scale/shift, computed from this sample's own statistics.
    pub fn instance_norm(&self, gamma: &Var, beta: &Var, eps: f64) -> Var {
        let (c, h, w) = dims3(&self.value);
        assert_eq!(gamma.shape(), [c]);
        assert_eq!(beta.shape(), [c]);
        let n = (h * w) as f64;
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        let mut xhat = Arr::zeros(IxDyn(&[c, h, w]));
        for ci in 0..c {
            let mut s = 0.0;
            for i in 0..h {
                for j in 0..w {
                    s += self.value[[ci, i, j]];
                }
            }
            let m = s / n;
            let mut v = 0.0;
            for i in 0..h {
                for j in 0..w {
                    let d = self.value[[ci, i, j]] - m;
                    v += d * d;
                }
            }
            let sd = (v / n + eps).sqrt();
            mean[ci] = m;
            std[ci] = sd;
            for i in 0..h {
                for j in 0..w {
                    xhat[[ci, i, j]] = (self.value[[ci, i, j]] - m) / sd;
                }
            }
        }
        let mut value = Arr::zeros(IxDyn(&[c, h, w]));
        for ci in 0..c {
            let (gm, bt) = (gamma.value[[ci]], beta.value[[ci]]);
            for i in 0..h {
                for j in 0..w {
                    value[[ci, i, j]] = gm * xhat[[ci, i, j]] + bt;
                }
            }
        }

        let tape = {
            let t = same_tape(self, gamma).cloned();
            match (t, beta.tape.clone()) {
                (Some(t), _) => Some(t),
                (None, bt) => bt,
            }
        };
        let xhat = Rc::new(xhat);
        let gamma_val = gamma.value.clone();
        let std = Rc::new(std);
        let mut tracked = Vec::new();
        let mut roles = Vec::new();
        if let Some(nid) = self.node {
            tracked.push(nid);
            roles.push(0);
        }
        if let Some(nid) = gamma.node {
            tracked.push(nid);
            roles.push(1);
        }
        if let Some(nid) = beta.node {
            tracked.push(nid);
            roles.push(2);
        }
        record(
            tape.as_ref(),
            value,
            tracked,
            Box::new(move |g| {
                roles
                    .iter()
                    .map(|role| match role {
                        0 => {
                            let mut out = Arr::zeros(IxDyn(&[c, h, w]));
                            for ci in 0..c {
                                let mut gsum = 0.0;
                                let mut gxsum = 0.0;
                                for i in 0..h {
                                    for j in 0..w {
                                        gsum += g[[ci, i, j]];
                                        gxsum += g[[ci, i, j]] * xhat[[ci, i, j]];
                                    }
                                }
                                let coef = gamma_val[[ci]] / std[ci];
                                for i in 0..h {
                                    for j in 0..w {
                                        out[[ci, i, j]] = coef
                                            * (g[[ci, i, j]]
                                                - gsum / n
                                                - xhat[[ci, i, j]] * gxsum / n);
                                    }
                                }
                            }
                            out
                        }
                        1 => {
                            let mut gg = Arr::zeros(IxDyn(&[c]));
                            for ci in 0..c {
                                let mut s = 0.0;
                                for i in 0..h {
                                    for j in 0..w {
                                        s += g[[ci, i, j]] * xhat[[ci, i, j]];
                                    }
                                }
                                gg[[ci]] = s;
                            }
                            gg
                        }
                        _ => {
                            let mut gb = Arr::zeros(IxDyn(&[c]));
                            for ci in 0..c {
                                let mut s = 0.0;
                                for i in 0..h {
                                    for j in 0..w {
                                        s += g[[ci, i, j]];
                                    }
                                }
                                gb[[ci]] = s;
                            }
                            gb
                        }
                    })
                    .collect::<Vec<_>>()
            }),
        )
    }

    /// Mean over the leading axis: `[C, ...] -> [...]`.
    pub fn mean_axis0(&self) -> Var {
        let shape = self.shape().to_vec();
        assert!(!shape.is_empty());
        let c = shape[0];
        let value = self
            .value
            .mean_axis(Axis(0))
            .expect("mean_axis0: empty axis");
        let full = self.value.raw_dim();
        unary_shaped(self, value, move |g, _x, _y| {
            let mut out = Arr::zeros(full.clone());
            let inv = 1.0 / c as f64;
            for mut lane in out.axis_iter_mut(Axis(0)) {
                lane.zip_mut_with(g, |o, &gv| *o = gv * inv);
            }
            out
        })
    }

    /// Broadcast a one-element tensor to the given shape; the gradient is the
    /// sum over all broadcast positions.
    pub fn broadcast_to(&self, shape: &[usize]) -> Var {
        assert_eq!(self.value.len(), 1, "broadcast_to: expects a scalar");
        let value = Arr::from_elem(IxDyn(shape), self.scalar());
        unary_shaped(self, value, |g, _x, _y| {
            Arr::from_elem(IxDyn(&[1]), g.iter().sum::<f64>())
        })
    }

    /// Log-softmax over the channel axis of `[N, C]`. With a single channel
    /// the per-row normalization is degenerate (it would always return zero),
    /// so the normalization runs over the node axis instead.
    pub fn log_softmax_rows(&self) -> Var {
        let shape = self.shape().to_vec();
        assert_eq!(shape.len(), 2, "log_softmax_rows: expects [N, C]");
        let (n, c) = (shape[0], shape[1]);
        assert!(c >= 1, "log_softmax_rows: zero channels");
        let x = as2(&self.value);
        let mut value = Arr::zeros(IxDyn(&[n, c]));
        if c == 1 {
            let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for i in 0..n {
                value[[i, 0]] = x[[i, 0]] - lse;
            }
        } else {
            for i in 0..n {
                let row = x.row(i);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                for j in 0..c {
                    value[[i, j]] = x[[i, j]] - lse;
                }
            }
        }
        unary_shaped(self, value, move |g, _x, y| {
            let mut out = g.clone();
            if c == 1 {
                let gsum: f64 = g.iter().sum();
                for i in 0..n {
                    out[[i, 0]] -= y[[i, 0]].exp() * gsum;
                }
            } else {
                for i in 0..n {
                    let gsum: f64 = (0..c).map(|j| g[[i, j]]).sum();
                    for j in 0..c {
                        out[[i, j]] -= y[[i, j]].exp() * gsum;
                    }
                }
            }
            out
        })
    }
}

// Helper so `conv2d` can keep `x_val` alive without clippy complaining; the
// clone is captured by the closure already, this is a no-op.
trait WithUnused {
    fn with_unused(self, _v: &Rc<Arr>) -> Self;
}
impl WithUnused for Var {
    fn with_unused(self, _v: &Rc<Arr>) -> Self {
        self
    }
}

/// Custom op with one required and one optional input. `back` receives the
/// output gradient plus both input values and returns the matching input
/// gradients (the second is ignored when `b` is absent or untracked).
pub fn custom_op2(
    a: &Var,
    b: Option<&Var>,
    value: Arr,
    back: impl Fn(&Arr, &Arr, Option<&Arr>) -> (Arr, Option<Arr>) + 'static,
) -> Var {
    let tape = match b {
        Some(b) => same_tape(a, b).cloned(),
        None => a.tape.clone(),
    };
    let av = a.value.clone();
    let bv = b.map(|b| b.value.clone());
    let (a_tracked, b_tracked) = (a.node.is_some(), b.is_some_and(|b| b.node.is_some()));
    let mut tracked = Vec::new();
    if let Some(n) = a.node {
        tracked.push(n);
    }
    if let Some(n) = b.and_then(|b| b.node) {
        tracked.push(n);
    }
    record(
        tape.as_ref(),
        value,
        tracked,
        Box::new(move |g| {
            let (ga, gb) = back(g, &av, bv.as_deref());
            let mut out = Vec::with_capacity(2);
            if a_tracked {
                out.push(ga);
            }
            if b_tracked {
                out.push(gb.expect("tracked second input must receive a gradient"));
            }
            out
        }),
    )
}

/// Custom op over three inputs; `back` returns one gradient per input, and
/// gradients of untracked inputs are dropped.
pub fn custom_op3(
    a: &Var,
    b: &Var,
    c: &Var,
    value: Arr,
    back: impl Fn(&Arr, &Arr, &Arr, &Arr) -> (Arr, Arr, Arr) + 'static,
) -> Var {
    let tape = {
        let t = same_tape(a, b).cloned();
        match (t, c.tape.clone()) {
            (Some(t), _) => Some(t),
            (None, ct) => ct,
        }
    };
    let (av, bv, cv) = (a.value.clone(), b.value.clone(), c.value.clone());
    let flags = (a.node.is_some(), b.node.is_some(), c.node.is_some());
    let mut tracked = Vec::new();
    for n in [a.node, b.node, c.node].into_iter().flatten() {
        tracked.push(n);
    }
    record(
        tape.as_ref(),
        value,
        tracked,
        Box::new(move |g| {
            let (ga, gb, gc) = back(g, &av, &bv, &cv);
            let mut out = Vec::with_capacity(3);
            if flags.0 {
                out.push(ga);
            }
            if flags.1 {
                out.push(gb);
            }
            if flags.2 {
                out.push(gc);
            }
            out
        }),
    )
}

fn as2(a: &Arr) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality().expect("expected 2-D tensor")
}

pub(crate) fn dims3(a: &Arr) -> (usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 3, "expected [C,H,W] tensor, got {:?}", s);
    (s[0], s[1], s[2])
}

fn im2col(x: &Arr, kh: usize, kw: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Arr {
    let (cin, h, w) = dims3(x);
    let mut cols = Arr::zeros(IxDyn(&[cin * kh * kw, ho * wo]));
    for ci in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for i in 0..ho {
                    let si = (i * stride + ki) as isize - pad as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for j in 0..wo {
                        let sj = (j * stride + kj) as isize - pad as isize;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        cols[[row, i * wo + j]] = x[[ci, si as usize, sj as usize]];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    gcols: &Arr,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Arr {
    let mut gx = Arr::zeros(IxDyn(&[cin, h, w]));
    for ci in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for i in 0..ho {
                    let si = (i * stride + ki) as isize - pad as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for j in 0..wo {
                        let sj = (j * stride + kj) as isize - pad as isize;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        gx[[ci, si as usize, sj as usize]] += gcols[[row, i * wo + j]];
                    }
                }
            }
        }
    }
    gx
}

/// Record a unary op whose backward may use the input `x` and output `y`.
fn unary(v: &Var, value: Arr, back: impl Fn(&Arr, &Arr, &Arr) -> Arr + 'static) -> Var {
    let x = v.value.clone();
    let y = Rc::new(value.clone());
    record(
        v.tape.as_ref(),
        value,
        v.node.into_iter().collect(),
        Box::new(move |g| vec![back(g, &x, &y)]),
    )
}

/// Like [`unary`] but the output shape differs from the input shape.
fn unary_shaped(v: &Var, value: Arr, back: impl Fn(&Arr, &Arr, &Arr) -> Arr + 'static) -> Var {
    unary(v, value, back)
}

/// Record a binary op; backward receives (grad, lhs value, rhs value) and
/// returns both parent gradients (unused ones are dropped).
fn binary(
    a: &Var,
    b: &Var,
    value: Arr,
    back: impl Fn(&Arr, &Arr, &Arr) -> (Arr, Arr) + 'static,
) -> Var {
    let tape = same_tape(a, b).cloned();
    let av = a.value.clone();
    let bv = b.value.clone();
    let (a_tracked, b_tracked) = (a.node.is_some(), b.node.is_some());
    let mut tracked = Vec::new();
    if let Some(n) = a.node {
        tracked.push(n);
    }
    if let Some(n) = b.node {
        tracked.push(n);
    }
    record(
        tape.as_ref(),
        value,
        tracked,
        Box::new(move |g| {
            let (ga, gb) = back(g, &av, &bv);
            let mut out = Vec::with_capacity(2);
            if a_tracked {
                out.push(ga);
            }
            if b_tracked {
                out.push(gb);
            }
            out
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
        Arr::from_shape_fn(IxDyn(shape), |_| {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
    }

    /// Central finite differences of a scalar-valued function against the
    /// tape gradient, elementwise relative error.
    fn grad_check(f: impl Fn(&[Var]) -> Var, inputs: &[Arr], eps: f64, tol: f64) {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
        let out = f(&vars);
        assert_eq!(out.value().len(), 1, "grad_check expects scalar output");
        let grads = tape.backward(&out);
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads
                .wrt(&vars[k])
                .cloned()
                .unwrap_or_else(|| Arr::zeros(input.raw_dim()));
            for idx in 0..input.len() {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                plus[k].as_slice_mut().unwrap()[idx] += eps;
                minus[k].as_slice_mut().unwrap()[idx] -= eps;
                let fp = f(&plus.iter().cloned().map(Var::constant).collect::<Vec<_>>()).scalar();
                let fm = f(&minus.iter().cloned().map(Var::constant).collect::<Vec<_>>()).scalar();
                let numeric = (fp - fm) / (2.0 * eps);
                let a = analytic.as_slice().unwrap()[idx];
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    (a - numeric).abs() / denom < tol,
                    "input {k} element {idx}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn elementwise_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[3, 4]).mapv(|v| v + 3.0); // keep away from 0 for div
        grad_check(|v| v[0].mul(&v[1]).sum_all(), &[a.clone(), b.clone()], 1e-6, 1e-6);
        grad_check(|v| v[0].div(&v[1]).sum_all(), &[a.clone(), b.clone()], 1e-6, 1e-6);
        grad_check(|v| v[0].sigmoid().mean_all(), &[a.clone()], 1e-6, 1e-6);
        grad_check(|v| v[0].exp().sum_all(), &[a.clone()], 1e-6, 1e-6);
        grad_check(|v| v[0].leaky_relu(0.01).sum_all(), &[a.clone()], 1e-6, 1e-5);
        grad_check(|v| v[0].min2(&v[1]).sum_all(), &[a, b], 1e-6, 1e-5);
    }

    #[test]
    fn matmul_and_reshape_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = randn(&mut rng, &[3, 5]);
        let b = randn(&mut rng, &[5, 2]);
        grad_check(
            |v| v[0].matmul(&v[1]).square().sum_all(),
            &[a.clone(), b],
            1e-6,
            1e-6,
        );
        grad_check(|v| v[0].reshape(&[15]).slice0(4, 6).sum_all(), &[a], 1e-6, 1e-6);
    }

    #[test]
    fn spatial_op_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = randn(&mut rng, &[2, 4, 4]);
        grad_check(|v| v[0].upsample_nearest(2).square().sum_all(), &[x.clone()], 1e-6, 1e-6);
        grad_check(|v| v[0].avg_pool(2).square().sum_all(), &[x.clone()], 1e-6, 1e-6);
        grad_check(|v| v[0].max_pool2().square().sum_all(), &[x.clone()], 1e-6, 1e-5);
        grad_check(|v| v[0].mean_pool3_reflect().square().sum_all(), &[x.clone()], 1e-6, 1e-6);
        grad_check(|v| v[0].spatial_mean().square().sum_all(), &[x], 1e-6, 1e-6);
    }

    #[test]
    fn conv2d_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = randn(&mut rng, &[2, 5, 6]);
        let k = randn(&mut rng, &[3, 2, 3, 3]);
        let b = randn(&mut rng, &[3]);
        grad_check(
            |v| v[0].conv2d(&v[1], Some(&v[2]), 1, 1).square().sum_all(),
            &[x.clone(), k.clone(), b.clone()],
            1e-6,
            1e-6,
        );
        grad_check(
            |v| v[0].conv2d(&v[1], Some(&v[2]), 2, 1).square().sum_all(),
            &[x, k, b],
            1e-6,
            1e-6,
        );
    }

    #[test]
    fn instance_norm_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = randn(&mut rng, &[2, 3, 4]);
        let g = randn(&mut rng, &[2]);
        let b = randn(&mut rng, &[2]);
        // Weight the output by a fixed random tensor; a plain sum of squares
        // is nearly invariant to the input after normalization, which starves
        // the finite-difference signal.
        let probe = Var::constant(randn(&mut rng, &[2, 3, 4]));
        grad_check(
            move |v| v[0].instance_norm(&v[1], &v[2], 1e-5).mul(&probe).sum_all(),
            &[x, g, b],
            1e-6,
            1e-5,
        );
    }

    #[test]
    fn log_softmax_rows_normalizes_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = randn(&mut rng, &[4, 3]);
        let y = Var::constant(x.clone()).log_softmax_rows();
        for i in 0..4 {
            let s: f64 = (0..3).map(|j| y.value()[[i, j]].exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        grad_check(
            |v| v[0].log_softmax_rows().square().sum_all(),
            &[x],
            1e-6,
            1e-6,
        );
        // Single channel: normalization runs over nodes instead.
        let x1 = randn(&mut rng, &[5, 1]);
        let y1 = Var::constant(x1.clone()).log_softmax_rows();
        let s: f64 = (0..5).map(|i| y1.value()[[i, 0]].exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
        grad_check(
            |v| v[0].log_softmax_rows().square().sum_all(),
            &[x1],
            1e-6,
            1e-6,
        );
    }

    #[test]
    fn constants_record_nothing() {
        let a = Var::constant(Arr::ones(IxDyn(&[2, 2])));
        let b = Var::constant(Arr::ones(IxDyn(&[2, 2])));
        let c = a.mul(&b).sum_all();
        assert!(!c.is_tracked());
    }

    #[test]
    fn gradient_accumulates_over_shared_inputs() {
        let tape = Tape::new();
        let x = tape.leaf(Arr::from_elem(IxDyn(&[1]), 3.0));
        let y = x.mul(&x); // x^2, dy/dx = 2x = 6
        let grads = tape.backward(&y);
        assert!((grads.wrt(&x).unwrap()[[0]] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn concat_splits_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(Arr::ones(IxDyn(&[2, 2])));
        let b = tape.leaf(Arr::ones(IxDyn(&[3, 2])));
        let c = Var::concat(0, &[&a, &b]);
        assert_eq!(c.shape(), [5, 2]);
        let out = c.mul_scalar(2.0).sum_all();
        let grads = tape.backward(&out);
        assert_eq!(grads.wrt(&a).unwrap().shape(), [2, 2]);
        assert!(grads.wrt(&b).unwrap().iter().all(|&v| (v - 2.0).abs() < 1e-12));
    }
}
