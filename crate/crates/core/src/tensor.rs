//! Reverse-mode automatic differentiation over dynamically shaped `f64` arrays.
//!
//! A [`Tape`] records the forward computation as a flat list of nodes; calling
//! [`Tensor::backward`] walks the list in reverse and accumulates gradients for
//! every [`Var`] that participated. Tensors built from plain arrays (or via
//! [`Tensor::detach`]) are constants: operations on constants do not grow the
//! tape, so evaluation without gradients falls out of the same code path.
//!
//! Shape mismatches are programming errors and panic; data-dependent failure
//! modes (zero-norm embeddings, empty batches) are checked by callers before
//! the op is recorded.

use ndarray::{ArrayD, Ix1, Ix2, Ix4, IxDyn};
use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

/// Dynamically shaped `f64` array, the only runtime dtype of the engine.
pub type ArrF = ArrayD<f64>;

static NEXT_VAR_ID: AtomicU64 = AtomicU64::new(1);

/// A named trainable parameter. Cheap to clone; clones share storage.
#[derive(Clone)]
pub struct Var {
    id: u64,
    name: String,
    value: Rc<RefCell<ArrF>>,
}

impl Var {
    pub fn new(name: impl Into<String>, value: ArrF) -> Self {
        Var {
            id: NEXT_VAR_ID.fetch_add(1, Ordering::Relaxed),
            name: name.into(),
            value: Rc::new(RefCell::new(value)),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> Ref<'_, ArrF> {
        self.value.borrow()
    }

    pub fn clone_value(&self) -> ArrF {
        self.value.borrow().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value.borrow().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.value.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn set_value(&self, v: ArrF) {
        assert_eq!(
            self.value.borrow().shape(),
            v.shape(),
            "var {}: shape changed on set_value",
            self.name
        );
        *self.value.borrow_mut() = v;
    }

    /// In-place update through a closure, used by optimizers.
    pub fn update<F: FnOnce(&mut ArrF)>(&self, f: F) {
        f(&mut self.value.borrow_mut());
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, id={}, shape={:?})", self.name, self.id, self.shape())
    }
}

type BackwardFn = Box<dyn Fn(&ArrF, &mut dyn FnMut(usize, ArrF))>;

struct Node {
    backward: BackwardFn,
    var: Option<u64>,
}

/// Records forward computation for one backward pass. Create one per step.
#[derive(Clone)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Rc::new(RefCell::new(Vec::new())) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Wrap an array as a constant (untracked) tensor.
    pub fn constant(&self, data: ArrF) -> Tensor {
        Tensor { data: Rc::new(data), node: None, tape: self.clone() }
    }

    /// Bring a parameter onto the tape; gradients will be reported for it.
    pub fn var(&self, var: &Var) -> Tensor {
        let node = self.push(Node { backward: Box::new(|_, _| {}), var: Some(var.id()) });
        Tensor { data: Rc::new(var.clone_value()), node: Some(node), tape: self.clone() }
    }
}

/// Gradients keyed by [`Var`] id, produced by [`Tensor::backward`].
pub struct Gradients {
    by_var: HashMap<u64, ArrF>,
}

impl Gradients {
    pub fn get(&self, var: &Var) -> Option<&ArrF> {
        self.by_var.get(&var.id())
    }

    pub fn is_empty(&self) -> bool {
        self.by_var.is_empty()
    }

    pub fn len(&self) -> usize {
        self.by_var.len()
    }
}

fn accumulate(slot: &mut Option<ArrF>, g: ArrF) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

/// Handle to a value on (or off) the tape. Cheap to clone.
#[derive(Clone)]
pub struct Tensor {
    data: Rc<ArrF>,
    node: Option<usize>,
    tape: Tape,
}

impl Tensor {
    pub fn data(&self) -> &ArrF {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Value of a 0-d (scalar) tensor.
    pub fn scalar(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "scalar() on tensor of shape {:?}", self.shape());
        *self.data.iter().next().unwrap()
    }

    /// Same value, severed from the tape: gradients do not flow through.
    pub fn detach(&self) -> Tensor {
        Tensor { data: Rc::clone(&self.data), node: None, tape: self.tape.clone() }
    }

    fn unary(&self, data: ArrF, backward: impl Fn(&ArrF) -> ArrF + 'static) -> Tensor {
        let node = self.node.map(|parent| {
            self.tape.push(Node {
                backward: Box::new(move |g, sink| sink(parent, backward(g))),
                var: None,
            })
        });
        Tensor { data: Rc::new(data), node, tape: self.tape.clone() }
    }

    fn binary(
        &self,
        rhs: &Tensor,
        data: ArrF,
        backward_lhs: impl Fn(&ArrF) -> ArrF + 'static,
        backward_rhs: impl Fn(&ArrF) -> ArrF + 'static,
    ) -> Tensor {
        let (ln, rn) = (self.node, rhs.node);
        let node = if ln.is_some() || rn.is_some() {
            Some(self.tape.push(Node {
                backward: Box::new(move |g, sink| {
                    if let Some(l) = ln {
                        sink(l, backward_lhs(g));
                    }
                    if let Some(r) = rn {
                        sink(r, backward_rhs(g));
                    }
                }),
                var: None,
            }))
        } else {
            None
        };
        Tensor { data: Rc::new(data), node, tape: self.tape.clone() }
    }

    pub fn add(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(self.shape(), rhs.shape(), "add: shape mismatch");
        let data = &*self.data + &*rhs.data;
        self.binary(rhs, data, |g| g.clone(), |g| g.clone())
    }

    pub fn sub(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(self.shape(), rhs.shape(), "sub: shape mismatch");
        let data = &*self.data - &*rhs.data;
        self.binary(rhs, data, |g| g.clone(), |g| -g)
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(self.shape(), rhs.shape(), "mul: shape mismatch");
        let data = &*self.data * &*rhs.data;
        let (a, b) = (Rc::clone(&self.data), Rc::clone(&rhs.data));
        self.binary(rhs, data, move |g| g * &*b, move |g| g * &*a)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(&*self.data * c, move |g| g * c)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(&*self.data + c, |g| g.clone())
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data.mapv(|v| v.max(0.0));
        let x = Rc::clone(&self.data);
        self.unary(data, move |g| {
            let mut out = g.clone();
            out.zip_mut_with(&x, |gv, &xv| {
                if xv <= 0.0 {
                    *gv = 0.0;
                }
            });
            out
        })
    }

    /// Matrix product of two 2-d tensors.
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        let a = as2(&self.data);
        let b = as2(&rhs.data);
        assert_eq!(a.ncols(), b.nrows(), "matmul: inner dims {} vs {}", a.ncols(), b.nrows());
        let data = a.dot(&b).into_dyn();
        let (ad, bd) = (Rc::clone(&self.data), Rc::clone(&rhs.data));
        self.binary(
            rhs,
            data,
            move |g| as2(g).dot(&as2(&bd).t()).into_dyn(),
            move |g| as2(&ad).t().dot(&as2(g)).into_dyn(),
        )
    }

    /// `self · rhsᵀ` for 2-d tensors (shapes `[m,k] x [n,k] -> [m,n]`).
    pub fn matmul_nt(&self, rhs: &Tensor) -> Tensor {
        let a = as2(&self.data);
        let b = as2(&rhs.data);
        assert_eq!(a.ncols(), b.ncols(), "matmul_nt: inner dims");
        let data = a.dot(&b.t()).into_dyn();
        let (ad, bd) = (Rc::clone(&self.data), Rc::clone(&rhs.data));
        self.binary(
            rhs,
            data,
            move |g| as2(g).dot(&as2(&bd)).into_dyn(),
            move |g| as2(g).t().dot(&as2(&ad)).into_dyn(),
        )
    }

    /// Add a length-`D` bias to every row of a `[B, D]` tensor.
    pub fn add_bias2d(&self, bias: &Tensor) -> Tensor {
        let x = as2(&self.data);
        let b = self::as1(&bias.data);
        assert_eq!(x.ncols(), b.len(), "add_bias2d: width mismatch");
        let data = (&x + &b).into_dyn();
        self.binary(bias, data, |g| g.clone(), |g| as2(g).sum_axis(ndarray::Axis(0)).into_dyn())
    }

    /// Add a per-channel bias to a `[B, C, H, W]` tensor.
    pub fn add_bias_channels(&self, bias: &Tensor) -> Tensor {
        let x = as4(&self.data);
        let b = as1(&bias.data);
        let (bs, c, h, w) = x.dim();
        assert_eq!(c, b.len(), "add_bias_channels: channel mismatch");
        let mut data = x.to_owned();
        for ci in 0..c {
            data.slice_mut(ndarray::s![.., ci, .., ..]).mapv_inplace(|v| v + b[ci]);
        }
        let _ = (bs, h, w);
        self.binary(bias, data.into_dyn(), |g| g.clone(), move |g| {
            let g4 = as4(g);
            let mut db = ndarray::Array1::<f64>::zeros(c);
            for ci in 0..c {
                db[ci] = g4.slice(ndarray::s![.., ci, .., ..]).sum();
            }
            db.into_dyn()
        })
    }

    /// Mean over all elements, producing a 0-d scalar tensor.
    pub fn mean_all(&self) -> Tensor {
        let n = self.data.len() as f64;
        let data = ArrF::from_elem(IxDyn(&[]), self.data.sum() / n);
        let shape = self.data.raw_dim();
        self.unary(data, move |g| {
            let gv = *g.iter().next().unwrap();
            ArrF::from_elem(shape.clone(), gv / n)
        })
    }

    /// Sum over all elements, producing a 0-d scalar tensor.
    pub fn sum_all(&self) -> Tensor {
        let data = ArrF::from_elem(IxDyn(&[]), self.data.sum());
        let shape = self.data.raw_dim();
        self.unary(data, move |g| {
            let gv = *g.iter().next().unwrap();
            ArrF::from_elem(shape.clone(), gv)
        })
    }

    /// Row sums of a `[B, D]` tensor, producing `[B]`.
    pub fn sum_rows(&self) -> Tensor {
        let x = as2(&self.data);
        let (b, d) = x.dim();
        let data = x.sum_axis(ndarray::Axis(1)).into_dyn();
        self.unary(data, move |g| {
            let g1 = as1(g);
            let mut out = ndarray::Array2::<f64>::zeros((b, d));
            for i in 0..b {
                out.row_mut(i).fill(g1[i]);
            }
            out.into_dyn()
        })
    }

    /// L2-normalize each row of a `[B, D]` tensor. Rows must have nonzero norm.
    pub fn row_l2_normalize(&self) -> Tensor {
        let x = as2(&self.data);
        let (b, d) = x.dim();
        let mut norms = ndarray::Array1::<f64>::zeros(b);
        let mut data = x.to_owned();
        for i in 0..b {
            let n = x.row(i).dot(&x.row(i)).sqrt();
            norms[i] = n;
            data.row_mut(i).mapv_inplace(|v| v / n);
        }
        let y = Rc::new(data.clone());
        self.unary(data.into_dyn(), move |g| {
            let g2 = as2(g);
            let mut out = ndarray::Array2::<f64>::zeros((b, d));
            for i in 0..b {
                let yr = y.row(i);
                let gr = g2.row(i);
                let proj = gr.dot(&yr);
                for j in 0..d {
                    out[[i, j]] = (gr[j] - yr[j] * proj) / norms[i];
                }
            }
            out.into_dyn()
        })
    }

    /// Global average pool `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&self) -> Tensor {
        let x = as4(&self.data);
        let (b, c, h, w) = x.dim();
        let m = (h * w) as f64;
        let mut data = ndarray::Array2::<f64>::zeros((b, c));
        for bi in 0..b {
            for ci in 0..c {
                data[[bi, ci]] = x.slice(ndarray::s![bi, ci, .., ..]).sum() / m;
            }
        }
        self.unary(data.into_dyn(), move |g| {
            let g2 = as2(g);
            let mut out = ndarray::Array4::<f64>::zeros((b, c, h, w));
            for bi in 0..b {
                for ci in 0..c {
                    out.slice_mut(ndarray::s![bi, ci, .., ..]).fill(g2[[bi, ci]] / m);
                }
            }
            out.into_dyn()
        })
    }

    /// Log-softmax over each row; positions where `mask` is false are treated
    /// as absent (output −∞, zero gradient).
    pub fn log_softmax_rows(&self, mask: Option<&ndarray::Array2<bool>>) -> Tensor {
        let x = as2(&self.data);
        let (b, k) = x.dim();
        if let Some(m) = mask {
            assert_eq!(m.dim(), (b, k), "log_softmax_rows: mask shape");
        }
        let valid = |i: usize, j: usize| mask.map_or(true, |m| m[[i, j]]);
        let mut out = ndarray::Array2::<f64>::from_elem((b, k), f64::NEG_INFINITY);
        for i in 0..b {
            let mut mx = f64::NEG_INFINITY;
            for j in 0..k {
                if valid(i, j) {
                    mx = mx.max(x[[i, j]]);
                }
            }
            assert!(mx.is_finite(), "log_softmax_rows: row {i} has no valid entries");
            let mut sum = 0.0;
            for j in 0..k {
                if valid(i, j) {
                    sum += (x[[i, j]] - mx).exp();
                }
            }
            let lse = mx + sum.ln();
            for j in 0..k {
                if valid(i, j) {
                    out[[i, j]] = x[[i, j]] - lse;
                }
            }
        }
        let soft = out.mapv(|v| if v.is_finite() { v.exp() } else { 0.0 });
        let mask_owned = mask.cloned();
        self.unary(out.into_dyn(), move |g| {
            let g2 = as2(g);
            let mut dx = ndarray::Array2::<f64>::zeros((b, k));
            for i in 0..b {
                let gsum: f64 = (0..k)
                    .filter(|&j| mask_owned.as_ref().map_or(true, |m| m[[i, j]]))
                    .map(|j| g2[[i, j]])
                    .sum();
                for j in 0..k {
                    if mask_owned.as_ref().map_or(true, |m| m[[i, j]]) {
                        dx[[i, j]] = g2[[i, j]] - soft[[i, j]] * gsum;
                    }
                }
            }
            dx.into_dyn()
        })
    }

    /// Pick `x[i, idx[i]]` from each row, producing `[B]`.
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let x = as2(&self.data);
        let (b, k) = x.dim();
        assert_eq!(idx.len(), b, "gather_rows: index length");
        let mut data = ndarray::Array1::<f64>::zeros(b);
        for i in 0..b {
            assert!(idx[i] < k, "gather_rows: index out of range");
            data[i] = x[[i, idx[i]]];
        }
        let idx = idx.to_vec();
        self.unary(data.into_dyn(), move |g| {
            let g1 = as1(g);
            let mut dx = ndarray::Array2::<f64>::zeros((b, k));
            for i in 0..b {
                dx[[i, idx[i]]] = g1[i];
            }
            dx.into_dyn()
        })
    }

    /// Backward pass from a scalar tensor; returns gradients for all vars used.
    pub fn backward(&self) -> Gradients {
        assert_eq!(self.data.len(), 1, "backward() requires a scalar loss");
        let mut by_var: HashMap<u64, ArrF> = HashMap::new();
        let Some(root) = self.node else {
            return Gradients { by_var };
        };
        let nodes = self.tape.nodes.borrow();
        let mut grads: Vec<Option<ArrF>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(ArrF::from_elem(self.data.raw_dim(), 1.0));
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Some(var_id) = node.var {
                match by_var.get_mut(&var_id) {
                    Some(acc) => *acc += &g,
                    None => {
                        by_var.insert(var_id, g.clone());
                    }
                }
            }
            let (before, _) = grads.split_at_mut(i);
            (node.backward)(&g, &mut |parent, contrib| {
                assert!(parent < i, "tape order violated");
                accumulate(&mut before[parent], contrib);
            });
        }
        Gradients { by_var }
    }
}

/// Concatenate 2-d tensors along axis 0.
pub fn cat0(parts: &[Tensor]) -> Tensor {
    assert!(!parts.is_empty(), "cat0: empty input");
    let tape = parts[0].tape.clone();
    let d = as2(&parts[0].data).ncols();
    let mut rows = 0usize;
    let mut ranges = Vec::with_capacity(parts.len());
    for p in parts {
        let a = as2(&p.data);
        assert_eq!(a.ncols(), d, "cat0: width mismatch");
        ranges.push((rows, rows + a.nrows()));
        rows += a.nrows();
    }
    let mut data = ndarray::Array2::<f64>::zeros((rows, d));
    for (p, &(lo, hi)) in parts.iter().zip(&ranges) {
        data.slice_mut(ndarray::s![lo..hi, ..]).assign(&as2(&p.data));
    }
    let parents: Vec<(Option<usize>, (usize, usize))> =
        parts.iter().map(|p| p.node).zip(ranges).collect();
    let tracked = parents.iter().any(|(n, _)| n.is_some());
    let node = if tracked {
        let parents = parents.clone();
        Some(tape.push(Node {
            backward: Box::new(move |g, sink| {
                let g2 = as2(g);
                for (n, (lo, hi)) in &parents {
                    if let Some(idx) = n {
                        sink(*idx, g2.slice(ndarray::s![*lo..*hi, ..]).to_owned().into_dyn());
                    }
                }
            }),
            var: None,
        }))
    } else {
        None
    };
    Tensor { data: Rc::new(data.into_dyn()), node, tape }
}

/// 2-d convolution via im2col. `x: [B, Cin, H, W]`, `w: [Cout, Cin, KH, KW]`.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let xv = as4(&x.data);
    let wv = as4(&w.data);
    let (b, cin, h, wd) = xv.dim();
    let (cout, wcin, kh, kw) = wv.dim();
    assert_eq!(cin, wcin, "conv2d: channel mismatch");
    assert!(stride >= 1, "conv2d: stride");
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;

    let cols = im2col(&xv, kh, kw, stride, pad, oh, ow);
    let wmat = wv
        .to_shape((cout, cin * kh * kw))
        .expect("conv2d: weight reshape")
        .to_owned();
    let out_mat = wmat.dot(&cols); // [Cout, B*OH*OW]
    let mut out = ndarray::Array4::<f64>::zeros((b, cout, oh, ow));
    for bi in 0..b {
        for co in 0..cout {
            for y in 0..oh {
                for xx in 0..ow {
                    out[[bi, co, y, xx]] = out_mat[[co, (bi * oh + y) * ow + xx]];
                }
            }
        }
    }

    let cols = Rc::new(cols);
    let wmat = Rc::new(wmat);
    let (xn, wn) = (x.node, w.node);
    let tape = x.tape.clone();
    let tracked = xn.is_some() || wn.is_some();
    let node = if tracked {
        let cols_b = Rc::clone(&cols);
        let wmat_b = Rc::clone(&wmat);
        Some(tape.push(Node {
            backward: Box::new(move |g, sink| {
                let g4 = as4(g);
                let mut g_mat = ndarray::Array2::<f64>::zeros((cout, b * oh * ow));
                for bi in 0..b {
                    for co in 0..cout {
                        for y in 0..oh {
                            for xx in 0..ow {
                                g_mat[[co, (bi * oh + y) * ow + xx]] = g4[[bi, co, y, xx]];
                            }
                        }
                    }
                }
                if let Some(widx) = wn {
                    let dw = g_mat.dot(&cols_b.t());
                    let dw4 = dw
                        .to_shape((cout, cin, kh, kw))
                        .expect("conv2d: grad reshape")
                        .to_owned();
                    sink(widx, dw4.into_dyn());
                }
                if let Some(xidx) = xn {
                    let dcols = wmat_b.t().dot(&g_mat);
                    let dx = col2im(&dcols, b, cin, h, wd, kh, kw, stride, pad, oh, ow);
                    sink(xidx, dx.into_dyn());
                }
            }),
            var: None,
        }))
    } else {
        None
    };
    let out = Tensor { data: Rc::new(out.into_dyn()), node, tape };
    match bias {
        Some(bt) => out.add_bias_channels(bt),
        None => out,
    }
}

/// Batch statistics returned by [`batch_norm_train`], used to update running
/// estimates outside the tape.
pub struct BatchStats {
    pub mean: ndarray::Array1<f64>,
    pub var: ndarray::Array1<f64>,
}

/// Batch normalization in training mode over axis 1 (channels/features).
/// Accepts `[B, C]` or `[B, C, H, W]`.
pub fn batch_norm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> (Tensor, BatchStats) {
    let shape = x.shape().to_vec();
    let c = shape[1];
    assert_eq!(as1(&gamma.data).len(), c, "batch_norm: gamma size");
    assert_eq!(as1(&beta.data).len(), c, "batch_norm: beta size");
    let m: usize = shape.iter().product::<usize>() / c;
    assert!(m >= 2, "batch_norm: needs at least 2 samples per channel");

    // View as [B, C, M] for uniform handling of 2-d and 4-d inputs.
    let b = shape[0];
    let inner: usize = shape[2..].iter().product::<usize>().max(1);
    let x3 = x
        .data
        .to_shape((b, c, inner))
        .expect("batch_norm: reshape")
        .to_owned();

    let n = (b * inner) as f64;
    let mut mean = ndarray::Array1::<f64>::zeros(c);
    let mut var = ndarray::Array1::<f64>::zeros(c);
    for ci in 0..c {
        let sl = x3.slice(ndarray::s![.., ci, ..]);
        let mu = sl.sum() / n;
        mean[ci] = mu;
        var[ci] = sl.mapv(|v| (v - mu) * (v - mu)).sum() / n;
    }
    let gm = as1(&gamma.data).to_owned();
    let bt = as1(&beta.data).to_owned();
    let inv_std: ndarray::Array1<f64> = var.mapv(|v| 1.0 / (v + eps).sqrt());

    let mut xhat = x3.clone();
    for ci in 0..c {
        let mu = mean[ci];
        let is = inv_std[ci];
        xhat.slice_mut(ndarray::s![.., ci, ..]).mapv_inplace(|v| (v - mu) * is);
    }
    let mut y3 = xhat.clone();
    for ci in 0..c {
        let (g, be) = (gm[ci], bt[ci]);
        y3.slice_mut(ndarray::s![.., ci, ..]).mapv_inplace(|v| g * v + be);
    }
    let y = y3
        .into_shape_with_order(IxDyn(&shape))
        .expect("batch_norm: output reshape");

    let xhat = Rc::new(xhat);
    let (xn, gn, bn) = (x.node, gamma.node, beta.node);
    let tape = x.tape.clone();
    let tracked = xn.is_some() || gn.is_some() || bn.is_some();
    let node = if tracked {
        let xhat_b = Rc::clone(&xhat);
        let inv_std_b = inv_std.clone();
        let gm_b = gm.clone();
        let shape_b = shape.clone();
        Some(tape.push(Node {
            backward: Box::new(move |g, sink| {
                let g3 = g
                    .to_shape((b, c, inner))
                    .expect("batch_norm: grad reshape")
                    .to_owned();
                if let Some(bidx) = bn {
                    let mut db = ndarray::Array1::<f64>::zeros(c);
                    for ci in 0..c {
                        db[ci] = g3.slice(ndarray::s![.., ci, ..]).sum();
                    }
                    sink(bidx, db.into_dyn());
                }
                if let Some(gidx) = gn {
                    let mut dg = ndarray::Array1::<f64>::zeros(c);
                    for ci in 0..c {
                        dg[ci] = (&g3.slice(ndarray::s![.., ci, ..])
                            * &xhat_b.slice(ndarray::s![.., ci, ..]))
                            .sum();
                    }
                    sink(gidx, dg.into_dyn());
                }
                if let Some(xidx) = xn {
                    let mut dx = ndarray::Array3::<f64>::zeros((b, c, inner));
                    for ci in 0..c {
                        let gs = g3.slice(ndarray::s![.., ci, ..]);
                        let xs = xhat_b.slice(ndarray::s![.., ci, ..]);
                        let mean_g = gs.sum() / n;
                        let mean_gx = (&gs * &xs).sum() / n;
                        let coef = gm_b[ci] * inv_std_b[ci];
                        let mut d = dx.slice_mut(ndarray::s![.., ci, ..]);
                        d.assign(&gs);
                        d.zip_mut_with(&xs, |dv, &xv| {
                            *dv = coef * (*dv - mean_g - xv * mean_gx);
                        });
                    }
                    sink(
                        xidx,
                        dx.into_shape_with_order(IxDyn(&shape_b))
                            .expect("batch_norm: dx reshape"),
                    );
                }
            }),
            var: None,
        }))
    } else {
        None
    };
    (
        Tensor { data: Rc::new(y), node, tape },
        BatchStats { mean, var },
    )
}

/// Batch normalization in inference mode using provided running statistics.
pub fn batch_norm_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &ndarray::Array1<f64>,
    running_var: &ndarray::Array1<f64>,
    eps: f64,
) -> Tensor {
    let shape = x.shape().to_vec();
    let c = shape[1];
    let b = shape[0];
    let inner: usize = shape[2..].iter().product::<usize>().max(1);
    let gm = as1(&gamma.data).to_owned();
    let bt = as1(&beta.data).to_owned();
    let mut scale = ndarray::Array1::<f64>::zeros(c);
    let mut shift = ndarray::Array1::<f64>::zeros(c);
    for ci in 0..c {
        let is = 1.0 / (running_var[ci] + eps).sqrt();
        scale[ci] = gm[ci] * is;
        shift[ci] = bt[ci] - running_mean[ci] * gm[ci] * is;
    }
    let mut y3 = x
        .data
        .to_shape((b, c, inner))
        .expect("batch_norm_eval: reshape")
        .to_owned();
    for ci in 0..c {
        let (s, t) = (scale[ci], shift[ci]);
        y3.slice_mut(ndarray::s![.., ci, ..]).mapv_inplace(|v| s * v + t);
    }
    let y = y3
        .into_shape_with_order(IxDyn(&shape))
        .expect("batch_norm_eval: output reshape");
    let xn = x.node;
    let tape = x.tape.clone();
    let node = xn.map(|parent| {
        let shape_b = shape.clone();
        tape.push(Node {
            backward: Box::new(move |g, sink| {
                let g3 = g
                    .to_shape((b, c, inner))
                    .expect("batch_norm_eval: grad reshape")
                    .to_owned();
                let mut dx = g3;
                for ci in 0..c {
                    let s = scale[ci];
                    dx.slice_mut(ndarray::s![.., ci, ..]).mapv_inplace(|v| v * s);
                }
                sink(
                    parent,
                    dx.into_shape_with_order(IxDyn(&shape_b))
                        .expect("batch_norm_eval: dx reshape"),
                );
            }),
            var: None,
        })
    });
    Tensor { data: Rc::new(y), node, tape }
}

fn as1(a: &ArrF) -> ndarray::ArrayView1<'_, f64> {
    a.view().into_dimensionality::<Ix1>().expect("expected 1-d tensor")
}

fn as2(a: &ArrF) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("expected 2-d tensor")
}

fn as4(a: &ArrF) -> ndarray::ArrayView4<'_, f64> {
    a.view().into_dimensionality::<Ix4>().expect("expected 4-d tensor")
}

fn im2col(
    x: &ndarray::ArrayView4<'_, f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> ndarray::Array2<f64> {
    let (b, c, h, w) = x.dim();
    let mut cols = ndarray::Array2::<f64>::zeros((c * kh * kw, b * oh * ow));
    for bi in 0..b {
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    for y in 0..oh {
                        let iy = (y * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for xx in 0..ow {
                            let ix = (xx * stride + kj) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[[row, (bi * oh + y) * ow + xx]] =
                                x[[bi, ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &ndarray::Array2<f64>,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> ndarray::Array4<f64> {
    let mut x = ndarray::Array4::<f64>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    for y in 0..oh {
                        let iy = (y * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for xx in 0..ow {
                            let ix = (xx * stride + kj) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            x[[bi, ci, iy as usize, ix as usize]] +=
                                cols[[row, (bi * oh + y) * ow + xx]];
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn constant_ops_do_not_grow_tape() {
        let tape = Tape::new();
        let a = tape.constant(array![[1.0, 2.0]].into_dyn());
        let b = tape.constant(array![[3.0, 4.0]].into_dyn());
        let c = a.add(&b).mul(&b).relu();
        assert!(!c.is_tracked());
        assert_eq!(tape.len(), 0);
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::new();
        let w = Var::new("w", array![[2.0]].into_dyn());
        let x = tape.var(&w);
        let y = x.detach().mul(&x); // only one path tracked
        let loss = y.mean_all();
        let grads = loss.backward();
        // d/dw of (const(2) * w) = 2, not 2w = 4
        assert_eq!(grads.get(&w).unwrap()[[0, 0]], 2.0);
    }

    #[test]
    fn shared_var_accumulates() {
        let tape = Tape::new();
        let w = Var::new("w", array![[3.0]].into_dyn());
        let a = tape.var(&w);
        let b = tape.var(&w);
        let loss = a.mul(&b).mean_all(); // w^2
        let grads = loss.backward();
        assert_eq!(grads.get(&w).unwrap()[[0, 0]], 6.0);
    }

    #[test]
    fn matmul_grads_match_manual() {
        let tape = Tape::new();
        let a = Var::new("a", array![[1.0, 2.0], [3.0, 4.0]].into_dyn());
        let b = Var::new("b", array![[5.0], [6.0]].into_dyn());
        let at = tape.var(&a);
        let bt = tape.var(&b);
        let loss = at.matmul(&bt).sum_all();
        let g = loss.backward();
        // d/dA of sum(A·B) has rows equal to B^T.
        assert_eq!(g.get(&a).unwrap().clone(), array![[5.0, 6.0], [5.0, 6.0]].into_dyn());
        assert_eq!(g.get(&b).unwrap().clone(), array![[4.0], [6.0]].into_dyn());
    }

    #[test]
    fn scalar_requires_zero_dim() {
        let tape = Tape::new();
        let t = tape.constant(ArrF::from_elem(IxDyn(&[]), 7.0));
        assert_eq!(t.scalar(), 7.0);
    }
}
