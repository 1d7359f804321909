//! A small reverse-mode automatic differentiation engine over `ndarray`.
//!
//! Tensors are reference-counted nodes in a dynamically built graph. Every
//! op records its parents and a closure that routes the output gradient back
//! to them; [`Tensor::backward`] runs the closures in reverse topological
//! order. Everything is `f64` so gradients can be checked against central
//! finite differences at full precision.
//!
//! The engine is single-threaded at the graph level (nodes are `Rc`);
//! convolution kernels parallelize internally over the batch dimension with
//! deterministic, order-preserving reductions.

mod conv;
mod ops;

pub use conv::{conv2d, conv_transpose2d};
pub use ops::{batch_norm, concat_channels, max_pool2, pixel_shuffle, softmax_channels};

use ndarray::{ArrayD, IxDyn};
use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// While alive, newly created ops do not record gradient information.
pub struct NoGradGuard {
    prev: bool,
}

/// Enter inference mode: ops built while the guard lives produce plain
/// leaves, so no graph is retained.
pub fn no_grad() -> NoGradGuard {
    let prev = NO_GRAD.with(|f| f.replace(true));
    NoGradGuard { prev }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        let prev = self.prev;
        NO_GRAD.with(|f| f.set(prev));
    }
}

type BackwardFn = Box<dyn Fn(&ArrayD<f64>, &ArrayD<f64>)>;

struct Node {
    id: u64,
    data: RefCell<ArrayD<f64>>,
    grad: RefCell<Option<ArrayD<f64>>>,
    needs_grad: bool,
    parents: Vec<Tensor>,
    /// Called with (output gradient, output data); accumulates into parents.
    backward: Option<BackwardFn>,
}

/// A node in the autodiff graph holding an n-dimensional `f64` array.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.node.id)
            .field("shape", &self.shape())
            .field("needs_grad", &self.node.needs_grad)
            .finish()
    }
}

impl Tensor {
    fn new_node(
        data: ArrayD<f64>,
        needs_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                needs_grad,
                parents,
                backward,
            }),
        }
    }

    /// A constant leaf: no gradient is tracked through it.
    pub fn leaf(data: ArrayD<f64>) -> Tensor {
        Tensor::new_node(data, false, Vec::new(), None)
    }

    /// A trainable leaf: gradients accumulate here during `backward`.
    pub fn param(data: ArrayD<f64>) -> Tensor {
        Tensor::new_node(data, true, Vec::new(), None)
    }

    /// A 0-dimensional scalar leaf.
    pub fn scalar(v: f64) -> Tensor {
        Tensor::leaf(ArrayD::from_elem(IxDyn(&[]), v))
    }

    /// Builds an op node. Degrades to a plain leaf when no parent needs a
    /// gradient or when inference mode is active.
    pub(crate) fn from_op(data: ArrayD<f64>, parents: Vec<Tensor>, backward: BackwardFn) -> Tensor {
        let no_grad = NO_GRAD.with(|f| f.get());
        if no_grad || !parents.iter().any(|p| p.node.needs_grad) {
            return Tensor::leaf(data);
        }
        Tensor::new_node(data, true, parents, Some(backward))
    }

    pub fn data(&self) -> Ref<'_, ArrayD<f64>> {
        self.node.data.borrow()
    }

    /// Replaces the stored array. The shape must not change.
    pub fn set_data(&self, data: ArrayD<f64>) {
        let mut d = self.node.data.borrow_mut();
        assert_eq!(d.shape(), data.shape(), "set_data must preserve shape");
        *d = data;
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node.data.borrow().shape().to_vec()
    }

    /// Extracts the value of a 0-d (or single-element) tensor.
    pub fn value(&self) -> f64 {
        let d = self.node.data.borrow();
        assert_eq!(d.len(), 1, "value() requires a single-element tensor");
        *d.iter().next().unwrap()
    }

    pub fn needs_grad(&self) -> bool {
        self.node.needs_grad
    }

    pub fn grad(&self) -> Option<ArrayD<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// A new leaf sharing this tensor's current values but cut off from the
    /// graph.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.node.data.borrow().clone())
    }

    fn accumulate(&self, g: ArrayD<f64>) {
        debug_assert_eq!(g.shape(), self.node.data.borrow().shape());
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => *acc += &g,
            None => *slot = Some(g),
        }
    }

    /// Routes `g` into `t`'s gradient accumulator if it participates in the
    /// graph. Used by op backward closures.
    pub(crate) fn accum_if_needed(t: &Tensor, g: ArrayD<f64>) {
        if t.node.needs_grad {
            t.accumulate(g);
        }
    }

    /// Reverse-mode sweep from a scalar output. Gradients of all
    /// `needs_grad` leaves reachable from `self` are accumulated.
    pub fn backward(&self) {
        {
            let d = self.node.data.borrow();
            assert_eq!(d.len(), 1, "backward() requires a scalar output");
        }
        if !self.node.needs_grad {
            return;
        }
        // Iterative post-order DFS over parents.
        let mut topo: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        seen.insert(self.node.id);
        while let Some((t, child)) = stack.pop() {
            let parents = &t.node.parents;
            if child < parents.len() {
                stack.push((t.clone(), child + 1));
                let p = parents[child].clone();
                if p.node.needs_grad && seen.insert(p.node.id) {
                    stack.push((p, 0));
                }
            } else {
                topo.push(t);
            }
        }
        let seed_shape = self.node.data.borrow().raw_dim();
        self.accumulate(ArrayD::ones(seed_shape));
        for t in topo.iter().rev() {
            let Some(back) = t.node.backward.as_ref() else {
                continue;
            };
            let grad = t.node.grad.borrow();
            let Some(g) = grad.as_ref() else { continue };
            let data = t.node.data.borrow();
            back(g, &data);
        }
    }

    // ----- elementwise arithmetic -----

    pub fn add(&self, other: &Tensor) -> Tensor {
        binary_same_shape(self, other, |a, b| a + b, |g, _, _, _| (g.clone(), g.clone()))
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        binary_same_shape(self, other, |a, b| a - b, |g, _, _, _| (g.clone(), -g))
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        binary_same_shape(self, other, |a, b| a * b, |g, a, b, _| (g * b, g * a))
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        binary_same_shape(
            self,
            other,
            |a, b| a / b,
            |g, a, b, _| (g / b, -(g * a) / (b * b)),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn add_scalar(&self, k: f64) -> Tensor {
        unary(self, |a| a + k, move |g, _, _| g.clone())
    }

    pub fn mul_scalar(&self, k: f64) -> Tensor {
        unary(self, |a| a * k, move |g, _, _| g * k)
    }

    pub fn abs(&self) -> Tensor {
        unary(
            self,
            |a| a.mapv(f64::abs),
            |g, x, _| g * &x.mapv(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 }),
        )
    }

    pub fn square(&self) -> Tensor {
        unary(self, |a| a * a, |g, x, _| g * &(x * 2.0))
    }

    pub fn ln(&self) -> Tensor {
        unary(self, |a| a.mapv(f64::ln), |g, x, _| g / x)
    }

    /// Elementwise `max(x, c)`. The gradient passes where `x >= c`.
    pub fn clamp_min(&self, c: f64) -> Tensor {
        unary(
            self,
            move |a| a.mapv(|v| v.max(c)),
            move |g, x, _| g * &x.mapv(|v| if v >= c { 1.0 } else { 0.0 }),
        )
    }

    pub fn relu(&self) -> Tensor {
        unary(
            self,
            |a| a.mapv(|v| if v > 0.0 { v } else { 0.0 }),
            |g, x, _| g * &x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let y = self.data().mapv(stable_sigmoid);
        let x = self.clone();
        Tensor::from_op(
            y,
            vec![self.clone()],
            Box::new(move |g, out| {
                Tensor::accum_if_needed(&x, g * &out.mapv(|y| y * (1.0 - y)));
            }),
        )
    }

    // ----- reductions -----

    pub fn sum_all(&self) -> Tensor {
        let s = self.data().sum();
        let x = self.clone();
        let shape = self.shape();
        Tensor::from_op(
            ArrayD::from_elem(IxDyn(&[]), s),
            vec![self.clone()],
            Box::new(move |g, _| {
                let gv = *g.iter().next().unwrap();
                Tensor::accum_if_needed(&x, ArrayD::from_elem(IxDyn(&shape), gv));
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.data().len() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Sums over the given axes (removed from the output shape). Axes must
    /// be distinct.
    pub fn sum_axes(&self, axes: &[usize]) -> Tensor {
        let in_shape = self.shape();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), axes.len(), "sum_axes: duplicate axes");
        let mut out = self.data().clone();
        for &ax in sorted.iter().rev() {
            out = out.sum_axis(ndarray::Axis(ax));
        }
        // Shape with reduced axes kept as 1, for broadcasting in backward.
        let keep_shape: Vec<usize> = {
            let mut s = in_shape.clone();
            for &ax in &sorted {
                s[ax] = 1;
            }
            s
        };
        let x = self.clone();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let gk = g
                    .view()
                    .into_shape_with_order(IxDyn(&keep_shape))
                    .expect("sum_axes backward reshape");
                let expanded = gk
                    .broadcast(IxDyn(&in_shape))
                    .expect("sum_axes backward broadcast")
                    .to_owned();
                Tensor::accum_if_needed(&x, expanded);
            }),
        )
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn unary(
    x: &Tensor,
    f: impl Fn(&ArrayD<f64>) -> ArrayD<f64>,
    df: impl Fn(&ArrayD<f64>, &ArrayD<f64>, &ArrayD<f64>) -> ArrayD<f64> + 'static,
) -> Tensor {
    let out = f(&x.data());
    let xc = x.clone();
    Tensor::from_op(
        out,
        vec![x.clone()],
        Box::new(move |g, out_data| {
            let gx = df(g, &xc.data(), out_data);
            Tensor::accum_if_needed(&xc, gx);
        }),
    )
}

#[allow(clippy::type_complexity)]
fn binary_same_shape(
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(&ArrayD<f64>, &ArrayD<f64>) -> ArrayD<f64>,
    df: impl Fn(&ArrayD<f64>, &ArrayD<f64>, &ArrayD<f64>, &ArrayD<f64>) -> (ArrayD<f64>, ArrayD<f64>)
        + 'static,
) -> Tensor {
    assert_eq!(
        a.shape(),
        b.shape(),
        "elementwise op requires equal shapes"
    );
    let out = f(&a.data(), &b.data());
    let (ac, bc) = (a.clone(), b.clone());
    Tensor::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g, out_data| {
            let (ga, gb) = df(g, &ac.data(), &bc.data(), out_data);
            Tensor::accum_if_needed(&ac, ga);
            Tensor::accum_if_needed(&bc, gb);
        }),
    )
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::Tensor;
    use ndarray::ArrayD;

    /// Central finite differences of a scalar-valued function of one array.
    pub fn finite_diff(
        f: &mut dyn FnMut(&ArrayD<f64>) -> f64,
        x: &ArrayD<f64>,
        h: f64,
    ) -> ArrayD<f64> {
        let mut g = ArrayD::zeros(x.raw_dim());
        let mut xp = x.clone();
        for idx in ndarray::indices(x.raw_dim()) {
            let orig = xp[&idx];
            xp[&idx] = orig + h;
            let fp = f(&xp);
            xp[&idx] = orig - h;
            let fm = f(&xp);
            xp[&idx] = orig;
            g[&idx] = (fp - fm) / (2.0 * h);
        }
        g
    }

    /// Max relative error between two gradient arrays, with an absolute
    /// floor so near-zero entries compare sanely.
    pub fn max_rel_err(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3))
            .fold(0.0, f64::max)
    }

    /// Checks the autodiff gradient of `build` (a scalar-valued graph over
    /// one input) against central finite differences.
    pub fn check_input_grad(
        build: &dyn Fn(&Tensor) -> Tensor,
        x0: &ArrayD<f64>,
        tol: f64,
    ) -> f64 {
        let x = Tensor::param(x0.clone());
        let loss = build(&x);
        loss.backward();
        let auto = x.grad().expect("input gradient missing");
        let mut eval = |a: &ArrayD<f64>| {
            let t = Tensor::leaf(a.clone());
            build(&t).value()
        };
        let fd = finite_diff(&mut eval, x0, 1e-5);
        let err = max_rel_err(&auto, &fd);
        assert!(
            err < tol,
            "gradient mismatch: max rel err {err:.3e} (tol {tol:.1e})"
        );
        err
    }
}
