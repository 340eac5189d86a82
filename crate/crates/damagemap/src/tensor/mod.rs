//! Minimal reverse-mode automatic differentiation over `ndarray`.
//!
//! The model is trained with exact analytic gradients, so every operation the
//! network uses is implemented twice: a forward evaluation and a backward
//! rule. Computations are recorded on a flat [`Tape`]; calling
//! [`Tape::backward`] on a scalar node walks the tape in reverse and
//! accumulates gradients into the parameter leaves.
//!
//! The engine is deliberately small: only the operations the architecture
//! needs exist, every one of them is covered by a central-finite-difference
//! test in double precision, and everything runs single-threaded so results
//! are bit-for-bit reproducible.
//!
//! Scalars are generic over [`Scalar`] (`f32` for training speed, `f64` for
//! gradient checking). Matrix products dispatch to `ndarray`'s GEMM backend.

mod attention;
mod conv;
mod norm;
mod resize;

pub use norm::{BnMode, BnStats};

use ndarray::{ArrayD, Ix2, IxDyn};

/// Element type the tape can differentiate through.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn into_f64(self) -> f64 {
        self
    }
}

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor(pub(crate) usize);

/// Backward rule: `(output_grad, output_value, parent_values)` → per-parent
/// gradients. `None` entries are parents the op knows need no gradient.
type BackwardFn<S> = Box<dyn Fn(&ArrayD<S>, &ArrayD<S>, &[&ArrayD<S>]) -> Vec<Option<ArrayD<S>>>>;

struct Node<S: Scalar> {
    value: ArrayD<S>,
    grad: Option<ArrayD<S>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<S>>,
    needs_grad: bool,
    is_param: bool,
}

/// Records a computation as a sequence of nodes and replays it backwards.
///
/// A tape created with [`Tape::new`] records backward rules for any value
/// that (transitively) depends on a [`Tape::param`] leaf. An inference tape
/// ([`Tape::inference`]) records values only, which lets memory-heavy ops
/// such as attention take streaming shortcuts.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grad_enabled: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    /// Tape that records gradients.
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grad_enabled: true }
    }

    /// Forward-only tape; `backward` must not be called on it.
    pub fn inference() -> Self {
        Tape { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Inserts a constant leaf (inputs, masks); no gradient flows into it.
    pub fn leaf(&mut self, value: ArrayD<S>) -> Tensor {
        self.insert(Node {
            value,
            grad: None,
            parents: Vec::new(),
            backward: None,
            needs_grad: false,
            is_param: false,
        })
    }

    /// Inserts a differentiable leaf; its gradient is retained by `backward`.
    pub fn param(&mut self, value: ArrayD<S>) -> Tensor {
        let needs = self.grad_enabled;
        self.insert(Node {
            value,
            grad: None,
            parents: Vec::new(),
            backward: None,
            needs_grad: needs,
            is_param: needs,
        })
    }

    /// Convenience: 0-d constant.
    pub fn scalar(&mut self, v: S) -> Tensor {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn value(&self, t: Tensor) -> &ArrayD<S> {
        &self.nodes[t.0].value
    }

    /// Value of a 0-d node.
    pub fn scalar_value(&self, t: Tensor) -> S {
        let v = &self.nodes[t.0].value;
        debug_assert_eq!(v.len(), 1, "scalar_value on non-scalar node");
        *v.first().expect("empty node value")
    }

    /// Gradient accumulated into a param leaf by the last `backward` call.
    pub fn grad(&self, t: Tensor) -> Option<&ArrayD<S>> {
        self.nodes[t.0].grad.as_ref()
    }

    /// True if a node built from these parents would need a backward rule.
    pub fn wants_grad(&self, parents: &[Tensor]) -> bool {
        self.grad_enabled && parents.iter().any(|&p| self.nodes[p.0].needs_grad)
    }

    fn insert(&mut self, node: Node<S>) -> Tensor {
        self.nodes.push(node);
        Tensor(self.nodes.len() - 1)
    }

    /// Records an op result. The backward rule is dropped when no parent
    /// needs a gradient, so constant subgraphs cost nothing at backward time.
    pub(crate) fn record(
        &mut self,
        value: ArrayD<S>,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn<S>>,
    ) -> Tensor {
        let needs = self.wants_grad(&parents);
        self.insert(Node {
            value,
            grad: None,
            parents: parents.into_iter().map(|t| t.0).collect(),
            backward: if needs { backward } else { None },
            needs_grad: needs,
            is_param: false,
        })
    }

    /// Reverse pass from a scalar root. Gradients of `param` leaves are
    /// stored on their nodes (query with [`Tape::grad`]); intermediate
    /// gradients are freed as soon as they have been consumed.
    pub fn backward(&mut self, root: Tensor) {
        assert!(self.grad_enabled, "backward called on an inference tape");
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<ArrayD<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::from_elem(self.nodes[root.0].value.raw_dim(), S::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(bw) = &node.backward {
                let pvals: Vec<&ArrayD<S>> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                let pgrads = bw(&g, &node.value, &pvals);
                debug_assert_eq!(pgrads.len(), node.parents.len());
                let parents = node.parents.clone();
                for (p, pg) in parents.into_iter().zip(pgrads) {
                    let Some(pg) = pg else { continue };
                    if !self.nodes[p].needs_grad {
                        continue;
                    }
                    debug_assert_eq!(pg.shape(), self.nodes[p].value.shape(), "gradient shape mismatch");
                    match &mut grads[p] {
                        Some(acc) => *acc += &pg,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            let node = &mut self.nodes[i];
            if node.is_param {
                node.grad = Some(g);
            }
        }
    }

    // ---- element-wise arithmetic ------------------------------------------

    fn binary(
        &mut self,
        a: Tensor,
        b: Tensor,
        f: impl Fn(S, S) -> S,
        // (grad, a, b) -> (da, db)
        df: impl Fn(&ArrayD<S>, &ArrayD<S>, &ArrayD<S>) -> (ArrayD<S>, ArrayD<S>) + 'static,
    ) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "element-wise op on mismatched shapes");
        let value = ndarray::Zip::from(av).and(bv).map_collect(|&x, &y| f(x, y));
        let bw: BackwardFn<S> = Box::new(move |g, _y, ps| {
            let (da, db) = df(g, ps[0], ps[1]);
            vec![Some(da), Some(db)]
        });
        self.record(value, vec![a, b], Some(bw))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.binary(a, b, |x, y| x + y, |g, _, _| (g.clone(), g.clone()))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.binary(a, b, |x, y| x - y, |g, _, _| (g.clone(), g.mapv(|v| -v)))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.binary(a, b, |x, y| x * y, |g, a, b| (g * b, g * a))
    }

    pub fn div(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.binary(
            a,
            b,
            |x, y| x / y,
            |g, a, b| {
                let da = g / b;
                let db = ndarray::Zip::from(g)
                    .and(a)
                    .and(b)
                    .map_collect(|&g, &a, &b| -g * a / (b * b));
                (da, db)
            },
        )
    }

    fn unary(
        &mut self,
        x: Tensor,
        f: impl Fn(S) -> S,
        // df(x, y) = dy/dx evaluated element-wise
        df: impl Fn(S, S) -> S + 'static,
    ) -> Tensor {
        let value = self.value(x).mapv(f);
        let bw: BackwardFn<S> = Box::new(move |g, y, ps| {
            let dx = ndarray::Zip::from(g)
                .and(ps[0])
                .and(y)
                .map_collect(|&g, &x, &y| g * df(x, y));
            vec![Some(dx)]
        });
        self.record(value, vec![x], Some(bw))
    }

    pub fn neg(&mut self, x: Tensor) -> Tensor {
        self.unary(x, |v| -v, |_, _| -S::one())
    }

    /// Element-wise absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, x: Tensor) -> Tensor {
        self.unary(
            x,
            |v| v.abs(),
            |x, _| {
                if x > S::zero() {
                    S::one()
                } else if x < S::zero() {
                    -S::one()
                } else {
                    S::zero()
                }
            },
        )
    }

    pub fn relu(&mut self, x: Tensor) -> Tensor {
        self.unary(
            x,
            |v| if v > S::zero() { v } else { S::zero() },
            |x, _| if x > S::zero() { S::one() } else { S::zero() },
        )
    }

    /// GELU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, x: Tensor) -> Tensor {
        let c = S::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
        let k = S::from_f64(0.044715);
        let half = S::from_f64(0.5);
        let three = S::from_f64(3.0);
        self.unary(
            x,
            move |v| {
                let u = c * (v + k * v * v * v);
                half * v * (S::one() + u.tanh())
            },
            move |x, _| {
                let u = c * (x + k * x * x * x);
                let t = u.tanh();
                let du = c * (S::one() + three * k * x * x);
                half * (S::one() + t) + half * x * (S::one() - t * t) * du
            },
        )
    }

    pub fn add_scalar(&mut self, x: Tensor, c: S) -> Tensor {
        self.unary(x, move |v| v + c, |_, _| S::one())
    }

    pub fn mul_scalar(&mut self, x: Tensor, c: S) -> Tensor {
        self.unary(x, move |v| v * c, move |_, _| c)
    }

    // ---- reductions --------------------------------------------------------

    /// Sum of all elements; result is 0-d.
    pub fn sum_all(&mut self, x: Tensor) -> Tensor {
        let value = ArrayD::from_elem(IxDyn(&[]), self.value(x).sum());
        let bw: BackwardFn<S> = Box::new(|g, _y, ps| {
            let gv = *g.first().expect("scalar grad");
            vec![Some(ArrayD::from_elem(ps[0].raw_dim(), gv))]
        });
        self.record(value, vec![x], Some(bw))
    }

    /// Mean of all elements; result is 0-d.
    pub fn mean_all(&mut self, x: Tensor) -> Tensor {
        let n = S::from_f64(self.value(x).len() as f64);
        let s = self.sum_all(x);
        self.mul_scalar(s, S::one() / n)
    }

    // ---- shape manipulation ------------------------------------------------

    /// Reshape preserving logical (row-major) element order.
    pub fn reshape(&mut self, x: Tensor, shape: &[usize]) -> Tensor {
        let value = reshaped(self.value(x), shape);
        let bw: BackwardFn<S> = Box::new(|g, _y, ps| vec![Some(reshaped(g, ps[0].shape()))]);
        self.record(value, vec![x], Some(bw))
    }

    /// Axis permutation; gradient applies the inverse permutation.
    pub fn permute(&mut self, x: Tensor, axes: &[usize]) -> Tensor {
        let axes_v = axes.to_vec();
        let value = self
            .value(x)
            .view()
            .permuted_axes(IxDyn(&axes_v))
            .as_standard_layout()
            .to_owned();
        let inverse = {
            let mut inv = vec![0usize; axes_v.len()];
            for (i, &a) in axes_v.iter().enumerate() {
                inv[a] = i;
            }
            inv
        };
        let bw: BackwardFn<S> = Box::new(move |g, _y, _ps| {
            vec![Some(g.view().permuted_axes(IxDyn(&inverse)).as_standard_layout().to_owned())]
        });
        self.record(value, vec![x], Some(bw))
    }

    /// Concatenation along the channel axis (axis 1) of N-d inputs.
    pub fn concat_channels(&mut self, xs: &[Tensor]) -> Tensor {
        assert!(!xs.is_empty(), "concat of zero tensors");
        let views: Vec<_> = xs.iter().map(|&t| self.value(t).view()).collect();
        let value = ndarray::concatenate(ndarray::Axis(1), &views).expect("concat shape mismatch");
        let spans: Vec<usize> = xs.iter().map(|&t| self.value(t).shape()[1]).collect();
        let bw: BackwardFn<S> = Box::new(move |g, _y, _ps| {
            let mut out = Vec::with_capacity(spans.len());
            let mut start = 0;
            for &span in &spans {
                let sl = g
                    .slice_axis(ndarray::Axis(1), ndarray::Slice::from(start..start + span))
                    .to_owned();
                out.push(Some(sl));
                start += span;
            }
            out
        });
        self.record(value, xs.to_vec(), Some(bw))
    }

    /// Extracts channel `c` of `(N, C, ...)` as `(N, ...)`.
    pub fn select_channel(&mut self, x: Tensor, c: usize) -> Tensor {
        let xs = self.value(x).shape().to_vec();
        assert!(xs.len() >= 2 && c < xs[1], "select_channel({c}) on shape {xs:?}");
        let value = self
            .value(x)
            .index_axis(ndarray::Axis(1), c)
            .as_standard_layout()
            .to_owned();
        let bw: BackwardFn<S> = Box::new(move |g, _y, ps| {
            let mut dx = ArrayD::zeros(ps[0].raw_dim());
            dx.index_axis_mut(ndarray::Axis(1), c).assign(g);
            vec![Some(dx)]
        });
        self.record(value, vec![x], Some(bw))
    }

    // ---- linear algebra ----------------------------------------------------

    /// 2-D matrix product `(m,k)·(k,n) → (m,n)`.
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let av = as2(self.value(a));
        let bv = as2(self.value(b));
        let value = av.dot(&bv).into_dyn();
        let bw: BackwardFn<S> = Box::new(|g, _y, ps| {
            let g2 = as2(g);
            let a2 = as2(ps[0]);
            let b2 = as2(ps[1]);
            vec![Some(g2.dot(&b2.t()).into_dyn()), Some(a2.t().dot(&g2).into_dyn())]
        });
        self.record(value, vec![a, b], Some(bw))
    }

    /// Affine map: `x (n,in) · w (in,out) + b (out)`.
    pub fn linear(&mut self, x: Tensor, w: Tensor, b: Tensor) -> Tensor {
        let xv = as2(self.value(x));
        let wv = as2(self.value(w));
        let bv = self.value(b);
        assert_eq!(bv.ndim(), 1, "linear bias must be 1-d");
        assert_eq!(bv.shape()[0], wv.shape()[1], "linear bias length mismatch");
        let mut value = xv.dot(&wv);
        let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().expect("bias dim");
        value += &b1;
        let bw: BackwardFn<S> = Box::new(|g, _y, ps| {
            let g2 = as2(g);
            let x2 = as2(ps[0]);
            let w2 = as2(ps[1]);
            let dx = g2.dot(&w2.t()).into_dyn();
            let dw = x2.t().dot(&g2).into_dyn();
            let db = g2.sum_axis(ndarray::Axis(0)).into_dyn();
            vec![Some(dx), Some(dw), Some(db)]
        });
        self.record(value.into_dyn(), vec![x, w, b], Some(bw))
    }
}

/// Copies an array into a new shape, honoring logical element order even for
/// non-contiguous inputs.
fn reshaped<S: Scalar>(a: &ArrayD<S>, shape: &[usize]) -> ArrayD<S> {
    let len: usize = shape.iter().product();
    assert_eq!(a.len(), len, "reshape element count mismatch: {:?} -> {:?}", a.shape(), shape);
    let flat: Vec<S> = a.iter().copied().collect();
    ArrayD::from_shape_vec(IxDyn(shape), flat).expect("reshape")
}

/// Views a dynamic array as 2-D, panicking with context if it is not.
fn as2<S: Scalar>(a: &ArrayD<S>) -> ndarray::ArrayView2<'_, S> {
    a.view()
        .into_dimensionality::<Ix2>()
        .unwrap_or_else(|_| panic!("expected 2-d array, got shape {:?}", a.shape()))
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use ndarray::ArrayD;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Uniform random array in [-1, 1], deterministic per seed.
    pub fn rand_array(seed: u64, shape: &[usize]) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-1.0..1.0))
    }

    /// Strictly positive random array in [0.5, 1.5] (for divisors, variances).
    pub fn rand_positive(seed: u64, shape: &[usize]) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(0.5..1.5))
    }

    /// Reduces an op output to a scalar by dotting with a fixed random
    /// projection, so every output element influences the loss.
    pub fn project_to_scalar(tape: &mut Tape<f64>, out: Tensor, seed: u64) -> Tensor {
        let shape = tape.value(out).shape().to_vec();
        let r = tape.leaf(rand_array(seed, &shape));
        let prod = tape.mul(out, r);
        tape.sum_all(prod)
    }

    /// Central-finite-difference validation of analytic gradients for every
    /// element of every input. `build` must be a pure function of the tape
    /// inputs it is given.
    pub fn check_gradients<F>(inputs: &[ArrayD<f64>], h: f64, tol: f64, build: F)
    where
        F: Fn(&mut Tape<f64>, &[Tensor]) -> Tensor,
    {
        let mut tape = Tape::new();
        let ts: Vec<Tensor> = inputs.iter().map(|a| tape.param(a.clone())).collect();
        let loss = build(&mut tape, &ts);
        assert_eq!(tape.value(loss).len(), 1, "build must return a scalar");
        tape.backward(loss);
        let analytic: Vec<ArrayD<f64>> = ts
            .iter()
            .map(|&t| tape.grad(t).expect("missing gradient").clone())
            .collect();

        let eval = |arrs: &[ArrayD<f64>]| -> f64 {
            let mut tape = Tape::new();
            let ts: Vec<Tensor> = arrs.iter().map(|a| tape.param(a.clone())).collect();
            let loss = build(&mut tape, &ts);
            tape.scalar_value(loss)
        };

        let mut worst = 0.0f64;
        for (k, base) in inputs.iter().enumerate() {
            for idx in ndarray::indices(base.raw_dim()) {
                let mut plus = inputs.to_vec();
                plus[k][&idx] += h;
                let fp = eval(&plus);
                let mut minus = inputs.to_vec();
                minus[k][&idx] -= h;
                let fm = eval(&minus);
                let fd = (fp - fm) / (2.0 * h);
                let an = analytic[k][&idx];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                let rel = (an - fd).abs() / denom;
                worst = worst.max(rel);
                assert!(
                    rel <= tol,
                    "gradient mismatch input {k} index {idx:?}: analytic {an:.3e} vs fd {fd:.3e} (rel {rel:.3e})"
                );
            }
        }
        eprintln!("check_gradients: worst relative error {worst:.3e} over {} inputs", inputs.len());
    }
}
