//! Dense n-dimensional arrays with reverse-mode automatic differentiation.
//!
//! The operator set is deliberately closed: it covers exactly what the
//! architectures in [`crate::model`] need (elementwise arithmetic, matmul,
//! same-padded convolution, max-pooling, batch normalization, activations,
//! dropout, reductions, reshape/concat, and a binary cross-entropy head).
//! Every op that sees an input with `requires_grad` records itself on the
//! implicit tape; [`backward`] replays the tape in reverse and accumulates
//! gradients by summation.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

pub mod ops;

/// Scalar element type for tensors. Training runs in `f32`; gradient
/// checking runs in `f64` so finite-difference tolerances are meaningful.
pub trait Scalar:
    num_like::FloatCore + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// c = a · b for row-major operands with explicit strides, beta = 0.
    ///
    /// # Safety
    /// Pointers must be valid for every index reachable through the given
    /// dimensions and strides.
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

/// Tiny float abstraction so `Scalar` does not leak a third-party trait.
mod num_like {
    pub trait FloatCore:
        Copy
        + PartialOrd
        + std::ops::Add<Output = Self>
        + std::ops::Sub<Output = Self>
        + std::ops::Mul<Output = Self>
        + std::ops::Div<Output = Self>
        + std::ops::Neg<Output = Self>
        + std::ops::AddAssign
    {
        const ZERO: Self;
        const ONE: Self;
        fn exp(self) -> Self;
        fn ln(self) -> Self;
        fn sqrt(self) -> Self;
        fn abs(self) -> Self;
        fn max_v(self, other: Self) -> Self;
        fn min_v(self, other: Self) -> Self;
        fn is_finite(self) -> bool;
    }

    macro_rules! impl_float_core {
        ($t:ty) => {
            impl FloatCore for $t {
                const ZERO: Self = 0.0;
                const ONE: Self = 1.0;
                fn exp(self) -> Self {
                    self.exp()
                }
                fn ln(self) -> Self {
                    self.ln()
                }
                fn sqrt(self) -> Self {
                    self.sqrt()
                }
                fn abs(self) -> Self {
                    self.abs()
                }
                fn max_v(self, other: Self) -> Self {
                    self.max(other)
                }
                fn min_v(self, other: Self) -> Self {
                    self.min(other)
                }
                fn is_finite(self) -> bool {
                    self.is_finite()
                }
            }
        };
    }
    impl_float_core!(f32);
    impl_float_core!(f64);
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 0.0, c, rsc, csc);
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 0.0, c, rsc, csc);
    }
}

/// Errors from tensor construction, operators, and layers.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorError {
    /// Two operands have shapes the op cannot combine.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// The value buffer length does not match the shape product.
    LengthMismatch { expected: usize, got: usize },
    /// An op that requires a scalar received something else.
    NotScalar { op: &'static str, shape: Vec<usize> },
    /// Pool window exceeds the spatial extent of the input.
    PoolTooLarge {
        input: Vec<usize>,
        pool: (usize, usize),
    },
    /// Batch statistics need at least two elements per channel.
    BatchTooSmall { elements: usize },
    /// Inference-mode batch norm was called before any training update.
    UninitializedStats,
    /// Catch-all argument violation, with the op name and what went wrong.
    InvalidArg { op: &'static str, detail: String },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {} and {}", fmt_shape(lhs), fmt_shape(rhs))
            }
            TensorError::LengthMismatch { expected, got } => {
                write!(f, "value buffer has {got} elements, shape requires {expected}")
            }
            TensorError::NotScalar { op, shape } => {
                write!(f, "{op}: expected a scalar, got shape {}", fmt_shape(shape))
            }
            TensorError::PoolTooLarge { input, pool } => write!(
                f,
                "pool window {}x{} larger than input {}",
                pool.0,
                pool.1,
                fmt_shape(input)
            ),
            TensorError::BatchTooSmall { elements } => {
                write!(f, "batch norm needs at least 2 elements per channel, got {elements}")
            }
            TensorError::UninitializedStats => {
                write!(f, "batch norm inference requested before any training update")
            }
            TensorError::InvalidArg { op, detail } => write!(f, "{op}: {detail}"),
        }
    }
}

impl std::error::Error for TensorError {}

pub(crate) fn fmt_shape(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "scalar".to_string();
    }
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

type BackwardFn<T> = Box<dyn Fn(&[T])>;

struct Node<T: Scalar> {
    shape: Vec<usize>,
    values: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    parents: Vec<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
    op: &'static str,
}

/// Shared handle to a value in the computation graph.
///
/// Cloning is cheap and aliases the same storage, so a parameter can be held
/// by a layer and an optimizer at once. A tensor created by an operator keeps
/// handles to its inputs; that chain is the tape [`backward`] walks.
pub struct Tensor<T: Scalar = f32>(Rc<Node<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor[{}] op={} grad={}",
            fmt_shape(&self.0.shape),
            self.0.op,
            self.0.requires_grad
        )
    }
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with gradient recording disabled; used by inference paths so
/// activations are dropped as soon as they are consumed.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

impl<T: Scalar> Tensor<T> {
    /// Constant tensor (does not participate in gradients).
    pub fn new(shape: &[usize], values: Vec<T>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(TensorError::LengthMismatch { expected, got: values.len() });
        }
        Ok(Tensor(Rc::new(Node {
            shape: shape.to_vec(),
            values: RefCell::new(values),
            grad: RefCell::new(None),
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
            op: "leaf",
        })))
    }

    /// Trainable leaf tensor: gradients accumulate here.
    pub fn param(shape: &[usize], values: Vec<T>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(TensorError::LengthMismatch { expected, got: values.len() });
        }
        Ok(Tensor(Rc::new(Node {
            shape: shape.to_vec(),
            values: RefCell::new(values),
            grad: RefCell::new(None),
            requires_grad: true,
            parents: Vec::new(),
            backward: None,
            op: "param",
        })))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self::new(shape, vec![T::ZERO; n]).expect("consistent by construction")
    }

    pub fn scalar(v: T) -> Self {
        Self::new(&[1], vec![v]).expect("consistent by construction")
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn len(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn op_name(&self) -> &'static str {
        self.0.op
    }

    /// Copies the values out.
    pub fn to_vec(&self) -> Vec<T> {
        self.0.values.borrow().clone()
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar");
        self.0.values.borrow()[0]
    }

    /// Overwrites the stored values (optimizer updates). Length must match.
    pub fn set_values(&self, values: &[T]) {
        let mut v = self.0.values.borrow_mut();
        assert_eq!(v.len(), values.len(), "set_values length mismatch");
        v.copy_from_slice(values);
    }

    /// Applies `f` to the value buffer in place.
    pub fn update_values(&self, f: impl FnOnce(&mut [T])) {
        f(&mut self.0.values.borrow_mut());
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[T]) {
        if !self.0.requires_grad {
            return;
        }
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += *ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    fn ptr(&self) -> *const () {
        Rc::as_ptr(&self.0) as *const ()
    }
}

/// Builds a derived node. Records parents and the backward closure only when
/// some input requires gradients and recording is enabled.
pub(crate) fn make_node<T: Scalar>(
    op: &'static str,
    shape: Vec<usize>,
    values: Vec<T>,
    parents: Vec<Tensor<T>>,
    backward: impl FnOnce() -> BackwardFn<T>,
) -> Tensor<T> {
    let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
    debug_assert_eq!(shape.iter().product::<usize>(), values.len());
    if track {
        Tensor(Rc::new(Node {
            shape,
            values: RefCell::new(values),
            grad: RefCell::new(None),
            requires_grad: true,
            parents,
            backward: Some(backward()),
            op,
        }))
    } else {
        Tensor(Rc::new(Node {
            shape,
            values: RefCell::new(values),
            grad: RefCell::new(None),
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
            op,
        }))
    }
}

/// The ordered record of executed operations reachable from one output,
/// in forward (topological) order: every op appears after the producers
/// of its inputs.
pub struct Tape<T: Scalar> {
    nodes: Vec<Tensor<T>>,
}

impl<T: Scalar> Tape<T> {
    /// Collects the subgraph below `output` in topological order.
    pub fn from_output(output: &Tensor<T>) -> Self {
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<*const ()> = HashSet::new();
        // Iterative post-order DFS: (node, next child index).
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(output.clone(), 0)];
        visited.insert(output.ptr());
        while let Some((node, child)) = stack.pop() {
            if child < node.0.parents.len() {
                let next = node.0.parents[child].clone();
                stack.push((node, child + 1));
                if visited.insert(next.ptr()) {
                    stack.push((next, 0));
                }
            } else {
                order.push(node);
            }
        }
        Tape { nodes: order }
    }

    pub fn nodes(&self) -> &[Tensor<T>] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Checks the defining invariant: producers precede consumers.
    pub fn is_topologically_ordered(&self) -> bool {
        let mut seen: HashSet<*const ()> = HashSet::new();
        for node in &self.nodes {
            for parent in &node.0.parents {
                if !seen.contains(&parent.ptr()) {
                    return false;
                }
            }
            seen.insert(node.ptr());
        }
        true
    }
}

/// Reverse-mode sweep from a scalar loss. Populates `grad` on every
/// `requires_grad` tensor reachable from `loss`; contributions from
/// multiple consumers sum.
pub fn backward<T: Scalar>(loss: &Tensor<T>) -> Result<(), TensorError> {
    if loss.len() != 1 {
        return Err(TensorError::NotScalar {
            op: "backward",
            shape: loss.shape().to_vec(),
        });
    }
    let tape = Tape::from_output(loss);
    loss.0.grad.replace(Some(vec![T::ONE]));
    for node in tape.nodes().iter().rev() {
        if !node.0.requires_grad {
            continue;
        }
        let grad = node.0.grad.borrow().clone();
        if let (Some(grad), Some(step)) = (grad, node.0.backward.as_ref()) {
            step(&grad);
        }
    }
    Ok(())
}

/// Max relative error between analytic gradients of `f` at `x` and central
/// finite differences with the given step.
///
/// `f` must be a deterministic scalar-valued function and `x` a `requires_grad`
/// leaf. The error metric is `|analytic - numeric| / max(1, |analytic| + |numeric|)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64, TensorError>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>, TensorError>,
{
    if !x.requires_grad() {
        return Err(TensorError::InvalidArg {
            op: "grad_check",
            detail: "x must require gradients".to_string(),
        });
    }
    x.zero_grad();
    let y = f(x)?;
    if y.len() != 1 {
        return Err(TensorError::NotScalar { op: "grad_check", shape: y.shape().to_vec() });
    }
    backward(&y)?;
    let analytic = x.grad().unwrap_or_else(|| vec![0.0; x.len()]);
    x.zero_grad();

    let mut max_err = 0.0f64;
    let n = x.len();
    for i in 0..n {
        let orig = x.0.values.borrow()[i];
        x.0.values.borrow_mut()[i] = orig + step;
        let plus = f(x)?.item();
        x.0.values.borrow_mut()[i] = orig - step;
        let minus = f(x)?.item();
        x.0.values.borrow_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let denom = 1.0f64.max(analytic[i].abs() + numeric.abs());
        max_err = max_err.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::ops;
    use super::*;

    fn param(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::param(shape, v).unwrap()
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let x = param(&[3], vec![1.0, 2.0, 3.0]);
        let loss = ops::sum(&x);
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let x = param(&[3], vec![1.0, 2.0, 3.0]);
        let loss = ops::sum(&ops::mul(&x, &x).unwrap());
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let x = param(&[2], vec![1.0, 2.0]);
        let err = backward(&x).unwrap_err();
        assert!(matches!(err, TensorError::NotScalar { .. }));
    }

    #[test]
    fn gradients_accumulate_across_consumers() {
        // y = sum(x) + sum(x*x); grad = 1 + 2x, matching the fused expression.
        let x = param(&[3], vec![1.0, -2.0, 0.5]);
        let a = ops::sum(&x);
        let b = ops::sum(&ops::mul(&x, &x).unwrap());
        let loss = ops::add(&a, &b).unwrap();
        backward(&loss).unwrap();
        let g = x.grad().unwrap();
        for (gi, xi) in g.iter().zip([1.0, -2.0, 0.5]) {
            assert!((gi - (1.0 + 2.0 * xi)).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_linearity_in_scalar_weights() {
        // grad of a*f + b*g == a*grad(f) + b*grad(g)
        let vals = vec![0.3, -1.2, 2.0, 0.7];
        let (a, b) = (2.5, -1.25);
        let x = param(&[4], vals.clone());
        let f = ops::sum(&ops::mul(&x, &x).unwrap());
        let g = ops::mean(&x);
        let combined = ops::add(&ops::scale(&f, a), &ops::scale(&g, b)).unwrap();
        backward(&combined).unwrap();
        let got = x.grad().unwrap();

        let xf = param(&[4], vals.clone());
        backward(&ops::sum(&ops::mul(&xf, &xf).unwrap())).unwrap();
        let xg = param(&[4], vals);
        backward(&ops::mean(&xg)).unwrap();
        let gf = xf.grad().unwrap();
        let gg = xg.grad().unwrap();
        for i in 0..4 {
            assert!((got[i] - (a * gf[i] + b * gg[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_is_topologically_ordered() {
        let x = param(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = ops::mul(&x, &x).unwrap();
        let z = ops::add(&y, &x).unwrap();
        let loss = ops::mean(&ops::relu(&z));
        let tape = Tape::from_output(&loss);
        assert!(tape.is_topologically_ordered());
        assert!(tape.len() >= 5);
    }

    #[test]
    fn grad_check_on_sum_is_exact() {
        let x = param(&[5], vec![0.1, -0.4, 0.9, 2.0, -3.0]);
        let err = grad_check(|x| Ok(ops::sum(x)), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "err = {err}");
    }

    #[test]
    fn no_grad_suppresses_recording() {
        let x = param(&[2], vec![1.0, 2.0]);
        let y = no_grad(|| ops::mul(&x, &x).unwrap());
        assert!(!y.requires_grad());
        assert!(Tape::from_output(&y).len() == 1);
    }
}
