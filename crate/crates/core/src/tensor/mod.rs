//! Dense tensors with a minimal reverse-mode autodiff graph.
//!
//! A [`Tensor`] is an immutable, reference-counted buffer. Operations on
//! tensors that require gradients record a backward closure together with
//! their parents; [`Tensor::backward`] sweeps the recorded graph once in
//! reverse topological order and accumulates gradients into the leaves.
//! The graph is consumed by the sweep, so a second call on the same graph is
//! a state error.

mod checkpoint;
mod conv;
pub mod gradcheck;
mod ops;
mod optim;
mod sample;

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{
    load_module, load_optimizer, module_records, optimizer_records, read_checkpoint, write_checkpoint, CheckpointRecord,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use conv::{Conv2dSpec, PadMode};
pub use optim::{snapshot, Adam, Module, Parameter};
pub use sample::{ResamplePlan, Tap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }
}

/// Raw tensor payload.
#[derive(Clone, PartialEq)]
pub enum Storage {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl fmt::Debug for Storage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Storage::F32(v) => write!(f, "F32(len={})", v.len()),
            Storage::F64(v) => write!(f, "F64(len={})", v.len()),
        }
    }
}

/// Applies a generic expression to whichever float type the storage holds.
macro_rules! dispatch {
    ($s:expr, $v:ident => $body:expr) => {
        match $s {
            $crate::tensor::Storage::F32($v) => $crate::tensor::Storage::F32($body),
            $crate::tensor::Storage::F64($v) => $crate::tensor::Storage::F64($body),
        }
    };
}

/// Binary variant of [`dispatch!`]; the two storages must share a dtype.
macro_rules! dispatch2 {
    ($a:expr, $b:expr, ($x:ident, $y:ident) => $body:expr) => {
        match ($a, $b) {
            ($crate::tensor::Storage::F32($x), $crate::tensor::Storage::F32($y)) => {
                Ok($crate::tensor::Storage::F32($body))
            }
            ($crate::tensor::Storage::F64($x), $crate::tensor::Storage::F64($y)) => {
                Ok($crate::tensor::Storage::F64($body))
            }
            (a, b) => Err($crate::error::Error::DType { lhs: a.dtype(), rhs: b.dtype() }),
        }
    };
}

/// Runs `$body` with `$T` bound to the element type of `$dt`.
macro_rules! with_dtype {
    ($dt:expr, $T:ident => $body:expr) => {
        match $dt {
            $crate::tensor::DType::F32 => {
                #[allow(dead_code)]
                type $T = f32;
                $body
            }
            $crate::tensor::DType::F64 => {
                #[allow(dead_code)]
                type $T = f64;
                $body
            }
        }
    };
}

pub(crate) use dispatch;
pub(crate) use with_dtype;
pub(crate) use dispatch2;

impl Storage {
    pub fn dtype(&self) -> DType {
        match self {
            Storage::F32(_) => DType::F32,
            Storage::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Storage::F32(v) => v.len(),
            Storage::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zeros(dtype: DType, n: usize) -> Self {
        Self::full(dtype, n, 0.0)
    }

    pub fn full(dtype: DType, n: usize, value: f64) -> Self {
        match dtype {
            DType::F32 => Storage::F32(vec![value as f32; n]),
            DType::F64 => Storage::F64(vec![value; n]),
        }
    }

    pub fn from_f64(dtype: DType, values: &[f64]) -> Self {
        match dtype {
            DType::F32 => Storage::F32(values.iter().map(|&v| v as f32).collect()),
            DType::F64 => Storage::F64(values.to_vec()),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            Storage::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Storage::F64(v) => v.clone(),
        }
    }

    pub fn get_f64(&self, i: usize) -> f64 {
        match self {
            Storage::F32(v) => v[i] as f64,
            Storage::F64(v) => v[i],
        }
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Storage) -> Result<()> {
        match (self, other) {
            (Storage::F32(a), Storage::F32(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += *y),
            (Storage::F64(a), Storage::F64(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += *y),
            (a, b) => return Err(Error::DType { lhs: a.dtype(), rhs: b.dtype() }),
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        match self {
            Storage::F32(v) => v.iter().all(|x| x.is_finite()),
            Storage::F64(v) => v.iter().all(|x| x.is_finite()),
        }
    }
}

/// Float element types a tensor can hold.
pub trait Element:
    Float + Default + fmt::Debug + Send + Sync + 'static + std::ops::AddAssign + std::ops::MulAssign + std::iter::Sum
{
    const DTYPE: DType;

    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Typed view of a storage of this dtype.
    fn view(s: &Storage) -> Option<&[Self]>;

    fn wrap(v: Vec<Self>) -> Storage;

    /// `c = alpha * a * b + beta * c` on row-major matrices (`a`: m x k, `b`: k x n).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_element {
    ($t:ty, $variant:ident, $dt:expr, $gemm:path) => {
        impl Element for $t {
            const DTYPE: DType = $dt;

            #[inline]
            fn of(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn view(s: &Storage) -> Option<&[Self]> {
                match s {
                    Storage::$variant(v) => Some(v),
                    _ => None,
                }
            }

            fn wrap(v: Vec<Self>) -> Storage {
                Storage::$variant(v)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_trans: bool,
                b: &[Self],
                b_trans: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
                // SAFETY: the asserted lengths cover every strided access.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_element!(f32, F32, DType::F32, matrixmultiply::sgemm);
impl_element!(f64, F64, DType::F64, matrixmultiply::dgemm);

/// Computes parent gradients from the output gradient.
pub(crate) type BackwardFn = Box<dyn FnOnce(&Storage) -> Result<Vec<Option<Storage>>>>;

struct Node {
    op: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: usize,
    shape: Vec<usize>,
    data: Storage,
    requires_grad: bool,
    node: RefCell<Option<Node>>,
    consumed: Cell<bool>,
    grad: RefCell<Option<Storage>>,
}

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

/// Reference-counted dense tensor, row-major.
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = self.0.node.borrow().as_ref().map(|n| n.op);
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("dtype", &self.dtype())
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &op)
            .finish()
    }
}

impl Tensor {
    fn build(data: Storage, shape: Vec<usize>, requires_grad: bool, node: Option<Node>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            node: RefCell::new(node),
            consumed: Cell::new(false),
            grad: RefCell::new(None),
        }))
    }

    /// Constant tensor (no gradient tracking).
    pub fn new(data: Storage, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::dim("data", format!("{} values for shape {:?}", data.len(), shape)));
        }
        Ok(Self::build(data, shape.to_vec(), false, None))
    }

    /// Leaf tensor whose gradient is accumulated by [`Tensor::backward`].
    pub fn variable(data: Storage, shape: &[usize]) -> Result<Self> {
        let t = Self::new(data, shape)?;
        Ok(Self::build(t.0.data.clone(), t.0.shape.clone(), true, None))
    }

    pub fn from_f32(values: Vec<f32>, shape: &[usize]) -> Result<Self> {
        Self::new(Storage::F32(values), shape)
    }

    pub fn from_f64(values: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::new(Storage::F64(values), shape)
    }

    pub fn from_slice(values: &[f64], shape: &[usize], dtype: DType) -> Result<Self> {
        Self::new(Storage::from_f64(dtype, values), shape)
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Self {
        Self::full(shape, 0.0, dtype)
    }

    pub fn ones(shape: &[usize], dtype: DType) -> Self {
        Self::full(shape, 1.0, dtype)
    }

    pub fn full(shape: &[usize], value: f64, dtype: DType) -> Self {
        let n = shape.iter().product();
        Self::build(Storage::full(dtype, n, value), shape.to_vec(), false, None)
    }

    pub fn scalar(value: f64, dtype: DType) -> Self {
        Self::full(&[], value, dtype)
    }

    /// Records the result of a differentiable operation. When no parent
    /// requires gradients the result is a plain constant.
    pub(crate) fn from_op(
        data: Storage,
        shape: Vec<usize>,
        op: &'static str,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        if parents.iter().any(|p| p.requires_grad()) {
            Self::build(data, shape, true, Some(Node { op, parents, backward }))
        } else {
            Self::build(data, shape, false, None)
        }
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn dtype(&self) -> DType {
        self.0.data.dtype()
    }

    pub fn storage(&self) -> &Storage {
        &self.0.data
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.borrow().is_none() && !self.0.consumed.get()
    }

    /// Name of the recording operation, if any.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.node.borrow().as_ref().map(|n| n.op)
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            s => Err(Error::dim("rank", format!("expected rank-4 tensor, got shape {s:?}"))),
        }
    }

    pub fn to_vec_f64(&self) -> Vec<f64> {
        self.0.data.to_f64_vec()
    }

    pub fn to_scalar(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::dim("numel", format!("expected a scalar, got shape {:?}", self.shape())));
        }
        Ok(self.0.data.get_f64(0))
    }

    /// Same values, no graph.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.data.clone(), self.0.shape.clone(), false, None)
    }

    pub fn to_dtype(&self, dtype: DType) -> Tensor {
        if dtype == self.dtype() {
            return self.detach();
        }
        Self::build(Storage::from_f64(dtype, &self.to_vec_f64()), self.0.shape.clone(), false, None)
    }

    /// Accumulated gradient of a leaf, as a constant tensor.
    pub fn grad(&self) -> Option<Tensor> {
        self.0.grad.borrow().as_ref().map(|g| Self::build(g.clone(), self.0.shape.clone(), false, None))
    }

    pub(crate) fn grad_storage(&self) -> std::cell::Ref<'_, Option<Storage>> {
        self.0.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Reverse sweep from a scalar loss. Consumes the recorded graph.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::State(format!("backward needs a scalar loss, got shape {:?}", self.shape())));
        }
        if self.0.consumed.get() {
            return Err(Error::State("graph already consumed by a previous backward".into()));
        }
        if !self.requires_grad() {
            return Err(Error::State("loss does not depend on any variable".into()));
        }

        let order = self.topo_order()?;
        let mut grads: HashMap<usize, Storage> = HashMap::new();
        grads.insert(self.id(), Storage::full(self.dtype(), 1, 1.0));

        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else { continue };
            let node = t.0.node.borrow_mut().take();
            match node {
                Some(node) => {
                    t.0.consumed.set(true);
                    let parent_grads = (node.backward)(&g)?;
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (p, pg) in node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        match grads.get_mut(&p.id()) {
                            Some(acc) => acc.add_assign(&pg)?,
                            None => {
                                grads.insert(p.id(), pg);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = t.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.add_assign(&g)?,
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }

    /// Tensors reachable from `self`, parents before children.
    fn topo_order(&self) -> Result<Vec<Tensor>> {
        let mut order = Vec::new();
        let mut done: HashSet<usize> = HashSet::new();
        // Iterative DFS: (tensor, children-expanded?)
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if done.contains(&t.id()) {
                continue;
            }
            done.insert(t.id());
            if t.0.consumed.get() {
                return Err(Error::State(format!(
                    "graph node '{}' was consumed by an earlier backward",
                    t.op_name().unwrap_or("?")
                )));
            }
            stack.push((t.clone(), true));
            if let Some(node) = t.0.node.borrow().as_ref() {
                for p in node.parents.iter().rev() {
                    if p.requires_grad() && !done.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        Ok(order)
    }
}

#[inline]
pub(crate) fn cst_like<T: Element>(_like: &[T], x: f64) -> T {
    T::of(x)
}

/// Typed slice of a tensor's storage; the caller has checked the dtype.
pub(crate) fn typed<T: Element>(t: &Tensor) -> &[T] {
    T::view(t.storage()).expect("dtype checked by caller")
}

pub(crate) fn typed_storage<T: Element>(s: &Storage) -> &[T] {
    T::view(s).expect("dtype checked by caller")
}

pub(crate) fn same_shape(a: &Tensor, b: &Tensor, what: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(what, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.dtype() != b.dtype() {
        return Err(Error::DType { lhs: a.dtype(), rhs: b.dtype() });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let x = Tensor::variable(Storage::F64(vec![3.0]), &[]).unwrap();
        let y = x.mul(&x).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap().to_vec_f64(), vec![6.0]);
    }

    #[test]
    fn chain_rule() {
        let x = Tensor::variable(Storage::F64(vec![1.0]), &[]).unwrap();
        let y = x.affine(2.0, 0.0).unwrap();
        let l = y.mul(&y).unwrap();
        l.backward().unwrap();
        assert_eq!(x.grad().unwrap().to_vec_f64(), vec![8.0]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let x = Tensor::variable(Storage::F64(vec![2.0]), &[]).unwrap();
        let l = x.mul(&x).unwrap();
        l.backward().unwrap();
        assert!(matches!(l.backward(), Err(Error::State(_))));
        // The leaf gradient was not doubled.
        assert_eq!(x.grad().unwrap().to_vec_f64(), vec![4.0]);
    }

    #[test]
    fn shared_subgraph_consumed() {
        let x = Tensor::variable(Storage::F64(vec![2.0]), &[]).unwrap();
        let y = x.mul(&x).unwrap();
        let a = y.affine(1.0, 1.0).unwrap();
        a.backward().unwrap();
        let b = y.affine(3.0, 0.0).unwrap();
        assert!(matches!(b.backward(), Err(Error::State(_))));
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let x = Tensor::variable(Storage::F64(vec![1.0, 2.0]), &[2]).unwrap();
        let y = x.mul(&x).unwrap();
        assert!(matches!(y.backward(), Err(Error::State(_))));
    }

    #[test]
    fn constant_ops_do_not_record() {
        let a = Tensor::ones(&[2, 2], DType::F32);
        let b = a.add(&a).unwrap();
        assert!(!b.requires_grad());
        assert!(b.op_name().is_none());
    }

    #[test]
    fn data_length_checked() {
        assert!(matches!(Tensor::from_f64(vec![1.0; 5], &[2, 3]), Err(Error::Dim { .. })));
    }
}
