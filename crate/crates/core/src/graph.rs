//! Execution backends for the model code.
//!
//! The ViT forward pass is written once against [`Graph`]. [`Eager`]
//! evaluates it directly on tensors; [`crate::train::Tape`] records it so
//! gradients can be pulled back through exactly the same computation.

use std::borrow::Cow;
use std::marker::PhantomData;

use crate::error::Result;
use crate::tensor::{self, Scalar, Tensor};
use crate::vit::Param;

pub trait Graph<'p, T: Scalar> {
    type Var: Clone;

    /// A named model parameter, borrowed for the lifetime of the graph.
    fn param(&mut self, name: &str, param: &'p Param<T>) -> Self::Var;
    /// A constant input (no gradient).
    fn input(&mut self, value: Tensor<T>) -> Self::Var;
    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor<T>;

    fn matmul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    /// `a · bᵀ`
    fn matmul_nt(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn add_bias(&mut self, x: &Self::Var, bias: &Self::Var) -> Result<Self::Var>;
    fn scale(&mut self, x: &Self::Var, s: T) -> Result<Self::Var>;
    fn softmax_rows(&mut self, x: &Self::Var) -> Result<Self::Var>;
    fn layer_norm(
        &mut self,
        x: &Self::Var,
        gamma: &Self::Var,
        beta: &Self::Var,
        eps: T,
    ) -> Result<Self::Var>;
    fn gelu(&mut self, x: &Self::Var) -> Result<Self::Var>;
    fn slice_cols(&mut self, x: &Self::Var, start: usize, len: usize) -> Result<Self::Var>;
    fn concat_cols(&mut self, parts: &[Self::Var]) -> Result<Self::Var>;
    fn concat_rows(&mut self, parts: &[Self::Var]) -> Result<Self::Var>;
    fn row(&mut self, x: &Self::Var, i: usize) -> Result<Self::Var>;
}

/// Direct evaluation: every variable is just its tensor value.
#[derive(Debug, Default)]
pub struct Eager<'p, T: Scalar> {
    _borrow: PhantomData<&'p T>,
}

impl<'p, T: Scalar> Eager<'p, T> {
    pub fn new() -> Self {
        Self {
            _borrow: PhantomData,
        }
    }
}

type V<'p, T> = Cow<'p, Tensor<T>>;

impl<'p, T: Scalar> Graph<'p, T> for Eager<'p, T> {
    type Var = V<'p, T>;

    fn param(&mut self, _name: &str, param: &'p Param<T>) -> V<'p, T> {
        Cow::Borrowed(&param.tensor)
    }

    fn input(&mut self, value: Tensor<T>) -> V<'p, T> {
        Cow::Owned(value)
    }

    fn value<'a>(&'a self, v: &'a V<'p, T>) -> &'a Tensor<T> {
        v
    }

    fn matmul(&mut self, a: &V<'p, T>, b: &V<'p, T>) -> Result<V<'p, T>> {
        tensor::matmul(a, b).map(Cow::Owned)
    }

    fn matmul_nt(&mut self, a: &V<'p, T>, b: &V<'p, T>) -> Result<V<'p, T>> {
        tensor::matmul_nt(a, b).map(Cow::Owned)
    }

    fn add(&mut self, a: &V<'p, T>, b: &V<'p, T>) -> Result<V<'p, T>> {
        tensor::add(a, b).map(Cow::Owned)
    }

    fn add_bias(&mut self, x: &V<'p, T>, bias: &V<'p, T>) -> Result<V<'p, T>> {
        tensor::add_row_broadcast(x, bias).map(Cow::Owned)
    }

    fn scale(&mut self, x: &V<'p, T>, s: T) -> Result<V<'p, T>> {
        tensor::scale(x, s).map(Cow::Owned)
    }

    fn softmax_rows(&mut self, x: &V<'p, T>) -> Result<V<'p, T>> {
        tensor::softmax_rows(x).map(Cow::Owned)
    }

    fn layer_norm(
        &mut self,
        x: &V<'p, T>,
        gamma: &V<'p, T>,
        beta: &V<'p, T>,
        eps: T,
    ) -> Result<V<'p, T>> {
        tensor::layer_norm(x, gamma, beta, eps).map(Cow::Owned)
    }

    fn gelu(&mut self, x: &V<'p, T>) -> Result<V<'p, T>> {
        tensor::gelu(x).map(Cow::Owned)
    }

    fn slice_cols(&mut self, x: &V<'p, T>, start: usize, len: usize) -> Result<V<'p, T>> {
        tensor::slice_cols(x, start, len).map(Cow::Owned)
    }

    fn concat_cols(&mut self, parts: &[V<'p, T>]) -> Result<V<'p, T>> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|p| p.as_ref()).collect();
        tensor::concat_cols(&refs).map(Cow::Owned)
    }

    fn concat_rows(&mut self, parts: &[V<'p, T>]) -> Result<V<'p, T>> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|p| p.as_ref()).collect();
        tensor::concat_rows(&refs).map(Cow::Owned)
    }

    fn row(&mut self, x: &V<'p, T>, i: usize) -> Result<V<'p, T>> {
        tensor::row(x, i).map(Cow::Owned)
    }
}
