//! Reverse-mode automatic differentiation over a recorded operation list.
//!
//! Nodes are appended in evaluation order, so walking the list backwards is
//! a valid topological order for the backward pass. Only nodes that depend
//! on a trainable parameter take part in it.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::{self, Scalar, Tensor};
use crate::vit::Param;

/// Gradients keyed by parameter name.
pub type Gradients<T> = BTreeMap<String, Tensor<T>>;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(String),
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    AddBias(usize, usize),
    Scale(usize, T),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: T,
    },
    Gelu(usize),
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Row {
        x: usize,
        i: usize,
    },
    Dot(usize, usize),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
    },
}

struct Node<'p, T: Scalar> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<'p, T: Scalar> {
    id: u64,
    nodes: Vec<Node<'p, T>>,
    params: HashMap<String, usize>,
}

impl<'p, T: Scalar> Default for Tape<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: &Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Usage("variable was not recorded on this tape".into()));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Cow<'p, Tensor<T>>, op: Op<T>) -> Var {
        let needs_grad = match &op {
            Op::Input => false,
            Op::Param(_) => unreachable!("params are pushed by `param`"),
            other => inputs(other).iter().any(|&i| self.nodes[i].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn val(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    fn binary(
        &mut self,
        a: &Var,
        b: &Var,
        f: impl Fn(&Tensor<T>, &Tensor<T>) -> Result<Tensor<T>>,
        op: impl Fn(usize, usize) -> Op<T>,
    ) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = f(self.val(ia), self.val(ib))?;
        Ok(self.push(Cow::Owned(out), op(ia, ib)))
    }

    pub fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(a, b, tensor::sub, Op::Sub)
    }

    /// Scalar `Σ a⊙b`.
    pub fn dot(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(
            a,
            b,
            |x, y| {
                let p = tensor::mul(x, y)?;
                let s: T = p.data().iter().copied().sum();
                Tensor::new(vec![1], vec![s])
            },
            Op::Dot,
        )
    }

    /// Mean softmax cross-entropy of B×K logits against class indices.
    pub fn cross_entropy(&mut self, logits: &Var, labels: &[usize]) -> Result<Var> {
        let il = self.idx(logits)?;
        let loss = cross_entropy_loss(self.val(il), labels)?;
        Ok(self.push(
            Cow::Owned(Tensor::new(vec![1], vec![loss])?),
            Op::CrossEntropy {
                logits: il,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Gradients of the scalar `loss` with respect to every trainable
    /// parameter recorded on this tape. Frozen parameters get no entry;
    /// trainable parameters the loss does not depend on get exact zeros.
    pub fn backward(&self, loss: &Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward on an empty tape".into()));
        }
        let root = self.idx(loss)?;
        if self.val(root).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root + 1];
        grads[root] = Some(Tensor::full(self.val(root).shape(), T::one()));
        let mut out = Gradients::new();

        for i in (0..=root).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            if let Op::Param(name) = &node.op {
                out.insert(name.clone(), g);
                continue;
            }
            for (input, grad) in self.local_grads(i, &g)? {
                if !self.nodes[input].needs_grad {
                    continue;
                }
                grads[input] = Some(match grads[input].take() {
                    Some(acc) => tensor::add(&acc, &grad)?,
                    None => grad,
                });
            }
        }

        for (name, &i) in &self.params {
            if self.nodes[i].needs_grad && !out.contains_key(name) {
                out.insert(name.clone(), Tensor::zeros(self.val(i).shape()));
            }
        }
        Ok(out)
    }

    /// Vector-Jacobian products of node `i` for each of its inputs.
    fn local_grads(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(usize, Tensor<T>)>> {
        let node = &self.nodes[i];
        let needs = |j: usize| self.nodes[j].needs_grad;
        let mut res = Vec::new();
        match &node.op {
            Op::Input | Op::Param(_) => {}
            &Op::MatMul(a, b) => {
                if needs(a) {
                    res.push((a, tensor::matmul_nt(g, self.val(b))?));
                }
                if needs(b) {
                    res.push((b, tensor::matmul_tn(self.val(a), g)?));
                }
            }
            &Op::MatMulNt(a, b) => {
                if needs(a) {
                    res.push((a, tensor::matmul(g, self.val(b))?));
                }
                if needs(b) {
                    res.push((b, tensor::matmul_tn(g, self.val(a))?));
                }
            }
            &Op::Add(a, b) => {
                res.push((a, g.clone()));
                res.push((b, g.clone()));
            }
            &Op::Sub(a, b) => {
                res.push((a, g.clone()));
                res.push((b, tensor::scale(g, -T::one())?));
            }
            &Op::AddBias(x, bias) => {
                res.push((x, g.clone()));
                if needs(bias) {
                    let s = tensor::sum_rows(g)?;
                    res.push((bias, s.reshape(self.val(bias).shape())?));
                }
            }
            &Op::Scale(x, s) => res.push((x, tensor::scale(g, s)?)),
            &Op::Softmax(x) => {
                // dx = y ⊙ (dy − Σ dy⊙y) per row
                let y = &node.value;
                let c = y.shape()[1];
                let mut dx = g.clone();
                for (dr, yr) in dx.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    let dot: T = dr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for (d, &yv) in dr.iter_mut().zip(yr) {
                        *d = yv * (*d - dot);
                    }
                }
                res.push((x, dx));
            }
            &Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = self.val(x);
                let gv = self.val(gamma);
                let d = gv.numel();
                let n = T::of(d as f64);
                let mut dx = vec![T::zero(); xv.numel()];
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                for ((xr, gr), dxr) in xv
                    .data()
                    .chunks(d)
                    .zip(g.data().chunks(d))
                    .zip(dx.chunks_mut(d))
                {
                    let (mean, rstd) = tensor::moments(xr, eps);
                    let xhat: Vec<T> = xr.iter().map(|&v| (v - mean) * rstd).collect();
                    let dxhat: Vec<T> = gr.iter().zip(gv.data()).map(|(&a, &b)| a * b).collect();
                    let mean_d = dxhat.iter().copied().sum::<T>() / n;
                    let mean_dx = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for k in 0..d {
                        dxr[k] = rstd * (dxhat[k] - mean_d - xhat[k] * mean_dx);
                        dgamma[k] = dgamma[k] + gr[k] * xhat[k];
                        dbeta[k] = dbeta[k] + gr[k];
                    }
                }
                res.push((x, Tensor::new(xv.shape().to_vec(), dx)?));
                res.push((gamma, Tensor::new(gv.shape().to_vec(), dgamma)?));
                res.push((beta, Tensor::new(self.val(beta).shape().to_vec(), dbeta)?));
            }
            &Op::Gelu(x) => {
                let d = tensor::gelu_grad(self.val(x))?;
                res.push((x, tensor::mul(g, &d)?));
            }
            &Op::SliceCols { x, start } => {
                let (r, c) = self.val(x).dims2("slice_cols")?;
                let len = g.shape()[1];
                let mut dx = Tensor::zeros(&[r, c]);
                for (dr, gr) in dx.data_mut().chunks_mut(c).zip(g.data().chunks(len)) {
                    dr[start..start + len].copy_from_slice(gr);
                }
                res.push((x, dx));
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.val(p).shape()[1];
                    if needs(p) {
                        res.push((p, tensor::slice_cols(g, start, len)?));
                    }
                    start += len;
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.shape()[1];
                let mut start = 0;
                for &p in parts {
                    let rows = self.val(p).shape()[0];
                    if needs(p) {
                        let data = g.data()[start * c..(start + rows) * c].to_vec();
                        res.push((p, Tensor::new(vec![rows, c], data)?));
                    }
                    start += rows;
                }
            }
            &Op::Row { x, i } => {
                let (r, c) = self.val(x).dims2("row")?;
                let mut dx = Tensor::zeros(&[r, c]);
                dx.data_mut()[i * c..(i + 1) * c].copy_from_slice(g.data());
                res.push((x, dx));
            }
            &Op::Dot(a, b) => {
                let s = g.data()[0];
                if needs(a) {
                    res.push((a, tensor::scale(self.val(b), s)?));
                }
                if needs(b) {
                    res.push((b, tensor::scale(self.val(a), s)?));
                }
            }
            Op::CrossEntropy { logits, labels } => {
                let mut p = tensor::softmax_rows(self.val(*logits))?;
                let k = p.shape()[1];
                let s = g.data()[0] / T::of(labels.len() as f64);
                for (row, &label) in p.data_mut().chunks_mut(k).zip(labels) {
                    row[label] = row[label] - T::one();
                    for v in row.iter_mut() {
                        *v = *v * s;
                    }
                }
                res.push((*logits, p));
            }
        }
        Ok(res)
    }
}

fn inputs<T>(op: &Op<T>) -> Vec<usize> {
    match op {
        Op::Input | Op::Param(_) => vec![],
        &Op::MatMul(a, b)
        | &Op::MatMulNt(a, b)
        | &Op::Add(a, b)
        | &Op::Sub(a, b)
        | &Op::AddBias(a, b)
        | &Op::Dot(a, b) => vec![a, b],
        &Op::Scale(x, _) | &Op::Softmax(x) | &Op::Gelu(x) => vec![x],
        &Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
        &Op::SliceCols { x, .. } | &Op::Row { x, .. } => vec![x],
        Op::ConcatCols(p) | Op::ConcatRows(p) => p.clone(),
        Op::CrossEntropy { logits, .. } => vec![*logits],
    }
}

impl<'p, T: Scalar> Graph<'p, T> for Tape<'p, T> {
    type Var = Var;

    fn param(&mut self, name: &str, param: &'p Param<T>) -> Var {
        if let Some(&index) = self.params.get(name) {
            return Var {
                tape: self.id,
                index,
            };
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(&param.tensor),
            op: Op::Param(name.to_string()),
            needs_grad: param.trainable,
        });
        let index = self.nodes.len() - 1;
        self.params.insert(name.to_string(), index);
        Var {
            tape: self.id,
            index,
        }
    }

    fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(Cow::Owned(value), Op::Input)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        assert_eq!(v.tape, self.id, "variable from another tape");
        self.val(v.index)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(a, b, tensor::matmul, Op::MatMul)
    }

    fn matmul_nt(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(a, b, tensor::matmul_nt, Op::MatMulNt)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(a, b, tensor::add, Op::Add)
    }

    fn add_bias(&mut self, x: &Var, bias: &Var) -> Result<Var> {
        self.binary(x, bias, tensor::add_row_broadcast, Op::AddBias)
    }

    fn scale(&mut self, x: &Var, s: T) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = tensor::scale(self.val(ix), s)?;
        Ok(self.push(Cow::Owned(out), Op::Scale(ix, s)))
    }

    fn softmax_rows(&mut self, x: &Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = tensor::softmax_rows(self.val(ix))?;
        Ok(self.push(Cow::Owned(out), Op::Softmax(ix)))
    }

    fn layer_norm(&mut self, x: &Var, gamma: &Var, beta: &Var, eps: T) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let out = tensor::layer_norm(self.val(ix), self.val(ig), self.val(ib), eps)?;
        Ok(self.push(
            Cow::Owned(out),
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                eps,
            },
        ))
    }

    fn gelu(&mut self, x: &Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = tensor::gelu(self.val(ix))?;
        Ok(self.push(Cow::Owned(out), Op::Gelu(ix)))
    }

    fn slice_cols(&mut self, x: &Var, start: usize, len: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = tensor::slice_cols(self.val(ix), start, len)?;
        Ok(self.push(Cow::Owned(out), Op::SliceCols { x: ix, start }))
    }

    fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<T>> = idx.iter().map(|&i| self.val(i)).collect();
        let out = tensor::concat_cols(&refs)?;
        Ok(self.push(Cow::Owned(out), Op::ConcatCols(idx)))
    }

    fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<T>> = idx.iter().map(|&i| self.val(i)).collect();
        let out = tensor::concat_rows(&refs)?;
        Ok(self.push(Cow::Owned(out), Op::ConcatRows(idx)))
    }

    fn row(&mut self, x: &Var, i: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = tensor::row(self.val(ix), i)?;
        Ok(self.push(Cow::Owned(out), Op::Row { x: ix, i }))
    }
}

/// Mean over the batch of `−log softmax(logits)[label]`, in log-sum-exp form.
pub fn cross_entropy_loss<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let (b, k) = logits.dims2("cross_entropy")?;
    if labels.len() != b {
        return Err(Error::Validation(format!(
            "cross_entropy: {} labels for {b} logit rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Validation(format!(
            "cross_entropy: label {bad} out of range for {k} classes"
        )));
    }
    let total: T = logits
        .data()
        .chunks(k)
        .zip(labels)
        .map(|(row, &l)| tensor::log_sum_exp(row) - row[l])
        .sum();
    let loss = total / T::of(b as f64);
    tensor::ensure_finite("cross_entropy", &[loss])?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::ModelParams;

    fn params(entries: &[(&str, Tensor<f64>)]) -> ModelParams<f64> {
        let mut p = ModelParams::new();
        for (name, t) in entries {
            p.insert(*name, t.clone());
        }
        p
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::<f64>::from_rows(&[&[0.0, 0.0]]);
        for label in 0..2 {
            let l = cross_entropy_loss(&uniform, &[label]).unwrap();
            assert!((l - 2f64.ln()).abs() < 1e-15);
        }
        let saturated = Tensor::<f64>::from_rows(&[&[1000.0, 0.0]]);
        assert!(cross_entropy_loss(&saturated, &[0]).unwrap().abs() < 1e-12);
        assert!((cross_entropy_loss(&saturated, &[1]).unwrap() - 1000.0).abs() < 1e-9);

        let three = Tensor::<f64>::from_rows(&[&[1.0, 2.0, 3.0]]);
        let e = |x: f64| x.exp();
        let expected = -(e(3.0) / (e(1.0) + e(2.0) + e(3.0))).ln();
        assert!((cross_entropy_loss(&three, &[2]).unwrap() - expected).abs() < 1e-15);

        assert!(matches!(cross_entropy_loss(&three, &[3]), Err(Error::Validation(_))));
        assert!(matches!(cross_entropy_loss(&three, &[0, 1]), Err(Error::Validation(_))));
    }

    #[test]
    fn linear_layer_matches_closed_form() {
        // L = ½‖xW + b − t‖², so ∂L/∂W = xᵀ(y − t) and ∂L/∂b = Σ_rows (y − t).
        let x = Tensor::<f64>::from_rows(&[&[1.0, -2.0, 0.5], &[0.3, 0.0, 4.0]]);
        let t = Tensor::<f64>::from_rows(&[&[0.5, -1.0], &[2.0, 0.25]]);
        let p = params(&[
            ("w", Tensor::from_rows(&[&[0.1, 0.2], &[-0.3, 0.4], &[0.5, -0.6]])),
            ("b", Tensor::new(vec![2], vec![0.05, -0.02]).unwrap()),
        ]);
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let tv = tape.input(t.clone());
        let w = tape.param("w", p.get("w").unwrap());
        let b = tape.param("b", p.get("b").unwrap());
        let xw = tape.matmul(&xv, &w).unwrap();
        let y = tape.add_bias(&xw, &b).unwrap();
        let r = tape.sub(&y, &tv).unwrap();
        let sq = tape.dot(&r, &r).unwrap();
        let loss = tape.scale(&sq, 0.5).unwrap();
        let g = tape.backward(&loss).unwrap();

        let y = tensor::add_row_broadcast(
            &tensor::matmul(&x, p.tensor("w").unwrap()).unwrap(),
            p.tensor("b").unwrap(),
        )
        .unwrap();
        let resid = tensor::sub(&y, &t).unwrap();
        let dw = tensor::matmul_tn(&x, &resid).unwrap();
        let db = tensor::sum_rows(&resid).unwrap();
        assert!(g["w"].max_abs_diff(&dw) < 1e-14);
        assert!(g["b"].max_abs_diff(&db.reshape(&[2]).unwrap()) < 1e-14);
    }

    #[test]
    fn unused_trainable_parameter_gets_exact_zero() {
        let p = params(&[
            ("used", Tensor::from_rows(&[&[1.0, 2.0]])),
            ("unused", Tensor::from_rows(&[&[3.0, 4.0]])),
        ]);
        let mut tape = Tape::new();
        let a = tape.param("used", p.get("used").unwrap());
        let _ = tape.param("unused", p.get("unused").unwrap());
        let loss = tape.dot(&a, &a).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g["used"].data(), &[2.0, 4.0]);
        assert_eq!(g["unused"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn frozen_parameters_get_no_entry() {
        let mut p = params(&[
            ("a", Tensor::from_rows(&[&[1.0, 2.0]])),
            ("b", Tensor::from_rows(&[&[3.0, 4.0]])),
        ]);
        p.get_mut("b").unwrap().trainable = false;
        let mut tape = Tape::new();
        let a = tape.param("a", p.get("a").unwrap());
        let b = tape.param("b", p.get("b").unwrap());
        let loss = tape.dot(&a, &b).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.keys().collect::<Vec<_>>(), ["a"]);
        assert_eq!(g["a"].data(), &[3.0, 4.0]);
    }

    #[test]
    fn reused_parameter_accumulates() {
        let p = params(&[("a", Tensor::from_rows(&[&[1.5, -2.0]]))]);
        let mut tape = Tape::new();
        let a1 = tape.param("a", p.get("a").unwrap());
        let a2 = tape.param("a", p.get("a").unwrap());
        let s = tape.add(&a1, &a2).unwrap();
        let loss = tape.dot(&s, &a1).unwrap();
        // L = 2‖a‖², ∂L/∂a = 4a.
        assert_eq!(tape.backward(&loss).unwrap()["a"].data(), &[6.0, -8.0]);
    }

    #[test]
    fn usage_errors() {
        let tape = Tape::<f64>::new();
        let mut other = Tape::<f64>::new();
        let v = other.input(Tensor::from_rows(&[&[1.0]]));
        assert!(matches!(tape.backward(&v), Err(Error::Usage(_))));
        let w = other.input(Tensor::from_rows(&[&[1.0, 2.0]]));
        assert!(matches!(other.backward(&w), Err(Error::Usage(_))));
        let mut third = Tape::<f64>::new();
        let _ = third.input(Tensor::from_rows(&[&[1.0]]));
        assert!(matches!(third.backward(&v), Err(Error::Usage(_))));
    }
}
