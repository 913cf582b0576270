//! Reverse-mode differentiation over a recorded sequence of layer operations.
//!
//! A [`Tape`] records every forward operation together with its output. Calling
//! [`Tape::backward`] walks the record in reverse and accumulates gradients into
//! the [`ParamStore`] the parameters were read from.

use crate::error::{dim_err, Error, Result};
use crate::nn::ops;
use crate::nn::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv3x3 { x: Var, w: Var, b: Var },
    Pointwise { x: Var, w: Var, b: Var },
    Dense { x: Var, w: Var, b: Var },
    Relu(Var),
    Add(Var, Var),
    Attention { x: Var, wq: Var, wk: Var, wv: Var },
    SelectRows { x: Var, rows: Vec<usize> },
    Sum(Var),
    CenterRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Input that receives a gradient (readable through [`Gradients::get`]).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let needs = store.is_trainable(id);
        self.push(store.value(id).clone(), Op::Param(id), needs)
    }

    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::conv2d_forward(self.value(x), self.value(w), self.value(b))?;
        let needs = self.needs(&[x, w, b]);
        Ok(self.push(out, Op::Conv3x3 { x, w, b }, needs))
    }

    pub fn pointwise(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::pointwise_forward(self.value(x), self.value(w), self.value(b))?;
        let needs = self.needs(&[x, w, b]);
        Ok(self.push(out, Op::Pointwise { x, w, b }, needs))
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::dense_forward(self.value(x), self.value(w), self.value(b))?;
        let needs = self.needs(&[x, w, b]);
        Ok(self.push(out, Op::Dense { x, w, b }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu_forward(self.value(x));
        let needs = self.needs(&[x]);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b))?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn attention(&mut self, x: Var, wq: Var, wk: Var, wv: Var) -> Result<Var> {
        let out = ops::self_attention_forward(self.value(x), self.value(wq), self.value(wk), self.value(wv))?;
        let needs = self.needs(&[x, wq, wk, wv]);
        Ok(self.push(out, Op::Attention { x, wq, wk, wv }, needs))
    }

    /// Gather slices along the leading dimension.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let lead = src.shape()[0];
        if rows.is_empty() {
            return Err(dim_err!("select_rows: empty row list"));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= lead) {
            return Err(Error::Index(format!("row {r} of a {lead}-row tensor")));
        }
        let inner = src.len() / lead;
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            data.extend_from_slice(&src.data()[r * inner..(r + 1) * inner]);
        }
        let mut shape = src.shape().to_vec();
        shape[0] = rows.len();
        let out = Tensor::new(shape, data)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::SelectRows { x, rows: rows.to_vec() }, needs))
    }

    /// Subtract from every slice along the leading dimension its own mean.
    pub fn center_rows(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let inner = src.len() / src.shape()[0];
        let mut out = src.clone();
        out.data_mut().chunks_mut(inner).for_each(center);
        let needs = self.needs(&[x]);
        self.push(out, Op::CenterRows(x), needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum_f64() as f32;
        let needs = self.needs(&[x]);
        self.push(Tensor::full(&[1], s), Op::Sum(x), needs)
    }

    /// Backpropagate from a scalar loss and accumulate into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        if self.nodes.get(loss.0).map(|n| n.value.len()) != Some(1) {
            return Err(Error::State("backward needs a recorded scalar loss".into()));
        }
        self.backward_from(loss, Tensor::full(&[1], 1.0), store)
    }

    /// Backpropagate an explicit output gradient `seed` from `out`.
    pub fn backward_from(&self, out: Var, seed: Tensor, store: &mut ParamStore) -> Result<Gradients> {
        let node = self
            .nodes
            .get(out.0)
            .ok_or_else(|| Error::State("backward without a recorded forward pass".into()))?;
        seed.expect_shape(node.value.shape(), "output gradient")?;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Input = node.op {
                grads[i] = Some(g);
                continue;
            }
            let mut send = |v: Var, t: Tensor| -> Result<()> {
                if !self.nodes[v.0].needs_grad {
                    return Ok(());
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => {
                        *slot = Some(t);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Input => unreachable!("handled above"),
                Op::Param(id) => {
                    store.accumulate_grad(*id, &g)?;
                }
                Op::Conv3x3 { x, w, b } => {
                    let need_x = self.nodes[x.0].needs_grad;
                    let (dx, dw, db) = ops::conv2d_backward(self.value(*x), self.value(*w), &g, need_x)?;
                    if let Some(dx) = dx {
                        send(*x, dx)?;
                    }
                    send(*w, dw)?;
                    send(*b, db)?;
                }
                Op::Pointwise { x, w, b } => {
                    let need_x = self.nodes[x.0].needs_grad;
                    let (dx, dw, db) = ops::pointwise_backward(self.value(*x), self.value(*w), &g, need_x)?;
                    if let Some(dx) = dx {
                        send(*x, dx)?;
                    }
                    send(*w, dw)?;
                    send(*b, db)?;
                }
                Op::Dense { x, w, b } => {
                    let need_x = self.nodes[x.0].needs_grad;
                    let (dx, dw, db) = ops::dense_backward(self.value(*x), self.value(*w), &g, need_x)?;
                    if let Some(dx) = dx {
                        send(*x, dx)?;
                    }
                    send(*w, dw)?;
                    send(*b, db)?;
                }
                Op::Relu(x) => {
                    send(*x, ops::relu_backward(self.value(*x), &g))?;
                }
                Op::Add(a, b) => {
                    send(*b, g.clone())?;
                    send(*a, g)?;
                }
                Op::Attention { x, wq, wk, wv } => {
                    let (dx, dq, dk, dv) = ops::self_attention_backward(
                        self.value(*x),
                        self.value(*wq),
                        self.value(*wk),
                        self.value(*wv),
                        &g,
                    )?;
                    send(*x, dx)?;
                    send(*wq, dq)?;
                    send(*wk, dk)?;
                    send(*wv, dv)?;
                }
                Op::SelectRows { x, rows } => {
                    let src = self.value(*x);
                    let inner = src.len() / src.shape()[0];
                    let mut full = Tensor::zeros(src.shape());
                    for (k, &r) in rows.iter().enumerate() {
                        let dst = &mut full.data_mut()[r * inner..(r + 1) * inner];
                        dst.iter_mut()
                            .zip(&g.data()[k * inner..(k + 1) * inner])
                            .for_each(|(d, s)| *d += s);
                    }
                    send(*x, full)?;
                }
                Op::CenterRows(x) => {
                    let inner = g.len() / g.shape()[0];
                    let mut d = g;
                    d.data_mut().chunks_mut(inner).for_each(center);
                    send(*x, d)?;
                }
                Op::Sum(x) => {
                    let s = g.data()[0];
                    send(*x, Tensor::full(self.value(*x).shape(), s))?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn center(row: &mut [f32]) {
    let mean = (row.iter().map(|&v| v as f64).sum::<f64>() / row.len() as f64) as f32;
    row.iter_mut().for_each(|v| *v -= mean);
}

/// Gradients reaching [`Tape::variable`] inputs after a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_parameters_has_unit_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::from_fn(&[2, 3], |i| i as f32)).unwrap();
        let b = store.add("b", Tensor::from_fn(&[2, 3], |i| -(i as f32))).unwrap();
        let mut tape = Tape::new();
        let va = tape.param(&store, a);
        let vb = tape.param(&store, b);
        let s = tape.add(va, vb).unwrap();
        let loss = tape.sum(s);
        tape.backward(loss, &mut store).unwrap();
        for id in [a, b] {
            assert!(store.grad(id).unwrap().data().iter().all(|&g| g == 1.0));
        }
    }

    #[test]
    fn dead_relu_passes_no_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::new(vec![3], vec![-1.0, 0.5, 2.0]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(&store, p);
        let r = tape.relu(v);
        let loss = tape.sum(r);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(p).unwrap().data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_without_forward_is_state_error() {
        let mut store = ParamStore::new();
        let tape = Tape::new();
        assert!(matches!(tape.backward(Var(0), &mut store), Err(Error::State(_))));
    }

    #[test]
    fn select_rows_scatters_gradient_back() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::from_fn(&[4, 2], |i| i as f32)).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(&store, p);
        let s = tape.select_rows(v, &[3, 1, 3]).unwrap();
        assert_eq!(tape.value(s).data(), &[6.0, 7.0, 2.0, 3.0, 6.0, 7.0]);
        let loss = tape.sum(s);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(p).unwrap().data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }
}
