//! Layer-granular reverse-mode differentiation.
//!
//! A [`Tape`] records every forward operation together with the values the
//! backward pass needs. [`Tape::backward`] then walks the records in reverse
//! and returns exact gradients for every parameter of the store plus every
//! recorded value.

use super::layers::{DenseLayer, GruCache, GruCell};
use super::params::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Dense(DenseLayer, ValueId),
    Relu(ValueId),
    Gru(GruCell, ValueId, ValueId, GruCache),
    /// Fixed elementwise `offset + scale * x`.
    Affine(ValueId, Vec<f64>),
    Concat(Vec<ValueId>),
    /// `(x - 2 x_ref)ᵀ x`
    Surrogate(ValueId, Vec<f64>),
    Sum(Vec<ValueId>),
    /// `cᵀx` for a constant `c`.
    Dot(ValueId, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Vec<f64>,
}

pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: ParamStore,
    values: Vec<Vec<f64>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a recorded value.
    pub fn wrt(&self, id: ValueId) -> &[f64] {
        &self.values[id.0]
    }
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> ValueId {
        self.nodes.push(Node { op, value });
        ValueId(self.nodes.len() - 1)
    }

    fn check(&self, id: ValueId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Usage(format!("value {} is not on this tape", id.0)))
        }
    }

    pub fn value(&self, id: ValueId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, x: Vec<f64>) -> ValueId {
        self.push(Op::Input, x)
    }

    pub fn dense(&mut self, layer: &DenseLayer, x: ValueId) -> Result<ValueId> {
        self.check(x)?;
        let y = layer.forward(self.store, self.value(x))?;
        Ok(self.push(Op::Dense(*layer, x), y))
    }

    pub fn relu(&mut self, x: ValueId) -> Result<ValueId> {
        self.check(x)?;
        let y = super::layers::relu(self.value(x));
        Ok(self.push(Op::Relu(x), y))
    }

    pub fn gru(&mut self, cell: &GruCell, x: ValueId, h: ValueId) -> Result<ValueId> {
        self.check(x)?;
        self.check(h)?;
        let (y, cache) = cell.forward_cached(self.store, self.value(x), self.value(h))?;
        Ok(self.push(Op::Gru(*cell, x, h, cache), y))
    }

    /// Fixed (non-trainable) elementwise affine map.
    pub fn affine(&mut self, x: ValueId, scale: &[f64], offset: &[f64]) -> Result<ValueId> {
        self.check(x)?;
        let v = self.value(x);
        if scale.len() != v.len() || offset.len() != v.len() {
            return Err(Error::Shape(format!(
                "affine map of width {} applied to width {}",
                scale.len(),
                v.len()
            )));
        }
        let y = v
            .iter()
            .zip(scale.iter().zip(offset))
            .map(|(x, (s, o))| o + s * x)
            .collect();
        Ok(self.push(Op::Affine(x, scale.to_vec()), y))
    }

    pub fn concat(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        let mut y = Vec::new();
        for &p in parts {
            self.check(p)?;
            y.extend_from_slice(self.value(p));
        }
        Ok(self.push(Op::Concat(parts.to_vec()), y))
    }

    /// Scalar surrogate loss `(x - 2 x_ref)ᵀ x` of a prediction against a
    /// fixed sample.
    pub fn surrogate_loss(&mut self, pred: ValueId, target: &[f64]) -> Result<ValueId> {
        self.check(pred)?;
        let y = crate::training::surrogate_loss(self.value(pred), target)?;
        Ok(self.push(Op::Surrogate(pred, target.to_vec()), vec![y]))
    }

    /// Sum of scalar values.
    pub fn sum(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        let mut total = 0.0;
        for &p in parts {
            self.check(p)?;
            let v = self.value(p);
            if v.len() != 1 {
                return Err(Error::Shape(format!("sum expects scalars, got width {}", v.len())));
            }
            total += v[0];
        }
        Ok(self.push(Op::Sum(parts.to_vec()), vec![total]))
    }

    /// Scalar `cᵀx` for a constant vector `c`.
    pub fn dot(&mut self, x: ValueId, c: &[f64]) -> Result<ValueId> {
        self.check(x)?;
        let v = self.value(x);
        if v.len() != c.len() {
            return Err(Error::Shape(format!("dot of widths {} and {}", v.len(), c.len())));
        }
        let y = v.iter().zip(c).map(|(a, b)| a * b).sum();
        Ok(self.push(Op::Dot(x, c.to_vec()), vec![y]))
    }

    /// Reverse pass from a scalar loss recorded on this tape.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward called before any forward pass".into()));
        }
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got width {}",
                self.value(loss).len()
            )));
        }
        let mut params = self.store.zeros_like();
        let mut grads: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.value.len()]).collect();
        grads[loss.0][0] = 1.0;

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let dy = std::mem::take(&mut grads[idx]);
            if dy.iter().all(|g| *g == 0.0) {
                grads[idx] = dy;
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Dense(layer, x) => {
                    let dx = layer.backward(self.store, &mut params, self.value(*x), &dy);
                    add_into(&mut grads[x.0], &dx);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let dx: Vec<f64> = dy
                        .iter()
                        .zip(xv)
                        .map(|(d, v)| if *v > 0.0 { *d } else { 0.0 })
                        .collect();
                    add_into(&mut grads[x.0], &dx);
                }
                Op::Gru(cell, x, h, cache) => {
                    let (dx, dh) = cell.backward(
                        self.store,
                        &mut params,
                        self.value(*x),
                        self.value(*h),
                        cache,
                        &dy,
                    );
                    add_into(&mut grads[x.0], &dx);
                    add_into(&mut grads[h.0], &dh);
                }
                Op::Affine(x, scale) => {
                    let dx: Vec<f64> = dy.iter().zip(scale).map(|(d, s)| d * s).collect();
                    add_into(&mut grads[x.0], &dx);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.nodes[p.0].value.len();
                        let slice = dy[off..off + n].to_vec();
                        add_into(&mut grads[p.0], &slice);
                        off += n;
                    }
                }
                Op::Surrogate(pred, target) => {
                    let x = self.value(*pred);
                    let dx: Vec<f64> = x
                        .iter()
                        .zip(target)
                        .map(|(x, r)| dy[0] * 2.0 * (x - r))
                        .collect();
                    add_into(&mut grads[pred.0], &dx);
                }
                Op::Dot(x, c) => {
                    let dx: Vec<f64> = c.iter().map(|ci| dy[0] * ci).collect();
                    add_into(&mut grads[x.0], &dx);
                }
                Op::Sum(parts) => {
                    for p in parts {
                        grads[p.0][0] += dy[0];
                    }
                }
            }
            grads[idx] = dy;
        }
        Ok(Gradients {
            params,
            values: grads,
        })
    }
}

fn add_into(acc: &mut [f64], d: &[f64]) {
    for (a, b) in acc.iter_mut().zip(d) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{finite_diff_check, GradCheckOptions};
    use crate::seed::rng_from_seed;
    use rand::Rng;

    #[test]
    fn backward_before_forward_is_usage_error() {
        let store = ParamStore::new();
        let tape = Tape::new(&store);
        assert!(matches!(tape.backward(ValueId(0)), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_needs_scalar() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(vec![1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn linear_chain_rule() {
        // loss = cᵀ(W x + b) so dL/dW = c xᵀ and dL/db = c
        let mut store = ParamStore::new();
        let layer = DenseLayer::new(&mut store, "d", 3, 2, &mut rng_from_seed(2)).unwrap();
        let x = vec![0.5, -1.0, 2.0];
        let c = [3.0, -2.0];
        let mut tape = Tape::new(&store);
        let xi = tape.input(x.clone());
        let y = tape.dense(&layer, xi).unwrap();
        let loss = tape.dot(y, &c).unwrap();
        let g = tape.backward(loss).unwrap().params;
        let gw = g.data(layer.weight);
        for o in 0..2 {
            for i in 0..3 {
                assert_eq!(gw[o * 3 + i], c[o] * x[i]);
            }
        }
        assert_eq!(g.data(layer.bias), &c);
    }

    /// Random 2-layer + GRU model, unrolled over a short sequence.
    fn build() -> (ParamStore, DenseLayer, DenseLayer, GruCell) {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(21);
        let d1 = DenseLayer::new(&mut store, "d1", 3, 5, &mut rng).unwrap();
        let d2 = DenseLayer::new(&mut store, "d2", 5, 4, &mut rng).unwrap();
        let g = GruCell::new(&mut store, "g", 4, 3, &mut rng).unwrap();
        // non-zero biases so every code path is exercised
        for a in store.arrays_mut() {
            if a.name.contains("b") {
                a.data.iter_mut().for_each(|b| *b = rng.gen_range(-0.3..0.3));
            }
        }
        (store, d1, d2, g)
    }

    fn seq() -> Vec<Vec<f64>> {
        let mut rng = rng_from_seed(5);
        (0..6).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    fn unroll<'a>(
        tape: &mut Tape<'a>,
        d1: &DenseLayer,
        d2: &DenseLayer,
        g: &GruCell,
        xs: &[Vec<f64>],
    ) -> ValueId {
        let mut h = tape.input(vec![0.0; 3]);
        let mut losses = Vec::new();
        for (t, x) in xs.iter().enumerate() {
            let xi = tape.input(x.clone());
            let a = tape.dense(d1, xi).unwrap();
            let a = tape.relu(a).unwrap();
            let b = tape.dense(d2, a).unwrap();
            let b = tape.relu(b).unwrap();
            h = tape.gru(g, b, h).unwrap();
            let target = vec![0.1 * t as f64, -0.2, 0.3];
            losses.push(tape.surrogate_loss(h, &target).unwrap());
        }
        tape.sum(&losses).unwrap()
    }

    #[test]
    fn composed_model_matches_finite_differences() {
        let (store, d1, d2, g) = build();
        let xs = seq();
        let mut tape = Tape::new(&store);
        let loss = unroll(&mut tape, &d1, &d2, &g, &xs);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.params.all_finite());
        let report = finite_diff_check(
            &store,
            &grads.params,
            |p| {
                let mut t = Tape::new(p);
                let l = unroll(&mut t, &d1, &d2, &g, &xs);
                t.value(l)[0]
            },
            &GradCheckOptions::default(),
        );
        assert!(report.passed, "{report:?}");
        assert!(report.max_rel_error < 1e-4);
    }

    #[test]
    fn corrupted_gradient_fails_check() {
        let (store, d1, d2, g) = build();
        let xs = seq();
        let mut tape = Tape::new(&store);
        let loss = unroll(&mut tape, &d1, &d2, &g, &xs);
        let mut grads = tape.backward(loss).unwrap().params;
        grads.arrays_mut()[0].data[0] *= 1.5;
        grads.arrays_mut()[0].data[0] += 1e-3;
        let report = finite_diff_check(
            &store,
            &grads,
            |p| {
                let mut t = Tape::new(p);
                let l = unroll(&mut t, &d1, &d2, &g, &xs);
                t.value(l)[0]
            },
            &GradCheckOptions::default(),
        );
        assert!(!report.passed);
    }

    #[test]
    fn input_gradients_are_exposed() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(vec![1.0, 2.0]);
        let l = tape.surrogate_loss(x, &[0.5, 3.0]).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x), &[1.0, -2.0]);
    }
}
