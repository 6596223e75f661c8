use rand::Rng;

use super::params::{ParamId, ParamStore};
use crate::{Error, Result};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

fn uniform_init<R: Rng>(rng: &mut R, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = (1.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// `y = W x + b` with `W` stored row-major as `out x in`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub n_in: usize,
    pub n_out: usize,
}

impl DenseLayer {
    /// Registers `{name}.weight` and `{name}.bias`. Weights are uniform in
    /// `±sqrt(1/n_in)`, biases zero.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        n_in: usize,
        n_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(
            &format!("{name}.weight"),
            &[n_out, n_in],
            uniform_init(rng, n_out * n_in, n_in),
        )?;
        let bias = store.add(&format!("{name}.bias"), &[n_out], vec![0.0; n_out])?;
        Ok(Self {
            weight,
            bias,
            n_in,
            n_out,
        })
    }

    /// Attaches to arrays already present in `store` (e.g. after loading).
    pub fn bind(store: &ParamStore, name: &str, n_in: usize, n_out: usize) -> Result<Self> {
        let weight = find(store, &format!("{name}.weight"), &[n_out, n_in])?;
        let bias = find(store, &format!("{name}.bias"), &[n_out])?;
        Ok(Self {
            weight,
            bias,
            n_in,
            n_out,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_in {
            return Err(Error::Shape(format!(
                "dense layer expects width {}, got {}",
                self.n_in,
                x.len()
            )));
        }
        let w = store.data(self.weight);
        let b = store.data(self.bias);
        Ok((0..self.n_out)
            .map(|o| {
                let row = &w[o * self.n_in..(o + 1) * self.n_in];
                b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect())
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx`.
    pub(crate) fn backward(
        &self,
        store: &ParamStore,
        grads: &mut ParamStore,
        x: &[f64],
        dy: &[f64],
    ) -> Vec<f64> {
        let w = store.data(self.weight);
        {
            let gw = grads.data_mut(self.weight);
            for (o, &d) in dy.iter().enumerate() {
                if d != 0.0 {
                    let row = &mut gw[o * self.n_in..(o + 1) * self.n_in];
                    for (g, xi) in row.iter_mut().zip(x) {
                        *g += d * xi;
                    }
                }
            }
        }
        for (g, d) in grads.data_mut(self.bias).iter_mut().zip(dy) {
            *g += d;
        }
        let mut dx = vec![0.0; self.n_in];
        for (o, &d) in dy.iter().enumerate() {
            if d != 0.0 {
                let row = &w[o * self.n_in..(o + 1) * self.n_in];
                for (g, wi) in dx.iter_mut().zip(row) {
                    *g += d * wi;
                }
            }
        }
        dx
    }
}

fn find(store: &ParamStore, name: &str, shape: &[usize]) -> Result<ParamId> {
    let idx = store
        .arrays()
        .iter()
        .position(|a| a.name == name)
        .ok_or_else(|| Error::Dimension(format!("missing parameter `{name}`")))?;
    let found = &store.arrays()[idx].shape;
    if found != shape {
        return Err(Error::Dimension(format!(
            "parameter `{name}` has shape {found:?}, expected {shape:?}"
        )));
    }
    Ok(ParamId(idx))
}

/// Gated recurrent unit.
///
/// Gates are stacked `[reset; update; candidate]` in the `3 n_h` rows of the
/// input-to-hidden and hidden-to-hidden matrices:
///
/// ```text
/// r  = σ(W_ir x + b_ir + W_hr h + b_hr)
/// g  = σ(W_iz x + b_iz + W_hz h + b_hz)
/// n  = tanh(W_in x + b_in + r ∘ (W_hn h + b_hn))
/// h' = (1 − g) ∘ h + g ∘ n
/// ```
///
/// The update gate `g` weighs the candidate, so an all-zero cell halves `h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GruCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub n_in: usize,
    pub n_h: usize,
}

/// Intermediate gate values kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GruCache {
    pub reset: Vec<f64>,
    pub update: Vec<f64>,
    pub candidate: Vec<f64>,
    /// `W_hn h + b_hn`, before the reset gate is applied.
    pub hidden_candidate: Vec<f64>,
}

impl GruCell {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        n_in: usize,
        n_h: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w_ih = store.add(
            &format!("{name}.w_ih"),
            &[3 * n_h, n_in],
            uniform_init(rng, 3 * n_h * n_in, n_in),
        )?;
        let w_hh = store.add(
            &format!("{name}.w_hh"),
            &[3 * n_h, n_h],
            uniform_init(rng, 3 * n_h * n_h, n_h),
        )?;
        let b_ih = store.add(&format!("{name}.b_ih"), &[3 * n_h], vec![0.0; 3 * n_h])?;
        let b_hh = store.add(&format!("{name}.b_hh"), &[3 * n_h], vec![0.0; 3 * n_h])?;
        Ok(Self {
            w_ih,
            w_hh,
            b_ih,
            b_hh,
            n_in,
            n_h,
        })
    }

    pub fn bind(store: &ParamStore, name: &str, n_in: usize, n_h: usize) -> Result<Self> {
        Ok(Self {
            w_ih: find(store, &format!("{name}.w_ih"), &[3 * n_h, n_in])?,
            w_hh: find(store, &format!("{name}.w_hh"), &[3 * n_h, n_h])?,
            b_ih: find(store, &format!("{name}.b_ih"), &[3 * n_h])?,
            b_hh: find(store, &format!("{name}.b_hh"), &[3 * n_h])?,
            n_in,
            n_h,
        })
    }

    fn affine(w: &[f64], b: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
        let n = x.len();
        (0..rows)
            .map(|r| b[r] + w[r * n..(r + 1) * n].iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
            .collect()
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64], h: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(store, x, h)?.0)
    }

    pub fn forward_cached(
        &self,
        store: &ParamStore,
        x: &[f64],
        h: &[f64],
    ) -> Result<(Vec<f64>, GruCache)> {
        if x.len() != self.n_in || h.len() != self.n_h {
            return Err(Error::Shape(format!(
                "GRU expects input {} and hidden {}, got {} and {}",
                self.n_in,
                self.n_h,
                x.len(),
                h.len()
            )));
        }
        let nh = self.n_h;
        let gi = Self::affine(store.data(self.w_ih), store.data(self.b_ih), x, 3 * nh);
        let gh = Self::affine(store.data(self.w_hh), store.data(self.b_hh), h, 3 * nh);
        let reset: Vec<f64> = (0..nh).map(|i| sigmoid(gi[i] + gh[i])).collect();
        let update: Vec<f64> = (0..nh).map(|i| sigmoid(gi[nh + i] + gh[nh + i])).collect();
        let hidden_candidate = gh[2 * nh..].to_vec();
        let candidate: Vec<f64> = (0..nh)
            .map(|i| (gi[2 * nh + i] + reset[i] * hidden_candidate[i]).tanh())
            .collect();
        let out = (0..nh)
            .map(|i| (1.0 - update[i]) * h[i] + update[i] * candidate[i])
            .collect();
        Ok((
            out,
            GruCache {
                reset,
                update,
                candidate,
                hidden_candidate,
            },
        ))
    }

    /// Accumulates parameter gradients; returns `(dL/dx, dL/dh)`.
    pub(crate) fn backward(
        &self,
        store: &ParamStore,
        grads: &mut ParamStore,
        x: &[f64],
        h: &[f64],
        cache: &GruCache,
        dout: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let nh = self.n_h;
        let mut d_gi = vec![0.0; 3 * nh];
        let mut d_gh = vec![0.0; 3 * nh];
        let mut dh = vec![0.0; nh];
        for i in 0..nh {
            let (r, g, n) = (cache.reset[i], cache.update[i], cache.candidate[i]);
            let d = dout[i];
            dh[i] = d * (1.0 - g);
            let dn_pre = d * g * (1.0 - n * n);
            let dg_pre = d * (n - h[i]) * g * (1.0 - g);
            let dr_pre = dn_pre * cache.hidden_candidate[i] * r * (1.0 - r);
            d_gi[i] = dr_pre;
            d_gi[nh + i] = dg_pre;
            d_gi[2 * nh + i] = dn_pre;
            d_gh[i] = dr_pre;
            d_gh[nh + i] = dg_pre;
            d_gh[2 * nh + i] = dn_pre * r;
        }
        let outer = |grads: &mut ParamStore, w: ParamId, b: ParamId, d: &[f64], v: &[f64]| {
            let n = v.len();
            let gw = grads.data_mut(w);
            for (row, &dr) in d.iter().enumerate() {
                for (c, vc) in v.iter().enumerate() {
                    gw[row * n + c] += dr * vc;
                }
            }
            for (gb, dr) in grads.data_mut(b).iter_mut().zip(d) {
                *gb += dr;
            }
        };
        outer(grads, self.w_ih, self.b_ih, &d_gi, x);
        outer(grads, self.w_hh, self.b_hh, &d_gh, h);

        let w_ih = store.data(self.w_ih);
        let w_hh = store.data(self.w_hh);
        let mut dx = vec![0.0; self.n_in];
        for (row, &d) in d_gi.iter().enumerate() {
            for (c, g) in dx.iter_mut().enumerate() {
                *g += d * w_ih[row * self.n_in + c];
            }
        }
        for (row, &d) in d_gh.iter().enumerate() {
            for (c, g) in dh.iter_mut().enumerate() {
                *g += d * w_hh[row * nh + c];
            }
        }
        (dx, dh)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;

    fn zero_store_dense(n_in: usize, n_out: usize) -> (ParamStore, DenseLayer) {
        let mut s = ParamStore::new();
        let l = DenseLayer::new(&mut s, "d", n_in, n_out, &mut rng_from_seed(0)).unwrap();
        s.data_mut(l.weight).iter_mut().for_each(|w| *w = 0.0);
        (s, l)
    }

    #[test]
    fn dense_examples() {
        let (mut s, l) = zero_store_dense(2, 2);
        s.data_mut(l.weight).copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(l.forward(&s, &[3.0, -1.0]).unwrap(), vec![3.0, -1.0]);

        let (mut s, l) = zero_store_dense(2, 2);
        s.data_mut(l.bias).copy_from_slice(&[1.0, 2.0]);
        assert_eq!(l.forward(&s, &[5.0, -7.0]).unwrap(), vec![1.0, 2.0]);

        let (mut s, l) = zero_store_dense(2, 2);
        s.data_mut(l.weight).copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        // hand product: [1*1 + 2*1, 3*1 + 4*1]
        assert_eq!(l.forward(&s, &[1.0, 1.0]).unwrap(), vec![3.0, 7.0]);

        assert!(matches!(l.forward(&s, &[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        DenseLayer::new(&mut a, "d", 9, 8, &mut rng_from_seed(4)).unwrap();
        DenseLayer::new(&mut b, "d", 9, 8, &mut rng_from_seed(4)).unwrap();
        assert_eq!(a, b);
        let bound = (1.0f64 / 9.0).sqrt();
        assert!(a.arrays()[0].data.iter().all(|w| w.abs() <= bound));
        assert!(a.arrays()[1].data.iter().all(|w| *w == 0.0));
    }

    fn zero_gru(n_in: usize, n_h: usize) -> (ParamStore, GruCell) {
        let mut s = ParamStore::new();
        let c = GruCell::new(&mut s, "g", n_in, n_h, &mut rng_from_seed(1)).unwrap();
        for a in s.arrays_mut() {
            a.data.iter_mut().for_each(|w| *w = 0.0);
        }
        (s, c)
    }

    #[test]
    fn gru_zero_cell_examples() {
        let (s, c) = zero_gru(3, 2);
        assert_eq!(c.forward(&s, &[1.0, -2.0, 5.0], &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(c.forward(&s, &[1.0, -2.0, 5.0], &[1.0, -0.4]).unwrap(), vec![0.5, -0.2]);
        assert!(c.forward(&s, &[1.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn gru_hidden_stays_in_hull() {
        let mut s = ParamStore::new();
        let mut rng = rng_from_seed(11);
        let c = GruCell::new(&mut s, "g", 4, 6, &mut rng).unwrap();
        for trial in 0..200 {
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let h: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let out = c.forward(&s, &x, &h).unwrap();
            for (o, hi) in out.iter().zip(&h) {
                assert!(o.abs() <= hi.abs().max(1.0) + 1e-12, "trial {trial}");
            }
        }
    }
}
