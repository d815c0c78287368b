//! Plain-loop reference implementations used as oracles by the integration
//! tests. Nothing here goes through the tape.
#![allow(dead_code)]

pub mod descent;
pub mod recall;

use metabalance::numerics::{Matrix, ParamSet};

/// Dense layers read out of a parameter set: `(weight in x out, bias)`.
pub fn layers(p: &ParamSet) -> Vec<(Vec<Vec<f64>>, Vec<f64>)> {
    let n = p.segments().len() / 2;
    (0..n)
        .map(|l| {
            let w = p.segment(&format!("layer{l}.weight")).unwrap();
            let b = p.segment(&format!("layer{l}.bias")).unwrap();
            let rows = (0..w.rows()).map(|r| w.row(r).to_vec()).collect();
            (rows, b.data().to_vec())
        })
        .collect()
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Activations of every layer (input first); ReLU hidden, sigmoid output.
pub fn mlp_activations(p: &ParamSet, x: &[Vec<f64>]) -> Vec<Vec<Vec<f64>>> {
    let ls = layers(p);
    let mut acts = vec![x.to_vec()];
    for (li, (w, b)) in ls.iter().enumerate() {
        let last = li + 1 == ls.len();
        let h = acts.last().unwrap();
        let out: Vec<Vec<f64>> = h
            .iter()
            .map(|row| {
                (0..b.len())
                    .map(|j| {
                        let mut z = b[j];
                        for (k, hk) in row.iter().enumerate() {
                            z += hk * w[k][j];
                        }
                        if last {
                            sigmoid(z)
                        } else {
                            z.max(0.0)
                        }
                    })
                    .collect()
            })
            .collect();
        acts.push(out);
    }
    acts
}

pub fn mlp(p: &ParamSet, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    mlp_activations(p, x).pop().unwrap()
}

pub fn bce(y: &[Vec<f64>], p: &[Vec<f64>]) -> Vec<Vec<f64>> {
    y.iter()
        .zip(p)
        .map(|(yr, pr)| {
            yr.iter()
                .zip(pr)
                .map(|(&t, &q)| -(t * q.ln() + (1.0 - t) * (1.0 - q).ln()))
                .collect()
        })
        .collect()
}

pub fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// `(1/(nC)) sum w l`.
pub fn weighted_mean(w: &[Vec<f64>], l: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (wr, lr) in w.iter().zip(l) {
        for (a, b) in wr.iter().zip(lr) {
            total += a * b;
            count += 1;
        }
    }
    total / count as f64
}

/// Per-row sum of `l / freq` averaged over rows; `freq` is the positive fraction.
pub fn inv_freq(l: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let m = y.len() as f64;
    let c = y[0].len();
    let freq: Vec<f64> = (0..c)
        .map(|k| y.iter().filter(|r| r[k] > 0.5).count() as f64 / m)
        .collect();
    let mut total = 0.0;
    for r in l {
        for k in 0..c {
            total += r[k] / freq[k];
        }
    }
    total / m
}

/// Hand-derived gradient of the mean of `w * l(theta)` for an MLP
/// classifier with fixed weights `w`, in parameter-set order.
pub fn weighted_bce_grad(theta: &ParamSet, x: &[Vec<f64>], y: &[Vec<f64>], w: &[Vec<f64>]) -> Vec<f64> {
    let ls = layers(theta);
    let acts = mlp_activations(theta, x);
    let n = x.len();
    let c = y[0].len();
    let scale = 1.0 / (n * c) as f64;
    let out = acts.last().unwrap();
    // dL/dz at the output: sigmoid + BCE collapse to (p - y)
    let mut delta: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..c).map(|k| scale * w[i][k] * (out[i][k] - y[i][k])).collect())
        .collect();
    let mut grads: Vec<Vec<f64>> = vec![Vec::new(); ls.len()];
    for li in (0..ls.len()).rev() {
        let (wm, b) = &ls[li];
        let h = &acts[li];
        let fan_in = wm.len();
        let mut gw = vec![0.0; fan_in * b.len()];
        let mut gb = vec![0.0; b.len()];
        for i in 0..n {
            for j in 0..b.len() {
                gb[j] += delta[i][j];
                for k in 0..fan_in {
                    gw[k * b.len() + j] += h[i][k] * delta[i][j];
                }
            }
        }
        let mut g = gw;
        g.extend(gb);
        grads[li] = g;
        if li > 0 {
            delta = (0..n)
                .map(|i| {
                    (0..fan_in)
                        .map(|k| {
                            if h[i][k] <= 0.0 {
                                return 0.0;
                            }
                            (0..b.len()).map(|j| delta[i][j] * wm[k][j]).sum()
                        })
                        .collect()
                })
                .collect();
        }
    }
    grads.concat()
}

/// Meta loss on `(xm, ym)` after one plain SGD step of the classifier on
/// `(x, y)` with weights produced by the weight net `phi` from the losses.
#[allow(clippy::too_many_arguments)]
pub fn meta_loss_after_step(
    theta: &ParamSet,
    phi: &ParamSet,
    x: &[Vec<f64>],
    y: &[Vec<f64>],
    xm: &[Vec<f64>],
    ym: &[Vec<f64>],
    alpha: f64,
) -> f64 {
    let l = bce(y, &mlp(theta, x));
    let w = mlp(phi, &l);
    let g = weighted_bce_grad(theta, x, y, &w);
    let mut stepped = theta.clone();
    for (v, gi) in stepped.values_mut().iter_mut().zip(&g) {
        *v -= alpha * gi;
    }
    inv_freq(&bce(ym, &mlp(&stepped, xm)), ym)
}

/// Central differences over every coordinate.
pub fn central_diff(f: impl Fn(&ParamSet) -> f64, p: &ParamSet, h: f64) -> Vec<f64> {
    (0..p.len())
        .map(|i| {
            let mut up = p.clone();
            up.values_mut()[i] += h;
            let mut down = p.clone();
            down.values_mut()[i] -= h;
            (f(&up) - f(&down)) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`, maximised over coordinates.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Small deterministic xorshift stream for test inputs, so the oracles do
/// not share the library's RNG plumbing.
pub struct Stream(u64);

impl Stream {
    pub fn new(seed: u64) -> Self {
        Stream(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1)
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.0;
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        self.0 = x;
        x
    }

    /// Uniform in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    pub fn matrix(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Vec<Vec<f64>> {
        (0..rows).map(|_| (0..cols).map(|_| self.range(lo, hi)).collect()).collect()
    }

    /// Binary labels where every column has at least one positive.
    pub fn labels(&mut self, rows: usize, cols: usize) -> Vec<Vec<f64>> {
        assert!(rows >= cols);
        let mut y: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..cols).map(|_| (self.unit() < 0.3) as u8 as f64).collect())
            .collect();
        for (k, row) in y.iter_mut().enumerate().take(cols) {
            row[k] = 1.0;
        }
        y
    }
}

pub fn to_matrix(rows: &[Vec<f64>]) -> Matrix {
    Matrix::from_rows(rows).unwrap()
}
