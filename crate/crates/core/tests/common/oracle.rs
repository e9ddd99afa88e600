//! Straight-line reference implementations. Nothing here touches the tape.

use ammc::nn::{EncoderLayer, LayerNorm, Linear, MultiHeadSelfAttention, TransformerEncoder};
use ammc::params::ParamStore;
use ammc::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len(), "row counts differ");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len(), "column counts differ");
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i][p] * b[p][j];
            }
            out[i][j] = acc;
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

/// Plain `exp / Σ exp`, no max shift.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = row.iter().map(|x| x.exp()).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|x| x / total).collect()
}

pub fn layer_norm(row: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    row.iter()
        .enumerate()
        .map(|(j, x)| gain[j] * (x - mean) / (var + eps).sqrt() + bias[j])
        .collect()
}

/// Mean of `-(t ln σ(z) + (1 - t) ln(1 - σ(z)))`.
pub fn bce(logits: &[f64], targets: &[f64]) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(targets)
        .map(|(&z, &t)| {
            let p = 1.0 / (1.0 + (-z).exp());
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    total / logits.len() as f64
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn vec_of(store: &ParamStore, id: ammc::params::ParamId) -> Vec<f64> {
    store.tensor(id).data().to_vec()
}

pub fn linear(store: &ParamStore, l: &Linear, x: &Mat) -> Mat {
    let w = to_mat(store.tensor(l.w));
    let b = vec_of(store, l.b);
    matmul(x, &w)
        .into_iter()
        .map(|r| r.iter().zip(&b).map(|(v, c)| v + c).collect())
        .collect()
}

pub fn norm(store: &ParamStore, n: &LayerNorm, x: &Mat, eps: f64) -> Mat {
    let (g, b) = (vec_of(store, n.gain), vec_of(store, n.bias));
    x.iter().map(|r| layer_norm(r, &g, &b, eps)).collect()
}

/// Explicit per-head QKV loops.
pub fn attention(store: &ParamStore, a: &MultiHeadSelfAttention, x: &Mat) -> Mat {
    let q = linear(store, &a.q, x);
    let k = linear(store, &a.k, x);
    let v = linear(store, &a.v, x);
    let (l, dh) = (x.len(), a.d_model / a.n_heads);
    let mut joined = vec![vec![0.0; a.d_model]; l];
    for h in 0..a.n_heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..l {
            let scores: Vec<f64> = (0..l)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let w = softmax(&scores);
            for c in cols.clone() {
                joined[i][c] = (0..l).map(|j| w[j] * v[j][c]).sum();
            }
        }
    }
    linear(store, &a.out, &joined)
}

pub fn encoder_layer(store: &ParamStore, layer: &EncoderLayer, x: &Mat, eps: f64) -> Mat {
    let h1 = norm(store, &layer.norm1, &add(x, &attention(store, &layer.attn, x)), eps);
    let f: Mat = linear(store, &layer.ff_in, &h1)
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    let f = linear(store, &layer.ff_out, &f);
    norm(store, &layer.norm2, &add(&h1, &f), eps)
}

pub fn transformer(store: &ParamStore, enc: &TransformerEncoder, x: &Mat, eps: f64) -> Mat {
    enc.layers.iter().fold(x.clone(), |h, l| encoder_layer(store, l, &h, eps))
}

pub fn mean_rows(x: &Mat) -> Vec<f64> {
    let n = x.len() as f64;
    (0..x[0].len()).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect()
}

/// Adam on a single scalar, written from the textbook update.
pub struct ScalarAdam {
    pub lr: f64,
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
    m: f64,
    v: f64,
    t: i32,
}

impl ScalarAdam {
    pub fn new(lr: f64, b1: f64, b2: f64, eps: f64) -> Self {
        ScalarAdam { lr, b1, b2, eps, m: 0.0, v: 0.0, t: 0 }
    }

    pub fn step(&mut self, p: f64, g: f64) -> f64 {
        self.t += 1;
        self.m = self.b1 * self.m + (1.0 - self.b1) * g;
        self.v = self.b2 * self.v + (1.0 - self.b2) * g * g;
        let mh = self.m / (1.0 - self.b1.powi(self.t));
        let vh = self.v / (1.0 - self.b2.powi(self.t));
        p - self.lr * mh / (vh.sqrt() + self.eps)
    }
}
