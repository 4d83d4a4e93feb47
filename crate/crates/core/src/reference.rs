//! Naive full-sequence forward pass used as a test oracle.
//!
//! Straight-line O(L^2 * n_embd) evaluation reading tensors by name from the
//! archive: whole-sequence activation matrices per layer, explicit causal
//! masking of the full score matrix. Shares no code with [`crate::model`]
//! but follows the same f32 rounding policy (sequential sums, multiply by
//! reciprocal square roots, tanh GELU).

use crate::archive::WeightsArchive;

type Matrix = Vec<Vec<f32>>;

fn t<'a>(w: &'a WeightsArchive, name: &str) -> &'a [f32] {
    &w.tensor(name).unwrap_or_else(|| panic!("no tensor {name}")).data
}

/// `x W^T` for `W` stored `[rows, cols]` row-major.
fn linear(x: &Matrix, w: &[f32], rows: usize) -> Matrix {
    x.iter()
        .map(|xi| {
            let cols = xi.len();
            (0..rows)
                .map(|r| {
                    let mut s = 0.0f32;
                    for c in 0..cols {
                        s += w[r * cols + c] * xi[c];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn layer_norm(x: &Matrix, gain: &[f32], bias: &[f32]) -> Matrix {
    x.iter()
        .map(|row| {
            let n = row.len() as f32;
            let mean = row.iter().fold(0.0f32, |a, &b| a + b) / n;
            let var = row.iter().fold(0.0f32, |a, &b| a + (b - mean) * (b - mean)) / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(i, &v)| (v - mean) * inv * gain[i] + bias[i])
                .collect()
        })
        .collect()
}

fn gelu(x: f32) -> f32 {
    let c = 0.797_884_6f32;
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// Logits for every position.
pub fn forward(w: &WeightsArchive, token_ids: &[usize], ages: &[f64]) -> Vec<Vec<f32>> {
    let cfg = w.config();
    let (e, nh, v) = (cfg.n_embd, cfg.n_head, cfg.vocab_size);
    let hd = e / nh;
    let len = token_ids.len();

    let tok = t(w, "tok_emb.weight");
    let age_w = t(w, "age_emb.weight");
    let mut h: Matrix = (0..len)
        .map(|p| {
            let a = (ages[p] / cfg.age_scale) as f32;
            (0..e).map(|i| tok[token_ids[p] * e + i] + a * age_w[i]).collect()
        })
        .collect();

    for layer in 0..cfg.n_layer {
        let name = |s: &str| format!("blk.{layer}.{s}");
        let x = layer_norm(&h, t(w, &name("ln1.gain")), t(w, &name("ln1.bias")));
        let q = linear(&x, t(w, &name("attn.wq")), e);
        let k = linear(&x, t(w, &name("attn.wk")), e);
        let val = linear(&x, t(w, &name("attn.wv")), e);

        let mut att_out: Matrix = vec![vec![0.0; e]; len];
        for head in 0..nh {
            let lo = head * hd;
            for i in 0..len {
                let mut scores = vec![f32::NEG_INFINITY; len];
                for (j, s) in scores.iter_mut().enumerate() {
                    if j <= i {
                        let mut d = 0.0f32;
                        for c in lo..lo + hd {
                            d += q[i][c] * k[j][c];
                        }
                        *s = d * (1.0 / (hd as f32).sqrt());
                    }
                }
                let m = scores.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let exps: Vec<f32> = scores.iter().map(|&s| (s - m).exp()).collect();
                let z: f32 = exps.iter().fold(0.0, |a, &b| a + b);
                for j in 0..=i {
                    let p = exps[j] / z;
                    for c in lo..lo + hd {
                        att_out[i][c] += p * val[j][c];
                    }
                }
            }
        }
        let proj = linear(&att_out, t(w, &name("attn.wo")), e);
        for (hi, pi) in h.iter_mut().zip(&proj) {
            for (a, b) in hi.iter_mut().zip(pi) {
                *a += b;
            }
        }

        let x = layer_norm(&h, t(w, &name("ln2.gain")), t(w, &name("ln2.bias")));
        let b1 = t(w, &name("mlp.b1"));
        let b2 = t(w, &name("mlp.b2"));
        let mut inner = linear(&x, t(w, &name("mlp.w1")), 4 * e);
        for row in &mut inner {
            for (c, val) in row.iter_mut().enumerate() {
                *val = gelu(*val + b1[c]);
            }
        }
        let out = linear(&inner, t(w, &name("mlp.w2")), e);
        for (hi, oi) in h.iter_mut().zip(&out) {
            for c in 0..e {
                hi[c] += oi[c] + b2[c];
            }
        }
    }

    let x = layer_norm(&h, t(w, "ln_f.gain"), t(w, "ln_f.bias"));
    linear(&x, t(w, "head.weight"), v)
}
