//! Scalar-loop reference implementations shared by the oracle tests and
//! the acceptance run. Nothing here touches the tape.
#![allow(dead_code)]

use mpn::attention::BlockParams;
use mpn::mbam::FbcConfig;
use mpn::nn::ParamStore;
use mpn::{Rng, Scalar, Tensor};

/// f32 unit roundoff.
pub const U32: f64 = f32::EPSILON as f64 / 2.0;

pub fn f64s<F: Scalar>(t: &Tensor<F>) -> Vec<f64> {
    t.data().iter().map(|x| x.to_f()).collect()
}

/// Brute-force codes: for every row and atom, sum the rank-r products of the
/// two projections, then shrink towards zero by λ/2. Also returns, per
/// output, the sum of absolute values of every product that fed it, which
/// bounds the rounding error of any summation order.
pub fn fbc_brute(fv: &[f64], fa: &[f64], u: &[f64], v: &[f64], cfg: FbcConfig, n: usize) -> (Vec<f64>, Vec<f64>) {
    let (p, q, r, k) = (cfg.p, cfg.q, cfg.rank, cfg.atoms);
    let rk = r * k;
    let mut out = vec![0.0; n * k];
    let mut mag = vec![0.0; n * k];
    for row in 0..n {
        for l in 0..k {
            let mut c = 0.0;
            let mut m = 0.0;
            for j in l * r..(l + 1) * r {
                let (mut x, mut xm) = (0.0, 0.0);
                for i in 0..p {
                    x += u[i * rk + j] * fv[row * p + i];
                    xm += (u[i * rk + j] * fv[row * p + i]).abs();
                }
                let (mut y, mut ym) = (0.0, 0.0);
                for i in 0..q {
                    y += v[i * rk + j] * fa[row * q + i];
                    ym += (v[i * rk + j] * fa[row * q + i]).abs();
                }
                c += x * y;
                m += xm * ym;
            }
            let shrunk = (c.abs() - cfg.lasso_lambda / 2.0).max(0.0);
            out[row * k + l] = c.signum() * shrunk;
            mag[row * k + l] = m;
        }
    }
    (out, mag)
}

pub fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter().enumerate().map(|(i, v)| (v - mean) * inv * gain[i] + bias[i]).collect()
}

/// One-head block on a single sequence, written out loop by loop.
pub fn block_oracle(x: &[f64], ctx: &[f64], t: usize, tk: usize, d: usize, dk: usize, w: &BlockWeights, tau: f64) -> Vec<f64> {
    let proj = |src: &[f64], rows: usize, m: &[f64], cols: usize| -> Vec<f64> {
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                for i in 0..d {
                    out[r * cols + c] += src[r * d + i] * m[i * cols + c];
                }
            }
        }
        out
    };
    let q = proj(x, t, &w.q, dk);
    let k = proj(ctx, tk, &w.k, dk);
    let v = proj(ctx, tk, &w.v, dk);
    let mut out = vec![0.0; t * d];
    for i in 0..t {
        let mut s = vec![0.0; tk];
        for j in 0..tk {
            for c in 0..dk {
                s[j] += q[i * dk + c] * k[j * dk + c];
            }
            s[j] /= (dk as f64).sqrt() * tau;
        }
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut head = vec![0.0; dk];
        for j in 0..tk {
            for c in 0..dk {
                head[c] += e[j] / z * v[j * dk + c];
            }
        }
        let mut res = vec![0.0; d];
        for o in 0..d {
            let mut a = w.ob[o];
            for c in 0..dk {
                a += head[c] * w.o[c * d + o];
            }
            res[o] = x[i * d + o] + a;
        }
        let x1 = layer_norm_row(&res, &w.g1, &w.b1);
        let mut hid = vec![0.0; w.ff];
        for h in 0..w.ff {
            let mut a = w.f1b[h];
            for o in 0..d {
                a += x1[o] * w.f1[o * w.ff + h];
            }
            hid[h] = a.max(0.0);
        }
        let mut res2 = vec![0.0; d];
        for o in 0..d {
            let mut a = w.f2b[o];
            for h in 0..w.ff {
                a += hid[h] * w.f2[h * d + o];
            }
            res2[o] = x1[o] + a;
        }
        out[i * d..(i + 1) * d].copy_from_slice(&layer_norm_row(&res2, &w.g2, &w.b2));
    }
    out
}

pub struct BlockWeights {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub o: Vec<f64>,
    pub ob: Vec<f64>,
    pub g1: Vec<f64>,
    pub b1: Vec<f64>,
    pub f1: Vec<f64>,
    pub f1b: Vec<f64>,
    pub f2: Vec<f64>,
    pub f2b: Vec<f64>,
    pub g2: Vec<f64>,
    pub b2: Vec<f64>,
    pub ff: usize,
}

pub fn perturb_all(store: &mut ParamStore<f32>, rng: &mut Rng) {
    // Biases and norm parameters start at 0/1; move them so they matter.
    for t in store.tensors_mut() {
        for x in t.data_mut() {
            *x += (rng.normal() * 0.2) as f32;
        }
    }
}

pub fn weights_of(store: &ParamStore<f32>, p: &BlockParams) -> BlockWeights {
    let get = |id| f64s(store.get(id));
    BlockWeights {
        q: get(p.query),
        k: get(p.key),
        v: get(p.value),
        o: get(p.output.weight),
        ob: get(p.output.bias.unwrap()),
        g1: get(p.norm1_gain),
        b1: get(p.norm1_bias),
        f1: get(p.ff1.weight),
        f1b: get(p.ff1.bias.unwrap()),
        f2: get(p.ff2.weight),
        f2b: get(p.ff2.bias.unwrap()),
        g2: get(p.norm2_gain),
        b2: get(p.norm2_bias),
        ff: p.cfg.ff_hidden,
    }
}

pub fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}
