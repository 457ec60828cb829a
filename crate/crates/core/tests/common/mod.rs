//! Direct-formula oracles shared by the integration tests. Nothing here
//! calls the library's kernels; everything is plain nested loops.
#![allow(dead_code)]

use coattn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// `[m,k] · [k,n]` by triple loop.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `softmax(q kᵀ / √d) v` for one batch element; returns (out, weights).
pub fn attention(q: &[f64], k: &[f64], v: &[f64], nq: usize, nk: usize, d: usize, dv: usize) -> (Vec<f64>, Vec<f64>) {
    let scale = 1.0 / (d as f64).sqrt();
    let mut weights = Vec::with_capacity(nq * nk);
    for i in 0..nq {
        let scores: Vec<f64> = (0..nk)
            .map(|j| (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>() * scale)
            .collect();
        weights.extend(softmax(&scores));
    }
    let out = matmul(&weights, v, nq, nk, dv);
    (out, weights)
}

/// Columns `lo..hi` of a row-major `[r, c]` matrix.
pub fn columns(w: &[f64], r: usize, c: usize, lo: usize, hi: usize) -> Vec<f64> {
    (0..r).flat_map(|i| (lo..hi).map(move |j| (i, j))).map(|(i, j)| w[i * c + j]).collect()
}

/// Multi-head attention for one batch element, head by head:
/// `concat_i attention(x_q Wq_i, x_k Wk_i, x_v Wv_i) · Wo`.
/// Returns the output and the weights as `[m, nq, nk]`.
#[allow(clippy::too_many_arguments)]
pub fn multi_head(
    xq: &[f64],
    xk: &[f64],
    xv: &[f64],
    wq: &[f64],
    wk: &[f64],
    wv: &[f64],
    wo: &[f64],
    nq: usize,
    nk: usize,
    d: usize,
    m: usize,
) -> (Vec<f64>, Vec<f64>) {
    let dm = d / m;
    let mut concat = vec![0.0; nq * d];
    let mut weights = Vec::new();
    for h in 0..m {
        let q = matmul(xq, &columns(wq, d, d, h * dm, (h + 1) * dm), nq, d, dm);
        let k = matmul(xk, &columns(wk, d, d, h * dm, (h + 1) * dm), nk, d, dm);
        let v = matmul(xv, &columns(wv, d, d, h * dm, (h + 1) * dm), nk, d, dm);
        let (o, w) = attention(&q, &k, &v, nq, nk, dm, dm);
        for i in 0..nq {
            for c in 0..dm {
                concat[i * d + h * dm + c] = o[i * dm + c];
            }
        }
        weights.extend(w);
    }
    (matmul(&concat, wo, nq, d, d), weights)
}

/// Naive 3D cross-correlation on `[B, T, H, W, C]` with weight
/// `[kt, kh, kw, Cin, Cout]` and zero padding.
pub fn conv3d(x: &Tensor, w: &Tensor, bias: Option<&[f64]>, stride: [usize; 3], pad: [usize; 3]) -> Tensor {
    let xs = x.shape();
    let ws = w.shape();
    let (b, cin) = (xs[0], xs[4]);
    let cout = ws[4];
    let ins = [xs[1], xs[2], xs[3]];
    let ks = [ws[0], ws[1], ws[2]];
    let out: Vec<usize> = (0..3).map(|a| (ins[a] + 2 * pad[a] - ks[a]) / stride[a] + 1).collect();
    let mut y = vec![0.0; b * out[0] * out[1] * out[2] * cout];
    let xi = |n: usize, t: usize, h: usize, wi: usize, c: usize| (((n * ins[0] + t) * ins[1] + h) * ins[2] + wi) * cin + c;
    let mut idx = 0;
    for n in 0..b {
        for ot in 0..out[0] {
            for oh in 0..out[1] {
                for ow in 0..out[2] {
                    for co in 0..cout {
                        let mut s = bias.map_or(0.0, |bv| bv[co]);
                        for kt in 0..ks[0] {
                            for kh in 0..ks[1] {
                                for kw in 0..ks[2] {
                                    let t = (ot * stride[0] + kt) as isize - pad[0] as isize;
                                    let h = (oh * stride[1] + kh) as isize - pad[1] as isize;
                                    let wi = (ow * stride[2] + kw) as isize - pad[2] as isize;
                                    if t < 0 || h < 0 || wi < 0 {
                                        continue;
                                    }
                                    let (t, h, wi) = (t as usize, h as usize, wi as usize);
                                    if t >= ins[0] || h >= ins[1] || wi >= ins[2] {
                                        continue;
                                    }
                                    for ci in 0..cin {
                                        let wv = w.data()[(((kt * ks[1] + kh) * ks[2] + kw) * cin + ci) * cout + co];
                                        s += x.data()[xi(n, t, h, wi, ci)] * wv;
                                    }
                                }
                            }
                        }
                        y[idx] = s;
                        idx += 1;
                    }
                }
            }
        }
    }
    Tensor::new([b, out[0], out[1], out[2], cout], y).unwrap()
}

/// Naive unpadded average pooling on `[B, T, H, W, C]`.
pub fn avgpool3d(x: &Tensor, window: [usize; 3], stride: [usize; 3]) -> Tensor {
    let xs = x.shape();
    let (b, c) = (xs[0], xs[4]);
    let ins = [xs[1], xs[2], xs[3]];
    let out: Vec<usize> = (0..3).map(|a| (ins[a] - window[a]) / stride[a] + 1).collect();
    let count = (window[0] * window[1] * window[2]) as f64;
    let mut y = Vec::new();
    for n in 0..b {
        for ot in 0..out[0] {
            for oh in 0..out[1] {
                for ow in 0..out[2] {
                    for ch in 0..c {
                        let mut s = 0.0;
                        for kt in 0..window[0] {
                            for kh in 0..window[1] {
                                for kw in 0..window[2] {
                                    let (t, h, w) = (ot * stride[0] + kt, oh * stride[1] + kh, ow * stride[2] + kw);
                                    s += x.data()[(((n * ins[0] + t) * ins[1] + h) * ins[2] + w) * c + ch];
                                }
                            }
                        }
                        y.push(s / count);
                    }
                }
            }
        }
    }
    Tensor::new([b, out[0], out[1], out[2], c], y).unwrap()
}

/// Row-wise `(x − mean) / sqrt(var + eps)` with population variance.
pub fn normalize_rows(x: &[f64], n: usize, eps: f64) -> Vec<f64> {
    x.chunks(n)
        .flat_map(|r| {
            let mu = r.iter().sum::<f64>() / n as f64;
            let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            r.iter().map(move |v| (v - mu) / (var + eps).sqrt()).collect::<Vec<_>>()
        })
        .collect()
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Every distinct convolution and pooling geometry used by the desk, paper
/// and micro encoder stacks: `(kernel, stride, padding)`, padding is zero
/// for pools.
pub fn encoder_geometries() -> (Vec<([usize; 3], [usize; 3], [usize; 3])>, Vec<([usize; 3], [usize; 3])>) {
    use coattn::encoders::{EncoderConfig, EncoderLayer};
    let mut convs = Vec::new();
    let mut pools = Vec::new();
    for cfg in [EncoderConfig::desk(), EncoderConfig::paper(), EncoderConfig::micro()] {
        for l in cfg.audio_layers.iter().chain(&cfg.visual_layers) {
            match l {
                EncoderLayer::Conv(s) => {
                    let g = (s.kernel, s.stride, s.padding);
                    if !convs.contains(&g) {
                        convs.push(g);
                    }
                }
                EncoderLayer::Pool(p) => {
                    let g = (p.window, p.stride);
                    if !pools.contains(&g) {
                        pools.push(g);
                    }
                }
            }
        }
    }
    (convs, pools)
}

/// Smallest input extent giving two outputs along each axis.
pub fn micro_extent(kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> [usize; 3] {
    let mut e = [0; 3];
    for a in 0..3 {
        e[a] = (kernel[a] + stride[a]).saturating_sub(2 * pad[a]).max(1);
    }
    e
}
