mod common;

use coattn::attention::{
    attention_block, multi_head_attention, scaled_dot_attention, BlockParams, CoAttentionConfig, MhaWeights, Variant,
};
use coattn::nn::{avgpool3d, conv3d, cross_entropy_logits, layer_norm, linear, ParamStore, LAYER_NORM_EPS};
use coattn::{Tape, Tensor};
use common::*;
use rand::Rng;

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    for (m, k, n) in [(1, 1, 1), (3, 5, 2), (7, 4, 9), (16, 33, 5)] {
        let a = random(&[m, k], &mut r);
        let b = random(&[k, n], &mut r);
        let tape = Tape::new();
        let y = tape.constant(a.clone()).matmul(&tape.constant(b.clone())).unwrap();
        assert!(max_diff(&y.value(), &matmul(a.data(), b.data(), m, k, n)) <= 1e-12);
    }
}

#[test]
fn batched_matmul_matches_per_batch_loop() {
    let mut r = rng(2);
    let (bsz, m, k, n) = (3, 4, 5, 2);
    let a = random(&[bsz, m, k], &mut r);
    let b = random(&[bsz, k, n], &mut r);
    let tape = Tape::new();
    let y = tape.constant(a.clone()).matmul(&tape.constant(b.clone())).unwrap();
    for i in 0..bsz {
        let want = matmul(&a.data()[i * m * k..(i + 1) * m * k], &b.data()[i * k * n..(i + 1) * k * n], m, k, n);
        assert!(max_diff(&y.value()[i * m * n..(i + 1) * m * n], &want) <= 1e-12);
    }
}

#[test]
fn linear_is_matmul_plus_bias() {
    let mut r = rng(3);
    let x = random(&[2, 3, 4], &mut r);
    let w = random(&[4, 5], &mut r);
    let bias = random(&[5], &mut r);
    let tape = Tape::new();
    let y = linear(&tape.constant(x.clone()), &tape.constant(w.clone()), Some(&tape.constant(bias.clone()))).unwrap();
    let mut want = matmul(x.data(), w.data(), 6, 4, 5);
    for (i, v) in want.iter_mut().enumerate() {
        *v += bias.data()[i % 5];
    }
    assert_eq!(y.shape(), vec![2, 3, 5]);
    assert!(max_diff(&y.value(), &want) <= 1e-12);
}

#[test]
fn scaled_dot_attention_matches_formula() {
    let mut r = rng(4);
    for _ in 0..10 {
        let (bsz, nq, nk, d, dv) = (2, r.random_range(1..6), r.random_range(1..6), r.random_range(1..9), 3);
        let q = random(&[bsz, nq, d], &mut r);
        let k = random(&[bsz, nk, d], &mut r);
        let v = random(&[bsz, nk, dv], &mut r);
        let tape = Tape::new();
        let (out, w) =
            scaled_dot_attention(&tape.constant(q.clone()), &tape.constant(k.clone()), &tape.constant(v.clone()))
                .unwrap();
        for b in 0..bsz {
            let (o, wt) = attention(
                &q.data()[b * nq * d..(b + 1) * nq * d],
                &k.data()[b * nk * d..(b + 1) * nk * d],
                &v.data()[b * nk * dv..(b + 1) * nk * dv],
                nq,
                nk,
                d,
                dv,
            );
            assert!(max_diff(&out.value()[b * nq * dv..(b + 1) * nq * dv], &o) <= 1e-12);
            assert!(max_diff(&w.value()[b * nq * nk..(b + 1) * nq * nk], &wt) <= 1e-12);
        }
    }
}

#[test]
fn multi_head_matches_per_head_oracle() {
    let mut r = rng(5);
    for &m in &[1, 2, 4] {
        let (bsz, nq, nk, d) = (2, 3, 5, 8);
        let xq = random(&[bsz, nq, d], &mut r);
        let xk = random(&[bsz, nk, d], &mut r);
        let ws: Vec<Tensor> = (0..4).map(|_| random(&[d, d], &mut r)).collect();
        let tape = Tape::new();
        let w = MhaWeights {
            wq: tape.constant(ws[0].clone()),
            wk: tape.constant(ws[1].clone()),
            wv: tape.constant(ws[2].clone()),
            wo: tape.constant(ws[3].clone()),
        };
        let kv = tape.constant(xk.clone());
        let (out, weights) = multi_head_attention(&tape.constant(xq.clone()), &kv, &kv, &w, m).unwrap();
        assert_eq!(weights.shape(), vec![bsz, m, nq, nk]);
        for b in 0..bsz {
            let (o, wt) = multi_head(
                &xq.data()[b * nq * d..(b + 1) * nq * d],
                &xk.data()[b * nk * d..(b + 1) * nk * d],
                &xk.data()[b * nk * d..(b + 1) * nk * d],
                ws[0].data(),
                ws[1].data(),
                ws[2].data(),
                ws[3].data(),
                nq,
                nk,
                d,
                m,
            );
            assert!(max_diff(&out.value()[b * nq * d..(b + 1) * nq * d], &o) <= 1e-12);
            let per = m * nq * nk;
            assert!(max_diff(&weights.value()[b * per..(b + 1) * per], &wt) <= 1e-12);
        }
    }
}

#[test]
fn attention_block_matches_post_norm_formula() {
    let mut r = rng(6);
    let cfg = CoAttentionConfig::new(8, 2, 1, Variant::Cma);
    let mut store = ParamStore::new();
    let p = BlockParams::register(&mut store, "blk", &cfg, &mut r).unwrap();
    // Non-trivial affine terms so both norms are exercised.
    for param in store.params_mut() {
        if param.name.ends_with("gamma") || param.name.ends_with("beta") || param.name.ends_with(".b1") || param.name.ends_with(".b2") {
            for v in param.value.data_mut() {
                *v = r.random_range(-1.0..1.0);
            }
        }
    }
    let (nq, nk, d, f) = (3, 4, 8, cfg.ffn_width);
    let x = random(&[1, nq, d], &mut r);
    let c = random(&[1, nk, d], &mut r);
    let tape = Tape::new();
    let bound = store.bind(&tape, false);
    let (y, _) = attention_block(&tape.constant(x.clone()), &tape.constant(c.clone()), &p, &bound, 2).unwrap();

    let get = |id| store.get(id).data().to_vec();
    let (att, _) = multi_head(
        x.data(),
        c.data(),
        c.data(),
        &get(p.mha.wq),
        &get(p.mha.wk),
        &get(p.mha.wv),
        &get(p.mha.wo),
        nq,
        nk,
        d,
        2,
    );
    let affine = |x: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
        normalize_rows(x, d, LAYER_NORM_EPS)
            .iter()
            .enumerate()
            .map(|(i, v)| v * g[i % d] + b[i % d])
            .collect()
    };
    let res1: Vec<f64> = x.data().iter().zip(&att).map(|(a, b)| a + b).collect();
    let y1 = affine(&res1, &get(p.ln1.gamma), &get(p.ln1.beta));
    let mut h = matmul(&y1, &get(p.ffn.w1), nq, d, f);
    let b1 = get(p.ffn.b1);
    for (i, v) in h.iter_mut().enumerate() {
        *v = (*v + b1[i % f]).max(0.0);
    }
    let mut ffn = matmul(&h, &get(p.ffn.w2), nq, f, d);
    let b2 = get(p.ffn.b2);
    for (i, v) in ffn.iter_mut().enumerate() {
        *v += b2[i % d];
    }
    let res2: Vec<f64> = y1.iter().zip(&ffn).map(|(a, b)| a + b).collect();
    let want = affine(&res2, &get(p.ln2.gamma), &get(p.ln2.beta));
    assert!(max_diff(&y.value(), &want) <= 1e-12);
}

#[test]
fn conv3d_matches_naive_loops_with_bias() {
    let mut r = rng(7);
    for (kernel, stride, pad) in [
        ([1, 1, 1], [1, 1, 1], [0, 0, 0]),
        ([3, 3, 3], [2, 1, 2], [1, 0, 1]),
        ([2, 5, 3], [1, 3, 2], [1, 2, 0]),
    ] {
        let ext = micro_extent(kernel, stride, pad);
        let x = random(&[2, ext[0] + 1, ext[1], ext[2] + 2, 3], &mut r);
        let w = random(&[kernel[0], kernel[1], kernel[2], 3, 4], &mut r);
        let b = random(&[4], &mut r);
        let tape = Tape::new();
        let y = conv3d(
            &tape.constant(x.clone()),
            &tape.constant(w.clone()),
            Some(&tape.constant(b.clone())),
            stride,
            pad,
        )
        .unwrap();
        let want = conv3d_oracle(&x, &w, Some(b.data()), stride, pad);
        assert_eq!(y.shape(), want.shape());
        assert!(max_diff(&y.value(), want.data()) <= 1e-12);
    }
}

fn conv3d_oracle(x: &Tensor, w: &Tensor, b: Option<&[f64]>, s: [usize; 3], p: [usize; 3]) -> Tensor {
    common::conv3d(x, w, b, s, p)
}

#[test]
fn avgpool3d_matches_naive_loops() {
    let mut r = rng(8);
    let x = random(&[2, 5, 6, 7, 3], &mut r);
    let tape = Tape::new();
    let y = avgpool3d(&tape.constant(x.clone()), [2, 3, 2], [1, 2, 3]).unwrap();
    let want = common::avgpool3d(&x, [2, 3, 2], [1, 2, 3]);
    assert_eq!(y.shape(), want.shape());
    assert!(max_diff(&y.value(), want.data()) <= 1e-12);
}

#[test]
fn layer_norm_matches_formula_with_affine() {
    let mut r = rng(9);
    let x = random(&[4, 6], &mut r);
    let g = random(&[6], &mut r);
    let b = random(&[6], &mut r);
    let tape = Tape::new();
    let y = layer_norm(&tape.constant(x.clone()), &tape.constant(g.clone()), &tape.constant(b.clone()), 1e-5).unwrap();
    let want: Vec<f64> = normalize_rows(x.data(), 6, 1e-5)
        .iter()
        .enumerate()
        .map(|(i, v)| v * g.data()[i % 6] + b.data()[i % 6])
        .collect();
    assert!(max_diff(&y.value(), &want) <= 1e-12);
}

#[test]
fn softmax_matches_formula() {
    let mut r = rng(10);
    let x = random(&[3, 7], &mut r);
    let tape = Tape::new();
    let y = tape.constant(x.clone()).softmax_lastdim().unwrap();
    let want: Vec<f64> = x.data().chunks(7).flat_map(softmax).collect();
    assert!(max_diff(&y.value(), &want) <= 1e-15);
}

#[test]
fn cross_entropy_matches_formula() {
    let mut r = rng(11);
    let z = random(&[5, 3], &mut r);
    let labels = [0, 2, 1, 1, 0];
    let tape = Tape::new();
    let loss = cross_entropy_logits(&tape.constant(z.clone()), &labels).unwrap().item();
    let want = z
        .data()
        .chunks(3)
        .zip(labels)
        .map(|(row, y)| -softmax(row)[y].ln())
        .sum::<f64>()
        / 5.0;
    assert!((loss - want).abs() <= 1e-12);
}
