use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::kernels::gemm;
use crate::tape::Var;

/// One 3D convolution layer over channels-last `[B, T, H, W, C]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conv3dSpec {
    pub out_channels: usize,
    /// (kt, kh, kw)
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    #[serde(default)]
    pub padding: [usize; 3],
    #[serde(default = "default_true")]
    pub bias: bool,
}

fn default_true() -> bool {
    true
}

/// `floor((input + 2·pad − kernel) / stride) + 1`, or `EmptyOutput` if that
/// would be below one.
pub fn output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::InvalidArgument(format!(
            "kernel {kernel} and stride {stride} must be positive"
        )));
    }
    let span = input + 2 * pad;
    if span < kernel {
        return Err(Error::EmptyOutput(format!(
            "extent {input} with padding {pad} is smaller than kernel {kernel}"
        )));
    }
    Ok((span - kernel) / stride + 1)
}

impl Conv3dSpec {
    pub fn new(out_channels: usize, kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3]) -> Self {
        Conv3dSpec {
            out_channels,
            kernel,
            stride,
            padding,
            bias: true,
        }
    }

    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = output_extent(input[a], self.kernel[a], self.stride[a], self.padding[a])?;
        }
        Ok(out)
    }

    pub fn weight_shape(&self, in_channels: usize) -> [usize; 5] {
        let [kt, kh, kw] = self.kernel;
        [kt, kh, kw, in_channels, self.out_channels]
    }
}

fn dims5(shape: &[usize], what: &str) -> Result<[usize; 5]> {
    shape
        .try_into()
        .map_err(|_| shape_err!("{what} expects [B, T, H, W, C], got {:?}", shape))
}

struct ConvGeom {
    batch: usize,
    input: [usize; 3],
    cin: usize,
    out: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.batch * self.out.iter().product::<usize>()
    }

    fn cols(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.cin
    }

    /// Calls `f(row, col_offset, input_offset)` for every in-bounds patch
    /// element; each call covers `cin` contiguous channels.
    fn for_each_patch(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [ti, hi, wi] = self.input;
        let [to, ho, wo] = self.out;
        let [kt, kh, kw] = self.kernel;
        let c = self.cin;
        let k = self.cols();
        let mut row = 0;
        for b in 0..self.batch {
            for ot in 0..to {
                for oh in 0..ho {
                    for ow in 0..wo {
                        for dt in 0..kt {
                            let t = (ot * self.stride[0] + dt) as isize - self.padding[0] as isize;
                            if t < 0 || t >= ti as isize {
                                continue;
                            }
                            for dh in 0..kh {
                                let h =
                                    (oh * self.stride[1] + dh) as isize - self.padding[1] as isize;
                                if h < 0 || h >= hi as isize {
                                    continue;
                                }
                                for dw in 0..kw {
                                    let w = (ow * self.stride[2] + dw) as isize
                                        - self.padding[2] as isize;
                                    if w < 0 || w >= wi as isize {
                                        continue;
                                    }
                                    let col = ((dt * kh + dh) * kw + dw) * c;
                                    let src = (((b * ti + t as usize) * hi + h as usize) * wi
                                        + w as usize)
                                        * c;
                                    f(row * k, col, src);
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }
}

/// 3D cross-correlation with zero padding. `weight` is `[kt, kh, kw, Cin, Cout]`.
pub fn conv3d<'t>(
    x: &Var<'t>,
    weight: &Var<'t>,
    bias: Option<&Var<'t>>,
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<Var<'t>> {
    let [batch, ti, hi, wi, cin] = dims5(&x.shape(), "conv3d")?;
    let ws = weight.shape();
    if ws.len() != 5 || ws[3] != cin {
        return Err(shape_err!(
            "conv3d weight {:?} does not match {cin} input channels",
            ws
        ));
    }
    let cout = ws[4];
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(shape_err!("conv3d bias {:?}, expected [{cout}]", b.shape()));
        }
    }
    let kernel = [ws[0], ws[1], ws[2]];
    let mut out = [0; 3];
    for a in 0..3 {
        out[a] = output_extent([ti, hi, wi][a], kernel[a], stride[a], padding[a])?;
    }
    let geom = ConvGeom {
        batch,
        input: [ti, hi, wi],
        cin,
        out,
        kernel,
        stride,
        padding,
    };
    let (rows, k) = (geom.rows(), geom.cols());
    let xv = x.value();
    let mut cols = vec![0.0; rows * k];
    geom.for_each_patch(|r, c, s| cols[r + c..r + c + cin].copy_from_slice(&xv[s..s + cin]));
    let wv = weight.value();
    let mut y = vec![0.0; rows * cout];
    gemm(rows, k, cout, &cols, false, &wv, false, &mut y, false);
    if let Some(b) = bias {
        let bv = b.value();
        for row in y.chunks_exact_mut(cout) {
            row.iter_mut().zip(bv.iter()).for_each(|(o, b)| *o += b);
        }
    }
    let shape = vec![batch, out[0], out[1], out[2], cout];
    let mut parents = vec![*x, *weight];
    parents.extend(bias.copied());
    let (ix, iw, ib) = (x.id(), weight.id(), bias.map(|b| b.id()));
    Ok(x.tape().record(shape, y, &parents, move |g, s| {
        if let Some(slot) = s.slot(iw) {
            gemm(k, rows, cout, &cols, true, g, false, slot, true);
        }
        if let Some(slot) = ib.and_then(|ib| s.slot(ib)) {
            for row in g.chunks_exact(cout) {
                slot.iter_mut().zip(row).for_each(|(d, v)| *d += v);
            }
        }
        if s.wants(ix) {
            let mut dcols = vec![0.0; rows * k];
            gemm(rows, cout, k, g, false, &wv, true, &mut dcols, false);
            let slot = s.slot(ix).expect("wanted");
            geom.for_each_patch(|r, c, src| {
                slot[src..src + cin]
                    .iter_mut()
                    .zip(&dcols[r + c..r + c + cin])
                    .for_each(|(d, v)| *d += v);
            });
        }
    }))
}

/// Unpadded 3D average pooling over `[B, T, H, W, C]`.
pub fn avgpool3d<'t>(x: &Var<'t>, window: [usize; 3], stride: [usize; 3]) -> Result<Var<'t>> {
    let [batch, ti, hi, wi, c] = dims5(&x.shape(), "avgpool3d")?;
    let mut out = [0; 3];
    for a in 0..3 {
        out[a] = output_extent([ti, hi, wi][a], window[a], stride[a], 0)?;
    }
    let [to, ho, wo] = out;
    let [kt, kh, kw] = window;
    let inv = 1.0 / (kt * kh * kw) as f64;
    let xv = x.value();
    let in_idx = move |b: usize, t: usize, h: usize, w: usize| (((b * ti + t) * hi + h) * wi + w) * c;
    // Visits (output offset, input offset) pairs window by window.
    let visit = move |f: &mut dyn FnMut(usize, usize)| {
        let mut o = 0;
        for b in 0..batch {
            for ot in 0..to {
                for oh in 0..ho {
                    for ow in 0..wo {
                        for dt in 0..kt {
                            for dh in 0..kh {
                                for dw in 0..kw {
                                    f(
                                        o,
                                        in_idx(
                                            b,
                                            ot * stride[0] + dt,
                                            oh * stride[1] + dh,
                                            ow * stride[2] + dw,
                                        ),
                                    );
                                }
                            }
                        }
                        o += c;
                    }
                }
            }
        }
    };
    let mut y = vec![0.0; batch * to * ho * wo * c];
    visit(&mut |o, i| {
        y[o..o + c]
            .iter_mut()
            .zip(&xv[i..i + c])
            .for_each(|(d, v)| *d += v * inv)
    });
    let ix = x.id();
    Ok(x.tape().record(
        vec![batch, to, ho, wo, c],
        y,
        &[*x],
        move |g, s| {
            if let Some(slot) = s.slot(ix) {
                visit(&mut |o, i| {
                    slot[i..i + c]
                        .iter_mut()
                        .zip(&g[o..o + c])
                        .for_each(|(d, v)| *d += v * inv)
                });
            }
        },
    ))
}

/// `x · W + b` over the trailing axis; `weight` is `[in, out]`.
pub fn linear<'t>(x: &Var<'t>, weight: &Var<'t>, bias: Option<&Var<'t>>) -> Result<Var<'t>> {
    let xs = x.shape();
    let ws = weight.shape();
    let fan_in = *xs.last().ok_or_else(|| shape_err!("linear on a scalar"))?;
    if ws.len() != 2 || ws[0] != fan_in {
        return Err(shape_err!("linear: input {:?} with weight {:?}", xs, ws));
    }
    let fan_out = ws[1];
    if let Some(b) = bias {
        if b.shape() != [fan_out] {
            return Err(shape_err!("linear bias {:?}, expected [{fan_out}]", b.shape()));
        }
    }
    let rows = x.numel() / fan_in.max(1);
    let (xv, wv) = (x.value(), weight.value());
    let mut y = vec![0.0; rows * fan_out];
    gemm(rows, fan_in, fan_out, &xv, false, &wv, false, &mut y, false);
    if let Some(b) = bias {
        let bv = b.value();
        for row in y.chunks_exact_mut(fan_out) {
            row.iter_mut().zip(bv.iter()).for_each(|(o, b)| *o += b);
        }
    }
    let mut shape = xs.clone();
    *shape.last_mut().unwrap() = fan_out;
    let mut parents = vec![*x, *weight];
    parents.extend(bias.copied());
    let (ix, iw, ib) = (x.id(), weight.id(), bias.map(|b| b.id()));
    Ok(x.tape().record(shape, y, &parents, move |g, s| {
        if let Some(slot) = s.slot(ix) {
            gemm(rows, fan_out, fan_in, g, false, &wv, true, slot, true);
        }
        if let Some(slot) = s.slot(iw) {
            gemm(fan_in, rows, fan_out, &xv, true, g, false, slot, true);
        }
        if let Some(slot) = ib.and_then(|ib| s.slot(ib)) {
            for row in g.chunks_exact(fan_out) {
                slot.iter_mut().zip(row).for_each(|(d, v)| *d += v);
            }
        }
    }))
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalizes each trailing vector to zero mean and unit population
/// variance, then applies `gamma ∘ x̂ + beta`.
pub fn layer_norm<'t>(x: &Var<'t>, gamma: &Var<'t>, beta: &Var<'t>, eps: f64) -> Result<Var<'t>> {
    let xs = x.shape();
    let d = *xs.last().ok_or_else(|| shape_err!("layer_norm on a scalar"))?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(shape_err!(
            "layer_norm width {d} with gamma {:?} and beta {:?}",
            gamma.shape(),
            beta.shape()
        ));
    }
    let xv = x.value();
    let (gv, bv) = (gamma.value(), beta.value());
    let rows = xv.len() / d;
    let mut xhat = vec![0.0; xv.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &xv[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for (h, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
            *h = (v - mean) * is;
        }
    }
    let y: Vec<f64> = xhat
        .chunks_exact(d)
        .flat_map(|row| {
            row.iter()
                .zip(gv.iter().zip(bv.iter()))
                .map(|(h, (g, b))| g * h + b)
                .collect::<Vec<_>>()
        })
        .collect();
    let (ix, ig, ib) = (x.id(), gamma.id(), beta.id());
    Ok(x.tape().record(xs, y, &[*x, *gamma, *beta], move |g, s| {
        if let Some(slot) = s.slot(ig) {
            for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                for ((sg, gi), hi) in slot.iter_mut().zip(gr).zip(hr) {
                    *sg += gi * hi;
                }
            }
        }
        if let Some(slot) = s.slot(ib) {
            for gr in g.chunks_exact(d) {
                slot.iter_mut().zip(gr).for_each(|(sb, gi)| *sb += gi);
            }
        }
        if let Some(slot) = s.slot(ix) {
            let mut gh = vec![0.0; d];
            for r in 0..rows {
                let gr = &g[r * d..(r + 1) * d];
                let hr = &xhat[r * d..(r + 1) * d];
                for ((o, gi), ga) in gh.iter_mut().zip(gr).zip(gv.iter()) {
                    *o = gi * ga;
                }
                let mean_g = gh.iter().sum::<f64>() / d as f64;
                let mean_gh = gh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for ((dx, ghi), hi) in slot[r * d..(r + 1) * d].iter_mut().zip(&gh).zip(hr) {
                    *dx += inv_std[r] * (ghi - mean_g - hi * mean_gh);
                }
            }
        }
    }))
}

/// Inverted dropout: in training each element is zeroed with probability
/// `p` and survivors are scaled by `1/(1−p)`; otherwise the input is
/// returned unchanged.
pub fn dropout<'t, R: Rng + ?Sized>(x: &Var<'t>, p: f64, train: bool, rng: &mut R) -> Result<Var<'t>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidProbability(p));
    }
    if !train || p == 0.0 {
        return Ok(*x);
    }
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..x.numel())
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    let y = x.value().iter().zip(&mask).map(|(v, m)| v * m).collect();
    let ix = x.id();
    Ok(x.tape().record(x.shape(), y, &[*x], move |g, s| {
        if let Some(slot) = s.slot(ix) {
            for ((d, gi), m) in slot.iter_mut().zip(g).zip(&mask) {
                *d += gi * m;
            }
        }
    }))
}

/// Mean over the batch of `−log softmax(logits)[label]`.
pub fn cross_entropy_logits<'t>(logits: &Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(shape_err!(
            "cross entropy over {:?} with {} labels",
            shape,
            labels.len()
        ));
    }
    let (batch, classes) = (shape[0], shape[1]);
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let z = logits.value();
    let probs = crate::ops::softmax_rows(&z, classes);
    let mut loss = 0.0;
    for (row, &y) in z.chunks_exact(classes).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
    }
    loss /= batch as f64;
    let labels = labels.to_vec();
    let il = logits.id();
    Ok(logits
        .tape()
        .record(Vec::new(), vec![loss], &[*logits], move |g, s| {
            if let Some(slot) = s.slot(il) {
                let scale = g[0] / batch as f64;
                for (b, &y) in labels.iter().enumerate() {
                    for c in 0..classes {
                        let onehot = if c == y { 1.0 } else { 0.0 };
                        slot[b * classes + c] += scale * (probs[b * classes + c] - onehot);
                    }
                }
            }
        }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_identity_kernel() {
        let tape = Tape::new();
        let x = Tensor::from_fn([1, 2, 3, 3, 2], |i| i as f64 * 0.5 - 3.0);
        let mut w = Tensor::zeros([1, 1, 1, 2, 2]);
        w.data_mut()[0] = 1.0;
        w.data_mut()[3] = 1.0;
        let xv = tape.constant(x.clone());
        let y = conv3d(&xv, &tape.constant(w), None, [1; 3], [0; 3]).unwrap();
        assert_eq!(y.to_tensor(), x);
    }

    #[test]
    fn conv_zero_input_gives_bias() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 3, 4, 4, 2]));
        let w = tape.constant(Tensor::full([2, 3, 3, 2, 3], 0.7));
        let b = tape.constant(Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap());
        let y = conv3d(&x, &w, Some(&b), [1, 2, 2], [0, 1, 1]).unwrap();
        assert_eq!(y.shape(), vec![1, 2, 2, 2, 3]);
        for row in y.value().chunks_exact(3) {
            assert_eq!(row, &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn conv_rejects_empty_output() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 2, 2, 2, 1]));
        let w = tape.constant(Tensor::zeros([3, 1, 1, 1, 1]));
        assert!(matches!(
            conv3d(&x, &w, None, [1; 3], [0; 3]),
            Err(Error::EmptyOutput(_))
        ));
        let w = tape.constant(Tensor::zeros([1, 1, 1, 2, 1]));
        assert!(matches!(
            conv3d(&x, &w, None, [1; 3], [0; 3]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn avgpool_examples() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new([1, 1, 2, 2, 1], vec![1., 2., 3., 4.]).unwrap());
        assert_eq!(avgpool3d(&x, [1, 2, 2], [1, 2, 2]).unwrap().item(), 2.5);
        let c = tape.constant(Tensor::full([2, 4, 6, 6, 3], 1.75));
        let y = avgpool3d(&c, [2, 3, 3], [2, 2, 2]).unwrap();
        assert_eq!(y.shape(), vec![2, 2, 2, 2, 3]);
        assert!(y.value().iter().all(|&v| (v - 1.75).abs() < 1e-15));
        assert!(matches!(
            avgpool3d(&c, [5, 1, 1], [1, 1, 1]),
            Err(Error::EmptyOutput(_))
        ));
    }

    #[test]
    fn linear_examples() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([2, 3], |i| i as f64 - 2.0));
        let y = linear(&x, &tape.constant(Tensor::eye(3)), Some(&tape.constant(Tensor::zeros([3])))).unwrap();
        assert_eq!(y.to_tensor(), x.to_tensor());
        let b = Tensor::new([2], vec![1.5, -0.5]).unwrap();
        let y = linear(&x, &tape.constant(Tensor::zeros([3, 2])), Some(&tape.constant(b))).unwrap();
        assert_eq!(y.value().as_slice(), &[1.5, -0.5, 1.5, -0.5]);
        assert!(linear(&x, &tape.constant(Tensor::zeros([2, 2])), None).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let tape = Tape::new();
        let ones = tape.constant(Tensor::full([3], 1.0));
        let zeros = tape.constant(Tensor::zeros([3]));
        let x = tape.constant(Tensor::new([3], vec![1., 2., 3.]).unwrap());
        let y = layer_norm(&x, &ones, &zeros, LAYER_NORM_EPS).unwrap();
        // Closed form with var = 2/3 and the eps term.
        let s = (2.0f64 / 3.0 + LAYER_NORM_EPS).sqrt();
        let expect = [-1.0 / s, 0.0, 1.0 / s];
        for (a, b) in y.value().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((expect[2] - 1.5f64.sqrt()).abs() < 1e-4);
        let c = tape.constant(Tensor::full([3], 4.2));
        assert!(layer_norm(&c, &ones, &zeros, LAYER_NORM_EPS)
            .unwrap()
            .value()
            .iter()
            .all(|v| v.abs() < 1e-9));
        let again = layer_norm(&y, &ones, &zeros, LAYER_NORM_EPS).unwrap();
        assert!(again.to_tensor().max_abs_diff(&y.to_tensor()) < 1e-5);
    }

    #[test]
    fn dropout_modes() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = tape.constant(Tensor::full([10], 2.0));
        assert_eq!(dropout(&x, 0.0, true, &mut rng).unwrap().id(), x.id());
        assert_eq!(dropout(&x, 0.9, false, &mut rng).unwrap().id(), x.id());
        assert!(matches!(
            dropout(&x, 1.0, true, &mut rng),
            Err(Error::InvalidProbability(_))
        ));
        assert!(dropout(&x, -0.1, false, &mut rng).is_err());
    }

    #[test]
    fn dropout_statistics() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let x = tape.constant(Tensor::full([n], 1.0));
        let y = dropout(&x, 0.5, true, &mut rng).unwrap().value();
        let survivors = y.iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
        assert!((survivors - 0.5).abs() < 0.01, "{survivors}");
        let mean = y.iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
    }

    #[test]
    fn cross_entropy_examples() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::zeros([3, 2]));
        let l = cross_entropy_logits(&z, &[0, 1, 1]).unwrap().item();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        let z = tape.constant(Tensor::new([1, 3], vec![0.0, 20.0, 0.0]).unwrap());
        let l = cross_entropy_logits(&z, &[1]).unwrap().item();
        assert!(l < 1e-8 && l >= 0.0);
        assert!(matches!(
            cross_entropy_logits(&z, &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }
}
