//! Differentiable tensor ops on [`Var`].
//!
//! Broadcasting is limited to scalar operands; batched matmul requires the
//! leading dimensions to match exactly.

use std::ops::Range;

use crate::error::{shape_err, Error, Result};
use crate::kernels::{gemm, permute};
use crate::tape::Var;

fn check_axis(axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(Error::AxisOutOfRange { axis, rank })
    } else {
        Ok(())
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) sizes.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Row-wise softmax with max subtraction.
pub(crate) fn softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = (xi - max).exp();
            sum += *oi;
        }
        o.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

impl<'t> Var<'t> {
    fn binary(
        &self,
        other: &Var<'t>,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        self.same_tape(other)?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa != sb {
            return Err(shape_err!("{name}: {:?} vs {:?}", sa, sb));
        }
        let (a, b) = (self.value(), other.value());
        Ok((sa, a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (shape, data) = self.binary(other, "add", |a, b| a + b)?;
        let (ia, ib) = (self.id(), other.id());
        Ok(self.tape().record(shape, data, &[*self, *other], move |g, s| {
            s.add(ia, g);
            s.add(ib, g);
        }))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (shape, data) = self.binary(other, "sub", |a, b| a - b)?;
        let (ia, ib) = (self.id(), other.id());
        Ok(self.tape().record(shape, data, &[*self, *other], move |g, s| {
            s.add(ia, g);
            if let Some(slot) = s.slot(ib) {
                slot.iter_mut().zip(g).for_each(|(d, v)| *d -= v);
            }
        }))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (shape, data) = self.binary(other, "mul", |a, b| a * b)?;
        let (ia, ib) = (self.id(), other.id());
        let (va, vb) = (self.value(), other.value());
        Ok(self.tape().record(shape, data, &[*self, *other], move |g, s| {
            if let Some(slot) = s.slot(ia) {
                for ((d, gi), bi) in slot.iter_mut().zip(g).zip(vb.iter()) {
                    *d += gi * bi;
                }
            }
            if let Some(slot) = s.slot(ib) {
                for ((d, gi), ai) in slot.iter_mut().zip(g).zip(va.iter()) {
                    *d += gi * ai;
                }
            }
        }))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let data = self.value().iter().map(|v| v * c).collect();
        let ia = self.id();
        self.tape().record(self.shape(), data, &[*self], move |g, s| {
            if let Some(slot) = s.slot(ia) {
                slot.iter_mut().zip(g).for_each(|(d, v)| *d += c * v);
            }
        })
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let data = self.value().iter().map(|v| v + c).collect();
        let ia = self.id();
        self.tape()
            .record(self.shape(), data, &[*self], move |g, s| s.add(ia, g))
    }

    /// Rectifier with subgradient 0 at exactly 0.
    pub fn relu(&self) -> Var<'t> {
        let x = self.value();
        let data = x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let ia = self.id();
        self.tape().record(self.shape(), data, &[*self], move |g, s| {
            if let Some(slot) = s.slot(ia) {
                for ((d, gi), xi) in slot.iter_mut().zip(g).zip(x.iter()) {
                    if *xi > 0.0 {
                        *d += gi;
                    }
                }
            }
        })
    }

    /// Batched matrix product `[.., n, k] × [.., k, p]` with identical batch
    /// dimensions.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sa.len() != sb.len() {
            return Err(shape_err!("matmul: ranks of {:?} and {:?}", sa, sb));
        }
        let r = sa.len();
        let (n, k, k2, p) = (sa[r - 2], sa[r - 1], sb[r - 2], sb[r - 1]);
        if k != k2 || sa[..r - 2] != sb[..r - 2] {
            return Err(shape_err!("matmul: {:?} x {:?}", sa, sb));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let (a, b) = (self.value(), other.value());
        let mut out = vec![0.0; batch * n * p];
        for bi in 0..batch {
            gemm(
                n,
                k,
                p,
                &a[bi * n * k..(bi + 1) * n * k],
                false,
                &b[bi * k * p..(bi + 1) * k * p],
                false,
                &mut out[bi * n * p..(bi + 1) * n * p],
                false,
            );
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([n, p]);
        let (ia, ib) = (self.id(), other.id());
        Ok(self.tape().record(shape, out, &[*self, *other], move |g, s| {
            if let Some(slot) = s.slot(ia) {
                // dA = dC · Bᵀ
                for bi in 0..batch {
                    gemm(
                        n,
                        p,
                        k,
                        &g[bi * n * p..(bi + 1) * n * p],
                        false,
                        &b[bi * k * p..(bi + 1) * k * p],
                        true,
                        &mut slot[bi * n * k..(bi + 1) * n * k],
                        true,
                    );
                }
            }
            if let Some(slot) = s.slot(ib) {
                // dB = Aᵀ · dC
                for bi in 0..batch {
                    gemm(
                        k,
                        n,
                        p,
                        &a[bi * n * k..(bi + 1) * n * k],
                        true,
                        &g[bi * n * p..(bi + 1) * n * p],
                        false,
                        &mut slot[bi * k * p..(bi + 1) * k * p],
                        true,
                    );
                }
            }
        }))
    }

    /// Softmax over the last axis.
    pub fn softmax_lastdim(&self) -> Result<Var<'t>> {
        let shape = self.shape();
        let n = *shape.last().ok_or(Error::EmptyAxis)?;
        if n == 0 {
            return Err(Error::EmptyAxis);
        }
        let y = std::rc::Rc::new(softmax_rows(&self.value(), n));
        let yb = y.clone();
        let ia = self.id();
        Ok(self
            .tape()
            .record(shape, y.as_ref().clone(), &[*self], move |g, s| {
                if let Some(slot) = s.slot(ia) {
                    for ((yr, gr), dr) in yb
                        .chunks_exact(n)
                        .zip(g.chunks_exact(n))
                        .zip(slot.chunks_exact_mut(n))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, yi), gi) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += yi * (gi - dot);
                        }
                    }
                }
            }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(shape_err!("reshape {:?} -> {:?}", self.shape(), shape));
        }
        let ia = self.id();
        Ok(self.tape().record(
            shape.to_vec(),
            self.value().as_ref().clone(),
            &[*self],
            move |g, s| s.add(ia, g),
        ))
    }

    /// Collapses axes `from..` into one.
    pub fn flatten_from(&self, from: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if from > shape.len() {
            return Err(Error::AxisOutOfRange {
                axis: from,
                rank: shape.len(),
            });
        }
        let mut out = shape[..from].to_vec();
        out.push(shape[from..].iter().product());
        self.reshape(&out)
    }

    pub fn flatten(&self) -> Result<Var<'t>> {
        self.flatten_from(0)
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn transpose(&self, perm: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::InvalidPermutation(perm.to_vec(), rank));
        }
        let (out_shape, data) = permute(&self.value(), &shape, perm);
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let oshape = out_shape.clone();
        let ia = self.id();
        Ok(self
            .tape()
            .record(out_shape, data, &[*self], move |g, s| {
                if s.wants(ia) {
                    let (_, back) = permute(g, &oshape, &inverse);
                    s.add(ia, &back);
                }
            }))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Var<'t>> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::AxisOutOfRange { axis: 1, rank: r });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.transpose(&perm)
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let base = first.shape();
        check_axis(axis, base.len())?;
        let mut total = 0;
        for p in parts {
            first.same_tape(p)?;
            let s = p.shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(shape_err!("concat: {:?} vs {:?} on axis {axis}", s, base));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&base, axis);
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let row = total * inner;
        let mut out = vec![0.0; outer * row];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let v = p.value();
            for o in 0..outer {
                out[o * row + offset..o * row + offset + w].copy_from_slice(&v[o * w..(o + 1) * w]);
            }
            offset += w;
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id()).collect();
        Ok(first.tape().record(shape, out, parts, move |g, s| {
            let mut offset = 0;
            for (&id, &w) in ids.iter().zip(&widths) {
                if let Some(slot) = s.slot(id) {
                    for o in 0..outer {
                        slot[o * w..(o + 1) * w]
                            .iter_mut()
                            .zip(&g[o * row + offset..o * row + offset + w])
                            .for_each(|(d, v)| *d += v);
                    }
                }
                offset += w;
            }
        }))
    }

    pub fn slice(&self, axis: usize, range: Range<usize>) -> Result<Var<'t>> {
        let shape = self.shape();
        check_axis(axis, shape.len())?;
        if range.start >= range.end || range.end > shape[axis] {
            return Err(shape_err!(
                "slice {:?} of axis {axis} with extent {}",
                range,
                shape[axis]
            ));
        }
        let (outer, extent, inner) = split_at_axis(&shape, axis);
        let w = (range.end - range.start) * inner;
        let start = range.start * inner;
        let row = extent * inner;
        let v = self.value();
        let mut out = Vec::with_capacity(outer * w);
        for o in 0..outer {
            out.extend_from_slice(&v[o * row + start..o * row + start + w]);
        }
        let mut oshape = shape.clone();
        oshape[axis] = range.end - range.start;
        let ia = self.id();
        Ok(self.tape().record(oshape, out, &[*self], move |g, s| {
            if let Some(slot) = s.slot(ia) {
                for o in 0..outer {
                    slot[o * row + start..o * row + start + w]
                        .iter_mut()
                        .zip(&g[o * w..(o + 1) * w])
                        .for_each(|(d, v)| *d += v);
                }
            }
        }))
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean(&self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        check_axis(axis, shape.len())?;
        let (outer, extent, inner) = split_at_axis(&shape, axis);
        let v = self.value();
        let inv = 1.0 / extent as f64;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for e in 0..extent {
                let src = &v[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, x)| *d += x);
            }
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let mut oshape = shape.clone();
        oshape.remove(axis);
        let ia = self.id();
        Ok(self.tape().record(oshape, out, &[*self], move |g, s| {
            if let Some(slot) = s.slot(ia) {
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for e in 0..extent {
                        slot[(o * extent + e) * inner..(o * extent + e + 1) * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, x)| *d += x * inv);
                    }
                }
            }
        }))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Var<'t> {
        let total = self.value().iter().sum();
        let ia = self.id();
        let n = self.numel();
        self.tape().record(Vec::new(), vec![total], &[*self], move |g, s| {
            if let Some(slot) = s.slot(ia) {
                debug_assert_eq!(slot.len(), n);
                slot.iter_mut().for_each(|d| *d += g[0]);
            }
        })
    }

    pub fn mean_all(&self) -> Var<'t> {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }
}

#[cfg(test)]
mod tests {
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let tape = Tape::new();
        let i = tape.constant(Tensor::eye(2));
        let b = tape.constant(t(&[2, 2], &[3., 4., 5., 6.]));
        assert_eq!(i.matmul(&b).unwrap().value().as_slice(), &[3., 4., 5., 6.]);
        let x = tape.constant(t(&[1, 2], &[1., 2.]));
        let y = tape.constant(t(&[2, 1], &[3., 4.]));
        assert_eq!(x.matmul(&y).unwrap().item(), 11.0);
    }

    #[test]
    fn matmul_shape_errors() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        assert!(a.matmul(&b).is_err());
        let a = tape.constant(Tensor::zeros([2, 2, 3]));
        let b = tape.constant(Tensor::zeros([3, 3, 1]));
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros([3]));
        for v in x.softmax_lastdim().unwrap().value().iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        for c in [-5.0, 0.0, 17.5] {
            let x = tape.constant(t(&[2], &[c, c + 2f64.ln()]));
            let y = x.softmax_lastdim().unwrap().value();
            assert!((y[0] - 1.0 / 3.0).abs() < 1e-12 && (y[1] - 2.0 / 3.0).abs() < 1e-12);
        }
        let x = tape.constant(t(&[2], &[1000.0, 1001.0]));
        let y = x.softmax_lastdim().unwrap().value();
        let e = std::f64::consts::E;
        assert!((y[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((y[1] - e / (1.0 + e)).abs() < 1e-15);
        let empty = tape.constant(Tensor::zeros([2, 0]));
        assert!(matches!(
            empty.softmax_lastdim(),
            Err(crate::Error::EmptyAxis)
        ));
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1., 0., 2.]));
        assert_eq!(x.relu().value().as_slice(), &[0., 0., 2.]);
        let z = tape.constant(Tensor::zeros([3]));
        assert_eq!(x.add(&z).unwrap().value().as_slice(), &[-1., 0., 2.]);
        let a = tape.constant(t(&[2], &[2., 3.]));
        let b = tape.constant(t(&[2], &[4., 5.]));
        assert_eq!(a.mul(&b).unwrap().value().as_slice(), &[8., 15.]);
        assert!(a.add(&x).is_err());
    }

    #[test]
    fn shape_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let r = x.reshape(&[3, 2]).unwrap();
        assert_eq!(r.shape(), vec![3, 2]);
        assert_eq!(r.value().as_slice(), &[1., 2., 3., 4., 5., 6.]);
        let a = tape.constant(t(&[2, 1], &[1., 2.]));
        let b = tape.constant(t(&[2, 1], &[3., 4.]));
        let c = crate::Var::concat(&[a, b], 1).unwrap();
        assert_eq!(c.value().as_slice(), &[1., 3., 2., 4.]);
        let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        assert_eq!(m.mean(0).unwrap().value().as_slice(), &[2., 3.]);
        assert!(matches!(
            x.transpose(&[0, 0]),
            Err(crate::Error::InvalidPermutation(..))
        ));
        assert!(matches!(
            x.mean(2),
            Err(crate::Error::AxisOutOfRange { .. })
        ));
        let s = x.slice(1, 1..3).unwrap();
        assert_eq!(s.value().as_slice(), &[2., 3., 5., 6.]);
        assert_eq!(x.flatten().unwrap().shape(), vec![6]);
    }

    #[test]
    fn backward_square_and_fanout() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1., 2., 3.]), true);
        let loss = x.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2., 4., 6.]);

        // x feeds two matmul branches; gradients add.
        let tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[0.5, -1.0]), true);
        let w1 = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let w2 = tape.constant(t(&[2, 2], &[-1., 0., 2., 5.]));
        let l = x
            .matmul(&w1)
            .unwrap()
            .sum()
            .add(&x.matmul(&w2).unwrap().sum())
            .unwrap();
        l.backward().unwrap();
        // Row sums of w1 and w2: [3, 7] + [-1, 7].
        assert_eq!(x.grad().unwrap().data(), &[2., 14.]);
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([2]), true);
        assert!(matches!(x.backward(), Err(crate::Error::NotScalar(2))));
        let other = Tape::new();
        let y = other.leaf(Tensor::scalar(1.0), true);
        assert!(matches!(tape.backward(y), Err(crate::Error::DetachedGraph)));
    }
}
