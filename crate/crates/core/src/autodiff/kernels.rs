//! Forward kernels and their adjoints. All feature maps are `[C, H, W]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major `c = op(a) * op(b) + beta * c` where `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths were checked against the dimensions above and the
    // strides address only elements inside them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn chw(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::shape(op, format!("expected [C, H, W], got {s:?}"))),
    }
}

fn im2col3(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let p = h * w;
    let mut cols = vec![0.0; c * 9 * p];
    for ci in 0..c {
        let plane = &x[ci * p..(ci + 1) * p];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * p..][..p];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

fn col2im3(cols: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let p = h * w;
    let mut x = vec![0.0; c * p];
    for ci in 0..c {
        let plane = &mut x[ci * p..(ci + 1) * p];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * p..][..p];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..][..w];
                    let src = &row[y * w..][..w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
    x
}

fn check_conv(
    op: &'static str,
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    ksize: usize,
) -> Result<(usize, usize, usize, usize)> {
    let (cin, h, wd) = chw(op, x)?;
    let cout = w.shape()[0];
    let expected: Vec<usize> = if ksize == 1 {
        vec![cout, cin]
    } else {
        vec![cout, cin, 3, 3]
    };
    if w.shape() != expected.as_slice() {
        return Err(Error::shape(
            op,
            format!(
                "weight {:?} does not match input channels {cin} (expected {expected:?})",
                w.shape()
            ),
        ));
    }
    if b.shape() != [cout] {
        return Err(Error::shape(op, format!("bias {:?}, expected [{cout}]", b.shape())));
    }
    Ok((cin, cout, h, wd))
}

fn add_bias(out: &mut [f64], bias: &[f64], p: usize) {
    for (row, &bv) in out.chunks_mut(p).zip(bias) {
        row.iter_mut().for_each(|v| *v += bv);
    }
}

fn bias_grad(dy: &[f64], p: usize) -> Vec<f64> {
    dy.chunks(p).map(|r| r.iter().sum()).collect()
}

pub(crate) fn conv1x1(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (cin, cout, h, wd) = check_conv("conv2d_1x1", x, w, b, 1)?;
    let p = h * wd;
    let mut out = vec![0.0; cout * p];
    gemm(cout, cin, p, w.data(), false, x.data(), false, 0.0, &mut out);
    add_bias(&mut out, b.data(), p);
    Tensor::new(vec![cout, h, wd], out)
}

pub(crate) fn conv1x1_vjp(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (cin, h, wd) = chw("conv2d_1x1", x).expect("validated in forward");
    let cout = w.shape()[0];
    let p = h * wd;
    let mut dx = vec![0.0; cin * p];
    gemm(cin, cout, p, w.data(), true, dy.data(), false, 0.0, &mut dx);
    let mut dw = vec![0.0; cout * cin];
    gemm(cout, p, cin, dy.data(), false, x.data(), true, 0.0, &mut dw);
    let db = bias_grad(dy.data(), p);
    (
        Tensor::new(x.shape().to_vec(), dx).unwrap(),
        Tensor::new(w.shape().to_vec(), dw).unwrap(),
        Tensor::new(vec![cout], db).unwrap(),
    )
}

pub(crate) fn conv3x3(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (cin, cout, h, wd) = check_conv("conv2d_3x3", x, w, b, 3)?;
    let p = h * wd;
    let cols = im2col3(x.data(), cin, h, wd);
    let mut out = vec![0.0; cout * p];
    gemm(cout, cin * 9, p, w.data(), false, &cols, false, 0.0, &mut out);
    add_bias(&mut out, b.data(), p);
    Tensor::new(vec![cout, h, wd], out)
}

pub(crate) fn conv3x3_vjp(x: &Tensor, w: &Tensor, dy: &Tensor, need_x: bool) -> (Option<Tensor>, Tensor, Tensor) {
    let (cin, h, wd) = chw("conv2d_3x3", x).expect("validated in forward");
    let cout = w.shape()[0];
    let p = h * wd;
    let cols = im2col3(x.data(), cin, h, wd);
    let mut dw = vec![0.0; cout * cin * 9];
    gemm(cout, p, cin * 9, dy.data(), false, &cols, true, 0.0, &mut dw);
    let dx = need_x.then(|| {
        let mut dcols = cols;
        gemm(cin * 9, cout, p, w.data(), true, dy.data(), false, 0.0, &mut dcols);
        Tensor::new(x.shape().to_vec(), col2im3(&dcols, cin, h, wd)).unwrap()
    });
    let db = bias_grad(dy.data(), p);
    (
        dx,
        Tensor::new(w.shape().to_vec(), dw).unwrap(),
        Tensor::new(vec![cout], db).unwrap(),
    )
}

pub(crate) fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let &[nin] = x.shape() else {
        return Err(Error::shape(
            "linear",
            format!("expected vector input, got {:?}", x.shape()),
        ));
    };
    let nout = w.shape()[0];
    if w.shape() != [nout, nin] || b.shape() != [nout] {
        return Err(Error::shape(
            "linear",
            format!("input [{nin}] with weight {:?} and bias {:?}", w.shape(), b.shape()),
        ));
    }
    let mut out = b.data().to_vec();
    gemm(nout, nin, 1, w.data(), false, x.data(), false, 1.0, &mut out);
    Tensor::new(vec![nout], out)
}

pub(crate) fn linear_vjp(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let nin = x.len();
    let nout = w.shape()[0];
    let mut dx = vec![0.0; nin];
    gemm(nin, nout, 1, w.data(), true, dy.data(), false, 0.0, &mut dx);
    let mut dw = vec![0.0; nout * nin];
    gemm(nout, 1, nin, dy.data(), false, x.data(), false, 0.0, &mut dw);
    (
        Tensor::new(vec![nin], dx).unwrap(),
        Tensor::new(vec![nout, nin], dw).unwrap(),
        dy.clone(),
    )
}

/// `(outer, n, inner)` split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn avg_pool_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::shape(
            "avg_pool_axis",
            format!("axis {axis} out of range for {:?}", x.shape()),
        ));
    }
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let mut out = vec![0.0; outer * inner];
    let xd = x.data();
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for j in 0..n {
            let src = &xd[(o * n + j) * inner..][..inner];
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
        dst.iter_mut().for_each(|d| *d /= n as f64);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = 1;
    Tensor::new(shape, out)
}

pub(crate) fn avg_pool_axis_vjp(x: &Tensor, axis: usize, dy: &Tensor) -> Tensor {
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let mut dx = vec![0.0; x.len()];
    let g = dy.data();
    for o in 0..outer {
        let src = &g[o * inner..(o + 1) * inner];
        for j in 0..n {
            let dst = &mut dx[(o * n + j) * inner..][..inner];
            dst.iter_mut().zip(src).for_each(|(d, s)| *d = s / n as f64);
        }
    }
    Tensor::new(x.shape().to_vec(), dx).unwrap()
}

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("rank differs: {a:?} vs {b:?}")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(op, format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = if shape[i] == 1 && out[i] != 1 { 0 } else { s };
        s *= shape[i];
    }
    strides
}

/// Visits every output position with the matching flat offsets into `a` and `b`.
fn for_each_broadcast(out: &[usize], a: &[usize], b: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let rank = out.len();
    let last = rank - 1;
    let n_last = out[last];
    let rows: usize = out[..last].iter().product();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    for _ in 0..rows {
        for j in 0..n_last {
            f(o, oa + j * sa[last], ob + j * sb[last]);
            o += 1;
        }
        // odometer over the leading axes
        let mut d = last;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * idx[d];
            ob -= sb[d] * idx[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn binary(op: &'static str, a: &Tensor, b: &Tensor, mul: bool) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return a.zip_map(b, |x, y| if mul { x * y } else { x + y });
    }
    let shape = broadcast_shape(op, a.shape(), b.shape())?;
    let mut out = vec![0.0; shape.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&shape, a.shape(), b.shape(), |o, ia, ib| {
        out[o] = if mul { ad[ia] * bd[ib] } else { ad[ia] + bd[ib] };
    });
    Tensor::new(shape, out)
}

/// Adjoints of broadcast add (`mul = false`) or multiply.
pub(crate) fn binary_vjp(a: &Tensor, b: &Tensor, dy: &Tensor, mul: bool, need: [bool; 2]) -> [Option<Tensor>; 2] {
    let g = dy.data();
    if a.shape() == b.shape() {
        let da = need[0].then(|| {
            if mul {
                dy.zip_map(b, |g, y| g * y).unwrap()
            } else {
                dy.clone()
            }
        });
        let db = need[1].then(|| {
            if mul {
                dy.zip_map(a, |g, x| g * x).unwrap()
            } else {
                dy.clone()
            }
        });
        return [da, db];
    }
    let mut da = vec![0.0; a.len()];
    let mut db = vec![0.0; b.len()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(dy.shape(), a.shape(), b.shape(), |o, ia, ib| {
        if mul {
            da[ia] += g[o] * bd[ib];
            db[ib] += g[o] * ad[ia];
        } else {
            da[ia] += g[o];
            db[ib] += g[o];
        }
    });
    [
        need[0].then(|| Tensor::new(a.shape().to_vec(), da).unwrap()),
        need[1].then(|| Tensor::new(b.shape().to_vec(), db).unwrap()),
    ]
}

pub(crate) fn concat0(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs.first().ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
    let tail = &first.shape()[1..];
    let mut channels = 0;
    let mut data = Vec::new();
    for x in xs {
        if x.rank() == 0 || &x.shape()[1..] != tail {
            return Err(Error::shape(
                "concat_channels",
                format!("trailing dims {:?} vs {:?}", &x.shape()[1..], tail),
            ));
        }
        channels += x.shape()[0];
        data.extend_from_slice(x.data());
    }
    let mut shape = vec![channels];
    shape.extend_from_slice(tail);
    Tensor::new(shape, data)
}

pub(crate) fn slice_axis(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= x.rank() || len == 0 || start + len > x.shape()[axis] {
        return Err(Error::shape(
            "slice_axis",
            format!("[{start}, {}) on axis {axis} of {:?}", start + len, x.shape()),
        ));
    }
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        out.extend_from_slice(&x.data()[(o * n + start) * inner..(o * n + start + len) * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::new(shape, out)
}

pub(crate) fn slice_axis_vjp(x: &Tensor, axis: usize, start: usize, dy: &Tensor) -> Tensor {
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let len = dy.shape()[axis];
    let mut dx = vec![0.0; x.len()];
    for o in 0..outer {
        dx[(o * n + start) * inner..(o * n + start + len) * inner]
            .copy_from_slice(&dy.data()[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::new(x.shape().to_vec(), dx).unwrap()
}

pub(crate) fn downsample2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = chw("downsample2", x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("downsample2", format!("odd spatial size {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![0.0; c * ho * wo];
    for ci in 0..c {
        for y in 0..ho {
            for xx in 0..wo {
                let base = ci * h * w + 2 * y * w + 2 * xx;
                out[(ci * ho + y) * wo + xx] = 0.25 * (xd[base] + xd[base + 1] + xd[base + w] + xd[base + w + 1]);
            }
        }
    }
    Tensor::new(vec![c, ho, wo], out)
}

pub(crate) fn downsample2_vjp(x: &Tensor, dy: &Tensor) -> Tensor {
    let (c, h, w) = chw("downsample2", x).unwrap();
    let (ho, wo) = (h / 2, w / 2);
    let g = dy.data();
    let mut dx = vec![0.0; x.len()];
    for ci in 0..c {
        for y in 0..ho {
            for xx in 0..wo {
                let v = 0.25 * g[(ci * ho + y) * wo + xx];
                let base = ci * h * w + 2 * y * w + 2 * xx;
                dx[base] = v;
                dx[base + 1] = v;
                dx[base + w] = v;
                dx[base + w + 1] = v;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), dx).unwrap()
}

pub(crate) fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = chw("upsample2", x)?;
    let (ho, wo) = (2 * h, 2 * w);
    let xd = x.data();
    let mut out = vec![0.0; c * ho * wo];
    for ci in 0..c {
        for y in 0..ho {
            for xx in 0..wo {
                out[(ci * ho + y) * wo + xx] = xd[(ci * h + y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new(vec![c, ho, wo], out)
}

pub(crate) fn upsample2_vjp(x: &Tensor, dy: &Tensor) -> Tensor {
    let (c, h, w) = chw("upsample2", x).unwrap();
    let (ho, wo) = (2 * h, 2 * w);
    let g = dy.data();
    let mut dx = vec![0.0; x.len()];
    for ci in 0..c {
        for y in 0..ho {
            for xx in 0..wo {
                dx[(ci * h + y / 2) * w + xx / 2] += g[(ci * ho + y) * wo + xx];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), dx).unwrap()
}

pub const GROUP_NORM_EPS: f64 = 1e-6;

fn group_stats(x: &[f64], groups: usize) -> Vec<(f64, f64)> {
    let n = x.len() / groups;
    x.chunks(n)
        .map(|g| {
            let mean = g.iter().sum::<f64>() / n as f64;
            let var = g.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            (mean, 1.0 / (var + GROUP_NORM_EPS).sqrt())
        })
        .collect()
}

fn check_group_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize) -> Result<usize> {
    let (c, _, _) = chw("group_norm", x)?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::shape(
            "group_norm",
            format!("{c} channels not divisible into {groups} groups"),
        ));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "group_norm",
            format!("affine {:?}/{:?} for {c} channels", gamma.shape(), beta.shape()),
        ));
    }
    Ok(c)
}

pub(crate) fn group_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize) -> Result<Tensor> {
    let c = check_group_norm(x, gamma, beta, groups)?;
    let p = x.len() / c;
    let per_group = c / groups;
    let stats = group_stats(x.data(), groups);
    let mut out = vec![0.0; x.len()];
    for ci in 0..c {
        let (mean, rstd) = stats[ci / per_group];
        let (g, b) = (gamma.data()[ci], beta.data()[ci]);
        let src = &x.data()[ci * p..(ci + 1) * p];
        for (o, &v) in out[ci * p..(ci + 1) * p].iter_mut().zip(src) {
            *o = (v - mean) * rstd * g + b;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn group_norm_vjp(x: &Tensor, gamma: &Tensor, groups: usize, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let c = x.shape()[0];
    let p = x.len() / c;
    let per_group = c / groups;
    let n = (per_group * p) as f64;
    let stats = group_stats(x.data(), groups);
    let (xd, g) = (x.data(), dy.data());
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for gi in 0..groups {
        let (mean, rstd) = stats[gi];
        let range = gi * per_group * p..(gi + 1) * per_group * p;
        // sums of dxhat and dxhat * xhat over the group
        let (mut s1, mut s2) = (0.0, 0.0);
        for i in range.clone() {
            let ci = i / p;
            let xhat = (xd[i] - mean) * rstd;
            let dxhat = g[i] * gamma.data()[ci];
            s1 += dxhat;
            s2 += dxhat * xhat;
            dgamma[ci] += g[i] * xhat;
            dbeta[ci] += g[i];
        }
        for i in range {
            let ci = i / p;
            let xhat = (xd[i] - mean) * rstd;
            let dxhat = g[i] * gamma.data()[ci];
            dx[i] = rstd / n * (n * dxhat - s1 - xhat * s2);
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).unwrap(),
        Tensor::new(vec![c], dgamma).unwrap(),
        Tensor::new(vec![c], dbeta).unwrap(),
    )
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
