//! Forward and backward kernels on flat row-major buffers.
//!
//! Batched image tensors are `[N, C, H, W]`; feature tensors are `[N, F]`.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover the strided extents asserted above.
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

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < self.kernel || wp < self.kernel || self.stride == 0 {
            return Err(Error::Shape(format!(
                "kernel {} (stride {}, padding {}) does not fit a {}x{} input",
                self.kernel, self.stride, self.padding, h, w
            )));
        }
        Ok((
            (hp - self.kernel) / self.stride + 1,
            (wp - self.kernel) / self.stride + 1,
        ))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, g: ConvGeometry, ho: usize, wo: usize, col: &mut [f64]) {
    let k = g.kernel;
    let p = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut col[((ci * k + ki) * k + kj) * p..][..p];
                for oh in 0..ho {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    let out = &mut row[oh * wo..(oh + 1) * wo];
                    if ih < 0 || ih >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                    for (ow, o) in out.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        *o = if iw < 0 || iw >= w as isize {
                            0.0
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], c: usize, h: usize, w: usize, g: ConvGeometry, ho: usize, wo: usize, dx: &mut [f64]) {
    let k = g.kernel;
    let p = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &col[((ci * k + ki) * k + kj) * p..][..p];
                for oh in 0..ho {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                    for ow in 0..wo {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        if iw >= 0 && iw < w as isize {
                            dst[iw as usize] += row[oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
}

fn conv_dims(x: &Tensor, weight: &Tensor, g: ConvGeometry) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    let o = match weight.shape()[..] {
        [o, wc, kh, kw] if wc == c && kh == g.kernel && kw == g.kernel => o,
        _ => {
            return Err(Error::Shape(format!(
                "conv weight {:?} incompatible with input {:?} and kernel {}",
                weight.shape(),
                x.shape(),
                g.kernel
            )))
        }
    };
    let (ho, wo) = g.output_hw(h, w)?;
    Ok((n, c, h, w, o, ho, wo))
}

pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, g: ConvGeometry) -> Result<Tensor> {
    let (n, c, h, w, o, ho, wo) = conv_dims(x, weight, g)?;
    bias.expect_shape(&[o])?;
    let ckk = c * g.kernel * g.kernel;
    let p = ho * wo;
    let mut out = vec![0.0; n * o * p];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; ckk * p] };
    for ni in 0..n {
        let xs = &x.data()[ni * c * h * w..(ni + 1) * c * h * w];
        let ys = &mut out[ni * o * p..(ni + 1) * o * p];
        for (oi, row) in ys.chunks_mut(p).enumerate() {
            row.fill(bias.data()[oi]);
        }
        let cols: &[f64] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, c, h, w, g, ho, wo, &mut col);
            &col
        };
        gemm(o, ckk, p, weight.data(), false, cols, false, ys, 1.0);
    }
    Tensor::new(vec![n, o, ho, wo], out)
}

/// Returns `(dx, dweight, dbias)`.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
    g: ConvGeometry,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, h, w, o, ho, wo) = conv_dims(x, weight, g)?;
    dy.expect_shape(&[n, o, ho, wo])?;
    let ckk = c * g.kernel * g.kernel;
    let p = ho * wo;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; weight.len()];
    let mut db = vec![0.0; o];
    let mut col = vec![0.0; ckk * p];
    let mut dcol = vec![0.0; ckk * p];
    for ni in 0..n {
        let xs = &x.data()[ni * c * h * w..(ni + 1) * c * h * w];
        let dys = &dy.data()[ni * o * p..(ni + 1) * o * p];
        for (oi, row) in dys.chunks(p).enumerate() {
            db[oi] += row.iter().sum::<f64>();
        }
        let dxs = &mut dx[ni * c * h * w..(ni + 1) * c * h * w];
        if g.is_pointwise() {
            gemm(o, p, ckk, dys, false, xs, true, &mut dw, 1.0);
            gemm(ckk, o, p, weight.data(), true, dys, false, dxs, 0.0);
        } else {
            im2col(xs, c, h, w, g, ho, wo, &mut col);
            gemm(o, p, ckk, dys, false, &col, true, &mut dw, 1.0);
            gemm(ckk, o, p, weight.data(), true, dys, false, &mut dcol, 0.0);
            col2im(&dcol, c, h, w, g, ho, wo, dxs);
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(weight.shape().to_vec(), dw)?,
        Tensor::new(vec![o], db)?,
    ))
}

/// 2x2 max pooling with stride 2 (floor semantics). Returns the output and,
/// for every output element, the flat input index that produced it.
pub fn maxpool2(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    let (ho, wo) = (h / 2, w / 2);
    if ho == 0 || wo == 0 {
        return Err(Error::Shape(format!("maxpool2 needs at least 2x2 input, got {h}x{w}")));
    }
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    let d = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = base + 2 * oh * w + 2 * ow;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oh + di) * w + 2 * ow + dj;
                    if d[idx] > d[best] {
                        best = idx;
                    }
                }
                out.push(d[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, ho, wo], out)?, arg))
}

pub fn maxpool2_backward(input_shape: &[usize], argmax: &[usize], dy: &Tensor) -> Result<Tensor> {
    if argmax.len() != dy.len() {
        return Err(Error::Shape("maxpool2 gradient does not match cached output".into()));
    }
    let mut dx = Tensor::zeros(input_shape);
    let dxd = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        dxd[i] += g;
    }
    Ok(dx)
}

pub fn upsample_nearest2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * ho * wo];
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
        for oh in 0..ho {
            for ow in 0..wo {
                dst[oh * wo + ow] = src[(oh / 2) * w + ow / 2];
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

pub fn upsample_nearest2_backward(dy: &Tensor) -> Result<Tensor> {
    let (n, c, ho, wo) = dy.dims4()?;
    let (h, w) = (ho / 2, wo / 2);
    let mut dx = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let src = &dy.data()[plane * ho * wo..(plane + 1) * ho * wo];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for oh in 0..ho {
            for ow in 0..wo {
                dst[(oh / 2) * w + ow / 2] += src[oh * wo + ow];
            }
        }
    }
    Tensor::new(vec![n, c, h, w], dx)
}

/// `y = x W^T + b` for `x: [N, in]`, `W: [out, in]`.
pub fn dense(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, fin) = x.dims2()?;
    let (fout, win) = weight.dims2()?;
    if win != fin {
        return Err(Error::Shape(format!(
            "dense weight {:?} incompatible with input {:?}",
            weight.shape(),
            x.shape()
        )));
    }
    bias.expect_shape(&[fout])?;
    let mut out: Vec<f64> = (0..n).flat_map(|_| bias.data().iter().copied()).collect();
    gemm(n, fin, fout, x.data(), false, weight.data(), true, &mut out, 1.0);
    Tensor::new(vec![n, fout], out)
}

pub fn dense_backward(x: &Tensor, weight: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, fin) = x.dims2()?;
    let (fout, _) = weight.dims2()?;
    dy.expect_shape(&[n, fout])?;
    let mut dx = vec![0.0; n * fin];
    let mut dw = vec![0.0; fout * fin];
    gemm(n, fout, fin, dy.data(), false, weight.data(), false, &mut dx, 0.0);
    gemm(fout, n, fin, dy.data(), true, x.data(), false, &mut dw, 0.0);
    let mut db = vec![0.0; fout];
    for row in dy.data().chunks(fout) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    Ok((
        Tensor::new(vec![n, fin], dx)?,
        Tensor::new(vec![fout, fin], dw)?,
        Tensor::new(vec![fout], db)?,
    ))
}

pub fn embedding(table: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let (k, d) = table.dims2()?;
    let mut out = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        if i >= k {
            return Err(Error::Shape(format!("embedding index {i} outside table of {k} rows")));
        }
        out.extend_from_slice(&table.data()[i * d..(i + 1) * d]);
    }
    Tensor::new(vec![indices.len(), d], out)
}

pub fn embedding_backward(table_shape: &[usize], indices: &[usize], dy: &Tensor) -> Result<Tensor> {
    let d = table_shape[1];
    dy.expect_shape(&[indices.len(), d])?;
    let mut dt = Tensor::zeros(table_shape);
    let dtd = dt.data_mut();
    for (row, &i) in dy.data().chunks(d).zip(indices) {
        for (a, g) in dtd[i * d..(i + 1) * d].iter_mut().zip(row) {
            *a += g;
        }
    }
    Ok(dt)
}

/// `(N, C, S)`: batch, channel and per-channel spatial extent of a `[N, C]`
/// or `[N, C, H, W]` tensor.
pub fn channel_layout(x: &Tensor) -> Result<(usize, usize, usize)> {
    match x.shape()[..] {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(Error::Shape(format!(
            "expected a [N, C] or [N, C, H, W] tensor, got {:?}",
            x.shape()
        ))),
    }
}

/// Per-channel mean and biased variance over batch and spatial positions.
pub fn channel_moments(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, c, s) = channel_layout(x)?;
    let count = (n * s) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    let d = x.data();
    for ci in 0..c {
        let mut acc = 0.0;
        for ni in 0..n {
            acc += d[(ni * c + ci) * s..][..s].iter().sum::<f64>();
        }
        mean[ci] = acc / count;
        let mut acc = 0.0;
        for ni in 0..n {
            acc += d[(ni * c + ci) * s..][..s]
                .iter()
                .map(|v| (v - mean[ci]).powi(2))
                .sum::<f64>();
        }
        var[ci] = acc / count;
    }
    Ok((mean, var))
}

/// Normalizes with the given per-channel statistics and applies the affine
/// transform. Returns `(y, x_hat, inv_std)`.
pub fn batchnorm_apply(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let (n, c, s) = channel_layout(x)?;
    gamma.expect_shape(&[c])?;
    beta.expect_shape(&[c])?;
    if mean.len() != c || var.len() != c {
        return Err(Error::Shape(format!("batch-norm statistics do not cover {c} channels")));
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * s;
            for j in off..off + s {
                let h = (x.data()[j] - mean[ci]) * inv_std[ci];
                xhat[j] = h;
                y[j] = gamma.data()[ci] * h + beta.data()[ci];
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), y)?,
        Tensor::new(x.shape().to_vec(), xhat)?,
        inv_std,
    ))
}

/// Backward through batch-norm. When `batch_stats` is false the statistics
/// were constants (running averages) and only the affine scale reaches `dx`.
pub fn batchnorm_backward(
    xhat: &Tensor,
    gamma: &Tensor,
    inv_std: &[f64],
    dy: &Tensor,
    batch_stats: bool,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, s) = channel_layout(xhat)?;
    dy.expect_shape(xhat.shape())?;
    let count = (n * s) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * s;
            for j in off..off + s {
                dgamma[ci] += dy.data()[j] * xhat.data()[j];
                dbeta[ci] += dy.data()[j];
            }
        }
    }
    let mut dx = vec![0.0; xhat.len()];
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * s;
            let g = gamma.data()[ci] * inv_std[ci];
            for j in off..off + s {
                dx[j] = if batch_stats {
                    g * (dy.data()[j] - dbeta[ci] / count - xhat.data()[j] * dgamma[ci] / count)
                } else {
                    g * dy.data()[j]
                };
            }
        }
    }
    Ok((
        Tensor::new(xhat.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}

/// Inverted-dropout mask: each element is `0` with probability `p`, else
/// `1 / (1 - p)`. With one stream the whole batch draws from it in order;
/// with `N` streams, item `i` draws from stream `i`.
pub fn dropout_mask(shape: &[usize], p: f64, rngs: &mut [Rng]) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
    }
    let total: usize = shape.iter().product();
    if p == 0.0 {
        return Ok(vec![1.0; total]);
    }
    let n = shape.first().copied().unwrap_or(1).max(1);
    let per_item = total / n;
    let scale = 1.0 / (1.0 - p);
    let mut mask = Vec::with_capacity(total);
    match rngs.len() {
        0 => return Err(Error::Config("dropout needs a random stream".into())),
        1 => {
            let rng = &mut rngs[0];
            mask.extend((0..total).map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale }));
        }
        k if k == n => {
            for rng in rngs.iter_mut() {
                mask.extend((0..per_item).map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale }));
            }
        }
        k => {
            return Err(Error::Shape(format!(
                "{k} random streams for a batch of {n}"
            )))
        }
    }
    Ok(mask)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Concatenates two `[N, C, ...]` tensors along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (na, ca, sa) = channel_layout(a)?;
    let (nb, cb, sb) = channel_layout(b)?;
    if na != nb || sa != sb || a.ndim() != b.ndim() || a.shape()[2..] != b.shape()[2..] {
        return Err(Error::Shape(format!(
            "cannot concatenate {:?} and {:?} along channels",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Vec::with_capacity(a.len() + b.len());
    for ni in 0..na {
        out.extend_from_slice(&a.data()[ni * ca * sa..(ni + 1) * ca * sa]);
        out.extend_from_slice(&b.data()[ni * cb * sb..(ni + 1) * cb * sb]);
    }
    let mut shape = a.shape().to_vec();
    shape[1] = ca + cb;
    Tensor::new(shape, out)
}

pub fn concat_channels_backward(dy: &Tensor, ca: usize) -> Result<(Tensor, Tensor)> {
    let (n, c, s) = channel_layout(dy)?;
    let cb = c - ca;
    let mut da = Vec::with_capacity(n * ca * s);
    let mut db = Vec::with_capacity(n * cb * s);
    for ni in 0..n {
        let item = &dy.data()[ni * c * s..(ni + 1) * c * s];
        da.extend_from_slice(&item[..ca * s]);
        db.extend_from_slice(&item[ca * s..]);
    }
    let mut sa = dy.shape().to_vec();
    sa[1] = ca;
    let mut sb = dy.shape().to_vec();
    sb[1] = cb;
    Ok((Tensor::new(sa, da)?, Tensor::new(sb, db)?))
}

/// Broadcasts `[N, C]` to `[N, C, H, W]`.
pub fn tile_spatial(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, c) = x.dims2()?;
    let mut out = Vec::with_capacity(n * c * h * w);
    for &v in x.data() {
        out.extend(std::iter::repeat(v).take(h * w));
    }
    Tensor::new(vec![n, c, h, w], out)
}

pub fn tile_spatial_backward(dy: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = dy.dims4()?;
    let out = dy.data().chunks(h * w).map(|p| p.iter().sum()).collect();
    Tensor::new(vec![n, c], out)
}
