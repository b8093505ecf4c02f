//! Raw forward and backward kernels. The tape composes these; tests check them
//! against naive oracles.

use super::{Result, Scalar, Tensor, TensorError};

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn expect_rank<T: Scalar>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(TensorError::Rank {
            op,
            expected: rank,
            shape: t.shape().to_vec(),
        });
    }
    Ok(())
}

fn dims4<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<[usize; 4]> {
    expect_rank(op, t, 4)?;
    let s = t.shape();
    Ok([s[0], s[1], s[2], s[3]])
}

pub fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

pub fn permute<T: Scalar>(t: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let rank = t.rank();
    let mut seen = vec![false; rank];
    let valid = axes.len() == rank
        && axes.iter().all(|&a| a < rank && !std::mem::replace(&mut seen[a], true));
    if !valid {
        return Err(TensorError::InvalidPermutation {
            axes: axes.to_vec(),
            rank,
        });
    }
    let in_shape = t.shape();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());

    // Rows along the last output axis are contiguous when it is the input's last axis.
    let last = rank - 1;
    let row_len = out_shape[last];
    let contiguous = strides[last] == 1;
    let mut idx = vec![0usize; rank];
    let rows = src.len() / row_len;
    for _ in 0..rows {
        let base: usize = idx[..last]
            .iter()
            .zip(&strides[..last])
            .map(|(i, s)| i * s)
            .sum();
        if contiguous {
            out.extend_from_slice(&src[base..base + row_len]);
        } else {
            let s = strides[last];
            out.extend((0..row_len).map(|j| src[base + j * s]));
        }
        for d in (0..last).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis + 1..].iter().product(),
    )
}

pub fn concat<T: Scalar>(tensors: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = tensors.first().ok_or(TensorError::Invalid {
        op: "concat",
        msg: "no tensors given".into(),
    })?;
    let rank = first.rank();
    if axis >= rank {
        return Err(TensorError::Axis {
            op: "concat",
            axis,
            rank,
        });
    }
    for t in &tensors[1..] {
        let same = t.rank() == rank
            && (0..rank).all(|d| d == axis || t.shape()[d] == first.shape()[d]);
        if !same {
            return Err(mismatch("concat", first.shape(), t.shape()));
        }
    }
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = tensors.iter().map(|t| t.shape()[axis]).sum();
    let (outer, inner) = outer_inner(&out_shape, axis);
    let mut out = Vec::with_capacity(out_shape.iter().product());
    for o in 0..outer {
        for t in tensors {
            let chunk = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub fn split<T: Scalar>(t: &Tensor<T>, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let rank = t.rank();
    if axis >= rank {
        return Err(TensorError::Axis {
            op: "split",
            axis,
            rank,
        });
    }
    if sizes.iter().sum::<usize>() != t.shape()[axis] || sizes.contains(&0) {
        return Err(TensorError::Invalid {
            op: "split",
            msg: format!("sizes {sizes:?} do not partition axis of {}", t.shape()[axis]),
        });
    }
    let (outer, inner) = outer_inner(t.shape(), axis);
    let total = t.shape()[axis] * inner;
    let mut offset = 0;
    let mut pieces = Vec::with_capacity(sizes.len());
    for &s in sizes {
        let chunk = s * inner;
        let mut data = Vec::with_capacity(outer * chunk);
        for o in 0..outer {
            let start = o * total + offset;
            data.extend_from_slice(&t.data()[start..start + chunk]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = s;
        pieces.push(Tensor::from_parts(shape, data));
        offset += chunk;
    }
    Ok(pieces)
}

/// Batched product `op(A)·op(B)` where `op` optionally transposes the stored matrix.
///
/// Stored layouts: `A` is `m×k` (or `k×m` when `ta`), `B` is `k×n` (or `n×k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn bmm<T: Scalar>(
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<T> {
    let mut c = vec![T::zero(); batch * m * n];
    let (rsa, csa) = if ta { (1, m) } else { (k, 1) };
    let (rsb, csb) = if tb { (1, k) } else { (n, 1) };
    for i in 0..batch {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &a[i * m * k..(i + 1) * m * k],
            rsa,
            csa,
            &b[i * k * n..(i + 1) * k * n],
            rsb,
            csb,
            T::zero(),
            &mut c[i * m * n..(i + 1) * m * n],
            n,
            1,
        );
    }
    c
}

/// Returns `(batch, m, k, n)` for a batched product, validating shapes.
pub(crate) fn matmul_dims<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(usize, usize, usize, usize)> {
    let (ra, rb) = (a.rank(), b.rank());
    if ra < 2 || rb < 2 {
        return Err(mismatch("matmul", a.shape(), b.shape()));
    }
    if ra != rb || a.shape()[..ra - 2] != b.shape()[..rb - 2] {
        return Err(TensorError::Invalid {
            op: "matmul",
            msg: format!(
                "batch dimensions differ: {:?} vs {:?}",
                a.shape(),
                b.shape()
            ),
        });
    }
    let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let (k2, n) = (b.shape()[rb - 2], b.shape()[rb - 1]);
    if k != k2 {
        return Err(TensorError::Invalid {
            op: "matmul",
            msg: format!(
                "inner dimensions differ: {:?} vs {:?}",
                a.shape(),
                b.shape()
            ),
        });
    }
    let batch = a.shape()[..ra - 2].iter().product();
    Ok((batch, m, k, n))
}

pub fn matmul_batched<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, m, k, n) = matmul_dims(a, b)?;
    let mut shape = a.shape().to_vec();
    let r = shape.len();
    shape[r - 1] = n;
    let c = bmm(a.data(), false, b.data(), false, batch, m, k, n);
    Ok(Tensor::from_parts(shape, c))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    pub fn new<T: Scalar>(
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [batch, cin, h, w] = dims4("conv2d", input)?;
        let [cout, wcin, kh, kw] = dims4("conv2d", weight)?;
        if wcin != cin {
            return Err(mismatch("conv2d", input.shape(), weight.shape()));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(mismatch("conv2d bias", weight.shape(), b.shape()));
            }
        }
        if stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: "stride must be positive".into(),
            });
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("nonpositive output size for input {h}x{w}, kernel {kh}x{kw}"),
            });
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        Ok(Self {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            padding,
            ho,
            wo,
        })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    /// 1×1, stride 1, no padding: the input plane is already the column matrix.
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let p = self.p();
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ci * self.kh + ky) * self.kw + kx) * p;
                    let dst = &mut col[row..row + p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, out) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            *out = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], dx: &mut [T]) {
        let p = self.p();
        for ci in 0..self.cin {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ci * self.kh + ky) * self.kw + kx) * p;
                    let src = &col[row..row + p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let line = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < self.w as isize {
                                line[ix as usize] = line[ix as usize] + src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input, weight, bias, stride, padding)?;
    let (k, p) = (g.k(), g.p());
    let in_plane = g.cin * g.h * g.w;
    let mut out = vec![T::zero(); g.batch * g.cout * p];
    let mut col = if g.pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    for n in 0..g.batch {
        let x = &input.data()[n * in_plane..(n + 1) * in_plane];
        let cols: &[T] = if g.pointwise() {
            x
        } else {
            g.im2col(x, &mut col);
            &col
        };
        let y = &mut out[n * g.cout * p..(n + 1) * g.cout * p];
        if let Some(b) = bias {
            for (co, chunk) in y.chunks_mut(p).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            g.cout,
            k,
            p,
            T::one(),
            weight.data(),
            k,
            1,
            cols,
            p,
            1,
            beta,
            y,
            p,
            1,
        );
    }
    Ok(Tensor::from_parts(vec![g.batch, g.cout, g.ho, g.wo], out))
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    needs: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::new(input, weight, None, stride, padding)?;
    let (k, p) = (g.k(), g.p());
    let in_plane = g.cin * g.h * g.w;
    let out_plane = g.cout * p;
    let (need_dx, need_dw, need_db) = needs;

    let mut dx = need_dx.then(|| vec![T::zero(); input.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); weight.len()]);
    let mut db = need_db.then(|| vec![T::zero(); g.cout]);
    let mut col = vec![T::zero(); if g.pointwise() { 0 } else { k * p }];
    let mut dcol = vec![T::zero(); if need_dx && !g.pointwise() { k * p } else { 0 }];

    for n in 0..g.batch {
        let dy = &grad_out.data()[n * out_plane..(n + 1) * out_plane];
        if let Some(db) = db.as_mut() {
            for (co, chunk) in dy.chunks(p).enumerate() {
                db[co] = chunk.iter().fold(db[co], |acc, &v| acc + v);
            }
        }
        if let Some(dw) = dw.as_mut() {
            let x = &input.data()[n * in_plane..(n + 1) * in_plane];
            let cols: &[T] = if g.pointwise() {
                x
            } else {
                g.im2col(x, &mut col);
                &col
            };
            // dW (cout×K) += dY (cout×P) · colᵀ (P×K)
            T::gemm(g.cout, p, k, T::one(), dy, p, 1, cols, 1, p, T::one(), dw, k, 1);
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_plane..(n + 1) * in_plane];
            // dcol (K×P) = Wᵀ (K×cout) · dY (cout×P)
            if g.pointwise() {
                T::gemm(k, g.cout, p, T::one(), weight.data(), 1, k, dy, p, 1, T::zero(), dxn, p, 1);
            } else {
                T::gemm(
                    k,
                    g.cout,
                    p,
                    T::one(),
                    weight.data(),
                    1,
                    k,
                    dy,
                    p,
                    1,
                    T::zero(),
                    &mut dcol,
                    p,
                    1,
                );
                g.col2im(&dcol, dxn);
            }
        }
    }
    Ok(ConvGrads {
        input: dx.map(|d| Tensor::from_parts(input.shape().to_vec(), d)),
        weight: dw.map(|d| Tensor::from_parts(weight.shape().to_vec(), d)),
        bias: db.map(|d| Tensor::from_parts(vec![g.cout], d)),
    })
}

/// Rotates the last two axes by `k` quarter-turns counterclockwise.
pub fn rotate90k<T: Scalar>(t: &Tensor<T>, k: i32) -> Result<Tensor<T>> {
    let rank = t.rank();
    if rank < 2 {
        return Err(TensorError::Rank {
            op: "rotate90k",
            expected: 2,
            shape: t.shape().to_vec(),
        });
    }
    let k = k.rem_euclid(4);
    let (h, w) = (t.shape()[rank - 2], t.shape()[rank - 1]);
    if k == 0 {
        return Ok(t.clone());
    }
    let mut shape = t.shape().to_vec();
    if k % 2 == 1 {
        shape[rank - 2] = w;
        shape[rank - 1] = h;
    }
    let (oh, ow) = (shape[rank - 2], shape[rank - 1]);
    let plane = h * w;
    let mut out = Vec::with_capacity(t.len());
    for src in t.data().chunks(plane) {
        for i in 0..oh {
            for j in 0..ow {
                let v = match k {
                    1 => src[j * w + (w - 1 - i)],
                    2 => src[(h - 1 - i) * w + (w - 1 - j)],
                    _ => src[(h - 1 - j) * w + i],
                };
                out.push(v);
            }
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

/// Standardises each `(d0, d1)` slice of a rank-4 tensor over its last two axes.
///
/// Returns the output and the per-slice inverse standard deviation.
pub(crate) fn instance_norm<T: Scalar>(x: &Tensor<T>, eps: f64) -> Result<(Tensor<T>, Vec<T>)> {
    let [d0, d1, d2, d3] = dims4("instance_norm", x)?;
    let n = d2 * d3;
    let mut out = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(d0 * d1);
    for slice in x.data().chunks(n) {
        let (mean, var) = mean_var(slice);
        let inv = T::one() / (var + T::from_f64(eps)).sqrt();
        out.extend(slice.iter().map(|&v| (v - mean) * inv));
        inv_std.push(inv);
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), inv_std))
}

/// Gradient of a standardisation `y = (x - mean) * inv` over groups of `n` contiguous elements.
pub(crate) fn instance_norm_backward<T: Scalar>(
    y: &Tensor<T>,
    inv_std: &[T],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let n = y.len() / inv_std.len();
    let nt = T::from_f64(n as f64);
    let mut dx = Vec::with_capacity(y.len());
    for ((ys, dys), &inv) in y.data().chunks(n).zip(dy.data().chunks(n)).zip(inv_std) {
        let mean_dy = dys.iter().fold(T::zero(), |a, &v| a + v) / nt;
        let mean_dyy = ys
            .iter()
            .zip(dys)
            .fold(T::zero(), |a, (&yv, &d)| a + yv * d)
            / nt;
        dx.extend(
            ys.iter()
                .zip(dys)
                .map(|(&yv, &d)| inv * (d - mean_dy - yv * mean_dyy)),
        );
    }
    Tensor::from_parts(y.shape().to_vec(), dx)
}

pub(crate) fn mean_var<T: Scalar>(xs: &[T]) -> (T, T) {
    let n = T::from_f64(xs.len() as f64);
    let mean = xs.iter().fold(T::zero(), |a, &v| a + v) / n;
    let var = xs.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
    (mean, var)
}

/// Per-channel statistics of a `(b, c, h, w)` tensor over batch and space.
pub(crate) fn channel_mean_var<T: Scalar>(x: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    let [b, c, h, w] = dims4("batch_norm", x)?;
    let plane = h * w;
    let count = T::from_f64((b * plane) as f64);
    let mut mean = vec![T::zero(); c];
    for n in 0..b {
        for (ch, m) in mean.iter_mut().enumerate() {
            let s = &x.data()[(n * c + ch) * plane..(n * c + ch + 1) * plane];
            *m = s.iter().fold(*m, |a, &v| a + v);
        }
    }
    for m in mean.iter_mut() {
        *m = *m / count;
    }
    let mut var = vec![T::zero(); c];
    for n in 0..b {
        for ch in 0..c {
            let s = &x.data()[(n * c + ch) * plane..(n * c + ch + 1) * plane];
            var[ch] = s
                .iter()
                .fold(var[ch], |a, &v| a + (v - mean[ch]) * (v - mean[ch]));
        }
    }
    for v in var.iter_mut() {
        *v = *v / count;
    }
    Ok((mean, var))
}

/// Applies `f(channel, value)` elementwise over a `(b, c, ...)` tensor.
pub(crate) fn map_channels<T: Scalar>(x: &Tensor<T>, f: impl Fn(usize, T) -> T) -> Tensor<T> {
    let c = x.shape()[1];
    let plane = x.len() / (x.shape()[0] * c);
    let data = x
        .data()
        .chunks(plane)
        .enumerate()
        .flat_map(|(i, s)| {
            let ch = i % c;
            s.iter().map(move |&v| (ch, v))
        })
        .map(|(ch, v)| f(ch, v))
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// Mean over the spatial axes: `(b, c, h, w)` → `(b, c)`.
pub(crate) fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = dims4("global_avg_pool", x)?;
    let n = T::from_f64((h * w) as f64);
    let data = x
        .data()
        .chunks(h * w)
        .map(|s| s.iter().fold(T::zero(), |a, &v| a + v) / n)
        .collect();
    Ok(Tensor::from_parts(vec![b, c], data))
}

/// Zero-padded 1-D correlation along the channel axis of a `(b, c)` tensor.
pub(crate) fn channel_conv1d<T: Scalar>(g: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("channel_conv1d", g, 2)?;
    expect_rank("channel_conv1d", kernel, 1)?;
    let k = kernel.len();
    if k.is_multiple_of(2) {
        return Err(TensorError::Invalid {
            op: "channel_conv1d",
            msg: format!("kernel length {k} must be odd"),
        });
    }
    let half = (k / 2) as isize;
    let c = g.shape()[1];
    let mut out = Vec::with_capacity(g.len());
    for row in g.data().chunks(c) {
        for i in 0..c as isize {
            let mut acc = T::zero();
            for (j, &wk) in kernel.data().iter().enumerate() {
                let src = i + j as isize - half;
                if src >= 0 && src < c as isize {
                    acc = acc + wk * row[src as usize];
                }
            }
            out.push(acc);
        }
    }
    Ok(Tensor::from_parts(g.shape().to_vec(), out))
}

pub(crate) fn channel_conv1d_backward<T: Scalar>(
    g: &Tensor<T>,
    kernel: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let k = kernel.len();
    let half = (k / 2) as isize;
    let c = g.shape()[1];
    let mut dg = vec![T::zero(); g.len()];
    let mut dk = vec![T::zero(); k];
    for ((row, drow), dgrow) in g
        .data()
        .chunks(c)
        .zip(dy.data().chunks(c))
        .zip(dg.chunks_mut(c))
    {
        for i in 0..c as isize {
            let d = drow[i as usize];
            for (j, &wk) in kernel.data().iter().enumerate() {
                let src = i + j as isize - half;
                if src >= 0 && src < c as isize {
                    dgrow[src as usize] = dgrow[src as usize] + wk * d;
                    dk[j] = dk[j] + row[src as usize] * d;
                }
            }
        }
    }
    (
        Tensor::from_parts(g.shape().to_vec(), dg),
        Tensor::from_parts(vec![k], dk),
    )
}

/// Scales each `(n, c)` plane of `x` by `scale[n, c]`.
pub(crate) fn channel_scale<T: Scalar>(x: &Tensor<T>, scale: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = dims4("channel_scale", x)?;
    if scale.shape() != [b, c] {
        return Err(mismatch("channel_scale", x.shape(), scale.shape()));
    }
    let data = x
        .data()
        .chunks(h * w)
        .zip(scale.data())
        .flat_map(|(s, &k)| s.iter().map(move |&v| v * k))
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    let y = T::one() / (T::one() + (-v).exp());
    // Keep the gate strictly inside (0, 1) even where it saturates.
    let hi = T::one() - T::epsilon() / T::from_f64(2.0);
    y.max(T::min_positive_value()).min(hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn permute_shape_bookkeeping() {
        let x = Tensor::<f32>::gaussian(&[1, 2, 3, 4], 0.0, 1.0, 1).unwrap();
        let p = x.permute(&[0, 2, 1, 3]).unwrap();
        assert_eq!(p.shape(), &[1, 3, 2, 4]);
        assert_eq!(x.permute(&[0, 1, 2, 3]).unwrap(), x);
        assert!(matches!(
            x.permute(&[0, 1, 1, 3]),
            Err(TensorError::InvalidPermutation { .. })
        ));
        assert!(x.permute(&[0, 1, 2]).is_err());
    }

    #[test]
    fn permute_matches_index_formula() {
        let x = Tensor::<f32>::gaussian(&[2, 3, 4, 5], 0.0, 1.0, 2).unwrap();
        let axes = [0, 2, 3, 1];
        let p = x.permute(&axes).unwrap();
        let s = x.shape();
        for a in 0..2 {
            for b in 0..4 {
                for c in 0..5 {
                    for d in 0..3 {
                        // output (a,b,c,d) = input (a,d,b,c)
                        let got = p.data()[((a * 4 + b) * 5 + c) * 3 + d];
                        let want = x.data()[((a * s[1] + d) * s[2] + b) * s[3] + c];
                        assert_eq!(got, want);
                    }
                }
            }
        }
    }

    #[test]
    fn concat_three_streams() {
        let a = Tensor::<f32>::zeros(&[2, 128, 16, 16]).unwrap();
        let out = concat(&[&a, &a, &a], 1).unwrap();
        assert_eq!(out.shape(), &[2, 384, 16, 16]);
    }

    #[test]
    fn concat_single_and_split_inverse() {
        let a = Tensor::<f32>::gaussian(&[2, 3, 4], 0.0, 1.0, 3).unwrap();
        let b = Tensor::<f32>::gaussian(&[2, 5, 4], 0.0, 1.0, 4).unwrap();
        assert_eq!(concat(&[&a], 1).unwrap(), a);
        let ab = concat(&[&a, &b], 1).unwrap();
        let parts = split(&ab, 1, &[3, 5]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
        let c = Tensor::<f32>::zeros(&[3, 5, 4]).unwrap();
        assert!(concat(&[&a, &c], 1).is_err());
    }

    #[test]
    fn matmul_hand_case_and_errors() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(matmul_batched(&a, &b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(matmul_batched(&a, &eye).unwrap(), a);
        let bad = Tensor::<f32>::zeros(&[3, 2]).unwrap();
        assert!(matmul_batched(&a, &bad).is_err());
        let x = Tensor::<f32>::zeros(&[2, 2, 3]).unwrap();
        let y = Tensor::<f32>::zeros(&[3, 3, 2]).unwrap();
        assert!(matmul_batched(&x, &y).is_err());
    }

    #[test]
    fn conv_identity_and_shapes() {
        let x = Tensor::<f32>::gaussian(&[1, 1, 5, 5], 0.0, 1.0, 5).unwrap();
        let w = Tensor::<f32>::full(&[1, 1, 1, 1], 1.0).unwrap();
        assert_eq!(conv2d(&x, &w, None, 1, 0).unwrap(), x);

        let x = Tensor::<f32>::zeros(&[1, 1, 8, 8]).unwrap();
        let w = Tensor::<f32>::zeros(&[6, 1, 3, 3]).unwrap();
        assert_eq!(conv2d(&x, &w, None, 1, 1).unwrap().shape(), &[1, 6, 8, 8]);

        let x = Tensor::<f32>::full(&[1, 1, 5, 5], 1.0).unwrap();
        let w = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0).unwrap();
        let y = conv2d(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y.data()[2 * 5 + 2], 9.0);
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn conv_errors() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]).unwrap();
        let w = Tensor::<f32>::zeros(&[1, 3, 3, 3]).unwrap();
        assert!(conv2d(&x, &w, None, 1, 1).is_err());
        let w = Tensor::<f32>::zeros(&[1, 2, 7, 7]).unwrap();
        assert!(conv2d(&x, &w, None, 1, 1).is_err());
    }

    #[test]
    fn rotation_by_definition() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(rotate90k(&x, 1).unwrap().data(), &[2.0, 4.0, 1.0, 3.0]);
        let y = Tensor::<f32>::gaussian(&[2, 3, 4, 5], 0.0, 1.0, 9).unwrap();
        let r1 = rotate90k(&y, 1).unwrap();
        assert_eq!(r1.shape(), &[2, 3, 5, 4]);
        assert_eq!(rotate90k(&r1, 1).unwrap(), rotate90k(&y, 2).unwrap());
        assert_eq!(rotate90k(&r1, 3).unwrap(), y);
        assert_eq!(rotate90k(&y, 4).unwrap(), y);
        assert_eq!(rotate90k(&y, -1).unwrap(), rotate90k(&y, 3).unwrap());
    }

    #[test]
    fn instance_norm_properties() {
        let c = Tensor::<f64>::full(&[1, 2, 3, 3], 4.0).unwrap();
        let (y, _) = instance_norm(&c, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let x = Tensor::<f64>::gaussian(&[2, 3, 6, 7], 0.3, 2.0, 12).unwrap();
        let (y, _) = instance_norm(&x, 1e-5).unwrap();
        for s in y.data().chunks(42) {
            let (m, v) = mean_var(s);
            assert!(m.abs() <= 1e-6);
            assert!((v - 1.0).abs() < 1e-3);
        }
        // Affine invariance holds exactly only for eps = 0.
        let shifted = x.map(|v| 2.5 * v - 0.7);
        let (ys, _) = instance_norm(&shifted, 0.0).unwrap();
        let (y0, _) = instance_norm(&x, 0.0).unwrap();
        for (a, b) in ys.data().iter().zip(y0.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_stays_open_interval() {
        for v in [-1e6f32, -100.0, -20.0, 0.0, 20.0, 100.0, 1e6] {
            let s = sigmoid(v);
            assert!(s > 0.0 && s < 1.0, "{v} -> {s}");
        }
        assert_eq!(sigmoid(0.0f32), 0.5);
    }
}
