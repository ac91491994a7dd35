//! The closed operator set. Every function here builds one tape node; the
//! backward closure of that node routes gradients to its inputs.
//!
//! Layout conventions: all buffers are row-major. Images are `[n, c, h, w]`,
//! matrices `[rows, cols]`, vectors `[len]`.

use rand::Rng;

use super::{fmt_shape, make_node, Scalar, Tensor, TensorError};

/// c = a · b with explicit row/col strides for a and b; c is row-major.
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    rsa: isize,
    csa: isize,
    b: &[T],
    rsb: isize,
    csb: isize,
    c: &mut [T],
) {
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(T::ZERO);
        return;
    }
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn require_same_shape<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Elementwise sum. Also accepts a `[rows, cols] + [cols]` bias broadcast.
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let broadcast = a.shape().len() == 2 && b.shape().len() == 1 && b.shape()[0] == a.shape()[1];
    if !broadcast {
        require_same_shape("add", a, b)?;
    }
    let av = a.to_vec();
    let bv = b.to_vec();
    let cols = if broadcast { a.shape()[1] } else { 0 };
    let out: Vec<T> = if broadcast {
        av.iter().enumerate().map(|(i, &x)| x + bv[i % cols]).collect()
    } else {
        av.iter().zip(&bv).map(|(&x, &y)| x + y).collect()
    };
    let (pa, pb) = (a.clone(), b.clone());
    Ok(make_node("add", a.shape().to_vec(), out, vec![a.clone(), b.clone()], move || {
        Box::new(move |g: &[T]| {
            pa.accumulate_grad(g);
            if broadcast {
                let mut gb = vec![T::ZERO; cols];
                for (i, &gi) in g.iter().enumerate() {
                    gb[i % cols] += gi;
                }
                pb.accumulate_grad(&gb);
            } else {
                pb.accumulate_grad(g);
            }
        })
    }))
}

/// Elementwise (Hadamard) product.
pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    require_same_shape("mul", a, b)?;
    let av = a.to_vec();
    let bv = b.to_vec();
    let out: Vec<T> = av.iter().zip(&bv).map(|(&x, &y)| x * y).collect();
    let (pa, pb) = (a.clone(), b.clone());
    Ok(make_node("mul", a.shape().to_vec(), out, vec![a.clone(), b.clone()], move || {
        Box::new(move |g: &[T]| {
            let bv = pb.to_vec();
            let av = pa.to_vec();
            let ga: Vec<T> = g.iter().zip(&bv).map(|(&gi, &y)| gi * y).collect();
            let gb: Vec<T> = g.iter().zip(&av).map(|(&gi, &x)| gi * x).collect();
            pa.accumulate_grad(&ga);
            pb.accumulate_grad(&gb);
        })
    }))
}

/// Multiplication by a compile-time constant scalar.
pub fn scale<T: Scalar>(a: &Tensor<T>, c: T) -> Tensor<T> {
    let out: Vec<T> = a.to_vec().iter().map(|&x| x * c).collect();
    let pa = a.clone();
    make_node("scale", a.shape().to_vec(), out, vec![a.clone()], move || {
        Box::new(move |g: &[T]| {
            let ga: Vec<T> = g.iter().map(|&gi| gi * c).collect();
            pa.accumulate_grad(&ga);
        })
    })
}

/// `[m, k] x [k, n] -> [m, n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut out = vec![T::ZERO; m * n];
    {
        let av = a.to_vec();
        let bv = b.to_vec();
        gemm(m, k, n, &av, k as isize, 1, &bv, n as isize, 1, &mut out);
    }
    let (pa, pb) = (a.clone(), b.clone());
    Ok(make_node("matmul", vec![m, n], out, vec![a.clone(), b.clone()], move || {
        Box::new(move |g: &[T]| {
            let av = pa.to_vec();
            let bv = pb.to_vec();
            // dA = dY . B^T   [m,n] x [n,k]
            let mut ga = vec![T::ZERO; m * k];
            gemm(m, n, k, g, n as isize, 1, &bv, 1, n as isize, &mut ga);
            // dB = A^T . dY   [k,m] x [m,n]
            let mut gb = vec![T::ZERO; k * n];
            gemm(k, m, n, &av, 1, k as isize, g, n as isize, 1, &mut gb);
            pa.accumulate_grad(&ga);
            pb.accumulate_grad(&gb);
        })
    }))
}

/// max(x, 0); the subgradient at exactly zero is taken as zero.
pub fn relu<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let av = a.to_vec();
    let out: Vec<T> = av.iter().map(|&x| x.max_v(T::ZERO)).collect();
    let pa = a.clone();
    make_node("relu", a.shape().to_vec(), out, vec![a.clone()], move || {
        Box::new(move |g: &[T]| {
            let av = pa.to_vec();
            let ga: Vec<T> =
                g.iter().zip(&av).map(|(&gi, &x)| if x > T::ZERO { gi } else { T::ZERO }).collect();
            pa.accumulate_grad(&ga);
        })
    })
}

fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    // Branch on sign so the exp argument is never positive.
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let out: Vec<T> = a.to_vec().iter().map(|&x| sigmoid_scalar(x)).collect();
    let pa = a.clone();
    let saved = out.clone();
    make_node("sigmoid", a.shape().to_vec(), out, vec![a.clone()], move || {
        Box::new(move |g: &[T]| {
            let ga: Vec<T> =
                g.iter().zip(&saved).map(|(&gi, &y)| gi * y * (T::ONE - y)).collect();
            pa.accumulate_grad(&ga);
        })
    })
}

/// Inverted dropout: each element is zeroed with probability `rate` and the
/// survivors are scaled by `1 / (1 - rate)`, so expectations match inference.
/// Draws one uniform `f64` per element from `rng`, in index order.
pub fn dropout<T: Scalar, R: Rng>(
    a: &Tensor<T>,
    rate: f64,
    rng: &mut R,
) -> Result<Tensor<T>, TensorError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::InvalidArg {
            op: "dropout",
            detail: format!("rate must be in [0, 1), got {rate}"),
        });
    }
    let keep_scale = T::from_f64(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..a.len())
        .map(|_| if rng.gen::<f64>() < rate { T::ZERO } else { keep_scale })
        .collect();
    let out: Vec<T> = a.to_vec().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
    let pa = a.clone();
    Ok(make_node("dropout", a.shape().to_vec(), out, vec![a.clone()], move || {
        Box::new(move |g: &[T]| {
            let ga: Vec<T> = g.iter().zip(&mask).map(|(&gi, &m)| gi * m).collect();
            pa.accumulate_grad(&ga);
        })
    }))
}

/// Arithmetic mean of all elements, as a `[1]` tensor.
pub fn mean<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let n = a.len().max(1);
    let inv = T::from_f64(1.0 / n as f64);
    let mut acc = T::ZERO;
    for &x in a.to_vec().iter() {
        acc += x;
    }
    let pa = a.clone();
    make_node("mean", vec![1], vec![acc * inv], vec![a.clone()], move || {
        Box::new(move |g: &[T]| {
            let ga = vec![g[0] * inv; pa.len()];
            pa.accumulate_grad(&ga);
        })
    })
}

/// Sum of all elements, as a `[1]` tensor.
pub fn sum<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let mut acc = T::ZERO;
    for &x in a.to_vec().iter() {
        acc += x;
    }
    let pa = a.clone();
    make_node("sum", vec![1], vec![acc], vec![a.clone()], move || {
        Box::new(move |g: &[T]| {
            let ga = vec![g[0]; pa.len()];
            pa.accumulate_grad(&ga);
        })
    })
}

/// Reinterprets the buffer under a new shape with the same element count.
pub fn reshape<T: Scalar>(a: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>, TensorError> {
    let expected: usize = shape.iter().product();
    if expected != a.len() {
        return Err(TensorError::InvalidArg {
            op: "reshape",
            detail: format!(
                "cannot view {} elements as {}",
                a.len(),
                fmt_shape(shape)
            ),
        });
    }
    let pa = a.clone();
    Ok(make_node("reshape", shape.to_vec(), a.to_vec(), vec![a.clone()], move || {
        Box::new(move |g: &[T]| pa.accumulate_grad(g))
    }))
}

/// Concatenates along `axis`; all other dimensions must agree.
pub fn concat<T: Scalar>(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>, TensorError> {
    if parts.is_empty() {
        return Err(TensorError::InvalidArg {
            op: "concat",
            detail: "no tensors given".to_string(),
        });
    }
    let rank = parts[0].shape().len();
    if axis >= rank {
        return Err(TensorError::InvalidArg {
            op: "concat",
            detail: format!("axis {axis} out of range for rank {rank}"),
        });
    }
    let mut out_shape = parts[0].shape().to_vec();
    for p in &parts[1..] {
        if p.shape().len() != rank {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        for (d, (&a, &b)) in out_shape.iter().zip(p.shape()).enumerate() {
            if d != axis && a != b {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        out_shape[axis] += p.shape()[axis];
    }
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let total: usize = out_shape.iter().product();
    let mut out = vec![T::ZERO; total];
    let out_row = out_shape[axis] * inner;
    let mut offset = 0usize;
    let mut spans = Vec::with_capacity(parts.len());
    for p in parts {
        let span = p.shape()[axis] * inner;
        let pv = p.to_vec();
        for o in 0..outer {
            out[o * out_row + offset..o * out_row + offset + span]
                .copy_from_slice(&pv[o * span..(o + 1) * span]);
        }
        spans.push((offset, span));
        offset += span;
    }
    let handles: Vec<Tensor<T>> = parts.to_vec();
    let back_handles = handles.clone();
    Ok(make_node("concat", out_shape, out, handles, move || {
        Box::new(move |g: &[T]| {
            for (p, &(off, span)) in back_handles.iter().zip(&spans) {
                let mut gp = vec![T::ZERO; p.len()];
                for o in 0..outer {
                    gp[o * span..(o + 1) * span]
                        .copy_from_slice(&g[o * out_row + off..o * out_row + off + span]);
                }
                p.accumulate_grad(&gp);
            }
        })
    }))
}

/// Unfolds padded `kh x kw` patches of `x` into a `[c*kh*kw, n*h*w]` matrix
/// (columns ordered sample-major, then row-major over output pixels).
pub(crate) fn im2col<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    cols: &mut [T],
) {
    let hw = h * w;
    let s_total = n * hw;
    debug_assert_eq!(cols.len(), c * kh * kw * s_total);
    cols.fill(T::ZERO);
    for ci in 0..c {
        for di in 0..kh {
            for dj in 0..kw {
                let row = (ci * kh + di) * kw + dj;
                let row_base = row * s_total;
                // Valid horizontal range of output x for this tap.
                let x_lo = pad.saturating_sub(dj);
                let x_hi = (w + pad).saturating_sub(dj).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for s in 0..n {
                    let img = (s * c + ci) * hw;
                    for y in 0..h {
                        let sy = y as isize + di as isize - pad as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = img + sy as usize * w + (x_lo + dj - pad);
                        let dst = row_base + s * hw + y * w + x_lo;
                        cols[dst..dst + (x_hi - x_lo)]
                            .copy_from_slice(&x[src..src + (x_hi - x_lo)]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds column gradients back onto the image.
pub(crate) fn col2im<T: Scalar>(
    cols: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    x_grad: &mut [T],
) {
    let hw = h * w;
    let s_total = n * hw;
    debug_assert_eq!(x_grad.len(), n * c * hw);
    for ci in 0..c {
        for di in 0..kh {
            for dj in 0..kw {
                let row = (ci * kh + di) * kw + dj;
                let row_base = row * s_total;
                let x_lo = pad.saturating_sub(dj);
                let x_hi = (w + pad).saturating_sub(dj).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for s in 0..n {
                    let img = (s * c + ci) * hw;
                    for y in 0..h {
                        let sy = y as isize + di as isize - pad as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let dst = img + sy as usize * w + (x_lo + dj - pad);
                        let src = row_base + s * hw + y * w + x_lo;
                        for k in 0..(x_hi - x_lo) {
                            x_grad[dst + k] += cols[src + k];
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 "same" convolution with an odd square kernel plus per-channel
/// bias. `x` is `[n, c, h, w]`, `weight` is `[o, c, k, k]`, `bias` is `[o]`.
///
/// Implemented as one GEMM over the batch-stacked im2col matrix; backward
/// recomputes the column matrix rather than keeping it alive.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let xs = x.shape().to_vec();
    let ws = weight.shape().to_vec();
    if xs.len() != 4 || ws.len() != 4 {
        return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: xs, rhs: ws });
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if wc != c {
        return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: xs, rhs: ws });
    }
    if kh != kw || kh % 2 == 0 {
        return Err(TensorError::InvalidArg {
            op: "conv2d",
            detail: format!("kernel must be odd and square, got {kh}x{kw}"),
        });
    }
    if bias.shape() != [o] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: ws,
            rhs: bias.shape().to_vec(),
        });
    }
    let pad = (kh - 1) / 2;
    let hw = h * w;
    let s_total = n * hw;
    let k_len = c * kh * kw;

    let xv = x.to_vec();
    let wv = weight.to_vec();
    let bv = bias.to_vec();
    let mut cols = vec![T::ZERO; k_len * s_total];
    im2col(&xv, n, c, h, w, kh, kw, pad, &mut cols);
    let mut out_all = vec![T::ZERO; o * s_total];
    gemm(o, k_len, s_total, &wv, k_len as isize, 1, &cols, s_total as isize, 1, &mut out_all);
    drop(cols);

    let mut out = vec![T::ZERO; n * o * hw];
    for s in 0..n {
        for oc in 0..o {
            let src = &out_all[oc * s_total + s * hw..oc * s_total + (s + 1) * hw];
            let dst = &mut out[(s * o + oc) * hw..(s * o + oc + 1) * hw];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v + bv[oc];
            }
        }
    }
    drop(out_all);

    let (px, pw, pb) = (x.clone(), weight.clone(), bias.clone());
    Ok(make_node(
        "conv2d",
        vec![n, o, h, w],
        out,
        vec![x.clone(), weight.clone(), bias.clone()],
        move || {
            Box::new(move |g: &[T]| {
                // Regather dy into the GEMM layout [o, n*hw].
                let mut dy = vec![T::ZERO; o * s_total];
                for s in 0..n {
                    for oc in 0..o {
                        dy[oc * s_total + s * hw..oc * s_total + (s + 1) * hw]
                            .copy_from_slice(&g[(s * o + oc) * hw..(s * o + oc + 1) * hw]);
                    }
                }
                let mut db = vec![T::ZERO; o];
                for oc in 0..o {
                    let mut acc = T::ZERO;
                    for &v in &dy[oc * s_total..(oc + 1) * s_total] {
                        acc += v;
                    }
                    db[oc] = acc;
                }
                pb.accumulate_grad(&db);

                let xv = px.to_vec();
                let mut cols = vec![T::ZERO; k_len * s_total];
                im2col(&xv, n, c, h, w, kh, kw, pad, &mut cols);
                // dW = dy . cols^T
                let mut dw = vec![T::ZERO; o * k_len];
                gemm(
                    o,
                    s_total,
                    k_len,
                    &dy,
                    s_total as isize,
                    1,
                    &cols,
                    1,
                    s_total as isize,
                    &mut dw,
                );
                pw.accumulate_grad(&dw);

                if px.requires_grad() {
                    // dcols = W^T . dy, then fold back into image space.
                    let wv = pw.to_vec();
                    let mut dcols = vec![T::ZERO; k_len * s_total];
                    gemm(
                        k_len,
                        o,
                        s_total,
                        &wv,
                        1,
                        k_len as isize,
                        &dy,
                        s_total as isize,
                        1,
                        &mut dcols,
                    );
                    let mut dx = vec![T::ZERO; xv.len()];
                    col2im(&dcols, n, c, h, w, kh, kw, pad, &mut dx);
                    px.accumulate_grad(&dx);
                }
            })
        },
    ))
}

/// Non-overlapping max pooling with window `ph x pw`; trailing rows/columns
/// that do not fill a window are dropped (floor semantics). Ties resolve to
/// the first maximum in row-major scan order.
pub fn maxpool2d<T: Scalar>(
    x: &Tensor<T>,
    ph: usize,
    pw: usize,
) -> Result<Tensor<T>, TensorError> {
    let xs = x.shape().to_vec();
    if xs.len() != 4 {
        return Err(TensorError::InvalidArg {
            op: "maxpool2d",
            detail: format!("expected [n,c,h,w] input, got {}", fmt_shape(&xs)),
        });
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    if ph == 0 || pw == 0 || ph > h || pw > w {
        return Err(TensorError::PoolTooLarge { input: xs, pool: (ph, pw) });
    }
    let (ho, wo) = (h / ph, w / pw);
    let xv = x.to_vec();
    let mut out = vec![T::ZERO; n * c * ho * wo];
    let mut argmax = vec![0u32; out.len()];
    for img in 0..n * c {
        let base = img * h * w;
        let obase = img * ho * wo;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = xv[base + oy * ph * w + ox * pw];
                let mut best_idx = (oy * ph * w + ox * pw) as u32;
                for dy in 0..ph {
                    for dx in 0..pw {
                        let idx = (oy * ph + dy) * w + ox * pw + dx;
                        let v = xv[base + idx];
                        if v > best {
                            best = v;
                            best_idx = idx as u32;
                        }
                    }
                }
                out[obase + oy * wo + ox] = best;
                argmax[obase + oy * wo + ox] = best_idx;
            }
        }
    }
    let px = x.clone();
    Ok(make_node("maxpool2d", vec![n, c, ho, wo], out, vec![x.clone()], move || {
        Box::new(move |g: &[T]| {
            let mut dx = vec![T::ZERO; px.len()];
            for img in 0..n * c {
                let base = img * h * w;
                let obase = img * ho * wo;
                for (k, &gi) in g[obase..obase + ho * wo].iter().enumerate() {
                    dx[base + argmax[obase + k] as usize] += gi;
                }
            }
            px.accumulate_grad(&dx);
        })
    }))
}

fn channel_layout<T: Scalar>(
    op: &'static str,
    x: &Tensor<T>,
) -> Result<(usize, usize, usize), TensorError> {
    let s = x.shape();
    match s.len() {
        2 => Ok((s[0], s[1], 1)),
        4 => Ok((s[0], s[1], s[2] * s[3])),
        _ => Err(TensorError::InvalidArg {
            op,
            detail: format!("expected [n,c] or [n,c,h,w], got {}", fmt_shape(s)),
        }),
    }
}

/// Training-mode batch normalization over the batch and spatial axes.
///
/// Normalizes each channel with the biased variance of the current batch,
/// then applies the affine pair `gamma, beta`. Returns the output together
/// with the per-channel batch mean and variance so callers can maintain
/// running statistics. Requires at least two elements per channel.
#[allow(clippy::type_complexity)]
pub fn batchnorm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>), TensorError> {
    let (n, c, spatial) = channel_layout("batchnorm", x)?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(TensorError::ShapeMismatch {
            op: "batchnorm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let m = n * spatial;
    if m < 2 {
        return Err(TensorError::BatchTooSmall { elements: m });
    }
    let xv = x.to_vec();
    let inv_m = T::from_f64(1.0 / m as f64);
    let mut mean = vec![T::ZERO; c];
    let mut var = vec![T::ZERO; c];
    for ci in 0..c {
        let mut acc = T::ZERO;
        for s in 0..n {
            let base = (s * c + ci) * spatial;
            for &v in &xv[base..base + spatial] {
                acc += v;
            }
        }
        let mu = acc * inv_m;
        let mut vacc = T::ZERO;
        for s in 0..n {
            let base = (s * c + ci) * spatial;
            for &v in &xv[base..base + spatial] {
                let d = v - mu;
                vacc += d * d;
            }
        }
        mean[ci] = mu;
        var[ci] = vacc * inv_m;
    }
    let istd: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
    let gv = gamma.to_vec();
    let bv = beta.to_vec();
    let mut out = vec![T::ZERO; xv.len()];
    for ci in 0..c {
        let (a, b) = (gv[ci] * istd[ci], bv[ci] - gv[ci] * istd[ci] * mean[ci]);
        for s in 0..n {
            let base = (s * c + ci) * spatial;
            for i in base..base + spatial {
                out[i] = xv[i] * a + b;
            }
        }
    }
    let (px, pg, pb) = (x.clone(), gamma.clone(), beta.clone());
    let (mean_c, istd_c) = (mean.clone(), istd.clone());
    let node = make_node(
        "batchnorm",
        x.shape().to_vec(),
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        move || {
            Box::new(move |g: &[T]| {
                let xv = px.to_vec();
                let gv = pg.to_vec();
                let inv_m = T::from_f64(1.0 / m as f64);
                let mut dgamma = vec![T::ZERO; c];
                let mut dbeta = vec![T::ZERO; c];
                let mut dx = vec![T::ZERO; xv.len()];
                for ci in 0..c {
                    let (mu, is) = (mean_c[ci], istd_c[ci]);
                    let mut sum_dy = T::ZERO;
                    let mut sum_dy_xhat = T::ZERO;
                    for s in 0..n {
                        let base = (s * c + ci) * spatial;
                        for i in base..base + spatial {
                            let xhat = (xv[i] - mu) * is;
                            sum_dy += g[i];
                            sum_dy_xhat += g[i] * xhat;
                        }
                    }
                    dbeta[ci] = sum_dy;
                    dgamma[ci] = sum_dy_xhat;
                    let coef = gv[ci] * is * inv_m;
                    let mf = T::from_f64(m as f64);
                    for s in 0..n {
                        let base = (s * c + ci) * spatial;
                        for i in base..base + spatial {
                            let xhat = (xv[i] - mu) * is;
                            dx[i] = coef * (mf * g[i] - sum_dy - xhat * sum_dy_xhat);
                        }
                    }
                }
                px.accumulate_grad(&dx);
                pg.accumulate_grad(&dgamma);
                pb.accumulate_grad(&dbeta);
            })
        },
    );
    Ok((node, mean, var))
}

/// Inference-mode batch normalization using fixed running statistics: a pure
/// per-channel affine map.
pub fn batchnorm_infer<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &[T],
    running_var: &[T],
    eps: T,
) -> Result<Tensor<T>, TensorError> {
    let (n, c, spatial) = channel_layout("batchnorm", x)?;
    if gamma.shape() != [c] || beta.shape() != [c] || running_mean.len() != c || running_var.len() != c
    {
        return Err(TensorError::ShapeMismatch {
            op: "batchnorm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let istd: Vec<T> = running_var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
    let mu = running_mean.to_vec();
    let xv = x.to_vec();
    let gv = gamma.to_vec();
    let bv = beta.to_vec();
    let mut out = vec![T::ZERO; xv.len()];
    for ci in 0..c {
        let (a, b) = (gv[ci] * istd[ci], bv[ci] - gv[ci] * istd[ci] * mu[ci]);
        for s in 0..n {
            let base = (s * c + ci) * spatial;
            for i in base..base + spatial {
                out[i] = xv[i] * a + b;
            }
        }
    }
    let (px, pg, pb) = (x.clone(), gamma.clone(), beta.clone());
    Ok(make_node(
        "batchnorm",
        x.shape().to_vec(),
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        move || {
            Box::new(move |g: &[T]| {
                let xv = px.to_vec();
                let gv = pg.to_vec();
                let mut dgamma = vec![T::ZERO; c];
                let mut dbeta = vec![T::ZERO; c];
                let mut dx = vec![T::ZERO; xv.len()];
                for ci in 0..c {
                    let a = gv[ci] * istd[ci];
                    let mut s_dy = T::ZERO;
                    let mut s_dy_xhat = T::ZERO;
                    for s in 0..n {
                        let base = (s * c + ci) * spatial;
                        for i in base..base + spatial {
                            s_dy += g[i];
                            s_dy_xhat += g[i] * (xv[i] - mu[ci]) * istd[ci];
                            dx[i] = g[i] * a;
                        }
                    }
                    dbeta[ci] = s_dy;
                    dgamma[ci] = s_dy_xhat;
                }
                px.accumulate_grad(&dx);
                pg.accumulate_grad(&dgamma);
                pb.accumulate_grad(&dbeta);
            })
        },
    ))
}

/// Clamp bounds for predictions inside the cross-entropy, keeping the logs
/// finite no matter how saturated the sigmoid output is.
pub const BCE_EPS: f64 = 1e-7;

/// Mean binary cross-entropy between predictions in (0, 1) and 0/1 targets.
/// Predictions are clamped to `[BCE_EPS, 1 - BCE_EPS]` before the logs;
/// clamped elements get zero gradient.
pub fn bce<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    require_same_shape("bce", pred, target)?;
    if pred.is_empty() {
        return Err(TensorError::InvalidArg {
            op: "bce",
            detail: "empty prediction tensor".to_string(),
        });
    }
    let lo = T::from_f64(BCE_EPS);
    let hi = T::from_f64(1.0 - BCE_EPS);
    let pv = pred.to_vec();
    let tv = target.to_vec();
    let n = pv.len();
    let inv_n = T::from_f64(1.0 / n as f64);
    let mut acc = T::ZERO;
    for (&p, &y) in pv.iter().zip(&tv) {
        let pc = p.max_v(lo).min_v(hi);
        acc += -(y * pc.ln() + (T::ONE - y) * (T::ONE - pc).ln());
    }
    let (pp, pt) = (pred.clone(), target.clone());
    let _ = pt;
    Ok(make_node(
        "bce",
        vec![1],
        vec![acc * inv_n],
        vec![pred.clone(), target.clone()],
        move || {
            Box::new(move |g: &[T]| {
                let pv = pp.to_vec();
                let g0 = g[0];
                let mut dp = vec![T::ZERO; n];
                for i in 0..n {
                    let p = pv[i];
                    if p <= lo || p >= hi {
                        continue;
                    }
                    let y = tv[i];
                    dp[i] = g0 * inv_n * ((T::ONE - y) / (T::ONE - p) - y / p);
                }
                pp.accumulate_grad(&dp);
            })
        },
    ))
}
