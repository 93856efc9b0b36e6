//! Dense kernels behind the tape ops: GEMM, im2col/col2im for strided
//! causal time convolution, and batch-norm statistics.

/// `c = a · b + beta · c` for row/column-strided operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Unfolds `x` (`channels × t_in`, row-major) into `(channels·k) × t_cols`
/// where row `i·k + p`, column `t` holds `x[i, stride·t − p]` (zero outside).
pub(crate) fn im2col(
    x: &[f64],
    channels: usize,
    t_in: usize,
    k: usize,
    stride: usize,
    t_cols: usize,
    col: &mut [f64],
) {
    debug_assert_eq!(col.len(), channels * k * t_cols);
    for i in 0..channels {
        let xi = &x[i * t_in..(i + 1) * t_in];
        for p in 0..k {
            let row = &mut col[(i * k + p) * t_cols..(i * k + p + 1) * t_cols];
            for (t, slot) in row.iter_mut().enumerate() {
                let s = stride * t;
                *slot = if s >= p && s - p < t_in { xi[s - p] } else { 0.0 };
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds `col` back into `x`.
pub(crate) fn col2im(
    col: &[f64],
    channels: usize,
    t_in: usize,
    k: usize,
    stride: usize,
    t_cols: usize,
    x: &mut [f64],
) {
    for i in 0..channels {
        let xi = &mut x[i * t_in..(i + 1) * t_in];
        for p in 0..k {
            let row = &col[(i * k + p) * t_cols..(i * k + p + 1) * t_cols];
            for (t, &v) in row.iter().enumerate() {
                let s = stride * t;
                if s >= p && s - p < t_in {
                    xi[s - p] += v;
                }
            }
        }
    }
}

pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    /// Length of the "long" side (conv input / deconv output).
    pub t_long: usize,
    /// Length of the "short" side (conv output / deconv input).
    pub t_short: usize,
}

/// Causal strided convolution. `w` is `c_out × c_in × k`.
pub(crate) fn conv_forward(d: &ConvDims, x: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
    let rows = d.c_in * d.k;
    let mut col = vec![0.0; rows * d.t_short];
    let mut y = vec![0.0; d.batch * d.c_out * d.t_short];
    for b in 0..d.batch {
        let xb = &x[b * d.c_in * d.t_long..(b + 1) * d.c_in * d.t_long];
        im2col(xb, d.c_in, d.t_long, d.k, d.stride, d.t_short, &mut col);
        let yb = &mut y[b * d.c_out * d.t_short..(b + 1) * d.c_out * d.t_short];
        for (o, row) in yb.chunks_mut(d.t_short).enumerate() {
            row.fill(bias[o]);
        }
        gemm(d.c_out, rows, d.t_short, w, (rows, 1), &col, (d.t_short, 1), 1.0, yb, (d.t_short, 1));
    }
    y
}

/// Gradients of [`conv_forward`]. `dx` is skipped when `None`.
pub(crate) fn conv_backward(
    d: &ConvDims,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    mut dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let rows = d.c_in * d.k;
    let mut col = vec![0.0; rows * d.t_short];
    let mut dw = dw;
    for b in 0..d.batch {
        let dyb = &dy[b * d.c_out * d.t_short..(b + 1) * d.c_out * d.t_short];
        if let Some(dw) = dw.as_deref_mut() {
            let xb = &x[b * d.c_in * d.t_long..(b + 1) * d.c_in * d.t_long];
            im2col(xb, d.c_in, d.t_long, d.k, d.stride, d.t_short, &mut col);
            gemm(d.c_out, d.t_short, rows, dyb, (d.t_short, 1), &col, (1, d.t_short), 1.0, dw, (rows, 1));
        }
        if let Some(dx) = dx.as_deref_mut() {
            gemm(rows, d.c_out, d.t_short, w, (1, rows), dyb, (d.t_short, 1), 0.0, &mut col, (d.t_short, 1));
            let dxb = &mut dx[b * d.c_in * d.t_long..(b + 1) * d.c_in * d.t_long];
            col2im(&col, d.c_in, d.t_long, d.k, d.stride, d.t_short, dxb);
        }
    }
    if let Some(db) = db {
        accumulate_bias(dy, d.batch, d.c_out, d.t_short, db);
    }
}

/// Transposed convolution: the input-adjoint of [`conv_forward`], cropped to
/// `t_long`. `w` is `c_in × c_out × k` where `c_in` is the deconv input.
pub(crate) fn deconv_forward(d: &ConvDims, x: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
    let rows = d.c_out * d.k;
    let mut col = vec![0.0; rows * d.t_short];
    let mut y = vec![0.0; d.batch * d.c_out * d.t_long];
    for b in 0..d.batch {
        let xb = &x[b * d.c_in * d.t_short..(b + 1) * d.c_in * d.t_short];
        gemm(rows, d.c_in, d.t_short, w, (1, rows), xb, (d.t_short, 1), 0.0, &mut col, (d.t_short, 1));
        let yb = &mut y[b * d.c_out * d.t_long..(b + 1) * d.c_out * d.t_long];
        for (o, row) in yb.chunks_mut(d.t_long).enumerate() {
            row.fill(bias[o]);
        }
        col2im(&col, d.c_out, d.t_long, d.k, d.stride, d.t_short, yb);
    }
    y
}

pub(crate) fn deconv_backward(
    d: &ConvDims,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    mut dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let rows = d.c_out * d.k;
    let mut col = vec![0.0; rows * d.t_short];
    let mut dw = dw;
    for b in 0..d.batch {
        let dyb = &dy[b * d.c_out * d.t_long..(b + 1) * d.c_out * d.t_long];
        im2col(dyb, d.c_out, d.t_long, d.k, d.stride, d.t_short, &mut col);
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * d.c_in * d.t_short..(b + 1) * d.c_in * d.t_short];
            gemm(d.c_in, rows, d.t_short, w, (rows, 1), &col, (d.t_short, 1), 1.0, dxb, (d.t_short, 1));
        }
        if let Some(dw) = dw.as_deref_mut() {
            let xb = &x[b * d.c_in * d.t_short..(b + 1) * d.c_in * d.t_short];
            gemm(d.c_in, d.t_short, rows, xb, (d.t_short, 1), &col, (1, d.t_short), 1.0, dw, (rows, 1));
        }
    }
    if let Some(db) = db {
        accumulate_bias(dy, d.batch, d.c_out, d.t_long, db);
    }
}

fn accumulate_bias(dy: &[f64], batch: usize, channels: usize, t: usize, db: &mut [f64]) {
    for b in 0..batch {
        for (o, acc) in db.iter_mut().enumerate().take(channels) {
            let start = (b * channels + o) * t;
            *acc += dy[start..start + t].iter().sum::<f64>();
        }
    }
}

/// Per-channel mean and biased variance over batch × time of a `B × C × T` array.
pub(crate) fn channel_moments(x: &[f64], batch: usize, channels: usize, t: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (batch * t) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for c in 0..channels {
        let mut s = 0.0;
        for b in 0..batch {
            let start = (b * channels + c) * t;
            s += x[start..start + t].iter().sum::<f64>();
        }
        let m = s / n;
        let mut q = 0.0;
        for b in 0..batch {
            let start = (b * channels + c) * t;
            q += x[start..start + t].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        }
        mean[c] = m;
        var[c] = q / n;
    }
    (mean, var)
}
