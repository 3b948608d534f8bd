//! Raw compute kernels over planar `[C][H][W]` buffers.

/// Geometry of a square-kernel 2-D convolution with zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn out_len(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// A pointwise stride-1 convolution needs no unfolding.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// `C = alpha * A·B + beta * C` with explicit strides; `C` is row-major `m×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_rs: usize,
    a_cs: usize,
    b: &[f32],
    b_rs: usize,
    b_cs: usize,
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    assert!(a.len() > (m - 1) * a_rs + (k - 1) * a_cs);
    assert!(b.len() > (k - 1) * b_rs + (n - 1) * b_cs);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_rs as isize,
            a_cs as isize,
            b.as_ptr(),
            b_rs as isize,
            b_cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfold `input` into a `[C·k·k, Ho·Wo]` matrix.
pub fn im2col(input: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let mut row = 0;
    for c in 0..g.in_ch {
        let plane = &input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.in_w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Fold a `[C·k·k, Ho·Wo]` matrix back, accumulating into `grad_in`.
pub fn col2im_add(cols: &[f32], g: &ConvGeom, grad_in: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let mut row = 0;
    for c in 0..g.in_ch {
        let plane = &mut grad_in[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            drow[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Forward convolution. Returns the output and the unfolded input (empty for pointwise).
pub fn conv2d_forward(
    input: &[f32],
    weight: &[f32],
    bias: Option<&[f32]>,
    g: &ConvGeom,
    keep_cols: bool,
) -> (Vec<f32>, Vec<f32>) {
    let n = g.out_len();
    let kk = g.patch_len();
    let mut out = vec![0.0; g.out_ch * n];
    if let Some(b) = bias {
        for (o, &bv) in b.iter().enumerate() {
            out[o * n..(o + 1) * n].fill(bv);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    if g.is_pointwise() {
        gemm(g.out_ch, kk, n, weight, kk, 1, input, n, 1, beta, &mut out);
        return (out, Vec::new());
    }
    let mut cols = vec![0.0; kk * n];
    im2col(input, g, &mut cols);
    gemm(g.out_ch, kk, n, weight, kk, 1, &cols, n, 1, beta, &mut out);
    if !keep_cols {
        cols = Vec::new();
    }
    (out, cols)
}

/// Backward convolution: accumulates weight/bias gradients and optionally the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    input: &[f32],
    cols: &[f32],
    weight: &[f32],
    grad_out: &[f32],
    g: &ConvGeom,
    grad_weight: Option<&mut [f32]>,
    grad_bias: Option<&mut [f32]>,
    grad_input: Option<&mut [f32]>,
) {
    let n = g.out_len();
    let kk = g.patch_len();
    let unfolded: &[f32] = if g.is_pointwise() { input } else { cols };
    if let Some(gw) = grad_weight {
        // dW[O, KK] += dY[O, N] · colsᵀ[N, KK]
        gemm(g.out_ch, n, kk, grad_out, n, 1, unfolded, 1, n, 1.0, gw);
    }
    if let Some(gb) = grad_bias {
        for (o, b) in gb.iter_mut().enumerate() {
            *b += grad_out[o * n..(o + 1) * n].iter().sum::<f32>();
        }
    }
    if let Some(gi) = grad_input {
        if g.is_pointwise() {
            // dX[KK, N] += Wᵀ[KK, O] · dY[O, N]
            gemm(kk, g.out_ch, n, weight, 1, kk, grad_out, n, 1, 1.0, gi);
        } else {
            let mut dcols = vec![0.0; kk * n];
            gemm(kk, g.out_ch, n, weight, 1, kk, grad_out, n, 1, 0.0, &mut dcols);
            col2im_add(&dcols, g, gi);
        }
    }
}

/// Bin boundaries of adaptive pooling (floor start, ceil end).
#[inline]
pub fn adaptive_bin(i: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let start = i * in_len / out_len;
    let end = ((i + 1) * in_len).div_ceil(out_len);
    (start, end)
}

pub fn adaptive_avg_pool(input: &[f32], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = adaptive_bin(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_bin(ox, w, ow);
                let mut s = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        s += plane[y * w + x];
                    }
                }
                out[(ch * oh + oy) * ow + ox] = s / ((y1 - y0) * (x1 - x0)) as f32;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn adaptive_avg_pool_backward(
    grad_out: &[f32],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    grad_in: &mut [f32],
) {
    for ch in 0..c {
        for oy in 0..oh {
            let (y0, y1) = adaptive_bin(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_bin(ox, w, ow);
                let g = grad_out[(ch * oh + oy) * ow + ox] / ((y1 - y0) * (x1 - x0)) as f32;
                for y in y0..y1 {
                    for x in x0..x1 {
                        grad_in[(ch * h + y) * w + x] += g;
                    }
                }
            }
        }
    }
}

#[inline]
pub fn nearest_src(i: usize, in_len: usize, out_len: usize) -> usize {
    i * in_len / out_len
}

pub fn nearest_resize(input: &[f32], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            let sy = nearest_src(oy, h, oh);
            for ox in 0..ow {
                let sx = nearest_src(ox, w, ow);
                out[(ch * oh + oy) * ow + ox] = input[(ch * h + sy) * w + sx];
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn nearest_resize_backward(
    grad_out: &[f32],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    grad_in: &mut [f32],
) {
    for ch in 0..c {
        for oy in 0..oh {
            let sy = nearest_src(oy, h, oh);
            for ox in 0..ow {
                let sx = nearest_src(ox, w, ow);
                grad_in[(ch * h + sy) * w + sx] += grad_out[(ch * oh + oy) * ow + ox];
            }
        }
    }
}
