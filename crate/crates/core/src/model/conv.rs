//! Same-padding 2D convolution over channel-major planes, lowered to dense
//! matrix products via im2col.

use matrixmultiply::dgemm;

use super::LayerShape;

/// Valid output range along one axis for kernel offset `d`.
#[inline]
fn span(d: isize, n: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).min(n as isize).max(0) as usize;
    (lo, hi)
}

/// Rows are `(channel, ky, kx)`, columns are output pixels.
fn im2col(input: &[f64], channels: usize, k: usize, h: usize, w: usize, cols: &mut [f64]) {
    let plane = h * w;
    let pad = (k / 2) as isize;
    cols.fill(0.0);
    for i in 0..channels {
        let src = &input[i * plane..(i + 1) * plane];
        for ky in 0..k {
            let dy = ky as isize - pad;
            let (y0, y1) = span(dy, h);
            for kx in 0..k {
                let dx = kx as isize - pad;
                let (x0, x1) = span(dx, w);
                let row = &mut cols[((i * k + ky) * k + kx) * plane..][..plane];
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    row[y * w + x0..y * w + x1].copy_from_slice(&src[sy * w + sx0..sy * w + sx0 + (x1 - x0)]);
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], channels: usize, k: usize, h: usize, w: usize, out: &mut [f64]) {
    let plane = h * w;
    let pad = (k / 2) as isize;
    for i in 0..channels {
        let dst = &mut out[i * plane..(i + 1) * plane];
        for ky in 0..k {
            let dy = ky as isize - pad;
            let (y0, y1) = span(dy, h);
            for kx in 0..k {
                let dx = kx as isize - pad;
                let (x0, x1) = span(dx, w);
                let row = &cols[((i * k + ky) * k + kx) * plane..][..plane];
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    for (d, s) in dst[sy * w + sx0..sy * w + sx0 + (x1 - x0)]
                        .iter_mut()
                        .zip(&row[y * w + x0..y * w + x1])
                    {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// `c (m x n) = alpha * a (m x k) * b (k x n) + beta * c`, with explicit
/// row/column strides for `a` and `b`; `c` is row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: usize, csa: usize, b: &[f64], rsb: usize, csb: usize, beta: f64, c: &mut [f64]) {
    assert!(c.len() >= m * n);
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        dgemm(
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
            n as isize,
            1,
        );
    }
}

pub(super) fn forward(layer: &LayerShape, params: &[f64], input: &[f64], out: &mut [f64], h: usize, w: usize) {
    let plane = h * w;
    let k = layer.kernel;
    let rows = layer.in_channels * k * k;
    let mut cols = vec![0.0; rows * plane];
    im2col(input, layer.in_channels, k, h, w, &mut cols);
    let weights = &params[layer.weight_offset..layer.weight_offset + layer.out_channels * rows];
    let bias = &params[layer.bias_offset..layer.bias_offset + layer.out_channels];
    for (o, &b) in bias.iter().enumerate() {
        out[o * plane..(o + 1) * plane].fill(b);
    }
    gemm(layer.out_channels, rows, plane, weights, rows, 1, &cols, plane, 1, 1.0, out);
}

/// Accumulates weight and bias gradients into `grad` and, when requested,
/// adds the gradient with respect to the layer input into `dinput`.
#[allow(clippy::too_many_arguments)]
pub(super) fn backward(
    layer: &LayerShape,
    params: &[f64],
    input: &[f64],
    dout: &[f64],
    grad: &mut [f64],
    dinput: Option<&mut [f64]>,
    h: usize,
    w: usize,
) {
    let plane = h * w;
    let k = layer.kernel;
    let rows = layer.in_channels * k * k;
    let out_ch = layer.out_channels;
    let mut cols = vec![0.0; rows * plane];
    im2col(input, layer.in_channels, k, h, w, &mut cols);

    for o in 0..out_ch {
        grad[layer.bias_offset + o] += dout[o * plane..(o + 1) * plane].iter().sum::<f64>();
    }
    let wgrad = &mut grad[layer.weight_offset..layer.weight_offset + out_ch * rows];
    // dW = dOut · colsᵀ
    gemm(out_ch, plane, rows, dout, plane, 1, &cols, 1, plane, 1.0, wgrad);

    if let Some(dinput) = dinput {
        let weights = &params[layer.weight_offset..layer.weight_offset + out_ch * rows];
        // dCols = Wᵀ · dOut
        gemm(rows, out_ch, plane, weights, 1, rows, dout, plane, 1, 0.0, &mut cols);
        col2im_add(&cols, layer.in_channels, k, h, w, dinput);
    }
}
