//! Slice-level numeric kernels shared by the graph's forward and backward
//! rules. Reductions use a fixed accumulation order so results are
//! reproducible bit for bit.

use super::{Real, Result, TensorError};

/// Kernel geometry of a 3-D convolution over `C × T × H × W` inputs.
/// A 1-D convolution is the special case `kernel = [k, 1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    pub fn conv1d(in_channels: usize, out_channels: usize, kernel: usize, padding: usize) -> Self {
        Self {
            kernel: [kernel, 1, 1],
            stride: [1, 1, 1],
            padding: [padding, 0, 0],
            in_channels,
            out_channels,
        }
    }

    /// Output extent of every axis for an input of extent `input`.
    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = output_len(input[a], self.kernel[a], self.stride[a], self.padding[a])
                .ok_or_else(|| {
                    TensorError::Config(format!(
                        "conv axis {a}: input {} with kernel {} stride {} padding {} has no valid output",
                        input[a], self.kernel[a], self.stride[a], self.padding[a]
                    ))
                })?;
        }
        Ok(out)
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel[0],
            self.kernel[1],
            self.kernel[2],
        ]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }
}

/// `floor((len + 2·pad − kernel) / stride) + 1`, or `None` when that is < 1.
pub fn output_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 {
        return None;
    }
    let padded = len + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[inline]
pub fn dot(a: &[Real], b: &[Real]) -> Real {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0 as Real; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..n {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn axpy(alpha: Real, x: &[Real], y: &mut [Real]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Column block width of the matrix kernels: a block of every row of the
/// right-hand operand stays cache resident while all output rows use it.
const BLOCK: usize = 256;

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc(a: &[Real], b: &[Real], out: &mut [Real], m: usize, k: usize, n: usize) {
    for j0 in (0..n).step_by(BLOCK) {
        let j1 = (j0 + BLOCK).min(n);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n + j0..i * n + j1];
            for (p, &av) in arow.iter().enumerate() {
                if av != 0.0 {
                    axpy(av, &b[p * n + j0..p * n + j1], orow);
                }
            }
        }
    }
}

/// `out[m×k] += g[m×n] · bᵀ` for `b` of shape `k×n`.
pub fn matmul_nt_acc(g: &[Real], b: &[Real], out: &mut [Real], m: usize, n: usize, k: usize) {
    if n <= 4 * BLOCK {
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for p in 0..k {
                out[i * k + p] += dot(grow, &b[p * n..(p + 1) * n]);
            }
        }
        return;
    }
    let wide = 4 * BLOCK;
    let mut acc = vec![0.0 as Real; m * k];
    for j0 in (0..n).step_by(wide) {
        let j1 = (j0 + wide).min(n);
        for i in 0..m {
            let grow = &g[i * n + j0..i * n + j1];
            for p in 0..k {
                acc[i * k + p] += dot(grow, &b[p * n + j0..p * n + j1]);
            }
        }
    }
    axpy(1.0, &acc, out);
}

/// `out[k×n] += aᵀ · g` for `a` of shape `m×k` and `g` of shape `m×n`.
pub fn matmul_tn_acc(a: &[Real], g: &[Real], out: &mut [Real], m: usize, k: usize, n: usize) {
    for j0 in (0..n).step_by(BLOCK) {
        let j1 = (j0 + BLOCK).min(n);
        for i in 0..m {
            let grow = &g[i * n + j0..i * n + j1];
            for p in 0..k {
                let av = a[i * k + p];
                if av != 0.0 {
                    axpy(av, grow, &mut out[p * n + j0..p * n + j1]);
                }
            }
        }
    }
}

/// Unfolds a `C × T × H × W` input into a `(C·kt·kh·kw) × (T'·H'·W')`
/// patch matrix.
pub fn im2col(
    input: &[Real],
    dims: [usize; 3],
    spec: &ConvSpec,
    out_dims: [usize; 3],
) -> Vec<Real> {
    let [t, h, w] = dims;
    let [ot, oh, ow] = out_dims;
    let [kt, kh, kw] = spec.kernel;
    let [st, sh, sw] = spec.stride;
    let [pt, ph, pw] = spec.padding;
    let p = ot * oh * ow;
    let mut cols = vec![0.0; spec.patch_len() * p];
    let mut row = 0;
    for c in 0..spec.in_channels {
        let chan = &input[c * t * h * w..(c + 1) * t * h * w];
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for it in 0..ot {
                        let ti = (it * st + dt) as isize - pt as isize;
                        if ti < 0 || ti >= t as isize {
                            continue;
                        }
                        for ih in 0..oh {
                            let hi = (ih * sh + dh) as isize - ph as isize;
                            if hi < 0 || hi >= h as isize {
                                continue;
                            }
                            let src = &chan[(ti as usize * h + hi as usize) * w..][..w];
                            let base = (it * oh + ih) * ow;
                            for iw in 0..ow {
                                let wi = (iw * sw + dw) as isize - pw as isize;
                                if wi >= 0 && wi < w as isize {
                                    dst[base + iw] = src[wi as usize];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto the input.
pub fn col2im_acc(
    cols: &[Real],
    dims: [usize; 3],
    spec: &ConvSpec,
    out_dims: [usize; 3],
    grad_in: &mut [Real],
) {
    let [t, h, w] = dims;
    let [ot, oh, ow] = out_dims;
    let [kt, kh, kw] = spec.kernel;
    let [st, sh, sw] = spec.stride;
    let [pt, ph, pw] = spec.padding;
    let p = ot * oh * ow;
    let mut row = 0;
    for c in 0..spec.in_channels {
        let chan = &mut grad_in[c * t * h * w..(c + 1) * t * h * w];
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let src = &cols[row * p..(row + 1) * p];
                    for it in 0..ot {
                        let ti = (it * st + dt) as isize - pt as isize;
                        if ti < 0 || ti >= t as isize {
                            continue;
                        }
                        for ih in 0..oh {
                            let hi = (ih * sh + dh) as isize - ph as isize;
                            if hi < 0 || hi >= h as isize {
                                continue;
                            }
                            let dst = &mut chan[(ti as usize * h + hi as usize) * w..][..w];
                            let base = (it * oh + ih) * ow;
                            for iw in 0..ow {
                                let wi = (iw * sw + dw) as isize - pw as isize;
                                if wi >= 0 && wi < w as isize {
                                    dst[wi as usize] += src[base + iw];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Cross-correlation of a `C_in × T × H × W` input with `weight`
/// (`C_out × C_in × kt × kh × kw`); returns the `C_out × T'·H'·W'` output.
pub fn conv3d_forward(
    input: &[Real],
    dims: [usize; 3],
    weight: &[Real],
    bias: Option<&[Real]>,
    spec: &ConvSpec,
    out_dims: [usize; 3],
) -> Vec<Real> {
    let cols = im2col(input, dims, spec, out_dims);
    conv_from_cols(&cols, weight, bias, spec, out_dims)
}

/// The convolution as a product with an already unfolded input.
pub fn conv_from_cols(
    cols: &[Real],
    weight: &[Real],
    bias: Option<&[Real]>,
    spec: &ConvSpec,
    out_dims: [usize; 3],
) -> Vec<Real> {
    let p: usize = out_dims.iter().product();
    let mut out = vec![0.0; spec.out_channels * p];
    if let Some(b) = bias {
        for (o, &bv) in out.chunks_mut(p).zip(b) {
            o.fill(bv);
        }
    }
    matmul_acc(
        weight,
        cols,
        &mut out,
        spec.out_channels,
        spec.patch_len(),
        p,
    );
    out
}

/// Max pooling without padding. Returns the pooled values and, per output,
/// the flat input index of the first maximal element.
pub fn maxpool3d_forward(
    input: &[Real],
    channels: usize,
    dims: [usize; 3],
    window: [usize; 3],
    stride: [usize; 3],
    out_dims: [usize; 3],
) -> (Vec<Real>, Vec<usize>) {
    let [t, h, w] = dims;
    let [ot, oh, ow] = out_dims;
    let n = channels * ot * oh * ow;
    let mut out = Vec::with_capacity(n);
    let mut arg = Vec::with_capacity(n);
    for c in 0..channels {
        let base = c * t * h * w;
        for it in 0..ot {
            for ih in 0..oh {
                for iw in 0..ow {
                    let mut best = Real::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for dt in 0..window[0] {
                        let ti = it * stride[0] + dt;
                        for dh in 0..window[1] {
                            let hi = ih * stride[1] + dh;
                            for dw in 0..window[2] {
                                let wi = iw * stride[2] + dw;
                                let idx = base + (ti * h + hi) * w + wi;
                                let v = input[idx];
                                if best_idx == usize::MAX || v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_idx);
                }
            }
        }
    }
    (out, arg)
}

#[inline]
pub fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of each `cols`-long row, in place.
pub fn softmax_rows(data: &mut [Real], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_len_matches_closed_form() {
        assert_eq!(output_len(112, 3, 2, 0), Some(55));
        assert_eq!(output_len(55, 2, 2, 0), Some(27));
        assert_eq!(output_len(27, 3, 2, 0), Some(13));
        assert_eq!(output_len(13, 2, 2, 0), Some(6));
        assert_eq!(output_len(6, 3, 1, 0), Some(4));
        assert_eq!(output_len(4, 2, 2, 0), Some(2));
        assert_eq!(output_len(2, 3, 1, 0), None);
        for t in 1..60 {
            assert_eq!(output_len(t, 5, 1, 2), Some(t));
        }
    }

    #[test]
    fn dot_handles_tails() {
        let a: Vec<Real> = (1..=7).map(|x| x as Real).collect();
        assert_eq!(dot(&a, &a), 140.0);
    }

    #[test]
    fn softmax_is_stable() {
        let mut v = vec![1000.0, 1000.0];
        softmax_rows(&mut v, 2);
        assert_eq!(v, vec![0.5, 0.5]);
    }
}
