// Raw loops over flat row-major buffers. Shapes are validated by the caller.

/// `out[r×c] = a[r×k] · b[k×c]`
pub(crate) fn matmul(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * c..(p + 1) * c]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[r×k] · b[c×k]ᵀ`
pub(crate) fn matmul_bt(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..c {
            let br = &b[j * k..(j + 1) * k];
            out[i * c + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[k×r]ᵀ · b[k×c]`
pub(crate) fn matmul_at(a: &[f64], b: &[f64], k: usize, r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for p in 0..k {
        let br = &b[p * c..(p + 1) * c];
        for i in 0..r {
            let av = a[p * r + i];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out[i * c..(i + 1) * c].iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    /// Output columns `ow` for which `ow*stride + kj - padding` lands inside `0..w`.
    fn valid_cols(&self, kj: usize) -> std::ops::Range<usize> {
        span(self.ow, self.w, self.stride, kj, self.padding)
    }

    fn valid_rows(&self, ki: usize) -> std::ops::Range<usize> {
        span(self.oh, self.h, self.stride, ki, self.padding)
    }
}

fn span(out_len: usize, in_len: usize, stride: usize, k: usize, pad: usize) -> std::ops::Range<usize> {
    // o*stride + k >= pad  and  o*stride + k < in_len + pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if in_len + pad > k { (in_len + pad - k).div_ceil(stride).min(out_len) } else { 0 };
    lo..hi.max(lo)
}

pub(crate) fn conv2d(input: &[f64], kernel: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.f * g.oh * g.ow];
    for n in 0..g.n {
        for f in 0..g.f {
            let obase = (n * g.f + f) * g.oh * g.ow;
            for c in 0..g.c {
                let ibase = (n * g.c + c) * g.h * g.w;
                for ki in 0..g.kh {
                    let rows = g.valid_rows(ki);
                    for kj in 0..g.kw {
                        let wv = kernel[((f * g.c + c) * g.kh + ki) * g.kw + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        let cols = g.valid_cols(kj);
                        for oh in rows.clone() {
                            let ih = oh * g.stride + ki - g.padding;
                            let irow = ibase + ih * g.w;
                            let orow = obase + oh * g.ow;
                            for ow in cols.clone() {
                                let iw = ow * g.stride + kj - g.padding;
                                out[orow + ow] += wv * input[irow + iw];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of a convolution with respect to its input and kernel.
/// Either side can be skipped.
pub(crate) fn conv2d_backward(
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    g: &ConvGeometry,
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut gin = want_input.then(|| vec![0.0; input.len()]);
    let mut gk = want_kernel.then(|| vec![0.0; kernel.len()]);
    for n in 0..g.n {
        for f in 0..g.f {
            let obase = (n * g.f + f) * g.oh * g.ow;
            for c in 0..g.c {
                let ibase = (n * g.c + c) * g.h * g.w;
                for ki in 0..g.kh {
                    let rows = g.valid_rows(ki);
                    for kj in 0..g.kw {
                        let kidx = ((f * g.c + c) * g.kh + ki) * g.kw + kj;
                        let wv = kernel[kidx];
                        let cols = g.valid_cols(kj);
                        let mut acc = 0.0;
                        for oh in rows.clone() {
                            let ih = oh * g.stride + ki - g.padding;
                            let irow = ibase + ih * g.w;
                            let orow = obase + oh * g.ow;
                            for ow in cols.clone() {
                                let iw = ow * g.stride + kj - g.padding;
                                let go = grad_out[orow + ow];
                                acc += go * input[irow + iw];
                                if let Some(gi) = gin.as_mut() {
                                    gi[irow + iw] += go * wv;
                                }
                            }
                        }
                        if let Some(gk) = gk.as_mut() {
                            gk[kidx] += acc;
                        }
                    }
                }
            }
        }
    }
    (gin, gk)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn span_matches_brute_force() {
        for in_len in 1..7 {
            for k in 0..4 {
                for pad in 0..3 {
                    for stride in 1..4 {
                        if k >= in_len + 2 * pad {
                            continue;
                        }
                        let out_len = (in_len + 2 * pad - k - 1) / stride + 1;
                        let brute: Vec<usize> = (0..out_len)
                            .filter(|&o| {
                                let p = (o * stride + k) as isize - pad as isize;
                                p >= 0 && (p as usize) < in_len
                            })
                            .collect();
                        let r = span(out_len, in_len, stride, k, pad);
                        assert_eq!(r.collect::<Vec<_>>(), brute, "in {in_len} k {k} pad {pad} s {stride}");
                    }
                }
            }
        }
    }

    #[test]
    fn transposed_products_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, -1.0, 2.0, 0.5, 1.0]; // 3x2
        let ab = matmul(&a, &b, 2, 3, 2);
        // bt is b transposed (2x3)
        let bt = [1.0, -1.0, 0.5, 0.0, 2.0, 1.0];
        assert_eq!(matmul_bt(&a, &bt, 2, 3, 2), ab);
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]; // 3x2
        assert_eq!(matmul_at(&at, &b, 3, 2, 2), ab);
    }
}
