use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bilinear resize of a `C×H×W` image with corner-aligned sampling: output
/// corners coincide with input corners. Outputs stay within the range of
/// the input.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Contract(format!("target size {out_h}x{out_w} must be positive")));
    }
    let [c, h, w]: [usize; 3] = image
        .shape()
        .try_into()
        .map_err(|_| Error::dim("resize_bilinear", format!("need a C×H×W image, got {:?}", image.shape())))?;
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let ys: Vec<(usize, usize, f64)> = (0..out_h).map(|i| sample_points(i, out_h, h)).collect();
    let xs: Vec<(usize, usize, f64)> = (0..out_w).map(|j| sample_points(j, out_w, w)).collect();
    let src = image.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let (a, b) = (plane[y0 * w + x0], plane[y0 * w + x1]);
                let (cc, d) = (plane[y1 * w + x0], plane[y1 * w + x1]);
                let top = a + fx * (b - a);
                let bottom = cc + fx * (d - cc);
                let v = top + fy * (bottom - top);
                let lo = a.min(b).min(cc).min(d);
                let hi = a.max(b).max(cc).max(d);
                out.push(v.clamp(lo, hi));
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

/// Neighbouring source indices and interpolation fraction for output index `i`.
fn sample_points(i: usize, out_len: usize, in_len: usize) -> (usize, usize, f64) {
    let pos =
        if out_len == 1 { (in_len - 1) as f64 / 2.0 } else { i as f64 * (in_len - 1) as f64 / (out_len - 1) as f64 };
    let lo = (pos.floor() as usize).min(in_len - 1);
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, pos - lo as f64)
}
