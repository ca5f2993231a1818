use super::{Element, Result, Tensor, TensorError};

/// Source sample position and blend weights for one output coordinate,
/// half-pixel centres (align_corners = false), edge-clamped.
#[inline]
fn source_index(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let pos = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (pos.floor() as usize).min(src_len - 1);
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, pos - i0 as f64)
}

/// Bilinear resampling of one row-major `h x w` plane.
pub fn bilinear_resize_plane<E: Element>(
    src: &[E],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<E> {
    assert_eq!(src.len(), h * w, "plane length does not match {h}x{w}");
    if h == out_h && w == out_w {
        return src.to_vec();
    }
    let cols: Vec<_> = (0..out_w).map(|x| source_index(x, w, out_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, ly) = source_index(y, h, out_h);
        let r0 = &src[y0 * w..][..w];
        let r1 = &src[y1 * w..][..w];
        for &(x0, x1, lx) in &cols {
            let top = r0[x0].to_acc() * (1.0 - lx) + r0[x1].to_acc() * lx;
            let bottom = r1[x0].to_acc() * (1.0 - lx) + r1[x1].to_acc() * lx;
            out.push(E::from_acc(top * (1.0 - ly) + bottom * ly));
        }
    }
    out
}

/// Resize a `[H, W]` tensor. Same-size requests return an exact copy.
pub fn bilinear_resize<E: Element>(x: &Tensor<E>, out_h: usize, out_w: usize) -> Result<Tensor<E>> {
    if out_h == 0 || out_w == 0 {
        return Err(TensorError::ZeroExtent(vec![out_h, out_w]));
    }
    if x.shape().len() != 2 {
        return Err(TensorError::InvalidArgument {
            op: "bilinear_resize",
            msg: format!("expected [H, W], got {:?}", x.shape()),
        });
    }
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let data = bilinear_resize_plane(x.data(), h, w, out_h, out_w);
    Ok(Tensor::from_parts(vec![out_h, out_w], data))
}
