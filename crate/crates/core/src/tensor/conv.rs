use serde::{Deserialize, Serialize};

use super::tape::Op;
use super::{Element, Result, Tape, Tensor, TensorError, Var};

/// Stride, zero padding, dilation and channel grouping of a 2-D
/// cross-correlation. `groups == channels` is the depthwise case.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    #[serde(default = "one")]
    pub dilation: usize,
    pub groups: usize,
}

fn one() -> usize {
    1
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            dilation: 1,
            groups,
        }
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }
}

#[derive(Clone, Copy, Debug)]
struct Dims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    cin_g: usize,
    cout_g: usize,
}

fn dims(input: &[usize], kernel: &[usize], g: ConvGeometry) -> Result<Dims> {
    let mismatch = |msg: String| TensorError::InvalidArgument {
        op: "conv2d",
        msg: format!("{msg} (input {input:?}, kernel {kernel:?}, {g:?})"),
    };
    if input.len() != 4 || kernel.len() != 4 {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            left: input.to_vec(),
            right: kernel.to_vec(),
        });
    }
    if g.stride == 0 || g.dilation == 0 || g.groups == 0 {
        return Err(mismatch("stride, dilation and groups must be positive".into()));
    }
    let [n, cin, h, w] = [input[0], input[1], input[2], input[3]];
    let [cout, kc, kh, kw] = [kernel[0], kernel[1], kernel[2], kernel[3]];
    if cin % g.groups != 0 || cout % g.groups != 0 {
        return Err(mismatch(format!("channels not divisible by {} groups", g.groups)));
    }
    if kc != cin / g.groups {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            left: input.to_vec(),
            right: kernel.to_vec(),
        });
    }
    let ext_h = g.dilation * (kh - 1) + 1;
    let ext_w = g.dilation * (kw - 1) + 1;
    if h + 2 * g.padding < ext_h || w + 2 * g.padding < ext_w {
        return Err(mismatch("padded input smaller than kernel extent".into()));
    }
    Ok(Dims {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        oh: (h + 2 * g.padding - ext_h) / g.stride + 1,
        ow: (w + 2 * g.padding - ext_w) / g.stride + 1,
        cin_g: kc,
        cout_g: cout / g.groups,
    })
}

/// Output indices `o` in `[lo, hi)` with `0 <= o*stride + offset < extent`.
#[inline]
fn valid_range(offset: isize, stride: usize, extent: usize, out: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let last = extent as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = ((last / s) + 1).min(out as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

impl<E: Element> Tape<E> {
    /// Cross-correlation of `input [N,Cin,H,W]` with `kernel [Cout,Cin/groups,KH,KW]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, geom: ConvGeometry) -> Result<Var> {
        let out = conv2d_forward(self.value(input), self.value(kernel), geom)?;
        self.push(out, Op::Conv2d { input, kernel, geom })
    }
}

/// Tape-free forward pass.
pub(crate) fn conv2d_forward<E: Element>(
    x: &Tensor<E>,
    k: &Tensor<E>,
    geom: ConvGeometry,
) -> Result<Tensor<E>> {
    let d = dims(x.shape(), k.shape(), geom)?;
    let (s, dil, pad) = (geom.stride, geom.dilation as isize, geom.padding as isize);
    let xin = x.data();
    let kern = k.data();
    let plane_in = d.h * d.w;
    let plane_out = d.oh * d.ow;
    let mut out = Vec::with_capacity(d.n * d.cout * plane_out);
    let mut acc = vec![0.0f64; plane_out];
    for n in 0..d.n {
        for co in 0..d.cout {
            let g = co / d.cout_g;
            acc.iter_mut().for_each(|a| *a = 0.0);
            for cil in 0..d.cin_g {
                let ci = g * d.cin_g + cil;
                let src = &xin[(n * d.cin + ci) * plane_in..][..plane_in];
                for kh in 0..d.kh {
                    let off_h = kh as isize * dil - pad;
                    let (oh_lo, oh_hi) = valid_range(off_h, s, d.h, d.oh);
                    for kw in 0..d.kw {
                        let off_w = kw as isize * dil - pad;
                        let (ow_lo, ow_hi) = valid_range(off_w, s, d.w, d.ow);
                        let wv = kern[((co * d.cin_g + cil) * d.kh + kh) * d.kw + kw].to_acc();
                        for oh in oh_lo..oh_hi {
                            let ih = (oh * s) as isize + off_h;
                            let row = &src[ih as usize * d.w..][..d.w];
                            let dst = &mut acc[oh * d.ow..][..d.ow];
                            if s == 1 {
                                let base = (ow_lo as isize + off_w) as usize;
                                let len = ow_hi - ow_lo;
                                for (a, v) in dst[ow_lo..ow_hi].iter_mut().zip(&row[base..base + len]) {
                                    *a += wv * v.to_acc();
                                }
                            } else {
                                for (ow, a) in dst.iter_mut().enumerate().take(ow_hi).skip(ow_lo) {
                                    let iw = ((ow * s) as isize + off_w) as usize;
                                    *a += wv * row[iw].to_acc();
                                }
                            }
                        }
                    }
                }
            }
            out.extend(acc.iter().map(|&a| E::from_acc(a)));
        }
    }
    Ok(Tensor::from_parts(vec![d.n, d.cout, d.oh, d.ow], out))
}

pub(super) fn conv2d_backward<E: Element>(
    tape: &Tape<E>,
    input: Var,
    kernel: Var,
    geom: ConvGeometry,
    up: &[E],
) -> Vec<(Var, Vec<E>)> {
    let x = tape.value(input);
    let k = tape.value(kernel);
    let d = dims(x.shape(), k.shape(), geom).expect("shapes validated in forward");
    let (s, dil, pad) = (geom.stride, geom.dilation as isize, geom.padding as isize);
    let want_x = tape.wants(input);
    let want_k = tape.wants(kernel);
    let xin = x.data();
    let kern = k.data();
    let plane_in = d.h * d.w;
    let plane_out = d.oh * d.ow;
    let mut gx = if want_x { vec![0.0f64; xin.len()] } else { Vec::new() };
    let mut gk = if want_k { vec![0.0f64; kern.len()] } else { Vec::new() };
    for n in 0..d.n {
        for co in 0..d.cout {
            let g = co / d.cout_g;
            let gout = &up[(n * d.cout + co) * plane_out..][..plane_out];
            for cil in 0..d.cin_g {
                let ci = g * d.cin_g + cil;
                let xbase = (n * d.cin + ci) * plane_in;
                let src = &xin[xbase..xbase + plane_in];
                for kh in 0..d.kh {
                    let off_h = kh as isize * dil - pad;
                    let (oh_lo, oh_hi) = valid_range(off_h, s, d.h, d.oh);
                    for kw in 0..d.kw {
                        let off_w = kw as isize * dil - pad;
                        let (ow_lo, ow_hi) = valid_range(off_w, s, d.w, d.ow);
                        let kidx = ((co * d.cin_g + cil) * d.kh + kh) * d.kw + kw;
                        let wv = kern[kidx].to_acc();
                        let mut wsum = 0.0f64;
                        for oh in oh_lo..oh_hi {
                            let ih = ((oh * s) as isize + off_h) as usize;
                            let grow = &gout[oh * d.ow..][..d.ow];
                            for ow in ow_lo..ow_hi {
                                let iw = ((ow * s) as isize + off_w) as usize;
                                let u = grow[ow].to_acc();
                                if want_k {
                                    wsum += u * src[ih * d.w + iw].to_acc();
                                }
                                if want_x {
                                    gx[xbase + ih * d.w + iw] += wv * u;
                                }
                            }
                        }
                        if want_k {
                            gk[kidx] += wsum;
                        }
                    }
                }
            }
        }
    }
    let mut out = Vec::with_capacity(2);
    if want_x {
        out.push((input, gx.into_iter().map(E::from_acc).collect()));
    }
    if want_k {
        out.push((kernel, gk.into_iter().map(E::from_acc).collect()));
    }
    out
}
