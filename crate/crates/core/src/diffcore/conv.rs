//! Same-size 2-D convolution with optional dilation and kernel mask.
//!
//! `out[b,co,i,j] = bias[co] + sum mask[u,v] * kernel[co,ci,u,v] *
//! in[b,ci, i + d(u-c), j + d(v-c)]` with `c = (k-1)/2` and zero padding.
//! Each batch item is zero-padded once and every live kernel tap becomes one
//! matrix product against a shifted view of the padded planes. Items run
//! through [`exec`](crate::exec) and per-item kernel gradients are summed in
//! batch order.

use super::gemm::{gemm, MatRef};
use super::{Scalar, Tensor};
use crate::error::{invalid, shape_err, Result};
use crate::exec;

#[derive(Clone, Copy)]
struct Geometry {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
    dilation: usize,
}

impl Geometry {
    fn pixels(&self) -> usize {
        self.h * self.w
    }

    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }
}

fn geometry<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    dilation: usize,
    mask: Option<&Tensor<T>>,
) -> Result<Geometry> {
    let (batch, cin, h, w) = input.dims4()?;
    let (cout, kcin, k, k2) = kernel.dims4()?;
    if kcin != cin {
        return Err(shape_err!(
            "kernel expects {} input channels, input has {}",
            kcin,
            cin
        ));
    }
    if k != k2 {
        return Err(shape_err!("kernel must be square, got {}x{}", k, k2));
    }
    if k % 2 == 0 {
        return Err(invalid!("kernel size must be odd, got {}", k));
    }
    if dilation == 0 {
        return Err(invalid!("dilation must be positive"));
    }
    if let Some(m) = mask {
        if m.shape() != [k, k] {
            return Err(shape_err!("mask {:?} does not match kernel {}x{}", m.shape(), k, k));
        }
    }
    Ok(Geometry {
        batch,
        cin,
        cout,
        h,
        w,
        k,
        dilation,
    })
}

fn masked_kernel<T: Scalar>(kernel: &Tensor<T>, mask: Option<&Tensor<T>>) -> Vec<T> {
    match mask {
        None => kernel.data().to_vec(),
        Some(m) => {
            let kk = m.len();
            kernel
                .data()
                .iter()
                .enumerate()
                .map(|(i, &w)| w * m.data()[i % kk])
                .collect()
        }
    }
}

/// Zero-padded copy of one item: `cin` planes of `(h+2p) x (w+2p)` plus `2p`
/// trailing zeros so shifted views of the last plane stay in bounds.
struct Padded<T> {
    data: Vec<T>,
    pad: usize,
    wp: usize,
    plane: usize,
}

impl<T: Scalar> Padded<T> {
    fn new(src: &[T], cin: usize, g: &Geometry) -> Self {
        let pad = g.dilation * (g.k / 2);
        let (hp, wp) = (g.h + 2 * pad, g.w + 2 * pad);
        let plane = hp * wp;
        if pad == 0 {
            return Self {
                data: src[..cin * plane].to_vec(),
                pad,
                wp,
                plane,
            };
        }
        let mut data = vec![T::zero(); cin * plane + 2 * pad];
        for ci in 0..cin {
            for i in 0..g.h {
                let d = ci * plane + (i + pad) * wp + pad;
                let s = (ci * g.h + i) * g.w;
                data[d..d + g.w].copy_from_slice(&src[s..s + g.w]);
            }
        }
        Self {
            data,
            pad,
            wp,
            plane,
        }
    }

    /// `[cin, h*wp]` view of the input shifted by tap `(u, v)`. Columns with
    /// `j >= w` inside each `wp`-wide row are junk and must be ignored.
    fn tap(&self, cin: usize, g: &Geometry, u: usize, v: usize) -> MatRef<'_, T> {
        let off = u * g.dilation * self.wp + v * g.dilation;
        MatRef::strided(&self.data[off..], cin, g.h * self.wp, self.plane, 1)
    }
}

/// Kernel of the adjoint convolution: `[cin, cout, k, k]` with each tap
/// mirrored, so that the input gradient is a plain forward pass.
fn adjoint_kernel<T: Scalar>(weights: &[T], g: &Geometry) -> Vec<T> {
    let kk = g.k * g.k;
    let mut out = Vec::with_capacity(weights.len());
    for ci in 0..g.cin {
        for co in 0..g.cout {
            let base = (co * g.cin + ci) * kk;
            out.extend((0..kk).rev().map(|t| weights[base + t]));
        }
    }
    out
}

/// `dst += conv(item, w)` for one item, `w` being `[g.cout, g.cin, k, k]`.
/// Only taps flagged in `live` contribute.
fn conv_item<T: Scalar>(item: &[T], g: &Geometry, w: &[T], live: &[bool], dst: &mut [T]) {
    let kk = g.k * g.k;
    let padded = Padded::new(item, g.cin, g);
    let direct = padded.pad == 0;
    let mut acc = if direct { Vec::new() } else { vec![T::zero(); g.cout * g.h * padded.wp] };
    for (t, _) in live.iter().enumerate().filter(|(_, &on)| on) {
        let a = MatRef::strided(&w[t..], g.cout, g.cin, g.cin * kk, kk);
        let b = padded.tap(g.cin, g, t / g.k, t % g.k);
        gemm(a, b, T::one(), if direct { &mut *dst } else { &mut acc });
    }
    if !direct {
        let hw = g.pixels();
        for co in 0..g.cout {
            for i in 0..g.h {
                let s = (co * g.h + i) * padded.wp;
                let d = co * hw + i * g.w;
                dst[d..d + g.w]
                    .iter_mut()
                    .zip(&acc[s..s + g.w])
                    .for_each(|(o, &v)| *o = *o + v);
            }
        }
    }
}

fn live_taps<T: Scalar>(k: usize, mask: Option<&Tensor<T>>) -> Vec<bool> {
    match mask {
        None => vec![true; k * k],
        Some(m) => m.data().iter().map(|&v| v != T::zero()).collect(),
    }
}

/// Forward convolution; see the module docs for the exact formula.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    dilation: usize,
    mask: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let g = geometry(input, kernel, dilation, mask)?;
    if bias.shape() != [g.cout] {
        return Err(shape_err!("bias {:?} vs {} output channels", bias.shape(), g.cout));
    }
    let weights = masked_kernel(kernel, mask);
    let live = live_taps(g.k, mask);
    let hw = g.pixels();
    let in_len = g.cin * hw;
    let out_len = g.cout * hw;
    let mut out = vec![T::zero(); g.batch * out_len];
    let src = input.data();
    exec::for_each_chunk_mut(&mut out, out_len, |b, dst| {
        for (co, row) in dst.chunks_mut(hw).enumerate() {
            row.fill(bias.data()[co]);
        }
        conv_item(&src[b * in_len..(b + 1) * in_len], &g, &weights, &live, dst);
    });
    Tensor::new(&[g.batch, g.cout, g.h, g.w], out)
}

/// Gradients produced by [`conv2d_backward`].
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Vector-Jacobian product of [`conv2d`] for an upstream gradient `grad_out`.
///
/// The kernel gradient is masked the same way as the forward kernel, so masked
/// taps never receive gradient.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    dilation: usize,
    mask: Option<&Tensor<T>>,
    grad_out: &Tensor<T>,
    want_input: bool,
) -> Result<ConvGrads<T>> {
    let g = geometry(input, kernel, dilation, mask)?;
    if grad_out.shape() != [g.batch, g.cout, g.h, g.w] {
        return Err(shape_err!("upstream gradient {:?} does not match output", grad_out.shape()));
    }
    let weights = masked_kernel(kernel, mask);
    let live = live_taps(g.k, mask);
    let hw = g.pixels();
    let kk = g.k * g.k;
    let (in_len, out_len, plen) = (g.cin * hw, g.cout * hw, g.patch_len());
    let src = input.data();
    let gsrc = grad_out.data();

    let adjoint = want_input.then(|| adjoint_kernel(&weights, &g));
    let adjoint_live: Vec<bool> = live.iter().rev().copied().collect();
    // The adjoint pass reads `grad_out` with the roles of cin and cout swapped.
    let gt = Geometry {
        cin: g.cout,
        cout: g.cin,
        ..g
    };

    // (kernel partial, bias partial, input grad) per item.
    let parts = exec::map_indexed(g.batch, |b| {
        let item = &src[b * in_len..(b + 1) * in_len];
        let gout = &gsrc[b * out_len..(b + 1) * out_len];

        let padded = Padded::new(item, g.cin, &g);
        // grad_out laid out on the padded row width, zero in the junk columns
        let wp = padded.wp;
        let gwide: Vec<T> = if wp == g.w {
            gout.to_vec()
        } else {
            let mut v = vec![T::zero(); g.cout * g.h * wp];
            for r in 0..g.cout * g.h {
                v[r * wp..r * wp + g.w].copy_from_slice(&gout[r * g.w..(r + 1) * g.w]);
            }
            v
        };
        let gmat = MatRef::row_major(&gwide, g.cout, g.h * wp);
        let mut gk = vec![T::zero(); g.cout * plen];
        let mut tap = vec![T::zero(); g.cout * g.cin];
        for (t, _) in live.iter().enumerate().filter(|(_, &on)| on) {
            let bt = padded.tap(g.cin, &g, t / g.k, t % g.k).t();
            gemm(gmat, bt, T::zero(), &mut tap);
            for (i, &v) in tap.iter().enumerate() {
                gk[i * kk + t] = v;
            }
        }
        let gb: Vec<T> = gout.chunks(hw).map(|r| r.iter().copied().sum()).collect();
        let gin = adjoint.as_ref().map(|adj| {
            let mut gi = vec![T::zero(); in_len];
            conv_item(gout, &gt, adj, &adjoint_live, &mut gi);
            gi
        });
        (gk, gb, gin)
    });

    let mut gk = vec![T::zero(); g.cout * plen];
    let mut gb = vec![T::zero(); g.cout];
    let mut gin = want_input.then(|| Vec::with_capacity(g.batch * in_len));
    for (pk, pb, pi) in parts {
        gk.iter_mut().zip(&pk).for_each(|(a, &v)| *a = *a + v);
        gb.iter_mut().zip(&pb).for_each(|(a, &v)| *a = *a + v);
        if let (Some(acc), Some(pi)) = (gin.as_mut(), pi) {
            acc.extend_from_slice(&pi);
        }
    }
    if let Some(m) = mask {
        let kk = m.len();
        gk.iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = *v * m.data()[i % kk]);
    }
    Ok(ConvGrads {
        input: gin
            .map(|d| Tensor::new(input.shape(), d))
            .transpose()?,
        kernel: Tensor::new(kernel.shape(), gk)?,
        bias: Tensor::new(&[g.cout], gb)?,
    })
}
