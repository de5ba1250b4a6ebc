use rayon::prelude::*;

use super::tape::BackwardCtx;
use super::{Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Stride, zero padding and dilation of a cubic 3-d convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dOpts {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv3dOpts {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl Conv3dOpts {
    /// Stride 1 with the padding that keeps spatial extents unchanged.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    pub fn out_extent(&self, n: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = n + 2 * self.padding;
        (padded >= span && self.stride > 0).then(|| (padded - span) / self.stride + 1)
    }
}

/// Output indices `o` in `[lo, hi)` for which `o * s + off` lies in `[0, n_in)`.
#[inline]
fn valid(n_in: usize, n_out: usize, s: usize, off: isize) -> (usize, usize) {
    let s = s as isize;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let lim = n_in as isize - off;
    let hi = if lim <= 0 {
        0
    } else {
        ((lim + s - 1) / s).min(n_out as isize)
    };
    (lo as usize, hi.max(lo) as usize)
}

#[derive(Clone, Copy)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    cout: usize,
    k: usize,
    input: [usize; 3],
    output: [usize; 3],
    opts: Conv3dOpts,
}

impl ConvGeom {
    fn in_vol(&self) -> usize {
        self.input.iter().product()
    }
    fn out_vol(&self) -> usize {
        self.output.iter().product()
    }
    fn taps(&self) -> usize {
        self.k * self.k * self.k
    }
    fn offset(&self, tap: usize) -> isize {
        (tap * self.opts.dilation) as isize - self.opts.padding as isize
    }
}

/// Calls `f(out_row_start, in_row_start, ow_lo, ow_hi, iw_of_lo)` for every
/// valid (od, oh) row of one kernel tap.
#[inline]
fn for_each_row(g: &ConvGeom, kd: usize, kh: usize, kw: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    let [din, hin, win] = g.input;
    let [dout, hout, wout] = g.output;
    let s = g.opts.stride;
    let (offd, offh, offw) = (g.offset(kd), g.offset(kh), g.offset(kw));
    let (dlo, dhi) = valid(din, dout, s, offd);
    let (hlo, hhi) = valid(hin, hout, s, offh);
    let (wlo, whi) = valid(win, wout, s, offw);
    if wlo >= whi {
        return;
    }
    let iw0 = (wlo as isize * s as isize + offw) as usize;
    for od in dlo..dhi {
        let id = (od as isize * s as isize + offd) as usize;
        for oh in hlo..hhi {
            let ih = (oh as isize * s as isize + offh) as usize;
            f((od * hout + oh) * wout, (id * hin + ih) * win, wlo, whi, iw0);
        }
    }
}

fn conv_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (iv, ov, taps, k, s) = (g.in_vol(), g.out_vol(), g.taps(), g.k, g.opts.stride);
    let mut out = vec![T::zero(); g.batch * g.cout * ov];
    out.par_chunks_mut(ov).enumerate().for_each(|(bc, chunk)| {
        let (b, co) = (bc / g.cout, bc % g.cout);
        chunk.fill(bias.map_or(T::zero(), |bs| bs[co]));
        for ci in 0..g.cin {
            let xin = &x[(b * g.cin + ci) * iv..][..iv];
            let wk = &w[(co * g.cin + ci) * taps..][..taps];
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let wv = wk[(kd * k + kh) * k + kw];
                        for_each_row(g, kd, kh, kw, |orow, irow, lo, hi, iw0| {
                            let out = &mut chunk[orow + lo..orow + hi];
                            if s == 1 {
                                let inp = &xin[irow + iw0..irow + iw0 + (hi - lo)];
                                for (o, i) in out.iter_mut().zip(inp) {
                                    *o += wv * *i;
                                }
                            } else {
                                for (j, o) in out.iter_mut().enumerate() {
                                    *o += wv * xin[irow + iw0 + j * s];
                                }
                            }
                        });
                    }
                }
            }
        }
    });
    out
}

fn conv_backward_input<T: Scalar>(g: &ConvGeom, gout: &[T], w: &[T]) -> Vec<T> {
    let (iv, ov, taps, k, s) = (g.in_vol(), g.out_vol(), g.taps(), g.k, g.opts.stride);
    let mut gx = vec![T::zero(); g.batch * g.cin * iv];
    gx.par_chunks_mut(iv).enumerate().for_each(|(bc, chunk)| {
        let (b, ci) = (bc / g.cin, bc % g.cin);
        for co in 0..g.cout {
            let go = &gout[(b * g.cout + co) * ov..][..ov];
            let wk = &w[(co * g.cin + ci) * taps..][..taps];
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let wv = wk[(kd * k + kh) * k + kw];
                        for_each_row(g, kd, kh, kw, |orow, irow, lo, hi, iw0| {
                            let src = &go[orow + lo..orow + hi];
                            if s == 1 {
                                let dst = &mut chunk[irow + iw0..irow + iw0 + (hi - lo)];
                                for (d, o) in dst.iter_mut().zip(src) {
                                    *d += wv * *o;
                                }
                            } else {
                                for (j, o) in src.iter().enumerate() {
                                    chunk[irow + iw0 + j * s] += wv * *o;
                                }
                            }
                        });
                    }
                }
            }
        }
    });
    gx
}

fn conv_backward_weight<T: Scalar>(g: &ConvGeom, gout: &[T], x: &[T]) -> Vec<T> {
    let (iv, ov, taps, k, s) = (g.in_vol(), g.out_vol(), g.taps(), g.k, g.opts.stride);
    let mut gw = vec![T::zero(); g.cout * g.cin * taps];
    gw.par_chunks_mut(taps).enumerate().for_each(|(oc, chunk)| {
        let (co, ci) = (oc / g.cin, oc % g.cin);
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let mut acc = T::zero();
                    for b in 0..g.batch {
                        let go = &gout[(b * g.cout + co) * ov..][..ov];
                        let xin = &x[(b * g.cin + ci) * iv..][..iv];
                        for_each_row(g, kd, kh, kw, |orow, irow, lo, hi, iw0| {
                            let src = &go[orow + lo..orow + hi];
                            if s == 1 {
                                let inp = &xin[irow + iw0..irow + iw0 + (hi - lo)];
                                for (o, i) in src.iter().zip(inp) {
                                    acc += *o * *i;
                                }
                            } else {
                                for (j, o) in src.iter().enumerate() {
                                    acc += *o * xin[irow + iw0 + j * s];
                                }
                            }
                        });
                    }
                    chunk[(kd * k + kh) * k + kw] = acc;
                }
            }
        }
    });
    gw
}

/// Sums a `[B, C, vol]` gradient over batch and voxels, per channel.
pub(crate) fn channel_sums<T: Scalar>(g: &[T], batch: usize, channels: usize, vol: usize) -> Vec<T> {
    (0..channels)
        .map(|c| {
            let mut acc = T::zero();
            for b in 0..batch {
                for v in &g[(b * channels + c) * vol..][..vol] {
                    acc += *v;
                }
            }
            acc
        })
        .collect()
}

fn check_bias<T: Scalar>(bias: Option<&Var<'_, T>>, cout: usize, op: &str) -> Result<()> {
    if let Some(b) = bias {
        let shape = b.shape();
        if shape != [cout] {
            return Err(Error::Shape(format!(
                "{op}: bias shape {shape:?}, expected [{cout}]"
            )));
        }
    }
    Ok(())
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Cubic 3-d cross-correlation with zero padding.
    ///
    /// `weight` is `[Cout, Cin, k, k, k]`; output extent per axis is
    /// `floor((n + 2p - dil*(k-1) - 1) / stride) + 1`.
    pub fn conv3d(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>, opts: Conv3dOpts) -> Result<Self> {
        self.same_tape(&weight)?;
        let xv = self.value();
        let wv = weight.value();
        let [batch, cin, d, h, w] = xv.dims5("conv3d input")?;
        let [cout, wcin, k0, k1, k2] = wv.dims5("conv3d weight")?;
        if wcin != cin {
            return Err(Error::Shape(format!(
                "conv3d: weight expects {wcin} input channels, input has {cin}"
            )));
        }
        if k0 != k1 || k1 != k2 || k0 == 0 {
            return Err(Error::Shape(format!(
                "conv3d: kernel must be cubic, got {k0}x{k1}x{k2}"
            )));
        }
        if opts.stride == 0 || opts.dilation == 0 {
            return Err(Error::InvalidArgument(
                "conv3d: stride and dilation must be positive".into(),
            ));
        }
        check_bias(bias.as_ref(), cout, "conv3d")?;
        let k = k0;
        let mut output = [0; 3];
        for (o, n) in output.iter_mut().zip([d, h, w]) {
            *o = opts.out_extent(n, k).ok_or_else(|| {
                Error::Shape(format!(
                    "conv3d: kernel {k} (dilation {}) larger than padded extent {}",
                    opts.dilation,
                    n + 2 * opts.padding
                ))
            })?;
        }
        let geom = ConvGeom {
            batch,
            cin,
            cout,
            k,
            input: [d, h, w],
            output,
            opts,
        };
        let bv = bias.map(|b| b.value());
        let out = conv_forward(&geom, xv.data(), wv.data(), bv.as_ref().map(|b| b.data()));
        let out = Tensor::new(vec![batch, cout, output[0], output[1], output[2]], out)?;

        let mut parents = vec![self, weight];
        parents.extend(bias);
        self.tape.push(
            "conv3d",
            out,
            &parents,
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let x = ctx.inputs[0].data();
                let w = ctx.inputs[1].data();
                let mut grads = vec![
                    ctx.needs[0].then(|| conv_backward_input(&geom, ctx.grad, w)),
                    ctx.needs[1].then(|| conv_backward_weight(&geom, ctx.grad, x)),
                ];
                if ctx.inputs.len() == 3 {
                    grads.push(
                        ctx.needs[2]
                            .then(|| channel_sums(ctx.grad, geom.batch, geom.cout, geom.out_vol())),
                    );
                }
                grads
            }),
        )
    }

    /// Transposed convolution whose kernel extent equals its stride, so output
    /// tiles never overlap and every spatial extent is multiplied by `stride`.
    ///
    /// `weight` is `[Cin, Cout, s, s, s]`.
    pub fn conv_transpose3d(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>, stride: usize) -> Result<Self> {
        self.same_tape(&weight)?;
        let xv = self.value();
        let wv = weight.value();
        let [batch, cin, d, h, w] = xv.dims5("conv_transpose3d input")?;
        let [wcin, cout, k0, k1, k2] = wv.dims5("conv_transpose3d weight")?;
        if [batch, cin, d, h, w].contains(&0) {
            return Err(Error::Shape(format!(
                "conv_transpose3d: non-positive extent in {:?}",
                xv.shape()
            )));
        }
        if wcin != cin {
            return Err(Error::Shape(format!(
                "conv_transpose3d: weight expects {wcin} input channels, input has {cin}"
            )));
        }
        if stride == 0 || [k0, k1, k2] != [stride; 3] {
            return Err(Error::Shape(format!(
                "conv_transpose3d: kernel {k0}x{k1}x{k2} must equal stride {stride} on every axis"
            )));
        }
        check_bias(bias.as_ref(), cout, "conv_transpose3d")?;
        let geom = TransposeGeom {
            batch,
            cin,
            cout,
            s: stride,
            input: [d, h, w],
        };
        let bv = bias.map(|b| b.value());
        let out = transpose_forward(&geom, xv.data(), wv.data(), bv.as_ref().map(|b| b.data()));
        let out = Tensor::new(
            vec![batch, cout, d * stride, h * stride, w * stride],
            out,
        )?;
        let mut parents = vec![self, weight];
        parents.extend(bias);
        self.tape.push(
            "conv_transpose3d",
            out,
            &parents,
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let x = ctx.inputs[0].data();
                let w = ctx.inputs[1].data();
                let mut grads = vec![
                    ctx.needs[0].then(|| transpose_backward_input(&geom, ctx.grad, w)),
                    ctx.needs[1].then(|| transpose_backward_weight(&geom, ctx.grad, x)),
                ];
                if ctx.inputs.len() == 3 {
                    grads.push(
                        ctx.needs[2]
                            .then(|| channel_sums(ctx.grad, geom.batch, geom.cout, geom.out_vol())),
                    );
                }
                grads
            }),
        )
    }
}

#[derive(Clone, Copy)]
struct TransposeGeom {
    batch: usize,
    cin: usize,
    cout: usize,
    s: usize,
    input: [usize; 3],
}

impl TransposeGeom {
    fn in_vol(&self) -> usize {
        self.input.iter().product()
    }
    fn out_vol(&self) -> usize {
        self.in_vol() * self.s * self.s * self.s
    }

    /// Calls `f(in_row, out_row, tap_base)` for every input row and every
    /// (a, b) kernel offset; `out_row` indexes the first output voxel the row
    /// scatters into, with consecutive input voxels `s` apart.
    #[inline]
    fn rows(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [d, h, w] = self.input;
        let s = self.s;
        let (ho, wo) = (h * s, w * s);
        for i in 0..d {
            for j in 0..h {
                let in_row = (i * h + j) * w;
                for a in 0..s {
                    for bb in 0..s {
                        let out_row = ((i * s + a) * ho + j * s + bb) * wo;
                        f(in_row, out_row, (a * s + bb) * s);
                    }
                }
            }
        }
    }
}

fn transpose_forward<T: Scalar>(g: &TransposeGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (iv, ov, s) = (g.in_vol(), g.out_vol(), g.s);
    let taps = s * s * s;
    let wlen = g.input[2];
    let mut out = vec![T::zero(); g.batch * g.cout * ov];
    out.par_chunks_mut(ov).enumerate().for_each(|(bc, chunk)| {
        let (b, co) = (bc / g.cout, bc % g.cout);
        chunk.fill(bias.map_or(T::zero(), |bs| bs[co]));
        for ci in 0..g.cin {
            let xin = &x[(b * g.cin + ci) * iv..][..iv];
            let wk = &w[(ci * g.cout + co) * taps..][..taps];
            g.rows(|in_row, out_row, tap| {
                let src = &xin[in_row..in_row + wlen];
                let dst = &mut chunk[out_row..out_row + wlen * s];
                for (l, xv) in src.iter().enumerate() {
                    for c in 0..s {
                        dst[l * s + c] += *xv * wk[tap + c];
                    }
                }
            });
        }
    });
    out
}

fn transpose_backward_input<T: Scalar>(g: &TransposeGeom, gout: &[T], w: &[T]) -> Vec<T> {
    let (iv, ov, s) = (g.in_vol(), g.out_vol(), g.s);
    let taps = s * s * s;
    let wlen = g.input[2];
    let mut gx = vec![T::zero(); g.batch * g.cin * iv];
    gx.par_chunks_mut(iv).enumerate().for_each(|(bc, chunk)| {
        let (b, ci) = (bc / g.cin, bc % g.cin);
        for co in 0..g.cout {
            let go = &gout[(b * g.cout + co) * ov..][..ov];
            let wk = &w[(ci * g.cout + co) * taps..][..taps];
            g.rows(|in_row, out_row, tap| {
                let src = &go[out_row..out_row + wlen * s];
                let dst = &mut chunk[in_row..in_row + wlen];
                for (l, d) in dst.iter_mut().enumerate() {
                    for c in 0..s {
                        *d += src[l * s + c] * wk[tap + c];
                    }
                }
            });
        }
    });
    gx
}

fn transpose_backward_weight<T: Scalar>(g: &TransposeGeom, gout: &[T], x: &[T]) -> Vec<T> {
    let (iv, ov, s) = (g.in_vol(), g.out_vol(), g.s);
    let taps = s * s * s;
    let wlen = g.input[2];
    let mut gw = vec![T::zero(); g.cin * g.cout * taps];
    gw.par_chunks_mut(taps).enumerate().for_each(|(io, chunk)| {
        let (ci, co) = (io / g.cout, io % g.cout);
        for b in 0..g.batch {
            let go = &gout[(b * g.cout + co) * ov..][..ov];
            let xin = &x[(b * g.cin + ci) * iv..][..iv];
            g.rows(|in_row, out_row, tap| {
                let src = &xin[in_row..in_row + wlen];
                let gsrc = &go[out_row..out_row + wlen * s];
                for c in 0..s {
                    let mut acc = T::zero();
                    for (l, xv) in src.iter().enumerate() {
                        acc += *xv * gsrc[l * s + c];
                    }
                    chunk[tap + c] += acc;
                }
            });
        }
    });
    gw
}
