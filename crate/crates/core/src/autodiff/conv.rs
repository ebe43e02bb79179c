//! Convolution kernels (cross-correlation, as in most deep learning code).
//!
//! Long 1-D kernels go through [`Correlator`]; everything else uses direct
//! loops arranged so the innermost loop is a contiguous axpy or dot product.

use rayon::prelude::*;

use super::fft::Correlator;
use super::ops::dot;
use crate::error::{Error, Result};

/// Kernels at least this long use the FFT path.
const FFT_MIN_KERNEL: usize = 48;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dGeom {
    pub batch: usize,
    pub c_in: usize,
    pub l_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub groups: usize,
    pub l_out: usize,
}

impl Conv1dGeom {
    pub fn infer(
        x: &[usize],
        w: &[usize],
        b: Option<&[usize]>,
        stride: usize,
        (pad_left, pad_right): (usize, usize),
        groups: usize,
    ) -> Result<Self> {
        let (&[batch, c_in, l_in], &[c_out, cig, k]) = (x, w) else {
            return Err(Error::shape("conv1d", x, w));
        };
        if groups == 0
            || stride == 0
            || c_in % groups != 0
            || c_out % groups != 0
            || cig != c_in / groups
        {
            return Err(Error::shape("conv1d", x, w));
        }
        if let Some(b) = b {
            if b != [c_out] {
                return Err(Error::shape("conv1d", w, b));
            }
        }
        let lpad = l_in + pad_left + pad_right;
        if lpad < k {
            return Err(Error::arg(format!(
                "conv1d: kernel {k} longer than padded input {lpad}"
            )));
        }
        Ok(Self {
            batch,
            c_in,
            l_in,
            c_out,
            k,
            stride,
            pad_left,
            pad_right,
            groups,
            l_out: (lpad - k) / stride + 1,
        })
    }

    fn lpad(&self) -> usize {
        self.l_in + self.pad_left + self.pad_right
    }

    /// Output length at stride 1.
    fn l_full(&self) -> usize {
        self.lpad() - self.k + 1
    }

    fn cig(&self) -> usize {
        self.c_in / self.groups
    }

    fn cog(&self) -> usize {
        self.c_out / self.groups
    }

    fn use_fft(&self) -> bool {
        self.k >= FFT_MIN_KERNEL
    }

    fn pad_input(&self, x: &[f64]) -> Vec<f64> {
        let lpad = self.lpad();
        let mut out = vec![0.0; self.c_in * lpad];
        for (dst, src) in out.chunks_mut(lpad).zip(x.chunks(self.l_in)) {
            dst[self.pad_left..self.pad_left + self.l_in].copy_from_slice(src);
        }
        out
    }

    /// Output channels reading input channel `ci`, with the local input index.
    fn consumers(&self, ci: usize) -> (std::ops::Range<usize>, usize) {
        let g = ci / self.cig();
        (g * self.cog()..(g + 1) * self.cog(), ci % self.cig())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub ph: usize,
    pub pw: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl Conv2dGeom {
    pub fn infer(
        x: &[usize],
        w: &[usize],
        b: Option<&[usize]>,
        (ph, pw): (usize, usize),
    ) -> Result<Self> {
        let (&[batch, c_in, h, wd], &[c_out, ci2, kh, kw]) = (x, w) else {
            return Err(Error::shape("conv2d", x, w));
        };
        if ci2 != c_in {
            return Err(Error::shape("conv2d", x, w));
        }
        if let Some(b) = b {
            if b != [c_out] {
                return Err(Error::shape("conv2d", w, b));
            }
        }
        if h + 2 * ph < kh || wd + 2 * pw < kw {
            return Err(Error::arg(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input"
            )));
        }
        Ok(Self {
            batch,
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            ph,
            pw,
            h_out: h + 2 * ph - kh + 1,
            w_out: wd + 2 * pw - kw + 1,
        })
    }

    fn hp(&self) -> usize {
        self.h + 2 * self.ph
    }

    fn wp(&self) -> usize {
        self.w + 2 * self.pw
    }

    fn pad_input(&self, x: &[f64]) -> Vec<f64> {
        let (hp, wp) = (self.hp(), self.wp());
        let mut out = vec![0.0; self.c_in * hp * wp];
        for c in 0..self.c_in {
            for r in 0..self.h {
                let src = &x[(c * self.h + r) * self.w..(c * self.h + r + 1) * self.w];
                let d = (c * hp + r + self.ph) * wp + self.pw;
                out[d..d + self.w].copy_from_slice(src);
            }
        }
        out
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Kernels applied to input channel `ci`, packed two per transform.
fn channel_kernels<'a>(w: &'a [f64], geom: &Conv1dGeom, ci: usize) -> (Vec<usize>, Vec<&'a [f64]>) {
    let (outs, cl) = geom.consumers(ci);
    let k = geom.k;
    let cig = geom.cig();
    let os: Vec<usize> = outs.collect();
    let ks = os
        .iter()
        .map(|&o| &w[(o * cig + cl) * k..(o * cig + cl + 1) * k])
        .collect();
    (os, ks)
}

fn packed<'a>(ks: &[&'a [f64]]) -> Vec<(&'a [f64], Option<&'a [f64]>)> {
    ks.chunks(2).map(|p| (p[0], p.get(1).copied())).collect()
}

pub(crate) fn conv1d_forward(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    geom: &Conv1dGeom,
) -> Vec<f64> {
    let g = *geom;
    let per_out = g.c_out * g.l_out;
    let mut out = vec![0.0; g.batch * per_out];
    let correlators: Vec<(Vec<usize>, Correlator)> = if g.use_fft() {
        (0..g.c_in)
            .map(|ci| {
                let (os, ks) = channel_kernels(w, &g, ci);
                (os, Correlator::new(&packed(&ks), g.l_full()))
            })
            .collect()
    } else {
        Vec::new()
    };
    out.par_chunks_mut(per_out).enumerate().for_each(|(b, ob)| {
        let xpad = g.pad_input(&x[b * g.c_in * g.l_in..(b + 1) * g.c_in * g.l_in]);
        let lpad = g.lpad();
        if let Some(bias) = bias {
            for (row, &bv) in ob.chunks_mut(g.l_out).zip(bias) {
                row.fill(bv);
            }
        }
        if g.use_fft() {
            for (ci, (os, corr)) in correlators.iter().enumerate() {
                let xs = corr.signal(&xpad[ci * lpad..(ci + 1) * lpad]);
                for p in 0..corr.len() {
                    let y = corr.apply(&xs, p);
                    let o1 = os[2 * p];
                    for (t, v) in ob[o1 * g.l_out..(o1 + 1) * g.l_out].iter_mut().enumerate() {
                        *v += y[t * g.stride].re;
                    }
                    if let Some(&o2) = os.get(2 * p + 1) {
                        for (t, v) in ob[o2 * g.l_out..(o2 + 1) * g.l_out].iter_mut().enumerate() {
                            *v += y[t * g.stride].im;
                        }
                    }
                }
            }
            return;
        }
        let (cig, k) = (g.cig(), g.k);
        for o in 0..g.c_out {
            let grp = o / g.cog();
            let row = &mut ob[o * g.l_out..(o + 1) * g.l_out];
            for cl in 0..cig {
                let ci = grp * cig + cl;
                let xr = &xpad[ci * lpad..(ci + 1) * lpad];
                for kk in 0..k {
                    let wv = w[(o * cig + cl) * k + kk];
                    if g.stride == 1 {
                        axpy(row, wv, &xr[kk..kk + g.l_out]);
                    } else {
                        for (t, v) in row.iter_mut().enumerate() {
                            *v += wv * xr[t * g.stride + kk];
                        }
                    }
                }
            }
        }
    });
    out
}

/// Output gradient spread onto the stride-1 grid.
fn upsample(g: &[f64], stride: usize, len: usize) -> Vec<f64> {
    if stride == 1 {
        return g.to_vec();
    }
    let mut up = vec![0.0; len];
    for (t, &v) in g.iter().enumerate() {
        up[t * stride] = v;
    }
    up
}

pub(crate) fn conv1d_grad_input(gout: &[f64], w: &[f64], geom: &Conv1dGeom) -> Vec<f64> {
    let g = *geom;
    let per_in = g.c_in * g.l_in;
    let lpad = g.lpad();
    let (cig, k) = (g.cig(), g.k);
    let mut dx = vec![0.0; g.batch * per_in];
    // Correlating the left-padded gradient with the reversed kernel is the
    // transposed convolution.
    let correlators: Vec<(Vec<usize>, Correlator)> = if g.use_fft() {
        (0..g.c_in)
            .map(|ci| {
                let (os, ks) = channel_kernels(w, &g, ci);
                let rev: Vec<Vec<f64>> = ks
                    .iter()
                    .map(|kr| kr.iter().rev().copied().collect())
                    .collect();
                let refs: Vec<(&[f64], Option<&[f64]>)> =
                    rev.iter().map(|r| (r.as_slice(), None)).collect();
                (os, Correlator::new(&refs, lpad))
            })
            .collect()
    } else {
        Vec::new()
    };
    dx.par_chunks_mut(per_in).enumerate().for_each(|(b, db)| {
        let gb = &gout[b * g.c_out * g.l_out..(b + 1) * g.c_out * g.l_out];
        let mut dpad = vec![0.0; g.c_in * lpad];
        if g.use_fft() {
            let mut spectra: Vec<Option<Vec<_>>> = vec![None; g.c_out];
            for (ci, (os, corr)) in correlators.iter().enumerate() {
                let drow = &mut dpad[ci * lpad..(ci + 1) * lpad];
                for (j, &o) in os.iter().enumerate() {
                    let xs = spectra[o].get_or_insert_with(|| {
                        let mut gz = vec![0.0; k - 1];
                        gz.extend(upsample(
                            &gb[o * g.l_out..(o + 1) * g.l_out],
                            g.stride,
                            g.l_full(),
                        ));
                        corr.signal(&gz)
                    });
                    let y = corr.apply(xs, j);
                    for (d, v) in drow.iter_mut().zip(&y) {
                        *d += v.re;
                    }
                }
            }
        } else {
            for o in 0..g.c_out {
                let grp = o / g.cog();
                let grow = &gb[o * g.l_out..(o + 1) * g.l_out];
                for cl in 0..cig {
                    let ci = grp * cig + cl;
                    let drow = &mut dpad[ci * lpad..(ci + 1) * lpad];
                    for kk in 0..k {
                        let wv = w[(o * cig + cl) * k + kk];
                        if g.stride == 1 {
                            axpy(&mut drow[kk..kk + g.l_out], wv, grow);
                        } else {
                            for (t, &gv) in grow.iter().enumerate() {
                                drow[t * g.stride + kk] += wv * gv;
                            }
                        }
                    }
                }
            }
        }
        for (dst, src) in db.chunks_mut(g.l_in).zip(dpad.chunks(lpad)) {
            dst.copy_from_slice(&src[g.pad_left..g.pad_left + g.l_in]);
        }
    });
    dx
}

pub(crate) fn conv1d_grad_weight(gout: &[f64], x: &[f64], geom: &Conv1dGeom) -> Vec<f64> {
    let g = *geom;
    let (cig, k) = (g.cig(), g.k);
    let lpad = g.lpad();
    let partials: Vec<Vec<f64>> = (0..g.batch)
        .into_par_iter()
        .map(|b| {
            let mut dw = vec![0.0; g.c_out * cig * k];
            let xpad = g.pad_input(&x[b * g.c_in * g.l_in..(b + 1) * g.c_in * g.l_in]);
            let gb = &gout[b * g.c_out * g.l_out..(b + 1) * g.c_out * g.l_out];
            if g.use_fft() {
                let ups: Vec<Vec<f64>> = (0..g.c_out)
                    .map(|o| upsample(&gb[o * g.l_out..(o + 1) * g.l_out], g.stride, g.l_full()))
                    .collect();
                for ci in 0..g.c_in {
                    let (outs, cl) = g.consumers(ci);
                    let os: Vec<usize> = outs.collect();
                    let ks: Vec<&[f64]> = os.iter().map(|&o| ups[o].as_slice()).collect();
                    let corr = Correlator::new(&packed(&ks), k);
                    let xs = corr.signal(&xpad[ci * lpad..(ci + 1) * lpad]);
                    for p in 0..corr.len() {
                        let y = corr.apply(&xs, p);
                        let o1 = os[2 * p];
                        for (kk, v) in y.iter().enumerate() {
                            dw[(o1 * cig + cl) * k + kk] += v.re;
                        }
                        if let Some(&o2) = os.get(2 * p + 1) {
                            for (kk, v) in y.iter().enumerate() {
                                dw[(o2 * cig + cl) * k + kk] += v.im;
                            }
                        }
                    }
                }
            } else {
                for o in 0..g.c_out {
                    let grp = o / g.cog();
                    let grow = &gb[o * g.l_out..(o + 1) * g.l_out];
                    for cl in 0..cig {
                        let ci = grp * cig + cl;
                        let xr = &xpad[ci * lpad..(ci + 1) * lpad];
                        for kk in 0..k {
                            dw[(o * cig + cl) * k + kk] += if g.stride == 1 {
                                dot(grow, &xr[kk..kk + g.l_out])
                            } else {
                                grow.iter()
                                    .enumerate()
                                    .map(|(t, &gv)| gv * xr[t * g.stride + kk])
                                    .sum()
                            };
                        }
                    }
                }
            }
            dw
        })
        .collect();
    sum_partials(partials)
}

fn sum_partials(partials: Vec<Vec<f64>>) -> Vec<f64> {
    let mut it = partials.into_iter();
    let mut acc = it.next().unwrap_or_default();
    for p in it {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    acc
}

pub(crate) fn bias_grad(gout: &[f64], batch: usize, c_out: usize, spatial: usize) -> Vec<f64> {
    let mut db = vec![0.0; c_out];
    for b in 0..batch {
        for (o, d) in db.iter_mut().enumerate() {
            let s = (b * c_out + o) * spatial;
            *d += gout[s..s + spatial].iter().sum::<f64>();
        }
    }
    db
}

pub(crate) fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    geom: &Conv2dGeom,
) -> Vec<f64> {
    let g = *geom;
    let plane = g.h_out * g.w_out;
    let (hp, wp) = (g.hp(), g.wp());
    let mut out = vec![0.0; g.batch * g.c_out * plane];
    out.par_chunks_mut(g.c_out * plane)
        .enumerate()
        .for_each(|(b, ob)| {
            let xpad = g.pad_input(&x[b * g.c_in * g.h * g.w..(b + 1) * g.c_in * g.h * g.w]);
            for o in 0..g.c_out {
                let op = &mut ob[o * plane..(o + 1) * plane];
                if let Some(bias) = bias {
                    op.fill(bias[o]);
                }
                for ci in 0..g.c_in {
                    for i in 0..g.kh {
                        for j in 0..g.kw {
                            let wv = w[((o * g.c_in + ci) * g.kh + i) * g.kw + j];
                            for r in 0..g.h_out {
                                let src = (ci * hp + r + i) * wp + j;
                                axpy(
                                    &mut op[r * g.w_out..(r + 1) * g.w_out],
                                    wv,
                                    &xpad[src..src + g.w_out],
                                );
                            }
                        }
                    }
                }
            }
        });
    out
}

pub(crate) fn conv2d_grad_input(gout: &[f64], w: &[f64], geom: &Conv2dGeom) -> Vec<f64> {
    let g = *geom;
    let plane = g.h_out * g.w_out;
    let (hp, wp) = (g.hp(), g.wp());
    let per_in = g.c_in * g.h * g.w;
    let mut dx = vec![0.0; g.batch * per_in];
    dx.par_chunks_mut(per_in).enumerate().for_each(|(b, db)| {
        let gb = &gout[b * g.c_out * plane..(b + 1) * g.c_out * plane];
        let mut dpad = vec![0.0; g.c_in * hp * wp];
        for o in 0..g.c_out {
            let gp = &gb[o * plane..(o + 1) * plane];
            for ci in 0..g.c_in {
                for i in 0..g.kh {
                    for j in 0..g.kw {
                        let wv = w[((o * g.c_in + ci) * g.kh + i) * g.kw + j];
                        for r in 0..g.h_out {
                            let dst = (ci * hp + r + i) * wp + j;
                            axpy(
                                &mut dpad[dst..dst + g.w_out],
                                wv,
                                &gp[r * g.w_out..(r + 1) * g.w_out],
                            );
                        }
                    }
                }
            }
        }
        for c in 0..g.c_in {
            for r in 0..g.h {
                let s = (c * hp + r + g.ph) * wp + g.pw;
                db[(c * g.h + r) * g.w..(c * g.h + r + 1) * g.w].copy_from_slice(&dpad[s..s + g.w]);
            }
        }
    });
    dx
}

pub(crate) fn conv2d_grad_weight(gout: &[f64], x: &[f64], geom: &Conv2dGeom) -> Vec<f64> {
    let g = *geom;
    let plane = g.h_out * g.w_out;
    let (hp, wp) = (g.hp(), g.wp());
    let partials: Vec<Vec<f64>> = (0..g.batch)
        .into_par_iter()
        .map(|b| {
            let xpad = g.pad_input(&x[b * g.c_in * g.h * g.w..(b + 1) * g.c_in * g.h * g.w]);
            let gb = &gout[b * g.c_out * plane..(b + 1) * g.c_out * plane];
            let mut dw = vec![0.0; g.c_out * g.c_in * g.kh * g.kw];
            for o in 0..g.c_out {
                let gp = &gb[o * plane..(o + 1) * plane];
                for ci in 0..g.c_in {
                    for i in 0..g.kh {
                        for j in 0..g.kw {
                            let mut s = 0.0;
                            for r in 0..g.h_out {
                                let src = (ci * hp + r + i) * wp + j;
                                s += dot(
                                    &gp[r * g.w_out..(r + 1) * g.w_out],
                                    &xpad[src..src + g.w_out],
                                );
                            }
                            dw[((o * g.c_in + ci) * g.kh + i) * g.kw + j] += s;
                        }
                    }
                }
            }
            dw
        })
        .collect();
    sum_partials(partials)
}
