//! FFT-based cross-correlation for long kernels.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

type C64 = Complex<f64>;

/// Correlates signals against a fixed set of kernels:
/// `y[t] = sum_k c[k] x[t + k]` for `t < out_len`, where `x` is zero beyond
/// its end.
///
/// Kernels may be complex. Two real kernels `w1`, `w2` packed as
/// `w1 + i w2` yield both correlations of a real signal in one transform
/// (real and imaginary parts of the result).
pub(crate) struct Correlator {
    n: usize,
    out_len: usize,
    span: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    spectra: Vec<Vec<C64>>,
}

impl Correlator {
    /// `kernels` are `(real, imag)` pairs of equal length `k`; a missing
    /// imaginary part is zero.
    pub(crate) fn new(kernels: &[(&[f64], Option<&[f64]>)], out_len: usize) -> Self {
        let k = kernels.iter().map(|(r, _)| r.len()).max().unwrap_or(1);
        let span = out_len + k - 1;
        let n = span.next_power_of_two();
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let mut scratch = vec![C64::default(); fwd.get_inplace_scratch_len()];
        let spectra = kernels
            .iter()
            .map(|(re, im)| {
                // Spectrum of conj(c), conjugated afterwards.
                let mut buf = vec![C64::default(); n];
                for (j, &r) in re.iter().enumerate() {
                    buf[j].re = r;
                }
                if let Some(im) = im {
                    for (j, &v) in im.iter().enumerate() {
                        buf[j].im = -v;
                    }
                }
                fwd.process_with_scratch(&mut buf, &mut scratch);
                let scale = 1.0 / n as f64;
                buf.iter_mut().for_each(|z| *z = z.conj() * scale);
                buf
            })
            .collect();
        Self {
            n,
            out_len,
            span,
            fwd,
            inv,
            spectra,
        }
    }

    pub(crate) fn len(&self) -> usize {
        self.spectra.len()
    }

    /// Spectrum of a real signal, ready for [`Correlator::apply`].
    pub(crate) fn signal(&self, x: &[f64]) -> Vec<C64> {
        let mut buf = vec![C64::default(); self.n];
        for (b, &v) in buf.iter_mut().zip(&x[..x.len().min(self.span)]) {
            b.re = v;
        }
        let mut scratch = vec![C64::default(); self.fwd.get_inplace_scratch_len()];
        self.fwd.process_with_scratch(&mut buf, &mut scratch);
        buf
    }

    /// Correlation of a signal spectrum with kernel `idx`.
    pub(crate) fn apply(&self, xs: &[C64], idx: usize) -> Vec<C64> {
        let mut buf: Vec<C64> = xs
            .iter()
            .zip(&self.spectra[idx])
            .map(|(a, b)| a * b)
            .collect();
        let mut scratch = vec![C64::default(); self.inv.get_inplace_scratch_len()];
        self.inv.process_with_scratch(&mut buf, &mut scratch);
        buf.truncate(self.out_len);
        buf
    }
}
