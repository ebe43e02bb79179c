//! Learnable Gabor and sinc filterbanks and their frequency-domain analysis.
//!
//! Kernels are laid out on the centered tap grid `t = -W/2 ..= W/2` (integer
//! division), so an even nominal width `W` yields `W + 1` taps.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{ComplexTensor, Tensor};

pub const MIN_ETA: f64 = 1e-6;
pub const MIN_SINC_BAND_HZ: f64 = 50.0;
pub const SIDELOBE_FLOOR_DB: f64 = -300.0;

/// Number of taps for a nominal kernel width.
pub fn taps(width: usize) -> usize {
    2 * (width / 2) + 1
}

/// Tap offsets relative to the kernel center.
pub fn tap_grid(width: usize) -> Vec<f64> {
    let h = (width / 2) as isize;
    (-h..=h).map(|t| t as f64).collect()
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Centers and bandwidths (Hz) of `n` triangular filters equally spaced on
/// the mel scale. Filter `i` spans mel points `i..=i+2`; its bandwidth is the
/// full width at half maximum of that triangle.
pub fn mel_init(
    n: usize,
    sample_rate: f64,
    f_min: f64,
    f_max: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if n < 1 {
        return Err(Error::arg("mel_init: need at least one filter"));
    }
    if !(0.0 <= f_min && f_min < f_max && f_max <= sample_rate / 2.0) {
        return Err(Error::arg(format!(
            "mel_init: band [{f_min}, {f_max}] invalid for sample rate {sample_rate}"
        )));
    }
    let (lo, hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let pts: Vec<f64> = (0..n + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n + 1) as f64))
        .collect();
    let centers = pts[1..=n].to_vec();
    let bands = (0..n).map(|i| (pts[i + 2] - pts[i]) / 2.0).collect();
    Ok((centers, bands))
}

/// Complex Gabor filterbank parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GaborParams {
    /// Center frequencies in cycles per sample.
    pub eta: Tensor,
    /// Gaussian envelope widths in samples.
    pub sigma: Tensor,
    pub width: usize,
}

impl GaborParams {
    pub fn new(eta: Vec<f64>, sigma: Vec<f64>, width: usize) -> Result<Self> {
        if eta.is_empty() || eta.len() != sigma.len() {
            return Err(Error::shape("gabor_params", &[eta.len()], &[sigma.len()]));
        }
        if width < 1 {
            return Err(Error::arg("gabor kernel width must be positive"));
        }
        let mut p = Self {
            eta: Tensor::from_vec(eta),
            sigma: Tensor::from_vec(sigma),
            width,
        };
        p.clamp();
        Ok(p)
    }

    /// Mel-scale initialization over `[0, sample_rate / 2]`.
    pub fn mel(n: usize, width: usize, sample_rate: f64) -> Result<Self> {
        let (centers, bands) = mel_init(n, sample_rate, 0.0, sample_rate / 2.0)?;
        let eta = centers.iter().map(|c| c / sample_rate).collect();
        let sigma = bands.iter().map(|b| sample_rate / (2.0 * PI * b)).collect();
        Self::new(eta, sigma, width)
    }

    pub fn len(&self) -> usize {
        self.eta.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clamp(&mut self) {
        clamp_gabor(self.eta.data_mut(), self.sigma.data_mut(), self.width);
    }
}

/// Keeps `eta` inside `(0, 0.5)` and `sigma >= 4 / width`.
pub fn clamp_gabor(eta: &mut [f64], sigma: &mut [f64], width: usize) {
    for e in eta {
        *e = e.clamp(MIN_ETA, 0.5 - MIN_ETA);
    }
    let floor = 4.0 / width as f64;
    for s in sigma {
        *s = s.max(floor);
    }
}

/// Builds the real and imaginary kernels `(N, taps)` on a tape, so gradients
/// flow to `eta` and `sigma` (both shape `(N)`).
pub fn gabor_kernels_on(tape: &mut Tape, eta: Var, sigma: Var, width: usize) -> Result<(Var, Var)> {
    let n = tape.shape(eta)[0];
    let grid = tap_grid(width);
    let k = grid.len();
    let shape = [n, k];
    let t = tape.constant(Tensor::new(vec![1, k], grid.clone())?);
    let t = tape.broadcast_to(t, &shape)?;
    let t2 = tape.constant(Tensor::new(
        vec![1, k],
        grid.iter().map(|v| v * v).collect(),
    )?);
    let t2 = tape.broadcast_to(t2, &shape)?;

    let e = tape.reshape(eta, &[n, 1])?;
    let e = tape.broadcast_to(e, &shape)?;
    let phase = tape.mul(e, t)?;
    let phase = tape.scale(phase, 2.0 * PI)?;

    let s = tape.reshape(sigma, &[n, 1])?;
    let s = tape.broadcast_to(s, &shape)?;
    let s2 = tape.mul(s, s)?;
    let q = tape.div(t2, s2)?;
    let q = tape.scale(q, -0.5)?;
    let env = tape.exp(q)?;
    let norm = tape.scale(s, (2.0 * PI).sqrt())?;
    let g = tape.div(env, norm)?;

    let c = tape.cos(phase)?;
    let re = tape.mul(c, g)?;
    let sn = tape.sin(phase)?;
    let sg = tape.mul(sn, g)?;
    let im = tape.neg(sg)?;
    Ok((re, im))
}

/// `w_t = exp(-i 2 pi eta t) / (sqrt(2 pi) sigma) * exp(-t^2 / (2 sigma^2))`.
pub fn gabor_kernels(params: &GaborParams) -> Result<ComplexTensor> {
    let mut tape = Tape::new();
    let eta = tape.constant(params.eta.clone());
    let sigma = tape.constant(params.sigma.clone());
    let (re, im) = gabor_kernels_on(&mut tape, eta, sigma, params.width)?;
    ComplexTensor::new(tape.value(re).clone(), tape.value(im).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Window {
    Hamming,
    Rectangular,
}

impl Window {
    pub fn coefficients(self, taps: usize) -> Vec<f64> {
        match self {
            Window::Rectangular => vec![1.0; taps],
            Window::Hamming if taps == 1 => vec![1.0],
            Window::Hamming => (0..taps)
                .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (taps - 1) as f64).cos())
                .collect(),
        }
    }
}

/// Windowed-sinc bandpass filterbank parameters (cutoffs in Hz).
#[derive(Clone, Debug, PartialEq)]
pub struct SincParams {
    pub f1: Tensor,
    pub f2: Tensor,
    pub width: usize,
    pub sample_rate: f64,
    pub window: Window,
}

impl SincParams {
    pub fn new(
        f1: Vec<f64>,
        f2: Vec<f64>,
        width: usize,
        sample_rate: f64,
        window: Window,
    ) -> Result<Self> {
        if f1.is_empty() || f1.len() != f2.len() {
            return Err(Error::shape("sinc_params", &[f1.len()], &[f2.len()]));
        }
        if width < 1 || sample_rate <= 2.0 * MIN_SINC_BAND_HZ {
            return Err(Error::arg(
                "sinc filterbank needs a positive width and sample rate above 100 Hz",
            ));
        }
        let mut p = Self {
            f1: Tensor::from_vec(f1),
            f2: Tensor::from_vec(f2),
            width,
            sample_rate,
            window,
        };
        p.clamp();
        Ok(p)
    }

    /// Bands matching the mel-initialized Gabor bank: centered on the same
    /// frequencies with the same bandwidths.
    pub fn mel(n: usize, width: usize, sample_rate: f64, window: Window) -> Result<Self> {
        let (centers, bands) = mel_init(n, sample_rate, 0.0, sample_rate / 2.0)?;
        let f1 = centers
            .iter()
            .zip(&bands)
            .map(|(c, b)| c - b / 2.0)
            .collect();
        let f2 = centers
            .iter()
            .zip(&bands)
            .map(|(c, b)| c + b / 2.0)
            .collect();
        Self::new(f1, f2, width, sample_rate, window)
    }

    pub fn len(&self) -> usize {
        self.f1.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clamp(&mut self) {
        clamp_sinc(self.f1.data_mut(), self.f2.data_mut(), self.sample_rate);
    }
}

/// Enforces `0 <= f1`, `f1 + 50 Hz <= f2 <= sample_rate / 2`.
pub fn clamp_sinc(f1: &mut [f64], f2: &mut [f64], sample_rate: f64) {
    let nyq = sample_rate / 2.0;
    for (lo, hi) in f1.iter_mut().zip(f2.iter_mut()) {
        *lo = lo.abs().min(nyq - MIN_SINC_BAND_HZ);
        *hi = hi.max(*lo + MIN_SINC_BAND_HZ).min(nyq);
    }
}

/// Builds sinc kernels `(N, taps)` on a tape from cutoffs `f1`, `f2` (Hz).
pub fn sinc_kernels_on(
    tape: &mut Tape,
    f1: Var,
    f2: Var,
    width: usize,
    sample_rate: f64,
    window: Window,
) -> Result<Var> {
    let n = tape.shape(f1)[0];
    let grid = tap_grid(width);
    let k = grid.len();
    let shape = [n, k];
    let t = tape.constant(Tensor::new(vec![1, k], grid)?);
    let t = tape.broadcast_to(t, &shape)?;
    let half = |tape: &mut Tape, f: Var| -> Result<Var> {
        // 2 f sinc(2 pi f t), f normalized by the sample rate
        let fr = tape.reshape(f, &[n, 1])?;
        let fr = tape.broadcast_to(fr, &shape)?;
        let fr = tape.scale(fr, 1.0 / sample_rate)?;
        let arg = tape.mul(fr, t)?;
        let arg = tape.scale(arg, 2.0 * PI)?;
        let s = tape.sinc(arg)?;
        let s = tape.mul(s, fr)?;
        tape.scale(s, 2.0)
    };
    let hi = half(tape, f2)?;
    let lo = half(tape, f1)?;
    let band = tape.sub(hi, lo)?;
    let win = tape.constant(Tensor::new(vec![1, k], window.coefficients(k))?);
    let win = tape.broadcast_to(win, &shape)?;
    tape.mul(band, win)
}

pub fn sinc_kernels(params: &SincParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let f1 = tape.constant(params.f1.clone());
    let f2 = tape.constant(params.f2.clone());
    let k = sinc_kernels_on(
        &mut tape,
        f1,
        f2,
        params.width,
        params.sample_rate,
        params.window,
    )?;
    Ok(tape.value(k).clone())
}

/// Magnitude response over bins `0 ..= n_fft / 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyResponse {
    pub magnitudes: Vec<f64>,
    pub bin_hz: f64,
}

impl FrequencyResponse {
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &m) in self.magnitudes.iter().enumerate() {
            if m > self.magnitudes[best] {
                best = i;
            }
        }
        best
    }

    pub fn bin_of(&self, hz: f64) -> usize {
        (hz / self.bin_hz).round() as usize
    }
}

/// Response of a (possibly complex) kernel applied by cross-correlation,
/// `|sum_k w[k] exp(+i 2 pi f k / n_fft)|`. For real kernels this is the
/// ordinary DFT magnitude.
pub fn frequency_response(
    real: &[f64],
    imag: Option<&[f64]>,
    n_fft: usize,
    sample_rate: f64,
) -> Result<FrequencyResponse> {
    if !n_fft.is_power_of_two() || n_fft < real.len() {
        return Err(Error::arg(format!(
            "frequency_response: n_fft {n_fft} must be a power of two no smaller than the kernel ({})",
            real.len()
        )));
    }
    if let Some(im) = imag {
        if im.len() != real.len() {
            return Err(Error::shape(
                "frequency_response",
                &[real.len()],
                &[im.len()],
            ));
        }
    }
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for (k, &r) in real.iter().enumerate() {
        // Conjugating the kernel turns the forward transform into the
        // correlation response.
        buf[k] = Complex::new(r, -imag.map_or(0.0, |im| im[k]));
    }
    FftPlanner::new().plan_fft_forward(n_fft).process(&mut buf);
    Ok(FrequencyResponse {
        magnitudes: buf[..=n_fft / 2].iter().map(|z| z.norm()).collect(),
        bin_hz: sample_rate / n_fft as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Leakage {
    pub sidelobe_db: f64,
    pub passband_ripple_db: f64,
}

fn db(ratio: f64) -> f64 {
    if ratio <= 0.0 {
        SIDELOBE_FLOOR_DB
    } else {
        (20.0 * ratio.log10()).max(SIDELOBE_FLOOR_DB)
    }
}

/// Stopband leakage and passband ripple.
///
/// The main lobe grows outward from the passband edges while the response
/// keeps strictly decreasing; every bin beyond it is stopband.
pub fn leakage_metrics(resp: &FrequencyResponse, lo_hz: f64, hi_hz: f64) -> Result<Leakage> {
    let m = &resp.magnitudes;
    let nyq = (m.len() - 1) as f64 * resp.bin_hz;
    if !(0.0 <= lo_hz && lo_hz <= hi_hz && hi_hz <= nyq) {
        return Err(Error::arg(format!(
            "passband [{lo_hz}, {hi_hz}] outside [0, {nyq}]"
        )));
    }
    let pass: Vec<usize> = (0..m.len())
        .filter(|&i| {
            let f = i as f64 * resp.bin_hz;
            f >= lo_hz && f <= hi_hz
        })
        .collect();
    let (Some(&first), Some(&last)) = (pass.first(), pass.last()) else {
        return Err(Error::arg(format!(
            "passband [{lo_hz}, {hi_hz}] contains no bins"
        )));
    };
    let peak = pass.iter().map(|&i| m[i]).fold(0.0, f64::max);
    let trough = pass.iter().map(|&i| m[i]).fold(f64::INFINITY, f64::min);

    let mut lo = first;
    while lo > 0 && m[lo - 1] < m[lo] {
        lo -= 1;
    }
    let mut hi = last;
    while hi + 1 < m.len() && m[hi + 1] < m[hi] {
        hi += 1;
    }
    let side = m[..lo]
        .iter()
        .chain(&m[hi + 1..])
        .fold(0.0, |a: f64, &b| a.max(b));
    let ripple = if trough > 0.0 {
        20.0 * (peak / trough).log10()
    } else {
        -SIDELOBE_FLOOR_DB
    };
    Ok(Leakage {
        sidelobe_db: if peak > 0.0 {
            db(side / peak)
        } else {
            SIDELOBE_FLOOR_DB
        },
        passband_ripple_db: ripple,
    })
}
