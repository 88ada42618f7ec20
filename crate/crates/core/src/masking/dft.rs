//! Real-input DFT over the half spectrum, backed by `rustfft`.

use std::fmt;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::ComplexVector;

const SYMMETRY_TOL: f64 = 1e-9;

/// Number of stored bins for a `bands`-length signal: `⌈B/2⌉ + 1`.
pub fn half_len(bands: usize) -> usize {
    bands.div_ceil(2) + 1
}

/// Planned forward/inverse transform for one signal length.
///
/// Bins `0..=⌈B/2⌉` are stored. For odd `B` the last stored bin is the
/// conjugate of bin `(B−1)/2`; it is produced by [`RealDft::forward`] but
/// ignored by [`RealDft::inverse`], which rebuilds the upper half from bins
/// `0..=⌊B/2⌋`.
#[derive(Clone)]
pub struct RealDft {
    bands: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for RealDft {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RealDft").field("bands", &self.bands).finish()
    }
}

impl RealDft {
    pub fn new(bands: usize) -> Result<Self> {
        if bands < 2 {
            return Err(Error::Contract(format!("DFT needs at least 2 bands, got {bands}")));
        }
        let mut planner = FftPlanner::new();
        Ok(RealDft {
            bands,
            forward: planner.plan_fft_forward(bands),
            inverse: planner.plan_fft_inverse(bands),
        })
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn forward(&self, x: &[f64]) -> Result<ComplexVector> {
        if x.len() != self.bands {
            return Err(Error::Shape(format!(
                "signal has {} samples, transform planned for {}",
                x.len(),
                self.bands
            )));
        }
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.forward.process(&mut buf);
        let bins = half_len(self.bands);
        let mut out = ComplexVector::zeros(bins);
        for (k, c) in buf.iter().take(bins).enumerate() {
            out.set(k, (c.re, c.im));
        }
        // DC and Nyquist bins of a real signal are real
        out.set(0, (buf[0].re, 0.0));
        if self.bands.is_multiple_of(2) {
            let nyq = self.bands / 2;
            out.set(nyq, (buf[nyq].re, 0.0));
        }
        Ok(out)
    }

    pub fn inverse(&self, xf: &ComplexVector) -> Result<Vec<f64>> {
        let b = self.bands;
        if xf.len() != half_len(b) {
            return Err(Error::Shape(format!(
                "{b}-band inverse needs {} bins, got {}",
                half_len(b),
                xf.len()
            )));
        }
        let mut check = vec![0];
        if b.is_multiple_of(2) {
            check.push(b / 2);
        }
        for k in check {
            let (re, im) = xf.get(k);
            if im.abs() > SYMMETRY_TOL * (1.0 + re.abs()) {
                return Err(Error::Contract(format!(
                    "bin {k} has imaginary part {im:e}; the spectrum is not that of a real signal"
                )));
            }
        }
        let top = b / 2;
        let mut buf = vec![Complex::new(0.0, 0.0); b];
        for (k, slot) in buf.iter_mut().enumerate().take(top + 1) {
            let (re, im) = xf.get(k);
            *slot = Complex::new(re, im);
        }
        buf[0].im = 0.0;
        if b.is_multiple_of(2) {
            buf[top].im = 0.0;
        }
        for k in top + 1..b {
            buf[k] = buf[b - k].conj();
        }
        self.inverse.process(&mut buf);
        let scale = 1.0 / b as f64;
        Ok(buf.iter().map(|c| c.re * scale).collect())
    }
}

/// One-shot forward transform; plans a fresh transform per call.
pub fn rdft(x: &[f64]) -> Result<ComplexVector> {
    RealDft::new(x.len())?.forward(x)
}

pub fn irdft(xf: &ComplexVector, bands: usize) -> Result<Vec<f64>> {
    RealDft::new(bands)?.inverse(xf)
}
