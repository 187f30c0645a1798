//! OFDM symbol construction and the multi-target cyclic-delay channel.
//!
//! The cyclic prefix is not simulated: after CP removal the channel acts as
//! a cyclic convolution, which is what [`propagate`] implements directly.
//!
//! Delay convention: a target at delay `tau` maps `x[t]` to `x[(t - tau) mod N]`
//! in time and multiplies subcarrier `n` by `exp(-j 2 pi n tau / N)`. With this
//! convention the matched and reciprocal filter outputs peak at index `tau`.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::stats::trial_rng;

/// Speed of light used for range conversions, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OfdmConfig {
    pub n_subcarriers: usize,
    pub n_symbols: usize,
    pub subcarrier_spacing_hz: f64,
    pub sample_interval_s: f64,
    /// Metadata only; the simulation is at baseband.
    pub carrier_hz: f64,
    pub p_ave: f64,
}

impl Default for OfdmConfig {
    /// 20 MHz, 64 subcarriers, 16 symbols at 2.45 GHz.
    fn default() -> Self {
        Self {
            n_subcarriers: 64,
            n_symbols: 16,
            subcarrier_spacing_hz: 20e6 / 64.0,
            sample_interval_s: 1.0 / 20e6,
            carrier_hz: 2.45e9,
            p_ave: 1.0,
        }
    }
}

impl OfdmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subcarriers < 2 {
            return Err(invalid("n_subcarriers must be >= 2"));
        }
        if self.n_symbols < 1 {
            return Err(invalid("n_symbols must be >= 1"));
        }
        if !(self.subcarrier_spacing_hz > 0.0) {
            return Err(invalid("subcarrier_spacing_hz must be positive"));
        }
        if !(self.sample_interval_s > 0.0) {
            return Err(invalid("sample_interval_s must be positive"));
        }
        if !(self.p_ave > 0.0) {
            return Err(invalid("p_ave must be positive"));
        }
        Ok(())
    }

    /// Meters per delay sample (two-way).
    pub fn range_per_sample(&self) -> f64 {
        SPEED_OF_LIGHT * self.sample_interval_s / 2.0
    }
}

/// Per-subcarrier transmit powers (linear).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PowerAllocation {
    p: Vec<f64>,
}

impl TryFrom<Vec<f64>> for PowerAllocation {
    type Error = crate::Error;
    fn try_from(p: Vec<f64>) -> Result<Self> {
        Self::new(p)
    }
}

impl From<PowerAllocation> for Vec<f64> {
    fn from(p: PowerAllocation) -> Self {
        p.p
    }
}

impl PowerAllocation {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(invalid("power allocation is empty"));
        }
        if let Some((i, v)) = p.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(invalid(format!("power[{i}] = {v} must be finite and nonnegative")));
        }
        Ok(Self { p })
    }

    pub fn equal(n: usize, p_ave: f64) -> Self {
        Self { p: vec![p_ave; n] }
    }

    /// Rescale so that the mean power equals `p_ave`.
    pub fn with_mean(mut self, p_ave: f64) -> Result<Self> {
        let mean = self.p_ave();
        if !(mean > 0.0) {
            return Err(invalid("cannot rescale an all-zero allocation"));
        }
        let s = p_ave / mean;
        self.p.iter_mut().for_each(|v| *v *= s);
        Ok(self)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.p
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.p.iter().sum()
    }

    pub fn p_ave(&self) -> f64 {
        self.total() / self.p.len() as f64
    }

    pub fn meets_budget(&self, p_ave: f64) -> bool {
        (self.p_ave() - p_ave).abs() <= 1e-9 * p_ave.abs()
    }
}

/// M x N grid of data symbols together with the per-subcarrier alphabet map.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolGrid {
    pub symbols: Vec<Vec<Complex64>>,
    pub constellation_map: Vec<crate::constellations::ConstellationId>,
}

impl SymbolGrid {
    /// Draw `m` OFDM symbols; subcarrier `n` uses alphabet `map[n]`.
    pub fn draw<R: Rng + ?Sized>(map: &[Arc<crate::constellations::Constellation>], m: usize, rng: &mut R) -> Self {
        let symbols = (0..m).map(|_| map.iter().map(|c| c.draw_one(rng)).collect()).collect();
        Self { symbols, constellation_map: map.iter().map(|c| c.id().clone()).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Target {
    /// Variance of the complex reflection coefficient.
    pub sigma_alpha_sq: f64,
    /// Round-trip delay in samples; may be fractional.
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensingScene {
    pub targets: Vec<Target>,
    pub noise_var: f64,
}

impl SensingScene {
    pub fn validate(&self, n: usize) -> Result<()> {
        for (q, t) in self.targets.iter().enumerate() {
            if !(t.sigma_alpha_sq > 0.0) {
                return Err(invalid(format!("target {q}: sigma_alpha_sq must be positive")));
            }
            if !(t.tau >= 0.0 && t.tau < n as f64) {
                return Err(invalid(format!("target {q}: tau = {} outside [0, {n})", t.tau)));
            }
        }
        if !(self.noise_var >= 0.0) {
            return Err(invalid("noise_var must be nonnegative"));
        }
        Ok(())
    }

    /// Sum of reflection variances of every target other than `q`.
    pub fn clutter_power(&self, q: usize) -> f64 {
        self.targets.iter().enumerate().filter(|(i, _)| *i != q).map(|(_, t)| t.sigma_alpha_sq).sum()
    }
}

/// Unitary N-point DFT/IDFT pair with cached FFT plans.
#[derive(Clone)]
pub struct UnitaryDft {
    n: usize,
    scale: f64,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for UnitaryDft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("UnitaryDft").field("n", &self.n).finish()
    }
}

impl UnitaryDft {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n,
            scale: (n as f64).sqrt().recip(),
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn forward_in_place(&self, buf: &mut [Complex64]) {
        assert_eq!(buf.len(), self.n, "DFT length mismatch");
        self.forward.process(buf);
        buf.iter_mut().for_each(|v| *v *= self.scale);
    }

    pub fn inverse_in_place(&self, buf: &mut [Complex64]) {
        assert_eq!(buf.len(), self.n, "IDFT length mismatch");
        self.inverse.process(buf);
        buf.iter_mut().for_each(|v| *v *= self.scale);
    }

    pub fn forward(&self, x: &[Complex64]) -> Vec<Complex64> {
        let mut buf = x.to_vec();
        self.forward_in_place(&mut buf);
        buf
    }

    pub fn inverse(&self, x: &[Complex64]) -> Vec<Complex64> {
        let mut buf = x.to_vec();
        self.inverse_in_place(&mut buf);
        buf
    }

    /// Frequency-domain transmit vector `X[n] = sqrt(P_n) s_n`.
    pub fn transmit_spectrum(&self, symbols: &[Complex64], p: &PowerAllocation) -> Vec<Complex64> {
        symbols.iter().zip(p.as_slice()).map(|(s, pn)| s * pn.sqrt()).collect()
    }

    /// `x[t] = N^{-1/2} sum_n sqrt(P_n) s_n exp(j 2 pi t n / N)`.
    pub fn modulate(&self, symbols: &[Complex64], p: &PowerAllocation) -> Result<Vec<Complex64>> {
        if symbols.len() != self.n || p.len() != self.n {
            return Err(invalid(format!(
                "modulate: {} symbols / {} powers for N = {}",
                symbols.len(),
                p.len(),
                self.n
            )));
        }
        Ok(self.inverse(&self.transmit_spectrum(symbols, p)))
    }
}

/// Unitary DFT: `X[n] = N^{-1/2} sum_t x[t] exp(-j 2 pi n t / N)`.
pub fn dft(signal: &[Complex64]) -> Vec<Complex64> {
    UnitaryDft::new(signal.len()).forward(signal)
}

/// Unitary IDFT, inverse of [`dft`].
pub fn idft(spectrum: &[Complex64]) -> Vec<Complex64> {
    UnitaryDft::new(spectrum.len()).inverse(spectrum)
}

/// `x[t] = N^{-1/2} sum_n sqrt(P_n) s_n exp(j 2 pi t n / N)`.
pub fn modulate(symbols: &[Complex64], p: &PowerAllocation) -> Result<Vec<Complex64>> {
    UnitaryDft::new(symbols.len()).modulate(symbols, p)
}

/// Integer cyclic delay: `y[t] = x[(t - k) mod N]`.
pub fn cyclic_delay(x: &[Complex64], k: usize) -> Vec<Complex64> {
    let n = x.len();
    let k = k % n.max(1);
    (0..n).map(|t| x[(t + n - k) % n]).collect()
}

/// Fractional cyclic delay through the per-subcarrier phase ramp `exp(-j 2 pi n tau / N)`.
pub fn fractional_delay(x: &[Complex64], tau: f64, dft: &UnitaryDft) -> Vec<Complex64> {
    let n = x.len();
    let mut spec = dft.forward(x);
    for (k, v) in spec.iter_mut().enumerate() {
        *v *= Complex64::from_polar(1.0, -2.0 * PI * k as f64 * tau / n as f64);
    }
    dft.inverse_in_place(&mut spec);
    spec
}

fn delayed(x: &[Complex64], tau: f64, dft: &UnitaryDft) -> Vec<Complex64> {
    if tau.fract() == 0.0 {
        cyclic_delay(x, tau as usize)
    } else {
        fractional_delay(x, tau, dft)
    }
}

/// Circularly-symmetric complex Gaussian sample with variance `var`.
#[inline]
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, var: f64) -> Complex64 {
    let s = (0.5 * var).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(s * re, s * im)
}

/// Draw `alpha_q ~ CN(0, sigma_alpha_sq)` for every target.
///
/// Reflections are held fixed across the symbols of one coherent interval,
/// so callers draw once per interval and reuse them in [`propagate`].
pub fn draw_reflections<R: Rng + ?Sized>(scene: &SensingScene, rng: &mut R) -> Vec<Complex64> {
    scene.targets.iter().map(|t| complex_gaussian(rng, t.sigma_alpha_sq)).collect()
}

/// `y = sum_q alpha_q delay_{tau_q}(x) + z`, `z ~ CN(0, noise_var I)` drawn in time.
pub fn propagate<R: Rng + ?Sized>(
    x: &[Complex64],
    scene: &SensingScene,
    alphas: &[Complex64],
    dft: &UnitaryDft,
    rng: &mut R,
) -> Vec<Complex64> {
    let mut y = vec![Complex64::new(0.0, 0.0); x.len()];
    for (target, alpha) in scene.targets.iter().zip(alphas) {
        for (acc, v) in y.iter_mut().zip(delayed(x, target.tau, dft)) {
            *acc += alpha * v;
        }
    }
    if scene.noise_var > 0.0 {
        for v in y.iter_mut() {
            *v += complex_gaussian(rng, scene.noise_var);
        }
    }
    y
}

/// Single-shot channel: draws reflections and noise from `seed`.
pub fn apply_channel(x: &[Complex64], scene: &SensingScene, seed: u64) -> Result<Vec<Complex64>> {
    scene.validate(x.len())?;
    let dft = UnitaryDft::new(x.len());
    let mut rng = trial_rng(seed, 0);
    let alphas = draw_reflections(scene, &mut rng);
    Ok(propagate(x, scene, &alphas, &dft, &mut rng))
}

/// Two-way delay in whole samples: `floor(2 d / (c T_s))`.
pub fn delay_from_range(distance_m: f64, c_light: f64, sample_interval_s: f64) -> Result<usize> {
    if !(distance_m >= 0.0) || !distance_m.is_finite() {
        return Err(invalid(format!("range must be nonnegative, got {distance_m}")));
    }
    if !(c_light > 0.0 && sample_interval_s > 0.0) {
        return Err(invalid("speed of light and sample interval must be positive"));
    }
    let samples = 2.0 * distance_m / (c_light * sample_interval_s);
    // Absorb representation error when the ratio is meant to be an integer.
    let rounded = samples.round();
    let v = if (samples - rounded).abs() <= 1e-9 * rounded.max(1.0) { rounded } else { samples.floor() };
    Ok(v as usize)
}

/// Sidecar describing a raw complex64 dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSidecar {
    pub n: usize,
    pub m: usize,
    pub sample_interval_s: f64,
    pub format: String,
}

/// Write samples as little-endian interleaved complex64 (f32 re, f32 im)
/// to `path` and a JSON sidecar to `path` + `.json`.
pub fn export_signal(
    path: impl AsRef<Path>,
    samples: &[Complex64],
    n: usize,
    m: usize,
    sample_interval_s: f64,
) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(samples.len() * 8);
    for s in samples {
        bytes.extend_from_slice(&(s.re as f32).to_le_bytes());
        bytes.extend_from_slice(&(s.im as f32).to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    let sidecar = SignalSidecar { n, m, sample_interval_s, format: "complex64-le-interleaved".into() };
    let mut side = path.as_os_str().to_owned();
    side.push(".json");
    std::fs::write(side, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

/// Read back a file written by [`export_signal`].
pub fn import_signal(path: impl AsRef<Path>) -> Result<(Vec<Complex64>, SignalSidecar)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(invalid("complex64 file length is not a multiple of 8"));
    }
    let samples = bytes
        .chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            let im = f32::from_le_bytes([c[4], c[5], c[6], c[7]]);
            Complex64::new(re as f64, im as f64)
        })
        .collect();
    let mut side = path.as_os_str().to_owned();
    side.push(".json");
    let sidecar: SignalSidecar = serde_json::from_str(&std::fs::read_to_string(side)?)?;
    Ok((samples, sidecar))
}
