//! Matched and reciprocal filtering, coherent integration, and the
//! closed-form sensing laws that link constellation moments to sidelobe
//! level, MF SINR and RF SNR.
//!
//! The Monte-Carlo estimators here simulate the full chain (modulate,
//! channel, DFT, filter) and are the oracles the closed forms are checked
//! against.

use std::io::Write;
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constellations::Constellation;
use crate::error::{invalid, Error, Result};
use crate::ofdm::{draw_reflections, propagate, PowerAllocation, SensingScene, UnitaryDft};
use crate::stats::{pairwise_sum, trial_rng, MeanEstimate};

/// SINR values above this are reported as `+inf`.
pub const SINR_OVERFLOW: f64 = 1e12;

/// Map values beyond [`SINR_OVERFLOW`] to `+inf`.
pub fn overflow_guard(v: f64) -> f64 {
    if v > SINR_OVERFLOW {
        f64::INFINITY
    } else {
        v
    }
}

/// Receiver processing chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Chain {
    #[serde(rename = "MF", alias = "mf")]
    Mf,
    #[serde(rename = "RF", alias = "rf")]
    Rf,
}

impl std::fmt::Display for Chain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Chain::Mf => "MF",
            Chain::Rf => "RF",
        })
    }
}

/// Filter output over delay bins.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeProfile {
    pub bins: Vec<Complex64>,
    pub chain: Chain,
    pub m_integrated: usize,
}

impl RangeProfile {
    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    pub fn power(&self) -> Vec<f64> {
        self.bins.iter().map(|b| b.norm_sqr()).collect()
    }

    pub fn argmax(&self) -> usize {
        self.bins
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.norm_sqr().total_cmp(&b.1.norm_sqr()))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }

    /// CSV with columns `index,re,im,magnitude_db`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "index,re,im,magnitude_db")?;
        for (i, b) in self.bins.iter().enumerate() {
            writeln!(w, "{i},{:.12e},{:.12e},{:.6}", b.re, b.im, 20.0 * b.norm().log10())?;
        }
        Ok(())
    }
}

fn check_lengths(y: &[Complex64], x: &[Complex64]) -> Result<()> {
    if y.len() != x.len() || y.is_empty() {
        return Err(invalid(format!("spectrum lengths differ: {} vs {}", y.len(), x.len())));
    }
    Ok(())
}

/// Frequency-domain MF output `sqrt(N) Y[n] conj(X[n])`.
pub fn matched_filter_spectrum(y_spec: &[Complex64], x_spec: &[Complex64]) -> Result<Vec<Complex64>> {
    check_lengths(y_spec, x_spec)?;
    let g = (y_spec.len() as f64).sqrt();
    Ok(y_spec.iter().zip(x_spec).map(|(y, x)| g * y * x.conj()).collect())
}

/// Frequency-domain RF output `Y[n] conj(X[n]) / (|X[n]|^2 + epsilon)`.
pub fn reciprocal_filter_spectrum(y_spec: &[Complex64], x_spec: &[Complex64], epsilon: f64) -> Result<Vec<Complex64>> {
    check_lengths(y_spec, x_spec)?;
    if !(epsilon >= 0.0) {
        return Err(invalid(format!("regularizer must be nonnegative, got {epsilon}")));
    }
    y_spec
        .iter()
        .zip(x_spec)
        .enumerate()
        .map(|(bin, (y, x))| {
            let d = x.norm_sqr() + epsilon;
            if d == 0.0 {
                Err(Error::DivisionByZero { bin })
            } else {
                Ok(y * x.conj() / d)
            }
        })
        .collect()
}

/// Matched filter range profile.
pub fn matched_filter(y_spec: &[Complex64], x_spec: &[Complex64]) -> Result<RangeProfile> {
    let spec = matched_filter_spectrum(y_spec, x_spec)?;
    Ok(RangeProfile { bins: UnitaryDft::new(spec.len()).inverse(&spec), chain: Chain::Mf, m_integrated: 1 })
}

/// Reciprocal filter range profile. `epsilon = 0` is exact division.
pub fn reciprocal_filter(y_spec: &[Complex64], x_spec: &[Complex64], epsilon: f64) -> Result<RangeProfile> {
    let spec = reciprocal_filter_spectrum(y_spec, x_spec, epsilon)?;
    Ok(RangeProfile { bins: UnitaryDft::new(spec.len()).inverse(&spec), chain: Chain::Rf, m_integrated: 1 })
}

/// Complex mean of per-symbol profiles.
pub fn coherent_integrate(profiles: &[RangeProfile]) -> Result<RangeProfile> {
    let first = profiles.first().ok_or_else(|| invalid("no profiles to integrate"))?;
    if profiles.iter().any(|p| p.chain != first.chain || p.len() != first.len()) {
        return Err(Error::MixedProfiles);
    }
    let total: usize = profiles.iter().map(|p| p.m_integrated).sum();
    let mut bins = vec![Complex64::new(0.0, 0.0); first.len()];
    for p in profiles {
        let w = p.m_integrated as f64 / total as f64;
        for (acc, b) in bins.iter_mut().zip(&p.bins) {
            *acc += b * w;
        }
    }
    Ok(RangeProfile { bins, chain: first.chain, m_integrated: total })
}

// ---------------------------------------------------------------------------
// Closed-form laws
// ---------------------------------------------------------------------------

fn check_law_vectors(p: &[f64], mu4: &[f64]) -> Result<()> {
    if p.len() != mu4.len() {
        return Err(invalid(format!("{} powers vs {} kurtosis values", p.len(), mu4.len())));
    }
    if p.len() < 2 {
        return Err(invalid("sensing laws need N >= 2 subcarriers"));
    }
    Ok(())
}

fn random_part(p: &[f64], mu4: &[f64]) -> f64 {
    p.iter().zip(mu4).map(|(p, m)| p * p * (m - 1.0)).sum()
}

/// `E|r_0|^2 = sum P_n^2 (mu4_n - 1) + (sum P_n)^2` for a single symbol.
pub fn expected_r0_sq(p: &[f64], mu4: &[f64]) -> Result<f64> {
    expected_r0_sq_coherent(p, mu4, 1)
}

/// Zero-lag power of the M-symbol averaged ACF.
pub fn expected_r0_sq_coherent(p: &[f64], mu4: &[f64], m: usize) -> Result<f64> {
    if p.len() != mu4.len() {
        return Err(invalid("power and kurtosis lengths differ"));
    }
    if m == 0 {
        return Err(invalid("m must be >= 1"));
    }
    let total: f64 = p.iter().sum();
    Ok(random_part(p, mu4) / m as f64 + total * total)
}

/// Deterministic sidelobe energy `N sum P^2 - (sum P)^2`; zero for equal power.
pub fn structural_sidelobe_energy(p: &[f64]) -> f64 {
    let n = p.len() as f64;
    let total: f64 = p.iter().sum();
    let sq: f64 = p.iter().map(|v| v * v).sum();
    n * sq - total * total
}

/// `sum_{k=1}^{N-1} E|rbar_k|^2` after averaging `m` symbols.
pub fn sidelobe_energy(p: &[f64], mu4: &[f64], m: usize) -> Result<f64> {
    check_law_vectors(p, mu4)?;
    if m == 0 {
        return Err(invalid("m must be >= 1"));
    }
    let n = p.len() as f64;
    Ok((n - 1.0) / m as f64 * random_part(p, mu4) + structural_sidelobe_energy(p))
}

/// Expected sidelobe level of a single symbol:
/// `(sum [(N-1) mu4_n + 1] P_n^2 - (sum P_n)^2) / (N - 1)`.
pub fn closed_form_esl(p: &[f64], mu4: &[f64]) -> Result<f64> {
    check_law_vectors(p, mu4)?;
    let n = p.len() as f64;
    let total: f64 = p.iter().sum();
    let weighted: f64 = p.iter().zip(mu4).map(|(p, m)| ((n - 1.0) * m + 1.0) * p * p).sum();
    Ok((weighted - total * total) / (n - 1.0))
}

/// Expected sidelobe level after coherent averaging of `m` symbols.
pub fn closed_form_esl_coherent(p: &[f64], mu4: &[f64], m: usize) -> Result<f64> {
    Ok(sidelobe_energy(p, mu4, m)? / (p.len() as f64 - 1.0))
}

/// Per-bin RF noise variance `sigma_z^2 / (M N) sum nu_n / P_n`.
pub fn rf_noise_variance(p: &[f64], nu_minus2: &[f64], noise_var: f64, m: usize) -> Result<f64> {
    if p.len() != nu_minus2.len() || p.is_empty() {
        return Err(invalid("power and inverse-moment lengths differ"));
    }
    if let Some(i) = p.iter().position(|v| *v <= 0.0) {
        return Err(invalid(format!("RF requires P_n > 0 on every subcarrier (P[{i}] = 0)")));
    }
    let n = p.len() as f64;
    let s: f64 = nu_minus2.iter().zip(p).map(|(nu, p)| nu / p).sum();
    Ok(noise_var / (m as f64 * n) * s)
}

/// Inputs consumed by the SINR/SNR laws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensingLawInputs {
    pub p: PowerAllocation,
    pub mu4: Vec<f64>,
    pub nu_minus2: Vec<f64>,
    pub scene: SensingScene,
    pub m: usize,
}

impl SensingLawInputs {
    pub fn new(p: PowerAllocation, mu4: Vec<f64>, nu_minus2: Vec<f64>, scene: SensingScene, m: usize) -> Result<Self> {
        let n = p.len();
        if mu4.len() != n || nu_minus2.len() != n {
            return Err(invalid("moment vectors must have one entry per subcarrier"));
        }
        if let Some(v) = mu4.iter().chain(&nu_minus2).find(|v| !(**v >= 1.0 - 1e-12)) {
            return Err(invalid(format!("moments must be >= 1, got {v}")));
        }
        if m == 0 {
            return Err(invalid("m must be >= 1"));
        }
        scene.validate(n)?;
        Ok(Self { p, mu4, nu_minus2, scene, m })
    }

    /// Moments taken from a per-subcarrier alphabet map.
    pub fn from_map(map: &[Arc<Constellation>], p: PowerAllocation, scene: SensingScene, m: usize) -> Result<Self> {
        let moments: Vec<_> = map.iter().map(|c| c.moments()).collect();
        Self::new(
            p,
            moments.iter().map(|mo| mo.mu4).collect(),
            moments.iter().map(|mo| mo.nu_minus2).collect(),
            scene,
            m,
        )
    }

    fn target(&self, q: usize) -> Result<f64> {
        self.scene
            .targets
            .get(q)
            .map(|t| t.sigma_alpha_sq)
            .ok_or_else(|| invalid(format!("target index {q} out of range ({} targets)", self.scene.targets.len())))
    }
}

/// MF SINR after coherent integration of `m` symbols.
///
/// Clutter from other targets is modelled with the lag-averaged sidelobe
/// level (relative delays treated as uniform over the nonzero lags).
pub fn sinr_mf(inputs: &SensingLawInputs, q: usize) -> Result<f64> {
    let sigma_q = inputs.target(q)?;
    let p = inputs.p.as_slice();
    let n = p.len() as f64;
    let r0 = expected_r0_sq_coherent(p, &inputs.mu4, inputs.m)?;
    let clutter = inputs.scene.clutter_power(q) / (n - 1.0) * sidelobe_energy(p, &inputs.mu4, inputs.m)?;
    let noise = inputs.scene.noise_var / inputs.m as f64 * inputs.p.total();
    Ok(sigma_q * r0 / (clutter + noise))
}

/// RF SNR `sigma_q^2 M N^2 / (sigma_z^2 sum nu_n / P_n)`.
pub fn snr_rf(inputs: &SensingLawInputs, q: usize) -> Result<f64> {
    let sigma_q = inputs.target(q)?;
    let p = inputs.p.as_slice();
    let n = p.len() as f64;
    if let Some(i) = p.iter().position(|v| *v <= 0.0) {
        return Err(invalid(format!("RF requires P_n > 0 on every subcarrier (P[{i}] = 0)")));
    }
    let s: f64 = inputs.nu_minus2.iter().zip(p).map(|(nu, p)| nu / p).sum();
    Ok(sigma_q * inputs.m as f64 * n * n / (inputs.scene.noise_var * s))
}

/// Evaluated laws for export.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LawReport {
    pub n: usize,
    pub m: usize,
    pub esl_single_symbol: f64,
    pub esl_coherent: f64,
    pub expected_r0_sq: f64,
    pub sinr_mf: Vec<f64>,
    pub snr_rf: Vec<f64>,
}

impl LawReport {
    pub fn evaluate(inputs: &SensingLawInputs) -> Result<Self> {
        let p = inputs.p.as_slice();
        let q_count = inputs.scene.targets.len();
        Ok(Self {
            n: p.len(),
            m: inputs.m,
            esl_single_symbol: closed_form_esl(p, &inputs.mu4)?,
            esl_coherent: closed_form_esl_coherent(p, &inputs.mu4, inputs.m)?,
            expected_r0_sq: expected_r0_sq_coherent(p, &inputs.mu4, inputs.m)?,
            sinr_mf: (0..q_count).map(|q| sinr_mf(inputs, q).map(overflow_guard)).collect::<Result<_>>()?,
            snr_rf: (0..q_count).map(|q| snr_rf(inputs, q).map(overflow_guard)).collect::<Result<_>>()?,
        })
    }
}

// ---------------------------------------------------------------------------
// Monte-Carlo simulation
// ---------------------------------------------------------------------------

/// One coherent processing interval through the full transmit/receive chain.
#[derive(Debug, Clone)]
pub struct Simulator {
    dft: UnitaryDft,
    map: Vec<Arc<Constellation>>,
    p: PowerAllocation,
    scene: SensingScene,
    m: usize,
    epsilon: f64,
}

/// Output of one simulated interval.
#[derive(Debug, Clone)]
pub struct TrialOutput {
    /// Coherently integrated range profile.
    pub profile: RangeProfile,
    /// Coherently integrated filter spectrum (`e[n]` for delay estimation).
    pub spectrum: Vec<Complex64>,
    /// Reflection coefficients drawn for this interval.
    pub alphas: Vec<Complex64>,
    /// Noise-free zero-lag response per unit reflection: `rbar_0` for MF, `sqrt(N)` for RF.
    pub peak_response: Complex64,
}

impl Simulator {
    pub fn new(map: Vec<Arc<Constellation>>, p: PowerAllocation, scene: SensingScene, m: usize) -> Result<Self> {
        let n = map.len();
        if n < 2 || p.len() != n {
            return Err(invalid(format!("alphabet map ({n}) and power ({}) lengths must match, N >= 2", p.len())));
        }
        if m == 0 {
            return Err(invalid("m must be >= 1"));
        }
        scene.validate(n)?;
        Ok(Self { dft: UnitaryDft::new(n), map, p, scene, m, epsilon: 0.0 })
    }

    /// Tikhonov regularizer for the reciprocal filter (default 0).
    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn n(&self) -> usize {
        self.map.len()
    }

    pub fn scene(&self) -> &SensingScene {
        &self.scene
    }

    pub fn with_noise_var(mut self, noise_var: f64) -> Self {
        self.scene.noise_var = noise_var;
        self
    }

    /// Simulate one interval with reflections held fixed across its `m` symbols.
    pub fn run<R: Rng + ?Sized>(&self, chain: Chain, rng: &mut R) -> Result<TrialOutput> {
        let alphas = draw_reflections(&self.scene, rng);
        self.run_with_reflections(chain, alphas, rng)
    }

    pub fn run_with_reflections<R: Rng + ?Sized>(
        &self,
        chain: Chain,
        alphas: Vec<Complex64>,
        rng: &mut R,
    ) -> Result<TrialOutput> {
        let n = self.n();
        let inv_m = 1.0 / self.m as f64;
        let mut spectrum = vec![Complex64::new(0.0, 0.0); n];
        let mut r0 = 0.0;
        for _ in 0..self.m {
            let symbols: Vec<Complex64> = self.map.iter().map(|c| c.draw_one(rng)).collect();
            let x = self.dft.modulate(&symbols, &self.p)?;
            let y = propagate(&x, &self.scene, &alphas, &self.dft, rng);
            let x_spec = self.dft.forward(&x);
            let y_spec = self.dft.forward(&y);
            let filtered = match chain {
                Chain::Mf => matched_filter_spectrum(&y_spec, &x_spec)?,
                Chain::Rf => reciprocal_filter_spectrum(&y_spec, &x_spec, self.epsilon)?,
            };
            for (acc, v) in spectrum.iter_mut().zip(filtered) {
                *acc += v * inv_m;
            }
            r0 += x_spec.iter().map(|v| v.norm_sqr()).sum::<f64>() * inv_m;
        }
        let bins = self.dft.inverse(&spectrum);
        let peak_response = match chain {
            Chain::Mf => Complex64::new(r0, 0.0),
            Chain::Rf => Complex64::new((n as f64).sqrt(), 0.0),
        };
        Ok(TrialOutput { profile: RangeProfile { bins, chain, m_integrated: self.m }, spectrum, alphas, peak_response })
    }

    /// Run `trials` independent intervals, trial `t` drawing from stream `t` of `seed`.
    pub fn run_trials(&self, chain: Chain, trials: usize, seed: u64) -> Result<Vec<TrialOutput>> {
        (0..trials).into_par_iter().map(|t| self.run(chain, &mut trial_rng(seed, t as u64))).collect()
    }
}

/// Monte-Carlo `E|rbar_k|^2` per lag plus the lag-averaged sidelobe power.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AcfPowerEstimate {
    pub per_lag: Vec<MeanEstimate>,
    /// Average of `|rbar_k|^2` over `k = 1..N-1`, estimated per trial.
    pub sidelobe: MeanEstimate,
}

/// Empirical ACF power of the transmit signal for a given alphabet map and power.
///
/// Each trial averages the ACF of `m` independent symbols; the ACF is obtained
/// by matched-filtering the noise-free, undelayed transmit signal with itself.
pub fn empirical_acf_power(
    map: &[Arc<Constellation>],
    p: &PowerAllocation,
    m: usize,
    trials: usize,
    seed: u64,
) -> Result<AcfPowerEstimate> {
    if trials == 0 {
        return Err(invalid("trials must be >= 1"));
    }
    let scene = SensingScene { targets: vec![crate::ofdm::Target { sigma_alpha_sq: 1.0, tau: 0.0 }], noise_var: 0.0 };
    let sim = Simulator::new(map.to_vec(), p.clone(), scene, m)?;
    let unit = vec![Complex64::new(1.0, 0.0)];
    let per_trial: Vec<Vec<f64>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t as u64);
            sim.run_with_reflections(Chain::Mf, unit.clone(), &mut rng).map(|o| o.profile.power())
        })
        .collect::<Result<_>>()?;
    let n = map.len();
    let per_lag =
        (0..n).map(|k| MeanEstimate::from_samples(&per_trial.iter().map(|v| v[k]).collect::<Vec<_>>())).collect();
    let lag_avg: Vec<f64> = per_trial.iter().map(|v| pairwise_sum(&v[1..]) / (n - 1) as f64).collect();
    Ok(AcfPowerEstimate { per_lag, sidelobe: MeanEstimate::from_samples(&lag_avg) })
}

/// Trial-level sample for [`measured_sinr`].
#[derive(Debug, Clone)]
pub struct SinrSample {
    pub profile: RangeProfile,
    pub alphas: Vec<Complex64>,
    pub peak_response: Complex64,
}

impl From<TrialOutput> for SinrSample {
    fn from(o: TrialOutput) -> Self {
        Self { profile: o.profile, alphas: o.alphas, peak_response: o.peak_response }
    }
}

/// Effective SINR at the true delay of target `q`, estimated over trials.
///
/// Desired power is `|alpha_q * peak_response|^2`; everything else in the
/// bin at `tau_q` counts as interference plus noise. Restricted to integer
/// delays. Returns `+inf` when the residual vanishes.
pub fn measured_sinr(samples: &[SinrSample], scene: &SensingScene, q: usize) -> Result<f64> {
    let target = scene.targets.get(q).ok_or_else(|| invalid(format!("target index {q} out of range")))?;
    if target.tau.fract() != 0.0 {
        return Err(invalid(format!("measured SINR needs an integer delay, got {}", target.tau)));
    }
    if samples.is_empty() {
        return Err(invalid("no samples"));
    }
    let bin = target.tau as usize;
    let mut desired = Vec::with_capacity(samples.len());
    let mut residual = Vec::with_capacity(samples.len());
    for s in samples {
        let d = s.alphas[q] * s.peak_response;
        desired.push(d.norm_sqr());
        residual.push((s.profile.bins[bin] - d).norm_sqr());
    }
    let den = pairwise_sum(&residual);
    if den == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(overflow_guard(pairwise_sum(&desired) / den))
}

/// Monte-Carlo estimate of the per-bin output noise variance with no targets present.
pub fn empirical_noise_variance(
    chain: Chain,
    map: &[Arc<Constellation>],
    p: &PowerAllocation,
    noise_var: f64,
    m: usize,
    trials: usize,
    seed: u64,
) -> Result<MeanEstimate> {
    let scene = SensingScene { targets: vec![], noise_var };
    let sim = Simulator::new(map.to_vec(), p.clone(), scene, m)?;
    let per_trial: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t as u64);
            sim.run_with_reflections(chain, vec![], &mut rng)
                .map(|o| pairwise_sum(&o.profile.power()) / o.profile.len() as f64)
        })
        .collect::<Result<_>>()?;
    Ok(MeanEstimate::from_samples(&per_trial))
}
