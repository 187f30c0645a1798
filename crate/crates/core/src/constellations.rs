//! Finite constellation alphabets, their moment statistics and BER models.
//!
//! Every alphabet is normalized to zero mean and unit average power on
//! construction. The two statistics that drive the sensing laws are
//!
//! * the kurtosis `mu4 = E|s - Es|^4 / (E|s - Es|^2)^2`, which sets the
//!   matched-filter sidelobe level, and
//! * the inverse second moment `nu_minus2 = E[|s|^-2]`, which sets the noise
//!   enhancement of the reciprocal filter.
//!
//! Both are exact averages over the alphabet with equiprobable symbols.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::stats::trial_rng;

/// Identifier of a constellation alphabet.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum ConstellationId {
    Qpsk,
    Qam16,
    Qam64,
    Apsk32,
    Custom(String),
}

impl fmt::Display for ConstellationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConstellationId::Qpsk => f.write_str("QPSK"),
            ConstellationId::Qam16 => f.write_str("16QAM"),
            ConstellationId::Qam64 => f.write_str("64QAM"),
            ConstellationId::Apsk32 => f.write_str("32APSK"),
            ConstellationId::Custom(name) => f.write_str(name),
        }
    }
}

impl From<String> for ConstellationId {
    fn from(s: String) -> Self {
        match s.to_ascii_uppercase().as_str() {
            "QPSK" => ConstellationId::Qpsk,
            "16QAM" | "QAM16" => ConstellationId::Qam16,
            "64QAM" | "QAM64" => ConstellationId::Qam64,
            "32APSK" | "APSK32" => ConstellationId::Apsk32,
            _ => ConstellationId::Custom(s),
        }
    }
}

impl From<ConstellationId> for String {
    fn from(id: ConstellationId) -> Self {
        id.to_string()
    }
}

impl FromStr for ConstellationId {
    type Err = std::convert::Infallible;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(ConstellationId::from(s.to_string()))
    }
}

/// Monotone BER-versus-SNR samples used in table mode.
///
/// Samples are `(gamma, ber)` pairs with `gamma` the linear symbol SNR.
/// Lookups interpolate `ln(ber)` linearly in `gamma`; the point `(0, 0.5)`
/// anchors the curve below the first sample and the last segment is
/// extended beyond the final sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BerTable {
    samples: Vec<(f64, f64)>,
}

impl BerTable {
    pub fn new(samples: Vec<(f64, f64)>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(invalid("BER table needs at least two samples"));
        }
        for (i, &(g, b)) in samples.iter().enumerate() {
            if !(g.is_finite() && g > 0.0) {
                return Err(invalid(format!("BER table gamma[{i}] = {g} must be positive")));
            }
            if !(b > 0.0 && b < 0.5) {
                return Err(invalid(format!("BER table ber[{i}] = {b} must lie in (0, 0.5)")));
            }
            if i > 0 {
                let (g0, b0) = samples[i - 1];
                if g <= g0 || b >= b0 {
                    return Err(invalid(format!(
                        "BER table must be strictly increasing in gamma and strictly decreasing in BER (sample {i})"
                    )));
                }
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[(f64, f64)] {
        &self.samples
    }

    /// Lowest BER covered by the table.
    pub fn floor(&self) -> f64 {
        self.samples.last().map(|s| s.1).unwrap_or(0.5)
    }

    /// Largest SNR covered by the table.
    pub fn max_gamma(&self) -> f64 {
        self.samples.last().map(|s| s.0).unwrap_or(0.0)
    }

    pub fn lookup(&self, gamma: f64) -> f64 {
        let anchor = (0.0, 0.5);
        let n = self.samples.len();
        let (a, b) = if gamma <= self.samples[0].0 {
            (anchor, self.samples[0])
        } else if gamma >= self.samples[n - 1].0 {
            (self.samples[n - 2], self.samples[n - 1])
        } else {
            let i = self.samples.partition_point(|s| s.0 <= gamma);
            (self.samples[i - 1], self.samples[i])
        };
        let t = (gamma - a.0) / (b.0 - a.0);
        let ln = a.1.ln() + t * (b.1.ln() - a.1.ln());
        ln.exp().min(0.5)
    }
}

/// How bit error rate is computed for an alphabet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BerModel {
    /// `Q(sqrt(gamma))`.
    ClosedFormQpsk,
    /// Gray-mapped square M-QAM approximation.
    ClosedFormSquareQam,
    Table(BerTable),
}

/// Gaussian tail probability `Q(x) = P(N(0,1) > x)`.
///
/// Evaluated through `erfc`; relative error stays below 1e-12 wherever the
/// result is a normal f64 (`x` up to about 37.5). Beyond that it underflows to 0.
pub fn q_function(x: f64) -> f64 {
    0.5 * libm::erfc(x * FRAC_1_SQRT_2)
}

/// A normalized finite alphabet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constellation {
    id: ConstellationId,
    points: Vec<Complex64>,
    bits_per_symbol: u32,
    ber_model: BerModel,
}

/// Exact moment statistics of an alphabet under equiprobable symbols.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mu4: f64,
    pub nu_minus2: f64,
    pub rate_bits: f64,
}

/// Normalize a raw point set to zero mean and unit power.
///
/// Only an affine shift and a uniform positive scale are applied, so the
/// relative geometry is preserved.
pub fn normalize(id: ConstellationId, raw: &[Complex64]) -> Result<Constellation> {
    let count = raw.len();
    if count < 4 || !count.is_power_of_two() {
        return Err(Error::DegenerateConstellation(format!("{id}: alphabet size {count} must be a power of two >= 4")));
    }
    if raw.iter().any(|c| !(c.re.is_finite() && c.im.is_finite())) {
        return Err(Error::DegenerateConstellation(format!("{id}: non-finite point")));
    }
    let mean = raw.iter().sum::<Complex64>() / count as f64;
    let centered: Vec<Complex64> = raw.iter().map(|c| c - mean).collect();
    let energy = centered.iter().map(|c| c.norm_sqr()).sum::<f64>() / count as f64;
    let spread = raw.iter().map(|c| c.norm()).fold(0.0, f64::max).max(1.0);
    if !(energy > (1e-12 * spread).powi(2)) {
        return Err(Error::DegenerateConstellation(format!(
            "{id}: points are identical; zero-mean normalization maps them to the origin"
        )));
    }
    let scale = energy.sqrt().recip();
    let points: Vec<Complex64> = centered.iter().map(|c| c * scale).collect();

    for i in 0..count {
        if points[i].norm() < 1e-9 {
            return Err(Error::DegenerateConstellation(format!(
                "{id}: point {i} lies at the origin after normalization (inverse moment undefined)"
            )));
        }
        for j in 0..i {
            if (points[i] - points[j]).norm() < 1e-9 {
                return Err(Error::DegenerateConstellation(format!("{id}: points {j} and {i} coincide")));
            }
        }
    }

    let ber_model = default_ber_model(&id, count);
    Ok(Constellation { id, points, bits_per_symbol: count.trailing_zeros(), ber_model })
}

fn default_ber_model(id: &ConstellationId, count: usize) -> BerModel {
    match id {
        ConstellationId::Qpsk => BerModel::ClosedFormQpsk,
        ConstellationId::Apsk32 => BerModel::Table(apsk32_ber_table().clone()),
        _ if count == 4 => BerModel::ClosedFormQpsk,
        _ => BerModel::ClosedFormSquareQam,
    }
}

fn square_qam_raw(order: usize) -> Vec<Complex64> {
    let side = (order as f64).sqrt().round() as usize;
    let levels: Vec<f64> = (0..side).map(|k| (2 * k) as f64 - (side - 1) as f64).collect();
    let mut pts = Vec::with_capacity(order);
    for &re in &levels {
        for &im in &levels {
            pts.push(Complex64::new(re, im));
        }
    }
    pts
}

/// Ring radii relative to the inner ring (4 + 12 + 16 points).
pub const APSK32_RING_RATIOS: (f64, f64) = (2.84, 5.27);

fn apsk32_raw() -> Vec<Complex64> {
    let (g1, g2) = APSK32_RING_RATIOS;
    let rings: [(usize, f64, f64); 3] = [(4, 1.0, PI / 4.0), (12, g1, PI / 12.0), (16, g2, 0.0)];
    let mut pts = Vec::with_capacity(32);
    for (count, radius, offset) in rings {
        for k in 0..count {
            let phase = offset + 2.0 * PI * k as f64 / count as f64;
            pts.push(Complex64::from_polar(radius, phase));
        }
    }
    pts
}

impl Constellation {
    pub fn qpsk() -> Self {
        let raw = [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)].map(|(re, im)| Complex64::new(re, im));
        normalize(ConstellationId::Qpsk, &raw).expect("QPSK is a valid alphabet")
    }

    pub fn qam16() -> Self {
        normalize(ConstellationId::Qam16, &square_qam_raw(16)).expect("16QAM is a valid alphabet")
    }

    pub fn qam64() -> Self {
        normalize(ConstellationId::Qam64, &square_qam_raw(64)).expect("64QAM is a valid alphabet")
    }

    /// 32APSK with the 4+12+16 ring layout.
    pub fn apsk32() -> Self {
        normalize(ConstellationId::Apsk32, &apsk32_raw()).expect("32APSK is a valid alphabet")
    }

    pub fn builtin(id: &ConstellationId) -> Option<Self> {
        match id {
            ConstellationId::Qpsk => Some(Self::qpsk()),
            ConstellationId::Qam16 => Some(Self::qam16()),
            ConstellationId::Qam64 => Some(Self::qam64()),
            ConstellationId::Apsk32 => Some(Self::apsk32()),
            ConstellationId::Custom(_) => None,
        }
    }

    pub fn id(&self) -> &ConstellationId {
        &self.id
    }

    pub fn points(&self) -> &[Complex64] {
        &self.points
    }

    pub fn size(&self) -> usize {
        self.points.len()
    }

    pub fn bits_per_symbol(&self) -> u32 {
        self.bits_per_symbol
    }

    pub fn rate_bits(&self) -> f64 {
        self.bits_per_symbol as f64
    }

    pub fn ber_model(&self) -> &BerModel {
        &self.ber_model
    }

    pub fn with_ber_model(mut self, model: BerModel) -> Self {
        self.ber_model = model;
        self
    }

    /// Exact moments by enumeration over the alphabet.
    pub fn moments(&self) -> Moments {
        let count = self.points.len() as f64;
        let mean = self.points.iter().sum::<Complex64>() / count;
        let mut second = 0.0;
        let mut fourth = 0.0;
        let mut inverse = 0.0;
        for c in &self.points {
            let d2 = (c - mean).norm_sqr();
            second += d2;
            fourth += d2 * d2;
            inverse += c.norm_sqr().recip();
        }
        second /= count;
        fourth /= count;
        inverse /= count;
        // Both ratios are scale invariant, so residual rounding in the unit-power
        // normalization does not leak into them.
        let power = self.points.iter().map(|c| c.norm_sqr()).sum::<f64>() / count;
        Moments { mu4: fourth / (second * second), nu_minus2: inverse * power, rate_bits: self.rate_bits() }
    }

    /// Bit error rate at linear symbol SNR `gamma`.
    pub fn ber(&self, gamma: f64) -> Result<f64> {
        if !(gamma >= 0.0) {
            return Err(invalid(format!("SNR must be nonnegative, got {gamma}")));
        }
        match &self.ber_model {
            BerModel::ClosedFormQpsk => Ok(q_function(gamma.sqrt())),
            BerModel::ClosedFormSquareQam => {
                let m = self.size();
                let side = (m as f64).sqrt().round() as usize;
                if side * side != m {
                    return Err(Error::UnsupportedBerModel {
                        id: self.id.to_string(),
                        reason: format!("{m}-point alphabet is not square QAM; supply a BER table (table mode)"),
                    });
                }
                let m = m as f64;
                let factor = 4.0 / m.log2() * (1.0 - 1.0 / m.sqrt());
                Ok(factor * q_function((3.0 * gamma / (m - 1.0)).sqrt()))
            }
            BerModel::Table(table) => Ok(table.lookup(gamma)),
        }
    }

    /// Smallest linear SNR whose BER does not exceed `ber_th`.
    ///
    /// Bisection to relative tolerance 1e-10; the returned point always
    /// satisfies `ber(gamma) <= ber_th`.
    pub fn min_snr_for_ber(&self, ber_th: f64) -> Result<f64> {
        let ceiling = self.ber(0.0)?;
        if !(ber_th > 0.0 && ber_th < ceiling) {
            return Err(invalid(format!("BER threshold {ber_th:e} must lie in (0, {ceiling}) for {}", self.id)));
        }
        if let BerModel::Table(table) = &self.ber_model {
            if ber_th < table.floor() {
                return Err(Error::UnreachableBer { ber_th, floor: table.floor() });
            }
        }
        let mut lo = 0.0;
        let mut hi = 1.0;
        while self.ber(hi)? > ber_th {
            lo = hi;
            hi *= 2.0;
            if hi > 1e15 {
                return Err(Error::UnreachableBer { ber_th, floor: self.ber(hi)? });
            }
        }
        while hi - lo > 1e-10 * hi.max(1e-300) {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.ber(mid)? > ber_th {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(hi)
    }

    /// Minimum transmit power meeting `ber_th` on a subcarrier with
    /// squared channel gain `channel_gain_sq` and noise power `noise_psd_bw` (N0 * delta_f).
    pub fn min_power(&self, channel_gain_sq: f64, noise_psd_bw: f64, ber_th: f64) -> Result<f64> {
        if !(channel_gain_sq > 0.0) || !channel_gain_sq.is_finite() {
            return Err(Error::InfeasibleSubcarrier(format!(
                "channel gain {channel_gain_sq} cannot support {}",
                self.id
            )));
        }
        if !(noise_psd_bw >= 0.0) {
            return Err(invalid(format!("noise power must be nonnegative, got {noise_psd_bw}")));
        }
        Ok(self.min_snr_for_ber(ber_th)? * noise_psd_bw / channel_gain_sq)
    }

    /// I.i.d. equiprobable symbols, reproducible for a fixed seed.
    pub fn draw_symbols(&self, count: usize, seed: u64) -> Vec<Complex64> {
        let mut rng = trial_rng(seed, 0);
        self.draw_with(count, &mut rng)
    }

    pub fn draw_with<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<Complex64> {
        (0..count).map(|_| self.draw_one(rng)).collect()
    }

    #[inline]
    pub fn draw_one<R: Rng + ?Sized>(&self, rng: &mut R) -> Complex64 {
        self.points[rng.random_range(0..self.points.len())]
    }

    /// Load a constellation from JSON: `{"id": "...", "points": [[re, im], ...]}`.
    ///
    /// An optional `"ber_table": [[gamma, ber], ...]` switches the BER model to
    /// table mode. Normalization is applied on load.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: ConstellationFile = serde_json::from_str(text)?;
        file.into_constellation()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

/// On-disk constellation definition.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstellationFile {
    pub id: String,
    pub points: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ber_table: Option<Vec<[f64; 2]>>,
}

impl ConstellationFile {
    pub fn into_constellation(self) -> Result<Constellation> {
        let raw: Vec<Complex64> = self.points.iter().map(|p| Complex64::new(p[0], p[1])).collect();
        let c = normalize(ConstellationId::from(self.id), &raw)?;
        match self.ber_table {
            Some(samples) => {
                let table = BerTable::new(samples.into_iter().map(|s| (s[0], s[1])).collect())?;
                Ok(c.with_ber_model(BerModel::Table(table)))
            }
            None => Ok(c),
        }
    }
}

/// Generated AWGN table for 32APSK, see `examples/gen_ber_table.rs`.
const APSK32_TABLE_JSON: &str = include_str!("../data/apsk32_ber.json");

#[derive(Deserialize)]
struct GeneratedTable {
    samples: Vec<[f64; 2]>,
}

/// The shipped (Monte-Carlo generated) 32APSK BER table.
pub fn apsk32_ber_table() -> &'static BerTable {
    static TABLE: OnceLock<BerTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        let parsed: GeneratedTable = serde_json::from_str(APSK32_TABLE_JSON).expect("embedded 32APSK table parses");
        BerTable::new(parsed.samples.into_iter().map(|s| (s[0], s[1])).collect())
            .expect("embedded 32APSK table is monotone")
    })
}

/// Monte-Carlo AWGN error-rate estimate for a minimum-distance detector.
///
/// BER is approximated as `SER / bits_per_symbol` (Gray-labeling
/// approximation). Returns `(gamma_linear, ber, symbol_errors)` per SNR point.
pub fn monte_carlo_ber(c: &Constellation, gammas_db: &[f64], symbols: usize, seed: u64) -> Vec<(f64, f64, usize)> {
    use rand_distr::{Distribution, StandardNormal};
    gammas_db
        .iter()
        .enumerate()
        .map(|(k, &db)| {
            let gamma = 10f64.powf(db / 10.0);
            let sigma = (0.5 / gamma).sqrt();
            let mut rng = trial_rng(seed, k as u64);
            let mut errors = 0usize;
            for _ in 0..symbols {
                let idx = rng.random_range(0..c.size());
                let n_re: f64 = StandardNormal.sample(&mut rng);
                let n_im: f64 = StandardNormal.sample(&mut rng);
                let r = c.points[idx] + Complex64::new(sigma * n_re, sigma * n_im);
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (j, p) in c.points.iter().enumerate() {
                    let d = (r - p).norm_sqr();
                    if d < best_d {
                        best_d = d;
                        best = j;
                    }
                }
                if best != idx {
                    errors += 1;
                }
            }
            let ser = errors as f64 / symbols as f64;
            (gamma, ser / c.bits_per_symbol as f64, errors)
        })
        .collect()
}
