//! Sensing-optimal power rules, the flat-fading constellation mixture
//! solver, the per-subcarrier bilevel Lagrangian heuristic, and an
//! exhaustive oracle for small instances.

use std::collections::HashMap;
use std::sync::Arc;

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constellations::{Constellation, Moments};
use crate::error::{invalid, Error, Result};
use crate::ofdm::{PowerAllocation, SensingScene};
use crate::sensing::{overflow_guard, Chain};

/// Largest instance `J^N` the exhaustive oracle accepts.
pub const ORACLE_LIMIT: f64 = 1e6;

/// `P_max` used when a problem does not set one, as a multiple of `P_ave`.
pub const DEFAULT_PMAX_FACTOR: f64 = 1e3;

// ---------------------------------------------------------------------------
// Closed-form rules
// ---------------------------------------------------------------------------

/// MF rule: `P_n = N P_ave / (b_n sum 1/b_i)`, `b_n = (mu4_n - 1)/M + N/(N-1)`.
pub fn mf_power_rule(mu4: &[f64], m: usize, p_ave: f64) -> Result<PowerAllocation> {
    let n = mu4.len();
    if n < 2 {
        return Err(invalid("MF power rule needs N >= 2"));
    }
    if m == 0 || !(p_ave > 0.0) {
        return Err(invalid("MF power rule needs M >= 1 and P_ave > 0"));
    }
    let nf = n as f64;
    let b: Vec<f64> = mu4.iter().map(|mu| (mu - 1.0) / m as f64 + nf / (nf - 1.0)).collect();
    let inv_sum: f64 = b.iter().map(|v| 1.0 / v).sum();
    PowerAllocation::new(b.iter().map(|bn| nf * p_ave / (bn * inv_sum)).collect())
}

/// RF rule: `P_n = N P_ave sqrt(nu_n) / sum sqrt(nu_i)`.
pub fn rf_power_rule(nu_minus2: &[f64], p_ave: f64) -> Result<PowerAllocation> {
    let n = nu_minus2.len();
    if n == 0 || !(p_ave > 0.0) {
        return Err(invalid("RF power rule needs N >= 1 and P_ave > 0"));
    }
    let nf = n as f64;
    let s: f64 = nu_minus2.iter().map(|v| v.sqrt()).sum();
    PowerAllocation::new(nu_minus2.iter().map(|v| nf * p_ave * v.sqrt() / s).collect())
}

/// MF objective minimized by [`mf_power_rule`]: `sum b_n P_n^2`.
pub fn mf_rule_objective(mu4: &[f64], m: usize, p: &[f64]) -> f64 {
    let nf = p.len() as f64;
    mu4.iter().zip(p).map(|(mu, p)| ((mu - 1.0) / m as f64 + nf / (nf - 1.0)) * p * p).sum()
}

/// RF objective minimized by [`rf_power_rule`]: `sum nu_n / P_n`.
pub fn rf_rule_objective(nu_minus2: &[f64], p: &[f64]) -> f64 {
    nu_minus2.iter().zip(p).map(|(nu, p)| nu / p).sum()
}

// ---------------------------------------------------------------------------
// Shared pieces
// ---------------------------------------------------------------------------

/// MF moment coefficient `C (N/M)(mu4 - 1) + C N^2/(N-1)`.
pub fn mf_coefficient(mu4: f64, n: usize, m: usize, clutter_power: f64) -> f64 {
    let nf = n as f64;
    clutter_power * (nf / m as f64) * (mu4 - 1.0) + clutter_power * nf * nf / (nf - 1.0)
}

/// Per-class cost of transmitting power `k` on one subcarrier.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Cost {
    /// `a k^2`
    Mf(f64),
    /// `nu / k`
    Rf(f64),
}

impl Cost {
    fn value(self, k: f64) -> f64 {
        match self {
            Cost::Mf(a) => a * k * k,
            Cost::Rf(nu) => {
                if k > 0.0 {
                    nu / k
                } else {
                    f64::INFINITY
                }
            }
        }
    }

    /// Slope of the unclamped optimal power in the water level.
    fn weight(self) -> f64 {
        match self {
            Cost::Mf(a) => 0.5 / a,
            Cost::Rf(nu) => nu.sqrt(),
        }
    }

    fn reduced_cost(self, psi: f64, lo: f64, hi: f64) -> f64 {
        match self {
            Cost::Mf(a) => reduced_cost_phi(a, lo, hi, psi),
            Cost::Rf(nu) => reduced_cost_phi_rf(nu, lo, hi, psi),
        }
    }

    /// Minimizer of `cost(k) - psi k` over `[lo, hi]`.
    fn best_power(self, psi: f64, lo: f64, hi: f64) -> f64 {
        match self {
            Cost::Mf(a) => (psi / (2.0 * a)).clamp(lo, hi),
            Cost::Rf(nu) => {
                if psi < 0.0 {
                    (nu / -psi).sqrt().clamp(lo, hi)
                } else {
                    hi
                }
            }
        }
    }
}

fn cost_for(chain: Chain, mu4: f64, nu: f64, n: usize, m: usize, clutter: f64) -> Cost {
    match chain {
        Chain::Mf => Cost::Mf(mf_coefficient(mu4, n, m, clutter)),
        Chain::Rf => Cost::Rf(nu),
    }
}

/// Reduced cost `min_{lo <= k <= hi} a k^2 - psi k` in its three-branch form.
pub fn reduced_cost_phi(a: f64, p_min: f64, p_max: f64, psi: f64) -> f64 {
    let k0 = psi / (2.0 * a);
    if k0 <= p_min {
        a * p_min * p_min - psi * p_min
    } else if k0 <= p_max {
        -psi * psi / (4.0 * a)
    } else {
        a * p_max * p_max - psi * p_max
    }
}

/// Reduced cost `min_{lo <= k <= hi} nu/k - psi k`.
///
/// For `psi < 0` the unconstrained minimizer is `sqrt(nu / -psi)` with value
/// `2 sqrt(-nu psi)`; for `psi >= 0` the objective decreases in `k` and the
/// minimum sits at `p_max`.
pub fn reduced_cost_phi_rf(nu: f64, p_min: f64, p_max: f64, psi: f64) -> f64 {
    if psi >= 0.0 {
        return nu / p_max - psi * p_max;
    }
    let k0 = (nu / -psi).sqrt();
    if k0 <= p_min {
        nu / p_min - psi * p_min
    } else if k0 <= p_max {
        2.0 * (-nu * psi).sqrt()
    } else {
        nu / p_max - psi * p_max
    }
}

/// One entry of a water-filling problem: power `clamp(w u, lo, hi)` counted `mult` times.
#[derive(Debug, Clone, Copy)]
struct Level {
    w: f64,
    lo: f64,
    hi: f64,
    mult: f64,
}

/// Exact water level `u` with `sum mult clamp(w u, lo, hi) = budget`.
///
/// Returns the per-entry powers, or `None` when the budget lies outside the
/// box-reachable range.
fn water_fill(levels: &[Level], budget: f64) -> Option<Vec<f64>> {
    let base: f64 = levels.iter().map(|l| l.mult * l.lo).sum();
    let top: f64 = levels.iter().map(|l| l.mult * l.hi).sum();
    let slack = 1e-12 * budget.abs().max(1e-300);
    if budget < base - slack || budget > top + slack {
        return None;
    }
    if budget <= base {
        return Some(levels.iter().map(|l| l.lo).collect());
    }
    if budget >= top {
        return Some(levels.iter().map(|l| l.hi).collect());
    }
    let mut events: Vec<(f64, f64)> = Vec::with_capacity(2 * levels.len());
    for l in levels.iter().filter(|l| l.mult > 0.0) {
        events.push((l.lo / l.w, l.mult * l.w));
        events.push((l.hi / l.w, -l.mult * l.w));
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let (mut s, mut slope, mut prev) = (base, 0.0, 0.0);
    let mut u = events.last().map(|e| e.0).unwrap_or(0.0);
    for (at, d) in events {
        let next = s + slope * (at - prev);
        if next >= budget && slope > 0.0 {
            u = prev + (budget - s) / slope;
            break;
        }
        s = next;
        prev = at;
        slope += d;
    }
    Some(levels.iter().map(|l| (l.w * u).clamp(l.lo, l.hi)).collect())
}

// ---------------------------------------------------------------------------
// Flat fading: constellation mixture
// ---------------------------------------------------------------------------

/// A candidate constellation in the flat-fading problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatClass {
    pub id: String,
    pub moments: Moments,
    /// Minimum per-subcarrier power meeting the BER target.
    pub p_min: f64,
}

impl FlatClass {
    /// Class from a constellation with `P_min = gamma_min * noise / gain`.
    pub fn from_constellation(c: &Constellation, gain_sq: f64, noise_psd_bw: f64, ber_th: f64) -> Result<Self> {
        Ok(Self { id: c.id().to_string(), moments: c.moments(), p_min: c.min_power(gain_sq, noise_psd_bw, ber_th)? })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatProblem {
    pub chain: Chain,
    pub classes: Vec<FlatClass>,
    pub r_min: f64,
    pub p_ave: f64,
    pub p_max: f64,
    /// N and M enter the MF coefficients only.
    pub n_subcarriers: usize,
    pub n_symbols: usize,
    pub clutter_power: f64,
}

impl FlatProblem {
    /// Problem with `N = 64`, `M = 16`, unit clutter power and the default `P_max`.
    pub fn new(chain: Chain, classes: Vec<FlatClass>, r_min: f64, p_ave: f64) -> Self {
        Self {
            chain,
            classes,
            r_min,
            p_ave,
            p_max: DEFAULT_PMAX_FACTOR * p_ave,
            n_subcarriers: 64,
            n_symbols: 16,
            clutter_power: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(invalid("no constellation classes"));
        }
        if !(self.p_ave > 0.0) || !(self.p_max >= self.p_ave) {
            return Err(invalid(format!("need 0 < P_ave <= P_max, got {} and {}", self.p_ave, self.p_max)));
        }
        if self.n_subcarriers < 2 || self.n_symbols == 0 {
            return Err(invalid("need N >= 2 and M >= 1"));
        }
        if !(self.clutter_power > 0.0) {
            return Err(invalid("clutter power must be positive"));
        }
        if let Some(c) = self.classes.iter().find(|c| !(c.p_min >= 0.0)) {
            return Err(invalid(format!("class {} has invalid P_min {}", c.id, c.p_min)));
        }
        Ok(())
    }

    fn cost(&self, j: usize) -> Cost {
        let mo = &self.classes[j].moments;
        cost_for(self.chain, mo.mu4, mo.nu_minus2, self.n_subcarriers, self.n_symbols, self.clutter_power)
    }

    fn rate(&self, j: usize) -> f64 {
        self.classes[j].moments.rate_bits
    }

    /// Optimal per-class powers and objective for fixed proportions.
    fn inner(&self, eta: &[f64]) -> Option<(f64, Vec<f64>)> {
        let levels: Vec<Level> = (0..eta.len())
            .map(|j| Level { w: self.cost(j).weight(), lo: self.classes[j].p_min, hi: self.p_max, mult: eta[j] })
            .collect();
        let p = water_fill(&levels, self.p_ave)?;
        let obj = (0..eta.len()).filter(|&j| eta[j] > 0.0).map(|j| eta[j] * self.cost(j).value(p[j])).sum();
        Some((obj, p))
    }
}

/// Flat-fading solution: class proportions and per-class powers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixturePlan {
    pub chain: Chain,
    pub class_ids: Vec<String>,
    pub eta: Vec<f64>,
    pub p_per_class: Vec<f64>,
    pub theta: Vec<f64>,
    /// MF: `sum c_j theta_j^2 / eta_j`; RF: `sum nu_j eta_j^2 / theta_j`.
    pub objective: f64,
    pub rates: Vec<f64>,
    pub mu4: Vec<f64>,
    pub nu_minus2: Vec<f64>,
}

impl MixturePlan {
    pub fn average_rate(&self) -> f64 {
        self.eta.iter().zip(&self.rates).map(|(e, r)| e * r).sum()
    }
}

/// Number of classes with `eta_j > tol`.
pub fn support_size(plan: &MixturePlan, tol: f64) -> usize {
    plan.eta.iter().filter(|e| **e > tol).count()
}

/// Golden-section minimization of a convex function on `[a, b]`; endpoints are candidates too.
fn golden_min(f: &mut dyn FnMut(f64) -> f64, a: f64, b: f64, tol: f64) -> (f64, f64) {
    let fa = f(a);
    if b - a <= tol {
        return (a, fa);
    }
    let fb = f(b);
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let (mut lo, mut hi) = (a, b);
    let mut x1 = hi - r * (hi - lo);
    let mut x2 = lo + r * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > tol {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - r * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + r * (hi - lo);
            f2 = f(x2);
        }
    }
    let (xm, fm) = if f1 <= f2 { (x1, f1) } else { (x2, f2) };
    // Endpoints win ties so that boundary optima land exactly on the boundary.
    [(a, fa), (b, fb), (xm, fm)].into_iter().fold((a, f64::INFINITY), |best, c| if c.1 < best.1 { c } else { best })
}

const ETA_TOL: f64 = 1e-13;

/// Half-plane `a1 x + a2 y <= b`.
type HalfPlane = (f64, f64, f64);

fn interval_1d(cons: &[(f64, f64)]) -> Option<(f64, f64)> {
    // Each entry `a x <= b`.
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for &(a, b) in cons {
        if a > 0.0 {
            hi = hi.min(b / a);
        } else if a < 0.0 {
            lo = lo.max(b / a);
        } else if b < -1e-12 {
            return None;
        }
    }
    if lo > hi + 1e-12 {
        None
    } else {
        Some((lo, hi.max(lo)))
    }
}

fn polygon_x_range(cons: &[HalfPlane]) -> Option<(f64, f64)> {
    let mut xs: Vec<f64> = Vec::new();
    for i in 0..cons.len() {
        for k in i + 1..cons.len() {
            let (a1, a2, b1) = cons[i];
            let (c1, c2, b2) = cons[k];
            let det = a1 * c2 - a2 * c1;
            if det.abs() < 1e-14 {
                continue;
            }
            let x = (b1 * c2 - a2 * b2) / det;
            let y = (a1 * b2 - b1 * c1) / det;
            let scale = 1.0 + x.abs() + y.abs();
            if cons.iter().all(|&(p, q, r)| p * x + q * y <= r + 1e-12 * scale * (1.0 + r.abs())) {
                xs.push(x);
            }
        }
    }
    if xs.is_empty() {
        return None;
    }
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Some((lo.max(0.0), hi.min(1.0)))
}

fn y_range(cons: &[HalfPlane], x: f64) -> Option<(f64, f64)> {
    let v: Vec<(f64, f64)> = cons.iter().map(|&(a1, a2, b)| (a2, b - a1 * x)).collect();
    interval_1d(&v).map(|(lo, hi)| (lo.max(0.0), hi.min(1.0 - x).max(lo.max(0.0))))
}

#[derive(Debug, Clone)]
struct Candidate {
    support: Vec<usize>,
    eta: Vec<f64>,
    objective: f64,
}

impl FlatProblem {
    fn evaluate_on(&self, support: &[usize], weights: &[f64]) -> f64 {
        let mut eta = vec![0.0; self.classes.len()];
        for (j, w) in support.iter().zip(weights) {
            eta[*j] = *w;
        }
        self.inner(&eta).map(|r| r.0).unwrap_or(f64::INFINITY)
    }

    fn solve_support(&self, support: &[usize]) -> Option<Candidate> {
        let r = |j: usize| self.rate(j);
        let pm = |j: usize| self.classes[j].p_min;
        let (x, obj) = match *support {
            [j] => {
                if r(j) < self.r_min - 1e-12 || pm(j) > self.p_ave * (1.0 + 1e-12) {
                    return None;
                }
                (vec![1.0], self.evaluate_on(support, &[1.0]))
            }
            [i, k] => {
                // eta_i = t, eta_k = 1 - t
                let cons =
                    [(-1.0, 0.0), (1.0, 1.0), (-(r(i) - r(k)), r(k) - self.r_min), (pm(i) - pm(k), self.p_ave - pm(k))];
                let (lo, hi) = interval_1d(&cons)?;
                let (lo, hi) = (lo.max(0.0), hi.min(1.0));
                let mut f = |t: f64| self.evaluate_on(support, &[t, 1.0 - t]);
                let (t, v) = golden_min(&mut f, lo, hi, ETA_TOL);
                (vec![t, 1.0 - t], v)
            }
            [i, k, l] => {
                // eta_i = x, eta_k = y, eta_l = 1 - x - y
                let cons: [HalfPlane; 5] = [
                    (-1.0, 0.0, 0.0),
                    (0.0, -1.0, 0.0),
                    (1.0, 1.0, 1.0),
                    (-(r(i) - r(l)), -(r(k) - r(l)), r(l) - self.r_min),
                    (pm(i) - pm(l), pm(k) - pm(l), self.p_ave - pm(l)),
                ];
                let (xlo, xhi) = polygon_x_range(&cons)?;
                let inner_y = |x: f64| -> (f64, f64) {
                    match y_range(&cons, x) {
                        None => (0.0, f64::INFINITY),
                        Some((ylo, yhi)) => {
                            let mut g = |y: f64| self.evaluate_on(support, &[x, y, 1.0 - x - y]);
                            golden_min(&mut g, ylo, yhi, ETA_TOL)
                        }
                    }
                };
                let mut outer = |x: f64| inner_y(x).1;
                let (x, v) = golden_min(&mut outer, xlo, xhi, ETA_TOL);
                let (y, _) = inner_y(x);
                (vec![x, y, 1.0 - x - y], v)
            }
            _ => return None,
        };
        if !obj.is_finite() {
            return None;
        }
        let mut eta = vec![0.0; self.classes.len()];
        for (j, w) in support.iter().zip(&x) {
            eta[*j] = w.max(0.0);
        }
        Some(Candidate { support: support.to_vec(), eta, objective: obj })
    }
}

fn supports(j: usize, usable: &[usize]) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = usable.iter().map(|&a| vec![a]).collect();
    for (x, &a) in usable.iter().enumerate() {
        for (y, &b) in usable.iter().enumerate().skip(x + 1) {
            out.push(vec![a, b]);
            for &c in usable.iter().skip(y + 1) {
                out.push(vec![a, b, c]);
            }
        }
    }
    debug_assert!(out.iter().all(|s| s.iter().all(|v| *v < j)));
    out
}

/// Solve the flat-fading mixture problem by enumerating supports of size <= 3.
pub fn flat_fading_solve(problem: &FlatProblem) -> Result<MixturePlan> {
    problem.validate()?;
    let j = problem.classes.len();
    let max_rate = (0..j).map(|k| problem.rate(k)).fold(f64::NEG_INFINITY, f64::max);
    if max_rate < problem.r_min {
        return Err(Error::Infeasible(format!("R_min = {} exceeds the highest class rate {max_rate}", problem.r_min)));
    }
    let usable: Vec<usize> = (0..j).filter(|&k| problem.classes[k].p_min <= problem.p_max).collect();
    let cands: Vec<Candidate> = supports(j, &usable).par_iter().filter_map(|s| problem.solve_support(s)).collect();
    let best = cands.iter().map(|c| c.objective).fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return Err(Error::Infeasible(format!(
            "no mixture meets R_min = {} with the per-class P_min under P_ave = {}",
            problem.r_min, problem.p_ave
        )));
    }
    let chosen = cands
        .iter()
        .filter(|c| c.objective <= best + 1e-9 * best.abs())
        .min_by(|a, b| {
            let sa = a.eta.iter().filter(|e| **e > 1e-8).count();
            let sb = b.eta.iter().filter(|e| **e > 1e-8).count();
            sa.cmp(&sb).then(a.objective.total_cmp(&b.objective))
        })
        .expect("at least one candidate")
        .clone();
    let active = chosen.eta.iter().filter(|e| **e > 1e-8).count();
    if active == 3 {
        debug!("three-class support {:?} at R_min = {}", chosen.support, problem.r_min);
    }
    let (objective, p) = problem.inner(&chosen.eta).expect("candidate is feasible");
    let p_per_class: Vec<f64> = p.iter().zip(&chosen.eta).map(|(p, e)| if *e > 0.0 { *p } else { 0.0 }).collect();
    Ok(MixturePlan {
        chain: problem.chain,
        class_ids: problem.classes.iter().map(|c| c.id.clone()).collect(),
        theta: chosen.eta.iter().zip(&p_per_class).map(|(e, p)| e * p).collect(),
        eta: chosen.eta,
        p_per_class,
        objective,
        rates: (0..j).map(|k| problem.rate(k)).collect(),
        mu4: problem.classes.iter().map(|c| c.moments.mu4).collect(),
        nu_minus2: problem.classes.iter().map(|c| c.moments.nu_minus2).collect(),
    })
}

/// Objective of the flat problem at arbitrary proportions (`None` if infeasible).
pub fn flat_objective_at(problem: &FlatProblem, eta: &[f64]) -> Option<f64> {
    if eta.len() != problem.classes.len() {
        return None;
    }
    let rate: f64 = eta.iter().enumerate().map(|(k, e)| e * problem.rate(k)).sum();
    if rate < problem.r_min - 1e-12 {
        return None;
    }
    problem.inner(eta).map(|r| r.0)
}

// ---------------------------------------------------------------------------
// Frequency-selective: per-subcarrier plan
// ---------------------------------------------------------------------------

/// Per-class parameters consumed by the per-subcarrier solvers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassParams {
    pub id: String,
    pub moments: Moments,
    /// Minimum SNR meeting the BER target.
    pub gamma_min: f64,
}

impl ClassParams {
    pub fn from_constellation(c: &Constellation, ber_th: f64) -> Result<Self> {
        Ok(Self { id: c.id().to_string(), moments: c.moments(), gamma_min: c.min_snr_for_ber(ber_th)? })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubcarrierProblem {
    pub chain: Chain,
    /// `|H_n|^2` per subcarrier.
    pub channel_gains: Vec<f64>,
    pub classes: Vec<ClassParams>,
    pub r_min: f64,
    pub p_ave: f64,
    pub p_max: f64,
    /// `N0 * delta_f`, linear.
    pub noise_psd_bw: f64,
    pub n_symbols: usize,
    pub clutter_power: f64,
}

impl SubcarrierProblem {
    pub fn new(
        chain: Chain,
        channel_gains: Vec<f64>,
        constellations: &[Arc<Constellation>],
        r_min: f64,
        p_ave: f64,
        ber_th: f64,
        noise_psd_bw: f64,
    ) -> Result<Self> {
        let classes =
            constellations.iter().map(|c| ClassParams::from_constellation(c, ber_th)).collect::<Result<_>>()?;
        Ok(Self {
            chain,
            channel_gains,
            classes,
            r_min,
            p_ave,
            p_max: DEFAULT_PMAX_FACTOR * p_ave,
            noise_psd_bw,
            n_symbols: 16,
            clutter_power: 1.0,
        })
    }

    pub fn n(&self) -> usize {
        self.channel_gains.len()
    }

    fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.channel_gains.is_empty() {
            return Err(invalid("need at least one class and one subcarrier"));
        }
        if !(self.p_ave > 0.0) || !(self.p_max >= self.p_ave) {
            return Err(invalid(format!("need 0 < P_ave <= P_max, got {} and {}", self.p_ave, self.p_max)));
        }
        if !(self.noise_psd_bw >= 0.0) || self.n_symbols == 0 || !(self.clutter_power > 0.0) {
            return Err(invalid("noise must be >= 0, M >= 1 and clutter power > 0"));
        }
        if let Some(n) = self.channel_gains.iter().position(|g| !(*g > 0.0)) {
            return Err(Error::InfeasibleSubcarrier(format!(
                "subcarrier {n} has channel gain {}; exclude it before planning",
                self.channel_gains[n]
            )));
        }
        let max_rate = self.classes.iter().map(|c| c.moments.rate_bits).fold(f64::NEG_INFINITY, f64::max);
        if max_rate < self.r_min {
            return Err(Error::Infeasible(format!("R_min = {} exceeds the highest class rate {max_rate}", self.r_min)));
        }
        Ok(())
    }

    fn p_min(&self, n: usize, j: usize) -> f64 {
        self.classes[j].gamma_min * self.noise_psd_bw / self.channel_gains[n]
    }

    fn allowed(&self, n: usize, j: usize) -> bool {
        self.p_min(n, j) <= self.p_max
    }

    fn cost(&self, j: usize) -> Cost {
        let mo = &self.classes[j].moments;
        // The MF coefficient uses this problem's N, so flat gains reproduce the mixture scale.
        cost_for(self.chain, mo.mu4, mo.nu_minus2, self.n().max(2), self.n_symbols, self.clutter_power)
    }

    fn rate(&self, j: usize) -> f64 {
        self.classes[j].moments.rate_bits
    }

    /// Optimal powers and per-subcarrier-averaged objective for a fixed assignment.
    pub fn evaluate_assignment(&self, assignment: &[usize]) -> Option<(f64, Vec<f64>)> {
        let n = self.n();
        if assignment.len() != n
            || assignment.iter().enumerate().any(|(k, &j)| j >= self.classes.len() || !self.allowed(k, j))
        {
            return None;
        }
        let levels: Vec<Level> = assignment
            .iter()
            .enumerate()
            .map(|(k, &j)| Level { w: self.cost(j).weight(), lo: self.p_min(k, j), hi: self.p_max, mult: 1.0 })
            .collect();
        let p = water_fill(&levels, n as f64 * self.p_ave)?;
        let obj = assignment.iter().zip(&p).map(|(&j, &pk)| self.cost(j).value(pk)).sum::<f64>() / n as f64;
        Some((obj, p))
    }

    fn average_rate(&self, assignment: &[usize]) -> f64 {
        assignment.iter().map(|&j| self.rate(j)).sum::<f64>() / assignment.len() as f64
    }

    fn rate_ok(&self, assignment: &[usize]) -> bool {
        self.average_rate(assignment) >= self.r_min - 1e-12
    }
}

/// Settings for the dual iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DualConfig {
    pub max_iter: usize,
    /// Scale of the power-price step; steps decay as `1/sqrt(t)`.
    pub psi_step: f64,
    /// Scale of the rate-price step.
    pub lambda_step: f64,
    pub power_tol: f64,
    pub rate_tol: f64,
    pub complementarity_tol: f64,
    /// Keep the per-iteration history in the returned plan.
    pub record_history: bool,
    /// Single-subcarrier exchange pass on the final assignment.
    pub polish: bool,
}

impl Default for DualConfig {
    fn default() -> Self {
        Self {
            max_iter: 2000,
            psi_step: 1.0,
            lambda_step: 1.0,
            power_tol: 1e-4,
            rate_tol: 1e-4,
            complementarity_tol: 1e-3,
            record_history: true,
            polish: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualIterate {
    pub iter: usize,
    pub psi: f64,
    pub lambda: f64,
    /// `N P_ave - sum kappa`.
    pub power_gap: f64,
    /// `R_min - Rbar`.
    pub rate_gap: f64,
    pub dual_value: f64,
    /// Exact objective of this iterate's assignment, after rate recovery if needed.
    pub primal_objective: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub psi: f64,
    pub lambda: f64,
    pub psi_step0: f64,
    pub lambda_step0: f64,
    pub iterations: usize,
    pub history: Vec<DualIterate>,
}

/// Per-subcarrier solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubcarrierPlan {
    pub chain: Chain,
    pub class_ids: Vec<String>,
    /// Chosen class index per subcarrier.
    pub assignment: Vec<usize>,
    /// Power on each subcarrier.
    pub power: Vec<f64>,
    /// MF: `(1/N) sum a_j kappa^2`; RF: `(1/N) sum nu_j / kappa`.
    pub objective: f64,
    pub average_rate: f64,
    pub mu4: Vec<f64>,
    pub nu_minus2: Vec<f64>,
    pub rates: Vec<f64>,
    pub converged: bool,
    pub warnings: Vec<String>,
    pub dual: Option<DualState>,
}

impl SubcarrierPlan {
    /// `N x J` one-hot selection matrix.
    pub fn chi(&self) -> Vec<Vec<u8>> {
        let j = self.class_ids.len();
        self.assignment.iter().map(|&a| (0..j).map(|k| u8::from(k == a)).collect()).collect()
    }

    /// `N x J` power matrix, zero off the selected class.
    pub fn kappa(&self) -> Vec<Vec<f64>> {
        let j = self.class_ids.len();
        self.assignment
            .iter()
            .zip(&self.power)
            .map(|(&a, &p)| (0..j).map(|k| if k == a { p } else { 0.0 }).collect())
            .collect()
    }

    pub fn power_allocation(&self) -> Result<PowerAllocation> {
        PowerAllocation::new(self.power.clone())
    }

    /// True iff power is equal (relative spread < tol) within every block of
    /// subcarriers sharing class and channel gain.
    pub fn equal_power_within_blocks(&self, channel_gains: &[f64], tol: f64) -> bool {
        let keys: Vec<(usize, u64)> =
            self.assignment.iter().zip(channel_gains).map(|(&a, g)| (a, g.to_bits())).collect();
        equal_power_within_blocks_check(&self.power, &keys, tol)
    }

    fn from_assignment(problem: &SubcarrierProblem, assignment: Vec<usize>, obj: f64, power: Vec<f64>) -> Self {
        Self {
            chain: problem.chain,
            class_ids: problem.classes.iter().map(|c| c.id.clone()).collect(),
            average_rate: problem.average_rate(&assignment),
            assignment,
            power,
            objective: obj,
            mu4: problem.classes.iter().map(|c| c.moments.mu4).collect(),
            nu_minus2: problem.classes.iter().map(|c| c.moments.nu_minus2).collect(),
            rates: problem.classes.iter().map(|c| c.moments.rate_bits).collect(),
            converged: true,
            warnings: vec![],
            dual: None,
        }
    }
}

/// True iff within each group of equal keys the relative power spread is below `tol`.
pub fn equal_power_within_blocks_check<K: Eq + std::hash::Hash>(power: &[f64], keys: &[K], tol: f64) -> bool {
    let mut groups: HashMap<&K, (f64, f64)> = HashMap::new();
    for (p, k) in power.iter().zip(keys) {
        let e = groups.entry(k).or_insert((f64::INFINITY, f64::NEG_INFINITY));
        e.0 = e.0.min(*p);
        e.1 = e.1.max(*p);
    }
    groups.values().all(|(lo, hi)| hi - lo <= tol * hi.abs().max(f64::MIN_POSITIVE))
}

/// Price scales so that one unit step corrects the average power gap fully
/// at the reference price.
fn price_scales(problem: &SubcarrierProblem) -> (f64, f64, f64) {
    let j = problem.classes.len();
    let n = problem.n() as f64;
    let p = problem.p_ave;
    let rates: Vec<f64> = (0..j).map(|k| problem.rate(k)).collect();
    let r_span = (rates.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - rates.iter().cloned().fold(f64::INFINITY, f64::min))
    .max(1.0);
    match problem.chain {
        Chain::Mf => {
            let a_bar = (0..j)
                .map(|k| match problem.cost(k) {
                    Cost::Mf(a) => a,
                    Cost::Rf(_) => unreachable!(),
                })
                .sum::<f64>()
                / j as f64;
            let psi_ref = 2.0 * a_bar * p;
            (psi_ref, 2.0 * a_bar / n, n * a_bar * p * p / (r_span * r_span))
        }
        Chain::Rf => {
            let nu_bar = (0..j).map(|k| problem.classes[k].moments.nu_minus2).sum::<f64>() / j as f64;
            let psi_ref = -nu_bar / (p * p);
            (psi_ref, 2.0 * psi_ref.abs() / (n * p), n * (nu_bar / p) / (r_span * r_span))
        }
    }
}

/// Greedy fallback: cheapest classes first, then upgrade by rate gained per power spent.
fn greedy_rate_repair(problem: &SubcarrierProblem) -> Option<Vec<usize>> {
    let n = problem.n();
    let j = problem.classes.len();
    let mut a: Vec<usize> = (0..n)
        .map(|k| {
            (0..j)
                .filter(|&c| problem.allowed(k, c))
                .min_by(|&x, &y| problem.p_min(k, x).total_cmp(&problem.p_min(k, y)))
        })
        .collect::<Option<_>>()?;
    while !problem.rate_ok(&a) {
        let mut best: Option<(f64, usize, usize)> = None;
        for (k, &ak) in a.iter().enumerate() {
            for c in 0..j {
                let dr = problem.rate(c) - problem.rate(ak);
                if dr <= 0.0 || !problem.allowed(k, c) {
                    continue;
                }
                let dp = (problem.p_min(k, c) - problem.p_min(k, ak)).max(1e-300);
                let score = dr / dp;
                if best.is_none_or(|b| score > b.0) {
                    best = Some((score, k, c));
                }
            }
        }
        let (_, k, c) = best?;
        a[k] = c;
    }
    Some(a)
}

/// Primal recovery for a rate-infeasible dual iterate: upgrade the subcarriers
/// with the smallest reduced-cost increase per bit until the rate is met.
fn upgrade_to_rate(problem: &SubcarrierProblem, costs: &[Cost], psi: f64, mut a: Vec<usize>) -> Option<Vec<usize>> {
    let j = problem.classes.len();
    let phi = |k: usize, c: usize| costs[c].reduced_cost(psi, problem.p_min(k, c), problem.p_max);
    while !problem.rate_ok(&a) {
        let mut best: Option<(f64, usize, usize)> = None;
        for (k, &ak) in a.iter().enumerate() {
            for c in (0..j).filter(|&c| problem.allowed(k, c)) {
                let dr = problem.rate(c) - problem.rate(ak);
                if dr <= 0.0 {
                    continue;
                }
                let score = (phi(k, c) - phi(k, ak)) / dr;
                if best.is_none_or(|b| score < b.0) {
                    best = Some((score, k, c));
                }
            }
        }
        let (_, k, c) = best?;
        a[k] = c;
    }
    Some(a)
}

/// Single-subcarrier class exchanges that keep the rate and lower the exact objective.
fn polish_assignment(problem: &SubcarrierProblem, mut a: Vec<usize>, mut obj: f64) -> (Vec<usize>, f64) {
    let n = problem.n();
    let j = problem.classes.len();
    loop {
        let mut improved = false;
        for k in 0..n {
            for c in 0..j {
                if c == a[k] {
                    continue;
                }
                let old = a[k];
                a[k] = c;
                if problem.rate_ok(&a) {
                    if let Some((o, _)) = problem.evaluate_assignment(&a) {
                        if o < obj * (1.0 - 1e-12) {
                            obj = o;
                            improved = true;
                            continue;
                        }
                    }
                }
                a[k] = old;
            }
        }
        if !improved {
            return (a, obj);
        }
    }
}

/// Bilevel Lagrangian heuristic for the per-subcarrier problem.
///
/// Each iteration picks, per subcarrier, the class minimizing
/// `phi(psi) - (lambda/N) R_j` (lowest index on ties), sets the clamped
/// power, and takes projected subgradient steps on `(psi, lambda)`. Every
/// visited assignment is brought to the rate target by reduced-cost
/// upgrades and evaluated exactly with a water-level power solve; the best
/// one is returned.
pub fn bilevel_solve(problem: &SubcarrierProblem, cfg: &DualConfig) -> Result<SubcarrierPlan> {
    problem.validate()?;
    let n = problem.n();
    let nf = n as f64;
    let j = problem.classes.len();
    for k in 0..n {
        if !(0..j).any(|c| problem.allowed(k, c)) {
            return Err(Error::InfeasibleSubcarrier(format!(
                "no class meets the BER target within P_max on subcarrier {k}"
            )));
        }
    }
    let min_power: f64 = (0..n).map(|k| (0..j).map(|c| problem.p_min(k, c)).fold(f64::INFINITY, f64::min)).sum();
    if min_power > nf * problem.p_ave * (1.0 + 1e-12) {
        return Err(Error::Infeasible(format!(
            "BER floors need {:.6e} total power, budget is {:.6e}",
            min_power,
            nf * problem.p_ave
        )));
    }

    let (psi_ref, psi_scale, lambda_scale) = price_scales(problem);
    let costs: Vec<Cost> = (0..j).map(|c| problem.cost(c)).collect();
    let mut psi = psi_ref;
    let mut lambda = 0.0f64;
    let mut history = Vec::new();
    let mut best: Option<(f64, Vec<usize>, Vec<f64>)> = None;
    let mut seen: HashMap<Vec<usize>, Option<f64>> = HashMap::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut assignment = vec![0usize; n];
    let mut kappa = vec![0.0; n];

    for t in 1..=cfg.max_iter {
        iterations = t;
        let mut lagr = 0.0;
        for k in 0..n {
            let mut pick = None::<(f64, usize)>;
            for c in (0..j).filter(|&c| problem.allowed(k, c)) {
                let v = costs[c].reduced_cost(psi, problem.p_min(k, c), problem.p_max) - lambda / nf * problem.rate(c);
                if pick.is_none_or(|p| v < p.0) {
                    pick = Some((v, c));
                }
            }
            let (v, c) = pick.expect("some class allowed");
            assignment[k] = c;
            kappa[k] = costs[c].best_power(psi, problem.p_min(k, c), problem.p_max);
            lagr += v;
        }
        let power_gap = nf * problem.p_ave - kappa.iter().sum::<f64>();
        let rbar = problem.average_rate(&assignment);
        let rate_gap = problem.r_min - rbar;
        let dual_value = lagr + psi * nf * problem.p_ave + lambda * problem.r_min;

        let candidate = if problem.rate_ok(&assignment) {
            Some(assignment.clone())
        } else {
            upgrade_to_rate(problem, &costs, psi, assignment.clone())
        };
        let primal = candidate.and_then(|cand| {
            *seen.entry(cand.clone()).or_insert_with(|| {
                problem.evaluate_assignment(&cand).map(|(o, p)| {
                    if best.as_ref().is_none_or(|b| o < b.0) {
                        best = Some((o, cand.clone(), p));
                    }
                    o
                })
            })
        });
        if cfg.record_history {
            history.push(DualIterate {
                iter: t,
                psi,
                lambda,
                power_gap,
                rate_gap,
                dual_value,
                primal_objective: primal,
            });
        }

        let complementarity = lambda * rate_gap.abs() / lambda_scale.max(f64::MIN_POSITIVE);
        if power_gap.abs() <= cfg.power_tol * nf * problem.p_ave
            && rate_gap <= cfg.rate_tol
            && complementarity <= cfg.complementarity_tol
        {
            converged = true;
            break;
        }
        let step = 1.0 / (t as f64).sqrt();
        psi += cfg.psi_step * psi_scale * step * power_gap;
        lambda = (lambda + cfg.lambda_step * lambda_scale * step * rate_gap).max(0.0);
    }

    let mut warnings = Vec::new();
    if !converged {
        let msg = format!(
            "dual iteration stopped at the cap of {} iterations; returning the best feasible iterate",
            cfg.max_iter
        );
        info!("{msg}");
        warnings.push(msg);
    }
    let (mut obj, mut a) = match best {
        Some((o, a, _)) => (o, a),
        None => {
            let a = greedy_rate_repair(problem)
                .ok_or_else(|| Error::Infeasible("no assignment meets the rate target".into()))?;
            let (o, _) = problem
                .evaluate_assignment(&a)
                .ok_or_else(|| Error::Infeasible("no rate-feasible assignment fits the power budget".into()))?;
            warnings.push("no dual iterate met the rate; used greedy rate repair".into());
            (o, a)
        }
    };
    if cfg.polish {
        (a, obj) = polish_assignment(problem, a, obj);
    }
    let (obj2, power) = problem.evaluate_assignment(&a).expect("feasible assignment");
    debug_assert!((obj2 - obj).abs() <= 1e-9 * obj.abs().max(1e-300));
    let mut plan = SubcarrierPlan::from_assignment(problem, a, obj2, power);
    plan.converged = converged;
    plan.warnings = warnings;
    plan.dual =
        Some(DualState { psi, lambda, psi_step0: cfg.psi_step, lambda_step0: cfg.lambda_step, iterations, history });
    Ok(plan)
}

/// Global optimum by enumerating all `J^N` assignments (`J^N <= 1e6`).
///
/// Ties are broken toward the lexicographically smallest assignment.
pub fn exhaustive_oracle(problem: &SubcarrierProblem) -> Result<SubcarrierPlan> {
    problem.validate()?;
    let n = problem.n();
    let j = problem.classes.len();
    let total = (j as f64).powi(n as i32);
    if total > ORACLE_LIMIT {
        return Err(Error::InstanceTooLarge { assignments: total, limit: ORACLE_LIMIT });
    }
    let total = total as u64;
    let decode = |mut idx: u64| -> Vec<usize> {
        // Subcarrier 0 is the most significant digit, so index order is lexicographic.
        let mut a = vec![0usize; n];
        for k in (0..n).rev() {
            a[k] = (idx % j as u64) as usize;
            idx /= j as u64;
        }
        a
    };
    let best = (0..total)
        .into_par_iter()
        .filter_map(|idx| {
            let a = decode(idx);
            if !problem.rate_ok(&a) {
                return None;
            }
            problem.evaluate_assignment(&a).map(|(o, _)| (o, idx))
        })
        .reduce_with(|x, y| match x.0.total_cmp(&y.0) {
            std::cmp::Ordering::Less => x,
            std::cmp::Ordering::Greater => y,
            std::cmp::Ordering::Equal => {
                if x.1 <= y.1 {
                    x
                } else {
                    y
                }
            }
        });
    let (_, idx) =
        best.ok_or_else(|| Error::Infeasible("no assignment meets the rate and power constraints".into()))?;
    let a = decode(idx);
    let (obj, power) = problem.evaluate_assignment(&a).expect("feasible by construction");
    Ok(SubcarrierPlan::from_assignment(problem, a, obj, power))
}

// ---------------------------------------------------------------------------
// Surrogate SINR
// ---------------------------------------------------------------------------

/// A plan viewed as weighted power levels.
#[derive(Debug, Clone, Copy)]
pub enum PlanRef<'a> {
    Mixture(&'a MixturePlan),
    Subcarrier(&'a SubcarrierPlan),
}

impl<'a> From<&'a MixturePlan> for PlanRef<'a> {
    fn from(p: &'a MixturePlan) -> Self {
        PlanRef::Mixture(p)
    }
}

impl<'a> From<&'a SubcarrierPlan> for PlanRef<'a> {
    fn from(p: &'a SubcarrierPlan) -> Self {
        PlanRef::Subcarrier(p)
    }
}

impl PlanRef<'_> {
    /// `(weight, power, mu4, nu)` with weights summing to one.
    fn levels(&self) -> Vec<(f64, f64, f64, f64)> {
        match self {
            PlanRef::Mixture(p) => (0..p.eta.len())
                .filter(|&j| p.eta[j] > 0.0)
                .map(|j| (p.eta[j], p.p_per_class[j], p.mu4[j], p.nu_minus2[j]))
                .collect(),
            PlanRef::Subcarrier(p) => {
                let w = 1.0 / p.assignment.len() as f64;
                p.assignment.iter().zip(&p.power).map(|(&j, &pw)| (w, pw, p.mu4[j], p.nu_minus2[j])).collect()
            }
        }
    }
}

/// Simplified SINR used for trade-off curves.
///
/// MF uses `E|r_0|^2 ~ (sum P)^2`; RF is the exact reciprocal-filter SNR.
pub fn surrogate_sinr<'a>(
    chain: Chain,
    plan: impl Into<PlanRef<'a>>,
    scene: &SensingScene,
    q: usize,
    n: usize,
    m: usize,
) -> Result<f64> {
    let sigma_q = scene
        .targets
        .get(q)
        .map(|t| t.sigma_alpha_sq)
        .ok_or_else(|| invalid(format!("target index {q} out of range")))?;
    if n < 2 || m == 0 {
        return Err(invalid("need N >= 2 and M >= 1"));
    }
    let levels = plan.into().levels();
    let nf = n as f64;
    let mf = m as f64;
    let v = match chain {
        Chain::Mf => {
            let p_ave: f64 = levels.iter().map(|l| l.0 * l.1).sum();
            let kurt: f64 = levels.iter().map(|l| l.0 * l.1 * l.1 * (l.2 - 1.0)).sum();
            let sq: f64 = levels.iter().map(|l| l.0 * l.1 * l.1).sum();
            let clutter = scene.clutter_power(q) * (nf / mf * kurt + nf * nf * (sq - p_ave * p_ave) / (nf - 1.0));
            sigma_q * nf * nf * p_ave * p_ave / (clutter + scene.noise_var / mf * nf * p_ave)
        }
        Chain::Rf => {
            if levels.iter().any(|l| l.1 <= 0.0) {
                return Err(invalid("RF surrogate requires positive power on every class in use"));
            }
            let s: f64 = levels.iter().map(|l| l.0 * l.3 / l.1).sum();
            sigma_q * mf * nf * nf / (scene.noise_var * nf * s)
        }
    };
    Ok(overflow_guard(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constellations::ConstellationId;
    use crate::ofdm::Target;
    use crate::stats::trial_rng;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn moments(mu4: f64, nu: f64, rate: f64) -> Moments {
        Moments { mu4, nu_minus2: nu, rate_bits: rate }
    }

    /// Projected gradient on `{p >= 0, sum p = N P_ave}` for a smooth convex objective.
    fn projected_gradient(
        grad: &dyn Fn(&[f64]) -> Vec<f64>,
        n: usize,
        p_ave: f64,
        step: f64,
        iters: usize,
    ) -> Vec<f64> {
        let mut p = vec![p_ave; n];
        for _ in 0..iters {
            let g = grad(&p);
            let mean = g.iter().sum::<f64>() / n as f64;
            for (pi, gi) in p.iter_mut().zip(&g) {
                *pi = (*pi - step * (gi - mean)).max(1e-9);
            }
            let s: f64 = p.iter().sum();
            let scale = n as f64 * p_ave / s;
            p.iter_mut().for_each(|v| *v *= scale);
        }
        p
    }

    #[test]
    fn mf_rule_examples() {
        let p = mf_power_rule(&[1.0, 1.32], 1, 1.0).unwrap();
        assert_relative_eq!(p.as_slice()[0], 1.0740740740740742, max_relative = 1e-12);
        assert_relative_eq!(p.as_slice()[1], 0.9259259259259259, max_relative = 1e-12);
        let eq = mf_power_rule(&[1.32; 8], 16, 2.5).unwrap();
        assert!(eq.as_slice().iter().all(|v| (v - 2.5).abs() < 1e-12));
        assert!(mf_power_rule(&[1.0], 1, 1.0).is_err());
    }

    #[test]
    fn rf_rule_examples() {
        let p = rf_power_rule(&[1.0, 4.0], 1.0).unwrap();
        assert_relative_eq!(p.as_slice()[0], 2.0 / 3.0, max_relative = 1e-14);
        assert_relative_eq!(p.as_slice()[1], 4.0 / 3.0, max_relative = 1e-14);
        assert!(rf_power_rule(&[1.7; 5], 3.0).unwrap().as_slice().iter().all(|v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn rules_match_projected_gradient() {
        let mut rng = trial_rng(42, 0);
        for _ in 0..10 {
            let n = rng.random_range(2..12);
            let mu: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..2.0)).collect();
            let nu: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..4.0)).collect();
            let m = rng.random_range(1..20);
            let mf = mf_power_rule(&mu, m, 1.5).unwrap();
            let nf = n as f64;
            let b: Vec<f64> = mu.iter().map(|v| (v - 1.0) / m as f64 + nf / (nf - 1.0)).collect();
            let pg = projected_gradient(&|p| p.iter().zip(&b).map(|(p, b)| 2.0 * b * p).collect(), n, 1.5, 0.1, 20000);
            let (a, o) = (mf_rule_objective(&mu, m, mf.as_slice()), mf_rule_objective(&mu, m, &pg));
            assert!((a - o).abs() / o < 1e-6 && a <= o * (1.0 + 1e-12));

            let rf = rf_power_rule(&nu, 1.5).unwrap();
            let pg =
                projected_gradient(&|p| p.iter().zip(&nu).map(|(p, v)| -v / (p * p)).collect(), n, 1.5, 0.05, 40000);
            let (a, o) = (rf_rule_objective(&nu, rf.as_slice()), rf_rule_objective(&nu, &pg));
            assert!((a - o).abs() / o < 1e-6 && a <= o * (1.0 + 1e-12));
        }
    }

    #[test]
    fn mf_rule_gives_less_power_to_heavier_tails() {
        let p = mf_power_rule(&[1.0, 1.32, 1.38, 1.1], 4, 1.0).unwrap();
        let p = p.as_slice();
        assert!(p[0] > p[3] && p[3] > p[1] && p[1] > p[2]);
    }

    fn numeric_min(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
        let mut best = f64::INFINITY;
        let steps = 20000;
        let mut arg = lo;
        for i in 0..=steps {
            let x = lo + (hi - lo) * i as f64 / steps as f64;
            if f(x) < best {
                best = f(x);
                arg = x;
            }
        }
        let h = (hi - lo) / steps as f64;
        let mut g = |x: f64| f(x);
        golden_min(&mut g, (arg - h).max(lo), (arg + h).min(hi), 1e-13).1
    }

    #[test]
    fn reduced_cost_branches() {
        let (a, lo, hi) = (2.0, 0.5, 10.0);
        assert_eq!(reduced_cost_phi(a, lo, hi, 0.0), a * lo * lo);
        let psi = 2.0 * a * lo;
        assert_relative_eq!(reduced_cost_phi(a, lo, hi, psi), -psi * psi / (4.0 * a), max_relative = 1e-14);
        assert_relative_eq!(reduced_cost_phi(a, lo, hi, 1e4), a * hi * hi - 1e4 * hi, max_relative = 1e-14);
        for psi in [-3.0, 0.0, 1.0, 2.5, 7.0, 39.0, 41.0, 100.0] {
            let num = numeric_min(&|k| a * k * k - psi * k, lo, hi);
            assert!((reduced_cost_phi(a, lo, hi, psi) - num).abs() < 1e-9 * (1.0 + num.abs()));
        }
    }

    #[test]
    fn rf_reduced_cost_matches_numeric_minimum() {
        let (lo, hi) = (0.3, 20.0);
        for nu in [1.0, 1.7, 3.2] {
            for psi in [-100.0, -10.0, -1.0, -0.05, -0.001, 0.0, 0.5] {
                let num = numeric_min(&|k| nu / k - psi * k, lo, hi);
                let v = reduced_cost_phi_rf(nu, lo, hi, psi);
                assert!((v - num).abs() < 1e-9 * (1.0 + num.abs()), "nu {nu} psi {psi}: {v} vs {num}");
            }
        }
        // Continuity at the branch points.
        let nu = 2.0;
        let psi_lo = -nu / (lo * lo);
        assert_relative_eq!(nu / lo - psi_lo * lo, 2.0 * (-nu * psi_lo).sqrt(), max_relative = 1e-14);
    }

    #[test]
    fn water_fill_meets_budget_exactly() {
        let levels = [
            Level { w: 0.5, lo: 1.0, hi: 5.0, mult: 0.3 },
            Level { w: 2.0, lo: 0.0, hi: 5.0, mult: 0.3 },
            Level { w: 1.0, lo: 3.0, hi: 4.0, mult: 0.4 },
        ];
        for budget in [1.5, 2.0, 3.0, 4.0, 4.6] {
            let p = water_fill(&levels, budget).unwrap();
            let s: f64 = p.iter().zip(&levels).map(|(p, l)| p * l.mult).sum();
            assert!((s - budget).abs() < 1e-12, "{budget}: {s}");
        }
        assert!(water_fill(&levels, 1.0).is_none());
        assert!(water_fill(&levels, 4.7).is_none());
    }

    fn builtin_classes(noise: f64) -> Vec<FlatClass> {
        [Constellation::qpsk(), Constellation::qam16(), Constellation::apsk32(), Constellation::qam64()]
            .iter()
            .map(|c| FlatClass::from_constellation(c, 1.0, noise, 1e-4).unwrap())
            .collect()
    }

    #[test]
    fn fig2_anchor_mixture() {
        let plan = flat_fading_solve(&FlatProblem::new(Chain::Mf, builtin_classes(0.03), 3.5, 6.0)).unwrap();
        assert!((plan.eta[0] - 0.5).abs() < 0.02, "{:?}", plan.eta);
        assert!((plan.eta[2] - 0.5).abs() < 0.02, "{:?}", plan.eta);
        assert_eq!(support_size(&plan, 1e-8), 2);
        // 32APSK has the largest nu of the set, so RF mixes QPSK with 64QAM instead.
        let rf = flat_fading_solve(&FlatProblem::new(Chain::Rf, builtin_classes(0.03), 3.5, 6.0)).unwrap();
        assert_eq!(rf.eta[2], 0.0);
        assert_eq!(support_size(&rf, 1e-8), 2);
    }

    #[test]
    fn relaxed_rate_selects_single_best_class() {
        let classes = builtin_classes(0.01);
        let mf = flat_fading_solve(&FlatProblem::new(Chain::Mf, classes.clone(), 1.0, 6.0)).unwrap();
        assert_eq!(support_size(&mf, 1e-8), 1);
        assert_eq!(mf.eta[0], 1.0);
        let rf = flat_fading_solve(&FlatProblem::new(Chain::Rf, classes, 2.0, 6.0)).unwrap();
        assert_eq!(rf.eta[0], 1.0);
        assert_relative_eq!(rf.p_per_class[0], 6.0, max_relative = 1e-12);
    }

    #[test]
    fn infeasible_flat_problems_are_reported() {
        let classes = builtin_classes(0.01);
        assert!(matches!(
            flat_fading_solve(&FlatProblem::new(Chain::Mf, classes.clone(), 6.5, 6.0)),
            Err(Error::Infeasible(_))
        ));
        // 64QAM alone needs more than the budget when noise is high.
        let noisy = builtin_classes(0.5);
        assert!(matches!(flat_fading_solve(&FlatProblem::new(Chain::Rf, noisy, 6.0, 6.0)), Err(Error::Infeasible(_))));
    }

    fn check_plan(problem: &FlatProblem, plan: &MixturePlan) {
        let eta_sum: f64 = plan.eta.iter().sum();
        assert!((eta_sum - 1.0).abs() < 1e-9);
        let theta_sum: f64 = plan.theta.iter().sum();
        assert!((theta_sum - problem.p_ave).abs() < 1e-9 * problem.p_ave);
        for (k, c) in problem.classes.iter().enumerate() {
            assert!(plan.eta[k] >= 0.0);
            assert!(plan.theta[k] >= plan.eta[k] * c.p_min - 1e-9);
            assert!(plan.theta[k] <= plan.eta[k] * problem.p_max + 1e-9);
        }
        assert!(plan.average_rate() >= problem.r_min - 1e-9);
        assert!(support_size(plan, 1e-8) <= 3);
    }

    fn random_problem(rng: &mut impl Rng, j: usize, chain: Chain) -> FlatProblem {
        let classes: Vec<FlatClass> = (0..j)
            .map(|k| FlatClass {
                id: format!("c{k}"),
                moments: moments(rng.random_range(1.0..1.6), rng.random_range(1.0..3.0), rng.random_range(1..7) as f64),
                p_min: rng.random_range(0.0..1.5),
            })
            .collect();
        let max_r = classes.iter().map(|c| c.moments.rate_bits).fold(0.0, f64::max);
        let r_min = rng.random_range(0.5..max_r);
        let mut p = FlatProblem::new(chain, classes, r_min, 1.0);
        p.n_symbols = rng.random_range(1..8);
        p
    }

    /// Grid search over the simplex, then repeated zooms around the best point.
    fn zoom_grid_oracle(problem: &FlatProblem) -> Option<f64> {
        let j = problem.classes.len();
        assert_eq!(j, 4);
        let mut center = [0.5, 0.5, 0.5];
        let mut half = 0.5;
        let mut best = f64::INFINITY;
        for level in 0..48 {
            let steps = if level == 0 { 100 } else { 16 };
            let mut found = None;
            for a in 0..=steps {
                for b in 0..=steps {
                    for c in 0..=steps {
                        let x = [
                            center[0] - half + 2.0 * half * a as f64 / steps as f64,
                            center[1] - half + 2.0 * half * b as f64 / steps as f64,
                            center[2] - half + 2.0 * half * c as f64 / steps as f64,
                        ];
                        let d = 1.0 - x[0] - x[1] - x[2];
                        if x.iter().any(|v| *v < 0.0) || d < 0.0 {
                            continue;
                        }
                        if let Some(v) = flat_objective_at(problem, &[x[0], x[1], x[2], d]) {
                            if v < best {
                                best = v;
                                found = Some(x);
                            }
                        }
                    }
                }
            }
            if let Some(x) = found {
                center = x;
            }
            half = if level == 0 { 0.05 } else { half * 0.6 };
        }
        best.is_finite().then_some(best)
    }

    #[test]
    fn flat_solver_matches_zoom_grid_oracle() {
        let mut rng = trial_rng(7, 0);
        let mut checked = 0;
        while checked < 12 {
            let chain = if checked % 2 == 0 { Chain::Mf } else { Chain::Rf };
            let problem = random_problem(&mut rng, 4, chain);
            let Some(oracle) = zoom_grid_oracle(&problem) else {
                assert!(flat_fading_solve(&problem).is_err());
                continue;
            };
            let plan = flat_fading_solve(&problem).unwrap();
            check_plan(&problem, &plan);
            assert!((plan.objective - oracle).abs() / oracle < 1e-6, "{} vs {}", plan.objective, oracle);
            assert!((plan.objective - oracle).abs() / oracle < 1e-6, "{} vs {}", plan.objective, oracle);
            checked += 1;
        }
    }

    #[test]
    fn flat_solver_beats_coarse_grid_and_keeps_support_small() {
        let mut rng = trial_rng(11, 0);
        for s in 0..50 {
            let chain = if s % 2 == 0 { Chain::Mf } else { Chain::Rf };
            let problem = random_problem(&mut rng, 4, chain);
            let mut grid = f64::INFINITY;
            for a in 0..=100 {
                for b in 0..=100 - a {
                    for c in 0..=100 - a - b {
                        let e =
                            [a as f64 / 100.0, b as f64 / 100.0, c as f64 / 100.0, (100 - a - b - c) as f64 / 100.0];
                        if let Some(v) = flat_objective_at(&problem, &e) {
                            grid = grid.min(v);
                        }
                    }
                }
            }
            match flat_fading_solve(&problem) {
                Ok(plan) => {
                    check_plan(&problem, &plan);
                    assert!(plan.objective <= grid * (1.0 + 1e-4) + 1e-12);
                }
                Err(_) => assert!(grid.is_infinite()),
            }
        }
    }

    #[test]
    fn flat_objective_scales_quadratically_for_mf() {
        let classes = builtin_classes(0.01);
        let base = FlatProblem::new(Chain::Mf, classes.clone(), 4.2, 6.0);
        let mut scaled = base.clone();
        scaled.p_ave *= 3.0;
        scaled.p_max *= 3.0;
        scaled.classes.iter_mut().for_each(|c| c.p_min *= 3.0);
        let a = flat_fading_solve(&base).unwrap();
        let b = flat_fading_solve(&scaled).unwrap();
        assert_relative_eq!(b.objective, 9.0 * a.objective, max_relative = 1e-8);
        for (x, y) in a.eta.iter().zip(&b.eta) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    fn fixture(seed: u64, n: usize, chain: Chain) -> SubcarrierProblem {
        let mut rng = trial_rng(seed, 0);
        let gains: Vec<f64> = (0..n).map(|_| (-rng.random::<f64>().max(1e-12).ln()).max(0.05)).collect();
        let cons = [Arc::new(Constellation::qpsk()), Arc::new(Constellation::qam16())];
        SubcarrierProblem::new(chain, gains, &cons, rng.random_range(2.2..3.6), 6.0, 1e-4, 0.01).unwrap()
    }

    #[test]
    fn bilevel_close_to_oracle_on_small_fixtures() {
        for seed in 0..10 {
            for chain in [Chain::Mf, Chain::Rf] {
                let problem = fixture(seed, 8, chain);
                let oracle = exhaustive_oracle(&problem).unwrap();
                let plan = bilevel_solve(&problem, &DualConfig::default()).unwrap();
                assert!(oracle.objective <= plan.objective * (1.0 + 1e-12));
                assert!(
                    plan.objective <= oracle.objective * 1.05,
                    "seed {seed} {chain}: {} vs {}",
                    plan.objective,
                    oracle.objective
                );
                assert!(plan.average_rate >= problem.r_min - 1e-9);
                let total: f64 = plan.power.iter().sum();
                assert!((total - 8.0 * problem.p_ave).abs() < 1e-9 * total);
                for (k, (&a, &p)) in plan.assignment.iter().zip(&plan.power).enumerate() {
                    assert!(p >= problem.p_min(k, a) * (1.0 - 1e-12) && p <= problem.p_max);
                }
                assert!(plan.chi().iter().all(|row| row.iter().map(|v| *v as u32).sum::<u32>() == 1));
            }
        }
    }

    #[test]
    fn bilevel_tracks_flat_solution_on_flat_gains() {
        let cons: Vec<Arc<Constellation>> =
            [Constellation::qpsk(), Constellation::qam16(), Constellation::apsk32(), Constellation::qam64()]
                .into_iter()
                .map(Arc::new)
                .collect();
        for chain in [Chain::Mf, Chain::Rf] {
            for r_min in [2.5, 3.5, 4.5] {
                let problem = SubcarrierProblem::new(chain, vec![1.0; 64], &cons, r_min, 6.0, 1e-4, 0.01).unwrap();
                let plan = bilevel_solve(&problem, &DualConfig::default()).unwrap();
                let classes = builtin_classes(0.01);
                let flat = flat_fading_solve(&FlatProblem::new(chain, classes, r_min, 6.0)).unwrap();
                assert!(
                    plan.objective <= flat.objective * 1.03,
                    "{chain} {r_min}: {} vs {}",
                    plan.objective,
                    flat.objective
                );
                assert!(plan.objective >= flat.objective * (1.0 - 1e-9));
                assert!(plan.equal_power_within_blocks(&problem.channel_gains, 1e-4));
            }
        }
    }

    #[test]
    fn stronger_subcarriers_get_higher_order_classes() {
        let problem = {
            let mut p = fixture(3, 64, Chain::Mf);
            p.r_min = 3.0;
            p
        };
        let plan = bilevel_solve(&problem, &DualConfig::default()).unwrap();
        let n = problem.n();
        // Spearman-style check with a simple concordance count.
        let mut conc = 0i64;
        for a in 0..n {
            for b in 0..n {
                let dg = problem.channel_gains[a] - problem.channel_gains[b];
                let dr = plan.rates[plan.assignment[a]] - plan.rates[plan.assignment[b]];
                conc += (dg * dr).signum() as i64;
            }
        }
        assert!(conc > 0);
    }

    #[test]
    fn oracle_limits_and_trivial_case() {
        let cons = [Arc::new(Constellation::qpsk()), Arc::new(Constellation::qam16())];
        let one = SubcarrierProblem::new(Chain::Mf, vec![1.0], &cons, 2.0, 6.0, 1e-4, 0.01).unwrap();
        let plan = exhaustive_oracle(&one).unwrap();
        assert_eq!(plan.assignment, vec![0]);
        let big = SubcarrierProblem::new(Chain::Mf, vec![1.0; 21], &cons, 2.0, 6.0, 1e-4, 0.01).unwrap();
        assert!(matches!(exhaustive_oracle(&big), Err(Error::InstanceTooLarge { .. })));
        let zero = SubcarrierProblem::new(Chain::Mf, vec![1.0, 0.0], &cons, 2.0, 6.0, 1e-4, 0.01).unwrap();
        assert!(matches!(bilevel_solve(&zero, &DualConfig::default()), Err(Error::InfeasibleSubcarrier(_))));
    }

    #[test]
    fn dual_prices_stay_feasible() {
        let problem = fixture(5, 16, Chain::Rf);
        let plan = bilevel_solve(&problem, &DualConfig::default()).unwrap();
        let dual = plan.dual.unwrap();
        assert!(dual.history.iter().all(|h| h.lambda >= 0.0));
        assert!(!dual.history.is_empty());
    }

    #[test]
    fn block_check_detects_perturbation() {
        let p = mf_power_rule(&[1.32; 16], 16, 1.0).unwrap();
        let keys = vec![0u8; 16];
        assert!(equal_power_within_blocks_check(p.as_slice(), &keys, 1e-9));
        let mut q = p.as_slice().to_vec();
        q[3] *= 1.01;
        assert!(!equal_power_within_blocks_check(&q, &keys, 1e-4));
    }

    #[test]
    fn surrogate_matches_exact_sinr_for_qpsk() {
        let n = 64;
        let m = 16;
        let scene = SensingScene { targets: vec![Target { sigma_alpha_sq: 2.0, tau: 3.0 }], noise_var: 0.1 };
        let qpsk = Constellation::qpsk();
        let plan = MixturePlan {
            chain: Chain::Mf,
            class_ids: vec![ConstellationId::Qpsk.to_string()],
            eta: vec![1.0],
            p_per_class: vec![1.5],
            theta: vec![1.5],
            objective: 0.0,
            rates: vec![2.0],
            mu4: vec![qpsk.moments().mu4],
            nu_minus2: vec![qpsk.moments().nu_minus2],
        };
        let inputs = crate::sensing::SensingLawInputs::new(
            PowerAllocation::equal(n, 1.5),
            vec![1.0; n],
            vec![1.0; n],
            scene.clone(),
            m,
        )
        .unwrap();
        let exact = crate::sensing::sinr_mf(&inputs, 0).unwrap();
        assert_relative_eq!(surrogate_sinr(Chain::Mf, &plan, &scene, 0, n, m).unwrap(), exact, max_relative = 1e-12);
        let rf = crate::sensing::snr_rf(&inputs, 0).unwrap();
        assert_relative_eq!(surrogate_sinr(Chain::Rf, &plan, &scene, 0, n, m).unwrap(), rf, max_relative = 1e-12);
    }

    #[test]
    fn tradeoff_curves_are_monotone_and_rf_dominates() {
        let scene = SensingScene {
            targets: vec![Target { sigma_alpha_sq: 1.0, tau: 3.0 }, Target { sigma_alpha_sq: 1.0, tau: 20.0 }],
            noise_var: 0.01,
        };
        let classes = builtin_classes(0.01);
        let mut prev = [f64::INFINITY; 2];
        for i in 0..=40 {
            let r = 2.0 + i as f64 * 0.1;
            for (c, chain) in [Chain::Mf, Chain::Rf].into_iter().enumerate() {
                let plan = flat_fading_solve(&FlatProblem::new(chain, classes.clone(), r, 6.0)).unwrap();
                let s = surrogate_sinr(chain, &plan, &scene, 0, 64, 16).unwrap();
                assert!(s <= prev[c] * (1.0 + 1e-9), "{chain} at {r}: {s} > {}", prev[c]);
                prev[c] = s;
            }
            assert!(prev[1] >= prev[0]);
        }
    }
}
