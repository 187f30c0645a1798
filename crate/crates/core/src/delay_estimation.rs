//! Delay estimation: Matrix Pencil super-resolution, grid peak picking,
//! and Monte-Carlo RMSE benchmarking.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use log::warn;
use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constellations::Constellation;
use crate::error::{invalid, Result};
use crate::ofdm::{PowerAllocation, SensingScene};
use crate::sensing::{Chain, RangeProfile, Simulator};
use crate::stats::{from_db10, pairwise_sum};

/// Rank threshold applied to `sigma_i / sigma_1` of the first Hankel matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankTolerance {
    Fixed(f64),
    /// Threshold at `median(sigma) / sigma_1`, i.e. the noise floor estimate.
    Auto,
}

impl Default for RankTolerance {
    fn default() -> Self {
        RankTolerance::Fixed(1e-10)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PencilConfig {
    /// Pencil dimension K; `L = N - K`.
    pub pencil_dim: usize,
    /// Model order Q.
    pub model_order: usize,
    #[serde(default)]
    pub svd_rank_tol: RankTolerance,
}

impl PencilConfig {
    /// `K = floor(N/2)` with the given model order.
    pub fn new(n: usize, model_order: usize) -> Self {
        Self { pencil_dim: n / 2, model_order, svd_rank_tol: RankTolerance::default() }
    }

    pub fn with_rank_tol(mut self, tol: RankTolerance) -> Self {
        self.svd_rank_tol = tol;
        self
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let k = self.pencil_dim;
        if k < 1 || k >= n {
            return Err(invalid(format!("pencil dimension K = {k} must lie in [1, {}]", n.saturating_sub(1))));
        }
        let l = n - k;
        if self.model_order == 0 || self.model_order >= k.min(l) {
            return Err(invalid(format!(
                "model order Q = {} must satisfy 1 <= Q < min(K, L) = {}",
                self.model_order,
                k.min(l)
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayEstimate {
    /// Delays in samples, each in `[0, N)`, ascending.
    pub taus: Vec<f64>,
    /// Pencil eigenvalues, in the same order as `taus`.
    pub eigvals: Vec<Complex64>,
    pub effective_order: usize,
    pub rank_warning: bool,
}

/// `E1[i][j] = e[i+j]`, `E2[i][j] = e[i+j+1]`, both `(N-K) x K`.
pub fn build_hankel_pair(e: &[Complex64], k: usize) -> Result<(DMatrix<Complex64>, DMatrix<Complex64>)> {
    let n = e.len();
    if k < 1 || k >= n {
        return Err(invalid(format!("pencil dimension K = {k} out of range for N = {n}")));
    }
    let l = n - k;
    let e1 = DMatrix::from_fn(l, k, |i, j| e[i + j]);
    let e2 = DMatrix::from_fn(l, k, |i, j| e[i + j + 1]);
    Ok((e1, e2))
}

/// Delay in samples from a pencil eigenvalue: `-N/(2 pi) arg(lambda) mod N`.
pub fn delay_from_eigval(lambda: Complex64, n: usize) -> f64 {
    let nf = n as f64;
    let tau = (-nf / (2.0 * PI) * lambda.arg()).rem_euclid(nf);
    // rem_euclid can round up to exactly N.
    if tau >= nf {
        0.0
    } else {
        tau
    }
}

/// Matrix Pencil delay estimate from a spectrum-domain sequence `e[n]`.
pub fn matrix_pencil(e: &[Complex64], cfg: &PencilConfig) -> Result<DelayEstimate> {
    let n = e.len();
    cfg.validate(n)?;
    let (e1, e2) = build_hankel_pair(e, cfg.pencil_dim)?;
    let svd = e1.svd(true, true);
    let u = svd.u.as_ref().expect("requested U");
    let v_t = svd.v_t.as_ref().expect("requested V^H");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sigma: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();

    let tol = match cfg.svd_rank_tol {
        RankTolerance::Fixed(t) => t,
        RankTolerance::Auto => {
            let mut s = sigma.clone();
            s.sort_by(f64::total_cmp);
            if sigma[0] > 0.0 {
                s[s.len() / 2] / sigma[0]
            } else {
                0.0
            }
        }
    };
    let q = cfg.model_order;
    let above = if sigma[0] > 0.0 { sigma.iter().take(q).take_while(|s| **s / sigma[0] >= tol).count() } else { 0 };
    let rank_warning = above < q;
    let eff = above.max(1);
    if rank_warning {
        warn!("pencil rank deficient: {above} of {q} singular values above tolerance {tol:e}");
    }
    if sigma[0] == 0.0 {
        return Err(invalid("pencil input is identically zero"));
    }

    let uq = DMatrix::from_fn(u.nrows(), eff, |i, j| u[(i, order[j])]);
    let vq = DMatrix::from_fn(v_t.ncols(), eff, |i, j| v_t[(order[j], i)].conj());
    let mut a = uq.adjoint() * &e2 * vq;
    for (r, s) in sigma.iter().take(eff).enumerate() {
        let inv = 1.0 / s;
        a.row_mut(r).iter_mut().for_each(|v| *v *= inv);
    }
    let eig: Vec<Complex64> = if eff == 1 {
        vec![a[(0, 0)]]
    } else {
        a.clone()
            .schur()
            .eigenvalues()
            .ok_or_else(|| invalid("pencil eigenvalue decomposition did not converge"))?
            .iter()
            .copied()
            .collect()
    };
    let mut pairs: Vec<(f64, Complex64)> = eig.iter().map(|l| (delay_from_eigval(*l, n), *l)).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(DelayEstimate {
        taus: pairs.iter().map(|p| p.0).collect(),
        eigvals: pairs.iter().map(|p| p.1).collect(),
        effective_order: eff,
        rank_warning,
    })
}

/// Indices of the `q_count` largest-magnitude bins, no two circularly adjacent.
pub fn peak_pick(profile: &RangeProfile, q_count: usize) -> Result<Vec<usize>> {
    let n = profile.len();
    if q_count > n {
        return Err(invalid(format!("asked for {q_count} peaks in {n} bins")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| profile.bins[b].norm_sqr().total_cmp(&profile.bins[a].norm_sqr()).then(a.cmp(&b)));
    let mut picked: Vec<usize> = Vec::with_capacity(q_count);
    for i in order {
        if picked.len() == q_count {
            break;
        }
        if picked.iter().all(|&p| circular_distance(p as f64, i as f64, n) > 1.0) {
            picked.push(i);
        }
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Distance on the delay circle of length `n`.
pub fn circular_distance(a: f64, b: f64, n: usize) -> f64 {
    let nf = n as f64;
    let d = (a - b).rem_euclid(nf);
    d.min(nf - d)
}

/// Squared errors of the minimum-cost pairing of estimates to truths.
///
/// Truths left without an estimate score `(N/2)^2`. Exhaustive over
/// pairings, so intended for small target counts.
pub fn paired_squared_errors(truth: &[f64], est: &[f64], n: usize) -> Vec<f64> {
    fn search(
        t: usize,
        truth: &[f64],
        est: &[f64],
        used: &mut Vec<bool>,
        n: usize,
        cur: &mut Vec<f64>,
        best: &mut (f64, Vec<f64>),
    ) {
        if t == truth.len() {
            let cost: f64 = cur.iter().sum();
            if cost < best.0 {
                *best = (cost, cur.clone());
            }
            return;
        }
        let free = used.iter().filter(|u| !**u).count();
        for j in 0..est.len() {
            if !used[j] {
                used[j] = true;
                cur.push(circular_distance(truth[t], est[j], n).powi(2));
                search(t + 1, truth, est, used, n, cur, best);
                cur.pop();
                used[j] = false;
            }
        }
        if free < truth.len() - t {
            cur.push((n as f64 / 2.0).powi(2));
            search(t + 1, truth, est, used, n, cur, best);
            cur.pop();
        }
    }
    let mut best = (f64::INFINITY, Vec::new());
    search(0, truth, est, &mut vec![false; est.len()], n, &mut Vec::new(), &mut best);
    best.1
}

/// Which estimator the benchmark runs on each trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Pencil,
    PeakPick,
}

/// One row of the RMSE-vs-SNR table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseRow {
    pub snr_db: f64,
    pub chain: Chain,
    pub mix_id: String,
    pub rmse_samples: f64,
    pub rmse_meters: f64,
    pub trials: usize,
}

/// Benchmark settings shared across SNR points.
#[derive(Debug, Clone)]
pub struct RmseSetup {
    pub scene: SensingScene,
    pub chain: Chain,
    pub mix_id: String,
    pub map: Vec<Arc<Constellation>>,
    pub p: PowerAllocation,
    pub m: usize,
    pub estimator: Estimator,
    pub pencil: PencilConfig,
    /// Meters per delay sample (`c T_s / 2`).
    pub meters_per_sample: f64,
}

/// SNR used by the benchmark: `sigma_alpha^2 P_ave / sigma_z^2` of the first target.
pub fn noise_var_for_snr(scene: &SensingScene, p_ave: f64, snr_db: f64) -> Result<f64> {
    let t = scene.targets.first().ok_or_else(|| invalid("RMSE benchmark needs at least one target"))?;
    Ok(t.sigma_alpha_sq * p_ave / from_db10(snr_db))
}

/// Monte-Carlo delay RMSE at each SNR point.
///
/// SNR point `i`, trial `t` draws from stream `i * trials + t` of `seed`.
pub fn rmse_benchmark(setup: &RmseSetup, snr_grid_db: &[f64], trials: usize, seed: u64) -> Result<Vec<RmseRow>> {
    if trials == 0 {
        return Err(invalid("trials must be >= 1"));
    }
    let n = setup.map.len();
    let truth: Vec<f64> = setup.scene.targets.iter().map(|t| t.tau).collect();
    let q = truth.len();
    snr_grid_db
        .iter()
        .enumerate()
        .map(|(i, &snr_db)| {
            let mut scene = setup.scene.clone();
            scene.noise_var = noise_var_for_snr(&setup.scene, setup.p.p_ave(), snr_db)?;
            let sim = Simulator::new(setup.map.clone(), setup.p.clone(), scene, setup.m)?;
            let per_trial: Vec<f64> = (0..trials)
                .into_par_iter()
                .map(|t| {
                    let mut rng = crate::stats::trial_rng(seed, (i * trials + t) as u64);
                    let out = sim.run(setup.chain, &mut rng)?;
                    let est: Vec<f64> = match setup.estimator {
                        Estimator::Pencil => matrix_pencil(&out.spectrum, &setup.pencil)?.taus,
                        Estimator::PeakPick => peak_pick(&out.profile, q)?.into_iter().map(|v| v as f64).collect(),
                    };
                    Ok(pairwise_sum(&paired_squared_errors(&truth, &est, n)))
                })
                .collect::<Result<_>>()?;
            let mse = pairwise_sum(&per_trial) / (trials * q) as f64;
            let rmse = mse.sqrt();
            Ok(RmseRow {
                snr_db,
                chain: setup.chain,
                mix_id: setup.mix_id.clone(),
                rmse_samples: rmse,
                rmse_meters: rmse * setup.meters_per_sample,
                trials,
            })
        })
        .collect()
}

/// CSV with columns `snr_db,chain,mix_id,rmse_samples,rmse_meters,trials`.
pub fn write_rmse_csv<W: Write>(rows: &[RmseRow], mut w: W) -> Result<()> {
    writeln!(w, "snr_db,chain,mix_id,rmse_samples,rmse_meters,trials")?;
    for r in rows {
        writeln!(w, "{},{},{},{:.9e},{:.9e},{}", r.snr_db, r.chain, r.mix_id, r.rmse_samples, r.rmse_meters, r.trials)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ofdm::Target;

    fn exponentials(n: usize, taus: &[f64], amps: &[Complex64]) -> Vec<Complex64> {
        (0..n)
            .map(|k| {
                taus.iter()
                    .zip(amps)
                    .map(|(t, a)| a * Complex64::from_polar(1.0, -2.0 * PI * k as f64 * t / n as f64))
                    .sum()
            })
            .collect()
    }

    #[test]
    fn hankel_indexing() {
        let e: Vec<Complex64> = (0..6).map(|v| Complex64::new(v as f64, 0.0)).collect();
        let (e1, e2) = build_hankel_pair(&e, 3).unwrap();
        assert_eq!((e1.nrows(), e1.ncols()), (3, 3));
        assert_eq!(e1.row(0).iter().map(|c| c.re).collect::<Vec<_>>(), vec![0.0, 1.0, 2.0]);
        assert_eq!(e2.row(0).iter().map(|c| c.re).collect::<Vec<_>>(), vec![1.0, 2.0, 3.0]);
        let (s1, _) = build_hankel_pair(&e[1..], 3).unwrap();
        assert_eq!(s1.rows(0, 2), e2.rows(0, 2));
        assert!(build_hankel_pair(&e, 6).is_err());
        assert!(build_hankel_pair(&e, 0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(PencilConfig::new(64, 1).validate(64).is_ok());
        assert!(PencilConfig::new(64, 32).validate(64).is_err());
        assert!(PencilConfig::new(64, 0).validate(64).is_err());
        let cfg = PencilConfig { pencil_dim: 60, model_order: 4, svd_rank_tol: RankTolerance::Auto };
        assert!(cfg.validate(64).is_err());
    }

    #[test]
    fn pencil_integer_and_fractional() {
        let n = 64;
        for tau in [17.0, 10.5, 0.0, 63.25] {
            let e = exponentials(n, &[tau], &[Complex64::new(1.0, 0.0)]);
            let est = matrix_pencil(&e, &PencilConfig::new(n, 1)).unwrap();
            assert!(circular_distance(est.taus[0], tau, n) < 1e-6, "{tau}: {:?}", est.taus);
            assert!(!est.rank_warning);
        }
    }

    #[test]
    fn pencil_two_close_targets() {
        let n = 64;
        let e = exponentials(n, &[17.0, 17.8], &[Complex64::new(1.0, 0.0), Complex64::new(0.7, -0.3)]);
        let est = matrix_pencil(&e, &PencilConfig::new(n, 2)).unwrap();
        assert!((est.taus[0] - 17.0).abs() < 1e-5);
        assert!((est.taus[1] - 17.8).abs() < 1e-5);
    }

    #[test]
    fn pencil_rank_deficiency_reduces_order() {
        let n = 32;
        let e = exponentials(n, &[5.0], &[Complex64::new(1.0, 0.0)]);
        let est = matrix_pencil(&e, &PencilConfig::new(n, 3)).unwrap();
        assert!(est.rank_warning);
        assert_eq!(est.effective_order, 1);
        assert!((est.taus[0] - 5.0).abs() < 1e-8);
    }

    #[test]
    fn pencil_from_simulated_rf_spectrum() {
        let n = 64;
        let scene = SensingScene { targets: vec![Target { sigma_alpha_sq: 1.0, tau: 10.5 }], noise_var: 0.0 };
        let qam = Arc::new(Constellation::qam16());
        let map = vec![qam; n];
        let sim = Simulator::new(map, PowerAllocation::equal(n, 1.0), scene, 4).unwrap();
        let out = sim.run(Chain::Rf, &mut crate::stats::trial_rng(5, 0)).unwrap();
        let est = matrix_pencil(&out.spectrum, &PencilConfig::new(n, 1)).unwrap();
        assert!((est.taus[0] - 10.5).abs() < 1e-6);
    }

    #[test]
    fn conjugation_and_reversal_mirror_delays() {
        let n = 64;
        let tau = 12.3;
        let e = exponentials(n, &[tau], &[Complex64::new(0.4, 0.9)]);
        let cfg = PencilConfig::new(n, 1);
        let conj: Vec<Complex64> = e.iter().map(|v| v.conj()).collect();
        let rev: Vec<Complex64> = e.iter().rev().copied().collect();
        let both: Vec<Complex64> = e.iter().rev().map(|v| v.conj()).collect();
        let mirror = n as f64 - tau;
        assert!((matrix_pencil(&conj, &cfg).unwrap().taus[0] - mirror).abs() < 1e-8);
        assert!((matrix_pencil(&rev, &cfg).unwrap().taus[0] - mirror).abs() < 1e-8);
        assert!((matrix_pencil(&both, &cfg).unwrap().taus[0] - tau).abs() < 1e-8);
    }

    #[test]
    fn peak_pick_cases() {
        let n = 64;
        let mut bins = vec![Complex64::new(0.0, 0.0); n];
        bins[17] = Complex64::new(1.0, 0.0);
        let prof = RangeProfile { bins: bins.clone(), chain: Chain::Mf, m_integrated: 1 };
        assert_eq!(peak_pick(&prof, 1).unwrap(), vec![17]);
        bins[40] = Complex64::new(0.0, 0.8);
        bins[18] = Complex64::new(0.9, 0.0);
        let prof = RangeProfile { bins, chain: Chain::Mf, m_integrated: 1 };
        assert_eq!(peak_pick(&prof, 2).unwrap(), vec![17, 40]);
        assert!(peak_pick(&prof, 65).is_err());
    }

    #[test]
    fn peak_pick_is_grid_limited() {
        let n = 64;
        let e = exponentials(n, &[10.5], &[Complex64::new(1.0, 0.0)]);
        let prof = RangeProfile { bins: crate::ofdm::idft(&e), chain: Chain::Rf, m_integrated: 1 };
        let p = peak_pick(&prof, 1).unwrap()[0];
        assert!(p == 10 || p == 11);
        assert!((p as f64 - 10.5).abs() >= 0.5);
    }

    #[test]
    fn pairing_uses_circular_distance() {
        let sq = paired_squared_errors(&[1.0, 63.0], &[62.5, 0.5], 64);
        assert!((sq.iter().sum::<f64>() - 0.5).abs() < 1e-12);
        let missing = paired_squared_errors(&[1.0, 30.0], &[1.2], 64);
        assert!((missing.iter().sum::<f64>() - (0.04 + 1024.0)).abs() < 1e-9);
    }

    #[test]
    fn rmse_vanishes_without_noise_and_is_deterministic() {
        let n = 64;
        let qam16 = Arc::new(Constellation::qam16());
        let setup = RmseSetup {
            scene: SensingScene { targets: vec![Target { sigma_alpha_sq: 1.0, tau: 20.3 }], noise_var: 0.0 },
            chain: Chain::Rf,
            mix_id: "qam16".into(),
            map: vec![qam16; n],
            p: PowerAllocation::equal(n, 1.0),
            m: 2,
            estimator: Estimator::Pencil,
            pencil: PencilConfig::new(n, 1),
            meters_per_sample: 7.5,
        };
        let rows = rmse_benchmark(&setup, &[300.0, 10.0], 20, 4).unwrap();
        assert!(rows[0].rmse_samples < 1e-8);
        assert!((rows[1].rmse_meters - 7.5 * rows[1].rmse_samples).abs() < 1e-12);
        assert_eq!(rows, rmse_benchmark(&setup, &[300.0, 10.0], 20, 4).unwrap());
        let mut out = Vec::new();
        write_rmse_csv(&rows, &mut out).unwrap();
        assert!(String::from_utf8(out)
            .unwrap()
            .starts_with("snr_db,chain,mix_id,rmse_samples,rmse_meters,trials\n300,RF,qam16,"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn pencil_exact_for_separated_mixtures(
                base in 0.0f64..50.0,
                gaps in proptest::collection::vec(0.2f64..4.0, 0..3),
                phases in proptest::collection::vec(0.0f64..std::f64::consts::TAU, 3),
            ) {
                let n = 64;
                let mut taus = vec![base];
                for g in &gaps {
                    taus.push(taus.last().unwrap() + g);
                }
                let amps: Vec<Complex64> = (0..taus.len()).map(|i| Complex64::from_polar(1.0 + 0.2 * i as f64, phases[i])).collect();
                let e = exponentials(n, &taus, &amps);
                let est = matrix_pencil(&e, &PencilConfig::new(n, taus.len())).unwrap();
                for err in paired_squared_errors(&taus, &est.taus, n) {
                    prop_assert!(err.sqrt() < 1e-5, "{:?} vs {:?}", est.taus, taus);
                }
            }

            #[test]
            fn pencil_invariant_to_global_scaling(tau in 0.0f64..63.0, re in -5.0f64..5.0, im in 0.1f64..5.0) {
                let n = 64;
                let e = exponentials(n, &[tau, (tau + 7.0) % 64.0], &[Complex64::new(1.0, 0.0), Complex64::new(0.5, 0.5)]);
                let g = Complex64::new(re, im);
                let scaled: Vec<Complex64> = e.iter().map(|v| v * g).collect();
                let cfg = PencilConfig::new(n, 2);
                let a = matrix_pencil(&e, &cfg).unwrap();
                let b = matrix_pencil(&scaled, &cfg).unwrap();
                for (x, y) in a.eigvals.iter().zip(&b.eigvals) {
                    prop_assert!((x - y).norm() < 1e-8);
                }
            }
        }
    }
}
