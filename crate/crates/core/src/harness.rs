//! Scenario files, experiment pipelines and artifact emission.
//!
//! A scenario names one pipeline plus its sweep. Each pipeline composes
//! operations from the other modules and produces CSV tables; a manifest
//! records the config hash, seed and a digest of every file written.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::info;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::constellations::{Constellation, ConstellationFile, ConstellationId};
use crate::delay_estimation::{rmse_benchmark, Estimator, PencilConfig, RmseSetup};
use crate::error::{Error, Result};
use crate::ofdm::{OfdmConfig, PowerAllocation, SensingScene, Target};
use crate::optimizer::{
    bilevel_solve, exhaustive_oracle, flat_fading_solve, mf_power_rule, rf_power_rule, support_size, surrogate_sinr,
    DualConfig, FlatClass, FlatProblem, SubcarrierPlan, SubcarrierProblem, DEFAULT_PMAX_FACTOR,
};
use crate::sensing::{
    closed_form_esl_coherent, empirical_acf_power, expected_r0_sq_coherent, measured_sinr, sinr_mf, snr_rf,
};
use crate::sensing::{Chain, SensingLawInputs, Simulator, SinrSample};
use crate::stats::{db10, trial_rng};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Stream offset for channel draws, kept away from trial streams.
const CHANNEL_STREAM: u64 = 1 << 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineKind {
    MixtureSweep,
    SubcarrierPlan,
    RmseVsSnr,
    TradeoffCurve,
    CoherentGain,
    QpskFractionSweep,
}

impl PipelineKind {
    fn sweep_variable(self) -> SweepVariable {
        match self {
            PipelineKind::MixtureSweep | PipelineKind::SubcarrierPlan | PipelineKind::TradeoffCurve => {
                SweepVariable::RMin
            }
            PipelineKind::RmseVsSnr => SweepVariable::Snr,
            PipelineKind::CoherentGain => SweepVariable::MSymbols,
            PipelineKind::QpskFractionSweep => SweepVariable::QpskFraction,
        }
    }

    fn name(self) -> &'static str {
        match self {
            PipelineKind::MixtureSweep => "mixture_sweep",
            PipelineKind::SubcarrierPlan => "subcarrier_plan",
            PipelineKind::RmseVsSnr => "rmse_vs_snr",
            PipelineKind::TradeoffCurve => "tradeoff_curve",
            PipelineKind::CoherentGain => "coherent_gain",
            PipelineKind::QpskFractionSweep => "qpsk_fraction_sweep",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    RMin,
    Snr,
    QpskFraction,
    MSymbols,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub variable: SweepVariable,
    pub grid: Vec<f64>,
}

/// A constellation by builtin name, from a file, or inline.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ConstellationRef {
    Name(String),
    File { file: PathBuf },
    Inline(ConstellationFile),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassSpec {
    Ref(ConstellationRef),
    Entry { constellation: ConstellationRef },
}

impl ClassSpec {
    fn reference(&self) -> &ConstellationRef {
        match self {
            ClassSpec::Ref(r) | ClassSpec::Entry { constellation: r } => r,
        }
    }

    pub fn resolve(&self, base_dir: &Path) -> Result<Constellation> {
        match self.reference() {
            ConstellationRef::Name(name) => Constellation::builtin(&ConstellationId::from(name.clone()))
                .ok_or_else(|| Error::Schema(format!("unknown constellation `{name}`; use a file or inline points"))),
            ConstellationRef::File { file } => Constellation::load(base_dir.join(file)),
            ConstellationRef::Inline(f) => f.clone().into_constellation(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RayleighSpec {
    pub mean: f64,
}

/// `"flat"`, an explicit list of `|H_n|^2`, or `{"rayleigh": {"mean": ..}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ChannelSpec {
    Named(String),
    Values(Vec<f64>),
    Rayleigh { rayleigh: RayleighSpec },
}

impl Default for ChannelSpec {
    fn default() -> Self {
        ChannelSpec::Named("flat".into())
    }
}

/// Fraction of subcarriers per class name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixSpec {
    pub id: String,
    pub fractions: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerRule {
    #[default]
    Equal,
    MfRule,
    RfRule,
}

fn default_scene() -> SensingScene {
    SensingScene {
        targets: vec![Target { sigma_alpha_sq: 1.0, tau: 20.3 }, Target { sigma_alpha_sq: 1.0, tau: 35.6 }],
        noise_var: 0.01,
    }
}

fn default_classes() -> Vec<ClassSpec> {
    ["QPSK", "16QAM", "32APSK", "64QAM"].into_iter().map(|s| ClassSpec::Ref(ConstellationRef::Name(s.into()))).collect()
}

fn default_chains() -> Vec<Chain> {
    vec![Chain::Mf, Chain::Rf]
}

fn default_trials() -> usize {
    1000
}

fn default_ber() -> f64 {
    1e-4
}

fn default_noise_psd_bw() -> f64 {
    0.03
}

fn default_one() -> f64 {
    1.0
}

fn default_estimator() -> Estimator {
    Estimator::Pencil
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub pipeline: PipelineKind,
    #[serde(default)]
    pub ofdm: OfdmConfig,
    #[serde(default = "default_scene")]
    pub scene: SensingScene,
    #[serde(default = "default_classes")]
    pub classes: Vec<ClassSpec>,
    #[serde(default)]
    pub channel_gains: ChannelSpec,
    #[serde(default = "default_chains")]
    pub chains: Vec<Chain>,
    pub sweep: Sweep,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_ber")]
    pub ber_th: f64,
    /// `N0 * delta_f` relative to unit channel gain.
    #[serde(default = "default_noise_psd_bw")]
    pub noise_psd_bw: f64,
    /// Clutter scale in the optimizer's MF coefficients.
    #[serde(default = "default_one")]
    pub clutter_power: f64,
    #[serde(default)]
    pub p_max: Option<f64>,
    /// Rate target for pipelines that do not sweep it.
    #[serde(default)]
    pub r_min: Option<f64>,
    #[serde(default)]
    pub mixes: Vec<MixSpec>,
    #[serde(default)]
    pub power_rule: PowerRule,
    #[serde(default)]
    pub dual: DualConfig,
    #[serde(default = "default_estimator")]
    pub estimator: Estimator,
    /// Target whose SINR is reported.
    #[serde(default)]
    pub target_index: usize,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn schema(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Schema(format!("field `{field}`: {msg}"))
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        Error::Schema(format!("at `{path}` (line {}, column {}): {inner}", inner.line(), inner.column()))
    })
}

impl Scenario {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let s: Scenario = parse_json(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut s: Scenario = parse_json(&text)?;
        s.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        s.validate()?;
        Ok(s)
    }

    pub fn n(&self) -> usize {
        self.ofdm.n_subcarriers
    }

    /// Field-level checks beyond the JSON shape.
    pub fn validate(&self) -> Result<()> {
        self.ofdm.validate().map_err(|e| schema("ofdm", e))?;
        self.scene.validate(self.n()).map_err(|e| schema("scene", e))?;
        if self.trials == 0 {
            return Err(schema("trials", "must be >= 1"));
        }
        if self.sweep.grid.is_empty() {
            return Err(schema("sweep.grid", "must not be empty"));
        }
        if let Some(i) = self.sweep.grid.iter().position(|v| !v.is_finite()) {
            return Err(schema(&format!("sweep.grid[{i}]"), "must be finite"));
        }
        let want = self.pipeline.sweep_variable();
        if self.sweep.variable != want {
            return Err(schema(
                "sweep.variable",
                format!("pipeline {} sweeps {:?}, got {:?}", self.pipeline.name(), want, self.sweep.variable),
            ));
        }
        match want {
            SweepVariable::MSymbols => {
                if let Some(i) = self.sweep.grid.iter().position(|v| *v < 1.0 || v.fract() != 0.0) {
                    return Err(schema(&format!("sweep.grid[{i}]"), "m_symbols must be a positive integer"));
                }
            }
            SweepVariable::QpskFraction => {
                if let Some(i) = self.sweep.grid.iter().position(|v| !(0.0..=1.0).contains(v)) {
                    return Err(schema(&format!("sweep.grid[{i}]"), "fraction must lie in [0, 1]"));
                }
            }
            SweepVariable::RMin | SweepVariable::Snr => {}
        }
        if self.chains.is_empty() {
            return Err(schema("chains", "must not be empty"));
        }
        if self.classes.is_empty() {
            return Err(schema("classes", "must not be empty"));
        }
        let classes = self.resolve_classes()?;
        for (i, c) in classes.iter().enumerate() {
            if c.id().to_string().contains(',') {
                return Err(schema(&format!("classes[{i}]"), "constellation id must not contain commas"));
            }
        }
        if !(self.ber_th > 0.0 && self.ber_th < 0.5) {
            return Err(schema("ber_th", "must lie in (0, 0.5)"));
        }
        if !(self.noise_psd_bw >= 0.0) {
            return Err(schema("noise_psd_bw", "must be nonnegative"));
        }
        if !(self.clutter_power > 0.0) {
            return Err(schema("clutter_power", "must be positive"));
        }
        if let Some(p) = self.p_max {
            if !(p >= self.ofdm.p_ave) {
                return Err(schema("p_max", "must be at least ofdm.p_ave"));
            }
        }
        match &self.channel_gains {
            ChannelSpec::Named(s) if s != "flat" => {
                return Err(schema("channel_gains", format!("unknown keyword `{s}`")))
            }
            ChannelSpec::Values(v) => {
                if v.len() != self.n() {
                    return Err(schema("channel_gains", format!("expected {} values, got {}", self.n(), v.len())));
                }
                if let Some(i) = v.iter().position(|g| !(*g > 0.0)) {
                    return Err(schema(&format!("channel_gains[{i}]"), "must be positive"));
                }
            }
            ChannelSpec::Rayleigh { rayleigh } if !(rayleigh.mean > 0.0) => {
                return Err(schema("channel_gains.rayleigh.mean", "must be positive"))
            }
            _ => {}
        }
        let needs_target = matches!(
            self.pipeline,
            PipelineKind::MixtureSweep
                | PipelineKind::TradeoffCurve
                | PipelineKind::SubcarrierPlan
                | PipelineKind::QpskFractionSweep
        );
        if needs_target && self.target_index >= self.scene.targets.len() {
            return Err(schema("target_index", format!("scene has {} targets", self.scene.targets.len())));
        }
        match self.pipeline {
            PipelineKind::RmseVsSnr | PipelineKind::CoherentGain => {
                if self.mixes.is_empty() {
                    return Err(schema("mixes", format!("pipeline {} needs at least one mix", self.pipeline.name())));
                }
                for (i, m) in self.mixes.iter().enumerate() {
                    self.mix_weights(&classes, m).map_err(|e| schema(&format!("mixes[{i}]"), e))?;
                }
                if self.pipeline == PipelineKind::RmseVsSnr && self.scene.targets.is_empty() {
                    return Err(schema("scene.targets", "RMSE needs at least one target"));
                }
            }
            PipelineKind::QpskFractionSweep => {
                if classes.len() != 2 {
                    return Err(schema(
                        "classes",
                        "qpsk_fraction_sweep takes exactly two classes: the low-order one first",
                    ));
                }
            }
            PipelineKind::MixtureSweep if !matches!(self.channel_gains, ChannelSpec::Named(_)) => {
                return Err(schema("channel_gains", "mixture_sweep assumes flat fading; use \"flat\""));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn resolve_classes(&self) -> Result<Vec<Arc<Constellation>>> {
        self.classes
            .iter()
            .enumerate()
            .map(|(i, c)| c.resolve(&self.base_dir).map(Arc::new).map_err(|e| schema(&format!("classes[{i}]"), e)))
            .collect()
    }

    /// `|H_n|^2` per subcarrier.
    pub fn resolve_gains(&self) -> Vec<f64> {
        let n = self.n();
        match &self.channel_gains {
            ChannelSpec::Named(_) => vec![1.0; n],
            ChannelSpec::Values(v) => v.clone(),
            ChannelSpec::Rayleigh { rayleigh } => {
                let mut rng = trial_rng(self.seed, CHANNEL_STREAM);
                // Deep fades are floored at 5% of the mean so every subcarrier stays usable.
                (0..n)
                    .map(|_| {
                        let u: f64 = rng.random();
                        (-(1.0 - u).ln() * rayleigh.mean).max(0.05 * rayleigh.mean)
                    })
                    .collect()
            }
        }
    }

    fn mix_weights(&self, classes: &[Arc<Constellation>], mix: &MixSpec) -> Result<Vec<(usize, f64)>> {
        let mut out = Vec::new();
        for (name, f) in &mix.fractions {
            let id = ConstellationId::from(name.clone());
            let j = classes
                .iter()
                .position(|c| *c.id() == id)
                .ok_or_else(|| Error::Schema(format!("class `{name}` is not in `classes`")))?;
            if !(*f >= 0.0) {
                return Err(Error::Schema(format!("fraction for `{name}` must be nonnegative")));
            }
            out.push((j, *f));
        }
        let total: f64 = out.iter().map(|v| v.1).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Schema(format!("fractions sum to {total}, expected 1")));
        }
        out.sort_by_key(|v| v.0);
        Ok(out)
    }

    fn p_max(&self) -> f64 {
        self.p_max.unwrap_or(DEFAULT_PMAX_FACTOR * self.ofdm.p_ave)
    }

    fn power(&self, map: &[Arc<Constellation>]) -> Result<PowerAllocation> {
        let n = map.len();
        let p_ave = self.ofdm.p_ave;
        match self.power_rule {
            PowerRule::Equal => Ok(PowerAllocation::equal(n, p_ave)),
            PowerRule::MfRule => {
                mf_power_rule(&map.iter().map(|c| c.moments().mu4).collect::<Vec<_>>(), self.ofdm.n_symbols, p_ave)
            }
            PowerRule::RfRule => rf_power_rule(&map.iter().map(|c| c.moments().nu_minus2).collect::<Vec<_>>(), p_ave),
        }
    }
}

/// Spread classes over `n` subcarriers in proportion to `weights`, interleaved.
///
/// Counts use largest remainders; each position takes the class furthest
/// behind its running quota (lowest index on ties).
pub fn interleave_map(classes: &[Arc<Constellation>], weights: &[(usize, f64)], n: usize) -> Vec<Arc<Constellation>> {
    let exact: Vec<f64> = weights.iter().map(|w| w.1 * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|v| v.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    let mut used = vec![0usize; weights.len()];
    (0..n)
        .map(|pos| {
            let k = (0..weights.len())
                .filter(|&k| used[k] < counts[k])
                .max_by(|&a, &b| {
                    let la = counts[a] as f64 * (pos + 1) as f64 / n as f64 - used[a] as f64;
                    let lb = counts[b] as f64 * (pos + 1) as f64 / n as f64 - used[b] as f64;
                    la.total_cmp(&lb).then(b.cmp(&a))
                })
                .expect("counts sum to n");
            used[k] += 1;
            Arc::clone(&classes[weights[k].0])
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub file: String,
    pub rows: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub pipeline: PipelineKind,
    pub config_sha256: String,
    pub seed: u64,
    pub trials: usize,
    pub status: RunStatus,
    pub infeasible_points: Vec<String>,
    pub files: Vec<ArtifactEntry>,
}

/// An in-memory CSV table.
#[derive(Debug, Clone)]
struct Table {
    file: String,
    text: String,
    rows: usize,
}

impl Table {
    fn new(file: &str, header: &[String]) -> Self {
        Self { file: file.into(), text: format!("{}\n", header.join(",")), rows: 0 }
    }

    fn push(&mut self, cells: Vec<String>) {
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
        self.rows += 1;
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(2 * bytes.len()), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex(&Sha256::digest(data))
}

/// Fixed-precision float cell; non-finite values print as `inf`, `-inf`, `nan`.
fn num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{v:.10e}")
    }
}

fn h(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|c| c.to_string()).collect()
}

/// Overrides applied on top of the scenario file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub trials: Option<usize>,
}

struct Outcome {
    tables: Vec<Table>,
    json: Vec<(String, String)>,
    infeasible: Vec<String>,
}

fn is_infeasible(e: &Error) -> bool {
    matches!(e, Error::Infeasible(_) | Error::InfeasibleSubcarrier(_))
}

/// Load a scenario, run its pipeline and write the artifacts plus `manifest.json`.
pub fn run_experiment(
    scenario_file: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
    opts: &RunOptions,
) -> Result<Manifest> {
    let scenario = Scenario::load(scenario_file)?;
    run_scenario(scenario, out_dir, opts)
}

pub fn run_scenario(mut scenario: Scenario, out_dir: impl AsRef<Path>, opts: &RunOptions) -> Result<Manifest> {
    if let Some(s) = opts.seed {
        scenario.seed = s;
    }
    if let Some(t) = opts.trials {
        scenario.trials = t;
    }
    scenario.validate()?;
    let config = serde_json::to_vec(&scenario)?;
    info!("running {} (seed {}, trials {})", scenario.pipeline.name(), scenario.seed, scenario.trials);
    let outcome = match scenario.pipeline {
        PipelineKind::MixtureSweep => mixture_sweep(&scenario)?,
        PipelineKind::SubcarrierPlan => subcarrier_plan(&scenario)?,
        PipelineKind::RmseVsSnr => rmse_vs_snr(&scenario)?,
        PipelineKind::TradeoffCurve => tradeoff_curve(&scenario)?,
        PipelineKind::CoherentGain => coherent_gain(&scenario)?,
        PipelineKind::QpskFractionSweep => qpsk_fraction_sweep(&scenario)?,
    };
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    for t in &outcome.tables {
        std::fs::write(out_dir.join(&t.file), &t.text)?;
        files.push(ArtifactEntry { file: t.file.clone(), rows: t.rows, sha256: sha256_hex(t.text.as_bytes()) });
    }
    for (name, text) in &outcome.json {
        std::fs::write(out_dir.join(name), text)?;
        files.push(ArtifactEntry { file: name.clone(), rows: 1, sha256: sha256_hex(text.as_bytes()) });
    }
    let manifest = Manifest {
        tool: "isaclab".into(),
        version: VERSION.into(),
        pipeline: scenario.pipeline,
        config_sha256: sha256_hex(&config),
        seed: scenario.seed,
        trials: scenario.trials,
        status: if outcome.infeasible.is_empty() { RunStatus::Ok } else { RunStatus::Infeasible },
        infeasible_points: outcome.infeasible,
        files,
    };
    std::fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Pipelines
// ---------------------------------------------------------------------------

fn flat_problem(
    s: &Scenario,
    classes: &[Arc<Constellation>],
    chain: Chain,
    r_min: f64,
    gain: f64,
) -> Result<FlatProblem> {
    let flat = classes
        .iter()
        .map(|c| FlatClass::from_constellation(c, gain, s.noise_psd_bw, s.ber_th))
        .collect::<Result<Vec<_>>>()?;
    Ok(FlatProblem {
        chain,
        classes: flat,
        r_min,
        p_ave: s.ofdm.p_ave,
        p_max: s.p_max(),
        n_subcarriers: s.n(),
        n_symbols: s.ofdm.n_symbols,
        clutter_power: s.clutter_power,
    })
}

fn subcarrier_problem(
    s: &Scenario,
    classes: &[Arc<Constellation>],
    chain: Chain,
    r_min: f64,
    gains: &[f64],
) -> Result<SubcarrierProblem> {
    let mut p = SubcarrierProblem::new(chain, gains.to_vec(), classes, r_min, s.ofdm.p_ave, s.ber_th, s.noise_psd_bw)?;
    p.p_max = s.p_max();
    p.n_symbols = s.ofdm.n_symbols;
    p.clutter_power = s.clutter_power;
    Ok(p)
}

fn grid_points(s: &Scenario) -> Vec<(Chain, f64)> {
    s.chains.iter().flat_map(|&c| s.sweep.grid.iter().map(move |&v| (c, v))).collect()
}

fn mixture_sweep(s: &Scenario) -> Result<Outcome> {
    let classes = s.resolve_classes()?;
    let ids: Vec<String> = classes.iter().map(|c| c.id().to_string()).collect();
    let mut header = h(&["r_min", "chain", "status", "support", "objective", "objective_db", "sinr", "sinr_db"]);
    header.extend(ids.iter().map(|i| format!("eta_{i}")));
    header.extend(ids.iter().map(|i| format!("power_{i}")));
    header.extend(ids.iter().map(|i| format!("power_{i}_db")));
    let mut table = Table::new("mixture_sweep.csv", &header);
    let results: Vec<_> = grid_points(s)
        .into_par_iter()
        .map(|(chain, r)| {
            let plan = flat_problem(s, &classes, chain, r, 1.0).and_then(|p| flat_fading_solve(&p));
            (chain, r, plan)
        })
        .collect();
    let mut infeasible = Vec::new();
    for (chain, r, plan) in results {
        match plan {
            Ok(plan) => {
                let sinr = surrogate_sinr(chain, &plan, &s.scene, s.target_index, s.n(), s.ofdm.n_symbols)?;
                let mut row = vec![num(r), chain.to_string(), "ok".into(), support_size(&plan, 1e-8).to_string()];
                row.extend([num(plan.objective), num(db10(plan.objective)), num(sinr), num(db10(sinr))]);
                row.extend(plan.eta.iter().map(|v| num(*v)));
                row.extend(plan.p_per_class.iter().map(|v| num(*v)));
                row.extend(plan.p_per_class.iter().map(|v| num(db10(*v))));
                table.push(row);
            }
            Err(e) if is_infeasible(&e) => {
                infeasible.push(format!("{chain} r_min={r}: {e}"));
                let mut row = vec![num(r), chain.to_string(), "infeasible".into()];
                row.extend(std::iter::repeat_n(String::new(), header.len() - 3));
                table.push(row);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(Outcome { tables: vec![table], json: vec![], infeasible })
}

fn all_equal(v: &[f64]) -> bool {
    v.iter().all(|g| *g == v[0])
}

fn solve_plan(
    s: &Scenario,
    classes: &[Arc<Constellation>],
    chain: Chain,
    r: f64,
    gains: &[f64],
) -> Result<SubcarrierPlan> {
    bilevel_solve(&subcarrier_problem(s, classes, chain, r, gains)?, &s.dual)
}

fn subcarrier_plan(s: &Scenario) -> Result<Outcome> {
    let classes = s.resolve_classes()?;
    let gains = s.resolve_gains();
    let mut detail = Table::new(
        "subcarrier_plan.csv",
        &h(&["r_min", "chain", "subcarrier", "gain", "gain_db", "class", "rate", "power", "power_db"]),
    );
    let mut summary = Table::new(
        "plan_summary.csv",
        &h(&[
            "r_min",
            "chain",
            "status",
            "objective",
            "objective_db",
            "average_rate",
            "converged",
            "iterations",
            "sinr",
            "sinr_db",
        ]),
    );
    let results: Vec<_> = grid_points(s)
        .into_par_iter()
        .map(|(chain, r)| (chain, r, solve_plan(s, &classes, chain, r, &gains)))
        .collect();
    let mut infeasible = Vec::new();
    let mut plans = Vec::new();
    for (chain, r, plan) in results {
        match plan {
            Ok(mut plan) => {
                let sinr = surrogate_sinr(chain, &plan, &s.scene, s.target_index, s.n(), s.ofdm.n_symbols)?;
                for (k, (&a, &p)) in plan.assignment.iter().zip(&plan.power).enumerate() {
                    detail.push(vec![
                        num(r),
                        chain.to_string(),
                        k.to_string(),
                        num(gains[k]),
                        num(db10(gains[k])),
                        plan.class_ids[a].clone(),
                        num(plan.rates[a]),
                        num(p),
                        num(db10(p)),
                    ]);
                }
                let iters = plan.dual.as_ref().map_or(0, |d| d.iterations);
                summary.push(vec![
                    num(r),
                    chain.to_string(),
                    "ok".into(),
                    num(plan.objective),
                    num(db10(plan.objective)),
                    num(plan.average_rate),
                    plan.converged.to_string(),
                    iters.to_string(),
                    num(sinr),
                    num(db10(sinr)),
                ]);
                if let Some(d) = plan.dual.as_mut() {
                    d.history.clear();
                }
                plans.push(serde_json::json!({ "r_min": r, "chain": chain, "plan": plan }));
            }
            Err(e) if is_infeasible(&e) => {
                infeasible.push(format!("{chain} r_min={r}: {e}"));
                let mut row = vec![num(r), chain.to_string(), "infeasible".into()];
                row.extend(std::iter::repeat_n(String::new(), 7));
                summary.push(row);
            }
            Err(e) => return Err(e),
        }
    }
    let json = serde_json::to_string_pretty(&serde_json::json!({ "channel_gains": gains, "plans": plans }))? + "\n";
    Ok(Outcome { tables: vec![detail, summary], json: vec![("plans.json".into(), json)], infeasible })
}

fn tradeoff_curve(s: &Scenario) -> Result<Outcome> {
    let classes = s.resolve_classes()?;
    let gains = s.resolve_gains();
    let flat = all_equal(&gains);
    let mut table = Table::new(
        "tradeoff_curve.csv",
        &h(&["r_min", "chain", "solver", "status", "sinr", "sinr_db", "objective", "objective_db", "average_rate"]),
    );
    let results: Vec<_> = grid_points(s)
        .into_par_iter()
        .map(|(chain, r)| {
            let res = if flat {
                flat_problem(s, &classes, chain, r, gains[0]).and_then(|p| flat_fading_solve(&p)).and_then(|plan| {
                    let sinr = surrogate_sinr(chain, &plan, &s.scene, s.target_index, s.n(), s.ofdm.n_symbols)?;
                    Ok((sinr, plan.objective, plan.average_rate()))
                })
            } else {
                solve_plan(s, &classes, chain, r, &gains).and_then(|plan| {
                    let sinr = surrogate_sinr(chain, &plan, &s.scene, s.target_index, s.n(), s.ofdm.n_symbols)?;
                    Ok((sinr, plan.objective, plan.average_rate))
                })
            };
            (chain, r, res)
        })
        .collect();
    let solver = if flat { "mixture" } else { "bilevel" };
    let mut infeasible = Vec::new();
    for (chain, r, res) in results {
        match res {
            Ok((sinr, obj, rate)) => table.push(vec![
                num(r),
                chain.to_string(),
                solver.into(),
                "ok".into(),
                num(sinr),
                num(db10(sinr)),
                num(obj),
                num(db10(obj)),
                num(rate),
            ]),
            Err(e) if is_infeasible(&e) => {
                infeasible.push(format!("{chain} r_min={r}: {e}"));
                let mut row = vec![num(r), chain.to_string(), solver.into(), "infeasible".into()];
                row.extend(std::iter::repeat_n(String::new(), 5));
                table.push(row);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(Outcome { tables: vec![table], json: vec![], infeasible })
}

fn rmse_vs_snr(s: &Scenario) -> Result<Outcome> {
    let classes = s.resolve_classes()?;
    let mut table = Table::new(
        "rmse_vs_snr.csv",
        &h(&["snr_db", "snr_linear", "chain", "mix_id", "rmse_samples", "rmse_meters", "trials"]),
    );
    let pencil = PencilConfig::new(s.n(), s.scene.targets.len());
    for mix in &s.mixes {
        let map = interleave_map(&classes, &s.mix_weights(&classes, mix)?, s.n());
        let p = s.power(&map)?;
        for &chain in &s.chains {
            let setup = RmseSetup {
                scene: s.scene.clone(),
                chain,
                mix_id: mix.id.clone(),
                map: map.clone(),
                p: p.clone(),
                m: s.ofdm.n_symbols,
                estimator: s.estimator,
                pencil,
                meters_per_sample: s.ofdm.range_per_sample(),
            };
            // Same seed for every mix and chain: common random numbers.
            for r in rmse_benchmark(&setup, &s.sweep.grid, s.trials, s.seed)? {
                table.push(vec![
                    num(r.snr_db),
                    num(10f64.powf(r.snr_db / 10.0)),
                    r.chain.to_string(),
                    r.mix_id,
                    num(r.rmse_samples),
                    num(r.rmse_meters),
                    r.trials.to_string(),
                ]);
            }
        }
    }
    Ok(Outcome { tables: vec![table], json: vec![], infeasible: vec![] })
}

fn coherent_gain(s: &Scenario) -> Result<Outcome> {
    let classes = s.resolve_classes()?;
    let mut table = Table::new(
        "coherent_gain.csv",
        &h(&[
            "mix_id",
            "m_symbols",
            "sidelobe",
            "sidelobe_db",
            "sidelobe_std_err",
            "closed_form",
            "closed_form_db",
            "floor_to_peak_db",
            "trials",
        ]),
    );
    for mix in &s.mixes {
        let map = interleave_map(&classes, &s.mix_weights(&classes, mix)?, s.n());
        let p = s.power(&map)?;
        let mu4: Vec<f64> = map.iter().map(|c| c.moments().mu4).collect();
        for &mv in &s.sweep.grid {
            let m = mv as usize;
            let est = empirical_acf_power(&map, &p, m, s.trials, s.seed)?;
            let cf = closed_form_esl_coherent(p.as_slice(), &mu4, m)?;
            let peak = expected_r0_sq_coherent(p.as_slice(), &mu4, m)?;
            table.push(vec![
                mix.id.clone(),
                m.to_string(),
                num(est.sidelobe.mean),
                num(db10(est.sidelobe.mean)),
                num(est.sidelobe.std_err),
                num(cf),
                num(db10(cf)),
                num(db10(est.sidelobe.mean / peak)),
                s.trials.to_string(),
            ]);
        }
    }
    Ok(Outcome { tables: vec![table], json: vec![], infeasible: vec![] })
}

fn qpsk_fraction_sweep(s: &Scenario) -> Result<Outcome> {
    let classes = s.resolve_classes()?;
    let gains = s.resolve_gains();
    let mut table = Table::new(
        "qpsk_fraction_sweep.csv",
        &h(&[
            "qpsk_fraction",
            "chain",
            "sinr",
            "sinr_db",
            "measured_sinr",
            "measured_sinr_db",
            "average_rate",
            "ber",
            "throughput",
        ]),
    );
    let q = s.target_index;
    let integer_delay = s.scene.targets[q].tau.fract() == 0.0;
    for (i, &f) in s.sweep.grid.iter().enumerate() {
        let map = interleave_map(&classes, &[(0, f), (1, 1.0 - f)], s.n());
        let p = s.power(&map)?;
        let inputs = SensingLawInputs::from_map(&map, p.clone(), s.scene.clone(), s.ofdm.n_symbols)?;
        let mut ber_sum = 0.0;
        let mut rate_sum = 0.0;
        let mut tput_sum = 0.0;
        for ((c, &pn), g) in map.iter().zip(p.as_slice()).zip(&gains) {
            let ber = if s.noise_psd_bw == 0.0 { 0.0 } else { c.ber(g * pn / s.noise_psd_bw)? };
            ber_sum += ber;
            rate_sum += c.rate_bits();
            tput_sum += c.rate_bits() * (1.0 - ber);
        }
        let nf = s.n() as f64;
        for &chain in &s.chains {
            let sinr = match chain {
                Chain::Mf => sinr_mf(&inputs, q)?,
                Chain::Rf => snr_rf(&inputs, q)?,
            };
            let measured = if integer_delay {
                let sim = Simulator::new(map.clone(), p.clone(), s.scene.clone(), s.ofdm.n_symbols)?;
                let seed = s.seed.wrapping_add(i as u64);
                let samples: Vec<SinrSample> =
                    sim.run_trials(chain, s.trials, seed)?.into_iter().map(Into::into).collect();
                measured_sinr(&samples, &s.scene, q)?
            } else {
                f64::NAN
            };
            table.push(vec![
                num(f),
                chain.to_string(),
                num(sinr),
                num(db10(sinr)),
                num(measured),
                num(db10(measured)),
                num(rate_sum / nf),
                num(ber_sum / nf),
                num(tput_sum / nf),
            ]);
        }
    }
    Ok(Outcome { tables: vec![table], json: vec![], infeasible: vec![] })
}

// ---------------------------------------------------------------------------
// Problem instances
// ---------------------------------------------------------------------------

fn default_symbols() -> usize {
    16
}

/// Per-subcarrier problem instance for the oracle command.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemInstance {
    pub chain: Chain,
    pub classes: Vec<ClassSpec>,
    pub channel_gains: Vec<f64>,
    pub r_min: f64,
    pub p_ave: f64,
    pub ber_th: f64,
    #[serde(default = "default_one")]
    pub clutter_power: f64,
    /// Noise power per subcarrier (`N0 * delta_f`), linear.
    pub sigma_z: f64,
    #[serde(default = "default_symbols")]
    pub n_symbols: usize,
    #[serde(default)]
    pub p_max: Option<f64>,
    #[serde(default)]
    pub dual: DualConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ProblemInstance {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut inst: ProblemInstance = parse_json(&std::fs::read_to_string(path)?)?;
        inst.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(inst)
    }

    pub fn to_problem(&self) -> Result<SubcarrierProblem> {
        if self.classes.is_empty() {
            return Err(schema("classes", "must not be empty"));
        }
        if self.channel_gains.is_empty() {
            return Err(schema("channel_gains", "must not be empty"));
        }
        if !(self.sigma_z >= 0.0) {
            return Err(schema("sigma_z", "must be nonnegative"));
        }
        let classes = self
            .classes
            .iter()
            .enumerate()
            .map(|(i, c)| c.resolve(&self.base_dir).map(Arc::new).map_err(|e| schema(&format!("classes[{i}]"), e)))
            .collect::<Result<Vec<_>>>()?;
        let mut p = SubcarrierProblem::new(
            self.chain,
            self.channel_gains.clone(),
            &classes,
            self.r_min,
            self.p_ave,
            self.ber_th,
            self.sigma_z,
        )?;
        if let Some(pm) = self.p_max {
            p.p_max = pm;
        }
        p.n_symbols = self.n_symbols;
        p.clutter_power = self.clutter_power;
        Ok(p)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleReport {
    pub oracle: SubcarrierPlan,
    pub bilevel: SubcarrierPlan,
    /// `bilevel / oracle - 1`.
    pub relative_gap: f64,
}

/// Solve an instance exhaustively and with the bilevel heuristic.
pub fn run_oracle(inst: &ProblemInstance) -> Result<OracleReport> {
    let problem = inst.to_problem()?;
    let oracle = exhaustive_oracle(&problem)?;
    let mut cfg = inst.dual.clone();
    cfg.record_history = false;
    let bilevel = bilevel_solve(&problem, &cfg)?;
    let relative_gap = bilevel.objective / oracle.objective - 1.0;
    Ok(OracleReport { oracle, bilevel, relative_gap })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario(extra: &str) -> String {
        format!(r#"{{"pipeline": "mixture_sweep", "sweep": {{"variable": "r_min", "grid": [2.0, 3.5]}}{extra}}}"#)
    }

    #[test]
    fn defaults_fill_in() {
        let s = Scenario::from_json_str(&scenario("")).unwrap();
        assert_eq!(s.n(), 64);
        assert_eq!(s.ofdm.n_symbols, 16);
        assert_eq!(s.classes.len(), 4);
        assert_eq!(s.chains, vec![Chain::Mf, Chain::Rf]);
        assert_eq!(s.trials, 1000);
    }

    #[test]
    fn schema_errors_name_the_field() {
        let e = Scenario::from_json_str(&scenario(r#", "trials": "many""#)).unwrap_err();
        let msg = e.to_string();
        assert!(matches!(e, Error::Schema(_)));
        assert!(msg.contains("trials") && msg.contains("line 1"), "{msg}");

        let e = Scenario::from_json_str(&scenario(r#", "trials": 0"#)).unwrap_err();
        assert!(e.to_string().contains("`trials`"));

        let e = Scenario::from_json_str(r#"{"pipeline": "mixture_sweep", "sweep": {"variable": "r_min", "grid": []}}"#)
            .unwrap_err();
        assert!(e.to_string().contains("sweep.grid"));

        let e = Scenario::from_json_str(r#"{"pipeline": "rmse_vs_snr", "sweep": {"variable": "r_min", "grid": [1]}}"#)
            .unwrap_err();
        assert!(e.to_string().contains("sweep.variable"));

        let e = Scenario::from_json_str(&scenario(r#", "bogus": 1"#)).unwrap_err();
        assert!(e.to_string().contains("bogus"));

        let e = Scenario::from_json_str(&scenario(r#", "classes": ["QPSK", "8PSK"]"#)).unwrap_err();
        assert!(e.to_string().contains("classes[1]"), "{e}");
    }

    #[test]
    fn interleave_spreads_classes() {
        let classes = vec![Arc::new(Constellation::qpsk()), Arc::new(Constellation::qam16())];
        let map = interleave_map(&classes, &[(0, 0.5), (1, 0.5)], 8);
        let ids: Vec<String> = map.iter().map(|c| c.id().to_string()).collect();
        assert_eq!(ids, ["QPSK", "16QAM", "QPSK", "16QAM", "QPSK", "16QAM", "QPSK", "16QAM"]);
        let map = interleave_map(&classes, &[(0, 0.25), (1, 0.75)], 64);
        assert_eq!(map.iter().filter(|c| *c.id() == ConstellationId::Qpsk).count(), 16);
        let map = interleave_map(&classes, &[(0, 1.0 / 3.0), (1, 2.0 / 3.0)], 10);
        assert_eq!(map.iter().filter(|c| *c.id() == ConstellationId::Qpsk).count(), 3);
    }

    #[test]
    fn mixture_sweep_writes_deterministic_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let s = Scenario::from_json_str(&scenario(r#", "sweep": {"variable": "r_min", "grid": [2.0, 3.5, 7.0]}"#));
        // Duplicate key: serde rejects it.
        assert!(s.is_err());
        let s = Scenario::from_json_str(
            r#"{"pipeline": "mixture_sweep", "ofdm": {"p_ave": 6.0}, "sweep": {"variable": "r_min", "grid": [2.0, 3.5, 7.0]}}"#,
        )
        .unwrap();
        let m1 = run_scenario(s.clone(), dir.path().join("a"), &RunOptions::default()).unwrap();
        let m2 = run_scenario(s, dir.path().join("b"), &RunOptions::default()).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(m1.status, RunStatus::Infeasible);
        assert_eq!(m1.infeasible_points.len(), 2, "{:?}", m1.infeasible_points);
        let text = std::fs::read_to_string(dir.path().join("a/mixture_sweep.csv")).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(text.lines().next().unwrap().contains("eta_32APSK"));
    }

    #[test]
    fn oracle_instance_round_trip() {
        let text = r#"{"chain": "MF", "classes": [{"constellation": "QPSK"}, "16QAM"],
            "channel_gains": [1.0, 0.5, 2.0, 1.5], "r_min": 3.0, "p_ave": 6.0, "ber_th": 1e-4, "sigma_z": 0.01}"#;
        let inst: ProblemInstance = parse_json(text).unwrap();
        let rep = run_oracle(&inst).unwrap();
        assert!(rep.relative_gap >= -1e-12 && rep.relative_gap < 0.05);
        assert!(rep.oracle.average_rate >= 3.0 - 1e-12);
    }
}
