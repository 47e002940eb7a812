//! Experiment orchestration: TOML configuration, end-to-end pipelines,
//! deterministic output files and transcript ingestion.
//!
//! Every output file starts with a provenance header (config hash, seed,
//! code version): a `#` comment line for CSV, a `{"metadata": ...}` line for
//! JSONL, and a `metadata` field for JSON.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{draw_data_multi, level_agreement, run_ensemble_multi, Noise, ReconstructionPoint, Route};
use crate::error::{Error, Result};
use crate::grammar::{GrammarParams, RuleTable, Symbol};
use crate::grf::{run_grf, GrfConfig, GrfPoint, SpectralGrid};
use crate::meanfield::{mf_profiles, phase_diagnosis, MeanField, MfProfile, PhaseDiagnosis};
use crate::parallel::Parallelism;
use crate::rng::{Purpose, StreamKey};
use crate::statistics::{analyze_ensemble, collapse_fit, make_spins, Binning, CollapseFit, CorrelationProfile, SpinSample};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    RhmEpsilon,
    RhmMasking,
    Meanfield,
    Grf,
    Transcripts,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::RhmEpsilon => "rhm_epsilon",
            ExperimentKind::RhmMasking => "rhm_masking",
            ExperimentKind::Meanfield => "meanfield",
            ExperimentKind::Grf => "grf",
            ExperimentKind::Transcripts => "transcripts",
        }
    }

    fn is_rhm(self) -> bool {
        matches!(self, ExperimentKind::RhmEpsilon | ExperimentKind::RhmMasking)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BinningMode {
    /// Tree distance for grammar data, index distance for transcripts.
    #[default]
    Auto,
    Tree,
    Index,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unbounded {
    Unbounded,
}

/// Largest distance entering `χ`: a number, or `"unbounded"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ChiWindow {
    Distance(usize),
    Unbounded(Unbounded),
}

impl ChiWindow {
    pub fn max_distance(self) -> Option<usize> {
        match self {
            ChiWindow::Distance(r) => Some(r),
            ChiWindow::Unbounded(_) => None,
        }
    }
}

/// Default `χ` window for transcripts.
pub const TRANSCRIPT_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    /// `ε` values for the ε-process, `t/T` fractions for masking.
    #[serde(default)]
    pub grid: Vec<f64>,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
}

fn default_horizon() -> usize {
    1000
}

impl Default for NoiseSection {
    fn default() -> Self {
        NoiseSection { grid: Vec::new(), horizon: default_horizon() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSection {
    pub n_data: usize,
    pub n_traj: usize,
    /// Independent grammar realizations; datum `d` uses realization `d % grammars`.
    pub grammars: usize,
    pub route: Route,
    /// Also emit every trajectory as JSONL.
    pub write_trajectories: bool,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        EnsembleSection { n_data: 32, n_traj: 64, grammars: 1, route: Route::BpDirect, write_trajectories: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub binning: BinningMode,
    pub window: Option<ChiWindow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeanfieldSection {
    /// Bisection tolerance on `ε*`.
    pub tolerance: f64,
}

impl Default for MeanfieldSection {
    fn default() -> Self {
        MeanfieldSection { tolerance: 1e-12 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrfSection {
    pub d: usize,
    pub n: usize,
    pub a: f64,
    pub gamma: f64,
    pub horizon: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub n_samples: usize,
    /// Inversion times as fractions `t/T`.
    pub times: Vec<f64>,
}

impl Default for GrfSection {
    fn default() -> Self {
        let g = GrfConfig::default();
        GrfSection {
            d: g.d,
            n: g.n,
            a: g.a,
            gamma: g.gamma,
            horizon: g.horizon,
            beta_start: g.beta_start,
            beta_end: g.beta_end,
            n_samples: 32,
            times: (1..=10).map(|i| i as f64 / 10.0).collect(),
        }
    }
}

impl GrfSection {
    pub fn field(&self) -> GrfConfig {
        GrfConfig {
            d: self.d,
            n: self.n,
            a: self.a,
            gamma: self.gamma,
            horizon: self.horizon,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
        }
    }

    pub fn steps(&self) -> Vec<usize> {
        self.times.iter().map(|f| ((f * self.horizon as f64).round() as usize).max(1)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranscriptSection {
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub grammar: Option<GrammarParams>,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub ensemble: EnsembleSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub meanfield: MeanfieldSection,
    #[serde(default)]
    pub grf: GrfSection,
    #[serde(default)]
    pub transcripts: Option<TranscriptSection>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("output")
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut config = Self::from_toml(&text)?;
        // Relative transcript paths are taken relative to the config file.
        if let (Some(t), Some(dir)) = (config.transcripts.as_mut(), path.parent()) {
            if t.path.is_relative() {
                t.path = dir.join(&t.path);
            }
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Replaces implicit choices by explicit values.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let transcripts = c.kind == ExperimentKind::Transcripts;
        if c.analysis.binning == BinningMode::Auto {
            c.analysis.binning = if transcripts { BinningMode::Index } else { BinningMode::Tree };
        }
        if c.analysis.window.is_none() {
            c.analysis.window = Some(if transcripts {
                ChiWindow::Distance(TRANSCRIPT_WINDOW)
            } else {
                ChiWindow::Unbounded(Unbounded::Unbounded)
            });
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.kind.is_rhm() || self.kind == ExperimentKind::Meanfield {
            match &self.grammar {
                None => return bad("a [grammar] section is required"),
                Some(g) => g.validate()?,
            }
        }
        match self.kind {
            ExperimentKind::RhmEpsilon | ExperimentKind::RhmMasking => {
                if self.noise.grid.is_empty() {
                    return bad("noise.grid must not be empty");
                }
                if let Some(x) = self.noise.grid.iter().find(|x| !(0.0..=1.0).contains(*x)) {
                    return Err(Error::Config(format!("noise value {x} outside [0, 1]")));
                }
                if self.noise.horizon == 0 {
                    return bad("noise.horizon must be positive");
                }
                if self.ensemble.n_data == 0 {
                    return bad("ensemble.n_data must be positive");
                }
                if self.ensemble.grammars == 0 || self.ensemble.grammars > self.ensemble.n_data {
                    return bad("ensemble.grammars must lie in 1..=n_data");
                }
            }
            ExperimentKind::Meanfield => {
                if let Some(x) = self.noise.grid.iter().find(|x| !(0.0..=1.0).contains(*x)) {
                    return Err(Error::Config(format!("noise value {x} outside [0, 1]")));
                }
                if !(self.meanfield.tolerance > 0.0) {
                    return bad("meanfield.tolerance must be positive");
                }
            }
            ExperimentKind::Grf => {
                self.grf.field().validate()?;
                if self.grf.times.is_empty() {
                    return bad("grf.times must not be empty");
                }
                if let Some(x) = self.grf.times.iter().find(|x| !(**x > 0.0 && **x <= 1.0)) {
                    return Err(Error::Config(format!("grf time fraction {x} outside (0, 1]")));
                }
            }
            ExperimentKind::Transcripts => {
                if self.transcripts.is_none() {
                    return bad("a [transcripts] section with a path is required");
                }
                if self.analysis.binning == BinningMode::Tree {
                    return bad("tree binning needs grammar data; use index binning for transcripts");
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the resolved configuration.
    /// SHA-256 of the resolved config. The output directory is left out: it
    /// does not change any result.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.resolved();
        c.output_dir = PathBuf::new();
        let text = c.to_toml()?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }

    fn binning(&self) -> Binning {
        let g = self.grammar.unwrap_or(GrammarParams { v: 0, m: 0, s: 0, depth: 0 });
        match self.resolved().analysis.binning {
            BinningMode::Tree => Binning::Tree { s: g.s, depth: g.depth },
            _ => Binning::Index,
        }
    }

    fn window(&self) -> Option<usize> {
        self.resolved().analysis.window.and_then(ChiWindow::max_distance)
    }

    fn noise_points(&self) -> Vec<Noise> {
        self.noise
            .grid
            .iter()
            .map(|&x| match self.kind {
                ExperimentKind::RhmMasking => Noise::Masking {
                    t: (x * self.noise.horizon as f64).round() as usize,
                    horizon: self.noise.horizon,
                },
                _ => Noise::Epsilon { epsilon: x },
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub kind: ExperimentKind,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

impl Metadata {
    pub fn of(config: &ExperimentConfig) -> Result<Self> {
        Ok(Metadata {
            kind: config.kind,
            config_hash: config.hash()?,
            seed: config.seed,
            version: VERSION.to_string(),
        })
    }

    fn csv_header(&self) -> String {
        format!(
            "# config_hash={} seed={} version={} kind={}\n",
            self.config_hash,
            self.seed,
            self.version,
            self.kind.name()
        )
    }
}

/// Analysis of one (source, inversion time) group of transcripts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptAnalysis {
    pub source: String,
    pub profile: CorrelationProfile,
}

/// Trajectory line in transcript schema, plus the bookkeeping fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub source: String,
    #[serde(rename = "t_over_T")]
    pub t_over_t: f64,
    pub x0: Vec<u64>,
    pub xhat0: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub datum_id: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultBundle {
    pub metadata: Metadata,
    pub config: ExperimentConfig,
    pub profiles: Vec<CorrelationProfile>,
    pub theory: Vec<MfProfile>,
    pub phase: Option<PhaseDiagnosis>,
    pub collapse: Option<CollapseFit>,
    pub reconstruction: Vec<ReconstructionPoint>,
    pub grf: Vec<GrfPoint>,
    pub transcripts: Vec<TranscriptAnalysis>,
    #[serde(skip)]
    pub trajectories: Vec<TranscriptRecord>,
}

impl ResultBundle {
    fn empty(config: &ExperimentConfig) -> Result<Self> {
        Ok(ResultBundle {
            metadata: Metadata::of(config)?,
            config: config.resolved(),
            profiles: Vec::new(),
            theory: Vec::new(),
            phase: None,
            collapse: None,
            reconstruction: Vec::new(),
            grf: Vec::new(),
            transcripts: Vec::new(),
            trajectories: Vec::new(),
        })
    }
}

/// The grammar of an experiment, drawn from the master seed.
pub fn build_grammar(params: GrammarParams, seed: u64) -> Result<RuleTable> {
    RuleTable::build(params, &mut StreamKey::new(seed, Purpose::Grammar).rng())
}

/// `count` independent realizations; the first equals [`build_grammar`].
pub fn build_grammars(params: GrammarParams, seed: u64, count: usize) -> Result<Vec<RuleTable>> {
    (0..count)
        .map(|g| RuleTable::build(params, &mut StreamKey::new(seed, Purpose::Grammar).group(g as u64).rng()))
        .collect()
}

/// Runs the pipeline selected by `config.kind`.
pub fn run_experiment(config: &ExperimentConfig, par: Parallelism) -> Result<ResultBundle> {
    config.validate()?;
    let mut bundle = ResultBundle::empty(config)?;
    match config.kind {
        ExperimentKind::RhmEpsilon | ExperimentKind::RhmMasking => run_rhm(config, par, &mut bundle)?,
        ExperimentKind::Meanfield => {
            let g = config.grammar.expect("validated");
            let mf = MeanField::new(g.v, g.m, g.s)?;
            bundle.phase = Some(phase_diagnosis(&mf, config.meanfield.tolerance)?);
            bundle.theory = mf_profiles(&mf, g.depth, &config.noise.grid)?;
        }
        ExperimentKind::Grf => {
            let grid = SpectralGrid::new(config.grf.field())?;
            bundle.grf = run_grf(&grid, &config.grf.steps(), config.grf.n_samples, config.seed, par)?;
        }
        ExperimentKind::Transcripts => {
            let path = &config.transcripts.as_ref().expect("validated").path;
            let groups = ingest_transcripts(path)?;
            bundle.transcripts = analyze_transcripts(&groups, config.window(), par)?;
        }
    }
    Ok(bundle)
}

fn run_rhm(config: &ExperimentConfig, par: Parallelism, bundle: &mut ResultBundle) -> Result<()> {
    let params = config.grammar.expect("validated");
    let ens = &config.ensemble;
    if ens.n_traj < 2 {
        return Err(Error::InsufficientTrajectories { needed: 2, got: ens.n_traj });
    }
    let grammars = build_grammars(params, config.seed, ens.grammars)?;
    let data = draw_data_multi(&grammars, ens.n_data, config.seed)?;
    let binning = config.binning();
    let window = config.window();
    for (g, noise) in config.noise_points().into_iter().enumerate() {
        let trajectories = run_ensemble_multi(&grammars, &data, noise, ens.route, ens.n_traj, config.seed, g as u64, par)?;
        let mut agree = vec![0.0; params.depth + 1];
        let mut spins: Vec<Vec<SpinSample>> = Vec::with_capacity(trajectories.len());
        for (d, per_datum) in trajectories.iter().enumerate() {
            let mut group = Vec::with_capacity(per_datum.len());
            for tr in per_datum {
                group.push(make_spins(tr.original.leaves(), tr.regenerated.leaves())?);
                agree.iter_mut().zip(level_agreement(&tr.original, &tr.regenerated)).for_each(|(a, x)| *a += x);
                if ens.write_trajectories {
                    bundle.trajectories.push(TranscriptRecord {
                        source: config.kind.name().to_string(),
                        t_over_t: noise.value(),
                        x0: tr.original.leaves().iter().map(|&x| x as u64).collect(),
                        xhat0: tr.regenerated.leaves().iter().map(|&x| x as u64).collect(),
                        datum_id: Some(d as u64),
                    });
                }
            }
            spins.push(group);
        }
        let total = (ens.n_data * ens.n_traj) as f64;
        agree.iter_mut().for_each(|a| *a /= total);
        bundle.reconstruction.push(ReconstructionPoint { noise, by_level: agree });
        bundle.profiles.push(analyze_ensemble(&spins, binning, window, noise.value(), par)?);
    }
    if config.kind == ExperimentKind::RhmEpsilon {
        let mf = MeanField::new(params.v, params.m, params.s)?;
        bundle.theory = mf_profiles(&mf, params.depth, &config.noise.grid)?;
        let diagnosis = phase_diagnosis(&mf, config.meanfield.tolerance)?;
        // The collapse is a diagnostic; grids that do not bracket ε* simply omit it.
        if matches!(binning, Binning::Tree { .. }) {
            bundle.collapse = collapse_fit(&bundle.profiles, &diagnosis).ok();
        }
        bundle.phase = Some(diagnosis);
    }
    Ok(())
}

/// Transcripts sharing a source and inversion time, grouped by datum.
#[derive(Debug, Clone, PartialEq)]
pub struct TranscriptGroup {
    pub source: String,
    pub t_over_t: f64,
    /// `data[d]` holds the trajectories of one starting sequence.
    pub data: Vec<Vec<TranscriptRecord>>,
}

/// Reads transcript JSONL from a file.
pub fn ingest_transcripts(path: &Path) -> Result<Vec<TranscriptGroup>> {
    parse_transcripts(fs::File::open(path)?)
}

/// Parses transcript JSONL. Blank lines and a leading `{"metadata": ...}`
/// line are skipped. Groups keep first-appearance order; within a group,
/// trajectories are grouped by `datum_id` when present, else by `x0`.
pub fn parse_transcripts<R: Read>(reader: R) -> Result<Vec<TranscriptGroup>> {
    let mut groups: Vec<TranscriptGroup> = Vec::new();
    let mut group_index: HashMap<(String, u64), usize> = HashMap::new();
    let mut datum_index: Vec<HashMap<DatumKey, usize>> = Vec::new();
    let mut first = true;
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        if std::mem::take(&mut first) && is_metadata_line(text) {
            continue;
        }
        let rec: TranscriptRecord = serde_json::from_str(text)
            .map_err(|e| Error::MalformedRecord { line: line_no, message: e.to_string() })?;
        if rec.x0.len() != rec.xhat0.len() {
            return Err(Error::RecordLengthMismatch { line: line_no, expected: rec.x0.len(), got: rec.xhat0.len() });
        }
        if !rec.t_over_t.is_finite() {
            return Err(Error::MalformedRecord { line: line_no, message: "t_over_T is not finite".into() });
        }
        let key = (rec.source.clone(), rec.t_over_t.to_bits());
        let g = *group_index.entry(key).or_insert_with(|| {
            groups.push(TranscriptGroup { source: rec.source.clone(), t_over_t: rec.t_over_t, data: Vec::new() });
            datum_index.push(HashMap::new());
            groups.len() - 1
        });
        let dkey = match rec.datum_id {
            Some(id) => DatumKey::Id(id),
            None => DatumKey::Tokens(rec.x0.clone()),
        };
        let data = &mut groups[g].data;
        let d = *datum_index[g].entry(dkey).or_insert_with(|| {
            data.push(Vec::new());
            data.len() - 1
        });
        data[d].push(rec);
    }
    Ok(groups)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum DatumKey {
    Id(u64),
    Tokens(Vec<u64>),
}

fn is_metadata_line(text: &str) -> bool {
    matches!(serde_json::from_str::<serde_json::Value>(text),
        Ok(serde_json::Value::Object(m)) if m.len() == 1 && m.contains_key("metadata"))
}

/// Index-distance profiles and `χ` of each transcript group.
pub fn analyze_transcripts(
    groups: &[TranscriptGroup],
    window: Option<usize>,
    par: Parallelism,
) -> Result<Vec<TranscriptAnalysis>> {
    groups
        .iter()
        .map(|g| {
            let spins = g
                .data
                .iter()
                .map(|trs| trs.iter().map(|r| make_spins(&r.x0, &r.xhat0)).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?;
            let profile = analyze_ensemble(&spins, Binning::Index, window, g.t_over_t, par)?;
            Ok(TranscriptAnalysis { source: g.source.clone(), profile })
        })
        .collect()
}

/// Synthetic transcripts whose tokens flip jointly in blocks of `block`
/// positions, each block independently with probability 1/2.
pub fn planted_transcripts(
    n_data: usize,
    n_traj: usize,
    dim: usize,
    block: usize,
    seed: u64,
) -> Vec<TranscriptRecord> {
    use rand::Rng;
    let mut out = Vec::with_capacity(n_data * n_traj);
    for d in 0..n_data {
        let x0: Vec<u64> = (0..dim as u64).map(|i| i + 1000 * d as u64).collect();
        for k in 0..n_traj {
            let mut rng = StreamKey::new(seed, Purpose::Synthetic).datum(d).trajectory(k).rng();
            let flips: Vec<bool> = (0..dim.div_ceil(block)).map(|_| rng.random()).collect();
            let xhat0 = x0.iter().enumerate().map(|(i, &x)| if flips[i / block] { x + 1 } else { x }).collect();
            out.push(TranscriptRecord {
                source: format!("planted_b{block}"),
                t_over_t: 0.5,
                x0: x0.clone(),
                xhat0,
                datum_id: None,
            });
        }
    }
    out
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn csv_file(meta: &Metadata, header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut buf = meta.csv_header().into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header)?;
        for row in rows {
            w.write_record(&row)?;
        }
        w.flush()?;
    }
    Ok(buf)
}

fn profile_rows(p: &CorrelationProfile, extra: &[String]) -> Vec<Vec<String>> {
    p.bins
        .iter()
        .map(|b| {
            let mut row =
                vec![p.noise.to_string(), b.r.to_string(), b.c_over_c0.to_string(), b.pair_count.to_string()];
            row.extend_from_slice(extra);
            row
        })
        .collect()
}

fn window_label(w: Option<usize>) -> String {
    w.map(|x| x.to_string()).unwrap_or_else(|| "unbounded".into())
}

/// Serialized output files of a bundle, as `(file name, bytes)`.
pub fn render_outputs(bundle: &ResultBundle) -> Result<Vec<(String, Vec<u8>)>> {
    let meta = &bundle.metadata;
    let mut files = Vec::new();
    let profile_cols = ["noise", "r", "C_over_C0", "pair_count"];
    let chi_cols = ["noise", "chi", "window", "n_data", "n_traj"];
    match meta.kind {
        ExperimentKind::RhmEpsilon | ExperimentKind::RhmMasking => {
            let rows = bundle.profiles.iter().flat_map(|p| profile_rows(p, &[])).collect();
            files.push(("profiles.csv".into(), csv_file(meta, &profile_cols, rows)?));
            let rows = bundle
                .profiles
                .iter()
                .map(|p| {
                    vec![
                        p.noise.to_string(),
                        fmt_opt(p.chi),
                        window_label(p.window),
                        p.n_data.to_string(),
                        p.n_traj.to_string(),
                    ]
                })
                .collect();
            files.push(("susceptibility.csv".into(), csv_file(meta, &chi_cols, rows)?));
            let rows = bundle
                .reconstruction
                .iter()
                .flat_map(|r| {
                    r.by_level.iter().enumerate().map(|(l, x)| vec![r.noise.value().to_string(), l.to_string(), x.to_string()])
                })
                .collect();
            files.push(("reconstruction.csv".into(), csv_file(meta, &["noise", "level", "agreement"], rows)?));
            if !bundle.trajectories.is_empty() {
                let mut buf = serde_json::to_vec(&serde_json::json!({ "metadata": meta }))?;
                buf.push(b'\n');
                for t in &bundle.trajectories {
                    serde_json::to_writer(&mut buf, t)?;
                    buf.push(b'\n');
                }
                files.push(("trajectories.jsonl".into(), buf));
            }
        }
        ExperimentKind::Meanfield => {
            let d = bundle.phase.as_ref().expect("meanfield bundle has a diagnosis");
            let row = vec![
                d.v.to_string(),
                d.m.to_string(),
                d.s.to_string(),
                d.condition_value.to_string(),
                d.transition_exists.to_string(),
                fmt_opt(d.p_star),
                fmt_opt(d.eps_star),
                fmt_opt(d.nu),
            ];
            let cols = ["v", "m", "s", "condition_value", "transition_exists", "p_star", "eps_star", "nu"];
            files.push(("phase.csv".into(), csv_file(meta, &cols, vec![row])?));
        }
        ExperimentKind::Grf => {
            let g = &bundle.config.grf;
            let grid_meta = vec![g.d.to_string(), g.n.to_string(), g.a.to_string(), g.horizon.to_string()];
            let rows = bundle.grf.iter().flat_map(|p| profile_rows(&p.profile, &grid_meta)).collect();
            let cols = ["noise", "r", "C_over_C0", "pair_count", "d", "n", "a", "T"];
            files.push(("grf_profiles.csv".into(), csv_file(meta, &cols, rows)?));
            let rows = bundle
                .grf
                .iter()
                .map(|p| {
                    let mut row = vec![
                        p.t_over_t.to_string(),
                        fmt_opt(p.profile.chi),
                        p.chi_exact.to_string(),
                        p.chi_cutoff.to_string(),
                        p.correlation_length.to_string(),
                        p.correlation_length_exact.to_string(),
                        p.kappa_star.to_string(),
                        p.n_samples.to_string(),
                    ];
                    row.extend_from_slice(&grid_meta);
                    row
                })
                .collect();
            let cols = [
                "noise",
                "chi",
                "chi_exact",
                "chi_cutoff",
                "correlation_length",
                "correlation_length_exact",
                "kappa_star",
                "n_samples",
                "d",
                "n",
                "a",
                "T",
            ];
            files.push(("grf_susceptibility.csv".into(), csv_file(meta, &cols, rows)?));
            let rows = bundle
                .grf
                .iter()
                .flat_map(|p| {
                    p.modal.iter().map(|b| {
                        let mut row = vec![
                            p.t_over_t.to_string(),
                            b.kappa.to_string(),
                            b.n_modes.to_string(),
                            b.mean_e2.to_string(),
                            b.stderr.to_string(),
                            b.predicted.to_string(),
                        ];
                        row.extend_from_slice(&grid_meta);
                        row
                    })
                })
                .collect();
            let cols = ["noise", "kappa", "n_modes", "mean_E2", "stderr", "predicted", "d", "n", "a", "T"];
            files.push(("grf_modes.csv".into(), csv_file(meta, &cols, rows)?));
        }
        ExperimentKind::Transcripts => {
            let rows = bundle
                .transcripts
                .iter()
                .flat_map(|t| profile_rows(&t.profile, std::slice::from_ref(&t.source)))
                .collect();
            files.push(("profiles.csv".into(), csv_file(meta, &["noise", "r", "C_over_C0", "pair_count", "source"], rows)?));
            let rows = bundle
                .transcripts
                .iter()
                .map(|t| {
                    let p = &t.profile;
                    vec![
                        p.noise.to_string(),
                        fmt_opt(p.chi),
                        window_label(p.window),
                        p.n_data.to_string(),
                        p.n_traj.to_string(),
                        t.source.clone(),
                    ]
                })
                .collect();
            let cols = ["noise", "chi", "window", "n_data", "n_traj", "source"];
            files.push(("susceptibility.csv".into(), csv_file(meta, &cols, rows)?));
        }
    }
    if !bundle.theory.is_empty() {
        let rows = bundle
            .theory
            .iter()
            .flat_map(|t| {
                let s = bundle.config.grammar.map(|g| g.s).unwrap_or(2);
                t.normalized.iter().enumerate().map(move |(l, c)| {
                    vec![t.epsilon.to_string(), (s.pow(l as u32) - 1).to_string(), l.to_string(), c.to_string()]
                })
            })
            .collect();
        files.push(("theory_profiles.csv".into(), csv_file(meta, &["noise", "r", "tree_distance", "C_over_C0"], rows)?));
        let rows = bundle.theory.iter().map(|t| vec![t.epsilon.to_string(), t.chi.to_string()]).collect();
        files.push(("theory_susceptibility.csv".into(), csv_file(meta, &["noise", "chi"], rows)?));
    }
    let mut summary = serde_json::to_vec_pretty(bundle)?;
    summary.push(b'\n');
    files.push(("summary.json".into(), summary));
    Ok(files)
}

/// Writes the rendered outputs into `dir` and returns their paths.
pub fn write_outputs(bundle: &ResultBundle, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    render_outputs(bundle)?
        .into_iter()
        .map(|(name, bytes)| {
            let path = dir.join(name);
            fs::write(&path, bytes)?;
            Ok(path)
        })
        .collect()
}

/// Grammar and starting data of an RHM config, written as JSON/JSONL.
pub fn generate(config: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let params = config.grammar.ok_or_else(|| Error::Config("a [grammar] section is required".into()))?;
    params.validate()?;
    let meta = Metadata::of(config)?;
    let grammars = build_grammars(params, config.seed, config.ensemble.grammars.max(1))?;
    let data = draw_data_multi(&grammars, config.ensemble.n_data, config.seed)?;
    fs::create_dir_all(dir)?;
    let grammar_path = dir.join("grammar.json");
    let mut doc = serde_json::to_vec_pretty(&serde_json::json!({ "metadata": meta, "grammars": grammars }))?;
    doc.push(b'\n');
    fs::write(&grammar_path, doc)?;
    let data_path = dir.join("data.jsonl");
    let mut buf = serde_json::to_vec(&serde_json::json!({ "metadata": meta }))?;
    buf.push(b'\n');
    for (d, datum) in data.iter().enumerate() {
        let line = DatumLine { datum_id: d, grammar: d % grammars.len(), levels: &datum.levels };
        serde_json::to_writer(&mut buf, &line)?;
        buf.push(b'\n');
    }
    fs::write(&data_path, buf)?;
    Ok(vec![grammar_path, data_path])
}

#[derive(Serialize)]
struct DatumLine<'a> {
    datum_id: usize,
    grammar: usize,
    levels: &'a [Vec<Symbol>],
}

#[cfg(test)]
mod tests {
    use super::*;

    const EPS: &str = r#"
kind = "rhm_epsilon"
seed = 3
[grammar]
v = 4
m = 2
s = 2
L = 3
[noise]
grid = [0.2, 0.6]
[ensemble]
n_data = 3
n_traj = 6
"#;

    #[test]
    fn config_round_trip() {
        let c = ExperimentConfig::from_toml(EPS).unwrap();
        assert_eq!(c.kind, ExperimentKind::RhmEpsilon);
        assert_eq!(c.grammar.unwrap().depth, 3);
        let r = c.resolved();
        assert_eq!(r.analysis.binning, BinningMode::Tree);
        assert_eq!(r.analysis.window, Some(ChiWindow::Unbounded(Unbounded::Unbounded)));
        let back = ExperimentConfig::from_toml(&r.to_toml().unwrap()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(ExperimentConfig::from_toml("kind = \"grf\"\nfoo = 1"), Err(Error::Config(_))));
        assert!(ExperimentConfig::from_toml("kind = \"nope\"").is_err());
    }

    #[test]
    fn validation() {
        let mut c = ExperimentConfig::from_toml(EPS).unwrap();
        c.noise.grid.push(1.5);
        assert!(c.validate().is_err());
        let c = ExperimentConfig::from_toml("kind = \"rhm_masking\"\n[noise]\ngrid=[0.5]").unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = ExperimentConfig::from_toml("kind = \"transcripts\"").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn window_parsing() {
        let c = ExperimentConfig::from_toml("kind=\"grf\"\n[analysis]\nwindow = 4").unwrap();
        assert_eq!(c.window(), Some(4));
        let c = ExperimentConfig::from_toml("kind=\"grf\"\n[analysis]\nwindow = \"unbounded\"").unwrap();
        assert_eq!(c.window(), None);
        let c = ExperimentConfig::from_toml("kind=\"transcripts\"\n[transcripts]\npath=\"x\"").unwrap();
        assert_eq!(c.window(), Some(TRANSCRIPT_WINDOW));
    }

    #[test]
    fn single_trajectory_rejected() {
        let mut c = ExperimentConfig::from_toml(EPS).unwrap();
        c.ensemble.n_traj = 1;
        assert!(matches!(
            run_experiment(&c, Parallelism::Sequential),
            Err(Error::InsufficientTrajectories { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn outputs_are_deterministic() {
        let c = ExperimentConfig::from_toml(EPS).unwrap();
        let a = render_outputs(&run_experiment(&c, Parallelism::Sequential).unwrap()).unwrap();
        let b = render_outputs(&run_experiment(&c, Parallelism::Rayon).unwrap()).unwrap();
        assert_eq!(a, b);
        let header = String::from_utf8(a[0].1.clone()).unwrap();
        assert!(header.starts_with(&format!("# config_hash={} seed=3 version={VERSION}", c.hash().unwrap())));
        assert!(header.lines().nth(1).unwrap() == "noise,r,C_over_C0,pair_count");
    }

    #[test]
    fn grammar_realizations() {
        let mut c = ExperimentConfig::from_toml(EPS).unwrap();
        let one = run_experiment(&c, Parallelism::Sequential).unwrap();
        c.ensemble.grammars = 1;
        assert_eq!(run_experiment(&c, Parallelism::Sequential).unwrap().profiles, one.profiles);
        c.ensemble.grammars = c.ensemble.n_data;
        let many = run_experiment(&c, Parallelism::Sequential).unwrap();
        assert_ne!(many.profiles, one.profiles);
        c.ensemble.grammars = c.ensemble.n_data + 1;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let params = c.grammar.unwrap();
        let g = build_grammars(params, 5, 3).unwrap();
        assert_eq!(g[0], build_grammar(params, 5).unwrap());
        assert_ne!(g[1], g[0]);
    }

    #[test]
    fn empty_transcripts() {
        assert!(parse_transcripts("".as_bytes()).unwrap().is_empty());
        assert!(parse_transcripts("\n\n".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn malformed_transcripts_report_line() {
        let text = "{\"source\":\"a\",\"t_over_T\":0.5,\"x0\":[1,2],\"xhat0\":[1,2]}\n{oops}\n";
        assert!(matches!(parse_transcripts(text.as_bytes()), Err(Error::MalformedRecord { line: 2, .. })));
        let text = "\n{\"source\":\"a\",\"t_over_T\":0.5,\"x0\":[1,-2],\"xhat0\":[1,2]}\n";
        assert!(matches!(parse_transcripts(text.as_bytes()), Err(Error::MalformedRecord { line: 2, .. })));
        let text = "{\"source\":\"a\",\"t_over_T\":0.5,\"x0\":[1,2,3],\"xhat0\":[1,2]}\n";
        assert!(matches!(
            parse_transcripts(text.as_bytes()),
            Err(Error::RecordLengthMismatch { line: 1, expected: 3, got: 2 })
        ));
    }

    #[test]
    fn transcript_grouping() {
        let text = [
            r#"{"metadata":{"seed":1}}"#,
            r#"{"source":"a","t_over_T":0.5,"x0":[1,2],"xhat0":[1,3]}"#,
            r#"{"source":"a","t_over_T":0.5,"x0":[1,2],"xhat0":[1,2]}"#,
            r#"{"source":"a","t_over_T":0.5,"x0":[4,4],"xhat0":[1,2]}"#,
            r#"{"source":"a","t_over_T":0.7,"x0":[1,2],"xhat0":[1,2]}"#,
            r#"{"source":"b","t_over_T":0.5,"x0":[1,2],"xhat0":[1,2],"datum_id":9}"#,
        ]
        .join("\n");
        let g = parse_transcripts(text.as_bytes()).unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!((g[0].source.as_str(), g[0].t_over_t), ("a", 0.5));
        assert_eq!(g[0].data.len(), 2);
        assert_eq!(g[0].data[0].len(), 2);
        assert_eq!(g[2].data[0][0].datum_id, Some(9));
    }

    #[test]
    fn planted_transcripts_recover_block_size() {
        let recs = planted_transcripts(20, 100, 64, 8, 1);
        let mut text = Vec::new();
        for r in &recs {
            serde_json::to_writer(&mut text, r).unwrap();
            text.push(b'\n');
        }
        let groups = parse_transcripts(text.as_slice()).unwrap();
        assert_eq!(groups[0].data.len(), 20);
        let res = analyze_transcripts(&groups, None, Parallelism::Rayon).unwrap();
        let chi = res[0].profile.chi.unwrap();
        assert!((chi - 8.0).abs() < 0.1 * 8.0, "{chi}");
    }

    #[test]
    fn trajectories_feed_back_into_analysis() {
        let mut c = ExperimentConfig::from_toml(EPS).unwrap();
        c.ensemble.write_trajectories = true;
        let bundle = run_experiment(&c, Parallelism::Rayon).unwrap();
        let files = render_outputs(&bundle).unwrap();
        let (_, jsonl) = files.iter().find(|(n, _)| n == "trajectories.jsonl").unwrap();
        let groups = parse_transcripts(jsonl.as_slice()).unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].data.len(), 3);
        assert_eq!(groups[0].data[0].len(), 6);
    }
}
