//! Experiment configuration: TOML schema, protocol-aware defaults, and the
//! sequence/dataset plan each stage executes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rgc_core::retinasim::ImpairmentStage;
use rgc_core::stimgen::{BarProfile, GratingSpec};

use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Gratings8,
    Gaba3,
    Natural,
}

impl Protocol {
    pub fn name(&self) -> &'static str {
        match self {
            Protocol::Gratings8 => "gratings8",
            Protocol::Gaba3 => "gaba3",
            Protocol::Natural => "natural",
        }
    }
}

fn d_height() -> usize {
    32
}
fn d_frame_rate() -> f64 {
    30.0
}
fn d_phase_bins() -> usize {
    8
}
fn d_mean_lum() -> f64 {
    1.36
}
fn d_contrast() -> f64 {
    0.5
}
fn d_temporal_freq() -> f64 {
    1.0
}
fn d_um_per_degree() -> f64 {
    31.0
}
fn d_um_per_pixel() -> f64 {
    42.0
}
fn d_orientations() -> usize {
    8
}
fn d_bar_width() -> f64 {
    800.0
}
fn d_repetitions() -> usize {
    10
}
fn d_rep_duration() -> f64 {
    2.0
}
fn d_spatial_freqs() -> Vec<f64> {
    vec![0.011, 0.023, 0.045]
}
fn d_gaba_duration() -> f64 {
    60.0
}
fn d_natural_duration() -> f64 {
    20.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StimulusConfig {
    #[serde(default = "d_height")]
    pub height: usize,
    #[serde(default = "d_height")]
    pub width: usize,
    #[serde(default = "d_frame_rate")]
    pub frame_rate_hz: f64,
    #[serde(default = "d_phase_bins")]
    pub n_phase_bins: usize,
    #[serde(default = "d_mean_lum")]
    pub mean_luminance: f64,
    #[serde(default = "d_contrast")]
    pub contrast: f64,
    #[serde(default = "d_temporal_freq")]
    pub temporal_freq_hz: f64,
    #[serde(default = "d_um_per_degree")]
    pub um_per_degree: f64,
    #[serde(default = "d_um_per_pixel")]
    pub um_per_pixel: f64,
    /// gratings8: number of evenly spaced drift directions.
    #[serde(default = "d_orientations")]
    pub n_orientations: usize,
    /// gratings8: bar width in micrometers (half the square-wave period).
    #[serde(default = "d_bar_width")]
    pub bar_width_um: f64,
    #[serde(default = "d_repetitions")]
    pub repetitions: usize,
    #[serde(default = "d_rep_duration")]
    pub rep_duration_s: f64,
    /// gaba3: spatial frequencies in cycles/degree.
    #[serde(default = "d_spatial_freqs")]
    pub spatial_freqs_cpd: Vec<f64>,
    /// gaba3: recording duration per (frequency, stage) condition.
    #[serde(default = "d_gaba_duration")]
    pub gaba_duration_s: f64,
    /// natural: source image (PGM); synthesized from the seed when absent.
    #[serde(default)]
    pub image_path: Option<PathBuf>,
    #[serde(default = "d_natural_duration")]
    pub natural_duration_s: f64,
}

impl Default for StimulusConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty stimulus table must deserialize")
    }
}

fn d_n_neurons() -> usize {
    256
}
fn d_region() -> (usize, usize) {
    (0, 32)
}
fn d_off_fraction() -> f64 {
    0.5
}
fn d_nonlinearity() -> String {
    "softplus".into()
}
fn d_rate_cap() -> f64 {
    200.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetinaConfig {
    #[serde(default = "d_n_neurons")]
    pub n_neurons: usize,
    /// Electrode rows (inclusive, exclusive) populated with neurons.
    #[serde(default = "d_region")]
    pub region_rows: (usize, usize),
    #[serde(default = "d_region")]
    pub region_cols: (usize, usize),
    #[serde(default = "d_off_fraction")]
    pub off_fraction: f64,
    #[serde(default = "d_nonlinearity")]
    pub nonlinearity: String,
    #[serde(default = "d_rate_cap")]
    pub rate_cap_hz: f64,
}

impl Default for RetinaConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty retina table must deserialize")
    }
}

fn d_bin() -> f64 {
    0.010
}
fn d_bandwidth() -> f64 {
    0.050
}
fn d_method() -> String {
    "gauss_kernel".into()
}
fn d_threshold() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatesConfig {
    #[serde(default = "d_bin")]
    pub bin_s: f64,
    #[serde(default = "d_bandwidth")]
    pub bandwidth_s: f64,
    #[serde(default = "d_method")]
    pub method: String,
    #[serde(default = "d_threshold")]
    pub threshold: f64,
}

impl Default for RatesConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty rates table must deserialize")
    }
}

fn d_n_mean() -> usize {
    64
}
fn d_n_factors() -> usize {
    128
}
fn d_lr() -> f64 {
    1e-3
}
fn d_momentum() -> f64 {
    0.9
}
fn d_momentum_start() -> u64 {
    5
}
fn d_weight_decay() -> f64 {
    1e-4
}
fn d_minibatch() -> usize {
    100
}
fn d_epochs() -> u64 {
    20
}
fn d_precision_floor() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "d_n_mean")]
    pub n_mean: usize,
    #[serde(default = "d_n_factors")]
    pub n_factors: usize,
    #[serde(default = "d_n_mean")]
    pub n_cov: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_momentum_start")]
    pub momentum_start_epoch: u64,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "d_minibatch")]
    pub minibatch_size: usize,
    #[serde(default = "d_minibatch")]
    pub n_chains: usize,
    #[serde(default = "d_epochs")]
    pub epochs: u64,
    #[serde(default = "d_precision_floor")]
    pub precision_floor: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty model table must deserialize")
    }
}

impl ModelConfig {
    /// Compact model suited to the short gaba3 conditions: few enough hidden
    /// units that the observed state alphabet stays well below the sample
    /// count, which keeps the plug-in MI estimate meaningful.
    pub fn small() -> Self {
        ModelConfig {
            n_mean: 4,
            n_factors: 8,
            n_cov: 4,
            epochs: 15,
            ..ModelConfig::default()
        }
    }

    pub fn to_hyperparams(&self, n_vis: usize, seed: u64) -> rgc_core::mcrbm::Hyperparams {
        let mut h = rgc_core::mcrbm::Hyperparams::new(n_vis);
        h.n_mean = self.n_mean;
        h.n_factors = self.n_factors;
        h.n_cov = self.n_cov;
        h.learning_rate = self.learning_rate;
        h.momentum = self.momentum;
        h.momentum_start_epoch = self.momentum_start_epoch;
        h.weight_decay = self.weight_decay;
        h.minibatch_size = self.minibatch_size;
        h.n_chains = self.n_chains;
        h.epochs = self.epochs;
        h.precision_floor = self.precision_floor;
        h.seed = seed;
        h
    }
}

fn d_min_count() -> usize {
    10
}
fn d_top_k() -> usize {
    2
}
fn d_holdout() -> f64 {
    0.25
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// orientation | phase | orientation_phase | frame_id; empty means
    /// protocol default (orientation_phase for gratings8, phase otherwise).
    #[serde(default)]
    pub label_scheme: Option<String>,
    #[serde(default = "d_phase_bins")]
    pub n_phase_bins: usize,
    #[serde(default = "d_min_count")]
    pub min_count: usize,
    #[serde(default = "d_top_k")]
    pub top_k: usize,
    #[serde(default = "d_holdout")]
    pub holdout_fraction: f64,
    #[serde(default)]
    pub miller_madow: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty eval table must deserialize")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub protocol: Protocol,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub stimulus: StimulusConfig,
    pub retina: RetinaConfig,
    pub rates: RatesConfig,
    pub model: ModelConfig,
    pub eval: EvalConfig,
}

/// On-disk shape: every section optional so a bare protocol name runs
/// end-to-end with documented defaults.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    protocol: Protocol,
    out_dir: Option<PathBuf>,
    seed: Option<u64>,
    stimulus: Option<StimulusConfig>,
    retina: Option<RetinaConfig>,
    rates: Option<RatesConfig>,
    model: Option<ModelConfig>,
    eval: Option<EvalConfig>,
}

impl ExperimentConfig {
    /// All-defaults configuration for a protocol.
    pub fn default_for(protocol: Protocol, out_dir: PathBuf, seed: u64) -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            protocol,
            out_dir,
            seed,
            stimulus: StimulusConfig::default(),
            retina: RetinaConfig::default(),
            rates: RatesConfig::default(),
            model: ModelConfig::default(),
            eval: EvalConfig::default(),
        };
        if protocol == Protocol::Gaba3 {
            cfg.model = ModelConfig::small();
            cfg.retina.n_neurons = 64;
            cfg.retina.region_rows = (0, 16);
            cfg.retina.region_cols = (0, 16);
            cfg.stimulus.height = 16;
            cfg.stimulus.width = 16;
        }
        cfg
    }

    pub fn from_toml_str(text: &str, config_dir: &Path) -> Result<ExperimentConfig> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        let mut cfg = ExperimentConfig::default_for(
            raw.protocol,
            raw.out_dir
                .unwrap_or_else(|| PathBuf::from(format!("runs/{}", raw.protocol.name()))),
            raw.seed.unwrap_or(0),
        );
        if let Some(s) = raw.stimulus {
            cfg.stimulus = s;
        }
        if let Some(r) = raw.retina {
            cfg.retina = r;
        }
        if let Some(r) = raw.rates {
            cfg.rates = r;
        }
        if let Some(m) = raw.model {
            cfg.model = m;
        }
        if let Some(e) = raw.eval {
            cfg.eval = e;
        }
        // Relative paths resolve against the config file's directory.
        if cfg.out_dir.is_relative() {
            cfg.out_dir = config_dir.join(&cfg.out_dir);
        }
        if let Some(p) = &cfg.stimulus.image_path {
            if p.is_relative() {
                cfg.stimulus.image_path = Some(config_dir.join(p));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, dir)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(PipelineError::Config(msg));
        let s = &self.stimulus;
        if s.height == 0 || s.width == 0 {
            return bad("stimulus.height/width must be >= 1".into());
        }
        if !(s.frame_rate_hz > 0.0) {
            return bad("stimulus.frame_rate_hz must be > 0".into());
        }
        if s.n_phase_bins == 0 {
            return bad("stimulus.n_phase_bins must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&s.contrast) {
            return bad("stimulus.contrast must lie in [0, 1]".into());
        }
        if !(s.mean_luminance > 0.0) {
            return bad("stimulus.mean_luminance must be > 0".into());
        }
        match self.protocol {
            Protocol::Gratings8 => {
                if s.n_orientations == 0 {
                    return bad("stimulus.n_orientations must be >= 1".into());
                }
                if !(s.bar_width_um > 0.0) {
                    return bad("stimulus.bar_width_um must be > 0".into());
                }
                if s.repetitions == 0 || !(s.rep_duration_s > 0.0) {
                    return bad("gratings8 needs repetitions >= 1 and rep_duration_s > 0".into());
                }
            }
            Protocol::Gaba3 => {
                if s.spatial_freqs_cpd.is_empty() || s.spatial_freqs_cpd.iter().any(|&f| f <= 0.0) {
                    return bad("stimulus.spatial_freqs_cpd must be positive".into());
                }
                if !(s.gaba_duration_s > 0.0) {
                    return bad("stimulus.gaba_duration_s must be > 0".into());
                }
            }
            Protocol::Natural => {
                if !(s.natural_duration_s > 0.0) {
                    return bad("stimulus.natural_duration_s must be > 0".into());
                }
                if let Some(p) = &s.image_path {
                    if !p.exists() {
                        return bad(format!("stimulus.image_path {} not found", p.display()));
                    }
                }
            }
        }
        if self.retina.n_neurons == 0 {
            return bad("retina.n_neurons must be >= 1".into());
        }
        let (r0, r1) = self.retina.region_rows;
        let (c0, c1) = self.retina.region_cols;
        if r0 >= r1 || r1 > 64 || c0 >= c1 || c1 > 64 {
            return bad("retina.region_rows/cols must be non-empty ranges within [0, 64]".into());
        }
        // The stimulus must cover the populated electrode region.
        let extent_rows = (s.height as f64 * s.um_per_pixel / 42.0).floor() as usize;
        let extent_cols = (s.width as f64 * s.um_per_pixel / 42.0).floor() as usize;
        if r1 > extent_rows || c1 > extent_cols {
            return bad(format!(
                "stimulus of {}x{} pixels at {} um/pixel does not cover electrode region rows {r0}..{r1}, cols {c0}..{c1}",
                s.height, s.width, s.um_per_pixel
            ));
        }
        self.retina
            .nonlinearity
            .parse::<rgc_core::retinasim::Nonlinearity>()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if !(self.rates.bin_s > 0.0) || !(self.rates.bandwidth_s > 0.0) {
            return bad("rates.bin_s and rates.bandwidth_s must be > 0".into());
        }
        self.rates
            .method
            .parse::<rgc_core::rates::RateMethod>()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.model.minibatch_size == 0 || self.model.n_chains == 0 {
            return bad("model.minibatch_size and model.n_chains must be >= 1".into());
        }
        if !(self.model.precision_floor > 0.0) {
            return bad("model.precision_floor must be > 0".into());
        }
        if !(0.0 < self.eval.holdout_fraction && self.eval.holdout_fraction < 1.0) {
            return bad("eval.holdout_fraction must lie in (0, 1)".into());
        }
        self.label_scheme()?;
        Ok(())
    }

    pub fn label_scheme(&self) -> Result<rgc_core::stimgen::LabelScheme> {
        match &self.eval.label_scheme {
            Some(s) => s.parse().map_err(|e: rgc_core::CoreError| PipelineError::Config(e.to_string())),
            None => Ok(match self.protocol {
                Protocol::Gratings8 => rgc_core::stimgen::LabelScheme::OrientationPhase,
                _ => rgc_core::stimgen::LabelScheme::Phase,
            }),
        }
    }

    /// Canonical hash of the resolved configuration. The output directory is
    /// a storage location, not an experiment parameter, so it is excluded:
    /// the same experiment hashed into two directories stays comparable.
    pub fn sha256(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hashed = self.clone();
        hashed.out_dir = PathBuf::new();
        let canonical = serde_json::to_string(&hashed).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The datasets (independently trained groups of sequences) this
    /// configuration produces.
    pub fn datasets(&self) -> Vec<DatasetPlan> {
        let s = &self.stimulus;
        match self.protocol {
            Protocol::Gratings8 => {
                let step = 360.0 / s.n_orientations as f64;
                let duration = s.repetitions as f64 * s.rep_duration_s;
                let cpd = s.um_per_degree / (2.0 * s.bar_width_um);
                let sequences = (0..s.n_orientations)
                    .map(|i| SequencePlan {
                        name: format!("ori{:03}", (i as f64 * step).round() as u32),
                        orientation_id: i as u32,
                        duration_s: duration,
                        kind: SequenceKind::Grating(self.grating(i as f64 * step, cpd)),
                    })
                    .collect();
                vec![DatasetPlan {
                    name: "all".into(),
                    stage: ImpairmentStage::None,
                    spatial_freq_cpd: Some(cpd),
                    seed_group: "all".into(),
                    sequences,
                }]
            }
            Protocol::Gaba3 => {
                let stages = [
                    ImpairmentStage::None,
                    ImpairmentStage::GabacBlocked,
                    ImpairmentStage::GabaAbcBlocked,
                ];
                let mut out = Vec::new();
                for &freq in &s.spatial_freqs_cpd {
                    let group = format!("f{:03}", (freq * 1000.0).round() as u32);
                    for stage in stages {
                        let name = format!("{group}_{}", stage.name());
                        out.push(DatasetPlan {
                            name: name.clone(),
                            stage,
                            spatial_freq_cpd: Some(freq),
                            seed_group: group.clone(),
                            sequences: vec![SequencePlan {
                                name,
                                orientation_id: 0,
                                duration_s: s.gaba_duration_s,
                                kind: SequenceKind::Grating(self.grating(0.0, freq)),
                            }],
                        });
                    }
                }
                out
            }
            Protocol::Natural => vec![DatasetPlan {
                name: "all".into(),
                stage: ImpairmentStage::None,
                spatial_freq_cpd: None,
                seed_group: "all".into(),
                sequences: vec![SequencePlan {
                    name: "scan".into(),
                    orientation_id: 0,
                    duration_s: s.natural_duration_s,
                    kind: SequenceKind::NaturalScan,
                }],
            }],
        }
    }

    fn grating(&self, orientation_deg: f64, spatial_freq_cpd: f64) -> GratingSpec {
        let s = &self.stimulus;
        GratingSpec {
            orientation_deg,
            spatial_freq_cpd,
            temporal_freq_hz: s.temporal_freq_hz,
            michelson_contrast: s.contrast,
            mean_luminance: s.mean_luminance,
            bar_profile: BarProfile::Square,
            duration_s: 0.0, // filled per sequence
            um_per_degree: s.um_per_degree,
            um_per_pixel: s.um_per_pixel,
        }
    }

    /// Stable sub-seed for one named role within the run.
    pub fn subseed(&self, role: &str, index: u64) -> u64 {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(format!("{}:{role}:{index}", self.seed).as_bytes());
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

#[derive(Debug, Clone)]
pub enum SequenceKind {
    Grating(GratingSpec),
    NaturalScan,
}

#[derive(Debug, Clone)]
pub struct SequencePlan {
    pub name: String,
    pub orientation_id: u32,
    pub duration_s: f64,
    pub kind: SequenceKind,
}

#[derive(Debug, Clone)]
pub struct DatasetPlan {
    pub name: String,
    pub stage: ImpairmentStage,
    pub spatial_freq_cpd: Option<f64>,
    /// Seed-sharing key: datasets with the same group reuse the same spike
    /// and noise RNG streams, so blockade stages form paired recordings of
    /// one retina rather than independent draws.
    pub seed_group: String,
    pub sequences: Vec<SequencePlan>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bare_protocol_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml_str("protocol = \"gratings8\"", Path::new(".")).unwrap();
        assert_eq!(cfg.protocol, Protocol::Gratings8);
        assert_eq!(cfg.retina.n_neurons, 256);
        assert_eq!(cfg.model.n_mean, 64);
        let ds = cfg.datasets();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds[0].sequences.len(), 8);
        assert!((ds[0].sequences[0].duration_s - 20.0).abs() < 1e-12);
    }

    #[test]
    fn gaba3_produces_nine_datasets_with_small_model() {
        let cfg = ExperimentConfig::from_toml_str("protocol = \"gaba3\"", Path::new(".")).unwrap();
        assert_eq!(cfg.model.n_mean, 4);
        let ds = cfg.datasets();
        assert_eq!(ds.len(), 9);
        let names: Vec<&str> = ds.iter().map(|d| d.name.as_str()).collect();
        assert!(names.contains(&"f011_none"));
        assert!(names.contains(&"f045_gabaabc_blocked"));
    }

    #[test]
    fn invalid_values_are_rejected() {
        for toml in [
            "protocol = \"gratings8\"\n[stimulus]\nrep_duration_s = 0.0",
            "protocol = \"gratings8\"\n[rates]\nbin_s = -1.0",
            "protocol = \"gratings8\"\n[retina]\nn_neurons = 0",
            "protocol = \"gratings8\"\n[eval]\nholdout_fraction = 1.5",
            "protocol = \"nope\"",
            "protocol = \"gratings8\"\nunknown_key = 1",
        ] {
            assert!(ExperimentConfig::from_toml_str(toml, Path::new(".")).is_err(), "{toml}");
        }
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::from_toml_str("protocol = \"gratings8\"", Path::new(".")).unwrap();
        let b = ExperimentConfig::from_toml_str("protocol = \"gratings8\"", Path::new(".")).unwrap();
        assert_eq!(a.sha256(), b.sha256());
        let c =
            ExperimentConfig::from_toml_str("protocol = \"gratings8\"\nseed = 9", Path::new(".")).unwrap();
        assert_ne!(a.sha256(), c.sha256());
        // The output directory is a storage location, not a parameter.
        let mut d = a.clone();
        d.out_dir = "/somewhere/else".into();
        assert_eq!(a.sha256(), d.sha256());
    }

    #[test]
    fn subseeds_differ_by_role_and_index() {
        let cfg = ExperimentConfig::default_for(Protocol::Gratings8, "x".into(), 3);
        assert_ne!(cfg.subseed("respond", 0), cfg.subseed("respond", 1));
        assert_ne!(cfg.subseed("respond", 0), cfg.subseed("train", 0));
        assert_eq!(cfg.subseed("train", 2), cfg.subseed("train", 2));
    }
}
