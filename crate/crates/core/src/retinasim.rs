//! Synthetic RGC population: linear-nonlinear-Poisson neurons on the 64x64
//! electrode lattice, with a parametric impairment mode standing in for
//! pharmacological GABA blockade.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::stimgen::StimulusSequence;

/// Spike timestamps are quantized to this rate (within the 7-8 kHz
/// acquisition range).
pub const SPIKE_QUANTUM_HZ: f64 = 7500.0;
/// Instantaneous rates above this are clipped, with a logged warning.
pub const DEFAULT_RATE_CAP_HZ: f64 = 200.0;
/// Correlation time of the impairment rate noise: the lognormal gain is
/// resampled once per window of this length.
pub const NOISE_CORR_S: f64 = 0.2;

/// Electrode lattice geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lattice {
    pub rows: usize,
    pub cols: usize,
    pub pitch_um: f64,
}

impl Default for Lattice {
    fn default() -> Self {
        Lattice { rows: 64, cols: 64, pitch_um: 42.0 }
    }
}

impl Lattice {
    pub fn extent_um(&self) -> (f64, f64) {
        (self.cols as f64 * self.pitch_um, self.rows as f64 * self.pitch_um)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    On,
    Off,
}

/// One synthetic neuron: difference-of-Gaussians receptive field, biphasic
/// temporal kernel, static nonlinearity applied downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronSpec {
    pub id: u64,
    pub center_um: (f64, f64),
    pub sigma_c_um: f64,
    pub sigma_s_um: f64,
    pub surround_weight: f64,
    pub temporal_kernel: Vec<f64>,
    pub polarity: Polarity,
    pub baseline_rate_hz: f64,
    pub gain: f64,
}

impl NeuronSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_s_um > self.sigma_c_um) {
            return Err(CoreError::invalid("sigma_s_um", "surround sigma must exceed center sigma"));
        }
        if self.temporal_kernel.iter().any(|t| !t.is_finite()) {
            return Err(CoreError::NonFinite("temporal_kernel".into()));
        }
        if !(self.baseline_rate_hz >= 0.0) {
            return Err(CoreError::invalid("baseline_rate_hz", "must be >= 0"));
        }
        if !(self.gain > 0.0) && self.gain != 0.0 {
            return Err(CoreError::invalid("gain", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImpairmentStage {
    None,
    GabacBlocked,
    GabaAbcBlocked,
}

impl ImpairmentStage {
    pub fn name(&self) -> &'static str {
        match self {
            ImpairmentStage::None => "none",
            ImpairmentStage::GabacBlocked => "gabac_blocked",
            ImpairmentStage::GabaAbcBlocked => "gabaabc_blocked",
        }
    }
}

impl std::str::FromStr for ImpairmentStage {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ImpairmentStage::None),
            "gabac_blocked" | "gabac" => Ok(ImpairmentStage::GabacBlocked),
            "gabaabc_blocked" | "gabaabc" => Ok(ImpairmentStage::GabaAbcBlocked),
            other => Err(CoreError::invalid("stage", format!("unknown impairment stage '{other}'"))),
        }
    }
}

/// Phenomenological impairment: surrounds are scaled down and rate noise is
/// scaled up. Not a dose-response model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImpairmentLevel {
    pub stage: ImpairmentStage,
    pub surround_scale: f64,
    pub noise_gain: f64,
}

impl ImpairmentLevel {
    pub fn none() -> Self {
        ImpairmentLevel { stage: ImpairmentStage::None, surround_scale: 1.0, noise_gain: 1.0 }
    }

    /// Default parameters per blockade stage.
    pub fn for_stage(stage: ImpairmentStage) -> Self {
        match stage {
            ImpairmentStage::None => Self::none(),
            ImpairmentStage::GabacBlocked => {
                ImpairmentLevel { stage, surround_scale: 0.5, noise_gain: 1.5 }
            }
            ImpairmentStage::GabaAbcBlocked => {
                ImpairmentLevel { stage, surround_scale: 0.0, noise_gain: 2.5 }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.surround_scale) {
            return Err(CoreError::invalid("surround_scale", "must lie in [0, 1]"));
        }
        if !(self.noise_gain >= 1.0) {
            return Err(CoreError::invalid("noise_gain", "must be >= 1"));
        }
        if self.stage == ImpairmentStage::None && (self.surround_scale != 1.0 || self.noise_gain != 1.0) {
            return Err(CoreError::invalid("stage", "stage none requires surround_scale = 1 and noise_gain = 1"));
        }
        Ok(())
    }
}

/// The synthetic retina: immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct RetinaModel {
    pub neurons: Vec<NeuronSpec>,
    pub lattice: Lattice,
    pub seed: u64,
    pub impairment: ImpairmentLevel,
    /// Multiplicative rate-noise gain accumulated from impairment (1 = no
    /// extra noise).
    pub noise_gain: f64,
}

/// Uniform sampling ranges for synthetic receptive-field parameters.
#[derive(Debug, Clone)]
pub struct RfParamRanges {
    /// Electrode rows (lo inclusive, hi exclusive) neurons are placed on.
    pub region_rows: (usize, usize),
    pub region_cols: (usize, usize),
    pub sigma_c_um: (f64, f64),
    /// sigma_s = ratio * sigma_c; ratio must stay above 1.
    pub surround_ratio: (f64, f64),
    pub surround_weight: (f64, f64),
    pub baseline_rate_hz: (f64, f64),
    pub gain: (f64, f64),
    pub tau_fast_s: (f64, f64),
    pub tau_slow_s: (f64, f64),
    pub kernel_taps: usize,
    pub kernel_dt_s: f64,
    /// Fraction of OFF-polarity cells.
    pub off_fraction: f64,
}

impl Default for RfParamRanges {
    fn default() -> Self {
        RfParamRanges {
            region_rows: (0, 64),
            region_cols: (0, 64),
            sigma_c_um: (35.0, 70.0),
            surround_ratio: (2.0, 3.0),
            surround_weight: (0.4, 0.8),
            baseline_rate_hz: (2.0, 6.0),
            gain: (20.0, 60.0),
            tau_fast_s: (0.03, 0.06),
            tau_slow_s: (0.08, 0.15),
            kernel_taps: 8,
            kernel_dt_s: 1.0 / 30.0,
            off_fraction: 0.5,
        }
    }
}

impl RfParamRanges {
    fn validate(&self, lattice: &Lattice) -> Result<()> {
        let ok_range = |r: (f64, f64)| r.0 <= r.1 && r.0.is_finite() && r.1.is_finite();
        if self.region_rows.0 >= self.region_rows.1 || self.region_rows.1 > lattice.rows {
            return Err(CoreError::invalid("region_rows", "empty or outside lattice"));
        }
        if self.region_cols.0 >= self.region_cols.1 || self.region_cols.1 > lattice.cols {
            return Err(CoreError::invalid("region_cols", "empty or outside lattice"));
        }
        if !ok_range(self.sigma_c_um) || self.sigma_c_um.0 <= 0.0 {
            return Err(CoreError::invalid("sigma_c_um", "empty or non-positive range"));
        }
        if !ok_range(self.surround_ratio) || self.surround_ratio.0 <= 1.0 {
            return Err(CoreError::invalid("surround_ratio", "range must stay above 1"));
        }
        if !ok_range(self.surround_weight) || self.surround_weight.0 < 0.0 || self.surround_weight.1 > 1.0 {
            return Err(CoreError::invalid("surround_weight", "range must lie in [0, 1]"));
        }
        if !ok_range(self.baseline_rate_hz) || self.baseline_rate_hz.0 < 0.0 {
            return Err(CoreError::invalid("baseline_rate_hz", "empty or negative range"));
        }
        if !ok_range(self.gain) || self.gain.0 < 0.0 {
            return Err(CoreError::invalid("gain", "empty or negative range"));
        }
        if !ok_range(self.tau_fast_s) || self.tau_fast_s.0 <= 0.0 {
            return Err(CoreError::invalid("tau_fast_s", "empty or non-positive range"));
        }
        if !ok_range(self.tau_slow_s) || self.tau_slow_s.0 <= 0.0 {
            return Err(CoreError::invalid("tau_slow_s", "empty or non-positive range"));
        }
        if self.kernel_taps == 0 {
            return Err(CoreError::invalid("kernel_taps", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.off_fraction) {
            return Err(CoreError::invalid("off_fraction", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn uniform_in(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Biphasic kernel: fast excitatory lobe minus a slower opposing lobe,
/// normalized to unit L1 mass.
fn biphasic_kernel(taps: usize, dt: f64, tau_fast: f64, tau_slow: f64, beta: f64) -> Vec<f64> {
    let mut k: Vec<f64> = (0..taps)
        .map(|i| {
            let t = (i as f64 + 0.5) * dt;
            let fast = (t / tau_fast) * (1.0 - t / tau_fast).exp();
            let slow = (t / tau_slow) * (1.0 - t / tau_slow).exp();
            fast - beta * slow
        })
        .collect();
    let mass: f64 = k.iter().map(|x| x.abs()).sum();
    if mass > 0.0 {
        for x in &mut k {
            *x /= mass;
        }
    }
    k
}

/// Build a synthetic population with parameters drawn uniformly from
/// `ranges`. Deterministic for a fixed seed.
pub fn make_population(n_neurons: usize, ranges: &RfParamRanges, seed: u64) -> Result<RetinaModel> {
    if n_neurons == 0 {
        return Err(CoreError::invalid("n_neurons", "must be >= 1"));
    }
    let lattice = Lattice::default();
    ranges.validate(&lattice)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut neurons = Vec::with_capacity(n_neurons);
    for id in 0..n_neurons as u64 {
        let row = rng.random_range(ranges.region_rows.0..ranges.region_rows.1);
        let col = rng.random_range(ranges.region_cols.0..ranges.region_cols.1);
        let jx: f64 = rng.random_range(-0.45..0.45);
        let jy: f64 = rng.random_range(-0.45..0.45);
        let center_um = (
            (col as f64 + 0.5 + jx) * lattice.pitch_um,
            (row as f64 + 0.5 + jy) * lattice.pitch_um,
        );
        let sigma_c = uniform_in(&mut rng, ranges.sigma_c_um);
        let sigma_s = sigma_c * uniform_in(&mut rng, ranges.surround_ratio);
        let surround_weight = uniform_in(&mut rng, ranges.surround_weight);
        let baseline = uniform_in(&mut rng, ranges.baseline_rate_hz);
        let gain = uniform_in(&mut rng, ranges.gain);
        let tau_fast = uniform_in(&mut rng, ranges.tau_fast_s);
        let tau_slow = uniform_in(&mut rng, ranges.tau_slow_s).max(tau_fast * 1.5);
        let beta: f64 = rng.random_range(0.5..1.0);
        let polarity = if rng.random::<f64>() < ranges.off_fraction { Polarity::Off } else { Polarity::On };
        let neuron = NeuronSpec {
            id,
            center_um,
            sigma_c_um: sigma_c,
            sigma_s_um: sigma_s,
            surround_weight,
            temporal_kernel: biphasic_kernel(ranges.kernel_taps, ranges.kernel_dt_s, tau_fast, tau_slow, beta),
            polarity,
            baseline_rate_hz: baseline,
            gain,
        };
        neuron.validate()?;
        neurons.push(neuron);
    }
    Ok(RetinaModel { neurons, lattice, seed, impairment: ImpairmentLevel::none(), noise_gain: 1.0 })
}

/// Return a copy of the retina with surrounds scaled and rate noise gained
/// per the impairment level. Stage `none` is the identity.
pub fn apply_impairment(retina: &RetinaModel, level: ImpairmentLevel) -> Result<RetinaModel> {
    level.validate()?;
    let mut out = retina.clone();
    for n in &mut out.neurons {
        n.surround_weight *= level.surround_scale;
    }
    out.noise_gain *= level.noise_gain;
    out.impairment = level;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlinearity {
    Softplus,
    Exponential,
}

impl std::str::FromStr for Nonlinearity {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softplus" => Ok(Nonlinearity::Softplus),
            "exponential" | "exp" => Ok(Nonlinearity::Exponential),
            other => Err(CoreError::invalid("nonlinearity", format!("unknown nonlinearity '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RespondOptions {
    pub nonlinearity: Nonlinearity,
    pub rate_cap_hz: f64,
    pub um_per_pixel: f64,
}

impl Default for RespondOptions {
    fn default() -> Self {
        RespondOptions {
            nonlinearity: Nonlinearity::Softplus,
            rate_cap_hz: DEFAULT_RATE_CAP_HZ,
            um_per_pixel: crate::stimgen::DEFAULT_UM_PER_PIXEL,
        }
    }
}

/// Sorted spike timestamps per neuron, plus electrode metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeTrains {
    pub trains: Vec<Vec<f64>>,
    pub neuron_ids: Vec<u64>,
    pub positions_um: Vec<(f64, f64)>,
    pub recording_duration_s: f64,
}

impl SpikeTrains {
    pub fn n_neurons(&self) -> usize {
        self.trains.len()
    }

    pub fn total_spikes(&self) -> usize {
        self.trains.iter().map(|t| t.len()).sum()
    }
}

fn nl(nonlinearity: Nonlinearity, x: f64) -> f64 {
    match nonlinearity {
        // Stable softplus, shifted so a zero drive adds nothing.
        Nonlinearity::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p() - std::f64::consts::LN_2,
        Nonlinearity::Exponential => x.exp() - 1.0,
    }
}

/// Instantaneous firing rate of every neuron at every frame (Hz), including
/// impairment rate noise. Deterministic given the seed.
pub fn response_rates(
    retina: &RetinaModel,
    stim: &StimulusSequence,
    duration_s: f64,
    seed: u64,
    opts: &RespondOptions,
) -> Result<Array2<f64>> {
    stim.validate()?;
    if duration_s > stim.duration_s() + 1e-9 {
        return Err(CoreError::Stimulus(format!(
            "stimulus covers {:.3} s but {:.3} s were requested",
            stim.duration_s(),
            duration_s
        )));
    }
    let (h, w) = stim.frame_dim();
    let (ext_x, ext_y) = (w as f64 * opts.um_per_pixel, h as f64 * opts.um_per_pixel);
    for n in &retina.neurons {
        if n.center_um.0 < 0.0 || n.center_um.0 >= ext_x || n.center_um.1 < 0.0 || n.center_um.1 >= ext_y {
            return Err(CoreError::DimensionMismatch(format!(
                "neuron {} at ({:.1}, {:.1}) um is outside the {}x{} px stimulus ({}x{} um)",
                n.id, n.center_um.0, n.center_um.1, w, h, ext_x, ext_y
            )));
        }
    }
    let n_frames = ((duration_s * stim.frame_rate_hz).round() as usize).min(stim.frames.len());
    let n_neurons = retina.neurons.len();
    let n_px = h * w;

    // Spatial DoG weights, pixel-area scaled; OFF cells are sign-flipped.
    let mut weights = Array2::zeros((n_px, n_neurons));
    let px_area = opts.um_per_pixel * opts.um_per_pixel;
    for (k, n) in retina.neurons.iter().enumerate() {
        let ac = px_area / (2.0 * std::f64::consts::PI * n.sigma_c_um.powi(2));
        let as_ = px_area / (2.0 * std::f64::consts::PI * n.sigma_s_um.powi(2));
        let sign = match n.polarity {
            Polarity::On => 1.0,
            Polarity::Off => -1.0,
        };
        for i in 0..h {
            for j in 0..w {
                let dx = (j as f64 + 0.5) * opts.um_per_pixel - n.center_um.0;
                let dy = (i as f64 + 0.5) * opts.um_per_pixel - n.center_um.1;
                let r2 = dx * dx + dy * dy;
                let g = ac * (-r2 / (2.0 * n.sigma_c_um.powi(2))).exp()
                    - n.surround_weight * as_ * (-r2 / (2.0 * n.sigma_s_um.powi(2))).exp();
                weights[(i * w + j, k)] = sign * g;
            }
        }
    }

    // Mean luminance over the presented frames; drive is contrast-like.
    let mut mean_lum = 0.0;
    for f in stim.frames.iter().take(n_frames) {
        mean_lum += f.sum();
    }
    mean_lum /= (n_frames * n_px) as f64;

    // Spatial drive per frame, chunked to bound memory.
    let mut spatial = Array2::zeros((n_frames, n_neurons));
    let chunk = 512;
    let mut fbuf = Array2::zeros((chunk, n_px));
    let mut start = 0;
    while start < n_frames {
        let len = chunk.min(n_frames - start);
        for (r, f) in stim.frames[start..start + len].iter().enumerate() {
            for (c, &v) in f.iter().enumerate() {
                fbuf[(r, c)] = v - mean_lum;
            }
        }
        let prod = fbuf.slice(ndarray::s![..len, ..]).dot(&weights);
        spatial.slice_mut(ndarray::s![start..start + len, ..]).assign(&prod);
        start += len;
    }

    // Temporal convolution with each neuron's kernel (causal, zero history).
    let mut drive = Array2::zeros((n_frames, n_neurons));
    for (k, n) in retina.neurons.iter().enumerate() {
        for t in 0..n_frames {
            let mut acc = 0.0;
            for (tau, &kv) in n.temporal_kernel.iter().enumerate() {
                if tau > t {
                    break;
                }
                acc += kv * spatial[(t - tau, k)];
            }
            drive[(t, k)] = acc;
        }
    }

    // Static nonlinearity plus impairment rate noise. The noise is a
    // mean-one lognormal gain with variance ln(noise_gain), held constant
    // over NOISE_CORR_S windows: fluctuations slower than the rate-smoothing
    // bandwidth are what actually corrupt the population code, while
    // frame-rate noise would largely average out downstream.
    let mut rates = Array2::zeros((n_frames, n_neurons));
    // Log-variance 4·ln(gain): strong enough that added noise, not the
    // disinhibition from weakened surrounds, dominates the coding change.
    let noise_sigma =
        if retina.noise_gain > 1.0 { (4.0 * retina.noise_gain.ln()).sqrt() } else { 0.0 };
    let noise_block = ((NOISE_CORR_S * stim.frame_rate_hz).round() as usize).max(1);
    let mut clipped = 0usize;
    for (k, n) in retina.neurons.iter().enumerate() {
        let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
        noise_rng.set_stream(2 * n.id + 1);
        let mut gain = 1.0;
        for t in 0..n_frames {
            let mut r = n.baseline_rate_hz + n.gain * nl(opts.nonlinearity, drive[(t, k)]);
            if noise_sigma > 0.0 {
                if t % noise_block == 0 {
                    let z: f64 = noise_rng.sample(rand_distr::StandardNormal);
                    gain = (noise_sigma * z - 0.5 * noise_sigma * noise_sigma).exp();
                }
                r *= gain;
            }
            if r > opts.rate_cap_hz {
                r = opts.rate_cap_hz;
                clipped += 1;
            }
            rates[(t, k)] = r.max(0.0);
        }
    }
    if clipped > 0 {
        log::warn!("rate cap {} Hz hit at {} (frame, neuron) points", opts.rate_cap_hz, clipped);
    }
    Ok(rates)
}

/// Draw spike trains from the inhomogeneous Poisson process defined by
/// [`response_rates`], by thinning. Timestamps are quantized to
/// 1/[`SPIKE_QUANTUM_HZ`] s and strictly increasing per neuron.
pub fn respond(
    retina: &RetinaModel,
    stim: &StimulusSequence,
    duration_s: f64,
    seed: u64,
    opts: &RespondOptions,
) -> Result<SpikeTrains> {
    let rates = response_rates(retina, stim, duration_s, seed, opts)?;
    let n_frames = rates.nrows();
    let frame_dt = 1.0 / stim.frame_rate_hz;
    let mut trains = Vec::with_capacity(retina.neurons.len());
    for (k, n) in retina.neurons.iter().enumerate() {
        let lam_max = rates.column(k).iter().copied().fold(0.0f64, f64::max).max(1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2 * n.id);
        let mut t = 0.0f64;
        let mut spikes: Vec<f64> = Vec::new();
        loop {
            let u: f64 = rng.random();
            t += -u.ln() / lam_max;
            if t >= duration_s {
                break;
            }
            let frame = ((t / frame_dt) as usize).min(n_frames - 1);
            let accept: f64 = rng.random();
            if accept * lam_max < rates[(frame, k)] {
                let tq = (t * SPIKE_QUANTUM_HZ).round() / SPIKE_QUANTUM_HZ;
                if tq < duration_s && spikes.last().map_or(true, |&p| tq > p) {
                    spikes.push(tq);
                }
            }
        }
        trains.push(spikes);
    }
    Ok(SpikeTrains {
        trains,
        neuron_ids: retina.neurons.iter().map(|n| n.id).collect(),
        positions_um: retina.neurons.iter().map(|n| n.center_um).collect(),
        recording_duration_s: duration_s,
    })
}
