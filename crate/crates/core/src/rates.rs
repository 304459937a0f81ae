//! From spike trains to the rate matrix the model consumes: kernel-smoothed
//! rate estimation, active-neuron selection, patch partitioning,
//! standardization, and rate-sample-to-stimulus-label alignment.
//!
//! Rate estimation is a kernel-smoothing surrogate for log-Gaussian Cox
//! process intensity inference: plain Gaussian smoothing of the spike train
//! by default, with a log-link variant that smooths log-counts and
//! exponentiates back.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::error::{CoreError, Result};
use crate::retinasim::{Lattice, SpikeTrains};
use crate::stimgen::{label_frames, LabelScheme, StimulusSequence};

/// Default sampling period of the rate grid.
pub const DEFAULT_BIN_S: f64 = 0.010;
/// Default smoothing bandwidth.
pub const DEFAULT_BANDWIDTH_S: f64 = 0.050;
/// Default activity-selection threshold on the rate-derivative range.
pub const DEFAULT_SELECT_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateMethod {
    GaussKernel,
    LogGaussKernel,
}

impl std::str::FromStr for RateMethod {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gauss_kernel" => Ok(RateMethod::GaussKernel),
            "log_gauss_kernel" => Ok(RateMethod::LogGaussKernel),
            other => Err(CoreError::invalid("method", format!("unknown rate method '{other}'"))),
        }
    }
}

/// Samples x neurons firing-rate matrix with stimulus-label alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct RateMatrix {
    /// Hz, or z-scores once standardized.
    pub values: Array2<f64>,
    pub sample_times_s: Vec<f64>,
    pub neuron_ids: Vec<u64>,
    pub neuron_pos_um: Vec<(f64, f64)>,
    /// One integer label per row; -1 until aligned.
    pub labels: Vec<i64>,
    pub standardized: bool,
    pub col_means: Option<Vec<f64>>,
    pub col_stds: Option<Vec<f64>>,
    pub bin_s: f64,
}

impl RateMatrix {
    pub fn n_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_neurons(&self) -> usize {
        self.values.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite("rate matrix values".into()));
        }
        if self.sample_times_s.len() != self.n_samples() || self.labels.len() != self.n_samples() {
            return Err(CoreError::DimensionMismatch("sample times/labels vs rows".into()));
        }
        if self.neuron_ids.len() != self.n_neurons() || self.neuron_pos_um.len() != self.n_neurons() {
            return Err(CoreError::DimensionMismatch("neuron metadata vs columns".into()));
        }
        if self.sample_times_s.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CoreError::invalid("sample_times_s", "must be strictly increasing"));
        }
        Ok(())
    }

    fn filtered_columns(&self, keep: &[usize]) -> RateMatrix {
        let mut values = Array2::zeros((self.n_samples(), keep.len()));
        for (new, &old) in keep.iter().enumerate() {
            values.column_mut(new).assign(&self.values.column(old));
        }
        RateMatrix {
            values,
            sample_times_s: self.sample_times_s.clone(),
            neuron_ids: keep.iter().map(|&k| self.neuron_ids[k]).collect(),
            neuron_pos_um: keep.iter().map(|&k| self.neuron_pos_um[k]).collect(),
            labels: self.labels.clone(),
            standardized: self.standardized,
            col_means: self.col_means.as_ref().map(|m| keep.iter().map(|&k| m[k]).collect()),
            col_stds: self.col_stds.as_ref().map(|s| keep.iter().map(|&k| s[k]).collect()),
            bin_s: self.bin_s,
        }
    }
}

fn gaussian_pdf(x: f64, sigma: f64) -> f64 {
    (-(x * x) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

/// Estimate firing rates on a regular grid of period `bin_s`.
pub fn estimate_rates(
    spikes: &SpikeTrains,
    bin_s: f64,
    method: RateMethod,
    bandwidth_s: f64,
) -> Result<RateMatrix> {
    if !(bin_s > 0.0) {
        return Err(CoreError::invalid("bin_s", "must be > 0"));
    }
    if !(bandwidth_s > 0.0) {
        return Err(CoreError::invalid("bandwidth_s", "must be > 0"));
    }
    let n_bins = (spikes.recording_duration_s / bin_s).floor() as usize;
    if n_bins == 0 {
        return Err(CoreError::invalid("bin_s", "no complete bins fit in the recording"));
    }
    let n_neurons = spikes.n_neurons();
    let mut values = Array2::zeros((n_bins, n_neurons));
    let half_window = (5.0 * bandwidth_s / bin_s).ceil() as i64;
    match method {
        RateMethod::GaussKernel => {
            for (k, train) in spikes.trains.iter().enumerate() {
                for &spike in train {
                    let center = (spike / bin_s - 0.5).round() as i64;
                    let lo = (center - half_window).max(0) as usize;
                    let hi = ((center + half_window) as usize).min(n_bins.saturating_sub(1));
                    for b in lo..=hi {
                        let t = (b as f64 + 0.5) * bin_s;
                        values[(b, k)] += gaussian_pdf(t - spike, bandwidth_s);
                    }
                }
            }
        }
        RateMethod::LogGaussKernel => {
            // Discrete smoothing weights, renormalized at the edges.
            let raw: Vec<f64> = (-half_window..=half_window)
                .map(|j| gaussian_pdf(j as f64 * bin_s, bandwidth_s) * bin_s)
                .collect();
            for (k, train) in spikes.trains.iter().enumerate() {
                let mut counts = vec![0.0f64; n_bins];
                for &spike in train {
                    let b = ((spike / bin_s) as usize).min(n_bins - 1);
                    counts[b] += 1.0;
                }
                let logc: Vec<f64> = counts.iter().map(|c| (c + 1.0).ln()).collect();
                for b in 0..n_bins {
                    let mut acc = 0.0;
                    let mut mass = 0.0;
                    for (ji, j) in (-half_window..=half_window).enumerate() {
                        let idx = b as i64 + j;
                        if idx >= 0 && (idx as usize) < n_bins {
                            acc += raw[ji] * logc[idx as usize];
                            mass += raw[ji];
                        }
                    }
                    values[(b, k)] = ((acc / mass).exp() - 1.0) / bin_s;
                }
            }
        }
    }
    let rm = RateMatrix {
        values,
        sample_times_s: (0..n_bins).map(|b| (b as f64 + 0.5) * bin_s).collect(),
        neuron_ids: spikes.neuron_ids.clone(),
        neuron_pos_um: spikes.positions_um.clone(),
        labels: vec![-1; n_bins],
        standardized: false,
        col_means: None,
        col_stds: None,
        bin_s,
    };
    rm.validate()?;
    Ok(rm)
}

/// Keep only neurons whose rate-derivative range reaches `threshold`:
/// constant (including silent) rates carry no stimulus information.
pub fn select_active(rates: &RateMatrix, threshold: f64) -> Result<RateMatrix> {
    if rates.standardized {
        return Err(CoreError::AlreadyStandardized);
    }
    let mut keep = Vec::new();
    for k in 0..rates.n_neurons() {
        let col = rates.values.column(k);
        let mut min_d = f64::INFINITY;
        let mut max_d = f64::NEG_INFINITY;
        for i in 1..col.len() {
            let d = (col[i] - col[i - 1]) / rates.bin_s;
            min_d = min_d.min(d);
            max_d = max_d.max(d);
        }
        let range = if min_d.is_finite() { max_d - min_d } else { 0.0 };
        if range >= threshold {
            keep.push(k);
        }
    }
    if keep.is_empty() {
        return Err(CoreError::AllNeuronsRemoved { threshold });
    }
    Ok(rates.filtered_columns(&keep))
}

/// Patch index (t0..t15) of an electrode in lattice coordinates, row-major
/// from the top-left in blocks of 16x16 electrodes.
pub fn patch_of_electrode(row: usize, col: usize, lattice: &Lattice) -> Result<u32> {
    if row >= lattice.rows || col >= lattice.cols {
        return Err(CoreError::PositionOutOfLattice {
            id: 0,
            x_um: col as f64 * lattice.pitch_um,
            y_um: row as f64 * lattice.pitch_um,
        });
    }
    Ok(((row / 16) * 4 + col / 16) as u32)
}

/// Split a rate matrix into per-patch matrices keyed by patch index. Only
/// patches with at least one neuron appear in the output; their neuron sets
/// partition the input's.
pub fn partition_patches(rates: &RateMatrix) -> Result<BTreeMap<u32, RateMatrix>> {
    let lattice = Lattice::default();
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (k, &(x_um, y_um)) in rates.neuron_pos_um.iter().enumerate() {
        if x_um < 0.0 || y_um < 0.0 {
            return Err(CoreError::PositionOutOfLattice { id: rates.neuron_ids[k], x_um, y_um });
        }
        let col = (x_um / lattice.pitch_um).floor() as usize;
        let row = (y_um / lattice.pitch_um).floor() as usize;
        if row >= lattice.rows || col >= lattice.cols {
            return Err(CoreError::PositionOutOfLattice { id: rates.neuron_ids[k], x_um, y_um });
        }
        let patch = patch_of_electrode(row, col, &lattice)?;
        groups.entry(patch).or_default().push(k);
    }
    Ok(groups.into_iter().map(|(p, keep)| (p, rates.filtered_columns(&keep))).collect())
}

/// Z-score every column, retaining per-column mean and standard deviation
/// for inversion.
pub fn standardize(rates: &RateMatrix) -> Result<RateMatrix> {
    if rates.standardized {
        return Err(CoreError::AlreadyStandardized);
    }
    let n = rates.n_samples() as f64;
    let mut out = rates.clone();
    let mut means = Vec::with_capacity(rates.n_neurons());
    let mut stds = Vec::with_capacity(rates.n_neurons());
    for k in 0..rates.n_neurons() {
        let col = rates.values.column(k);
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if std < 1e-12 {
            return Err(CoreError::ZeroVarianceColumn { index: k });
        }
        for v in out.values.column_mut(k).iter_mut() {
            *v = (*v - mean) / std;
        }
        means.push(mean);
        stds.push(std);
    }
    out.standardized = true;
    out.col_means = Some(means);
    out.col_stds = Some(stds);
    Ok(out)
}

/// Invert [`standardize`], restoring the original units.
pub fn invert_standardize(rates: &RateMatrix) -> Result<RateMatrix> {
    if !rates.standardized {
        return Err(CoreError::NotStandardized);
    }
    let means = rates.col_means.as_ref().ok_or(CoreError::NotStandardized)?;
    let stds = rates.col_stds.as_ref().ok_or(CoreError::NotStandardized)?;
    let mut out = rates.clone();
    for k in 0..rates.n_neurons() {
        for v in out.values.column_mut(k).iter_mut() {
            *v = *v * stds[k] + means[k];
        }
    }
    out.standardized = false;
    out.col_means = None;
    out.col_stds = None;
    Ok(out)
}

/// Fill the label column by nearest-frame lookup (floor convention).
pub fn align_labels(
    rates: &RateMatrix,
    stim: &StimulusSequence,
    scheme: LabelScheme,
    n_phase_bins: usize,
) -> Result<RateMatrix> {
    let frame_labels = label_frames(stim, scheme, n_phase_bins)?;
    let mut out = rates.clone();
    for (i, &t) in rates.sample_times_s.iter().enumerate() {
        let frame = stim.frame_at(t)?;
        out.labels[i] = frame_labels[frame];
    }
    Ok(out)
}
