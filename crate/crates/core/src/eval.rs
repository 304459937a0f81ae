//! Model evaluation: mutual information between latent binary states and
//! stimulus labels, state occupancy, and state/unit-triggered stimulus
//! averages.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::error::{CoreError, Result};
use crate::mcrbm::LatentState;
use crate::stimgen::StimulusSequence;

pub const DEFAULT_MIN_COUNT: usize = 10;

/// Plug-in mutual-information report over the empirical joint of
/// (state key, label).
#[derive(Debug, Clone)]
pub struct MiReport {
    pub mi_bits: f64,
    /// mi_bits / min(H(states), H(labels)); 0 when the min entropy is 0.
    pub normalized_mi: f64,
    pub h_states_bits: f64,
    pub h_labels_bits: f64,
    pub n_samples: usize,
    pub n_distinct_states: usize,
    pub contingency: BTreeMap<(String, i64), u64>,
}

fn entropy_bits(counts: &BTreeMap<String, u64>, n: f64) -> f64 {
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Plug-in estimator from a joint contingency table. The optional
/// Miller-Madow correction is for sensitivity analysis only.
pub fn mutual_information_from_counts(
    contingency: BTreeMap<(String, i64), u64>,
    miller_madow: bool,
) -> Result<MiReport> {
    let n: u64 = contingency.values().sum();
    if n == 0 {
        return Err(CoreError::invalid("contingency", "must contain at least one count"));
    }
    let nf = n as f64;
    let mut state_counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut label_counts: BTreeMap<String, u64> = BTreeMap::new();
    for ((s, l), &c) in &contingency {
        if c == 0 {
            continue;
        }
        *state_counts.entry(s.clone()).or_insert(0) += c;
        *label_counts.entry(l.to_string()).or_insert(0) += c;
    }
    let h_states = entropy_bits(&state_counts, nf);
    let h_labels = entropy_bits(&label_counts, nf);
    let mut mi = 0.0;
    for ((s, l), &c) in &contingency {
        if c == 0 {
            continue;
        }
        let pxy = c as f64 / nf;
        let px = state_counts[s] as f64 / nf;
        let py = label_counts[&l.to_string()] as f64 / nf;
        mi += pxy * (pxy / (px * py)).log2();
    }
    if miller_madow {
        let kx = state_counts.len() as f64;
        let ky = label_counts.len() as f64;
        let kxy = contingency.values().filter(|&&c| c > 0).count() as f64;
        mi += (kx - 1.0 + ky - 1.0 - (kxy - 1.0)) / (2.0 * nf * std::f64::consts::LN_2);
    }
    let mi = mi.max(0.0);
    let min_h = h_states.min(h_labels);
    let normalized = if min_h > 0.0 { (mi / min_h).min(1.0) } else { 0.0 };
    Ok(MiReport {
        mi_bits: mi,
        normalized_mi: normalized,
        h_states_bits: h_states,
        h_labels_bits: h_labels,
        n_samples: n as usize,
        n_distinct_states: state_counts.len(),
        contingency,
    })
}

/// Mutual information between a latent-state sequence and a label sequence.
pub fn mutual_information(states: &[LatentState], labels: &[i64], miller_madow: bool) -> Result<MiReport> {
    if states.len() != labels.len() {
        return Err(CoreError::DimensionMismatch(format!(
            "{} states vs {} labels",
            states.len(),
            labels.len()
        )));
    }
    if states.is_empty() {
        return Err(CoreError::invalid("states", "must be nonempty"));
    }
    let mut contingency: BTreeMap<(String, i64), u64> = BTreeMap::new();
    for (s, &l) in states.iter().zip(labels) {
        *contingency.entry((s.key(), l)).or_insert(0) += 1;
    }
    mutual_information_from_counts(contingency, miller_madow)
}

/// Histogram of state keys.
pub fn state_occupancy(states: &[LatentState]) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for s in states {
        *counts.entry(s.key()).or_insert(0u64) += 1;
    }
    counts
}

/// State keys ordered by descending occupancy (ties by key).
pub fn top_states(states: &[LatentState], k: usize) -> Vec<(String, u64)> {
    let mut entries: Vec<(String, u64)> = state_occupancy(states).into_iter().collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    entries.truncate(k);
    entries
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Trigger {
    State(String),
    Unit { layer: HiddenLayer, index: usize, on_value: u8 },
}

impl std::fmt::Display for Trigger {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Trigger::State(key) => write!(f, "state {key}"),
            Trigger::Unit { layer, index, on_value } => {
                write!(f, "{}[{}]={}", layer.name(), index, on_value)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HiddenLayer {
    Mean,
    Cov,
}

impl HiddenLayer {
    pub fn name(&self) -> &'static str {
        match self {
            HiddenLayer::Mean => "mean",
            HiddenLayer::Cov => "cov",
        }
    }
}

/// Pixel-wise mean of the stimulus frames associated with the triggering
/// samples.
#[derive(Debug, Clone)]
pub struct TriggeredAverage {
    pub image: Array2<f64>,
    pub n_contributing: usize,
    pub trigger: Trigger,
}

fn triggered_average(
    selected: impl Iterator<Item = f64>,
    stim: &StimulusSequence,
    trigger: Trigger,
    min_count: usize,
) -> Result<TriggeredAverage> {
    let mut acc = Array2::zeros(stim.frame_dim());
    let mut n = 0usize;
    for t in selected {
        let frame = stim.frame_at(t)?;
        acc += &stim.frames[frame];
        n += 1;
    }
    if n < min_count.max(1) {
        return Err(CoreError::InsufficientOccupancy {
            trigger: trigger.to_string(),
            count: n,
            min_count,
        });
    }
    Ok(TriggeredAverage { image: acc / n as f64, n_contributing: n, trigger })
}

/// Average the stimuli shown at the samples whose encoded state equals
/// `state_key`.
pub fn state_triggered_average(
    states: &[LatentState],
    sample_times_s: &[f64],
    stim: &StimulusSequence,
    state_key: &str,
    min_count: usize,
) -> Result<TriggeredAverage> {
    if states.len() != sample_times_s.len() {
        return Err(CoreError::DimensionMismatch("states vs sample times".into()));
    }
    if !states.iter().any(|s| s.key() == state_key) {
        return Err(CoreError::UnknownState(state_key.to_string()));
    }
    triggered_average(
        states
            .iter()
            .zip(sample_times_s)
            .filter(|(s, _)| s.key() == state_key)
            .map(|(_, &t)| t),
        stim,
        Trigger::State(state_key.to_string()),
        min_count,
    )
}

/// Average the stimuli shown at the samples where one binary unit takes
/// `on_value`.
pub fn unit_triggered_average(
    states: &[LatentState],
    sample_times_s: &[f64],
    stim: &StimulusSequence,
    layer: HiddenLayer,
    unit_index: usize,
    on_value: u8,
    min_count: usize,
) -> Result<TriggeredAverage> {
    if states.len() != sample_times_s.len() {
        return Err(CoreError::DimensionMismatch("states vs sample times".into()));
    }
    let bit = |s: &LatentState| -> Result<u8> {
        let bits = match layer {
            HiddenLayer::Mean => &s.h_m,
            HiddenLayer::Cov => &s.h_c,
        };
        bits.get(unit_index).copied().ok_or_else(|| {
            CoreError::DimensionMismatch(format!("unit index {unit_index} out of range"))
        })
    };
    let mut times = Vec::new();
    for (s, &t) in states.iter().zip(sample_times_s) {
        if bit(s)? == on_value {
            times.push(t);
        }
    }
    triggered_average(
        times.into_iter(),
        stim,
        Trigger::Unit { layer, index: unit_index, on_value },
        min_count,
    )
}

/// Ordering verdict over impairment stages.
#[derive(Debug, Clone)]
pub struct StageVerdict {
    /// Stage name and normalized MI, in presentation order.
    pub table: Vec<(String, f64)>,
    pub ordered: bool,
    /// Adjacent pairs that violate the non-increasing ordering.
    pub violations: Vec<(String, String)>,
}

/// Check that normalized MI is non-increasing over the given stage order.
pub fn mi_by_stage(reports: &[(String, f64)]) -> Result<StageVerdict> {
    if reports.len() < 2 {
        return Err(CoreError::invalid("reports", "need at least two stages"));
    }
    let mut violations = Vec::new();
    for w in reports.windows(2) {
        if w[1].1 > w[0].1 + 1e-12 {
            violations.push((w[0].0.clone(), w[1].0.clone()));
        }
    }
    Ok(StageVerdict { table: reports.to_vec(), ordered: violations.is_empty(), violations })
}
