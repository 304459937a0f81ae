//! File formats: PGM images, spike-train and label CSVs, the RGCR binary
//! rate-matrix format, and evaluation report exports.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{CoreError, Result};
use crate::eval::{MiReport, TriggeredAverage};
use crate::rates::RateMatrix;
use crate::retinasim::SpikeTrains;
use crate::stimgen::{FrameLabel, StimulusSequence};

fn malformed(path: &Path, reason: impl Into<String>) -> CoreError {
    CoreError::MalformedFile { path: path.display().to_string(), reason: reason.into() }
}

// ---------------------------------------------------------------------------
// PGM (P5 binary, 8- or 16-bit)

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgmDepth {
    Eight,
    Sixteen,
}

impl PgmDepth {
    fn maxval(self) -> u32 {
        match self {
            PgmDepth::Eight => 255,
            PgmDepth::Sixteen => 65535,
        }
    }
}

/// Write a grayscale image, mapping luminance values linearly from
/// `[0, lum_scale]` to `[0, maxval]` (values outside are clamped).
pub fn write_pgm(path: &Path, image: &Array2<f64>, lum_scale: f64, depth: PgmDepth) -> Result<()> {
    if !(lum_scale > 0.0) || !lum_scale.is_finite() {
        return Err(CoreError::invalid("lum_scale", "must be finite and positive"));
    }
    let (h, w) = image.dim();
    if h == 0 || w == 0 {
        return Err(CoreError::invalid("image", "must be nonempty"));
    }
    let maxval = depth.maxval();
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{w} {h}\n{maxval}\n")?;
    for &v in image.iter() {
        let q = ((v / lum_scale) * maxval as f64).round().clamp(0.0, maxval as f64) as u32;
        match depth {
            PgmDepth::Eight => out.write_all(&[q as u8])?,
            PgmDepth::Sixteen => out.write_all(&(q as u16).to_be_bytes())?,
        }
    }
    out.flush()?;
    Ok(())
}

/// Read a binary PGM back to luminance values in `[0, lum_scale]`.
pub fn read_pgm(path: &Path, lum_scale: f64) -> Result<Array2<f64>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        // Skip whitespace and `#` comment lines between header tokens.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(malformed(path, "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(&bytes)? != "P5" {
        return Err(malformed(path, "not a binary PGM (expected P5)"));
    }
    let parse = |s: String| s.parse::<usize>().map_err(|_| malformed(path, "bad header number"));
    let w = parse(token(&bytes)?)?;
    let h = parse(token(&bytes)?)?;
    let maxval = parse(token(&bytes)?)?;
    if maxval == 0 || maxval > 65535 {
        return Err(malformed(path, format!("unsupported maxval {maxval}")));
    }
    pos += 1; // single whitespace byte after maxval
    let n = w * h;
    let wide = maxval > 255;
    let need = n * if wide { 2 } else { 1 };
    if bytes.len() < pos + need {
        return Err(malformed(path, "truncated pixel data"));
    }
    let data: Vec<f64> = (0..n)
        .map(|i| {
            let raw = if wide {
                u16::from_be_bytes([bytes[pos + 2 * i], bytes[pos + 2 * i + 1]]) as f64
            } else {
                bytes[pos + i] as f64
            };
            raw / maxval as f64 * lum_scale
        })
        .collect();
    Array2::from_shape_vec((h, w), data).map_err(|e| malformed(path, e.to_string()))
}

// ---------------------------------------------------------------------------
// Stimulus frame stacks: PGM directory + labels CSV sidecar

/// Persist a stimulus sequence as `frame_NNNNN.pgm` files plus `labels.csv`.
///
/// The labels file carries the sequence metadata needed to reload (frame
/// rate, luminance scale) as `#`-prefixed header comments.
pub fn write_frames(dir: &Path, stim: &StimulusSequence, depth: PgmDepth) -> Result<()> {
    stim.validate()?;
    std::fs::create_dir_all(dir)?;
    let lum_scale = stim
        .frames
        .iter()
        .flat_map(|f| f.iter())
        .fold(0.0f64, |m, &v| m.max(v))
        .max(f64::MIN_POSITIVE);
    for (i, frame) in stim.frames.iter().enumerate() {
        write_pgm(&dir.join(format!("frame_{i:05}.pgm")), frame, lum_scale, depth)?;
    }
    let mut out = BufWriter::new(File::create(dir.join("labels.csv"))?);
    writeln!(out, "# frame_rate_hz={}", stim.frame_rate_hz)?;
    writeln!(out, "# lum_scale={lum_scale}")?;
    writeln!(out, "frame_index,protocol_id,orientation_deg,phase_bin")?;
    for l in &stim.labels {
        writeln!(out, "{},{},{},{}", l.frame_index, l.protocol_id, l.orientation_deg, l.phase_bin)?;
    }
    out.flush()?;
    Ok(())
}

/// Reload a stimulus sequence written by [`write_frames`].
///
/// The continuous phase is not persisted; it is reconstructed as the phase-bin
/// midpoint assuming the bin count that produced the file.
pub fn read_frames(dir: &Path, n_phase_bins: u32) -> Result<StimulusSequence> {
    let labels_path = dir.join("labels.csv");
    let reader = BufReader::new(File::open(&labels_path)?);
    let mut frame_rate_hz = None;
    let mut lum_scale = None;
    let mut labels = Vec::new();
    let mut header_seen = false;
    for line in reader.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.trim().split_once('=') {
                match k.trim() {
                    "frame_rate_hz" => frame_rate_hz = v.trim().parse::<f64>().ok(),
                    "lum_scale" => lum_scale = v.trim().parse::<f64>().ok(),
                    _ => {}
                }
            }
            continue;
        }
        if !header_seen {
            header_seen = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(malformed(&labels_path, format!("expected 4 columns, got {}", fields.len())));
        }
        let bad = |what: &str| malformed(&labels_path, format!("unparsable {what}"));
        let phase_bin: u32 = fields[3].parse().map_err(|_| bad("phase_bin"))?;
        labels.push(FrameLabel {
            frame_index: fields[0].parse().map_err(|_| bad("frame_index"))?,
            protocol_id: fields[1].parse().map_err(|_| bad("protocol_id"))?,
            orientation_deg: fields[2].parse().map_err(|_| bad("orientation_deg"))?,
            phase: (phase_bin as f64 + 0.5) / n_phase_bins.max(1) as f64,
            phase_bin,
        });
    }
    let frame_rate_hz = frame_rate_hz.ok_or_else(|| malformed(&labels_path, "missing frame_rate_hz header"))?;
    let lum_scale = lum_scale.ok_or_else(|| malformed(&labels_path, "missing lum_scale header"))?;
    let frames: Vec<Array2<f64>> = (0..labels.len())
        .map(|i| read_pgm(&dir.join(format!("frame_{i:05}.pgm")), lum_scale))
        .collect::<Result<_>>()?;
    let stim = StimulusSequence { frames, frame_rate_hz, labels };
    stim.validate()?;
    Ok(stim)
}

// ---------------------------------------------------------------------------
// Spike trains: CSV + metadata sidecar

/// Write spikes as `neuron_id,spike_time_s`, sorted by neuron then time.
/// The recording duration rides along as a `#` header comment.
pub fn write_spikes(path: &Path, spikes: &SpikeTrains) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "# recording_duration_s={}", spikes.recording_duration_s)?;
    writeln!(out, "neuron_id,spike_time_s")?;
    for (i, train) in spikes.trains.iter().enumerate() {
        for &t in train {
            writeln!(out, "{},{}", spikes.neuron_ids[i], t)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Write the neuron-position sidecar: `neuron_id,x_um,y_um`.
pub fn write_spike_metadata(path: &Path, spikes: &SpikeTrains) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "neuron_id,x_um,y_um")?;
    for (i, &id) in spikes.neuron_ids.iter().enumerate() {
        let (x, y) = spikes.positions_um[i];
        writeln!(out, "{id},{x},{y}")?;
    }
    out.flush()?;
    Ok(())
}

/// Read spikes plus the metadata sidecar back into a [`SpikeTrains`].
pub fn read_spikes(path: &Path, meta_path: &Path) -> Result<SpikeTrains> {
    let mut neuron_ids = Vec::new();
    let mut positions_um = Vec::new();
    let meta = BufReader::new(File::open(meta_path)?);
    for (i, line) in meta.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || i == 0 && line.starts_with("neuron_id") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(malformed(meta_path, "expected neuron_id,x_um,y_um"));
        }
        let bad = || malformed(meta_path, "unparsable metadata row");
        neuron_ids.push(fields[0].parse::<u64>().map_err(|_| bad())?);
        positions_um.push((
            fields[1].parse::<f64>().map_err(|_| bad())?,
            fields[2].parse::<f64>().map_err(|_| bad())?,
        ));
    }
    let index_of: std::collections::HashMap<u64, usize> =
        neuron_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    if index_of.len() != neuron_ids.len() {
        return Err(malformed(meta_path, "duplicate neuron ids"));
    }
    let mut trains: Vec<Vec<f64>> = vec![Vec::new(); neuron_ids.len()];
    let mut recording_duration_s = None;
    let reader = BufReader::new(File::open(path)?);
    let mut header_seen = false;
    for line in reader.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.trim().split_once('=') {
                if k.trim() == "recording_duration_s" {
                    recording_duration_s = v.trim().parse::<f64>().ok();
                }
            }
            continue;
        }
        if !header_seen {
            header_seen = true;
            continue;
        }
        let (id_s, t_s) = line
            .split_once(',')
            .ok_or_else(|| malformed(path, "expected neuron_id,spike_time_s"))?;
        let id: u64 = id_s.parse().map_err(|_| malformed(path, "unparsable neuron_id"))?;
        let t: f64 = t_s.parse().map_err(|_| malformed(path, "unparsable spike_time_s"))?;
        let &idx = index_of
            .get(&id)
            .ok_or_else(|| malformed(path, format!("neuron {id} missing from metadata")))?;
        trains[idx].push(t);
    }
    let recording_duration_s =
        recording_duration_s.ok_or_else(|| malformed(path, "missing recording_duration_s header"))?;
    for train in &trains {
        if train.windows(2).any(|w| w[1] <= w[0]) {
            return Err(malformed(path, "spike times not strictly increasing"));
        }
    }
    Ok(SpikeTrains { trains, neuron_ids, positions_um, recording_duration_s })
}

// ---------------------------------------------------------------------------
// RateMatrix: RGCR binary format + CSV export

const RGCR_MAGIC: &[u8; 4] = b"RGCR";
const RGCR_VERSION: u32 = 1;

fn w_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn w_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn r_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn r_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Write a rate matrix in the RGCR binary layout: magic, version, N_s, N_n,
/// row-major values, neuron ids, sample times, labels, then neuron positions,
/// bin width, and the standardization block.
pub fn write_rates(path: &Path, rates: &RateMatrix) -> Result<()> {
    rates.validate()?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(RGCR_MAGIC)?;
    out.write_all(&RGCR_VERSION.to_le_bytes())?;
    let (n_s, n_n) = rates.values.dim();
    w_u64(&mut out, n_s as u64)?;
    w_u64(&mut out, n_n as u64)?;
    for &v in rates.values.iter() {
        w_f64(&mut out, v)?;
    }
    for &id in &rates.neuron_ids {
        w_u64(&mut out, id)?;
    }
    for &t in &rates.sample_times_s {
        w_f64(&mut out, t)?;
    }
    for &l in &rates.labels {
        out.write_all(&l.to_le_bytes())?;
    }
    for &(x, y) in &rates.neuron_pos_um {
        w_f64(&mut out, x)?;
        w_f64(&mut out, y)?;
    }
    w_f64(&mut out, rates.bin_s)?;
    out.write_all(&[u8::from(rates.standardized)])?;
    if rates.standardized {
        let means = rates.col_means.as_ref().ok_or_else(|| CoreError::NotStandardized)?;
        let stds = rates.col_stds.as_ref().ok_or_else(|| CoreError::NotStandardized)?;
        for &m in means {
            w_f64(&mut out, m)?;
        }
        for &s in stds {
            w_f64(&mut out, s)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Read an RGCR rate file.
pub fn read_rates(path: &Path) -> Result<RateMatrix> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != RGCR_MAGIC {
        return Err(malformed(path, "bad magic bytes"));
    }
    let mut ver = [0u8; 4];
    r.read_exact(&mut ver)?;
    let version = u32::from_le_bytes(ver);
    if version != RGCR_VERSION {
        return Err(malformed(path, format!("unsupported version {version}")));
    }
    let n_s = r_u64(&mut r)? as usize;
    let n_n = r_u64(&mut r)? as usize;
    if n_s.checked_mul(n_n).is_none() || n_s * n_n > 1 << 32 {
        return Err(malformed(path, format!("implausible shape {n_s}x{n_n}")));
    }
    let mut data = Vec::with_capacity(n_s * n_n);
    for _ in 0..n_s * n_n {
        data.push(r_f64(&mut r)?);
    }
    let values =
        Array2::from_shape_vec((n_s, n_n), data).map_err(|e| malformed(path, e.to_string()))?;
    let mut neuron_ids = Vec::with_capacity(n_n);
    for _ in 0..n_n {
        neuron_ids.push(r_u64(&mut r)?);
    }
    let mut sample_times_s = Vec::with_capacity(n_s);
    for _ in 0..n_s {
        sample_times_s.push(r_f64(&mut r)?);
    }
    let mut labels = Vec::with_capacity(n_s);
    for _ in 0..n_s {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        labels.push(i64::from_le_bytes(b));
    }
    let mut neuron_pos_um = Vec::with_capacity(n_n);
    for _ in 0..n_n {
        let x = r_f64(&mut r)?;
        let y = r_f64(&mut r)?;
        neuron_pos_um.push((x, y));
    }
    let bin_s = r_f64(&mut r)?;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let standardized = flag[0] != 0;
    let (col_means, col_stds) = if standardized {
        let mut means = Vec::with_capacity(n_n);
        for _ in 0..n_n {
            means.push(r_f64(&mut r)?);
        }
        let mut stds = Vec::with_capacity(n_n);
        for _ in 0..n_n {
            stds.push(r_f64(&mut r)?);
        }
        (Some(means), Some(stds))
    } else {
        (None, None)
    };
    let rates = RateMatrix {
        values,
        sample_times_s,
        neuron_ids,
        neuron_pos_um,
        labels,
        standardized,
        col_means,
        col_stds,
        bin_s,
    };
    rates.validate().map_err(|e| malformed(path, e.to_string()))?;
    Ok(rates)
}

/// Human-readable CSV export: one row per sample, one column per neuron.
pub fn export_rates_csv(path: &Path, rates: &RateMatrix) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "sample_time_s,label")?;
    for id in &rates.neuron_ids {
        write!(out, ",n{id}")?;
    }
    writeln!(out)?;
    for (i, row) in rates.values.rows().into_iter().enumerate() {
        write!(out, "{},{}", rates.sample_times_s[i], rates.labels[i])?;
        for &v in row.iter() {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Evaluation exports

#[derive(serde::Serialize)]
struct MiSummary<'a> {
    mi_bits: f64,
    normalized_mi: f64,
    h_states_bits: f64,
    h_labels_bits: f64,
    n_samples: usize,
    n_distinct_states: usize,
    estimator: &'a str,
}

/// JSON summary of an MI report (without the contingency table).
pub fn write_mi_report_json(path: &Path, report: &MiReport) -> Result<()> {
    let summary = MiSummary {
        mi_bits: report.mi_bits,
        normalized_mi: report.normalized_mi,
        h_states_bits: report.h_states_bits,
        h_labels_bits: report.h_labels_bits,
        n_samples: report.n_samples,
        n_distinct_states: report.n_distinct_states,
        estimator: "plug-in",
    };
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| CoreError::invalid("mi_report", e.to_string()))?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

/// Contingency counts, one row per observed (state_key, label) pair,
/// sorted for stable output.
pub fn write_mi_contingency_csv(path: &Path, report: &MiReport) -> Result<()> {
    let mut rows: Vec<(&String, &i64, &u64)> =
        report.contingency.iter().map(|((s, l), c)| (s, l, c)).collect();
    rows.sort();
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "state_key,label,count")?;
    for (s, l, c) in rows {
        writeln!(out, "{s},{l},{c}")?;
    }
    out.flush()?;
    Ok(())
}

/// Triggered-average image as PGM plus a JSON sidecar describing the trigger.
pub fn write_triggered_average(
    pgm_path: &Path,
    json_path: &Path,
    avg: &TriggeredAverage,
    lum_scale: f64,
) -> Result<()> {
    write_pgm(pgm_path, &avg.image, lum_scale, PgmDepth::Sixteen)?;
    let sidecar = serde_json::json!({
        "trigger": avg.trigger.to_string(),
        "n_contributing": avg.n_contributing,
        "lum_scale": lum_scale,
    });
    std::fs::write(json_path, serde_json::to_string_pretty(&sidecar).unwrap() + "\n")?;
    Ok(())
}
