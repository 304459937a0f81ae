//! Pipeline stages: simulate, rates, train, eval, report. Each stage reads
//! only the previous stage's files, writes its outputs under the run
//! directory, and records output digests in the manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rgc_core::eval as ev;
use rgc_core::io;
use rgc_core::mcrbm;
use rgc_core::rates as rt;
use rgc_core::retinasim as rs;
use rgc_core::stimgen as sg;

use crate::config::{DatasetPlan, ExperimentConfig, Protocol, SequenceKind};
use crate::error::{PipelineError, Result};
use crate::manifest::{atomic_write, digest_outputs, RunManifest};

pub struct Runner {
    pub cfg: ExperimentConfig,
    pub patch_filter: Option<Vec<u32>>,
}

/// Deterministic interleaved train/held-out split: with fraction 1/m, every
/// m-th sample is held out.
pub fn holdout_mask(n: usize, holdout_fraction: f64) -> Vec<bool> {
    let m = (1.0 / holdout_fraction).round().max(2.0) as usize;
    (0..n).map(|i| i % m == m - 1).collect()
}

fn pearson(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let n = a.len() as f64;
    let ma = a.sum() / n;
    let mb = b.sum() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b.iter()) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

fn pixel_std(img: &Array2<f64>) -> f64 {
    let n = img.len() as f64;
    let mean = img.sum() / n;
    (img.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

impl Runner {
    pub fn new(cfg: ExperimentConfig, patch_filter: Option<Vec<u32>>) -> Result<Runner> {
        cfg.validate()?;
        Ok(Runner { cfg, patch_filter })
    }

    fn keep_patch(&self, id: u32) -> bool {
        self.patch_filter.as_ref().is_none_or(|f| f.contains(&id))
    }

    fn dir(&self, sub: &str) -> PathBuf {
        self.cfg.out_dir.join(sub)
    }

    fn record(&self, stage: &str, dirs: &[&str], started: Instant) -> Result<()> {
        let mut manifest = RunManifest::load_or_new(&self.cfg.out_dir, &self.cfg.sha256());
        let files = digest_outputs(&self.cfg.out_dir, dirs)?;
        manifest.record_stage(stage, files, started.elapsed().as_millis() as u64);
        manifest.save(&self.cfg.out_dir)
    }

    // -- simulate ----------------------------------------------------------

    pub fn simulate(&self) -> Result<()> {
        self.simulate_inner().map_err(|e| e.in_stage("simulate"))
    }

    fn simulate_inner(&self) -> Result<()> {
        let started = Instant::now();
        let cfg = &self.cfg;
        std::fs::create_dir_all(self.dir("stim"))?;
        std::fs::create_dir_all(self.dir("spikes"))?;
        let ranges = rs::RfParamRanges {
            region_rows: cfg.retina.region_rows,
            region_cols: cfg.retina.region_cols,
            off_fraction: cfg.retina.off_fraction,
            ..rs::RfParamRanges::default()
        };
        let base = rs::make_population(cfg.retina.n_neurons, &ranges, cfg.subseed("population", 0))?;
        let opts = rs::RespondOptions {
            nonlinearity: cfg.retina.nonlinearity.parse()?,
            rate_cap_hz: cfg.retina.rate_cap_hz,
            um_per_pixel: cfg.stimulus.um_per_pixel,
        };
        for ds in cfg.datasets() {
            let retina = rs::apply_impairment(&base, rs::ImpairmentLevel::for_stage(ds.stage))?;
            for (si, seq) in ds.sequences.iter().enumerate() {
                let stim = self.build_stimulus(seq)?;
                let stim_dir = self.dir(&format!("stim/{}/{}", ds.name, seq.name));
                io::write_frames(&stim_dir, &stim, io::PgmDepth::Sixteen)?;
                let duration = stim.duration_s();
                // Keyed by seed group, not dataset: blockade stages replay
                // the same RNG streams, giving paired recordings of one
                // retina that differ only through the impairment.
                let seed = cfg.subseed(&format!("respond:{}", ds.seed_group), si as u64);
                let spikes = rs::respond(&retina, &stim, duration, seed, &opts)?;
                let spikes_dir = self.dir(&format!("spikes/{}", ds.name));
                std::fs::create_dir_all(&spikes_dir)?;
                io::write_spikes(&spikes_dir.join(format!("{}.csv", seq.name)), &spikes)?;
                io::write_spike_metadata(
                    &spikes_dir.join(format!("{}.neurons.csv", seq.name)),
                    &spikes,
                )?;
                log::info!(
                    "simulate {}/{}: {} frames, {} spikes",
                    ds.name,
                    seq.name,
                    stim.n_frames(),
                    spikes.total_spikes()
                );
            }
        }
        self.record("simulate", &["stim", "spikes"], started)
    }

    fn build_stimulus(&self, seq: &crate::config::SequencePlan) -> Result<sg::StimulusSequence> {
        let s = &self.cfg.stimulus;
        let mut stim = match &seq.kind {
            SequenceKind::Grating(spec) => {
                let mut spec = spec.clone();
                spec.duration_s = seq.duration_s;
                sg::gen_grating(&spec, s.height, s.width, s.frame_rate_hz, s.n_phase_bins)?
            }
            SequenceKind::NaturalScan => {
                let image = match &s.image_path {
                    Some(p) => io::read_pgm(p, 2.0 * s.mean_luminance)?,
                    None => synth_image(
                        2 * s.height,
                        2 * s.width,
                        s.mean_luminance,
                        self.cfg.subseed("natural_image", 0),
                    ),
                };
                let n_frames = ((seq.duration_s * s.frame_rate_hz).round() as usize).max(2);
                let (ih, iw) = image.dim();
                let center = (iw as f64 / 2.0, ih as f64 / 2.0);
                let rx = (iw as f64 - s.width as f64) / 2.0 - 1.0;
                let ry = (ih as f64 - s.height as f64) / 2.0 - 1.0;
                if rx < 1.0 || ry < 1.0 {
                    return Err(PipelineError::Config(format!(
                        "natural image {ih}x{iw} too small for a {}x{} scan window",
                        s.height, s.width
                    )));
                }
                let path = sg::ellipse_trajectory(n_frames - 1, center, rx, ry);
                sg::gen_natural_scan(&image, &path, (s.height, s.width), s.frame_rate_hz, s.n_phase_bins)?
            }
        };
        stim.set_protocol_id(seq.orientation_id);
        Ok(stim)
    }

    // -- rates -------------------------------------------------------------

    pub fn rates(&self) -> Result<()> {
        self.rates_inner().map_err(|e| e.in_stage("rates"))
    }

    fn load_dataset_stim(&self, ds: &DatasetPlan) -> Result<sg::StimulusSequence> {
        let parts: Vec<sg::StimulusSequence> = ds
            .sequences
            .iter()
            .map(|seq| {
                let dir = self.dir(&format!("stim/{}/{}", ds.name, seq.name));
                io::read_frames(&dir, self.cfg.stimulus.n_phase_bins as u32)
            })
            .collect::<rgc_core::Result<_>>()?;
        Ok(sg::StimulusSequence::concat(&parts)?)
    }

    fn rates_inner(&self) -> Result<()> {
        let started = Instant::now();
        let cfg = &self.cfg;
        let method: rt::RateMethod = cfg.rates.method.parse()?;
        let scheme = cfg.label_scheme()?;
        for ds in cfg.datasets() {
            // Per-sequence estimation, then rows stacked with time offsets
            // matching the concatenated stimulus.
            let mut pooled: Option<rt::RateMatrix> = None;
            let mut offset = 0.0;
            for seq in &ds.sequences {
                let spikes_path = self.dir(&format!("spikes/{}/{}.csv", ds.name, seq.name));
                let meta_path = self.dir(&format!("spikes/{}/{}.neurons.csv", ds.name, seq.name));
                if !spikes_path.exists() {
                    return Err(PipelineError::Other(format!(
                        "missing spike file {} (run simulate first)",
                        spikes_path.display()
                    )));
                }
                let spikes = io::read_spikes(&spikes_path, &meta_path)?;
                let mut rm = rt::estimate_rates(&spikes, cfg.rates.bin_s, method, cfg.rates.bandwidth_s)?;
                for t in &mut rm.sample_times_s {
                    *t += offset;
                }
                offset += spikes.recording_duration_s;
                pooled = Some(match pooled {
                    None => rm,
                    Some(acc) => stack_rates(acc, rm)?,
                });
            }
            let pooled = pooled.expect("datasets have at least one sequence");
            let stim = self.load_dataset_stim(&ds)?;
            let aligned = rt::align_labels(&pooled, &stim, scheme, cfg.eval.n_phase_bins)?;
            let selected = rt::select_active(&aligned, cfg.rates.threshold).map_err(|e| {
                PipelineError::Other(format!("dataset {}: {e}", ds.name))
            })?;
            let removed = aligned.n_neurons() - selected.n_neurons();
            let patches = rt::partition_patches(&selected)?;
            let ds_dir = self.dir(&format!("rates/{}", ds.name));
            std::fs::create_dir_all(&ds_dir)?;
            let mut report = String::from("key,arg,value\n");
            report.push_str(&format!("total_neurons,,{}\n", aligned.n_neurons()));
            report.push_str(&format!("kept,,{}\n", selected.n_neurons()));
            report.push_str(&format!("removed,,{removed}\n"));
            for (&patch, rm) in &patches {
                report.push_str(&format!("patch,{patch},{}\n", rm.n_neurons()));
                if !self.keep_patch(patch) {
                    continue;
                }
                let standardized = rt::standardize(rm).map_err(|e| {
                    PipelineError::Other(format!("dataset {} patch {patch}: {e}", ds.name))
                })?;
                io::write_rates(&ds_dir.join(format!("patch_{patch:02}.rgcr")), &standardized)?;
            }
            for patch in 0..16u32 {
                if !patches.contains_key(&patch) {
                    log::info!("dataset {}: patch {patch} has no surviving neurons, skipped", ds.name);
                }
            }
            atomic_write(&ds_dir.join("selection.csv"), report.as_bytes())?;
        }
        self.record("rates", &["rates"], started)
    }

    // -- train -------------------------------------------------------------

    pub fn train(&self) -> Result<()> {
        self.train_inner().map_err(|e| e.in_stage("train"))
    }

    fn patch_files(&self, stage_dir: &str, ds: &DatasetPlan, ext: &str) -> Result<Vec<(u32, PathBuf)>> {
        let dir = self.dir(&format!("{stage_dir}/{}", ds.name));
        if !dir.is_dir() {
            return Err(PipelineError::Other(format!(
                "missing {} outputs for dataset {} (expected {})",
                stage_dir,
                ds.name,
                dir.display()
            )));
        }
        let mut out = Vec::new();
        for patch in 0..16u32 {
            let path = dir.join(format!("patch_{patch:02}{ext}"));
            if path.exists() && self.keep_patch(patch) {
                out.push((patch, path));
            }
        }
        if out.is_empty() {
            return Err(PipelineError::Other(format!(
                "no patch files under {} match the requested patches",
                dir.display()
            )));
        }
        Ok(out)
    }

    fn train_inner(&self) -> Result<()> {
        let started = Instant::now();
        let cfg = &self.cfg;
        for ds in cfg.datasets() {
            let models_dir = self.dir(&format!("models/{}", ds.name));
            std::fs::create_dir_all(&models_dir)?;
            let mut curves = String::from("patch,epoch,recon_error,free_energy_gap\n");
            for (patch, path) in self.patch_files("rates", &ds, ".rgcr")? {
                let full = io::read_rates(&path)?;
                let mask = holdout_mask(full.n_samples(), cfg.eval.holdout_fraction);
                let train_rows = filter_rows(&full, |i| !mask[i]);
                // Same seed group, same initialization and PCD noise, so
                // paired blockade stages differ only through their data.
                let seed = cfg.subseed(&format!("train:{}", ds.seed_group), patch as u64);
                let hyper = cfg.model.to_hyperparams(train_rows.n_neurons(), seed);
                let (model, diags) = mcrbm::train(&train_rows, &hyper).map_err(|e| {
                    PipelineError::Other(format!("dataset {} patch {patch}: {e}", ds.name))
                })?;
                mcrbm::checkpoint::save(&model, &models_dir.join(format!("patch_{patch:02}.mcrb")))?;
                for d in &diags {
                    curves.push_str(&format!(
                        "{patch},{},{},{}\n",
                        d.epoch, d.recon_error, d.free_energy_gap
                    ));
                }
                log::info!("train {}/patch {patch}: {} epochs done", ds.name, diags.len());
            }
            atomic_write(&models_dir.join("curves.csv"), curves.as_bytes())?;
        }
        self.record("train", &["models"], started)
    }

    // -- eval --------------------------------------------------------------

    pub fn eval(&self) -> Result<()> {
        self.eval_inner().map_err(|e| e.in_stage("eval"))
    }

    fn eval_inner(&self) -> Result<()> {
        let started = Instant::now();
        let cfg = &self.cfg;
        let scheme = cfg.label_scheme()?;
        // dataset -> mean normalized MI over patches, for the stage verdict.
        let mut dataset_mi: BTreeMap<String, f64> = BTreeMap::new();
        for ds in cfg.datasets() {
            let stim = self.load_dataset_stim(&ds)?;
            let frame_labels = sg::label_frames(&stim, scheme, cfg.eval.n_phase_bins)?;
            let lum_scale = stim
                .frames
                .iter()
                .flat_map(|f| f.iter())
                .fold(0.0f64, |m, &v| m.max(v))
                .max(f64::MIN_POSITIVE);
            let eval_dir = self.dir(&format!("eval/{}", ds.name));
            std::fs::create_dir_all(&eval_dir)?;
            let mut patch_mis = Vec::new();
            for (patch, rates_path) in self.patch_files("rates", &ds, ".rgcr")? {
                let model_path = self.dir(&format!("models/{}/patch_{patch:02}.mcrb", ds.name));
                if !model_path.exists() {
                    return Err(PipelineError::Other(format!(
                        "missing checkpoint {} (run train first)",
                        model_path.display()
                    )));
                }
                let rates = io::read_rates(&rates_path)?;
                let model = mcrbm::checkpoint::load(&model_path)?;
                let mi = self.eval_patch(&ds, patch, &rates, &model, &stim, &frame_labels, lum_scale, &eval_dir)?;
                patch_mis.push(mi);
            }
            let mean_mi = patch_mis.iter().sum::<f64>() / patch_mis.len() as f64;
            dataset_mi.insert(ds.name.clone(), mean_mi);
        }
        if cfg.protocol == Protocol::Gaba3 {
            self.write_gaba_verdict(&dataset_mi)?;
        }
        self.record("eval", &["eval"], started)
    }

    #[allow(clippy::too_many_arguments)]
    fn eval_patch(
        &self,
        ds: &DatasetPlan,
        patch: u32,
        rates: &rt::RateMatrix,
        model: &mcrbm::McRbmModel,
        stim: &sg::StimulusSequence,
        frame_labels: &[i64],
        lum_scale: f64,
        eval_dir: &Path,
    ) -> Result<f64> {
        let cfg = &self.cfg;
        let n = rates.n_samples();
        let mut states = Vec::with_capacity(n);
        for row in rates.values.rows() {
            states.push(model.encode(&row, mcrbm::EncodeMode::Map)?);
        }
        let mask = holdout_mask(n, cfg.eval.holdout_fraction);
        let held_states: Vec<mcrbm::LatentState> = states
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(s, _)| s.clone())
            .collect();
        let held_labels: Vec<i64> = rates
            .labels
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(&l, _)| l)
            .collect();
        let report = ev::mutual_information(&held_states, &held_labels, cfg.eval.miller_madow)?;
        io::write_mi_report_json(&eval_dir.join(format!("patch_{patch:02}.mi.json")), &report)?;
        io::write_mi_contingency_csv(
            &eval_dir.join(format!("patch_{patch:02}.contingency.csv")),
            &report,
        )?;

        // Top-occupancy state-triggered averages over all samples.
        let mut top_states_json = Vec::new();
        for (rank, (key, count)) in ev::top_states(&states, cfg.eval.top_k).into_iter().enumerate() {
            if (count as usize) < cfg.eval.min_count {
                log::info!(
                    "dataset {} patch {patch}: state {key} occupies only {count} samples, no average",
                    ds.name
                );
                continue;
            }
            let sta = ev::state_triggered_average(
                &states,
                &rates.sample_times_s,
                stim,
                &key,
                cfg.eval.min_count,
            )?;
            // Dominant label among this state's samples, and the mean frame
            // of that label for comparison.
            let mut label_counts: BTreeMap<i64, u64> = BTreeMap::new();
            for (s, &l) in states.iter().zip(&rates.labels) {
                if s.key() == key {
                    *label_counts.entry(l).or_insert(0) += 1;
                }
            }
            let (&dominant, _) = label_counts.iter().max_by_key(|(_, &c)| c).unwrap();
            let mut label_mean = Array2::<f64>::zeros(stim.frame_dim());
            let mut n_frames = 0usize;
            for (f, &l) in frame_labels.iter().enumerate() {
                if l == dominant {
                    label_mean += &stim.frames[f];
                    n_frames += 1;
                }
            }
            let r = if n_frames > 0 {
                label_mean /= n_frames as f64;
                pearson(&sta.image, &label_mean)
            } else {
                0.0
            };
            let pgm = format!("patch_{patch:02}_state_{rank}.pgm");
            io::write_triggered_average(
                &eval_dir.join(&pgm),
                &eval_dir.join(format!("patch_{patch:02}_state_{rank}.json")),
                &sta,
                lum_scale,
            )?;
            top_states_json.push(serde_json::json!({
                "key": key,
                "count": count,
                "dominant_label": dominant,
                "pearson_r_vs_label_mean": r,
                "image": pgm,
            }));
        }

        // Per-unit averages (units that are on often enough).
        let mean_frame = stim.mean_frame();
        let base_std = pixel_std(&mean_frame);
        let mut n_units_with_structure = 0usize;
        let mut n_unit_images = 0usize;
        for (layer, count) in [
            (ev::HiddenLayer::Mean, model.hyper.n_mean),
            (ev::HiddenLayer::Cov, model.hyper.n_cov),
        ] {
            for unit in 0..count {
                match ev::unit_triggered_average(
                    &states,
                    &rates.sample_times_s,
                    stim,
                    layer,
                    unit,
                    1,
                    cfg.eval.min_count,
                ) {
                    Ok(avg) => {
                        if pixel_std(&avg.image) > base_std {
                            n_units_with_structure += 1;
                        }
                        let stem = format!("patch_{patch:02}_{}_{unit:03}", layer.name());
                        io::write_triggered_average(
                            &eval_dir.join(format!("{stem}.pgm")),
                            &eval_dir.join(format!("{stem}.json")),
                            &avg,
                            lum_scale,
                        )?;
                        n_unit_images += 1;
                    }
                    Err(rgc_core::CoreError::InsufficientOccupancy { .. }) => {}
                    Err(e) => return Err(e.into()),
                }
            }
        }

        let summary = serde_json::json!({
            "dataset": ds.name,
            "patch": patch,
            "n_samples": n,
            "n_holdout": held_labels.len(),
            "mi_bits": report.mi_bits,
            "normalized_mi": report.normalized_mi,
            "h_states_bits": report.h_states_bits,
            "h_labels_bits": report.h_labels_bits,
            "n_distinct_states_holdout": report.n_distinct_states,
            "n_distinct_states_all": ev::state_occupancy(&states).len(),
            "top_states": top_states_json,
            "n_unit_images": n_unit_images,
            "n_units_with_structure": n_units_with_structure,
            "mean_frame_pixel_std": base_std,
        });
        atomic_write(
            &eval_dir.join(format!("patch_{patch:02}.summary.json")),
            (serde_json::to_string_pretty(&summary).unwrap() + "\n").as_bytes(),
        )?;
        Ok(report.normalized_mi)
    }

    fn write_gaba_verdict(&self, dataset_mi: &BTreeMap<String, f64>) -> Result<()> {
        let cfg = &self.cfg;
        let mut csv = String::from("spatial_freq_cpd,stage,normalized_mi,ordered\n");
        for &freq in &cfg.stimulus.spatial_freqs_cpd {
            let stages = [
                rs::ImpairmentStage::None,
                rs::ImpairmentStage::GabacBlocked,
                rs::ImpairmentStage::GabaAbcBlocked,
            ];
            let mut table = Vec::new();
            for stage in stages {
                let name = format!("f{:03}_{}", (freq * 1000.0).round() as u32, stage.name());
                let mi = *dataset_mi.get(&name).ok_or_else(|| {
                    PipelineError::Other(format!("missing MI for dataset {name}"))
                })?;
                table.push((stage.name().to_string(), mi));
            }
            let verdict = ev::mi_by_stage(&table)?;
            for (stage, mi) in &verdict.table {
                csv.push_str(&format!("{freq},{stage},{mi},{}\n", verdict.ordered));
            }
        }
        atomic_write(&self.dir("eval/gaba_verdict.csv"), csv.as_bytes())
    }

    // -- report ------------------------------------------------------------

    pub fn report(&self) -> Result<()> {
        self.report_inner().map_err(|e| e.in_stage("report"))
    }

    fn report_inner(&self) -> Result<()> {
        let started = Instant::now();
        let cfg = &self.cfg;
        let manifest = RunManifest::load_or_new(&cfg.out_dir, &cfg.sha256());
        let now = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        // The timestamp stays on this single header line so identical runs
        // produce byte-identical reports below it.
        let mut out = format!("# generated unix_time={now}\n");
        out.push_str(&format!("protocol: {}\n", cfg.protocol.name()));
        out.push_str(&format!("seed: {}\n", cfg.seed));
        out.push_str(&format!("config_sha256: {}\n", cfg.sha256()));
        let expected = ["simulate", "rates", "train", "eval"];
        let missing: Vec<&str> = expected
            .iter()
            .filter(|s| !manifest.stages.contains_key(**s))
            .copied()
            .collect();
        if missing.is_empty() {
            out.push_str("stages: complete\n");
        } else {
            out.push_str(&format!("stages: MISSING {}\n", missing.join(", ")));
        }
        out.push_str("\ndataset,patch,normalized_mi,mi_bits,n_distinct_states,n_samples,n_holdout\n");
        let mut image_paths = Vec::new();
        let mut occupancy = Vec::new();
        for ds in cfg.datasets() {
            let eval_dir = self.dir(&format!("eval/{}", ds.name));
            for patch in 0..16u32 {
                let path = eval_dir.join(format!("patch_{patch:02}.summary.json"));
                if !path.exists() {
                    continue;
                }
                let text = std::fs::read_to_string(&path)?;
                let v: serde_json::Value = serde_json::from_str(&text)
                    .map_err(|e| PipelineError::Other(format!("{}: {e}", path.display())))?;
                out.push_str(&format!(
                    "{},{patch},{},{},{},{},{}\n",
                    ds.name,
                    v["normalized_mi"],
                    v["mi_bits"],
                    v["n_distinct_states_all"],
                    v["n_samples"],
                    v["n_holdout"],
                ));
                if let Some(tops) = v["top_states"].as_array() {
                    for t in tops {
                        occupancy.push(format!(
                            "{},{patch},{},{}",
                            ds.name,
                            t["key"].as_str().unwrap_or("?"),
                            t["count"]
                        ));
                        if let Some(img) = t["image"].as_str() {
                            image_paths.push(format!("eval/{}/{img}", ds.name));
                        }
                    }
                }
            }
        }
        out.push_str("\ntop state occupancy (dataset,patch,state,count):\n");
        for line in &occupancy {
            out.push_str(line);
            out.push('\n');
        }
        let verdict_path = self.dir("eval/gaba_verdict.csv");
        if verdict_path.exists() {
            out.push_str("\nimpairment verdict:\n");
            out.push_str(&std::fs::read_to_string(&verdict_path)?);
        }
        out.push_str("\nimages:\n");
        for p in &image_paths {
            out.push_str(p);
            out.push('\n');
        }
        atomic_write(&self.dir("report.txt"), out.as_bytes())?;
        self.record("report", &["report.txt"], started)
    }

    /// All stages in order.
    pub fn run(&self) -> Result<()> {
        self.simulate()?;
        self.rates()?;
        self.train()?;
        self.eval()?;
        self.report()
    }
}

/// Vertically stack two rate matrices over the same neurons; the second
/// matrix's sample times must continue past the first's.
fn stack_rates(a: rt::RateMatrix, b: rt::RateMatrix) -> Result<rt::RateMatrix> {
    if a.neuron_ids != b.neuron_ids || a.neuron_pos_um != b.neuron_pos_um {
        return Err(PipelineError::Other(
            "cannot pool rate matrices over different neuron sets".into(),
        ));
    }
    let values = ndarray::concatenate(
        ndarray::Axis(0),
        &[a.values.view(), b.values.view()],
    )
    .map_err(|e| PipelineError::Other(e.to_string()))?;
    let mut sample_times_s = a.sample_times_s;
    sample_times_s.extend_from_slice(&b.sample_times_s);
    let mut labels = a.labels;
    labels.extend_from_slice(&b.labels);
    let out = rt::RateMatrix {
        values,
        sample_times_s,
        neuron_ids: a.neuron_ids,
        neuron_pos_um: a.neuron_pos_um,
        labels,
        standardized: false,
        col_means: None,
        col_stds: None,
        bin_s: a.bin_s,
    };
    out.validate()?;
    Ok(out)
}

/// Keep the rows the predicate accepts (by sample index).
pub fn filter_rows(rm: &rt::RateMatrix, keep: impl Fn(usize) -> bool) -> rt::RateMatrix {
    let idx: Vec<usize> = (0..rm.n_samples()).filter(|&i| keep(i)).collect();
    let mut values = Array2::zeros((idx.len(), rm.n_neurons()));
    for (row, &i) in idx.iter().enumerate() {
        values.row_mut(row).assign(&rm.values.row(i));
    }
    rt::RateMatrix {
        values,
        sample_times_s: idx.iter().map(|&i| rm.sample_times_s[i]).collect(),
        neuron_ids: rm.neuron_ids.clone(),
        neuron_pos_um: rm.neuron_pos_um.clone(),
        labels: idx.iter().map(|&i| rm.labels[i]).collect(),
        standardized: rm.standardized,
        col_means: rm.col_means.clone(),
        col_stds: rm.col_stds.clone(),
        bin_s: rm.bin_s,
    }
}

/// Smooth value-noise image with the requested mean luminance, for natural
/// scans when no source photograph is configured.
pub fn synth_image(height: usize, width: usize, mean_luminance: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gh = 8.max(height / 16);
    let gw = 8.max(width / 16);
    let grid = Array2::from_shape_fn((gh + 1, gw + 1), |_| {
        mean_luminance * rng.random_range(0.3..1.7)
    });
    Array2::from_shape_fn((height, width), |(i, j)| {
        let y = i as f64 / height as f64 * gh as f64;
        let x = j as f64 / width as f64 * gw as f64;
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let a = grid[(y0, x0)] * (1.0 - fx) + grid[(y0, x0 + 1)] * fx;
        let b = grid[(y0 + 1, x0)] * (1.0 - fx) + grid[(y0 + 1, x0 + 1)] * fx;
        a * (1.0 - fy) + b * fy
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn holdout_mask_has_requested_density() {
        let mask = holdout_mask(1000, 0.25);
        let held = mask.iter().filter(|&&m| m).count();
        assert_eq!(held, 250);
        assert!(mask[3] && !mask[0] && !mask[2]);
        // Deterministic.
        assert_eq!(mask, holdout_mask(1000, 0.25));
    }

    #[test]
    fn pearson_basics() {
        let a = Array2::from_shape_fn((4, 4), |(i, j)| (i * 4 + j) as f64);
        assert!((pearson(&a, &a) - 1.0).abs() < 1e-12);
        let b = a.mapv(|v| -2.0 * v + 7.0);
        assert!((pearson(&a, &b) + 1.0).abs() < 1e-12);
        let c = Array2::from_elem((4, 4), 3.0);
        assert_eq!(pearson(&a, &c), 0.0);
    }

    #[test]
    fn synth_image_is_deterministic_and_positive() {
        let a = synth_image(64, 64, 1.36, 5);
        let b = synth_image(64, 64, 1.36, 5);
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| v > 0.0));
        let c = synth_image(64, 64, 1.36, 6);
        assert_ne!(a, c);
    }

    #[test]
    fn filter_rows_keeps_metadata() {
        let rm = rt::RateMatrix {
            values: Array2::from_shape_fn((6, 2), |(i, j)| (i * 2 + j) as f64),
            sample_times_s: (0..6).map(|i| i as f64 * 0.01 + 0.005).collect(),
            neuron_ids: vec![1, 2],
            neuron_pos_um: vec![(0.0, 0.0), (42.0, 0.0)],
            labels: (0..6).map(|i| i as i64).collect(),
            standardized: false,
            col_means: None,
            col_stds: None,
            bin_s: 0.01,
        };
        let kept = filter_rows(&rm, |i| i % 2 == 0);
        assert_eq!(kept.n_samples(), 3);
        assert_eq!(kept.labels, vec![0, 2, 4]);
        assert_eq!(kept.values[(1, 0)], 4.0);
        assert_eq!(kept.neuron_ids, rm.neuron_ids);
    }
}
