//! Synthetic benchmark: per-second tone bursts whose loudness tracks the
//! ground-truth highlight curve, with uninformative visual features.

use std::path::{Path, PathBuf};

use dualpath_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, Waveform, SAMPLE_RATE};
use crate::dft::write_dft;
use crate::error::{Error, Result};
use crate::manifest::{Manifest, ManifestRecord};
use crate::metrics::spearman_rho;

/// Minimum Spearman correlation between per-second burst energy and gt.
pub const MIN_ENERGY_RHO: f64 = 0.9;

const RAMP_SECONDS: f64 = 0.005;
const SEMANTIC_DECAY: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_videos: usize,
    pub t_f_min: usize,
    pub t_f_max: usize,
    pub events_per_video: usize,
    /// Peak burst amplitude at the top of an event.
    pub burst_amplitude: f64,
    /// Burst amplitude in eventless seconds, as a fraction of `burst_amplitude`.
    pub burst_floor: f64,
    /// Burst length in seconds.
    pub burst_duration: f64,
    pub carrier_low: f64,
    pub carrier_high: f64,
    /// Standard deviation, in seconds, of the Gaussian smoothing events into gt.
    pub label_width: f64,
    /// Standard deviation of the white noise bed.
    pub noise_floor: f64,
    pub d_v: usize,
    pub d_s: usize,
    pub semantic_event_weight: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_videos: 220,
            t_f_min: 8,
            t_f_max: 12,
            events_per_video: 2,
            burst_amplitude: 0.5,
            burst_floor: 0.05,
            burst_duration: 0.25,
            carrier_low: 400.0,
            carrier_high: 2400.0,
            label_width: 1.0,
            noise_floor: 0.005,
            d_v: 8,
            d_s: 16,
            semantic_event_weight: 0.3,
            val_fraction: 0.15,
            test_fraction: 0.15,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("synth: {msg}")));
        let nyquist = SAMPLE_RATE as f64 / 2.0;
        if self.n_videos == 0 {
            return bad("n_videos must be positive");
        }
        if self.t_f_min < 2 || self.t_f_min > self.t_f_max {
            return bad("need 2 <= t_f_min <= t_f_max");
        }
        if !(self.burst_duration > 0.0 && self.burst_duration < 0.9) {
            return bad("burst_duration must lie in (0, 0.9) seconds");
        }
        if !(self.burst_amplitude > 0.0 && self.burst_amplitude <= 1.0) {
            return bad("burst_amplitude must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.burst_floor) {
            return bad("burst_floor must lie in [0, 1]");
        }
        if !(self.carrier_low > 0.0 && self.carrier_low <= self.carrier_high && 1.5 * self.carrier_high < nyquist) {
            return bad("carrier band must satisfy 0 < low <= high and 1.5 * high < 8000");
        }
        if !(self.label_width > 0.0) || self.noise_floor < 0.0 || self.semantic_event_weight < 0.0 {
            return bad("label_width must be positive; noise_floor and semantic_event_weight nonnegative");
        }
        if self.d_v == 0 || self.d_s == 0 {
            return bad("feature dims must be positive");
        }
        let (v, t) = (self.val_fraction, self.test_fraction);
        if v < 0.0 || t < 0.0 || v + t >= 1.0 {
            return bad("val_fraction + test_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Smoothed event indicator per second, scaled to max 1; all zeros without events.
pub fn highlight_curve(centers: &[f64], t_f: usize, width: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..t_f)
        .map(|s| {
            let mid = s as f64 + 0.5;
            centers
                .iter()
                .map(|c| (-(mid - c).powi(2) / (2.0 * width * width)).exp())
                .sum()
        })
        .collect();
    let peak = raw.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        raw.iter().map(|v| v / peak).collect()
    } else {
        raw
    }
}

/// One generated video, before it is written to disk.
#[derive(Debug, Clone)]
pub struct SynthVideo {
    pub t_f: usize,
    pub gt: Vec<f64>,
    pub wave: Waveform,
    /// Per-second energy of the burst component alone.
    pub burst_energy: Vec<f64>,
    pub visual: Tensor,
    pub semantic: Tensor,
    pub degenerate: bool,
}

pub fn generate_video(spec: &SynthSpec, index: usize, direction: &[f64]) -> SynthVideo {
    let mut rng = stream(spec.seed, 2 + index as u64);
    let t_f = rng.random_range(spec.t_f_min..=spec.t_f_max);
    let centers: Vec<f64> = (0..spec.events_per_video)
        .map(|_| rng.random_range(0.0..t_f as f64))
        .collect();
    let gt = highlight_curve(&centers, t_f, spec.label_width);
    let carrier = rng.random_range(spec.carrier_low..=spec.carrier_high);

    let sr = SAMPLE_RATE as usize;
    let len = (spec.burst_duration * sr as f64).round() as usize;
    let ramp = ((RAMP_SECONDS * sr as f64) as usize).clamp(1, len / 2);
    let shape: Vec<f64> = (0..len)
        .map(|n| {
            let env = (n.min(len - 1 - n) as f64 / ramp as f64).min(1.0);
            let ph = 2.0 * std::f64::consts::PI * carrier * n as f64 / sr as f64;
            env * (0.7 * ph.sin() + 0.3 * (1.5 * ph).sin())
        })
        .collect();
    let unit_energy: f64 = shape.iter().map(|v| v * v).sum();

    let noise = Normal::new(0.0, spec.noise_floor).expect("validated noise floor");
    let mut samples: Vec<f64> = (0..t_f * sr).map(|_| noise.sample(&mut rng)).collect();
    let latest = 0.95 - spec.burst_duration;
    let mut burst_energy = Vec::with_capacity(t_f);
    for (s, g) in gt.iter().enumerate() {
        let amp = spec.burst_amplitude * (spec.burst_floor + (1.0 - spec.burst_floor) * g);
        let start = s * sr + (rng.random_range(0.05..latest.max(0.051)) * sr as f64) as usize;
        for (x, v) in samples[start..start + len].iter_mut().zip(&shape) {
            *x += amp * v;
        }
        burst_energy.push(amp * amp * unit_energy);
    }
    samples.iter_mut().for_each(|x| *x = x.clamp(-1.0, 1.0));

    let visual = Tensor::from_fn(&[t_f, spec.d_v], |_| StandardNormal.sample(&mut rng));
    let mut state: Vec<f64> = (0..spec.d_s).map(|_| StandardNormal.sample(&mut rng)).collect();
    let innovation = (1.0 - SEMANTIC_DECAY * SEMANTIC_DECAY).sqrt();
    let mut semantic = Vec::with_capacity(t_f * spec.d_s);
    for g in &gt {
        for (z, u) in state.iter_mut().zip(direction) {
            let e: f64 = StandardNormal.sample(&mut rng);
            *z = SEMANTIC_DECAY * *z + innovation * e;
            semantic.push(*z + spec.semantic_event_weight * g * u);
        }
    }

    SynthVideo {
        t_f,
        degenerate: spec.events_per_video == 0,
        gt,
        wave: Waveform::new(samples, SAMPLE_RATE).expect("finite samples"),
        burst_energy,
        visual,
        semantic: Tensor::new(&[t_f, spec.d_s], semantic).expect("shape matches"),
    }
}

/// Split labels by a seeded permutation: test first, then val, rest train.
pub fn split_labels(spec: &SynthSpec) -> Vec<&'static str> {
    let n = spec.n_videos;
    let n_test = (spec.test_fraction * n as f64).round() as usize;
    let n_val = ((spec.val_fraction * n as f64).round() as usize).min(n - n_test);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream(spec.seed, 1);
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let mut labels = vec!["train"; n];
    for (pos, &i) in order.iter().enumerate() {
        if pos < n_test {
            labels[i] = "test";
        } else if pos < n_test + n_val {
            labels[i] = "val";
        }
    }
    labels
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub manifest_path: PathBuf,
    pub records: Vec<ManifestRecord>,
    /// Smallest burst-energy vs gt Spearman correlation over non-degenerate videos.
    pub min_energy_rho: Option<f64>,
}

/// Generates the dataset into `out_dir` and writes `manifest.jsonl` there.
pub fn synth_dataset(spec: &SynthSpec, out_dir: &Path) -> Result<SynthOutput> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = stream(spec.seed, 0);
    let direction: Vec<f64> = (0..spec.d_s).map(|_| StandardNormal.sample(&mut rng)).collect();
    let labels = split_labels(spec);
    let width = spec.n_videos.saturating_sub(1).to_string().len().max(3);

    let results: Vec<Result<(ManifestRecord, Option<f64>)>> = (0..spec.n_videos)
        .into_par_iter()
        .map(|i| {
            let video = generate_video(spec, i, &direction);
            let id = format!("vid{i:0width$}");
            let rho = if video.degenerate {
                None
            } else {
                let rho = spearman_rho(&video.burst_energy, &video.gt)
                    .map_err(|e| Error::Data(format!("{id}: burst energy check: {e}")))?;
                if rho < MIN_ENERGY_RHO {
                    return Err(Error::Data(format!(
                        "{id}: burst energy vs gt Spearman {rho:.3} below {MIN_ENERGY_RHO}"
                    )));
                }
                Some(rho)
            };
            let dir = out_dir.join(&id);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            write_dft(&dir.join("visual.dft"), &video.visual)?;
            write_dft(&dir.join("semantic.dft"), &video.semantic)?;
            let gt = Tensor::new(&[video.t_f], video.gt.clone()).expect("shape matches");
            write_dft(&dir.join("gt.dft"), &gt)?;
            let wav = dir.join("audio.wav");
            write_wav(&wav, &video.wave).map_err(|e| Error::io(&wav, e))?;
            let record = ManifestRecord {
                t_f: video.t_f,
                visual: format!("{id}/visual.dft"),
                semantic: format!("{id}/semantic.dft"),
                waveform: format!("{id}/audio.wav"),
                gt: format!("{id}/gt.dft"),
                split: labels[i].to_string(),
                spectrogram: None,
                degenerate: video.degenerate,
                id,
            };
            Ok((record, rho))
        })
        .collect();

    let mut records = Vec::with_capacity(spec.n_videos);
    let mut min_rho: Option<f64> = None;
    for r in results {
        let (record, rho) = r?;
        if let Some(rho) = rho {
            min_rho = Some(min_rho.map_or(rho, |m| m.min(rho)));
        }
        records.push(record);
    }
    let manifest_path = out_dir.join("manifest.jsonl");
    Manifest::write(&manifest_path, &records)?;
    Ok(SynthOutput {
        manifest_path,
        records,
        min_energy_rho: min_rho,
    })
}
