//! Dataset loading, the training loop, evaluation, ablation sweeps and k-fold splits.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use dualpath_tensor::{clip_global_norm, Adam, AdamConfig, NormMode, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{load_wav, spectrogram, FrontendParams};
use crate::dft::read_dft;
use crate::error::{Error, Result};
use crate::manifest::Manifest;
use crate::metrics::{format_table, MetricsSummary, VideoMetrics};
use crate::model::{mse_loss, Batch, FusionOp, Modalities, Model, ModelConfig, SaPlacement};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    MrHiSum,
    TvSum,
    Toy,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mrhisum" => Ok(Preset::MrHiSum),
            "tvsum" => Ok(Preset::TvSum),
            "toy" => Ok(Preset::Toy),
            _ => Err(Error::Config(format!("unknown preset {s:?}; expected mrhisum, tvsum or toy"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Seeds parameter initialization and per-epoch shuffling.
    pub seed: u64,
    pub manifest: PathBuf,
    pub train_split: String,
    pub val_split: String,
    pub test_split: String,
    pub model: ModelConfig,
    pub frontend: FrontendParams,
}

impl TrainConfig {
    pub fn preset(preset: Preset) -> Self {
        let base = |epochs, learning_rate, batch_size, model| TrainConfig {
            epochs,
            learning_rate,
            batch_size,
            weight_decay: 1e-4,
            clip_norm: 0.5,
            seed: 0,
            manifest: PathBuf::from("manifest.jsonl"),
            train_split: "train".into(),
            val_split: "val".into(),
            test_split: "test".into(),
            model,
            frontend: FrontendParams::default(),
        };
        match preset {
            Preset::MrHiSum => base(200, 1e-5, 16, ModelConfig::full(1024)),
            Preset::TvSum => base(400, 5e-6, 8, ModelConfig::full(512)),
            Preset::Toy => TrainConfig {
                frontend: FrontendParams {
                    hop: 512,
                    n_mels: 16,
                    ..FrontendParams::default()
                },
                // Stronger L2 than the full presets: the synthetic visual
                // stream is pure noise and the toy training set is small.
                weight_decay: 1e-2,
                ..base(50, 3e-3, 8, ModelConfig::toy())
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning_rate and weight_decay must be nonnegative".into()));
        }
        if self.frontend.n_mels != self.model.n_mels {
            return Err(Error::Config(format!(
                "frontend n_mels {} differs from model n_mels {}",
                self.frontend.n_mels, self.model.n_mels
            )));
        }
        self.model.validate()
    }

    /// Model configuration with the run seed as initializer seed.
    pub fn seeded_model(&self) -> ModelConfig {
        ModelConfig {
            init_seed: self.seed,
            ..self.model.clone()
        }
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// One video with every input stream loaded into memory.
#[derive(Debug, Clone)]
pub struct VideoData {
    pub id: String,
    pub split: String,
    pub t_f: usize,
    /// `[T_f, d_v]`.
    pub visual: Tensor,
    /// `[T_f, d_s]`.
    pub semantic: Tensor,
    /// `[F, T]` log-mel values.
    pub spectrogram: Tensor,
    pub gt: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub videos: Vec<VideoData>,
}

impl Dataset {
    /// Loads every record, computing spectrograms from waveforms unless a
    /// precomputed one is referenced.
    pub fn load(manifest: &Manifest, frontend: &FrontendParams) -> Result<Self> {
        let videos = manifest
            .records
            .par_iter()
            .map(|r| {
                let spec = match &r.spectrogram {
                    Some(p) => read_dft(&manifest.resolve(p))?,
                    None => spectrogram(&load_wav(&manifest.resolve(&r.waveform))?, frontend)?.values,
                };
                if spec.shape()[0] != frontend.n_mels {
                    return Err(Error::Data(format!(
                        "{}: spectrogram has {} mel bins, expected {}",
                        r.id,
                        spec.shape()[0],
                        frontend.n_mels
                    )));
                }
                if spec.shape()[1] < r.t_f {
                    return Err(Error::Data(format!(
                        "{}: {} spectrogram frames for {} segments",
                        r.id,
                        spec.shape()[1],
                        r.t_f
                    )));
                }
                Ok(VideoData {
                    id: r.id.clone(),
                    split: r.split.clone(),
                    t_f: r.t_f,
                    visual: read_dft(&manifest.resolve(&r.visual))?,
                    semantic: read_dft(&manifest.resolve(&r.semantic))?,
                    spectrogram: spec,
                    gt: read_dft(&manifest.resolve(&r.gt))?.to_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { videos })
    }

    pub fn split(&self, label: &str) -> Vec<usize> {
        (0..self.videos.len()).filter(|&i| self.videos[i].split == label).collect()
    }

    pub fn check_dims(&self, model: &ModelConfig) -> Result<()> {
        for v in &self.videos {
            let (dv, ds) = (v.visual.shape()[1], v.semantic.shape()[1]);
            if model.modalities.visual && dv != model.d_v {
                return Err(Error::Data(format!("{}: visual dim {dv}, model expects {}", v.id, model.d_v)));
            }
            if model.modalities.semantic && ds != model.d_s {
                return Err(Error::Data(format!("{}: semantic dim {ds}, model expects {}", v.id, model.d_s)));
            }
            if model.modalities.dynamics && v.spectrogram.shape()[0] != model.n_mels {
                return Err(Error::Data(format!(
                    "{}: {} mel bins, model expects {}",
                    v.id,
                    v.spectrogram.shape()[0],
                    model.n_mels
                )));
            }
        }
        Ok(())
    }

    /// Model inputs and stacked targets `[B, T_f]` for videos of equal shape.
    pub fn batch(&self, indices: &[usize]) -> Result<(Batch, Tensor)> {
        let vids: Vec<&VideoData> = indices.iter().map(|&i| &self.videos[i]).collect();
        let stack = |f: fn(&VideoData) -> &Tensor| Batch::stack(&vids.iter().map(|v| f(v)).collect::<Vec<_>>());
        let gts: Vec<Tensor> = vids
            .iter()
            .map(|v| Tensor::new(&[v.t_f], v.gt.clone()))
            .collect::<std::result::Result<_, _>>()?;
        let target = Batch::stack(&gts.iter().collect::<Vec<_>>())?;
        Ok((
            Batch {
                visual: Some(stack(|v| &v.visual)?),
                semantic: Some(stack(|v| &v.semantic)?),
                spectrogram: Some(stack(|v| &v.spectrogram)?),
                t_f: vids[0].t_f,
            },
            target,
        ))
    }
}

/// Shuffles, groups by `(T_f, frames)` and chunks; batch order is shuffled too.
pub fn make_batches(data: &Dataset, indices: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    order.shuffle(rng);
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for i in order {
        let v = &data.videos[i];
        groups.entry((v.t_f, v.spectrogram.shape()[1])).or_default().push(i);
    }
    let mut batches: Vec<Vec<usize>> = groups
        .values()
        .flat_map(|g| g.chunks(batch_size).map(<[usize]>::to_vec))
        .collect();
    batches.shuffle(rng);
    batches
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Loss, parameter gradients and batch-norm updates for one batch.
pub fn loss_and_grads(
    model: &Model,
    batch: &Batch,
    target: &Tensor,
) -> Result<(f64, Vec<Tensor>, Vec<Option<dualpath_tensor::RunningStats>>)> {
    let tape = Tape::new();
    let ctx = model.ctx(&tape, NormMode::Train, true);
    let out = model.forward(&ctx, batch)?;
    let loss = mse_loss(out.scores, tape.constant(target.clone()))?;
    let value = loss.value().item()?;
    let grads = tape.backward(loss)?;
    Ok((value, ctx.param_grads(&grads), ctx.take_stat_updates()))
}

/// One optimizer step: returns the loss and the pre-clip gradient norm.
pub fn train_step(model: &mut Model, adam: &mut Adam, batch: &Batch, target: &Tensor, clip_norm: f64) -> Result<(f64, f64)> {
    let (loss, mut grads, stats) = loss_and_grads(model, batch, target)?;
    let norm = clip_global_norm(&mut grads, clip_norm);
    adam.step(model.params_mut().values_mut(), &grads)?;
    model.params_mut().apply_stats(stats);
    Ok((loss, norm))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: Option<MetricsSummary>,
    pub config_hash: String,
    pub seed: u64,
}

/// Per-epoch record. Wall times are kept apart from the deterministic fields.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub epochs: Vec<EpochLog>,
    pub wall_time_s: Vec<f64>,
    pub best_epoch: usize,
}

impl RunLog {
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("log serializes") + "\n")
            .collect()
    }

    pub fn timing_jsonl(&self) -> String {
        self.wall_time_s
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{{\"epoch\":{},\"wall_time_s\":{t:.3}}}\n", i + 1))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation mAP@50.
    pub best: Model,
    pub last: Model,
    pub log: RunLog,
}

pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    train_with(cfg, data, |_| {})
}

/// Trains, calling `on_epoch` after every completed epoch.
pub fn train_with(cfg: &TrainConfig, data: &Dataset, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.check_dims(&cfg.model)?;
    let train_idx = data.split(&cfg.train_split);
    if train_idx.is_empty() {
        return Err(Error::Data(format!("no videos in split {:?}", cfg.train_split)));
    }
    let val_idx = data.split(&cfg.val_split);
    let mut model = Model::new(cfg.seeded_model())?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
        model.params().values(),
    );
    let hash = cfg.hash();
    let mut log = RunLog {
        epochs: Vec::new(),
        wall_time_s: Vec::new(),
        best_epoch: 0,
    };
    let mut best: Option<(f64, Model)> = None;

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut rng = epoch_rng(cfg.seed, epoch);
        let (mut loss_sum, mut count) = (0.0, 0usize);
        for (b, idx) in make_batches(data, &train_idx, cfg.batch_size, &mut rng).iter().enumerate() {
            let (batch, target) = data.batch(idx)?;
            let step = train_step(&mut model, &mut adam, &batch, &target, cfg.clip_norm);
            let loss = match step {
                Ok((loss, _)) if loss.is_finite() => loss,
                Ok(_) | Err(Error::Tensor(dualpath_tensor::TensorError::NonFinite { .. })) => {
                    return Err(Error::NonFiniteLoss { epoch, batch: b });
                }
                Err(e) => return Err(e),
            };
            loss_sum += loss * idx.len() as f64;
            count += idx.len();
        }
        let val = if val_idx.is_empty() {
            None
        } else {
            Some(evaluate(&model, data, &val_idx)?.summary)
        };
        let score = val.and_then(|v| v.mean.map50).unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(s, _)| score > *s) || val.is_none() {
            best = Some((score, model.clone()));
            log.best_epoch = epoch;
        }
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / count as f64,
            val,
            config_hash: hash.clone(),
            seed: cfg.seed,
        };
        on_epoch(&entry);
        log.epochs.push(entry);
        log.wall_time_s.push(start.elapsed().as_secs_f64());
    }
    Ok(TrainOutcome {
        best: best.expect("at least one epoch").1,
        last: model,
        log,
    })
}

/// Mean training-set loss in eval mode, without updating anything.
pub fn dataset_loss(model: &Model, data: &Dataset, indices: &[usize]) -> Result<f64> {
    let losses = indices
        .par_iter()
        .map(|&i| {
            let (batch, target) = data.batch(&[i])?;
            let pred = model.predict(&batch)?;
            Ok(pred
                .data()
                .iter()
                .zip(target.data())
                .map(|(p, y)| (p - y).powi(2))
                .sum::<f64>()
                / pred.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_video: Vec<(String, VideoMetrics)>,
    pub summary: MetricsSummary,
}

impl EvalReport {
    pub fn from_scores<'a>(items: impl IntoIterator<Item = (String, &'a [f64], &'a [f64])>) -> Result<Self> {
        let per_video = items
            .into_iter()
            .map(|(id, pred, gt)| VideoMetrics::compute(pred, gt).map(|m| (id, m)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let summary = MetricsSummary::aggregate(&per_video.iter().map(|(_, m)| *m).collect::<Vec<_>>());
        Ok(Self { per_video, summary })
    }

    pub fn table(&self) -> String {
        let mut rows = self.per_video.clone();
        rows.push(("mean".to_string(), self.summary.mean));
        format_table("video", &rows)
    }

    /// One JSON object per video, then an aggregate line.
    pub fn jsonl(&self) -> String {
        let mut out = String::new();
        for (id, m) in &self.per_video {
            let mut obj = serde_json::to_value(m).expect("metrics serialize");
            obj["id"] = serde_json::Value::from(id.as_str());
            out += &(obj.to_string() + "\n");
        }
        let mut agg = serde_json::to_value(self.summary).expect("summary serializes");
        agg["aggregate"] = serde_json::Value::Bool(true);
        out + &agg.to_string() + "\n"
    }
}

/// Per-video eval-mode predictions.
pub fn predict_all(model: &Model, data: &Dataset, indices: &[usize]) -> Result<Vec<Vec<f64>>> {
    indices
        .par_iter()
        .map(|&i| {
            let (batch, _) = data.batch(&[i])?;
            Ok(model.predict(&batch)?.to_vec())
        })
        .collect()
}

pub fn evaluate(model: &Model, data: &Dataset, indices: &[usize]) -> Result<EvalReport> {
    let preds = predict_all(model, data, indices)?;
    EvalReport::from_scores(
        indices
            .iter()
            .zip(&preds)
            .map(|(&i, p)| (data.videos[i].id.clone(), p.as_slice(), data.videos[i].gt.as_slice())),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    Modality,
    Fusion,
}

impl FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "modality" => Ok(AblationAxis::Modality),
            "fusion" => Ok(AblationAxis::Fusion),
            _ => Err(Error::Config(format!("unknown ablation axis {s:?}; expected modality or fusion"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub modalities: Modalities,
    pub sa_placement: SaPlacement,
    pub fusion_op: FusionOp,
    pub config_hash: String,
    pub best_epoch: usize,
    pub metrics: MetricsSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub eval_split: String,
    pub rows: Vec<AblationRow>,
}

/// Variant configurations in table order, all sharing the base seed.
pub fn ablation_variants(base: &TrainConfig, axis: AblationAxis) -> Vec<TrainConfig> {
    let with = |f: &dyn Fn(&mut ModelConfig)| {
        let mut c = base.clone();
        f(&mut c.model);
        c
    };
    match axis {
        AblationAxis::Modality => Modalities::subsets()
            .into_iter()
            .map(|m| with(&|c| c.modalities = m))
            .collect(),
        AblationAxis::Fusion => [SaPlacement::Early, SaPlacement::Late]
            .into_iter()
            .flat_map(|sa| [FusionOp::Concat, FusionOp::Multiply].map(|op| (sa, op)))
            .map(|(sa, op)| {
                with(&|c| {
                    c.modalities = Modalities::ALL;
                    c.sa_placement = sa;
                    c.fusion_op = op;
                })
            })
            .collect(),
    }
}

/// Trains every variant and scores its best checkpoint on the test split
/// (validation split when there is no test split).
pub fn ablation_sweep(base: &TrainConfig, data: &Dataset, axis: AblationAxis) -> Result<AblationTable> {
    let mut eval_split = base.test_split.clone();
    if data.split(&eval_split).is_empty() {
        eval_split = base.val_split.clone();
    }
    let eval_idx = data.split(&eval_split);
    if eval_idx.is_empty() {
        return Err(Error::Data("ablation needs a test or validation split".into()));
    }
    let rows = ablation_variants(base, axis)
        .into_iter()
        .map(|cfg| {
            let outcome = train(&cfg, data)?;
            Ok(AblationRow {
                modalities: cfg.model.modalities,
                sa_placement: cfg.model.sa_placement,
                fusion_op: cfg.model.fusion_op,
                config_hash: cfg.hash(),
                best_epoch: outcome.log.best_epoch,
                metrics: evaluate(&outcome.best, data, &eval_idx)?.summary,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable { axis, eval_split, rows })
}

impl AblationTable {
    pub fn row(&self, modalities: Modalities) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.modalities == modalities)
    }

    /// Plain-text table: configuration columns, then the metric columns.
    pub fn format(&self) -> String {
        let mark = |on: bool| if on { "x" } else { "-" };
        let (header, labels): (&str, Vec<String>) = match self.axis {
            AblationAxis::Modality => (
                "V  As Ad config",
                self.rows
                    .iter()
                    .map(|r| {
                        let m = r.modalities;
                        format!("{}  {}  {}  {}", mark(m.visual), mark(m.semantic), mark(m.dynamics), r.config_hash)
                    })
                    .collect(),
            ),
            AblationAxis::Fusion => (
                "SA    Combination config",
                self.rows
                    .iter()
                    .map(|r| format!("{:<5} {:<11} {}", r.sa_placement, r.fusion_op, r.config_hash))
                    .collect(),
            ),
        };
        let rows: Vec<(String, VideoMetrics)> = labels.into_iter().zip(self.rows.iter().map(|r| r.metrics.mean)).collect();
        format_table(header, &rows)
    }
}

/// Fold index in `0..k` per item: a seeded permutation dealt round-robin,
/// so fold sizes differ by at most one.
pub fn kfold_splits(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {k}")));
    }
    if k > n {
        return Err(Error::Config(format!("k = {k} exceeds the {n} available videos")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % k;
    }
    Ok(fold)
}

/// Writes checkpoints and logs of a finished run into `dir`.
pub fn write_run(dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    outcome.best.save(&dir.join("best.dvhd"))?;
    outcome.last.save(&dir.join("last.dvhd"))?;
    for (name, text) in [("runlog.jsonl", outcome.log.to_jsonl()), ("timing.jsonl", outcome.log.timing_jsonl())] {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}
