use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use dualpath_core::audio::{load_wav, spectrogram, FrontendParams};
use dualpath_core::dft::{read_dft, write_dft};
use dualpath_core::gradcheck::{check_problem, model_grad_check};
use dualpath_core::manifest::{load_manifest, Manifest, ManifestRecord};
use dualpath_core::model::Model;
use dualpath_core::synth::synth_dataset;
use dualpath_core::train::{
    ablation_sweep, evaluate, kfold_splits, train_with, write_run, AblationAxis, Dataset, EvalReport, Preset,
};
use dualpath_tensor::{BackwardFault, OpKind};
use rayon::prelude::*;
use serde_json::json;

use crate::config::{Overrides, Resolved};
use crate::{CliError, ConfigArgs};

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::data(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

/// File config, then `--preset`, the dedicated flags and finally `--set`.
fn resolve(args: &ConfigArgs, default_preset: Preset) -> Result<Resolved> {
    let mut ov = match &args.config {
        Some(p) => Overrides::read(p)?,
        None => Overrides::default(),
    };
    if let Some(p) = &args.preset {
        ov.push("preset", p);
    }
    if let Some(m) = &args.manifest {
        ov.push("manifest", m.display());
    }
    if let Some(s) = args.seed {
        ov.push("seed", s);
    }
    if let Some(e) = args.epochs {
        ov.push("epochs", e);
    }
    for kv in &args.set {
        ov.push_assignment(kv)?;
    }
    let r = Resolved::build(&ov, default_preset)?;
    eprintln!("# resolved config\n{}", r.to_text());
    Ok(r)
}

/// Resolved config and tool version, written into every run directory.
fn record_config(dir: &Path, r: &Resolved) -> Result<()> {
    let version = env!("CARGO_PKG_VERSION");
    write_file(&dir.join("config.txt"), format!("# dualpath {version}\n{}", r.to_text()))?;
    write_file(&dir.join("config.json"), serde_json::to_string_pretty(&r.to_json()).expect("json") + "\n")?;
    write_file(&dir.join("VERSION"), format!("{version}\n"))
}

fn load_dataset(r: &Resolved) -> Result<Dataset> {
    let manifest = load_manifest(&r.train.manifest)?;
    Ok(Dataset::load(&manifest, &r.train.frontend)?)
}

pub fn featurize(wav_dir: &Path, out_dir: &Path, n_fft: usize, hop: usize, n_mels: usize) -> Result<()> {
    let params = FrontendParams {
        n_fft,
        hop,
        n_mels,
        ..FrontendParams::default()
    };
    let mut inputs: Vec<PathBuf> = fs::read_dir(wav_dir)
        .map_err(|e| io_err(wav_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    inputs.sort();
    if inputs.is_empty() {
        eprintln!("warning: no inputs in {}", wav_dir.display());
        return Ok(());
    }
    create_dir(out_dir)?;
    let results: Vec<(PathBuf, std::result::Result<Vec<usize>, String>)> = inputs
        .par_iter()
        .map(|p| {
            let out = out_dir.join(p.file_stem().expect("file has a name")).with_extension("dft");
            let r = load_wav(p)
                .and_then(|w| spectrogram(&w, &params))
                .map_err(dualpath_core::Error::from)
                .and_then(|s| write_dft(&out, &s.values).map(|_| s.values.shape().to_vec()))
                .map_err(|e| e.to_string());
            (p.clone(), r)
        })
        .collect();
    let mut failed = 0;
    for (p, r) in &results {
        match r {
            Ok(shape) => println!("{} {}x{}", p.display(), shape[0], shape[1]),
            Err(e) => {
                failed += 1;
                eprintln!("FAILED {}: {e}", p.display());
            }
        }
    }
    if failed > 0 {
        return Err(CliError::data(format!("{failed} of {} files failed", results.len())));
    }
    Ok(())
}

pub fn synth(out_dir: &Path, n_videos: Option<usize>, args: &ConfigArgs) -> Result<()> {
    let mut args = args.clone();
    if let Some(n) = n_videos {
        args.set.push(format!("synth.n_videos={n}"));
    }
    let r = resolve(&args, Preset::Toy)?;
    let out = synth_dataset(&r.synth, out_dir)?;
    record_config(out_dir, &r)?;
    let degenerate = out.records.iter().filter(|r| r.degenerate).count();
    println!(
        "wrote {} videos ({degenerate} degenerate) to {}",
        out.records.len(),
        out.manifest_path.display()
    );
    if let Some(rho) = out.min_energy_rho {
        println!("min burst-energy vs gt spearman: {rho:.4}");
    }
    Ok(())
}

pub fn split(manifest_path: &Path, out_dir: &Path, k: usize, seed: u64) -> Result<()> {
    if k < 3 {
        return Err(CliError::usage("--folds must be at least 3 (test, val and train folds)"));
    }
    let manifest = load_manifest(manifest_path)?;
    let folds = kfold_splits(manifest.records.len(), k, seed)?;
    create_dir(out_dir)?;
    let abs = |rel: &str| -> Result<String> {
        let p = std::path::absolute(manifest.resolve(rel)).map_err(|e| io_err(Path::new(rel), e))?;
        Ok(p.display().to_string())
    };
    let mut assignment = String::new();
    for (rec, f) in manifest.records.iter().zip(&folds) {
        assignment += &(json!({ "id": rec.id, "fold": f }).to_string() + "\n");
    }
    write_file(&out_dir.join("folds.jsonl"), assignment)?;
    for i in 0..k {
        let records = manifest
            .records
            .iter()
            .zip(&folds)
            .map(|(rec, &f)| {
                let split = if f == i {
                    "test"
                } else if f == (i + 1) % k {
                    "val"
                } else {
                    "train"
                };
                Ok(ManifestRecord {
                    visual: abs(&rec.visual)?,
                    semantic: abs(&rec.semantic)?,
                    waveform: abs(&rec.waveform)?,
                    gt: abs(&rec.gt)?,
                    spectrogram: rec.spectrogram.as_deref().map(abs).transpose()?,
                    split: split.to_string(),
                    ..rec.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let path = out_dir.join(format!("fold{i}.jsonl"));
        Manifest::write(&path, &records)?;
        println!("{} test={}", path.display(), folds.iter().filter(|&&f| f == i).count());
    }
    Ok(())
}

pub fn train(run_dir: &Path, args: &ConfigArgs) -> Result<()> {
    let r = resolve(args, Preset::Toy)?;
    r.train.validate()?;
    let data = load_dataset(&r)?;
    create_dir(run_dir)?;
    record_config(run_dir, &r)?;
    let outcome = train_with(&r.train, &data, |e| {
        let val = e.val.as_ref().and_then(|v| v.mean.map50).map_or("-".to_string(), |m| format!("{m:.6}"));
        println!("epoch {} train_loss={:.9} val_mAP50={val}", e.epoch, e.train_loss);
    })?;
    write_run(run_dir, &outcome)?;
    let test = data.split(&r.train.test_split);
    if !test.is_empty() {
        let report = evaluate(&outcome.best, &data, &test)?;
        write_file(&run_dir.join("eval_test.txt"), report.table())?;
        write_file(&run_dir.join("eval_test.jsonl"), report.jsonl())?;
    }
    let last = outcome.log.epochs.last().expect("at least one epoch");
    println!("final train_loss={:.9} best_epoch={}", last.train_loss, outcome.log.best_epoch);
    Ok(())
}

/// Frontend settings for a checkpoint: its run directory's config when
/// present, else the defaults at the model's mel count.
fn frontend_for(checkpoint: &Path, model: &Model) -> Result<FrontendParams> {
    let sibling = checkpoint.parent().map(|d| d.join("config.txt"));
    if let Some(p) = sibling.filter(|p| p.is_file()) {
        return Ok(Resolved::build(&Overrides::read(&p)?, Preset::Toy)?.train.frontend);
    }
    Ok(FrontendParams {
        n_mels: model.config().n_mels,
        ..FrontendParams::default()
    })
}

fn read_scores(path: &Path) -> Result<HashMap<String, Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut out = HashMap::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |what: &str| CliError::data(format!("{}:{}: {what}", path.display(), n + 1));
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| bad(&e.to_string()))?;
        let id = v["id"].as_str().ok_or_else(|| bad("missing id"))?;
        let scores = v["scores"]
            .as_array()
            .and_then(|a| a.iter().map(|x| x.as_f64()).collect::<Option<Vec<_>>>())
            .ok_or_else(|| bad("scores must be an array of numbers"))?;
        out.insert(id.to_string(), scores);
    }
    Ok(out)
}

pub fn eval(
    checkpoint: Option<&Path>,
    scores: Option<&Path>,
    manifest_path: &Path,
    split: &str,
    out_dir: Option<&Path>,
) -> Result<()> {
    let mut manifest = load_manifest(manifest_path)?;
    manifest.records.retain(|r| r.split == split);
    if manifest.records.is_empty() {
        return Err(CliError::data(format!("split {split:?} is empty in {}", manifest_path.display())));
    }
    let report = match (checkpoint, scores) {
        (Some(ckpt), _) => {
            let model = Model::load(ckpt)?;
            let data = Dataset::load(&manifest, &frontend_for(ckpt, &model)?)?;
            data.check_dims(model.config())?;
            evaluate(&model, &data, &(0..data.videos.len()).collect::<Vec<_>>())?
        }
        (None, Some(path)) => {
            let scores = read_scores(path)?;
            let gts = manifest
                .records
                .iter()
                .map(|r| Ok(read_dft(&manifest.resolve(&r.gt))?.to_vec()))
                .collect::<std::result::Result<Vec<_>, dualpath_core::Error>>()?;
            let mut items = Vec::new();
            for (r, gt) in manifest.records.iter().zip(&gts) {
                let s = scores
                    .get(&r.id)
                    .ok_or_else(|| CliError::data(format!("no scores for {}", r.id)))?;
                items.push((r.id.clone(), s.as_slice(), gt.as_slice()));
            }
            EvalReport::from_scores(items)?
        }
        (None, None) => return Err(CliError::usage("eval needs --checkpoint or --scores")),
    };
    print!("{}", report.table());
    if let Some(dir) = out_dir {
        create_dir(dir)?;
        write_file(&dir.join("eval.txt"), report.table())?;
        write_file(&dir.join("eval.jsonl"), report.jsonl())?;
    }
    Ok(())
}

pub fn ablate(axis: &str, run_dir: &Path, args: &ConfigArgs) -> Result<()> {
    let axis: AblationAxis = axis.parse()?;
    let r = resolve(args, Preset::Toy)?;
    r.train.validate()?;
    let data = load_dataset(&r)?;
    create_dir(run_dir)?;
    record_config(run_dir, &r)?;
    let table = ablation_sweep(&r.train, &data, axis)?;
    let name = match axis {
        AblationAxis::Modality => "ablation_modality",
        AblationAxis::Fusion => "ablation_fusion",
    };
    let text = table.format();
    write_file(&run_dir.join(format!("{name}.txt")), &text)?;
    let mut lines = String::new();
    for row in &table.rows {
        let v = json!({
            "modalities": row.modalities,
            "sa_placement": row.sa_placement,
            "fusion_op": row.fusion_op,
            "config_hash": row.config_hash,
            "best_epoch": row.best_epoch,
            "eval_split": table.eval_split,
            "metrics": row.metrics,
        });
        lines += &(v.to_string() + "\n");
    }
    write_file(&run_dir.join(format!("{name}.jsonl")), lines)?;
    print!("{text}");
    Ok(())
}

pub struct GradcheckOpts {
    pub eps: f64,
    pub tol: f64,
    pub segments: usize,
    pub frames: usize,
    pub problem_seed: u64,
    pub out: Option<PathBuf>,
    pub corrupt_backward: Option<String>,
}

fn op_kind(name: &str) -> Result<OpKind> {
    Ok(match name.to_ascii_lowercase().as_str() {
        "softmax" => OpKind::Softmax,
        "matmul" => OpKind::MatMul,
        "conv2d" => OpKind::Conv2d,
        "sigmoid" => OpKind::Sigmoid,
        "relu" => OpKind::Relu,
        "mul" => OpKind::Mul,
        "layernorm" => OpKind::LayerNorm,
        "batchnorm" => OpKind::BatchNorm,
        _ => return Err(CliError::usage(format!("unknown op {name:?} for --corrupt-backward"))),
    })
}

pub fn gradcheck(args: &ConfigArgs, o: GradcheckOpts) -> Result<()> {
    let r = resolve(args, Preset::Toy)?;
    let fault = o
        .corrupt_backward
        .as_deref()
        .map(|n| op_kind(n).map(|op| BackwardFault { op, scale: 1.5 }))
        .transpose()?;
    let model = Model::new(r.train.seeded_model())?;
    let (batch, target) = check_problem(&model, o.segments, o.frames, o.problem_seed)?;
    let groups = model_grad_check(&model, &batch, &target, o.eps, fault)?;
    let mut failed = 0;
    let mut lines = String::new();
    for g in &groups {
        let ok = g.max_rel_err < o.tol;
        failed += usize::from(!ok);
        println!(
            "{} {} elements={} max_rel_err={:.3e}",
            if ok { "PASS" } else { "FAIL" },
            g.name,
            g.elements,
            g.max_rel_err
        );
        lines += &(serde_json::to_string(g).expect("group serializes") + "\n");
    }
    if let Some(path) = &o.out {
        write_file(path, lines)?;
    }
    println!("{} groups, {failed} above {:.0e}", groups.len(), o.tol);
    if failed > 0 {
        return Err(CliError::numerical(format!("{failed} parameter groups exceed tolerance {:e}", o.tol)));
    }
    Ok(())
}
