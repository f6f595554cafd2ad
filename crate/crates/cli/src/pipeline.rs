//! The commands as library functions.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clseg_core::adam::AdamState;
use clseg_core::eval::{build_report, evaluate_patient, write_report, EvalReport, ModelEvaluation, PatientEval, TypeAnnotation};
use clseg_core::phantom::{generate_cohort, type_annotations, PhantomManifest};
use clseg_core::rng::derive_seed;
use clseg_core::sampling::{Sampler, SubjectData, TrainingPatch};
use clseg_core::unet::{
    build_network, load_checkpoint, save_checkpoint, sliding_window_inference, train_step, Batch, Checkpoint,
    InferenceOptions, NetworkParams, Prediction, StepLosses, CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};
use clseg_core::volume::{check_cohort, load_subject, subject_dirs, write_volume, SubjectVolumes};
use clseg_core::{Error, Tensor};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::folds::FoldSplit;

const SAMPLER_STREAM: u64 = 0x5A;
const FOLD_TRAIN_STREAM: u64 = 0xF7;

pub const LOSS_LOG: &str = "loss.csv";
pub const LOSS_HEADER: &str = "iteration,cl_loss,tissue_loss,total";
pub const MODEL_BASE: &str = "model";

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| {
        CliError::Core(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(io(dir))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(io(path))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct RunManifest<'a> {
    tool: &'static str,
    tool_version: &'static str,
    command: &'a str,
    config_sha256: String,
    checkpoint_format: &'static str,
    checkpoint_version: u32,
    config: &'a RunConfig,
}

/// Records the command, the configuration and its hash under `out_dir`.
pub fn write_run_manifest(out_dir: &Path, command: &str, cfg: &RunConfig) -> CliResult<()> {
    create_dir(out_dir)?;
    let m = RunManifest {
        tool: "clseg",
        tool_version: env!("CARGO_PKG_VERSION"),
        command,
        config_sha256: cfg.sha256(),
        checkpoint_format: CHECKPOINT_FORMAT,
        checkpoint_version: CHECKPOINT_VERSION,
        config: cfg,
    };
    write_text(&out_dir.join("run_manifest.json"), &to_json(&m))
}

pub fn cmd_phantom(cfg: &RunConfig, out_dir: &Path) -> CliResult<PhantomManifest> {
    if cfg.cohort.subjects == 0 {
        return Err(CliError::Usage("cohort.subjects must be ≥ 1".into()));
    }
    let manifest = generate_cohort(&cfg.phantom, cfg.cohort.subjects, out_dir)?;
    write_run_manifest(out_dir, "phantom", cfg)?;
    Ok(manifest)
}

/// Every subject under `dir`, validated.
pub fn load_cohort(dir: &Path) -> CliResult<Vec<SubjectVolumes>> {
    let dirs = subject_dirs(dir)?;
    if dirs.is_empty() {
        return Err(Error::MissingVolume {
            dir: dir.to_path_buf(),
            name: "mp2rage".into(),
        }
        .into());
    }
    check_cohort(&dirs)?;
    Ok(dirs.iter().map(load_subject).collect::<Result<_, _>>()?)
}

/// Lesion types from the cohort's phantom manifest, when it has one.
pub fn load_annotations(cohort_dir: &Path) -> CliResult<BTreeMap<String, Vec<TypeAnnotation>>> {
    let path = cohort_dir.join("manifest.json");
    if !path.exists() {
        return Ok(BTreeMap::new());
    }
    let m = PhantomManifest::read(&path)?;
    Ok(m.subjects
        .iter()
        .map(|s| (s.id.clone(), type_annotations(&s.lesions)))
        .collect())
}

fn make_batch(patches: Vec<TrainingPatch>, cfg: &RunConfig) -> CliResult<Batch<f32>> {
    let b = patches.len();
    let s = cfg.network.input_patch;
    let mut input = Vec::with_capacity(b * 3 * s * s * s);
    let (mut cl, mut tissue, mut wml, mut ids) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for p in patches {
        input.extend_from_slice(p.input.data());
        cl.extend(p.cl_labels);
        tissue.extend(p.tissue_labels);
        wml.extend(p.wml_labels);
        let pr = &p.provenance;
        ids.push(format!("{}@{:?}", pr.subject_id, pr.center));
    }
    let input = Tensor::from_vec([b, 3, s, s, s], input)?;
    Ok(Batch::new(input, cl, tissue, &wml, &cfg.loss, ids)?)
}

fn checkpoint_base(out_dir: &Path, iteration: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("iter_{iteration:08}"))
}

fn latest_checkpoint(out_dir: &Path) -> CliResult<Option<PathBuf>> {
    let dir = out_dir.join("checkpoints");
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(&dir).map_err(io(&dir))? {
        let name = entry.map_err(io(&dir))?.file_name().to_string_lossy().into_owned();
        let Some(it) = name
            .strip_prefix("iter_")
            .and_then(|r| r.strip_suffix(".json"))
            .and_then(|n| n.parse::<u64>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| it > *b) {
            best = Some((it, checkpoint_base(out_dir, it)));
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Keeps the header and the first `rows` data lines of the loss log.
fn truncate_log(path: &Path, rows: u64) -> CliResult<()> {
    let f = File::open(path).map_err(io(path))?;
    let lines: Vec<String> = BufReader::new(f).lines().collect::<Result<_, _>>().map_err(io(path))?;
    if lines.first().map(String::as_str) != Some(LOSS_HEADER) || (lines.len() as u64) < rows + 1 {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("loss log does not cover the {rows} checkpointed iterations"),
        }
        .into());
    }
    let mut text = lines[..rows as usize + 1].join("\n");
    text.push('\n');
    write_text(path, &text)
}

/// Seed of the sampling streams of a run seeded with `seed`.
pub fn sampler_seed(seed: u64) -> u64 {
    derive_seed(seed, &[SAMPLER_STREAM])
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub last: Option<StepLosses>,
}

/// Trains on `subjects` for `cfg.training.iterations` steps, writing the loss
/// log, periodic checkpoints and the final `model` checkpoint to `out_dir`.
/// With `resume`, continues from the latest checkpoint in `out_dir`; draw
/// `k` of iteration `i` is a pure function of the seed, `i` and `k`, so the
/// continuation matches an uninterrupted run.
pub fn train(cfg: &RunConfig, subjects: &[SubjectData], out_dir: &Path, seed: u64, resume: bool) -> CliResult<TrainOutcome> {
    cfg.validate()?;
    let ck_dir = out_dir.join("checkpoints");
    if !resume && ck_dir.is_dir() {
        // A fresh run must not resume from, or leave behind, stale states.
        fs::remove_dir_all(&ck_dir).map_err(io(&ck_dir))?;
    }
    create_dir(&ck_dir)?;
    let mut sampler_cfg = cfg.sampler.clone();
    sampler_cfg.seed = sampler_seed(seed);
    let sampler = Sampler::new(sampler_cfg, cfg.network.input_patch, subjects)?;
    let log_path = out_dir.join(LOSS_LOG);

    let mut ck = match (resume, latest_checkpoint(out_dir)?) {
        (true, Some(base)) => {
            let ck = load_checkpoint(&base)?;
            if ck.network != cfg.network || ck.seed != seed || ck.adam.config != cfg.adam {
                return Err(Error::Contract(format!(
                    "checkpoint {} was written by a different configuration or seed",
                    base.display()
                ))
                .into());
            }
            truncate_log(&log_path, ck.iteration)?;
            ck
        }
        _ => {
            let params: NetworkParams<f32> = build_network(&cfg.network, seed);
            let sizes: Vec<usize> = params.infos().iter().map(|i| i.len()).collect();
            write_text(&log_path, &format!("{LOSS_HEADER}\n"))?;
            Checkpoint {
                network: cfg.network.clone(),
                iteration: 0,
                seed,
                adam: AdamState::new(cfg.adam.clone(), &sizes),
                params,
            }
        }
    };

    let file = fs::OpenOptions::new().append(true).open(&log_path).map_err(io(&log_path))?;
    let mut log = BufWriter::new(file);
    let b = cfg.training.batch_size as u64;
    let mut last = None;
    while ck.iteration < cfg.training.iterations {
        let it = ck.iteration;
        let patches = (0..b)
            .map(|k| sampler.draw(0, it * b + k))
            .collect::<Result<Vec<_>, _>>()?;
        let batch = make_batch(patches, cfg)?;
        let l = train_step(&mut ck.params, &cfg.network, &mut ck.adam, &batch, &cfg.loss)?;
        ck.iteration += 1;
        writeln!(log, "{},{},{},{}", ck.iteration, l.cl, l.tissue, l.total).map_err(io(&log_path))?;
        last = Some(l);
        if ck.iteration % cfg.training.checkpoint_every == 0 || ck.iteration == cfg.training.iterations {
            log.flush().map_err(io(&log_path))?;
            save_checkpoint(&ck, checkpoint_base(out_dir, ck.iteration))?;
        }
    }
    log.flush().map_err(io(&log_path))?;
    save_checkpoint(&ck, out_dir.join(MODEL_BASE))?;
    Ok(TrainOutcome { checkpoint: ck, last })
}

pub fn cmd_train(cfg: &RunConfig, cohort_dir: &Path, out_dir: &Path, resume: bool) -> CliResult<TrainOutcome> {
    let cohort = load_cohort(cohort_dir)?;
    let data: Vec<SubjectData> = cohort.iter().map(SubjectData::from_volumes).collect();
    drop(cohort);
    write_run_manifest(out_dir, "train", cfg)?;
    train(cfg, &data, out_dir, cfg.training.seed, resume)
}

/// Loads a checkpoint and checks it matches the configured network.
pub fn load_model(cfg: &RunConfig, base: &Path) -> CliResult<Checkpoint> {
    let ck = load_checkpoint(base)?;
    if ck.network != cfg.network {
        return Err(Error::Contract(format!(
            "checkpoint {} network {:?} differs from the configured {:?}",
            base.display(),
            ck.network,
            cfg.network
        ))
        .into());
    }
    Ok(ck)
}

pub fn predict(ck: &Checkpoint, subject: &SubjectVolumes, opts: &InferenceOptions) -> CliResult<Prediction> {
    Ok(sliding_window_inference(&ck.params, &ck.network, &subject.contrasts, opts)?)
}

pub fn write_prediction(p: &Prediction, dir: &Path) -> CliResult<()> {
    create_dir(dir)?;
    write_volume(&p.cl_labels, dir.join("cl_pred"))?;
    write_volume(&p.tissue_labels, dir.join("tissue_pred"))?;
    write_volume(&p.cl_prob, dir.join("cl_prob"))?;
    Ok(())
}

pub fn cmd_infer(
    cfg: &RunConfig,
    checkpoint: &Path,
    subject_dir: &Path,
    out_dir: &Path,
    opts: &InferenceOptions,
) -> CliResult<Prediction> {
    let ck = load_model(cfg, checkpoint)?;
    let subject = load_subject(subject_dir)?;
    let p = predict(&ck, &subject, opts)?;
    write_run_manifest(out_dir, "infer", cfg)?;
    write_prediction(&p, &out_dir.join(&subject.id))?;
    Ok(p)
}

pub fn evaluate(
    cfg: &RunConfig,
    subject: &SubjectVolumes,
    p: &Prediction,
    annotations: &BTreeMap<String, Vec<TypeAnnotation>>,
) -> CliResult<PatientEval> {
    let types = annotations.get(&subject.id).map_or(&[][..], Vec::as_slice);
    Ok(evaluate_patient(
        &subject.id,
        &subject.cl_labels,
        &p.cl_labels,
        Some(&subject.wml_labels),
        types,
        &cfg.eval,
    )?)
}

pub struct XvalOutcome {
    pub split: FoldSplit,
    pub evaluation: ModelEvaluation,
    pub report: EvalReport,
}

/// Where a cross-validation run gets its fold models.
#[derive(Clone, Copy, Debug)]
pub enum FoldModels<'a> {
    Train,
    /// `fold_<k>/model` checkpoints of an earlier run, e.g. to score the same
    /// models on a cohort with acquisition artifacts.
    Reuse(&'a Path),
}

pub fn fold_dir(out_dir: &Path, fold: usize) -> PathBuf {
    out_dir.join(format!("fold_{fold}"))
}

/// Seeded k-fold cross-validation. Each fold trains on the other folds and
/// predicts its own subjects; the held-out evaluations of all folds are
/// pooled into one report.
pub fn run_xval(cfg: &RunConfig, cohort_dir: &Path, out_dir: &Path, models: FoldModels<'_>) -> CliResult<XvalOutcome> {
    cfg.validate()?;
    let cohort = load_cohort(cohort_dir)?;
    let annotations = load_annotations(cohort_dir)?;
    let ids: Vec<String> = cohort.iter().map(|s| s.id.clone()).collect();
    let split = FoldSplit::new(&ids, cfg.cohort.folds, cfg.training.seed)?;
    create_dir(out_dir)?;
    write_run_manifest(out_dir, "xval", cfg)?;
    write_text(&out_dir.join("folds.json"), &to_json(&split))?;

    let mut patients = Vec::with_capacity(cohort.len());
    for f in 0..split.folds.len() {
        let dir = fold_dir(out_dir, f);
        create_dir(&dir)?;
        let ck = match models {
            FoldModels::Train => {
                let train_ids = split.train_ids(f);
                let data: Vec<SubjectData> = cohort
                    .iter()
                    .filter(|s| train_ids.contains(&s.id))
                    .map(SubjectData::from_volumes)
                    .collect();
                let seed = derive_seed(cfg.training.seed, &[FOLD_TRAIN_STREAM, f as u64]);
                train(cfg, &data, &dir, seed, false)?.checkpoint
            }
            FoldModels::Reuse(src) => load_model(cfg, &fold_dir(src, f).join(MODEL_BASE))?,
        };
        for id in split.test_ids(f) {
            let s = cohort.iter().find(|s| &s.id == id).expect("split ids come from the cohort");
            let p = predict(&ck, s, &cfg.inference)?;
            write_prediction(&p, &dir.join("predictions").join(id))?;
            patients.push(evaluate(cfg, s, &p, &annotations)?);
        }
    }
    patients.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    let evaluation = ModelEvaluation {
        name: cfg.model_variant.name().to_string(),
        patients,
    };
    write_text(&out_dir.join("evaluation.json"), &to_json(&evaluation))?;
    let report = build_report(std::slice::from_ref(&evaluation), &cfg.eval)?;
    write_report(&report, out_dir.join("report"))?;
    Ok(XvalOutcome {
        split,
        evaluation,
        report,
    })
}

/// Reads `evaluation.json` from an xval output directory, or the file
/// itself.
pub fn read_evaluation(path: &Path) -> CliResult<ModelEvaluation> {
    let file = if path.is_dir() { path.join("evaluation.json") } else { path.to_path_buf() };
    let text = fs::read_to_string(&file).map_err(io(&file))?;
    serde_json::from_str(&text).map_err(|e| {
        Error::MalformedHeader {
            path: file.clone(),
            reason: e.to_string(),
        }
        .into()
    })
}

/// Combines the evaluations of several models into one report. Names must
/// be distinct; pairwise tests cover every pair.
pub fn cmd_report(cfg: &RunConfig, models: Vec<ModelEvaluation>, out_dir: &Path) -> CliResult<EvalReport> {
    if models.is_empty() {
        return Err(CliError::Usage("report needs at least one evaluation".into()));
    }
    for (i, m) in models.iter().enumerate() {
        if models[..i].iter().any(|o| o.name == m.name) {
            return Err(CliError::Usage(format!("model name {} given twice; label inputs as NAME=PATH", m.name)));
        }
    }
    let report = build_report(&models, &cfg.eval)?;
    write_run_manifest(out_dir, "report", cfg)?;
    write_report(&report, out_dir)?;
    Ok(report)
}
