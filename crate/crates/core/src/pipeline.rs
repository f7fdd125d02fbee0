//! End-to-end steps behind the command-line tool. Each step reads the
//! artifacts of the previous one, checks their config hashes and writes its
//! outputs together with a JSON summary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::config::{config_hash, RunConfig};
use crate::data::{scan_dataset, ClipRecord, Label, ScanReport, SkippedFile, Split};
use crate::detection::{
    fit_threshold, select_best_score, ClipMeta, ScoreName, ScoreTable, Scorer, SegmentScores,
    Selection, Threshold,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, ClipScore, EvalReport};
use crate::frontend::{
    fit_scaler, scale_affine, slice_windows, AffineScaler, LogMelMatrix, MelExtractor,
    SpectrogramSegment,
};
use crate::localization::{localize, render, stitch, Residual, StreamingMean};
use crate::model::{export_ln_stats, init_models, segments_to_tensor, StatsSource};
use crate::store::{
    check_hash, read_json, read_provenance, write_json, write_provenance, ArrayFile, Checkpoint,
    Provenance,
};
use crate::training::{write_loss_log, write_step_log, Trainer};

/// Dataset split as named on the command line. `dev` and `eval` both read
/// the `test/` directories; they differ only in whether labels exist.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitArg {
    Train,
    Dev,
    Eval,
}
text_enum!(SplitArg { Train => "train", Dev => "dev", Eval => "eval" });

impl SplitArg {
    pub fn directory(self) -> Split {
        match self {
            SplitArg::Train => Split::Train,
            SplitArg::Dev | SplitArg::Eval => Split::Test,
        }
    }
}

/// Scaled segments of one clip.
#[derive(Clone, Debug)]
pub struct ClipFeatures {
    pub record: ClipRecord,
    pub n_frames: usize,
    pub segments: Vec<SpectrogramSegment>,
}

fn raw_log_mel(
    extractor: &MelExtractor,
    record: &ClipRecord,
    cfg: &RunConfig,
) -> Result<LogMelMatrix> {
    let wave = crate::frontend::load_audio(&record.path, &cfg.frontend)?;
    extractor.log_mel(&wave)
}

fn features(
    record: &ClipRecord,
    m: &LogMelMatrix,
    scaler: &AffineScaler,
    cfg: &RunConfig,
) -> Result<ClipFeatures> {
    let scaled = scale_affine(m, scaler)?;
    Ok(ClipFeatures {
        record: record.clone(),
        n_frames: m.n_frames,
        segments: slice_windows(&scaled, &cfg.frontend, &record.clip_id)?,
    })
}

/// Segments of `records` under a fixed scaler.
pub fn clip_features(
    records: &[&ClipRecord],
    scaler: &AffineScaler,
    cfg: &RunConfig,
) -> Result<Vec<ClipFeatures>> {
    let extractor = MelExtractor::new(&cfg.frontend);
    records
        .iter()
        .map(|r| features(r, &raw_log_mel(&extractor, r, cfg)?, scaler, cfg))
        .collect()
}

/// Fits the scaler on `train` and returns it with the training segments.
pub fn fit_train_features(
    train: &[&ClipRecord],
    cfg: &RunConfig,
) -> Result<(AffineScaler, Vec<ClipFeatures>)> {
    if train.is_empty() {
        return Err(Error::Dataset("no training clips".into()));
    }
    let extractor = MelExtractor::new(&cfg.frontend);
    let raw = train
        .iter()
        .map(|r| raw_log_mel(&extractor, r, cfg))
        .collect::<Result<Vec<_>>>()?;
    let scaler = fit_scaler(&raw)?;
    let feats = train
        .iter()
        .zip(&raw)
        .map(|(r, m)| features(r, m, &scaler, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok((scaler, feats))
}

pub fn stack_segments(clips: &[ClipFeatures]) -> Tensor {
    let all: Vec<SpectrogramSegment> = clips
        .iter()
        .flat_map(|c| c.segments.iter().cloned())
        .collect();
    segments_to_tensor(&all)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CachedClip {
    pub record: ClipRecord,
    pub n_frames: usize,
    pub offsets: Vec<usize>,
}

/// Segments of one machine and split, as written by `extract`.
#[derive(Clone, Debug)]
pub struct SegmentCache {
    pub machine: String,
    pub split: Split,
    pub frontend_hash: String,
    pub scaler: AffineScaler,
    pub clips: Vec<CachedClip>,
    /// `[n_segments, 1, 128, 128]` in clip order.
    pub segments: Tensor,
}

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    machine: String,
    split: Split,
    scaler: AffineScaler,
    clips: Vec<CachedClip>,
}

pub const SEGMENT_KIND: &str = "segments";

impl SegmentCache {
    fn from_features(
        machine: &str,
        split: Split,
        frontend_hash: &str,
        scaler: AffineScaler,
        feats: &[ClipFeatures],
    ) -> Self {
        SegmentCache {
            machine: machine.to_string(),
            split,
            frontend_hash: frontend_hash.to_string(),
            scaler,
            clips: feats
                .iter()
                .map(|f| CachedClip {
                    record: f.record.clone(),
                    n_frames: f.n_frames,
                    offsets: f.segments.iter().map(|s| s.frame_offset).collect(),
                })
                .collect(),
            segments: stack_segments(feats),
        }
    }

    pub fn path(dir: &Path, machine: &str, split: Split) -> PathBuf {
        dir.join(machine).join(format!("{split}.seg"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CacheMeta {
            machine: self.machine.clone(),
            split: self.split,
            scaler: self.scaler,
            clips: self.clips.clone(),
        };
        let mut file = ArrayFile::new(
            SEGMENT_KIND,
            &self.frontend_hash,
            serde_json::to_value(meta)?,
        );
        file.push_tensor("segments", &self.segments);
        file.write(path)
    }

    /// Fails with a hash mismatch unless the cache was cut with the
    /// frontend config hashing to `frontend_hash`.
    pub fn load(path: &Path, frontend_hash: &str) -> Result<Self> {
        let mut file = ArrayFile::read(path, SEGMENT_KIND, Some(frontend_hash))?;
        let meta: CacheMeta = file.meta_as()?;
        let segments = file.take_tensor(path, "segments")?;
        let total: usize = meta.clips.iter().map(|c| c.offsets.len()).sum();
        if total != segments.shape()[0] {
            return Err(Error::Format {
                path: path.into(),
                reason: format!(
                    "clip index lists {total} segments, array holds {}",
                    segments.shape()[0]
                ),
            });
        }
        Ok(SegmentCache {
            machine: meta.machine,
            split: meta.split,
            frontend_hash: file.config_hash,
            scaler: meta.scaler,
            clips: meta.clips,
            segments,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExtractMachine {
    pub machine: String,
    pub scaler: AffineScaler,
    pub train_clips: usize,
    pub train_segments: usize,
    pub test_clips: usize,
    pub test_segments: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExtractSummary {
    pub frontend_hash: String,
    pub machines: Vec<ExtractMachine>,
    pub skipped: Vec<(PathBuf, String)>,
}

fn scan(root: &Path) -> Result<ScanReport> {
    let report = scan_dataset(root)?;
    for SkippedFile { path, reason } in &report.skipped {
        log::warn!("skipped {}: {reason}", path.display());
    }
    Ok(report)
}

fn pick_machines(report: &ScanReport, only: &[String]) -> Result<Vec<String>> {
    let all = report.machines();
    if only.is_empty() {
        return Ok(all);
    }
    for m in only {
        if !all.contains(m) {
            return Err(Error::Dataset(format!(
                "machine {m} not found; available: {}",
                all.join(", ")
            )));
        }
    }
    Ok(only.to_vec())
}

/// Fits one scaler per machine on its training clips and caches the
/// scaled segments of both splits under `out/<machine>/`.
pub fn extract(
    root: &Path,
    out: &Path,
    cfg: &RunConfig,
    machines: &[String],
) -> Result<ExtractSummary> {
    cfg.validate()?;
    let report = scan(root)?;
    let frontend_hash = config_hash(&cfg.frontend);
    let mut summary = ExtractSummary {
        frontend_hash: frontend_hash.clone(),
        machines: Vec::new(),
        skipped: report
            .skipped
            .iter()
            .map(|s| (s.path.clone(), s.reason.clone()))
            .collect(),
    };
    for machine in pick_machines(&report, machines)? {
        let dir = out.join(&machine);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let (scaler, train) = fit_train_features(&report.select(&machine, Split::Train), cfg)?;
        let test = clip_features(&report.select(&machine, Split::Test), &scaler, cfg)?;
        let train_cache =
            SegmentCache::from_features(&machine, Split::Train, &frontend_hash, scaler, &train);
        let test_cache =
            SegmentCache::from_features(&machine, Split::Test, &frontend_hash, scaler, &test);
        train_cache.save(&SegmentCache::path(out, &machine, Split::Train))?;
        test_cache.save(&SegmentCache::path(out, &machine, Split::Test))?;
        log::info!(
            "{machine}: {} train / {} test segments",
            train_cache.segments.shape()[0],
            test_cache.segments.shape()[0]
        );
        summary.machines.push(ExtractMachine {
            machine,
            scaler,
            train_clips: train.len(),
            train_segments: train_cache.segments.shape()[0],
            test_clips: test.len(),
            test_segments: test_cache.segments.shape()[0],
        });
    }
    write_json(&out.join("extract_summary.json"), &summary)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml_string()).map_err(|e| Error::io(out, e))?;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub machine: String,
    pub config_hash: String,
    pub checkpoint: PathBuf,
    pub segments: usize,
    pub steps: usize,
    pub epochs: usize,
    pub final_mse: Option<f64>,
    pub aborted: Option<String>,
}

pub fn checkpoint_path(dir: &Path, machine: &str) -> PathBuf {
    dir.join(format!("{machine}.ckpt"))
}

/// Trains one machine from its cached training segments. A failed step
/// (for example a non-finite loss) still leaves the last good parameters
/// in `<machine>.aborted.ckpt` before the error is returned.
pub fn train(cache_dir: &Path, machine: &str, cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let frontend_hash = config_hash(&cfg.frontend);
    let cache = SegmentCache::load(
        &SegmentCache::path(cache_dir, machine, Split::Train),
        &frontend_hash,
    )?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut mean = StreamingMean::default();
    for i in 0..cache.segments.shape()[0] {
        mean.push(cache.segments.sample(i))?;
    }
    let mean = mean.finish(machine, &frontend_hash)?;
    let (generator, critic) = init_models(&cfg.model, cfg.train.seed)?;
    let mut trainer = Trainer::new(generator, critic, cfg.train.clone())?;
    let outcome = trainer.fit(&cache.segments);

    let aborted = outcome.as_ref().err().map(ToString::to_string);
    let ckpt = Checkpoint {
        config: cfg.clone(),
        machine: machine.to_string(),
        scaler: cache.scaler,
        step: trainer.step,
        epoch: trainer.epoch,
        generator: trainer.generator.clone(),
        critic: trainer.critic.clone(),
        mean,
    };
    let path = if aborted.is_some() {
        out.join(format!("{machine}.aborted.ckpt"))
    } else {
        checkpoint_path(out, machine)
    };
    ckpt.save(&path)?;
    write_loss_log(&out.join(format!("{machine}_epochs.csv")), &trainer.epochs)?;
    write_step_log(&out.join(format!("{machine}_steps.csv")), &trainer.steps)?;
    std::fs::write(
        out.join(format!("{machine}_config.toml")),
        cfg.to_toml_string(),
    )
    .map_err(|e| Error::io(out, e))?;
    let summary = TrainSummary {
        machine: machine.to_string(),
        config_hash: cfg.hash(),
        checkpoint: path,
        segments: cache.segments.shape()[0],
        steps: trainer.step,
        epochs: trainer.epoch,
        final_mse: trainer.steps.last().map(|s| s.generator.mse),
        aborted,
    };
    write_json(&out.join(format!("{machine}_train.json")), &summary)?;
    outcome.map(|_| summary)
}

/// The config a score table was produced under: the checkpoint's config with
/// the detection and evaluation sections of the current run.
pub fn scoring_config(ckpt: &Checkpoint, cfg: &RunConfig) -> RunConfig {
    RunConfig {
        detection: cfg.detection.clone(),
        evaluation: cfg.evaluation.clone(),
        ..ckpt.config.clone()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub machine: String,
    pub split: SplitArg,
    pub config_hash: String,
    pub reference_segments: usize,
    pub clips: usize,
    pub segments: usize,
}

pub const SCORES_KIND: &str = "scores";

fn push_clips(
    table: &mut ScoreTable,
    clips: &[ClipFeatures],
    scores: &[SegmentScores],
    cfg: &RunConfig,
) -> Result<()> {
    let mut at = 0;
    for c in clips {
        let n = c.segments.len();
        let r = &c.record;
        table.push_clip(
            &ClipMeta {
                clip_id: &r.clip_id,
                machine: &r.machine,
                section: r.section,
                domain: r.domain,
                label: r.label,
            },
            &scores[at..at + n],
            cfg.detection.aggregation,
        )?;
        at += n;
    }
    Ok(())
}

/// Scores every clip of the checkpoint's machine in `split` under all
/// twelve score variants. Training clips are scored against a reference
/// that excludes each segment from its own neighbourhood.
pub fn score(
    ckpt_path: &Path,
    root: &Path,
    split: SplitArg,
    cfg: &RunConfig,
    out: &Path,
) -> Result<(ScoreTable, ScoreSummary)> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let run = scoring_config(&ckpt, cfg);
    run.validate()?;
    let report = scan(root)?;
    let train_records = report.select(&ckpt.machine, Split::Train);
    let train = clip_features(&train_records, &ckpt.scaler, &run)?;
    let reference = stack_segments(&train);
    let scorer = Scorer::fit(&ckpt.generator, &ckpt.critic, &reference, &run.detection)?;
    let mut table = ScoreTable::default();
    let (clips, segments) = match split {
        SplitArg::Train => {
            let scores = scorer.score_reference(&reference)?;
            push_clips(&mut table, &train, &scores, &run)?;
            (train.len(), reference.shape()[0])
        }
        SplitArg::Dev | SplitArg::Eval => {
            let records = report.select(&ckpt.machine, split.directory());
            if records.is_empty() {
                return Err(Error::Dataset(format!(
                    "no {split} clips for machine {}",
                    ckpt.machine
                )));
            }
            let feats = clip_features(&records, &ckpt.scaler, &run)?;
            let mut segments = 0;
            for f in &feats {
                let scores = scorer.score(&segments_to_tensor(&f.segments))?;
                push_clips(&mut table, std::slice::from_ref(f), &scores, &run)?;
                segments += f.segments.len();
            }
            (feats.len(), segments)
        }
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    table.write_csv(out)?;
    let summary = ScoreSummary {
        machine: ckpt.machine.clone(),
        split,
        config_hash: run.hash(),
        reference_segments: reference.shape()[0],
        clips,
        segments,
    };
    write_provenance(
        out,
        &Provenance {
            kind: SCORES_KIND.into(),
            config_hash: run.hash(),
            meta: serde_json::to_value(&summary)?,
        },
    )?;
    Ok((table, summary))
}

/// Reads score tables and checks that they all come from one config.
pub fn load_scores(paths: &[PathBuf]) -> Result<(ScoreTable, Option<String>)> {
    let mut table = ScoreTable::default();
    let mut hash: Option<String> = None;
    for p in paths {
        let part = ScoreTable::read_csv(p)?;
        let sidecar = crate::store::sidecar_path(p);
        if sidecar.exists() {
            let prov = read_provenance(p)?;
            if prov.kind != SCORES_KIND {
                return Err(Error::Format {
                    path: p.clone(),
                    reason: format!("expected a {SCORES_KIND} artifact, found {}", prov.kind),
                });
            }
            match &hash {
                Some(h) => check_hash(p, h, &prov.config_hash)?,
                None => hash = Some(prov.config_hash),
            }
        }
        table.rows.extend(part.rows);
    }
    Ok((table, hash))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MachineSelection {
    pub selection: Selection,
    /// Fitted on the training-clip scores of the selected variant, when
    /// those were supplied.
    pub threshold: Option<Threshold>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionFile {
    pub config_hash: Option<String>,
    pub max_fpr: f64,
    pub machines: BTreeMap<String, MachineSelection>,
}

/// Best score variant per machine on the labelled table, plus a gamma
/// threshold from `train` when given.
pub fn select(
    table: &ScoreTable,
    train: Option<&ScoreTable>,
    cfg: &RunConfig,
    config_hash: Option<String>,
) -> Result<SelectionFile> {
    let mut machines = BTreeMap::new();
    for machine in table.machines() {
        let selection = select_best_score(table, &machine, cfg.evaluation.max_fpr)?;
        let threshold = match train {
            Some(t) => {
                let scores: Vec<f64> = t
                    .clip_scores(&machine, selection.score_name)
                    .iter()
                    .map(|c| c.score)
                    .collect();
                Some(fit_threshold(&scores, cfg.detection.threshold_percentile)?)
            }
            None => None,
        };
        machines.insert(
            machine,
            MachineSelection {
                selection,
                threshold,
            },
        );
    }
    Ok(SelectionFile {
        config_hash,
        max_fpr: cfg.evaluation.max_fpr,
        machines,
    })
}

pub fn select_files(
    dev: &[PathBuf],
    train: &[PathBuf],
    cfg: &RunConfig,
    out: &Path,
) -> Result<SelectionFile> {
    let (table, hash) = load_scores(dev)?;
    let train_table = if train.is_empty() {
        None
    } else {
        let (t, train_hash) = load_scores(train)?;
        if let (Some(h), Some(th)) = (&hash, &train_hash) {
            check_hash(&train[0], h, th)?;
        }
        Some(t)
    };
    let file = select(&table, train_table.as_ref(), cfg, hash)?;
    write_json(out, &file)?;
    Ok(file)
}

/// Which score variant to evaluate for each machine.
pub enum ScoreChoice<'a> {
    Fixed(ScoreName),
    Selected(&'a SelectionFile),
    /// Pick the best variant on the evaluated table itself.
    Best,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvaluateSummary {
    pub config_hash: Option<String>,
    pub scores: BTreeMap<String, ScoreName>,
    pub report: EvalReport,
}

pub fn evaluate_table(
    table: &ScoreTable,
    choice: ScoreChoice<'_>,
    max_fpr: f64,
) -> Result<(BTreeMap<String, ScoreName>, EvalReport)> {
    let mut chosen = BTreeMap::new();
    let mut clips: Vec<ClipScore> = Vec::new();
    for machine in table.machines() {
        let name = match &choice {
            ScoreChoice::Fixed(n) => *n,
            ScoreChoice::Selected(file) => {
                file.machines
                    .get(&machine)
                    .ok_or_else(|| {
                        Error::InvalidInput(format!("selection has no entry for machine {machine}"))
                    })?
                    .selection
                    .score_name
            }
            ScoreChoice::Best => select_best_score(table, &machine, max_fpr)?.score_name,
        };
        let machine_clips = table.clip_scores(&machine, name);
        if machine_clips.iter().any(|c| c.label == Label::Unknown) {
            return Err(Error::UndefinedMetric(format!(
                "machine {machine} has unlabelled clips; evaluation needs labels"
            )));
        }
        clips.extend(machine_clips);
        chosen.insert(machine, name);
    }
    Ok((chosen, evaluate(&clips, max_fpr)?))
}

pub fn evaluate_files(
    scores: &[PathBuf],
    selection: Option<&Path>,
    fixed: Option<ScoreName>,
    cfg: &RunConfig,
    out: &Path,
) -> Result<EvaluateSummary> {
    let (table, hash) = load_scores(scores)?;
    let selection: Option<SelectionFile> = selection.map(read_json).transpose()?;
    if let (Some(sel), Some(h), Some(path)) = (&selection, &hash, &scores.first()) {
        if let Some(sh) = &sel.config_hash {
            check_hash(path, sh, h)?;
        }
    }
    let choice = match (&selection, fixed) {
        (_, Some(n)) => ScoreChoice::Fixed(n),
        (Some(s), None) => ScoreChoice::Selected(s),
        (None, None) => ScoreChoice::Best,
    };
    let (chosen, report) = evaluate_table(&table, choice, cfg.evaluation.max_fpr)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    report.write_csv(&out.join("report.csv"))?;
    std::fs::write(out.join("report.txt"), report.table()).map_err(|e| Error::io(out, e))?;
    let summary = EvaluateSummary {
        config_hash: hash,
        scores: chosen,
        report,
    };
    write_json(&out.join("report.json"), &summary)?;
    Ok(summary)
}

/// Features of a single audio file scaled with a checkpoint's scaler.
pub fn single_clip(ckpt: &Checkpoint, clip: &Path) -> Result<ClipFeatures> {
    let stem = clip
        .file_stem()
        .map_or_else(|| "clip".into(), |s| s.to_string_lossy().into_owned());
    let (section, domain, label) =
        crate::data::parse_clip_name(&stem).unwrap_or((0, crate::data::Domain::Source, None));
    let record = ClipRecord {
        path: clip.to_path_buf(),
        clip_id: stem,
        machine: ckpt.machine.clone(),
        section,
        domain,
        split: Split::Test,
        label: label.unwrap_or(Label::Unknown),
    };
    let extractor = MelExtractor::new(&ckpt.config.frontend);
    features(
        &record,
        &raw_log_mel(&extractor, &record, &ckpt.config)?,
        &ckpt.scaler,
        &ckpt.config,
    )
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LocalizeSummary {
    pub clip: PathBuf,
    pub config_hash: String,
    pub residual: Residual,
    pub n_frames: usize,
    pub segments: Vec<(usize, f64)>,
    pub clip_max: f64,
}

/// Per-segment and stitched clip-level heatmaps as PNG and CSV pairs.
pub fn localize_clip(
    ckpt_path: &Path,
    clip: &Path,
    residual: Residual,
    out: &Path,
) -> Result<LocalizeSummary> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let feats = single_clip(&ckpt, clip)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let maps = localize(&ckpt.generator, &ckpt.mean, &feats.segments, residual)?;
    let mut segments = Vec::new();
    for m in &maps {
        render(
            out,
            &format!("segment_{:05}", m.frame_offset),
            &m.reconstruction,
            &ckpt.mean.values,
            &m.heatmap.values,
            crate::config::SEGMENT_SIZE,
        )?;
        segments.push((m.frame_offset, m.heatmap.max()));
    }
    let width = feats.n_frames;
    let stitched = |get: &dyn Fn(usize) -> Vec<f64>| -> Result<Vec<f64>> {
        let owned: Vec<(usize, Vec<f64>)> = maps
            .iter()
            .enumerate()
            .map(|(i, m)| (m.frame_offset, get(i)))
            .collect();
        let refs: Vec<(usize, &[f64])> = owned.iter().map(|(o, v)| (*o, v.as_slice())).collect();
        Ok(stitch(&refs, width)?.values)
    };
    let recon = stitched(&|i| maps[i].reconstruction.clone())?;
    let mean = stitched(&|_| ckpt.mean.values.clone())?;
    let heat = stitched(&|i| maps[i].heatmap.values.clone())?;
    render(out, "clip", &recon, &mean, &heat, width)?;
    let summary = LocalizeSummary {
        clip: clip.to_path_buf(),
        config_hash: ckpt.config_hash(),
        residual,
        n_frames: feats.n_frames,
        segments,
        clip_max: heat.iter().copied().fold(0.0, f64::max),
    };
    write_json(&out.join("localize.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsNet {
    Generator,
    Critic,
}
text_enum!(StatsNet { Generator => "generator", Critic => "critic" });

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StatsSummary {
    pub clip: PathBuf,
    pub config_hash: String,
    pub net: StatsNet,
    /// Channels of every layer-norm layer in forward order; each
    /// contributes `2 · channels` features (means, then deviations).
    pub layer_channels: Vec<usize>,
    pub segments: usize,
    pub features: usize,
}

/// Layer-norm statistics of every segment of a clip, one CSV row each.
pub fn ln_stats(ckpt_path: &Path, clip: &Path, net: StatsNet, out: &Path) -> Result<StatsSummary> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    if net == StatsNet::Generator && ckpt.generator.norm_kind() != crate::model::NormKind::Layer {
        return Err(Error::Config(
            "the checkpoint's generator uses batch norm; layer-norm statistics exist only for the critic".into(),
        ));
    }
    let feats = single_clip(&ckpt, clip)?;
    let x = segments_to_tensor(&feats.segments);
    let stats = export_ln_stats(
        match net {
            StatsNet::Generator => StatsSource::Generator(&ckpt.generator),
            StatsNet::Critic => StatsSource::Critic(&ckpt.critic),
        },
        &x,
    )?;
    let mut w = csv::Writer::from_path(out)?;
    let width = stats.flat(0).len();
    let mut header = vec!["clip_id".to_string(), "frame_offset".to_string()];
    header.extend((0..width).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for (i, s) in feats.segments.iter().enumerate() {
        let mut row = vec![s.clip_id.clone(), s.frame_offset.to_string()];
        row.extend(stats.flat(i).iter().map(|v| format!("{v:e}")));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    let summary = StatsSummary {
        clip: clip.to_path_buf(),
        config_hash: ckpt.config_hash(),
        net,
        layer_channels: stats
            .layers
            .iter()
            .map(|l| l.mean.first().map_or(0, Vec::len))
            .collect(),
        segments: feats.segments.len(),
        features: width,
    };
    write_provenance(
        out,
        &Provenance {
            kind: "ln_stats".into(),
            config_hash: ckpt.config_hash(),
            meta: serde_json::to_value(&summary)?,
        },
    )?;
    Ok(summary)
}
