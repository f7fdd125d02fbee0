//! The twelve anomaly scores, clip aggregation, best-score selection and
//! the decision threshold.
//!
//! Generator scores compare a segment with its reconstruction, in sample
//! space and in latent space (the code of the segment against the code of
//! its reconstruction), under L2, L1 and cosine distance. Embedding scores
//! run KNN, LOF and distance-to-mean on critic embeddings against the
//! training reference, under cosine and Mahalanobis distance. Every score
//! grows with anomalousness.

mod reference;
mod threshold;

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use reference::{
    cosine_distance, euclidean, sample_covariance, EmbeddingMetric, LofModel, ReferenceSet, LRD_EPS,
};
pub use threshold::{
    classify, digamma, fit_threshold, gamma_mle, gamma_p, gamma_quantile, ln_gamma, trigamma,
    GammaFit, Threshold, MIN_THRESHOLD_SCORES,
};

use crate::autograd::Tensor;
use crate::config::{Aggregation, DetectionConfig};
use crate::data::{Domain, Label};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_machine, ClipScore};
use crate::model::{EmbeddingModel, Reconstructor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreName {
    GenSampleL2,
    GenSampleL1,
    GenSampleCos,
    GenLatentL2,
    GenLatentL1,
    GenLatentCos,
    EmbKnnCos,
    EmbKnnMaha,
    EmbLofCos,
    EmbLofMaha,
    EmbMeanCos,
    EmbMeanMaha,
}
text_enum!(ScoreName {
    GenSampleL2 => "gen_sample_l2",
    GenSampleL1 => "gen_sample_l1",
    GenSampleCos => "gen_sample_cos",
    GenLatentL2 => "gen_latent_l2",
    GenLatentL1 => "gen_latent_l1",
    GenLatentCos => "gen_latent_cos",
    EmbKnnCos => "emb_knn_cos",
    EmbKnnMaha => "emb_knn_maha",
    EmbLofCos => "emb_lof_cos",
    EmbLofMaha => "emb_lof_maha",
    EmbMeanCos => "emb_mean_cos",
    EmbMeanMaha => "emb_mean_maha",
});

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Perspective {
    Generator,
    Embedding,
}

impl ScoreName {
    /// Column order of [`SegmentScores`].
    pub const ALL: [ScoreName; 12] = [
        ScoreName::GenSampleL2,
        ScoreName::GenSampleL1,
        ScoreName::GenSampleCos,
        ScoreName::GenLatentL2,
        ScoreName::GenLatentL1,
        ScoreName::GenLatentCos,
        ScoreName::EmbKnnCos,
        ScoreName::EmbKnnMaha,
        ScoreName::EmbLofCos,
        ScoreName::EmbLofMaha,
        ScoreName::EmbMeanCos,
        ScoreName::EmbMeanMaha,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn perspective(self) -> Perspective {
        if self.index() < 6 {
            Perspective::Generator
        } else {
            Perspective::Embedding
        }
    }
}

/// All twelve scores of one segment, indexed by [`ScoreName::index`].
pub type SegmentScores = [f64; 12];

/// `[‖d‖₂, ‖d‖₁, 1 − cos(a, b)]` with `d = a − b`.
pub fn residual_scores(a: &[f64], b: &[f64]) -> [f64; 3] {
    let (mut l2, mut l1) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        l2 += d * d;
        l1 += d.abs();
    }
    [l2.sqrt(), l1, cosine_distance(a, b)]
}

/// The six generator-side scores of each segment in `x` (`[n, 1, 128, 128]`).
pub fn generator_scores(g: &dyn Reconstructor, x: &Tensor) -> Result<Vec<[f64; 6]>> {
    let recon = g.reconstruct_tensor(x)?;
    let z = g.encode_tensor(x)?;
    let z_recon = g.encode_tensor(&recon)?;
    if recon.shape() != x.shape() || z.shape() != z_recon.shape() {
        return Err(Error::shape(x.shape(), recon.shape()));
    }
    Ok((0..x.shape()[0])
        .map(|i| {
            let s = residual_scores(x.sample(i), recon.sample(i));
            let l = residual_scores(z.sample(i), z_recon.sample(i));
            [s[0], s[1], s[2], l[0], l[1], l[2]]
        })
        .collect())
}

/// Flattens `[n, e, 1, 1]` embeddings into rows.
pub fn embedding_rows(emb: &Tensor) -> Vec<Vec<f64>> {
    (0..emb.shape()[0])
        .map(|i| emb.sample(i).to_vec())
        .collect()
}

pub fn build_reference(
    critic: &dyn EmbeddingModel,
    x: &Tensor,
    shrinkage: f64,
) -> Result<ReferenceSet> {
    ReferenceSet::build(embedding_rows(&critic.embed_tensor(x)?), shrinkage)
}

/// KNN, LOF and distance-to-mean detectors over one reference set.
pub struct EmbeddingDetectors {
    pub reference: ReferenceSet,
    lof_cos: LofModel,
    lof_maha: LofModel,
    knn_k: usize,
}

impl EmbeddingDetectors {
    pub fn new(reference: ReferenceSet, cfg: &DetectionConfig) -> Result<Self> {
        Ok(EmbeddingDetectors {
            lof_cos: reference.lof_model(cfg.lof_neighbors, EmbeddingMetric::Cosine)?,
            lof_maha: reference.lof_model(cfg.lof_neighbors, EmbeddingMetric::Mahalanobis)?,
            knn_k: {
                if cfg.knn_k == 0 || cfg.knn_k >= reference.len() {
                    return Err(Error::Config(format!(
                        "knn_k = {} must lie in [1, {})",
                        cfg.knn_k,
                        reference.len()
                    )));
                }
                cfg.knn_k
            },
            reference,
        })
    }

    /// `[knn cos, knn maha, lof cos, lof maha, mean cos, mean maha]`.
    pub fn scores(&self, query: &[f64], exclude: Option<usize>) -> Result<[f64; 6]> {
        let r = &self.reference;
        Ok([
            r.knn(query, self.knn_k, EmbeddingMetric::Cosine, exclude)?,
            r.knn(query, self.knn_k, EmbeddingMetric::Mahalanobis, exclude)?,
            r.lof(query, &self.lof_cos, exclude)?,
            r.lof(query, &self.lof_maha, exclude)?,
            r.dist_to_mean(query, EmbeddingMetric::Cosine)?,
            r.dist_to_mean(query, EmbeddingMetric::Mahalanobis)?,
        ])
    }
}

/// Everything needed to score segments of one machine.
pub struct Scorer<'a> {
    pub generator: &'a dyn Reconstructor,
    pub critic: &'a dyn EmbeddingModel,
    pub detectors: EmbeddingDetectors,
}

fn join(g: [f64; 6], e: [f64; 6]) -> SegmentScores {
    let mut out = [0.0; 12];
    out[..6].copy_from_slice(&g);
    out[6..].copy_from_slice(&e);
    out
}

impl<'a> Scorer<'a> {
    /// Builds the reference from the training segments `train`.
    pub fn fit(
        generator: &'a dyn Reconstructor,
        critic: &'a dyn EmbeddingModel,
        train: &Tensor,
        cfg: &DetectionConfig,
    ) -> Result<Self> {
        let reference = build_reference(critic, train, cfg.shrinkage)?;
        Ok(Scorer {
            generator,
            critic,
            detectors: EmbeddingDetectors::new(reference, cfg)?,
        })
    }

    /// Scores of segments that are not part of the reference.
    pub fn score(&self, x: &Tensor) -> Result<Vec<SegmentScores>> {
        let gen = generator_scores(self.generator, x)?;
        let emb = embedding_rows(&self.critic.embed_tensor(x)?);
        gen.into_iter()
            .zip(&emb)
            .map(|(g, e)| Ok(join(g, self.detectors.scores(e, None)?)))
            .collect()
    }

    /// Scores of the reference segments themselves, in reference order;
    /// each one is excluded from its own neighbour search.
    pub fn score_reference(&self, x: &Tensor) -> Result<Vec<SegmentScores>> {
        let reference = &self.detectors.reference;
        if x.shape()[0] != reference.len() {
            return Err(Error::shape(reference.len(), x.shape()[0]));
        }
        let gen = generator_scores(self.generator, x)?;
        gen.into_iter()
            .enumerate()
            .map(|(i, g)| {
                Ok(join(
                    g,
                    self.detectors.scores(&reference.embeddings()[i], Some(i))?,
                ))
            })
            .collect()
    }
}

/// Clip score from segment scores.
pub fn aggregate(segment_scores: &[f64], mode: Aggregation) -> Result<f64> {
    if segment_scores.is_empty() {
        return Err(Error::InvalidInput(
            "cannot aggregate zero segment scores".into(),
        ));
    }
    Ok(match mode {
        Aggregation::Mean => segment_scores.iter().sum::<f64>() / segment_scores.len() as f64,
        Aggregation::Max => segment_scores
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max),
    })
}

/// One (clip, score) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub clip_id: String,
    pub machine: String,
    pub section: u32,
    pub domain: Domain,
    pub label: Label,
    pub score_name: ScoreName,
    pub score: f64,
}

/// Clip-level scores for every score variant.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
}

/// Metadata of a clip whose segments were scored.
#[derive(Clone, Debug)]
pub struct ClipMeta<'a> {
    pub clip_id: &'a str,
    pub machine: &'a str,
    pub section: u32,
    pub domain: Domain,
    pub label: Label,
}

impl ScoreTable {
    /// Adds one row per score variant for a clip.
    pub fn push_clip(
        &mut self,
        meta: &ClipMeta<'_>,
        segments: &[SegmentScores],
        mode: Aggregation,
    ) -> Result<()> {
        for name in ScoreName::ALL {
            let column: Vec<f64> = segments.iter().map(|s| s[name.index()]).collect();
            self.rows.push(ScoreRow {
                clip_id: meta.clip_id.to_string(),
                machine: meta.machine.to_string(),
                section: meta.section,
                domain: meta.domain,
                label: meta.label,
                score_name: name,
                score: aggregate(&column, mode)?,
            });
        }
        Ok(())
    }

    pub fn machines(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.rows.iter().map(|r| r.machine.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn clip_scores(&self, machine: &str, name: ScoreName) -> Vec<ClipScore> {
        self.rows
            .iter()
            .filter(|r| r.machine == machine && r.score_name == name)
            .map(|r| ClipScore {
                clip_id: r.clip_id.clone(),
                machine: r.machine.clone(),
                section: r.section,
                domain: r.domain,
                label: r.label,
                score: r.score,
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<ScoreRow>, _>>()?;
        Ok(ScoreTable { rows })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub machine: String,
    pub score_name: ScoreName,
    pub hmean: f64,
    /// Harmonic mean of every candidate, in lexicographic name order.
    pub candidates: Vec<(ScoreName, f64)>,
}

/// The score variant with the highest harmonic mean on labelled clips;
/// ties go to the lexicographically first name.
pub fn select_best_score(table: &ScoreTable, machine: &str, max_fpr: f64) -> Result<Selection> {
    let mut names = ScoreName::ALL.to_vec();
    names.sort_by_key(|n| n.as_str());
    let mut candidates = Vec::new();
    for name in names {
        let clips = table.clip_scores(machine, name);
        if !clips.iter().any(|c| c.label != Label::Unknown) {
            return Err(Error::UndefinedMetric(format!(
                "no labelled clips for machine {machine}; selection needs labelled data"
            )));
        }
        candidates.push((
            name,
            evaluate_machine(machine, &clips, max_fpr)?.hmean.value,
        ));
    }
    let (score_name, hmean) = candidates
        .iter()
        .copied()
        .fold(None, |best: Option<(ScoreName, f64)>, (n, h)| match best {
            Some((_, bh)) if bh >= h => best,
            _ => Some((n, h)),
        })
        .ok_or_else(|| Error::UndefinedMetric("no score variants".into()))?;
    Ok(Selection {
        machine: machine.to_string(),
        score_name,
        hmean,
        candidates,
    })
}
