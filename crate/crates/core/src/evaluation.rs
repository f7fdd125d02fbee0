//! AUC, partial AUC and harmonic-mean reporting.
//!
//! Per section, each domain's AUC uses every anomalous clip of the section
//! as positives and only that domain's normal clips as negatives. The
//! partial AUC is computed once per section over both domains.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Domain, Label};
use crate::error::{Error, Result};

fn split_classes<'a>(scores: &'a [f64], labels: &'a [bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::shape(scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numerical("NaN score".into()));
    }
    let p = labels.iter().filter(|&&l| l).count();
    let n = labels.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes; got {p} positives and {n} negatives"
        )));
    }
    Ok((p, n))
}

/// Mann–Whitney AUC with half credit for ties, via mid-ranks.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (p, n) = split_classes(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (p * (p + 1)) as f64 / 2.0;
    Ok(u / (p as f64 * n as f64))
}

/// ROC vertices `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one per distinct
/// score, thresholds descending.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (p, n) = split_classes(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push((fp as f64 / n as f64, tp as f64 / p as f64));
    }
    Ok(pts)
}

/// Area under the ROC for `fpr ∈ [0, max_fpr]` divided by `max_fpr`.
pub fn pauc(scores: &[f64], labels: &[bool], max_fpr: f64) -> Result<f64> {
    if !(max_fpr > 0.0 && max_fpr <= 1.0) {
        return Err(Error::Config(format!("max_fpr {max_fpr} outside (0, 1]")));
    }
    let pts = roc_curve(scores, labels)?;
    let mut area = 0.0;
    for w in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= max_fpr {
            break;
        }
        if x1 <= max_fpr {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (max_fpr - x0) / (x1 - x0);
            area += (max_fpr - x0) * (y0 + y) / 2.0;
            break;
        }
    }
    Ok(area / max_fpr)
}

/// Harmonic mean; a zero input makes the result 0 and sets the flag.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarmonicMean {
    pub value: f64,
    pub has_zero: bool,
}

pub fn harmonic_mean(values: &[f64]) -> Result<HarmonicMean> {
    if values.is_empty() {
        return Err(Error::UndefinedMetric("harmonic mean of no values".into()));
    }
    if values.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidInput(format!(
            "harmonic mean needs nonnegative inputs: {values:?}"
        )));
    }
    if values.contains(&0.0) {
        return Ok(HarmonicMean {
            value: 0.0,
            has_zero: true,
        });
    }
    Ok(HarmonicMean {
        value: values.len() as f64 / values.iter().map(|v| 1.0 / v).sum::<f64>(),
        has_zero: false,
    })
}

/// One clip's score with the metadata the protocol needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipScore {
    pub clip_id: String,
    pub machine: String,
    pub section: u32,
    pub domain: Domain,
    pub label: Label,
    pub score: f64,
}

fn labelled<'a>(clips: impl Iterator<Item = &'a ClipScore>) -> (Vec<f64>, Vec<bool>) {
    clips
        .filter(|c| c.label != Label::Unknown)
        .map(|c| (c.score, c.label == Label::Anomaly))
        .unzip()
}

/// AUC of one (section, domain): all anomalies of the section against the
/// domain's normals.
pub fn domain_auc(clips: &[ClipScore], section: u32, domain: Domain) -> Result<f64> {
    let in_section = clips.iter().filter(|c| c.section == section);
    let selected = in_section
        .filter(|c| c.label == Label::Anomaly || (c.label == Label::Normal && c.domain == domain));
    let (scores, labels) = labelled(selected);
    if !labels.iter().any(|l| !l) {
        return Err(Error::Dataset(format!(
            "section {section} has no normal {domain} clips"
        )));
    }
    auc(&scores, &labels)
}

pub fn section_pauc(clips: &[ClipScore], section: u32, max_fpr: f64) -> Result<f64> {
    let (scores, labels) = labelled(clips.iter().filter(|c| c.section == section));
    pauc(&scores, &labels, max_fpr)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectionReport {
    pub section: u32,
    /// `(domain, auc)` for each domain with normal clips.
    pub auc: Vec<(Domain, f64)>,
    pub pauc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MachineReport {
    pub machine: String,
    pub sections: Vec<SectionReport>,
    pub hmean: HarmonicMean,
}

impl MachineReport {
    /// Every value entering the harmonic mean.
    pub fn metric_values(&self) -> Vec<f64> {
        self.sections
            .iter()
            .flat_map(|s| s.auc.iter().map(|(_, a)| *a).chain([s.pauc]))
            .collect()
    }
}

/// Evaluates the labelled clips of one machine.
pub fn evaluate_machine(machine: &str, clips: &[ClipScore], max_fpr: f64) -> Result<MachineReport> {
    let own: Vec<ClipScore> = clips
        .iter()
        .filter(|c| c.machine == machine && c.label != Label::Unknown)
        .cloned()
        .collect();
    if own.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "no labelled clips for machine {machine}"
        )));
    }
    let sections: BTreeSet<u32> = own.iter().map(|c| c.section).collect();
    let mut reports = Vec::new();
    for section in sections {
        let domains: BTreeSet<Domain> = own
            .iter()
            .filter(|c| c.section == section && c.label == Label::Normal)
            .map(|c| c.domain)
            .collect();
        let auc = domains
            .into_iter()
            .map(|d| domain_auc(&own, section, d).map(|a| (d, a)))
            .collect::<Result<Vec<_>>>()?;
        reports.push(SectionReport {
            section,
            auc,
            pauc: section_pauc(&own, section, max_fpr)?,
        });
    }
    let mut report = MachineReport {
        machine: machine.to_string(),
        sections: reports,
        hmean: HarmonicMean {
            value: 0.0,
            has_zero: false,
        },
    };
    report.hmean = harmonic_mean(&report.metric_values())?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub max_fpr: f64,
    pub machines: Vec<MachineReport>,
    pub overall: HarmonicMean,
}

pub fn evaluate(clips: &[ClipScore], max_fpr: f64) -> Result<EvalReport> {
    let machines: BTreeSet<&str> = clips.iter().map(|c| c.machine.as_str()).collect();
    let reports = machines
        .into_iter()
        .map(|m| evaluate_machine(m, clips, max_fpr))
        .collect::<Result<Vec<_>>>()?;
    let hmeans: Vec<f64> = reports.iter().map(|r| r.hmean.value).collect();
    let overall = harmonic_mean(&hmeans)?;
    Ok(EvalReport {
        max_fpr,
        machines: reports,
        overall,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub machine: String,
    pub section: Option<u32>,
    /// `source`, `target`, or empty for section- and machine-level rows.
    pub domain: Option<Domain>,
    pub metric: String,
    pub value: f64,
}

impl EvalReport {
    pub fn rows(&self) -> Vec<ReportRow> {
        let mut rows = Vec::new();
        for m in &self.machines {
            for s in &m.sections {
                for (d, a) in &s.auc {
                    rows.push(ReportRow {
                        machine: m.machine.clone(),
                        section: Some(s.section),
                        domain: Some(*d),
                        metric: "auc".into(),
                        value: *a,
                    });
                }
                rows.push(ReportRow {
                    machine: m.machine.clone(),
                    section: Some(s.section),
                    domain: None,
                    metric: "pauc".into(),
                    value: s.pauc,
                });
            }
            rows.push(ReportRow {
                machine: m.machine.clone(),
                section: None,
                domain: None,
                metric: "hmean".into(),
                value: m.hmean.value,
            });
        }
        rows.push(ReportRow {
            machine: "all".into(),
            section: None,
            domain: None,
            metric: "hmean".into(),
            value: self.overall.value,
        });
        rows
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in self.rows() {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Percentages laid out one machine per row: per-section source and
    /// target AUC, section pAUC, machine hmean; then the overall hmean.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12} {:>7} {:>9} {:>9} {:>9} {:>9}",
            "machine", "section", "AUC(src)", "AUC(tgt)", "pAUC", "hmean"
        );
        let pct =
            |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x));
        for m in &self.machines {
            for (i, s) in m.sections.iter().enumerate() {
                let get = |d| s.auc.iter().find(|(dd, _)| *dd == d).map(|(_, a)| *a);
                let _ = writeln!(
                    out,
                    "{:<12} {:>7} {:>9} {:>9} {:>9} {:>9}",
                    if i == 0 { m.machine.as_str() } else { "" },
                    format!("{:02}", s.section),
                    pct(get(Domain::Source)),
                    pct(get(Domain::Target)),
                    pct(Some(s.pauc)),
                    if i == 0 {
                        pct(Some(m.hmean.value))
                    } else {
                        String::new()
                    },
                );
            }
        }
        let flag = if self.overall.has_zero {
            " (a metric was 0)"
        } else {
            ""
        };
        let _ = writeln!(out, "overall hmean {}{flag}", pct(Some(self.overall.value)));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_aucs() {
        let labels = [true, true, false, false];
        assert_eq!(auc(&[0.9, 0.8, 0.1, 0.2], &labels).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.8, 0.85, 0.7], &labels).unwrap(), 0.75);
        assert_eq!(auc(&[0.3; 4], &labels).unwrap(), 0.5);
        assert!(matches!(
            auc(&[0.1, 0.2], &[true, true]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn pauc_limits() {
        let labels = [true, true, false, false, false];
        let s = [0.9, 0.4, 0.5, 0.1, 0.45];
        assert!((pauc(&s, &labels, 1.0).unwrap() - auc(&s, &labels).unwrap()).abs() < 1e-12);
        assert_eq!(
            pauc(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false], 0.1).unwrap(),
            1.0
        );
        assert!(pauc(&s, &labels, 0.0).is_err());
    }

    #[test]
    fn harmonic_mean_values() {
        assert!((harmonic_mean(&[1.0, 0.5]).unwrap().value - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(harmonic_mean(&[0.7; 5]).unwrap().value, 0.7);
        let z = harmonic_mean(&[0.5, 0.0]).unwrap();
        assert!(z.has_zero && z.value == 0.0);
    }

    fn clip(section: u32, domain: Domain, label: Label, score: f64) -> ClipScore {
        ClipScore {
            clip_id: format!("{section}{domain}{label}{score}"),
            machine: "m".into(),
            section,
            domain,
            label,
            score,
        }
    }

    #[test]
    fn target_normals_above_anomalies() {
        let clips = vec![
            clip(0, Domain::Source, Label::Normal, 0.1),
            clip(0, Domain::Source, Label::Normal, 0.2),
            clip(0, Domain::Target, Label::Normal, 0.95),
            clip(0, Domain::Target, Label::Normal, 0.97),
            clip(0, Domain::Source, Label::Anomaly, 0.8),
            clip(0, Domain::Target, Label::Anomaly, 0.9),
        ];
        assert_eq!(domain_auc(&clips, 0, Domain::Source).unwrap(), 1.0);
        assert!(domain_auc(&clips, 0, Domain::Target).unwrap() < 0.5);
        assert!(domain_auc(&clips, 1, Domain::Source).is_err());
        let report = evaluate(&clips, 0.1).unwrap();
        assert_eq!(report.machines[0].metric_values().len(), 3);
        assert!(report.table().contains("overall hmean"));
    }
}
