//! Corpus ingestion and a seeded synthetic corpus with planted anomalies.
//!
//! Expected layout (the synthetic generator writes the same tree):
//!
//! ```text
//! <root>/<machine>/train/section_00_source_train_normal_0001.wav
//! <root>/<machine>/test/section_00_target_test_anomaly_0007.wav
//! ```

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}
text_enum!(Domain { Source => "source", Target => "target" });

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}
text_enum!(Split { Train => "train", Test => "test" });

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Anomaly,
    Unknown,
}
text_enum!(Label { Normal => "normal", Anomaly => "anomaly", Unknown => "unknown" });

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub path: PathBuf,
    /// `<machine>/<split>/<file stem>`
    pub clip_id: String,
    pub machine: String,
    pub section: u32,
    pub domain: Domain,
    pub split: Split,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct ScanReport {
    pub records: Vec<ClipRecord>,
    pub skipped: Vec<SkippedFile>,
}

impl ScanReport {
    pub fn machines(&self) -> Vec<String> {
        let mut m: Vec<String> = self.records.iter().map(|r| r.machine.clone()).collect();
        m.dedup();
        m.sort();
        m.dedup();
        m
    }

    pub fn select(&self, machine: &str, split: Split) -> Vec<&ClipRecord> {
        self.records
            .iter()
            .filter(|r| r.machine == machine && r.split == split)
            .collect()
    }
}

/// Parses the tokens of a file name; the split comes from the directory.
pub fn parse_clip_name(
    file_name: &str,
) -> std::result::Result<(u32, Domain, Option<Label>), String> {
    let stem = file_name
        .rsplit_once('.')
        .map_or(file_name, |(stem, _)| stem);
    let tokens: Vec<&str> = stem.split('_').collect();
    let section = tokens
        .windows(2)
        .find(|w| w[0] == "section")
        .ok_or("no section_NN token")?[1]
        .parse::<u32>()
        .map_err(|e| format!("bad section number: {e}"))?;
    let domain = tokens
        .iter()
        .find_map(|t| t.parse::<Domain>().ok())
        .ok_or("no source/target token")?;
    let label = tokens.iter().find_map(|t| match *t {
        "normal" => Some(Label::Normal),
        "anomaly" => Some(Label::Anomaly),
        _ => None,
    });
    Ok((section, domain, label))
}

/// Lists every `.wav` clip under `root`, ordered by path. Files whose names
/// do not follow the schema are listed in the skip report.
pub fn scan_dataset(root: &Path) -> Result<ScanReport> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!(
            "{} is not a directory",
            root.display()
        )));
    }
    let mut report = ScanReport::default();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Dataset(e.to_string()))?;
        let path = entry.path();
        let is_wav = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
        if !entry.file_type().is_file() || !is_wav {
            continue;
        }
        match record_for(root, path)? {
            Ok(rec) => report.records.push(rec),
            Err(reason) => report.skipped.push(SkippedFile {
                path: path.to_path_buf(),
                reason,
            }),
        }
    }
    if report.records.is_empty() {
        return Err(Error::Dataset(format!(
            "no parseable clips under {} ({} skipped)",
            root.display(),
            report.skipped.len()
        )));
    }
    Ok(report)
}

/// Outer error: invariant violation that aborts the scan. Inner error:
/// reason to skip the file.
fn record_for(root: &Path, path: &Path) -> Result<std::result::Result<ClipRecord, String>> {
    let rel: Vec<String> = match path.strip_prefix(root) {
        Ok(r) => r.iter().map(|c| c.to_string_lossy().into_owned()).collect(),
        Err(_) => return Ok(Err("outside the dataset root".into())),
    };
    if rel.len() < 3 {
        return Ok(Err("expected <machine>/<train|test>/<file>.wav".into()));
    }
    let (machine, split_dir, file) = (
        &rel[rel.len() - 3],
        &rel[rel.len() - 2],
        &rel[rel.len() - 1],
    );
    let Ok(split) = split_dir.parse::<Split>() else {
        return Ok(Err(format!(
            "directory '{split_dir}' is neither train nor test"
        )));
    };
    let (section, domain, label) = match parse_clip_name(file) {
        Ok(parsed) => parsed,
        Err(reason) => return Ok(Err(reason)),
    };
    let label = match (split, label) {
        (Split::Train, Some(Label::Anomaly)) => {
            return Err(Error::Dataset(format!(
                "{}: anomalous clip in a training split; training data must be normal",
                path.display()
            )))
        }
        (Split::Train, _) => Label::Normal,
        (Split::Test, l) => l.unwrap_or(Label::Unknown),
    };
    let stem = Path::new(file)
        .file_stem()
        .map_or_else(|| file.clone(), |s| s.to_string_lossy().into_owned());
    Ok(Ok(ClipRecord {
        path: path.to_path_buf(),
        clip_id: format!("{machine}/{split}/{stem}"),
        machine: machine.clone(),
        section,
        domain,
        split,
        label,
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyType {
    /// Broadband clicks repeating a few times per second.
    ImpulseTrain,
    /// One harmonic of the hum moves to a new frequency.
    ToneShift,
    /// Energy inside one frequency band disappears.
    BandDropout,
}
text_enum!(AnomalyType {
    ImpulseTrain => "impulse_train",
    ToneShift => "tone_shift",
    BandDropout => "band_dropout",
});

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub machine: String,
    pub n_normal: usize,
    pub n_anomaly: usize,
    pub seed: u64,
    pub anomaly_types: Vec<AnomalyType>,
    /// Strength of the high-frequency tilt applied to target-domain clips.
    pub domain_shift: f64,
    /// Scales every planted anomaly; the default is calibrated so that the
    /// reduced reference pipeline lands well above chance but below 1.0.
    pub anomaly_gain: f64,
    /// Share of the training clips recorded in the target domain.
    pub target_train_fraction: f64,
    pub duration_secs: f64,
    pub sample_rate_hz: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            machine: "synth".into(),
            n_normal: 200,
            n_anomaly: 50,
            seed: 0,
            anomaly_types: vec![
                AnomalyType::ImpulseTrain,
                AnomalyType::ToneShift,
                AnomalyType::BandDropout,
            ],
            domain_shift: 0.6,
            anomaly_gain: 2.0,
            target_train_fraction: 0.1,
            duration_secs: 10.0,
            sample_rate_hz: 16_000,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_normal <= self.n_anomaly {
            return Err(Error::Config(
                "synth.n_normal must exceed n_anomaly: the test split takes as many normals as anomalies".into(),
            ));
        }
        if self.n_anomaly > 0 && self.anomaly_types.is_empty() {
            return Err(Error::Config("synth.anomaly_types is empty".into()));
        }
        if self.domain_shift < 0.0 || self.anomaly_gain < 0.0 {
            return Err(Error::Config(
                "synth.domain_shift and anomaly_gain must be >= 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.target_train_fraction) {
            return Err(Error::Config(
                "synth.target_train_fraction must lie in [0, 1]".into(),
            ));
        }
        if !(self.duration_secs >= 1.0) || self.sample_rate_hz < 8000 {
            return Err(Error::Config("synth clips need >= 1 s at >= 8 kHz".into()));
        }
        Ok(())
    }
}

/// One manifest line: ground truth for a clip. Extents are empty for
/// normal clips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub clip_id: String,
    pub label: Label,
    pub anomaly_type: Option<AnomalyType>,
    pub t_start: Option<f64>,
    pub t_end: Option<f64>,
    pub f_low: Option<f64>,
    pub f_high: Option<f64>,
}

pub const MANIFEST_FILE: &str = "manifest.csv";

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

struct PlannedClip {
    split: Split,
    domain: Domain,
    anomaly: Option<AnomalyType>,
    index: usize,
}

fn plan(cfg: &SynthConfig) -> Vec<PlannedClip> {
    let n_train = cfg.n_normal - cfg.n_anomaly;
    let n_train_target = (n_train as f64 * cfg.target_train_fraction).round() as usize;
    let mut clips = Vec::new();
    for i in 0..n_train {
        clips.push(PlannedClip {
            split: Split::Train,
            domain: if i < n_train - n_train_target {
                Domain::Source
            } else {
                Domain::Target
            },
            anomaly: None,
            index: i,
        });
    }
    for i in 0..cfg.n_anomaly {
        let domain = if i % 2 == 0 {
            Domain::Source
        } else {
            Domain::Target
        };
        clips.push(PlannedClip {
            split: Split::Test,
            domain,
            anomaly: None,
            index: i,
        });
        clips.push(PlannedClip {
            split: Split::Test,
            domain,
            anomaly: Some(cfg.anomaly_types[i % cfg.anomaly_types.len()]),
            index: i,
        });
    }
    clips
}

/// Per-machine constants shared by every clip.
struct Machine {
    f0: f64,
    harmonics: Vec<f64>,
    noise_level: f64,
}

impl Machine {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Machine {
            f0: rng.random_range(110.0..140.0),
            harmonics: (1..=10)
                .map(|h| rng.random_range(0.5..1.0) / h as f64)
                .collect(),
            noise_level: 0.04,
        }
    }
}

/// Writes a synthetic corpus under `out/<machine>/` and the ground-truth
/// manifest at `out/manifest.csv`. Identical configs give identical bytes.
pub fn synth_corpus(cfg: &SynthConfig, out: &Path) -> Result<Vec<ManifestRow>> {
    cfg.validate()?;
    let machine = Machine::new(cfg.seed);
    let base = out.join(&cfg.machine);
    for split in [Split::Train, Split::Test] {
        let dir = base.join(split.as_str());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut rows = Vec::new();
    for (n, clip) in plan(cfg).iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(n as u64 + 1);
        let (samples, truth) = synth_clip(cfg, &machine, clip, &mut rng);
        let label = if clip.anomaly.is_some() {
            Label::Anomaly
        } else {
            Label::Normal
        };
        let stem = format!(
            "section_00_{}_{}_{}_{:04}",
            clip.domain, clip.split, label, clip.index
        );
        let path = base.join(clip.split.as_str()).join(format!("{stem}.wav"));
        write_wav(&path, &samples, cfg.sample_rate_hz)?;
        let mut row = ManifestRow {
            clip_id: format!("{}/{}/{stem}", cfg.machine, clip.split),
            label,
            anomaly_type: clip.anomaly,
            t_start: None,
            t_end: None,
            f_low: None,
            f_high: None,
        };
        if let Some((t0, t1, f0, f1)) = truth {
            row.t_start = Some(t0);
            row.t_end = Some(t1);
            row.f_low = Some(f0);
            row.f_high = Some(f1);
        }
        rows.push(row);
    }
    let manifest = out.join(MANIFEST_FILE);
    let mut w = csv::Writer::from_path(&manifest)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(rows)
}

type Extent = (f64, f64, f64, f64);

fn synth_clip(
    cfg: &SynthConfig,
    m: &Machine,
    clip: &PlannedClip,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, Option<Extent>) {
    let sr = cfg.sample_rate_hz as f64;
    let n = (cfg.duration_secs * sr).round() as usize;
    let nyquist = sr / 2.0;
    // Clip-to-clip variation of a healthy machine.
    let f0 = m.f0 * rng.random_range(0.985..1.015);
    let level = rng.random_range(0.85..1.15);
    let noise_level = m.noise_level * rng.random_range(0.8..1.25);
    let phases: Vec<f64> = m
        .harmonics
        .iter()
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();

    // Anomaly window as fractions of the clip (0.5..6.5 s start, 1.5..3 s
    // long for 10 s clips).
    let d = cfg.duration_secs;
    let t0 = rng.random_range(0.05 * d..0.65 * d);
    let t1 = t0 + rng.random_range(0.15 * d..0.3 * d);
    let (i0, i1) = ((t0 * sr) as usize, ((t1 * sr) as usize).min(n));
    let gain = cfg.anomaly_gain;

    let mut shifted_harmonic = None;
    let mut extent = None;
    if clip.anomaly == Some(AnomalyType::ToneShift) {
        let h = rng.random_range(3..=7usize);
        let ratio = 1.0 + 0.06 * gain.min(4.0);
        let fa = h as f64 * f0;
        shifted_harmonic = Some((h, ratio));
        extent = Some((t0, t1, fa - f0 * 0.5, (fa * ratio + f0 * 0.5).min(nyquist)));
    }

    let mut x = vec![0.0; n];
    for (k, (&amp, &phase)) in m.harmonics.iter().zip(&phases).enumerate() {
        let h = k + 1;
        let f = f0 * h as f64;
        if f >= nyquist {
            break;
        }
        let mut ph = phase;
        let mut shifted_phase = phase;
        for (i, v) in x.iter_mut().enumerate() {
            let in_region = i >= i0 && i < i1;
            match shifted_harmonic {
                Some((sh, ratio)) if sh == h && in_region => {
                    *v += level * amp * shifted_phase.sin();
                    shifted_phase += std::f64::consts::TAU * f * ratio / sr;
                }
                _ => *v += level * amp * ph.sin(),
            }
            ph += std::f64::consts::TAU * f / sr;
            if !in_region {
                shifted_phase = ph;
            }
        }
    }

    // Low-passed noise floor.
    let mut lp = 0.0;
    for v in x.iter_mut() {
        let white: f64 = StandardNormal.sample(rng);
        lp = 0.7 * lp + 0.3 * white;
        *v += noise_level * (lp + 0.35 * white);
    }

    match clip.anomaly {
        Some(AnomalyType::ImpulseTrain) => {
            let rate = rng.random_range(3.0..6.0);
            let step = (sr / rate) as usize;
            let click_len = (0.003 * sr) as usize;
            let amp = 0.35 * gain;
            let mut start = i0;
            while start + click_len < i1 {
                for j in 0..click_len {
                    let white: f64 = StandardNormal.sample(rng);
                    x[start + j] += amp * white * (-(j as f64) / (0.3 * click_len as f64)).exp();
                }
                start += step;
            }
            extent = Some((t0, t1, 0.0, nyquist));
        }
        Some(AnomalyType::BandDropout) => {
            let lo = rng.random_range(3.0..6.0) * f0;
            let hi = lo + rng.random_range(3.0..5.0) * f0;
            band_stop(&mut x[i0..i1], sr, lo, hi, (0.9 * gain).min(1.0));
            extent = Some((t0, t1, lo, hi.min(nyquist)));
        }
        _ => {}
    }

    if clip.domain == Domain::Target && cfg.domain_shift > 0.0 {
        tilt(&mut x, cfg.domain_shift);
    }
    (x, extent)
}

/// First-difference emphasis: boosts high frequencies in proportion to
/// `amount`, then restores the original RMS.
fn tilt(x: &mut [f64], amount: f64) {
    let rms = |v: &[f64]| (v.iter().map(|s| s * s).sum::<f64>() / v.len().max(1) as f64).sqrt();
    let before = rms(x);
    let mut prev = 0.0;
    for v in x.iter_mut() {
        let cur = *v;
        *v = cur + amount * 4.0 * (cur - prev);
        prev = cur;
    }
    let after = rms(x);
    if after > 0.0 {
        for v in x.iter_mut() {
            *v *= before / after;
        }
    }
}

/// Attenuates `[lo, hi]` Hz by `depth` (1 removes it) with 10 ms cross-fades
/// at both ends of the region.
fn band_stop(x: &mut [f64], sr: f64, lo: f64, hi: f64, depth: f64) {
    let n = x.len();
    if n == 0 {
        return;
    }
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * sr / n as f64;
        if f >= lo && f <= hi {
            *c *= 1.0 - depth;
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let fade = ((0.01 * sr) as usize).min(n / 2).max(1);
    for (i, v) in x.iter_mut().enumerate() {
        let filtered = buf[i].re / n as f64;
        let w = (i.min(n - 1 - i) as f64 / fade as f64).min(1.0);
        *v = (1.0 - w) * *v + w * filtered;
    }
}

/// 16-bit PCM mono. Samples are scaled by a fixed factor, not normalized,
/// so levels stay comparable across clips.
fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        let v = (s * 0.2 * f64::from(i16::MAX)).round();
        w.write_sample(v.clamp(f64::from(i16::MIN), f64::from(i16::MAX)) as i16)?;
    }
    w.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_reference_name() {
        let (section, domain, label) =
            parse_clip_name("section_00_source_train_normal_0001_x.wav").unwrap();
        assert_eq!(
            (section, domain, label),
            (0, Domain::Source, Some(Label::Normal))
        );
        let (s, d, l) = parse_clip_name("section_03_target_test_0012.wav").unwrap();
        assert_eq!((s, d, l), (3, Domain::Target, None));
        assert!(parse_clip_name("noise_0001.wav").is_err());
        assert!(parse_clip_name("section_xx_source.wav").is_err());
    }

    #[test]
    fn plan_balances_test_split() {
        let cfg = SynthConfig {
            n_normal: 20,
            n_anomaly: 6,
            ..SynthConfig::default()
        };
        let clips = plan(&cfg);
        let count = |s: Split, a: bool| {
            clips
                .iter()
                .filter(|c| c.split == s && c.anomaly.is_some() == a)
                .count()
        };
        assert_eq!(count(Split::Train, false), 14);
        assert_eq!(count(Split::Test, false), 6);
        assert_eq!(count(Split::Test, true), 6);
        assert_eq!(count(Split::Train, true), 0);
        let target_train = clips
            .iter()
            .filter(|c| c.split == Split::Train && c.domain == Domain::Target)
            .count();
        assert_eq!(target_train, 1);
    }

    #[test]
    fn band_stop_removes_band() {
        let sr = 8000.0;
        let n = 8000;
        let mut x: Vec<f64> = (0..n)
            .map(|i| (std::f64::consts::TAU * 1000.0 * i as f64 / sr).sin())
            .collect();
        band_stop(&mut x, sr, 900.0, 1100.0, 1.0);
        let mid = &x[2000..6000];
        assert!(mid.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn rejects_bad_synth_config() {
        let cfg = SynthConfig {
            n_normal: 5,
            n_anomaly: 5,
            ..SynthConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
