//! Audio to scaled log-mel segments.
//!
//! Pipeline: PCM WAV → mono waveform at the configured rate → centered STFT
//! power spectrum → Slaney mel filterbank → natural log with a floor →
//! affine scaling to [-1, 1] (fit on training data) → overlapping
//! 128-frame windows.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::config::{FrontendConfig, ShortClipPolicy, WindowKind, SEGMENT_SIZE};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads a PCM or float WAV file, downmixing to mono and resampling to
/// `cfg.sample_rate_hz` when the file uses a different rate.
pub fn load_audio(path: &Path, cfg: &FrontendConfig) -> Result<Waveform> {
    let mut reader = match hound::WavReader::open(path) {
        Ok(r) => r,
        Err(hound::Error::IoError(e)) => return Err(Error::io(path, e)),
        Err(e) => return Err(e.into()),
    };
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let full_scale = (1_i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / full_scale))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    if interleaved.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} contains no samples",
            path.display()
        )));
    }
    let mono: Vec<f64> = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f64>() / channels as f64)
            .collect()
    };
    let samples = if spec.sample_rate == cfg.sample_rate_hz {
        mono
    } else {
        resample(&mono, spec.sample_rate, cfg.sample_rate_hz)
    };
    if let Some(bad) = samples.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "{} has a non-finite sample at index {bad}",
            path.display()
        )));
    }
    Ok(Waveform {
        samples,
        sample_rate: cfg.sample_rate_hz,
    })
}

/// Windowed-sinc resampling with an anti-aliasing cutoff when downsampling.
pub fn resample(input: &[f64], from_hz: u32, to_hz: u32) -> Vec<f64> {
    const HALF_TAPS: isize = 16;
    let ratio = to_hz as f64 / from_hz as f64;
    let cutoff = ratio.min(1.0);
    let out_len = ((input.len() as f64) * ratio).round() as usize;
    let support = (HALF_TAPS as f64 / cutoff).ceil() as isize;
    (0..out_len)
        .map(|i| {
            let t = i as f64 / ratio;
            let centre = t.floor() as isize;
            let mut acc = 0.0;
            let mut norm = 0.0;
            for j in (centre - support + 1)..=(centre + support) {
                let x = t - j as f64;
                let arg = x * cutoff;
                let sinc = if arg.abs() < 1e-12 {
                    1.0
                } else {
                    (std::f64::consts::PI * arg).sin() / (std::f64::consts::PI * arg)
                };
                let win_pos = x / (support as f64);
                if win_pos.abs() >= 1.0 {
                    continue;
                }
                let window = 0.5 * (1.0 + (std::f64::consts::PI * win_pos).cos());
                let k = sinc * window;
                norm += k;
                if j >= 0 && (j as usize) < input.len() {
                    acc += k * input[j as usize];
                }
            }
            if norm.abs() > 1e-12 {
                acc / norm
            } else {
                0.0
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleState {
    RawLog,
    Scaled,
}

/// Row-major `(n_mels, n_frames)` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LogMelMatrix {
    pub n_mels: usize,
    pub n_frames: usize,
    pub values: Vec<f64>,
    pub scale_state: ScaleState,
}

impl LogMelMatrix {
    pub fn get(&self, mel: usize, frame: usize) -> f64 {
        self.values[mel * self.n_frames + frame]
    }

    pub fn row(&self, mel: usize) -> &[f64] {
        &self.values[mel * self.n_frames..(mel + 1) * self.n_frames]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// A `128 × 128` patch (mel rows by frame columns), row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrogramSegment {
    pub values: Vec<f64>,
    pub clip_id: String,
    pub frame_offset: usize,
}

impl SpectrogramSegment {
    pub fn new(values: Vec<f64>, clip_id: impl Into<String>, frame_offset: usize) -> Result<Self> {
        if values.len() != SEGMENT_SIZE * SEGMENT_SIZE {
            return Err(Error::shape(SEGMENT_SIZE * SEGMENT_SIZE, values.len()));
        }
        Ok(SpectrogramSegment {
            values,
            clip_id: clip_id.into(),
            frame_offset,
        })
    }
}

/// Hz to mel on the Slaney scale (linear below 1 kHz, logarithmic above).
pub fn hz_to_mel(hz: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4_f64.ln() / 27.0;
    if hz >= MIN_LOG_HZ {
        min_log_mel + (hz / MIN_LOG_HZ).ln() / logstep
    } else {
        hz / F_SP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4_f64.ln() / 27.0;
    if mel >= min_log_mel {
        MIN_LOG_HZ * (logstep * (mel - min_log_mel)).exp()
    } else {
        F_SP * mel
    }
}

/// Slaney-normalized triangular filters spanning 0 Hz to Nyquist.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    /// Row-major `(n_mels, n_bins)` weights.
    pub weights: Vec<f64>,
    /// Band edges in Hz; band `m` peaks at `edges[m + 1]`.
    pub edges_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(sample_rate: u32, n_fft: usize, n_mels: usize) -> Self {
        let n_bins = n_fft / 2 + 1;
        let nyquist = sample_rate as f64 / 2.0;
        let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(nyquist));
        let edges_hz: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz: Vec<f64> = (0..n_bins)
            .map(|k| k as f64 * sample_rate as f64 / n_fft as f64)
            .collect();
        let mut weights = vec![0.0; n_mels * n_bins];
        for m in 0..n_mels {
            let (left, centre, right) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
            let norm = 2.0 / (right - left);
            for (k, &f) in bin_hz.iter().enumerate() {
                let rising = (f - left) / (centre - left);
                let falling = (right - f) / (right - centre);
                weights[m * n_bins + k] = rising.min(falling).max(0.0) * norm;
            }
        }
        MelFilterbank {
            n_mels,
            n_bins,
            weights,
            edges_hz,
        }
    }

    pub fn centre_hz(&self, band: usize) -> f64 {
        self.edges_hz[band + 1]
    }

    pub fn row(&self, band: usize) -> &[f64] {
        &self.weights[band * self.n_bins..(band + 1) * self.n_bins]
    }
}

fn window(kind: WindowKind, n: usize) -> Vec<f64> {
    // periodic windows, as used for spectral analysis
    let step = 2.0 * std::f64::consts::PI / n as f64;
    (0..n)
        .map(|i| match kind {
            WindowKind::Hann => 0.5 - 0.5 * (step * i as f64).cos(),
            WindowKind::Hamming => 0.54 - 0.46 * (step * i as f64).cos(),
            WindowKind::Rectangular => 1.0,
        })
        .collect()
}

/// Index into a signal reflected about its end points (no edge repeat).
fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut r = i.rem_euclid(period);
    if r >= len as isize {
        r = period - r;
    }
    r as usize
}

/// Number of frames a centered STFT yields for `len` samples.
pub fn frame_count(len: usize, hop: usize) -> usize {
    1 + len / hop
}

/// Reusable STFT + filterbank state for one frontend config.
pub struct MelExtractor {
    cfg: FrontendConfig,
    window: Vec<f64>,
    bank: MelFilterbank,
    fft: Arc<dyn rustfft::Fft<f64>>,
}

impl MelExtractor {
    pub fn new(cfg: &FrontendConfig) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        MelExtractor {
            cfg: cfg.clone(),
            window: window(cfg.window, cfg.n_fft),
            bank: MelFilterbank::new(cfg.sample_rate_hz, cfg.n_fft, cfg.n_mels),
            fft,
        }
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.bank
    }

    pub fn log_mel(&self, wave: &Waveform) -> Result<LogMelMatrix> {
        let n_fft = self.cfg.n_fft;
        let len = wave.samples.len();
        if len < n_fft {
            return Err(Error::InvalidInput(format!(
                "waveform of {len} samples is shorter than one {n_fft}-point FFT window"
            )));
        }
        let hop = self.cfg.hop_length;
        let n_frames = frame_count(len, hop);
        let n_mels = self.cfg.n_mels;
        let half = (n_fft / 2) as isize;
        let mut values = vec![0.0; n_mels * n_frames];
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; self.bank.n_bins];
        for t in 0..n_frames {
            let start = (t * hop) as isize - half;
            for (i, c) in buf.iter_mut().enumerate() {
                let s = wave.samples[reflect_index(start + i as isize, len)];
                *c = Complex::new(s * self.window[i], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for m in 0..n_mels {
                let energy: f64 = self
                    .bank
                    .row(m)
                    .iter()
                    .zip(&power)
                    .map(|(w, p)| w * p)
                    .sum();
                values[m * n_frames + t] = energy.max(self.cfg.log_floor).ln();
            }
        }
        Ok(LogMelMatrix {
            n_mels,
            n_frames,
            values,
            scale_state: ScaleState::RawLog,
        })
    }
}

/// One-shot log-mel computation; prefer [`MelExtractor`] for many clips.
pub fn log_mel(wave: &Waveform, cfg: &FrontendConfig) -> Result<LogMelMatrix> {
    MelExtractor::new(cfg).log_mel(wave)
}

/// `scaled = a * raw + b`, mapping the training range onto [-1, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineScaler {
    pub a: f64,
    pub b: f64,
}

impl AffineScaler {
    pub fn from_range(min: f64, max: f64) -> Result<Self> {
        if !(min < max) || !min.is_finite() || !max.is_finite() {
            return Err(Error::DegenerateScale { min, max });
        }
        let a = 2.0 / (max - min);
        Ok(AffineScaler {
            a,
            b: -1.0 - a * min,
        })
    }

    pub fn apply(&self, v: f64) -> f64 {
        (self.a * v + self.b).clamp(-1.0, 1.0)
    }
}

/// Fits the affine map sending the corpus minimum to -1 and maximum to +1.
pub fn fit_scaler(corpus: &[LogMelMatrix]) -> Result<AffineScaler> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput(
            "cannot fit a scaler on an empty corpus".into(),
        ));
    }
    if corpus.iter().any(|m| m.scale_state != ScaleState::RawLog) {
        return Err(Error::State(
            "scaler must be fit on raw log-mel matrices".into(),
        ));
    }
    let (min, max) = corpus
        .iter()
        .map(LogMelMatrix::min_max)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (a, b)| {
            (lo.min(a), hi.max(b))
        });
    AffineScaler::from_range(min, max)
}

/// Applies the scaler and clamps to [-1, 1].
pub fn scale_affine(m: &LogMelMatrix, scaler: &AffineScaler) -> Result<LogMelMatrix> {
    if m.scale_state != ScaleState::RawLog {
        return Err(Error::State("matrix is already scaled".into()));
    }
    Ok(LogMelMatrix {
        n_mels: m.n_mels,
        n_frames: m.n_frames,
        values: m.values.iter().map(|&v| scaler.apply(v)).collect(),
        scale_state: ScaleState::Scaled,
    })
}

/// Start frames of the windows cut from `n_frames` frames: a regular grid
/// with stride `hop`, plus one window flush with the end when the grid does
/// not reach it.
pub fn window_offsets(n_frames: usize, width: usize, hop: usize) -> Vec<usize> {
    if n_frames <= width {
        return vec![0];
    }
    let mut offsets: Vec<usize> = (0..=(n_frames - width) / hop).map(|i| i * hop).collect();
    let last = *offsets.last().expect("grid has at least one offset");
    if last + width < n_frames {
        offsets.push(n_frames - width);
    }
    offsets
}

pub fn slice_windows(
    m: &LogMelMatrix,
    cfg: &FrontendConfig,
    clip_id: &str,
) -> Result<Vec<SpectrogramSegment>> {
    if m.scale_state != ScaleState::Scaled {
        return Err(Error::State(
            "segments are cut from scaled matrices only".into(),
        ));
    }
    if m.n_mels != SEGMENT_SIZE {
        return Err(Error::shape(SEGMENT_SIZE, m.n_mels));
    }
    let width = cfg.segment_frames;
    if m.n_frames < width {
        if cfg.short_clip == ShortClipPolicy::Error {
            return Err(Error::InvalidInput(format!(
                "clip {clip_id} has {} frames, fewer than one {width}-frame segment",
                m.n_frames
            )));
        }
        let mut values = Vec::with_capacity(SEGMENT_SIZE * width);
        for mel in 0..m.n_mels {
            let row = m.row(mel);
            values.extend((0..width).map(|t| row[reflect_index(t as isize, m.n_frames)]));
        }
        return Ok(vec![SpectrogramSegment::new(values, clip_id, 0)?]);
    }
    window_offsets(m.n_frames, width, cfg.segment_hop_frames)
        .into_iter()
        .map(|offset| {
            let mut values = Vec::with_capacity(SEGMENT_SIZE * width);
            for mel in 0..m.n_mels {
                values.extend_from_slice(&m.row(mel)[offset..offset + width]);
            }
            SpectrogramSegment::new(values, clip_id, offset)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(values: Vec<f64>, n_frames: usize) -> LogMelMatrix {
        LogMelMatrix {
            n_mels: values.len() / n_frames,
            n_frames,
            values,
            scale_state: ScaleState::RawLog,
        }
    }

    #[test]
    fn scaler_two_point_solve() {
        let s = fit_scaler(&[raw(vec![-10.0, 0.0, 2.0, 1.0], 2)]).unwrap();
        assert!((s.a - 1.0 / 6.0).abs() < 1e-15);
        assert!((s.b - 2.0 / 3.0).abs() < 1e-15);
        let id = fit_scaler(&[raw(vec![-1.0, 1.0], 2)]).unwrap();
        assert_eq!((id.a, id.b), (1.0, 0.0));
    }

    #[test]
    fn scaler_rejects_constant_corpus() {
        let err = fit_scaler(&[raw(vec![3.0; 4], 2)]).unwrap_err();
        assert!(matches!(err, Error::DegenerateScale { .. }));
    }

    #[test]
    fn clamps_out_of_range_values() {
        let s = fit_scaler(&[raw(vec![0.0, 4.0], 2)]).unwrap();
        let scaled = scale_affine(&raw(vec![8.0, -4.0], 2), &s).unwrap();
        assert_eq!(scaled.values, vec![1.0, -1.0]);
        assert!(matches!(scale_affine(&scaled, &s), Err(Error::State(_))));
    }

    #[test]
    fn offsets_for_common_lengths() {
        assert_eq!(window_offsets(128, 128, 64), vec![0]);
        assert_eq!(window_offsets(313, 128, 64), vec![0, 64, 128, 185]);
        assert_eq!(window_offsets(256, 128, 64), vec![0, 64, 128]);
    }

    #[test]
    fn short_clip_policy() {
        let m = LogMelMatrix {
            n_mels: 128,
            n_frames: 127,
            values: (0..128 * 127).map(|i| (i % 127) as f64 / 127.0).collect(),
            scale_state: ScaleState::Scaled,
        };
        let segs = slice_windows(&m, &FrontendConfig::default(), "c").unwrap();
        assert_eq!(segs.len(), 1);
        // frame 127 mirrors frame 125
        assert_eq!(segs[0].values[127], m.get(0, 125));
        let strict = FrontendConfig {
            short_clip: ShortClipPolicy::Error,
            ..FrontendConfig::default()
        };
        assert!(slice_windows(&m, &strict, "c").is_err());
    }

    #[test]
    fn reflect_index_mirrors_without_repeating_edges() {
        let got: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn mel_scale_round_trip() {
        for hz in [0.0, 50.0, 999.0, 1000.0, 4000.0, 8000.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
    }

    #[test]
    fn short_waveform_is_rejected() {
        let wave = Waveform {
            samples: vec![0.0; 1000],
            sample_rate: 16_000,
        };
        assert!(matches!(
            log_mel(&wave, &FrontendConfig::default()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn resample_preserves_a_low_tone() {
        let from = 32_000;
        let input: Vec<f64> = (0..3200)
            .map(|i| (2.0 * std::f64::consts::PI * 200.0 * i as f64 / from as f64).sin())
            .collect();
        let out = resample(&input, from, 16_000);
        assert_eq!(out.len(), 1600);
        for (i, v) in out.iter().enumerate().skip(100).take(1400) {
            let expect = (2.0 * std::f64::consts::PI * 200.0 * i as f64 / 16_000.0).sin();
            assert!((v - expect).abs() < 1e-2, "sample {i}: {v} vs {expect}");
        }
    }
}
