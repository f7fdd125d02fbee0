//! Time-frequency anomaly maps: the reconstructed query is compared with
//! the mean training spectrogram, pixel by pixel.

use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::SEGMENT_SIZE;
use crate::error::{Error, Result};
use crate::frontend::SpectrogramSegment;
use crate::model::{segments_to_tensor, Reconstructor};

const PIXELS: usize = SEGMENT_SIZE * SEGMENT_SIZE;

/// Elementwise mean of the scaled training segments of one machine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSpectrogram {
    pub values: Vec<f64>,
    pub machine: String,
    pub config_hash: String,
    pub sample_count: usize,
}

/// Running elementwise mean, updated one segment at a time so the training
/// set never has to be held in memory at once.
#[derive(Clone, Debug)]
pub struct StreamingMean {
    mean: Vec<f64>,
    count: usize,
}

impl Default for StreamingMean {
    fn default() -> Self {
        StreamingMean {
            mean: vec![0.0; PIXELS],
            count: 0,
        }
    }
}

impl StreamingMean {
    pub fn push(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != PIXELS {
            return Err(Error::shape(PIXELS, values.len()));
        }
        self.count += 1;
        let w = 1.0 / self.count as f64;
        for (m, v) in self.mean.iter_mut().zip(values) {
            *m += (v - *m) * w;
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(self, machine: &str, config_hash: &str) -> Result<MeanSpectrogram> {
        if self.count == 0 {
            return Err(Error::InvalidInput(
                "mean spectrogram of zero segments".into(),
            ));
        }
        Ok(MeanSpectrogram {
            values: self.mean,
            machine: machine.to_string(),
            config_hash: config_hash.to_string(),
            sample_count: self.count,
        })
    }
}

pub fn mean_spectrogram<'a>(
    segments: impl IntoIterator<Item = &'a SpectrogramSegment>,
    machine: &str,
    config_hash: &str,
) -> Result<MeanSpectrogram> {
    let mut acc = StreamingMean::default();
    for s in segments {
        acc.push(&s.values)?;
    }
    acc.finish(machine, config_hash)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapNorm {
    Raw,
    UnitMax,
}

/// Which difference the heatmap shows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Residual {
    /// `|reconstruct(q) − mean|`
    #[default]
    ReconstructionVsMean,
    /// `|q − reconstruct(q)|`, for diagnostics.
    QueryVsReconstruction,
}

/// Nonnegative `128 × 128` map, row-major with mel bands as rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub values: Vec<f64>,
    pub normalization: HeatmapNorm,
}

impl Heatmap {
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Divides by the maximum; an all-zero map stays all-zero.
    pub fn unit_max(&self) -> Heatmap {
        let max = self.max();
        let values = if max > 0.0 {
            self.values.iter().map(|v| v / max).collect()
        } else {
            self.values.clone()
        };
        Heatmap {
            values,
            normalization: HeatmapNorm::UnitMax,
        }
    }
}

/// A heatmap together with the reconstruction it was computed from.
#[derive(Clone, Debug)]
pub struct Localization {
    pub reconstruction: Vec<f64>,
    pub heatmap: Heatmap,
    pub frame_offset: usize,
}

pub fn abs_diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect()
}

/// Heatmaps for a batch of query segments.
pub fn localize(
    generator: &dyn Reconstructor,
    mean: &MeanSpectrogram,
    queries: &[SpectrogramSegment],
    residual: Residual,
) -> Result<Vec<Localization>> {
    if mean.values.len() != PIXELS {
        return Err(Error::shape(PIXELS, mean.values.len()));
    }
    if queries.is_empty() {
        return Ok(Vec::new());
    }
    let recon = generator.reconstruct_tensor(&segments_to_tensor(queries))?;
    if recon.numel() != queries.len() * PIXELS {
        return Err(Error::shape(
            [queries.len(), 1, SEGMENT_SIZE, SEGMENT_SIZE],
            recon.shape(),
        ));
    }
    Ok(queries
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let r = recon.sample(i);
            let values = match residual {
                Residual::ReconstructionVsMean => abs_diff(r, &mean.values),
                Residual::QueryVsReconstruction => abs_diff(&q.values, r),
            };
            Localization {
                reconstruction: r.to_vec(),
                heatmap: Heatmap {
                    values,
                    normalization: HeatmapNorm::Raw,
                },
                frame_offset: q.frame_offset,
            }
        })
        .collect())
}

/// A `SEGMENT_SIZE × n_frames` clip-level map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipMap {
    pub n_frames: usize,
    pub values: Vec<f64>,
    /// Number of segments covering each frame.
    pub coverage: Vec<usize>,
}

/// Places segment maps at their frame offsets and averages where they
/// overlap. Columns past `n_frames` (reflect padding of short clips) are
/// dropped.
pub fn stitch(parts: &[(usize, &[f64])], n_frames: usize) -> Result<ClipMap> {
    let mut sum = vec![0.0; SEGMENT_SIZE * n_frames];
    let mut coverage = vec![0usize; n_frames];
    for &(offset, values) in parts {
        if values.len() != PIXELS {
            return Err(Error::shape(PIXELS, values.len()));
        }
        let end = (offset + SEGMENT_SIZE).min(n_frames);
        if offset >= end {
            return Err(Error::InvalidInput(format!(
                "segment offset {offset} lies outside a clip of {n_frames} frames"
            )));
        }
        for c in &mut coverage[offset..end] {
            *c += 1;
        }
        for mel in 0..SEGMENT_SIZE {
            let row = &values[mel * SEGMENT_SIZE..(mel + 1) * SEGMENT_SIZE];
            for t in offset..end {
                sum[mel * n_frames + t] += row[t - offset];
            }
        }
    }
    for mel in 0..SEGMENT_SIZE {
        for (t, &c) in coverage.iter().enumerate() {
            if c > 0 {
                sum[mel * n_frames + t] /= c as f64;
            }
        }
    }
    Ok(ClipMap {
        n_frames,
        values: sum,
        coverage,
    })
}

/// Writes a row-major matrix as CSV with full precision.
pub fn write_matrix_csv(path: &Path, values: &[f64], cols: usize) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for row in values.chunks(cols) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        writeln!(out, "{}", line.join(",")).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_matrix_csv(path: &Path) -> Result<(Vec<f64>, usize)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut values = Vec::new();
    let mut cols = 0;
    for line in text.lines().filter(|l| !l.is_empty()) {
        let row: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format {
                path: path.into(),
                reason: e.to_string(),
            })?;
        if cols == 0 {
            cols = row.len();
        } else if row.len() != cols {
            return Err(Error::Format {
                path: path.into(),
                reason: "ragged matrix rows".into(),
            });
        }
        values.extend(row);
    }
    Ok((values, cols))
}

/// One image panel: a row-major `SEGMENT_SIZE × width` matrix and the value
/// range mapped onto black..white.
pub struct Panel<'a> {
    pub values: &'a [f64],
    pub range: (f64, f64),
}

/// Stacks panels vertically into an 8-bit grayscale PNG. Low mel bands are
/// drawn at the bottom of each panel.
pub fn render_panels(path: &Path, panels: &[Panel<'_>], width: usize) -> Result<()> {
    let height = SEGMENT_SIZE * panels.len();
    let mut pixels = Vec::with_capacity(width * height);
    for p in panels {
        if p.values.len() != SEGMENT_SIZE * width {
            return Err(Error::shape(SEGMENT_SIZE * width, p.values.len()));
        }
        let (lo, hi) = p.range;
        let span = if hi > lo { hi - lo } else { 1.0 };
        for mel in (0..SEGMENT_SIZE).rev() {
            for &v in &p.values[mel * width..(mel + 1) * width] {
                pixels.push((((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header()?;
    writer.write_image_data(&pixels)?;
    writer.finish()?;
    Ok(())
}

/// Three stacked panels (reconstruction, mean, heatmap) as `<stem>.png` and
/// the raw heatmap as `<stem>.csv`. Spectrogram panels span [-1, 1]; the
/// heatmap panel is scaled to its own maximum.
pub fn render(
    dir: &Path,
    stem: &str,
    reconstruction: &[f64],
    mean: &[f64],
    heatmap: &[f64],
    width: usize,
) -> Result<()> {
    let max = heatmap.iter().copied().fold(0.0, f64::max);
    render_panels(
        &dir.join(format!("{stem}.png")),
        &[
            Panel {
                values: reconstruction,
                range: (-1.0, 1.0),
            },
            Panel {
                values: mean,
                range: (-1.0, 1.0),
            },
            Panel {
                values: heatmap,
                range: (0.0, if max > 0.0 { max } else { 1.0 }),
            },
        ],
        width,
    )?;
    write_matrix_csv(&dir.join(format!("{stem}.csv")), heatmap, width)
}

/// Indices of the `ceil(fraction · len)` largest entries, ties broken by
/// position.
pub fn top_fraction(values: &[f64], fraction: f64) -> Vec<usize> {
    let count = ((values.len() as f64 * fraction).ceil() as usize).clamp(1, values.len().max(1));
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(count);
    idx
}
