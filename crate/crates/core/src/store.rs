//! On-disk artifacts.
//!
//! Arrays go into a small binary container: an 8-byte magic, a little-endian
//! `u64` header length, a JSON header, then the raw little-endian `f64` data
//! of every array in header order. The same header is written next to the
//! file as pretty-printed `<file>.json` so it can be read without tooling.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::config::{config_hash, RunConfig};
use crate::error::{Error, Result};
use crate::frontend::AffineScaler;
use crate::localization::MeanSpectrogram;
use crate::model::{critic_layout, generator_layout, Critic, Generator, ParamSet, RunningStats};

const MAGIC: &[u8; 8] = b"AEGANARR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub config_hash: String,
    pub arrays: Vec<ArraySpec>,
    pub meta: serde_json::Value,
}

/// A named list of arrays with JSON metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct ArrayFile {
    pub kind: String,
    pub config_hash: String,
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, Vec<usize>, Vec<f64>)>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    path.with_file_name(name)
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.into(),
        reason: reason.into(),
    }
}

impl ArrayFile {
    pub fn new(kind: &str, config_hash: &str, meta: serde_json::Value) -> Self {
        ArrayFile {
            kind: kind.to_string(),
            config_hash: config_hash.to_string(),
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.arrays.push((name.into(), shape, data));
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: &Tensor) {
        self.push(name, t.shape().to_vec(), t.data().to_vec());
    }

    fn header(&self) -> Header {
        Header {
            kind: self.kind.clone(),
            config_hash: self.config_hash.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(name, shape, _)| ArraySpec {
                    name: name.clone(),
                    shape: shape.clone(),
                })
                .collect(),
            meta: self.meta.clone(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let header = serde_json::to_vec(&self.header())?;
        let mut out = BufWriter::new(File::create(path).map_err(io)?);
        out.write_all(MAGIC).map_err(io)?;
        out.write_all(&(header.len() as u64).to_le_bytes())
            .map_err(io)?;
        out.write_all(&header).map_err(io)?;
        for (_, _, data) in &self.arrays {
            for v in data {
                out.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        out.flush().map_err(io)?;
        let side = sidecar_path(path);
        std::fs::write(&side, serde_json::to_string_pretty(&self.header())?)
            .map_err(|e| Error::io(&side, e))
    }

    /// Reads a container; with `expected_hash` set, a different embedded
    /// config hash is an error.
    pub fn read(path: &Path, kind: &str, expected_hash: Option<&str>) -> Result<Self> {
        let io = |e| Error::io(path, e);
        let mut input = BufReader::new(File::open(path).map_err(io)?);
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(format_err(path, "not an array container"));
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len).map_err(io)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 30 {
            return Err(format_err(path, "header too large"));
        }
        let mut header = vec![0u8; len];
        input.read_exact(&mut header).map_err(io)?;
        let header: Header = serde_json::from_slice(&header)?;
        if header.kind != kind {
            return Err(format_err(
                path,
                format!("expected a {kind} artifact, found {}", header.kind),
            ));
        }
        if let Some(expected) = expected_hash {
            check_hash(path, expected, &header.config_hash)?;
        }
        let mut arrays = Vec::with_capacity(header.arrays.len());
        let mut buf = [0u8; 8];
        for spec in &header.arrays {
            let n: usize = spec.shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                input
                    .read_exact(&mut buf)
                    .map_err(|_| format_err(path, format!("array {} is truncated", spec.name)))?;
                data.push(f64::from_le_bytes(buf));
            }
            arrays.push((spec.name.clone(), spec.shape.clone(), data));
        }
        if input.read(&mut buf).map_err(io)? != 0 {
            return Err(format_err(path, "trailing bytes after the last array"));
        }
        Ok(ArrayFile {
            kind: header.kind,
            config_hash: header.config_hash,
            meta: header.meta,
            arrays,
        })
    }

    pub fn take(&mut self, path: &Path, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let i = self
            .arrays
            .iter()
            .position(|(n, _, _)| n == name)
            .ok_or_else(|| format_err(path, format!("missing array {name}")))?;
        let (_, shape, data) = self.arrays.remove(i);
        Ok((shape, data))
    }

    pub fn take_tensor(&mut self, path: &Path, name: &str) -> Result<Tensor> {
        let (shape, data) = self.take(path, name)?;
        let shape: [usize; 4] = shape.try_into().map_err(|s: Vec<usize>| {
            format_err(
                path,
                format!("array {name} has rank {}, expected 4", s.len()),
            )
        })?;
        Ok(Tensor::new(shape, data))
    }

    pub fn meta_as<T: DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.meta.clone())?)
    }
}

pub fn check_hash(path: &Path, expected: &str, found: &str) -> Result<()> {
    if expected != found {
        return Err(Error::HashMismatch {
            path: path.into(),
            expected: expected.into(),
            found: found.into(),
        });
    }
    Ok(())
}

/// Writes `value` as pretty JSON.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Sidecar attached to plain-text artifacts (CSV tables) that cannot carry
/// the config hash themselves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub kind: String,
    pub config_hash: String,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn write_provenance(artifact: &Path, p: &Provenance) -> Result<()> {
    write_json(&sidecar_path(artifact), p)
}

pub fn read_provenance(artifact: &Path) -> Result<Provenance> {
    read_json(&sidecar_path(artifact))
}

/// Everything needed to score or localize clips of one machine.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub machine: String,
    pub scaler: AffineScaler,
    pub step: usize,
    pub epoch: usize,
    pub generator: Generator,
    pub critic: Critic,
    pub mean: MeanSpectrogram,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: RunConfig,
    machine: String,
    scaler: AffineScaler,
    step: usize,
    epoch: usize,
    frontend_hash: String,
    mean_sample_count: usize,
}

pub const CHECKPOINT_KIND: &str = "checkpoint";

impl Checkpoint {
    /// Hash identifying the model: the full run config.
    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            machine: self.machine.clone(),
            scaler: self.scaler,
            step: self.step,
            epoch: self.epoch,
            frontend_hash: config_hash(&self.config.frontend),
            mean_sample_count: self.mean.sample_count,
        };
        let mut file = ArrayFile::new(
            CHECKPOINT_KIND,
            &self.config_hash(),
            serde_json::to_value(meta)?,
        );
        for (name, t) in self
            .generator
            .params
            .names
            .iter()
            .zip(&self.generator.params.tensors)
        {
            file.push_tensor(format!("generator/{name}"), t);
        }
        for (i, r) in self.generator.running.iter().enumerate() {
            file.push_tensor(format!("running/{i}/mean"), &r.mean);
            file.push_tensor(format!("running/{i}/var"), &r.var);
        }
        for (name, t) in self
            .critic
            .params
            .names
            .iter()
            .zip(&self.critic.params.tensors)
        {
            file.push_tensor(format!("critic/{name}"), t);
        }
        file.push(
            "mean_spectrogram",
            vec![self.mean.values.len()],
            self.mean.values.clone(),
        );
        file.write(path)
    }

    /// Loads a checkpoint and verifies that its embedded hash matches the
    /// embedded config.
    pub fn load(path: &Path) -> Result<Self> {
        let mut file = ArrayFile::read(path, CHECKPOINT_KIND, None)?;
        let meta: CheckpointMeta = file.meta_as()?;
        check_hash(path, &meta.config.hash(), &file.config_hash)?;
        let cfg = meta.config.model.clone();
        let mut take_set =
            |prefix: &str, layout: Vec<crate::model::ParamSpec>| -> Result<ParamSet> {
                let mut names = Vec::new();
                let mut tensors = Vec::new();
                for spec in layout {
                    tensors.push(file.take_tensor(path, &format!("{prefix}/{}", spec.name))?);
                    names.push(spec.name);
                }
                Ok(ParamSet { names, tensors })
            };
        let gen_params = take_set("generator", generator_layout(&cfg))?;
        let critic_params = take_set("critic", critic_layout(&cfg))?;
        let mut running = Vec::new();
        let mut i = 0;
        while file
            .arrays
            .iter()
            .any(|(n, _, _)| *n == format!("running/{i}/mean"))
        {
            running.push(RunningStats {
                mean: file.take_tensor(path, &format!("running/{i}/mean"))?,
                var: file.take_tensor(path, &format!("running/{i}/var"))?,
            });
            i += 1;
        }
        let (_, mean_values) = file.take(path, "mean_spectrogram")?;
        let generator = Generator::from_parts(cfg.clone(), gen_params, running)?;
        let critic = Critic::from_parts(cfg, critic_params)?;
        Ok(Checkpoint {
            mean: MeanSpectrogram {
                values: mean_values,
                machine: meta.machine.clone(),
                config_hash: meta.frontend_hash,
                sample_count: meta.mean_sample_count,
            },
            config: meta.config,
            machine: meta.machine,
            scaler: meta.scaler,
            step: meta.step,
            epoch: meta.epoch,
            generator,
            critic,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, NormScheme};
    use crate::model::init_models;

    #[test]
    fn container_round_trip_and_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bin");
        let mut f = ArrayFile::new("test", "abc", serde_json::json!({"k": 1}));
        f.push(
            "x",
            vec![2, 3],
            vec![1.0, -2.5, 3.0, f64::MIN_POSITIVE, 0.0, 1e300],
        );
        f.write(&path).unwrap();
        assert_eq!(ArrayFile::read(&path, "test", Some("abc")).unwrap(), f);
        assert!(matches!(
            ArrayFile::read(&path, "test", Some("xyz")),
            Err(Error::HashMismatch { .. })
        ));
        assert!(ArrayFile::read(&path, "other", None).is_err());
        assert!(sidecar_path(&path).exists());
    }

    #[test]
    fn checkpoint_round_trip_both_norm_schemes() {
        let dir = tempfile::tempdir().unwrap();
        for scheme in [NormScheme::LnBoth, NormScheme::BnGeneratorLnCritic] {
            let config = RunConfig {
                model: ModelConfig {
                    norm_scheme: scheme,
                    ..ModelConfig::with_width(2, 4)
                },
                ..RunConfig::default()
            };
            let (generator, critic) = init_models(&config.model, 3).unwrap();
            let ckpt = Checkpoint {
                config,
                machine: "fan".into(),
                scaler: AffineScaler { a: 0.5, b: 0.25 },
                step: 7,
                epoch: 1,
                generator,
                critic,
                mean: MeanSpectrogram {
                    values: vec![0.1; 128 * 128],
                    machine: "fan".into(),
                    config_hash: "h".into(),
                    sample_count: 4,
                },
            };
            let path = dir.path().join("fan.ckpt");
            ckpt.save(&path).unwrap();
            let back = Checkpoint::load(&path).unwrap();
            assert_eq!(back.generator, ckpt.generator);
            assert_eq!(back.critic, ckpt.critic);
            assert_eq!(back.config, ckpt.config);
            assert_eq!(back.mean.values, ckpt.mean.values);
            assert_eq!(back.step, 7);
        }
    }
}
