//! Checkpoint container: one JSON header line, then little-endian `f32`
//! arrays in manifest order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{Stage, TrainConfig};
use super::optimizer::{AdamW, AdamWConfig};
use super::trainer::{RngState, Trainer};
use crate::error::{Error, Result};
use crate::model::{Architecture, ModelConfig, Transformer};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the array section.
    pub offset: u64,
    #[serde(default)]
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub config: AdamWConfig,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub model: ModelConfig,
    pub architecture: Architecture,
    pub train: Option<TrainConfig>,
    pub step: usize,
    pub stage: Option<Stage>,
    pub rng: Option<RngState>,
    pub optimizer: Option<OptimizerHeader>,
    pub manifest: Vec<ManifestEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Transformer<f32>,
    pub train: Option<TrainConfig>,
    pub step: usize,
    pub stage: Option<Stage>,
    pub rng: Option<RngState>,
    pub optimizer: Option<AdamW<f32>>,
}

impl Checkpoint {
    pub fn from_model(model: Transformer<f32>) -> Self {
        Self {
            model,
            train: None,
            step: 0,
            stage: None,
            rng: None,
            optimizer: None,
        }
    }

    pub fn from_trainer(trainer: &Trainer<f32>) -> Self {
        Self {
            model: trainer.model().clone(),
            train: Some(trainer.config().clone()),
            step: trainer.step_count(),
            stage: Some(trainer.config().stage),
            rng: Some(trainer.rng_state()),
            optimizer: Some(trainer.optimizer().clone()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut manifest = Vec::new();
        let mut arrays: Vec<&[f32]> = Vec::new();
        let mut offset = 0u64;
        for p in self.model.params().iter() {
            manifest.push(ManifestEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                offset,
                frozen: p.frozen,
            });
            offset += 4 * p.tensor.numel() as u64;
            arrays.push(p.tensor.data());
        }
        if let Some(opt) = &self.optimizer {
            for (prefix, moments) in [("optim.m.", &opt.m), ("optim.v.", &opt.v)] {
                for (p, m) in self.model.params().iter().zip(moments) {
                    manifest.push(ManifestEntry {
                        name: format!("{prefix}{}", p.name),
                        shape: p.tensor.shape().to_vec(),
                        offset,
                        frozen: false,
                    });
                    offset += 4 * m.len() as u64;
                    arrays.push(m);
                }
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            model: self.model.config().clone(),
            architecture: self.model.arch(),
            train: self.train.clone(),
            step: self.step,
            stage: self.stage,
            rng: self.rng,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.config,
                step: o.step,
            }),
            manifest,
        };
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for a in arrays {
            for v in a {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let err = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| err("missing header line".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..nl]).map_err(|e| err(format!("corrupt header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(err(format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        let body = &bytes[nl + 1..];
        let read = |e: &ManifestEntry| -> Result<Vec<f32>> {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * n;
            if end > body.len() {
                return Err(err(format!(
                    "truncated: `{}` ends at byte {end} of {}",
                    e.name,
                    body.len()
                )));
            }
            Ok(body[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        };

        let mut model = Transformer::<f32>::build(header.model.clone(), header.architecture, 0)?;
        let expected_end = header
            .manifest
            .iter()
            .map(|e| e.offset + 4 * e.shape.iter().product::<usize>() as u64)
            .max()
            .unwrap_or(0);
        if (body.len() as u64) < expected_end {
            return Err(err(format!("truncated: {} of {expected_end} array bytes", body.len())));
        }
        let mut seen = 0;
        for e in header.manifest.iter().filter(|e| !e.name.starts_with("optim.")) {
            let p = model
                .params_mut()
                .by_name_mut(&e.name)
                .ok_or_else(|| err(format!("unknown parameter `{}`", e.name)))?;
            if p.tensor.shape() != e.shape.as_slice() {
                return Err(err(format!(
                    "`{}` has shape {:?}, model expects {:?}",
                    e.name,
                    e.shape,
                    p.tensor.shape()
                )));
            }
            p.tensor = Tensor::new(e.shape.clone(), read(e)?)?;
            p.frozen = e.frozen;
            seen += 1;
        }
        if seen != model.params().len() {
            return Err(err(format!(
                "manifest holds {seen} of {} parameters",
                model.params().len()
            )));
        }

        let optimizer = match &header.optimizer {
            None => None,
            Some(oh) => {
                let mut opt = AdamW::new(oh.config, model.params());
                opt.step = oh.step;
                for (i, p) in model.params().iter().enumerate() {
                    for (prefix, slot) in [("optim.m.", &mut opt.m[i]), ("optim.v.", &mut opt.v[i])] {
                        let name = format!("{prefix}{}", p.name);
                        let e = header
                            .manifest
                            .iter()
                            .find(|e| e.name == name)
                            .ok_or_else(|| err(format!("missing optimizer state `{name}`")))?;
                        if e.shape != p.tensor.shape() {
                            return Err(err(format!("`{name}` has shape {:?}", e.shape)));
                        }
                        *slot = read(e)?;
                    }
                }
                Some(opt)
            }
        };
        Ok(Self {
            model,
            train: header.train,
            step: header.step,
            stage: header.stage,
            rng: header.rng,
            optimizer,
        })
    }

    /// Header of a checkpoint file without reading the arrays.
    pub fn read_header(path: &Path) -> Result<Header> {
        let text = std::fs::read(path)?;
        let nl = text.iter().position(|&b| b == b'\n').unwrap_or(text.len());
        serde_json::from_slice(&text[..nl]).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("corrupt header: {e}"),
        })
    }
}
