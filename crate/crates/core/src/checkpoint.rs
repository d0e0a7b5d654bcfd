//! Binary container for trained networks.
//!
//! Layout: one UTF-8 JSON header line, `\n`, then every network's parameters
//! as little-endian f64 in header order (per layer: weights row-major, then
//! biases). The header names each network and lists its layer shapes and
//! activations next to free-form metadata.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::gan::{Critics, Generators, ModelDims, TrainConfig, TrainedModel};
use crate::matrix::Matrix;
use crate::mlp::{Activation, Layer, Mlp};
use crate::representations::EncoderPair;

pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerShape {
    input: usize,
    output: usize,
    activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NetEntry {
    name: String,
    layers: Vec<LayerShape>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: String,
    meta: Value,
    nets: Vec<NetEntry>,
}

/// Serialises `nets` with `meta` under a `kind` tag.
pub fn write_container(kind: &str, meta: Value, nets: &[(&str, &Mlp)]) -> Result<Vec<u8>> {
    let header = Header {
        version: CONTAINER_VERSION,
        kind: kind.into(),
        meta,
        nets: nets
            .iter()
            .map(|(name, net)| NetEntry {
                name: (*name).into(),
                layers: net
                    .layers
                    .iter()
                    .map(|l| LayerShape {
                        input: l.input_dim(),
                        output: l.output_dim(),
                        activation: l.activation,
                    })
                    .collect(),
            })
            .collect(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for (_, net) in nets {
        for p in net.params() {
            out.extend_from_slice(&p.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a container, checking its `kind`. Networks come back in file order.
pub fn read_container(bytes: &[u8], kind: &str) -> Result<(Value, Vec<(String, Mlp)>)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::MalformedHeader("no header line".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    if header.version != CONTAINER_VERSION {
        return Err(Error::MalformedHeader(format!(
            "unsupported version {}",
            header.version
        )));
    }
    if header.kind != kind {
        return Err(Error::MalformedHeader(format!(
            "expected a {kind} file, found {}",
            header.kind
        )));
    }
    let mut off = nl + 1;
    let mut nets = Vec::with_capacity(header.nets.len());
    for entry in header.nets {
        let layers = entry
            .layers
            .iter()
            .map(|s| Layer {
                weight: Matrix::zeros(s.input, s.output),
                bias: vec![0.0; s.output],
                activation: s.activation,
            })
            .collect();
        let mut net = Mlp::from_layers(layers)?;
        let n = net.num_params();
        let end = off + 8 * n;
        if end > bytes.len() {
            return Err(Error::Parse {
                offset: bytes.len(),
                msg: format!(
                    "parameters of {} truncated (need {} bytes from offset {off})",
                    entry.name,
                    8 * n
                ),
            });
        }
        let params: Vec<f64> = bytes[off..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        net.set_params(&params)?;
        off = end;
        nets.push((entry.name, net));
    }
    if off != bytes.len() {
        return Err(Error::Parse {
            offset: off,
            msg: format!("{} trailing bytes", bytes.len() - off),
        });
    }
    Ok((header.meta, nets))
}

fn take(nets: &mut Vec<(String, Mlp)>, name: &str) -> Result<Mlp> {
    let i = nets
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::MalformedHeader(format!("missing network {name}")))?;
    Ok(nets.remove(i).1)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EncoderMeta {
    tau: f64,
    v_mean: Vec<f64>,
    v_std: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelMeta {
    dims: ModelDims,
    betas: Vec<f64>,
    config: TrainConfig,
    encoder: EncoderMeta,
}

/// A trained model together with the encoders that define its feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: TrainedModel,
    pub encoders: EncoderPair,
}

impl Checkpoint {
    pub const KIND: &'static str = "checkpoint";

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = ModelMeta {
            dims: self.model.dims,
            betas: (1..=self.model.schedule.steps())
                .map(|t| self.model.schedule.beta(t))
                .collect(),
            config: self.model.config.clone(),
            encoder: EncoderMeta {
                tau: self.encoders.tau,
                v_mean: self.encoders.v_mean.clone(),
                v_std: self.encoders.v_std.clone(),
            },
        };
        let m = &self.model;
        write_container(
            Self::KIND,
            serde_json::to_value(meta)?,
            &[
                ("g", &m.gens.g),
                ("r", &m.gens.r),
                ("d_adv", &m.critics.adv),
                ("d_diff", &m.critics.diff),
                ("d_rep", &m.critics.rep),
                ("f_ce", &self.encoders.f_ce),
                ("ce_head", &self.encoders.ce_head),
                ("f_sc", &self.encoders.f_sc),
            ],
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, mut nets) = read_container(bytes, Self::KIND)?;
        let meta: ModelMeta =
            serde_json::from_value(meta).map_err(|e| Error::MalformedHeader(e.to_string()))?;
        let schedule = DiffusionSchedule::from_betas(meta.betas)?;
        let model = TrainedModel {
            dims: meta.dims,
            schedule,
            config: meta.config,
            gens: Generators {
                g: take(&mut nets, "g")?,
                r: take(&mut nets, "r")?,
            },
            critics: Critics {
                adv: take(&mut nets, "d_adv")?,
                diff: take(&mut nets, "d_diff")?,
                rep: take(&mut nets, "d_rep")?,
            },
        };
        let encoders = EncoderPair {
            f_ce: take(&mut nets, "f_ce")?,
            ce_head: take(&mut nets, "ce_head")?,
            f_sc: take(&mut nets, "f_sc")?,
            tau: meta.encoder.tau,
            v_mean: meta.encoder.v_mean,
            v_std: meta.encoder.v_std,
        };
        let d = &model.dims;
        let checks = [
            (model.gens.g.input_dim(), d.g_in(), "G input"),
            (model.gens.g.output_dim(), d.d_v, "G output"),
            (model.gens.r.input_dim(), d.r_in(), "R input"),
            (model.critics.adv.input_dim(), d.adv_in(), "D_adv input"),
            (model.critics.diff.input_dim(), d.diff_in(), "D_diff input"),
            (model.critics.rep.input_dim(), d.rep_in(), "D_rep input"),
            (encoders.f_ce.output_dim(), d.d_v, "f_ce output"),
            (encoders.f_sc.output_dim(), d.d_r, "f_sc output"),
            (encoders.v_mean.len(), d.d_v, "feature mean"),
        ];
        for (got, want, what) in checks {
            if got != want {
                return Err(Error::DimensionMismatch(format!(
                    "{what}: {got}, expected {want}"
                )));
            }
        }
        if d.steps != model.schedule.steps() {
            return Err(Error::DimensionMismatch(format!(
                "T = {} vs {} betas",
                d.steps,
                model.schedule.steps()
            )));
        }
        Ok(Self { model, encoders })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
