//! Versioned binary container for [`TrainState`].
//!
//! Layout: an 8-byte magic, a little-endian `u32` format version, a `u64`
//! header length, a JSON header, then every tensor as little-endian `f32` in
//! the order the header lists them. The header carries a SHA-256 of the
//! tensor payload.

use crate::error::{Error, Result};
use crate::model::{discriminator_specs, generator_specs, Discriminator, Generator, Network};
use crate::nn::{Adam, AdamConfig, AdamState, Conv2d, ConvSpec};
use crate::perception::sha256_hex;
use crate::trainer::{TrainConfig, TrainState};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"RSEPCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Section {
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    epoch: u64,
    step: u64,
    config: TrainConfig,
    vgg_checksum: String,
    generator_checksum: String,
    discriminator_checksum: String,
    adam: AdamConfig,
    generator_opt_step: u64,
    discriminator_opt_step: u64,
    sections: Vec<Section>,
    payload_sha256: String,
}

fn sections<'a>(
    prefix: &str,
    layers: &'a [Conv2d<f32>],
    opt: &'a AdamState<f32>,
) -> Vec<(String, &'a [f32])> {
    let mut out = Vec::new();
    for (i, c) in layers.iter().enumerate() {
        out.push((format!("{prefix}.{i}.weight"), c.weight.as_slice()));
        out.push((format!("{prefix}.{i}.bias"), c.bias.as_slice()));
    }
    for (i, m) in opt.first.iter().enumerate() {
        out.push((format!("{prefix}.adam.m.{i}"), m.as_slice()));
    }
    for (i, v) in opt.second.iter().enumerate() {
        out.push((format!("{prefix}.adam.v.{i}"), v.as_slice()));
    }
    out
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let mut tensors = sections("generator", &state.generator.layers, &state.generator_opt.state);
    tensors.extend(sections("discriminator", &state.discriminator.layers, &state.discriminator_opt.state));
    let payload: Vec<u8> = tensors.iter().flat_map(|(_, t)| t.iter().flat_map(|v| v.to_le_bytes())).collect();
    let header = Header {
        epoch: state.epoch,
        step: state.step,
        config: state.config.clone(),
        vgg_checksum: state.vgg_checksum.clone(),
        generator_checksum: state.generator.checksum(),
        discriminator_checksum: state.discriminator.checksum(),
        adam: state.generator_opt.config,
        generator_opt_step: state.generator_opt.state.step,
        discriminator_opt_step: state.discriminator_opt.state.step,
        sections: tensors.iter().map(|(name, t)| Section { name: name.clone(), len: t.len() }).collect(),
        payload_sha256: sha256_hex(&payload),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;

    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    // Write next to the target and rename, so an interrupted save never
    // leaves a truncated checkpoint behind.
    let tmp = path.with_extension("tmp");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?);
    let write = |f: &mut std::io::BufWriter<std::fs::File>, bytes: &[u8]| f.write_all(bytes).map_err(|e| Error::io(&tmp, e));
    write(&mut f, MAGIC)?;
    write(&mut f, &FORMAT_VERSION.to_le_bytes())?;
    write(&mut f, &(json.len() as u64).to_le_bytes())?;
    write(&mut f, &json)?;
    write(&mut f, &payload)?;
    f.flush().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("section too large".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }
}

fn read_network(
    r: &mut Reader,
    sections: &mut std::slice::Iter<Section>,
    prefix: &str,
    specs: &[ConvSpec],
) -> Result<(Vec<Conv2d<f32>>, Vec<Vec<f32>>, Vec<Vec<f32>>)> {
    let mut next = |name: String, len: usize| -> Result<Vec<f32>> {
        match sections.next() {
            Some(s) if s.name == name && s.len == len => r.floats(len),
            Some(s) => Err(Error::Checkpoint(format!("expected section {name} ({len} values), found {} ({})", s.name, s.len))),
            None => Err(Error::Checkpoint(format!("missing section {name}"))),
        }
    };
    let mut layers = Vec::with_capacity(specs.len());
    let mut lens = Vec::new();
    for (i, spec) in specs.iter().enumerate() {
        let weight = next(format!("{prefix}.{i}.weight"), spec.weight_len())?;
        let bias = next(format!("{prefix}.{i}.bias"), spec.out_channels)?;
        lens.extend([weight.len(), bias.len()]);
        layers.push(Conv2d::from_parts(*spec, weight, bias));
    }
    let first = lens.iter().enumerate().map(|(i, &n)| next(format!("{prefix}.adam.m.{i}"), n)).collect::<Result<_>>()?;
    let second = lens.iter().enumerate().map(|(i, &n)| next(format!("{prefix}.adam.v.{i}"), n)).collect::<Result<_>>()?;
    Ok((layers, first, second))
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version} (expected {FORMAT_VERSION})")));
    }
    let header_len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let header_len = usize::try_from(header_len).map_err(|_| Error::Checkpoint("header too large".into()))?;
    let header: Header =
        serde_json::from_slice(r.take(header_len)?).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let found = sha256_hex(&bytes[r.pos..]);
    if found != header.payload_sha256 {
        return Err(Error::Checksum { expected: header.payload_sha256, found });
    }

    let mut sections = header.sections.iter();
    let (g_layers, g_m, g_v) = read_network(&mut r, &mut sections, "generator", &generator_specs())?;
    let (d_layers, d_m, d_v) = read_network(&mut r, &mut sections, "discriminator", &discriminator_specs())?;
    if sections.next().is_some() || r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing data after the last section".into()));
    }
    let generator = Generator::from_layers(g_layers)?;
    let discriminator = Discriminator::from_layers(d_layers)?;
    if generator.checksum() != header.generator_checksum || discriminator.checksum() != header.discriminator_checksum {
        return Err(Error::Checkpoint("parameter checksum does not match the header".into()));
    }
    let opt = |step, first, second| Adam { config: header.adam, state: AdamState { step, first, second } };
    Ok(TrainState {
        generator,
        discriminator,
        generator_opt: opt(header.generator_opt_step, g_m, g_v),
        discriminator_opt: opt(header.discriminator_opt_step, d_m, d_v),
        epoch: header.epoch,
        step: header.step,
        config: header.config,
        vgg_checksum: header.vgg_checksum,
    })
}
