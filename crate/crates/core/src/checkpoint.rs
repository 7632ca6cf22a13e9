//! Checkpoint archive: a plain-text header followed by little-endian `f32`
//! parameter blocks.
//!
//! ```text
//! popusense-checkpoint
//! version 1
//! configuration wide_popusense
//! seed 1
//! config_hash 0123456789abcdef
//! config {"data":{...},...}
//! model <image_size> <latent_channels> <base_width>
//! popusense <variant> <k> <layers> <bank_capacity> <bank_policy>   (or "popusense none")
//! block <name> <d0>,<d1>,...                                       (one per block, payload order)
//! payload <bytes> <sha256 hex>
//! end
//! <payload>
//! ```
//!
//! Blocks are ordered autoencoder, refiner, then `bank` (`entries x C`, oldest
//! entry first). Parameters are rounded to `f32` when a [`Checkpoint`] is
//! built, so save/load is exact.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::pdc::{ModelConfig, ModelParams};
use crate::popusense::{BankPolicy, MemoryBank, PopuSenseConfig, RefinerParams, Variant};
use crate::train::{Configuration, Pipeline, PopuSense};

pub const MAGIC: &str = "popusense-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub pipeline: Pipeline,
    pub run: RunConfig,
}

fn quantize(blocks: Vec<&mut [f64]>) {
    for b in blocks {
        b.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}

impl Checkpoint {
    /// Bundles a trained pipeline with its run config, rounding every stored
    /// value to `f32`.
    pub fn new(mut pipeline: Pipeline, run: &RunConfig) -> Self {
        quantize(pipeline.model.blocks_mut());
        if let Some(ps) = pipeline.popusense.as_mut() {
            quantize(ps.refiner.blocks_mut());
            let mut bank = MemoryBank::new(ps.bank.capacity(), ps.bank.dim());
            for e in ps.bank.entries() {
                let q: Vec<f64> = e.iter().map(|v| *v as f32 as f64).collect();
                bank.push(&q).expect("same dimension");
            }
            ps.bank = bank;
        }
        Self { pipeline, run: *run }
    }

    pub fn seed(&self) -> u64 {
        self.pipeline.model.seed()
    }

    pub fn config_hash(&self) -> String {
        self.run.config_hash()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.pipeline;
        let mut blocks: Vec<(String, Vec<usize>, &[f64])> =
            p.model.blocks().into_iter().map(|b| (b.name, b.shape, b.data)).collect();
        let mut bank_data = Vec::new();
        if let Some(ps) = &p.popusense {
            blocks.extend(ps.refiner.blocks().into_iter().map(|b| (b.name, b.shape, b.data)));
            bank_data = ps.bank.entries().flatten().copied().collect();
        }
        let bank_shape = p.popusense.as_ref().map(|ps| vec![ps.bank.len(), ps.bank.dim()]);
        if let Some(shape) = bank_shape {
            blocks.push(("bank".into(), shape, &bank_data));
        }

        let mut payload = Vec::new();
        for (_, _, data) in &blocks {
            for v in data.iter() {
                payload.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }

        let m = p.model.config();
        let mut h = String::new();
        writeln!(h, "{MAGIC}").unwrap();
        writeln!(h, "version {VERSION}").unwrap();
        writeln!(h, "configuration {}", p.configuration.as_str()).unwrap();
        writeln!(h, "seed {}", p.model.seed()).unwrap();
        writeln!(h, "config_hash {}", self.run.config_hash()).unwrap();
        writeln!(h, "config {}", self.run.canonical_json()).unwrap();
        writeln!(h, "model {} {} {}", m.image_size, m.latent_channels, m.base_width).unwrap();
        match &p.popusense {
            Some(ps) => {
                let c = &ps.config;
                writeln!(h, "popusense {} {} {} {} fifo", c.variant.as_str(), c.k, c.layers, c.bank_capacity).unwrap();
            }
            None => writeln!(h, "popusense none").unwrap(),
        }
        for (name, shape, _) in &blocks {
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            writeln!(h, "block {name} {}", dims.join(",")).unwrap();
        }
        writeln!(h, "payload {} {}", payload.len(), hex(&Sha256::digest(&payload))).unwrap();
        writeln!(h, "end").unwrap();

        let mut out = h.into_bytes();
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = HeaderReader { bytes, pos: 0 };
        if r.line()? != MAGIC {
            return Err(corrupt("missing checkpoint magic line"));
        }
        let version = r.field("version")?;
        if version != VERSION.to_string() {
            return Err(Error::VersionMismatch { found: version.to_string(), expected: VERSION });
        }
        let configuration = r.field("configuration")?;
        let configuration = Configuration::parse(configuration)
            .ok_or_else(|| corrupt(format!("unknown configuration {configuration}")))?;
        let seed: u64 = parse(r.field("seed")?)?;
        let hash = r.field("config_hash")?.to_string();
        let run = RunConfig::from_json_str(r.field("config")?).map_err(|e| corrupt(format!("embedded config: {e}")))?;
        if run.config_hash() != hash {
            return Err(corrupt("config hash does not match the embedded config"));
        }
        if run.train.configuration != configuration || run.train.seed != seed {
            return Err(corrupt("header disagrees with the embedded config"));
        }
        let model_cfg = parse_model(r.field("model")?)?;
        if model_cfg != run.model_config() {
            return Err(corrupt("model shape disagrees with the embedded config"));
        }
        let ps_cfg = parse_popusense(r.field("popusense")?)?;
        if ps_cfg != run.popusense_config() {
            return Err(corrupt("popusense settings disagree with the embedded config"));
        }

        let mut names = Vec::new();
        loop {
            let line = r.line()?;
            if let Some(rest) = line.strip_prefix("block ") {
                let (name, dims) = rest.split_once(' ').ok_or_else(|| corrupt("malformed block line"))?;
                let shape = dims.split(',').map(parse::<usize>).collect::<Result<Vec<_>>>()?;
                names.push((name.to_string(), shape));
            } else if let Some(rest) = line.strip_prefix("payload ") {
                let (len, digest) = rest.split_once(' ').ok_or_else(|| corrupt("malformed payload line"))?;
                let len: usize = parse(len)?;
                if r.line()? != "end" {
                    return Err(corrupt("missing end of header"));
                }
                let payload = &bytes[r.pos..];
                if payload.len() != len {
                    return Err(corrupt(format!("payload has {} bytes, header says {len}", payload.len())));
                }
                if hex(&Sha256::digest(payload)) != digest {
                    return Err(corrupt("payload checksum mismatch"));
                }
                return build(configuration, run, model_cfg, seed, ps_cfg, &names, payload);
            } else {
                return Err(corrupt(format!("unexpected header line {line:?}")));
            }
        }
    }
}

fn build(
    configuration: Configuration,
    run: RunConfig,
    model_cfg: ModelConfig,
    seed: u64,
    ps_cfg: Option<PopuSenseConfig>,
    names: &[(String, Vec<usize>)],
    payload: &[u8],
) -> Result<Checkpoint> {
    let mut model = ModelParams::zeroed(model_cfg, seed);
    let c = model_cfg.latent_channels;
    let mut refiner = ps_cfg.map(|p| RefinerParams::new(c, p.layers, 0).zeros_like());

    let mut expected: Vec<(String, Vec<usize>)> = model.blocks().into_iter().map(|b| (b.name, b.shape)).collect();
    if let Some(r) = &refiner {
        expected.extend(r.blocks().into_iter().map(|b| (b.name, b.shape)));
    }
    let bank_rows = match (ps_cfg, names.last()) {
        (Some(p), Some((name, shape))) if name == "bank" && shape.len() == 2 && shape[1] == c => {
            if shape[0] > p.bank_capacity {
                return Err(corrupt("bank holds more entries than its capacity"));
            }
            expected.push(("bank".into(), vec![shape[0], c]));
            shape[0]
        }
        (Some(_), _) => return Err(corrupt("missing or malformed bank block")),
        (None, _) => 0,
    };
    if names != expected.as_slice() {
        return Err(corrupt("parameter blocks do not match the model layout"));
    }
    let total: usize = expected.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if payload.len() != 4 * total {
        return Err(corrupt(format!("expected {} payload bytes, found {}", 4 * total, payload.len())));
    }

    let mut values = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
    let mut fill = |blocks: Vec<&mut [f64]>| {
        for b in blocks {
            b.iter_mut().for_each(|v| *v = values.next().expect("length checked"));
        }
    };
    fill(model.blocks_mut());
    if let Some(r) = refiner.as_mut() {
        fill(r.blocks_mut());
    }
    let popusense = match (ps_cfg, refiner) {
        (Some(config), Some(refiner)) => {
            let mut bank = MemoryBank::new(config.bank_capacity, c);
            let mut row = vec![0.0; c];
            for _ in 0..bank_rows {
                row.iter_mut().for_each(|v| *v = values.next().expect("length checked"));
                bank.push(&row)?;
            }
            Some(PopuSense { config, refiner, bank })
        }
        _ => None,
    };
    Ok(Checkpoint { pipeline: Pipeline { configuration, model, popusense }, run })
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| corrupt("truncated header"))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| corrupt("header is not UTF-8"))
    }

    fn field(&mut self, key: &str) -> Result<&'a str> {
        let line = self.line()?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| corrupt(format!("expected `{key}` line, found {line:?}")))
    }
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

fn parse<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| corrupt(format!("cannot parse {s:?}")))
}

fn parse_model(s: &str) -> Result<ModelConfig> {
    let v = s.split(' ').map(parse::<usize>).collect::<Result<Vec<_>>>()?;
    match v[..] {
        [image_size, latent_channels, base_width] => Ok(ModelConfig { image_size, latent_channels, base_width }),
        _ => Err(corrupt("malformed model line")),
    }
}

fn parse_popusense(s: &str) -> Result<Option<PopuSenseConfig>> {
    if s == "none" {
        return Ok(None);
    }
    let f: Vec<&str> = s.split(' ').collect();
    let [variant, k, layers, cap, "fifo"] = f[..] else {
        return Err(corrupt("malformed popusense line"));
    };
    let variant = match variant {
        "narrow" => Variant::Narrow,
        "wide" => Variant::Wide,
        other => return Err(corrupt(format!("unknown variant {other}"))),
    };
    Ok(Some(PopuSenseConfig {
        variant,
        k: parse(k)?,
        layers: parse(layers)?,
        bank_capacity: parse(cap)?,
        bank_policy: BankPolicy::Fifo,
    }))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
