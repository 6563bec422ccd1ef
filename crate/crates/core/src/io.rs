//! On-disk formats: token files, checkpoints, dataset descriptors, heatmaps and CSV.
//!
//! Binary formats are little-endian with a 4-byte magic and a `u32` version.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::aggregation::{AggregatorConfig, TierConfig};
use crate::data::{make_synth_dataset_with, Dataset, Fnv, SynthConfig};
use crate::encoder::{EncoderConfig, TokenSet};
use crate::error::{Error, Result};
use crate::losses::MsLossConfig;
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::Matrix;
use crate::training::LossConfig;

pub const TOKEN_MAGIC: &[u8; 4] = b"WTKS";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WADC";
pub const DATASET_MAGIC: &[u8; 4] = b"WSYN";
pub const FORMAT_VERSION: u32 = 1;

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated file".into()),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    Ok(read_exact::<1>(r)?[0])
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact(r)?))
}

fn read_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return format_err("truncated file");
    }
    Ok(buf)
}

fn expect_header(r: &mut impl Read, magic: &[u8; 4]) -> Result<()> {
    let found: [u8; 4] = read_exact(r)?;
    if &found != magic {
        return format_err(format!(
            "bad magic: expected {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&found)
        ));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return format_err(format!("unsupported format version {version}"));
    }
    Ok(())
}

fn expect_end(r: &mut impl Read) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => format_err("trailing bytes after payload"),
    }
}

/// Patch tokens (and optionally the CLS token) as 32-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenFile {
    pub n: usize,
    pub d: usize,
    pub has_cls: bool,
    /// Row-major, `(n + has_cls)·d` values, CLS row last.
    pub data: Vec<f32>,
}

impl TokenFile {
    pub fn from_tokens(tokens: &TokenSet) -> Self {
        let mut data: Vec<f32> = tokens.patch.data().iter().map(|&v| v as f32).collect();
        data.extend(tokens.cls.iter().map(|&v| v as f32));
        Self {
            n: tokens.len(),
            d: tokens.width(),
            has_cls: true,
            data,
        }
    }

    /// Widens to `f64`. A file without CLS cannot be aggregated.
    pub fn to_tokens(&self) -> Result<TokenSet> {
        if !self.has_cls {
            return Err(Error::Domain("token file has no CLS row".into()));
        }
        let wide: Vec<f64> = self.data.iter().map(|&v| v as f64).collect();
        let (patch, cls) = wide.split_at(self.n * self.d);
        Ok(TokenSet {
            patch: Matrix::new(self.n, self.d, patch.to_vec())?,
            cls: cls.to_vec(),
            kept_indices: (0..self.n).collect(),
        })
    }

    fn rows(&self) -> usize {
        self.n + usize::from(self.has_cls)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        if self.data.len() != self.rows() * self.d {
            return format_err("token payload length does not match its header");
        }
        w.write_all(TOKEN_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.n as u32).to_le_bytes())?;
        w.write_all(&(self.d as u32).to_le_bytes())?;
        w.write_all(&[u8::from(self.has_cls)])?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        expect_header(r, TOKEN_MAGIC)?;
        let n = read_u32(r)? as usize;
        let d = read_u32(r)? as usize;
        let has_cls = match read_u8(r)? {
            0 => false,
            1 => true,
            other => return format_err(format!("has_cls must be 0 or 1, found {other}")),
        };
        let len = (n + usize::from(has_cls)) * d;
        let bytes = read_bytes(r, len * 4)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        expect_end(r)?;
        Ok(Self { n, d, has_cls, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// Ordered `key=value` lines. Floats use the shortest representation that parses back
/// to the same bits.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn push_list<T: ToString>(&mut self, key: &str, values: &[T]) {
        let joined: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        self.push(key, joined.join(","));
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(k);
            s.push('=');
            s.push_str(v);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let Some((k, v)) = line.split_once('=') else {
                return format_err(format!("config line without '=': {line:?}"));
            };
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(Self { entries })
    }

    pub fn as_map(&self) -> Result<BTreeMap<&str, &str>> {
        let mut map = BTreeMap::new();
        for (k, v) in &self.entries {
            if map.insert(k.as_str(), v.as_str()).is_some() {
                return format_err(format!("duplicate config key {k}"));
            }
        }
        Ok(map)
    }
}

struct Fields<'a>(BTreeMap<&'a str, &'a str>);

impl Fields<'_> {
    fn raw(&self, key: &str) -> Result<&str> {
        self.0
            .get(key)
            .copied()
            .ok_or_else(|| Error::Format(format!("missing config key {key}")))
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key)?;
        raw.parse()
            .map_err(|_| Error::Format(format!("bad value for {key}: {raw:?}")))
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let raw = self.raw(key)?;
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Format(format!("bad list value for {key}: {raw:?}")))
            })
            .collect()
    }
}

/// Model, loss and dataset settings needed to rebuild a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub loss: LossConfig,
    /// Generator settings of the training data, when known.
    pub data: Option<SynthConfig>,
    pub params: ModelParams,
}

fn config_block(c: &Checkpoint) -> KeyValues {
    let mut kv = KeyValues::default();
    let e = &c.model.encoder;
    kv.push("encoder.image_side", e.image_side);
    kv.push("encoder.patch_size", e.patch_size);
    kv.push("encoder.channels", e.channels);
    kv.push("encoder.width", e.width);
    kv.push("encoder.depth", e.depth);
    kv.push("encoder.heads", e.heads);
    kv.push("encoder.mlp_ratio", e.mlp_ratio);
    kv.push("encoder.prune_layer", e.prune_layer);
    kv.push("encoder.trainable_last_k", e.trainable_last_k);
    let a = &c.model.aggregator;
    kv.push("aggregator.clusters", a.clusters);
    kv.push("aggregator.d_low", a.d_low);
    kv.push("aggregator.d_cls", a.d_cls);
    kv.push("aggregator.hidden", a.hidden);
    kv.push_list("tiers.sizes", &a.tiers.sizes);
    kv.push("tiers.theta0", a.tiers.theta0);
    kv.push_list("tiers.theta_delta", &a.tiers.theta_delta);
    kv.push("tiers.floor", a.tiers.floor);
    kv.push("tiers.ghost_penalty", a.tiers.ghost_penalty);
    kv.push("model.student_hidden", c.model.student_hidden);
    kv.push("model.epsilon", c.model.epsilon);
    kv.push("model.sinkhorn_iters", c.model.sinkhorn_iters);
    kv.push("ms.alpha", c.loss.ms.alpha);
    kv.push("ms.beta", c.loss.ms.beta);
    kv.push("ms.margin", c.loss.ms.margin);
    kv.push("ms.mining", c.loss.ms.mining);
    kv.push("loss.gamma", c.loss.gamma);
    kv.push("loss.temperature", c.loss.temperature);
    if let Some(d) = &c.data {
        push_synth(&mut kv, d);
    }
    kv
}

fn push_synth(kv: &mut KeyValues, d: &SynthConfig) {
    kv.push("data.places", d.places);
    kv.push("data.views", d.views);
    kv.push("data.noise", d.noise);
    kv.push("data.distractor_frac", d.distractor_frac);
    kv.push("data.seed", d.seed);
    kv.push("data.image_side", d.image_side);
    kv.push("data.patch_size", d.patch_size);
    kv.push("data.channels", d.channels);
}

fn parse_synth(f: &Fields<'_>) -> Result<SynthConfig> {
    Ok(SynthConfig {
        places: f.get("data.places")?,
        views: f.get("data.views")?,
        noise: f.get("data.noise")?,
        distractor_frac: f.get("data.distractor_frac")?,
        seed: f.get("data.seed")?,
        image_side: f.get("data.image_side")?,
        patch_size: f.get("data.patch_size")?,
        channels: f.get("data.channels")?,
    })
}

fn parse_config(f: &Fields<'_>) -> Result<(ModelConfig, LossConfig, Option<SynthConfig>)> {
    let encoder = EncoderConfig {
        image_side: f.get("encoder.image_side")?,
        patch_size: f.get("encoder.patch_size")?,
        channels: f.get("encoder.channels")?,
        width: f.get("encoder.width")?,
        depth: f.get("encoder.depth")?,
        heads: f.get("encoder.heads")?,
        mlp_ratio: f.get("encoder.mlp_ratio")?,
        prune_layer: f.get("encoder.prune_layer")?,
        trainable_last_k: f.get("encoder.trainable_last_k")?,
    };
    let aggregator = AggregatorConfig {
        clusters: f.get("aggregator.clusters")?,
        d_low: f.get("aggregator.d_low")?,
        d_cls: f.get("aggregator.d_cls")?,
        hidden: f.get("aggregator.hidden")?,
        tiers: TierConfig {
            sizes: f.list("tiers.sizes")?,
            theta0: f.get("tiers.theta0")?,
            theta_delta: f.list("tiers.theta_delta")?,
            floor: f.get("tiers.floor")?,
            ghost_penalty: f.get("tiers.ghost_penalty")?,
        },
    };
    let model = ModelConfig {
        encoder,
        aggregator,
        student_hidden: f.get("model.student_hidden")?,
        epsilon: f.get("model.epsilon")?,
        sinkhorn_iters: f.get("model.sinkhorn_iters")?,
    };
    let loss = LossConfig {
        ms: MsLossConfig {
            alpha: f.get("ms.alpha")?,
            beta: f.get("ms.beta")?,
            margin: f.get("ms.margin")?,
            mining: f.get("ms.mining")?,
        },
        gamma: f.get("loss.gamma")?,
        temperature: f.get("loss.temperature")?,
    };
    let data = if f.0.contains_key("data.places") {
        Some(parse_synth(f)?)
    } else {
        None
    };
    Ok((model, loss, data))
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let text = config_block(self).to_text();
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(text.len() as u32).to_le_bytes())?;
        w.write_all(text.as_bytes())?;
        let named = self.params.named();
        w.write_all(&(named.len() as u32).to_le_bytes())?;
        for (name, m) in named {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&2u32.to_le_bytes())?;
            w.write_all(&(m.rows() as u64).to_le_bytes())?;
            w.write_all(&(m.cols() as u64).to_le_bytes())?;
            for v in m.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        expect_header(r, CHECKPOINT_MAGIC)?;
        let text_len = read_u32(r)? as usize;
        let text = String::from_utf8(read_bytes(r, text_len)?)
            .map_err(|_| Error::Format("config block is not UTF-8".into()))?;
        let kv = KeyValues::parse(&text)?;
        let (model, loss, data) = parse_config(&Fields(kv.as_map()?))?;
        model.validate()?;
        let count = read_u32(r)? as usize;
        let mut blobs: BTreeMap<String, Matrix> = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let name = String::from_utf8(read_bytes(r, name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = read_u32(r)? as usize;
            let dims: Vec<usize> = (0..rank).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<_>>()?;
            let (rows, cols) = match dims[..] {
                [n] => (1, n),
                [a, b] => (a, b),
                _ => return format_err(format!("tensor {name} has unsupported rank {rank}")),
            };
            let bytes = read_bytes(r, rows * cols * 8)?;
            let values = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            if blobs.insert(name.clone(), Matrix::new(rows, cols, values)?).is_some() {
                return format_err(format!("tensor {name} appears twice"));
            }
        }
        expect_end(r)?;
        let mut params = ModelParams::init(&model, 0);
        for (name, slot) in params.named_mut() {
            let Some(m) = blobs.remove(&name) else {
                return format_err(format!("missing tensor {name}"));
            };
            if m.shape() != slot.shape() {
                return format_err(format!(
                    "tensor {name}: expected shape {:?}, found {:?}",
                    slot.shape(),
                    m.shape()
                ));
            }
            *slot = m;
        }
        if let Some(extra) = blobs.keys().next() {
            return format_err(format!("unknown tensor {extra}"));
        }
        Ok(Self {
            model,
            loss,
            data,
            params,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    /// FNV-1a of the serialized bytes.
    pub fn checksum(&self) -> Result<u64> {
        let mut h = Fnv::new();
        h.write(&self.to_bytes()?);
        Ok(h.finish())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// A dataset is stored as its generator settings plus a pixel checksum; loading
/// regenerates it and refuses a checksum mismatch.
pub fn save_dataset(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut kv = KeyValues::default();
    push_synth(&mut kv, &data.config);
    let text = kv.to_text();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(text.len() as u32).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    w.write_all(&data.checksum().to_le_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    expect_header(&mut r, DATASET_MAGIC)?;
    let text_len = read_u32(&mut r)? as usize;
    let text = String::from_utf8(read_bytes(&mut r, text_len)?)
        .map_err(|_| Error::Format("config block is not UTF-8".into()))?;
    let expected = read_u64(&mut r)?;
    expect_end(&mut r)?;
    let kv = KeyValues::parse(&text)?;
    let cfg = parse_synth(&Fields(kv.as_map()?))?;
    let data = make_synth_dataset_with(&cfg)?;
    if data.checksum() != expected {
        return format_err("regenerated dataset does not match the stored checksum");
    }
    Ok(data)
}

/// Plain (ASCII) PGM with the values min-max scaled to 0..255. A constant grid maps to 0.
pub fn write_pgm(w: &mut impl Write, values: &[f64], width: usize, height: usize) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::Shape {
            op: "write_pgm",
            expected: (width * height).to_string(),
            found: values.len().to_string(),
        });
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let levels: Vec<u8> = values
        .iter()
        .map(|&v| {
            if hi > lo {
                ((v - lo) / (hi - lo) * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    write_pgm_levels(w, &levels, width, height)
}

/// Binary mask as a PGM: kept cells 255, dropped cells 0.
pub fn write_mask_pgm(w: &mut impl Write, kept: &[bool], width: usize, height: usize) -> Result<()> {
    let levels: Vec<u8> = kept.iter().map(|&k| if k { 255 } else { 0 }).collect();
    write_pgm_levels(w, &levels, width, height)
}

fn write_pgm_levels(w: &mut impl Write, levels: &[u8], width: usize, height: usize) -> Result<()> {
    if levels.len() != width * height {
        return Err(Error::Shape {
            op: "write_pgm",
            expected: (width * height).to_string(),
            found: levels.len().to_string(),
        });
    }
    writeln!(w, "P2\n{width} {height}\n255")?;
    for row in levels.chunks(width) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", cells.join(" "))?;
    }
    Ok(())
}

/// Parses a plain PGM back into its levels; used to check exported heatmaps.
pub fn read_pgm(text: &str) -> Result<(usize, usize, Vec<u8>)> {
    let mut it = text.split_whitespace();
    if it.next() != Some("P2") {
        return format_err("not a plain PGM");
    }
    let mut num = |what: &str| -> Result<usize> {
        it.next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad PGM {what}")))
    };
    let (width, height, max) = (num("width")?, num("height")?, num("maxval")?);
    if max != 255 {
        return format_err("PGM maxval must be 255");
    }
    let levels = (0..width * height)
        .map(|_| num("pixel").map(|v| v as u8))
        .collect::<Result<Vec<u8>>>()?;
    Ok((width, height, levels))
}

/// Grid values as CSV, one grid row per line.
pub fn write_grid_csv(w: &mut impl Write, values: &[f64], width: usize) -> Result<()> {
    for row in values.chunks(width) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synth_dataset;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("weitop-io-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn token_file_round_trip() {
        let mut rng = crate::SeededRng::new(3);
        let tf = TokenFile {
            n: 5,
            d: 7,
            has_cls: true,
            data: (0..42).map(|_| rng.normal() as f32).collect(),
        };
        let mut buf = Vec::new();
        tf.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"WTKS");
        assert_eq!(buf.len(), 4 + 4 + 4 + 4 + 1 + 42 * 4);
        let back = TokenFile::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, tf);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn token_file_rejects_bad_input() {
        let tf = TokenFile {
            n: 2,
            d: 2,
            has_cls: false,
            data: vec![1.0, 2.0, 3.0, 4.0],
        };
        let mut buf = Vec::new();
        tf.write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(TokenFile::read_from(&mut bad.as_slice()), Err(Error::Format(_))));
        let short = &buf[..buf.len() - 1];
        assert!(matches!(TokenFile::read_from(&mut &short[..]), Err(Error::Format(_))));
        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(TokenFile::read_from(&mut long.as_slice()), Err(Error::Format(_))));
        assert!(tf.to_tokens().is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let cfg = ModelConfig::grad_check();
        let ck = Checkpoint {
            model: cfg.clone(),
            loss: LossConfig::default(),
            data: Some(SynthConfig::new(10, 3, 0.3, 0.125, 4)),
            params: ModelParams::init(&cfg, 11),
        };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let path = tmp("ck.wadc");
        ck.save(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn checkpoint_detects_missing_tensor() {
        let cfg = ModelConfig::grad_check();
        let ck = Checkpoint {
            model: cfg.clone(),
            loss: LossConfig::default(),
            data: None,
            params: ModelParams::init(&cfg, 1),
        };
        let mut bytes = ck.to_bytes().unwrap();
        // Drop the last tensor: patch the count and cut its blob.
        let named = ck.params.named();
        let (last_name, last) = named.last().unwrap();
        let blob = 4 + last_name.len() + 4 + 16 + last.len() * 8;
        bytes.truncate(bytes.len() - blob);
        let text_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let at = 12 + text_len;
        let count = named.len() as u32 - 1;
        bytes[at..at + 4].copy_from_slice(&count.to_le_bytes());
        let err = Checkpoint::read_from(&mut bytes.as_slice()).unwrap_err();
        assert!(err.to_string().contains(last_name.as_str()), "{err}");
    }

    #[test]
    fn dataset_round_trip() {
        let d = make_synth_dataset(4, 3, 0.3, 0.125, 9).unwrap();
        let path = tmp("d.wsyn");
        save_dataset(&d, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), d);
    }

    #[test]
    fn pgm_scaling() {
        let mut buf = Vec::new();
        write_pgm(&mut buf, &[0.0, 0.5, 1.0, 0.25], 2, 2).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "P2\n2 2\n255\n0 128\n255 64\n");
        assert_eq!(read_pgm(&text).unwrap(), (2, 2, vec![0, 128, 255, 64]));
        let mut buf = Vec::new();
        write_mask_pgm(&mut buf, &[true; 4], 2, 2).unwrap();
        assert_eq!(read_pgm(std::str::from_utf8(&buf).unwrap()).unwrap().2, vec![255; 4]);
        assert!(write_pgm(&mut Vec::new(), &[1.0; 3], 2, 2).is_err());
    }

    #[test]
    fn csv_uses_period_and_round_trips_floats() {
        let mut buf = Vec::new();
        let v = [0.1, -2.5e-7, 1.0 / 3.0, 4.0];
        write_grid_csv(&mut buf, &v, 2).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let parsed: Vec<f64> = text
            .lines()
            .flat_map(|l| l.split(','))
            .map(|s| s.parse().unwrap())
            .collect();
        assert_eq!(parsed, v);
        assert!(text.starts_with("0.1,"));
    }
}
