//! Binary checkpoints.
//!
//! Layout: the line `GATTA1`, a line `manifest <bytes>`, a UTF-8 manifest of
//! that many bytes, then every tensor as little-endian `f32` in manifest
//! order. The manifest holds `key=value` architecture lines followed by one
//! `tensor <name> <dims> <offset> <len>` line per tensor, where `dims` is
//! comma separated and offset/len count payload bytes.
//!
//! Backbone tensors always come first, so a checkpoint written after
//! attention training starts with a payload prefix identical to the
//! backbone checkpoint it was trained from.

use std::fs;
use std::ops::Range;
use std::path::Path;

use crate::attention::AttentionParams;
use crate::backbone::{BackboneModel, ToyCnnConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &str = "GATTA1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub backbone: BackboneModel,
    pub attention: Option<AttentionParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte range within the payload.
    pub bytes: Range<usize>,
}

/// Parsed header of a checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub config: ToyCnnConfig,
    pub attention_dim: Option<usize>,
    pub tensors: Vec<TensorEntry>,
    /// Offset of the payload within the file.
    pub payload_start: usize,
}

impl Manifest {
    /// Payload byte range holding the backbone tensors.
    pub fn backbone_bytes(&self) -> Range<usize> {
        let end = self
            .tensors
            .iter()
            .filter(|t| t.name.starts_with("backbone."))
            .map(|t| t.bytes.end)
            .max()
            .unwrap_or(0);
        self.payload_start..self.payload_start + end
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl Checkpoint {
    pub fn backbone_only(backbone: BackboneModel) -> Self {
        Checkpoint {
            backbone,
            attention: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = self.backbone.config();
        let mut manifest = String::new();
        manifest += &format!("image_size={}\n", cfg.image_size);
        manifest += &format!("input_channels={}\n", cfg.input_channels);
        manifest += &format!("conv_channels={}\n", join(&cfg.conv_channels));
        manifest += &format!("dense_width={}\n", cfg.dense_width);
        manifest += &format!("num_classes={}\n", cfg.num_classes);
        // Bit pattern keeps the round trip exact.
        manifest += &format!("dropout_bits={:08x}\n", cfg.dropout.to_bits());
        let mut names = self.backbone.tensor_names();
        let mut tensors = self.backbone.tensors();
        if let Some(att) = &self.attention {
            manifest += &format!("attention_dim={}\n", att.dim());
            names.extend(att.tensor_names(&cfg.layer_tags()));
            tensors.extend(att.tensors());
        }
        let mut offset = 0;
        for (name, t) in names.iter().zip(&tensors) {
            let len = t.len() * 4;
            manifest += &format!("tensor {name} {} {offset} {len}\n", join(t.shape()));
            offset += len;
        }
        let mut out = format!("{MAGIC}\nmanifest {}\n", manifest.len()).into_bytes();
        out.extend(manifest.as_bytes());
        out.reserve(offset);
        for t in tensors {
            for v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let manifest = read_manifest(bytes)?;
        let payload = &bytes[manifest.payload_start..];
        let mut backbone_tensors = Vec::new();
        let mut attention_tensors = Vec::new();
        for entry in &manifest.tensors {
            let raw = &payload[entry.bytes.clone()];
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(entry.shape.clone(), data).map_err(|e| Error::Format(format!("{}: {e}", entry.name)))?;
            if entry.name.starts_with("backbone.") {
                backbone_tensors.push(t);
            } else if entry.name.starts_with("attention.") {
                attention_tensors.push(t);
            } else {
                return Err(Error::Format(format!("unknown tensor {}", entry.name)));
            }
        }
        let backbone = BackboneModel::from_tensors(manifest.config.clone(), backbone_tensors)?;
        let attention = match manifest.attention_dim {
            Some(d) => Some(AttentionParams::from_tensors(&manifest.config.geometries(), d, attention_tensors)?),
            None if attention_tensors.is_empty() => None,
            None => return Err(Error::Format("attention tensors without attention_dim".into())),
        };
        Ok(Checkpoint { backbone, attention })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn take_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| format_err("truncated checkpoint header"))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| format_err("checkpoint header is not UTF-8"))
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.trim().parse().map_err(|_| format_err(format!("bad {what}: {s:?}")))
}

fn parse_list(s: &str, what: &str) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|p| parse_num(p, what)).collect()
}

/// Parses and validates the header without decoding tensors.
pub fn read_manifest(bytes: &[u8]) -> Result<Manifest> {
    let mut pos = 0;
    if take_line(bytes, &mut pos)? != MAGIC {
        return Err(format_err("not a GATTA1 checkpoint"));
    }
    let len_line = take_line(bytes, &mut pos)?;
    let len: usize = parse_num(
        len_line
            .strip_prefix("manifest ")
            .ok_or_else(|| format_err("missing manifest length"))?,
        "manifest length",
    )?;
    let text = bytes
        .get(pos..pos + len)
        .ok_or_else(|| format_err("truncated manifest"))
        .and_then(|b| std::str::from_utf8(b).map_err(|_| format_err("manifest is not UTF-8")))?;
    let payload_start = pos + len;

    let mut config = ToyCnnConfig::cifar10();
    let mut seen = 0;
    let mut attention_dim = None;
    let mut tensors = Vec::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("tensor ") {
            let parts: Vec<&str> = rest.split(' ').collect();
            let [name, dims, offset, nbytes] = parts[..] else {
                return Err(format_err(format!("bad tensor line {line:?}")));
            };
            let shape = parse_list(dims, "tensor shape")?;
            let offset: usize = parse_num(offset, "tensor offset")?;
            let nbytes: usize = parse_num(nbytes, "tensor length")?;
            if nbytes != shape.iter().product::<usize>() * 4 {
                return Err(format_err(format!("{name}: {nbytes} bytes for shape {shape:?}")));
            }
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape,
                bytes: offset..offset + nbytes,
            });
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format_err(format!("bad manifest line {line:?}")))?;
        match key {
            "image_size" => config.image_size = parse_num(value, key)?,
            "input_channels" => config.input_channels = parse_num(value, key)?,
            "conv_channels" => config.conv_channels = parse_list(value, key)?,
            "dense_width" => config.dense_width = parse_num(value, key)?,
            "num_classes" => config.num_classes = parse_num(value, key)?,
            "dropout_bits" => {
                config.dropout = f32::from_bits(
                    u32::from_str_radix(value, 16).map_err(|_| format_err(format!("bad dropout_bits {value:?}")))?,
                )
            }
            "attention_dim" => {
                attention_dim = Some(parse_num(value, key)?);
                continue;
            }
            _ => return Err(format_err(format!("unknown manifest key {key:?}"))),
        }
        seen += 1;
    }
    if seen != 6 {
        return Err(format_err("manifest is missing architecture fields"));
    }
    config.validate()?;

    let mut expected = 0;
    for t in &tensors {
        if t.bytes.start != expected {
            return Err(format_err(format!("{} starts at byte {}, expected {expected}", t.name, t.bytes.start)));
        }
        expected = t.bytes.end;
    }
    let payload = bytes.len() - payload_start;
    if payload != expected {
        return Err(format_err(format!("manifest describes {expected} payload bytes, file has {payload}")));
    }
    Ok(Manifest {
        config,
        attention_dim,
        tensors,
        payload_start,
    })
}
