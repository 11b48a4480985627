//! Binary containers: a magic tag, a format version, a JSON header and raw
//! little-endian payload. Used for the ingested panel and trained forests.

use std::path::Path;

use anyhow::{bail, ensure, Context};
use mediashock_core::forest::{ColumnKind, ForestConfig, ForestModel, Node, SplitRule, Tree};
use mediashock_core::panel::{PanelSpan, PanelStore, SourceRecord, SourceRegistry};
use mediashock_core::CountryCode;
use serde::{Deserialize, Serialize};

const PANEL_MAGIC: &[u8; 8] = b"MSPANEL\0";
const MODEL_MAGIC: &[u8; 8] = b"MSFOREST";
pub const PANEL_FORMAT: u32 = 1;
pub const MODEL_FORMAT: u32 = 1;

fn frame(magic: &[u8; 8], version: u32, header: &impl Serialize) -> anyhow::Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(20 + json.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> anyhow::Result<&'a [u8]> {
        ensure!(self.pos + n <= self.buf.len(), "truncated file at byte {}", self.pos);
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> anyhow::Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> anyhow::Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into()?))
    }

    fn u32(&mut self) -> anyhow::Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into()?))
    }

    fn u64(&mut self) -> anyhow::Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into()?))
    }

    fn f64(&mut self) -> anyhow::Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into()?))
    }

    fn open<H: for<'de> Deserialize<'de>>(buf: &'a [u8], magic: &[u8; 8], version: u32) -> anyhow::Result<(Self, H)> {
        let mut c = Cursor { buf, pos: 0 };
        ensure!(c.take(8)? == magic, "not a {} file", String::from_utf8_lossy(magic).trim_end_matches('\0'));
        let v = c.u32()?;
        ensure!(v == version, "unsupported format version {v} (expected {version})");
        let len = c.u64()? as usize;
        let header = serde_json::from_slice(c.take(len)?).context("bad header")?;
        Ok((c, header))
    }

    fn finish(&self) -> anyhow::Result<()> {
        ensure!(self.pos == self.buf.len(), "{} trailing bytes", self.buf.len() - self.pos);
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct PanelHeader {
    sources: Vec<SourceRecord>,
    countries: Vec<CountryCode>,
    span: Option<PanelSpan>,
    n_cells: u64,
}

pub fn encode_panel(store: &PanelStore) -> anyhow::Result<Vec<u8>> {
    let cols = store.columns();
    let header = PanelHeader {
        sources: store.registry().iter().cloned().collect(),
        countries: cols.countries.to_vec(),
        span: cols.span,
        n_cells: cols.source.len() as u64,
    };
    let mut out = frame(PANEL_MAGIC, PANEL_FORMAT, &header)?;
    out.reserve(cols.day_offsets.len() * 8 + cols.source.len() * 14);
    cols.day_offsets.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    cols.source.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    cols.dest.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    cols.total.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    cols.disaster.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    Ok(out)
}

pub fn decode_panel(buf: &[u8]) -> anyhow::Result<PanelStore> {
    let (mut c, h): (_, PanelHeader) = Cursor::open(buf, PANEL_MAGIC, PANEL_FORMAT)?;
    let n = h.n_cells as usize;
    let n_off = h.span.map_or(0, |s| s.n_days() + 1);
    let day_offsets = (0..n_off).map(|_| c.u64()).collect::<anyhow::Result<Vec<_>>>()?;
    let source = (0..n).map(|_| c.u32()).collect::<anyhow::Result<Vec<_>>>()?;
    let dest = (0..n).map(|_| c.u16()).collect::<anyhow::Result<Vec<_>>>()?;
    let total = (0..n).map(|_| c.u32()).collect::<anyhow::Result<Vec<_>>>()?;
    let disaster = (0..n).map(|_| c.u32()).collect::<anyhow::Result<Vec<_>>>()?;
    c.finish()?;
    let registry = SourceRegistry::new(h.sources)?;
    Ok(PanelStore::from_columns(registry, h.countries, h.span, day_offsets, source, dest, total, disaster)?)
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    version: u32,
    config: ForestConfig,
    names: Vec<String>,
    kinds: Vec<ColumnKind>,
    n_train: usize,
    n_trees: usize,
}

const LEAF: u8 = 0;
const BELOW: u8 = 1;
const IN_SET: u8 = 2;

pub fn encode_model(model: &ForestModel) -> anyhow::Result<Vec<u8>> {
    let header = ModelHeader {
        version: model.version,
        config: model.config,
        names: model.names.clone(),
        kinds: model.kinds.clone(),
        n_train: model.n_train,
        n_trees: model.trees.len(),
    };
    let mut out = frame(MODEL_MAGIC, MODEL_FORMAT, &header)?;
    for t in &model.trees {
        out.extend_from_slice(&(t.nodes.len() as u32).to_le_bytes());
        for node in &t.nodes {
            match node {
                Node::Leaf { value } => {
                    out.push(LEAF);
                    out.extend_from_slice(&value.to_le_bytes());
                }
                Node::Split { feature, rule, left, right } => {
                    let (tag, bits) = match rule {
                        SplitRule::Below(t) => (BELOW, t.to_bits()),
                        SplitRule::InSet(m) => (IN_SET, *m),
                    };
                    out.push(tag);
                    out.extend_from_slice(&feature.to_le_bytes());
                    out.extend_from_slice(&left.to_le_bytes());
                    out.extend_from_slice(&right.to_le_bytes());
                    out.extend_from_slice(&bits.to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

pub fn decode_model(buf: &[u8]) -> anyhow::Result<ForestModel> {
    let (mut c, h): (_, ModelHeader) = Cursor::open(buf, MODEL_MAGIC, MODEL_FORMAT)?;
    let p = h.names.len();
    let mut trees = Vec::with_capacity(h.n_trees);
    for _ in 0..h.n_trees {
        let n = c.u32()? as usize;
        let mut nodes = Vec::with_capacity(n);
        for _ in 0..n {
            let node = match c.u8()? {
                LEAF => Node::Leaf { value: c.f64()? },
                tag @ (BELOW | IN_SET) => {
                    let feature = c.u16()?;
                    let (left, right) = (c.u32()?, c.u32()?);
                    let bits = c.u64()?;
                    ensure!((feature as usize) < p, "split on feature {feature} of {p}");
                    ensure!((left as usize) < n && (right as usize) < n, "child index out of range");
                    let rule = if tag == BELOW {
                        SplitRule::Below(f64::from_bits(bits))
                    } else {
                        SplitRule::InSet(bits)
                    };
                    Node::Split { feature, rule, left, right }
                }
                other => bail!("unknown node tag {other}"),
            };
            nodes.push(node);
        }
        trees.push(Tree { nodes });
    }
    c.finish()?;
    Ok(ForestModel {
        version: h.version,
        config: h.config,
        names: h.names,
        kinds: h.kinds,
        n_train: h.n_train,
        trees,
    })
}

pub fn load_panel(path: &Path) -> anyhow::Result<PanelStore> {
    let buf = std::fs::read(path).with_context(|| format!("{}", path.display()))?;
    decode_panel(&buf).with_context(|| format!("{}", path.display()))
}

pub fn load_model(path: &Path) -> anyhow::Result<ForestModel> {
    let buf = std::fs::read(path).with_context(|| format!("{}", path.display()))?;
    decode_model(&buf).with_context(|| format!("{}", path.display()))
}
