//! File formats.
//!
//! Binary containers start with the magic `CGLR`, a little-endian `u16`
//! version and a one-byte kind (`1` signals, `2` factors, `3` adapters),
//! followed by a `u64` record count. Matrices are written as `u64` rows,
//! `u64` cols, then f64 little-endian values in row-major order; strings as a
//! `u64` length and UTF-8 bytes; optional blocks behind a presence byte.
//!
//! Model spec (text, one `key = value` per line, `#` comments):
//!
//! ```text
//! seed = 7
//! tokens = 1
//! layer = 10 12 tanh
//! layer = 12 3 identity
//! weights.1 = <36 values, row-major d_out x d_in>
//! ```
//!
//! Data file: one sample per row, fields separated by commas or whitespace.
//! The first `tokens * d_in` fields are the inputs (token-major), the rest
//! are targets: `C` values for squared loss, a single 0/1 label for bce,
//! a single class index for ce.

use std::fs;
use std::path::Path;

use crate::curvature::{FactorVariant, KfacFactors, SideEigen};
use crate::error::{Error, Result};
use crate::init::{LoraInit, ShiftMode};
use crate::linalg::DenseMatrix;
use crate::model::{Activation, Batch, ChannelBlock, LayerSpec, LossKind, Network, SignalRecord, Targets};

const MAGIC: &[u8; 4] = b"CGLR";
const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContainerKind {
    Signals = 1,
    Factors = 2,
    Adapters = 3,
}

impl ContainerKind {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            1 => Ok(ContainerKind::Signals),
            2 => Ok(ContainerKind::Factors),
            3 => Ok(ContainerKind::Adapters),
            other => Err(Error::Format(format!("unknown container kind {other}"))),
        }
    }
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn header(kind: ContainerKind, count: usize) -> Self {
        let mut w = Writer::default();
        w.buf.extend_from_slice(MAGIC);
        w.buf.extend_from_slice(&VERSION.to_le_bytes());
        w.buf.push(kind as u8);
        w.u64(count as u64);
        w
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn flag(&mut self, b: bool) {
        self.buf.push(b as u8);
    }

    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|x| self.f64(*x));
    }

    fn matrix(&mut self, m: &DenseMatrix) {
        self.u64(m.rows() as u64);
        self.u64(m.cols() as u64);
        m.as_slice().iter().for_each(|x| self.f64(*x));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn open(buf: &'a [u8], kind: ContainerKind) -> Result<(Self, usize)> {
        if buf.len() < 15 || &buf[..4] != MAGIC {
            return Err(Error::Format("not a cglora container (bad magic)".into()));
        }
        let version = u16::from_le_bytes([buf[4], buf[5]]);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let found = ContainerKind::from_byte(buf[6])?;
        if found != kind {
            return Err(Error::Format(format!("expected a {kind:?} container, found {found:?}")));
        }
        let mut r = Reader { buf, pos: 7 };
        let count = r.len()?;
        Ok((r, count))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(e) => {
                let s = &self.buf[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(Error::Format(format!("truncated container at byte {}", self.pos))),
        }
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("implausible length {v}")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn flag(&mut self) -> Result<bool> {
        match self.take(1)?[0] {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Format(format!("bad flag byte {b}"))),
        }
    }

    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 string".into()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }

    fn matrix(&mut self) -> Result<DenseMatrix> {
        let rows = self.len()?;
        let cols = self.len()?;
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.saturating_mul(8) <= self.buf.len() - self.pos)
            .ok_or_else(|| Error::Format(format!("matrix {rows}x{cols} exceeds the container")))?;
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        DenseMatrix::from_vec(rows, cols, data)
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn write_block(w: &mut Writer, b: &Option<ChannelBlock>) {
    w.flag(b.is_some());
    if let Some(b) = b {
        w.str(b.kind.name());
        w.u64(b.channels as u64);
        w.matrix(&b.matrix);
    }
}

fn read_block(r: &mut Reader) -> Result<Option<ChannelBlock>> {
    if !r.flag()? {
        return Ok(None);
    }
    let kind = r.str()?.parse().map_err(|e: Error| Error::Format(e.to_string()))?;
    let channels = r.len()?;
    let matrix = r.matrix()?;
    Ok(Some(ChannelBlock { kind, channels, matrix }))
}

pub fn encode_signals(records: &[SignalRecord]) -> Vec<u8> {
    let mut out = signals_header(records.len());
    for rec in records {
        out.extend(encode_signal_record(rec));
    }
    out
}

/// Container header announcing `count` signal records; records encoded with
/// [`encode_signal_record`] may then be appended one at a time.
pub fn signals_header(count: usize) -> Vec<u8> {
    Writer::header(ContainerKind::Signals, count).buf
}

pub fn encode_signal_record(rec: &SignalRecord) -> Vec<u8> {
    let mut w = Writer::default();
    for v in [rec.layer, rec.samples, rec.tokens, rec.classes] {
        w.u64(v as u64);
    }
    w.flag(rec.pooled);
    w.matrix(&rec.inputs);
    write_block(&mut w, &rec.output);
    write_block(&mut w, &rec.weighted);
    w.flag(rec.loss.is_some());
    if let Some(l) = &rec.loss {
        w.matrix(l);
    }
    w.buf
}

pub fn decode_signals(buf: &[u8]) -> Result<Vec<SignalRecord>> {
    let (mut r, count) = Reader::open(buf, ContainerKind::Signals)?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let layer = r.len()?;
        let samples = r.len()?;
        let tokens = r.len()?;
        let classes = r.len()?;
        let pooled = r.flag()?;
        let inputs = r.matrix()?;
        let output = read_block(&mut r)?;
        let weighted = read_block(&mut r)?;
        let loss = if r.flag()? { Some(r.matrix()?) } else { None };
        out.push(SignalRecord {
            layer,
            samples,
            tokens,
            classes,
            inputs,
            output,
            weighted,
            loss,
            pooled,
        });
    }
    r.finish()?;
    Ok(out)
}

/// Factors keyed by layer.
pub fn encode_factors(factors: &[(usize, KfacFactors)]) -> Vec<u8> {
    let mut w = Writer::header(ContainerKind::Factors, factors.len());
    for (layer, f) in factors {
        w.u64(*layer as u64);
        for v in [f.d_in(), f.d_out(), f.r_s(), f.r_t()] {
            w.u64(v as u64);
        }
        w.str(f.variant.name());
        w.f64(f.normalization);
        w.u64(f.seed);
        w.matrix(&f.u_s);
        w.f64s(&f.d_s);
        w.matrix(&f.u_t);
        w.f64s(&f.d_t);
    }
    w.buf
}

pub fn decode_factors(buf: &[u8]) -> Result<Vec<(usize, KfacFactors)>> {
    let (mut r, count) = Reader::open(buf, ContainerKind::Factors)?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let layer = r.len()?;
        let dims = [r.len()?, r.len()?, r.len()?, r.len()?];
        let variant: FactorVariant = r.str()?.parse().map_err(|e: Error| Error::Format(e.to_string()))?;
        let normalization = r.f64()?;
        let seed = r.u64()?;
        let u_s = r.matrix()?;
        let d_s = r.f64s()?;
        let u_t = r.matrix()?;
        let d_t = r.f64s()?;
        if u_s.shape() != (dims[0], dims[2]) || u_t.shape() != (dims[1], dims[3]) || d_s.len() != dims[2] || d_t.len() != dims[3]
        {
            return Err(Error::Format(format!("factor arrays disagree with the header dims {dims:?}")));
        }
        let f = KfacFactors {
            u_s,
            d_s,
            u_t,
            d_t,
            variant,
            normalization,
            seed,
        };
        // validation only; the stored arrays are kept bit-exact
        let s = SideEigen {
            vectors: f.u_s.clone(),
            values: f.d_s.iter().map(|v| v / normalization).collect(),
        };
        KfacFactors::from_parts(s, f.t_side(), variant, normalization, seed).map_err(|e| Error::Format(e.to_string()))?;
        out.push((layer, f));
    }
    r.finish()?;
    Ok(out)
}

pub fn encode_adapters(inits: &[LoraInit]) -> Vec<u8> {
    let mut w = Writer::header(ContainerKind::Adapters, inits.len());
    for init in inits {
        w.u64(init.layer as u64);
        w.u64(init.rank as u64);
        w.f64(init.gamma);
        w.f64(init.eta);
        w.str(init.shift.name());
        w.matrix(&init.a);
        w.matrix(&init.b);
    }
    w.buf
}

pub fn decode_adapters(buf: &[u8]) -> Result<Vec<LoraInit>> {
    let (mut r, count) = Reader::open(buf, ContainerKind::Adapters)?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let layer = r.len()?;
        let rank = r.len()?;
        let gamma = r.f64()?;
        let eta = r.f64()?;
        let shift: ShiftMode = r.str()?.parse().map_err(|e: Error| Error::Format(e.to_string()))?;
        let a = r.matrix()?;
        let b = r.matrix()?;
        if a.rows() != rank || b.cols() != rank {
            return Err(Error::Format(format!(
                "adapter shapes {:?} and {:?} disagree with rank {rank}",
                a.shape(),
                b.shape()
            )));
        }
        out.push(LoraInit {
            layer,
            a,
            b,
            rank,
            gamma,
            eta,
            shift,
        });
    }
    r.finish()?;
    Ok(out)
}

pub fn write_file(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    Ok(fs::write(path, bytes)?)
}

pub fn read_file(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    Ok(fs::read(path)?)
}

/// One `key = value` line with the 1-based line and value column.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub column: usize,
    pub key: String,
    pub value: String,
}

impl Entry {
    pub fn error(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            column: self.column,
            message: message.into(),
        }
    }

    pub fn parse<T: std::str::FromStr>(&self, what: &str) -> Result<T> {
        self.value
            .parse()
            .map_err(|_| self.error(format!("`{}` is not a valid {what} for `{}`", self.value, self.key)))
    }
}

/// Splits a flat key-value document; blank lines and `#` comments are skipped.
pub fn parse_entries(text: &str) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("");
        if line.trim().is_empty() {
            continue;
        }
        let Some(eq) = line.find('=') else {
            return Err(Error::Parse {
                line: idx + 1,
                column: line.len() - line.trim_start().len() + 1,
                message: "expected `key = value`".into(),
            });
        };
        let key = line[..eq].trim();
        if key.is_empty() {
            return Err(Error::Parse {
                line: idx + 1,
                column: 1,
                message: "missing key before `=`".into(),
            });
        }
        let rest = &line[eq + 1..];
        let lead = rest.len() - rest.trim_start().len();
        out.push(Entry {
            line: idx + 1,
            column: eq + 2 + lead,
            key: key.to_string(),
            value: rest.trim().to_string(),
        });
    }
    Ok(out)
}

/// Splits on commas and whitespace, yielding each field with its 1-based column.
fn fields(line: &str) -> impl Iterator<Item = (usize, &str)> {
    let mut start = None;
    let mut out = Vec::new();
    for (i, ch) in line.char_indices().chain(std::iter::once((line.len(), ' '))) {
        let sep = ch == ',' || ch.is_whitespace();
        match (sep, start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                out.push((s + 1, &line[s..i]));
                start = None;
            }
            _ => {}
        }
    }
    out.into_iter()
}

fn parse_number(line: usize, column: usize, s: &str) -> Result<f64> {
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Parse {
            line,
            column,
            message: format!("`{s}` is not a finite number"),
        })
}

#[derive(Clone, Debug)]
pub struct ModelFile {
    pub network: Network,
    pub seed: u64,
    pub tokens: usize,
}

pub fn parse_model(text: &str) -> Result<ModelFile> {
    let mut seed = 0u64;
    let mut tokens = 1usize;
    let mut layers: Vec<(Entry, LayerSpec)> = Vec::new();
    let mut weights: Vec<(Entry, usize)> = Vec::new();
    for e in parse_entries(text)? {
        match e.key.as_str() {
            "seed" => seed = e.parse("seed")?,
            "tokens" => {
                tokens = e.parse("token count")?;
                if tokens == 0 {
                    return Err(e.error("tokens must be >= 1"));
                }
            }
            "layer" => {
                let parts: Vec<&str> = e.value.split_whitespace().collect();
                if parts.len() != 3 {
                    return Err(e.error("expected `layer = <in> <out> <activation>`"));
                }
                let dim = |s: &str| {
                    s.parse::<usize>()
                        .ok()
                        .filter(|&d| d > 0)
                        .ok_or_else(|| e.error(format!("`{s}` is not a positive dimension")))
                };
                let act: Activation = parts[2].parse().map_err(|_| e.error(format!("unknown activation `{}`", parts[2])))?;
                let spec = LayerSpec::new(dim(parts[0])?, dim(parts[1])?, act);
                layers.push((e, spec));
            }
            k if k.starts_with("weights.") => {
                let idx = k["weights.".len()..]
                    .parse::<usize>()
                    .map_err(|_| e.error(format!("bad layer index in `{k}`")))?;
                weights.push((e, idx));
            }
            other => return Err(e.error(format!("unknown key `{other}`"))),
        }
    }
    if layers.is_empty() {
        return Err(Error::Parse {
            line: 1,
            column: 1,
            message: "model declares no layers".into(),
        });
    }
    for w in 1..layers.len() {
        if layers[w].1.in_dim != layers[w - 1].1.out_dim {
            return Err(layers[w].0.error(format!(
                "layer {w} expects {} inputs but layer {} produces {}",
                layers[w].1.in_dim,
                w - 1,
                layers[w - 1].1.out_dim
            )));
        }
    }
    for (e, idx) in weights {
        let Some((_, spec)) = layers.get_mut(idx) else {
            return Err(e.error(format!("weights for undeclared layer {idx}")));
        };
        let values = fields(&e.value)
            .map(|(c, s)| parse_number(e.line, e.column + c - 1, s))
            .collect::<Result<Vec<_>>>()?;
        let matrix = DenseMatrix::from_vec(spec.out_dim, spec.in_dim, values)
            .map_err(|_| e.error(format!("layer {idx} needs {} weights", spec.out_dim * spec.in_dim)))?;
        *spec = spec.clone().with_weights(matrix);
    }
    let specs: Vec<LayerSpec> = layers.into_iter().map(|(_, s)| s).collect();
    Ok(ModelFile {
        network: Network::new(&specs, seed)?,
        seed,
        tokens,
    })
}

/// Parses a data table for `net` with the target convention described in the
/// module docs.
pub fn parse_data(text: &str, net: &Network, tokens: usize, loss: LossKind) -> Result<Batch> {
    let width = tokens * net.in_dim();
    let classes = net.out_dim();
    let n_targets = if loss == LossKind::Squared { classes } else { 1 };
    let mut inputs = Vec::new();
    let mut dense = Vec::new();
    let mut labels = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("");
        let cells: Vec<(usize, &str)> = fields(line).collect();
        if cells.is_empty() {
            continue;
        }
        if cells.len() != width + n_targets {
            return Err(Error::Parse {
                line: line_no,
                column: cells.last().map_or(1, |c| c.0),
                message: format!(
                    "expected {} fields ({width} inputs + {n_targets} targets), found {}",
                    width + n_targets,
                    cells.len()
                ),
            });
        }
        for &(col, s) in &cells[..width] {
            inputs.push(parse_number(line_no, col, s)?);
        }
        let targets = &cells[width..];
        match loss {
            LossKind::Squared => {
                for &(col, s) in targets {
                    dense.push(parse_number(line_no, col, s)?);
                }
            }
            LossKind::Bce => {
                let (col, s) = targets[0];
                match s.parse::<f64>() {
                    Ok(v) if v == 0.0 || v == 1.0 => labels.push(v as usize),
                    _ => {
                        return Err(Error::Parse {
                            line: line_no,
                            column: col,
                            message: format!("binary label must be 0 or 1, got `{s}`"),
                        })
                    }
                }
            }
            LossKind::Ce => {
                let (col, s) = targets[0];
                match s.parse::<usize>() {
                    Ok(k) if k < classes => labels.push(k),
                    _ => {
                        return Err(Error::Parse {
                            line: line_no,
                            column: col,
                            message: format!("class index must be in 0..{classes}, got `{s}`"),
                        })
                    }
                }
            }
        }
    }
    let n = inputs.len() / width.max(1);
    if n == 0 {
        return Err(Error::Parse {
            line: 1,
            column: 1,
            message: "data file has no samples".into(),
        });
    }
    let targets = match loss {
        LossKind::Bce | LossKind::Ce => Targets::Classes(labels),
        LossKind::Squared => Targets::Dense(DenseMatrix::from_vec(n, n_targets, dense)?),
    };
    Batch::new(DenseMatrix::from_vec(n, width, inputs)?, tokens, targets)
}

/// Writes `batch` in the data-file layout (round-trips through [`parse_data`]).
pub fn format_data(batch: &Batch) -> String {
    let mut out = String::new();
    for i in 0..batch.samples() {
        let mut row: Vec<String> = batch.inputs().row(i).iter().map(|v| format!("{v:?}")).collect();
        match batch.targets() {
            Targets::Dense(y) => row.extend(y.row(i).iter().map(|v| format!("{v:?}"))),
            Targets::Classes(c) => row.push(c[i].to_string()),
            Targets::None => {}
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Writes `net` in the model-spec layout with explicit weights.
pub fn format_model(net: &Network, seed: u64, tokens: usize) -> String {
    let mut out = format!("seed = {seed}\ntokens = {tokens}\n");
    for l in net.layers() {
        out.push_str(&format!("layer = {} {} {}\n", l.in_dim(), l.out_dim(), l.activation()));
    }
    for (i, l) in net.layers().iter().enumerate() {
        let vals: Vec<String> = l.weight().as_slice().iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&format!("weights.{i} = {}\n", vals.join(" ")));
    }
    out
}
