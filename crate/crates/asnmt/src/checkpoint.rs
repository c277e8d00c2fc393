//! Self-describing binary checkpoint: one file holding config (with
//! per-layer ragged widths), vocabulary, and every parameter as a raw
//! little-endian f64 payload, closed by a SHA-256 checksum.
//!
//! Layout, all integers little-endian:
//!   magic "ASNMT\0" · version u16 · config · layout · vocab · params ·
//!   sha256(everything before it)
//!
//! A reload reproduces the model bit-exactly; any payload corruption
//! fails the checksum and loading errors out rather than returning a
//! silently wrong model.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::{AttnWidths, LayerWidths, ModelConfig, ModelLayout};
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::TransformerModel;

pub const MAGIC: &[u8; 6] = b"ASNMT\0";
pub const VERSION: u16 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(data: &'a [u8]) -> Self {
        Reader { data, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Checkpoint("invalid utf-8 string".into()))
    }
}

fn write_attn(w: &mut Writer, a: &AttnWidths) {
    for &d in &a.qk_dims {
        w.u32(d as u32);
    }
    for &d in &a.v_dims {
        w.u32(d as u32);
    }
}

fn read_attn(r: &mut Reader, heads: usize) -> Result<AttnWidths> {
    let mut qk_dims = Vec::with_capacity(heads);
    for _ in 0..heads {
        qk_dims.push(r.u32()? as usize);
    }
    let mut v_dims = Vec::with_capacity(heads);
    for _ in 0..heads {
        v_dims.push(r.u32()? as usize);
    }
    Ok(AttnWidths { qk_dims, v_dims })
}

pub fn to_bytes(model: &TransformerModel, vocab: &Vocab) -> Vec<u8> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(MAGIC);
    w.u16(VERSION);

    let c = &model.config;
    w.u32(c.num_layers as u32);
    w.u32(c.d_model as u32);
    w.u32(c.num_heads as u32);
    w.u32(c.d_ffn as u32);
    w.u32(c.vocab_size as u32);
    w.u32(c.max_positions as u32);
    w.f64(c.dropout);
    w.f64(c.label_smoothing);

    for layer in &model.layout.encoder {
        write_attn(&mut w, &layer.self_attn);
        w.u32(layer.ffn as u32);
    }
    for layer in &model.layout.decoder {
        write_attn(&mut w, &layer.self_attn);
        write_attn(&mut w, layer.cross_attn.as_ref().expect("decoder layer needs cross attention"));
        w.u32(layer.ffn as u32);
    }

    w.u32(vocab.len() as u32);
    for t in vocab.tokens() {
        w.str(t);
    }

    w.u32(model.params.len() as u32);
    for p in model.params.iter() {
        w.str(&p.path);
        w.u32(p.shape.len() as u32);
        for &d in &p.shape {
            w.u64(d as u64);
        }
        for &v in &p.data {
            w.f64(v);
        }
    }

    let digest = Sha256::digest(&w.buf);
    w.buf.extend_from_slice(&digest);
    w.buf
}

pub fn from_bytes(data: &[u8]) -> Result<(TransformerModel, Vocab)> {
    if data.len() < MAGIC.len() + 2 + 32 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (body, checksum) = data.split_at(data.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != checksum {
        return Err(Error::Checkpoint("checksum mismatch: payload corrupted".into()));
    }

    let mut r = Reader::new(body);
    if r.take(6)? != MAGIC {
        return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }

    let config = ModelConfig {
        num_layers: r.u32()? as usize,
        d_model: r.u32()? as usize,
        num_heads: r.u32()? as usize,
        d_ffn: r.u32()? as usize,
        vocab_size: r.u32()? as usize,
        max_positions: r.u32()? as usize,
        dropout: r.f64()?,
        label_smoothing: r.f64()?,
    };
    config.validate().map_err(|e| Error::Checkpoint(format!("invalid stored config: {e}")))?;

    let heads = config.num_heads;
    let mut layout = ModelLayout { encoder: Vec::new(), decoder: Vec::new() };
    for _ in 0..config.num_layers {
        let self_attn = read_attn(&mut r, heads)?;
        let ffn = r.u32()? as usize;
        layout.encoder.push(LayerWidths { self_attn, cross_attn: None, ffn });
    }
    for _ in 0..config.num_layers {
        let self_attn = read_attn(&mut r, heads)?;
        let cross_attn = Some(read_attn(&mut r, heads)?);
        let ffn = r.u32()? as usize;
        layout.decoder.push(LayerWidths { self_attn, cross_attn, ffn });
    }

    let token_count = r.u32()? as usize;
    if token_count != config.vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocab size {token_count} does not match config vocab_size {}",
            config.vocab_size
        )));
    }
    let mut tokens = Vec::with_capacity(token_count);
    for _ in 0..token_count {
        tokens.push(r.str()?);
    }
    let vocab = Vocab::new(tokens).map_err(|e| Error::Checkpoint(format!("stored vocab: {e}")))?;

    // rebuild the skeleton from config + layout, then overwrite the data;
    // this cross-checks stored paths and shapes against the architecture
    let mut model = TransformerModel::with_layout(config, layout, 0)
        .map_err(|e| Error::Checkpoint(format!("stored layout: {e}")))?;
    let param_count = r.u32()? as usize;
    if param_count != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "parameter record count {param_count} does not match layout ({})",
            model.params.len()
        )));
    }
    for i in 0..param_count {
        let path = r.str()?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f64()?);
        }
        let expect = model
            .params
            .iter()
            .nth(i)
            .map(|p| (p.path.clone(), p.shape.clone()))
            .expect("index in range");
        if expect.0 != path || expect.1 != shape {
            return Err(Error::Checkpoint(format!(
                "parameter record {i} is {path} {shape:?}, expected {} {:?}",
                expect.0, expect.1
            )));
        }
        model.params.get_mut(&path).unwrap().data = data;
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after parameter records".into()));
    }
    Ok((model, vocab))
}

pub fn save(path: &Path, model: &TransformerModel, vocab: &Vocab) -> Result<()> {
    std::fs::write(path, to_bytes(model, vocab))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(TransformerModel, Vocab)> {
    let data = std::fs::read(path)?;
    from_bytes(&data)
}

/// Exact size in bytes that [`save`] would produce.
pub fn serialized_size(model: &TransformerModel, vocab: &Vocab) -> u64 {
    let mut n = MAGIC.len() + 2; // magic + version
    n += 6 * 4 + 2 * 8; // config words
    let heads = model.config.num_heads;
    n += model.layout.encoder.len() * (2 * heads * 4 + 4);
    n += model.layout.decoder.len() * (4 * heads * 4 + 4);
    n += 4; // token count
    for t in vocab.tokens() {
        n += 4 + t.len();
    }
    n += 4; // param count
    for p in model.params.iter() {
        n += 4 + p.path.len() + 4 + 8 * p.shape.len() + 8 * p.numel();
    }
    n += 32; // checksum
    n as u64
}
