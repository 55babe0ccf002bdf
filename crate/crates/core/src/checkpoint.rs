//! Bit-exact checkpoint container.
//!
//! Layout: magic `CMTA`, format version, then length-prefixed named
//! sections. The backbone lives in `schema` + `model`; trained shift
//! generators go into `seg:*` sections of the same container. Tensor data
//! is raw little-endian f64 bits, so a save/load round trip reproduces
//! every parameter exactly.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::cometa::{GeneratorSlot, SegVariants};
use crate::diffgraph::Tensor;
use crate::recmodel::{DenseLayer, EmbeddingTable, FeatureSchema, ModelParams};
use crate::seg::SegParams;

const MAGIC: &[u8; 4] = b"CMTA";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint schema does not match the active config: {0}")]
    SchemaMismatch(String),
}

fn corrupt(msg: impl Into<String>) -> CkptError {
    CkptError::Corrupt(msg.into())
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        self.u64(t.len() as u64);
        for &v in t.data() {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CkptError> {
        if self.pos + n > self.buf.len() {
            return Err(corrupt("truncated data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CkptError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CkptError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<Tensor, CkptError> {
        let rank = self.u32()? as usize;
        if rank == 0 || rank > 4 {
            return Err(corrupt(format!("tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let count = self.u64()? as usize;
        if shape.iter().product::<usize>() != count {
            return Err(corrupt("tensor shape and count disagree"));
        }
        let raw = self.take(count * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::new(shape, data))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn encode_model(model: &ModelParams) -> Vec<u8> {
    let mut w = Writer::new();
    let tensors = model.tensors();
    w.u32(tensors.len() as u32);
    for t in tensors {
        w.tensor(t);
    }
    let tables: Vec<&EmbeddingTable> = model_tables(model);
    w.u32(tables.len() as u32);
    for t in tables {
        w.u64(t.trainable_rows.len() as u64);
        w.bytes(&t.trainable_rows.iter().map(|&b| b as u8).collect::<Vec<u8>>());
    }
    w.buf
}

fn model_tables(model: &ModelParams) -> Vec<&EmbeddingTable> {
    let mut v = vec![&model.user_table];
    v.extend(model.user_attr_tables.iter());
    v.push(&model.item_table);
    v.extend(model.item_attr_tables.iter());
    v
}

fn decode_model(schema: FeatureSchema, payload: &[u8]) -> Result<ModelParams, CkptError> {
    let mut r = Reader::new(payload);
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        tensors.push(r.tensor()?);
    }
    let n = schema.user_fields.len();
    let m = schema.item_fields.len();
    let table_count = 2 + n + m;
    if count < table_count + 2 || !(count - table_count).is_multiple_of(2) {
        return Err(corrupt("unexpected tensor layout"));
    }
    let mut it = tensors.into_iter();
    let mut next = || it.next().expect("count checked");

    let table = |t: Tensor| EmbeddingTable {
        trainable_rows: vec![true; t.rows()],
        weights: t,
    };
    let user_table = table(next());
    let user_attr_tables: Vec<EmbeddingTable> = (0..n).map(|_| table(next())).collect();
    let item_table = table(next());
    let item_attr_tables: Vec<EmbeddingTable> = (0..m).map(|_| table(next())).collect();
    let layer_pairs = (count - table_count) / 2;
    let mut layers = Vec::with_capacity(layer_pairs);
    for _ in 0..layer_pairs {
        let w = next();
        let b = next();
        layers.push(DenseLayer { w, b });
    }
    let pred = layers.pop().ok_or_else(|| corrupt("missing prediction layer"))?;

    let mut model = ModelParams {
        schema,
        user_table,
        item_table,
        user_attr_tables,
        item_attr_tables,
        hidden: layers,
        pred,
    };

    let flag_tables = r.u32()? as usize;
    if flag_tables != table_count {
        return Err(corrupt("trainable-flag table count mismatch"));
    }
    let mut flags = Vec::with_capacity(flag_tables);
    for _ in 0..flag_tables {
        let len = r.u64()? as usize;
        let raw = r.take(len)?;
        flags.push(raw.iter().map(|&b| b != 0).collect::<Vec<bool>>());
    }
    if !r.done() {
        return Err(corrupt("trailing bytes in model section"));
    }
    let mut idx = 0;
    let mut assign = |t: &mut EmbeddingTable| -> Result<(), CkptError> {
        let f = &flags[idx];
        idx += 1;
        if f.len() != t.vocab() {
            return Err(corrupt("trainable flags do not cover the table"));
        }
        t.trainable_rows = f.clone();
        Ok(())
    };
    assign(&mut model.user_table)?;
    for t in &mut model.user_attr_tables {
        assign(t)?;
    }
    assign(&mut model.item_table)?;
    for t in &mut model.item_attr_tables {
        assign(t)?;
    }
    Ok(model)
}

fn encode_seg(seg: &SegParams) -> Vec<u8> {
    let mut w = Writer::new();
    let tensors = seg.tensors();
    w.u32(tensors.len() as u32);
    for t in tensors {
        w.tensor(t);
    }
    w.buf
}

fn decode_seg(payload: &[u8]) -> Result<SegParams, CkptError> {
    let mut r = Reader::new(payload);
    let count = r.u32()? as usize;
    if count < 4 || !count.is_multiple_of(2) {
        return Err(corrupt("unexpected generator tensor layout"));
    }
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        tensors.push(r.tensor()?);
    }
    if !r.done() {
        return Err(corrupt("trailing bytes in generator section"));
    }
    let mut it = tensors.into_iter();
    let w_u = it.next().unwrap();
    let w_f = it.next().unwrap();
    let mut gen = Vec::new();
    while let (Some(w), Some(b)) = (it.next(), it.next()) {
        gen.push(DenseLayer { w, b });
    }
    Ok(SegParams { w_u, w_f, gen })
}

const SLOT_SECTIONS: [(GeneratorSlot, &str); 3] = [
    (GeneratorSlot::Full, "seg:full"),
    (GeneratorSlot::NoBase, "seg:no_base"),
    (GeneratorSlot::AttrOnly, "seg:attr_only"),
];

/// A loaded checkpoint: the backbone plus any stored generator variants.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelParams,
    pub seg: SegVariants,
}

pub fn save(path: &Path, model: &ModelParams, seg: &SegVariants) -> Result<(), CkptError> {
    let mut sections: Vec<(&str, Vec<u8>)> = vec![
        ("schema", serde_json::to_vec(&model.schema).expect("schema serializes")),
        ("model", encode_model(model)),
    ];
    for (slot, tag) in SLOT_SECTIONS {
        if let Some(params) = seg.get(slot) {
            sections.push((tag, encode_seg(params)));
        }
    }

    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u32(sections.len() as u32);
    for (tag, payload) in &sections {
        w.u32(tag.len() as u32);
        w.bytes(tag.as_bytes());
        w.u64(payload.len() as u64);
        w.bytes(payload);
    }

    let mut file = fs::File::create(path).map_err(|source| CkptError::Io {
        path: path.display().to_string(),
        source,
    })?;
    file.write_all(&w.buf).map_err(|source| CkptError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint, CkptError> {
    let mut raw = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|source| CkptError::Io {
            path: path.display().to_string(),
            source,
        })?;
    let mut r = Reader::new(&raw);
    if r.take(4)? != MAGIC {
        return Err(CkptError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CkptError::UnsupportedVersion(version));
    }
    let section_count = r.u32()? as usize;
    let mut sections: Vec<(String, &[u8])> = Vec::with_capacity(section_count);
    for _ in 0..section_count {
        let tag_len = r.u32()? as usize;
        let tag = String::from_utf8(r.take(tag_len)?.to_vec()).map_err(|_| corrupt("non-utf8 tag"))?;
        let payload_len = r.u64()? as usize;
        sections.push((tag, r.take(payload_len)?));
    }
    if !r.done() {
        return Err(corrupt("trailing bytes after sections"));
    }

    let find = |tag: &str| sections.iter().find(|(t, _)| t == tag).map(|(_, p)| *p);
    let schema_raw = find("schema").ok_or_else(|| corrupt("missing schema section"))?;
    let schema: FeatureSchema =
        serde_json::from_slice(schema_raw).map_err(|e| corrupt(format!("schema: {e}")))?;
    let model_raw = find("model").ok_or_else(|| corrupt("missing model section"))?;
    let model = decode_model(schema, model_raw)?;

    let mut seg = SegVariants::default();
    for (slot, tag) in SLOT_SECTIONS {
        if let Some(payload) = find(tag) {
            seg.set(slot, decode_seg(payload)?);
        }
    }
    Ok(Checkpoint { model, seg })
}

/// Errors when the checkpoint's schema differs from the one derived from
/// the active config and data.
pub fn verify_schema(ckpt: &Checkpoint, expected: &FeatureSchema) -> Result<(), CkptError> {
    if &ckpt.model.schema != expected {
        return Err(CkptError::SchemaMismatch(format!(
            "checkpoint embeds {} users / {} items / d={}, expected {} / {} / d={}",
            ckpt.model.schema.user_vocab,
            ckpt.model.schema.item_vocab,
            ckpt.model.schema.embed_dim,
            expected.user_vocab,
            expected.item_vocab,
            expected.embed_dim,
        )));
    }
    Ok(())
}
