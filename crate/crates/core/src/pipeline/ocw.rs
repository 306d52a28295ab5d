//! Single-file model container: `"OCW1"`, a little-endian `u64` header
//! length, a JSON header describing every tensor, then the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binfact::{BinaryFactorMatrix, BinaryFormat};
use crate::error::{Error, Result};
use crate::model::{Linear, LowRank, Role, ToyConfig, ToyModel, WeightRepr};
use crate::preprocess::{InputTransform, Rotation, RotationKind};
use crate::quant::{decode_payload, encode_payload, Granularity, QuantConfig, Scheme};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"OCW1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Encoding {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "uniform-quant")]
    Uniform,
    #[serde(rename = "dbf")]
    Dbf,
    #[serde(rename = "mdbf")]
    Mdbf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RotationRef {
    pub kind: RotationKind,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodingParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bits: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<Scheme>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub granularity: Option<Granularity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ell: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation: Option<RotationRef>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub encoding: Encoding,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
    #[serde(default)]
    pub params: EncodingParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub config: ToyConfig,
    pub tensors: Vec<TensorEntry>,
}

struct Writer {
    entries: Vec<TensorEntry>,
    payload: Vec<u8>,
}

impl Writer {
    fn push(&mut self, name: String, encoding: Encoding, shape: Vec<usize>, bytes: Vec<u8>, params: EncodingParams) {
        self.entries.push(TensorEntry {
            name,
            encoding,
            shape,
            offset: self.payload.len() as u64,
            length: bytes.len() as u64,
            params,
        });
        self.payload.extend_from_slice(&bytes);
    }

    fn push_f32(&mut self, name: String, shape: Vec<usize>, data: &[f32]) {
        let bytes = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.push(name, Encoding::F32, shape, bytes, EncodingParams::default());
    }
}

fn write_linear(wr: &mut Writer, name: &str, lin: &Linear) -> Result<()> {
    let t = lin.transform();
    let mut params = EncodingParams::default();
    if let Some(r) = &t.rotation {
        let rebuilt = Rotation::build(r.kind, r.dim(), r.seed)?;
        if rebuilt.matrix != r.matrix {
            return Err(Error::Format(format!("{name}: rotation is not reproducible from its kind and seed")));
        }
        params.rotation = Some(RotationRef { kind: r.kind, seed: r.seed });
    }
    let (n, m) = lin.shape();
    match lin.repr() {
        WeightRepr::Full(w) => {
            let bytes = w.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            wr.push(name.to_string(), Encoding::F32, vec![n, m], bytes, params);
        }
        WeightRepr::Uniform(q) => {
            let c = q.config();
            params.bits = Some(c.bits);
            params.scheme = Some(c.scheme);
            params.granularity = Some(c.granularity);
            wr.push(name.to_string(), Encoding::Uniform, vec![n, m], encode_payload(q), params);
        }
        WeightRepr::Binary(f) => {
            if &f.to_storage() != f {
                return Err(Error::Format(format!("{name}: binary factors are not in half-precision storage form")));
            }
            params.rank = Some(f.rank());
            params.ell = Some(f.ell());
            let enc = match f.format() {
                BinaryFormat::Dbf => Encoding::Dbf,
                BinaryFormat::Mdbf => Encoding::Mdbf,
            };
            wr.push(name.to_string(), enc, vec![n, m], f.encode(), params);
        }
    }
    if let Some(s) = &t.smooth {
        wr.push_f32(format!("{name}.smooth"), vec![s.len()], s);
    }
    if let Some(s) = &t.row_scale {
        wr.push_f32(format!("{name}.row_scale"), vec![s.len()], s);
    }
    if let Some(s) = &t.col_scale {
        wr.push_f32(format!("{name}.col_scale"), vec![s.len()], s);
    }
    if let Some(ad) = lin.adapter() {
        wr.push_f32(format!("{name}.lora_a"), vec![ad.a.rows(), ad.a.cols()], ad.a.data());
        wr.push_f32(format!("{name}.lora_b"), vec![ad.b.rows(), ad.b.cols()], ad.b.data());
    }
    Ok(())
}

/// Serializes a model to container bytes.
pub fn to_bytes(model: &ToyModel) -> Result<Vec<u8>> {
    let cfg = model.config();
    let mut wr = Writer { entries: Vec::new(), payload: Vec::new() };
    wr.push_f32("embedding".into(), vec![cfg.vocab, cfg.d_model], model.embedding.data());
    wr.push_f32("final_norm".into(), vec![cfg.d_model], &model.final_norm);
    for (b, block) in model.blocks().iter().enumerate() {
        wr.push_f32(format!("norm.{b}.attn"), vec![cfg.d_model], &block.attn_norm);
        wr.push_f32(format!("norm.{b}.ffn"), vec![cfg.d_model], &block.ffn_norm);
        for role in Role::ALL {
            write_linear(&mut wr, &format!("blocks.{b}.{}", role.name()), block.linear(role))?;
        }
    }
    let header = serde_json::to_vec(&Header { config: cfg.clone(), tensors: wr.entries })?;
    let mut out = Vec::with_capacity(12 + header.len() + wr.payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&wr.payload);
    Ok(out)
}

/// Splits container bytes into a validated header and the payload.
pub fn parse(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a model container (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[4..12].try_into().expect("eight bytes"));
    let hend = 12usize
        .checked_add(usize::try_from(hlen).map_err(|_| Error::Format("header length overflows".into()))?)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format(format!("header length {hlen} runs past the end of the file")))?;
    let header: Header = serde_json::from_slice(&bytes[12..hend]).map_err(|e| Error::Format(format!("malformed header: {e}")))?;
    let payload = &bytes[hend..];
    let mut next = 0u64;
    for t in &header.tensors {
        if t.offset != next {
            return Err(Error::Format(format!("{}: offset {} breaks the ascending layout (expected {next})", t.name, t.offset)));
        }
        next = t.offset.checked_add(t.length).ok_or_else(|| Error::Format("tensor extent overflows".into()))?;
    }
    if next != payload.len() as u64 {
        return Err(Error::Format(format!("payload is {} bytes, header describes {next}", payload.len())));
    }
    Ok((header, payload))
}

struct Reader<'a> {
    header: &'a Header,
    payload: &'a [u8],
    used: Vec<bool>,
}

impl<'a> Reader<'a> {
    fn find(&mut self, name: &str) -> Option<(&'a TensorEntry, &'a [u8])> {
        let k = self.header.tensors.iter().position(|t| t.name == name)?;
        self.used[k] = true;
        let t = &self.header.tensors[k];
        Some((t, &self.payload[t.offset as usize..(t.offset + t.length) as usize]))
    }

    fn require(&mut self, name: &str) -> Result<(&'a TensorEntry, &'a [u8])> {
        self.find(name).ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    }

    fn f32s(&mut self, name: &str, shape: &[usize]) -> Result<Option<Vec<f32>>> {
        let Some((t, bytes)) = self.find(name) else { return Ok(None) };
        decode_f32(t, bytes, shape).map(Some)
    }

    fn f32s_req(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let (t, bytes) = self.require(name)?;
        decode_f32(t, bytes, shape)
    }
}

fn decode_f32(t: &TensorEntry, bytes: &[u8], shape: &[usize]) -> Result<Vec<f32>> {
    if t.encoding != Encoding::F32 || t.shape != shape {
        return Err(Error::Format(format!("{}: expected f32 of shape {shape:?}, found {:?} {:?}", t.name, t.encoding, t.shape)));
    }
    let n: usize = shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(Error::Format(format!("{}: {} bytes for {n} values", t.name, bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect())
}

fn read_linear(rd: &mut Reader, name: &str, shape: (usize, usize)) -> Result<Linear> {
    let (n, m) = shape;
    let (t, bytes) = rd.require(name)?;
    if t.shape != [n, m] {
        return Err(Error::Format(format!("{name}: shape {:?}, expected [{n}, {m}]", t.shape)));
    }
    let p = &t.params;
    let fmt_err = |e: Error| Error::Format(format!("{name}: {e}"));
    let repr = match t.encoding {
        Encoding::F32 => WeightRepr::Full(Matrix::from_vec(n, m, decode_f32(t, bytes, &[n, m])?).map_err(fmt_err)?),
        Encoding::Uniform => {
            let (Some(bits), Some(scheme), Some(gran)) = (p.bits, p.scheme, p.granularity) else {
                return Err(Error::Format(format!("{name}: uniform tensor lacks bits, scheme or granularity")));
            };
            let cfg = QuantConfig::new(bits, scheme, gran).map_err(fmt_err)?;
            WeightRepr::Uniform(decode_payload(bytes, n, m, cfg).map_err(fmt_err)?)
        }
        Encoding::Dbf | Encoding::Mdbf => {
            let (Some(rank), Some(ell)) = (p.rank, p.ell) else {
                return Err(Error::Format(format!("{name}: binary tensor lacks rank or envelope rank")));
            };
            let f = if t.encoding == Encoding::Dbf { BinaryFormat::Dbf } else { BinaryFormat::Mdbf };
            WeightRepr::Binary(BinaryFactorMatrix::decode(bytes, f, n, m, rank, ell).map_err(fmt_err)?)
        }
    };
    let rotation = p.rotation.map(|r| Rotation::build(r.kind, n, r.seed)).transpose().map_err(fmt_err)?;
    let transform = InputTransform {
        smooth: rd.f32s(&format!("{name}.smooth"), &[n])?,
        rotation,
        row_scale: rd.f32s(&format!("{name}.row_scale"), &[n])?,
        col_scale: rd.f32s(&format!("{name}.col_scale"), &[m])?,
    };
    let adapter = match rd.find(&format!("{name}.lora_a")) {
        None => None,
        Some((ta, ba)) => {
            let r = ta.shape.first().copied().unwrap_or(0);
            let a = Matrix::from_vec(r, m, decode_f32(ta, ba, &[r, m])?).map_err(fmt_err)?;
            let b = Matrix::from_vec(n, r, rd.f32s_req(&format!("{name}.lora_b"), &[n, r])?).map_err(fmt_err)?;
            Some(LowRank { b, a })
        }
    };
    Linear::new(repr, transform, adapter).map_err(fmt_err)
}

/// Rebuilds a model from container bytes.
pub fn from_bytes(bytes: &[u8]) -> Result<ToyModel> {
    let (header, payload) = parse(bytes)?;
    let cfg = header.config.clone();
    cfg.validate().map_err(|e| Error::Format(format!("header config: {e}")))?;
    let mut rd = Reader { header: &header, payload, used: vec![false; header.tensors.len()] };
    let d = cfg.d_model;
    let embedding = Matrix::from_vec(cfg.vocab, d, rd.f32s_req("embedding", &[cfg.vocab, d])?)
        .map_err(|e| Error::Format(format!("embedding: {e}")))?;
    let final_norm = rd.f32s_req("final_norm", &[d])?;
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for b in 0..cfg.n_layers {
        let attn = rd.f32s_req(&format!("norm.{b}.attn"), &[d])?;
        let ffn = rd.f32s_req(&format!("norm.{b}.ffn"), &[d])?;
        let linears = Role::ALL
            .iter()
            .map(|&role| read_linear(&mut rd, &format!("blocks.{b}.{}", role.name()), cfg.layer_shape(role)))
            .collect::<Result<Vec<_>>>()?;
        blocks.push((attn, ffn, linears));
    }
    if let Some(k) = rd.used.iter().position(|u| !u) {
        return Err(Error::Format(format!("unknown tensor {}", header.tensors[k].name)));
    }
    ToyModel::from_parts(cfg, embedding, final_norm, blocks).map_err(|e| Error::Format(e.to_string()))
}

pub fn save(model: &ToyModel, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ToyModel> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binfact::msvid_init;
    use crate::model::LayerId;
    use crate::quant::{quantize_matrix, storage_bytes, ScaleMode};

    fn small() -> ToyModel {
        ToyModel::random(ToyConfig { n_layers: 1, vocab: 16, ..ToyConfig::default() }, 3).unwrap()
    }

    #[test]
    fn round_trip_with_every_encoding() {
        let mut m = small();
        let q = LayerId::new(0, Role::Q);
        let w = m.linear(&q).unwrap().weight().clone();
        let qm = quantize_matrix(&w, &QuantConfig::asymmetric(3, Granularity::PerGroup(8)).unwrap(), ScaleMode::Minmax).unwrap();
        let expected_q = storage_bytes(&qm);
        let t = InputTransform {
            smooth: Some(vec![1.5; 32]),
            rotation: Some(Rotation::random_orthogonal(32, 9)),
            row_scale: None,
            col_scale: Some(vec![0.5; 32]),
        };
        let ad = LowRank { b: Matrix::filled(32, 2, 0.25), a: Matrix::filled(2, 32, -0.5) };
        m.set_linear(&q, Linear::new(WeightRepr::Uniform(qm), t, Some(ad)).unwrap()).unwrap();
        let down = LayerId::new(0, Role::Down);
        let wd = m.linear(&down).unwrap().weight().clone();
        let f = msvid_init(&wd, 4, 2, BinaryFormat::Mdbf).unwrap().to_storage();
        m.set_linear(&down, Linear::full(wd).with_repr(WeightRepr::Binary(f)).unwrap()).unwrap();
        let bytes = to_bytes(&m).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(to_bytes(&back).unwrap(), bytes);
        let (h, _) = parse(&bytes).unwrap();
        let e = h.tensors.iter().find(|t| t.name == "blocks.0.q").unwrap();
        assert_eq!(e.length as usize, expected_q);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = to_bytes(&small()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Format(_))));
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(from_bytes(&bytes[..10]).is_err());
    }

    #[test]
    fn missing_tensor_is_named() {
        let m = small();
        let bytes = to_bytes(&m).unwrap();
        let (mut h, payload) = parse(&bytes).unwrap();
        let k = h.tensors.iter().position(|t| t.name == "blocks.0.up").unwrap();
        let removed = h.tensors.remove(k);
        let mut data = payload[..removed.offset as usize].to_vec();
        data.extend_from_slice(&payload[(removed.offset + removed.length) as usize..]);
        for t in h.tensors.iter_mut().skip(k) {
            t.offset -= removed.length;
        }
        let header = serde_json::to_vec(&h).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&data);
        match from_bytes(&out) {
            Err(Error::Format(msg)) => assert!(msg.contains("blocks.0.up"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }
}
