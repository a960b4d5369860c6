//! Binary weights file.
//!
//! Little-endian layout:
//!
//! ```text
//! "LNW1" | version u16 | record count u32
//! record*: name_len u16 | name (UTF-8) | rank u8 | extent u32 * rank | f32 * product(extents)
//! crc32 u32 over every preceding byte
//! ```
//!
//! The first record is `input_shape`; each layer then contributes records
//! named `layer{i}:{token}` (parameterless, zero-length) or
//! `layer{i}:{token}:weight` / `:bias`, where `token` is the layer's
//! [`LayerSpec`] display form.
//!
//! A checkpoint appends an optimizer section with the same record framing:
//! `"ADAM" | version u16 | step u64 | lr, beta1, beta2, epsilon f64 |
//! record count u32 | records | crc32` over the section bytes.

use std::path::Path;

use super::{AdamConfig, AdamState, Layer, LayerSpec, Network, NnError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LNW1";
pub const FORMAT_VERSION: u16 = 1;
const ADAM_TAG: &[u8; 4] = b"ADAM";

struct Record {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn put_record(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &e in shape {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(NnError::Corrupt(format!(
                "truncated at byte {} (needed {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn record(&mut self) -> Result<Record> {
        let len = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| NnError::Corrupt("record name is not UTF-8".into()))?
            .to_owned();
        let rank = self.u8()? as usize;
        let shape = (0..rank)
            .map(|_| self.u32().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| NnError::Corrupt(format!("record `{name}` is impossibly large")))?;
        let raw =
            self.take(count.checked_mul(4).ok_or_else(|| {
                NnError::Corrupt(format!("record `{name}` is impossibly large"))
            })?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        Ok(Record { name, shape, data })
    }

    /// Verifies the CRC32 that follows `bytes[start..pos]`.
    fn crc(&mut self, start: usize) -> Result<()> {
        let expected = crc32fast::hash(&self.bytes[start..self.pos]);
        let stored = self.u32()?;
        if stored != expected {
            return Err(NnError::Corrupt(format!(
                "checksum mismatch (stored {stored:08x}, computed {expected:08x})"
            )));
        }
        Ok(())
    }
}

pub fn encode_weights(net: &Network<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let count: usize = 1 + net
        .layers()
        .iter()
        .map(|l| l.params.len().max(1))
        .sum::<usize>();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    let shape = net.input_shape().map(|e| e as f32);
    put_record(&mut out, "input_shape", &[3], &shape);
    for (i, layer) in net.layers().iter().enumerate() {
        let base = format!("layer{i}:{}", layer.spec);
        if layer.params.is_empty() {
            put_record(&mut out, &base, &[0], &[]);
        }
        for (p, role) in layer.params.iter().zip(["weight", "bias"]) {
            put_record(&mut out, &format!("{base}:{role}"), p.shape(), p.data());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn parse_network(records: Vec<Record>) -> Result<Network<f32>> {
    let mut iter = records.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| NnError::Incompatible("no records".into()))?;
    if first.name != "input_shape" || first.shape != [3] {
        return Err(NnError::Incompatible(format!(
            "first record must be input_shape[3], found `{}`",
            first.name
        )));
    }
    let mut input_shape = [0usize; 3];
    for (dst, &v) in input_shape.iter_mut().zip(&first.data) {
        if v.fract() != 0.0 || v < 1.0 {
            return Err(NnError::Incompatible(format!("bad input extent {v}")));
        }
        *dst = v as usize;
    }

    let mut specs: Vec<LayerSpec> = Vec::new();
    let mut params: Vec<Vec<Record>> = Vec::new();
    for rec in iter {
        let mut parts = rec.name.splitn(3, ':');
        let index = parts
            .next()
            .and_then(|p| p.strip_prefix("layer"))
            .and_then(|p| p.parse::<usize>().ok())
            .ok_or_else(|| NnError::Incompatible(format!("unexpected record `{}`", rec.name)))?;
        let spec: LayerSpec = parts
            .next()
            .ok_or_else(|| {
                NnError::Incompatible(format!("record `{}` lacks a layer token", rec.name))
            })?
            .parse()
            .map_err(NnError::Incompatible)?;
        let role = parts.next();
        if index == specs.len() {
            specs.push(spec);
            params.push(Vec::new());
        } else if index + 1 != specs.len() || specs[index] != spec {
            return Err(NnError::Incompatible(format!(
                "record `{}` is out of order",
                rec.name
            )));
        }
        if role.is_some() {
            params[index].push(rec);
        }
    }

    let mut net = Network::from_specs(specs, input_shape)
        .map_err(|e| NnError::Incompatible(e.to_string()))?;
    for (i, (layer, recs)) in net.layers_mut().iter_mut().zip(params).enumerate() {
        let Layer { spec, params } = layer;
        if recs.len() != params.len() {
            return Err(NnError::Incompatible(format!(
                "layer {i} ({spec}) expects {} parameter tensors, file has {}",
                params.len(),
                recs.len()
            )));
        }
        for ((p, rec), role) in params.iter_mut().zip(recs).zip(["weight", "bias"]) {
            if !rec.name.ends_with(role) || rec.shape != p.shape() {
                return Err(NnError::Incompatible(format!(
                    "record `{}` has shape {:?}, layer expects {role} {:?}",
                    rec.name,
                    rec.shape,
                    p.shape()
                )));
            }
            *p = Tensor::new(rec.shape, rec.data)?;
        }
    }
    Ok(net)
}

fn read_weights(r: &mut Reader<'_>) -> Result<Network<f32>> {
    let start = r.pos;
    if &r.array::<4>()? != MAGIC {
        return Err(NnError::Corrupt("bad magic".into()));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(NnError::Corrupt(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let records = (0..count).map(|_| r.record()).collect::<Result<Vec<_>>>()?;
    r.crc(start)?;
    parse_network(records)
}

/// Decodes a weights file (or the weights part of a checkpoint).
pub fn decode_weights(bytes: &[u8]) -> Result<Network<f32>> {
    Ok(decode_checkpoint(bytes)?.0)
}

pub fn encode_checkpoint(net: &Network<f32>, state: &AdamState<f32>) -> Vec<u8> {
    let mut out = encode_weights(net);
    let start = out.len();
    out.extend_from_slice(ADAM_TAG);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&state.step_count.to_le_bytes());
    let c = state.config;
    for v in [c.learning_rate, c.beta1, c.beta2, c.epsilon] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let count: usize = state.m.iter().map(Vec::len).sum::<usize>() * 2;
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (which, moments) in [("m", &state.m), ("v", &state.v)] {
        for (i, layer) in moments.iter().enumerate() {
            for (j, t) in layer.iter().enumerate() {
                put_record(&mut out, &format!("{which}:{i}:{j}"), t.shape(), t.data());
            }
        }
    }
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Decodes weights plus the optional optimizer section.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Network<f32>, Option<AdamState<f32>>)> {
    let mut r = Reader { bytes, pos: 0 };
    let net = read_weights(&mut r)?;
    if r.pos == bytes.len() {
        return Ok((net, None));
    }
    let start = r.pos;
    if &r.array::<4>()? != ADAM_TAG {
        return Err(NnError::Corrupt(format!(
            "unexpected trailing data at byte {start}"
        )));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(NnError::Corrupt(format!(
            "unsupported optimizer section version {version}"
        )));
    }
    let step_count = r.u64()?;
    let config = AdamConfig {
        learning_rate: r.f64()?,
        beta1: r.f64()?,
        beta2: r.f64()?,
        epsilon: r.f64()?,
    };
    let count = r.u32()?;
    let records = (0..count).map(|_| r.record()).collect::<Result<Vec<_>>>()?;
    r.crc(start)?;
    if r.pos != bytes.len() {
        return Err(NnError::Corrupt(format!(
            "unexpected trailing data at byte {}",
            r.pos
        )));
    }

    let mut state = AdamState::new(&net, config);
    state.step_count = step_count;
    let expected: usize = state.m.iter().map(Vec::len).sum::<usize>() * 2;
    if records.len() != expected {
        return Err(NnError::Incompatible(format!(
            "optimizer section has {} moment tensors, network needs {expected}",
            records.len()
        )));
    }
    for rec in records {
        let parts: Vec<&str> = rec.name.split(':').collect();
        let (which, i, j) = match parts.as_slice() {
            [w, i, j] => (*w, i.parse::<usize>().ok(), j.parse::<usize>().ok()),
            _ => ("", None, None),
        };
        let target = match (which, i, j) {
            ("m", Some(i), Some(j)) => state.m.get_mut(i).and_then(|l| l.get_mut(j)),
            ("v", Some(i), Some(j)) => state.v.get_mut(i).and_then(|l| l.get_mut(j)),
            _ => None,
        }
        .ok_or_else(|| NnError::Incompatible(format!("unexpected moment record `{}`", rec.name)))?;
        if target.shape() != rec.shape {
            return Err(NnError::Incompatible(format!(
                "moment `{}` has shape {:?}, expected {:?}",
                rec.name,
                rec.shape,
                target.shape()
            )));
        }
        *target = Tensor::new(rec.shape, rec.data)?;
    }
    Ok((net, Some(state)))
}

pub fn save_weights(net: &Network<f32>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_weights(net))?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Network<f32>> {
    decode_weights(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_laksnet, build_pilotnet, Gradients};

    fn bits(net: &Network<f32>) -> Vec<u32> {
        net.layers()
            .iter()
            .flat_map(|l| &l.params)
            .flat_map(|p| p.data().iter().map(|v| v.to_bits()))
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for net in [build_laksnet::<f32>(11), build_pilotnet::<f32>(12)] {
            let bytes = encode_weights(&net);
            assert_eq!(&bytes[..4], MAGIC);
            let back = decode_weights(&bytes).unwrap();
            assert_eq!(back.specs(), net.specs());
            assert_eq!(back.input_shape(), net.input_shape());
            assert_eq!(bits(&back), bits(&net));
        }
    }

    #[test]
    fn header_layout() {
        let net = build_laksnet::<f32>(0);
        let bytes = encode_weights(&net);
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), FORMAT_VERSION);
        // input_shape + 18 layers, two records each for the six parametric ones
        let count = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
        assert_eq!(count, 1 + 12 + 6 * 2);
        let name_len = u16::from_le_bytes([bytes[10], bytes[11]]) as usize;
        assert_eq!(&bytes[12..12 + name_len], b"input_shape");
        let n = bytes.len();
        let crc = u32::from_le_bytes(bytes[n - 4..].try_into().unwrap());
        assert_eq!(crc, crc32fast::hash(&bytes[..n - 4]));
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let bytes = encode_weights(&build_laksnet::<f32>(0));
        for cut in [0, 3, 10, 100, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(decode_weights(&bytes[..cut]), Err(NnError::Corrupt(_))),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn flipped_bit_is_corrupt() {
        let mut bytes = encode_weights(&build_laksnet::<f32>(0));
        bytes[5000] ^= 0x10;
        assert!(matches!(decode_weights(&bytes), Err(NnError::Corrupt(_))));
        let mut bytes = encode_weights(&build_laksnet::<f32>(0));
        bytes[0] = b'X';
        assert!(matches!(decode_weights(&bytes), Err(NnError::Corrupt(_))));
    }

    #[test]
    fn shape_mismatch_is_incompatible() {
        let mut net = build_laksnet::<f32>(0);
        // Corrupt a parameter shape while keeping the file well-formed.
        net.layers_mut()[0].params[1] = Tensor::zeros(&[17]);
        let bytes = encode_weights(&net);
        assert!(matches!(
            decode_weights(&bytes),
            Err(NnError::Incompatible(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut net = build_laksnet::<f32>(3);
        let mut state = AdamState::new(&net, AdamConfig::default());
        let mut grads: Gradients<f32> = net.zero_gradients();
        for (i, g) in grads.layers.iter_mut().flatten().enumerate() {
            g.data_mut()
                .iter_mut()
                .for_each(|v| *v = (i as f32 + 1.0) * 1e-3);
        }
        crate::nn::adam_step(&mut net, &grads, &mut state).unwrap();
        let bytes = encode_checkpoint(&net, &state);
        let (n2, s2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(bits(&n2), bits(&net));
        assert_eq!(s2.unwrap(), state);
        // The weights reader accepts a checkpoint.
        assert_eq!(bits(&decode_weights(&bytes).unwrap()), bits(&net));
        // A damaged optimizer section is rejected.
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 10] ^= 1;
        assert!(matches!(decode_checkpoint(&bad), Err(NnError::Corrupt(_))));
    }
}
