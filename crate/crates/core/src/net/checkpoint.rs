//! Binary checkpoint format.
//!
//! ```text
//! magic       8 bytes  "LSPRBCK1"
//! count       u32      number of segment records
//! record*     u32 name length, name (utf-8), u32 layer, u64 start, u64 len, u64 fan_in
//! total       u64      number of values
//! values      f64*     little-endian
//! ```
//!
//! Parameter segments use their role name (`weight`, `bias`, `bn-scale`,
//! `bn-shift`); batch-norm running statistics use `running-mean` and
//! `running-var` with the batch-norm slot as layer; free-form arrays (for
//! example NTK slices) use any other name.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{ProbeError, Result};

use super::params::{BnRunning, ParamVector, Role, RunningStats, Segment};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LSPRBCK1";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub params: Option<ParamVector>,
    pub stats: RunningStats,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn model(params: ParamVector, stats: RunningStats) -> Self {
        Self { params: Some(params), stats, arrays: Vec::new() }
    }

    pub fn array(name: impl Into<String>, values: Vec<f64>) -> Self {
        Self {
            params: None,
            stats: RunningStats::default(),
            arrays: vec![NamedArray { name: name.into(), values }],
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        struct Rec<'a> {
            name: &'a str,
            layer: u32,
            start: u64,
            len: u64,
            fan_in: u64,
        }
        let mut recs = Vec::new();
        let mut values: Vec<f64> = Vec::new();
        if let Some(p) = &self.params {
            for s in &p.segments {
                recs.push(Rec {
                    name: s.role.as_str(),
                    layer: s.layer as u32,
                    start: s.start as u64,
                    len: s.len as u64,
                    fan_in: s.fan_in as u64,
                });
            }
            values.extend_from_slice(&p.values);
        }
        for (slot, bn) in self.stats.layers.iter().enumerate() {
            for (name, v) in [("running-mean", &bn.mean), ("running-var", &bn.var)] {
                recs.push(Rec {
                    name,
                    layer: slot as u32,
                    start: values.len() as u64,
                    len: v.len() as u64,
                    fan_in: 0,
                });
                values.extend_from_slice(v);
            }
        }
        for a in &self.arrays {
            recs.push(Rec {
                name: &a.name,
                layer: 0,
                start: values.len() as u64,
                len: a.values.len() as u64,
                fan_in: 0,
            });
            values.extend_from_slice(&a.values);
        }
        let mut out = Vec::with_capacity(16 + recs.len() * 40 + values.len() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(recs.len() as u32).to_le_bytes());
        for r in &recs {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.extend_from_slice(&r.layer.to_le_bytes());
            out.extend_from_slice(&r.start.to_le_bytes());
            out.extend_from_slice(&r.len.to_le_bytes());
            out.extend_from_slice(&r.fan_in.to_le_bytes());
        }
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(ProbeError::Format { offset: 0, detail: "bad checkpoint magic".into() });
        }
        let count = r.u32()? as usize;
        let mut recs = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let at = r.pos as u64;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| ProbeError::Format { offset: at, detail: "segment name is not utf-8".into() })?
                .to_string();
            let layer = r.u32()? as usize;
            let start = r.u64()? as usize;
            let len = r.u64()? as usize;
            let fan_in = r.u64()? as usize;
            recs.push((name, layer, start, len, fan_in));
        }
        let total = r.u64()? as usize;
        let at = r.pos as u64;
        let raw = r.take(total.checked_mul(8).ok_or(ProbeError::Format {
            offset: at,
            detail: "value count overflows".into(),
        })?)?;
        if r.pos != bytes.len() {
            return Err(ProbeError::Format {
                offset: r.pos as u64,
                detail: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();

        let mut segments = Vec::new();
        let mut param_len = 0;
        let mut ck = Checkpoint::default();
        for (name, layer, start, len, fan_in) in recs {
            let end = start.checked_add(len).filter(|&e| e <= total).ok_or(ProbeError::Format {
                offset: at,
                detail: format!("segment {name} [{start}, +{len}) exceeds {total} values"),
            })?;
            let slice = values[start..end].to_vec();
            if let Some(role) = Role::parse(&name) {
                if start != param_len {
                    return Err(ProbeError::Format {
                        offset: at,
                        detail: "parameter segments must be contiguous".into(),
                    });
                }
                param_len += len;
                segments.push(Segment { layer, role, start, len, fan_in });
                continue;
            }
            match name.as_str() {
                "running-mean" | "running-var" => {
                    while ck.stats.layers.len() <= layer {
                        ck.stats.layers.push(BnRunning { mean: vec![], var: vec![] });
                    }
                    if name == "running-mean" {
                        ck.stats.layers[layer].mean = slice;
                    } else {
                        ck.stats.layers[layer].var = slice;
                    }
                }
                _ => ck.arrays.push(NamedArray { name, values: slice }),
            }
        }
        if !segments.is_empty() {
            ck.params = Some(ParamVector::from_values(segments, values[..param_len].to_vec())?);
        }
        Ok(ck)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(ProbeError::Format {
                offset: self.pos as u64,
                detail: format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn write_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&ck.to_bytes())?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{InitScheme, Network, NetworkSpec};

    #[test]
    fn model_checkpoint_round_trips() {
        let net = Network::new(NetworkSpec::mlp(3, &[4], 2)).unwrap();
        let p = net.init(InitScheme::HeUniform { seed: 1 });
        let mut stats = RunningStats::fresh(&[2]);
        stats.layers[0].mean = vec![0.5, -1.5];
        let mut ck = Checkpoint::model(p.clone(), stats.clone());
        ck.arrays.push(NamedArray { name: "ntk[2,2,2,2]".into(), values: vec![1.0; 16] });
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(&ck.to_bytes()[..8], CHECKPOINT_MAGIC);
    }

    #[test]
    fn truncated_checkpoint_is_a_format_error() {
        let net = Network::new(NetworkSpec::mlp(3, &[4], 2)).unwrap();
        let ck = Checkpoint::model(net.init(InitScheme::Zero), RunningStats::default());
        let bytes = ck.to_bytes();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(Checkpoint::from_bytes(cut), Err(ProbeError::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(ProbeError::Format { offset: 0, .. })));
    }
}
