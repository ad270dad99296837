//! Little-endian `ATRC` container.
//!
//! ```text
//! magic "ATRC" | version u32 | n_samples u32 | n_neurons u32 | flags u32
//! per record: sample_id u64 | label i32 (only if flags bit 0) | n_neurons x f32
//! ```

use super::{ActivationVector, TraceDataset, TraceRecord};
use crate::error::{Error, Location, Result};

pub const MAGIC: &[u8; 4] = b"ATRC";
pub const VERSION: u32 = 1;

const FLAG_LABELS: u32 = 1;
const HEADER_LEN: usize = 20;

pub fn encode_binary(dataset: &TraceDataset) -> Vec<u8> {
    let labelled = dataset.has_labels();
    let per_record = 8 + if labelled { 4 } else { 0 } + 4 * dataset.n_neurons();
    let mut out = Vec::with_capacity(HEADER_LEN + per_record * dataset.len());

    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dataset.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.n_neurons() as u32).to_le_bytes());
    out.extend_from_slice(&(if labelled { FLAG_LABELS } else { 0 }).to_le_bytes());

    for r in dataset.iter() {
        out.extend_from_slice(&r.sample_id.to_le_bytes());
        if labelled {
            let label = r.label.map(|l| l as i32).unwrap_or(-1);
            out.extend_from_slice(&label.to_le_bytes());
        }
        for v in r.activations.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let bytes = self.buf.get(self.pos..end).ok_or(Error::Truncated {
            location: Location::Byte(self.buf.len() as u64),
        })?;
        self.pos = end;
        Ok(bytes.try_into().expect("slice length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        self.take::<4>().map(u32::from_le_bytes)
    }

    fn here(&self) -> Location {
        Location::Byte(self.pos as u64)
    }
}

pub fn decode_binary(buf: &[u8]) -> Result<TraceDataset> {
    if buf.len() < HEADER_LEN {
        return Err(Error::MalformedHeader {
            location: Location::Byte(buf.len() as u64),
            reason: format!("header needs {HEADER_LEN} bytes, file has {}", buf.len()),
        });
    }
    let mut rd = Reader { buf, pos: 0 };
    let magic = rd.take::<4>()?;
    if &magic != MAGIC {
        return Err(Error::MalformedHeader {
            location: Location::Byte(0),
            reason: format!("bad magic {magic:?}"),
        });
    }
    let version = rd.u32()?;
    if version != VERSION {
        return Err(Error::MalformedHeader {
            location: Location::Byte(4),
            reason: format!("unsupported version {version}"),
        });
    }
    let n_samples = rd.u32()? as usize;
    let n_neurons = rd.u32()? as usize;
    if n_neurons == 0 {
        return Err(Error::MalformedHeader {
            location: Location::Byte(12),
            reason: "n_neurons is zero".into(),
        });
    }
    let flags = rd.u32()?;
    if flags & !FLAG_LABELS != 0 {
        return Err(Error::MalformedHeader {
            location: Location::Byte(16),
            reason: format!("unknown flag bits {flags:#x}"),
        });
    }
    let labelled = flags & FLAG_LABELS != 0;

    let per_record = 8 + if labelled { 4 } else { 0 } + 4 * n_neurons;
    let expected = HEADER_LEN as u64 + per_record as u64 * n_samples as u64;
    if (buf.len() as u64) < expected {
        return Err(Error::Truncated {
            location: Location::Byte(buf.len() as u64),
        });
    }

    let mut records = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let sample_id = u64::from_le_bytes(rd.take::<8>()?);
        let label = if labelled {
            let at = rd.here();
            match i32::from_le_bytes(rd.take::<4>()?) {
                -1 => None,
                l if l >= 0 => Some(l as u32),
                l => {
                    return Err(Error::MalformedValue {
                        location: at,
                        reason: format!("label {l} is negative"),
                    })
                }
            }
        } else {
            None
        };
        let mut values = Vec::with_capacity(n_neurons);
        for _ in 0..n_neurons {
            let at = rd.here();
            let v = f32::from_le_bytes(rd.take::<4>()?);
            if !v.is_finite() {
                return Err(Error::NonFinite { location: at });
            }
            values.push(v);
        }
        records.push(TraceRecord::new(sample_id, ActivationVector(values), label));
    }
    if rd.pos != buf.len() {
        return Err(Error::TrailingData {
            location: rd.here(),
        });
    }
    TraceDataset::new(n_neurons, records)
}
