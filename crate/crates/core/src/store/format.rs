//! Binary index format.
//!
//! Header: `"RICO"`, version `u16`, model fingerprint (32 bytes), layer count
//! `u32`, layer mask (`ceil(L/8)` bytes), state rows `u32`, embed width `u32`,
//! document count `u32`. Each record: id length `u16`, UTF-8 id, token count
//! `u32`, then every retained layer matrix row-major as little-endian `f32`.

use std::path::Path;

use ndarray::Array2;

use super::index::{DocumentStateRecord, LayerMask, StateIndex};
use crate::error::{Error, Result};
use crate::ssm::StateStack;

pub const INDEX_MAGIC: [u8; 4] = *b"RICO";
pub const INDEX_VERSION: u16 = 1;

pub(crate) fn header_len(num_layers: usize) -> usize {
    4 + 2 + 32 + 4 + num_layers.div_ceil(8) + 4 + 4 + 4
}

pub(crate) fn serialized_len(index: &StateIndex) -> usize {
    let matrix = index.layer_mask.count() * index.state_dim * index.embed_dim * 4;
    header_len(index.num_layers())
        + index
            .records
            .iter()
            .map(|r| 2 + r.doc_id.len() + 4 + matrix)
            .sum::<usize>()
}

pub fn write_index(index: &StateIndex) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(serialized_len(index));
    out.extend_from_slice(&INDEX_MAGIC);
    out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
    out.extend_from_slice(&index.fingerprint);
    out.extend_from_slice(&(index.num_layers() as u32).to_le_bytes());
    out.extend_from_slice(index.layer_mask.as_bytes());
    out.extend_from_slice(&(index.state_dim as u32).to_le_bytes());
    out.extend_from_slice(&(index.embed_dim as u32).to_le_bytes());
    out.extend_from_slice(&(index.records.len() as u32).to_le_bytes());
    for r in &index.records {
        let id = r.doc_id.as_bytes();
        let id_len = u16::try_from(id.len())
            .map_err(|_| Error::input(format!("doc_id {:?} longer than 65535 bytes", r.doc_id)))?;
        out.extend_from_slice(&id_len.to_le_bytes());
        out.extend_from_slice(id);
        out.extend_from_slice(&r.token_count.to_le_bytes());
        for layer in r.states.layers() {
            for v in layer.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated: needed {n} bytes at offset {}",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parse an index; when `expected_fingerprint` is given it must match.
pub fn read_index(bytes: &[u8], expected_fingerprint: Option<&[u8; 32]>) -> Result<StateIndex> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != INDEX_MAGIC {
        return Err(Error::BadMagic {
            expected: INDEX_MAGIC,
            found: magic,
        });
    }
    let version = r.u16()?;
    if version != INDEX_VERSION {
        return Err(Error::Version {
            expected: INDEX_VERSION,
            found: version,
        });
    }
    let fingerprint: [u8; 32] = r.take(32)?.try_into().unwrap();
    if let Some(expected) = expected_fingerprint {
        if expected != &fingerprint {
            return Err(Error::Fingerprint);
        }
    }
    let num_layers = r.u32()? as usize;
    let mask = LayerMask::from_bytes(num_layers, r.take(num_layers.div_ceil(8))?.to_vec())?;
    let state_dim = r.u32()? as usize;
    let embed_dim = r.u32()? as usize;
    let doc_count = r.u32()? as usize;
    let kept = mask.count();
    let matrix_len = state_dim
        .checked_mul(embed_dim)
        .ok_or_else(|| Error::Format("matrix size overflow".into()))?;

    let mut records = Vec::with_capacity(doc_count.min(1 << 16));
    for _ in 0..doc_count {
        let id_len = r.u16()? as usize;
        let doc_id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|_| Error::Format("doc_id is not UTF-8".into()))?
            .to_owned();
        let token_count = r.u32()?;
        let mut layers = Vec::with_capacity(kept);
        for _ in 0..kept {
            let raw = r.take(matrix_len * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            layers.push(Array2::from_shape_vec((state_dim, embed_dim), data).expect("sized above"));
        }
        records.push(DocumentStateRecord {
            doc_id,
            token_count,
            states: StateStack::from_layers(layers)?,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last record",
            bytes.len() - r.pos
        )));
    }
    StateIndex::from_parts(fingerprint, state_dim, embed_dim, mask, records).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_index(index: &StateIndex, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_index(index)?).map_err(|e| Error::io(path, e))
}

pub fn load_index(path: impl AsRef<Path>, expected_fingerprint: Option<&[u8; 32]>) -> Result<StateIndex> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_index(&bytes, expected_fingerprint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::{ModelConfig, ModelParams};
    use crate::store::{layer_subsample, precompute_states, DocumentRecord};

    fn index() -> (ModelParams<f64>, StateIndex) {
        let p = ModelParams::init(&ModelConfig::new(12, 5, 3, 9).with_seed(1)).unwrap();
        let docs: Vec<_> = (0..4)
            .map(|i| DocumentRecord::new(format!("doc-{i}"), vec![i + 1, 2 * i + 1, 3]))
            .collect();
        let idx = precompute_states(&p, &docs).unwrap();
        (p, idx)
    }

    #[test]
    fn round_trip_with_mask_spanning_two_bytes() {
        let (p, idx) = index();
        let sub = layer_subsample(&idx, &[1, 8]).unwrap();
        for i in [&idx, &sub] {
            let bytes = write_index(i).unwrap();
            assert_eq!(bytes.len(), i.serialized_len());
            let back = read_index(&bytes, Some(&p.fingerprint())).unwrap();
            assert_eq!(&back, i);
            assert_eq!(write_index(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn structured_errors() {
        let (_, idx) = index();
        let bytes = write_index(&idx).unwrap();
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(read_index(&bad, None), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(read_index(&bad, None), Err(Error::Version { .. })));
        assert!(matches!(read_index(&bytes, Some(&[0u8; 32])), Err(Error::Fingerprint)));
        for cut in [0, 5, 40, bytes.len() - 3] {
            assert!(matches!(read_index(&bytes[..cut], None), Err(Error::Format(_))));
        }
    }
}
