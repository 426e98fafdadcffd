//! Packed representation of N:M-sparse weight tensors.
//!
//! Layout is group-major: for each M-group (in the grouping order of the
//! mask's axis) the N surviving values are stored in ascending in-group
//! index order, followed by one packed bitstream of in-group offsets at
//! ⌈log2 M⌉ bits each, padded to a byte boundary per tensor.
//!
//! Serialized form (all integers little-endian):
//!
//! ```text
//! magic "NMPK" | version u8 | N u16 | M u16 | axis u8 | rank u8
//! dims u64 × rank | values f64 × (groups × N) | index bitstream (padded)
//! ```
//!
//! Values are stored at full f64 width so unpack∘pack is bit-exact; the
//! `packed_size_bits` accounting instead charges 32 bits per value, the
//! deployment-width convention the compression reports use.

use crate::error::{Error, Result};
use crate::nm::{group_flat_indices, MaskMode, NmPattern, SparsityMask};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NMPK";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct PackedNmTensor {
    pub pattern: NmPattern,
    pub shape: Vec<usize>,
    pub axis: usize,
    /// Kept weights, group-major, N per group.
    pub values: Vec<f64>,
    /// In-group offset of each kept weight, strictly increasing within a
    /// group (one byte each in memory; bit-packed when serialized).
    pub indices: Vec<u8>,
}

/// Pack a weight tensor under a binary structured mask. The mask is the
/// structural integrity gate: any group without exactly N kept entries is
/// rejected.
pub fn pack(weight: &Tensor, mask: &SparsityMask, pattern: NmPattern) -> Result<PackedNmTensor> {
    if mask.mode != MaskMode::Binary {
        return Err(Error::InvalidArgument(
            "pack requires a binary mask".into(),
        ));
    }
    if weight.shape != mask.values.shape {
        return Err(Error::ShapeMismatch {
            op: "pack",
            lhs: weight.shape.clone(),
            rhs: mask.values.shape.clone(),
        });
    }
    let n = pattern.n() as usize;
    let m = pattern.m() as usize;
    let axis = mask.axis;
    let groups = group_flat_indices(&weight.shape, axis, m)?;
    let mut values = Vec::with_capacity(groups.len() * n);
    let mut indices = Vec::with_capacity(groups.len() * n);
    for (gi, group) in groups.iter().enumerate() {
        let mut kept = 0usize;
        for (off, &flat) in group.iter().enumerate() {
            match mask.values.data[flat] {
                1.0 => {
                    values.push(weight.data[flat]);
                    indices.push(off as u8);
                    kept += 1;
                }
                0.0 => {}
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "mask entry {other} at flat index {flat} is not binary"
                    )));
                }
            }
        }
        if kept != n {
            return Err(Error::InvalidArgument(format!(
                "group {gi} keeps {kept} entries, pattern {pattern} requires {n}"
            )));
        }
    }
    Ok(PackedNmTensor {
        pattern,
        shape: weight.shape.clone(),
        axis,
        values,
        indices,
    })
}

impl PackedNmTensor {
    /// Reconstruct weight ⊙ mask, bit-exact for surviving entries.
    pub fn unpack(&self) -> Result<Tensor> {
        let n = self.pattern.n() as usize;
        let m = self.pattern.m() as usize;
        let groups = group_flat_indices(&self.shape, self.axis, m)?;
        if groups.len() * n != self.values.len() {
            return Err(Error::Malformed(format!(
                "expected {} values, found {}",
                groups.len() * n,
                self.values.len()
            )));
        }
        let mut out = Tensor::zeros(&self.shape);
        for (gi, group) in groups.iter().enumerate() {
            for k in 0..n {
                let off = self.indices[gi * n + k] as usize;
                out.data[group[off]] = self.values[gi * n + k];
            }
        }
        Ok(out)
    }

    fn header_bits(&self) -> u64 {
        8 * (MAGIC.len() as u64 + 1 + 2 + 2 + 1 + 1 + 8 * self.shape.len() as u64)
    }

    /// Accounting size: 32-bit values + per-tensor byte-padded index
    /// bitstream + the fixed header.
    pub fn packed_size_bits(&self) -> u64 {
        let count = self.values.len() as u64;
        let idx_bits = count * self.pattern.index_bits() as u64;
        let idx_padded = idx_bits.div_ceil(8) * 8;
        self.header_bits() + count * crate::cost::VALUE_BITS as u64 + idx_padded
    }

    /// Dense accounting size of the original tensor at 32-bit values.
    pub fn dense_size_bits(&self) -> u64 {
        self.shape.iter().product::<usize>() as u64 * crate::cost::VALUE_BITS as u64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.pattern.n() as u16).to_le_bytes());
        out.extend_from_slice(&(self.pattern.m() as u16).to_le_bytes());
        out.push(self.axis as u8);
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let ib = self.pattern.index_bits() as usize;
        let mut acc = 0u64;
        let mut nbits = 0usize;
        for &idx in &self.indices {
            acc |= (idx as u64) << nbits;
            nbits += ib;
            while nbits >= 8 {
                out.push((acc & 0xff) as u8);
                acc >>= 8;
                nbits -= 8;
            }
        }
        if nbits > 0 {
            out.push((acc & 0xff) as u8);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let take = |at: &mut usize, len: usize| -> Result<&[u8]> {
            if *at + len > bytes.len() {
                return Err(Error::Malformed("truncated packed tensor".into()));
            }
            let s = &bytes[*at..*at + len];
            *at += len;
            Ok(s)
        };
        let mut at = 0usize;
        if take(&mut at, 4)? != MAGIC {
            return Err(Error::Malformed("bad magic, expected NMPK".into()));
        }
        let version = take(&mut at, 1)?[0];
        if version != VERSION {
            return Err(Error::Malformed(format!("unsupported version {version}")));
        }
        let n = u16::from_le_bytes(take(&mut at, 2)?.try_into().unwrap()) as u32;
        let m = u16::from_le_bytes(take(&mut at, 2)?.try_into().unwrap()) as u32;
        let pattern = NmPattern::new(n, m)?;
        let axis = take(&mut at, 1)?[0] as usize;
        let rank = take(&mut at, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        if numel == 0 || m == 0 {
            return Err(Error::Malformed("empty shape".into()));
        }
        let count = numel / m as usize * n as usize;
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            values.push(f64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()));
        }
        let ib = pattern.index_bits() as usize;
        let idx_bytes = (count * ib).div_ceil(8);
        let stream = take(&mut at, idx_bytes)?;
        let mut indices = Vec::with_capacity(count);
        let mut acc = 0u64;
        let mut nbits = 0usize;
        let mut next = 0usize;
        for _ in 0..count {
            while nbits < ib {
                acc |= (stream[next] as u64) << nbits;
                next += 1;
                nbits += 8;
            }
            indices.push((acc & ((1u64 << ib) - 1)) as u8);
            acc >>= ib;
            nbits -= ib;
        }
        Ok(Self {
            pattern,
            shape,
            axis,
            values,
            indices,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nm::{build_mask, MaskMode};

    #[test]
    fn single_group_accounting_example() {
        // one group of 16 with survivor 2.5 at offset 5: 36 payload bits vs
        // 512 dense (at 32-bit values)
        let mut data = vec![0.0; 16];
        data[5] = 2.5;
        let w = Tensor::new(vec![1, 16], data).unwrap();
        let p = NmPattern::parse("1:16").unwrap();
        let mask = build_mask(&w, p, 1, MaskMode::Binary, 0.0).unwrap();
        let packed = pack(&w, &mask, p).unwrap();
        assert_eq!(packed.values, vec![2.5]);
        assert_eq!(packed.indices, vec![5]);
        assert_eq!(packed.dense_size_bits(), 512);
        // 32 value bits + 4 index bits padded to 8
        assert_eq!(packed.packed_size_bits() - pack_header_bits(&packed), 32 + 8);
    }

    fn pack_header_bits(p: &PackedNmTensor) -> u64 {
        8 * (4 + 1 + 2 + 2 + 1 + 1 + 8 * p.shape.len() as u64)
    }

    #[test]
    fn size_accounting_1_16_512_weights() {
        let data: Vec<f64> = (0..512).map(|i| (i % 17) as f64 - 8.0).collect();
        let w = Tensor::new(vec![2, 256], data).unwrap();
        let p = NmPattern::parse("1:16").unwrap();
        let mask = build_mask(&w, p, 1, MaskMode::Binary, 0.0).unwrap();
        let packed = pack(&w, &mask, p).unwrap();
        // 32 groups × (32 value bits + 4 index bits); indices pack to 16 bytes
        let payload = packed.packed_size_bits() - pack_header_bits(&packed);
        assert_eq!(payload, 32 * (32 + 4));
        let ratio = payload as f64 / packed.dense_size_bits() as f64;
        assert!((ratio - 36.0 / 512.0).abs() < 1e-12);
    }

    #[test]
    fn all_kept_pattern_exceeds_dense_size() {
        let w = Tensor::new(vec![1, 8], vec![1.0; 8]).unwrap();
        let p = NmPattern::parse("4:4").unwrap();
        let mask = build_mask(&w, p, 1, MaskMode::Binary, 0.0).unwrap();
        let packed = pack(&w, &mask, p).unwrap();
        assert!(packed.packed_size_bits() >= packed.dense_size_bits());
    }

    #[test]
    fn violating_mask_rejected() {
        let w = Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = NmPattern::parse("2:4").unwrap();
        let mut mask = build_mask(&w, p, 1, MaskMode::Binary, 0.0).unwrap();
        mask.values.data[0] = 1.0;
        mask.values.data[1] = 1.0;
        mask.values.data[2] = 1.0; // three kept in a 2:4 group
        assert!(pack(&w, &mask, p).is_err());
        let decayed = build_mask(&w, p, 1, MaskMode::Decayed, 0.5).unwrap();
        assert!(pack(&w, &decayed, p).is_err());
    }

    #[test]
    fn roundtrip_and_serialization_deterministic() {
        let data: Vec<f64> = (0..64)
            .map(|i| ((i * 2654435761u64 as usize) % 1009) as f64 / 251.0 - 2.0)
            .collect();
        let w = Tensor::new(vec![8, 8], data).unwrap();
        let p = NmPattern::parse("2:4").unwrap();
        let mask = build_mask(&w, p, 0, MaskMode::Binary, 0.0).unwrap();
        let packed = pack(&w, &mask, p).unwrap();
        let masked: Vec<f64> = w
            .data
            .iter()
            .zip(&mask.values.data)
            .map(|(&a, &b)| if b == 1.0 { a } else { 0.0 })
            .collect();
        let un = packed.unpack().unwrap();
        assert!(un
            .data
            .iter()
            .zip(&masked)
            .all(|(a, b)| a.to_bits() == b.to_bits()));

        let b1 = packed.to_bytes();
        let b2 = pack(&w, &mask, p).unwrap().to_bytes();
        assert_eq!(b1, b2);
        let re = PackedNmTensor::from_bytes(&b1).unwrap();
        assert_eq!(re, packed);
    }

    #[test]
    fn from_bytes_rejects_garbage() {
        assert!(PackedNmTensor::from_bytes(b"XXXX").is_err());
        assert!(PackedNmTensor::from_bytes(b"NMPK\x02").is_err());
    }
}
