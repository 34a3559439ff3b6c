//! The `.evsp` weight file.
//!
//! ```text
//! "EVSP"  version:u32  n:u32  descriptor:[u32; n]  count:u32  params:[f32; count]  crc32:u32
//! ```
//!
//! All integers and floats are little-endian. The descriptor lists
//! input_dim, recurrent_layers, hidden, dense_layers, width, output_dim and a
//! flag word (bit 0 normalization, bit 1 value head). The CRC covers every
//! byte before it.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::net::ArchSpec;

pub const MAGIC: &[u8; 4] = b"EVSP";
pub const VERSION: u32 = 1;
const DESCRIPTOR_LEN: u32 = 7;

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("not a weight file (bad magic)")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed architecture descriptor: {0}")]
    BadDescriptor(String),
    #[error("header declares {declared} parameters but the architecture has {expected}")]
    CountMismatch { declared: u32, expected: usize },
    #[error("file is {actual} bytes, expected {expected}")]
    Length { expected: usize, actual: usize },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("parameter {0} does not fit in binary32")]
    NotRepresentable(usize),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn descriptor(arch: ArchSpec) -> [u32; DESCRIPTOR_LEN as usize] {
    let flags = u32::from(arch.normalization) | (u32::from(arch.value_head) << 1);
    [
        arch.input_dim as u32,
        arch.recurrent_layers as u32,
        arch.hidden as u32,
        arch.dense_layers as u32,
        arch.width as u32,
        arch.output_dim as u32,
        flags,
    ]
}

fn arch_from(d: &[u32]) -> Result<ArchSpec, WeightsError> {
    if d[6] > 3 {
        return Err(WeightsError::BadDescriptor(format!("unknown flags {:#x}", d[6])));
    }
    let arch = ArchSpec {
        input_dim: d[0] as usize,
        recurrent_layers: d[1] as usize,
        hidden: d[2] as usize,
        dense_layers: d[3] as usize,
        width: d[4] as usize,
        output_dim: d[5] as usize,
        normalization: d[6] & 1 != 0,
        value_head: d[6] & 2 != 0,
    };
    if arch.input_dim != crate::encoding::OBS_DIM || arch.output_dim != crate::engine::NUM_KINDS {
        return Err(WeightsError::BadDescriptor(format!(
            "input {} and output {} do not match the game",
            arch.input_dim, arch.output_dim
        )));
    }
    if arch.recurrent_layers + arch.dense_layers == 0 || (arch.recurrent_layers > 0 && arch.hidden == 0) || (arch.dense_layers > 0 && arch.width == 0) {
        return Err(WeightsError::BadDescriptor("empty layer".into()));
    }
    Ok(arch)
}

pub fn encode_weights(arch: ArchSpec, params: &[f64]) -> Result<Vec<u8>, WeightsError> {
    if params.len() != arch.param_count() {
        return Err(WeightsError::CountMismatch {
            declared: params.len() as u32,
            expected: arch.param_count(),
        });
    }
    let mut out = Vec::with_capacity(4 * (params.len() + 12));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&DESCRIPTOR_LEN.to_le_bytes());
    for d in descriptor(arch) {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (i, &p) in params.iter().enumerate() {
        let f = p as f32;
        if !f.is_finite() {
            return Err(WeightsError::NotRepresentable(i));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn u32_at(bytes: &[u8], at: usize) -> Result<u32, WeightsError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or(WeightsError::Length {
            expected: at + 4,
            actual: bytes.len(),
        })
}

pub fn decode_weights(bytes: &[u8]) -> Result<(ArchSpec, Vec<f64>), WeightsError> {
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err(WeightsError::BadMagic);
    }
    let version = u32_at(bytes, 4)?;
    if version != VERSION {
        return Err(WeightsError::UnsupportedVersion(version));
    }
    let n = u32_at(bytes, 8)?;
    if n != DESCRIPTOR_LEN {
        return Err(WeightsError::BadDescriptor(format!("{n} entries, expected {DESCRIPTOR_LEN}")));
    }
    let desc: Vec<u32> = (0..n as usize).map(|i| u32_at(bytes, 12 + 4 * i)).collect::<Result<_, _>>()?;
    let arch = arch_from(&desc)?;
    let count_at = 12 + 4 * n as usize;
    let declared = u32_at(bytes, count_at)?;
    let expected = arch.param_count();
    if declared as usize != expected {
        return Err(WeightsError::CountMismatch { declared, expected });
    }
    let body_end = count_at + 4 + 4 * expected;
    if bytes.len() != body_end + 4 {
        return Err(WeightsError::Length {
            expected: body_end + 4,
            actual: bytes.len(),
        });
    }
    let stored = u32_at(bytes, body_end)?;
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(WeightsError::Checksum { stored, computed });
    }
    let params = bytes[count_at + 4..body_end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((arch, params))
}

pub fn save_weights(path: &Path, arch: ArchSpec, params: &[f64]) -> Result<(), WeightsError> {
    let bytes = encode_weights(arch, params)?;
    fs::write(path, bytes).map_err(|source| WeightsError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_weights(path: &Path) -> Result<(ArchSpec, Vec<f64>), WeightsError> {
    let bytes = fs::read(path).map_err(|source| WeightsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_weights(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::init_params;
    use proptest::prelude::*;

    fn f32_exact(params: &[f64]) -> Vec<f64> {
        params.iter().map(|&p| p as f32 as f64).collect()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.evsp");
        for arch in [ArchSpec::small(), ArchSpec::full(), ArchSpec::small().with_value_head()] {
            let params = f32_exact(&init_params(arch, 5));
            save_weights(&path, arch, &params).unwrap();
            let (a, p) = load_weights(&path).unwrap();
            assert_eq!(a, arch);
            assert_eq!(p.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), params.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn header_layout() {
        let arch = ArchSpec::small();
        let bytes = encode_weights(arch, &vec![0.5; arch.param_count()]).unwrap();
        assert_eq!(&bytes[..4], b"EVSP");
        assert_eq!(bytes[4..8], 1u32.to_le_bytes());
        assert_eq!(bytes[8..12], 7u32.to_le_bytes());
        assert_eq!(bytes[12..16], 37u32.to_le_bytes());
        assert_eq!(bytes[36..40], 1u32.to_le_bytes()); // flags: normalization only
        assert_eq!(bytes[40..44], (arch.param_count() as u32).to_le_bytes());
        assert_eq!(bytes[44..48], 0.5f32.to_le_bytes());
        assert_eq!(bytes.len(), 48 + 4 * arch.param_count());
    }

    #[test]
    fn corruption_is_detected_distinctly() {
        let arch = ArchSpec::small();
        let good = encode_weights(arch, &init_params(arch, 1)).unwrap();
        let mut flipped = good.clone();
        flipped[100] ^= 0x10;
        assert!(matches!(decode_weights(&flipped), Err(WeightsError::Checksum { .. })));
        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(matches!(decode_weights(&magic), Err(WeightsError::BadMagic)));
        let mut version = good.clone();
        version[4] = 2;
        assert!(matches!(decode_weights(&version), Err(WeightsError::UnsupportedVersion(2))));
        let mut count = good.clone();
        count[40] ^= 1;
        assert!(matches!(decode_weights(&count), Err(WeightsError::CountMismatch { .. })));
        assert!(matches!(decode_weights(&good[..good.len() - 1]), Err(WeightsError::Length { .. })));
        assert!(matches!(decode_weights(&good[..6]), Err(WeightsError::Length { .. })));
        let mut desc = good.clone();
        desc[12] = 36;
        assert!(matches!(decode_weights(&desc), Err(WeightsError::BadDescriptor(_))));
        assert!(matches!(load_weights(Path::new("/nonexistent/w.evsp")), Err(WeightsError::Io { .. })));
        assert!(matches!(encode_weights(arch, &[0.0; 3]), Err(WeightsError::CountMismatch { .. })));
        let mut huge = init_params(arch, 1);
        huge[7] = 1e300;
        assert!(matches!(encode_weights(arch, &huge), Err(WeightsError::NotRepresentable(7))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn any_single_byte_flip_is_rejected(seed in any::<u64>(), at in 0usize..10_000, bit in 0u8..8) {
            let arch = ArchSpec::small();
            let good = encode_weights(arch, &init_params(arch, seed)).unwrap();
            let mut bad = good.clone();
            let i = at % bad.len();
            bad[i] ^= 1 << bit;
            prop_assert!(decode_weights(&bad).is_err());
        }
    }
}
