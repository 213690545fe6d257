//! The TensorFile container: magic `UGTF`, u16 version 1, u8 dtype
//! (1 = f32 little-endian), u8 rank, rank × u32 little-endian dims, then the
//! row-major payload.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::vmf::FeatureMap;

const MAGIC: &[u8; 4] = b"UGTF";
const VERSION: u16 = 1;
const DTYPE_F32: u8 = 1;
const HEADER_FIXED: usize = 8;

/// Norm tolerance for unit vectors stored in single precision.
pub const UNIT_READ_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.len() > u8::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "rank {} exceeds 255",
                dims.len()
            )));
        }
        if dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::InvalidArgument("dimension exceeds u32".into()));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::DimMismatch(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor value".into()));
        }
        Ok(Self { dims, data })
    }

    /// An H×W×D tensor holding the map's vectors.
    pub fn from_feature_map(fm: &FeatureMap) -> Self {
        Self {
            dims: vec![fm.height(), fm.width(), fm.dim()],
            data: fm.as_slice().iter().map(|&v| v as f32).collect(),
        }
    }

    /// Interprets an H×W×D tensor as a feature map.
    pub fn to_feature_map(&self) -> Result<FeatureMap> {
        match self.dims[..] {
            [h, w, d] => FeatureMap::from_f32(h, w, d, &self.data, UNIT_READ_TOL),
            _ => Err(Error::DimMismatch(format!(
                "feature maps are H×W×D, got dims {:?}",
                self.dims
            ))),
        }
    }

    /// Rows of an N×D tensor.
    pub fn rows(&self) -> Result<Vec<Vec<f64>>> {
        match self.dims[..] {
            [_, d] if d > 0 => Ok(self
                .data
                .chunks_exact(d)
                .map(|r| r.iter().map(|&v| f64::from(v)).collect())
                .collect()),
            _ => Err(Error::DimMismatch(format!(
                "expected an N×D tensor, got dims {:?}",
                self.dims
            ))),
        }
    }
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_FIXED + 4 * t.dims.len() + 4 * t.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(t.dims.len() as u8);
    for &d in &t.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn parse_header(bytes: &[u8]) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < HEADER_FIXED {
        return Err(Error::Format("truncated tensor header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported tensor version {version}"
        )));
    }
    if bytes[6] != DTYPE_F32 {
        return Err(Error::Format(format!(
            "unsupported dtype code {}",
            bytes[6]
        )));
    }
    let rank = bytes[7] as usize;
    let header = HEADER_FIXED + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Format("truncated tensor dims".into()));
    }
    let dims = bytes[HEADER_FIXED..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    Ok((dims, header))
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let (dims, header) = parse_header(bytes)?;
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("dims product overflows".into()))?;
    let payload = &bytes[header..];
    if Some(payload.len()) != count.checked_mul(4) {
        return Err(Error::Format(format!(
            "dims {dims:?} need {count} values but the payload holds {} bytes",
            payload.len()
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("tensor payload".into()));
    }
    Ok(Tensor { dims, data })
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = super::read_bytes(path)?;
    decode_tensor(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Dims from the header alone.
pub fn read_tensor_dims(path: &Path) -> Result<Vec<usize>> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = [0u8; HEADER_FIXED];
    f.read_exact(&mut head)
        .map_err(|_| Error::Format(format!("{}: truncated tensor header", path.display())))?;
    let rank = head[7] as usize;
    let mut rest = vec![0u8; 4 * rank];
    f.read_exact(&mut rest)
        .map_err(|_| Error::Format(format!("{}: truncated tensor dims", path.display())))?;
    let mut all = head.to_vec();
    all.extend(rest);
    Ok(parse_header(&all)?.0)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    super::write_atomic(path, &encode_tensor(t))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tensor {
        Tensor::new(
            vec![2, 3, 4],
            (0..24).map(|i| i as f32 * 0.25 - 3.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = encode_tensor(&sample());
        assert_eq!(&bytes[..4], b"UGTF");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(bytes[6], 1);
        assert_eq!(bytes[7], 3);
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(bytes.len(), 8 + 12 + 24 * 4);
        assert_eq!(&bytes[20..24], &(-3.0f32).to_le_bytes());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let t = sample();
        let bytes = encode_tensor(&t);
        let back = decode_tensor(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(encode_tensor(&back), bytes);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_tensor(&sample());
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_tensor(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn bad_version_and_dtype() {
        let mut bytes = encode_tensor(&sample());
        bytes[4] = 2;
        assert!(matches!(decode_tensor(&bytes), Err(Error::Format(_))));
        let mut bytes = encode_tensor(&sample());
        bytes[6] = 2;
        assert!(matches!(decode_tensor(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn dims_mismatch_and_truncation() {
        let mut bytes = encode_tensor(&sample());
        bytes[8..12].copy_from_slice(&3u32.to_le_bytes());
        assert!(matches!(decode_tensor(&bytes), Err(Error::Format(_))));
        let bytes = encode_tensor(&sample());
        assert!(matches!(
            decode_tensor(&bytes[..bytes.len() - 1]),
            Err(Error::Format(_))
        ));
        assert!(matches!(decode_tensor(&bytes[..10]), Err(Error::Format(_))));
        assert!(matches!(decode_tensor(&bytes[..5]), Err(Error::Format(_))));
    }

    #[test]
    fn non_finite_values() {
        let mut bytes = encode_tensor(&sample());
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_tensor(&bytes), Err(Error::NonFinite(_))));
        assert!(Tensor::new(vec![1], vec![f32::INFINITY]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0]).is_err());
    }

    #[test]
    fn feature_map_views() {
        let t = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.6, 0.8]).unwrap();
        let fm = t.to_feature_map().unwrap();
        let v = fm.vector(1);
        assert!((v[0] - 0.6).abs() < 1e-7 && (v[1] - 0.8).abs() < 1e-7);
        assert!((crate::math::norm(v) - 1.0).abs() < 1e-15);
        assert!(Tensor::new(vec![1, 2], vec![2.0, 0.0])
            .unwrap()
            .to_feature_map()
            .is_err());
        assert!(Tensor::new(vec![1, 1, 2], vec![2.0, 0.0])
            .unwrap()
            .to_feature_map()
            .is_err());
        assert!(t.rows().is_err());
        assert_eq!(
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])
                .unwrap()
                .rows()
                .unwrap()[1],
            vec![0.0, 1.0]
        );
    }
}
