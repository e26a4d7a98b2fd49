//! Scalar volumes and their on-disk container.
//!
//! The container is a MetaImage-style file: `key = value` header lines ending
//! with `ElementDataFile = LOCAL`, followed directly by the raw little-endian
//! payload. As in MetaImage, `DimSize` and `ElementSpacing` list the x axis
//! first; the payload is z-major (x varies fastest).
//!
//! ```text
//! ObjectType = Image
//! NDims = 3
//! DimSize = 64 64 64
//! ElementSpacing = 0.7 0.7 1
//! ElementType = float32
//! VolumeId = phantom_000
//! ElementDataFile = LOCAL
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::VolumeError;

/// Largest payload accepted by [`load_volume`] (4 GiB).
const MAX_PAYLOAD_BYTES: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementType {
    Int16,
    Float32,
}

impl ElementType {
    fn size(self) -> usize {
        match self {
            ElementType::Int16 => 2,
            ElementType::Float32 => 4,
        }
    }

    fn header_name(self) -> &'static str {
        match self {
            ElementType::Int16 => "int16",
            ElementType::Float32 => "float32",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "int16" | "MET_SHORT" => Some(ElementType::Int16),
            "float32" | "MET_FLOAT" => Some(ElementType::Float32),
            _ => None,
        }
    }
}

/// A 3D scalar grid indexed `(z, y, x)` with physical spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub id: String,
    shape: [usize; 3],
    spacing_mm: [f64; 3],
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(id: impl Into<String>, shape: [usize; 3], spacing_mm: [f64; 3], voxels: Vec<f32>) -> Result<Self, VolumeError> {
        if shape.contains(&0) {
            return Err(VolumeError::Invalid(format!("zero dimension in {shape:?}")));
        }
        if spacing_mm.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(VolumeError::Invalid(format!("spacing must be positive, got {spacing_mm:?}")));
        }
        let n = checked_len(shape)?;
        if voxels.len() != n {
            return Err(VolumeError::Invalid(format!("{} voxels for shape {shape:?}", voxels.len())));
        }
        if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::Invalid(format!("non-finite voxel at flat index {i}")));
        }
        Ok(Self {
            id: id.into(),
            shape,
            spacing_mm,
            voxels,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn index(&self, v: [usize; 3]) -> usize {
        (v[0] * self.shape[1] + v[1]) * self.shape[2] + v[2]
    }

    pub fn get(&self, v: [usize; 3]) -> f32 {
        self.voxels[self.index(v)]
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }
}

fn checked_len(shape: [usize; 3]) -> Result<usize, VolumeError> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(VolumeError::DimensionOverflow(shape.map(|d| d as u64)))
}

pub fn save_volume(volume: &Volume, path: &Path) -> Result<(), VolumeError> {
    save_volume_as(volume, path, ElementType::Float32)
}

/// Writes `volume`; `Int16` requires every voxel to be an integer in range.
pub fn save_volume_as(volume: &Volume, path: &Path, element: ElementType) -> Result<(), VolumeError> {
    let [d, h, w] = volume.shape;
    let [sz, sy, sx] = volume.spacing_mm;
    if volume.id.contains('\n') {
        return Err(VolumeError::Invalid("volume id contains a newline".into()));
    }
    let mut out = Vec::with_capacity(256 + volume.len() * element.size());
    write!(
        out,
        "ObjectType = Image\nNDims = 3\nDimSize = {w} {h} {d}\nElementSpacing = {sx} {sy} {sz}\nElementType = {}\nVolumeId = {}\nElementDataFile = LOCAL\n",
        element.header_name(),
        volume.id
    )?;
    match element {
        ElementType::Float32 => {
            for v in &volume.voxels {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        ElementType::Int16 => {
            for v in &volume.voxels {
                if v.fract() != 0.0 || *v < i16::MIN as f32 || *v > i16::MAX as f32 {
                    return Err(VolumeError::Invalid(format!("voxel {v} is not representable as int16")));
                }
                out.extend_from_slice(&(*v as i16).to_le_bytes());
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<Volume, VolumeError> {
    let bytes = fs::read(path)?;
    parse_volume(&bytes)
}

pub(crate) fn parse_volume(bytes: &[u8]) -> Result<Volume, VolumeError> {
    let mut pos = 0usize;
    let mut ndims = None;
    let mut dims: Option<Vec<u64>> = None;
    let mut spacing: Option<Vec<f64>> = None;
    let mut element = None;
    let mut id = String::new();
    loop {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| VolumeError::MalformedHeader("missing ElementDataFile line".into()))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end])
            .map_err(|_| VolumeError::MalformedHeader("header is not UTF-8".into()))?
            .trim_end_matches('\r');
        pos += end + 1;
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| VolumeError::MalformedHeader(format!("expected `key = value`, got {line:?}")))?;
        match key {
            "NDims" => ndims = Some(value.to_string()),
            "DimSize" => dims = Some(parse_list(key, value)?),
            "ElementSpacing" => spacing = Some(parse_list(key, value)?),
            "ElementType" => {
                element = Some(
                    ElementType::parse(value).ok_or_else(|| VolumeError::UnsupportedElementType(value.to_string()))?,
                )
            }
            "VolumeId" => id = value.to_string(),
            "ElementDataFile" => {
                if value != "LOCAL" {
                    return Err(VolumeError::MalformedHeader(format!("external data file {value:?} is not supported")));
                }
                break;
            }
            _ => {}
        }
    }
    if ndims.as_deref() != Some("3") {
        return Err(VolumeError::MalformedHeader(format!("NDims must be 3, got {ndims:?}")));
    }
    let dims = dims.ok_or_else(|| VolumeError::MalformedHeader("missing DimSize".into()))?;
    let spacing = spacing.ok_or_else(|| VolumeError::MalformedHeader("missing ElementSpacing".into()))?;
    let element = element.ok_or_else(|| VolumeError::MalformedHeader("missing ElementType".into()))?;
    if dims.len() != 3 || spacing.len() != 3 {
        return Err(VolumeError::MalformedHeader("DimSize and ElementSpacing need 3 values".into()));
    }
    // header order is x y z
    let shape_u64 = [dims[2], dims[1], dims[0]];
    if shape_u64.contains(&0) {
        return Err(VolumeError::MalformedHeader("zero dimension".into()));
    }
    let payload_bytes = shape_u64
        .iter()
        .try_fold(element.size() as u64, |acc, &d| acc.checked_mul(d))
        .filter(|&b| b <= MAX_PAYLOAD_BYTES)
        .ok_or(VolumeError::DimensionOverflow(shape_u64))?;
    let shape = shape_u64.map(|d| d as usize);
    let payload = &bytes[pos..];
    let expected = payload_bytes as usize;
    if payload.len() < expected {
        return Err(VolumeError::Truncated {
            expected,
            got: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(VolumeError::TrailingData(payload.len() - expected));
    }
    let voxels: Vec<f32> = match element {
        ElementType::Float32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        ElementType::Int16 => payload
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
            .collect(),
    };
    Volume::new(id, shape, [spacing[2], spacing[1], spacing[0]], voxels)
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, VolumeError> {
    value
        .split_whitespace()
        .map(|t| t.parse::<T>())
        .collect::<Result<Vec<T>, _>>()
        .map_err(|_| VolumeError::MalformedHeader(format!("cannot parse {key} = {value:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Volume {
        let voxels = (0..4 * 3 * 2).map(|i| i as f32 * 0.25 - 1.0).collect();
        Volume::new("vol-a", [4, 3, 2], [1.0, 0.7, 0.7], voxels).unwrap()
    }

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.mha");
        let v = sample();
        save_volume(&v, &p).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.spacing_mm(), [1.0, 0.7, 0.7]);
    }

    #[test]
    fn int16_payload() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.mha");
        let v = Volume::new("ints", [2, 2, 2], [1.0; 3], vec![-1000.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 400.0]).unwrap();
        save_volume_as(&v, &p, ElementType::Int16).unwrap();
        assert_eq!(load_volume(&p).unwrap(), v);
        assert!(save_volume_as(&sample(), &p, ElementType::Int16).is_err());
    }

    #[test]
    fn truncated_payload_is_reported() {
        let mut bytes = b"NDims = 3\nDimSize = 4 4 4\nElementSpacing = 1 1 1\nElementType = float32\nElementDataFile = LOCAL\n".to_vec();
        bytes.extend(std::iter::repeat_n(0u8, 63 * 4));
        assert_eq!(
            parse_volume(&bytes),
            Err(VolumeError::Truncated {
                expected: 256,
                got: 252
            })
        );
    }

    #[test]
    fn header_errors_are_distinct() {
        let bad = b"NDims = 3\nDimSize = 4 4\nElementSpacing = 1 1 1\nElementType = float32\nElementDataFile = LOCAL\n";
        assert!(matches!(parse_volume(bad), Err(VolumeError::MalformedHeader(_))));
        let huge = b"NDims = 3\nDimSize = 4000000000 4000000000 4000000000\nElementSpacing = 1 1 1\nElementType = float32\nElementDataFile = LOCAL\n";
        assert!(matches!(parse_volume(huge), Err(VolumeError::DimensionOverflow(_))));
        let ty = b"NDims = 3\nDimSize = 1 1 1\nElementSpacing = 1 1 1\nElementType = uint8\nElementDataFile = LOCAL\n";
        assert!(matches!(parse_volume(ty), Err(VolumeError::UnsupportedElementType(_))));
        let no_end = b"NDims = 3\nDimSize = 1 1 1\n";
        assert!(matches!(parse_volume(no_end), Err(VolumeError::MalformedHeader(_))));
    }

    #[test]
    fn invariants_are_enforced() {
        assert!(Volume::new("x", [0, 1, 1], [1.0; 3], vec![]).is_err());
        assert!(Volume::new("x", [1, 1, 1], [1.0, 0.0, 1.0], vec![0.0]).is_err());
        assert!(Volume::new("x", [1, 1, 1], [1.0; 3], vec![f32::NAN]).is_err());
    }
}
