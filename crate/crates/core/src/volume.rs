//! CT/PET volumes: raw little-endian `f32` files with a JSON sidecar,
//! bounding-box cropping, intensity normalization, fusion by averaging and
//! center cropping. Voxel `(z, y, x)` sits at `z·H·W + y·W + x`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Extent in voxels along (depth, height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "[usize; 3]", from = "[usize; 3]")]
pub struct Shape3 {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape3 {
    pub const fn new(d: usize, h: usize, w: usize) -> Self {
        Self { d, h, w }
    }

    pub const fn cube(n: usize) -> Self {
        Self::new(n, n, n)
    }

    pub fn len(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn axes(&self) -> [usize; 3] {
        [self.d, self.h, self.w]
    }
}

impl From<[usize; 3]> for Shape3 {
    fn from(a: [usize; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

impl From<Shape3> for [usize; 3] {
    fn from(s: Shape3) -> Self {
        s.axes()
    }
}

impl std::fmt::Display for Shape3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.d, self.h, self.w)
    }
}

/// Sidecar metadata. Spacing and origin are in mm, ordered like the shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeMeta {
    pub shape: Shape3,
    #[serde(default = "unit_spacing")]
    pub spacing: [f64; 3],
    #[serde(default)]
    pub origin: [f64; 3],
}

fn unit_spacing() -> [f64; 3] {
    [1.0; 3]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub shape: Shape3,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub data: Vec<f64>,
}

impl Volume {
    pub fn new(shape: Shape3, spacing: [f64; 3], origin: [f64; 3], data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Input(format!(
                "volume {shape} needs {} voxels, got {}",
                shape.len(),
                data.len()
            )));
        }
        if spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Input(format!(
                "voxel spacing must be positive, got {spacing:?}"
            )));
        }
        Ok(Self {
            shape,
            spacing,
            origin,
            data,
        })
    }

    pub fn zeros(shape: Shape3) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape3, value: f64) -> Self {
        Self {
            shape,
            spacing: unit_spacing(),
            origin: [0.0; 3],
            data: vec![value; shape.len()],
        }
    }

    pub fn meta(&self) -> VolumeMeta {
        VolumeMeta {
            shape: self.shape,
            spacing: self.spacing,
            origin: self.origin,
        }
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape.h + y) * self.shape.w + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(z, y, x)]
    }

    fn with_data(&self, shape: Shape3, data: Vec<f64>) -> Self {
        Self {
            shape,
            spacing: self.spacing,
            origin: self.origin,
            data,
        }
    }
}

/// Half-open voxel box `[min, max)` per axis, ordered (z, y, x).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl BoundingBox {
    pub fn new(min: [usize; 3], max: [usize; 3]) -> Result<Self> {
        if (0..3).any(|a| min[a] >= max[a]) {
            return Err(Error::Input(format!(
                "degenerate bounding box {min:?}..{max:?}"
            )));
        }
        Ok(Self { min, max })
    }

    /// From CSV corner order `x1,y1,z1,x2,y2,z2`.
    pub fn from_xyz(c: [usize; 6]) -> Result<Self> {
        Self::new([c[2], c[1], c[0]], [c[5], c[4], c[3]])
    }

    pub fn extent(&self) -> Shape3 {
        Shape3::new(
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        )
    }

    pub fn check_within(&self, shape: Shape3) -> Result<()> {
        if self.max.iter().zip(shape.axes()).any(|(m, s)| *m > s) {
            return Err(Error::Input(format!(
                "bounding box {:?}..{:?} outside volume {shape}",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

/// Reads `PatientID,x1,y1,z1,x2,y2,z2`.
pub fn load_bounding_boxes(path: impl AsRef<Path>) -> Result<BTreeMap<String, BoundingBox>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut boxes = BTreeMap::new();
    for (i, row) in reader.deserialize().enumerate() {
        let (id, x1, y1, z1, x2, y2, z2): (String, usize, usize, usize, usize, usize, usize) = row?;
        let b = BoundingBox::from_xyz([x1, y1, z1, x2, y2, z2])
            .map_err(|e| Error::Input(format!("bounding box row {}: {e}", i + 1)))?;
        if boxes.insert(id.clone(), b).is_some() {
            return Err(Error::DuplicateId(id));
        }
    }
    Ok(boxes)
}

pub fn save_bounding_boxes(
    path: impl AsRef<Path>,
    boxes: &BTreeMap<String, BoundingBox>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["PatientID", "x1", "y1", "z1", "x2", "y2", "z2"])?;
    for (id, b) in boxes {
        let c = [b.min[2], b.min[1], b.min[0], b.max[2], b.max[1], b.max[0]];
        let mut rec = vec![id.clone()];
        rec.extend(c.iter().map(usize::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Loads raw little-endian `f32` voxels described by a JSON sidecar.
pub fn load_volume(data_path: impl AsRef<Path>, sidecar_path: impl AsRef<Path>) -> Result<Volume> {
    let sidecar = sidecar_path.as_ref();
    let meta: VolumeMeta = serde_json::from_str(&std::fs::read_to_string(sidecar)?)
        .map_err(|e| Error::Input(format!("malformed sidecar {}: {e}", sidecar.display())))?;
    let bytes = std::fs::read(data_path.as_ref())?;
    let expected = 4 * meta.shape.len();
    if bytes.len() != expected {
        return Err(Error::Input(format!(
            "{}: expected {expected} bytes for {} volume, found {}",
            data_path.as_ref().display(),
            meta.shape,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Volume::new(meta.shape, meta.spacing, meta.origin, data)
}

/// Writes voxels as little-endian `f32` plus the sidecar. Values are rounded
/// to single precision.
pub fn save_volume(
    v: &Volume,
    data_path: impl AsRef<Path>,
    sidecar_path: impl AsRef<Path>,
) -> Result<()> {
    let mut bytes = Vec::with_capacity(4 * v.data.len());
    for &x in &v.data {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    std::fs::write(data_path, bytes)?;
    std::fs::write(sidecar_path, serde_json::to_string_pretty(&v.meta())?)?;
    Ok(())
}

/// File locations of one patient's scan pair inside `dir`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientFiles {
    pub ct: PathBuf,
    pub pet: PathBuf,
    pub sidecar: PathBuf,
}

impl PatientFiles {
    pub fn new(dir: impl AsRef<Path>, id: &str) -> Self {
        let dir = dir.as_ref();
        Self {
            ct: dir.join(format!("{id}_ct.f32")),
            pet: dir.join(format!("{id}_pet.f32")),
            sidecar: dir.join(format!("{id}.json")),
        }
    }

    pub fn load(&self) -> Result<(Volume, Volume)> {
        Ok((
            load_volume(&self.ct, &self.sidecar)?,
            load_volume(&self.pet, &self.sidecar)?,
        ))
    }

    pub fn save(&self, ct: &Volume, pet: &Volume) -> Result<()> {
        if ct.meta() != pet.meta() {
            return Err(Error::Input("CT and PET metadata differ".into()));
        }
        save_volume(ct, &self.ct, &self.sidecar)?;
        save_volume(pet, &self.pet, &self.sidecar)
    }
}

/// Start offsets of a `target` window centered in `source`; an odd remainder
/// puts the extra voxel before the window.
fn centered_offset(source: usize, target: usize) -> usize {
    (source - target).div_ceil(2)
}

/// Copies the overlap of `v` shifted by `shift` (source index minus output
/// index) into a zero volume of `out` shape.
fn place(v: &Volume, out: Shape3, shift: [isize; 3]) -> Volume {
    let mut data = vec![0.0; out.len()];
    let src = v.shape.axes();
    let dst = out.axes();
    let range = |a: usize| {
        let lo = (-shift[a]).max(0) as usize;
        let hi = (src[a] as isize - shift[a]).clamp(0, dst[a] as isize) as usize;
        lo..hi.max(lo)
    };
    let (rz, ry, rx) = (range(0), range(1), range(2));
    for z in rz {
        let sz = (z as isize + shift[0]) as usize;
        for y in ry.clone() {
            let sy = (y as isize + shift[1]) as usize;
            let s0 = v.index(sz, sy, (rx.start as isize + shift[2]) as usize);
            let d0 = (z * out.h + y) * out.w + rx.start;
            data[d0..d0 + rx.len()].copy_from_slice(&v.data[s0..s0 + rx.len()]);
        }
    }
    v.with_data(out, data)
}

/// Extracts the box region and zero-pads (or center-crops) it to `target`,
/// keeping the region centered.
pub fn crop_to_box(v: &Volume, b: &BoundingBox, target: Shape3) -> Result<Volume> {
    b.check_within(v.shape)?;
    let ext = b.extent().axes();
    let tgt = target.axes();
    // Output index i reads box index i - pad; pad < 0 crops the box.
    let shift: [isize; 3] = std::array::from_fn(|a| {
        if tgt[a] >= ext[a] {
            -(centered_offset(tgt[a], ext[a]) as isize)
        } else {
            centered_offset(ext[a], tgt[a]) as isize
        }
    });
    let boxed = place(v, b.extent(), b.min.map(|m| m as isize));
    Ok(place(&boxed, target, shift))
}

/// Centered window of `target`, moved by `offset` voxels per axis.
pub fn center_crop(v: &Volume, target: Shape3, offset: [isize; 3]) -> Result<Volume> {
    let src = v.shape.axes();
    let tgt = target.axes();
    let mut start = [0isize; 3];
    for a in 0..3 {
        if tgt[a] > src[a] {
            return Err(Error::Input(format!(
                "crop {target} exceeds volume {}",
                v.shape
            )));
        }
        start[a] = centered_offset(src[a], tgt[a]) as isize + offset[a];
        if start[a] < 0 || start[a] as usize + tgt[a] > src[a] {
            return Err(Error::Input(format!(
                "crop offset {offset:?} leaves volume {}",
                v.shape
            )));
        }
    }
    Ok(place(v, target, start))
}

/// Window start offsets used by [`center_crop`] with zero offset.
pub fn center_crop_offsets(source: Shape3, target: Shape3) -> [usize; 3] {
    let (s, t) = (source.axes(), target.axes());
    std::array::from_fn(|a| centered_offset(s[a], t[a]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizeMethod {
    #[default]
    MinMax,
    ZScore,
}

impl std::str::FromStr for NormalizeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minmax" => Ok(Self::MinMax),
            "zscore" => Ok(Self::ZScore),
            _ => Err(Error::Config(format!(
                "unknown normalization `{s}` (minmax|zscore)"
            ))),
        }
    }
}

/// Min-max maps into `[0, 1]`; z-score uses the population sd. A constant
/// volume maps to zeros under both.
pub fn normalize(v: &Volume, method: NormalizeMethod) -> Volume {
    if v.data.is_empty() {
        return v.clone();
    }
    let data = match method {
        NormalizeMethod::MinMax => {
            let lo = v.data.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                v.data.iter().map(|x| (x - lo) / (hi - lo)).collect()
            } else {
                vec![0.0; v.data.len()]
            }
        }
        NormalizeMethod::ZScore => {
            let n = v.data.len() as f64;
            let mean = v.data.iter().sum::<f64>() / n;
            let sd = (v.data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            if sd > 0.0 {
                v.data.iter().map(|x| (x - mean) / sd).collect()
            } else {
                vec![0.0; v.data.len()]
            }
        }
    };
    v.with_data(v.shape, data)
}

/// Voxelwise mean of two equally shaped volumes.
pub fn fuse(ct: &Volume, pet: &Volume) -> Result<Volume> {
    if ct.shape != pet.shape {
        return Err(Error::Input(format!(
            "cannot fuse {} with {}",
            ct.shape, pet.shape
        )));
    }
    let data = ct
        .data
        .iter()
        .zip(&pet.data)
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    Ok(ct.with_data(ct.shape, data))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Output of the bounding-box step.
    pub box_target: Shape3,
    /// Final network input.
    pub crop: Shape3,
    pub crop_offset: [isize; 3],
    pub method: NormalizeMethod,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            box_target: Shape3::cube(144),
            crop: Shape3::new(50, 80, 80),
            crop_offset: [0; 3],
            method: NormalizeMethod::MinMax,
        }
    }
}

/// Network-ready images of one patient.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedImages {
    pub ct: Volume,
    pub pet: Volume,
    pub fused: Volume,
}

/// Box crop, per-modality normalization, fusion and center crop. Without a
/// box the whole volume is used.
pub fn preprocess(
    ct: &Volume,
    pet: &Volume,
    b: Option<&BoundingBox>,
    cfg: &PreprocessConfig,
) -> Result<PreparedImages> {
    if ct.shape != pet.shape {
        return Err(Error::Input(format!(
            "CT {} and PET {} differ in shape",
            ct.shape, pet.shape
        )));
    }
    let whole = BoundingBox::new([0; 3], ct.shape.axes())?;
    let b = b.unwrap_or(&whole);
    let ct = normalize(&crop_to_box(ct, b, cfg.box_target)?, cfg.method);
    let pet = normalize(&crop_to_box(pet, b, cfg.box_target)?, cfg.method);
    let fused = fuse(&ct, &pet)?;
    Ok(PreparedImages {
        ct: center_crop(&ct, cfg.crop, cfg.crop_offset)?,
        pet: center_crop(&pet, cfg.crop, cfg.crop_offset)?,
        fused: center_crop(&fused, cfg.crop, cfg.crop_offset)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: Shape3) -> Volume {
        let data = (0..shape.len()).map(|i| i as f64).collect();
        Volume::new(shape, [1.0; 3], [0.0; 3], data).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let v = Volume::new(
            Shape3::new(1, 1, 3),
            [1.0; 3],
            [0.0; 3],
            vec![0.0, 5.0, 10.0],
        )
        .unwrap();
        assert_eq!(
            normalize(&v, NormalizeMethod::MinMax).data,
            vec![0.0, 0.5, 1.0]
        );
        let c = Volume::filled(Shape3::cube(2), 7.0);
        assert!(normalize(&c, NormalizeMethod::MinMax)
            .data
            .iter()
            .all(|x| *x == 0.0));
        assert!(normalize(&c, NormalizeMethod::ZScore)
            .data
            .iter()
            .all(|x| *x == 0.0));
    }

    #[test]
    fn fuse_examples() {
        let s = Shape3::cube(3);
        let f = fuse(&Volume::zeros(s), &Volume::filled(s, 1.0)).unwrap();
        assert!(f.data.iter().all(|x| *x == 0.5));
        let v = ramp(s);
        assert_eq!(fuse(&v, &v).unwrap(), v);
        assert!(fuse(&v, &Volume::zeros(Shape3::cube(2))).is_err());
    }

    #[test]
    fn center_crop_default_offsets() {
        assert_eq!(
            center_crop_offsets(Shape3::cube(144), Shape3::new(50, 80, 80)),
            [47, 32, 32]
        );
        assert_eq!(
            center_crop_offsets(Shape3::new(5, 5, 5), Shape3::new(2, 2, 2)),
            [2, 2, 2]
        );
    }

    #[test]
    fn center_crop_keeps_center_voxel() {
        let v = ramp(Shape3::new(9, 7, 11));
        let c = center_crop(&v, Shape3::new(3, 3, 5), [0; 3]).unwrap();
        assert_eq!(c.get(1, 1, 2), v.get(4, 3, 5));
        assert_eq!(center_crop(&v, v.shape, [0; 3]).unwrap(), v);
        assert!(center_crop(&v, Shape3::new(10, 1, 1), [0; 3]).is_err());
        assert!(center_crop(&v, Shape3::new(3, 3, 5), [4, 0, 0]).is_err());
        let moved = center_crop(&v, Shape3::new(3, 3, 5), [1, -1, 2]).unwrap();
        assert_eq!(moved.get(0, 0, 0), v.get(4, 1, 5));
    }

    #[test]
    fn crop_to_box_pads_symmetrically() {
        let v = Volume::filled(Shape3::cube(12), 1.0);
        let b = BoundingBox::new([1, 2, 3], [7, 8, 9]).unwrap();
        let out = crop_to_box(&v, &b, Shape3::cube(10)).unwrap();
        // 6 voxels in a 10 window: 2 zeros each side.
        let line: Vec<f64> = (0..10).map(|x| out.get(5, 5, x)).collect();
        assert_eq!(line, vec![0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn crop_to_box_exact_is_extraction() {
        let v = ramp(Shape3::cube(6));
        let b = BoundingBox::new([1, 1, 2], [4, 5, 6]).unwrap();
        let out = crop_to_box(&v, &b, b.extent()).unwrap();
        assert_eq!(out.get(0, 0, 0), v.get(1, 1, 2));
        assert_eq!(out.get(2, 3, 3), v.get(3, 4, 5));
    }

    #[test]
    fn crop_to_box_larger_box_is_center_cropped() {
        let v = ramp(Shape3::cube(8));
        let b = BoundingBox::new([0; 3], [8; 3]).unwrap();
        assert_eq!(
            crop_to_box(&v, &b, Shape3::cube(4)).unwrap(),
            center_crop(&v, Shape3::cube(4), [0; 3]).unwrap()
        );
    }

    #[test]
    fn invalid_boxes() {
        assert!(BoundingBox::new([1, 1, 1], [1, 2, 2]).is_err());
        let b = BoundingBox::new([0; 3], [5, 5, 5]).unwrap();
        assert!(crop_to_box(&Volume::zeros(Shape3::cube(4)), &b, Shape3::cube(5)).is_err());
    }

    #[test]
    fn csv_box_order_is_xyz() {
        let b = BoundingBox::from_xyz([1, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(b.min, [3, 2, 1]);
        assert_eq!(b.max, [6, 5, 4]);
    }
}
