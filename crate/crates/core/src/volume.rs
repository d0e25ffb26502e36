//! 3D volumes with voxel-to-world geometry, and NIfTI-1 load/save.
//!
//! Intensities are held as `f32` regardless of the on-disk datatype. The
//! affine maps voxel indices `(i, j, k, 1)` to world millimetres; spacing is
//! always the column norms of its upper-left 3x3 block.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix4, Vector4};
use ndarray::{Array3, ArrayView2, Axis};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Modality {
    T2,
    Adc,
    MaskPz,
    MaskCg,
    MaskGland,
    /// Lesion ground truth written by the phantom generator.
    MaskLesion,
}

impl Modality {
    pub fn is_mask(self) -> bool {
        !matches!(self, Modality::T2 | Modality::Adc)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::T2 => "T2",
            Modality::Adc => "ADC",
            Modality::MaskPz => "MASK_PZ",
            Modality::MaskCg => "MASK_CG",
            Modality::MaskGland => "MASK_GLAND",
            Modality::MaskLesion => "MASK_LESION",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "T2" => Modality::T2,
            "ADC" => Modality::Adc,
            "MASK_PZ" => Modality::MaskPz,
            "MASK_CG" => Modality::MaskCg,
            "MASK_GLAND" => Modality::MaskGland,
            "MASK_LESION" => Modality::MaskLesion,
            other => return Err(Error::InvalidVolume(format!("unknown modality {other:?}"))),
        })
    }
}

/// A validated 3D scalar volume. Immutable once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageVolume {
    data: Array3<f32>,
    spacing: [f64; 3],
    affine: Matrix4<f64>,
    inverse: Matrix4<f64>,
    modality: Modality,
    patient_id: String,
    slice_axis: usize,
}

impl ImageVolume {
    /// Builds a volume, deriving spacing from the affine's column norms.
    /// The slice axis defaults to the axis with the largest spacing (the last
    /// one on ties).
    pub fn new(
        data: Array3<f32>,
        affine: Matrix4<f64>,
        modality: Modality,
        patient_id: impl Into<String>,
    ) -> Result<Self> {
        if data.shape().iter().any(|&d| d == 0) {
            return Err(Error::InvalidVolume(format!(
                "every dimension must be >= 1, got {:?}",
                data.shape()
            )));
        }
        let inverse = affine
            .try_inverse()
            .filter(|m| m.iter().all(|v| v.is_finite()))
            .ok_or_else(|| Error::NonInvertibleAffine(format!("{affine:?}")))?;
        let mut spacing = [0.0; 3];
        for (axis, s) in spacing.iter_mut().enumerate() {
            *s = affine.fixed_view::<3, 1>(0, axis).norm();
            if !(*s > 0.0) || !s.is_finite() {
                return Err(Error::NonInvertibleAffine(format!(
                    "axis {axis} has zero spacing"
                )));
            }
        }
        if modality.is_mask() {
            if let Some(bad) = data.iter().find(|&&v| v != 0.0 && v != 1.0) {
                return Err(Error::InvalidVolume(format!(
                    "mask modality {modality} contains value {bad}"
                )));
            }
        }
        let slice_axis = largest_axis(&spacing);
        Ok(Self {
            data,
            spacing,
            affine,
            inverse,
            modality,
            patient_id: patient_id.into(),
            slice_axis,
        })
    }

    /// Axis-aligned volume with origin at world zero.
    pub fn from_spacing(
        data: Array3<f32>,
        spacing: [f64; 3],
        modality: Modality,
        patient_id: impl Into<String>,
    ) -> Result<Self> {
        let affine = Matrix4::from_diagonal(&Vector4::new(spacing[0], spacing[1], spacing[2], 1.0));
        Self::new(data, affine, modality, patient_id)
    }

    pub fn with_slice_axis(mut self, axis: usize) -> Result<Self> {
        if axis > 2 {
            return Err(Error::InvalidVolume(format!("slice axis {axis} out of range")));
        }
        self.slice_axis = axis;
        Ok(self)
    }

    pub fn with_modality(self, modality: Modality) -> Result<Self> {
        let slice_axis = self.slice_axis;
        Self::new(self.data, self.affine, modality, self.patient_id)?.with_slice_axis(slice_axis)
    }

    pub fn with_patient_id(mut self, id: impl Into<String>) -> Self {
        self.patient_id = id.into();
        self
    }

    /// Same geometry and metadata, new voxel data.
    pub fn with_data(&self, data: Array3<f32>) -> Result<Self> {
        if data.shape() != self.data.shape() {
            return Err(Error::GridMismatch(format!(
                "{:?} vs {:?}",
                data.shape(),
                self.data.shape()
            )));
        }
        Self::new(data, self.affine, self.modality, self.patient_id.clone())?
            .with_slice_axis(self.slice_axis)
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn affine(&self) -> &Matrix4<f64> {
        &self.affine
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn patient_id(&self) -> &str {
        &self.patient_id
    }

    pub fn slice_axis(&self) -> usize {
        self.slice_axis
    }

    pub fn num_slices(&self) -> usize {
        self.data.len_of(Axis(self.slice_axis))
    }

    /// 2D view of slice `index` along the slice axis. The remaining axes keep
    /// their original order: rows are the lower in-plane axis.
    pub fn slice(&self, index: usize) -> ArrayView2<'_, f32> {
        self.data.index_axis(Axis(self.slice_axis), index)
    }

    /// Shape of one slice as `(rows, cols)`.
    pub fn slice_shape(&self) -> (usize, usize) {
        let s = self.shape();
        let [a, b] = in_plane_axes(self.slice_axis);
        (s[a], s[b])
    }

    pub fn voxel_to_world(&self, index: [f64; 3]) -> [f64; 3] {
        let v = self.affine * Vector4::new(index[0], index[1], index[2], 1.0);
        [v[0], v[1], v[2]]
    }

    pub fn world_to_voxel(&self, point: [f64; 3]) -> [f64; 3] {
        let v = self.inverse * Vector4::new(point[0], point[1], point[2], 1.0);
        [v[0], v[1], v[2]]
    }

    pub(crate) fn inverse_affine(&self) -> &Matrix4<f64> {
        &self.inverse
    }

    /// True when both volumes share shape and affine (within `tol`).
    pub fn same_grid(&self, other: &ImageVolume, tol: f64) -> bool {
        self.shape() == other.shape()
            && self
                .affine
                .iter()
                .zip(other.affine.iter())
                .all(|(a, b)| (a - b).abs() <= tol * (1.0 + a.abs()))
    }
}

/// `world_to_voxel` as a free function.
pub fn world_to_voxel(vol: &ImageVolume, point: [f64; 3]) -> [f64; 3] {
    vol.world_to_voxel(point)
}

pub(crate) fn in_plane_axes(slice_axis: usize) -> [usize; 2] {
    match slice_axis {
        0 => [1, 2],
        1 => [0, 2],
        _ => [0, 1],
    }
}

fn largest_axis(spacing: &[f64; 3]) -> usize {
    let mut best = 0;
    for axis in 1..3 {
        if spacing[axis] >= spacing[best] {
            best = axis;
        }
    }
    best
}

const DESCRIP_PREFIX: &str = "mpmri";

fn encode_descrip(vol: &ImageVolume) -> Vec<u8> {
    let text = format!(
        "{DESCRIP_PREFIX};{};{};{}",
        vol.modality, vol.slice_axis, vol.patient_id
    );
    let mut bytes = text.into_bytes();
    bytes.resize(80, 0);
    bytes
}

fn decode_descrip(raw: &[u8]) -> Option<(Modality, usize, String)> {
    let end = raw.iter().position(|&b| b == 0).unwrap_or(raw.len());
    let text = std::str::from_utf8(&raw[..end]).ok()?;
    let mut parts = text.splitn(4, ';');
    if parts.next()? != DESCRIP_PREFIX {
        return None;
    }
    let modality = parts.next()?.parse().ok()?;
    let axis = parts.next()?.parse().ok()?;
    let patient = parts.next()?.to_string();
    Some((modality, axis, patient))
}

/// Header fields are f32; widening through the shortest decimal form gives
/// back e.g. 3.6 rather than 3.5999999046.
fn widen(v: f32) -> f64 {
    format!("{v}").parse().unwrap_or(v as f64)
}

fn header_affine(h: &NiftiHeader) -> Matrix4<f64> {
    if h.sform_code > 0 {
        let rows = [h.srow_x, h.srow_y, h.srow_z];
        let mut m = Matrix4::identity();
        for (r, row) in rows.iter().enumerate() {
            for c in 0..4 {
                m[(r, c)] = widen(row[c]);
            }
        }
        m
    } else if h.qform_code > 0 {
        qform_affine(h)
    } else {
        Matrix4::from_diagonal(&Vector4::new(
            widen(h.pixdim[1]),
            widen(h.pixdim[2]),
            widen(h.pixdim[3]),
            1.0,
        ))
    }
}

fn qform_affine(h: &NiftiHeader) -> Matrix4<f64> {
    let (b, c, d) = (h.quatern_b as f64, h.quatern_c as f64, h.quatern_d as f64);
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    let qfac = if h.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
    let (sx, sy, sz) = (widen(h.pixdim[1]), widen(h.pixdim[2]), widen(h.pixdim[3]) * qfac);
    let r = [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ];
    let offset = [widen(h.quatern_x), widen(h.quatern_y), widen(h.quatern_z)];
    let mut m = Matrix4::identity();
    for i in 0..3 {
        m[(i, 0)] = r[i][0] * sx;
        m[(i, 1)] = r[i][1] * sy;
        m[(i, 2)] = r[i][2] * sz;
        m[(i, 3)] = offset[i];
    }
    m
}

/// Loads a NIfTI-1 volume. Modality, patient id and slice axis are restored
/// from the header description when it was written by [`save_volume`];
/// otherwise the volume is tagged T2 with an empty patient id.
pub fn load_volume(path: &Path) -> Result<ImageVolume> {
    load_inner(path, None)
}

/// Loads a NIfTI-1 volume and enforces the invariants of `modality`
/// (e.g. masks must be binary).
pub fn load_volume_as(path: &Path, modality: Modality) -> Result<ImageVolume> {
    load_inner(path, Some(modality))
}

fn load_inner(path: &Path, modality: Option<Modality>) -> Result<ImageVolume> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| Error::MalformedHeader(format!("{}: {e}", path.display())))?;
    let header = obj.header().clone();
    if header.dim[0] < 3 || header.dim[1..4].iter().any(|&d| d == 0) {
        return Err(Error::MalformedHeader(format!(
            "expected a 3D volume, dim = {:?}",
            header.dim
        )));
    }
    if header.dim[0] > 3 && header.dim[4..=header.dim[0] as usize].iter().any(|&d| d > 1) {
        return Err(Error::MalformedHeader("4D series are not supported".into()));
    }
    let affine = header_affine(&header);
    let raw = obj
        .into_volume()
        .into_ndarray::<f32>()
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let shape = [
        header.dim[1] as usize,
        header.dim[2] as usize,
        header.dim[3] as usize,
    ];
    // Logical (row-major) iteration order, independent of memory layout.
    let flat: Vec<f32> = raw.iter().copied().collect();
    let data = Array3::from_shape_vec(shape, flat)
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let stored = decode_descrip(&header.descrip);
    let (stored_modality, stored_axis, patient) = match stored {
        Some((m, a, p)) => (Some(m), Some(a), p),
        None => (None, None, String::new()),
    };
    let modality = modality.or(stored_modality).unwrap_or(Modality::T2);
    let vol = ImageVolume::new(data, affine, modality, patient)?;
    match stored_axis {
        Some(axis) if axis < 3 => vol.with_slice_axis(axis),
        _ => Ok(vol),
    }
}

/// Writes `vol` as NIfTI-1 (`.nii` or `.nii.gz`, chosen by extension) with a
/// float32 payload and an sform affine.
pub fn save_volume(vol: &ImageVolume, path: &Path) -> Result<()> {
    let mut header = NiftiHeader::default();
    header.pixdim = [
        1.0,
        vol.spacing[0] as f32,
        vol.spacing[1] as f32,
        vol.spacing[2] as f32,
        1.0,
        1.0,
        1.0,
        1.0,
    ];
    header.xyzt_units = 2; // millimetres
    header.sform_code = 1;
    header.qform_code = 0;
    let a = &vol.affine;
    header.srow_x = [a[(0, 0)] as f32, a[(0, 1)] as f32, a[(0, 2)] as f32, a[(0, 3)] as f32];
    header.srow_y = [a[(1, 0)] as f32, a[(1, 1)] as f32, a[(1, 2)] as f32, a[(1, 3)] as f32];
    header.srow_z = [a[(2, 0)] as f32, a[(2, 1)] as f32, a[(2, 2)] as f32, a[(2, 3)] as f32];
    header.descrip = encode_descrip(vol);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        if !parent.is_dir() {
            return Err(Error::unwritable(path, "parent directory does not exist"));
        }
    }
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&vol.data)
        .map_err(|e| Error::unwritable(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;

    fn ramp(shape: (usize, usize, usize)) -> Array3<f32> {
        Array3::from_shape_fn(shape, |(i, j, k)| (i * 100 + j * 10 + k) as f32 * 0.25 - 3.0)
    }

    #[test]
    fn rejects_zero_sized_dimension() {
        let err = ImageVolume::from_spacing(Array3::zeros((0, 2, 2)), [1.0; 3], Modality::T2, "p");
        assert!(matches!(err, Err(Error::InvalidVolume(_))));
    }

    #[test]
    fn mask_with_value_two_is_rejected() {
        let mut data = Array3::zeros((3, 3, 3));
        data[[1, 1, 1]] = 2.0;
        let err = ImageVolume::from_spacing(data, [1.0; 3], Modality::MaskPz, "p");
        assert!(matches!(err, Err(Error::InvalidVolume(_))));
    }

    #[test]
    fn slice_axis_defaults_to_thickest() {
        let v = ImageVolume::from_spacing(Array3::zeros((4, 4, 4)), [0.5, 0.5, 3.6], Modality::T2, "p")
            .unwrap();
        assert_eq!(v.slice_axis(), 2);
        let v = ImageVolume::from_spacing(Array3::zeros((4, 4, 4)), [3.0, 0.5, 0.5], Modality::T2, "p")
            .unwrap();
        assert_eq!(v.slice_axis(), 0);
    }

    #[test]
    fn world_to_voxel_identity_and_scaling() {
        let v = ImageVolume::from_spacing(Array3::zeros((2, 2, 2)), [1.0; 3], Modality::T2, "p").unwrap();
        assert_eq!(v.world_to_voxel([3.0, 4.0, 5.0]), [3.0, 4.0, 5.0]);
        let v = ImageVolume::from_spacing(Array3::zeros((2, 2, 2)), [2.0; 3], Modality::T2, "p").unwrap();
        let idx = world_to_voxel(&v, [4.0, 4.0, 4.0]);
        for c in idx {
            assert_abs_diff_eq!(c, 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_affine_is_not_invertible() {
        let mut m = Matrix4::zeros();
        m[(3, 3)] = 1.0;
        let err = ImageVolume::new(Array3::zeros((2, 2, 2)), m, Modality::T2, "p");
        assert!(matches!(err, Err(Error::NonInvertibleAffine(_))));
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut affine = Matrix4::identity();
        affine[(0, 0)] = 0.0;
        affine[(0, 1)] = -0.5;
        affine[(1, 0)] = 0.5;
        affine[(1, 1)] = 0.0;
        affine[(2, 2)] = 3.6;
        affine[(0, 3)] = 12.25;
        affine[(1, 3)] = -7.5;
        affine[(2, 3)] = 1.0;
        let vol = ImageVolume::new(ramp((5, 4, 3)), affine, Modality::Adc, "P007").unwrap();
        for name in ["a.nii", "b.nii.gz"] {
            let path = dir.path().join(name);
            save_volume(&vol, &path).unwrap();
            let back = load_volume(&path).unwrap();
            assert_eq!(back.data(), vol.data());
            assert_eq!(back.modality(), Modality::Adc);
            assert_eq!(back.patient_id(), "P007");
            assert_eq!(back.slice_axis(), vol.slice_axis());
            for (a, b) in back.affine().iter().zip(vol.affine().iter()) {
                assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn identity_spacing_written_to_pixdim() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("unit.nii");
        let vol = ImageVolume::from_spacing(ramp((3, 3, 3)), [1.0; 3], Modality::T2, "p").unwrap();
        save_volume(&vol, &path).unwrap();
        let obj = ReaderOptions::new().read_file(&path).unwrap();
        assert_eq!(&obj.header().pixdim[1..4], &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn missing_file_and_unwritable_path() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.nii");
        assert!(matches!(load_volume(&missing), Err(Error::MissingFile(_))));
        let vol = ImageVolume::from_spacing(ramp((2, 2, 2)), [1.0; 3], Modality::T2, "p").unwrap();
        let bad = dir.path().join("no_such_dir").join("x.nii");
        assert!(matches!(save_volume(&vol, &bad), Err(Error::UnwritablePath { .. })));
    }

    #[test]
    fn bad_magic_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("good.nii");
        let vol = ImageVolume::from_spacing(ramp((2, 2, 2)), [1.0; 3], Modality::T2, "p").unwrap();
        save_volume(&vol, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[344..348].copy_from_slice(b"xyz\0");
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_volume(&path), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn load_as_mask_rejects_non_binary() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.nii");
        let mut data = Array3::zeros((3, 3, 3));
        data[[0, 0, 0]] = 2.0;
        let vol = ImageVolume::from_spacing(data, [1.0; 3], Modality::T2, "p").unwrap();
        save_volume(&vol, &path).unwrap();
        assert!(matches!(
            load_volume_as(&path, Modality::MaskPz),
            Err(Error::InvalidVolume(_))
        ));
    }

    proptest! {
        #[test]
        fn world_voxel_round_trip(
            cols in prop::collection::vec(-3.0f64..3.0, 9),
            origin in prop::collection::vec(-100.0f64..100.0, 3),
            point in prop::collection::vec(-50.0f64..50.0, 3),
        ) {
            let mut a = Matrix4::identity();
            for r in 0..3 {
                for c in 0..3 {
                    a[(r, c)] = cols[r * 3 + c] + if r == c { 4.0 } else { 0.0 };
                }
                a[(r, 3)] = origin[r];
            }
            prop_assume!(a.determinant().abs() > 1e-3);
            let v = ImageVolume::new(Array3::zeros((2, 2, 2)), a, Modality::T2, "p").unwrap();
            let p = [point[0], point[1], point[2]];
            let back = v.voxel_to_world(v.world_to_voxel(p));
            for k in 0..3 {
                prop_assert!((back[k] - p[k]).abs() < 1e-9);
            }
        }
    }
}
