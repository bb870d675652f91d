//! Minimal NIfTI-1 single-file (`.nii`, `.nii.gz`) reader and writer.
//!
//! Only little-endian 3D scalar images are handled. The spatial transform is
//! taken from the qform when `qform_code > 0`, otherwise from the sform when
//! `sform_code > 0`, otherwise from `pixdim` alone. Files written here carry
//! the affine in the sform with `qform_code = 0`, so a save/load cycle
//! reproduces any affine whose entries are representable in `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion};

use super::{Channel, Grid, LabelVolume, Volume3D};
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC_SINGLE: [u8; 4] = *b"n+1\0";

/// On-disk voxel type.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataType {
    Uint8,
    Int16,
    Int32,
    Float32,
    Float64,
}

impl DataType {
    fn from_code(code: i16) -> Result<Self> {
        Ok(match code {
            2 => DataType::Uint8,
            4 => DataType::Int16,
            8 => DataType::Int32,
            16 => DataType::Float32,
            64 => DataType::Float64,
            other => return Err(Error::UnsupportedDatatype(other)),
        })
    }

    fn code(self) -> i16 {
        match self {
            DataType::Uint8 => 2,
            DataType::Int16 => 4,
            DataType::Int32 => 8,
            DataType::Float32 => 16,
            DataType::Float64 => 64,
        }
    }

    fn bytes(self) -> usize {
        match self {
            DataType::Uint8 => 1,
            DataType::Int16 => 2,
            DataType::Int32 | DataType::Float32 => 4,
            DataType::Float64 => 8,
        }
    }

    fn is_integer(self) -> bool {
        matches!(self, DataType::Uint8 | DataType::Int16 | DataType::Int32)
    }

    fn name(self) -> &'static str {
        match self {
            DataType::Uint8 => "uint8",
            DataType::Int16 => "int16",
            DataType::Int32 => "int32",
            DataType::Float32 => "float32",
            DataType::Float64 => "float64",
        }
    }
}

/// Decoded image: grid, raw voxel values (before scaling) and scaling terms.
#[derive(Clone, Debug)]
pub struct NiftiData {
    pub grid: Grid,
    pub datatype: DataType,
    pub raw: Vec<f64>,
    pub scl_slope: f64,
    pub scl_inter: f64,
}

impl NiftiData {
    fn scaled(&self) -> Vec<f64> {
        if self.scl_slope == 0.0 || (self.scl_slope == 1.0 && self.scl_inter == 0.0) {
            self.raw.clone()
        } else {
            self.raw.iter().map(|v| v * self.scl_slope + self.scl_inter).collect()
        }
    }
}

fn le_i16(b: &[u8], at: usize) -> i16 {
    i16::from_le_bytes([b[at], b[at + 1]])
}

fn le_i32(b: &[u8], at: usize) -> i32 {
    i32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn le_f32(b: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut head = [0u8; 2];
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() >= 2 {
        head.copy_from_slice(&bytes[..2]);
    }
    if head == [0x1f, 0x8b] {
        let mut out = Vec::new();
        GzDecoder::new(&bytes[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

fn qform_affine(b: &[u8], pixdim: [f64; 4]) -> Matrix4<f64> {
    let qb = le_f32(b, 256) as f64;
    let qc = le_f32(b, 260) as f64;
    let qd = le_f32(b, 264) as f64;
    let qa = (1.0 - (qb * qb + qc * qc + qd * qd)).max(0.0).sqrt();
    let rot: Matrix3<f64> = UnitQuaternion::from_quaternion(Quaternion::new(qa, qb, qc, qd))
        .to_rotation_matrix()
        .into_inner();
    let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
    let scale = Matrix3::from_diagonal(&nalgebra::Vector3::new(pixdim[1], pixdim[2], qfac * pixdim[3]));
    let mut affine = Matrix4::identity();
    affine.fixed_view_mut::<3, 3>(0, 0).copy_from(&(rot * scale));
    for (row, at) in [268, 272, 276].into_iter().enumerate() {
        affine[(row, 3)] = le_f32(b, at) as f64;
    }
    affine
}

fn sform_affine(b: &[u8]) -> Matrix4<f64> {
    let mut affine = Matrix4::identity();
    for row in 0..3 {
        for col in 0..4 {
            affine[(row, col)] = le_f32(b, 280 + 16 * row + 4 * col) as f64;
        }
    }
    affine
}

/// Parse a NIfTI-1 image into its grid and raw values.
pub fn load_nifti(path: &Path) -> Result<NiftiData> {
    let bytes = read_all(path)?;
    if bytes.len() < HEADER_SIZE {
        return Err(Error::BadHeader(format!("file has {} bytes, header needs {HEADER_SIZE}", bytes.len())));
    }
    let magic: [u8; 4] = bytes[344..348].try_into().unwrap();
    if magic != MAGIC_SINGLE {
        return Err(Error::BadMagic(magic));
    }
    let sizeof_hdr = le_i32(&bytes, 0);
    if sizeof_hdr != HEADER_SIZE as i32 {
        if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
            return Err(Error::BadHeader("big-endian NIfTI files are not supported".into()));
        }
        return Err(Error::BadHeader(format!("sizeof_hdr = {sizeof_hdr}")));
    }
    let dim: Vec<i16> = (0..8).map(|i| le_i16(&bytes, 40 + 2 * i)).collect();
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(Error::BadHeader(format!("dim[0] = {ndim}")));
    }
    if (4..=ndim as usize).any(|i| dim[i] > 1) {
        return Err(Error::BadHeader(format!("only 3D volumes are supported, dim = {:?}", &dim[..=ndim as usize])));
    }
    let dims = [1, 2, 3].map(|i| if i <= ndim as usize { dim[i].max(0) as usize } else { 1 });
    if dims.contains(&0) {
        return Err(Error::BadHeader(format!("zero-sized dimension in {dims:?}")));
    }
    let datatype = DataType::from_code(le_i16(&bytes, 70))?;
    let pixdim_raw: Vec<f64> = (0..4).map(|i| le_f32(&bytes, 76 + 4 * i) as f64).collect();
    let pixdim = [pixdim_raw[0], pixdim_raw[1].abs(), pixdim_raw[2].abs(), pixdim_raw[3].abs()];
    let spacing = [pixdim[1], pixdim[2], pixdim[3]].map(|s| if s > 0.0 { s } else { 1.0 });
    let vox_offset = le_f32(&bytes, 108);
    let scl_slope = le_f32(&bytes, 112) as f64;
    let scl_inter = le_f32(&bytes, 116) as f64;
    let qform_code = le_i16(&bytes, 252);
    let sform_code = le_i16(&bytes, 254);

    let affine = if qform_code > 0 {
        qform_affine(&bytes, [pixdim[0], spacing[0], spacing[1], spacing[2]])
    } else if sform_code > 0 {
        sform_affine(&bytes)
    } else {
        let mut a = Matrix4::identity();
        for i in 0..3 {
            a[(i, i)] = spacing[i];
        }
        a
    };
    let grid = Grid::new(dims, spacing, affine)?;

    let offset = (vox_offset.max(HEADER_SIZE as f32)) as usize;
    let count = grid.len();
    let needed = offset + count * datatype.bytes();
    if bytes.len() < needed {
        return Err(Error::BadHeader(format!("truncated voxel data: need {needed} bytes, have {}", bytes.len())));
    }
    let body = &bytes[offset..needed];
    let raw: Vec<f64> = match datatype {
        DataType::Uint8 => body.iter().map(|&v| v as f64).collect(),
        DataType::Int16 => body.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as f64).collect(),
        DataType::Int32 => body.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        DataType::Float32 => body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        DataType::Float64 => body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
    };
    Ok(NiftiData {
        grid,
        datatype,
        raw,
        scl_slope,
        scl_inter,
    })
}

/// Load a scalar volume; `scl_slope`/`scl_inter` are applied when set.
/// The channel is taken from the file stem when it names a known sequence.
pub fn load_volume(path: &Path) -> Result<Volume3D> {
    let nifti = load_nifti(path)?;
    let data = nifti.scaled();
    let stem = path
        .file_name()
        .and_then(|n| n.to_str())
        .map(|n| n.trim_end_matches(".gz").trim_end_matches(".nii"))
        .unwrap_or("");
    let channel = stem.parse().unwrap_or_else(|_| Channel::Other("other".into()));
    Volume3D::new(nifti.grid, data, channel)
}

/// Load a label volume. Non-integer datatypes and values outside `0..=255`
/// are rejected.
pub fn load_labels(path: &Path) -> Result<LabelVolume> {
    let nifti = load_nifti(path)?;
    if !nifti.datatype.is_integer() {
        return Err(Error::NonIntegerLabels(nifti.datatype.name()));
    }
    let values = nifti.scaled();
    let mut data = Vec::with_capacity(values.len());
    for v in values {
        if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
            return Err(Error::InvalidLabel(v as i64));
        }
        data.push(v as u8);
    }
    LabelVolume::new(nifti.grid, data)
}

fn header(grid: &Grid, datatype: DataType) -> [u8; VOX_OFFSET] {
    let mut h = [0u8; VOX_OFFSET];
    let put_i16 = |h: &mut [u8], at: usize, v: i16| h[at..at + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], at: usize, v: f32| h[at..at + 4].copy_from_slice(&v.to_le_bytes());
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    let dims = grid.dims();
    put_i16(&mut h, 40, 3);
    for (i, &d) in dims.iter().enumerate() {
        put_i16(&mut h, 42 + 2 * i, d as i16);
    }
    for i in 4..8 {
        put_i16(&mut h, 40 + 2 * i, 1);
    }
    put_i16(&mut h, 70, datatype.code());
    put_i16(&mut h, 72, (datatype.bytes() * 8) as i16);
    put_f32(&mut h, 76, 1.0);
    for (i, &s) in grid.spacing().iter().enumerate() {
        put_f32(&mut h, 80 + 4 * i, s as f32);
    }
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    h[123] = 2; // xyzt_units: mm
    put_i16(&mut h, 252, 0);
    put_i16(&mut h, 254, 2); // NIFTI_XFORM_ALIGNED_ANAT
    let affine = grid.affine();
    for row in 0..3 {
        for col in 0..4 {
            put_f32(&mut h, 280 + 16 * row + 4 * col, affine[(row, col)] as f32);
        }
    }
    h[344..348].copy_from_slice(&MAGIC_SINGLE);
    h
}

fn encode(values: impl Iterator<Item = f64>, datatype: DataType, out: &mut Vec<u8>) {
    for v in values {
        match datatype {
            DataType::Uint8 => out.push(v as u8),
            DataType::Int16 => out.extend_from_slice(&(v as i16).to_le_bytes()),
            DataType::Int32 => out.extend_from_slice(&(v as i32).to_le_bytes()),
            DataType::Float32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            DataType::Float64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let gz = path.extension().is_some_and(|e| e == "gz");
    if gz {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::fast());
        enc.write_all(bytes).map_err(|e| Error::io(path, e))?;
        enc.finish()
            .and_then(|mut w| w.flush())
            .map_err(|e| Error::io(path, e))?;
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn write_nifti(path: &Path, grid: &Grid, values: impl Iterator<Item = f64>, datatype: DataType) -> Result<()> {
    let mut bytes = Vec::with_capacity(VOX_OFFSET + grid.len() * datatype.bytes());
    bytes.extend_from_slice(&header(grid, datatype));
    encode(values, datatype, &mut bytes);
    write_bytes(path, &bytes)
}

/// Save as float64, which round-trips the data bit-exactly.
pub fn save_volume(vol: &Volume3D, path: &Path) -> Result<()> {
    save_volume_as(vol, path, DataType::Float64)
}

pub fn save_volume_as(vol: &Volume3D, path: &Path, datatype: DataType) -> Result<()> {
    write_nifti(path, &vol.grid, vol.data.iter().copied(), datatype)
}

/// Save labels as uint8.
pub fn save_labels(vol: &LabelVolume, path: &Path) -> Result<()> {
    write_nifti(path, &vol.grid, vol.data.iter().map(|&l| l as f64), DataType::Uint8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Point3;

    fn scratch() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn identity_zero_volume_loads() {
        let dir = scratch();
        let grid = Grid::axis_aligned([4, 4, 4], [1.0; 3], [0.0; 3]).unwrap();
        let vol = Volume3D::new(grid, vec![0.0; 64], Channel::T2).unwrap();
        let path = dir.path().join("T2.nii");
        save_volume(&vol, &path).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(back.grid.dims(), [4, 4, 4]);
        assert_eq!(back.grid.spacing(), [1.0; 3]);
        assert_eq!(back.grid.affine(), &Matrix4::identity());
        assert_eq!(back.channel, Channel::T2);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = scratch();
        let grid = Grid::axis_aligned([5, 3, 2], [0.5, 0.75, 1.25], [-48.0, 10.5, 3.0]).unwrap();
        let data: Vec<f64> = (0..30).map(|i| (i as f64 * 0.1).sin() * 1e3 + 1.0 / 3.0).collect();
        let vol = Volume3D::new(grid, data, Channel::CeT1).unwrap();
        for name in ["ceT1.nii", "ceT1.nii.gz"] {
            let path = dir.path().join(name);
            save_volume(&vol, &path).unwrap();
            let back = load_volume(&path).unwrap();
            assert_eq!(back, vol);
            assert!(back.data.iter().zip(&vol.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        let labels = LabelVolume::new(vol.grid.clone(), (0..30).map(|i| (i % 4) as u8).collect()).unwrap();
        let path = dir.path().join("tumor.nii.gz");
        save_labels(&labels, &path).unwrap();
        assert_eq!(load_labels(&path).unwrap(), labels);
    }

    #[test]
    fn half_mm_header_maps_origin() {
        let dir = scratch();
        let grid = Grid::axis_aligned([8, 8, 8], [0.5; 3], [-48.0; 3]).unwrap();
        let vol = Volume3D::new(grid, vec![1.0; 512], Channel::T2).unwrap();
        let path = dir.path().join("x.nii");
        save_volume_as(&vol, &path, DataType::Float32).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(back.grid.voxel_to_world([0.0; 3]), Point3::new(-48.0, -48.0, -48.0));
        assert_eq!(back.grid.voxel_to_world([2.0, 0.0, 0.0]), Point3::new(-47.0, -48.0, -48.0));
    }

    fn raw_header(datatype: i16) -> Vec<u8> {
        let grid = Grid::axis_aligned([2, 2, 2], [1.0; 3], [0.0; 3]).unwrap();
        let mut bytes = header(&grid, DataType::Float32).to_vec();
        bytes[70..72].copy_from_slice(&datatype.to_le_bytes());
        bytes.extend(std::iter::repeat_n(0u8, 8 * 8));
        bytes
    }

    #[test]
    fn rejects_bad_magic_and_datatype() {
        let dir = scratch();
        let path = dir.path().join("bad.nii");
        let mut bytes = raw_header(16);
        bytes[344] = b'x';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_nifti(&path), Err(Error::BadMagic(_))));

        std::fs::write(&path, raw_header(32)).unwrap(); // complex64
        assert!(matches!(load_nifti(&path), Err(Error::UnsupportedDatatype(32))));
    }

    #[test]
    fn rejects_singular_affine() {
        let dir = scratch();
        let path = dir.path().join("sing.nii");
        let mut bytes = raw_header(16);
        // zero out srow_z
        for b in &mut bytes[312..328] {
            *b = 0;
        }
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_nifti(&path), Err(Error::SingularAffine(_))));
    }

    #[test]
    fn labels_must_be_integer_typed() {
        let dir = scratch();
        let grid = Grid::axis_aligned([2, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let vol = Volume3D::new(grid, vec![0.0, 1.0], Channel::T2).unwrap();
        let path = dir.path().join("lbl.nii");
        save_volume_as(&vol, &path, DataType::Float32).unwrap();
        assert!(matches!(load_labels(&path), Err(Error::NonIntegerLabels("float32"))));
        save_volume_as(&vol, &path, DataType::Int16).unwrap();
        assert_eq!(load_labels(&path).unwrap().data, vec![0, 1]);
        let neg = Volume3D::new(vol.grid.clone(), vec![-1.0, 1.0], Channel::T2).unwrap();
        save_volume_as(&neg, &path, DataType::Int16).unwrap();
        assert!(matches!(load_labels(&path), Err(Error::InvalidLabel(-1))));
    }

    #[test]
    fn qform_preferred_over_sform() {
        let dir = scratch();
        let path = dir.path().join("q.nii");
        let mut bytes = raw_header(16);
        // qform: 90 degrees about z, offset (1, 2, 3); sform stays identity
        let s = std::f32::consts::FRAC_1_SQRT_2;
        bytes[252..254].copy_from_slice(&1i16.to_le_bytes());
        for (at, v) in [(256, 0.0f32), (260, 0.0), (264, s), (268, 1.0), (272, 2.0), (276, 3.0)] {
            bytes[at..at + 4].copy_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&path, &bytes).unwrap();
        let nifti = load_nifti(&path).unwrap();
        let p = nifti.grid.voxel_to_world([1.0, 0.0, 0.0]);
        assert!((p - Point3::new(1.0, 3.0, 3.0)).norm() < 1e-6, "{p}");
    }
}
