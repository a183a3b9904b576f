//! Minimal NIfTI-1 reading and writing.
//!
//! Covers what the pipeline needs: single-file `.nii` / `.nii.gz` volumes
//! (3D or 4D), the common scalar datatypes, spacing from `pixdim`, and
//! `scl_slope`/`scl_inter` rescaling. Data is stored x-fastest on disk,
//! which matches this crate's `[t][z][y][x]` row-major convention, so grids
//! dump straight through.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::{Array3, Array4};

use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const MAGIC_OFFSET: usize = 344;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;
const DT_UINT32: i16 = 768;

/// Parsed subset of the NIfTI-1 header.
#[derive(Debug, Clone)]
pub struct NiftiHeader {
    /// `dim[0]` = rank, `dim[1..=rank]` = extents (x, y, z, t, ...).
    pub dim: [u16; 8],
    pub datatype: i16,
    /// `pixdim[1..=3]` = spacings in mm, `pixdim[4]` = frame time.
    pub pixdim: [f32; 8],
    pub scl_slope: f32,
    pub scl_inter: f32,
}

impl NiftiHeader {
    pub fn rank(&self) -> usize {
        self.dim[0] as usize
    }

    pub fn extent(&self, axis: usize) -> usize {
        self.dim[axis + 1] as usize
    }

    fn num_voxels(&self) -> usize {
        (0..self.rank()).map(|a| self.extent(a)).product()
    }
}

/// A volume read from disk: f64 voxels plus the header it came with.
/// Element order is `[t][z][y][x]` (t absent for 3D).
#[derive(Debug, Clone)]
pub struct NiftiVolume {
    pub header: NiftiHeader,
    pub voxels: Vec<f64>,
}

impl NiftiVolume {
    /// View as a 3D grid `[z, y, x]`.
    pub fn into_array3(self) -> Result<Array3<f64>> {
        if self.header.rank() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "expected a 3D volume, header says rank {}",
                self.header.rank()
            )));
        }
        let (nx, ny, nz) = (
            self.header.extent(0),
            self.header.extent(1),
            self.header.extent(2),
        );
        Array3::from_shape_vec((nz, ny, nx), self.voxels)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))
    }

    /// View as a 4D grid `[t, z, y, x]`. A 3D volume becomes a single frame.
    pub fn into_array4(self) -> Result<Array4<f64>> {
        let (nx, ny, nz, nt) = match self.header.rank() {
            3 => (
                self.header.extent(0),
                self.header.extent(1),
                self.header.extent(2),
                1,
            ),
            4 => (
                self.header.extent(0),
                self.header.extent(1),
                self.header.extent(2),
                self.header.extent(3),
            ),
            r => {
                return Err(Error::ShapeMismatch(format!(
                    "expected a 3D or 4D volume, header says rank {r}"
                )))
            }
        };
        Array4::from_shape_vec((nt, nz, ny, nx), self.voxels)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))
    }
}

fn open_reader(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    let buf = BufReader::new(file);
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(MultiGzDecoder::new(buf)))
    } else {
        Ok(Box::new(buf))
    }
}

fn create_writer(path: &Path) -> Result<Box<dyn Write>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let file = File::create(path)?;
    let buf = BufWriter::new(file);
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(GzEncoder::new(buf, Compression::default())))
    } else {
        Ok(Box::new(buf))
    }
}

fn header_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Nifti {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

struct FieldReader<'a> {
    bytes: &'a [u8],
    swap: bool,
}

impl FieldReader<'_> {
    fn i16(&self, off: usize) -> i16 {
        let raw = [self.bytes[off], self.bytes[off + 1]];
        let v = i16::from_le_bytes(raw);
        if self.swap {
            v.swap_bytes()
        } else {
            v
        }
    }

    fn f32(&self, off: usize) -> f32 {
        let raw: [u8; 4] = self.bytes[off..off + 4].try_into().unwrap();
        let v = u32::from_le_bytes(raw);
        f32::from_bits(if self.swap { v.swap_bytes() } else { v })
    }
}

/// Read a `.nii` / `.nii.gz` volume. `scl_slope`/`scl_inter` are applied
/// when the slope is nonzero.
pub fn read(path: impl AsRef<Path>) -> Result<NiftiVolume> {
    let path = path.as_ref();
    let mut reader = open_reader(path)?;
    let mut header_bytes = [0u8; HEADER_SIZE];
    reader
        .read_exact(&mut header_bytes)
        .map_err(|e| header_error(path, format!("short header: {e}")))?;

    let magic = &header_bytes[MAGIC_OFFSET..MAGIC_OFFSET + 4];
    if &magic[..3] != b"n+1" {
        return Err(header_error(path, "not a single-file NIfTI-1 image (bad magic)"));
    }

    // Byte order is detected from dim[0], which must be 1..=7.
    let dim0_le = i16::from_le_bytes([header_bytes[40], header_bytes[41]]);
    let swap = !(1..=7).contains(&dim0_le);
    let fr = FieldReader {
        bytes: &header_bytes,
        swap,
    };

    let mut dim = [0u16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        let v = fr.i16(40 + 2 * i);
        if i <= dim0_le.unsigned_abs() as usize && v < 0 {
            return Err(header_error(path, format!("negative dim[{i}] = {v}")));
        }
        *d = v.max(0) as u16;
    }
    if !(1..=7).contains(&(dim[0] as i16)) {
        return Err(header_error(path, format!("unsupported rank {}", dim[0])));
    }

    let datatype = fr.i16(70);
    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = fr.f32(76 + 4 * i);
    }
    let vox_offset = fr.f32(108) as u64;
    let scl_slope = fr.f32(112);
    let scl_inter = fr.f32(116);

    let header = NiftiHeader {
        dim,
        datatype,
        pixdim,
        scl_slope,
        scl_inter,
    };

    // Skip any extension bytes between the header and the voxel data.
    let skip = vox_offset.saturating_sub(HEADER_SIZE as u64);
    std::io::copy(&mut reader.by_ref().take(skip), &mut std::io::sink())?;

    let n = header.num_voxels();
    let elem_size: usize = match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_UINT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => {
            return Err(header_error(path, format!("unsupported datatype {other}")));
        }
    };
    let mut raw = vec![0u8; n * elem_size];
    reader
        .read_exact(&mut raw)
        .map_err(|e| header_error(path, format!("short voxel data: {e}")))?;

    let fix2 = |b: [u8; 2]| if swap { [b[1], b[0]] } else { b };
    let fix4 = |b: [u8; 4]| if swap { [b[3], b[2], b[1], b[0]] } else { b };
    let fix8 = |b: [u8; 8]| {
        if swap {
            [b[7], b[6], b[5], b[4], b[3], b[2], b[1], b[0]]
        } else {
            b
        }
    };

    let mut voxels = Vec::with_capacity(n);
    match datatype {
        DT_UINT8 => voxels.extend(raw.iter().map(|&b| b as f64)),
        DT_INT8 => voxels.extend(raw.iter().map(|&b| b as i8 as f64)),
        DT_INT16 => voxels.extend(
            raw.chunks_exact(2)
                .map(|c| i16::from_le_bytes(fix2([c[0], c[1]])) as f64),
        ),
        DT_UINT16 => voxels.extend(
            raw.chunks_exact(2)
                .map(|c| u16::from_le_bytes(fix2([c[0], c[1]])) as f64),
        ),
        DT_INT32 => voxels.extend(
            raw.chunks_exact(4)
                .map(|c| i32::from_le_bytes(fix4([c[0], c[1], c[2], c[3]])) as f64),
        ),
        DT_UINT32 => voxels.extend(
            raw.chunks_exact(4)
                .map(|c| u32::from_le_bytes(fix4([c[0], c[1], c[2], c[3]])) as f64),
        ),
        DT_FLOAT32 => voxels.extend(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(fix4([c[0], c[1], c[2], c[3]])) as f64),
        ),
        DT_FLOAT64 => voxels.extend(raw.chunks_exact(8).map(|c| {
            f64::from_le_bytes(fix8([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
        })),
        _ => unreachable!(),
    }

    if scl_slope != 0.0 && (scl_slope != 1.0 || scl_inter != 0.0) {
        let (s, b) = (scl_slope as f64, scl_inter as f64);
        for v in voxels.iter_mut() {
            *v = *v * s + b;
        }
    }

    Ok(NiftiVolume { header, voxels })
}

/// Raw element types this writer can emit.
pub enum WriteData<'a> {
    F32(&'a [f64]),
    U8(&'a [u8]),
}

/// Write a single-file NIfTI-1 volume. `dims` are (x, y, z[, t]) extents,
/// `spacing` the matching pixdims (frame time in seconds for the 4th).
pub fn write(
    path: impl AsRef<Path>,
    dims: &[usize],
    spacing: &[f64],
    data: WriteData<'_>,
) -> Result<()> {
    let path = path.as_ref();
    assert!(dims.len() == 3 || dims.len() == 4);
    assert_eq!(dims.len(), spacing.len());
    let n: usize = dims.iter().product();
    let (datatype, bitpix) = match &data {
        WriteData::F32(v) => {
            assert_eq!(v.len(), n, "voxel count vs dims");
            (DT_FLOAT32, 32i16)
        }
        WriteData::U8(v) => {
            assert_eq!(v.len(), n, "voxel count vs dims");
            (DT_UINT8, 8i16)
        }
    };

    let mut h = [0u8; HEADER_SIZE + 4]; // header + empty extension flag
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    // dim
    h[40..42].copy_from_slice(&(dims.len() as i16).to_le_bytes());
    for (i, &d) in dims.iter().enumerate() {
        h[42 + 2 * i..44 + 2 * i].copy_from_slice(&(d as i16).to_le_bytes());
    }
    for i in dims.len()..7 {
        h[42 + 2 * i..44 + 2 * i].copy_from_slice(&1i16.to_le_bytes());
    }
    h[70..72].copy_from_slice(&datatype.to_le_bytes());
    h[72..74].copy_from_slice(&bitpix.to_le_bytes());
    // pixdim[0] = 1 (qfac), then spacings
    h[76..80].copy_from_slice(&1f32.to_le_bytes());
    for (i, &s) in spacing.iter().enumerate() {
        h[80 + 4 * i..84 + 4 * i].copy_from_slice(&(s as f32).to_le_bytes());
    }
    h[108..112].copy_from_slice(&352f32.to_le_bytes()); // vox_offset
    h[112..116].copy_from_slice(&1f32.to_le_bytes()); // scl_slope
    h[116..120].copy_from_slice(&0f32.to_le_bytes()); // scl_inter
    h[123] = 2 | 8; // mm and seconds
    h[MAGIC_OFFSET..MAGIC_OFFSET + 4].copy_from_slice(b"n+1\0");

    let mut writer = create_writer(path)?;
    writer.write_all(&h)?;
    match data {
        WriteData::F32(v) => {
            let mut payload = Vec::with_capacity(n * 4);
            for &x in v {
                payload.extend_from_slice(&(x as f32).to_le_bytes());
            }
            writer.write_all(&payload)?;
        }
        WriteData::U8(v) => writer.write_all(v)?,
    }
    writer.flush()?;
    Ok(())
}

/// Write a 3D f64 grid `[z, y, x]` as float32.
pub fn write_array3(
    path: impl AsRef<Path>,
    grid: &Array3<f64>,
    spacing: (f64, f64, f64),
) -> Result<()> {
    let (nz, ny, nx) = grid.dim();
    let flat = grid.as_standard_layout();
    write(
        path,
        &[nx, ny, nz],
        &[spacing.1, spacing.0, spacing.2],
        WriteData::F32(flat.as_slice().expect("standard layout")),
    )
}

/// Write a 3D u8 label grid `[z, y, x]`.
pub fn write_labels3(
    path: impl AsRef<Path>,
    grid: &Array3<u8>,
    spacing: (f64, f64, f64),
) -> Result<()> {
    let (nz, ny, nx) = grid.dim();
    let flat = grid.as_standard_layout();
    write(
        path,
        &[nx, ny, nz],
        &[spacing.1, spacing.0, spacing.2],
        WriteData::U8(flat.as_slice().expect("standard layout")),
    )
}

/// Write a 4D u8 label grid `[t, z, y, x]`.
pub fn write_labels4(
    path: impl AsRef<Path>,
    grid: &Array4<u8>,
    in_plane: f64,
    slice: f64,
    dt: f64,
) -> Result<()> {
    let (nt, nz, ny, nx) = grid.dim();
    let flat = grid.as_standard_layout();
    write(
        path,
        &[nx, ny, nz, nt],
        &[in_plane, in_plane, slice, dt],
        WriteData::U8(flat.as_slice().expect("standard layout")),
    )
}

/// Write a 4D f64 image grid `[t, z, y, x]` as float32.
pub fn write_images4(
    path: impl AsRef<Path>,
    grid: &Array4<f64>,
    in_plane: f64,
    slice: f64,
    dt: f64,
) -> Result<()> {
    let (nt, nz, ny, nx) = grid.dim();
    let flat = grid.as_standard_layout();
    write(
        path,
        &[nx, ny, nz, nt],
        &[in_plane, in_plane, slice, dt],
        WriteData::F32(flat.as_slice().expect("standard layout")),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn round_trip_3d_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.nii.gz");
        let grid = Array3::from_shape_fn((3, 4, 5), |(z, y, x)| (z * 100 + y * 10 + x) as f64);
        write_array3(&path, &grid, (1.5, 1.25, 8.0)).unwrap();
        let vol = read(&path).unwrap();
        assert_eq!(vol.header.rank(), 3);
        assert_eq!(vol.header.extent(0), 5);
        assert_eq!(vol.header.extent(1), 4);
        assert_eq!(vol.header.extent(2), 3);
        assert!((vol.header.pixdim[1] - 1.25).abs() < 1e-6);
        assert!((vol.header.pixdim[2] - 1.5).abs() < 1e-6);
        assert!((vol.header.pixdim[3] - 8.0).abs() < 1e-6);
        let back = vol.into_array3().unwrap();
        assert_eq!(back, grid);
    }

    #[test]
    fn round_trip_4d_labels_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.nii");
        let grid =
            ndarray::Array4::from_shape_fn((2, 3, 4, 5), |(t, z, y, x)| ((t + z + y + x) % 4) as u8);
        write_labels4(&path, &grid, 1.0, 7.0, 0.04).unwrap();
        let vol = read(&path).unwrap();
        assert_eq!(vol.header.rank(), 4);
        let back = vol.into_array4().unwrap();
        let back_u8 = back.mapv(|v| v as u8);
        assert_eq!(back_u8, grid);
    }

    #[test]
    fn missing_file_is_reported() {
        assert!(matches!(
            read("/nonexistent/file.nii.gz"),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn scl_slope_is_applied() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scaled.nii");
        let grid = Array3::from_elem((2, 2, 2), 10.0);
        write_array3(&path, &grid, (1.0, 1.0, 1.0)).unwrap();
        // Patch scl_slope = 2.0, scl_inter = 1.0 in place.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[112..116].copy_from_slice(&2f32.to_le_bytes());
        bytes[116..120].copy_from_slice(&1f32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        let vol = read(&path).unwrap();
        assert!(vol.voxels.iter().all(|&v| (v - 21.0).abs() < 1e-6));
    }
}
