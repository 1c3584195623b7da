//! Single-file NIfTI-1 (`.nii`) reader/writer and the dataset manifest.
//!
//! Orientation fields are written as zeros and ignored on read. In-memory
//! voxels are `f64` in `(D, H, W)` order; on disk `dim[1] = W` varies fastest.

use std::collections::HashSet;
use std::path::PathBuf;

use crate::tensor::Tensor;
use crate::{Error, Result};

pub const HEADER_SIZE: usize = 348;
pub const DATA_OFFSET: usize = 352;
pub const MAGIC: [u8; 4] = *b"n+1\0";

const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_BITPIX: usize = 72;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_SCL_INTER: usize = 116;
const OFF_MAGIC: usize = 344;

/// On-disk voxel type.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Datatype {
    Int16,
    Float32,
    Float64,
}

impl Datatype {
    pub const ALL: [Datatype; 3] = [Datatype::Int16, Datatype::Float32, Datatype::Float64];

    pub fn code(self) -> i16 {
        match self {
            Datatype::Int16 => 4,
            Datatype::Float32 => 16,
            Datatype::Float64 => 64,
        }
    }

    pub fn bitpix(self) -> i16 {
        match self {
            Datatype::Int16 => 16,
            Datatype::Float32 => 32,
            Datatype::Float64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            4 => Ok(Datatype::Int16),
            16 => Ok(Datatype::Float32),
            64 => Ok(Datatype::Float64),
            _ => Err(Error::UnsupportedDatatype { code }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NiftiHeader {
    pub sizeof_hdr: i32,
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub magic: [u8; 4],
    /// Whether the file was stored in the opposite byte order.
    pub swapped: bool,
}

impl NiftiHeader {
    /// Volume extents as `(D, H, W)`.
    pub fn shape(&self) -> [usize; 3] {
        let n = self.dim[0] as usize;
        let ext = |i: usize| if i <= n { self.dim[i] as usize } else { 1 };
        [ext(3), ext(2), ext(1)]
    }

    /// Voxel spacing `(x, y, z)` in millimetres.
    pub fn spacing(&self) -> [f64; 3] {
        [self.pixdim[1] as f64, self.pixdim[2] as f64, self.pixdim[3] as f64]
    }
}

struct Fields<'a> {
    bytes: &'a [u8],
    swap: bool,
}

impl Fields<'_> {
    fn raw<const N: usize>(&self, off: usize) -> [u8; N] {
        let mut b: [u8; N] = self.bytes[off..off + N].try_into().expect("in bounds");
        if self.swap {
            b.reverse();
        }
        b
    }

    fn i16(&self, off: usize) -> i16 {
        i16::from_le_bytes(self.raw(off))
    }

    fn i32(&self, off: usize) -> i32 {
        i32::from_le_bytes(self.raw(off))
    }

    fn f32(&self, off: usize) -> f32 {
        f32::from_le_bytes(self.raw(off))
    }

    fn f64(&self, off: usize) -> f64 {
        f64::from_le_bytes(self.raw(off))
    }
}

fn bad(field: &'static str, offset: usize, reason: impl Into<String>) -> Error {
    Error::BadHeader {
        field,
        offset,
        reason: reason.into(),
    }
}

/// Parses and validates the header, detecting byte order from `dim[0]`.
pub fn read_header(bytes: &[u8]) -> Result<NiftiHeader> {
    if bytes.len() < DATA_OFFSET {
        return Err(Error::TruncatedData {
            offset: 0,
            needed: DATA_OFFSET,
            available: bytes.len(),
        });
    }
    let native = Fields { bytes, swap: false };
    let swap = !(1..=7).contains(&native.i16(OFF_DIM));
    let f = Fields { bytes, swap };
    let h = NiftiHeader {
        sizeof_hdr: f.i32(0),
        dim: std::array::from_fn(|i| f.i16(OFF_DIM + 2 * i)),
        datatype: f.i16(OFF_DATATYPE),
        bitpix: f.i16(OFF_BITPIX),
        pixdim: std::array::from_fn(|i| f.f32(OFF_PIXDIM + 4 * i)),
        vox_offset: f.f32(OFF_VOX_OFFSET),
        scl_slope: f.f32(OFF_SCL_SLOPE),
        scl_inter: f.f32(OFF_SCL_INTER),
        magic: bytes[OFF_MAGIC..OFF_MAGIC + 4].try_into().expect("in bounds"),
        swapped: swap,
    };
    if !(1..=7).contains(&h.dim[0]) {
        return Err(bad("dim[0]", OFF_DIM, format!("{} not in 1..=7 in either byte order", h.dim[0])));
    }
    if h.sizeof_hdr != HEADER_SIZE as i32 {
        return Err(bad("sizeof_hdr", 0, format!("expected 348, found {}", h.sizeof_hdr)));
    }
    if h.magic != MAGIC {
        return Err(Error::BadMagic { found: h.magic });
    }
    let dtype = Datatype::from_code(h.datatype)?;
    if h.bitpix != dtype.bitpix() {
        return Err(bad(
            "bitpix",
            OFF_BITPIX,
            format!("datatype {} needs bitpix {}, found {}", h.datatype, dtype.bitpix(), h.bitpix),
        ));
    }
    let n = h.dim[0] as usize;
    for i in 1..=n {
        if h.dim[i] < 1 {
            return Err(bad("dim", OFF_DIM + 2 * i, format!("dim[{i}] = {} must be positive", h.dim[i])));
        }
        if i > 3 && h.dim[i] != 1 {
            return Err(bad("dim", OFF_DIM + 2 * i, "only 3-D volumes are supported"));
        }
    }
    let vo = h.vox_offset;
    if !(vo.is_finite() && vo >= DATA_OFFSET as f32 && vo.fract() == 0.0) {
        return Err(bad("vox_offset", OFF_VOX_OFFSET, format!("{vo} must be an integer >= 352")));
    }
    Ok(h)
}

/// Decodes a `.nii` byte sequence into its header and `(D, H, W)` grid.
pub fn read_nifti(bytes: &[u8]) -> Result<(NiftiHeader, Tensor)> {
    let h = read_header(bytes)?;
    let dtype = Datatype::from_code(h.datatype)?;
    let shape = h.shape();
    let count: usize = shape.iter().product();
    let width = dtype.bitpix() as usize / 8;
    let start = h.vox_offset as usize;
    let needed = count * width;
    let available = bytes.len().saturating_sub(start);
    if available < needed {
        return Err(Error::TruncatedData {
            offset: start,
            needed,
            available,
        });
    }
    if available > needed {
        return Err(bad(
            "dim",
            OFF_DIM,
            format!("dims describe {needed} data bytes but file holds {available}"),
        ));
    }
    let f = Fields { bytes, swap: h.swapped };
    let (slope, inter) = (h.scl_slope as f64, h.scl_inter as f64);
    let scale = slope != 0.0 && slope.is_finite() && inter.is_finite();
    let data = (0..count)
        .map(|i| {
            let off = start + i * width;
            let v = match dtype {
                Datatype::Int16 => f.i16(off) as f64,
                Datatype::Float32 => f.f32(off) as f64,
                Datatype::Float64 => f.f64(off),
            };
            if scale {
                v * slope + inter
            } else {
                v
            }
        })
        .collect();
    Ok((h, Tensor::new(&shape, data)?))
}

/// Writes a float32 `.nii` with identity scaling.
pub fn write_nifti(grid: &Tensor, spacing_mm: [f64; 3]) -> Vec<u8> {
    write_nifti_as(grid, spacing_mm, Datatype::Float32)
}

/// Writes a `.nii` with the given on-disk type. Int16 output rounds and
/// saturates.
pub fn write_nifti_as(grid: &Tensor, spacing_mm: [f64; 3], dtype: Datatype) -> Vec<u8> {
    assert_eq!(grid.rank(), 3, "NIfTI writer expects a (D, H, W) grid");
    let [d, h, w] = grid.spatial();
    assert!(
        [d, h, w].iter().all(|&e| e <= i16::MAX as usize),
        "extent too large for NIfTI-1"
    );
    let width = dtype.bitpix() as usize / 8;
    let mut out = vec![0u8; DATA_OFFSET + grid.len() * width];
    let mut put = |off: usize, b: &[u8]| out[off..off + b.len()].copy_from_slice(b);
    put(0, &(HEADER_SIZE as i32).to_le_bytes());
    // unused dims stay zero so that a corrupted dim[0] cannot go unnoticed
    let dims: [i16; 4] = [3, w as i16, h as i16, d as i16];
    for (i, v) in dims.iter().enumerate() {
        put(OFF_DIM + 2 * i, &v.to_le_bytes());
    }
    put(OFF_DATATYPE, &dtype.code().to_le_bytes());
    put(OFF_BITPIX, &dtype.bitpix().to_le_bytes());
    let pixdim = [1.0f32, spacing_mm[0] as f32, spacing_mm[1] as f32, spacing_mm[2] as f32];
    for (i, v) in pixdim.iter().enumerate() {
        put(OFF_PIXDIM + 4 * i, &v.to_le_bytes());
    }
    put(OFF_VOX_OFFSET, &(DATA_OFFSET as f32).to_le_bytes());
    put(OFF_SCL_SLOPE, &1.0f32.to_le_bytes());
    put(OFF_SCL_INTER, &0.0f32.to_le_bytes());
    put(OFF_MAGIC, &MAGIC);
    for (i, &v) in grid.data().iter().enumerate() {
        let off = DATA_OFFSET + i * width;
        match dtype {
            Datatype::Int16 => put(off, &(v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16).to_le_bytes()),
            Datatype::Float32 => put(off, &(v as f32).to_le_bytes()),
            Datatype::Float64 => put(off, &v.to_le_bytes()),
        }
    }
    out
}

/// Converts a file to the opposite byte order (header fields and voxels).
pub fn byte_swap(bytes: &[u8]) -> Result<Vec<u8>> {
    let h = read_header(bytes)?;
    let dtype = Datatype::from_code(h.datatype)?;
    let mut out = bytes.to_vec();
    let mut flip = |off: usize, n: usize| out[off..off + n].reverse();
    flip(0, 4);
    for i in 0..8 {
        flip(OFF_DIM + 2 * i, 2);
    }
    flip(OFF_DATATYPE, 2);
    flip(OFF_BITPIX, 2);
    for i in 0..8 {
        flip(OFF_PIXDIM + 4 * i, 4);
    }
    flip(OFF_VOX_OFFSET, 4);
    flip(OFF_SCL_SLOPE, 4);
    flip(OFF_SCL_INTER, 4);
    let width = dtype.bitpix() as usize / 8;
    let start = h.vox_offset as usize;
    for off in (start..bytes.len()).step_by(width) {
        flip(off, width);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub case_id: String,
    pub modality_paths: Vec<PathBuf>,
    pub mask_path: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CaseManifest {
    pub entries: Vec<ManifestEntry>,
}

impl CaseManifest {
    pub fn num_modalities(&self) -> Option<usize> {
        self.entries.first().map(|e| e.modality_paths.len())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&e.case_id);
            for p in e.modality_paths.iter().chain(&e.mask_path) {
                out.push(',');
                out.push_str(&p.to_string_lossy());
            }
            out.push('\n');
        }
        out
    }
}

/// Parses `case_id,mod_1,...,mod_M[,mask]` lines for a declared `M`.
///
/// Blank lines and `#` comments are skipped. Every row must have the same
/// width as the first, and that width must be `M + 1` or `M + 2` fields.
pub fn load_manifest(text: &str, num_modalities: usize) -> Result<CaseManifest> {
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    let mut width = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        let paths = fields.len() - 1;
        let expected = *width.get_or_insert(fields.len());
        if fields.len() != expected || !(paths == num_modalities || paths == num_modalities + 1) {
            return Err(Error::InconsistentModalityCount {
                line: line_no,
                expected: num_modalities,
                found: paths,
            });
        }
        if fields.iter().any(|f| f.is_empty()) {
            return Err(Error::BadManifestLine {
                line: line_no,
                reason: "empty field".into(),
            });
        }
        let case_id = fields[0].to_string();
        if !seen.insert(case_id.clone()) {
            return Err(Error::DuplicateCaseId { line: line_no, case_id });
        }
        entries.push(ManifestEntry {
            case_id,
            modality_paths: fields[1..=num_modalities].iter().map(PathBuf::from).collect(),
            mask_path: fields.get(num_modalities + 1).map(PathBuf::from),
        });
    }
    Ok(CaseManifest { entries })
}
