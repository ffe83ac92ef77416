//! Minimal NIfTI-1 reader/writer (.nii / .nii.gz).
//!
//! Reads the common scalar datatypes, applies header scaling, decodes the
//! affine (sform preferred, qform fallback, pixdim last resort) and reorients
//! oblique or flipped volumes to closest-canonical RAS so downstream code can
//! assume axis-aligned grids. Writes single-file NIfTI-1 with an sform affine.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, WriteBytesExt};
use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use nalgebra::Matrix3;
use ndarray::{Array3, ShapeBuilder};

use crate::error::{Error, Result};
use crate::geometry::{closest_canonical_axes, Geometry};
use crate::volume::{ImageVolume, Modality, SegmentationMask};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;
const DT_UINT32: i16 = 768;

#[derive(Clone, Copy)]
enum Endian {
    Little,
    Big,
}

impl Endian {
    fn i16(&self, b: &[u8]) -> i16 {
        match self {
            Endian::Little => LittleEndian::read_i16(b),
            Endian::Big => BigEndian::read_i16(b),
        }
    }
    fn i32(&self, b: &[u8]) -> i32 {
        match self {
            Endian::Little => LittleEndian::read_i32(b),
            Endian::Big => BigEndian::read_i32(b),
        }
    }
    fn u16(&self, b: &[u8]) -> u16 {
        match self {
            Endian::Little => LittleEndian::read_u16(b),
            Endian::Big => BigEndian::read_u16(b),
        }
    }
    fn u32(&self, b: &[u8]) -> u32 {
        match self {
            Endian::Little => LittleEndian::read_u32(b),
            Endian::Big => BigEndian::read_u32(b),
        }
    }
    fn f32(&self, b: &[u8]) -> f32 {
        match self {
            Endian::Little => LittleEndian::read_f32(b),
            Endian::Big => BigEndian::read_f32(b),
        }
    }
    fn f64(&self, b: &[u8]) -> f64 {
        match self {
            Endian::Little => LittleEndian::read_f64(b),
            Endian::Big => BigEndian::read_f64(b),
        }
    }
}

fn read_all_bytes(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = [0u8; 2];
    let n = file.read(&mut head).map_err(|e| Error::io(path, e))?;
    let mut raw = Vec::new();
    if n == 2 && head == [0x1f, 0x8b] {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        MultiGzDecoder::new(file)
            .read_to_end(&mut raw)
            .map_err(|e| Error::format(path, format!("gzip decode failed: {e}")))?;
    } else {
        raw.extend_from_slice(&head[..n]);
        file.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
    }
    Ok(raw)
}

struct ParsedHeader {
    dims: [usize; 3],
    datatype: i16,
    scl_slope: f32,
    scl_inter: f32,
    vox_offset: usize,
    geom: Geometry,
    endian: Endian,
}

fn parse_header(path: &Path, raw: &[u8]) -> Result<ParsedHeader> {
    if raw.len() < HEADER_SIZE {
        return Err(Error::format(
            path,
            format!("file too short for a NIfTI-1 header ({} bytes)", raw.len()),
        ));
    }
    let endian = if LittleEndian::read_u32(&raw[0..4]) == HEADER_SIZE as u32 {
        Endian::Little
    } else if BigEndian::read_u32(&raw[0..4]) == HEADER_SIZE as u32 {
        Endian::Big
    } else {
        return Err(Error::format(path, "sizeof_hdr is not 348"));
    };
    if &raw[344..348] != MAGIC_SINGLE && &raw[344..348] != b"ni1\0" {
        return Err(Error::format(path, "missing NIfTI magic"));
    }

    let mut dim = [0i64; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = endian.i16(&raw[40 + 2 * i..]) as i64;
        // Large volumes may be stored with the dim as u16.
        if *d < 0 {
            *d = endian.u16(&raw[40 + 2 * i..]) as i64;
        }
    }
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(Error::format(path, format!("invalid dim[0] = {ndim}")));
    }
    if ndim > 3 {
        for extra in 4..=ndim as usize {
            if dim[extra] > 1 {
                return Err(Error::UnsupportedShape {
                    path: path.to_path_buf(),
                    reason: format!(
                        "volume has {} points along axis {extra}; only single-timepoint 3D volumes are supported",
                        dim[extra]
                    ),
                });
            }
        }
    }
    let dims = [
        dim[1].max(1) as usize,
        if ndim >= 2 { dim[2].max(1) as usize } else { 1 },
        if ndim >= 3 { dim[3].max(1) as usize } else { 1 },
    ];

    let datatype = endian.i16(&raw[70..]);
    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = endian.f32(&raw[76 + 4 * i..]);
    }
    let vox_offset = endian.f32(&raw[108..]) as usize;
    let scl_slope = endian.f32(&raw[112..]);
    let scl_inter = endian.f32(&raw[116..]);
    let qform_code = endian.i16(&raw[252..]);
    let sform_code = endian.i16(&raw[254..]);

    let geom = if sform_code > 0 {
        let mut rows = [[0f64; 4]; 3];
        for (r, row) in rows.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = endian.f32(&raw[280 + 16 * r + 4 * c..]) as f64;
            }
        }
        geometry_from_affine(path, &rows)?
    } else if qform_code > 0 {
        let b = endian.f32(&raw[256..]) as f64;
        let c = endian.f32(&raw[260..]) as f64;
        let d = endian.f32(&raw[264..]) as f64;
        let a = (1.0 - b * b - c * c - d * d).max(0.0).sqrt();
        let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let rot = Matrix3::new(
            a * a + b * b - c * c - d * d,
            2.0 * (b * c - a * d),
            2.0 * (b * d + a * c),
            2.0 * (b * c + a * d),
            a * a + c * c - b * b - d * d,
            2.0 * (c * d - a * b),
            2.0 * (b * d - a * c),
            2.0 * (c * d + a * b),
            a * a + d * d - b * b - c * c,
        );
        let mut direction = [[0.0; 3]; 3];
        for r in 0..3 {
            for co in 0..3 {
                let s = if co == 2 { qfac } else { 1.0 };
                direction[r][co] = rot[(r, co)] * s;
            }
        }
        Geometry {
            spacing: [
                pixdim[1].abs() as f64,
                pixdim[2].abs() as f64,
                pixdim[3].abs() as f64,
            ],
            origin: [
                endian.f32(&raw[268..]) as f64,
                endian.f32(&raw[272..]) as f64,
                endian.f32(&raw[276..]) as f64,
            ],
            direction,
        }
    } else {
        Geometry::identity([
            pixdim[1].abs().max(f32::MIN_POSITIVE) as f64,
            pixdim[2].abs().max(f32::MIN_POSITIVE) as f64,
            pixdim[3].abs().max(f32::MIN_POSITIVE) as f64,
        ])
    };

    Ok(ParsedHeader {
        dims,
        datatype,
        scl_slope,
        scl_inter,
        vox_offset: vox_offset.max(VOX_OFFSET),
        geom,
        endian,
    })
}

fn geometry_from_affine(path: &Path, rows: &[[f64; 4]; 3]) -> Result<Geometry> {
    let mut spacing = [0.0; 3];
    let mut direction = [[0.0; 3]; 3];
    for a in 0..3 {
        let col = [rows[0][a], rows[1][a], rows[2][a]];
        let norm = (col[0] * col[0] + col[1] * col[1] + col[2] * col[2]).sqrt();
        if norm <= 0.0 {
            return Err(Error::format(path, "affine has a zero-length column"));
        }
        spacing[a] = norm;
        for r in 0..3 {
            direction[r][a] = col[r] / norm;
        }
    }
    let geom = Geometry {
        spacing,
        origin: [rows[0][3], rows[1][3], rows[2][3]],
        direction,
    };
    geom.validate()
        .map_err(|e| Error::format(path, format!("affine is not orthogonal: {e}")))?;
    Ok(geom)
}

fn decode_data(path: &Path, hdr: &ParsedHeader, raw: &[u8]) -> Result<Vec<f32>> {
    let n = hdr.dims[0] * hdr.dims[1] * hdr.dims[2];
    let elem = match hdr.datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_UINT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => {
            return Err(Error::format(
                path,
                format!("unsupported NIfTI datatype code {other}"),
            ))
        }
    };
    let need = hdr.vox_offset + n * elem;
    if raw.len() < need {
        return Err(Error::format(
            path,
            format!("data truncated: need {need} bytes, file has {}", raw.len()),
        ));
    }
    let body = &raw[hdr.vox_offset..hdr.vox_offset + n * elem];
    let e = hdr.endian;
    let mut out = Vec::with_capacity(n);
    match hdr.datatype {
        DT_UINT8 => out.extend(body.iter().map(|&v| v as f32)),
        DT_INT8 => out.extend(body.iter().map(|&v| v as i8 as f32)),
        DT_INT16 => out.extend(body.chunks_exact(2).map(|b| e.i16(b) as f32)),
        DT_UINT16 => out.extend(body.chunks_exact(2).map(|b| e.u16(b) as f32)),
        DT_INT32 => out.extend(body.chunks_exact(4).map(|b| e.i32(b) as f32)),
        DT_UINT32 => out.extend(body.chunks_exact(4).map(|b| e.u32(b) as f32)),
        DT_FLOAT32 => out.extend(body.chunks_exact(4).map(|b| e.f32(b))),
        DT_FLOAT64 => out.extend(body.chunks_exact(8).map(|b| e.f64(b) as f32)),
        _ => unreachable!(),
    }
    let slope = hdr.scl_slope;
    if slope != 0.0 && (slope != 1.0 || hdr.scl_inter != 0.0) {
        for v in &mut out {
            *v = *v * slope + hdr.scl_inter;
        }
    }
    Ok(out)
}

/// Reorient to the canonical axis order implied by the direction matrix.
/// Pure permutation/flip matrices become exactly identity; oblique ones keep
/// their residual rotation.
fn to_canonical(vol: ImageVolume) -> ImageVolume {
    let dir = vol.geom.direction_matrix();
    let axes = closest_canonical_axes(&dir);
    let identity = axes == [(0, 1.0), (1, 1.0), (2, 1.0)];
    if identity {
        return vol;
    }
    let dims = vol.dims();
    let mut first_voxel = [0.0f64; 3]; // old index that becomes the new (0,0,0)
    let mut spacing = [0.0; 3];
    let mut direction = [[0.0; 3]; 3];
    for world in 0..3 {
        let (old_axis, sign) = axes[world];
        spacing[world] = vol.geom.spacing[old_axis];
        if sign < 0.0 {
            first_voxel[old_axis] = (dims[old_axis] - 1) as f64;
        }
        for r in 0..3 {
            direction[r][world] = sign * vol.geom.direction[r][old_axis];
        }
    }
    let origin = vol.geom.index_to_world(first_voxel);

    let mut data = vol
        .data
        .permuted_axes([axes[0].0, axes[1].0, axes[2].0]);
    for world in 0..3 {
        if axes[world].1 < 0.0 {
            data.invert_axis(ndarray::Axis(world));
        }
    }
    ImageVolume {
        data: data.as_standard_layout().to_owned(),
        geom: Geometry {
            spacing,
            origin,
            direction,
        },
        modality: vol.modality,
    }
}

/// Load a 3D volume (optionally gzip-compressed NIfTI-1).
pub fn load_volume(path: impl AsRef<Path>) -> Result<ImageVolume> {
    let path = path.as_ref();
    let raw = read_all_bytes(path)?;
    let hdr = parse_header(path, &raw)?;
    let flat = decode_data(path, &hdr, &raw)?;
    // NIfTI stores the first axis fastest; build column-major then standardize.
    let data = Array3::from_shape_vec(
        (hdr.dims[0], hdr.dims[1], hdr.dims[2]).f(),
        flat,
    )
    .expect("shape/data length checked during decode")
    .as_standard_layout()
    .to_owned();
    let vol = to_canonical(ImageVolume::new(data, hdr.geom, Modality::Other));
    vol.validate()?;
    Ok(vol)
}

/// Load a label mask; any value above 0.5 maps to foreground.
pub fn load_mask(path: impl AsRef<Path>) -> Result<SegmentationMask> {
    let vol = load_volume(path)?;
    let labels = vol.data.mapv(|v| u8::from(v > 0.5));
    Ok(SegmentationMask::new(labels, vol.geom))
}

fn write_header<W: Write>(
    w: &mut W,
    dims: [usize; 3],
    datatype: i16,
    bitpix: i16,
    geom: &Geometry,
) -> std::io::Result<()> {
    let mut hdr = vec![0u8; HEADER_SIZE];
    LittleEndian::write_u32(&mut hdr[0..4], HEADER_SIZE as u32);
    hdr[39] = 0; // dim_info
    let dim: [i16; 8] = [3, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut hdr[40 + 2 * i..], *d);
    }
    LittleEndian::write_i16(&mut hdr[70..], datatype);
    LittleEndian::write_i16(&mut hdr[72..], bitpix);
    let pixdim = [
        1.0f32,
        geom.spacing[0] as f32,
        geom.spacing[1] as f32,
        geom.spacing[2] as f32,
        1.0,
        1.0,
        1.0,
        1.0,
    ];
    for (i, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut hdr[76 + 4 * i..], *p);
    }
    LittleEndian::write_f32(&mut hdr[108..], VOX_OFFSET as f32); // vox_offset
    LittleEndian::write_f32(&mut hdr[112..], 1.0); // scl_slope
    LittleEndian::write_f32(&mut hdr[116..], 0.0); // scl_inter
    hdr[123] = 2 | 8; // xyzt_units: mm + seconds
    LittleEndian::write_i16(&mut hdr[252..], 0); // qform_code
    LittleEndian::write_i16(&mut hdr[254..], 1); // sform_code: scanner anatomical
    for r in 0..3 {
        for c in 0..3 {
            let v = geom.direction[r][c] * geom.spacing[c];
            LittleEndian::write_f32(&mut hdr[280 + 16 * r + 4 * c..], v as f32);
        }
        LittleEndian::write_f32(&mut hdr[280 + 16 * r + 12..], geom.origin[r] as f32);
    }
    hdr[344..348].copy_from_slice(MAGIC_SINGLE);
    w.write_all(&hdr)?;
    w.write_all(&[0u8; 4]) // no extensions
}

fn open_writer(path: &Path) -> Result<Box<dyn Write>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() && !parent.exists() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let gz = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("gz"))
        .unwrap_or(false);
    Ok(if gz {
        Box::new(GzEncoder::new(file, Compression::fast()))
    } else {
        Box::new(std::io::BufWriter::new(file))
    })
}

/// Save an image volume as float32 NIfTI-1 (gzipped when the path ends in .gz).
pub fn save_volume(vol: &ImageVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = open_writer(path)?;
    let dims = vol.dims();
    write_header(&mut w, dims, DT_FLOAT32, 32, &vol.geom).map_err(|e| Error::io(path, e))?;
    // First axis fastest on disk.
    let mut buf = Vec::with_capacity(dims[0] * dims[1] * dims[2] * 4);
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                buf.write_f32::<LittleEndian>(vol.data[[i, j, k]])
                    .expect("in-memory write");
            }
        }
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Save a segmentation mask as uint8 NIfTI-1.
pub fn save_mask(mask: &SegmentationMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = open_writer(path)?;
    let dims = mask.dims();
    write_header(&mut w, dims, DT_UINT8, 8, &mask.geom).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                buf.push(mask.labels[[i, j, k]]);
            }
        }
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
