//! Readers for the on-disk dataset formats: IDX (MNIST family), CIFAR-10
//! binary batches, MATLAB v5 files (SVHN) and Omniglot PNG trees.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::{GzDecoder, ZlibDecoder};
use image::imageops::FilterType;

use super::Split;
use crate::error::{Error, Result};

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptData { path: path.to_path_buf(), reason: reason.into() }
}

/// Read a file, transparently gunzipping `.gz` siblings.
fn read_maybe_gz(base: &Path) -> Result<(Vec<u8>, PathBuf)> {
    if base.exists() {
        return Ok((fs::read(base)?, base.to_path_buf()));
    }
    let gz = base.with_file_name(format!("{}.gz", base.file_name().unwrap().to_string_lossy()));
    if gz.exists() {
        let mut out = Vec::new();
        GzDecoder::new(fs::File::open(&gz)?).read_to_end(&mut out).map_err(|e| corrupt(&gz, e.to_string()))?;
        return Ok((out, gz));
    }
    Err(Error::MissingData { path: gz })
}

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(b[at..at + 4].try_into().unwrap())
}

/// Parse an IDX file of unsigned bytes with the given number of dimensions.
pub(crate) fn parse_idx(bytes: &[u8], ndim: usize, path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(corrupt(path, "truncated header"));
    }
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08 || bytes[3] as usize != ndim {
        return Err(corrupt(path, format!("bad magic {:02x?}", &bytes[..4])));
    }
    let dims: Vec<usize> = (0..ndim).map(|k| be_u32(bytes, 4 + 4 * k) as usize).collect();
    let n: usize = dims.iter().product();
    if bytes.len() != header + n {
        return Err(corrupt(path, format!("expected {} payload bytes, found {}", n, bytes.len() - header)));
    }
    Ok((dims, bytes[header..].to_vec()))
}

pub(crate) fn load_idx(dir: &Path, split: Split) -> Result<(Vec<u8>, Vec<PathBuf>)> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let (img_bytes, img_path) = read_maybe_gz(&dir.join(format!("{prefix}-images-idx3-ubyte")))?;
    let (dims, pixels) = parse_idx(&img_bytes, 3, &img_path)?;
    if dims[1] != 28 || dims[2] != 28 {
        return Err(corrupt(&img_path, format!("images are {}x{}, expected 28x28", dims[1], dims[2])));
    }
    let (lab_bytes, lab_path) = read_maybe_gz(&dir.join(format!("{prefix}-labels-idx1-ubyte")))?;
    let (ldims, _) = parse_idx(&lab_bytes, 1, &lab_path)?;
    if ldims[0] != dims[0] {
        return Err(corrupt(&lab_path, format!("{} labels for {} images", ldims[0], dims[0])));
    }
    Ok((pixels, vec![img_path, lab_path]))
}

/// CIFAR-10 binary batches: each record is a label byte followed by the red,
/// green and blue 32x32 planes. Output is HWC.
pub(crate) fn load_cifar10(dir: &Path, split: Split) -> Result<(Vec<u8>, Vec<PathBuf>)> {
    let base = dir.join("cifar-10-batches-bin");
    let files: Vec<PathBuf> = match split {
        Split::Train => (1..=5).map(|k| base.join(format!("data_batch_{k}.bin"))).collect(),
        Split::Test => vec![base.join("test_batch.bin")],
    };
    const REC: usize = 1 + 3072;
    let mut out = Vec::new();
    for f in &files {
        if !f.exists() {
            return Err(Error::MissingData { path: f.clone() });
        }
        let bytes = fs::read(f)?;
        if bytes.is_empty() || bytes.len() % REC != 0 {
            return Err(corrupt(f, format!("{} bytes is not a multiple of {REC}", bytes.len())));
        }
        for rec in bytes.chunks_exact(REC) {
            let planes = &rec[1..];
            for p in 0..1024 {
                for c in 0..3 {
                    out.push(planes[c * 1024 + p]);
                }
            }
        }
    }
    Ok((out, files))
}

/// SVHN cropped digits: variable `X` of shape 32x32x3xN in column-major order.
pub(crate) fn load_svhn(dir: &Path, split: Split) -> Result<(Vec<u8>, Vec<PathBuf>)> {
    let path = dir.join(format!("{}_32x32.mat", split.as_str()));
    if !path.exists() {
        return Err(Error::MissingData { path });
    }
    let (dims, data) = read_mat_uint8(&path, "X")?;
    if dims.len() != 4 || dims[0] != 32 || dims[1] != 32 || dims[2] != 3 {
        return Err(corrupt(&path, format!("X has dims {dims:?}, expected [32, 32, 3, N]")));
    }
    let n = dims[3];
    let mut out = vec![0u8; n * 3072];
    for k in 0..n {
        for ch in 0..3 {
            for c in 0..32 {
                for r in 0..32 {
                    out[k * 3072 + (r * 32 + c) * 3 + ch] = data[r + 32 * c + 1024 * ch + 3072 * k];
                }
            }
        }
    }
    Ok((out, vec![path]))
}

const MI_INT8: u32 = 1;
const MI_UINT8: u32 = 2;
const MI_INT32: u32 = 5;
const MI_UINT32: u32 = 6;
const MI_DOUBLE: u32 = 9;
const MI_MATRIX: u32 = 14;
const MI_COMPRESSED: u32 = 15;

struct Element<'a> {
    ty: u32,
    data: &'a [u8],
}

/// Split a little-endian MAT v5 byte stream into top-level data elements.
fn mat_elements<'a>(mut buf: &'a [u8], path: &Path) -> Result<Vec<Element<'a>>> {
    let mut out = Vec::new();
    while buf.len() >= 8 {
        let w0 = u32::from_le_bytes(buf[0..4].try_into().unwrap());
        if w0 >> 16 != 0 {
            let (ty, n) = (w0 & 0xffff, (w0 >> 16) as usize);
            if n > 4 {
                return Err(corrupt(path, "small data element longer than 4 bytes"));
            }
            out.push(Element { ty, data: &buf[4..4 + n] });
            buf = &buf[8..];
            continue;
        }
        let n = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
        if buf.len() < 8 + n {
            return Err(corrupt(path, "data element runs past end of file"));
        }
        out.push(Element { ty: w0, data: &buf[8..8 + n] });
        let padded = if w0 == MI_COMPRESSED { n } else { n.div_ceil(8) * 8 };
        buf = &buf[(8 + padded).min(buf.len())..];
    }
    Ok(out)
}

fn numeric_to_u8(el: &Element, path: &Path) -> Result<Vec<u8>> {
    match el.ty {
        MI_UINT8 => Ok(el.data.to_vec()),
        MI_DOUBLE => el
            .data
            .chunks_exact(8)
            .map(|c| {
                let v = f64::from_le_bytes(c.try_into().unwrap());
                if (0.0..=255.0).contains(&v) {
                    Ok(v.round() as u8)
                } else {
                    Err(corrupt(path, format!("value {v} outside 0..=255")))
                }
            })
            .collect(),
        t => Err(corrupt(path, format!("unsupported numeric element type {t}"))),
    }
}

/// Parse one miMATRIX element; returns (name, dims, data) for numeric arrays.
fn parse_matrix(data: &[u8], path: &Path) -> Result<Option<(String, Vec<usize>, Vec<u8>)>> {
    let subs = mat_elements(data, path)?;
    if subs.len() < 4 || subs[0].ty != MI_UINT32 || subs[1].ty != MI_INT32 {
        return Ok(None);
    }
    let class = subs[0].data[0];
    // mxDOUBLE_CLASS = 6, mxUINT8_CLASS = 9
    if class != 6 && class != 9 {
        return Ok(None);
    }
    let dims: Vec<usize> =
        subs[1].data.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap()) as usize).collect();
    if subs[2].ty != MI_INT8 {
        return Err(corrupt(path, "array name element missing"));
    }
    let name = String::from_utf8_lossy(subs[2].data).into_owned();
    let values = numeric_to_u8(&subs[3], path)?;
    if values.len() != dims.iter().product::<usize>() {
        return Err(corrupt(path, format!("array `{name}` has {} values for dims {dims:?}", values.len())));
    }
    Ok(Some((name, dims, values)))
}

/// Read a numeric variable from a MATLAB level-5 file (compressed or not) as
/// bytes in column-major order.
pub fn read_mat_uint8(path: &Path, var: &str) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 128 {
        return Err(corrupt(path, "shorter than the MAT v5 header"));
    }
    if &bytes[126..128] != b"IM" {
        return Err(corrupt(path, "not a little-endian MAT v5 file"));
    }
    for el in mat_elements(&bytes[128..], path)? {
        let inflated;
        let matrix = match el.ty {
            MI_COMPRESSED => {
                let mut out = Vec::new();
                ZlibDecoder::new(el.data).read_to_end(&mut out).map_err(|e| corrupt(path, e.to_string()))?;
                inflated = out;
                match mat_elements(&inflated, path)?.into_iter().next() {
                    Some(inner) if inner.ty == MI_MATRIX => parse_matrix(inner.data, path)?,
                    _ => None,
                }
            }
            MI_MATRIX => parse_matrix(el.data, path)?,
            _ => None,
        };
        if let Some((name, dims, data)) = matrix {
            if name == var {
                return Ok((dims, data));
            }
        }
    }
    Err(corrupt(path, format!("variable `{var}` not found")))
}

fn collect_pngs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_pngs(&p, out)?;
        } else if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(p);
        }
    }
    Ok(())
}

/// Omniglot character PNGs; background alphabets form the train split and
/// evaluation alphabets the test split.
pub(crate) fn load_omniglot(dir: &Path, split: Split) -> Result<(Vec<u8>, Vec<PathBuf>)> {
    let sub = dir.join(match split {
        Split::Train => "images_background",
        Split::Test => "images_evaluation",
    });
    if !sub.is_dir() {
        return Err(Error::MissingData { path: sub });
    }
    let mut files = Vec::new();
    collect_pngs(&sub, &mut files)?;
    if files.is_empty() {
        return Err(corrupt(&sub, "no PNG files"));
    }
    let mut out = Vec::with_capacity(files.len() * 784);
    for f in &files {
        let img = image::open(f).map_err(|e| corrupt(f, e.to_string()))?.to_luma8();
        let small = image::imageops::resize(&img, 28, 28, FilterType::Triangle);
        out.extend(small.as_raw().iter().map(|&v| 255 - v));
    }
    Ok((out, vec![sub]))
}
