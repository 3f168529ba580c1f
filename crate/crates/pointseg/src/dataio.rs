//! File formats and dataset management.
//!
//! Readers are strict: every malformed input is rejected with an error
//! naming what was expected instead of yielding partial data. Writers emit
//! the exact byte formats the readers accept, so round trips are bit-exact.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::projection::{LabeledCloud, Point, PointCloud, SphericalFrame, CLASS_COUNT};
use crate::tensor::Tensor;

/// Loads a raw Velodyne scan: consecutive little-endian f32 quadruples
/// (x, y, z, intensity). An empty file is an empty cloud; a length that is
/// not a multiple of 16 bytes is a truncation error reporting where the
/// trailing bytes start.
pub fn load_velodyne_bin(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 16 != 0 {
        let offset = bytes.len() - bytes.len() % 16;
        return Err(Error::data(
            "velodyne scan",
            format!(
                "{} is truncated: {} trailing bytes at offset {offset}",
                path.display(),
                bytes.len() - offset
            ),
        ));
    }
    let points = bytes
        .chunks_exact(16)
        .map(|q| Point {
            x: f32::from_le_bytes(q[0..4].try_into().unwrap()),
            y: f32::from_le_bytes(q[4..8].try_into().unwrap()),
            z: f32::from_le_bytes(q[8..12].try_into().unwrap()),
            intensity: f32::from_le_bytes(q[12..16].try_into().unwrap()),
        })
        .collect();
    Ok(PointCloud { points })
}

pub fn save_velodyne_bin(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(cloud.points.len() * 16);
    for p in &cloud.points {
        bytes.extend_from_slice(&p.x.to_le_bytes());
        bytes.extend_from_slice(&p.y.to_le_bytes());
        bytes.extend_from_slice(&p.z.to_le_bytes());
        bytes.extend_from_slice(&p.intensity.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

const NPY_MAGIC: &[u8; 6] = b"\x93NUMPY";

/// Reads a version 1.0 array container holding C-contiguous little-endian
/// f32 data. The header dict is parsed bit-exactly per the container spec;
/// any other dtype, ordering, or version is rejected by name.
pub fn read_npy(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_npy(&bytes).map_err(|detail| Error::data(format!("array file {}", path.display()), detail))
}

fn parse_npy(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    if bytes.len() < 10 {
        return Err(format!("file of {} bytes is too short for a header", bytes.len()));
    }
    if &bytes[..6] != NPY_MAGIC {
        return Err("missing magic bytes 0x93 NUMPY".into());
    }
    let (major, minor) = (bytes[6], bytes[7]);
    if (major, minor) != (1, 0) {
        return Err(format!("format version {major}.{minor}, expected 1.0"));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let data_start = 10 + header_len;
    if bytes.len() < data_start {
        return Err(format!(
            "declared header of {header_len} bytes exceeds the file"
        ));
    }
    let header = std::str::from_utf8(&bytes[10..data_start])
        .map_err(|_| "header is not valid UTF-8".to_string())?;

    let descr = dict_str(header, "descr").ok_or("header lacks a 'descr' entry")?;
    if descr != "<f4" {
        return Err(format!("dtype '{descr}', expected little-endian f32 '<f4'"));
    }
    match dict_raw(header, "fortran_order").ok_or("header lacks a 'fortran_order' entry")? {
        "False" => {}
        "True" => return Err("fortran_order is True, expected C-contiguous data".into()),
        other => return Err(format!("unparseable fortran_order value '{other}'")),
    }
    let shape_src = dict_raw(header, "shape").ok_or("header lacks a 'shape' entry")?;
    let shape = parse_shape(shape_src)?;

    let count: usize = shape.iter().product();
    let payload = &bytes[data_start..];
    if payload.len() != count * 4 {
        return Err(format!(
            "shape {shape:?} needs {} data bytes, file has {}",
            count * 4,
            payload.len()
        ));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

/// Value of a single-quoted string entry in the header dict.
fn dict_str<'a>(header: &'a str, key: &str) -> Option<&'a str> {
    let raw = dict_raw(header, key)?;
    raw.strip_prefix('\'')?.strip_suffix('\'')
}

/// Raw text of a header dict value: everything after `'key':` up to the
/// next top-level comma or the closing brace.
fn dict_raw<'a>(header: &'a str, key: &str) -> Option<&'a str> {
    let needle = format!("'{key}':");
    let start = header.find(&needle)? + needle.len();
    let rest = &header[start..];
    let mut depth = 0usize;
    let mut end = rest.len();
    for (i, c) in rest.char_indices() {
        match c {
            '(' | '[' => depth += 1,
            ')' | ']' => depth = depth.saturating_sub(1),
            ',' | '}' if depth == 0 => {
                end = i;
                break;
            }
            _ => {}
        }
    }
    Some(rest[..end].trim())
}

fn parse_shape(src: &str) -> std::result::Result<Vec<usize>, String> {
    let inner = src
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| format!("shape '{src}' is not a tuple"))?;
    inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| format!("shape extent '{s}' is not a nonnegative integer"))
        })
        .collect()
}

/// Writes a tensor as a version 1.0 array container ('<f4', C order).
pub fn write_npy(tensor: &Tensor, path: &Path) -> Result<()> {
    let shape = tensor
        .shape()
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(", ");
    let tuple = if tensor.rank() == 1 {
        format!("({shape},)")
    } else {
        format!("({shape})")
    };
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {tuple}, }}");
    // Pad so the data section starts on a 64-byte boundary, newline last.
    let unpadded = 10 + header.len() + 1;
    header.extend(std::iter::repeat_n(' ', unpadded.next_multiple_of(64) - unpadded));
    header.push('\n');

    let mut bytes = Vec::with_capacity(10 + header.len() + tensor.len() * 4);
    bytes.extend_from_slice(NPY_MAGIC);
    bytes.extend_from_slice(&[1, 0]);
    bytes.extend_from_slice(&(header.len() as u16).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    for &v in tensor.data().iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub const FRAME_ARRAY_SHAPE: [usize; 3] = [64, 512, 6];

/// Loads one dataset frame array and checks it is exactly 64x512x6.
pub fn load_frame_array(path: &Path) -> Result<Tensor> {
    let tensor = read_npy(path)?;
    if tensor.shape() != FRAME_ARRAY_SHAPE {
        return Err(Error::data(
            format!("array file {}", path.display()),
            format!(
                "shape {:?}, expected (64, 512, 6)",
                tensor.shape()
            ),
        ));
    }
    Ok(tensor)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Fraction of files assigned to the training split (mirrors the published
/// dataset's roughly 8000/2800 proportion).
const TRAIN_PERCENT: u64 = 74;

/// FNV-1a on the file name; stable across platforms and runs.
fn fnv1a(name: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn split_for(path: &Path) -> Split {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    if fnv1a(&name) % 100 < TRAIN_PERCENT {
        Split::Train
    } else {
        Split::Val
    }
}

/// Sorted listing of a dataset directory with a deterministic per-file
/// split assignment.
#[derive(Clone, Debug)]
pub struct DatasetIndex {
    pub entries: Vec<(PathBuf, Split)>,
    pub seed: u64,
}

impl DatasetIndex {
    pub fn scan(dir: &Path, seed: u64) -> Result<Self> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "npy"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::data(
                "dataset",
                format!("no .npy frames under {}", dir.display()),
            ));
        }
        let entries = paths
            .into_iter()
            .map(|p| {
                let split = split_for(&p);
                (p, split)
            })
            .collect();
        Ok(DatasetIndex { entries, seed })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn split_paths(&self, split: Split) -> Vec<&Path> {
        self.entries
            .iter()
            .filter(|(_, s)| *s == split)
            .map(|(p, _)| p.as_path())
            .collect()
    }
}

/// Deterministic shuffled batching: one permutation per (seed, epoch),
/// chunked into groups of `batch_size` with the final partial group kept.
pub fn batches<T: Clone>(
    items: &[T],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<T>>> {
    if items.is_empty() {
        return Err(Error::data("batching", "empty index"));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&epoch.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut rng);
    Ok(order
        .chunks(batch_size)
        .map(|chunk| chunk.iter().map(|&i| items[i].clone()).collect())
        .collect())
}

/// Palette for class-map images: background black, car blue, pedestrian
/// green, cyclist red.
pub const CLASS_COLORS: [[u8; 3]; CLASS_COUNT] =
    [[0, 0, 0], [0, 0, 255], [0, 255, 0], [255, 0, 0]];

/// Writes a per-pixel class map as a binary pixmap (P6), image width equal
/// to the frame width.
pub fn save_class_map_image(
    classes: &[u8],
    height: usize,
    width: usize,
    path: &Path,
) -> Result<()> {
    if classes.len() != height * width {
        return Err(Error::shape(
            "class map image",
            format!("{} entries for a {height}x{width} map", classes.len()),
        ));
    }
    let mut out = Vec::with_capacity(32 + classes.len() * 3);
    write!(out, "P6\n{width} {height}\n255\n").expect("vec write");
    for &c in classes {
        let color = CLASS_COLORS
            .get(c as usize)
            .ok_or_else(|| Error::data("class map image", format!("class id {c} out of range")))?;
        out.extend_from_slice(color);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Grayscale preview of a frame's range channel (white = farthest return).
pub fn save_range_preview(frame: &SphericalFrame, path: &Path) -> Result<()> {
    let (h, w) = (frame.height(), frame.width());
    let cd = frame.channels.data();
    let max_range = (0..h * w)
        .map(|px| cd[px * 5 + 4])
        .fold(0.0f32, f32::max)
        .max(1e-6);
    let mut out = Vec::with_capacity(32 + h * w * 3);
    write!(out, "P6\n{w} {h}\n255\n").expect("vec write");
    for px in 0..h * w {
        let g = if frame.occupancy[px] {
            (cd[px * 5 + 4] / max_range * 255.0).round() as u8
        } else {
            0
        };
        out.extend_from_slice(&[g, g, g]);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes a labeled cloud as ASCII lines `x y z label`. Coordinates use
/// the shortest decimal form that parses back to the same f32, so the
/// reader reproduces them bit-exactly. Intensity is not part of the
/// format; the reader fills it with zero.
pub fn save_labeled_cloud(cloud: &LabeledCloud, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (p, l) in cloud.cloud.points.iter().zip(&cloud.labels) {
        out.push_str(&format!("{} {} {} {}\n", p.x, p.y, p.z, l));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_labeled_cloud(path: &Path) -> Result<LabeledCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = |what: &str| {
            Error::data(
                format!("labeled cloud {}", path.display()),
                format!("line {}: {what}: '{line}'", lineno + 1),
            )
        };
        if fields.len() != 4 {
            return Err(bad("expected 4 fields 'x y z label'"));
        }
        let coord = |s: &str| s.parse::<f32>().map_err(|_| bad("unparseable coordinate"));
        points.push(Point {
            x: coord(fields[0])?,
            y: coord(fields[1])?,
            z: coord(fields[2])?,
            intensity: 0.0,
        });
        labels.push(
            fields[3]
                .parse::<u8>()
                .map_err(|_| bad("unparseable label"))?,
        );
    }
    LabeledCloud::new(PointCloud { points }, labels)
}

/// True when every index entry lands in exactly one split (they always do;
/// kept as a checkable statement of the invariant).
pub fn splits_partition(index: &DatasetIndex) -> bool {
    let train: BTreeSet<_> = index.split_paths(Split::Train).into_iter().collect();
    let val: BTreeSet<_> = index.split_paths(Split::Val).into_iter().collect();
    train.is_disjoint(&val) && train.len() + val.len() == index.len()
}
