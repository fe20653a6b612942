//! On-disk layout of a dataset directory:
//!
//! ```text
//! images/<image_id>.rsb    RSB1 tensors, one per image
//! triplets.jsonl           {"image_id","question","answer","type","tile"} per line
//! splits.json              {"tiles": {"<tile>": "train"|"validation"|"test"}}
//! scene_graphs.jsonl       one scene graph per image, in image order
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{Dataset, MultispectralImage, SceneGraph, SplitAssignment, Triplet};
use crate::error::{Error, Result};
use crate::numerics::{Reader, Tensor};

const RSB_MAGIC: &[u8; 4] = b"RSB1";
const RSB_HEADER: usize = 16;

/// `"RSB1" | u32 c | u32 h | u32 w | f64 values (band-major, row-major)`,
/// little-endian.
pub fn encode_rsb(t: &Tensor) -> Result<Vec<u8>> {
    let &[c, h, w] = t.shape() else {
        return Err(Error::Shape(format!("RSB holds [c, h, w] tensors, got {:?}", t.shape())));
    };
    let mut out = Vec::with_capacity(RSB_HEADER + 8 * t.numel());
    out.extend_from_slice(RSB_MAGIC);
    for d in [c, h, w] {
        let d = u32::try_from(d).map_err(|_| Error::Shape(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn decode_one(r: &mut Reader<'_>) -> Result<Tensor> {
    let start = r.pos;
    r.magic(RSB_MAGIC)?;
    let c = r.u32("band count")? as usize;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    if c == 0 || h == 0 || w == 0 {
        r.pos = start + 4;
        return Err(r.err(format!("zero dimension in {c}x{h}x{w}")));
    }
    let numel = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .filter(|n| n.checked_mul(8).is_some())
        .ok_or_else(|| r.err(format!("dimensions {c}x{h}x{w} overflow")))?;
    let expected = RSB_HEADER + 8 * numel;
    let available = r.bytes.len() - start;
    if available < expected {
        return Err(Error::Truncated {
            file: r.file.to_path_buf(),
            expected: start + expected,
            actual: r.bytes.len(),
        });
    }
    let values = r.f64s(numel, "values")?;
    Tensor::new(vec![c, h, w], values)
}

pub fn decode_rsb(file: &Path, bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(file, bytes);
    let t = decode_one(&mut r)?;
    r.finish()?;
    Ok(t)
}

/// Consecutive RSB records in one byte buffer.
pub fn decode_rsb_stack(file: &Path, bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut r = Reader::new(file, bytes);
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        out.push(decode_one(&mut r)?);
    }
    if out.is_empty() {
        return Err(r.err("empty RSB stack"));
    }
    Ok(out)
}

pub fn write_rsb(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_rsb(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_rsb(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_rsb(path, &bytes)
}

pub fn read_rsb_stack(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_rsb_stack(path, &bytes)
}

pub(crate) fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("serializable"));
        out.push('\n');
    }
    out
}

pub(crate) fn parse_jsonl<T: DeserializeOwned>(path: &Path, text: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            let item = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
                file: path.to_path_buf(),
                offset,
                msg: e.to_string(),
            })?;
            out.push(item);
        }
        offset += line.len();
    }
    Ok(out)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("images").join(format!("{id}.rsb"))
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    ds.check_consistency()?;
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for (id, img) in ds.image_ids.iter().zip(&ds.images) {
        write_rsb(&image_path(dir, id), img.tensor())?;
    }
    write_text(&dir.join("triplets.jsonl"), &to_jsonl(&ds.triplets))?;
    write_text(&dir.join("scene_graphs.jsonl"), &to_jsonl(&ds.scene_graphs))?;
    let splits = serde_json::to_string_pretty(&ds.splits).expect("serializable");
    write_text(&dir.join("splits.json"), &splits)
}

/// Load a dataset directory. Images are ordered by id (the image index used
/// for per-image random streams).
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::Config(format!("dataset directory {} does not exist", dir.display())));
    }
    let images_dir = dir.join("images");
    let mut ids: Vec<String> = fs::read_dir(&images_dir)
        .map_err(|e| Error::io(&images_dir, e))?
        .filter_map(|entry| {
            let name = entry.ok()?.file_name().into_string().ok()?;
            name.strip_suffix(".rsb").map(str::to_string)
        })
        .collect();
    ids.sort();
    let images = ids
        .iter()
        .map(|id| MultispectralImage::new(read_rsb(&image_path(dir, id))?))
        .collect::<Result<Vec<_>>>()?;
    if let Some(first) = images.first() {
        if let Some(bad) = images.iter().position(|im| im.tensor().shape() != first.tensor().shape()) {
            return Err(Error::Shape(format!(
                "image `{}` has shape {:?}, expected {:?}",
                ids[bad],
                images[bad].tensor().shape(),
                first.tensor().shape()
            )));
        }
    }

    let path = dir.join("triplets.jsonl");
    let triplets: Vec<Triplet> = parse_jsonl(&path, &read_text(&path)?)?;
    let path = dir.join("scene_graphs.jsonl");
    let scene_graphs: Vec<SceneGraph> = parse_jsonl(&path, &read_text(&path)?)?;
    let path = dir.join("splits.json");
    let splits: SplitAssignment =
        serde_json::from_str(&read_text(&path)?).map_err(|e| Error::json(&path, e))?;

    let ds = Dataset {
        image_ids: ids,
        images,
        triplets,
        scene_graphs,
        splits,
    };
    ds.check_consistency()?;
    Ok(ds)
}
