#![allow(dead_code)]

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use vbfusion_core::dataset::{
    encode_rsb, generate_synthetic, read_dataset, read_rsb, write_dataset, write_rsb, DataConfig,
};
use vbfusion_core::model::{ModelConfig, VqaModel};
use vbfusion_core::numerics::{encode_checkpoint, read_checkpoint};
use vbfusion_core::{rng, Error, Tensor};

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

fn same_tree(a: &Path, b: &Path) -> Result<(), String> {
    let fa = files_under(a);
    let fb = files_under(b);
    let rel = |root: &Path, v: &[PathBuf]| -> Vec<PathBuf> {
        v.iter().map(|p| p.strip_prefix(root).unwrap().to_path_buf()).collect()
    };
    if rel(a, &fa) != rel(b, &fb) {
        return Err("dataset directories list different files".into());
    }
    for (x, y) in fa.iter().zip(&fb) {
        if fs::read(x).unwrap() != fs::read(y).unwrap() {
            return Err(format!("{} differs after rewrite", x.display()));
        }
    }
    Ok(())
}

pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        bands: 10,
        boxes: 3,
        box_h: 8,
        box_w: 8,
        visual_dim: 8,
        layers: 2,
        hidden: 16,
        heads: 2,
        max_text_len: 8,
        vocab_size: 20,
        classes: 6,
        dropout: 0.0,
        pooling: Default::default(),
        seed: 17,
    }
}

/// RSB images, checkpoints and dataset directories written, read back and
/// written again must give identical bytes.
pub fn format_round_trips(dir: &Path) -> Result<(), String> {
    let mut r = rng::stream(1, 0);
    let mut values: Vec<f64> = (0..2 * 5 * 7).map(|_| r.random_range(-1.0..1.0)).collect();
    values[..6].copy_from_slice(&[-0.0, f64::MIN_POSITIVE / 4.0, f64::MAX, 1e-300, -1e300, 0.1]);
    let t = Tensor::new(vec![2, 5, 7], values).unwrap();
    let path = dir.join("img.rsb");
    write_rsb(&path, &t).map_err(|e| e.to_string())?;
    let back = read_rsb(&path).map_err(|e| e.to_string())?;
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    if back.shape() != t.shape() || bits(&back) != bits(&t) {
        return Err("RSB values changed".into());
    }
    if encode_rsb(&back).unwrap() != fs::read(&path).unwrap() {
        return Err("RSB bytes changed".into());
    }

    let model = VqaModel::new(toy_model_config()).map_err(|e| e.to_string())?;
    let ckpt = dir.join("model.vbf");
    model.save(&ckpt).map_err(|e| e.to_string())?;
    let entries = read_checkpoint(&ckpt).map_err(|e| e.to_string())?;
    let refs: Vec<(&str, &Tensor)> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
    if encode_checkpoint(&refs) != fs::read(&ckpt).unwrap() {
        return Err("checkpoint bytes changed".into());
    }
    let loaded = VqaModel::load(&ckpt, toy_model_config()).map_err(|e| e.to_string())?;
    let again = dir.join("again.vbf");
    loaded.save(&again).map_err(|e| e.to_string())?;
    if fs::read(&again).unwrap() != fs::read(&ckpt).unwrap() {
        return Err("checkpoint changed through load and save".into());
    }

    let config = DataConfig {
        n_images: 14,
        bands: 10,
        image_size: 16,
        seed: 3,
        questions_per_image: 3,
        question_types: Vec::new(),
    };
    let ds = generate_synthetic(&config).map_err(|e| e.to_string())?;
    let first = dir.join("ds1");
    let second = dir.join("ds2");
    write_dataset(&first, &ds).map_err(|e| e.to_string())?;
    let read = read_dataset(&first).map_err(|e| e.to_string())?;
    if read != ds {
        let which = [
            ("ids", read.image_ids == ds.image_ids),
            ("images", read.images == ds.images),
            ("triplets", read.triplets == ds.triplets),
            ("scene graphs", read.scene_graphs == ds.scene_graphs),
            ("splits", read.splits == ds.splits),
        ];
        let differing: Vec<&str> = which.iter().filter(|(_, same)| !same).map(|(n, _)| *n).collect();
        return Err(format!("dataset changed through write and read: {differing:?}"));
    }
    write_dataset(&second, &read).map_err(|e| e.to_string())?;
    same_tree(&first, &second)
}

#[derive(Clone, Copy, Debug)]
enum Kind {
    Rsb,
    Checkpoint,
}

/// Write `n` damaged RSB and checkpoint files (truncated anywhere, or one
/// header byte changed) and require every read to fail with a parse error.
/// Returns a description of the first violation.
pub fn fuzz_formats(dir: &Path, n: usize, seed: u64) -> Result<(), String> {
    let mut r = rng::stream(seed, 0);
    let image = Tensor::new(vec![3, 4, 5], (0..60).map(|i| i as f64 / 60.0).collect()).unwrap();
    let rsb = encode_rsb(&image).unwrap();
    let mut config = toy_model_config();
    config.layers = 1;
    let model = VqaModel::new(config).unwrap();
    let ckpt_path = dir.join("base.vbf");
    model.save(&ckpt_path).unwrap();
    let ckpt = fs::read(&ckpt_path).unwrap();

    for i in 0..n {
        let (kind, clean, header) = if i % 2 == 0 {
            (Kind::Rsb, &rsb, 16)
        } else {
            (Kind::Checkpoint, &ckpt, 8)
        };
        let mut bytes = clean.clone();
        let what = if r.random_bool(0.5) {
            let len = r.random_range(0..bytes.len());
            bytes.truncate(len);
            format!("truncated to {len}")
        } else {
            let pos = r.random_range(0..header);
            let delta: u8 = r.random_range(1..=255);
            bytes[pos] = bytes[pos].wrapping_add(delta);
            format!("header byte {pos} changed")
        };
        let path = dir.join(format!("fuzz{i}"));
        fs::write(&path, &bytes).unwrap();
        let outcome = catch_unwind(AssertUnwindSafe(|| match kind {
            Kind::Rsb => read_rsb(&path).map(|_| ()),
            Kind::Checkpoint => read_checkpoint(&path).map(|_| ()),
        }));
        match outcome {
            Err(_) => return Err(format!("{kind:?} {what}: reader panicked")),
            Ok(Ok(())) => return Err(format!("{kind:?} {what}: accepted")),
            Ok(Err(Error::Parse { .. } | Error::Truncated { .. })) => {}
            Ok(Err(e)) => return Err(format!("{kind:?} {what}: unexpected error kind: {e}")),
        }
    }
    Ok(())
}
