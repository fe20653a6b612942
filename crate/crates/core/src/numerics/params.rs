use std::collections::HashMap;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub frozen: bool,
}

/// Named parameters of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, frozen: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Checkpoint(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name,
            value,
            grad,
            frozen,
        });
        Ok(id)
    }

    pub fn add_init(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut Rng,
    ) -> Result<ParamId> {
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
            Init::Normal(std) => {
                let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                let n = shape.iter().product();
                Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect())?
            }
        };
        self.add(name, value, false)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        let p = &mut self.params[id.0];
        if p.frozen {
            return;
        }
        for (d, s) in p.grad.data_mut().iter_mut().zip(g) {
            *d += s;
        }
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).map(|p| p.value.numel()).sum()
    }

    /// Pick a random trainable `(param, flat index)` pair.
    pub fn sample_entry(&self, rng: &mut Rng) -> Option<(ParamId, usize)> {
        let total = self.trainable_count();
        if total == 0 {
            return None;
        }
        let mut k = rng.random_range(0..total);
        for (id, p) in self.iter() {
            if p.frozen {
                continue;
            }
            if k < p.value.numel() {
                return Some((id, k));
            }
            k -= p.value.numel();
        }
        unreachable!()
    }

    /// Copy values from `entries` into parameters of the same name. Every
    /// parameter must be present exactly once with the stored shape.
    pub fn load_values(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        if entries.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                entries.len(),
                self.params.len()
            )));
        }
        for (name, value) in entries {
            let id = self
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{name}`")))?;
            let p = &mut self.params[id.0];
            if p.value.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, checkpoint {:?}",
                    p.value.shape(),
                    value.shape()
                )));
            }
            p.value = value;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let entries: Vec<(&str, &Tensor)> =
            self.params.iter().map(|p| (p.name.as_str(), &p.value)).collect();
        std::fs::write(path, encode_checkpoint(&entries)).map_err(|e| Error::io(path, e))
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"VBF1";

/// Serialize named tensors:
/// `"VBF1" | u32 count | { u32 name_len | name | u32 rank | u32 dims.. | f64 values.. }`,
/// all integers and floats little-endian.
pub fn encode_checkpoint(entries: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Little-endian cursor that reports failures with the file name and offset.
pub(crate) struct Reader<'a> {
    pub(crate) file: &'a Path,
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(file: &'a Path, bytes: &'a [u8]) -> Self {
        Reader { file, bytes, pos: 0 }
    }

    pub(crate) fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            file: self.file.to_path_buf(),
            offset: self.pos,
            msg: msg.into(),
        }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!(
                "unexpected end of data reading {what} ({n} bytes needed, {} left)",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != magic {
            self.pos -= 4;
            return Err(self.err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    pub(crate) fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes_needed = n
            .checked_mul(8)
            .ok_or_else(|| self.err(format!("{what}: element count {n} overflows")))?;
        let raw = self.take(bytes_needed, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.err(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn decode_checkpoint(file: &Path, bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader::new(file, bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let count = r.u32("parameter count")? as usize;
    let mut out = Vec::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let start = r.pos;
        let raw = r.take(name_len, "name")?;
        let name = match std::str::from_utf8(raw) {
            Ok(n) => n.to_string(),
            Err(_) => {
                return Err(Error::Parse {
                    file: file.to_path_buf(),
                    offset: start,
                    msg: "parameter name is not UTF-8".into(),
                })
            }
        };
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(r.err(format!("implausible rank {rank} for `{name}`")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = r.u32("dimension")? as usize;
            if d == 0 {
                return Err(r.err(format!("zero dimension in `{name}`")));
            }
            dims.push(d);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| r.err(format!("dimensions of `{name}` overflow")))?;
        let values = r.f64s(numel, "values")?;
        out.push((name, Tensor::new(dims, values)?));
    }
    r.finish()?;
    Ok(out)
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn sample_store() -> ParamStore {
        let mut rng = rng::stream(3, 0);
        let mut s = ParamStore::new();
        s.add_init("a.weight", &[3, 4], Init::Normal(1.0), &mut rng).unwrap();
        s.add_init("a.bias", &[4], Init::Zeros, &mut rng).unwrap();
        s.add("enc.w", Tensor::full(&[2, 2, 1, 1], -0.0), true).unwrap();
        s
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = sample_store();
        assert!(s.add("a.bias", Tensor::zeros(&[1]), false).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let s = sample_store();
        let entries: Vec<(&str, &Tensor)> = s.iter().map(|(_, p)| (p.name.as_str(), &p.value)).collect();
        let bytes = encode_checkpoint(&entries);
        assert_eq!(&bytes[..4], b"VBF1");
        let decoded = decode_checkpoint(Path::new("mem"), &bytes).unwrap();
        let again: Vec<(&str, &Tensor)> = decoded.iter().map(|(n, t)| (n.as_str(), t)).collect();
        assert_eq!(encode_checkpoint(&again), bytes);
        // -0.0 keeps its sign bit
        assert_eq!(decoded[2].1.data()[0].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn checkpoint_header_layout() {
        let t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let bytes = encode_checkpoint(&[("w", &t)]);
        let mut expected = b"VBF1".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.push(b'w');
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f64.to_le_bytes());
        expected.extend_from_slice(&2.0f64.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn truncated_checkpoint_reports_offset() {
        let s = sample_store();
        let entries: Vec<(&str, &Tensor)> = s.iter().map(|(_, p)| (p.name.as_str(), &p.value)).collect();
        let bytes = encode_checkpoint(&entries);
        for cut in [0, 3, 7, 20, bytes.len() - 1] {
            let err = decode_checkpoint(Path::new("m.vbf"), &bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Parse { .. }), "{err}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        let err = decode_checkpoint(Path::new("m.vbf"), &bad).unwrap_err();
        assert!(err.to_string().contains("byte 0"), "{err}");
    }

    #[test]
    fn load_values_checks_names_and_shapes() {
        let mut s = sample_store();
        let mut entries: Vec<(String, Tensor)> =
            s.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
        entries[1].1 = Tensor::zeros(&[5]);
        assert!(s.clone().load_values(entries.clone()).is_err());
        entries[1] = ("zzz".into(), Tensor::zeros(&[4]));
        assert!(s.clone().load_values(entries.clone()).is_err());
        entries.pop();
        assert!(s.load_values(entries).is_err());
    }

    #[test]
    fn sampling_never_hits_frozen() {
        let s = sample_store();
        let frozen = s.id("enc.w").unwrap();
        let mut rng = rng::stream(9, 1);
        for _ in 0..2000 {
            let (id, k) = s.sample_entry(&mut rng).unwrap();
            assert_ne!(id, frozen);
            assert!(k < s.get(id).value.numel());
        }
    }
}
