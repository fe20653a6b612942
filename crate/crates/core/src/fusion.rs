//! Single-stream multi-modal transformer over the concatenated visual and
//! text tokens `[Z, T]`.
//!
//! Visual tokens come first, so the `[CLS]` token sits at index `b`. Visual
//! tokens carry a segment embedding but no position embedding, which makes
//! the pooled output invariant to the order of the boxes.
//! The summed embeddings are layer-normalized before the first layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{AttentionLayout, Graph, Init, ParamId, ParamStore, Tensor, Var};
use crate::rng::Rng;
use crate::text::TokenSequence;

pub const LN_EPS: f64 = 1e-12;
const INIT_STD: f64 = 0.02;
const TEXT_SEGMENT: usize = 0;
const VISUAL_SEGMENT: usize = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// `tanh(W·h_cls + c)`.
    #[default]
    Cls,
    /// `tanh(W·mean(h_unmasked) + c)`.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub visual_dim: usize,
    pub max_text_len: usize,
    pub boxes: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub pooling: Pooling,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("fusion needs l >= 1".into()));
        }
        if self.heads == 0 || self.hidden == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.visual_dim == 0 || self.boxes == 0 || self.vocab_size == 0 {
            return Err(Error::Config("fusion needs v, b and vocab_size >= 1".into()));
        }
        if self.max_text_len < 2 {
            return Err(Error::Config("max_text_len must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.boxes + self.max_text_len
    }

    pub fn cls_index(&self) -> usize {
        self.boxes
    }
}

#[derive(Clone, Debug)]
struct Affine {
    weight: ParamId,
    bias: Option<ParamId>,
}

impl Affine {
    fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<Self> {
        let mut layer = Self::linear(store, name, fan_in, fan_out, rng)?;
        layer.bias = Some(store.add_init(format!("{name}.bias"), &[fan_out], Init::Zeros, rng)?);
        Ok(layer)
    }

    fn linear(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Affine {
            weight: store.add_init(format!("{name}.weight"), &[fan_in, fan_out], Init::Normal(INIT_STD), rng)?,
            bias: None,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Norm {
            gain: store.add_init(format!("{name}.gain"), &[d], Init::Ones, rng)?,
            bias: store.add_init(format!("{name}.bias"), &[d], Init::Zeros, rng)?,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

#[derive(Clone, Debug)]
struct Layer {
    q: Affine,
    k: Affine,
    v: Affine,
    o: Affine,
    ln1: Norm,
    ffn1: Affine,
    ffn2: Affine,
    ln2: Norm,
}

/// Packed batch output: `pooled` is `[n × d]`, `sequence` is `[n·L × d]`,
/// `attention` holds one attention node per layer.
#[derive(Clone, Debug)]
pub struct BatchOutput {
    pub pooled: Var,
    pub sequence: Var,
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedOutput {
    /// `[d]`
    pub pooled: Tensor,
    /// `[(b + max_text_len) × d]`
    pub sequence: Tensor,
    /// Per layer `[heads × L × L]`.
    pub attention_maps: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Fusion {
    config: FusionConfig,
    token: ParamId,
    position: ParamId,
    segment: ParamId,
    embed_norm: Norm,
    visual: Affine,
    layers: Vec<Layer>,
    pooler: Affine,
}

fn drop(g: &mut Graph, x: Var, p: f64, rng: &mut Option<&mut Rng>) -> Var {
    match rng {
        Some(r) => g.dropout(x, p, r),
        None => x,
    }
}

impl Fusion {
    pub fn new(config: FusionConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let token = store.add_init("fusion.embed.token", &[config.vocab_size, d], Init::Normal(INIT_STD), rng)?;
        let position =
            store.add_init("fusion.embed.position", &[config.max_text_len, d], Init::Normal(INIT_STD), rng)?;
        let segment = store.add_init("fusion.embed.segment", &[2, d], Init::Normal(INIT_STD), rng)?;
        let embed_norm = Norm::new(store, "fusion.embed.norm", d, rng)?;
        let visual = Affine::new(store, "fusion.visual", config.visual_dim, d, rng)?;
        let layers = (0..config.layers)
            .map(|i| {
                let p = format!("fusion.layer{i}");
                Ok(Layer {
                    q: Affine::new(store, &format!("{p}.attn.q"), d, d, rng)?,
                    // a key bias shifts every logit of a query equally, so it is omitted
                    k: Affine::linear(store, &format!("{p}.attn.k"), d, d, rng)?,
                    v: Affine::new(store, &format!("{p}.attn.v"), d, d, rng)?,
                    o: Affine::new(store, &format!("{p}.attn.o"), d, d, rng)?,
                    ln1: Norm::new(store, &format!("{p}.ln1"), d, rng)?,
                    ffn1: Affine::new(store, &format!("{p}.ffn.in"), d, 4 * d, rng)?,
                    ffn2: Affine::new(store, &format!("{p}.ffn.out"), 4 * d, d, rng)?,
                    ln2: Norm::new(store, &format!("{p}.ln2"), d, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let pooler = Affine::new(store, "fusion.pooler", d, d, rng)?;
        Ok(Fusion {
            config,
            token,
            position,
            segment,
            embed_norm,
            visual,
            layers,
            pooler,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    /// Token + position + text-segment embeddings, `[n·max_text_len × d]`.
    pub fn embed_text(&self, g: &mut Graph, store: &ParamStore, tokens: &[&TokenSequence]) -> Result<Var> {
        let t = self.config.max_text_len;
        let mut ids = Vec::with_capacity(tokens.len() * t);
        for seq in tokens {
            if seq.ids.len() != t {
                return Err(Error::Shape(format!("token sequence of length {}, expected {t}", seq.ids.len())));
            }
            ids.extend_from_slice(&seq.ids);
        }
        let positions: Vec<usize> = (0..tokens.len()).flat_map(|_| 0..t).collect();
        let table = g.param(store, self.token);
        let tok = g.gather_rows(table, &ids)?;
        let table = g.param(store, self.position);
        let pos = g.gather_rows(table, &positions)?;
        let table = g.param(store, self.segment);
        let seg = g.gather_rows(table, &vec![TEXT_SEGMENT; ids.len()])?;
        let x = g.add(tok, pos)?;
        g.add(x, seg)
    }

    /// Affine `v → d` plus the visual segment embedding, row-wise.
    pub fn embed_visual(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
        let rows = match g.shape(z) {
            &[rows, v] if v == self.config.visual_dim => rows,
            other => {
                return Err(Error::Shape(format!(
                    "visual features {other:?}, expected [rows, {}]",
                    self.config.visual_dim
                )))
            }
        };
        let x = self.visual.forward(g, store, z)?;
        let table = g.param(store, self.segment);
        let seg = g.gather_rows(table, &vec![VISUAL_SEGMENT; rows])?;
        g.add(x, seg)
    }

    /// One post-norm transformer layer over packed sequences. Returns the
    /// output and the attention node.
    pub fn layer_forward(
        &self,
        index: usize,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mask: &[bool],
        layout: AttentionLayout,
        mut rng: Option<&mut Rng>,
    ) -> Result<(Var, Var)> {
        let p = self.config.dropout;
        let layer = &self.layers[index];
        let q = layer.q.forward(g, store, x)?;
        let k = layer.k.forward(g, store, x)?;
        let v = layer.v.forward(g, store, x)?;
        let attn = g.attention(q, k, v, mask, layout)?;
        let o = layer.o.forward(g, store, attn)?;
        let o = drop(g, o, p, &mut rng);
        let x = g.add(x, o)?;
        let x = layer.ln1.forward(g, store, x)?;
        let h = layer.ffn1.forward(g, store, x)?;
        let h = g.gelu(h);
        let h = layer.ffn2.forward(g, store, h)?;
        let h = drop(g, h, p, &mut rng);
        let x2 = g.add(x, h)?;
        Ok((layer.ln2.forward(g, store, x2)?, attn))
    }

    /// Fuse `n` samples: `z` holds `n·b` projected box rows, sample-major.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z: Var,
        tokens: &[&TokenSequence],
        mut rng: Option<&mut Rng>,
    ) -> Result<BatchOutput> {
        let n = tokens.len();
        let (b, t, d) = (self.config.boxes, self.config.max_text_len, self.config.hidden);
        let len = b + t;
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        if g.shape(z)[0] != n * b {
            return Err(Error::Shape(format!(
                "{} visual rows for {n} samples of {b} boxes",
                g.shape(z)[0]
            )));
        }
        let visual = self.embed_visual(g, store, z)?;
        let text = self.embed_text(g, store, tokens)?;
        let visual = g.reshape(visual, &[n, b, d])?;
        let text = g.reshape(text, &[n, t, d])?;
        let x = g.concat(&[visual, text], 1)?;
        let x = g.reshape(x, &[n * len, d])?;
        let x = self.embed_norm.forward(g, store, x)?;
        let mut x = drop(g, x, self.config.dropout, &mut rng);

        let mut mask = Vec::with_capacity(n * len);
        for seq in tokens {
            mask.extend(std::iter::repeat_n(true, b));
            mask.extend(seq.attention_mask.iter().map(|&m| m != 0));
        }
        let layout = AttentionLayout {
            batch: n,
            len,
            heads: self.config.heads,
        };
        let mut attention = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            let (next, attn) = self.layer_forward(i, g, store, x, &mask, layout, rng.as_deref_mut())?;
            x = next;
            attention.push(attn);
        }

        let summary = match self.config.pooling {
            Pooling::Cls => {
                let rows: Vec<usize> = (0..n).map(|s| s * len + b).collect();
                g.gather_rows(x, &rows)?
            }
            Pooling::Mean => {
                let mut weights = vec![0.0; n * n * len];
                for s in 0..n {
                    let live = &mask[s * len..(s + 1) * len];
                    let count = live.iter().filter(|&&m| m).count() as f64;
                    for (j, &m) in live.iter().enumerate() {
                        if m {
                            weights[s * n * len + s * len + j] = 1.0 / count;
                        }
                    }
                }
                let pool = g.constant(Tensor::new(vec![n, n * len], weights)?);
                g.matmul(pool, x)?
            }
        };
        let pooled = self.pooler.forward(g, store, summary)?;
        let pooled = g.tanh(pooled);
        Ok(BatchOutput {
            pooled,
            sequence: x,
            attention,
        })
    }

    /// Fuse a single sample without dropout.
    pub fn fuse(&self, store: &ParamStore, z: &Tensor, tokens: &TokenSequence) -> Result<FusedOutput> {
        if z.shape().first() != Some(&self.config.boxes) {
            return Err(Error::Shape(format!(
                "Z is {:?}, expected {} rows",
                z.shape(),
                self.config.boxes
            )));
        }
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let out = self.forward(&mut g, store, zv, &[tokens], None)?;
        let heads = self.config.heads;
        let len = self.config.seq_len();
        let attention_maps = out
            .attention
            .iter()
            .map(|&a| {
                g.attention_weights(a)
                    .expect("attention node")
                    .reshape(&[heads, len, len])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FusedOutput {
            pooled: g.value(out.pooled).reshape(&[self.config.hidden])?,
            sequence: g.value(out.sequence).clone(),
            attention_maps,
        })
    }

    /// Apply layer `index` to a single `[L × d]` sequence with a 0/1 mask.
    /// Returns the output and the `[heads × L × L]` attention weights.
    pub fn self_attention_layer(
        &self,
        store: &ParamStore,
        index: usize,
        x: &Tensor,
        mask: &[u8],
    ) -> Result<(Tensor, Tensor)> {
        if index >= self.layers.len() {
            return Err(Error::OutOfBounds(format!("layer {index} of {}", self.layers.len())));
        }
        let &[len, d] = x.shape() else {
            return Err(Error::Shape(format!("layer input {:?}", x.shape())));
        };
        if d != self.config.hidden {
            return Err(Error::Shape(format!("layer input width {d}, expected {}", self.config.hidden)));
        }
        let mask: Vec<bool> = mask.iter().map(|&m| m != 0).collect();
        let layout = AttentionLayout {
            batch: 1,
            len,
            heads: self.config.heads,
        };
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (y, attn) = self.layer_forward(index, &mut g, store, xv, &mask, layout, None)?;
        let weights = g.attention_weights(attn).expect("attention node");
        Ok((g.value(y).clone(), weights.reshape(&[self.config.heads, len, len])?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::text::{tokenize, Vocabulary};
    use rand::Rng as _;

    fn config() -> FusionConfig {
        FusionConfig {
            layers: 2,
            hidden: 16,
            heads: 2,
            visual_dim: 6,
            max_text_len: 8,
            boxes: 3,
            vocab_size: 12,
            dropout: 0.0,
            pooling: Pooling::Cls,
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::stream(seed, 3);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
    }

    fn setup(cfg: FusionConfig) -> (ParamStore, Fusion) {
        let mut store = ParamStore::new();
        let mut r = rng::stream(7, 0);
        let f = Fusion::new(cfg, &mut store, &mut r).unwrap();
        (store, f)
    }

    fn vocab() -> Vocabulary {
        Vocabulary::build(&["is there a disc", "how many squares are there"])
    }

    #[test]
    fn validation() {
        let mut c = config();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = config();
        c.layers = 0;
        assert!(c.validate().is_err());
        assert!(config().validate().is_ok());
    }

    #[test]
    fn shapes() {
        let mut cfg = config();
        cfg.boxes = 5;
        cfg.max_text_len = 16;
        let (store, f) = setup(cfg);
        let t = tokenize("is there a disc", &vocab(), 16);
        let out = f.fuse(&store, &random(&[5, 6], 1), &t).unwrap();
        assert_eq!(out.sequence.shape(), &[21, 16]);
        assert_eq!(out.pooled.shape(), &[16]);
        assert_eq!(out.attention_maps.len(), 2);
        assert_eq!(out.attention_maps[0].shape(), &[2, 21, 21]);
        assert!(out.pooled.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn text_embedding_is_additive() {
        let (store, f) = setup(config());
        let mut t = tokenize("", &vocab(), 8);
        t.ids = vec![5, 5, 0, 0, 0, 0, 0, 0];
        let mut g = Graph::new();
        let e = f.embed_text(&mut g, &store, &[&t]).unwrap();
        let e = g.value(e).clone();
        assert_eq!(e.shape(), &[8, 16]);
        let pos = &store.by_name("fusion.embed.position").unwrap().value;
        for c in 0..16 {
            let lhs = e.data()[16 + c] - e.data()[c];
            let rhs = pos.data()[16 + c] - pos.data()[c];
            assert!((lhs - rhs).abs() < 1e-15);
        }
        let tok = &store.by_name("fusion.embed.token").unwrap().value;
        let seg = &store.by_name("fusion.embed.segment").unwrap().value;
        for c in 0..16 {
            let expect = tok.data()[c] + pos.data()[3 * 16 + c] + seg.data()[c];
            assert!((e.data()[3 * 16 + c] - expect).abs() < 1e-15);
        }
        t.ids[0] = 12;
        let mut g = Graph::new();
        assert!(matches!(
            f.embed_text(&mut g, &store, &[&t]),
            Err(Error::TokenOutOfRange { id: 12, size: 12 })
        ));
    }

    #[test]
    fn visual_embedding_rowwise() {
        let (store, f) = setup(config());
        let mut z = random(&[3, 6], 2);
        let row0 = z.data()[..6].to_vec();
        z.data_mut()[12..18].copy_from_slice(&row0);
        let mut g = Graph::new();
        let zv = g.constant(z);
        let e = f.embed_visual(&mut g, &store, zv).unwrap();
        let e = g.value(e);
        assert_eq!(e.data()[..16], e.data()[32..48]);

        let mut g = Graph::new();
        let zv = g.constant(Tensor::zeros(&[3, 6]));
        let e = f.embed_visual(&mut g, &store, zv).unwrap();
        let seg = &store.by_name("fusion.embed.segment").unwrap().value;
        let bias = &store.by_name("fusion.visual.bias").unwrap().value;
        for r in 0..3 {
            for c in 0..16 {
                assert_eq!(g.value(e).data()[r * 16 + c], bias.data()[c] + seg.data()[16 + c]);
            }
        }
        let mut g = Graph::new();
        let zv = g.constant(Tensor::zeros(&[3, 5]));
        assert!(f.embed_visual(&mut g, &store, zv).is_err());
    }

    #[test]
    fn layer_attention_cases() {
        let (store, f) = setup(config());
        let x = Tensor::full(&[5, 16], 0.3);
        let (_, w) = f.self_attention_layer(&store, 0, &x, &[1, 1, 1, 0, 0]).unwrap();
        for h in 0..2 {
            for i in 0..5 {
                let row = &w.data()[(h * 5 + i) * 5..(h * 5 + i + 1) * 5];
                for j in 0..3 {
                    assert!((row[j] - 1.0 / 3.0).abs() < 1e-12);
                }
                assert_eq!(&row[3..], &[0.0, 0.0]);
            }
        }
        let x = random(&[5, 16], 4);
        let (_, w) = f.self_attention_layer(&store, 1, &x, &[0, 0, 1, 0, 0]).unwrap();
        for h in 0..2 {
            for i in 0..5 {
                let row = &w.data()[(h * 5 + i) * 5..(h * 5 + i + 1) * 5];
                assert_eq!(row, &[0.0, 0.0, 1.0, 0.0, 0.0]);
            }
        }
        assert!(f.self_attention_layer(&store, 0, &x, &[0; 5]).is_err());
    }

    #[test]
    fn pad_tokens_do_not_matter() {
        for pooling in [Pooling::Cls, Pooling::Mean] {
            let mut cfg = config();
            cfg.pooling = pooling;
            let (store, f) = setup(cfg);
            let z = random(&[3, 6], 5);
            let t = tokenize("is there a disc", &vocab(), 8);
            let base = f.fuse(&store, &z, &t).unwrap();
            let mut t2 = t.clone();
            t2.ids[7] = 9;
            let other = f.fuse(&store, &z, &t2).unwrap();
            assert_eq!(base.pooled, other.pooled);
        }
    }

    #[test]
    fn dropout_is_seeded() {
        let mut cfg = config();
        cfg.dropout = 0.3;
        let (store, f) = setup(cfg);
        let t = tokenize("is there a disc", &vocab(), 8);
        let run = |seed: u64| {
            let mut g = Graph::new();
            let z = g.constant(random(&[3, 6], 6));
            let mut r = rng::stream(seed, 1);
            let out = f.forward(&mut g, &store, z, &[&t], Some(&mut r)).unwrap();
            g.value(out.pooled).clone()
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
    }
}
