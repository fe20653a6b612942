use rand::Rng as _;
use vbfusion_core::fusion::{FusionConfig, Pooling};
use vbfusion_core::model::{ModelConfig, VqaModel};
use vbfusion_core::numerics::{finite_diff_grad_check, Sampling};
use vbfusion_core::rng;
use vbfusion_core::text::{tokenize, TokenSequence, Vocabulary};
use vbfusion_core::Tensor;

fn toy(pooling: Pooling) -> ModelConfig {
    ModelConfig {
        bands: 3,
        boxes: 3,
        box_h: 8,
        box_w: 8,
        visual_dim: 16,
        layers: 2,
        hidden: 32,
        heads: 2,
        max_text_len: 8,
        vocab_size: 16,
        classes: 5,
        dropout: 0.0,
        pooling,
        seed: 21,
    }
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, 9);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn questions() -> (Vocabulary, Vec<TokenSequence>) {
    let qs = ["is there a red disc", "how many squares are there"];
    let vocab = Vocabulary::build(&qs);
    let toks = qs.iter().map(|q| tokenize(q, &vocab, 8)).collect();
    (vocab, toks)
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let mut model = VqaModel::new(toy(Pooling::Cls)).unwrap();
    // move away from the small-init point where attention gradients vanish
    let mut r = rng::stream(6, 0);
    let ids: Vec<_> = model.params().iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect();
    for id in ids {
        for v in model.params_mut().get_mut(id).value.data_mut() {
            *v += r.random_range(-0.5..0.5);
        }
    }
    let k = model.encoder().feature_dim();
    let feats = [random_tensor(&[3, k], 1), random_tensor(&[3, k], 2)];
    let (_, toks) = questions();
    let model_ref = model.clone();
    let mut r = rng::stream(5, 0);
    let report = finite_diff_grad_check(
        model.params_mut(),
        |store, g| {
            let mut m = model_ref.clone();
            *m.params_mut() = store.clone();
            let out = m.forward(g, &[&feats[0], &feats[1]], &[&toks[0], &toks[1]], None)?;
            g.cross_entropy(out.logits, &[1, 4])
        },
        1e-5,
        Sampling::PerParameter(50),
        &mut r,
    )
    .unwrap();
    let worst = report.worst().unwrap();
    assert!(report.max_rel_error < 1e-4, "{worst:?}");
}

#[test]
fn pooled_is_invariant_to_box_order() {
    for pooling in [Pooling::Cls, Pooling::Mean] {
        let model = VqaModel::new(toy(pooling)).unwrap();
        let (_, toks) = questions();
        let z = random_tensor(&[3, 16], 3);
        let out = model.fusion().fuse(model.params(), &z, &toks[1]).unwrap();
        let rows: Vec<&[f64]> = z.data().chunks(16).collect();
        let permuted = Tensor::new(vec![3, 16], [rows[2], rows[0], rows[1]].concat()).unwrap();
        let moved = model.fusion().fuse(model.params(), &permuted, &toks[1]).unwrap();
        assert!(out.pooled.max_abs_diff(&moved.pooled) <= 1e-9);
    }
}

#[test]
fn attention_rows_sum_to_one_over_unmasked_keys() {
    let model = VqaModel::new(toy(Pooling::Cls)).unwrap();
    let (_, toks) = questions();
    let z = random_tensor(&[3, 16], 4);
    let out = model.fusion().fuse(model.params(), &z, &toks[0]).unwrap();
    let len = 3 + 8;
    let mask: Vec<u8> = [vec![1u8; 3], toks[0].attention_mask.clone()].concat();
    assert_eq!(out.attention_maps.len(), 2);
    for map in &out.attention_maps {
        assert_eq!(map.shape(), &[2, len, len]);
        for row in map.data().chunks(len) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-9);
            for (w, &m) in row.iter().zip(&mask) {
                if m == 0 {
                    assert!(*w < 1e-12);
                }
            }
        }
    }
}

#[test]
fn shapes_follow_config() {
    let config = FusionConfig {
        layers: 1,
        hidden: 16,
        heads: 4,
        visual_dim: 8,
        max_text_len: 16,
        boxes: 5,
        vocab_size: 10,
        dropout: 0.0,
        pooling: Pooling::Cls,
    };
    assert_eq!(config.seq_len(), 21);
    assert_eq!(config.cls_index(), 5);
    let bad = FusionConfig { heads: 3, ..config.clone() };
    assert!(bad.validate().is_err());
}
