mod common;

use common::{random_tensor, rel_err, rng, FD_STEP, FD_TOL};
use detfed::matching::{hungarian_loss, match_batch, GroundTruth, LossWeights};
use detfed::model::{
    attention_weights, checkpoint, forward, forward_graph, init_params, partition_params, predict, BoundParams,
    ModelConfig, NormStats, ParamTree, Partition,
};
use detfed::tensor::{DropoutStream, Mode, Tape, Tensor};
use detfed::Error;
use rand::Rng;

/// Scalar parameter counts derived by hand from the layer formulas.
struct HandCount {
    backbone: usize,
    norm: usize,
    total: usize,
}

fn hand_count(cfg: &ModelConfig) -> HandCount {
    let mut conv = 0;
    let mut prev = cfg.in_channels;
    for &w in &cfg.backbone_widths {
        conv += w * prev * 3 * 3;
        prev = w;
    }
    let norm = 2 * cfg.backbone_widths.iter().sum::<usize>();
    let (d, f) = (cfg.embed_dim, cfg.ffn_dim);
    let attn = 4 * (d * d + d);
    let ffn = (d * f + f) + (f * d + d);
    let enc = attn + 2 * (2 * d) + ffn;
    let dec = 2 * attn + 3 * (2 * d) + ffn;
    let head = (prev * d + d)
        + cfg.enc_layers * enc
        + cfg.dec_layers * dec
        + cfg.num_queries * d
        + (d * (cfg.num_classes + 1) + cfg.num_classes + 1)
        + (d * d + d)
        + (d * 4 + 4);
    HandCount { backbone: conv + norm, norm, total: conv + norm + head }
}

#[test]
fn desk_scale_counts_match_hand_arithmetic() {
    let cfg = ModelConfig::desk_scale();
    let hc = hand_count(&cfg);
    // 72 + 1152 + 4608 + 18432 conv weights, 2·(8+16+32+64) batch-norm scalars
    assert_eq!(hc.backbone, 24_504);
    assert_eq!(hc.norm, 240);
    assert_eq!(hc.total, 201_215);

    let params = init_params(&cfg, 0).unwrap();
    assert_eq!(params.scalar_count(), hc.total);
    let (phi, omega) = partition_params(&params);
    assert_eq!(phi.scalar_count(), hc.backbone);
    assert_eq!(omega.scalar_count(), hc.total - hc.backbone);
    let frac = phi.scalar_count() as f64 / params.scalar_count() as f64;
    assert!((frac - 24_504.0 / 201_215.0).abs() < 1e-15);
    assert!(frac < 0.5);

    let norm: usize = params.iter().filter(|(_, e)| e.partition == Partition::Normalization).map(|(_, e)| e.numel()).sum();
    assert_eq!(norm, hc.norm);
    let norm_entries = params.iter().filter(|(_, e)| e.partition == Partition::Normalization).count();
    assert_eq!(norm_entries, 2 * cfg.backbone_widths.len());
}

#[test]
fn init_is_deterministic_and_seed_dependent() {
    let cfg = ModelConfig::desk_scale();
    let a = init_params(&cfg, 7).unwrap();
    let b = init_params(&cfg, 7).unwrap();
    assert_eq!(checkpoint::encode(&a), checkpoint::encode(&b));
    let c = init_params(&cfg, 8).unwrap();
    assert_ne!(checkpoint::encode(&a), checkpoint::encode(&c));
    for (path, e) in a.iter() {
        if path.ends_with(".b") || path.ends_with(".beta") {
            assert!(e.tensor.data().iter().all(|&v| v == 0.0), "{path}");
        }
        if path.ends_with(".gamma") {
            assert!(e.tensor.data().iter().all(|&v| v == 1.0), "{path}");
        }
    }
}

#[test]
fn config_validation() {
    let mut cfg = ModelConfig::desk_scale();
    cfg.num_heads = 5;
    assert!(matches!(init_params(&cfg, 0), Err(Error::Config(_))));
    let mut cfg = ModelConfig::desk_scale();
    cfg.embed_dim = 6;
    cfg.num_heads = 2;
    assert!(matches!(init_params(&cfg, 0), Err(Error::Config(_))));
    assert_eq!(ModelConfig::desk_scale().feature_size(), 4);
    assert_eq!(ModelConfig::reduced().feature_size(), 2);
    let pp = ModelConfig::paper_parity();
    pp.validate().unwrap();
    assert_eq!((pp.enc_layers, pp.num_heads, pp.embed_dim, pp.ffn_dim, pp.num_queries), (6, 8, 256, 2048, 20));
}

fn images(seed: u64, b: usize, cfg: &ModelConfig) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(&[b, cfg.in_channels, cfg.image_size, cfg.image_size], |_| r.gen_range(0.0..1.0))
}

#[test]
fn forward_shapes_and_box_range() {
    let cfg = ModelConfig::desk_scale();
    let params = init_params(&cfg, 1).unwrap();
    let stats = NormStats::new(&cfg);
    let preds = predict(&cfg, &params, &stats, &images(3, 2, &cfg)).unwrap();
    assert_eq!(preds.class_logits.shape(), &[2, 8, 3]);
    assert_eq!(preds.boxes.shape(), &[2, 8, 4]);
    assert!(preds.boxes.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn forward_rejects_wrong_image_size_and_missing_params() {
    let cfg = ModelConfig::desk_scale();
    let mut params = init_params(&cfg, 1).unwrap();
    let stats = NormStats::new(&cfg);
    let bad = Tensor::zeros(&[1, 1, 32, 32]);
    assert!(matches!(predict(&cfg, &params, &stats, &bad), Err(Error::Dimension { .. })));
    params.remove("transformer.encoder.1.ffn2.w");
    let err = predict(&cfg, &params, &stats, &images(0, 1, &cfg)).unwrap_err();
    assert!(matches!(&err, Error::MissingParam(p) if p == "transformer.encoder.1.ffn2.w"), "{err}");
}

#[test]
fn eval_forward_is_bit_deterministic() {
    let cfg = ModelConfig::desk_scale();
    let params = init_params(&cfg, 2).unwrap();
    let stats = NormStats::new(&cfg);
    let x = images(4, 3, &cfg);
    let a = predict(&cfg, &params, &stats, &x).unwrap();
    let b = predict(&cfg, &params, &stats, &x).unwrap();
    assert_eq!(a, b);
}

#[test]
fn batch_permutation_permutes_outputs() {
    let cfg = ModelConfig::desk_scale();
    let params = init_params(&cfg, 5).unwrap();
    let stats = NormStats::new(&cfg);
    let x = images(6, 3, &cfg);
    let per = cfg.image_size * cfg.image_size;
    let perm = [2usize, 0, 1];
    let mut xp = Vec::with_capacity(x.numel());
    for &i in &perm {
        xp.extend_from_slice(&x.data()[i * per..(i + 1) * per]);
    }
    let xp = Tensor::new(x.shape().to_vec(), xp).unwrap();
    let a = predict(&cfg, &params, &stats, &x).unwrap();
    let b = predict(&cfg, &params, &stats, &xp).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        let (ra, rb) = (a.row(i), b.row(k));
        for (u, v) in ra.logits.iter().zip(rb.logits) {
            assert!((u - v).abs() <= 1e-12);
        }
        for (u, v) in ra.boxes.iter().zip(rb.boxes) {
            assert!((u - v).abs() <= 1e-12);
        }
    }
}

#[test]
fn attention_rows_are_distributions() {
    let cfg = ModelConfig::desk_scale();
    let params = init_params(&cfg, 9).unwrap();
    let mut r = rng(10);
    let q = random_tensor(&mut r, &[2, 8, 64], 3.0);
    let k = random_tensor(&mut r, &[2, 16, 64], 3.0);
    for prefix in ["transformer.encoder.0.self_attn", "transformer.decoder.1.cross_attn"] {
        let w = attention_weights(&cfg, &params, prefix, &q, &k).unwrap();
        assert_eq!(w.shape(), &[2 * 4, 8, 16]);
        for row in w.data().chunks(16) {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        }
    }
}

#[test]
fn train_mode_updates_running_stats_and_dropout_is_reproducible() {
    let cfg = ModelConfig::desk_scale();
    let params = init_params(&cfg, 2).unwrap();
    let x = images(1, 2, &cfg);
    let mut s1 = NormStats::new(&cfg);
    let mut s2 = NormStats::new(&cfg);
    let a = forward(&cfg, &params, &mut s1, &x, Mode::Train, &mut DropoutStream::new(5)).unwrap();
    let b = forward(&cfg, &params, &mut s2, &x, Mode::Train, &mut DropoutStream::new(5)).unwrap();
    assert_eq!(a, b);
    assert_eq!(s1, s2);
    assert_ne!(s1, NormStats::new(&cfg));
    let restored = NormStats::from_tree(&cfg, &s1.to_tree()).unwrap();
    assert_eq!(restored, s1);
}

fn gts_for(seed: u64, b: usize) -> Vec<GroundTruth> {
    let mut r = rng(seed);
    (0..b)
        .map(|_| {
            let w = r.gen_range(0.1..0.4);
            let h = r.gen_range(0.1..0.4);
            GroundTruth::single([r.gen_range(0.3..0.7), r.gen_range(0.3..0.7), w, h], r.gen_range(0..2))
        })
        .collect()
}

/// Full-model loss at `params`; also returns the matching so callers can
/// assert it is unchanged by a perturbation.
fn model_loss(cfg: &ModelConfig, params: &ParamTree, x: &Tensor, gts: &[GroundTruth]) -> (f64, Vec<Vec<(usize, usize)>>) {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, false);
    let xv = tape.constant(x.clone());
    let mut stats = NormStats::new(cfg);
    let (l, b) =
        forward_graph(cfg, &mut tape, &bound, &mut stats, xv, Mode::Train, &mut DropoutStream::new(99)).unwrap();
    let out = hungarian_loss(&mut tape, l, b, gts, &LossWeights::default()).unwrap();
    (tape.value(out.loss).item(), out.assignments.into_iter().map(|a| a.pairs).collect())
}

fn model_grads(cfg: &ModelConfig, params: &ParamTree, x: &Tensor, gts: &[GroundTruth]) -> std::collections::BTreeMap<String, Vec<f64>> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, true);
    let xv = tape.constant(x.clone());
    let mut stats = NormStats::new(cfg);
    let (l, b) =
        forward_graph(cfg, &mut tape, &bound, &mut stats, xv, Mode::Train, &mut DropoutStream::new(99)).unwrap();
    let out = hungarian_loss(&mut tape, l, b, gts, &LossWeights::default()).unwrap();
    tape.backward(out.loss).unwrap();
    bound.grads(&tape, params)
}

/// Moves every parameter off its init value. Zero biases make the first
/// decoder layer norm see a constant vector, where its curvature (∝ 1/√eps)
/// swamps central differences.
fn jitter(params: &mut ParamTree, seed: u64) {
    let mut r = rng(seed);
    for (_, e) in params.iter_mut() {
        e.tensor.data_mut().iter_mut().for_each(|v| *v += r.gen_range(-0.2..0.2));
    }
}

#[test]
fn reduced_model_full_gradient_check() {
    let cfg = ModelConfig::reduced();
    for seed in 0..20u64 {
        let mut params = init_params(&cfg, seed).unwrap();
        jitter(&mut params, 500 + seed);
        let x = images(1000 + seed, 2, &cfg);
        let gts = gts_for(2000 + seed, 2);
        let (_, base_match) = model_loss(&cfg, &params, &x, &gts);
        let grads = model_grads(&cfg, &params, &x, &gts);
        let mut worst = 0.0f64;
        for (path, e) in params.iter() {
            for i in 0..e.numel() {
                let mut plus = params.clone();
                plus.get_mut(path).unwrap().tensor.data_mut()[i] += FD_STEP;
                let mut minus = params.clone();
                minus.get_mut(path).unwrap().tensor.data_mut()[i] -= FD_STEP;
                let (lp, mp) = model_loss(&cfg, &plus, &x, &gts);
                let (lm, mm) = model_loss(&cfg, &minus, &x, &gts);
                assert_eq!(mp, base_match, "perturbation flipped the matching");
                assert_eq!(mm, base_match, "perturbation flipped the matching");
                let numeric = (lp - lm) / (2.0 * FD_STEP);
                let err = rel_err(grads[path][i], numeric);
                assert!(err <= FD_TOL, "seed {seed} {path}[{i}]: analytic {} numeric {numeric} rel {err:e}", grads[path][i]);
                worst = worst.max(err);
            }
        }
        assert!(worst <= FD_TOL);
    }
}

#[test]
fn matching_of_model_output_is_stable() {
    let cfg = ModelConfig::reduced();
    let params = init_params(&cfg, 3).unwrap();
    let stats = NormStats::new(&cfg);
    let preds = predict(&cfg, &params, &stats, &images(1, 2, &cfg)).unwrap();
    let gts = gts_for(4, 2);
    let a = match_batch(&preds, &gts, &LossWeights::default()).unwrap();
    let b = match_batch(&preds, &gts, &LossWeights::default()).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|x| x.pairs.len() == 1 && x.unmatched.len() == 2));
}
