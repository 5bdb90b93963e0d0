use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::params::{ParamTree, Partition};
use crate::error::Result;
use crate::tensor::{mix64, Tensor};

#[derive(Clone, Copy, Debug)]
enum Init {
    /// U(±sqrt(3 / fan_in)): unit-variance inputs give unit-variance outputs.
    FanIn(usize),
    Zeros,
    Ones,
    /// Unit-variance uniform, for learned query embeddings.
    Unit,
}

struct Slot {
    path: String,
    shape: Vec<usize>,
    partition: Partition,
    init: Init,
}

fn slot(path: String, shape: &[usize], partition: Partition, init: Init) -> Slot {
    Slot { path, shape: shape.to_vec(), partition, init }
}

fn linear_slots(out: &mut Vec<Slot>, prefix: &str, fan_in: usize, fan_out: usize) {
    out.push(slot(format!("{prefix}.w"), &[fan_in, fan_out], Partition::Head, Init::FanIn(fan_in)));
    out.push(slot(format!("{prefix}.b"), &[fan_out], Partition::Head, Init::Zeros));
}

fn norm_slots(out: &mut Vec<Slot>, prefix: &str, dim: usize) {
    out.push(slot(format!("{prefix}.gamma"), &[dim], Partition::Head, Init::Ones));
    out.push(slot(format!("{prefix}.beta"), &[dim], Partition::Head, Init::Zeros));
}

fn attention_slots(out: &mut Vec<Slot>, prefix: &str, d: usize) {
    for proj in ["q", "k", "v", "o"] {
        linear_slots(out, &format!("{prefix}.{proj}"), d, d);
    }
}

fn layout(cfg: &ModelConfig) -> Vec<Slot> {
    let mut s = Vec::new();
    let mut in_c = cfg.in_channels;
    for (i, &w) in cfg.backbone_widths.iter().enumerate() {
        let fan_in = in_c * 9;
        s.push(slot(format!("backbone.conv{}.w", i + 1), &[w, in_c, 3, 3], Partition::Backbone, Init::FanIn(fan_in)));
        s.push(slot(format!("backbone.bn{}.gamma", i + 1), &[w], Partition::Normalization, Init::Ones));
        s.push(slot(format!("backbone.bn{}.beta", i + 1), &[w], Partition::Normalization, Init::Zeros));
        in_c = w;
    }
    let d = cfg.embed_dim;
    linear_slots(&mut s, "transformer.input_proj", in_c, d);
    for l in 0..cfg.enc_layers {
        let p = format!("transformer.encoder.{l}");
        attention_slots(&mut s, &format!("{p}.self_attn"), d);
        norm_slots(&mut s, &format!("{p}.norm1"), d);
        linear_slots(&mut s, &format!("{p}.ffn1"), d, cfg.ffn_dim);
        linear_slots(&mut s, &format!("{p}.ffn2"), cfg.ffn_dim, d);
        norm_slots(&mut s, &format!("{p}.norm2"), d);
    }
    for l in 0..cfg.dec_layers {
        let p = format!("transformer.decoder.{l}");
        attention_slots(&mut s, &format!("{p}.self_attn"), d);
        norm_slots(&mut s, &format!("{p}.norm1"), d);
        attention_slots(&mut s, &format!("{p}.cross_attn"), d);
        norm_slots(&mut s, &format!("{p}.norm2"), d);
        linear_slots(&mut s, &format!("{p}.ffn1"), d, cfg.ffn_dim);
        linear_slots(&mut s, &format!("{p}.ffn2"), cfg.ffn_dim, d);
        norm_slots(&mut s, &format!("{p}.norm3"), d);
    }
    s.push(slot("transformer.query_embed".into(), &[cfg.num_queries, d], Partition::Head, Init::Unit));
    linear_slots(&mut s, "head.class", d, cfg.num_classes + 1);
    linear_slots(&mut s, "head.box1", d, d);
    linear_slots(&mut s, "head.box2", d, 4);
    s
}

fn path_hash(path: &str) -> u64 {
    path.bytes().fold(0xCBF2_9CE4_8422_2325, |h, b| mix64(h ^ b as u64))
}

/// Deterministic initialization. Each entry draws from its own stream keyed by
/// `(seed, path)`, so the same seed always yields a bit-identical tree.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamTree> {
    cfg.validate()?;
    let mut tree = ParamTree::new();
    for s in layout(cfg) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ path_hash(&s.path)));
        let t = match s.init {
            Init::Zeros => Tensor::zeros(&s.shape),
            Init::Ones => Tensor::ones(&s.shape),
            Init::FanIn(fan_in) => {
                let bound = (3.0 / fan_in as f64).sqrt();
                Tensor::from_fn(&s.shape, |_| rng.gen_range(-bound..bound))
            }
            Init::Unit => {
                let bound = 3f64.sqrt();
                Tensor::from_fn(&s.shape, |_| rng.gen_range(-bound..bound))
            }
        };
        tree.insert(s.path, t, s.partition)?;
    }
    Ok(tree)
}

/// Paths of the batch-norm layers, e.g. `backbone.bn1`, in block order.
pub fn batch_norm_layers(cfg: &ModelConfig) -> Vec<String> {
    (1..=cfg.backbone_widths.len()).map(|i| format!("backbone.bn{i}")).collect()
}
