use std::collections::{BTreeMap, HashMap};

use super::config::ModelConfig;
use super::encoding::positional_encoding;
use super::init::batch_norm_layers;
use super::params::{ParamTree, Partition};
use crate::error::{Error, Result};
use crate::tensor::{BatchNormStats, DropoutStream, Mode, Tape, Tensor, Var};

/// Running statistics of every backbone batch-norm layer, keyed by layer path.
///
/// These are node-local buffers, not parameters: they never appear in a
/// [`ParamTree`] and are never aggregated.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct NormStats {
    layers: BTreeMap<String, BatchNormStats>,
}

impl NormStats {
    pub fn new(cfg: &ModelConfig) -> Self {
        let layers = batch_norm_layers(cfg)
            .into_iter()
            .zip(&cfg.backbone_widths)
            .map(|(name, &c)| (name, BatchNormStats::new(c)))
            .collect();
        Self { layers }
    }

    pub fn layer_mut(&mut self, name: &str) -> Result<&mut BatchNormStats> {
        self.layers.get_mut(name).ok_or_else(|| Error::MissingParam(format!("{name} running statistics")))
    }

    pub fn layer(&self, name: &str) -> Option<&BatchNormStats> {
        self.layers.get(name)
    }

    /// Flattens into a tree (`<layer>.running_mean` / `.running_var`) for checkpointing.
    pub fn to_tree(&self) -> ParamTree {
        let mut t = ParamTree::new();
        for (name, s) in &self.layers {
            let n = s.mean.len();
            t.insert(format!("{name}.running_mean"), Tensor::new(vec![n], s.mean.clone()).unwrap(), Partition::Normalization)
                .unwrap();
            t.insert(format!("{name}.running_var"), Tensor::new(vec![n], s.var.clone()).unwrap(), Partition::Normalization)
                .unwrap();
        }
        t
    }

    pub fn from_tree(cfg: &ModelConfig, tree: &ParamTree) -> Result<Self> {
        let mut stats = Self::new(cfg);
        for (name, s) in stats.layers.iter_mut() {
            let mean = tree.tensor(&format!("{name}.running_mean"))?;
            let var = tree.tensor(&format!("{name}.running_var"))?;
            if mean.numel() != s.mean.len() || var.numel() != s.var.len() {
                return Err(Error::Structure(format!("{name}: running statistics have the wrong width")));
            }
            s.mean = mean.data().to_vec();
            s.var = var.data().to_vec();
        }
        if tree.len() != 2 * stats.layers.len() {
            return Err(Error::Structure("unexpected entries in running statistics".into()));
        }
        Ok(stats)
    }
}

/// Parameters recorded as tape leaves.
#[derive(Debug, Default)]
pub struct BoundParams {
    vars: HashMap<String, Var>,
}

impl BoundParams {
    /// Records every entry on `tape`; with `trainable`, each becomes a gradient leaf.
    pub fn bind(tape: &mut Tape, params: &ParamTree, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(path, e)| {
                let v = if trainable { tape.param(e.tensor.clone()) } else { tape.constant(e.tensor.clone()) };
                (path.to_string(), v)
            })
            .collect();
        Self { vars }
    }

    pub fn get(&self, path: &str) -> Result<Var> {
        self.vars.get(path).copied().ok_or_else(|| Error::MissingParam(path.to_string()))
    }

    /// Gradients accumulated on each bound leaf, in path order.
    pub fn grads(&self, tape: &Tape, params: &ParamTree) -> BTreeMap<String, Vec<f64>> {
        params
            .iter()
            .map(|(path, e)| {
                let g = self.vars.get(path).and_then(|&v| tape.grad(v)).map(<[f64]>::to_vec);
                (path.to_string(), g.unwrap_or_else(|| vec![0.0; e.numel()]))
            })
            .collect()
    }
}

/// Output of the detector for a batch: `N` slots per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    /// `[B, N, C+1]`, last class is no-object.
    pub class_logits: Tensor,
    /// `[B, N, 4]`, normalized `(cx, cy, w, h)`.
    pub boxes: Tensor,
}

/// Predictions of a single image.
#[derive(Clone, Copy, Debug)]
pub struct PredictionRow<'a> {
    pub logits: &'a [f64],
    pub boxes: &'a [f64],
    pub num_logits: usize,
}

impl<'a> PredictionRow<'a> {
    pub fn num_queries(&self) -> usize {
        self.logits.len() / self.num_logits
    }

    /// Softmax class probabilities of slot `i`.
    pub fn probs(&self, i: usize) -> Vec<f64> {
        let row = &self.logits[i * self.num_logits..(i + 1) * self.num_logits];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    pub fn bbox(&self, i: usize) -> [f64; 4] {
        let b = &self.boxes[i * 4..i * 4 + 4];
        [b[0], b[1], b[2], b[3]]
    }
}

impl Predictions {
    pub fn batch(&self) -> usize {
        self.class_logits.shape()[0]
    }

    pub fn num_queries(&self) -> usize {
        self.class_logits.shape()[1]
    }

    pub fn num_logits(&self) -> usize {
        self.class_logits.shape()[2]
    }

    pub fn row(&self, b: usize) -> PredictionRow<'_> {
        let (n, k) = (self.num_queries(), self.num_logits());
        PredictionRow {
            logits: &self.class_logits.data()[b * n * k..(b + 1) * n * k],
            boxes: &self.boxes.data()[b * n * 4..(b + 1) * n * 4],
            num_logits: k,
        }
    }
}

struct Graph<'a> {
    cfg: &'a ModelConfig,
    tape: &'a mut Tape,
    params: &'a BoundParams,
    mode: Mode,
    dropout: &'a mut DropoutStream,
}

impl Graph<'_> {
    fn p(&self, path: &str) -> Result<Var> {
        self.params.get(path)
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        self.tape.linear(x, w, Some(b))
    }

    fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p(&format!("{prefix}.gamma"))?;
        let b = self.p(&format!("{prefix}.beta"))?;
        self.tape.layer_norm(x, g, b, self.cfg.ln_eps)
    }

    fn dropout(&mut self, x: Var) -> Var {
        self.tape.dropout(x, self.cfg.dropout_p, self.dropout, self.mode)
    }

    /// `[B, L, d]` → `[B·h, L, d/h]`
    fn split_heads(&mut self, x: Var) -> Result<Var> {
        let s = self.tape.shape(x).to_vec();
        let (b, l, h) = (s[0], s[1], self.cfg.num_heads);
        let dh = self.cfg.head_dim();
        let x = self.tape.reshape(x, &[b, l, h, dh])?;
        let x = self.tape.permute(x, &[0, 2, 1, 3])?;
        self.tape.reshape(x, &[b * h, l, dh])
    }

    fn merge_heads(&mut self, x: Var, batch: usize) -> Result<Var> {
        let s = self.tape.shape(x).to_vec();
        let (h, l, dh) = (self.cfg.num_heads, s[1], s[2]);
        let x = self.tape.reshape(x, &[batch, h, l, dh])?;
        let x = self.tape.permute(x, &[0, 2, 1, 3])?;
        self.tape.reshape(x, &[batch, l, h * dh])
    }

    fn attention(&mut self, prefix: &str, query: Var, key: Var, value: Var) -> Result<(Var, Var)> {
        let batch = self.tape.shape(query)[0];
        let q = self.linear(query, &format!("{prefix}.q"))?;
        let k = self.linear(key, &format!("{prefix}.k"))?;
        let v = self.linear(value, &format!("{prefix}.v"))?;
        let (q, k, v) = (self.split_heads(q)?, self.split_heads(k)?, self.split_heads(v)?);
        let scores = self.tape.bmm(q, k, true)?;
        let scores = self.tape.scale(scores, 1.0 / (self.cfg.head_dim() as f64).sqrt());
        let weights = self.tape.softmax(scores);
        let ctx = self.tape.bmm(weights, v, false)?;
        let ctx = self.merge_heads(ctx, batch)?;
        Ok((self.linear(ctx, &format!("{prefix}.o"))?, weights))
    }

    fn ffn(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{prefix}.ffn1"))?;
        let h = self.tape.relu(h);
        self.linear(h, &format!("{prefix}.ffn2"))
    }

    /// `x + dropout(sub)` followed by layer norm.
    fn residual(&mut self, x: Var, sub: Var, norm: &str) -> Result<Var> {
        let sub = self.dropout(sub);
        let s = self.tape.add(x, sub)?;
        self.layer_norm(s, norm)
    }

    fn backbone(&mut self, images: Var, stats: &mut NormStats) -> Result<Var> {
        let mut x = images;
        for i in 1..=self.cfg.backbone_widths.len() {
            let w = self.p(&format!("backbone.conv{i}.w"))?;
            x = self.tape.conv2d(x, w, 2, 1)?;
            let g = self.p(&format!("backbone.bn{i}.gamma"))?;
            let b = self.p(&format!("backbone.bn{i}.beta"))?;
            let s = stats.layer_mut(&format!("backbone.bn{i}"))?;
            x = self.tape.batch_norm(x, g, b, s, self.mode, self.cfg.bn_momentum, self.cfg.bn_eps)?;
            x = self.tape.relu(x);
        }
        Ok(x)
    }

    /// Repeats a `[L, d]` tensor along a new leading batch axis.
    fn tile(&mut self, x: Var, batch: usize) -> Result<Var> {
        let s = self.tape.shape(x).to_vec();
        let x = self.tape.reshape(x, &[1, s[0], s[1]])?;
        if batch == 1 {
            return Ok(x);
        }
        let parts = vec![x; batch];
        self.tape.concat(&parts, 0)
    }

    fn run(&mut self, images: Var, stats: &mut NormStats) -> Result<(Var, Var)> {
        let cfg = self.cfg;
        let batch = self.tape.shape(images)[0];
        let d = cfg.embed_dim;

        let feat = self.backbone(images, stats)?;
        let fs = self.tape.shape(feat).to_vec();
        let (c, fh, fw) = (fs[1], fs[2], fs[3]);
        let seq = self.tape.permute(feat, &[0, 2, 3, 1])?;
        let seq = self.tape.reshape(seq, &[batch, fh * fw, c])?;
        let proj = self.linear(seq, "transformer.input_proj")?;
        let pe = self.tape.constant(positional_encoding(fh, fw, d)?);
        let pos = self.tile(pe, batch)?;
        let mut src = self.tape.add(proj, pos)?;

        for l in 0..cfg.enc_layers {
            let p = format!("transformer.encoder.{l}");
            let (attn, _) = self.attention(&format!("{p}.self_attn"), src, src, src)?;
            src = self.residual(src, attn, &format!("{p}.norm1"))?;
            let ff = self.ffn(src, &p)?;
            src = self.residual(src, ff, &format!("{p}.norm2"))?;
        }
        let memory = src;

        let qe = self.p("transformer.query_embed")?;
        let query_pos = self.tile(qe, batch)?;
        // slots start from their own embedding so they differ before any attention
        let mut tgt = query_pos;
        for l in 0..cfg.dec_layers {
            let p = format!("transformer.decoder.{l}");
            let qk = self.tape.add(tgt, query_pos)?;
            let (attn, _) = self.attention(&format!("{p}.self_attn"), qk, qk, tgt)?;
            tgt = self.residual(tgt, attn, &format!("{p}.norm1"))?;
            let q = self.tape.add(tgt, query_pos)?;
            let (attn, _) = self.attention(&format!("{p}.cross_attn"), q, memory, memory)?;
            tgt = self.residual(tgt, attn, &format!("{p}.norm2"))?;
            let ff = self.ffn(tgt, &p)?;
            tgt = self.residual(tgt, ff, &format!("{p}.norm3"))?;
        }

        let logits = self.linear(tgt, "head.class")?;
        let hidden = self.linear(tgt, "head.box1")?;
        let hidden = self.tape.relu(hidden);
        let raw = self.linear(hidden, "head.box2")?;
        let boxes = self.tape.sigmoid(raw);
        Ok((logits, boxes))
    }
}

fn check_images(cfg: &ModelConfig, shape: &[usize]) -> Result<()> {
    let want = [cfg.in_channels, cfg.image_size, cfg.image_size];
    if shape.len() != 4 || shape[1..] != want {
        return Err(Error::dim(
            "forward",
            format!("images {shape:?} do not match [B, {}, {}, {}]", want[0], want[1], want[2]),
        ));
    }
    Ok(())
}

/// Records the detector on `tape` and returns `(class_logits, boxes)`.
#[allow(clippy::too_many_arguments)]
pub fn forward_graph(
    cfg: &ModelConfig,
    tape: &mut Tape,
    params: &BoundParams,
    stats: &mut NormStats,
    images: Var,
    mode: Mode,
    dropout: &mut DropoutStream,
) -> Result<(Var, Var)> {
    check_images(cfg, tape.shape(images))?;
    let mut g = Graph { cfg, tape, params, mode, dropout };
    g.run(images, stats)
}

/// Runs the detector without recording gradients.
pub fn forward(
    cfg: &ModelConfig,
    params: &ParamTree,
    stats: &mut NormStats,
    images: &Tensor,
    mode: Mode,
    dropout: &mut DropoutStream,
) -> Result<Predictions> {
    check_images(cfg, images.shape())?;
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, false);
    let x = tape.constant(images.clone());
    let (logits, boxes) = forward_graph(cfg, &mut tape, &bound, stats, x, mode, dropout)?;
    Ok(Predictions { class_logits: tape.value(logits).clone(), boxes: tape.value(boxes).clone() })
}

/// Eval-mode forward: a pure function of `(params, stats, images)`.
pub fn predict(cfg: &ModelConfig, params: &ParamTree, stats: &NormStats, images: &Tensor) -> Result<Predictions> {
    let mut stats = stats.clone();
    forward(cfg, params, &mut stats, images, Mode::Eval, &mut DropoutStream::new(0))
}

/// Attention weights `[B·h, Lq, Lk]` of one multi-head attention block applied
/// to the given inputs, exposed for inspection.
pub fn attention_weights(
    cfg: &ModelConfig,
    params: &ParamTree,
    prefix: &str,
    query: &Tensor,
    key: &Tensor,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, false);
    let mut dropout = DropoutStream::new(0);
    let q = tape.constant(query.clone());
    let k = tape.constant(key.clone());
    let mut g = Graph { cfg, tape: &mut tape, params: &bound, mode: Mode::Eval, dropout: &mut dropout };
    let (_, w) = g.attention(prefix, q, k, k)?;
    Ok(tape.value(w).clone())
}
