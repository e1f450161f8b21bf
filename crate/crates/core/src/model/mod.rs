//! The two-tower encoder-decoder depth network.
//!
//! Two structurally identical contracting paths with independent weights: the
//! primary tower sees the left image plus an optional depth-clue channel, the
//! secondary tower sees the right image alone. Same-level features from the
//! two towers are fused by elementwise multiplication before the decoder
//! concatenates them, which is what couples the towers' weight updates. Only
//! the primary tower continues into the bottleneck; the secondary terminates
//! at the deepest skip.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{GradGraph, Tensor, TensorError, TensorId};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("bad model input: {0}")]
    Input(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint at byte {offset}: {detail}")]
    Corrupt { offset: u64, detail: String },
}

pub type Result<T> = std::result::Result<T, ModelError>;

pub const CONV_KERNEL: usize = 5;
pub const CONV_PAD: usize = 2;

/// Hyper-shape of the network: number of downsampling levels and the channel
/// width after the first conv block. Channel width at level `l` is `C * 2^l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub clue_enabled: bool,
}

impl ModelConfig {
    pub fn new(levels: usize, base_channels: usize, clue_enabled: bool) -> Result<Self> {
        let cfg = ModelConfig {
            levels,
            base_channels,
            clue_enabled,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(ModelError::Config(format!(
                "levels must be >= 1, got {}",
                self.levels
            )));
        }
        if self.base_channels < 1 {
            return Err(ModelError::Config(format!(
                "base_channels must be >= 1, got {}",
                self.base_channels
            )));
        }
        Ok(())
    }

    /// Channels consumed by the primary tower: left RGB plus the clue.
    pub fn in_primary(&self) -> usize {
        if self.clue_enabled {
            4
        } else {
            3
        }
    }

    /// Channels consumed by the secondary tower: right RGB.
    pub fn in_secondary(&self) -> usize {
        3
    }

    pub fn out_channels(&self) -> usize {
        1
    }

    /// Channel width at downsampling level `l`.
    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Inputs must be divisible by this in both spatial dimensions.
    pub fn spatial_divisor(&self) -> usize {
        1 << self.levels
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
}

#[derive(Debug, Clone)]
pub struct DecoderStage {
    pub up: ConvLayer,
    pub block: ConvBlock,
}

/// All learnable weights. The two towers are separate storage by
/// construction; nothing is aliased between them.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub seed: u64,
    /// One block per level plus the bottleneck block (levels + 1 entries).
    pub primary: Vec<ConvBlock>,
    /// One block per level; no bottleneck.
    pub secondary: Vec<ConvBlock>,
    /// Deepest stage first.
    pub decoder: Vec<DecoderStage>,
    /// 1x1 conv mapping base channels to the single depth channel.
    pub head: ConvLayer,
}

/// Canonical parameter list: `(name, weight shape)` in a fixed order shared
/// by initialization, the optimizer, and the checkpoint format.
pub fn parameter_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut specs = Vec::new();
    let conv = |specs: &mut Vec<(String, Vec<usize>)>, name: String, cin: usize, cout: usize, k: usize| {
        specs.push((format!("{name}.weight"), vec![cout, cin, k, k]));
        specs.push((format!("{name}.bias"), vec![cout]));
    };
    let block = |specs: &mut Vec<(String, Vec<usize>)>, name: String, cin: usize, cout: usize| {
        conv(specs, format!("{name}.conv1"), cin, cout, CONV_KERNEL);
        conv(specs, format!("{name}.conv2"), cout, cout, CONV_KERNEL);
    };

    let l = cfg.levels;
    for lev in 0..=l {
        let cin = if lev == 0 {
            cfg.in_primary()
        } else {
            cfg.width(lev - 1)
        };
        block(&mut specs, format!("primary.{lev}"), cin, cfg.width(lev));
    }
    for lev in 0..l {
        let cin = if lev == 0 {
            cfg.in_secondary()
        } else {
            cfg.width(lev - 1)
        };
        block(&mut specs, format!("secondary.{lev}"), cin, cfg.width(lev));
    }
    for (i, lev) in (0..l).rev().enumerate() {
        // transposed conv weight layout is Cin x Cout x 4 x 4
        specs.push((
            format!("decoder.{i}.up.weight"),
            vec![cfg.width(lev + 1), cfg.width(lev), 4, 4],
        ));
        specs.push((format!("decoder.{i}.up.bias"), vec![cfg.width(lev)]));
        block(
            &mut specs,
            format!("decoder.{i}.block"),
            2 * cfg.width(lev),
            cfg.width(lev),
        );
    }
    conv(&mut specs, "head".into(), cfg.width(0), cfg.out_channels(), 1);
    specs
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn init_tensor(name: &str, shape: &[usize], seed: u64) -> Tensor {
    if name.ends_with(".bias") {
        return Tensor::zeros(shape.to_vec());
    }
    // Fan-in scaled uniform; each parameter gets its own stream derived from
    // (seed, name) so layers are independent of one another.
    let fan_in: usize = shape[1..].iter().product();
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name));
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("init shape/data agree")
}

type Fetch<'a> = dyn FnMut(&str, &[usize]) -> Result<Tensor> + 'a;

fn fetch_layer(fetch: &mut Fetch, name: &str, cin: usize, cout: usize, k: usize) -> Result<ConvLayer> {
    Ok(ConvLayer {
        weight: fetch(&format!("{name}.weight"), &[cout, cin, k, k])?,
        bias: fetch(&format!("{name}.bias"), &[cout])?,
    })
}

fn fetch_block(fetch: &mut Fetch, name: &str, cin: usize, cout: usize) -> Result<ConvBlock> {
    Ok(ConvBlock {
        conv1: fetch_layer(fetch, &format!("{name}.conv1"), cin, cout, CONV_KERNEL)?,
        conv2: fetch_layer(fetch, &format!("{name}.conv2"), cout, cout, CONV_KERNEL)?,
    })
}

fn assemble(cfg: &ModelConfig, seed: u64, fetch: &mut Fetch) -> Result<ModelParams> {
    let l = cfg.levels;
    let mut primary = Vec::with_capacity(l + 1);
    for lev in 0..=l {
        let cin = if lev == 0 {
            cfg.in_primary()
        } else {
            cfg.width(lev - 1)
        };
        primary.push(fetch_block(fetch, &format!("primary.{lev}"), cin, cfg.width(lev))?);
    }
    let mut secondary = Vec::with_capacity(l);
    for lev in 0..l {
        let cin = if lev == 0 {
            cfg.in_secondary()
        } else {
            cfg.width(lev - 1)
        };
        secondary.push(fetch_block(fetch, &format!("secondary.{lev}"), cin, cfg.width(lev))?);
    }
    let mut decoder = Vec::with_capacity(l);
    for (i, lev) in (0..l).rev().enumerate() {
        let up = ConvLayer {
            weight: fetch(
                &format!("decoder.{i}.up.weight"),
                &[cfg.width(lev + 1), cfg.width(lev), 4, 4],
            )?,
            bias: fetch(&format!("decoder.{i}.up.bias"), &[cfg.width(lev)])?,
        };
        let blk = fetch_block(fetch, &format!("decoder.{i}.block"), 2 * cfg.width(lev), cfg.width(lev))?;
        decoder.push(DecoderStage { up, block: blk });
    }
    let head = fetch_layer(fetch, "head", cfg.width(0), cfg.out_channels(), 1)?;

    Ok(ModelParams {
        config: *cfg,
        seed,
        primary,
        secondary,
        decoder,
        head,
    })
}

/// Initialize all weights deterministically from the seed.
pub fn build(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    assemble(cfg, seed, &mut |name, shape| Ok(init_tensor(name, shape, seed)))
}

/// Rebuild parameters from named tensors (checkpoint loading); every
/// parameter must be present with exactly the expected shape.
pub(crate) fn assemble_from_map(
    cfg: &ModelConfig,
    seed: u64,
    mut tensors: std::collections::HashMap<String, Tensor>,
) -> Result<ModelParams> {
    let params = assemble(cfg, seed, &mut |name, shape| {
        let t = tensors.remove(name).ok_or_else(|| {
            ModelError::Config(format!("checkpoint is missing parameter {name}"))
        })?;
        if t.shape() != shape {
            return Err(ModelError::Config(format!(
                "parameter {name} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    })?;
    if let Some(name) = tensors.keys().next() {
        return Err(ModelError::Config(format!(
            "checkpoint contains unknown parameter {name}"
        )));
    }
    Ok(params)
}

fn push_layer<'a>(out: &mut Vec<(String, &'a Tensor)>, name: String, l: &'a ConvLayer) {
    out.push((format!("{name}.weight"), &l.weight));
    out.push((format!("{name}.bias"), &l.bias));
}

fn push_layer_mut<'a>(out: &mut Vec<(String, &'a mut Tensor)>, name: String, l: &'a mut ConvLayer) {
    out.push((format!("{name}.weight"), &mut l.weight));
    out.push((format!("{name}.bias"), &mut l.bias));
}

impl ModelParams {
    /// `(name, tensor)` pairs in the canonical order of [`parameter_specs`].
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (lev, b) in self.primary.iter().enumerate() {
            push_layer(&mut out, format!("primary.{lev}.conv1"), &b.conv1);
            push_layer(&mut out, format!("primary.{lev}.conv2"), &b.conv2);
        }
        for (lev, b) in self.secondary.iter().enumerate() {
            push_layer(&mut out, format!("secondary.{lev}.conv1"), &b.conv1);
            push_layer(&mut out, format!("secondary.{lev}.conv2"), &b.conv2);
        }
        for (i, s) in self.decoder.iter().enumerate() {
            push_layer(&mut out, format!("decoder.{i}.up"), &s.up);
            push_layer(&mut out, format!("decoder.{i}.block.conv1"), &s.block.conv1);
            push_layer(&mut out, format!("decoder.{i}.block.conv2"), &s.block.conv2);
        }
        push_layer(&mut out, "head".into(), &self.head);
        out
    }

    /// Mutable variant of [`named`](Self::named), same order.
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (lev, b) in self.primary.iter_mut().enumerate() {
            push_layer_mut(&mut out, format!("primary.{lev}.conv1"), &mut b.conv1);
            push_layer_mut(&mut out, format!("primary.{lev}.conv2"), &mut b.conv2);
        }
        for (lev, b) in self.secondary.iter_mut().enumerate() {
            push_layer_mut(&mut out, format!("secondary.{lev}.conv1"), &mut b.conv1);
            push_layer_mut(&mut out, format!("secondary.{lev}.conv2"), &mut b.conv2);
        }
        for (i, s) in self.decoder.iter_mut().enumerate() {
            push_layer_mut(&mut out, format!("decoder.{i}.up"), &mut s.up);
            push_layer_mut(&mut out, format!("decoder.{i}.block.conv1"), &mut s.block.conv1);
            push_layer_mut(&mut out, format!("decoder.{i}.block.conv2"), &mut s.block.conv2);
        }
        push_layer_mut(&mut out, "head".into(), &mut self.head);
        out
    }

    /// `(trainable, total)` parameter counts by exact summation. Every
    /// parameter here is trainable, so the two numbers coincide.
    pub fn param_count(&self) -> (usize, usize) {
        let total = self.named().iter().map(|(_, t)| t.numel()).sum();
        (total, total)
    }
}

/// Ids of one layer's tensors once bound into a graph.
#[derive(Debug, Clone, Copy)]
pub struct LayerIds {
    pub weight: TensorId,
    pub bias: TensorId,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockIds {
    pub conv1: LayerIds,
    pub conv2: LayerIds,
}

#[derive(Debug, Clone, Copy)]
pub struct StageIds {
    pub up: LayerIds,
    pub block: BlockIds,
}

/// Model parameters inserted as leaves of one [`GradGraph`].
#[derive(Debug, Clone)]
pub struct GraphParams {
    pub primary: Vec<BlockIds>,
    pub secondary: Vec<BlockIds>,
    pub decoder: Vec<StageIds>,
    pub head: LayerIds,
}

impl GraphParams {
    /// `(name, id)` pairs matching [`ModelParams::named`] order.
    pub fn named(&self) -> Vec<(String, TensorId)> {
        let mut out = Vec::new();
        let layer = |out: &mut Vec<(String, TensorId)>, name: String, l: &LayerIds| {
            out.push((format!("{name}.weight"), l.weight));
            out.push((format!("{name}.bias"), l.bias));
        };
        for (lev, b) in self.primary.iter().enumerate() {
            layer(&mut out, format!("primary.{lev}.conv1"), &b.conv1);
            layer(&mut out, format!("primary.{lev}.conv2"), &b.conv2);
        }
        for (lev, b) in self.secondary.iter().enumerate() {
            layer(&mut out, format!("secondary.{lev}.conv1"), &b.conv1);
            layer(&mut out, format!("secondary.{lev}.conv2"), &b.conv2);
        }
        for (i, s) in self.decoder.iter().enumerate() {
            layer(&mut out, format!("decoder.{i}.up"), &s.up);
            layer(&mut out, format!("decoder.{i}.block.conv1"), &s.block.conv1);
            layer(&mut out, format!("decoder.{i}.block.conv2"), &s.block.conv2);
        }
        layer(&mut out, "head".into(), &self.head);
        out
    }
}

/// Rebuild the bound-parameter structure from ids in canonical
/// [`parameter_specs`] order (weight then bias per layer).
pub fn graph_params_from_ids(cfg: &ModelConfig, ids: &[TensorId]) -> GraphParams {
    let mut cursor = ids.iter().copied();
    let layer = |cursor: &mut dyn Iterator<Item = TensorId>| LayerIds {
        weight: cursor.next().expect("id list too short"),
        bias: cursor.next().expect("id list too short"),
    };
    let block = |cursor: &mut dyn Iterator<Item = TensorId>| BlockIds {
        conv1: LayerIds {
            weight: cursor.next().expect("id list too short"),
            bias: cursor.next().expect("id list too short"),
        },
        conv2: LayerIds {
            weight: cursor.next().expect("id list too short"),
            bias: cursor.next().expect("id list too short"),
        },
    };
    let gp = GraphParams {
        primary: (0..=cfg.levels).map(|_| block(&mut cursor)).collect(),
        secondary: (0..cfg.levels).map(|_| block(&mut cursor)).collect(),
        decoder: (0..cfg.levels)
            .map(|_| StageIds {
                up: layer(&mut cursor),
                block: block(&mut cursor),
            })
            .collect(),
        head: layer(&mut cursor),
    };
    assert!(cursor.next().is_none(), "id list longer than parameter spec");
    gp
}

/// Insert every parameter tensor as a grad-tracked leaf.
pub fn bind(params: &ModelParams, g: &mut GradGraph) -> GraphParams {
    let layer = |g: &mut GradGraph, l: &ConvLayer| LayerIds {
        weight: g.leaf(l.weight.clone().with_grad()),
        bias: g.leaf(l.bias.clone().with_grad()),
    };
    let block = |g: &mut GradGraph, b: &ConvBlock| BlockIds {
        conv1: layer(g, &b.conv1),
        conv2: layer(g, &b.conv2),
    };
    GraphParams {
        primary: params.primary.iter().map(|b| block(g, b)).collect(),
        secondary: params.secondary.iter().map(|b| block(g, b)).collect(),
        decoder: params
            .decoder
            .iter()
            .map(|s| StageIds {
                up: layer(g, &s.up),
                block: block(g, &s.block),
            })
            .collect(),
        head: layer(g, &params.head),
    }
}

fn conv_block_forward(g: &mut GradGraph, b: &BlockIds, x: TensorId) -> Result<TensorId> {
    let c1 = g.conv2d(x, b.conv1.weight, b.conv1.bias, CONV_PAD)?;
    let a1 = g.relu(c1);
    let c2 = g.conv2d(a1, b.conv2.weight, b.conv2.bias, CONV_PAD)?;
    Ok(g.relu(c2))
}

/// Run one contracting path. Returns the per-level block outputs (the skip
/// tensors, recorded before each pooling) and the deepest feature map. For a
/// tower without a bottleneck block the deepest output is the last skip.
pub fn encoder_forward(
    g: &mut GradGraph,
    blocks: &[BlockIds],
    input: TensorId,
) -> Result<(Vec<TensorId>, TensorId)> {
    let mut outputs = Vec::with_capacity(blocks.len());
    let mut cur = input;
    for (i, b) in blocks.iter().enumerate() {
        if i > 0 {
            cur = g.maxpool2d(cur)?;
        }
        cur = conv_block_forward(g, b, cur)?;
        outputs.push(cur);
    }
    let deepest = *outputs.last().expect("tower has at least one block");
    Ok((outputs, deepest))
}

/// Elementwise multiply same-level skips from the two towers. The backward
/// pass of each product routes gradient into both towers.
pub fn fuse(
    g: &mut GradGraph,
    primary_skips: &[TensorId],
    secondary_skips: &[TensorId],
) -> Result<Vec<TensorId>> {
    if primary_skips.len() != secondary_skips.len() {
        return Err(ModelError::Input(format!(
            "skip level counts differ: {} vs {}",
            primary_skips.len(),
            secondary_skips.len()
        )));
    }
    primary_skips
        .iter()
        .zip(secondary_skips)
        .map(|(p, s)| g.mul(*p, *s).map_err(ModelError::from))
        .collect()
}

fn check_inputs(
    g: &GradGraph,
    cfg: &ModelConfig,
    left: TensorId,
    clue: Option<TensorId>,
    right: TensorId,
) -> Result<(usize, usize, usize)> {
    let ls = g.tensor(left).shape().to_vec();
    let rs = g.tensor(right).shape().to_vec();
    if ls.len() != 4 || ls[1] != 3 {
        return Err(ModelError::Input(format!(
            "left image must be N x 3 x H x W, got {ls:?}"
        )));
    }
    if rs != ls {
        return Err(ModelError::Input(format!(
            "right image shape {rs:?} does not match left {ls:?}"
        )));
    }
    let (n, h, w) = (ls[0], ls[2], ls[3]);
    let d = cfg.spatial_divisor();
    if h % d != 0 {
        return Err(ModelError::Input(format!(
            "height {h} is not divisible by 2^levels = {d}"
        )));
    }
    if w % d != 0 {
        return Err(ModelError::Input(format!(
            "width {w} is not divisible by 2^levels = {d}"
        )));
    }
    match (cfg.clue_enabled, clue) {
        (true, None) => {
            return Err(ModelError::Input(
                "config expects a depth clue but none was provided".into(),
            ))
        }
        (false, Some(_)) => {
            return Err(ModelError::Input(
                "config has the clue disabled but a clue was provided".into(),
            ))
        }
        (true, Some(c)) => {
            let cs = g.tensor(c).shape();
            if cs != [n, 1, h, w] {
                return Err(ModelError::Input(format!(
                    "clue must be {:?}, got {cs:?}",
                    [n, 1, h, w]
                )));
            }
        }
        (false, None) => {}
    }
    Ok((n, h, w))
}

/// Full forward pass on an existing graph. Output is N x 1 x H x W with
/// values strictly inside (0, 1).
pub fn forward_graph(
    g: &mut GradGraph,
    gp: &GraphParams,
    cfg: &ModelConfig,
    left: TensorId,
    clue: Option<TensorId>,
    right: TensorId,
) -> Result<TensorId> {
    check_inputs(g, cfg, left, clue, right)?;
    let l = cfg.levels;

    let primary_in = match clue {
        Some(c) => g.concat_channels(left, c)?,
        None => left,
    };
    let (p_outs, deepest) = encoder_forward(g, &gp.primary, primary_in)?;
    let (s_outs, _) = encoder_forward(g, &gp.secondary, right)?;
    let fused = fuse(g, &p_outs[..l], &s_outs)?;

    // Decoder: up-convolve, concatenate the fused skip (decoder feature
    // first), then one conv block. Stages run deepest-first.
    let mut cur = deepest;
    for (i, stage) in gp.decoder.iter().enumerate() {
        cur = g.conv_transpose2d(cur, stage.up.weight, stage.up.bias)?;
        cur = g.concat_channels(cur, fused[l - 1 - i])?;
        cur = conv_block_forward(g, &stage.block, cur)?;
    }

    let logits = g.conv2d(cur, gp.head.weight, gp.head.bias, 0)?;
    Ok(g.sigmoid(logits))
}

/// Convenience inference entry point: binds the parameters into a fresh
/// graph and returns the predicted depth map.
pub fn forward(
    params: &ModelParams,
    left: &Tensor,
    clue: Option<&Tensor>,
    right: &Tensor,
) -> Result<Tensor> {
    let mut g = GradGraph::new();
    let gp = bind(params, &mut g);
    let li = g.leaf(left.clone());
    let ci = clue.map(|c| g.leaf(c.clone()));
    let ri = g.leaf(right.clone());
    let out = forward_graph(&mut g, &gp, &params.config, li, ci, ri)?;
    Ok(g.tensor(out).clone())
}
