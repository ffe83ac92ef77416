//! Residual encoder-decoder segmentation network.
//!
//! Pre-activation residual blocks (norm -> relu -> conv, twice, plus an
//! additive identity skip), stride-2 convolutions between encoder stages
//! that double the width while halving each spatial dim, and a mirrored
//! decoder with one block per level, 1x1x1 width-halving convolutions,
//! 2x trilinear upsampling and additive encoder skips. Deep-supervision
//! heads project the coarser decoder features to class logits.

use ndarray::Array4;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::conv::Conv3d;
use super::norm::{InstanceNorm, NormAux};
use super::upsample::{upsample2x, upsample2x_backward};
use super::{relu, relu_backward, ParamView, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    Instance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub init_filters: usize,
    pub blocks_down: Vec<usize>,
    pub blocks_up: Vec<usize>,
    pub ds_heads: usize,
    pub kernel: [usize; 3],
    pub norm: NormKind,
    pub activation: Activation,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_channels: 2,
            out_channels: 2,
            init_filters: 32,
            blocks_down: vec![2, 4, 4, 4, 4],
            blocks_up: vec![1, 1, 1, 1],
            ds_heads: 3,
            kernel: [3, 3, 3],
            norm: NormKind::Instance,
            activation: Activation::Relu,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.init_filters == 0 {
            return Err(Error::Config(
                "in_channels, out_channels and init_filters must be positive".into(),
            ));
        }
        if self.blocks_down.is_empty() {
            return Err(Error::Config("blocks_down must not be empty".into()));
        }
        if self.blocks_down.iter().chain(&self.blocks_up).any(|&b| b == 0) {
            return Err(Error::Config("block counts must be >= 1".into()));
        }
        if self.blocks_up.len() + 1 != self.blocks_down.len() {
            return Err(Error::Config(format!(
                "blocks_up must have one entry fewer than blocks_down ({} vs {})",
                self.blocks_up.len(),
                self.blocks_down.len()
            )));
        }
        if self.ds_heads > self.blocks_up.len() {
            return Err(Error::Config(format!(
                "ds_heads {} exceeds the number of decoder levels {}",
                self.ds_heads,
                self.blocks_up.len()
            )));
        }
        if self.kernel != [3, 3, 3] {
            return Err(Error::Config("kernel is fixed at 3x3x3".into()));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.blocks_down.len()
    }

    /// Channel width at an encoder/decoder stage.
    pub fn width(&self, stage: usize) -> usize {
        self.init_filters << stage
    }

    /// Spatial dims must divide this for a valid forward pass.
    pub fn divisor(&self) -> usize {
        1 << (self.stages() - 1)
    }

    /// Number of logit maps produced per forward pass.
    pub fn num_outputs(&self) -> usize {
        self.ds_heads + 1
    }
}

#[derive(Debug, Clone)]
struct ResBlock<T> {
    norm1: InstanceNorm<T>,
    conv1: Conv3d<T>,
    norm2: InstanceNorm<T>,
    conv2: Conv3d<T>,
}

pub struct BlockTape<T> {
    x: Array4<T>,
    y1: Array4<T>,
    h1: Array4<T>,
    y2: Array4<T>,
    aux1: NormAux,
    aux2: NormAux,
}

impl<T: Scalar> ResBlock<T> {
    fn new(width: usize, rng: &mut impl Rng) -> Self {
        ResBlock {
            norm1: InstanceNorm::new(width),
            conv1: Conv3d::new_without_bias(width, width, 3, 1, rng),
            norm2: InstanceNorm::new(width),
            conv2: Conv3d::new_without_bias(width, width, 3, 1, rng),
        }
    }

    fn forward(&self, x: &Array4<T>) -> Array4<T> {
        let y1 = relu(&self.norm1.forward(x).0);
        let y2 = relu(&self.norm2.forward(&self.conv1.forward(&y1)).0);
        let mut out = self.conv2.forward(&y2);
        out += x;
        out
    }

    fn forward_t(&self, x: Array4<T>) -> (Array4<T>, BlockTape<T>) {
        let (n1, aux1) = self.norm1.forward(&x);
        let y1 = relu(&n1);
        let h1 = self.conv1.forward(&y1);
        let (n2, aux2) = self.norm2.forward(&h1);
        let y2 = relu(&n2);
        let mut out = self.conv2.forward(&y2);
        out += &x;
        (
            out,
            BlockTape {
                x,
                y1,
                h1,
                y2,
                aux1,
                aux2,
            },
        )
    }

    fn backward(&mut self, tape: &BlockTape<T>, gout: &Array4<T>) -> Array4<T> {
        let g_y2 = self.conv2.backward(&tape.y2, gout);
        let g_n2 = relu_backward(&tape.y2, &g_y2);
        let g_h1 = self.norm2.backward(&tape.h1, &tape.aux2, &g_n2);
        let g_y1 = self.conv1.backward(&tape.y1, &g_h1);
        let g_n1 = relu_backward(&tape.y1, &g_y1);
        let mut gx = self.norm1.backward(&tape.x, &tape.aux1, &g_n1);
        gx += gout; // identity skip
        gx
    }

    fn zero_grads(&mut self) {
        self.norm1.zero_grads();
        self.conv1.zero_grads();
        self.norm2.zero_grads();
        self.conv2.zero_grads();
    }

    fn visit<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(ParamView<'a, T>)) {
        self.norm1.visit(&format!("{prefix}.norm1"), f);
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.norm2.visit(&format!("{prefix}.norm2"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
    }
}

#[derive(Clone)]
struct EncoderStage<T> {
    down: Option<Conv3d<T>>,
    blocks: Vec<ResBlock<T>>,
}

#[derive(Clone)]
struct DecoderLevel<T> {
    /// 1x1x1 width-halving projection applied before upsampling.
    reduce: Conv3d<T>,
    blocks: Vec<ResBlock<T>>,
    /// Encoder stage whose resolution this level restores.
    target_stage: usize,
}

#[derive(Clone)]
pub struct SegResNet<T> {
    pub cfg: NetworkConfig,
    stem: Conv3d<T>,
    stages: Vec<EncoderStage<T>>,
    decoders: Vec<DecoderLevel<T>>,
    head: Conv3d<T>,
    ds_heads: Vec<Conv3d<T>>,
}

pub struct NetTape<T> {
    input: Array4<T>,
    enc_blocks: Vec<Vec<BlockTape<T>>>,
    down_inputs: Vec<Array4<T>>,
    dec: Vec<DecTape<T>>,
    /// Head input features, kept only for stages that carry a head.
    feats: Vec<Option<Array4<T>>>,
}

struct DecTape<T> {
    reduce_in: Array4<T>,
    up_in_dim: (usize, usize, usize, usize),
    blocks: Vec<BlockTape<T>>,
}

impl<T: Scalar> SegResNet<T> {
    /// Layers are created in a fixed order, so a seeded rng makes the
    /// initialization reproducible.
    pub fn build(cfg: NetworkConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let nstages = cfg.stages();
        let stem = Conv3d::new(cfg.in_channels, cfg.init_filters, 3, 1, rng);
        let mut stages = Vec::with_capacity(nstages);
        for s in 0..nstages {
            let down = (s > 0).then(|| Conv3d::new(cfg.width(s - 1), cfg.width(s), 3, 2, rng));
            let blocks = (0..cfg.blocks_down[s])
                .map(|_| ResBlock::new(cfg.width(s), rng))
                .collect();
            stages.push(EncoderStage { down, blocks });
        }
        let mut decoders = Vec::new();
        for (i, &nblocks) in cfg.blocks_up.iter().enumerate() {
            // Deepest level first: restores stage nstages-2-i.
            let target_stage = nstages - 2 - i;
            let reduce = Conv3d::new(cfg.width(target_stage + 1), cfg.width(target_stage), 1, 1, rng);
            let blocks = (0..nblocks)
                .map(|_| ResBlock::new(cfg.width(target_stage), rng))
                .collect();
            decoders.push(DecoderLevel {
                reduce,
                blocks,
                target_stage,
            });
        }
        let head = Conv3d::new(cfg.init_filters, cfg.out_channels, 1, 1, rng);
        let ds_heads = (1..=cfg.ds_heads)
            .map(|stage| Conv3d::new(cfg.width(stage), cfg.out_channels, 1, 1, rng))
            .collect();
        Ok(SegResNet {
            cfg,
            stem,
            stages,
            decoders,
            head,
            ds_heads,
        })
    }

    pub fn check_input(&self, x: &Array4<T>) -> Result<()> {
        let (c, d0, d1, d2) = x.dim();
        if c != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "input has {c} channels, network expects {}",
                self.cfg.in_channels
            )));
        }
        let div = self.cfg.divisor();
        for (axis, d) in [d0, d1, d2].into_iter().enumerate() {
            if d % div != 0 || d == 0 {
                return Err(Error::Shape(format!(
                    "spatial axis {axis} has dim {d}, not divisible by {div}"
                )));
            }
        }
        Ok(())
    }

    /// Deep-supervision head `i` (1-based) reads the stage-`i` feature:
    /// a decoder output for i < stages-1, the encoder bottleneck at the
    /// deepest level.
    fn needs_feat(&self, stage: usize) -> bool {
        stage == 0 || (1..=self.cfg.ds_heads).contains(&stage)
    }

    /// Evaluation forward pass: logits at scales 1, 1/2, ..., 1/2^ds_heads.
    pub fn forward(&self, x: &Array4<T>) -> Result<Vec<Array4<T>>> {
        self.check_input(x)?;
        let nstages = self.cfg.stages();
        let mut enc: Vec<Array4<T>> = Vec::with_capacity(nstages);
        let mut cur = self.stem.forward(x);
        for stage in &self.stages {
            if let Some(down) = &stage.down {
                cur = down.forward(&cur);
            }
            for block in &stage.blocks {
                cur = block.forward(&cur);
            }
            enc.push(cur.clone());
        }
        let mut feats: Vec<Option<Array4<T>>> = vec![None; nstages];
        let mut d = enc.pop().expect("at least one stage");
        if self.needs_feat(nstages - 1) && !self.decoders.is_empty() {
            feats[nstages - 1] = Some(d.clone());
        }
        if self.decoders.is_empty() {
            feats[0] = Some(d);
        } else {
            for level in &self.decoders {
                let mut up = upsample2x(&level.reduce.forward(&d));
                up += &enc.pop().expect("encoder skip available");
                d = up;
                for block in &level.blocks {
                    d = block.forward(&d);
                }
                if self.needs_feat(level.target_stage) {
                    feats[level.target_stage] = Some(d.clone());
                }
            }
        }
        let mut logits = Vec::with_capacity(self.cfg.num_outputs());
        logits.push(self.head.forward(feats[0].as_ref().expect("full-res feature")));
        for (i, ds) in self.ds_heads.iter().enumerate() {
            logits.push(ds.forward(feats[i + 1].as_ref().expect("ds feature")));
        }
        Ok(logits)
    }

    /// Training forward pass; keeps every intermediate needed by `backward`.
    pub fn forward_train(&self, x: Array4<T>) -> Result<(Vec<Array4<T>>, NetTape<T>)> {
        self.check_input(&x)?;
        let nstages = self.cfg.stages();
        let mut tape = NetTape {
            input: x.clone(),
            enc_blocks: Vec::with_capacity(nstages),
            down_inputs: Vec::new(),
            dec: Vec::new(),
            feats: Vec::new(),
        };
        let mut enc: Vec<Array4<T>> = Vec::with_capacity(nstages);
        let mut cur = self.stem.forward(&x);
        for stage in &self.stages {
            if let Some(down) = &stage.down {
                tape.down_inputs.push(cur.clone());
                cur = down.forward(&cur);
            }
            let mut blocks = Vec::with_capacity(stage.blocks.len());
            for block in &stage.blocks {
                let (out, bt) = block.forward_t(cur);
                cur = out;
                blocks.push(bt);
            }
            tape.enc_blocks.push(blocks);
            enc.push(cur.clone());
        }
        let mut feats: Vec<Option<Array4<T>>> = vec![None; nstages];
        let mut d = enc.pop().expect("at least one stage");
        if self.needs_feat(nstages - 1) && !self.decoders.is_empty() {
            feats[nstages - 1] = Some(d.clone());
        }
        for level in &self.decoders {
            let reduce_in = d.clone();
            let reduced = level.reduce.forward(&d);
            let up_in_dim = reduced.dim();
            let mut up = upsample2x(&reduced);
            up += &enc.pop().expect("encoder skip available");
            d = up;
            let mut blocks = Vec::with_capacity(level.blocks.len());
            for block in &level.blocks {
                let (out, bt) = block.forward_t(d);
                d = out;
                blocks.push(bt);
            }
            tape.dec.push(DecTape {
                reduce_in,
                up_in_dim,
                blocks,
            });
            if self.needs_feat(level.target_stage) {
                feats[level.target_stage] = Some(d.clone());
            }
        }
        if self.decoders.is_empty() {
            feats[0] = Some(d);
        }
        let mut logits = Vec::with_capacity(self.cfg.num_outputs());
        logits.push(self.head.forward(feats[0].as_ref().expect("full-res feature")));
        for (i, ds) in self.ds_heads.iter().enumerate() {
            logits.push(ds.forward(feats[i + 1].as_ref().expect("ds feature")));
        }
        tape.feats = feats;
        Ok((logits, tape))
    }

    /// Accumulates parameter gradients for one sample given the gradient of
    /// the loss with respect to each logit map.
    pub fn backward(&mut self, tape: &NetTape<T>, grad_logits: &[Array4<T>]) -> Result<()> {
        if grad_logits.len() != self.cfg.num_outputs() {
            return Err(Error::Shape(format!(
                "expected {} logit gradients, got {}",
                self.cfg.num_outputs(),
                grad_logits.len()
            )));
        }
        let nstages = self.cfg.stages();
        // Head gradients land on their input features.
        let mut g_feat: Vec<Option<Array4<T>>> = vec![None; nstages];
        let feat = |s: usize| tape.feats[s].as_ref().expect("feature cached for head");
        g_feat[0] = Some(self.head.backward(feat(0), &grad_logits[0]));
        for (i, ds) in self.ds_heads.iter_mut().enumerate() {
            g_feat[i + 1] = Some(ds.backward(feat(i + 1), &grad_logits[i + 1]));
        }

        // Decoder levels, shallowest (full resolution) first.
        let mut g_enc: Vec<Option<Array4<T>>> = vec![None; nstages];
        if self.decoders.is_empty() {
            g_enc[0] = g_feat[0].take();
        } else {
            let mut g = g_feat[0].take().expect("main head gradient");
            let ndec = self.decoders.len();
            for pos in (0..ndec).rev() {
                let level = &mut self.decoders[pos];
                let dtape = &tape.dec[pos];
                for (block, bt) in level.blocks.iter_mut().zip(&dtape.blocks).rev() {
                    g = block.backward(bt, &g);
                }
                // g is now the gradient at (upsample + skip).
                let stage = level.target_stage;
                accumulate(&mut g_enc[stage], &g);
                let g_reduced = upsample2x_backward(dtape.up_in_dim, &g);
                let mut g_next = level.reduce.backward(&dtape.reduce_in, &g_reduced);
                // A deep-supervision head may also feed this feature.
                if let Some(extra) = g_feat[stage + 1].take() {
                    g_next += &extra;
                }
                g = g_next;
            }
            g_enc[nstages - 1] = Some(g);
        }

        // Encoder stages, deepest first.
        let mut g_down: Option<Array4<T>> = None;
        for s in (0..nstages).rev() {
            let mut g = g_enc[s].take().unwrap_or_else(|| {
                Array4::zeros(tape.enc_blocks[s].last().map(|b| b.x.dim()).expect("block tape"))
            });
            if let Some(gd) = g_down.take() {
                g += &gd;
            }
            let stage = &mut self.stages[s];
            for (block, bt) in stage.blocks.iter_mut().zip(&tape.enc_blocks[s]).rev() {
                g = block.backward(bt, &g);
            }
            if let Some(down) = &mut stage.down {
                g_down = Some(down.backward(&tape.down_inputs[s - 1], &g));
            } else {
                self.stem.backward_params(&tape.input, &g);
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.stem.zero_grads();
        for stage in &mut self.stages {
            if let Some(d) = &mut stage.down {
                d.zero_grads();
            }
            for b in &mut stage.blocks {
                b.zero_grads();
            }
        }
        for dec in &mut self.decoders {
            dec.reduce.zero_grads();
            for b in &mut dec.blocks {
                b.zero_grads();
            }
        }
        self.head.zero_grads();
        for h in &mut self.ds_heads {
            h.zero_grads();
        }
    }

    /// Visit every parameter in a stable, documented order.
    pub fn for_each_param<'a>(&'a mut self, f: &mut impl FnMut(ParamView<'a, T>)) {
        self.stem.visit("stem.conv", f);
        for (s, stage) in self.stages.iter_mut().enumerate() {
            if let Some(d) = &mut stage.down {
                d.visit(&format!("enc.s{s}.down"), f);
            }
            for (b, block) in stage.blocks.iter_mut().enumerate() {
                block.visit(&format!("enc.s{s}.b{b}"), f);
            }
        }
        for dec in self.decoders.iter_mut() {
            let l = dec.target_stage;
            dec.reduce.visit(&format!("dec.l{l}.reduce"), f);
            for (b, block) in dec.blocks.iter_mut().enumerate() {
                block.visit(&format!("dec.l{l}.b{b}"), f);
            }
        }
        self.head.visit("head.main", f);
        for (i, h) in self.ds_heads.iter_mut().enumerate() {
            h.visit(&format!("head.ds{}", i + 1), f);
        }
    }

    /// (name, shape) inventory in visitation order.
    pub fn param_inventory(&mut self) -> Vec<(String, Vec<usize>)> {
        let mut inv = Vec::new();
        self.for_each_param(&mut |p| inv.push((p.name, p.shape)));
        inv
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |p| n += p.value.len());
        n
    }

    /// Encoder widths, e.g. [32, 64, 128, 256, 512] for the default config.
    pub fn encoder_widths(&self) -> Vec<usize> {
        (0..self.cfg.stages()).map(|s| self.cfg.width(s)).collect()
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Array4<T>>, g: &Array4<T>) {
    match slot {
        Some(acc) => *acc += g,
        None => *slot = Some(g.clone()),
    }
}
