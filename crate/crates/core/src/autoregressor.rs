//! Masked-convolution context networks over latent grids.
//!
//! Masks follow raster order: a type-A kernel sees taps strictly before the
//! centre, a type-B kernel additionally sees the centre. The multi-directional
//! block runs a masked branch on each quarter-turn rotation of its input,
//! turns each branch output back to the input frame, concatenates them along
//! channels and reduces with a 1×1 convolution.
//!
//! Stacking such blocks naively (fused output of one block as input of the
//! next) lets position `(i, j)` reach its own context after two blocks, since
//! every neighbour of `(i, j)` already saw it. The default
//! [`MultiFusion::Streams`] layout therefore keeps the four rotated branches
//! as separate streams through the whole stack; each block fuses its four
//! streams with its own 1×1 reduction and the context is the sum of the
//! per-block fused outputs. [`MultiFusion::Chained`] keeps the naive layout.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dihedral;
use crate::encoder::LatentGrid;
use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::kernels::ConvGeom;
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_BLOCKS: usize = 6;

/// Context grid produced by the autoregressor; same layout as [`LatentGrid`].
pub type ContextGrid<T> = LatentGrid<T>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskType {
    A,
    B,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Directional {
    Single,
    Multi,
}

/// Which mask each block uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPattern {
    /// Single: A then B. Multi: A in every block and branch.
    Standard,
    AllA,
    /// Leaky on purpose; the leak checks must reject it.
    AllB,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiFusion {
    Streams,
    Chained,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedConvSpec {
    pub kernel: usize,
    pub mask_type: MaskType,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl MaskedConvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kernel.is_multiple_of(2) {
            bail!(Config, "masked convolution needs an odd kernel, got {}", self.kernel);
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            bail!(Config, "masked convolution channel counts must be positive");
        }
        Ok(())
    }

    /// Whether kernel tap `(ky, kx)` is visible.
    pub fn tap_visible(&self, ky: usize, kx: usize) -> bool {
        let c = self.kernel / 2;
        ky < c || (ky == c && (kx < c || (kx == c && self.mask_type == MaskType::B)))
    }

    pub fn visible_taps(&self) -> usize {
        let k = self.kernel;
        (0..k * k).filter(|t| self.tap_visible(t / k, t % k)).count()
    }

    /// Multiplicative weight mask, `(out, in, k, k)` flattened.
    pub fn weight_mask<T: Real>(&self) -> Vec<T> {
        let k = self.kernel;
        let tap: Vec<T> = (0..k * k)
            .map(|t| if self.tap_visible(t / k, t % k) { T::one() } else { T::zero() })
            .collect();
        let mut mask = Vec::with_capacity(self.out_channels * self.in_channels * k * k);
        for _ in 0..self.out_channels * self.in_channels {
            mask.extend_from_slice(&tap);
        }
        mask
    }
}

#[derive(Clone, Debug)]
pub struct MaskedConv {
    pub spec: MaskedConvSpec,
    weight: ParamId,
    bias: ParamId,
}

impl MaskedConv {
    pub fn build<T: Real, R: Rng + ?Sized>(
        spec: MaskedConvSpec,
        store: &mut ParamStore<T>,
        name: &str,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let k = spec.kernel;
        let weight = store.init(
            &format!("{name}.weight"),
            &[spec.out_channels, spec.in_channels, k, k],
            Init::KaimingNormal {
                fan_in: spec.in_channels * spec.visible_taps().max(1),
            },
            rng,
        )?;
        let bias = store.init(&format!("{name}.bias"), &[spec.out_channels], Init::Zeros, rng)?;
        Ok(Self { spec, weight, bias })
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }

    pub fn bias_id(&self) -> ParamId {
        self.bias
    }

    /// Masked convolution with zero padding, `(N, C, G, G)` in and out.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let w = g.mul_const(w, Arc::new(self.spec.weight_mask()))?;
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), ConvGeom::same(self.spec.kernel))
    }
}

/// Applies a masked convolution to a concrete `(N, C, G, G)` tensor.
pub fn masked_conv<T: Real>(
    input: &Tensor<T>,
    spec: MaskedConvSpec,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    spec.validate()?;
    let mut store = ParamStore::new();
    let w = store.insert("w", weight.clone())?;
    let b = store.insert("b", bias.clone())?;
    let conv = MaskedConv {
        spec,
        weight: w,
        bias: b,
    };
    let mut g = Graph::new();
    let x = g.input(input.clone());
    let y = conv.forward(&mut g, &store, x)?;
    Ok(g.value(y).clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArConfig {
    pub directional: Directional,
    pub channels: usize,
    pub kernel: usize,
    pub blocks: usize,
    pub pattern: MaskPattern,
    pub fusion: MultiFusion,
    /// One set of branch weights reused for all four rotations.
    pub share_branch_weights: bool,
    pub residual: bool,
}

impl ArConfig {
    pub fn new(directional: Directional, channels: usize) -> Self {
        Self {
            directional,
            channels,
            kernel: 3,
            blocks: DEFAULT_BLOCKS,
            pattern: MaskPattern::Standard,
            fusion: MultiFusion::Streams,
            share_branch_weights: false,
            residual: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            bail!(Config, "autoregressor needs at least one block");
        }
        if self.channels == 0 {
            bail!(Config, "autoregressor channel count must be positive");
        }
        if self.kernel.is_multiple_of(2) {
            bail!(Config, "masked convolution needs an odd kernel, got {}", self.kernel);
        }
        Ok(())
    }

    pub fn mask_for_block(&self, k: usize) -> MaskType {
        match (self.pattern, self.directional) {
            (MaskPattern::AllA, _) => MaskType::A,
            (MaskPattern::AllB, _) => MaskType::B,
            (MaskPattern::Standard, Directional::Multi) => MaskType::A,
            (MaskPattern::Standard, Directional::Single) => {
                if k == 0 {
                    MaskType::A
                } else {
                    MaskType::B
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct MultiDirectionalBlock {
    branches: Vec<MaskedConv>,
    reduce_w: ParamId,
    reduce_b: ParamId,
}

impl MultiDirectionalBlock {
    pub fn build<T: Real, R: Rng + ?Sized>(
        spec: MaskedConvSpec,
        shared: bool,
        store: &mut ParamStore<T>,
        name: &str,
        rng: &mut R,
    ) -> Result<Self> {
        let n = if shared { 1 } else { 4 };
        let branches = (0..n)
            .map(|b| MaskedConv::build(spec, store, &format!("{name}.branch{b}"), rng))
            .collect::<Result<Vec<_>>>()?;
        let c = spec.out_channels;
        let reduce_w = store.init(
            &format!("{name}.reduce.weight"),
            &[c, 4 * c, 1, 1],
            Init::Normal {
                std: (1.0 / (4 * c) as f64).sqrt(),
            },
            rng,
        )?;
        let reduce_b = store.init(&format!("{name}.reduce.bias"), &[c], Init::Zeros, rng)?;
        Ok(Self {
            branches,
            reduce_w,
            reduce_b,
        })
    }

    pub fn branch(&self, rotation: usize) -> &MaskedConv {
        &self.branches[rotation % self.branches.len()]
    }

    pub fn reduce_ids(&self) -> (ParamId, ParamId) {
        (self.reduce_w, self.reduce_b)
    }

    /// Masked conv then SiLU on one (already rotated) branch input, plus the
    /// residual when requested.
    fn branch_step<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        rotation: usize,
        x: Var,
        residual: bool,
    ) -> Result<Var> {
        let h = self.branch(rotation).forward(g, store, x)?;
        let h = g.silu(h);
        if residual && g.shape(h) == g.shape(x) {
            g.add(h, x)
        } else {
            Ok(h)
        }
    }

    /// Rotates the four branch outputs back, concatenates and reduces.
    fn fuse<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, rotated: &[Var; 4]) -> Result<Var> {
        let mut aligned = Vec::with_capacity(4);
        for (b, v) in rotated.iter().enumerate() {
            aligned.push(rotate(g, *v, (4 - b) % 4)?);
        }
        let cat = g.concat(&aligned, 1)?;
        let (w, b) = (g.param(store, self.reduce_w), g.param(store, self.reduce_b));
        g.conv2d(cat, w, Some(b), ConvGeom::same(1))
    }

    /// One stand-alone block: `(N, C, G, G)` → `(N, C, G, G)`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, residual: bool) -> Result<Var> {
        let mut outs = [x; 4];
        for (b, out) in outs.iter_mut().enumerate() {
            let r = rotate(g, x, b)?;
            *out = self.branch_step(g, store, b, r, residual)?;
        }
        self.fuse(g, store, &outs)
    }
}

/// Rotates the spatial axes of `(N, C, G, G)` by `quarter_turns` clockwise.
pub fn rotate<T: Real>(g: &mut Graph<T>, x: Var, quarter_turns: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[2] != s[3] {
        bail!(Geometry, "rotation needs a square (N, C, G, G) grid, got {:?}", s);
    }
    if quarter_turns.is_multiple_of(4) {
        return Ok(x);
    }
    let (nc, side) = (s[0] * s[1], s[2]);
    let d = Dihedral {
        quarter_turns: (quarter_turns % 4) as u8,
        mirror: false,
    };
    let mut index = Vec::with_capacity(nc * side * side);
    for plane in 0..nc {
        for i in 0..side {
            for j in 0..side {
                let (si, sj) = d.source(i, j, side);
                index.push((plane * side + si) * side + sj);
            }
        }
    }
    g.gather(x, &s, Arc::new(index))
}

#[derive(Clone, Debug)]
enum Block {
    Single(MaskedConv),
    Multi(MultiDirectionalBlock),
}

#[derive(Clone, Debug)]
pub struct Autoregressor {
    pub config: ArConfig,
    blocks: Vec<Block>,
}

impl Autoregressor {
    pub fn build<T: Real, R: Rng + ?Sized>(
        config: &ArConfig,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let blocks = (0..config.blocks)
            .map(|k| {
                let spec = MaskedConvSpec {
                    kernel: config.kernel,
                    mask_type: config.mask_for_block(k),
                    in_channels: c,
                    out_channels: c,
                };
                let name = format!("{prefix}.block{k}");
                Ok(match config.directional {
                    Directional::Single => Block::Single(MaskedConv::build(spec, store, &format!("{name}.conv"), rng)?),
                    Directional::Multi => Block::Multi(MultiDirectionalBlock::build(
                        spec,
                        config.share_branch_weights,
                        store,
                        &name,
                        rng,
                    )?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            blocks,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// `(N, C, G, G)` masked latents → `(N, C, G, G)` context.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[2] != s[3] {
            bail!(Geometry, "autoregressor needs a square (N, C, G, G) grid, got {:?}", s);
        }
        if s[1] != self.config.channels {
            bail!(Config, "autoregressor expects {} channels, got {}", self.config.channels, s[1]);
        }
        let residual_at = |k: usize| self.config.residual && k > 0;
        match self.config.directional {
            Directional::Single => {
                let mut h = x;
                for (k, block) in self.blocks.iter().enumerate() {
                    let Block::Single(conv) = block else { unreachable!() };
                    let y = conv.forward(g, store, h)?;
                    let y = g.silu(y);
                    h = if residual_at(k) { g.add(y, h)? } else { y };
                }
                Ok(h)
            }
            Directional::Multi if self.config.fusion == MultiFusion::Chained => {
                let mut h = x;
                for (k, block) in self.blocks.iter().enumerate() {
                    let Block::Multi(mb) = block else { unreachable!() };
                    h = mb.forward(g, store, h, residual_at(k))?;
                }
                Ok(h)
            }
            Directional::Multi => {
                let mut streams = [x; 4];
                for (b, s) in streams.iter_mut().enumerate() {
                    *s = rotate(g, x, b)?;
                }
                let mut context: Option<Var> = None;
                for (k, block) in self.blocks.iter().enumerate() {
                    let Block::Multi(mb) = block else { unreachable!() };
                    for (b, s) in streams.iter_mut().enumerate() {
                        *s = mb.branch_step(g, store, b, *s, residual_at(k))?;
                    }
                    let fused = mb.fuse(g, store, &streams)?;
                    context = Some(match context {
                        Some(c) => g.add(c, fused)?,
                        None => fused,
                    });
                }
                Ok(context.expect("at least one block"))
            }
        }
    }

    /// Runs the stack on one masked latent grid.
    pub fn autoregress<T: Real>(&self, store: &ParamStore<T>, masked: &LatentGrid<T>) -> Result<ContextGrid<T>> {
        let mut g = Graph::new();
        let x = g.input(LatentGrid::batch_tensor(std::slice::from_ref(masked))?);
        let c = self.forward(&mut g, store, x)?;
        Ok(LatentGrid::from_chw(masked.side, masked.dim, g.value(c).data()))
    }
}
