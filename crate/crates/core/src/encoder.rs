//! Patch and image encoders.
//!
//! Both families end in a 1×1 projection to `latent_dim` channels followed by
//! global average pooling, so the same trunk encodes 8×8 patches, 24×24
//! patches or whole images. Normalization is per sample, never per batch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageSample;
use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::kernels::ConvGeom;
use crate::params::{Init, ParamId, ParamStore};
use crate::patching::PatchGrid;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderFamily {
    ToyCnn,
    Resnext101,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    LayerNorm,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResNeXtConfig {
    pub blocks: [usize; 4],
    pub cardinality: usize,
    pub base_width: usize,
    pub stem_width: usize,
}

impl ResNeXtConfig {
    /// ResNeXt-101 (32×4d).
    pub fn depth_101() -> Self {
        Self {
            blocks: [3, 4, 23, 3],
            cardinality: 32,
            base_width: 4,
            stem_width: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub family: EncoderFamily,
    pub latent_dim: usize,
    pub normalization: Normalization,
    /// Side length of the patches fed to `encode_patches`.
    pub patch_size: usize,
    /// Channel width of the toy CNN.
    pub toy_width: usize,
    pub resnext: ResNeXtConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            family: EncoderFamily::ToyCnn,
            latent_dim: 128,
            normalization: Normalization::LayerNorm,
            patch_size: 24,
            toy_width: 16,
            resnext: ResNeXtConfig::depth_101(),
        }
    }
}

impl EncoderConfig {
    pub fn toy(latent_dim: usize, patch_size: usize, width: usize) -> Self {
        Self {
            latent_dim,
            patch_size,
            toy_width: width,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            bail!(Config, "latent_dim must be at least 1");
        }
        if self.patch_size == 0 {
            bail!(Config, "patch_size must be at least 1");
        }
        if self.family == EncoderFamily::ToyCnn && self.toy_width == 0 {
            bail!(Config, "toy_width must be at least 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ConvUnit {
    name: String,
    weight: ParamId,
    bias: Option<ParamId>,
    norm: Option<(ParamId, ParamId)>,
    geom: ConvGeom,
    activate: bool,
}

impl ConvUnit {
    #[allow(clippy::too_many_arguments)]
    fn build<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: String,
        cin: usize,
        cout: usize,
        kernel: usize,
        geom: ConvGeom,
        bias: bool,
        norm: bool,
        activate: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let cg = cin / geom.groups;
        let weight = store.init(
            &format!("{name}.weight"),
            &[cout, cg, kernel, kernel],
            Init::KaimingNormal {
                fan_in: cg * kernel * kernel,
            },
            rng,
        )?;
        let bias = if bias {
            Some(store.init(&format!("{name}.bias"), &[cout], Init::Zeros, rng)?)
        } else {
            None
        };
        let norm = if norm {
            Some((
                store.init(&format!("{name}.norm.gamma"), &[cout], Init::Ones, rng)?,
                store.init(&format!("{name}.norm.beta"), &[cout], Init::Zeros, rng)?,
            ))
        } else {
            None
        };
        Ok(Self {
            name,
            weight,
            bias,
            norm,
            geom,
            activate,
        })
    }

    /// conv → SiLU → norm (toy order) or conv → norm → SiLU (`norm_first`).
    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, norm_first: bool) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        let mut h = g.conv2d(x, w, b, self.geom)?;
        let norm = |g: &mut Graph<T>, h: Var| -> Result<Var> {
            match self.norm {
                Some((gm, bt)) => {
                    let (gm, bt) = (g.param(store, gm), g.param(store, bt));
                    g.layer_norm(h, gm, bt)
                }
                None => Ok(h),
            }
        };
        if norm_first {
            h = norm(g, h)?;
            if self.activate {
                h = g.silu(h);
            }
        } else {
            if self.activate {
                h = g.silu(h);
            }
            h = norm(g, h)?;
        }
        check_finite(g, h, &self.name)?;
        Ok(h)
    }
}

fn check_finite<T: Real>(g: &Graph<T>, v: Var, layer: &str) -> Result<()> {
    if !g.value(v).all_finite() {
        bail!(Numeric, "encoder layer `{layer}` produced non-finite activations");
    }
    Ok(())
}

#[derive(Clone, Debug)]
struct Bottleneck {
    reduce: ConvUnit,
    grouped: ConvUnit,
    expand: ConvUnit,
    shortcut: Option<ConvUnit>,
}

#[derive(Clone, Debug)]
enum Trunk {
    Toy(Vec<ConvUnit>),
    ResNeXt { stem: ConvUnit, blocks: Vec<Bottleneck> },
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    trunk: Trunk,
    proj_w: ParamId,
    proj_b: ParamId,
}

/// `G × G × D` latent vectors, row-major over `(i, j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid<T> {
    pub side: usize,
    pub dim: usize,
    pub values: Vec<T>,
}

impl<T: Real> LatentGrid<T> {
    pub fn zeros(side: usize, dim: usize) -> Self {
        Self {
            side,
            dim,
            values: vec![T::zero(); side * side * dim],
        }
    }

    pub fn at(&self, i: usize, j: usize) -> &[T] {
        let k = (i * self.side + j) * self.dim;
        &self.values[k..k + self.dim]
    }

    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut [T] {
        let k = (i * self.side + j) * self.dim;
        &mut self.values[k..k + self.dim]
    }

    /// Channel-first `(D, G, G)` layout used inside the graph.
    pub fn to_chw(&self) -> Vec<T> {
        let gg = self.side * self.side;
        let mut out = vec![T::zero(); self.values.len()];
        for p in 0..gg {
            for d in 0..self.dim {
                out[d * gg + p] = self.values[p * self.dim + d];
            }
        }
        out
    }

    pub fn from_chw(side: usize, dim: usize, chw: &[T]) -> Self {
        let gg = side * side;
        let mut values = vec![T::zero(); gg * dim];
        for d in 0..dim {
            for p in 0..gg {
                values[p * dim + d] = chw[d * gg + p];
            }
        }
        Self { side, dim, values }
    }

    /// Stacks grids into an `(N, D, G, G)` tensor.
    pub fn batch_tensor(grids: &[LatentGrid<T>]) -> Result<Tensor<T>> {
        let Some(first) = grids.first() else {
            bail!(Geometry, "empty latent batch");
        };
        let mut data = Vec::with_capacity(grids.len() * first.values.len());
        for g in grids {
            if (g.side, g.dim) != (first.side, first.dim) {
                bail!(Geometry, "latent grids of different shapes in one batch");
            }
            data.extend(g.to_chw());
        }
        Tensor::from_vec(&[grids.len(), first.dim, first.side, first.side], data)
    }
}

impl Encoder {
    pub fn build<T: Real, R: Rng + ?Sized>(
        config: &EncoderConfig,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let norm = config.normalization == Normalization::LayerNorm;
        let (trunk, width) = match config.family {
            EncoderFamily::ToyCnn => {
                let c = config.toy_width;
                let same = ConvGeom::same(3);
                let down = ConvGeom {
                    stride: 2,
                    ..same
                };
                let layers = vec![
                    ConvUnit::build(store, format!("{prefix}.conv1"), 3, c, 3, same, true, norm, true, rng)?,
                    ConvUnit::build(store, format!("{prefix}.conv2"), c, c, 3, down, true, norm, true, rng)?,
                    ConvUnit::build(store, format!("{prefix}.conv3"), c, c, 3, same, true, norm, true, rng)?,
                ];
                (Trunk::Toy(layers), c)
            }
            EncoderFamily::Resnext101 => build_resnext(&config.resnext, norm, store, prefix, rng)?,
        };
        let proj_w = store.init(
            &format!("{prefix}.proj.weight"),
            &[config.latent_dim, width, 1, 1],
            Init::Normal {
                std: 1.0 / (width as f64).sqrt(),
            },
            rng,
        )?;
        let proj_b = store.init(&format!("{prefix}.proj.bias"), &[config.latent_dim], Init::Zeros, rng)?;
        Ok(Self {
            config: config.clone(),
            trunk,
            proj_w,
            proj_b,
        })
    }

    /// `x: (N, 3, H, W)` → `(pre_projection_map, latent (N, D))`.
    pub fn forward_parts<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<(Var, Var)> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != 3 {
            bail!(Config, "encoder expects (N, 3, H, W) input, got {:?}", s);
        }
        let mut h = x;
        match &self.trunk {
            Trunk::Toy(layers) => {
                for l in layers {
                    h = l.forward(g, store, h, false)?;
                }
            }
            Trunk::ResNeXt { stem, blocks } => {
                h = stem.forward(g, store, h, true)?;
                for b in blocks {
                    let r = b.reduce.forward(g, store, h, true)?;
                    let r = b.grouped.forward(g, store, r, true)?;
                    let r = b.expand.forward(g, store, r, true)?;
                    let skip = match &b.shortcut {
                        Some(sc) => sc.forward(g, store, h, true)?,
                        None => h,
                    };
                    let sum = g.add(r, skip)?;
                    h = g.silu(sum);
                }
            }
        }
        let (w, b) = (g.param(store, self.proj_w), g.param(store, self.proj_b));
        let z = g.conv2d(h, w, Some(b), ConvGeom::same(1))?;
        let z = g.global_avg_pool(z)?;
        check_finite(g, z, "proj")?;
        Ok((h, z))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        Ok(self.forward_parts(g, store, x)?.1)
    }

    /// Encodes a batch of patch grids into an `(B, D, G, G)` latent tensor.
    pub fn encode_grids<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, grids: &[&PatchGrid]) -> Result<Var> {
        let Some(first) = grids.first() else {
            bail!(Geometry, "empty patch batch");
        };
        let (side, p) = (first.side, first.patch_size);
        if p != self.config.patch_size {
            bail!(
                Config,
                "encoder expects {}-pixel patches, grid has {p}",
                self.config.patch_size
            );
        }
        let mut data = Vec::with_capacity(grids.len() * side * side * 3 * p * p);
        for grid in grids {
            if (grid.side, grid.patch_size) != (side, p) {
                bail!(Geometry, "patch grids of different shapes in one batch");
            }
            data.extend(grid.to_chw::<T>());
        }
        let n = grids.len() * side * side;
        let x = g.input(Tensor::from_vec(&[n, 3, p, p], data)?);
        let z = self.forward(g, store, x)?;
        let d = self.config.latent_dim;
        let index = nchw_from_rows(grids.len(), side, d);
        g.gather(z, &[grids.len(), d, side, side], std::sync::Arc::new(index))
    }

    pub fn encode_patches<T: Real>(&self, store: &ParamStore<T>, grid: &PatchGrid) -> Result<LatentGrid<T>> {
        let mut g = Graph::new();
        let z = self.encode_grids(&mut g, store, &[grid])?;
        Ok(LatentGrid::from_chw(grid.side, self.config.latent_dim, g.value(z).data()))
    }

    pub fn encode_image<T: Real>(&self, store: &ParamStore<T>, image: &ImageSample) -> Result<Vec<T>> {
        if !image.is_square() {
            bail!(Config, "encoder expects square images");
        }
        let mut g = Graph::new();
        let n = image.size();
        let x = g.input(Tensor::from_vec(&[1, 3, n, n], image.to_chw())?);
        let z = self.forward(&mut g, store, x)?;
        Ok(g.value(z).data().to_vec())
    }
}

/// Gather indices mapping row-per-patch `(B·G·G, D)` to `(B, D, G, G)`.
fn nchw_from_rows(batch: usize, side: usize, dim: usize) -> Vec<usize> {
    let gg = side * side;
    let mut idx = Vec::with_capacity(batch * dim * gg);
    for b in 0..batch {
        for d in 0..dim {
            for p in 0..gg {
                idx.push((b * gg + p) * dim + d);
            }
        }
    }
    idx
}

fn build_resnext<T: Real, R: Rng + ?Sized>(
    cfg: &ResNeXtConfig,
    norm: bool,
    store: &mut ParamStore<T>,
    prefix: &str,
    rng: &mut R,
) -> Result<(Trunk, usize)> {
    if cfg.cardinality == 0 || cfg.base_width == 0 || cfg.stem_width == 0 {
        bail!(Config, "resnext widths must be positive");
    }
    let stem = ConvUnit::build(
        store,
        format!("{prefix}.stem"),
        3,
        cfg.stem_width,
        3,
        ConvGeom::same(3),
        !norm,
        norm,
        true,
        rng,
    )?;
    let mut blocks = Vec::new();
    let mut cin = cfg.stem_width;
    for (stage, &count) in cfg.blocks.iter().enumerate() {
        let width = (cfg.cardinality * cfg.base_width) << stage;
        let cout = 256 << stage;
        for k in 0..count {
            let stride = if stage > 0 && k == 0 { 2 } else { 1 };
            let name = format!("{prefix}.stage{}.block{k}", stage + 1);
            let one = ConvGeom::same(1);
            let reduce = ConvUnit::build(store, format!("{name}.reduce"), cin, width, 1, one, !norm, norm, true, rng)?;
            let grouped = ConvUnit::build(
                store,
                format!("{name}.grouped"),
                width,
                width,
                3,
                ConvGeom {
                    stride,
                    pad: 1,
                    groups: cfg.cardinality,
                },
                !norm,
                norm,
                true,
                rng,
            )?;
            let expand = ConvUnit::build(store, format!("{name}.expand"), width, cout, 1, one, !norm, norm, false, rng)?;
            let shortcut = if stride != 1 || cin != cout {
                Some(ConvUnit::build(
                    store,
                    format!("{name}.shortcut"),
                    cin,
                    cout,
                    1,
                    ConvGeom {
                        stride,
                        pad: 0,
                        groups: 1,
                    },
                    !norm,
                    norm,
                    false,
                    rng,
                )?)
            } else {
                None
            };
            blocks.push(Bottleneck {
                reduce,
                grouped,
                expand,
                shortcut,
            });
            cin = cout;
        }
    }
    Ok((Trunk::ResNeXt { stem, blocks }, cin))
}
