//! Latent masks, prediction heads, negative sampling and the InfoNCE loss.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autoregressor::{ArConfig, Autoregressor, ContextGrid};
use crate::encoder::{Encoder, EncoderConfig, LatentGrid};
use crate::error::{bail, Result};
use crate::graph::{info_nce_value, Graph, Var};
use crate::params::{Init, ParamId, ParamStore};
use crate::patching::{PatchGeometry, PatchGrid};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_CONTEXT_ROWS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    TopDown,
    Infill,
}

impl MaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskKind::TopDown => "top_down",
            MaskKind::Infill => "infill",
        }
    }
}

/// Context/target partition of a `G × G` latent grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatentMask {
    pub kind: MaskKind,
    pub side: usize,
    /// Row-major; `true` marks a target position.
    targets: Vec<bool>,
    pub context_rows: Option<usize>,
}

impl LatentMask {
    pub fn is_target(&self, i: usize, j: usize) -> bool {
        self.targets[i * self.side + j]
    }

    pub fn is_context(&self, i: usize, j: usize) -> bool {
        !self.is_target(i, j)
    }

    /// Target positions in raster order.
    pub fn target_positions(&self) -> Vec<(usize, usize)> {
        let s = self.side;
        (0..s * s).filter(|p| self.targets[*p]).map(|p| (p / s, p % s)).collect()
    }

    pub fn num_targets(&self) -> usize {
        self.targets.iter().filter(|t| **t).count()
    }

    pub fn num_context(&self) -> usize {
        self.targets.len() - self.num_targets()
    }

    /// Zero-fill multiplier over `(D, G, G)`, repeated for `batch` images.
    fn fill_mask<T: Real>(&self, batch: usize, dim: usize) -> Vec<T> {
        let plane: Vec<T> = self
            .targets
            .iter()
            .map(|t| if *t { T::zero() } else { T::one() })
            .collect();
        let mut out = Vec::with_capacity(batch * dim * plane.len());
        for _ in 0..batch * dim {
            out.extend_from_slice(&plane);
        }
        out
    }
}

pub fn make_topdown_mask(side: usize, context_rows: usize) -> Result<LatentMask> {
    if context_rows == 0 || context_rows >= side {
        bail!(
            InvalidArgument,
            "top-down mask needs 1 <= context_rows < {side}, got {context_rows}"
        );
    }
    Ok(LatentMask {
        kind: MaskKind::TopDown,
        side,
        targets: (0..side * side).map(|p| p / side >= context_rows).collect(),
        context_rows: Some(context_rows),
    })
}

pub fn make_infill_mask(side: usize) -> Result<LatentMask> {
    if side < 3 {
        bail!(InvalidArgument, "infill mask needs a grid of side >= 3, got {side}");
    }
    let edge = |v: usize| v == 0 || v == side - 1;
    Ok(LatentMask {
        kind: MaskKind::Infill,
        side,
        targets: (0..side * side).map(|p| !edge(p / side) && !edge(p % side)).collect(),
        context_rows: None,
    })
}

pub fn make_mask(kind: MaskKind, side: usize, context_rows: usize) -> Result<LatentMask> {
    match kind {
        MaskKind::TopDown => make_topdown_mask(side, context_rows),
        MaskKind::Infill => make_infill_mask(side),
    }
}

/// Replaces target latents with zero vectors.
pub fn apply_mask<T: Real>(latents: &LatentGrid<T>, mask: &LatentMask) -> Result<LatentGrid<T>> {
    if latents.side != mask.side {
        bail!(Geometry, "latent grid side {} vs mask side {}", latents.side, mask.side);
    }
    let mut out = latents.clone();
    for (i, j) in mask.target_positions() {
        out.at_mut(i, j).fill(T::zero());
    }
    Ok(out)
}

/// A context position and the target position it predicts.
type RowTarget = ((usize, usize), (usize, usize));

/// Linear maps from context vectors to predicted latents.
#[derive(Clone, Debug)]
pub struct PredictionHead {
    pub kind: MaskKind,
    pub dim: usize,
    /// Top-down: one map per row offset `k = 1..=K`. Infill: one shared map.
    maps: Vec<ParamId>,
}

impl PredictionHead {
    pub fn build<T: Real, R: Rng + ?Sized>(
        mask: &LatentMask,
        dim: usize,
        init_std: f64,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        let count = match mask.kind {
            MaskKind::TopDown => mask.side - mask.context_rows.unwrap_or(DEFAULT_CONTEXT_ROWS),
            MaskKind::Infill => 1,
        };
        let maps = (0..count)
            .map(|k| {
                let name = match mask.kind {
                    MaskKind::TopDown => format!("{prefix}.w{}.weight", k + 1),
                    MaskKind::Infill => format!("{prefix}.w.weight"),
                };
                store.init(&name, &[dim, dim], Init::Normal { std: init_std }, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kind: mask.kind,
            dim,
            maps,
        })
    }

    pub fn maps(&self) -> &[ParamId] {
        &self.maps
    }

    /// Context rows feeding each group of predictions, with the target
    /// positions they predict, in output order.
    fn plan(&self, mask: &LatentMask) -> Result<Vec<(ParamId, Vec<RowTarget>)>> {
        if mask.kind != self.kind {
            bail!(
                Config,
                "{} prediction head used with a {} mask",
                self.kind.as_str(),
                mask.kind.as_str()
            );
        }
        let s = mask.side;
        Ok(match self.kind {
            MaskKind::TopDown => {
                let rows = mask.context_rows.unwrap_or(DEFAULT_CONTEXT_ROWS);
                if self.maps.len() != s - rows {
                    bail!(
                        Config,
                        "top-down head has {} offsets, mask needs {}",
                        self.maps.len(),
                        s - rows
                    );
                }
                let t = rows - 1;
                self.maps
                    .iter()
                    .enumerate()
                    .map(|(k, id)| (*id, (0..s).map(|j| ((t, j), (t + k + 1, j))).collect()))
                    .collect()
            }
            MaskKind::Infill => vec![(
                self.maps[0],
                mask.target_positions().into_iter().map(|q| (q, q)).collect(),
            )],
        })
    }

    /// Target positions in the order predictions are produced.
    pub fn target_order(&self, mask: &LatentMask) -> Result<Vec<(usize, usize)>> {
        Ok(self
            .plan(mask)?
            .into_iter()
            .flat_map(|(_, pairs)| pairs.into_iter().map(|(_, t)| t))
            .collect())
    }

    /// `context: (B, D, G, G)` → `(B·T, D)` predictions ordered by
    /// (map, image, target).
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        context: Var,
        mask: &LatentMask,
    ) -> Result<Var> {
        let s = g.shape(context).to_vec();
        if s.len() != 4 || s[1] != self.dim || s[2] != mask.side || s[3] != mask.side {
            bail!(Geometry, "context {:?} does not match head dim {} / grid {}", s, self.dim, mask.side);
        }
        let (b, d, side) = (s[0], s[1], s[2]);
        let mut outs = Vec::new();
        for (id, pairs) in self.plan(mask)? {
            let mut index = Vec::with_capacity(b * pairs.len() * d);
            for bi in 0..b {
                for ((ci, cj), _) in &pairs {
                    for di in 0..d {
                        index.push(((bi * d + di) * side + ci) * side + cj);
                    }
                }
            }
            let rows = g.gather(context, &[b * pairs.len(), d], Arc::new(index))?;
            let w = g.param(store, id);
            outs.push(g.linear(rows, w, None)?);
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            g.concat(&outs, 0)
        }
    }
}

/// Predictions for one context grid, in [`PredictionHead::target_order`].
pub fn predict_targets<T: Real>(
    context: &ContextGrid<T>,
    mask: &LatentMask,
    head: &PredictionHead,
    store: &ParamStore<T>,
) -> Result<Vec<Vec<T>>> {
    let mut g = Graph::new();
    let c = g.input(LatentGrid::batch_tensor(std::slice::from_ref(context))?);
    let p = head.forward(&mut g, store, c, mask)?;
    Ok(g.value(p).data().chunks(head.dim).map(|r| r.to_vec()).collect())
}

/// Indices of `n` other images drawn uniformly with replacement.
pub fn negative_indices<R: Rng + ?Sized>(batch: usize, positive: usize, n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if batch < 2 {
        bail!(InvalidArgument, "negatives need a batch of at least 2 images, got {batch}");
    }
    if n == 0 {
        bail!(InvalidArgument, "negative count must be positive");
    }
    if positive >= batch {
        bail!(InvalidArgument, "positive index {positive} outside batch of {batch}");
    }
    Ok((0..n)
        .map(|_| {
            let r = rng.random_range(0..batch - 1);
            if r >= positive {
                r + 1
            } else {
                r
            }
        })
        .collect())
}

/// Latent vectors at `position` from `n` images other than `positive`.
pub fn sample_negatives<T: Real>(
    batch: &[LatentGrid<T>],
    positive: usize,
    position: (usize, usize),
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = negative_indices(batch.len(), positive, n, &mut rng)?;
    let (i, j) = position;
    if let Some(g) = batch.iter().find(|g| i >= g.side || j >= g.side) {
        bail!(Geometry, "position {:?} outside grid of side {}", position, g.side);
    }
    Ok(idx.into_iter().map(|b| batch[b].at(i, j).to_vec()).collect())
}

/// Mean InfoNCE over targets with one positive and its negatives each.
pub fn info_nce_loss<T: Real>(predictions: &[Vec<T>], positives: &[Vec<T>], negatives: &[Vec<Vec<T>>]) -> Result<T> {
    let t = predictions.len();
    if t == 0 || positives.len() != t || negatives.len() != t {
        bail!(
            Geometry,
            "info_nce: {} predictions, {} positives, {} negative sets",
            t,
            positives.len(),
            negatives.len()
        );
    }
    let d = predictions[0].len();
    let k = negatives[0].len() + 1;
    let mut pred = Vec::with_capacity(t * d);
    let mut cand = Vec::with_capacity(t * k * d);
    for ti in 0..t {
        let all = std::iter::once(&positives[ti]).chain(negatives[ti].iter());
        if predictions[ti].len() != d || negatives[ti].len() + 1 != k {
            bail!(Geometry, "info_nce: ragged input at target {ti}");
        }
        pred.extend_from_slice(&predictions[ti]);
        for c in all {
            if c.len() != d {
                bail!(Geometry, "info_nce: candidate of dimension {} vs {d}", c.len());
            }
            cand.extend_from_slice(c);
        }
    }
    Ok(info_nce_value(&pred, &cand, t, k, d)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpcConfig {
    pub encoder: EncoderConfig,
    pub autoregressor: ArConfig,
    pub mask: MaskKind,
    pub context_rows: usize,
    pub image_size: usize,
    pub stride: usize,
    pub negatives: usize,
    pub head_init_std: f64,
}

impl CpcConfig {
    pub fn geometry(&self) -> PatchGeometry {
        PatchGeometry {
            patch_size: self.encoder.patch_size,
            stride: self.stride,
        }
    }

    pub fn grid_side(&self) -> Result<usize> {
        self.geometry().grid_side(self.image_size)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.autoregressor.validate()?;
        if self.autoregressor.channels != self.encoder.latent_dim {
            bail!(
                Config,
                "autoregressor channels {} differ from latent dim {}",
                self.autoregressor.channels,
                self.encoder.latent_dim
            );
        }
        if self.negatives == 0 {
            bail!(Config, "negative count must be positive");
        }
        make_mask(self.mask, self.grid_side()?, self.context_rows)?;
        Ok(())
    }
}

/// Encoder, autoregressor and prediction head trained together.
#[derive(Clone, Debug)]
pub struct CpcModel {
    pub config: CpcConfig,
    pub encoder: Encoder,
    pub autoregressor: Autoregressor,
    pub head: PredictionHead,
    pub mask: LatentMask,
}

/// Intermediate values of one CPC forward pass.
pub struct CpcForward {
    pub latents: Var,
    pub context: Var,
    pub predictions: Var,
    pub loss: Var,
}

impl CpcModel {
    pub fn build<T: Real, R: Rng + ?Sized>(config: &CpcConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mask = make_mask(config.mask, config.grid_side()?, config.context_rows)?;
        let encoder = Encoder::build(&config.encoder, store, "encoder", rng)?;
        let autoregressor = Autoregressor::build(&config.autoregressor, store, "ar", rng)?;
        let head = PredictionHead::build(
            &mask,
            config.encoder.latent_dim,
            config.head_init_std,
            store,
            "head",
            rng,
        )?;
        Ok(Self {
            config: config.clone(),
            encoder,
            autoregressor,
            head,
            mask,
        })
    }

    /// Masks `(B, D, G, G)` latents, runs the autoregressor and the head.
    pub fn predictions_from_latents<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        latents: Var,
    ) -> Result<(Var, Var)> {
        let s = g.shape(latents).to_vec();
        if s.len() != 4 || s[2] != self.mask.side || s[3] != self.mask.side {
            bail!(Geometry, "latents {:?} do not match grid side {}", s, self.mask.side);
        }
        let masked = g.mul_const(latents, Arc::new(self.mask.fill_mask(s[0], s[1])))?;
        let context = self.autoregressor.forward(g, store, masked)?;
        let predictions = self.head.forward(g, store, context, &self.mask)?;
        Ok((context, predictions))
    }

    /// Candidate index for `(B·T, 1 + n, D)` gathered from `(B, D, G, G)`
    /// latents; the positive sits at slot 0.
    pub fn candidate_index<R: Rng + ?Sized>(
        &self,
        batch: usize,
        dim: usize,
        negatives: usize,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        let side = self.mask.side;
        let plan = self.head.plan(&self.mask)?;
        let mut index = Vec::new();
        for (_, pairs) in &plan {
            for b in 0..batch {
                for (_, (ti, tj)) in pairs {
                    let negs = negative_indices(batch, b, negatives, rng)?;
                    for src in std::iter::once(b).chain(negs) {
                        for d in 0..dim {
                            index.push(((src * dim + d) * side + ti) * side + tj);
                        }
                    }
                }
            }
        }
        Ok(index)
    }

    /// Full InfoNCE forward on a batch of patch grids.
    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        grids: &[&PatchGrid],
        rng: &mut R,
    ) -> Result<CpcForward> {
        let latents = self.encoder.encode_grids(g, store, grids)?;
        self.forward_from_latents(g, store, latents, rng)
    }

    pub fn forward_from_latents<T: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        latents: Var,
        rng: &mut R,
    ) -> Result<CpcForward> {
        let (context, predictions) = self.predictions_from_latents(g, store, latents)?;
        let s = g.shape(latents).to_vec();
        let (b, d) = (s[0], s[1]);
        let n = self.config.negatives;
        let index = self.candidate_index(b, d, n, rng)?;
        let rows = g.shape(predictions)[0];
        let cand = g.gather(latents, &[rows, n + 1, d], Arc::new(index))?;
        let loss = g.info_nce(predictions, cand)?;
        Ok(CpcForward {
            latents,
            context,
            predictions,
            loss,
        })
    }

    /// Loss value only, for validation.
    pub fn loss_value<T: Real, R: Rng + ?Sized>(
        &self,
        store: &ParamStore<T>,
        grids: &[&PatchGrid],
        rng: &mut R,
    ) -> Result<T> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, store, grids, rng)?;
        Ok(g.value(f.loss).item())
    }

    /// Predictions for concrete latent grids, one row per target.
    pub fn predict_from_latents<T: Real>(&self, store: &ParamStore<T>, latents: &[LatentGrid<T>]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let z = g.input(LatentGrid::batch_tensor(latents)?);
        let (_, p) = self.predictions_from_latents(&mut g, store, z)?;
        Ok(g.value(p).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn randv(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..d).map(|_| StandardNormal.sample(rng)).collect()
    }

    #[test]
    fn topdown_counts() {
        let m = make_topdown_mask(7, 3).unwrap();
        assert_eq!((m.num_context(), m.num_targets()), (21, 28));
        let m = make_topdown_mask(2, 1).unwrap();
        assert_eq!((m.num_context(), m.num_targets()), (2, 2));
        assert!(m.is_context(0, 1) && m.is_target(1, 0));
        assert!(matches!(make_topdown_mask(7, 7), Err(crate::Error::InvalidArgument(_))));
        assert!(make_topdown_mask(7, 0).is_err());
    }

    #[test]
    fn infill_counts() {
        let m = make_infill_mask(7).unwrap();
        assert_eq!((m.num_context(), m.num_targets()), (24, 25));
        let m = make_infill_mask(3).unwrap();
        assert_eq!((m.num_context(), m.num_targets()), (8, 1));
        assert_eq!(m.target_positions(), vec![(1, 1)]);
        assert!(matches!(make_infill_mask(2), Err(crate::Error::InvalidArgument(_))));
    }

    #[test]
    fn apply_mask_zeroes_targets_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mask = make_infill_mask(3).unwrap();
        let z = LatentGrid {
            side: 3,
            dim: 4,
            values: randv(36, &mut rng),
        };
        let m = apply_mask(&z, &mask).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if (i, j) == (1, 1) {
                    assert!(m.at(i, j).iter().all(|v| *v == 0.0));
                } else {
                    assert_eq!(m.at(i, j), z.at(i, j));
                }
            }
        }
        let zero = LatentGrid::<f64>::zeros(3, 4);
        assert_eq!(apply_mask(&zero, &mask).unwrap(), zero);
        assert!(matches!(
            apply_mask(&LatentGrid::<f64>::zeros(4, 4), &mask),
            Err(crate::Error::Geometry(_))
        ));
    }

    fn identity_head(mask: &LatentMask, d: usize) -> (PredictionHead, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = PredictionHead::build(mask, d, 0.0, &mut store, "head", &mut rng).unwrap();
        for id in head.maps().to_vec() {
            let w = store.get_mut(id);
            for i in 0..d {
                w.data_mut()[i * d + i] = 1.0;
            }
        }
        (head, store)
    }

    #[test]
    fn identity_infill_head_copies_context() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mask = make_infill_mask(7).unwrap();
        let (head, store) = identity_head(&mask, 5);
        let ctx = LatentGrid {
            side: 7,
            dim: 5,
            values: randv(7 * 7 * 5, &mut rng),
        };
        let p = predict_targets(&ctx, &mask, &head, &store).unwrap();
        assert_eq!(p.len(), 25);
        for (row, (i, j)) in p.iter().zip(head.target_order(&mask).unwrap()) {
            assert_eq!(row.as_slice(), ctx.at(i, j));
        }
    }

    #[test]
    fn topdown_head_uses_deepest_context_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mask = make_topdown_mask(7, 3).unwrap();
        let mut store = ParamStore::new();
        let head = PredictionHead::build(&mask, 3, 1.0, &mut store, "head", &mut rng).unwrap();
        assert_eq!(head.maps().len(), 4);
        let ctx = LatentGrid {
            side: 7,
            dim: 3,
            values: randv(7 * 7 * 3, &mut rng),
        };
        let p = predict_targets(&ctx, &mask, &head, &store).unwrap();
        assert_eq!(p.len(), 28);
        let order = head.target_order(&mask).unwrap();
        for (row, (ti, tj)) in p.iter().zip(order) {
            let w = store.get(head.maps()[ti - 3]).data();
            let c = ctx.at(2, tj);
            for o in 0..3 {
                let expect: f64 = (0..3).map(|i| w[o * 3 + i] * c[i]).sum();
                assert!((row[o] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn head_kind_mismatch_is_config_error() {
        let td = make_topdown_mask(5, 2).unwrap();
        let (head, store) = identity_head(&td, 2);
        let ctx = LatentGrid::<f64>::zeros(5, 2);
        let err = predict_targets(&ctx, &make_infill_mask(5).unwrap(), &head, &store);
        assert!(matches!(err, Err(crate::Error::Config(_))));
    }

    #[test]
    fn negatives_exclude_positive_image() {
        let batch: Vec<LatentGrid<f64>> = (0..16)
            .map(|b| LatentGrid {
                side: 2,
                dim: 1,
                values: vec![b as f64; 4],
            })
            .collect();
        let negs = sample_negatives(&batch, 5, (1, 1), 16, 9).unwrap();
        assert_eq!(negs.len(), 16);
        assert!(negs.iter().all(|v| v[0] != 5.0));
        assert_eq!(negs, sample_negatives(&batch, 5, (1, 1), 16, 9).unwrap());
        let negs = sample_negatives(&batch[..2], 0, (0, 0), 4, 1).unwrap();
        assert!(negs.iter().all(|v| v[0] == 1.0));
        assert!(matches!(
            sample_negatives(&batch[..1], 0, (0, 0), 4, 1),
            Err(crate::Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn uniform_scores_give_log_candidate_count() {
        let mut pred = vec![0.0; 17];
        pred[0] = 1.0;
        let pos = {
            let mut v = vec![0.0; 17];
            v[1] = 1.0;
            v
        };
        let negs: Vec<Vec<f64>> = (0..16)
            .map(|k| {
                let mut v = vec![0.0; 17];
                v[k + 1] = 2.0;
                v
            })
            .collect();
        let loss = info_nce_loss(&[pred], &[pos], &[negs]).unwrap();
        assert!((loss - 17f64.ln()).abs() < 1e-12);
        assert!((loss - 2.8332).abs() < 1e-4);
    }

    #[test]
    fn confident_prediction_drives_loss_to_zero() {
        let pos = vec![1.0, 0.0, 0.0];
        let negs = vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let mut last = f64::INFINITY;
        for c in [1.0, 10.0, 100.0] {
            let l = info_nce_loss(&[vec![c, 0.0, 0.0]], std::slice::from_ref(&pos), std::slice::from_ref(&negs)).unwrap();
            assert!(l < last);
            last = l;
        }
        assert!(last < 1e-40);
    }

    #[test]
    fn matches_plain_softmax_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = 6;
        let preds: Vec<Vec<f64>> = (0..5).map(|_| randv(d, &mut rng)).collect();
        let pos: Vec<Vec<f64>> = (0..5).map(|_| randv(d, &mut rng)).collect();
        let negs: Vec<Vec<Vec<f64>>> = (0..5).map(|_| (0..4).map(|_| randv(d, &mut rng)).collect()).collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut oracle = 0.0;
        for t in 0..5 {
            let num = dot(&preds[t], &pos[t]).exp();
            let den = num + negs[t].iter().map(|n| dot(&preds[t], n).exp()).sum::<f64>();
            oracle += -(num / den).ln();
        }
        oracle /= 5.0;
        let loss = info_nce_loss(&preds, &pos, &negs).unwrap();
        assert!((loss - oracle).abs() <= 1e-6);
    }

    #[test]
    fn dimension_mismatch_and_overflow() {
        let err = info_nce_loss(&[vec![1.0, 2.0]], &[vec![1.0]], &[vec![vec![1.0, 0.0]]]);
        assert!(matches!(err, Err(crate::Error::Geometry(_))));
        let err = info_nce_loss(&[vec![1e200, 0.0]], &[vec![1e200, 0.0]], &[vec![vec![0.0, 1.0]]]);
        assert!(matches!(err, Err(crate::Error::Numeric(_))));
    }

    #[test]
    fn raising_a_negative_raises_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pred = randv(4, &mut rng);
        let pos = randv(4, &mut rng);
        let mut negs: Vec<Vec<f64>> = (0..3).map(|_| randv(4, &mut rng)).collect();
        let mut last = info_nce_loss(std::slice::from_ref(&pred), std::slice::from_ref(&pos), &[negs.clone()]).unwrap();
        for _ in 0..5 {
            for (v, p) in negs[1].iter_mut().zip(&pred) {
                *v += 0.3 * p;
            }
            let l = info_nce_loss(std::slice::from_ref(&pred), std::slice::from_ref(&pos), &[negs.clone()]).unwrap();
            assert!(l > last);
            last = l;
        }
    }

    #[test]
    fn graph_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (t, k, d) = (3, 5, 4);
        let pred = Tensor::from_vec(&[t, d], randv(t * d, &mut rng)).unwrap();
        let cand = Tensor::from_vec(&[t, k, d], randv(t * k * d, &mut rng)).unwrap();
        let mut store = ParamStore::new();
        let pid = store.insert("pred", pred.clone()).unwrap();
        let mut g = Graph::new();
        let p = g.param(&store, pid);
        let c = g.input(cand.clone());
        let loss = g.info_nce(p, c).unwrap();
        let grad = g.backward(loss).unwrap();
        let analytic = grad.get(pid).unwrap();
        let h = 1e-5;
        for i in 0..t * d {
            let eval = |delta: f64| {
                let mut pv = pred.data().to_vec();
                pv[i] += delta;
                info_nce_value(&pv, cand.data(), t, k, d).unwrap().0
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel <= 1e-4, "element {i}: {a} vs {numeric}");
        }
    }
}
