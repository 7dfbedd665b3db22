use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::{ModelConfig, Phase, TrainConfig};
use super::metrics::{EpochReport, History};
use super::optim::Adam;
use super::derive_seed;
use crate::cpc::CpcModel;
use crate::data::{augment, split_train_val, DatasetStore, ImageSample, Split};
use crate::error::{bail, Error, Result};
use crate::graph::Graph;
use crate::par;
use crate::params::ParamStore;
use crate::patching::{extract_patches, PatchGeometry, PatchGrid};

const VALID_SALT: u64 = 0x76_616c_6964;

/// Patch grids for a batch, augmenting each image with its own seed.
pub(super) fn batch_grids(images: &[&ImageSample], seeds: Option<&[u64]>, geom: PatchGeometry) -> Result<Vec<PatchGrid>> {
    par::map(images.len(), |i| {
        let img = match seeds {
            Some(s) => augment(images[i], s[i])?,
            None => images[i].clone(),
        };
        extract_patches(&img, geom.patch_size, geom.stride)
    })
    .into_iter()
    .collect()
}

/// Store with a validation split, carving one from train if needed.
pub(super) fn with_validation(store: &DatasetStore, config: &TrainConfig) -> Result<DatasetStore> {
    if store.valid.is_empty() {
        split_train_val(store, config.validation_fraction, derive_seed(&[config.seed, VALID_SALT]))
    } else {
        Ok(store.clone())
    }
}

fn diverged(epoch: usize, reason: String, last_good: &Checkpoint) -> Error {
    Error::Diverged {
        epoch,
        reason,
        last_good: Box::new(last_good.clone()),
    }
}

/// Mean validation InfoNCE with fixed negatives.
fn validation_loss(
    model: &CpcModel,
    params: &ParamStore<f32>,
    grids: &[PatchGrid],
    batch: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, VALID_SALT]));
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in grids.chunks(batch) {
        if chunk.len() < 2 {
            continue;
        }
        let refs: Vec<&PatchGrid> = chunk.iter().collect();
        let loss = model.loss_value(params, &refs, &mut rng)? as f64;
        total += loss * chunk.len() as f64;
        count += chunk.len();
    }
    if count == 0 {
        bail!(InvalidArgument, "validation split needs at least 2 images");
    }
    Ok(total / count as f64)
}

pub fn pretrain_cpc(store: &DatasetStore, config: &TrainConfig, model: &ModelConfig) -> Result<Checkpoint> {
    pretrain_cpc_observed(store, config, model, &mut |_| {})
}

/// Pretrains encoder, autoregressor and head on InfoNCE, calling `observe`
/// after the initial validation pass and after every epoch.
pub fn pretrain_cpc_observed(
    store: &DatasetStore,
    config: &TrainConfig,
    model_config: &ModelConfig,
    observe: &mut dyn FnMut(&EpochReport),
) -> Result<Checkpoint> {
    config.validate()?;
    if config.phase != Phase::Pretrain {
        bail!(Config, "pretraining needs a pretrain-phase config");
    }
    let store = with_validation(store, config)?;
    if store.train.len() < 2 {
        bail!(InvalidArgument, "pretraining needs at least 2 train images");
    }
    let cpc = model_config.cpc_config(config, store.meta.image_size);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ParamStore::<f32>::new();
    let model = CpcModel::build(&cpc, &mut params, &mut rng)?;
    let geom = cpc.geometry();
    let valid_refs: Vec<&ImageSample> = store.valid.iter().collect();
    let valid_grids = batch_grids(&valid_refs, None, geom)?;

    let mut history = History::default();
    let mut best = Checkpoint {
        phase: Phase::Pretrain,
        cpc: Some(cpc.clone()),
        classifier: None,
        train: config.clone(),
        history: History::default(),
        best_epoch: 0,
        rng: rng.clone(),
        params: params.clone(),
    };
    let v0 = validation_loss(&model, &params, &valid_grids, config.batch_size, config.seed)?;
    if !v0.is_finite() {
        return Err(diverged(0, "initial validation loss is not finite".into(), &best));
    }
    history.push(0, Split::Valid, "info_nce", v0);
    best.history = history.clone();
    observe(&EpochReport {
        epoch: 0,
        train_loss: None,
        valid_loss: Some(v0),
        valid_accuracy: None,
        improved: true,
    });
    let mut best_loss = v0;
    let mut since_best = 0;
    let mut adam = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..store.train.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let images: Vec<&ImageSample> = chunk.iter().map(|&i| &store.train[i]).collect();
            let seeds: Vec<u64> = chunk
                .iter()
                .map(|&i| derive_seed(&[config.seed, epoch as u64, i as u64]))
                .collect();
            let grids = batch_grids(&images, config.augment.then_some(seeds.as_slice()), geom)?;
            let refs: Vec<&PatchGrid> = grids.iter().collect();
            let mut g = Graph::new();
            let fwd = match model.forward(&mut g, &params, &refs, &mut rng) {
                Ok(f) => f,
                Err(e) if e.is_numeric() => return Err(diverged(epoch, e.to_string(), &best)),
                Err(e) => return Err(e),
            };
            let loss = g.value(fwd.loss).item() as f64;
            if !loss.is_finite() {
                return Err(diverged(epoch, "non-finite training loss".into(), &best));
            }
            let grads = g.backward(fwd.loss)?;
            adam.step(&mut params, &grads);
            total += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let train_loss = total / seen.max(1) as f64;
        let valid_loss = match validation_loss(&model, &params, &valid_grids, config.batch_size, config.seed) {
            Ok(v) if v.is_finite() => v,
            Ok(_) => return Err(diverged(epoch, "non-finite validation loss".into(), &best)),
            Err(e) if e.is_numeric() => return Err(diverged(epoch, e.to_string(), &best)),
            Err(e) => return Err(e),
        };
        history.push(epoch, Split::Train, "info_nce", train_loss);
        history.push(epoch, Split::Valid, "info_nce", valid_loss);
        let improved = valid_loss < best_loss;
        if improved {
            best_loss = valid_loss;
            since_best = 0;
            best.params = params.clone();
            best.best_epoch = epoch;
        } else {
            since_best += 1;
        }
        best.history = history.clone();
        best.rng = rng.clone();
        observe(&EpochReport {
            epoch,
            train_loss: Some(train_loss),
            valid_loss: Some(valid_loss),
            valid_accuracy: None,
            improved,
        });
        if since_best >= config.patience {
            break;
        }
    }
    Ok(best)
}
