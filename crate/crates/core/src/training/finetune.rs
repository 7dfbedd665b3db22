use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{ModelConfig, Phase, TrainConfig};
use super::derive_seed;
use super::metrics::{EpochReport, History};
use super::optim::Adam;
use super::pretrain::{batch_grids, with_validation};
use crate::data::{augment, sample_label_subset, DatasetStore, ImageSample, Split};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{bail, Error, Result};
use crate::graph::{Graph, Var};
use crate::par;
use crate::params::{Init, ParamId, ParamStore};
use crate::patching::{PatchGeometry, PatchGrid};
use crate::tensor::{Real, Tensor};

/// What the encoder sees when classifying an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierInput {
    /// The whole image through the convolutional trunk.
    Image,
    /// The patch grid, latents averaged over positions.
    Patches,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub encoder: EncoderConfig,
    pub hidden: usize,
    pub classes: usize,
    pub input: ClassifierInput,
    pub stride: usize,
}

impl ClassifierConfig {
    pub fn from_model(model: &ModelConfig) -> Self {
        Self {
            encoder: model.encoder.clone(),
            hidden: model.hidden,
            classes: 2,
            input: ClassifierInput::Image,
            stride: model.stride,
        }
    }

    fn geometry(&self) -> PatchGeometry {
        PatchGeometry {
            patch_size: self.encoder.patch_size,
            stride: self.stride,
        }
    }
}

/// Encoder trunk, pooled features, one SiLU hidden layer, class logits.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub config: ClassifierConfig,
    pub encoder: Encoder,
    hidden_w: ParamId,
    hidden_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

impl Classifier {
    pub fn build<T: Real, R: Rng + ?Sized>(config: &ClassifierConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        if config.hidden == 0 || config.classes < 2 {
            bail!(Config, "classifier needs a hidden layer and at least two classes");
        }
        let encoder = Encoder::build(&config.encoder, store, "encoder", rng)?;
        let (d, h, c) = (config.encoder.latent_dim, config.hidden, config.classes);
        let hidden_w = store.init("cls.hidden.weight", &[h, d], Init::KaimingNormal { fan_in: d }, rng)?;
        let hidden_b = store.init("cls.hidden.bias", &[h], Init::Zeros, rng)?;
        let out_w = store.init(
            "cls.out.weight",
            &[c, h],
            Init::Normal {
                std: (1.0 / h as f64).sqrt(),
            },
            rng,
        )?;
        let out_b = store.init("cls.out.bias", &[c], Init::Zeros, rng)?;
        Ok(Self {
            config: config.clone(),
            encoder,
            hidden_w,
            hidden_b,
            out_w,
            out_b,
        })
    }

    /// Logits `(B, classes)` for a batch of images.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, images: &[&ImageSample]) -> Result<Var> {
        let Some(first) = images.first() else {
            bail!(InvalidArgument, "empty batch");
        };
        let features = match self.config.input {
            ClassifierInput::Image => {
                let n = first.size();
                let mut data = Vec::with_capacity(images.len() * 3 * n * n);
                for img in images {
                    if !img.is_square() || img.size() != n {
                        bail!(Geometry, "classifier batch mixes image sizes");
                    }
                    data.extend(img.to_chw::<T>());
                }
                let x = g.input(Tensor::from_vec(&[images.len(), 3, n, n], data)?);
                self.encoder.forward(g, store, x)?
            }
            ClassifierInput::Patches => {
                let grids = batch_grids(images, None, self.config.geometry())?;
                let refs: Vec<&PatchGrid> = grids.iter().collect();
                let z = self.encoder.encode_grids(g, store, &refs)?;
                g.global_avg_pool(z)?
            }
        };
        let (hw, hb) = (g.param(store, self.hidden_w), g.param(store, self.hidden_b));
        let h = g.linear(features, hw, Some(hb))?;
        let h = g.silu(h);
        let (ow, ob) = (g.param(store, self.out_w), g.param(store, self.out_b));
        g.linear(h, ow, Some(ob))
    }

    /// Predicted class per image; ties go to the lower class index.
    pub fn predict<T: Real>(&self, store: &ParamStore<T>, images: &[&ImageSample]) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let logits = self.forward(&mut g, store, images)?;
        let c = self.config.classes;
        Ok(g.value(logits)
            .data()
            .chunks(c)
            .map(|row| {
                let mut best = 0;
                for (j, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }
}

/// How to initialise the classifier's encoder.
#[derive(Clone, Copy, Debug)]
pub enum FinetuneInit<'a> {
    Random,
    Pretrained(&'a Checkpoint),
}

const EVAL_BATCH: usize = 64;

fn labels_of(images: &[&ImageSample]) -> Result<Vec<usize>> {
    images
        .iter()
        .map(|s| {
            s.label
                .map(usize::from)
                .ok_or_else(|| Error::InvalidArgument(format!("sample `{}` has no label", s.id)))
        })
        .collect()
}

/// Accuracy and mean cross-entropy over `samples`.
fn score(model: &Classifier, params: &ParamStore<f32>, samples: &[ImageSample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        bail!(InvalidArgument, "cannot evaluate on an empty split");
    }
    let (mut correct, mut loss) = (0usize, 0.0);
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&ImageSample> = chunk.iter().collect();
        let labels = labels_of(&refs)?;
        let mut g = Graph::new();
        let logits = model.forward(&mut g, params, &refs)?;
        let ce = g.cross_entropy(logits, &labels)?;
        loss += g.value(ce).item() as f64 * chunk.len() as f64;
        let c = model.config.classes;
        for (row, l) in g.value(logits).data().chunks(c).zip(&labels) {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            correct += usize::from(best == *l);
        }
    }
    Ok((correct as f64 / samples.len() as f64, loss / samples.len() as f64))
}

/// Fine-tunes every weight of an encoder + MLP classifier on a stratified
/// labelled subset, keeping the parameters with the best validation
/// accuracy.
pub fn finetune_classifier(
    store: &DatasetStore,
    subset_size: Option<usize>,
    init: FinetuneInit<'_>,
    config: &TrainConfig,
    model: &ModelConfig,
) -> Result<Checkpoint> {
    finetune_classifier_with(store, subset_size, init, config, &ClassifierConfig::from_model(model), &mut |_| {})
}

pub fn finetune_classifier_with(
    store: &DatasetStore,
    subset_size: Option<usize>,
    init: FinetuneInit<'_>,
    config: &TrainConfig,
    classifier: &ClassifierConfig,
    observe: &mut dyn FnMut(&EpochReport),
) -> Result<Checkpoint> {
    config.validate()?;
    if config.phase != Phase::Finetune {
        bail!(Config, "fine-tuning needs a finetune-phase config");
    }
    let store = with_validation(store, config)?;
    let n = subset_size.unwrap_or(store.train.len());
    let ids = sample_label_subset(&store, n, derive_seed(&[config.seed, 1]))?;
    let subset = store.select_train(&ids)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ParamStore::<f32>::new();
    let model = Classifier::build(classifier, &mut params, &mut rng)?;
    if let FinetuneInit::Pretrained(ckpt) = init {
        if ckpt.cpc.as_ref().map(|c| &c.encoder) != Some(&classifier.encoder) {
            bail!(Config, "pretrained encoder configuration differs from the classifier's");
        }
        params.copy_prefix_from(&ckpt.params, "encoder.")?;
    }

    let mut history = History::default();
    let (acc0, loss0) = score(&model, &params, &store.valid)?;
    history.push(0, Split::Valid, "accuracy", acc0);
    history.push(0, Split::Valid, "cross_entropy", loss0);
    let mut best = Checkpoint {
        phase: Phase::Finetune,
        cpc: None,
        classifier: Some(classifier.clone()),
        train: TrainConfig {
            subset_size: Some(n),
            ..config.clone()
        },
        history: history.clone(),
        best_epoch: 0,
        rng: rng.clone(),
        params: params.clone(),
    };
    observe(&EpochReport {
        epoch: 0,
        train_loss: None,
        valid_loss: Some(loss0),
        valid_accuracy: Some(acc0),
        improved: true,
    });
    let mut best_acc = acc0;
    let mut since_best = 0;
    let mut adam = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..subset.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let images: Vec<ImageSample> = par::map(chunk.len(), |k| {
                let i = chunk[k];
                if config.augment {
                    augment(&subset[i], derive_seed(&[config.seed, epoch as u64, i as u64]))
                } else {
                    Ok(subset[i].clone())
                }
            })
            .into_iter()
            .collect::<Result<_>>()?;
            let refs: Vec<&ImageSample> = images.iter().collect();
            let labels = labels_of(&refs)?;
            let mut g = Graph::new();
            let step = model
                .forward(&mut g, &params, &refs)
                .and_then(|logits| g.cross_entropy(logits, &labels));
            let loss = match step {
                Ok(l) => l,
                Err(e) if e.is_numeric() => {
                    return Err(Error::Diverged {
                        epoch,
                        reason: e.to_string(),
                        last_good: Box::new(best),
                    })
                }
                Err(e) => return Err(e),
            };
            total += g.value(loss).item() as f64 * chunk.len() as f64;
            seen += chunk.len();
            let grads = g.backward(loss)?;
            adam.step(&mut params, &grads);
        }
        let (acc, vloss) = score(&model, &params, &store.valid)?;
        let train_loss = total / seen.max(1) as f64;
        if !train_loss.is_finite() || !vloss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                reason: "non-finite classification loss".into(),
                last_good: Box::new(best),
            });
        }
        history.push(epoch, Split::Train, "cross_entropy", train_loss);
        history.push(epoch, Split::Valid, "cross_entropy", vloss);
        history.push(epoch, Split::Valid, "accuracy", acc);
        let improved = acc > best_acc;
        if improved {
            best_acc = acc;
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
            valid_loss: Some(vloss),
            valid_accuracy: Some(acc),
            improved,
        });
        if since_best >= config.patience {
            break;
        }
    }
    if !store.test.is_empty() {
        let acc = evaluate(&best, &store, Split::Test)?;
        best.history.push(best.best_epoch, Split::Test, "accuracy", acc);
    }
    Ok(best)
}

/// Fraction of correctly classified samples in `split`, without augmentation.
pub fn evaluate(checkpoint: &Checkpoint, store: &DatasetStore, split: Split) -> Result<f64> {
    let model = checkpoint.classifier_model()?;
    Ok(score(&model, &checkpoint.params, store.split(split))?.0)
}
