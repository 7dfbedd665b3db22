use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autoregressor::{ArConfig, Directional};
use crate::cpc::{CpcConfig, CpcModel, MaskKind};
use crate::data::ImageSample;
use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::graph::{BackwardFault, Graph, Var};
use crate::params::{group_of, ParamStore};
use crate::patching::{extract_patches, PatchGrid};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub cpc: CpcConfig,
    pub batch: usize,
    pub seed: u64,
    /// Central-difference step.
    pub step: f64,
    pub fault: Option<BackwardFault>,
}

/// 12×12 images, 4-pixel patches, D = 4, two shared-branch multi-directional
/// blocks and an infill head: a little over 600 parameters.
pub fn toy_gradcheck_config() -> GradCheckConfig {
    let d = 4;
    let mut ar = ArConfig::new(Directional::Multi, d);
    ar.blocks = 2;
    ar.share_branch_weights = true;
    GradCheckConfig {
        cpc: CpcConfig {
            encoder: EncoderConfig::toy(d, 4, 2),
            autoregressor: ar,
            mask: MaskKind::Infill,
            context_rows: 1,
            image_size: 12,
            stride: 4,
            negatives: 2,
            head_init_std: 0.3,
        },
        batch: 3,
        seed: 11,
        step: 1e-5,
        fault: None,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupError {
    pub group: String,
    pub elements: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub groups: Vec<GroupError>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn elements(&self) -> usize {
        self.groups.iter().map(|g| g.elements).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Groups whose error exceeds `threshold`.
    pub fn flagged(&self, threshold: f64) -> Vec<&GroupError> {
        self.groups.iter().filter(|g| g.max_rel_err > threshold).collect()
    }
}

/// Compares backpropagated gradients of `loss` with central differences for
/// every element of `store`. Relative error is
/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn gradient_check_store<F>(
    store: &mut ParamStore<f64>,
    step: f64,
    fault: Option<BackwardFault>,
    loss: F,
) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = match fault {
        Some(f) => Graph::new().with_fault(f),
        None => Graph::new(),
    };
    let root = loss(&mut g, store)?;
    let grads = g.backward(root)?;
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let r = loss(&mut g, store)?;
        Ok(g.value(r).item())
    };
    let mut groups: BTreeMap<String, GroupError> = BTreeMap::new();
    for id in store.ids().collect::<Vec<_>>() {
        let n = store.get(id).len();
        let analytic = grads.get(id).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let group = group_of(store.name(id)).to_string();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + step;
            let up = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig - step;
            let down = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        let e = groups.entry(group.clone()).or_insert(GroupError {
            group,
            elements: 0,
            max_rel_err: 0.0,
        });
        e.elements += n;
        e.max_rel_err = e.max_rel_err.max(worst);
    }
    Ok(GradReport {
        groups: groups.into_values().collect(),
    })
}

/// Gradient check of the full InfoNCE objective in 64-bit arithmetic.
pub fn gradient_check(config: &GradCheckConfig) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::<f64>::new();
    let model = CpcModel::build(&config.cpc, &mut store, &mut rng)?;
    let n = config.cpc.image_size;
    let grids: Vec<PatchGrid> = (0..config.batch)
        .map(|b| {
            let pixels = (0..n * n * 3).map(|_| rng.random::<u8>()).collect();
            let img = ImageSample::new(format!("probe-{b}"), n, n, pixels, None)?;
            extract_patches(&img, config.cpc.encoder.patch_size, config.cpc.stride)
        })
        .collect::<Result<_>>()?;
    let neg_seed = rng.random::<u64>();
    gradient_check_store(&mut store, config.step, config.fault, |g, s| {
        let refs: Vec<&PatchGrid> = grids.iter().collect();
        let mut neg = ChaCha8Rng::seed_from_u64(neg_seed);
        Ok(model.forward(g, s, &refs, &mut neg)?.loss)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::OpKind;

    #[test]
    fn empty_store_gives_empty_report() {
        let mut store = ParamStore::<f64>::new();
        let report = gradient_check_store(&mut store, 1e-5, None, |g, _| {
            let x = g.input(crate::tensor::Tensor::scalar(1.0));
            Ok(g.sum(x))
        })
        .unwrap();
        assert!(report.is_empty());
        assert_eq!(report.max_rel_err(), 0.0);
    }

    #[test]
    fn toy_model_is_small() {
        let cfg = toy_gradcheck_config();
        let mut store = ParamStore::<f64>::new();
        CpcModel::build(&cfg.cpc, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(store.num_elements() <= 1000, "{}", store.num_elements());
    }

    #[test]
    fn corrupted_linear_backward_is_flagged() {
        let mut cfg = toy_gradcheck_config();
        cfg.fault = Some(BackwardFault {
            op: OpKind::Linear,
            factor: 1.5,
        });
        let report = gradient_check(&cfg).unwrap();
        assert!(report.max_rel_err() > 1e-2);
        assert!(report.flagged(1e-2).iter().any(|g| g.group.starts_with("head")));
    }
}
