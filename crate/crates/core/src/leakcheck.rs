//! Perturbation checks that the context network and the prediction path
//! never see what they are meant to predict.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autoregressor::{ArConfig, Autoregressor, Directional, MaskPattern, MultiFusion, DEFAULT_BLOCKS};
use crate::cpc::{CpcConfig, CpcModel, MaskKind, DEFAULT_CONTEXT_ROWS};
use crate::encoder::{EncoderConfig, LatentGrid};
use crate::error::Result;
use crate::params::ParamStore;

pub const LEAK_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakCheckConfig {
    pub mask: MaskKind,
    pub directional: Directional,
    pub pattern: MaskPattern,
    pub fusion: MultiFusion,
    pub blocks: usize,
    pub trials: usize,
    pub grid: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for LeakCheckConfig {
    fn default() -> Self {
        Self {
            mask: MaskKind::Infill,
            directional: Directional::Multi,
            pattern: MaskPattern::Standard,
            fusion: MultiFusion::Streams,
            blocks: DEFAULT_BLOCKS,
            trials: 20,
            grid: 7,
            dim: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub trials: usize,
    pub max_delta: f64,
    pub passed: bool,
    /// Where the largest deviation showed up.
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LeakReport {
    pub suites: Vec<SuiteResult>,
}

impl LeakReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }

    pub fn max_delta(&self) -> f64 {
        self.suites.iter().map(|s| s.max_delta).fold(0.0, f64::max)
    }
}

impl LeakCheckConfig {
    fn ar_config(&self) -> ArConfig {
        ArConfig {
            pattern: self.pattern,
            fusion: self.fusion,
            blocks: self.blocks,
            ..ArConfig::new(self.directional, self.dim)
        }
    }

    fn cpc_config(&self) -> CpcConfig {
        CpcConfig {
            encoder: EncoderConfig::toy(self.dim, 4, 2),
            autoregressor: self.ar_config(),
            mask: self.mask,
            context_rows: DEFAULT_CONTEXT_ROWS.min(self.grid.saturating_sub(1)).max(1),
            image_size: 4 * self.grid,
            stride: 4,
            negatives: 1,
            head_init_std: 1.0,
        }
    }
}

fn random_grid(side: usize, dim: usize, rng: &mut ChaCha8Rng) -> LatentGrid<f64> {
    LatentGrid {
        side,
        dim,
        values: (0..side * side * dim).map(|_| StandardNormal.sample(rng)).collect(),
    }
}

fn perturbed(z: &LatentGrid<f64>, at: (usize, usize), rng: &mut ChaCha8Rng) -> LatentGrid<f64> {
    let mut p = z.clone();
    for v in p.at_mut(at.0, at.1) {
        *v += 1.0 + 4.0 * rng.random::<f64>();
    }
    p
}

fn randomise_biases(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).ends_with(".bias") {
            for v in store.get_mut(id).data_mut() {
                *v = StandardNormal.sample(rng);
            }
        }
    }
}

/// Perturbing latent `(r, c)` leaves the context at `(r, c)` and at every
/// raster-earlier position unchanged, so no position sees itself, anything
/// to its right in its own row, or any later row.
pub fn raster_causality(config: &LeakCheckConfig) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::new();
    let ar_config = ArConfig {
        directional: Directional::Single,
        ..config.ar_config()
    };
    let ar = Autoregressor::build(&ar_config, &mut store, "ar", &mut rng)?;
    randomise_biases(&mut store, &mut rng);
    let g = config.grid;
    let (mut worst, mut detail) = (0.0f64, String::from("no deviation"));
    for _ in 0..config.trials {
        let z = random_grid(g, config.dim, &mut rng);
        let at = (rng.random_range(0..g), rng.random_range(0..g));
        let base = ar.autoregress(&store, &z)?;
        let moved = ar.autoregress(&store, &perturbed(&z, at, &mut rng))?;
        for p in 0..=at.0 * g + at.1 {
            let (i, j) = (p / g, p % g);
            let d = max_abs(base.at(i, j), moved.at(i, j));
            if d > worst {
                worst = d;
                detail = if (i, j) == at {
                    format!("self-position leakage: context {at:?} moved by {d:.3e} when its own latent changed")
                } else {
                    format!("context ({i}, {j}) moved by {d:.3e} after perturbing latent {at:?}")
                };
            }
        }
    }
    Ok(finish("raster causality", config.trials, worst, detail))
}

/// Perturbing latent `(i, j)` leaves context `(i, j)` unchanged.
pub fn self_independence(config: &LeakCheckConfig) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5e1f);
    let mut store = ParamStore::new();
    let ar = Autoregressor::build(&config.ar_config(), &mut store, "ar", &mut rng)?;
    randomise_biases(&mut store, &mut rng);
    let g = config.grid;
    let (mut worst, mut detail) = (0.0f64, String::from("no deviation"));
    for _ in 0..config.trials {
        let z = random_grid(g, config.dim, &mut rng);
        let at = (rng.random_range(0..g), rng.random_range(0..g));
        let base = ar.autoregress(&store, &z)?;
        let moved = ar.autoregress(&store, &perturbed(&z, at, &mut rng))?;
        let d = max_abs(base.at(at.0, at.1), moved.at(at.0, at.1));
        if d > worst {
            worst = d;
            detail = format!("self-position leakage: context {:?} moved by {d:.3e} when its own latent changed", at);
        }
    }
    Ok(finish("self-position independence", config.trials, worst, detail))
}

/// Replacing any true target latent with noise leaves every prediction
/// unchanged.
pub fn target_leakage(config: &LeakCheckConfig) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7a96);
    let mut store = ParamStore::new();
    let model = CpcModel::build(&config.cpc_config(), &mut store, &mut rng)?;
    randomise_biases(&mut store, &mut rng);
    let targets = model.mask.target_positions();
    let g = config.grid;
    let (mut worst, mut detail) = (0.0f64, String::from("no deviation"));
    for _ in 0..config.trials {
        let z = random_grid(g, config.dim, &mut rng);
        let at = targets[rng.random_range(0..targets.len())];
        let mut noisy = z.clone();
        for v in noisy.at_mut(at.0, at.1) {
            *v = 10.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
        }
        let base = model.predict_from_latents(&store, std::slice::from_ref(&z))?;
        let moved = model.predict_from_latents(&store, std::slice::from_ref(&noisy))?;
        let d = max_abs(base.data(), moved.data());
        if d > worst {
            worst = d;
            detail = format!("predictions moved by {d:.3e} when true target latent {:?} changed", at);
        }
    }
    let name = format!("{} target leakage", model.mask.kind.as_str());
    Ok(finish(&name, config.trials, worst, detail))
}

/// Suites that apply to the configured model.
pub fn run_leakcheck(config: &LeakCheckConfig) -> Result<LeakReport> {
    let mut suites = Vec::new();
    match config.directional {
        Directional::Single => suites.push(raster_causality(config)?),
        Directional::Multi => suites.push(self_independence(config)?),
    }
    suites.push(target_leakage(config)?);
    Ok(LeakReport { suites })
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn finish(name: &str, trials: usize, max_delta: f64, detail: String) -> SuiteResult {
    SuiteResult {
        name: name.to_string(),
        trials,
        max_delta,
        passed: max_delta <= LEAK_TOLERANCE,
        detail,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(directional: Directional, pattern: MaskPattern) -> LeakCheckConfig {
        LeakCheckConfig {
            directional,
            pattern,
            trials: 8,
            grid: 5,
            dim: 3,
            blocks: 3,
            ..LeakCheckConfig::default()
        }
    }

    #[test]
    fn standard_models_pass() {
        for dir in [Directional::Single, Directional::Multi] {
            for mask in [MaskKind::Infill, MaskKind::TopDown] {
                let cfg = LeakCheckConfig {
                    mask,
                    ..small(dir, MaskPattern::Standard)
                };
                let r = run_leakcheck(&cfg).unwrap();
                assert!(r.passed(), "{dir:?} {mask:?}: {:?}", r.suites);
            }
        }
    }

    #[test]
    fn mask_b_everywhere_leaks_self() {
        let r = self_independence(&small(Directional::Multi, MaskPattern::AllB)).unwrap();
        assert!(!r.passed);
        assert!(r.detail.contains("self-position"));
        let r = raster_causality(&small(Directional::Single, MaskPattern::AllB)).unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn chained_fusion_leaks_after_two_blocks() {
        let cfg = LeakCheckConfig {
            fusion: MultiFusion::Chained,
            ..small(Directional::Multi, MaskPattern::Standard)
        };
        assert!(!self_independence(&cfg).unwrap().passed);
        let one = LeakCheckConfig { blocks: 1, ..cfg };
        assert!(self_independence(&one).unwrap().passed);
    }
}
