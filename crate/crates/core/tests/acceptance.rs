//! Runs every acceptance criterion at its stated tolerance and prints one
//! PASS/FAIL line per criterion. Exits non-zero if any criterion fails.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use mdcpc::autoregressor::{Directional, MaskPattern};
use mdcpc::cpc::{info_nce_loss, CpcModel, MaskKind};
use mdcpc::data::{generate_synthetic, DatasetStore, ImageSample, Split, SyntheticSpec};
use mdcpc::leakcheck::{raster_causality, self_independence, target_leakage, LeakCheckConfig};
use mdcpc::params::ParamStore;
use mdcpc::patching::{extract_patches, grid_shape, PatchGrid};
use mdcpc::training::{
    finetune_classifier, gradient_check, pretrain_cpc, toy_gradcheck_config, Checkpoint, FinetuneInit, ModelConfig,
    TrainConfig,
};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn geometry() -> Outcome {
    let side = grid_shape(96, 24, 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let px = (0..96 * 96 * 3).map(|_| rng.random()).collect();
    let img = ImageSample::new("g", 96, 96, px, None).unwrap();
    let grid = extract_patches(&img, 24, 12).unwrap();
    let mut overlaps_ok = true;
    for i in 0..grid.side {
        for j in 0..grid.side {
            for y in 0..24 {
                for x in 0..24 {
                    overlaps_ok &= grid.pixel(i, j, y, x) == img.pixel(12 * i + y, 12 * j + x);
                    if j + 1 < grid.side && x >= 12 {
                        overlaps_ok &= grid.pixel(i, j, y, x) == grid.pixel(i, j + 1, y, x - 12);
                    }
                    if i + 1 < grid.side && y >= 12 {
                        overlaps_ok &= grid.pixel(i, j, y, x) == grid.pixel(i + 1, j, y - 12, x);
                    }
                }
            }
        }
    }
    let n = grid.side * grid.side;
    outcome(
        side == 7 && n == 49 && overlaps_ok,
        format!("grid side {side}, {n} patches, 12-pixel overlaps exact: {overlaps_ok}"),
    )
}

fn causality() -> Outcome {
    let t = Instant::now();
    let single = LeakCheckConfig {
        directional: Directional::Single,
        pattern: MaskPattern::AllA,
        mask: MaskKind::TopDown,
        ..LeakCheckConfig::default()
    };
    let multi = LeakCheckConfig {
        directional: Directional::Multi,
        pattern: MaskPattern::AllA,
        ..LeakCheckConfig::default()
    };
    let infill = LeakCheckConfig::default();
    let suites = [
        raster_causality(&single).unwrap(),
        self_independence(&multi).unwrap(),
        target_leakage(&infill).unwrap(),
    ];
    let elapsed = t.elapsed().as_secs_f64();
    let worst = suites.iter().map(|s| s.max_delta).fold(0.0, f64::max);
    let all = suites.iter().all(|s| s.passed && s.trials == 20);
    let names: Vec<String> = suites.iter().map(|s| format!("{} {:.1e}", s.name, s.max_delta)).collect();
    outcome(
        all && worst <= 1e-12 && elapsed < 60.0,
        format!("{} ; max delta {worst:.1e}; {elapsed:.1}s", names.join(", ")),
    )
}

fn info_nce_baseline(store: &DatasetStore) -> Outcome {
    let train = TrainConfig::pretrain();
    let model_config = ModelConfig::desk();
    let cpc = model_config.cpc_config(&train, store.meta.image_size);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = ParamStore::<f32>::new();
    let model = CpcModel::build(&cpc, &mut params, &mut rng).unwrap();
    let geom = cpc.geometry();
    let mut total = 0.0;
    for b in 0..100 {
        let grids: Vec<PatchGrid> = (0..train.batch_size)
            .map(|k| {
                let img = &store.train[(b * train.batch_size + k) % store.train.len()];
                extract_patches(img, geom.patch_size, geom.stride).unwrap()
            })
            .collect();
        let refs: Vec<&PatchGrid> = grids.iter().collect();
        total += model.loss_value(&params, &refs, &mut rng).unwrap() as f64;
    }
    let mean = total / 100.0;
    let target = 17f64.ln();
    outcome(
        (mean - target).abs() <= 0.15,
        format!("mean loss {mean:.4} over 100 batches vs ln(17) = {target:.4}"),
    )
}

/// Softmax cross-entropy written out term by term.
fn softmax_ce_oracle(pred: &[f64], pos: &[f64], negs: &[Vec<f64>]) -> f64 {
    let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
    let logits: Vec<f64> = std::iter::once(dot(pred, pos)).chain(negs.iter().map(|n| dot(pred, n))).collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    -((logits[0] - m).exp() / denom).ln()
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let t = rng.random_range(1..=6);
        let n = rng.random_range(1..=8);
        let d = rng.random_range(1..=10);
        let mut v = |len: usize| -> Vec<f64> { (0..len).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let preds: Vec<Vec<f64>> = (0..t).map(|_| v(d)).collect();
        let pos: Vec<Vec<f64>> = (0..t).map(|_| v(d)).collect();
        let negs: Vec<Vec<Vec<f64>>> = (0..t).map(|_| (0..n).map(|_| v(d)).collect()).collect();
        let got = info_nce_loss(&preds, &pos, &negs).unwrap();
        let want = (0..t).map(|i| softmax_ce_oracle(&preds[i], &pos[i], &negs[i])).sum::<f64>() / t as f64;
        worst = worst.max((got - want).abs());
    }
    outcome(worst <= 1e-6, format!("max |loss - oracle| {worst:.2e} over 100 instances"))
}

fn gradients() -> Outcome {
    let cfg = toy_gradcheck_config();
    let report = gradient_check(&cfg).unwrap();
    let worst = report.max_rel_err();
    let params = report.elements();
    outcome(
        worst <= 1e-4 && params <= 1000 && !report.is_empty(),
        format!("{params} parameters in {} groups, max relative error {worst:.2e}", report.groups.len()),
    )
}

fn toy_pretrain_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        epochs: 10,
        batch_size: 8,
        negatives: 4,
        patience: 10,
        directional: Directional::Multi,
        mask_kind: MaskKind::Infill,
        seed: 0,
        ..TrainConfig::pretrain()
    }
}

fn trainability(store: &DatasetStore) -> (Outcome, Checkpoint) {
    let t = Instant::now();
    let ckpt = pretrain_cpc(store, &toy_pretrain_config(), &ModelConfig::desk()).unwrap();
    let series = ckpt.history.series(Split::Valid, "info_nce");
    let v0 = series[0].1;
    let best = series.iter().skip(1).map(|(_, v)| *v).fold(f64::INFINITY, f64::min);
    let drop = 1.0 - best / v0;
    let elapsed = t.elapsed().as_secs_f64();
    (
        outcome(
            drop >= 0.2 && series.len() <= 11 && elapsed < 1800.0,
            format!(
                "validation InfoNCE {v0:.4} at epoch 0 -> {best:.4} within 10 epochs ({:.1}% lower); {elapsed:.0}s",
                100.0 * drop
            ),
        ),
        ckpt,
    )
}

fn transfer(store: &DatasetStore, pretrained: &Checkpoint) -> Outcome {
    let model = ModelConfig::desk();
    let mut means = [0.0; 2];
    let mut per_seed = [Vec::new(), Vec::new()];
    for seed in 0..5u64 {
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::finetune()
        };
        for (k, init) in [FinetuneInit::Random, FinetuneInit::Pretrained(pretrained)].into_iter().enumerate() {
            let ckpt = finetune_classifier(store, Some(32), init, &cfg, &model).unwrap();
            let acc = ckpt.history.last(Split::Test, "accuracy").unwrap();
            per_seed[k].push(format!("{acc:.3}"));
            means[k] += acc / 5.0;
        }
    }
    let gap = 100.0 * (means[1] - means[0]);
    outcome(
        gap >= 3.0,
        format!(
            "32 labels, 5 seeds: pretrained {:.3} [{}] vs random {:.3} [{}] (+{gap:.1} points)",
            means[1],
            per_seed[1].join(" "),
            means[0],
            per_seed[0].join(" ")
        ),
    )
}

fn determinism() -> Outcome {
    let store = generate_synthetic(&SyntheticSpec::new(12, 32, 5)).unwrap();
    let pre = TrainConfig {
        epochs: 2,
        batch_size: 4,
        negatives: 3,
        learning_rate: 1e-3,
        seed: 9,
        ..TrainConfig::pretrain()
    };
    let model = ModelConfig::desk();
    let a = pretrain_cpc(&store, &pre, &model).unwrap();
    let b = pretrain_cpc(&store, &pre, &model).unwrap();
    let pre_same = a.history.to_csv_string().unwrap() == b.history.to_csv_string().unwrap();

    let ft = TrainConfig {
        epochs: 2,
        seed: 9,
        ..TrainConfig::finetune()
    };
    let fa = finetune_classifier(&store, Some(8), FinetuneInit::Pretrained(&a), &ft, &model).unwrap();
    let fb = finetune_classifier(&store, Some(8), FinetuneInit::Pretrained(&a), &ft, &model).unwrap();
    let ft_same = fa.history.to_csv_string().unwrap() == fb.history.to_csv_string().unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("probe.ckpt");
    a.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let grids: Vec<PatchGrid> = store.test[..4].iter().map(|s| extract_patches(s, 8, 4).unwrap()).collect();
    let refs: Vec<&PatchGrid> = grids.iter().collect();
    let probe = |c: &Checkpoint| {
        let m = c.cpc_model().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        m.loss_value(&c.params, &refs, &mut rng).unwrap().to_bits()
    };
    let cpc_bitwise = probe(&a) == probe(&loaded);

    let path = dir.path().join("cls.ckpt");
    fa.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let imgs: Vec<&ImageSample> = store.test.iter().collect();
    let logits = |c: &Checkpoint| {
        let m = c.classifier_model().unwrap();
        let mut g = mdcpc::graph::Graph::new();
        let l = m.forward(&mut g, &c.params, &imgs).unwrap();
        g.value(l).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    let cls_bitwise = logits(&fa) == logits(&loaded);
    outcome(
        pre_same && ft_same && cpc_bitwise && cls_bitwise,
        format!(
            "pretrain CSV identical {pre_same}, finetune CSV identical {ft_same}, \
             CPC probe bitwise {cpc_bitwise}, classifier probe bitwise {cls_bitwise}"
        ),
    )
}

fn main() {
    let store = generate_synthetic(&SyntheticSpec::new(500, 32, 7)).unwrap();
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 geometry", geometry()),
        ("2 causality suite", causality()),
        ("3 InfoNCE baseline", info_nce_baseline(&store)),
        ("4 oracle equivalence", oracle_equivalence()),
        ("5 gradient check", gradients()),
    ];
    let (c6, pretrained) = trainability(&store);
    results.push(("6 trainability", c6));
    results.push(("7 transfer direction", transfer(&store, &pretrained)));
    results.push(("8 determinism and round-trip", determinism()));

    let mut failed = 0;
    for (name, o) in &results {
        let tag = if o.passed { "PASS" } else { "FAIL" };
        println!("criterion {name}: {tag} ({})", o.detail);
        failed += usize::from(!o.passed);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
