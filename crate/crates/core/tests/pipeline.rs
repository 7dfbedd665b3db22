use std::path::Path;

use mdcpc::data::{
    export_png_dir, generate_synthetic, import_png_dir, load_pcam, pcam_file_names, sample_label_subset, DatasetMeta,
    DatasetStore, ImageSample, Split, SyntheticSpec, PCAM_IMAGE_SIZE,
};
use mdcpc::training::{
    evaluate, finetune_classifier, run_sweep, ClassifierConfig, FinetuneInit, ModelConfig, SweepConfig, TrainConfig,
    Variant,
};
use mdcpc::Error;
use tempfile::TempDir;

fn write_h5(path: &Path, name: &str, shape: &[usize], data: &[u8]) {
    let f = hdf5::File::create(path).unwrap();
    f.new_dataset::<u8>().shape(shape).create(name).unwrap().write_raw(data).unwrap();
}

/// Writes a fake PCam sextet with `n` images per split.
fn fake_pcam(dir: &Path, n: usize) {
    let s = PCAM_IMAGE_SIZE;
    for (split, x, y) in pcam_file_names() {
        let pixels: Vec<u8> = (0..n * s * s * 3).map(|i| (i * 7 + split as usize) as u8).collect();
        write_h5(&dir.join(x), "x", &[n, s, s, 3], &pixels);
        let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        write_h5(&dir.join(y), "y", &[n, 1, 1, 1], &labels);
    }
}

#[test]
fn fake_pcam_sextet_loads_every_split() {
    let tmp = TempDir::new().unwrap();
    fake_pcam(tmp.path(), 3);
    let store = load_pcam(tmp.path()).unwrap();
    assert_eq!(store.meta.image_size, 96);
    for split in Split::ALL {
        let images = store.split(split);
        assert_eq!(images.len(), 3);
        assert_eq!(images.iter().map(|s| s.label.unwrap()).collect::<Vec<_>>(), [0, 1, 0]);
    }
    assert_eq!(store.train[1].pixel(0, 0), [(s_offset(1)) as u8, (s_offset(1) + 7) as u8, (s_offset(1) + 14) as u8]);
}

fn s_offset(image: usize) -> usize {
    (image * PCAM_IMAGE_SIZE * PCAM_IMAGE_SIZE * 3 * 7) % 256
}

#[test]
fn missing_pcam_file_is_ingestion_error_naming_it() {
    let tmp = TempDir::new().unwrap();
    fake_pcam(tmp.path(), 2);
    let (_, _, y) = &pcam_file_names()[2];
    std::fs::remove_file(tmp.path().join(y)).unwrap();
    match load_pcam(tmp.path()) {
        Err(Error::Ingestion(msg)) => assert!(msg.contains(y.as_str()), "{msg}"),
        other => panic!("expected ingestion error, got {other:?}"),
    }
}

#[test]
fn wrong_pcam_image_shape_is_format_error() {
    let tmp = TempDir::new().unwrap();
    fake_pcam(tmp.path(), 2);
    let (_, x, _) = &pcam_file_names()[0];
    write_h5(&tmp.path().join(x), "x", &[2, 64, 64, 3], &vec![0; 2 * 64 * 64 * 3]);
    assert!(matches!(load_pcam(tmp.path()), Err(Error::Format(_))));
}

#[test]
fn label_count_mismatch_is_format_error() {
    let tmp = TempDir::new().unwrap();
    fake_pcam(tmp.path(), 2);
    let (_, _, y) = &pcam_file_names()[1];
    write_h5(&tmp.path().join(y), "y", &[3, 1, 1, 1], &[0, 1, 0]);
    assert!(matches!(load_pcam(tmp.path()), Err(Error::Format(_))));
}

#[test]
fn png_directory_round_trips_pixels_labels_and_splits() {
    let tmp = TempDir::new().unwrap();
    let store = generate_synthetic(&SyntheticSpec::new(5, 24, 11)).unwrap();
    export_png_dir(&store, tmp.path()).unwrap();
    let back = import_png_dir(tmp.path()).unwrap();
    assert_eq!(back.meta.image_size, 24);
    for split in Split::ALL {
        let (a, b) = (store.split(split), back.split(split));
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert_eq!((&x.id, x.label, &x.pixels), (&y.id, y.label, &y.pixels));
        }
    }
}

#[test]
fn single_class_subset_is_stratification_error() {
    let store = generate_synthetic(&SyntheticSpec::new(6, 16, 0)).unwrap();
    let train: Vec<ImageSample> = store.train.iter().filter(|s| s.label == Some(1)).cloned().collect();
    let one_class = DatasetStore::new(store.meta.clone(), train, store.valid.clone(), store.test.clone()).unwrap();
    assert!(matches!(sample_label_subset(&one_class, 2, 0), Err(Error::Stratification(_))));
}

fn quick_finetune(epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        learning_rate: lr,
        batch_size: 10,
        patience: epochs + 1,
        ..TrainConfig::finetune()
    }
}

#[test]
fn constant_predictor_scores_class_prior() {
    let store = generate_synthetic(&SyntheticSpec::new(10, 32, 2)).unwrap();
    let mut ckpt =
        finetune_classifier(&store, Some(4), FinetuneInit::Random, &quick_finetune(0, 1e-4), &ModelConfig::desk())
            .unwrap();
    let w = ckpt.params.id("cls.out.weight").unwrap();
    ckpt.params.get_mut(w).data_mut().fill(0.0);
    let b = ckpt.params.id("cls.out.bias").unwrap();
    ckpt.params.get_mut(b).data_mut().copy_from_slice(&[0.0, 1.0]);
    let test = store.split(Split::Test);
    let prior = test.iter().filter(|s| s.label == Some(1)).count() as f64 / test.len() as f64;
    assert_eq!(evaluate(&ckpt, &store, Split::Test).unwrap(), prior);
    assert_eq!(prior, 0.5);
}

#[test]
fn classifier_memorises_ten_images() {
    let base = generate_synthetic(&SyntheticSpec::new(5, 32, 4)).unwrap();
    let ten: Vec<ImageSample> = base.train.iter().chain(&base.valid).chain(&base.test).take(10).cloned().collect();
    let copies = |tag: &str| -> Vec<ImageSample> {
        ten.iter()
            .map(|s| ImageSample::new(format!("{}-{tag}", s.id), 32, 32, s.pixels.clone(), s.label).unwrap())
            .collect()
    };
    let meta = DatasetMeta {
        image_size: 32,
        class_names: base.meta.class_names.clone(),
        source: "memorise".into(),
    };
    let store = DatasetStore::new(meta, ten.clone(), copies("v"), copies("t")).unwrap();
    let ckpt =
        finetune_classifier(&store, None, FinetuneInit::Random, &quick_finetune(60, 3e-3), &ModelConfig::desk())
            .unwrap();
    assert_eq!(evaluate(&ckpt, &store, Split::Test).unwrap(), 1.0);
}

#[test]
fn sweep_without_pretrained_checkpoint_names_the_variant() {
    let store = generate_synthetic(&SyntheticSpec::new(4, 32, 0)).unwrap();
    let config = SweepConfig {
        finetune: quick_finetune(1, 1e-4),
        classifier: ClassifierConfig::from_model(&ModelConfig::desk()),
        pretrained: Default::default(),
    };
    match run_sweep(&store, &[Variant::None, Variant::MultiTopDown], &[2], &[1], &config) {
        Err(Error::Config(msg)) => assert!(msg.contains("multi_top_down"), "{msg}"),
        other => panic!("expected config error, got {other:?}"),
    }
}

#[test]
fn sweep_aggregates_three_seeds() {
    let store = generate_synthetic(&SyntheticSpec::new(6, 32, 5)).unwrap();
    let config = SweepConfig {
        finetune: quick_finetune(2, 1e-3),
        classifier: ClassifierConfig::from_model(&ModelConfig::desk()),
        pretrained: Default::default(),
    };
    let result = run_sweep(&store, &[Variant::None], &[2, 4], &[1, 2, 3], &config).unwrap();
    assert_eq!(result.rows.len(), 6);
    let agg = result.aggregate();
    assert_eq!(agg.len(), 2);
    for a in &agg {
        let accs: Vec<f64> =
            result.rows.iter().filter(|r| r.subset_size == a.subset_size).map(|r| r.test_accuracy).collect();
        assert_eq!(a.runs, 3);
        let mean = accs.iter().sum::<f64>() / 3.0;
        let var = accs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 2.0;
        assert!((a.mean - mean).abs() < 1e-12);
        assert!((a.std - var.sqrt()).abs() < 1e-12);
    }

    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("sweep.csv");
    result.write_csv(&path).unwrap();
    assert_eq!(mdcpc::training::SweepResult::read_csv(&path).unwrap(), result);
}
