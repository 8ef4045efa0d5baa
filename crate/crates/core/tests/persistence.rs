//! Dataset files, checkpoints and bitwise reproducibility of training.

use unipool::checkpoint::Checkpoint;
use unipool::data::{
    load_binary_dir, parse_records, synthetic, synthetic_split, write_binary_dir, SyntheticSpec,
};
use unipool::models::{build_model, Architecture, ModelConfig};
use unipool::pooling::PoolMethod;
use unipool::train::{TrainConfig, Trainer};
use unipool::Precision;

fn spec(per_class: usize, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        num_classes: 4,
        samples_per_class: per_class,
        image_size: 16,
        noise_std: 0.1,
        seed,
    }
}

#[test]
fn synthetic_classes_are_separable_by_nearest_centroid() {
    let (train, test) = synthetic_split(&spec(64, 3), 32).unwrap();
    let dim = train.image_bytes(0).len();
    let mut centroids = vec![vec![0.0f64; dim]; train.num_classes()];
    let mut counts = vec![0usize; train.num_classes()];
    for i in 0..train.len() {
        let k = train.labels()[i] as usize;
        counts[k] += 1;
        for (c, &p) in centroids[k].iter_mut().zip(train.image_bytes(i)) {
            *c += p as f64;
        }
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= *n as f64);
    }
    let correct = (0..test.len())
        .filter(|&i| {
            let x = test.image_bytes(i);
            let dist = |c: &Vec<f64>| {
                c.iter()
                    .zip(x)
                    .map(|(a, &b)| (a - b as f64).powi(2))
                    .sum::<f64>()
            };
            let best = (0..centroids.len())
                .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                .unwrap();
            best == test.labels()[i] as usize
        })
        .count();
    assert!(
        correct as f64 / test.len() as f64 >= 0.9,
        "{correct}/{}",
        test.len()
    );
}

#[test]
fn synthetic_data_depends_only_on_the_seed() {
    assert_eq!(
        synthetic(&spec(8, 1)).unwrap().pixels(),
        synthetic(&spec(8, 1)).unwrap().pixels()
    );
    assert_ne!(
        synthetic(&spec(8, 1)).unwrap().pixels(),
        synthetic(&spec(8, 2)).unwrap().pixels()
    );
}

#[test]
fn binary_directory_round_trip() {
    let (train, test) = synthetic_split(&spec(6, 0), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_binary_dir(dir.path(), &train, &test).unwrap();
    let (train2, test2) = load_binary_dir(dir.path()).unwrap();
    assert_eq!(train2.pixels(), train.pixels());
    assert_eq!(train2.labels(), train.labels());
    assert_eq!(test2.pixels(), test.pixels());
    assert_eq!(train2.class_names(), train.class_names());
    assert_eq!(train2.image_shape(), [3, 16, 16]);
}

#[test]
fn malformed_records_are_rejected() {
    let record = 1 + 3 * 4 * 4;
    assert!(parse_records(&vec![0u8; 2 * record], [3, 4, 4]).is_ok());
    assert!(parse_records(&vec![0u8; 2 * record - 1], [3, 4, 4]).is_err());
    let names = vec!["a".to_string(), "b".to_string()];
    assert!(unipool::data::Dataset::new(vec![0; 48], vec![1], [3, 4, 4], names.clone()).is_ok());
    assert_eq!(
        unipool::data::Dataset::new(vec![0; 48], vec![2], [3, 4, 4], names)
            .unwrap_err()
            .exit_code(),
        2
    );
}

fn trainer(seed: u64) -> Trainer<f32> {
    let cfg = ModelConfig::new(
        Architecture::TinyResNet,
        PoolMethod::UniversalFc1,
        PoolMethod::UniversalFc2,
    )
    .with_input([3, 16, 16], 4);
    let tc = TrainConfig {
        lr0: 0.05,
        epochs: 5,
        lr_decay_interval: 2,
        batch_size: 16,
        seed,
        precision: Precision::F32,
        augment: true,
        ..TrainConfig::default()
    };
    Trainer::new(build_model(cfg, seed).unwrap(), tc).unwrap()
}

fn strip_time(rows: Vec<unipool::train::EpochMetrics>) -> Vec<[f64; 4]> {
    rows.iter()
        .map(|m| [m.train_loss, m.train_top1, m.test_top1, m.test_top5])
        .collect()
}

#[test]
fn training_is_bitwise_reproducible_and_resumable() {
    let (train, test) = synthetic_split(&spec(16, 0), 8).unwrap();
    let mut a = trainer(7);
    let ha = strip_time(a.run(&train, &test, |_, _| Ok(())).unwrap());
    let mut b = trainer(7);
    let hb = strip_time(b.run(&train, &test, |_, _| Ok(())).unwrap());
    assert_eq!(ha, hb);
    assert_eq!(a.to_checkpoint(), b.to_checkpoint());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.upl");
    let mut c = trainer(7);
    c.cfg.epochs = 2;
    c.run(&train, &test, |_, _| Ok(())).unwrap();
    c.save(&path).unwrap();
    let mut resumed = Trainer::<f32>::load(&path).unwrap();
    assert_eq!(resumed.state.epoch, 2);
    resumed.cfg.epochs = 5;
    let tail = strip_time(resumed.run(&train, &test, |_, _| Ok(())).unwrap());
    assert_eq!(tail, ha[2..]);
    resumed.cfg.epochs = 2;
    let mut full = a.to_checkpoint();
    let mut res = resumed.to_checkpoint();
    full.header.set("epochs", 0);
    res.header.set("epochs", 0);
    assert_eq!(res, full);

    let mut other = trainer(8);
    let ho = strip_time(other.run(&train, &test, |_, _| Ok(())).unwrap());
    assert_ne!(ho, ha);
}

#[test]
fn corrupted_or_mismatched_checkpoints_are_rejected() {
    let t = trainer(1);
    let bytes = t.to_checkpoint().encode();
    assert!(Checkpoint::<f32>::decode(&bytes).is_ok());
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x10;
    let err = Checkpoint::<f32>::decode(&flipped).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(Checkpoint::<f32>::decode(&bytes[..bytes.len() - 3]).is_err());
    assert!(
        Checkpoint::<f64>::decode(&bytes).is_err(),
        "element width is checked"
    );

    let mut ck = t.to_checkpoint();
    ck.tensors.pop();
    assert!(Trainer::<f32>::from_checkpoint(&ck).is_err());
}
