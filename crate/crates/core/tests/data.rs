mod common;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use hyperaug::autodiff::{backward, Tape, Tensor};
use hyperaug::data::{
    baseline_augment, epoch_batches, load_cifar10_binary, load_mnist_dir, load_mnist_idx, parse_cifar10_binary,
    parse_idx_images, parse_idx_labels, random_flip, split, split_indices, synth_dataset, DatasetKind, SplitSpec,
};
use hyperaug::models::{error_rate, forward, loss_ce, ModelSpec};
use hyperaug::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bundled() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-subset")
}

fn idx_images(n: u32, rows: u32, cols: u32, body: &[u8]) -> Vec<u8> {
    let mut v = vec![0, 0, 8, 3];
    for d in [n, rows, cols] {
        v.extend_from_slice(&d.to_be_bytes());
    }
    v.extend_from_slice(body);
    v
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut v = vec![0, 0, 8, 1];
    v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    v.extend_from_slice(labels);
    v
}

#[test]
fn bundled_mnist_subset_matches_its_headers() {
    let dir = bundled();
    for (train, n) in [(true, 4000usize), (false, 1000)] {
        let ds = load_mnist_dir(&dir, train).unwrap();
        assert_eq!(ds.len(), n);
        assert_eq!(ds.shape, [1, 28, 28]);
        assert_eq!(ds.num_classes, 10);
        // file length arithmetic: 16-byte header + N·784 pixels
        let prefix = if train { "train" } else { "t10k" };
        let len = std::fs::metadata(dir.join(format!("{prefix}-images-idx3-ubyte"))).unwrap().len();
        assert_eq!(len as usize, 16 + n * 784);
        let counts = (0..10).map(|c| ds.labels.iter().filter(|&&l| l == c).count());
        assert!(counts.into_iter().all(|k| k == n / 10), "stratified subset");
    }
}

#[test]
fn idx_scaling_and_errors() {
    let (n, r, c, px) = parse_idx_images(&idx_images(1, 1, 3, &[0, 128, 255])).unwrap();
    assert_eq!((n, r, c), (1, 1, 3));
    assert_eq!(px, vec![0.0, 128.0 / 255.0, 1.0]);

    match parse_idx_images(&idx_images(2, 2, 2, &[1, 2, 3, 4, 5])) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 21),
        other => panic!("{other:?}"),
    }
    let mut bad = idx_images(1, 1, 1, &[0]);
    bad[3] = 1;
    assert!(matches!(parse_idx_images(&bad), Err(Error::Format { offset: 0, .. })));
    assert!(matches!(parse_idx_images(&[0, 0, 8]), Err(Error::Format { .. })));
    assert!(matches!(parse_idx_labels(&idx_images(1, 1, 1, &[0])), Err(Error::Format { offset: 0, .. })));
    let mut short = idx_labels(&[1, 2, 3]);
    short.pop();
    assert!(matches!(parse_idx_labels(&short), Err(Error::Format { .. })));
    assert_eq!(parse_idx_labels(&idx_labels(&[7, 0, 9])).unwrap(), vec![7, 0, 9]);
}

#[test]
fn idx_loading_is_deterministic_and_checks_label_ranges() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("i"), dir.path().join("l"));
    std::fs::write(&img, idx_images(2, 2, 2, &[0, 255, 3, 4, 5, 6, 7, 8])).unwrap();
    std::fs::write(&lab, idx_labels(&[3, 9])).unwrap();
    let a = load_mnist_idx(&img, &lab).unwrap();
    assert_eq!(a, load_mnist_idx(&img, &lab).unwrap());
    assert_eq!(a.images[1], 1.0);
    std::fs::write(&lab, idx_labels(&[3, 12])).unwrap();
    assert!(load_mnist_idx(&img, &lab).is_err());
    let missing = load_mnist_idx(&dir.path().join("nope"), &lab);
    assert!(matches!(missing, Err(Error::Io { .. })));
}

fn cifar_record(label: u8, planes: [u8; 3]) -> Vec<u8> {
    let mut v = vec![label];
    for p in planes {
        v.extend(std::iter::repeat(p).take(1024));
    }
    v
}

#[test]
fn cifar_records_and_channel_order() {
    let mut bytes = cifar_record(3, [10, 20, 30]);
    bytes.extend(cifar_record(9, [255, 0, 128]));
    bytes.extend(cifar_record(0, [1, 2, 3]));
    let (images, labels) = parse_cifar10_binary(&bytes).unwrap();
    assert_eq!(labels, vec![3, 9, 0]);
    assert_eq!(images.len(), 3 * 3072);
    // red plane first, then green, then blue
    assert_eq!(images[0], 10.0 / 255.0);
    assert_eq!(images[1024], 20.0 / 255.0);
    assert_eq!(images[2048 + 1023], 30.0 / 255.0);
    assert_eq!(images[3072], 1.0);

    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("data_batch_1.bin");
    std::fs::write(&f, &bytes).unwrap();
    let ds = load_cifar10_binary(&[f.clone(), f.clone()]).unwrap();
    assert_eq!(ds.len(), 6);
    assert_eq!(ds.shape, [3, 32, 32]);

    match parse_cifar10_binary(&bytes[..bytes.len() - 1]) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 2 * 3073),
        other => panic!("{other:?}"),
    }
    let mut bad_label = cifar_record(10, [0, 0, 0]);
    bad_label.extend(cifar_record(1, [0, 0, 0]));
    assert!(matches!(parse_cifar10_binary(&bad_label), Err(Error::Format { offset: 0, .. })));
}

#[test]
fn split_is_a_deterministic_partition() {
    let spec = SplitSpec {
        validation_fraction: 0.1,
        split_seed: 4,
    };
    let (t, v) = split_indices(50_000, &spec);
    assert_eq!((t.len(), v.len()), (45_000, 5_000));
    let all: BTreeSet<usize> = t.iter().chain(&v).copied().collect();
    assert_eq!(all.len(), 50_000);
    assert_eq!(split_indices(50_000, &spec), (t.clone(), v.clone()));
    assert_ne!(split_indices(50_000, &SplitSpec { split_seed: 5, ..spec }).1, v);

    let ds = synth_dataset(200, 4, 1).unwrap();
    let (train, val) = split(&ds, &spec).unwrap();
    assert_eq!((train.len(), val.len()), (180, 20));
    let bad = SplitSpec {
        validation_fraction: 1.0,
        ..spec
    };
    assert!(matches!(split(&ds, &bad), Err(Error::Config { .. })));
}

#[test]
fn flipping_twice_with_the_same_seed_restores_the_batch() {
    let x = common::uniform(&mut common::rng(1), &[6, 3, 5, 7], 0.0, 1.0);
    let once = random_flip(&x, &mut ChaCha8Rng::seed_from_u64(9));
    let twice = random_flip(&once, &mut ChaCha8Rng::seed_from_u64(9));
    assert_eq!(twice.to_vec(), x.to_vec());
    assert_ne!(once.to_vec(), x.to_vec());
}

#[test]
fn crop_shifts_content_and_pads_with_zeros() {
    let (n, h, w) = (8usize, 10usize, 12usize);
    // distinct positive values so every output pixel can be traced back
    let vals: Vec<f64> = (0..n * h * w).map(|i| (i + 1) as f64 / (n * h * w) as f64).collect();
    let x = Tensor::new(&[n, 1, h, w], vals.clone()).unwrap();
    let out = baseline_augment(&x, DatasetKind::Digits, 3);
    assert_eq!(out.shape(), x.shape());
    assert!(!out.is_linked());
    for img in 0..n {
        let src = &vals[img * h * w..(img + 1) * h * w];
        let dst = &out.data()[img * h * w..(img + 1) * h * w];
        // recover the offset from any surviving pixel
        let (p, v) = dst.iter().enumerate().find(|(_, v)| **v > 0.0).unwrap();
        let q = src.iter().position(|s| s == v).unwrap();
        let (dy, dx) = ((q / w) as isize - (p / w) as isize, (q % w) as isize - (p % w) as isize);
        assert!(dy.abs() <= 4 && dx.abs() <= 4);
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let (sy, sx) = (y + dy, xx + dx);
                let expected = if sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize {
                    src[sy as usize * w + sx as usize]
                } else {
                    0.0
                };
                assert_eq!(dst[y as usize * w + xx as usize], expected);
            }
        }
        let zeros = dst.iter().filter(|v| **v == 0.0).count() as isize;
        let (ay, ax) = (dy.abs(), dx.abs());
        assert_eq!(zeros, ay * w as isize + ax * h as isize - ay * ax);
    }
    assert_eq!(baseline_augment(&x, DatasetKind::Natural, 3).to_vec(), baseline_augment(&x, DatasetKind::Natural, 3).to_vec());
}

#[test]
fn batches_respect_bounds_and_the_last_batch_flag() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let keep = epoch_batches(10, 4, false, &mut rng);
    assert_eq!(keep.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
    let all: BTreeSet<usize> = keep.iter().flatten().copied().collect();
    assert_eq!(all, (0..10).collect());
    let drop = epoch_batches(10, 4, true, &mut rng);
    assert_eq!(drop.len(), 2);
    assert!(drop.iter().flatten().all(|&i| i < 10));
    assert_eq!(epoch_batches(8, 4, true, &mut rng).len(), 2);
}

#[test]
fn synthetic_classes_have_distinct_centroids() {
    let ds = synth_dataset(400, 10, 2).unwrap();
    assert_eq!(ds, synth_dataset(400, 10, 2).unwrap());
    assert_ne!(ds, synth_dataset(400, 10, 3).unwrap());
    assert!(ds.images.iter().all(|v| (0.0..=1.0).contains(v)));
    let per = ds.image_len();
    let centroids: Vec<Vec<f64>> = (0..10)
        .map(|c| {
            let mut m = vec![0.0; per];
            let members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == c).collect();
            for &i in &members {
                for (a, b) in m.iter_mut().zip(&ds.images[i * per..(i + 1) * per]) {
                    *a += b / members.len() as f64;
                }
            }
            m
        })
        .collect();
    for a in 0..10 {
        for b in a + 1..10 {
            let d: f64 = centroids[a].iter().zip(&centroids[b]).map(|(x, y)| (x - y).powi(2)).sum();
            assert!(d.sqrt() > 1.0, "classes {a} and {b} too close");
        }
    }
}

#[test]
fn a_linear_model_separates_the_synthetic_classes() {
    let train = synth_dataset(500, 10, 4).unwrap();
    let test = synth_dataset(300, 10, 5).unwrap();
    let spec = ModelSpec::mlp([1, 16, 16], vec![], 10);
    let mut params = spec.init(0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _epoch in 0..20 {
        for batch in epoch_batches(train.len(), 25, false, &mut rng) {
            let tape = Tape::new();
            let leaves = params.leaves(&tape);
            let x = train.images_at(&batch);
            let loss = loss_ce(&forward(&spec, &leaves, &x).unwrap(), &train.labels_at(&batch)).unwrap();
            let grads = backward(&loss, &leaves, false).unwrap();
            let flat: Vec<f64> = params
                .flatten()
                .iter()
                .zip(hyperaug::autodiff::flatten_tensors(&grads))
                .map(|(p, g)| p - 0.1 * g)
                .collect();
            params.set_flat(&flat).unwrap();
        }
    }
    let all: Vec<usize> = (0..test.len()).collect();
    let logits = forward(&spec, &params.to_tensors(), &test.images_at(&all)).unwrap();
    let err = error_rate(&logits, &test.labels);
    assert!(err < 0.05, "test error {err}");
}
