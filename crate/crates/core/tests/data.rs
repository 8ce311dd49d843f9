use proptest::prelude::*;
use saff_core::data::{
    load_idx, read_idx, read_sfd, split, split_indices, synthetic, write_idx, write_sfd, zscore_fit_apply, Dataset,
    IdxArray, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, SFD_HEADER_LEN,
};
use saff_core::{Error, Tensor};

fn write(dir: &std::path::Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, bytes).unwrap();
    p
}

#[test]
fn one_image_idx_fixture_round_trips_pixels() {
    let mut img = vec![0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2];
    img.extend_from_slice(&[0, 51, 255, 102]);
    let lab = [0, 0, 8, 1, 0, 0, 0, 1, 7];
    let dir = tempfile::tempdir().unwrap();
    let ds = load_idx(&write(dir.path(), "i", &img), Some(&write(dir.path(), "l", &lab))).unwrap();
    assert_eq!(ds.images.shape(), &[1, 1, 2, 2]);
    assert_eq!(ds.images.data(), &[0.0, 0.2, 1.0, 0.4]);
    assert_eq!(ds.labels.as_deref(), Some(&[7][..]));
}

#[test]
fn idx_errors() {
    let good = write_idx(&IdxArray { dims: vec![2, 2, 2], data: vec![1; 8] });
    match read_idx(&good, IDX_LABELS_MAGIC) {
        Err(Error::Format(msg)) => assert!(msg.contains("801") && msg.contains("803"), "{msg}"),
        other => panic!("{other:?}"),
    }
    for cut in [0, 3, 7, 15, good.len() - 1] {
        assert!(matches!(read_idx(&good[..cut], IDX_IMAGES_MAGIC), Err(Error::Format(_))), "cut {cut}");
    }
    let mut long = good.clone();
    long.push(0);
    assert!(matches!(read_idx(&long, IDX_IMAGES_MAGIC), Err(Error::Format(_))));

    let dir = tempfile::tempdir().unwrap();
    let img = write(dir.path(), "i", &good);
    let lab = write(dir.path(), "l", &write_idx(&IdxArray { dims: vec![3], data: vec![0, 1, 2] }));
    assert!(matches!(load_idx(&img, Some(&lab)), Err(Error::Consistency(_))));
    assert!(load_idx(&dir.path().join("missing"), None).is_err());
}

proptest! {
    #[test]
    fn idx_write_read_is_identity(dims in prop::collection::vec(1u32..5, 1..4), seed in any::<u8>()) {
        let len: u32 = dims.iter().product();
        let data: Vec<u8> = (0..len).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
        let a = IdxArray { dims, data };
        let bytes = write_idx(&a);
        prop_assert_eq!(read_idx(&bytes, a.magic()).unwrap(), a);
    }

    #[test]
    fn splits_are_disjoint_and_complete(n in 10usize..200, seed in any::<u64>(), strat in any::<bool>()) {
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let parts = split_indices(n, Some(&labels), &[0.7, 0.2, 0.1], seed, strat).unwrap();
        let mut all: Vec<usize> = parts.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(&parts, &split_indices(n, Some(&labels), &[0.7, 0.2, 0.1], seed, strat).unwrap());
        if strat {
            for (p, f) in parts.iter().zip([0.7, 0.2, 0.1]) {
                for c in 0..3 {
                    let members = labels.iter().filter(|&&l| l == c).count() as f64;
                    let got = p.iter().filter(|&&i| labels[i] == c).count() as f64;
                    prop_assert!((got - f * members).abs() <= 1.0 + 1e-9, "class {} part {:?}", c, f);
                }
            }
        }
    }
}

#[test]
fn sfd_round_trip_and_header() {
    let images = Tensor::new(&[2, 1, 2, 3], (0..12).map(|i| i as f64 / 4.0).collect()).unwrap();
    let ds = Dataset::new("t", images, Some(vec![3, 65535])).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.sfd");
    write_sfd(&p, &ds).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    assert_eq!(&bytes[..4], b"SFD1");
    assert_eq!(bytes.len(), SFD_HEADER_LEN + 12 * 4 + 2 * 2);
    let back = read_sfd(&p).unwrap();
    assert_eq!(back.images, ds.images);
    assert_eq!(back.labels, ds.labels);

    std::fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
    assert!(matches!(read_sfd(&p), Err(Error::Format(_))));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&p, &bad).unwrap();
    assert!(matches!(read_sfd(&p), Err(Error::Format(_))));
}

#[test]
fn zscore_uses_train_statistics() {
    let mut train = Dataset::new("a", Tensor::<f64>::new(&[4, 1, 1, 2], vec![1., 3., 1., 3., 1., 3., 1., 3.]).unwrap(), None).unwrap();
    let mut test = Dataset::new("b", Tensor::new(&[1, 1, 1, 2], vec![2.0, 5.0]).unwrap(), None).unwrap();
    let norm = zscore_fit_apply(&mut train, &mut [&mut test]).unwrap();
    assert_eq!((norm.mean, norm.std), (2.0, 1.0));
    assert_eq!(test.images.data(), &[0.0, 3.0]);
    assert_eq!(test.normalization, Some(norm));

    // a second fit sees mean 0 and std 1 and leaves the data unchanged
    let before = train.images.clone();
    let again = zscore_fit_apply(&mut train, &mut []).unwrap();
    assert!(again.mean.abs() < 1e-12 && (again.std - 1.0).abs() < 1e-12);
    for (a, b) in before.data().iter().zip(train.images.data()) {
        assert!((a - b).abs() < 1e-12);
    }

    let mut flat = Dataset::new("c", Tensor::filled(&[2, 1, 2, 2], 0.5), None).unwrap();
    assert!(matches!(zscore_fit_apply(&mut flat, &mut []), Err(Error::Degenerate(_))));
}

#[test]
fn zscore_of_noisy_constant_is_standard() {
    let mut ds = synthetic(50, 2, 6, 0.5, 3).unwrap();
    ds.images = ds.images.map(|v| v + 7.0);
    zscore_fit_apply(&mut ds, &mut []).unwrap();
    let d = ds.images.data();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
    assert!(mean.abs() < 1e-9 && (std - 1.0).abs() < 1e-9);
}

#[test]
fn split_sizes_and_stratification() {
    let ds = synthetic(100, 2, 4, 0.1, 1).unwrap();
    let parts = split(&ds, &[0.9, 0.1], 5, false).unwrap();
    assert_eq!((parts[0].len(), parts[1].len()), (90, 10));
    let parts = split(&ds, &[0.5, 0.5], 5, true).unwrap();
    for p in &parts {
        let ones = p.labels.as_ref().unwrap().iter().filter(|&&l| l == 1).count();
        assert!(ones.abs_diff(p.len() / 2) <= 1);
    }
    assert!(matches!(split(&ds, &[0.999, 0.001], 5, false), Err(Error::Config(_))));
    assert!(matches!(split(&ds, &[0.5, 0.4], 5, false), Err(Error::Config(_))));
}

/// 1-nearest-centroid accuracy with centroids fitted on `train`.
fn centroid_accuracy(train: &Dataset, test: &Dataset) -> f64 {
    let k = train.n_classes();
    let d = train.images.sample_len();
    let mut c = vec![vec![0.0; d]; k];
    let mut counts = vec![0.0; k];
    for (x, &l) in train.images.samples().zip(train.labels.as_ref().unwrap()) {
        counts[l] += 1.0;
        c[l].iter_mut().zip(x).for_each(|(a, b)| *a += b);
    }
    c.iter_mut().zip(&counts).for_each(|(v, n)| v.iter_mut().for_each(|a| *a /= n));
    let hits = test
        .images
        .samples()
        .zip(test.labels.as_ref().unwrap())
        .filter(|(x, &l)| {
            let dist = |m: &Vec<f64>| m.iter().zip(x.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            (0..k).min_by(|&a, &b| dist(&c[a]).total_cmp(&dist(&c[b]))) == Some(l)
        })
        .count();
    hits as f64 / test.len() as f64
}

#[test]
fn noiseless_synthetic_is_perfectly_separable_by_centroids() {
    let ds = synthetic(200, 4, 8, 0.0, 11).unwrap();
    assert_eq!(centroid_accuracy(&ds, &ds), 1.0);
    let noisy = synthetic(400, 4, 8, 0.3, 12).unwrap();
    let parts = split(&noisy, &[0.5, 0.5], 0, true).unwrap();
    assert_eq!(centroid_accuracy(&parts[0], &parts[1]), 1.0);
}

#[test]
fn synthetic_is_balanced_and_reproducible() {
    let a = synthetic(103, 4, 8, 0.2, 4).unwrap();
    let mut counts = [0usize; 4];
    a.labels.as_ref().unwrap().iter().for_each(|&l| counts[l] += 1);
    assert!(counts.iter().all(|&c| c.abs_diff(103 / 4) <= 1));
    assert_eq!(a, synthetic(103, 4, 8, 0.2, 4).unwrap());
    assert_ne!(a, synthetic(103, 4, 8, 0.2, 5).unwrap());
    assert!(synthetic(10, 5, 8, 0.0, 0).is_err());
}
