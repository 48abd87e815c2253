use picnet_core::data::*;
use picnet_core::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_spec(seed: u64, difficulty: Difficulty) -> SynthSpec {
    SynthSpec {
        seed,
        classes: 4,
        height: 48,
        width: 48,
        bands: 12,
        aux_channels: 2,
        difficulty,
        train_per_class: 60,
        test_per_class: 60,
    }
}

#[test]
fn bundle_round_trips_bit_exactly() {
    let b = synth_generate(&small_spec(3, Difficulty::Easy)).unwrap();
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    save_bundle(&b, d1.path()).unwrap();
    let loaded = load_bundle(d1.path()).unwrap();
    assert_eq!(loaded, b);
    save_bundle(&loaded, d2.path()).unwrap();
    for (a, c) in bundle_files(d1.path()).iter().zip(bundle_files(d2.path())) {
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(c).unwrap(), "{}", a.display());
    }
}

#[test]
fn label_above_class_count_is_data_error() {
    let b = synth_generate(&small_spec(1, Difficulty::Easy)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_bundle(&b, dir.path()).unwrap();
    let path = dir.path().join("labels_test.bin");
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0..4].copy_from_slice(&5i32.to_le_bytes());
    std::fs::write(&path, bytes).unwrap();
    let err = load_bundle(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Data(_)), "{err}");
    assert!(err.to_string().contains("labels_test.bin"), "{err}");
}

#[test]
fn missing_file_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_bundle(dir.path()).unwrap_err();
    assert!(err.to_string().contains("meta.json"), "{err}");
}

#[test]
fn mismatched_aux_grid_is_resampled() {
    let mut b = synth_generate(&SynthSpec {
        height: 20,
        width: 20,
        train_per_class: 5,
        test_per_class: 5,
        ..small_spec(2, Difficulty::Easy)
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let big: Vec<f64> = (0..2 * 43 * 43).map(|_| rng.random::<f32>() as f64).collect();
    let big = Tensor::new(&[2, 43, 43], big).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_bundle(&b, dir.path()).unwrap();
    let bytes: Vec<u8> = big.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    std::fs::write(dir.path().join("aux.bin"), bytes).unwrap();
    b.meta.aux_height = Some(43);
    b.meta.aux_width = Some(43);
    std::fs::write(dir.path().join("meta.json"), serde_json::to_vec(&b.meta).unwrap()).unwrap();

    let loaded = load_bundle(dir.path()).unwrap();
    assert_eq!(loaded.aux.shape(), &[2, 20, 20]);
    for ch in 0..2 {
        for i in 0..20 {
            for j in 0..20 {
                let (si, sj) = ((2 * i + 1) * 43 / 40, (2 * j + 1) * 43 / 40);
                assert_eq!(
                    loaded.aux.data()[(ch * 20 + i) * 20 + j],
                    big.data()[(ch * 43 + si) * 43 + sj]
                );
            }
        }
    }
}

#[test]
fn resample_examples() {
    let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(resample_nn(&x, 2, 2).unwrap(), x);
    let up = resample_nn(&x, 4, 4).unwrap();
    #[rustfmt::skip]
    let expected = vec![
        1.0, 1.0, 2.0, 2.0,
        1.0, 1.0, 2.0, 2.0,
        3.0, 3.0, 4.0, 4.0,
        3.0, 3.0, 4.0, 4.0,
    ];
    assert_eq!(up.data(), expected.as_slice());
    let one = Tensor::new(&[1, 1, 1], vec![7.0]).unwrap();
    assert!(resample_nn(&one, 3, 5).unwrap().data().iter().all(|&v| v == 7.0));
}

#[test]
fn normalize_examples() {
    let x = Tensor::new(&[2, 1, 2], vec![2.0, 4.0, 5.0, 5.0]).unwrap();
    assert_eq!(normalize(&x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
}

/// Cyclic Jacobi eigen-solver for symmetric matrices.
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j].powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vkp, vkq) = (row[p], row[q]);
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let vals = (0..n).map(|i| a[i][i]).collect();
    let vecs = (0..n).map(|j| (0..n).map(|i| v[i][j]).collect()).collect();
    (vals, vecs)
}

fn random_cube(seed: u64, bands: usize, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(&[bands, h, w], -1.0, 2.0, &mut rng)
}

#[test]
fn pca_matches_jacobi_oracle() {
    let x = random_cube(4, 6, 8, 8);
    let n = 64;
    let d = x.data();
    let mean: Vec<f64> = (0..6).map(|b| d[b * n..(b + 1) * n].iter().sum::<f64>() / n as f64).collect();
    let cov: Vec<Vec<f64>> = (0..6)
        .map(|i| {
            (0..6)
                .map(|j| (0..n).map(|p| (d[i * n + p] - mean[i]) * (d[j * n + p] - mean[j])).sum::<f64>() / n as f64)
                .collect()
        })
        .collect();
    let (vals, vecs) = jacobi_eigen(cov);
    let mut order: Vec<usize> = (0..6).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));

    let pca = pca_fit(&x, 6).unwrap();
    let scores = pca_apply(&x, &pca).unwrap();
    for (k, &idx) in order.iter().enumerate() {
        assert!((pca.eigenvalues[k] - vals[idx]).abs() < 1e-10);
        let oracle: Vec<f64> = (0..n)
            .map(|p| (0..6).map(|b| vecs[idx][b] * (d[b * n + p] - mean[b])).sum())
            .collect();
        let ours = &scores.data()[k * n..(k + 1) * n];
        let sign = if ours.iter().zip(&oracle).map(|(a, b)| a * b).sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
        for (a, b) in ours.iter().zip(&oracle) {
            assert!((a - sign * b).abs() < 1e-6);
        }
        let comp = pca.component(k);
        let lead = comp.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        assert!(lead > 0.0);
    }
}

#[test]
fn pca_reconstruction_exact_cases() {
    let x = random_cube(5, 5, 6, 7);
    let full = pca_fit(&x, 5).unwrap();
    let back = pca_inverse(&pca_apply(&x, &full).unwrap(), &full).unwrap();
    assert!(back.max_abs_diff(&x) < 1e-8);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let basis = Tensor::uniform(&[2, 7], -1.0, 1.0, &mut rng);
    let coef = Tensor::uniform(&[2, 30], -1.0, 1.0, &mut rng);
    let mut data = vec![0.0; 7 * 30];
    for b in 0..7 {
        for p in 0..30 {
            data[b * 30 + p] = 0.3 * b as f64 + (0..2).map(|r| basis.data()[r * 7 + b] * coef.data()[r * 30 + p]).sum::<f64>();
        }
    }
    let low_rank = Tensor::new(&[7, 5, 6], data).unwrap();
    let pca = pca_fit(&low_rank, 2).unwrap();
    let back = pca_inverse(&pca_apply(&low_rank, &pca).unwrap(), &pca).unwrap();
    assert!(back.max_abs_diff(&low_rank) < 1e-8);

    assert!(matches!(pca_fit(&x, 6), Err(Error::Config(_))));
}

/// Mirror-padded crop written from scratch: build the whole padded plane,
/// then slice it.
fn padded_crop(plane: &[f64], h: usize, w: usize, r: usize, c: usize, k: usize) -> Vec<f64> {
    let p = k / 2;
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let mut padded = vec![0.0; ph * pw];
    for i in 0..ph {
        for j in 0..pw {
            let mut si = i as i64 - p as i64;
            let mut sj = j as i64 - p as i64;
            if si < 0 { si = -si; }
            if sj < 0 { sj = -sj; }
            if si >= h as i64 { si = 2 * (h as i64 - 1) - si; }
            if sj >= w as i64 { sj = 2 * (w as i64 - 1) - sj; }
            padded[i * pw + j] = plane[si as usize * w + sj as usize];
        }
    }
    (0..k).flat_map(|i| (0..k).map(move |j| (i, j))).map(|(i, j)| padded[(r + i) * pw + c + j]).collect()
}

#[test]
fn border_patches_match_mirror_oracle() {
    let b = synth_generate(&small_spec(7, Difficulty::Easy)).unwrap();
    let (h, w) = (b.height(), b.width());
    for k in [4, 8, 14] {
        let centers = [(0, 0), (0, w - 1), (h - 1, 3), (h - 1, w - 1), (5, 1), (20, 20)];
        let batch = patches_at(&b, &centers, k).unwrap();
        let bands = b.hsi.shape()[0];
        for (i, &(r, c)) in centers.iter().enumerate() {
            for band in [0, bands - 1] {
                let plane = &b.hsi.data()[band * h * w..(band + 1) * h * w];
                let got_start = ((i * bands) + band) * k * k;
                assert_eq!(&batch.x_h.data()[got_start..got_start + k * k], padded_crop(plane, h, w, r, c, k).as_slice());
            }
        }
    }
}

#[test]
fn single_labeled_pixel_gives_single_patch() {
    let mut b = synth_generate(&SynthSpec {
        height: 20,
        width: 20,
        train_per_class: 5,
        test_per_class: 5,
        ..small_spec(8, Difficulty::Easy)
    })
    .unwrap();
    b.labels_train = LabelMap::zeros(20, 20);
    b.labels_test = LabelMap::zeros(20, 20);
    b.labels_train.set(10, 10, 3);
    let batches: Vec<PatchBatch> = extract_patches(&b, Split::Train, 14, 8, Some(1)).unwrap().collect();
    assert_eq!(batches.len(), 1);
    assert_eq!(batches[0].labels, vec![2]);
    let center = (7 * 14) + 7;
    assert_eq!(batches[0].x_h.data()[center], b.hsi.data()[10 * 20 + 10]);
    assert!(matches!(extract_patches(&b, Split::Test, 14, 8, None), Err(Error::Data(_))));
}

#[test]
fn patch_counts_match_label_counts() {
    let b = synth_generate(&small_spec(9, Difficulty::Easy)).unwrap();
    for split in [Split::Train, Split::Test] {
        let n: usize = extract_patches(&b, split, 8, 64, Some(3)).unwrap().map(|p| p.len()).sum();
        assert_eq!(n, b.labels(split).labeled_count());
    }
}

#[test]
fn synth_is_deterministic_and_valid() {
    let a = synth_generate(&small_spec(11, Difficulty::Complementary)).unwrap();
    let b = synth_generate(&small_spec(11, Difficulty::Complementary)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, synth_generate(&small_spec(12, Difficulty::Complementary)).unwrap());
    assert_eq!(a.labels_train.histogram(4), vec![60; 4]);
    assert_eq!(a.labels_test.histogram(4), vec![60; 4]);
    assert!(matches!(
        synth_generate(&SynthSpec { classes: 1, ..small_spec(0, Difficulty::Easy) }),
        Err(Error::Config(_))
    ));
}

/// Nearest-centroid accuracy on the test split using per-pixel features
/// taken from the chosen rasters.
fn centroid_oa(b: &DatasetBundle, use_hsi: bool, use_aux: bool) -> f64 {
    let (h, w) = (b.height(), b.width());
    let n = h * w;
    let feat = |p: usize| -> Vec<f64> {
        let mut f = Vec::new();
        if use_hsi {
            f.extend((0..b.hsi.shape()[0]).map(|c| b.hsi.data()[c * n + p]));
        }
        if use_aux {
            f.extend((0..b.aux.shape()[0]).map(|c| b.aux.data()[c * n + p]));
        }
        f
    };
    let k = b.n_classes();
    let dim = feat(0).len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for p in 0..n {
        let l = b.labels_train.data[p] as usize;
        if l > 0 {
            counts[l - 1] += 1;
            for (s, v) in sums[l - 1].iter_mut().zip(feat(p)) {
                *s += v;
            }
        }
    }
    let centroids: Vec<Vec<f64>> = sums.iter().zip(&counts).map(|(s, &c)| s.iter().map(|v| v / c as f64).collect()).collect();
    let (mut right, mut total) = (0, 0);
    for p in 0..n {
        let l = b.labels_test.data[p] as usize;
        if l == 0 {
            continue;
        }
        let f = feat(p);
        let best = (0..k)
            .min_by(|&a, &c| {
                let da: f64 = centroids[a].iter().zip(&f).map(|(x, y)| (x - y).powi(2)).sum();
                let dc: f64 = centroids[c].iter().zip(&f).map(|(x, y)| (x - y).powi(2)).sum();
                da.total_cmp(&dc)
            })
            .unwrap();
        right += (best + 1 == l) as usize;
        total += 1;
    }
    right as f64 / total as f64
}

#[test]
fn easy_bundle_is_centroid_separable() {
    for seed in 0..3 {
        let b = synth_generate(&SynthSpec { classes: 2, ..small_spec(seed, Difficulty::Easy) }).unwrap();
        let oa = centroid_oa(&b, true, true);
        assert!(oa >= 0.95, "seed {seed}: {oa}");
    }
}

#[test]
fn complementary_bundle_caps_single_modalities() {
    for seed in 0..3 {
        let spec = small_spec(seed, Difficulty::Complementary);
        let b = synth_generate(&spec).unwrap();
        let k = spec.classes as f64;
        let hsi_ceiling = 1.0 - spec.hidden_in_hsi().len() as f64 / k * 0.5 + 0.05;
        let aux_ceiling = 1.0 - spec.hidden_in_aux().len() as f64 / k * 0.5 + 0.05;
        let (oa_h, oa_x, oa_both) = (centroid_oa(&b, true, false), centroid_oa(&b, false, true), centroid_oa(&b, true, true));
        assert!(oa_h <= hsi_ceiling, "seed {seed}: hsi {oa_h} > {hsi_ceiling}");
        assert!(oa_x <= aux_ceiling, "seed {seed}: aux {oa_x} > {aux_ceiling}");
        assert!(oa_both > oa_h.max(oa_x), "seed {seed}: fused {oa_both}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn resample_only_copies_input_values(c in 1usize..3, h in 1usize..7, w in 1usize..7, oh in 1usize..12, ow in 1usize..12, seed in 0u64..1000) {
        let x = random_cube(seed, c, h, w);
        let y = resample_nn(&x, oh, ow).unwrap();
        prop_assert_eq!(y.shape(), &[c, oh, ow]);
        for v in y.data() {
            prop_assert!(x.data().contains(v));
        }
    }

    #[test]
    fn normalize_ignores_positive_affine_maps(a in 0.1f64..10.0, shift in -5.0f64..5.0, seed in 0u64..1000) {
        let x = random_cube(seed, 3, 4, 5);
        let y = Tensor::new(x.shape(), x.data().iter().map(|v| a * v + shift).collect()).unwrap();
        prop_assert!(normalize(&x).unwrap().max_abs_diff(&normalize(&y).unwrap()) < 1e-12);
    }

    #[test]
    fn pca_reconstruction_is_rank_optimal(n in 1usize..6, seed in 0u64..1000) {
        let x = random_cube(seed, 6, 5, 5);
        let pca = pca_fit(&x, n).unwrap();
        let all = pca_fit(&x, 6).unwrap();
        let back = pca_inverse(&pca_apply(&x, &pca).unwrap(), &pca).unwrap();
        let err: f64 = back.data().iter().zip(x.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 25.0;
        let bound: f64 = all.eigenvalues[n..].iter().sum();
        prop_assert!((err - bound).abs() < 1e-9 * (1.0 + bound));
    }

    #[test]
    fn shuffled_stream_is_a_permutation(seed in 0u64..10_000, batch in 1usize..50) {
        let b = synth_generate(&SynthSpec { train_per_class: 10, test_per_class: 10, ..small_spec(1, Difficulty::Easy) }).unwrap();
        let mut plain: Vec<(usize, usize)> = extract_patches(&b, Split::Train, 4, batch, None).unwrap().flat_map(|p| p.centers).collect();
        let mut shuffled: Vec<(usize, usize)> = extract_patches(&b, Split::Train, 4, batch, Some(seed)).unwrap().flat_map(|p| p.centers).collect();
        plain.sort_unstable();
        shuffled.sort_unstable();
        prop_assert_eq!(plain, shuffled);
    }
}
