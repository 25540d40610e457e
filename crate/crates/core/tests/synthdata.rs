use cfsim::evalviz::ncc;
use cfsim::synthdata::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn blob(center: &[f64], magnitude: f64, width: f64) -> BlobSpec {
    BlobSpec {
        center: center.to_vec(),
        magnitude,
        width,
        role: BlobRole::Pattern,
    }
}

#[test]
fn centered_unit_blob_peaks_at_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let img = gen_gaussian_image(&[blob(&[16.0, 16.0], 1.0, 3.0)], 0.0, &[32, 32], &mut rng).unwrap();
    assert_eq!(img.data()[16 * 32 + 16], 1.0);
    let vol = gen_gaussian_image(&[blob(&[16.0, 16.0, 16.0], 4.5, 3.0)], 0.0, &[32, 32, 32], &mut rng).unwrap();
    assert_eq!(vol.data()[16 * 1024 + 16 * 32 + 16], 4.5);
}

#[test]
fn noisy_image_reproduces_closed_form_oracle() {
    let blobs = [
        blob(&[7.3, 22.1], 2.5, 3.0),
        blob(&[20.0, 9.6], 6.1, 3.0),
        blob(&[5.0, 5.0], 1.2, 2.0),
    ];
    let img = gen_gaussian_image(&blobs, 0.002, &[32, 32], &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let noise = Normal::new(0.0, 0.002).unwrap();
    for r in 0..32 {
        for c in 0..32 {
            let clean: f64 = blobs
                .iter()
                .map(|b| {
                    let d2 = (r as f64 - b.center[0]).powi(2) + (c as f64 - b.center[1]).powi(2);
                    b.magnitude * (-d2 / (2.0 * b.width * b.width)).exp()
                })
                .sum();
            let want = clean + noise.sample(&mut rng);
            assert!((img.data()[r * 32 + c] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn default_dataset_size_and_split() {
    let p = DatasetParams::default_2d(0);
    let data = gen_from_params(&p).unwrap();
    assert_eq!(data.samples.len(), 1024);
    for g in [Group::Control, Group::Case] {
        assert_eq!(data.indices(Split::Train, Some(g)).len(), 410);
        assert_eq!(data.indices(Split::Test, Some(g)).len(), 102);
    }
    assert!(data.samples.iter().all(|s| s.pixels.shape() == [32, 32]));
    let blobs = data.samples[0].blobs.as_ref().unwrap();
    assert_eq!(blobs.len(), 4);
}

#[test]
fn odd_group_sizes_round_train_count_up() {
    let data = gen_dataset(7, &[16, 16], 1).unwrap();
    assert_eq!(data.indices(Split::Train, Some(Group::Case)).len(), 6);
    assert_eq!(train_count(7), 6);
}

#[test]
fn rejects_bad_parameters() {
    assert!(gen_dataset(1, &[32, 32], 0).is_err());
    assert!(gen_dataset(4, &[31, 32], 0).is_err());
    assert!(gen_dataset(4, &[32, 32, 32], 0).is_err());
    assert!(gen_dataset_3d(4, &[32, 32], 0).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(gen_gaussian_image(&[blob(&[40.0, 1.0], 1.0, 3.0)], 0.0, &[32, 32], &mut rng).is_err());
    assert!(gen_gaussian_image(&[blob(&[4.0, 1.0], 1.0, 3.0)], -1.0, &[32, 32], &mut rng).is_err());
}

fn blocks_of(b: &BlobSpec, shape: &[usize]) -> Vec<usize> {
    b.center
        .iter()
        .zip(shape)
        .map(|(&c, &n)| (c >= (n / 2) as f64) as usize)
        .collect()
}

#[test]
fn blobs_sit_in_the_central_region_of_their_blocks() {
    for data in [gen_dataset(50, &[32, 32], 3).unwrap(), gen_dataset_3d(10, &[16, 16, 16], 3).unwrap()] {
        let shape = data.shape().to_vec();
        let layout = block_layout(shape.len()).unwrap();
        for s in &data.samples {
            for (b, (block, role)) in s.blobs.as_ref().unwrap().iter().zip(&layout) {
                assert_eq!(&blocks_of(b, &shape), block);
                assert_eq!(b.role, *role);
                for (&c, &n) in b.center.iter().zip(&shape) {
                    let h = (n / 2) as f64;
                    let off = c % h;
                    assert!(off >= h / 4.0 && off < 3.0 * h / 4.0);
                }
            }
        }
    }
}

#[test]
fn off_diagonal_blocks_carry_the_pattern() {
    let roles: Vec<_> = block_layout(2).unwrap();
    let pattern: Vec<_> = roles.iter().filter(|(_, r)| *r == BlobRole::Pattern).map(|(b, _)| b.clone()).collect();
    assert_eq!(pattern, vec![vec![0, 1], vec![1, 0]]);
}

fn mean_sem(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

#[test]
fn magnitude_statistics_match_the_uniform_means() {
    let data = gen_from_params(&DatasetParams {
        n_per_group: 5000,
        shape: vec![8, 8],
        noise_sd: 0.0,
        ..DatasetParams::default_2d(11)
    })
    .unwrap();
    let collect = |group: Option<Group>, role: BlobRole| -> Vec<f64> {
        data.samples
            .iter()
            .filter(|s| group.is_none_or(|g| s.group == g))
            .flat_map(|s| s.blobs.as_ref().unwrap().iter().filter(|b| b.role == role).map(|b| b.magnitude))
            .collect()
    };
    for (group, role, want) in [
        (Some(Group::Control), BlobRole::Pattern, 3.0),
        (Some(Group::Case), BlobRole::Pattern, 6.0),
        (None, BlobRole::Nuisance, 3.5),
    ] {
        let v = collect(group, role);
        assert!(v.len() >= 10_000);
        let (m, se) = mean_sem(&v);
        assert!((m - want).abs() < 3.0 * se, "{group:?} {role:?}: {m} ± {se}");
    }
    let lo = collect(Some(Group::Control), BlobRole::Pattern);
    assert!(lo.iter().all(|&m| (1.0..5.0).contains(&m)));
    let hi = collect(Some(Group::Case), BlobRole::Pattern);
    assert!(hi.iter().all(|&m| (4.0..8.0).contains(&m)));
}

#[test]
fn ground_truth_pattern_properties() {
    let data = gen_dataset(3, &[32, 32], 5).unwrap();
    for s in &data.samples {
        let gt = ground_truth_pattern(s).unwrap();
        let blobs = s.blobs.as_ref().unwrap();
        let pattern: Vec<&BlobSpec> = blobs.iter().filter(|b| b.role == BlobRole::Pattern).collect();
        for d in blobs.iter().filter(|b| b.role == BlobRole::Nuisance) {
            let (r, c) = (d.center[0].round() as usize, d.center[1].round() as usize);
            let dist = |b: &BlobSpec| ((r as f64 - b.center[0]).powi(2) + (c as f64 - b.center[1]).powi(2)).sqrt();
            if pattern.iter().all(|b| dist(b) > 4.0 * b.width + 1.0) {
                assert!(gt.data()[r * 32 + c] < 0.0004);
            }
        }
        let scaled: Vec<f64> = gt.data().iter().map(|v| 5.0 * v + 2.0).collect();
        assert!((ncc(gt.data(), &scaled).unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn ground_truth_peaks_at_integer_centers() {
    let sample = ImageSample {
        pixels: cfsim_tensor::Tensor::zeros(&[32, 32]),
        group: Group::Case,
        subject_id: 0,
        blobs: Some(vec![
            blob(&[5.0, 21.0], 7.0, 3.0),
            blob(&[24.0, 8.0], 7.0, 3.0),
            BlobSpec {
                role: BlobRole::Nuisance,
                ..blob(&[6.0, 6.0], 3.0, 3.0)
            },
        ]),
    };
    let gt = ground_truth_pattern(&sample).unwrap();
    assert!((gt.data()[5 * 32 + 21] - 1.0).abs() < 1e-9);
    assert!((gt.data()[24 * 32 + 8] - 1.0).abs() < 1e-9);
    let no_meta = ImageSample { blobs: None, ..sample };
    assert!(ground_truth_pattern(&no_meta).is_err());
}

#[test]
fn group_mean_difference_3d_is_local_to_pattern_blobs() {
    let width = DEFAULT_BLOB_WIDTH;
    let data = gen_from_params(&DatasetParams {
        n_per_group: 500,
        shape: vec![32, 32, 32],
        noise_sd: 0.0,
        blob_width: width,
        seed: 8,
    })
    .unwrap();
    let p = 32 * 32 * 32;
    let mut diff = vec![0.0; p];
    for s in &data.samples {
        let sign = if s.group == Group::Case { 1.0 } else { -1.0 };
        for (d, &v) in diff.iter_mut().zip(s.pixels.data()) {
            *d += sign * v as f64 / 500.0;
        }
    }
    // distance from a voxel to the region where pattern centers can fall
    let boxes: Vec<Vec<usize>> = block_layout(3)
        .unwrap()
        .into_iter()
        .filter(|(_, r)| *r == BlobRole::Pattern)
        .map(|(b, _)| b)
        .collect();
    let dist = |coord: [usize; 3]| -> f64 {
        boxes
            .iter()
            .map(|b| {
                coord
                    .iter()
                    .zip(b)
                    .map(|(&c, &bb)| {
                        let (lo, hi) = (bb as f64 * 16.0 + 4.0, bb as f64 * 16.0 + 12.0);
                        let c = c as f64;
                        (lo - c).max(c - hi).max(0.0).powi(2)
                    })
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(f64::MAX, f64::min)
    };
    let (mut near, mut far) = (0.0f64, 0.0f64);
    for (i, &d) in diff.iter().enumerate() {
        let coord = [i / 1024, (i / 32) % 32, i % 32];
        if dist(coord) > 2.0 * width {
            far = far.max(d.abs());
        } else {
            near = near.max(d);
        }
    }
    assert!(near > 1.0, "{near}");
    assert!(far < 0.15 * near, "{far} vs {near}");
}

#[test]
fn save_load_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for data in [gen_dataset(6, &[32, 32], 2).unwrap(), gen_dataset_3d(3, &[32, 32, 32], 2).unwrap()] {
        let path = dir.path().join(format!("d{}", data.shape().len()));
        data.save(&path).unwrap();
        let back = SyntheticDataset::load(&path).unwrap();
        assert_eq!(back, data);
    }
}

#[test]
fn permuted_labels_keep_group_sizes() {
    let data = gen_dataset(20, &[16, 16], 2).unwrap();
    let perm = data.with_permuted_labels(9);
    let cases = perm.samples.iter().filter(|s| s.group == Group::Case).count();
    assert_eq!(cases, 20);
    assert_ne!(perm.labels(&(0..40).collect::<Vec<_>>()), data.labels(&(0..40).collect::<Vec<_>>()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn superposition_holds(seed in 0u64..1000, n in 1usize..5) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blobs: Vec<BlobSpec> = (0..n)
            .map(|_| blob(&[rng.random_range(0.0..31.0), rng.random_range(0.0..31.0)], rng.random_range(0.1..8.0), rng.random_range(0.5..5.0)))
            .collect();
        let all = render_blobs(&blobs, &[32, 32]);
        let mut sum = vec![0.0; 1024];
        for b in &blobs {
            for (s, v) in sum.iter_mut().zip(render_blobs(std::slice::from_ref(b), &[32, 32]).data()) {
                *s += v;
            }
        }
        for (a, b) in all.data().iter().zip(&sum) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn generation_is_deterministic(seed in 0u64..1000) {
        let a = gen_dataset(3, &[16, 16], seed).unwrap();
        let b = gen_dataset(3, &[16, 16], seed).unwrap();
        prop_assert_eq!(a, b);
    }
}
