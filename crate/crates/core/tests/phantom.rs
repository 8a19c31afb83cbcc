use std::f64::consts::PI;
use std::fs;

use ofnet_core::image::{Image, LabelMask, BLOOD_POOL, MYOCARDIUM};
use ofnet_core::phantom::*;
use proptest::prelude::*;

fn quiet(preset: Preset) -> PhantomConfig {
    PhantomConfig {
        noise_sigma: 0.0,
        ..PhantomConfig::preset(preset, 11)
    }
}

#[test]
fn noiseless_ring_has_one_exact_intensity() {
    let cfg = PhantomConfig {
        background_texture: false,
        ..quiet(Preset::Middle)
    };
    let seq = generate_phantom(&cfg).unwrap();
    let expected = ((RING_INTENSITY - BACKGROUND_INTENSITY) * 255.0 / (BLOOD_INTENSITY - BACKGROUND_INTENSITY)).round();
    for (f, l) in seq.frames.iter().zip(&seq.labels) {
        for (&v, &c) in f.data().iter().zip(l.data()) {
            if c == MYOCARDIUM {
                assert_eq!(v, expected);
            }
        }
    }
}

#[test]
fn blood_pool_area_is_periodic() {
    let cfg = quiet(Preset::Middle);
    let n = cfg.n_frames as f64;
    assert_eq!(label_at(&cfg, 0.0), label_at(&cfg, n));
    assert_eq!(label_at(&cfg, 3.0).count(BLOOD_POOL), label_at(&cfg, n + 3.0).count(BLOOD_POOL));
    let seq = generate_phantom(&cfg).unwrap();
    assert_eq!(seq.labels[0], label_at(&cfg, 0.0));
}

#[test]
fn label_areas_match_disk_areas() {
    for preset in Preset::ALL {
        let cfg = quiet(preset);
        for t in 0..cfg.n_frames {
            let g = ring_geometry(&cfg, t as f64);
            let mask = label_at(&cfg, t as f64);
            let inner = mask.count(BLOOD_POOL) as f64;
            let outer = inner + mask.count(MYOCARDIUM) as f64;
            assert!((inner - PI * g.r_inner.powi(2)).abs() < 4.0 * g.r_inner, "{preset:?} t={t}");
            assert!((outer - PI * g.r_outer.powi(2)).abs() < 4.0 * g.r_outer, "{preset:?} t={t}");
        }
    }
}

#[test]
fn end_systole_is_smallest() {
    let cfg = quiet(Preset::Middle);
    let seq = generate_phantom(&cfg).unwrap();
    let areas: Vec<usize> = seq.labels.iter().map(|l| l.count(BLOOD_POOL)).collect();
    let min_at = (0..areas.len()).min_by_key(|&t| areas[t]).unwrap();
    assert_eq!(min_at, cfg.n_frames / 2);
    assert_eq!(areas.iter().max(), Some(&areas[0]));
}

fn enclosed(label: &LabelMask) -> bool {
    let (h, w) = label.dims();
    for y in 0..h {
        for x in 0..w {
            if label.get(x, y) != BLOOD_POOL {
                continue;
            }
            if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
                return false;
            }
            for (nx, ny) in [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)] {
                if label.get(nx, ny) == 0 {
                    return false;
                }
            }
        }
    }
    true
}

#[test]
fn labels_are_recoverable_by_thresholds() {
    for preset in Preset::ALL {
        let seq = generate_phantom(&quiet(preset)).unwrap();
        let mut ranges = [(f64::INFINITY, f64::NEG_INFINITY); 3];
        for (f, l) in seq.frames.iter().zip(&seq.labels) {
            assert!(enclosed(l), "{preset:?}");
            for (&v, &c) in f.data().iter().zip(l.data()) {
                let r = &mut ranges[c as usize];
                *r = (r.0.min(v), r.1.max(v));
            }
        }
        assert!(ranges[0].1 < ranges[1].0, "{preset:?}: {ranges:?}");
        assert!(ranges[1].1 < ranges[2].0, "{preset:?}: {ranges:?}");
    }
}

#[test]
fn base_preset_has_weak_sector() {
    let seq = generate_phantom(&PhantomConfig {
        background_texture: false,
        ..quiet(Preset::Base)
    })
    .unwrap();
    let ring: Vec<f64> = seq.frames[0]
        .data()
        .iter()
        .zip(seq.labels[0].data())
        .filter(|(_, &c)| c == MYOCARDIUM)
        .map(|(&v, _)| v)
        .collect();
    let distinct: std::collections::BTreeSet<u64> = ring.iter().map(|v| *v as u64).collect();
    assert_eq!(distinct.len(), 2);
}

#[test]
fn intensities_are_8_bit_integers() {
    let seq = generate_phantom(&PhantomConfig::preset(Preset::Apex, 3)).unwrap();
    seq.validate().unwrap();
    let (lo, hi) = seq
        .frames
        .iter()
        .map(Image::min_max)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |a, b| (a.0.min(b.0), a.1.max(b.1)));
    assert_eq!((lo, hi), (0.0, 255.0));
    assert!(seq.frames.iter().flat_map(|f| f.data()).all(|v| v.fract() == 0.0));
}

#[test]
fn invalid_geometry_is_rejected() {
    let mut cfg = PhantomConfig::preset(Preset::Middle, 0);
    cfg.r_inner_ed = 40.0;
    assert!(generate_phantom(&cfg).is_err());
    let mut cfg = PhantomConfig::preset(Preset::Middle, 0);
    cfg.r_inner_es = cfg.r_inner_ed + 1.0;
    assert!(generate_phantom(&cfg).is_err());
}

#[test]
fn sampled_configs_are_valid_and_varied() {
    let mut radii = Vec::new();
    for seed in 0..50 {
        for preset in Preset::ALL {
            let cfg = PhantomConfig::sampled(preset, seed);
            cfg.validate().unwrap();
            radii.push(cfg.r_inner_ed);
        }
    }
    radii.dedup();
    assert!(radii.len() > 100);
}

fn second_diff_energy(c: &[f64]) -> f64 {
    c.windows(3).map(|w| (w[2] - 2.0 * w[1] + w[0]).powi(2)).sum()
}

#[test]
fn analytic_area_curve_beats_every_swap() {
    let cfg = quiet(Preset::Middle);
    let curve: Vec<f64> = (0..cfg.n_frames)
        .map(|t| PI * ring_geometry(&cfg, t as f64).r_inner.powi(2))
        .collect();
    let base = second_diff_energy(&curve);
    for a in 0..curve.len() {
        for b in a + 1..curve.len() {
            if (curve[a] - curve[b]).abs() < 1e-9 {
                continue;
            }
            let mut p = curve.clone();
            p.swap(a, b);
            assert!(second_diff_energy(&p) > base, "swap {a},{b}");
        }
    }
}

#[test]
fn corruption_touches_only_one_frame() {
    let seq = generate_phantom(&PhantomConfig::preset(Preset::Middle, 5)).unwrap();
    for mode in [Corruption::ContrastDrop, Corruption::NoiseBurst] {
        let bad = corrupt_frame(&seq, 7, mode).unwrap();
        assert_eq!(bad.labels, seq.labels);
        for t in 0..seq.n_frames() {
            assert_eq!(bad.frames[t] == seq.frames[t], t != 7, "{mode:?} frame {t}");
        }
    }
    assert!(corrupt_frame(&seq, 16, Corruption::ContrastDrop).is_err());
}

#[test]
fn contrast_drop_shrinks_range() {
    let seq = generate_phantom(&PhantomConfig::preset(Preset::Middle, 5)).unwrap();
    let bad = corrupt_frame(&seq, 3, Corruption::ContrastDrop).unwrap();
    let (lo, hi) = seq.frames[3].min_max();
    let (blo, bhi) = bad.frames[3].min_max();
    assert!(((bhi - blo) - 0.3 * (hi - lo)).abs() <= 1.0, "{} vs {}", bhi - blo, hi - lo);

    let twice = corrupt_frame(&bad, 3, Corruption::ContrastDrop).unwrap();
    assert_eq!(twice.frames[3].dims(), bad.frames[3].dims());
    assert_ne!(twice.frames[3], bad.frames[3]);
}

#[test]
fn normalize_intensity_examples() {
    let img = Image::from_fn(3, 4, |x, y| 10.0 + (x + 4 * y) as f64 * 10.0 / 11.0);
    let n = normalize_intensity(&img);
    for (a, b) in img.data().iter().zip(n.data()) {
        assert!((b - (a - 10.0) * 25.5).abs() < 1e-9);
    }
    assert!(normalize_intensity(&Image::filled(4, 4, 9.0)).data().iter().all(|&v| v == 0.0));
}

#[test]
fn center_crop_takes_middle() {
    let img = Image::from_fn(8, 8, |x, y| (y * 8 + x) as f64);
    let c = center_crop(&img, 4).unwrap();
    assert_eq!(c.get(0, 0), img.get(2, 2));
    assert_eq!(c.get(3, 3), img.get(5, 5));
    assert!(center_crop(&img, 9).is_err());
    let m = LabelMask::from_fn(8, 8, |x, _| (x % 3) as u8);
    assert_eq!(center_crop_mask(&m, 4).unwrap().get(0, 0), 2);
}

#[test]
fn zero_rotation_is_identity() {
    let seq = generate_phantom(&PhantomConfig::preset(Preset::Middle, 2)).unwrap();
    let (img, lab) = augment_rotate(&seq.frames[0], &seq.labels[0], 0.0, 99);
    assert_eq!(img, seq.frames[0]);
    assert_eq!(lab, seq.labels[0]);
}

#[test]
fn quarter_turn_moves_x_axis_to_y_axis() {
    let mut img = Image::filled(9, 9, 0.0);
    img.data_mut()[4 * 9 + 7] = 1.0; // (x=7, y=4): right of centre
    let r = rotate_image(&img, 90.0);
    assert!((r.get(4, 7) - 1.0).abs() < 1e-12); // below centre
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let seq = generate_phantom(&PhantomConfig::preset(Preset::Base, 8)).unwrap();
    save_sequence(&seq, dir.path()).unwrap();
    let files: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(files.len(), 33);
    assert_eq!(load_sequence(dir.path()).unwrap(), seq);

    fs::remove_file(dir.path().join("label_004.pgm")).unwrap();
    let err = load_sequence(dir.path()).unwrap_err();
    assert!(err.to_string().contains("label_004.pgm"), "{err}");
}

#[test]
fn non_integer_frames_cannot_be_saved() {
    let dir = tempfile::tempdir().unwrap();
    let mut seq = generate_phantom(&PhantomConfig::preset(Preset::Apex, 1)).unwrap();
    seq.frames[0].data_mut()[0] = 1.5;
    assert!(save_sequence(&seq, dir.path()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generation_is_pure(seed in any::<u64>(), preset in prop::sample::select(Preset::ALL.to_vec())) {
        let cfg = PhantomConfig::sampled(preset, seed);
        prop_assert_eq!(generate_phantom(&cfg).unwrap(), generate_phantom(&cfg).unwrap());
    }

    #[test]
    fn rotated_labels_stay_in_class_set(seed in any::<u64>(), max in 0.0f64..180.0) {
        let seq = generate_phantom(&PhantomConfig::preset(Preset::Middle, seed)).unwrap();
        let (img, lab) = augment_rotate(&seq.frames[4], &seq.labels[4], max, seed);
        prop_assert!(lab.data().iter().all(|&c| c <= 2));
        let (lo, hi) = img.min_max();
        prop_assert!(lo >= 0.0 && hi <= 255.0);
    }
}
