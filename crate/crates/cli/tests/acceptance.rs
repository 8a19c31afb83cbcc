//! Acceptance suite. Runs as a plain binary so that every criterion prints
//! exactly one PASS/FAIL line; the process fails if any criterion fails.
//!
//! `cargo test -p ofnet-cli --test acceptance -- 2 4` runs only criteria 2 and 4.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use indexmap::IndexMap;
use ofnet_cli::config::{read_config, CorruptConfig, GenerateConfig, ModelConfig};
use ofnet_cli::{cmd_corrupt_test, cmd_eval, cmd_flow, cmd_generate, cmd_train, ModelSpec, CHECKPOINT_FILE};
use ofnet_core::aggregation::{
    aggregate, aggregate_window, aggregate_window_traced, cosine_similarity, cosine_weight, warp_bilinear,
    AggregationConfig, FlowCache,
};
use ofnet_core::flow::{estimate_flow, FlowField, FlowParams};
use ofnet_core::gradcheck::{self, GradCheckReport};
use ofnet_core::image::{Image, LabelMask, BLOOD_POOL, MYOCARDIUM};
use ofnet_core::metrics::{apd, area_curve, dice, extract_contours, Contour};
use ofnet_core::model::{build_network, sample_loss, NetworkConfig, Variant};
use ofnet_core::phantom::{generate_phantom, PhantomConfig, Preset};
use ofnet_core::tensor::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

// ---------------------------------------------------------------------------
// 1. Gradient integrity

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-3;

/// Scalar with a non-trivial upstream gradient for every element of `y`.
fn project(t: &mut Tape, y: Var, seed: u64) -> ofnet_core::Result<Var> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let shape = t.value(y).shape().to_vec();
    let w = t.constant(Tensor::from_fn(&shape, |_| r.gen_range(-1.0..1.0)));
    let p = mul(t, y, w)?;
    sum(t, p)
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut reports: Vec<(String, GradCheckReport)> = Vec::new();
    let mut record = |name: &str, r: ofnet_core::Result<GradCheckReport>| {
        reports.push((name.to_string(), r.map_err(|e| format!("{name}: {e}"))?));
        Ok::<(), String>(())
    };

    let conv_in = vec![random(&[2, 3, 6, 6], &mut rng), random(&[2, 3, 3, 3], &mut rng), random(&[2], &mut rng)];
    for (stride, dilation, padding) in [(1, 1, 1), (2, 1, 0), (1, 2, 2)] {
        record(
            &format!("conv2d s{stride} d{dilation}"),
            gradcheck::check(&conv_in, FD_STEP, |t, v| {
                let y = conv2d(t, v[0], v[1], v[2], stride, dilation, padding)?;
                project(t, y, 1)
            }),
        )?;
    }
    let bn_in = vec![
        random(&[3, 2, 3, 3], &mut rng),
        Tensor::from_fn(&[2], |_| rng.gen_range(0.5..1.5)),
        random(&[2], &mut rng),
    ];
    record(
        "batchnorm (batch statistics)",
        gradcheck::check(&bn_in, FD_STEP, |t, v| {
            let (y, _) = batchnorm(t, v[0], v[1], v[2], BnMode::Train)?;
            project(t, y, 2)
        }),
    )?;
    let (rm, rv) = (vec![0.1, -0.2], vec![0.8, 1.4]);
    record(
        "batchnorm (running statistics)",
        gradcheck::check(&bn_in, FD_STEP, |t, v| {
            let (y, _) = batchnorm(t, v[0], v[1], v[2], BnMode::Eval { mean: &rm, var: &rv })?;
            project(t, y, 3)
        }),
    )?;
    type Unary = fn(&mut Tape, Var) -> ofnet_core::Result<Var>;
    let x = vec![random(&[1, 3, 4, 4], &mut rng)];
    for (name, op) in [
        ("relu", relu as Unary),
        ("maxpool2", maxpool2 as Unary),
        ("upsample2", upsample2 as Unary),
        ("softmax_channels", softmax_channels as Unary),
    ] {
        record(
            name,
            gradcheck::check(&x, FD_STEP, |t, v| {
                let y = op(t, v[0])?;
                project(t, y, 4)
            }),
        )?;
    }
    let pair = vec![random(&[1, 2, 3, 3], &mut rng), random(&[1, 3, 3, 3], &mut rng)];
    record(
        "concat_channels",
        gradcheck::check(&pair, FD_STEP, |t, v| {
            let y = concat_channels(t, v[0], v[1])?;
            project(t, y, 5)
        }),
    )?;
    let same = vec![random(&[1, 2, 3, 3], &mut rng), random(&[1, 2, 3, 3], &mut rng)];
    record(
        "add, mul, sum",
        gradcheck::check(&same, FD_STEP, |t, v| {
            let a = add(t, v[0], v[1])?;
            let m = mul(t, a, v[1])?;
            project(t, m, 6)
        }),
    )?;
    let labels: Vec<u8> = (0..2 * 9).map(|_| rng.gen_range(0..3)).collect();
    let logits = vec![random(&[2, 3, 3, 3], &mut rng)];
    record(
        "cross_entropy_loss",
        gradcheck::check(&logits, FD_STEP, |t, v| cross_entropy_loss(t, v[0], &labels)),
    )?;

    let flow = FlowField {
        u: (0..36).map(|_| rng.gen_range(-1.3..1.3)).collect(),
        v: (0..36).map(|_| rng.gen_range(-1.3..1.3)).collect(),
        ..FlowField::zeros(6, 6)
    };
    let feat = vec![random(&[1, 2, 6, 6], &mut rng)];
    record(
        "warp_bilinear",
        gradcheck::check(&feat, FD_STEP, |t, v| {
            let y = warp_bilinear(t, v[0], &flow)?;
            project(t, y, 7)
        }),
    )?;
    let two = vec![random(&[1, 3, 4, 4], &mut rng), random(&[1, 3, 4, 4], &mut rng)];
    record(
        "cosine_similarity",
        gradcheck::check(&two, FD_STEP, |t, v| {
            let y = cosine_similarity(t, v[0], v[1])?;
            project(t, y, 8)
        }),
    )?;
    record(
        "cosine_weight on softmax maps",
        gradcheck::check(&two, FD_STEP, |t, v| {
            let (a, b) = (softmax_channels(t, v[0])?, softmax_channels(t, v[1])?);
            let y = cosine_weight(t, a, b)?;
            project(t, y, 9)
        }),
    )?;
    let agg_in = vec![
        random(&[1, 2, 4, 4], &mut rng),
        random(&[1, 2, 4, 4], &mut rng),
        Tensor::from_fn(&[1, 1, 4, 4], |_| rng.gen_range(0.2..1.0)),
        Tensor::from_fn(&[1, 1, 4, 4], |_| rng.gen_range(0.2..1.0)),
    ];
    record(
        "aggregate",
        gradcheck::check(&agg_in, FD_STEP, |t, v| {
            let y = aggregate(t, &v[..2], &v[2..])?;
            project(t, y, 10)
        }),
    )?;

    // Whole aggregating network, every parameter, through flow-guided
    // aggregation and the loss.
    let frames: Vec<Image> = (0..3)
        .map(|t| {
            Image::from_fn(10, 10, |x, y| {
                let (dx, dy) = (x as f64 - 4.0 - t as f64, y as f64 - 5.0);
                200.0 * (-(dx * dx + dy * dy) / 6.0).exp() + rng.gen_range(0.0..40.0)
            })
        })
        .collect();
    let label = LabelMask::from_fn(10, 10, |_, _| rng.gen_range(0..3));
    for (variant, level) in [(Variant::OfnetDilated, 0), (Variant::OfnetMaxpool, 0)] {
        let cfg = NetworkConfig {
            base_channels: 2,
            depth: 2,
            dilated_stages: vec![1],
            feature_level: level,
            ..NetworkConfig::default()
        };
        let model = build_network(&cfg, variant, 2).map_err(|e| e.to_string())?;
        let names: Vec<String> = model.params().keys().cloned().collect();
        let inputs: Vec<Tensor> = model.params().values().cloned().collect();
        let mut cache = FlowCache::new(FlowParams::default()).map_err(|e| e.to_string())?;
        cache.fill(&frames, 2).map_err(|e| e.to_string())?;
        record(
            &format!("full {} forward path", variant.name()),
            gradcheck::check(&inputs, FD_STEP, |t, v| {
                let params: IndexMap<String, Var> = names.iter().cloned().zip(v.iter().copied()).collect();
                let mut cache = cache.clone();
                sample_loss(&model, t, &params, &frames, &label, 1, 2, &mut cache)
            }),
        )?;
    }

    let elapsed = start.elapsed();
    let (worst_name, worst) = reports
        .iter()
        .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
        .expect("checks ran");
    for (name, r) in &reports {
        ensure(r.max_rel_error < FD_TOL, || format!("{name}: max relative error {:.2e}", r.max_rel_error))?;
    }
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:.1?}"))?;
    Ok(format!(
        "{} checks, worst {:.2e} ({worst_name}), {elapsed:.1?}",
        reports.len(),
        worst.max_rel_error
    ))
}

// ---------------------------------------------------------------------------
// 2. Flow oracle

fn gaussian_blob(cx: f64, cy: f64) -> Image {
    Image::from_fn(64, 64, |x, y| {
        let r2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
        20.0 + 200.0 * (-r2 / 72.0).exp()
    })
}

fn flow_oracle() -> Outcome {
    let start = Instant::now();
    let params = FlowParams::default();
    let from = gaussian_blob(32.0, 32.0);
    let support: Vec<bool> = from.data().iter().map(|&v| v - 20.0 > 20.0).collect();
    let mut worst: f64 = 0.0;
    for (dx, dy) in [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0), (2.0, 0.0), (-2.0, 0.0), (0.0, 2.0), (0.0, -2.0)] {
        let flow = estimate_flow(&from, &gaussian_blob(32.0 + dx, 32.0 + dy), &params).map_err(|e| e.to_string())?;
        let (mu, mv) = flow.mean_over(&support);
        let err = (mu - dx).hypot(mv - dy);
        ensure(err < 0.3, || format!("translation ({dx}, {dy}) recovered as ({mu:.3}, {mv:.3})"))?;
        worst = worst.max(err);
    }
    let phantom = generate_phantom(&PhantomConfig::preset(Preset::Middle, 3)).map_err(|e| e.to_string())?;
    let mut still: f64 = 0.0;
    for img in [&from, &phantom.frames[0].normalized()] {
        still = still.max(estimate_flow(img, img, &params).map_err(|e| e.to_string())?.max_abs());
    }
    ensure(still < 1e-6, || format!("zero-motion flow reaches {still:e}"))?;
    Ok(format!(
        "8 translations, worst mean error {worst:.3} px; zero motion max |flow| {still:.1e}; {:.1?}",
        start.elapsed()
    ))
}

// ---------------------------------------------------------------------------
// 3. Aggregation identities

fn textured_frames(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Vec<Image> {
    let (cx, cy) = (rng.gen_range(1.0..w as f64 - 1.0), rng.gen_range(1.0..h as f64 - 1.0));
    (0..n)
        .map(|t| {
            Image::from_fn(h, w, |x, y| {
                let (dx, dy) = (x as f64 - cx - 0.7 * t as f64, y as f64 - cy);
                150.0 * (-(dx * dx + dy * dy) / 8.0).exp() + rng.gen_range(0.0..60.0)
            })
        })
        .collect()
}

fn aggregation_identities() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut worst_static, mut worst_sum): (f64, f64) = (0.0, 0.0);
    let cases = 100;
    for case in 0..cases {
        let (h, w) = (rng.gen_range(4..10), rng.gen_range(4..10));
        let n = rng.gen_range(1..7);
        let c = rng.gen_range(1..4);
        let i = rng.gen_range(0..n);
        let frames = textured_frames(&mut rng, n, h, w);
        let feats: Vec<Tensor> = (0..n).map(|_| Tensor::from_fn(&[1, c, h, w], |_| rng.gen_range(-2.0..2.0))).collect();
        let mut cache = FlowCache::new(FlowParams::default()).map_err(|e| e.to_string())?;
        let err = |e: ofnet_core::Error| format!("case {case}: {e}");

        // k = 0: the target's own map, bit for bit.
        let mut tape = Tape::new();
        let vars: Vec<Var> = feats.iter().map(|f| tape.constant(f.clone())).collect();
        let out = aggregate_window(&mut tape, &frames, &vars, i, &AggregationConfig { k: 0 }, &mut cache).map_err(err)?;
        ensure(*tape.value(out) == feats[i], || format!("case {case}: k=0 output differs from the input map"))?;

        // Weight maps of the full window sum to one at every pixel.
        let k = rng.gen_range(1..4);
        let mut tape = Tape::new();
        let vars: Vec<Var> = feats.iter().map(|f| tape.constant(f.clone())).collect();
        let (_, maps) =
            aggregate_window_traced(&mut tape, &frames, &vars, i, &AggregationConfig { k }, &mut cache).map_err(err)?;
        for p in 0..h * w {
            let s: f64 = maps.iter().map(|m| m.values[p]).sum();
            worst_sum = worst_sum.max((s - 1.0).abs());
        }

        // Static sequence: identical frames and maps reproduce the map.
        let still = vec![frames[0].clone(); n];
        let mut static_cache = FlowCache::new(FlowParams::default()).map_err(|e| e.to_string())?;
        let mut tape = Tape::new();
        let vars: Vec<Var> = (0..n).map(|_| tape.constant(feats[0].clone())).collect();
        let out = aggregate_window(&mut tape, &still, &vars, i, &AggregationConfig { k }, &mut static_cache)
            .map_err(err)?;
        worst_static = worst_static.max(tape.value(out).max_abs_diff(&feats[0]));
    }
    ensure(worst_sum <= 1e-9, || format!("weight sums deviate from 1 by {worst_sum:e}"))?;
    ensure(worst_static <= 1e-6, || format!("static sequence changes the map by {worst_static:e}"))?;
    Ok(format!(
        "{cases} random cases: k=0 exact, static deviation {worst_static:.1e}, weight-sum deviation {worst_sum:.1e}; {:.1?}",
        start.elapsed()
    ))
}

// ---------------------------------------------------------------------------
// 4. Dilation equivalence

fn zero_inflate(w: &Tensor, d: usize) -> Tensor {
    let (co, ci, k, _) = w.dims4().unwrap();
    let ek = k + (k - 1) * (d - 1);
    let mut out = Tensor::zeros(&[co, ci, ek, ek]);
    for o in 0..co {
        for c in 0..ci {
            for ky in 0..k {
                for kx in 0..k {
                    out.data_mut()[((o * ci + c) * ek + ky * d) * ek + kx * d] = w.data()[((o * ci + c) * k + ky) * k + kx];
                }
            }
        }
    }
    out
}

fn conv(x: &Tensor, w: &Tensor, b: &Tensor, dilation: usize, padding: usize) -> ofnet_core::Result<Tensor> {
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
    let y = conv2d(&mut tape, xv, wv, bv, 1, dilation, padding)?;
    Ok(tape.value(y).clone())
}

fn dilation_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst: f64 = 0.0;
    let cases = 100;
    for _ in 0..cases {
        let (n, ci, co) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
        let (h, w) = (rng.gen_range(5..12), rng.gen_range(5..12));
        let x = random(&[n, ci, h, w], &mut rng);
        let k = random(&[co, ci, 3, 3], &mut rng);
        let b = random(&[co], &mut rng);
        let padding = rng.gen_range(0..3);
        let dilated = conv(&x, &k, &b, 2, padding).map_err(|e| e.to_string())?;
        let inflated = conv(&x, &zero_inflate(&k, 2), &b, 1, padding).map_err(|e| e.to_string())?;
        ensure(dilated.shape() == inflated.shape(), || "output extents differ".into())?;
        worst = worst.max(dilated.max_abs_diff(&inflated));
    }
    ensure(worst <= 1e-12, || format!("max difference {worst:e}"))?;
    Ok(format!("{cases} random cases, max difference {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 5. Phantom experiment

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn phantom_experiment() -> Outcome {
    let start = Instant::now();
    let configs = workspace_root().join("configs");
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = work.path();
    let s = |e: ofnet_core::Error| e.to_string();

    let train_gen: GenerateConfig = read_config(Some(&configs.join("generate_train.json"))).map_err(s)?;
    let test_gen: GenerateConfig = read_config(Some(&configs.join("generate_test.json"))).map_err(s)?;
    let base: ModelConfig = read_config(Some(&configs.join("experiment.json"))).map_err(s)?;
    ensure(train_gen.count >= 20 && test_gen.count >= 5, || "experiment needs ≥ 20 training and ≥ 5 test sequences".into())?;
    ensure(
        train_gen.size == 64 && train_gen.n_frames == 16 && test_gen.size == 64 && test_gen.n_frames == 16,
        || "experiment sequences must be 64×64 with 16 frames".into(),
    )?;
    cmd_generate(&train_gen, &root.join("train")).map_err(s)?;
    let test_dirs = cmd_generate(&test_gen, &root.join("test")).map_err(s)?;

    let mut results = BTreeMap::new();
    for variant in [Variant::Unet, Variant::OfnetDilated] {
        let cfg = ModelConfig { variant, ..base.clone() };
        let dir = root.join(variant.name());
        let t0 = Instant::now();
        cmd_train(&cfg, &root.join("train"), &dir).map_err(s)?;
        let train_time = t0.elapsed();
        let reports = cmd_eval(&dir.join(CHECKPOINT_FILE), &cfg, &root.join("test"), &root.join(format!("eval_{}", variant.name())))
            .map_err(s)?;
        let middle: Vec<f64> = reports
            .iter()
            .filter(|(_, r)| r.preset == Some(Preset::Middle))
            .map(|(_, r)| r.summary().dice_myo.mean)
            .collect();
        ensure(!middle.is_empty(), || "no middle-preset test sequence".into())?;
        let smooth = mean(reports.iter().map(|(_, r)| r.smoothness_bp));
        let gt_smooth = mean(reports.iter().map(|(_, r)| r.gt_smoothness_bp));
        results.insert(variant.name(), (cfg, dir, mean(middle), smooth, gt_smooth, train_time));
    }
    let (un_cfg, un_dir, un_dice, un_smooth, gt_smooth, un_time) = &results["unet"];
    let (of_cfg, of_dir, of_dice, of_smooth, _, of_time) = &results["ofnet_dilated"];

    let mut wins = 0;
    let mut corrupted = Vec::new();
    for (idx, seq) in test_dirs.iter().enumerate() {
        let rows = cmd_corrupt_test(
            ModelSpec { checkpoint: &of_dir.join(CHECKPOINT_FILE), config: of_cfg },
            ModelSpec { checkpoint: &un_dir.join(CHECKPOINT_FILE), config: un_cfg },
            seq,
            &CorruptConfig::default(),
            &root.join(format!("corrupt_{idx}")),
        )
        .map_err(s)?;
        let row = rows.iter().find(|r| r.corrupted).expect("one corrupted frame");
        wins += usize::from(row.dice_myo_ofnet > row.dice_myo_unet);
        corrupted.push(format!("{:.2}/{:.2}", row.dice_myo_ofnet, row.dice_myo_unet));
    }
    let elapsed = start.elapsed();
    let summary = format!(
        "myocardium dice (middle) unet {un_dice:.3}, ofnet_dilated {of_dice:.3}; blood-pool smoothness unet {un_smooth:.5}, \
         ofnet_dilated {of_smooth:.5} (ground truth {gt_smooth:.5}); corrupted frame ofnet/unet [{}] → {wins}/{} wins; \
         training {un_time:.0?} + {of_time:.0?}, total {elapsed:.0?}",
        corrupted.join(", "),
        test_dirs.len()
    );
    let mut failures = Vec::new();
    if !(*un_dice >= 0.85 && *of_dice >= 0.85) {
        failures.push("(a) Dice below 0.85");
    }
    let smoother = of_smooth <= un_smooth;
    if !smoother {
        failures.push("(b) ofnet_dilated area curves are less smooth");
    }
    if wins < 4 {
        failures.push("(c) fewer than 4 corrupted-frame wins");
    }
    if elapsed > Duration::from_secs(30 * 60) {
        failures.push("runtime above 30 min");
    }
    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{}: {summary}", failures.join("; ")))
    }
}

// ---------------------------------------------------------------------------
// 6. Metric oracles

fn random_mask(rng: &mut ChaCha8Rng) -> LabelMask {
    let (h, w) = (rng.gen_range(4..12), rng.gen_range(4..12));
    LabelMask::from_fn(h, w, |_, _| rng.gen_range(0..3))
}

/// Nested rectangles with random extents: a pool inside a myocardium block
/// with random pixels flipped, so contours are irregular but present.
fn random_ring(rng: &mut ChaCha8Rng, h: usize, w: usize) -> LabelMask {
    let (x0, y0) = (rng.gen_range(0..3), rng.gen_range(0..3));
    let (x1, y1) = (rng.gen_range(w - 3..w), rng.gen_range(h - 3..h));
    LabelMask::from_fn(h, w, |x, y| {
        let inside = (x0..=x1).contains(&x) && (y0..=y1).contains(&y);
        let core = (x0 + 2..=x1.saturating_sub(2)).contains(&x) && (y0 + 2..=y1.saturating_sub(2)).contains(&y);
        let base = if core { BLOOD_POOL } else if inside { MYOCARDIUM } else { 0 };
        if rng.gen_bool(0.1) {
            rng.gen_range(0..3)
        } else {
            base
        }
    })
}

fn brute_dice(a: &LabelMask, b: &LabelMask, cls: u8) -> f64 {
    let (h, w) = a.dims();
    let (mut both, mut na, mut nb) = (0usize, 0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            let (pa, pb) = (a.get(x, y) == cls, b.get(x, y) == cls);
            both += usize::from(pa && pb);
            na += usize::from(pa);
            nb += usize::from(pb);
        }
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    }
}

/// Distance from `p` to a closed polyline. Each edge is searched numerically:
/// the distance along a segment is convex in the segment parameter, so a
/// ternary search converges to the nearest point without any projection
/// formula.
fn searched_distance(p: (f64, f64), polyline: &[(f64, f64)]) -> f64 {
    let mut best = f64::INFINITY;
    for (idx, &a) in polyline.iter().enumerate() {
        let b = polyline[(idx + 1) % polyline.len()];
        let at = |t: f64| (p.0 - a.0 - t * (b.0 - a.0)).hypot(p.1 - a.1 - t * (b.1 - a.1));
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..200 {
            let (m1, m2) = (lo + (hi - lo) / 3.0, hi - (hi - lo) / 3.0);
            if at(m1) <= at(m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        best = best.min(at(0.0)).min(at(1.0)).min(at((lo + hi) / 2.0));
    }
    best
}

fn searched_apd(a: &Contour, b: &Contour) -> f64 {
    let directed = |from: &Contour, to: &Contour| mean(from.points.iter().map(|&p| searched_distance(p, &to.points)));
    (directed(a, b) + directed(b, a)) / 2.0
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let cases = 100;
    for case in 0..cases {
        let a = random_mask(&mut rng);
        let (h, w) = a.dims();
        let b = LabelMask::from_fn(h, w, |_, _| rng.gen_range(0..3));
        for cls in 0..3 {
            let got = dice(&a, &b, cls).map_err(|e| e.to_string())?;
            let want = brute_dice(&a, &b, cls);
            ensure(got == want, || format!("dice case {case} class {cls}: {got} vs {want}"))?;
        }
    }
    for case in 0..cases {
        let masks: Vec<LabelMask> = (0..3).map(|_| random_mask(&mut rng)).collect();
        let spacing = rng.gen_range(0.5..2.0);
        for cls in 0..3 {
            let got = area_curve(&masks, cls, spacing);
            for (m, g) in masks.iter().zip(got) {
                let (h, w) = m.dims();
                let n = (0..h * w).filter(|&p| m.get(p % w, p / w) == cls).count();
                let want = n as f64 * spacing * spacing;
                ensure(g == want, || format!("area case {case} class {cls}: {g} vs {want}"))?;
            }
        }
    }
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < cases {
        let (h, w) = (rng.gen_range(8..14), rng.gen_range(8..14));
        let (a, b) = (random_ring(&mut rng, h, w), random_ring(&mut rng, h, w));
        let (Ok((ea, pa)), Ok((eb, pb))) = (extract_contours(&a), extract_contours(&b)) else {
            continue;
        };
        for (x, y) in [(&ea, &eb), (&pa, &pb)] {
            worst = worst.max((apd(x, y) - searched_apd(x, y)).abs());
        }
        checked += 1;
    }
    ensure(worst <= 1e-6, || format!("APD differs from the searched oracle by {worst:e}"))?;
    Ok(format!(
        "{cases} cases each: Dice and area exact, APD within {worst:.1e} of a ternary-search oracle; {:.1?}",
        start.elapsed()
    ))
}

// ---------------------------------------------------------------------------
// 7. Reproducibility

fn tree_bytes(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn same_outputs(label: &str, a: &Path, b: &Path) -> Result<usize, String> {
    let (ta, tb) = (tree_bytes(a), tree_bytes(b));
    ensure(ta.keys().eq(tb.keys()), || format!("{label}: different file sets"))?;
    for (name, bytes) in &ta {
        ensure(tb[name] == *bytes, || format!("{label}: {} differs", name.display()))?;
    }
    Ok(ta.len())
}

fn reproducibility() -> Outcome {
    let start = Instant::now();
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = work.path();
    let gen = GenerateConfig {
        count: 3,
        size: 32,
        n_frames: 6,
        seed: 77,
        ..GenerateConfig::default()
    };
    let small = |variant| ModelConfig {
        variant,
        network: NetworkConfig {
            base_channels: 4,
            ..NetworkConfig::default()
        },
        train: ofnet_core::model::TrainConfig {
            epochs: 2,
            batch_size: 4,
            seed: 5,
            ..Default::default()
        },
    };
    let mut files = 0;
    let mut run_twice = |label: &str, f: &mut dyn FnMut(&Path) -> ofnet_core::Result<()>| -> Result<(), String> {
        let (a, b) = (root.join(format!("{label}_a")), root.join(format!("{label}_b")));
        f(&a).map_err(|e| format!("{label}: {e}"))?;
        f(&b).map_err(|e| format!("{label}: {e}"))?;
        files += same_outputs(label, &a, &b)?;
        Ok(())
    };
    run_twice("generate", &mut |out| cmd_generate(&gen, out).map(|_| ()))?;
    let data = root.join("generate_a");
    let seq = data.join("seq_000");
    run_twice("flow", &mut |out| cmd_flow(&seq, &FlowParams::default(), out).map(|_| ()))?;
    for v in [Variant::Unet, Variant::OfnetDilated] {
        run_twice(&format!("train_{}", v.name()), &mut |out| cmd_train(&small(v), &data, out).map(|_| ()))?;
    }
    let ckpt = |v: Variant| root.join(format!("train_{}_a", v.name())).join(CHECKPOINT_FILE);
    let (of_cfg, un_cfg) = (small(Variant::OfnetDilated), small(Variant::Unet));
    run_twice("eval", &mut |out| cmd_eval(&ckpt(Variant::OfnetDilated), &of_cfg, &data, out).map(|_| ()))?;
    run_twice("corrupt_test", &mut |out| {
        cmd_corrupt_test(
            ModelSpec { checkpoint: &ckpt(Variant::OfnetDilated), config: &of_cfg },
            ModelSpec { checkpoint: &ckpt(Variant::Unet), config: &un_cfg },
            &seq,
            &CorruptConfig::default(),
            out,
        )
        .map(|_| ())
    })
?;
    Ok(format!(
        "generate, flow, train (2 variants), eval and corrupt-test each run twice: {files} files byte-identical; {:.1?}",
        start.elapsed()
    ))
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [Criterion; 7] = [
        ("gradient integrity", gradient_integrity),
        ("flow oracle", flow_oracle),
        ("aggregation identities", aggregation_identities),
        ("dilation equivalence", dilation_equivalence),
        ("phantom experiment", phantom_experiment),
        ("metric oracles", metric_oracles),
        ("reproducibility", reproducibility),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (idx, (name, run)) in criteria.iter().enumerate() {
        let number = idx + 1;
        if !selected.is_empty() && !selected.contains(&number) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS  {number}. {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {number}. {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
