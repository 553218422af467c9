//! Acceptance suite: one test per criterion, named `criterion_N_*`.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use cyto_core::cvt::ops::{conv2d, ConvSpec, FeatureMap};
use cyto_core::cvt::{
    count_parameters, forward_detailed, random_weights, CvTConfig, StageConfig, Variant,
};
use cyto_core::flowseg::{compute_gt_flows, follow_flows, FlowConfig};
use cyto_core::imaging::LabelMap;
use cyto_core::metrics::{binary_seg_metrics, cross_validate, roc_auc_ovr, stratified_kfold};
use cyto_core::stitch::{
    build_pose_graph, composite, detect_all, detect_features, match_pair, stitch,
    FrameSampleConfig, StitchParams, DEFAULT_MAX_CANVAS,
};
use cyto_core::style::{
    conditional_probabilities, joint_probabilities, kl_divergence, kl_gradient,
    pairwise_sq_distances, tsne, TsneConfig,
};
use cyto_core::synth::{
    add_gaussian_noise, blob_label_map, cell_texture, cut_grid, noise_image, BlobSpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn within(label: &str, start: Instant, budget: Duration) {
    let t = start.elapsed();
    println!("{label}: {t:?} (budget {budget:?})");
    assert!(t < budget, "{label} took {t:?}, budget {budget:?}");
}

/// Best IoU of every reference instance against any predicted instance.
fn best_ious(reference: &LabelMap, predicted: &LabelMap) -> Vec<f64> {
    let mut inter: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for (&r, &p) in reference.labels().iter().zip(predicted.labels()) {
        if r != 0 && p != 0 {
            *inter.entry((r, p)).or_default() += 1;
        }
    }
    let (ra, pa) = (reference.areas(), predicted.areas());
    ra.iter()
        .map(|(&r, &area_r)| {
            inter
                .range((r, 0)..=(r, u32::MAX))
                .map(|(&(_, p), &i)| i as f64 / (area_r + pa[&p] - i) as f64)
                .fold(0.0, f64::max)
        })
        .collect()
}

#[test]
fn criterion_2_flow_round_trip() {
    let start = Instant::now();
    let cfg = FlowConfig::default();
    let (mut recovered, mut total) = (0usize, 0usize);
    let (mut tp, mut fg_sum) = (0usize, 0usize);
    for seed in 0..100 {
        let m = blob_label_map(&BlobSpec::default(), seed);
        assert!((10..=30).contains(&m.instance_count()), "seed {seed}");
        let out = follow_flows(&compute_gt_flows(&m).unwrap(), &cfg);
        let ious = best_ious(&m, &out);
        recovered += ious.iter().filter(|&&v| v >= 0.9).count();
        total += ious.len();
        for (&a, &b) in m.labels().iter().zip(out.labels()) {
            tp += usize::from(a != 0 && b != 0);
            fg_sum += usize::from(a != 0) + usize::from(b != 0);
        }
    }
    let rate = recovered as f64 / total as f64;
    let dice = 2.0 * tp as f64 / fg_sum as f64;
    println!("criterion 2: recovered {recovered}/{total} = {rate:.4}, aggregate dice {dice:.5}");
    assert!(rate >= 0.95);
    assert!(dice >= 0.97);
    within("criterion 2", start, Duration::from_secs(60));
}

const TILE: usize = 160;

#[test]
fn criterion_3_stitcher_accuracy() {
    let start = Instant::now();
    let step = (TILE as f64 * 0.7).round() as usize;
    let src = cell_texture(3 * step + TILE, 3 * step + TILE, 11);
    let (tiles, offsets) = cut_grid(&src, 4, 4, TILE, 0.3);
    let frames: Vec<_> = tiles
        .iter()
        .enumerate()
        .map(|(i, f)| add_gaussian_noise(f, 2.0, 100 + i as u64))
        .collect();
    let params = StitchParams::default();
    let cfg = FrameSampleConfig::default();
    let outcome = stitch(&frames, &cfg, &params).unwrap();
    let g = &outcome.graph;
    assert!(g.rejected.is_empty(), "rejected {:?}", g.rejected);
    assert_eq!(g.anchor, 0);

    let se: f64 = offsets
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| {
            let p = g.pose(i).unwrap();
            (p[(0, 2)] - x as f64).powi(2) + (p[(1, 2)] - y as f64).powi(2)
        })
        .sum();
    let rmse = (se / offsets.len() as f64).sqrt();

    let pano = &outcome.panorama;
    let (pw, ph) = (pano.image.width(), pano.image.height());
    let (mut abs, mut n) = (0.0, 0usize);
    for y in 0..ph {
        for x in 0..pw {
            let (sx, sy) = (x as i64 + pano.origin.0, y as i64 + pano.origin.1);
            if !pano.coverage[y * pw + x]
                || sx < 0
                || sy < 0
                || sx >= src.width() as i64
                || sy >= src.height() as i64
            {
                continue;
            }
            abs += (pano.image.get(x, y, 0) as f64 - src.get(sx as usize, sy as usize, 0) as f64)
                .abs();
            n += 1;
        }
    }
    let mae = abs / n as f64;
    assert!(n as f64 > 0.95 * (src.width() * src.height()) as f64);
    println!("criterion 3: translation rmse {rmse:.4} px, panorama mae {mae:.4} levels");
    assert!(rmse < 1.0);
    assert!(mae < 2.0);

    // Appended pure-noise frame: features of the genuine frames are reused,
    // the noise frame is matched against all of them and the pose graph is
    // rebuilt, exactly as a full run over 17 frames would.
    let features = detect_all(&frames, &params.sift);
    let base: Vec<_> = g.edges.clone();
    let mut rejected = 0;
    for trial in 0..100u64 {
        let mut noise = detect_features(&noise_image(TILE, TILE, 1, 1000 + trial), &params.sift);
        noise.frame = frames.len();
        let mut matches = base.clone();
        matches.extend(
            features
                .iter()
                .filter_map(|f| match_pair(f, &noise, &params.matching)),
        );
        let graph = build_pose_graph(&matches, frames.len() + 1).unwrap();
        if graph.rejected == vec![frames.len()] {
            rejected += 1;
        }
    }
    println!("criterion 3: noise frame rejected in {rejected}/100 trials");
    assert!(rejected >= 99);

    // one full end-to-end run with the noise frame appended
    let mut with_noise = frames.clone();
    with_noise.push(noise_image(TILE, TILE, 1, 7));
    let full = stitch(&with_noise, &cfg, &params).unwrap();
    assert_eq!(full.graph.rejected, vec![frames.len()]);
    let again = composite(&frames, g, DEFAULT_MAX_CANVAS).unwrap();
    assert_eq!(again.image, pano.image);
    within("criterion 3", start, Duration::from_secs(30));
}

/// Closed-form CvT parameter count, derived by hand independently of the
/// tensor list: per stage an embedding conv `k^2 c_in D + D` plus its
/// LayerNorm `2D`, and per block `12 D^2 + 46 D` (two LayerNorms `4D`, three
/// depthwise 3x3 convs with BatchNorm `3 (9D + 2D)`, Q/K/V/out linears with
/// biases `4 (D^2 + D)`, MLP `8 D^2 + 5 D`); the last stage adds the cls
/// token `D`, then the final LayerNorm `2D` and head `C D + C`.
fn analytic_parameter_count(
    embed: [(usize, usize); 3],
    dims: [usize; 3],
    depths: [usize; 3],
    classes: usize,
) -> usize {
    let mut cin = 3;
    let mut total = 0;
    for i in 0..3 {
        let (k, d) = (embed[i].0, dims[i]);
        total += k * k * cin * d + d + 2 * d;
        total += depths[i] * (12 * d * d + 46 * d);
        cin = d;
    }
    let d3 = dims[2];
    total + d3 + 2 * d3 + classes * d3 + classes
}

#[test]
fn criterion_1_parameter_count() {
    let start = Instant::now();
    let dims = [64, 192, 384];
    let depths = [1, 2, 10];

    let original = count_parameters(&CvTConfig::new(Variant::Original13, 1000));
    let oracle = analytic_parameter_count([(7, 4), (3, 2), (3, 2)], dims, depths, 1000);
    assert_eq!(original.total, oracle);
    let rel = (original.total as f64 - 19.98e6).abs() / 19.98e6;
    println!(
        "criterion 1: original13/1000 = {} ({:.3} M, {:+.3}% vs 19.98 M); without head {} ({:.2} M)",
        original.total,
        original.total as f64 / 1e6,
        100.0 * (original.total as f64 / 19.98e6 - 1.0),
        original.without_head,
        original.without_head as f64 / 1e6
    );
    assert!(rel < 0.005);

    let table = count_parameters(&CvTConfig::new(Variant::PaperTable, 5));
    let oracle = analytic_parameter_count([(7, 4), (7, 2), (7, 2)], dims, depths, 5);
    assert_eq!(table.total, oracle);
    println!(
        "criterion 1: paper_table/5 = {} ({:.3} M) reported against the table's 19.61 M ({:+.2}%)",
        table.total,
        table.total as f64 / 1e6,
        100.0 * (table.total as f64 / 19.61e6 - 1.0)
    );
    within("criterion 1", start, Duration::from_secs(1));
}

fn naive_conv(x: &FeatureMap, w: &[f32], b: &[f32], s: &ConvSpec) -> FeatureMap {
    let (oh, ow) = s.output_size(x.height, x.width).unwrap();
    let (icg, ocg) = (s.in_channels / s.groups, s.out_channels / s.groups);
    let mut out = FeatureMap::zeros(s.out_channels, oh, ow);
    for oc in 0..s.out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b[oc] as f64;
                for ic in 0..icg {
                    for ky in 0..s.kernel {
                        for kx in 0..s.kernel {
                            let iy = (oy * s.stride + ky) as isize - s.padding as isize;
                            let ix = (ox * s.stride + kx) as isize - s.padding as isize;
                            if iy >= 0
                                && ix >= 0
                                && (iy as usize) < x.height
                                && (ix as usize) < x.width
                            {
                                let c = (oc / ocg) * icg + ic;
                                acc += w[((oc * icg + ic) * s.kernel + ky) * s.kernel + kx] as f64
                                    * x.at(c, iy as usize, ix as usize) as f64;
                            }
                        }
                    }
                }
                out.data[(oc * oh + oy) * ow + ox] = acc as f32;
            }
        }
    }
    out
}

fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
    FeatureMap {
        channels: c,
        height: h,
        width: w,
        data: (0..c * h * w)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    }
}

#[test]
fn criterion_5_cvt_forward_invariants() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    // softmax normalization over 100 random weight/input draws (reduced
    // widths keep the sweep fast; the code path is the same)
    let mut small = CvTConfig::original13();
    for (s, (d, depth, heads)) in small
        .stages
        .iter_mut()
        .zip([(16, 1, 1), (32, 1, 2), (48, 2, 3)])
    {
        *s = StageConfig {
            embed_dim: d,
            depth,
            heads,
            ..s.clone()
        };
    }
    let mut worst: f64 = 0.0;
    for draw in 0..100u64 {
        let w = random_weights(&small, 1000 + draw);
        let r = [32, 48, 64][draw as usize % 3];
        let x = random_map(&mut rng, 3, r, r);
        let p = forward_detailed(&x, &small, &w).unwrap().probs;
        assert!(p.probs.iter().all(|&v| (0.0..=1.0).contains(&v)));
        worst = worst.max((p.probs.iter().sum::<f64>() - 1.0).abs());
    }
    println!("criterion 5: worst softmax deviation over 100 draws {worst:e}");
    assert!(worst < 1e-6);

    // one set of full-size weights across three input resolutions
    let cfg = CvTConfig::original13();
    let w = random_weights(&cfg, 77);
    for r in [96, 160, 224] {
        let t = forward_detailed(&random_map(&mut rng, 3, r, r), &cfg, &w).unwrap();
        assert_eq!(t.probs.probs.len(), 5);
        assert!((t.probs.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        if r == 224 {
            assert_eq!(t.stage_shapes[0], (64, 56, 56));
        }
    }

    // optimized convolution vs direct loops on 200 random shapes
    let mut worst: f32 = 0.0;
    for case in 0..200 {
        let depthwise = case % 3 == 0;
        let groups = if depthwise { 0 } else { [1, 1, 2][case % 3] };
        let cin = if depthwise {
            rng.random_range(1..=16)
        } else {
            groups * rng.random_range(1..=8)
        };
        let groups = if depthwise { cin } else { groups };
        let cout = if depthwise {
            cin
        } else {
            groups * rng.random_range(1..=8)
        };
        let kernel = [1, 3, 5, 7][rng.random_range(0..4)];
        let spec = ConvSpec {
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride: rng.random_range(1..=4),
            padding: rng.random_range(0..=kernel / 2),
            groups,
        };
        let (h, wd) = (
            rng.random_range(kernel..=kernel + 24),
            rng.random_range(kernel..=kernel + 24),
        );
        let x = random_map(&mut rng, cin, h, wd);
        let wt: Vec<f32> = (0..spec.weight_len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let b: Vec<f32> = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = conv2d(&x, &wt, Some(&b), &spec).unwrap();
        let slow = naive_conv(&x, &wt, &b, &spec);
        let scale = slow.data.iter().fold(0f32, |m, v| m.max(v.abs()));
        let err = fast
            .data
            .iter()
            .zip(&slow.data)
            .fold(0f32, |m, (a, b)| m.max((a - b).abs()));
        worst = worst.max(err / scale);
    }
    println!("criterion 5: worst conv relative error {worst:e}");
    assert!(worst < 1e-5);
    within("criterion 5", start, Duration::from_secs(60));
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half, by enumerating every pair.
fn pairwise_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if positive[i] && !positive[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn random_probs(rng: &mut ChaCha8Rng, truth: usize, classes: usize, quantize: bool) -> Vec<f64> {
    let raw: Vec<f64> = (0..classes)
        .map(|c| {
            let v: f64 = rng.random::<f64>() + if c == truth { 0.7 } else { 0.0 };
            if quantize {
                (v * 4.0).round()
            } else {
                v
            }
        })
        .collect();
    let sum: f64 = raw.iter().sum::<f64>().max(1e-9);
    raw.iter().map(|v| v / sum).collect()
}

#[test]
fn criterion_4_metric_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..1000 {
        let (dp, dt) = match case {
            0 => (0.0, 0.0),
            1 => (0.0, 0.5),
            2 => (0.5, 0.0),
            3 => (1.0, 1.0),
            _ => (rng.random::<f64>(), rng.random::<f64>()),
        };
        let mut draw = |d: f64| -> Vec<u32> {
            (0..64 * 64)
                .map(|_| {
                    if rng.random::<f64>() < d {
                        rng.random_range(1..40)
                    } else {
                        0
                    }
                })
                .collect()
        };
        let pred = LabelMap::new(64, 64, draw(dp)).unwrap();
        let truth = LabelMap::new(64, 64, draw(dt)).unwrap();
        let m = binary_seg_metrics(&pred, &truth).unwrap();

        let (mut tp, mut tn, mut fp, mut fneg) = (0u64, 0u64, 0u64, 0u64);
        for y in 0..64 {
            for x in 0..64 {
                let (p, t) = (pred.get(x, y) != 0, truth.get(x, y) != 0);
                tp += (p && t) as u64;
                tn += (!p && !t) as u64;
                fp += (p && !t) as u64;
                fneg += (!p && t) as u64;
            }
        }
        assert_eq!(
            (m.counts.tp, m.counts.tn, m.counts.fp, m.counts.fn_),
            (tp, tn, fp, fneg)
        );
        let (tp, tn, fp, fneg) = (tp as f64, tn as f64, fp as f64, fneg as f64);
        let both_empty = tp + fp + fneg == 0.0;
        let dice = if both_empty {
            1.0
        } else {
            2.0 * tp / (2.0 * tp + fp + fneg)
        };
        let sens = if tp + fneg == 0.0 {
            if fp == 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            tp / (tp + fneg)
        };
        let spec = if tn + fp == 0.0 {
            if fneg == 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            tn / (tn + fp)
        };
        assert!((m.dice - dice).abs() <= 1e-12, "case {case}");
        assert!((m.sensitivity - sens).abs() <= 1e-12, "case {case}");
        assert!((m.specificity - spec).abs() <= 1e-12, "case {case}");

        // dice is the harmonic mean of precision and recall
        let (p, r) = (m.counts.precision(), m.sensitivity);
        let harmonic = if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        };
        assert!(
            (m.dice - harmonic).abs() <= 1e-12,
            "case {case}: {} vs {harmonic}",
            m.dice
        );
        assert!((0.0..=1.0).contains(&m.dice));
    }

    let mut worst: f64 = 0.0;
    for batch in 0..50 {
        let truths: Vec<usize> = (0..200).map(|_| rng.random_range(0..5)).collect();
        let scores: Vec<Vec<f64>> = truths
            .iter()
            .map(|&t| random_probs(&mut rng, t, 5, batch % 2 == 1))
            .collect();
        let r = roc_auc_ovr(&scores, &truths, 5).unwrap();
        for c in 0..5 {
            let col: Vec<f64> = scores.iter().map(|s| s[c]).collect();
            let pos: Vec<bool> = truths.iter().map(|&t| t == c).collect();
            worst = worst.max((r.per_class[c].unwrap() - pairwise_auc(&col, &pos)).abs());
        }
    }
    println!("criterion 4: worst AUC deviation from the pairwise oracle {worst:e}");
    assert!(worst <= 1e-12);
    within("criterion 4", start, Duration::from_secs(60));
}

#[test]
fn criterion_7_stratified_five_fold() {
    let start = Instant::now();
    let names: Vec<String> = cyto_core::cvt::CLASS_NAMES
        .iter()
        .map(|s| s.to_string())
        .collect();
    let per_class = [813, 825, 793, 787, 831];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut truths: Vec<usize> = per_class
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| vec![c; n])
        .collect();
    // interleave so class order carries no information
    for i in (1..truths.len()).rev() {
        truths.swap(i, rng.random_range(0..=i));
    }
    assert_eq!(truths.len(), 4049);

    let split = stratified_kfold(&truths, 5, 42).unwrap();
    for c in 0..5 {
        let counts: Vec<usize> = (0..5)
            .map(|f| {
                split
                    .test_indices(f)
                    .iter()
                    .filter(|&&i| truths[i] == c)
                    .count()
            })
            .collect();
        assert!(
            counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1,
            "class {c}: {counts:?}"
        );
        assert_eq!(counts.iter().sum::<usize>(), per_class[c]);
    }
    let sizes = split.fold_sizes();
    assert!(sizes.iter().all(|&s| s.abs_diff(810) <= 1), "{sizes:?}");

    let probs: Vec<Vec<f64>> = truths
        .iter()
        .map(|&t| random_probs(&mut rng, t, 5, false))
        .collect();
    let report = cross_validate(&probs, &truths, &names, 5, 42).unwrap();

    let mut sums = [0.0f64; 5];
    for f in 0..5 {
        let idx: Vec<usize> = (0..truths.len())
            .filter(|&i| split.assignments[i] == f)
            .collect();
        assert_eq!(report.folds[f].samples, idx.len());
        let pred = |i: usize| {
            let mut best = 0;
            for c in 1..5 {
                if probs[i][c] > probs[i][best] {
                    best = c;
                }
            }
            best
        };
        let correct = idx.iter().filter(|&&i| pred(i) == truths[i]).count();
        let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
        for c in 0..5 {
            let tp = idx
                .iter()
                .filter(|&&i| pred(i) == c && truths[i] == c)
                .count() as f64;
            let predicted = idx.iter().filter(|&&i| pred(i) == c).count() as f64;
            let actual = idx.iter().filter(|&&i| truths[i] == c).count() as f64;
            let p = if predicted > 0.0 { tp / predicted } else { 0.0 };
            let r = tp / actual;
            p_sum += p;
            r_sum += r;
            f_sum += if p + r > 0.0 {
                2.0 * p * r / (p + r)
            } else {
                0.0
            };
        }
        let mut auc_sum = 0.0;
        for c in 0..5 {
            let col: Vec<f64> = idx.iter().map(|&i| probs[i][c]).collect();
            let pos: Vec<bool> = idx.iter().map(|&i| truths[i] == c).collect();
            auc_sum += pairwise_auc(&col, &pos);
        }
        for (s, v) in sums.iter_mut().zip([
            correct as f64 / idx.len() as f64,
            p_sum / 5.0,
            r_sum / 5.0,
            f_sum / 5.0,
            auc_sum / 5.0,
        ]) {
            *s += v;
        }
    }
    let mean = &report.average.mean;
    for (key, s) in ["accuracy", "precision", "recall", "f1", "auc"]
        .iter()
        .zip(sums)
    {
        println!(
            "criterion 7: {key} mean {:.6} (hand {:.6}) sd {:.6}",
            mean[*key],
            s / 5.0,
            report.average.std[*key]
        );
        assert!((mean[*key] - s / 5.0).abs() < 1e-12, "{key}");
    }
    within("criterion 7", start, Duration::from_secs(60));
}

#[test]
fn criterion_6_tsne() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
    use rand_distr::Distribution;

    // two Gaussian clusters, 150 points each in 64 dimensions
    let (n, d) = (300, 64);
    let offset: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
    let x: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let sign = if i < n / 2 { 1.0 } else { -1.0 };
            (0..d)
                .map(|k| sign * offset[k] + normal.sample(&mut rng))
                .collect()
        })
        .collect();
    let truth: Vec<usize> = (0..n).map(|i| (i >= n / 2) as usize).collect();

    // perplexity calibration
    let cond = conditional_probabilities(&pairwise_sq_distances(&x), n, 30.0);
    let worst = cond
        .entropies
        .iter()
        .map(|h| (h - 30f64.ln()).abs())
        .fold(0.0, f64::max);
    println!("criterion 6: worst |H - ln 30| = {worst:e}");
    assert!(worst < 1e-4);

    // analytic gradient against central differences on a 10-point toy
    let toy: Vec<Vec<f64>> = (0..10)
        .map(|_| (0..5).map(|_| normal.sample(&mut rng)).collect())
        .collect();
    let p = joint_probabilities(
        &conditional_probabilities(&pairwise_sq_distances(&toy), 10, 3.0).p,
        10,
    );
    let y: Vec<[f64; 2]> = (0..10)
        .map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)])
        .collect();
    let g = kl_gradient(&p, &y);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..10 {
        for k in 0..2 {
            let (mut plus, mut minus) = (y.clone(), y.clone());
            plus[i][k] += h;
            minus[i][k] -= h;
            let fd = (kl_divergence(&p, &plus) - kl_divergence(&p, &minus)) / (2.0 * h);
            worst = worst.max((g[i][k] - fd).abs() / fd.abs().max(g[i][k].abs()).max(1e-8));
        }
    }
    println!("criterion 6: worst gradient relative error {worst:e}");
    assert!(worst < 1e-4);

    // cluster separation
    let run = Instant::now();
    let r = tsne(
        &x,
        &TsneConfig {
            seed: 42,
            ..Default::default()
        },
    )
    .unwrap();
    println!(
        "criterion 6: t-SNE n=300 in {:?}, KL {:.4} -> {:.4}",
        run.elapsed(),
        r.kl_after_exaggeration,
        r.final_kl
    );
    let mut centroids = [[0.0f64; 2]; 2];
    for (pt, &c) in r.points.iter().zip(&truth) {
        centroids[c][0] += pt[0] / (n / 2) as f64;
        centroids[c][1] += pt[1] / (n / 2) as f64;
    }
    let dist = |a: &[f64; 2], b: &[f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let pure = r
        .points
        .iter()
        .zip(&truth)
        .filter(|(pt, &c)| (dist(pt, &centroids[0]) > dist(pt, &centroids[1])) as usize == c)
        .count();
    let purity = pure as f64 / n as f64;
    println!("criterion 6: nearest-centroid purity {purity:.4}");
    assert!(purity >= 0.98);
    assert!(r.final_kl < r.kl_after_exaggeration);
    within("criterion 6", start, Duration::from_secs(30));
}

#[test]
fn criterion_8_end_to_end_fixture() {
    use cyto_core::imaging::read_label_map;
    use cyto_core::service::{
        generate_fixture, FixtureSpec, Pipeline, PipelineConfig, SlideState, SlideStore, Stage,
        StageParams,
    };
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let info = generate_fixture(&dir.path().join("fixture"), &FixtureSpec::default()).unwrap();
    let config = PipelineConfig::from_file(&info.config).unwrap();
    let pipeline = Pipeline::new(SlideStore::open(dir.path().join("store")).unwrap(), config);

    let slide = pipeline
        .ingest_dir(&info.frames_dir, Some(&info.oracle), None)
        .unwrap();
    assert_eq!(slide.state, SlideState::Ingested);
    let id = slide.slide_id;
    let mut state = SlideState::Ingested;
    for stage in [
        Stage::Stitch,
        Stage::Segment,
        Stage::Classify,
        Stage::Report,
    ] {
        let t = Instant::now();
        let r = pipeline
            .run_stage(&id, stage, &StageParams::default())
            .unwrap();
        assert!(r.state > state);
        state = r.state;
        println!(
            "criterion 8: {stage} -> {} in {:?} {:?}",
            r.state,
            t.elapsed(),
            r.warnings
        );
    }
    assert_eq!(state, SlideState::Reported);

    let record = pipeline.record(&id).unwrap();
    let graph: serde_json::Value = serde_json::from_slice(
        &std::fs::read(pipeline.store().artifact(&id, "graph.json").unwrap()).unwrap(),
    )
    .unwrap();
    let noise_index = (info.spec.cols * info.spec.rows) as u64;
    assert_eq!(
        graph["rejected"],
        serde_json::json!([noise_index]),
        "noise frame must be rejected"
    );

    let labels = read_label_map(pipeline.labels_path(&id, None).unwrap()).unwrap();
    let cells = pipeline.cells(&id).unwrap();
    let report = pipeline.report(&id).unwrap();
    println!(
        "criterion 8: fixture {} instances, segmented {}, report {:?} (total {})",
        info.instances,
        labels.instance_count(),
        report.per_class,
        report.total_cells
    );
    assert_eq!(report.label_version, record.label_version);
    assert_eq!(report.per_class.iter().sum::<usize>(), report.total_cells);
    assert_eq!(report.total_cells, labels.instance_count());
    assert_eq!(cells.len(), labels.instance_count());
    assert_eq!(labels.instance_count(), info.instances);
    let g = &report.grouping;
    assert_eq!(
        g.normal.count + g.abnormal.count + g.benign.count,
        report.total_cells
    );
    within("criterion 8", start, Duration::from_secs(120));
}
