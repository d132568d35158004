//! Acceptance criteria A1 to A10. Prints one `[PASS]` or `[FAIL]` line per
//! criterion and exits non-zero if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::panic;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use selagg_core::aggregation::{self, AggregatorMode, AggregatorSpec, ScoreModelSpec};
use selagg_core::localization::{
    self, max_box_acc_v2, scores_to_heatmap, BoundingBox, Heatmap, LocalizationItem,
};
use selagg_core::metrics::{self, FlowMetric};
use selagg_core::probe::{
    self, probe_forward, train_probe, Preset, ProbeParams, Sample, TrainConfig,
};
use selagg_core::storage;
use selagg_core::synth::{self, AttentionSynthConfig, BagsConfig, Split};
use selagg_core::tensor::{rand_normal, Tensor};
use selagg_core::vit::{self, AttentionTensor, MaeDecoderParams, ViTConfig, ViTParams};
use selagg_core::RngStream;

type Outcome = Result<String, String>;
type Criterion = (&'static str, &'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(start: Instant, limit: Duration) -> Result<String, String> {
    let took = start.elapsed();
    check(took < limit, format!("took {took:.2?}, limit {limit:?}"))?;
    Ok(format!("{took:.2?}"))
}

fn a1_entropy_bound() -> Outcome {
    let start = Instant::now();
    let t = 197;
    let maps = Tensor::full(vec![1, 1, t, t], 1.0 / t as f32);
    let a = AttentionTensor::new(maps, true).unwrap();
    let v = metrics::cls_patch_entropy(&[a])
        .map_err(|e| e.to_string())?
        .values[0];
    let err = (v - 196f64.ln()).abs();
    check(
        err <= 1e-6,
        format!("entropy {v} differs from ln 196 by {err}"),
    )?;
    let took = within(start, Duration::from_secs(1))?;
    Ok(format!("entropy {v:.6}, |err| {err:.1e}, {took}"))
}

fn brute_force(metric: FlowMetric, images: &[AttentionTensor]) -> Vec<f64> {
    let a0 = &images[0];
    let (l, h, t) = (a0.blocks(), a0.heads(), a0.tokens());
    let n = t - 1;
    let at = |img: &AttentionTensor, b: usize, hd: usize, i: usize, j: usize| {
        img.maps.data()[((b * h + hd) * t + i) * t + j] as f64
    };
    let entropy = |img: &AttentionTensor, b: usize, hd: usize, i: usize| {
        let mass: f64 = (1..t).map(|j| at(img, b, hd, i, j)).sum();
        (1..t)
            .map(|j| at(img, b, hd, i, j) / mass)
            .filter(|&p| p > 0.0)
            .map(|p| -p * p.ln())
            .sum::<f64>()
    };
    (0..l)
        .map(|b| {
            let mut total = 0.0;
            for hd in 0..h {
                let mut per_head = 0.0;
                for img in images {
                    per_head += match metric {
                        FlowMetric::ClsSelfAttention => at(img, b, hd, 0, 0),
                        FlowMetric::ClsPatchEntropy => entropy(img, b, hd, 0),
                        FlowMetric::PatchSelfAttentionRatio => {
                            (1..t)
                                .map(|i| {
                                    at(img, b, hd, i, i)
                                        / (1..t).map(|j| at(img, b, hd, i, j)).sum::<f64>()
                                })
                                .sum::<f64>()
                                / n as f64
                        }
                        FlowMetric::PatchPatchEntropy => {
                            (1..t).map(|i| entropy(img, b, hd, i)).sum::<f64>() / n as f64
                        }
                    };
                }
                total += per_head / images.len() as f64;
            }
            total / h as f64
        })
        .collect()
}

fn a2_metric_oracle() -> Outcome {
    let start = Instant::now();
    let cfg = AttentionSynthConfig {
        images: 20,
        blocks: 4,
        heads: 4,
        patches: 16,
        with_cls: true,
        sharpness: 4.0,
        seed: 2024,
    };
    let images: Vec<AttentionTensor> = synth::synth_attention(&cfg)
        .into_iter()
        .map(|(_, a)| a)
        .collect();
    let got = metrics::flow_metrics(&images, &FlowMetric::ALL).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for (m, series) in FlowMetric::ALL.iter().zip(&got) {
        for (g, w) in series.values.iter().zip(brute_force(*m, &images)) {
            worst = worst.max((g - w).abs());
        }
    }
    check(worst <= 1e-6, format!("max abs diff {worst:.3e}"))?;
    let took = within(start, Duration::from_secs(5))?;
    Ok(format!(
        "4 metrics x 4 blocks, max abs diff {worst:.1e}, {took}"
    ))
}

fn a3_gradients() -> Outcome {
    let start = Instant::now();
    let suite = probe::gradcheck_suite(0);
    let mut worst = (0.0f64, String::new());
    let mut failed = Vec::new();
    for cfg in &suite {
        check(
            cfg.dim == 16 && cfg.tokens == 8 && cfg.classes == 5 && cfg.batch == 4,
            "unexpected problem size",
        )?;
        let r = probe::gradcheck(cfg).map_err(|e| format!("{}: {e}", cfg.label()))?;
        if !r.passed {
            failed.push(format!("{} ({:.2e})", r.label, r.max_rel_error));
        }
        if r.max_rel_error > worst.0 {
            worst = (r.max_rel_error, r.label.clone());
        }
    }
    check(
        failed.is_empty(),
        format!("failing configurations: {}", failed.join(", ")),
    )?;
    check(worst.0 < 1e-4, format!("max rel error {:.2e}", worst.0))?;
    let took = within(start, Duration::from_secs(30))?;
    Ok(format!(
        "{} configurations, worst {:.1e} ({}), {took}",
        suite.len(),
        worst.0,
        worst.1
    ))
}

fn a4_selection_advantage() -> Outcome {
    let start = Instant::now();
    let mut gaps = Vec::new();
    let mut signal_weights = Vec::new();
    let n_tokens = BagsConfig::default().tokens;
    for seed in 0..3u64 {
        let cfg = BagsConfig {
            seed,
            ..BagsConfig::default()
        };
        check(
            (cfg.classes, cfg.tokens, cfg.dim, cfg.train, cfg.eval) == (10, 32, 64, 5000, 1000),
            "unexpected task size",
        )?;
        let bags = synth::synth_bags(&cfg);
        let (train, eval): (Vec<_>, Vec<_>) =
            bags.into_iter().partition(|b| b.split == Split::Train);
        let train_s: Vec<Sample> = train.iter().map(|b| b.sample.clone()).collect();
        let eval_s: Vec<Sample> = eval.iter().map(|b| b.sample.clone()).collect();
        let mut acc = BTreeMap::new();
        let mut abmilp_probe = None;
        for mode in [AggregatorMode::AbmilpPatches, AggregatorMode::AvgPatches] {
            let tc = TrainConfig {
                seed,
                ..TrainConfig::preset(Preset::Desk, mode)
            };
            let (p, h) = train_probe(&train_s, Some(&eval_s), cfg.classes, &tc)
                .map_err(|e| e.to_string())?;
            acc.insert(
                mode.name(),
                h.last().and_then(|r| r.eval_accuracy).unwrap_or(0.0),
            );
            if mode == AggregatorMode::AbmilpPatches {
                abmilp_probe = Some(p);
            }
        }
        let p = abmilp_probe.unwrap();
        let mut w = 0.0;
        for b in &eval {
            let out = probe_forward(&b.sample, &p, AggregatorMode::AbmilpPatches)
                .map_err(|e| e.to_string())?;
            w += out.weights[b.signal_index] as f64;
        }
        signal_weights.push(w / eval.len() as f64);
        gaps.push(100.0 * (acc["abmilp_patches"] - acc["avg_patches"]));
        println!(
            "       seed {seed}: abmilp {:.1}%, avg {:.1}%, signal weight {:.3}",
            100.0 * acc["abmilp_patches"],
            100.0 * acc["avg_patches"],
            signal_weights.last().unwrap()
        );
    }
    let gap = gaps.iter().sum::<f64>() / 3.0;
    let weight = signal_weights.iter().sum::<f64>() / 3.0;
    let floor = 3.0 / n_tokens as f64;
    check(gap >= 20.0, format!("mean gap {gap:.1}pp below 20pp"))?;
    check(
        weight > floor,
        format!("mean signal weight {weight:.4} not above {floor:.4}"),
    )?;
    let took = within(start, Duration::from_secs(180))?;
    Ok(format!(
        "mean gap {gap:.1}pp, mean signal weight {weight:.3} (> {floor:.4}), {took}"
    ))
}

fn a5_parameter_overhead() -> Outcome {
    let plain = AggregatorSpec::new(AggregatorMode::Cls, None).map_err(|e| e.to_string())?;
    let abmilp = AggregatorSpec::new(
        AggregatorMode::AbmilpPatches,
        Some(ScoreModelSpec::linear()),
    )
    .map_err(|e| e.to_string())?;
    let (a, b) = (
        aggregation::parameter_count(&plain, 768, 1000),
        aggregation::parameter_count(&abmilp, 768, 1000),
    );
    check(a == 769_000 && b == 769_769, format!("got {a} and {b}"))?;
    Ok(format!("{a} vs {b}"))
}

fn a6_shift_invariance() -> Outcome {
    let d = 16;
    let samples: Vec<Sample> = (0..8)
        .map(|i| Sample {
            id: format!("s{i}"),
            tokens: vit::TokenSequence::new(
                rand_normal(vec![33, d], &RngStream::new(i, 0)),
                true,
                0,
            )
            .unwrap(),
            label: 0,
            fixed_weights: None,
        })
        .collect();
    let (mut dw_max, mut dl_max) = (0.0f32, 0.0f32);
    for mode in [AggregatorMode::AbmilpPatches, AggregatorMode::AbmilpWithCls] {
        let mut base = ProbeParams::<f32>::init(d, 5, Some(&ScoreModelSpec::linear()), 1)
            .map_err(|e| e.to_string())?;
        base.score.as_mut().unwrap().layers[0].weight =
            rand_normal(vec![d, 1], &RngStream::new(7, 7));
        for c in [-10.0f32, 1.0, 10.0] {
            let mut shifted = base.clone();
            shifted.score.as_mut().unwrap().layers[0].bias.data_mut()[0] += c;
            for s in &samples {
                let a = probe_forward(s, &base, mode).map_err(|e| e.to_string())?;
                let b = probe_forward(s, &shifted, mode).map_err(|e| e.to_string())?;
                dw_max = a
                    .weights
                    .iter()
                    .zip(&b.weights)
                    .fold(dw_max, |m, (x, y)| m.max((x - y).abs()));
                dl_max = a
                    .logits
                    .iter()
                    .zip(&b.logits)
                    .fold(dl_max, |m, (x, y)| m.max((x - y).abs()));
            }
        }
    }
    check(dw_max <= 1e-6, format!("weights moved by {dw_max:.2e}"))?;
    check(dl_max <= 1e-5, format!("logits moved by {dl_max:.2e}"))?;
    Ok(format!(
        "max weight change {dw_max:.1e}, max logit change {dl_max:.1e}"
    ))
}

fn a7_mae_plumbing() -> Outcome {
    let start = Instant::now();
    let cfg = ViTConfig::tiny();
    let n = cfg.num_patches();
    let params = ViTParams::random(&cfg, 5).map_err(|e| e.to_string())?;
    let dec = MaeDecoderParams::random(&cfg, 5).map_err(|e| e.to_string())?;
    let img = synth::synth_images(1, cfg.image_height, cfg.image_width, cfg.channels, 9)
        .remove(0)
        .1;
    let target = vit::patchify(&img, cfg.patch_size).map_err(|e| e.to_string())?;
    let z0 = vit::embed(&target, &params).map_err(|e| e.to_string())?;

    for rho in [0.25, 0.5, 0.75] {
        let mask = vit::sample_mask(n, rho, &RngStream::new(1, 0)).map_err(|e| e.to_string())?;
        let visible = vit::apply_mask(&z0, &mask).map_err(|e| e.to_string())?;
        let (enc, _) =
            vit::vit_forward(&visible, &params, &cfg, false, None).map_err(|e| e.to_string())?;
        let want = 1 + (n as f64 * (1.0 - rho)).floor() as usize;
        check(
            enc.rows() == want,
            format!("rho {rho}: {} visible rows, expected {want}", enc.rows()),
        )?;
        let pred = vit::mae_decode(&enc, &mask, &dec, &cfg).map_err(|e| e.to_string())?;
        check(pred.dims() == target.dims(), "decoder output shape")?;
        let loss = vit::mae_loss(&target, &target, &mask, false).map_err(|e| e.to_string())?;
        check(loss == 0.0, format!("loss(pred=target) = {loss}"))?;
    }

    let d = 6;
    let token = Tensor::from_vec(vec![d], vec![-3.5f32; d]).unwrap();
    for trial in 0..100u64 {
        let rho = [0.25, 0.5, 0.75][(trial % 3) as usize];
        let mask =
            vit::sample_mask(n, rho, &RngStream::new(trial, 2)).map_err(|e| e.to_string())?;
        let visible = rand_normal(vec![mask.num_kept(), d], &RngStream::new(trial, 3));
        let full = vit::insert_mask_tokens(&visible, &mask, &token).map_err(|e| e.to_string())?;
        let mut next = 0;
        for i in 0..n {
            let want = if mask.keep[i] {
                next += 1;
                visible.row(next - 1)
            } else {
                token.data()
            };
            check(
                full.row(i) == want,
                format!("trial {trial}: row {i} misplaced"),
            )?;
        }
    }
    let took = within(start, Duration::from_secs(10))?;
    Ok(format!("3 mask ratios, 100 placement trials, {took}"))
}

fn a8_box_accuracy() -> Outcome {
    let start = Instant::now();
    let th = localization::default_thresholds();
    let dl = localization::default_iou_levels();
    let items: Vec<LocalizationItem> = synth::synth_boxes(&synth::BoxesConfig {
        images: 5,
        noise: 1.0,
        seed: 8,
        ..Default::default()
    })
    .into_iter()
    .map(|b| LocalizationItem {
        heatmap: scores_to_heatmap(&b.scores, 7, 7, 112, 112).unwrap(),
        gt_boxes: vec![b.gt],
    })
    .collect();
    let report = max_box_acc_v2(&items, &th, &dl).map_err(|e| e.to_string())?;

    // Independent enumeration: flood fill on the binarized map, largest
    // component first met in scan order, IoU by interval overlap.
    let enumerate_box = |m: &Heatmap, tau: f64| -> Option<BoundingBox> {
        if m.degenerate {
            return None;
        }
        let (h, w) = (m.height, m.width);
        let mut label = vec![usize::MAX; h * w];
        let mut best: Option<(usize, [usize; 4])> = None;
        for s in 0..h * w {
            if label[s] != usize::MAX || m.values[s] < tau {
                continue;
            }
            let mut queue = std::collections::VecDeque::from([s]);
            label[s] = s;
            let (mut size, mut bb) = (0, [w, h, 0, 0]);
            while let Some(p) = queue.pop_front() {
                let (y, x) = (p / w, p % w);
                size += 1;
                bb = [
                    bb[0].min(x),
                    bb[1].min(y),
                    bb[2].max(x + 1),
                    bb[3].max(y + 1),
                ];
                let nbrs = [
                    (y > 0).then(|| p - w),
                    (y + 1 < h).then(|| p + w),
                    (x > 0).then(|| p - 1),
                    (x + 1 < w).then(|| p + 1),
                ];
                for q in nbrs.into_iter().flatten() {
                    if label[q] == usize::MAX && m.values[q] >= tau {
                        label[q] = s;
                        queue.push_back(q);
                    }
                }
            }
            if best.is_none_or(|(bs, _)| size > bs) {
                best = Some((size, bb));
            }
        }
        best.map(|(_, b)| BoundingBox {
            x0: b[0] as f64,
            y0: b[1] as f64,
            x1: b[2] as f64,
            y1: b[3] as f64,
        })
    };
    let overlap = |a: &BoundingBox, b: &BoundingBox| {
        let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
        let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
        let inter = iw * ih;
        inter / ((a.x1 - a.x0) * (a.y1 - a.y0) + (b.x1 - b.x0) * (b.y1 - b.y0) - inter)
    };
    let mut mean = 0.0;
    for (d, &delta) in dl.iter().enumerate() {
        let mut best = 0usize;
        for (t, &tau) in th.iter().enumerate() {
            let hits = items
                .iter()
                .filter(|it| {
                    enumerate_box(&it.heatmap, tau)
                        .is_some_and(|b| it.gt_boxes.iter().any(|g| overlap(&b, g) >= delta))
                })
                .count();
            check(
                report.hits[t][d] == hits,
                format!("tau {tau} delta {delta}: {} vs {hits}", report.hits[t][d]),
            )?;
            best = best.max(hits);
        }
        mean += best as f64 / items.len() as f64;
    }
    let want = 100.0 * mean / dl.len() as f64;
    check(
        (report.score - want).abs() < 1e-9,
        format!("score {} vs enumeration {want}", report.score),
    )?;

    let perfect: Vec<LocalizationItem> = (0..5)
        .map(|k| {
            let gt = BoundingBox {
                x0: 2.0 + k as f64,
                y0: 3.0,
                x1: 9.0 + k as f64,
                y1: 12.0,
            };
            let v = (0..256)
                .map(|i| {
                    let (y, x) = ((i / 16) as f64, (i % 16) as f64);
                    f64::from(u8::from(x >= gt.x0 && x < gt.x1 && y >= gt.y0 && y < gt.y1))
                })
                .collect();
            LocalizationItem {
                heatmap: Heatmap::from_raw(v, 16, 16).unwrap(),
                gt_boxes: vec![gt],
            }
        })
        .collect();
    let p = max_box_acc_v2(&perfect, &th, &dl)
        .map_err(|e| e.to_string())?
        .score;
    check(p == 100.0, format!("perfect maps scored {p}"))?;
    let constant: Vec<LocalizationItem> = perfect
        .iter()
        .map(|it| LocalizationItem {
            heatmap: Heatmap::from_raw(vec![0.7; 256], 16, 16).unwrap(),
            gt_boxes: it.gt_boxes.clone(),
        })
        .collect();
    let c = max_box_acc_v2(&constant, &th, &dl)
        .map_err(|e| e.to_string())?
        .score;
    check(c == 0.0, format!("constant maps scored {c}"))?;
    let took = within(start, Duration::from_secs(5))?;
    Ok(format!(
        "score {:.4} matches enumeration, perfect {p}, constant {c}, {took}",
        report.score
    ))
}

fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_selagg"))
}

fn run_in(dir: &Path, threads: usize, args: &[&str]) -> Result<(), String> {
    let out = Command::new(bin())
        .current_dir(dir)
        .env_remove("SELAGG_THREADS")
        .arg("--threads")
        .arg(threads.to_string())
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    check(
        out.status.success(),
        format!(
            "`selagg {}` exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ),
    )
}

const PIPELINE: &[&[&str]] = &[
    &["synth", "--task", "vit", "--out", "vit", "--seed", "3"],
    &[
        "extract",
        "--weights",
        "vit/weights",
        "--images",
        "vit/dataset.json",
        "--out",
        "feats",
        "--capture-attn",
        "--seed",
        "1",
    ],
    &[
        "extract",
        "--weights",
        "vit/weights",
        "--images",
        "vit/dataset.json",
        "--out",
        "masked",
        "--mask-ratio",
        "0.5",
        "--seed",
        "1",
    ],
    &[
        "analyze",
        "--attn",
        "feats",
        "--out",
        "analysis",
        "--selectors",
        "attn_avg_cls,attn_lowest_entropy,attn_central_patch",
    ],
    &[
        "synth", "--task", "bags", "--out", "bags", "--seed", "2", "--n", "300", "--eval-n", "60",
    ],
    &[
        "train-probe",
        "--features",
        "bags",
        "--out",
        "probe",
        "--epochs",
        "3",
        "--warmup-epochs",
        "1",
    ],
    &[
        "train-probe",
        "--features",
        "feats",
        "--labels",
        "vit/dataset.json",
        "--out",
        "vitprobe",
        "--epochs",
        "2",
        "--warmup-epochs",
        "1",
    ],
    &[
        "localize",
        "--bundle",
        "feats",
        "--probe",
        "vitprobe/probe",
        "--selector",
        "abmilp,attn_avg_cls",
        "--out",
        "loc",
    ],
    &["synth", "--task", "boxes", "--out", "boxes", "--seed", "4"],
    &[
        "localize",
        "--bundle",
        "boxes",
        "--selector",
        "external",
        "--out",
        "loc_boxes",
    ],
    &[
        "synth",
        "--task",
        "attention",
        "--out",
        "attn",
        "--seed",
        "5",
    ],
    &[
        "analyze",
        "--attn",
        "attn",
        "--out",
        "attn_analysis",
        "--format",
        "json",
        "--selectors",
        "attn_avg_cls,attn_central_patch",
    ],
    &["gradcheck", "--all", "--out", "gradcheck.json"],
];

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

fn a9_determinism() -> Outcome {
    let runs: Vec<(tempfile::TempDir, usize)> = [1, 1, 4]
        .into_iter()
        .map(|t| (tempfile::tempdir().unwrap(), t))
        .collect();
    for (dir, threads) in &runs {
        for args in PIPELINE {
            run_in(dir.path(), *threads, args)?;
        }
    }
    let trees: Vec<_> = runs.iter().map(|(d, _)| tree(d.path())).collect();
    for (label, other) in [("same-seed re-run", &trees[1]), ("--threads 4", &trees[2])] {
        let a: Vec<_> = trees[0].keys().collect();
        let b: Vec<_> = other.keys().collect();
        check(a == b, format!("{label}: different file sets"))?;
        for (path, bytes) in &trees[0] {
            check(
                &other[path] == bytes,
                format!("{label}: {} differs", path.display()),
            )?;
        }
    }
    Ok(format!(
        "{} commands, {} output files byte-identical across re-run and --threads 1/4",
        PIPELINE.len(),
        trees[0].len()
    ))
}

fn a10_golden_files() -> Outcome {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/golden");
    let expected: BTreeMap<String, serde_json::Value> = serde_json::from_str(
        &fs::read_to_string(dir.join("expected.json")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    for (name, exp) in &expected {
        let path = dir.join(format!("{name}.satf"));
        let t = storage::read_any(&path).map_err(|e| format!("{name}: {e}"))?;
        let dims: Vec<usize> = serde_json::from_value(exp["dims"].clone()).unwrap();
        check(
            t.dims() == dims.as_slice(),
            format!("{name}: dims {:?}", t.dims()),
        )?;
        check(
            storage::payload_checksum(&t) == exp["checksum"].as_str().unwrap_or(""),
            format!("{name}: checksum"),
        )?;
        check(
            t.encode() == fs::read(&path).unwrap(),
            format!("{name}: re-encode differs"),
        )?;
    }
    let bytes = fs::read(dir.join("f32_2x3.satf")).map_err(|e| e.to_string())?;
    let header = bytes.len() - 6 * 4;
    check(
        header == 23 && storage::header_len(2) == 23,
        format!("header is {header} bytes"),
    )?;
    Ok(format!(
        "{} golden records parse and re-encode; [2,3] f32 header {header} bytes",
        expected.len()
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("A1", "entropy bound", a1_entropy_bound),
        ("A2", "metric oracle equivalence", a2_metric_oracle),
        ("A3", "gradient correctness", a3_gradients),
        (
            "A4",
            "selective aggregation advantage",
            a4_selection_advantage,
        ),
        ("A5", "parameter overhead", a5_parameter_overhead),
        ("A6", "softmax shift invariance", a6_shift_invariance),
        ("A7", "MAE plumbing", a7_mae_plumbing),
        ("A8", "MaxBoxAccV2 oracle", a8_box_accuracy),
        ("A9", "determinism and parallel equivalence", a9_determinism),
        ("A10", "format golden files", a10_golden_files),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failures = 0;
    for (id, name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|x| x == id) {
            continue;
        }
        let result = panic::catch_unwind(f).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(msg)
        });
        match result {
            Ok(detail) => println!("[PASS] {id} {name}: {detail}"),
            Err(detail) => {
                failures += 1;
                println!("[FAIL] {id} {name}: {detail}");
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
