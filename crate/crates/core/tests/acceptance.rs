//! The eight acceptance criteria, each reported on its own PASS/FAIL line.
//! All criteria run even when an earlier one fails.

mod common;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use common::{closed_form_baseline_params, closed_form_dense_params, random_eval_instance, ref_evaluate, ref_nms};
use dense_fpn::autodiff::{smooth_l1_scalar, ParamStore, Tape};
use dense_fpn::backbone::{Backbone, BackboneConfig};
use dense_fpn::data::synth_scene;
use dense_fpn::eval::evaluate;
use dense_fpn::fusion::{dmffpn_forward, fpn_baseline, FusionConfig, FusionMode, FusionParams};
use dense_fpn::geometry::{decode_box, encode_box, generate_anchors, nms, BBox, Detection};
use dense_fpn::gradcheck::{run_suite, TOL_F64};
use dense_fpn::heads::{total_loss, RpnOutput, SampledBatch, StageOutput};
use dense_fpn::io::RunConfig;
use dense_fpn::model::Detector;
use dense_fpn::nn::Init;
use dense_fpn::train::{self_evaluate, toy_scenes, train_toy};
use dense_fpn::Tensor;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn toy_config() -> RunConfig {
    RunConfig::load(&repo_root().join("configs/toy.cfg")).expect("configs/toy.cfg parses")
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let report = run_suite(0).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    for c in &report.cases {
        ensure!(c.passed(), "case failed: {c}");
    }
    let f64_cases: Vec<_> = report.cases.iter().filter(|c| c.precision == "f64").collect();
    let worst = f64_cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    ensure!(worst < 1e-6 && TOL_F64 <= 1e-6, "worst double-precision error {worst:e}");
    let names: Vec<&str> = f64_cases.iter().map(|c| c.name.as_str()).collect();
    for op in [
        "conv2d 1x1",
        "conv2d 3x3",
        "bilinear upsample x2",
        "concat channels",
        "add",
        "relu",
        "max pool 2x2",
        "linear",
        "softmax cross-entropy",
        "smooth L1",
        "gather",
        "roi align",
    ] {
        ensure!(names.contains(&op), "no double-precision case for {op}");
    }
    ensure!(
        names.iter().any(|n| n.starts_with("end-to-end") && n.contains("32x32") && n.contains("T=2") && n.contains("2 RoIs")),
        "end-to-end case missing"
    );
    ensure!(secs < 60.0, "suite took {secs:.1}s");
    Ok(format!("{} cases, worst f64 rel err {worst:.2e}, {secs:.2}s", report.cases.len()))
}

fn fpn_equivalence() -> Outcome {
    let bb_cfg = BackboneConfig::default();
    let rows = FusionConfig::ablation_rows(16).map(|r| FusionConfig { add_p6: false, ..r });
    let mut changed = 0;
    for seed in 0..50u64 {
        // one parameter set per fusion mode; baseline weights come first in
        // the seeded stream and are therefore shared
        let build = |mode| {
            let mut store = ParamStore::<f32>::new();
            let mut init = Init::new(seed);
            let bb = Backbone::new(&mut store, &mut init, &bb_cfg).unwrap();
            let full = FusionConfig { dense_to_p2: true, dense_to_p3: true, mode, out_channels: 16, add_p6: false };
            let fp = FusionParams::new(&mut store, &mut init, bb.out_channels(), &full).unwrap();
            (store, bb, fp)
        };
        let image = {
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed + 1000);
            Tensor::from_fn(&[1, 3, 64, 64], |_| rng.random_range(-1.0..1.0f32))
        };
        let levels = |store: &ParamStore<f32>, bb: &Backbone, fp: &FusionParams, cfg: Option<&FusionConfig>| {
            let mut tape = Tape::new();
            let x = tape.constant(image.clone());
            let feats = bb.forward(&mut tape, store, x).unwrap();
            let pyr = match cfg {
                None => fpn_baseline(&mut tape, store, &feats, fp).unwrap(),
                Some(c) => dmffpn_forward(&mut tape, store, &feats, c, fp).unwrap(),
            };
            pyr.p.map(|v| tape.value(v).data().iter().map(|x| x.to_bits()).collect::<Vec<u32>>())
        };
        let concat = build(FusionMode::Concat);
        let add = build(FusionMode::Add);
        let base = levels(&concat.0, &concat.1, &concat.2, None);
        ensure!(levels(&add.0, &add.1, &add.2, None) == base, "seed {seed}: baseline differs between parameter sets");
        let off = FusionConfig { dense_to_p2: false, dense_to_p3: false, ..rows[2].clone() };
        for (store, bb, fp) in [&concat, &add] {
            ensure!(levels(store, bb, fp, Some(&off)) == base, "seed {seed}: toggles off is not the baseline");
        }
        for row in &rows {
            let (store, bb, fp) = if row.mode == FusionMode::Add { &add } else { &concat };
            let p = levels(store, bb, fp, Some(row));
            ensure!(p[2] == base[2] && p[3] == base[3], "seed {seed}: P4/P5 moved under {row:?}");
            for (i, on) in [row.dense_to_p2, row.dense_to_p3].into_iter().enumerate() {
                ensure!((p[i] != base[i]) == on, "seed {seed}: P{} changed={} with toggle {on}", i + 2, p[i] != base[i]);
                changed += usize::from(on);
            }
        }
    }
    Ok(format!("50 seeds bit-identical with toggles off; {changed} fused levels changed, P4/P5 stable"))
}

fn ablation_table() -> Outcome {
    let cfg_path = repo_root().join("configs/paper.cfg");
    let cfg = RunConfig::load(&cfg_path).map_err(|e| e.to_string())?;
    let (bb, out) = (cfg.model.backbone.stage_channels, cfg.model.fusion.out_channels);
    let output = Command::new(env!("CARGO_BIN_EXE_dense-fpn"))
        .args(["fuse-demo", "--size", "64", "--config"])
        .arg(&cfg_path)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(output.status.success(), "fuse-demo failed: {}", String::from_utf8_lossy(&output.stderr));
    let text = String::from_utf8_lossy(&output.stdout);
    let expect = [
        ("P3 concat", None, Some(768), false, true, true),
        ("P2 concat", Some(1024), None, true, false, true),
        ("P2+P3 concat", Some(1024), Some(768), true, true, true),
        ("P2+P3 add", Some(256), Some(256), true, true, false),
    ];
    let mut counts = Vec::new();
    for (name, w2, w3, p2, p3, concat) in expect {
        let line = text
            .lines()
            .find(|l| l.starts_with(name) && l[name.len()..].starts_with(' ') && !l[name.len()..].trim_start().starts_with("concat"))
            .ok_or(format!("row {name} missing from fuse-demo output"))?;
        let cols: Vec<&str> = line[name.len()..].split_whitespace().collect();
        ensure!(cols.len() == 4, "unexpected row {line:?}");
        let fmt = |w: Option<usize>| w.map_or("-".to_string(), |v| v.to_string());
        ensure!(cols[0] == fmt(w2) && cols[1] == fmt(w3), "{name}: widths {} {}", cols[0], cols[1]);
        let dense = closed_form_dense_params(bb, out, p2, p3, concat);
        let total = dense + closed_form_baseline_params(bb, out);
        ensure!(cols[2] == dense.to_string(), "{name}: dense params {} vs closed form {dense}", cols[2]);
        ensure!(cols[3] == total.to_string(), "{name}: fusion params {} vs closed form {total}", cols[3]);
        counts.push(dense);
    }
    let mut distinct = counts.clone();
    distinct.sort_unstable();
    distinct.dedup();
    ensure!(distinct.len() == 4, "parameter counts not distinct: {counts:?}");
    Ok(format!("widths 1024/768 concat vs 256 add; dense params {counts:?}"))
}

fn loss_algebra() -> Outcome {
    // two anchors in one 1×2 level; anchor 0 positive, anchor 1 negative
    let mut tape = Tape::<f64>::new();
    let obj = tape.leaf(Tensor::new(&[1, 1, 1, 2], vec![1.0, -0.5]).unwrap());
    let deltas = tape.leaf(Tensor::new(&[1, 4, 1, 2], vec![0.2, 9.0, -0.4, 9.0, 0.0, 9.0, 1.8, 9.0]).unwrap());
    let rpn = RpnOutput { objectness: vec![obj], deltas: vec![deltas], extents: vec![(1, 2)], per_cell: 1 };
    let rpn_batch = SampledBatch { indices: vec![0, 1], labels: vec![1, 0], targets: vec![Some([0.0, 0.0, 0.0, 0.3]), None] };
    let mut logits = vec![0.0; 22];
    logits[2] = 1.0;
    logits[11 + 10] = -1.0;
    let class_logits = tape.leaf(Tensor::new(&[2, 11], logits).unwrap());
    let box_deltas = tape.leaf(Tensor::new(&[2, 4], vec![0.6, 0.0, 0.0, -0.2, 5.0, 5.0, 5.0, 5.0]).unwrap());
    let b = BBox::new(0.0, 0.0, 10.0, 10.0);
    let stage = StageOutput { boxes_in: vec![b; 2], class_logits, box_deltas, refined: vec![b; 2] };
    let batch = SampledBatch { indices: vec![0, 1], labels: vec![2, 10], targets: vec![Some([0.1, 0.0, 0.0, 0.0]), None] };

    let e = std::f64::consts::E;
    let rpn_cls = ((1.0 + (-1.0f64).exp()).ln() + (1.0 + (-0.5f64).exp()).ln()) / 2.0;
    let rpn_reg = (0.5 * 0.04 + 0.5 * 0.16 + 0.0 + (1.5 - 0.5)) / 2.0;
    let stage_cls = (((e + 10.0).ln() - 1.0) + (1.0 + (10.0 + 1.0 / e).ln())) / 2.0;
    let stage_reg = (0.5 * 0.25 + 0.5 * 0.04) / 2.0;
    for lambda in [0.0, 1.0, 2.0] {
        let t = total_loss(&mut tape, std::slice::from_ref(&batch), std::slice::from_ref(&stage), &rpn_batch, &rpn, lambda).map_err(|e| e.to_string())?;
        let got = tape.value(t.total).data()[0];
        let want = rpn_cls + stage_cls + lambda * (rpn_reg + stage_reg);
        ensure!(rel(got, want) < 1e-6, "hand instance at λ={lambda}: {got} vs {want}");
    }

    // decomposition on the full toy detector under a fixed training plan
    let cfg = toy_config();
    let (store, det) = Detector::build::<f64>(&cfg.model, 5).map_err(|e| e.to_string())?;
    let (img, gts) = synth_scene(9, (96, 96), 3).map_err(|e| e.to_string())?;
    let img = img.cast::<f64>();
    let plan = det.training_loss(&mut Tape::new(), &store, &img, &gts, 1).map_err(|e| e.to_string())?.plan;
    let mut parts = None;
    for lambda in [0.0, 1.0, 2.0] {
        let mut d = det.clone();
        d.config.cascade.lambda = lambda;
        let mut tape = Tape::new();
        let t = d.loss_with_plan(&mut tape, &store, &img, &plan).map_err(|e| e.to_string())?;
        let v = |x| tape.value(x).data()[0];
        let (cls, reg) = *parts.get_or_insert((v(t.cls), v(t.reg)));
        ensure!(reg > 0.0, "regression part vanished");
        ensure!(rel(v(t.total), cls + lambda * reg) < 1e-6, "L({lambda}) = {} vs {}", v(t.total), cls + lambda * reg);
    }
    Ok("hand instance and detector decomposition hold at λ ∈ {0, 1, 2}".into())
}

fn metric_oracle() -> Outcome {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let (dets, gts) = random_eval_instance(&mut rng);
        ensure!(gts.len() <= 10 && dets.values().all(|d| d.len() <= 20), "instance {case} too large");
        let got = evaluate(&dets, &gts).map_err(|e| e.to_string())?;
        for ((name, g), w) in got.metrics().iter().zip(ref_evaluate(&dets, &gts)) {
            worst = worst.max((g - w).abs());
            ensure!((g - w).abs() <= 1e-9, "instance {case} {name}: {g} vs {w}");
        }
    }
    let sl1 = smooth_l1_scalar(1.0f64);
    ensure!((sl1 - 0.5).abs() < 1e-6, "smooth-L1(1) = {sl1}");
    let mut tape = Tape::<f64>::new();
    let logits = tape.leaf(Tensor::zeros(&[1, 11]));
    let ce = tape.softmax_cross_entropy_labels(logits, &[4]).map_err(|e| e.to_string())?;
    let ce = tape.value(ce).data()[0];
    ensure!((ce - 11f64.ln()).abs() < 1e-6, "uniform CE = {ce}");
    Ok(format!("100 instances, worst |Δ| {worst:.1e}; smooth-L1(1) = {sl1}, CE = ln 11"))
}

fn geometry_oracles() -> Outcome {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(7);
    let random_box = |rng: &mut Xoshiro256PlusPlus, lo: f64| {
        let (x, y) = (rng.random_range(0.0..200.0), rng.random_range(0.0..200.0));
        BBox::new(x, y, x + rng.random_range(lo..100.0), y + rng.random_range(lo..100.0))
    };
    for case in 0..1000 {
        let n = rng.random_range(0..=25usize);
        let dets: Vec<Detection> = (0..n)
            .map(|_| {
                let b = random_box(&mut rng, 1.0);
                Detection::new(b, f64::from(rng.random_range(0..=10u8)) / 10.0, rng.random_range(0..3)).unwrap()
            })
            .collect();
        let thr = rng.random_range(0.2..0.8);
        ensure!(nms(&dets, thr, usize::MAX) == ref_nms(&dets, thr), "NMS instance {case} differs");
    }
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (a, g) = (random_box(&mut rng, 2.0), random_box(&mut rng, 2.0));
        let back = decode_box(&a, &encode_box(&a, &g).map_err(|e| e.to_string())?);
        for (x, y) in [(back.x1, g.x1), (back.y1, g.y1), (back.x2, g.x2), (back.y2, g.y2)] {
            worst = worst.max((x - y).abs() / y.abs().max(1.0));
        }
    }
    ensure!(worst < 1e-6, "round-trip relative error {worst:e}");

    let cfg = toy_config();
    let (store, det) = Detector::build::<f32>(&cfg.model, 0).map_err(|e| e.to_string())?;
    for (h, w) in [(96, 96), (64, 128), (160, 96)] {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, h, w]));
        let pyr = det.pyramid(&mut tape, &store, x).map_err(|e| e.to_string())?;
        let levels = pyr.levels();
        let extents: Vec<(usize, usize)> = levels.iter().map(|&l| (tape.shape(l)[2], tape.shape(l)[3])).collect();
        let anchors = generate_anchors(&extents, (h, w), &cfg.model.anchors).map_err(|e| e.to_string())?;
        let rpn = det.rpn.forward(&mut tape, &store, &levels).map_err(|e| e.to_string())?;
        let scored: usize = rpn.objectness.iter().map(|&v| tape.value(v).numel()).sum();
        let closed = 3 * extents.iter().map(|(a, b)| a * b).sum::<usize>();
        ensure!(anchors.len() == closed && scored == closed, "{h}x{w}: {} anchors, {scored} scores, 3·ΣHW = {closed}", anchors.len());
    }
    let extents = [(192, 304), (96, 152), (48, 76), (24, 38), (12, 19)];
    let full_scale = generate_anchors(&extents, (768, 1216), &Default::default()).map_err(|e| e.to_string())?;
    let closed = 3 * extents.iter().map(|(a, b)| a * b).sum::<usize>();
    ensure!(full_scale.len() == closed, "768x1216: {} anchors vs {closed}", full_scale.len());
    Ok(format!("1000 NMS instances equal; round-trip worst {worst:.1e}; anchor counts = 3·ΣHW"))
}

fn toy_overfit() -> Outcome {
    let cfg = toy_config();
    let t = &cfg.train;
    ensure!(t.images == 8 && t.image_size == 96 && t.max_objects <= 3, "toy profile drifted: {t:?}");
    ensure!(t.iterations <= 2000 && t.images_per_step == 1, "toy profile drifted: {t:?}");
    let start = Instant::now();
    let outcome = train_toy(&cfg, &mut std::io::sink()).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let scenes = toy_scenes(&cfg).map_err(|e| e.to_string())?;
    let report = self_evaluate(&outcome.store, &outcome.detector, &scenes).map_err(|e| e.to_string())?;
    ensure!(report.ap_50 >= 0.9, "AP50 {:.4} after {} iterations", report.ap_50, t.iterations);
    ensure!(secs < 900.0, "training took {secs:.0}s");
    Ok(format!("AP50 {:.4} (AP {:.4}) after {} iterations in {secs:.0}s", report.ap_50, report.ap_5095, t.iterations))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = repo_root().join("configs/toy.cfg");
    let spawn = |name: &str| {
        Command::new(env!("CARGO_BIN_EXE_dense-fpn"))
            .args(["train-toy", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(dir.path().join(name))
            .stdout(std::process::Stdio::piped())
            .stderr(std::process::Stdio::piped())
            .spawn()
            .map_err(|e| e.to_string())
    };
    let runs = [spawn("a.bin")?, spawn("b.bin")?];
    let mut logs = Vec::new();
    for run in runs {
        let out = run.wait_with_output().map_err(|e| e.to_string())?;
        ensure!(out.status.success(), "train-toy failed: {}", String::from_utf8_lossy(&out.stderr));
        logs.push(out.stdout);
    }
    let a = std::fs::read(dir.path().join("a.bin")).map_err(|e| e.to_string())?;
    let b = std::fs::read(dir.path().join("b.bin")).map_err(|e| e.to_string())?;
    ensure!(a == b, "weight files differ");
    ensure!(logs[0] == logs[1], "loss logs differ");
    let lines = logs[0].iter().filter(|&&c| c == b'\n').count();
    ensure!(lines > 10, "log suspiciously short ({lines} lines)");
    Ok(format!("weights ({} bytes) and logs ({lines} lines) identical", a.len()))
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 8] = [
        ("gradient checks", gradient_checks),
        ("FPN equivalence", fpn_equivalence),
        ("ablation wiring", ablation_table),
        ("loss algebra", loss_algebra),
        ("metric oracle", metric_oracle),
        ("geometry oracles", geometry_oracles),
        ("toy overfit", toy_overfit),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    let _ = writeln!(std::io::stderr());
    for (i, (name, run)) in criteria.iter().enumerate() {
        let result = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let line = match &result {
            Ok(detail) => format!("acceptance {}: PASS {name}: {detail}", i + 1),
            Err(why) => format!("acceptance {}: FAIL {name}: {why}", i + 1),
        };
        // written to the raw handle so the line shows without --nocapture
        let _ = writeln!(std::io::stderr(), "{line}");
        if result.is_err() {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
