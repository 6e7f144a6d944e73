use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dense_fpn::autodiff::{ParamStore, Tape};
use dense_fpn::backbone::Backbone;
use dense_fpn::data::resize_short_side;
use dense_fpn::eval::{evaluate, per_class_report};
use dense_fpn::fusion::{dmffpn_forward, FusionConfig, FusionParams};
use dense_fpn::geometry::{clip_box, Detection, NUM_CLASSES};
use dense_fpn::gradcheck::run_suite;
use dense_fpn::io::{
    gt_to_annotation, list_files, load_annotation_dir, load_detections, load_image, load_weights,
    save_image, write_annotations, write_detections, RunConfig,
};
use dense_fpn::model::Detector;
use dense_fpn::nn::Init;
use dense_fpn::train::{toy_scenes, train_toy};
use dense_fpn::{Error, Tensor};

#[derive(Parser)]
#[command(name = "dense-fpn", version, about = "Dense multiscale fusion pyramid detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of every differentiable op and the full loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pyramid shapes for one config plus the four-way ablation parameter table.
    FuseDemo {
        #[arg(long)]
        config: PathBuf,
        /// Side of the square synthetic input.
        #[arg(long, default_value_t = 128)]
        size: usize,
    },
    /// Train from scratch on synthetic rectangle scenes.
    TrainToy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the synthetic training scenes as PPM images and annotation files.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a trained model over every .ppm image in a directory.
    Detect {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Model config; defaults to the built-in full-scale profile.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score a detection file against a directory of annotation files.
    Eval {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
}

enum Failure {
    Data(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

fn stdout_err(e: io::Error) -> Failure {
    Failure::Data(Error::Io { path: "<stdout>".into(), source: e })
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    Ok(path.map(RunConfig::load).transpose()?.unwrap_or_default())
}

fn gradcheck(seed: u64, out: &mut impl Write) -> Result<(), Failure> {
    let report = run_suite(seed)?;
    for case in &report.cases {
        writeln!(out, "{case}").map_err(stdout_err)?;
    }
    let failed = report.cases.iter().filter(|c| !c.passed()).count();
    writeln!(out, "{} cases, {failed} failed, {:.2}s", report.cases.len(), report.elapsed.as_secs_f64())
        .map_err(stdout_err)?;
    if failed > 0 {
        return Err(Failure::Check(format!("{failed} gradient check case(s) failed")));
    }
    Ok(())
}

fn row_name(f: &FusionConfig) -> String {
    let target = match (f.dense_to_p2, f.dense_to_p3) {
        (true, true) => "P2+P3",
        (true, false) => "P2",
        (false, true) => "P3",
        (false, false) => "none",
    };
    format!("{target} {}", f.mode)
}

fn fuse_demo(config: &Path, size: usize, out: &mut impl Write) -> Result<(), Failure> {
    let cfg = RunConfig::load(config)?;
    let m = &cfg.model;
    let mut store = ParamStore::<f32>::new();
    let mut init = Init::new(cfg.seed);
    let backbone = Backbone::new(&mut store, &mut init, &m.backbone)?;
    let fusion = FusionParams::new(&mut store, &mut init, backbone.out_channels(), &m.fusion)?;
    let image = Tensor::from_fn(&[1, m.backbone.input_channels, size, size], |i| ((i * 7919) % 255) as f32 / 255.0);
    let mut tape = Tape::new();
    let x = tape.constant(image);
    let feats = backbone.forward(&mut tape, &store, x)?;
    let pyr = dmffpn_forward(&mut tape, &store, &feats, &m.fusion, &fusion)?;

    let w = |e| stdout_err(e);
    writeln!(out, "config: {} ({})", row_name(&m.fusion), config.display()).map_err(w)?;
    writeln!(out, "{:<6}{:<22}stride", "level", "shape").map_err(w)?;
    for (i, &c) in feats.c.iter().enumerate() {
        writeln!(out, "C{:<5}{:<22}{}", i + 2, format!("{:?}", tape.shape(c)), 4 << i).map_err(w)?;
    }
    for (i, &p) in pyr.levels().iter().enumerate() {
        writeln!(out, "P{:<5}{:<22}{}", i + 2, format!("{:?}", tape.shape(p)), 4 << i).map_err(w)?;
    }
    writeln!(out).map_err(w)?;
    writeln!(out, "ablation (fusion width {}, backbone {:?})", m.fusion.out_channels, m.backbone.stage_channels)
        .map_err(w)?;
    writeln!(out, "{:<14}{:>10}{:>10}{:>14}{:>14}", "row", "P2* in", "P3* in", "dense params", "fusion params")
        .map_err(w)?;
    let width = |v: Option<usize>| v.map_or("-".to_string(), |x| x.to_string());
    for row in FusionConfig::ablation_rows(m.fusion.out_channels) {
        let row = FusionConfig { add_p6: m.fusion.add_p6, ..row };
        let mut s = ParamStore::<f32>::new();
        let params = FusionParams::new(&mut s, &mut Init::new(0), backbone.out_channels(), &row)?;
        writeln!(
            out,
            "{:<14}{:>10}{:>10}{:>14}{:>14}",
            row_name(&row),
            width(row.fusion_input_width(2)),
            width(row.fusion_input_width(3)),
            params.num_params() - params.baseline_params(),
            params.num_params()
        )
        .map_err(w)?;
    }
    Ok(())
}

fn train(config: &Path, weights: &Path, out: &mut impl Write) -> Result<(), Failure> {
    let cfg = RunConfig::load(config)?;
    let outcome = train_toy(&cfg, out)?;
    dense_fpn::io::save_weights(&outcome.store, weights)?;
    Ok(())
}

fn synth(config: &Path, dir: &Path) -> Result<(), Failure> {
    let cfg = RunConfig::load(config)?;
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    for (id, (img, gts)) in toy_scenes(&cfg)? {
        save_image(&img, &dir.join(format!("{id}.ppm")))?;
        let anns: Vec<_> = gts.iter().map(gt_to_annotation).collect();
        let path = dir.join(format!("{id}.txt"));
        fs::write(&path, write_annotations(&anns)).map_err(|e| Error::Io { path, source: e })?;
    }
    Ok(())
}

fn detect(weights: &Path, input: &Path, out: &Path, config: Option<&Path>) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let (mut store, det) = Detector::build::<f32>(&cfg.model, cfg.seed)?;
    load_weights(&mut store, weights)?;
    let mut all = BTreeMap::new();
    for (id, path) in list_files(input, "ppm")? {
        let image = load_image(&path)?;
        let (h, w) = (image.shape()[2] as f64, image.shape()[3] as f64);
        let (resized, _) = resize_short_side(&image, &[], cfg.input.short_side)?;
        let back = h.min(w) / cfg.input.short_side as f64;
        let dets: Vec<Detection> = det
            .detect(&store, &resized)?
            .into_iter()
            .filter_map(|d| {
                let b = clip_box(&d.bbox.scale(back, back), w, h);
                Detection::new(b, d.score, d.class_id).ok().filter(|d| d.bbox.area() > 0.0)
            })
            .collect();
        all.insert(id, dets);
    }
    fs::write(out, write_detections(&all)).map_err(|e| Error::Io { path: out.into(), source: e })?;
    Ok(())
}

fn eval(dets: &Path, gt: &Path, out: &mut impl Write) -> Result<(), Failure> {
    let gts = load_annotation_dir(gt)?;
    let mut dets = load_detections(dets)?;
    for id in gts.keys() {
        dets.entry(id.clone()).or_default();
    }
    let report = evaluate(&dets, &gts)?;
    let per_class = per_class_report(&dets, &gts)?;
    let w = |e| stdout_err(e);
    writeln!(out, "{report}").map_err(w)?;
    writeln!(out, "{:<8}{:>10}", "class", "AP").map_err(w)?;
    for (c, ap) in per_class.iter().enumerate().take(NUM_CLASSES) {
        let v = ap.map_or("undefined".to_string(), |v| format!("{:.2}", 100.0 * v));
        writeln!(out, "{:<8}{:>10}", c + 1, v).map_err(w)?;
    }
    writeln!(out).map_err(w)?;
    write!(out, "{}", report.to_key_values()).map_err(w)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    let result = match cli.command {
        Command::Gradcheck { seed } => gradcheck(seed, &mut out),
        Command::FuseDemo { config, size } => fuse_demo(&config, size, &mut out),
        Command::TrainToy { config, out: weights } => train(&config, &weights, &mut out),
        Command::Synth { config, out: dir } => synth(&config, &dir),
        Command::Detect { weights, input, out: dets, config } => detect(&weights, &input, &dets, config.as_deref()),
        Command::Eval { dets, gt } => eval(&dets, &gt, &mut out),
    };
    out.flush().map_err(stdout_err)?;
    result
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(3)
        }
    }
}
