//! Momentum SGD and the synthetic-scene training loop.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{RngExt, SeedableRng};
use rand::seq::SliceRandom;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::autodiff::{ParamStore, Tape};
use crate::data::{random_hflip, resize_short_side, synth_scene};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::geometry::GtBox;
use crate::io::RunConfig;
use crate::model::Detector;
use crate::tensor::{Real, Tensor};

/// Per-parameter velocity buffers, created zeroed.
#[derive(Debug, Clone)]
pub struct Momentum<T> {
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> Momentum<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self { velocity: store.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect() }
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }
}

/// One update from the gradients accumulated in `store`:
/// `v ← m·v + g + wd·p`, then `p ← p − lr·v`.
pub fn sgd_momentum_step<T: Real>(
    store: &mut ParamStore<T>,
    state: &mut Momentum<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if state.velocity.len() != store.len() {
        return Err(Error::invalid(
            "sgd_momentum_step",
            format!("optimizer tracks {} parameters, store has {}", state.velocity.len(), store.len()),
        ));
    }
    let (lr, m, wd) = (T::lit(lr), T::lit(momentum), T::lit(weight_decay));
    let ids: Vec<_> = store.ids().collect();
    for (id, v) in ids.into_iter().zip(&mut state.velocity) {
        let g = store.grad(id);
        if !g.all_finite() {
            return Err(Error::invalid("sgd_momentum_step", format!("non-finite gradient for `{}`", store.get(id).name())));
        }
        for ((vi, &gi), &pi) in v.data_mut().iter_mut().zip(g.data()).zip(store.value(id).data()) {
            *vi = m * *vi + gi + wd * pi;
        }
        for (pi, &vi) in store.value_mut(id).data_mut().iter_mut().zip(v.data()) {
            *pi -= lr * vi;
        }
    }
    Ok(())
}

/// One synthetic image with its boxes.
pub type Scene = (Tensor<f32>, Vec<GtBox>);

/// The fixed training set: `train.images` scenes of `train.image_size`
/// pixels, each with 1..=`train.max_objects` rectangles. Ids are
/// `scene_000`, `scene_001`, ….
pub fn toy_scenes(cfg: &RunConfig) -> Result<BTreeMap<String, Scene>> {
    let t = &cfg.train;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed ^ 0x5CE7E5);
    (0..t.images)
        .map(|i| {
            let n = rng.random_range(1..=t.max_objects.max(1));
            let scene = synth_scene(rng.random(), (t.image_size, t.image_size), n)?;
            Ok((format!("scene_{i:03}"), scene))
        })
        .collect()
}

/// Runs detection on every scene and scores it against the scene's boxes.
pub fn self_evaluate(
    store: &ParamStore<f32>,
    det: &Detector,
    scenes: &BTreeMap<String, Scene>,
) -> Result<EvalReport> {
    let mut dets = BTreeMap::new();
    let mut gts = BTreeMap::new();
    for (id, (img, g)) in scenes {
        dets.insert(id.clone(), det.detect(store, img)?);
        gts.insert(id.clone(), g.clone());
    }
    evaluate(&dets, &gts)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub store: ParamStore<f32>,
    pub detector: Detector,
    pub final_loss: f64,
}

/// Trains from scratch on [`toy_scenes`], writing one log line every
/// `train.log_interval` iterations (and at the last) plus one per
/// self-evaluation. Output depends only on `cfg`.
pub fn train_toy(cfg: &RunConfig, log: &mut dyn Write) -> Result<TrainOutcome> {
    cfg.validate()?;
    let io_err = |e| Error::io("training log", e);
    let scenes = toy_scenes(cfg)?;
    let inputs: Vec<Scene> =
        scenes.values().map(|(img, g)| resize_short_side(img, g, cfg.input.short_side)).collect::<Result<_>>()?;
    let (mut store, det) = Detector::build::<f32>(&cfg.model, cfg.seed)?;
    let mut state = Momentum::new(&store);
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = Vec::new();
    let t = &cfg.train;
    let per_step = t.images_per_step;
    let mut final_loss = f64::NAN;

    writeln!(log, "params {} scenes {} iterations {}", store.num_elements(), inputs.len(), t.iterations).map_err(io_err)?;
    for iter in 0..t.iterations {
        store.zero_grads();
        let (mut total, mut cls, mut reg) = (0.0, 0.0, 0.0);
        for _ in 0..per_step {
            if order.is_empty() {
                order = (0..inputs.len()).collect();
                order.shuffle(&mut rng);
            }
            let (img, gts) = &inputs[order.pop().expect("refilled above")];
            let (img, gts, _) = random_hflip(img, gts, cfg.input.flip_probability, rng.random())?;
            let mut tape = Tape::new();
            let fwd = det.training_loss(&mut tape, &store, &img, &gts, rng.random())?;
            let value = |v| tape.value(v).data()[0] as f64;
            total += value(fwd.terms.total) / per_step as f64;
            cls += value(fwd.terms.cls) / per_step as f64;
            reg += value(fwd.terms.reg) / per_step as f64;
            let loss = tape.scale(fwd.terms.total, 1.0 / per_step as f32);
            tape.backward(loss, &mut store)?;
        }
        if !total.is_finite() {
            return Err(Error::invalid("train_toy", format!("loss diverged at iteration {iter}")));
        }
        let lr = cfg.optimizer.lr_at(iter);
        sgd_momentum_step(&mut store, &mut state, lr, cfg.optimizer.momentum, cfg.optimizer.weight_decay)?;
        final_loss = total;

        let step = iter + 1;
        if (t.log_interval > 0 && step % t.log_interval == 0) || step == t.iterations {
            writeln!(log, "iter {step:6} lr {lr:.6e} loss {total:.6} cls {cls:.6} reg {reg:.6}").map_err(io_err)?;
        }
        if t.eval_interval > 0 && (step % t.eval_interval == 0 || step == t.iterations) {
            let r = self_evaluate(&store, &det, &scenes)?;
            writeln!(log, "eval {step:6} ap {:.4} ap50 {:.4} ap75 {:.4} ar100 {:.4}", r.ap_5095, r.ap_50, r.ap_75, r.ar_100)
                .map_err(io_err)?;
        }
    }
    Ok(TrainOutcome { store, detector: det, final_loss })
}
