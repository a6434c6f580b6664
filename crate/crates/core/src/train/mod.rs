//! Training by unrolling the inference pipeline over short windows.

pub mod loss;

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use clickvos_tensor::{Adam, Graph, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotate::annotate_first_frame;
use crate::error::{Error, Result};
use crate::eval::{evaluate, FrameSelection};
use crate::model::{infer_video, AbsModel, InferOptions, MemoryFlags};
use crate::synth::VideoSample;

pub use loss::{bootstrapped_ce, dice_loss, DICE_EPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub t_train: usize,
    /// Leading steps trained on two-frame windows before `t_train` applies.
    pub short_window_steps: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub bootstrap_ratio: f64,
    pub ce_weight: f64,
    pub dice_weight: f64,
    pub seed: u64,
    /// Validate every this many steps; 0 disables validation.
    pub eval_every: usize,
    /// Validation sequences used per evaluation.
    pub eval_sequences: usize,
    #[serde(flatten)]
    pub memory: MemoryFlags,
    /// Cut gradients between frames by re-entering memory as constants.
    pub detach_memory: bool,
    /// Decay of a running parameter average that replaces the final
    /// weights; 0 keeps the last iterate.
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            t_train: 4,
            short_window_steps: 0,
            batch_size: 4,
            steps: 1000,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            bootstrap_ratio: 0.4,
            ce_weight: 1.0,
            dice_weight: 1.0,
            seed: 0,
            eval_every: 0,
            eval_sequences: 8,
            memory: MemoryFlags::default(),
            detach_memory: false,
            ema_decay: 0.0,
        }
    }
}

impl TrainConfig {
    /// Optimiser settings of the original large-scale recipe.
    pub fn large_scale_preset() -> Self {
        Self {
            lr: 1e-5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_train < 2 {
            return Err(Error::Config(format!("t_train must be at least 2, got {}", self.t_train)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.bootstrap_ratio > 0.0 && self.bootstrap_ratio <= 1.0) {
            return Err(Error::Config(format!("bootstrap_ratio {} outside (0, 1]", self.bootstrap_ratio)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay {} outside [0, 1)", self.ema_decay)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub ce: f64,
    pub dice: f64,
    pub total: f64,
    pub val_j: Option<f64>,
    pub val_f: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub seconds: f64,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,ce,dice,total,val_J,val_F\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{},{}",
                r.step,
                r.ce,
                r.dice,
                r.total,
                opt(r.val_j),
                opt(r.val_f)
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Losses of one window, summed over frames.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WindowLoss {
    pub ce: f64,
    pub dice: f64,
    pub total: f64,
}

/// First frames at which every object of the sample is visible, leaving
/// room for `len` frames.
pub fn window_starts(sample: &VideoSample, len: usize) -> Vec<usize> {
    if sample.num_frames() < len {
        return Vec::new();
    }
    (0..=sample.num_frames() - len)
        .filter(|&t| {
            let labels = sample.masks[t].labels();
            sample.object_ids.iter().all(|id| labels.contains(id))
        })
        .collect()
}

/// Forward and backward over one window; gradients are added to the
/// parameter store.
pub fn window_step(model: &mut AbsModel, window: &VideoSample, click_seed: u64, cfg: &TrainConfig) -> Result<WindowLoss> {
    let points = annotate_first_frame(&window.masks[0], click_seed)?;
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let mut memory = None;
    let mut warnings = Vec::new();
    let mut terms = Vec::with_capacity(window.num_frames());
    let (mut ce_sum, mut dice_sum) = (0.0, 0.0);
    for t in 0..window.num_frames() {
        if cfg.detach_memory {
            if let Some(m) = memory.as_ref() {
                let frozen = crate::model::MemoryState::materialize(m, &g);
                memory = Some(frozen.bind(&mut g));
            }
        }
        let out = model.forward_frame(
            &mut g,
            &p,
            &window.frames[t],
            &window.flow_images[t],
            &points,
            cfg.memory,
            &mut memory,
            None,
            &mut warnings,
        )?;
        let ce = bootstrapped_ce(&mut g, out.logits, &window.masks[t], cfg.bootstrap_ratio)?;
        let dice = dice_loss(&mut g, out.logits, &window.masks[t])?;
        ce_sum += g.scalar(ce);
        dice_sum += g.scalar(dice);
        let a = g.scale(ce, cfg.ce_weight)?;
        let b = g.scale(dice, cfg.dice_weight)?;
        terms.push(g.add(a, b)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    let total_value = g.scalar(total);
    if !total_value.is_finite() {
        return Err(TensorError::NonFinite { kind: "loss" }.into());
    }
    g.backward(total)?;
    model.params.accumulate_grads(&g, &p);
    Ok(WindowLoss {
        ce: ce_sum,
        dice: dice_sum,
        total: total_value,
    })
}

/// Mean J and F of `model` over `samples` with clicks seeded by each sample's seed.
pub fn validate_model(model: &AbsModel, samples: &[VideoSample], flags: MemoryFlags) -> Result<(f64, f64)> {
    let mut pred = Vec::with_capacity(samples.len());
    let mut gt = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let points = annotate_first_frame(&s.masks[0], s.seed)?;
        let out = infer_video(
            model,
            s,
            &points,
            &InferOptions {
                flags,
                first_mask_override: None,
            },
        )?;
        pred.push((format!("{i:04}"), out.masks));
        gt.push((format!("{i:04}"), s.masks.clone()));
    }
    let r = evaluate(&pred, &gt, FrameSelection::All)?;
    Ok((r.j, r.f))
}

fn is_numeric_failure(e: &Error) -> bool {
    matches!(e, Error::Tensor(TensorError::NonFinite { .. }))
}

/// Trains `model` in place. On a non-finite loss the parameters are rolled
/// back to the last good step and `Error::Diverged` is returned; the log up
/// to that point is kept in `log`.
pub fn train(
    model: &mut AbsModel,
    train_set: &[VideoSample],
    val_set: &[VideoSample],
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<()> {
    train_with(model, train_set, val_set, cfg, log, |_, _| {})
}

/// [`train`] with a callback invoked after every step with its log row.
pub fn train_with(
    model: &mut AbsModel,
    train_set: &[VideoSample],
    val_set: &[VideoSample],
    cfg: &TrainConfig,
    log: &mut TrainLog,
    mut on_step: impl FnMut(&LogRow, &AbsModel),
) -> Result<()> {
    cfg.validate()?;
    let candidates_for = |len: usize| -> Result<Vec<(usize, Vec<usize>)>> {
        let c: Vec<_> = train_set
            .iter()
            .enumerate()
            .map(|(i, s)| (i, window_starts(s, len)))
            .filter(|(_, w)| !w.is_empty())
            .collect();
        if c.is_empty() {
            return Err(Error::Config(format!(
                "no training sequence has a {len}-frame window with every object visible"
            )));
        }
        Ok(c)
    };
    let long = candidates_for(cfg.t_train)?;
    let short = if cfg.short_window_steps > 0 { candidates_for(2)? } else { Vec::new() };
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let val = &val_set[..cfg.eval_sequences.min(val_set.len())];
    model.params.zero_grads();
    let mut average: Option<Vec<Vec<f64>>> =
        (cfg.ema_decay > 0.0).then(|| model.params.iter().map(|(_, t)| t.data().to_vec()).collect());
    for step in 0..cfg.steps {
        let good = model.params.clone();
        let mut acc = WindowLoss::default();
        let (candidates, len) = if step < cfg.short_window_steps { (&short, 2) } else { (&long, cfg.t_train) };
        for _ in 0..cfg.batch_size {
            let (idx, starts) = &candidates[rng.random_range(0..candidates.len())];
            let t0 = starts[rng.random_range(0..starts.len())];
            let window = train_set[*idx].window(t0, len);
            let click_seed: u64 = rng.random();
            match window_step(model, &window, click_seed, cfg) {
                Ok(l) => {
                    acc.ce += l.ce;
                    acc.dice += l.dice;
                    acc.total += l.total;
                }
                Err(e) if is_numeric_failure(&e) => {
                    model.params = good;
                    log.seconds = start.elapsed().as_secs_f64();
                    return Err(Error::Diverged { step });
                }
                Err(e) => return Err(e),
            }
        }
        let b = cfg.batch_size as f64;
        adam.step(&mut model.params, 1.0 / b);
        model.params.zero_grads();
        if model.params.iter().any(|(_, t)| t.data().iter().any(|v| !v.is_finite())) {
            model.params = good;
            log.seconds = start.elapsed().as_secs_f64();
            return Err(Error::Diverged { step });
        }
        if let Some(avg) = average.as_mut() {
            let d = cfg.ema_decay;
            for (a, (_, t)) in avg.iter_mut().zip(model.params.iter()) {
                a.iter_mut().zip(t.data()).for_each(|(a, &v)| *a = d * *a + (1.0 - d) * v);
            }
        }
        let mut row = LogRow {
            step,
            ce: acc.ce / b,
            dice: acc.dice / b,
            total: acc.total / b,
            val_j: None,
            val_f: None,
        };
        if cfg.eval_every > 0 && !val.is_empty() && (step + 1) % cfg.eval_every == 0 {
            let (j, f) = validate_model(model, val, cfg.memory)?;
            row.val_j = Some(j);
            row.val_f = Some(f);
        }
        on_step(&row, model);
        log.rows.push(row);
    }
    if let Some(avg) = average {
        for (a, (_, t)) in avg.into_iter().zip(model.params.iter_mut()) {
            t.data_mut().copy_from_slice(&a);
        }
    }
    log.seconds = start.elapsed().as_secs_f64();
    Ok(())
}
