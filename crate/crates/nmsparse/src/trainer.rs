//! Training loop: schedule-driven mask lifecycle, Adam/SGD updates with the
//! straight-through estimator, analytic FLOPs accounting, JSONL metrics and
//! binary checkpoints.

use crate::config::{OptKind, OptimizerConfig, RunConfig};
use crate::cost;
use crate::error::{Error, Result};
use crate::model::{build_model, token_matches, MaskSet, Transformer};
use crate::nm::{build_mask, build_unstructured_mask, MaskMode};
use crate::schedule::{PhaseKind, PhaseSpec, Recipe};
use crate::task::{generate_task, Example};
use crate::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

/// Adam (bias-corrected) or plain SGD over named tensors. Moment state is
/// keyed by parameter name, so the update order never matters.
pub struct Optimizer {
    cfg: OptimizerConfig,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: i32,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    /// Call once per training step, before the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Apply one gradient at an explicit rate (callers pass the scheduled
    /// rate for the current step).
    pub fn update(&mut self, name: &str, w: &mut Tensor, g: &Tensor, lr: f64) -> Result<()> {
        if w.shape != g.shape {
            return Err(Error::ShapeMismatch {
                op: "optimizer_update",
                lhs: w.shape.clone(),
                rhs: g.shape.clone(),
            });
        }
        match self.cfg.kind {
            OptKind::Sgd => {
                for (wi, gi) in w.data.iter_mut().zip(&g.data) {
                    *wi -= lr * gi;
                }
            }
            OptKind::Adam => {
                let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
                let m = self
                    .m
                    .entry(name.to_string())
                    .or_insert_with(|| vec![0.0; w.len()]);
                let v = self
                    .v
                    .entry(name.to_string())
                    .or_insert_with(|| vec![0.0; w.len()]);
                let bc1 = 1.0 - b1.powi(self.t);
                let bc2 = 1.0 - b2.powi(self.t);
                for i in 0..w.len() {
                    let gi = g.data[i];
                    m[i] = b1 * m[i] + (1.0 - b1) * gi;
                    v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                    let mh = m[i] / bc1;
                    let vh = v[i] / bc2;
                    w.data[i] -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EvalMetrics {
    pub val_loss: f64,
    pub token_acc: f64,
    pub seq_acc: f64,
}

/// Deterministic metrics over a validation stream. Teacher-forced loss and
/// token accuracy cover all `examples`; greedy-decode sequence accuracy
/// covers the first `seq_budget` of them (0 = all).
pub fn evaluate(
    model: &Transformer,
    masks: Option<&MaskSet>,
    examples: &[Example],
    seq_budget: usize,
) -> Result<EvalMetrics> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument(
            "evaluate requires a non-empty validation stream".into(),
        ));
    }
    let mut loss_weighted = 0.0;
    let mut total_tokens = 0usize;
    let mut correct = 0usize;
    for chunk in examples.chunks(16) {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, masks, false)?;
        let batch: Vec<&Example> = chunk.iter().collect();
        let (loss, logits) = model.loss_batch(&mut tape, &bound, &batch)?;
        let chunk_tokens: usize = chunk.iter().map(|ex| ex.target.len() - 1).sum();
        loss_weighted += tape.value(loss).item() * chunk_tokens as f64;
        total_tokens += chunk_tokens;
        for (ex, lg) in chunk.iter().zip(&logits) {
            let (c, _) = token_matches(tape.value(*lg), &ex.target[1..]);
            correct += c;
        }
    }
    let seq_n = if seq_budget == 0 {
        examples.len()
    } else {
        seq_budget.min(examples.len())
    };
    let mut seq_correct = 0usize;
    for ex in &examples[..seq_n] {
        let decoded = model.greedy_decode(masks, &ex.source)?;
        if decoded == ex.target[1..ex.target.len() - 1] {
            seq_correct += 1;
        }
    }
    Ok(EvalMetrics {
        val_loss: loss_weighted / total_tokens as f64,
        token_acc: correct as f64 / total_tokens as f64,
        seq_acc: seq_correct as f64 / seq_n as f64,
    })
}

#[derive(Debug, Serialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub phase: PhaseKind,
    pub pattern: String,
    pub decay_value: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub token_acc: f64,
    pub seq_acc: f64,
    pub density: f64,
    pub mask_refreshes: usize,
    pub cum_train_flops: f64,
}

pub struct TrainOutcome {
    pub model: Transformer,
    pub masks: Option<MaskSet>,
    pub final_eval: EvalMetrics,
    pub final_train_loss: f64,
    pub cum_train_flops: f64,
    pub mask_refresh_count: usize,
    pub run_dir: PathBuf,
}

fn rebuild_masks(
    model: &Transformer,
    phase: &PhaseSpec,
    unstructured: bool,
) -> Result<MaskSet> {
    let pattern = phase
        .active_pattern
        .expect("mask refresh only happens in sparse phases");
    let mut masks = MaskSet::new();
    for entry in &model.registry {
        let w = &model.params[&entry.name];
        let mask = if unstructured {
            build_unstructured_mask(w, pattern.density())?
        } else {
            build_mask(w, pattern, entry.axis, phase.mask_mode, phase.decay_value)?
        };
        masks.insert(entry.name.clone(), mask);
    }
    Ok(masks)
}

/// Debug-build consistency check: every held mask matches what the schedule
/// says should be active.
#[cfg(debug_assertions)]
fn assert_masks_match_phase(masks: &MaskSet, phase: &PhaseSpec, unstructured: bool) {
    let pattern = phase.active_pattern.expect("sparse phase");
    for (name, mask) in masks {
        debug_assert_eq!(
            mask.mode, phase.mask_mode,
            "mask {name} mode disagrees with schedule"
        );
        if !unstructured {
            debug_assert_eq!(
                mask.pattern,
                Some(pattern),
                "mask {name} pattern disagrees with schedule"
            );
        }
        if mask.mode == MaskMode::Decayed {
            debug_assert!(
                (mask.decay_value - phase.decay_value).abs() < 1e-15,
                "mask {name} decay multiplier {} != scheduled {}",
                mask.decay_value,
                phase.decay_value
            );
        }
        let want = pattern.density();
        debug_assert!(
            (mask.density() - want).abs() < 1e-9,
            "mask {name} density {} != {want}",
            mask.density()
        );
    }
}

/// Run one full training schedule. Writes `config.resolved.cfg`,
/// `metrics.jsonl`, `summary.json` and `checkpoint.nmsf` into `run_dir`.
pub fn train(cfg: &RunConfig, run_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let schedule = &cfg.schedule;
    if schedule.recipe != Recipe::Dense {
        // Fail before any compute if the pattern cannot tile the weights.
        build_model(&cfg.model, 0)?.validate_pattern(schedule.target_pattern)?;
    }
    std::fs::create_dir_all(run_dir)?;
    std::fs::write(run_dir.join("config.resolved.cfg"), cfg.resolved_text())?;
    let mut metrics_file = std::io::BufWriter::new(std::fs::File::create(
        run_dir.join("metrics.jsonl"),
    )?);

    let dataset = generate_task(
        &crate::task::ToyTask {
            seed: cfg.seed,
            ..cfg.task
        },
        cfg.model.max_len,
    )?;
    if dataset.train.is_empty() {
        return Err(Error::Config("task has no training examples".into()));
    }
    let mut model = build_model(&cfg.model, cfg.seed.wrapping_add(1))?;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut opt = Optimizer::new(cfg.optimizer);
    let report = cost::count_costs(
        &cfg.model,
        cfg.task.len_max + 2,
        cfg.model.vocab,
    )?;
    let unstructured = schedule.recipe == Recipe::UnstructuredOneShot;
    let srste = schedule.recipe == Recipe::SrSte;
    let eval_interval = cfg.eval_interval();

    let mut masks: Option<MaskSet> = None;
    let mut refresh_count = 0usize;
    let mut cum_flops = 0.0f64;
    let mut train_loss = f64::NAN;

    for step in 0..schedule.total_steps {
        let phase = crate::schedule::phase_at(step, schedule)?;
        match phase.phase_kind {
            PhaseKind::Dense => masks = None,
            _ => {
                if phase.refresh_mask {
                    masks = Some(rebuild_masks(&model, &phase, unstructured)?);
                    refresh_count += 1;
                } else if let Some(ms) = masks.as_mut() {
                    // Fine-tune boundary for mask decay: locations freeze
                    // and the multiplier drops to exactly zero.
                    if phase.mask_mode == MaskMode::Binary
                        && ms.values().any(|m| m.mode == MaskMode::Decayed)
                    {
                        for m in ms.values_mut() {
                            m.bake_binary();
                        }
                    }
                }
            }
        }
        #[cfg(debug_assertions)]
        if let (Some(ms), Some(_)) = (&masks, phase.active_pattern) {
            if !unstructured || phase.refresh_mask {
                assert_masks_match_phase(ms, &phase, unstructured);
            }
        }

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, masks.as_ref(), true)?;
        let batch: Vec<&Example> = (0..cfg.train.batch_size)
            .map(|_| &dataset.train[batch_rng.gen_range(0..dataset.train.len())])
            .collect();
        let (loss, _) = model.loss_batch(&mut tape, &bound, &batch)?;
        train_loss = tape.value(loss).item();
        if !train_loss.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("training loss became {train_loss}"),
            });
        }
        tape.backward(loss)?;

        opt.begin_step();
        let lr = cfg.optimizer.lr_at(step, schedule.total_steps);
        let names: Vec<String> = model.params.keys().cloned().collect();
        for name in &names {
            // SR-STE updates registered weights with the dense
            // straight-through gradient read at the mask-product node; every
            // other recipe (and every unregistered weight) uses the leaf
            // gradient, which the mask already scaled.
            let grad_node = if srste {
                bound.effective.get(name).copied().unwrap_or(bound.leaf(name))
            } else {
                bound.leaf(name)
            };
            let g = tape
                .grad(grad_node)
                .ok_or_else(|| Error::InvalidArgument(format!("no gradient for {name}")))?
                .clone();
            let w = model.params.get_mut(name).expect("known parameter");
            opt.update(name, w, &g, lr)?;
            if srste {
                if let Some(mask) = masks.as_ref().and_then(|ms| ms.get(name)) {
                    for (wi, mi) in w.data.iter_mut().zip(&mask.values.data) {
                        *wi -= lr * cfg.lambda_w * (1.0 - mi) * *wi;
                    }
                }
            }
            if w.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::Divergence {
                    step,
                    detail: format!("parameter {name} became non-finite"),
                });
            }
        }

        cum_flops += cfg.train.batch_size as f64
            * cost::step_compute_flops(&report, cost::phase_ff_factor(&phase));
        if phase.refresh_mask {
            cum_flops += cost::refresh_flops(
                &report,
                phase.active_pattern.expect("refresh implies a pattern"),
                unstructured,
            );
        }

        let last = step + 1 == schedule.total_steps;
        if (step + 1) % eval_interval == 0 || last {
            let eval_n = if cfg.train.eval_examples == 0 {
                dataset.val.len()
            } else {
                cfg.train.eval_examples.min(dataset.val.len())
            };
            let ev = evaluate(
                &model,
                masks.as_ref(),
                &dataset.val[..eval_n],
                cfg.train.seq_eval_examples,
            )?;
            let record = MetricsRecord {
                step,
                phase: phase.phase_kind,
                pattern: phase
                    .active_pattern
                    .map(|p| p.to_string())
                    .unwrap_or_else(|| "dense".into()),
                decay_value: phase.decay_value,
                train_loss,
                val_loss: ev.val_loss,
                token_acc: ev.token_acc,
                seq_acc: ev.seq_acc,
                density: masks
                    .as_ref()
                    .map(|ms| {
                        ms.values().map(|m| m.density()).sum::<f64>() / ms.len() as f64
                    })
                    .unwrap_or(1.0),
                mask_refreshes: refresh_count,
                cum_train_flops: cum_flops,
            };
            serde_json::to_writer(&mut metrics_file, &record)
                .map_err(|e| Error::Malformed(format!("metrics serialization: {e}")))?;
            metrics_file.write_all(b"\n")?;
        }
    }
    metrics_file.flush()?;

    let final_eval = evaluate(
        &model,
        masks.as_ref(),
        &dataset.val,
        cfg.train.final_seq_examples,
    )?;
    #[derive(Serialize)]
    struct Summary<'a> {
        run_id: String,
        recipe: &'a str,
        pattern: String,
        seed: u64,
        final_train_loss: f64,
        val_loss: f64,
        token_acc: f64,
        seq_acc: f64,
        mask_refreshes: usize,
        cum_train_flops: f64,
        avg_step_flops: f64,
    }
    let summary = Summary {
        run_id: cfg.run_id(),
        recipe: schedule.recipe.name(),
        pattern: if schedule.recipe == Recipe::Dense {
            "dense".into()
        } else {
            schedule.target_pattern.to_string()
        },
        seed: cfg.seed,
        final_train_loss: train_loss,
        val_loss: final_eval.val_loss,
        token_acc: final_eval.token_acc,
        seq_acc: final_eval.seq_acc,
        mask_refreshes: refresh_count,
        cum_train_flops: cum_flops,
        avg_step_flops: cum_flops / schedule.total_steps as f64,
    };
    std::fs::write(
        run_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)
            .map_err(|e| Error::Malformed(format!("summary serialization: {e}")))?,
    )?;
    save_checkpoint(
        &run_dir.join("checkpoint.nmsf"),
        &cfg.resolved_text(),
        &model.params,
    )?;

    Ok(TrainOutcome {
        model,
        masks,
        final_eval,
        final_train_loss: train_loss,
        cum_train_flops: cum_flops,
        mask_refresh_count: refresh_count,
        run_dir: run_dir.to_path_buf(),
    })
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NMSF";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Little-endian binary checkpoint: resolved config text followed by named
/// f64 tensors.
pub fn save_checkpoint(
    path: &Path,
    config_text: &str,
    params: &BTreeMap<String, Tensor>,
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in &t.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(String, BTreeMap<String, Tensor>)> {
    let bytes = std::fs::read(path)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Malformed("checkpoint truncated".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != CHECKPOINT_MAGIC {
        return Err(Error::Malformed("not a checkpoint file (bad magic)".into()));
    }
    let version = take(&mut pos, 1)?[0];
    if version != CHECKPOINT_VERSION {
        return Err(Error::Malformed(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let cfg_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let config_text = String::from_utf8(take(&mut pos, cfg_len)?.to_vec())
        .map_err(|_| Error::Malformed("checkpoint config is not UTF-8".into()))?;
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut params = BTreeMap::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?;
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(&mut pos, n * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    if pos != bytes.len() {
        return Err(Error::Malformed("trailing bytes after checkpoint".into()));
    }
    Ok((config_text, params))
}

/// Recompute a mask set for a parameter map, e.g. when packing a checkpoint.
pub fn masks_for_params(
    model: &Transformer,
    pattern: crate::nm::NmPattern,
) -> Result<MaskSet> {
    model.validate_pattern(pattern)?;
    let mut masks = MaskSet::new();
    for entry in &model.registry {
        masks.insert(
            entry.name.clone(),
            build_mask(
                &model.params[&entry.name],
                pattern,
                entry.axis,
                MaskMode::Binary,
                0.0,
            )?,
        );
    }
    Ok(masks)
}
