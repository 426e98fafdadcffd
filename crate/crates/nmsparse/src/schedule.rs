//! Recipe schedules: compile a sparsification recipe into a step-indexed
//! phase timeline and answer, per training step, what mask behavior applies.

use crate::error::{Error, Result};
use crate::nm::{MaskMode, NmPattern};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    Dense,
    DenseSparse,
    SrSte,
    StructureDecay,
    MaskDecay,
    UnstructuredOneShot,
}

impl Recipe {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Self::Dense),
            "dense_sparse" => Ok(Self::DenseSparse),
            "sr_ste" => Ok(Self::SrSte),
            "structure_decay" => Ok(Self::StructureDecay),
            "mask_decay" => Ok(Self::MaskDecay),
            "unstructured_one_shot" => Ok(Self::UnstructuredOneShot),
            other => Err(Error::Config(format!("unknown recipe '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Dense => "dense",
            Self::DenseSparse => "dense_sparse",
            Self::SrSte => "sr_ste",
            Self::StructureDecay => "structure_decay",
            Self::MaskDecay => "mask_decay",
            Self::UnstructuredOneShot => "unstructured_one_shot",
        }
    }
}

/// Compiled recipe timeline: dense warmup for `dense_steps`, a decay window,
/// then `finetune_steps` of frozen-mask fine-tuning, `total_steps` overall.
#[derive(Debug, Clone, Copy)]
pub struct RecipeSchedule {
    pub recipe: Recipe,
    pub total_steps: usize,
    pub dense_steps: usize,
    pub finetune_steps: usize,
    pub target_pattern: NmPattern,
    /// Mask-decay rate in (0, 1).
    pub beta: f64,
    /// Steps between pruned-location re-evaluations.
    pub update_period: usize,
    /// Dense warmup for the SR-STE recipe only (it trains sparse from
    /// scratch by default; the other recipes use `dense_steps`).
    pub srste_warmup: usize,
}

impl RecipeSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.dense_steps + self.finetune_steps > self.total_steps {
            return Err(Error::Config(format!(
                "dense_steps {} + finetune_steps {} exceed total_steps {}",
                self.dense_steps, self.finetune_steps, self.total_steps
            )));
        }
        if self.update_period == 0 {
            return Err(Error::Config("update_period must be >= 1".into()));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Config(format!(
                "beta must be in (0, 1), got {}",
                self.beta
            )));
        }
        if self.recipe == Recipe::SrSte && self.srste_warmup >= self.total_steps {
            return Err(Error::Config("srste_warmup must be < total_steps".into()));
        }
        if self.recipe == Recipe::StructureDecay {
            let window = self.total_steps - self.dense_steps - self.finetune_steps;
            structure_decay_phases(self.target_pattern, window)?;
        }
        Ok(())
    }

    fn decay_window(&self) -> (usize, usize) {
        (self.dense_steps, self.total_steps - self.finetune_steps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    Dense,
    Decay,
    Finetune,
}

/// Mask behavior for one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseSpec {
    pub phase_kind: PhaseKind,
    pub active_pattern: Option<NmPattern>,
    pub mask_mode: MaskMode,
    /// Multiplier at pruned slots: 1 in dense phases, β^d' in the mask-decay
    /// window, 0 for binary masks.
    pub decay_value: f64,
    /// Recompute pruned locations from current weights this step.
    pub refresh_mask: bool,
}

impl PhaseSpec {
    fn dense() -> Self {
        Self {
            phase_kind: PhaseKind::Dense,
            active_pattern: None,
            mask_mode: MaskMode::Binary,
            decay_value: 1.0,
            refresh_mask: false,
        }
    }
}

/// Pattern sequence [M−1:M, M/2:M, M/4:M, …, N:M] over a window split into
/// equal frames; remainder steps go to the final (most sparse) frame.
/// Returns (pattern, start, end) with step offsets relative to the window.
pub fn structure_decay_phases(
    target: NmPattern,
    window_steps: usize,
) -> Result<Vec<(NmPattern, usize, usize)>> {
    let m = target.m();
    let mut seq: Vec<NmPattern> = Vec::new();
    if m >= 2 && target.n() < m {
        seq.push(NmPattern::new(m - 1, m)?);
    }
    let mut half = m / 2;
    while half > target.n() {
        seq.push(NmPattern::new(half, m)?);
        half /= 2;
    }
    if seq.last().map(|p| p.n()) != Some(target.n()) {
        seq.push(target);
    }
    let phases = seq.len();
    if window_steps < phases {
        return Err(Error::Config(format!(
            "structure-decay window of {window_steps} steps cannot fit {phases} phases"
        )));
    }
    let frame = window_steps / phases;
    let mut out = Vec::with_capacity(phases);
    let mut start = 0usize;
    for (i, p) in seq.into_iter().enumerate() {
        let end = if i + 1 == phases {
            window_steps
        } else {
            start + frame
        };
        out.push((p, start, end));
        start = end;
    }
    Ok(out)
}

/// β^d' with d' = 1 + ⌊(step − dense_steps)/update_period⌋ inside the decay
/// window; exactly 0 once the fine-tune window begins.
pub fn mask_decay_value(step: usize, schedule: &RecipeSchedule) -> Result<f64> {
    if schedule.recipe != Recipe::MaskDecay {
        return Err(Error::InvalidArgument(format!(
            "mask_decay_value is only defined for the mask_decay recipe, got {}",
            schedule.recipe.name()
        )));
    }
    let (start, end) = schedule.decay_window();
    if step < start {
        return Err(Error::InvalidArgument(format!(
            "step {step} precedes the decay window starting at {start}"
        )));
    }
    if step >= end {
        return Ok(0.0);
    }
    let d = 1 + (step - start) / schedule.update_period;
    Ok(schedule.beta.powi(d as i32))
}

/// Mask behavior at `step`. Pure and total on [0, total_steps).
pub fn phase_at(step: usize, schedule: &RecipeSchedule) -> Result<PhaseSpec> {
    let n = schedule.total_steps;
    if step >= n {
        return Err(Error::InvalidArgument(format!(
            "step {step} out of schedule range [0, {n})"
        )));
    }
    let d = schedule.dense_steps;
    let target = schedule.target_pattern;
    let (win_start, win_end) = schedule.decay_window();
    Ok(match schedule.recipe {
        Recipe::Dense => PhaseSpec::dense(),
        Recipe::DenseSparse | Recipe::UnstructuredOneShot => {
            if step < d {
                PhaseSpec::dense()
            } else {
                PhaseSpec {
                    phase_kind: PhaseKind::Finetune,
                    active_pattern: Some(target),
                    mask_mode: MaskMode::Binary,
                    decay_value: 0.0,
                    refresh_mask: step == d,
                }
            }
        }
        Recipe::SrSte => {
            let warmup = schedule.srste_warmup;
            if step < warmup {
                PhaseSpec::dense()
            } else {
                PhaseSpec {
                    phase_kind: PhaseKind::Decay,
                    active_pattern: Some(target),
                    mask_mode: MaskMode::Binary,
                    decay_value: 0.0,
                    refresh_mask: (step - warmup) % schedule.update_period == 0,
                }
            }
        }
        Recipe::StructureDecay => {
            if step < d {
                PhaseSpec::dense()
            } else if step < win_end {
                let frames = structure_decay_phases(target, win_end - win_start)?;
                let off = step - win_start;
                let (pattern, frame_start, _) = *frames
                    .iter()
                    .find(|(_, s, e)| off >= *s && off < *e)
                    .expect("frames cover the window");
                PhaseSpec {
                    phase_kind: PhaseKind::Decay,
                    active_pattern: Some(pattern),
                    mask_mode: MaskMode::Binary,
                    decay_value: 0.0,
                    refresh_mask: off == frame_start || off % schedule.update_period == 0,
                }
            } else {
                PhaseSpec {
                    phase_kind: PhaseKind::Finetune,
                    active_pattern: Some(target),
                    mask_mode: MaskMode::Binary,
                    decay_value: 0.0,
                    refresh_mask: false,
                }
            }
        }
        Recipe::MaskDecay => {
            if step < d {
                PhaseSpec::dense()
            } else if step < win_end {
                PhaseSpec {
                    phase_kind: PhaseKind::Decay,
                    active_pattern: Some(target),
                    mask_mode: MaskMode::Decayed,
                    decay_value: mask_decay_value(step, schedule)?,
                    refresh_mask: (step - d) % schedule.update_period == 0,
                }
            } else {
                PhaseSpec {
                    phase_kind: PhaseKind::Finetune,
                    active_pattern: Some(target),
                    mask_mode: MaskMode::Binary,
                    decay_value: 0.0,
                    refresh_mask: false,
                }
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(recipe: Recipe, n: usize, d: usize, s: usize, pattern: &str, period: usize) -> RecipeSchedule {
        RecipeSchedule {
            recipe,
            total_steps: n,
            dense_steps: d,
            finetune_steps: s,
            target_pattern: NmPattern::parse(pattern).unwrap(),
            beta: 0.9,
            update_period: period,
            srste_warmup: 0,
        }
    }

    #[test]
    fn structure_decay_1_16_five_equal_frames() {
        let frames =
            structure_decay_phases(NmPattern::parse("1:16").unwrap(), 160_000).unwrap();
        let pats: Vec<String> = frames.iter().map(|(p, _, _)| p.to_string()).collect();
        assert_eq!(pats, ["15:16", "8:16", "4:16", "2:16", "1:16"]);
        for (i, (_, s, e)) in frames.iter().enumerate() {
            assert_eq!(*s, i * 32_000);
            assert_eq!(*e, (i + 1) * 32_000);
        }
    }

    #[test]
    fn structure_decay_2_4() {
        let frames = structure_decay_phases(NmPattern::parse("2:4").unwrap(), 100).unwrap();
        let pats: Vec<String> = frames.iter().map(|(p, _, _)| p.to_string()).collect();
        assert_eq!(pats, ["3:4", "2:4"]);
    }

    #[test]
    fn structure_decay_1_32_window_six() {
        let frames = structure_decay_phases(NmPattern::parse("1:32").unwrap(), 6).unwrap();
        let pats: Vec<String> = frames.iter().map(|(p, _, _)| p.to_string()).collect();
        assert_eq!(pats, ["31:32", "16:32", "8:32", "4:32", "2:32", "1:32"]);
        for (i, (_, s, e)) in frames.iter().enumerate() {
            assert_eq!((*s, *e), (i, i + 1));
        }
    }

    #[test]
    fn structure_decay_degenerate_single_phase() {
        let frames = structure_decay_phases(NmPattern::parse("1:2").unwrap(), 10).unwrap();
        assert_eq!(frames.len(), 1);
        assert_eq!(frames[0].0.to_string(), "1:2");
        assert_eq!((frames[0].1, frames[0].2), (0, 10));
    }

    #[test]
    fn structure_decay_window_too_small_errors() {
        assert!(structure_decay_phases(NmPattern::parse("1:16").unwrap(), 4).is_err());
    }

    #[test]
    fn structure_decay_remainder_goes_to_last_frame() {
        let frames = structure_decay_phases(NmPattern::parse("1:4").unwrap(), 10).unwrap();
        // 3 phases (3:4, 2:4, 1:4), frame = 3, remainder 1 appended to last
        assert_eq!(frames.len(), 3);
        assert_eq!((frames[0].1, frames[0].2), (0, 3));
        assert_eq!((frames[1].1, frames[1].2), (3, 6));
        assert_eq!((frames[2].1, frames[2].2), (6, 10));
        let total: usize = frames.iter().map(|(_, s, e)| e - s).sum();
        assert_eq!(total, 10);
    }

    #[test]
    fn mask_decay_value_sequence() {
        let s = sched(Recipe::MaskDecay, 2000, 200, 200, "2:4", 100);
        assert!((mask_decay_value(200, &s).unwrap() - 0.9).abs() < 1e-15);
        assert!((mask_decay_value(299, &s).unwrap() - 0.9).abs() < 1e-15);
        assert!((mask_decay_value(350, &s).unwrap() - 0.81).abs() < 1e-15);
        assert!((mask_decay_value(450, &s).unwrap() - 0.729).abs() < 1e-15);
        // exactly 0 from the fine-tune boundary onward
        assert_eq!(mask_decay_value(1800, &s).unwrap(), 0.0);
        assert_eq!(mask_decay_value(1999, &s).unwrap(), 0.0);
    }

    #[test]
    fn mask_decay_value_wrong_recipe_errors() {
        let s = sched(Recipe::Dense, 2000, 200, 200, "2:4", 100);
        assert!(mask_decay_value(300, &s).is_err());
    }

    #[test]
    fn phase_at_mask_decay_example() {
        let s = sched(Recipe::MaskDecay, 2000, 200, 200, "2:4", 100);
        let p150 = phase_at(150, &s).unwrap();
        assert_eq!(p150.phase_kind, PhaseKind::Dense);
        let p250 = phase_at(250, &s).unwrap();
        assert_eq!(p250.mask_mode, MaskMode::Decayed);
        assert!((p250.decay_value - 0.9).abs() < 1e-15);
        let p1900 = phase_at(1900, &s).unwrap();
        assert_eq!(p1900.phase_kind, PhaseKind::Finetune);
        assert_eq!(p1900.mask_mode, MaskMode::Binary);
        assert!(!p1900.refresh_mask);
    }

    #[test]
    fn phase_at_srste_sparse_from_step_zero() {
        let s = sched(Recipe::SrSte, 1000, 0, 0, "1:16", 100);
        let p0 = phase_at(0, &s).unwrap();
        assert_eq!(p0.active_pattern.unwrap().to_string(), "1:16");
        assert!(p0.refresh_mask);
        // refresh at every period boundary through the whole run
        assert!(phase_at(900, &s).unwrap().refresh_mask);
        assert!(!phase_at(950, &s).unwrap().refresh_mask);
    }

    #[test]
    fn phase_at_srste_warmup() {
        let mut s = sched(Recipe::SrSte, 1000, 0, 0, "1:16", 100);
        s.srste_warmup = 100;
        assert_eq!(phase_at(50, &s).unwrap().phase_kind, PhaseKind::Dense);
        assert!(phase_at(100, &s).unwrap().refresh_mask);
    }

    #[test]
    fn phase_at_structure_decay_55_percent_is_4_16() {
        // Derived by independent timeline enumeration: the window splits in
        // 5 equal frames, so 55% falls in frame index 2 → 4:16.
        let s = sched(Recipe::StructureDecay, 5000, 500, 500, "1:16", 100);
        let window = 4000;
        let step = 500 + (window as f64 * 0.55) as usize;
        let p = phase_at(step, &s).unwrap();
        assert_eq!(p.active_pattern.unwrap().to_string(), "4:16");
        // oracle: enumerate frame boundaries directly
        let frame = window / 5;
        let idx = (step - 500) / frame;
        let expected = ["15:16", "8:16", "4:16", "2:16", "1:16"][idx];
        assert_eq!(p.active_pattern.unwrap().to_string(), expected);
    }

    #[test]
    fn phase_at_out_of_range_errors() {
        let s = sched(Recipe::Dense, 100, 0, 0, "2:4", 10);
        assert!(phase_at(100, &s).is_err());
    }

    #[test]
    fn dense_sparse_one_shot_refresh() {
        let s = sched(Recipe::DenseSparse, 1000, 100, 0, "2:4", 50);
        assert_eq!(phase_at(99, &s).unwrap().phase_kind, PhaseKind::Dense);
        assert!(phase_at(100, &s).unwrap().refresh_mask);
        for step in 101..1000 {
            assert!(!phase_at(step, &s).unwrap().refresh_mask);
        }
    }

    #[test]
    fn sparsity_non_decreasing_for_every_recipe() {
        for recipe in [
            Recipe::Dense,
            Recipe::DenseSparse,
            Recipe::SrSte,
            Recipe::StructureDecay,
            Recipe::MaskDecay,
            Recipe::UnstructuredOneShot,
        ] {
            let s = sched(recipe, 2000, 200, 200, "1:16", 100);
            let mut prev = 0.0f64;
            for step in 0..2000 {
                let p = phase_at(step, &s).unwrap();
                let sparsity = 1.0 - p.active_pattern.map_or(1.0, |pt| pt.density());
                assert!(
                    sparsity + 1e-15 >= prev,
                    "{}: sparsity decreased at step {step}",
                    recipe.name()
                );
                prev = sparsity;
            }
        }
    }

    #[test]
    fn decay_value_non_increasing_and_zero_by_finetune() {
        let s = sched(Recipe::MaskDecay, 2000, 200, 200, "1:16", 100);
        let mut prev = 1.0f64;
        for step in 0..2000 {
            let p = phase_at(step, &s).unwrap();
            assert!(p.decay_value <= prev + 1e-15);
            prev = p.decay_value;
            if step >= 1800 {
                assert_eq!(p.decay_value, 0.0);
            }
        }
    }

    #[test]
    fn frame_lengths_sum_to_window_and_nearly_equal() {
        for window in [5usize, 7, 100, 1003, 160_000] {
            let frames =
                structure_decay_phases(NmPattern::parse("1:16").unwrap(), window).unwrap();
            let total: usize = frames.iter().map(|(_, s, e)| e - s).sum();
            assert_eq!(total, window);
            let lens: Vec<usize> = frames.iter().map(|(_, s, e)| e - s).collect();
            let min = *lens.iter().min().unwrap();
            let max = *lens.iter().max().unwrap();
            assert!(max - min < frames.len(), "window {window}: {lens:?}");
        }
    }

    #[test]
    fn tiny_beta_mask_decay_approaches_dense_sparse() {
        // With β → 0 the per-step multiplier sequence matches DenseSparse's
        // (0 at pruned slots) apart from refresh cadence and phase labels.
        let md = RecipeSchedule {
            beta: 1e-300,
            ..sched(Recipe::MaskDecay, 2000, 200, 200, "2:4", 100)
        };
        let ds = sched(Recipe::DenseSparse, 2000, 200, 200, "2:4", 100);
        for step in 0..2000 {
            let a = phase_at(step, &md).unwrap();
            let b = phase_at(step, &ds).unwrap();
            assert_eq!(a.active_pattern, b.active_pattern, "step {step}");
            assert!((a.decay_value - b.decay_value).abs() <= 1e-300, "step {step}");
        }
    }
}
