//! Analytic parameter/FLOPs accounting, N:M compression ratios, and
//! schedule-weighted average training FLOPs per recipe.
//!
//! Counting convention (echoed in every report): one multiply-accumulate is
//! 2 FLOPs, backward costs 2× forward, and softmax/norm/activation FLOPs are
//! ignored (sub-1% at reference scale). The ff_*_share fractions are taken
//! over the per-layer compute body — self-attention plus feed-forward —
//! with embeddings, decoder cross-attention and the output projection
//! reported separately but excluded from the shares.

use crate::error::Result;
use crate::model::ModelConfig;
use crate::nm::NmPattern;
use crate::schedule::{phase_at, PhaseSpec, Recipe, RecipeSchedule};
use serde::Serialize;

pub const FLOPS_PER_MAC: f64 = 2.0;
/// backward = 2× forward, so one training step costs 3× forward.
pub const TRAIN_STEP_MULTIPLIER: f64 = 3.0;
/// Accounting width of one stored weight value (deployment precision).
pub const VALUE_BITS: u32 = 32;

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct ComponentCost {
    pub params: u64,
    pub forward_flops: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CostAssumptions {
    pub seq_len: usize,
    pub vocab: usize,
    pub flops_per_mac: f64,
    pub backward_multiplier: f64,
    pub share_basis: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub embeddings: ComponentCost,
    /// Self-attention blocks (QKV + output projections, score/AV matmuls).
    pub attention: ComponentCost,
    /// Decoder cross-attention, reported separately from the share basis.
    pub cross_attention: ComponentCost,
    pub feed_forward: ComponentCost,
    pub output_projection: ComponentCost,
    pub layer_norms: ComponentCost,
    pub total_params: u64,
    pub total_forward_flops: f64,
    pub ff_param_share: f64,
    pub ff_flops_share: f64,
    /// Matrix weights of the feed-forward blocks (bias-free; these carry
    /// the N:M groups).
    pub ff_matrix_weights: u64,
    pub assumptions: CostAssumptions,
}

impl CostReport {
    pub fn components(&self) -> [(&'static str, &ComponentCost); 6] {
        [
            ("embeddings", &self.embeddings),
            ("attention", &self.attention),
            ("cross_attention", &self.cross_attention),
            ("feed_forward", &self.feed_forward),
            ("output_projection", &self.output_projection),
            ("layer_norms", &self.layer_norms),
        ]
    }
}

/// Exact parameter counts per component plus matmul-only forward FLOPs for
/// one sequence of `seq_len` tokens.
pub fn count_costs(cfg: &ModelConfig, seq_len: usize, vocab: usize) -> Result<CostReport> {
    cfg.validate()?;
    let d = cfg.d_model as u64;
    let ff = cfg.d_ff as u64;
    let v = vocab as u64;
    let layers = (cfg.enc_layers + cfg.dec_layers) as u64;
    let dec = cfg.dec_layers as u64;
    let l = seq_len as f64;

    let attn_params_per_block = 4 * d * d + 4 * d;
    let ff_params_per_layer = 2 * d * ff + ff + d;
    // enc: 2 norms per layer; dec: 3; plus the two final norms.
    let norm_params =
        (cfg.enc_layers as u64 * 2 + dec * 3 + 2) * 2 * d;

    let proj_flops_per_block = FLOPS_PER_MAC * 4.0 * (d * d) as f64 * l;
    let score_flops_per_block = FLOPS_PER_MAC * 2.0 * l * l * d as f64;
    let attn_flops_per_block = proj_flops_per_block + score_flops_per_block;
    let ff_flops_per_layer = FLOPS_PER_MAC * 2.0 * (d * ff) as f64 * l;

    let embeddings = ComponentCost {
        params: 2 * v * d,
        forward_flops: 0.0,
    };
    let attention = ComponentCost {
        params: layers * attn_params_per_block,
        forward_flops: layers as f64 * attn_flops_per_block,
    };
    let cross_attention = ComponentCost {
        params: dec * attn_params_per_block,
        forward_flops: dec as f64 * attn_flops_per_block,
    };
    let feed_forward = ComponentCost {
        params: layers * ff_params_per_layer,
        forward_flops: layers as f64 * ff_flops_per_layer,
    };
    let output_projection = ComponentCost {
        params: d * v + v,
        forward_flops: FLOPS_PER_MAC * (d * v) as f64 * l,
    };
    let layer_norms = ComponentCost {
        params: norm_params,
        forward_flops: 0.0,
    };

    let total_params = embeddings.params
        + attention.params
        + cross_attention.params
        + feed_forward.params
        + output_projection.params
        + layer_norms.params;
    let total_forward_flops = attention.forward_flops
        + cross_attention.forward_flops
        + feed_forward.forward_flops
        + output_projection.forward_flops;

    let ff_param_share =
        feed_forward.params as f64 / (feed_forward.params + attention.params) as f64;
    let ff_flops_share =
        feed_forward.forward_flops / (feed_forward.forward_flops + attention.forward_flops);

    Ok(CostReport {
        embeddings,
        attention,
        cross_attention,
        feed_forward,
        output_projection,
        layer_norms,
        total_params,
        total_forward_flops,
        ff_param_share,
        ff_flops_share,
        ff_matrix_weights: layers * 2 * d * ff,
        assumptions: CostAssumptions {
            seq_len,
            vocab,
            flops_per_mac: FLOPS_PER_MAC,
            backward_multiplier: TRAIN_STEP_MULTIPLIER - 1.0,
            share_basis: "self-attention + feed-forward layer body; embeddings, \
                          cross-attention and output projection excluded from shares"
                .into(),
        },
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CompressionReport {
    pub pattern: String,
    /// Whole-model size reduction with packed-index overhead included.
    pub size_reduction_fraction: f64,
    /// Same, ignoring index metadata (values only).
    pub size_reduction_no_overhead: f64,
    pub inference_flops_reduction_fraction: f64,
    /// Index metadata bits per M-group (N kept × ⌈log2 M⌉ bits).
    pub index_overhead_bits_per_group: u64,
}

/// Compression accounting: FF weights stored packed (N values of 32 bits +
/// N indices of ⌈log2 M⌉ bits per M-group), everything else dense.
pub fn compression(
    report: &CostReport,
    pattern: NmPattern,
    index_bits_per_kept: Option<u32>,
) -> CompressionReport {
    let n = pattern.n() as u64;
    let m = pattern.m() as u64;
    let ib = index_bits_per_kept.unwrap_or_else(|| pattern.index_bits()) as u64;
    let packed_bits = n * VALUE_BITS as u64 + n * ib;
    let dense_bits = m * VALUE_BITS as u64;
    CompressionReport {
        pattern: pattern.to_string(),
        size_reduction_fraction: report.ff_param_share
            * (1.0 - packed_bits as f64 / dense_bits as f64),
        size_reduction_no_overhead: report.ff_param_share * (1.0 - pattern.density()),
        inference_flops_reduction_fraction: report.ff_flops_share * (1.0 - pattern.density()),
        index_overhead_bits_per_group: n * ib,
    }
}

/// FF compute factor for one step: dense and decayed masks compute fully,
/// binary N:M masks compute at density N/M.
pub fn phase_ff_factor(phase: &PhaseSpec) -> f64 {
    match (phase.active_pattern, phase.mask_mode) {
        (Some(p), crate::nm::MaskMode::Binary) => p.density(),
        _ => 1.0,
    }
}

/// Compute cost of one training step (forward + backward) at the given FF
/// density factor.
pub fn step_compute_flops(report: &CostReport, ff_factor: f64) -> f64 {
    TRAIN_STEP_MULTIPLIER
        * (report.total_forward_flops - report.feed_forward.forward_flops
            + report.feed_forward.forward_flops * ff_factor)
}

fn selection_flops_per_group(m: u64) -> f64 {
    // |w| pass plus a log-factor partial sort per group.
    (m * (1 + (m as f64).log2().ceil() as u64)) as f64
}

/// Cost of re-evaluating pruned locations across all registered FF weights.
pub fn refresh_flops(report: &CostReport, pattern: NmPattern, unstructured: bool) -> f64 {
    let w = report.ff_matrix_weights;
    if unstructured {
        (w as f64) * (1.0 + (w as f64).log2().ceil())
    } else {
        let m = pattern.m() as u64;
        (w / m) as f64 * selection_flops_per_group(m)
    }
}

/// Full cost of one step under a phase spec, refresh included.
pub fn step_flops(
    report: &CostReport,
    phase: &PhaseSpec,
    pattern: NmPattern,
    unstructured: bool,
) -> f64 {
    let mut cost = step_compute_flops(report, phase_ff_factor(phase));
    if phase.refresh_mask {
        cost += refresh_flops(report, pattern, unstructured);
    }
    cost
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TrainingFlops {
    pub total: f64,
    pub per_step_avg: f64,
}

/// Schedule-weighted training FLOPs, computed analytically from the
/// schedule's phase segments (the per-step enumeration is the test oracle).
pub fn avg_training_flops(schedule: &RecipeSchedule, report: &CostReport) -> Result<TrainingFlops> {
    schedule.validate()?;
    let n = schedule.total_steps;
    let d = schedule.dense_steps;
    let s = schedule.finetune_steps;
    let period = schedule.update_period;
    let target = schedule.target_pattern;
    let dense = step_compute_flops(report, 1.0);
    let at_target = step_compute_flops(report, target.density());
    let refresh_structured = refresh_flops(report, target, false);

    let total = match schedule.recipe {
        Recipe::Dense => n as f64 * dense,
        Recipe::DenseSparse | Recipe::UnstructuredOneShot => {
            let unstructured = schedule.recipe == Recipe::UnstructuredOneShot;
            let refresh = refresh_flops(report, target, unstructured);
            let one_shot = if n > d { refresh } else { 0.0 };
            d as f64 * dense + (n - d) as f64 * at_target + one_shot
        }
        Recipe::SrSte => {
            let w = schedule.srste_warmup;
            let refreshes = (n - w).div_ceil(period) as f64;
            w as f64 * dense + (n - w) as f64 * at_target + refreshes * refresh_structured
        }
        Recipe::MaskDecay => {
            let window = n - d - s;
            let refreshes = window.div_ceil(period) as f64;
            d as f64 * dense
                + window as f64 * dense
                + s as f64 * at_target
                + refreshes * refresh_structured
        }
        Recipe::StructureDecay => {
            let window = n - d - s;
            let frames = crate::schedule::structure_decay_phases(target, window)?;
            let mut total = d as f64 * dense;
            let mut refreshes = window.div_ceil(period);
            for (pat, start, end) in &frames {
                total += (end - start) as f64 * step_compute_flops(report, pat.density());
                if start % period != 0 {
                    refreshes += 1;
                }
            }
            total += s as f64 * at_target;
            total + refreshes as f64 * refresh_structured
        }
    };
    Ok(TrainingFlops {
        total,
        per_step_avg: total / n as f64,
    })
}

/// Per-step enumeration of the same quantity straight from `phase_at`.
/// Kept public so tests and reports can cross-check the analytic path.
pub fn training_flops_by_enumeration(
    schedule: &RecipeSchedule,
    report: &CostReport,
) -> Result<TrainingFlops> {
    let unstructured = schedule.recipe == Recipe::UnstructuredOneShot;
    let mut total = 0.0;
    for step in 0..schedule.total_steps {
        let phase = phase_at(step, schedule)?;
        total += step_flops(report, &phase, schedule.target_pattern, unstructured);
    }
    Ok(TrainingFlops {
        total,
        per_step_avg: total / schedule.total_steps as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_report() -> CostReport {
        count_costs(&ModelConfig::paper_reference(), 128, 32_000).unwrap()
    }

    fn sched(recipe: Recipe) -> RecipeSchedule {
        RecipeSchedule {
            recipe,
            total_steps: 5000,
            dense_steps: 500,
            finetune_steps: 500,
            target_pattern: NmPattern::parse("1:16").unwrap(),
            beta: 0.9,
            update_period: 100,
            srste_warmup: 500,
        }
    }

    #[test]
    fn reference_config_shares() {
        let r = paper_report();
        assert!(
            (0.62..=0.72).contains(&r.ff_param_share),
            "ff_param_share = {}",
            r.ff_param_share
        );
        assert!(
            (0.59..=0.69).contains(&r.ff_flops_share),
            "ff_flops_share = {}",
            r.ff_flops_share
        );
    }

    #[test]
    fn tiny_ff_drives_shares_to_zero() {
        let mut cfg = ModelConfig::paper_reference();
        cfg.d_ff = 2;
        let r = count_costs(&cfg, 128, 32_000).unwrap();
        assert!(r.ff_param_share < 0.01);
        assert!(r.ff_flops_share < 0.01);
    }

    #[test]
    fn params_independent_of_seq_len() {
        let a = count_costs(&ModelConfig::paper_reference(), 128, 32_000).unwrap();
        let b = count_costs(&ModelConfig::paper_reference(), 256, 32_000).unwrap();
        assert_eq!(a.total_params, b.total_params);
        assert!(b.total_forward_flops > a.total_forward_flops);
    }

    #[test]
    fn component_sums_equal_totals() {
        let r = paper_report();
        let p: u64 = r.components().iter().map(|(_, c)| c.params).sum();
        let f: f64 = r.components().iter().map(|(_, c)| c.forward_flops).sum();
        assert_eq!(p, r.total_params);
        assert!((f - r.total_forward_flops).abs() < 1e-6);
    }

    #[test]
    fn compression_1_16_reproduces_reference_numbers() {
        let r = paper_report();
        let c = compression(&r, NmPattern::parse("1:16").unwrap(), None);
        assert!(
            (c.inference_flops_reduction_fraction - 0.60).abs() < 0.02,
            "flops reduction {}",
            c.inference_flops_reduction_fraction
        );
        assert!(
            (c.size_reduction_fraction - 0.62).abs() < 0.02,
            "size reduction {}",
            c.size_reduction_fraction
        );
        // exact identity
        let back = c.inference_flops_reduction_fraction / (1.0 - 1.0 / 16.0);
        assert!((back - r.ff_flops_share).abs() < 1e-12);
        assert_eq!(c.index_overhead_bits_per_group, 4);
    }

    #[test]
    fn compression_degenerate_and_formula_cases() {
        let r = paper_report();
        let full = compression(&r, NmPattern::parse("16:16").unwrap(), None);
        assert!(full.inference_flops_reduction_fraction.abs() < 1e-12);
        assert!(full.size_reduction_no_overhead.abs() < 1e-12);
        let p132 = compression(&r, NmPattern::parse("1:32").unwrap(), None);
        let expect = r.ff_flops_share * 31.0 / 32.0;
        assert!((p132.inference_flops_reduction_fraction - expect).abs() < 1e-12);
    }

    #[test]
    fn compression_monotone_in_n() {
        let r = paper_report();
        let mut prev_size = -1.0;
        let mut prev_flops = -1.0;
        for n in [16u32, 8, 4, 2, 1] {
            let c = compression(&r, NmPattern::new(n, 16).unwrap(), None);
            assert!(c.size_reduction_fraction > prev_size);
            assert!(c.inference_flops_reduction_fraction > prev_flops);
            prev_size = c.size_reduction_fraction;
            prev_flops = c.inference_flops_reduction_fraction;
        }
    }

    #[test]
    fn dense_average_is_three_forwards() {
        let r = paper_report();
        let t = avg_training_flops(&sched(Recipe::Dense), &r).unwrap();
        assert!((t.per_step_avg - 3.0 * r.total_forward_flops).abs() < 1e-3);
    }

    #[test]
    fn mask_decay_window_costs_dense_ff() {
        // decayed multipliers admit no compute skipping
        let r = paper_report();
        let md = avg_training_flops(&sched(Recipe::MaskDecay), &r).unwrap();
        let dense = avg_training_flops(&sched(Recipe::Dense), &r).unwrap();
        // only the fine-tune steps are cheaper, plus small refresh overhead
        let expected = dense.total
            - 500.0
                * (step_compute_flops(&r, 1.0)
                    - step_compute_flops(&r, 1.0 / 16.0))
            + 40.0 * refresh_flops(&r, NmPattern::parse("1:16").unwrap(), false);
        assert!((md.total - expected).abs() / expected < 1e-12);
    }

    #[test]
    fn recipe_flops_orderings() {
        let r = paper_report();
        let ds = avg_training_flops(&sched(Recipe::DenseSparse), &r).unwrap();
        let md = avg_training_flops(&sched(Recipe::MaskDecay), &r).unwrap();
        let dense = avg_training_flops(&sched(Recipe::Dense), &r).unwrap();
        let srste = avg_training_flops(&sched(Recipe::SrSte), &r).unwrap();
        assert!(ds.total < md.total);
        assert!(md.total <= dense.total);
        assert!(srste.total > ds.total);
        assert!(dense.total >= ds.total);
    }

    #[test]
    fn analytic_matches_per_step_enumeration() {
        let r = paper_report();
        for recipe in [
            Recipe::Dense,
            Recipe::DenseSparse,
            Recipe::SrSte,
            Recipe::StructureDecay,
            Recipe::MaskDecay,
            Recipe::UnstructuredOneShot,
        ] {
            let s = sched(recipe);
            let a = avg_training_flops(&s, &r).unwrap();
            let b = training_flops_by_enumeration(&s, &r).unwrap();
            let rel = (a.total - b.total).abs() / b.total;
            assert!(rel < 1e-9, "{}: rel err {rel}", recipe.name());
        }
    }
}
