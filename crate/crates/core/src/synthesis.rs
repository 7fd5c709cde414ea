//! Box-controlled sampling.
//!
//! Each instance owns a box and a token group. During the first `t_bound`
//! sampling steps the latent takes one gradient step on a combined in-box
//! reward and out-of-box penalty over the decoder attention maps; every step
//! mixes values through masked attention, and after `t_bound` the masks are
//! periodically refreshed from the attention itself.

use std::f64::consts::PI;
use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::denoiser::{
    AttentionRecord, DenoiserParams, ForwardTrace, LatentGrid, LayerTag, NoiseSchedule, TokenEmbedding, Upstream,
};
use crate::error::{Error, Result};
use crate::harness::metrics::leakage_mass;
use crate::refine::{assign_clusters, compute_ca_masks, kmeans_self_attention, ClusterState, RefineConfig};
use crate::tensor::{BinaryMask, DenseTensor};

/// Normalized box `[x0, x1) × [y0, y1)` for one instance, with the tokens it
/// governs. `x` runs along columns, `y` along rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub instance: usize,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub tokens: Vec<usize>,
}

impl BoxSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| (0.0..=1.0).contains(&v);
        if !(ok(self.x0) && ok(self.x1) && ok(self.y0) && ok(self.y1)) {
            return Err(Error::Config(format!(
                "box {}: coordinates must lie in [0, 1]",
                self.instance
            )));
        }
        if self.x0 >= self.x1 || self.y0 >= self.y1 {
            return Err(Error::Config(format!(
                "box {}: need x0 < x1 and y0 < y1",
                self.instance
            )));
        }
        if self.tokens.is_empty() {
            return Err(Error::Config(format!("box {}: token group is empty", self.instance)));
        }
        Ok(())
    }

    /// Cells whose centers fall inside the box.
    pub fn rasterize(&self, height: usize, width: usize) -> Result<BinaryMask> {
        self.validate()?;
        let mask = BinaryMask::from_fn(height, width, |r, c| {
            let (x, y) = ((c as f64 + 0.5) / width as f64, (r as f64 + 0.5) / height as f64);
            x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
        })?;
        if mask.count() == 0 {
            return Err(Error::Config(format!(
                "box {} covers no cell centers on a {height}x{width} grid",
                self.instance
            )));
        }
        Ok(mask)
    }
}

/// Masks and token groups driving synthesis. Unlike learning masks, boxes may
/// overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxLayout {
    pub masks: Vec<BinaryMask>,
    pub groups: Vec<Vec<usize>>,
}

impl BoxLayout {
    pub fn new(masks: Vec<BinaryMask>, groups: Vec<Vec<usize>>) -> Result<Self> {
        if masks.is_empty() || masks.len() != groups.len() {
            return Err(Error::Config(format!(
                "need one token group per box, got {} boxes and {} groups",
                masks.len(),
                groups.len()
            )));
        }
        let (h, w) = (masks[0].height(), masks[0].width());
        if masks.iter().any(|m| m.height() != h || m.width() != w) {
            return Err(Error::Shape("box masks must share a grid".into()));
        }
        if let Some(i) = groups.iter().position(Vec::is_empty) {
            return Err(Error::Config(format!("token group {i} is empty")));
        }
        Ok(Self { masks, groups })
    }

    /// Rasterize boxes, ordered by instance index, onto a `height × width` grid.
    pub fn from_boxes(boxes: &[BoxSpec], height: usize, width: usize) -> Result<Self> {
        let mut sorted: Vec<&BoxSpec> = boxes.iter().collect();
        sorted.sort_by_key(|b| b.instance);
        if sorted.iter().enumerate().any(|(i, b)| b.instance != i) {
            return Err(Error::Config("box instance indices must be 0..N without gaps".into()));
        }
        let masks = sorted
            .iter()
            .map(|b| b.rasterize(height, width))
            .collect::<Result<_>>()?;
        Self::new(masks, sorted.iter().map(|b| b.tokens.clone()).collect())
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    fn at(&self, res: usize) -> Result<Vec<BinaryMask>> {
        self.masks.iter().map(|m| m.resample(res, res)).collect()
    }
}

/// Penalty-weight schedule parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleParams {
    pub alpha_max: f64,
    pub alpha_min: f64,
    pub alpha_final: f64,
    pub s1: usize,
    pub horizon: usize,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            alpha_max: 0.5,
            alpha_min: 0.2,
            alpha_final: 0.1,
            s1: 3,
            horizon: 15,
        }
    }
}

impl ScheduleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_max >= self.alpha_min && self.alpha_min >= self.alpha_final && self.alpha_final >= 0.0) {
            return Err(Error::Config(
                "schedule: need alpha_max >= alpha_min >= alpha_final >= 0".into(),
            ));
        }
        if self.s1 < 1 || self.s1 >= self.horizon {
            return Err(Error::Config("schedule.s1: need 1 <= s1 < horizon".into()));
        }
        Ok(())
    }
}

/// Penalty weight at optimization step `t` (1-based): linear from
/// `alpha_max` to `alpha_min` over `[1, s1]`, then a half cosine down to
/// `alpha_final` at `horizon`.
pub fn alpha_decay(t: usize, p: &ScheduleParams) -> Result<f64> {
    p.validate()?;
    if t < 1 || t > p.horizon {
        return Err(Error::InvalidValue(format!("step {t} outside 1..={}", p.horizon)));
    }
    if t <= p.s1 {
        if p.s1 == 1 {
            return Ok(p.alpha_max);
        }
        let frac = (t - 1) as f64 / (p.s1 - 1) as f64;
        Ok(p.alpha_max + (p.alpha_min - p.alpha_max) * frac)
    } else {
        let frac = (t - p.s1) as f64 / (p.horizon - p.s1) as f64;
        Ok(p.alpha_final + 0.5 * (p.alpha_min - p.alpha_final) * (1.0 + (PI * frac).cos()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisConfig {
    /// Latent step size.
    pub beta: f64,
    pub lambda_sa: f64,
    pub lambda_ca: f64,
    /// Steps (counted from the first) that run latent optimization.
    pub t_bound: usize,
    /// Mask-refresh interval after `t_bound`; 0 disables refresh.
    pub k_update: usize,
    pub total_steps: usize,
    /// Mix values through box-masked attention.
    pub masking: bool,
    /// Keep the out-of-box penalty term; off gives the reward-only ablation.
    pub out_of_box: bool,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            lambda_sa: 0.5,
            lambda_ca: 1.5,
            t_bound: 15,
            k_update: 5,
            total_steps: 50,
            masking: true,
            out_of_box: true,
            seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self, schedule: &NoiseSchedule, alpha: &ScheduleParams) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("synthesis.beta: must be finite and non-negative".into()));
        }
        if self.lambda_sa < 0.0 || self.lambda_ca < 0.0 {
            return Err(Error::Config(
                "synthesis.lambda_sa / lambda_ca: must be non-negative".into(),
            ));
        }
        if self.total_steps == 0 || self.total_steps > schedule.total_steps() {
            return Err(Error::Config(format!(
                "synthesis.total_steps: must lie in 1..={}",
                schedule.total_steps()
            )));
        }
        if self.t_bound > self.total_steps {
            return Err(Error::Config("synthesis.t_bound: must not exceed total_steps".into()));
        }
        if self.t_bound > alpha.horizon {
            return Err(Error::Config(
                "synthesis.t_bound: must not exceed schedule.horizon".into(),
            ));
        }
        alpha.validate()
    }
}

/// Squared in-box and out-of-box attention energy of one instance at one
/// layer. CA layers read the group's token columns; SA layers read the rows
/// of in-box source pixels, split by whether the target pixel is in the box.
/// `mask` must be at the layer's resolution.
pub fn fg_bg_energies(
    record: &AttentionRecord,
    mask: &BinaryMask,
    group: &[usize],
    layer: usize,
) -> Result<(f64, f64)> {
    let (fg, bg, _) = energies_with_grad(record, mask, group, layer, false)?;
    Ok((fg, bg))
}

/// Energies plus, when asked, `∂fg/∂A` and `∂bg/∂A` packed as one matrix:
/// every entry feeds exactly one of the two, so `grad[p, j]` is `2·a` and
/// `in_fg[p, j]` tells which.
#[allow(clippy::type_complexity)]
fn energies_with_grad(
    record: &AttentionRecord,
    mask: &BinaryMask,
    group: &[usize],
    layer: usize,
    want_grad: bool,
) -> Result<(f64, f64, Option<(Array2<f64>, Array2<f64>)>)> {
    if group.is_empty() {
        return Err(Error::Config("token group is empty".into()));
    }
    let l = record
        .layer(layer)
        .ok_or_else(|| Error::Config(format!("layer {layer} missing from record")))?;
    let a = l.map.weights();
    let res = l.tag.resolution;
    if mask.height() != res || mask.width() != res {
        return Err(Error::Shape(format!(
            "mask is {}x{}, layer {layer} is {res}x{res}",
            mask.height(),
            mask.width()
        )));
    }
    let bits = mask.bits();
    let (mut fg, mut bg) = (0.0, 0.0);
    let mut grads = want_grad.then(|| (Array2::zeros(a.dim()), Array2::zeros(a.dim())));
    let mut visit = |p: usize, j: usize, inside: bool| {
        let v = a[[p, j]];
        if inside {
            fg += v * v;
        } else {
            bg += v * v;
        }
        if let Some((gf, gb)) = grads.as_mut() {
            if inside {
                gf[[p, j]] = 2.0 * v;
            } else {
                gb[[p, j]] = 2.0 * v;
            }
        }
    };
    if l.tag.is_cross() {
        for &j in group {
            if j >= a.ncols() {
                return Err(Error::Config(format!("token {j} absent from layer {layer}")));
            }
            for (p, &inside) in bits.iter().enumerate() {
                visit(p, j, inside);
            }
        }
    } else {
        for (p, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
            for (q, &inside) in bits.iter().enumerate() {
                visit(p, q, inside);
            }
        }
    }
    Ok((fg, bg, grads))
}

/// Arithmetic means of per-layer energies.
pub fn mean_energies(fg: &[f64], bg: &[f64]) -> Result<(f64, f64)> {
    if fg.is_empty() || fg.len() != bg.len() {
        return Err(Error::InvalidValue(format!(
            "need matching nonempty energy lists, got {} and {}",
            fg.len(),
            bg.len()
        )));
    }
    let n = fg.len() as f64;
    Ok((fg.iter().sum::<f64>() / n, bg.iter().sum::<f64>() / n))
}

/// `(1 − fg/(fg+bg))²`, taken as 0 when both energies vanish.
pub fn reward_box_score(fg: f64, bg: f64) -> f64 {
    let s = fg + bg;
    if s <= 0.0 {
        0.0
    } else {
        (bg / s).powi(2)
    }
}

pub fn penalty_box_score(bg: f64) -> f64 {
    bg.ln_1p()
}

/// Reward and penalty scores of one instance for both attention kinds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct BoxScores {
    pub reward_sa: f64,
    pub penalty_sa: f64,
    pub reward_ca: f64,
    pub penalty_ca: f64,
}

/// `λ_SA·(R_SA + α·P_SA) + λ_CA·(R_CA + α·P_CA)`.
pub fn instance_loss(s: &BoxScores, alpha: f64, config: &SynthesisConfig) -> f64 {
    config.lambda_sa * (s.reward_sa + alpha * s.penalty_sa) + config.lambda_ca * (s.reward_ca + alpha * s.penalty_ca)
}

/// Per-instance losses, their squared sum, and `∂total/∂A` per layer.
#[derive(Debug, Clone)]
pub struct CombinedLoss {
    pub per_instance: Vec<f64>,
    pub scores: Vec<BoxScores>,
    pub total: f64,
    pub grads: Vec<(usize, Array2<f64>)>,
}

/// Layers the box losses read: decoder CA and decoder SA.
pub fn control_layers(record: &AttentionRecord) -> (Vec<usize>, Vec<usize>) {
    let dec = record.layers.iter().filter(|l| l.tag.is_decoder());
    let (ca, sa): (Vec<_>, Vec<_>) = dec.partition(|l| l.tag.is_cross());
    (
        ca.iter().map(|l| l.index).collect(),
        sa.iter().map(|l| l.index).collect(),
    )
}

/// `Σ_i L_i²` with `α` as the out-of-box weight. A kind with no decoder
/// layers contributes nothing.
pub fn combined_attn_loss(
    record: &AttentionRecord,
    layout: &BoxLayout,
    alpha: f64,
    config: &SynthesisConfig,
) -> Result<CombinedLoss> {
    let (ca_layers, sa_layers) = control_layers(record);
    if ca_layers.is_empty() {
        return Err(Error::Config("record has no decoder cross-attention layers".into()));
    }
    let mut per_instance = Vec::with_capacity(layout.len());
    let mut scores = Vec::with_capacity(layout.len());
    let mut grads: Vec<(usize, Array2<f64>)> = record
        .layers
        .iter()
        .filter(|l| l.tag.is_decoder())
        .map(|l| (l.index, Array2::zeros(l.map.weights().dim())))
        .collect();
    let mut total = 0.0;
    // Per instance: (score, dL/dfg_bar, dL/dbg_bar, per-layer grads) for each kind.
    for (mask, group) in layout.masks.iter().zip(&layout.groups) {
        let mut s = BoxScores::default();
        let mut pending = Vec::new();
        for (layers, weight, is_ca) in [
            (&ca_layers, config.lambda_ca, true),
            (&sa_layers, config.lambda_sa, false),
        ] {
            if layers.is_empty() {
                continue;
            }
            let mut fgs = Vec::new();
            let mut bgs = Vec::new();
            let mut parts = Vec::new();
            for &idx in layers {
                let res = record.layer(idx).expect("index from record").tag.resolution;
                let m = mask.resample(res, res)?;
                let (fg, bg, g) = energies_with_grad(record, &m, group, idx, true)?;
                fgs.push(fg);
                bgs.push(bg);
                parts.push((idx, g.expect("gradient requested")));
            }
            let (fg, bg) = mean_energies(&fgs, &bgs)?;
            let reward = reward_box_score(fg, bg);
            let penalty = penalty_box_score(bg);
            let ssum = fg + bg;
            let (dr_dfg, dr_dbg) = if ssum <= 0.0 {
                (0.0, 0.0)
            } else {
                let u = bg / ssum;
                (2.0 * u * (-bg / (ssum * ssum)), 2.0 * u * (fg / (ssum * ssum)))
            };
            let dl_dfg = weight * dr_dfg;
            let dl_dbg = weight * (dr_dbg + alpha / (1.0 + bg));
            let n = layers.len() as f64;
            if is_ca {
                s.reward_ca = reward;
                s.penalty_ca = penalty;
            } else {
                s.reward_sa = reward;
                s.penalty_sa = penalty;
            }
            for (idx, (gf, gb)) in parts {
                pending.push((idx, gf * (dl_dfg / n) + gb * (dl_dbg / n)));
            }
        }
        let li = instance_loss(&s, alpha, config);
        total += li * li;
        for (idx, g) in pending {
            let slot = grads.iter_mut().find(|(i, _)| *i == idx).expect("decoder layer");
            slot.1.scaled_add(2.0 * li, &g);
        }
        per_instance.push(li);
        scores.push(s);
    }
    Ok(CombinedLoss {
        per_instance,
        scores,
        total,
        grads,
    })
}

/// `z − β·grad`.
pub fn latent_opt_step(z: &LatentGrid, grad: &LatentGrid, beta: f64) -> Result<LatentGrid> {
    z.axpby(1.0, grad, -beta)
}

/// Loss and its latent gradient at `z`, from an unedited forward pass.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss_and_grad(
    z: &LatentGrid,
    t: usize,
    tokens: &[TokenEmbedding],
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    layout: &BoxLayout,
    alpha: f64,
    config: &SynthesisConfig,
) -> Result<(CombinedLoss, LatentGrid, Array2<f64>)> {
    let trace = ForwardTrace::run(z, t, tokens, params, schedule, None)?;
    let loss = combined_attn_loss(&trace.record()?, layout, alpha, config)?;
    let mut up = Upstream::new(params.num_layers());
    for (idx, g) in &loss.grads {
        up.add_attention(*idx, g.clone());
    }
    let grads = trace.backward(params, &up)?;
    let latent = LatentGrid::from_rows(z.height(), z.width(), &grads.latent)?;
    Ok((loss, latent, grads.tokens))
}

/// Mask one layer's attention. Returns the new weights and the number of
/// rows that had every weight suppressed.
pub fn mask_layer(
    tag: &LayerTag,
    attn: &Array2<f64>,
    masks: &[BinaryMask],
    groups: &[Vec<usize>],
) -> (Array2<f64>, usize) {
    let n = attn.nrows();
    let mut allowed = Array2::from_elem(attn.dim(), true);
    if tag.is_cross() {
        for (m, g) in masks.iter().zip(groups) {
            for (p, &inside) in m.bits().iter().enumerate() {
                if !inside {
                    for &j in g.iter().filter(|&&j| j < attn.ncols()) {
                        allowed[[p, j]] = false;
                    }
                }
            }
        }
    } else {
        let member: Vec<Vec<bool>> = (0..n).map(|p| masks.iter().map(|m| m.bits()[p]).collect()).collect();
        let in_any = |p: usize| member[p].iter().any(|&b| b);
        for p in (0..n).filter(|&p| in_any(p)) {
            for q in (0..n).filter(|&q| in_any(q)) {
                let shared = member[p].iter().zip(&member[q]).any(|(&a, &b)| a && b);
                if !shared {
                    allowed[[p, q]] = false;
                }
            }
        }
    }
    let mut out = attn.clone();
    let mut fallbacks = 0;
    for p in 0..n {
        let mut changed = false;
        for j in 0..attn.ncols() {
            if !allowed[[p, j]] && out[[p, j]] != 0.0 {
                out[[p, j]] = 0.0;
                changed = true;
            }
        }
        if !changed {
            continue;
        }
        let sum: f64 = out.row(p).sum();
        if sum > 0.0 {
            out.row_mut(p).mapv_inplace(|v| v / sum);
        } else {
            fallbacks += 1;
            let permitted = allowed.row(p).iter().filter(|&&b| b).count();
            if permitted == 0 {
                out.row_mut(p).assign(&attn.row(p));
            } else {
                for j in 0..attn.ncols() {
                    out[[p, j]] = if allowed[[p, j]] { 1.0 / permitted as f64 } else { 0.0 };
                }
            }
        }
    }
    (out, fallbacks)
}

/// Masked copy of a record plus diagnostics for rows that lost all weight.
pub fn apply_attention_masking(record: &AttentionRecord, layout: &BoxLayout) -> Result<(AttentionRecord, Vec<String>)> {
    let mut out = record.clone();
    let mut diagnostics = Vec::new();
    for layer in &mut out.layers {
        let masks = layout.at(layer.tag.resolution)?;
        let (w, fallbacks) = mask_layer(&layer.tag, layer.map.weights(), &masks, &layout.groups);
        if fallbacks > 0 {
            diagnostics.push(format!(
                "layer {}: {fallbacks} rows fully suppressed, spread uniformly over permitted targets",
                layer.index
            ));
        }
        layer.map = crate::tensor::AttentionMap::new(w)?;
    }
    Ok((out, diagnostics))
}

/// Metrics for one sampling step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub timestep: usize,
    /// Out-of-box weight used for the loss; 0 once optimization ends.
    pub alpha: f64,
    pub per_instance: Vec<f64>,
    pub total: f64,
    /// Loss after the latent update; equals `total` on steps without one.
    pub total_after: f64,
    /// Off-box fraction of each instance's CA attention, against the
    /// original boxes, read before the DDIM update.
    pub leakage: Vec<f64>,
    /// Whether the latent took a gradient step.
    pub optimized: bool,
}

pub fn write_step_csv<W: Write>(rows: &[StepMetrics], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let n = rows.first().map_or(0, |r| r.per_instance.len());
    let mut header = vec!["step".to_string(), "t".into(), "alpha".into()];
    header.extend((0..n).map(|i| format!("loss_{i}")));
    header.extend(["total".to_string(), "total_after".into()]);
    header.extend((0..n).map(|i| format!("leakage_{i}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.step.to_string(), r.timestep.to_string(), format!("{:e}", r.alpha)];
        rec.extend(r.per_instance.iter().map(|v| format!("{v:e}")));
        rec.extend([format!("{:e}", r.total), format!("{:e}", r.total_after)]);
        rec.extend(r.leakage.iter().map(|v| format!("{v:e}")));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::Serde(e.to_string()))?;
    Ok(())
}

/// Everything a synthesis run needs besides its configuration.
#[derive(Debug, Clone)]
pub struct SynthesisProblem {
    pub tokens: Vec<TokenEmbedding>,
    pub params: DenoiserParams,
    pub schedule: NoiseSchedule,
    pub boxes: BoxLayout,
    pub z_init: LatentGrid,
}

#[derive(Debug, Clone)]
pub struct SynthesisOutcome {
    pub z0: LatentGrid,
    pub steps: Vec<StepMetrics>,
    /// Leakage per instance on a clean forward pass of `z0`.
    pub final_leakage: Vec<f64>,
    pub final_masks: Vec<BinaryMask>,
    pub diagnostics: Vec<String>,
}

impl SynthesisOutcome {
    /// Optimized steps where the latent update did not raise the loss.
    pub fn descending_steps(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| s.optimized && s.total_after <= s.total)
            .count()
    }
}

/// Sampling timesteps `T = t_0 > t_1 > … > t_n = 0`, evenly spaced.
pub fn sampling_timesteps(schedule: &NoiseSchedule, steps: usize) -> Vec<usize> {
    let t = schedule.total_steps();
    (0..=steps).map(|k| t * (steps - k) / steps).collect()
}

pub fn run_synthesis(
    problem: &SynthesisProblem,
    config: &SynthesisConfig,
    alpha_params: &ScheduleParams,
    refine: &RefineConfig,
) -> Result<SynthesisOutcome> {
    config.validate(&problem.schedule, alpha_params)?;
    refine.validate()?;
    let SynthesisProblem {
        tokens,
        params,
        schedule,
        boxes,
        z_init,
    } = problem;
    let n = boxes.len();
    let (grid_h, grid_w) = (boxes.masks[0].height(), boxes.masks[0].width());
    let ts = sampling_timesteps(schedule, config.total_steps);
    let mut z = z_init.clone();
    let mut current = boxes.clone();
    let mut clusters: Option<ClusterState> = None;
    let mut steps = Vec::with_capacity(config.total_steps);
    let mut diagnostics = Vec::new();
    let placeholder = |i: usize| boxes.groups[i][0];

    for k in 1..=config.total_steps {
        let (t, t_prev) = (ts[k - 1], ts[k]);
        let optimizing = k <= config.t_bound;
        let alpha = if optimizing && config.out_of_box {
            alpha_decay(k, alpha_params)?
        } else {
            0.0
        };
        let (loss, grad, _) = combined_loss_and_grad(&z, t, tokens, params, schedule, &current, alpha, config)?;
        let mut total_after = loss.total;
        if optimizing && config.beta > 0.0 {
            z = latent_opt_step(&z, &grad, config.beta)
                .map_err(|e| Error::Divergence(format!("step {k} (t = {t}): {e}")))?;
        }
        let trace = ForwardTrace::run(&z, t, tokens, params, schedule, None)
            .map_err(|e| Error::Divergence(format!("step {k} (t = {t}): {e}")))?;
        let record = trace.record()?;
        if optimizing && config.beta > 0.0 {
            total_after = combined_attn_loss(&record, &current, alpha, config)?.total;
        }
        let leakage = (0..n)
            .map(|i| leakage_mass(&record, placeholder(i), &boxes.masks[i]))
            .collect::<Result<Vec<_>>>()?;

        if !optimizing && config.k_update > 0 && k % config.k_update == 0 {
            match refresh_masks(
                &record,
                &current,
                clusters.as_ref(),
                refine,
                config.seed.wrapping_add(k as u64),
            ) {
                Ok((masks, state, mut notes)) => {
                    diagnostics.append(&mut notes);
                    let masks = masks
                        .into_iter()
                        .enumerate()
                        .map(|(i, m)| {
                            if m.count() == 0 {
                                diagnostics.push(format!("step {k}: refined mask {i} empty, keeping previous"));
                                Ok(current.masks[i].clone())
                            } else {
                                m.resample(grid_h, grid_w)
                            }
                        })
                        .collect::<Result<Vec<_>>>()?;
                    current = BoxLayout::new(masks, current.groups.clone())?;
                    clusters = Some(state);
                }
                Err(e) => diagnostics.push(format!("step {k}: mask refresh skipped: {e}")),
            }
        }

        let eps = if config.masking {
            let layer_masks: Vec<Vec<BinaryMask>> = params
                .tags()
                .iter()
                .map(|tag| current.at(tag.resolution))
                .collect::<Result<_>>()?;
            let groups = &current.groups;
            let edit = |i: usize, tag: &LayerTag, a: &Array2<f64>| mask_layer(tag, a, &layer_masks[i], groups).0;
            ForwardTrace::run(&z, t, tokens, params, schedule, Some(&edit))
                .map_err(|e| Error::Divergence(format!("step {k} (t = {t}): {e}")))?
                .eps_hat()?
        } else {
            trace.eps_hat()?
        };
        z = schedule
            .ddim_step(&z, &eps, t, t_prev)
            .map_err(|e| Error::Divergence(format!("step {k} (t = {t}): {e}")))?;
        steps.push(StepMetrics {
            step: k,
            timestep: t,
            alpha,
            per_instance: loss.per_instance,
            total: loss.total,
            total_after,
            leakage,
            optimized: optimizing && config.beta > 0.0,
        });
    }

    let (_, record) = crate::denoiser::forward_denoise(&z, 0, tokens, params, schedule)?;
    let final_leakage = (0..n)
        .map(|i| leakage_mass(&record, placeholder(i), &boxes.masks[i]))
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthesisOutcome {
        z0: z,
        steps,
        final_leakage,
        final_masks: current.masks,
        diagnostics,
    })
}

/// CA masks, K-means over the finest decoder SA layer's rows, assignment.
/// Masks come back at that SA layer's resolution.
fn refresh_masks(
    record: &AttentionRecord,
    layout: &BoxLayout,
    prev: Option<&ClusterState>,
    refine: &RefineConfig,
    seed: u64,
) -> Result<(Vec<BinaryMask>, ClusterState, Vec<String>)> {
    let ca = compute_ca_masks(record, &layout.groups, refine.smoothing, refine.sigma_noun)?;
    let sa = record
        .self_layers()
        .filter(|l| l.tag.is_decoder())
        .max_by_key(|l| l.tag.resolution)
        .ok_or_else(|| Error::Config("record has no decoder self-attention layer".into()))?;
    let res = sa.tag.resolution;
    let k = refine.clusters.unwrap_or(layout.len() + 1);
    let features = DenseTensor::from_array2(sa.map.weights().clone())?;
    let warm = prev.filter(|c| c.k == k && c.centers.shape() == [k, features.shape()[1]]);
    let state = kmeans_self_attention(&features, k, warm.map(|c| &c.centers), seed)?;
    let coarse = ca
        .masks
        .iter()
        .map(|m| m.resample(res, res))
        .collect::<Result<Vec<_>>>()?;
    let refined = assign_clusters(&coarse, &state, refine.sigma_cluster)?;
    Ok((refined, state, ca.diagnostics))
}
