//! Disentangled semantic learning.
//!
//! Placeholder embeddings are fitted to a single image under a masked
//! reconstruction loss plus a cross-attention loss that starts reward-based
//! (pull attention towards `α·M`) and switches to penalty-based (push
//! attention out of `1 − M`) after `e_coarse` iterations. Each iteration
//! trains on a random nonempty subset of instances. After the embedding
//! stage the value projections are refined on reconstruction alone.

use std::io::Write;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::denoiser::{
    AttentionRecord, DenoiserParams, ForwardTrace, Gradients, LatentGrid, NoiseSchedule, TokenEmbedding, Upstream,
};
use crate::error::{Error, Result};
use crate::tensor::BinaryMask;

/// Instance masks with their placeholder tokens and prompt-token groups.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceSet {
    masks: Vec<BinaryMask>,
    placeholder_ids: Vec<usize>,
    token_groups: Vec<Vec<usize>>,
}

impl InstanceSet {
    pub fn new(masks: Vec<BinaryMask>, placeholder_ids: Vec<usize>, token_groups: Vec<Vec<usize>>) -> Result<Self> {
        let n = masks.len();
        if n == 0 {
            return Err(Error::Config("at least one instance is required".into()));
        }
        if placeholder_ids.len() != n || token_groups.len() != n {
            return Err(Error::Config(format!(
                "{n} masks but {} placeholders and {} token groups",
                placeholder_ids.len(),
                token_groups.len()
            )));
        }
        let (h, w) = (masks[0].height(), masks[0].width());
        for (i, m) in masks.iter().enumerate() {
            if m.height() != h || m.width() != w {
                return Err(Error::Shape(format!(
                    "mask {i} is {}x{}, expected {h}x{w}",
                    m.height(),
                    m.width()
                )));
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                if masks[i].intersection(&masks[j])?.count() > 0 {
                    return Err(Error::Config(format!("masks {i} and {j} overlap")));
                }
            }
        }
        if token_groups.iter().any(|g| g.is_empty()) {
            return Err(Error::Config("token groups must be nonempty".into()));
        }
        Ok(Self {
            masks,
            placeholder_ids,
            token_groups,
        })
    }

    /// Groups default to the placeholder alone.
    pub fn with_placeholders(masks: Vec<BinaryMask>, placeholder_ids: Vec<usize>) -> Result<Self> {
        let groups = placeholder_ids.iter().map(|&p| vec![p]).collect();
        Self::new(masks, placeholder_ids, groups)
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn masks(&self) -> &[BinaryMask] {
        &self.masks
    }

    pub fn mask(&self, i: usize) -> &BinaryMask {
        &self.masks[i]
    }

    pub fn placeholder_ids(&self) -> &[usize] {
        &self.placeholder_ids
    }

    pub fn token_groups(&self) -> &[Vec<usize>] {
        &self.token_groups
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.masks[0].height(), self.masks[0].width())
    }
}

/// Hyper-parameters of the learning stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningConfig {
    /// Reward target scale.
    pub alpha: f64,
    pub lambda_rec: f64,
    pub lambda_attn: f64,
    /// Total iterations `E`.
    pub total_iters: usize,
    /// Embedding-only iterations; the rest refine value projections.
    pub stage1_iters: usize,
    /// Reward iterations before switching to the penalty loss.
    pub e_coarse: usize,
    /// The attention term is active only for `t_start ≤ t ≤ t_max_attn`.
    pub t_max_attn: usize,
    pub t_start: usize,
    pub learn_rate: f64,
    pub stage2_learn_rate: f64,
    /// Standard deviation of the Gaussian placeholder initialization.
    pub init_std: f64,
    /// Divide each layer's attention loss by its pixel count.
    pub normalize_by_pixels: bool,
    pub seed: u64,
}

impl Default for LearningConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            lambda_rec: 1.0,
            lambda_attn: 0.01,
            total_iters: 1200,
            stage1_iters: 800,
            e_coarse: 200,
            t_max_attn: 35,
            t_start: 0,
            learn_rate: 5e-3,
            stage2_learn_rate: 2e-6,
            init_std: 0.02,
            normalize_by_pixels: false,
            seed: 0,
        }
    }
}

impl LearningConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::Config(format!("learning.{key}: {why}")));
        // False for NaN as well as negatives.
        let nonneg = |v: f64| v >= 0.0;
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha", "must lie in (0, 1]");
        }
        if !nonneg(self.lambda_rec) || !nonneg(self.lambda_attn) {
            return bad("lambda_rec", "loss weights must be nonnegative");
        }
        if self.e_coarse > self.stage1_iters {
            return bad("e_coarse", "must not exceed stage1_iters");
        }
        if self.stage1_iters > self.total_iters {
            return bad("stage1_iters", "must not exceed total_iters");
        }
        if self.t_max_attn > schedule.total_steps() {
            return bad("t_max_attn", "outside the schedule range");
        }
        if self.t_start > self.t_max_attn {
            return bad("t_start", "must not exceed t_max_attn");
        }
        if !nonneg(self.learn_rate) || !nonneg(self.stage2_learn_rate) {
            return bad("learn_rate", "must be nonnegative");
        }
        if !nonneg(self.init_std) {
            return bad("init_std", "must be nonnegative");
        }
        Ok(())
    }
}

/// One joint-sampling draw: the selected instances and their mask union.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleDraw {
    pub lambda_set: Vec<usize>,
    pub m_rec: BinaryMask,
}

impl SampleDraw {
    pub fn new(instances: &InstanceSet, lambda_set: Vec<usize>) -> Result<Self> {
        if lambda_set.is_empty() || lambda_set.iter().any(|&i| i >= instances.len()) {
            return Err(Error::Config(format!("invalid instance subset {lambda_set:?}")));
        }
        let mut m_rec = instances.mask(lambda_set[0]).clone();
        for &i in &lambda_set[1..] {
            m_rec = m_rec.union(instances.mask(i))?;
        }
        Ok(Self { lambda_set, m_rec })
    }
}

/// Draw a nonempty instance subset uniformly among all `2^N − 1`.
pub fn joint_sample<R: Rng + ?Sized>(instances: &InstanceSet, rng: &mut R) -> SampleDraw {
    let n = instances.len();
    assert!(n < 64, "joint sampling supports fewer than 64 instances");
    let code: u64 = rng.random_range(1..(1u64 << n));
    let set = (0..n).filter(|i| code >> i & 1 == 1).collect();
    SampleDraw::new(instances, set).expect("subset drawn from valid indices")
}

/// Indices of the layers that feed the cross-attention losses: decoder CA only.
pub fn loss_layers(record: &AttentionRecord) -> Vec<usize> {
    record
        .layers
        .iter()
        .filter(|l| l.tag.is_cross() && l.tag.is_decoder())
        .map(|l| l.index)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Reward,
    Penalty,
    Stage2,
}

impl Branch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Branch::Reward => "reward",
            Branch::Penalty => "penalty",
            Branch::Stage2 => "stage2",
        }
    }
}

/// A cross-attention loss value with its gradient w.r.t. each layer's map.
#[derive(Debug, Clone)]
pub struct AttnLoss {
    pub value: f64,
    pub grads: Vec<(usize, Array2<f64>)>,
}

/// Shared body of the reward and penalty losses. `alpha = None` selects the
/// penalty form.
fn ca_loss(
    instances: &InstanceSet,
    draw: &SampleDraw,
    record: &AttentionRecord,
    alpha: Option<f64>,
    normalize: bool,
) -> Result<AttnLoss> {
    let mut value = 0.0;
    let mut grads = Vec::new();
    for idx in loss_layers(record) {
        let layer = record.layer(idx).expect("index from record");
        let a = layer.map.weights();
        let res = layer.tag.resolution;
        if a.nrows() != res * res {
            return Err(Error::Shape(format!(
                "layer {idx} has {} rows for a {res}x{res} grid",
                a.nrows()
            )));
        }
        let scale = if normalize { 1.0 / a.nrows() as f64 } else { 1.0 };
        let mut g = Array2::zeros(a.dim());
        for &j in &draw.lambda_set {
            let tok = instances.placeholder_ids[j];
            if tok >= a.ncols() {
                return Err(Error::Config(format!(
                    "placeholder token {tok} absent from layer {idx}"
                )));
            }
            let m = instances.mask(j).resample(res, res)?;
            for (p, &inside) in m.bits().iter().enumerate() {
                let ap = a[[p, tok]];
                let (term, grad) = match alpha {
                    Some(alpha) => {
                        let r = ap - if inside { alpha } else { 0.0 };
                        (r * r, 2.0 * r)
                    }
                    None if inside => (0.0, 0.0),
                    None => (ap * ap, 2.0 * ap),
                };
                value += scale * term;
                g[[p, tok]] += scale * grad;
            }
        }
        grads.push((idx, g));
    }
    Ok(AttnLoss { value, grads })
}

/// `Σ_{j∈Λ} Σ_l ‖α·M_j^l − A_j^l‖²` over decoder CA layers.
pub fn reward_ca_loss(instances: &InstanceSet, draw: &SampleDraw, record: &AttentionRecord, alpha: f64) -> Result<f64> {
    Ok(ca_loss(instances, draw, record, Some(alpha), false)?.value)
}

/// `Σ_{j∈Λ} Σ_l ‖(1 − M_j^l) ⊙ A_j^l‖²` over decoder CA layers.
pub fn penalty_ca_loss(instances: &InstanceSet, draw: &SampleDraw, record: &AttentionRecord) -> Result<f64> {
    Ok(ca_loss(instances, draw, record, None, false)?.value)
}

pub fn staged_branch(e: usize, config: &LearningConfig) -> Branch {
    if e < config.e_coarse {
        Branch::Reward
    } else {
        Branch::Penalty
    }
}

/// Coarse-to-fine attention loss: reward before `e_coarse`, penalty after.
pub fn staged_attn_loss(
    e: usize,
    config: &LearningConfig,
    instances: &InstanceSet,
    draw: &SampleDraw,
    record: &AttentionRecord,
) -> Result<AttnLoss> {
    let alpha = match staged_branch(e, config) {
        Branch::Reward => Some(config.alpha),
        _ => None,
    };
    ca_loss(instances, draw, record, alpha, config.normalize_by_pixels)
}

/// `‖M ⊙ eps − M ⊙ eps_hat‖²` summed over pixels and channels.
pub fn masked_reconstruction_loss(eps: &LatentGrid, eps_hat: &LatentGrid, m_rec: &BinaryMask) -> Result<f64> {
    Ok(masked_reconstruction(eps, eps_hat, m_rec)?.0)
}

/// Loss and its gradient w.r.t. `eps_hat` (pixel rows).
fn masked_reconstruction(eps: &LatentGrid, eps_hat: &LatentGrid, m_rec: &BinaryMask) -> Result<(f64, Array2<f64>)> {
    eps.check_same_shape(eps_hat)?;
    if m_rec.height() != eps.height() || m_rec.width() != eps.width() {
        return Err(Error::Shape(format!(
            "reconstruction mask {}x{} does not match latent {}x{}",
            m_rec.height(),
            m_rec.width(),
            eps.height(),
            eps.width()
        )));
    }
    let diff = eps.rows() - eps_hat.rows();
    let mut grad = Array2::zeros(diff.dim());
    let mut value = 0.0;
    for (p, &inside) in m_rec.bits().iter().enumerate() {
        if inside {
            for c in 0..diff.ncols() {
                let r = diff[[p, c]];
                value += r * r;
                grad[[p, c]] = -2.0 * r;
            }
        }
    }
    Ok((value, grad))
}

/// `λ_rec·rec + λ_attn·attn`.
pub fn total_learning_loss(rec: f64, attn: f64, config: &LearningConfig) -> f64 {
    config.lambda_rec * rec + config.lambda_attn * attn
}

/// Everything the learning loop needs about the image being learned.
#[derive(Debug, Clone)]
pub struct LearningProblem {
    pub z0: LatentGrid,
    pub instances: InstanceSet,
    pub tokens: Vec<TokenEmbedding>,
    pub params: DenoiserParams,
    pub schedule: NoiseSchedule,
}

/// One evaluation of the stage-1 objective at a fixed draw, timestep and noise.
#[derive(Debug, Clone)]
pub struct Objective {
    pub branch: Branch,
    pub rec: f64,
    pub attn: f64,
    pub total: f64,
    pub grads: Gradients,
}

/// Which attention term an [`evaluate_objective`] call uses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttnTerm {
    Reward,
    Penalty,
    /// Follow `e` against `e_coarse`.
    Staged(usize),
}

/// Evaluate `λ_rec·L_rec + λ_attn·L_attn` and its gradients. The attention
/// term is zero outside the timestep gate.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_objective(
    problem: &LearningProblem,
    tokens: &[TokenEmbedding],
    params: &DenoiserParams,
    config: &LearningConfig,
    draw: &SampleDraw,
    t: usize,
    eps: &LatentGrid,
    term: AttnTerm,
) -> Result<Objective> {
    let zt = problem.schedule.ddim_add_noise(&problem.z0, eps, t)?;
    let trace = ForwardTrace::run(&zt, t, tokens, params, &problem.schedule, None)?;
    let m_rec = draw.m_rec.resample(zt.height(), zt.width())?;
    let (rec, rec_grad) = masked_reconstruction(eps, &trace.eps_hat()?, &m_rec)?;
    let branch = match term {
        AttnTerm::Reward => Branch::Reward,
        AttnTerm::Penalty => Branch::Penalty,
        AttnTerm::Staged(e) => staged_branch(e, config),
    };
    let gated = t >= config.t_start && t <= config.t_max_attn;
    let mut upstream = Upstream::new(params.num_layers());
    upstream.eps_hat = Some(rec_grad * config.lambda_rec);
    let mut attn = 0.0;
    if gated {
        let record = trace.record()?;
        let alpha = (branch == Branch::Reward).then_some(config.alpha);
        let loss = ca_loss(&problem.instances, draw, &record, alpha, config.normalize_by_pixels)?;
        attn = loss.value;
        for (idx, g) in loss.grads {
            upstream.add_attention(idx, g * config.lambda_attn);
        }
    }
    let grads = trace.backward(params, &upstream)?;
    Ok(Objective {
        branch,
        rec,
        attn,
        total: total_learning_loss(rec, attn, config),
        grads,
    })
}

/// One row of the loss trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub branch: Branch,
    pub rec_loss: f64,
    pub attn_loss: f64,
    pub total: f64,
}

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iteration", "branch", "rec_loss", "attn_loss", "total"])?;
    for r in rows {
        w.write_record([
            r.iteration.to_string(),
            r.branch.as_str().to_string(),
            format!("{:e}", r.rec_loss),
            format!("{:e}", r.attn_loss),
            format!("{:e}", r.total),
        ])?;
    }
    w.flush().map_err(|e| Error::Serde(e.to_string()))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct LearningOutcome {
    pub initial_tokens: Vec<TokenEmbedding>,
    pub tokens: Vec<TokenEmbedding>,
    pub params: DenoiserParams,
    pub trace: Vec<TraceRow>,
}

/// Seeded Gaussian initialization of the learnable tokens.
pub fn init_placeholders<R: Rng + ?Sized>(tokens: &[TokenEmbedding], std: f64, rng: &mut R) -> Vec<TokenEmbedding> {
    let normal = Normal::new(0.0, std).expect("nonnegative std");
    tokens
        .iter()
        .map(|t| {
            let mut t = t.clone();
            if t.learnable {
                t.vector = t.vector.iter().map(|_| normal.sample(rng)).collect();
            }
            t
        })
        .collect()
}

/// Run the two-stage learning loop.
pub fn run_semantic_learning(problem: &LearningProblem, config: &LearningConfig) -> Result<LearningOutcome> {
    config.validate(&problem.schedule)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let initial_tokens = init_placeholders(&problem.tokens, config.init_std, &mut rng);
    let mut tokens = initial_tokens.clone();
    let mut params = problem.params.clone();
    let big_t = problem.schedule.total_steps();
    let mut trace = Vec::with_capacity(config.total_iters);

    for e in 0..config.total_iters {
        let draw = joint_sample(&problem.instances, &mut rng);
        let t = rng.random_range(1..=big_t);
        let eps = LatentGrid::standard_normal_like(&problem.z0, &mut rng)?;
        let row = if e < config.stage1_iters {
            let obj = evaluate_objective(problem, &tokens, &params, config, &draw, t, &eps, AttnTerm::Staged(e))?;
            check_finite(e, obj.total)?;
            for (i, tok) in tokens.iter_mut().enumerate() {
                if tok.learnable {
                    for (v, g) in tok.vector.iter_mut().zip(obj.grads.tokens.row(i)) {
                        *v -= config.learn_rate * g;
                    }
                }
            }
            TraceRow {
                iteration: e,
                branch: obj.branch,
                rec_loss: obj.rec,
                attn_loss: obj.attn,
                total: obj.total,
            }
        } else {
            let rec_only = LearningConfig {
                lambda_attn: 0.0,
                ..config.clone()
            };
            let obj = evaluate_objective(problem, &tokens, &params, &rec_only, &draw, t, &eps, AttnTerm::Penalty)?;
            check_finite(e, obj.total)?;
            for (i, g) in obj.grads.v_proj.iter().enumerate() {
                params.v_proj_mut(i).scaled_add(-config.stage2_learn_rate, g);
            }
            TraceRow {
                iteration: e,
                branch: Branch::Stage2,
                rec_loss: obj.rec,
                attn_loss: 0.0,
                total: obj.total,
            }
        };
        if tokens.iter().flat_map(|t| &t.vector).any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!("iteration {e}: embedding became non-finite")));
        }
        trace.push(row);
    }
    Ok(LearningOutcome {
        initial_tokens,
        tokens,
        params,
        trace,
    })
}

fn check_finite(e: usize, total: f64) -> Result<()> {
    if total.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!("iteration {e}: total loss is {total}")))
    }
}
