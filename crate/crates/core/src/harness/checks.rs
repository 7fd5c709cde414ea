//! Finite-difference checks of every hand-written gradient on small scenarios.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::scenario::{generate_scenario, Scenario, ScenarioConfig};
use crate::denoiser::{LatentGrid, NoiseSchedule, TokenEmbedding};
use crate::error::Result;
use crate::gradcheck::{central_difference, max_relative_error, FD_STEP};
use crate::learning::{evaluate_objective, init_placeholders, AttnTerm, LearningConfig, LearningProblem, SampleDraw};
use crate::synthesis::{combined_loss_and_grad, BoxLayout, SynthesisConfig};

pub const GRADCHECK_TOL: f64 = 1e-5;
const LEARN_T: usize = 20;
const SYNTH_T: usize = 30;
const SYNTH_ALPHA: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckEntry {
    pub loss: String,
    pub wrt: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub entries: Vec<GradcheckEntry>,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn small_scenario(seed: u64) -> Result<(Scenario, Vec<TokenEmbedding>)> {
    let s = generate_scenario(&ScenarioConfig {
        height: 4,
        width: 4,
        dim: 4,
        attn_gain: 1.5,
        seed,
        ..Default::default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = init_placeholders(&s.tokens, 1.0, &mut rng);
    Ok((s, tokens))
}

fn learnable_coords(tokens: &[TokenEmbedding]) -> Vec<f64> {
    tokens
        .iter()
        .filter(|t| t.learnable)
        .flat_map(|t| t.vector.clone())
        .collect()
}

fn with_coords(tokens: &[TokenEmbedding], x: &[f64]) -> Vec<TokenEmbedding> {
    let mut out = tokens.to_vec();
    let mut at = 0;
    for t in out.iter_mut().filter(|t| t.learnable) {
        let d = t.vector.len();
        t.vector.copy_from_slice(&x[at..at + d]);
        at += d;
    }
    out
}

fn token_grad_coords(tokens: &[TokenEmbedding], grads: &ndarray::Array2<f64>) -> Vec<f64> {
    tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| t.learnable)
        .flat_map(|(i, _)| grads.row(i).to_vec())
        .collect()
}

/// Reward, penalty and reconstruction losses against the learnable
/// embeddings, and the synthesis total against embeddings and `z_t`.
pub fn gradcheck_suite(seed: u64) -> Result<GradcheckReport> {
    let (s, tokens) = small_scenario(seed)?;
    let problem = LearningProblem {
        z0: s.z0.clone(),
        instances: s.instance_set()?,
        tokens: tokens.clone(),
        params: s.params.clone(),
        schedule: NoiseSchedule::default(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let eps = LatentGrid::standard_normal_like(&s.z0, &mut rng)?;
    let draw = SampleDraw::new(&problem.instances, (0..s.masks.len()).collect())?;
    let x = learnable_coords(&tokens);
    let mut entries = Vec::new();

    let cases = [
        ("reward", 0.0, 1.0, AttnTerm::Reward),
        ("penalty", 0.0, 1.0, AttnTerm::Penalty),
        ("reconstruction", 1.0, 0.0, AttnTerm::Penalty),
    ];
    for (name, lambda_rec, lambda_attn, term) in cases {
        let cfg = LearningConfig {
            lambda_rec,
            lambda_attn,
            ..Default::default()
        };
        let eval = |toks: &[TokenEmbedding]| {
            evaluate_objective(&problem, toks, &problem.params, &cfg, &draw, LEARN_T, &eps, term)
        };
        let analytic = token_grad_coords(&tokens, &eval(&tokens)?.grads.tokens);
        let numeric = central_difference(|x| Ok(eval(&with_coords(&tokens, x))?.total), &x, FD_STEP)?;
        entries.push(entry(name, "embeddings", &analytic, &numeric));
    }

    let groups = (0..s.masks.len()).map(|i| vec![s.placeholder(i)]).collect();
    let layout = BoxLayout::new(s.masks.clone(), groups)?;
    let synth = SynthesisConfig::default();
    let zt = problem.schedule.ddim_add_noise(&s.z0, &eps, SYNTH_T)?;
    let total = |z: &LatentGrid, toks: &[TokenEmbedding]| {
        combined_loss_and_grad(
            z,
            SYNTH_T,
            toks,
            &s.params,
            &problem.schedule,
            &layout,
            SYNTH_ALPHA,
            &synth,
        )
    };
    let (_, z_grad, tok_grad) = total(&zt, &tokens)?;
    let numeric = central_difference(|x| Ok(total(&zt, &with_coords(&tokens, x))?.0.total), &x, FD_STEP)?;
    entries.push(entry(
        "synthesis_total",
        "embeddings",
        &token_grad_coords(&tokens, &tok_grad),
        &numeric,
    ));
    let zx = zt.values();
    let numeric = central_difference(
        |x| {
            let z = LatentGrid::new(zt.height(), zt.width(), zt.channels(), x.to_vec())?;
            Ok(total(&z, &tokens)?.0.total)
        },
        &zx,
        FD_STEP,
    )?;
    entries.push(entry("synthesis_total", "z_t", &z_grad.values(), &numeric));

    let max_rel_error = entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        seed,
        tolerance: GRADCHECK_TOL,
        entries,
        max_rel_error,
        passed: max_rel_error <= GRADCHECK_TOL,
    })
}

fn entry(loss: &str, wrt: &str, analytic: &[f64], numeric: &[f64]) -> GradcheckEntry {
    GradcheckEntry {
        loss: loss.into(),
        wrt: wrt.into(),
        coordinates: analytic.len(),
        max_rel_error: max_relative_error(analytic, numeric),
    }
}
