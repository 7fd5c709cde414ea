//! Config-driven runs with hashed, reproducible outputs.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::{leakage_mass, mask_iou, MetricsRow};
use super::pca::pca_project;
use super::scenario::{generate_scenario, Scenario, ScenarioConfig};
use crate::denoiser::{forward_denoise, LatentGrid, NoiseSchedule};
use crate::error::{Error, Result};
use crate::kkt::{oracle_report, RewardVariant};
use crate::learning::{
    evaluate_objective, run_semantic_learning, write_trace_csv, AttnTerm, LearningConfig, LearningOutcome,
    LearningProblem, SampleDraw,
};
use crate::refine::RefineConfig;
use crate::synthesis::{run_synthesis, write_step_csv, BoxLayout, ScheduleParams, SynthesisConfig, SynthesisProblem};
use crate::tensor::DenseTensor;

pub const MANIFEST_FILE: &str = "manifest.json";
const TOOL: &str = "disentangle";

/// A full experiment description, one section per stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub learning: LearningConfig,
    pub synthesis: SynthesisConfig,
    pub schedule: ScheduleParams,
    pub refinement: RefineConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config(e.to_string()))?;
        let config: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner().message()))
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Reads a TOML config, or the config embedded in a run manifest when the
    /// file ends in `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            let manifest: Manifest = serde_json::from_str(&text)?;
            manifest.config.validate()?;
            Ok(manifest.config)
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let schedule = NoiseSchedule::default();
        self.learning.validate(&schedule)?;
        self.synthesis.validate(&schedule, &self.schedule)?;
        self.refinement.validate()?;
        generate_scenario(&self.scenario).map(|_| ())
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn sha256(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Learn,
    Synthesize,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Learn => "learn",
            Phase::Synthesize => "synthesize",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub scenario: u64,
    pub learning: u64,
    pub synthesis: u64,
}

/// Everything needed to rerun a run, plus hashes of what it wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub phase: Phase,
    pub seeds: Seeds,
    pub config_sha256: String,
    pub config: ExperimentConfig,
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub manifest: Manifest,
    pub metrics: Vec<MetricsRow>,
    pub diagnostics: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Write via a temporary file in the same directory, then rename.
pub fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let target = dir.join(name);
    let mut builder = tempfile::Builder::new();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        builder.permissions(fs::Permissions::from_mode(0o644));
    }
    let mut tmp = builder.tempfile_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(&target).map_err(|e| Error::io(&target, e.error))?;
    Ok(())
}

/// Learning, then synthesis when `phase` asks for it. Outputs land in
/// `out_dir` with a manifest listing their hashes.
pub fn run_experiment(config: &ExperimentConfig, phase: Phase, out_dir: &Path) -> Result<RunOutput> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let scenario = generate_scenario(&config.scenario)?;
    let problem = LearningProblem {
        z0: scenario.z0.clone(),
        instances: scenario.instance_set()?,
        tokens: scenario.tokens.clone(),
        params: scenario.params.clone(),
        schedule: NoiseSchedule::default(),
    };
    let learned = run_semantic_learning(&problem, &config.learning)?;

    let mut files = BTreeMap::new();
    let mut emit = |name: &str, bytes: Vec<u8>| -> Result<()> {
        write_atomic(out_dir, name, &bytes)?;
        files.insert(name.to_string(), sha256_hex(&bytes));
        Ok(())
    };
    let mut buf = Vec::new();
    write_trace_csv(&learned.trace, &mut buf)?;
    emit("learning_trace.csv", buf)?;
    emit("embeddings.json", serde_json::to_vec_pretty(&learned.tokens)?)?;
    emit("pca.csv", pca_csv(&scenario)?)?;

    let mut metrics = learning_metrics(&scenario, &problem, &learned, &config.learning)?;
    let mut diagnostics = Vec::new();
    if phase == Phase::Synthesize {
        let (rows, steps_csv, mut notes) = synthesize(&scenario, &problem.schedule, &learned, config)?;
        emit("synthesis_steps.csv", steps_csv)?;
        metrics.extend(rows);
        diagnostics.append(&mut notes);
    }
    emit("metrics.csv", metrics_csv(&metrics)?)?;
    let oracle = oracle_report(config.scenario.instances, config.learning.alpha, RewardVariant::Costed)?;
    emit("oracle.json", serde_json::to_vec_pretty(&oracle)?)?;

    let manifest = Manifest {
        tool: TOOL.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        phase,
        seeds: Seeds {
            scenario: config.scenario.seed,
            learning: config.learning.seed,
            synthesis: config.synthesis.seed,
        },
        config_sha256: config.sha256()?,
        config: config.clone(),
        files,
    };
    write_atomic(out_dir, MANIFEST_FILE, &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(RunOutput {
        manifest,
        metrics,
        diagnostics,
    })
}

/// Per-instance localization on a clean pass, with loss components from a
/// held-out single-instance draw at the middle of the attention gate.
fn learning_metrics(
    scenario: &Scenario,
    problem: &LearningProblem,
    learned: &LearningOutcome,
    config: &LearningConfig,
) -> Result<Vec<MetricsRow>> {
    let (_, record) = forward_denoise(&scenario.z0, 0, &learned.tokens, &learned.params, &problem.schedule)?;
    let t = (config.t_start + config.t_max_attn).div_ceil(2).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let eps = LatentGrid::standard_normal_like(&scenario.z0, &mut rng)?;
    let term = AttnTerm::Staged(config.stage1_iters.saturating_sub(1));
    (0..scenario.masks.len())
        .map(|i| {
            let token = scenario.placeholder(i);
            let draw = SampleDraw::new(&problem.instances, vec![i])?;
            let obj = evaluate_objective(problem, &learned.tokens, &learned.params, config, &draw, t, &eps, term)?;
            Ok(MetricsRow {
                phase: "learn".into(),
                instance: i,
                mask_iou: mask_iou(&record, token, &scenario.masks[i])?,
                leakage_mass: leakage_mass(&record, token, &scenario.masks[i])?,
                rec_loss: Some(obj.rec),
                attn_loss: obj.attn,
            })
        })
        .collect()
}

/// Synthesis with the scenario masks as boxes, from seeded noise.
fn synthesize(
    scenario: &Scenario,
    schedule: &NoiseSchedule,
    learned: &LearningOutcome,
    config: &ExperimentConfig,
) -> Result<(Vec<MetricsRow>, Vec<u8>, Vec<String>)> {
    let groups = (0..scenario.masks.len())
        .map(|i| vec![scenario.placeholder(i)])
        .collect();
    let boxes = BoxLayout::new(scenario.masks.clone(), groups)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.synthesis.seed);
    let problem = SynthesisProblem {
        tokens: learned.tokens.clone(),
        params: learned.params.clone(),
        schedule: schedule.clone(),
        boxes: boxes.clone(),
        z_init: LatentGrid::standard_normal_like(&scenario.z0, &mut rng)?,
    };
    let outcome = run_synthesis(&problem, &config.synthesis, &config.schedule, &config.refinement)?;
    let mut buf = Vec::new();
    write_step_csv(&outcome.steps, &mut buf)?;
    let (_, record) = forward_denoise(&outcome.z0, 0, &problem.tokens, &problem.params, schedule)?;
    let last = outcome.steps.last().expect("total_steps >= 1");
    let rows = (0..boxes.len())
        .map(|i| {
            Ok(MetricsRow {
                phase: "synthesize".into(),
                instance: i,
                mask_iou: mask_iou(&record, scenario.placeholder(i), &boxes.masks[i])?,
                leakage_mass: outcome.final_leakage[i],
                rec_loss: None,
                attn_loss: last.per_instance[i],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((rows, buf, outcome.diagnostics))
}

fn metrics_csv(rows: &[MetricsRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Serde(e.to_string()))
}

/// Top-2 principal components of the clean pixel features, labelled by
/// instance (`-1` for background).
fn pca_csv(scenario: &Scenario) -> Result<Vec<u8>> {
    let rows = scenario.z0.rows();
    let proj = pca_project(&DenseTensor::from_array2(rows)?, 2)?;
    let out = proj.projected.to_rows();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["pixel", "instance", "pc1", "pc2"])?;
    for p in 0..out.nrows() {
        let label = scenario.masks.iter().position(|m| m.bits()[p]).map_or(-1, |i| i as i64);
        w.write_record([
            p.to_string(),
            label.to_string(),
            out[[p, 0]].to_string(),
            out[[p, 1]].to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Serde(e.to_string()))
}

/// Checks the run directory's files against its manifest and summarizes
/// the metrics.
pub fn report(dir: &Path) -> Result<String> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    for (name, expected) in &manifest.files {
        let file = dir.join(name);
        let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
        if &sha256_hex(&bytes) != expected {
            return Err(Error::InvalidValue(format!(
                "{name}: contents do not match the manifest hash"
            )));
        }
    }
    let metrics_path = dir.join("metrics.csv");
    let mut reader = csv::Reader::from_path(&metrics_path)?;
    let rows = reader
        .deserialize()
        .collect::<std::result::Result<Vec<MetricsRow>, _>>()?;

    let mut out = format!(
        "{} {} ({} run), config sha256 {}\nseeds: scenario {}, learning {}, synthesis {}\n{} files verified\n\n",
        manifest.tool,
        manifest.version,
        manifest.phase,
        manifest.config_sha256,
        manifest.seeds.scenario,
        manifest.seeds.learning,
        manifest.seeds.synthesis,
        manifest.files.len()
    );
    out.push_str(&format!(
        "{:<11} {:>8} {:>9} {:>13} {:>12} {:>12}\n",
        "phase", "instance", "mask_iou", "leakage_mass", "rec_loss", "attn_loss"
    ));
    for r in rows {
        let rec = r.rec_loss.map_or("-".to_string(), |v| format!("{v:.6}"));
        out.push_str(&format!(
            "{:<11} {:>8} {:>9.4} {:>13.6} {:>12} {:>12.6}\n",
            r.phase, r.instance, r.mask_iou, r.leakage_mass, rec, r.attn_loss
        ));
    }
    Ok(out)
}
