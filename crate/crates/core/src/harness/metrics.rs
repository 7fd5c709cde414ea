//! Leakage and localization metrics over attention records.

use serde::{Deserialize, Serialize};

use crate::denoiser::AttentionRecord;
use crate::error::{Error, Result};
use crate::learning::loss_layers;
use crate::tensor::BinaryMask;

/// Per-layer off-mask fractions for one token, plus anything odd.
#[derive(Debug, Clone, PartialEq)]
pub struct LeakageDetail {
    pub mass: f64,
    pub per_layer: Vec<f64>,
    pub diagnostics: Vec<String>,
}

/// Fraction of `token`'s attention landing outside `mask`, averaged over the
/// decoder CA layers. A layer with no attention on the token counts as fully
/// leaked.
pub fn leakage_detail(record: &AttentionRecord, token: usize, mask: &BinaryMask) -> Result<LeakageDetail> {
    let layers = loss_layers(record);
    if layers.is_empty() {
        return Err(Error::Config("record has no decoder cross-attention layers".into()));
    }
    let mut per_layer = Vec::with_capacity(layers.len());
    let mut diagnostics = Vec::new();
    for idx in layers {
        let layer = record.layer(idx).expect("index from record");
        let a = layer.map.weights();
        if token >= a.ncols() {
            return Err(Error::Config(format!("token {token} absent from layer {idx}")));
        }
        let res = layer.tag.resolution;
        let m = mask.resample(res, res)?;
        let (mut inside, mut outside) = (0.0, 0.0);
        for (p, &bit) in m.bits().iter().enumerate() {
            if bit {
                inside += a[[p, token]];
            } else {
                outside += a[[p, token]];
            }
        }
        let total = inside + outside;
        if total <= 0.0 {
            diagnostics.push(format!("layer {idx}: token {token} receives no attention"));
            per_layer.push(1.0);
        } else {
            per_layer.push(outside / total);
        }
    }
    let mass = per_layer.iter().sum::<f64>() / per_layer.len() as f64;
    Ok(LeakageDetail {
        mass,
        per_layer,
        diagnostics,
    })
}

pub fn leakage_mass(record: &AttentionRecord, token: usize, mask: &BinaryMask) -> Result<f64> {
    let detail = leakage_detail(record, token, mask)?;
    for d in &detail.diagnostics {
        log::warn!("leakage: {d}");
    }
    Ok(detail.mass)
}

/// IoU between the pixels where `token` wins the CA argmax and `mask`,
/// averaged over decoder CA layers. Ties go to the lower token index.
pub fn mask_iou(record: &AttentionRecord, token: usize, mask: &BinaryMask) -> Result<f64> {
    let layers = loss_layers(record);
    if layers.is_empty() {
        return Err(Error::Config("record has no decoder cross-attention layers".into()));
    }
    let mut sum = 0.0;
    for &idx in &layers {
        let layer = record.layer(idx).expect("index from record");
        let a = layer.map.weights();
        let res = layer.tag.resolution;
        let region = BinaryMask::new(
            res,
            res,
            a.rows()
                .into_iter()
                .map(|row| {
                    let best =
                        row.iter().enumerate().fold(
                            (0, f64::NEG_INFINITY),
                            |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc },
                        );
                    best.0 == token
                })
                .collect(),
        )?;
        sum += region.iou(&mask.resample(res, res)?)?;
    }
    Ok(sum / layers.len() as f64)
}

/// Per-instance metrics emitted by experiment runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub phase: String,
    pub instance: usize,
    pub mask_iou: f64,
    pub leakage_mass: f64,
    /// Empty for synthesis rows, which have no reconstruction target.
    pub rec_loss: Option<f64>,
    pub attn_loss: f64,
}
