//! Mask refinement from attention.
//!
//! Coarse instance masks come from thresholding smoothed cross-attention;
//! self-attention rows are clustered with K-means and each cluster joins the
//! instance whose coarse mask covers enough of it.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::AttentionRecord;
use crate::error::{Error, Result};
use crate::tensor::{BinaryMask, DenseTensor};

/// Lloyd iterations stop once no center moves further than this.
pub const CENTER_SHIFT_TOL: f64 = 1e-8;
pub const MAX_LLOYD_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    /// Box-blur radius applied to averaged cross-attention.
    pub smoothing: usize,
    /// Threshold on the min-max normalized cross-attention map.
    pub sigma_noun: f64,
    /// Minimum fraction of a cluster inside a coarse mask for it to join.
    pub sigma_cluster: f64,
    /// Cluster count; `None` means instances + 1.
    pub clusters: Option<usize>,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            smoothing: 1,
            sigma_noun: 0.3,
            sigma_cluster: 0.5,
            clusters: None,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sigma_noun) {
            return Err(Error::Config("refinement.sigma_noun: must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.sigma_cluster) {
            return Err(Error::Config("refinement.sigma_cluster: must lie in [0, 1]".into()));
        }
        if self.clusters == Some(0) {
            return Err(Error::Config("refinement.clusters: must be positive".into()));
        }
        Ok(())
    }
}

/// Coarse masks plus anything worth flagging about how they were built.
#[derive(Debug, Clone, PartialEq)]
pub struct CaMasks {
    pub masks: Vec<BinaryMask>,
    pub diagnostics: Vec<String>,
}

/// Threshold each group's layer-averaged, blurred, min-max normalized
/// cross-attention. Maps of different resolutions are brought to the finest
/// decoder CA grid by nearest upsampling before averaging.
pub fn compute_ca_masks(
    record: &AttentionRecord,
    groups: &[Vec<usize>],
    smoothing: usize,
    sigma_noun: f64,
) -> Result<CaMasks> {
    let layers: Vec<_> = record.cross_layers().filter(|l| l.tag.is_decoder()).collect();
    if layers.is_empty() {
        return Err(Error::Config("record has no decoder cross-attention layers".into()));
    }
    let res = layers.iter().map(|l| l.tag.resolution).max().expect("nonempty");
    let mut masks = Vec::with_capacity(groups.len());
    let mut diagnostics = Vec::new();
    for (i, group) in groups.iter().enumerate() {
        if group.is_empty() {
            return Err(Error::Config(format!("token group {i} is empty")));
        }
        let mut avg = vec![0.0; res * res];
        for layer in &layers {
            let a = layer.map.weights();
            let lr = layer.tag.resolution;
            if res % lr != 0 {
                return Err(Error::Resample(format!("layer grid {lr} does not divide {res}")));
            }
            let f = res / lr;
            for &tok in group {
                if tok >= a.ncols() {
                    return Err(Error::Config(format!("token {tok} absent from layer {}", layer.index)));
                }
                for r in 0..res {
                    for c in 0..res {
                        avg[r * res + c] += a[[(r / f) * lr + c / f, tok]];
                    }
                }
            }
        }
        let denom = (layers.len() * group.len()) as f64;
        avg.iter_mut().for_each(|v| *v /= denom);
        let blurred = box_blur(&avg, res, res, smoothing);
        let lo = blurred.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = blurred.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mask = if hi - lo <= 1e-12 {
            diagnostics.push(format!(
                "instance {i}: cross-attention map is constant, mask left empty"
            ));
            BinaryMask::zeros(res, res)?
        } else {
            let bits = blurred.iter().map(|v| (v - lo) / (hi - lo) >= sigma_noun).collect();
            BinaryMask::new(res, res, bits)?
        };
        masks.push(mask);
    }
    Ok(CaMasks { masks, diagnostics })
}

/// Mean over the `(2r+1)²` window, clipped at the borders.
fn box_blur(values: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return values.to_vec();
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let (r0, r1) = (r.saturating_sub(radius), (r + radius).min(h - 1));
            let (c0, c1) = (c.saturating_sub(radius), (c + radius).min(w - 1));
            let mut sum = 0.0;
            for rr in r0..=r1 {
                for cc in c0..=c1 {
                    sum += values[rr * w + cc];
                }
            }
            out[r * w + c] = sum / ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64;
        }
    }
    out
}

/// Result of a K-means run.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    pub k: usize,
    pub centers: DenseTensor,
    pub assignments: Vec<usize>,
    pub iterations: usize,
    /// Label changes after the first assignment pass.
    pub reassignments: usize,
    /// Within-cluster sum of squares after each assignment pass.
    pub objective: Vec<f64>,
}

/// Lloyd's algorithm on the rows of `features`, warm-started from
/// `prev_centers` when given, otherwise seeded k-means++.
pub fn kmeans_self_attention(
    features: &DenseTensor,
    k: usize,
    prev_centers: Option<&DenseTensor>,
    seed: u64,
) -> Result<ClusterState> {
    let x = features.as_matrix()?;
    let n = x.nrows();
    if k == 0 || k > n {
        return Err(Error::Config(format!("cannot form {k} clusters from {n} points")));
    }
    let mut centers = match prev_centers {
        Some(c) => {
            let c = c.as_matrix()?;
            if c.dim() != (k, x.ncols()) {
                return Err(Error::Shape(format!(
                    "warm-start centers are {:?}, expected ({k}, {})",
                    c.dim(),
                    x.ncols()
                )));
            }
            c.to_owned()
        }
        None => kmeans_plus_plus(&x.to_owned(), k, seed),
    };
    let mut assignments = vec![usize::MAX; n];
    let mut objective = Vec::new();
    let mut reassignments = 0;
    let mut iterations = 0;
    while iterations < MAX_LLOYD_ITERS {
        iterations += 1;
        let mut wcss = 0.0;
        for (p, row) in x.axis_iter(Axis(0)).enumerate() {
            let (best, dist) = centers
                .axis_iter(Axis(0))
                .map(|c| row.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .enumerate()
                .fold((0, f64::INFINITY), |acc, (j, d)| if d < acc.1 { (j, d) } else { acc });
            if iterations > 1 && assignments[p] != best {
                reassignments += 1;
            }
            assignments[p] = best;
            wcss += dist;
        }
        objective.push(wcss);
        let mut sums = Array2::<f64>::zeros(centers.dim());
        let mut counts = vec![0usize; k];
        for (p, row) in x.axis_iter(Axis(0)).enumerate() {
            let mut s = sums.row_mut(assignments[p]);
            s += &row;
            counts[assignments[p]] += 1;
        }
        let mut shift = 0.0f64;
        for (j, &count) in counts.iter().enumerate() {
            // An empty cluster keeps its previous center.
            if count > 0 {
                let new = sums.row(j).mapv(|v| v / count as f64);
                let d = new
                    .iter()
                    .zip(centers.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                shift = shift.max(d);
                centers.row_mut(j).assign(&new);
            }
        }
        if shift < CENTER_SHIFT_TOL {
            break;
        }
    }
    Ok(ClusterState {
        k,
        centers: DenseTensor::from_array2(centers)?,
        assignments,
        iterations,
        reassignments,
        objective,
    })
}

fn kmeans_plus_plus(x: &Array2<f64>, k: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = x.nrows();
    let mut centers = Array2::zeros((k, x.ncols()));
    centers.row_mut(0).assign(&x.row(rng.random_range(0..n)));
    let mut nearest = vec![f64::INFINITY; n];
    for j in 1..k {
        let prev = centers.row(j - 1).to_owned();
        for (p, row) in x.axis_iter(Axis(0)).enumerate() {
            let d: f64 = row.iter().zip(&prev).map(|(a, b)| (a - b) * (a - b)).sum();
            nearest[p] = nearest[p].min(d);
        }
        let total: f64 = nearest.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (p, &d) in nearest.iter().enumerate() {
                if target < d {
                    chosen = p;
                    break;
                }
                target -= d;
            }
            chosen
        };
        centers.row_mut(j).assign(&x.row(pick));
    }
    centers
}

/// Hand each cluster to the instance whose coarse mask covers at least
/// `sigma_cluster` of it. Competing instances go by larger overlap, exact ties
/// to the lower index; unclaimed clusters are background.
pub fn assign_clusters(
    ca_masks: &[BinaryMask],
    clusters: &ClusterState,
    sigma_cluster: f64,
) -> Result<Vec<BinaryMask>> {
    let Some(first) = ca_masks.first() else {
        return Ok(Vec::new());
    };
    let (h, w) = (first.height(), first.width());
    if clusters.assignments.len() != h * w {
        return Err(Error::Shape(format!(
            "{} cluster labels for a {h}x{w} grid",
            clusters.assignments.len()
        )));
    }
    let mut sizes = vec![0usize; clusters.k];
    let mut overlap = vec![vec![0usize; ca_masks.len()]; clusters.k];
    for (p, &j) in clusters.assignments.iter().enumerate() {
        sizes[j] += 1;
        for (i, m) in ca_masks.iter().enumerate() {
            if m.height() != h || m.width() != w {
                return Err(Error::Shape("coarse masks must share a grid".into()));
            }
            overlap[j][i] += usize::from(m.bits()[p]);
        }
    }
    let owner: Vec<Option<usize>> = (0..clusters.k)
        .map(|j| {
            if sizes[j] == 0 {
                return None;
            }
            let mut best: Option<(usize, f64)> = None;
            for (i, &o) in overlap[j].iter().enumerate() {
                let ratio = o as f64 / sizes[j] as f64;
                if ratio >= sigma_cluster && best.is_none_or(|(_, r)| ratio > r) {
                    best = Some((i, ratio));
                }
            }
            best.map(|(i, _)| i)
        })
        .collect();
    (0..ca_masks.len())
        .map(|i| {
            let bits = clusters.assignments.iter().map(|&j| owner[j] == Some(i)).collect();
            BinaryMask::new(h, w, bits)
        })
        .collect()
}
