//! Dense tensors, row-stochastic attention maps and binary masks.
//!
//! Everything here is `f64`. Attention maps are always row-stochastic; the
//! constructors reject anything else so downstream losses can rely on it.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayD, ArrayView2, Axis, IxDyn};

use crate::error::{Error, Result};

/// Row-sum tolerance for [`AttentionMap`].
pub const ROW_SUM_TOL: f64 = 1e-6;

/// Shape-tagged dense array of finite reals, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    data: ArrayD<f64>,
}

impl DenseTensor {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!("extents must be positive, got {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                values.len()
            )));
        }
        check_finite(&values)?;
        let data = ArrayD::from_shape_vec(IxDyn(shape), values).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(Self { data })
    }

    pub fn from_array2(a: Array2<f64>) -> Result<Self> {
        check_finite(a.iter())?;
        if a.is_empty() {
            return Err(Error::Shape("empty matrix".into()));
        }
        Ok(Self { data: a.into_dyn() })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, vec![0.0; shape.iter().product()])
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn ndim(&self) -> usize {
        self.data.ndim()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Values in row-major order.
    pub fn values(&self) -> Vec<f64> {
        self.data.iter().copied().collect()
    }

    pub fn as_array(&self) -> &ArrayD<f64> {
        &self.data
    }

    /// View a 2-D tensor as a matrix.
    pub fn as_matrix(&self) -> Result<ArrayView2<'_, f64>> {
        self.data
            .view()
            .into_dimensionality()
            .map_err(|_| Error::Shape(format!("expected a 2-D tensor, got shape {:?}", self.shape())))
    }

    /// Collapse all leading axes, keeping the last: `[h, w, c]` becomes `[h*w, c]`.
    pub fn to_rows(&self) -> Array2<f64> {
        let cols = *self.shape().last().expect("nonempty shape");
        let rows = self.len() / cols;
        Array2::from_shape_vec((rows, cols), self.values()).expect("consistent shape")
    }
}

fn check_finite<'a>(values: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    for (i, v) in values.into_iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::InvalidValue(format!("non-finite value {v} at flat index {i}")));
        }
    }
    Ok(())
}

/// Row-stochastic attention weights, `rows` sources by `cols` targets.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    weights: Array2<f64>,
}

impl AttentionMap {
    pub fn new(weights: Array2<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Shape("attention map must be nonempty".into()));
        }
        for (r, row) in weights.axis_iter(Axis(0)).enumerate() {
            let mut sum = 0.0;
            for &w in row {
                if !w.is_finite() || !(-1e-12..=1.0 + 1e-12).contains(&w) {
                    return Err(Error::InvalidValue(format!(
                        "attention weight {w} in row {r} outside [0,1]"
                    )));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidValue(format!("attention row {r} sums to {sum}")));
            }
        }
        Ok(Self { weights })
    }

    /// Skips validation; lets tests probe losses off the simplex.
    #[cfg(test)]
    pub(crate) fn new_unchecked(weights: Array2<f64>) -> Self {
        Self { weights }
    }

    pub fn rows(&self) -> usize {
        self.weights.nrows()
    }

    pub fn cols(&self) -> usize {
        self.weights.ncols()
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.weights[[row, col]]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        self.weights.column(col).to_vec()
    }

    pub fn into_weights(self) -> Array2<f64> {
        self.weights
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &DenseTensor) -> Result<AttentionMap> {
    let m = logits.as_matrix()?;
    AttentionMap::new(softmax_rows_array(m))
}

/// `softmax(Q Kᵀ / √d)` for `Q: S×d`, `K: T×d`.
pub fn scaled_dot_attention(q: &DenseTensor, k: &DenseTensor) -> Result<AttentionMap> {
    let q = q.as_matrix()?;
    let k = k.as_matrix()?;
    if q.ncols() != k.ncols() {
        return Err(Error::Shape(format!(
            "query dim {} does not match key dim {}",
            q.ncols(),
            k.ncols()
        )));
    }
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let logits = q.dot(&k.t()) * scale;
    AttentionMap::new(softmax_rows_array(logits.view()))
}

pub(crate) fn softmax_rows_array(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Binary mask on an `height × width` grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape("mask grid must be nonempty".into()));
        }
        if bits.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}x{width} needs {} cells, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(Self { height, width, bits })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![false; height * width])
    }

    pub fn ones(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![true; height * width])
    }

    /// Build from a predicate on `(row, col)`.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let bits = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self::new(height, width, bits)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Cells as 0.0 / 1.0 in row-major order.
    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn union(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a | b)
    }

    pub fn intersection(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a & b)
    }

    fn zip_with(&self, other: &Self, f: impl Fn(bool, bool) -> bool) -> Result<Self> {
        self.check_same_grid(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect();
        Self::new(self.height, self.width, bits)
    }

    fn check_same_grid(&self, other: &Self) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::Shape(format!(
                "mask grids differ: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    /// Intersection over union; two empty masks have IoU 1.
    pub fn iou(&self, other: &Self) -> Result<f64> {
        self.check_same_grid(other)?;
        let (mut inter, mut uni) = (0usize, 0usize);
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += usize::from(a && b);
            uni += usize::from(a || b);
        }
        Ok(if uni == 0 { 1.0 } else { inter as f64 / uni as f64 })
    }

    /// Nearest-neighbour upsampling by integer factors.
    pub fn upsample(&self, target_h: usize, target_w: usize) -> Result<Self> {
        if !target_h.is_multiple_of(self.height) || !target_w.is_multiple_of(self.width) {
            return Err(Error::Resample(format!(
                "{}x{} does not divide {target_h}x{target_w}",
                self.height, self.width
            )));
        }
        let (fh, fw) = (target_h / self.height, target_w / self.width);
        Self::from_fn(target_h, target_w, |r, c| self.get(r / fh, c / fw))
    }

    /// Resample to any grid that divides or is divided by this one.
    pub fn resample(&self, target_h: usize, target_w: usize) -> Result<Self> {
        if target_h <= self.height && target_w <= self.width {
            downsample_mask(self, target_h, target_w)
        } else {
            self.upsample(target_h, target_w)
        }
    }
}

impl fmt::Display for BinaryMask {
    /// Text format: `"H W"` then `H` lines of `W` space-separated digits.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} {}", self.height, self.width)?;
        for r in 0..self.height {
            let line: Vec<&str> = (0..self.width)
                .map(|c| if self.get(r, c) { "1" } else { "0" })
                .collect();
            writeln!(f, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

impl FromStr for BinaryMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut lines = s.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (hl, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "missing \"H W\" header".into(),
        })?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                line: hl + 1,
                message: format!("bad header: {e}"),
            })?;
        let [h, w] = dims[..] else {
            return Err(Error::Parse {
                line: hl + 1,
                message: format!("header needs exactly two extents, got {}", dims.len()),
            });
        };
        let mut bits = Vec::with_capacity(h * w);
        let mut rows = 0;
        for (ln, line) in lines {
            rows += 1;
            if rows > h {
                return Err(Error::Parse {
                    line: ln + 1,
                    message: format!("more than {h} rows"),
                });
            }
            let before = bits.len();
            for tok in line.split_whitespace() {
                match tok {
                    "0" => bits.push(false),
                    "1" => bits.push(true),
                    other => {
                        return Err(Error::Parse {
                            line: ln + 1,
                            message: format!("expected 0 or 1, got {other:?}"),
                        })
                    }
                }
            }
            if bits.len() - before != w {
                return Err(Error::Parse {
                    line: ln + 1,
                    message: format!("expected {w} cells, got {}", bits.len() - before),
                });
            }
        }
        if rows != h {
            return Err(Error::Parse {
                line: hl + 1 + rows,
                message: format!("expected {h} rows, got {rows}"),
            });
        }
        BinaryMask::new(h, w, bits)
    }
}

/// Block-mean downsampling: an output cell is set when at least half of its
/// source block is set.
pub fn downsample_mask(mask: &BinaryMask, target_h: usize, target_w: usize) -> Result<BinaryMask> {
    if target_h == 0 || target_w == 0 || !mask.height.is_multiple_of(target_h) || !mask.width.is_multiple_of(target_w) {
        return Err(Error::Resample(format!(
            "{target_h}x{target_w} does not divide {}x{}",
            mask.height, mask.width
        )));
    }
    let (fh, fw) = (mask.height / target_h, mask.width / target_w);
    let block = (fh * fw) as f64;
    BinaryMask::from_fn(target_h, target_w, |r, c| {
        let mut on = 0usize;
        for dr in 0..fh {
            for dc in 0..fw {
                on += usize::from(mask.get(r * fh + dr, c * fw + dc));
            }
        }
        on as f64 / block >= 0.5
    })
}

/// Linear map between a base pixel grid and a layer grid.
///
/// `Pool(f)` averages `f×f` blocks on the way in and broadcasts on the way
/// out; `Up(f)` does the reverse. The `*_t` methods are exact transposes and
/// are what backpropagation uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum GridResampler {
    Identity,
    Pool(usize),
    Up(usize),
}

impl GridResampler {
    pub(crate) fn between(base_h: usize, base_w: usize, layer_h: usize, layer_w: usize) -> Result<Self> {
        let err = || {
            Error::Resample(format!(
                "layer grid {layer_h}x{layer_w} incompatible with latent grid {base_h}x{base_w}"
            ))
        };
        if base_h == layer_h && base_w == layer_w {
            Ok(Self::Identity)
        } else if base_h.is_multiple_of(layer_h) && base_w.is_multiple_of(layer_w) {
            let f = base_h / layer_h;
            if base_w / layer_w != f {
                return Err(err());
            }
            Ok(Self::Pool(f))
        } else if layer_h.is_multiple_of(base_h) && layer_w.is_multiple_of(base_w) {
            let f = layer_h / base_h;
            if layer_w / base_w != f {
                return Err(err());
            }
            Ok(Self::Up(f))
        } else {
            Err(err())
        }
    }

    /// Base grid rows -> layer grid rows.
    pub(crate) fn to_layer(self, x: &Array2<f64>, base_h: usize, base_w: usize) -> Array2<f64> {
        match self {
            Self::Identity => x.clone(),
            Self::Pool(f) => block_sum(x, base_h, base_w, f) / (f * f) as f64,
            Self::Up(f) => nearest_up(x, base_h, base_w, f),
        }
    }

    /// Transpose of [`Self::to_layer`].
    pub(crate) fn to_layer_t(self, g: &Array2<f64>, base_h: usize, base_w: usize) -> Array2<f64> {
        match self {
            Self::Identity => g.clone(),
            Self::Pool(f) => nearest_up(g, base_h / f, base_w / f, f) / (f * f) as f64,
            Self::Up(f) => block_sum(g, base_h * f, base_w * f, f),
        }
    }

    /// Layer grid rows -> base grid rows.
    pub(crate) fn to_base(self, y: &Array2<f64>, base_h: usize, base_w: usize) -> Array2<f64> {
        match self {
            Self::Identity => y.clone(),
            Self::Pool(f) => nearest_up(y, base_h / f, base_w / f, f),
            Self::Up(f) => block_sum(y, base_h * f, base_w * f, f) / (f * f) as f64,
        }
    }

    /// Transpose of [`Self::to_base`].
    pub(crate) fn to_base_t(self, g: &Array2<f64>, base_h: usize, base_w: usize) -> Array2<f64> {
        match self {
            Self::Identity => g.clone(),
            Self::Pool(f) => block_sum(g, base_h, base_w, f),
            Self::Up(f) => nearest_up(g, base_h, base_w, f) / (f * f) as f64,
        }
    }
}

/// Sum `f×f` blocks of an `(h*w)×c` row matrix laid out on an `h×w` grid.
fn block_sum(x: &Array2<f64>, h: usize, w: usize, f: usize) -> Array2<f64> {
    let (oh, ow) = (h / f, w / f);
    let mut out = Array2::zeros((oh * ow, x.ncols()));
    for r in 0..h {
        for c in 0..w {
            let dst = (r / f) * ow + c / f;
            let src = r * w + c;
            let mut row = out.row_mut(dst);
            row += &x.row(src);
        }
    }
    out
}

fn nearest_up(x: &Array2<f64>, h: usize, w: usize, f: usize) -> Array2<f64> {
    let (oh, ow) = (h * f, w * f);
    let mut out = Array2::zeros((oh * ow, x.ncols()));
    for r in 0..oh {
        for c in 0..ow {
            out.row_mut(r * ow + c).assign(&x.row((r / f) * w + c / f));
        }
    }
    out
}
