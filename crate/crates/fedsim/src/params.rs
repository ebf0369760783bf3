//! Dense tensors, named parameter sets, and the arithmetic kernels shared by
//! the aggregation strategies and the privacy pipeline.
//!
//! A [`ParameterSet`] is an ordered list of uniquely named [`Tensor`]s, one
//! per model layer. All cross-set operations require identical layer names,
//! order, and shapes. Values are finite `f64`; NaN and infinities are
//! rejected at construction and when decoding files.
//!
//! # Binary format
//!
//! [`ParameterSet::write_to`] emits a flat little-endian layout:
//!
//! ```text
//! u32 layer_count
//! per layer: u32 name_len, name bytes (UTF-8), u32 rank, u32 dims[rank]
//! per layer: f64 values[product(dims)]   (same layer order)
//! ```
//!
//! All integers are little-endian `u32`; payloads are little-endian IEEE 754
//! doubles. Round-tripping preserves every bit.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Dense row-major tensor of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that dimensions are positive, the value
    /// count matches the shape product, and every value is finite.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::ShapeMismatch {
                expected: "rank >= 1".into(),
                got: "rank 0".into(),
            });
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                expected: "positive dimensions".into(),
                got: format!("{shape:?}"),
            });
        }
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(Error::ShapeMismatch {
                expected: format!("{expected} values for shape {shape:?}"),
                got: format!("{} values", values.len()),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { name: String::new(), index });
        }
        Ok(Self { shape, values })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape, vec![0.0; len])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// Ordered collection of named layer tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    layers: Vec<(String, Tensor)>,
}

impl ParameterSet {
    /// Builds a set from `(name, tensor)` pairs; names must be unique.
    pub fn new(layers: Vec<(String, Tensor)>) -> Result<Self> {
        for (i, (name, _)) in layers.iter().enumerate() {
            if layers[..i].iter().any(|(other, _)| other == name) {
                return Err(Error::DuplicateLayer(name.clone()));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[(String, Tensor)] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Total coordinate count across all layers.
    pub fn num_coordinates(&self) -> usize {
        self.layers.iter().map(|(_, t)| t.len()).sum()
    }

    /// Set with the same names and shapes, all values zero.
    pub fn zeros_like(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|(name, t)| {
                (name.clone(), Tensor { shape: t.shape.clone(), values: vec![0.0; t.len()] })
            })
            .collect();
        Self { layers }
    }

    /// True when `other` has the same layer names, order, and shapes.
    pub fn same_shape(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|((an, at), (bn, bt))| an == bn && at.shape == bt.shape)
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected: self.describe(),
                got: other.describe(),
            })
        }
    }

    fn describe(&self) -> String {
        let parts: Vec<String> = self
            .layers
            .iter()
            .map(|(name, t)| format!("{name}{:?}", t.shape))
            .collect();
        parts.join(", ")
    }

    /// Coordinate-wise `alpha * self + beta * other`.
    pub fn axpy(&self, other: &Self, alpha: f64, beta: f64) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(self.zip_map_unchecked(other, |a, b| alpha * a + beta * b))
    }

    /// Euclidean norm over the concatenation of all layers.
    pub fn l2_norm(&self) -> f64 {
        let sum: f64 = self
            .layers
            .iter()
            .flat_map(|(_, t)| t.values.iter())
            .map(|v| v * v)
            .sum();
        sum.sqrt()
    }

    /// Mean over layers of the per-layer Frobenius norm of `self - other`.
    ///
    /// This is the inter-model distance the metric-privacy noise schedule is
    /// calibrated against. For single-layer sets it coincides with
    /// [`l2_norm`](Self::l2_norm) of the difference.
    pub fn frobenius_layer_mean_distance(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        if self.layers.is_empty() {
            return Err(Error::EmptyInput("parameter set has no layers"));
        }
        let mut total = 0.0;
        for ((_, a), (_, b)) in self.layers.iter().zip(&other.layers) {
            let sq: f64 = a
                .values
                .iter()
                .zip(&b.values)
                .map(|(x, y)| {
                    let d = x - y;
                    d * d
                })
                .sum();
            total += sq.sqrt();
        }
        Ok(total / self.layers.len() as f64)
    }

    pub(crate) fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|(name, t)| {
                let values = t.values.iter().map(|&v| f(v)).collect();
                (name.clone(), Tensor { shape: t.shape.clone(), values })
            })
            .collect();
        Self { layers }
    }

    pub(crate) fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(self.zip_map_unchecked(other, f))
    }

    fn zip_map_unchecked(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|((name, a), (_, b))| {
                let values = a.values.iter().zip(&b.values).map(|(&x, &y)| f(x, y)).collect();
                (name.clone(), Tensor { shape: a.shape.clone(), values })
            })
            .collect();
        Self { layers }
    }

}

fn check_family(sets: &[&ParameterSet]) -> Result<()> {
    if sets.is_empty() {
        return Err(Error::EmptyInput("no parameter sets"));
    }
    for set in &sets[1..] {
        sets[0].check_same_shape(set)?;
    }
    Ok(())
}

/// Coordinate-wise weighted mean `sum(w_i * set_i) / sum(w_i)`.
///
/// Weights must be non-negative with a positive sum. The mean is accumulated
/// incrementally (`m += (w_i / W_i) * (x_i - m)` with `W_i` the cumulative
/// weight), which keeps a family of identical sets exactly fixed instead of
/// drifting by an ulp the way a sum-then-divide evaluation does.
pub fn weighted_mean(sets: &[&ParameterSet], weights: &[f64]) -> Result<ParameterSet> {
    check_family(sets)?;
    if weights.len() != sets.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} weights", sets.len()),
            got: format!("{}", weights.len()),
        });
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::BadWeights { sum: weights.iter().sum() });
    }

    let mut mean = sets[0].zeros_like();
    let mut cumulative = 0.0;
    for (set, &w) in sets.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        cumulative += w;
        let t = w / cumulative;
        for ((_, m), (_, x)) in mean.layers.iter_mut().zip(&set.layers) {
            for (mv, &xv) in m.values.iter_mut().zip(&x.values) {
                *mv += t * (xv - *mv);
            }
        }
    }
    Ok(mean)
}

/// Coordinate-wise median across sets. An even count takes the mean of the
/// two middle values.
pub fn coordinate_median(sets: &[&ParameterSet]) -> Result<ParameterSet> {
    check_family(sets)?;
    let mut out = sets[0].zeros_like();
    let mut column = vec![0.0; sets.len()];
    for (layer_idx, (_, t)) in out.layers.iter_mut().enumerate() {
        for i in 0..t.values.len() {
            for (k, set) in sets.iter().enumerate() {
                column[k] = set.layers[layer_idx].1.values[i];
            }
            column.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
            let n = column.len();
            t.values[i] = if n % 2 == 1 {
                column[n / 2]
            } else {
                (column[n / 2 - 1] + column[n / 2]) / 2.0
            };
        }
    }
    Ok(out)
}

// --------------------------------------------------------------------------
// Binary serialization
// --------------------------------------------------------------------------

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

impl ParameterSet {
    /// Writes the set in the crate's binary format.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let count = u32::try_from(self.layers.len())
            .map_err(|_| Error::Decode("layer count exceeds u32".into()))?;
        w.write_all(&count.to_le_bytes())?;
        for (name, t) in &self.layers {
            let name_len = u32::try_from(name.len())
                .map_err(|_| Error::Decode(format!("layer name {name:?} exceeds u32 bytes")))?;
            w.write_all(&name_len.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            let rank = u32::try_from(t.shape.len()).expect("rank fits in u32");
            w.write_all(&rank.to_le_bytes())?;
            for &dim in &t.shape {
                let dim = u32::try_from(dim)
                    .map_err(|_| Error::Decode(format!("dimension {dim} exceeds u32")))?;
                w.write_all(&dim.to_le_bytes())?;
            }
        }
        for (_, t) in &self.layers {
            for v in &t.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a set written by [`write_to`](Self::write_to), validating names,
    /// shapes, and value finiteness.
    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let count = read_u32(r)? as usize;
        let mut headers = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf)?;
            let name = String::from_utf8(name_buf)
                .map_err(|e| Error::Decode(format!("layer name is not UTF-8: {e}")))?;
            let rank = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(r)? as usize);
            }
            headers.push((name, shape));
        }
        let mut layers = Vec::with_capacity(count);
        for (name, shape) in headers {
            let len: usize = shape.iter().product();
            let mut values = Vec::with_capacity(len);
            let mut buf = [0u8; 8];
            for _ in 0..len {
                r.read_exact(&mut buf)?;
                values.push(f64::from_le_bytes(buf));
            }
            let tensor = Tensor::new(shape, values).map_err(|e| match e {
                Error::NonFinite { index, .. } => Error::NonFinite { name: name.clone(), index },
                other => other,
            })?;
            layers.push((name, tensor));
        }
        Self::new(layers)
    }

    /// Writes the set to `path`.
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut file)?;
        file.flush()?;
        Ok(())
    }

    /// Reads a set from `path`.
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut file)
    }
}
