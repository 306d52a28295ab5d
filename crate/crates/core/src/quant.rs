//! Uniform integer quantization: grids, calibration, round-to-nearest and the
//! packed on-disk layout.
//!
//! A weight matrix is `N×M` (rows index inputs, columns outputs). Groups run
//! along rows: per-channel means one group per row, per-group(G) splits each
//! row into `ceil(M/G)` groups with a shorter tail group when `G ∤ M`.

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Symmetric,
    Asymmetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    PerChannel,
    PerGroup(usize),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    #[default]
    Minmax,
    MseGrid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: u8,
    pub scheme: Scheme,
    pub granularity: Granularity,
}

impl QuantConfig {
    pub fn new(bits: u8, scheme: Scheme, granularity: Granularity) -> Result<Self> {
        let cfg = Self { bits, scheme, granularity };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn symmetric(bits: u8, granularity: Granularity) -> Result<Self> {
        Self::new(bits, Scheme::Symmetric, granularity)
    }

    pub fn asymmetric(bits: u8, granularity: Granularity) -> Result<Self> {
        Self::new(bits, Scheme::Asymmetric, granularity)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=8).contains(&self.bits) {
            return Err(Error::Config(format!("bit width {} outside [1, 8]", self.bits)));
        }
        if self.scheme == Scheme::Symmetric && self.bits < 2 {
            return Err(Error::Config(
                "symmetric 1-bit grid has the empty signed range [0, 0]".into(),
            ));
        }
        if let Granularity::PerGroup(0) = self.granularity {
            return Err(Error::Config("group size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn code_range(&self) -> (i32, i32) {
        code_range(self.bits, self.scheme)
    }

    pub fn groups_per_row(&self, cols: usize) -> usize {
        match self.granularity {
            Granularity::PerTensor => 0,
            Granularity::PerChannel => 1,
            Granularity::PerGroup(g) => cols.div_ceil(g),
        }
    }

    pub fn num_groups(&self, rows: usize, cols: usize) -> usize {
        match self.granularity {
            Granularity::PerTensor => 1,
            _ => rows * self.groups_per_row(cols),
        }
    }

    /// Column ranges of the groups inside one row.
    pub fn row_segments(&self, cols: usize) -> Vec<(usize, usize)> {
        match self.granularity {
            Granularity::PerTensor | Granularity::PerChannel => vec![(0, cols)],
            Granularity::PerGroup(g) => (0..cols).step_by(g).map(|s| (s, (s + g).min(cols))).collect(),
        }
    }

    #[inline]
    pub fn group_index(&self, i: usize, j: usize, cols: usize) -> usize {
        match self.granularity {
            Granularity::PerTensor => 0,
            Granularity::PerChannel => i,
            Granularity::PerGroup(g) => i * cols.div_ceil(g) + j / g,
        }
    }
}

pub fn code_range(bits: u8, scheme: Scheme) -> (i32, i32) {
    match scheme {
        Scheme::Asymmetric => (0, (1i32 << bits) - 1),
        Scheme::Symmetric => {
            let q = (1i32 << (bits - 1)) - 1;
            (-q, q)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantGrid {
    pub scale: f32,
    pub zero_point: i32,
    pub q_min: i32,
    pub q_max: i32,
}

impl QuantGrid {
    pub fn new(scale: f32, zero_point: i32, q_min: i32, q_max: i32) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!("grid scale {scale} must be positive and finite")));
        }
        if q_min >= q_max {
            return Err(Error::invalid(format!("empty code range [{q_min}, {q_max}]")));
        }
        if !(q_min..=q_max).contains(&zero_point) {
            return Err(Error::invalid(format!(
                "zero point {zero_point} outside [{q_min}, {q_max}]"
            )));
        }
        Ok(Self { scale, zero_point, q_min, q_max })
    }

    #[inline]
    pub fn code(&self, w: f32) -> i32 {
        ((w / self.scale).round() as i32 + self.zero_point).clamp(self.q_min, self.q_max)
    }

    #[inline]
    pub fn decode(&self, code: i32) -> f32 {
        self.scale * (code - self.zero_point) as f32
    }

    /// Smallest and largest representable values.
    pub fn range(&self) -> (f32, f32) {
        (self.decode(self.q_min), self.decode(self.q_max))
    }
}

/// Round-to-nearest with clipping. Ties round away from zero.
#[inline]
pub fn quantize_scalar(w: f32, grid: &QuantGrid) -> (i32, f32) {
    let code = grid.code(w);
    (code, grid.decode(code))
}

fn finite_extremes(values: &[f32]) -> Result<(f32, f32)> {
    if values.is_empty() {
        return Err(Error::invalid("cannot calibrate a grid from an empty value set"));
    }
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in values {
        if !v.is_finite() {
            return Err(Error::invalid("non-finite value in calibration input"));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Ok((lo, hi))
}

fn check_bits(bits: u8, scheme: Scheme) -> Result<()> {
    QuantConfig { bits, scheme, granularity: Granularity::PerTensor }.validate()
}

fn asymmetric_from_extremes(lo: f32, hi: f32, bits: u8) -> QuantGrid {
    let (q_min, q_max) = code_range(bits, Scheme::Asymmetric);
    if hi == lo {
        let zero_point = ((q_min as f32 - lo).round() as i32).clamp(q_min, q_max);
        return QuantGrid { scale: 1.0, zero_point, q_min, q_max };
    }
    let scale = (hi - lo) / (q_max - q_min) as f32;
    asymmetric_with_scale(lo, scale, q_min, q_max)
}

fn asymmetric_with_scale(lo: f32, scale: f32, q_min: i32, q_max: i32) -> QuantGrid {
    let zero_point = ((q_min as f32 - lo / scale).round() as i32).clamp(q_min, q_max);
    QuantGrid { scale, zero_point, q_min, q_max }
}

fn symmetric_from_absmax(absmax: f32, bits: u8) -> QuantGrid {
    let (q_min, q_max) = code_range(bits, Scheme::Symmetric);
    let scale = if absmax == 0.0 { 1.0 } else { absmax / q_max as f32 };
    QuantGrid { scale, zero_point: 0, q_min, q_max }
}

/// Min-max asymmetric grid: `s = (max−min)/(q_max−q_min)`,
/// `z = clamp(round(q_min − min/s))`. A constant input gets `s = 1`.
pub fn calibrate_asymmetric(values: &[f32], bits: u8) -> Result<QuantGrid> {
    check_bits(bits, Scheme::Asymmetric)?;
    let (lo, hi) = finite_extremes(values)?;
    Ok(asymmetric_from_extremes(lo, hi, bits))
}

/// Symmetric grid `s = max|w|/(2^{b−1}−1)`, `z = 0`. All-zero input gets `s = 1`.
pub fn calibrate_symmetric(values: &[f32], bits: u8) -> Result<QuantGrid> {
    check_bits(bits, Scheme::Symmetric)?;
    let (lo, hi) = finite_extremes(values)?;
    Ok(symmetric_from_absmax(lo.abs().max(hi.abs()), bits))
}

pub const MSE_GRID_CANDIDATES: usize = 100;

/// Multiplier of the `k`-th candidate scale, spanning `[0.3, 1.0]`.
pub fn mse_grid_multiplier(k: usize) -> f32 {
    0.3 + 0.7 * k as f32 / (MSE_GRID_CANDIDATES - 1) as f32
}

/// Rounds a scale to the nearest half-precision value at or above it, kept
/// inside the positive normal range so every stored grid round-trips exactly.
pub fn storage_scale(s: f32) -> f32 {
    let lo = f16::MIN_POSITIVE.to_f32();
    let hi = f16::MAX.to_f32();
    let s = s.clamp(lo, hi);
    let h = f16::from_f32(s);
    if h.to_f32() >= s {
        h.to_f32()
    } else {
        f16::from_bits(h.to_bits() + 1).to_f32()
    }
}

fn storage_grid(grid: QuantGrid, lo: f32, scheme: Scheme) -> QuantGrid {
    let scale = storage_scale(grid.scale);
    if scale == grid.scale {
        return grid;
    }
    match scheme {
        Scheme::Symmetric => QuantGrid { scale, ..grid },
        Scheme::Asymmetric => asymmetric_with_scale(lo, scale, grid.q_min, grid.q_max),
    }
}

fn sq_error(values: &[f32], grid: &QuantGrid) -> f64 {
    values
        .iter()
        .map(|&w| {
            let d = (w - quantize_scalar(w, grid).1) as f64;
            d * d
        })
        .sum()
}

/// Calibrates the grid of one group in storage form.
pub fn fit_grid(values: &[f32], bits: u8, scheme: Scheme, mode: ScaleMode) -> Result<QuantGrid> {
    check_bits(bits, scheme)?;
    let (lo, hi) = finite_extremes(values)?;
    let base = match scheme {
        Scheme::Asymmetric => asymmetric_from_extremes(lo, hi, bits),
        Scheme::Symmetric => symmetric_from_absmax(lo.abs().max(hi.abs()), bits),
    };
    let degenerate = match scheme {
        Scheme::Asymmetric => hi == lo,
        Scheme::Symmetric => lo == 0.0 && hi == 0.0,
    };
    let minmax = storage_grid(base, lo, scheme);
    if mode == ScaleMode::Minmax || degenerate {
        return Ok(minmax);
    }
    let mut best = minmax;
    let mut best_err = f64::INFINITY;
    for k in 0..MSE_GRID_CANDIDATES {
        let p = mse_grid_multiplier(k);
        let cand = match scheme {
            Scheme::Asymmetric => asymmetric_from_extremes(p * lo, p * hi, bits),
            Scheme::Symmetric => symmetric_from_absmax(p * lo.abs().max(hi.abs()), bits),
        };
        let cand = storage_grid(cand, p * lo, scheme);
        let err = sq_error(values, &cand);
        if err < best_err {
            best_err = err;
            best = cand;
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedMatrix {
    rows: usize,
    cols: usize,
    config: QuantConfig,
    codes: Vec<i32>,
    grids: Vec<QuantGrid>,
}

impl QuantizedMatrix {
    /// Assembles a quantized matrix, checking every invariant.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        config: QuantConfig,
        codes: Vec<i32>,
        grids: Vec<QuantGrid>,
    ) -> Result<Self> {
        config.validate()?;
        if codes.len() != rows * cols {
            return Err(Error::shape(format!("{} codes for a {rows}x{cols} matrix", codes.len())));
        }
        let groups = config.num_groups(rows, cols);
        if grids.len() != groups {
            return Err(Error::shape(format!("{} grids supplied, {groups} groups expected", grids.len())));
        }
        let (q_min, q_max) = config.code_range();
        for g in &grids {
            if g.q_min != q_min || g.q_max != q_max {
                return Err(Error::invalid("grid code range disagrees with the config"));
            }
            if !(g.scale > 0.0 && g.scale.is_finite()) {
                return Err(Error::invalid("grid scale must be positive and finite"));
            }
            if config.scheme == Scheme::Symmetric && g.zero_point != 0 {
                return Err(Error::invalid("symmetric grid with a nonzero zero point"));
            }
            if !(q_min..=q_max).contains(&g.zero_point) {
                return Err(Error::invalid("zero point outside the code range"));
            }
        }
        if let Some(c) = codes.iter().find(|c| !(q_min..=q_max).contains(*c)) {
            return Err(Error::invalid(format!("code {c} outside [{q_min}, {q_max}]")));
        }
        Ok(Self { rows, cols, config, codes, grids })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn config(&self) -> &QuantConfig {
        &self.config
    }

    pub fn codes(&self) -> &[i32] {
        &self.codes
    }

    pub fn grids(&self) -> &[QuantGrid] {
        &self.grids
    }

    #[inline]
    pub fn code(&self, i: usize, j: usize) -> i32 {
        self.codes[i * self.cols + j]
    }

    #[inline]
    pub fn grid_of(&self, i: usize, j: usize) -> &QuantGrid {
        &self.grids[self.config.group_index(i, j, self.cols)]
    }

    pub(crate) fn codes_mut(&mut self) -> &mut [i32] {
        &mut self.codes
    }

    pub(crate) fn grids_mut(&mut self) -> &mut [QuantGrid] {
        &mut self.grids
    }

    pub fn dequantize(&self) -> Matrix {
        dequantize(self)
    }
}

fn validate_shape(w: &Matrix) -> Result<()> {
    if w.is_empty() {
        return Err(Error::shape("cannot quantize an empty matrix"));
    }
    Ok(())
}

/// Calibrates one grid per group (in storage form) for `w`.
pub fn fit_grids(w: &Matrix, cfg: &QuantConfig, mode: ScaleMode) -> Result<Vec<QuantGrid>> {
    cfg.validate()?;
    validate_shape(w)?;
    if cfg.granularity == Granularity::PerTensor {
        return Ok(vec![fit_grid(w.data(), cfg.bits, cfg.scheme, mode)?]);
    }
    let mut grids = Vec::with_capacity(cfg.num_groups(w.rows(), w.cols()));
    for i in 0..w.rows() {
        grids.extend(fit_row_grids(w.row(i), cfg, mode)?);
    }
    Ok(grids)
}

/// Grids for the groups of a single row (not for per-tensor configs).
pub fn fit_row_grids(row: &[f32], cfg: &QuantConfig, mode: ScaleMode) -> Result<Vec<QuantGrid>> {
    cfg.row_segments(row.len())
        .into_iter()
        .map(|(s, e)| fit_grid(&row[s..e], cfg.bits, cfg.scheme, mode))
        .collect()
}

/// Nearest-level assignment against fixed grids.
pub fn quantize_with_grids(w: &Matrix, cfg: &QuantConfig, grids: Vec<QuantGrid>) -> Result<QuantizedMatrix> {
    let (rows, cols) = w.shape();
    let mut codes = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for (j, &v) in w.row(i).iter().enumerate() {
            let g = grids
                .get(cfg.group_index(i, j, cols))
                .ok_or_else(|| Error::shape("too few grids for the matrix"))?;
            codes.push(g.code(v));
        }
    }
    QuantizedMatrix::from_parts(rows, cols, *cfg, codes, grids)
}

/// Round-to-nearest quantization with min-max or MSE-searched grids.
pub fn quantize_matrix(w: &Matrix, cfg: &QuantConfig, mode: ScaleMode) -> Result<QuantizedMatrix> {
    let grids = fit_grids(w, cfg, mode)?;
    quantize_with_grids(w, cfg, grids)
}

pub fn dequantize(q: &QuantizedMatrix) -> Matrix {
    Matrix::from_fn(q.rows, q.cols, |i, j| q.grid_of(i, j).decode(q.code(i, j)))
}

pub fn code_bytes(rows: usize, cols: usize, bits: u8) -> usize {
    (rows * cols * bits as usize).div_ceil(8)
}

/// Payload bytes: packed codes, a 16-bit scale per group and, for the
/// asymmetric scheme, an 8-bit zero point per group.
pub fn storage_bytes(q: &QuantizedMatrix) -> usize {
    let per_group = match q.config.scheme {
        Scheme::Symmetric => 2,
        Scheme::Asymmetric => 3,
    };
    code_bytes(q.rows, q.cols, q.config.bits) + q.grids.len() * per_group
}

struct BitWriter {
    bytes: Vec<u8>,
    bit: usize,
}

impl BitWriter {
    fn with_capacity(n: usize) -> Self {
        Self { bytes: Vec::with_capacity(n), bit: 0 }
    }

    fn push(&mut self, value: u32, width: u8) {
        for k in 0..width {
            if self.bit.is_multiple_of(8) {
                self.bytes.push(0);
            }
            if (value >> k) & 1 == 1 {
                *self.bytes.last_mut().unwrap() |= 1 << (self.bit % 8);
            }
            self.bit += 1;
        }
    }
}

pub(crate) fn read_bits(bytes: &[u8], bit: usize, width: u8) -> u32 {
    let mut v = 0u32;
    for k in 0..width as usize {
        let b = bit + k;
        if (bytes[b / 8] >> (b % 8)) & 1 == 1 {
            v |= 1 << k;
        }
    }
    v
}

/// Packs `bits`-wide unsigned values LSB-first.
pub(crate) fn pack_bits(values: impl IntoIterator<Item = u32>, bits: u8, expected: usize) -> Vec<u8> {
    let mut w = BitWriter::with_capacity((expected * bits as usize).div_ceil(8));
    for v in values {
        w.push(v, bits);
    }
    w.bytes
}

pub fn encode_payload(q: &QuantizedMatrix) -> Vec<u8> {
    let bits = q.config.bits;
    let offset = match q.config.scheme {
        Scheme::Symmetric => 1i32 << (bits - 1),
        Scheme::Asymmetric => 0,
    };
    let mut out = pack_bits(q.codes.iter().map(|&c| (c + offset) as u32), bits, q.codes.len());
    for g in &q.grids {
        out.extend_from_slice(&f16::from_f32(g.scale).to_le_bytes());
    }
    if q.config.scheme == Scheme::Asymmetric {
        out.extend(q.grids.iter().map(|g| g.zero_point as u8));
    }
    out
}

pub fn decode_payload(bytes: &[u8], rows: usize, cols: usize, config: QuantConfig) -> Result<QuantizedMatrix> {
    config.validate()?;
    let groups = config.num_groups(rows, cols);
    let code_len = code_bytes(rows, cols, config.bits);
    let per_group = if config.scheme == Scheme::Symmetric { 2 } else { 3 };
    let expected = code_len + groups * per_group;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "uniform payload is {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let bits = config.bits;
    let offset = if config.scheme == Scheme::Symmetric { 1i32 << (bits - 1) } else { 0 };
    let codes = (0..rows * cols)
        .map(|k| read_bits(bytes, k * bits as usize, bits) as i32 - offset)
        .collect();
    let (q_min, q_max) = config.code_range();
    let mut grids = Vec::with_capacity(groups);
    for g in 0..groups {
        let p = code_len + 2 * g;
        let scale = f16::from_le_bytes([bytes[p], bytes[p + 1]]).to_f32();
        let zero_point = match config.scheme {
            Scheme::Symmetric => 0,
            Scheme::Asymmetric => bytes[code_len + 2 * groups + g] as i32,
        };
        grids.push(QuantGrid { scale, zero_point, q_min, q_max });
    }
    QuantizedMatrix::from_parts(rows, cols, config, codes, grids).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(s: f32, z: i32, lo: i32, hi: i32) -> QuantGrid {
        QuantGrid::new(s, z, lo, hi).unwrap()
    }

    #[test]
    fn scalar_rounding_and_clipping() {
        assert_eq!(quantize_scalar(1.4, &grid(1.0, 0, 0, 3)), (1, 1.0));
        assert_eq!(quantize_scalar(5.0, &grid(1.0, 0, 0, 3)), (3, 3.0));
        let (c, w) = quantize_scalar(-0.3, &grid(2.0 / 7.0, 0, -7, 7));
        assert_eq!(c, -1);
        assert!((w + 2.0 / 7.0).abs() < 1e-7);
    }

    #[test]
    fn asymmetric_calibration() {
        let g = calibrate_asymmetric(&[-1.0, 0.5, 3.0], 2).unwrap();
        assert!((g.scale - 4.0 / 3.0).abs() < 1e-6);
        assert_eq!(g.zero_point, 1);

        let g = calibrate_asymmetric(&[0.0; 5], 2).unwrap();
        assert_eq!((g.scale, g.zero_point), (1.0, 0));
        assert_eq!(quantize_scalar(0.0, &g).1, 0.0);

        let vals = [0.0, 1.0, 2.0, 3.0];
        let g = calibrate_asymmetric(&vals, 2).unwrap();
        assert_eq!((g.scale, g.zero_point), (1.0, 0));
        for v in vals {
            assert_eq!(quantize_scalar(v, &g).1, v);
        }
        assert!(calibrate_asymmetric(&[], 2).is_err());
    }

    #[test]
    fn symmetric_calibration() {
        let g = calibrate_symmetric(&[-2.0, 0.3, 1.0], 4).unwrap();
        assert!((g.scale - 2.0 / 7.0).abs() < 1e-7);
        assert_eq!(g.zero_point, 0);
        assert_eq!(calibrate_symmetric(&[0.0, 0.0], 4).unwrap().scale, 1.0);
        let g = calibrate_symmetric(&[-7.0, 7.0], 4).unwrap();
        assert_eq!(g.scale, 1.0);
        assert_eq!(quantize_scalar(-7.0, &g).1, -7.0);
        assert_eq!(quantize_scalar(7.0, &g).1, 7.0);
        assert!(calibrate_symmetric(&[1.0], 1).is_err());
    }

    #[test]
    fn groups_beat_single_channel_on_mixed_row() {
        let w = Matrix::from_vec(1, 4, vec![0.1, 0.2, 10.0, 20.0]).unwrap();
        let grouped = QuantConfig::symmetric(4, Granularity::PerGroup(2)).unwrap();
        let channel = QuantConfig::symmetric(4, Granularity::PerChannel).unwrap();
        let qg = quantize_matrix(&w, &grouped, ScaleMode::Minmax).unwrap();
        let qc = quantize_matrix(&w, &channel, ScaleMode::Minmax).unwrap();
        assert_eq!(qg.grids().len(), 2);
        assert!((qg.grids()[0].scale - 0.2 / 7.0).abs() < 1e-4);
        assert!((qg.grids()[1].scale - 20.0 / 7.0).abs() < 1e-2);
        let eg = dequantize(&qg).sub(&w).unwrap().frobenius_sq();
        let ec = dequantize(&qc).sub(&w).unwrap().frobenius_sq();
        assert!(eg < ec, "{eg} vs {ec}");
    }

    #[test]
    fn grid_exact_matrix_round_trips() {
        let w = Matrix::from_fn(5, 6, |i, j| ((i * 6 + j) % 15) as f32 - 7.0);
        let cfg = QuantConfig::symmetric(4, Granularity::PerTensor).unwrap();
        let q = quantize_matrix(&w, &cfg, ScaleMode::Minmax).unwrap();
        assert_eq!(dequantize(&q), w);
    }

    #[test]
    fn mse_grid_never_worse_with_outlier() {
        let mut row: Vec<f32> = (0..32).map(|k| ((k as f32) * 0.37).sin() * 0.1).collect();
        row[7] = 3.0;
        let w = Matrix::from_vec(1, 32, row).unwrap();
        let cfg = QuantConfig::symmetric(3, Granularity::PerChannel).unwrap();
        let mm = quantize_matrix(&w, &cfg, ScaleMode::Minmax).unwrap();
        let ms = quantize_matrix(&w, &cfg, ScaleMode::MseGrid).unwrap();
        assert!(ms.grids()[0].scale <= mm.grids()[0].scale);
        let e_mm = dequantize(&mm).sub(&w).unwrap().frobenius_sq();
        let e_ms = dequantize(&ms).sub(&w).unwrap().frobenius_sq();
        assert!(e_ms <= e_mm);
        // Independent scan over the same candidate multipliers.
        let base = mm.grids()[0].scale / 1.0;
        let best = (0..MSE_GRID_CANDIDATES)
            .map(|k| {
                let s = storage_scale(base * mse_grid_multiplier(k));
                w.data()
                    .iter()
                    .map(|&x| {
                        let c = ((x / s).round() as i32).clamp(-3, 3);
                        ((x - s * c as f32) as f64).powi(2)
                    })
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min);
        assert!((e_ms - best).abs() <= 1e-9 * best.max(1.0));
    }

    #[test]
    fn storage_examples() {
        let w = Matrix::from_fn(128, 128, |i, j| ((i * 31 + j * 17) % 23) as f32 - 11.0);
        let cfg = QuantConfig::symmetric(4, Granularity::PerGroup(128)).unwrap();
        let q = quantize_matrix(&w, &cfg, ScaleMode::Minmax).unwrap();
        assert_eq!(storage_bytes(&q), 8448);
        assert_eq!(encode_payload(&q).len(), 8448);

        let w4 = Matrix::from_fn(4, 4, |i, j| (i as f32) - (j as f32));
        let cfg = QuantConfig::symmetric(8, Granularity::PerTensor).unwrap();
        assert_eq!(storage_bytes(&quantize_matrix(&w4, &cfg, ScaleMode::Minmax).unwrap()), 18);

        let a = QuantConfig::symmetric(4, Granularity::PerGroup(64)).unwrap();
        let b = QuantConfig::symmetric(4, Granularity::PerGroup(32)).unwrap();
        let qa = quantize_matrix(&w, &a, ScaleMode::Minmax).unwrap();
        let qb = quantize_matrix(&w, &b, ScaleMode::Minmax).unwrap();
        assert_eq!(storage_bytes(&qb) - 8192, 2 * (storage_bytes(&qa) - 8192));
    }

    #[test]
    fn payload_round_trip_asymmetric_tail_group() {
        let w = Matrix::from_fn(3, 7, |i, j| (i as f32 * 0.7 - j as f32 * 0.3).sin());
        let cfg = QuantConfig::asymmetric(3, Granularity::PerGroup(3)).unwrap();
        let q = quantize_matrix(&w, &cfg, ScaleMode::MseGrid).unwrap();
        assert_eq!(q.grids().len(), 9);
        let bytes = encode_payload(&q);
        assert_eq!(bytes.len(), storage_bytes(&q));
        let back = decode_payload(&bytes, 3, 7, cfg).unwrap();
        assert_eq!(back, q);
        assert!(decode_payload(&bytes[1..], 3, 7, cfg).is_err());
    }

    #[test]
    fn storage_scale_is_half_exact_and_not_smaller() {
        for s in [1e-9f32, 2.0 / 7.0, 0.1, 1.0, 4.0 / 3.0, 1e6] {
            let t = storage_scale(s);
            assert_eq!(f16::from_f32(t).to_f32(), t);
            assert!(t >= s.min(65504.0));
        }
    }
}
