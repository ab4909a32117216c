// SPDX-License-Identifier: Apache-2.0

//! Georeferenced BEV feature maps.
//!
//! A map stores `height × width × channels` values row-major (channel fastest).
//! Cell `(0, 0)` is centered on `(origin_x, origin_y)` in world meters; rows
//! advance along +y and columns along +x. Continuous [`FeatureCoord`]s index
//! cell centers, so `(row, col) = (0.0, 0.0)` is exactly that first center.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, TensorFileError};

/// Base of the geometric frequency progression used by the sinusoidal encodings.
pub const SINUSOID_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct BevFeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    georef: Georef,
    data: Vec<f64>,
}

/// World placement of a BEV grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Georef {
    pub cell_size_x: f64,
    pub cell_size_y: f64,
    pub origin_x: f64,
    pub origin_y: f64,
}

impl Georef {
    pub fn unit() -> Self {
        Georef {
            cell_size_x: 1.0,
            cell_size_y: 1.0,
            origin_x: 0.0,
            origin_y: 0.0,
        }
    }

    /// Grid of `height × width` square cells of side `cell_size` centered on the world origin.
    pub fn centered(height: usize, width: usize, cell_size: f64) -> Self {
        Georef {
            cell_size_x: cell_size,
            cell_size_y: cell_size,
            origin_x: -0.5 * (width as f64 - 1.0) * cell_size,
            origin_y: -0.5 * (height as f64 - 1.0) * cell_size,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.cell_size_x.is_finite()
            && self.cell_size_y.is_finite()
            && self.cell_size_x > 0.0
            && self.cell_size_y > 0.0
            && self.origin_x.is_finite()
            && self.origin_y.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidMap(format!("bad georeference {self:?}")))
        }
    }
}

/// Continuous (row, col) position on the cell-center lattice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureCoord {
    pub row: f64,
    pub col: f64,
}

impl FeatureCoord {
    pub fn new(row: f64, col: f64) -> Self {
        FeatureCoord { row, col }
    }
}

/// Partial derivatives of a bilinear sample with respect to (row, col).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleJacobian {
    /// `d_row[c]` is ∂feature[c]/∂row.
    pub d_row: Vec<f64>,
    /// `d_col[c]` is ∂feature[c]/∂col.
    pub d_col: Vec<f64>,
    /// Set when the position lies on an integer row or column line; the
    /// derivative returned there is the one-sided (increasing-coordinate) one.
    pub non_smooth: bool,
}

impl BevFeatureMap {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        georef: Georef,
        data: Vec<f64>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidMap(format!(
                "dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        georef.validate()?;
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::shape("feature map data", expected, data.len()));
        }
        Ok(BevFeatureMap {
            height,
            width,
            channels,
            georef,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize, georef: Georef) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            georef,
            vec![0.0; height * width * channels],
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn georef(&self) -> &Georef {
        &self.georef
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn cell_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let start = (row * self.width + col) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    /// Flat cell index of the cell containing world point `(x, y)`, if inside the map.
    pub fn cell_index_at(&self, x: f64, y: f64) -> Option<usize> {
        let rc = self.world_to_feature(x, y);
        let row = rc.row.round();
        let col = rc.col.round();
        if row < 0.0 || col < 0.0 || row >= self.height as f64 || col >= self.width as f64 {
            return None;
        }
        Some(row as usize * self.width + col as usize)
    }

    /// World coordinates of a continuous feature position.
    pub fn feature_to_world(&self, rc: FeatureCoord) -> (f64, f64) {
        let g = &self.georef;
        (
            g.origin_x + rc.col * g.cell_size_x,
            g.origin_y + rc.row * g.cell_size_y,
        )
    }

    pub fn world_to_feature(&self, x: f64, y: f64) -> FeatureCoord {
        let g = &self.georef;
        FeatureCoord {
            row: (y - g.origin_y) / g.cell_size_y,
            col: (x - g.origin_x) / g.cell_size_x,
        }
    }

    fn cell_in_bounds(&self, row: i64, col: i64) -> Option<&[f64]> {
        if row < 0 || col < 0 || row >= self.height as i64 || col >= self.width as i64 {
            None
        } else {
            Some(self.cell(row as usize, col as usize))
        }
    }

    /// Bilinear interpolation over the four surrounding cell centers.
    /// Cells outside the grid contribute zero.
    pub fn bilinear_sample(&self, rc: FeatureCoord) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.channels];
        self.bilinear_sample_into(rc, &mut out)?;
        Ok(out)
    }

    /// Same as [`bilinear_sample`](Self::bilinear_sample), writing into `out` (length C).
    pub fn bilinear_sample_into(&self, rc: FeatureCoord, out: &mut [f64]) -> Result<()> {
        if !rc.row.is_finite() || !rc.col.is_finite() {
            return Err(Error::NonFiniteSample {
                row: rc.row,
                col: rc.col,
            });
        }
        if out.len() != self.channels {
            return Err(Error::shape("sample output", self.channels, out.len()));
        }
        out.fill(0.0);
        let r0f = rc.row.floor();
        let c0f = rc.col.floor();
        let fr = rc.row - r0f;
        let fc = rc.col - c0f;
        // Far outside the grid every corner is zero; also keeps the i64 casts sane.
        if r0f < -2.0 || c0f < -2.0 || r0f > self.height as f64 || c0f > self.width as f64 {
            return Ok(());
        }
        let (r0, c0) = (r0f as i64, c0f as i64);
        let corners = [
            (r0, c0, (1.0 - fr) * (1.0 - fc)),
            (r0, c0 + 1, (1.0 - fr) * fc),
            (r0 + 1, c0, fr * (1.0 - fc)),
            (r0 + 1, c0 + 1, fr * fc),
        ];
        for (row, col, weight) in corners {
            if let Some(cell) = self.cell_in_bounds(row, col) {
                for (o, v) in out.iter_mut().zip(cell) {
                    *o += weight * v;
                }
            }
        }
        Ok(())
    }

    /// Analytic derivative of [`bilinear_sample`](Self::bilinear_sample) with respect to
    /// the continuous (row, col) position.
    pub fn bilinear_sample_jacobian(&self, rc: FeatureCoord) -> Result<SampleJacobian> {
        if !rc.row.is_finite() || !rc.col.is_finite() {
            return Err(Error::NonFiniteSample {
                row: rc.row,
                col: rc.col,
            });
        }
        let c = self.channels;
        let mut jac = SampleJacobian {
            d_row: vec![0.0; c],
            d_col: vec![0.0; c],
            non_smooth: false,
        };
        let r0f = rc.row.floor();
        let c0f = rc.col.floor();
        let fr = rc.row - r0f;
        let fc = rc.col - c0f;
        jac.non_smooth = fr == 0.0 || fc == 0.0;
        if r0f < -2.0 || c0f < -2.0 || r0f > self.height as f64 || c0f > self.width as f64 {
            return Ok(jac);
        }
        let (r0, c0) = (r0f as i64, c0f as i64);
        // (row, col, ∂w/∂row, ∂w/∂col)
        let corners = [
            (r0, c0, -(1.0 - fc), -(1.0 - fr)),
            (r0, c0 + 1, -fc, 1.0 - fr),
            (r0 + 1, c0, 1.0 - fc, -fr),
            (r0 + 1, c0 + 1, fc, fr),
        ];
        for (row, col, dwr, dwc) in corners {
            if let Some(cell) = self.cell_in_bounds(row, col) {
                for (k, v) in cell.iter().enumerate() {
                    jac.d_row[k] += dwr * v;
                    jac.d_col[k] += dwc * v;
                }
            }
        }
        Ok(jac)
    }

    /// Returns a copy of this map with the fixed sinusoidal position embedding added.
    pub fn with_position_embedding(&self) -> Result<Self> {
        let pe = position_embedding(self.height, self.width, self.channels)?;
        let data = self
            .data
            .iter()
            .zip(pe.data())
            .map(|(a, b)| a + b)
            .collect();
        Self::new(self.height, self.width, self.channels, self.georef, data)
    }
}

/// Writes the standard sine/cosine encoding of a scalar position into `out`.
///
/// Entry `j` uses frequency `base^(-2⌊j/2⌋/d)` with `d = out.len()`; even entries
/// take the sine, odd entries the cosine.
pub fn sinusoid_into(position: f64, out: &mut [f64]) {
    let d = out.len() as f64;
    for (j, slot) in out.iter_mut().enumerate() {
        let pair = (j / 2) as f64;
        let freq = SINUSOID_BASE.powf(-2.0 * pair / d);
        let phase = position * freq;
        *slot = if j % 2 == 0 { phase.sin() } else { phase.cos() };
    }
}

/// Fixed 2D sinusoidal embedding: the first `c/2` channels encode the column
/// index, the last `c/2` the row index.
pub fn position_embedding(h: usize, w: usize, c: usize) -> Result<BevFeatureMap> {
    if c % 2 != 0 || c < 4 {
        return Err(Error::InvalidArgument(format!(
            "position embedding needs an even channel count >= 4, got {c}"
        )));
    }
    let half = c / 2;
    let mut map = BevFeatureMap::zeros(h, w, c, Georef::unit())?;
    let mut col_code = vec![0.0; half];
    let mut row_code = vec![0.0; half];
    for row in 0..h {
        sinusoid_into(row as f64, &mut row_code);
        for col in 0..w {
            sinusoid_into(col as f64, &mut col_code);
            let cell = map.cell_mut(row, col);
            cell[..half].copy_from_slice(&col_code);
            cell[half..].copy_from_slice(&row_code);
        }
    }
    Ok(map)
}

const TENSOR_MAGIC: &[u8; 5] = b"BEVT1";

/// Encodes a tensor in the BEVT1 layout: magic, u32 ndim, u32 dims, f32 values (all LE).
pub fn encode_tensor(dims: &[usize], data: &[f32]) -> Result<Vec<u8>, TensorFileError> {
    if dims.is_empty() {
        return Err(TensorFileError::EmptyDims);
    }
    let expected: usize = dims.iter().product();
    if expected != data.len() {
        return Err(TensorFileError::DimMismatch {
            expected,
            found: data.len(),
        });
    }
    let mut bytes = Vec::with_capacity(9 + 4 * dims.len() + 4 * data.len());
    bytes.extend_from_slice(TENSOR_MAGIC);
    bytes.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        let d32 = u32::try_from(d).map_err(|_| TensorFileError::DimOverflow(d))?;
        bytes.extend_from_slice(&d32.to_le_bytes());
    }
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    Ok(bytes)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>), TensorFileError> {
    let need = |needed: usize| {
        if bytes.len() < needed {
            Err(TensorFileError::Truncated {
                needed,
                found: bytes.len(),
            })
        } else {
            Ok(())
        }
    };
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());

    need(TENSOR_MAGIC.len())?;
    if &bytes[..5] != TENSOR_MAGIC {
        return Err(TensorFileError::MagicMismatch);
    }
    need(9)?;
    let ndim = u32_at(5) as usize;
    if ndim == 0 {
        return Err(TensorFileError::EmptyDims);
    }
    let header = 9usize
        .checked_add(ndim.checked_mul(4).ok_or(TensorFileError::DimOverflow(ndim))?)
        .ok_or(TensorFileError::DimOverflow(ndim))?;
    need(header)?;
    let dims: Vec<usize> = (0..ndim).map(|i| u32_at(9 + 4 * i) as usize).collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(TensorFileError::DimOverflow(ndim))?;
    let total = count
        .checked_mul(4)
        .and_then(|b| b.checked_add(header))
        .ok_or(TensorFileError::DimOverflow(count))?;
    need(total)?;
    if bytes.len() != total {
        return Err(TensorFileError::DimMismatch {
            expected: count,
            found: (bytes.len() - header) / 4,
        });
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((dims, data))
}

pub fn write_tensor(
    path: impl AsRef<Path>,
    dims: &[usize],
    data: &[f32],
) -> Result<(), TensorFileError> {
    let bytes = encode_tensor(dims, data)?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<(Vec<usize>, Vec<f32>), TensorFileError> {
    decode_tensor(&fs::read(path)?)
}
