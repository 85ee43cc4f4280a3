//! Cross-attention concentration: normalized spatial entropy of a token's
//! attention grid, and its correlation with erasure failure.
//!
//! The spread measure is a reconstruction. `S = H(a) / log(H*W)` lies in
//! [0, 1], is 0 for a one-hot grid and 1 for a uniform grid, and is blind
//! to both scale and cell location.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SeeError};

/// Row-major grid as it arrives from an adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawGrid {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl RawGrid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let grid = Self {
            height,
            width,
            data,
        };
        grid.check()?;
        Ok(grid)
    }

    fn check(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(SeeError::InvalidGrid("height and width must be at least 1".into()));
        }
        if self.data.len() != self.height * self.width {
            return Err(SeeError::InvalidGrid(format!(
                "{}x{} grid carries {} values",
                self.height,
                self.width,
                self.data.len()
            )));
        }
        if let Some(bad) = self.data.iter().find(|x| !x.is_finite() || **x < 0.0) {
            return Err(SeeError::InvalidGrid(format!("entry {bad} is negative or non-finite")));
        }
        Ok(())
    }

    /// Element-wise mean of same-shaped grids (layers or timesteps).
    pub fn mean_pool(grids: &[RawGrid]) -> Result<RawGrid> {
        let first = grids
            .first()
            .ok_or_else(|| SeeError::InvalidGrid("nothing to pool".into()))?;
        let mut data = vec![0.0; first.data.len()];
        for g in grids {
            g.check()?;
            if (g.height, g.width) != (first.height, first.width) {
                return Err(SeeError::InvalidGrid("pooled grids differ in shape".into()));
            }
            data.iter_mut().zip(&g.data).for_each(|(acc, x)| *acc += x);
        }
        let n = grids.len() as f64;
        data.iter_mut().for_each(|x| *x /= n);
        Ok(RawGrid {
            height: first.height,
            width: first.width,
            data,
        })
    }
}

/// A token's attention grid normalized to unit mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub token: String,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// Divides a raw grid by its total mass.
pub fn normalize(token: &str, raw: &RawGrid) -> Result<AttentionMap> {
    raw.check()?;
    let total: f64 = raw.data.iter().sum();
    if total <= 0.0 {
        return Err(SeeError::DegenerateGrid);
    }
    Ok(AttentionMap {
        token: token.to_string(),
        height: raw.height,
        width: raw.width,
        data: raw.data.iter().map(|x| x / total).collect(),
    })
}

/// Normalized spatial entropy. A single-cell grid has spread 0.
pub fn spread(map: &AttentionMap) -> f64 {
    let cells = map.height * map.width;
    if cells <= 1 {
        return 0.0;
    }
    let entropy: f64 = map
        .data
        .iter()
        .filter(|&&a| a > 0.0)
        .map(|&a| -a * a.ln())
        .sum();
    // + 0.0 turns a -0.0 into 0.0
    (entropy / (cells as f64).ln()).clamp(0.0, 1.0) + 0.0
}

/// Averages the normalized maps of a multi-token phrase into one map.
pub fn merge_tokens(phrase: &str, maps: &[AttentionMap]) -> Result<AttentionMap> {
    let first = maps
        .first()
        .ok_or_else(|| SeeError::InvalidGrid(format!("no attention maps for `{phrase}`")))?;
    let mut data = vec![0.0; first.data.len()];
    for m in maps {
        if (m.height, m.width) != (first.height, first.width) {
            return Err(SeeError::InvalidGrid("token maps differ in shape".into()));
        }
        data.iter_mut().zip(&m.data).for_each(|(acc, x)| *acc += x);
    }
    let n = maps.len() as f64;
    data.iter_mut().for_each(|x| *x /= n);
    Ok(AttentionMap {
        token: phrase.to_string(),
        height: first.height,
        width: first.width,
        data,
    })
}

/// One model's point in the accuracy / spread scatter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpreadPoint {
    pub label: String,
    pub target_accuracy: f64,
    pub mean_spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpreadCorrelation {
    /// Pearson r, `None` when either coordinate has zero variance.
    pub pearson_r: Option<f64>,
    pub points: Vec<SpreadPoint>,
}

/// Pearson correlation of `(x, y)` pairs; `None` on zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len(), "pearson needs paired samples");
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Correlates target accuracy with mean attention spread across models.
pub fn correlate_spread_with_accuracy(points: Vec<SpreadPoint>) -> Result<SpreadCorrelation> {
    if points.len() < 3 {
        return Err(SeeError::Contract(format!(
            "spread correlation needs at least 3 models, got {}",
            points.len()
        )));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.target_accuracy).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.mean_spread).collect();
    Ok(SpreadCorrelation {
        pearson_r: pearson(&xs, &ys),
        points,
    })
}
