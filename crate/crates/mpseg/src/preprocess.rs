//! Preprocessing: edge-preserving smoothing and histogram matching.

use crate::error::{Error, Result};
use crate::volume::Volume3D;

/// Parameters of the explicit Perona-Malik scheme.
///
/// `lambda` must stay within (0, 1/6] for the 6-neighbor explicit update
/// to be stable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionParams {
    pub iterations: usize,
    pub kappa: f64,
    pub lambda: f64,
}

impl Default for DiffusionParams {
    fn default() -> Self {
        DiffusionParams {
            iterations: 5,
            kappa: 30.0,
            lambda: 1.0 / 7.0,
        }
    }
}

impl DiffusionParams {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Param("diffusion iterations must be >= 1".into()));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::Param(format!(
                "diffusion kappa must be > 0, got {}",
                self.kappa
            )));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0 / 6.0) {
            return Err(Error::Param(format!(
                "diffusion lambda must be in (0, 1/6], got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Perona-Malik anisotropic diffusion with 6-neighbor fluxes, conductance
/// g(d) = exp(-(d/kappa)^2), and replicated (zero-flux) boundaries.
///
/// Each iteration reads only the previous buffer, so the update is
/// deterministic regardless of traversal order.
pub fn anisotropic_diffusion(vol: &Volume3D, params: &DiffusionParams) -> Result<Volume3D> {
    params.validate()?;
    let (dx, dy, dz) = vol.dims();
    let inv_k2 = 1.0 / (params.kappa * params.kappa);
    let mut cur = vol.values().to_vec();
    let mut next = vec![0.0; cur.len()];

    for _ in 0..params.iterations {
        for z in 0..dz {
            for y in 0..dy {
                let row = dx * (y + dy * z);
                for x in 0..dx {
                    let idx = row + x;
                    let center = cur[idx];
                    let mut flux = 0.0;
                    let mut add = |neighbor: f64| {
                        let d = neighbor - center;
                        flux += (-d * d * inv_k2).exp() * d;
                    };
                    if x > 0 {
                        add(cur[idx - 1]);
                    }
                    if x + 1 < dx {
                        add(cur[idx + 1]);
                    }
                    if y > 0 {
                        add(cur[idx - dx]);
                    }
                    if y + 1 < dy {
                        add(cur[idx + dx]);
                    }
                    if z > 0 {
                        add(cur[idx - dx * dy]);
                    }
                    if z + 1 < dz {
                        add(cur[idx + dx * dy]);
                    }
                    next[idx] = center + params.lambda * flux;
                }
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    vol.with_values(cur)
}

/// Piecewise-linear CDF of a value set over `bins` equal-width bins.
struct Cdf {
    min: f64,
    width: f64,
    /// cdf[k] = fraction of values below bin edge k; cdf[0] = 0, cdf[bins] = 1.
    at_edges: Vec<f64>,
}

impl Cdf {
    fn build(values: &[f64], bins: usize) -> Option<Cdf> {
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max <= min {
            return None;
        }
        let width = (max - min) / bins as f64;
        let mut counts = vec![0u64; bins];
        for &v in values {
            let b = (((v - min) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        let mut at_edges = vec![0.0; bins + 1];
        let n = values.len() as f64;
        for k in 0..bins {
            at_edges[k + 1] = at_edges[k] + counts[k] as f64 / n;
        }
        at_edges[bins] = 1.0;
        Some(Cdf {
            min,
            width,
            at_edges,
        })
    }

    /// F(v), interpolated linearly inside the containing bin.
    fn eval(&self, v: f64) -> f64 {
        let bins = self.at_edges.len() - 1;
        let t = (v - self.min) / self.width;
        if t <= 0.0 {
            return 0.0;
        }
        if t >= bins as f64 {
            return 1.0;
        }
        let b = (t as usize).min(bins - 1);
        let frac = t - b as f64;
        self.at_edges[b] + frac * (self.at_edges[b + 1] - self.at_edges[b])
    }

    /// F^{-1}(q) by piecewise-linear inversion over the bin edges.
    fn invert(&self, q: f64) -> f64 {
        let bins = self.at_edges.len() - 1;
        let q = q.clamp(0.0, 1.0);
        // First bin whose upper-edge CDF reaches q.
        let mut b = match self
            .at_edges
            .binary_search_by(|e| e.partial_cmp(&q).expect("finite CDF"))
        {
            Ok(k) => k.saturating_sub(1),
            Err(k) => k.saturating_sub(1),
        };
        b = b.min(bins - 1);
        let lo = self.at_edges[b];
        let hi = self.at_edges[b + 1];
        let frac = if hi > lo { (q - lo) / (hi - lo) } else { 0.0 };
        self.min + (b as f64 + frac) * self.width
    }
}

/// Classic CDF matching: maps each source intensity through the source CDF
/// and the inverse reference CDF. The reference must not be constant.
pub fn histogram_match(src: &Volume3D, reference: &Volume3D, bins: usize) -> Result<Volume3D> {
    if bins < 2 {
        return Err(Error::Param(format!("histogram bins must be >= 2, got {bins}")));
    }
    let ref_cdf = Cdf::build(reference.values(), bins).ok_or_else(|| {
        Error::Param("histogram matching reference volume is constant".into())
    })?;
    let Some(src_cdf) = Cdf::build(src.values(), bins) else {
        // A constant source maps wholesale to the reference quantile at 0..1;
        // use the midpoint.
        let v = ref_cdf.invert(0.5);
        return src.with_values(vec![v; src.num_voxels()]);
    };
    let mapped: Vec<f64> = src
        .values()
        .iter()
        .map(|&v| ref_cdf.invert(src_cdf.eval(v)))
        .collect();
    src.with_values(mapped)
}
