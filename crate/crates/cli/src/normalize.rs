use dnmm::DomainBox;
use serde::{Deserialize, Serialize};

use crate::config::Normalization;
use crate::error::{CliError, Result};

/// Per-coordinate map `y = scale · x + offset` from data space into the model domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
}

impl AffineMap {
    pub fn identity(d: usize) -> Self {
        Self {
            scale: vec![1.0; d],
            offset: vec![0.0; d],
        }
    }

    pub fn fit(data: &[Vec<f64>], domain: &DomainBox, normalization: Normalization) -> Result<Self> {
        let d = domain.dim();
        let padding = match normalization {
            Normalization::Identity => return Ok(Self::identity(d)),
            Normalization::Fit { padding } => padding,
        };
        let mut scale = Vec::with_capacity(d);
        let mut offset = Vec::with_capacity(d);
        for i in 0..d {
            let lo = data.iter().map(|x| x[i]).fold(f64::INFINITY, f64::min);
            let hi = data.iter().map(|x| x[i]).fold(f64::NEG_INFINITY, f64::max);
            let extent = hi - lo;
            if !(extent > 0.0) {
                return Err(CliError::Config(format!(
                    "column {} is constant; cannot fit a normalization",
                    i + 1
                )));
            }
            let (a, b) = (lo - padding * extent, hi + padding * extent);
            let s = (domain.upper()[i] - domain.lower()[i]) / (b - a);
            scale.push(s);
            offset.push(domain.lower()[i] - s * a);
        }
        Ok(Self { scale, offset })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.scale)
            .zip(&self.offset)
            .map(|((v, s), o)| s * v + o)
            .collect()
    }

    /// `|det|` of the map, the factor turning model densities into data densities.
    pub fn jacobian(&self) -> f64 {
        self.scale.iter().map(|s| s.abs()).product()
    }

    /// The data-space box that maps onto `domain`.
    pub fn preimage(&self, domain: &DomainBox) -> Result<DomainBox> {
        let ends = |b: &[f64]| -> Vec<f64> {
            b.iter()
                .zip(&self.scale)
                .zip(&self.offset)
                .map(|((y, s), o)| (y - o) / s)
                .collect()
        };
        let (a, b) = (ends(domain.lower()), ends(domain.upper()));
        let lower = a.iter().zip(&b).map(|(p, q)| p.min(*q)).collect();
        let upper = a.iter().zip(&b).map(|(p, q)| p.max(*q)).collect();
        Ok(DomainBox::new(lower, upper)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_maps_padded_box_onto_domain() {
        let data = vec![vec![2.0, 10.0], vec![4.0, 30.0]];
        let domain = DomainBox::cube(2, 0.0, 1.0).unwrap();
        let map = AffineMap::fit(&data, &domain, Normalization::Fit { padding: 0.5 }).unwrap();
        let lo = map.apply(&[1.0, 0.0]);
        let hi = map.apply(&[5.0, 40.0]);
        for v in lo {
            assert!(v.abs() < 1e-12);
        }
        for v in hi {
            assert!((v - 1.0).abs() < 1e-12);
        }
        assert!((map.jacobian() - 1.0 / (4.0 * 40.0)).abs() < 1e-15);
        let back = map.preimage(&domain).unwrap();
        assert!((back.lower()[1] - 0.0).abs() < 1e-12 && (back.upper()[1] - 40.0).abs() < 1e-12);
    }

    #[test]
    fn identity_and_constant_columns() {
        let domain = DomainBox::cube(1, 0.0, 1.0).unwrap();
        let map = AffineMap::fit(&[vec![3.0]], &domain, Normalization::Identity).unwrap();
        assert_eq!(map.apply(&[3.0]), vec![3.0]);
        assert_eq!(map.jacobian(), 1.0);
        assert!(AffineMap::fit(&[vec![3.0], vec![3.0]], &domain, Normalization::Fit { padding: 0.1 }).is_err());
    }
}
