use serde::{Deserialize, Serialize};

use super::{Features, NUM_FEATURES};
use crate::error::{Error, Result};

/// Per-feature affine map of the fitted range onto `[-0.5, 0.5]`.
///
/// Features with zero range map to `0.0`. Values outside the fitted range
/// extrapolate linearly; nothing is clamped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub min: Features,
    pub max: Features,
}

impl MinMaxScaler {
    pub fn fit<I>(rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = Features>,
    {
        let mut min = [f64::INFINITY; NUM_FEATURES];
        let mut max = [f64::NEG_INFINITY; NUM_FEATURES];
        let mut count = 0usize;
        for (i, row) in rows.into_iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFiniteFeature {
                        sample: i,
                        feature: j,
                    });
                }
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyDataset);
        }
        Ok(Self { min, max })
    }

    pub fn fit_samples<'a, I>(samples: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a super::FieldSample>,
    {
        Self::fit(samples.into_iter().map(|s| s.features()))
    }

    /// Identity-like scaler for tests: maps `[-0.5, 0.5]` onto itself.
    pub fn unit() -> Self {
        Self {
            min: [-0.5; NUM_FEATURES],
            max: [0.5; NUM_FEATURES],
        }
    }

    pub fn transform(&self, raw: &Features) -> Features {
        let mut out = [0.0; NUM_FEATURES];
        for j in 0..NUM_FEATURES {
            let range = self.max[j] - self.min[j];
            out[j] = if range > 0.0 {
                (raw[j] - self.min[j]) / range - 0.5
            } else {
                0.0
            };
        }
        out
    }

    /// Inverse of [`transform`](Self::transform); zero-range features return their fitted value.
    pub fn inverse_transform(&self, scaled: &Features) -> Features {
        let mut out = [0.0; NUM_FEATURES];
        for j in 0..NUM_FEATURES {
            let range = self.max[j] - self.min[j];
            out[j] = if range > 0.0 {
                (scaled[j] + 0.5) * range + self.min[j]
            } else {
                self.min[j]
            };
        }
        out
    }

    pub(crate) fn validate(&self) -> Result<()> {
        for j in 0..NUM_FEATURES {
            if !(self.min[j].is_finite() && self.max[j].is_finite()) || self.max[j] < self.min[j] {
                return Err(Error::ShapeInconsistency(format!(
                    "scaler feature {j} has invalid range [{}, {}]",
                    self.min[j], self.max[j]
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn with_feature(j: usize, v: f64) -> Features {
        let mut f = [0.0; NUM_FEATURES];
        f[j] = v;
        f
    }

    #[test]
    fn endpoints_and_midpoint() {
        let s = MinMaxScaler::fit([with_feature(0, 2.0), with_feature(0, 4.0)]).unwrap();
        assert_eq!(s.transform(&with_feature(0, 2.0))[0], -0.5);
        assert_eq!(s.transform(&with_feature(0, 4.0))[0], 0.5);
        assert_eq!(s.transform(&with_feature(0, 3.0))[0], 0.0);
    }

    #[test]
    fn constant_feature_maps_to_zero() {
        let s = MinMaxScaler::fit([[1.5; NUM_FEATURES], [1.5; NUM_FEATURES]]).unwrap();
        assert_eq!(s.transform(&[1.5; NUM_FEATURES]), [0.0; NUM_FEATURES]);
        assert_eq!(s.transform(&[99.0; NUM_FEATURES]), [0.0; NUM_FEATURES]);
    }

    #[test]
    fn fitted_extrema_map_to_half() {
        let rows = [
            [0.5, -2.0, 0.0, 1.0, -1.0, 0.3, 0.0, 7.0],
            [0.9, 10.0, 1.6, 2.0, 3.0, 0.7, 1.0, 8.0],
            [0.7, 3.0, 0.2, 1.1, 0.0, 0.4, 0.5, 7.5],
        ];
        let s = MinMaxScaler::fit(rows).unwrap();
        assert_eq!(s.transform(&s.min), [-0.5; NUM_FEATURES]);
        assert_eq!(s.transform(&s.max), [0.5; NUM_FEATURES]);
    }

    #[test]
    fn extrapolates_linearly() {
        let s = MinMaxScaler::fit([with_feature(2, 0.0), with_feature(2, 10.0)]).unwrap();
        assert_eq!(s.transform(&with_feature(2, 15.0))[2], 1.0);
    }

    #[test]
    fn unit_range_round_trip() {
        let s = MinMaxScaler::fit([[0.0; NUM_FEATURES], [1.0; NUM_FEATURES]]).unwrap();
        let x = [0.1, 0.25, 0.333, 0.9, 1.7, -0.4, 0.5, 0.0];
        let back = s.inverse_transform(&s.transform(&x));
        for j in 0..NUM_FEATURES {
            assert!((back[j] - x[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn errors() {
        assert!(matches!(
            MinMaxScaler::fit(std::iter::empty()),
            Err(Error::EmptyDataset)
        ));
        assert!(matches!(
            MinMaxScaler::fit([with_feature(3, f64::NAN)]),
            Err(Error::NonFiniteFeature {
                sample: 0,
                feature: 3
            })
        ));
    }

    fn feature_vec() -> impl Strategy<Value = Features> {
        prop::array::uniform8(-10.0f64..10.0)
    }

    proptest! {
        #[test]
        fn round_trip(a in feature_vec(), b in feature_vec(), x in feature_vec()) {
            let s = MinMaxScaler::fit([a, b]).unwrap();
            let back = s.inverse_transform(&s.transform(&x));
            for j in 0..NUM_FEATURES {
                if s.max[j] - s.min[j] > 1e-3 {
                    prop_assert!((back[j] - x[j]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn transform_is_affine(a in feature_vec(), b in feature_vec(), lam in 0.0f64..1.0) {
            let s = MinMaxScaler::fit([[-10.0; NUM_FEATURES], [10.0; NUM_FEATURES]]).unwrap();
            let mix: Features = std::array::from_fn(|j| lam * a[j] + (1.0 - lam) * b[j]);
            let lhs = s.transform(&mix);
            let (ta, tb) = (s.transform(&a), s.transform(&b));
            for j in 0..NUM_FEATURES {
                prop_assert!((lhs[j] - (lam * ta[j] + (1.0 - lam) * tb[j])).abs() < 1e-12);
            }
        }
    }
}
