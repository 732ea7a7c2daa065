//! Synthetic wing case standing in for simulation and wind-tunnel data.
//!
//! A tapered, swept planform carries an analytic cp distribution with a
//! suction peak that grows with incidence and, above Mach 0.72, a smeared
//! shock on the upper surface. The "deformed" variant washes out the local
//! incidence towards the tip (`alpha * (1 - twist_bias * s^2)`), which gives a
//! systematic rigid-vs-deformed bias that grows along the span.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{DenseDataset, FlowCondition, SparseDataset, SurfacePoint};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Upper,
    Lower,
}

/// Local chord at span fraction `s`.
pub fn chord_length(s: f64) -> f64 {
    1.0 - 0.5 * s
}

/// Leading-edge x position at span fraction `s`.
pub fn leading_edge(s: f64) -> f64 {
    0.6 * s
}

/// Structured planform grid on both surfaces, upper side first, each side
/// ordered span-major then chordwise.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanformGrid {
    n_chord: usize,
    n_span: usize,
    points: Vec<SurfacePoint>,
    chord_fraction: Vec<f64>,
    span_fraction: Vec<f64>,
    side: Vec<Side>,
}

impl PlanformGrid {
    pub fn new(n_chord: usize, n_span: usize) -> Result<Self> {
        if n_chord < 2 || n_span < 2 {
            return Err(Error::InvalidInput(
                "planform grid needs at least 2 points per direction".into(),
            ));
        }
        let xc: Vec<f64> = nodes(n_chord);
        let ss: Vec<f64> = nodes(n_span);
        let wc = trapezoid_weights(&xc);
        let ws = trapezoid_weights(&ss);
        let n = 2 * n_chord * n_span;
        let mut grid = Self {
            n_chord,
            n_span,
            points: Vec::with_capacity(n),
            chord_fraction: Vec::with_capacity(n),
            span_fraction: Vec::with_capacity(n),
            side: Vec::with_capacity(n),
        };
        for side in [Side::Upper, Side::Lower] {
            let nz = if side == Side::Upper { 1.0 } else { -1.0 };
            for (j, &s) in ss.iter().enumerate() {
                let c = chord_length(s);
                for (i, &x_c) in xc.iter().enumerate() {
                    let x = leading_edge(s) + x_c * c;
                    grid.points.push(SurfacePoint {
                        position: [x, s, 0.0],
                        normal: [0.0, 0.0, nz],
                        area_weight: wc[i] * ws[j] * c,
                    });
                    grid.chord_fraction.push(x_c);
                    grid.span_fraction.push(s);
                    grid.side.push(side);
                }
            }
        }
        Ok(grid)
    }

    pub fn n_chord(&self) -> usize {
        self.n_chord
    }

    pub fn n_span(&self) -> usize {
        self.n_span
    }

    pub fn points(&self) -> &[SurfacePoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn chord_fraction(&self, i: usize) -> f64 {
        self.chord_fraction[i]
    }

    pub fn span_fraction(&self, i: usize) -> f64 {
        self.span_fraction[i]
    }

    pub fn side(&self, i: usize) -> Side {
        self.side[i]
    }

    /// Flat index of chord node `i`, span node `j` on `side`.
    pub fn index(&self, side: Side, j: usize, i: usize) -> usize {
        let offset = if side == Side::Upper {
            0
        } else {
            self.n_chord * self.n_span
        };
        offset + j * self.n_chord + i
    }

    /// Spanwise node spacing.
    pub fn span_spacing(&self) -> f64 {
        1.0 / (self.n_span - 1) as f64
    }
}

fn nodes(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

fn trapezoid_weights(nodes: &[f64]) -> Vec<f64> {
    let n = nodes.len();
    (0..n)
        .map(|i| {
            let left = if i > 0 { nodes[i] - nodes[i - 1] } else { 0.0 };
            let right = if i + 1 < n {
                nodes[i + 1] - nodes[i]
            } else {
                0.0
            };
            0.5 * (left + right)
        })
        .collect()
}

/// Nearest node index to `t` in `[0, 1]`, preferring the lower index on ties.
fn nearest_node(t: f64, n: usize) -> usize {
    let u = t * (n - 1) as f64;
    let lo = (u.floor().max(0.0) as usize).min(n - 1);
    let hi = (lo + 1).min(n - 1);
    let (dlo, dhi) = (
        t - lo as f64 / (n - 1) as f64,
        hi as f64 / (n - 1) as f64 - t,
    );
    if dhi.abs() < dlo.abs() {
        hi
    } else {
        lo
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaseParams {
    /// Spanwise washout factor of the deformed variant.
    pub twist_bias: f64,
    /// Shock width in chord fractions.
    pub shock_width: f64,
    /// Standard deviation of Gaussian noise added to synthetic sensors.
    pub noise_sd: f64,
}

impl Default for CaseParams {
    fn default() -> Self {
        Self {
            twist_bias: 0.3,
            shock_width: 0.03,
            noise_sd: 0.0,
        }
    }
}

impl CaseParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.shock_width > 0.0) {
            return Err(Error::InvalidInput("shock width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.twist_bias) {
            return Err(Error::InvalidInput("twist bias must lie in [0, 1)".into()));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(Error::InvalidInput("noise_sd must be non-negative".into()));
        }
        Ok(())
    }
}

/// Chordwise shock position for an effective incidence.
pub fn shock_position(mach: f64, effective_alpha: f64) -> f64 {
    (0.2 + 1.5 * (mach - 0.6) + 0.02 * effective_alpha).clamp(0.05, 0.95)
}

/// Closed-form pressure coefficient at chord fraction `x_c` and span fraction `s`.
pub fn analytic_cp(
    x_c: f64,
    s: f64,
    side: Side,
    condition: &FlowCondition,
    deformed: bool,
    params: &CaseParams,
) -> f64 {
    let alpha = if deformed {
        condition.alpha * (1.0 - params.twist_bias * s * s)
    } else {
        condition.alpha
    };
    let aft = 1.0 - x_c;
    match side {
        Side::Upper => {
            let x_sh = shock_position(condition.mach, alpha);
            let peak = 0.2 + 0.08 * alpha;
            let strength = 4.0 * (condition.mach - 0.72).max(0.0);
            let step = 1.0 - ((x_c - x_sh) / params.shock_width).tanh();
            -peak * aft * (1.0 + 0.5 * strength * step) + 0.1 * x_c
        }
        Side::Lower => 0.15 * aft - 0.02 * alpha * aft,
    }
}

/// Radical inverse of `index` in `base`.
pub fn halton(index: u64, base: u64) -> f64 {
    assert!(base >= 2, "halton base must be at least 2");
    let mut i = index;
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DoeConfig {
    pub num_samples: usize,
    pub mach_range: (f64, f64),
    pub alpha_range: (f64, f64),
    pub transonic_boost: bool,
    /// Fraction of trailing samples whose Mach is remapped into `boost_range`.
    pub boost_fraction: f64,
    pub boost_range: (f64, f64),
}

impl Default for DoeConfig {
    fn default() -> Self {
        Self {
            num_samples: 60,
            mach_range: (0.5, 0.9),
            alpha_range: (0.0, 10.0),
            transonic_boost: true,
            boost_fraction: 0.4,
            boost_range: (0.8, 0.9),
        }
    }
}

/// Two-dimensional Halton design (bases 2 and 3) over Mach and incidence.
pub fn generate_doe(config: &DoeConfig) -> Result<Vec<FlowCondition>> {
    let n = config.num_samples;
    if n == 0 {
        return Err(Error::InvalidInput("num_samples must be at least 1".into()));
    }
    let lerp = |(lo, hi): (f64, f64), t: f64| lo + (hi - lo) * t;
    let boosted = if config.transonic_boost {
        (config.boost_fraction * n as f64).round() as usize
    } else {
        0
    };
    (1..=n as u64)
        .map(|index| {
            let hm = halton(index, 2);
            let ha = halton(index, 3);
            let range = if index as usize > n - boosted {
                config.boost_range
            } else {
                config.mach_range
            };
            FlowCondition::new(lerp(range, hm), lerp(config.alpha_range, ha))
        })
        .collect()
}

/// Evaluates the analytic field at every grid point for each condition.
pub fn generate_dense(
    conditions: &[FlowCondition],
    grid: &PlanformGrid,
    deformed: bool,
    params: &CaseParams,
) -> Result<DenseDataset> {
    params.validate()?;
    let snapshots = conditions
        .iter()
        .map(|c| {
            (0..grid.len())
                .map(|i| {
                    analytic_cp(
                        grid.chord_fraction(i),
                        grid.span_fraction(i),
                        grid.side(i),
                        c,
                        deformed,
                        params,
                    )
                })
                .collect()
        })
        .collect();
    DenseDataset::new(grid.points().to_vec(), conditions.to_vec(), snapshots)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorLayout {
    pub n_sections: usize,
    pub n_chord_per_section: usize,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SensorLayout {
    fn default() -> Self {
        Self {
            n_sections: 9,
            n_chord_per_section: 14,
            noise_sd: 0.0,
            seed: 0,
        }
    }
}

/// Grid indices picked as sensors, with their 1-based section ids.
///
/// Sections sit at `s_k = (k + 0.5) / n_sections`, chord stations at
/// `(i + 0.5) / n_chord_per_section` on both sides; each station snaps to the
/// nearest grid node.
pub fn sensor_indices(grid: &PlanformGrid, layout: &SensorLayout) -> Vec<(usize, u32)> {
    let mut out = Vec::with_capacity(2 * layout.n_sections * layout.n_chord_per_section);
    for k in 0..layout.n_sections {
        let s = (k as f64 + 0.5) / layout.n_sections as f64;
        let j = nearest_node(s, grid.n_span);
        for side in [Side::Upper, Side::Lower] {
            for c in 0..layout.n_chord_per_section {
                let x_c = (c as f64 + 0.5) / layout.n_chord_per_section as f64;
                let i = nearest_node(x_c, grid.n_chord);
                out.push((grid.index(side, j, i), k as u32 + 1));
            }
        }
    }
    out
}

/// Samples a dense dataset at the sensor layout, optionally adding seeded noise.
pub fn extract_sensors(
    dense: &DenseDataset,
    grid: &PlanformGrid,
    layout: &SensorLayout,
) -> Result<SparseDataset> {
    if dense.num_points() != grid.len() {
        return Err(Error::LengthMismatch {
            expected: grid.len(),
            actual: dense.num_points(),
        });
    }
    if layout.n_sections == 0 || layout.n_chord_per_section == 0 {
        return Err(Error::InvalidInput(
            "sensor layout must be non-empty".into(),
        ));
    }
    let picks = sensor_indices(grid, layout);
    let noise = if layout.noise_sd > 0.0 {
        Some(
            Normal::new(0.0, layout.noise_sd)
                .map_err(|e| Error::InvalidInput(format!("noise: {e}")))?,
        )
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(layout.seed);
    let readings = (0..dense.num_conditions())
        .map(|k| {
            let col = dense.snapshot(k);
            picks
                .iter()
                .map(|&(i, _)| col[i] + noise.as_ref().map_or(0.0, |d| d.sample(&mut rng)))
                .collect()
        })
        .collect();
    SparseDataset::new(
        picks.iter().map(|&(i, _)| dense.grid()[i]).collect(),
        picks.iter().map(|&(_, id)| id).collect(),
        dense.conditions().to_vec(),
        readings,
    )
}

/// Star discrepancy of a 2-D point set by exhaustive enumeration of the
/// critical anchored boxes.
pub fn star_discrepancy_2d(points: &[[f64; 2]]) -> f64 {
    let n = points.len() as f64;
    let mut xs: Vec<f64> = points.iter().map(|p| p[0]).chain([1.0]).collect();
    let mut ys: Vec<f64> = points.iter().map(|p| p[1]).chain([1.0]).collect();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let mut worst: f64 = 0.0;
    for &a in &xs {
        for &b in &ys {
            let (mut open, mut closed) = (0usize, 0usize);
            for p in points {
                if p[0] < a && p[1] < b {
                    open += 1;
                }
                if p[0] <= a && p[1] <= b {
                    closed += 1;
                }
            }
            let vol = a * b;
            worst = worst
                .max(vol - open as f64 / n)
                .max(closed as f64 / n - vol);
        }
    }
    worst
}

/// Every constant and setting that defines a generated case, for provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaseConfig {
    pub n_chord: usize,
    pub n_span: usize,
    pub params: CaseParams,
    pub doe: DoeConfig,
    pub sensors: SensorLayout,
}

impl Default for CaseConfig {
    fn default() -> Self {
        Self {
            n_chord: 40,
            n_span: 20,
            params: CaseParams::default(),
            doe: DoeConfig::default(),
            sensors: SensorLayout::default(),
        }
    }
}

/// The fixed formula constants, recorded alongside generated data.
pub fn formula_constants() -> serde_json::Value {
    serde_json::json!({
        "chord": "1 - 0.5*s",
        "leading_edge": "0.6*s",
        "effective_alpha": "alpha*(1 - twist_bias*s^2) if deformed else alpha",
        "shock_position": "clamp(0.2 + 1.5*(M - 0.6) + 0.02*alpha_e, 0.05, 0.95)",
        "suction_peak": "0.2 + 0.08*alpha_e",
        "shock_strength": "4*max(0, M - 0.72)",
        "upper": "-P*(1 - x_c)*(1 + 0.5*S*(1 - tanh((x_c - x_sh)/w))) + 0.1*x_c",
        "lower": "0.15*(1 - x_c) - 0.02*alpha_e*(1 - x_c)",
    })
}

/// A generated case: rigid and deformed dense fields on a shared DoE plus
/// sensors sampled from the deformed field.
#[derive(Debug, Clone)]
pub struct SyntheticCase {
    pub grid: PlanformGrid,
    pub conditions: Vec<FlowCondition>,
    pub rigid: DenseDataset,
    pub deformed: DenseDataset,
    pub sensors: SparseDataset,
}

impl SyntheticCase {
    pub fn generate(config: &CaseConfig) -> Result<Self> {
        let grid = PlanformGrid::new(config.n_chord, config.n_span)?;
        let conditions = generate_doe(&config.doe)?;
        Self::at_conditions(config, grid, conditions)
    }

    pub fn at_conditions(
        config: &CaseConfig,
        grid: PlanformGrid,
        conditions: Vec<FlowCondition>,
    ) -> Result<Self> {
        let rigid = generate_dense(&conditions, &grid, false, &config.params)?;
        let deformed = generate_dense(&conditions, &grid, true, &config.params)?;
        let layout = SensorLayout {
            noise_sd: config.params.noise_sd.max(config.sensors.noise_sd),
            ..config.sensors.clone()
        };
        let sensors = extract_sensors(&deformed, &grid, &layout)?;
        Ok(Self {
            grid,
            conditions,
            rigid,
            deformed,
            sensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::total_variation;
    use rand::Rng;

    fn cond(m: f64, a: f64) -> FlowCondition {
        FlowCondition::new(m, a).unwrap()
    }

    #[test]
    fn grid_geometry_and_area() {
        let g = PlanformGrid::new(40, 20).unwrap();
        assert_eq!(g.len(), 1600);
        let total: f64 = g.points().iter().map(|p| p.area_weight).sum();
        assert!((total - 1.5).abs() < 1e-10);
        let tip_te = g.index(Side::Upper, 19, 39);
        assert!((g.points()[tip_te].position[0] - 1.1).abs() < 1e-15);
        assert_eq!(
            g.points()[g.index(Side::Lower, 0, 0)].normal,
            [0.0, 0.0, -1.0]
        );
    }

    #[test]
    fn trailing_edge_value_at_zero_incidence() {
        let p = CaseParams::default();
        let cp = analytic_cp(1.0, 0.3, Side::Upper, &cond(0.6, 0.0), false, &p);
        assert!((cp - 0.1).abs() < 1e-15);
    }

    #[test]
    fn subsonic_upper_profile_is_affine() {
        // S = 0: cp = -0.2 (1 - x) + 0.1 x, no tanh contribution
        let p = CaseParams::default();
        for k in 0..=10 {
            let x = k as f64 / 10.0;
            let cp = analytic_cp(x, 0.5, Side::Upper, &cond(0.6, 0.0), false, &p);
            assert!((cp - (-0.2 * (1.0 - x) + 0.1 * x)).abs() < 1e-15);
        }
    }

    #[test]
    fn root_is_undeformed() {
        let p = CaseParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let c = cond(rng.random_range(0.5..0.9), rng.random_range(0.0..10.0));
            let x = rng.random_range(0.0..1.0);
            for side in [Side::Upper, Side::Lower] {
                assert_eq!(
                    analytic_cp(x, 0.0, side, &c, true, &p),
                    analytic_cp(x, 0.0, side, &c, false, &p)
                );
            }
        }
    }

    #[test]
    fn spot_value_matches_hand_evaluation() {
        // M=0.85, alpha=2, x_c=0.5, rigid upper:
        // x_sh = 0.2 + 0.375 + 0.04 = 0.615, P = 0.36, S = 0.52
        let x_sh: f64 = 0.615;
        let expected = -0.36 * 0.5 * (1.0 + 0.26 * (1.0 - ((0.5 - x_sh) / 0.03).tanh())) + 0.05;
        let cp = analytic_cp(
            0.5,
            0.5,
            Side::Upper,
            &cond(0.85, 2.0),
            false,
            &CaseParams::default(),
        );
        assert!((cp - expected).abs() < 1e-12);
        // value frozen from an independent evaluation of the closed form
        assert!((cp - (-0.2235561992504808)).abs() < 1e-12);
    }

    #[test]
    fn shock_moves_aft_with_mach() {
        let xs: Vec<f64> = [0.7, 0.75, 0.8, 0.85, 0.9]
            .iter()
            .map(|&m| shock_position(m, 3.0))
            .collect();
        assert!(xs.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn deformation_bias_grows_spanwise() {
        let p = CaseParams::default();
        let c = cond(0.85, 4.0);
        let rms_at = |s: f64| {
            let sq: f64 = (0..=100)
                .map(|k| {
                    let x = k as f64 / 100.0;
                    let d = analytic_cp(x, s, Side::Upper, &c, true, &p)
                        - analytic_cp(x, s, Side::Upper, &c, false, &p);
                    d * d
                })
                .sum();
            (sq / 101.0).sqrt()
        };
        let r: Vec<f64> = (0..=10).map(|k| rms_at(k as f64 / 10.0)).collect();
        assert!(r.windows(2).all(|w| w[1] >= w[0]));
        assert!(r[10] > 0.0);
    }

    #[test]
    fn subsonic_profile_has_no_shock() {
        // At M <= 0.72 the profile is affine in x_c, so second differences vanish.
        let p = CaseParams::default();
        let cps: Vec<f64> = (0..=200)
            .map(|k| {
                analytic_cp(
                    k as f64 / 200.0,
                    0.5,
                    Side::Upper,
                    &cond(0.72, 5.0),
                    false,
                    &p,
                )
            })
            .collect();
        let max_d2 = cps
            .windows(3)
            .map(|w| (w[2] - 2.0 * w[1] + w[0]).abs())
            .fold(0.0, f64::max);
        assert!(max_d2 < 1e-12);
        assert!(total_variation(&cps) > 0.0);
    }

    #[test]
    fn halton_values() {
        assert_eq!(halton(1, 2), 0.5);
        assert_eq!(halton(2, 2), 0.25);
        assert_eq!(halton(3, 2), 0.75);
        assert_eq!(halton(1, 3), 1.0 / 3.0);
        for i in 1..500 {
            let v = halton(i, 5);
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn doe_maps_first_point_and_stays_in_range() {
        let one = generate_doe(&DoeConfig {
            num_samples: 1,
            ..DoeConfig::default()
        })
        .unwrap();
        assert_eq!(one.len(), 1);
        assert!((one[0].mach - 0.7).abs() < 1e-15);
        assert!((one[0].alpha - 10.0 / 3.0).abs() < 1e-14);

        let d = DoeConfig::default();
        let pts = generate_doe(&d).unwrap();
        assert_eq!(pts.len(), 60);
        assert!(pts
            .iter()
            .all(|c| (0.5..=0.9).contains(&c.mach) && (0.0..=10.0).contains(&c.alpha)));
        assert!(pts[36..].iter().all(|c| c.mach >= 0.8));
        assert_eq!(pts, generate_doe(&d).unwrap());
    }

    #[test]
    fn dense_generation() {
        let g = PlanformGrid::new(10, 5).unwrap();
        let cs = vec![cond(0.7, 2.0), cond(0.85, 5.0)];
        let p = CaseParams::default();
        let rigid = generate_dense(&cs, &g, false, &p).unwrap();
        let deformed = generate_dense(&cs, &g, true, &p).unwrap();
        assert_eq!(rigid.samples().count(), 100 * 2);
        for k in 0..2 {
            for side in [Side::Upper, Side::Lower] {
                for i in 0..10 {
                    let idx = g.index(side, 0, i);
                    assert_eq!(rigid.snapshot(k)[idx], deformed.snapshot(k)[idx]);
                }
            }
        }
    }

    #[test]
    fn default_sensor_layout() {
        let g = PlanformGrid::new(40, 20).unwrap();
        let dense = generate_dense(&[cond(0.8, 3.0)], &g, true, &CaseParams::default()).unwrap();
        let s = extract_sensors(&dense, &g, &SensorLayout::default()).unwrap();
        assert_eq!(s.num_sensors(), 252);
        let picks = sensor_indices(&g, &SensorLayout::default());
        for (r, &(i, _)) in picks.iter().enumerate() {
            assert_eq!(s.readings(0)[r], dense.snapshot(0)[i]);
        }
        let mut unique: Vec<usize> = picks.iter().map(|p| p.0).collect();
        unique.sort_unstable();
        unique.dedup();
        assert_eq!(unique.len(), 252);
        assert_eq!(s.section_ids().iter().filter(|&&id| id == 3).count(), 28);
    }

    #[test]
    fn noisy_sensors_are_seeded() {
        let g = PlanformGrid::new(12, 6).unwrap();
        let dense = generate_dense(&[cond(0.8, 3.0)], &g, true, &CaseParams::default()).unwrap();
        let layout = SensorLayout {
            n_sections: 3,
            n_chord_per_section: 4,
            noise_sd: 0.01,
            seed: 3,
        };
        let a = extract_sensors(&dense, &g, &layout).unwrap();
        let b = extract_sensors(&dense, &g, &layout).unwrap();
        assert_eq!(a, b);
        let clean = extract_sensors(
            &dense,
            &g,
            &SensorLayout {
                noise_sd: 0.0,
                ..layout
            },
        )
        .unwrap();
        assert_ne!(a, clean);
    }

    #[test]
    fn discrepancy_of_trivial_sets() {
        assert!((star_discrepancy_2d(&[[0.5, 0.5]]) - 0.75).abs() < 1e-15);
    }
}
