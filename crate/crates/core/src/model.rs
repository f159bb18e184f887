//! Domain types shared by every other module: particle statistics, source and
//! interferometer geometry, detector coordinates, sampled coherence curves,
//! and fit results. All physical quantities are stored in SI base units
//! (meters, seconds, hertz); unit-suffixed config input is converted at parse
//! time by the CLI.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

/// Exchange statistics of the simulated particles. The tag selects how the
/// two-particle path amplitudes compose: amplitudes add (boson), subtract
/// (fermion), or probabilities add (classical).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParticleStatistics {
    Boson,
    Fermion,
    Classical,
}

impl ParticleStatistics {
    pub const ALL: [ParticleStatistics; 3] = [
        ParticleStatistics::Boson,
        ParticleStatistics::Fermion,
        ParticleStatistics::Classical,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ParticleStatistics::Boson => "boson",
            ParticleStatistics::Fermion => "fermion",
            ParticleStatistics::Classical => "classical",
        }
    }
}

impl fmt::Display for ParticleStatistics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Thermal source: a uniform slit of transverse size `length_l` emitting a
/// rectangular spectral band of width `bandwidth_dnu` around the carrier.
/// `n_subsources` and `n_modes` control the Monte Carlo discretization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    /// Transverse source size l (m).
    pub length_l: f64,
    /// Transverse center of the source (m).
    pub center_x: f64,
    /// Carrier wavelength (m).
    pub wavelength_lambda: f64,
    /// Spectral bandwidth (Hz). Zero means monochromatic.
    pub bandwidth_dnu: f64,
    /// Sub-source grid count for the MC engine.
    pub n_subsources: usize,
    /// Temporal mode count for the MC engine.
    pub n_modes: usize,
}

impl SourceSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("length_l", self.length_l),
            ("center_x", self.center_x),
            ("wavelength_lambda", self.wavelength_lambda),
            ("bandwidth_dnu", self.bandwidth_dnu),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite(name));
            }
        }
        if self.length_l <= 0.0 {
            return Err(Error::SourceLengthNotPositive);
        }
        if self.wavelength_lambda <= 0.0 {
            return Err(Error::WavelengthNotPositive);
        }
        if self.bandwidth_dnu < 0.0 {
            return Err(Error::BandwidthNegative);
        }
        if self.n_subsources < 2 {
            return Err(Error::TooFewSubSources);
        }
        if self.n_modes < 1 {
            return Err(Error::TooFewModes);
        }
        Ok(())
    }

    /// Coherence time tau_c = 1/dnu: the first zero of the sinc envelope of a
    /// rectangular band of width dnu.
    pub fn coherence_time(&self) -> f64 {
        1.0 / self.bandwidth_dnu
    }
}

/// Interferometer layout. All arms share the source-to-detector distance `z`;
/// a HOM layout additionally carries the separation `d` between the first
/// source and the beam-splitter image of the second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeometrySpec {
    Hbt { z: f64 },
    Hom { z: f64, d: f64 },
}

impl GeometrySpec {
    pub fn z(&self) -> f64 {
        match *self {
            GeometrySpec::Hbt { z } | GeometrySpec::Hom { z, .. } => z,
        }
    }

    pub fn separation(&self) -> Option<f64> {
        match *self {
            GeometrySpec::Hbt { .. } => None,
            GeometrySpec::Hom { d, .. } => Some(d),
        }
    }

    pub fn is_hom(&self) -> bool {
        matches!(self, GeometrySpec::Hom { .. })
    }

    pub fn kind_label(&self) -> &'static str {
        match self {
            GeometrySpec::Hbt { .. } => "hbt",
            GeometrySpec::Hom { .. } => "hom",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let z = self.z();
        if !z.is_finite() {
            return Err(Error::NonFinite("z"));
        }
        if z <= 0.0 {
            return Err(Error::DistanceNotPositive);
        }
        if let GeometrySpec::Hom { d, .. } = *self {
            if !d.is_finite() {
                return Err(Error::NonFinite("d"));
            }
            if d < 0.0 {
                return Err(Error::SeparationNegative);
            }
        }
        Ok(())
    }
}

/// One single-particle detector: transverse position, detection time, and an
/// optional Gaussian timing response used by the event simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorSpec {
    /// Transverse coordinate in the detection plane (m).
    pub x: f64,
    /// Detection time (s).
    pub t: f64,
    /// Timing response width (s); 0 disables jitter.
    #[serde(default)]
    pub jitter_sigma: f64,
}

impl DetectorSpec {
    pub fn at_position(x: f64) -> Self {
        DetectorSpec { x, t: 0.0, jitter_sigma: 0.0 }
    }

    pub fn at_time(t: f64) -> Self {
        DetectorSpec { x: 0.0, t, jitter_sigma: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("x", self.x), ("t", self.t), ("jitter_sigma", self.jitter_sigma)] {
            if !v.is_finite() {
                return Err(Error::NonFinite(name));
            }
        }
        if self.jitter_sigma < 0.0 {
            return Err(Error::JitterNegative);
        }
        Ok(())
    }
}

/// Checks every invariant of a (source, geometry) pair and returns the pair
/// unchanged. The first violated invariant is reported by name.
pub fn validate_config(source: SourceSpec, geometry: GeometrySpec) -> Result<(SourceSpec, GeometrySpec)> {
    source.validate()?;
    geometry.validate()?;
    Ok((source, geometry))
}

/// Scan coordinate of a coherence curve: detector time difference t1 - t2 or
/// transverse position difference x1 - x2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisKind {
    TimeDifferenceS,
    PositionDifferenceM,
}

impl AxisKind {
    pub fn label(self) -> &'static str {
        match self {
            AxisKind::TimeDifferenceS => "time_difference_s",
            AxisKind::PositionDifferenceM => "position_difference_m",
        }
    }

    /// Coordinate tolerance for extremum refinement on this axis.
    pub fn coordinate_tolerance(self) -> f64 {
        match self {
            AxisKind::TimeDifferenceS => 1e-12,
            AxisKind::PositionDifferenceM => 1e-9,
        }
    }
}

/// How a curve was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Analytic,
    Mc,
    Event,
}

impl Generator {
    pub fn label(self) -> &'static str {
        match self {
            Generator::Analytic => "analytic",
            Generator::Mc => "mc",
            Generator::Event => "event",
        }
    }
}

/// One sampled point of a normalized g2 curve. `flagged` marks values that a
/// synthesis step deemed unphysical (below zero); fits skip them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub coordinate: f64,
    pub g2: f64,
    pub stderr: f64,
    #[serde(default)]
    pub flagged: bool,
}

/// Provenance carried along with every curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveMeta {
    pub statistics: ParticleStatistics,
    pub geometry: GeometrySpec,
    pub source: SourceSpec,
    pub generator: Generator,
    pub seed: Option<u64>,
}

/// A sampled, normalized second-order coherence function g2 versus a scan
/// coordinate, with per-point standard errors (zero for closed forms).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceCurve {
    pub axis: AxisKind,
    pub points: Vec<CurvePoint>,
    pub meta: CurveMeta,
}

impl CoherenceCurve {
    pub fn new(axis: AxisKind, points: Vec<CurvePoint>, meta: CurveMeta) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCurve);
        }
        for (i, p) in points.iter().enumerate() {
            if !p.g2.is_finite() {
                return Err(Error::NonFiniteCurveValue(i));
            }
            if !(p.stderr >= 0.0) {
                return Err(Error::NegativeStderr(i));
            }
            if i > 0 && !(p.coordinate > points[i - 1].coordinate) {
                return Err(Error::CoordinatesNotIncreasing(i));
            }
        }
        if meta.generator == Generator::Analytic && points.iter().any(|p| p.stderr != 0.0) {
            return Err(Error::NegativeStderr(0));
        }
        Ok(CoherenceCurve { axis, points, meta })
    }

    pub fn coordinates(&self) -> impl Iterator<Item = f64> + '_ {
        self.points.iter().map(|p| p.coordinate)
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.points.iter().map(|p| p.g2)
    }

    /// True when every point carries a strictly positive stderr, i.e. the
    /// curve supports weighted fitting.
    pub fn has_errors(&self) -> bool {
        self.points.iter().all(|p| p.stderr > 0.0)
    }

    pub fn coordinate_range(&self) -> (f64, f64) {
        (
            self.points.first().map(|p| p.coordinate).unwrap_or(0.0),
            self.points.last().map(|p| p.coordinate).unwrap_or(0.0),
        )
    }
}

/// Fit target identifiers; one per closed-form curve family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelId {
    HbtTemporal,
    HbtSpatial,
    HomParallel,
    HomOrthogonal,
}

impl ModelId {
    pub const ALL: [ModelId; 4] = [
        ModelId::HbtTemporal,
        ModelId::HbtSpatial,
        ModelId::HomParallel,
        ModelId::HomOrthogonal,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ModelId::HbtTemporal => "hbt_temporal",
            ModelId::HbtSpatial => "hbt_spatial",
            ModelId::HomParallel => "hom_parallel",
            ModelId::HomOrthogonal => "hom_orthogonal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hbt_temporal" => Ok(ModelId::HbtTemporal),
            "hbt_spatial" => Ok(ModelId::HbtSpatial),
            "hom_parallel" => Ok(ModelId::HomParallel),
            "hom_orthogonal" => Ok(ModelId::HomOrthogonal),
            _ => Err(Error::Parse(format!(
                "unknown model id {s:?}; valid ids: hbt_temporal, hbt_spatial, hom_parallel, hom_orthogonal"
            ))),
        }
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Outcome of a nonlinear least-squares fit: recovered parameters, their
/// Gauss-Newton standard errors, and convergence diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model_id: ModelId,
    pub statistics: ParticleStatistics,
    /// Named parameter values (SI units), free and fixed alike.
    pub params: BTreeMap<String, f64>,
    /// Gauss-Newton standard errors for the free parameters.
    pub param_stderr: BTreeMap<String, f64>,
    /// Root of the weighted sum of squared residuals.
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl FitResult {
    pub fn param(&self, name: &str) -> Option<f64> {
        self.params.get(name).copied()
    }

    /// Structured text record: one `key=value` line per field, stable order.
    pub fn to_record(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("model={}\n", self.model_id));
        out.push_str(&format!("statistics={}\n", self.statistics));
        out.push_str(&format!("converged={}\n", self.converged));
        out.push_str(&format!("iterations={}\n", self.iterations));
        out.push_str(&format!("residual_norm={}\n", self.residual_norm));
        for (k, v) in &self.params {
            out.push_str(&format!("{k}={v}\n"));
        }
        for (k, v) in &self.param_stderr {
            out.push_str(&format!("stderr_{k}={v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_source() -> SourceSpec {
        SourceSpec {
            length_l: 0.55e-3,
            center_x: 0.0,
            wavelength_lambda: 780e-9,
            bandwidth_dnu: 3.378e6,
            n_subsources: 200,
            n_modes: 64,
        }
    }

    #[test]
    fn paper_scale_config_is_valid() {
        let geom = GeometrySpec::Hbt { z: 0.910 };
        let (s, g) = validate_config(paper_source(), geom).unwrap();
        assert_eq!(s, paper_source());
        assert_eq!(g, geom);
    }

    #[test]
    fn zero_source_size_is_named() {
        let mut s = paper_source();
        s.length_l = 0.0;
        let err = validate_config(s, GeometrySpec::Hbt { z: 0.910 }).unwrap_err();
        assert_eq!(err.to_string(), "length_l must be positive");
    }

    #[test]
    fn hom_separation_is_structural() {
        // The type makes "HOM without d" unrepresentable; the parse layer maps
        // a missing d onto Error::SeparationMissing. Here we check the message
        // wording stays stable.
        assert_eq!(Error::SeparationMissing.to_string(), "d required for HOM");
        let err = validate_config(paper_source(), GeometrySpec::Hom { z: 0.910, d: -1e-3 }).unwrap_err();
        assert_eq!(err, Error::SeparationNegative);
    }

    #[test]
    fn validation_is_total_on_non_finite_input() {
        let mut s = paper_source();
        s.bandwidth_dnu = f64::NAN;
        assert!(matches!(
            validate_config(s, GeometrySpec::Hbt { z: 0.910 }),
            Err(Error::NonFinite("bandwidth_dnu"))
        ));
        let g = GeometrySpec::Hom { z: f64::INFINITY, d: 0.0 };
        assert!(matches!(validate_config(paper_source(), g), Err(Error::NonFinite("z"))));
    }

    #[test]
    fn coherence_time_is_inverse_bandwidth() {
        let s = paper_source();
        let tau = s.coherence_time();
        assert!((tau - 296.03e-9).abs() < 0.1e-9, "tau_c = {tau:.3e}");
    }

    #[test]
    fn curve_rejects_unsorted_coordinates() {
        let meta = CurveMeta {
            statistics: ParticleStatistics::Boson,
            geometry: GeometrySpec::Hbt { z: 0.910 },
            source: paper_source(),
            generator: Generator::Analytic,
            seed: None,
        };
        let pts = vec![
            CurvePoint { coordinate: 0.0, g2: 2.0, stderr: 0.0, flagged: false },
            CurvePoint { coordinate: 0.0, g2: 2.0, stderr: 0.0, flagged: false },
        ];
        assert!(matches!(
            CoherenceCurve::new(AxisKind::TimeDifferenceS, pts, meta),
            Err(Error::CoordinatesNotIncreasing(1))
        ));
    }

    #[test]
    fn analytic_curve_requires_zero_stderr() {
        let meta = CurveMeta {
            statistics: ParticleStatistics::Boson,
            geometry: GeometrySpec::Hbt { z: 0.910 },
            source: paper_source(),
            generator: Generator::Analytic,
            seed: None,
        };
        let pts = vec![CurvePoint { coordinate: 0.0, g2: 2.0, stderr: 0.1, flagged: false }];
        assert!(CoherenceCurve::new(AxisKind::TimeDifferenceS, pts, meta).is_err());
    }

    #[test]
    fn specs_round_trip_through_json() {
        let s = paper_source();
        let g = GeometrySpec::Hom { z: 0.910, d: 5e-3 };
        let s2: SourceSpec = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        let g2: GeometrySpec = serde_json::from_str(&serde_json::to_string(&g).unwrap()).unwrap();
        assert_eq!(s, s2);
        assert_eq!(g, g2);
    }
}
