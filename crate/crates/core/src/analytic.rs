//! Closed-form normalized second-order coherence functions for thermal
//! particles in HBT and HOM interferometers, plus visibility and extremum
//! utilities.
//!
//! Only the fermion forms are written out. The classical curve is the
//! constant 1 and the boson curve is the half-sum complement
//! `g_B = 2 g_C - g_F`, so the identity `g_C = (g_B + g_F)/2` holds
//! structurally rather than by separate bookkeeping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    AxisKind, CoherenceCurve, CurveMeta, CurvePoint, Generator, GeometrySpec, ParticleStatistics,
    SourceSpec,
};

/// sin(x)/x with the 0/0 branch replaced by its series for |x| < 1e-4.
pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        let x2 = x * x;
        1.0 - x2 / 6.0 + x2 * x2 / 120.0
    } else {
        x.sin() / x
    }
}

/// d/dx sinc(x), series-expanded near zero for the same reason.
pub fn dsinc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        let x2 = x * x;
        -x / 3.0 + x * x2 / 30.0
    } else {
        (x * x.cos() - x.sin()) / (x * x)
    }
}

fn check_finite(args: &[(&'static str, f64)]) -> Result<()> {
    for &(name, v) in args {
        if !v.is_finite() {
            return Err(Error::NonFinite(name));
        }
    }
    Ok(())
}

/// Maps the fermion value of a coherence function onto the requested
/// statistics: classical is flat, boson is the half-sum complement.
fn from_fermion(stat: ParticleStatistics, fermion: f64) -> f64 {
    match stat {
        ParticleStatistics::Fermion => fermion,
        ParticleStatistics::Classical => 1.0,
        ParticleStatistics::Boson => 2.0 - fermion,
    }
}

/// Normalized temporal g2 in a HBT interferometer for a rectangular spectrum
/// of width `dnu`: fermion `1 - beta sinc^2(pi dnu tau)`, boson the
/// complement, classical 1.
pub fn g2_hbt_temporal(stat: ParticleStatistics, dnu: f64, tau: f64, beta: f64) -> Result<f64> {
    check_finite(&[("dnu", dnu), ("tau", tau), ("beta", beta)])?;
    if dnu < 0.0 {
        return Err(Error::BandwidthNegative);
    }
    let s = sinc(std::f64::consts::PI * dnu * tau);
    Ok(from_fermion(stat, 1.0 - beta * s * s))
}

/// Normalized one-dimensional spatial g2 in a HBT interferometer for a
/// uniform slit of size `l`: fermion `1 - beta sinc^2(pi l dx / (z lambda))`.
pub fn g2_hbt_spatial(
    stat: ParticleStatistics,
    l: f64,
    lambda: f64,
    z: f64,
    dx: f64,
    beta: f64,
) -> Result<f64> {
    check_finite(&[("l", l), ("lambda", lambda), ("z", z), ("dx", dx), ("beta", beta)])?;
    if l <= 0.0 {
        return Err(Error::SourceLengthNotPositive);
    }
    if lambda <= 0.0 {
        return Err(Error::WavelengthNotPositive);
    }
    if z <= 0.0 {
        return Err(Error::DistanceNotPositive);
    }
    let s = sinc(std::f64::consts::PI * l * dx / (z * lambda));
    Ok(from_fermion(stat, 1.0 - beta * s * s))
}

/// Relative polarization of the two beams entering a HOM interferometer.
/// Orthogonal polarizations make cross-source particle pairs distinguishable,
/// leaving a half-weight single-source dip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarization {
    Parallel,
    Orthogonal,
}

impl Polarization {
    pub fn label(self) -> &'static str {
        match self {
            Polarization::Parallel => "parallel",
            Polarization::Orthogonal => "orthogonal",
        }
    }
}

/// Normalized spatial g2 of two equal-size thermal beams in a HOM
/// interferometer.
///
/// Parallel polarization (all eight coincidence alternatives
/// indistinguishable), fermion:
///
/// ```text
/// 1 - 1/2 beta sinc^2(pi l dx / (lambda z))
///   + 1/2 beta sinc^2(pi l dx / (lambda z)) cos(2 pi d dx / (lambda z))
/// ```
///
/// Orthogonal polarization keeps only same-source interference and the
/// cross-source pairs contribute a flat background, halving the dip:
/// fermion `1 - 1/2 beta sinc^2(...)`.
pub fn g2_hom_spatial(
    stat: ParticleStatistics,
    l: f64,
    lambda: f64,
    z: f64,
    d: f64,
    dx: f64,
    polarization: Polarization,
    beta: f64,
) -> Result<f64> {
    check_finite(&[("l", l), ("lambda", lambda), ("z", z), ("d", d), ("dx", dx), ("beta", beta)])?;
    if l <= 0.0 {
        return Err(Error::SourceLengthNotPositive);
    }
    if lambda <= 0.0 {
        return Err(Error::WavelengthNotPositive);
    }
    if z <= 0.0 {
        return Err(Error::DistanceNotPositive);
    }
    if d < 0.0 {
        return Err(Error::SeparationNegative);
    }
    let s = sinc(std::f64::consts::PI * l * dx / (lambda * z));
    let s2 = s * s;
    let fermion = match polarization {
        Polarization::Parallel => {
            let phase = 2.0 * std::f64::consts::PI * d * dx / (lambda * z);
            1.0 - 0.5 * beta * s2 + 0.5 * beta * s2 * phase.cos()
        }
        Polarization::Orthogonal => 1.0 - 0.5 * beta * s2,
    };
    Ok(from_fermion(stat, fermion))
}

/// A fully specified closed-form curve: statistics, geometry, source,
/// polarization (HOM only), modulation depth, and the scan axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticModel {
    pub statistics: ParticleStatistics,
    pub geometry: GeometrySpec,
    pub source: SourceSpec,
    pub polarization: Option<Polarization>,
    /// Modulation depth in [0, 1]; 1 is the ideal interferometer.
    pub beta: f64,
    pub axis: AxisKind,
}

impl AnalyticModel {
    pub fn new(
        statistics: ParticleStatistics,
        geometry: GeometrySpec,
        source: SourceSpec,
        polarization: Option<Polarization>,
        beta: f64,
        axis: AxisKind,
    ) -> Result<Self> {
        source.validate()?;
        geometry.validate()?;
        if !beta.is_finite() || !(0.0..=1.0).contains(&beta) {
            return Err(Error::BetaOutOfRange);
        }
        match (geometry.is_hom(), polarization) {
            (true, None) => return Err(Error::PolarizationMissing),
            (false, Some(_)) => return Err(Error::PolarizationUnexpected),
            _ => {}
        }
        if geometry.is_hom() && axis == AxisKind::TimeDifferenceS {
            return Err(Error::WrongAxis("hom", "position_difference_m"));
        }
        Ok(AnalyticModel { statistics, geometry, source, polarization, beta, axis })
    }

    /// Evaluates the curve at one scan coordinate (seconds or meters,
    /// matching `axis`).
    pub fn eval(&self, coordinate: f64) -> Result<f64> {
        match self.geometry {
            GeometrySpec::Hbt { z } => match self.axis {
                AxisKind::TimeDifferenceS => g2_hbt_temporal(
                    self.statistics,
                    self.source.bandwidth_dnu,
                    coordinate,
                    self.beta,
                ),
                AxisKind::PositionDifferenceM => g2_hbt_spatial(
                    self.statistics,
                    self.source.length_l,
                    self.source.wavelength_lambda,
                    z,
                    coordinate,
                    self.beta,
                ),
            },
            GeometrySpec::Hom { z, d } => g2_hom_spatial(
                self.statistics,
                self.source.length_l,
                self.source.wavelength_lambda,
                z,
                d,
                coordinate,
                self.polarization.expect("validated at construction"),
                self.beta,
            ),
        }
    }

    /// Samples the closed form on the given strictly increasing grid.
    pub fn sample(&self, grid: &[f64]) -> Result<CoherenceCurve> {
        let mut points = Vec::with_capacity(grid.len());
        for &c in grid {
            points.push(CurvePoint { coordinate: c, g2: self.eval(c)?, stderr: 0.0, flagged: false });
        }
        CoherenceCurve::new(
            self.axis,
            points,
            CurveMeta {
                statistics: self.statistics,
                geometry: self.geometry,
                source: self.source,
                generator: Generator::Analytic,
                seed: None,
            },
        )
    }

    /// Same model with different statistics; used to emit matched triples.
    pub fn with_statistics(&self, statistics: ParticleStatistics) -> Self {
        AnalyticModel { statistics, ..*self }
    }
}

/// Symmetric grid of `n` points over `[-half, half]` (n odd puts a point at 0).
pub fn symmetric_grid(half: f64, n: usize) -> Vec<f64> {
    linspace(-half, half, n)
}

pub fn linspace(from: f64, to: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2, "linspace needs at least two points");
    let step = (to - from) / (n - 1) as f64;
    (0..n).map(|i| from + step * i as f64).collect()
}

/// Interference visibility (max - min)/(max + min) over the curve's sampled
/// g2 values.
pub fn visibility(curve: &CoherenceCurve) -> Result<f64> {
    if curve.points.is_empty() {
        return Err(Error::EmptyCurve);
    }
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for v in curve.values() {
        min = min.min(v);
        max = max.max(v);
    }
    visibility_of_extremes(min, max)
}

pub(crate) fn visibility_of_extremes(min: f64, max: f64) -> Result<f64> {
    if max + min <= 0.0 {
        return Err(Error::DegenerateRange);
    }
    Ok((max - min) / (max + min))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ExtremumKind {
    Min,
    Max,
}

/// Dense probe followed by golden-section refinement of `f` over `[a, b]`.
/// The refinement narrows the bracket around the best probe to `tol`.
pub(crate) fn refine_extremum(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    n_probe: usize,
    tol: f64,
    kind: ExtremumKind,
) -> (f64, f64) {
    let better = |x: f64, y: f64| match kind {
        ExtremumKind::Min => x < y,
        ExtremumKind::Max => x > y,
    };
    let grid = linspace(a, b, n_probe);
    let mut best_i = 0;
    let mut best_v = f(grid[0]);
    for (i, &x) in grid.iter().enumerate().skip(1) {
        let v = f(x);
        if better(v, best_v) {
            best_v = v;
            best_i = i;
        }
    }
    // Golden-section search inside the bracketing neighbors of the best probe.
    let mut lo = grid[best_i.saturating_sub(1)];
    let mut hi = grid[(best_i + 1).min(grid.len() - 1)];
    const INVPHI: f64 = 0.618_033_988_749_894_9;
    let mut x1 = hi - INVPHI * (hi - lo);
    let mut x2 = lo + INVPHI * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if better(f1, f2) {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INVPHI * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INVPHI * (hi - lo);
            f2 = f(x2);
        }
    }
    let xm = 0.5 * (lo + hi);
    let fm = f(xm);
    if better(best_v, fm) {
        (grid[best_i], best_v)
    } else {
        (xm, fm)
    }
}

/// Global extremum of the closed-form curve over a scan range: the minimum
/// for fermions (depth of the dip), the maximum for bosons, and the flat
/// value for classical particles. Dense probing with `n_probe >= 100` points
/// is followed by local refinement to the axis coordinate tolerance.
pub fn curve_extremum(model: &AnalyticModel, range: (f64, f64), n_probe: usize) -> Result<(f64, f64)> {
    let (a, b) = range;
    if !a.is_finite() || !b.is_finite() || !(b > a) {
        return Err(Error::DegenerateRange);
    }
    if n_probe < 100 {
        return Err(Error::TooFewProbes { min: 100, got: n_probe });
    }
    let kind = match model.statistics {
        ParticleStatistics::Boson => ExtremumKind::Max,
        ParticleStatistics::Fermion | ParticleStatistics::Classical => ExtremumKind::Min,
    };
    let f = |x: f64| model.eval(x).expect("validated model evaluates everywhere");
    let tol = model.axis.coordinate_tolerance();
    Ok(refine_extremum(&f, a, b, n_probe, tol, kind))
}

/// Pointwise fermion synthesis `g_F = 2 g_C - g_B` from a boson curve and a
/// classical curve on the same grid. Standard errors combine as
/// `sqrt(4 sigma_C^2 + sigma_B^2)`; points driven below zero are kept but
/// flagged (measured coincidence counts cannot be negative).
pub fn synth_fermion_curve(boson: &CoherenceCurve, classical: &CoherenceCurve) -> Result<CoherenceCurve> {
    if boson.axis != classical.axis {
        return Err(Error::AxisMismatch);
    }
    if boson.points.len() != classical.points.len() {
        return Err(Error::CoordinateMismatch(boson.points.len().min(classical.points.len())));
    }
    let mut points = Vec::with_capacity(boson.points.len());
    for (i, (b, c)) in boson.points.iter().zip(&classical.points).enumerate() {
        if b.coordinate != c.coordinate {
            return Err(Error::CoordinateMismatch(i));
        }
        let g = 2.0 * c.g2 - b.g2;
        let stderr = (4.0 * c.stderr * c.stderr + b.stderr * b.stderr).sqrt();
        points.push(CurvePoint { coordinate: b.coordinate, g2: g, stderr, flagged: g < 0.0 });
    }
    CoherenceCurve::new(
        boson.axis,
        points,
        CurveMeta { statistics: ParticleStatistics::Fermion, ..boson.meta.clone() },
    )
}
