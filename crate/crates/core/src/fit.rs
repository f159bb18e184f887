//! Deterministic nonlinear least-squares fitting of the closed-form curve
//! models to simulated or ingested g2 data: recovers bandwidth (or coherence
//! time), source size, source separation, modulation depth and background.
//!
//! The minimizer is a damped Gauss-Newton scheme with analytically coded
//! Jacobians and box bounds. A step is only ever accepted if it lowers the
//! weighted cost, and all arithmetic is seed-free, so identical inputs give
//! bit-identical results. Because the oscillatory separation parameter of the
//! two-source model makes the cost landscape multimodal, the supplied (or
//! auto-derived) initial point is first refined by a deterministic dense
//! probe of the shape parameters before Gauss-Newton takes over.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::analytic::{dsinc, refine_extremum, sinc, visibility_of_extremes, ExtremumKind};
use crate::error::{Error, Result};
use crate::model::{AxisKind, CoherenceCurve, FitResult, ModelId, ParticleStatistics};

const MAX_ITERATIONS_DEFAULT: usize = 500;
const STEP_TOL: f64 = 1e-10;
const COST_TOL: f64 = 1e-12;
/// sinc^2 drops to 1/2 at this argument.
const SINC_HALF_POWER: f64 = 1.391_557_377_204_577;

/// One free parameter: initial value and finite box bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreeParam {
    pub name: String,
    pub init: f64,
    pub lo: f64,
    pub hi: f64,
}

impl FreeParam {
    pub fn new(name: &str, init: f64, lo: f64, hi: f64) -> FreeParam {
        FreeParam { name: name.to_string(), init, lo, hi }
    }
}

/// Fit target: which closed form, which statistics (sets the feature sign;
/// classical curves have nothing to fit), fixed parameters (wavelength and
/// distance are always fixed - the geometry is known), and the free
/// parameters with bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitModelSpec {
    pub model_id: ModelId,
    pub statistics: ParticleStatistics,
    pub fixed: BTreeMap<String, f64>,
    pub free: Vec<FreeParam>,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
}

fn default_max_iterations() -> usize {
    MAX_ITERATIONS_DEFAULT
}

/// Canonical parameter order of each model; free parameters must follow it.
pub fn canonical_params(model_id: ModelId) -> &'static [&'static str] {
    match model_id {
        ModelId::HbtTemporal => &["dnu_hz", "beta", "background"],
        ModelId::HbtSpatial => &["l_m", "beta", "background"],
        ModelId::HomParallel => &["l_m", "d_m", "beta", "background"],
        ModelId::HomOrthogonal => &["l_m", "beta", "background"],
    }
}

fn needs_geometry(model_id: ModelId) -> bool {
    model_id != ModelId::HbtTemporal
}

fn expected_axis(model_id: ModelId) -> AxisKind {
    match model_id {
        ModelId::HbtTemporal => AxisKind::TimeDifferenceS,
        _ => AxisKind::PositionDifferenceM,
    }
}

impl FitModelSpec {
    /// Validates the spec: known parameter names in canonical order, finite
    /// bounds, required fixed geometry present.
    pub fn validate(&self) -> Result<()> {
        if self.statistics == ParticleStatistics::Classical {
            return Err(Error::ClassicalFit);
        }
        let canonical = canonical_params(self.model_id);
        let mut expected = canonical.iter().filter(|n| !self.fixed.contains_key(**n));
        for p in &self.free {
            match expected.next() {
                Some(&name) if name == p.name => {}
                _ => return Err(Error::UnknownParameter(p.name.clone())),
            }
            if !p.lo.is_finite() || !p.hi.is_finite() || !(p.lo < p.hi) || !p.init.is_finite() {
                return Err(Error::BadBounds(p.name.clone()));
            }
        }
        if let Some(missing) = expected.next() {
            return Err(Error::UnknownParameter(format!("{missing} neither free nor fixed")));
        }
        if needs_geometry(self.model_id) {
            for key in ["lambda_m", "z_m"] {
                match self.fixed.get(key) {
                    Some(v) if v.is_finite() && *v > 0.0 => {}
                    _ => return Err(Error::UnknownParameter(format!("fixed {key} required"))),
                }
            }
        }
        Ok(())
    }

    /// Builds a spec with data-driven initial values and bounds:
    /// the background from the far-range median, the depth from the central
    /// feature, the width parameter from the half-depth point, and the
    /// two-source separation from an even-cosine transform of the residual
    /// oscillation.
    pub fn auto(
        model_id: ModelId,
        statistics: ParticleStatistics,
        curve: &CoherenceCurve,
        lambda: f64,
        z: f64,
    ) -> Result<FitModelSpec> {
        if statistics == ParticleStatistics::Classical {
            return Err(Error::ClassicalFit);
        }
        if curve.axis != expected_axis(model_id) {
            return Err(Error::WrongAxis(model_id.label(), expected_axis(model_id).label()));
        }
        let pts: Vec<(f64, f64)> = curve
            .points
            .iter()
            .filter(|p| !p.flagged)
            .map(|p| (p.coordinate, p.g2))
            .collect();
        if pts.is_empty() {
            return Err(Error::EmptyCurve);
        }
        let x_max = pts.iter().map(|(x, _)| x.abs()).fold(0.0f64, f64::max);
        let sign = if statistics == ParticleStatistics::Fermion { -1.0 } else { 1.0 };

        // Background: median over the outer quarter of the scan.
        let mut outer: Vec<f64> = pts
            .iter()
            .filter(|(x, _)| x.abs() >= 0.75 * x_max)
            .map(|&(_, g)| g)
            .collect();
        if outer.is_empty() {
            outer = pts.iter().map(|&(_, g)| g).collect();
        }
        outer.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let bg = outer[outer.len() / 2];

        // Depth of the central feature.
        let central = pts
            .iter()
            .min_by(|a, b| a.0.abs().partial_cmp(&b.0.abs()).unwrap())
            .map(|&(_, g)| g)
            .unwrap();
        let depth = match model_id {
            // The two-source beat is flat at the center; take the largest
            // excursion instead.
            ModelId::HomParallel => pts.iter().map(|&(_, g)| (g - bg).abs()).fold(0.0f64, f64::max),
            _ => (sign * (central - bg)).max(0.0),
        };
        let beta0 = match model_id {
            ModelId::HomOrthogonal => (2.0 * depth).clamp(0.05, 1.0),
            _ => depth.clamp(0.05, 1.0),
        };

        // Width parameter from the first point past half depth.
        let mut by_abs: Vec<(f64, f64)> = pts.iter().map(|&(x, g)| (x.abs(), g)).collect();
        by_abs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let half_x = by_abs
            .iter()
            .find(|&&(x, g)| x > 0.0 && (g - bg).abs() <= 0.5 * depth.max(1e-12))
            .map(|&(x, _)| x)
            .unwrap_or(0.5 * x_max)
            .max(x_max * 1e-3);

        let mut free = Vec::new();
        match model_id {
            ModelId::HbtTemporal => {
                let dnu0 = SINC_HALF_POWER / (std::f64::consts::PI * half_x);
                free.push(FreeParam::new("dnu_hz", dnu0, dnu0 / 30.0, dnu0 * 30.0));
            }
            ModelId::HbtSpatial | ModelId::HomOrthogonal | ModelId::HomParallel => {
                let l0 = SINC_HALF_POWER * lambda * z / (std::f64::consts::PI * half_x);
                free.push(FreeParam::new("l_m", l0, l0 / 30.0, l0 * 30.0));
            }
        }
        if model_id == ModelId::HomParallel {
            let d0 = dominant_separation(&pts, bg, lambda, z);
            let spacing = min_spacing(&pts).max(x_max * 1e-6);
            let d_nyq = lambda * z / (2.0 * spacing);
            free.push(FreeParam::new("d_m", d0, 0.0, d_nyq.max(3.0 * d0)));
        }
        free.push(FreeParam::new("beta", beta0, 1e-3, 1.0));
        free.push(FreeParam::new("background", bg.max(1e-6), 0.2 * bg.max(1e-6), 5.0 * bg.max(1e-6)));

        let mut fixed = BTreeMap::new();
        if needs_geometry(model_id) {
            fixed.insert("lambda_m".to_string(), lambda);
            fixed.insert("z_m".to_string(), z);
        }
        let spec = FitModelSpec {
            model_id,
            statistics,
            fixed,
            free,
            max_iterations: MAX_ITERATIONS_DEFAULT,
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn min_spacing(pts: &[(f64, f64)]) -> f64 {
    let mut xs: Vec<f64> = pts.iter().map(|&(x, _)| x).collect();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
}

/// Even-cosine transform of the residual oscillation: scans trial source
/// separations and returns the one whose cosine projects strongest onto the
/// detrended residual. The slowly varying sinc^2 envelope is removed by a
/// moving average first; its own frequency content would otherwise swamp the
/// beat at small separations.
fn dominant_separation(pts: &[(f64, f64)], bg: f64, lambda: f64, z: f64) -> f64 {
    let spacing = min_spacing(pts);
    let x_max = pts.iter().map(|(x, _)| x.abs()).fold(0.0f64, f64::max);
    if !spacing.is_finite() || x_max == 0.0 {
        return 0.0;
    }
    let mut sorted: Vec<(f64, f64)> = pts.to_vec();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let n_pts = sorted.len();
    let half_window = (n_pts / 16).max(2);
    let residual: Vec<(f64, f64)> = (0..n_pts)
        .map(|i| {
            let lo = i.saturating_sub(half_window);
            let hi = (i + half_window + 1).min(n_pts);
            let local: f64 = sorted[lo..hi].iter().map(|&(_, g)| g).sum::<f64>() / (hi - lo) as f64;
            (sorted[i].0, sorted[i].1 - local)
        })
        .collect();
    let _ = bg;
    let d_nyq = lambda * z / (2.0 * spacing);
    let d_res = lambda * z / (8.0 * x_max);
    let n = ((d_nyq / d_res) as usize).clamp(16, 4000);
    let mut best = (0.0, 0.0);
    for i in 2..=n {
        let d = d_nyq * i as f64 / n as f64;
        let mut proj = 0.0;
        for &(x, r) in &residual {
            proj += r * (2.0 * std::f64::consts::PI * d * x / (lambda * z)).cos();
        }
        if proj.abs() > best.1 {
            best = (d, proj.abs());
        }
    }
    best.0
}

/// Resolved model: canonical parameter vector plus fixed geometry, with
/// value and analytic gradient per canonical parameter.
#[derive(Debug, Clone, Copy)]
struct ResolvedModel {
    model_id: ModelId,
    sign: f64,
    lambda: f64,
    z: f64,
}

impl ResolvedModel {
    fn from_spec(spec: &FitModelSpec) -> ResolvedModel {
        ResolvedModel {
            model_id: spec.model_id,
            sign: if spec.statistics == ParticleStatistics::Fermion { -1.0 } else { 1.0 },
            lambda: spec.fixed.get("lambda_m").copied().unwrap_or(1.0),
            z: spec.fixed.get("z_m").copied().unwrap_or(1.0),
        }
    }

    fn value(&self, p: &[f64], x: f64) -> f64 {
        let s = self.sign;
        match self.model_id {
            ModelId::HbtTemporal => {
                let (dnu, beta, bg) = (p[0], p[1], p[2]);
                let u = sinc(std::f64::consts::PI * dnu * x);
                bg + s * beta * u * u
            }
            ModelId::HbtSpatial => {
                let (l, beta, bg) = (p[0], p[1], p[2]);
                let u = sinc(std::f64::consts::PI * l * x / (self.z * self.lambda));
                bg + s * beta * u * u
            }
            ModelId::HomOrthogonal => {
                let (l, beta, bg) = (p[0], p[1], p[2]);
                let u = sinc(std::f64::consts::PI * l * x / (self.z * self.lambda));
                bg + s * 0.5 * beta * u * u
            }
            ModelId::HomParallel => {
                let (l, d, beta, bg) = (p[0], p[1], p[2], p[3]);
                let u = sinc(std::f64::consts::PI * l * x / (self.z * self.lambda));
                let phi = 2.0 * std::f64::consts::PI * d * x / (self.lambda * self.z);
                bg + s * 0.5 * beta * u * u * (1.0 - phi.cos())
            }
        }
    }

    /// Gradient with respect to the canonical parameters.
    fn gradient(&self, p: &[f64], x: f64, out: &mut [f64]) {
        let s = self.sign;
        match self.model_id {
            ModelId::HbtTemporal => {
                let (dnu, beta, _) = (p[0], p[1], p[2]);
                let arg = std::f64::consts::PI * dnu * x;
                let u = sinc(arg);
                let du = dsinc(arg);
                out[0] = s * beta * 2.0 * u * du * std::f64::consts::PI * x;
                out[1] = s * u * u;
                out[2] = 1.0;
            }
            ModelId::HbtSpatial => {
                let (l, beta, _) = (p[0], p[1], p[2]);
                let scale = std::f64::consts::PI * x / (self.z * self.lambda);
                let arg = scale * l;
                let u = sinc(arg);
                let du = dsinc(arg);
                out[0] = s * beta * 2.0 * u * du * scale;
                out[1] = s * u * u;
                out[2] = 1.0;
            }
            ModelId::HomOrthogonal => {
                let (l, beta, _) = (p[0], p[1], p[2]);
                let scale = std::f64::consts::PI * x / (self.z * self.lambda);
                let arg = scale * l;
                let u = sinc(arg);
                let du = dsinc(arg);
                out[0] = s * 0.5 * beta * 2.0 * u * du * scale;
                out[1] = s * 0.5 * u * u;
                out[2] = 1.0;
            }
            ModelId::HomParallel => {
                let (l, d, beta, _) = (p[0], p[1], p[2], p[3]);
                let scale = std::f64::consts::PI * x / (self.z * self.lambda);
                let arg = scale * l;
                let u = sinc(arg);
                let du = dsinc(arg);
                let phi = 2.0 * d * scale;
                let env = 1.0 - phi.cos();
                out[0] = s * 0.5 * beta * env * 2.0 * u * du * scale;
                out[1] = s * 0.5 * beta * u * u * phi.sin() * 2.0 * scale;
                out[2] = s * 0.5 * u * u * env;
                out[3] = 1.0;
            }
        }
    }
}

/// Name-to-slot mapping between free parameters and the canonical vector.
struct Layout {
    /// canonical index of each free parameter
    free_slots: Vec<usize>,
    /// full canonical vector template with fixed values filled in
    template: Vec<f64>,
    names: Vec<String>,
}

impl Layout {
    fn new(spec: &FitModelSpec) -> Layout {
        let canonical = canonical_params(spec.model_id);
        let mut template = vec![0.0; canonical.len()];
        let mut free_slots = Vec::new();
        let mut names = Vec::new();
        for (i, &name) in canonical.iter().enumerate() {
            if let Some(v) = spec.fixed.get(name) {
                template[i] = *v;
            } else {
                free_slots.push(i);
                names.push(name.to_string());
            }
        }
        Layout { free_slots, template, names }
    }

    fn full(&self, free: &[f64]) -> Vec<f64> {
        let mut p = self.template.clone();
        for (slot, v) in self.free_slots.iter().zip(free) {
            p[*slot] = *v;
        }
        p
    }
}

struct Data {
    x: Vec<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
}

fn extract_data(curve: &CoherenceCurve, n_free: usize) -> Result<Data> {
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut sigma = Vec::new();
    for p in &curve.points {
        if p.flagged {
            continue;
        }
        x.push(p.coordinate);
        y.push(p.g2);
        sigma.push(p.stderr);
    }
    if x.len() < n_free + 2 {
        return Err(Error::TooFewPoints { need: n_free + 2, free: n_free, got: x.len() });
    }
    // Weighted when every point carries a positive stderr, unweighted
    // otherwise.
    let weighted = sigma.iter().all(|s| *s > 0.0);
    let w = if weighted { sigma.iter().map(|s| 1.0 / (s * s)).collect() } else { vec![1.0; x.len()] };
    Ok(Data { x, y, w })
}

fn cost(model: &ResolvedModel, layout: &Layout, data: &Data, free: &[f64]) -> f64 {
    let p = layout.full(free);
    let mut acc = 0.0;
    for i in 0..data.x.len() {
        let r = model.value(&p, data.x[i]) - data.y[i];
        acc += data.w[i] * r * r;
    }
    acc
}

/// Solves `a x = b` for a small symmetric positive-definite system in place.
/// Returns None if the Cholesky factorization breaks down.
fn cholesky_solve(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i][j];
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return None;
                }
                l[i][j] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    let mut yv = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i][k] * yv[k];
        }
        yv[i] = sum / l[i][i];
    }
    let mut xv = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = yv[i];
        for k in i + 1..n {
            sum -= l[k][i] * xv[k];
        }
        xv[i] = sum / l[i][i];
    }
    Some(xv)
}

fn inverse_spd(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut inv = vec![vec![0.0; n]; n];
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let col = cholesky_solve(a, &e)?;
        for i in 0..n {
            inv[i][j] = col[i];
        }
    }
    Some(inv)
}

/// Deterministic dense refinement of the multimodal shape parameters before
/// Gauss-Newton: scans each shape parameter (jointly for the two-source
/// model, whose size and separation interact) over a window around the
/// initial value, keeping whatever achieves the lowest cost. The initial
/// point itself is always a candidate, so the probe can only improve it.
fn probe_shape_params(
    model: &ResolvedModel,
    layout: &Layout,
    data: &Data,
    free: &mut [f64],
    bounds: &[(f64, f64)],
) {
    let shape: &[&str] = match model.model_id {
        ModelId::HbtTemporal => &["dnu_hz"],
        ModelId::HbtSpatial | ModelId::HomOrthogonal => &["l_m"],
        ModelId::HomParallel => &["l_m", "d_m"],
    };
    let idx: Vec<usize> = shape
        .iter()
        .filter_map(|name| layout.names.iter().position(|n| n == name))
        .collect();
    if idx.is_empty() {
        return;
    }
    let linear_window = |i: usize, n: usize| -> Vec<f64> {
        let p0 = free[idx[i]];
        let (lo, hi) = bounds[idx[i]];
        let a = (0.45 * p0).max(lo);
        let b = (2.2 * p0).min(hi).max(a + f64::EPSILON * (1.0 + p0.abs()));
        let mut grid: Vec<f64> = (0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect();
        grid.push(p0);
        grid
    };
    // The half-depth heuristic badly overestimates the source size of the
    // beating two-source curve, so its probe window is wide and log-spaced.
    let log_window = |i: usize, n: usize| -> Vec<f64> {
        let p0 = free[idx[i]].abs().max(1e-300);
        let (lo, hi) = bounds[idx[i]];
        let a = (p0 / 12.0).max(lo.max(p0 * 1e-6));
        let b = (3.0 * p0).min(hi).max(a * (1.0 + 1e-12));
        let ratio = (b / a).ln();
        let mut grid: Vec<f64> =
            (0..n).map(|k| a * (ratio * k as f64 / (n - 1) as f64).exp()).collect();
        grid.push(free[idx[i]]);
        grid
    };
    // Separation dimension: global scan at beat-resolving resolution. The
    // cost is periodic in d with lobes spaced ~ lambda z / (2 x_max), so the
    // grid must sample at least twice per lobe over the whole admissible
    // range; a merely local window around the initial guess can miss the
    // true beat entirely.
    let d_grid = |i: usize| -> Vec<f64> {
        let (lo, hi) = bounds[idx[i]];
        let x_max = data.x.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let spacing = {
            let mut xs = data.x.clone();
            xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            xs.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
        };
        let d_nyq = model.lambda * model.z / (2.0 * spacing.max(1e-300));
        let a = lo.max(0.0);
        let b = hi.min(d_nyq).max(a + f64::EPSILON);
        let step = model.lambda * model.z / (8.0 * x_max.max(1e-300));
        let n = (((b - a) / step) as usize).clamp(64, 1200);
        let mut grid: Vec<f64> = (0..=n).map(|k| a + (b - a) * k as f64 / n as f64).collect();
        grid.push(free[idx[i]]);
        grid
    };
    let mut best = free.to_vec();
    let mut best_cost = cost(model, layout, data, free);
    match idx.len() {
        1 => {
            for v in linear_window(0, 97) {
                let mut trial = free.to_vec();
                trial[idx[0]] = v;
                let c = cost(model, layout, data, &trial);
                if c < best_cost {
                    best_cost = c;
                    best = trial;
                }
            }
        }
        _ => {
            for l in log_window(0, 73) {
                for d in d_grid(1) {
                    let mut trial = free.to_vec();
                    trial[idx[0]] = l;
                    trial[idx[1]] = d;
                    let c = cost(model, layout, data, &trial);
                    if c < best_cost {
                        best_cost = c;
                        best = trial;
                    }
                }
            }
        }
    }
    free.copy_from_slice(&best);
}

/// Weighted least-squares fit of the spec's model to the curve with a damped
/// (Levenberg-regularized) Gauss-Newton iteration. Points flagged unphysical
/// are excluded. Convergence when the relative step falls below 1e-10 or the
/// relative cost change below 1e-12; after `max_iterations` the best-so-far
/// parameters are returned with `converged = false`.
pub fn fit(curve: &CoherenceCurve, spec: &FitModelSpec) -> Result<FitResult> {
    spec.validate()?;
    if curve.axis != expected_axis(spec.model_id) {
        return Err(Error::WrongAxis(spec.model_id.label(), expected_axis(spec.model_id).label()));
    }
    let model = ResolvedModel::from_spec(spec);
    let layout = Layout::new(spec);
    let data = extract_data(curve, spec.free.len())?;
    let bounds: Vec<(f64, f64)> = spec.free.iter().map(|p| (p.lo, p.hi)).collect();
    let mut free: Vec<f64> =
        spec.free.iter().map(|p| p.init.clamp(p.lo, p.hi)).collect();

    probe_shape_params(&model, &layout, &data, &mut free, &bounds);

    let k = free.len();
    let n = data.x.len();
    let mut current_cost = cost(&model, &layout, &data, &free);
    let mut converged = false;
    let mut iterations = 0;
    let mut mu = 0.0f64;
    let mut grad_full = vec![0.0; layout.template.len()];

    while iterations < spec.max_iterations {
        iterations += 1;
        // Normal equations J^T W J and J^T W r.
        let mut jtj = vec![vec![0.0; k]; k];
        let mut jtr = vec![0.0; k];
        let mut col_norm = vec![0.0; k];
        let p = layout.full(&free);
        for i in 0..n {
            let r = model.value(&p, data.x[i]) - data.y[i];
            model.gradient(&p, data.x[i], &mut grad_full);
            for a in 0..k {
                let ja = grad_full[layout.free_slots[a]];
                col_norm[a] += ja * ja;
                jtr[a] += data.w[i] * ja * r;
                for b in a..k {
                    jtj[a][b] += data.w[i] * ja * grad_full[layout.free_slots[b]];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                jtj[a][b] = jtj[b][a];
            }
        }
        if let Some(dead) = col_norm.iter().position(|&c| c == 0.0) {
            return Err(Error::SingularJacobian(layout.names[dead].clone()));
        }

        // Damped step: escalate mu until a cost-decreasing step is found.
        let mut accepted = false;
        for _ in 0..40 {
            let mut damped = jtj.clone();
            for a in 0..k {
                damped[a][a] = jtj[a][a] * (1.0 + mu) + 1e-300;
            }
            let rhs: Vec<f64> = jtr.iter().map(|g| -g).collect();
            let step = match cholesky_solve(&damped, &rhs) {
                Some(s) => s,
                None => {
                    mu = if mu == 0.0 { 1e-6 } else { mu * 10.0 };
                    continue;
                }
            };
            let trial: Vec<f64> = free
                .iter()
                .zip(&step)
                .zip(&bounds)
                .map(|((p, s), (lo, hi))| (p + s).clamp(*lo, *hi))
                .collect();
            let trial_cost = cost(&model, &layout, &data, &trial);
            if trial_cost < current_cost {
                let rel_step = trial
                    .iter()
                    .zip(&free)
                    .map(|(a, b)| (a - b).abs() / b.abs().max(1e-30))
                    .fold(0.0f64, f64::max);
                let rel_cost = (current_cost - trial_cost) / current_cost.max(1e-300);
                free = trial;
                current_cost = trial_cost;
                mu = (mu / 3.0).max(0.0);
                if mu < 1e-12 {
                    mu = 0.0;
                }
                accepted = true;
                if rel_step < STEP_TOL || rel_cost < COST_TOL {
                    converged = true;
                }
                break;
            }
            mu = if mu == 0.0 { 1e-6 } else { mu * 10.0 };
            if mu > 1e14 {
                break;
            }
        }
        if !accepted {
            // No descent direction left at any damping: the iterate is a
            // (possibly bound-constrained) minimum to working precision.
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }

    // Gauss-Newton covariance at the solution.
    let p = layout.full(&free);
    let mut jtj = vec![vec![0.0; k]; k];
    let weighted = data.w.iter().any(|w| *w != 1.0);
    for i in 0..n {
        model.gradient(&p, data.x[i], &mut grad_full);
        for a in 0..k {
            let ja = grad_full[layout.free_slots[a]];
            for b in a..k {
                jtj[a][b] += data.w[i] * ja * grad_full[layout.free_slots[b]];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            jtj[a][b] = jtj[b][a];
        }
    }
    let scale = if weighted { 1.0 } else { current_cost / (n - k) as f64 };
    let mut param_stderr = BTreeMap::new();
    if let Some(inv) = inverse_spd(&jtj) {
        for a in 0..k {
            param_stderr.insert(layout.names[a].clone(), (inv[a][a] * scale).max(0.0).sqrt());
        }
    }

    let mut params = BTreeMap::new();
    let canonical = canonical_params(spec.model_id);
    for (i, &name) in canonical.iter().enumerate() {
        params.insert(name.to_string(), p[i]);
    }
    for (kf, vf) in &spec.fixed {
        params.insert(kf.clone(), *vf);
    }
    // Report the coherence time alongside the bandwidth.
    if let Some(dnu) = params.get("dnu_hz").copied() {
        if dnu > 0.0 {
            params.insert("tau_c_s".to_string(), 1.0 / dnu);
        }
    }
    Ok(FitResult {
        model_id: spec.model_id,
        statistics: spec.statistics,
        params,
        param_stderr,
        residual_norm: current_cost.sqrt(),
        iterations,
        converged,
    })
}

/// One entry of a Jacobian check: worst relative disagreement between the
/// analytic Jacobian and central finite differences.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JacobianReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_coordinate: f64,
    pub passed: bool,
}

/// Compares the analytic Jacobian against central finite differences
/// (relative step 1e-6) at the given parameter point and probe coordinates.
/// Passes at 1e-5 relative error; near-zero derivative entries are compared
/// against a floor taken from the column scale so sinc zeros do not produce
/// spurious failures.
pub fn jacobian_check(
    spec: &FitModelSpec,
    params: &BTreeMap<String, f64>,
    probe_points: &[f64],
) -> Result<JacobianReport> {
    spec.validate()?;
    let model = ResolvedModel::from_spec(spec);
    let layout = Layout::new(spec);
    let mut free = Vec::new();
    for (name, p) in layout.names.iter().zip(&spec.free) {
        let v = params.get(name).copied().unwrap_or(p.init);
        if !(p.lo..=p.hi).contains(&v) {
            return Err(Error::BadBounds(name.clone()));
        }
        free.push(v);
    }
    let k = free.len();
    let mut analytic = vec![vec![0.0; probe_points.len()]; k];
    let mut numeric = vec![vec![0.0; probe_points.len()]; k];
    let mut grad_full = vec![0.0; layout.template.len()];
    for (j, &x) in probe_points.iter().enumerate() {
        let p = layout.full(&free);
        model.gradient(&p, x, &mut grad_full);
        for a in 0..k {
            analytic[a][j] = grad_full[layout.free_slots[a]];
        }
        for a in 0..k {
            let h = 1e-6 * free[a].abs().max(1e-12);
            let mut hi = free.clone();
            hi[a] += h;
            let mut lo = free.clone();
            lo[a] -= h;
            numeric[a][j] =
                (model.value(&layout.full(&hi), x) - model.value(&layout.full(&lo), x)) / (2.0 * h);
        }
    }
    let mut report = JacobianReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_coordinate: 0.0,
        passed: true,
    };
    for a in 0..k {
        let col_scale = analytic[a]
            .iter()
            .chain(numeric[a].iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let floor = (col_scale * 1e-3).max(1e-12);
        for (j, &x) in probe_points.iter().enumerate() {
            let denom = analytic[a][j].abs().max(numeric[a][j].abs()).max(floor);
            let rel = (analytic[a][j] - numeric[a][j]).abs() / denom;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = layout.names[a].clone();
                report.worst_coordinate = x;
            }
        }
    }
    report.passed = report.max_rel_error <= 1e-5;
    Ok(report)
}

/// Visibility of the fitted model curve (not the raw data) over the curve's
/// scanned range. The sinc-envelope models are evaluated from their exact
/// extremes (the envelope is monotone out to its first zero); the two-source
/// beat model is probed densely and refined.
pub fn extract_visibility(fit_result: &FitResult, curve: &CoherenceCurve) -> Result<f64> {
    if !fit_result.converged {
        return Err(Error::NotConverged);
    }
    let (a, b) = curve.coordinate_range();
    let spec_like = FitModelSpec {
        model_id: fit_result.model_id,
        statistics: fit_result.statistics,
        fixed: fit_result.params.clone(),
        free: Vec::new(),
        max_iterations: 1,
    };
    let model = ResolvedModel::from_spec(&spec_like);
    let canonical = canonical_params(fit_result.model_id);
    let mut p = Vec::with_capacity(canonical.len());
    for name in canonical {
        p.push(
            fit_result
                .param(name)
                .ok_or_else(|| Error::UnknownParameter((*name).to_string()))?,
        );
    }
    let beta = fit_result.param("beta").unwrap_or(1.0);
    let bg = fit_result.param("background").unwrap_or(1.0);
    let (min, max) = match fit_result.model_id {
        ModelId::HbtTemporal | ModelId::HbtSpatial | ModelId::HomOrthogonal => {
            // Envelope range of sinc^2 over the scan: 1 at the center (all
            // scans straddle zero), 0 exactly once the first zero is inside
            // the range, otherwise the edge value.
            let scale = match fit_result.model_id {
                ModelId::HbtTemporal => std::f64::consts::PI * p[0],
                _ => std::f64::consts::PI * p[0] / (model.z * model.lambda),
            };
            let x_abs = a.abs().max(b.abs());
            let edge = scale.abs() * x_abs;
            let u_max = if a <= 0.0 && b >= 0.0 {
                1.0
            } else {
                let u = sinc(scale * if a > 0.0 { a } else { b });
                u * u
            };
            let u_min = if edge >= std::f64::consts::PI {
                0.0
            } else {
                let u = sinc(edge);
                u * u
            };
            let weight = if fit_result.model_id == ModelId::HomOrthogonal { 0.5 } else { 1.0 };
            let lo = bg + model.sign * weight * beta * if model.sign < 0.0 { u_max } else { u_min };
            let hi = bg + model.sign * weight * beta * if model.sign < 0.0 { u_min } else { u_max };
            (lo, hi)
        }
        ModelId::HomParallel => {
            let f = |x: f64| model.value(&p, x);
            let (_, lo) = refine_extremum(&f, a, b, 4001, curve.axis.coordinate_tolerance(), ExtremumKind::Min);
            let (_, hi) = refine_extremum(&f, a, b, 4001, curve.axis.coordinate_tolerance(), ExtremumKind::Max);
            (lo, hi)
        }
    };
    visibility_of_extremes(min, max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::{symmetric_grid, AnalyticModel, Polarization};
    use crate::model::{CurvePoint, Generator, GeometrySpec, SourceSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LAMBDA: f64 = 780e-9;
    const Z: f64 = 0.910;
    const DNU: f64 = 3.378e6;

    fn source(l: f64) -> SourceSpec {
        SourceSpec {
            length_l: l,
            center_x: 0.0,
            wavelength_lambda: LAMBDA,
            bandwidth_dnu: DNU,
            n_subsources: 200,
            n_modes: 64,
        }
    }

    fn truth(model_id: ModelId) -> BTreeMap<String, f64> {
        let mut t = BTreeMap::new();
        match model_id {
            ModelId::HbtTemporal => {
                t.insert("dnu_hz".into(), DNU);
            }
            ModelId::HbtSpatial | ModelId::HomOrthogonal => {
                t.insert("l_m".into(), 0.55e-3);
            }
            ModelId::HomParallel => {
                t.insert("l_m".into(), 0.59e-3);
                t.insert("d_m".into(), 2.0e-3);
            }
        }
        t.insert("beta".into(), 0.85);
        t.insert("background".into(), 1.0);
        t
    }

    /// Noiseless curve generated from the model's own closed form.
    fn generate(model_id: ModelId, stat: ParticleStatistics, params: &BTreeMap<String, f64>) -> CoherenceCurve {
        let (axis, geometry, pol) = match model_id {
            ModelId::HbtTemporal => (AxisKind::TimeDifferenceS, GeometrySpec::Hbt { z: Z }, None),
            ModelId::HbtSpatial => (AxisKind::PositionDifferenceM, GeometrySpec::Hbt { z: Z }, None),
            ModelId::HomParallel => (
                AxisKind::PositionDifferenceM,
                GeometrySpec::Hom { z: Z, d: params["d_m"] },
                Some(Polarization::Parallel),
            ),
            ModelId::HomOrthogonal => (
                AxisKind::PositionDifferenceM,
                GeometrySpec::Hom { z: Z, d: 2.0e-3 },
                Some(Polarization::Orthogonal),
            ),
        };
        let mut src = source(*params.get("l_m").unwrap_or(&0.55e-3));
        if let Some(dnu) = params.get("dnu_hz") {
            src.bandwidth_dnu = *dnu;
        }
        let model = AnalyticModel::new(stat, geometry, src, pol, params["beta"], axis).unwrap();
        let grid = match axis {
            AxisKind::TimeDifferenceS => symmetric_grid(1e-6, 81),
            AxisKind::PositionDifferenceM => symmetric_grid(3e-3, 81),
        };
        let mut curve = model.sample(&grid).unwrap();
        // The closed forms have background 1; shift if the truth differs.
        let bg = params["background"];
        if bg != 1.0 {
            for p in curve.points.iter_mut() {
                p.g2 += bg - 1.0;
            }
        }
        curve
    }

    fn spec_with_inits(
        model_id: ModelId,
        stat: ParticleStatistics,
        inits: &BTreeMap<String, f64>,
    ) -> FitModelSpec {
        let mut fixed = BTreeMap::new();
        if needs_geometry(model_id) {
            fixed.insert("lambda_m".to_string(), LAMBDA);
            fixed.insert("z_m".to_string(), Z);
        }
        let free = canonical_params(model_id)
            .iter()
            .map(|&name| {
                let v = inits[name];
                match name {
                    "beta" => FreeParam::new(name, v, 1e-3, 1.0),
                    "background" => FreeParam::new(name, v, 0.2, 5.0),
                    "d_m" => FreeParam::new(name, v, 0.0, 20e-3),
                    _ => FreeParam::new(name, v, v / 30.0, v * 30.0),
                }
            })
            .collect();
        FitModelSpec { model_id, statistics: stat, fixed, free, max_iterations: 500 }
    }

    #[test]
    fn noiseless_round_trip_recovers_parameters_from_offset_starts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for model_id in ModelId::ALL {
            let stat = ParticleStatistics::Fermion;
            let t = truth(model_id);
            let curve = generate(model_id, stat, &t);
            for trial in 0..4 {
                let mut inits = t.clone();
                for (name, v) in inits.iter_mut() {
                    if name == "beta" {
                        *v = (*v * (1.0 + 0.3 * (rng.gen::<f64>() * 2.0 - 1.0))).min(1.0);
                    } else {
                        *v *= 1.0 + 0.3 * (rng.gen::<f64>() * 2.0 - 1.0);
                    }
                }
                let spec = spec_with_inits(model_id, stat, &inits);
                let result = fit(&curve, &spec).unwrap();
                assert!(result.converged, "{model_id} trial {trial} did not converge");
                for (name, expect) in &t {
                    let got = result.param(name).unwrap();
                    assert!(
                        ((got - expect) / expect).abs() < 1e-6,
                        "{model_id} trial {trial}: {name} = {got:e} vs {expect:e}"
                    );
                }
            }
        }
    }

    #[test]
    fn boson_curves_fit_too() {
        let t = truth(ModelId::HbtTemporal);
        let curve = generate(ModelId::HbtTemporal, ParticleStatistics::Boson, &t);
        let spec = spec_with_inits(ModelId::HbtTemporal, ParticleStatistics::Boson, &t);
        let result = fit(&curve, &spec).unwrap();
        assert!(result.converged);
        assert!(((result.param("dnu_hz").unwrap() - DNU) / DNU).abs() < 1e-8);
        // tau_c is reported alongside the bandwidth.
        let tau = result.param("tau_c_s").unwrap();
        assert!((tau - 1.0 / DNU).abs() / (1.0 / DNU) < 1e-8);
    }

    #[test]
    fn auto_spec_initializes_close_enough_without_hints() {
        for (model_id, stat) in [
            (ModelId::HbtTemporal, ParticleStatistics::Fermion),
            (ModelId::HbtSpatial, ParticleStatistics::Boson),
            (ModelId::HomOrthogonal, ParticleStatistics::Fermion),
            (ModelId::HomParallel, ParticleStatistics::Fermion),
        ] {
            let t = truth(model_id);
            let curve = generate(model_id, stat, &t);
            let spec = FitModelSpec::auto(model_id, stat, &curve, LAMBDA, Z).unwrap();
            let result = fit(&curve, &spec).unwrap();
            assert!(result.converged, "{model_id} auto fit did not converge");
            for (name, expect) in &t {
                let got = result.param(name).unwrap();
                assert!(
                    ((got - expect) / expect).abs() < 1e-6,
                    "{model_id} auto: {name} = {got:e} vs {expect:e}"
                );
            }
        }
    }

    #[test]
    fn weighted_noisy_fit_recovers_within_errors() {
        // sigma = 0.02 Gaussian noise, weighted fit: the recovered parameters
        // should sit within 3 reported standard errors in nearly all seeded
        // trials.
        let t = truth(ModelId::HbtSpatial);
        let clean = generate(ModelId::HbtSpatial, ParticleStatistics::Fermion, &t);
        let mut ok = 0;
        let trials = 100;
        for seed in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noisy_points: Vec<CurvePoint> = clean
                .points
                .iter()
                .map(|p| {
                    let n: f64 = rng.gen::<f64>();
                    let m: f64 = rng.gen::<f64>();
                    // Box-Muller.
                    let g = (-2.0 * n.max(1e-12).ln()).sqrt()
                        * (2.0 * std::f64::consts::PI * m).cos();
                    CurvePoint {
                        coordinate: p.coordinate,
                        g2: p.g2 + 0.02 * g,
                        stderr: 0.02,
                        flagged: false,
                    }
                })
                .collect();
            let mut meta = clean.meta.clone();
            meta.generator = Generator::Mc;
            let noisy = CoherenceCurve::new(clean.axis, noisy_points, meta).unwrap();
            let spec = spec_with_inits(ModelId::HbtSpatial, ParticleStatistics::Fermion, &t);
            let result = fit(&noisy, &spec).unwrap();
            if !result.converged {
                continue;
            }
            let within = t.iter().all(|(name, expect)| {
                let got = result.param(name).unwrap();
                let sigma = result.param_stderr.get(name).copied().unwrap_or(f64::INFINITY);
                (got - expect).abs() <= 3.0 * sigma
            });
            if within {
                ok += 1;
            }
        }
        assert!(ok >= 95, "only {ok}/{trials} noisy fits within 3 sigma");
    }

    #[test]
    fn fits_are_bit_identical() {
        let t = truth(ModelId::HomParallel);
        let curve = generate(ModelId::HomParallel, ParticleStatistics::Fermion, &t);
        let mut inits = t.clone();
        inits.insert("d_m".into(), 2.4e-3);
        let spec = spec_with_inits(ModelId::HomParallel, ParticleStatistics::Fermion, &inits);
        let a = fit(&curve, &spec).unwrap();
        let b = fit(&curve, &spec).unwrap();
        assert_eq!(a, b);
        for (k, v) in &a.params {
            assert_eq!(v.to_bits(), b.params[k].to_bits());
        }
    }

    #[test]
    fn iteration_cap_reports_non_convergence_honestly() {
        let t = truth(ModelId::HbtTemporal);
        let curve = generate(ModelId::HbtTemporal, ParticleStatistics::Fermion, &t);
        let mut inits = t.clone();
        inits.insert("dnu_hz".into(), DNU * 1.29);
        inits.insert("beta".into(), 0.5);
        let mut spec = spec_with_inits(ModelId::HbtTemporal, ParticleStatistics::Fermion, &inits);
        spec.max_iterations = 1;
        let result = fit(&curve, &spec).unwrap();
        assert!(!result.converged);
        assert_eq!(result.iterations, 1);
    }

    #[test]
    fn zero_gradient_parameter_is_reported_singular() {
        let t = truth(ModelId::HbtTemporal);
        let curve = generate(ModelId::HbtTemporal, ParticleStatistics::Fermion, &t);
        let mut inits = t.clone();
        inits.insert("beta".into(), 0.0);
        let mut spec = spec_with_inits(ModelId::HbtTemporal, ParticleStatistics::Fermion, &inits);
        // beta = 0 kills the bandwidth gradient identically.
        spec.free[1].lo = 0.0;
        spec.free[1].init = 0.0;
        match fit(&curve, &spec) {
            Err(Error::SingularJacobian(name)) => assert_eq!(name, "dnu_hz"),
            other => panic!("expected singular Jacobian, got {other:?}"),
        }
    }

    #[test]
    fn too_few_points_rejected() {
        let t = truth(ModelId::HbtTemporal);
        let full = generate(ModelId::HbtTemporal, ParticleStatistics::Fermion, &t);
        let short = CoherenceCurve::new(
            full.axis,
            full.points[..4].to_vec(),
            full.meta.clone(),
        )
        .unwrap();
        let spec = spec_with_inits(ModelId::HbtTemporal, ParticleStatistics::Fermion, &t);
        assert!(matches!(fit(&short, &spec), Err(Error::TooFewPoints { .. })));
    }

    #[test]
    fn jacobian_matches_finite_differences_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let probes_t: Vec<f64> = (0..15).map(|_| (rng.gen::<f64>() - 0.5) * 2e-6).collect();
        let probes_x: Vec<f64> = (0..15).map(|_| (rng.gen::<f64>() - 0.5) * 6e-3).collect();
        for model_id in ModelId::ALL {
            let t = truth(model_id);
            let spec = spec_with_inits(model_id, ParticleStatistics::Fermion, &t);
            let probes = if model_id == ModelId::HbtTemporal { &probes_t } else { &probes_x };
            for _ in 0..20 {
                let mut params = t.clone();
                for (name, v) in params.iter_mut() {
                    if name == "beta" {
                        *v = 0.2 + 0.75 * rng.gen::<f64>();
                    } else {
                        *v *= 0.7 + 0.6 * rng.gen::<f64>();
                    }
                }
                let report = jacobian_check(&spec, &params, probes).unwrap();
                assert!(
                    report.passed,
                    "{model_id}: max rel error {} for {} at {}",
                    report.max_rel_error, report.worst_param, report.worst_coordinate
                );
            }
        }
    }

    #[test]
    fn jacobian_reference_entries() {
        // At tau = 0 the bandwidth gradient vanishes (sinc^2 extremum) and the
        // beta gradient is exactly -sinc^2 = -1 for a fermion curve.
        let t = truth(ModelId::HbtTemporal);
        let spec = spec_with_inits(ModelId::HbtTemporal, ParticleStatistics::Fermion, &t);
        let model = ResolvedModel::from_spec(&spec);
        let mut grad = vec![0.0; 3];
        model.gradient(&[DNU, 0.85, 1.0], 0.0, &mut grad);
        assert_eq!(grad[0], 0.0);
        assert_eq!(grad[1], -1.0);
        assert_eq!(grad[2], 1.0);
        // beta gradient equals +-sinc^2 exactly away from the center too.
        let tau = 0.37e-6;
        model.gradient(&[DNU, 0.85, 1.0], tau, &mut grad);
        let u = sinc(std::f64::consts::PI * DNU * tau);
        assert_eq!(grad[1], -u * u);
    }

    #[test]
    fn visibility_of_fitted_models() {
        // Ideal fermion HBT: exactly 1. Ideal boson HBT and orthogonal HOM
        // fermion: exactly 1/3. beta = 0.7 fermion HBT: beta/(2 - beta).
        let mk_fit = |model_id, stat, beta: f64| {
            let mut t = truth(model_id);
            t.insert("beta".into(), beta);
            let curve = generate(model_id, stat, &t);
            let spec = spec_with_inits(model_id, stat, &t);
            (fit(&curve, &spec).unwrap(), curve)
        };
        let (f, c) = mk_fit(ModelId::HbtSpatial, ParticleStatistics::Fermion, 1.0);
        assert_eq!(extract_visibility(&f, &c).unwrap(), 1.0);
        let (f, c) = mk_fit(ModelId::HbtSpatial, ParticleStatistics::Boson, 1.0);
        assert_eq!(extract_visibility(&f, &c).unwrap(), 1.0 / 3.0);
        let (f, c) = mk_fit(ModelId::HomOrthogonal, ParticleStatistics::Fermion, 1.0);
        assert_eq!(extract_visibility(&f, &c).unwrap(), 1.0 / 3.0);
        let (f, c) = mk_fit(ModelId::HbtSpatial, ParticleStatistics::Fermion, 0.7);
        let vis = extract_visibility(&f, &c).unwrap();
        assert!((vis - 0.7 / 1.3).abs() < 1e-9, "vis = {vis}");
        // Unconverged fits are rejected.
        let mut broken = f.clone();
        broken.converged = false;
        assert!(matches!(extract_visibility(&broken, &c), Err(Error::NotConverged)));
    }

    #[test]
    fn classical_fit_is_rejected() {
        assert!(matches!(
            FitModelSpec::auto(
                ModelId::HbtTemporal,
                ParticleStatistics::Classical,
                &generate(ModelId::HbtTemporal, ParticleStatistics::Fermion, &truth(ModelId::HbtTemporal)),
                LAMBDA,
                Z
            ),
            Err(Error::ClassicalFit)
        ));
    }

    #[test]
    fn synthesized_flags_are_excluded_from_the_fit() {
        let t = truth(ModelId::HbtTemporal);
        let curve = generate(ModelId::HbtTemporal, ParticleStatistics::Fermion, &t);
        // Poison two points but flag them; the fit must ignore them.
        let mut pts = curve.points.clone();
        pts[40].g2 = -5.0;
        pts[40].flagged = true;
        pts[41].g2 = 7.0;
        pts[41].flagged = true;
        let poisoned = CoherenceCurve::new(curve.axis, pts, curve.meta.clone()).unwrap();
        let spec = spec_with_inits(ModelId::HbtTemporal, ParticleStatistics::Fermion, &t);
        let result = fit(&poisoned, &spec).unwrap();
        assert!(result.converged);
        assert!(((result.param("dnu_hz").unwrap() - DNU) / DNU).abs() < 1e-6);
    }
}
