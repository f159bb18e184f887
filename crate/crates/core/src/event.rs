//! Detection-event-level simulation of a coincidence-counting experiment:
//! pseudothermal intensity traces, photon timestamp streams for two
//! detectors, windowed coincidence counting versus t1 - t2, normalization to
//! g2, and fermionic synthesis on the normalized histogram.
//!
//! The light model is semiclassical: a chaotic field built from `n_modes`
//! unit-amplitude complex modes with random phases and frequencies drawn
//! uniformly from a rectangular band of width `dnu`, detected as a doubly
//! stochastic (intensity-driven) point process. Two streams thinned from the
//! same trace inherit the thermal intensity correlations, which is what a
//! beam splitter in front of two detectors does.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AxisKind, CoherenceCurve, CurveMeta, CurvePoint, ParticleStatistics};

/// One complex mode of the synthesized field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub phase: f64,
    pub frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum TraceBackend {
    /// Field synthesized from a mode table; samples are computed on demand so
    /// long traces never have to be materialized.
    Modes(Vec<Mode>),
    /// Explicit sample values (tests, ingestion of recorded traces).
    Samples(Vec<f64>),
}

/// A sampled nonnegative intensity versus time. Samples live on cell
/// midpoints: sample `k` represents `[k dt, (k+1) dt)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityTrace {
    pub dt: f64,
    pub duration: f64,
    pub dnu: f64,
    pub seed: u64,
    backend: TraceBackend,
}

/// Cells per deterministic work segment of the event thinning. Fixed so the
/// output is bit-identical for any worker count.
const SEGMENT_CELLS: usize = 1 << 22;

/// sin and cos by quadrant reduction and short odd/even polynomials on
/// [-pi/4, pi/4]; absolute error ~1e-9. The thinning loop evaluates the field
/// per candidate and libm's sincos dominates its runtime otherwise.
#[inline]
fn fast_sincos(theta: f64) -> (f64, f64) {
    let t = theta * (1.0 / std::f64::consts::TAU);
    let t = t - t.round();
    let q = (t * 4.0).round();
    let x = (t - q * 0.25) * std::f64::consts::TAU;
    let x2 = x * x;
    let s = x * (1.0
        + x2 * (-1.0 / 6.0
            + x2 * (1.0 / 120.0
                + x2 * (-1.0 / 5040.0
                    + x2 * (1.0 / 362_880.0 + x2 * (-1.0 / 39_916_800.0))))));
    let c = 1.0
        + x2 * (-0.5
            + x2 * (1.0 / 24.0
                + x2 * (-1.0 / 720.0 + x2 * (1.0 / 40_320.0 + x2 * (-1.0 / 3_628_800.0)))));
    match q as i32 {
        0 => (s, c),
        1 => (c, -s),
        -1 => (-c, s),
        _ => (-s, -c),
    }
}

impl IntensityTrace {
    /// Wraps explicit samples (cell width `dt`). Rejects negative values.
    pub fn from_samples(dt: f64, samples: Vec<f64>, dnu: f64, seed: u64) -> Result<IntensityTrace> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::BadTraceExtent);
        }
        if let Some(i) = samples.iter().position(|s| !(*s >= 0.0)) {
            return Err(Error::NegativeSample(i));
        }
        let duration = dt * samples.len() as f64;
        Ok(IntensityTrace { dt, duration, dnu, seed, backend: TraceBackend::Samples(samples) })
    }

    pub fn n_cells(&self) -> usize {
        match &self.backend {
            TraceBackend::Samples(s) => s.len(),
            TraceBackend::Modes(_) => (self.duration / self.dt).ceil() as usize,
        }
    }

    /// Ensemble-mean intensity. For a synthesized field of M unit modes this
    /// is exactly M; the realized time average differs by O(1/sqrt(T dnu)),
    /// negligible for any run long enough to histogram.
    pub fn mean_intensity(&self) -> f64 {
        match &self.backend {
            TraceBackend::Modes(m) => m.len() as f64,
            TraceBackend::Samples(s) => {
                if s.is_empty() {
                    0.0
                } else {
                    s.iter().sum::<f64>() / s.len() as f64
                }
            }
        }
    }

    /// Intensity of cell `k`, evaluated at the cell midpoint.
    pub fn sample(&self, k: usize) -> f64 {
        match &self.backend {
            TraceBackend::Samples(s) => s[k],
            TraceBackend::Modes(modes) => {
                let t = (k as f64 + 0.5) * self.dt;
                let mut e = Complex64::new(0.0, 0.0);
                for m in modes {
                    e += Complex64::from_polar(
                        1.0,
                        m.phase + 2.0 * std::f64::consts::PI * m.frequency * t,
                    );
                }
                e.norm_sqr()
            }
        }
    }

    /// Materializes all samples. Synthesized cells are filled by per-mode
    /// phasor rotation, re-anchored with exact trigonometry every chunk so
    /// rounding cannot accumulate.
    pub fn samples_vec(&self) -> Vec<f64> {
        match &self.backend {
            TraceBackend::Samples(s) => s.clone(),
            TraceBackend::Modes(modes) => {
                let n = self.n_cells();
                let mut out = vec![0.0; n];
                const CHUNK: usize = 4096;
                let rot: Vec<Complex64> = modes
                    .iter()
                    .map(|m| {
                        Complex64::from_polar(
                            1.0,
                            2.0 * std::f64::consts::PI * m.frequency * self.dt,
                        )
                    })
                    .collect();
                let mut z: Vec<Complex64> = Vec::with_capacity(modes.len());
                for start in (0..n).step_by(CHUNK) {
                    let t0 = (start as f64 + 0.5) * self.dt;
                    z.clear();
                    z.extend(modes.iter().map(|m| {
                        Complex64::from_polar(
                            1.0,
                            m.phase + 2.0 * std::f64::consts::PI * m.frequency * t0,
                        )
                    }));
                    let end = (start + CHUNK).min(n);
                    for slot in out[start..end].iter_mut() {
                        let mut e = Complex64::new(0.0, 0.0);
                        for (zm, rm) in z.iter_mut().zip(&rot) {
                            e += *zm;
                            *zm *= *rm;
                        }
                        *slot = e.norm_sqr();
                    }
                }
                out
            }
        }
    }

    /// Intensity at an arbitrary time from the mode table via the fast
    /// trigonometric path; thinning-only (absolute phase error ~1e-9 rad,
    /// far below the statistical resolution of any histogram).
    fn intensity_fast(modes: &[Mode], t: f64) -> f64 {
        let mut re = 0.0;
        let mut im = 0.0;
        for m in modes {
            let (s, c) = fast_sincos(m.phase + std::f64::consts::TAU * m.frequency * t);
            re += c;
            im += s;
        }
        re * re + im * im
    }

    /// Strict upper bound on intensity in units of the mean: M for a
    /// synthesized field (all phasors aligned), max/mean for samples.
    fn majorant_ratio(&self) -> f64 {
        match &self.backend {
            TraceBackend::Modes(m) => m.len() as f64,
            TraceBackend::Samples(s) => {
                let mean = self.mean_intensity();
                if mean <= 0.0 {
                    return 0.0;
                }
                s.iter().cloned().fold(0.0f64, f64::max) / mean
            }
        }
    }
}

/// Synthesizes a pseudothermal intensity trace of the given bandwidth.
///
/// The field is a sum of `n_modes` unit-amplitude modes with independent
/// uniform phases and frequencies uniform in `[-dnu/2, dnu/2]`; the intensity
/// is its squared modulus, so the mean intensity is `n_modes` and the
/// normalized autocorrelation approaches `1 + sinc^2(pi dnu tau)`.
/// `n_modes = 1` is the coherent (constant-intensity) control; chaotic
/// statistics need at least 32 modes. `dt` must resolve the fluctuation:
/// `dt <= 1/(20 dnu)`.
pub fn generate_intensity(
    dnu: f64,
    duration: f64,
    dt: f64,
    n_modes: usize,
    seed: u64,
) -> Result<IntensityTrace> {
    if !(duration > 0.0) || !duration.is_finite() || !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::BadTraceExtent);
    }
    if !(dnu >= 0.0) || !dnu.is_finite() {
        return Err(Error::BandwidthNegative);
    }
    if n_modes != 1 && n_modes < 32 {
        return Err(Error::TraceModesTooFew(n_modes));
    }
    let max_dt = if dnu > 0.0 { 1.0 / (20.0 * dnu) } else { f64::INFINITY };
    if dt > max_dt {
        return Err(Error::UndersampledTrace { max_dt, dnu });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let modes = (0..n_modes)
        .map(|_| Mode {
            phase: rng.gen::<f64>() * 2.0 * std::f64::consts::PI,
            frequency: if dnu == 0.0 { 0.0 } else { (rng.gen::<f64>() - 0.5) * dnu },
        })
        .collect();
    Ok(IntensityTrace { dt, duration, dnu, seed, backend: TraceBackend::Modes(modes) })
}

/// Timestamps registered by one detector over `[0, duration)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventStream {
    pub detector_id: u8,
    pub timestamps: Vec<f64>,
    pub duration: f64,
}

impl EventStream {
    pub fn validate(&self) -> Result<()> {
        let mut last = f64::NEG_INFINITY;
        for &t in &self.timestamps {
            if !(t >= 0.0) || t >= self.duration || t <= last {
                return Err(Error::BadTimestamps);
            }
            last = t;
        }
        Ok(())
    }

    pub fn rate(&self) -> f64 {
        if self.duration > 0.0 {
            self.timestamps.len() as f64 / self.duration
        } else {
            0.0
        }
    }

    /// Two-column text: detector id and timestamp in seconds with 1 ps
    /// resolution. Rounding collisions are bumped by 1 ps so the stream stays
    /// strictly increasing on disk.
    pub fn write_text<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        let mut last_ps: i64 = i64::MIN;
        for &t in &self.timestamps {
            let mut ps = (t * 1e12).round() as i64;
            if ps <= last_ps {
                ps = last_ps + 1;
            }
            last_ps = ps;
            writeln!(
                w,
                "{}\t{}.{:012}",
                self.detector_id,
                ps / 1_000_000_000_000,
                ps.rem_euclid(1_000_000_000_000)
            )?;
        }
        Ok(())
    }

    /// Parses the two-column text format, keeping only rows for
    /// `detector_id`, and validates the result.
    pub fn read_text<R: std::io::BufRead>(r: R, detector_id: u8, duration: f64) -> Result<EventStream> {
        let mut timestamps = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split_whitespace();
            let id: u8 = cols
                .next()
                .ok_or_else(|| Error::Parse(format!("line {}: missing detector id", lineno + 1)))?
                .parse()
                .map_err(|_| Error::Parse(format!("line {}: bad detector id", lineno + 1)))?;
            let t: f64 = cols
                .next()
                .ok_or_else(|| Error::Parse(format!("line {}: missing timestamp", lineno + 1)))?
                .parse()
                .map_err(|_| Error::Parse(format!("line {}: bad timestamp", lineno + 1)))?;
            if id == detector_id {
                timestamps.push(t);
            }
        }
        let stream = EventStream { detector_id, timestamps, duration };
        stream.validate()?;
        Ok(stream)
    }
}

/// Draws a photon timestamp stream from an intensity trace: an inhomogeneous
/// point process with rate `mean_rate * I(t) / <I>`, piecewise constant on
/// the trace cells, optionally blurred by Gaussian timing jitter.
///
/// Synthesized traces are thinned against the strict majorant
/// `mean_rate * n_modes` so only cells actually hit by a candidate are ever
/// evaluated; a 50 s trace at nanosecond resolution never materializes.
pub fn generate_events(
    trace: &IntensityTrace,
    mean_rate: f64,
    jitter_sigma: f64,
    seed: u64,
    detector_id: u8,
) -> Result<EventStream> {
    if !(mean_rate >= 0.0) || !mean_rate.is_finite() {
        return Err(Error::NonFinite("mean_rate"));
    }
    if !(jitter_sigma >= 0.0) || !jitter_sigma.is_finite() {
        return Err(Error::JitterNegative);
    }
    if mean_rate * trace.dt > 0.1 {
        return Err(Error::RateTooHigh(mean_rate * trace.dt));
    }
    let mean = trace.mean_intensity();
    if mean_rate == 0.0 || mean <= 0.0 {
        return Ok(EventStream { detector_id, timestamps: Vec::new(), duration: trace.duration });
    }
    let mut times = match &trace.backend {
        TraceBackend::Modes(modes) => thin_by_candidates(trace, modes, mean_rate, jitter_sigma, seed),
        TraceBackend::Samples(samples) => {
            thin_per_cell(trace, samples, mean_rate, jitter_sigma, seed)
        }
    };
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times.retain(|&t| (0.0..trace.duration).contains(&t));
    // Jitter can in principle produce ties; keep strict ordering.
    for i in 1..times.len() {
        if times[i] <= times[i - 1] {
            times[i] = times[i - 1].next_up();
        }
    }
    let stream = EventStream { detector_id, timestamps: times, duration: trace.duration };
    stream.validate()?;
    Ok(stream)
}

/// Candidate thinning against the strict intensity bound: candidates arrive
/// homogeneously at `mean_rate * majorant_ratio` and are accepted with
/// probability `I(cell) / (mean * majorant_ratio)`. Exact for the
/// piecewise-constant rate; segments are deterministic in (seed, index).
fn thin_by_candidates(
    trace: &IntensityTrace,
    modes: &[Mode],
    mean_rate: f64,
    jitter_sigma: f64,
    seed: u64,
) -> Vec<f64> {
    let ratio = trace.majorant_ratio();
    let lambda = mean_rate * ratio;
    let mean = trace.mean_intensity();
    let n_cells = trace.n_cells();
    let n_segments = n_cells.div_ceil(SEGMENT_CELLS);
    let per_segment: Vec<Vec<f64>> = (0..n_segments)
        .into_par_iter()
        .map(|seg| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(seg as u64);
            let t_start = (seg * SEGMENT_CELLS) as f64 * trace.dt;
            let t_end = (((seg + 1) * SEGMENT_CELLS) as f64 * trace.dt).min(trace.duration);
            let mut out = Vec::new();
            let mut t = t_start;
            loop {
                let u: f64 = rng.gen::<f64>();
                t += -(1.0 - u).ln() / lambda;
                if t >= t_end {
                    break;
                }
                let cell = (t / trace.dt) as usize;
                if cell >= n_cells {
                    break;
                }
                let t_mid = (cell as f64 + 0.5) * trace.dt;
                let accept = IntensityTrace::intensity_fast(modes, t_mid) / (mean * ratio);
                if rng.gen::<f64>() < accept {
                    let jitter = if jitter_sigma > 0.0 {
                        jitter_sigma
                            * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                    } else {
                        0.0
                    };
                    out.push(t + jitter);
                }
            }
            out
        })
        .collect();
    per_segment.concat()
}

/// Per-cell Poisson counts with uniform placement; used for explicit sample
/// traces, where every cell is visited anyway.
fn thin_per_cell(
    trace: &IntensityTrace,
    samples: &[f64],
    mean_rate: f64,
    jitter_sigma: f64,
    seed: u64,
) -> Vec<f64> {
    let mean = trace.mean_intensity();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (k, &s) in samples.iter().enumerate() {
        let lam = mean_rate * s / mean * trace.dt;
        if lam == 0.0 {
            continue;
        }
        let n = poisson_small(&mut rng, lam);
        for _ in 0..n {
            let t = (k as f64 + rng.gen::<f64>()) * trace.dt;
            let jitter = if jitter_sigma > 0.0 {
                jitter_sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
            } else {
                0.0
            };
            out.push(t + jitter);
        }
    }
    out
}

/// Poisson draw by inversion; fine for the small per-cell means the rate
/// precondition guarantees.
fn poisson_small<R: Rng>(rng: &mut R, lambda: f64) -> u64 {
    let u: f64 = rng.gen();
    let mut p = (-lambda).exp();
    let mut cdf = p;
    let mut n = 0u64;
    while u > cdf && n < 1000 {
        n += 1;
        p *= lambda / n as f64;
        cdf += p;
    }
    n
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    /// Center of the t1 - t2 lag bin (s).
    pub center: f64,
    pub count: u64,
}

/// Windowed coincidence counts versus t1 - t2, with the singles rates needed
/// to normalize them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoincidenceHistogram {
    pub bin_width: f64,
    pub bins: Vec<HistogramBin>,
    pub total_pairs: u64,
    pub singles_rates: [f64; 2],
    pub duration: f64,
}

/// Counts pairs (t1, t2) whose lag t1 - t2 falls into bins of width
/// `bin_width` centered on 0, +-bin_width, ... out to `max_lag`. Empty
/// streams yield an all-zero histogram.
pub fn coincidence_histogram(
    s1: &EventStream,
    s2: &EventStream,
    bin_width: f64,
    max_lag: f64,
) -> Result<CoincidenceHistogram> {
    if !(bin_width > 0.0) || !bin_width.is_finite() {
        return Err(Error::BinWidthNotPositive);
    }
    if s1.duration != s2.duration {
        return Err(Error::DurationMismatch);
    }
    let k_max = (max_lag / bin_width).floor() as i64;
    let half_span = (k_max as f64 + 0.5) * bin_width;
    let n_bins = (2 * k_max + 1) as usize;
    let mut counts = vec![0u64; n_bins];
    let mut lo = 0usize;
    for &t1 in &s1.timestamps {
        while lo < s2.timestamps.len() && s2.timestamps[lo] < t1 - half_span {
            lo += 1;
        }
        for &t2 in &s2.timestamps[lo..] {
            if t2 > t1 + half_span {
                break;
            }
            let k = ((t1 - t2) / bin_width).round() as i64;
            if k.abs() <= k_max {
                counts[(k + k_max) as usize] += 1;
            }
        }
    }
    let bins = counts
        .iter()
        .enumerate()
        .map(|(i, &count)| HistogramBin { center: (i as i64 - k_max) as f64 * bin_width, count })
        .collect::<Vec<_>>();
    let total_pairs = counts.iter().sum();
    Ok(CoincidenceHistogram {
        bin_width,
        bins,
        total_pairs,
        singles_rates: [s1.rate(), s2.rate()],
        duration: s1.duration,
    })
}

/// Normalizes a coincidence histogram to g2 by the accidental level
/// `r1 r2 bin_width duration`, with Poisson standard errors (`sqrt(count)`;
/// a zero-count bin reports the one-count upper bound).
pub fn normalize_histogram(h: &CoincidenceHistogram, meta: CurveMeta) -> Result<CoherenceCurve> {
    if h.singles_rates[0] <= 0.0 || h.singles_rates[1] <= 0.0 {
        return Err(Error::ZeroSinglesRate);
    }
    let accidental = h.singles_rates[0] * h.singles_rates[1] * h.bin_width * h.duration;
    let points = h
        .bins
        .iter()
        .map(|b| CurvePoint {
            coordinate: b.center,
            g2: b.count as f64 / accidental,
            stderr: (b.count.max(1) as f64).sqrt() / accidental,
            flagged: false,
        })
        .collect();
    CoherenceCurve::new(AxisKind::TimeDifferenceS, points, meta)
}

/// Fermionic synthesis on a normalized histogram: `g_F = 2 bg - g_B` with the
/// background level measured from the data (normally 1). Bins driven below
/// zero are flagged unphysical and excluded from fits.
pub fn synth_fermion_histogram(boson: &CoherenceCurve, background_level: f64) -> Result<CoherenceCurve> {
    if !(background_level > 0.0) || !background_level.is_finite() {
        return Err(Error::BackgroundNotPositive);
    }
    let points = boson
        .points
        .iter()
        .map(|p| {
            let g = 2.0 * background_level - p.g2;
            CurvePoint { coordinate: p.coordinate, g2: g, stderr: p.stderr, flagged: g < 0.0 }
        })
        .collect();
    CoherenceCurve::new(
        boson.axis,
        points,
        CurveMeta { statistics: ParticleStatistics::Fermion, ..boson.meta.clone() },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Generator, GeometrySpec, SourceSpec};
    use approx::assert_abs_diff_eq;

    const DNU: f64 = 3.378e6;

    fn meta() -> CurveMeta {
        CurveMeta {
            statistics: ParticleStatistics::Boson,
            geometry: GeometrySpec::Hbt { z: 0.910 },
            source: SourceSpec {
                length_l: 0.55e-3,
                center_x: 0.0,
                wavelength_lambda: 780e-9,
                bandwidth_dnu: DNU,
                n_subsources: 2,
                n_modes: 64,
            },
            generator: Generator::Event,
            seed: Some(1),
        }
    }

    #[test]
    fn single_mode_trace_is_constant() {
        let trace = generate_intensity(DNU, 1e-4, 1e-8, 1, 3).unwrap();
        let samples = trace.samples_vec();
        for &s in &samples {
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn trace_preconditions_enforced() {
        assert!(matches!(
            generate_intensity(DNU, 1e-3, 1e-7, 64, 0),
            Err(Error::UndersampledTrace { .. })
        ));
        assert!(matches!(generate_intensity(DNU, 1e-3, 1e-8, 8, 0), Err(Error::TraceModesTooFew(8))));
        assert!(matches!(generate_intensity(DNU, 0.0, 1e-8, 64, 0), Err(Error::BadTraceExtent)));
    }

    #[test]
    fn thermal_trace_statistics() {
        // 50 ms at 10 ns resolution: the zero-lag autocorrelation must show
        // thermal bunching (2 - 1/M up to sampling error) and the mean
        // intensity must equal the mode count.
        let n_modes = 64;
        let trace = generate_intensity(DNU, 50e-3, 10e-9, n_modes, 11).unwrap();
        let samples = trace.samples_vec();
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let second = samples.iter().map(|s| s * s).sum::<f64>() / n;
        let g2_zero = second / (mean * mean);
        assert!((g2_zero - 2.0).abs() < 0.05, "g2(0) = {g2_zero}");
        assert!(
            (mean - n_modes as f64).abs() / (n_modes as f64) < 0.02,
            "mean intensity {mean} vs {n_modes}"
        );
    }

    #[test]
    fn trace_autocorrelation_follows_the_band_envelope() {
        let trace = generate_intensity(DNU, 50e-3, 10e-9, 64, 5).unwrap();
        let samples = trace.samples_vec();
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        // Normalized autocorrelation at a lag inside the coherence time and
        // one far outside it.
        let acf = |lag: usize| {
            let m = n - lag;
            let mut acc = 0.0;
            for i in 0..m {
                acc += samples[i] * samples[i + lag];
            }
            acc / m as f64 / (mean * mean)
        };
        let tau_c_cells = (1.0 / DNU / 10e-9) as usize;
        let expected_half = 1.0
            + crate::analytic::sinc(std::f64::consts::PI * DNU * (tau_c_cells / 2) as f64 * 10e-9)
                .powi(2);
        assert!((acf(tau_c_cells / 2) - expected_half).abs() < 0.08);
        assert!((acf(20 * tau_c_cells) - 1.0).abs() < 0.08);
    }

    #[test]
    fn constant_trace_gives_exponential_interarrivals() {
        // Homogeneous limit: Kolmogorov-Smirnov test of the inter-arrival
        // distribution against Exp(rate) at the 1% level.
        let rate = 50e3;
        let trace = generate_intensity(DNU, 2.0, 1e-8, 1, 21).unwrap();
        let stream = generate_events(&trace, rate, 0.0, 77, 1).unwrap();
        let gaps: Vec<f64> = stream.timestamps.windows(2).map(|w| w[1] - w[0]).collect();
        let mut sorted = gaps.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = sorted.len() as f64;
        let mut d: f64 = 0.0;
        for (i, &g) in sorted.iter().enumerate() {
            let cdf = 1.0 - (-rate * g).exp();
            let lo = i as f64 / n;
            let hi = (i + 1) as f64 / n;
            d = d.max((cdf - lo).abs()).max((cdf - hi).abs());
        }
        let critical = 1.63 / n.sqrt();
        assert!(d < critical, "KS statistic {d} exceeds 1% critical value {critical} (n = {n})");
    }

    #[test]
    fn zero_intensity_trace_gives_empty_stream() {
        let trace = IntensityTrace::from_samples(1e-6, vec![0.0; 1000], 0.0, 0).unwrap();
        let stream = generate_events(&trace, 1e4, 0.0, 5, 1).unwrap();
        assert!(stream.timestamps.is_empty());
        assert_abs_diff_eq!(stream.duration, 1e-3, epsilon = 1e-12);
    }

    #[test]
    fn rate_precondition_enforced() {
        let trace = generate_intensity(DNU, 1e-3, 1.4e-8, 64, 0).unwrap();
        assert!(matches!(generate_events(&trace, 1e8, 0.0, 0, 1), Err(Error::RateTooHigh(_))));
    }

    #[test]
    fn streams_are_reproducible_and_sorted() {
        let trace = generate_intensity(DNU, 50e-3, 1.4e-8, 32, 9).unwrap();
        let a = generate_events(&trace, 40e3, 0.45e-9, 123, 1).unwrap();
        let b = generate_events(&trace, 40e3, 0.45e-9, 123, 1).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        let c = generate_events(&trace, 40e3, 0.45e-9, 124, 1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn identical_streams_pile_up_in_the_central_bin() {
        let t: Vec<f64> = (0..100).map(|i| 1e-3 * (i as f64 + 0.5)).collect();
        let s = EventStream { detector_id: 1, timestamps: t, duration: 0.1 };
        let h = coincidence_histogram(&s, &s, 61e-9, 3e-6).unwrap();
        let central = h.bins[h.bins.len() / 2];
        assert_eq!(central.center, 0.0);
        assert_eq!(central.count, 100);
        assert_eq!(h.total_pairs, 100);
    }

    #[test]
    fn independent_homogeneous_streams_sit_at_the_accidental_level() {
        let rate = 20e3;
        let trace = generate_intensity(DNU, 5.0, 1e-8, 1, 31).unwrap();
        let s1 = generate_events(&trace, rate, 0.0, 1001, 1).unwrap();
        let s2 = generate_events(&trace, rate, 0.0, 1002, 2).unwrap();
        let w = 1e-6;
        let h = coincidence_histogram(&s1, &s2, w, 50e-6).unwrap();
        let expected = s1.rate() * s2.rate() * w * h.duration;
        for b in &h.bins {
            assert!(
                (b.count as f64 - expected).abs() <= 5.0 * expected.sqrt(),
                "bin at {} has {} counts, accidental level {expected:.1}",
                b.center,
                b.count
            );
        }
        // And the normalized histogram is flat at 1.
        let curve = normalize_histogram(&h, meta()).unwrap();
        for p in &curve.points {
            assert!((p.g2 - 1.0).abs() <= 5.0 * p.stderr);
        }
    }

    #[test]
    fn empty_streams_give_all_zero_histogram() {
        let s = EventStream { detector_id: 1, timestamps: vec![], duration: 1.0 };
        let h = coincidence_histogram(&s, &s, 61e-9, 3e-6).unwrap();
        assert_eq!(h.total_pairs, 0);
        assert!(h.bins.iter().all(|b| b.count == 0));
        assert!(matches!(normalize_histogram(&h, meta()), Err(Error::ZeroSinglesRate)));
    }

    #[test]
    fn thermal_streams_bunch_and_wide_bins_wash_out() {
        // Two detectors thinned from one thermal trace: g2(0) ~ 2 - 1/M with
        // narrow bins, and averaged down to 1 + mean(sinc^2 over the window)
        // when the bin is as wide as the coherence time. The washout is the
        // mechanism that reduces measured dip visibility for slow counters.
        let m = 32.0;
        let trace = generate_intensity(DNU, 10.0, 1.4e-8, 32, 40).unwrap();
        let s1 = generate_events(&trace, 60e3, 0.0, 41, 1).unwrap();
        let s2 = generate_events(&trace, 60e3, 0.0, 42, 2).unwrap();
        let narrow = coincidence_histogram(&s1, &s2, 30e-9, 2e-6).unwrap();
        let ncurve = normalize_histogram(&narrow, meta()).unwrap();
        let center = &ncurve.points[ncurve.points.len() / 2];
        assert!(
            (center.g2 - (2.0 - 1.0 / m)).abs() < 4.0 * center.stderr.max(0.02),
            "narrow-bin g2(0) = {} +- {}",
            center.g2,
            center.stderr
        );
        let tau_c = 1.0 / DNU;
        let wide = coincidence_histogram(&s1, &s2, tau_c, 20e-6).unwrap();
        let wcurve = normalize_histogram(&wide, meta()).unwrap();
        let wcenter = &wcurve.points[wcurve.points.len() / 2];
        // mean of sinc^2(pi x) over |x| < 1/2 is 0.7736.
        let washed = 1.0 + 0.7736 - 1.0 / m;
        assert!(
            (wcenter.g2 - washed).abs() < 4.0 * wcenter.stderr.max(0.02),
            "wide-bin g2(0) = {} +- {} vs washed theory {washed:.4}",
            wcenter.g2,
            wcenter.stderr
        );
        assert!(
            wcenter.g2 < center.g2 - 0.1,
            "expected washout: wide-bin g2(0) = {} vs narrow {}",
            wcenter.g2,
            center.g2
        );
        // Far lags sit at the accidental level.
        let far = &ncurve.points[0];
        assert!((far.g2 - 1.0).abs() < 5.0 * far.stderr.max(0.02));
    }

    #[test]
    fn synthesis_flags_subzero_bins_and_keeps_background() {
        let trace = generate_intensity(DNU, 10.0, 1.4e-8, 32, 50).unwrap();
        let s1 = generate_events(&trace, 40e3, 0.0, 51, 1).unwrap();
        let s2 = generate_events(&trace, 40e3, 0.0, 52, 2).unwrap();
        let h = coincidence_histogram(&s1, &s2, 61e-9, 3e-6).unwrap();
        let boson = normalize_histogram(&h, meta()).unwrap();
        let fermion = synth_fermion_histogram(&boson, 1.0).unwrap();
        for (b, f) in boson.points.iter().zip(&fermion.points) {
            assert_abs_diff_eq!(f.g2, 2.0 - b.g2, epsilon = 1e-12);
            assert_eq!(f.flagged, f.g2 < 0.0);
            assert_eq!(f.stderr, b.stderr);
        }
        // Far lag: g_B ~ 1 so g_F ~ 1.
        let far = &fermion.points[0];
        assert!((far.g2 - 1.0).abs() < 5.0 * far.stderr.max(0.02));
        assert!(matches!(synth_fermion_histogram(&boson, 0.0), Err(Error::BackgroundNotPositive)));
    }

    #[test]
    fn stream_text_round_trips_at_picosecond_resolution() {
        let trace = generate_intensity(DNU, 10e-3, 1.4e-8, 32, 60).unwrap();
        let stream = generate_events(&trace, 50e3, 0.45e-9, 61, 2).unwrap();
        let mut buf = Vec::new();
        stream.write_text(&mut buf).unwrap();
        let parsed = EventStream::read_text(std::io::Cursor::new(&buf), 2, stream.duration).unwrap();
        assert_eq!(parsed.timestamps.len(), stream.timestamps.len());
        for (a, b) in parsed.timestamps.iter().zip(&stream.timestamps) {
            assert!((a - b).abs() <= 1.0e-12 + 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn sample_and_chunked_synthesis_agree() {
        let trace = generate_intensity(DNU, 1e-4, 1e-8, 64, 70).unwrap();
        let samples = trace.samples_vec();
        for k in [0usize, 1, 4095, 4096, 9999] {
            assert_abs_diff_eq!(samples[k], trace.sample(k), epsilon = 1e-8);
        }
    }

    #[test]
    fn fast_trig_matches_libm_over_huge_arguments() {
        // The thinning path sees phases up to ~2 pi * dnu * duration; make
        // sure the reduced polynomial stays accurate there.
        // The turn-count multiplication loses |theta| * eps of phase, which
        // bounds any reduction scheme working in f64.
        for i in 0..10_000 {
            let theta = (i as f64 - 5000.0) * 52_917.333 + i as f64 * 0.001;
            let (s, c) = fast_sincos(theta);
            let tol = 1e-9 + theta.abs() * 2e-16;
            assert_abs_diff_eq!(s, theta.sin(), epsilon = tol);
            assert_abs_diff_eq!(c, theta.cos(), epsilon = tol);
        }
    }

    #[test]
    fn fast_intensity_matches_exact_sampling() {
        let trace = generate_intensity(DNU, 1e-3, 1.4e-8, 48, 90).unwrap();
        if let TraceBackend::Modes(modes) = &trace.backend {
            for k in [0usize, 17, 1000, 50_000] {
                let t = (k as f64 + 0.5) * trace.dt;
                let fast = IntensityTrace::intensity_fast(modes, t);
                assert_abs_diff_eq!(fast, trace.sample(k), epsilon = 1e-5);
            }
        } else {
            panic!("expected synthesized trace");
        }
    }
}
