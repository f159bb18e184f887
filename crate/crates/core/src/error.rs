//! Error types shared across the crate.

use thiserror::Error;

/// All failure modes of configuration validation and the numeric pipelines.
///
/// Validation errors name the first violated invariant so callers (and the
/// CLI) can report it verbatim.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("length_l must be positive")]
    SourceLengthNotPositive,
    #[error("wavelength_lambda must be positive")]
    WavelengthNotPositive,
    #[error("bandwidth_dnu must be nonnegative")]
    BandwidthNegative,
    #[error("n_subsources must be at least 2")]
    TooFewSubSources,
    #[error("n_modes must be at least 1")]
    TooFewModes,
    #[error("z must be positive")]
    DistanceNotPositive,
    #[error("d required for HOM")]
    SeparationMissing,
    #[error("d must be nonnegative")]
    SeparationNegative,
    #[error("jitter_sigma must be nonnegative")]
    JitterNegative,
    #[error("{0} must be finite")]
    NonFinite(&'static str),

    #[error("curve is empty")]
    EmptyCurve,
    #[error("curve coordinates must be strictly increasing (point {0})")]
    CoordinatesNotIncreasing(usize),
    #[error("curve stderr must be nonnegative (point {0})")]
    NegativeStderr(usize),
    #[error("curve g2 values must be finite (point {0})")]
    NonFiniteCurveValue(usize),
    #[error("curves have mismatched coordinates (point {0})")]
    CoordinateMismatch(usize),
    #[error("curve axes differ")]
    AxisMismatch,
    #[error("degenerate scan range")]
    DegenerateRange,

    #[error("polarization required for HOM")]
    PolarizationMissing,
    #[error("polarization only valid for HOM")]
    PolarizationUnexpected,
    #[error("beta must lie in [0, 1]")]
    BetaOutOfRange,

    #[error("n_realizations must be at least {min} (got {got})")]
    TooFewRealizations { min: usize, got: usize },
    #[error("n_probe must be at least {min} (got {got})")]
    TooFewProbes { min: usize, got: usize },
    #[error("singles average degenerate (below 1e-30); cannot normalize")]
    DegenerateNormalization,

    #[error("dt undersamples the intensity fluctuation: need dt <= {max_dt:.3e} s for dnu = {dnu:.3e} Hz")]
    UndersampledTrace { max_dt: f64, dnu: f64 },
    #[error("a thermal trace needs n_modes >= 32 (or exactly 1 for the coherent control); got {0}")]
    TraceModesTooFew(usize),
    #[error("trace samples must be nonnegative (sample {0})")]
    NegativeSample(usize),
    #[error("duration and dt must be positive and finite")]
    BadTraceExtent,
    #[error("mean_rate * dt = {0:.3e} exceeds 0.1; thinning invalid")]
    RateTooHigh(f64),
    #[error("singles rate is zero; cannot normalize histogram")]
    ZeroSinglesRate,
    #[error("bin_width must be positive")]
    BinWidthNotPositive,
    #[error("event streams cover different durations")]
    DurationMismatch,
    #[error("timestamps must be strictly increasing within [0, duration)")]
    BadTimestamps,
    #[error("background_level must be positive")]
    BackgroundNotPositive,

    #[error("need at least {need} points for {free} free parameters (got {got})")]
    TooFewPoints { need: usize, free: usize, got: usize },
    #[error("fit did not converge")]
    NotConverged,
    #[error("singular Jacobian: parameter {0} has zero gradient over the data")]
    SingularJacobian(String),
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("parameter {0} has non-finite or inverted bounds")]
    BadBounds(String),
    #[error("classical curves are featureless; nothing to fit")]
    ClassicalFit,
    #[error("model {0} expects axis {1}")]
    WrongAxis(&'static str, &'static str),

    #[error("{0}")]
    Io(String),
    #[error("parse error: {0}")]
    Parse(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
