//! Simulation and analysis of second-order (two-particle) coherence for
//! thermal bosons, fermions, and classical particles in HBT and HOM
//! interferometers.
//!
//! The crate is organized around three independent routes to the same
//! normalized g2 curves, plus a fitting stage:
//!
//! * [`analytic`] — closed-form coherence functions (sinc^2 envelopes, HOM
//!   beating) for all three statistics,
//! * [`mc`] — an amplitude-level Monte Carlo that builds two-particle path
//!   amplitudes from discretized sub-sources with random phases and composes
//!   them per exchange statistics,
//! * [`event`] — a detection-event pipeline (pseudothermal intensity,
//!   photon timestamps, coincidence histograms) mirroring a real
//!   coincidence-counting experiment,
//! * [`fit`] — deterministic damped Gauss-Newton fits of the closed forms to
//!   any of the above.
//!
//! The classical route is the half-sum of the boson and fermion routes;
//! equivalently the fermion curve is synthesized from boson plus classical
//! data (`g_F = 2 g_C - g_B`), which is what lets photon measurements predict
//! fermionic interference.

pub mod analytic;
pub mod error;
pub mod event;
pub mod fit;
pub mod mc;
pub mod model;

pub use error::{Error, Result};
pub use model::{
    validate_config, AxisKind, CoherenceCurve, CurveMeta, CurvePoint, DetectorSpec, FitResult,
    Generator, GeometrySpec, ModelId, ParticleStatistics, SourceSpec,
};
