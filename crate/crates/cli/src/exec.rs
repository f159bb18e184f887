//! Executors: run a resolved configuration, write its dataset (CSV + JSON
//! metadata pair), and hand back the in-memory products for callers that
//! keep processing (the figure drivers, the fit command).

use std::path::PathBuf;
use std::time::Instant;

use g2sim_core::analytic::{symmetric_grid, AnalyticModel};
use g2sim_core::event::{
    coincidence_histogram, generate_events, generate_intensity, normalize_histogram,
    synth_fermion_histogram, CoincidenceHistogram, EventStream,
};
use g2sim_core::fit::{fit, FitModelSpec};
use g2sim_core::mc::{g2_scan_multi, McRun, SourcePhaseMode};
use g2sim_core::{
    AxisKind, CoherenceCurve, CurveMeta, DetectorSpec, Error, FitResult, Generator, GeometrySpec,
    ParticleStatistics, Result, SourceSpec,
};

use crate::config::{EventsConfig, ExperimentKind, FitConfig, McConfig, RunConfig, ScanConfig};
use crate::output::{
    ensure_parent, prefixed, read_curve_csv, write_curve_csv, write_histogram_csv, Metadata,
};

/// Everything a run produced: files on disk, lines for stdout, and in-memory
/// payloads for drivers that keep going.
pub struct RunOutcome {
    pub files: Vec<PathBuf>,
    pub messages: Vec<String>,
    pub curves: Vec<(String, CoherenceCurve)>,
    pub histogram: Option<CoincidenceHistogram>,
    pub fit_result: Option<FitResult>,
    pub exit_code: i32,
}

impl RunOutcome {
    fn new() -> RunOutcome {
        RunOutcome {
            files: Vec::new(),
            messages: Vec::new(),
            curves: Vec::new(),
            histogram: None,
            fit_result: None,
            exit_code: 0,
        }
    }

}

pub fn execute(config: &RunConfig) -> Result<RunOutcome> {
    match config {
        RunConfig::Analytic(c) => execute_analytic(c),
        RunConfig::Mc(c) => execute_mc(c),
        RunConfig::Events(c) => execute_events(c),
        RunConfig::Fit(c) => execute_fit(c),
    }
}

fn source_spec(scan: &ScanConfig, n_subsources: usize, n_modes: usize) -> SourceSpec {
    SourceSpec {
        length_l: scan.l_m,
        center_x: 0.0,
        wavelength_lambda: scan.lambda_m,
        bandwidth_dnu: scan.dnu_hz,
        n_subsources,
        n_modes,
    }
}

fn geometry_spec(scan: &ScanConfig) -> GeometrySpec {
    match scan.experiment {
        ExperimentKind::HbtTemporal | ExperimentKind::HbtSpatial => {
            GeometrySpec::Hbt { z: scan.z_m }
        }
        ExperimentKind::HomSpatial => GeometrySpec::Hom { z: scan.z_m, d: scan.d_m.unwrap_or(0.0) },
    }
}

fn scan_axis(scan: &ScanConfig) -> AxisKind {
    match scan.experiment {
        ExperimentKind::HbtTemporal => AxisKind::TimeDifferenceS,
        _ => AxisKind::PositionDifferenceM,
    }
}

fn analytic_model(scan: &ScanConfig, stat: ParticleStatistics) -> Result<AnalyticModel> {
    let polarization = match scan.experiment {
        ExperimentKind::HomSpatial => Some(scan.polarization),
        _ => None,
    };
    AnalyticModel::new(
        stat,
        geometry_spec(scan),
        source_spec(scan, 2, 1),
        polarization,
        scan.beta,
        scan_axis(scan),
    )
}

fn execute_analytic(scan: &ScanConfig) -> Result<RunOutcome> {
    let start = Instant::now();
    let mut outcome = RunOutcome::new();
    let stats = scan.statistics.list();

    if let Some(at) = scan.at {
        for stat in stats {
            let v = analytic_model(scan, stat)?.eval(at)?;
            outcome.messages.push(format!("g2[{stat}]({at:e}) = {v}"));
        }
        return Ok(outcome);
    }

    ensure_parent(&scan.out)?;
    let grid = symmetric_grid(scan.scan_half, scan.points.max(2));
    let mut meta = Metadata::new(RunConfig::Analytic(scan.clone()), "analytic");
    for stat in stats {
        let curve = analytic_model(scan, stat)?.sample(&grid)?;
        let path = prefixed(&scan.out, &format!("_{}.csv", stat.label()));
        write_curve_csv(&path, &curve)?;
        meta.outputs.push(path.to_string_lossy().into_owned());
        outcome.files.push(path);
        outcome.curves.push((stat.label().to_string(), curve));
    }
    meta.timing_ms = start.elapsed().as_secs_f64() * 1e3;
    let meta_path = prefixed(&scan.out, ".meta.json");
    meta.write(&meta_path)?;
    outcome.files.push(meta_path);
    Ok(outcome)
}

fn execute_mc(cfg: &McConfig) -> Result<RunOutcome> {
    let start = Instant::now();
    let scan = &cfg.scan;
    let mut outcome = RunOutcome::new();
    let run = McRun {
        source: source_spec(scan, cfg.n_subsources, cfg.n_modes),
        geometry: geometry_spec(scan),
        polarization: scan.polarization,
        phase_mode: SourcePhaseMode::Independent,
        n_realizations: cfg.n_realizations,
        seed: scan.seed,
    };
    let stats = scan.statistics.list();

    if let Some(at) = scan.at {
        let (det1, det2) = match scan_axis(scan) {
            AxisKind::PositionDifferenceM => {
                (DetectorSpec::at_position(at), DetectorSpec::at_position(0.0))
            }
            AxisKind::TimeDifferenceS => (DetectorSpec::at_time(at), DetectorSpec::at_time(0.0)),
        };
        for stat in stats {
            let est = g2sim_core::mc::g2_mc(stat, &run, &det1, &det2)?;
            outcome
                .messages
                .push(format!("g2[{stat}]({at:e}) = {} +- {}", est.g2, est.stderr));
        }
        return Ok(outcome);
    }

    ensure_parent(&scan.out)?;
    let grid = symmetric_grid(scan.scan_half, scan.points.max(2));
    let curves = g2_scan_multi(&stats, &run, scan_axis(scan), &grid)?;
    let mut meta = Metadata::new(RunConfig::Mc(cfg.clone()), "mc");
    for curve in curves {
        let stat = curve.meta.statistics;
        let path = prefixed(&scan.out, &format!("_{}.csv", stat.label()));
        write_curve_csv(&path, &curve)?;
        meta.outputs.push(path.to_string_lossy().into_owned());
        outcome.files.push(path);
        outcome.curves.push((stat.label().to_string(), curve));
    }
    meta.timing_ms = start.elapsed().as_secs_f64() * 1e3;
    let meta_path = prefixed(&scan.out, ".meta.json");
    meta.write(&meta_path)?;
    outcome.files.push(meta_path);
    Ok(outcome)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn event_meta(cfg: &EventsConfig, stat: ParticleStatistics) -> CurveMeta {
    CurveMeta {
        statistics: stat,
        geometry: GeometrySpec::Hbt { z: 0.910 },
        source: SourceSpec {
            length_l: 1e-3,
            center_x: 0.0,
            wavelength_lambda: 780e-9,
            bandwidth_dnu: cfg.dnu_hz,
            n_subsources: 2,
            n_modes: cfg.n_modes,
        },
        generator: Generator::Event,
        seed: Some(cfg.seed),
    }
}

fn execute_events(cfg: &EventsConfig) -> Result<RunOutcome> {
    let start = Instant::now();
    let mut outcome = RunOutcome::new();
    ensure_parent(&cfg.out)?;
    let mut meta = Metadata::new(RunConfig::Events(cfg.clone()), "event");

    let (s1, s2) = if cfg.duration_s == 0.0 {
        outcome
            .messages
            .push("warning: duration is zero; emitting empty streams and an all-zero histogram".into());
        (
            EventStream { detector_id: 1, timestamps: vec![], duration: 0.0 },
            EventStream { detector_id: 2, timestamps: vec![], duration: 0.0 },
        )
    } else {
        let trace =
            generate_intensity(cfg.dnu_hz, cfg.duration_s, cfg.dt_s, cfg.n_modes, cfg.seed)?;
        let s1 = generate_events(&trace, cfg.rate_hz, cfg.jitter_s, splitmix64(cfg.seed ^ 1), 1)?;
        let s2 = generate_events(&trace, cfg.rate_hz, cfg.jitter_s, splitmix64(cfg.seed ^ 2), 2)?;
        (s1, s2)
    };
    outcome.messages.push(format!(
        "singles: D1 {} events ({:.1} Hz), D2 {} events ({:.1} Hz)",
        s1.timestamps.len(),
        s1.rate(),
        s2.timestamps.len(),
        s2.rate()
    ));

    if cfg.dump_streams {
        let path = prefixed(&cfg.out, "_streams.txt");
        let mut buf = Vec::new();
        s1.write_text(&mut buf)?;
        s2.write_text(&mut buf)?;
        std::fs::write(&path, buf)?;
        meta.outputs.push(path.to_string_lossy().into_owned());
        outcome.files.push(path);
    }

    let hist = coincidence_histogram(&s1, &s2, cfg.bin_s, cfg.max_lag_s)?;
    let hist_path = prefixed(&cfg.out, "_hist.csv");
    write_histogram_csv(&hist_path, &hist)?;
    meta.outputs.push(hist_path.to_string_lossy().into_owned());
    outcome.files.push(hist_path);
    outcome.messages.push(format!("coincidences: {} pairs in +-{:e} s", hist.total_pairs, cfg.max_lag_s));

    if hist.singles_rates[0] > 0.0 && hist.singles_rates[1] > 0.0 {
        let boson = normalize_histogram(&hist, event_meta(cfg, ParticleStatistics::Boson))?;
        let g2_path = prefixed(&cfg.out, "_g2.csv");
        write_curve_csv(&g2_path, &boson)?;
        meta.outputs.push(g2_path.to_string_lossy().into_owned());
        outcome.files.push(g2_path);
        let center = &boson.points[boson.points.len() / 2];
        outcome
            .messages
            .push(format!("g2(0) = {:.4} +- {:.4}", center.g2, center.stderr));

        if cfg.synth_fermion {
            let fermion = synth_fermion_histogram(&boson, cfg.background)?;
            let flagged = fermion.points.iter().filter(|p| p.flagged).count();
            let path = prefixed(&cfg.out, "_fermion.csv");
            write_curve_csv(&path, &fermion)?;
            meta.outputs.push(path.to_string_lossy().into_owned());
            outcome.files.push(path);
            outcome.messages.push(format!(
                "fermion synthesis: {} of {} bins below zero flagged unphysical",
                flagged,
                fermion.points.len()
            ));
            outcome.curves.push(("fermion".to_string(), fermion));
        }
        outcome.curves.push(("boson".to_string(), boson));
    } else if cfg.duration_s > 0.0 {
        outcome.messages.push("warning: a detector saw no events; skipping normalization".into());
    }

    outcome.histogram = Some(hist);
    meta.timing_ms = start.elapsed().as_secs_f64() * 1e3;
    let meta_path = prefixed(&cfg.out, ".meta.json");
    meta.write(&meta_path)?;
    outcome.files.push(meta_path);
    Ok(outcome)
}

fn execute_fit(cfg: &FitConfig) -> Result<RunOutcome> {
    let start = Instant::now();
    let mut outcome = RunOutcome::new();
    let axis = match cfg.model {
        g2sim_core::ModelId::HbtTemporal => AxisKind::TimeDifferenceS,
        _ => AxisKind::PositionDifferenceM,
    };
    // The CSV does not carry provenance; reconstruct a neutral one. Curves
    // with per-point errors are treated as measured data.
    let probe = read_curve_csv(
        std::path::Path::new(&cfg.input),
        axis,
        CurveMeta {
            statistics: cfg.statistics,
            geometry: GeometrySpec::Hbt { z: cfg.z_m },
            source: SourceSpec {
                length_l: 1e-3,
                center_x: 0.0,
                wavelength_lambda: cfg.lambda_m,
                bandwidth_dnu: 1.0,
                n_subsources: 2,
                n_modes: 1,
            },
            generator: Generator::Event,
        seed: None,
        },
    );
    let curve = match probe {
        Ok(c) => c,
        Err(Error::NegativeStderr(_)) | Err(Error::NonFiniteCurveValue(_)) => {
            return Err(Error::Parse(format!("{}: malformed curve data", cfg.input)))
        }
        Err(e) => return Err(e),
    };

    let mut spec =
        FitModelSpec::auto(cfg.model, cfg.statistics, &curve, cfg.lambda_m, cfg.z_m)?;
    for (name, value) in &cfg.fix {
        spec.free.retain(|p| &p.name != name);
        spec.fixed.insert(name.clone(), *value);
    }
    for (name, value) in &cfg.init {
        match spec.free.iter_mut().find(|p| &p.name == name) {
            Some(p) => {
                p.init = *value;
                p.lo = p.lo.min(*value * 0.1);
                p.hi = p.hi.max(*value * 10.0);
            }
            None => return Err(Error::UnknownParameter(name.clone())),
        }
    }

    let result = fit(&curve, &spec)?;
    for line in result.to_record().lines() {
        outcome.messages.push(line.to_string());
    }
    if result.converged {
        if let Ok(vis) = g2sim_core::fit::extract_visibility(&result, &curve) {
            outcome.messages.push(format!("model_visibility={vis}"));
        }
    } else {
        outcome.exit_code = 4;
    }

    if let Some(out) = &cfg.out {
        ensure_parent(out)?;
        let mut meta = Metadata::new(RunConfig::Fit(cfg.clone()), "fit");
        let path = prefixed(out, ".fit.txt");
        let mut record = result.to_record();
        record.push_str(&format!("input={}\n", cfg.input));
        std::fs::write(&path, record)?;
        meta.outputs.push(path.to_string_lossy().into_owned());
        outcome.files.push(path);
        meta.timing_ms = start.elapsed().as_secs_f64() * 1e3;
        let meta_path = prefixed(out, ".meta.json");
        meta.write(&meta_path)?;
        outcome.files.push(meta_path);
    }
    outcome.fit_result = Some(result);
    Ok(outcome)
}
