//! Flat key=value configuration with unit-suffixed numbers, plus the resolved
//! (SI-unit) run configurations that get echoed into output metadata.
//!
//! Config files are plain text, one `key=value` per line, `#` comments.
//! Values may carry a unit suffix (`l=0.59mm`, `tau_c=296ns`, `rate=25kHz`);
//! everything is converted to SI at parse time. Command-line `key=value`
//! arguments override file keys.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use g2sim_core::analytic::Polarization;
use g2sim_core::{Error, ModelId, ParticleStatistics, Result};

/// Seed used when a run does not specify one; fixed rather than wall-clock so
/// every run is reproducible by default.
pub const DEFAULT_SEED: u64 = 42;

/// Parses a number with an optional unit suffix into SI base units.
pub fn parse_quantity(s: &str) -> Result<f64> {
    let s = s.trim();
    let split = s
        .char_indices()
        .rev()
        .take_while(|(_, c)| c.is_alphabetic() || *c == 'µ')
        .last()
        .map(|(i, _)| i)
        .unwrap_or(s.len());
    let (num, suffix) = s.split_at(split);
    // Exponent notation: "2e4" splits as ("2", "e4") above; undo that.
    if !num.is_empty() && (suffix.starts_with('e') || suffix.starts_with('E')) {
        if let Ok(v) = s.parse::<f64>() {
            return Ok(v);
        }
    }
    let scale = match suffix {
        "" => 1.0,
        "s" | "m" | "Hz" | "hz" => 1.0,
        "ms" | "mm" => 1e-3,
        "us" | "µs" | "um" | "µm" => 1e-6,
        "ns" | "nm" => 1e-9,
        "ps" | "pm" => 1e-12,
        "kHz" | "khz" => 1e3,
        "MHz" | "mhz" => 1e6,
        "GHz" | "ghz" => 1e9,
        "THz" | "thz" => 1e12,
        other => return Err(Error::Parse(format!("unknown unit suffix {other:?} in {s:?}"))),
    };
    let v: f64 = num
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("cannot parse number from {s:?}")))?;
    Ok(v * scale)
}

/// Key-value bag assembled from a config file plus command-line overrides.
/// Every key must be consumed; leftovers are reported as unknown.
pub struct KvMap {
    values: BTreeMap<String, String>,
}

impl KvMap {
    pub fn new() -> KvMap {
        KvMap { values: BTreeMap::new() }
    }

    pub fn from_file(path: &Path) -> Result<KvMap> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Parse(format!("cannot read config {}: {e}", path.display())))?;
        let mut kv = KvMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            kv.insert_pair(line).map_err(|e| {
                Error::Parse(format!("{} line {}: {e}", path.display(), lineno + 1))
            })?;
        }
        Ok(kv)
    }

    pub fn insert_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("expected key=value, got {pair:?}")))?;
        self.values.insert(k.trim().to_string(), v.trim().to_string());
        Ok(())
    }

    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for pair in overrides {
            self.insert_pair(pair)?;
        }
        Ok(())
    }

    pub fn take_raw(&mut self, key: &str) -> Option<String> {
        self.values.remove(key)
    }

    pub fn take_quantity(&mut self, key: &str, default: f64) -> Result<f64> {
        match self.values.remove(key) {
            Some(v) => parse_quantity(&v).map_err(|e| Error::Parse(format!("{key}: {e}"))),
            None => Ok(default),
        }
    }

    pub fn take_opt_quantity(&mut self, key: &str) -> Result<Option<f64>> {
        match self.values.remove(key) {
            Some(v) => parse_quantity(&v)
                .map(Some)
                .map_err(|e| Error::Parse(format!("{key}: {e}"))),
            None => Ok(None),
        }
    }

    pub fn take_usize(&mut self, key: &str, default: usize) -> Result<usize> {
        match self.values.remove(key) {
            Some(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("{key}: expected integer, got {v:?}"))),
            None => Ok(default),
        }
    }

    pub fn take_u64(&mut self, key: &str, default: u64) -> Result<u64> {
        match self.values.remove(key) {
            Some(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("{key}: expected integer, got {v:?}"))),
            None => Ok(default),
        }
    }

    pub fn take_bool(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.values.remove(key) {
            Some(v) => match v.trim() {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                other => Err(Error::Parse(format!("{key}: expected true/false, got {other:?}"))),
            },
            None => Ok(default),
        }
    }

    pub fn take_string(&mut self, key: &str, default: &str) -> String {
        self.values.remove(key).unwrap_or_else(|| default.to_string())
    }

    /// Extracts every remaining key with the given prefix (e.g. `init_`).
    pub fn take_prefixed(&mut self, prefix: &str) -> Result<Vec<(String, f64)>> {
        let keys: Vec<String> =
            self.values.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
        let mut out = Vec::new();
        for k in keys {
            let v = self.values.remove(&k).unwrap();
            out.push((k[prefix.len()..].to_string(), parse_quantity(&v)?));
        }
        Ok(out)
    }

    pub fn finish(self) -> Result<()> {
        if let Some(key) = self.values.keys().next() {
            return Err(Error::Parse(format!("unknown config key {key:?}")));
        }
        Ok(())
    }
}

/// Scan geometry selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    HbtTemporal,
    HbtSpatial,
    HomSpatial,
}

impl ExperimentKind {
    pub fn parse(s: &str) -> Result<ExperimentKind> {
        match s {
            "hbt-temporal" | "hbt_temporal" => Ok(ExperimentKind::HbtTemporal),
            "hbt-spatial" | "hbt_spatial" => Ok(ExperimentKind::HbtSpatial),
            "hom-spatial" | "hom_spatial" | "hom" => Ok(ExperimentKind::HomSpatial),
            other => Err(Error::Parse(format!(
                "unknown experiment {other:?}; valid: hbt-temporal, hbt-spatial, hom-spatial"
            ))),
        }
    }

}

/// Which statistics to emit. Serializes as the plain string the config
/// format uses ("fermion", "boson", "classical", "all").
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatChoice {
    One(ParticleStatistics),
    All,
}

impl Serialize for StatChoice {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let label = match self {
            StatChoice::One(p) => p.label(),
            StatChoice::All => "all",
        };
        s.serialize_str(label)
    }
}

impl<'de> Deserialize<'de> for StatChoice {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        StatChoice::parse(&text).map_err(serde::de::Error::custom)
    }
}

impl StatChoice {
    pub fn parse(s: &str) -> Result<StatChoice> {
        match s {
            "boson" => Ok(StatChoice::One(ParticleStatistics::Boson)),
            "fermion" => Ok(StatChoice::One(ParticleStatistics::Fermion)),
            "classical" => Ok(StatChoice::One(ParticleStatistics::Classical)),
            "all" => Ok(StatChoice::All),
            other => Err(Error::Parse(format!(
                "unknown statistics {other:?}; valid: boson, fermion, classical, all"
            ))),
        }
    }

    pub fn list(self) -> Vec<ParticleStatistics> {
        match self {
            StatChoice::One(s) => vec![s],
            StatChoice::All => ParticleStatistics::ALL.to_vec(),
        }
    }
}

fn parse_polarization(s: &str) -> Result<Polarization> {
    match s {
        "parallel" => Ok(Polarization::Parallel),
        "orthogonal" => Ok(Polarization::Orthogonal),
        other => Err(Error::Parse(format!(
            "unknown polarization {other:?}; valid: parallel, orthogonal"
        ))),
    }
}

/// Resolved scan configuration shared by the closed-form and Monte Carlo
/// commands. All quantities SI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanConfig {
    pub experiment: ExperimentKind,
    pub statistics: StatChoice,
    pub l_m: f64,
    pub lambda_m: f64,
    pub z_m: f64,
    pub dnu_hz: f64,
    pub d_m: Option<f64>,
    pub polarization: Polarization,
    pub beta: f64,
    pub scan_half: f64,
    pub points: usize,
    /// Single-coordinate query: print the value instead of writing files.
    pub at: Option<f64>,
    pub seed: u64,
    pub out: String,
}

/// Monte Carlo scan: the closed-form scan plus sampling sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    #[serde(flatten)]
    pub scan: ScanConfig,
    pub n_realizations: usize,
    pub n_subsources: usize,
    pub n_modes: usize,
}

/// Event-pipeline configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventsConfig {
    pub dnu_hz: f64,
    pub duration_s: f64,
    pub rate_hz: f64,
    pub dt_s: f64,
    pub n_modes: usize,
    pub bin_s: f64,
    pub max_lag_s: f64,
    pub jitter_s: f64,
    pub synth_fermion: bool,
    pub background: f64,
    pub dump_streams: bool,
    pub seed: u64,
    pub out: String,
}

/// Fit command configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub input: String,
    pub model: ModelId,
    pub statistics: ParticleStatistics,
    pub lambda_m: f64,
    pub z_m: f64,
    pub init: Vec<(String, f64)>,
    pub fix: Vec<(String, f64)>,
    pub seed: u64,
    pub out: Option<String>,
}

/// A fully resolved run; this is exactly what the metadata echoes and what
/// `rerun` replays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum RunConfig {
    Analytic(ScanConfig),
    Mc(McConfig),
    Events(EventsConfig),
    Fit(FitConfig),
}

/// Reads `dnu` or `tau_c` (mutually exclusive), defaulting to the given
/// bandwidth.
fn take_bandwidth(kv: &mut KvMap, default_dnu: f64) -> Result<f64> {
    let dnu = kv.take_opt_quantity("dnu")?;
    let tau = kv.take_opt_quantity("tau_c")?;
    match (dnu, tau) {
        (Some(_), Some(_)) => {
            Err(Error::Parse("give either dnu or tau_c, not both".to_string()))
        }
        (Some(d), None) => Ok(d),
        (None, Some(t)) => {
            if t <= 0.0 {
                return Err(Error::Parse("tau_c must be positive".to_string()));
            }
            Ok(1.0 / t)
        }
        (None, None) => Ok(default_dnu),
    }
}

/// Output prefix resolution: relative prefixes are placed under
/// `G2SIM_OUT_DIR` when that variable is set.
pub fn resolve_out(prefix: &str) -> String {
    let p = Path::new(prefix);
    if p.is_absolute() {
        return prefix.to_string();
    }
    match std::env::var("G2SIM_OUT_DIR") {
        Ok(dir) if !dir.is_empty() => Path::new(&dir).join(p).to_string_lossy().into_owned(),
        _ => prefix.to_string(),
    }
}

pub const PAPER_DNU_HZ: f64 = 1.0 / 296e-9;

pub fn scan_config(mut kv: KvMap, default_out: &str, default_points: usize) -> Result<(ScanConfig, KvMap)> {
    let experiment = ExperimentKind::parse(&kv.take_string("experiment", "hbt-spatial"))?;
    let statistics = StatChoice::parse(&kv.take_string("stat", "all"))?;
    let l_m = kv.take_quantity("l", 0.55e-3)?;
    let lambda_m = kv.take_quantity("lambda", 780e-9)?;
    let z_m = kv.take_quantity("z", 0.910)?;
    let dnu_hz = take_bandwidth(&mut kv, PAPER_DNU_HZ)?;
    let d_m = kv.take_opt_quantity("d")?;
    let polarization = parse_polarization(&kv.take_string("polarization", "parallel"))?;
    let beta = kv.take_quantity("beta", 1.0)?;
    let default_half = match experiment {
        ExperimentKind::HbtTemporal => 3.0 / dnu_hz.max(1e-30),
        _ => 3e-3,
    };
    let scan_half = kv.take_quantity("scan_half", default_half)?;
    let points = kv.take_usize("points", default_points)?;
    let at = kv.take_opt_quantity("at")?;
    let seed = kv.take_u64("seed", DEFAULT_SEED)?;
    let out = resolve_out(&kv.take_string("out", default_out));
    if experiment == ExperimentKind::HomSpatial && d_m.is_none() {
        return Err(Error::SeparationMissing);
    }
    if experiment != ExperimentKind::HomSpatial && d_m.is_some() {
        return Err(Error::Parse("d is only meaningful for hom-spatial".to_string()));
    }
    Ok((
        ScanConfig {
            experiment,
            statistics,
            l_m,
            lambda_m,
            z_m,
            dnu_hz,
            d_m,
            polarization,
            beta,
            scan_half,
            points,
            at,
            seed,
            out,
        },
        kv,
    ))
}

pub fn analytic_config(kv: KvMap) -> Result<RunConfig> {
    let (scan, rest) = scan_config(kv, "analytic", 121)?;
    rest.finish()?;
    Ok(RunConfig::Analytic(scan))
}

pub fn mc_config(kv: KvMap) -> Result<RunConfig> {
    let (scan, mut rest) = scan_config(kv, "mc", 21)?;
    let n_realizations = rest.take_usize("n", 20_000)?;
    let n_subsources = rest.take_usize("n_subsources", 200)?;
    let default_modes = match scan.experiment {
        ExperimentKind::HbtTemporal => 64,
        _ => 1,
    };
    let n_modes = rest.take_usize("n_modes", default_modes)?;
    rest.finish()?;
    Ok(RunConfig::Mc(McConfig { scan, n_realizations, n_subsources, n_modes }))
}

pub fn events_config(mut kv: KvMap) -> Result<RunConfig> {
    let dnu_hz = take_bandwidth(&mut kv, PAPER_DNU_HZ)?;
    let duration_s = kv.take_quantity("duration", 50.0)?;
    let rate_hz = kv.take_quantity("rate", 25e3)?;
    let dt_s = kv.take_quantity("dt", 1.0 / (20.0 * dnu_hz.max(1e-30)))?;
    let n_modes = kv.take_usize("n_modes", 48)?;
    let bin_s = kv.take_quantity("bin", 61e-9)?;
    let max_lag_s = kv.take_quantity("max_lag", 3e-6)?;
    let jitter_s = kv.take_quantity("jitter", 0.45e-9)?;
    let synth_fermion = kv.take_bool("synth_fermion", true)?;
    let background = kv.take_quantity("background", 1.0)?;
    let dump_streams = kv.take_bool("dump_streams", false)?;
    let seed = kv.take_u64("seed", DEFAULT_SEED)?;
    let out = resolve_out(&kv.take_string("out", "events"));
    kv.finish()?;
    Ok(RunConfig::Events(EventsConfig {
        dnu_hz,
        duration_s,
        rate_hz,
        dt_s,
        n_modes,
        bin_s,
        max_lag_s,
        jitter_s,
        synth_fermion,
        background,
        dump_streams,
        seed,
        out,
    }))
}

pub fn fit_config(mut kv: KvMap) -> Result<RunConfig> {
    let input = kv
        .take_raw("input")
        .ok_or_else(|| Error::Parse("fit requires input=<curve.csv>".to_string()))?;
    let model = ModelId::parse(&kv.take_string("model", ""))?;
    let statistics = match StatChoice::parse(&kv.take_string("stat", "fermion"))? {
        StatChoice::One(s) => s,
        StatChoice::All => {
            return Err(Error::Parse("fit takes a single statistics, not all".to_string()))
        }
    };
    let lambda_m = kv.take_quantity("lambda", 780e-9)?;
    let z_m = kv.take_quantity("z", 0.910)?;
    let init = kv.take_prefixed("init_")?;
    let fix = kv.take_prefixed("fix_")?;
    let seed = kv.take_u64("seed", DEFAULT_SEED)?;
    let out = kv.take_raw("out").map(|o| resolve_out(&o));
    kv.finish()?;
    Ok(RunConfig::Fit(FitConfig {
        input,
        model,
        statistics,
        lambda_m,
        z_m,
        init,
        fix,
        seed,
        out,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantities_parse_with_suffixes() {
        assert_eq!(parse_quantity("296ns").unwrap(), 296e-9);
        assert_eq!(parse_quantity("0.59mm").unwrap(), 0.59e-3);
        assert_eq!(parse_quantity("780nm").unwrap(), 780e-9);
        assert_eq!(parse_quantity("3.378MHz").unwrap(), 3.378e6);
        assert_eq!(parse_quantity("910mm").unwrap(), 0.910);
        assert_eq!(parse_quantity("2e4").unwrap(), 2e4);
        assert_eq!(parse_quantity("61ns").unwrap(), 61e-9);
        assert_eq!(parse_quantity("1.5").unwrap(), 1.5);
        assert!(parse_quantity("3parsec").is_err());
        assert!(parse_quantity("abc").is_err());
    }

    #[test]
    fn overrides_win_over_defaults_and_unknown_keys_are_reported() {
        let mut kv = KvMap::new();
        kv.apply_overrides(&[
            "experiment=hom-spatial".into(),
            "d=1mm".into(),
            "stat=fermion".into(),
            "beta=0.9".into(),
        ])
        .unwrap();
        let (scan, rest) = scan_config(kv, "x", 21).unwrap();
        rest.finish().unwrap();
        assert_eq!(scan.experiment, ExperimentKind::HomSpatial);
        assert_eq!(scan.d_m, Some(1e-3));
        assert_eq!(scan.beta, 0.9);
        assert_eq!(scan.seed, DEFAULT_SEED);

        let mut kv = KvMap::new();
        kv.apply_overrides(&["banana=1".into()]).unwrap();
        let (_, rest) = scan_config(kv, "x", 21).unwrap();
        assert!(rest.finish().is_err());
    }

    #[test]
    fn hom_requires_separation() {
        let mut kv = KvMap::new();
        kv.apply_overrides(&["experiment=hom-spatial".into()]).unwrap();
        match scan_config(kv, "x", 21) {
            Err(e) => assert_eq!(e.to_string(), "d required for HOM"),
            Ok(_) => panic!("expected error"),
        }
    }

    #[test]
    fn bandwidth_aliases_are_exclusive() {
        let mut kv = KvMap::new();
        kv.apply_overrides(&["tau_c=296ns".into(), "dnu=3.378MHz".into()]).unwrap();
        assert!(scan_config(kv, "x", 21).is_err());
        let mut kv = KvMap::new();
        kv.apply_overrides(&["tau_c=296ns".into()]).unwrap();
        let (scan, rest) = scan_config(kv, "x", 21).unwrap();
        rest.finish().unwrap();
        assert!((scan.dnu_hz - 1.0 / 296e-9).abs() < 1.0);
    }

    #[test]
    fn run_config_round_trips_through_json() {
        let mut kv = KvMap::new();
        kv.apply_overrides(&["experiment=hbt-temporal".into(), "stat=boson".into()]).unwrap();
        let cfg = mc_config(kv).unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }
}
