use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use peakprob::calendar::{load_holidays, CpProgramRule, Registry};
use peakprob::ingest::{parse_load_csv, CsvSchema, ForecastVintage, SeriesKind};
use peakprob::scengen::EngineConfig;
use peakprob::strategies::{default_color_floor, Refit, SeriesSource, StrategySpec, ZoneMode};
use peakprob::{Error, Result};
use serde::{Deserialize, Serialize};

/// A run configuration file. Every field except `program` and `data` has a
/// default; the resolved values are written to each run's manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub program: String,
    #[serde(default)]
    pub registry: Option<PathBuf>,
    #[serde(default)]
    pub holidays: Option<PathBuf>,
    /// Single-zone runs.
    #[serde(default)]
    pub zone: Option<String>,
    /// Two-zone runs: peaks on `child`, forecasts on `parent`.
    #[serde(default)]
    pub parent: Option<String>,
    #[serde(default)]
    pub child: Option<String>,
    pub data: DataConfig,
    #[serde(default)]
    pub vintage: VintageConfig,
    #[serde(default = "default_scenarios")]
    pub scenarios: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<String>,
    #[serde(default)]
    pub color_floor: Option<f64>,
    #[serde(default = "default_first_year")]
    pub first_year: i32,
    #[serde(default)]
    pub years: Vec<i32>,
    #[serde(default)]
    pub refit: Refit,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_scenarios() -> usize {
    1000
}

fn default_seed() -> u64 {
    1
}

fn default_strategies() -> Vec<String> {
    vec!["1aS".into()]
}

fn default_first_year() -> i32 {
    2011
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub actual: PathBuf,
    pub forecast: PathBuf,
    #[serde(default)]
    pub child_actual: Option<PathBuf>,
    #[serde(default)]
    pub schema: CsvSchema,
    /// Schema of the forecast file when it differs from `schema`.
    #[serde(default)]
    pub forecast_schema: Option<CsvSchema>,
}

/// `"day-ahead"`, a PJM label (`"23"`, `"05"`, `"11"`, `"17"`), or a table
/// with `label`, `issue_offset_hours` and `horizon_start`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VintageConfig {
    Named(String),
    Custom(ForecastVintage),
}

impl Default for VintageConfig {
    fn default() -> Self {
        VintageConfig::Named("day-ahead".into())
    }
}

impl VintageConfig {
    pub fn resolve(&self) -> Result<ForecastVintage> {
        match self {
            VintageConfig::Named(n) if n == "day-ahead" => Ok(ForecastVintage::day_ahead(n)),
            VintageConfig::Named(n) => ForecastVintage::pjm(n),
            VintageConfig::Custom(v) => {
                ForecastVintage::new(&v.label, v.issue_offset_hours, v.horizon_start)
            }
        }
    }
}

/// Flags that override the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub scenarios: Option<usize>,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub strategies: Option<Vec<String>>,
    pub years: Option<Vec<i32>>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(k) = o.scenarios {
            self.scenarios = k;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = &o.output {
            self.output = p.clone();
        }
        if let Some(s) = &o.strategies {
            self.strategies = s.clone();
        }
        if let Some(y) = &o.years {
            self.years = y.clone();
        }
    }

    /// Checks everything that does not need the data files.
    pub fn validate(&self) -> Result<()> {
        self.zones()?;
        self.vintage.resolve()?;
        self.engine.validate()?;
        if self.scenarios == 0 {
            return Err(Error::Config("scenarios must be at least 1".into()));
        }
        if self.child.is_some() && self.data.child_actual.is_none() {
            return Err(Error::Config(
                "two-zone runs need `data.child_actual` for the child zone".into(),
            ));
        }
        if self.child.is_none() && self.data.child_actual.is_some() {
            return Err(Error::Config(
                "`data.child_actual` is only used with `parent` and `child`".into(),
            ));
        }
        Ok(())
    }

    pub fn zones(&self) -> Result<ZoneMode> {
        match (&self.zone, &self.parent, &self.child) {
            (Some(z), None, None) => Ok(ZoneMode::Single { zone: z.clone() }),
            (None, Some(p), Some(c)) => Ok(ZoneMode::Conditional {
                parent: p.clone(),
                child: c.clone(),
            }),
            _ => Err(Error::Config(
                "set either `zone`, or both `parent` and `child`".into(),
            )),
        }
    }

    pub fn rule(&self, base: &Path) -> Result<CpProgramRule> {
        let registry = match &self.registry {
            Some(p) => Registry::load(&base.join(p))?,
            None => Registry::builtin(),
        };
        Ok(registry.lookup(&self.program)?.clone())
    }

    pub fn holiday_set(&self, base: &Path) -> Result<BTreeSet<NaiveDate>> {
        match &self.holidays {
            Some(p) => load_holidays(&base.join(p)),
            None => Ok(BTreeSet::new()),
        }
    }

    pub fn specs(&self, rule: &CpProgramRule) -> Result<Vec<StrategySpec>> {
        let floor = self
            .color_floor
            .unwrap_or_else(|| default_color_floor(rule));
        if self.strategies.is_empty() {
            return Err(Error::Config("no strategies configured".into()));
        }
        self.strategies
            .iter()
            .map(|s| StrategySpec::parse(s, floor))
            .collect()
    }

    /// Reads the configured series. Relative paths resolve against `base`.
    pub fn load_source(&self, base: &Path) -> Result<SeriesSource> {
        let zones = self.zones()?;
        let vintage = self.vintage.resolve()?;
        let forecast_zone = match &zones {
            ZoneMode::Single { zone } => zone.clone(),
            ZoneMode::Conditional { parent, .. } => parent.clone(),
        };
        let read = |p: &Path, schema: &CsvSchema, zone: &str, kind| {
            let path = base.join(p);
            if !path.exists() {
                return Err(Error::Coverage(format!(
                    "data file {} not found",
                    path.display()
                )));
            }
            parse_load_csv(&path, schema, zone, kind)
                .map_err(|e| e.at(format!("{}", path.display())))
        };
        let mut fschema = self
            .data
            .forecast_schema
            .clone()
            .unwrap_or_else(|| self.data.schema.clone());
        if fschema.vintage_column.is_some() && fschema.vintage.is_none() {
            fschema.vintage = Some(vintage.label.clone());
        }
        let actual = read(
            &self.data.actual,
            &self.data.schema,
            &forecast_zone,
            SeriesKind::Actual,
        )?;
        let forecast = read(
            &self.data.forecast,
            &fschema,
            &forecast_zone,
            SeriesKind::Forecast,
        )?;
        let child_actual = match (&zones, &self.data.child_actual) {
            (ZoneMode::Conditional { child, .. }, Some(p)) => {
                Some(read(p, &self.data.schema, child, SeriesKind::Actual)?)
            }
            _ => None,
        };
        for (what, s) in [("actual", &actual), ("forecast", &forecast)] {
            if s.is_empty() {
                return Err(Error::Coverage(format!(
                    "no {what} rows for zone `{forecast_zone}`"
                )));
            }
        }
        Ok(SeriesSource {
            actual,
            forecast,
            child_actual,
        })
    }
}

/// Base directory for relative data paths: the `--data-dir` flag (or its
/// environment variable), else the config file's directory.
pub fn data_base(flag: Option<&Path>, config_path: &Path) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    config_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
program = "NYISO"
zone = "NYC"
[data]
actual = "a.csv"
forecast = "f.csv"
"#;

    #[test]
    fn defaults_fill_in() {
        let c = RunConfig::parse(MINIMAL).unwrap();
        c.validate().unwrap();
        assert_eq!(c.scenarios, 1000);
        assert_eq!(c.strategies, vec!["1aS".to_string()]);
        assert_eq!(c.vintage.resolve().unwrap().horizon_start, 0);
        assert!(matches!(c.zones().unwrap(), ZoneMode::Single { .. }));
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = format!("{MINIMAL}\nbogus = 1\n");
        assert!(RunConfig::parse(&text).is_err());
    }

    #[test]
    fn vintage_forms() {
        let c = RunConfig::parse(&format!("vintage = \"11\"\n{MINIMAL}")).unwrap();
        assert_eq!(c.vintage.resolve().unwrap().horizon_start, 12);
        let text = format!(
            "vintage = {{ label = \"x\", issue_offset_hours = 8.0, horizon_start = 9 }}\n{MINIMAL}"
        );
        let c = RunConfig::parse(&text).unwrap();
        assert_eq!(c.vintage.resolve().unwrap().hours().len(), 15);
        let c = RunConfig::parse(&format!("vintage = \"07\"\n{MINIMAL}")).unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn zone_modes() {
        let both = MINIMAL.replace("zone = \"NYC\"", "zone = \"A\"\nparent = \"B\"");
        assert!(RunConfig::parse(&both).unwrap().validate().is_err());
        let pair = MINIMAL.replace("zone = \"NYC\"", "parent = \"PJM\"\nchild = \"PSEG\"");
        let c = RunConfig::parse(&pair).unwrap();
        // Two-zone runs need the child's actuals.
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let with_child = pair.replace(
            "forecast = \"f.csv\"",
            "forecast = \"f.csv\"\nchild_actual = \"c.csv\"",
        );
        RunConfig::parse(&with_child).unwrap().validate().unwrap();
    }

    #[test]
    fn overrides_win() {
        let mut c = RunConfig::parse(MINIMAL).unwrap();
        c.apply(&Overrides {
            scenarios: Some(50),
            seed: Some(9),
            strategies: Some(vec!["2bC".into()]),
            ..Overrides::default()
        });
        assert_eq!((c.scenarios, c.seed), (50, 9));
        assert_eq!(c.strategies, vec!["2bC".to_string()]);
    }
}
