use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDate};
use peakprob::calendar::{eligible_days, eligible_days_span, CpProgramRule};
use peakprob::estimators::{
    percentile_threshold, prob_peak_hour, prob_rank_bands, update_running_cp,
    write_hour_estimates_csv, RunningCpState,
};
use peakprob::ingest::write_canonical_csv;
use peakprob::scengen::{FittedEngine, ScenarioBatch};
use peakprob::strategies::{
    classify_signal, daily_maxima, fit_engine, modified_cp_levels, peak_zone_actual, report_table,
    run_backtest, simulate_day, write_alerts_csv, write_report_csv, write_summary_csv,
    write_timeline_csv, AuditedSource, BacktestConfig, BacktestReport, LoadSource, SeriesSource,
    ZoneMode,
};
use peakprob::synthetic::{generate, ChildConfig, SyntheticConfig};
use peakprob::{Error, Result};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;

/// Loaded configuration plus where its data lives.
pub struct Ctx {
    pub config: RunConfig,
    pub config_path: PathBuf,
    pub base: PathBuf,
    pub workers: Option<usize>,
}

/// Collects output files and writes the run manifest last.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        self.files.push(name.to_string());
        Ok(BufWriter::new(File::create(self.dir.join(name))?))
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    fn manifest(mut self, ctx: Option<&Ctx>, command: &str, args: serde_json::Value) -> Result<()> {
        let files = std::mem::take(&mut self.files);
        let manifest = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "args": args,
            "config_file": ctx.map(|c| c.config_path.display().to_string()),
            "data_dir": ctx.map(|c| c.base.display().to_string()),
            "workers": ctx.and_then(|c| c.workers),
            "config": ctx.map(|c| &c.config),
            "outputs": files,
        });
        self.json("manifest.json", &manifest)
    }
}

struct Loaded {
    rule: CpProgramRule,
    holidays: std::collections::BTreeSet<NaiveDate>,
    source: SeriesSource,
    zones: ZoneMode,
}

fn load(ctx: &Ctx) -> Result<Loaded> {
    ctx.config.validate()?;
    Ok(Loaded {
        rule: ctx.config.rule(&ctx.base)?,
        holidays: ctx.config.holiday_set(&ctx.base)?,
        source: ctx.config.load_source(&ctx.base)?,
        zones: ctx.config.zones()?,
    })
}

fn train_engine(ctx: &Ctx, l: &Loaded, cutoff: NaiveDate) -> Result<FittedEngine> {
    let c = &ctx.config;
    let train = eligible_days_span(&l.rule, c.first_year, cutoff.year(), &l.holidays)?;
    fit_engine(
        &l.source,
        &l.zones,
        &c.vintage.resolve()?,
        &c.engine,
        &train,
        cutoff,
    )
}

/// Loads an engine file, or trains one on everything before `day`.
fn engine_for(ctx: &Ctx, l: &Loaded, day: NaiveDate, path: Option<&Path>) -> Result<FittedEngine> {
    let Some(path) = path else {
        return train_engine(ctx, l, day);
    };
    let text = std::fs::read_to_string(path)?;
    let engine = FittedEngine::from_json(&text)?;
    let vintage = ctx.config.vintage.resolve()?;
    if engine.label.zone_id != l.zones.target() || engine.label.vintage != vintage.label {
        return Err(Error::Config(format!(
            "engine is for zone `{}` vintage `{}`, config asks for `{}` vintage `{}`",
            engine.label.zone_id,
            engine.label.vintage,
            l.zones.target(),
            vintage.label
        )));
    }
    if engine.label.cutoff > day {
        return Err(Error::Config(format!(
            "engine was trained on data up to {}, after the requested day {day}",
            engine.label.cutoff
        )));
    }
    Ok(engine)
}

fn tail_summary(engine: &FittedEngine) -> Vec<serde_json::Value> {
    engine
        .marginals
        .iter()
        .map(|m| {
            json!({
                "hour": m.hour,
                "lower": { "threshold": m.lower.threshold, "shape": m.lower.shape, "scale": m.lower.scale },
                "upper": { "threshold": m.upper.threshold, "shape": m.upper.shape, "scale": m.upper.scale },
            })
        })
        .collect()
}

pub fn fit(ctx: &Ctx, cutoff: NaiveDate) -> Result<()> {
    let l = load(ctx)?;
    let engine = train_engine(ctx, &l, cutoff)?;
    let mut out = Outputs::new(&ctx.config.output)?;
    out.json("engine.json", &engine)?;
    let lambda = engine.model.lambda;
    let diagnostics = json!({
        "zone": engine.label.zone_id,
        "vintage": engine.label.vintage,
        "cutoff": engine.label.cutoff,
        "n_train": engine.n_train,
        "hours": engine.hours,
        "lambda": lambda,
        "lambda_selected": !ctx.config.engine.lambda_grid.is_empty(),
        "edges": engine.model.edge_count(1e-12),
        "conditional": engine.conditional.as_ref().map(|c| json!({
            "zone1": c.zone1,
            "zone2": c.zone2,
            "n_train": c.n_train,
            "lambda": c.joint.lambda,
            "edges": c.joint.edge_count(1e-12),
        })),
        "tails": tail_summary(&engine),
    });
    out.json("fit.json", &diagnostics)?;
    println!(
        "[fit] {} vintage {}: {} training days before {}, {} hours, lambda {}{}",
        engine.label.zone_id,
        engine.label.vintage,
        engine.n_train,
        cutoff,
        engine.n_hours(),
        lambda,
        if ctx.config.engine.lambda_grid.is_empty() {
            ""
        } else {
            " (selected)"
        }
    );
    out.manifest(Some(ctx), "fit", json!({ "cutoff": cutoff }))
}

fn batch_for(
    ctx: &Ctx,
    l: &Loaded,
    engine: &FittedEngine,
    day: NaiveDate,
) -> Result<ScenarioBatch> {
    simulate_day(
        &l.source,
        engine,
        day,
        ctx.config.scenarios,
        ctx.config.seed,
    )?
    .ok_or_else(|| Error::Coverage(format!("no forecast for {day}")))
}

fn write_fan<W: Write>(w: W, batch: &ScenarioBatch, forecast: Option<&[f64]>) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "hour", "forecast", "mean", "p05", "p25", "p50", "p75", "p95",
    ])?;
    for (j, h) in batch.hours.iter().enumerate() {
        let col: Vec<f64> = batch.paths.column(j).iter().copied().collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let mut rec = vec![
            h.to_string(),
            forecast.map(|f| f[j].to_string()).unwrap_or_default(),
            mean.to_string(),
        ];
        for p in [5.0, 25.0, 50.0, 75.0, 95.0] {
            rec.push(percentile_threshold(&col, p)?.to_string());
        }
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn simulate(ctx: &Ctx, day: NaiveDate, engine_path: Option<&Path>, binary: bool) -> Result<()> {
    let l = load(ctx)?;
    let engine = engine_for(ctx, &l, day, engine_path)?;
    let batch = batch_for(ctx, &l, &engine, day)?;
    let mut out = Outputs::new(&ctx.config.output)?;
    batch.write_csv(out.create("scenarios.csv")?)?;
    if binary {
        let mut w = out.create("scenarios.bin")?;
        batch.write_binary(&mut w)?;
        w.flush()?;
    }
    let forecast = match l.zones {
        ZoneMode::Single { .. } => l.source.forecast(day, &batch.hours),
        ZoneMode::Conditional { .. } => None,
    };
    write_fan(out.create("fan.csv")?, &batch, forecast.as_deref())?;
    println!(
        "[simulate] {} on {}: {} scenarios x {} hours (seed {}), {} invalid entries",
        batch.zone_id,
        day,
        batch.k(),
        batch.n_hours(),
        batch.seed,
        batch.violations
    );
    out.manifest(
        Some(ctx),
        "simulate",
        json!({ "date": day, "engine": engine_path, "binary": binary, "seed": batch.seed }),
    )
}

/// Running peaks of the program year up to (not including) `day`.
fn running_state(l: &Loaded, day: NaiveDate) -> Result<RunningCpState> {
    let season = eligible_days(&l.rule, day.year(), &l.holidays)?;
    if !season.contains(day) {
        return Err(Error::RejectedDay {
            date: day,
            reason: format!(
                "not an eligible day of {} {}",
                l.rule.jurisdiction_id,
                day.year()
            ),
        });
    }
    let mut state = RunningCpState::new(&l.rule.jurisdiction_id, day.year(), l.rule.n_peaks);
    for d in season.eligible_days.range(..day) {
        if let Some(a) = peak_zone_actual(&l.source, &l.zones, *d) {
            state = update_running_cp(state, *d, &a, &season)?;
        }
    }
    Ok(state)
}

pub fn predict(ctx: &Ctx, day: NaiveDate, engine_path: Option<&Path>) -> Result<()> {
    let l = load(ctx)?;
    let specs = ctx.config.specs(&l.rule)?;
    let state = running_state(&l, day)?;
    let prior = eligible_days_span(&l.rule, ctx.config.first_year, day.year() - 1, &l.holidays)?;
    let history = daily_maxima(&l.source, &l.zones, &prior);
    let engine = engine_for(ctx, &l, day, engine_path)?;
    let batch = batch_for(ctx, &l, &engine, day)?;
    let hour_est = prob_peak_hour(&batch)?;

    let mut out = Outputs::new(&ctx.config.output)?;
    let n = l.rule.n_peaks;
    let mut w = csv::Writer::from_writer(out.create("predict.csv")?);
    let mut header = vec!["strategy".to_string(), "date".into(), "threshold".into()];
    header.extend((1..=n).map(|k| format!("level_{k}")));
    header.extend((1..=n).map(|k| format!("prob_{k}")));
    header.extend(["total", "fired", "color"].map(String::from));
    w.write_record(&header)?;
    for s in &specs {
        let threshold = match s.threshold.percentile() {
            Some(p) => percentile_threshold(&history, p)
                .map_err(|e| e.at(format!("{} threshold", s.name())))?,
            None => 0.0,
        };
        let levels = modified_cp_levels(&state, s, threshold);
        let est = prob_rank_bands(&batch, &state, &levels)?.with_threshold(threshold);
        let rec = classify_signal(&est, s);
        let mut row = vec![s.name(), day.to_string(), threshold.to_string()];
        row.extend(levels.iter().map(|x| x.to_string()));
        row.extend(est.probs.iter().map(|x| x.to_string()));
        row.push(est.total.to_string());
        row.push(rec.fired.to_string());
        row.push(rec.color.map(|c| c.to_string()).unwrap_or_default());
        w.write_record(&row)?;
        println!(
            "[predict] {} {}: total {:.3} over levels {:?}{}",
            s.name(),
            day,
            est.total,
            levels.iter().map(|x| x.round()).collect::<Vec<_>>(),
            if rec.fired { "  ALERT" } else { "" }
        );
    }
    w.flush()?;
    drop(w);
    write_hour_estimates_csv(
        out.create("peak_hour.csv")?,
        std::slice::from_ref(&hour_est),
    )?;
    out.json("running_cp.json", &state)?;
    if let Some(h) = hour_est.mode() {
        println!("[predict] most likely peak hour {h}");
    }
    out.manifest(
        Some(ctx),
        "predict",
        json!({ "date": day, "engine": engine_path }),
    )
}

fn write_report_files(out: &mut Outputs, reports: &[BacktestReport]) -> Result<()> {
    write_report_csv(out.create("report.csv")?, reports)?;
    write_summary_csv(out.create("summary.csv")?, reports)?;
    Ok(())
}

pub fn backtest(ctx: &Ctx) -> Result<()> {
    let l = load(ctx)?;
    let c = &ctx.config;
    if c.years.is_empty() {
        return Err(Error::Config("backtest needs `years`".into()));
    }
    let specs = c.specs(&l.rule)?;
    let cfg = BacktestConfig {
        program: l.rule.clone(),
        holidays: l.holidays.clone(),
        first_year: c.first_year,
        years: c.years.clone(),
        vintage: c.vintage.resolve()?,
        zones: l.zones.clone(),
        engine: c.engine.clone(),
        k: c.scenarios,
        seed: c.seed,
        refit: c.refit,
    };
    let audited = AuditedSource::new(l.source);
    let reports = run_backtest(&audited, &cfg, &specs)?;
    let violations = audited.violations();
    if !violations.is_empty() {
        eprintln!("[backtest] warning: {} look-ahead reads", violations.len());
    }
    let mut out = Outputs::new(&c.output)?;
    write_report_files(&mut out, &reports)?;
    write_alerts_csv(out.create("alerts.csv")?, &reports)?;
    write_timeline_csv(out.create("timeline.csv")?, &reports)?;
    out.json("report.json", &reports)?;
    print!("{}", report_table(&reports));
    out.manifest(
        Some(ctx),
        "backtest",
        json!({ "audited_reads": audited.reads(), "look_ahead_reads": violations }),
    )
}

pub fn report(input: &Path, output: Option<&Path>) -> Result<()> {
    let text = std::fs::read_to_string(input)?;
    let reports: Vec<BacktestReport> = serde_json::from_str(&text)?;
    print!("{}", report_table(&reports));
    if let Some(dir) = output {
        let mut out = Outputs::new(dir)?;
        write_report_files(&mut out, &reports)?;
        out.manifest(None, "report", json!({ "input": input }))?;
    }
    Ok(())
}

pub struct SynthArgs {
    pub out: PathBuf,
    pub first_year: i32,
    pub last_year: i32,
    pub seed: u64,
    pub child: bool,
}

/// Writes a synthetic data set and a matching config.
pub fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        zone: "SYN".into(),
        first_year: a.first_year,
        last_year: a.last_year,
        seed: a.seed,
        child: a.child.then(|| ChildConfig {
            zone: "SUB".into(),
            share: 0.3,
            noise_sd: 6.0,
        }),
        ..SyntheticConfig::default()
    };
    if a.last_year < a.first_year + 1 {
        return Err(Error::Config(
            "synthetic data needs at least two years".into(),
        ));
    }
    let src = generate(&cfg)?;
    let mut out = Outputs::new(&a.out)?;
    let mut series = vec![(&src.actual, ""), (&src.forecast, "day-ahead")];
    if let Some(c) = &src.child_actual {
        series.push((c, ""));
    }
    write_canonical_csv(&series, out.create("load.csv")?)?;
    let zones = if a.child {
        "parent = \"SYN\"\nchild = \"SUB\""
    } else {
        "zone = \"SYN\""
    };
    let child_data = if a.child {
        "child_actual = \"load.csv\"\n"
    } else {
        ""
    };
    let first_test = (a.first_year + 2).min(a.last_year);
    let text = format!(
        "program = \"{program}\"\n{zones}\nfirst_year = {first}\nyears = [{years}]\n\
         scenarios = 500\nseed = {seed}\nstrategies = [\"1aS\", \"1bS\", \"2aS\", \"1aC\"]\n\
         output = \"out\"\n\n[data]\nactual = \"load.csv\"\nforecast = \"load.csv\"\n{child_data}",
        program = if a.child { "PSEG" } else { "NYISO" },
        first = a.first_year,
        years = (first_test..=a.last_year)
            .map(|y| y.to_string())
            .collect::<Vec<_>>()
            .join(", "),
        seed = a.seed,
    );
    out.create("config.toml")?.write_all(text.as_bytes())?;
    println!(
        "[synth] {} days of synthetic load in {}",
        src.actual.dates().len(),
        a.out.display()
    );
    out.manifest(
        None,
        "synth",
        json!({ "first_year": a.first_year, "last_year": a.last_year, "seed": a.seed, "child": a.child }),
    )
}
