//! Program calendars: seasonal windows, business-day filtering and the
//! registry of coincident-peak program rules.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Registry shipped with the crate.
pub const DEFAULT_REGISTRY: &str = include_str!("../data/registry.toml");

/// Month and day without a year, written `MM-DD`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MonthDay {
    pub month: u32,
    pub day: u32,
}

impl MonthDay {
    pub fn new(month: u32, day: u32) -> Result<Self> {
        // 2000 is a leap year so Feb 29 is accepted.
        if NaiveDate::from_ymd_opt(2000, month, day).is_none() {
            return Err(Error::Config(format!(
                "invalid month-day {month:02}-{day:02}"
            )));
        }
        Ok(MonthDay { month, day })
    }

    /// Resolves the month-day in `year`. Feb 29 maps to Feb 28 in common years.
    pub fn in_year(self, year: i32) -> NaiveDate {
        NaiveDate::from_ymd_opt(year, self.month, self.day)
            .or_else(|| NaiveDate::from_ymd_opt(year, self.month, self.day - 1))
            .expect("validated month-day")
    }
}

impl FromStr for MonthDay {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (m, d) = s
            .trim()
            .split_once('-')
            .ok_or_else(|| Error::Config(format!("expected MM-DD, got `{s}`")))?;
        let parse = |v: &str| {
            v.parse::<u32>()
                .map_err(|_| Error::Config(format!("expected MM-DD, got `{s}`")))
        };
        MonthDay::new(parse(m)?, parse(d)?)
    }
}

impl fmt::Display for MonthDay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:02}-{:02}", self.month, self.day)
    }
}

impl Serialize for MonthDay {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MonthDay {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A seasonal window inside a program year.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeasonWindow {
    pub start: MonthDay,
    pub end: MonthDay,
    /// The window ends in the calendar year after the one containing `start`.
    #[serde(default)]
    pub end_next_year: bool,
}

impl SeasonWindow {
    pub fn new(start: MonthDay, end: MonthDay) -> Self {
        SeasonWindow {
            start,
            end,
            end_next_year: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.end_next_year, self.end < self.start) {
            (false, true) => Err(Error::Config(format!(
                "window end {} precedes start {}",
                self.end, self.start
            ))),
            (true, false) => Err(Error::Config(format!(
                "cross-year window {} .. {} spans more than a year",
                self.start, self.end
            ))),
            _ => Ok(()),
        }
    }

    /// Inclusive date range of the window for the program year anchored at `year`.
    pub fn dates(&self, year: i32) -> (NaiveDate, NaiveDate) {
        let end_year = if self.end_next_year { year + 1 } else { year };
        (self.start.in_year(year), self.end.in_year(end_year))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DayFilter {
    BusinessDays,
    AllDays,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaseInterval {
    Hour,
    QuarterHour,
}

/// Rules of one coincident-peak program.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpProgramRule {
    #[serde(rename = "id")]
    pub jurisdiction_id: String,
    #[serde(default)]
    pub aliases: Vec<String>,
    #[serde(default)]
    pub name: String,
    pub n_peaks: usize,
    pub windows: Vec<SeasonWindow>,
    pub day_filter: DayFilter,
    #[serde(rename = "interval")]
    pub base_interval: BaseInterval,
    #[serde(default)]
    pub system: String,
}

impl CpProgramRule {
    /// Single-window rule, mostly useful for tests and ad-hoc programs.
    pub fn simple(
        id: &str,
        n_peaks: usize,
        window: SeasonWindow,
        day_filter: DayFilter,
    ) -> CpProgramRule {
        CpProgramRule {
            jurisdiction_id: id.to_string(),
            aliases: Vec::new(),
            name: String::new(),
            n_peaks,
            windows: vec![window],
            day_filter,
            base_interval: BaseInterval::Hour,
            system: String::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if ![1, 4, 5, 12].contains(&self.n_peaks) {
            return Err(Error::Config(format!(
                "{}: n_peaks must be one of 1, 4, 5, 12 (got {})",
                self.jurisdiction_id, self.n_peaks
            )));
        }
        if self.windows.is_empty() {
            return Err(Error::Config(format!(
                "{}: no season window",
                self.jurisdiction_id
            )));
        }
        self.windows.iter().try_for_each(SeasonWindow::validate)
    }

    fn matches(&self, id: &str) -> bool {
        self.jurisdiction_id.eq_ignore_ascii_case(id)
            || self.aliases.iter().any(|a| a.eq_ignore_ascii_case(id))
    }
}

/// Eligible days of one program year.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgramYear {
    pub year: i32,
    pub eligible_days: BTreeSet<NaiveDate>,
}

impl ProgramYear {
    pub fn contains(&self, day: NaiveDate) -> bool {
        self.eligible_days.contains(&day)
    }

    pub fn first(&self) -> Option<NaiveDate> {
        self.eligible_days.first().copied()
    }

    pub fn last(&self) -> Option<NaiveDate> {
        self.eligible_days.last().copied()
    }

    pub fn len(&self) -> usize {
        self.eligible_days.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eligible_days.is_empty()
    }
}

pub fn is_weekend(day: NaiveDate) -> bool {
    matches!(day.weekday(), Weekday::Sat | Weekday::Sun)
}

/// All dates of the program year anchored at `year` that fall in one of the
/// rule's windows and pass its day filter.
pub fn eligible_days(
    rule: &CpProgramRule,
    year: i32,
    holidays: &BTreeSet<NaiveDate>,
) -> Result<ProgramYear> {
    let mut days = BTreeSet::new();
    for window in &rule.windows {
        window.validate()?;
        let (start, end) = window.dates(year);
        for day in start.iter_days().take_while(|d| *d <= end) {
            let keep = match rule.day_filter {
                DayFilter::AllDays => true,
                DayFilter::BusinessDays => !is_weekend(day) && !holidays.contains(&day),
            };
            if keep {
                days.insert(day);
            }
        }
    }
    Ok(ProgramYear {
        year,
        eligible_days: days,
    })
}

/// Eligible days over a range of program years, `first..=last`.
pub fn eligible_days_span(
    rule: &CpProgramRule,
    first: i32,
    last: i32,
    holidays: &BTreeSet<NaiveDate>,
) -> Result<BTreeSet<NaiveDate>> {
    let mut out = BTreeSet::new();
    for year in first..=last {
        out.extend(eligible_days(rule, year, holidays)?.eligible_days);
    }
    Ok(out)
}

/// Parsed registry of program rules.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Registry {
    #[serde(rename = "program")]
    pub programs: Vec<CpProgramRule>,
}

impl Registry {
    pub fn parse(text: &str) -> Result<Registry> {
        let registry: Registry = toml::from_str(text)?;
        for rule in &registry.programs {
            rule.validate()?;
        }
        Ok(registry)
    }

    pub fn load(path: &Path) -> Result<Registry> {
        Registry::parse(&std::fs::read_to_string(path)?)
    }

    /// The registry compiled into the crate.
    pub fn builtin() -> Registry {
        Registry::parse(DEFAULT_REGISTRY).expect("bundled registry is valid")
    }

    pub fn ids(&self) -> Vec<String> {
        self.programs
            .iter()
            .map(|r| r.jurisdiction_id.clone())
            .collect()
    }

    pub fn lookup(&self, id: &str) -> Result<&CpProgramRule> {
        self.programs
            .iter()
            .find(|r| r.matches(id.trim()))
            .ok_or_else(|| Error::UnknownJurisdiction {
                id: id.to_string(),
                available: self.ids(),
            })
    }
}

/// Looks a jurisdiction up in the built-in registry.
pub fn registry_lookup(jurisdiction_id: &str) -> Result<CpProgramRule> {
    Registry::builtin().lookup(jurisdiction_id).cloned()
}

/// Parses a holiday list: one ISO-8601 date per line; blank lines and `#`
/// comments are ignored.
pub fn parse_holidays(text: &str) -> Result<BTreeSet<NaiveDate>> {
    let mut out = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let day = NaiveDate::parse_from_str(line, "%Y-%m-%d").map_err(|e| Error::Parse {
            row: i + 1,
            msg: format!("bad holiday date `{line}`: {e}"),
        })?;
        out.insert(day);
    }
    Ok(out)
}

pub fn load_holidays(path: &Path) -> Result<BTreeSet<NaiveDate>> {
    parse_holidays(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    fn us_federal_2023() -> BTreeSet<NaiveDate> {
        parse_holidays(
            "2023-01-02\n2023-01-16\n2023-02-20\n2023-05-29\n2023-06-19\n\
             2023-07-04\n2023-09-04\n2023-10-09\n2023-11-10\n2023-11-23\n2023-12-25\n",
        )
        .unwrap()
    }

    #[test]
    fn pjm_summer_excludes_weekends_and_holidays() {
        let rule = registry_lookup("PJM-RTO").unwrap();
        let py = eligible_days(&rule, 2023, &us_federal_2023()).unwrap();
        assert!(!py.contains(d(2023, 7, 4)));
        assert!(!py.contains(d(2023, 6, 19)));
        assert!(!py.contains(d(2023, 9, 4)));
        assert!(py.eligible_days.iter().all(|&x| !is_weekend(x)));
        assert_eq!(py.first(), Some(d(2023, 6, 1)));
        assert_eq!(py.last(), Some(d(2023, 9, 29)));
        // 87 weekdays Jun 1 - Sep 30 2023, minus Jun 19, Jul 4, Sep 4.
        let weekdays = d(2023, 6, 1)
            .iter_days()
            .take_while(|x| *x <= d(2023, 9, 30))
            .filter(|x| !is_weekend(*x))
            .count();
        assert_eq!(weekdays, 87);
        assert_eq!(py.len(), 84);
    }

    #[test]
    fn nyiso_july_august_2023() {
        let rule = registry_lookup("NYISO").unwrap();
        let hol: BTreeSet<_> = [d(2023, 7, 4)].into_iter().collect();
        let py = eligible_days(&rule, 2023, &hol).unwrap();
        // 21 weekdays in July plus 23 in August, minus July 4.
        let oracle = d(2023, 7, 1)
            .iter_days()
            .take_while(|x| *x <= d(2023, 8, 31))
            .filter(|x| !is_weekend(*x) && *x != d(2023, 7, 4))
            .count();
        assert_eq!(oracle, 43);
        assert_eq!(py.len(), oracle);
    }

    #[test]
    fn all_days_filter_keeps_every_date() {
        let rule = CpProgramRule::simple(
            "X",
            1,
            SeasonWindow::new("06-01".parse().unwrap(), "06-30".parse().unwrap()),
            DayFilter::AllDays,
        );
        let py = eligible_days(&rule, 2021, &BTreeSet::new()).unwrap();
        assert_eq!(py.len(), 30);
    }

    #[test]
    fn cross_year_window_anchored_at_start_year() {
        let rule = registry_lookup("DOM/DVP").unwrap();
        assert_eq!(rule.n_peaks, 12);
        let w = rule.windows[0];
        assert_eq!(w.dates(2022), (d(2022, 11, 1), d(2023, 10, 31)));
        let py = eligible_days(&rule, 2022, &BTreeSet::new()).unwrap();
        assert_eq!(py.first(), Some(d(2022, 11, 1)));
        assert_eq!(py.last(), Some(d(2023, 10, 31)));
    }

    #[test]
    fn inverted_window_is_config_error() {
        let rule = CpProgramRule::simple(
            "BAD",
            1,
            SeasonWindow::new("09-30".parse().unwrap(), "06-01".parse().unwrap()),
            DayFilter::AllDays,
        );
        assert!(matches!(
            eligible_days(&rule, 2020, &BTreeSet::new()),
            Err(Error::Config(_))
        ));
        assert!(rule.validate().is_err());
    }

    #[test]
    fn registry_examples() {
        let pseg = registry_lookup("PSEG").unwrap();
        assert_eq!(pseg.n_peaks, 1);
        assert_eq!(pseg.windows[0].start.to_string(), "06-01");
        assert_eq!(pseg.windows[0].end.to_string(), "09-30");
        let pjm = registry_lookup("PJM-RTO").unwrap();
        assert_eq!(pjm.n_peaks, 5);
        let dom = registry_lookup("dvp").unwrap();
        assert_eq!(dom.jurisdiction_id, "DOM/DVP");
        assert_eq!(dom.windows[0].start.to_string(), "11-01");
        assert_eq!(dom.windows[0].end.to_string(), "10-31");
    }

    #[test]
    fn unknown_id_lists_available() {
        let err = registry_lookup("MISO").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("NYISO") && msg.contains("PSEG"), "{msg}");
    }

    #[test]
    fn every_registry_entry_is_valid() {
        let reg = Registry::builtin();
        assert!(reg.programs.len() >= 24);
        for r in &reg.programs {
            assert!([1, 4, 5, 12].contains(&r.n_peaks));
            for w in &r.windows {
                let (s, e) = w.dates(2020);
                assert!(s < e, "{}", r.jurisdiction_id);
            }
        }
    }

    #[test]
    fn two_window_programs_union_both_seasons() {
        let rule = registry_lookup("JCPL").unwrap();
        let py = eligible_days(&rule, 2021, &BTreeSet::new()).unwrap();
        assert!(py.contains(d(2021, 7, 1)));
        assert!(py.contains(d(2022, 1, 3)));
        assert!(!py.contains(d(2021, 10, 4)));
    }

    #[test]
    fn holiday_parser_skips_comments() {
        let h = parse_holidays("# US\n2023-07-04 # independence\n\n2023-09-04\n").unwrap();
        assert_eq!(h.len(), 2);
        assert!(parse_holidays("2023-13-01").is_err());
    }
}
