//! Daily market series: returns, realized measure, overnight returns and the VIX.
//!
//! All variances are stored in decimal daily units (a 1% daily return has
//! variance 1e-4). The trading calendar is positional: "22 days" always means
//! 22 rows, never calendar arithmetic.

use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Trading days per year used for annualization.
pub const TRADING_DAYS_PER_YEAR: f64 = 252.0;
/// Trading days per VIX month.
pub const MONTH_DAYS: usize = 22;

/// One trading day.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationRow {
    pub date: NaiveDate,
    /// Daily log return, decimal.
    pub log_return: f64,
    /// Trading-hours realized variance `x_t`, decimal daily variance.
    pub realized_measure: f64,
    /// Close-to-open log return; 0 when the input has no overnight column.
    pub overnight_return: f64,
    /// Annualized volatility index in percent.
    pub vix: f64,
}

impl ObservationRow {
    /// Whole-day variance proxy `RV + r_co^2`.
    pub fn rvcc(&self) -> f64 {
        self.realized_measure + self.overnight_return * self.overnight_return
    }

    fn validate(&self) -> Result<()> {
        let fail = |msg: &str| {
            Err(Error::Validation {
                date: self.date.to_string(),
                msg: msg.to_string(),
            })
        };
        if !self.log_return.is_finite() {
            return fail("return is not finite");
        }
        if !(self.realized_measure.is_finite() && self.realized_measure > 0.0) {
            return fail("realized measure must be strictly positive");
        }
        if !(self.vix.is_finite() && self.vix > 0.0) {
            return fail("VIX must be strictly positive");
        }
        if !self.overnight_return.is_finite() {
            return fail("overnight return is not finite");
        }
        Ok(())
    }
}

/// A validated, date-ordered daily series. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketSeries {
    rows: Vec<ObservationRow>,
    risk_free_rate: f64,
    has_overnight: bool,
    log_rm: Vec<f64>,
}

impl MarketSeries {
    /// Builds a series from rows already in date order.
    pub fn new(rows: Vec<ObservationRow>, risk_free_rate: f64) -> Result<Self> {
        let has_overnight = rows.iter().any(|r| r.overnight_return != 0.0);
        Self::with_overnight_flag(rows, risk_free_rate, has_overnight)
    }

    fn with_overnight_flag(
        rows: Vec<ObservationRow>,
        risk_free_rate: f64,
        has_overnight: bool,
    ) -> Result<Self> {
        if !risk_free_rate.is_finite() {
            return Err(Error::Contract("risk-free rate must be finite".into()));
        }
        for row in &rows {
            row.validate()?;
        }
        for pair in rows.windows(2) {
            if pair[1].date <= pair[0].date {
                return Err(Error::Validation {
                    date: pair[1].date.to_string(),
                    msg: format!("date not strictly after {}", pair[0].date),
                });
            }
        }
        let log_rm = rows.iter().map(|r| r.realized_measure.ln()).collect();
        Ok(Self {
            rows,
            risk_free_rate,
            has_overnight,
            log_rm,
        })
    }

    /// Sorts rows by date, then validates.
    pub fn from_unsorted(mut rows: Vec<ObservationRow>, risk_free_rate: f64) -> Result<Self> {
        rows.sort_by_key(|r| r.date);
        Self::new(rows, risk_free_rate)
    }

    pub fn rows(&self) -> &[ObservationRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn risk_free_rate(&self) -> f64 {
        self.risk_free_rate
    }

    pub fn has_overnight(&self) -> bool {
        self.has_overnight
    }

    pub fn with_risk_free_rate(&self, rate: f64) -> Result<Self> {
        Self::with_overnight_flag(self.rows.clone(), rate, self.has_overnight)
    }

    /// Positional sub-series `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.rows.len() {
            return Err(Error::Contract(format!(
                "slice [{start}, {end}) out of bounds for length {}",
                self.rows.len()
            )));
        }
        Ok(Self {
            rows: self.rows[start..end].to_vec(),
            risk_free_rate: self.risk_free_rate,
            has_overnight: self.has_overnight,
            log_rm: self.log_rm[start..end].to_vec(),
        })
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        self.rows.iter().map(|r| r.date).collect()
    }

    pub fn returns(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.log_return).collect()
    }

    pub fn vix(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.vix).collect()
    }

    pub fn realized_measure(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.realized_measure).collect()
    }

    /// `ln x_t`, cached at construction.
    pub fn log_realized_measure(&self) -> &[f64] {
        &self.log_rm
    }

    pub fn index_of(&self, date: NaiveDate) -> Option<usize> {
        self.rows.binary_search_by_key(&date, |r| r.date).ok()
    }
}

/// Units of the realized-measure column in the input file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RealizedScale {
    /// Decimal returns squared (canonical).
    #[default]
    Decimal,
    /// Percent returns squared; divided by 1e4 at ingestion.
    PercentSquared,
}

impl RealizedScale {
    fn factor(self) -> f64 {
        match self {
            RealizedScale::Decimal => 1.0,
            RealizedScale::PercentSquared => 1e-4,
        }
    }
}

/// Column names of a market-data CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    pub date: String,
    pub log_return: String,
    pub realized_measure: String,
    pub vix: String,
    pub overnight: Option<String>,
    pub realized_scale: RealizedScale,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            date: "date".into(),
            log_return: "ret".into(),
            realized_measure: "rv".into(),
            vix: "vix".into(),
            overnight: None,
            realized_scale: RealizedScale::Decimal,
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema, risk_free_rate: f64) -> Result<MarketSeries> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file, schema, risk_free_rate)
}

/// Parses a market-data CSV. Rows are returned sorted by date.
pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema, risk_free_rate: f64) -> Result<MarketSeries> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column '{name}'")))
    };
    let i_date = column(&schema.date)?;
    let i_ret = column(&schema.log_return)?;
    let i_rm = column(&schema.realized_measure)?;
    let i_vix = column(&schema.vix)?;
    let i_on = match &schema.overnight {
        Some(name) => Some(column(name)?),
        None => None,
    };
    let scale = schema.realized_scale.factor();

    let mut rows = Vec::new();
    for (k, record) in rdr.records().enumerate() {
        // header is line 1
        let line = k + 2;
        let record = record?;
        let field = |i: usize| record.get(i).unwrap_or("");
        let num = |i: usize, what: &str| -> Result<f64> {
            field(i).parse::<f64>().map_err(|e| Error::Parse {
                line,
                msg: format!("{what}: '{}' ({e})", field(i)),
            })
        };
        let date = NaiveDate::parse_from_str(field(i_date), "%Y-%m-%d").map_err(|e| Error::Parse {
            line,
            msg: format!("date: '{}' ({e})", field(i_date)),
        })?;
        let overnight = match i_on {
            Some(i) if !field(i).is_empty() => num(i, "overnight")?,
            _ => 0.0,
        };
        rows.push(ObservationRow {
            date,
            log_return: num(i_ret, "return")?,
            realized_measure: num(i_rm, "realized measure")? * scale,
            overnight_return: overnight,
            vix: num(i_vix, "vix")?,
        });
    }
    rows.sort_by_key(|r| r.date);
    MarketSeries::with_overnight_flag(rows, risk_free_rate, i_on.is_some())
}

pub fn save_csv(series: &MarketSeries, path: impl AsRef<Path>, schema: &CsvSchema) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    write_csv(series, file, schema)
}

/// Writes the series in the given schema plus derived `rvcc` and `annvol`
/// columns. Realized measures are written back in the schema's units.
pub fn write_csv<W: Write>(series: &MarketSeries, writer: W, schema: &CsvSchema) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec![
        schema.date.clone(),
        schema.log_return.clone(),
        schema.realized_measure.clone(),
    ];
    let overnight_name = schema
        .overnight
        .clone()
        .or_else(|| series.has_overnight().then(|| "overnight".to_string()));
    if let Some(name) = &overnight_name {
        header.push(name.clone());
    }
    header.extend([schema.vix.clone(), "rvcc".into(), "annvol".into()]);
    wtr.write_record(&header)?;

    let rvcc = build_rvcc(series);
    let annvol = trailing_annualized_vol(&rvcc);
    let scale = schema.realized_scale.factor();
    for (i, row) in series.rows().iter().enumerate() {
        let mut rec = vec![
            row.date.format("%Y-%m-%d").to_string(),
            row.log_return.to_string(),
            (row.realized_measure / scale).to_string(),
        ];
        if overnight_name.is_some() {
            rec.push(row.overnight_return.to_string());
        }
        rec.push(row.vix.to_string());
        rec.push(rvcc[i].to_string());
        rec.push(annvol[i].map(|v| v.to_string()).unwrap_or_default());
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// `RVcc_t = RV_t + r_co,t^2`, element-wise.
pub fn build_rvcc(series: &MarketSeries) -> Vec<f64> {
    series.rows().iter().map(ObservationRow::rvcc).collect()
}

/// `100 * sqrt(252/22 * sum(window))` for a window of exactly 22 daily variances.
pub fn annualized_vol(rvcc_window: &[f64]) -> Result<f64> {
    if rvcc_window.len() != MONTH_DAYS {
        return Err(Error::Contract(format!(
            "annualized_vol needs exactly {MONTH_DAYS} values, got {}",
            rvcc_window.len()
        )));
    }
    if rvcc_window.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::Contract("annualized_vol needs nonnegative variances".into()));
    }
    Ok(annualize_sum(rvcc_window.iter().sum(), MONTH_DAYS))
}

/// Annualized percent volatility from a sum of `days` daily variances.
pub fn annualize_sum(variance_sum: f64, days: usize) -> f64 {
    100.0 * (TRADING_DAYS_PER_YEAR / days as f64 * variance_sum).sqrt()
}

/// Trailing 22-day annualized volatility at every date; `None` for the first 21.
pub fn trailing_annualized_vol(rvcc: &[f64]) -> Vec<Option<f64>> {
    (0..rvcc.len())
        .map(|t| {
            (t + 1 >= MONTH_DAYS)
                .then(|| annualize_sum(rvcc[t + 1 - MONTH_DAYS..=t].iter().sum(), MONTH_DAYS))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const CSV3: &str = "date,ret,rv,vix\n2020-01-02,0.01,1e-4,15.0\n2020-01-03,-0.02,2e-4,16.5\n2020-01-06,0.0,1.5e-4,14.2\n";

    fn row(day: u32, rv: f64, on: f64) -> ObservationRow {
        ObservationRow {
            date: NaiveDate::from_ymd_opt(2021, 3, day).unwrap(),
            log_return: 0.0,
            realized_measure: rv,
            overnight_return: on,
            vix: 20.0,
        }
    }

    #[test]
    fn parses_three_lines() {
        let s = read_csv(CSV3.as_bytes(), &CsvSchema::default(), 0.0).unwrap();
        assert_eq!(s.len(), 3);
        assert!(!s.has_overnight());
        assert_eq!(s.rows()[1].vix, 16.5);
    }

    #[test]
    fn zero_rv_is_rejected_with_date() {
        let csv = "date,ret,rv,vix\n2020-01-02,0.01,1e-4,15.0\n2020-01-03,-0.02,0,16.5\n";
        let err = read_csv(csv.as_bytes(), &CsvSchema::default(), 0.0).unwrap_err();
        match err {
            Error::Validation { date, .. } => assert_eq!(date, "2020-01-03"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_schema_error() {
        let csv = "date,ret,vix\n2020-01-02,0.01,15.0\n";
        assert!(matches!(
            read_csv(csv.as_bytes(), &CsvSchema::default(), 0.0),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn parse_error_reports_line() {
        let csv = "date,ret,rv,vix\n2020-01-02,0.01,1e-4,15.0\n2020-01-03,abc,1e-4,16.5\n";
        match read_csv(csv.as_bytes(), &CsvSchema::default(), 0.0).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn shuffled_dates_come_back_sorted() {
        let shuffled = "date,ret,rv,vix\n2020-01-06,0.0,1.5e-4,14.2\n2020-01-02,0.01,1e-4,15.0\n2020-01-03,-0.02,2e-4,16.5\n";
        let s = read_csv(shuffled.as_bytes(), &CsvSchema::default(), 0.0).unwrap();
        let mut expected: Vec<NaiveDate> = CSV3
            .lines()
            .skip(1)
            .map(|l| NaiveDate::parse_from_str(l.split(',').next().unwrap(), "%Y-%m-%d").unwrap())
            .collect();
        expected.sort();
        assert_eq!(s.dates(), expected);
    }

    #[test]
    fn duplicate_dates_rejected() {
        let csv = "date,ret,rv,vix\n2020-01-02,0.01,1e-4,15.0\n2020-01-02,0.01,1e-4,15.0\n";
        assert!(read_csv(csv.as_bytes(), &CsvSchema::default(), 0.0).is_err());
    }

    #[test]
    fn percent_squared_scale_converts_once() {
        let csv = "date,ret,rv,vix\n2020-01-02,0.01,1.0,15.0\n";
        let schema = CsvSchema {
            realized_scale: RealizedScale::PercentSquared,
            ..Default::default()
        };
        let s = read_csv(csv.as_bytes(), &schema, 0.0).unwrap();
        assert!((s.rows()[0].realized_measure - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn rvcc_examples() {
        let s = MarketSeries::new(vec![row(1, 1e-4, 0.0)], 0.0).unwrap();
        assert_eq!(build_rvcc(&s), vec![1e-4]);
        let s = MarketSeries::new(vec![row(1, 1e-4, 0.01)], 0.0).unwrap();
        assert!((build_rvcc(&s)[0] - 2e-4).abs() < 1e-18);
        let s = MarketSeries::new(vec![row(1, 2e-4, -0.02), row(2, 3e-4, 0.01)], 0.0).unwrap();
        let v = build_rvcc(&s);
        assert!((v[0] - 6e-4).abs() < 1e-18 && (v[1] - 4e-4).abs() < 1e-18);
    }

    #[test]
    fn annualized_vol_examples() {
        assert!((annualized_vol(&[1.0 / 252.0; 22]).unwrap() - 100.0).abs() < 1e-12);
        assert_eq!(annualized_vol(&[0.0; 22]).unwrap(), 0.0);
        assert!(matches!(annualized_vol(&[0.0; 21]), Err(Error::Contract(_))));
    }

    #[test]
    fn annualized_vol_matches_hand_evaluation() {
        // one month of whole-day variances, evaluated by hand:
        // sum = 0.00487, 252/22 * sum = 0.0557836..., sqrt * 100 = 23.61856...
        let w = [
            1.2e-4, 2.5e-4, 3.1e-4, 1.8e-4, 2.2e-4, 1.9e-4, 2.0e-4, 2.6e-4, 2.4e-4, 1.7e-4, 3.0e-4,
            2.8e-4, 2.1e-4, 1.6e-4, 2.3e-4, 2.7e-4, 2.9e-4, 1.5e-4, 2.2e-4, 2.0e-4, 1.9e-4, 2.3e-4,
        ];
        let sum: f64 = 0.00487;
        assert!((w.iter().sum::<f64>() - sum).abs() < 1e-13);
        let expected = 100.0 * (252.0 / 22.0 * sum).sqrt();
        assert!((annualized_vol(&w).unwrap() - expected).abs() < 1e-10);
        assert!((expected - 23.618560).abs() < 1e-5);
    }

    #[test]
    fn csv_round_trip_is_identity() {
        let schema = CsvSchema {
            overnight: Some("on".into()),
            ..Default::default()
        };
        let rows: Vec<_> = (1..=25)
            .map(|d| ObservationRow {
                date: NaiveDate::from_ymd_opt(2021, 1, d).unwrap(),
                log_return: 0.0123456789012345 * (d as f64).sin(),
                realized_measure: 1e-4 * (1.0 + d as f64 / 7.0),
                overnight_return: -0.001 * d as f64 / 3.0,
                vix: 14.0 + d as f64 / 9.0,
            })
            .collect();
        let s = MarketSeries::new(rows, 0.0).unwrap();
        let mut buf = Vec::new();
        write_csv(&s, &mut buf, &schema).unwrap();
        let back = read_csv(buf.as_slice(), &schema, 0.0).unwrap();
        assert_eq!(back, s);
    }
}
