//! Monthly cross-sections of stock characteristics, market caps, and
//! next-month returns, plus the standardization step that turns raw
//! characteristics into the zero-mean, unit-variance columns the policy
//! weight rule expects.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Month identifiers are lexicographically sortable strings, e.g. `"1977-01"`.
pub type MonthId = String;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv error at line {line}: {source}")]
    Csv { line: u64, source: csv::Error },
    #[error("schema error: column `{0}` not found in header")]
    MissingColumn(String),
    #[error("duplicate key: asset `{asset}` appears twice in month {month} (line {line})")]
    DuplicateKey {
        month: MonthId,
        asset: String,
        line: u64,
    },
    #[error("parse error at line {line}, column `{column}`: `{value}` is not a finite number")]
    NonFinite {
        line: u64,
        column: String,
        value: String,
    },
    #[error("market cap must be strictly positive: {value} at line {line}")]
    NonPositiveMarketCap { line: u64, value: f64 },
    #[error("next-month return must exceed -1: {value} at line {line}")]
    ReturnBelowFloor { line: u64, value: f64 },
    #[error("month {month} has {n_assets} assets; need at least K+1 = {min}")]
    TooFewAssets {
        month: MonthId,
        n_assets: usize,
        min: usize,
    },
    #[error("panel contains no months")]
    EmptyPanel,
    #[error("month {0} not present in panel")]
    UnknownMonth(MonthId),
    #[error("degenerate characteristic: column `{column}` has zero cross-sectional variance in month {month}")]
    ZeroVarianceColumn { month: MonthId, column: String },
    #[error("window error: {available} of {requested} months available ending at {end_month}")]
    InsufficientHistory {
        end_month: MonthId,
        available: usize,
        requested: usize,
    },
    #[error("unknown weight scheme `{0}`; expected `value` or `equal`")]
    UnknownScheme(String),
    #[error("month {month}: {field} length {got} does not match asset count {expected}")]
    LengthMismatch {
        month: MonthId,
        field: &'static str,
        got: usize,
        expected: usize,
    },
}

/// Maps panel CSV columns onto their roles. The characteristic entries fix
/// both K and the column order of every matrix built from the file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PanelSchema {
    pub month: String,
    pub asset_id: String,
    pub characteristics: Vec<String>,
    pub market_cap: String,
    pub next_return: String,
}

impl PanelSchema {
    /// Conventional column names: `month`, `asset_id`, `market_cap`,
    /// `next_return` plus the given characteristic columns.
    pub fn with_characteristics<S: Into<String>>(characteristics: Vec<S>) -> Self {
        PanelSchema {
            month: "month".into(),
            asset_id: "asset_id".into(),
            characteristics: characteristics.into_iter().map(Into::into).collect(),
            market_cap: "market_cap".into(),
            next_return: "next_return".into(),
        }
    }

    pub fn k(&self) -> usize {
        self.characteristics.len()
    }
}

/// One month of raw data: asset ids, an `N x K` characteristic matrix,
/// market caps, and next-month simple returns in decimal units.
#[derive(Debug, Clone)]
pub struct MonthCrossSection {
    pub month: MonthId,
    pub asset_ids: Vec<String>,
    pub characteristics: DMatrix<f64>,
    pub market_caps: Vec<f64>,
    pub next_returns: Vec<f64>,
}

impl MonthCrossSection {
    pub fn n_assets(&self) -> usize {
        self.asset_ids.len()
    }
}

/// The estimation/out-of-sample data set: cross-sections keyed by month,
/// months in ascending order, with a fixed set of K characteristics.
///
/// Panels are immutable after construction and safe to share across
/// worker threads.
#[derive(Debug, Clone)]
pub struct CharacteristicPanel {
    months: Vec<MonthId>,
    cross_sections: Vec<MonthCrossSection>,
    characteristic_names: Vec<String>,
}

impl CharacteristicPanel {
    /// Assembles a panel from per-month cross-sections, sorting by month id
    /// and checking every invariant the loader enforces on files.
    pub fn from_cross_sections(
        mut cross_sections: Vec<MonthCrossSection>,
        characteristic_names: Vec<String>,
    ) -> Result<Self, DataError> {
        if cross_sections.is_empty() {
            return Err(DataError::EmptyPanel);
        }
        let k = characteristic_names.len();
        cross_sections.sort_by(|a, b| a.month.cmp(&b.month));
        for cs in &cross_sections {
            let n = cs.asset_ids.len();
            if cs.market_caps.len() != n {
                return Err(DataError::LengthMismatch {
                    month: cs.month.clone(),
                    field: "market_caps",
                    got: cs.market_caps.len(),
                    expected: n,
                });
            }
            if cs.next_returns.len() != n {
                return Err(DataError::LengthMismatch {
                    month: cs.month.clone(),
                    field: "next_returns",
                    got: cs.next_returns.len(),
                    expected: n,
                });
            }
            if cs.characteristics.nrows() != n || cs.characteristics.ncols() != k {
                return Err(DataError::LengthMismatch {
                    month: cs.month.clone(),
                    field: "characteristics",
                    got: cs.characteristics.nrows(),
                    expected: n,
                });
            }
            if n < k + 1 {
                return Err(DataError::TooFewAssets {
                    month: cs.month.clone(),
                    n_assets: n,
                    min: k + 1,
                });
            }
            let mut seen = HashSet::with_capacity(n);
            for (i, id) in cs.asset_ids.iter().enumerate() {
                if !seen.insert(id.as_str()) {
                    return Err(DataError::DuplicateKey {
                        month: cs.month.clone(),
                        asset: id.clone(),
                        line: i as u64 + 1,
                    });
                }
            }
            for (i, &cap) in cs.market_caps.iter().enumerate() {
                if !cap.is_finite() || cap <= 0.0 {
                    return Err(DataError::NonPositiveMarketCap {
                        line: i as u64 + 1,
                        value: cap,
                    });
                }
            }
            for (i, &r) in cs.next_returns.iter().enumerate() {
                if !r.is_finite() || r <= -1.0 {
                    return Err(DataError::ReturnBelowFloor {
                        line: i as u64 + 1,
                        value: r,
                    });
                }
            }
            if cs.characteristics.iter().any(|v| !v.is_finite()) {
                return Err(DataError::NonFinite {
                    line: 0,
                    column: "characteristics".into(),
                    value: "non-finite".into(),
                });
            }
        }
        let months = cross_sections.iter().map(|cs| cs.month.clone()).collect();
        Ok(CharacteristicPanel {
            months,
            cross_sections,
            characteristic_names,
        })
    }

    pub fn months(&self) -> &[MonthId] {
        &self.months
    }

    pub fn k(&self) -> usize {
        self.characteristic_names.len()
    }

    pub fn characteristic_names(&self) -> &[String] {
        &self.characteristic_names
    }

    pub fn cross_section(&self, month: &str) -> Option<&MonthCrossSection> {
        self.months
            .binary_search_by(|m| m.as_str().cmp(month))
            .ok()
            .map(|i| &self.cross_sections[i])
    }

    fn month_index(&self, month: &str) -> Result<usize, DataError> {
        self.months
            .binary_search_by(|m| m.as_str().cmp(month))
            .map_err(|_| DataError::UnknownMonth(month.to_string()))
    }

    /// Writes the panel back out in the standard CSV layout so synthetic
    /// panels can feed the same pipeline as real files.
    pub fn write_csv(&self, path: &Path) -> Result<(), DataError> {
        let file = File::create(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut out = BufWriter::new(file);
        let mut header = String::from("month,asset_id");
        for name in &self.characteristic_names {
            let _ = write!(header, ",{name}");
        }
        header.push_str(",market_cap,next_return");
        writeln!(out, "{header}").map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        for cs in &self.cross_sections {
            for i in 0..cs.n_assets() {
                let mut line = format!("{},{}", cs.month, cs.asset_ids[i]);
                for j in 0..self.k() {
                    let _ = write!(line, ",{}", fmt_f64(cs.characteristics[(i, j)]));
                }
                let _ = write!(
                    line,
                    ",{},{}",
                    fmt_f64(cs.market_caps[i]),
                    fmt_f64(cs.next_returns[i])
                );
                writeln!(out, "{line}").map_err(|source| DataError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
            }
        }
        out.flush().map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Full-precision float formatting for round-trippable CSV output.
pub(crate) fn fmt_f64(v: f64) -> String {
    let mut s = format!("{v}");
    if !s.contains(['.', 'e', 'E']) && v.is_finite() {
        s.push_str(".0");
    }
    s
}

/// One month prepared for the weight rule: characteristic columns with zero
/// sample mean and unit sample standard deviation, value weights, and the
/// month's next returns.
#[derive(Debug, Clone)]
pub struct StandardizedSlice {
    pub month: MonthId,
    /// `N x K`, each column standardized cross-sectionally.
    pub characteristics: DMatrix<f64>,
    /// Value (market-cap proportional) weights; non-negative, sum to one.
    pub benchmark_weights: DVector<f64>,
    pub next_returns: DVector<f64>,
}

impl StandardizedSlice {
    pub fn n_assets(&self) -> usize {
        self.benchmark_weights.len()
    }

    pub fn k(&self) -> usize {
        self.characteristics.ncols()
    }
}

/// Benchmark weighting schemes reported by the predictive summaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightScheme {
    /// Proportional to market capitalization.
    Value,
    /// 1/N on every sample stock.
    Equal,
}

impl std::str::FromStr for WeightScheme {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "value" => Ok(WeightScheme::Value),
            "equal" => Ok(WeightScheme::Equal),
            other => Err(DataError::UnknownScheme(other.to_string())),
        }
    }
}

/// Loads a panel CSV (header row, `.` decimal separator) through a schema
/// mapping. Rows are grouped by month; months are sorted ascending; K is
/// inferred from the schema.
pub fn load_panel(path: &Path, schema: &PanelSchema) -> Result<CharacteristicPanel, DataError> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    let headers = reader
        .headers()
        .map_err(|e| DataError::Csv { line: 1, source: e })?
        .clone();
    let col = |name: &str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let month_col = col(&schema.month)?;
    let asset_col = col(&schema.asset_id)?;
    let cap_col = col(&schema.market_cap)?;
    let ret_col = col(&schema.next_return)?;
    let char_cols = schema
        .characteristics
        .iter()
        .map(|c| col(c))
        .collect::<Result<Vec<_>, _>>()?;
    let k = char_cols.len();

    struct RawRow {
        line: u64,
        asset: String,
        characteristics: Vec<f64>,
        cap: f64,
        ret: f64,
    }
    // month -> rows, insertion order preserved then sorted at the end
    let mut by_month: Vec<(MonthId, Vec<RawRow>)> = Vec::new();
    let mut seen: HashSet<(MonthId, String)> = HashSet::new();

    for (idx, record) in reader.records().enumerate() {
        let line = idx as u64 + 2; // header is line 1
        let record = record.map_err(|e| DataError::Csv { line, source: e })?;
        let parse = |c: usize, name: &str| -> Result<f64, DataError> {
            let raw = record.get(c).unwrap_or("").trim();
            let v: f64 = raw.parse().map_err(|_| DataError::NonFinite {
                line,
                column: name.to_string(),
                value: raw.to_string(),
            })?;
            if !v.is_finite() {
                return Err(DataError::NonFinite {
                    line,
                    column: name.to_string(),
                    value: raw.to_string(),
                });
            }
            Ok(v)
        };
        let month = record.get(month_col).unwrap_or("").trim().to_string();
        let asset = record.get(asset_col).unwrap_or("").trim().to_string();
        if !seen.insert((month.clone(), asset.clone())) {
            return Err(DataError::DuplicateKey {
                month,
                asset,
                line,
            });
        }
        let cap = parse(cap_col, &schema.market_cap)?;
        if cap <= 0.0 {
            return Err(DataError::NonPositiveMarketCap { line, value: cap });
        }
        let ret = parse(ret_col, &schema.next_return)?;
        if ret <= -1.0 {
            return Err(DataError::ReturnBelowFloor { line, value: ret });
        }
        let mut characteristics = Vec::with_capacity(k);
        for (c, name) in char_cols.iter().zip(&schema.characteristics) {
            characteristics.push(parse(*c, name)?);
        }
        match by_month.iter_mut().find(|(m, _)| *m == month) {
            Some((_, rows)) => rows.push(RawRow {
                line,
                asset,
                characteristics,
                cap,
                ret,
            }),
            None => {
                by_month.push((
                    month,
                    vec![RawRow {
                        line,
                        asset,
                        characteristics,
                        cap,
                        ret,
                    }],
                ));
            }
        }
    }

    let mut cross_sections = Vec::with_capacity(by_month.len());
    for (month, rows) in by_month {
        let n = rows.len();
        if n < k + 1 {
            return Err(DataError::TooFewAssets {
                month,
                n_assets: n,
                min: k + 1,
            });
        }
        let mut characteristics = DMatrix::zeros(n, k);
        let mut asset_ids = Vec::with_capacity(n);
        let mut market_caps = Vec::with_capacity(n);
        let mut next_returns = Vec::with_capacity(n);
        for (i, row) in rows.into_iter().enumerate() {
            let _ = row.line;
            for (j, v) in row.characteristics.into_iter().enumerate() {
                characteristics[(i, j)] = v;
            }
            asset_ids.push(row.asset);
            market_caps.push(row.cap);
            next_returns.push(row.ret);
        }
        cross_sections.push(MonthCrossSection {
            month,
            asset_ids,
            characteristics,
            market_caps,
            next_returns,
        });
    }
    CharacteristicPanel::from_cross_sections(cross_sections, schema.characteristics.clone())
}

/// Standardizes one month: each characteristic column is shifted and scaled
/// to zero sample mean and unit sample standard deviation (N-1 divisor);
/// benchmark weights are market caps over their sum.
pub fn standardize_slice(
    panel: &CharacteristicPanel,
    month: &str,
) -> Result<StandardizedSlice, DataError> {
    let idx = panel.month_index(month)?;
    let cs = &panel.cross_sections[idx];
    let n = cs.n_assets();
    let k = panel.k();
    let mut x = cs.characteristics.clone();
    for j in 0..k {
        let mut col = x.column_mut(j);
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
        if var <= f64::EPSILON * mean.abs().max(1.0) {
            return Err(DataError::ZeroVarianceColumn {
                month: month.to_string(),
                column: panel.characteristic_names[j].clone(),
            });
        }
        let sd = var.sqrt();
        for v in col.iter_mut() {
            *v = (*v - mean) / sd;
        }
    }
    let total_cap: f64 = cs.market_caps.iter().sum();
    let benchmark_weights = DVector::from_iterator(n, cs.market_caps.iter().map(|c| c / total_cap));
    Ok(StandardizedSlice {
        month: cs.month.clone(),
        characteristics: x,
        benchmark_weights,
        next_returns: DVector::from_column_slice(&cs.next_returns),
    })
}

/// Benchmark weights for a month under the requested scheme; sums to one.
pub fn benchmark_weights(
    panel: &CharacteristicPanel,
    month: &str,
    scheme: WeightScheme,
) -> Result<DVector<f64>, DataError> {
    let idx = panel.month_index(month)?;
    let cs = &panel.cross_sections[idx];
    let n = cs.n_assets();
    Ok(match scheme {
        WeightScheme::Value => {
            let total: f64 = cs.market_caps.iter().sum();
            DVector::from_iterator(n, cs.market_caps.iter().map(|c| c / total))
        }
        WeightScheme::Equal => DVector::from_element(n, 1.0 / n as f64),
    })
}

/// Standardized slices for the trailing `length` months ending at
/// `end_month`, in ascending time order.
pub fn window(
    panel: &CharacteristicPanel,
    end_month: &str,
    length: usize,
) -> Result<Vec<StandardizedSlice>, DataError> {
    let end = panel.month_index(end_month)?;
    let available = end + 1;
    if available < length {
        return Err(DataError::InsufficientHistory {
            end_month: end_month.to_string(),
            available,
            requested: length,
        });
    }
    (end + 1 - length..=end)
        .map(|i| standardize_slice(panel, &panel.months[i].clone()))
        .collect()
}
