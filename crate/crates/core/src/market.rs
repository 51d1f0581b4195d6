//! Daily OHLC market data, forward labels and the trading-account mechanics
//! of the simulator.
//!
//! Orders execute at a single price (the simulator uses the day's open) with
//! no fees, no short selling and no margin. Shares move in whole lots.

use std::fmt;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Starting capital of every participant, in JPY.
pub const INITIAL_CASH: f64 = 3_000_000.0;

/// Shares per trading unit.
pub const DEFAULT_LOT_SIZE: u64 = 100;

/// Forward-label horizon in trading days.
pub const LABEL_HORIZON: usize = 5;

/// Ratio threshold separating BULL / NEUTRAL / BEAR.
pub const LABEL_THRESHOLD: f64 = 0.02;

// Ratios within this distance of the threshold are treated as on the boundary.
const BOUNDARY_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OhlcBar {
    pub date: NaiveDate,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
}

impl OhlcBar {
    fn check(&self, row: usize) -> Result<()> {
        let prices = [self.open, self.high, self.low, self.close];
        if prices.iter().any(|p| !p.is_finite() || *p <= 0.0) {
            return Err(Error::Validation(format!(
                "row {row}: prices must be finite and positive"
            )));
        }
        if !self.volume.is_finite() || self.volume < 0.0 {
            return Err(Error::Validation(format!(
                "row {row}: volume must be non-negative"
            )));
        }
        if self.high < self.low {
            return Err(Error::Validation(format!(
                "row {row}: high {} < low {}",
                self.high, self.low
            )));
        }
        if self.low > self.open.min(self.close) {
            return Err(Error::Validation(format!(
                "row {row}: low {} above open/close",
                self.low
            )));
        }
        if self.high < self.open.max(self.close) {
            return Err(Error::Validation(format!(
                "row {row}: high {} below open/close",
                self.high
            )));
        }
        Ok(())
    }

    /// Multiplies every price by `factor`, leaving volume alone.
    pub fn scaled(&self, factor: f64) -> OhlcBar {
        OhlcBar {
            open: self.open * factor,
            high: self.high * factor,
            low: self.low * factor,
            close: self.close * factor,
            ..*self
        }
    }
}

/// Ordered daily bars of one instrument. Dates are strictly increasing and
/// the series is never empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceSeries {
    code: String,
    bars: Vec<OhlcBar>,
}

impl PriceSeries {
    pub fn new(code: impl Into<String>, bars: Vec<OhlcBar>) -> Result<Self> {
        if bars.is_empty() {
            return Err(Error::EmptySeries);
        }
        for (i, bar) in bars.iter().enumerate() {
            bar.check(i + 1)?;
            if i > 0 && bar.date <= bars[i - 1].date {
                return Err(Error::Validation(format!(
                    "row {}: date {} not after {}",
                    i + 1,
                    bar.date,
                    bars[i - 1].date
                )));
            }
        }
        Ok(PriceSeries {
            code: code.into(),
            bars,
        })
    }

    pub fn code(&self) -> &str {
        &self.code
    }

    pub fn bars(&self) -> &[OhlcBar] {
        &self.bars
    }

    pub fn len(&self) -> usize {
        self.bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bars.is_empty()
    }

    pub fn bar(&self, day: usize) -> Result<&OhlcBar> {
        self.bars
            .get(day)
            .ok_or_else(|| Error::Range(format!("day {day} beyond series of {}", self.len())))
    }

    pub fn open(&self, day: usize) -> Result<f64> {
        self.bar(day).map(|b| b.open)
    }

    pub fn index_of(&self, date: NaiveDate) -> Option<usize> {
        self.bars.binary_search_by_key(&date, |b| b.date).ok()
    }

    pub fn scaled(&self, factor: f64) -> PriceSeries {
        PriceSeries {
            code: self.code.clone(),
            bars: self.bars.iter().map(|b| b.scaled(factor)).collect(),
        }
    }

    /// Mean close over `day+1 ..= day+horizon`.
    pub fn forward_mean_close(&self, day: usize, horizon: usize) -> Result<f64> {
        if horizon == 0 || day + horizon >= self.len() {
            return Err(Error::Range(format!(
                "day {day} needs {horizon} future bars, series has {}",
                self.len()
            )));
        }
        let sum: f64 = self.bars[day + 1..=day + horizon]
            .iter()
            .map(|b| b.close)
            .sum();
        Ok(sum / horizon as f64)
    }

    /// Ratio of the forward mean close to the day's open, minus one.
    pub fn forward_ratio(&self, day: usize, horizon: usize) -> Result<f64> {
        let mean = self.forward_mean_close(day, horizon)?;
        Ok(mean / self.bars[day].open - 1.0)
    }
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    date: NaiveDate,
    open: f64,
    high: f64,
    low: f64,
    close: f64,
    volume: f64,
}

const CSV_HEADER: [&str; 6] = ["date", "open", "high", "low", "close", "volume"];

/// Reads a `date,open,high,low,close,volume` file. The instrument code is
/// the file stem.
pub fn load_price_csv(path: impl AsRef<Path>) -> Result<PriceSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let code = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_price_csv(file, &code, path)
}

pub fn read_price_csv<R: std::io::Read>(reader: R, code: &str, origin: &Path) -> Result<PriceSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let parse_err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.is_empty() {
        return Err(Error::EmptySeries);
    }
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(parse_err(
            1,
            format!("expected header `{}`", CSV_HEADER.join(",")),
        ));
    }
    let mut bars = Vec::new();
    for (i, row) in rdr.deserialize::<CsvRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| parse_err(line, e.to_string()))?;
        bars.push(OhlcBar {
            date: row.date,
            open: row.open,
            high: row.high,
            low: row.low,
            close: row.close,
            volume: row.volume,
        });
    }
    PriceSeries::new(code, bars)
}

pub fn write_price_csv(series: &PriceSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(CSV_HEADER)?;
    for b in series.bars() {
        wtr.write_record([
            b.date.to_string(),
            b.open.to_string(),
            b.high.to_string(),
            b.low.to_string(),
            b.close.to_string(),
            b.volume.to_string(),
        ])?;
    }
    wtr.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PriceClass {
    Bull,
    Neutral,
    Bear,
}

impl PriceClass {
    pub const ALL: [PriceClass; 3] = [PriceClass::Bull, PriceClass::Neutral, PriceClass::Bear];

    pub fn index(self) -> usize {
        match self {
            PriceClass::Bull => 0,
            PriceClass::Neutral => 1,
            PriceClass::Bear => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<PriceClass> {
        Self::ALL.get(i).copied()
    }

    /// +1 for BULL, 0 for NEUTRAL, -1 for BEAR.
    pub fn sign(self) -> i32 {
        match self {
            PriceClass::Bull => 1,
            PriceClass::Neutral => 0,
            PriceClass::Bear => -1,
        }
    }

    /// Strict inequalities: a ratio exactly at +/-threshold is NEUTRAL.
    pub fn from_ratio(ratio: f64, threshold: f64) -> PriceClass {
        if ratio > threshold + BOUNDARY_EPS {
            PriceClass::Bull
        } else if ratio < -threshold - BOUNDARY_EPS {
            PriceClass::Bear
        } else {
            PriceClass::Neutral
        }
    }
}

impl fmt::Display for PriceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PriceClass::Bull => "BULL",
            PriceClass::Neutral => "NEUTRAL",
            PriceClass::Bear => "BEAR",
        })
    }
}

pub fn forward_label(
    series: &PriceSeries,
    day: usize,
    horizon: usize,
    threshold: f64,
) -> Result<PriceClass> {
    let ratio = series.forward_ratio(day, horizon)?;
    Ok(PriceClass::from_ratio(ratio, threshold))
}

/// Signed order size in lots: positive buys, negative sells, zero holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Order(pub i64);

impl Order {
    pub const HOLD: Order = Order(0);

    pub fn lots(self) -> i64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Account {
    cash: f64,
    shares: u64,
    lot_size: u64,
}

impl Default for Account {
    fn default() -> Self {
        Account {
            cash: INITIAL_CASH,
            shares: 0,
            lot_size: DEFAULT_LOT_SIZE,
        }
    }
}

impl Account {
    pub fn new(cash: f64, shares: u64, lot_size: u64) -> Result<Self> {
        if !cash.is_finite() || cash < 0.0 {
            return Err(Error::Validation(format!("cash {cash} must be >= 0")));
        }
        if lot_size == 0 {
            return Err(Error::Validation("lot size must be positive".into()));
        }
        if shares % lot_size != 0 {
            return Err(Error::Validation(format!(
                "{shares} shares is not a multiple of lot size {lot_size}"
            )));
        }
        Ok(Account {
            cash,
            shares,
            lot_size,
        })
    }

    pub fn cash(&self) -> f64 {
        self.cash
    }

    pub fn shares(&self) -> u64 {
        self.shares
    }

    pub fn lot_size(&self) -> u64 {
        self.lot_size
    }

    pub fn held_lots(&self) -> i64 {
        (self.shares / self.lot_size) as i64
    }

    /// Largest number of whole lots the cash can pay for at `price`.
    pub fn affordable_lots(&self, price: f64) -> i64 {
        if !(price > 0.0) {
            return 0;
        }
        let lot_cost = self.lot_size as f64 * price;
        let mut lots = (self.cash / lot_cost).floor() as i64;
        while lots > 0 && lots as f64 * lot_cost > self.cash {
            lots -= 1;
        }
        lots.max(0)
    }

    /// Inclusive range of feasible orders at `price`.
    pub fn feasible_range(&self, price: f64) -> (i64, i64) {
        (-self.held_lots(), self.affordable_lots(price))
    }

    pub fn clamp_order(&self, lots: i64, price: f64) -> Order {
        let (lo, hi) = self.feasible_range(price);
        Order(lots.clamp(lo, hi))
    }
}

pub fn apply_order(account: &Account, order: Order, price: f64) -> Result<Account> {
    if !(price > 0.0) || !price.is_finite() {
        return Err(Error::RejectedOrder(format!("invalid price {price}")));
    }
    let lots = order.lots();
    if lots == 0 {
        return Ok(*account);
    }
    let lot = account.lot_size;
    if lots > 0 {
        let cost = lots as f64 * lot as f64 * price;
        if cost > account.cash {
            return Err(Error::RejectedOrder(format!(
                "buying {lots} lots costs {cost} JPY but only {} JPY available",
                account.cash
            )));
        }
        Ok(Account {
            cash: account.cash - cost,
            shares: account.shares + lots as u64 * lot,
            lot_size: lot,
        })
    } else {
        let sell = lots.unsigned_abs();
        if sell > account.shares / lot {
            return Err(Error::RejectedOrder(format!(
                "selling {sell} lots but only {} held",
                account.shares / lot
            )));
        }
        Ok(Account {
            cash: account.cash + sell as f64 * lot as f64 * price,
            shares: account.shares - sell * lot,
            lot_size: lot,
        })
    }
}

pub fn total_assets(account: &Account, price: f64) -> f64 {
    account.cash + account.shares as f64 * price
}

/// Converts held shares to cash at the mean close of the five days after
/// `last_day`.
pub fn final_liquidation(account: &Account, series: &PriceSeries, last_day: usize) -> Result<f64> {
    let mean = series.forward_mean_close(last_day, LABEL_HORIZON)?;
    Ok(account.cash + account.shares as f64 * mean)
}
