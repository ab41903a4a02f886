//! Monthly calendar index used throughout the panel types.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// A calendar month, stored as year and month number.
///
/// Parses from and displays as `YYYY-MM`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct YearMonth {
    year: i32,
    month: u8,
}

impl YearMonth {
    pub fn new(year: i32, month: u8) -> Result<Self, DateParseError> {
        if !(1..=12).contains(&month) {
            return Err(DateParseError::MonthOutOfRange(month));
        }
        Ok(Self { year, month })
    }

    pub fn year(&self) -> i32 {
        self.year
    }

    pub fn month(&self) -> u8 {
        self.month
    }

    /// The following calendar month.
    pub fn next(&self) -> YearMonth {
        if self.month == 12 {
            YearMonth { year: self.year + 1, month: 1 }
        } else {
            YearMonth { year: self.year, month: self.month + 1 }
        }
    }

    /// Number of months from `other` to `self` (positive when `self` is later).
    pub fn months_since(&self, other: &YearMonth) -> i64 {
        (self.year as i64 - other.year as i64) * 12 + (self.month as i64 - other.month as i64)
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum DateParseError {
    #[error("date `{0}` is not in YYYY-MM format")]
    BadFormat(String),
    #[error("month {0} out of range 1..=12")]
    MonthOutOfRange(u8),
}

impl FromStr for YearMonth {
    type Err = DateParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        // Accept YYYY-MM, tolerating a -DD suffix some exports carry.
        let mut parts = s.trim().splitn(3, '-');
        let year = parts
            .next()
            .and_then(|p| p.parse::<i32>().ok())
            .ok_or_else(|| DateParseError::BadFormat(s.to_string()))?;
        let month = parts
            .next()
            .and_then(|p| p.parse::<u8>().ok())
            .ok_or_else(|| DateParseError::BadFormat(s.to_string()))?;
        YearMonth::new(year, month)
    }
}

impl TryFrom<String> for YearMonth {
    type Error = DateParseError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<YearMonth> for String {
    fn from(ym: YearMonth) -> String {
        ym.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display_round_trip() {
        let ym: YearMonth = "1999-01".parse().unwrap();
        assert_eq!(ym.year(), 1999);
        assert_eq!(ym.month(), 1);
        assert_eq!(ym.to_string(), "1999-01");
    }

    #[test]
    fn next_wraps_year() {
        let ym: YearMonth = "2022-12".parse().unwrap();
        assert_eq!(ym.next().to_string(), "2023-01");
    }

    #[test]
    fn months_since() {
        let a: YearMonth = "2000-03".parse().unwrap();
        let b: YearMonth = "1999-01".parse().unwrap();
        assert_eq!(a.months_since(&b), 14);
    }

    #[test]
    fn rejects_bad_month() {
        assert!("2000-13".parse::<YearMonth>().is_err());
        assert!("garbage".parse::<YearMonth>().is_err());
    }

    #[test]
    fn accepts_day_suffix() {
        let ym: YearMonth = "2000-07-01".parse().unwrap();
        assert_eq!(ym.to_string(), "2000-07");
    }
}
