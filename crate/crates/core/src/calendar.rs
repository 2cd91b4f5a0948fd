//! Calendar-month arithmetic.

use std::fmt;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

/// A calendar month, stored as `year * 12 + (month - 1)` so that month
/// differences are plain integer subtraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct YearMonth(i32);

impl YearMonth {
    pub fn new(year: i32, month: u32) -> Self {
        assert!((1..=12).contains(&month), "month out of range: {month}");
        YearMonth(year * 12 + month as i32 - 1)
    }

    pub fn of(date: NaiveDate) -> Self {
        Self::new(date.year(), date.month())
    }

    pub fn year(self) -> i32 {
        self.0.div_euclid(12)
    }

    /// 1..=12
    pub fn month(self) -> u32 {
        self.0.rem_euclid(12) as u32 + 1
    }

    pub fn first_day(self) -> NaiveDate {
        NaiveDate::from_ymd_opt(self.year(), self.month(), 1).expect("valid first day")
    }

    pub fn days(self) -> u32 {
        days_in_month(self.year(), self.month())
    }

    pub fn plus(self, months: i32) -> Self {
        YearMonth(self.0 + months)
    }

    /// Number of calendar-month boundaries from `earlier` to `self`.
    pub fn months_since(self, earlier: YearMonth) -> i32 {
        self.0 - earlier.0
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year(), self.month())
    }
}

pub fn days_in_month(year: i32, month: u32) -> u32 {
    match month {
        1 | 3 | 5 | 7 | 8 | 10 | 12 => 31,
        4 | 6 | 9 | 11 => 30,
        2 if NaiveDate::from_ymd_opt(year, 2, 29).is_some() => 29,
        2 => 28,
        _ => panic!("month out of range: {month}"),
    }
}

/// A calendar quarter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Quarter {
    pub year: i32,
    /// 1..=4
    pub quarter: u32,
}

impl Quarter {
    pub fn new(year: i32, quarter: u32) -> Self {
        assert!(
            (1..=4).contains(&quarter),
            "quarter out of range: {quarter}"
        );
        Quarter { year, quarter }
    }

    pub fn of(date: NaiveDate) -> Self {
        Quarter::new(date.year(), (date.month() - 1) / 3 + 1)
    }

    pub fn start(self) -> NaiveDate {
        NaiveDate::from_ymd_opt(self.year, (self.quarter - 1) * 3 + 1, 1).expect("valid quarter")
    }

    pub fn next(self) -> Self {
        if self.quarter == 4 {
            Quarter::new(self.year + 1, 1)
        } else {
            Quarter::new(self.year, self.quarter + 1)
        }
    }

    /// Parses `2015Q1` style labels.
    pub fn parse(s: &str) -> Option<Self> {
        let (y, q) = s.trim().split_once(['Q', 'q'])?;
        let year = y.parse().ok()?;
        let quarter: u32 = q.parse().ok()?;
        (1..=4)
            .contains(&quarter)
            .then(|| Quarter::new(year, quarter))
    }
}

impl fmt::Display for Quarter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}Q{}", self.year, self.quarter)
    }
}

pub fn parse_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn month_roundtrip_and_arithmetic() {
        let jan = YearMonth::new(2018, 1);
        assert_eq!(jan.plus(-1), YearMonth::new(2017, 12));
        assert_eq!(YearMonth::new(2018, 3).months_since(jan), 2);
        assert_eq!(jan.plus(14).to_string(), "2019-03");
    }

    #[test]
    fn leap_february() {
        assert_eq!(YearMonth::new(2020, 2).days(), 29);
        assert_eq!(YearMonth::new(2019, 2).days(), 28);
        assert_eq!(YearMonth::new(1900, 2).days(), 28);
        assert_eq!(YearMonth::new(2018, 3).days(), 31);
    }

    #[test]
    fn quarters() {
        let d = NaiveDate::from_ymd_opt(2015, 2, 10).unwrap();
        assert_eq!(Quarter::of(d), Quarter::new(2015, 1));
        assert_eq!(Quarter::new(2015, 4).next(), Quarter::new(2016, 1));
        assert_eq!(Quarter::parse("2015Q3"), Some(Quarter::new(2015, 3)));
        assert_eq!(Quarter::parse("2015Q5"), None);
    }
}
