//! Count levels used throughout the lab.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// One of the six standard count levels, stored as an integer percentage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Dose(u8);

impl Dose {
    pub const P1: Dose = Dose(1);
    pub const P2: Dose = Dose(2);
    pub const P5: Dose = Dose(5);
    pub const P10: Dose = Dose(10);
    pub const P25: Dose = Dose(25);
    pub const P50: Dose = Dose(50);

    /// All standard levels, lowest count first.
    pub const STANDARD: [Dose; 6] = [Dose::P1, Dose::P2, Dose::P5, Dose::P10, Dose::P25, Dose::P50];

    pub fn from_percent(percent: u32) -> Result<Self> {
        Dose::STANDARD
            .iter()
            .copied()
            .find(|d| u32::from(d.0) == percent)
            .ok_or_else(|| Error::Validation(format!("{percent}% is not a standard count level")))
    }

    /// Accepts fractions within 1e-9 of a standard level.
    pub fn from_fraction(fraction: f64) -> Result<Self> {
        Dose::STANDARD
            .iter()
            .copied()
            .find(|d| (d.fraction() - fraction).abs() < 1e-9)
            .ok_or_else(|| Error::Validation(format!("{fraction} is not a standard dose fraction")))
    }

    pub fn percent(self) -> u32 {
        u32::from(self.0)
    }

    pub fn fraction(self) -> f64 {
        f64::from(self.0) / 100.0
    }

    /// File stem inside a subject directory, e.g. `d001` for 1 %.
    pub fn file_stem(self) -> String {
        format!("d{:03}", self.0)
    }

    pub fn from_file_stem(stem: &str) -> Option<Self> {
        let digits = stem.strip_prefix('d')?;
        if digits.len() != 3 || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        Dose::from_percent(digits.parse().ok()?).ok()
    }
}

impl fmt::Display for Dose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}%", self.0)
    }
}

impl FromStr for Dose {
    type Err = Error;

    /// Parses `0.05`, `5%` or `d005`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(p) = s.strip_suffix('%') {
            let p: u32 = p
                .trim()
                .parse()
                .map_err(|_| Error::Validation(format!("bad dose percentage '{s}'")))?;
            return Dose::from_percent(p);
        }
        if let Some(d) = Dose::from_file_stem(s) {
            return Ok(d);
        }
        let f: f64 = s
            .parse()
            .map_err(|_| Error::Validation(format!("bad dose '{s}'")))?;
        Dose::from_fraction(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_stems() {
        assert_eq!(Dose::P1.file_stem(), "d001");
        assert_eq!(Dose::P50.file_stem(), "d050");
        for d in Dose::STANDARD {
            assert_eq!(Dose::from_file_stem(&d.file_stem()), Some(d));
        }
        assert_eq!(Dose::from_file_stem("d003"), None);
        assert_eq!(Dose::from_file_stem("full"), None);
    }

    #[test]
    fn parse_forms() {
        assert_eq!("0.05".parse::<Dose>().unwrap(), Dose::P5);
        assert_eq!("25%".parse::<Dose>().unwrap(), Dose::P25);
        assert_eq!("d010".parse::<Dose>().unwrap(), Dose::P10);
        assert!("0.07".parse::<Dose>().is_err());
    }
}
