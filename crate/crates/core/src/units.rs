//! Quantities on the wire: sizes in bits and rates in bit/s with optional
//! `k`/`M`/`G` prefixes (decimal), e.g. `"150Mb/s"`, `"1 Gbps"`, `"500Mb"`.

use std::fmt;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot parse `{input}` as a {kind}: {reason}")]
pub struct UnitError {
    pub input: String,
    pub kind: &'static str,
    pub reason: &'static str,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Size,
    Rate,
}

impl Kind {
    fn name(self) -> &'static str {
        match self {
            Kind::Size => "size",
            Kind::Rate => "rate",
        }
    }
}

fn parse(input: &str, kind: Kind) -> Result<f64, UnitError> {
    let err = |reason| UnitError {
        input: input.to_string(),
        kind: kind.name(),
        reason,
    };
    let trimmed = input.trim();
    // No unit starts with `e`, so an `e` always belongs to the exponent.
    let split = trimmed
        .find(|c: char| c.is_ascii_alphabetic() && c != 'e' && c != 'E' || c == '/')
        .unwrap_or(trimmed.len());
    let (number, unit) = trimmed.split_at(split);
    let value: f64 = number.trim().parse().map_err(|_| err("invalid number"))?;
    if !value.is_finite() {
        return Err(err("value must be finite"));
    }
    let mut unit = unit.trim();
    if kind == Kind::Rate {
        for suffix in ["/s", "ps"] {
            if let Some(stripped) = unit.strip_suffix(suffix) {
                unit = stripped;
                break;
            }
        }
    }
    let scale = match unit {
        "" | "b" | "bit" => 1.0,
        "kb" | "kbit" => 1e3,
        "Mb" | "Mbit" => 1e6,
        "Gb" | "Gbit" => 1e9,
        _ => return Err(err("unknown unit (expected b, kb, Mb or Gb)")),
    };
    Ok(value * scale)
}

/// Parses a size in bits.
pub fn parse_size(input: &str) -> Result<f64, UnitError> {
    parse(input, Kind::Size)
}

/// Parses a rate in bit/s; `/s` or `ps` is optional.
pub fn parse_rate(input: &str) -> Result<f64, UnitError> {
    parse(input, Kind::Rate)
}

/// Rounds a rate to 0.1 Mb/s and returns it in Mb/s.
pub fn round_mbps(rate: f64) -> f64 {
    (rate / 1e5).round() / 10.0
}

/// A rate or size read from a config document: either a bare number in base
/// units or a string with a unit suffix.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct Bits(pub f64);

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct BitRate(pub f64);

impl fmt::Display for Bits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}b", self.0)
    }
}

impl fmt::Display for BitRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}b/s", self.0)
    }
}

struct QuantityVisitor(Kind);

impl<'de> Visitor<'de> for QuantityVisitor {
    type Value = f64;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        write!(
            f,
            "a number or a {} string such as \"100Mb\"",
            self.0.name()
        )
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
        Ok(v)
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
        Ok(v as f64)
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
        Ok(v as f64)
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
        parse(v, self.0).map_err(E::custom)
    }
}

impl<'de> Deserialize<'de> for Bits {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        d.deserialize_any(QuantityVisitor(Kind::Size)).map(Bits)
    }
}

impl<'de> Deserialize<'de> for BitRate {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        d.deserialize_any(QuantityVisitor(Kind::Rate)).map(BitRate)
    }
}

impl Serialize for Bits {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.0)
    }
}

impl Serialize for BitRate {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.0)
    }
}
