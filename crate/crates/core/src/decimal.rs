//! Fixed-precision decimal encoding for persisted scores.
//!
//! Every score that reaches disk is written as a decimal string with exactly
//! six fractional digits (`"0.700000"`). Values are quantized to that grid
//! when the owning type is constructed, so a value read back from disk is
//! bit-identical to the one that was written.

use serde::{de, Deserializer, Serializer};

pub const DIGITS: usize = 6;
const SCALE: f64 = 1_000_000.0;

/// Snap a value onto the 1e-6 grid used by the on-disk format.
pub fn quantize(value: f64) -> f64 {
    if !value.is_finite() {
        return value;
    }
    let snapped = (value * SCALE).round() / SCALE;
    // Route through the textual form so `parse(format(x)) == x` holds exactly.
    format(snapped).parse().unwrap_or(snapped)
}

pub fn format(value: f64) -> String {
    let s = format!("{:.*}", DIGITS, value);
    // -0.000000 and 0.000000 must encode identically.
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

pub fn parse(text: &str) -> Result<f64, String> {
    let value: f64 = text
        .trim()
        .parse()
        .map_err(|e| format!("invalid decimal {text:?}: {e}"))?;
    if !value.is_finite() {
        return Err(format!("non-finite decimal {text:?}"));
    }
    Ok(quantize(value))
}

pub fn serialize<S: Serializer>(value: &f64, serializer: S) -> Result<S::Ok, S::Error> {
    serializer.serialize_str(&format(*value))
}

pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<f64, D::Error> {
    struct Visitor;

    impl de::Visitor<'_> for Visitor {
        type Value = f64;

        fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
            f.write_str("a decimal string or number")
        }

        fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
            parse(v).map_err(E::custom)
        }

        fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
            Ok(quantize(v))
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
            Ok(v as f64)
        }
    }

    deserializer.deserialize_any(Visitor)
}

/// Same encoding for optional values (`null` when absent).
pub mod option {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &Option<f64>, serializer: S) -> Result<S::Ok, S::Error> {
        match value {
            Some(v) => serializer.serialize_some(&super::format(*v)),
            None => serializer.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<Option<f64>, D::Error> {
        #[derive(Deserialize)]
        struct Wrapped(#[serde(with = "super")] f64);
        Ok(Option::<Wrapped>::deserialize(deserializer)?.map(|w| w.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn formats_six_digits() {
        assert_eq!(format(0.7), "0.700000");
        assert_eq!(format(2.0 / 3.0), "0.666667");
        assert_eq!(format(-0.0), "0.000000");
        assert_eq!(format(-1e-9), "0.000000");
        assert_eq!(format(-0.22), "-0.220000");
    }

    proptest! {
        #[test]
        fn quantized_values_round_trip(x in -1.0e6f64..1.0e6) {
            let q = quantize(x);
            prop_assert_eq!(parse(&format(q)).unwrap(), q);
            prop_assert_eq!(quantize(q), q);
        }
    }
}
