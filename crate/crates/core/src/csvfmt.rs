//! Number formatting shared by the CSV writers.

/// Formats `x` with `digits` significant digits, in fixed notation when the
/// magnitude allows it. Re-formatting the parsed output yields the same text.
pub fn sig(x: f64, digits: usize) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0".to_string();
    }
    let digits = digits.max(1);
    let sci = format!("{:.*e}", digits - 1, x);
    let exp: i32 = sci
        .rsplit_once('e')
        .and_then(|(_, e)| e.parse().ok())
        .unwrap_or(0);
    if !(-5..=15).contains(&exp) {
        return sci;
    }
    let decimals = (digits as i32 - 1 - exp).max(0) as usize;
    format!("{:.*}", decimals, x)
}

/// Lossless round-trip representation (17 significant digits).
pub fn exact(x: f64) -> String {
    format!("{:.16e}", x)
}

/// Splits a CSV line on commas; no quoting is used by any file here.
pub fn fields(line: &str) -> Vec<&str> {
    line.split(',').map(str::trim).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn nine_digits() {
        assert_eq!(sig(99.467, 9), "99.4670000");
        assert_eq!(sig(0.0, 9), "0");
        assert_eq!(sig(-1.5, 3), "-1.50");
        assert_eq!(sig(99.999999999, 9), "100.000000");
    }

    proptest! {
        #[test]
        fn sig_is_idempotent(x in -1e6f64..1e6) {
            let s = sig(x, 9);
            let back: f64 = s.parse().unwrap();
            prop_assert_eq!(sig(back, 9), s);
        }

        #[test]
        fn exact_round_trips(x in proptest::num::f64::NORMAL) {
            let back: f64 = exact(x).parse().unwrap();
            prop_assert_eq!(back.to_bits(), x.to_bits());
        }
    }
}
