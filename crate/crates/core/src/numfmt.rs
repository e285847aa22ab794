/// Seventeen significant digits, enough to round-trip any finite `f64`.
pub(crate) fn sig17(x: f64) -> String {
    if x == 0.0 {
        // keeps -0.0 distinguishable
        return if x.is_sign_negative() { "-0.0".into() } else { "0.0".into() };
    }
    format!("{:.16e}", x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        for &x in &[933.79, -15.0, 1e-300, 0.1 + 0.2, f64::MAX, -0.0] {
            let s = sig17(x);
            let back: f64 = serde_json::from_str(&s).unwrap();
            assert_eq!(back.to_bits(), x.to_bits(), "{s}");
        }
    }
}
