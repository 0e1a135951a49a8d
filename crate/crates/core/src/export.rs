//! Small formatting helpers for deterministic, full-precision file output.

/// Format a double with 17 significant digits, C `%.17g` style: plain decimal
/// notation for moderate exponents, scientific otherwise, trailing zeros trimmed.
pub fn fmt_g17(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{:.16e}", x);
    // Rust prints e.g. "1.2339999999999999e2"; split mantissa and exponent.
    let (mant, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    let mant = mant.trim_end_matches('0').trim_end_matches('.');
    if (-5..17).contains(&exp) {
        // %.17g uses plain notation when the exponent is in this range.
        let digits: String = mant.chars().filter(|c| c.is_ascii_digit()).collect();
        let neg = mant.starts_with('-');
        let point = exp + 1; // digits before the decimal point
        let mut s = String::new();
        if neg {
            s.push('-');
        }
        if point <= 0 {
            s.push_str("0.");
            for _ in 0..(-point) {
                s.push('0');
            }
            s.push_str(&digits);
        } else if (point as usize) >= digits.len() {
            s.push_str(&digits);
            for _ in 0..(point as usize - digits.len()) {
                s.push('0');
            }
        } else {
            s.push_str(&digits[..point as usize]);
            s.push('.');
            s.push_str(&digits[point as usize..]);
        }
        s
    } else {
        format!("{mant}e{exp:+03}")
    }
}
