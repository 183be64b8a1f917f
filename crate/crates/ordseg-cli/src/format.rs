//! Output formatting: percentages at one decimal (table style), scalars at
//! twelve significant digits (oracle-comparison style).

/// One decimal place, as in the result tables.
pub fn percent(v: f64) -> String {
    format!("{v:.1}")
}

/// Twelve significant digits in plain decimal notation.
pub fn sig12(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (11 - magnitude).max(0) as usize;
    format!("{v:.decimals$}")
}
