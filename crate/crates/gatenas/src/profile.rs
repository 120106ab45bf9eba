//! Latency profile text files.
//!
//! One sample per line: `H W k stride groups flops latency_ms`, separated by
//! whitespace. `#` starts a comment. Samples sharing the first five fields
//! belong to one condition and are fitted together.
//!
//! ```text
//! # H  W  k stride groups  flops      latency_ms
//!  32 32  3      1      1  1.0e8      0.7
//!  32 32  3      1      1  2.0e8      0.9
//! ```

use std::fmt::Write as _;
use std::path::Path;

use gatenas_core::resource::{AffineFit, ConditionKey, LatencyModel, LatencyProfile};

use crate::{fsutil, Error, Result};

pub const HEADER: &str = "# H W k stride groups flops latency_ms";

pub fn parse(text: &str, file: &str) -> Result<LatencyProfile> {
    let mut profile = LatencyProfile::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("");
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse { file: file.into(), line: i + 1, message };
        if fields.len() != 7 {
            return Err(err(format!("expected 7 fields (H W k stride groups flops latency_ms), found {}", fields.len())));
        }
        let mut ints = [0usize; 5];
        for (j, name) in ["H", "W", "k", "stride", "groups"].iter().enumerate() {
            ints[j] = match fields[j].parse::<usize>() {
                Ok(v) if v > 0 => v,
                _ => return Err(err(format!("{name} must be a positive integer, found `{}`", fields[j]))),
            };
        }
        let mut reals = [0f64; 2];
        for (j, name) in ["flops", "latency_ms"].iter().enumerate() {
            reals[j] = match fields[5 + j].parse::<f64>() {
                Ok(v) if v.is_finite() && v >= 0.0 => v,
                _ => return Err(err(format!("{name} must be a non-negative number, found `{}`", fields[5 + j]))),
            };
        }
        let key = ConditionKey { height: ints[0], width: ints[1], kernel: ints[2], stride: ints[3], groups: ints[4] };
        profile.push(key, reals[0], reals[1]);
    }
    Ok(profile)
}

pub fn load(path: &Path) -> Result<LatencyProfile> {
    parse(&fsutil::read_string(path)?, &path.display().to_string())
}

/// Canonical text: conditions in key order, samples in insertion order.
pub fn serialize(profile: &LatencyProfile) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    for (k, samples) in &profile.samples {
        for (flops, ms) in samples {
            let _ = writeln!(out, "{} {} {} {} {} {flops:?} {ms:?}", k.height, k.width, k.kernel, k.stride, k.groups);
        }
    }
    out
}

/// `v` rounded to 12 significant digits, printed in shortest form.
pub fn tidy(v: f64) -> String {
    let rounded: f64 = format!("{v:.11e}").parse().unwrap_or(v);
    format!("{rounded:?}")
}

pub fn format_fit(key: &ConditionKey, fit: &AffineFit) -> String {
    format!("{key}: a={} b={}", tidy(fit.a), tidy(fit.b))
}

/// One line per condition, plus a note for clamped slopes.
pub fn format_model(model: &LatencyModel) -> String {
    let mut out = String::new();
    for (key, fit) in &model.fits {
        out.push_str(&format_fit(key, fit));
        if model.clamped.contains(key) {
            out.push_str(" (negative slope clamped to 0)");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_reports_lines() {
        let p = parse("# header\n8 8 3 1 1 100 0.5 # trailing\n\n8 8 3 1 1 200.0 0.75\n", "p").unwrap();
        assert_eq!(p.samples.len(), 1);
        assert_eq!(p.samples.values().next().unwrap(), &vec![(100.0, 0.5), (200.0, 0.75)]);
        let e = parse("8 8 3 1 1 100 0.5\n8 8 3 1 100 0.5\n", "p").unwrap_err();
        assert!(e.to_string().starts_with("p:2: expected 7 fields"), "{e}");
        let e = parse("8 8 x 1 1 100 0.5\n", "p").unwrap_err();
        assert!(e.to_string().starts_with("p:1: k must be"), "{e}");
    }

    #[test]
    fn tidy_hides_rounding_noise() {
        assert_eq!(tidy(2.0000000000000004e-9), "2e-9");
        assert_eq!(tidy(0.49999999999999994), "0.5");
    }
}
