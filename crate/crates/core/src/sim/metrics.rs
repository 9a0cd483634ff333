//! Per-window metrics, aggregation across windows and CSV output.

use std::io::{self, Write};

use crate::traffic::ServiceClass;

use super::SimError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    /// Mean normalized utility over the class's users, in `[0, 1]`.
    pub avg_utility: f64,
    pub avg_throughput_bps: f64,
    /// Dropped over offered bits for the class within the window.
    pub drop_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub window_index: usize,
    /// Indexed like [`ServiceClass::ALL`]; `None` for classes without users.
    pub classes: [Option<ClassMetrics>; 3],
}

impl MetricsRecord {
    pub fn class(&self, class: ServiceClass) -> Option<&ClassMetrics> {
        self.classes[class.index()].as_ref()
    }
}

/// Sample mean and half-width of the normal-approximation 95% interval.
/// A single value has half-width 0.
pub fn mean_ci95(values: &[f64]) -> Option<(f64, f64)> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Some((mean, 1.96 * (var / n as f64).sqrt()))
}

/// Mean and 95% half-width of a class's window utilities.
pub fn average_utility(
    records: &[MetricsRecord],
    class: ServiceClass,
) -> Result<(f64, f64), SimError> {
    let values: Vec<f64> = records
        .iter()
        .filter_map(|r| r.class(class).map(|m| m.avg_utility))
        .collect();
    mean_ci95(&values).ok_or(SimError::EmptyInput)
}

/// Formats like C's `%.9g`.
pub fn fmt_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..9).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (8 - exp) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub const SIMULATION_HEADER: &str = "window,class,avg_utility,avg_throughput_bps,drop_rate";
pub const SWEEP_HEADER: &str = "param_value,class,mean_utility,ci95,mean_throughput_bps,drop_rate";

pub fn write_simulation_csv<W: Write>(records: &[MetricsRecord], mut out: W) -> io::Result<()> {
    writeln!(out, "{SIMULATION_HEADER}")?;
    for r in records {
        for class in ServiceClass::ALL {
            if let Some(m) = r.class(class) {
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    r.window_index,
                    class,
                    fmt_sig9(m.avg_utility),
                    fmt_sig9(m.avg_throughput_bps),
                    fmt_sig9(m.drop_rate)
                )?;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub param_value: u64,
    pub class: ServiceClass,
    pub mean_utility: f64,
    pub ci95: f64,
    pub mean_throughput_bps: f64,
    pub drop_rate: f64,
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> io::Result<()> {
    writeln!(out, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.param_value,
            r.class,
            fmt_sig9(r.mean_utility),
            fmt_sig9(r.ci95),
            fmt_sig9(r.mean_throughput_bps),
            fmt_sig9(r.drop_rate)
        )?;
    }
    Ok(())
}
