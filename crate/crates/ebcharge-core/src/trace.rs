//! Episode trace export: one row per simulated step.

use std::path::Path;

use crate::config::format_clock;
use crate::error::Result;

pub const TRACE_HEADER: &str = "t,clock,B,k,tau,soc,price,power,reward,option";

/// One step of an episode, in the state it was taken from.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub t: u32,
    pub clock_min: u32,
    pub flag: u8,
    pub k: u32,
    pub tau: u32,
    pub soc: f64,
    pub price: f64,
    pub power_kw: f64,
    pub reward: f64,
    /// Active charging target, when the policy uses one.
    pub option_kwh: Option<f64>,
}

impl TraceRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.t,
            format_clock(self.clock_min),
            self.flag,
            self.k,
            self.tau,
            self.soc,
            self.price,
            self.power_kw,
            self.reward,
            self.option_kwh.map(|o| o.to_string()).unwrap_or_default(),
        )
    }
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.to_csv());
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
