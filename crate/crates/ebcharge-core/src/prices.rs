//! Hourly electricity-price ingestion and per-step replay.
//!
//! Price files are comma-separated with a `timestamp,price_usd_per_kwh`
//! header, one row per hour, ISO-8601 timestamps, chronological and gap-free.
//! Hourly prices are expanded to simulation steps by zero-order hold (each
//! hourly price repeated for every step the hour covers).

use std::path::Path;

use chrono::{NaiveDateTime, Timelike};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};

pub const PRICE_FILE_HEADER: &str = "timestamp,price_usd_per_kwh";

/// Per-step electricity prices for a span of whole days.
#[derive(Debug, Clone)]
pub struct PriceSeries {
    per_step: Vec<f64>,
    pub steps_per_hour: usize,
    /// Clock time of step 0.
    pub origin: NaiveDateTime,
}

impl PriceSeries {
    /// Loads a price file, or a directory of daily files merged
    /// chronologically by their first timestamp.
    pub fn load(path: &Path, dt_minutes: u32) -> Result<PriceSeries> {
        let mut rows = Vec::new();
        if path.is_dir() {
            let mut files: Vec<_> = std::fs::read_dir(path)?
                .collect::<std::io::Result<Vec<_>>>()?
                .into_iter()
                .map(|e| e.path())
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(Error::Ingestion(format!(
                    "no price files in directory {}",
                    path.display()
                )));
            }
            for f in files {
                rows.extend(parse_price_file(&f)?);
            }
            rows.sort_by_key(|r| r.0);
        } else {
            rows = parse_price_file(path)?;
        }
        Self::from_hourly(&rows, dt_minutes)
    }

    /// Builds the per-step series from hourly rows, rejecting gaps,
    /// duplicates, and out-of-order timestamps.
    pub fn from_hourly(rows: &[(NaiveDateTime, f64)], dt_minutes: u32) -> Result<PriceSeries> {
        if dt_minutes == 0 || 60 % dt_minutes != 0 {
            return Err(Error::Config(format!(
                "dt_minutes must divide 60, got {dt_minutes}"
            )));
        }
        if rows.is_empty() {
            return Err(Error::Ingestion("price file has no data rows".into()));
        }
        let steps_per_hour = (60 / dt_minutes) as usize;
        let origin = rows[0].0;
        if origin.minute() != 0 || origin.second() != 0 {
            return Err(Error::Ingestion(format!(
                "first timestamp {origin} is not on an hour boundary"
            )));
        }
        let mut per_step = Vec::with_capacity(rows.len() * steps_per_hour);
        for (i, (ts, price)) in rows.iter().enumerate() {
            let expected = origin + chrono::Duration::hours(i as i64);
            if *ts != expected {
                return Err(Error::Ingestion(format!(
                    "row {}: expected hour {expected}, found {ts} (gap, duplicate, or out of order)",
                    i + 2
                )));
            }
            if !price.is_finite() {
                return Err(Error::Ingestion(format!("row {}: non-finite price", i + 2)));
            }
            per_step.extend(std::iter::repeat(*price).take(steps_per_hour));
        }
        Ok(PriceSeries {
            per_step,
            steps_per_hour,
            origin,
        })
    }

    /// Builds a series directly from per-step values (used by tabular
    /// instances where prices are an arbitrary fixed path).
    pub fn from_steps(per_step: Vec<f64>, steps_per_hour: usize) -> PriceSeries {
        PriceSeries {
            per_step,
            steps_per_hour,
            origin: NaiveDateTime::default(),
        }
    }

    pub fn len_steps(&self) -> usize {
        self.per_step.len()
    }

    pub fn steps_per_day(&self) -> usize {
        self.steps_per_hour * 24
    }

    pub fn num_days(&self) -> usize {
        self.per_step.len() / self.steps_per_day()
    }

    pub fn price(&self, t: usize) -> f64 {
        self.per_step[t]
    }

    /// Price range over the whole series, used for feature scaling.
    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &p in &self.per_step {
            lo = lo.min(p);
            hi = hi.max(p);
        }
        (lo, hi)
    }

    /// The `window + 1` prices ending at step `t`, oldest first. Steps before
    /// the series origin are padded with the first price so the first arrival
    /// of a day is still observable.
    pub fn window(&self, t: usize, window: usize) -> Result<Vec<f64>> {
        if t >= self.per_step.len() {
            return Err(Error::Ingestion(format!(
                "price window requested at step {t}, series has {}",
                self.per_step.len()
            )));
        }
        let mut out = Vec::with_capacity(window + 1);
        for i in 0..=window {
            let back = window - i;
            let idx = t.saturating_sub(back);
            out.push(self.per_step[idx]);
        }
        Ok(out)
    }

    /// Splits into disjoint contiguous day spans: `[0, boundary_day)` for
    /// training and the remainder for testing.
    pub fn split_train_test(&self, boundary_day: usize) -> Result<(PriceSeries, PriceSeries)> {
        let days = self.num_days();
        if boundary_day == 0 || boundary_day >= days {
            return Err(Error::Ingestion(format!(
                "split boundary day {boundary_day} outside series of {days} whole days"
            )));
        }
        let cut = boundary_day * self.steps_per_day();
        let train = PriceSeries {
            per_step: self.per_step[..cut].to_vec(),
            steps_per_hour: self.steps_per_hour,
            origin: self.origin,
        };
        let test = PriceSeries {
            per_step: self.per_step[cut..].to_vec(),
            steps_per_hour: self.steps_per_hour,
            origin: self.origin + chrono::Duration::days(boundary_day as i64),
        };
        Ok((train, test))
    }

    /// Hourly values recovered by sampling each hour's first step.
    pub fn downsample_hourly(&self) -> Vec<f64> {
        self.per_step
            .chunks(self.steps_per_hour)
            .map(|c| c[0])
            .collect()
    }
}

/// Uniformly samples a day index from a span of whole days.
pub fn sample_day(rng: &mut impl Rng, num_days: usize) -> usize {
    rng.gen_range(0..num_days)
}

fn parse_price_file(path: &Path) -> Result<Vec<(NaiveDateTime, f64)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Ingestion(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == PRICE_FILE_HEADER => {}
        Some((_, h)) => {
            return Err(Error::Ingestion(format!(
                "{}: expected header `{PRICE_FILE_HEADER}`, found `{h}`",
                path.display()
            )))
        }
        None => return Err(Error::Ingestion(format!("{}: empty file", path.display()))),
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (ts, price) = line.split_once(',').ok_or_else(|| {
            Error::Ingestion(format!("{}:{}: expected two fields", path.display(), lineno + 1))
        })?;
        let ts = NaiveDateTime::parse_from_str(ts.trim(), "%Y-%m-%dT%H:%M:%S").map_err(|e| {
            Error::Ingestion(format!(
                "{}:{}: bad timestamp `{ts}`: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        let price: f64 = price.trim().parse().map_err(|_| {
            Error::Ingestion(format!(
                "{}:{}: bad price `{price}`",
                path.display(),
                lineno + 1
            ))
        })?;
        rows.push((ts, price));
    }
    Ok(rows)
}

/// Writes a series back out in the hourly file format.
pub fn write_price_file(path: &Path, series: &PriceSeries) -> Result<()> {
    let mut out = String::from(PRICE_FILE_HEADER);
    out.push('\n');
    for (i, p) in series.downsample_hourly().iter().enumerate() {
        let ts = series.origin + chrono::Duration::hours(i as i64);
        out.push_str(&format!("{},{}\n", ts.format("%Y-%m-%dT%H:%M:%S"), p));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Baseline hourly shape of a synthetic day: cheap overnight, a morning
/// bump, moderate hour-to-hour swings through the day, a sharp maximum
/// between 17:00 and 18:00, and a deep dip right after it.
pub const SYNTHETIC_DAY_SHAPE: [f64; 24] = [
    0.016, 0.015, 0.014, 0.014, 0.015, 0.017, 0.021, 0.026, 0.022, 0.019, 0.023, 0.020, 0.024,
    0.016, 0.022, 0.014, 0.025, 0.03921, 0.015, 0.024, 0.020, 0.019, 0.018, 0.017,
];

/// Generates a deterministic synthetic hourly series of `days` days with
/// seeded day-to-day variation around [`SYNTHETIC_DAY_SHAPE`].
pub fn synthetic_series(days: usize, dt_minutes: u32, seed: u64) -> PriceSeries {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let origin = NaiveDateTime::parse_from_str("2023-01-01T00:00:00", "%Y-%m-%dT%H:%M:%S").unwrap();
    let mut rows = Vec::with_capacity(days * 24);
    for d in 0..days {
        let day_scale = 1.0 + 0.10 * (rng.gen::<f64>() * 2.0 - 1.0);
        for (h, base) in SYNTHETIC_DAY_SHAPE.iter().enumerate() {
            let noise = 1.0 + 0.06 * (rng.gen::<f64>() * 2.0 - 1.0);
            let price = (base * day_scale * noise).max(0.001);
            let ts = origin + chrono::Duration::hours((d * 24 + h) as i64);
            rows.push((ts, (price * 1e6).round() / 1e6));
        }
    }
    PriceSeries::from_hourly(&rows, dt_minutes).expect("synthetic rows are well-formed")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hourly(n: usize, f: impl Fn(usize) -> f64) -> Vec<(NaiveDateTime, f64)> {
        let origin =
            NaiveDateTime::parse_from_str("2023-01-01T00:00:00", "%Y-%m-%dT%H:%M:%S").unwrap();
        (0..n)
            .map(|i| (origin + chrono::Duration::hours(i as i64), f(i)))
            .collect()
    }

    #[test]
    fn expands_24_hours_to_144_steps() {
        let s = PriceSeries::from_hourly(&hourly(24, |i| i as f64), 10).unwrap();
        assert_eq!(s.len_steps(), 144);
        assert_eq!(s.steps_per_hour, 6);
    }

    #[test]
    fn zero_order_hold_repeats_the_hourly_price() {
        let s = PriceSeries::from_hourly(&hourly(24, |i| if i == 17 { 0.03921 } else { 0.02 }), 10)
            .unwrap();
        for step in 17 * 6..18 * 6 {
            assert_eq!(s.price(step), 0.03921);
        }
    }

    #[test]
    fn missing_hour_is_rejected_naming_the_row() {
        let mut rows = hourly(24, |_| 0.02);
        rows.remove(5);
        let err = PriceSeries::from_hourly(&rows, 10).unwrap_err();
        assert!(err.to_string().contains("row 7"), "{err}");
    }

    #[test]
    fn duplicate_and_out_of_order_rows_are_rejected() {
        let mut rows = hourly(4, |_| 0.02);
        rows[2].0 = rows[1].0;
        assert!(PriceSeries::from_hourly(&rows, 10).is_err());
        let mut rows = hourly(4, |_| 0.02);
        rows.swap(1, 2);
        assert!(PriceSeries::from_hourly(&rows, 10).is_err());
    }

    #[test]
    fn window_is_a_direct_slice_oldest_first() {
        let s = PriceSeries::from_steps(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 6);
        assert_eq!(s.window(5, 4).unwrap(), vec![2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn window_of_constant_series_is_constant() {
        let s = PriceSeries::from_steps(vec![0.7; 12], 6);
        assert_eq!(s.window(9, 4).unwrap(), vec![0.7; 5]);
    }

    #[test]
    fn window_at_boundary_starts_at_origin_with_padding() {
        let s = PriceSeries::from_steps(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 6);
        // t equal to the window length touches the origin exactly.
        assert_eq!(s.window(4, 4).unwrap(), vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        // Earlier steps repeat the first price.
        assert_eq!(s.window(1, 4).unwrap(), vec![1.0, 1.0, 1.0, 1.0, 2.0]);
        assert!(s.window(6, 4).is_err());
    }

    #[test]
    fn last_window_entry_equals_current_price() {
        let s = PriceSeries::from_steps((0..30).map(|i| i as f64 * 0.01).collect(), 6);
        for t in 0..30 {
            let w = s.window(t, 4).unwrap();
            assert_eq!(*w.last().unwrap(), s.price(t));
        }
    }

    #[test]
    fn split_31_plus_7_days() {
        let s = PriceSeries::from_hourly(&hourly(38 * 24, |i| i as f64), 10).unwrap();
        let (train, test) = s.split_train_test(31).unwrap();
        assert_eq!(train.num_days(), 31);
        assert_eq!(test.num_days(), 7);
        assert_eq!(train.len_steps() + test.len_steps(), s.len_steps());
        // Spans are disjoint and contiguous.
        assert_eq!(test.price(0), s.price(31 * s.steps_per_day()));
        assert_eq!(
            test.origin,
            s.origin + chrono::Duration::days(31)
        );
    }

    #[test]
    fn degenerate_split_is_rejected() {
        let s = PriceSeries::from_hourly(&hourly(48, |_| 0.02), 10).unwrap();
        assert!(s.split_train_test(0).is_err());
        assert!(s.split_train_test(2).is_err());
        assert!(s.split_train_test(5).is_err());
    }

    #[test]
    fn day_sampling_is_deterministic_per_seed() {
        let mut a = ChaCha12Rng::seed_from_u64(9);
        let mut b = ChaCha12Rng::seed_from_u64(9);
        let sa: Vec<usize> = (0..50).map(|_| sample_day(&mut a, 31)).collect();
        let sb: Vec<usize> = (0..50).map(|_| sample_day(&mut b, 31)).collect();
        assert_eq!(sa, sb);
        assert!(sa.iter().all(|&d| d < 31));
    }

    #[test]
    fn expand_then_downsample_round_trips() {
        let rows = hourly(48, |i| 0.01 + 0.001 * (i as f64));
        let s = PriceSeries::from_hourly(&rows, 10).unwrap();
        let hourly_again = s.downsample_hourly();
        assert_eq!(hourly_again.len(), rows.len());
        for (got, (_, want)) in hourly_again.iter().zip(rows.iter()) {
            assert_eq!(got, want);
        }
    }

    #[test]
    fn file_round_trip_and_directory_merge() {
        let dir = std::env::temp_dir().join(format!("ebcharge-prices-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let s = synthetic_series(2, 10, 7);
        let f1 = dir.join("a.csv");
        write_price_file(&f1, &s).unwrap();
        let loaded = PriceSeries::load(&f1, 10).unwrap();
        assert_eq!(loaded.len_steps(), s.len_steps());
        for t in 0..s.len_steps() {
            assert_eq!(loaded.price(t), s.price(t));
        }
        // Directory form: split the two days into two files and merge.
        let (d1, d2) = s.split_train_test(1).unwrap();
        let sub = dir.join("daily");
        std::fs::create_dir_all(&sub).unwrap();
        write_price_file(&sub.join("day1.csv"), &d1).unwrap();
        write_price_file(&sub.join("day2.csv"), &d2).unwrap();
        let merged = PriceSeries::load(&sub, 10).unwrap();
        assert_eq!(merged.len_steps(), s.len_steps());
        assert_eq!(merged.price(200), s.price(200));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn synthetic_series_peaks_between_17_and_18() {
        let s = synthetic_series(38, 10, 1);
        assert_eq!(s.num_days(), 38);
        for d in 0..38 {
            let day = &(0..s.steps_per_day())
                .map(|i| s.price(d * s.steps_per_day() + i))
                .collect::<Vec<_>>();
            let (argmax, _) = day
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap();
            let hour = argmax / s.steps_per_hour;
            assert_eq!(hour, 17, "day {d} peak at hour {hour}");
        }
    }
}
