//! Simulation clock units.
//!
//! The clock is integer microseconds so that event ordering, accumulation and
//! log output are exact and reproducible. Profiles and external interfaces
//! speak milliseconds; conversion happens at the boundary.

/// Simulation time and durations, in microseconds.
pub type Micros = u64;

/// One millisecond in clock ticks.
pub const MS: Micros = 1_000;

/// One second in clock ticks.
pub const SEC: Micros = 1_000_000;

/// Convert milliseconds (as found in profile and config files) to clock ticks.
pub fn ms_to_us(ms: f64) -> Micros {
    debug_assert!(ms >= 0.0, "negative duration");
    (ms * 1_000.0).round() as Micros
}

/// Convert clock ticks back to milliseconds for reporting.
pub fn us_to_ms(us: Micros) -> f64 {
    us as f64 / 1_000.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_exactly_at_sub_ms_precision() {
        assert_eq!(ms_to_us(0.52), 520);
        assert_eq!(ms_to_us(430.0), 430_000);
        assert_eq!(us_to_ms(1_680_000), 1680.0);
    }
}
