//! Virtual time. The simulator counts integer nanoseconds so event ordering
//! never depends on floating-point rounding.

pub type Nanos = u64;

pub const NANOS_PER_SEC: f64 = 1e9;

/// Round non-negative seconds to the nearest nanosecond.
pub fn secs_to_nanos(s: f64) -> Nanos {
    debug_assert!(s >= 0.0, "negative duration {s}");
    (s * NANOS_PER_SEC).round() as Nanos
}

pub fn nanos_to_secs(n: Nanos) -> f64 {
    n as f64 / NANOS_PER_SEC
}

/// Seconds with six decimals, the fixed output format for durations.
pub fn format_secs(n: Nanos) -> String {
    format!("{:.6}", nanos_to_secs(n))
}
