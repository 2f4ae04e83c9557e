//! Parsing of human-friendly quantities used on the command line.

/// Bandwidth in bytes per second. Bit-rate suffixes (`bps`, `Kbps`, `Mbps`,
/// `Gbps`, decimal) are divided by 8; `B/s`, `KB/s`, `MB/s`, `GB/s` and bare
/// numbers are bytes per second.
pub fn parse_bandwidth(s: &str) -> Result<f64, String> {
    let t = s.trim();
    let lower = t.to_ascii_lowercase();
    let table: [(&str, f64); 8] = [
        ("gbps", 1e9 / 8.0),
        ("mbps", 1e6 / 8.0),
        ("kbps", 1e3 / 8.0),
        ("bps", 1.0 / 8.0),
        ("gb/s", 1e9),
        ("mb/s", 1e6),
        ("kb/s", 1e3),
        ("b/s", 1.0),
    ];
    let (num, mult) = table
        .iter()
        .find_map(|(suffix, m)| lower.strip_suffix(suffix).map(|n| (n.trim(), *m)))
        .unwrap_or((lower.as_str(), 1.0));
    let v: f64 = num.parse().map_err(|_| format!("invalid bandwidth `{s}`"))?;
    let bytes = v * mult;
    if bytes.is_nan() || bytes <= 0.0 {
        return Err(format!("bandwidth must be positive, got `{s}`"));
    }
    Ok(bytes)
}

/// Latency in seconds: `10ms`, `250us`, `0.01s`, or a bare number of seconds.
pub fn parse_latency(s: &str) -> Result<f64, String> {
    let lower = s.trim().to_ascii_lowercase();
    let (num, div) = if let Some(n) = lower.strip_suffix("ms") {
        (n, 1e3)
    } else if let Some(n) = lower.strip_suffix("us") {
        (n, 1e6)
    } else if let Some(n) = lower.strip_suffix('s') {
        (n, 1.0)
    } else {
        (lower.as_str(), 1.0)
    };
    let v: f64 = num.trim().parse().map_err(|_| format!("invalid latency `{s}`"))?;
    let secs = v / div;
    if !(secs >= 0.0 && secs.is_finite()) {
        return Err(format!("latency must be >= 0, got `{s}`"));
    }
    Ok(secs)
}
