//! Serving metrics and cost-profit accounting.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{measure_bubble, EventLog};
use crate::workload::Request;

/// Five years of continuous operation.
pub const DEFAULT_AMORTIZATION_HOURS: f64 = 43_800.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("{count} request(s) unfinished (first: id {first_id}); drain the run before summarizing")]
    Unfinished { count: usize, first_id: u64 },
    #[error("no requests to summarize")]
    NoRequests,
    #[error("run span is zero")]
    ZeroSpan,
    #[error("measurement window [{t0}, {t1}] is empty")]
    EmptyWindow { t0: u64, t1: u64 },
    #[error("cost model: {0}")]
    Config(String),
    #[error("margin undefined: cost per hour is zero")]
    UndefinedMargin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub throughput_tok_s: f64,
    pub ttft_mean_s: f64,
    pub ttft_p50_s: f64,
    pub ttft_p99_s: f64,
    /// `None` when no request produced more than one token.
    pub tpot_mean_s: Option<f64>,
    pub bubble_fraction_per_stage: Vec<f64>,
    pub span_s: f64,
    pub total_tokens: u64,
    pub requests: usize,
}

/// Nearest-rank percentile of an ascending sample; `p` in (0, 100].
pub fn percentile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Rate and span whose product is exactly `tokens` in floating point.
///
/// Starts from `tokens / span` and walks both values a few ulps at a time;
/// the returned span differs from the input by at most a few ulps.
pub fn exact_rate(tokens: f64, span: f64) -> (f64, f64) {
    let mut s_up = span;
    let mut s_down = span;
    for step in 0..32 {
        for s in [s_up, s_down] {
            let mut r = tokens / s;
            for _ in 0..8 {
                let p = r * s;
                if p == tokens {
                    return (r, s);
                }
                r = if p < tokens { r.next_up() } else { r.next_down() };
            }
        }
        if step % 2 == 0 {
            s_up = s_up.next_up();
        } else {
            s_down = s_down.next_down();
        }
    }
    (tokens / span, span)
}

/// Aggregate metrics of a drained run with `stages` pipeline stages.
///
/// Bubble fractions are measured over `[first arrival, last finish]`.
pub fn summarize(log: &EventLog, requests: &[Request], stages: usize) -> Result<MetricsReport, MetricsError> {
    if requests.is_empty() {
        return Err(MetricsError::NoRequests);
    }
    let unfinished: Vec<&Request> = requests.iter().filter(|r| !r.is_finished()).collect();
    if let Some(first) = unfinished.first() {
        return Err(MetricsError::Unfinished {
            count: unfinished.len(),
            first_id: first.id,
        });
    }
    let first_arrival = requests.iter().map(|r| r.arrival_time).fold(f64::INFINITY, f64::min);
    let last_finish = requests
        .iter()
        .filter_map(|r| r.finish_time)
        .fold(f64::NEG_INFINITY, f64::max);
    let raw_span = last_finish - first_arrival;
    if raw_span <= 0.0 {
        return Err(MetricsError::ZeroSpan);
    }
    let total_tokens: u64 = requests.iter().map(|r| u64::from(r.tokens_emitted)).sum();

    let mut ttft: Vec<f64> = requests
        .iter()
        .map(|r| r.first_token_time.unwrap_or(r.arrival_time) - r.arrival_time)
        .collect();
    ttft.sort_by(f64::total_cmp);
    let ttft_mean_s = ttft.iter().sum::<f64>() / ttft.len() as f64;

    let tpot: Vec<f64> = requests
        .iter()
        .filter(|r| r.output_len >= 2)
        .filter_map(|r| Some((r.finish_time? - r.first_token_time?) / f64::from(r.output_len - 1)))
        .collect();
    let tpot_mean_s = (!tpot.is_empty()).then(|| tpot.iter().sum::<f64>() / tpot.len() as f64);

    let t0 = crate::clock::secs_to_nanos(first_arrival);
    let t1 = crate::clock::secs_to_nanos(last_finish);
    let bubble_fraction_per_stage = (0..stages as u32)
        .map(|s| measure_bubble(log, s, t0, t1))
        .collect::<Result<Vec<_>, _>>()?;

    let (throughput_tok_s, span_s) = exact_rate(total_tokens as f64, raw_span);
    Ok(MetricsReport {
        throughput_tok_s,
        ttft_mean_s,
        ttft_p50_s: percentile(&ttft, 50.0).unwrap(),
        ttft_p99_s: percentile(&ttft, 99.0).unwrap(),
        tpot_mean_s,
        bubble_fraction_per_stage,
        span_s,
        total_tokens,
        requests: requests.len(),
    })
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str =
        "throughput_tok_s,ttft_mean_s,ttft_p50_s,ttft_p99_s,tpot_mean_s,max_bubble,span_s,total_tokens,requests";

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One CSV row matching [`Self::CSV_HEADER`]; `tpot_mean_s` is blank when absent.
    pub fn csv_row(&self) -> String {
        let max_bubble = self.bubble_fraction_per_stage.iter().copied().fold(0.0, f64::max);
        format!(
            "{:.6},{:.6},{:.6},{:.6},{},{:.6},{:.6},{},{}",
            self.throughput_tok_s,
            self.ttft_mean_s,
            self.ttft_p50_s,
            self.ttft_p99_s,
            self.tpot_mean_s.map(|v| format!("{v:.6}")).unwrap_or_default(),
            max_bubble,
            self.span_s,
            self.total_tokens,
            self.requests
        )
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut rows = vec![
            ("requests", self.requests.to_string()),
            ("total tokens", self.total_tokens.to_string()),
            ("span (s)", format!("{:.6}", self.span_s)),
            ("throughput (tok/s)", format!("{:.6}", self.throughput_tok_s)),
            ("TTFT mean (s)", format!("{:.6}", self.ttft_mean_s)),
            ("TTFT p50 (s)", format!("{:.6}", self.ttft_p50_s)),
            ("TTFT p99 (s)", format!("{:.6}", self.ttft_p99_s)),
            (
                "TPOT mean (s)",
                self.tpot_mean_s.map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}")),
            ),
        ];
        let stage_labels: Vec<String> = (0..self.bubble_fraction_per_stage.len())
            .map(|i| format!("bubble stage {i}"))
            .collect();
        for (label, b) in stage_labels.iter().zip(&self.bubble_fraction_per_stage) {
            rows.push((label.as_str(), format!("{b:.6}")));
        }
        let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let vw = rows.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
        for (k, v) in rows {
            writeln!(f, "{k:<w$}  {v:>vw$}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    LocalOwnership,
    CloudRental,
}

/// Hourly cost of a deployment and the price tokens sell for.
///
/// All amounts are in one currency, named by `currency`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub mode: CostMode,
    #[serde(default)]
    pub device_price: Option<f64>,
    #[serde(default = "default_amortization")]
    pub amortization_hours: f64,
    #[serde(default)]
    pub power_kw: Option<f64>,
    /// Price per kWh.
    #[serde(default)]
    pub power_price: Option<f64>,
    #[serde(default)]
    pub rental_price_per_hour: Option<f64>,
    pub device_count: u32,
    /// Price per million output tokens.
    pub token_price: f64,
    #[serde(default)]
    pub currency: String,
}

fn default_amortization() -> f64 {
    DEFAULT_AMORTIZATION_HOURS
}

impl CostModel {
    pub fn local(device_count: u32, device_price: f64, power_kw: f64, power_price: f64, token_price: f64) -> Self {
        Self {
            mode: CostMode::LocalOwnership,
            device_price: Some(device_price),
            amortization_hours: DEFAULT_AMORTIZATION_HOURS,
            power_kw: Some(power_kw),
            power_price: Some(power_price),
            rental_price_per_hour: None,
            device_count,
            token_price,
            currency: String::new(),
        }
    }

    pub fn cloud(device_count: u32, rental_price_per_hour: f64, token_price: f64) -> Self {
        Self {
            mode: CostMode::CloudRental,
            device_price: None,
            amortization_hours: DEFAULT_AMORTIZATION_HOURS,
            power_kw: None,
            power_price: None,
            rental_price_per_hour: Some(rental_price_per_hour),
            device_count,
            token_price,
            currency: String::new(),
        }
    }

    pub fn with_currency(mut self, c: impl Into<String>) -> Self {
        self.currency = c.into();
        self
    }
}

fn positive(name: &str, v: Option<f64>) -> Result<f64, MetricsError> {
    match v {
        None => Err(MetricsError::Config(format!("`{name}` is required for this mode"))),
        Some(x) if x > 0.0 && x.is_finite() => Ok(x),
        Some(x) => Err(MetricsError::Config(format!("`{name}` must be positive, got {x}"))),
    }
}

/// Cost of running the deployment for one hour.
pub fn cost_per_hour(c: &CostModel) -> Result<f64, MetricsError> {
    let per_device = match c.mode {
        CostMode::LocalOwnership => {
            let price = positive("device_price", c.device_price)?;
            let hours = positive("amortization_hours", Some(c.amortization_hours))?;
            let kw = positive("power_kw", c.power_kw)?;
            let kwh = positive("power_price", c.power_price)?;
            price / hours + kw * kwh
        }
        CostMode::CloudRental => positive("rental_price_per_hour", c.rental_price_per_hour)?,
    };
    Ok(f64::from(c.device_count) * per_device)
}

/// Revenue per hour from selling `throughput_tok_s` output tokens.
pub fn profit_per_hour(throughput_tok_s: f64, c: &CostModel) -> f64 {
    throughput_tok_s * 3600.0 / 1e6 * c.token_price
}

/// `(profit - cost) / cost` per hour.
pub fn cost_profit_margin(throughput_tok_s: f64, c: &CostModel) -> Result<f64, MetricsError> {
    let cost = cost_per_hour(c)?;
    if cost == 0.0 {
        return Err(MetricsError::UndefinedMargin);
    }
    Ok((profit_per_hour(throughput_tok_s, c) - cost) / cost)
}
