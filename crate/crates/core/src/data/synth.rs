//! Synthetic sinusoidal benchmark with injected anomalies.
//!
//! All randomness comes from a `ChaCha8Rng` seeded with the caller's seed via
//! `SeedableRng::seed_from_u64`; Gaussian draws use `rand_distr::StandardNormal`.
//! Both are platform independent, so a seed fixes the series bit-for-bit.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::series::TimeSeries;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnomalyKind {
    /// Isolated points pushed beyond the global extremes.
    Global,
    /// Points moved to a globally normal but locally wrong level.
    Contextual,
    /// Interval waveform replaced by a square wave of the same amplitude.
    Shapelet,
    /// Interval frequency changed, amplitude kept.
    Seasonal,
    /// Linear drift added across the interval.
    Trend,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 5] = [
        AnomalyKind::Global,
        AnomalyKind::Contextual,
        AnomalyKind::Shapelet,
        AnomalyKind::Seasonal,
        AnomalyKind::Trend,
    ];

    pub fn is_point(self) -> bool {
        matches!(self, AnomalyKind::Global | AnomalyKind::Contextual)
    }

    pub fn name(self) -> &'static str {
        match self {
            AnomalyKind::Global => "global",
            AnomalyKind::Contextual => "contextual",
            AnomalyKind::Shapelet => "shapelet",
            AnomalyKind::Seasonal => "seasonal",
            AnomalyKind::Trend => "trend",
        }
    }
}

impl fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AnomalyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "global" | "point" => Ok(AnomalyKind::Global),
            "contextual" => Ok(AnomalyKind::Contextual),
            "shapelet" => Ok(AnomalyKind::Shapelet),
            "seasonal" => Ok(AnomalyKind::Seasonal),
            "trend" => Ok(AnomalyKind::Trend),
            other => Err(Error::invalid(format!("unknown anomaly kind `{other}`"))),
        }
    }
}

/// Normal pattern: `amplitude * sin(2 pi t / period + phase) + slope * t + noise`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseSignal {
    pub period: f64,
    pub amplitude: f64,
    pub noise_std: f64,
    #[serde(default)]
    pub trend_slope: f64,
    #[serde(default)]
    pub phase: f64,
}

impl Default for BaseSignal {
    fn default() -> Self {
        Self {
            period: 25.0,
            amplitude: 1.0,
            noise_std: 0.05,
            trend_slope: 0.0,
            phase: 0.0,
        }
    }
}

impl BaseSignal {
    fn clean(&self, t: usize) -> f64 {
        let t = t as f64;
        self.amplitude * (2.0 * PI * t / self.period + self.phase).sin() + self.trend_slope * t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalySpec {
    pub kind: AnomalyKind,
    /// Half-open `[start, end)` intervals; single points are `(t, t + 1)`.
    pub intervals: Vec<(usize, usize)>,
    pub magnitude: f64,
    pub base: BaseSignal,
}

impl AnomalySpec {
    pub fn validate(&self, len: usize) -> Result<()> {
        if !(self.base.period > 0.0)
            || !self.base.amplitude.is_finite()
            || !(self.base.noise_std >= 0.0)
        {
            return Err(Error::invalid(
                "base signal needs period > 0 and noise >= 0",
            ));
        }
        let mut sorted = self.intervals.clone();
        sorted.sort_unstable();
        for &(s, e) in &sorted {
            if s >= e || e > len {
                return Err(Error::invalid(format!(
                    "interval [{s}, {e}) exceeds series of length {len}"
                )));
            }
        }
        if sorted.windows(2).any(|p| p[1].0 < p[0].1) {
            return Err(Error::invalid("anomaly intervals overlap"));
        }
        Ok(())
    }
}

pub fn generate_synthetic(spec: &AnomalySpec, len: usize, seed: u64) -> Result<TimeSeries<f64>> {
    spec.validate(len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = &spec.base;
    let clean: Vec<f64> = (0..len).map(|t| base.clean(t)).collect();
    let noise: Vec<f64> = (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * base.noise_std
        })
        .collect();
    let mut values: Vec<f64> = clean.iter().zip(&noise).map(|(c, n)| c + n).collect();
    let mut labels = vec![0u8; len];

    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = (hi - lo).max(f64::EPSILON);
    let center = 0.5 * (lo + hi);
    let two_pi = 2.0 * PI;

    for &(s, e) in &spec.intervals {
        for t in s..e {
            labels[t] = 1;
            let trend = base.trend_slope * t as f64;
            values[t] = match spec.kind {
                AnomalyKind::Global => {
                    if values[t] >= center {
                        hi + spec.magnitude * range
                    } else {
                        lo - spec.magnitude * range
                    }
                }
                AnomalyKind::Contextual => {
                    let reflected = center - spec.magnitude * (clean[t] - center);
                    reflected.clamp(lo, hi)
                }
                AnomalyKind::Shapelet => {
                    let phase = two_pi * t as f64 / base.period + base.phase;
                    base.amplitude * phase.sin().signum() + trend + noise[t]
                }
                AnomalyKind::Seasonal => {
                    let phase_at_start = two_pi * s as f64 / base.period + base.phase;
                    let freq = two_pi * (1.0 + spec.magnitude) / base.period;
                    base.amplitude * (phase_at_start + freq * (t - s) as f64).sin()
                        + trend
                        + noise[t]
                }
                AnomalyKind::Trend => {
                    let frac = (t - s + 1) as f64 / (e - s) as f64;
                    values[t] + spec.magnitude * base.amplitude * frac
                }
            };
        }
    }
    TimeSeries::univariate(format!("synthetic-{}", spec.kind), values, Some(labels))
}

/// Layout of a benchmark instance: a clean training segment followed by a
/// contaminated test segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub kind: AnomalyKind,
    pub train_len: usize,
    pub test_windows: usize,
    pub window: usize,
    pub base: BaseSignal,
    /// Kind-specific strength; `None` uses [`default_magnitude`].
    #[serde(default)]
    pub magnitude: Option<f64>,
    /// Number of injected points or intervals; `None` uses the kind default.
    #[serde(default)]
    pub count: Option<usize>,
    /// Interval length for collective kinds.
    #[serde(default = "default_interval_len")]
    pub interval_len: usize,
}

fn default_interval_len() -> usize {
    24
}

pub fn default_magnitude(kind: AnomalyKind) -> f64 {
    match kind {
        AnomalyKind::Global => 0.3,
        AnomalyKind::Contextual => 1.0,
        AnomalyKind::Shapelet => 1.0,
        AnomalyKind::Seasonal => 1.0,
        AnomalyKind::Trend => 1.5,
    }
}

fn default_count(kind: AnomalyKind) -> usize {
    if kind.is_point() {
        3
    } else {
        2
    }
}

impl BenchmarkSpec {
    pub fn new(kind: AnomalyKind, window: usize) -> Self {
        Self {
            kind,
            train_len: 2000,
            test_windows: 400,
            window,
            base: BaseSignal::default(),
            magnitude: None,
            count: None,
            interval_len: default_interval_len(),
        }
    }

    pub fn test_len(&self) -> usize {
        self.test_windows + self.window - 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub train: TimeSeries<f64>,
    pub test: TimeSeries<f64>,
    pub spec: AnomalySpec,
}

/// Draws anomaly positions from `seed` and generates both segments. The test
/// segment continues the phase of the training segment.
pub fn make_benchmark(spec: &BenchmarkSpec, seed: u64) -> Result<Benchmark> {
    if spec.window == 0 || spec.train_len < spec.window || spec.test_windows == 0 {
        return Err(Error::invalid(
            "benchmark needs window <= train_len and test_windows > 0",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let test_len = spec.test_len();
    let count = spec.count.unwrap_or_else(|| default_count(spec.kind));
    let len = if spec.kind.is_point() {
        1
    } else {
        spec.interval_len
    };
    let test_base = BaseSignal {
        phase: spec.base.phase + 2.0 * PI * spec.train_len as f64 / spec.base.period,
        ..spec.base.clone()
    };
    let intervals = place_intervals(
        &mut rng,
        test_len,
        count,
        len,
        spec.window,
        spec.kind,
        &test_base,
    )?;

    let train_spec = AnomalySpec {
        kind: spec.kind,
        intervals: vec![],
        magnitude: 0.0,
        base: spec.base.clone(),
    };
    let test_spec = AnomalySpec {
        kind: spec.kind,
        intervals,
        magnitude: spec
            .magnitude
            .unwrap_or_else(|| default_magnitude(spec.kind)),
        base: test_base,
    };
    let train_seed = rng.random::<u64>();
    let test_seed = rng.random::<u64>();
    let mut train = generate_synthetic(&train_spec, spec.train_len, train_seed)?;
    train.name = format!("{}-train", spec.kind);
    let mut test = generate_synthetic(&test_spec, test_len, test_seed)?;
    test.name = format!("{}-test", spec.kind);
    Ok(Benchmark {
        train,
        test,
        spec: test_spec,
    })
}

fn place_intervals(
    rng: &mut ChaCha8Rng,
    len: usize,
    count: usize,
    width: usize,
    gap: usize,
    kind: AnomalyKind,
    base: &BaseSignal,
) -> Result<Vec<(usize, usize)>> {
    let lo = gap;
    let hi = len.saturating_sub(gap + width);
    if hi <= lo && count > 0 {
        return Err(Error::invalid(
            "test segment too short for the requested anomalies",
        ));
    }
    let mut out: Vec<(usize, usize)> = Vec::new();
    let mut tries = 0;
    while out.len() < count {
        tries += 1;
        if tries > 10_000 {
            return Err(Error::invalid("could not place non-overlapping anomalies"));
        }
        let mut s = rng.random_range(lo..hi);
        if kind == AnomalyKind::Contextual {
            // move to the nearest crest or trough so the reflection is visible
            s = nearest_extremum(s, base).clamp(lo, hi - 1);
        }
        let e = s + width;
        if out.iter().all(|&(a, b)| e + gap <= a || b + gap <= s) {
            out.push((s, e));
        }
    }
    out.sort_unstable();
    Ok(out)
}

fn nearest_extremum(t: usize, base: &BaseSignal) -> usize {
    let quarter = base.period / 4.0;
    // extrema sit where 2 pi t / period + phase = pi/2 + k pi
    let offset = (PI / 2.0 - base.phase) * base.period / (2.0 * PI);
    let k = ((t as f64 - offset) / (2.0 * quarter)).round();
    (offset + k * 2.0 * quarter).round().max(0.0) as usize
}
