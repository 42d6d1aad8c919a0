//! Energy and carbon accounting for measured spans of work.
//!
//! A [`Meter`] owns one power source (powercap counters, constant power or
//! a replayed trace) and a clock. Spans do not nest. With the wall clock a
//! sampler thread polls the source while the span is open and sends
//! readings over a channel; with the modeled clock time only moves when the
//! workload charges it, which makes every report reproducible.

mod integrate;
mod powercap;
mod trace;

pub use integrate::{integrate, integrate_by_domain};
pub use powercap::{counter_delta, discover_zones, read_powercap_counter, Zone, DEFAULT_ROOT};
pub use trace::PowerTrace;

use std::path::PathBuf;
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_CARBON_INTENSITY: f64 = 0.475;
pub const JOULES_PER_KWH: f64 = 3.6e6;

#[derive(Debug, Error)]
pub enum MeterError {
    #[error("power source unavailable: {detail} (fall back with `--meter constant` or `--meter trace:<path>`)")]
    Source { detail: String },
    #[error("meter misuse: {0}")]
    Usage(String),
    #[error("samples out of order: {next} s after {prev} s")]
    Ordering { prev: f64, next: f64 },
    #[error("bad power trace: {0}")]
    Trace(String),
    #[error("invalid meter config: {0}")]
    Config(String),
}

impl MeterError {
    pub(crate) fn source(detail: impl Into<String>) -> Self {
        MeterError::Source {
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Cpu,
    Ram,
    Gpu,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::Cpu, Domain::Ram, Domain::Gpu];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerSample {
    pub timestamp: f64,
    pub watts: f64,
    pub domain: Domain,
}

/// Energy of one measured span.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub cpu_joules: f64,
    pub ram_joules: f64,
    pub gpu_joules: f64,
    pub total_joules: f64,
    pub duration_s: f64,
    pub kwh: f64,
    pub co2e_kg: f64,
    pub carbon_intensity: f64,
}

impl EnergyReport {
    pub fn new(joules: [f64; 3], duration_s: f64, carbon_intensity: f64) -> Self {
        let total_joules = joules.iter().sum::<f64>();
        let kwh = total_joules / JOULES_PER_KWH;
        Self {
            cpu_joules: joules[0],
            ram_joules: joules[1],
            gpu_joules: joules[2],
            total_joules,
            duration_s,
            kwh,
            co2e_kg: to_co2e(kwh, carbon_intensity),
            carbon_intensity,
        }
    }

    pub fn zero(carbon_intensity: f64) -> Self {
        Self::new([0.0; 3], 0.0, carbon_intensity)
    }

    pub fn joules(&self, domain: Domain) -> f64 {
        match domain {
            Domain::Cpu => self.cpu_joules,
            Domain::Ram => self.ram_joules,
            Domain::Gpu => self.gpu_joules,
        }
    }

    /// Sum of several reports, re-deriving kWh and emissions from the total.
    pub fn sum<'a>(reports: impl IntoIterator<Item = &'a EnergyReport>, carbon_intensity: f64) -> Self {
        let mut joules = [0.0; 3];
        let mut duration = 0.0;
        for r in reports {
            for d in Domain::ALL {
                joules[d.index()] += r.joules(d);
            }
            duration += r.duration_s;
        }
        Self::new(joules, duration, carbon_intensity)
    }
}

/// `kwh * intensity` (kg CO2e).
pub fn to_co2e(kwh: f64, intensity: f64) -> f64 {
    kwh * intensity
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum SourceConfig {
    Powercap {
        #[serde(default = "default_powercap_root")]
        root: PathBuf,
    },
    ConstantPower {
        cpu_watts: f64,
        ram_watts: f64,
        gpu_watts: f64,
    },
    TraceReplay {
        path: PathBuf,
    },
}

fn default_powercap_root() -> PathBuf {
    PathBuf::from(DEFAULT_ROOT)
}

impl SourceConfig {
    pub fn name(&self) -> &'static str {
        match self {
            SourceConfig::Powercap { .. } => "powercap",
            SourceConfig::ConstantPower { .. } => "constant-power",
            SourceConfig::TraceReplay { .. } => "trace-replay",
        }
    }
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig::ConstantPower {
            cpu_watts: 65.0,
            ram_watts: 10.0,
            gpu_watts: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClockKind {
    /// Real elapsed time; required for powercap.
    Wall,
    /// Time advances only by charged work.
    #[default]
    Modeled,
}

/// Converts counted work into modeled seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub seconds_per_mac: f64,
    pub seconds_per_weight_byte: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            seconds_per_mac: 1e-10,
            seconds_per_weight_byte: 1e-9,
        }
    }
}

impl CostModel {
    /// Skipped (zero-weight) MACs cost nothing.
    pub fn seconds(&self, work: &Work) -> f64 {
        let macs = work.macs.saturating_sub(work.skipped_macs);
        macs as f64 * self.seconds_per_mac + work.weight_bytes as f64 * self.seconds_per_weight_byte
    }
}

/// Work done by a workload inside a span.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Work {
    pub macs: u64,
    pub skipped_macs: u64,
    pub weight_bytes: u64,
}

impl std::ops::AddAssign for Work {
    fn add_assign(&mut self, rhs: Self) {
        self.macs += rhs.macs;
        self.skipped_macs += rhs.skipped_macs;
        self.weight_bytes += rhs.weight_bytes;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeterConfig {
    pub source: SourceConfig,
    pub clock: ClockKind,
    pub sampling_interval_s: f64,
    pub carbon_intensity: f64,
    pub cost: CostModel,
    /// Used when the configured source cannot be opened.
    pub fallback: Option<SourceConfig>,
}

impl Default for MeterConfig {
    fn default() -> Self {
        Self {
            source: SourceConfig::default(),
            clock: ClockKind::Modeled,
            sampling_interval_s: 0.1,
            carbon_intensity: DEFAULT_CARBON_INTENSITY,
            cost: CostModel::default(),
            fallback: None,
        }
    }
}

impl MeterConfig {
    pub fn constant(cpu_watts: f64, ram_watts: f64, gpu_watts: f64) -> Self {
        Self {
            source: SourceConfig::ConstantPower {
                cpu_watts,
                ram_watts,
                gpu_watts,
            },
            ..Self::default()
        }
    }

    pub fn trace(path: impl Into<PathBuf>) -> Self {
        Self {
            source: SourceConfig::TraceReplay { path: path.into() },
            ..Self::default()
        }
    }

    pub fn powercap(root: impl Into<PathBuf>) -> Self {
        Self {
            source: SourceConfig::Powercap { root: root.into() },
            clock: ClockKind::Wall,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), MeterError> {
        if !(self.sampling_interval_s > 0.0 && self.sampling_interval_s.is_finite()) {
            return Err(MeterError::Config(format!(
                "sampling_interval_s must be positive, got {}",
                self.sampling_interval_s
            )));
        }
        if !(self.carbon_intensity >= 0.0 && self.carbon_intensity.is_finite()) {
            return Err(MeterError::Config("carbon_intensity must be non-negative".into()));
        }
        if let SourceConfig::ConstantPower {
            cpu_watts,
            ram_watts,
            gpu_watts,
        } = self.source
        {
            if [cpu_watts, ram_watts, gpu_watts].iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
                return Err(MeterError::Config("constant watts must be non-negative".into()));
            }
        }
        if matches!(self.source, SourceConfig::Powercap { .. }) && self.clock == ClockKind::Modeled {
            return Err(MeterError::Config(
                "powercap counters measure real time; use the wall clock".into(),
            ));
        }
        Ok(())
    }
}

enum Reading {
    Power(PowerSample),
    Energy { domain: Domain, joules: f64 },
}

enum Source {
    Constant([f64; 3]),
    Trace(PowerTrace),
    Powercap(Vec<Zone>),
}

impl Source {
    fn open(config: &SourceConfig) -> Result<Self, MeterError> {
        Ok(match config {
            SourceConfig::ConstantPower {
                cpu_watts,
                ram_watts,
                gpu_watts,
            } => Source::Constant([*cpu_watts, *ram_watts, *gpu_watts]),
            SourceConfig::TraceReplay { path } => Source::Trace(PowerTrace::load(path)?),
            SourceConfig::Powercap { root } => Source::Powercap(discover_zones(root)?),
        })
    }

    fn name(&self) -> &'static str {
        match self {
            Source::Constant(_) => "constant-power",
            Source::Trace(_) => "trace-replay",
            Source::Powercap(_) => "powercap",
        }
    }

    fn read(&mut self, t: f64) -> Result<Vec<Reading>, MeterError> {
        Ok(match self {
            Source::Constant(w) => Domain::ALL
                .into_iter()
                .map(|domain| {
                    Reading::Power(PowerSample {
                        timestamp: t,
                        watts: w[domain.index()],
                        domain,
                    })
                })
                .collect(),
            Source::Trace(trace) => trace.samples_at(t).into_iter().map(Reading::Power).collect(),
            Source::Powercap(zones) => zones
                .iter_mut()
                .map(|z| {
                    Ok(Reading::Energy {
                        domain: z.domain,
                        joules: z.read_delta_joules()?,
                    })
                })
                .collect::<Result<_, MeterError>>()?,
        })
    }

    /// Times inside `(t0, t1)` where the source's power changes slope.
    fn knots(&self, t0: f64, t1: f64) -> Vec<f64> {
        match self {
            Source::Trace(trace) => trace.knots_between(t0, t1),
            _ => Vec::new(),
        }
    }
}

#[derive(Clone, Copy)]
enum Clock {
    Wall(Instant),
    Modeled(f64),
}

impl Clock {
    fn now(&self) -> f64 {
        match self {
            Clock::Wall(epoch) => epoch.elapsed().as_secs_f64(),
            Clock::Modeled(t) => *t,
        }
    }
}

struct Sampler {
    stop: mpsc::Sender<()>,
    readings: mpsc::Receiver<Result<Vec<Reading>, MeterError>>,
    join: thread::JoinHandle<()>,
}

/// An open span. Hand it back to [`Meter::stop_span`].
#[must_use]
pub struct SpanHandle {
    id: u64,
    start: f64,
    first: Vec<Reading>,
    sampler: Option<Sampler>,
}

pub struct Meter {
    config: MeterConfig,
    source: Arc<Mutex<Source>>,
    clock: Clock,
    /// Modeled seconds charged since the open span started.
    span_elapsed: f64,
    open: Option<u64>,
    next_id: u64,
}

impl Meter {
    pub fn new(config: MeterConfig) -> Result<Self, MeterError> {
        config.validate()?;
        let source = match (Source::open(&config.source), &config.fallback) {
            (Ok(s), _) => s,
            (Err(MeterError::Source { .. }), Some(fallback)) => Source::open(fallback)?,
            (Err(e), _) => return Err(e),
        };
        let clock = match config.clock {
            ClockKind::Wall => Clock::Wall(Instant::now()),
            ClockKind::Modeled => Clock::Modeled(0.0),
        };
        Ok(Self {
            config,
            source: Arc::new(Mutex::new(source)),
            clock,
            span_elapsed: 0.0,
            open: None,
            next_id: 0,
        })
    }

    pub fn config(&self) -> &MeterConfig {
        &self.config
    }

    pub fn source_name(&self) -> &'static str {
        self.source.lock().expect("source lock").name()
    }

    pub fn carbon_intensity(&self) -> f64 {
        self.config.carbon_intensity
    }

    pub fn is_span_open(&self) -> bool {
        self.open.is_some()
    }

    /// Current meter time in seconds.
    pub fn now(&self) -> f64 {
        self.clock.now()
    }

    /// Advances the modeled clock; no effect on the wall clock.
    pub fn advance(&mut self, seconds: f64) {
        if let Clock::Modeled(t) = &mut self.clock {
            *t += seconds.max(0.0);
            self.span_elapsed += seconds.max(0.0);
        }
    }

    /// Charges counted work to the modeled clock.
    pub fn charge(&mut self, work: &Work) {
        let s = self.config.cost.seconds(work);
        self.advance(s);
    }

    pub fn start_span(&mut self) -> Result<SpanHandle, MeterError> {
        if self.open.is_some() {
            return Err(MeterError::Usage("a span is already open on this meter".into()));
        }
        let start = self.clock.now();
        let first = self.source.lock().expect("source lock").read(start)?;
        let sampler = match self.clock {
            Clock::Wall(epoch) => Some(self.spawn_sampler(epoch)),
            Clock::Modeled(_) => None,
        };
        let id = self.next_id;
        self.next_id += 1;
        self.open = Some(id);
        self.span_elapsed = 0.0;
        Ok(SpanHandle {
            id,
            start,
            first,
            sampler,
        })
    }

    fn spawn_sampler(&self, epoch: Instant) -> Sampler {
        let (stop, stop_rx) = mpsc::channel::<()>();
        let (tx, readings) = mpsc::channel();
        let source = Arc::clone(&self.source);
        let interval = Duration::from_secs_f64(self.config.sampling_interval_s);
        let join = thread::spawn(move || {
            while let Err(mpsc::RecvTimeoutError::Timeout) = stop_rx.recv_timeout(interval) {
                let t = epoch.elapsed().as_secs_f64();
                let r = source.lock().expect("source lock").read(t);
                let failed = r.is_err();
                if tx.send(r).is_err() || failed {
                    break;
                }
            }
        });
        Sampler {
            stop,
            readings,
            join,
        }
    }

    pub fn stop_span(&mut self, handle: SpanHandle) -> Result<EnergyReport, MeterError> {
        if self.open != Some(handle.id) {
            return Err(MeterError::Usage("span handle does not belong to the open span".into()));
        }
        self.open = None;

        let mut readings = handle.first;
        if let Some(sampler) = handle.sampler {
            let _ = sampler.stop.send(());
            sampler
                .join
                .join()
                .map_err(|_| MeterError::Usage("sampler thread panicked".into()))?;
            for r in sampler.readings.try_iter() {
                readings.extend(r?);
            }
        }
        let end = self.clock.now();
        {
            let mut source = self.source.lock().expect("source lock");
            if let Clock::Modeled(_) = self.clock {
                for t in self.grid(&source, handle.start, end) {
                    readings.extend(source.read(t)?);
                }
            }
            readings.extend(source.read(end)?);
        }

        let mut power = Vec::new();
        let mut joules = [0.0; 3];
        for r in readings {
            match r {
                Reading::Power(s) => power.push(s),
                Reading::Energy { domain, joules: j } => joules[domain.index()] += j,
            }
        }
        let integrated = integrate_by_domain(&power)?;
        for d in Domain::ALL {
            joules[d.index()] += integrated[d.index()];
        }
        // Modeled spans report the charged time itself, so a span's energy
        // does not depend on where it falls on the run's clock.
        let duration = match self.clock {
            Clock::Modeled(_) => {
                if let Source::Constant(w) = &*self.source.lock().expect("source lock") {
                    joules = w.map(|w| w * self.span_elapsed);
                }
                self.span_elapsed
            }
            Clock::Wall(_) => end - handle.start,
        };
        Ok(EnergyReport::new(joules, duration, self.config.carbon_intensity))
    }

    /// Interior sample times for a modeled span: the sampling grid plus any
    /// source knots, so piecewise-linear traces integrate exactly. A
    /// constant source needs only the endpoints.
    fn grid(&self, source: &Source, t0: f64, t1: f64) -> Vec<f64> {
        if matches!(source, Source::Constant(_)) {
            return Vec::new();
        }
        let dt = self.config.sampling_interval_s;
        let mut ts: Vec<f64> = (1..)
            .map(|k| t0 + k as f64 * dt)
            .take_while(|t| *t < t1)
            .collect();
        ts.extend(source.knots(t0, t1));
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        ts
    }

    /// Runs `f` inside a span and returns its result with the report.
    pub fn measure<T>(
        &mut self,
        f: impl FnOnce(&mut Meter) -> T,
    ) -> Result<(T, EnergyReport), MeterError> {
        let span = self.start_span()?;
        let out = f(self);
        let report = self.stop_span(span)?;
        Ok((out, report))
    }
}
