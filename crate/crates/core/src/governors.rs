//! Frequency controllers: quickstep (GPU), EAS load tracking (CPU), interactive
//! (memory) and Pin.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::freq::{Component, FrequencyTable, Mhz, OperatingPoint, Setting};
use crate::model::UtilPoint;

/// One row of the quickstep `dvfs_table`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuickstepRow {
    pub freq: Mhz,
    pub min_util: f64,
    pub max_util: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuickstepParams {
    pub window_ms: u32,
    pub initial_freq: Mhz,
    pub rows: Vec<QuickstepRow>,
}

impl QuickstepParams {
    /// Uniform bands: `[lo, hi]` everywhere except `min = 0` on the lowest row and
    /// `max = 1` on the highest.
    pub fn uniform(table: &FrequencyTable, lo: f64, hi: f64, window_ms: u32) -> Self {
        let gpu = table.gpu();
        let last = gpu.len() - 1;
        let rows = gpu
            .iter()
            .enumerate()
            .map(|(i, &freq)| QuickstepRow {
                freq,
                min_util: if i == 0 { 0.0 } else { lo },
                max_util: if i == last { 1.0 } else { hi },
            })
            .collect();
        QuickstepParams {
            window_ms,
            initial_freq: table.max(Component::Gpu),
            rows,
        }
    }

    pub fn validate(&self, table: &FrequencyTable) -> Result<()> {
        let freqs: Vec<Mhz> = self.rows.iter().map(|r| r.freq).collect();
        if freqs != table.gpu() {
            return Err(Error::InvalidParams(
                "quickstep rows must cover exactly the GPU frequency list".into(),
            ));
        }
        for r in &self.rows {
            if !(0.0 <= r.min_util && r.min_util < r.max_util && r.max_util <= 1.0) {
                return Err(Error::InvalidParams(format!(
                    "quickstep row {} needs 0 <= min < max <= 1",
                    r.freq
                )));
            }
        }
        if self.rows.windows(2).any(|w| w[1].min_util > w[0].max_util) {
            return Err(Error::InvalidParams(
                "quickstep bands leave a dead band".into(),
            ));
        }
        if self.window_ms == 0 {
            return Err(Error::InvalidParams(
                "quickstep window must be >= 1 ms".into(),
            ));
        }
        table.check(Component::Gpu, self.initial_freq)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EasParams {
    pub capacity: f64,
    pub half_life_ms: f64,
    pub headroom: f64,
    pub initial_freq: Mhz,
}

impl EasParams {
    pub fn decay(&self) -> f64 {
        0.5f64.powf(1.0 / self.half_life_ms)
    }

    pub fn validate(&self, table: &FrequencyTable) -> Result<()> {
        let y = self.decay();
        if !(self.capacity > 0.0 && y > 0.0 && y < 1.0 && self.headroom >= 1.0) {
            return Err(Error::InvalidParams(
                "EAS needs capacity > 0, half-life > 0 and headroom >= 1".into(),
            ));
        }
        table.check(Component::Cpu, self.initial_freq)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InteractiveParams {
    pub target_load: f64,
    pub period_ms: u32,
    pub initial_freq: Mhz,
}

impl InteractiveParams {
    pub fn validate(&self, table: &FrequencyTable) -> Result<()> {
        if !(self.target_load > 0.0 && self.target_load <= 1.0) || self.period_ms == 0 {
            return Err(Error::InvalidParams(
                "interactive governor needs 0 < target_load <= 1 and period >= 1 ms".into(),
            ));
        }
        table.check(Component::Mem, self.initial_freq)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GovernorParams {
    pub quickstep: QuickstepParams,
    pub eas: EasParams,
    pub interactive: InteractiveParams,
}

impl GovernorParams {
    pub fn validate(&self, table: &FrequencyTable) -> Result<()> {
        self.quickstep.validate(table)?;
        self.eas.validate(table)?;
        self.interactive.validate(table)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuickstepState {
    rows: Vec<QuickstepRow>,
    index: usize,
    pub window_ms: u32,
}

impl QuickstepState {
    pub fn new(params: &QuickstepParams) -> Self {
        let index = params
            .rows
            .iter()
            .position(|r| r.freq == params.initial_freq)
            .unwrap_or(params.rows.len() - 1);
        QuickstepState {
            rows: params.rows.clone(),
            index,
            window_ms: params.window_ms,
        }
    }

    pub fn current_freq(&self) -> Mhz {
        self.rows[self.index].freq
    }

    pub fn row(&self) -> &QuickstepRow {
        &self.rows[self.index]
    }

    pub fn set_freq(&mut self, f: Mhz) {
        if let Some(i) = self.rows.iter().position(|r| r.freq == f) {
            self.index = i;
        }
    }

    /// One evaluation with the window-average utilization; moves at most one step.
    pub fn step(&mut self, window_avg_util: f64) -> Mhz {
        let row = self.rows[self.index];
        if window_avg_util > row.max_util {
            self.index = (self.index + 1).min(self.rows.len() - 1);
        } else if window_avg_util < row.min_util {
            self.index = self.index.saturating_sub(1);
        }
        self.current_freq()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EasState {
    pub load: f64,
    pub capacity: f64,
    pub decay: f64,
    pub headroom: f64,
    pub current_freq: Mhz,
}

impl EasState {
    /// Starts with the load that selects `initial_freq`.
    pub fn new(params: &EasParams, table: &FrequencyTable) -> Self {
        let f_max = table.max(Component::Cpu).as_f64();
        EasState {
            load: params.capacity * params.initial_freq.as_f64() / f_max / params.headroom,
            capacity: params.capacity,
            decay: params.decay(),
            headroom: params.headroom,
            current_freq: params.initial_freq,
        }
    }

    /// Folds one 1 ms sample into the frequency-invariant load.
    pub fn tick(&mut self, busy_fraction: f64, f_cur: Mhz, f_max: Mhz) -> f64 {
        let sample = self.capacity * busy_fraction * (f_cur.as_f64() / f_max.as_f64());
        self.load =
            (self.decay * self.load + (1.0 - self.decay) * sample).clamp(0.0, self.capacity);
        self.load
    }

    /// Lowest CPU frequency whose capacity covers `headroom · load`.
    pub fn select(&self, table: &FrequencyTable) -> Mhz {
        let f_max = table.max(Component::Cpu).as_f64();
        table.ceil(
            Component::Cpu,
            self.headroom * self.load * f_max / self.capacity,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InteractiveMemState {
    pub current_freq: Mhz,
    pub target_load: f64,
    pub period_ms: u32,
}

impl InteractiveMemState {
    pub fn new(params: &InteractiveParams) -> Self {
        InteractiveMemState {
            current_freq: params.initial_freq,
            target_load: params.target_load,
            period_ms: params.period_ms,
        }
    }

    pub fn step(&mut self, u_mem: f64, table: &FrequencyTable) -> Mhz {
        let target = self.current_freq.as_f64() * u_mem / self.target_load;
        self.current_freq = table.ceil(Component::Mem, target);
        self.current_freq
    }
}

/// A fixed-frequency controller (min = max clamp).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PinGovernor {
    pub component: Component,
    pub freq: Mhz,
}

impl PinGovernor {
    pub fn step(&self) -> Mhz {
        self.freq
    }
}

pub fn make_pin(component: Component, freq: Mhz, table: &FrequencyTable) -> Result<PinGovernor> {
    table.check(component, freq)?;
    Ok(PinGovernor { component, freq })
}

/// Mean of per-tick samples over a governor window.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Window {
    sum: f64,
    ticks: u32,
}

impl Window {
    fn push(&mut self, v: f64) {
        self.sum += v;
        self.ticks += 1;
    }

    fn take_if_full(&mut self, len: u32) -> Option<f64> {
        if self.ticks < len {
            return None;
        }
        let mean = self.sum / f64::from(self.ticks);
        *self = Window::default();
        Some(mean)
    }
}

/// The three controllers of one run.
///
/// Every governor keeps tracking its input while its component is pinned, so a pin
/// released mid-run hands control back to a governor that starts from the pinned
/// frequency with its load history intact.
#[derive(Debug, Clone)]
pub struct GovernorSet {
    pub eas: EasState,
    pub quickstep: QuickstepState,
    pub interactive: InteractiveMemState,
    pub cpu_pin: Option<PinGovernor>,
    pub gpu_pin: Option<PinGovernor>,
    pub mem_pin: Option<PinGovernor>,
    gpu_window: Window,
    mem_window: Window,
}

impl GovernorSet {
    pub fn new(
        params: &GovernorParams,
        table: &FrequencyTable,
        point: OperatingPoint,
    ) -> Result<Self> {
        let mut set = GovernorSet {
            eas: EasState::new(&params.eas, table),
            quickstep: QuickstepState::new(&params.quickstep),
            interactive: InteractiveMemState::new(&params.interactive),
            cpu_pin: None,
            gpu_pin: None,
            mem_pin: None,
            gpu_window: Window::default(),
            mem_window: Window::default(),
        };
        set.apply(point, table)?;
        if let Some(p) = set.cpu_pin {
            set.eas = EasState {
                current_freq: p.freq,
                ..EasState::new(
                    &EasParams {
                        initial_freq: p.freq,
                        ..params.eas
                    },
                    table,
                )
            };
        }
        Ok(set)
    }

    /// Switches each component to the given setting. Releasing a pin leaves the
    /// governor at the pinned frequency.
    pub fn apply(&mut self, point: OperatingPoint, table: &FrequencyTable) -> Result<()> {
        point.validate(table)?;
        let pin = |c, s: Setting| {
            s.pinned().map(|f| PinGovernor {
                component: c,
                freq: f,
            })
        };
        let (cpu, gpu, mem) = (
            pin(Component::Cpu, point.cpu),
            pin(Component::Gpu, point.gpu),
            pin(Component::Mem, point.mem),
        );
        if let (Some(old), None) = (self.cpu_pin, cpu) {
            self.eas.current_freq = old.freq;
        }
        if let (Some(old), None) = (self.gpu_pin, gpu) {
            self.quickstep.set_freq(old.freq);
            self.gpu_window = Window::default();
        }
        if let (Some(old), None) = (self.mem_pin, mem) {
            self.interactive.current_freq = old.freq;
            self.mem_window = Window::default();
        }
        self.cpu_pin = cpu;
        self.gpu_pin = gpu;
        self.mem_pin = mem;
        Ok(())
    }

    pub fn point(&self) -> OperatingPoint {
        let s = |p: Option<PinGovernor>| p.map_or(Setting::Governor, |p| Setting::Pin(p.freq));
        OperatingPoint {
            cpu: s(self.cpu_pin),
            gpu: s(self.gpu_pin),
            mem: s(self.mem_pin),
        }
    }

    pub fn cpu_freq(&self) -> Mhz {
        self.cpu_pin.map_or(self.eas.current_freq, |p| p.step())
    }

    pub fn gpu_freq(&self) -> Mhz {
        self.gpu_pin
            .map_or(self.quickstep.current_freq(), |p| p.step())
    }

    pub fn mem_freq(&self) -> Mhz {
        self.mem_pin
            .map_or(self.interactive.current_freq, |p| p.step())
    }

    /// Feeds one 1 ms tick of busy fractions. EAS samples every tick; quickstep and
    /// the memory governor act at the end of each full window.
    pub fn observe(&mut self, busy: &UtilPoint, table: &FrequencyTable) {
        let f_cpu = self.cpu_freq();
        self.eas.tick(busy.u_cpu, f_cpu, table.max(Component::Cpu));
        if self.cpu_pin.is_none() {
            self.eas.current_freq = self.eas.select(table);
        }

        self.gpu_window.push(busy.u_gpu);
        if let Some(avg) = self.gpu_window.take_if_full(self.quickstep.window_ms) {
            if self.gpu_pin.is_none() {
                self.quickstep.step(avg);
            }
        }

        self.mem_window.push(busy.u_mem);
        if let Some(avg) = self.mem_window.take_if_full(self.interactive.period_ms) {
            if self.mem_pin.is_none() {
                self.interactive.step(avg, table);
            }
        }
    }
}
