//! Frequency domains and operating points.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A clock frequency in MHz.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Mhz(pub u32);

impl Mhz {
    pub fn as_f64(self) -> f64 {
        f64::from(self.0)
    }
}

impl fmt::Display for Mhz {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} MHz", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Cpu,
    Gpu,
    Mem,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Cpu, Component::Gpu, Component::Mem];
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::Cpu => "cpu",
            Component::Gpu => "gpu",
            Component::Mem => "mem",
        })
    }
}

/// Discrete available frequencies per component, each list strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTable {
    cpu: Vec<Mhz>,
    gpu: Vec<Mhz>,
    mem: Vec<Mhz>,
}

const PIXEL7_CPU: [u32; 18] = [
    500, 851, 984, 1106, 1277, 1426, 1582, 1745, 1826, 2048, 2188, 2252, 2401, 2507, 2630, 2704,
    2802, 2850,
];
const PIXEL7_GPU: [u32; 12] = [151, 202, 251, 302, 351, 400, 471, 510, 572, 701, 762, 848];
const PIXEL7_MEM: [u32; 13] = [
    421, 546, 676, 845, 1014, 1352, 1539, 1716, 2028, 2288, 2535, 2730, 3172,
];

impl FrequencyTable {
    pub fn new(cpu: Vec<Mhz>, gpu: Vec<Mhz>, mem: Vec<Mhz>) -> Result<Self> {
        let table = FrequencyTable { cpu, gpu, mem };
        table.validate()?;
        Ok(table)
    }

    /// The Pixel 7 / 7 Pro frequency table.
    pub fn pixel7() -> Self {
        let wrap = |xs: &[u32]| xs.iter().copied().map(Mhz).collect();
        FrequencyTable {
            cpu: wrap(&PIXEL7_CPU),
            gpu: wrap(&PIXEL7_GPU),
            mem: wrap(&PIXEL7_MEM),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for c in Component::ALL {
            let list = self.list(c);
            if list.is_empty() {
                return Err(Error::InvalidTable(format!("{c} list is empty")));
            }
            if list.iter().any(|f| f.0 == 0) {
                return Err(Error::InvalidTable(format!("{c} list contains 0 MHz")));
            }
            if list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidTable(format!(
                    "{c} list is not strictly increasing"
                )));
            }
        }
        Ok(())
    }

    pub fn list(&self, c: Component) -> &[Mhz] {
        match c {
            Component::Cpu => &self.cpu,
            Component::Gpu => &self.gpu,
            Component::Mem => &self.mem,
        }
    }

    pub fn cpu(&self) -> &[Mhz] {
        &self.cpu
    }

    pub fn gpu(&self) -> &[Mhz] {
        &self.gpu
    }

    pub fn mem(&self) -> &[Mhz] {
        &self.mem
    }

    pub fn max(&self, c: Component) -> Mhz {
        *self.list(c).last().expect("validated non-empty")
    }

    pub fn min(&self, c: Component) -> Mhz {
        self.list(c)[0]
    }

    pub fn index_of(&self, c: Component, f: Mhz) -> Option<usize> {
        self.list(c).binary_search(&f).ok()
    }

    pub fn contains(&self, c: Component, f: Mhz) -> bool {
        self.index_of(c, f).is_some()
    }

    pub fn check(&self, c: Component, f: Mhz) -> Result<Mhz> {
        if self.contains(c, f) {
            Ok(f)
        } else {
            Err(Error::NotInTable {
                component: c,
                freq: f,
            })
        }
    }

    /// Lowest listed frequency that is at least `target`, or the maximum if none is.
    pub fn ceil(&self, c: Component, target: f64) -> Mhz {
        let list = self.list(c);
        list.iter()
            .copied()
            .find(|f| f.as_f64() >= target)
            .unwrap_or(list[list.len() - 1])
    }

    /// `f / max(list)` for the component.
    pub fn normalized(&self, c: Component, f: Mhz) -> f64 {
        f.as_f64() / self.max(c).as_f64()
    }

    pub fn len(&self, c: Component) -> usize {
        self.list(c).len()
    }

    pub fn grid_size(&self) -> usize {
        self.cpu.len() * self.gpu.len() * self.mem.len()
    }
}

impl Default for FrequencyTable {
    fn default() -> Self {
        FrequencyTable::pixel7()
    }
}

/// A fully pinned (CPU, GPU, memory) frequency combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FreqConfig {
    pub cpu: Mhz,
    pub gpu: Mhz,
    pub mem: Mhz,
}

impl FreqConfig {
    pub fn new(cpu: u32, gpu: u32, mem: u32) -> Self {
        FreqConfig {
            cpu: Mhz(cpu),
            gpu: Mhz(gpu),
            mem: Mhz(mem),
        }
    }

    pub fn get(&self, c: Component) -> Mhz {
        match c {
            Component::Cpu => self.cpu,
            Component::Gpu => self.gpu,
            Component::Mem => self.mem,
        }
    }

    pub fn validate(&self, table: &FrequencyTable) -> Result<()> {
        for c in Component::ALL {
            table.check(c, self.get(c))?;
        }
        Ok(())
    }

    pub fn max_of(table: &FrequencyTable) -> Self {
        FreqConfig {
            cpu: table.max(Component::Cpu),
            gpu: table.max(Component::Gpu),
            mem: table.max(Component::Mem),
        }
    }

    pub fn min_of(table: &FrequencyTable) -> Self {
        FreqConfig {
            cpu: table.min(Component::Cpu),
            gpu: table.min(Component::Gpu),
            mem: table.min(Component::Mem),
        }
    }
}

impl fmt::Display for FreqConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.cpu.0, self.gpu.0, self.mem.0)
    }
}

/// How one component's frequency is controlled during a run.
///
/// Orders pinned settings by frequency, with `Governor` after every pin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Setting {
    Pin(Mhz),
    Governor,
}

impl Setting {
    pub fn pinned(self) -> Option<Mhz> {
        match self {
            Setting::Pin(f) => Some(f),
            Setting::Governor => None,
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Setting::Pin(m) => write!(f, "{}", m.0),
            Setting::Governor => f.write_str("gov"),
        }
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("gov") || s.eq_ignore_ascii_case("default") {
            return Ok(Setting::Governor);
        }
        s.parse::<u32>()
            .map(|v| Setting::Pin(Mhz(v)))
            .map_err(|_| Error::InvalidParams(format!("not a frequency or 'gov': {s:?}")))
    }
}

/// Per-component control for a run: any mix of pinned and governed components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub cpu: Setting,
    pub gpu: Setting,
    pub mem: Setting,
}

impl OperatingPoint {
    pub const GOVERNED: OperatingPoint = OperatingPoint {
        cpu: Setting::Governor,
        gpu: Setting::Governor,
        mem: Setting::Governor,
    };

    pub fn pinned(cfg: FreqConfig) -> Self {
        OperatingPoint {
            cpu: Setting::Pin(cfg.cpu),
            gpu: Setting::Pin(cfg.gpu),
            mem: Setting::Pin(cfg.mem),
        }
    }

    /// CPU and GPU pinned, memory under its governor.
    pub fn cpu_gpu(cpu: Mhz, gpu: Mhz) -> Self {
        OperatingPoint {
            cpu: Setting::Pin(cpu),
            gpu: Setting::Pin(gpu),
            mem: Setting::Governor,
        }
    }

    /// Only the GPU pinned.
    pub fn gpu_only(gpu: Mhz) -> Self {
        OperatingPoint {
            cpu: Setting::Governor,
            gpu: Setting::Pin(gpu),
            mem: Setting::Governor,
        }
    }

    pub fn get(&self, c: Component) -> Setting {
        match c {
            Component::Cpu => self.cpu,
            Component::Gpu => self.gpu,
            Component::Mem => self.mem,
        }
    }

    pub fn as_config(&self) -> Option<FreqConfig> {
        Some(FreqConfig {
            cpu: self.cpu.pinned()?,
            gpu: self.gpu.pinned()?,
            mem: self.mem.pinned()?,
        })
    }

    pub fn validate(&self, table: &FrequencyTable) -> Result<()> {
        for c in Component::ALL {
            if let Setting::Pin(f) = self.get(c) {
                table.check(c, f)?;
            }
        }
        Ok(())
    }
}

impl fmt::Display for OperatingPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(cpu={}, gpu={}, mem={})", self.cpu, self.gpu, self.mem)
    }
}
