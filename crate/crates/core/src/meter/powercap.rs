//! Power-capping energy counters (`energy_uj` / `max_energy_range_uj`).

use std::fs;
use std::path::{Path, PathBuf};

use super::{Domain, MeterError};

pub const DEFAULT_ROOT: &str = "/sys/class/powercap";

/// Reads a non-negative integer microjoule counter from a text file.
pub fn read_powercap_counter(path: impl AsRef<Path>) -> Result<u64, MeterError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| MeterError::source(format!("{}: {e}", path.display())))?;
    text.trim()
        .parse::<u64>()
        .map_err(|e| MeterError::source(format!("{}: not a counter value ({e})", path.display())))
}

/// Counter increase from `prev` to `curr`, assuming at most one wrap at
/// `max`.
pub fn counter_delta(prev: u64, curr: u64, max: u64) -> u64 {
    if curr >= prev {
        curr - prev
    } else {
        max.saturating_sub(prev) + curr
    }
}

/// One counter zone mapped to a power domain.
#[derive(Debug)]
pub struct Zone {
    pub domain: Domain,
    pub energy_path: PathBuf,
    pub max_uj: u64,
    last_uj: u64,
}

impl Zone {
    /// Opens a zone directory holding `energy_uj` and `max_energy_range_uj`.
    pub fn open(dir: &Path, domain: Domain) -> Result<Self, MeterError> {
        let energy_path = dir.join("energy_uj");
        let max_uj = read_powercap_counter(dir.join("max_energy_range_uj"))?;
        let last_uj = read_powercap_counter(&energy_path)?;
        Ok(Self {
            domain,
            energy_path,
            max_uj,
            last_uj,
        })
    }

    /// Joules consumed since the previous read.
    pub fn read_delta_joules(&mut self) -> Result<f64, MeterError> {
        let curr = read_powercap_counter(&self.energy_path)?;
        let delta = counter_delta(self.last_uj, curr, self.max_uj);
        self.last_uj = curr;
        Ok(delta as f64 * 1e-6)
    }
}

/// Finds package (cpu) and dram (ram) zones under a powercap root. Core and
/// uncore subzones are skipped since the package already covers them.
pub fn discover_zones(root: &Path) -> Result<Vec<Zone>, MeterError> {
    let entries = fs::read_dir(root).map_err(|e| MeterError::source(format!("{}: {e}", root.display())))?;
    let mut dirs: Vec<PathBuf> = Vec::new();
    for entry in entries.flatten() {
        let path = entry.path();
        if path.join("energy_uj").is_file() {
            dirs.push(path.clone());
        }
        // subzones nest one level down on most systems
        if let Ok(sub) = fs::read_dir(&path) {
            dirs.extend(
                sub.flatten()
                    .map(|e| e.path())
                    .filter(|p| p.join("energy_uj").is_file()),
            );
        }
    }
    dirs.sort();
    dirs.dedup();

    let mut zones = Vec::new();
    for dir in dirs {
        let name = fs::read_to_string(dir.join("name")).unwrap_or_default();
        let name = name.trim();
        let domain = if name.starts_with("package") {
            Domain::Cpu
        } else if name.starts_with("dram") {
            Domain::Ram
        } else {
            continue;
        };
        zones.push(Zone::open(&dir, domain)?);
    }
    if zones.is_empty() {
        return Err(MeterError::source(format!(
            "no package or dram zones under {}",
            root.display()
        )));
    }
    Ok(zones)
}
