use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::memory::PAGE_SIZE;

/// Which detectors are active. All three by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Detectors {
    pub overflow: bool,
    pub uaf: bool,
    pub leak: bool,
}

impl Detectors {
    pub const ALL: Detectors = Detectors { overflow: true, uaf: true, leak: true };
    pub const NONE: Detectors = Detectors { overflow: false, uaf: false, leak: false };

    /// True when some detector relies on canaries and the bitmap.
    pub fn uses_canaries(&self) -> bool {
        self.overflow || self.uaf
    }
}

impl Default for Detectors {
    fn default() -> Self {
        Detectors::ALL
    }
}

impl FromStr for Detectors {
    type Err = ConfigError;

    /// Parses a comma-separated subset such as `overflow,leak`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = Detectors::NONE;
        for name in s.split(',').map(str::trim).filter(|n| !n.is_empty()) {
            match name {
                "overflow" => out.overflow = true,
                "uaf" => out.uaf = true,
                "leak" => out.leak = true,
                "all" => out = Detectors::ALL,
                other => return Err(ConfigError::UnknownDetector(other.to_string())),
            }
        }
        Ok(out)
    }
}

impl fmt::Display for Detectors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [(self.overflow, "overflow"), (self.uaf, "uaf"), (self.leak, "leak")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        f.write_str(&names.join(","))
    }
}

/// Placement of the modeled address space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeapGeometry {
    pub heap_base: u64,
    pub heap_size: u64,
    pub globals_base: u64,
    pub globals_words: u64,
    pub min_class: u64,
    pub max_class: u64,
}

impl Default for HeapGeometry {
    fn default() -> Self {
        HeapGeometry {
            heap_base: 0x1_0000_0000,
            heap_size: 256 << 20,
            globals_base: 0x10000,
            globals_words: 4096,
            min_class: 16,
            max_class: 1 << 20,
        }
    }
}

impl HeapGeometry {
    pub fn heap_end(&self) -> u64 {
        self.heap_base + self.heap_size
    }

    pub fn globals_end(&self) -> u64 {
        self.globals_base + self.globals_words * 8
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let page = PAGE_SIZE as u64;
        if self.heap_size == 0 {
            return Err(ConfigError::NotPositive("heap size"));
        }
        if self.globals_words == 0 {
            return Err(ConfigError::NotPositive("globals words"));
        }
        for (name, value) in [("min class", self.min_class), ("max class", self.max_class)] {
            if !value.is_power_of_two() {
                return Err(ConfigError::NotPowerOfTwo { name, value });
            }
        }
        if self.min_class < 16 {
            return Err(ConfigError::Geometry("min class must be at least 16 bytes".into()));
        }
        if self.max_class < self.min_class {
            return Err(ConfigError::Geometry("max class is smaller than min class".into()));
        }
        if !self.heap_base.is_multiple_of(page) || !self.heap_size.is_multiple_of(page) {
            return Err(ConfigError::Geometry("heap base and size must be page aligned".into()));
        }
        if !self.globals_base.is_multiple_of(8) {
            return Err(ConfigError::Geometry("globals base must be eight-byte aligned".into()));
        }
        let heap_end = self
            .heap_base
            .checked_add(self.heap_size)
            .ok_or_else(|| ConfigError::Geometry("heap region overflows the address space".into()))?;
        let globals_end = self
            .globals_words
            .checked_mul(8)
            .and_then(|b| self.globals_base.checked_add(b))
            .ok_or_else(|| ConfigError::Geometry("globals region overflows the address space".into()))?;
        if self.globals_base < heap_end && self.heap_base < globals_end {
            return Err(ConfigError::Geometry("globals overlap the heap".into()));
        }
        let classes = self.class_count() as u64;
        let region = (self.heap_size / classes) / page * page;
        if region < self.max_class + crate::heap::SLOT_OVERHEAD + crate::heap::GUARD_BYTES {
            return Err(ConfigError::Geometry(format!(
                "heap of {} bytes cannot hold one {}-byte object per size class",
                self.heap_size, self.max_class
            )));
        }
        Ok(())
    }

    pub fn class_count(&self) -> usize {
        (self.max_class.trailing_zeros() - self.min_class.trailing_zeros() + 1) as usize
    }
}

/// Full engine configuration. Defaults carry the thresholds the detectors
/// were designed around: 16 MiB / 1024-object quarantine, 128-byte
/// use-after-free fill, four watchpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub detectors: Detectors,
    pub quarantine_max_bytes: u64,
    pub quarantine_max_count: u64,
    pub uaf_fill_prefix: u64,
    pub canary_byte: u8,
    pub max_watchpoints: usize,
    pub dangling: bool,
    pub geometry: HeapGeometry,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            detectors: Detectors::ALL,
            quarantine_max_bytes: 16 << 20,
            quarantine_max_count: 1024,
            uaf_fill_prefix: 128,
            canary_byte: 0xCA,
            max_watchpoints: 4,
            dangling: false,
            geometry: HeapGeometry::default(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.quarantine_max_bytes == 0 {
            return Err(ConfigError::NotPositive("quarantine bytes"));
        }
        if self.quarantine_max_count == 0 {
            return Err(ConfigError::NotPositive("quarantine count"));
        }
        if self.uaf_fill_prefix == 0 {
            return Err(ConfigError::NotPositive("uaf fill prefix"));
        }
        if self.max_watchpoints == 0 {
            return Err(ConfigError::NotPositive("max watchpoints"));
        }
        self.geometry.validate()
    }
}
