//! Domain types, address arithmetic, and configuration shared by all other
//! modules.
//!
//! All types here are immutable value types after construction and safe to
//! share across concurrently running, independent simulations.

use crate::arch::Architecture;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;

/// Geometry of one set-associative sector cache.
///
/// Defaults model a 64 KB, 64-way sector cache with 128 B lines, 32 B
/// sectors and 4 data banks, which works out to 8 sets and 4 sectors per
/// line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheGeometry {
    pub capacity_bytes: u64,
    pub line_size: u64,
    pub sector_size: u64,
    pub ways: u32,
    pub data_banks: u32,
}

impl CacheGeometry {
    /// Default L1 geometry: 64 KB, 64-way, 128 B lines, 32 B sectors, 4 banks.
    pub fn l1_default() -> CacheGeometry {
        CacheGeometry {
            capacity_bytes: 65536,
            line_size: 128,
            sector_size: 32,
            ways: 64,
            data_banks: 4,
        }
    }

    /// Default L2 partition geometry: 128 KB, 16-way, 128 B lines, 32 B sectors.
    pub fn l2_default() -> CacheGeometry {
        CacheGeometry {
            capacity_bytes: 131072,
            line_size: 128,
            sector_size: 32,
            ways: 16,
            data_banks: 1,
        }
    }

    pub fn sets(&self) -> u64 {
        self.capacity_bytes / (self.ways as u64 * self.line_size)
    }

    pub fn sectors_per_line(&self) -> u64 {
        self.line_size / self.sector_size
    }

    /// Checks every geometry invariant, pushing one error per violation.
    pub fn validate(&self, prefix: &str, errors: &mut Vec<ConfigError>) {
        let mut err = |field: &str, message: String| {
            errors.push(ConfigError {
                field: format!("{prefix}.{field}"),
                message,
            });
        };
        if self.line_size == 0 || self.sector_size == 0 || self.ways == 0 {
            err(
                "line_size",
                "line_size, sector_size and ways must all be nonzero".to_string(),
            );
            return;
        }
        if self.data_banks == 0 {
            err("data_banks", "must be at least 1".to_string());
        }
        if self.line_size % self.sector_size != 0 {
            err(
                "sector_size",
                format!(
                    "line_size {} not divisible by sector_size {}",
                    self.line_size, self.sector_size
                ),
            );
        }
        let denom = self.ways as u64 * self.line_size;
        if self.capacity_bytes % denom != 0 {
            err(
                "capacity_bytes",
                format!(
                    "capacity {} is not a multiple of ways x line_size = {}",
                    self.capacity_bytes, denom
                ),
            );
            return;
        }
        let sets = self.capacity_bytes / denom;
        if sets == 0 || !sets.is_power_of_two() {
            err(
                "capacity_bytes",
                format!("derived set count {sets} must be a power of two >= 1"),
            );
        }
    }
}

/// Address decomposed against a cache geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AddressParts {
    pub tag: u64,
    pub set_index: u64,
    pub sector_index: u64,
    pub line_address: u64,
}

impl AddressParts {
    /// Rebuilds the byte address from the decomposition plus the byte offset
    /// within the sector.
    pub fn recompose(&self, offset_in_sector: u64, geometry: &CacheGeometry) -> u64 {
        let line = self.tag * geometry.sets() + self.set_index;
        line * geometry.line_size + self.sector_index * geometry.sector_size + offset_in_sector
    }
}

/// Splits a byte address into (tag, set, sector, line address) under the
/// given geometry. Set selection is plain modulo over the line address.
pub fn decode_address(address: u64, geometry: &CacheGeometry) -> AddressParts {
    let line_address = address / geometry.line_size;
    let sets = geometry.sets();
    AddressParts {
        tag: line_address / sets,
        set_index: line_address % sets,
        sector_index: (address % geometry.line_size) / geometry.sector_size,
        line_address,
    }
}

/// Whether a memory access reads or writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AccessKind {
    Load,
    Store,
}

/// One memory access from a core.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemRequest {
    pub request_id: u64,
    pub core_id: u32,
    pub address: u64,
    pub kind: AccessKind,
    /// Groups the requests produced by one load/store instruction.
    pub instruction_id: u64,
    pub issue_cycle: u64,
    pub completion_cycle: Option<u64>,
}

/// Full simulation configuration.
///
/// `t_tag + t_data` must equal `t_l1_local` so an unconflicted local hit
/// costs exactly the configured L1 latency end to end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub num_cores: u32,
    pub cores_per_cluster: u32,
    pub l1_geometry: CacheGeometry,
    pub l2_partitions: u32,
    pub l2_geometry: CacheGeometry,
    pub t_l1_local: u64,
    pub t_tag: u64,
    pub t_data: u64,
    pub t_xbar_hop: u64,
    pub t_l2: u64,
    pub t_mem: u64,
    pub flit_bytes: u64,
    pub max_outstanding_per_core: u32,
    pub mshr_entries: u32,
    pub architecture: Architecture,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> SimConfig {
        SimConfig {
            num_cores: 30,
            cores_per_cluster: 10,
            l1_geometry: CacheGeometry::l1_default(),
            l2_partitions: 24,
            l2_geometry: CacheGeometry::l2_default(),
            t_l1_local: 32,
            t_tag: 8,
            t_data: 24,
            t_xbar_hop: 5,
            t_l2: 188,
            t_mem: 300,
            flit_bytes: 40,
            max_outstanding_per_core: 64,
            mshr_entries: 32,
            architecture: Architecture::Private,
            seed: 0,
        }
    }
}

impl SimConfig {
    /// Validates every invariant, returning the config or the complete list
    /// of violations.
    pub fn validate(self) -> Result<SimConfig, ConfigErrors> {
        let mut errors = Vec::new();
        let mut err = |field: &str, message: String| {
            errors.push(ConfigError {
                field: field.to_string(),
                message,
            });
        };
        if self.num_cores == 0 {
            err("num_cores", "must be at least 1".to_string());
        }
        if self.cores_per_cluster == 0 {
            err("cores_per_cluster", "must be at least 1".to_string());
        } else if self.num_cores % self.cores_per_cluster != 0 {
            err(
                "cores_per_cluster",
                format!(
                    "num_cores {} not divisible by cores_per_cluster {}",
                    self.num_cores, self.cores_per_cluster
                ),
            );
        }
        if self.t_tag + self.t_data != self.t_l1_local {
            err(
                "t_l1_local",
                format!(
                    "t_tag + t_data != t_l1_local (observed {} + {} = {}, expected {})",
                    self.t_tag,
                    self.t_data,
                    self.t_tag + self.t_data,
                    self.t_l1_local
                ),
            );
        }
        if self.t_tag == 0 || self.t_data == 0 {
            err("t_tag", "t_tag and t_data must be nonzero".to_string());
        }
        if self.flit_bytes == 0 {
            err("flit_bytes", "must be at least 1".to_string());
        }
        if self.l2_partitions == 0 {
            err("l2_partitions", "must be at least 1".to_string());
        }
        if self.max_outstanding_per_core == 0 {
            err("max_outstanding_per_core", "must be at least 1".to_string());
        }
        if self.mshr_entries == 0 {
            err("mshr_entries", "must be at least 1".to_string());
        }
        self.l1_geometry.validate("l1_geometry", &mut errors);
        self.l2_geometry.validate("l2_geometry", &mut errors);
        if errors.is_empty() {
            Ok(self)
        } else {
            Err(ConfigErrors(errors))
        }
    }

    /// Parses a config from JSON, applying defaults for omitted fields and
    /// rejecting unknown keys, then validates.
    pub fn from_json_str(s: &str) -> Result<SimConfig, ConfigErrors> {
        let cfg: SimConfig = serde_json::from_str(s).map_err(|e| {
            ConfigErrors(vec![ConfigError {
                field: "<json>".to_string(),
                message: e.to_string(),
            }])
        })?;
        cfg.validate()
    }

    pub fn from_path(path: &Path) -> Result<SimConfig, ConfigErrors> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            ConfigErrors(vec![ConfigError {
                field: "<file>".to_string(),
                message: format!("{}: {}", path.display(), e),
            }])
        })?;
        SimConfig::from_json_str(&text)
    }
}

/// One violated invariant: which field, what was observed/expected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// All invariant violations found in one validation pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigErrors(pub Vec<ConfigError>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}
