//! The four L1 organizations and the cluster topology helpers that bind
//! cores, caches, crossbars, and L2 into per-architecture request pipelines.
//!
//! Each architecture charges a request the following cycle costs, applied by
//! the engine:
//!
//! * `Private` — local tag check (`t_tag`); hit: bank-scheduled `t_data`;
//!   miss: MSHR, global crossbar, L2, crossbar return, local fill. No
//!   inter-cache traffic ever occurs.
//! * `RemoteSharing` — local tag check; on miss, probe messages broadcast to
//!   every other cache in the cluster over the intra-cluster crossbar. Each
//!   probe takes a tag-port cycle plus the tag latency at the remote and
//!   sends a response back. Data transfers from the lowest-numbered hitting
//!   cache; the request may depart for L2 only once every response has been
//!   collected.
//! * `DecoupledSharing` — every access crosses the intra-cluster crossbar to
//!   the home cache (`line_address mod cores_per_cluster`), is tag-checked
//!   and bank-scheduled there, and misses go to L2 from the home. A line is
//!   never resident in more than one cache of a cluster.
//! * `AtaCache` — one conflict-free aggregated tag comparison (`t_tag`)
//!   yields a presence vector over all cluster caches; the distributor then
//!   routes to the local data array, a remote data array (crossbar hop each
//!   way, with a re-verify at access time), or straight to L2 with no probe
//!   wait. Stores are always processed in the local cache.

use serde::{Deserialize, Serialize};

/// L1 cache organization under simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "private")]
    Private,
    #[serde(rename = "remote")]
    RemoteSharing,
    #[serde(rename = "decoupled")]
    DecoupledSharing,
    #[serde(rename = "ata")]
    AtaCache,
}

impl Architecture {
    /// All architectures, in canonical comparison order (baseline first).
    pub const ALL: [Architecture; 4] = [
        Architecture::Private,
        Architecture::RemoteSharing,
        Architecture::DecoupledSharing,
        Architecture::AtaCache,
    ];

    /// The flag/report name of this architecture.
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Private => "private",
            Architecture::RemoteSharing => "remote",
            Architecture::DecoupledSharing => "decoupled",
            Architecture::AtaCache => "ata",
        }
    }

    pub fn parse(s: &str) -> Result<Architecture, String> {
        match s {
            "private" => Ok(Architecture::Private),
            "remote" => Ok(Architecture::RemoteSharing),
            "decoupled" => Ok(Architecture::DecoupledSharing),
            "ata" => Ok(Architecture::AtaCache),
            other => Err(format!(
                "unknown architecture `{other}` (expected private|remote|decoupled|ata)"
            )),
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Architecture::parse(s)
    }
}

/// Static cluster layout: which cores and caches belong together.
///
/// Cache `i` is the local cache of core `i`; cluster membership is by
/// contiguous ranges of `cores_per_cluster` ids.
#[derive(Debug, Clone, Copy)]
pub struct Topology {
    pub num_cores: u32,
    pub cores_per_cluster: u32,
}

impl Topology {
    pub fn new(num_cores: u32, cores_per_cluster: u32) -> Topology {
        Topology {
            num_cores,
            cores_per_cluster,
        }
    }

    pub fn num_clusters(&self) -> u32 {
        self.num_cores / self.cores_per_cluster
    }

    pub fn cluster_of(&self, core_id: u32) -> u32 {
        core_id / self.cores_per_cluster
    }

    /// Index of a core's cache within its own cluster.
    pub fn local_index(&self, core_id: u32) -> u32 {
        core_id % self.cores_per_cluster
    }

    /// Global cache ids of one cluster, in cluster-local order.
    pub fn cluster_caches(&self, cluster: u32) -> std::ops::Range<u32> {
        let base = cluster * self.cores_per_cluster;
        base..base + self.cores_per_cluster
    }

    /// Global cache id for a cluster-local index.
    pub fn global_cache_id(&self, cluster: u32, local_index: u32) -> u32 {
        cluster * self.cores_per_cluster + local_index
    }

    /// Home cache (cluster-local index) of a line address under the
    /// decoupled-sharing slice mapping.
    pub fn home_cache(&self, line_address: u64) -> u32 {
        (line_address % self.cores_per_cluster as u64) as u32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cluster_layout_defaults() {
        let t = Topology::new(30, 10);
        assert_eq!(t.num_clusters(), 3);
        assert_eq!(t.cluster_of(0), 0);
        assert_eq!(t.cluster_of(9), 0);
        assert_eq!(t.cluster_of(10), 1);
        assert_eq!(t.cluster_of(29), 2);
        assert_eq!(t.local_index(13), 3);
        assert_eq!(t.cluster_caches(1), 10..20);
        assert_eq!(t.global_cache_id(2, 4), 24);
    }

    #[test]
    fn home_cache_is_modulo_over_cluster() {
        let t = Topology::new(30, 10);
        assert_eq!(t.home_cache(0), 0);
        assert_eq!(t.home_cache(33), 3);
        assert_eq!(t.home_cache(10), 0);
        // every line maps to exactly one cache per cluster
        for line in 0..100u64 {
            assert!(t.home_cache(line) < 10);
        }
    }

    #[test]
    fn architecture_names_round_trip() {
        for a in Architecture::ALL {
            assert_eq!(Architecture::parse(a.name()).unwrap(), a);
        }
        assert!(Architecture::parse("mesh").is_err());
    }
}
