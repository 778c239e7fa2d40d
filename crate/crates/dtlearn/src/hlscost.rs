//! Analytical cost model for pipelined loop execution: initiation-interval
//! feasibility under loop-carried RAW/WAR dependencies, memory-port resource
//! bounds under array partitioning, and latency/throughput estimates. This is
//! a formula model of the II-probing procedure, not a modulo scheduler.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DepKind {
    Raw,
    War,
}

/// One loop-carried dependency: the consuming stage needs the value
/// `latency` cycles after the producing iteration starts, `distance`
/// iterations later.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dep {
    pub kind: DepKind,
    pub latency: u64,
    pub distance: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayAccess {
    pub array_id: String,
    pub reads_per_iter: u64,
    pub writes_per_iter: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopSpec {
    pub trip_count: u64,
    /// Pipeline depth: latency of one iteration in cycles.
    pub depth: u64,
    #[serde(default)]
    pub deps: Vec<Dep>,
    #[serde(default)]
    pub array_accesses: Vec<ArrayAccess>,
}

impl LoopSpec {
    pub fn validate(&self) -> Result<()> {
        if self.trip_count < 1 || self.depth < 1 {
            return Err(Error::InvalidArgument(
                "trip_count and depth must be >= 1".into(),
            ));
        }
        for d in &self.deps {
            if d.latency < 1 || d.distance < 1 {
                return Err(Error::InvalidArgument(
                    "dependency latency and distance must be >= 1".into(),
                ));
            }
        }
        Ok(())
    }

    /// Recurrence-only II bound: max over ceil(latency / distance).
    pub fn recurrence_bound(&self) -> u64 {
        self.deps
            .iter()
            .map(|d| d.latency.div_ceil(d.distance))
            .max()
            .unwrap_or(1)
            .max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partitioning {
    /// Every element in its own storage resource: no port conflicts.
    Complete,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayPartition {
    pub partitioned: Partitioning,
    pub ports_per_bank: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    #[serde(default)]
    pub arrays: std::collections::BTreeMap<String, ArrayPartition>,
    /// Ports assumed for arrays not listed above (BRAM is dual-ported).
    #[serde(default = "default_ports")]
    pub default_ports_per_bank: u64,
}

fn default_ports() -> u64 {
    2
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec {
            arrays: std::collections::BTreeMap::new(),
            default_ports_per_bank: default_ports(),
        }
    }
}

impl PartitionSpec {
    pub fn complete_for(names: &[&str]) -> Self {
        let mut arrays = std::collections::BTreeMap::new();
        for n in names {
            arrays.insert(
                n.to_string(),
                ArrayPartition {
                    partitioned: Partitioning::Complete,
                    ports_per_bank: 1,
                },
            );
        }
        PartitionSpec {
            arrays,
            default_ports_per_bank: default_ports(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.default_ports_per_bank < 1
            || self.arrays.values().any(|a| a.ports_per_bank < 1)
        {
            return Err(Error::InvalidArgument("ports_per_bank must be >= 1".into()));
        }
        Ok(())
    }

    fn resource_bound(&self, access: &ArrayAccess) -> u64 {
        let (partitioned, ports) = match self.arrays.get(&access.array_id) {
            Some(a) => (a.partitioned, a.ports_per_bank),
            None => (Partitioning::None, self.default_ports_per_bank),
        };
        match partitioned {
            Partitioning::Complete => 1, // independent storage per element
            Partitioning::None => {
                let accesses = access.reads_per_iter + access.writes_per_iter;
                accesses.div_ceil(ports).max(1)
            }
        }
    }
}

/// Smallest feasible initiation interval: the max of the per-dependency
/// recurrence bounds, the per-array memory-port bounds, and 1.
pub fn min_feasible_ii(loop_spec: &LoopSpec, partition: &PartitionSpec) -> Result<u64> {
    loop_spec.validate()?;
    partition.validate()?;
    let resource = loop_spec
        .array_accesses
        .iter()
        .map(|a| partition.resource_bound(a))
        .max()
        .unwrap_or(1);
    Ok(loop_spec.recurrence_bound().max(resource))
}

/// Pipelined loop latency: depth + (trip_count - 1) * ii.
pub fn loop_latency(loop_spec: &LoopSpec, ii: u64) -> Result<u64> {
    loop_spec.validate()?;
    if ii < loop_spec.recurrence_bound() {
        return Err(Error::InvalidArgument(format!(
            "ii {ii} is below the recurrence bound {}",
            loop_spec.recurrence_bound()
        )));
    }
    Ok(loop_spec.depth + (loop_spec.trip_count - 1) * ii)
}

/// Dependencies violated at a candidate II: latency > ii * distance.
pub fn hazard_check(loop_spec: &LoopSpec, ii: u64) -> Result<Vec<Dep>> {
    loop_spec.validate()?;
    Ok(loop_spec
        .deps
        .iter()
        .filter(|d| d.latency > ii * d.distance)
        .cloned()
        .collect())
}

/// Steady-state throughput in iterations per second.
pub fn throughput_estimate(loop_spec: &LoopSpec, ii: u64, clock_mhz: f64) -> Result<f64> {
    loop_spec.validate()?;
    if !(clock_mhz > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "clock must be > 0 MHz, got {clock_mhz}"
        )));
    }
    if ii < 1 {
        return Err(Error::InvalidArgument("ii must be >= 1".into()));
    }
    Ok(clock_mhz * 1e6 / ii as f64)
}

/// One row of the II-probing feasibility table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeRow {
    pub ii: u64,
    pub feasible: bool,
    pub violations: Vec<Dep>,
    pub latency_cycles: Option<u64>,
    pub throughput_iters_per_s: Option<f64>,
}

/// Probe II = 1, 2, 3, ... up to the feasible minimum (at least through 3),
/// mirroring trial-II pipelining.
pub fn probe_table(
    loop_spec: &LoopSpec,
    partition: &PartitionSpec,
    clock_mhz: f64,
) -> Result<Vec<ProbeRow>> {
    let min_ii = min_feasible_ii(loop_spec, partition)?;
    let upper = min_ii.max(3);
    let mut rows = Vec::new();
    for ii in 1..=upper {
        let violations = hazard_check(loop_spec, ii)?;
        let feasible = ii >= min_ii;
        rows.push(ProbeRow {
            ii,
            feasible,
            violations,
            latency_cycles: feasible.then(|| loop_latency(loop_spec, ii).unwrap()),
            throughput_iters_per_s: feasible
                .then(|| throughput_estimate(loop_spec, ii, clock_mhz).unwrap()),
        });
    }
    Ok(rows)
}
