//! Offline latency profiles driving the simulation clock.
//!
//! Every model has a load time, an inference-time table over (batch size,
//! parallelism degree), patch costs, and a memory footprint. For diffusion
//! models the table entry is the per-denoising-step time; for everything
//! else it is the flat per-invocation time. Cross-executor transfers are
//! costed as `overhead + bytes / bandwidth`; transfers within an executor
//! are zero-copy and free.
//!
//! Trivial node kinds (latent initialization, the per-step latent update)
//! get synthesized near-zero profiles; real models must appear in the
//! profile document.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dsl::ModelKind;
use crate::error::ProfileError;
use crate::time::{ms_to_us, Micros};

/// Speedup at parallelism k may not exceed 1/efficiency_floor = 2x.
const EFFICIENCY_FLOOR: f64 = 0.5;

/// Per-model cost table. Times are stored in microseconds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelProfile {
    pub model_id: String,
    pub load_us: Micros,
    /// infer[b-1][k-1]; per-step time for diffusion-kind models.
    pub infer_us: Vec<Vec<Micros>>,
    pub b_max: usize,
    pub k_max: usize,
    pub patch_us: Micros,
    pub patch_fetch_us: Micros,
    pub mem_bytes: u64,
}

impl ModelProfile {
    fn validate(&self) -> Result<(), ProfileError> {
        let invalid = |reason: &str| ProfileError::Invalid {
            model: self.model_id.clone(),
            reason: reason.to_string(),
        };
        let mono = |reason: String| ProfileError::MonotonicityViolation {
            model: self.model_id.clone(),
            reason,
        };
        if self.load_us == 0 {
            return Err(invalid("load_ms must be positive"));
        }
        if self.infer_us.len() != self.b_max || self.b_max == 0 {
            return Err(invalid("infer table must have b_max rows"));
        }
        for (b, row) in self.infer_us.iter().enumerate() {
            if row.len() != self.k_max || self.k_max == 0 {
                return Err(invalid("infer table rows must have k_max columns"));
            }
            for (k, &t) in row.iter().enumerate() {
                if t == 0 {
                    return Err(invalid("infer times must be positive"));
                }
                if k > 0 && t > row[k - 1] {
                    return Err(mono(format!(
                        "infer_ms(b={}, k={}) > infer_ms(b={}, k={})",
                        b + 1,
                        k + 1,
                        b + 1,
                        k
                    )));
                }
                // speedup ceiling: parallelism can at most halve the time
                if (t as f64) < self.infer_us[b][0] as f64 * EFFICIENCY_FLOOR {
                    return Err(mono(format!(
                        "infer_ms(b={}, k={}) breaks the parallel efficiency floor",
                        b + 1,
                        k + 1
                    )));
                }
                if b > 0 && t < self.infer_us[b - 1][k] {
                    return Err(mono(format!(
                        "infer_ms(b={}, k={}) < infer_ms(b={}, k={})",
                        b + 1,
                        k + 1,
                        b,
                        k + 1
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Cross-executor transfer cost model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferProfile {
    pub bandwidth_bytes_per_ms: u64,
    pub overhead_us: Micros,
}

impl TransferProfile {
    /// Fetch latency. Zero within an executor (zero-copy store).
    pub fn fetch_us(&self, bytes: u64, same_executor: bool) -> Micros {
        if same_executor {
            return 0;
        }
        let transit = (u128::from(bytes) * 1_000).div_ceil(u128::from(self.bandwidth_bytes_per_ms));
        self.overhead_us + transit as Micros
    }
}

/// Immutable registry of model profiles plus the transfer model.
#[derive(Debug, Clone)]
pub struct ProfileRegistry {
    models: BTreeMap<String, ModelProfile>,
    pub transfer: TransferProfile,
}

// ---- JSON document schema (times in milliseconds) ----

#[derive(Debug, Serialize, Deserialize)]
struct ProfileDoc {
    models: Vec<ModelEntry>,
    transfer: TransferEntry,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelEntry {
    model_id: String,
    #[serde(default)]
    source: Option<String>,
    load_ms: f64,
    /// Rows are batch sizes 1..=b_max, columns parallelism 1..=k_max.
    infer_ms: Vec<Vec<f64>>,
    #[serde(default)]
    patch_ms: f64,
    #[serde(default)]
    patch_fetch_ms: f64,
    mem_mib: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TransferEntry {
    #[serde(default)]
    source: Option<String>,
    bandwidth_bytes_per_ms: u64,
    per_transfer_overhead_ms: f64,
}

const MIB: u64 = 1024 * 1024;

impl ProfileRegistry {
    /// Parse and validate a profile document.
    pub fn load(doc: &str) -> Result<Self, ProfileError> {
        let doc: ProfileDoc =
            serde_json::from_str(doc).map_err(|e| ProfileError::Json(e.to_string()))?;
        if doc.transfer.bandwidth_bytes_per_ms == 0 {
            return Err(ProfileError::Json("transfer bandwidth must be positive".into()));
        }
        let transfer = TransferProfile {
            bandwidth_bytes_per_ms: doc.transfer.bandwidth_bytes_per_ms,
            overhead_us: ms_to_us(doc.transfer.per_transfer_overhead_ms),
        };
        let mut models = BTreeMap::new();
        for m in doc.models {
            let b_max = m.infer_ms.len();
            let k_max = m.infer_ms.first().map(Vec::len).unwrap_or(0);
            let profile = ModelProfile {
                model_id: m.model_id.clone(),
                load_us: ms_to_us(m.load_ms),
                infer_us: m
                    .infer_ms
                    .iter()
                    .map(|row| row.iter().map(|&ms| ms_to_us(ms)).collect())
                    .collect(),
                b_max,
                k_max,
                patch_us: ms_to_us(m.patch_ms),
                patch_fetch_us: ms_to_us(m.patch_fetch_ms),
                mem_bytes: m.mem_mib * MIB,
            };
            profile.validate()?;
            if models.insert(m.model_id.clone(), profile).is_some() {
                return Err(ProfileError::Invalid {
                    model: m.model_id,
                    reason: "duplicate profile entry".into(),
                });
            }
        }
        Ok(ProfileRegistry { models, transfer })
    }

    /// Built-in near-zero profile for trivial node kinds.
    pub fn synthesize_trivial(&mut self, model_id: &str, kind: ModelKind, mem_bytes: u64) {
        if self.models.contains_key(model_id) {
            return;
        }
        if !matches!(kind, ModelKind::LatentInit | ModelKind::Aux | ModelKind::CacheLookup) {
            return;
        }
        self.models.insert(
            model_id.to_string(),
            ModelProfile {
                model_id: model_id.to_string(),
                load_us: 1_000,
                infer_us: vec![vec![1_000]; 8],
                b_max: 8,
                k_max: 1,
                patch_us: 0,
                patch_fetch_us: 0,
                mem_bytes,
            },
        );
    }

    pub fn get(&self, model_id: &str) -> Result<&ModelProfile, ProfileError> {
        self.models
            .get(model_id)
            .ok_or_else(|| ProfileError::MissingProfile(model_id.to_string()))
    }

    pub fn contains(&self, model_id: &str) -> bool {
        self.models.contains_key(model_id)
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn b_max(&self, model_id: &str) -> usize {
        self.models.get(model_id).map(|m| m.b_max).unwrap_or(1)
    }

    pub fn k_max(&self, model_id: &str) -> usize {
        self.models.get(model_id).map(|m| m.k_max).unwrap_or(1)
    }

    /// Inference time for a batch at parallelism k. `steps = 0` means a
    /// non-iterative node: the flat table cost.
    pub fn infer_us(
        &self,
        model_id: &str,
        batch: usize,
        k: usize,
        steps: u32,
    ) -> Result<Micros, ProfileError> {
        let p = self.get(model_id)?;
        if batch == 0 || batch > p.b_max {
            return Err(ProfileError::BatchExceedsMax {
                model: model_id.to_string(),
                batch,
                b_max: p.b_max,
            });
        }
        if k == 0 || k > p.k_max {
            return Err(ProfileError::ParallelismExceedsMax {
                model: model_id.to_string(),
                k,
                k_max: p.k_max,
            });
        }
        let per = p.infer_us[batch - 1][k - 1];
        Ok(if steps == 0 { per } else { per * Micros::from(steps) })
    }

    /// Like [`Self::infer_us`] but clamping batch and k to the table; used
    /// for estimates, never for actual execution.
    pub fn infer_us_clamped(&self, model_id: &str, batch: usize, k: usize, steps: u32) -> Micros {
        let p = match self.get(model_id) {
            Ok(p) => p,
            Err(_) => return 0,
        };
        let b = batch.clamp(1, p.b_max);
        let k = k.clamp(1, p.k_max);
        let per = p.infer_us[b - 1][k - 1];
        if steps == 0 {
            per
        } else {
            per * Micros::from(steps)
        }
    }

    pub fn fetch_us(&self, bytes: u64, same_executor: bool) -> Micros {
        self.transfer.fetch_us(bytes, same_executor)
    }

    pub fn model_ids(&self) -> impl Iterator<Item = &str> {
        self.models.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(infer: &str) -> String {
        format!(
            r#"{{
  "models": [
    {{"model_id": "m", "load_ms": 430.0, "infer_ms": {infer}, "mem_mib": 3994}}
  ],
  "transfer": {{"bandwidth_bytes_per_ms": 210000000, "per_transfer_overhead_ms": 0.2}}
}}"#
        )
    }

    #[test]
    fn loads_and_queries() {
        let reg = ProfileRegistry::load(&doc("[[60.0, 31.6],[87.0, 45.8]]")).unwrap();
        assert_eq!(reg.infer_us("m", 1, 1, 28).unwrap(), 28 * 60_000);
        assert_eq!(reg.infer_us("m", 2, 2, 0).unwrap(), 45_800);
        assert!(matches!(
            reg.infer_us("m", 3, 1, 1),
            Err(ProfileError::BatchExceedsMax { .. })
        ));
        assert!(matches!(
            reg.infer_us("m", 1, 3, 1),
            Err(ProfileError::ParallelismExceedsMax { .. })
        ));
    }

    #[test]
    fn rejects_parallelism_slowdown() {
        // infer(1,2) > infer(1,1) is a monotonicity violation
        let err = ProfileRegistry::load(&doc("[[60.0, 61.0]]")).unwrap_err();
        assert!(matches!(err, ProfileError::MonotonicityViolation { .. }));
    }

    #[test]
    fn rejects_batch_shrink() {
        let err = ProfileRegistry::load(&doc("[[60.0],[59.0]]")).unwrap_err();
        assert!(matches!(err, ProfileError::MonotonicityViolation { .. }));
    }

    #[test]
    fn rejects_super_2x_speedup() {
        // 60 / 25 = 2.4x at k=2 exceeds the 2x ceiling
        let err = ProfileRegistry::load(&doc("[[60.0, 25.0]]")).unwrap_err();
        assert!(matches!(err, ProfileError::MonotonicityViolation { .. }));
    }

    #[test]
    fn fetch_cost_is_overhead_plus_bytes_over_bandwidth() {
        let reg = ProfileRegistry::load(&doc("[[60.0]]")).unwrap();
        // 64 MiB cross-executor at the bundled 210 GB/s-class bandwidth
        let t = reg.fetch_us(64 * 1024 * 1024, false);
        assert_eq!(t, 520); // 0.52 ms, sub-millisecond
        assert_eq!(reg.fetch_us(0, false), 200); // overhead only
        assert_eq!(reg.fetch_us(u64::MAX, true), 0); // zero-copy locally
    }

    #[test]
    fn missing_model_is_reported() {
        let reg = ProfileRegistry::load(&doc("[[60.0]]")).unwrap();
        assert_eq!(
            reg.get("absent").unwrap_err(),
            ProfileError::MissingProfile("absent".into())
        );
    }
}
