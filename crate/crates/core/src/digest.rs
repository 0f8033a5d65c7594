//! Content digests standing in for tensor payloads.
//!
//! The simulator never materializes tensor data; every produced tensor
//! carries a 64-bit digest computed as a pure function of the producing
//! model, the input digests in port order, and a request-scoped salt.
//! Because the function is pure, the digest of a workflow output is
//! independent of scheduling, placement, parallelism degree and failure
//! recovery — which is exactly what the dataflow-correctness tests assert.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Fold raw bytes into a running FNV-1a state.
pub fn fold_bytes(mut h: u64, bytes: &[u8]) -> u64 {
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Fold a 64-bit word (little-endian) into a running FNV-1a state.
pub fn fold_u64(h: u64, v: u64) -> u64 {
    fold_bytes(h, &v.to_le_bytes())
}

/// Digest of a node execution: model identity, then the salt, then each
/// input digest tagged with its port position. Port order is significant.
pub fn node_digest(model_id: &str, salt: u64, inputs: &[u64]) -> u64 {
    let mut h = fold_bytes(FNV_OFFSET, model_id.as_bytes());
    h = fold_u64(h, salt);
    for (idx, d) in inputs.iter().enumerate() {
        h = fold_u64(h, idx as u64);
        h = fold_u64(h, *d);
    }
    h
}

/// Digest of a workflow input materialized by the frontend.
pub fn input_digest(input_name: &str, salt: u64) -> u64 {
    let h = fold_bytes(FNV_OFFSET, input_name.as_bytes());
    fold_u64(h, salt)
}

/// Digest of a constant binding. Constants are request-independent.
pub fn const_digest(text: &str) -> u64 {
    fold_bytes(FNV_OFFSET, text.as_bytes())
}

/// Digest of one slot of a deferred per-step stream.
pub fn slot_digest(stream_digest: u64, step: u32) -> u64 {
    fold_u64(stream_digest, u64::from(step))
}

/// Derive a child seed from a parent seed and a purpose label, so every
/// random decision in a run flows from one top-level seed.
pub fn split_seed(seed: u64, label: &str) -> u64 {
    fold_bytes(fold_u64(FNV_OFFSET, seed), label.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_inputs_same_digest() {
        let a = node_digest("text-encoder", 7, &[1, 2, 3]);
        let b = node_digest("text-encoder", 7, &[1, 2, 3]);
        assert_eq!(a, b);
    }

    #[test]
    fn port_order_is_significant() {
        let a = node_digest("m", 7, &[1, 2]);
        let b = node_digest("m", 7, &[2, 1]);
        assert_ne!(a, b);
    }

    #[test]
    fn salt_separates_requests() {
        assert_ne!(node_digest("m", 1, &[9]), node_digest("m", 2, &[9]));
    }
}
