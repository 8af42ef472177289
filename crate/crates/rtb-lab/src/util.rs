/// FNV-1a 64-bit hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn fnv1a64_hex(bytes: &[u8]) -> String {
    format!("{:016x}", fnv1a64(bytes))
}

/// Hash of a float slice via the IEEE-754 bit patterns; used for parameter
/// frozenness checks.
pub fn checksum_f64s(values: &[f64]) -> u64 {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    fnv1a64(&bytes)
}

/// Per-worker seed derivation for deterministic fan-out.
pub fn derive_seed(seed: u64, worker: u64) -> u64 {
    seed ^ worker
}

/// Number of eval workers, from RTB_LAB_THREADS (default 1).
pub fn eval_threads() -> usize {
    std::env::var("RTB_LAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Mean and standard error of a sample.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_known_vector() {
        // FNV-1a("") = offset basis; FNV-1a("a") = 0xaf63dc4c8601ec8c
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn duplicated_sample_halves_se() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0];
        let (ma, sa) = mean_stderr(&a);
        let (mb, sb) = mean_stderr(&b);
        assert!((ma - mb).abs() < 1e-15);
        let ratio = sb / sa;
        assert!((ratio - 1.0 / 2.0f64.sqrt()).abs() < 1e-12, "ratio {ratio}");
    }
}
