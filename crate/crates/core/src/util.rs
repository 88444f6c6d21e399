//! Small shared helpers.

/// FNV-1a 64-bit hash. Used for the hash tokenizer, split assignment and
/// corpus fingerprints; stable across runs and platforms.
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Uppercase, collapse interior whitespace runs to single spaces, strip
/// leading/trailing whitespace. Idempotent.
pub(crate) fn normalize_text(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_uppercase()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_known_vectors() {
        // Reference values for the 64-bit FNV-1a parameters.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn normalize_collapses_and_uppercases() {
        assert_eq!(normalize_text("  Siemens   Healthineers\t"), "SIEMENS HEALTHINEERS");
        assert_eq!(normalize_text("se"), "SE");
        assert_eq!(normalize_text(""), "");
    }

    #[test]
    fn normalize_idempotent() {
        for s in ["  a  B c ", "x", "", " \t\n", "MiXeD  CaSe"] {
            let once = normalize_text(s);
            assert_eq!(normalize_text(&once), once);
        }
    }
}
