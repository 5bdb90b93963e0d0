/// SplitMix64 finalizer. Used as a stateless hash for counter-based streams.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform value in `[0, 1)` from the top 53 bits of a hash.
pub fn unit_f64(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Counter-based random stream for dropout masks.
///
/// Mask bit `e` of the `c`-th dropout call is a pure function of
/// `(key, c, e)`, so masks do not depend on how work is scheduled.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DropoutStream {
    key: u64,
    counter: u64,
}

impl DropoutStream {
    pub fn new(key: u64) -> Self {
        Self { key, counter: 0 }
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Fills `keep` with a Bernoulli(1-p) mask and advances the call counter.
    pub(crate) fn mask(&mut self, p: f64, keep: &mut [bool]) {
        let call = mix64(self.key ^ mix64(self.counter));
        self.counter += 1;
        for (e, k) in keep.iter_mut().enumerate() {
            *k = unit_f64(mix64(call ^ (e as u64).wrapping_mul(0xD1B5_4A32_D192_ED03))) >= p;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_depend_only_on_key_and_counter() {
        let mut a = DropoutStream::new(7);
        let mut b = DropoutStream::new(7);
        let mut ma = vec![false; 64];
        let mut mb = vec![false; 64];
        a.mask(0.5, &mut ma);
        b.mask(0.5, &mut mb);
        assert_eq!(ma, mb);
        a.mask(0.5, &mut ma);
        assert_ne!(ma, mb);
    }

    #[test]
    fn keep_rate_is_close_to_one_minus_p() {
        let mut s = DropoutStream::new(3);
        let mut m = vec![false; 20_000];
        s.mask(0.1, &mut m);
        let kept = m.iter().filter(|&&k| k).count() as f64 / m.len() as f64;
        assert!((kept - 0.9).abs() < 0.01, "{kept}");
    }
}
