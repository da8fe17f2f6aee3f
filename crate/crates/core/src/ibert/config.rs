use serde::{Deserialize, Serialize};

use super::tensor::IbertError;

/// Encoder dimensions and default hardware parallelism.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub m_max: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub layers: usize,
    /// PEs in each attention dot-product and softmax-matmul kernel.
    pub num_pe: usize,
    /// Tiles (output columns in parallel) per linear kernel.
    pub linear_tiles: usize,
    /// PEs per tile (inner-dimension parallelism) per linear kernel.
    pub linear_pes: usize,
}

impl EncoderConfig {
    pub fn ibert_base() -> Self {
        Self {
            m_max: 128,
            hidden: 768,
            heads: 12,
            ffn: 3072,
            layers: 12,
            num_pe: 12,
            linear_tiles: 16,
            linear_pes: 64,
        }
    }

    /// Desk-scale model used by the examples and fast tests.
    pub fn tiny() -> Self {
        Self {
            m_max: 8,
            hidden: 8,
            heads: 2,
            ffn: 16,
            layers: 3,
            num_pe: 2,
            linear_tiles: 2,
            linear_pes: 2,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<(), IbertError> {
        let bad = |m: String| Err(IbertError::Config(m));
        if [self.m_max, self.hidden, self.heads, self.ffn, self.layers].contains(&0) {
            return bad("dimensions must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return bad(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            ));
        }
        if self.num_pe == 0 || self.linear_tiles == 0 || self.linear_pes == 0 {
            return bad("PE and tile counts must be at least 1".into());
        }
        // Worst-case INT8 x INT8 accumulation must stay inside INT32 with
        // room for a bias of the same magnitude.
        let inner = self.hidden.max(self.ffn).max(self.m_max) as u64;
        if 2 * inner * 128 * 128 >= 1 << 31 {
            return bad(format!(
                "inner dimension {inner} can overflow INT32 accumulation"
            ));
        }
        Ok(())
    }

    pub fn check_len(&self, m: usize) -> Result<(), IbertError> {
        if m == 0 || m > self.m_max {
            return Err(IbertError::TooLong { m, max: self.m_max });
        }
        Ok(())
    }
}

/// Smallest multiple of `num_pe` that holds `m`, so every PE owns a whole
/// vector.
pub fn min_padding(m: usize, num_pe: usize) -> usize {
    num_pe * m.div_ceil(num_pe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn presets_are_valid() {
        EncoderConfig::ibert_base().validate().unwrap();
        EncoderConfig::tiny().validate().unwrap();
        assert_eq!(EncoderConfig::ibert_base().head_dim(), 64);
        let mut c = EncoderConfig::tiny();
        c.heads = 3;
        assert!(c.validate().is_err());
        c = EncoderConfig::ibert_base();
        c.ffn = 100_000;
        assert!(c.validate().is_err());
    }

    #[test]
    fn padding_examples() {
        assert_eq!(min_padding(8, 12), 12);
        assert_eq!(min_padding(128, 12), 132);
        assert_eq!(min_padding(12, 12), 12);
        assert_eq!(min_padding(1, 1), 1);
    }

    proptest! {
        #[test]
        fn padding_is_minimal_multiple(m in 1usize..=256, pe in 1usize..=32) {
            let p = min_padding(m, pe);
            prop_assert_eq!(p % pe, 0);
            prop_assert!(p >= m);
            prop_assert!(p - m < pe);
        }
    }
}
