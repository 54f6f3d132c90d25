//! Row-major run-length encoding of a binary mask.

use serde::{Deserialize, Serialize};

/// Alternating run lengths starting with an unset run (possibly zero).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRle {
    pub width: usize,
    pub height: usize,
    pub counts: Vec<u32>,
}

impl MaskRle {
    pub fn encode(width: usize, height: usize, bits: &[bool]) -> Self {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &b in bits {
            if b != current {
                counts.push(run);
                current = b;
                run = 0;
            }
            run += 1;
        }
        if run > 0 || counts.is_empty() {
            counts.push(run);
        }
        MaskRle { width, height, counts }
    }

    /// `None` if the runs do not cover exactly `width × height` pixels.
    pub fn decode(&self) -> Option<Vec<bool>> {
        let mut bits = Vec::with_capacity(self.width * self.height);
        for (i, &n) in self.counts.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, n as usize));
        }
        (bits.len() == self.width * self.height).then_some(bits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        for bits in [
            vec![],
            vec![true],
            vec![false, false],
            vec![true, true, false, true],
            vec![false, true, true, false, false],
        ] {
            let rle = MaskRle::encode(bits.len(), 1, &bits);
            assert_eq!(rle.decode().unwrap(), bits);
        }
        assert_eq!(MaskRle::encode(4, 1, &[true, true, false, true]).counts, vec![0, 2, 1, 1]);
    }

    #[test]
    fn wrong_total_is_rejected() {
        let rle = MaskRle {
            width: 2,
            height: 2,
            counts: vec![1, 2],
        };
        assert!(rle.decode().is_none());
    }
}
