//! BF16 scalar support. The accelerator's native element format is BF16
//! with FP32 accumulation; stores round to nearest-even. Raw bit access is
//! kept separate from float conversion so NaN payloads survive instruction
//! encode/decode round trips.

/// A BF16 value held as raw bits. Conversion from f32 rounds to
/// nearest-even; conversion to f32 is exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Bf16(pub u16);

impl Bf16 {
    pub const ZERO: Bf16 = Bf16(0);
    pub const ONE: Bf16 = Bf16(0x3f80);

    /// Round-to-nearest-even truncation of an f32. NaNs are quieted but
    /// keep their sign and high payload bits.
    pub fn from_f32(x: f32) -> Bf16 {
        let bits = x.to_bits();
        if x.is_nan() {
            return Bf16(((bits >> 16) as u16) | 0x0040);
        }
        let lsb = (bits >> 16) & 1;
        Bf16((bits.wrapping_add(0x7fff + lsb) >> 16) as u16)
    }

    pub fn to_f32(self) -> f32 {
        f32::from_bits((self.0 as u32) << 16)
    }

    pub fn from_bits(bits: u16) -> Bf16 {
        Bf16(bits)
    }

    pub fn to_bits(self) -> u16 {
        self.0
    }
}

/// f32 -> BF16 -> f32 in one step; the store-side rounding used all over
/// the functional model when the element format is BF16.
pub fn round_store(x: f32) -> f32 {
    Bf16::from_f32(x).to_f32()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_values_round_trip() {
        for &x in &[0.0f32, 1.0, -1.0, 0.5, -0.5, 2.0, 256.0, 1.0 / 256.0] {
            assert_eq!(Bf16::from_f32(x).to_f32(), x);
        }
    }

    #[test]
    fn rounds_to_nearest_even() {
        // 1.0 + 2^-9 sits exactly halfway between bf16(1.0) and the next
        // value up; nearest-even keeps the even mantissa (1.0).
        let halfway = f32::from_bits(0x3f80_8000);
        assert_eq!(Bf16::from_f32(halfway).to_f32(), 1.0);
        // One ulp above halfway rounds up.
        let above = f32::from_bits(0x3f80_8001);
        assert_eq!(Bf16::from_f32(above).to_f32(), f32::from_bits(0x3f81_0000));
        // 1.0 + 3*2^-9: halfway between bf16 codes 0x3f81 and 0x3f82,
        // nearest-even picks the even code 0x3f82.
        let halfway_odd = f32::from_bits(0x3f81_8000);
        assert_eq!(Bf16::from_f32(halfway_odd).0, 0x3f82);
    }

    #[test]
    fn infinities_and_nan() {
        assert_eq!(Bf16::from_f32(f32::INFINITY).to_f32(), f32::INFINITY);
        assert_eq!(Bf16::from_f32(f32::NEG_INFINITY).to_f32(), f32::NEG_INFINITY);
        assert!(Bf16::from_f32(f32::NAN).to_f32().is_nan());
    }

    #[test]
    fn all_bit_patterns_survive_bit_round_trip() {
        for bits in 0..=u16::MAX {
            assert_eq!(Bf16::from_bits(bits).to_bits(), bits);
        }
    }

    #[test]
    fn finite_relative_error_bounded() {
        // Mantissa is 8 bits, so relative rounding error is at most 2^-8
        // for normal values.
        let mut x = 1.0e-3f32;
        while x < 1.0e3 {
            let r = round_store(x);
            assert!((r - x).abs() / x <= 1.0 / 256.0, "x={x} r={r}");
            x *= 1.37;
        }
    }
}
