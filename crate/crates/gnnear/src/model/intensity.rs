//! Roofline arithmetic intensity of the three operation kinds.
//!
//! Intensity is ops per byte moved assuming every operand and result
//! crosses the memory interface exactly once at `element_bytes` width.

/// Operation kind for intensity queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    /// Vector-matrix product, d_in inputs to d_out outputs.
    VecMatUpdate,
    /// Outer product of a d_in vector and a d_out vector.
    OuterUpdate,
    /// Weighted sum of `fanin` source vectors of width d_in into one
    /// destination vector of width d_out.
    Reduce,
}

/// Ops per byte for one operation.
///
/// VecMat moves d_in + d_out elements for 2*d_in*d_out ops (MAC = 2).
/// Outer moves d_in + d_out elements for d_in*d_out ops (one MAC per
/// output element, counted once since the result is accumulated in
/// place). Reduce moves fanin*d_in + d_out elements for 2*fanin*d_in
/// ops, approaching 2/element_bytes as fanin grows.
pub fn arithmetic_intensity(
    kind: OpKind,
    d_in: u32,
    d_out: u32,
    fanin: u64,
    element_bytes: u32,
) -> f64 {
    assert!(d_in >= 1 && d_out >= 1, "dims must be >= 1");
    assert!(
        element_bytes == 2 || element_bytes == 4,
        "element width must be 2 or 4 bytes"
    );
    let di = d_in as f64;
    let do_ = d_out as f64;
    let eb = element_bytes as f64;
    match kind {
        OpKind::VecMatUpdate => 2.0 * di * do_ / (eb * (di + do_)),
        OpKind::OuterUpdate => di * do_ / (eb * (di + do_)),
        OpKind::Reduce => {
            assert!(fanin >= 1, "reduce fanin must be >= 1");
            let f = fanin as f64;
            2.0 * f * di / (eb * (f * di + do_))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn update_forms_scale_linearly_in_d() {
        for d in [64u32, 128, 256, 602] {
            let vm = arithmetic_intensity(OpKind::VecMatUpdate, d, d, 1, 4);
            let op = arithmetic_intensity(OpKind::OuterUpdate, d, d, 1, 4);
            assert_eq!(vm, 0.25 * d as f64);
            assert_eq!(op, 0.125 * d as f64);
        }
        assert_eq!(
            arithmetic_intensity(OpKind::VecMatUpdate, 256, 256, 1, 4),
            64.0
        );
        assert_eq!(
            arithmetic_intensity(OpKind::OuterUpdate, 256, 256, 1, 4),
            32.0
        );
    }

    #[test]
    fn reduce_approaches_half_op_per_byte() {
        let v = arithmetic_intensity(OpKind::Reduce, 256, 256, 10_000, 4);
        assert!((v - 0.5).abs() / 0.5 < 0.01, "got {v}");
        let small = arithmetic_intensity(OpKind::Reduce, 8, 8, 1, 4);
        assert_eq!(small, 2.0 * 8.0 / (4.0 * 16.0));
    }

    #[test]
    fn halving_element_width_doubles_intensity() {
        let f32i = arithmetic_intensity(OpKind::VecMatUpdate, 128, 64, 1, 4);
        let bf16i = arithmetic_intensity(OpKind::VecMatUpdate, 128, 64, 1, 2);
        assert_eq!(bf16i, 2.0 * f32i);
    }
}
