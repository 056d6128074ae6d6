//! NMP instruction set: encoding, decoding, latency contracts, and the
//! binary trace format.
//!
//! Every instruction is one 64-bit word: opcode in bits [63:62], DIMM
//! select in bits [61:58], and a 58-bit payload in [57:0]. Payload fields
//! pack from the payload's least significant bit; unused high payload bits
//! must be zero (decode rejects words with reserved bits set).
//!
//! - L (00): load one per-rank sub-vector group. payload[39:0] = DRAM
//!   address, payload[51:40] = vector_size/2.
//! - C (01): Y'[dst] += edge_w * X. payload[1:0] = aggregation op,
//!   payload[17:2] = BF16 edge weight bits, payload[25:18] = dst index.
//! - R (10): stream partial result dst over the channel. payload[7:0] =
//!   dst index, payload[19:8] = vector_size/2.
//! - B (11): broadcast-write marker; channel-scoped, zero payload. Stays
//!   in force until the next non-write instruction arrives on the channel.
//!
//! vector_size is carried as size/2, so odd sizes are structurally
//! unrepresentable; the architectural maximum is 4096 bytes.

use crate::bf16::Bf16;
use crate::nme::NmeConfig;
use crate::timing::TimingParams;
use crate::{Error, Result};
use std::io::{Read, Write};

pub const MAX_VECTOR_SIZE: u32 = 4096;
pub const MAX_DADDR: u64 = (1 << 40) - 1;

/// Reduction carried out by a C-type instruction. The edge weight is
/// always applied; the op code records which aggregator produced it so
/// traces stay self-describing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggOp {
    WeightedSum = 0,
    Sum = 1,
    Mean = 2,
}

impl AggOp {
    fn from_bits(b: u64) -> Result<AggOp> {
        match b {
            0 => Ok(AggOp::WeightedSum),
            1 => Ok(AggOp::Sum),
            2 => Ok(AggOp::Mean),
            _ => Err(Error::Encoding("reserved aggregation op".into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Instruction {
    Load {
        dimm: u8,
        daddr: u64,
        /// Bytes fetched per rank; the NME issues one such fetch to every
        /// rank in parallel.
        vector_size: u16,
    },
    Compute {
        dimm: u8,
        op: AggOp,
        edge_w: Bf16,
        dst: u8,
    },
    ReadOut {
        dimm: u8,
        dst: u8,
        vector_size: u16,
    },
    Broadcast,
}

fn check_size(vector_size: u16) -> Result<u64> {
    if vector_size == 0 || vector_size % 2 != 0 || vector_size as u32 > MAX_VECTOR_SIZE {
        return Err(Error::Encoding(format!(
            "vector_size {vector_size} must be even and in 2..={MAX_VECTOR_SIZE}"
        )));
    }
    Ok(vector_size as u64 / 2)
}

fn check_dimm(dimm: u8) -> Result<u64> {
    if dimm >= 16 {
        return Err(Error::Encoding(format!("dimm {dimm} exceeds 4-bit field")));
    }
    Ok(dimm as u64)
}

pub fn encode(instr: &Instruction) -> Result<u64> {
    let (opcode, dimm, payload) = match *instr {
        Instruction::Load {
            dimm,
            daddr,
            vector_size,
        } => {
            if daddr > MAX_DADDR {
                return Err(Error::Encoding(format!("daddr {daddr:#x} exceeds 40-bit field")));
            }
            let half = check_size(vector_size)?;
            (0u64, check_dimm(dimm)?, daddr | (half << 40))
        }
        Instruction::Compute { dimm, op, edge_w, dst } => {
            let payload = op as u64 | ((edge_w.to_bits() as u64) << 2) | ((dst as u64) << 18);
            (1, check_dimm(dimm)?, payload)
        }
        Instruction::ReadOut {
            dimm,
            dst,
            vector_size,
        } => {
            let half = check_size(vector_size)?;
            (2, check_dimm(dimm)?, dst as u64 | (half << 8))
        }
        Instruction::Broadcast => (3, 0, 0),
    };
    Ok((opcode << 62) | (dimm << 58) | payload)
}

pub fn decode(word: u64) -> Result<Instruction> {
    let opcode = word >> 62;
    let dimm = ((word >> 58) & 0xf) as u8;
    let payload = word & ((1u64 << 58) - 1);
    let reserved = |bits_used: u32| -> Result<()> {
        if payload >> bits_used != 0 {
            return Err(Error::Encoding("reserved payload bits set".into()));
        }
        Ok(())
    };
    let decode_size = |half: u64| -> Result<u16> {
        let size = half * 2;
        if half == 0 || size > MAX_VECTOR_SIZE as u64 {
            return Err(Error::Encoding(format!("vector_size {size} out of range")));
        }
        Ok(size as u16)
    };
    match opcode {
        0 => {
            reserved(52)?;
            Ok(Instruction::Load {
                dimm,
                daddr: payload & MAX_DADDR,
                vector_size: decode_size(payload >> 40)?,
            })
        }
        1 => {
            reserved(26)?;
            Ok(Instruction::Compute {
                dimm,
                op: AggOp::from_bits(payload & 0x3)?,
                edge_w: Bf16::from_bits(((payload >> 2) & 0xffff) as u16),
                dst: ((payload >> 18) & 0xff) as u8,
            })
        }
        2 => {
            reserved(20)?;
            Ok(Instruction::ReadOut {
                dimm,
                dst: (payload & 0xff) as u8,
                vector_size: decode_size(payload >> 8)?,
            })
        }
        3 => {
            if dimm != 0 || payload != 0 {
                return Err(Error::Encoding("broadcast word carries payload".into()));
            }
            Ok(Instruction::Broadcast)
        }
        _ => unreachable!("2-bit opcode"),
    }
}

// ── Latency contracts ───────────────────────────────────────────────────

/// Architectural L-type latency bound in memory cycles for one per-rank
/// sub-vector: CAS latency plus the burst train on a row hit, with the
/// full ACT-to-ACT envelope and row activation prepended on a miss. The
/// command-level engine can beat the miss bound when the bank has been
/// idle; it never exceeds it for an uncontended access.
pub fn l_type_latency(t: &TimingParams, vector_size: u32, row_hit: bool) -> Result<u64> {
    if vector_size == 0 || vector_size % 2 != 0 || vector_size > MAX_VECTOR_SIZE {
        return Err(Error::Domain(format!("vector_size {vector_size} out of range")));
    }
    let bursts = (vector_size as u64).div_ceil(t.burst_bytes as u64);
    let data = bursts * t.t_bl;
    Ok(if row_hit {
        t.t_cl + data
    } else {
        t.t_rc + t.t_rcd + t.t_cl + data
    })
}

/// Fixed execution costs of the non-load instruction types, in memory
/// cycles (ceil-converted from the native clock domains).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedLatencies {
    /// C-type: EU cycles to stream d elements through m PEs of 8 MACs
    /// each, expressed in memory cycles.
    pub c_mem_cycles: u64,
    /// R-type: channel bus occupancy for the result vector.
    pub r_mem_cycles: u64,
}

pub fn fixed_latencies(
    nme: &NmeConfig,
    t: &TimingParams,
    d_elements: u32,
    vector_size: u32,
) -> Result<FixedLatencies> {
    if d_elements == 0 || vector_size == 0 {
        return Err(Error::Domain("zero-sized vector".into()));
    }
    let lanes = nme.lanes() as u64;
    let eu_cycles = (d_elements as u64).div_ceil(lanes);
    // ceil(eu_cycles * mem_hz / eu_hz): exact integer conversion between
    // clock domains, no floating point.
    let c_mem_cycles = (eu_cycles * t.clocks.mem_hz).div_ceil(t.clocks.eu_hz);
    let bursts = (vector_size as u64).div_ceil(t.burst_bytes as u64);
    Ok(FixedLatencies {
        c_mem_cycles,
        r_mem_cycles: bursts * t.t_bl,
    })
}

// ── Trace format ────────────────────────────────────────────────────────

const TRACE_MAGIC: &[u8; 4] = b"GNIT";

/// Binary instruction trace: magic "GNIT", count u64, then count 64-bit
/// little-endian instruction words.
pub fn write_trace<W: Write>(mut w: W, instrs: &[Instruction]) -> Result<()> {
    w.write_all(TRACE_MAGIC)?;
    w.write_all(&(instrs.len() as u64).to_le_bytes())?;
    for i in instrs {
        w.write_all(&encode(i)?.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_trace<R: Read>(mut r: R) -> Result<Vec<Instruction>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TRACE_MAGIC {
        return Err(Error::Input("bad trace magic".into()));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let count = u64::from_le_bytes(b8);
    let mut out = Vec::with_capacity(count as usize);
    for idx in 0..count {
        r.read_exact(&mut b8).map_err(|_| Error::Input(format!("trace truncated at word {idx}")))?;
        let word = u64::from_le_bytes(b8);
        out.push(decode(word).map_err(|e| Error::Encoding(format!("word {idx}: {e}")))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timing::TimingParams;
    use proptest::prelude::*;

    #[test]
    fn encode_decode_each_type() {
        let cases = [
            Instruction::Load {
                dimm: 5,
                daddr: 0x12_3456_789a,
                vector_size: 128,
            },
            Instruction::Compute {
                dimm: 15,
                op: AggOp::Mean,
                edge_w: Bf16::from_f32(0.5),
                dst: 126,
            },
            Instruction::ReadOut {
                dimm: 0,
                dst: 255,
                vector_size: 4096,
            },
            Instruction::Broadcast,
        ];
        for c in cases {
            assert_eq!(decode(encode(&c).unwrap()).unwrap(), c);
        }
    }

    #[test]
    fn encode_rejects_out_of_range() {
        assert!(encode(&Instruction::Load {
            dimm: 0,
            daddr: 1 << 40,
            vector_size: 64
        })
        .is_err());
        assert!(encode(&Instruction::Load {
            dimm: 0,
            daddr: 0,
            vector_size: 63
        })
        .is_err());
        assert!(encode(&Instruction::ReadOut {
            dimm: 0,
            dst: 0,
            vector_size: 4098
        })
        .is_err());
        assert!(encode(&Instruction::Load {
            dimm: 16,
            daddr: 0,
            vector_size: 64
        })
        .is_err());
    }

    #[test]
    fn decode_never_panics_on_garbage() {
        // Any u64 either decodes to a valid instruction or errors cleanly.
        let mut word = 0x9e37_79b9_7f4a_7c15u64;
        for _ in 0..10_000 {
            word = word.wrapping_mul(0xd134_2543_de82_ef95).wrapping_add(1);
            let _ = decode(word);
        }
    }

    #[test]
    fn all_bf16_patterns_round_trip_through_c_type() {
        for bits in 0..=u16::MAX {
            let i = Instruction::Compute {
                dimm: 3,
                op: AggOp::WeightedSum,
                edge_w: Bf16::from_bits(bits),
                dst: 9,
            };
            match decode(encode(&i).unwrap()).unwrap() {
                Instruction::Compute { edge_w, .. } => assert_eq!(edge_w.to_bits(), bits),
                other => panic!("wrong type {other:?}"),
            }
        }
    }

    #[test]
    fn l_type_latency_contract_values() {
        let t = TimingParams::ddr4_2400();
        // 128 B sub-vector, row hit: tCL + 2*tBL = 17 + 8 = 25.
        assert_eq!(l_type_latency(&t, 128, true).unwrap(), 25);
        // Same on a miss: tRC + tRCD + tCL + 2*tBL = 56 + 17 + 17 + 8 = 98.
        assert_eq!(l_type_latency(&t, 128, false).unwrap(), 98);
    }

    #[test]
    fn l_type_latency_monotone_in_size() {
        let t = TimingParams::ddr4_2400();
        for &hit in &[true, false] {
            let mut prev = 0;
            for size in (2..=4096u32).step_by(2) {
                let lat = l_type_latency(&t, size, hit).unwrap();
                assert!(lat >= prev, "size {size}");
                prev = lat;
            }
        }
    }

    #[test]
    fn fixed_latency_contract_values() {
        let t = TimingParams::ddr4_2400();
        let nme = NmeConfig::default();
        // d = 128 elements, 16 PEs: 1 EU cycle -> ceil(1 * 1200/500) = 3.
        let f = fixed_latencies(&nme, &t, 128, 256).unwrap();
        assert_eq!(f.c_mem_cycles, 3);
        // 512 B readout: 8 bursts * tBL = 32 cycles of bus occupancy.
        let f = fixed_latencies(&nme, &t, 256, 512).unwrap();
        assert_eq!(f.r_mem_cycles, 32);
        // d = 256: 2 EU cycles -> ceil(2 * 2.4) = 5.
        assert_eq!(f.c_mem_cycles, 5);
    }

    #[test]
    fn trace_round_trip() {
        let instrs = vec![
            Instruction::Broadcast,
            Instruction::Load {
                dimm: 1,
                daddr: 42,
                vector_size: 64,
            },
            Instruction::Compute {
                dimm: 1,
                op: AggOp::Sum,
                edge_w: Bf16::ONE,
                dst: 0,
            },
            Instruction::ReadOut {
                dimm: 1,
                dst: 0,
                vector_size: 64,
            },
        ];
        let mut buf = Vec::new();
        write_trace(&mut buf, &instrs).unwrap();
        assert_eq!(read_trace(&buf[..]).unwrap(), instrs);
        // Truncation reports the word offset.
        let cut = &buf[..buf.len() - 3];
        assert!(read_trace(cut).is_err());
    }

    fn arb_instruction() -> impl Strategy<Value = Instruction> {
        prop_oneof![
            (0u8..16, 0u64..=MAX_DADDR, 1u16..=2048).prop_map(|(dimm, daddr, half)| {
                Instruction::Load {
                    dimm,
                    daddr,
                    vector_size: half * 2,
                }
            }),
            (0u8..16, 0u64..3, any::<u16>(), any::<u8>()).prop_map(|(dimm, op, w, dst)| {
                Instruction::Compute {
                    dimm,
                    op: AggOp::from_bits(op).unwrap(),
                    edge_w: Bf16::from_bits(w),
                    dst,
                }
            }),
            (0u8..16, any::<u8>(), 1u16..=2048).prop_map(|(dimm, dst, half)| {
                Instruction::ReadOut {
                    dimm,
                    dst,
                    vector_size: half * 2,
                }
            }),
            Just(Instruction::Broadcast),
        ]
    }

    proptest! {
        #[test]
        fn proptest_round_trip(instr in arb_instruction()) {
            prop_assert_eq!(decode(encode(&instr).unwrap()).unwrap(), instr);
        }
    }
}
