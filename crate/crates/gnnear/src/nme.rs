//! Near-memory engine: the per-DIMM reduce unit. Sixteen PEs of eight
//! FP32 MAC lanes stream weighted sums at 500 MHz, fed by an SRAM
//! operand buffer and drained through a small result FIFO toward the
//! channel. This module owns the engine-local state: buffer occupancy,
//! EU pipeline availability in ticks, accumulator contents, and the
//! outbound FIFO. DRAM requests and channel-bus arbitration live with
//! the orchestrator; the engine only learns when an operand arrived.

use crate::{Error, Result};
use std::collections::HashMap;
use std::collections::VecDeque;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NmeConfig {
    pub num_pes: u32,
    pub macs_per_pe: u32,
    /// Operand and accumulator SRAM, bytes.
    pub buffer_bytes: u64,
    /// Hard cap on resident vectors (operands plus accumulators).
    pub buffer_vectors: u32,
    /// Results parked awaiting pickup by the central engine.
    pub result_fifo_depth: usize,
}

impl Default for NmeConfig {
    fn default() -> Self {
        NmeConfig {
            num_pes: 16,
            macs_per_pe: 8,
            buffer_bytes: 256 * 1024,
            buffer_vectors: 128,
            result_fifo_depth: 8,
        }
    }
}

impl NmeConfig {
    pub fn lanes(&self) -> u32 {
        self.num_pes * self.macs_per_pe
    }

    /// EU cycles to stream one weighted-accumulate over d elements.
    pub fn eu_cycles(&self, d: u32) -> u64 {
        (d as u64).div_ceil(self.lanes() as u64)
    }

    /// Whether a rows-by-cols shard of d-element vectors fits the buffer.
    /// Operands sit at their storage width; accumulators are always FP32.
    pub fn shard_fits(&self, rows: u32, cols: u32, d: u32, elem_bytes: u32) -> bool {
        rows + cols <= self.buffer_vectors
            && rows as u64 * (d as u64 * elem_bytes as u64) + cols as u64 * (d as u64 * 4)
                <= self.buffer_bytes
    }
}

#[derive(Debug, Clone)]
pub struct ResultOut {
    /// Global vertex id the accumulator belonged to.
    pub vertex: u32,
    pub data: Vec<f32>,
    /// Tick at which the value is visible to the consumer.
    pub ready_tick: u64,
}

struct Operand {
    data: Option<Vec<f32>>,
    ready_tick: u64,
    bytes: u64,
}

struct Acc {
    data: Vec<f32>,
    last_c_done: u64,
}

/// One engine instance. All times are ticks on the global clock; the
/// caller supplies ticks-per-EU-cycle at construction.
pub struct Nme {
    pub cfg: NmeConfig,
    ticks_per_eu: u64,
    /// Extra vector slots tolerated during shard handoff (overlap mode).
    pub slack_vectors: u32,
    d: u32,
    elem_bytes: u32,
    operands: HashMap<u32, Operand>,
    accs: HashMap<u32, Acc>,
    live_vectors: u32,
    live_bytes: u64,
    eu_free: u64,
    fifo: VecDeque<ResultOut>,
    pub high_water_vectors: u32,
    pub high_water_bytes: u64,
    /// Total MAC operations retired, for the energy model.
    pub macs: u64,
    /// Ticks the EU spent busy.
    pub eu_busy_ticks: u64,
}

impl Nme {
    pub fn new(cfg: NmeConfig, ticks_per_eu: u64) -> Nme {
        Nme {
            cfg,
            ticks_per_eu,
            slack_vectors: 0,
            d: 0,
            elem_bytes: 4,
            operands: HashMap::new(),
            accs: HashMap::new(),
            live_vectors: 0,
            live_bytes: 0,
            eu_free: 0,
            fifo: VecDeque::new(),
            high_water_vectors: 0,
            high_water_bytes: 0,
            macs: 0,
            eu_busy_ticks: 0,
        }
    }

    /// Set the vector shape for the phase. Requires an empty buffer.
    pub fn begin_phase(&mut self, d: u32, elem_bytes: u32) -> Result<()> {
        if self.live_vectors != 0 || !self.fifo.is_empty() {
            return Err(Error::Protocol("phase change with live state".into()));
        }
        if d == 0 || !(elem_bytes == 2 || elem_bytes == 4) {
            return Err(Error::Domain(format!(
                "bad vector shape d={d} elem_bytes={elem_bytes}"
            )));
        }
        self.d = d;
        self.elem_bytes = elem_bytes;
        Ok(())
    }

    fn charge(&mut self, bytes: u64) -> Result<()> {
        let budget = self.cfg.buffer_vectors + self.slack_vectors;
        if self.live_vectors + 1 > budget {
            return Err(Error::Capacity(format!(
                "buffer vector budget exceeded: {} live, budget {budget}",
                self.live_vectors
            )));
        }
        if self.live_bytes + bytes > self.cfg.buffer_bytes {
            return Err(Error::Capacity(format!(
                "buffer byte budget exceeded: {} + {bytes} > {}",
                self.live_bytes, self.cfg.buffer_bytes
            )));
        }
        self.live_vectors += 1;
        self.live_bytes += bytes;
        self.high_water_vectors = self.high_water_vectors.max(self.live_vectors);
        self.high_water_bytes = self.high_water_bytes.max(self.live_bytes);
        Ok(())
    }

    fn release(&mut self, bytes: u64) {
        debug_assert!(self.live_vectors > 0 && self.live_bytes >= bytes);
        self.live_vectors -= 1;
        self.live_bytes -= bytes;
    }

    pub fn operand_bytes(&self) -> u64 {
        self.d as u64 * self.elem_bytes as u64
    }

    pub fn acc_bytes(&self) -> u64 {
        self.d as u64 * 4
    }

    /// Allocate a zeroed accumulator for a destination vertex.
    pub fn alloc_acc(&mut self, vertex: u32) -> Result<()> {
        if self.accs.contains_key(&vertex) {
            return Err(Error::Protocol(format!("accumulator {vertex} already live")));
        }
        self.charge(self.acc_bytes())?;
        self.accs.insert(
            vertex,
            Acc {
                data: vec![0.0; self.d as usize],
                last_c_done: 0,
            },
        );
        Ok(())
    }

    /// Reserve a buffer slot for a source vector about to be loaded.
    /// Returns false if it is already resident or in flight.
    pub fn reserve_operand(&mut self, src: u32) -> Result<bool> {
        if self.operands.contains_key(&src) {
            return Ok(false);
        }
        let bytes = self.operand_bytes();
        self.charge(bytes)?;
        self.operands.insert(
            src,
            Operand {
                data: None,
                ready_tick: u64::MAX,
                bytes,
            },
        );
        Ok(true)
    }

    pub fn operand_resident(&self, src: u32) -> bool {
        self.operands.contains_key(&src)
    }

    /// Deliver loaded data for a reserved operand.
    pub fn operand_loaded(&mut self, src: u32, data: Vec<f32>, tick: u64) -> Result<()> {
        let op = self
            .operands
            .get_mut(&src)
            .ok_or_else(|| Error::Protocol(format!("load completion for unreserved {src}")))?;
        if data.len() != self.d as usize {
            return Err(Error::Protocol(format!(
                "operand {src} has {} elements, expected {}",
                data.len(),
                self.d
            )));
        }
        op.data = Some(data);
        op.ready_tick = tick;
        Ok(())
    }

    pub fn free_operand(&mut self, src: u32) {
        if let Some(op) = self.operands.remove(&src) {
            self.release(op.bytes);
        }
    }

    /// Execute one weighted accumulate acc[dst] += w * operand[src].
    /// Starts no earlier than `start_lb`, the operand arrival, or the EU
    /// becoming free; returns the completion tick. The EU is a single
    /// stream, so issue order is completion order.
    pub fn exec_c(&mut self, src: u32, dst: u32, w: f32, start_lb: u64) -> Result<u64> {
        let d = self.d;
        let op = self
            .operands
            .get(&src)
            .ok_or_else(|| Error::Protocol(format!("compute on absent operand {src}")))?;
        let x = op
            .data
            .as_ref()
            .ok_or_else(|| Error::Protocol(format!("compute on unloaded operand {src}")))?;
        let ready = op.ready_tick;
        let acc = self
            .accs
            .get_mut(&dst)
            .ok_or_else(|| Error::Protocol(format!("compute into absent accumulator {dst}")))?;
        for (a, &xi) in acc.data.iter_mut().zip(x.iter()) {
            *a += w * xi;
        }
        let start = start_lb.max(ready).max(self.eu_free);
        let busy = self.cfg.eu_cycles(d) * self.ticks_per_eu;
        let done = start + busy;
        self.eu_free = done;
        self.eu_busy_ticks += busy;
        acc.last_c_done = acc.last_c_done.max(done);
        self.macs += d as u64;
        Ok(done)
    }

    /// Tick at which a destination's accumulation is complete.
    pub fn acc_done_tick(&self, vertex: u32) -> Result<u64> {
        self.accs
            .get(&vertex)
            .map(|a| a.last_c_done)
            .ok_or_else(|| Error::Protocol(format!("absent accumulator {vertex}")))
    }

    /// Remove a finished accumulator for readout; the caller models the
    /// channel transfer and pushes the result when it lands.
    pub fn take_acc(&mut self, vertex: u32) -> Result<(Vec<f32>, u64)> {
        let acc = self
            .accs
            .remove(&vertex)
            .ok_or_else(|| Error::Protocol(format!("readout of absent accumulator {vertex}")))?;
        self.release(self.acc_bytes());
        Ok((acc.data, acc.last_c_done))
    }

    pub fn fifo_can_accept(&self) -> bool {
        self.fifo.len() < self.cfg.result_fifo_depth
    }

    pub fn fifo_len(&self) -> usize {
        self.fifo.len()
    }

    pub fn push_result(&mut self, vertex: u32, data: Vec<f32>, ready_tick: u64) -> Result<()> {
        if !self.fifo_can_accept() {
            return Err(Error::Capacity("result FIFO full".into()));
        }
        self.fifo.push_back(ResultOut {
            vertex,
            data,
            ready_tick,
        });
        Ok(())
    }

    /// Pop the oldest result whose data has arrived by `now`.
    pub fn pop_result(&mut self, now: u64) -> Option<ResultOut> {
        if self.fifo.front().is_some_and(|r| r.ready_tick <= now) {
            self.fifo.pop_front()
        } else {
            None
        }
    }

    pub fn live_vectors(&self) -> u32 {
        self.live_vectors
    }

    pub fn live_bytes(&self) -> u64 {
        self.live_bytes
    }

    pub fn is_drained(&self) -> bool {
        self.live_vectors == 0 && self.fifo.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(buffer_vectors: u32) -> Nme {
        let cfg = NmeConfig {
            buffer_vectors,
            ..NmeConfig::default()
        };
        Nme::new(cfg, 84)
    }

    #[test]
    fn weighted_accumulate_matches_hand_result() {
        let mut n = small(8);
        n.begin_phase(2, 4).unwrap();
        n.alloc_acc(7).unwrap();
        n.reserve_operand(1).unwrap();
        n.operand_loaded(1, vec![1.0, 2.0], 0).unwrap();
        n.exec_c(1, 7, 0.5, 0).unwrap();
        n.reserve_operand(2).unwrap();
        n.operand_loaded(2, vec![3.0, 4.0], 0).unwrap();
        n.exec_c(2, 7, 2.0, 0).unwrap();
        let (y, _) = n.take_acc(7).unwrap();
        assert_eq!(y, vec![0.5 * 1.0 + 2.0 * 3.0, 0.5 * 2.0 + 2.0 * 4.0]);
        assert_eq!(y, vec![6.5, 9.0]);
    }

    #[test]
    fn eu_serializes_back_to_back_computes() {
        let mut n = small(8);
        n.begin_phase(128, 4).unwrap();
        n.alloc_acc(0).unwrap();
        n.reserve_operand(1).unwrap();
        n.operand_loaded(1, vec![1.0; 128], 0).unwrap();
        n.reserve_operand(2).unwrap();
        n.operand_loaded(2, vec![1.0; 128], 0).unwrap();
        // 128 elements over 128 lanes: one EU cycle = 84 ticks each.
        assert_eq!(n.exec_c(1, 0, 1.0, 0).unwrap(), 84);
        assert_eq!(n.exec_c(2, 0, 1.0, 0).unwrap(), 168);
        // A late operand defers the start.
        n.reserve_operand(3).unwrap();
        n.operand_loaded(3, vec![1.0; 128], 1000).unwrap();
        assert_eq!(n.exec_c(3, 0, 1.0, 0).unwrap(), 1084);
        assert_eq!(n.eu_busy_ticks, 3 * 84);
    }

    #[test]
    fn vector_budget_is_enforced() {
        let mut n = small(4);
        n.begin_phase(16, 4).unwrap();
        n.alloc_acc(0).unwrap();
        n.alloc_acc(1).unwrap();
        n.reserve_operand(10).unwrap();
        n.reserve_operand(11).unwrap();
        assert!(matches!(n.reserve_operand(12), Err(Error::Capacity(_))));
        // Slack admits exactly one extra during shard handoff.
        n.slack_vectors = 1;
        n.reserve_operand(12).unwrap();
        assert!(matches!(n.reserve_operand(13), Err(Error::Capacity(_))));
        n.free_operand(10);
        n.reserve_operand(13).unwrap();
        assert_eq!(n.live_vectors(), 5);
        assert_eq!(n.high_water_vectors, 5);
    }

    #[test]
    fn byte_budget_is_enforced() {
        let cfg = NmeConfig {
            buffer_bytes: 1024,
            ..NmeConfig::default()
        };
        let mut n = Nme::new(cfg, 84);
        n.begin_phase(128, 4).unwrap();
        n.alloc_acc(0).unwrap();
        n.reserve_operand(1).unwrap();
        assert!(matches!(n.alloc_acc(2), Err(Error::Capacity(_))));
    }

    #[test]
    fn fifo_depth_and_readiness() {
        let mut n = small(64);
        n.begin_phase(4, 4).unwrap();
        for i in 0..8 {
            n.push_result(i, vec![0.0; 4], 100 + i as u64).unwrap();
        }
        assert!(!n.fifo_can_accept());
        assert!(matches!(
            n.push_result(99, vec![0.0; 4], 0),
            Err(Error::Capacity(_))
        ));
        assert!(n.pop_result(99).is_none());
        let r = n.pop_result(100).unwrap();
        assert_eq!(r.vertex, 0);
        assert!(n.fifo_can_accept());
    }

    #[test]
    fn shard_fit_accounting() {
        let cfg = NmeConfig::default();
        assert!(cfg.shard_fits(127, 1, 128, 4));
        assert!(!cfg.shard_fits(128, 1, 128, 4));
        // 256 KiB exactly: 128 FP32 vectors of 512 elements.
        assert!(cfg.shard_fits(0, 128, 512, 4));
        assert!(!cfg.shard_fits(1, 128, 512, 2));
        // BF16 operands halve the operand footprint.
        assert!(cfg.shard_fits(96, 32, 512, 2));
    }

    #[test]
    fn eu_cycle_counts() {
        let cfg = NmeConfig::default();
        assert_eq!(cfg.lanes(), 128);
        assert_eq!(cfg.eu_cycles(1), 1);
        assert_eq!(cfg.eu_cycles(128), 1);
        assert_eq!(cfg.eu_cycles(129), 2);
        assert_eq!(cfg.eu_cycles(256), 2);
    }
}
