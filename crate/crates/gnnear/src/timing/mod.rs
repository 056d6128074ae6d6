//! DDR4 command-level timing: parameter sets, exact-rational clock
//! conversion, per-DIMM bank/rank state machines with FR-FCFS scheduling,
//! and shared channel bus accounting.
//!
//! One engine models one DIMM. All commands touching a DIMM's ranks,
//! whether generated by the DIMM's own NME or forwarded from the channel
//! controller, serialize through that engine (one command bus per DIMM).
//! Channel-originated commands additionally consume the channel's
//! command slot, and their data bursts occupy the channel data bus.
//!
//! Simplifications, chosen to keep the model self-consistent with the
//! architectural latency contracts:
//! - A column command may carry several back-to-back bursts within one
//!   row; its data occupies bursts*tBL cycles starting tCL after issue.
//!   Write latency uses tCL as well (no separate tCWL in the parameter
//!   set).
//! - tRC is the ACT-to-ACT envelope; PRE becomes legal tRC - tRP after
//!   the activation (subsuming tRAS), so a precharge-activate pair lands
//!   exactly on the envelope.
//! - No refresh.

pub mod audit;

use crate::{Error, Result};
use std::collections::VecDeque;

// ── Clocks ──────────────────────────────────────────────────────────────

/// The three clock domains of the machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Clocks {
    pub mem_hz: u64,
    pub eu_hz: u64,
    pub cae_hz: u64,
}

impl Default for Clocks {
    fn default() -> Self {
        Clocks {
            mem_hz: 1_200_000_000,
            eu_hz: 500_000_000,
            cae_hz: 700_000_000,
        }
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: u64, b: u64) -> u64 {
    a / gcd(a, b) * b
}

/// Exact-rational event time base: one tick is 1/lcm(mem, eu, cae) Hz, so
/// every clock period is an integer number of ticks and cross-domain
/// conversion never accumulates rounding drift.
#[derive(Debug, Clone, Copy)]
pub struct TickClock {
    pub tick_hz: u64,
    pub mem_period: u64,
    pub eu_period: u64,
    pub cae_period: u64,
}

impl TickClock {
    pub fn new(c: Clocks) -> TickClock {
        let tick_hz = lcm(lcm(c.mem_hz, c.eu_hz), c.cae_hz);
        TickClock {
            tick_hz,
            mem_period: tick_hz / c.mem_hz,
            eu_period: tick_hz / c.eu_hz,
            cae_period: tick_hz / c.cae_hz,
        }
    }

    pub fn mem_to_ticks(&self, cycles: u64) -> u64 {
        cycles * self.mem_period
    }

    /// First memory-cycle boundary at or after `ticks`.
    pub fn ticks_to_mem_ceil(&self, ticks: u64) -> u64 {
        ticks.div_ceil(self.mem_period)
    }

    pub fn ticks_to_seconds(&self, ticks: u64) -> f64 {
        ticks as f64 / self.tick_hz as f64
    }
}

// ── Parameters ──────────────────────────────────────────────────────────

/// DDR4 timing constraints in memory-clock cycles, plus geometry shared by
/// the engine and the address map.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingParams {
    pub t_rc: u64,
    pub t_rcd: u64,
    pub t_cl: u64,
    pub t_rp: u64,
    pub t_bl: u64,
    pub t_ccd_s: u64,
    pub t_ccd_l: u64,
    pub t_rrd_s: u64,
    pub t_rrd_l: u64,
    pub t_faw: u64,
    /// Bytes moved by one burst (BL8 on a 64-bit rank).
    pub burst_bytes: u32,
    pub num_banks: u32,
    pub num_bank_groups: u32,
    pub row_bytes: u32,
    /// FR-FCFS read and write queue depth, each.
    pub queue_depth: usize,
    /// Idle cycles inserted on a read/write direction flip of a data bus.
    pub rw_turnaround: u64,
    pub clocks: Clocks,
}

impl TimingParams {
    /// DDR4-2400 at the 1200 MHz memory clock.
    pub fn ddr4_2400() -> TimingParams {
        TimingParams {
            t_rc: 56,
            t_rcd: 17,
            t_cl: 17,
            t_rp: 17,
            t_bl: 4,
            t_ccd_s: 4,
            t_ccd_l: 6,
            t_rrd_s: 4,
            t_rrd_l: 6,
            t_faw: 26,
            burst_bytes: 64,
            num_banks: 16,
            num_bank_groups: 4,
            row_bytes: 8192,
            queue_depth: 32,
            rw_turnaround: 2,
            clocks: Clocks::default(),
        }
    }

    pub fn bank_group(&self, bank: u32) -> u32 {
        bank / (self.num_banks / self.num_bank_groups)
    }

    /// One rank's peak data rate in bytes per second.
    pub fn rank_bandwidth(&self) -> f64 {
        self.burst_bytes as f64 / (self.t_bl as f64 / self.clocks.mem_hz as f64)
    }
}

// ── Requests and commands ───────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    /// Generated by the DIMM's own NME; uses only DIMM-local buses.
    Local,
    /// Forwarded from the channel controller; consumes channel command
    /// slots and channel data-bus time.
    Channel,
}

#[derive(Debug, Clone, Copy)]
pub struct Request {
    pub id: u64,
    pub rank: u8,
    pub bank: u32,
    pub row: u64,
    /// Column offset in 8-byte beats from the start of the row.
    pub col: u32,
    pub bursts: u32,
    pub write: bool,
    pub origin: Origin,
    /// Part of a channel-wide broadcast write group; the engine preps the
    /// bank but the column command is issued by the broadcast coordinator.
    pub broadcast: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmdKind {
    Act,
    Pre,
    Rd,
    Wr,
}

impl CmdKind {
    pub fn name(self) -> &'static str {
        match self {
            CmdKind::Act => "ACT",
            CmdKind::Pre => "PRE",
            CmdKind::Rd => "RD",
            CmdKind::Wr => "WR",
        }
    }

    pub fn parse(s: &str) -> Result<CmdKind> {
        match s {
            "ACT" => Ok(CmdKind::Act),
            "PRE" => Ok(CmdKind::Pre),
            "RD" => Ok(CmdKind::Rd),
            "WR" => Ok(CmdKind::Wr),
            other => Err(Error::Input(format!("unknown command '{other}'"))),
        }
    }
}

/// One issued DRAM command, as recorded in the command trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CmdEvent {
    pub cycle: u64,
    pub channel: u8,
    pub dimm: u8,
    pub rank: u8,
    pub bank: u32,
    pub cmd: CmdKind,
    pub row: u64,
    pub col: u32,
    pub bursts: u32,
}

/// Text rendering: `cycle channel dimm rank bank cmd row col bursts`, one
/// command per line. The trailing bursts column is zero for ACT/PRE.
pub fn render_cmd_trace(events: &[CmdEvent]) -> String {
    let mut out = String::with_capacity(events.len() * 32);
    for e in events {
        out.push_str(&format!(
            "{} {} {} {} {} {} {} {} {}\n",
            e.cycle,
            e.channel,
            e.dimm,
            e.rank,
            e.bank,
            e.cmd.name(),
            e.row,
            e.col,
            e.bursts
        ));
    }
    out
}

pub fn parse_cmd_trace(text: &str) -> Result<Vec<CmdEvent>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 9 {
            return Err(Error::Parse {
                line: idx + 1,
                msg: format!("expected 9 fields, got {}", toks.len()),
            });
        }
        let num = |i: usize| -> Result<u64> {
            toks[i].parse::<u64>().map_err(|e| Error::Parse {
                line: idx + 1,
                msg: format!("field {i}: {e}"),
            })
        };
        out.push(CmdEvent {
            cycle: num(0)?,
            channel: num(1)? as u8,
            dimm: num(2)? as u8,
            rank: num(3)? as u8,
            bank: num(4)? as u32,
            cmd: CmdKind::parse(toks[5]).map_err(|e| Error::Parse {
                line: idx + 1,
                msg: e.to_string(),
            })?,
            row: num(6)?,
            col: num(7)? as u32,
            bursts: num(8)? as u32,
        });
    }
    Ok(out)
}

// ── Channel shared state ────────────────────────────────────────────────

/// Per-channel resources shared by the four DIMMs: the command/address
/// slot (one command or delivered instruction per cycle) and the 64-bit
/// data bus with a read/write turnaround gap.
#[derive(Debug, Clone)]
pub struct ChannelBus {
    last_cmd_cycle: Option<u64>,
    pub data_busy_until: u64,
    pub data_last_write: bool,
}

impl Default for ChannelBus {
    fn default() -> Self {
        ChannelBus {
            last_cmd_cycle: None,
            data_busy_until: 0,
            data_last_write: false,
        }
    }
}

impl ChannelBus {
    pub fn cmd_slot_free(&self, now: u64) -> bool {
        self.last_cmd_cycle != Some(now)
    }

    pub fn take_cmd_slot(&mut self, now: u64) {
        debug_assert!(self.cmd_slot_free(now));
        self.last_cmd_cycle = Some(now);
    }

    /// Earliest start for a transfer in direction `write`, honoring the
    /// turnaround gap when the direction flips.
    pub fn data_earliest(&self, write: bool, turnaround: u64) -> u64 {
        if self.data_busy_until == 0 {
            return 0;
        }
        self.data_busy_until + if self.data_last_write != write { turnaround } else { 0 }
    }

    pub fn data_window_ok(&self, start: u64, write: bool, turnaround: u64) -> bool {
        start >= self.data_earliest(write, turnaround)
    }

    pub fn reserve_data(&mut self, start: u64, cycles: u64, write: bool) {
        self.data_busy_until = start + cycles;
        self.data_last_write = write;
    }
}

// ── Engine ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
struct Bank {
    open_row: Option<u64>,
    last_act: Option<u64>,
    last_pre: Option<u64>,
    data_end: u64,
}

#[derive(Debug, Clone)]
struct Rank {
    banks: Vec<Bank>,
    /// Up to the last 4 activation times, oldest first (tFAW).
    act_history: VecDeque<u64>,
    last_act: Option<(u64, u32)>,
    last_col: Option<(u64, u32)>,
    data_busy_until: u64,
    data_last_write: bool,
}

impl Rank {
    fn new(num_banks: u32) -> Rank {
        Rank {
            banks: (0..num_banks)
                .map(|_| Bank {
                    open_row: None,
                    last_act: None,
                    last_pre: None,
                    data_end: 0,
                })
                .collect(),
            act_history: VecDeque::with_capacity(4),
            last_act: None,
            last_col: None,
            data_busy_until: 0,
            data_last_write: false,
        }
    }
}

#[derive(Debug, Clone)]
struct Queued {
    req: Request,
    seq: u64,
}

/// FR-FCFS command engine for one DIMM. Issues at most one command per
/// memory cycle; prefers ready column commands (row hits) oldest-first,
/// reads before writes, and otherwise advances the oldest request's bank
/// toward its row.
#[derive(Debug)]
pub struct DdrEngine {
    pub channel_id: u8,
    pub dimm_id: u8,
    pub params: TimingParams,
    ranks: Vec<Rank>,
    rd_q: VecDeque<Queued>,
    wr_q: VecDeque<Queued>,
    completions: Vec<(u64, u64)>,
    pub trace: Vec<CmdEvent>,
    pub record_trace: bool,
    last_cmd_cycle: Option<u64>,
    seq: u64,
}

/// What a tick produced, for the caller's bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Issued {
    None,
    Cmd(CmdKind),
}

impl DdrEngine {
    pub fn new(channel_id: u8, dimm_id: u8, num_ranks: u32, params: TimingParams) -> DdrEngine {
        let ranks = (0..num_ranks).map(|_| Rank::new(params.num_banks)).collect();
        DdrEngine {
            channel_id,
            dimm_id,
            params,
            ranks,
            rd_q: VecDeque::new(),
            wr_q: VecDeque::new(),
            completions: Vec::new(),
            trace: Vec::new(),
            record_trace: true,
            last_cmd_cycle: None,
            seq: 0,
        }
    }

    pub fn can_accept(&self, write: bool) -> bool {
        let q = if write { &self.wr_q } else { &self.rd_q };
        q.len() < self.params.queue_depth
    }

    pub fn is_idle(&self) -> bool {
        self.rd_q.is_empty() && self.wr_q.is_empty() && self.completions.is_empty()
    }

    pub fn pending(&self) -> usize {
        self.rd_q.len() + self.wr_q.len()
    }

    pub fn enqueue(&mut self, req: Request) -> Result<()> {
        if req.rank as usize >= self.ranks.len() || req.bank >= self.params.num_banks {
            return Err(Error::Domain(format!(
                "request beyond geometry: rank {} bank {}",
                req.rank, req.bank
            )));
        }
        let end_bytes = (req.col as u64 + req.bursts as u64 * (self.params.burst_bytes as u64 / 8)) * 8;
        if req.bursts == 0 || end_bytes > self.params.row_bytes as u64 {
            return Err(Error::Domain(format!(
                "request spans row boundary: col {} bursts {}",
                req.col, req.bursts
            )));
        }
        if !self.can_accept(req.write) {
            return Err(Error::Capacity("queue full".into()));
        }
        let q = if req.write { &mut self.wr_q } else { &mut self.rd_q };
        q.push_back(Queued { req, seq: self.seq });
        self.seq += 1;
        Ok(())
    }

    /// Completion ids whose data finished at or before `now`.
    pub fn drain_completed(&mut self, now: u64) -> Vec<u64> {
        let mut done = Vec::new();
        self.completions.retain(|&(t, id)| {
            if t <= now {
                done.push((t, id));
                false
            } else {
                true
            }
        });
        done.sort_unstable();
        done.into_iter().map(|(_, id)| id).collect()
    }

    /// Earliest cycle at which any queued completion lands, for idle-skip.
    pub fn next_completion(&self) -> Option<u64> {
        self.completions.iter().map(|&(t, _)| t).min()
    }

    fn act_legal(&self, rank: usize, bank: u32, now: u64) -> bool {
        let r = &self.ranks[rank];
        let b = &r.banks[bank as usize];
        if b.open_row.is_some() {
            return false;
        }
        if let Some(t) = b.last_act {
            if now < t + self.params.t_rc {
                return false;
            }
        }
        if let Some(t) = b.last_pre {
            if now < t + self.params.t_rp {
                return false;
            }
        }
        if let Some((t, bg)) = r.last_act {
            let gap = if bg == self.params.bank_group(bank) {
                self.params.t_rrd_l
            } else {
                self.params.t_rrd_s
            };
            if now < t + gap {
                return false;
            }
        }
        if r.act_history.len() == 4 && now < r.act_history[0] + self.params.t_faw {
            return false;
        }
        true
    }

    fn pre_legal(&self, rank: usize, bank: u32, now: u64) -> bool {
        let b = &self.ranks[rank].banks[bank as usize];
        if b.open_row.is_none() {
            return false;
        }
        if let Some(t) = b.last_act {
            if now < t + self.params.t_rc - self.params.t_rp {
                return false;
            }
        }
        now >= b.data_end
    }

    /// Column-command legality, including rank data-bus and (for channel
    /// origin) channel data-bus availability at now + tCL.
    fn col_legal(&self, req: &Request, now: u64, chan: &ChannelBus) -> bool {
        let r = &self.ranks[req.rank as usize];
        let b = &r.banks[req.bank as usize];
        if b.open_row != Some(req.row) {
            return false;
        }
        match b.last_act {
            Some(t) if now >= t + self.params.t_rcd => {}
            _ => return false,
        }
        if let Some((t, bg)) = r.last_col {
            let gap = if bg == self.params.bank_group(req.bank) {
                self.params.t_ccd_l
            } else {
                self.params.t_ccd_s
            };
            if now < t + gap {
                return false;
            }
        }
        let start = now + self.params.t_cl;
        let rank_earliest = if r.data_busy_until == 0 {
            0
        } else {
            r.data_busy_until
                + if r.data_last_write != req.write {
                    self.params.rw_turnaround
                } else {
                    0
                }
        };
        if start < rank_earliest {
            return false;
        }
        if req.origin == Origin::Channel
            && !chan.data_window_ok(start, req.write, self.params.rw_turnaround)
        {
            return false;
        }
        true
    }

    fn record(&mut self, cycle: u64, rank: u8, bank: u32, cmd: CmdKind, row: u64, col: u32, bursts: u32) {
        if self.record_trace {
            self.trace.push(CmdEvent {
                cycle,
                channel: self.channel_id,
                dimm: self.dimm_id,
                rank,
                bank,
                cmd,
                row,
                col,
                bursts,
            });
        }
    }

    fn apply_act(&mut self, rank: usize, bank: u32, row: u64, now: u64) {
        let bg = self.params.bank_group(bank);
        let r = &mut self.ranks[rank];
        let b = &mut r.banks[bank as usize];
        b.open_row = Some(row);
        b.last_act = Some(now);
        r.last_act = Some((now, bg));
        if r.act_history.len() == 4 {
            r.act_history.pop_front();
        }
        r.act_history.push_back(now);
        self.record(now, rank as u8, bank, CmdKind::Act, row, 0, 0);
        self.last_cmd_cycle = Some(now);
    }

    fn apply_pre(&mut self, rank: usize, bank: u32, now: u64) {
        let row = self.ranks[rank].banks[bank as usize].open_row.unwrap_or(0);
        self.ranks[rank].banks[bank as usize].open_row = None;
        self.ranks[rank].banks[bank as usize].last_pre = Some(now);
        self.record(now, rank as u8, bank, CmdKind::Pre, row, 0, 0);
        self.last_cmd_cycle = Some(now);
    }

    fn apply_col(&mut self, req: &Request, now: u64, chan: &mut ChannelBus) {
        let bg = self.params.bank_group(req.bank);
        let data_cycles = req.bursts as u64 * self.params.t_bl;
        let start = now + self.params.t_cl;
        let end = start + data_cycles;
        {
            let r = &mut self.ranks[req.rank as usize];
            r.last_col = Some((now, bg));
            r.data_busy_until = end;
            r.data_last_write = req.write;
            let b = &mut r.banks[req.bank as usize];
            b.data_end = end;
        }
        if req.origin == Origin::Channel {
            chan.reserve_data(start, data_cycles, req.write);
        }
        self.completions.push((end, req.id));
        self.record(
            now,
            req.rank,
            req.bank,
            if req.write { CmdKind::Wr } else { CmdKind::Rd },
            req.row,
            req.col,
            req.bursts,
        );
        self.last_cmd_cycle = Some(now);
    }

    /// True when a broadcast write request's column command would be legal
    /// this cycle (bank prepped, rank timing clear). Channel bus checks
    /// are the coordinator's job.
    pub fn broadcast_col_ready(&self, id: u64, now: u64, chan: &ChannelBus) -> bool {
        self.wr_q
            .iter()
            .find(|q| q.req.id == id)
            .map(|q| self.col_legal(&q.req, now, chan))
            .unwrap_or(false)
    }

    /// Issue the column command of broadcast request `id` right now.
    /// Caller guarantees readiness across the whole group.
    pub fn issue_broadcast_col(&mut self, id: u64, now: u64, chan: &mut ChannelBus) {
        let pos = self
            .wr_q
            .iter()
            .position(|q| q.req.id == id)
            .expect("broadcast request queued");
        let q = self.wr_q.remove(pos).unwrap();
        debug_assert!(self.last_cmd_cycle != Some(now));
        // The group shares one channel command; only the coordinator takes
        // the channel slot. Each engine's local command path is consumed.
        let mut local_chan = chan.clone();
        debug_assert!(self.col_legal(&q.req, now, &local_chan));
        self.apply_col(&q.req, now, &mut local_chan);
        // Mirror the rank-side reservation but leave the channel bus to
        // the coordinator (one shared data window for the group).
    }

    /// Advance one memory cycle: issue at most one command.
    pub fn tick(&mut self, now: u64, chan: &mut ChannelBus) -> Issued {
        if self.last_cmd_cycle == Some(now) {
            return Issued::None;
        }
        // Ready column commands, reads before writes, oldest first.
        for write_pass in [false, true] {
            let q = if write_pass { &self.wr_q } else { &self.rd_q };
            let mut pick: Option<(u64, usize)> = None;
            for (i, entry) in q.iter().enumerate() {
                if entry.req.broadcast {
                    continue;
                }
                if self.col_legal(&entry.req, now, chan) {
                    if entry.req.origin == Origin::Channel && !chan.cmd_slot_free(now) {
                        continue;
                    }
                    if pick.map(|(s, _)| entry.seq < s).unwrap_or(true) {
                        pick = Some((entry.seq, i));
                    }
                }
            }
            if let Some((_, i)) = pick {
                let q = if write_pass { &mut self.wr_q } else { &mut self.rd_q };
                let entry = q.remove(i).unwrap();
                if entry.req.origin == Origin::Channel {
                    chan.take_cmd_slot(now);
                }
                self.apply_col(&entry.req, now, chan);
                return Issued::Cmd(if entry.req.write { CmdKind::Wr } else { CmdKind::Rd });
            }
        }
        // No ready column command: advance the oldest request whose bank
        // needs opening. Reads first, then writes (broadcast prep
        // included).
        let mut oldest: Option<&Queued> = None;
        for entry in self.rd_q.iter().chain(self.wr_q.iter()) {
            let bank_state = &self.ranks[entry.req.rank as usize].banks[entry.req.bank as usize];
            let needs_row_work = bank_state.open_row != Some(entry.req.row);
            if needs_row_work && oldest.map(|o| entry.seq < o.seq).unwrap_or(true) {
                oldest = Some(entry);
            }
        }
        if let Some(entry) = oldest {
            let req = entry.req;
            let needs_slot = req.origin == Origin::Channel;
            if needs_slot && !chan.cmd_slot_free(now) {
                return Issued::None;
            }
            let rank = req.rank as usize;
            let open = self.ranks[rank].banks[req.bank as usize].open_row;
            match open {
                Some(_) => {
                    if self.pre_legal(rank, req.bank, now) {
                        if needs_slot {
                            chan.take_cmd_slot(now);
                        }
                        self.apply_pre(rank, req.bank, now);
                        return Issued::Cmd(CmdKind::Pre);
                    }
                }
                None => {
                    if self.act_legal(rank, req.bank, now) {
                        if needs_slot {
                            chan.take_cmd_slot(now);
                        }
                        self.apply_act(rank, req.bank, req.row, now);
                        return Issued::Cmd(CmdKind::Act);
                    }
                }
            }
        }
        Issued::None
    }
}
