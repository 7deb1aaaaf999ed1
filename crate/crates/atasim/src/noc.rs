//! Crossbar interconnect with flit-level output occupancy and round-robin
//! output arbitration.
//!
//! A message occupies its output port for `ceil(message_bytes / flit_bytes)`
//! cycles and is delivered `hop_latency` cycles after its last flit leaves.
//! Same-cycle senders competing for one output are granted in round-robin
//! order starting from the output's pointer, which then advances past the
//! last granted input. Each output transmits at most one flit per cycle, so
//! an output is never idle while a message for it is queued.

/// Opaque handle callers attach to injected messages to recognize them at
/// delivery time.
pub type MsgTag = u64;

#[derive(Debug, Clone, Copy)]
struct StagedMsg {
    src: u32,
    bytes: u64,
    tag: MsgTag,
    seq: u64,
}

/// One scheduled delivery, in deterministic grant order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Delivery {
    pub deliver_at: u64,
    pub src: u32,
    pub dst: u32,
    pub flits: u64,
    pub tag: MsgTag,
}

/// Crossbar state: per-output busy horizon and round-robin pointer, plus the
/// staging buffer for the cycle currently being arbitrated.
#[derive(Debug, Clone)]
pub struct CrossbarState {
    pub inputs: u32,
    pub outputs: u32,
    pub hop_latency: u64,
    pub flit_bytes: u64,
    busy_until: Vec<u64>,
    rr_pointer: Vec<u32>,
    staged: Vec<Vec<StagedMsg>>,
    staged_count: usize,
    stage_seq: u64,
    flits_per_output: Vec<u64>,
    total_flits: u64,
}

impl CrossbarState {
    pub fn new(inputs: u32, outputs: u32, hop_latency: u64, flit_bytes: u64) -> CrossbarState {
        assert!(flit_bytes > 0, "flit_bytes must be nonzero");
        CrossbarState {
            inputs,
            outputs,
            hop_latency,
            flit_bytes,
            busy_until: vec![0; outputs as usize],
            rr_pointer: vec![0; outputs as usize],
            staged: vec![Vec::new(); outputs as usize],
            staged_count: 0,
            stage_seq: 0,
            flits_per_output: vec![0; outputs as usize],
            total_flits: 0,
        }
    }

    /// Flit count of a message.
    pub fn occupancy(&self, message_bytes: u64) -> u64 {
        message_bytes.div_ceil(self.flit_bytes).max(1)
    }

    /// Queues a message for arbitration in the current cycle. All messages
    /// injected between two `drain` calls compete as same-cycle senders.
    pub fn inject(&mut self, src: u32, dst: u32, message_bytes: u64, tag: MsgTag) {
        debug_assert!(src < self.inputs && dst < self.outputs);
        let seq = self.stage_seq;
        self.stage_seq += 1;
        self.staged[dst as usize].push(StagedMsg {
            src,
            bytes: message_bytes,
            tag,
            seq,
        });
        self.staged_count += 1;
    }

    pub fn has_staged(&self) -> bool {
        self.staged_count > 0
    }

    /// Arbitrates everything staged at cycle `now` and schedules it on the
    /// output ports. Returns the deliveries in grant order.
    pub fn drain(&mut self, now: u64) -> Vec<Delivery> {
        let mut out = Vec::with_capacity(self.staged_count);
        if self.staged_count == 0 {
            return out;
        }
        for dst in 0..self.outputs as usize {
            if self.staged[dst].is_empty() {
                continue;
            }
            let mut msgs = std::mem::take(&mut self.staged[dst]);
            let ptr = self.rr_pointer[dst];
            let inputs = self.inputs;
            // round-robin distance from the pointer; FIFO per input
            msgs.sort_by_key(|m| (((m.src + inputs - ptr) % inputs), m.seq));
            for m in &msgs {
                let occ = self.occupancy(m.bytes);
                let start = now.max(self.busy_until[dst]);
                self.busy_until[dst] = start + occ;
                self.flits_per_output[dst] += occ;
                self.total_flits += occ;
                out.push(Delivery {
                    deliver_at: start + occ + self.hop_latency,
                    src: m.src,
                    dst: dst as u32,
                    flits: occ,
                    tag: m.tag,
                });
            }
            self.rr_pointer[dst] = (msgs.last().expect("nonempty").src + 1) % inputs;
        }
        self.staged_count = 0;
        out
    }

    /// Sends one message with no same-cycle competition:
    /// `delivery = max(now, busy_until) + occupancy + hop_latency`.
    pub fn send(&mut self, src: u32, dst: u32, message_bytes: u64, now: u64) -> u64 {
        self.inject(src, dst, message_bytes, 0);
        let d = self.drain(now);
        d[0].deliver_at
    }

    /// Flits transmitted per output port since construction.
    pub fn flits_per_output(&self) -> &[u64] {
        &self.flits_per_output
    }

    pub fn total_flits(&self) -> u64 {
        self.total_flits
    }
}
