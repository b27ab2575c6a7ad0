//! Four-core shunter. The system clock runs at four times the core clock and
//! the FM SRAM port is granted to core `cycle mod 4`, so each core sees the
//! port once per core cycle.

use serde::{Deserialize, Serialize};

use super::SimReport;

pub const SHUNTER_CORES: usize = 4;
/// Trace byte flag: the granted core was busy in that cycle.
pub const ACTIVE_FLAG: u8 = 0x80;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ShunterState {
    pub system_cycle: u64,
}

impl ShunterState {
    pub fn grant(cycle: u64) -> usize {
        (cycle % SHUNTER_CORES as u64) as usize
    }

    /// Grants the current cycle and advances.
    pub fn tick(&mut self) -> usize {
        let g = Self::grant(self.system_cycle);
        self.system_cycle += 1;
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grant {
    pub cycle: u64,
    pub core: usize,
    /// False for an idle slot: the core was granted but had nothing to fetch.
    pub active: bool,
}

impl Grant {
    pub fn to_byte(self) -> u8 {
        self.core as u8 | if self.active { ACTIVE_FLAG } else { 0 }
    }
}

/// Grants of a whole run, layer after layer. Core `c` is active in core
/// cycle `k` of a layer iff `k` is below its own cycle count for that layer.
pub fn shunter_trace(report: &SimReport) -> impl Iterator<Item = Grant> + '_ {
    let mut start = 0u64;
    report.layers.iter().flat_map(move |l| {
        let per_core = l.counters.per_core_cycles.clone();
        let span = l.counters.core_cycles * SHUNTER_CORES as u64;
        let base = start;
        start += span;
        (base..base + span).map(move |cycle| Grant {
            cycle,
            core: ShunterState::grant(cycle),
            active: per_core
                .get(ShunterState::grant(cycle))
                .is_some_and(|&n| (cycle - base) / (SHUNTER_CORES as u64) < n),
        })
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceCheck {
    pub system_cycles: u64,
    pub double_grants: u64,
    pub gap_violations: u64,
    pub active_cycles: [u64; SHUNTER_CORES],
}

impl TraceCheck {
    pub fn violations(&self) -> u64 {
        self.double_grants + self.gap_violations
    }
}

/// Checks a trace against the arbitration contract: cycles are consecutive
/// with one grant each, and every core's grants are exactly 4 cycles apart.
pub fn verify_trace(trace: impl IntoIterator<Item = Grant>) -> TraceCheck {
    let mut check = TraceCheck::default();
    let mut last: [Option<u64>; SHUNTER_CORES] = [None; SHUNTER_CORES];
    let mut expected = 0u64;
    for g in trace {
        if g.cycle != expected || g.core >= SHUNTER_CORES {
            check.double_grants += 1;
        }
        expected = g.cycle + 1;
        if g.core < SHUNTER_CORES {
            match last[g.core] {
                Some(prev) if g.cycle.wrapping_sub(prev) != SHUNTER_CORES as u64 => check.gap_violations += 1,
                None if g.cycle != g.core as u64 => check.gap_violations += 1,
                _ => {}
            }
            last[g.core] = Some(g.cycle);
            if g.active {
                check.active_cycles[g.core] += 1;
            }
        }
        check.system_cycles += 1;
    }
    check
}

/// Same check over a byte trace file (one byte per system cycle).
pub fn verify_trace_bytes(bytes: &[u8]) -> TraceCheck {
    verify_trace(bytes.iter().enumerate().map(|(i, &b)| Grant {
        cycle: i as u64,
        core: (b & !ACTIVE_FLAG) as usize,
        active: b & ACTIVE_FLAG != 0,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grants(n: u64) -> Vec<usize> {
        let mut s = ShunterState::default();
        (0..n).map(|_| s.tick()).collect()
    }

    #[test]
    fn first_eight_cycles_round_robin() {
        assert_eq!(grants(8), vec![0, 1, 2, 3, 0, 1, 2, 3]);
    }

    #[test]
    fn every_window_of_four_has_all_cores() {
        let g = grants(103);
        for w in g.windows(4) {
            let mut seen = [false; 4];
            for &c in w {
                seen[c] = true;
            }
            assert!(seen.iter().all(|&s| s));
        }
    }

    #[test]
    fn verifier_catches_bad_traces() {
        let ok: Vec<u8> = (0..16).map(|i| (i % 4) as u8).collect();
        assert_eq!(verify_trace_bytes(&ok).violations(), 0);
        let mut bad = ok.clone();
        bad[5] = 2;
        assert!(verify_trace_bytes(&bad).violations() > 0);
        let skipped: Vec<u8> = vec![1, 2, 3, 0];
        assert!(verify_trace_bytes(&skipped).violations() > 0);
    }
}
