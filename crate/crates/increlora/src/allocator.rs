//! Incremental rank allocation: linear budget growth, periodic top-h
//! selection, and the phase close that masks every outstanding reserve.
//!
//! The machine starts with every module at rank 1 (its initial reserve).
//! Every `nu` steps while the budget is open it takes the `h` highest
//! composite scores, activates those modules' reserves, appends fresh
//! reserves behind them, and registers a restart-warmup schedule group for
//! the parameters that start training in earnest at that moment. When the
//! running total hits `r_final` the phase latches Closed and every
//! remaining reserve is masked out of the forward pass for good.

use serde::{Deserialize, Serialize};

use crate::adapter::SvdAdapter;
use crate::numkernel::Rng;
use crate::optimsched::{Optimizer, ParamField, ParamKey, ScheduleSpec};
use crate::scoring::ImportanceState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Allocating,
    Closed,
}

/// One allocation event, exactly as it lands in the event log. `r_total`
/// and `ranks` are taken before close-time masking, so they describe the
/// budget the event paid for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocEvent {
    pub step: u64,
    pub selected: Vec<usize>,
    pub r_total: u64,
    pub ranks: Vec<u64>,
    pub scores: Vec<f64>,
}

/// Everything an allocation event mutates besides the allocator itself.
pub struct EventWiring<'a> {
    pub adapters: &'a mut [SvdAdapter],
    pub rng: &'a mut Rng,
    pub init_std: f64,
    pub optimizer: &'a mut Optimizer,
    pub schedule: ScheduleSpec,
    pub base_lr: f64,
    /// When true (the default training mode) the event group holds the
    /// activated lambda plus the NEW reserve's vectors: the activated
    /// component's vectors keep their original schedule because they are
    /// already trained into a useful state. When false, reserves never
    /// train, so the whole activated component starts fresh.
    pub advance_learning: bool,
}

pub struct AllocatorState {
    n: usize,
    h: usize,
    nu: u64,
    r_final: u64,
    r_total: u64,
    phase: Phase,
    last_step: Option<u64>,
    event_log: Vec<AllocEvent>,
}

impl AllocatorState {
    /// Panics when the budget cannot be met exactly: silent over- or
    /// under-shoot would corrupt every rank comparison downstream.
    pub fn new(n: usize, h: usize, nu: u64, r_final: u64) -> Self {
        assert!(n >= 1, "need at least one module");
        assert!(h >= 1 && h <= n, "h must lie in 1..={n}, got {h}");
        assert!(nu >= 1, "nu must be at least 1");
        assert!(r_final >= n as u64, "r_final {r_final} cannot be below the module count {n}");
        let span = r_final - n as u64;
        if span % h as u64 != 0 {
            let lower = r_final - span % h as u64;
            panic!(
                "r_final - n must be divisible by h: got r_final={r_final}, n={n}, h={h}; \
                 nearest valid budgets are {lower} and {}",
                lower + h as u64
            );
        }
        AllocatorState {
            n,
            h,
            nu,
            r_final,
            r_total: n as u64,
            phase: Phase::Allocating,
            last_step: None,
            event_log: Vec::new(),
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn r_total(&self) -> u64 {
        self.r_total
    }

    pub fn r_final(&self) -> u64 {
        self.r_final
    }

    pub fn nu(&self) -> u64 {
        self.nu
    }

    pub fn num_events_total(&self) -> u64 {
        (self.r_final - self.n as u64) / self.h as u64
    }

    pub fn event_log(&self) -> &[AllocEvent] {
        &self.event_log
    }

    /// No module can ever exceed this rank, even if it wins every event.
    pub fn theoretical_rank_cap(&self) -> u64 {
        self.r_final / self.h as u64
    }

    /// Advances the machine by one training step. Returns the event if this
    /// step allocated rank. Steps must be strictly increasing.
    pub fn step(&mut self, t: u64, scores: &ImportanceState, wiring: &mut EventWiring) -> Option<&AllocEvent> {
        assert!(
            self.last_step.is_none_or(|prev| t > prev),
            "allocator stepped backwards: {t} after {:?}",
            self.last_step
        );
        self.last_step = Some(t);
        if self.phase == Phase::Closed {
            return None;
        }
        assert_eq!(wiring.adapters.len(), self.n, "adapter count changed under the allocator");

        // Degenerate budget r_final == n: nothing to allocate, close at the
        // first step check.
        if self.r_total >= self.r_final {
            self.close(wiring);
            return None;
        }

        if t % self.nu != 0 {
            self.debug_check_budget(t, wiring.adapters);
            return None;
        }

        let selected = scores.top_h(self.h);
        for &k in &selected {
            let activated = wiring.adapters[k].activate_reserve();
            let reserve = wiring.adapters[k].append_reserve(wiring.rng, wiring.init_std);
            let in_dim = wiring.adapters[k].in_dim();
            let out_dim = wiring.adapters[k].out_dim();
            let params = if wiring.advance_learning {
                vec![
                    (ParamKey::new(k, activated, ParamField::Lambda), 1),
                    (ParamKey::new(k, reserve, ParamField::VecA), in_dim),
                    (ParamKey::new(k, reserve, ParamField::VecB), out_dim),
                ]
            } else {
                vec![
                    (ParamKey::new(k, activated, ParamField::Lambda), 1),
                    (ParamKey::new(k, activated, ParamField::VecA), in_dim),
                    (ParamKey::new(k, activated, ParamField::VecB), out_dim),
                ]
            };
            wiring.optimizer.register_group(params, t, wiring.schedule, wiring.base_lr);
        }
        self.r_total += self.h as u64;
        debug_assert!(
            wiring.adapters.iter().map(|a| a.rank() as u64).max().unwrap() <= self.theoretical_rank_cap(),
            "a module exceeded the rank cap"
        );

        let event = AllocEvent {
            step: t,
            selected,
            r_total: self.r_total,
            ranks: wiring.adapters.iter().map(|a| a.rank() as u64).collect(),
            scores: scores.s_hat().to_vec(),
        };
        self.event_log.push(event);

        if self.r_total == self.r_final {
            self.close(wiring);
        } else {
            self.debug_check_budget(t, wiring.adapters);
        }
        Some(self.event_log.last().unwrap())
    }

    fn close(&mut self, wiring: &mut EventWiring) {
        self.phase = Phase::Closed;
        for ad in wiring.adapters.iter_mut() {
            if let Some(id) = ad.mask_reserve() {
                let module = ad.module();
                wiring.optimizer.discard_params(&[
                    ParamKey::new(module, id, ParamField::VecA),
                    ParamKey::new(module, id, ParamField::VecB),
                    ParamKey::new(module, id, ParamField::Lambda),
                ]);
            }
        }
        let deployed: u64 = wiring.adapters.iter().map(|a| a.deployed_rank() as u64).sum();
        assert_eq!(
            deployed,
            self.r_final - self.n as u64,
            "deployed rank after close must equal r_final - n"
        );
    }

    fn debug_check_budget(&self, t: u64, adapters: &[SvdAdapter]) {
        debug_assert!(
            {
                let live: u64 = adapters.iter().map(|a| a.rank() as u64).sum();
                live == self.n as u64 + (self.h as u64) * (t / self.nu) && live == self.r_total
            },
            "budget linearity violated at step {t}"
        );
    }
}
