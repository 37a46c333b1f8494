use std::collections::BTreeMap;

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Reflection,
    Branching,
    Rollback,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Reflection => "reflection",
            Phase::Branching => "branching",
            Phase::Rollback => "rollback",
        }
    }
}

/// One line of input: tokens spent in a phase, with the price if known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseEntry {
    pub phase: Phase,
    pub tokens: u64,
    #[serde(default)]
    pub price_usd: Option<Decimal>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseCost {
    pub tokens: u64,
    pub price_usd: Decimal,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub per_phase: BTreeMap<Phase, PhaseCost>,
    pub total_tokens: u64,
    pub total_usd: Decimal,
}

/// Sum token counts and prices per phase. Entries without a price are
/// charged `tokens * usd_per_token`.
pub fn cost_ledger(entries: &[PhaseEntry], usd_per_token: Decimal) -> CostLedger {
    let mut ledger = CostLedger::default();
    for e in entries {
        let price = e
            .price_usd
            .unwrap_or_else(|| Decimal::from(e.tokens) * usd_per_token);
        let slot = ledger.per_phase.entry(e.phase).or_default();
        slot.tokens += e.tokens;
        slot.price_usd += price;
    }
    ledger.total_tokens = ledger.per_phase.values().map(|c| c.tokens).sum();
    ledger.total_usd = ledger.per_phase.values().map(|c| c.price_usd).sum();
    ledger
}
