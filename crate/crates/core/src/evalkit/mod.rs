//! Judging, success tables, length-difference and token statistics, and
//! cost ledgers.

mod cost;
mod judge;
mod stats;
mod table;

pub use cost::{cost_ledger, CostLedger, Phase, PhaseCost, PhaseEntry};
pub use judge::{judge_trajectory, parse_verdict, JudgeError, JudgeVerdict, Verdict};
pub use stats::{delta_l, mean, median, round_to, token_stats, DeltaLStats, DeltaMode, TokenStats};
pub use table::{render_columns, success_table, SiteRate, SiteTally, SuccessTable, TableError};
