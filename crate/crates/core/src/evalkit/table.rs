use std::collections::BTreeMap;

use rust_decimal::{Decimal, RoundingStrategy};
use serde::{Deserialize, Serialize};

use super::cost::CostLedger;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteTally {
    pub successes: u64,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteRate {
    pub site: String,
    pub successes: u64,
    pub total: u64,
    /// Percent, two decimals.
    pub rate: Decimal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessTable {
    pub rows: Vec<SiteRate>,
    /// Pooled percent over all sites, two decimals.
    pub overall: Decimal,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TableError {
    #[error("site {0} has no evaluated queries")]
    EmptySite(String),
}

fn percent(successes: u64, total: u64) -> Decimal {
    (Decimal::from(successes) * Decimal::ONE_HUNDRED / Decimal::from(total))
        .round_dp_with_strategy(2, RoundingStrategy::MidpointAwayFromZero)
}

/// Per-site success rates plus the pooled rate.
pub fn success_table(results: &BTreeMap<String, SiteTally>) -> Result<SuccessTable, TableError> {
    let mut rows = Vec::with_capacity(results.len());
    for (site, t) in results {
        if t.total == 0 {
            return Err(TableError::EmptySite(site.clone()));
        }
        rows.push(SiteRate {
            site: site.clone(),
            successes: t.successes,
            total: t.total,
            rate: percent(t.successes, t.total),
        });
    }
    let successes: u64 = results.values().map(|t| t.successes).sum();
    let total: u64 = results.values().map(|t| t.total).sum();
    let overall = if total == 0 {
        Decimal::ZERO
    } else {
        percent(successes, total)
    };
    Ok(SuccessTable { rows, overall })
}

/// Left-aligned first column, right-aligned others, two-space gutters.
pub fn render_columns(header: &[&str], rows: &[Vec<String>]) -> String {
    let ncol = header.len();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut out = String::new();
        for (i, cell) in cells.iter().enumerate().take(ncol) {
            if i > 0 {
                out.push_str("  ");
            }
            let pad = widths[i] - cell.chars().count();
            if i == 0 {
                out.push_str(cell);
                out.push_str(&" ".repeat(pad));
            } else {
                out.push_str(&" ".repeat(pad));
                out.push_str(cell);
            }
        }
        out.trim_end().to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (ncol.saturating_sub(1))));
    out.push('\n');
    for row in rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

impl SuccessTable {
    pub fn render(&self) -> String {
        let mut rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.site.clone(),
                    r.successes.to_string(),
                    r.total.to_string(),
                    two_dp(r.rate),
                ]
            })
            .collect();
        let successes: u64 = self.rows.iter().map(|r| r.successes).sum();
        let total: u64 = self.rows.iter().map(|r| r.total).sum();
        rows.push(vec![
            "Overall".into(),
            successes.to_string(),
            total.to_string(),
            two_dp(self.overall),
        ]);
        render_columns(&["Site", "Success", "Total", "Rate (%)"], &rows)
    }
}

/// Two decimals, half away from zero.
fn two_dp(x: Decimal) -> String {
    format!("{:.2}", x.round_dp_with_strategy(2, RoundingStrategy::MidpointAwayFromZero))
}

fn group_thousands(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

impl CostLedger {
    pub fn render(&self) -> String {
        let mut rows: Vec<Vec<String>> = self
            .per_phase
            .iter()
            .map(|(p, c)| {
                vec![
                    p.as_str().to_string(),
                    group_thousands(c.tokens),
                    two_dp(c.price_usd),
                ]
            })
            .collect();
        rows.push(vec![
            "Total".into(),
            group_thousands(self.total_tokens),
            two_dp(self.total_usd),
        ]);
        render_columns(&["Phase", "Tokens", "Price ($)"], &rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::str::FromStr;

    fn table(entries: &[(&str, u64, u64)]) -> Result<SuccessTable, TableError> {
        success_table(
            &entries
                .iter()
                .map(|&(s, successes, total)| (s.to_string(), SiteTally { successes, total }))
                .collect(),
        )
    }

    #[test]
    fn rendered_prices_round() {
        let ledger = super::super::cost::cost_ledger(
            &[super::super::cost::PhaseEntry {
                phase: super::super::cost::Phase::Branching,
                tokens: 6432,
                price_usd: None,
            }],
            Decimal::from_str("0.0000025").unwrap(),
        );
        assert!(ledger.render().contains("0.02"), "{}", ledger.render());
    }

    #[test]
    fn rates() {
        let t = table(&[("a", 17, 41), ("b", 0, 40)]).unwrap();
        assert_eq!(t.rows[0].rate, Decimal::from_str("41.46").unwrap());
        assert_eq!(format!("{:.2}", t.rows[1].rate), "0.00");
        let t = table(&[("a", 1, 2), ("b", 1, 2)]).unwrap();
        assert_eq!(format!("{:.2}", t.overall), "50.00");
    }

    #[test]
    fn empty_site_rejected() {
        assert_eq!(table(&[("a", 0, 0)]), Err(TableError::EmptySite("a".into())));
    }

    #[test]
    fn rendering_aligns() {
        let text = table(&[("allrecipes", 17, 41), ("bbc", 3, 4)]).unwrap().render();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "Site        Success  Total  Rate (%)");
        assert_eq!(lines[2], "allrecipes       17     41     41.46");
        assert_eq!(lines[4], "Overall          20     45     44.44");
        assert_eq!(group_thousands(6_287_610), "6,287,610");
        assert_eq!(group_thousands(610), "610");
    }
}
