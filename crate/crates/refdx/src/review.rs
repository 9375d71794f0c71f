//! Files produced by human review: relevance sheets for retrieved cases
//! (see [`refdx_core::retrieval::ReviewSheet`]) and the decision log of the
//! low-confidence review queue.

use serde::{Deserialize, Serialize};

use crate::engine::RankedLabel;
use crate::error::{Result, ServiceError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Confirm,
    Relabel,
    Defer,
}

/// One reviewed case. Only flagged (`reliable == false`) cases enter the
/// queue, and each leaves it with a decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionEntry {
    pub case_id: String,
    pub generation: u64,
    pub ranked_labels: Vec<RankedLabel>,
    pub cscore: f64,
    pub reliable: bool,
    pub decision: Decision,
    /// Required for `relabel`, absent otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_label: Option<String>,
    /// RFC 3339 timestamp.
    pub decided_at: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionLog {
    pub entries: Vec<DecisionEntry>,
}

impl DecisionLog {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ServiceError::BadRequest(m));
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.case_id) {
                return bad(format!("case {} decided twice", e.case_id));
            }
            if e.reliable {
                return bad(format!("case {} was not flagged", e.case_id));
            }
            if !(0.0..=1.0).contains(&e.cscore) {
                return bad(format!("case {} has cscore {}", e.case_id, e.cscore));
            }
            match (e.decision, &e.new_label) {
                (Decision::Relabel, None) => return bad(format!("case {} relabeled without a label", e.case_id)),
                (Decision::Confirm | Decision::Defer, Some(_)) => {
                    return bad(format!("case {} carries a label but was not relabeled", e.case_id))
                }
                _ => {}
            }
            if e.decided_at.trim().is_empty() {
                return bad(format!("case {} has no decision time", e.case_id));
            }
        }
        Ok(())
    }
}
