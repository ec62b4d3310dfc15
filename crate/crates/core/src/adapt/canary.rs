use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CanaryConfig {
    /// Share of the fleet that receives the candidate first.
    pub canary_fraction: f64,
    /// Frames each group must observe before a decision.
    pub window_frames: u64,
}

impl Default for CanaryConfig {
    fn default() -> Self {
        CanaryConfig {
            canary_fraction: 0.3,
            window_frames: 2000,
        }
    }
}

impl CanaryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.canary_fraction > 0.0 && self.canary_fraction <= 1.0) {
            return Err(Error::config("canary_fraction", "must be in (0, 1]"));
        }
        if self.window_frames == 0 {
            return Err(Error::config("window_frames", "must be >= 1"));
        }
        Ok(())
    }

    /// Number of canary devices in a fleet of `n`.
    pub fn canary_count(&self, n: usize) -> usize {
        ((self.canary_fraction * n as f64).ceil() as usize).clamp(1, n.max(1))
    }
}

/// Monitoring counts for one group over the window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanaryStats {
    pub frames: u64,
    pub normal_frames: u64,
    pub false_alarms: u64,
    pub arc_events: u64,
    pub missed_events: u64,
}

impl CanaryStats {
    /// False alarms per normal frame.
    pub fn false_alarm_rate(&self) -> f64 {
        if self.normal_frames == 0 {
            0.0
        } else {
            self.false_alarms as f64 / self.normal_frames as f64
        }
    }

    pub fn miss_rate(&self) -> f64 {
        if self.arc_events == 0 {
            0.0
        } else {
            self.missed_events as f64 / self.arc_events as f64
        }
    }

    pub fn merge(&mut self, other: &CanaryStats) {
        self.frames += other.frames;
        self.normal_frames += other.normal_frames;
        self.false_alarms += other.false_alarms;
        self.arc_events += other.arc_events;
        self.missed_events += other.missed_events;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CanaryOutcome {
    Promote,
    Rollback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleCheck {
    pub rule: String,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanaryDecision {
    pub outcome: CanaryOutcome,
    pub candidate: CanaryStats,
    pub baseline: CanaryStats,
    pub trace: Vec<RuleCheck>,
}

/// Promote iff the candidate is no worse on either rate and strictly better
/// on at least one; everything else, ties included, rolls back.
pub fn canary_decide(candidate: &CanaryStats, baseline: &CanaryStats, cfg: &CanaryConfig) -> Result<CanaryDecision> {
    for s in [candidate, baseline] {
        if s.frames < cfg.window_frames {
            return Err(Error::IncompleteWindow {
                have: s.frames,
                need: cfg.window_frames,
            });
        }
    }
    let (cf, bf) = (candidate.false_alarm_rate(), baseline.false_alarm_rate());
    let (cm, bm) = (candidate.miss_rate(), baseline.miss_rate());
    let trace = vec![
        RuleCheck {
            rule: format!("false_alarm_rate {cf} <= {bf}"),
            holds: cf <= bf,
        },
        RuleCheck {
            rule: format!("miss_rate {cm} <= {bm}"),
            holds: cm <= bm,
        },
        RuleCheck {
            rule: "strictly better on at least one rate".into(),
            holds: cf < bf || cm < bm,
        },
    ];
    let outcome = if trace.iter().all(|r| r.holds) {
        CanaryOutcome::Promote
    } else {
        CanaryOutcome::Rollback
    };
    Ok(CanaryDecision {
        outcome,
        candidate: *candidate,
        baseline: *baseline,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stats(fa: u64, miss: u64) -> CanaryStats {
        CanaryStats {
            frames: 5000,
            normal_frames: 4000,
            false_alarms: fa,
            arc_events: 20,
            missed_events: miss,
        }
    }

    fn decide(c: CanaryStats, b: CanaryStats) -> CanaryOutcome {
        canary_decide(&c, &b, &CanaryConfig::default()).unwrap().outcome
    }

    #[test]
    fn decision_table() {
        assert_eq!(decide(stats(1, 0), stats(9, 2)), CanaryOutcome::Promote);
        assert_eq!(decide(stats(1, 0), stats(9, 0)), CanaryOutcome::Promote);
        assert_eq!(decide(stats(1, 3), stats(9, 2)), CanaryOutcome::Rollback);
        assert_eq!(decide(stats(4, 2), stats(4, 2)), CanaryOutcome::Rollback);
    }

    #[test]
    fn short_window_is_an_error() {
        let short = CanaryStats { frames: 10, ..stats(0, 0) };
        let r = canary_decide(&short, &stats(0, 0), &CanaryConfig::default());
        assert!(matches!(r, Err(Error::IncompleteWindow { have: 10, .. })));
    }

    #[test]
    fn roster_size() {
        let c = CanaryConfig::default();
        assert_eq!(c.canary_count(10), 3);
        assert_eq!(c.canary_count(1), 1);
        let c = CanaryConfig { canary_fraction: 0.25, ..c };
        assert_eq!(c.canary_count(10), 3);
    }

    proptest! {
        #[test]
        fn replayed_decisions_match(cf in 0u64..50, cm in 0u64..20, bf in 0u64..50, bm in 0u64..20) {
            let d = canary_decide(&stats(cf, cm), &stats(bf, bm), &CanaryConfig::default()).unwrap();
            let json = serde_json::to_string(&d).unwrap();
            let back: CanaryDecision = serde_json::from_str(&json).unwrap();
            let again = canary_decide(&back.candidate, &back.baseline, &CanaryConfig::default()).unwrap();
            prop_assert_eq!(again, d.clone());
            let expect = cf <= bf && cm <= bm && (cf < bf || cm < bm);
            prop_assert_eq!(d.outcome == CanaryOutcome::Promote, expect);
        }
    }
}
