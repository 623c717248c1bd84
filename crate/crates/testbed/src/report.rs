//! Machine-readable run report. Timing lives in its own section so two runs
//! with the same seed compare equal once it is dropped.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::scan::Violation;
use crate::scenario::Observed;
use crate::HarnessResult;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub index: usize,
    pub line: usize,
    pub actor: String,
    pub op: String,
    pub expected: String,
    pub got: String,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    #[serde(default)]
    pub observed: Observed,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_ms: f64,
    pub steps_ms: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub scenario: String,
    pub seed: u64,
    pub passed: bool,
    pub steps: Vec<StepOutcome>,
    pub scan: Vec<Violation>,
    pub timing: Timing,
}

impl Report {
    pub fn new(scenario: &str, seed: u64, steps: Vec<StepOutcome>, scan: Vec<Violation>, timing: Timing) -> Self {
        let passed = steps.iter().all(|s| s.passed) && scan.is_empty();
        Self {
            scenario: scenario.to_owned(),
            seed,
            passed,
            steps,
            scan,
            timing,
        }
    }

    pub fn pass_vector(&self) -> Vec<bool> {
        self.steps.iter().map(|s| s.passed).collect()
    }

    pub fn failures(&self) -> impl Iterator<Item = &StepOutcome> {
        self.steps.iter().filter(|s| !s.passed)
    }

    /// Everything except timing, pretty-printed.
    pub fn deterministic_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("report serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("timing");
        }
        serde_json::to_string_pretty(&v).expect("report serializes")
    }

    pub fn write(&self, path: impl AsRef<Path>) -> HarnessResult<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(passed: bool) -> StepOutcome {
        StepOutcome {
            index: 0,
            line: 2,
            actor: "dr-a".into(),
            op: "sync".into(),
            expected: "ok".into(),
            got: if passed { "ok" } else { "NotFound" }.into(),
            passed,
            detail: None,
            observed: Observed::default(),
        }
    }

    #[test]
    fn one_failed_step_fails_the_run() {
        assert!(Report::new("s", 1, vec![outcome(true)], vec![], Timing::default()).passed);
        assert!(!Report::new("s", 1, vec![outcome(true), outcome(false)], vec![], Timing::default()).passed);
    }

    #[test]
    fn deterministic_json_ignores_timing() {
        let a = Report::new(
            "s",
            1,
            vec![outcome(true)],
            vec![],
            Timing {
                total_ms: 1.0,
                steps_ms: vec![1.0],
            },
        );
        let b = Report::new(
            "s",
            1,
            vec![outcome(true)],
            vec![],
            Timing {
                total_ms: 9.0,
                steps_ms: vec![9.0],
            },
        );
        assert_ne!(a, b);
        assert_eq!(a.deterministic_json(), b.deterministic_json());
        assert!(!a.deterministic_json().contains("total_ms"));
    }
}
