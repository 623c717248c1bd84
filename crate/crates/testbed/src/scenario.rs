//! Scenario files: one JSON header line naming the seed, config and actors,
//! then one JSON step per line.
//!
//! ```text
//! {"scenario":"demo","seed":7,"actors":[{"id":"dr-a","kind":"master"}]}
//! {"actor":"dr-a","op":"populate","args":{"patients":[...]},"check":{"count":1}}
//! {"actor":"harness","op":"advance_clock","args":{"secs":3600}}
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use nusa_core::als::StoreSpec;
use nusa_core::ehr::{Fields, RecordUpdate, Statistic};
use nusa_core::registry::IdentityQuery;
use nusa_core::terminal::{KeyLoss, LegacyPatient, TerminalKind};
use nusa_core::ErrorCode;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::{HarnessError, HarnessResult};

/// The pseudo-actor that owns the clock and the sweep.
pub const HARNESS_ACTOR: &str = "harness";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_work_factor")]
    pub work_factor: u32,
    #[serde(default = "default_stores")]
    pub stores: Vec<StoreSpec>,
    #[serde(default = "default_session_minutes")]
    pub session_lifetime_minutes: i64,
    #[serde(default = "default_salt")]
    pub salt: String,
}

fn default_work_factor() -> u32 {
    256
}

fn default_stores() -> Vec<StoreSpec> {
    vec![StoreSpec {
        name: "main".into(),
        editable: true,
    }]
}

fn default_session_minutes() -> i64 {
    30
}

fn default_salt() -> String {
    "nusa-testbed-salt".into()
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            work_factor: default_work_factor(),
            stores: default_stores(),
            session_lifetime_minutes: default_session_minutes(),
            salt: default_salt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActorSpec {
    pub id: String,
    pub kind: TerminalKind,
    /// Slaves: the master actor whose principal and keys they share.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub principal: Option<String>,
    /// Patients: how the server finds their registry entry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fiscal_code: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub scenario: String,
    pub seed: u64,
    #[serde(default)]
    pub config: ScenarioConfig,
    pub actors: Vec<ActorSpec>,
}

/// Validity window relative to the harness clock at the time of the step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub start_secs: i64,
    pub end_secs: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", content = "args", rename_all = "snake_case")]
pub enum Action {
    Login {
        #[serde(default)]
        credential: Option<String>,
    },
    Populate {
        patients: Vec<LegacyPatient>,
    },
    Lookup {
        patient: IdentityQuery,
    },
    Update {
        patient: IdentityQuery,
        store: String,
        update: RecordUpdate,
    },
    EditLocal {
        patient: IdentityQuery,
        store: String,
        update: RecordUpdate,
    },
    Sync,
    Offer {
        patients: Vec<IdentityQuery>,
        smd: String,
    },
    /// `ticket` indexes the most recent offer's ticket list.
    Accept {
        #[serde(default)]
        ticket: usize,
    },
    AcceptAll,
    Finalize {
        #[serde(default)]
        ticket: usize,
        #[serde(default)]
        windows: Vec<WindowSpec>,
    },
    FinalizeAll {
        #[serde(default)]
        windows: Vec<WindowSpec>,
    },
    Revoke {
        patient: IdentityQuery,
        smd: String,
    },
    Remove {
        patient: IdentityQuery,
    },
    RegenerateKey {
        reason: KeyLoss,
    },
    RequestAccess,
    PatientView,
    SetVisibility {
        field: String,
        md: String,
        hidden: bool,
    },
    Search {
        terms: Vec<String>,
    },
    Stats {
        field: String,
        statistic: Statistic,
    },
    AdvanceClock {
        secs: i64,
    },
    Sweep,
}

impl Action {
    pub fn is_harness_only(&self) -> bool {
        matches!(self, Action::AdvanceClock { .. } | Action::Sweep)
    }
}

/// Declarative expectations on what a step returned.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Check {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub records: Option<usize>,
    /// Decrypted note texts, order ignored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<Vec<String>>,
    /// Clear fields that must be present with these values.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fields: Option<Fields>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
}

/// What a step produced, as far as checks care.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Observed {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub records: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fields: Option<Fields>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
}

impl Check {
    pub fn verify(&self, got: &Observed) -> Result<(), String> {
        fn same<T: PartialEq + std::fmt::Debug>(what: &str, want: &Option<T>, got: &Option<T>) -> Result<(), String> {
            match want {
                Some(w) if got.as_ref() != Some(w) => Err(format!("{what}: wanted {w:?}, got {got:?}")),
                _ => Ok(()),
            }
        }
        same("count", &self.count, &got.count)?;
        same("records", &self.records, &got.records)?;
        if let Some(want) = &self.notes {
            let want: BTreeSet<&String> = want.iter().collect();
            let have: BTreeSet<&String> = got.notes.iter().flatten().collect();
            if want != have {
                return Err(format!("notes: wanted {want:?}, got {have:?}"));
            }
        }
        if let Some(want) = &self.fields {
            let have = got.fields.clone().unwrap_or_default();
            for (k, v) in want {
                if have.get(k) != Some(v) {
                    return Err(format!("field {k}: wanted {v:?}, got {:?}", have.get(k)));
                }
            }
        }
        if let Some(want) = self.value {
            let tol = self.tolerance.unwrap_or(1e-12);
            match got.value {
                Some(v) if (v - want).abs() <= tol => {}
                other => return Err(format!("value: wanted {want} ± {tol}, got {other:?}")),
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    /// 1-based line in the scenario file.
    pub line: usize,
    pub actor: String,
    pub op: String,
    pub action: Action,
    /// `None` means the step must succeed.
    pub expect: Option<ErrorCode>,
    pub check: Option<Check>,
    /// Consecutive steps sharing a group may run concurrently.
    pub group: Option<u32>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStep {
    actor: String,
    op: String,
    #[serde(default)]
    args: Value,
    #[serde(default)]
    expect: Option<String>,
    #[serde(default)]
    check: Option<Check>,
    #[serde(default)]
    group: Option<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub header: Header,
    pub steps: Vec<Step>,
}

fn parse_action(op: &str, args: &Value) -> Result<Action, String> {
    let build = |args: Option<Value>| {
        let mut map = serde_json::Map::new();
        map.insert("op".into(), Value::String(op.to_owned()));
        if let Some(a) = args {
            map.insert("args".into(), a);
        }
        serde_json::from_value::<Action>(Value::Object(map))
    };
    // Unit ops reject `args`, struct ops with all-default fields need it.
    let empty = Value::Object(Default::default());
    let (first, second) = if args.is_null() {
        (None, Some(empty))
    } else if *args == empty {
        (Some(empty), None)
    } else {
        return build(Some(args.clone())).map_err(|e| e.to_string());
    };
    build(first.clone()).or_else(|e| build(second).map_err(|_| e.to_string()))
}

impl Scenario {
    pub fn parse(text: &str) -> HarnessResult<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with("//"));
        let err = |line: usize, msg: String| HarnessError::Parse(format!("line {line}: {msg}"));
        let (hline, htext) = lines
            .next()
            .ok_or_else(|| HarnessError::Parse("empty scenario".into()))?;
        let header: Header = serde_json::from_str(htext).map_err(|e| err(hline, format!("header: {e}")))?;

        let mut ids = BTreeSet::new();
        for a in &header.actors {
            if a.id == HARNESS_ACTOR || !ids.insert(a.id.as_str()) {
                return Err(err(hline, format!("actor id {} reserved or repeated", a.id)));
            }
        }
        for a in &header.actors {
            match a.kind {
                TerminalKind::Slave => {
                    let owner = a
                        .principal
                        .as_deref()
                        .and_then(|p| header.actors.iter().find(|o| o.id == p));
                    if owner.is_none_or(|o| o.kind != TerminalKind::Master) {
                        return Err(err(hline, format!("slave {} needs a master actor as principal", a.id)));
                    }
                }
                TerminalKind::Patient if a.fiscal_code.is_none() => {
                    return Err(err(hline, format!("patient {} needs a fiscal code", a.id)));
                }
                _ => {}
            }
        }

        let mut steps = Vec::new();
        for (n, l) in lines {
            let raw: RawStep = serde_json::from_str(l).map_err(|e| err(n, e.to_string()))?;
            let action = parse_action(&raw.op, &raw.args).map_err(|e| err(n, e))?;
            let harness = raw.actor == HARNESS_ACTOR;
            if harness != action.is_harness_only() {
                return Err(err(n, format!("op {} cannot be run by {}", raw.op, raw.actor)));
            }
            if !harness && !ids.contains(raw.actor.as_str()) {
                return Err(err(n, format!("unknown actor {}", raw.actor)));
            }
            if harness && raw.group.is_some() {
                return Err(err(n, "harness steps cannot join a parallel group".into()));
            }
            let expect = match raw.expect.as_deref() {
                None | Some("ok") => None,
                Some(code) => Some(
                    code.parse::<ErrorCode>()
                        .map_err(|_| err(n, format!("unknown error code {code}")))?,
                ),
            };
            steps.push(Step {
                line: n,
                actor: raw.actor,
                op: raw.op,
                action,
                expect,
                check: raw.check,
                group: raw.group,
            });
        }
        Ok(Scenario { header, steps })
    }

    pub fn load(path: impl AsRef<Path>) -> HarnessResult<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::parse(&text)
    }

    pub fn actor(&self, id: &str) -> Option<&ActorSpec> {
        self.header.actors.iter().find(|a| a.id == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEAD: &str = r#"{"scenario":"t","seed":1,"actors":[{"id":"dr-a","kind":"master"},{"id":"lap","kind":"slave","principal":"dr-a"},{"id":"p","kind":"patient","fiscal_code":"X"}]}"#;

    #[test]
    fn parses_steps_and_expectations() {
        let text = format!(
            "{HEAD}\n\n// comment\n{}\n{}\n{}\n",
            r#"{"actor":"dr-a","op":"sync"}"#,
            r#"{"actor":"lap","op":"regenerate_key","args":{"reason":"pmd-loss"},"expect":"RequiresMasterTerminal"}"#,
            r#"{"actor":"harness","op":"advance_clock","args":{"secs":60}}"#,
        );
        let s = Scenario::parse(&text).unwrap();
        assert_eq!(s.steps.len(), 3);
        assert_eq!(s.steps[0].line, 4);
        assert_eq!(s.steps[0].action, Action::Sync);
        assert_eq!(s.steps[1].expect, Some(ErrorCode::RequiresMasterTerminal));
        assert_eq!(s.header.config.work_factor, 256);
    }

    #[test]
    fn rejects_malformed_input() {
        let cases = [
            "".to_string(),
            "{not json".to_string(),
            format!("{HEAD}\n{}", r#"{"actor":"dr-a","op":"fly"}"#),
            format!("{HEAD}\n{}", r#"{"actor":"ghost","op":"sync"}"#),
            format!("{HEAD}\n{}", r#"{"actor":"dr-a","op":"sweep"}"#),
            format!("{HEAD}\n{}", r#"{"actor":"dr-a","op":"sync","expect":"Nope"}"#),
            format!("{HEAD}\n{}", r#"{"actor":"dr-a","op":"lookup","args":{}}"#),
            r#"{"scenario":"t","seed":1,"actors":[{"id":"s","kind":"slave"}]}"#.to_string(),
        ];
        for c in cases {
            assert!(matches!(Scenario::parse(&c), Err(HarnessError::Parse(_))), "{c}");
        }
    }

    #[test]
    fn checks_compare_what_they_name() {
        let check = Check {
            count: Some(2),
            value: Some(4.0),
            notes: Some(vec!["b".into(), "a".into()]),
            ..Check::default()
        };
        let mut got = Observed {
            count: Some(2),
            value: Some(4.0 + 1e-13),
            notes: Some(vec!["a".into(), "b".into()]),
            ..Observed::default()
        };
        check.verify(&got).unwrap();
        got.count = Some(3);
        assert!(check.verify(&got).is_err());
    }
}
