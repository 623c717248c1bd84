//! Replays a scenario against a fresh deployment.
//!
//! The deployment lives in `<state>/deployment`; everything the harness
//! itself keeps (ground truth, master terminals' local databases) lives in
//! `<state>/harness`, so the privacy scan sees only what the servers wrote.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use chrono::{Duration, TimeZone, Utc};
use nusa_core::als::{Als, AlsConfig, Enrollment, PrincipalKind, TicketId};
use nusa_core::clock::{Clock, ManualClock};
use nusa_core::crypto::SecretKey;
use nusa_core::protocol::Client;
use nusa_core::registry::{IdentityQuery, ValidityWindow};
use nusa_core::terminal::{KeyRecovery, KeyStore, LocalDatabase, PatientView, Terminal, TerminalKind};
use nusa_core::{Error, ErrorCode};
use parking_lot::Mutex;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::report::{Report, StepOutcome, Timing};
use crate::scan::{self, GroundTruth};
use crate::scenario::{Action, Observed, Scenario, Step, WindowSpec};
use crate::{HarnessError, HarnessResult};

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Kept after the run when given; a temporary directory otherwise.
    pub state_dir: Option<PathBuf>,
    /// Overrides the scenario's own seed.
    pub seed: Option<u64>,
    /// Runs consecutive steps that share a group on concurrent threads.
    pub parallel_actors: bool,
}

struct Actor {
    id: String,
    principal: String,
    credential: String,
    seed: u64,
    terminal: Terminal,
}

/// What a step may read besides its own actor.
struct Shared {
    als: Arc<Als>,
    clock: ManualClock,
    last_offer: Mutex<Vec<TicketId>>,
    principals: BTreeMap<String, String>,
}

impl Shared {
    fn principal(&self, actor: &str) -> String {
        self.principals.get(actor).cloned().unwrap_or_else(|| actor.to_owned())
    }

    fn ticket(&self, index: usize) -> Result<TicketId, Error> {
        self.last_offer
            .lock()
            .get(index)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("no ticket {index} in the last offer")))
    }

    fn windows(&self, specs: &[WindowSpec]) -> Result<Vec<ValidityWindow>, Error> {
        let now = self.clock.now();
        specs
            .iter()
            .map(|w| {
                ValidityWindow::new(
                    now + Duration::seconds(w.start_secs),
                    now + Duration::seconds(w.end_secs),
                )
            })
            .collect()
    }
}

type Outcome = (Observed, Option<Error>);

fn first_error<T>(results: impl IntoIterator<Item = Result<T, Error>>) -> (usize, Option<Error>) {
    let mut ok = 0;
    let mut err = None;
    for r in results {
        match r {
            Ok(_) => ok += 1,
            Err(e) => {
                err.get_or_insert(e);
            }
        }
    }
    (ok, err)
}

fn observe_view(v: &PatientView) -> Observed {
    let mut fields = nusa_core::ehr::Fields::new();
    for r in &v.records {
        fields.extend(r.clear_fields.clone());
    }
    let mut notes: Vec<String> = v.notes.iter().map(|n| n.text.clone()).collect();
    notes.sort();
    Observed {
        records: Some(v.records.len()),
        notes: Some(notes),
        fields: Some(fields),
        ..Observed::default()
    }
}

fn local_pid(t: &Terminal, q: &IdentityQuery) -> Result<nusa_core::crypto::PatientIdentifier, Error> {
    let db = t.local().ok_or(Error::RequiresMasterTerminal)?;
    q.fiscal_code
        .as_deref()
        .and_then(|c| db.by_fiscal_code(c))
        .map(|e| e.pid)
        .ok_or_else(|| Error::NotFound("patient not in the local database".into()))
}

fn lift<T>(r: Result<T, Error>, f: impl FnOnce(T) -> Observed) -> Outcome {
    match r {
        Ok(v) => (f(v), None),
        Err(e) => (Observed::default(), Some(e)),
    }
}

fn none<T>(_: T) -> Observed {
    Observed::default()
}

fn count(n: usize) -> Observed {
    Observed {
        count: Some(n),
        ..Observed::default()
    }
}

fn exec(actor: &mut Actor, action: &Action, shared: &Shared, slave_keys: Option<KeyStore>) -> Outcome {
    let t = &mut actor.terminal;
    match action {
        Action::Login { credential } => {
            if let Some(keys) = slave_keys {
                let client = Client::in_process(shared.als.clone());
                *t = Terminal::slave(&actor.principal, client, keys).with_seed(actor.seed);
            }
            let cred = credential.clone().unwrap_or_else(|| actor.credential.clone());
            lift(t.login(&cred), none)
        }
        Action::Populate { patients } => match t.master_populate(patients) {
            Ok(results) => {
                let (ok, err) = first_error(results);
                (count(ok), err)
            }
            Err(e) => (Observed::default(), Some(e)),
        },
        Action::Lookup { patient } => lift(t.lookup_patient(patient), |v| observe_view(&v)),
        Action::Update { patient, store, update } => {
            lift(t.update_patient_record(patient, store, update.clone()), none)
        }
        Action::EditLocal { patient, store, update } => {
            let r = local_pid(t, patient).and_then(|pid| t.edit_local(&pid, store, update.clone()));
            lift(r, none)
        }
        Action::Sync => match t.sync_master() {
            Ok(r) => {
                let err = r.errors.first().map(|e| Error::from_code(e.code, e.message.clone()));
                let obs = Observed {
                    count: Some(r.pushed),
                    records: Some(r.fetched),
                    ..Observed::default()
                };
                (obs, err)
            }
            Err(e) => (Observed::default(), Some(e)),
        },
        Action::Offer { patients, smd } => {
            let r = t.offer_delegation(patients, &shared.principal(smd));
            if let Ok(ids) = &r {
                *shared.last_offer.lock() = ids.clone();
            }
            lift(r, |ids| count(ids.len()))
        }
        Action::Accept { ticket } => lift(shared.ticket(*ticket).and_then(|id| t.accept_offered(id)), none),
        Action::AcceptAll => match t.accept_all_offered() {
            Ok(rs) => {
                let (ok, err) = first_error(rs.into_iter().map(|(_, r)| r));
                (count(ok), err)
            }
            Err(e) => (Observed::default(), Some(e)),
        },
        Action::Finalize { ticket, windows } => {
            let r = shared
                .ticket(*ticket)
                .and_then(|id| Ok((id, shared.windows(windows)?)))
                .and_then(|(id, w)| t.finalize_accepted(id, w));
            lift(r, none)
        }
        Action::FinalizeAll { windows } => match shared.windows(windows).and_then(|w| t.finalize_all_accepted(w)) {
            Ok(rs) => {
                let (ok, err) = first_error(rs.into_iter().map(|(_, r)| r));
                (count(ok), err)
            }
            Err(e) => (Observed::default(), Some(e)),
        },
        Action::Revoke { patient, smd } => lift(t.revoke_delegation(patient, &shared.principal(smd)), none),
        Action::Remove { patient } => lift(t.remove_patient(patient), none),
        Action::RegenerateKey { reason } => match t.regenerate_key(*reason) {
            Ok(KeyRecovery::Pmd(r)) => {
                let err = r.errors.first().map(|e| Error::from_code(e.code, e.message.clone()));
                (count(r.replaced), err)
            }
            Ok(KeyRecovery::Smd(n)) => (count(n), None),
            Err(e) => (Observed::default(), Some(e)),
        },
        Action::RequestAccess => {
            let r = t.patient_request_access();
            if let Ok(id) = &r {
                *shared.last_offer.lock() = vec![*id];
            }
            lift(r, |_| count(1))
        }
        Action::PatientView => lift(t.patient_view(), |v| observe_view(&v)),
        Action::SetVisibility { field, md, hidden } => {
            lift(t.patient_set_visibility(field, &shared.principal(md), *hidden), none)
        }
        Action::Search { terms } => lift(t.client().keyword_search(terms.clone()), |hits| count(hits.len())),
        Action::Stats { field, statistic } => lift(t.client().stats(field, *statistic), |v| Observed {
            value: Some(v),
            ..Observed::default()
        }),
        Action::AdvanceClock { .. } | Action::Sweep => unreachable!("harness steps never reach an actor"),
    }
}

fn harness_step(action: &Action, shared: &Shared) -> Outcome {
    match action {
        Action::AdvanceClock { secs } => {
            shared.clock.advance(Duration::seconds(*secs));
            (Observed::default(), None)
        }
        Action::Sweep => lift(shared.als.sweep(), |r| count(r.grants_removed)),
        other => unreachable!("{other:?} is not a harness step"),
    }
}

fn judge(index: usize, step: &Step, outcome: Outcome) -> StepOutcome {
    let (observed, err) = outcome;
    let got = err.as_ref().map(|e| e.code());
    let expected = step.expect.map(ErrorCode::as_str).unwrap_or("ok");
    let mut passed = got == step.expect;
    let mut detail = err.as_ref().filter(|_| !passed).map(|e| e.to_string());
    if passed {
        if let Some(check) = &step.check {
            if let Err(why) = check.verify(&observed) {
                passed = false;
                detail = Some(why);
            }
        }
    }
    StepOutcome {
        index,
        line: step.line,
        actor: step.actor.clone(),
        op: step.op.clone(),
        expected: expected.to_owned(),
        got: got.map(ErrorCode::as_str).unwrap_or("ok").to_owned(),
        passed,
        detail,
        observed,
    }
}

/// The directory the run actually used, and whether it is temporary.
enum StateDir {
    Kept(PathBuf),
    Temp(tempfile::TempDir),
}

impl StateDir {
    fn path(&self) -> &Path {
        match self {
            StateDir::Kept(p) => p,
            StateDir::Temp(t) => t.path(),
        }
    }
}

pub struct Runner<'a> {
    scenario: &'a Scenario,
    options: RunOptions,
}

impl<'a> Runner<'a> {
    pub fn new(scenario: &'a Scenario, options: RunOptions) -> Self {
        Self { scenario, options }
    }

    fn state_dir(&self) -> HarnessResult<StateDir> {
        let dir = match &self.options.state_dir {
            None => StateDir::Temp(tempfile::tempdir()?),
            Some(p) => StateDir::Kept(p.clone()),
        };
        for sub in ["deployment", "harness"] {
            let p = dir.path().join(sub);
            if p.exists() && fs::read_dir(&p)?.next().is_some() {
                return Err(HarnessError::Invalid(format!("{} is not empty", p.display())));
            }
        }
        fs::create_dir_all(dir.path().join("deployment"))?;
        fs::create_dir_all(dir.path().join("harness/terminals"))?;
        Ok(dir)
    }

    pub fn run(&self) -> HarnessResult<Report> {
        let started = Instant::now();
        let header = &self.scenario.header;
        let seed = self.options.seed.unwrap_or(header.seed);
        let dir = self.state_dir()?;
        let deployment = dir.path().join("deployment");
        let harness = dir.path().join("harness");

        let clock = ManualClock::new(Utc.with_ymd_and_hms(2026, 1, 1, 8, 0, 0).unwrap());
        let config = AlsConfig {
            session_lifetime: Duration::minutes(header.config.session_lifetime_minutes),
            salt: header.config.salt.as_bytes().to_vec(),
            work_factor: header.config.work_factor,
            stores: header.config.stores.clone(),
            seed: Some(seed),
        };
        let als = Arc::new(Als::open(&deployment, config, Arc::new(clock.clone()))?);

        let mut principals = BTreeMap::new();
        for a in &header.actors {
            let p = match a.kind {
                TerminalKind::Slave => a.principal.clone().expect("validated at parse"),
                _ => a.id.clone(),
            };
            principals.insert(a.id.clone(), p);
        }

        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut actors: Vec<Actor> = Vec::new();
        for a in &header.actors {
            let actor_seed = rng.next_u64();
            let mut key_rng = ChaCha20Rng::seed_from_u64(actor_seed);
            let principal = principals[&a.id].clone();
            let client = Client::in_process(als.clone());
            let (terminal, credential) = match a.kind {
                TerminalKind::Slave => {
                    let master = actors
                        .iter()
                        .find(|m| m.id == principal)
                        .ok_or_else(|| HarnessError::Invalid(format!("slave {} declared before its master", a.id)))?;
                    let keys = master.terminal.keys().clone();
                    (Terminal::slave(&principal, client, keys), master.credential.clone())
                }
                kind => {
                    let keys = KeyStore::new(SecretKey::random(&mut key_rng));
                    let mut cred = [0u8; 12];
                    key_rng.fill_bytes(&mut cred);
                    let credential = cred.iter().map(|b| format!("{b:02x}")).collect::<String>();
                    let (pkind, fiscal) = match kind {
                        TerminalKind::Patient => (PrincipalKind::Patient, a.fiscal_code.clone()),
                        _ => (PrincipalKind::Md, None),
                    };
                    als.enroll(Enrollment {
                        principal_id: principal.clone(),
                        kind: pkind,
                        credential: credential.clone(),
                        key_id: Some(keys.current().key_id()),
                        fiscal_code: fiscal,
                    })?;
                    let t = match kind {
                        TerminalKind::Master => {
                            let db = LocalDatabase::open(harness.join("terminals").join(format!("{}.jsonl", a.id)))?;
                            Terminal::master(&principal, client, keys, db)
                        }
                        _ => Terminal::patient(&principal, client, keys),
                    };
                    (t, credential)
                }
            };
            let mut terminal = terminal.with_seed(actor_seed);
            terminal.login(&credential)?;
            actors.push(Actor {
                id: a.id.clone(),
                principal,
                credential,
                seed: actor_seed,
                terminal,
            });
        }

        let shared = Shared {
            als: als.clone(),
            clock,
            last_offer: Mutex::new(Vec::new()),
            principals,
        };
        let mut truth = GroundTruth::default();
        let steps = &self.scenario.steps;
        let mut outcomes: Vec<Option<(StepOutcome, f64)>> = vec![None; steps.len()];
        let mut i = 0;
        while i < steps.len() {
            let mut end = i + 1;
            if self.options.parallel_actors && steps[i].group.is_some() {
                while end < steps.len() && steps[end].group == steps[i].group {
                    end += 1;
                }
            }
            for (k, o) in self.run_batch(i, &steps[i..end], &mut actors, &shared) {
                outcomes[k] = Some(o);
            }
            for a in &actors {
                if let Some(db) = a.terminal.local() {
                    for e in db.entries() {
                        truth.insert(e.identity.clone(), e.pid);
                    }
                }
            }
            i = end;
        }

        truth.save(harness.join("ground_truth.jsonl"))?;
        let violations = scan::scan(&deployment, &truth)?;
        let (steps_out, steps_ms): (Vec<_>, Vec<_>) = outcomes.into_iter().map(|o| o.expect("every step ran")).unzip();
        let timing = Timing {
            total_ms: started.elapsed().as_secs_f64() * 1e3,
            steps_ms,
        };
        drop(dir);
        Ok(Report::new(&header.scenario, seed, steps_out, violations, timing))
    }

    fn slave_keys(&self, step: &Step, actors: &[Actor]) -> Option<KeyStore> {
        let spec = self.scenario.actor(&step.actor)?;
        if spec.kind != TerminalKind::Slave || !matches!(step.action, Action::Login { .. }) {
            return None;
        }
        let master = spec.principal.as_deref()?;
        actors
            .iter()
            .find(|a| a.id == master)
            .map(|a| a.terminal.keys().clone())
    }

    /// Runs `batch` (starting at step `first`); steps of one actor keep
    /// their order, different actors run side by side.
    fn run_batch(
        &self,
        first: usize,
        batch: &[Step],
        actors: &mut [Actor],
        shared: &Shared,
    ) -> Vec<(usize, (StepOutcome, f64))> {
        let timed = |k: usize, step: &Step, actor: Option<&mut Actor>, keys: Option<KeyStore>| {
            let t0 = Instant::now();
            let outcome = match actor {
                Some(a) => exec(a, &step.action, shared, keys),
                None => harness_step(&step.action, shared),
            };
            (k, (judge(k, step, outcome), t0.elapsed().as_secs_f64() * 1e3))
        };
        let keys: Vec<Option<KeyStore>> = batch.iter().map(|s| self.slave_keys(s, actors)).collect();

        if batch.len() == 1 {
            let step = &batch[0];
            let actor = actors.iter_mut().find(|a| a.id == step.actor);
            return vec![timed(first, step, actor, keys[0].clone())];
        }

        let mut per_actor: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (j, s) in batch.iter().enumerate() {
            per_actor.entry(s.actor.as_str()).or_default().push(j);
        }
        let mut results = Vec::new();
        std::thread::scope(|scope| {
            let handles: Vec<_> = actors
                .iter_mut()
                .filter_map(|a| per_actor.get(a.id.as_str()).map(|js| (a, js)))
                .map(|(a, js)| {
                    let keys = &keys;
                    let timed = &timed;
                    scope.spawn(move || {
                        js.iter()
                            .map(|&j| timed(first + j, &batch[j], Some(&mut *a), keys[j].clone()))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                results.extend(h.join().expect("actor thread panicked"));
            }
        });
        results.sort_by_key(|(k, _)| *k);
        results
    }
}

pub fn run_scenario(scenario: &Scenario, options: RunOptions) -> HarnessResult<Report> {
    Runner::new(scenario, options).run()
}
