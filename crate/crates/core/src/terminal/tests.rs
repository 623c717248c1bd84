use std::sync::Arc;

use chrono::{Duration, NaiveDate, TimeZone, Utc};

use super::*;
use crate::als::{Als, AlsConfig, Enrollment, PrincipalKind, StoreSpec};
use crate::clock::ManualClock;
use crate::ehr::FieldValue;

struct Fx {
    als: Arc<Als>,
    seed: u64,
}

fn identity(n: u32) -> Identity {
    Identity {
        surname: format!("Neri{n}"),
        given_name: "Carla".into(),
        birthdate: NaiveDate::from_ymd_opt(1975, 4, 2).unwrap() + Duration::days(n as i64),
        fiscal_code: format!("NRECRL75D{n:05}X"),
    }
}

fn legacy(n: u32) -> LegacyPatient {
    let mut clear = Fields::new();
    clear.insert("systolic".into(), FieldValue::Number(120.0 + n as f64));
    LegacyPatient {
        identity: identity(n),
        clear,
        notes: vec![NoteSpec {
            field: "history".into(),
            text: format!("history of patient {n}"),
            keywords: vec!["cardio".into()],
        }],
        store: None,
        legacy: None,
    }
}

impl Fx {
    fn new() -> Self {
        let clock = ManualClock::new(Utc.with_ymd_and_hms(2026, 5, 1, 8, 0, 0).unwrap());
        let config = AlsConfig {
            work_factor: 8,
            seed: Some(7),
            stores: vec![StoreSpec {
                name: "main".into(),
                editable: true,
            }],
            ..AlsConfig::default()
        };
        Self {
            als: Arc::new(Als::in_memory(config, Arc::new(clock)).unwrap()),
            seed: 100,
        }
    }

    fn keys(&mut self) -> KeyStore {
        self.seed += 1;
        KeyStore::new(SecretKey::random(&mut ChaCha20Rng::seed_from_u64(self.seed)))
    }

    fn enroll(&self, id: &str, kind: PrincipalKind, keys: &KeyStore, fiscal: Option<String>) {
        self.als
            .enroll(Enrollment {
                principal_id: id.into(),
                kind,
                credential: "pw".into(),
                key_id: Some(keys.current().key_id()),
                fiscal_code: fiscal,
            })
            .unwrap();
    }

    fn master(&mut self, id: &str) -> Terminal {
        let keys = self.keys();
        self.enroll(id, PrincipalKind::Md, &keys, None);
        let mut t = Terminal::master(
            id,
            Client::in_process(self.als.clone()),
            keys,
            LocalDatabase::in_memory(),
        )
        .with_seed(self.seed);
        t.login("pw").unwrap();
        t
    }

    fn slave_of(&mut self, master: &Terminal) -> Terminal {
        let mut t = Terminal::slave(
            master.principal_id(),
            Client::in_process(self.als.clone()),
            master.keys().clone(),
        );
        t.login("pw").unwrap();
        t
    }

    fn patient(&mut self, id: &str, n: u32) -> Terminal {
        let keys = self.keys();
        self.enroll(id, PrincipalKind::Patient, &keys, Some(identity(n).fiscal_code));
        let mut t = Terminal::patient(id, Client::in_process(self.als.clone()), keys).with_seed(self.seed);
        t.login("pw").unwrap();
        t
    }
}

fn delegate(pmd: &mut Terminal, smd: &mut Terminal, n: u32) {
    let ids = pmd
        .offer_delegation(&[identity(n).query()], smd.principal_id())
        .unwrap();
    smd.accept_offered(ids[0]).unwrap();
    assert_eq!(smd.client().ticket_status(ids[0]).unwrap().payload.layer_count(), 2);
    pmd.finalize_accepted(ids[0], vec![]).unwrap();
}

#[test]
fn populate_lookup_round_trip_and_idempotence() {
    let mut fx = Fx::new();
    let mut a = fx.master("dr-a");
    let patients: Vec<_> = (0..20).map(legacy).collect();
    let results = a.master_populate(&patients).unwrap();
    assert!(results.iter().all(Result::is_ok));
    assert_eq!(a.local().unwrap().len(), 20);
    assert_eq!(fx.als.registry().len(), 20);

    for n in 0..20 {
        let view = a.lookup_patient(&identity(n).query()).unwrap();
        assert_eq!(
            Some(view.pid),
            a.local()
                .unwrap()
                .by_fiscal_code(&identity(n).fiscal_code)
                .map(|e| e.pid)
        );
        assert_eq!(view.notes[0].text, format!("history of patient {n}"));
    }

    let again = a.master_populate(&patients).unwrap();
    assert!(again.iter().all(|r| matches!(r, Err(Error::AlreadyExists(_)))));
    assert_eq!(fx.als.registry().len(), 20);
    assert_eq!(a.local().unwrap().len(), 20);
    assert_eq!(fx.als.store("main").unwrap().len(), 20);
}

#[test]
fn slave_sees_what_master_sees_but_cannot_recover() {
    let mut fx = Fx::new();
    let mut a = fx.master("dr-a");
    a.master_populate(&[legacy(1)]).unwrap();
    let mut s = fx.slave_of(&a);
    let from_master = a.lookup_patient(&identity(1).query()).unwrap();
    let from_slave = s.lookup_patient(&identity(1).query()).unwrap();
    assert_eq!(from_master, from_slave);
    assert!(s.local().is_none());
    assert!(matches!(
        s.regenerate_key(KeyLoss::PmdLoss),
        Err(Error::RequiresMasterTerminal)
    ));
    assert!(matches!(
        s.master_populate(&[legacy(2)]),
        Err(Error::RequiresMasterTerminal)
    ));
}

#[test]
fn wrong_key_reads_nothing() {
    let mut fx = Fx::new();
    let mut a = fx.master("dr-a");
    a.master_populate(&[legacy(1)]).unwrap();
    let wrong = fx.keys();
    let mut impostor = Terminal::slave("dr-a", Client::in_process(fx.als.clone()), wrong);
    impostor.login("pw").unwrap();
    assert!(matches!(
        impostor.lookup_patient(&identity(1).query()),
        Err(Error::NotFound(_))
    ));
}

#[test]
fn delegation_between_terminals() {
    let mut fx = Fx::new();
    let mut a = fx.master("dr-a");
    let mut b = fx.master("dr-b");
    a.master_populate(&[legacy(1), legacy(2)]).unwrap();
    let ids = a.offer_delegation(&[identity(1).query()], "dr-b").unwrap();
    assert!(matches!(
        a.finalize_accepted(ids[0], vec![]),
        Err(Error::InvalidStage(_))
    ));
    b.accept_offered(ids[0]).unwrap();
    a.finalize_accepted(ids[0], vec![]).unwrap();
    let grant = fx
        .als
        .registry()
        .get(RecordId(0))
        .unwrap()
        .grant_of("dr-b")
        .cloned()
        .unwrap();
    assert_eq!(grant.epid.layer_count(), 1);
    assert!(grant.epid.has_layer(b.keys().current().key_id()));

    let view = b.lookup_patient(&identity(1).query()).unwrap();
    assert_eq!(view.role, Role::Smd);
    assert_eq!(view.notes.len(), 1);
    assert!(matches!(
        b.lookup_patient(&identity(2).query()),
        Err(Error::NotAuthorized)
    ));
}

#[test]
fn pmd_key_loss_keeps_patient_set() {
    let mut fx = Fx::new();
    let mut a = fx.master("dr-a");
    let mut b = fx.master("dr-b");
    a.master_populate(&(0..10).map(legacy).collect::<Vec<_>>()).unwrap();
    delegate(&mut a, &mut b, 3);
    let old_keys = a.keys().clone();
    let before: Vec<_> = fx
        .als
        .registry()
        .records()
        .into_iter()
        .map(|(id, r)| (id, r.grants.len()))
        .collect();

    match a.regenerate_key(KeyLoss::PmdLoss).unwrap() {
        KeyRecovery::Pmd(r) => {
            assert_eq!(r.replaced, 10);
            assert!(r.errors.is_empty());
        }
        other => panic!("unexpected {other:?}"),
    }
    let after: Vec<_> = fx
        .als
        .registry()
        .records()
        .into_iter()
        .map(|(id, r)| (id, r.grants.len()))
        .collect();
    assert_eq!(before, after);
    for n in 0..10 {
        a.lookup_patient(&identity(n).query()).unwrap();
    }
    let mut stale = Terminal::slave("dr-a", Client::in_process(fx.als.clone()), old_keys);
    stale.login("pw").unwrap();
    for n in 0..10 {
        assert!(matches!(
            stale.lookup_patient(&identity(n).query()),
            Err(Error::NotFound(_))
        ));
    }
    b.lookup_patient(&identity(3).query()).unwrap();
}

#[test]
fn smd_key_loss_then_redelegation() {
    let mut fx = Fx::new();
    let mut a = fx.master("dr-a");
    let mut b = fx.master("dr-b");
    a.master_populate(&[legacy(1)]).unwrap();
    delegate(&mut a, &mut b, 1);
    assert_eq!(b.regenerate_key(KeyLoss::SmdLoss).unwrap(), KeyRecovery::Smd(1));
    assert!(matches!(
        b.lookup_patient(&identity(1).query()),
        Err(Error::NotAuthorized)
    ));
    let accepted = b.accept_all_offered().unwrap();
    assert_eq!(accepted.len(), 1);
    assert!(b.lookup_patient(&identity(1).query()).is_err());
    let done = a.finalize_all_accepted(vec![]).unwrap();
    assert!(done.iter().all(|(_, r)| r.is_ok()));
    b.lookup_patient(&identity(1).query()).unwrap();
}

#[test]
fn sync_merges_field_level() {
    let mut fx = Fx::new();
    let mut a = fx.master("dr-a");
    let mut b = fx.master("dr-b");
    a.master_populate(&[legacy(1)]).unwrap();
    delegate(&mut a, &mut b, 1);

    let first = a.sync_master().unwrap();
    assert_eq!((first.fetched, first.changed), (1, 1));
    let idle = a.sync_master().unwrap();
    assert_eq!((idle.fetched, idle.changed, idle.pushed), (1, 0, 0));

    let mut remote = RecordUpdate::default();
    remote.clear.insert("diastolic".into(), Some(FieldValue::Number(80.0)));
    b.update_patient_record(&identity(1).query(), "main", remote).unwrap();
    let pid = a.local().unwrap().by_fiscal_code(&identity(1).fiscal_code).unwrap().pid;
    let mut local = RecordUpdate::default();
    local.clear.insert("systolic".into(), Some(FieldValue::Number(135.0)));
    a.edit_local(&pid, "main", local).unwrap();
    assert!(a.local().unwrap().get(&pid).unwrap().is_dirty());

    let r = a.sync_master().unwrap();
    assert_eq!((r.pushed, r.changed), (1, 1));
    let entry = a.local().unwrap().get(&pid).unwrap();
    assert!(!entry.is_dirty());
    let fields = &entry.cache[0].clear_fields;
    assert_eq!(fields["diastolic"], FieldValue::Number(80.0));
    assert_eq!(fields["systolic"], FieldValue::Number(135.0));
}

#[test]
fn removal_from_master() {
    let mut fx = Fx::new();
    let mut a = fx.master("dr-a");
    let mut b = fx.master("dr-b");
    a.master_populate(&[legacy(1), legacy(2)]).unwrap();
    delegate(&mut a, &mut b, 1);
    assert!(matches!(
        b.remove_patient(&identity(1).query()),
        Err(Error::NotAuthorized)
    ));
    assert_eq!(fx.als.store("main").unwrap().len(), 2);
    a.remove_patient(&identity(1).query()).unwrap();
    assert_eq!(fx.als.registry().len(), 1);
    assert_eq!(fx.als.store("main").unwrap().len(), 1);
    assert_eq!(a.local().unwrap().len(), 1);
    assert!(matches!(
        b.lookup_patient(&identity(1).query()),
        Err(Error::NotFound(_))
    ));
}

#[test]
fn patient_flow_and_visibility() {
    let mut fx = Fx::new();
    let mut a = fx.master("dr-a");
    let mut b = fx.master("dr-b");
    a.master_populate(&[legacy(1)]).unwrap();
    delegate(&mut a, &mut b, 1);
    let mut p = fx.patient("pat-1", 1);

    p.patient_request_access().unwrap();
    assert_eq!(p.accept_all_offered().unwrap().len(), 1);
    assert_eq!(a.finalize_all_accepted(vec![]).unwrap().len(), 1);
    let view = p.patient_view().unwrap();
    assert_eq!(view.role, Role::Patient);
    assert_eq!(view.notes[0].text, "history of patient 1");

    p.patient_set_visibility("history", "dr-b", true).unwrap();
    assert!(b.lookup_patient(&identity(1).query()).unwrap().notes.is_empty());
    assert_eq!(a.lookup_patient(&identity(1).query()).unwrap().notes.len(), 1);
    p.patient_set_visibility("history", "dr-b", false).unwrap();
    assert_eq!(b.lookup_patient(&identity(1).query()).unwrap().notes.len(), 1);
}

#[test]
fn legacy_import_file_and_attach() {
    let mut fx = Fx::new();
    let store = fx.als.store("main").unwrap();
    store
        .import_legacy(vec![crate::ehr::LegacyRecord {
            native_key: "amb-0042".into(),
            payload: [("hba1c".to_string(), FieldValue::Number(6.1))].into(),
            pid: None,
        }])
        .unwrap();
    let mut a = fx.master("dr-a");
    let mut p = legacy(1);
    p.legacy = Some(LegacyLink {
        store: "main".into(),
        query: LegacyQuery {
            native_key: Some("amb-0042".into()),
            fields: Fields::new(),
        },
    });
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("import.jsonl");
    fs::write(&path, format!("{}\n\n", serde_json::to_string(&p).unwrap())).unwrap();
    a.master_populate_file(&path).unwrap()[0].as_ref().unwrap();
    let view = a.lookup_patient(&identity(1).query()).unwrap();
    assert_eq!(view.records[0].legacy.len(), 1);
}
