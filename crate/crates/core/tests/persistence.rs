//! A deployment closed and reopened from its state directory.

use std::sync::Arc;

use chrono::{Duration, NaiveDate, TimeZone, Utc};
use nusa_core::als::{Als, AlsConfig, Enrollment, PrincipalKind};
use nusa_core::clock::ManualClock;
use nusa_core::crypto::SecretKey;
use nusa_core::ehr::FieldValue;
use nusa_core::protocol::Client;
use nusa_core::registry::{Identity, ValidityWindow};
use nusa_core::terminal::{KeyStore, LegacyPatient, LocalDatabase, Terminal};
use nusa_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn identity() -> Identity {
    Identity {
        surname: "Galli".into(),
        given_name: "Sara".into(),
        birthdate: NaiveDate::from_ymd_opt(1988, 11, 30).unwrap(),
        fiscal_code: "GLLSRA88S70L219K".into(),
    }
}

#[test]
fn state_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("deployment");
    let local_path = dir.path().join("dr-a-local.jsonl");
    let keys_path = dir.path().join("dr-a-keys.json");
    let clock = ManualClock::new(Utc.with_ymd_and_hms(2026, 1, 10, 12, 0, 0).unwrap());
    let config = AlsConfig {
        work_factor: 16,
        seed: Some(4),
        ..AlsConfig::default()
    };
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let ka = KeyStore::new(SecretKey::random(&mut rng));
    let kb = KeyStore::new(SecretKey::random(&mut rng));
    ka.save(&keys_path, "local secret", &mut rng).unwrap();

    {
        let als = Arc::new(Als::open(&state, config.clone(), Arc::new(clock.clone())).unwrap());
        for (id, k) in [("dr-a", &ka), ("dr-b", &kb)] {
            als.enroll(Enrollment {
                principal_id: id.into(),
                kind: PrincipalKind::Md,
                credential: "pw".into(),
                key_id: Some(k.current().key_id()),
                fiscal_code: None,
            })
            .unwrap();
        }
        let mut a = Terminal::master(
            "dr-a",
            Client::in_process(als.clone()),
            ka.clone(),
            LocalDatabase::open(&local_path).unwrap(),
        );
        a.login("pw").unwrap();
        let mut p = LegacyPatient {
            identity: identity(),
            clear: Default::default(),
            notes: vec![],
            store: None,
            legacy: None,
        };
        p.clear.insert("ldl".into(), FieldValue::Number(130.0));
        a.master_populate(&[p]).unwrap()[0].as_ref().unwrap();
        let mut b = Terminal::slave("dr-b", Client::in_process(als.clone()), kb.clone());
        b.login("pw").unwrap();
        let t = a.offer_delegation(&[identity().query()], "dr-b").unwrap()[0];
        b.accept_offered(t).unwrap();
        let now = als.now();
        a.finalize_accepted(t, vec![ValidityWindow::new(now, now + Duration::days(1)).unwrap()])
            .unwrap();
    }

    let als = Arc::new(Als::open(&state, config, Arc::new(clock.clone())).unwrap());
    let keys = KeyStore::load(&keys_path, "local secret").unwrap();
    assert!(matches!(KeyStore::load(&keys_path, "guess"), Err(Error::AuthFailed)));
    let mut a = Terminal::master(
        "dr-a",
        Client::in_process(als.clone()),
        keys,
        LocalDatabase::open(&local_path).unwrap(),
    );
    a.login("pw").unwrap();
    let view = a.lookup_patient(&identity().query()).unwrap();
    assert_eq!(view.records[0].clear_fields["ldl"], FieldValue::Number(130.0));
    assert_eq!(a.local().unwrap().len(), 1);

    let mut b = Terminal::slave("dr-b", Client::in_process(als.clone()), kb);
    b.login("pw").unwrap();
    assert_eq!(b.lookup_patient(&identity().query()).unwrap().pid, view.pid);

    clock.advance(Duration::days(2));
    b.login("pw").unwrap();
    assert!(matches!(
        b.lookup_patient(&identity().query()),
        Err(Error::NotAuthorized)
    ));
    assert_eq!(als.sweep().unwrap().grants_removed, 1);
    drop(als);
    let als = Als::open(&state, AlsConfig::default(), Arc::new(clock)).unwrap();
    assert_eq!(als.registry().records()[0].1.grants.len(), 1);
}
