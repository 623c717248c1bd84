//! The protocol over a real loopback socket.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::sync::Arc;
use std::thread;

use chrono::NaiveDate;
use nusa_core::als::{Als, AlsConfig, Enrollment, PrincipalKind, StoreInsert};
use nusa_core::clock::SystemClock;
use nusa_core::crypto::{LayeredCiphertext, PatientIdentifier, SecretKey};
use nusa_core::ehr::MedicalRecord;
use nusa_core::protocol::{Client, Server};
use nusa_core::registry::Identity;
use nusa_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn deployment() -> (Arc<Als>, Vec<SecretKey>) {
    let als = Arc::new(
        Als::in_memory(
            AlsConfig {
                work_factor: 4,
                ..AlsConfig::default()
            },
            Arc::new(SystemClock),
        )
        .unwrap(),
    );
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let keys: Vec<SecretKey> = (0..8).map(|_| SecretKey::random(&mut rng)).collect();
    for (i, k) in keys.iter().enumerate() {
        als.enroll(Enrollment {
            principal_id: format!("dr-{i}"),
            kind: PrincipalKind::Md,
            credential: format!("pw-{i}"),
            key_id: Some(k.key_id()),
            fiscal_code: None,
        })
        .unwrap();
    }
    (als, keys)
}

fn identity(i: usize, j: usize) -> Identity {
    Identity {
        surname: format!("Conti{i}x{j}"),
        given_name: "Luca".into(),
        birthdate: NaiveDate::from_ymd_opt(1990, 1, 1 + j as u32).unwrap(),
        fiscal_code: format!("CNTLCU90A{i:02}{j:03}Z"),
    }
}

#[test]
fn handshake_then_requests() {
    let (als, _) = deployment();
    let server = Server::start(als, "127.0.0.1:0").unwrap();
    let stream = TcpStream::connect(server.local_addr()).unwrap();
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut writer = stream;
    let mut line = String::new();

    writeln!(writer, r#"{{"version":"nusa/1"}}"#).unwrap();
    reader.read_line(&mut line).unwrap();
    assert_eq!(line.trim(), r#"{"version":"nusa/1","status":"ok"}"#);

    line.clear();
    writeln!(
        writer,
        r#"{{"op":"authenticate","args":{{"principal_id":"dr-0","credential":"wrong"}}}}"#
    )
    .unwrap();
    reader.read_line(&mut line).unwrap();
    assert!(line.contains(r#""code":"AuthFailed""#), "{line}");

    line.clear();
    writeln!(writer, r#"{{"op":"no_such_op"}}"#).unwrap();
    reader.read_line(&mut line).unwrap();
    assert!(line.contains(r#""code":"ProtocolError""#), "{line}");
    server.shutdown();
}

#[test]
fn wrong_version_is_refused() {
    let (als, _) = deployment();
    let server = Server::start(als, "127.0.0.1:0").unwrap();
    let stream = TcpStream::connect(server.local_addr()).unwrap();
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut writer = stream;
    writeln!(writer, r#"{{"version":"nusa/0"}}"#).unwrap();
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    assert!(
        line.contains(r#""status":"error""#) && line.contains("ProtocolError"),
        "{line}"
    );
    line.clear();
    assert_eq!(reader.read_line(&mut line).unwrap(), 0);
}

#[test]
fn concurrent_doctors_populate_over_tcp() {
    let (als, keys) = deployment();
    let server = Server::start(als.clone(), "127.0.0.1:0").unwrap();
    let addr = server.local_addr();
    let handles: Vec<_> = keys
        .into_iter()
        .enumerate()
        .map(|(i, key)| {
            thread::spawn(move || {
                let mut client = Client::connect(addr).unwrap();
                client.login(&format!("dr-{i}"), &format!("pw-{i}")).unwrap();
                let mut rng = ChaCha20Rng::seed_from_u64(i as u64);
                for j in 0..25 {
                    let pid = PatientIdentifier::random(&mut rng);
                    let epid = LayeredCiphertext::plaintext(&pid).add_layer(&key, &mut rng).unwrap();
                    client
                        .populate(
                            identity(i, j),
                            epid,
                            vec![StoreInsert {
                                store: None,
                                record: MedicalRecord::new(pid),
                            }],
                        )
                        .unwrap();
                }
                // the same fiscal code from a second doctor loses
                let pid = PatientIdentifier::random(&mut rng);
                let epid = LayeredCiphertext::plaintext(&pid).add_layer(&key, &mut rng).unwrap();
                let clash = client.populate(identity((i + 1) % 8, 0), epid, vec![]);
                matches!(clash, Err(Error::AlreadyExists(_)))
            })
        })
        .collect();
    let clashes = handles.into_iter().map(|h| h.join().unwrap()).filter(|c| *c).count();
    assert_eq!(als.registry().len(), 200);
    assert_eq!(als.stores()[0].len(), 200);
    // each doctor's clash ran after its own 25 inserts; the target may or
    // may not exist yet, but never twice
    assert!(clashes <= 8);
    for (_, r) in als.registry().records() {
        assert_eq!(r.grants.len(), 1);
    }
}
