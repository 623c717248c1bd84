//! Newline-delimited JSON protocol between terminals and the server.
//!
//! A connection opens with `{"version":"nusa/1"}` from the client, answered
//! by the server. After that every line is a request
//! `{"token", "op", "args"}` answered by one response line,
//! `{"status":"ok","payload":..}` or `{"status":"error","error":{code,message}}`.

use std::io::{BufRead, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::als::{
    Als, DeploymentInfo, EpidReplacement, PatientEpid, RecoveryReport, SearchHit, Session, StoreInsert, Ticket,
    TicketId,
};
use crate::crypto::{KeyId, LayeredCiphertext, PatientIdentifier};
use crate::ehr::{LegacyQuery, MedicalRecord, RecordUpdate, RecordView, Statistic};
use crate::error::{Error, ErrorCode, Result};
use crate::registry::{Identity, IdentityQuery, RecordId, ValidityWindow};

pub const PROTOCOL_VERSION: &str = "nusa/1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hello {
    pub version: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HelloReply {
    pub version: String,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<WireError>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Error,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireError {
    pub code: ErrorCode,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", content = "args", rename_all = "snake_case")]
pub enum Operation {
    Authenticate {
        principal_id: String,
        credential: String,
    },
    Renew,
    Logout,
    DeploymentInfo,
    RegisterKey {
        key_id: KeyId,
    },
    Populate {
        identity: Identity,
        epid: LayeredCiphertext,
        #[serde(default)]
        records: Vec<StoreInsert>,
    },
    AttachLegacy {
        store: String,
        query: LegacyQuery,
        pid: PatientIdentifier,
    },
    QueryPatientEpid {
        query: IdentityQuery,
    },
    ListPatients,
    OwnEpid,
    FetchRecords {
        pid: PatientIdentifier,
    },
    UpdateRecord {
        store: String,
        pid: PatientIdentifier,
        update: RecordUpdate,
    },
    ReplaceRecord {
        store: String,
        pid: PatientIdentifier,
        record: MedicalRecord,
    },
    KeywordSearch {
        terms: Vec<String>,
    },
    Stats {
        field: String,
        statistic: Statistic,
    },
    TicketStatus {
        ticket: TicketId,
    },
    Inbox,
    PendingApprovals,
    DelegateOffer {
        patients: Vec<IdentityQuery>,
        smd_id: String,
    },
    AcceptDelegation {
        ticket: TicketId,
        eepid: LayeredCiphertext,
    },
    CompleteDelegation {
        ticket: TicketId,
        epid: LayeredCiphertext,
        #[serde(default)]
        windows: Vec<ValidityWindow>,
    },
    RevokeDelegation {
        patient: IdentityQuery,
        smd_id: String,
    },
    PatientAccessRequest,
    AcceptAccess {
        ticket: TicketId,
        eepid: LayeredCiphertext,
    },
    CompleteAccess {
        ticket: TicketId,
        epid: LayeredCiphertext,
    },
    RemovePatientData {
        pid: PatientIdentifier,
    },
    RemovePatientEntry {
        epid: LayeredCiphertext,
    },
    RecoverPmdKey {
        new_key: KeyId,
        replacements: Vec<EpidReplacement>,
    },
    RecoverSmdKey {
        new_key: KeyId,
    },
    ClaimRecords {
        pid: PatientIdentifier,
        #[serde(with = "crate::hexser::array")]
        proof: [u8; 32],
    },
    SetObfuscationVisibility {
        pid: PatientIdentifier,
        field: String,
        md_id: String,
        hidden: bool,
        #[serde(with = "crate::hexser::array")]
        proof: [u8; 32],
    },
}

impl Operation {
    pub fn name(&self) -> String {
        match serde_json::to_value(self) {
            Ok(Value::Object(m)) => m.get("op").and_then(Value::as_str).unwrap_or("?").to_owned(),
            _ => "?".to_owned(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Request {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
    pub op: String,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub args: Value,
}

impl Request {
    pub fn new(token: Option<&str>, operation: &Operation) -> Self {
        let mut value = serde_json::to_value(operation).expect("operations serialize");
        let map = value.as_object_mut().expect("operations serialize to objects");
        Self {
            token: token.map(str::to_owned),
            op: map
                .remove("op")
                .and_then(|v| v.as_str().map(str::to_owned))
                .unwrap_or_default(),
            args: map.remove("args").unwrap_or(Value::Null),
        }
    }

    pub fn operation(&self) -> Result<Operation> {
        let parse = |with_args: bool| {
            let mut map = serde_json::Map::new();
            map.insert("op".into(), Value::String(self.op.clone()));
            if with_args {
                map.insert("args".into(), self.args.clone());
            }
            serde_json::from_value::<Operation>(Value::Object(map))
        };
        let empty = self.args.is_null() || self.args.as_object().is_some_and(|m| m.is_empty());
        match parse(!self.args.is_null()) {
            Ok(op) => Ok(op),
            Err(_) if empty => parse(false).map_err(|e| Error::Protocol(format!("{}: {e}", self.op))),
            Err(e) => Err(Error::Protocol(format!("{}: {e}", self.op))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<WireError>,
}

impl Response {
    pub fn ok(payload: impl Serialize) -> Self {
        match serde_json::to_value(payload) {
            Ok(v) => Self {
                status: Status::Ok,
                payload: Some(v),
                error: None,
            },
            Err(e) => Self::error(&Error::Protocol(format!("payload: {e}"))),
        }
    }

    pub fn error(err: &Error) -> Self {
        Self {
            status: Status::Error,
            payload: None,
            error: Some(WireError {
                code: err.code(),
                message: err.detail(),
            }),
        }
    }

    pub fn from_result<T: Serialize>(r: Result<T>) -> Self {
        match r {
            Ok(v) => Self::ok(v),
            Err(e) => Self::error(&e),
        }
    }

    pub fn into_result<T: DeserializeOwned>(self) -> Result<T> {
        match self.status {
            Status::Ok => serde_json::from_value(self.payload.unwrap_or(Value::Null))
                .map_err(|e| Error::Protocol(format!("payload: {e}"))),
            Status::Error => {
                let err = self
                    .error
                    .ok_or_else(|| Error::Protocol("error response without an error".into()))?;
                Err(Error::from_code(err.code, err.message))
            }
        }
    }
}

/// One request, one response.
pub trait Transport: Send {
    fn round_trip(&mut self, request: &Request) -> Result<Response>;
}

/// Talks to a server in the same process, still through the JSON encoding.
#[derive(Clone, Debug)]
pub struct InProcess {
    als: Arc<Als>,
}

impl InProcess {
    pub fn new(als: Arc<Als>) -> Self {
        Self { als }
    }
}

impl Transport for InProcess {
    fn round_trip(&mut self, request: &Request) -> Result<Response> {
        let line = serde_json::to_string(request).map_err(|e| Error::Protocol(e.to_string()))?;
        let reply = self.als.handle_line(&line);
        serde_json::from_str(&reply).map_err(|e| Error::Protocol(e.to_string()))
    }
}

#[derive(Debug)]
pub struct TcpTransport {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

fn read_json_line<T: DeserializeOwned>(reader: &mut impl BufRead) -> Result<T> {
    let mut line = String::new();
    if reader.read_line(&mut line)? == 0 {
        return Err(Error::Protocol("connection closed".into()));
    }
    serde_json::from_str(&line).map_err(|e| Error::Protocol(e.to_string()))
}

fn write_json_line(writer: &mut impl Write, value: &impl Serialize) -> Result<()> {
    let mut line = serde_json::to_string(value).map_err(|e| Error::Protocol(e.to_string()))?;
    line.push('\n');
    writer.write_all(line.as_bytes())?;
    writer.flush()?;
    Ok(())
}

impl TcpTransport {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let mut writer = TcpStream::connect(addr)?;
        let mut reader = BufReader::new(writer.try_clone()?);
        write_json_line(
            &mut writer,
            &Hello {
                version: PROTOCOL_VERSION.into(),
            },
        )?;
        let reply: HelloReply = read_json_line(&mut reader)?;
        if reply.status != Status::Ok {
            let msg = reply.error.map(|e| e.message).unwrap_or_default();
            return Err(Error::Protocol(format!("handshake refused: {msg}")));
        }
        Ok(Self { reader, writer })
    }
}

impl Transport for TcpTransport {
    fn round_trip(&mut self, request: &Request) -> Result<Response> {
        write_json_line(&mut self.writer, request)?;
        read_json_line(&mut self.reader)
    }
}

fn serve_connection(als: &Als, stream: TcpStream) -> Result<()> {
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let hello: Result<Hello> = read_json_line(&mut reader);
    let refusal = match hello {
        Ok(h) if h.version == PROTOCOL_VERSION => None,
        Ok(h) => Some(format!("unsupported version {}", h.version)),
        Err(e) => Some(e.to_string()),
    };
    write_json_line(
        &mut writer,
        &HelloReply {
            version: PROTOCOL_VERSION.into(),
            status: if refusal.is_none() { Status::Ok } else { Status::Error },
            error: refusal.clone().map(|message| WireError {
                code: ErrorCode::ProtocolError,
                message,
            }),
        },
    )?;
    if refusal.is_some() {
        return Ok(());
    }
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut reply = als.handle_line(&line);
        reply.push('\n');
        writer.write_all(reply.as_bytes())?;
        writer.flush()?;
    }
}

/// A loopback server, one thread per connection.
#[derive(Debug)]
pub struct Server {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl Server {
    pub fn start(als: Arc<Als>, addr: impl ToSocketAddrs) -> Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let accept = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let als = als.clone();
                std::thread::spawn(move || {
                    let peer = stream.try_clone();
                    if serve_connection(&als, stream).is_err() {
                        if let Ok(p) = peer {
                            let _ = p.shutdown(Shutdown::Both);
                        }
                    }
                });
            }
        });
        Ok(Self {
            addr,
            stop,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting; open connections finish on their own.
    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    /// Blocks until the accept loop ends.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if self.accept.is_some() {
            self.stop_accepting();
        }
    }
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn round_trip(&mut self, request: &Request) -> Result<Response> {
        (**self).round_trip(request)
    }
}

/// Typed calls over any transport; remembers the session token.
pub struct Client {
    transport: Box<dyn Transport>,
    session: Option<Session>,
}

impl std::fmt::Debug for Client {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Client")
            .field("principal", &self.session.as_ref().map(|s| &s.principal_id))
            .finish()
    }
}

impl Client {
    pub fn new(transport: impl Transport + 'static) -> Self {
        Self {
            transport: Box::new(transport),
            session: None,
        }
    }

    pub fn in_process(als: Arc<Als>) -> Self {
        Self::new(InProcess::new(als))
    }

    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        Ok(Self::new(TcpTransport::connect(addr)?))
    }

    pub fn session(&self) -> Option<&Session> {
        self.session.as_ref()
    }

    pub fn principal_id(&self) -> Option<&str> {
        self.session.as_ref().map(|s| s.principal_id.as_str())
    }

    pub fn call<T: DeserializeOwned>(&mut self, op: &Operation) -> Result<T> {
        let token = self.session.as_ref().map(|s| s.token.as_str());
        let request = Request::new(token, op);
        self.transport.round_trip(&request)?.into_result()
    }

    pub fn login(&mut self, principal_id: &str, credential: &str) -> Result<Session> {
        let session: Session = self.call(&Operation::Authenticate {
            principal_id: principal_id.into(),
            credential: credential.into(),
        })?;
        self.session = Some(session.clone());
        Ok(session)
    }

    pub fn renew(&mut self) -> Result<Session> {
        let session: Session = self.call(&Operation::Renew)?;
        self.session = Some(session.clone());
        Ok(session)
    }

    pub fn logout(&mut self) -> Result<()> {
        self.call::<()>(&Operation::Logout)?;
        self.session = None;
        Ok(())
    }

    pub fn deployment_info(&mut self) -> Result<DeploymentInfo> {
        self.call(&Operation::DeploymentInfo)
    }

    pub fn register_key(&mut self, key_id: KeyId) -> Result<()> {
        self.call(&Operation::RegisterKey { key_id })
    }

    pub fn populate(
        &mut self,
        identity: Identity,
        epid: LayeredCiphertext,
        records: Vec<StoreInsert>,
    ) -> Result<RecordId> {
        self.call(&Operation::Populate {
            identity,
            epid,
            records,
        })
    }

    pub fn attach_legacy(&mut self, store: &str, query: LegacyQuery, pid: PatientIdentifier) -> Result<usize> {
        self.call(&Operation::AttachLegacy {
            store: store.into(),
            query,
            pid,
        })
    }

    pub fn query_patient_epid(&mut self, query: IdentityQuery) -> Result<PatientEpid> {
        self.call(&Operation::QueryPatientEpid { query })
    }

    pub fn list_patients(&mut self) -> Result<Vec<PatientEpid>> {
        self.call(&Operation::ListPatients)
    }

    pub fn own_epid(&mut self) -> Result<PatientEpid> {
        self.call(&Operation::OwnEpid)
    }

    pub fn fetch_records(&mut self, pid: PatientIdentifier) -> Result<Vec<RecordView>> {
        self.call(&Operation::FetchRecords { pid })
    }

    pub fn update_record(&mut self, store: &str, pid: PatientIdentifier, update: RecordUpdate) -> Result<()> {
        self.call(&Operation::UpdateRecord {
            store: store.into(),
            pid,
            update,
        })
    }

    pub fn replace_record(&mut self, store: &str, pid: PatientIdentifier, record: MedicalRecord) -> Result<()> {
        self.call(&Operation::ReplaceRecord {
            store: store.into(),
            pid,
            record,
        })
    }

    pub fn keyword_search(&mut self, terms: Vec<String>) -> Result<Vec<SearchHit>> {
        self.call(&Operation::KeywordSearch { terms })
    }

    pub fn stats(&mut self, field: &str, statistic: Statistic) -> Result<f64> {
        self.call(&Operation::Stats {
            field: field.into(),
            statistic,
        })
    }

    pub fn ticket_status(&mut self, ticket: TicketId) -> Result<Ticket> {
        self.call(&Operation::TicketStatus { ticket })
    }

    pub fn inbox(&mut self) -> Result<Vec<Ticket>> {
        self.call(&Operation::Inbox)
    }

    pub fn pending_approvals(&mut self) -> Result<Vec<Ticket>> {
        self.call(&Operation::PendingApprovals)
    }

    pub fn delegate_offer(&mut self, patients: Vec<IdentityQuery>, smd_id: &str) -> Result<Vec<TicketId>> {
        self.call(&Operation::DelegateOffer {
            patients,
            smd_id: smd_id.into(),
        })
    }

    pub fn accept_delegation(&mut self, ticket: TicketId, eepid: LayeredCiphertext) -> Result<()> {
        self.call(&Operation::AcceptDelegation { ticket, eepid })
    }

    pub fn complete_delegation(
        &mut self,
        ticket: TicketId,
        epid: LayeredCiphertext,
        windows: Vec<ValidityWindow>,
    ) -> Result<()> {
        self.call(&Operation::CompleteDelegation { ticket, epid, windows })
    }

    pub fn revoke_delegation(&mut self, patient: IdentityQuery, smd_id: &str) -> Result<()> {
        self.call(&Operation::RevokeDelegation {
            patient,
            smd_id: smd_id.into(),
        })
    }

    pub fn patient_access_request(&mut self) -> Result<TicketId> {
        self.call(&Operation::PatientAccessRequest)
    }

    pub fn accept_access(&mut self, ticket: TicketId, eepid: LayeredCiphertext) -> Result<()> {
        self.call(&Operation::AcceptAccess { ticket, eepid })
    }

    pub fn complete_access(&mut self, ticket: TicketId, epid: LayeredCiphertext) -> Result<()> {
        self.call(&Operation::CompleteAccess { ticket, epid })
    }

    pub fn remove_patient_data(&mut self, pid: PatientIdentifier) -> Result<usize> {
        self.call(&Operation::RemovePatientData { pid })
    }

    pub fn remove_patient_entry(&mut self, epid: LayeredCiphertext) -> Result<()> {
        self.call(&Operation::RemovePatientEntry { epid })
    }

    pub fn recover_pmd_key(&mut self, new_key: KeyId, replacements: Vec<EpidReplacement>) -> Result<RecoveryReport> {
        self.call(&Operation::RecoverPmdKey { new_key, replacements })
    }

    pub fn recover_smd_key(&mut self, new_key: KeyId) -> Result<usize> {
        self.call(&Operation::RecoverSmdKey { new_key })
    }

    pub fn claim_records(&mut self, pid: PatientIdentifier, proof: [u8; 32]) -> Result<()> {
        self.call(&Operation::ClaimRecords { pid, proof })
    }

    pub fn set_obfuscation_visibility(
        &mut self,
        pid: PatientIdentifier,
        field: &str,
        md_id: &str,
        hidden: bool,
        proof: [u8; 32],
    ) -> Result<()> {
        self.call(&Operation::SetObfuscationVisibility {
            pid,
            field: field.into(),
            md_id: md_id.into(),
            hidden,
            proof,
        })
    }
}
