use super::Als;
use crate::error::{Error, Result};
use crate::protocol::{Operation, Request, Response};

impl Als {
    /// Decodes one request line and encodes the response line.
    pub fn handle_line(&self, line: &str) -> String {
        let response = match serde_json::from_str::<Request>(line) {
            Ok(req) => self.handle(&req),
            Err(e) => Response::error(&Error::Protocol(format!("malformed request: {e}"))),
        };
        serde_json::to_string(&response).expect("responses serialize")
    }

    pub fn handle(&self, request: &Request) -> Response {
        match request.operation() {
            Ok(op) => self.dispatch(request.token.as_deref(), op),
            Err(e) => Response::error(&e),
        }
    }

    fn dispatch(&self, token: Option<&str>, op: Operation) -> Response {
        if let Operation::Authenticate {
            principal_id,
            credential,
        } = &op
        {
            return Response::from_result(self.authenticate(principal_id, credential));
        }
        let Some(t) = token else {
            return Response::error(&Error::AuthFailed);
        };
        fn ok<T: serde::Serialize>(r: Result<T>) -> Response {
            Response::from_result(r)
        }
        match op {
            Operation::Authenticate { .. } => unreachable!("handled above"),
            Operation::Renew => ok(self.renew(t)),
            Operation::Logout => ok(self.logout(t)),
            Operation::DeploymentInfo => ok(self.deployment_info(t)),
            Operation::RegisterKey { key_id } => ok(self.register_key(t, key_id)),
            Operation::Populate {
                identity,
                epid,
                records,
            } => ok(self.populate(t, identity, epid, records)),
            Operation::AttachLegacy { store, query, pid } => ok(self.attach_legacy(t, &store, &query, pid)),
            Operation::QueryPatientEpid { query } => ok(self.query_patient_epid(t, &query)),
            Operation::ListPatients => ok(self.list_patients(t)),
            Operation::OwnEpid => ok(self.own_epid(t)),
            Operation::FetchRecords { pid } => ok(self.fetch_records(t, &pid)),
            Operation::UpdateRecord { store, pid, update } => ok(self.update_record(t, &store, &pid, &update)),
            Operation::ReplaceRecord { store, pid, record } => ok(self.replace_record(t, &store, &pid, record)),
            Operation::KeywordSearch { terms } => ok(self.keyword_search(t, &terms)),
            Operation::Stats { field, statistic } => ok(self.stats(t, &field, statistic)),
            Operation::TicketStatus { ticket } => ok(self.ticket_status(t, ticket)),
            Operation::Inbox => ok(self.inbox(t)),
            Operation::PendingApprovals => ok(self.pending_approvals(t)),
            Operation::DelegateOffer { patients, smd_id } => ok(self.delegate_offer(t, &patients, &smd_id)),
            Operation::AcceptDelegation { ticket, eepid } => ok(self.accept_delegation(t, ticket, eepid)),
            Operation::CompleteDelegation { ticket, epid, windows } => {
                ok(self.complete_delegation(t, ticket, epid, windows))
            }
            Operation::RevokeDelegation { patient, smd_id } => ok(self.revoke_delegation(t, &patient, &smd_id)),
            Operation::PatientAccessRequest => ok(self.patient_access_request(t)),
            Operation::AcceptAccess { ticket, eepid } => ok(self.accept_access(t, ticket, eepid)),
            Operation::CompleteAccess { ticket, epid } => ok(self.complete_access(t, ticket, epid)),
            Operation::RemovePatientData { pid } => ok(self.remove_patient_data(t, &pid)),
            Operation::RemovePatientEntry { epid } => ok(self.remove_patient_entry(t, &epid)),
            Operation::RecoverPmdKey { new_key, replacements } => ok(self.recover_pmd_key(t, new_key, &replacements)),
            Operation::RecoverSmdKey { new_key } => ok(self.recover_smd_key(t, new_key)),
            Operation::ClaimRecords { pid, proof } => ok(self.claim_records(t, &pid, &proof)),
            Operation::SetObfuscationVisibility {
                pid,
                field,
                md_id,
                hidden,
                proof,
            } => ok(self.set_obfuscation_visibility(t, &pid, &field, &md_id, hidden, &proof)),
        }
    }
}
