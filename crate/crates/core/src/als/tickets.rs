//! Staged hand-off tickets for delegations and patient access requests.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::crypto::LayeredCiphertext;
use crate::error::{Error, Result};
use crate::journal::Journal;
use crate::registry::{RecordId, ValidityWindow};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TicketId(pub u64);

impl fmt::Display for TicketId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "T{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TicketKind {
    /// PMD hands a patient to a secondary doctor.
    Delegation,
    /// A patient asks for access to their own records.
    PatientAccess,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TicketStage {
    Offered,
    Accepted,
    Completed,
}

impl TicketStage {
    fn successor(self) -> Option<TicketStage> {
        match self {
            TicketStage::Offered => Some(TicketStage::Accepted),
            TicketStage::Accepted => Some(TicketStage::Completed),
            TicketStage::Completed => None,
        }
    }

    pub fn is_pending(self) -> bool {
        self != TicketStage::Completed
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ticket {
    pub id: TicketId,
    pub kind: TicketKind,
    pub pmd_id: String,
    /// The SMD for delegations, the patient for access requests.
    pub addressee_id: String,
    pub record_id: RecordId,
    pub stage: TicketStage,
    /// EPID while offered, EEPID once accepted.
    pub payload: LayeredCiphertext,
    /// Windows of the grant this ticket replaces, if any.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prior_windows: Vec<ValidityWindow>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
enum TicketEvent {
    Put(Ticket),
    Dropped(TicketId),
}

/// Linearizable through the owner's mutex; every stage change goes through
/// [`TicketBook::advance`].
#[derive(Debug)]
pub struct TicketBook {
    next_id: u64,
    tickets: BTreeMap<TicketId, Ticket>,
    journal: Journal<TicketEvent>,
}

impl TicketBook {
    pub fn in_memory() -> Self {
        Self {
            next_id: 1,
            tickets: BTreeMap::new(),
            journal: Journal::in_memory(),
        }
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let (journal, events) = Journal::open(path)?;
        let mut book = Self {
            next_id: 1,
            tickets: BTreeMap::new(),
            journal,
        };
        for e in events {
            book.apply(e);
        }
        Ok(book)
    }

    fn apply(&mut self, event: TicketEvent) {
        match event {
            TicketEvent::Put(t) => {
                self.next_id = self.next_id.max(t.id.0 + 1);
                self.tickets.insert(t.id, t);
            }
            TicketEvent::Dropped(id) => {
                self.tickets.remove(&id);
            }
        }
    }

    fn commit(&mut self, event: TicketEvent) -> Result<()> {
        self.journal.append(&event)?;
        self.apply(event);
        Ok(())
    }

    pub fn offer(
        &mut self,
        kind: TicketKind,
        pmd_id: &str,
        addressee_id: &str,
        record_id: RecordId,
        epid: LayeredCiphertext,
        prior_windows: Vec<ValidityWindow>,
    ) -> Result<TicketId> {
        if self.pending_for(kind, record_id, addressee_id).is_some() {
            return Err(Error::DuplicateTicket(format!(
                "{addressee_id} already has a pending ticket for {record_id}"
            )));
        }
        let id = TicketId(self.next_id);
        self.commit(TicketEvent::Put(Ticket {
            id,
            kind,
            pmd_id: pmd_id.to_owned(),
            addressee_id: addressee_id.to_owned(),
            record_id,
            stage: TicketStage::Offered,
            payload: epid,
            prior_windows,
        }))?;
        Ok(id)
    }

    pub fn get(&self, id: TicketId) -> Result<&Ticket> {
        self.tickets
            .get(&id)
            .ok_or_else(|| Error::not_found(format!("ticket {id}")))
    }

    pub fn pending_for(&self, kind: TicketKind, record_id: RecordId, addressee_id: &str) -> Option<&Ticket> {
        self.tickets.values().find(|t| {
            t.kind == kind && t.record_id == record_id && t.addressee_id == addressee_id && t.stage.is_pending()
        })
    }

    /// Moves a ticket exactly one stage forward, swapping in `payload` when given.
    pub fn advance(&mut self, id: TicketId, to: TicketStage, payload: Option<LayeredCiphertext>) -> Result<()> {
        let ticket = self.get(id)?;
        if ticket.stage.successor() != Some(to) {
            return Err(Error::InvalidStage(format!(
                "ticket {id} is {:?}, cannot move to {to:?}",
                ticket.stage
            )));
        }
        let mut next = ticket.clone();
        next.stage = to;
        if let Some(p) = payload {
            next.payload = p;
        }
        self.commit(TicketEvent::Put(next))
    }

    pub fn drop_ticket(&mut self, id: TicketId) -> Result<()> {
        self.get(id)?;
        self.commit(TicketEvent::Dropped(id))
    }

    pub fn drop_where(&mut self, pred: impl Fn(&Ticket) -> bool) -> Result<usize> {
        let ids: Vec<TicketId> = self.tickets.values().filter(|t| pred(t)).map(|t| t.id).collect();
        for id in &ids {
            self.commit(TicketEvent::Dropped(*id))?;
        }
        Ok(ids.len())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Ticket> {
        self.tickets.values()
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::crypto::PatientIdentifier;

    fn ct() -> LayeredCiphertext {
        LayeredCiphertext::plaintext(&PatientIdentifier::from_bytes([1; 16]))
    }

    #[test]
    fn stages_move_strictly_forward() {
        let mut book = TicketBook::in_memory();
        let id = book
            .offer(TicketKind::Delegation, "pmd", "smd", RecordId(0), ct(), vec![])
            .unwrap();
        assert!(matches!(
            book.advance(id, TicketStage::Completed, None),
            Err(Error::InvalidStage(_))
        ));
        book.advance(id, TicketStage::Accepted, None).unwrap();
        assert!(matches!(
            book.advance(id, TicketStage::Accepted, None),
            Err(Error::InvalidStage(_))
        ));
        book.advance(id, TicketStage::Completed, None).unwrap();
        assert!(matches!(
            book.advance(id, TicketStage::Offered, None),
            Err(Error::InvalidStage(_))
        ));
    }

    #[test]
    fn duplicate_pending_offer_is_refused() {
        let mut book = TicketBook::in_memory();
        let id = book
            .offer(TicketKind::Delegation, "pmd", "smd", RecordId(3), ct(), vec![])
            .unwrap();
        assert!(matches!(
            book.offer(TicketKind::Delegation, "pmd", "smd", RecordId(3), ct(), vec![]),
            Err(Error::DuplicateTicket(_))
        ));
        book.offer(TicketKind::PatientAccess, "pmd", "smd", RecordId(3), ct(), vec![])
            .unwrap();
        book.advance(id, TicketStage::Accepted, None).unwrap();
        book.advance(id, TicketStage::Completed, None).unwrap();
        book.offer(TicketKind::Delegation, "pmd", "smd", RecordId(3), ct(), vec![])
            .unwrap();
    }

    #[test]
    fn survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tickets.jsonl");
        {
            let mut book = TicketBook::open(&path).unwrap();
            let a = book
                .offer(TicketKind::Delegation, "p", "s", RecordId(0), ct(), vec![])
                .unwrap();
            book.offer(TicketKind::Delegation, "p", "s2", RecordId(0), ct(), vec![])
                .unwrap();
            book.advance(a, TicketStage::Accepted, None).unwrap();
            book.drop_ticket(a).unwrap();
        }
        let mut book = TicketBook::open(&path).unwrap();
        assert_eq!(book.iter().count(), 1);
        let next = book
            .offer(TicketKind::Delegation, "p", "s3", RecordId(0), ct(), vec![])
            .unwrap();
        assert_eq!(next, TicketId(3));
    }

    proptest! {
        #[test]
        fn completed_always_has_accepted_predecessor(steps in proptest::collection::vec((0u8..3, 0u8..4), 1..80)) {
            let mut book = TicketBook::in_memory();
            let mut history: BTreeMap<TicketId, Vec<TicketStage>> = BTreeMap::new();
            for (action, slot) in steps {
                match action {
                    0 => {
                        if let Ok(id) = book.offer(TicketKind::Delegation, "p", &format!("s{slot}"), RecordId(0), ct(), vec![]) {
                            history.insert(id, vec![TicketStage::Offered]);
                        }
                    }
                    _ => {
                        let to = if action == 1 { TicketStage::Accepted } else { TicketStage::Completed };
                        let ids: Vec<TicketId> = history.keys().copied().collect();
                        if let Some(id) = ids.get(slot as usize % ids.len().max(1)) {
                            if book.advance(*id, to, None).is_ok() {
                                history.get_mut(id).unwrap().push(to);
                            }
                        }
                    }
                }
            }
            for (id, stages) in history {
                prop_assert_eq!(book.get(id).unwrap().stage, *stages.last().unwrap());
                let expected = [TicketStage::Offered, TicketStage::Accepted, TicketStage::Completed];
                prop_assert_eq!(&stages[..], &expected[..stages.len()]);
            }
        }
    }
}
