//! Append-only JSON-lines persistence for the relay registry.
//!
//! The relay's state is tiny and write-rare (provisioning and contact
//! registration), so a replayed op log is all the durability it needs.
//! Sends are intentionally not persisted: the relay keeps no message
//! history.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use callmesh_core::id::{AuthToken, ContactToken, UserId};
use callmesh_core::time::Millis;

use crate::service::RelayService;

#[derive(Debug, thiserror::Error)]
pub enum PersistError {
    #[error("store io: {0}")]
    Io(#[from] std::io::Error),
    #[error("store line {0} is malformed: {1}")]
    Malformed(usize, serde_json::Error),
    #[error("store line {0} replays to an invalid state: {1}")]
    Replay(usize, String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum StoreOp {
    Provision {
        user: UserId,
        auth: AuthToken,
    },
    Register {
        auth: AuthToken,
        contact: ContactToken,
        at: Millis,
    },
}

/// Handle to the op log file.
pub struct FileStore {
    path: PathBuf,
}

impl FileStore {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, PersistError> {
        let path = path.as_ref().to_path_buf();
        OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self { path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, op: &StoreOp) -> Result<(), PersistError> {
        let mut f = OpenOptions::new().append(true).open(&self.path)?;
        let line = serde_json::to_string(op).expect("ops serialize");
        writeln!(f, "{line}")?;
        Ok(())
    }

    /// Rebuild a service from the log. Malformed lines are an error, not a
    /// skip: a corrupt registry must not come up half-empty.
    pub fn replay(&self, svc: &mut RelayService) -> Result<usize, PersistError> {
        let f = std::fs::File::open(&self.path)?;
        let mut applied = 0;
        for (idx, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let op: StoreOp =
                serde_json::from_str(&line).map_err(|e| PersistError::Malformed(idx + 1, e))?;
            match op {
                StoreOp::Provision { user, auth } => {
                    svc.provision(user, auth)
                        .map_err(|e| PersistError::Replay(idx + 1, e.to_string()))?;
                }
                StoreOp::Register { auth, contact, at } => {
                    svc.register_contact(&auth, contact, at)
                        .map_err(|e| PersistError::Replay(idx + 1, e.to_string()))?;
                }
            }
            applied += 1;
        }
        Ok(applied)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_through_the_log() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("registry.jsonl");
        let store = FileStore::open(&path).unwrap();

        let user = UserId::new("alice@office.com").unwrap();
        let auth = AuthToken::new("123e4567-e89b-12d3-a456-426614174000").unwrap();
        store
            .append(&StoreOp::Provision {
                user: user.clone(),
                auth: auth.clone(),
            })
            .unwrap();
        store
            .append(&StoreOp::Register {
                auth: auth.clone(),
                contact: ContactToken::new("tokA").unwrap(),
                at: 5_000,
            })
            .unwrap();

        let mut svc = RelayService::new();
        let store2 = FileStore::open(&path).unwrap();
        assert_eq!(store2.replay(&mut svc).unwrap(), 2);
        assert_eq!(svc.login(&auth).unwrap(), &user);
        assert_eq!(svc.instance_of(&auth).unwrap().as_str(), "czb8ff");
    }

    #[test]
    fn malformed_lines_fail_replay() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("registry.jsonl");
        std::fs::write(&path, "{\"op\":\"provision\",\"user\":\"a@b\",\"auth\":\"123e4567-e89b-12d3-a456-426614174000\"}\nnot json\n").unwrap();
        let store = FileStore::open(&path).unwrap();
        let mut svc = RelayService::new();
        match store.replay(&mut svc) {
            Err(PersistError::Malformed(2, _)) => {}
            other => panic!("expected malformed line 2, got {other:?}"),
        }
    }
}
