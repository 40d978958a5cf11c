//! Advisory sessions and their JSON-file store.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::analytics::{risk_aversion, RiskAnalytics};
use crate::elicitation::{
    collect_choices, elicit_all, AnswerEntry, AnswerSheet, ElicitSettings, ElicitedUtility, Estimator, ScenarioSet,
};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::lottery::ItemSet;
use crate::questionnaire::{Questionnaire, QuestionnaireFile};

/// Pipeline stage; only ever moves forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Questioning,
    Answered,
    Elicited,
    Recommended,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredUtility {
    #[serde(flatten)]
    pub utility: ElicitedUtility,
    #[serde(flatten)]
    pub analytics: RiskAnalytics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationLine {
    pub asset: String,
    pub amount: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub estimator: Estimator,
    pub budget: f64,
    pub caps: Vec<f64>,
    pub allocation: Vec<AllocationLine>,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub id: String,
    pub version: u64,
    pub status: SessionStatus,
    pub item_set: String,
    pub questionnaire: QuestionnaireFile,
    /// Seed of a random questionnaire, recorded for replay.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub answers: Vec<AnswerEntry>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub utilities: BTreeMap<Estimator, StoredUtility>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub portfolio: Option<Recommendation>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

impl SessionRecord {
    pub fn new(id: String, item_set: String, questionnaire: QuestionnaireFile, seed: Option<u64>) -> Self {
        let now = Utc::now();
        SessionRecord {
            id,
            version: 0,
            status: SessionStatus::Questioning,
            item_set,
            questionnaire,
            seed,
            answers: Vec::new(),
            utilities: BTreeMap::new(),
            portfolio: None,
            created_at: now,
            updated_at: now,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.answers.len() > self.questionnaire.pairs.len() {
            return Err(Error::validation("more answers than questions"));
        }
        if !self.utilities.is_empty() && self.status < SessionStatus::Elicited {
            return Err(Error::validation("utilities stored before elicitation"));
        }
        if self.portfolio.is_some() && self.status < SessionStatus::Recommended {
            return Err(Error::validation("portfolio stored before recommendation"));
        }
        Ok(())
    }
}

/// Rebuilds the answer sheet of a fully answered session.
pub fn answer_sheet(record: &SessionRecord, items: &ItemSet) -> Result<AnswerSheet> {
    let q = Questionnaire::from_file(&record.questionnaire, items)?;
    let choices = collect_choices(&record.answers, q.len())?;
    AnswerSheet::new(q, choices)
}

/// Runs all three estimators on a session's stored inputs, on the questionnaire grid with
/// upper bound at the item set's largest outcome.
pub fn elicit_session(
    record: &SessionRecord,
    items: &ItemSet,
    scen: &ScenarioSet,
) -> Result<BTreeMap<Estimator, StoredUtility>> {
    let sheet = answer_sheet(record, items)?;
    let grid = sheet.questionnaire.breakpoints(items.max_outcome())?;
    let nominal = elicit_all(&sheet, &grid, scen, &ElicitSettings::default())?;
    Ok(nominal
        .iter()
        .map(|e| {
            let analytics = risk_aversion(&e.utility);
            (e.estimator, StoredUtility { utility: e.clone(), analytics })
        })
        .collect())
}

pub trait SessionStore: Send + Sync {
    /// Stores a new record at version 1.
    fn create(&self, record: SessionRecord) -> Result<SessionRecord>;
    fn get(&self, id: &str) -> Result<SessionRecord>;
    /// Replaces the record if `record.version` is the stored version; bumps the version.
    fn update(&self, record: SessionRecord) -> Result<SessionRecord>;
}

/// One pretty-printed JSON file per session under a directory.
pub struct FileSessionStore {
    dir: PathBuf,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl FileSessionStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(FileSessionStore { dir, locks: Mutex::new(HashMap::new()) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, id: &str) -> Result<PathBuf> {
        if !valid_id(id) {
            return Err(Error::NotFound(format!("session {id}")));
        }
        Ok(self.dir.join(format!("{id}.json")))
    }

    fn lock(&self, id: &str) -> Arc<Mutex<()>> {
        let mut locks = self.locks.lock().unwrap_or_else(|e| e.into_inner());
        locks.entry(id.to_string()).or_default().clone()
    }

    fn write(&self, record: &SessionRecord) -> Result<()> {
        let mut text = serde_json::to_string_pretty(record)?;
        text.push('\n');
        write_atomic(&self.path(&record.id)?, text.as_bytes())
    }
}

impl SessionStore for FileSessionStore {
    fn create(&self, mut record: SessionRecord) -> Result<SessionRecord> {
        record.validate()?;
        let path = self.path(&record.id)?;
        let lock = self.lock(&record.id);
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
        if path.exists() {
            return Err(Error::Conflict(format!("session {} already exists", record.id)));
        }
        record.version = 1;
        self.write(&record)?;
        Ok(record)
    }

    fn get(&self, id: &str) -> Result<SessionRecord> {
        let path = self.path(id)?;
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::NotFound(format!("session {id}"))),
            Err(e) => return Err(e.into()),
        };
        serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.display().to_string(), message: e.to_string() })
    }

    fn update(&self, mut record: SessionRecord) -> Result<SessionRecord> {
        record.validate()?;
        let lock = self.lock(&record.id);
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
        let current = self.get(&record.id)?;
        if current.version != record.version {
            return Err(Error::Conflict(format!(
                "session {} is at version {}, update was based on {}",
                record.id, current.version, record.version
            )));
        }
        if record.status < current.status {
            return Err(Error::validation(format!(
                "session status cannot move from {:?} back to {:?}",
                current.status, record.status
            )));
        }
        record.version += 1;
        record.updated_at = Utc::now();
        self.write(&record)?;
        Ok(record)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::questionnaire::{PairRef, Provenance};

    fn record(id: &str) -> SessionRecord {
        SessionRecord::new(
            id.into(),
            "items10".into(),
            QuestionnaireFile {
                pairs: vec![PairRef { first: "I1".into(), second: "I2".into() }],
                provenance: Provenance::Random,
                objective: None,
            },
            Some(3),
        )
    }

    #[test]
    fn create_get_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let store = FileSessionStore::open(dir.path()).unwrap();
        let created = store.create(record("abc")).unwrap();
        assert_eq!(created.version, 1);
        assert_eq!(store.get("abc").unwrap(), created);
        assert!(matches!(store.create(record("abc")), Err(Error::Conflict(_))));
        assert!(matches!(store.get("nope"), Err(Error::NotFound(_))));
        assert!(matches!(store.get("../x"), Err(Error::NotFound(_))));
    }

    #[test]
    fn stale_update_conflicts() {
        let dir = tempfile::tempdir().unwrap();
        let store = FileSessionStore::open(dir.path()).unwrap();
        let r = store.create(record("s1")).unwrap();
        let mut a = r.clone();
        a.status = SessionStatus::Answered;
        let a = store.update(a).unwrap();
        assert_eq!(a.version, 2);
        assert!(matches!(store.update(r), Err(Error::Conflict(_))));
    }

    #[test]
    fn status_cannot_regress() {
        let dir = tempfile::tempdir().unwrap();
        let store = FileSessionStore::open(dir.path()).unwrap();
        let mut r = store.create(record("s2")).unwrap();
        r.status = SessionStatus::Answered;
        let mut r = store.update(r).unwrap();
        r.status = SessionStatus::Questioning;
        assert!(store.update(r).unwrap_err().is_validation());
    }
}
