//! Append-only store of performance-annotated candidates.
//!
//! On disk the store is a line-delimited JSON log: one header line followed
//! by one record per line. The digest index is rebuilt on open. Nothing is
//! ever rewritten or deleted; inserts are appended in batches that become
//! visible all at once.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{ValidityStatus, Violation};
use crate::eval::{ErrorClass, EvalConfig};

pub const STORE_FORMAT: &str = "augloop-store";
pub const EXPORT_FORMAT: &str = "augloop-export";
pub const FORMAT_VERSION: u32 = 1;

/// Unix milliseconds. Always 0 on `wasm32-unknown-unknown`, which has no clock.
pub fn now_millis() -> u64 {
    #[cfg(target_arch = "wasm32")]
    {
        0
    }
    #[cfg(not(target_arch = "wasm32"))]
    {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Direct,
    Cot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Source {
    Brute { arity: u8 },
    Llm { epoch: u32, prompt_mode: PromptMode },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurationMode {
    /// Deduplicated by digest, error records rejected.
    Curated,
    /// Everything kept; error records score 0.0.
    Unfiltered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub record_id: u64,
    pub code: String,
    pub digest: String,
    pub source: Source,
    pub validity: ValidityStatus,
    #[serde(default)]
    pub violations: Vec<Violation>,
    /// `None` until evaluated.
    pub accuracy: Option<f64>,
    #[serde(default)]
    pub eval_error: Option<ErrorClass>,
    pub eval_config: EvalConfig,
    /// Unix milliseconds.
    pub created_at: u64,
}

impl CandidateRecord {
    pub fn is_valid(&self) -> bool {
        self.validity == ValidityStatus::Valid
    }

    /// Structurally invalid, or evaluated with an error.
    pub fn is_error(&self) -> bool {
        !self.is_valid() || self.eval_error.is_some()
    }
}

/// A record before the store assigns its id.
#[derive(Debug, Clone, PartialEq)]
pub struct NewRecord {
    pub code: String,
    pub digest: String,
    pub source: Source,
    pub validity: ValidityStatus,
    pub violations: Vec<Violation>,
    pub accuracy: Option<f64>,
    pub eval_error: Option<ErrorClass>,
    pub eval_config: EvalConfig,
    pub created_at: u64,
}

impl NewRecord {
    fn check(&self) -> Result<(), RepoError> {
        if let Some(a) = self.accuracy {
            if !(0.0..=1.0).contains(&a) {
                return Err(RepoError::InvalidRecord(format!("accuracy {a} outside [0, 1]")));
            }
            if self.eval_error.is_some() {
                return Err(RepoError::InvalidRecord("record has both accuracy and an evaluation error".into()));
            }
        }
        if (self.validity == ValidityStatus::Valid) != self.violations.is_empty() {
            return Err(RepoError::InvalidRecord("validity status disagrees with violations".into()));
        }
        Ok(())
    }

    fn is_error(&self) -> bool {
        self.validity != ValidityStatus::Valid || self.eval_error.is_some()
    }

    fn into_record(self, record_id: u64) -> CandidateRecord {
        CandidateRecord {
            record_id,
            code: self.code,
            digest: self.digest,
            source: self.source,
            validity: self.validity,
            violations: self.violations,
            accuracy: self.accuracy,
            eval_error: self.eval_error,
            eval_config: self.eval_config,
            created_at: self.created_at,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertOutcome {
    Stored(u64),
    Duplicate(u64),
    /// Error record offered in curated mode.
    Rejected,
}

#[derive(Debug, Error)]
pub enum RepoError {
    #[error("store I/O: {0}")]
    Io(#[from] io::Error),
    #[error("malformed store file at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("unsupported format `{format}` version {version}")]
    VersionMismatch { format: String, version: u32 },
    #[error("record id {0} already present")]
    IdConflict(u64),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    records: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceFilter {
    Brute,
    BruteArity(u8),
    Llm,
    LlmEpoch(u32),
}

impl SourceFilter {
    fn matches(self, s: &Source) -> bool {
        match (self, s) {
            (SourceFilter::Brute, Source::Brute { .. }) => true,
            (SourceFilter::BruteArity(a), Source::Brute { arity }) => a == *arity,
            (SourceFilter::Llm, Source::Llm { .. }) => true,
            (SourceFilter::LlmEpoch(e), Source::Llm { epoch, .. }) => e == *epoch,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct QueryFilter {
    /// Keeps records with accuracy strictly greater than this.
    pub min_accuracy: Option<f64>,
    pub source: Option<SourceFilter>,
    pub top_k: Option<usize>,
    pub valid_only: bool,
}

#[derive(Debug, Default)]
pub struct Repository {
    records: Vec<CandidateRecord>,
    /// digest -> earliest record id with that digest.
    digests: HashMap<String, u64>,
    by_id: HashMap<u64, usize>,
    next_id: u64,
    log: Option<PathBuf>,
}

fn write_header(out: &mut impl Write, format: &str, records: Option<usize>) -> io::Result<()> {
    let header = Header { format: format.into(), version: FORMAT_VERSION, records };
    serde_json::to_writer(&mut *out, &header)?;
    out.write_all(b"\n")
}

/// Parses a header line plus records, all-or-nothing.
fn parse_lines(text: &str, format: &str) -> Result<Vec<CandidateRecord>, RepoError> {
    let mut lines = text.split_inclusive('\n').enumerate();
    let (_, first) = lines.next().ok_or(RepoError::Malformed { line: 1, reason: "missing header".into() })?;
    let header: Header = serde_json::from_str(first.trim_end())
        .map_err(|e| RepoError::Malformed { line: 1, reason: e.to_string() })?;
    if header.format != format || header.version != FORMAT_VERSION {
        return Err(RepoError::VersionMismatch { format: header.format, version: header.version });
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        if !line.ends_with('\n') {
            return Err(RepoError::Malformed { line: i + 1, reason: "truncated line".into() });
        }
        let record: CandidateRecord = serde_json::from_str(line.trim_end())
            .map_err(|e| RepoError::Malformed { line: i + 1, reason: e.to_string() })?;
        records.push(record);
    }
    if let Some(n) = header.records {
        if n != records.len() {
            return Err(RepoError::Malformed {
                line: records.len() + 1,
                reason: format!("header announces {n} records, found {}", records.len()),
            });
        }
    }
    Ok(records)
}

impl Repository {
    pub fn in_memory() -> Self {
        Repository::default()
    }

    /// Opens (or creates) a log-backed store. A final line without a
    /// newline, left by an interrupted append, is dropped and truncated
    /// away; any other malformed line is an error.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, RepoError> {
        let path = path.as_ref().to_path_buf();
        let mut repo = Repository { log: Some(path.clone()), ..Default::default() };
        if !path.exists() || fs::metadata(&path)?.len() == 0 {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            let mut f = File::create(&path)?;
            write_header(&mut f, STORE_FORMAT, None)?;
            return Ok(repo);
        }
        let mut reader = BufReader::new(File::open(&path)?);
        let mut header_line = String::new();
        reader.read_line(&mut header_line)?;
        let header: Header = serde_json::from_str(header_line.trim_end())
            .map_err(|e| RepoError::Malformed { line: 1, reason: e.to_string() })?;
        if header.format != STORE_FORMAT || header.version != FORMAT_VERSION {
            return Err(RepoError::VersionMismatch { format: header.format, version: header.version });
        }
        let mut offset = header_line.len() as u64;
        let mut line_no = 1;
        loop {
            let mut line = String::new();
            let n = reader.read_line(&mut line)?;
            if n == 0 {
                break;
            }
            line_no += 1;
            if !line.ends_with('\n') {
                log::warn!("dropping incomplete trailing line {line_no} of {}", path.display());
                OpenOptions::new().write(true).open(&path)?.set_len(offset)?;
                break;
            }
            let record: CandidateRecord = serde_json::from_str(line.trim_end())
                .map_err(|e| RepoError::Malformed { line: line_no, reason: e.to_string() })?;
            repo.index(record)?;
            offset += n as u64;
        }
        Ok(repo)
    }

    fn index(&mut self, record: CandidateRecord) -> Result<(), RepoError> {
        if self.by_id.contains_key(&record.record_id) {
            return Err(RepoError::IdConflict(record.record_id));
        }
        self.digests.entry(record.digest.clone()).or_insert(record.record_id);
        self.by_id.insert(record.record_id, self.records.len());
        self.next_id = self.next_id.max(record.record_id + 1);
        self.records.push(record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[CandidateRecord] {
        &self.records
    }

    pub fn get(&self, id: u64) -> Option<&CandidateRecord> {
        self.by_id.get(&id).map(|&i| &self.records[i])
    }

    pub fn find_digest(&self, digest: &str) -> Option<u64> {
        self.digests.get(digest).copied()
    }

    pub fn log_path(&self) -> Option<&Path> {
        self.log.as_deref()
    }

    pub fn insert(&mut self, record: NewRecord, mode: CurationMode) -> Result<InsertOutcome, RepoError> {
        Ok(self.insert_batch(vec![record], mode)?[0])
    }

    /// Inserts a batch atomically: either every stored record becomes
    /// visible (and is appended to the log) or none does.
    pub fn insert_batch(&mut self, batch: Vec<NewRecord>, mode: CurationMode) -> Result<Vec<InsertOutcome>, RepoError> {
        for r in &batch {
            r.check()?;
        }
        let mut outcomes = Vec::with_capacity(batch.len());
        let mut staged: Vec<CandidateRecord> = Vec::new();
        let mut staged_digests: HashMap<String, u64> = HashMap::new();
        let mut next_id = self.next_id;
        for mut r in batch {
            match mode {
                CurationMode::Curated => {
                    if r.is_error() {
                        outcomes.push(InsertOutcome::Rejected);
                        continue;
                    }
                    if let Some(existing) =
                        self.digests.get(&r.digest).or_else(|| staged_digests.get(&r.digest)).copied()
                    {
                        outcomes.push(InsertOutcome::Duplicate(existing));
                        continue;
                    }
                }
                CurationMode::Unfiltered => {
                    if r.is_error() {
                        r.accuracy = Some(0.0);
                    }
                }
            }
            staged_digests.entry(r.digest.clone()).or_insert(next_id);
            outcomes.push(InsertOutcome::Stored(next_id));
            staged.push(r.into_record(next_id));
            next_id += 1;
        }
        if staged.is_empty() {
            return Ok(outcomes);
        }
        if let Some(path) = &self.log {
            let mut buf = Vec::new();
            for r in &staged {
                serde_json::to_writer(&mut buf, r).map_err(io::Error::other)?;
                buf.push(b'\n');
            }
            let mut f = OpenOptions::new().append(true).open(path)?;
            let before = f.metadata()?.len();
            if let Err(e) = f.write_all(&buf).and_then(|_| f.flush()) {
                let _ = f.set_len(before);
                return Err(e.into());
            }
        }
        for r in staged {
            self.index(r)?;
        }
        Ok(outcomes)
    }

    /// Records matching every given predicate, best accuracy first, ties by
    /// ascending id. Unevaluated records sort last.
    pub fn query(&self, filter: &QueryFilter) -> Vec<&CandidateRecord> {
        let mut hits: Vec<&CandidateRecord> = self
            .records
            .iter()
            .filter(|r| !filter.valid_only || !r.is_error())
            .filter(|r| filter.source.is_none_or(|s| s.matches(&r.source)))
            .filter(|r| filter.min_accuracy.is_none_or(|m| r.accuracy.is_some_and(|a| a > m)))
            .collect();
        hits.sort_by(|a, b| {
            let ka = a.accuracy.unwrap_or(f64::NEG_INFINITY);
            let kb = b.accuracy.unwrap_or(f64::NEG_INFINITY);
            kb.total_cmp(&ka).then(a.record_id.cmp(&b.record_id))
        });
        if let Some(k) = filter.top_k {
            hits.truncate(k);
        }
        hits
    }

    /// Export text: header with record count, then one record per line.
    pub fn export_string(&self) -> String {
        let mut buf = Vec::new();
        write_header(&mut buf, EXPORT_FORMAT, Some(self.records.len())).expect("writing to memory");
        for r in &self.records {
            serde_json::to_writer(&mut buf, r).expect("records serialize");
            buf.push(b'\n');
        }
        String::from_utf8(buf).expect("JSON is UTF-8")
    }

    pub fn export(&self, path: impl AsRef<Path>) -> Result<usize, RepoError> {
        fs::write(path, self.export_string())?;
        Ok(self.records.len())
    }

    /// Imports an export, preserving record ids. The file is parsed in full
    /// before anything is added, so a malformed file leaves the store as is.
    pub fn import_str(&mut self, text: &str) -> Result<usize, RepoError> {
        let records = parse_lines(text, EXPORT_FORMAT)?;
        let mut seen = std::collections::HashSet::new();
        for r in &records {
            if self.by_id.contains_key(&r.record_id) || !seen.insert(r.record_id) {
                return Err(RepoError::IdConflict(r.record_id));
            }
        }
        let n = records.len();
        if let Some(path) = &self.log {
            let mut buf = Vec::new();
            for r in &records {
                serde_json::to_writer(&mut buf, r).map_err(io::Error::other)?;
                buf.push(b'\n');
            }
            OpenOptions::new().append(true).open(path)?.write_all(&buf)?;
        }
        for r in records {
            self.index(r)?;
        }
        Ok(n)
    }

    pub fn import(&mut self, path: impl AsRef<Path>) -> Result<usize, RepoError> {
        let text = fs::read_to_string(path)?;
        self.import_str(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::canonicalize;

    fn new_record(code: &str, acc: Option<f64>) -> NewRecord {
        NewRecord {
            code: code.into(),
            digest: canonicalize(code).unwrap().digest,
            source: Source::Brute { arity: 1 },
            validity: ValidityStatus::Valid,
            violations: vec![],
            accuracy: acc,
            eval_error: None,
            eval_config: EvalConfig::default(),
            created_at: 1,
        }
    }

    fn syntax_error(code: &str) -> NewRecord {
        NewRecord { accuracy: None, eval_error: Some(ErrorClass::SyntaxError), ..new_record(code, None) }
    }

    #[test]
    fn first_insert() {
        let mut repo = Repository::in_memory();
        assert_eq!(repo.insert(new_record("a", Some(0.5)), CurationMode::Curated).unwrap(), InsertOutcome::Stored(0));
        assert_eq!(repo.len(), 1);
    }

    #[test]
    fn curated_duplicates() {
        let mut repo = Repository::in_memory();
        repo.insert(new_record("a", Some(0.5)), CurationMode::Curated).unwrap();
        assert_eq!(repo.insert(new_record("a", Some(0.5)), CurationMode::Curated).unwrap(), InsertOutcome::Duplicate(0));
        assert_eq!(repo.len(), 1);
        // Duplicates inside one batch are caught too.
        let out = repo
            .insert_batch(vec![new_record("b", Some(0.1)), new_record("b  ", Some(0.1))], CurationMode::Curated)
            .unwrap();
        assert_eq!(out, vec![InsertOutcome::Stored(1), InsertOutcome::Duplicate(1)]);
    }

    #[test]
    fn error_records_by_mode() {
        let mut repo = Repository::in_memory();
        assert_eq!(repo.insert(syntax_error("x("), CurationMode::Curated).unwrap(), InsertOutcome::Rejected);
        assert!(repo.is_empty());
        assert_eq!(repo.insert(syntax_error("x("), CurationMode::Unfiltered).unwrap(), InsertOutcome::Stored(0));
        assert_eq!(repo.get(0).unwrap().accuracy, Some(0.0));
        assert_eq!(repo.get(0).unwrap().eval_error, Some(ErrorClass::SyntaxError));
        // Unfiltered keeps duplicates.
        repo.insert(syntax_error("x("), CurationMode::Unfiltered).unwrap();
        assert_eq!(repo.len(), 2);
    }

    #[test]
    fn rejects_inconsistent_records() {
        let mut repo = Repository::in_memory();
        let bad = new_record("a", Some(1.5));
        assert!(matches!(repo.insert(bad, CurationMode::Unfiltered), Err(RepoError::InvalidRecord(_))));
        let bad = NewRecord { validity: ValidityStatus::Invalid, ..new_record("a", None) };
        assert!(repo.insert(bad, CurationMode::Unfiltered).is_err());
        // One bad record spoils the whole batch.
        let out = repo.insert_batch(vec![new_record("ok", Some(0.2)), new_record("b", Some(-0.1))], CurationMode::Unfiltered);
        assert!(out.is_err());
        assert!(repo.is_empty());
    }

    #[test]
    fn query_threshold_is_strict() {
        let mut repo = Repository::in_memory();
        for (i, a) in [0.5, 0.55, 0.6].into_iter().enumerate() {
            repo.insert(new_record(&format!("c{i}"), Some(a)), CurationMode::Curated).unwrap();
        }
        let hits = repo.query(&QueryFilter { min_accuracy: Some(0.55), ..Default::default() });
        assert_eq!(hits.iter().map(|r| r.accuracy.unwrap()).collect::<Vec<_>>(), vec![0.6]);
        assert!(repo.query(&QueryFilter { top_k: Some(0), ..Default::default() }).is_empty());
    }

    #[test]
    fn query_orders_and_filters() {
        let mut repo = Repository::in_memory();
        repo.insert(new_record("a", Some(0.4)), CurationMode::Unfiltered).unwrap();
        repo.insert(new_record("b", Some(0.7)), CurationMode::Unfiltered).unwrap();
        repo.insert(new_record("c", Some(0.4)), CurationMode::Unfiltered).unwrap();
        repo.insert(new_record("d", None), CurationMode::Unfiltered).unwrap();
        repo.insert(syntax_error("e("), CurationMode::Unfiltered).unwrap();
        let mut llm = new_record("f", Some(0.9));
        llm.source = Source::Llm { epoch: 2, prompt_mode: PromptMode::Direct };
        repo.insert(llm, CurationMode::Unfiltered).unwrap();

        let ids = |f: QueryFilter| repo.query(&f).iter().map(|r| r.record_id).collect::<Vec<_>>();
        assert_eq!(ids(QueryFilter::default()), vec![5, 1, 0, 2, 4, 3]);
        assert_eq!(ids(QueryFilter { valid_only: true, ..Default::default() }), vec![5, 1, 0, 2, 3]);
        assert_eq!(ids(QueryFilter { source: Some(SourceFilter::Llm), ..Default::default() }), vec![5]);
        assert_eq!(ids(QueryFilter { source: Some(SourceFilter::LlmEpoch(1)), ..Default::default() }), Vec::<u64>::new());
        assert_eq!(ids(QueryFilter { source: Some(SourceFilter::BruteArity(1)), top_k: Some(2), ..Default::default() }), vec![1, 0]);
    }

    #[test]
    fn top_k_over_large_store() {
        let mut repo = Repository::in_memory();
        let batch: Vec<_> = (0..6000).map(|i| new_record(&format!("c{i}"), Some(((i * 7919) % 6000) as f64 / 6000.0))).collect();
        repo.insert_batch(batch, CurationMode::Curated).unwrap();
        let top = repo.query(&QueryFilter { top_k: Some(150), ..Default::default() });
        assert_eq!(top.len(), 150);
        let mut all: Vec<f64> = repo.records().iter().map(|r| r.accuracy.unwrap()).collect();
        all.sort_by(|a, b| b.total_cmp(a));
        assert_eq!(top.iter().map(|r| r.accuracy.unwrap()).collect::<Vec<_>>(), all[..150].to_vec());
    }

    #[test]
    fn log_persists_and_reopens() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        {
            let mut repo = Repository::open(&path).unwrap();
            repo.insert(new_record("a", Some(0.3)), CurationMode::Curated).unwrap();
            repo.insert(new_record("b", Some(0.6)), CurationMode::Curated).unwrap();
        }
        let mut repo = Repository::open(&path).unwrap();
        assert_eq!(repo.len(), 2);
        assert_eq!(repo.insert(new_record("a", Some(0.3)), CurationMode::Curated).unwrap(), InsertOutcome::Duplicate(0));
        assert_eq!(repo.insert(new_record("c", Some(0.3)), CurationMode::Curated).unwrap(), InsertOutcome::Stored(2));
    }

    #[test]
    fn torn_tail_is_dropped_on_open() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        {
            let mut repo = Repository::open(&path).unwrap();
            repo.insert(new_record("a", Some(0.3)), CurationMode::Curated).unwrap();
        }
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"record_id\":1,\"co").unwrap();
        drop(f);
        let repo = Repository::open(&path).unwrap();
        assert_eq!(repo.len(), 1);
        assert!(fs::read_to_string(&path).unwrap().ends_with("}\n"));
    }

    #[test]
    fn export_import_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut repo = Repository::in_memory();
        for i in 0..100 {
            let acc = if i % 10 == 0 { None } else { Some(i as f64 / 137.0) };
            repo.insert(new_record(&format!("line\n\"{i}\"\t#"), acc), CurationMode::Unfiltered).unwrap();
        }
        let path = dir.path().join("export.jsonl");
        assert_eq!(repo.export(&path).unwrap(), 100);
        let mut back = Repository::in_memory();
        assert_eq!(back.import(&path).unwrap(), 100);
        assert_eq!(back.records(), repo.records());
        assert_eq!(back.import(&path).unwrap_err().to_string(), RepoError::IdConflict(0).to_string());
    }

    #[test]
    fn empty_export() {
        let text = Repository::in_memory().export_string();
        let mut back = Repository::in_memory();
        assert_eq!(back.import_str(&text).unwrap(), 0);
    }

    #[test]
    fn truncated_import_leaves_store_untouched() {
        let mut repo = Repository::in_memory();
        for i in 0..10 {
            repo.insert(new_record(&format!("c{i}"), Some(0.1)), CurationMode::Curated).unwrap();
        }
        let text = repo.export_string();
        let cut = text.len() - text.lines().last().unwrap().len() / 2 - 1;
        let mut target = Repository::in_memory();
        target.insert(new_record("keep", Some(0.2)), CurationMode::Curated).unwrap();
        let before = target.records().to_vec();
        let err = target.import_str(&text[..cut]).unwrap_err();
        assert!(matches!(err, RepoError::Malformed { .. }), "{err}");
        assert_eq!(target.records(), &before[..]);

        // Cut exactly at a line boundary: caught by the header count.
        let boundary = text.rfind("\n{").unwrap() + 1;
        assert!(matches!(Repository::in_memory().import_str(&text[..boundary]), Err(RepoError::Malformed { .. })));
    }

    #[test]
    fn version_mismatch() {
        let text = "{\"format\":\"augloop-export\",\"version\":99,\"records\":0}\n";
        assert!(matches!(Repository::in_memory().import_str(text), Err(RepoError::VersionMismatch { .. })));
    }
}
