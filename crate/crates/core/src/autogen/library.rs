use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use super::synth::{script_tool, TestReport};
use super::{tokens, GenerationError};
use crate::config::RegistrySnapshot;
use crate::toolkit::{builtin, ToolCatalog, ToolDef, ToolSource, ToolkitProvider};

const INDEX_FILE: &str = "library.json";
const SOURCE_DIR: &str = "tools";
const STOPWORDS: &[&str] = &["a", "an", "and", "by", "for", "from", "in", "of", "on", "or", "the", "to", "with"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CreatedBy {
    Builtin,
    Workflow,
    MetaAgent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisRecord {
    /// Relative to the library directory.
    pub source_file: String,
    pub self_test: String,
    pub report: TestReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryEntry {
    pub toolkit: String,
    pub def: ToolDef,
    pub tags: Vec<String>,
    pub created_by: CreatedBy,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthesis: Option<SynthesisRecord>,
}

impl LibraryEntry {
    /// `toolkit.tool`, or just the tool name for synthesized tools, which
    /// live in a toolkit of their own name.
    pub fn qualified_name(&self) -> String {
        if self.def.source == ToolSource::Synthesized && self.toolkit == self.def.name {
            self.def.name.clone()
        } else {
            format!("{}.{}", self.toolkit, self.def.name)
        }
    }

    fn index_tokens(&self) -> BTreeSet<String> {
        let mut out: BTreeSet<String> = tokens(&self.qualified_name()).into_iter().collect();
        out.extend(tokens(&self.def.description));
        for t in &self.tags {
            out.extend(tokens(t));
        }
        out
    }

    /// Tokens of the name and tags, the ones capability coverage looks at.
    pub(crate) fn label_tokens(&self) -> BTreeSet<String> {
        let mut out: BTreeSet<String> = tokens(&self.qualified_name()).into_iter().collect();
        for t in &self.tags {
            out.extend(tokens(t));
        }
        out
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct IndexFile {
    entries: Vec<LibraryEntry>,
    #[serde(default)]
    failures: Vec<TestReport>,
}

/// Searchable set of tools available to generated agents.
#[derive(Debug, Clone, Default)]
pub struct ToolLibrary {
    entries: Vec<LibraryEntry>,
    sources: BTreeMap<String, String>,
    failures: Vec<TestReport>,
    dir: Option<PathBuf>,
}

pub type SharedLibrary = Arc<RwLock<ToolLibrary>>;

fn builtin_tags(toolkit: &str, tool: &str) -> &'static [&'static str] {
    match (toolkit, tool) {
        (builtin::SEARCH, "search") => &["web", "web-search", "search", "lookup"],
        (builtin::SEARCH, "web_qa") => &["web", "page", "read", "question-answering"],
        (builtin::PYTHON_EXECUTOR, _) => &["python", "code", "code-execution", "compute"],
        (builtin::SHELL, "run_command") => &["shell", "command", "terminal"],
        (builtin::SHELL, _) => &["shell", "state", "environment"],
        (builtin::FILE, "read_file") => &["file", "read", "filesystem"],
        (builtin::FILE, _) => &["file", "write", "save", "filesystem"],
        (builtin::TIME, _) => &["time", "date", "clock", "today"],
        (builtin::MATH_EVAL, _) => &["math", "arithmetic", "calculate", "expression"],
        (builtin::ARXIV, "search_papers") => &["arxiv", "paper", "papers", "paper-search", "academic", "literature"],
        (builtin::ARXIV, _) => &["arxiv", "paper", "papers", "pdf", "download", "paper-download"],
        _ => &[],
    }
}

impl ToolLibrary {
    pub fn new() -> Self {
        Self::default()
    }

    /// One entry per tool of every toolkit in `catalog`.
    pub fn with_builtins(catalog: &ToolCatalog) -> Self {
        let mut lib = Self::new();
        for p in catalog.providers() {
            for def in &p.defs {
                lib.entries.push(LibraryEntry {
                    toolkit: p.name.clone(),
                    def: def.clone(),
                    tags: builtin_tags(&p.name, &def.name).iter().map(|s| s.to_string()).collect(),
                    created_by: CreatedBy::Builtin,
                    created_at: DateTime::<Utc>::UNIX_EPOCH,
                    synthesis: None,
                });
            }
        }
        lib
    }

    /// Load the library stored in `dir`, or seed one from `catalog` if the
    /// directory holds none yet. Later registrations are written through.
    pub fn open(dir: impl Into<PathBuf>, catalog: &ToolCatalog) -> Result<Self, GenerationError> {
        let dir = dir.into();
        let index = dir.join(INDEX_FILE);
        let mut lib = if index.exists() {
            let text = std::fs::read_to_string(&index)
                .map_err(|e| GenerationError::Library(format!("{}: {e}", index.display())))?;
            let file: IndexFile = serde_json::from_str(&text)
                .map_err(|e| GenerationError::Library(format!("{}: {e}", index.display())))?;
            let mut sources = BTreeMap::new();
            for e in &file.entries {
                if let Some(s) = &e.synthesis {
                    let p = dir.join(&s.source_file);
                    let src = std::fs::read_to_string(&p)
                        .map_err(|err| GenerationError::Library(format!("{}: {err}", p.display())))?;
                    sources.insert(e.def.name.clone(), src);
                }
            }
            Self {
                entries: file.entries,
                sources,
                failures: file.failures,
                dir: None,
            }
        } else {
            Self::with_builtins(catalog)
        };
        lib.dir = Some(dir);
        lib.save()?;
        Ok(lib)
    }

    pub fn into_shared(self) -> SharedLibrary {
        Arc::new(RwLock::new(self))
    }

    pub fn entries(&self) -> &[LibraryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn failures(&self) -> &[TestReport] {
        &self.failures
    }

    pub fn source_of(&self, tool: &str) -> Option<&str> {
        self.sources.get(tool).map(String::as_str)
    }

    /// Whether `name` is taken as a tool or toolkit name.
    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|e| e.def.name == name || e.toolkit == name)
    }

    pub fn synthesized(&self) -> impl Iterator<Item = &LibraryEntry> {
        self.entries.iter().filter(|e| e.def.source == ToolSource::Synthesized)
    }

    /// Add an entry. Synthesized tools need `source` and a passing test record.
    pub fn register(&mut self, entry: LibraryEntry, source: Option<String>) -> Result<(), GenerationError> {
        if self.contains(&entry.def.name) || self.contains(&entry.toolkit) {
            return Err(GenerationError::Library(format!(
                "'{}' is already in the library",
                entry.qualified_name()
            )));
        }
        if entry.def.source == ToolSource::Synthesized {
            let passed = entry.synthesis.as_ref().is_some_and(|s| s.report.passed);
            if !passed || source.is_none() {
                return Err(GenerationError::Library(format!(
                    "synthesized tool '{}' has no passing self-test",
                    entry.def.name
                )));
            }
        }
        if let Some(src) = source {
            self.sources.insert(entry.def.name.clone(), src);
        }
        self.entries.push(entry);
        self.save()
    }

    pub fn record_failure(&mut self, report: TestReport) {
        self.failures.push(report);
        if let Err(e) = self.save() {
            tracing::warn!(error = %e, "could not persist synthesis failure");
        }
    }

    fn save(&self) -> Result<(), GenerationError> {
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        let io = |p: &Path, e: std::io::Error| GenerationError::Library(format!("{}: {e}", p.display()));
        let src_dir = dir.join(SOURCE_DIR);
        std::fs::create_dir_all(&src_dir).map_err(|e| io(&src_dir, e))?;
        for e in &self.entries {
            if let (Some(rec), Some(src)) = (&e.synthesis, self.sources.get(&e.def.name)) {
                let p = dir.join(&rec.source_file);
                std::fs::write(&p, src).map_err(|err| io(&p, err))?;
            }
        }
        let file = IndexFile {
            entries: self.entries.clone(),
            failures: self.failures.clone(),
        };
        let p = dir.join(INDEX_FILE);
        let text = serde_json::to_string_pretty(&file).expect("library serializes");
        std::fs::write(&p, text + "\n").map_err(|e| io(&p, e))
    }

    /// Up to `k` entries ranked by how many query words they share with
    /// their name, description and tags. Entries sharing none are left out.
    pub fn search_tools(&self, query: &str, k: usize) -> Vec<LibraryEntry> {
        let q: BTreeSet<String> = tokens(query)
            .into_iter()
            .filter(|t| !STOPWORDS.contains(&t.as_str()))
            .collect();
        let mut scored: Vec<(usize, String, &LibraryEntry)> = self
            .entries
            .iter()
            .map(|e| (e.index_tokens().intersection(&q).count(), e.qualified_name(), e))
            .filter(|(s, _, _)| *s > 0)
            .collect();
        scored.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        scored.into_iter().take(k.max(1)).map(|(_, _, e)| e.clone()).collect()
    }

    /// Toolkit providers for the synthesized tools.
    pub fn providers(&self) -> Vec<ToolkitProvider> {
        self.synthesized()
            .filter_map(|e| {
                let src = self.sources.get(&e.def.name)?;
                Some(ToolkitProvider::fixed(&e.toolkit, vec![script_tool(e.def.clone(), src.clone())]))
            })
            .collect()
    }

    /// `base` plus every synthesized tool.
    pub fn catalog(&self, base: &ToolCatalog) -> ToolCatalog {
        let mut c = base.clone();
        for p in self.providers() {
            c.insert(p);
        }
        c
    }

    pub fn snapshot(&self, base: &ToolCatalog) -> RegistrySnapshot {
        self.catalog(base).snapshot()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toolkit::{object_schema, Binding};

    fn entry(toolkit: &str, name: &str, desc: &str, tags: &[&str]) -> LibraryEntry {
        LibraryEntry {
            toolkit: toolkit.into(),
            def: ToolDef {
                name: name.into(),
                description: desc.into(),
                parameters: object_schema(&[]),
                source: ToolSource::BuiltinPure,
                binding: Binding::PureFunction { function: name.into() },
            },
            tags: tags.iter().map(|s| s.to_string()).collect(),
            created_by: CreatedBy::Builtin,
            created_at: DateTime::<Utc>::UNIX_EPOCH,
            synthesis: None,
        }
    }

    #[test]
    fn arxiv_download_ranks_first() {
        let lib = ToolLibrary::with_builtins(&ToolCatalog::offline());
        let hits = lib.search_tools("download arxiv pdf", 3);
        assert_eq!(hits[0].qualified_name(), "arxiv.download_papers");
        assert!(lib.search_tools("zzz qqq", 5).is_empty());
    }

    #[test]
    fn ties_break_by_name_and_search_is_pure() {
        let mut lib = ToolLibrary::new();
        lib.register(entry("kb", "zeta", "lookup things", &[]), None).unwrap();
        lib.register(entry("ka", "alpha", "lookup things", &[]), None).unwrap();
        let names: Vec<String> = lib.search_tools("lookup", 5).iter().map(|e| e.qualified_name()).collect();
        assert_eq!(names, vec!["ka.alpha", "kb.zeta"]);
        assert_eq!(lib.search_tools("lookup", 5), lib.search_tools("lookup", 5));
        assert_eq!(lib.search_tools("lookup", 1).len(), 1);
    }

    #[test]
    fn names_unique_and_synthesized_needs_test() {
        let mut lib = ToolLibrary::new();
        lib.register(entry("a", "x", "d", &[]), None).unwrap();
        assert!(lib.register(entry("b", "x", "d", &[]), None).is_err());
        let mut e = entry("y", "y", "d", &[]);
        e.def.source = ToolSource::Synthesized;
        assert!(lib.register(e, Some("def y(): pass".into())).is_err());
    }

    #[test]
    fn open_seeds_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let catalog = ToolCatalog::offline();
        let lib = ToolLibrary::open(dir.path(), &catalog).unwrap();
        let n = lib.len();
        assert!(dir.path().join(INDEX_FILE).exists());
        let again = ToolLibrary::open(dir.path(), &catalog).unwrap();
        assert_eq!(again.len(), n);
        assert_eq!(again.entries(), lib.entries());
    }
}
