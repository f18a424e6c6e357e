use serde::{Deserialize, Serialize};

pub const DEFAULT_CAPACITY: usize = 32;
pub const MAX_ENTRY_WORDS: usize = 64;
pub const EXPERIENCE_HEADER: &str = "## Learned Experiences";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperienceEntry {
    pub id: String,
    pub text: String,
    pub epoch_added: u32,
    pub last_modified_epoch: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin_task_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankSnapshot {
    pub epoch: u32,
    pub entries: Vec<ExperienceEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum BankEdit {
    Add { text: String },
    Revise { target_id: String, text: String },
    Remove { target_id: String },
    Keep,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BankEditError {
    #[error("no entry with id '{0}'")]
    UnknownId(String),
    #[error("experience text is empty")]
    EmptyText,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditOutcome {
    pub applied: Vec<BankEdit>,
    pub rejected: Vec<(BankEdit, String)>,
    /// Ids dropped to make room for additions.
    pub evicted: Vec<String>,
}

/// Ordered textual experiences injected into prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperienceBank {
    pub entries: Vec<ExperienceEntry>,
    pub capacity: usize,
    #[serde(default)]
    pub epoch_snapshots: Vec<BankSnapshot>,
    next_id: u64,
}

impl Default for ExperienceBank {
    fn default() -> Self {
        Self::new(DEFAULT_CAPACITY)
    }
}

/// Trim, collapse whitespace and keep at most [`MAX_ENTRY_WORDS`] words.
pub fn clip_words(text: &str) -> String {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.len() > MAX_ENTRY_WORDS {
        tracing::warn!(words = words.len(), "experience clipped to {MAX_ENTRY_WORDS} words");
    }
    words[..words.len().min(MAX_ENTRY_WORDS)].join(" ")
}

impl ExperienceBank {
    pub fn new(capacity: usize) -> Self {
        Self {
            entries: Vec::new(),
            capacity: capacity.max(1),
            epoch_snapshots: Vec::new(),
            next_id: 1,
        }
    }

    /// A bank holding `texts` as epoch-0 entries.
    pub fn from_texts<S: AsRef<str>>(texts: &[S]) -> Self {
        let mut b = Self::default();
        for t in texts {
            let _ = b.apply(&BankEdit::Add { text: t.as_ref().to_string() }, 0, None);
        }
        b
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ExperienceEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn texts(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.text.as_str()).collect()
    }

    /// Apply one edit. Returns ids evicted by an `add` at capacity.
    pub fn apply(
        &mut self,
        edit: &BankEdit,
        epoch: u32,
        origin_task_id: Option<&str>,
    ) -> Result<Vec<String>, BankEditError> {
        match edit {
            BankEdit::Keep => Ok(Vec::new()),
            BankEdit::Add { text } => {
                let text = clip_words(text);
                if text.is_empty() {
                    return Err(BankEditError::EmptyText);
                }
                let mut evicted = Vec::new();
                while self.entries.len() >= self.capacity {
                    let oldest = self
                        .entries
                        .iter()
                        .enumerate()
                        .min_by_key(|(i, e)| (e.epoch_added, *i))
                        .map(|(i, _)| i)
                        .expect("nonempty at capacity");
                    evicted.push(self.entries.remove(oldest).id);
                }
                let id = format!("E{}", self.next_id);
                self.next_id += 1;
                self.entries.push(ExperienceEntry {
                    id,
                    text,
                    epoch_added: epoch,
                    last_modified_epoch: epoch,
                    origin_task_id: origin_task_id.map(str::to_string),
                });
                Ok(evicted)
            }
            BankEdit::Revise { target_id, text } => {
                let text = clip_words(text);
                if text.is_empty() {
                    return Err(BankEditError::EmptyText);
                }
                let e = self
                    .entries
                    .iter_mut()
                    .find(|e| &e.id == target_id)
                    .ok_or_else(|| BankEditError::UnknownId(target_id.clone()))?;
                e.text = text;
                e.last_modified_epoch = epoch;
                Ok(Vec::new())
            }
            BankEdit::Remove { target_id } => {
                let i = self
                    .entries
                    .iter()
                    .position(|e| &e.id == target_id)
                    .ok_or_else(|| BankEditError::UnknownId(target_id.clone()))?;
                self.entries.remove(i);
                Ok(Vec::new())
            }
        }
    }

    /// Apply edits in order; a rejected edit does not block the rest.
    pub fn apply_all(&mut self, edits: &[BankEdit], epoch: u32, origin_task_id: Option<&str>) -> EditOutcome {
        let mut out = EditOutcome::default();
        for edit in edits {
            match self.apply(edit, epoch, origin_task_id) {
                Ok(evicted) => {
                    out.applied.push(edit.clone());
                    out.evicted.extend(evicted);
                }
                Err(e) => {
                    tracing::warn!(?edit, error = %e, "bank edit rejected");
                    out.rejected.push((edit.clone(), e.to_string()));
                }
            }
        }
        out
    }

    /// Freeze the current entries as `epoch`'s snapshot. A later call for the
    /// same epoch is ignored.
    pub fn snapshot(&mut self, epoch: u32) -> &BankSnapshot {
        if let Some(i) = self.epoch_snapshots.iter().position(|s| s.epoch == epoch) {
            return &self.epoch_snapshots[i];
        }
        self.epoch_snapshots.push(BankSnapshot {
            epoch,
            entries: self.entries.clone(),
        });
        self.epoch_snapshots.last().expect("just pushed")
    }

    /// The bank as it stood at the end of `epoch`.
    pub fn at_epoch(&self, epoch: u32) -> Option<ExperienceBank> {
        let snap = self.epoch_snapshots.iter().find(|s| s.epoch == epoch)?;
        let mut b = ExperienceBank::new(self.capacity);
        b.entries = snap.entries.clone();
        b.next_id = self.next_id;
        Some(b)
    }

    /// Numbered block under [`EXPERIENCE_HEADER`]; empty for an empty bank.
    pub fn render(&self) -> String {
        if self.entries.is_empty() {
            return String::new();
        }
        let mut s = String::from(EXPERIENCE_HEADER);
        for (i, e) in self.entries.iter().enumerate() {
            s.push_str(&format!("\n{}. {}", i + 1, e.text));
        }
        s
    }

    /// Listing with ids, as shown to the distillation model.
    pub fn render_with_ids(&self) -> String {
        if self.entries.is_empty() {
            return "(empty)".into();
        }
        self.entries
            .iter()
            .map(|e| format!("[{}] {}", e.id, e.text))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capacity_evicts_oldest() {
        let mut b = ExperienceBank::new(2);
        b.apply(&BankEdit::Add { text: "a".into() }, 0, None).unwrap();
        b.apply(&BankEdit::Add { text: "b".into() }, 1, None).unwrap();
        let ev = b.apply(&BankEdit::Add { text: "c".into() }, 2, None).unwrap();
        assert_eq!(ev, vec!["E1".to_string()]);
        assert_eq!(b.texts(), vec!["b", "c"]);
    }

    #[test]
    fn unknown_ids_rejected_others_applied() {
        let mut b = ExperienceBank::from_texts(&["x"]);
        let out = b.apply_all(
            &[
                BankEdit::Revise { target_id: "E9".into(), text: "y".into() },
                BankEdit::Add { text: "z".into() },
            ],
            1,
            Some("t1"),
        );
        assert_eq!(out.rejected.len(), 1);
        assert_eq!(out.applied.len(), 1);
        assert_eq!(b.texts(), vec!["x", "z"]);
    }

    #[test]
    fn long_text_is_clipped_and_render_numbered() {
        let long = vec!["w"; 100].join(" ");
        let mut b = ExperienceBank::default();
        b.apply(&BankEdit::Add { text: long }, 0, None).unwrap();
        assert_eq!(b.entries[0].text.split_whitespace().count(), MAX_ENTRY_WORDS);
        assert!(b.render().starts_with("## Learned Experiences\n1. w w"));
        assert_eq!(ExperienceBank::default().render(), "");
    }

    #[test]
    fn snapshots_are_frozen() {
        let mut b = ExperienceBank::from_texts(&["a"]);
        b.snapshot(1);
        b.apply(&BankEdit::Add { text: "b".into() }, 2, None).unwrap();
        b.snapshot(1);
        b.snapshot(2);
        assert_eq!(b.at_epoch(1).unwrap().texts(), vec!["a"]);
        assert_eq!(b.at_epoch(2).unwrap().texts(), vec!["a", "b"]);
    }
}
