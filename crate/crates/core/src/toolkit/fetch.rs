//! Pluggable web access for the `search` and `arxiv` toolkits.

use std::collections::BTreeMap;
use std::path::Path;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub title: String,
    pub url: String,
    #[serde(default)]
    pub snippet: String,
}

#[async_trait]
pub trait Fetcher: Send + Sync {
    async fn search(&self, query: &str, max_results: usize) -> Result<Vec<SearchHit>, String>;
    async fn fetch(&self, url: &str) -> Result<String, String>;
}

/// Canned search results and pages, for tests and offline examples.
///
/// Fixture JSON: `{"search": {"<query>": [hits]}, "pages": {"<url>": "<text>"}}`.
/// A query with no exact entry is answered from hits whose title or snippet
/// shares a word with it.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct OfflineFetcher {
    #[serde(default)]
    pub search: BTreeMap<String, Vec<SearchHit>>,
    #[serde(default)]
    pub pages: BTreeMap<String, String>,
}

impl OfflineFetcher {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn with_page(mut self, url: &str, body: &str) -> Self {
        self.pages.insert(url.to_string(), body.to_string());
        self
    }

    pub fn with_hits(mut self, query: &str, hits: Vec<SearchHit>) -> Self {
        self.search.insert(query.to_string(), hits);
        self
    }
}

fn words(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[async_trait]
impl Fetcher for OfflineFetcher {
    async fn search(&self, query: &str, max_results: usize) -> Result<Vec<SearchHit>, String> {
        if let Some(hits) = self.search.get(query) {
            return Ok(hits.iter().take(max_results).cloned().collect());
        }
        let q = words(query);
        let mut seen = std::collections::BTreeSet::new();
        let mut out = Vec::new();
        for hit in self.search.values().flatten() {
            let text = words(&format!("{} {}", hit.title, hit.snippet));
            if q.iter().any(|w| text.contains(w)) && seen.insert(hit.url.clone()) {
                out.push(hit.clone());
            }
        }
        out.truncate(max_results);
        Ok(out)
    }

    async fn fetch(&self, url: &str) -> Result<String, String> {
        self.pages
            .get(url)
            .cloned()
            .ok_or_else(|| format!("offline fixture has no page for {url}"))
    }
}

/// Live fetcher. Search goes to a JSON endpoint that returns a list of
/// `{title, url, snippet}` objects; `{q}` and `{n}` in the template are
/// substituted.
#[derive(Debug, Clone)]
pub struct HttpFetcher {
    client: reqwest::Client,
    search_url: Option<String>,
}

impl HttpFetcher {
    pub fn new(search_url: Option<String>) -> Self {
        Self {
            client: reqwest::Client::builder()
                .timeout(std::time::Duration::from_secs(30))
                .build()
                .expect("reqwest client"),
            search_url,
        }
    }

    /// Reads `AGENTRY_SEARCH_URL`.
    pub fn from_env() -> Self {
        Self::new(std::env::var("AGENTRY_SEARCH_URL").ok())
    }
}

#[async_trait]
impl Fetcher for HttpFetcher {
    async fn search(&self, query: &str, max_results: usize) -> Result<Vec<SearchHit>, String> {
        let template = self
            .search_url
            .as_deref()
            .ok_or("no search endpoint configured (set AGENTRY_SEARCH_URL)")?;
        let url = template
            .replace("{q}", &url_encode(query))
            .replace("{n}", &max_results.to_string());
        let resp = self.client.get(&url).send().await.map_err(|e| e.to_string())?;
        if !resp.status().is_success() {
            return Err(format!("search endpoint returned {}", resp.status()));
        }
        let mut hits: Vec<SearchHit> = resp.json().await.map_err(|e| e.to_string())?;
        hits.truncate(max_results);
        Ok(hits)
    }

    async fn fetch(&self, url: &str) -> Result<String, String> {
        let resp = self.client.get(url).send().await.map_err(|e| e.to_string())?;
        if !resp.status().is_success() {
            return Err(format!("{url} returned {}", resp.status()));
        }
        resp.text().await.map_err(|e| e.to_string())
    }
}

fn url_encode(s: &str) -> String {
    let mut out = String::new();
    for b in s.bytes() {
        match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' => out.push(b as char),
            b' ' => out.push('+'),
            _ => out.push_str(&format!("%{b:02X}")),
        }
    }
    out
}

/// Drop tags, scripts and styles, collapse whitespace.
pub fn strip_html(html: &str) -> String {
    let re_block = regex::Regex::new(r"(?is)<(script|style)[^>]*>.*?</(script|style)>").expect("regex");
    let re_tag = regex::Regex::new(r"(?s)<[^>]*>").expect("regex");
    let text = re_block.replace_all(html, " ");
    let text = re_tag.replace_all(&text, "\n");
    let text = text
        .replace("&nbsp;", " ")
        .replace("&amp;", "&")
        .replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("&quot;", "\"");
    text.lines()
        .map(|l| l.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join("\n")
}

/// Passages of `text` ranked by word overlap with `question`, best first.
/// Ties keep document order.
pub fn rank_passages(text: &str, question: &str, k: usize) -> Vec<String> {
    let q: std::collections::BTreeSet<String> = words(question).into_iter().filter(|w| w.len() > 2).collect();
    let mut scored: Vec<(usize, usize, &str)> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            let lw: std::collections::BTreeSet<String> = words(l).into_iter().collect();
            (q.intersection(&lw).count(), i, l)
        })
        .filter(|(s, _, _)| *s > 0)
        .collect();
    scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, _, l)| l.to_string()).collect()
}
