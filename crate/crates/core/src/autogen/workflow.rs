use std::collections::{BTreeMap, BTreeSet};

use serde::Deserialize;
use serde_json::json;

use super::library::{CreatedBy, LibraryEntry, SharedLibrary};
use super::synth::{synthesize_tool, SynthesisOptions};
use super::{
    ask_parsed, clarify, extract_json, prompts, tokens, GenerationError, GenerationMode, GenerationReport,
    RequirementSpec, Stage,
};
use crate::config::{emit_config_unchecked, validate_config, AgentConfig, EnvSpec, ToolkitActivation};
use crate::environment::EnvHandle;
use crate::gateway::LlmClient;
use crate::toolkit::{ToolCatalog, ToolSource};

/// Library hits consulted per capability.
const RETRIEVAL_DEPTH: usize = 3;

#[derive(Deserialize)]
struct Persona {
    name: String,
    instructions: String,
}

fn parse_persona(text: &str) -> Result<Persona, String> {
    let p: Persona = serde_json::from_value(extract_json(text)?).map_err(|e| e.to_string())?;
    if p.instructions.trim().is_empty() {
        return Err("instructions are empty".into());
    }
    Ok(p)
}

/// The best library hit whose name or tags share a word with `capability`.
fn covering_entry(lib: &SharedLibrary, capability: &str) -> Option<LibraryEntry> {
    let want: BTreeSet<String> = tokens(capability).into_iter().collect();
    let lib = lib.read();
    lib.search_tools(&want.iter().cloned().collect::<Vec<_>>().join(" "), RETRIEVAL_DEPTH)
        .into_iter()
        .find(|e| e.tags.iter().any(|t| t == capability) || !e.label_tokens().is_disjoint(&want))
}

fn stage3_prompt(spec: &RequirementSpec, tools: &[LibraryEntry]) -> String {
    let mut s = format!(
        "Requirement specification:\n{}\n\nTools:\n",
        serde_json::to_string_pretty(spec).expect("spec serializes")
    );
    for e in tools {
        s.push_str(&format!("- {}: {}\n", e.def.name, e.def.description));
    }
    s
}

/// Build an agent config from a description in four fixed stages:
/// clarify, retrieve or synthesize tools, write instructions, assemble and
/// validate.
pub async fn generate_workflow(
    description: &str,
    lib: &SharedLibrary,
    client: &LlmClient,
    sandbox: &EnvHandle,
    base: &ToolCatalog,
) -> Result<(AgentConfig, GenerationReport), GenerationError> {
    let mut report = GenerationReport::new(GenerationMode::Workflow);

    let spec = clarify(description, client).await?;
    report.record(Stage::Clarify, true, json!(spec));
    report.requirement = Some(spec.clone());

    let mut chosen: Vec<LibraryEntry> = Vec::new();
    let mut uncovered = Vec::new();
    for cap in &spec.required_capabilities {
        match covering_entry(lib, cap) {
            Some(e) => {
                if !chosen.iter().any(|c| c.qualified_name() == e.qualified_name()) {
                    report.retrieved.push(e.qualified_name());
                    chosen.push(e);
                }
            }
            None => uncovered.push(cap.clone()),
        }
    }
    for cap in &uncovered {
        report.synthesis_calls += 1;
        let opts = SynthesisOptions {
            created_by: CreatedBy::Workflow,
            tags: vec![cap.clone()],
            ..Default::default()
        };
        let need = format!("{cap} (for an agent whose objective is: {})", spec.objective);
        match synthesize_tool(&need, lib, client, sandbox, &opts).await {
            Ok(t) => {
                report.synthesized.push(t.tool.name.clone());
                let entry = lib
                    .read()
                    .entries()
                    .iter()
                    .find(|e| e.def.name == t.tool.name)
                    .cloned()
                    .expect("registered tool is in the library");
                chosen.push(entry);
            }
            Err(f) => {
                tracing::warn!(capability = %cap, error = %f, "tool synthesis failed");
                report.synthesis_failures.push(f.report);
            }
        }
    }
    report.record(
        Stage::Tools,
        true,
        json!({
            "retrieved": report.retrieved,
            "uncovered": uncovered,
            "synthesized": report.synthesized,
            "failed": report.synthesis_failures,
        }),
    );

    let persona = ask_parsed(
        client,
        Stage::Instructions,
        prompts::INSTRUCTIONS,
        stage3_prompt(&spec, &chosen),
        parse_persona,
    )
    .await?;
    report.record(
        Stage::Instructions,
        true,
        json!({"name": persona.name, "instructions": persona.instructions}),
    );

    let mut cfg = AgentConfig::new(persona.name.trim(), persona.instructions);
    let mut toolkits: BTreeMap<String, ToolkitActivation> = BTreeMap::new();
    let mut needs_sandbox = false;
    for e in &chosen {
        needs_sandbox |= matches!(e.def.source, ToolSource::BuiltinEnv | ToolSource::Synthesized);
        let act = toolkits.entry(e.toolkit.clone()).or_default();
        if e.def.source != ToolSource::Synthesized {
            act.activated_tools.push(e.def.name.clone());
        }
    }
    cfg.toolkits = toolkits;
    if needs_sandbox {
        cfg.env = EnvSpec::named("sandbox");
    }
    let validation = validate_config(&cfg, &lib.read().snapshot(base));
    report.config_valid = validation.valid;
    report.record(Stage::Assemble, validation.valid, json!(validation));
    if !validation.valid {
        return Err(GenerationError::InvalidConfig {
            stage: Stage::Assemble,
            report: validation,
        });
    }
    report.config_yaml = Some(emit_config_unchecked(&cfg));
    Ok((cfg, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autogen::ToolLibrary;
    use crate::environment::{EnvProvider, ExecResult, MockMatcher, MockRule, MockScript};
    use crate::gateway::ChatResponse;

    const TOOL: &str = r#"def trending_feed(day: str) -> str:
    """List trending items for a day.

    Args:
        day (str): YYYY-MM-DD
    """
    return "a\nb"
"#;

    fn spec(caps: &[&str]) -> ChatResponse {
        ChatResponse::text(
            json!({"objective": "Summarize trending papers", "required_capabilities": caps}).to_string(),
        )
    }

    fn persona(name: &str) -> ChatResponse {
        ChatResponse::text(json!({"name": name, "instructions": "You summarize papers."}).to_string())
    }

    fn sandbox() -> EnvHandle {
        let script = MockScript::new(vec![MockRule::new(MockMatcher::contains("assert"), ExecResult::ok(""))]);
        EnvProvider::default().with_mock_script(script).create(&EnvSpec::named("mock")).unwrap()
    }

    fn lib() -> SharedLibrary {
        ToolLibrary::with_builtins(&ToolCatalog::offline()).into_shared()
    }

    #[tokio::test]
    async fn two_retrieved_one_synthesized() {
        let (client, t) = LlmClient::scripted(vec![
            spec(&["web-search", "pdf-download", "trending-feed"]),
            ChatResponse::text(format!("```tool\n{TOOL}```\n```test\nassert trending_feed('x')\n```")),
            persona("Papers_Agent"),
        ]);
        let lib = lib();
        let (cfg, report) = generate_workflow("papers", &lib, &client, &sandbox(), &ToolCatalog::offline())
            .await
            .unwrap();
        t.assert_exhausted();
        assert_eq!(report.retrieved, vec!["search.search", "arxiv.download_papers"]);
        assert_eq!(report.synthesized, vec!["trending_feed"]);
        let expected = AgentConfig {
            env: EnvSpec::named("sandbox"),
            ..AgentConfig::new("Papers_Agent", "You summarize papers.")
                .with_toolkit("arxiv", &["download_papers"])
                .with_toolkit("search", &["search"])
                .with_toolkit("trending_feed", &[])
        };
        assert_eq!(cfg, expected);
        assert!(report.config_valid);
        assert_eq!(report.tool_executability(), Some(1.0));
        assert_eq!(report.stages.len(), 4);
    }

    #[tokio::test]
    async fn covered_description_needs_no_synthesis() {
        let (client, t) = LlmClient::scripted(vec![spec(&["web-search", "paper-search"]), persona("A")]);
        let (_, report) = generate_workflow("x", &lib(), &client, &sandbox(), &ToolCatalog::offline())
            .await
            .unwrap();
        assert_eq!(report.synthesis_calls, 0);
        assert_eq!(t.requests().len(), 2);
    }

    #[tokio::test]
    async fn invalid_assembly_fails_at_stage_four() {
        let (client, _) = LlmClient::scripted(vec![spec(&["web-search"]), persona("bad name!")]);
        let err = generate_workflow("x", &lib(), &client, &sandbox(), &ToolCatalog::offline())
            .await
            .unwrap_err();
        assert_eq!(err.stage().map(Stage::number), Some(4));
    }
}
