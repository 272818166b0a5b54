//! Doctor tools: chain-of-thought instructions, reflection, adaptive
//! retrieval and the cross-case notebook.

mod notebook;
mod retrieval;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::Corpus;
use crate::text::fill_template;

pub use notebook::{update_notebook, Notebook, NOTEBOOK_LIMIT};
pub use retrieval::{
    load_corpus, tokenize, Bm25Params, Document, Hit, RetrievalError, RetrievalIndex,
};

const ZERO_SHOT: &str = include_str!("../../templates/tool_zero_shot_cot.txt");
const ONE_SHOT: &str = include_str!("../../templates/tool_one_shot_cot.txt");
const ONE_SHOT_DIALOGUE: &str = include_str!("../../templates/one_shot_dialogue.txt");
const RESEARCH_INTERNET: &str = include_str!("../../templates/tool_research_internet.txt");
const RESEARCH_TEXTBOOKS: &str = include_str!("../../templates/tool_research_textbooks.txt");
const NOTEBOOK_BLOCK: &str = include_str!("../../templates/tool_notebook.txt");
const REFLECTION_RULE: &str = include_str!("../../templates/tool_reflection.txt");
pub const REFLECTION_PROMPT: &str = include_str!("../../templates/reflection_prompt.txt");

const RESEARCH_BUDGET_RULE: &str = "Each research call counts as one of your questions.";
const REFLECTION_BUDGET_RULE: &str = "Reflection replies do not count as questions.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolKind {
    ZeroShotCot,
    OneShotCot,
    ReflectionCot,
    RagBook,
    RagWeb,
    Notebook,
}

impl ToolKind {
    pub const ALL: [ToolKind; 6] = [
        ToolKind::ZeroShotCot,
        ToolKind::OneShotCot,
        ToolKind::ReflectionCot,
        ToolKind::RagBook,
        ToolKind::RagWeb,
        ToolKind::Notebook,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ToolKind::ZeroShotCot => "zero_shot_cot",
            ToolKind::OneShotCot => "one_shot_cot",
            ToolKind::ReflectionCot => "reflection_cot",
            ToolKind::RagBook => "rag_book",
            ToolKind::RagWeb => "rag_web",
            ToolKind::Notebook => "notebook",
        }
    }

    /// The corpus a retrieval tool searches.
    pub fn corpus(self) -> Option<Corpus> {
        match self {
            ToolKind::RagBook => Some(Corpus::Textbooks),
            ToolKind::RagWeb => Some(Corpus::Internet),
            _ => None,
        }
    }
}

impl fmt::Display for ToolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ToolKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ToolKind::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown tool `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("rag_book and rag_web cannot be enabled together")]
pub struct ConflictingTools;

pub fn check_tools(tools: &BTreeSet<ToolKind>) -> Result<(), ConflictingTools> {
    if tools.contains(&ToolKind::RagBook) && tools.contains(&ToolKind::RagWeb) {
        Err(ConflictingTools)
    } else {
        Ok(())
    }
}

/// The enabled retrieval corpus, if any.
pub fn research_corpus(tools: &BTreeSet<ToolKind>) -> Option<Corpus> {
    tools.iter().find_map(|t| t.corpus())
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ToolBlocks {
    pub system_additions: String,
    pub budget_rules: String,
}

impl ToolBlocks {
    pub fn is_empty(&self) -> bool {
        self.system_additions.is_empty() && self.budget_rules.is_empty()
    }

    /// Both parts joined for insertion into the doctor prompt.
    pub fn render(&self) -> String {
        [self.system_additions.as_str(), self.budget_rules.as_str()]
            .into_iter()
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join("\n\n")
    }
}

/// Instruction text for every enabled tool, in [`ToolKind`] order.
pub fn tool_blocks(
    tools: &BTreeSet<ToolKind>,
    notebook: Option<&Notebook>,
    budget_total: u32,
) -> ToolBlocks {
    let mut additions = Vec::new();
    let mut rules = Vec::new();
    let max_infs = budget_total.to_string();
    for tool in tools {
        match tool {
            ToolKind::ZeroShotCot => additions.push(ZERO_SHOT.to_string()),
            ToolKind::OneShotCot => additions.push(
                fill_template(ONE_SHOT, &[("example_dialogue", ONE_SHOT_DIALOGUE)])
                    .expect("one-shot template placeholders"),
            ),
            ToolKind::ReflectionCot => {
                additions.push(REFLECTION_RULE.to_string());
                rules.push(REFLECTION_BUDGET_RULE);
            }
            ToolKind::RagBook => {
                additions.push(RESEARCH_TEXTBOOKS.to_string());
                rules.push(RESEARCH_BUDGET_RULE);
            }
            ToolKind::RagWeb => {
                additions.push(
                    fill_template(RESEARCH_INTERNET, &[("max_infs", &max_infs)])
                        .expect("research template placeholders"),
                );
                rules.push(RESEARCH_BUDGET_RULE);
            }
            ToolKind::Notebook => {
                let content = notebook.map(|n| n.content.as_str()).unwrap_or("");
                let content = if content.is_empty() { "(empty)" } else { content };
                additions.push(
                    fill_template(NOTEBOOK_BLOCK, &[("notebook", content)])
                        .expect("notebook template placeholders"),
                );
            }
        }
    }
    rules.dedup();
    ToolBlocks { system_additions: additions.join("\n\n"), budget_rules: rules.join(" ") }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(tools: &[ToolKind]) -> BTreeSet<ToolKind> {
        tools.iter().copied().collect()
    }

    #[test]
    fn empty_set_has_no_additions() {
        assert!(tool_blocks(&set(&[]), None, 20).is_empty());
    }

    #[test]
    fn research_web_block() {
        let b = tool_blocks(&set(&[ToolKind::RagWeb]), None, 20);
        assert!(b.system_additions.contains("Research Internet [internet search here]"));
        assert!(b.system_additions.contains("before 20 inferences"));
        assert_eq!(b.budget_rules, RESEARCH_BUDGET_RULE);
    }

    #[test]
    fn one_shot_has_exemplar() {
        let b = tool_blocks(&set(&[ToolKind::OneShotCot]), None, 20);
        assert!(b.system_additions.contains("Diagnosis Ready: Acute Interstitial Nephritis"));
        assert!(b.system_additions.contains("Patient: I took an antibiotic"));
        assert!(!b.system_additions.contains("{example_dialogue}"));
    }

    #[test]
    fn notebook_block_carries_content() {
        let nb = Notebook::with_content("[Note #1] ask about onset");
        let b = tool_blocks(&set(&[ToolKind::Notebook]), Some(&nb), 20);
        assert!(b.system_additions.contains("[Note #1] ask about onset"));
    }

    #[test]
    fn rag_tools_conflict() {
        assert!(check_tools(&set(&[ToolKind::RagBook, ToolKind::RagWeb])).is_err());
        assert!(check_tools(&set(&[ToolKind::RagBook, ToolKind::Notebook])).is_ok());
    }

    #[test]
    fn tool_names_round_trip() {
        for t in ToolKind::ALL {
            assert_eq!(t.as_str().parse::<ToolKind>(), Ok(t));
            assert_eq!(serde_json::to_string(&t).unwrap(), format!("\"{t}\""));
        }
    }
}
