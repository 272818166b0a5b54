use serde::{Deserialize, Serialize};

use crate::backends::{BackendError, ChatBackend, ChatMessage, ChatRequest};
use crate::text::{fill_template, truncate_chars};

/// Maximum notebook length in characters (Unicode scalar values).
pub const NOTEBOOK_LIMIT: usize = 1000;

const UPDATE_TEMPLATE: &str = include_str!("../../templates/notebook_update.txt");

/// Doctor notes carried from one case to the next.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Notebook {
    pub content: String,
    pub revision: u64,
}

impl Notebook {
    /// Revision 0 notebook, truncated to the limit.
    pub fn with_content(content: &str) -> Self {
        Notebook { content: truncate_chars(content, NOTEBOOK_LIMIT).to_string(), revision: 0 }
    }

    pub fn chars(&self) -> usize {
        self.content.chars().count()
    }
}

/// Asks the backend to rewrite the notebook after a graded case. The reply
/// replaces the old content, cut at [`NOTEBOOK_LIMIT`] characters. On a
/// backend error the caller keeps `old`.
pub fn update_notebook(
    old: &Notebook,
    transcript: &str,
    correct_diagnosis: &str,
    doctor_diagnosis: &str,
    backend: &dyn ChatBackend,
) -> Result<Notebook, BackendError> {
    let prompt = fill_template(
        UPDATE_TEMPLATE,
        &[
            ("conversation", transcript),
            ("correct_diagnosis", correct_diagnosis),
            ("doctor_diagnosis", doctor_diagnosis),
            ("notebook", &old.content),
        ],
    )
    .expect("notebook template placeholders");
    let request = ChatRequest::new(vec![
        ChatMessage::system(prompt),
        ChatMessage::user("Write the updated notebook."),
    ]);
    let reply = backend.complete(&request)?;
    Ok(Notebook {
        content: truncate_chars(reply.text.trim(), NOTEBOOK_LIMIT).to_string(),
        revision: old.revision + 1,
    })
}
