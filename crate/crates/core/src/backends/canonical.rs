use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{AttachmentSource, ChatRequest};

/// Field-ordered JSON bytes for a request. Attachment bytes are replaced by
/// their sha256 digest; generation parameters are included.
pub fn canonicalize(request: &ChatRequest) -> Vec<u8> {
    let messages: Vec<Value> = request
        .messages
        .iter()
        .map(|m| {
            let attachments: Vec<Value> = m
                .attachments
                .iter()
                .map(|a| match &a.source {
                    AttachmentSource::Bytes { data } => json!({
                        "media_type": a.media_type,
                        "sha256": hex::encode(Sha256::digest(data)),
                    }),
                    AttachmentSource::Url { url } => json!({
                        "media_type": a.media_type,
                        "url": url,
                    }),
                })
                .collect();
            json!({
                "role": m.role.to_string(),
                "text": m.text,
                "attachments": attachments,
            })
        })
        .collect();
    let g = &request.generation;
    let value = json!({
        "messages": messages,
        "generation": {
            "max_output_chars": g.max_output_chars,
            "deterministic": g.deterministic,
            "seed": g.seed,
        },
    });
    serde_json::to_vec(&value).expect("json values serialize")
}

pub fn request_hash(request: &ChatRequest) -> String {
    hex::encode(Sha256::digest(canonicalize(request)))
}
