//! Description and conversation synthesis through the annotation client.

use std::path::Path;

use log::warn;

use super::validate::{parse_and_validate, DeclaredObject, ParsedDialogue, Violation};
use crate::client::{CompletionClient, CompletionRequest};
use crate::error::{Error, Result};

pub const MAX_REPROMPTS: usize = 2;

/// Prompt text assets. `{num_frames}` and `{objects}` are filled in the
/// dialogue prompt; `{errors}`, `{previous}` and `{original}` in the re-prompt.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplates {
    pub version: String,
    pub dialogue: String,
    pub reprompt: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            version: "v1".into(),
            dialogue: include_str!("../../assets/prompts/dialogue_v1.txt").into(),
            reprompt: include_str!("../../assets/prompts/reprompt_v1.txt").into(),
        }
    }
}

impl PromptTemplates {
    /// Reads `dialogue.txt` and `reprompt.txt` from `dir`; the directory name
    /// is the version.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            std::fs::read_to_string(dir.join(name))
                .map_err(|e| Error::Config(format!("cannot read template {}: {e}", dir.join(name).display())))
        };
        Ok(Self {
            version: dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            dialogue: read("dialogue.txt")?,
            reprompt: read("reprompt.txt")?,
        })
    }
}

/// What the annotation model is told about one outlined object.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObjectBrief {
    pub object_id: String,
    pub color_tag: String,
    pub category: Option<String>,
    pub expression: Option<String>,
}

impl ObjectBrief {
    fn line(&self) -> String {
        let mut s = format!("- {} box", self.color_tag);
        if let Some(c) = &self.category {
            s.push_str(&format!(": a {c}"));
        }
        if let Some(e) = &self.expression {
            s.push_str(&format!(" (\"{e}\")"));
        }
        s
    }
}

pub fn dialogue_prompt(templates: &PromptTemplates, num_frames: usize, objects: &[ObjectBrief]) -> String {
    let list: Vec<String> = objects.iter().map(ObjectBrief::line).collect();
    templates
        .dialogue
        .replace("{num_frames}", &num_frames.to_string())
        .replace("{objects}", &list.join("\n"))
}

fn reprompt(templates: &PromptTemplates, original: &str, previous: &str, errors: &[Violation]) -> String {
    let list: Vec<String> = errors.iter().map(|e| format!("- {e}")).collect();
    templates
        .reprompt
        .replace("{errors}", &list.join("\n"))
        .replace("{previous}", previous)
        .replace("{original}", original)
}

/// Asks for descriptions and a conversation, re-prompting up to
/// `max_reprompts` times with the validator's complaints. `Ok(None)` means
/// every reply failed validation.
pub fn synthesize_dialogue(
    key: &str,
    image_refs: &[String],
    objects: &[ObjectBrief],
    client: &dyn CompletionClient,
    templates: &PromptTemplates,
    max_reprompts: usize,
) -> Result<Option<ParsedDialogue>> {
    let declared: Vec<DeclaredObject> = objects
        .iter()
        .map(|o| DeclaredObject::new(&o.object_id, &o.color_tag))
        .collect();
    let original = dialogue_prompt(templates, image_refs.len(), objects);
    let mut request = CompletionRequest::new(key, original.clone());
    request.image_refs = image_refs.to_vec();
    for attempt in 0..=max_reprompts {
        request.attempt = attempt;
        let reply = client.complete(&request)?;
        match parse_and_validate(&reply, &declared) {
            Ok(parsed) => return Ok(Some(parsed)),
            Err(errors) => {
                warn!(
                    "`{key}` attempt {}: {} violation(s), first: {}",
                    attempt + 1,
                    errors.len(),
                    errors[0]
                );
                request.prompt = reprompt(templates, &original, &reply, &errors);
            }
        }
    }
    warn!("dropping `{key}`: no valid reply after {max_reprompts} re-prompts");
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::FixtureClient;
    use std::sync::Mutex;

    fn briefs() -> Vec<ObjectBrief> {
        ["red", "blue"]
            .iter()
            .enumerate()
            .map(|(i, c)| ObjectBrief {
                object_id: i.to_string(),
                color_tag: c.to_string(),
                category: Some("dog".into()),
                expression: None,
            })
            .collect()
    }

    const VALID: &str = "[DESC red] a dog\n[DESC blue] a dog\nUSER: Who runs?\nASSISTANT: <p>the dog</p>[SEG:red] runs.\n";
    const INVALID: &str = "[DESC red] a dog\n[DESC blue] a dog\nUSER: Who runs?\nASSISTANT: <p>the dog</p>[SEG:green] runs.\n";

    #[test]
    fn valid_reply_is_accepted() {
        let mut c = FixtureClient::default();
        c.insert("v", vec![VALID.into()]);
        let p = synthesize_dialogue("v", &[], &briefs(), &c, &PromptTemplates::default(), MAX_REPROMPTS)
            .unwrap()
            .unwrap();
        assert_eq!(p.conversation[1].text, "<p>the dog</p>[SEG:0] runs.");
    }

    struct Recording {
        inner: FixtureClient,
        prompts: Mutex<Vec<String>>,
    }

    impl CompletionClient for Recording {
        fn complete(&self, r: &CompletionRequest) -> Result<String> {
            self.prompts.lock().unwrap().push(r.prompt.clone());
            self.inner.complete(r)
        }
    }

    #[test]
    fn invalid_replies_are_reprompted_then_dropped() {
        let mut c = FixtureClient::default();
        c.insert("v", vec![INVALID.into()]);
        let rec = Recording {
            inner: c,
            prompts: Mutex::new(vec![]),
        };
        let out = synthesize_dialogue("v", &[], &briefs(), &rec, &PromptTemplates::default(), MAX_REPROMPTS).unwrap();
        assert!(out.is_none());
        let prompts = rec.prompts.lock().unwrap();
        assert_eq!(prompts.len(), 3);
        assert!(prompts[1].contains("unknown_object"));
    }

    #[test]
    fn reprompt_can_recover() {
        let mut c = FixtureClient::default();
        c.insert("v", vec![INVALID.into(), VALID.into()]);
        assert!(synthesize_dialogue("v", &[], &briefs(), &c, &PromptTemplates::default(), MAX_REPROMPTS)
            .unwrap()
            .is_some());
    }

    #[test]
    fn prompt_lists_objects() {
        let p = dialogue_prompt(&PromptTemplates::default(), 16, &briefs());
        assert!(p.contains("16 frames"));
        assert!(p.contains("- blue box: a dog"));
    }
}
