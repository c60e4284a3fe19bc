//! Prompt templates with placeholder substitution and few-shot exemplars.
//!
//! Templates are plain text files under `prompts/`: `<name>.txt` holds the
//! body, `<name>.exemplars/<k>.txt` the k-th few-shot block, and the optional
//! `<name>.variant1.txt` an alternative header used for the second sampling
//! pass of preference-data generation. Placeholders look like `{question}`;
//! `{exemplars}` expands to the numbered exemplar blocks.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::backend::ChatMessage;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("template `{template}`: placeholder {{{placeholder}}} is not bound")]
    Unbound {
        template: String,
        placeholder: String,
    },
    #[error("template `{template}` has no exemplar variant {variant}")]
    Variant { template: String, variant: u32 },
    #[error("template `{template}`: {message}")]
    Invalid { template: String, message: String },
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TemplateName {
    Dia,
    ImplicitScr,
    ExplicitScr,
    InternalEval,
    ContextEval,
    FilterContext,
    CrdpoDocDeceptive,
    CrdpoDocCorrect,
    ContextFaithfulAnswer,
    ClosedBook,
    LlmJudge,
    ModifyContext,
}

impl TemplateName {
    pub const ALL: [TemplateName; 12] = [
        TemplateName::Dia,
        TemplateName::ImplicitScr,
        TemplateName::ExplicitScr,
        TemplateName::InternalEval,
        TemplateName::ContextEval,
        TemplateName::FilterContext,
        TemplateName::CrdpoDocDeceptive,
        TemplateName::CrdpoDocCorrect,
        TemplateName::ContextFaithfulAnswer,
        TemplateName::ClosedBook,
        TemplateName::LlmJudge,
        TemplateName::ModifyContext,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateName::Dia => "dia",
            TemplateName::ImplicitScr => "implicit_scr",
            TemplateName::ExplicitScr => "explicit_scr",
            TemplateName::InternalEval => "internal_eval",
            TemplateName::ContextEval => "context_eval",
            TemplateName::FilterContext => "filter_context",
            TemplateName::CrdpoDocDeceptive => "crdpo_doc_deceptive",
            TemplateName::CrdpoDocCorrect => "crdpo_doc_correct",
            TemplateName::ContextFaithfulAnswer => "context_faithful_answer",
            TemplateName::ClosedBook => "closed_book",
            TemplateName::LlmJudge => "llm_judge",
            TemplateName::ModifyContext => "modify_context",
        }
    }

    /// Exemplar count a template must carry, if fixed.
    fn required_exemplars(self) -> Option<usize> {
        match self {
            TemplateName::Dia | TemplateName::ImplicitScr => Some(3),
            _ => None,
        }
    }
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateName {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateName::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| PromptError::UnknownTemplate(s.to_string()))
    }
}

/// Placeholder values for one render call.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Bindings(BTreeMap<String, String>);

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.0.insert(key.into(), value.into());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: TemplateName,
    pub body: String,
    pub variant1_body: Option<String>,
    pub exemplars: Vec<String>,
}

impl PromptTemplate {
    fn new(
        name: TemplateName,
        body: &str,
        variant1_body: Option<&str>,
        exemplars: Vec<&str>,
    ) -> Result<Self, PromptError> {
        let t = Self {
            name,
            body: body.trim_end().to_string(),
            variant1_body: variant1_body.map(|b| b.trim_end().to_string()),
            exemplars: exemplars.iter().map(|e| e.trim_end().to_string()).collect(),
        };
        t.check()?;
        Ok(t)
    }

    fn check(&self) -> Result<(), PromptError> {
        let invalid = |message: String| PromptError::Invalid {
            template: self.name.to_string(),
            message,
        };
        if let Some(n) = self.name.required_exemplars() {
            if self.exemplars.len() != n {
                return Err(invalid(format!(
                    "expected {n} exemplars, found {}",
                    self.exemplars.len()
                )));
            }
        }
        for body in std::iter::once(&self.body).chain(self.variant1_body.iter()) {
            let wants = placeholders(body).iter().any(|p| p == "exemplars");
            if wants != !self.exemplars.is_empty() {
                return Err(invalid(
                    "the {exemplars} placeholder must appear exactly when exemplars exist".into(),
                ));
            }
        }
        Ok(())
    }

    /// Renders the template. Variant 0 is the standard form; variant 1, where
    /// available, uses the alternative header with the exemplar order reversed.
    pub fn render(&self, bindings: &Bindings, variant: u32) -> Result<String, PromptError> {
        let (body, exemplars): (&str, Vec<&String>) = match (variant, &self.variant1_body) {
            (0, _) => (&self.body, self.exemplars.iter().collect()),
            (1, Some(alt)) => (alt, self.exemplars.iter().rev().collect()),
            _ => {
                return Err(PromptError::Variant {
                    template: self.name.to_string(),
                    variant,
                })
            }
        };
        let block = exemplars
            .iter()
            .enumerate()
            .map(|(i, e)| format!("Example {}:\n\n{}", i + 1, e))
            .collect::<Vec<_>>()
            .join("\n\n");
        let bindings = bindings.clone().with("exemplars", block);
        substitute(body, &bindings).map_err(|placeholder| PromptError::Unbound {
            template: self.name.to_string(),
            placeholder,
        })
    }
}

fn is_placeholder_char(b: u8) -> bool {
    b.is_ascii_lowercase() || b == b'_'
}

/// Finds `{name}` spans: returns (start, end_exclusive, name).
fn scan(body: &str) -> Vec<(usize, usize, &str)> {
    let bytes = body.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let mut j = i + 1;
            while j < bytes.len() && is_placeholder_char(bytes[j]) {
                j += 1;
            }
            if j > i + 1 && j < bytes.len() && bytes[j] == b'}' {
                out.push((i, j + 1, &body[i + 1..j]));
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    out
}

/// Names of all placeholders in `body`, in order of appearance.
pub fn placeholders(body: &str) -> Vec<String> {
    scan(body).into_iter().map(|(_, _, n)| n.to_string()).collect()
}

/// Single-pass substitution: bound values are never rescanned, so a document
/// that happens to contain `{question}` is inserted literally. Braces that do
/// not form a placeholder pass through. Returns the first unbound name on error.
pub fn substitute(body: &str, bindings: &Bindings) -> Result<String, String> {
    let mut out = String::with_capacity(body.len());
    let mut last = 0;
    for (start, end, name) in scan(body) {
        let value = bindings.get(name).ok_or_else(|| name.to_string())?;
        out.push_str(&body[last..start]);
        out.push_str(value);
        last = end;
    }
    out.push_str(&body[last..]);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: BTreeMap<TemplateName, PromptTemplate>,
}

macro_rules! builtin {
    ($name:expr, $file:literal, $v1:expr, [$($ex:literal),*]) => {
        PromptTemplate::new(
            $name,
            include_str!(concat!("../prompts/", $file, ".txt")),
            $v1,
            vec![$(include_str!(concat!("../prompts/", $file, ".exemplars/", $ex, ".txt"))),*],
        )
        .expect("built-in template is valid")
    };
}

impl TemplateSet {
    /// The templates compiled into the binary.
    pub fn builtin() -> Self {
        use TemplateName::*;
        let list = vec![
            builtin!(Dia, "dia", None, ["1", "2", "3"]),
            builtin!(ImplicitScr, "implicit_scr", None, ["1", "2", "3"]),
            builtin!(ExplicitScr, "explicit_scr", None, ["1", "2", "3"]),
            builtin!(InternalEval, "internal_eval", None, []),
            builtin!(ContextEval, "context_eval", None, []),
            builtin!(FilterContext, "filter_context", None, ["1", "2", "3"]),
            builtin!(
                CrdpoDocDeceptive,
                "crdpo_doc_deceptive",
                Some(include_str!("../prompts/crdpo_doc_deceptive.variant1.txt")),
                ["1", "2"]
            ),
            builtin!(
                CrdpoDocCorrect,
                "crdpo_doc_correct",
                Some(include_str!("../prompts/crdpo_doc_correct.variant1.txt")),
                ["1", "2"]
            ),
            builtin!(ContextFaithfulAnswer, "context_faithful_answer", None, ["1", "2", "3"]),
            builtin!(ClosedBook, "closed_book", None, ["1", "2", "3"]),
            builtin!(LlmJudge, "llm_judge", None, []),
            builtin!(ModifyContext, "modify_context", None, []),
        ];
        Self {
            templates: list.into_iter().map(|t| (t.name, t)).collect(),
        }
    }

    /// Built-ins overridden by whatever `<name>.txt` files exist in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut set = Self::builtin();
        let read = |path: PathBuf| -> Result<Option<String>, PromptError> {
            match fs::read_to_string(&path) {
                Ok(s) => Ok(Some(s)),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
                Err(source) => Err(PromptError::Io { path, source }),
            }
        };
        for name in TemplateName::ALL {
            let Some(body) = read(dir.join(format!("{name}.txt")))? else {
                continue;
            };
            let variant1 = read(dir.join(format!("{name}.variant1.txt")))?;
            let mut exemplars = Vec::new();
            for k in 1.. {
                match read(dir.join(format!("{name}.exemplars")).join(format!("{k}.txt")))? {
                    Some(e) => exemplars.push(e),
                    None => break,
                }
            }
            let t = PromptTemplate::new(
                name,
                &body,
                variant1.as_deref(),
                exemplars.iter().map(String::as_str).collect(),
            )?;
            set.templates.insert(name, t);
        }
        Ok(set)
    }

    pub fn get(&self, name: TemplateName) -> &PromptTemplate {
        &self.templates[&name]
    }

    /// Renders a template as a single user message.
    pub fn render(
        &self,
        name: TemplateName,
        bindings: &Bindings,
        variant: u32,
    ) -> Result<Vec<ChatMessage>, PromptError> {
        let text = self.get(name).render(bindings, variant)?;
        Ok(vec![ChatMessage::user(text)])
    }

    pub fn render_text(
        &self,
        name: TemplateName,
        bindings: &Bindings,
        variant: u32,
    ) -> Result<String, PromptError> {
        self.get(name).render(bindings, variant)
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}
