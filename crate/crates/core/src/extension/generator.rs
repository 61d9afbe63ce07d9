use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::OnceLock;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const SYNTHETIC_NEWS: &str = include_str!("../../data/synthetic_news.json");

/// Everything a generator sees for one call. Real models consume `prompt`; mocks that
/// transform the input directly read `short_text`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationRequest<'a> {
    pub prompt: &'a str,
    pub short_text: &'a str,
    pub max_new_tokens: usize,
    pub beam_size: usize,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum GeneratorError {
    /// Worth retrying: connection failures, timeouts, 5xx/429 responses.
    #[error("transport error: {0}")]
    Transport(String),
    #[error("generator failed: {0}")]
    Fatal(String),
}

/// A conditional text generator producing the continuation it scores highest.
pub trait Generator: Send + Sync {
    fn name(&self) -> &str;
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<String, GeneratorError>;
}

/// Repeats the short text `repeat` times.
#[derive(Debug, Clone)]
pub struct MockEchoGenerator {
    pub repeat: usize,
}

impl MockEchoGenerator {
    pub fn new(repeat: usize) -> Self {
        MockEchoGenerator { repeat }
    }
}

impl Generator for MockEchoGenerator {
    fn name(&self) -> &str {
        "mock-echo"
    }

    fn generate(&self, request: &GenerationRequest<'_>) -> Result<String, GeneratorError> {
        let words: Vec<&str> = request.short_text.split_whitespace().collect();
        let mut out = Vec::with_capacity(words.len() * self.repeat);
        for _ in 0..self.repeat {
            out.extend_from_slice(&words);
        }
        Ok(out.join(" "))
    }
}

/// Fixed word → related-words table.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Lexicon(pub BTreeMap<String, Vec<String>>);

#[derive(Deserialize)]
struct SyntheticNews {
    lexicon: BTreeMap<String, Vec<String>>,
}

impl Lexicon {
    /// The table shipped with the synthetic news topics.
    pub fn builtin() -> &'static Lexicon {
        static LEX: OnceLock<Lexicon> = OnceLock::new();
        LEX.get_or_init(|| {
            let data: SyntheticNews = serde_json::from_str(SYNTHETIC_NEWS).expect("bundled lexicon parses");
            Lexicon(data.lexicon)
        })
    }

    /// Reads either a plain `{word: [related, ...]}` map or an object with a `lexicon` field.
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        match serde_json::from_str::<Lexicon>(text) {
            Ok(l) => Ok(l),
            Err(_) => serde_json::from_str::<SyntheticNews>(text).map(|d| Lexicon(d.lexicon)),
        }
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn related(&self, word: &str) -> &[String] {
        self.0.get(word).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Expands each word of the short text into the word followed by its related words.
/// Unknown words are kept as they are.
#[derive(Debug, Clone)]
pub struct MockLexiconGenerator {
    lexicon: Lexicon,
}

impl MockLexiconGenerator {
    pub fn new(lexicon: Lexicon) -> Self {
        MockLexiconGenerator { lexicon }
    }
}

impl Default for MockLexiconGenerator {
    fn default() -> Self {
        Self::new(Lexicon::builtin().clone())
    }
}

impl Generator for MockLexiconGenerator {
    fn name(&self) -> &str {
        "mock-lexicon"
    }

    fn generate(&self, request: &GenerationRequest<'_>) -> Result<String, GeneratorError> {
        let lowered = request.short_text.to_lowercase();
        let mut out: Vec<&str> = Vec::new();
        for word in lowered.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            out.push(word);
            out.extend(self.lexicon.related(word).iter().map(String::as_str));
        }
        Ok(out.join(" "))
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    prompt: &'a str,
    max_new_tokens: usize,
    beam_size: usize,
}

#[derive(Deserialize)]
struct WireResponse {
    text: String,
}

pub const DEFAULT_TOKEN_ENV: &str = "SHORTTOPIC_API_TOKEN";

/// HTTP client posting `{prompt, max_new_tokens, beam_size}` and reading `{text}`.
/// The bearer token, if any, comes from an environment variable.
pub struct RemoteGenerator {
    url: String,
    token: Option<String>,
    agent: ureq::Agent,
}

impl RemoteGenerator {
    pub fn new(url: impl Into<String>, token: Option<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        RemoteGenerator {
            url: url.into(),
            token,
            agent,
        }
    }

    pub fn from_env(url: impl Into<String>, token_env: &str, timeout: Duration) -> Self {
        Self::new(url, std::env::var(token_env).ok(), timeout)
    }
}

impl Generator for RemoteGenerator {
    fn name(&self) -> &str {
        "remote"
    }

    fn generate(&self, request: &GenerationRequest<'_>) -> Result<String, GeneratorError> {
        let mut req = self.agent.post(&self.url);
        if let Some(token) = &self.token {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let body = WireRequest {
            prompt: request.prompt,
            max_new_tokens: request.max_new_tokens,
            beam_size: request.beam_size,
        };
        match req.send_json(&body) {
            Ok(mut resp) => resp
                .body_mut()
                .read_json::<WireResponse>()
                .map(|r| r.text)
                .map_err(|e| GeneratorError::Transport(format!("bad response body: {e}"))),
            Err(ureq::Error::StatusCode(code)) if code == 429 || code >= 500 => {
                Err(GeneratorError::Transport(format!("http status {code}")))
            }
            Err(ureq::Error::StatusCode(code)) => Err(GeneratorError::Fatal(format!("http status {code}"))),
            Err(e) => Err(GeneratorError::Transport(e.to_string())),
        }
    }
}

/// Wraps a local decoder executable: the request JSON goes to stdin, `{text}` is read from stdout.
#[derive(Debug, Clone)]
pub struct CommandGenerator {
    program: String,
    args: Vec<String>,
}

impl CommandGenerator {
    pub fn new(program: impl Into<String>, args: Vec<String>) -> Self {
        CommandGenerator {
            program: program.into(),
            args,
        }
    }
}

impl Generator for CommandGenerator {
    fn name(&self) -> &str {
        "local"
    }

    fn generate(&self, request: &GenerationRequest<'_>) -> Result<String, GeneratorError> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| GeneratorError::Transport(format!("spawn {}: {e}", self.program)))?;
        let payload = serde_json::to_vec(&WireRequest {
            prompt: request.prompt,
            max_new_tokens: request.max_new_tokens,
            beam_size: request.beam_size,
        })
        .expect("request serializes");
        if let Some(mut stdin) = child.stdin.take() {
            stdin
                .write_all(&payload)
                .map_err(|e| GeneratorError::Transport(format!("write stdin: {e}")))?;
        }
        let output = child
            .wait_with_output()
            .map_err(|e| GeneratorError::Transport(e.to_string()))?;
        if !output.status.success() {
            return Err(GeneratorError::Transport(format!(
                "{} exited with {}: {}",
                self.program,
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        serde_json::from_slice::<WireResponse>(&output.stdout)
            .map(|r| r.text)
            .map_err(|e| GeneratorError::Fatal(format!("bad decoder output: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(text: &str) -> GenerationRequest<'_> {
        GenerationRequest {
            prompt: "unused",
            short_text: text,
            max_new_tokens: 500,
            beam_size: 5,
        }
    }

    #[test]
    fn echo_repeats() {
        assert_eq!(
            MockEchoGenerator::new(3).generate(&req("a b c")).unwrap(),
            "a b c a b c a b c"
        );
    }

    #[test]
    fn lexicon_expands_known_words() {
        let mut map = BTreeMap::new();
        map.insert("goal".to_string(), vec!["striker".to_string(), "match".to_string()]);
        let g = MockLexiconGenerator::new(Lexicon(map));
        assert_eq!(g.generate(&req("Late GOAL, again")).unwrap(), "late goal striker match again");
    }

    #[test]
    fn builtin_lexicon_loaded() {
        let lex = Lexicon::builtin();
        assert!(lex.0.len() >= 100);
        assert_eq!(lex.related("football").len(), 4);
    }

    #[test]
    fn command_generator_round_trip() {
        let g = CommandGenerator::new(
            "sh",
            vec!["-c".into(), r#"cat > /dev/null; printf '{"text":"from decoder"}'"#.into()],
        );
        assert_eq!(g.generate(&req("x")).unwrap(), "from decoder");
        let bad = CommandGenerator::new("sh", vec!["-c".into(), "exit 3".into()]);
        assert!(matches!(bad.generate(&req("x")), Err(GeneratorError::Transport(_))));
    }
}
