//! Factual-element extraction through a conversational-LLM contract.
//!
//! The question template wraps the case description in single angle brackets
//! and each statute in double angle brackets, then asks for a bracketed list
//! of factual elements. [`MockExtractorClient`] answers that question
//! deterministically by scanning sentences, so the whole pipeline runs
//! without a network; [`RemoteHttpClient`] posts the same messages to a
//! configured endpoint for opt-in runs against a real model.

use std::io::{Read, Write};
use std::net::TcpStream;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corpus::Article;
use crate::error::{Error, Result};
use crate::matcher::Lexicon;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "user".into(),
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "assistant".into(),
            content: content.into(),
        }
    }
}

/// Ordered factual elements, whitespace- and marker-trimmed, never empty
/// strings.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FactList {
    pub elements: Vec<String>,
}

impl FactList {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn joined(&self, separator: &str) -> String {
        self.elements.join(separator)
    }
}

const DEFINITION_MSG: &str = "Factual elements in a case description refer to: specific facts \
used to describe and prove the circumstances of the case, including basic information such as \
time, location, characters, and the sequence of events.";

const ACK_MSG: &str = "That's correct. Factual elements in a case description are indeed the \
specific details used to outline and substantiate the circumstances of a case.";

/// Literal angle brackets inside embedded text would break the bracket
/// protocol, so they are replaced with fullwidth equivalents first.
fn escape_brackets(text: &str) -> String {
    text.replace('<', "＜").replace('>', "＞")
}

/// The three-message consultation: a definition of factual elements, an
/// acknowledgment, and the instruction embedding the case in `< >` and each
/// statute in `<< >>`.
pub fn build_question(case_text: &str, articles: &[Article]) -> Result<Vec<ChatMessage>> {
    if articles.is_empty() {
        return Err(Error::Data(
            "factual-element consultation needs at least one statute".into(),
        ));
    }
    let wrapped_articles = articles
        .iter()
        .map(|a| format!("<<{}>>", escape_brackets(&a.text)))
        .collect::<Vec<_>>()
        .join(" ");
    let instruction = format!(
        "Please analyze the case description in <{}> based on the legal articles in {}, and \
list 5-10 factual elements into []",
        escape_brackets(case_text),
        wrapped_articles
    );
    Ok(vec![
        ChatMessage::user(DEFINITION_MSG),
        ChatMessage::assistant(ACK_MSG),
        ChatMessage::user(instruction),
    ])
}

fn strip_list_marker(line: &str) -> &str {
    let mut rest = line.trim_start();
    // leading bullets
    while let Some(stripped) = rest
        .strip_prefix('-')
        .or_else(|| rest.strip_prefix('*'))
        .or_else(|| rest.strip_prefix('•'))
        .or_else(|| rest.strip_prefix('·'))
    {
        rest = stripped.trim_start();
    }
    // leading enumeration like "3." / "3)" / "3、"
    let digits = rest.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 {
        let after = &rest[digits..];
        if let Some(stripped) = after
            .strip_prefix('.')
            .or_else(|| after.strip_prefix(')'))
            .or_else(|| after.strip_prefix('、'))
        {
            rest = stripped.trim_start();
        }
    }
    rest.trim()
}

/// Parse the reply into a fact list: the first `[...]` span split on
/// newlines/semicolons with list markers stripped. A reply without brackets
/// degrades to line splitting (logged); an empty reply yields an empty list.
pub fn parse_fact_list(response: &str) -> FactList {
    if response.trim().is_empty() {
        eprintln!("warning: empty extraction response");
        return FactList::default();
    }
    let span = response.find('[').and_then(|open| {
        response[open + 1..]
            .find(']')
            .map(|close| &response[open + 1..open + 1 + close])
    });
    let body = match span {
        Some(inner) => inner,
        None => {
            eprintln!("warning: extraction response had no bracketed list; splitting lines");
            response
        }
    };
    let elements = body
        .split(['\n', ';', '；'])
        .map(strip_list_marker)
        .filter(|e| !e.is_empty())
        .map(|e| e.to_string())
        .collect();
    FactList { elements }
}

/// Sentence segments split on the usual terminators, in order.
pub fn split_sentences(text: &str) -> Vec<String> {
    text.split(['。', '.', '!', '?', '；', ';', '！', '？'])
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.to_string())
        .collect()
}

fn shares_bigram(sentence: &str, article: &str) -> bool {
    let chars: Vec<char> = sentence.chars().filter(|c| !c.is_whitespace()).collect();
    if chars.len() < 2 {
        return false;
    }
    let compact: String = article.chars().filter(|c| !c.is_whitespace()).collect();
    chars.windows(2).any(|w| {
        let gram: String = w.iter().collect();
        compact.contains(&gram)
    })
}

/// Deterministic stand-in for the conversational model: answer with a
/// bracketed list of the case's sentences that contain a lexicon term or
/// share a 2-character fragment with any provided statute, capped at 10;
/// falls back to the first sentence when nothing qualifies.
pub fn mock_extract(case_text: &str, article_texts: &[String], lexicon: &Lexicon) -> String {
    let sentences = split_sentences(case_text);
    let mut picked: Vec<&String> = sentences
        .iter()
        .filter(|s| {
            !crate::matcher::match_snippets(lexicon, s).is_empty()
                || article_texts.iter().any(|a| shares_bigram(s, a))
        })
        .take(10)
        .collect();
    if picked.is_empty() {
        if let Some(first) = sentences.first() {
            picked.push(first);
        }
    }
    let body = picked
        .iter()
        .map(|s| s.as_str())
        .collect::<Vec<_>>()
        .join("\n");
    format!("[{body}]")
}

/// Anything that can answer the consultation messages.
pub trait LlmClient {
    fn ask(&self, messages: &[ChatMessage]) -> Result<String>;
}

/// Pure-function client backed by [`mock_extract`]. It recovers the case and
/// statute texts from the bracket protocol of the final user message, so it
/// exercises the same surface a remote model would see.
#[derive(Debug, Clone)]
pub struct MockExtractorClient {
    lexicon: Lexicon,
}

impl MockExtractorClient {
    pub fn new(lexicon: Lexicon) -> Self {
        MockExtractorClient { lexicon }
    }
}

fn parse_instruction(content: &str) -> Option<(String, Vec<String>)> {
    // statutes first: every <<...>> span
    let mut articles = Vec::new();
    let mut rest = content;
    let mut stripped = String::new();
    while let Some(open) = rest.find("<<") {
        let close = rest[open + 2..].find(">>")? + open + 2;
        stripped.push_str(&rest[..open]);
        articles.push(rest[open + 2..close].to_string());
        rest = &rest[close + 2..];
    }
    stripped.push_str(rest);
    // the remaining single-bracket span is the case description
    let open = stripped.find('<')?;
    let close = stripped[open + 1..].find('>')? + open + 1;
    Some((stripped[open + 1..close].to_string(), articles))
}

impl LlmClient for MockExtractorClient {
    fn ask(&self, messages: &[ChatMessage]) -> Result<String> {
        let instruction = messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .ok_or_else(|| Error::Data("no user message in consultation".into()))?;
        let (case_text, articles) = parse_instruction(&instruction.content)
            .ok_or_else(|| Error::Data("consultation message missing bracket protocol".into()))?;
        Ok(mock_extract(&case_text, &articles, &self.lexicon))
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    messages: &'a [ChatMessage],
}

#[derive(Deserialize)]
struct WireResponse {
    content: String,
}

/// Minimal HTTP client for a `{"messages": [...]}` -> `{"content": "..."}`
/// endpoint. Plain `http://host:port/path` only; each request opens one
/// connection with the configured timeout.
#[derive(Debug, Clone)]
pub struct RemoteHttpClient {
    endpoint: String,
    timeout: Duration,
}

impl RemoteHttpClient {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        RemoteHttpClient {
            endpoint: endpoint.into(),
            timeout,
        }
    }

    fn split_endpoint(&self) -> Result<(String, String)> {
        let rest = self
            .endpoint
            .strip_prefix("http://")
            .ok_or_else(|| Error::Usage(format!("endpoint must be http:// (got {})", self.endpoint)))?;
        let (host, path) = match rest.find('/') {
            Some(i) => (&rest[..i], &rest[i..]),
            None => (rest, "/"),
        };
        let host = if host.contains(':') {
            host.to_string()
        } else {
            format!("{host}:80")
        };
        Ok((host, path.to_string()))
    }
}

impl LlmClient for RemoteHttpClient {
    fn ask(&self, messages: &[ChatMessage]) -> Result<String> {
        let (host, path) = self.split_endpoint()?;
        let body = serde_json::to_string(&WireRequest { messages })
            .map_err(|e| Error::Transport(e.to_string()))?;

        let transport = |e: std::io::Error| Error::Transport(format!("{}: {e}", self.endpoint));
        let stream = TcpStream::connect(&host).map_err(transport)?;
        stream.set_read_timeout(Some(self.timeout)).map_err(transport)?;
        stream.set_write_timeout(Some(self.timeout)).map_err(transport)?;
        let mut stream = stream;
        let request = format!(
            "POST {path} HTTP/1.1\r\nHost: {host}\r\nContent-Type: application/json\r\n\
Content-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        );
        stream.write_all(request.as_bytes()).map_err(transport)?;

        let mut raw = Vec::new();
        stream.read_to_end(&mut raw).map_err(transport)?;
        let text = String::from_utf8_lossy(&raw);
        let mut sections = text.splitn(2, "\r\n\r\n");
        let head = sections.next().unwrap_or("");
        let payload = sections.next().unwrap_or("");
        let status = head
            .lines()
            .next()
            .and_then(|l| l.split_whitespace().nth(1))
            .unwrap_or("");
        if status != "200" {
            return Err(Error::Transport(format!(
                "{} replied with status {status:?}",
                self.endpoint
            )));
        }
        let parsed: WireResponse = serde_json::from_str(payload.trim())
            .map_err(|e| Error::Transport(format!("bad response body: {e}")))?;
        Ok(parsed.content)
    }
}

/// Full consultation: build the question, ask (one retry on transport
/// errors), parse the reply. `max_prompt_chars` guards against oversized
/// prompts before anything is sent.
pub fn extract_facts(
    client: &dyn LlmClient,
    case_text: &str,
    articles: &[Article],
    max_prompt_chars: usize,
) -> Result<FactList> {
    let messages = build_question(case_text, articles)?;
    let total: usize = messages.iter().map(|m| m.content.chars().count()).sum();
    if total > max_prompt_chars {
        return Err(Error::Data(format!(
            "consultation prompt has {total} chars, over the {max_prompt_chars} cap"
        )));
    }
    let response = match client.ask(&messages) {
        Ok(r) => r,
        Err(Error::Transport(first)) => {
            eprintln!("warning: consultation transport error, retrying: {first}");
            client.ask(&messages)?
        }
        Err(e) => return Err(e),
    };
    Ok(parse_fact_list(&response))
}
