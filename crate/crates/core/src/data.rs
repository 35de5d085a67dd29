//! Instruction records, prompt templates, byte-level tokenization and
//! padded batches with next-token labels.
//!
//! Token ids `0..=255` are raw bytes, [`PAD`] is 256 and [`EOS`] is 257.
//! Loss is supervised on response bytes and the closing EOS only.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod synthetic;

pub const PAD: usize = 256;
pub const EOS: usize = 257;
pub const VOCAB_SIZE: usize = 258;
/// Label value for positions that carry no loss.
pub const IGNORE: usize = usize::MAX;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("prompt of {prompt_len} tokens leaves no room for a response within {max_seq_len}")]
    PromptTooLong { prompt_len: usize, max_seq_len: usize },
    #[error("response truncated away entirely: prompt of {prompt_len} tokens plus EOS fills {max_seq_len}")]
    ResponseTruncatedAway { prompt_len: usize, max_seq_len: usize },
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("max_seq_len must be at least 8, got {0}")]
    MaxSeqLenTooSmall(usize),
    #[error("cannot build a batch from zero examples")]
    EmptyBatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
    pub output: String,
}

impl InstructionRecord {
    pub fn validate(&self) -> Result<(), String> {
        if self.instruction.trim().is_empty() {
            return Err("\"instruction\" is empty".into());
        }
        if self.output.trim().is_empty() {
            return Err("\"output\" is empty".into());
        }
        Ok(())
    }

    fn input_text(&self) -> Option<&str> {
        self.input.as_deref().filter(|s| !s.trim().is_empty())
    }
}

/// Reads one JSON object per line. Blank lines are skipped; any malformed or
/// invalid line stops the load with its 1-based line number.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<InstructionRecord>, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_jsonl(&text)
}

pub fn parse_jsonl(text: &str) -> Result<Vec<InstructionRecord>, DataError> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: InstructionRecord = serde_json::from_str(line).map_err(|e| DataError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        record
            .validate()
            .map_err(|message| DataError::Parse { line: i + 1, message })?;
        records.push(record);
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    /// The Alpaca instruction / input / response scaffold.
    Alpaca,
    /// Instruction (and input, if any) followed by a blank line.
    #[default]
    Plain,
}

impl std::str::FromStr for Template {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "alpaca" => Ok(Template::Alpaca),
            "plain" => Ok(Template::Plain),
            other => Err(format!("unknown template `{other}` (expected alpaca or plain)")),
        }
    }
}

pub fn render_prompt(record: &InstructionRecord, template: Template) -> String {
    match (template, record.input_text()) {
        (Template::Alpaca, Some(input)) => format!(
            "Below is an instruction that describes a task, paired with an input that provides \
             further context. Write a response that appropriately completes the request.\n\n\
             ### Instruction:\n{}\n\n### Input:\n{}\n\n### Response:\n",
            record.instruction, input
        ),
        (Template::Alpaca, None) => format!(
            "Below is an instruction that describes a task. Write a response that appropriately \
             completes the request.\n\n### Instruction:\n{}\n\n### Response:\n",
            record.instruction
        ),
        (Template::Plain, Some(input)) => format!("{}\n{}\n\n", record.instruction, input),
        (Template::Plain, None) => format!("{}\n\n", record.instruction),
    }
}

pub fn encode(text: &str) -> Vec<usize> {
    encode_bytes(text.as_bytes())
}

pub fn encode_bytes(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| usize::from(b)).collect()
}

/// Drops special tokens and returns the raw bytes.
pub fn decode_bytes(tokens: &[usize]) -> Vec<u8> {
    tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect()
}

pub fn decode(tokens: &[usize]) -> String {
    String::from_utf8_lossy(&decode_bytes(tokens)).into_owned()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedExample {
    /// Prompt bytes, response bytes, then [`EOS`].
    pub tokens: Vec<usize>,
    /// Index of the first response token (or of EOS for an empty response).
    pub response_start: usize,
}

impl TokenizedExample {
    pub fn true_length(&self) -> usize {
        self.tokens.len()
    }

    pub fn prompt(&self) -> &[usize] {
        &self.tokens[..self.response_start]
    }
}

/// Tokenizes a prompt/response pair, truncating the response tail so the
/// whole sequence fits in `max_seq_len` with EOS kept last.
pub fn tokenize_and_mask(prompt: &str, response: &str, max_seq_len: usize) -> Result<TokenizedExample, DataError> {
    if max_seq_len < 8 {
        return Err(DataError::MaxSeqLenTooSmall(max_seq_len));
    }
    let prompt_tokens = encode(prompt);
    if prompt_tokens.is_empty() {
        return Err(DataError::EmptyPrompt);
    }
    let room = max_seq_len.saturating_sub(prompt_tokens.len() + 1);
    if prompt_tokens.len() >= max_seq_len {
        return Err(DataError::PromptTooLong {
            prompt_len: prompt_tokens.len(),
            max_seq_len,
        });
    }
    if room == 0 && !response.is_empty() {
        return Err(DataError::ResponseTruncatedAway {
            prompt_len: prompt_tokens.len(),
            max_seq_len,
        });
    }
    let response_tokens = encode(response);
    let kept = response_tokens.len().min(room);
    let mut tokens = prompt_tokens;
    let response_start = tokens.len();
    tokens.extend_from_slice(&response_tokens[..kept]);
    tokens.push(EOS);
    Ok(TokenizedExample { tokens, response_start })
}

pub fn tokenize_record(
    record: &InstructionRecord,
    template: Template,
    max_seq_len: usize,
) -> Result<TokenizedExample, DataError> {
    tokenize_and_mask(&render_prompt(record, template), &record.output, max_seq_len)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub batch_size: usize,
    pub seq_len: usize,
    /// `[B, L]` row-major, [`PAD`]-filled.
    pub tokens: Vec<usize>,
    /// `[B, L]`; `labels[b][t]` is the token at `t + 1` on supervised
    /// positions and [`IGNORE`] elsewhere.
    pub labels: Vec<usize>,
    pub lengths: Vec<usize>,
    /// Stable per-row keys (dataset indices) used to address noise streams.
    pub ids: Vec<u64>,
}

impl Batch {
    pub fn loss_mask(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != IGNORE).collect()
    }

    pub fn with_ids(mut self, ids: Vec<u64>) -> Self {
        assert_eq!(ids.len(), self.batch_size);
        self.ids = ids;
        self
    }

    /// The batch stacked on top of itself (`2B` rows).
    pub fn duplicated(&self) -> Batch {
        let twice = |v: &Vec<usize>| v.iter().chain(v).copied().collect::<Vec<_>>();
        Batch {
            batch_size: 2 * self.batch_size,
            seq_len: self.seq_len,
            tokens: twice(&self.tokens),
            labels: twice(&self.labels),
            lengths: twice(&self.lengths),
            ids: self.ids.iter().chain(&self.ids).copied().collect(),
        }
    }
}

pub fn build_batch(examples: &[&TokenizedExample]) -> Result<Batch, DataError> {
    if examples.is_empty() {
        return Err(DataError::EmptyBatch);
    }
    let seq_len = examples.iter().map(|e| e.true_length()).max().unwrap_or(0);
    let mut tokens = Vec::with_capacity(examples.len() * seq_len);
    let mut labels = Vec::with_capacity(examples.len() * seq_len);
    for ex in examples {
        let n = ex.true_length();
        tokens.extend_from_slice(&ex.tokens);
        tokens.extend(std::iter::repeat_n(PAD, seq_len - n));
        for t in 0..seq_len {
            let supervised = t + 1 >= ex.response_start && t + 1 < n;
            labels.push(if supervised { ex.tokens[t + 1] } else { IGNORE });
        }
    }
    Ok(Batch {
        batch_size: examples.len(),
        seq_len,
        tokens,
        labels,
        lengths: examples.iter().map(|e| e.true_length()).collect(),
        ids: (0..examples.len() as u64).collect(),
    })
}
