//! Prompt sets: JSON-lines files with an `id` and either a token array or a
//! string that is mapped through [`tokenize_text`].

use std::collections::HashSet;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{TokenId, Vocabulary};
use crate::rng::stream;
use crate::toy::tokenize_text;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PromptBody {
    Tokens(Vec<TokenId>),
    Text(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub id: String,
    pub prompt: PromptBody,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub tokens: Vec<TokenId>,
}

impl PromptRecord {
    pub fn resolve(&self, vocab: &Vocabulary) -> Result<Prompt> {
        let tokens = match &self.prompt {
            PromptBody::Tokens(t) => t.clone(),
            PromptBody::Text(s) => tokenize_text(s, vocab),
        };
        for &t in &tokens {
            vocab.check(t)?;
        }
        Ok(Prompt { id: self.id.clone(), tokens })
    }
}

pub fn parse_prompts(text: &str, vocab: &Vocabulary) -> Result<Vec<Prompt>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PromptRecord =
            serde_json::from_str(line).map_err(|e| Error::Input(format!("prompt line {}: {e}", i + 1)))?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::Input(format!("duplicate prompt id {:?}", rec.id)));
        }
        out.push(rec.resolve(vocab)?);
    }
    Ok(out)
}

pub fn load_prompts(path: &Path, vocab: &Vocabulary) -> Result<Vec<Prompt>> {
    let file = std::fs::File::open(path)?;
    let mut text = String::new();
    for line in std::io::BufReader::new(file).lines() {
        text.push_str(&line?);
        text.push('\n');
    }
    parse_prompts(&text, vocab)
}

pub fn save_prompts(prompts: &[Prompt], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for p in prompts {
        let rec = PromptRecord { id: p.id.clone(), prompt: PromptBody::Tokens(p.tokens.clone()) };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// `count` prompts of one to three non-EOS tokens, ids `p000`, `p001`, ...
pub fn synthetic_prompts(count: usize, vocab: &Vocabulary, seed: u64) -> Vec<Prompt> {
    let ids: Vec<TokenId> = vocab.tokens().filter(|&t| t != vocab.eos()).collect();
    let width = count.saturating_sub(1).to_string().len().max(3);
    (0..count)
        .map(|i| {
            let mut rng = stream(seed, &[0x70, i as u64]);
            let len = rng.gen_range(1..=3);
            let tokens = (0..len).map(|_| ids[rng.gen_range(0..ids.len())]).collect();
            Prompt { id: format!("p{i:0width$}"), tokens }
        })
        .collect()
}
