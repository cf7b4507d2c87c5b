//! Keyboard text cleaning.
//!
//! The pipeline runs in a fixed order: drop emails, hashtags, links,
//! mentions and tokens with digits; replace emoji with their CLDR short
//! names; strip punctuation; lowercase and split; expand abbreviations;
//! squeeze letter runs; optionally autocorrect. Every output token matches
//! `[a-z]+`.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

const BUNDLED_ABBREVIATIONS: &str = include_str!("../data/abbreviations.tsv");
const BUNDLED_EMOJI: &str = include_str!("../data/emoji.tsv");

#[derive(Debug, Clone)]
pub struct PrepConfig {
    abbreviations: HashMap<String, Vec<String>>,
    emoji: EmojiTable,
    pub autocorrect_enabled: bool,
    pub dictionary: BTreeSet<String>,
    pub max_letter_run: usize,
}

impl Default for PrepConfig {
    fn default() -> Self {
        let abbreviations = parse_table(BUNDLED_ABBREVIATIONS, "abbreviations.tsv")
            .expect("bundled abbreviation table parses");
        let emoji = parse_table(BUNDLED_EMOJI, "emoji.tsv").expect("bundled emoji table parses");
        PrepConfig::new(abbreviations, emoji).expect("bundled tables are valid")
    }
}

impl PrepConfig {
    /// Builds a config from explicit tables, checking their invariants.
    pub fn new(
        abbreviations: HashMap<String, Vec<String>>,
        emoji: HashMap<String, Vec<String>>,
    ) -> Result<Self> {
        for key in abbreviations.keys() {
            if key.is_empty() || key.chars().any(|c| c.is_whitespace() || c.is_uppercase()) {
                return Err(Error::Config(format!(
                    "abbreviation key `{key}` must be a single lowercase token"
                )));
            }
        }
        for (key, words) in &emoji {
            if words.is_empty() || !words.iter().all(|w| is_lower_alpha(w)) {
                return Err(Error::Config(format!(
                    "emoji `{key}` must map to lowercase alphabetic words"
                )));
            }
        }
        Ok(PrepConfig {
            abbreviations,
            emoji: EmojiTable::new(emoji),
            autocorrect_enabled: false,
            dictionary: BTreeSet::new(),
            max_letter_run: 2,
        })
    }

    pub fn with_autocorrect(mut self, dictionary: BTreeSet<String>) -> Self {
        self.autocorrect_enabled = true;
        self.dictionary = dictionary;
        self
    }

    pub fn abbreviations(&self) -> &HashMap<String, Vec<String>> {
        &self.abbreviations
    }

    pub fn emoji_names(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.emoji.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }
}

/// Longest-match lookup over emoji codepoint sequences.
#[derive(Debug, Clone, Default)]
struct EmojiTable {
    entries: HashMap<String, Vec<String>>,
    // first char -> keys starting with it, longest first
    by_first: HashMap<char, Vec<String>>,
}

impl EmojiTable {
    fn new(entries: HashMap<String, Vec<String>>) -> Self {
        let mut by_first: HashMap<char, Vec<String>> = HashMap::new();
        for key in entries.keys() {
            if let Some(c) = key.chars().next() {
                by_first.entry(c).or_default().push(key.clone());
            }
        }
        for keys in by_first.values_mut() {
            keys.sort_by(|a, b| b.chars().count().cmp(&a.chars().count()).then(a.cmp(b)));
        }
        EmojiTable { entries, by_first }
    }

    fn replace(&self, token: &str) -> String {
        let mut out = String::with_capacity(token.len());
        let mut rest = token;
        while let Some(c) = rest.chars().next() {
            let hit = self
                .by_first
                .get(&c)
                .and_then(|keys| keys.iter().find(|k| rest.starts_with(k.as_str())));
            if let Some(key) = hit {
                out.push(' ');
                out.push_str(&self.entries[key].join(" "));
                out.push(' ');
                rest = &rest[key.len()..];
                continue;
            }
            if is_emoji_codepoint(c) {
                out.push(' ');
            } else {
                out.push(c);
            }
            rest = &rest[c.len_utf8()..];
        }
        out
    }
}

fn is_emoji_codepoint(c: char) -> bool {
    matches!(c as u32,
        0x1F000..=0x1FAFF
        | 0x2300..=0x23FF
        | 0x2600..=0x27BF
        | 0x2B00..=0x2BFF
        | 0x200D
        | 0x20E3
        | 0xFE0E..=0xFE0F
        | 0xE0020..=0xE007F)
}

fn is_lower_alpha(w: &str) -> bool {
    !w.is_empty() && w.bytes().all(|b| b.is_ascii_lowercase())
}

/// Parses a `key<TAB>replacement words` table. Blank lines are skipped.
pub fn parse_table(text: &str, origin: &str) -> Result<HashMap<String, Vec<String>>> {
    let mut table = HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(origin, idx + 1, "expected key<TAB>replacement"))?;
        let words: Vec<String> = value.split_whitespace().map(str::to_owned).collect();
        if key.is_empty() || words.is_empty() {
            return Err(Error::parse(origin, idx + 1, "empty key or replacement"));
        }
        table.insert(key.to_owned(), words);
    }
    Ok(table)
}

pub fn load_table(path: &Path) -> Result<HashMap<String, Vec<String>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_table(&text, &path.display().to_string())
}

fn is_dropped_token(token: &str) -> bool {
    if token.contains('@') || token.chars().any(char::is_numeric) {
        return true;
    }
    let trimmed = token.trim_start_matches(|c: char| c.is_ascii_punctuation() && c != '#');
    if trimmed.starts_with('#') {
        return true;
    }
    let lower = trimmed.to_lowercase();
    lower.contains("://") || lower.starts_with("www.")
}

pub fn clean_text(raw: &str, cfg: &PrepConfig) -> Vec<String> {
    let mut words = String::new();
    for token in raw.split_whitespace().filter(|t| !is_dropped_token(t)) {
        let replaced = cfg.emoji.replace(token);
        // punctuation, symbols and non-ASCII letters go; whitespace separates
        let stripped: String = replaced
            .chars()
            .filter(|c| c.is_ascii_alphabetic() || c.is_whitespace())
            .collect();
        words.push_str(&stripped);
        words.push(' ');
    }
    let tokens: Vec<String> = words
        .to_ascii_lowercase()
        .split_whitespace()
        .map(str::to_owned)
        .collect();
    let expanded = expand_abbreviations(&tokens, &cfg.abbreviations);
    let squeezed: Vec<String> = expanded
        .iter()
        .map(|t| squeeze_runs(t, cfg.max_letter_run))
        .collect();
    if cfg.autocorrect_enabled {
        autocorrect(&squeezed, &cfg.dictionary)
    } else {
        squeezed
    }
}

/// Single left-to-right pass; expansions are never re-expanded.
pub fn expand_abbreviations(tokens: &[String], table: &HashMap<String, Vec<String>>) -> Vec<String> {
    let mut out = Vec::with_capacity(tokens.len());
    for token in tokens {
        match table.get(token) {
            Some(expansion) => out.extend(expansion.iter().cloned()),
            None => out.push(token.clone()),
        }
    }
    out
}

/// Caps every run of one repeated letter at `max_run` characters.
pub fn squeeze_runs(token: &str, max_run: usize) -> String {
    let max_run = max_run.max(1);
    let mut out = String::with_capacity(token.len());
    let mut prev = None;
    let mut run = 0;
    for c in token.chars() {
        if Some(c) == prev && c.is_alphabetic() {
            run += 1;
        } else {
            prev = Some(c);
            run = 1;
        }
        if run <= max_run {
            out.push(c);
        }
    }
    out
}

/// Replaces each out-of-dictionary token with the lexicographically
/// smallest dictionary word one edit away (insertion, deletion,
/// substitution or adjacent transposition), if there is one.
pub fn autocorrect(tokens: &[String], dictionary: &BTreeSet<String>) -> Vec<String> {
    tokens
        .iter()
        .map(|t| {
            if dictionary.contains(t) {
                return t.clone();
            }
            dictionary
                .iter()
                .find(|w| within_one_edit(t, w))
                .cloned()
                .unwrap_or_else(|| t.clone())
        })
        .collect()
}

fn within_one_edit(a: &str, b: &str) -> bool {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a == b {
        return false;
    }
    let prefix = a.iter().zip(&b).take_while(|(x, y)| x == y).count();
    match a.len() as isize - b.len() as isize {
        0 => {
            let (ra, rb) = (&a[prefix..], &b[prefix..]);
            if ra[1..] == rb[1..] {
                return true;
            }
            ra.len() >= 2 && ra[0] == rb[1] && ra[1] == rb[0] && ra[2..] == rb[2..]
        }
        1 => a[prefix + 1..] == b[prefix..],
        -1 => a[prefix..] == b[prefix + 1..],
        _ => false,
    }
}
