use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::templates::{area_bins, land_use_answers, traffic_answers, water_type_answers, TEMPLATES};
use super::QaError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub answer: String,
    /// Count carried by a numeric answer; `"9+"` carries the cap.
    pub numeric: Option<u32>,
}

/// Closed answer set with dense class indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerVocab {
    pub count_cap: u32,
    pub entries: Vec<VocabEntry>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl AnswerVocab {
    /// Enumerates every answer any template can produce.
    pub fn build(count_cap: u32) -> Self {
        let mut entries = vec![
            VocabEntry { answer: "No".into(), numeric: None },
            VocabEntry { answer: "Yes".into(), numeric: None },
        ];
        for n in 0..=count_cap {
            entries.push(VocabEntry {
                answer: n.to_string(),
                numeric: Some(n),
            });
        }
        entries.push(VocabEntry {
            answer: format!("{count_cap}+"),
            numeric: Some(count_cap),
        });
        let textual = water_type_answers()
            .into_iter()
            .chain(area_bins().iter().map(|s| s.to_string()))
            .chain(traffic_answers().iter().map(|s| s.to_string()))
            .chain(land_use_answers());
        for a in textual {
            if !entries.iter().any(|e| e.answer == a) {
                entries.push(VocabEntry { answer: a, numeric: None });
            }
        }
        Self::from_entries(count_cap, entries)
    }

    pub fn from_entries(count_cap: u32, entries: Vec<VocabEntry>) -> Self {
        let index = entries.iter().enumerate().map(|(i, e)| (e.answer.clone(), i)).collect();
        Self {
            count_cap,
            entries,
            index,
        }
    }

    /// Restores the lookup table after deserialization.
    pub fn reindexed(self) -> Self {
        Self::from_entries(self.count_cap, self.entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, answer: &str) -> Option<usize> {
        self.index.get(answer).copied()
    }

    pub fn require(&self, answer: &str) -> Result<usize, QaError> {
        self.index_of(answer).ok_or_else(|| QaError::UnknownAnswer(answer.into()))
    }

    pub fn answer(&self, idx: usize) -> &str {
        &self.entries[idx].answer
    }

    pub fn numeric(&self, idx: usize) -> Option<u32> {
        self.entries[idx].numeric
    }

    /// Indices of the numeric entries.
    pub fn numeric_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.entries[i].numeric.is_some()).collect()
    }

    /// Answer string for a count, clamped to `"<cap>+"` above the cap.
    pub fn count_answer(&self, n: usize) -> (String, u32) {
        if n as u64 > self.count_cap as u64 {
            (format!("{}+", self.count_cap), self.count_cap)
        } else {
            (n.to_string(), n as u32)
        }
    }
}

/// Lower-cased words with `?` and `,` stripped.
pub fn tokenize(question: &str) -> Vec<String> {
    question
        .split_whitespace()
        .map(|w| w.trim_matches(|c| c == '?' || c == ',' || c == '.').to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Word vocabulary of the template questions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionVocab {
    pub tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl QuestionVocab {
    pub fn build() -> Self {
        let words: BTreeSet<String> = TEMPLATES.iter().flat_map(|t| tokenize(t.question)).collect();
        Self::from_tokens(words.into_iter().collect())
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn reindexed(self) -> Self {
        Self::from_tokens(self.tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn encode(&self, question: &str) -> Result<Vec<usize>, QaError> {
        let ids = tokenize(question)
            .into_iter()
            .map(|w| self.index.get(&w).copied().ok_or(QaError::UnknownToken(w)))
            .collect::<Result<Vec<_>, _>>()?;
        if ids.is_empty() {
            return Err(QaError::Usage("empty question".into()));
        }
        Ok(ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indices_dense_and_numeric_contiguous() {
        let v = AnswerVocab::build(9);
        for (i, e) in v.entries.iter().enumerate() {
            assert_eq!(v.index_of(&e.answer), Some(i));
        }
        let nums: Vec<u32> = v.entries.iter().filter(|e| !e.answer.ends_with('+')).filter_map(|e| e.numeric).collect();
        assert_eq!(nums, (0..=9).collect::<Vec<_>>());
        assert_eq!(v.numeric(v.index_of("9+").unwrap()), Some(9));
        assert_eq!(v.count_answer(12), ("9+".to_string(), 9));
        assert_eq!(v.count_answer(5), ("5".to_string(), 5));
    }

    #[test]
    fn tokenizer_and_encoding() {
        assert_eq!(tokenize("How many buildings are in this scene?"), vec!["how", "many", "buildings", "are", "in", "this", "scene"]);
        let q = QuestionVocab::build();
        assert!(q.encode("How many buildings are in this scene?").is_ok());
        assert!(matches!(q.encode("How many dragons?"), Err(QaError::UnknownToken(_))));
    }

    #[test]
    fn serde_roundtrip_restores_lookup() {
        let v = AnswerVocab::build(9);
        let json = serde_json::to_string(&v).unwrap();
        let back: AnswerVocab = serde_json::from_str::<AnswerVocab>(&json).unwrap().reindexed();
        assert_eq!(back.index_of("Yes"), v.index_of("Yes"));
    }
}
