//! Corpus ingestion, sentence segmentation, vocabulary construction,
//! tokenization, and generation of masked/shuffled training instances.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const MASK: u32 = 2;
pub const UNK: u32 = 3;
pub const PAD: u32 = 4;
pub const RESERVED: [&str; 5] = ["<s>", "</s>", "[MASK]", "<unk>", "<pad>"];

/// A document: ordered sentences plus an optional reference summary that is
/// only ever consulted at evaluation time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub sentences: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<Vec<String>>,
}

/// Result of corpus loading; documents with no usable sentences are dropped
/// and counted rather than aborting the run.
#[derive(Debug)]
pub struct LoadedCorpus {
    pub documents: Vec<Document>,
    pub rejected: usize,
}

/// Reads a JSONL corpus: one object per line with `doc_id`, `sentences`,
/// and optional `summary`.
pub fn load_corpus(path: &Path) -> Result<LoadedCorpus> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("opening corpus {}", path.display()), e))?;
    let reader = BufReader::new(file);
    let mut documents = Vec::new();
    let mut rejected = 0;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading corpus {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut doc: Document = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        doc.sentences.retain(|s| !s.trim().is_empty());
        if doc.sentences.is_empty() {
            rejected += 1;
            continue;
        }
        documents.push(doc);
    }
    Ok(LoadedCorpus { documents, rejected })
}

pub fn save_corpus(docs: &[Document], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for doc in docs {
        serde_json::to_writer(&mut out, doc)
            .map_err(|e| Error::Parse { line: 0, msg: e.to_string() })?;
        out.push(b'\n');
    }
    std::fs::write(path, out)
        .map_err(|e| Error::io(format!("writing corpus {}", path.display()), e))
}

const ABBREVIATIONS: [&str; 16] = [
    "dr", "mr", "mrs", "ms", "prof", "st", "jr", "sr", "vs", "etc", "e.g", "i.e", "inc", "ltd",
    "co", "fig",
];

/// Rule-based sentence splitter: breaks after `.`, `!`, `?` followed by
/// whitespace and an uppercase letter (or end of text), unless the word
/// before the period is a known abbreviation.
pub fn segment(raw_text: &str) -> Vec<String> {
    let chars: Vec<char> = raw_text.chars().collect();
    let mut sentences = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '.' || c == '!' || c == '?' {
            let mut j = i + 1;
            while j < chars.len() && chars[j].is_whitespace() {
                j += 1;
            }
            let at_end = j >= chars.len();
            let next_upper = !at_end && chars[j].is_uppercase();
            let abbrev = c == '.' && ends_with_abbreviation(&chars[start..i]);
            if (at_end || (next_upper && j > i + 1)) && !abbrev {
                let sent: String = chars[start..=i].iter().collect();
                let sent = sent.trim().to_string();
                if !sent.is_empty() {
                    sentences.push(sent);
                }
                start = j;
                i = j;
                continue;
            }
        }
        i += 1;
    }
    if start < chars.len() {
        let tail: String = chars[start..].iter().collect();
        let tail = tail.trim().to_string();
        if !tail.is_empty() {
            sentences.push(tail);
        }
    }
    sentences
}

fn ends_with_abbreviation(prefix: &[char]) -> bool {
    let word: String = prefix
        .iter()
        .rev()
        .take_while(|c| !c.is_whitespace())
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    let word = word.trim_matches(|c: char| !c.is_alphanumeric() && c != '.');
    ABBREVIATIONS.contains(&word.to_lowercase().as_str())
}

/// Token vocabulary with fixed reserved ids 0..4 for
/// `<s>`, `</s>`, `[MASK]`, `<unk>`, `<pad>`.
#[derive(Debug, Clone)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Vocab {
        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(tokens);
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { token_to_id, id_to_token }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved tokens are always present
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    /// Plain-text format: one non-reserved token per line, line number =
    /// id - 5.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for token in &self.id_to_token[RESERVED.len()..] {
            out.push_str(token);
            out.push('\n');
        }
        std::fs::write(path, out)
            .map_err(|e| Error::io(format!("writing vocab {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::io(format!("opening vocab {}", path.display()), e))?;
        let mut tokens = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(format!("reading vocab {}", path.display()), e))?;
            if !line.is_empty() {
                tokens.push(line);
            }
        }
        Ok(Vocab::from_tokens(tokens))
    }
}

fn tokenize_lower(sentence: &str) -> Vec<String> {
    sentence.split_whitespace().map(|t| t.to_lowercase()).collect()
}

/// Builds a lowercased whitespace vocabulary: tokens with count >= min_count,
/// ordered by (count desc, token asc) after the reserved ids.
pub fn build_vocab(corpus: &[Document], min_count: usize) -> Vocab {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for doc in corpus {
        for sentence in &doc.sentences {
            for token in tokenize_lower(sentence) {
                *counts.entry(token).or_insert(0) += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_count)
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocab::from_tokens(ranked.into_iter().map(|(t, _)| t).collect())
}

/// A document in model form: per-sentence id lists (each wrapped in BOS/EOS),
/// the flat concatenation, BOS boundary positions, and flat token positions.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDocument {
    pub sentences: Vec<Vec<u32>>,
    pub flat: Vec<u32>,
    pub boundary_index: Vec<usize>,
    pub positions: Vec<usize>,
}

impl EncodedDocument {
    pub fn from_sentences(sentences: Vec<Vec<u32>>) -> EncodedDocument {
        let mut flat = Vec::new();
        let mut boundary_index = Vec::with_capacity(sentences.len());
        for sent in &sentences {
            boundary_index.push(flat.len());
            flat.extend_from_slice(sent);
        }
        let positions = (0..flat.len()).collect();
        EncodedDocument { sentences, flat, boundary_index, positions }
    }

    pub fn num_sentences(&self) -> usize {
        self.sentences.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.flat.len()
    }

    /// Token positions restarting at 0 inside each sentence.
    pub fn positions_reset_per_sentence(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.flat.len());
        for sent in &self.sentences {
            out.extend(0..sent.len());
        }
        out
    }
}

/// Wraps each sentence in BOS/EOS and truncates: first to `max_sentences`,
/// then whole sentences are dropped from the end until the flat length fits
/// `max_tokens`. The first sentence is always kept, token-truncated if it
/// alone overflows.
pub fn encode(
    doc: &Document,
    vocab: &Vocab,
    max_tokens: usize,
    max_sentences: usize,
) -> EncodedDocument {
    let mut sentences: Vec<Vec<u32>> = Vec::new();
    for raw in doc.sentences.iter().take(max_sentences.max(1)) {
        let mut ids = vec![BOS];
        ids.extend(tokenize_lower(raw).iter().map(|t| vocab.id(t)));
        ids.push(EOS);
        sentences.push(ids);
    }
    let mut total = 0usize;
    let mut keep = 0usize;
    for sent in &sentences {
        if total + sent.len() > max_tokens {
            break;
        }
        total += sent.len();
        keep += 1;
    }
    if keep == 0 {
        // over-long first sentence: truncate its interior, keep BOS/EOS
        let interior = max_tokens.saturating_sub(2);
        let first = &sentences[0];
        let mut ids = vec![BOS];
        ids.extend(first[1..first.len() - 1].iter().take(interior).copied());
        ids.push(EOS);
        sentences = vec![ids];
    } else {
        sentences.truncate(keep);
    }
    EncodedDocument::from_sentences(sentences)
}

/// Maps ids back to tokens, dropping the BOS/EOS wrappers.
pub fn decode(doc: &EncodedDocument, vocab: &Vocab) -> Vec<Vec<String>> {
    doc.sentences
        .iter()
        .map(|sent| {
            sent[1..sent.len() - 1]
                .iter()
                .map(|&id| vocab.token(id).to_string())
                .collect()
        })
        .collect()
}

/// What happened to a sentence selected for masking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAction {
    Masked,
    RandomReplaced,
    Kept,
}

/// A masked training instance: the corrupted document, the set of selected
/// sentence indices, and the original sentences to regenerate.
#[derive(Debug, Clone)]
pub struct MaskedInstance {
    pub masked: EncodedDocument,
    pub masked_indices: Vec<usize>,
    pub actions: Vec<MaskAction>,
    pub targets: Vec<Vec<u32>>,
}

/// Pool of sentences used by the random-replacement branch.
pub struct SentencePool {
    sentences: Vec<Vec<u32>>,
}

impl SentencePool {
    pub fn from_docs(docs: &[EncodedDocument]) -> SentencePool {
        let sentences = docs
            .iter()
            .flat_map(|d| d.sentences.iter().cloned())
            .collect();
        SentencePool { sentences }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Option<&Vec<u32>> {
        if self.sentences.is_empty() {
            None
        } else {
            Some(&self.sentences[rng.gen_range(0..self.sentences.len())])
        }
    }
}

pub const MASK_SENTENCE_PROB: f64 = 0.15;
pub const MASK_BRANCH_PROB: f64 = 0.8;
pub const REPLACE_BRANCH_PROB: f64 = 0.1;

/// Selects each sentence with probability 0.15 (at least one is always
/// selected); a selected sentence is interior-masked with probability 0.8,
/// replaced by a random corpus sentence with probability 0.1, and kept
/// unchanged with probability 0.1. BOS/EOS are never masked.
pub fn make_masked<R: Rng>(
    doc: &EncodedDocument,
    pool: &SentencePool,
    max_tokens: usize,
    rng: &mut R,
) -> MaskedInstance {
    let n = doc.num_sentences();
    let mut selected: Vec<usize> = (0..n)
        .filter(|_| rng.gen::<f64>() < MASK_SENTENCE_PROB)
        .collect();
    if selected.is_empty() {
        selected.push(rng.gen_range(0..n));
    }
    let mut sentences = doc.sentences.clone();
    let mut actions = Vec::with_capacity(selected.len());
    let mut targets = Vec::with_capacity(selected.len());
    for &i in &selected {
        targets.push(doc.sentences[i].clone());
        let draw = rng.gen::<f64>();
        let action = if draw < MASK_BRANCH_PROB {
            MaskAction::Masked
        } else if draw < MASK_BRANCH_PROB + REPLACE_BRANCH_PROB {
            MaskAction::RandomReplaced
        } else {
            MaskAction::Kept
        };
        let action = match action {
            MaskAction::RandomReplaced => {
                let replacement = pool.sample(rng).cloned();
                match replacement {
                    Some(rep) => {
                        let new_len = doc.num_tokens() - sentences[i].len() + rep.len();
                        if new_len <= max_tokens {
                            sentences[i] = rep;
                            MaskAction::RandomReplaced
                        } else {
                            // replacement would overflow the model's position
                            // table; fall back to plain masking
                            mask_interior(&mut sentences[i]);
                            MaskAction::Masked
                        }
                    }
                    None => {
                        mask_interior(&mut sentences[i]);
                        MaskAction::Masked
                    }
                }
            }
            MaskAction::Masked => {
                mask_interior(&mut sentences[i]);
                MaskAction::Masked
            }
            MaskAction::Kept => MaskAction::Kept,
        };
        actions.push(action);
    }
    MaskedInstance {
        masked: EncodedDocument::from_sentences(sentences),
        masked_indices: selected,
        actions,
        targets,
    }
}

/// Replaces every interior token (not BOS/EOS) with the MASK id.
pub fn mask_interior(sentence: &mut [u32]) {
    let len = sentence.len();
    for t in sentence.iter_mut().take(len - 1).skip(1) {
        *t = MASK;
    }
}

/// A shuffled training instance: the permuted document plus, for each
/// original sentence, its position in the permuted document (0-based).
#[derive(Debug, Clone)]
pub struct ShuffledInstance {
    pub shuffled: EncodedDocument,
    pub target_positions: Vec<usize>,
}

/// Fisher-Yates shuffle of the sentence order.
pub fn make_shuffled<R: Rng>(doc: &EncodedDocument, rng: &mut R) -> ShuffledInstance {
    let n = doc.num_sentences();
    let mut order: Vec<usize> = (0..n).collect(); // order[q] = original index at slot q
    order.shuffle(rng);
    let mut target_positions = vec![0usize; n];
    for (q, &orig) in order.iter().enumerate() {
        target_positions[orig] = q;
    }
    let sentences = order.iter().map(|&i| doc.sentences[i].clone()).collect();
    ShuffledInstance {
        shuffled: EncodedDocument::from_sentences(sentences),
        target_positions,
    }
}

pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut file = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    for line in lines {
        writeln!(file, "{line}").map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_xoshiro::rand_core::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn doc(sentences: &[&str]) -> Document {
        Document {
            doc_id: "d".into(),
            sentences: sentences.iter().map(|s| s.to_string()).collect(),
            summary: None,
        }
    }

    #[test]
    fn load_corpus_parses_and_preserves_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        std::fs::write(
            &path,
            concat!(
                "{\"doc_id\":\"d1\",\"sentences\":[\"a b\",\"c d\"]}\n",
                "{\"doc_id\":\"d2\",\"sentences\":[\"e\"]}\n",
                "{\"doc_id\":\"d3\",\"sentences\":[\"f\"],\"summary\":[\"f\"]}\n",
            ),
        )
        .unwrap();
        let loaded = load_corpus(&path).unwrap();
        assert_eq!(loaded.documents.len(), 3);
        assert_eq!(loaded.documents[0].sentences.len(), 2);
        assert_eq!(loaded.documents[2].summary.as_ref().unwrap().len(), 1);
        let ids: Vec<&str> = loaded.documents.iter().map(|d| d.doc_id.as_str()).collect();
        assert_eq!(ids, ["d1", "d2", "d3"]);
    }

    #[test]
    fn load_corpus_reports_line_of_malformed_entry() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"doc_id\":\"d1\",\"sentences\":[\"a\"]}\n{\"doc_id\":\"d2\"}\n",
        )
        .unwrap();
        match load_corpus(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn load_corpus_rejects_empty_docs_with_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(
            &path,
            "{\"doc_id\":\"d1\",\"sentences\":[]}\n{\"doc_id\":\"d2\",\"sentences\":[\"x\"]}\n",
        )
        .unwrap();
        let loaded = load_corpus(&path).unwrap();
        assert_eq!(loaded.rejected, 1);
        assert_eq!(loaded.documents.len(), 1);
    }

    #[test]
    fn segment_hand_cases() {
        assert_eq!(segment("A b. C d."), vec!["A b.", "C d."]);
        assert_eq!(segment("Dr. Smith left. He ran."), vec!["Dr. Smith left.", "He ran."]);
        assert_eq!(segment("no terminator"), vec!["no terminator"]);
        assert_eq!(segment("Stop! Now."), vec!["Stop!", "Now."]);
        // lowercase after the period: not a boundary
        assert_eq!(segment("v1.2 is out. New stuff."), vec!["v1.2 is out.", "New stuff."]);
    }

    #[test]
    fn vocab_min_count_and_ties() {
        let corpus = vec![doc(&["a a b"])];
        let vocab = build_vocab(&corpus, 2);
        assert_eq!(vocab.id("a"), 5);
        assert_eq!(vocab.id("b"), UNK);
        // ties broken lexicographically
        let corpus = vec![doc(&["z y z y"])];
        let vocab = build_vocab(&corpus, 1);
        assert_eq!(vocab.id("y"), 5);
        assert_eq!(vocab.id("z"), 6);
    }

    #[test]
    fn vocab_roundtrip_through_file() {
        let corpus = vec![doc(&["apple banana apple cherry"])];
        let vocab = build_vocab(&corpus, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        vocab.save(&path).unwrap();
        let loaded = Vocab::load(&path).unwrap();
        assert_eq!(loaded.len(), vocab.len());
        assert_eq!(loaded.id("banana"), vocab.id("banana"));
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), vocab.len() - RESERVED.len());
    }

    #[test]
    fn encode_wraps_and_records_boundaries() {
        let corpus = vec![doc(&["a b"])];
        let vocab = build_vocab(&corpus, 1);
        let enc = encode(&corpus[0], &vocab, 512, 32);
        assert_eq!(enc.flat, vec![BOS, vocab.id("a"), vocab.id("b"), EOS]);
        assert_eq!(enc.boundary_index, vec![0]);
        assert_eq!(enc.positions, vec![0, 1, 2, 3]);
    }

    #[test]
    fn encode_truncates_whole_sentences() {
        // two sentences with wrapped lengths 4 and 4
        let d = doc(&["a b", "c d"]);
        let vocab = build_vocab(&[d.clone()], 1);
        assert_eq!(encode(&d, &vocab, 9, 32).num_sentences(), 2);
        assert_eq!(encode(&d, &vocab, 8, 32).num_sentences(), 2);
        assert_eq!(encode(&d, &vocab, 7, 32).num_sentences(), 1);
        assert_eq!(encode(&d, &vocab, 7, 32).num_tokens(), 4);
        // wrapped lengths 6 and 6 exceed 9 after the first sentence
        let d = doc(&["a b c d", "e f g h"]);
        let vocab = build_vocab(&[d.clone()], 1);
        assert_eq!(encode(&d, &vocab, 9, 32).num_sentences(), 1);
        assert_eq!(encode(&d, &vocab, 32, 1).boundary_index.len(), 1);
    }

    #[test]
    fn encode_keeps_overlong_first_sentence_truncated() {
        let d = doc(&["a b c d e f g h"]);
        let vocab = build_vocab(&[d.clone()], 1);
        let enc = encode(&d, &vocab, 5, 32);
        assert_eq!(enc.num_sentences(), 1);
        assert_eq!(enc.num_tokens(), 5);
        assert_eq!(enc.sentences[0][0], BOS);
        assert_eq!(*enc.sentences[0].last().unwrap(), EOS);
    }

    #[test]
    fn encode_decode_roundtrip() {
        let d = doc(&["The Cat sat", "on the MAT"]);
        let vocab = build_vocab(&[d.clone()], 1);
        let enc = encode(&d, &vocab, 512, 32);
        let back = decode(&enc, &vocab);
        assert_eq!(back[0], vec!["the", "cat", "sat"]);
        assert_eq!(back[1], vec!["on", "the", "mat"]);
        // unseen tokens round-trip as <unk>
        let d2 = doc(&["the unseen cat"]);
        let enc2 = encode(&d2, &vocab, 512, 32);
        let back2 = decode(&enc2, &vocab);
        assert_eq!(back2[0], vec!["the", "<unk>", "cat"]);
    }

    fn encoded(sentences: &[&str]) -> (EncodedDocument, Vocab) {
        let d = doc(sentences);
        let vocab = build_vocab(&[d.clone()], 1);
        (encode(&d, &vocab, 512, 64), vocab)
    }

    #[test]
    fn masked_instance_masks_interior_only() {
        let (enc, _) = encoded(&["a", "b c"]);
        let pool = SentencePool::from_docs(std::slice::from_ref(&enc));
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        // draw until the second sentence lands in the MASK branch
        for _ in 0..200 {
            let inst = make_masked(&enc, &pool, 512, &mut rng);
            if let Some(k) = inst.masked_indices.iter().position(|&i| i == 1) {
                if inst.actions[k] == MaskAction::Masked {
                    assert_eq!(inst.masked.sentences[1], vec![BOS, MASK, MASK, EOS]);
                    assert_eq!(inst.targets[k], enc.sentences[1]);
                    return;
                }
            }
        }
        panic!("mask branch never hit");
    }

    #[test]
    fn masked_instance_kept_branch_still_records_index() {
        let (enc, _) = encoded(&["a", "b c"]);
        let pool = SentencePool::from_docs(std::slice::from_ref(&enc));
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
        for _ in 0..500 {
            let inst = make_masked(&enc, &pool, 512, &mut rng);
            if let Some(k) = inst.masked_indices.iter().position(|_| true) {
                if inst.actions[k] == MaskAction::Kept {
                    let i = inst.masked_indices[k];
                    assert_eq!(inst.masked.sentences[i], enc.sentences[i]);
                    return;
                }
            }
        }
        panic!("kept branch never hit");
    }

    #[test]
    fn single_sentence_doc_is_always_masked() {
        let (enc, _) = encoded(&["only one"]);
        let pool = SentencePool::from_docs(std::slice::from_ref(&enc));
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
        for _ in 0..50 {
            let inst = make_masked(&enc, &pool, 512, &mut rng);
            assert_eq!(inst.masked_indices, vec![0]);
        }
    }

    #[test]
    fn masked_instance_preserves_boundary_structure() {
        let (enc, _) = encoded(&["a b", "c", "d e f"]);
        let pool = SentencePool::from_docs(std::slice::from_ref(&enc));
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(9);
        for _ in 0..100 {
            let inst = make_masked(&enc, &pool, 512, &mut rng);
            assert_eq!(inst.masked.num_sentences(), enc.num_sentences());
            assert_eq!(inst.masked_indices.len(), inst.targets.len());
            for (k, &i) in inst.masked_indices.iter().enumerate() {
                assert_eq!(inst.targets[k], enc.sentences[i]);
            }
            // boundaries consistent with sentence lengths
            let rebuilt = EncodedDocument::from_sentences(inst.masked.sentences.clone());
            assert_eq!(rebuilt.boundary_index, inst.masked.boundary_index);
            assert_eq!(rebuilt.flat, inst.masked.flat);
        }
    }

    #[test]
    fn shuffled_single_sentence_is_identity() {
        let (enc, _) = encoded(&["a"]);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(2);
        let inst = make_shuffled(&enc, &mut rng);
        assert_eq!(inst.target_positions, vec![0]);
        assert_eq!(inst.shuffled.flat, enc.flat);
    }

    #[test]
    fn shuffled_positions_locate_original_sentences() {
        let (enc, _) = encoded(&["a a", "b b b", "c"]);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(4);
        for _ in 0..50 {
            let inst = make_shuffled(&enc, &mut rng);
            for (orig, &pos) in inst.target_positions.iter().enumerate() {
                assert_eq!(inst.shuffled.sentences[pos], enc.sentences[orig]);
            }
            // content multiset preserved
            let mut a: Vec<_> = enc.sentences.clone();
            let mut b: Vec<_> = inst.shuffled.sentences.clone();
            a.sort();
            b.sort();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn mask_rate_statistics() {
        let sentences: Vec<String> = (0..100).map(|i| format!("tok{i} tok{i}")).collect();
        let d = Document { doc_id: "big".into(), sentences, summary: None };
        let vocab = build_vocab(std::slice::from_ref(&d), 1);
        let enc = encode(&d, &vocab, 100_000, 1000);
        let pool = SentencePool::from_docs(std::slice::from_ref(&enc));
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(2024);
        let draws = 10_000usize;
        let mut selected = 0usize;
        let mut branch = [0usize; 3];
        for _ in 0..draws {
            let inst = make_masked(&enc, &pool, 100_000, &mut rng);
            selected += inst.masked_indices.len();
            for a in &inst.actions {
                match a {
                    MaskAction::Masked => branch[0] += 1,
                    MaskAction::RandomReplaced => branch[1] += 1,
                    MaskAction::Kept => branch[2] += 1,
                }
            }
        }
        let rate = selected as f64 / (draws as f64 * 100.0);
        assert!((0.13..=0.17).contains(&rate), "mask rate {rate}");
        let total = branch.iter().sum::<usize>() as f64;
        let b0 = branch[0] as f64 / total;
        let b1 = branch[1] as f64 / total;
        let b2 = branch[2] as f64 / total;
        assert!((b0 - 0.8).abs() < 0.03, "mask branch {b0}");
        assert!((b1 - 0.1).abs() < 0.03, "replace branch {b1}");
        assert!((b2 - 0.1).abs() < 0.03, "keep branch {b2}");
    }

    #[test]
    fn shuffle_is_uniform_over_permutations() {
        let (enc, _) = encoded(&["a", "b", "c"]);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(77);
        let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
        let draws = 10_000usize;
        for _ in 0..draws {
            let inst = make_shuffled(&enc, &mut rng);
            *counts.entry(inst.target_positions.clone()).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 6);
        for (&ref perm, &count) in &counts {
            let freq = count as f64 / draws as f64;
            assert!(
                (freq - 1.0 / 6.0).abs() < 0.02,
                "permutation {perm:?} frequency {freq}"
            );
        }
    }
}
