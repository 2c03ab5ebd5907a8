//! Corpus ingestion: column-format parsing, dependency-tree validation,
//! traversal orders, vocabularies, and pretrained word vectors.
//!
//! Corpus format: UTF-8 text, one token per line with TAB-separated columns
//! `INDEX  SURFACE  HEAD  RELATION[  LABEL]`. `HEAD` is 0 for the root
//! token. A blank line terminates a sentence; lines starting with `#` are
//! comments. Labels, when present, are `B-AP`, `I-AP`, or `O`.
//!
//! Embedding format: first line `<count> <dim>`, then one line per word:
//! `<word> <f1> ... <fd>`, space separated.

use std::collections::HashMap;
use std::io::BufRead;

use rand::Rng;
use thiserror::Error;

use crate::autodiff::Tensor;

/// Reserved surface form / relation string for out-of-vocabulary entries.
pub const UNK: &str = "<unk>";
/// Prefix that turns a relation into its direction-inverted counterpart.
pub const INVERSE_PREFIX: &str = "I-";
/// Relation id name for the virtual ROOT dependent of the top-down pass.
pub const ROOT_RELATION: &str = "root";

/// Per-token BIO label.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    BeginAspect,
    InsideAspect,
    Outside,
}

pub const NUM_LABELS: usize = 3;

impl Label {
    pub fn id(self) -> usize {
        match self {
            Label::BeginAspect => 0,
            Label::InsideAspect => 1,
            Label::Outside => 2,
        }
    }

    pub fn from_id(id: usize) -> Label {
        match id {
            0 => Label::BeginAspect,
            1 => Label::InsideAspect,
            2 => Label::Outside,
            _ => panic!("label id {id} out of range"),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::BeginAspect => "B-AP",
            Label::InsideAspect => "I-AP",
            Label::Outside => "O",
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        match s {
            "B-AP" => Some(Label::BeginAspect),
            "I-AP" => Some(Label::InsideAspect),
            "O" => Some(Label::Outside),
            _ => None,
        }
    }

    pub fn all() -> [Label; 3] {
        [Label::BeginAspect, Label::InsideAspect, Label::Outside]
    }
}

/// One word of a sentence with its head link.
#[derive(Clone, Debug, PartialEq)]
pub struct Token {
    /// 1-based position in the sentence.
    pub index: usize,
    pub surface: String,
    /// 1-based position of the head; 0 means the virtual ROOT.
    pub head: usize,
    /// Relation label of the arc from the head to this token.
    pub relation: String,
    pub label: Option<Label>,
}

/// Structural defects of a head-link candidate list.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum TreeError {
    #[error("token {index}: head {head} out of range 0..={len}")]
    HeadOutOfRange { index: usize, head: usize, len: usize },
    #[error("token {index}: head points to itself")]
    SelfLoop { index: usize },
    #[error("multiple roots at tokens {roots:?}")]
    MultipleRoots { roots: Vec<usize> },
    #[error("no root (no token with head 0)")]
    NoRoot,
    #[error("head links form a cycle through tokens {nodes:?}")]
    Cycle { nodes: Vec<usize> },
    #[error("tokens {nodes:?} unreachable from the root")]
    Unreachable { nodes: Vec<usize> },
    #[error("empty sentence")]
    Empty,
}

/// A validated dependency-parsed sentence. Construction checks all tree
/// invariants, so every `DepTree` in the program is single-rooted and
/// acyclic with in-range head links.
#[derive(Clone, Debug, PartialEq)]
pub struct DepTree {
    tokens: Vec<Token>,
    /// 1-based child indices per node, ascending; entry 0 unused.
    children: Vec<Vec<usize>>,
    root: usize,
}

/// Check all tree invariants over raw tokens: in-range heads, no
/// self-loops, exactly one root, every node reachable from it.
pub fn validate_tree(tokens: &[Token]) -> Result<(), TreeError> {
    let n = tokens.len();
    if n == 0 {
        return Err(TreeError::Empty);
    }
    for t in tokens {
        if t.head > n {
            return Err(TreeError::HeadOutOfRange {
                index: t.index,
                head: t.head,
                len: n,
            });
        }
        if t.head == t.index {
            return Err(TreeError::SelfLoop { index: t.index });
        }
    }
    let roots: Vec<usize> = tokens.iter().filter(|t| t.head == 0).map(|t| t.index).collect();
    if roots.is_empty() {
        return Err(TreeError::NoRoot);
    }
    if roots.len() > 1 {
        return Err(TreeError::MultipleRoots { roots });
    }
    // Reachability from the root along child links.
    let mut children = vec![Vec::new(); n + 1];
    for t in tokens {
        if t.head != 0 {
            children[t.head].push(t.index);
        }
    }
    let mut seen = vec![false; n + 1];
    let mut stack = vec![roots[0]];
    while let Some(p) = stack.pop() {
        if seen[p] {
            continue;
        }
        seen[p] = true;
        stack.extend(&children[p]);
    }
    let missing: Vec<usize> = (1..=n).filter(|&i| !seen[i]).collect();
    if !missing.is_empty() {
        // Every stranded node leads into a cycle when following heads;
        // report the nodes actually on cycles.
        let mut on_cycle = Vec::new();
        for &start in &missing {
            let mut visited = vec![false; n + 1];
            let mut cur = start;
            while !visited[cur] && !seen[cur] {
                visited[cur] = true;
                cur = tokens[cur - 1].head;
            }
            if !seen[cur] && !on_cycle.contains(&cur) {
                // Walk the cycle once to collect its members.
                let entry = cur;
                loop {
                    if !on_cycle.contains(&cur) {
                        on_cycle.push(cur);
                    }
                    cur = tokens[cur - 1].head;
                    if cur == entry {
                        break;
                    }
                }
            }
        }
        if on_cycle.is_empty() {
            return Err(TreeError::Unreachable { nodes: missing });
        }
        on_cycle.sort_unstable();
        return Err(TreeError::Cycle { nodes: on_cycle });
    }
    Ok(())
}

impl DepTree {
    pub fn new(tokens: Vec<Token>) -> Result<Self, TreeError> {
        validate_tree(&tokens)?;
        let n = tokens.len();
        let mut children = vec![Vec::new(); n + 1];
        let mut root = 0;
        for t in &tokens {
            if t.head == 0 {
                root = t.index;
            } else {
                children[t.head].push(t.index);
            }
        }
        for c in &mut children {
            c.sort_unstable();
        }
        Ok(DepTree {
            tokens,
            children,
            root,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    /// Token at 1-based position `i`.
    pub fn token(&self, i: usize) -> &Token {
        &self.tokens[i - 1]
    }

    pub fn root(&self) -> usize {
        self.root
    }

    /// Dependents of node `p` (1-based), ascending.
    pub fn children(&self, p: usize) -> &[usize] {
        &self.children[p]
    }

    /// Gold labels if every token carries one.
    pub fn labels(&self) -> Option<Vec<Label>> {
        self.tokens.iter().map(|t| t.label).collect()
    }

    pub fn surfaces(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.surface.as_str()).collect()
    }

    /// Post-order traversal: every node after all of its dependents,
    /// children visited in ascending index order.
    pub fn bottom_up_order(&self) -> Vec<usize> {
        let mut order = Vec::with_capacity(self.len());
        // Iterative post-order; (node, children_done)
        let mut stack = vec![(self.root, false)];
        while let Some((p, expanded)) = stack.pop() {
            if expanded {
                order.push(p);
            } else {
                stack.push((p, true));
                for &c in self.children(p).iter().rev() {
                    stack.push((c, false));
                }
            }
        }
        order
    }

    /// Pre-order traversal: root first, every node after its head,
    /// children visited in ascending index order.
    pub fn top_down_order(&self) -> Vec<usize> {
        let mut order = Vec::with_capacity(self.len());
        let mut stack = vec![self.root];
        while let Some(p) = stack.pop() {
            order.push(p);
            for &c in self.children(p).iter().rev() {
                stack.push(c);
            }
        }
        order
    }
}

/// The direction-inverted relation name: `"nmod"` -> `"I-nmod"`.
pub fn inverse_relation(rel: &str) -> String {
    format!("{INVERSE_PREFIX}{rel}")
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: {source}")]
    Tree { line: usize, source: TreeError },
}

impl CorpusError {
    /// Line number the error points at, when it has one.
    pub fn line(&self) -> Option<usize> {
        match self {
            CorpusError::Io(_) => None,
            CorpusError::Malformed { line, .. } | CorpusError::Tree { line, .. } => Some(*line),
        }
    }
}

/// Parse a corpus stream into validated sentences.
pub fn parse_corpus<R: BufRead>(reader: R) -> Result<Vec<DepTree>, CorpusError> {
    let mut sentences = Vec::new();
    let mut block: Vec<(Token, usize)> = Vec::new();
    let mut line_no = 0usize;
    for line in reader.lines() {
        line_no += 1;
        let line = line?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.starts_with('#') {
            continue;
        }
        if trimmed.trim().is_empty() {
            flush_block(&mut block, &mut sentences)?;
            continue;
        }
        let token = parse_token_line(trimmed, line_no, block.len() + 1)?;
        block.push((token, line_no));
    }
    flush_block(&mut block, &mut sentences)?;
    Ok(sentences)
}

fn parse_token_line(line: &str, line_no: usize, expected_index: usize) -> Result<Token, CorpusError> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 4 && cols.len() != 5 {
        return Err(CorpusError::Malformed {
            line: line_no,
            msg: format!("expected 4 or 5 TAB-separated columns, got {}", cols.len()),
        });
    }
    let index: usize = cols[0].parse().map_err(|_| CorpusError::Malformed {
        line: line_no,
        msg: format!("bad token index {:?}", cols[0]),
    })?;
    if index != expected_index {
        return Err(CorpusError::Malformed {
            line: line_no,
            msg: format!("token index {index} out of sequence (expected {expected_index})"),
        });
    }
    let surface = cols[1].to_string();
    if surface.is_empty() {
        return Err(CorpusError::Malformed {
            line: line_no,
            msg: "empty surface form".into(),
        });
    }
    let head: usize = cols[2].parse().map_err(|_| CorpusError::Malformed {
        line: line_no,
        msg: format!("bad head index {:?}", cols[2]),
    })?;
    let relation = cols[3].to_string();
    if relation.is_empty() {
        return Err(CorpusError::Malformed {
            line: line_no,
            msg: "empty relation".into(),
        });
    }
    if relation.starts_with(INVERSE_PREFIX) {
        return Err(CorpusError::Malformed {
            line: line_no,
            msg: format!("relation {relation:?} uses the reserved \"{INVERSE_PREFIX}\" prefix"),
        });
    }
    let label = match cols.get(4) {
        None => None,
        Some(s) => Some(Label::parse(s).ok_or_else(|| CorpusError::Malformed {
            line: line_no,
            msg: format!("invalid label {s:?} (expected B-AP, I-AP, or O)"),
        })?),
    };
    Ok(Token {
        index,
        surface,
        head,
        relation,
        label,
    })
}

fn flush_block(
    block: &mut Vec<(Token, usize)>,
    sentences: &mut Vec<DepTree>,
) -> Result<(), CorpusError> {
    if block.is_empty() {
        return Ok(());
    }
    let first_line = block[0].1;
    let labelled: Vec<bool> = block.iter().map(|(t, _)| t.label.is_some()).collect();
    if labelled.iter().any(|&b| b) && !labelled.iter().all(|&b| b) {
        let (_, line) = block[labelled.iter().position(|&b| !b).unwrap()];
        return Err(CorpusError::Malformed {
            line,
            msg: "sentence mixes labeled and unlabeled tokens".into(),
        });
    }
    let lines: Vec<usize> = block.iter().map(|(_, l)| *l).collect();
    let tokens: Vec<Token> = block.drain(..).map(|(t, _)| t).collect();
    let tree = DepTree::new(tokens).map_err(|source| {
        let line = match &source {
            TreeError::HeadOutOfRange { index, .. }
            | TreeError::SelfLoop { index } => lines[index - 1],
            TreeError::MultipleRoots { roots } => lines[roots[0] - 1],
            TreeError::Cycle { nodes } | TreeError::Unreachable { nodes } => lines[nodes[0] - 1],
            TreeError::NoRoot | TreeError::Empty => first_line,
        };
        CorpusError::Tree { line, source }
    })?;
    sentences.push(tree);
    Ok(())
}

/// Write sentences in the canonical corpus format (inverse of
/// [`parse_corpus`] on its output).
pub fn write_corpus<W: std::io::Write>(
    sentences: &[DepTree],
    writer: &mut W,
) -> std::io::Result<()> {
    for tree in sentences {
        for t in tree.tokens() {
            match t.label {
                Some(l) => writeln!(
                    writer,
                    "{}\t{}\t{}\t{}\t{}",
                    t.index,
                    t.surface,
                    t.head,
                    t.relation,
                    l.as_str()
                )?,
                None => writeln!(writer, "{}\t{}\t{}\t{}", t.index, t.surface, t.head, t.relation)?,
            }
        }
        writeln!(writer)?;
    }
    Ok(())
}

/// Word and relation id maps. Ids are dense, insertion-ordered over a
/// corpus scan, and therefore stable for a fixed corpus. Index 0 of each
/// map is the out-of-vocabulary entry; inverse relations additionally
/// reserve index 1 for the virtual-ROOT relation of the top-down pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    word_ids: HashMap<String, usize>,
    fwd_relations: Vec<String>,
    fwd_ids: HashMap<String, usize>,
    /// Stored with the `I-` prefix.
    inv_relations: Vec<String>,
    inv_ids: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn build(corpus: &[DepTree]) -> Vocabulary {
        let mut vocab = Vocabulary::empty();
        for tree in corpus {
            for t in tree.tokens() {
                vocab.intern_word(&t.surface);
                vocab.intern_relation(&t.relation);
            }
        }
        vocab
    }

    fn empty() -> Vocabulary {
        let mut v = Vocabulary {
            words: Vec::new(),
            word_ids: HashMap::new(),
            fwd_relations: Vec::new(),
            fwd_ids: HashMap::new(),
            inv_relations: Vec::new(),
            inv_ids: HashMap::new(),
        };
        v.push_word(UNK);
        v.push_fwd(UNK);
        v.push_inv(&inverse_relation(UNK));
        v.push_inv(&inverse_relation(ROOT_RELATION));
        v
    }

    /// Rebuild from serialized word/relation lists.
    pub fn from_lists(words: Vec<String>, fwd: Vec<String>, inv: Vec<String>) -> Vocabulary {
        let word_ids = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        let fwd_ids = fwd.iter().enumerate().map(|(i, r)| (r.clone(), i)).collect();
        let inv_ids = inv.iter().enumerate().map(|(i, r)| (r.clone(), i)).collect();
        Vocabulary {
            words,
            word_ids,
            fwd_relations: fwd,
            fwd_ids,
            inv_relations: inv,
            inv_ids,
        }
    }

    fn push_word(&mut self, w: &str) {
        self.word_ids.insert(w.to_string(), self.words.len());
        self.words.push(w.to_string());
    }

    fn push_fwd(&mut self, r: &str) {
        self.fwd_ids.insert(r.to_string(), self.fwd_relations.len());
        self.fwd_relations.push(r.to_string());
    }

    fn push_inv(&mut self, r: &str) {
        self.inv_ids.insert(r.to_string(), self.inv_relations.len());
        self.inv_relations.push(r.to_string());
    }

    fn intern_word(&mut self, w: &str) {
        if !self.word_ids.contains_key(w) {
            self.push_word(w);
        }
    }

    fn intern_relation(&mut self, r: &str) {
        if !self.fwd_ids.contains_key(r) {
            self.push_fwd(r);
            let inv = inverse_relation(r);
            if !self.inv_ids.contains_key(&inv) {
                self.push_inv(&inv);
            }
        }
    }

    /// Word id, falling back to the OOV id.
    pub fn word_id(&self, w: &str) -> usize {
        self.word_ids.get(w).copied().unwrap_or(0)
    }

    /// Forward relation id, falling back to the OOV id.
    pub fn fwd_relation_id(&self, r: &str) -> usize {
        self.fwd_ids.get(r).copied().unwrap_or(0)
    }

    /// Id of the inverse of a forward relation, falling back to the OOV
    /// inverse id.
    pub fn inv_relation_id(&self, forward: &str) -> usize {
        self.inv_ids
            .get(&inverse_relation(forward))
            .copied()
            .unwrap_or(0)
    }

    /// Id of the virtual-ROOT inverse relation.
    pub fn root_inverse_id(&self) -> usize {
        self.inv_ids[&inverse_relation(ROOT_RELATION)]
    }

    pub fn num_words(&self) -> usize {
        self.words.len()
    }

    pub fn num_fwd_relations(&self) -> usize {
        self.fwd_relations.len()
    }

    pub fn num_inv_relations(&self) -> usize {
        self.inv_relations.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn fwd_relations(&self) -> &[String] {
        &self.fwd_relations
    }

    pub fn inv_relations(&self) -> &[String] {
        &self.inv_relations
    }

    pub fn contains_word(&self, w: &str) -> bool {
        self.word_ids.contains_key(w)
    }

    pub fn contains_relation(&self, r: &str) -> bool {
        self.fwd_ids.contains_key(r)
    }
}

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("embedding file declares dimension {declared}, expected {expected}")]
    DimensionMismatch { declared: usize, expected: usize },
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
}

/// Word-vector table aligned to a vocabulary: one row per word id.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    /// `[num_words, dim]`
    pub matrix: Tensor,
    /// Whether row `i` came from the embedding file.
    pub pretrained: Vec<bool>,
    pub dim: usize,
}

impl EmbeddingTable {
    /// Number of vocabulary words that were not in the file.
    pub fn oov_count(&self) -> usize {
        self.pretrained.iter().filter(|&&p| !p).count()
    }
}

fn oov_row<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    // Small-norm init comparable to pretrained vector scale.
    let bound = 0.25 / (dim as f64).sqrt();
    (0..dim).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Load pretrained vectors for `vocab`, random-initializing rows for
/// vocabulary words missing from the file. Rows are filled in word-id
/// order so results are reproducible for a fixed seed.
pub fn load_embeddings<R: BufRead, G: Rng>(
    reader: R,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut G,
) -> Result<EmbeddingTable, EmbeddingError> {
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| EmbeddingError::Malformed {
            line: 1,
            msg: "empty embedding file".into(),
        })??;
    let mut parts = header.split_whitespace();
    let declared_count: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| EmbeddingError::Malformed {
            line: 1,
            msg: format!("bad header {header:?} (expected \"<count> <dim>\")"),
        })?;
    let declared_dim: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| EmbeddingError::Malformed {
            line: 1,
            msg: format!("bad header {header:?} (expected \"<count> <dim>\")"),
        })?;
    if declared_dim != dim {
        return Err(EmbeddingError::DimensionMismatch {
            declared: declared_dim,
            expected: dim,
        });
    }

    let mut file_vectors: HashMap<String, Vec<f64>> = HashMap::new();
    let mut line_no = 1usize;
    let mut rows_seen = 0usize;
    for line in lines {
        line_no += 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let word = it.next().unwrap().to_string();
        let mut vec = Vec::with_capacity(dim);
        for part in it {
            let x: f64 = part.parse().map_err(|_| EmbeddingError::Malformed {
                line: line_no,
                msg: format!("unparseable float {part:?}"),
            })?;
            vec.push(x);
        }
        if vec.len() != dim {
            return Err(EmbeddingError::Malformed {
                line: line_no,
                msg: format!("expected {dim} floats, got {}", vec.len()),
            });
        }
        rows_seen += 1;
        // Keep only the first occurrence; only vocabulary words matter.
        file_vectors.entry(word).or_insert(vec);
    }
    if rows_seen != declared_count {
        return Err(EmbeddingError::Malformed {
            line: line_no,
            msg: format!("header declares {declared_count} rows, found {rows_seen}"),
        });
    }

    let mut data = Vec::with_capacity(vocab.num_words() * dim);
    let mut pretrained = Vec::with_capacity(vocab.num_words());
    for word in vocab.words() {
        match file_vectors.get(word) {
            Some(v) => {
                data.extend_from_slice(v);
                pretrained.push(true);
            }
            None => {
                data.extend(oov_row(dim, rng));
                pretrained.push(false);
            }
        }
    }
    Ok(EmbeddingTable {
        matrix: Tensor::matrix(vocab.num_words(), dim, data),
        pretrained,
        dim,
    })
}

/// Random table for every vocabulary word (no pretrained file).
pub fn random_embeddings<G: Rng>(vocab: &Vocabulary, dim: usize, rng: &mut G) -> EmbeddingTable {
    let mut data = Vec::with_capacity(vocab.num_words() * dim);
    for _ in 0..vocab.num_words() {
        data.extend(oov_row(dim, rng));
    }
    EmbeddingTable {
        matrix: Tensor::matrix(vocab.num_words(), dim, data),
        pretrained: vec![false; vocab.num_words()],
        dim,
    }
}
