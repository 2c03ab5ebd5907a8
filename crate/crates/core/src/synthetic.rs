//! Deterministic synthetic corpora for integration tests and the built-in
//! gradient-check fixture.

use crate::corpus::{DepTree, Label, Token};

use Label::{BeginAspect as B, InsideAspect as I, Outside as O};

struct Template {
    /// (surface-slot, head, relation, label); slot `A1`/`A2` take the
    /// aspect words, `J` an adjective, `V` a verb.
    rows: &'static [(&'static str, usize, &'static str, Label)],
}

// Three sentence shapes with hand-built trees.
const TEMPLATES: &[Template] = &[
    // the A1 A2 V J .      (two-token aspect as subject)
    Template {
        rows: &[
            ("the", 3, "det", O),
            ("A1", 3, "compound", B),
            ("A2", 4, "nsubj", I),
            ("V", 0, "root", O),
            ("J", 4, "acomp", O),
            (".", 4, "punct", O),
        ],
    },
    // i V the A2 .         (single-token aspect as object)
    Template {
        rows: &[
            ("i", 2, "nsubj", O),
            ("V", 0, "root", O),
            ("the", 4, "det", O),
            ("A2", 2, "obj", B),
            (".", 2, "punct", O),
        ],
    },
    // A2 V J and the A1 A2' V J (aspect + conjoined clause with 2-token aspect)
    Template {
        rows: &[
            ("A2", 2, "nsubj", B),
            ("V", 0, "root", O),
            ("J", 2, "acomp", O),
            ("and", 2, "cc", O),
            ("the", 7, "det", O),
            ("A1", 7, "compound", B),
            ("A2", 8, "nsubj", I),
            ("V", 2, "conj", O),
            ("J", 8, "acomp", O),
        ],
    },
];

const SINGLE_ASPECTS: &[&str] = &["screen", "battery", "keyboard", "display", "speaker"];
const PAIR_ASPECTS: &[(&str, &str)] = &[
    ("picture", "quality"),
    ("hard", "disc"),
    ("operating", "system"),
    ("battery", "life"),
    ("click", "pads"),
];
const VERBS: &[&str] = &["is", "looks", "feels", "works", "runs"];
const ADJECTIVES: &[&str] = &["good", "bad", "great", "slow", "sharp"];

/// `n` labeled sentences cycling deterministically through the templates
/// and aspect/verb/adjective pools.
pub fn template_corpus(n: usize) -> Vec<DepTree> {
    (0..n)
        .map(|i| {
            let template = &TEMPLATES[i % TEMPLATES.len()];
            let pair = PAIR_ASPECTS[i % PAIR_ASPECTS.len()];
            let single = SINGLE_ASPECTS[i % SINGLE_ASPECTS.len()];
            let verb = VERBS[i % VERBS.len()];
            let adj = ADJECTIVES[(i / 2) % ADJECTIVES.len()];
            let mut pair_next = 0usize; // alternate A2 fills in template 3
            let tokens: Vec<Token> = template
                .rows
                .iter()
                .enumerate()
                .map(|(k, &(slot, head, relation, label))| {
                    let surface = match slot {
                        "A1" => pair.0,
                        "A2" => {
                            // a standalone A2 is a single-token aspect; an
                            // A2 right after A1 completes the pair
                            if k > 0 && template.rows[k - 1].0 == "A1" {
                                pair.1
                            } else {
                                pair_next += 1;
                                let _ = pair_next;
                                single
                            }
                        }
                        "V" => verb,
                        "J" => adj,
                        other => other,
                    };
                    Token {
                        index: k + 1,
                        surface: surface.to_string(),
                        head,
                        relation: relation.to_string(),
                        label: Some(label),
                    }
                })
                .collect();
            DepTree::new(tokens).expect("templates are valid trees")
        })
        .collect()
}

/// The built-in gradient-check fixture: one 5-token sentence with a
/// branching, depth-2 tree and a 2-token aspect.
pub fn gradcheck_fixture() -> Vec<DepTree> {
    let rows: [(&str, usize, &str, Label); 5] = [
        ("the", 3, "det", O),
        ("picture", 3, "compound", B),
        ("quality", 4, "nsubj", I),
        ("is", 0, "root", O),
        ("bad", 4, "acomp", O),
    ];
    let tokens = rows
        .iter()
        .enumerate()
        .map(|(k, &(surface, head, relation, label))| Token {
            index: k + 1,
            surface: surface.to_string(),
            head,
            relation: relation.to_string(),
            label: Some(label),
        })
        .collect();
    vec![DepTree::new(tokens).expect("fixture is a valid tree")]
}
