//! Bidirectional dependency-tree LSTM.
//!
//! Each direction runs a typed tree-LSTM: gate pre-activations mix the
//! governor's word vector with relation embeddings of its dependent arcs,
//! gates mix in the dependents' hidden states through relation-indexed
//! matrices, and the cell state sums the dependents' cells through
//! per-dependent forget gates. The bottom-up pass consumes each node's
//! children; the top-down pass treats each node's head as its single
//! dependent, connected by the inverse ("I-"-prefixed) relation, with a
//! zero virtual-ROOT state above the root.
//!
//! Weight sharing across relations comes in three flavors:
//! 1. one matrix pair per gate for every relation (the relation-input slot
//!    reuses the gate's word matrix),
//! 2. like 1 but with relation-specific forget-gate pairs,
//! 3. relation-specific pairs for every gate.

use crate::autodiff::{Graph, ParamId, ParamLeaves, Tensor, Value};
use crate::corpus::{DepTree, Vocabulary};

/// Which tree-LSTM pass a parameter bank belongs to.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Direction {
    BottomUp,
    TopDown,
}

/// LSTM gates in a fixed order: input, output, forget, update.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Gate {
    Input = 0,
    Output = 1,
    Forget = 2,
    Update = 3,
}

pub const GATES: [Gate; 4] = [Gate::Input, Gate::Output, Gate::Forget, Gate::Update];

impl Gate {
    pub fn tag(self) -> &'static str {
        match self {
            Gate::Input => "i",
            Gate::Output => "o",
            Gate::Forget => "f",
            Gate::Update => "u",
        }
    }
}

/// How relation-indexed matrices are shared across relations.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum WeightSharing {
    /// Variant 1: every relation slot resolves to the gate's shared pair.
    SharedAll,
    /// Variant 2: shared for input/output/update, per-relation for forget.
    PerRelationForget,
    /// Variant 3: per-relation pairs for every gate.
    PerRelation,
}

impl WeightSharing {
    pub fn from_index(i: u8) -> Option<WeightSharing> {
        match i {
            1 => Some(WeightSharing::SharedAll),
            2 => Some(WeightSharing::PerRelationForget),
            3 => Some(WeightSharing::PerRelation),
            _ => None,
        }
    }

    pub fn index(self) -> u8 {
        match self {
            WeightSharing::SharedAll => 1,
            WeightSharing::PerRelationForget => 2,
            WeightSharing::PerRelation => 3,
        }
    }
}

/// A relation-specific (input-matrix, hidden-matrix) pair.
#[derive(Copy, Clone, Debug)]
pub struct RelPair {
    pub input: ParamId,
    pub hidden: ParamId,
}

/// Relation-indexed matrices under one sharing scheme.
#[derive(Clone, Debug)]
pub enum SharingParams {
    /// One hidden matrix per gate; relation-input slots reuse the word
    /// matrices.
    SharedAll { hidden: [ParamId; 4] },
    /// Shared hidden matrices for i/o/u; per-relation pairs for f.
    PerRelationForget {
        hidden_iou: [ParamId; 3],
        forget: Vec<RelPair>,
    },
    /// Per-relation pairs for all four gates.
    PerRelation { rels: Vec<[RelPair; 4]> },
}

/// One direction's gate parameters: word-input matrices, biases, and the
/// relation-indexed bank.
#[derive(Clone, Debug)]
pub struct TreeGateParams {
    /// Word-input matrix per gate, d x d.
    pub word: [ParamId; 4],
    /// Bias per gate, length d.
    pub bias: [ParamId; 4],
    pub sharing: SharingParams,
}

impl TreeGateParams {
    /// Resolve the (relation-input, relation-hidden) matrices for `gate`
    /// and relation id `rel` under this bank's sharing scheme.
    pub fn resolve_matrices(&self, gate: Gate, rel: usize) -> (ParamId, ParamId) {
        match &self.sharing {
            SharingParams::SharedAll { hidden } => {
                (self.word[gate as usize], hidden[gate as usize])
            }
            SharingParams::PerRelationForget { hidden_iou, forget } => match gate {
                Gate::Forget => (forget[rel].input, forget[rel].hidden),
                Gate::Input => (self.word[0], hidden_iou[0]),
                Gate::Output => (self.word[1], hidden_iou[1]),
                Gate::Update => (self.word[3], hidden_iou[2]),
            },
            SharingParams::PerRelation { rels } => {
                let pair = &rels[rel][gate as usize];
                (pair.input, pair.hidden)
            }
        }
    }
}

/// One direction's full parameter set: gates plus that direction's
/// relation-embedding table (`[num_relations, d]`, forward relations for
/// bottom-up, inverse relations for top-down).
#[derive(Clone, Debug)]
pub struct DirectionParams {
    pub gates: TreeGateParams,
    pub rel_embed: ParamId,
}

/// Both directions (ablations may drop one) and the relation-term switch.
#[derive(Clone, Debug)]
pub struct BiDTreeParams {
    pub up: Option<DirectionParams>,
    pub down: Option<DirectionParams>,
    pub variant: WeightSharing,
    /// When off, gate pre-activations skip the relation-embedding terms.
    pub use_relation_terms: bool,
}

impl BiDTreeParams {
    pub fn direction(&self, dir: Direction) -> &DirectionParams {
        match dir {
            Direction::BottomUp => self.up.as_ref().expect("bottom-up bank missing"),
            Direction::TopDown => self.down.as_ref().expect("top-down bank missing"),
        }
    }

    pub fn resolve_matrices(&self, dir: Direction, gate: Gate, rel: usize) -> (ParamId, ParamId) {
        self.direction(dir).gates.resolve_matrices(gate, rel)
    }
}

/// Cell and hidden state of one node.
#[derive(Copy, Clone, Debug)]
pub struct NodeState {
    pub s: Value,
    pub h: Value,
}

/// One tree-LSTM cell: combine the governor's word vector with its
/// dependents' states and arc relations into a new [`NodeState`].
///
/// With no dependents every sum term vanishes and `s = i (*) u`.
pub fn tree_cell(
    g: &mut Graph,
    leaves: &mut ParamLeaves,
    params: &DirectionParams,
    use_relation_terms: bool,
    x: Value,
    dependents: &[(NodeState, usize)],
) -> NodeState {
    let gates = &params.gates;

    let rel_vec = |g: &mut Graph, leaves: &mut ParamLeaves, rel: usize| -> Value {
        leaves.row(g, params.rel_embed, rel)
    };

    // Pre-activations for i, o, u: word term plus summed relation terms.
    let pre = |g: &mut Graph, leaves: &mut ParamLeaves, gate: Gate| -> Value {
        let w = leaves.leaf(g, gates.word[gate as usize]);
        let mut acc = g.matvec(w, x);
        if use_relation_terms {
            for &(_, rel) in dependents {
                let (w_rel, _) = gates.resolve_matrices(gate, rel);
                let wr = leaves.leaf(g, w_rel);
                let r = rel_vec(g, leaves, rel);
                let term = g.matvec(wr, r);
                acc = g.add(acc, term);
            }
        }
        acc
    };

    // Gate value for i, o, u: pre + sum of hidden terms + bias.
    let gate_act = |g: &mut Graph, leaves: &mut ParamLeaves, gate: Gate, squash_tanh: bool| {
        let mut acc = pre(g, leaves, gate);
        for &(state, rel) in dependents {
            let (_, u_rel) = gates.resolve_matrices(gate, rel);
            let u = leaves.leaf(g, u_rel);
            let term = g.matvec(u, state.h);
            acc = g.add(acc, term);
        }
        let b = leaves.leaf(g, gates.bias[gate as usize]);
        let z = g.add(acc, b);
        if squash_tanh {
            g.tanh_(z)
        } else {
            g.sigmoid(z)
        }
    };

    let i_gate = gate_act(g, leaves, Gate::Input, false);
    let o_gate = gate_act(g, leaves, Gate::Output, false);
    let u_cand = gate_act(g, leaves, Gate::Update, true);

    // s = i (*) u + sum_k f_k (*) s_k with per-dependent forget gates.
    let mut s = g.hadamard(i_gate, u_cand);
    for &(state, rel) in dependents {
        let w_f = leaves.leaf(g, gates.word[Gate::Forget as usize]);
        let mut acc = g.matvec(w_f, x);
        if use_relation_terms {
            let (w_rel, _) = gates.resolve_matrices(Gate::Forget, rel);
            let wr = leaves.leaf(g, w_rel);
            let r = rel_vec(g, leaves, rel);
            let term = g.matvec(wr, r);
            acc = g.add(acc, term);
        }
        let (_, u_rel) = gates.resolve_matrices(Gate::Forget, rel);
        let u = leaves.leaf(g, u_rel);
        let hidden_term = g.matvec(u, state.h);
        acc = g.add(acc, hidden_term);
        let b = leaves.leaf(g, gates.bias[Gate::Forget as usize]);
        let z = g.add(acc, b);
        let f_gate = g.sigmoid(z);
        let carried = g.hadamard(f_gate, state.s);
        s = g.add(s, carried);
    }

    let tanh_s = g.tanh_(s);
    let h = g.hadamard(o_gate, tanh_s);
    NodeState { s, h }
}

/// Bottom-up pass: nodes in post-order, each consuming its children's
/// states with the (forward) relations of their arcs. Returns one state
/// per token, indexed by position.
pub fn bottom_up_pass(
    g: &mut Graph,
    leaves: &mut ParamLeaves,
    tree: &DepTree,
    vocab: &Vocabulary,
    params: &DirectionParams,
    use_relation_terms: bool,
    word_vecs: &[Value],
) -> Vec<NodeState> {
    let mut states: Vec<Option<NodeState>> = vec![None; tree.len() + 1];
    for p in tree.bottom_up_order() {
        let dependents: Vec<(NodeState, usize)> = tree
            .children(p)
            .iter()
            .map(|&c| {
                let rel = vocab.fwd_relation_id(&tree.token(c).relation);
                (states[c].expect("child computed before parent"), rel)
            })
            .collect();
        let state = tree_cell(
            g,
            leaves,
            params,
            use_relation_terms,
            word_vecs[p - 1],
            &dependents,
        );
        states[p] = Some(state);
    }
    states.into_iter().skip(1).map(|s| s.unwrap()).collect()
}

/// Top-down pass: nodes in pre-order. Every non-root node has exactly one
/// dependent, its head's top-down state under the inverse of its incoming
/// relation; the root's dependent is a zero virtual-ROOT state under the
/// dedicated root-inverse relation.
pub fn top_down_pass(
    g: &mut Graph,
    leaves: &mut ParamLeaves,
    tree: &DepTree,
    vocab: &Vocabulary,
    params: &DirectionParams,
    use_relation_terms: bool,
    word_vecs: &[Value],
) -> Vec<NodeState> {
    let d = leaves.store().tensor(params.gates.bias[0]).len();
    let zero_s = g.constant(Tensor::zeros(&[d]));
    let zero_h = g.constant(Tensor::zeros(&[d]));
    let virtual_root = NodeState {
        s: zero_s,
        h: zero_h,
    };
    let mut states: Vec<Option<NodeState>> = vec![None; tree.len() + 1];
    for c in tree.top_down_order() {
        let token = tree.token(c);
        let dependent = if token.head == 0 {
            (virtual_root, vocab.root_inverse_id())
        } else {
            let rel = vocab.inv_relation_id(&token.relation);
            (states[token.head].expect("head computed before dependent"), rel)
        };
        let state = tree_cell(
            g,
            leaves,
            params,
            use_relation_terms,
            word_vecs[c - 1],
            &[dependent],
        );
        states[c] = Some(state);
    }
    states.into_iter().skip(1).map(|s| s.unwrap()).collect()
}

/// Full bidirectional encoding: per token the concatenation of its
/// bottom-up and top-down hidden states (a 2d vector).
pub fn bidtree_encode(
    g: &mut Graph,
    leaves: &mut ParamLeaves,
    tree: &DepTree,
    vocab: &Vocabulary,
    params: &BiDTreeParams,
    word_vecs: &[Value],
) -> Vec<Value> {
    let up = params.direction(Direction::BottomUp);
    let down = params.direction(Direction::TopDown);
    let up_states = bottom_up_pass(
        g,
        leaves,
        tree,
        vocab,
        up,
        params.use_relation_terms,
        word_vecs,
    );
    let down_states = top_down_pass(
        g,
        leaves,
        tree,
        vocab,
        down,
        params.use_relation_terms,
        word_vecs,
    );
    up_states
        .iter()
        .zip(&down_states)
        .map(|(u, d)| g.concat(u.h, d.h))
        .collect()
}
