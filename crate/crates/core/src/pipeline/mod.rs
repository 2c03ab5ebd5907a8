//! Model assembly, the training loop, prediction, evaluation, and model
//! files.

mod io;

pub use io::{load_model, save_model, LoadError};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{
    adam_step, AdamHyper, AdamState, Gradients, Graph, ParamId, ParamLeaves, ParamRef, ParamStore,
    Tensor, Value,
};
use crate::bidtree::{
    bidtree_encode, bottom_up_pass, top_down_pass, BiDTreeParams, DirectionParams, RelPair,
    SharingParams, TreeGateParams, WeightSharing, GATES,
};
use crate::corpus::{DepTree, EmbeddingTable, Label, Vocabulary, NUM_LABELS};
use crate::crf::{self, CrfParamIds, CrfParams, NUM_PAIRS};
use crate::sequence::{bilstm, LstmDirParams, ProjectionParams, SeqLstmParams};
use crate::spans::{decode_spans, span_f1, AspectSpan, EvalReport};

/// Which stages the assembled model contains.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Ablation {
    /// Tree encoder (both directions) -> BiLSTM -> CRF.
    Full,
    /// Bottom-up tree pass only -> BiLSTM -> CRF.
    DtreeUp,
    /// Top-down tree pass only -> BiLSTM -> CRF.
    DtreeDown,
    /// Tree encoder -> CRF (no BiLSTM).
    BidtreeCrf,
    /// Word embeddings -> BiLSTM -> CRF (no tree encoder).
    BilstmCrf,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::DtreeUp => "dtree-up",
            Ablation::DtreeDown => "dtree-down",
            Ablation::BidtreeCrf => "bidtree-crf",
            Ablation::BilstmCrf => "bilstm-crf",
        }
    }

    pub fn parse(s: &str) -> Option<Ablation> {
        match s {
            "full" => Some(Ablation::Full),
            "dtree-up" => Some(Ablation::DtreeUp),
            "dtree-down" => Some(Ablation::DtreeDown),
            "bidtree-crf" => Some(Ablation::BidtreeCrf),
            "bilstm-crf" => Some(Ablation::BilstmCrf),
            _ => None,
        }
    }

    pub fn has_up(self) -> bool {
        matches!(self, Ablation::Full | Ablation::DtreeUp | Ablation::BidtreeCrf)
    }

    pub fn has_down(self) -> bool {
        matches!(self, Ablation::Full | Ablation::DtreeDown | Ablation::BidtreeCrf)
    }

    pub fn has_bilstm(self) -> bool {
        !matches!(self, Ablation::BidtreeCrf)
    }
}

/// Everything that shapes a model and its training run.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Word/relation embedding dimension d.
    pub dim: usize,
    pub variant: WeightSharing,
    pub ablation: Ablation,
    pub use_relation_terms: bool,
    pub dropout: f64,
    /// L2 coefficient lambda over weights and embeddings (not biases).
    pub l2: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    /// Early-stopping patience in epochs without validation improvement.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Training sentences longer than this are rejected with a warning.
    pub max_sentence_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 300,
            variant: WeightSharing::PerRelation,
            ablation: Ablation::Full,
            use_relation_terms: true,
            dropout: 0.5,
            l2: 0.001,
            lr: 0.001,
            batch_size: 20,
            clip_norm: 5.0,
            patience: 5,
            max_epochs: 100,
            seed: 42,
            max_sentence_len: 200,
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("embedding table is {rows}x{cols}, expected {want_rows}x{want_cols}")]
    EmbeddingShape {
        rows: usize,
        cols: usize,
        want_rows: usize,
        want_cols: usize,
    },
    #[error("sentence {index} in batch has no gold labels")]
    UnlabeledSentence { index: usize },
    #[error("corpus is not fully labeled (sentence {index})")]
    UnlabeledCorpus { index: usize },
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training corpus is empty (after length filtering)")]
    EmptyCorpus,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// The assembled model: architecture handles into one parameter store.
#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub word_embed: ParamId,
    pub tree: Option<BiDTreeParams>,
    pub seq: Option<SeqLstmParams>,
    pub projection: ProjectionParams,
    pub crf: CrfParamIds,
}

fn glorot(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let (fan_out, fan_in) = (shape[0] as f64, shape[1] as f64);
    let bound = (6.0 / (fan_in + fan_out)).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

fn tree_bank(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d: usize,
    num_rels: usize,
    variant: WeightSharing,
) -> DirectionParams {
    let word = GATES.map(|g| {
        store.add(
            format!("{prefix}.word.{}", g.tag()),
            glorot(&[d, d], rng),
            true,
        )
    });
    let bias = GATES.map(|g| {
        store.add(format!("{prefix}.bias.{}", g.tag()), Tensor::zeros(&[d]), false)
    });
    let sharing = match variant {
        WeightSharing::SharedAll => SharingParams::SharedAll {
            hidden: GATES.map(|g| {
                store.add(
                    format!("{prefix}.hidden.{}", g.tag()),
                    glorot(&[d, d], rng),
                    true,
                )
            }),
        },
        WeightSharing::PerRelationForget => {
            let hidden_iou = ["i", "o", "u"].map(|t| {
                store.add(format!("{prefix}.hidden.{t}"), glorot(&[d, d], rng), true)
            });
            let forget = (0..num_rels)
                .map(|r| RelPair {
                    input: store.add(
                        format!("{prefix}.rel.{r}.input.f"),
                        glorot(&[d, d], rng),
                        true,
                    ),
                    hidden: store.add(
                        format!("{prefix}.rel.{r}.hidden.f"),
                        glorot(&[d, d], rng),
                        true,
                    ),
                })
                .collect();
            SharingParams::PerRelationForget { hidden_iou, forget }
        }
        WeightSharing::PerRelation => {
            let rels = (0..num_rels)
                .map(|r| {
                    GATES.map(|g| RelPair {
                        input: store.add(
                            format!("{prefix}.rel.{r}.input.{}", g.tag()),
                            glorot(&[d, d], rng),
                            true,
                        ),
                        hidden: store.add(
                            format!("{prefix}.rel.{r}.hidden.{}", g.tag()),
                            glorot(&[d, d], rng),
                            true,
                        ),
                    })
                })
                .collect();
            SharingParams::PerRelation { rels }
        }
    };
    let rel_embed = store.add(
        format!("{prefix}.rel_embed"),
        Tensor::uniform(&[num_rels, d], -0.01, 0.01, rng),
        true,
    );
    DirectionParams {
        gates: TreeGateParams { word, bias, sharing },
        rel_embed,
    }
}

fn lstm_bank(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d: usize,
    input_dim: usize,
) -> LstmDirParams {
    let tags = ["i", "o", "f", "u"];
    LstmDirParams {
        w: tags.map(|t| {
            store.add(
                format!("{prefix}.w.{t}"),
                glorot(&[d, input_dim], rng),
                true,
            )
        }),
        u: tags.map(|t| store.add(format!("{prefix}.u.{t}"), glorot(&[d, d], rng), true)),
        b: tags.map(|t| store.add(format!("{prefix}.b.{t}"), Tensor::zeros(&[d]), false)),
    }
}

/// Build a model with freshly initialized parameters. Two builds from the
/// same config, vocabulary, and embedding table are bit-identical.
pub fn build_model(
    config: ModelConfig,
    vocab: Vocabulary,
    embeddings: &EmbeddingTable,
) -> Result<Model, ModelError> {
    let want = [vocab.num_words(), config.dim];
    if embeddings.matrix.shape() != want {
        return Err(ModelError::EmbeddingShape {
            rows: embeddings.matrix.shape()[0],
            cols: embeddings.matrix.shape().get(1).copied().unwrap_or(0),
            want_rows: want[0],
            want_cols: want[1],
        });
    }
    let mut model = allocate_model(config, vocab);
    *model.store.tensor_mut(model.word_embed) = embeddings.matrix.clone();
    Ok(model)
}

/// Allocate every tensor in the canonical order (weights seeded from
/// `config.seed`, word embeddings zeroed for the caller to fill).
pub(crate) fn allocate_model(config: ModelConfig, vocab: Vocabulary) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.dim;
    let mut store = ParamStore::new();

    let word_embed = store.add(
        "embed.words",
        Tensor::zeros(&[vocab.num_words(), d]),
        true,
    );

    let tree = if config.ablation.has_up() || config.ablation.has_down() {
        let up = config.ablation.has_up().then(|| {
            tree_bank(
                &mut store,
                &mut rng,
                "tree.up",
                d,
                vocab.num_fwd_relations(),
                config.variant,
            )
        });
        let down = config.ablation.has_down().then(|| {
            tree_bank(
                &mut store,
                &mut rng,
                "tree.down",
                d,
                vocab.num_inv_relations(),
                config.variant,
            )
        });
        Some(BiDTreeParams {
            up,
            down,
            variant: config.variant,
            use_relation_terms: config.use_relation_terms,
        })
    } else {
        None
    };

    let seq = config.ablation.has_bilstm().then(|| {
        let input_dim = match config.ablation {
            Ablation::Full => 2 * d,
            Ablation::DtreeUp | Ablation::DtreeDown | Ablation::BilstmCrf => d,
            Ablation::BidtreeCrf => unreachable!(),
        };
        SeqLstmParams {
            fwd: lstm_bank(&mut store, &mut rng, "bilstm.fwd", d, input_dim),
            bwd: lstm_bank(&mut store, &mut rng, "bilstm.bwd", d, input_dim),
            input_dim,
            hidden_dim: d,
        }
    });

    let projection = ProjectionParams {
        w: store.add("proj.w", glorot(&[NUM_LABELS, 2 * d], &mut rng), true),
        b: store.add("proj.b", Tensor::zeros(&[NUM_LABELS]), false),
    };

    let crf = CrfParamIds {
        weights: store.add(
            "crf.weights",
            glorot(&[NUM_PAIRS, NUM_LABELS], &mut rng),
            true,
        ),
        biases: store.add("crf.biases", Tensor::zeros(&[NUM_PAIRS]), false),
    };

    Model {
        config,
        vocab,
        store,
        word_embed,
        tree,
        seq,
        projection,
        crf,
    }
}

/// Inverted-dropout mask: keep with probability `1 - rate`, scale kept
/// coordinates by `1/(1 - rate)`.
fn dropout_mask(g: &mut Graph, len: usize, rate: f64, rng: &mut ChaCha8Rng) -> Value {
    let keep = 1.0 - rate;
    let data = (0..len)
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    g.constant(Tensor::vector(data))
}

impl Model {
    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Per-token projected label scores for one sentence, built on `g`
    /// against the tensors in `store` (normally `&self.store`; gradient
    /// checking passes a perturbed copy). `dropout` carries the rate and a
    /// seeded generator at train time.
    fn features_on(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        tree: &DepTree,
        mut dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Vec<Value> {
        let mut leaves = ParamLeaves::new(store);
        let xs: Vec<Value> = tree
            .tokens()
            .iter()
            .map(|t| {
                let row = self.vocab.word_id(&t.surface);
                leaves.row(g, self.word_embed, row)
            })
            .collect();

        let mut apply_dropout = |g: &mut Graph, vs: Vec<Value>| -> Vec<Value> {
            match dropout.as_mut() {
                None => vs,
                Some((rate, rng)) => vs
                    .into_iter()
                    .map(|v| {
                        let len = g.value(v).len();
                        let mask = dropout_mask(g, len, *rate, rng);
                        g.hadamard(v, mask)
                    })
                    .collect(),
            }
        };

        let encoded: Vec<Value> = match self.config.ablation {
            Ablation::Full | Ablation::BidtreeCrf => {
                let params = self.tree.as_ref().expect("tree params present");
                let out = bidtree_encode(g, &mut leaves, tree, &self.vocab, params, &xs);
                apply_dropout(g, out)
            }
            Ablation::DtreeUp => {
                let params = self.tree.as_ref().expect("tree params present");
                let states = bottom_up_pass(
                    g,
                    &mut leaves,
                    tree,
                    &self.vocab,
                    params.up.as_ref().expect("up bank"),
                    params.use_relation_terms,
                    &xs,
                );
                apply_dropout(g, states.into_iter().map(|s| s.h).collect())
            }
            Ablation::DtreeDown => {
                let params = self.tree.as_ref().expect("tree params present");
                let states = top_down_pass(
                    g,
                    &mut leaves,
                    tree,
                    &self.vocab,
                    params.down.as_ref().expect("down bank"),
                    params.use_relation_terms,
                    &xs,
                );
                apply_dropout(g, states.into_iter().map(|s| s.h).collect())
            }
            Ablation::BilstmCrf => xs,
        };

        let projected_input: Vec<Value> = match &self.seq {
            Some(seq) => {
                let out = bilstm(g, &mut leaves, seq, &encoded);
                apply_dropout(g, out)
            }
            None => encoded,
        };

        projected_input
            .into_iter()
            .map(|v| crate::sequence::project(g, &mut leaves, &self.projection, v))
            .collect()
    }

    /// Negative log-likelihood of one labeled sentence plus its leaf
    /// gradients.
    fn sentence_nll_on(
        &self,
        store: &ParamStore,
        tree: &DepTree,
        labels: &[Label],
        dropout_seed: Option<u64>,
    ) -> (f64, Vec<(ParamRef, Tensor)>) {
        let mut g = Graph::new();
        let mut rng_slot;
        let dropout = match dropout_seed {
            Some(seed) if self.config.dropout > 0.0 => {
                rng_slot = ChaCha8Rng::seed_from_u64(seed);
                Some((self.config.dropout, &mut rng_slot))
            }
            _ => None,
        };
        let feats = self.features_on(store, &mut g, tree, dropout);
        let mut leaves = ParamLeaves::new(store);
        let nll = crf::nll_value(&mut g, &mut leaves, self.crf, &feats, labels);
        g.backward(nll).expect("nll is scalar");
        let loss = g.value(nll).item();
        (loss, g.take_param_grads())
    }

    fn l2_penalty_on(&self, store: &ParamStore) -> f64 {
        if self.config.l2 == 0.0 {
            return 0.0;
        }
        let ss: f64 = store
            .iter()
            .filter(|(_, e)| e.regularized)
            .map(|(_, e)| e.tensor.sum_squares())
            .sum();
        0.5 * self.config.l2 * ss
    }

    fn batch_loss_on(
        &self,
        store: &ParamStore,
        batch: &[&DepTree],
        seeds: Option<&[u64]>,
        pool: Option<&rayon::ThreadPool>,
    ) -> Result<(f64, Gradients), ModelError> {
        let labels: Vec<Vec<Label>> = batch
            .iter()
            .enumerate()
            .map(|(i, t)| t.labels().ok_or(ModelError::UnlabeledSentence { index: i }))
            .collect::<Result<_, _>>()?;

        let run = |i: usize| -> (f64, Vec<(ParamRef, Tensor)>) {
            let seed = seeds.map(|s| s[i]);
            self.sentence_nll_on(store, batch[i], &labels[i], seed)
        };
        let per_sentence: Vec<(f64, Vec<(ParamRef, Tensor)>)> = match pool {
            Some(pool) => pool.install(|| {
                use rayon::prelude::*;
                (0..batch.len()).into_par_iter().map(run).collect()
            }),
            None => (0..batch.len()).map(run).collect(),
        };

        // Reduce in sentence order so results do not depend on workers.
        let mut loss = 0.0;
        let mut grads = Gradients::new(store);
        for (nll, leaf_grads) in &per_sentence {
            loss += nll;
            grads.absorb(store, leaf_grads);
        }
        loss += self.l2_penalty_on(store);
        grads.add_l2(store, self.config.l2);
        Ok((loss, grads))
    }

    /// Summed negative log-likelihood over a labeled batch plus the L2
    /// term, with accumulated gradients. `dropout_seeds` (one per
    /// sentence) enables train-time dropout; `None` evaluates
    /// deterministically.
    pub fn forward_loss(
        &self,
        batch: &[&DepTree],
        dropout_seeds: Option<&[u64]>,
    ) -> Result<(f64, Gradients), ModelError> {
        self.batch_loss_on(&self.store, batch, dropout_seeds, None)
    }

    /// Projected per-token label scores with dropout off (the CRF input).
    pub fn sentence_features(&self, tree: &DepTree) -> Vec<Vec<f64>> {
        let mut g = Graph::new();
        let feats = self.features_on(&self.store, &mut g, tree, None);
        feats.iter().map(|v| g.value(*v).data().to_vec()).collect()
    }

    /// Viterbi label sequence for one sentence (dropout off).
    pub fn predict_labels(&self, tree: &DepTree) -> Vec<Label> {
        let feature_rows = self.sentence_features(tree);
        let params = CrfParams::from_tensors(
            self.store.tensor(self.crf.weights).clone(),
            self.store.tensor(self.crf.biases).clone(),
        );
        let (labels, _) = crf::viterbi(&feature_rows, &params).expect("nonempty sentence");
        labels
    }

    /// Decode every sentence into aspect spans (dropout off).
    pub fn predict(&self, corpus: &[DepTree]) -> Vec<Vec<AspectSpan>> {
        corpus
            .iter()
            .map(|tree| {
                let labels = self.predict_labels(tree);
                decode_spans(&labels, &tree.surfaces()).expect("labels match tokens")
            })
            .collect()
    }

    /// Corpus-level micro P/R/F1 of predictions against gold labels.
    pub fn evaluate(&self, corpus: &[DepTree]) -> Result<EvalReport, ModelError> {
        let mut reports = Vec::with_capacity(corpus.len());
        for (i, tree) in corpus.iter().enumerate() {
            let gold_labels = tree
                .labels()
                .ok_or(ModelError::UnlabeledCorpus { index: i })?;
            let surfaces = tree.surfaces();
            let gold = decode_spans(&gold_labels, &surfaces).expect("validated lengths");
            let predicted = decode_spans(&self.predict_labels(tree), &surfaces).unwrap();
            reports.push(span_f1(&gold, &predicted));
        }
        Ok(EvalReport::pool(reports))
    }

    /// Train with Adam, global-norm clipping, per-epoch shuffling, and
    /// early stopping on validation span-F1; returns the model restored to
    /// its best-validation snapshot.
    pub fn train(
        mut self,
        train_corpus: &[DepTree],
        dev_corpus: &[DepTree],
        workers: usize,
    ) -> Result<(Model, TrainHistory), TrainError> {
        let cap = self.config.max_sentence_len;
        let usable: Vec<&DepTree> = train_corpus.iter().filter(|t| t.len() <= cap).collect();
        let skipped = train_corpus.len() - usable.len();
        if skipped > 0 {
            eprintln!("warning: skipping {skipped} training sentence(s) longer than {cap} tokens");
        }
        if usable.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        for (i, t) in usable.iter().enumerate() {
            if t.labels().is_none() {
                return Err(ModelError::UnlabeledCorpus { index: i }.into());
            }
        }

        let pool = (workers > 1).then(|| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .expect("thread pool")
        });

        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(1));
        let hyper = AdamHyper {
            lr: self.config.lr,
            ..AdamHyper::default()
        };
        let mut adam = AdamState::new(&self.store);
        let mut history = TrainHistory {
            epochs: Vec::new(),
            best_epoch: 0,
            stop: StopReason::MaxEpochs,
            skipped_too_long: skipped,
        };
        let mut best_f1 = f64::NEG_INFINITY;
        let mut best_params: Vec<Tensor> = Vec::new();
        let mut no_improve = 0usize;

        for epoch in 1..=self.config.max_epochs {
            let mut order: Vec<usize> = (0..usable.len()).collect();
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(self.config.batch_size.max(1)) {
                let batch: Vec<&DepTree> = chunk.iter().map(|&i| usable[i]).collect();
                let seeds: Vec<u64> = batch.iter().map(|_| rng.gen()).collect();
                let (loss, mut grads) =
                    self.batch_loss_on(&self.store, &batch, Some(&seeds), pool.as_ref())?;
                if !loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        batch: batches,
                    });
                }
                grads.clip_global_norm(self.config.clip_norm);
                adam_step(&mut self.store, &grads, &mut adam, &hyper);
                loss_sum += loss;
                batches += 1;
            }
            let train_loss = loss_sum / batches as f64;
            let val_f1 = self.evaluate(dev_corpus)?.f1;
            history.epochs.push(EpochStats { train_loss, val_f1 });

            if val_f1 > best_f1 {
                best_f1 = val_f1;
                history.best_epoch = epoch;
                best_params = self.store.ids().map(|id| self.store.tensor(id).clone()).collect();
                no_improve = 0;
            } else {
                no_improve += 1;
                if no_improve >= self.config.patience {
                    history.stop = StopReason::EarlyStopped;
                    break;
                }
            }
        }

        // Restore the best-validation snapshot.
        for (id, tensor) in self.store.ids().collect::<Vec<_>>().into_iter().zip(best_params) {
            *self.store.tensor_mut(id) = tensor;
        }
        Ok((self, history))
    }
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    /// Mean batch loss (summed NLL + L2) over the epoch.
    pub train_loss: f64,
    pub val_f1: f64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum StopReason {
    EarlyStopped,
    MaxEpochs,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    /// 1-based epoch whose snapshot the returned model carries.
    pub best_epoch: usize,
    pub stop: StopReason,
    pub skipped_too_long: usize,
}

impl TrainHistory {
    pub fn best_val_f1(&self) -> f64 {
        self.epochs
            .get(self.best_epoch.wrapping_sub(1))
            .map(|e| e.val_f1)
            .unwrap_or(f64::NAN)
    }
}

/// Finite-difference check of the full training objective on a small
/// labeled batch, dropout off. Returns one entry per parameter tensor.
pub fn model_grad_check(
    model: &mut Model,
    batch: &[&DepTree],
    eps: f64,
    max_coords: usize,
) -> Result<Vec<crate::autodiff::GroupCheck>, ModelError> {
    let (_, analytic) = model.forward_loss(batch, None)?;
    let mut store = std::mem::take(&mut model.store);
    let checks = crate::autodiff::grad_check(
        &mut store,
        |s| {
            let (loss, _) = model
                .batch_loss_on(s, batch, None, None)
                .expect("labeled batch");
            loss
        },
        &analytic,
        eps,
        max_coords,
    );
    model.store = store;
    Ok(checks)
}
