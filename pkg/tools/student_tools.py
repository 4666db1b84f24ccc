"""
Desk-scale student reranker distilled from teacher rankings and reasons.

The student has three parts:
  * a scorer (linear, or one tanh hidden layer) mapping a document's feature
    vector to a relevance score s_i;
  * a generation head: a linear map from a bag-of-context vector
    [query hash features, document features, 1, previous-token bucket] to
    logits over a closed vocabulary, trained with teacher forcing;
  * mixing logits lambda whose softmax gives (alpha, beta, gamma), the weights of
    the pairwise hinge, listwise KL and generation cross-entropy losses.

All gradients are analytic, including the gradient with respect to lambda.
"""
import csv
import json
import hashlib
import logging
from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from typing import Optional, List, Dict, Sequence, Tuple, Callable, Iterable, Any, Union

import numpy as np
from scipy.special import log_softmax, softmax
from pydantic import BaseModel, Field
from tqdm import tqdm

from tools.bm25_tools import InvertedIndex, BM25Params, RankedList, tokenize, score_all
from tools.corpus_tools import Corpus, Query, Qrels

PARAMS_FORMAT = "reasonrank-student"
PARAMS_VERSION = 1
UNK, EOS = 0, 1
DEFAULT_HASH_DIM = 64
DEFAULT_VOCAB_SIZE = 2048
DEFAULT_PAIR_CAP = 50
DEFAULT_MAX_REASON_TOKENS = 32
PREV_TOKEN_BUCKETS = 16
DENSE_FEATURES = ("bm25", "overlap_ratio", "first_stage_rank", "length_ratio")
LOSS_NAMES = ("pairwise", "listwise", "generation")


class StudentInputError(ValueError):
    pass


class StudentShapeError(StudentInputError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, example_index: int, value: float):
        self.epoch = epoch
        self.example_index = example_index
        super().__init__(f"non-finite loss {value} at epoch {epoch}, example {example_index}")


# --- Features ---
def _bucket(token: str, dim: int) -> Tuple[int, float]:
    digest = int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "big")
    return digest % dim, (1.0 if (digest >> 32) & 1 else -1.0)


def hashed_bag_of_words(tokens: Iterable[str], dim: int) -> np.ndarray:
    vector = np.zeros(dim, dtype=np.float64)
    for token in tokens:
        slot, sign = _bucket(token, dim)
        vector[slot] += sign
    norm = np.linalg.norm(vector)
    return vector / norm if norm > 0 else vector


class FeatureExtractor:
    """Per-(query, document) feature vectors over one index."""

    def __init__(self, index: InvertedIndex, corpus: Corpus, hash_dim: int = DEFAULT_HASH_DIM,
                 bm25_params: BM25Params = BM25Params()):
        self.index = index
        self.corpus = corpus
        self.hash_dim = hash_dim
        self.bm25_params = bm25_params
        self._doc_tokens: Dict[str, List[str]] = {}

    @property
    def feature_names(self) -> List[str]:
        return list(DENSE_FEATURES) + [f"hash_{i}" for i in range(self.hash_dim)]

    @property
    def feature_dim(self) -> int:
        return len(DENSE_FEATURES) + self.hash_dim

    def schema_hash(self) -> str:
        return hashlib.sha256(",".join(self.feature_names).encode("utf-8")).hexdigest()[:16]

    def _tokens(self, doc_id: str) -> List[str]:
        if doc_id not in self._doc_tokens:
            self._doc_tokens[doc_id] = tokenize(self.corpus.get(doc_id).text)
        return self._doc_tokens[doc_id]

    def query_vector(self, query: Query) -> np.ndarray:
        return hashed_bag_of_words(tokenize(query.text), self.hash_dim)

    def features(self, query: Query, doc_ids: Sequence[str]) -> np.ndarray:
        """Rows follow doc_ids, which is taken to be the first-stage order."""
        query_tokens = tokenize(query.text)
        query_terms = set(query_tokens)
        bm25 = score_all(self.index, query_tokens, self.bm25_params)
        avgdl = self.index.avgdl or 1.0
        n = len(doc_ids)
        rows = np.zeros((n, self.feature_dim), dtype=np.float64)
        for position, doc_id in enumerate(doc_ids):
            tokens = self._tokens(doc_id)
            overlap = len(query_terms & set(tokens)) / len(query_terms) if query_terms else 0.0
            rows[position, 0] = bm25[self.index.ordinal(doc_id)]
            rows[position, 1] = overlap
            rows[position, 2] = 1.0 - position / n
            rows[position, 3] = len(tokens) / avgdl
            rows[position, len(DENSE_FEATURES):] = hashed_bag_of_words(tokens, self.hash_dim)
        return rows


# --- Vocabulary ---
class GenerationVocab:
    def __init__(self, words: Sequence[str]):
        self.tokens: List[str] = ["<unk>", "<eos>"] + [w for w in words if w not in ("<unk>", "<eos>")]
        self._ids = {token: i for i, token in enumerate(self.tokens)}

    @classmethod
    def build(cls, texts: Iterable[str], size: int = DEFAULT_VOCAB_SIZE) -> "GenerationVocab":
        counts = Counter(token for text in texts for token in tokenize(text))
        words = [word for word, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:size]]
        return cls(words)

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str, max_tokens: int = DEFAULT_MAX_REASON_TOKENS) -> np.ndarray:
        ids = [self._ids.get(token, UNK) for token in tokenize(text)][: max_tokens - 1]
        return np.asarray(ids + [EOS], dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> str:
        words = []
        for token_id in ids:
            if token_id == EOS:
                break
            words.append(self.tokens[token_id])
        return " ".join(words)


# --- Training units ---
@dataclass
class DistillationExample:
    query_id: str
    doc_ids: List[str]
    features: np.ndarray            # (n, F), rows in first-stage order
    query_features: np.ndarray      # (Q,)
    teacher_order: List[int]        # candidate indices, best first
    targets: np.ndarray             # z_i per candidate
    target_tokens: List[np.ndarray]  # y_i^gen per candidate, EOS-terminated
    pairs: np.ndarray               # (m, 2) rows (i, j): i preferred over j

    @property
    def size(self) -> int:
        return len(self.doc_ids)


def targets_from_order(order: Sequence[int], n: int) -> np.ndarray:
    """z_i = (n - rank_i) / n with 1-based teacher ranks."""
    z = np.zeros(n, dtype=np.float64)
    for rank, index in enumerate(order, start=1):
        z[index] = (n - rank) / n
    return z


def build_pairs(order: Sequence[int], cap: int = DEFAULT_PAIR_CAP) -> np.ndarray:
    """Preference pairs from a strict order, closest ranks first, at most cap."""
    ranked = [(j - i, i, order[i], order[j]) for i in range(len(order)) for j in range(i + 1, len(order))]
    ranked.sort()
    chosen = [(a, b) for _, _, a, b in ranked[:cap]]
    return np.asarray(chosen, dtype=np.int64).reshape(-1, 2)


def build_pairs_from_grades(grades: np.ndarray, cap: int = DEFAULT_PAIR_CAP) -> np.ndarray:
    n = len(grades)
    ranked = sorted(
        (abs(float(grades[i] - grades[j])), i, j) if grades[i] > grades[j] else (abs(float(grades[i] - grades[j])), j, i)
        for i in range(n) for j in range(i + 1, n) if grades[i] != grades[j]
    )
    return np.asarray([(a, b) for _, a, b in ranked[:cap]], dtype=np.int64).reshape(-1, 2)


def build_example(
    query: Query,
    doc_ids: Sequence[str],
    teacher_doc_order: Sequence[str],
    reasons: Dict[str, str],
    extractor: FeatureExtractor,
    vocab: GenerationVocab,
    targets: str = "teacher",
    qrels: Optional[Qrels] = None,
    pair_cap: int = DEFAULT_PAIR_CAP,
    max_reason_tokens: int = DEFAULT_MAX_REASON_TOKENS,
) -> DistillationExample:
    doc_ids = list(doc_ids)
    position = {doc_id: i for i, doc_id in enumerate(doc_ids)}
    order = [position[doc_id] for doc_id in teacher_doc_order if doc_id in position]
    if targets == "qrels":
        if qrels is None:
            raise StudentInputError("targets=qrels requires relevance judgments")
        z = np.asarray([float(qrels.grade(query.query_id, doc_id)) for doc_id in doc_ids])
        pairs = build_pairs_from_grades(z, pair_cap)
    else:
        z = targets_from_order(order, len(doc_ids))
        pairs = build_pairs(order, pair_cap)
    return DistillationExample(
        query_id=query.query_id,
        doc_ids=doc_ids,
        features=extractor.features(query, doc_ids),
        query_features=extractor.query_vector(query),
        teacher_order=order,
        targets=z,
        target_tokens=[vocab.encode(reasons.get(doc_id, ""), max_reason_tokens) for doc_id in doc_ids],
        pairs=pairs,
    )


def build_examples(
    queries: Sequence[Query],
    first_stage: Dict[str, RankedList],
    teacher_outputs: Dict[str, Any],
    extractor: FeatureExtractor,
    vocab: GenerationVocab,
    reason_source: str = "direct",
    **kwargs: Any,
) -> List[DistillationExample]:
    """One example per query that has both a candidate list and a teacher output.

    reason_source picks the teacher text the generation head learns: "direct",
    "listwise" or "both" (concatenated).
    """
    examples = []
    for query in queries:
        candidates = first_stage.get(query.query_id)
        output = teacher_outputs.get(query.query_id)
        if candidates is None or output is None or len(candidates) == 0:
            logging.debug(f"No training example for query {query.query_id}")
            continue
        examples.append(build_example(
            query, candidates.doc_ids(), output.doc_order, reason_texts(output, reason_source),
            extractor, vocab, **kwargs,
        ))
    return examples


def reason_texts(output: Any, reason_source: str = "direct") -> Dict[str, str]:
    if reason_source == "direct":
        return dict(output.direct_reasons)
    if reason_source == "listwise":
        return dict(output.listwise_reasons)
    if reason_source == "both":
        return {doc_id: f"{output.direct_reasons.get(doc_id, '')} {output.listwise_reasons.get(doc_id, '')}".strip()
                for doc_id in output.doc_order}
    raise StudentInputError(f"unknown reason source {reason_source!r}")


def subsample_examples(examples: Sequence[DistillationExample], size: Optional[int], seed: int) -> List[DistillationExample]:
    """Bottom-k priority sample: for one seed, smaller samples nest inside larger ones."""
    if size is None or size >= len(examples):
        return list(examples)
    priorities = np.random.default_rng(seed).random(len(examples))
    keep = set(np.argsort(priorities, kind="stable")[:size].tolist())
    return [example for i, example in enumerate(examples) if i in keep]


# --- Parameters ---
class TrainConfig(BaseModel):
    epochs: int = Field(200, ge=0)
    learning_rate: float = Field(0.05, gt=0.0)
    mix_learning_rate: float = Field(0.001, ge=0.0, description="Step size for the loss-mixing logits.")
    momentum: float = Field(0.0, ge=0.0, lt=1.0)
    seed: int = 42
    scorer: str = Field("linear", pattern="^(linear|mlp)$")
    hidden_size: int = Field(32, ge=1)
    init_scale: float = Field(0.1, ge=0.0)
    progress: bool = False


@dataclass
class StudentParams:
    scorer: str
    arrays: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    @property
    def mix_logits(self) -> np.ndarray:
        return self.arrays["mix_logits"]

    @property
    def generation_weights(self) -> np.ndarray:
        return self.arrays["W_g"]

    @property
    def feature_dim(self) -> int:
        return self.arrays["w"].shape[0] if self.scorer == "linear" else self.arrays["W1"].shape[1]

    @property
    def vocab_size(self) -> int:
        return self.arrays["W_g"].shape[1]

    def mix_weights(self) -> np.ndarray:
        """(alpha, beta, gamma) on the simplex."""
        return softmax(self.arrays["mix_logits"])

    def copy(self) -> "StudentParams":
        return StudentParams(self.scorer, OrderedDict((k, v.copy()) for k, v in self.arrays.items()))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.arrays.values()])

    def with_vector(self, vector: np.ndarray) -> "StudentParams":
        arrays = OrderedDict()
        offset = 0
        for name, value in self.arrays.items():
            arrays[name] = np.asarray(vector[offset:offset + value.size], dtype=np.float64).reshape(value.shape).copy()
            offset += value.size
        return StudentParams(self.scorer, arrays)

    def equals(self, other: "StudentParams") -> bool:
        return (self.scorer == other.scorer and list(self.arrays) == list(other.arrays)
                and all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays))


def context_dim(feature_dim: int, query_dim: int) -> int:
    return query_dim + feature_dim + 1 + PREV_TOKEN_BUCKETS


def init_params(feature_dim: int, query_dim: int, vocab_size: int, config: TrainConfig = TrainConfig()) -> StudentParams:
    rng = np.random.default_rng(config.seed)
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    if config.scorer == "linear":
        arrays["w"] = np.zeros(feature_dim)
    else:
        arrays["W1"] = rng.normal(0.0, config.init_scale, size=(config.hidden_size, feature_dim))
        arrays["b1"] = np.zeros(config.hidden_size)
        arrays["w2"] = rng.normal(0.0, config.init_scale, size=config.hidden_size)
    arrays["W_g"] = np.zeros((context_dim(feature_dim, query_dim), vocab_size))
    arrays["mix_logits"] = np.zeros(3)
    return StudentParams(config.scorer, arrays)


# --- Scorer ---
def _check_features(params: StudentParams, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    matrix = features.reshape(1, -1) if features.ndim == 1 else features
    if matrix.ndim != 2 or matrix.shape[1] != params.feature_dim:
        raise StudentShapeError(f"feature dimension {matrix.shape[-1]} does not match scorer dimension {params.feature_dim}")
    return matrix


def score(params: StudentParams, features: np.ndarray) -> Union[float, np.ndarray]:
    """Scores for an (n, d) matrix; a single (d,) feature vector gets a plain float."""
    matrix = _check_features(params, features)
    if params.scorer == "linear":
        scores = matrix @ params.arrays["w"]
    else:
        hidden = np.tanh(matrix @ params.arrays["W1"].T + params.arrays["b1"])
        scores = hidden @ params.arrays["w2"]
    return scores if np.ndim(features) == 2 else float(scores[0])


def _scorer_backward(params: StudentParams, features: np.ndarray, grad_scores: np.ndarray) -> Dict[str, np.ndarray]:
    if params.scorer == "linear":
        return {"w": features.T @ grad_scores}
    pre = features @ params.arrays["W1"].T + params.arrays["b1"]
    hidden = np.tanh(pre)
    grad_hidden = np.outer(grad_scores, params.arrays["w2"]) * (1.0 - hidden ** 2)
    return {
        "W1": grad_hidden.T @ features,
        "b1": grad_hidden.sum(axis=0),
        "w2": hidden.T @ grad_scores,
    }


# --- Losses ---
def pairwise_loss(scores: np.ndarray, pairs: np.ndarray) -> float:
    """Sum over (i, j) of max(0, 1 - (s_i - s_j))."""
    if len(pairs) == 0:
        return 0.0
    pairs = np.asarray(pairs, dtype=np.int64)
    margins = 1.0 - (scores[pairs[:, 0]] - scores[pairs[:, 1]])
    return float(np.maximum(0.0, margins).sum())


def pairwise_grad(scores: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    grad = np.zeros_like(scores, dtype=np.float64)
    if len(pairs) == 0:
        return grad
    pairs = np.asarray(pairs, dtype=np.int64)
    active = (1.0 - (scores[pairs[:, 0]] - scores[pairs[:, 1]])) > 0.0
    np.add.at(grad, pairs[active, 0], -1.0)
    np.add.at(grad, pairs[active, 1], 1.0)
    return grad


def _check_finite(*arrays: np.ndarray) -> None:
    for array in arrays:
        if not np.all(np.isfinite(array)):
            raise StudentInputError("non-finite values in loss input")


def listwise_loss(scores: np.ndarray, targets: np.ndarray) -> float:
    """KL(softmax(z) || softmax(s))."""
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if scores.shape != targets.shape or scores.size == 0:
        raise StudentShapeError(f"scores {scores.shape} and targets {targets.shape} must match and be non-empty")
    _check_finite(scores, targets)
    log_q = log_softmax(targets)
    log_p = log_softmax(scores)
    return float(np.sum(np.exp(log_q) * (log_q - log_p)))


def listwise_grad(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    return softmax(np.asarray(scores, dtype=np.float64)) - softmax(np.asarray(targets, dtype=np.float64))


def generation_loss(reason_logits: Sequence[np.ndarray], target_tokens: Sequence[np.ndarray]) -> float:
    """Mean over documents of the summed per-token cross-entropy."""
    if len(reason_logits) != len(target_tokens):
        raise StudentShapeError("one logit matrix per target sequence expected")
    if not reason_logits:
        return 0.0
    total = 0.0
    for logits, tokens in zip(reason_logits, target_tokens):
        logits = np.asarray(logits, dtype=np.float64)
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= logits.shape[-1]):
            raise StudentInputError(f"target token id out of range for vocabulary of {logits.shape[-1]}")
        log_probs = log_softmax(logits, axis=-1)
        total -= float(log_probs[np.arange(tokens.size), tokens].sum())
    return total / len(reason_logits)


def _prev_bucket(token_id: Optional[int]) -> int:
    return 0 if token_id is None else 1 + int(token_id) % (PREV_TOKEN_BUCKETS - 1)


def _doc_context(example_query: np.ndarray, doc_features: np.ndarray) -> np.ndarray:
    return np.concatenate([example_query, doc_features, [1.0]])


def generation_contexts(example: DistillationExample, doc_index: int) -> np.ndarray:
    """Teacher-forced contexts, one row per target position."""
    base = _doc_context(example.query_features, example.features[doc_index])
    tokens = example.target_tokens[doc_index]
    rows = np.zeros((tokens.size, base.size + PREV_TOKEN_BUCKETS))
    rows[:, :base.size] = base
    previous = [None] + tokens[:-1].tolist()
    for t, token_id in enumerate(previous):
        rows[t, base.size + _prev_bucket(token_id)] = 1.0
    return rows


def reason_logits(params: StudentParams, example: DistillationExample) -> List[np.ndarray]:
    weights = params.generation_weights
    return [generation_contexts(example, i) @ weights for i in range(example.size)]


# --- Combined objective ---
def loss_terms(params: StudentParams, example: DistillationExample) -> np.ndarray:
    scores = score(params, example.features)
    return np.asarray([
        pairwise_loss(scores, example.pairs),
        listwise_loss(scores, example.targets),
        generation_loss(reason_logits(params, example), example.target_tokens),
    ])


def combined_loss(params: StudentParams, example: DistillationExample) -> float:
    return float(params.mix_weights() @ loss_terms(params, example))


def _loss_and_grad(params: StudentParams, example: DistillationExample) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    alpha, beta, gamma = weights = params.mix_weights()
    scores = score(params, example.features)

    grad_scores = alpha * pairwise_grad(scores, example.pairs) + beta * listwise_grad(scores, example.targets)
    grads = _scorer_backward(params, example.features, grad_scores)

    contexts = [generation_contexts(example, i) for i in range(example.size)]
    logits = [ctx @ params.generation_weights for ctx in contexts]
    grad_g = np.zeros_like(params.generation_weights)
    for ctx, lg, tokens in zip(contexts, logits, example.target_tokens):
        delta = softmax(lg, axis=-1)
        delta[np.arange(tokens.size), tokens] -= 1.0
        grad_g += ctx.T @ delta
    grads["W_g"] = gamma * grad_g / max(example.size, 1)

    terms = np.asarray([
        pairwise_loss(scores, example.pairs),
        listwise_loss(scores, example.targets),
        generation_loss(logits, example.target_tokens),
    ])
    grads["mix_logits"] = weights * (terms - weights @ terms)
    return terms, grads


def combined_grad(params: StudentParams, example: DistillationExample) -> "OrderedDict[str, np.ndarray]":
    _, grads = _loss_and_grad(params, example)
    return OrderedDict((name, grads[name]) for name in params.arrays)


# --- Training ---
class EpochTrace(BaseModel):
    epoch: int
    pairwise: float
    listwise: float
    generation: float
    total: float
    alpha: float
    beta: float
    gamma: float


@dataclass
class TrainResult:
    params: StudentParams
    trace: List[EpochTrace]


def train(
    examples: Sequence[DistillationExample],
    config: TrainConfig,
    vocab_size: int,
    initial: Optional[StudentParams] = None,
    on_step: Optional[Callable[[int, int, StudentParams], None]] = None,
) -> TrainResult:
    if not examples:
        raise StudentInputError("training needs at least one example")
    first = examples[0]
    params = (initial or init_params(first.features.shape[1], first.query_features.shape[0], vocab_size, config)).copy()
    velocity = {name: np.zeros_like(value) for name, value in params.arrays.items()}
    rng = np.random.default_rng(config.seed)
    trace: List[EpochTrace] = []

    epochs = range(config.epochs)
    if config.progress:
        epochs = tqdm(epochs, desc="train", unit="epoch")
    for epoch in epochs:
        sums = np.zeros(3)
        weighted = 0.0
        for step, index in enumerate(rng.permutation(len(examples))):
            terms, grads = _loss_and_grad(params, examples[index])
            total = float(params.mix_weights() @ terms)
            if not np.isfinite(total):
                logging.error(f"Training diverged at epoch {epoch}, example {index}")
                raise TrainingDivergedError(epoch, int(index), total)
            for name, grad in grads.items():
                rate = config.mix_learning_rate if name == "mix_logits" else config.learning_rate
                velocity[name] = config.momentum * velocity[name] - rate * grad
                params.arrays[name] += velocity[name]
            sums += terms
            weighted += total
            if on_step is not None:
                on_step(epoch, step, params)
        alpha, beta, gamma = params.mix_weights()
        means = sums / len(examples)
        trace.append(EpochTrace(
            epoch=epoch, pairwise=means[0], listwise=means[1], generation=means[2],
            total=weighted / len(examples), alpha=alpha, beta=beta, gamma=gamma,
        ))
    if trace:
        last = trace[-1]
        logging.info(f"Training done: {len(trace)} epochs, loss={last.total:.4f}, "
                     f"alpha={last.alpha:.4f} beta={last.beta:.4f} gamma={last.gamma:.4f}")
    return TrainResult(params=params, trace=trace)


# --- Inference ---
def decode_reason(params: StudentParams, query_features: np.ndarray, doc_features: np.ndarray,
                  max_tokens: int = DEFAULT_MAX_REASON_TOKENS) -> List[int]:
    """Greedy decoding until EOS or max_tokens."""
    base = _doc_context(query_features, doc_features)
    context = np.zeros(base.size + PREV_TOKEN_BUCKETS)
    context[:base.size] = base
    produced: List[int] = []
    previous: Optional[int] = None
    for _ in range(max_tokens):
        context[base.size:] = 0.0
        context[base.size + _prev_bucket(previous)] = 1.0
        token_id = int(np.argmax(context @ params.generation_weights))
        if token_id == EOS:
            break
        produced.append(token_id)
        previous = token_id
    return produced


def rerank_student(
    params: StudentParams,
    query_id: str,
    doc_ids: Sequence[str],
    features: np.ndarray,
    query_features: np.ndarray,
    vocab: Optional[GenerationVocab] = None,
    max_tokens: int = DEFAULT_MAX_REASON_TOKENS,
) -> Tuple[RankedList, Dict[str, str]]:
    """Sort by student score (ties keep first-stage order) and decode a reason per document."""
    scores = score(params, features)
    order = sorted(range(len(doc_ids)), key=lambda i: -scores[i])
    ranked = RankedList(query_id=query_id, entries=[(doc_ids[i], float(scores[i])) for i in order])
    reasons: Dict[str, str] = {}
    if vocab is not None:
        for i in order:
            reasons[doc_ids[i]] = vocab.decode(decode_reason(params, query_features, features[i], max_tokens))
    return ranked, reasons


# --- Persistence ---
def save_params(params: StudentParams, vocab: GenerationVocab, schema_hash: str, path: str) -> None:
    payload = {
        "format": PARAMS_FORMAT,
        "version": PARAMS_VERSION,
        "scorer": params.scorer,
        "arrays": {name: {"shape": list(value.shape), "values": value.ravel().tolist()} for name, value in params.arrays.items()},
        "mix_weights": params.mix_weights().tolist(),
        "vocab": vocab.tokens,
        "feature_schema_hash": schema_hash,
        "prev_token_buckets": PREV_TOKEN_BUCKETS,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True)
        f.write("\n")


def load_params(path: str) -> Tuple[StudentParams, GenerationVocab, str]:
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    if payload.get("format") != PARAMS_FORMAT or payload.get("version") != PARAMS_VERSION:
        raise StudentInputError(f"{path}: unsupported parameter file {payload.get('format')} v{payload.get('version')}")
    order = ["w"] if payload["scorer"] == "linear" else ["W1", "b1", "w2"]
    arrays = OrderedDict(
        (name, np.asarray(payload["arrays"][name]["values"], dtype=np.float64).reshape(payload["arrays"][name]["shape"]))
        for name in order + ["W_g", "mix_logits"]
    )
    vocab = GenerationVocab(payload["vocab"][2:])
    return StudentParams(payload["scorer"], arrays), vocab, payload["feature_schema_hash"]


def write_loss_trace(trace: Sequence[EpochTrace], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["epoch", "L_pw", "L_lw", "L_gen", "total", "alpha", "beta", "gamma"])
        for row in trace:
            writer.writerow([row.epoch] + [f"{v:.8f}" for v in (row.pairwise, row.listwise, row.generation, row.total, row.alpha, row.beta, row.gamma)])


# --- Synthetic linear-teacher task ---
_SYNTHETIC_REASONS = (
    "strong direct match for the query",
    "partial match with useful background",
    "weak match with little relevant detail",
)


def make_synthetic_task(n_queries: int = 100, n_docs: int = 10, dim: int = 8, seed: int = 0,
                        query_dim: int = 4) -> Tuple[List[DistillationExample], GenerationVocab, np.ndarray]:
    """Teacher order = order by a hidden linear function of the features."""
    rng = np.random.default_rng(seed)
    hidden = rng.normal(size=dim)
    vocab = GenerationVocab.build(_SYNTHETIC_REASONS, size=64)
    examples = []
    for q in range(n_queries):
        features = rng.normal(size=(n_docs, dim))
        order = [int(i) for i in np.argsort(-(features @ hidden), kind="stable")]
        tokens: List[np.ndarray] = [np.zeros(0, dtype=np.int64)] * n_docs
        for rank, index in enumerate(order):
            tokens[index] = vocab.encode(_SYNTHETIC_REASONS[min(2, rank * 3 // n_docs)])
        examples.append(DistillationExample(
            query_id=f"syn{q}",
            doc_ids=[f"syn{q}_d{i}" for i in range(n_docs)],
            features=features,
            query_features=rng.normal(size=query_dim),
            teacher_order=order,
            targets=targets_from_order(order, n_docs),
            target_tokens=tokens,
            pairs=build_pairs(order),
        ))
    return examples, vocab, hidden
