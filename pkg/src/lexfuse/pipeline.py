"""End-to-end model assembly, training, gradient verification, checkpoints.

The full forward pass is: compose ``[CLS] S1 [SEP] S2 [SEP]``, sum
token/segment/position embeddings, run the encoder stack with the
deep-fusion hook after the configured layer, and classify the final
[CLS] hidden state.  Training uses Adam on exact reverse-mode gradients;
``gradient_check`` verifies every trainable tensor against central
finite differences in double precision.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import truncnorm

from . import autodiff as ad
from .autodiff import Tensor
from .classifier import (
    HeadParams,
    cross_entropy_from_logits,
    focal_loss_from_logits,
    head_logits,
)
from .data import Dataset
from .embedding import (
    EmbeddingTable,
    ModelInput,
    SynonymSet,
    Vocab,
    batch_embed,
    build_synonym_catalog,
    build_vocab,
    compose_input,
    compose_tokens,
)
from .encoder import Dropout, EncoderConfig, LayerParams, init_layer_params, run_encoder
from .fusion import FusionContext, FusionParams, deep_fusion
from .lexicon import KeywordSet, LexiconTrie, extract_keywords
from .metrics import Metrics, metrics_from_predictions
from .preprocessing import PreprocessRules, preprocess

__all__ = [
    "TrainConfig",
    "ModelParams",
    "AdamState",
    "TrainedModel",
    "TrainResult",
    "TrainingDivergedError",
    "CheckpointError",
    "GradCheckReport",
    "collate",
    "forward",
    "forward_logits",
    "backward",
    "adam_step",
    "train",
    "prepare_dataset",
    "predict_labels",
    "gradient_check",
    "save_checkpoint",
    "load_checkpoint",
    "save_history",
]


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss or a gradient stops being finite."""


class CheckpointError(ValueError):
    """Raised for unreadable, corrupt, or mismatching checkpoint files."""


@dataclass(frozen=True)
class TrainConfig:
    """Training protocol knobs.

    ``fusion_layer`` overrides the encoder's fusion point when set;
    ``enable_keywords`` switches the S2 keyword segment on or off and
    ``enable_synonyms`` the deep-fusion layer, giving the ablation grid.
    """

    learning_rate: float = 1e-3
    batch_size: int = 8
    epochs: int = 15
    dropout_rate: float = 0.1
    gamma: float = 2.0
    h_max: int = 5
    fusion_layer: int | None = None
    seed: int = 0
    loss_kind: str = "focal"
    enable_keywords: bool = True
    enable_synonyms: bool = True
    keyword_scope: str = "both"
    max_len: int = 48
    min_freq: int = 1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.loss_kind not in ("focal", "cross_entropy"):
            raise ValueError(f"loss_kind must be 'focal' or 'cross_entropy', got {self.loss_kind!r}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.h_max < 1:
            raise ValueError(f"h_max must be >= 1, got {self.h_max}")
        if self.keyword_scope not in ("both", "s2"):
            raise ValueError(f"keyword_scope must be 'both' or 's2', got {self.keyword_scope!r}")
        if self.max_len < 4:
            raise ValueError(f"max_len must be >= 4, got {self.max_len}")


def resolve_encoder_config(enc_cfg: EncoderConfig, train_cfg: TrainConfig) -> EncoderConfig:
    """Apply the training-config overrides (dropout, fusion layer)."""
    kwargs = asdict(enc_cfg)
    kwargs["dropout_rate"] = train_cfg.dropout_rate
    if train_cfg.fusion_layer is not None:
        kwargs["fusion_layer"] = train_cfg.fusion_layer
    return EncoderConfig(**kwargs)


class ModelParams:
    """All trainable tensors of one model instance."""

    def __init__(
        self,
        tok_emb: Tensor,
        seg_emb: Tensor,
        pos_emb: Tensor,
        layers: list,
        fusion: FusionParams,
        head: HeadParams,
        syn_emb: Tensor,
    ):
        self.tok_emb = tok_emb
        self.seg_emb = seg_emb
        self.pos_emb = pos_emb
        self.layers = layers
        self.fusion = fusion
        self.head = head
        self.syn_emb = syn_emb

    @classmethod
    def initialize(
        cls,
        enc_cfg: EncoderConfig,
        vocab_size: int,
        max_len: int,
        d_w: int,
        n_syn: int,
        seed: int = 0,
        dtype=np.float32,
        init_std: float = 0.02,
    ) -> "ModelParams":
        """Truncated-normal (clipped at 2 std) weights, zero biases."""
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        d = enc_cfg.d_model

        def w(shape):
            return truncnorm.rvs(-2.0, 2.0, scale=init_std, size=shape, random_state=rng)

        def wt(*shape):
            return Tensor(w(shape).astype(dtype), requires_grad=True)

        def zt(*shape):
            return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

        layers = [init_layer_params(enc_cfg, w, dtype) for _ in range(enc_cfg.n_layers)]
        return cls(
            tok_emb=wt(vocab_size, d),
            seg_emb=wt(2, d),
            pos_emb=wt(max_len, d),
            layers=layers,
            fusion=FusionParams(w1=wt(d, d_w), b1=zt(d), w2=wt(d, d)),
            head=HeadParams(w_class=wt(2, d), b_class=zt(2)),
            syn_emb=wt(n_syn, d_w) if n_syn else Tensor(np.zeros((0, d_w), dtype=dtype), requires_grad=True),
        )

    def named_tensors(self):
        yield "tok_emb", self.tok_emb
        yield "seg_emb", self.seg_emb
        yield "pos_emb", self.pos_emb
        for i, layer in enumerate(self.layers):
            yield from layer.named(f"layer{i}.")
        yield from self.fusion.named()
        yield "syn_emb", self.syn_emb
        yield from self.head.named()

    def zero_grad(self) -> None:
        for _, t in self.named_tensors():
            t.grad = None

    def check_finite(self) -> None:
        for name, t in self.named_tensors():
            if not np.isfinite(t.data).all():
                raise TrainingDivergedError(f"parameter tensor {name!r} contains NaN/Inf")

    def astype(self, dtype) -> "ModelParams":
        """A deep copy with every tensor cast to ``dtype``."""
        mapping = {name: Tensor(t.data.astype(dtype), requires_grad=True)
                   for name, t in self.named_tensors()}

        def layer_of(i):
            names = [n.split(".", 1)[1] for n in mapping if n.startswith(f"layer{i}.")]
            return LayerParams(**{n: mapping[f"layer{i}.{n}"] for n in names})

        return ModelParams(
            tok_emb=mapping["tok_emb"],
            seg_emb=mapping["seg_emb"],
            pos_emb=mapping["pos_emb"],
            layers=[layer_of(i) for i in range(len(self.layers))],
            fusion=FusionParams(
                w1=mapping["fusion.w1"], b1=mapping["fusion.b1"], w2=mapping["fusion.w2"]
            ),
            head=HeadParams(w_class=mapping["head.w_class"], b_class=mapping["head.b_class"]),
            syn_emb=mapping["syn_emb"],
        )


# -- batching -----------------------------------------------------------


@dataclass
class Batch:
    token_ids: np.ndarray
    segment_ids: np.ndarray
    attention_mask: np.ndarray
    keyword_mask: np.ndarray
    labels: np.ndarray
    contexts: list  # FusionContext | None per example


def collate(inputs: Sequence[ModelInput], contexts: Sequence | None = None) -> Batch:
    if not inputs:
        raise ValueError("cannot collate an empty batch")
    if contexts is None:
        contexts = [None] * len(inputs)
    if len(contexts) != len(inputs):
        raise ValueError("contexts must align with inputs")
    return Batch(
        token_ids=np.stack([i.token_ids for i in inputs]),
        segment_ids=np.stack([i.segment_ids for i in inputs]),
        attention_mask=np.stack([i.attention_mask for i in inputs]),
        keyword_mask=np.stack([i.keyword_mask for i in inputs]),
        labels=np.array([i.label for i in inputs], dtype=np.int64),
        contexts=list(contexts),
    )


def forward_logits(
    batch: Batch,
    params: ModelParams,
    enc_cfg: EncoderConfig,
    enable_synonyms: bool = True,
    dropout: Dropout | None = None,
) -> Tensor:
    """Differentiable forward pass to class logits (B, 2)."""
    e = batch_embed(batch.token_ids, batch.segment_ids, params.tok_emb, params.seg_emb, params.pos_emb)
    if dropout is not None:
        e = dropout(e)
    hook = None
    if enable_synonyms:
        def hook(x):
            return deep_fusion(x, batch.keyword_mask, batch.contexts, params.fusion, params.syn_emb)
    x = run_encoder(e, batch.attention_mask, params.layers, enc_cfg, hook, dropout)
    b = batch.token_ids.shape[0]
    cls = ad.gather2(x, np.arange(b), np.zeros(b, dtype=np.int64))
    return head_logits(cls, params.head)


def forward(
    inputs: Sequence[ModelInput],
    contexts: Sequence | None,
    params: ModelParams,
    enc_cfg: EncoderConfig,
    train_cfg: TrainConfig,
    mode: str = "eval",
    dropout_rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Class probabilities (B, 2) for a batch of composed inputs."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    batch = collate(inputs, contexts)
    dropout = None
    if mode == "train" and enc_cfg.dropout_rate > 0:
        if dropout_rng is None:
            raise ValueError("train-mode forward needs a dropout RNG")
        dropout = Dropout(dropout_rng, enc_cfg.dropout_rate)
    if mode == "eval":
        with ad.no_grad():
            logits = forward_logits(batch, params, enc_cfg, train_cfg.enable_synonyms, None)
    else:
        logits = forward_logits(batch, params, enc_cfg, train_cfg.enable_synonyms, dropout)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def batch_loss(
    batch: Batch,
    params: ModelParams,
    enc_cfg: EncoderConfig,
    train_cfg: TrainConfig,
    dropout: Dropout | None = None,
) -> Tensor:
    logits = forward_logits(batch, params, enc_cfg, train_cfg.enable_synonyms, dropout)
    if train_cfg.loss_kind == "focal":
        return focal_loss_from_logits(logits, batch.labels, train_cfg.gamma)
    return cross_entropy_from_logits(logits, batch.labels)


def backward(
    batch: Batch,
    params: ModelParams,
    enc_cfg: EncoderConfig,
    train_cfg: TrainConfig,
    dropout: Dropout | None = None,
):
    """Mean-batch-loss gradients for every tensor; zeros on disabled paths.

    Returns ``(loss_value, grads)`` where grads maps tensor name to an
    array of the tensor's shape.
    """
    params.zero_grad()
    loss = batch_loss(batch, params, enc_cfg, train_cfg, dropout)
    if not np.isfinite(loss.data):
        raise TrainingDivergedError("loss is not finite")
    loss.backward()
    grads: dict = {}
    for name, t in params.named_tensors():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.isfinite(g).all():
            raise TrainingDivergedError(f"gradient of tensor {name!r} contains NaN/Inf")
        grads[name] = g
    return loss.item(), grads


# -- optimizer ----------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment accumulators with bias correction."""

    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ModelParams) -> "AdamState":
        return cls(
            m={n: np.zeros_like(t.data) for n, t in params.named_tensors()},
            v={n: np.zeros_like(t.data) for n, t in params.named_tensors()},
        )


def adam_step(params: ModelParams, grads: dict, state: AdamState, lr: float) -> None:
    """One in-place Adam update."""
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name, t in params.named_tensors():
        g = grads[name]
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        t.data = t.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)


# -- trained model ------------------------------------------------------


@dataclass
class TrainedModel:
    """Parameters plus everything needed to run on raw text."""

    params: ModelParams
    vocab: Vocab
    enc_cfg: EncoderConfig
    train_cfg: TrainConfig
    lexicon_words: list
    syn_vocab: list
    keyword_syn_ids: dict
    d_w: int
    _trie: LexiconTrie | None = field(default=None, repr=False, compare=False)

    def trie(self) -> LexiconTrie:
        if self._trie is None:
            from .lexicon import build_trie

            self._trie = build_trie(self.lexicon_words)
        return self._trie

    def prepare(self, text: str, rules: PreprocessRules | None = None):
        """Raw text -> (ModelInput, FusionContext, extracted KeywordSet)."""
        tokens = preprocess(text, rules)
        cfg = self.train_cfg
        if cfg.enable_keywords and self.lexicon_words:
            keywords = extract_keywords(tokens, self.trie())
        else:
            keywords = None
        inp = compose_input(tokens, keywords, self.vocab, cfg.max_len, cfg.keyword_scope)
        ctx = self.fusion_context(tokens, keywords, inp)
        return inp, ctx, keywords if keywords is not None else KeywordSet([])

    def fusion_context(self, tokens, keywords, inp: ModelInput) -> FusionContext:
        """Synonym ids for every keyword-mask position of one input."""
        if not self.train_cfg.enable_synonyms or not self.keyword_syn_ids:
            return FusionContext.empty()
        composed = compose_tokens(tokens, keywords, self.train_cfg.max_len)
        entries: dict = {}
        for pos, tok in enumerate(composed.tokens):
            if inp.keyword_mask[pos] and tok in self.keyword_syn_ids:
                ids = self.keyword_syn_ids[tok]
                if len(ids):
                    entries[pos] = np.asarray(ids, dtype=np.int64)
        return FusionContext(entries)

    def predict(self, text: str, rules: PreprocessRules | None = None) -> dict:
        """Label, probabilities, and matched keywords for one raw text."""
        inp, ctx, keywords = self.prepare(text, rules)
        probs = forward([inp], [ctx], self.params, self.enc_cfg, self.train_cfg, "eval")[0]
        return {
            "label": int(np.argmax(probs)),
            "probabilities": [float(probs[0]), float(probs[1])],
            "keywords": list(keywords),
        }


@dataclass
class TrainResult:
    model: TrainedModel
    history: list


def predict_labels(model: TrainedModel, inputs, contexts, eval_batch: int = 64) -> np.ndarray:
    """Argmax class predictions for prepared inputs, in evaluation mode."""
    preds = np.zeros(len(inputs), dtype=np.int64)
    for i in range(0, len(inputs), eval_batch):
        probs = forward(
            inputs[i : i + eval_batch],
            contexts[i : i + eval_batch],
            model.params,
            model.enc_cfg,
            model.train_cfg,
            "eval",
        )
        preds[i : i + len(probs)] = probs.argmax(axis=-1)
    return preds


def _dev_metrics(model: TrainedModel, prepared) -> Metrics:
    inputs, contexts, labels = prepared
    return metrics_from_predictions(labels, predict_labels(model, inputs, contexts))


def prepare_dataset(model: TrainedModel, dataset: Dataset, rules: PreprocessRules | None = None):
    """Compose inputs and fusion contexts for every example of a dataset."""
    inputs: list = []
    contexts: list = []
    for text, label in dataset:
        inp, ctx, _ = model.prepare(text, rules)
        inp.label = int(label)
        inputs.append(inp)
        contexts.append(ctx)
    return inputs, contexts, dataset.labels()


def train(
    train_cfg: TrainConfig,
    enc_cfg: EncoderConfig,
    train_set: Dataset,
    dev_set: Dataset | None = None,
    trie: LexiconTrie | None = None,
    table: EmbeddingTable | None = None,
    rules: PreprocessRules | None = None,
) -> TrainResult:
    """Train a fresh model; vocabulary and synonym catalog come from
    ``train_set`` only.

    The history records one entry per epoch with the mean train loss and
    dev-set precision/recall/F1 (zeros when no dev set is given).
    """
    if len(train_set) == 0:
        raise ValueError("train_set must be nonempty")
    enc_cfg = resolve_encoder_config(enc_cfg, train_cfg)
    seeds = np.random.SeedSequence(train_cfg.seed).spawn(3)
    shuffle_rng = np.random.default_rng(seeds[1])
    dropout_rng = np.random.default_rng(seeds[2])

    token_lists = [preprocess(t, rules) for t in train_set.texts()]
    use_keywords = train_cfg.enable_keywords and trie is not None and len(trie) > 0
    keyword_sets = [extract_keywords(toks, trie) if use_keywords else None for toks in token_lists]

    vocab = build_vocab(token_lists, train_cfg.min_freq)

    train_keywords = sorted({kw for ks in keyword_sets if ks for kw in ks})
    syn_vocab: list = []
    keyword_syn_ids: dict = {}
    init_rows: list = []
    d_w = table.dim if table is not None else 8
    if train_cfg.enable_synonyms and table is not None and train_keywords:
        catalog = build_synonym_catalog(train_keywords, table, train_cfg.h_max)
        index: dict = {}
        for kw in train_keywords:
            ids = []
            for syn, vec in zip(catalog[kw].synonyms, catalog[kw].vectors):
                if syn not in index:
                    index[syn] = len(syn_vocab)
                    syn_vocab.append(syn)
                    init_rows.append(vec)
                ids.append(index[syn])
            if ids:
                keyword_syn_ids[kw] = ids

    params = ModelParams.initialize(
        enc_cfg,
        vocab_size=len(vocab),
        max_len=train_cfg.max_len,
        d_w=d_w,
        n_syn=len(syn_vocab),
        seed=train_cfg.seed,
        dtype=np.float32,
    )
    if init_rows:
        params.syn_emb.data = np.array(init_rows, dtype=np.float32)

    model = TrainedModel(
        params=params,
        vocab=vocab,
        enc_cfg=enc_cfg,
        train_cfg=train_cfg,
        lexicon_words=sorted(trie.words()) if use_keywords else [],
        syn_vocab=syn_vocab,
        keyword_syn_ids=keyword_syn_ids,
        d_w=d_w,
    )

    inputs: list = []
    contexts: list = []
    for toks, ks, (_, label) in zip(token_lists, keyword_sets, train_set):
        kw = ks if train_cfg.enable_keywords else None
        inp = compose_input(toks, kw, vocab, train_cfg.max_len, train_cfg.keyword_scope, int(label))
        inputs.append(inp)
        contexts.append(model.fusion_context(toks, kw, inp))

    dev_prepared = prepare_dataset(model, dev_set, rules) if dev_set is not None and len(dev_set) else None

    state = AdamState.for_params(params)
    history: list = []
    n = len(inputs)
    for epoch in range(1, train_cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        total_loss = 0.0
        for start in range(0, n, train_cfg.batch_size):
            idx = order[start : start + train_cfg.batch_size]
            batch = collate([inputs[i] for i in idx], [contexts[i] for i in idx])
            dropout = (
                Dropout(dropout_rng, enc_cfg.dropout_rate) if enc_cfg.dropout_rate > 0 else None
            )
            try:
                loss, grads = backward(batch, params, enc_cfg, train_cfg, dropout)
            except TrainingDivergedError as e:
                raise TrainingDivergedError(
                    f"{e} (epoch {epoch}, batch starting at {start})"
                ) from None
            adam_step(params, grads, state, train_cfg.learning_rate)
            total_loss += loss * len(idx)
        record = {"epoch": epoch, "train_loss": total_loss / n}
        if dev_prepared is not None:
            m = _dev_metrics(model, dev_prepared)
            record.update(dev_precision=m.precision, dev_recall=m.recall, dev_f1=m.f1)
        else:
            record.update(dev_precision=0.0, dev_recall=0.0, dev_f1=0.0)
        history.append(record)
    return TrainResult(model, history)


def save_history(history: list, path: str | Path) -> None:
    """Write per-epoch records as JSON lines."""
    with open(path, "w", encoding="utf-8") as f:
        for record in history:
            f.write(json.dumps(record, sort_keys=True) + "\n")


# -- gradient verification ----------------------------------------------


@dataclass
class GradCheckRow:
    tensor: str
    max_rel_err: float
    n_elements: int

    def ok(self, tolerance: float) -> bool:
        return self.max_rel_err <= tolerance


@dataclass
class GradCheckReport:
    rows: list
    tolerance: float
    eps_fd: float
    loss_kind: str

    @property
    def passed(self) -> bool:
        return all(r.ok(self.tolerance) for r in self.rows)

    @property
    def failures(self) -> list:
        return [r.tensor for r in self.rows if not r.ok(self.tolerance)]

    def format(self) -> str:
        lines = [f"gradient check ({self.loss_kind}, eps={self.eps_fd:g}, tol={self.tolerance:g})"]
        width = max(len(r.tensor) for r in self.rows)
        for r in self.rows:
            flag = "ok  " if r.ok(self.tolerance) else "FAIL"
            lines.append(f"  {flag} {r.tensor:<{width}} max_rel_err={r.max_rel_err:.3e} ({r.n_elements} elems)")
        lines.append("PASS" if self.passed else f"FAIL: {', '.join(self.failures)}")
        return "\n".join(lines)


def _gradcheck_fixture(d_w: int = 6, seed: int = 0):
    """A fixed micro-batch covering every model path: two segments,
    keywords in both, synonym fusion at two positions, one padded row."""
    t = 6
    ex1 = ModelInput(
        token_ids=np.array([2, 4, 5, 3, 5, 3]),  # [CLS] w kw [SEP] kw [SEP]
        segment_ids=np.array([0, 0, 0, 0, 1, 1]),
        position_ids=np.arange(t),
        attention_mask=np.ones(t, dtype=np.int64),
        keyword_mask=np.array([0, 0, 1, 0, 1, 0]),
        label=1,
    )
    ctx1 = FusionContext({2: np.array([0, 1]), 4: np.array([0, 1])})
    ex2 = ModelInput(
        token_ids=np.array([2, 6, 3, 7, 3, 0]),  # [CLS] w [SEP] kw [SEP] [PAD]
        segment_ids=np.array([0, 0, 0, 1, 1, 0]),
        position_ids=np.arange(t),
        attention_mask=np.array([1, 1, 1, 1, 1, 0]),
        keyword_mask=np.array([0, 0, 0, 1, 0, 0]),
        label=0,
    )
    ctx2 = FusionContext({3: np.array([2, 3])})
    return [ex1, ex2], [ctx1, ctx2]


def gradient_check(
    loss_kind: str = "focal",
    gamma: float = 2.0,
    tolerance: float = 1e-4,
    eps_fd: float = 1e-5,
    seed: int = 0,
    enc_cfg: EncoderConfig | None = None,
    inject_fault: str | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    Runs a tiny double-precision model (d_model=8, T=6, 2 layers, 2
    heads, 2 synonyms per fused position) and perturbs every element of
    every trainable tensor.  Parameters are drawn at a generic scale
    (std 0.4) so that attention scores are non-degenerate and every path
    carries a measurable gradient; at the training init scale the
    score-path gradients sit below finite-difference resolution and the
    relative comparison is vacuous.  ``inject_fault`` corrupts the
    analytic gradient of the named tensor so the detection path itself
    can be tested.
    """
    enc_cfg = enc_cfg or EncoderConfig(
        d_model=8, n_heads=2, n_layers=2, fusion_layer=1, dropout_rate=0.0
    )
    if enc_cfg.dropout_rate != 0.0:
        raise ValueError("gradient_check requires dropout_rate=0 for a deterministic loss")
    train_cfg = TrainConfig(
        loss_kind=loss_kind, gamma=gamma, dropout_rate=0.0, h_max=2, max_len=6, seed=seed
    )
    inputs, contexts = _gradcheck_fixture(seed=seed)
    params = ModelParams.initialize(
        enc_cfg, vocab_size=8, max_len=6, d_w=6, n_syn=4, seed=seed, dtype=np.float64,
        init_std=0.4,
    )
    batch = collate(inputs, contexts)
    _, grads = backward(batch, params, enc_cfg, train_cfg)
    if inject_fault is not None:
        if inject_fault not in grads:
            raise ValueError(f"unknown tensor {inject_fault!r} for fault injection")
        grads[inject_fault] = grads[inject_fault] + 0.5

    def loss_value() -> float:
        with ad.no_grad():
            return batch_loss(batch, params, enc_cfg, train_cfg).item()

    rows: list = []
    for name, tensor in params.named_tensors():
        analytic = grads[name]
        fd = np.zeros_like(tensor.data)
        flat = tensor.data.reshape(-1)
        fd_flat = fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps_fd
            up = loss_value()
            flat[i] = orig - eps_fd
            down = loss_value()
            flat[i] = orig
            fd_flat[i] = (up - down) / (2.0 * eps_fd)
        if analytic.size:
            # The denominator floor forgives only absolute disagreements below
            # floor * tolerance (~1e-10): finite-difference noise on tensors
            # whose true gradient is structurally zero (e.g. the key bias,
            # which softmax shift invariance makes inert) must not register.
            floor = max(1e-6, 0.01 * float(np.abs(fd).max()))
            denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), floor)
            max_rel = float((np.abs(analytic - fd) / denom).max())
        else:
            max_rel = 0.0
        rows.append(GradCheckRow(name, max_rel, analytic.size))
    return GradCheckReport(rows, tolerance, eps_fd, loss_kind)


# -- checkpoints ---------------------------------------------------------

_MAGIC = b"LEXFUSE\x00"
_VERSION = 1
_DTYPES = {4: np.float32, 8: np.float64}
_DTYPE_CODES = {np.dtype(np.float32): 4, np.dtype(np.float64): 8}


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError(f"checkpoint truncated while reading {what}")
    return data


def save_checkpoint(model: TrainedModel, path: str | Path) -> None:
    """Serialize a trained model; the round trip is bit-exact."""
    meta = {
        "encoder": asdict(model.enc_cfg),
        "train": asdict(model.train_cfg),
        "vocab": model.vocab.id_to_word,
        "lexicon": model.lexicon_words,
        "syn_vocab": model.syn_vocab,
        "keyword_syn_ids": {k: list(map(int, v)) for k, v in model.keyword_syn_ids.items()},
        "d_w": model.d_w,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    tensors = list(model.params.named_tensors())
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(tensors)))
        for name, t in tensors:
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", t.data.ndim))
            for dim in t.data.shape:
                f.write(struct.pack("<I", dim))
            f.write(struct.pack("<B", _DTYPE_CODES[t.data.dtype]))
            f.write(np.ascontiguousarray(t.data).astype(t.data.dtype, copy=False).tobytes())


def load_checkpoint(path: str | Path, expect_encoder: EncoderConfig | None = None) -> TrainedModel:
    """Restore a :class:`TrainedModel`; validates structure and shapes.

    When ``expect_encoder`` is given, every differing architecture field
    is reported (e.g. a checkpoint trained at another ``d_model``).
    """
    path = Path(path)
    with open(path, "rb") as f:
        if _read_exact(f, len(_MAGIC), "magic") != _MAGIC:
            raise CheckpointError(f"{path}: not a lexfuse checkpoint (bad magic bytes)")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != _VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        (json_len,) = struct.unpack("<I", _read_exact(f, 4, "header length"))
        try:
            meta = json.loads(_read_exact(f, json_len, "header"))
        except json.JSONDecodeError as e:
            raise CheckpointError(f"{path}: corrupt JSON header ({e})") from e
        (n_tensors,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
        tensors: dict = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "tensor name length"))
            name = _read_exact(f, name_len, "tensor name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(f, 1, f"ndim of {name}"))
            shape = tuple(
                struct.unpack("<I", _read_exact(f, 4, f"shape of {name}"))[0] for _ in range(ndim)
            )
            (code,) = struct.unpack("<B", _read_exact(f, 1, f"dtype of {name}"))
            if code not in _DTYPES:
                raise CheckpointError(f"{path}: unknown dtype code {code} for {name}")
            dtype = np.dtype(_DTYPES[code])
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            data = np.frombuffer(_read_exact(f, nbytes, f"data of {name}"), dtype=dtype)
            tensors[name] = data.reshape(shape).copy()
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last tensor")

    enc_cfg = EncoderConfig(**meta["encoder"])
    if expect_encoder is not None:
        mismatches = [
            f"{k}: checkpoint={getattr(enc_cfg, k)}, expected={getattr(expect_encoder, k)}"
            for k in ("d_model", "n_heads", "d_ff", "n_layers", "fusion_layer")
            if getattr(enc_cfg, k) != getattr(expect_encoder, k)
        ]
        if mismatches:
            raise CheckpointError(f"{path}: architecture mismatch ({'; '.join(mismatches)})")
    train_cfg = TrainConfig(**meta["train"])
    vocab = Vocab(meta["vocab"][4:])
    expected = ModelParams.initialize(
        enc_cfg,
        vocab_size=len(vocab),
        max_len=train_cfg.max_len,
        d_w=meta["d_w"],
        n_syn=len(meta["syn_vocab"]),
        seed=0,
        dtype=np.float32,
    )
    for name, t in expected.named_tensors():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name!r}")
        if tensors[name].shape != t.data.shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {tensors[name].shape}, "
                f"config implies {t.data.shape}"
            )
        t.data = tensors[name]
    extra = set(tensors) - {n for n, _ in expected.named_tensors()}
    if extra:
        raise CheckpointError(f"{path}: unexpected tensors {sorted(extra)}")
    return TrainedModel(
        params=expected,
        vocab=vocab,
        enc_cfg=enc_cfg,
        train_cfg=train_cfg,
        lexicon_words=list(meta["lexicon"]),
        syn_vocab=list(meta["syn_vocab"]),
        keyword_syn_ids={k: list(v) for k, v in meta["keyword_syn_ids"].items()},
        d_w=meta["d_w"],
    )
