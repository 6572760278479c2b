"""Initialisation, Adam, the training loop and prediction."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .errors import InputError, NumericError
from .graph import SplitBundle, normalize_adjacency, sample_context_edges, sample_context_nodes
from .metrics import MetricsReport, score_pairs
from .model import (
    ACTIVATIONS,
    DECODER_OUTPUTS,
    EncoderInput,
    ModelDims,
    ModelParams,
    aggregate,
    decode,
    encode,
    npgnn_elbo_terms,
    recon_target,
    vgae_elbo_terms,
)
from .numerics import sigmoid

log = logging.getLogger(__name__)

MODELS = ("npgnn", "vgae")


@dataclass
class TrainConfig:
    """Hyper-parameters of one training run.

    ``encoder_output_activation=None`` picks ReLU for NPGNN and the identity
    for VGAE.  ``decoder_output_activation`` is ``"sigmoid"`` (U in (0, 1))
    or ``"linear"``.  ``adam_beta2`` defaults to 0.999; set it to 0.009 to use the
    literal published value.
    """

    iterations: int = 500
    learning_rate: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    mc_samples: int = 1
    context_fraction: float = 0.10
    seed: int = 0
    encoder_output_activation: Optional[str] = None
    decoder_output_activation: str = "sigmoid"
    eval_every: int = 50
    model: str = "npgnn"
    hidden: int = 32
    latent: int = 32
    decoder_hidden: int = 64
    embedding: int = 32
    self_loop_targets: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        for name in ("iterations", "mc_samples", "eval_every", "hidden", "latent", "decoder_hidden", "embedding"):
            if int(getattr(self, name)) < 1:
                raise InputError(f"{name} must be a positive count")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise InputError("Adam betas must lie in (0, 1)")
        if self.learning_rate <= 0 or self.adam_eps <= 0:
            raise InputError("learning rate and Adam epsilon must be positive")
        if not 0 < self.context_fraction <= 1:
            raise InputError("context_fraction must lie in (0, 1]")
        if self.model not in MODELS:
            raise InputError(f"model must be one of {MODELS}")
        if self.encoder_output_activation not in (None,) + ACTIVATIONS:
            raise InputError(f"encoder_output_activation must be one of {ACTIVATIONS}")
        if self.decoder_output_activation not in DECODER_OUTPUTS:
            raise InputError(f"decoder_output_activation must be one of {DECODER_OUTPUTS}")
        if self.dtype not in ("float64", "float32"):
            raise InputError("dtype must be float64 or float32")

    @property
    def activation(self) -> str:
        if self.encoder_output_activation is not None:
            return self.encoder_output_activation
        return "relu" if self.model == "npgnn" else "linear"

    @property
    def dims(self) -> ModelDims:
        return ModelDims(self.hidden, self.latent, self.decoder_hidden, self.embedding)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def glorot_init(rows: int, cols: int, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """Uniform on [-a, a] with a = sqrt(6 / (rows + cols))."""
    if rows < 1 or cols < 1:
        raise InputError("glorot_init needs positive dimensions")
    a = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-a, a, size=(rows, cols)).astype(dtype, copy=False)


def init_params(
    kind: str,
    num_features: int,
    dims: ModelDims,
    rng: np.random.Generator,
    activation: str = "relu",
    dtype=np.float64,
    decoder_output: str = "sigmoid",
) -> ModelParams:
    f, h1, d = num_features, dims.hidden, dims.latent
    blocks = {
        "W1": glorot_init(f, h1, rng, dtype),
        "W_mu": glorot_init(h1, d, rng, dtype),
        "W_sigma": glorot_init(h1, d, rng, dtype),
    }
    if kind == "npgnn":
        blocks["W2"] = glorot_init(f + d, dims.decoder_hidden, rng, dtype)
        blocks["b1"] = np.zeros((1, dims.decoder_hidden), dtype=dtype)
        blocks["W3"] = glorot_init(dims.decoder_hidden, dims.embedding, rng, dtype)
        blocks["b2"] = np.zeros((1, dims.embedding), dtype=dtype)
    return ModelParams(kind, blocks, activation, decoder_output)


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_step(
    params: dict,
    grads: dict,
    state: AdamState,
    lr: float = 0.01,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict, AdamState]:
    """One bias-corrected Adam descent step; returns new params and state."""
    bad = {k: int(np.sum(~np.isfinite(g))) for k, g in grads.items() if not np.all(np.isfinite(g))}
    if bad:
        raise NumericError(f"non-finite gradient entries at step {state.t + 1}: {bad}")
    t = state.t + 1
    new_params, m_new, v_new = {}, {}, {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=p.dtype)
        if g.shape != p.shape:
            raise InputError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
        m = beta1 * state.m[k] + (1 - beta1) * g
        v = beta2 * state.v[k] + (1 - beta2) * (g * g)
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        new_params[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        m_new[k], v_new[k] = m, v
    return new_params, AdamState(m_new, v_new, t)


class TrainingDiverged(NumericError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


def _encoder_features(x: np.ndarray):
    """Use CSR for the encoder when features are mostly zeros (bag-of-words)."""
    if x.size and np.count_nonzero(x) < 0.2 * x.size:
        return sp.csr_matrix(x)
    return x


@dataclass
class _Prepared:
    full: EncoderInput
    x_train: np.ndarray
    x_enc: object
    target: object


def _prepare(split: SplitBundle, config: TrainConfig) -> _Prepared:
    tg = split.train_graph
    dtype = np.dtype(config.dtype)
    x = tg.features.astype(dtype)
    x_enc = _encoder_features(x)
    a_bar = normalize_adjacency(tg.edges, tg.num_nodes).astype(dtype)
    target = recon_target(tg.edges, tg.num_nodes, self_loops=config.self_loop_targets, dtype=dtype)
    return _Prepared(EncoderInput(a_bar, x_enc), x, x_enc, target)


def _context(split: SplitBundle, prep: _Prepared, fraction: float, rng) -> EncoderInput:
    tg = split.train_graph
    dtype = prep.x_train.dtype
    if split.task == "transductive":
        edges = sample_context_edges(tg.edges, fraction, rng)
        return EncoderInput(normalize_adjacency(edges, tg.num_nodes).astype(dtype), prep.x_enc)
    sub = sample_context_nodes(tg, fraction, rng)
    x = prep.x_enc[sub.node_ids]
    return EncoderInput(normalize_adjacency(sub.induced_edges, sub.num_nodes).astype(dtype), x)


def embed(params: ModelParams, split: SplitBundle) -> np.ndarray:
    """Deterministic node embeddings for every node of the full graph.

    NPGNN conditions on the training graph (z = posterior mean) and decodes
    the features of all nodes.  VGAE encodes the training edges placed in the
    full node set, so held-out nodes enter as isolated nodes with features.
    """
    g = split.full_graph
    dtype = params.blocks["W1"].dtype
    if params.kind == "npgnn":
        tg = split.train_graph
        x_t = _encoder_features(tg.features.astype(dtype))
        a_t = normalize_adjacency(tg.edges, tg.num_nodes).astype(dtype)
        lg = aggregate(encode(a_t, x_t, params.blocks, params.activation))
        return decode(g.features.astype(dtype), lg.mu_z, params.blocks, params.decoder_output).U.value
    a_full = normalize_adjacency(split.train_edges_full, g.num_nodes).astype(dtype)
    stats = encode(a_full, _encoder_features(g.features.astype(dtype)), params.blocks, params.activation)
    return stats.mu.value


def pair_scores(embeddings: np.ndarray, pairs) -> np.ndarray:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    n = embeddings.shape[0]
    if len(pairs) and (pairs.min() < 0 or pairs.max() >= n):
        raise InputError("pair index out of range")
    logits = np.einsum("ij,ij->i", embeddings[pairs[:, 0]], embeddings[pairs[:, 1]])
    return sigmoid(logits.reshape(1, -1)).ravel()


def predict_scores(params: ModelParams, split: SplitBundle, pairs) -> np.ndarray:
    """Edge probabilities sigma(u_i . u_j) for full-graph index pairs."""
    return pair_scores(embed(params, split), pairs)


def evaluate(params: ModelParams, split: SplitBundle, which: str = "test", embeddings=None):
    pos, neg = (split.test_pos, split.test_neg) if which == "test" else (split.val_pos, split.val_neg)
    if len(pos) == 0 or len(neg) == 0:
        return None, None
    emb = embed(params, split) if embeddings is None else embeddings
    return score_pairs(pair_scores(emb, pos), pair_scores(emb, neg))


def train(
    split: SplitBundle,
    config: TrainConfig,
    on_eval: Optional[Callable[[dict], None]] = None,
) -> tuple[ModelParams, MetricsReport]:
    """Run the NPGNN (or VGAE) optimisation loop and score the test pairs.

    Each iteration draws a fresh context (edges for the transductive task,
    nodes otherwise), evaluates the ELBO on a new tape, and takes one Adam
    step on its negative.  ``on_eval`` receives one record per evaluation
    point.  Final-iteration parameters are returned; there is no early
    stopping.
    """
    rng = np.random.default_rng(config.seed)
    prep = _prepare(split, config)
    dtype = np.dtype(config.dtype)
    tg = split.train_graph
    if tg.num_edges == 0:
        raise InputError("training graph has no edges")
    params = init_params(
        config.model, tg.num_features, config.dims, rng, config.activation, dtype, config.decoder_output_activation
    )
    values = dict(params.blocks)
    state = AdamState.zeros_like(values)
    history: list[dict] = []

    for it in range(config.iterations):
        tape = ad.Tape()
        p = {k: tape.param(k, v) for k, v in values.items()}
        if config.model == "npgnn":
            ctx = _context(split, prep, config.context_fraction, rng)
            eps = rng.standard_normal((config.mc_samples, config.latent)).astype(dtype)
            terms = npgnn_elbo_terms(
                prep.full, ctx, prep.x_train, prep.target, p, eps, config.activation, config.decoder_output_activation
            )
        else:
            eps = rng.standard_normal((tg.num_nodes, config.latent)).astype(dtype)
            terms = vgae_elbo_terms(prep.full, prep.target, p, eps, config.activation)
        record = {"iteration": it, **terms.values()}
        if not np.isfinite(record["elbo"]):
            history.append(record)
            raise TrainingDiverged(f"non-finite ELBO at iteration {it}", history)
        grads = ad.backward(ad.scale(terms.elbo, -1.0))
        try:
            values, state = adam_step(
                values, grads, state, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps
            )
        except NumericError as exc:
            history.append(record)
            raise TrainingDiverged(str(exc), history) from exc

        if (it + 1) % config.eval_every == 0 or it + 1 == config.iterations:
            current = ModelParams(config.model, values, config.activation, config.decoder_output_activation)
            val_auc, val_ap = evaluate(current, split, "val")
            record.update(val_auc=val_auc, val_ap=val_ap)
            log.debug("iter %d elbo %.5f val_auc %s", it, record["elbo"], val_auc)
            if on_eval is not None:
                on_eval(dict(record))
        history.append(record)

    final = ModelParams(config.model, values, config.activation, config.decoder_output_activation)
    auc, ap = evaluate(final, split, "test")
    report = MetricsReport(
        seeds=[config.seed],
        auc=[auc] if auc is not None else [],
        ap=[ap] if ap is not None else [],
        history=[history],
    )
    return final, report


TOY_EDGES = ((0, 1), (0, 2), (1, 2), (2, 3), (3, 4), (4, 5), (4, 6), (5, 6))
TOY_CONTEXT_NODES = (0, 2, 3, 5, 6)


def toy_gradcheck(
    model: str = "npgnn",
    seed: int = 0,
    h: float = 1e-6,
    tol: float = 1e-5,
    activation: Optional[str] = None,
    decoder_output: str = "sigmoid",
    mc_samples: int = 2,
) -> ad.GradCheckReport:
    """Finite-difference check of the negative ELBO on a built-in 7-node graph.

    Features, parameters and the noise sample are all drawn from ``seed``,
    so the report is reproducible.  Runs in float64 with small dimensions.
    """
    from .graph import induce_subgraph, Graph

    if model not in MODELS:
        raise InputError(f"model must be one of {MODELS}")
    rng = np.random.default_rng(seed)
    n, f = 7, 3
    dims = ModelDims(4, 3, 5, 4)
    act = activation or ("relu" if model == "npgnn" else "linear")
    g = Graph(n, rng.uniform(0.0, 1.0, size=(n, f)), np.array(TOY_EDGES))
    params = init_params(model, f, dims, rng, act, np.float64, decoder_output)
    full = EncoderInput.from_graph(g)
    target = recon_target(g.edges, n)
    if model == "npgnn":
        sub = induce_subgraph(g, TOY_CONTEXT_NODES)
        ctx = EncoderInput.from_edges(sub.induced_edges, sub.num_nodes, sub.features)
        eps = rng.standard_normal((mc_samples, dims.latent))

        def loss(tape, p):
            terms = npgnn_elbo_terms(full, ctx, g.features, target, p, eps, act, decoder_output)
            return ad.scale(terms.elbo, -1.0)

    else:
        eps = rng.standard_normal((n, dims.latent))

        def loss(tape, p):
            return ad.scale(vgae_elbo_terms(full, target, p, eps, act).elbo, -1.0)

    return ad.gradient_check(loss, params.blocks, h=h, tol=tol)
