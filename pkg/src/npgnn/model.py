"""NPGNN: GCN encoder, mean aggregator, MLP + inner-product decoder, ELBO.

Also the VGAE baseline, which reuses the encoder and the likelihood with a
per-node latent, a standard-normal prior and a plain inner-product decoder.

Model functions take parameters as a mapping of name -> :class:`Var` (or
plain arrays, which are treated as constants) so the same code serves
training on a tape and plain forward evaluation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from . import numerics as nx
from .autodiff import Var
from .errors import InputError, NumericError, SchemaError, ShapeError
from .graph import Graph, SubgraphRef, adjacency_matrix, normalize_adjacency

NPGNN_BLOCKS = ("W1", "W_mu", "W_sigma", "W2", "b1", "W3", "b2")
VGAE_BLOCKS = ("W1", "W_mu", "W_sigma")
ACTIVATIONS = ("relu", "linear")
DECODER_OUTPUTS = ("sigmoid", "linear")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelDims:
    """Layer widths: encoder hidden, latent, decoder hidden, embedding."""

    hidden: int = 32
    latent: int = 32
    decoder_hidden: int = 64
    embedding: int = 32


@dataclass
class ModelParams:
    """All trainable blocks of one model plus the settings needed to run it."""

    kind: str
    blocks: dict
    activation: str = "relu"
    decoder_output: str = "sigmoid"

    def __post_init__(self):
        names = NPGNN_BLOCKS if self.kind == "npgnn" else VGAE_BLOCKS
        if self.kind not in ("npgnn", "vgae"):
            raise InputError(f"unknown model kind {self.kind!r}")
        missing = [k for k in names if k not in self.blocks]
        if missing:
            raise InputError(f"missing parameter blocks: {missing}")
        if self.activation not in ACTIVATIONS:
            raise InputError(f"encoder output activation must be one of {ACTIVATIONS}")
        if self.decoder_output not in DECODER_OUTPUTS:
            raise InputError(f"decoder output must be one of {DECODER_OUTPUTS}")
        self.blocks = {k: nx.as_dense(self.blocks[k]) for k in names}
        w1, wmu, wsig = self.blocks["W1"], self.blocks["W_mu"], self.blocks["W_sigma"]
        if wmu.shape[0] != w1.shape[1] or wsig.shape != wmu.shape:
            raise ShapeError("encoder blocks have inconsistent shapes")
        if self.kind == "npgnn":
            f, d = w1.shape[0], wmu.shape[1]
            w2, b1, w3, b2 = (self.blocks[k] for k in ("W2", "b1", "W3", "b2"))
            if w2.shape[0] != f + d or b1.shape != (1, w2.shape[1]) or w3.shape[0] != w2.shape[1] or b2.shape != (1, w3.shape[1]):
                raise ShapeError("decoder blocks have inconsistent shapes")

    @property
    def num_features(self) -> int:
        return self.blocks["W1"].shape[0]

    @property
    def latent_dim(self) -> int:
        return self.blocks["W_mu"].shape[1]

    @property
    def shapes(self) -> dict:
        return {k: tuple(v.shape) for k, v in self.blocks.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.kind, {k: v.copy() for k, v in self.blocks.items()}, self.activation, self.decoder_output
        )

    def on_tape(self, tape: ad.Tape) -> dict:
        return {k: tape.param(k, v) for k, v in self.blocks.items()}


@dataclass
class NodeGaussianStats:
    """Per-node mean and log standard deviation, each m x d."""

    mu: Var
    log_sigma: Var


@dataclass
class LatentGaussian:
    """Diagonal Gaussian over the global latent, each 1 x d."""

    mu_z: Var
    log_sigma_z: Var

    def __post_init__(self):
        self.mu_z, self.log_sigma_z = ad.const(self.mu_z), ad.const(self.log_sigma_z)
        if self.mu_z.shape != self.log_sigma_z.shape:
            raise ShapeError("mean and log-scale shapes differ")


@dataclass
class DecoderOutput:
    """Node embeddings U (n x d_u); edge logits are inner products of rows."""

    U: Var

    def logits(self) -> Var:
        return ad.matmul(self.U, ad.transpose(self.U))

    def logit(self, i: int, j: int) -> float:
        u = self.U.value
        n = u.shape[0]
        if not (0 <= i < n and 0 <= j < n):
            raise InputError(f"node index out of range for {n} nodes")
        return float(u[i] @ u[j])

    def pair_logits(self, pairs) -> np.ndarray:
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        u = self.U.value
        if len(pairs) and (pairs.min() < 0 or pairs.max() >= u.shape[0]):
            raise InputError("pair index out of range")
        return np.einsum("ij,ij->i", u[pairs[:, 0]], u[pairs[:, 1]])


def _output_act(v: Var, activation: str) -> Var:
    if activation == "relu":
        return ad.relu(v)
    if activation == "linear":
        return v
    raise InputError(f"unknown encoder output activation {activation!r}")


def _as_operand(x):
    return x if sp.issparse(x) else ad.const(x)


def encode(a_bar, x, params: Mapping, activation: str = "relu") -> NodeGaussianStats:
    """Two-layer GCN encoder with a shared first layer.

    ``mu = act(A relu(A X W1) W_mu)`` and likewise for ``log_sigma`` with
    ``W_sigma``; ``act`` is ReLU (default) or the identity.
    """
    if not sp.issparse(a_bar):
        a_bar = nx.as_csr(a_bar)
    x = _as_operand(x)
    if a_bar.shape[0] != a_bar.shape[1] or a_bar.shape[1] != x.shape[0]:
        raise ShapeError(f"adjacency {a_bar.shape} does not match features {x.shape}")
    xw = ad.matmul(x, params["W1"])
    hidden = ad.relu(ad.sparse_matmul(a_bar, xw))
    mu = _output_act(ad.sparse_matmul(a_bar, ad.matmul(hidden, params["W_mu"])), activation)
    log_sigma = _output_act(ad.sparse_matmul(a_bar, ad.matmul(hidden, params["W_sigma"])), activation)
    return NodeGaussianStats(mu, log_sigma)


def aggregate(stats: NodeGaussianStats) -> LatentGaussian:
    """Average the per-node statistics into one global Gaussian."""
    if stats.mu.shape[0] == 0:
        raise InputError("cannot aggregate an empty context")
    return LatentGaussian(ad.mean_rows(stats.mu), ad.mean_rows(stats.log_sigma))


def sample_latent(lg: LatentGaussian, epsilon) -> Var:
    """Reparameterised draw ``mu_z + exp(log_sigma_z) * epsilon``."""
    eps = ad.const(np.asarray(epsilon, dtype=lg.mu_z.value.dtype).reshape(lg.mu_z.shape))
    return ad.add(lg.mu_z, ad.mul(ad.exp(lg.log_sigma_z), eps))


def decode(x_full, z, params: Mapping, output: str = "sigmoid") -> DecoderOutput:
    """Two-layer MLP over ``[x_i, z]`` for every node.

    The hidden layer is always sigmoid.  ``output="sigmoid"`` keeps U in
    (0, 1), so every logit is non-negative and no pair scores below 0.5;
    ``output="linear"`` drops the final squashing.
    """
    if output not in DECODER_OUTPUTS:
        raise InputError(f"decoder output must be one of {DECODER_OUTPUTS}")
    x = ad.const(nx.densify(x_full) if sp.issparse(x_full) else x_full)
    xz = ad.concat_broadcast_row(x, z)
    h = ad.sigmoid(ad.add_row_bias(ad.matmul(xz, params["W2"]), params["b1"]))
    u = ad.add_row_bias(ad.matmul(h, params["W3"]), params["b2"])
    return DecoderOutput(ad.sigmoid(u) if output == "sigmoid" else u)


def edge_probability(dec: DecoderOutput, i: int, j: int) -> float:
    return float(nx.sigmoid(np.array([[dec.logit(i, j)]]))[0, 0])


@dataclass(frozen=True)
class ReconTarget:
    """Dense reconstruction target and the class-balance constants."""

    adjacency: np.ndarray
    pos_weight: float
    norm: float

    @property
    def num_nodes(self) -> int:
        return self.adjacency.shape[0]


def recon_target(edges, n: int, self_loops: bool = True, dtype=np.float64) -> ReconTarget:
    """Target matrix for the training graph with VGAE-style reweighting.

    ``pos_weight = (n^2 - 2E) / 2E`` and ``norm = n^2 / (2 (n^2 - 2E))`` are
    computed from the edge count alone; the diagonal is a positive target
    when ``self_loops`` is set.
    """
    e = len(np.asarray(edges).reshape(-1, 2))
    if n == 0:
        raise InputError("empty training graph")
    a = adjacency_matrix(edges, n, self_loops=self_loops).toarray().astype(dtype)
    nn_ = float(n) * n
    if e == 0:
        pos_weight, norm = 1.0, 0.5
    else:
        pos_weight = (nn_ - 2 * e) / (2 * e)
        norm = nn_ / (2 * (nn_ - 2 * e))
    return ReconTarget(a, pos_weight, norm)


def recon_loglik(dec_or_logits: Union[DecoderOutput, Var], target: ReconTarget) -> Var:
    """``norm / n^2 * sum_ij [w A_ij log p_ij + (1 - A_ij) log(1 - p_ij)]``."""
    logits = dec_or_logits.logits() if isinstance(dec_or_logits, DecoderOutput) else ad.const(dec_or_logits)
    if target.pos_weight <= 0:
        raise InputError("pos_weight must be positive")
    if not np.all(np.isfinite(logits.value)):
        raise NumericError("non-finite edge logits")
    n = logits.shape[0]
    ll = ad.weighted_bce_with_logits(logits, target.adjacency, target.pos_weight)
    return ad.scale(ll, target.norm / (float(n) * n))


def kl_diag_gaussian(q: LatentGaussian, p: LatentGaussian) -> Var:
    """KL(q || p) for diagonal Gaussians parameterised by mean and log-scale."""
    if q.mu_z.shape != p.mu_z.shape:
        raise ShapeError(f"latent shapes differ: {q.mu_z.shape} vs {p.mu_z.shape}")
    var_q = ad.exp(ad.scale(q.log_sigma_z, 2.0))
    diff = ad.sub(q.mu_z, p.mu_z)
    inv_var_p = ad.exp(ad.scale(p.log_sigma_z, -2.0))
    quad = ad.scale(ad.mul(ad.add(var_q, ad.mul(diff, diff)), inv_var_p), 0.5)
    total = ad.sum_all(ad.add(ad.sub(p.log_sigma_z, q.log_sigma_z), quad))
    d = q.mu_z.value.size
    return ad.sub(total, np.array([[0.5 * d]]))


@dataclass(frozen=True)
class EncoderInput:
    """Normalised adjacency and features fed to the encoder."""

    a_bar: sp.csr_matrix
    x: object

    @classmethod
    def from_edges(cls, edges, n: int, x) -> "EncoderInput":
        return cls(normalize_adjacency(edges, n), x)

    @classmethod
    def from_graph(cls, g: Graph) -> "EncoderInput":
        return cls.from_edges(g.edges, g.num_nodes, g.features)


@dataclass
class ElboTerms:
    elbo: Var
    recon: Var
    kl: Var
    epsilon: np.ndarray
    posterior: Optional[LatentGaussian] = None
    prior: Optional[LatentGaussian] = None

    def values(self) -> dict:
        return {"elbo": self.elbo.item(), "recon": self.recon.item(), "kl": self.kl.item()}


def npgnn_elbo_terms(
    full: EncoderInput,
    context: EncoderInput,
    x_decode,
    target: ReconTarget,
    params: Mapping,
    epsilon: np.ndarray,
    activation: str = "relu",
    decoder_output: str = "sigmoid",
) -> ElboTerms:
    """Monte Carlo ELBO with one row of ``epsilon`` per sample.

    Samples come from the full-graph posterior; the context posterior plays
    the prior in the KL term.
    """
    eps = np.atleast_2d(np.asarray(epsilon))
    if eps.shape[0] < 1:
        raise InputError("need at least one Monte Carlo sample")
    q_full = aggregate(encode(full.a_bar, full.x, params, activation))
    q_ctx = aggregate(encode(context.a_bar, context.x, params, activation))
    recon = None
    for row in eps:
        z = sample_latent(q_full, row)
        r = recon_loglik(decode(x_decode, z, params, decoder_output), target)
        recon = r if recon is None else ad.add(recon, r)
    recon = ad.scale(recon, 1.0 / eps.shape[0])
    kl = kl_diag_gaussian(q_full, q_ctx)
    return ElboTerms(ad.sub(recon, kl), recon, kl, eps, q_full, q_ctx)


def elbo(
    g: Graph,
    context: Union[SubgraphRef, np.ndarray],
    params: Mapping,
    L: int = 1,
    rng: Optional[np.random.Generator] = None,
    epsilon: Optional[np.ndarray] = None,
    activation: str = "relu",
    self_loops: bool = True,
    decoder_output: str = "sigmoid",
) -> ElboTerms:
    """ELBO of ``g`` given a context.

    ``context`` is either a :class:`SubgraphRef` (node context: its own
    features and induced edges) or an edge array (edge context over all nodes
    of ``g`` with all features).  Noise is drawn from ``rng`` unless
    ``epsilon`` (L x d) is supplied; the draw is returned for replay.
    """
    if L < 1:
        raise InputError("L must be at least 1")
    d = params["W_mu"].shape[1]
    if epsilon is None:
        rng = rng if rng is not None else np.random.default_rng()
        epsilon = rng.standard_normal((L, d))
    full = EncoderInput.from_graph(g)
    if isinstance(context, SubgraphRef):
        ctx = EncoderInput.from_edges(context.induced_edges, context.num_nodes, context.features)
    else:
        ctx = EncoderInput.from_edges(context, g.num_nodes, g.features)
    target = recon_target(g.edges, g.num_nodes, self_loops=self_loops)
    return npgnn_elbo_terms(full, ctx, g.features, target, params, epsilon, activation, decoder_output)


# --------------------------------------------------------------------------
# VGAE baseline


def vgae_encode(a_bar, x, params: Mapping, activation: str = "linear") -> NodeGaussianStats:
    return encode(a_bar, x, params, activation)


def vgae_elbo_terms(
    inputs: EncoderInput,
    target: ReconTarget,
    params: Mapping,
    epsilon: np.ndarray,
    activation: str = "linear",
) -> ElboTerms:
    """Per-node reparameterised latents, inner-product decoder, N(0, I) prior.

    The KL sum over nodes is divided by ``n^2`` to put it on the same
    per-entry scale as the reconstruction term.
    """
    stats = vgae_encode(inputs.a_bar, inputs.x, params, activation)
    eps = np.asarray(epsilon).reshape(stats.mu.shape)
    z = ad.add(stats.mu, ad.mul(ad.exp(stats.log_sigma), eps))
    recon = recon_loglik(DecoderOutput(z), target)
    n = stats.mu.shape[0]
    var = ad.exp(ad.scale(stats.log_sigma, 2.0))
    inner = ad.sub(ad.add(var, ad.mul(stats.mu, stats.mu)), ad.scale(stats.log_sigma, 2.0))
    kl_sum = ad.scale(ad.sub(ad.sum_all(inner), np.array([[float(stats.mu.value.size)]])), 0.5)
    kl = ad.scale(kl_sum, 1.0 / (float(n) * n))
    return ElboTerms(ad.sub(recon, kl), recon, kl, eps)


def vgae_elbo(
    g: Graph,
    params: Mapping,
    rng: Optional[np.random.Generator] = None,
    epsilon: Optional[np.ndarray] = None,
    activation: str = "linear",
    self_loops: bool = True,
) -> ElboTerms:
    d = params["W_mu"].shape[1]
    if epsilon is None:
        rng = rng if rng is not None else np.random.default_rng()
        epsilon = rng.standard_normal((g.num_nodes, d))
    target = recon_target(g.edges, g.num_nodes, self_loops=self_loops)
    return vgae_elbo_terms(EncoderInput.from_graph(g), target, params, epsilon, activation)


def vgae_decode(z) -> DecoderOutput:
    return DecoderOutput(ad.const(z))


# --------------------------------------------------------------------------
# checkpoints


def save_params(path, params: ModelParams, config: Optional[dict] = None) -> None:
    """JSON checkpoint: shapes and row-major values per block plus a config echo."""
    doc = {
        "schema": "npgnn-checkpoint",
        "version": CHECKPOINT_VERSION,
        "kind": params.kind,
        "activation": params.activation,
        "decoder_output": params.decoder_output,
        "blocks": {
            k: {"shape": list(v.shape), "values": v.ravel().tolist()} for k, v in params.blocks.items()
        },
        "config": config or {},
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_params(path) -> tuple[ModelParams, dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("schema") != "npgnn-checkpoint" or doc.get("version") != CHECKPOINT_VERSION:
        raise SchemaError(
            f"unsupported checkpoint schema {doc.get('schema')!r} version {doc.get('version')!r}"
        )
    blocks = {
        k: np.asarray(b["values"], dtype=np.float64).reshape(b["shape"]) for k, b in doc["blocks"].items()
    }
    params = ModelParams(doc["kind"], blocks, doc.get("activation", "relu"), doc.get("decoder_output", "sigmoid"))
    return params, doc.get("config", {})
