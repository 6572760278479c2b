"""Dataset loading, synthetic graphs, and JSON persistence of configs/results.

Citation-network text format (whitespace- or tab-separated)::

    <node_id>  <f_1> ... <f_k> <class_label>      # one line per node, .content
    <cited_id> <citing_id>                        # one line per citation, .cites

Citations are treated as undirected links.  Reciprocal and repeated
citations collapse into one edge, self-citations are dropped, and citations
naming an id missing from the content file are dropped and counted.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import FormatError, InputError, ParseError, SchemaError
from .graph import Graph
from .metrics import standard_error
from .training import TrainConfig

SCHEMA_VERSION = 1
DATA_DIR_ENV = "NPGNN_DATA_DIR"


@dataclass(frozen=True)
class LoadAudit:
    raw_citations: int
    self_citations: int
    unresolved: int
    duplicates: int
    edges: int

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True, eq=False)
class ContentCitesDataset:
    content_path: Path
    cites_path: Path
    graph: Graph
    id_to_index: dict
    labels: tuple
    audit: LoadAudit


def _read_content(path: Path, normalize_features: bool):
    ids, rows, labels = [], [], []
    width = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) < 2:
                raise ParseError("content line needs an id and a label", path, lineno)
            try:
                feats = [float(t) for t in tokens[1:-1]]
            except ValueError as exc:
                raise ParseError(f"non-numeric feature value ({exc})", path, lineno) from None
            if width is None:
                width = len(feats)
            elif len(feats) != width:
                raise FormatError(f"{path}:{lineno}: expected {width} features, found {len(feats)}")
            ids.append(tokens[0])
            rows.append(feats)
            labels.append(tokens[-1])
    if len(set(ids)) != len(ids):
        raise FormatError(f"{path}: duplicate node ids in content file")
    x = np.asarray(rows, dtype=np.float64).reshape(len(ids), width or 0)
    if normalize_features:
        s = x.sum(axis=1, keepdims=True)
        x = np.divide(x, s, out=np.zeros_like(x), where=s != 0)
    return ids, x, labels


def read_content_cites(content_path, cites_path, normalize_features: bool = False) -> ContentCitesDataset:
    content_path, cites_path = Path(content_path), Path(cites_path)
    ids, x, labels = _read_content(content_path, normalize_features)
    index = {nid: i for i, nid in enumerate(ids)}
    raw = self_loops = unresolved = 0
    pairs = set()
    with open(cites_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) != 2:
                raise ParseError("cites line needs exactly two ids", cites_path, lineno)
            raw += 1
            a, b = index.get(tokens[0]), index.get(tokens[1])
            if a is None or b is None:
                unresolved += 1
                continue
            if a == b:
                self_loops += 1
                continue
            pairs.add((a, b) if a < b else (b, a))
    edges = np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)
    audit = LoadAudit(raw, self_loops, unresolved, raw - self_loops - unresolved - len(edges), len(edges))
    g = Graph(len(ids), x, edges, tuple(ids))
    return ContentCitesDataset(content_path, cites_path, g, index, tuple(labels), audit)


def load_content_cites(content_path, cites_path, normalize_features: bool = False) -> Graph:
    return read_content_cites(content_path, cites_path, normalize_features).graph


def write_content_cites(g: Graph, content_path, cites_path, labels=None) -> None:
    """Write ``g`` in the content/cites text format (ids default to indices)."""
    ids = g.node_ids if g.node_ids is not None else tuple(str(i) for i in range(g.num_nodes))
    labels = labels if labels is not None else ["0"] * g.num_nodes
    with open(content_path, "w", encoding="utf-8") as fh:
        for i in range(g.num_nodes):
            feats = "\t".join(repr(float(v)) if v != int(v) else str(int(v)) for v in g.features[i])
            fh.write(f"{ids[i]}\t{feats}\t{labels[i]}\n")
    with open(cites_path, "w", encoding="utf-8") as fh:
        for i, j in g.edges:
            fh.write(f"{ids[i]}\t{ids[j]}\n")


def find_dataset(name: str, data_dir=None) -> tuple[Path, Path]:
    """Locate ``<name>.content`` / ``<name>.cites`` in ``data_dir`` or ``data_dir/<name>``.

    ``data_dir`` defaults to ``$NPGNN_DATA_DIR`` and then ``./data``.
    """
    base = Path(data_dir or os.environ.get(DATA_DIR_ENV) or "data")
    for d in (base, base / name):
        content, cites = d / f"{name}.content", d / f"{name}.cites"
        if content.is_file() and cites.is_file():
            return content, cites
    raise FileNotFoundError(f"no {name}.content/{name}.cites under {base} (set {DATA_DIR_ENV})")


def sbm_blocks(n: int, num_blocks: int) -> np.ndarray:
    """Contiguous, near-equal block assignment used by :func:`generate_sbm`."""
    return (np.arange(n) * num_blocks) // max(n, 1)


def generate_sbm(
    n: int,
    num_blocks: int,
    p_in: float,
    p_out: float,
    feature_dim: int,
    rng: np.random.Generator,
    noise: float = 0.1,
) -> Graph:
    """Stochastic block model graph.

    Node ``i`` belongs to block ``sbm_blocks(n, num_blocks)[i]``.  Features
    are the block one-hot (first ``num_blocks`` columns) plus i.i.d.
    Uniform[0, noise) noise on every entry.
    """
    if not (0 <= p_in <= 1 and 0 <= p_out <= 1):
        raise InputError("edge probabilities must lie in [0, 1]")
    if num_blocks < 1 or feature_dim < num_blocks:
        raise InputError("need at least one block and feature_dim >= num_blocks")
    blocks = sbm_blocks(n, num_blocks)
    iu, ju = np.triu_indices(n, k=1)
    p = np.where(blocks[iu] == blocks[ju], p_in, p_out)
    keep = rng.random(len(iu)) < p
    edges = np.stack([iu[keep], ju[keep]], axis=1)
    x = rng.uniform(0.0, noise, size=(n, feature_dim)) if noise > 0 else np.zeros((n, feature_dim))
    x[np.arange(n), blocks] += 1.0
    return Graph(n, x, edges)


SBM_FIXTURE = {"n": 30, "num_blocks": 2, "p_in": 0.5, "p_out": 0.02, "feature_dim": 8}


def sbm_fixture(seed: int = 0) -> Graph:
    """The small two-block graph used for the end-to-end smoke check."""
    return generate_sbm(rng=np.random.default_rng(seed), **SBM_FIXTURE)


# --------------------------------------------------------------------------
# configs and results


def config_to_json(config: TrainConfig) -> dict:
    return {"schema_version": SCHEMA_VERSION, **config.to_dict()}


def config_from_json(doc: dict) -> TrainConfig:
    """Build a config from a JSON object; absent keys take their defaults."""
    doc = dict(doc)
    version = doc.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise SchemaError(f"config schema version {version} is not supported (expected {SCHEMA_VERSION})")
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise SchemaError(f"unknown config keys: {unknown}")
    return TrainConfig(**doc)


def read_config(path) -> TrainConfig:
    return config_from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def write_config(config: TrainConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_json(config), indent=2), encoding="utf-8")


@dataclass
class SeedResult:
    seed: int
    status: str = "ok"
    auc: Optional[float] = None
    ap: Optional[float] = None
    seconds: float = 0.0
    error: Optional[str] = None


@dataclass
class ExperimentResult:
    """Per-seed outcomes of one (dataset, task, model) experiment plus aggregates."""

    dataset: str
    task: str
    model: str
    config: dict
    runs: list = field(default_factory=list)
    settings: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def ok_runs(self) -> list:
        return [r for r in self.runs if r.status == "ok" and r.auc is not None]

    @property
    def aggregate(self) -> dict:
        ok = self.ok_runs()
        aucs, aps = [r.auc for r in ok], [r.ap for r in ok]
        nan = float("nan")
        return {
            "runs": len(ok),
            "failed": len(self.runs) - len(ok),
            "auc_mean": float(np.mean(aucs)) if aucs else nan,
            "auc_se": standard_error(aucs),
            "ap_mean": float(np.mean(aps)) if aps else nan,
            "ap_se": standard_error(aps),
        }

    def to_json(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "dataset": self.dataset,
            "task": self.task,
            "model": self.model,
            "config": self.config,
            "settings": self.settings,
            "seeds": [r.seed for r in self.runs],
            "runs": [dataclasses.asdict(r) for r in self.runs],
            "aggregate": self.aggregate,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ExperimentResult":
        version = doc.get("schema_version")
        if version != SCHEMA_VERSION:
            raise SchemaError(f"result schema version {version!r} is not supported")
        return cls(
            dataset=doc["dataset"],
            task=doc["task"],
            model=doc["model"],
            config=doc["config"],
            runs=[SeedResult(**r) for r in doc["runs"]],
            settings=doc.get("settings", {}),
            schema_version=version,
        )


def write_result(result: ExperimentResult, path) -> None:
    Path(path).write_text(json.dumps(result.to_json(), indent=2), encoding="utf-8")


def read_result(path) -> ExperimentResult:
    return ExperimentResult.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def write_history(records, path) -> None:
    """Line-oriented JSON, one object per evaluation point."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_history(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
