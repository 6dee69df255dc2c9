"""Prepared-dataset artifact: everything training needs in one binary file.

Ingestion (documents, edge list, feature matrix, LLM cache) happens
once; the artifact stores the graph's CSR arrays, labels, years, class
names and the four embedding matrices. Serialization is canonical
(sorted JSON meta, fixed array order), so preparing the same inputs
twice yields byte-identical files and the same content hash.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass

import numpy as np

from .graph import DirectedGraph, load_edge_list
from .text import (
    DataError,
    EmbeddingBundle,
    build_bundle,
    load_feature_matrix,
    load_llm_records,
    load_node_documents,
)

log = logging.getLogger(__name__)

__all__ = ["PreparedDataset", "prepare", "save_dataset", "load_dataset"]

_MAGIC = b"TAPEDS01"
_U64 = struct.Struct("<Q")
_DTYPES = {0: np.float64, 1: np.int64}
_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.int64): 1}


@dataclass
class PreparedDataset:
    class_names: list[str]
    labels: np.ndarray  # int64, -1 where unlabeled
    years: np.ndarray
    graph: DirectedGraph
    bundle: EmbeddingBundle
    text_dim: int
    pred_top_k: int
    seed: int

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def source_dims(self) -> dict[str, int]:
        return {s: self.bundle.source(s).shape[1] for s in ("expl", "pred", "text", "ogb")}


def prepare(
    node_docs_path,
    edges_path,
    features_path,
    llm_cache_path,
    class_names: list[str],
    text_dim: int = 256,
    pred_top_k: int = 5,
    seed: int = 0,
    overrides: dict[str, np.ndarray] | None = None,
) -> PreparedDataset:
    """Ingest the four input files and build the dataset in memory."""
    docs = load_node_documents(node_docs_path)
    n = len(docs)
    if n == 0:
        raise DataError(f"{node_docs_path}: no documents")
    graph = load_edge_list(edges_path, num_nodes=n)
    features = load_feature_matrix(features_path)
    if features.shape[0] != n:
        raise DataError(
            f"{features_path}: {features.shape[0]} feature rows for {n} documents"
        )
    records = load_llm_records(llm_cache_path, class_names) if llm_cache_path else {}
    labels = np.asarray([-1 if d.label is None else d.label for d in docs], dtype=np.int64)
    if labels.max() >= len(class_names):
        raise DataError(
            f"label {labels.max()} outside the {len(class_names)} configured classes"
        )
    years = np.asarray([d.year for d in docs], dtype=np.int64)
    bundle = build_bundle(docs, records, features, num_classes=len(class_names),
                          text_dim=text_dim, pred_top_k=pred_top_k, seed=seed,
                          overrides=overrides)
    log.info("prepared dataset: %d nodes, %d edges, %d classes, %d cached LLM records",
             n, graph.num_edges, len(class_names), len(records))
    return PreparedDataset(class_names=class_names, labels=labels, years=years,
                           graph=graph, bundle=bundle, text_dim=text_dim,
                           pred_top_k=pred_top_k, seed=seed)


def _arrays_of(ds: PreparedDataset) -> list[tuple[str, np.ndarray]]:
    g = ds.graph
    return [
        ("labels", ds.labels),
        ("years", ds.years),
        ("out_offsets", g.out_offsets),
        ("out_targets", g.out_targets),
        ("in_offsets", g.in_offsets),
        ("in_targets", g.in_targets),
        ("h_expl", ds.bundle.h_expl),
        ("h_pred", ds.bundle.h_pred),
        ("h_text", ds.bundle.h_text),
        ("h_ogb", ds.bundle.h_ogb),
    ]


def save_dataset(ds: PreparedDataset, path) -> str:
    """Write the artifact; returns (and writes alongside) its sha256 hash."""
    meta = {
        "class_names": ds.class_names,
        "num_nodes": ds.num_nodes,
        "num_edges": ds.graph.num_edges,
        "text_dim": ds.text_dim,
        "pred_top_k": ds.pred_top_k,
        "seed": ds.seed,
        "self_loops_dropped": ds.graph.self_loops_dropped,
        "duplicates_dropped": ds.graph.duplicates_dropped,
    }
    meta_raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    digest = hashlib.sha256()
    with open(path, "wb") as f:

        def put(buf: bytes):
            digest.update(buf)
            f.write(buf)

        put(_MAGIC)
        put(_U64.pack(len(meta_raw)))
        put(meta_raw)
        arrays = _arrays_of(ds)
        put(_U64.pack(len(arrays)))
        for name, arr in arrays:
            arr = np.ascontiguousarray(arr)
            raw = name.encode("utf-8")
            put(_U64.pack(len(raw)))
            put(raw)
            put(struct.pack("<B", _DTYPE_CODES[arr.dtype]))
            put(_U64.pack(arr.ndim))
            for d in arr.shape:
                put(_U64.pack(d))
            put(arr.tobytes())
    hexhash = digest.hexdigest()
    with open(str(path) + ".sha256", "w", encoding="utf-8") as f:
        f.write(hexhash + "\n")
    return hexhash


def load_dataset(path) -> PreparedDataset:
    with open(path, "rb") as f:

        def take(n: int) -> bytes:
            buf = f.read(n)
            if len(buf) != n:
                raise DataError(f"{path}: truncated dataset artifact")
            return buf

        if take(len(_MAGIC)) != _MAGIC:
            raise DataError(f"{path}: not a prepared dataset artifact")
        (meta_len,) = _U64.unpack(take(8))
        meta = json.loads(take(meta_len).decode("utf-8"))
        (count,) = _U64.unpack(take(8))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = _U64.unpack(take(8))
            name = take(nlen).decode("utf-8")
            code = struct.unpack("<B", take(1))[0]
            (rank,) = _U64.unpack(take(8))
            shape = tuple(_U64.unpack(take(8))[0] for _ in range(rank))
            dtype = np.dtype(_DTYPES[code])
            n = int(np.prod(shape)) if shape else 1
            arrays[name] = np.frombuffer(take(n * dtype.itemsize), dtype=dtype).reshape(shape).copy()
    needed = {"labels", "years", "out_offsets", "out_targets", "in_offsets", "in_targets",
              "h_expl", "h_pred", "h_text", "h_ogb"}
    missing = needed - set(arrays)
    if missing:
        raise DataError(f"{path}: artifact is missing arrays {sorted(missing)}")
    graph = DirectedGraph(
        num_nodes=int(meta["num_nodes"]),
        out_offsets=arrays["out_offsets"],
        out_targets=arrays["out_targets"],
        in_offsets=arrays["in_offsets"],
        in_targets=arrays["in_targets"],
        num_edges=int(meta["num_edges"]),
        self_loops_dropped=int(meta.get("self_loops_dropped", 0)),
        duplicates_dropped=int(meta.get("duplicates_dropped", 0)),
    )
    bundle = EmbeddingBundle(h_expl=arrays["h_expl"], h_pred=arrays["h_pred"],
                             h_text=arrays["h_text"], h_ogb=arrays["h_ogb"])
    bundle.validate()
    return PreparedDataset(
        class_names=list(meta["class_names"]),
        labels=arrays["labels"],
        years=arrays["years"],
        graph=graph,
        bundle=bundle,
        text_dim=int(meta["text_dim"]),
        pred_top_k=int(meta["pred_top_k"]),
        seed=int(meta["seed"]),
    )
