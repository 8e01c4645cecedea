"""Binary matrix containers, dataset bundles, seen/unseen splits, and the
planted-structure synthetic generator used as a verification oracle.

Container layout (little-endian throughout):

    bytes 0..3   magic  b"PMTX"
    bytes 4..5   version    u16 (currently 1)
    bytes 6..7   dtype code u16 (1 = float64)
    bytes 8..11  rows       u32
    bytes 12..15 cols       u32
    bytes 16..   payload, rows*cols float64 values, row-major

External feature providers can pack CNN part activations into this format
directly; see the README for the bundle manifest schema.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import BundleError, ContainerFormatError, InputError
from .model import LabelMatrix, ModelParams, PartFeatureSet, TfIdfMatrix

MAGIC = b"PMTX"
VERSION = 1
DTYPE_F64 = 1
_HEADER = struct.Struct("<4sHHII")

MANIFEST_NAME = "manifest.json"
BUNDLE_FORMAT = "part-feature-bundle/v1"


def write_matrix(path, values) -> None:
    """Write a 2-D float64 array as a container file (bit-exact round trip)."""
    arr = np.ascontiguousarray(values, dtype="<f8")
    if arr.ndim != 2:
        raise InputError(f"containers hold 2-D matrices, got shape {arr.shape}")
    header = _HEADER.pack(MAGIC, VERSION, DTYPE_F64, arr.shape[0], arr.shape[1])
    Path(path).write_bytes(header + arr.tobytes())


def read_matrix(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise ContainerFormatError(f"container file {path} does not exist")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ContainerFormatError(
            f"{path}: header truncated, expected {_HEADER.size} bytes, "
            f"got {len(raw)}")
    magic, version, dtype, rows, cols = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ContainerFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ContainerFormatError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_F64:
        raise ContainerFormatError(f"{path}: unsupported dtype code {dtype}")
    expected = _HEADER.size + rows * cols * 8
    if len(raw) != expected:
        raise ContainerFormatError(
            f"{path}: payload size mismatch, expected {expected} bytes, "
            f"got {len(raw)}")
    payload = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    return payload.reshape(rows, cols).astype(np.float64, copy=True)


@dataclass(frozen=True)
class SplitSpec:
    """Disjoint seen/unseen class partition with its generating settings."""

    mode: str
    seen: tuple
    unseen: tuple
    seed: int = 0
    fraction: float = 0.2

    def __post_init__(self):
        if self.mode not in ("SCS", "SCE"):
            raise InputError(f"split mode must be SCS or SCE, got {self.mode!r}")
        object.__setattr__(self, "seen", tuple(self.seen))
        object.__setattr__(self, "unseen", tuple(self.unseen))
        if set(self.seen) & set(self.unseen):
            raise InputError("seen and unseen class sets overlap")

    def to_dict(self) -> dict:
        return {"mode": self.mode, "seen": list(self.seen),
                "unseen": list(self.unseen), "seed": self.seed,
                "fraction": self.fraction}

    def save(self, path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SplitSpec":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read split file {path}: {exc}") from exc
        return cls(raw["mode"], raw["seen"], raw["unseen"],
                   raw.get("seed", 0), raw.get("fraction", 0.2))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def make_split(hierarchy: Mapping[str, str], mode: str,
               fraction: float = 0.2, seed: int = 0) -> SplitSpec:
    """Partition classes into seen/unseen by super-category.

    SCS keeps every multi-leaf super-category partially seen: per category,
    ``round_half_up(fraction * n_leaves)`` leaves (capped at n_leaves - 1)
    become unseen; single-leaf categories stay seen. SCE holds out whole
    super-categories: ``round_half_up(fraction * n_categories)`` of them
    (capped so at least one category stays seen). Deterministic per seed.
    """
    if not 0.0 < fraction < 1.0:
        raise InputError(f"fraction must lie in (0, 1), got {fraction}")
    if not hierarchy:
        raise InputError("hierarchy is empty")
    groups: dict = {}
    for cid in sorted(hierarchy):
        groups.setdefault(str(hierarchy[cid]), []).append(cid)
    rng = np.random.default_rng(seed)
    unseen = []
    if mode == "SCS":
        for cat in sorted(groups):
            leaves = sorted(groups[cat])
            if len(leaves) < 2:
                continue
            n_unseen = min(_round_half_up(fraction * len(leaves)),
                           len(leaves) - 1)
            if n_unseen > 0:
                picks = rng.choice(len(leaves), size=n_unseen, replace=False)
                unseen.extend(leaves[i] for i in sorted(picks))
    elif mode == "SCE":
        cats = sorted(groups)
        n_unseen = min(_round_half_up(fraction * len(cats)), len(cats) - 1)
        if n_unseen > 0:
            picks = rng.choice(len(cats), size=n_unseen, replace=False)
            for i in sorted(picks):
                unseen.extend(sorted(groups[cats[i]]))
    else:
        raise InputError(f"split mode must be SCS or SCE, got {mode!r}")
    unseen_set = set(unseen)
    seen = [c for c in sorted(hierarchy) if c not in unseen_set]
    return SplitSpec(mode, tuple(seen), tuple(sorted(unseen)), seed, fraction)


@dataclass(frozen=True)
class DatasetBundle:
    """Everything a training or evaluation run needs, cross-checked.

    ``tfidf`` covers the bundle's whole class universe; ``Y`` labels each
    sample against the same class order; ``hierarchy`` maps every class to
    its super-category. ``documents`` optionally carries the raw articles.
    """

    tfidf: TfIdfMatrix
    X: PartFeatureSet
    Y: LabelMatrix
    hierarchy: dict
    documents: Optional[dict] = None

    def __post_init__(self):
        object.__setattr__(self, "hierarchy", dict(self.hierarchy))
        if self.Y.class_ids != self.tfidf.class_ids:
            raise BundleError("label classes do not match text matrix classes")
        if self.Y.n_samples != self.X.n_samples:
            raise BundleError(
                f"{self.Y.n_samples} label rows but {self.X.n_samples} samples")
        missing_h = [c for c in self.tfidf.class_ids if c not in self.hierarchy]
        if missing_h:
            raise BundleError(
                f"classes missing from hierarchy: {missing_h[:5]}")

    @property
    def class_ids(self) -> tuple:
        return self.tfidf.class_ids

    def sample_indices_for(self, class_ids: Sequence[str]) -> np.ndarray:
        """Indices of samples whose true class is in the given set."""
        wanted = {c for c in class_ids}
        keep = np.array([self.tfidf.class_ids[k] in wanted
                         for k in self.Y.labels])
        return np.nonzero(keep)[0]

    def restrict_to_classes(self, class_ids: Sequence[str]) -> "DatasetBundle":
        """Sub-bundle with only the given classes and their samples."""
        class_ids = list(class_ids)
        idx = self.sample_indices_for(class_ids)
        tfidf = self.tfidf.select_classes(class_ids)
        col = {c: j for j, c in enumerate(class_ids)}
        old_labels = self.Y.labels
        new_labels = [col[self.tfidf.class_ids[old_labels[i]]] for i in idx]
        return DatasetBundle(
            tfidf,
            self.X.select_samples(idx),
            LabelMatrix.from_labels(new_labels, class_ids),
            {c: self.hierarchy[c] for c in class_ids},
            None if self.documents is None else
            {c: self.documents[c] for c in class_ids if c in self.documents},
        )


def save_bundle(bundle: DatasetBundle, out_dir) -> Path:
    """Write a bundle directory; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix(out / "tfidf.pmtx", bundle.tfidf.values)
    (out / "vocab.txt").write_text(
        "".join(t + "\n" for t in bundle.tfidf.vocab), encoding="utf-8")
    write_matrix(out / "labels.pmtx", bundle.Y.values)
    feature_files = {}
    for p, name in enumerate(bundle.X.parts):
        fname = f"features_{p:02d}.pmtx"
        write_matrix(out / fname, bundle.X.features[p])
        feature_files[name] = fname
    write_matrix(out / "missing.pmtx", bundle.X.missing.astype(np.float64))
    manifest = {
        "format": BUNDLE_FORMAT,
        "class_ids": list(bundle.tfidf.class_ids),
        "sample_ids": list(bundle.X.sample_ids),
        "part_names": list(bundle.X.parts),
        "dims": {
            "P": bundle.X.n_parts,
            "d_P": bundle.X.part_dim,
            "d_T": bundle.tfidf.n_terms,
            "N": bundle.X.n_samples,
            "K": bundle.tfidf.n_classes,
        },
        "hierarchy": {c: bundle.hierarchy[c] for c in bundle.tfidf.class_ids},
        "files": {
            "tfidf": "tfidf.pmtx",
            "vocab": "vocab.txt",
            "labels": "labels.pmtx",
            "missing": "missing.pmtx",
            "features": feature_files,
        },
    }
    if bundle.documents is not None:
        (out / "documents.json").write_text(
            json.dumps(bundle.documents, indent=2, sort_keys=True) + "\n",
            encoding="utf-8")
        manifest["files"]["documents"] = "documents.json"
    manifest_path = out / MANIFEST_NAME
    manifest_path.write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest_path


def _resolve(root: Path, name: str) -> Path:
    path = root / name
    if not path.exists():
        raise BundleError(f"manifest references missing file {path}")
    return path


def load_bundle(manifest_path) -> DatasetBundle:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    if not manifest_path.exists():
        raise BundleError(f"bundle manifest {manifest_path} does not exist")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise BundleError(f"cannot parse {manifest_path}: {exc}") from exc
    if manifest.get("format") != BUNDLE_FORMAT:
        raise BundleError(
            f"{manifest_path}: unknown bundle format {manifest.get('format')!r}")
    root = manifest_path.parent
    files = manifest["files"]
    dims = manifest["dims"]

    vocab = [line for line in
             _resolve(root, files["vocab"]).read_text(encoding="utf-8").splitlines()
             if line]
    tfidf_values = read_matrix(_resolve(root, files["tfidf"]))
    labels = read_matrix(_resolve(root, files["labels"]))
    missing = read_matrix(_resolve(root, files["missing"]))
    part_names = list(manifest["part_names"])
    features = [read_matrix(_resolve(root, files["features"][name]))
                for name in part_names]

    expected = {
        "d_T": (len(vocab), "vocabulary size"),
        "K": (tfidf_values.shape[1], "tfidf column count"),
        "N": (labels.shape[0], "label row count"),
        "P": (len(part_names), "part count"),
        "d_P": (features[0].shape[0] if features else 0, "feature row count"),
    }
    for key, (actual, what) in expected.items():
        if dims.get(key) != actual:
            raise BundleError(
                f"{manifest_path}: dims[{key!r}]={dims.get(key)} but {what} "
                f"is {actual}")

    tfidf = TfIdfMatrix(tfidf_values, tuple(vocab), tuple(manifest["class_ids"]))
    X = PartFeatureSet(tuple(part_names), tuple(features),
                       missing != 0.0, tuple(manifest["sample_ids"]))
    Y = LabelMatrix(labels, tuple(manifest["class_ids"]))
    documents = None
    if "documents" in files:
        documents = json.loads(
            _resolve(root, files["documents"]).read_text(encoding="utf-8"))
    return DatasetBundle(tfidf, X, Y, manifest["hierarchy"], documents)


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs for the planted-structure generator."""

    K: int = 40
    N_per_class: int = 20
    P: int = 3
    d_P: int = 32
    d_T: int = 120
    active_terms_per_class: int = 3
    active_pool_size: int = 30
    noise_sigma: float = 0.1
    seed: int = 0
    supercategory_size: int = 4
    missing_rate: float = 0.0

    def __post_init__(self):
        if min(self.K, self.N_per_class, self.P, self.d_P, self.d_T) < 1:
            raise InputError("all synthetic dimensions must be positive")
        if not 1 <= self.active_terms_per_class <= self.d_T:
            raise InputError("active_terms_per_class must lie in [1, d_T]")
        if not self.active_terms_per_class <= self.active_pool_size <= self.d_T:
            raise InputError(
                "active_pool_size must lie in [active_terms_per_class, d_T]")
        if self.noise_sigma < 0 or not 0.0 <= self.missing_rate < 1.0:
            raise InputError("noise_sigma >= 0 and missing_rate in [0, 1) required")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "K", "N_per_class", "P", "d_P", "d_T", "active_terms_per_class",
            "active_pool_size", "noise_sigma", "seed", "supercategory_size",
            "missing_rate")}


@dataclass(frozen=True)
class PlantedTruth:
    """Ground truth behind a synthetic bundle.

    ``term_part[i]`` is the single part each term drives; ``term_vectors``
    holds the unit prototype direction of each term; ``class_prototypes``
    is K x P x d_P, the noiseless per-part feature of each class;
    ``active_pool`` lists the term indices that carry text weight anywhere.
    """

    term_part: np.ndarray
    term_vectors: np.ndarray
    class_prototypes: np.ndarray
    active_terms: dict
    active_pool: np.ndarray


def generate_synthetic(spec: SyntheticSpec = SyntheticSpec()):
    """Build a planted-part dataset bundle and the truth that generated it.

    Every term gets one planted part and a unit prototype direction; terms
    sharing a part use columns of one random orthonormal frame, so terms of
    the same part never interfere. Only a small pool of terms is active
    (the rest play the role of irrelevant vocabulary); each class activates
    a few pool terms with nonnegative weights, drawn so per-term usage
    stays balanced, which keeps the planted part of every active term
    identifiable from the data. A class's per-part prototype is the
    weighted sum of its term prototypes planted in that part, and samples
    are prototypes plus Gaussian noise.

    Returns:
        (DatasetBundle, PlantedTruth); deterministic per ``spec.seed``.
    """
    rng = np.random.default_rng(spec.seed)
    term_part = rng.integers(0, spec.P, size=spec.d_T)
    pool = np.sort(rng.choice(spec.d_T, size=spec.active_pool_size,
                              replace=False))
    term_vectors = np.zeros((spec.d_T, spec.d_P))
    for p in range(spec.P):
        idx = np.nonzero(term_part == p)[0]
        frame, _ = np.linalg.qr(rng.standard_normal((spec.d_P, spec.d_P)))
        for j, i in enumerate(idx):
            term_vectors[i] = frame[:, j % spec.d_P]

    class_ids = tuple(f"class{k:03d}" for k in range(spec.K))
    vocab = tuple(f"term{i:03d}" for i in range(spec.d_T))
    T = np.zeros((spec.d_T, spec.K))
    active_terms = {}
    usage = np.zeros(spec.active_pool_size, dtype=int)
    for k, cid in enumerate(class_ids):
        # least-used pool terms first, random tie-break
        tiebreak = rng.permutation(spec.active_pool_size)
        order = np.lexsort((tiebreak, usage))
        picks = order[:spec.active_terms_per_class]
        usage[picks] += 1
        active = np.sort(pool[picks])
        weights = rng.uniform(0.5, 1.5, size=active.size)
        T[active, k] = weights
        active_terms[cid] = [int(i) for i in active]

    prototypes = np.zeros((spec.K, spec.P, spec.d_P))
    for k in range(spec.K):
        for i in active_terms[class_ids[k]]:
            prototypes[k, term_part[i]] += T[i, k] * term_vectors[i]

    n_samples = spec.K * spec.N_per_class
    features = [np.zeros((spec.d_P, n_samples)) for _ in range(spec.P)]
    labels = np.repeat(np.arange(spec.K), spec.N_per_class)
    sample_ids = tuple(f"{class_ids[k]}_s{j:03d}"
                       for k in range(spec.K) for j in range(spec.N_per_class))
    for p in range(spec.P):
        noise = rng.standard_normal((spec.d_P, n_samples)) if spec.noise_sigma > 0 \
            else 0.0
        features[p] = prototypes[labels, p].T + spec.noise_sigma * noise

    missing = np.zeros((spec.P, n_samples), dtype=bool)
    if spec.missing_rate > 0:
        missing = rng.random((spec.P, n_samples)) < spec.missing_rate
        for p in range(spec.P):
            features[p][:, missing[p]] = 0.0

    hierarchy = {cid: f"group{k // spec.supercategory_size:03d}"
                 for k, cid in enumerate(class_ids)}
    bundle = DatasetBundle(
        TfIdfMatrix(T, vocab, class_ids),
        PartFeatureSet(tuple(f"part{p}" for p in range(spec.P)),
                       tuple(features), missing, sample_ids),
        LabelMatrix.from_labels(labels, class_ids),
        hierarchy,
    )
    truth = PlantedTruth(term_part, term_vectors, prototypes, active_terms,
                         pool)
    return bundle, truth


def save_planted_truth(truth: PlantedTruth, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix(out / "term_part.pmtx",
                 truth.term_part.astype(np.float64).reshape(1, -1))
    write_matrix(out / "term_vectors.pmtx", truth.term_vectors)
    k, p, d_p = truth.class_prototypes.shape
    write_matrix(out / "class_prototypes.pmtx",
                 truth.class_prototypes.reshape(k, p * d_p))
    (out / "truth.json").write_text(
        json.dumps({"active_terms": truth.active_terms,
                    "active_pool": [int(i) for i in truth.active_pool],
                    "prototype_shape": [k, p, d_p]},
                   indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_planted_truth(in_dir) -> PlantedTruth:
    src = Path(in_dir)
    meta = json.loads((src / "truth.json").read_text(encoding="utf-8"))
    k, p, d_p = meta["prototype_shape"]
    return PlantedTruth(
        read_matrix(src / "term_part.pmtx").ravel().astype(int),
        read_matrix(src / "term_vectors.pmtx"),
        read_matrix(src / "class_prototypes.pmtx").reshape(k, p, d_p),
        meta["active_terms"],
        np.asarray(meta["active_pool"], dtype=int),
    )


MODEL_META_NAME = "model.json"


def save_model(model: ModelParams, out_dir, hyper_dict: Optional[dict] = None,
               provenance: Optional[dict] = None) -> Path:
    """Persist a model as containers plus a metadata document."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix(out / "W_t.pmtx", model.W_t)
    part_files = {}
    for p, name in enumerate(model.part_names):
        fname = f"W_x_{p:02d}.pmtx"
        write_matrix(out / fname, model.W_x[p])
        part_files[name] = fname
    (out / "vocab.txt").write_text(
        "".join(t + "\n" for t in model.vocab), encoding="utf-8")
    meta = {
        "part_names": list(model.part_names),
        "dims": {"d": model.d, "d_T": model.n_terms,
                 "d_P": model.part_dim, "P": model.n_parts},
        "files": {"W_t": "W_t.pmtx", "vocab": "vocab.txt",
                  "W_x": part_files},
        "hyper": hyper_dict or {},
        "provenance": provenance or {},
    }
    meta_path = out / MODEL_META_NAME
    meta_path.write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return meta_path


def load_model(model_dir) -> ModelParams:
    src = Path(model_dir)
    meta_path = src / MODEL_META_NAME
    if not meta_path.exists():
        raise BundleError(f"model metadata {meta_path} does not exist")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    vocab = [line for line in
             _resolve(src, meta["files"]["vocab"]).read_text(encoding="utf-8").splitlines()
             if line]
    W_t = read_matrix(_resolve(src, meta["files"]["W_t"]))
    part_names = list(meta["part_names"])
    W_x = tuple(read_matrix(_resolve(src, meta["files"]["W_x"][name]))
                for name in part_names)
    return ModelParams(W_t, W_x, tuple(part_names), tuple(vocab))
