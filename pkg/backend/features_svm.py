# backend/features_svm.py
"""
GAP feature vectors and the one-vs-rest linear SVM that classifies them.

Each class problem minimizes 1/2 |w|^2 + C * sum_i max(0, 1 - y_i (w . x_i + b))
with y_i = +1 for the class and -1 for the rest. The bias is learned by
appending a constant 1 feature (so it is regularized together with w) and the
problem is solved by dual coordinate descent on the box-constrained dual.
"""

import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from backend.errors import DatasetIOError, DimensionError, DomainError, FormatError, NumericError
from backend.tensor_core import Tensor
from backend.tensor_io import load_tensor, save_tensor

logger = logging.getLogger(__name__)

DEFAULT_C = 1.0
TOLERANCE = 1e-4
MAX_EPOCHS = 1000

MODEL_MAGIC = b"RTPS"
MODEL_VERSION = 1
_MODEL_HEADER = struct.Struct("<4sIIIf")
_CLASS_HEADER = struct.Struct("<If")


# --- 1. Feature Types ---


@dataclass
class FeatureVector:
    values: np.ndarray  # (D,) float32
    pathway_boundary: int
    label: Optional[int] = None

    def __len__(self):
        return self.values.shape[0]


@dataclass
class FeatureSet:
    """Row-stacked feature vectors with their labels."""

    values: np.ndarray  # (n, D) float32
    labels: np.ndarray  # (n,) int64
    pathway_boundary: int

    def __len__(self):
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_vectors(cls, vectors: Sequence[FeatureVector]) -> "FeatureSet":
        if not vectors:
            raise DomainError("no feature vectors given")
        if any(v.label is None for v in vectors):
            raise DomainError("every feature vector needs a label")
        return cls(
            values=np.stack([v.values for v in vectors]).astype(np.float32),
            labels=np.array([v.label for v in vectors], dtype=np.int64),
            pathway_boundary=vectors[0].pathway_boundary,
        )

    def vectors(self) -> List[FeatureVector]:
        return [FeatureVector(row, self.pathway_boundary, int(label)) for row, label in zip(self.values, self.labels)]

    def subset(self, ids: np.ndarray) -> "FeatureSet":
        return FeatureSet(self.values[ids], self.labels[ids], self.pathway_boundary)

    def select_pathway(self, pathways: str) -> "FeatureSet":
        """Keeps the sub-representation of one pathway ('both', 'conv5_1_only', 'conv5_2_only')."""
        if pathways == "both":
            return self
        if self.pathway_boundary in (0, self.dim):
            raise DomainError("features hold a single pathway; nothing to select")
        if pathways == "conv5_1_only":
            return FeatureSet(self.values[:, :self.pathway_boundary], self.labels, self.pathway_boundary)
        if pathways == "conv5_2_only":
            return FeatureSet(self.values[:, self.pathway_boundary:], self.labels, 0)
        raise DomainError(f"unknown pathway selection {pathways!r}")


def l2_normalize(feature: FeatureVector) -> FeatureVector:
    norm = float(np.linalg.norm(feature.values.astype(np.float64)))
    if norm == 0.0:
        logger.warning("l2_normalize: zero feature vector left unchanged")
        return FeatureVector(feature.values.copy(), feature.pathway_boundary, feature.label)
    return FeatureVector((feature.values / norm).astype(np.float32), feature.pathway_boundary, feature.label)


def l2_normalize_rows(values: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(values.astype(np.float64), axis=1, keepdims=True)
    if np.any(norms == 0):
        logger.warning("l2_normalize: %d zero feature vectors left unchanged", int(np.sum(norms == 0)))
    norms[norms == 0] = 1.0
    return (values / norms).astype(np.float32)


# --- 2. Linear SVM ---


@dataclass
class SvmModel:
    classes: List[int]
    weights: np.ndarray  # (K, D)
    biases: np.ndarray  # (K,)
    C: float = DEFAULT_C
    metadata: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.classes) < 2:
            raise DomainError("an SVM model needs at least two classes")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.biases))):
            raise NumericError("SVM weights must be finite")

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def decision_function(self, values: np.ndarray) -> np.ndarray:
        values = np.atleast_2d(values)
        if values.shape[1] != self.dim:
            raise DimensionError(f"feature length {values.shape[1]} != model length {self.dim}", axis="feature")
        return values.astype(np.float64) @ self.weights.T + self.biases


@dataclass
class BinarySolution:
    w: np.ndarray
    b: float
    epochs: int
    violation: float


def dual_coordinate_descent(x: np.ndarray, y: np.ndarray, C: float, rng: np.random.Generator,
                            tol: float = TOLERANCE, max_epochs: int = MAX_EPOCHS) -> BinarySolution:
    """
    L1-hinge, L2-regularized dual: min 1/2 a^T Q a - sum(a), 0 <= a_i <= C, with the bias
    folded in as a constant feature. Stops when the largest projected-gradient
    violation of an epoch falls below ``tol``.
    """
    n = x.shape[0]
    xa = np.hstack([x.astype(np.float64), np.ones((n, 1))])
    q_diag = np.einsum("ij,ij->i", xa, xa)
    alpha = np.zeros(n)
    w = np.zeros(xa.shape[1])
    violation = np.inf
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        violation = 0.0
        for i in rng.permutation(n):
            g = y[i] * xa[i].dot(w) - 1.0
            a = alpha[i]
            if a == 0.0:
                pg = min(g, 0.0)
            elif a == C:
                pg = max(g, 0.0)
            else:
                pg = g
            violation = max(violation, abs(pg))
            if pg != 0.0:
                new = min(max(a - g / q_diag[i], 0.0), C)
                w += (new - a) * y[i] * xa[i]
                alpha[i] = new
        if violation < tol:
            break
    else:
        logger.warning("dual coordinate descent stopped at %d epochs (violation %.2e)", max_epochs, violation)
    return BinarySolution(w=w[:-1], b=float(w[-1]), epochs=epoch, violation=violation)


def primal_objective(w: np.ndarray, b: float, x: np.ndarray, y: np.ndarray, C: float) -> float:
    """1/2 (|w|^2 + b^2) + C * sum hinge, the objective the solver minimizes."""
    margins = y * (x.astype(np.float64) @ w + b)
    return 0.5 * (float(w @ w) + b * b) + C * float(np.maximum(0.0, 1.0 - margins).sum())


def svm_train(features: Union[FeatureSet, Sequence[FeatureVector]], C: float = DEFAULT_C, seed: int = 0,
              tol: float = TOLERANCE, max_epochs: int = MAX_EPOCHS, workers: int = 1) -> SvmModel:
    """One-vs-rest linear SVM; class problems are independent and may run on ``workers`` threads."""
    if not isinstance(features, FeatureSet):
        features = FeatureSet.from_vectors(list(features))
    if C <= 0:
        raise DomainError(f"C must be positive, got {C}")
    classes = sorted(int(c) for c in np.unique(features.labels))
    if len(classes) < 2:
        raise DomainError(f"SVM training needs at least two classes, got {classes}")
    if not np.all(np.isfinite(features.values)):
        raise NumericError("non-finite feature values")

    def solve(k: int) -> BinarySolution:
        y = np.where(features.labels == k, 1.0, -1.0)
        return dual_coordinate_descent(features.values, y, C, np.random.default_rng([seed, k]), tol, max_epochs)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            solutions = list(pool.map(solve, classes))
    else:
        solutions = [solve(k) for k in classes]

    logger.debug("svm: %d classes, epochs %s", len(classes), [s.epochs for s in solutions])
    return SvmModel(
        classes=classes,
        weights=np.stack([s.w for s in solutions]),
        biases=np.array([s.b for s in solutions]),
        C=C,
        metadata={"seed": str(seed), "samples": str(len(features)), "dim": str(features.dim)},
    )


def svm_predict(model: SvmModel, feature: Union[FeatureVector, np.ndarray]) -> int:
    """argmax_k w_k . x + b_k; ties go to the lowest class id."""
    values = feature.values if isinstance(feature, FeatureVector) else np.asarray(feature)
    if values.ndim != 1:
        raise DimensionError("svm_predict takes one feature vector", axis="feature")
    scores = model.decision_function(values)[0]
    return model.classes[int(np.argmax(scores))]


def svm_predict_batch(model: SvmModel, values: np.ndarray) -> np.ndarray:
    scores = model.decision_function(values)
    return np.asarray(model.classes, dtype=np.int64)[np.argmax(scores, axis=1)]


# --- 3. Files ---


def save_svm_model(model: SvmModel, path: Union[str, Path]):
    parts = [_MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, len(model.classes), model.dim, model.C)]
    for k, cls in enumerate(model.classes):
        parts.append(_CLASS_HEADER.pack(cls, float(model.biases[k])))
        parts.append(model.weights[k].astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_svm_model(path: Union[str, Path]) -> SvmModel:
    try:
        payload = Path(path).read_bytes()
    except OSError as e:
        raise DatasetIOError(f"cannot read SVM model ({e.strerror})", str(path)) from e
    if len(payload) < _MODEL_HEADER.size:
        raise FormatError(f"{path}: truncated SVM model header")
    magic, version, classes, dim, C = _MODEL_HEADER.unpack_from(payload, 0)
    if magic != MODEL_MAGIC or version != MODEL_VERSION:
        raise FormatError(f"{path}: not an SVM model file")
    offset = _MODEL_HEADER.size
    record = _CLASS_HEADER.size + 4 * dim
    if len(payload) != offset + classes * record:
        raise FormatError(f"{path}: expected {classes} class records of dimension {dim}")
    ids, biases, weights = [], [], []
    for _ in range(classes):
        cls, bias = _CLASS_HEADER.unpack_from(payload, offset)
        offset += _CLASS_HEADER.size
        weights.append(np.frombuffer(payload[offset:offset + 4 * dim], dtype="<f4").astype(np.float64))
        offset += 4 * dim
        ids.append(cls)
        biases.append(bias)
    return SvmModel(classes=ids, weights=np.stack(weights), biases=np.array(biases, dtype=np.float64), C=float(C))


def save_features(features: FeatureSet, path: Union[str, Path]):
    """CSV (label, f0..f{D-1}) or, for a .rtpt suffix, an N x D x 1 x 1 tensor plus a labels CSV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".rtpt":
        save_tensor(Tensor(features.values.reshape(len(features), -1, 1, 1)), path)
        pd.DataFrame({"label": features.labels}).to_csv(_labels_path(path), index=False)
        return
    frame = pd.DataFrame(features.values, columns=[f"f{i}" for i in range(features.dim)])
    frame.insert(0, "label", features.labels)
    frame.to_csv(path, index=False, float_format="%.9g")


def load_features(path: Union[str, Path], pathway_boundary: Optional[int] = None) -> FeatureSet:
    path = Path(path)
    if not path.exists():
        raise DatasetIOError("feature file not found", str(path))
    if path.suffix == ".rtpt":
        tensor = load_tensor(path)
        values = tensor.data.reshape(tensor.shape[0], -1)
        labels_file = _labels_path(path)
        if not labels_file.exists():
            raise DatasetIOError("labels file for tensor features not found", str(labels_file))
        labels = pd.read_csv(labels_file)["label"].to_numpy(dtype=np.int64)
    else:
        frame = pd.read_csv(path)
        if "label" not in frame.columns:
            raise FormatError(f"{path}: feature CSV needs a 'label' column")
        labels = frame["label"].to_numpy(dtype=np.int64)
        values = frame.drop(columns=["label"]).to_numpy(dtype=np.float32)
    if labels.shape[0] != values.shape[0]:
        raise FormatError(f"{path}: {labels.shape[0]} labels for {values.shape[0]} feature rows")
    boundary = values.shape[1] if pathway_boundary is None else pathway_boundary
    return FeatureSet(values=values.astype(np.float32), labels=labels, pathway_boundary=boundary)


def _labels_path(path: Path) -> Path:
    return path.with_suffix(".labels.csv")
