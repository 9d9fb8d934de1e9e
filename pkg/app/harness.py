# app/harness.py
"""
Repeated stratified-split evaluation and report emission.

Each repeat draws a stratified split from a seed derived from (base_seed,
repeat_index), trains a classifier on the training part of a fixed feature set
and scores the test part. Repeats are independent and may run on worker
threads; the report is assembled in repeat order.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.metrics import confusion_matrix as count_confusions
from sklearn.model_selection import train_test_split

from app.dataset import Dataset
from backend.checkpoint import network_from_checkpoint
from backend.errors import ConfigurationError, DimensionError, DomainError
from backend.features_svm import DEFAULT_C, FeatureSet, l2_normalize_rows, svm_predict_batch, svm_train
from backend.models import EvalReport, SplitSpec, parse_model
from backend.network import ResNetTP, extract_representation
from backend.tensor_core import Tensor

logger = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
MASK32 = (1 << 32) - 1

# (train features, test features, repeat index) -> predicted test labels
Classifier = Callable[[FeatureSet, FeatureSet, int], np.ndarray]


# --- 1. Splits ---


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def repeat_seed(base_seed: int, repeat_index: int) -> int:
    return splitmix64((base_seed & MASK64) ^ splitmix64(repeat_index))


def split(labels, spec: SplitSpec, repeat_index: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Stratified split: each class contributes exactly ``spec.train_count(size)`` training
    ids. Returns sorted (train ids, test ids).
    """
    labels = np.asarray(getattr(labels, "labels", labels), dtype=np.int64)
    # sklearn seeds are 32-bit; one RandomState is shared by every class of the repeat
    random_state = np.random.RandomState(repeat_seed(spec.base_seed, repeat_index) & MASK32)
    train_ids, test_ids = [], []
    for cls in np.unique(labels):
        ids = np.flatnonzero(labels == cls)
        k = spec.train_count(len(ids))
        if k < 1:
            raise ConfigurationError(f"class {cls}: training ratio leaves no training sample out of {len(ids)}")
        if k >= len(ids):
            raise ConfigurationError(f"class {cls}: {k} training samples leave no test sample out of {len(ids)}")
        train, test = train_test_split(ids, train_size=k, random_state=random_state)
        train_ids.append(train)
        test_ids.append(test)
    return np.sort(np.concatenate(train_ids)), np.sort(np.concatenate(test_ids))


# --- 2. Evaluation ---


def svm_classifier(C: float = DEFAULT_C, normalize: bool = False, workers: int = 1) -> Classifier:
    def classify(train: FeatureSet, test: FeatureSet, repeat_index: int) -> np.ndarray:
        train_x, test_x = train.values, test.values
        if normalize:
            train_x, test_x = l2_normalize_rows(train_x), l2_normalize_rows(test_x)
        model = svm_train(FeatureSet(train_x, train.labels, train.pathway_boundary), C=C, seed=repeat_index,
                          workers=workers)
        return svm_predict_batch(model, test_x)

    return classify


def confusion_matrix(true: np.ndarray, predicted: np.ndarray, classes: int) -> np.ndarray:
    return count_confusions(true, predicted, labels=np.arange(classes)).astype(np.int64)


def evaluate_features(features: FeatureSet, spec: SplitSpec, class_names: Sequence[str],
                      classifier: Optional[Classifier] = None, workers: int = 1) -> EvalReport:
    """Runs ``spec.repeats`` split/train/predict rounds on a fixed feature set."""
    classifier = classifier or svm_classifier()
    classes = len(class_names)
    if features.labels.max() >= classes:
        raise DomainError(f"feature labels exceed the {classes} known classes")

    def run(repeat_index: int) -> np.ndarray:
        train_ids, test_ids = split(features.labels, spec, repeat_index)
        predicted = np.asarray(classifier(features.subset(train_ids), features.subset(test_ids), repeat_index))
        truth = features.labels[test_ids]
        if predicted.shape != truth.shape:
            raise DimensionError(f"classifier returned {predicted.shape[0]} labels for {truth.shape[0]} samples",
                                 axis="batch")
        matrix = confusion_matrix(truth, predicted, classes)
        logger.info("repeat %d: accuracy %.2f%%", repeat_index, 100.0 * np.trace(matrix) / matrix.sum())
        return matrix

    repeats = range(spec.repeats)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            matrices = list(pool.map(run, repeats))
    else:
        matrices = [run(r) for r in repeats]
    return build_report(matrices, class_names)


def build_report(matrices: List[np.ndarray], class_names: Sequence[str]) -> EvalReport:
    accuracies = [100.0 * float(np.trace(m)) / float(m.sum()) for m in matrices]
    std = float(np.std(accuracies, ddof=1)) if len(accuracies) > 1 else 0.0
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.stack([np.diag(m) / m.sum(axis=1) for m in matrices])
    return EvalReport(
        class_names=list(class_names),
        accuracies=accuracies,
        mean=float(np.mean(accuracies)),
        std=std,
        per_class_accuracy=[float(v) for v in 100.0 * np.nanmean(per_class, axis=0)],
        confusions=[m.tolist() for m in matrices],
        repeats=len(matrices),
    )


def extract_features(net: ResNetTP, dataset: Dataset, batch_size: int = 32) -> FeatureSet:
    """Eval-mode GAP representations of every image, in manifest order."""
    vectors = []
    for start in range(0, len(dataset), batch_size):
        batch = dataset.images[start:start + batch_size]
        vectors += extract_representation(net, Tensor(batch), dataset.labels[start:start + batch_size])
    return FeatureSet.from_vectors(vectors)


def _network(net_ckpt: Union[str, Path, ResNetTP], dataset: Dataset) -> ResNetTP:
    net = net_ckpt if isinstance(net_ckpt, ResNetTP) else network_from_checkpoint(net_ckpt)
    if tuple(dataset.images.shape[2:]) != tuple(net.config.input_size):
        raise DimensionError(
            f"dataset images are {dataset.images.shape[2]}x{dataset.images.shape[3]}, network expects "
            f"{net.config.input_size[0]}x{net.config.input_size[1]}",
            axis="height",
        )
    return net


def evaluate(net_ckpt: Union[str, Path, ResNetTP], dataset: Dataset, spec: SplitSpec, svm_C: float = DEFAULT_C,
             pathways: str = "both", normalize: bool = False, workers: int = 1) -> EvalReport:
    """
    Features are extracted once; every repeat then trains a one-vs-rest SVM on its
    training split and predicts its test split. ``pathways`` restricts the SVM to
    one pathway's slice of the representation.
    """
    net = _network(net_ckpt, dataset)
    logger.info("--- 📊 Evaluating: %d repeats, %s features ---", spec.repeats, pathways)
    features = extract_features(net, dataset).select_pathway(pathways)
    return evaluate_features(features, spec, dataset.class_names,
                             svm_classifier(svm_C, normalize=normalize), workers=workers)


SWEEP_COLUMNS = ["network", "pathways", "ratio", "mean", "std", "repeats"]


def sweep(networks: Mapping[str, Union[str, Path, ResNetTP]], dataset: Dataset, ratios: Sequence[float],
          repeats: int = 10, base_seed: int = 0, svm_C: float = DEFAULT_C, pathways: Sequence[str] = ("both",),
          normalize: bool = False, workers: int = 1) -> pd.DataFrame:
    """
    One row per network x pathway selection x training ratio. Features are extracted
    once per network and every cell reuses the same split seeds.
    """
    specs = [parse_model(SplitSpec, {"training_ratio": r, "repeats": repeats, "base_seed": base_seed}, "sweep split")
             for r in ratios]
    if not specs:
        raise ConfigurationError("sweep needs at least one training ratio")
    rows = []
    for name, source in networks.items():
        net = _network(source, dataset)
        logger.info("--- 📈 Sweep: %s, %d ratios x %d pathway selections ---", name, len(specs), len(pathways))
        features = extract_features(net, dataset)
        for selection in pathways:
            subset = features.select_pathway(selection)
            for spec in specs:
                report = evaluate_features(subset, spec, dataset.class_names,
                                           svm_classifier(svm_C, normalize=normalize), workers=workers)
                rows.append({"network": name, "pathways": selection, "ratio": spec.training_ratio,
                             "mean": report.mean, "std": report.std, "repeats": report.repeats})
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


# --- 3. Reports ---


def report_emit(report: EvalReport, out_dir: Union[str, Path]) -> List[Path]:
    """Writes accuracy.csv, summary.txt, per_class.csv and confusion_<r>.csv; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    accuracy = pd.DataFrame({"repeat": range(report.repeats), "acc": report.accuracies})
    accuracy.to_csv(out_dir / "accuracy.csv", index=False, float_format="%.4f")
    written.append(out_dir / "accuracy.csv")

    (out_dir / "summary.txt").write_text(report.summary() + "\n", encoding="utf-8")
    written.append(out_dir / "summary.txt")

    per_class = pd.DataFrame({"class_name": report.class_names, "acc": report.per_class_accuracy})
    per_class.to_csv(out_dir / "per_class.csv", index=False, float_format="%.4f")
    written.append(out_dir / "per_class.csv")

    for r, matrix in enumerate(report.confusions):
        frame = pd.DataFrame(matrix, index=report.class_names, columns=report.class_names)
        frame.index.name = "true"
        path = out_dir / f"confusion_{r}.csv"
        frame.to_csv(path)
        written.append(path)

    logger.info("report written to %s (%s)", out_dir, report.summary())
    return written
