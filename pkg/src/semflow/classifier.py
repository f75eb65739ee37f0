"""One-vs-rest linear SVMs over clip vectors, and accuracy / confusion metrics."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .labels import IncidentClass, TaskSpec, task_spec


@dataclass
class LinearModel:
    weights: np.ndarray  # (n_classes, dim)
    bias: np.ndarray  # (n_classes,)
    task: TaskSpec
    C: float = 1.0

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def scores(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.dim:
            raise ValueError(f"model expects {self.dim}-dim vectors, got {X.shape[1]}")
        return X @ self.weights.T + self.bias

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "wb") as fh:  # a file handle keeps numpy from appending ".npz"
            np.savez(
                fh, weights=self.weights, bias=self.bias, C=self.C,
                task=self.task.task, classes=np.array([c.value for c in self.task.classes]),
            )

    @classmethod
    def load(cls, path: str | os.PathLike) -> "LinearModel":
        with np.load(path) as z:
            task = task_spec(str(z["task"]))
            if tuple(c.value for c in task.classes) != tuple(str(c) for c in z["classes"]):
                raise ValueError(f"{path}: class list does not match task {task.task}")
            return cls(z["weights"], z["bias"], task, float(z["C"]))


def dual_cd_binary(K: np.ndarray, y: np.ndarray, C: float, rng: np.random.Generator, tol: float = 1e-4, max_iter: int = 5000) -> tuple[np.ndarray, int]:
    """L2-regularised hinge-loss SVM by dual coordinate descent.

    Works on the Gram matrix ``K`` of bias-augmented samples, since clip
    vectors are far longer than the number of clips. The margin values
    ``K @ (alpha * y)`` are kept up to date instead of the primal weights.
    Stops when the spread of the projected gradient over a full pass is
    below ``tol``. Returns the dual coefficients and the number of passes.
    """
    n = len(K)
    alpha = np.zeros(n)
    f = np.zeros(n)
    qii = np.diag(K).copy()
    for it in range(1, max_iter + 1):
        pg_max, pg_min = -np.inf, np.inf
        for i in rng.permutation(n):
            if qii[i] <= 0:
                continue
            g = y[i] * f[i] - 1.0
            a = alpha[i]
            if a <= 0:
                pg = min(g, 0.0)
            elif a >= C:
                pg = max(g, 0.0)
            else:
                pg = g
            pg_max = max(pg_max, pg)
            pg_min = min(pg_min, pg)
            if pg != 0.0:
                new = min(max(a - g / qii[i], 0.0), C)
                f += (new - a) * y[i] * K[:, i]
                alpha[i] = new
        if pg_max - pg_min < tol:
            return alpha, it
    return alpha, max_iter


def train_ovr(X: np.ndarray, y: Sequence[IncidentClass], task: TaskSpec, C: float = 1.0, seed: int = 0, tol: float = 1e-4) -> LinearModel:
    X = np.asarray(X, dtype=np.float64)
    y = list(y)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError(f"need a 2-D sample matrix with one label per row, got {X.shape} and {len(y)} labels")
    stray = sorted({c.value for c in y} - {c.value for c in task.classes})
    if stray:
        raise ValueError(f"labels {stray} are not part of the {task.task} task")
    missing = [c.value for c in task.classes if c not in y]
    if missing:
        raise ValueError(f"no training samples for classes {missing}")
    Xb = np.hstack([X, np.ones((len(X), 1))])
    K = Xb @ Xb.T
    labels = np.array([task.index(c) for c in y])
    W = np.zeros((len(task.classes), X.shape[1]))
    b = np.zeros(len(task.classes))
    for k in range(len(task.classes)):
        rng = np.random.default_rng([seed, k])
        yk = np.where(labels == k, 1.0, -1.0)
        alpha, _ = dual_cd_binary(K, yk, C, rng, tol)
        w = Xb.T @ (alpha * yk)
        W[k], b[k] = w[:-1], w[-1]
    return LinearModel(W, b, task, C)


def predict(model: LinearModel, X: np.ndarray) -> list[IncidentClass]:
    """Argmax class per row; ties resolve to the earliest class in task order."""
    s = model.scores(X)
    return [model.task.classes[i] for i in s.argmax(axis=1)]


@dataclass
class Metrics:
    task: TaskSpec
    accuracy: float
    per_class: dict[IncidentClass, float]
    confusion: np.ndarray  # rows truth, columns prediction

    def to_dict(self) -> dict:
        return {
            "task": self.task.task,
            "classes": [c.value for c in self.task.classes],
            "accuracy": self.accuracy,
            "per_class_accuracy": {c.value: v for c, v in self.per_class.items()},
            "confusion": self.confusion.tolist(),
        }

    def report(self) -> str:
        names = [c.value for c in self.task.classes]
        width = max(len(n) for n in names)
        lines = [
            f"task: {self.task.task}",
            f"accuracy: {self.accuracy:.4f}",
            "per-class accuracy:",
        ]
        for c in self.task.classes:
            v = self.per_class[c]
            lines.append(f"  {c.value:<{width}}  {'n/a' if np.isnan(v) else f'{v:.4f}'}")
        lines.append(f"confusion ({len(names)}x{len(names)}, rows = truth):")
        for name, row in zip(names, self.confusion):
            lines.append(f"  {name:<{width}}  " + " ".join(f"{int(x):4d}" for x in row))
        return "\n".join(lines) + "\n"


def confusion_matrix(truth: Sequence[IncidentClass], pred: Sequence[IncidentClass], task: TaskSpec) -> np.ndarray:
    cm = np.zeros((len(task.classes), len(task.classes)), dtype=np.int64)
    for t, p in zip(truth, pred):
        cm[task.index(t), task.index(p)] += 1
    return cm


def metrics_from_predictions(truth: Sequence[IncidentClass], pred: Sequence[IncidentClass], task: TaskSpec) -> Metrics:
    if len(truth) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    cm = confusion_matrix(truth, pred, task)
    rows = cm.sum(axis=1)
    per_class = {
        c: (float(cm[i, i] / rows[i]) if rows[i] else float("nan")) for i, c in enumerate(task.classes)
    }
    return Metrics(task, float(np.trace(cm) / cm.sum()), per_class, cm)


def evaluate(model: LinearModel, X: np.ndarray, y: Sequence[IncidentClass]) -> Metrics:
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    return metrics_from_predictions(list(y), predict(model, X), model.task)


def write_metrics(metrics: Metrics, text_path: str | os.PathLike, json_path: str | os.PathLike | None = None, header: str = "") -> None:
    with open(text_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + metrics.report())
    if json_path is not None:
        with open(json_path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(metrics.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
