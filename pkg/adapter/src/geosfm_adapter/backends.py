"""Feature extraction and matching backends.

Classical OpenCV backends ship built in ("sift+mnn", "orb+mnn"). Learned
extractors/matchers plug in through the same interface by registering a
factory; their weights and quality claims live with the third-party models,
not here.
"""
from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np


class BackendError(RuntimeError):
    """Backend could not be resolved or loaded (fatal)."""


@dataclass
class Features:
    keypoints: np.ndarray  # (N, 2) pixel positions
    descriptors: np.ndarray


class ClassicalBackend:
    """detect + mutual-nearest-neighbor ratio matching."""

    def __init__(self, detector, norm, ratio: float = 0.8):
        self._detector = detector
        self._norm = norm
        self._ratio = ratio

    def extract(self, image: np.ndarray, max_keypoints: int) -> Features:
        kps, desc = self._detector.detectAndCompute(image, None)
        if not kps:
            return Features(np.zeros((0, 2)), np.zeros((0, 0)))
        order = np.argsort([-k.response for k in kps])[:max_keypoints]
        pts = np.array([kps[i].pt for i in order])
        return Features(pts, desc[order])

    def match(self, a: Features, b: Features) -> tuple[np.ndarray, np.ndarray]:
        """(M, 2) index pairs and scores in (0, 1]."""
        if len(a.keypoints) == 0 or len(b.keypoints) == 0:
            return np.zeros((0, 2), dtype=int), np.zeros(0)
        matcher = cv2.BFMatcher(self._norm)
        fwd = matcher.knnMatch(a.descriptors, b.descriptors, k=2)
        best_back = {
            m[0].queryIdx: m[0].trainIdx for m in matcher.knnMatch(b.descriptors, a.descriptors, k=1) if m
        }
        pairs, scores = [], []
        for cands in fwd:
            if len(cands) < 2:
                continue
            first, second = cands
            if first.distance >= self._ratio * second.distance:
                continue
            if best_back.get(first.trainIdx) != first.queryIdx:
                continue  # not mutual
            pairs.append((first.queryIdx, first.trainIdx))
            # ratio-based confidence: 1 at d1 << d2, -> 0 near the ratio gate
            scores.append(1.0 - first.distance / max(second.distance, 1e-9))
        if not pairs:
            return np.zeros((0, 2), dtype=int), np.zeros(0)
        return np.array(pairs, dtype=int), np.clip(np.array(scores), 1e-6, 1.0)


def _sift_factory():
    return ClassicalBackend(cv2.SIFT_create(), cv2.NORM_L2)


def _orb_factory():
    return ClassicalBackend(cv2.ORB_create(nfeatures=8000), cv2.NORM_HAMMING)


_REGISTRY = {
    "sift+mnn": _sift_factory,
    "orb+mnn": _orb_factory,
}


def register_backend(name: str, factory) -> None:
    _REGISTRY[name] = factory


def load_backend(name: str):
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise BackendError(
            f"unknown feature backend {name!r}; available: {sorted(_REGISTRY)}"
        ) from None
    try:
        return factory()
    except Exception as exc:  # construction failure is fatal per contract
        raise BackendError(f"backend {name!r} failed to load: {exc}") from exc
