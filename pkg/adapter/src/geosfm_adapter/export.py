"""Export the engine's correspondence and prior files from an image set."""
from __future__ import annotations

import logging
import os
import tempfile
from dataclasses import dataclass, field

import cv2

from .backends import BackendError, load_backend
from .localizers import load_localizer

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
CORR_HEADER = "CVDSFM-CORR 1"
PRIOR_HEADER = "CVDSFM-PRIOR 1"


class AdapterError(RuntimeError):
    pass


@dataclass
class AdapterConfig:
    image_dir: str
    satellite_image: str | None = None
    feature_backend: str = "sift+mnn"
    localizer_backend: str = "none"
    max_keypoints: int = 4000
    score_floor: float = 0.0
    meters_per_pixel: float | None = None
    altitude_classes: dict = field(default_factory=dict)  # name -> class override


def _classify(name: str, overrides: dict) -> str:
    if name in overrides:
        return overrides[name]
    lowered = name.lower()
    for cls in ("aerial", "satellite", "ground"):
        if cls in lowered or lowered.startswith(cls[0] + "_"):
            return cls
    return "ground"


def _atomic_write(path: str, render) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            render(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def list_images(config: AdapterConfig) -> list[str]:
    if not os.path.isdir(config.image_dir):
        raise AdapterError(f"image directory {config.image_dir!r} does not exist")
    names = sorted(
        f
        for f in os.listdir(config.image_dir)
        if f.lower().endswith(IMAGE_EXTENSIONS)
    )
    if not names:
        raise AdapterError(f"no images found in {config.image_dir!r}")
    return names


def export_correspondences(config: AdapterConfig, out_path: str) -> dict:
    """Run the configured extractor/matcher pairwise and write the file.

    Returns per-stage counts for logging/tests. Unreadable images are skipped
    with a warning; an unresolvable backend is fatal.
    """
    backend = load_backend(config.feature_backend)
    names = list_images(config)
    images, sizes = {}, {}
    for name in names:
        img = cv2.imread(os.path.join(config.image_dir, name), cv2.IMREAD_GRAYSCALE)
        if img is None:
            logger.warning("skipping unreadable image %s", name)
            continue
        images[name] = img
        sizes[name] = (img.shape[1], img.shape[0])
    if len(images) < 2:
        raise AdapterError(f"need at least two readable images, got {len(images)}")

    kept = sorted(images)
    features = {}
    for name in kept:
        feats = backend.extract(images[name], config.max_keypoints)
        # the engine requires strictly in-bounds keypoints
        w, h = sizes[name]
        ok = (
            (feats.keypoints[:, 0] >= 0)
            & (feats.keypoints[:, 0] < w)
            & (feats.keypoints[:, 1] >= 0)
            & (feats.keypoints[:, 1] < h)
        )
        feats.keypoints = feats.keypoints[ok]
        feats.descriptors = feats.descriptors[ok]
        features[name] = feats
        logger.info("%s: %d keypoints", name, len(feats.keypoints))

    n_matches = 0
    pair_rows = []
    for i in range(len(kept)):
        for j in range(i + 1, len(kept)):
            pairs, scores = backend.match(features[kept[i]], features[kept[j]])
            for (ka, kb), score in zip(pairs, scores):
                if score < config.score_floor:
                    continue
                pair_rows.append((i, j, int(ka), int(kb), float(score)))
                n_matches += 1

    def render(fh):
        fh.write(f"{CORR_HEADER}\n")
        for vid, name in enumerate(kept):
            w, h = sizes[name]
            label = "".join(name.split())
            fh.write(f"V {vid} {label} {w} {h} {_classify(name, config.altitude_classes)}\n")
        for vid, name in enumerate(kept):
            for kid, (u, v) in enumerate(features[name].keypoints):
                fh.write(f"K {vid} {kid} {u:.12g} {v:.12g}\n")
        for va, vb, ka, kb, score in pair_rows:
            fh.write(f"M {va} {vb} {ka} {kb} {score:.12g}\n")

    _atomic_write(out_path, render)
    return {
        "views": len(kept),
        "keypoints": sum(len(f.keypoints) for f in features.values()),
        "matches": n_matches,
    }


def export_priors(config: AdapterConfig, out_path: str) -> dict:
    """Write per-image horizontal fixes from the configured localizer.

    Images the localizer rejects are omitted with a warning; with the "none"
    backend the file is written empty and the engine runs prior-free.
    """
    localizer = load_localizer(config.localizer_backend, config.meters_per_pixel)
    names = list_images(config)
    fixes = []
    for vid, name in enumerate(names):
        cls = _classify(name, config.altitude_classes)
        if cls == "satellite":
            continue  # the satellite image anchors the frame; no prior for it
        fix = localizer.localize(name, None)
        if fix is not None:
            fixes.append((vid, fix))

    def render(fh):
        fh.write(f"{PRIOR_HEADER}\n")
        for vid, fix in fixes:
            fh.write(
                f"P {vid} {fix.x:.12g} {fix.y:.12g} {fix.yaw:.12g} {fix.confidence:.12g}\n"
            )

    _atomic_write(out_path, render)
    return {"priors": len(fixes)}
