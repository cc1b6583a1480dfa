"""Cross-view localizer backends.

A localizer maps each ground/aerial image to a horizontal fix (x, y, yaw) in
the satellite-anchored ENU frame: x east, y north, meters, yaw CCW from +X.

Built-ins:

* ``none`` — no localizer; the prior file is written empty (the engine then
  runs in its prior-free mode).
* ``sidecar:<path>`` — reads fixes produced by an external localizer from a
  YAML file mapping image names to pixel coordinates in the satellite image
  plus a heading. Pixel coordinates are anchored to meters with the satellite
  ground-sample distance (meters per pixel), which must be given explicitly.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import yaml

logger = logging.getLogger(__name__)


class LocalizerError(RuntimeError):
    pass


@dataclass
class HorizontalFix:
    x: float
    y: float
    yaw: float
    confidence: float = 1.0


class NoLocalizer:
    def localize(self, image_name: str, image) -> HorizontalFix | None:
        return None


class SidecarLocalizer:
    """External fixes keyed by image name.

    Sidecar format (YAML): ``anchor: {width: int, height: int}`` plus
    ``fixes: {name: {u: px, v: px, yaw_deg: float, confidence: float}}``.
    The satellite image center is the ENU origin; +u is east, +v is image-down
    (south), so north = -(v - height/2) * meters_per_pixel.
    """

    def __init__(self, path: str, meters_per_pixel: float):
        if meters_per_pixel <= 0:
            raise LocalizerError("meters_per_pixel must be positive")
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        try:
            self._width = float(data["anchor"]["width"])
            self._height = float(data["anchor"]["height"])
            self._fixes = dict(data["fixes"])
        except (KeyError, TypeError) as exc:
            raise LocalizerError(f"{path}: malformed sidecar file ({exc})") from exc
        self._mpp = meters_per_pixel

    def localize(self, image_name: str, image) -> HorizontalFix | None:
        fix = self._fixes.get(image_name)
        if fix is None:
            logger.warning("localizer has no fix for %s; omitting its prior", image_name)
            return None
        x = (float(fix["u"]) - self._width / 2.0) * self._mpp
        y = -(float(fix["v"]) - self._height / 2.0) * self._mpp
        yaw = math.radians(float(fix.get("yaw_deg", 0.0)))
        yaw = math.atan2(math.sin(yaw), math.cos(yaw))
        return HorizontalFix(x, y, yaw, float(fix.get("confidence", 1.0)))


def load_localizer(spec: str, meters_per_pixel: float | None):
    if spec == "none":
        return NoLocalizer()
    if spec.startswith("sidecar:"):
        if meters_per_pixel is None:
            raise LocalizerError(
                "sidecar localizer needs --meters-per-pixel to anchor pixel fixes"
            )
        return SidecarLocalizer(spec.split(":", 1)[1], meters_per_pixel)
    raise LocalizerError(f"unknown localizer backend {spec!r}")
