"""Command-line mirror of the adapter configuration."""
from __future__ import annotations

import argparse
import logging
import sys

from .backends import BackendError
from .export import AdapterConfig, AdapterError, export_correspondences, export_priors
from .localizers import LocalizerError


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s: %(message)s")
    ap = argparse.ArgumentParser(
        prog="geosfm-adapter",
        description="Export correspondence/prior files for the geosfm engine",
    )
    ap.add_argument("--images", required=True, help="directory of input images")
    ap.add_argument("--out-corr", required=True, help="correspondence file to write")
    ap.add_argument("--out-priors", default=None, help="prior file to write (optional)")
    ap.add_argument("--backend", default="sift+mnn", help="feature backend id")
    ap.add_argument(
        "--localizer", default="none", help="localizer backend id (none, sidecar:<path>)"
    )
    ap.add_argument("--satellite", default=None, help="satellite image path")
    ap.add_argument("--meters-per-pixel", type=float, default=None,
                    help="satellite ground-sample distance (anchors localizer pixels)")
    ap.add_argument("--max-keypoints", type=int, default=4000)
    ap.add_argument("--score-floor", type=float, default=0.0)
    args = ap.parse_args(argv)

    config = AdapterConfig(
        image_dir=args.images,
        satellite_image=args.satellite,
        feature_backend=args.backend,
        localizer_backend=args.localizer,
        max_keypoints=args.max_keypoints,
        score_floor=args.score_floor,
        meters_per_pixel=args.meters_per_pixel,
    )
    try:
        stats = export_correspondences(config, args.out_corr)
        print(
            f"wrote {args.out_corr}: {stats['views']} views, "
            f"{stats['keypoints']} keypoints, {stats['matches']} matches"
        )
        if args.out_priors:
            pstats = export_priors(config, args.out_priors)
            print(f"wrote {args.out_priors}: {pstats['priors']} priors")
    except (AdapterError, BackendError, LocalizerError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
