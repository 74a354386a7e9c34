"""Training-free threshold detector used as a reference on bright-target scenes."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .metrics import Box


def threshold_detect(image: np.ndarray, thresh: float = 0.5, min_pixels: int = 4) -> list[tuple[Box, float]]:
    """Connected components of the thresholded gray image, scored by elongation.

    A component's score is min(1, (height / width) / 3): upright elongated
    shapes score high, round distractors score about 1/3.
    """
    gray = np.asarray(image, dtype=np.float64).mean(axis=0)
    labels, n = ndimage.label(gray > thresh)
    dets = []
    for idx, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        if int((labels[sl] == idx).sum()) < min_pixels:
            continue
        ys, xs = sl
        w, h = xs.stop - xs.start, ys.stop - ys.start
        dets.append(((float(xs.start), float(ys.start), float(w), float(h)), min(1.0, (h / w) / 3.0)))
    return dets
