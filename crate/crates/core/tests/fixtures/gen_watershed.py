"""Regenerate the scikit-image watershed reference label maps.

Markers use the same grid layout as `grid_seeds` and the gradient is the
same forward-difference magnitude, so only the flooding is compared.
"""
import math

import numpy as np
from skimage.segmentation import watershed


def grid_seeds(w, h, n):
    cols = math.ceil(math.sqrt(n))
    rows = -(-n // cols)
    seeds = []
    for r in range(rows):
        in_row = min(cols, n - r * cols)
        y = min(int((r + 0.5) * h / rows), h - 1)
        for c in range(in_row):
            x = min(int((c + 0.5) * w / in_row), w - 1)
            if (x, y) not in seeds:
                seeds.append((x, y))
    return seeds


def gradient(img):
    dx = np.zeros_like(img)
    dy = np.zeros_like(img)
    dx[:, :-1] = img[:, 1:] - img[:, :-1]
    dy[:-1, :] = img[1:, :] - img[:-1, :]
    return np.sqrt(dx * dx + dy * dy)


def reference(img, n, compactness):
    h, w = img.shape
    markers = np.zeros((h, w), dtype=np.int32)
    for i, (x, y) in enumerate(grid_seeds(w, h, n)):
        markers[y, x] = i + 1
    labels = watershed(gradient(img.astype(np.float64)), markers, connectivity=1, compactness=compactness)
    return labels - 1


def dump(name, img, labels):
    with open(f"{name}.txt", "w") as f:
        h, w = img.shape
        f.write(f"{w} {h}\n")
        for row in img:
            f.write(" ".join(str(int(v)) for v in row) + "\n")
        for row in labels:
            f.write(" ".join(str(int(v)) for v in row) + "\n")


if __name__ == "__main__":
    flat = np.full((90, 90), 128, dtype=np.uint8)
    dump("watershed_flat_9", flat, reference(flat, 9, 10.0))

    ys, xs = np.mgrid[0:48, 0:64]
    wavy = np.round(128 + 100 * np.sin(xs / 7.0) * np.cos(ys / 5.0)).astype(np.uint8)
    dump("watershed_wavy_12", wavy, reference(wavy, 12, 0.5))
