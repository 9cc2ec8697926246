"""Dynamic K-nearest-neighbor pixel graphs built from hidden feature maps.

Neighbors are selected by Euclidean distance in feature space, excluding the
pixel itself and its 8-connected neighborhood (those are covered by the local
3x3 convolution). Training uses all pairwise distances inside the patch;
inference restricts candidates to a search window clamped at image borders.
Ties are broken toward the smallest row-major pixel index so graphs are
reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import incidence


@dataclass
class PixelGraph:
    """Per-pixel non-local neighbor lists with edge labels H_j - H_i.

    Edges are stored flat, sorted by destination pixel: edge e points
    src[e] -> dst[e]. `labels[e]` is the feature difference for the map the
    graph was last labeled with.
    """

    height: int
    width: int
    k: int
    mode: str  # "train" | "infer"
    window: int | None
    src: np.ndarray  # (E,) flat pixel index of the neighbor j
    dst: np.ndarray  # (E,) flat pixel index of the center i, ascending
    counts: np.ndarray  # (N,) neighbors per pixel
    labels: np.ndarray | None = None  # (E, F)
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_pixels(self):
        return self.height * self.width

    @property
    def n_edges(self):
        return len(self.src)

    @property
    def offsets(self):
        off = self._cache.get("offsets")
        if off is None:
            off = np.zeros(self.n_pixels + 1, dtype=np.int64)
            np.cumsum(self.counts, out=off[1:])
            self._cache["offsets"] = off
        return off

    def neighbor_lists(self):
        """List of per-pixel neighbor index arrays (ascending flat index)."""
        off = self.offsets
        return [self.src[off[i] : off[i + 1]] for i in range(self.n_pixels)]

    def scatter(self, which, dtype):
        """Cached (N, E) incidence matrix for src or dst scatter-adds."""
        key = (which, np.dtype(dtype).str)
        mat = self._cache.get(key)
        if mat is None:
            idx = self.src if which == "src" else self.dst
            mat = incidence(idx, self.n_pixels, dtype)
            self._cache[key] = mat
        return mat


def _local_exclusion_pairs(h, w):
    # (center, excluded) flat-index pairs: self plus in-bounds 8-neighborhood
    ys, xs = np.mgrid[0:h, 0:w]
    ys = ys.reshape(-1)
    xs = xs.reshape(-1)
    rows = []
    cols = []
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            ny, nx = ys + dy, xs + dx
            ok = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
            rows.append(np.flatnonzero(ok))
            cols.append(ny[ok] * w + nx[ok])
    return np.concatenate(rows), np.concatenate(cols)


def _select_k_smallest(dist, k):
    """Row-wise mask of the k smallest finite entries, ties to lowest column."""
    n_rows, n_cols = dist.shape
    if k <= 0:
        return np.zeros(dist.shape, dtype=bool)
    if k >= n_cols:
        return np.isfinite(dist)
    kth = np.partition(dist, k - 1, axis=1)[:, k - 1]
    finite_kth = np.isfinite(kth)
    less = dist < kth[:, None]
    mask = less.copy()
    c = less.sum(axis=1)
    # rows short of k take the lowest-index entries equal to the kth value
    need = np.flatnonzero(finite_kth & (c < k))
    if len(need):
        eq = (dist[need] == kth[need, None]) & np.isfinite(dist[need])
        take = (k - c[need])[:, None]
        mask[need] |= eq & (np.cumsum(eq, axis=1) <= take)
    # rows whose kth candidate is inf keep every finite entry
    short = np.flatnonzero(~finite_kth)
    if len(short):
        mask[short] = np.isfinite(dist[short])
    return mask


def _graph_from_mask(mask, h, w, k, mode, window, feats):
    dst, src = np.nonzero(mask)
    counts = mask.sum(axis=1).astype(np.int64)
    g = PixelGraph(
        height=h,
        width=w,
        k=k,
        mode=mode,
        window=window,
        src=src.astype(np.int64),
        dst=dst.astype(np.int64),
        counts=counts,
    )
    g.labels = feats[g.src] - feats[g.dst]
    return g


def build_graph_train(features, k):
    """KNN graph over the whole patch from all pairwise feature distances."""
    features = np.asarray(features)
    h, w, _ = features.shape
    return _build_all_pairs(features, k, "train", None)


def _build_all_pairs(features, k, mode, window):
    h, w, f = features.shape
    n = h * w
    feats = features.reshape(n, f)
    if k <= 0:
        empty = np.zeros(0, dtype=np.int64)
        g = PixelGraph(h, w, k, mode, window, empty, empty, np.zeros(n, np.int64))
        g.labels = np.zeros((0, f), dtype=feats.dtype)
        return g
    sq = np.einsum("nf,nf->n", feats, feats)
    dist = sq[:, None] + sq[None, :] - 2.0 * (feats @ feats.T)
    np.maximum(dist, 0.0, out=dist)
    rows, cols = _local_exclusion_pairs(h, w)
    dist[rows, cols] = np.inf
    mask = _select_k_smallest(dist, k)
    return _graph_from_mask(mask, h, w, k, mode, window, feats)


def build_graph_infer(features, k, window):
    """KNN graph with candidates limited to a window clamped at the borders."""
    features = np.asarray(features)
    if window % 2 == 0 or window < 3:
        raise ValueError(f"search window must be odd and >= 3, got {window}")
    h, w, f = features.shape
    r = (window - 1) // 2
    if r >= max(h, w) - 1:
        # window covers the whole image: identical to the all-pairs rule
        return _build_all_pairs(features, k, "infer", window)
    n = h * w
    fmap = features
    if k <= 0:
        empty = np.zeros(0, dtype=np.int64)
        g = PixelGraph(h, w, k, "infer", window, empty, empty, np.zeros(n, np.int64))
        g.labels = np.zeros((0, f), dtype=features.dtype)
        return g
    offs = [
        (dy, dx)
        for dy in range(-r, r + 1)
        for dx in range(-r, r + 1)
        if max(abs(dy), abs(dx)) > 1
    ]
    dist = np.full((h, w, len(offs)), np.inf, dtype=features.dtype)
    for j, (dy, dx) in enumerate(offs):
        ys0, ys1 = max(0, -dy), min(h, h - dy)
        xs0, xs1 = max(0, -dx), min(w, w - dx)
        if ys0 >= ys1 or xs0 >= xs1:
            continue  # offset leaves the image entirely
        a = fmap[ys0:ys1, xs0:xs1]
        b = fmap[ys0 + dy : ys1 + dy, xs0 + dx : xs1 + dx]
        d = a - b
        dist[ys0:ys1, xs0:xs1, j] = np.einsum("ywf,ywf->yw", d, d)
    dist = dist.reshape(n, len(offs))
    mask = _select_k_smallest(dist, k)
    dst, oidx = np.nonzero(mask)
    delta = np.array([dy * w + dx for dy, dx in offs], dtype=np.int64)
    src = dst + delta[oidx]
    counts = mask.sum(axis=1).astype(np.int64)
    feats = features.reshape(n, f)
    g = PixelGraph(
        height=h,
        width=w,
        k=k,
        mode="infer",
        window=window,
        src=src,
        dst=dst.astype(np.int64),
        counts=counts,
    )
    g.labels = feats[g.src] - feats[g.dst]
    return g


def edge_labels(features, graph):
    """Relabel a graph's edges as H_j - H_i for a (compatible) feature map."""
    features = np.asarray(features)
    h, w, f = features.shape
    if (h, w) != (graph.height, graph.width):
        raise ValueError(
            f"feature map {h}x{w} does not match graph {graph.height}x{graph.width}"
        )
    feats = features.reshape(h * w, f)
    if graph.n_edges and (graph.src.max() >= h * w or graph.dst.max() >= h * w):
        raise IndexError("graph indices out of range for feature map")
    relabeled = PixelGraph(
        height=graph.height,
        width=graph.width,
        k=graph.k,
        mode=graph.mode,
        window=graph.window,
        src=graph.src,
        dst=graph.dst,
        counts=graph.counts,
        _cache=graph._cache,
    )
    relabeled.labels = feats[graph.src] - feats[graph.dst]
    return relabeled


@dataclass
class BatchedGraph:
    """Per-image graphs merged into one flat edge list over B*N pixels."""

    graphs: list
    n_pixels: int  # total over the batch
    src: np.ndarray
    dst: np.ndarray
    counts: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_edges(self):
        return len(self.src)

    def scatter(self, which, dtype):
        key = (which, np.dtype(dtype).str)
        mat = self._cache.get(key)
        if mat is None:
            idx = self.src if which == "src" else self.dst
            mat = incidence(idx, self.n_pixels, dtype)
            self._cache[key] = mat
        return mat


def local_mean_features(image, size=5):
    """(H, W, 1) map of local window means, mirror-padded at the borders.

    This is the pixel-space recipe for "true" similarity graphs: on a clean
    image, nearby local means identify self-similar regions.
    """
    image = np.asarray(image)
    if image.ndim == 3:
        image = image[..., 0]
    p = size // 2
    padded = np.pad(image, p, mode="symmetric")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (size, size))
    return windows.mean(axis=(2, 3))[..., None]


def merge_graphs(graphs):
    """Concatenate per-image graphs, offsetting pixel ids by image index."""
    srcs, dsts, counts = [], [], []
    base = 0
    for g in graphs:
        srcs.append(g.src + base)
        dsts.append(g.dst + base)
        counts.append(g.counts)
        base += g.n_pixels
    return BatchedGraph(
        graphs=list(graphs),
        n_pixels=base,
        src=np.concatenate(srcs) if srcs else np.zeros(0, np.int64),
        dst=np.concatenate(dsts) if dsts else np.zeros(0, np.int64),
        counts=np.concatenate(counts) if counts else np.zeros(0, np.int64),
    )
