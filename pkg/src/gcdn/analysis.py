"""Feature-analysis procedures: receptive-field tracing, feature-space
distance maps, feature-map spectra, and edge-prediction accuracy against the
pixel-space "true" graph. Every report is reproducible bit-for-bit under a
fixed seed and checkpoint and is emitted as 8-bit heatmaps plus a TSV table.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .ecc import memory_report
from .graphs import build_graph_infer, local_mean_features
from .imageio import save_pgm
from .metrics import add_awgn
from .network import Checkpoint, forward, model_from_checkpoint

REPORT_KINDS = (
    "receptive-field",
    "distance-map",
    "feature-dft",
    "edge-accuracy",
    "memory-report",
)


@dataclass
class AnalysisReport:
    kind: str
    header: list
    rows: list
    arrays: dict = field(default_factory=dict)  # name -> 2-D payload array

    def validate(self):
        if self.kind not in REPORT_KINDS:
            raise ValueError(f"unknown report kind {self.kind!r}")
        for name, arr in self.arrays.items():
            if np.asarray(arr).ndim != 2:
                raise ValueError(f"payload {name!r} must be 2-D, got {arr.shape}")
        for row in self.rows:
            if len(row) != len(self.header):
                raise ValueError("row width does not match header")
        return self

    def save(self, outdir, stem=None):
        """Write the TSV table and one normalized PGM (+range sidecar) per
        payload array; returns the written paths."""
        self.validate()
        os.makedirs(outdir, exist_ok=True)
        stem = stem or self.kind
        paths = []
        tsv = os.path.join(outdir, f"{stem}.tsv")
        write_tsv(tsv, self.header, self.rows)
        paths.append(tsv)
        for name, arr in self.arrays.items():
            base = os.path.join(outdir, f"{stem}.{name}")
            paths.extend(write_heatmap(base, np.asarray(arr)))
        return paths


def write_tsv(path, header, rows):
    with open(path, "w", newline="\n") as f:
        f.write("\t".join(str(h) for h in header) + "\n")
        for row in rows:
            f.write("\t".join(_fmt(v) for v in row) + "\n")


def _fmt(v):
    if isinstance(v, float):
        if np.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def write_heatmap(base, arr):
    """Min-max normalized 8-bit PGM plus a sidecar carrying the raw range."""
    finite = np.isfinite(arr)
    lo = float(arr[finite].min()) if finite.any() else 0.0
    hi = float(arr[finite].max()) if finite.any() else 0.0
    span = hi - lo
    norm = np.zeros_like(arr, dtype=np.float64)
    if span > 0:
        norm[finite] = (arr[finite] - lo) / span
    elif finite.any():
        norm[finite] = 0.0
    norm[~finite] = 1.0
    pgm = base + ".pgm"
    save_pgm(pgm, norm)
    sidecar = base + ".range.txt"
    with open(sidecar, "w", newline="\n") as f:
        f.write(f"min={lo!r}\nmax={hi!r}\n")
    return [pgm, sidecar]


# ---------------------------------------------------------------------------
# helpers


def _as_model(model_or_ckpt, dtype=np.float64):
    if isinstance(model_or_ckpt, Checkpoint):
        return model_from_checkpoint(model_or_ckpt, dtype=dtype)
    return model_or_ckpt


def _traced_forward(model, image, window=None):
    trace = {}
    forward(model, image, graph_mode="infer", window=window, trace=trace)
    return trace


def dilate_mask(mask, radius):
    """Chebyshev (square) dilation of a boolean mask by `radius`."""
    if radius <= 0:
        return mask.copy()
    padded = np.pad(mask, radius, mode="constant")
    win = 2 * radius + 1
    view = np.lib.stride_tricks.sliding_window_view(padded, (win, win))
    return view.any(axis=(2, 3))


def resolve_layer_span(trace, spec):
    """Turn 'a:b' indices or 'name:name' into a half-open layer range."""
    layers = trace["layers"]
    if spec is None:
        return 0, len(layers)
    names = [e["name"] for e in layers]
    lo, _, hi = spec.partition(":")

    def resolve(token, default):
        token = token.strip()
        if not token:
            return default
        if token.lstrip("-").isdigit():
            return int(token)
        if token in names:
            return names.index(token)
        raise ValueError(f"unknown layer {token!r}; known: {names}")

    start = resolve(lo, 0)
    end = resolve(hi, len(layers) - 1) + 1 if ":" in spec else start + 1
    if not 0 <= start < end <= len(layers):
        raise ValueError(f"invalid layer range {spec!r}")
    return start, end


# ---------------------------------------------------------------------------
# receptive field


def _trace_one_layer(trace, entry, mask, image_index):
    if entry["kind"] == "conv":
        return dilate_mask(mask, entry["ksize"] // 2)
    g = trace["graphs"][entry["graph_idx"]][image_index]
    h, w = mask.shape
    hop = np.zeros(h * w, dtype=bool)
    flat = mask.reshape(-1)
    sel = flat[g.dst]
    hop[g.src[sel]] = True
    return dilate_mask(mask, 1) | hop.reshape(h, w)


def trace_receptive_field(trace, pixel, layer_range=None, image_index=0):
    """Backward dependency closure of one output pixel through a layer span:
    kxk local dilation per conv, plus graph-edge hops per graph-conv layer.

    The preprocessing branches run in parallel from the input, so the
    closure through them is the union over branches, not a composition.
    Selection is piecewise-constant, so the traced mask is exactly the set
    of inputs the output depends on for the built graphs.
    """
    layers = trace["layers"]
    if layer_range is None:
        layer_range = (0, len(layers))
    start, end = layer_range
    g0 = trace["graphs"][0][image_index]
    h, w = g0.height, g0.width
    y, x = pixel
    if not (0 <= y < h and 0 <= x < w):
        raise ValueError(f"pixel {pixel} outside {h}x{w} image")
    mask = np.zeros((h, w), dtype=bool)
    mask[y, x] = True
    span = layers[start:end]
    trunk = [e for e in span if e.get("segment", "trunk") == "trunk"]
    for entry in reversed(trunk):
        mask = _trace_one_layer(trace, entry, mask, image_index)
    branch_entries = [e for e in span if e.get("segment", "trunk") != "trunk"]
    if not branch_entries:
        return mask
    segments = {}
    for e in branch_entries:
        segments.setdefault(e["segment"], []).append(e)
    out = np.zeros_like(mask)
    for seg_entries in segments.values():
        seg_mask = mask
        for entry in reversed(seg_entries):
            seg_mask = _trace_one_layer(trace, entry, seg_mask, image_index)
        out |= seg_mask
    return out


def analyze_receptive_field(model_or_ckpt, image, pixel, layers=None, window=None):
    model = _as_model(model_or_ckpt)
    trace = _traced_forward(model, image, window)
    span = resolve_layer_span(trace, layers)
    mask = trace_receptive_field(trace, pixel, span)
    names = [e["name"] for e in trace["layers"][span[0] : span[1]]]
    rows = [[pixel[0], pixel[1], names[0], names[-1], int(mask.sum()), mask.size]]
    return AnalysisReport(
        kind="receptive-field",
        header=["pixel_y", "pixel_x", "first_layer", "last_layer", "mask_pixels", "total_pixels"],
        rows=rows,
        arrays={"mask": mask.astype(np.float64)},
    ).validate()


# ---------------------------------------------------------------------------
# distance map


def analyze_distance_map(model_or_ckpt, image, pixel, layer=0, window=None):
    """Euclidean feature distances from one pixel over its search window at
    the feature map a chosen graph was built from."""
    model = _as_model(model_or_ckpt)
    trace = _traced_forward(model, image, window)
    feats_all = trace["graph_feats"]
    if not 0 <= layer < len(feats_all):
        raise ValueError(
            f"layer {layer} out of range; {len(feats_all)} graph layers exist"
        )
    feats = feats_all[layer][0]
    h, w, _ = feats.shape
    y, x = pixel
    if not (0 <= y < h and 0 <= x < w):
        raise ValueError(f"pixel {pixel} outside {h}x{w} image")
    wr = ((window or model.config.window) - 1) // 2
    dist = np.full((h, w), np.nan)
    y0, y1 = max(0, y - wr), min(h, y + wr + 1)
    x0, x1 = max(0, x - wr), min(w, x + wr + 1)
    block = feats[y0:y1, x0:x1] - feats[y, x]
    dist[y0:y1, x0:x1] = np.sqrt(np.einsum("ijf,ijf->ij", block, block))
    rows = [[pixel[0], pixel[1], layer, float(np.nanmin(dist)), float(np.nanmax(dist))]]
    return AnalysisReport(
        kind="distance-map",
        header=["pixel_y", "pixel_x", "layer", "min_distance", "max_distance"],
        rows=rows,
        arrays={"distances": dist},
    ).validate()


# ---------------------------------------------------------------------------
# feature-map spectra


def lowfreq_energy_ratio(channel):
    """Energy inside the centered quarter-band over total spectral energy."""
    h, w = channel.shape
    spec = np.fft.fftshift(np.fft.fft2(channel))
    power = np.abs(spec) ** 2
    fy = np.fft.fftshift(np.fft.fftfreq(h))
    fx = np.fft.fftshift(np.fft.fftfreq(w))
    band = (np.abs(fy)[:, None] < 0.25) & (np.abs(fx)[None, :] < 0.25)
    total = power.sum()
    if total == 0:
        return 1.0
    return float(power[band].sum() / total)


def analyze_feature_dft(model_or_ckpt, image, block, window=None, max_maps=8):
    """Log-magnitude spectra of a block's output feature maps plus the
    per-channel low-frequency energy ratio."""
    model = _as_model(model_or_ckpt)
    trace = _traced_forward(model, image, window)
    outputs = trace["block_outputs"]
    if block not in outputs:
        raise ValueError(f"unknown block {block!r}; available: {sorted(outputs)}")
    feats = outputs[block][0]  # (H, W, C)
    rows = []
    arrays = {}
    for c in range(feats.shape[-1]):
        channel = feats[:, :, c]
        ratio = lowfreq_energy_ratio(channel)
        rows.append([block, c, ratio])
        if c < max_maps:
            spec = np.fft.fftshift(np.fft.fft2(channel))
            arrays[f"logmag_c{c}"] = np.log1p(np.abs(spec))
    return AnalysisReport(
        kind="feature-dft",
        header=["block", "channel", "lowfreq_ratio"],
        rows=rows,
        arrays=arrays,
    ).validate()


def mean_lowfreq_ratio(report):
    return float(np.mean([row[2] for row in report.rows]))


# ---------------------------------------------------------------------------
# edge-prediction accuracy


def true_graph(clean_image, k_true, window):
    """KNN graph on 5x5 local means of the clean image (pixel-space truth)."""
    feats = local_mean_features(np.asarray(clean_image, dtype=np.float64))
    return build_graph_infer(feats, k_true, window)


def _edge_set(graph):
    return set(map(tuple, np.stack([graph.dst, graph.src], axis=1).tolist()))


def edge_overlap_percent(true_g, pred_g):
    t = _edge_set(true_g)
    if not t:
        return 100.0
    p = _edge_set(pred_g)
    return 100.0 * len(t & p) / len(t)


def analyze_edge_accuracy(
    model_or_ckpt, clean_image, k_true_values=(4, 8, 16), sigma=None, seed=0,
    window=None,
):
    """Percentage of true-graph edges found in each hidden layer's graph.

    The hidden graphs come from denoising a noisy version of the clean image
    (noise level from the model config unless overridden).
    """
    model = _as_model(model_or_ckpt)
    if sigma is None:
        sigma = model.config.sigma
    noisy = add_awgn(np.asarray(clean_image, dtype=np.float64), sigma, seed=seed)
    trace = _traced_forward(model, noisy, window)
    win = window or model.config.window
    truths = {k: true_graph(clean_image, k, win) for k in k_true_values}
    rows = []
    for entry in trace["layers"]:
        if entry["kind"] != "gconv":
            continue
        pred = trace["graphs"][entry["graph_idx"]][0]
        accs = [edge_overlap_percent(truths[k], pred) for k in k_true_values]
        rows.append([entry["name"]] + accs)
    return AnalysisReport(
        kind="edge-accuracy",
        header=["layer"] + [f"acc_k{k}" for k in k_true_values],
        rows=rows,
    ).validate()


# ---------------------------------------------------------------------------
# memory report


def memory_report_analysis(batch, n_pixels, k, f_in, f_out=None, r=1):
    full, low = memory_report(batch, n_pixels, k, f_in, f_out, r)
    return AnalysisReport(
        kind="memory-report",
        header=["batch", "pixels", "knn", "f_in", "f_out", "rank", "full_bytes", "lowrank_bytes"],
        rows=[[batch, n_pixels, k, f_in, f_out if f_out else f_in, r, full, low]],
    ).validate()
