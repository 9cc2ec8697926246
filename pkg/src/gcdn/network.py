"""The full denoiser: multiscale preprocessing branches, a highpass-flavored
block, residual lowpass-flavored blocks, and a graph-convolutional projection
back to image space, wrapped in a global noise-estimating residual.

Every block rebuilds its pixel graph once from the features entering its
first graph-convolutional layer and shares it across the block's three
graph-conv layers. All layers are followed by batch norm and leaky ReLU
except the final projection.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, GradTape, Tensor, adam_step, mse
from .data import sample_patch_batch
from .ecc import EccParams, graph_conv_layer_t, init_ecc
from .graphs import build_graph_infer, build_graph_train, merge_graphs

BRANCH_FILTER_SIZES = (3, 5, 7)
GCONVS_PER_BLOCK = 3
CONVS_PER_BRANCH = 3


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    """Architecture and training hyperparameters.

    Defaults are desk-scale: they train to a useful denoiser in tens of
    minutes on one CPU core. full_scale_config() switches to the full-size
    protocol (132 features, K=16, 800k iterations with the slower schedule).
    """

    features: int = 48
    branch_features: int = 16
    lpf_blocks: int = 1
    knn: int = 4
    window: int = 21
    delta: float = 10.0
    rank: int = 4
    shifts: int = 3
    lr_start: float = 1e-3
    lr_end: float = 1e-4
    iters: int = 5000
    batch: int = 4
    patch: int = 20
    sigma: float = 25.0
    seed: int = 0
    attention_only: bool = False

    def validate(self):
        if 3 * self.branch_features != self.features:
            raise ConfigError(
                f"3*branch_features must equal features: "
                f"3*{self.branch_features} != {self.features}"
            )
        if (self.rank * self.features) % self.shifts != 0:
            raise ConfigError(
                f"shifts must divide rank*features: "
                f"{self.shifts} does not divide {self.rank * self.features}"
            )
        if self.window % 2 == 0 or self.window < 3:
            raise ConfigError(f"window must be odd and >= 3, got {self.window}")
        if self.knn < 0:
            raise ConfigError(f"knn must be >= 0, got {self.knn}")
        if not 1 <= self.rank <= self.branch_features:
            raise ConfigError(
                f"rank must lie in [1, branch_features={self.branch_features}], "
                f"got {self.rank}"
            )
        if self.lpf_blocks < 1:
            raise ConfigError(f"lpf_blocks must be >= 1, got {self.lpf_blocks}")
        if self.delta <= 0:
            raise ConfigError(f"delta must be positive, got {self.delta}")
        if self.lr_start <= 0 or self.lr_end <= 0:
            raise ConfigError("learning rates must be positive")
        if self.patch < 3:
            raise ConfigError(f"patch must be >= 3, got {self.patch}")
        if self.batch < 1 or self.iters < 0 or self.sigma < 0:
            raise ConfigError("batch >= 1, iters >= 0, sigma >= 0 required")
        return self

    def to_kv(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = int(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_kv(cls, text):
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#") or "=" not in line:
                continue
            key, val = line.split("=", 1)
            key, val = key.strip(), val.strip()
            if key not in known:
                continue
            typ = known[key].type
            if typ in ("int", int):
                kwargs[key] = int(val)
            elif typ in ("float", float):
                kwargs[key] = float(val)
            elif typ in ("bool", bool):
                kwargs[key] = bool(int(val))
            else:
                kwargs[key] = val
        return cls(**kwargs)


def full_scale_config(**overrides):
    """The full-scale hyperparameters reported for the trained models."""
    cfg = ModelConfig(
        features=132,
        branch_features=44,
        lpf_blocks=3,
        knn=16,
        window=43,
        delta=10.0,
        rank=11,
        shifts=3,
        lr_start=1e-4,
        lr_end=1e-5,
        iters=800_000,
        batch=8,
        patch=42,
    )
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg.validate()


# ---------------------------------------------------------------------------
# layers


class Conv2dLayer:
    def __init__(self, ksize, cin, cout, rng, dtype, bias=True):
        std = np.sqrt(2.0 / (ksize * ksize * cin + ksize * ksize * cout))
        self.kernel = ad.parameter(
            rng.normal(0, std, (ksize, ksize, cin, cout)), dtype=dtype
        )
        self.bias = ad.parameter(np.zeros(cout), dtype=dtype) if bias else None

    def __call__(self, x):
        return ad.conv2d(x, self.kernel, self.bias)

    def named_parameters(self, prefix):
        out = [(prefix + "kernel", self.kernel)]
        if self.bias is not None:
            out.append((prefix + "bias", self.bias))
        return out


class BatchNormLayer:
    def __init__(self, channels, dtype, eps=1e-5, momentum=0.9):
        self.gamma = ad.parameter(np.ones(channels), dtype=dtype)
        self.beta = ad.parameter(np.zeros(channels), dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = eps
        self.momentum = momentum

    def __call__(self, x, mode, update_running=None):
        out, mu, var = ad.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            mode, self.eps,
        )
        if mode == "train" and (update_running is None or update_running):
            m = self.running_mean.dtype.type(self.momentum)
            self.running_mean = m * self.running_mean + (1 - m) * mu.astype(
                self.running_mean.dtype
            )
            self.running_var = m * self.running_var + (1 - m) * var.astype(
                self.running_var.dtype
            )
        return out

    def named_parameters(self, prefix):
        return [(prefix + "gamma", self.gamma), (prefix + "beta", self.beta)]


@dataclass
class Branch:
    convs: list
    bns: list
    gconv: EccParams
    gbn: BatchNormLayer


@dataclass
class Block:
    conv: Conv2dLayer
    bn: BatchNormLayer
    gconvs: list
    gbns: list
    residual: bool


@dataclass
class Model:
    config: ModelConfig
    dtype: np.dtype
    branches: list
    hpf: Block
    lpfs: list
    final: EccParams

    def named_parameters(self):
        out = []
        for i, br in enumerate(self.branches):
            for j, (conv, bn) in enumerate(zip(br.convs, br.bns)):
                out += conv.named_parameters(f"pre.b{i}.conv{j}.")
                out += bn.named_parameters(f"pre.b{i}.bn{j}.")
            out += br.gconv.named_parameters(f"pre.b{i}.gconv.")
            out += br.gbn.named_parameters(f"pre.b{i}.gbn.")
        blocks = [("hpf", self.hpf)] + [
            (f"lpf{j + 1}", blk) for j, blk in enumerate(self.lpfs)
        ]
        for name, blk in blocks:
            out += blk.conv.named_parameters(f"{name}.conv.")
            out += blk.bn.named_parameters(f"{name}.bn.")
            for k, (gc, gbn) in enumerate(zip(blk.gconvs, blk.gbns)):
                out += gc.named_parameters(f"{name}.gconv{k}.")
                out += gbn.named_parameters(f"{name}.gbn{k}.")
        out += self.final.named_parameters("final.")
        return out

    def named_buffers(self):
        out = []
        for i, br in enumerate(self.branches):
            for j, bn in enumerate(br.bns):
                out.append((f"pre.b{i}.bn{j}", bn))
            out.append((f"pre.b{i}.gbn", br.gbn))
        blocks = [("hpf", self.hpf)] + [
            (f"lpf{j + 1}", blk) for j, blk in enumerate(self.lpfs)
        ]
        for name, blk in blocks:
            out.append((f"{name}.bn", blk.bn))
            for k, gbn in enumerate(blk.gbns):
                out.append((f"{name}.gbn{k}", gbn))
        return out

    def all_blocks(self):
        """(name, Block) pairs in forward order."""
        return [("hpf", self.hpf)] + [
            (f"lpf{j + 1}", blk) for j, blk in enumerate(self.lpfs)
        ]


def _seed_int(ss):
    return int(ss.generate_state(1)[0])


def build_network(config, seed=None, dtype=np.float32):
    """Assemble a model with Glorot convs and variance-balanced graph layers;
    deterministic under seed."""
    config.validate()
    if seed is None:
        seed = config.seed
    root = np.random.SeedSequence(seed)
    fb = config.branch_features
    f = config.features
    branches = []
    streams = root.spawn(3 + 2 + 2 * config.lpf_blocks + 1)
    for i, ks in enumerate(BRANCH_FILTER_SIZES):
        ss = streams[i]
        rng = np.random.default_rng(ss)
        convs, bns = [], []
        cin = 1
        for _ in range(CONVS_PER_BRANCH):
            convs.append(Conv2dLayer(ks, cin, fb, rng, dtype))
            bns.append(BatchNormLayer(fb, dtype))
            cin = fb
        gconv = init_ecc(
            fb, fb, r=config.rank, m=config.shifts, delta=config.delta,
            seed=_seed_int(ss.spawn(1)[0]), dtype=dtype,
        )
        branches.append(Branch(convs, bns, gconv, BatchNormLayer(fb, dtype)))

    def make_block(ss, residual):
        rng = np.random.default_rng(ss)
        conv = Conv2dLayer(3, f, f, rng, dtype)
        bn = BatchNormLayer(f, dtype)
        subs = ss.spawn(GCONVS_PER_BLOCK)
        gconvs = [
            init_ecc(
                f, f, r=config.rank, m=config.shifts, delta=config.delta,
                seed=_seed_int(subs[k]), dtype=dtype,
            )
            for k in range(GCONVS_PER_BLOCK)
        ]
        gbns = [BatchNormLayer(f, dtype) for _ in range(GCONVS_PER_BLOCK)]
        return Block(conv, bn, gconvs, gbns, residual)

    hpf = make_block(streams[3], residual=False)
    lpfs = [make_block(streams[4 + j], residual=True) for j in range(config.lpf_blocks)]
    final = init_ecc(
        f, 1, r=config.rank, m=config.shifts, delta=config.delta,
        seed=_seed_int(streams[-1]), dtype=dtype,
    )
    return Model(
        config=config, dtype=np.dtype(dtype), branches=branches, hpf=hpf,
        lpfs=lpfs, final=final,
    )


def parameter_count(model):
    return sum(p.size for _, p in model.named_parameters())


# ---------------------------------------------------------------------------
# forward


def _as_batched_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim == 2:
        arr = arr[None, :, :, None]
    elif arr.ndim == 3:
        arr = arr[..., None]
    return Tensor(arr)


def forward(
    model,
    x,
    graph_mode="infer",
    bn_mode=None,
    window=None,
    trace=None,
    graphs=None,
):
    """Run the denoiser; output = input + predicted residual.

    graph_mode picks the neighbor-search regime (all-pairs vs windowed);
    bn_mode defaults to it. `trace`, when a dict, collects per-layer records,
    built graphs and block outputs. `graphs` replays previously traced graphs
    instead of rebuilding (used by probes that must hold topology fixed).
    """
    cfg = model.config
    if bn_mode is None:
        bn_mode = graph_mode
    if window is None:
        window = cfg.window
    x = _as_batched_tensor(x, model.dtype)
    b, h, w, cin = x.shape
    if h < 3 or w < 3:
        raise ValueError(f"image {h}x{w} smaller than 3x3")
    if cin != 1:
        raise ValueError(f"expected single-channel input, got {cin} channels")
    geom = (b, h, w)
    graph_seq = []

    def get_graph(feat_tensor):
        idx = len(graph_seq)
        if graphs is not None:
            per_image = graphs[idx]
        else:
            data = feat_tensor.data
            builder = (
                (lambda im: build_graph_train(im, cfg.knn))
                if graph_mode == "train"
                else (lambda im: build_graph_infer(im, cfg.knn, window))
            )
            per_image = [builder(data[i]) for i in range(b)]
        graph_seq.append(per_image)
        if trace is not None:
            trace.setdefault("graphs", []).append(per_image)
            trace.setdefault("graph_feats", []).append(
                np.array(feat_tensor.data, copy=True)
            )
        return idx, merge_graphs(per_image)

    def note_layer(name, kind, segment, ksize=None, graph_idx=None, out=None):
        if trace is not None:
            trace.setdefault("layers", []).append(
                {
                    "name": name,
                    "kind": kind,
                    "segment": segment,
                    "ksize": ksize,
                    "graph_idx": graph_idx,
                }
            )
            if out is not None:
                trace.setdefault("features", {})[name] = np.array(
                    out.data, copy=True
                )

    def bn_act(t, bn):
        return ad.leaky_relu(bn(t, bn_mode), 0.2)

    branch_outputs = []
    for i, br in enumerate(model.branches):
        t = x
        seg = f"branch{i}"
        for j, (conv, bn) in enumerate(zip(br.convs, br.bns)):
            t = bn_act(conv(t), bn)
            note_layer(
                f"pre.b{i}.conv{j}", "conv", seg, ksize=conv.kernel.shape[0], out=t
            )
        gidx, merged = get_graph(t)
        t = graph_conv_layer_t(t, geom, merged, br.gconv, cfg.attention_only)
        t = bn_act(t, br.gbn)
        note_layer(f"pre.b{i}.gconv", "gconv", seg, graph_idx=gidx, out=t)
        branch_outputs.append(t)
    t = ad.concat(branch_outputs, axis=-1)
    if trace is not None:
        trace.setdefault("block_outputs", {})["pre"] = np.array(t.data, copy=True)

    for bname, blk in model.all_blocks():
        block_in = t
        t = bn_act(blk.conv(t), blk.bn)
        note_layer(f"{bname}.conv", "conv", "trunk", ksize=3, out=t)
        gidx, merged = get_graph(t)
        for k, (gc, gbn) in enumerate(zip(blk.gconvs, blk.gbns)):
            t = graph_conv_layer_t(t, geom, merged, gc, cfg.attention_only)
            t = bn_act(t, gbn)
            note_layer(f"{bname}.gconv{k}", "gconv", "trunk", graph_idx=gidx, out=t)
        if blk.residual:
            t = ad.add(block_in, t)
        if trace is not None:
            trace["block_outputs"][bname] = np.array(t.data, copy=True)

    gidx, merged = get_graph(t)
    residual = graph_conv_layer_t(t, geom, merged, model.final, cfg.attention_only)
    note_layer("final.gconv", "gconv", "trunk", graph_idx=gidx, out=residual)
    return ad.add(x, residual)


# ---------------------------------------------------------------------------
# training


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration, seed_key, value):
        self.iteration = iteration
        self.seed_key = seed_key
        super().__init__(
            f"non-finite loss {value} at iteration {iteration} "
            f"(batch seed key {seed_key})"
        )


def lr_schedule(cfg, t):
    """Exponential decay from lr_start at t=0 to lr_end at t=iters."""
    if cfg.iters == 0:
        return cfg.lr_start
    return cfg.lr_start * (cfg.lr_end / cfg.lr_start) ** (t / cfg.iters)


def iteration_rng(seed, iteration):
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(iteration,))
    )


def train(model, images, config=None, callback=None):
    """Adam/MSE training on random clean patches with fresh noise per patch.

    Returns (checkpoint, loss_trace). Deterministic: patch choice and noise
    at iteration t derive from (config.seed, t) alone.
    """
    cfg = config or model.config
    cfg.validate()
    params = model.named_parameters()
    states = {name: AdamState(p.shape, dtype=p.dtype) for name, p in params}
    losses = []
    noise_std = model.dtype.type(cfg.sigma / 255.0)
    for t in range(cfg.iters):
        rng = iteration_rng(cfg.seed, t)
        clean = sample_patch_batch(images, cfg.patch, cfg.batch, rng)
        clean = clean[..., None].astype(model.dtype)
        noisy = clean + noise_std * rng.standard_normal(clean.shape).astype(
            model.dtype
        )
        clean_t = Tensor(clean)
        tape = GradTape()
        with tape:
            out = forward(model, Tensor(noisy), graph_mode="train", bn_mode="train")
            loss = mse(out, clean_t)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDiverged(t, (cfg.seed, t), value)
        losses.append(value)
        for _, p in params:
            p.grad = None
        tape.backward(loss)
        lr = lr_schedule(cfg, t)
        for name, p in params:
            adam_step(p, p.grad, states[name], lr)
        if callback is not None:
            callback(t, value)
    ckpt = checkpoint_from_model(model, iteration=cfg.iters, adam=states, config=cfg)
    return ckpt, losses


# ---------------------------------------------------------------------------
# checkpoint state (binary container lives in checkpoint.py)


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict  # name -> float32 ndarray, insertion-ordered
    iteration: int = 0

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if self.config != other.config or self.iteration != other.iteration:
            return False
        if list(self.tensors) != list(other.tensors):
            return False
        return all(
            np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors
        )


def checkpoint_from_model(model, iteration=0, adam=None, config=None):
    params = model.named_parameters()
    names = [name for name, _ in params]
    if len(names) != len(set(names)):
        raise ValueError("duplicate tensor names in model")
    tensors = {}
    for name, p in params:
        tensors[name] = np.ascontiguousarray(p.data, dtype=np.float32)
    for name, bn in model.named_buffers():
        tensors[name + ".running_mean"] = np.ascontiguousarray(
            bn.running_mean, dtype=np.float32
        )
        tensors[name + ".running_var"] = np.ascontiguousarray(
            bn.running_var, dtype=np.float32
        )
    if adam is not None:
        for name, st in adam.items():
            tensors["adam.m." + name] = np.ascontiguousarray(st.m, dtype=np.float32)
            tensors["adam.v." + name] = np.ascontiguousarray(st.v, dtype=np.float32)
            tensors["adam.t." + name] = np.array([st.t], dtype=np.float32)
    return Checkpoint(
        config=config or model.config, tensors=tensors, iteration=iteration
    )


def model_from_checkpoint(ckpt, dtype=np.float64):
    """Rebuild a model and load its tensors; unknown or missing names raise."""
    model = build_network(ckpt.config, seed=ckpt.config.seed, dtype=dtype)
    for name, p in model.named_parameters():
        if name not in ckpt.tensors:
            raise KeyError(f"checkpoint is missing parameter {name}")
        arr = ckpt.tensors[name]
        if arr.shape != p.data.shape:
            raise ValueError(
                f"checkpoint tensor {name} has shape {arr.shape}, "
                f"expected {p.data.shape}"
            )
        p.data = arr.astype(dtype)
    for name, bn in model.named_buffers():
        bn.running_mean = ckpt.tensors[name + ".running_mean"].astype(dtype)
        bn.running_var = ckpt.tensors[name + ".running_var"].astype(dtype)
    return model


def adam_from_checkpoint(ckpt, model):
    states = {}
    for name, p in model.named_parameters():
        key = "adam.m." + name
        if key not in ckpt.tensors:
            return None
        st = AdamState(p.shape, dtype=p.dtype)
        st.m = ckpt.tensors["adam.m." + name].astype(p.dtype)
        st.v = ckpt.tensors["adam.v." + name].astype(p.dtype)
        st.t = int(ckpt.tensors["adam.t." + name][0])
        states[name] = st
    return states


# ---------------------------------------------------------------------------
# inference


def receptive_radius(config):
    """Upper bound on the input radius one output pixel depends on."""
    wr = (config.window - 1) // 2
    branch = max(3 * (ks // 2) for ks in BRANCH_FILTER_SIZES) + wr
    block = 1 + GCONVS_PER_BLOCK * wr
    return branch + block * (1 + config.lpf_blocks) + wr


def denoise(model_or_ckpt, noisy, tile=None, window=None, dtype=np.float64):
    """Infer-mode denoising of one (H, W) image, optionally tiled.

    Tiles carry a halo covering the full receptive field, so tiled and
    untiled outputs agree; tiling bounds peak memory, not compute.
    """
    model = (
        model_from_checkpoint(model_or_ckpt, dtype=dtype)
        if isinstance(model_or_ckpt, Checkpoint)
        else model_or_ckpt
    )
    noisy = np.asarray(noisy, dtype=model.dtype)
    h, w = noisy.shape
    if tile is None or tile >= max(h, w):
        out = forward(model, noisy, graph_mode="infer", window=window)
        return np.asarray(out.data[0, :, :, 0])
    halo = receptive_radius(model.config)
    result = np.empty_like(noisy)
    for y0 in range(0, h, tile):
        for x0 in range(0, w, tile):
            y1, x1 = min(y0 + tile, h), min(x0 + tile, w)
            cy0, cx0 = max(0, y0 - halo), max(0, x0 - halo)
            cy1, cx1 = min(h, y1 + halo), min(w, x1 + halo)
            ctx = noisy[cy0:cy1, cx0:cx1]
            out = forward(model, ctx, graph_mode="infer", window=window)
            block = np.asarray(out.data[0, :, :, 0])
            result[y0:y1, x0:x1] = block[y0 - cy0 : y1 - cy0, x0 - cx0 : x1 - cx0]
    return result
