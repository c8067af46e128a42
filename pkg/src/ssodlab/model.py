"""Micro anchor-free dense detector: parameters, forward, backward,
grid geometry and the binary checkpoint format.

Trunk: four 3x3 convs (channels 3->16->32->32->32, strides 1,2,2,2)
reaching stride 8, one more stride-2 conv for the stride-16 level, then a
head shared between the two levels: 2x(3x3 conv, 32ch) followed by 1x1
projections to C class-quality logits and 4 distance outputs.  Scores are
post-sigmoid; distances are exp(raw)*stride, so always positive.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .rng import derive_rng


@dataclass
class ArchConfig:
    image_size: int = 128
    num_classes: int = 3
    in_channels: int = 3
    trunk_channels: tuple = (16, 32, 32, 32)
    trunk_strides: tuple = (1, 2, 2, 2)
    head_channels: int = 32
    strides: tuple = (8, 16)
    # upper bound on max(l,t,r,b) per level; anything above the last
    # bound lands on the last level
    level_max_extent: tuple = (64.0, math.inf)
    prior_prob: float = 0.01


@dataclass
class GridSpec:
    """Anchor-point geometry for all pyramid levels, flattened level-major."""
    image_size: int
    strides: tuple
    level_shapes: list
    level_max_extent: tuple
    anchors: np.ndarray        # (N, 2) anchor centers (x, y)
    level_of: np.ndarray       # (N,) level index per anchor
    level_slices: list         # flat slice per level

    @property
    def n_anchors(self) -> int:
        return self.anchors.shape[0]


def make_grid(arch: ArchConfig) -> GridSpec:
    shapes, anchors, level_of, slices = [], [], [], []
    ofs = 0
    for li, s in enumerate(arch.strides):
        if arch.image_size % s != 0:
            raise ValueError(f"image_size {arch.image_size} not divisible by stride {s}")
        n = arch.image_size // s
        shapes.append((n, n))
        ys, xs = np.mgrid[0:n, 0:n]
        cx = (xs.ravel() + 0.5) * s
        cy = (ys.ravel() + 0.5) * s
        anchors.append(np.stack([cx, cy], axis=1))
        level_of.append(np.full(n * n, li, dtype=np.int64))
        slices.append(slice(ofs, ofs + n * n))
        ofs += n * n
    return GridSpec(
        image_size=arch.image_size,
        strides=tuple(arch.strides),
        level_shapes=shapes,
        level_max_extent=tuple(arch.level_max_extent),
        anchors=np.concatenate(anchors).astype(np.float64),
        level_of=np.concatenate(level_of),
        level_slices=slices,
    )


@dataclass
class DenseOutput:
    """Per-level post-sigmoid scores (H,W,C) and ltrb distances (H,W,4)."""
    scores: list
    ltrb: list

    def flat_scores(self) -> np.ndarray:
        return np.concatenate([s.reshape(-1, s.shape[-1]) for s in self.scores])

    def flat_ltrb(self) -> np.ndarray:
        return np.concatenate([d.reshape(-1, 4) for d in self.ltrb])


@dataclass
class BatchDenseOutput:
    """Batched variant: per-level (B,H,W,C) / (B,H,W,4)."""
    scores: list
    ltrb: list

    @property
    def batch_size(self) -> int:
        return self.scores[0].shape[0]

    def image(self, i: int) -> DenseOutput:
        return DenseOutput(scores=[s[i] for s in self.scores],
                           ltrb=[d[i] for d in self.ltrb])

    def flat_scores(self) -> np.ndarray:
        return np.concatenate(
            [s.reshape(s.shape[0], -1, s.shape[-1]) for s in self.scores], axis=1)

    def flat_ltrb(self) -> np.ndarray:
        return np.concatenate(
            [d.reshape(d.shape[0], -1, 4) for d in self.ltrb], axis=1)


PARAM_LAYOUT = "trunk1 trunk2 trunk3 trunk4 down16 head1 head2 cls reg".split()


def init_params(arch: ArchConfig, seed) -> dict:
    """He-normal conv weights, zero biases; class-head bias set so initial
    scores equal prior_prob."""
    rng = derive_rng("init", *((seed,) if isinstance(seed, int) else tuple(seed)))
    params: dict = {}

    def conv(name, kh, kw, ci, co):
        std = math.sqrt(2.0 / (kh * kw * ci))
        shape = (kh, kw, ci, co) if kh == 3 else (ci, co)
        params[f"{name}.w"] = rng.normal(0.0, std, size=shape)
        params[f"{name}.b"] = np.zeros(co)

    ci = arch.in_channels
    for i, co in enumerate(arch.trunk_channels, start=1):
        conv(f"trunk{i}", 3, 3, ci, co)
        ci = co
    conv("down16", 3, 3, ci, ci)
    conv("head1", 3, 3, ci, arch.head_channels)
    conv("head2", 3, 3, arch.head_channels, arch.head_channels)
    conv("cls", 1, 1, arch.head_channels, arch.num_classes)
    conv("reg", 1, 1, arch.head_channels, 4)
    pi = arch.prior_prob
    params["cls.b"][:] = -math.log((1.0 - pi) / pi)
    return params


def copy_params(params: dict) -> dict:
    return {k: v.copy() for k, v in params.items()}


def zeros_like_params(params: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


def _head_forward(params, f, stride, cache, need_cache):
    z1 = nn.conv3x3_forward(f, params["head1.w"], params["head1.b"], 1)
    a1 = nn.relu(z1)
    z2 = nn.conv3x3_forward(a1, params["head2.w"], params["head2.b"], 1)
    a2 = nn.relu(z2)
    z_cls = nn.conv1x1_forward(a2, params["cls.w"], params["cls.b"])
    z_reg = nn.conv1x1_forward(a2, params["reg.w"], params["reg.b"])
    scores = nn.sigmoid(z_cls)
    ltrb = nn.scaled_exp(z_reg, float(stride))
    if need_cache:
        cache.append({"f": f, "z1": z1, "a1": a1, "z2": z2, "a2": a2,
                      "z_cls": z_cls, "z_reg": z_reg,
                      "scores": scores, "ltrb": ltrb, "stride": stride})
    return scores, ltrb


def forward(params: dict, images: np.ndarray, arch: ArchConfig,
            need_cache: bool = True) -> tuple:
    """images (B,H,W,3) or (H,W,3) float -> (BatchDenseOutput, cache).

    cache holds every intermediate needed by backward; pass
    need_cache=False for inference.
    """
    single = images.ndim == 3
    x = images[None] if single else images
    if x.shape[1] != arch.image_size or x.shape[2] != arch.image_size \
            or x.shape[3] != arch.in_channels:
        raise ValueError(f"expected (B,{arch.image_size},{arch.image_size},"
                         f"{arch.in_channels}) input, got {x.shape}")
    x = np.ascontiguousarray(x, dtype=np.float64)

    trunk_cache = []
    h = x
    for i, stride in enumerate(arch.trunk_strides, start=1):
        z = nn.conv3x3_forward(h, params[f"trunk{i}.w"], params[f"trunk{i}.b"], stride)
        a = nn.relu(z)
        if need_cache:
            trunk_cache.append({"x": h, "z": z})
        h = a
    f8 = h
    z16 = nn.conv3x3_forward(f8, params["down16.w"], params["down16.b"], 2)
    f16 = nn.relu(z16)

    head_cache: list = []
    s8, d8 = _head_forward(params, f8, arch.strides[0], head_cache, need_cache)
    s16, d16 = _head_forward(params, f16, arch.strides[1], head_cache, need_cache)

    out = BatchDenseOutput(scores=[s8, s16], ltrb=[d8, d16])
    cache = None
    if need_cache:
        cache = {"trunk": trunk_cache, "f8": f8, "z16": z16, "f16": f16,
                 "heads": head_cache, "arch": arch, "single": single,
                 "batch": x.shape[0]}
    return out, cache


def _head_backward(params, hc, g_scores, g_ltrb, grads):
    gz_cls = nn.sigmoid_backward(hc["z_cls"], hc["scores"], g_scores)
    gz_reg = nn.scaled_exp_backward(hc["z_reg"], hc["ltrb"], g_ltrb)
    ga2_c, gw, gb = nn.conv1x1_backward(hc["a2"], params["cls.w"], gz_cls)
    grads["cls.w"] += gw
    grads["cls.b"] += gb
    ga2_r, gw, gb = nn.conv1x1_backward(hc["a2"], params["reg.w"], gz_reg)
    grads["reg.w"] += gw
    grads["reg.b"] += gb
    gz2 = nn.relu_backward(hc["z2"], ga2_c + ga2_r)
    ga1, gw, gb = nn.conv3x3_backward(hc["a1"], params["head2.w"], gz2, 1)
    grads["head2.w"] += gw
    grads["head2.b"] += gb
    gz1 = nn.relu_backward(hc["z1"], ga1)
    gf, gw, gb = nn.conv3x3_backward(hc["f"], params["head1.w"], gz1, 1)
    grads["head1.w"] += gw
    grads["head1.b"] += gb
    return gf


def backward(params: dict, cache: dict, grad_scores: list,
             grad_ltrb: list) -> dict:
    """Exact reverse-mode gradients of all parameters.

    grad_scores / grad_ltrb are per-level arrays shaped like the batched
    output ((B,H,W,C) / (B,H,W,4), or unbatched if forward got a single
    image).
    """
    arch: ArchConfig = cache["arch"]
    if cache["single"]:
        grad_scores = [g[None] for g in grad_scores]
        grad_ltrb = [g[None] for g in grad_ltrb]
    for li in range(2):
        want_c = cache["heads"][li]["scores"].shape
        want_d = cache["heads"][li]["ltrb"].shape
        if grad_scores[li].shape != want_c or grad_ltrb[li].shape != want_d:
            raise ValueError("gradient shape mismatch with forward cache")

    grads = zeros_like_params(params)
    gf8_head = _head_backward(params, cache["heads"][0],
                              np.ascontiguousarray(grad_scores[0], np.float64),
                              np.ascontiguousarray(grad_ltrb[0], np.float64), grads)
    gf16 = _head_backward(params, cache["heads"][1],
                          np.ascontiguousarray(grad_scores[1], np.float64),
                          np.ascontiguousarray(grad_ltrb[1], np.float64), grads)

    gz16 = nn.relu_backward(cache["z16"], gf16)
    gf8_down, gw, gb = nn.conv3x3_backward(cache["f8"], params["down16.w"], gz16, 2)
    grads["down16.w"] += gw
    grads["down16.b"] += gb

    g = gf8_head + gf8_down
    for i in range(len(arch.trunk_strides), 0, -1):
        tc = cache["trunk"][i - 1]
        gz = nn.relu_backward(tc["z"], g)
        g, gw, gb = nn.conv3x3_backward(tc["x"], params[f"trunk{i}.w"], gz,
                                        arch.trunk_strides[i - 1], need_gx=(i > 1))
        grads[f"trunk{i}.w"] += gw
        grads[f"trunk{i}.b"] += gb
    return grads


# ---------------------------------------------------------------------------
# checkpoint format: magic "DTCK", version, JSON header, float64 payloads

CKPT_MAGIC = b"DTCK"
CKPT_VERSION = 1


class CheckpointError(Exception):
    """Raised on malformed checkpoint files; .code is one of
    bad_magic / bad_version / truncated / bad_header."""

    def __init__(self, code: str, msg: str):
        super().__init__(msg)
        self.code = code


def write_checkpoint(path: str, arch: ArchConfig, arrays: dict,
                     iteration: int) -> None:
    """arrays: name -> float64 ndarray (params, teacher, momentum buffers)."""
    names = sorted(arrays)
    header = {
        "arch": {k: (list(v) if isinstance(v, tuple) else v)
                 for k, v in arch.__dict__.items() if v != math.inf},
        "iteration": int(iteration),
        "arrays": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(CKPT_VERSION.to_bytes(4, "little"))
        f.write(len(hbytes).to_bytes(8, "little"))
        f.write(hbytes)
        for n in names:
            f.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes(order="C"))


def read_checkpoint(path: str) -> tuple:
    """Returns (arch_dict, arrays, iteration)."""
    with open(path, "rb") as f:
        data = f.read()
    buf = io.BytesIO(data)
    magic = buf.read(4)
    if magic != CKPT_MAGIC:
        raise CheckpointError("bad_magic", f"bad magic {magic!r}")
    ver = int.from_bytes(buf.read(4), "little")
    if ver != CKPT_VERSION:
        raise CheckpointError("bad_version", f"unsupported version {ver}")
    hlen_b = buf.read(8)
    if len(hlen_b) < 8:
        raise CheckpointError("truncated", "truncated header length")
    hlen = int.from_bytes(hlen_b, "little")
    hbytes = buf.read(hlen)
    if len(hbytes) < hlen:
        raise CheckpointError("truncated", "truncated header")
    try:
        header = json.loads(hbytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError("bad_header", f"unparseable header: {e}") from e
    arrays = {}
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        raw = buf.read(count * 8)
        if len(raw) < count * 8:
            raise CheckpointError("truncated", f"truncated payload at {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(raw, dtype="<f8").reshape(
            spec["shape"]).copy()
    return header["arch"], arrays, int(header["iteration"])


def arch_from_dict(d: dict) -> ArchConfig:
    kw = dict(d)
    for key in ("trunk_channels", "trunk_strides", "strides", "level_max_extent"):
        if key in kw:
            kw[key] = tuple(kw[key])
    arch = ArchConfig(**kw)
    return arch
