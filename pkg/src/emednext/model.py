"""A desk-scale MedNeXt V2 forward engine with deep supervision.

Layout (``S = num_stages``, ``C_s = base_channels * 2**s``)::

    stem            1x1x1 conv, in_channels -> C_0
    enc.s.blocks.j  MedNeXt blocks at C_s              s = 0 .. S-1 (S-1 is the bottleneck)
    enc.s.down      stride-2 block C_s -> C_{s+1}      s = 0 .. S-2
    dec.s.up        2x2x2 transposed conv C_{s+1} -> C_s
    dec.s.fuse      1x1x1 conv over [up, skip] (2 C_s -> C_s)
    dec.s.blocks.j  MedNeXt blocks at C_s              s = S-2 .. 0
    heads.l         1x1x1 conv to 3 logits at resolution 1/2**l

The reverse pass exists for gradient verification only; nothing here trains.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .layers import (
    channel_norm,
    channel_norm_backward,
    conv3d_backward,
    conv3d_direct,
    conv_transpose2,
    conv_transpose2_backward,
    gelu,
    gelu_backward,
    sigmoid,
)

Params = dict[str, np.ndarray]


class ModelConfigError(ValueError):
    pass


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class BlockConfig:
    channels: int
    expansion_ratio: int = 2
    kernel: int = 3

    def __post_init__(self):
        if self.channels < 1 or self.expansion_ratio < 1:
            raise ModelConfigError("channels and expansion ratio must be >= 1")
        if self.kernel != 3:
            raise ModelConfigError("depthwise kernel is fixed at 3x3x3")


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 5
    base_channels: int = 8
    num_stages: int = 4
    blocks_per_stage: tuple[int, ...] | None = None  # default: one block per stage
    expansion_ratios: tuple[int, ...] | None = None  # default: R = 2 everywhere
    num_classes: int = 3
    ds_outputs: int = 3

    def __post_init__(self):
        if self.num_stages < 2:
            raise ModelConfigError("num_stages must be >= 2")
        blocks = self.blocks_per_stage if self.blocks_per_stage is not None else (1,) * self.num_stages
        ratios = self.expansion_ratios if self.expansion_ratios is not None else (2,) * self.num_stages
        object.__setattr__(self, "blocks_per_stage", tuple(int(b) for b in blocks))
        object.__setattr__(self, "expansion_ratios", tuple(int(r) for r in ratios))
        if len(self.blocks_per_stage) != self.num_stages or len(self.expansion_ratios) != self.num_stages:
            raise ModelConfigError("blocks_per_stage and expansion_ratios need one entry per stage")
        if min(self.blocks_per_stage) < 0 or min(self.expansion_ratios) < 1:
            raise ModelConfigError("block counts must be >= 0 and expansion ratios >= 1")
        if self.in_channels < 1 or self.base_channels < 1 or self.num_classes < 1 or self.ds_outputs < 0:
            raise ModelConfigError("channel counts must be positive")

    def channels(self, stage: int) -> int:
        return self.base_channels * 2**stage

    @property
    def num_outputs(self) -> int:
        return min(self.num_stages, self.ds_outputs + 1)

    @property
    def divisor(self) -> int:
        return 2 ** (self.num_stages - 1)


def _block_shapes(prefix: str, c_in: int, c_out: int, ratio: int, down: bool) -> dict[str, tuple]:
    hidden = c_in * ratio
    shapes = {
        f"{prefix}.dw.weight": (c_in, 1, 3, 3, 3),
        f"{prefix}.dw.bias": (c_in,),
        f"{prefix}.norm.weight": (c_in,),
        f"{prefix}.norm.bias": (c_in,),
        f"{prefix}.expand.weight": (hidden, c_in, 1, 1, 1),
        f"{prefix}.expand.bias": (hidden,),
        f"{prefix}.compress.weight": (c_out, hidden, 1, 1, 1),
        f"{prefix}.compress.bias": (c_out,),
    }
    if down:
        shapes[f"{prefix}.res.weight"] = (c_out, c_in, 1, 1, 1)
        shapes[f"{prefix}.res.bias"] = (c_out,)
    return shapes


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Every parameter name and shape, in forward order."""
    S = cfg.num_stages
    shapes: dict[str, tuple] = {
        "stem.weight": (cfg.channels(0), cfg.in_channels, 1, 1, 1),
        "stem.bias": (cfg.channels(0),),
    }
    for s in range(S):
        c, r = cfg.channels(s), cfg.expansion_ratios[s]
        for j in range(cfg.blocks_per_stage[s]):
            shapes.update(_block_shapes(f"enc.{s}.blocks.{j}", c, c, r, down=False))
        if s < S - 1:
            shapes.update(_block_shapes(f"enc.{s}.down", c, cfg.channels(s + 1), r, down=True))
    for s in range(S - 2, -1, -1):
        c, r = cfg.channels(s), cfg.expansion_ratios[s]
        shapes[f"dec.{s}.up.weight"] = (cfg.channels(s + 1), c, 2, 2, 2)
        shapes[f"dec.{s}.up.bias"] = (c,)
        shapes[f"dec.{s}.fuse.weight"] = (c, 2 * c, 1, 1, 1)
        shapes[f"dec.{s}.fuse.bias"] = (c,)
        for j in range(cfg.blocks_per_stage[s]):
            shapes.update(_block_shapes(f"dec.{s}.blocks.{j}", c, c, r, down=False))
    for level in range(cfg.num_outputs):
        shapes[f"heads.{level}.weight"] = (cfg.num_classes, cfg.channels(level), 1, 1, 1)
        shapes[f"heads.{level}.bias"] = (cfg.num_classes,)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Params:
    """He-style normal init for convolutions, identity affine for norms, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("norm.weight"):
            arr = np.ones(shape)
        elif name.endswith("bias"):
            arr = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if not name.endswith("up.weight") else shape[0] * 8
            arr = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        params[name] = arr.astype(dtype)
    return params


def zero_params(cfg: ModelConfig, dtype=np.float32) -> Params:
    return {name: np.zeros(shape, dtype=dtype) for name, shape in param_shapes(cfg).items()}


# ---------------------------------------------------------------------------
# forward with optional tape
# ---------------------------------------------------------------------------


class _Tape:
    """Accumulates parameter gradients during a reverse pass."""

    def __init__(self, params: Params):
        self.grads = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}

    def add(self, name: str, g: np.ndarray) -> None:
        self.grads[name] += g


def _conv(x, params, name, tape, stride=1, groups=1):
    w, b = params[f"{name}.weight"], params[f"{name}.bias"]
    y = conv3d_direct(x, w, b, stride, groups)

    def back(dy):
        dx, dw, db = conv3d_backward(dy, x, w, stride, groups)
        tape.add(f"{name}.weight", dw)
        tape.add(f"{name}.bias", db)
        return dx

    return y, back


def _block(x, params, prefix, tape, down=False):
    stride = 2 if down else 1
    h1, b1 = _conv(x, params, f"{prefix}.dw", tape, stride=stride, groups=x.shape[0])
    gamma, beta = params[f"{prefix}.norm.weight"], params[f"{prefix}.norm.bias"]
    h2, norm_cache = channel_norm(h1, gamma, beta)
    h3, b3 = _conv(h2, params, f"{prefix}.expand", tape)
    h4 = gelu(h3)
    h5, b5 = _conv(h4, params, f"{prefix}.compress", tape)
    if down:
        res, b_res = _conv(x, params, f"{prefix}.res", tape, stride=2)
    else:
        res, b_res = x, None
    y = h5 + res

    def back(dy):
        dh4 = b5(dy)
        dh3 = gelu_backward(dh4, h3)
        dh2 = b3(dh3)
        dh1, dgamma, dbeta = channel_norm_backward(dh2, norm_cache, gamma)
        tape.add(f"{prefix}.norm.weight", dgamma)
        tape.add(f"{prefix}.norm.bias", dbeta)
        dx = b1(dh1)
        return dx + (b_res(dy) if down else dy)

    return y, back, h3.shape[0]


def mednext_block(x: np.ndarray, cfg: BlockConfig, params: Params, prefix: str = "block") -> np.ndarray:
    """Residual block: depthwise 3^3 -> norm -> 1x1x1 expand (C*R) -> GELU -> 1x1x1 compress (C)."""
    if x.shape[0] != cfg.channels:
        raise ValueError(f"block expects {cfg.channels} channels, got {x.shape[0]}")
    expected = _block_shapes(prefix, cfg.channels, cfg.channels, cfg.expansion_ratio, down=False)
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ValueError(f"{name} has shape {params[name].shape}, expected {shape}")
    y, _, _ = _block(x, params, prefix, _NullTape())
    return y


def mednext_block_with_grad(x, cfg: BlockConfig, params: Params, dout, prefix: str = "block"):
    """Forward plus reverse pass for a single block. Returns (y, dx, param grads, hidden width)."""
    tape = _Tape({k: v for k, v in params.items() if k.startswith(prefix + ".")})
    y, back, hidden = _block(x, params, prefix, tape)
    dx = back(dout)
    return y, dx, tape.grads, hidden


class _NullTape:
    def add(self, name, g):
        pass


def _forward(x, cfg: ModelConfig, params: Params, tape):
    if x.ndim != 4 or x.shape[0] != cfg.in_channels:
        raise ModelConfigError(f"expected input ({cfg.in_channels}, D, H, W), got {x.shape}")
    if any(n % cfg.divisor for n in x.shape[1:]):
        raise ModelConfigError(f"spatial dims {x.shape[1:]} must be divisible by {cfg.divisor}")
    S = cfg.num_stages
    backs = []  # reverse-mode closures in forward order, each mapping a grad dict

    h, b = _conv(x, params, "stem", tape)
    backs.append(("stem", b))
    skips = []
    for s in range(S):
        for j in range(cfg.blocks_per_stage[s]):
            h, b, _ = _block(h, params, f"enc.{s}.blocks.{j}", tape)
            backs.append(("seq", b))
        if s < S - 1:
            skips.append(h)
            backs.append(("skip_out", s))
            h, b, _ = _block(h, params, f"enc.{s}.down", tape, down=True)
            backs.append(("seq", b))

    levels = {S - 1: h}
    backs.append(("level_out", (S - 1, h)))
    for s in range(S - 2, -1, -1):
        c = cfg.channels(s)
        up_in = h
        w_up, b_up = params[f"dec.{s}.up.weight"], params[f"dec.{s}.up.bias"]
        h = conv_transpose2(up_in, w_up, b_up)

        def back_up(dy, up_in=up_in, w_up=w_up, s=s):
            dx, dw, db = conv_transpose2_backward(dy, up_in, w_up)
            tape.add(f"dec.{s}.up.weight", dw)
            tape.add(f"dec.{s}.up.bias", db)
            return dx

        backs.append(("seq", back_up))
        h = np.concatenate([h, skips[s]], axis=0)
        backs.append(("skip_in", (s, c)))
        h, b = _conv(h, params, f"dec.{s}.fuse", tape)
        backs.append(("seq", b))
        for j in range(cfg.blocks_per_stage[s]):
            h, b, _ = _block(h, params, f"dec.{s}.blocks.{j}", tape)
            backs.append(("seq", b))
        levels[s] = h
        backs.append(("level_out", (s, h)))

    outputs, head_backs = [], []
    for level in range(cfg.num_outputs):
        y, b = _conv(levels[level], params, f"heads.{level}", tape)
        outputs.append(y)
        head_backs.append(b)
    return outputs, backs, head_backs


def model_forward(x: np.ndarray, cfg: ModelConfig, params: Params) -> list[np.ndarray]:
    """Logits at full resolution followed by the deep-supervision outputs (coarser each step)."""
    outputs, _, _ = _forward(x, cfg, params, _NullTape())
    return outputs


def model_forward_backward(x: np.ndarray, cfg: ModelConfig, params: Params, douts: list[np.ndarray]):
    """Run the network and back-propagate ``douts`` (one per output).

    Returns ``(outputs, dx, grads)`` where ``grads`` maps parameter names to
    gradients of ``sum_i <douts[i], outputs[i]>``.
    """
    tape = _Tape(params)
    outputs, backs, head_backs = _forward(x, cfg, params, tape)
    if len(douts) != len(outputs):
        raise ValueError(f"need {len(outputs)} output gradients, got {len(douts)}")
    level_grads = {level: hb(d) for level, (hb, d) in enumerate(zip(head_backs, douts))}

    g = None
    skip_grads: dict[int, np.ndarray] = {}
    for kind, item in reversed(backs):
        if kind == "level_out":
            level, h = item
            if g is None:
                g = np.zeros_like(h, dtype=np.float64)
            if level in level_grads:
                g = g + level_grads[level]
        elif kind == "skip_in":
            s, c = item
            skip_grads[s] = g[c:]
            g = g[:c]
        elif kind == "skip_out":
            g = g + skip_grads.pop(item)
        else:
            g = item(g)
    return outputs, g, tape.grads


class MicroMedNeXt:
    """Callable wrapper: ``model(x)`` returns full-resolution logits."""

    kind = "mednext"

    def __init__(self, cfg: ModelConfig, params: Params):
        missing = set(param_shapes(cfg)) ^ set(params)
        if missing:
            raise ModelFormatError(f"parameter set does not match config: {sorted(missing)[:5]}")
        for name, shape in param_shapes(cfg).items():
            if params[name].shape != shape:
                raise ModelFormatError(f"{name}: shape {params[name].shape} != {shape}")
        self.cfg = cfg
        self.params = params

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return model_forward(x.astype(np.float32), self.cfg, self.params)[0]

    def forward_all(self, x: np.ndarray) -> list[np.ndarray]:
        return model_forward(x, self.cfg, self.params)


class PointwiseModel:
    """Per-voxel linear logits (a 1x1x1 conv). Flip-equivariant by construction.

    Useful as a stand-in predictor when an ideal, geometry-independent
    model is needed, e.g. for end-to-end pipeline checks on phantoms.
    """

    kind = "pointwise"

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        weight = np.asarray(weight, dtype=np.float32)
        bias = np.asarray(bias, dtype=np.float32)
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise ModelFormatError("pointwise weight must be (out, in) with a matching bias")
        self.weight = weight
        self.bias = bias

    @property
    def params(self) -> Params:
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if x.shape[0] != self.weight.shape[1]:
            raise ModelConfigError(f"expected {self.weight.shape[1]} input channels, got {x.shape[0]}")
        out = np.tensordot(self.weight, x.astype(np.float32), axes=(1, 0))
        return out + self.bias[:, None, None, None]


# ---------------------------------------------------------------------------
# structured freezing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FreezePlan:
    freeze_encoder: bool = True
    unfreeze_last_k_decoder_blocks: int = 2
    unfreeze_heads: bool = True
    unfreeze_upsamplers: bool = True
    unfreeze_deepest_encoder_stages: int = 0
    lr_multipliers: dict = field(
        default_factory=lambda: {"body": 1.0, "decoder": 1.0, "heads": 2.0, "encoder": 0.1}
    )

    def __post_init__(self):
        if self.unfreeze_last_k_decoder_blocks < 0:
            raise ValueError("k must be non-negative")
        if self.unfreeze_deepest_encoder_stages not in (0, 2):
            raise ValueError("unfreeze_deepest_encoder_stages must be 0 or 2")
        if any(v <= 0 for v in self.lr_multipliers.values()):
            raise ValueError("learning-rate multipliers must be positive")


def _decoder_blocks(names) -> list[str]:
    """Decoder block prefixes in forward order (coarsest first)."""
    seen = []
    for n in names:
        if n.startswith("dec.") and ".blocks." in n:
            prefix = ".".join(n.split(".")[:4])
            if prefix not in seen:
                seen.append(prefix)
    return seen


def _encoder_stage(name: str) -> int | None:
    if name.startswith("stem."):
        return 0
    if name.startswith("enc."):
        return int(name.split(".")[1])
    return None


def plan_freeze(params: Params, plan: FreezePlan) -> tuple[set[str], float]:
    """Trainable parameter names and their share of the total parameter count."""
    names = list(params)
    dec_blocks = _decoder_blocks(names)
    k = plan.unfreeze_last_k_decoder_blocks
    if k > len(dec_blocks):
        raise ValueError(f"k={k} exceeds the {len(dec_blocks)} decoder blocks")
    open_blocks = set(dec_blocks[len(dec_blocks) - k:]) if k else set()
    stages = [_encoder_stage(n) for n in names if _encoder_stage(n) is not None]
    deepest = max(stages) if stages else -1
    thawed_stages = set(range(deepest - plan.unfreeze_deepest_encoder_stages + 1, deepest + 1))

    trainable = set()
    for n in names:
        stage = _encoder_stage(n)
        if stage is not None:
            if not plan.freeze_encoder or stage in thawed_stages:
                trainable.add(n)
        elif n.startswith("heads."):
            if plan.unfreeze_heads:
                trainable.add(n)
        elif ".up." in n or ".fuse." in n:
            if plan.unfreeze_upsamplers:
                trainable.add(n)
        elif ".".join(n.split(".")[:4]) in open_blocks:
            trainable.add(n)
    total = sum(int(v.size) for v in params.values())
    count = sum(int(params[n].size) for n in trainable)
    return trainable, (count / total if total else 0.0)


def param_groups(trainable: set[str], plan: FreezePlan) -> dict[str, list[str]]:
    """Bucket trainable names by learning-rate group (metadata only)."""
    groups: dict[str, list[str]] = {"encoder": [], "decoder": [], "heads": [], "body": []}
    for n in sorted(trainable):
        if _encoder_stage(n) is not None:
            groups["encoder"].append(n)
        elif n.startswith("heads."):
            groups["heads"].append(n)
        elif n.startswith("dec.") and ".blocks." in n:
            groups["decoder"].append(n)
        else:
            groups["body"].append(n)
    return groups


# ---------------------------------------------------------------------------
# on-disk format: config.json + manifest.json + one <name>.f32 blob per tensor
# ---------------------------------------------------------------------------


def save_model(model: MicroMedNeXt | PointwiseModel, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    if isinstance(model, MicroMedNeXt):
        config = {"kind": "mednext", **asdict(model.cfg)}
    else:
        config = {"kind": "pointwise"}
    manifest = {}
    for name, arr in model.params.items():
        np.ascontiguousarray(arr, dtype="<f4").tofile(d / f"{name}.f32")
        manifest[name] = list(arr.shape)
    (d / "config.json").write_text(json.dumps(config, indent=2))
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_model(directory) -> MicroMedNeXt | PointwiseModel:
    d = Path(directory)
    try:
        config = json.loads((d / "config.json").read_text())
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"unreadable model directory {d}: {exc}") from exc
    params = {}
    for name, shape in manifest.items():
        blob = d / f"{name}.f32"
        if not blob.is_file():
            raise ModelFormatError(f"missing parameter blob {blob}")
        arr = np.fromfile(blob, dtype="<f4")
        if arr.size != int(np.prod(shape)):
            raise ModelFormatError(f"{name}: blob holds {arr.size} values, manifest says {shape}")
        params[name] = arr.reshape(shape).astype(np.float32)
    kind = config.pop("kind", "mednext")
    if kind == "pointwise":
        return PointwiseModel(params["weight"], params["bias"])
    if kind != "mednext":
        raise ModelFormatError(f"unknown model kind {kind!r}")
    try:
        cfg = ModelConfig(**config)
    except (TypeError, ModelConfigError) as exc:
        raise ModelFormatError(f"bad model config: {exc}") from exc
    return MicroMedNeXt(cfg, params)


def predict_probs(model, x: np.ndarray) -> np.ndarray:
    return sigmoid(model(x).astype(np.float64))
