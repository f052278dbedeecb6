"""Fusion-network building blocks and the two-branch enhancement model.

The forward functions are written against :mod:`multinex.autodiff`
primitives, so the same code runs on plain arrays (inference) and on tape
values (training). Parameters live in a flat, ordered registry of named
arrays; see :func:`param_shapes` for the naming scheme.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, NamedTuple

import numpy as np

from . import autodiff as ad
from .guidance import GuidanceStack, luminance_array, reflectance_array
from .tensor import MODEL_DTYPE

LN_EPS = 1e-5
MSEF_KERNEL = 3
DSCONV_KERNEL = 3
CWA_KERNEL = 7
K_LUMINANCE, D_LUMINANCE = 4, 1
K_REFLECTANCE, D_REFLECTANCE = 5, 3

FORMULATIONS = ("full", "luminance", "reflectance")


def default_bottleneck(hidden_C: int) -> int:
    return max(1, min(hidden_C - 1, round(hidden_C / 8)))


@dataclass(frozen=True)
class VariantConfig:
    name: str
    hidden_C: int
    fb_depth_T: int
    bottleneck_d: int
    nano_simplified: bool = False
    # residual formulation: "full" is I + dL * dR; the others keep one branch only
    formulation: str = "full"

    def __post_init__(self):
        if self.hidden_C < 2:
            raise ValueError("hidden_C must be at least 2")
        if not 1 <= self.bottleneck_d < self.hidden_C:
            raise ValueError(f"bottleneck_d must satisfy 1 <= d < C, got d={self.bottleneck_d}, C={self.hidden_C}")
        if self.fb_depth_T < 1:
            raise ValueError("fb_depth_T must be >= 1")
        if self.nano_simplified and self.fb_depth_T != 1:
            raise ValueError("the simplified (Nano) fusion path uses T = 1")
        if self.formulation not in FORMULATIONS:
            raise ValueError(f"formulation must be one of {FORMULATIONS}")

    @classmethod
    def lightweight(cls, **overrides) -> VariantConfig:
        kw = dict(name="lightweight", hidden_C=39, fb_depth_T=3, bottleneck_d=default_bottleneck(39))
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def nano(cls, **overrides) -> VariantConfig:
        kw = dict(name="nano", hidden_C=5, fb_depth_T=1, bottleneck_d=1, nano_simplified=True)
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def from_name(cls, name: str, **overrides) -> VariantConfig:
        factories = {"lightweight": cls.lightweight, "nano": cls.nano}
        try:
            return factories[name.lower()](**overrides)
        except KeyError:
            raise ValueError(f"unknown variant {name!r}; choose from {sorted(factories)}") from None

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def branches(self) -> tuple[str, ...]:
        return {"full": ("lum", "ref"), "luminance": ("lum",), "reflectance": ("ref",)}[self.formulation]


BRANCH_DIMS = {"lum": (K_LUMINANCE, D_LUMINANCE), "ref": (K_REFLECTANCE, D_REFLECTANCE)}


# ------------------------------------------------------------------ registry

def _msef_shapes(prefix, C, d):
    return [
        (f"{prefix}.ln_scale", (C,)),
        (f"{prefix}.ln_shift", (C,)),
        (f"{prefix}.dw", (MSEF_KERNEL, MSEF_KERNEL, C)),
        (f"{prefix}.w1", (d, C)),
        (f"{prefix}.w2", (C, d)),
    ]


def _fb_shapes(prefix, C, d, simplified):
    shapes = [] if simplified else _msef_shapes(f"{prefix}.msef_a", C, d)
    shapes += [
        (f"{prefix}.dsconv.dw", (DSCONV_KERNEL, DSCONV_KERNEL, C)),
        (f"{prefix}.dsconv.pw", (C, C)),
        (f"{prefix}.dsconv.bias", (C,)),
    ]
    return shapes + _msef_shapes(f"{prefix}.msef_b", C, d)


def branch_shapes(cfg: VariantConfig, branch: str) -> list[tuple[str, tuple[int, ...]]]:
    K, D = BRANCH_DIMS[branch]
    C, d = cfg.hidden_C, cfg.bottleneck_d
    shapes = [(f"{branch}.conv_in.weight", (K, C)), (f"{branch}.conv_in.bias", (C,))]
    cwa = [(f"{branch}.cwa.dw", (CWA_KERNEL, CWA_KERNEL, K)), (f"{branch}.cwa.pw", (K, C))]
    if cfg.nano_simplified:
        shapes += cwa + _fb_shapes(f"{branch}.fb", C, d, simplified=True)
    else:
        for t in range(cfg.fb_depth_T):
            shapes += _fb_shapes(f"{branch}.fb1.{t}", C, d, simplified=False)
        shapes += cwa
        for t in range(cfg.fb_depth_T):
            shapes += _fb_shapes(f"{branch}.fb2.{t}", C, d, simplified=False)
    shapes += [(f"{branch}.conv_out.weight", (C, D)), (f"{branch}.conv_out.bias", (D,))]
    return shapes


def param_shapes(cfg: VariantConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered parameter registry; this order is also the checkpoint order."""
    shapes = []
    for branch in cfg.branches:
        shapes += branch_shapes(cfg, branch)
    return shapes


@dataclass
class ModelParams:
    config: VariantConfig
    tensors: dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        expected = param_shapes(self.config)
        names = [n for n, _ in expected]
        if list(self.tensors) != names:
            missing = [n for n in names if n not in self.tensors]
            extra = [n for n in self.tensors if n not in names]
            raise ValueError(f"parameter registry mismatch: missing={missing[:3]} unexpected={extra[:3]}")
        for name, shape in expected:
            if self.tensors[name].shape != shape:
                raise ValueError(f"layer {name}: expected shape {shape}, got {self.tensors[name].shape}")

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def count(self) -> int:
        return sum(int(a.size) for a in self.tensors.values())

    def astype(self, dtype) -> ModelParams:
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self) -> ModelParams:
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


def _fan_in(name, shape):
    leaf = name.rsplit(".", 1)[-1]
    if leaf in ("dw",):
        return shape[0] * shape[1]
    if leaf in ("w1", "w2"):
        return shape[1]
    return shape[0]


def init_params(cfg: VariantConfig, seed: int = 0, dtype=MODEL_DTYPE) -> ModelParams:
    """Uniform(+-sqrt(1/fan_in)) weights, unit/zero layer-norm affine.

    Output projections start so that the predicted enhancement delta is
    exactly zero: the reflectance output conv is all zeros, the luminance
    output conv has zero weights and unit bias. Zeroing both would make
    every gradient vanish (dL and dR gate each other).
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    shapes = param_shapes(cfg)
    for name, shape in shapes:
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "ln_scale":
            arr = np.ones(shape)
        elif leaf == "ln_shift":
            arr = np.zeros(shape)
        elif ".conv_out." in name:
            arr = np.zeros(shape)
        else:
            layer = name.rsplit(".", 1)[0]
            if leaf == "bias":
                wname = f"{layer}.pw" if layer.endswith("dsconv") else f"{layer}.weight"
                fan = _fan_in(wname, dict(shapes)[wname])
            else:
                fan = _fan_in(name, shape)
            bound = math.sqrt(1.0 / fan)
            arr = rng.uniform(-bound, bound, size=shape)
        tensors[name] = arr.astype(dtype)
    if cfg.formulation == "full":
        tensors["lum.conv_out.bias"][:] = 1
    return ModelParams(cfg, tensors)


def zero_output_convs(params: ModelParams) -> ModelParams:
    """Copy of ``params`` with every output projection (weights and bias) zeroed."""
    out = params.copy()
    for name in out:
        if ".conv_out." in name:
            out.tensors[name][...] = 0
    return out


# -------------------------------------------------------------------- blocks

Params = Mapping[str, object]


def layer_norm(x, p: Params, prefix: str):
    return ad.layer_norm(x, p[f"{prefix}.ln_scale"], p[f"{prefix}.ln_shift"], LN_EPS)


def conv1x1(x, weight, bias=None):
    return ad.conv1x1(x, weight, bias)


def dwconv(x, kernel, bias=None):
    return ad.dwconv(x, kernel, bias)


def dsconv(x, p: Params, prefix: str):
    return ad.conv1x1(ad.dwconv(x, p[f"{prefix}.dw"]), p[f"{prefix}.pw"], p[f"{prefix}.bias"])


def msef(x, p: Params, prefix: str):
    """X + DWConv(LN(X)) * (w * LN(X)), w = tanh(W2 relu(W1 GAP(LN(X))))."""
    ln = layer_norm(x, p, prefix)
    squeezed = ad.relu(ad.dense(ad.gap(ln), p[f"{prefix}.w1"]))
    w = ad.tanh(ad.dense(squeezed, p[f"{prefix}.w2"]))
    z = ad.mul(ln, w)
    return ad.add(x, ad.mul(ad.dwconv(ln, p[f"{prefix}.dw"]), z))


def fusion_block(x, p: Params, prefix: str, simplified: bool = False):
    if not simplified:
        x = msef(x, p, f"{prefix}.msef_a")
    x = ad.relu(dsconv(x, p, f"{prefix}.dsconv"))
    return msef(x, p, f"{prefix}.msef_b")


def cwa(stack, p: Params, prefix: str):
    """Component-wise attention: sigmoid(Conv1x1_nobias(DWConv7x7(S)))."""
    return ad.sigmoid(ad.conv1x1(ad.dwconv(stack, p[f"{prefix}.dw"]), p[f"{prefix}.pw"]))


def _stack_data(stack):
    return stack.tensor if isinstance(stack, GuidanceStack) else stack


def fusion_module(stack, p: Params, cfg: VariantConfig, branch: str):
    s = _stack_data(stack)
    K, _ = BRANCH_DIMS[branch]
    if ad.data_of(s).shape[-1] != K:
        raise ValueError(f"branch {branch!r} expects a {K}-channel stack, got {ad.data_of(s).shape[-1]}")
    h = conv1x1(s, p[f"{branch}.conv_in.weight"], p[f"{branch}.conv_in.bias"])
    if cfg.nano_simplified:
        h = ad.mul(cwa(s, p, f"{branch}.cwa"), h)
        h = fusion_block(h, p, f"{branch}.fb", simplified=True)
    else:
        for t in range(cfg.fb_depth_T):
            h = fusion_block(h, p, f"{branch}.fb1.{t}")
        h = ad.mul(cwa(s, p, f"{branch}.cwa"), h)
        for t in range(cfg.fb_depth_T):
            h = fusion_block(h, p, f"{branch}.fb2.{t}")
    return conv1x1(h, p[f"{branch}.conv_out.weight"], p[f"{branch}.conv_out.bias"])


class EnhanceResult(NamedTuple):
    image: np.ndarray
    delta_l: np.ndarray | None
    delta_r: np.ndarray | None


def predict(img, p: Params, cfg: VariantConfig):
    """Unclamped I + dL * dR (or a single-branch formulation); also returns the deltas.

    ``img`` is a constant (..., H, W, 3) array; the guidance stacks are
    computed from it analytically.
    """
    img = np.asarray(img)
    delta_l = delta_r = None
    if "lum" in cfg.branches:
        delta_l = fusion_module(luminance_array(img), p, cfg, "lum")
    if "ref" in cfg.branches:
        delta_r = fusion_module(reflectance_array(img), p, cfg, "ref")
    if cfg.formulation == "full":
        delta = ad.mul(delta_l, delta_r)
    else:
        delta = delta_l if delta_r is None else delta_r
    return ad.add(img, delta), delta_l, delta_r


def enhance(img, params: ModelParams | Params, cfg: VariantConfig | None = None) -> EnhanceResult:
    if cfg is None:
        cfg = params.config
    img = np.asarray(img)
    if img.shape[-1] != 3:
        raise ValueError(f"enhance expects an RGB image, got shape {img.shape}")
    out, dl, dr = predict(img, params, cfg)
    return EnhanceResult(np.clip(out, 0.0, 1.0), dl, dr)


# ---------------------------------------------------------------- accounting

class LayerCount(NamedTuple):
    layer: str
    shapes: tuple
    params: int


def count_params(cfg: VariantConfig) -> tuple[list[LayerCount], int]:
    rows: dict[str, list] = {}
    for name, shape in param_shapes(cfg):
        layer = name.rsplit(".", 1)[0]
        rows.setdefault(layer, []).append(shape)
    table = [LayerCount(layer, tuple(shapes), sum(math.prod(s) for s in shapes)) for layer, shapes in rows.items()]
    return table, sum(r.params for r in table)


@dataclass(frozen=True)
class FlopReport:
    macs: int
    per_layer: tuple

    @property
    def flops(self) -> int:
        return 2 * self.macs

    @property
    def gflops(self) -> float:
        return self.flops / 1e9


def count_flops(cfg: VariantConfig, h: int, w: int) -> FlopReport:
    """Multiply-accumulates of all convolutions and excitation layers.

    conv: kh*kw*Cin*Cout*H*W (depthwise: kh*kw*C*H*W); the excitation
    matrices act once per image on the pooled vector. Normalisation,
    pooling and element-wise operations are not counted. 1 MAC = 2 FLOPs.
    """
    hw = h * w
    rows = []
    for name, shape in param_shapes(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("weight", "pw"):
            macs = shape[0] * shape[1] * hw
        elif leaf == "dw":
            macs = shape[0] * shape[1] * shape[2] * hw
        elif leaf in ("w1", "w2"):
            macs = shape[0] * shape[1]
        else:
            continue
        rows.append((name.rsplit(".", 1)[0] if leaf != "pw" else name, macs))
    return FlopReport(sum(m for _, m in rows), tuple(rows))
