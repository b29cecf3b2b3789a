"""Network layouts and their forward passes.

A network is a :class:`NetworkSpec`: an ordered list of :class:`LayerSpec`
entries interpreted by :func:`run_network`. Parameters live in a flat
name -> Tensor table inside :class:`ModelBundle`; names are
``<net>.<layer>.<w|b|g|beta>`` and are what checkpoints store.
"""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .errors import ShapeError
from .optim import AdamState
from .tensor import Tensor

PARTS = ("eyes", "nose", "mouth")
DOMAINS = ("X", "Y")

# (w, h) at 128x128. The mouth is 40 wide, 23 tall; see README "patch sizes".
BASE_PATCH_SIZES = {"eyes": (32, 32), "nose": (28, 24), "mouth": (40, 23)}


def patch_sizes(size: int) -> dict[str, tuple[int, int]]:
    """Per-part (w, h) scaled to image size, even and at least 8 so that the
    three stride-2 convolutions of a local discriminator leave a pixel."""
    if size == 128:
        return dict(BASE_PATCH_SIZES)
    out = {}
    for part, (w, h) in BASE_PATCH_SIZES.items():
        out[part] = tuple(max(8, 2 * int(np.floor(v * size / 128 / 2 + 0.5))) for v in (w, h))
    return out


@dataclass
class LayerSpec:
    name: str
    op: str  # conv | deconv | res | fc
    out_ch: int
    kernel: int = 3
    stride: int = 1
    pad: int = 0
    output_pad: int = 0
    norm: bool = False
    act: str = "none"  # relu | lrelu | tanh | none
    concat: str | None = None  # earlier layer name or "input"


@dataclass
class NetworkSpec:
    name: str
    in_ch: int
    layers: list[LayerSpec] = field(default_factory=list)
    # expected input (H, W); checked only when set
    in_hw: tuple[int, int] | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = [{k: v for k, v in l.items() if v is not None} for l in d["layers"]]
        if d["in_hw"] is not None:
            d["in_hw"] = list(d["in_hw"])
        else:
            d.pop("in_hw")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        layers = [LayerSpec(**l) for l in d["layers"]]
        in_hw = tuple(d["in_hw"]) if d.get("in_hw") is not None else None
        return cls(name=d["name"], in_ch=d["in_ch"], layers=layers, in_hw=in_hw)

    def output_shapes(self, h: int, w: int) -> dict[str, tuple[int, int, int]]:
        """Chain (C, H, W) through the layers without running anything."""
        shapes: dict[str, tuple[int, int, int]] = {"input": (self.in_ch, h, w)}
        c = self.in_ch
        for l in self.layers:
            if l.op == "conv":
                h = ops.conv_out_size(h, l.kernel, l.stride, l.pad)
                w = ops.conv_out_size(w, l.kernel, l.stride, l.pad)
                if h < 1 or w < 1:
                    raise ShapeError(f"{self.name}.{l.name}: spatial size collapses to {h}x{w}")
                c = l.out_ch
            elif l.op == "deconv":
                h = (h - 1) * l.stride - 2 * l.pad + l.kernel + l.output_pad
                w = (w - 1) * l.stride - 2 * l.pad + l.kernel + l.output_pad
                c = l.out_ch
            elif l.op == "res":
                if l.out_ch != c:
                    raise ShapeError(f"{self.name}.{l.name}: residual block must keep {c} channels")
            elif l.op == "fc":
                c, h, w = l.out_ch, 1, 1
            if l.concat is not None:
                sc, sh, sw = shapes[l.concat]
                if (sh, sw) != (h, w):
                    raise ShapeError(f"{self.name}.{l.name}: cannot concat {h}x{w} with {l.concat} {sh}x{sw}")
                c += sc
            shapes[l.name] = (c, h, w)
        return shapes


# ---------------------------------------------------------------- layouts

def regressor_spec(name: str = "R") -> NetworkSpec:
    """U-shaped landmark regressor: five stride-2 encoders, one residual
    bottleneck, five transposed-conv decoders with encoder skips, 5-channel
    linear head."""
    L = [LayerSpec(f"conv{i + 1}", "conv", ch, 3, 2, 1, act="relu")
         for i, ch in enumerate((64, 128, 256, 512, 1024))]
    L.append(LayerSpec("res1", "res", 1024, 3, 1, 1, act="relu"))
    skips = ("conv4", "conv3", "conv2", "conv1", "input")
    for i, (ch, skip) in enumerate(zip((512, 256, 128, 64, 32), skips)):
        L.append(LayerSpec(f"deconv{5 - i}", "deconv", ch, 3, 2, 1, output_pad=1, act="relu", concat=skip))
    L.append(LayerSpec("out1", "conv", 32, 3, 1, 1, act="relu"))
    L.append(LayerSpec("out2", "conv", 5, 3, 1, 1))
    return NetworkSpec(name, 3, L)


def generator_spec(name: str, size: int, ngf: int = 64, n_res: int | None = None) -> NetworkSpec:
    if n_res is None:
        n_res = 6 if size >= 128 else 4
    L = [
        LayerSpec("head", "conv", ngf, 7, 1, 3, norm=True, act="relu"),
        LayerSpec("down1", "conv", 2 * ngf, 3, 2, 1, norm=True, act="relu"),
        LayerSpec("down2", "conv", 4 * ngf, 3, 2, 1, norm=True, act="relu"),
    ]
    L += [LayerSpec(f"res{i + 1}", "res", 4 * ngf, 3, 1, 1, norm=True, act="relu") for i in range(n_res)]
    L += [
        LayerSpec("up1", "deconv", 2 * ngf, 3, 2, 1, output_pad=1, norm=True, act="relu"),
        LayerSpec("up2", "deconv", ngf, 3, 2, 1, output_pad=1, norm=True, act="relu"),
        LayerSpec("tail", "conv", 3, 7, 1, 3, act="tanh"),
    ]
    return NetworkSpec(name, 8, L)


def global_disc_spec(name: str, conditional: bool, ndf: int = 64) -> NetworkSpec:
    chans = (ndf, 2 * ndf, 4 * ndf, 8 * ndf)
    L = [LayerSpec(f"conv{i + 1}", "conv", ch, 4, 2, 1, norm=i > 0, act="lrelu") for i, ch in enumerate(chans)]
    L.append(LayerSpec("fc1", "fc", 1))
    return NetworkSpec(name, 8 if conditional else 3, L)


def local_disc_spec(name: str, part: str, size: int, ndf: int = 64) -> NetworkSpec:
    w, h = patch_sizes(size)[part]
    in_ch = 6 if part == "eyes" else 3
    chans = (ndf, 2 * ndf, 4 * ndf)
    L = [LayerSpec(f"conv{i + 1}", "conv", ch, 4, 2, 1, act="lrelu") for i, ch in enumerate(chans)]
    L.append(LayerSpec("fc1", "fc", 1))
    return NetworkSpec(name, in_ch, L, in_hw=(h, w))


# ---------------------------------------------------------------- params

def _init_params(spec: NetworkSpec, size_hw: tuple[int, int], seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng([seed, zlib.crc32(spec.name.encode())])
    shapes = spec.output_shapes(*size_hw)
    params: dict[str, Tensor] = {}
    c = spec.in_ch
    prev = "input"

    def normal(shape, fan_in):
        return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)

    def add(key, arr):
        params[f"{spec.name}.{key}"] = Tensor(arr, requires_grad=True, name=f"{spec.name}.{key}")

    for l in spec.layers:
        k = l.kernel
        if l.op == "conv":
            add(f"{l.name}.w", normal((l.out_ch, c, k, k), c * k * k))
            add(f"{l.name}.b", np.zeros(l.out_ch, np.float32))
        elif l.op == "deconv":
            # fan-in of the adjoint: each output pixel sees ~c*k*k/stride^2 inputs
            add(f"{l.name}.w", normal((c, l.out_ch, k, k), max(1, c * k * k // (l.stride ** 2))))
            add(f"{l.name}.b", np.zeros(l.out_ch, np.float32))
        elif l.op == "res":
            for j in (1, 2):
                add(f"{l.name}.conv{j}.w", normal((c, c, k, k), c * k * k) * (1.0 if j == 1 else 0.5))
                add(f"{l.name}.conv{j}.b", np.zeros(c, np.float32))
        elif l.op == "fc":
            pc, ph, pw = shapes[prev]
            fan = pc * ph * pw
            add(f"{l.name}.w", (rng.standard_normal((l.out_ch, fan)) * np.sqrt(1.0 / fan)).astype(np.float32))
            add(f"{l.name}.b", np.zeros(l.out_ch, np.float32))
        if l.norm:
            n = l.out_ch
            if l.op == "res":
                for j in (1, 2):
                    add(f"{l.name}.norm{j}.g", np.ones(n, np.float32))
                    add(f"{l.name}.norm{j}.beta", np.zeros(n, np.float32))
            else:
                add(f"{l.name}.norm.g", np.ones(n, np.float32))
                add(f"{l.name}.norm.beta", np.zeros(n, np.float32))
        c = shapes[l.name][0]
        prev = l.name
    return params


def _act(x: Tensor, act: str) -> Tensor:
    if act == "relu":
        return ops.relu(x)
    if act == "lrelu":
        return ops.leaky_relu(x, 0.2)
    if act == "tanh":
        return ops.tanh(x)
    return x


def run_network(spec: NetworkSpec, params: dict[str, Tensor], x: Tensor,
                keep: tuple[str, ...] = ()) -> Tensor | tuple[Tensor, dict[str, Tensor]]:
    """Interpret ``spec`` on ``x``. With ``keep``, also return those named
    intermediate outputs (post-activation, pre-concat)."""
    if x.data.ndim != 4 or x.shape[1] != spec.in_ch:
        raise ShapeError(f"{spec.name}: expected N x {spec.in_ch} x H x W input, got {x.shape}")
    if spec.in_hw is not None and tuple(x.shape[2:]) != tuple(spec.in_hw):
        raise ShapeError(f"{spec.name}: expected spatial size (H, W)={tuple(spec.in_hw)}, got {tuple(x.shape[2:])}")
    p = lambda key: params[f"{spec.name}.{key}"]  # noqa: E731
    outs: dict[str, Tensor] = {"input": x}
    kept: dict[str, Tensor] = {}
    h = x
    for l in spec.layers:
        if l.op == "conv":
            h = ops.conv2d(h, p(f"{l.name}.w"), p(f"{l.name}.b"), l.stride, l.pad)
            if l.norm:
                h = ops.instance_norm(h, p(f"{l.name}.norm.g"), p(f"{l.name}.norm.beta"))
            h = _act(h, l.act)
        elif l.op == "deconv":
            h = ops.conv_transpose2d(h, p(f"{l.name}.w"), p(f"{l.name}.b"), l.stride, l.pad, l.output_pad)
            if l.norm:
                h = ops.instance_norm(h, p(f"{l.name}.norm.g"), p(f"{l.name}.norm.beta"))
            h = _act(h, l.act)
        elif l.op == "res":
            r = ops.conv2d(h, p(f"{l.name}.conv1.w"), p(f"{l.name}.conv1.b"), 1, l.pad)
            if l.norm:
                r = ops.instance_norm(r, p(f"{l.name}.norm1.g"), p(f"{l.name}.norm1.beta"))
            r = _act(r, l.act)
            r = ops.conv2d(r, p(f"{l.name}.conv2.w"), p(f"{l.name}.conv2.b"), 1, l.pad)
            if l.norm:
                r = ops.instance_norm(r, p(f"{l.name}.norm2.g"), p(f"{l.name}.norm2.beta"))
            h = ops.add(h, r)
        elif l.op == "fc":
            h = ops.fully_connected(h, p(f"{l.name}.w"), p(f"{l.name}.b"))
            h = _act(h, l.act)
        if l.name in keep:
            kept[l.name] = h
        if l.concat is not None:
            h = ops.concat_channels([h, outs[l.concat]])
        outs[l.name] = h
    return (h, kept) if keep else h


# ---------------------------------------------------------------- bundle

def net_names() -> list[str]:
    names = ["G_XY", "G_YX", "D_X", "D_Y", "Dgc_X", "Dgc_Y"]
    names += [f"Dl_{d}_{part}" for d in DOMAINS for part in PARTS]
    names += ["R_X", "R_Y"]
    return names


class ModelBundle:
    """Every network's parameters, optimizer state and the iteration counter.

    ``size`` is the image side S; ``ngf``/``ndf`` are generator and
    discriminator base widths.
    """

    def __init__(self, size: int = 64, ngf: int = 16, ndf: int = 64, ndf_local: int = 32, n_res: int | None = None,
                 seed: int = 0):
        if size % 32:
            raise ShapeError(f"image size must be divisible by 32, got {size}")
        self.size = size
        self.ngf, self.ndf, self.ndf_local, self.n_res = ngf, ndf, ndf_local, n_res
        self.seed = seed
        self.specs: dict[str, NetworkSpec] = {}
        for d in ("XY", "YX"):
            self.specs[f"G_{d}"] = generator_spec(f"G_{d}", size, ngf, n_res)
        for d in DOMAINS:
            self.specs[f"D_{d}"] = global_disc_spec(f"D_{d}", False, ndf)
            self.specs[f"Dgc_{d}"] = global_disc_spec(f"Dgc_{d}", True, ndf)
            for part in PARTS:
                self.specs[f"Dl_{d}_{part}"] = local_disc_spec(f"Dl_{d}_{part}", part, size, ndf_local)
            self.specs[f"R_{d}"] = regressor_spec(f"R_{d}")
        self.params: dict[str, Tensor] = {}
        for name in net_names():
            spec = self.specs[name]
            hw = tuple(spec.in_hw) if spec.in_hw is not None else (size, size)
            self.params.update(_init_params(spec, hw, seed))
        self.opt: dict[str, AdamState] = {}
        self.iteration = 0

    def group(self, net: str) -> dict[str, Tensor]:
        prefix = net + "."
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def set_trainable(self, net: str, flag: bool):
        for t in self.group(net).values():
            t.requires_grad = flag

    def arch_dict(self) -> dict:
        return {"size": self.size, "ngf": self.ngf, "ndf": self.ndf, "ndf_local": self.ndf_local,
                "n_res": self.n_res}

    def snapshot(self, nets: list[str] | None = None) -> dict[str, np.ndarray]:
        keys = self.params if nets is None else [k for n in nets for k in self.group(n)]
        return {k: self.params[k].data.copy() for k in keys}


# ---------------------------------------------------------------- forwards

def generator_forward(bundle: ModelBundle, direction: str, image: Tensor, heatmaps: Tensor) -> Tensor:
    """G_{(X,L)->Y} for direction "XY" (or "YX"): image (N,3,S,S) in [-1, 1]
    plus heatmaps (N,5,S,S) -> translated image (N,3,S,S)."""
    if direction not in ("XY", "YX"):
        raise ValueError(f"direction must be 'XY' or 'YX', got {direction!r}")
    if image.data.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"generator: image must be N x 3 x S x S, got {image.shape}")
    if heatmaps.data.ndim != 4 or heatmaps.shape[1] != 5:
        raise ShapeError(f"generator: heatmaps must be N x 5 x S x S, got {heatmaps.shape}")
    x = ops.concat_channels([image, heatmaps])
    return run_network(bundle.specs[f"G_{direction}"], bundle.params, x)


def regressor_forward(bundle: ModelBundle, domain: str, image: Tensor, keep: tuple[str, ...] = ()):
    if image.data.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"regressor: image must be N x 3 x S x S, got {image.shape}")
    if image.shape[2] % 32 or image.shape[3] % 32:
        raise ShapeError(f"regressor: spatial size {image.shape[2:]} not divisible by 32")
    return run_network(bundle.specs[f"R_{domain}"], bundle.params, image, keep)


def global_disc_forward(bundle: ModelBundle, which: str, domain: str, image: Tensor,
                        heatmaps: Tensor | None = None) -> Tensor:
    """Raw logit (N, 1). ``which`` is "unconditional" or "conditional"."""
    if which == "conditional":
        if heatmaps is None:
            raise ValueError("conditional discriminator needs heatmaps")
        x = ops.concat_channels([image, heatmaps])
        return run_network(bundle.specs[f"Dgc_{domain}"], bundle.params, x)
    if which != "unconditional":
        raise ValueError(f"unknown discriminator kind {which!r}")
    if heatmaps is not None:
        raise ValueError("unconditional discriminator takes no heatmaps")
    return run_network(bundle.specs[f"D_{domain}"], bundle.params, image)


def local_disc_forward(bundle: ModelBundle, part: str, domain: str, patch: Tensor) -> Tensor:
    if part not in PARTS:
        raise ValueError(f"unknown part {part!r}")
    return run_network(bundle.specs[f"Dl_{domain}_{part}"], bundle.params, patch)
