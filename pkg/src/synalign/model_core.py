"""Segmentation-network and frozen feature-extractor interfaces.

Images travel as N x H x W x Ch numpy arrays, logits and class maps as
N x C x H x W. Gradients cross the numpy/torch boundary only through
:meth:`ReferenceNet.backward`, which takes d(loss)/d(logits) and returns the
flat parameter gradient.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import FormatError, ShapeError

SA_INPUT_MODES = ("raw_image", "prob_weighted_image", "prob_map")


# --------------------------------------------------------------------------
# segmentation network

@dataclass(frozen=True)
class ReferenceNetSpec:
    in_channels: int = 1
    num_classes: int = 3
    widths: tuple[int, ...] = (16, 32, 64)
    dtype: str = "float32"


def _double_conv(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(),
        nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU(),
    )


class _UNet(nn.Module):
    """Two-level encoder/decoder with skip connections; outputs logits."""

    def __init__(self, in_channels: int, num_classes: int, widths: tuple[int, ...]):
        super().__init__()
        w1, w2, w3 = widths
        self.enc1 = _double_conv(in_channels, w1)
        self.enc2 = _double_conv(w1, w2)
        self.bottleneck = _double_conv(w2, w3)
        self.up2 = nn.ConvTranspose2d(w3, w2, 2, stride=2)
        self.dec2 = _double_conv(2 * w2, w2)
        self.up1 = nn.ConvTranspose2d(w2, w1, 2, stride=2)
        self.dec1 = _double_conv(2 * w1, w1)
        self.head = nn.Conv2d(w1, num_classes, 1)

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(F.max_pool2d(e1, 2))
        b = self.bottleneck(F.max_pool2d(e2, 2))
        d2 = self.dec2(torch.cat([self.up2(b), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], dim=1))
        return self.head(d1)


class SegmentationModel:
    """Interface used by the trainer and the pseudo-labeler.

    ``forward`` runs in the current mode and caches what ``backward`` needs;
    ``predict`` is a side-effect-free inference pass.
    """

    mode: str = "train"

    def forward(self, images: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_logits: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def predict(self, images: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def get_params(self) -> np.ndarray:
        raise NotImplementedError

    def set_params(self, params: np.ndarray) -> None:
        raise NotImplementedError

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "inference"
        return self


class ReferenceNet(SegmentationModel):
    def __init__(self, spec: ReferenceNetSpec, seed: int = 0):
        if len(spec.widths) != 3:
            raise ValueError("reference net expects three level widths")
        self.spec = spec
        self.dtype = getattr(torch, spec.dtype)
        self.net = _UNet(spec.in_channels, spec.num_classes, tuple(spec.widths)).to(self.dtype)
        self._init_params(seed)
        self._out: torch.Tensor | None = None
        self.mode = "train"

    def _init_params(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for m in self.net.modules():
                if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                    fan_in = m.weight.shape[1] * m.weight.shape[2] * m.weight.shape[3]
                    if isinstance(m, nn.ConvTranspose2d):
                        fan_in = m.weight.shape[0] * m.weight.shape[2] * m.weight.shape[3] // 4
                    std = (2.0 / fan_in) ** 0.5
                    m.weight.copy_(torch.randn(m.weight.shape, generator=gen, dtype=self.dtype) * std)
                    m.bias.zero_()

    def _to_tensor(self, images: np.ndarray) -> torch.Tensor:
        images = np.asarray(images)
        if images.ndim != 4:
            raise ShapeError(f"expected N x H x W x Ch images, got {images.shape}")
        n, h, w, ch = images.shape
        if h % 4 or w % 4:
            raise ShapeError(f"image size {h}x{w} must be divisible by 4")
        if ch != self.spec.in_channels:
            raise ShapeError(f"expected {self.spec.in_channels} channels, got {ch}")
        x = torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))
        return x.to(self.dtype)

    def forward(self, images: np.ndarray) -> np.ndarray:
        x = self._to_tensor(images)
        if self.mode != "train":
            return self.predict(images)
        self.net.zero_grad(set_to_none=True)
        self._out = self.net(x)
        return self._out.detach().numpy().astype(np.float64)

    def backward(self, grad_logits: np.ndarray) -> np.ndarray:
        if self._out is None:
            raise RuntimeError("backward called without a preceding training-mode forward")
        g = torch.from_numpy(np.asarray(grad_logits, dtype=np.float64)).to(self.dtype)
        if g.shape != self._out.shape:
            raise ShapeError(f"gradient {tuple(g.shape)} vs logits {tuple(self._out.shape)}")
        self._out.backward(g)
        self._out = None
        grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in self.net.parameters()]
        flat = torch.cat([t.reshape(-1) for t in grads]).numpy().copy()
        self.net.zero_grad(set_to_none=True)
        return flat

    def predict(self, images: np.ndarray) -> np.ndarray:
        x = self._to_tensor(images)
        with torch.no_grad():
            return self.net(x).numpy().astype(np.float64)

    def get_params(self) -> np.ndarray:
        with torch.no_grad():
            return nn.utils.parameters_to_vector(self.net.parameters()).numpy().copy()

    def set_params(self, params: np.ndarray) -> None:
        params = np.asarray(params)
        if params.shape != (self.num_params,):
            raise ShapeError(f"expected {self.num_params} parameters, got {params.shape}")
        with torch.no_grad():
            nn.utils.vector_to_parameters(torch.from_numpy(params.copy()).to(self.dtype),
                                          self.net.parameters())

    @property
    def num_params(self) -> int:
        return sum(p.numel() for p in self.net.parameters())

    def copy(self) -> "ReferenceNet":
        clone = ReferenceNet(self.spec)
        clone.set_params(self.get_params())
        clone.mode = self.mode
        return clone


def reference_net(spec: ReferenceNetSpec, seed: int = 0) -> ReferenceNet:
    return ReferenceNet(spec, seed)


# --------------------------------------------------------------------------
# feature extractors

class FeatureExtractor:
    """Frozen image -> embedding map with an input-gradient product."""

    dim: int

    def embed(self, images: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, images: np.ndarray, grad_embed: np.ndarray) -> np.ndarray:
        """d(loss)/d(images) given d(loss)/d(embeddings)."""
        raise NotImplementedError


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Rows are the 1-D bilinear weights (half-pixel centres, edge-clamped)."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        m[i, i0] += 1.0 - t
        m[i, i1] += t
    return m


class StubExtractor(FeatureExtractor):
    """Seeded linear projection of the channel-averaged, bilinearly resized image.

    Being linear, it is exactly differentiable and cheap, which makes it the
    default stand-in for a pretrained backbone in tests and toy runs.
    """

    def __init__(self, seed: int = 0, dim: int = 64, size: int = 16):
        if dim < 1:
            raise ValueError("embedding dim must be >= 1")
        self.dim, self.size = dim, size
        rng = np.random.default_rng(seed)
        self.weight = rng.standard_normal((size * size, dim)) / size
        self.weight.setflags(write=False)
        self._resize: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}

    def _mats(self, h: int, w: int):
        key = (h, w)
        if key not in self._resize:
            self._resize[key] = (bilinear_matrix(h, self.size), bilinear_matrix(w, self.size))
        return self._resize[key]

    def embed(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        rh, rw = self._mats(*images.shape[1:3])
        g = images.mean(axis=-1)
        small = rh @ g @ rw.T
        return small.reshape(len(images), -1) @ self.weight

    def vjp(self, images: np.ndarray, grad_embed: np.ndarray) -> np.ndarray:
        n, h, w, ch = np.shape(images)
        rh, rw = self._mats(h, w)
        g_small = (np.asarray(grad_embed, dtype=np.float64) @ self.weight.T).reshape(n, self.size, self.size)
        g = rh.T @ g_small @ rw
        return np.repeat(g[..., None] / ch, ch, axis=-1)


def stub_extractor(seed: int = 0, dim: int = 64) -> StubExtractor:
    return StubExtractor(seed, dim)


class TorchExtractor(FeatureExtractor):
    """Adapter for a pretrained torch backbone (e.g. a self-supervised ViT loaded by the caller).

    Inputs are resized to ``input_size``, grey images are replicated to three
    channels and ImageNet normalisation is applied. The module's parameters
    are frozen; gradients are only ever taken with respect to the input.
    """

    MEAN = (0.485, 0.456, 0.406)
    STD = (0.229, 0.224, 0.225)

    def __init__(self, module: nn.Module, dim: int, input_size: int = 224):
        self.module = module.eval()
        for p in self.module.parameters():
            p.requires_grad_(False)
        self.dim, self.input_size = dim, input_size

    @classmethod
    def from_hub(cls, repo: str, name: str, dim: int, input_size: int = 224) -> "TorchExtractor":
        return cls(torch.hub.load(repo, name), dim, input_size)

    def _prep(self, x: torch.Tensor) -> torch.Tensor:
        x = x.permute(0, 3, 1, 2)
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        x = F.interpolate(x, size=(self.input_size, self.input_size), mode="bilinear", align_corners=False)
        mean = torch.tensor(self.MEAN, dtype=x.dtype).view(1, 3, 1, 1)
        std = torch.tensor(self.STD, dtype=x.dtype).view(1, 3, 1, 1)
        return (x - mean) / std

    def embed(self, images: np.ndarray) -> np.ndarray:
        x = torch.from_numpy(np.asarray(images, dtype=np.float32))
        with torch.no_grad():
            return self.module(self._prep(x)).double().numpy()

    def vjp(self, images: np.ndarray, grad_embed: np.ndarray) -> np.ndarray:
        x = torch.from_numpy(np.asarray(images, dtype=np.float32)).requires_grad_(True)
        out = self.module(self._prep(x))
        out.backward(torch.from_numpy(np.asarray(grad_embed, dtype=np.float32)))
        return x.grad.double().numpy()


# --------------------------------------------------------------------------
# SA-loss input

def _class_mixing(num_classes: int, channels: int) -> np.ndarray:
    """channels x C matrix averaging foreground class probabilities per channel."""
    fg = list(range(1, num_classes))
    a = np.zeros((channels, num_classes))
    if channels <= len(fg):
        for k, group in enumerate(np.array_split(fg, channels)):
            a[k, group] = 1.0 / len(group)
    else:
        for k in range(channels):
            a[k, fg[k % len(fg)]] = 1.0
    return a


def sa_input(images: np.ndarray, probs: np.ndarray, mode: str = "prob_weighted_image") -> np.ndarray:
    """Tensor fed to the frozen extractor for the alignment loss.

    ``prob_weighted_image`` multiplies the image by the predicted foreground
    probability (1 - p_background), giving the loss a path into the network.
    ``raw_image`` passes the image through untouched, so the loss carries no
    parameter gradient. ``prob_map`` feeds foreground probabilities instead,
    averaged into as many channels as the images have.
    """
    images = np.asarray(images, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    if images.shape[:1] + images.shape[1:3] != probs.shape[:1] + probs.shape[2:]:
        raise ShapeError(f"images {images.shape} and probs {probs.shape} disagree")
    if mode == "raw_image":
        return images.copy()
    if mode == "prob_weighted_image":
        return images * (1.0 - probs[:, 0])[..., None]
    if mode == "prob_map":
        a = _class_mixing(probs.shape[1], images.shape[-1])
        return np.einsum("kc,nchw->nhwk", a, probs)
    raise ValueError(f"unknown sa_input mode {mode!r}")


def sa_input_vjp(images: np.ndarray, probs: np.ndarray, mode: str, grad_out: np.ndarray) -> np.ndarray:
    """d(loss)/d(probs) given d(loss)/d(sa_input(images, probs, mode))."""
    probs = np.asarray(probs, dtype=np.float64)
    grad = np.zeros_like(probs)
    if mode == "raw_image":
        return grad
    if mode == "prob_weighted_image":
        grad[:, 0] = -np.sum(np.asarray(grad_out) * np.asarray(images), axis=-1)
        return grad
    if mode == "prob_map":
        a = _class_mixing(probs.shape[1], np.shape(images)[-1])
        return np.einsum("kc,nhwk->nchw", a, np.asarray(grad_out, dtype=np.float64))
    raise ValueError(f"unknown sa_input mode {mode!r}")


# --------------------------------------------------------------------------
# checkpoint container

CKPT_MAGIC = b"SRCK"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sIQ")


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Byte-deterministic container: fixed header, JSON index, raw arrays in key order."""
    index, blobs, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        index.append({"name": name, "dtype": arr.dtype.str.replace(">", "<"),
                      "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": index}, sort_keys=True).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if len(data) < _CKPT_HEAD.size:
        raise FormatError(f"{path}: truncated checkpoint")
    magic, version, hlen = _CKPT_HEAD.unpack_from(data)
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[_CKPT_HEAD.size:_CKPT_HEAD.size + hlen])
    base = _CKPT_HEAD.size + hlen
    arrays = {}
    for item in header["arrays"]:
        start = base + item["offset"]
        buf = data[start:start + item["nbytes"]]
        if len(buf) != item["nbytes"]:
            raise FormatError(f"{path}: truncated array {item['name']}")
        arrays[item["name"]] = np.frombuffer(buf, dtype=item["dtype"]).reshape(item["shape"]).copy()
    return arrays, header["meta"]
