"""Two-conv / two-fc traffic-sign classifier, cross-entropy loss and Adadelta."""
from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_VERSION = 1
PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "fc1_w", "fc1_b", "fc2_w", "fc2_b")


@dataclass(frozen=True)
class ArchConfig:
    """Layer sizes. Defaults: conv 3->32 (5x5), pool, conv 32->64 (5x5), pool, fc ->128, fc ->classes."""

    n_classes: int = 14
    in_channels: int = 3
    image_size: int = 32
    conv1_channels: int = 32
    conv2_channels: int = 64
    kernel_size: int = 5
    hidden: int = 128

    @property
    def flat_features(self) -> int:
        s = (self.image_size - self.kernel_size + 1) // 2
        s = (s - self.kernel_size + 1) // 2
        if s < 1:
            raise ValueError(f"image_size {self.image_size} too small for kernel {self.kernel_size}")
        return self.conv2_channels * s * s

    def param_shapes(self) -> dict[str, tuple]:
        k = self.kernel_size
        return {
            "conv1_w": (self.conv1_channels, self.in_channels, k, k),
            "conv1_b": (self.conv1_channels,),
            "conv2_w": (self.conv2_channels, self.conv1_channels, k, k),
            "conv2_b": (self.conv2_channels,),
            "fc1_w": (self.flat_features, self.hidden),
            "fc1_b": (self.hidden,),
            "fc2_w": (self.hidden, self.n_classes),
            "fc2_b": (self.n_classes,),
        }

    def n_params(self) -> int:
        return int(sum(np.prod(s) for s in self.param_shapes().values()))


@dataclass
class PassCounter:
    """Counts classifier forward and backward passes (one per batch evaluation)."""

    forward: int = 0
    backward: int = 0

    def reset(self) -> None:
        self.forward = 0
        self.backward = 0

    def snapshot(self) -> tuple[int, int]:
        return self.forward, self.backward


@dataclass
class ClassifierParams:
    arch: ArchConfig
    tensors: dict[str, Tensor]
    seed: int | None = None
    counter: PassCounter = field(default_factory=PassCounter, compare=False)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def leaves(self) -> list[Tensor]:
        return [self.tensors[n] for n in PARAM_NAMES]

    def copy(self) -> "ClassifierParams":
        return ClassifierParams(
            self.arch,
            {n: Tensor(t.data.copy(), requires_grad=t.requires_grad) for n, t in self.tensors.items()},
            self.seed,
        )

    def frozen(self) -> "ClassifierParams":
        """Untracked view sharing weights and pass counter; theta is a constant under it."""
        return ClassifierParams(self.arch, {n: Tensor(t.data) for n, t in self.tensors.items()},
                                self.seed, self.counter)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.tensors[n].data.ravel() for n in PARAM_NAMES])


def init_classifier(seed: int, n_classes: int = 14, input_shape: tuple = (3, 32, 32),
                    arch: ArchConfig | None = None, dtype=np.float32) -> ClassifierParams:
    """Fan-in scaled uniform weights, zero biases; deterministic in ``seed``."""
    if n_classes < 2:
        raise ValueError(f"n_classes must be >= 2, got {n_classes}")
    c, h, w = input_shape
    if h != w:
        raise ValueError(f"square inputs required, got {input_shape}")
    if arch is None:
        arch = ArchConfig(n_classes=n_classes, in_channels=c, image_size=h)
    elif (arch.n_classes, arch.in_channels, arch.image_size) != (n_classes, c, h):
        arch = ArchConfig(**{**asdict(arch), "n_classes": n_classes, "in_channels": c, "image_size": h})
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith("_b"):
            data = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape).astype(dtype)
        tensors[name] = Tensor(data, requires_grad=True)
    return ClassifierParams(arch, tensors, seed)


def forward(params: ClassifierParams, x) -> Tensor:
    """Logits for a batch ``x`` of shape (B, C, H, W) with values in [0, 1]."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    a = params.arch
    if x.ndim != 4 or x.shape[1:] != (a.in_channels, a.image_size, a.image_size):
        raise T.ShapeError(
            f"expected input (B, {a.in_channels}, {a.image_size}, {a.image_size}), got {x.shape}")
    params.counter.forward += 1
    p = params.tensors
    h = T.maxpool2d(T.relu(T.conv2d(x, p["conv1_w"], p["conv1_b"])))
    h = T.maxpool2d(T.relu(T.conv2d(h, p["conv2_w"], p["conv2_b"])))
    h = T.reshape(h, (x.shape[0], -1))
    h = T.relu(T.matmul(h, p["fc1_w"]) + p["fc1_b"])
    return T.matmul(h, p["fc2_w"]) + p["fc2_b"]


def predict_proba(params: ClassifierParams, x, batch_size: int = 256) -> np.ndarray:
    x = np.asarray(x)
    out = []
    for i in range(0, len(x), batch_size):
        logits = forward(params, Tensor(x[i:i + batch_size])).data
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        out.append(e / e.sum(axis=1, keepdims=True))
    if not out:
        return np.zeros((0, params.arch.n_classes), dtype=np.float32)
    return np.concatenate(out)


def per_sample_cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels)
    n = logits.shape[1]
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise T.ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"labels must lie in [0, {n}), got range [{labels.min()}, {labels.max()}]")
    return -T.pick(T.log_softmax(logits), labels.astype(np.int64))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the true class."""
    return T.mean_all(per_sample_cross_entropy(logits, labels))


@dataclass
class AdadeltaState:
    square_avg: list[np.ndarray]
    delta_avg: list[np.ndarray]
    rho: float = 0.9
    eps: float = 1e-6
    lr: float = 1.0

    @classmethod
    def for_params(cls, params: ClassifierParams, rho: float = 0.9, eps: float = 1e-6,
                   lr: float = 1.0) -> "AdadeltaState":
        leaves = params.leaves()
        return cls([np.zeros_like(t.data) for t in leaves], [np.zeros_like(t.data) for t in leaves],
                   rho, eps, lr)


def adadelta_step(params: ClassifierParams, grads: list[np.ndarray], state: AdadeltaState) -> None:
    """In-place Adadelta update of ``params`` (order of ``params.leaves()``)."""
    leaves = params.leaves()
    if len(grads) != len(leaves):
        raise ValueError(f"expected {len(leaves)} gradients, got {len(grads)}")
    rho, eps = state.rho, state.eps
    for i, (p, g) in enumerate(zip(leaves, grads)):
        if g.shape != p.shape:
            raise T.ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        sq, acc = state.square_avg[i], state.delta_avg[i]
        sq *= rho
        sq += (1 - rho) * g * g
        delta = np.sqrt(acc + eps) / np.sqrt(sq + eps) * g
        acc *= rho
        acc += (1 - rho) * delta * delta
        p.data -= (state.lr * delta).astype(p.dtype, copy=False)


# checkpoints


def _encode(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f4").tobytes()).decode("ascii")


def save_checkpoint(params: ClassifierParams, path: str | Path) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "arch": asdict(params.arch),
        "seed": params.seed,
        "dtype": "float32",
        "params": {n: {"shape": list(params[n].shape), "data": _encode(params[n].data)}
                   for n in PARAM_NAMES},
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path: str | Path) -> ClassifierParams:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    arch = ArchConfig(**doc["arch"])
    tensors = {}
    for name, shape in arch.param_shapes().items():
        entry = doc["params"][name]
        data = np.frombuffer(base64.b64decode(entry["data"]), dtype="<f4").astype(np.float32)
        if tuple(entry["shape"]) != shape or data.size != int(np.prod(shape)):
            raise ValueError(f"checkpoint tensor {name} does not match architecture shape {shape}")
        tensors[name] = Tensor(data.reshape(shape), requires_grad=True)
    return ClassifierParams(arch, tensors, doc.get("seed"))
