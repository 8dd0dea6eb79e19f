"""Frame encoder, mean-pool aggregator, identity and camera classifiers."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import ShapeMismatch, Tensor

CHECKPOINT_MAGIC = "cawcl-checkpoint"
CHECKPOINT_VERSION = 1


class EmptyTracklet(ValueError):
    pass


class DimMismatch(ValueError):
    pass


def _uniform(rng: np.random.Generator, fan_in: int, shape, name: str) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


@dataclass
class EncoderParams:
    """Perceptron with tanh between layers and a linear output layer.

    ``dims`` lists layer widths from input to output, e.g. ``(16, 32, 16)``
    for the default two-layer encoder. A two-entry ``dims`` gives a single
    linear map.
    """

    weights: list[Tensor]
    biases: list[Tensor]

    @classmethod
    def init(cls, dims: Sequence[int], rng: np.random.Generator) -> "EncoderParams":
        if len(dims) < 2:
            raise ValueError("encoder needs at least input and output dims")
        ws, bs = [], []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            ws.append(_uniform(rng, a, (a, b), f"enc.w{i}"))
            bs.append(_uniform(rng, a, (1, b), f"enc.b{i}"))
        return cls(ws, bs)

    @property
    def d_in(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def params(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.d_in:
            raise ShapeMismatch(f"frame dim {x.shape[1]} != encoder input {self.d_in}")
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = dc.add(dc.matmul(h, w), b)
            if i < last:
                h = dc.tanh(h)
        return h


@dataclass
class IdentityClassifier:
    W: Tensor
    b: Tensor

    @classmethod
    def init(cls, feat_dim: int, n_ids: int, rng: np.random.Generator) -> "IdentityClassifier":
        return cls(_uniform(rng, feat_dim, (feat_dim, n_ids), "id.W"),
                   _uniform(rng, feat_dim, (1, n_ids), "id.b"))

    @property
    def n_classes(self) -> int:
        return self.W.shape[1]

    def params(self) -> list[Tensor]:
        return [self.W, self.b]

    def logits(self, g: Tensor) -> Tensor:
        return dc.add(dc.matmul(g, self.W), self.b)


@dataclass
class CameraClassifier:
    W: Tensor
    b: Tensor
    grl_scale: float = 1.0

    @classmethod
    def init(cls, feat_dim: int, n_cams: int, rng: np.random.Generator,
             grl_scale: float = 1.0) -> "CameraClassifier":
        if n_cams < 2:
            raise ValueError("camera classifier needs at least 2 cameras")
        return cls(_uniform(rng, feat_dim, (feat_dim, n_cams), "cam.W"),
                   _uniform(rng, feat_dim, (1, n_cams), "cam.b"), grl_scale)

    @property
    def n_classes(self) -> int:
        return self.W.shape[1]

    def params(self) -> list[Tensor]:
        return [self.W, self.b]

    def logits(self, g: Tensor, reverse: bool = True) -> Tensor:
        """Camera scores; with ``reverse`` the encoder sees negated gradients."""
        h = dc.grl(g, self.grl_scale) if reverse else g
        return dc.add(dc.matmul(h, self.W), self.b)


def encode_frame(enc: EncoderParams, x) -> np.ndarray:
    return enc.forward(Tensor(np.asarray(x, dtype=np.float64).reshape(1, -1))).data[0]


def aggregate(frames) -> np.ndarray:
    frames = [np.asarray(f, dtype=np.float64) for f in frames]
    if not frames:
        raise EmptyTracklet("cannot aggregate zero frames")
    return np.mean(np.stack(frames), axis=0)


def grl_forward(g) -> np.ndarray:
    return np.asarray(g, dtype=np.float64).copy()


def camera_probs(cam: CameraClassifier, g) -> np.ndarray:
    logits = np.asarray(g, dtype=np.float64) @ cam.W.data + cam.b.data[0]
    return np.exp(dc.log_softmax(logits))


@dataclass
class ReIDModel:
    encoder: EncoderParams
    id_cls: IdentityClassifier
    cam_cls: CameraClassifier
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, d_in: int, d_hidden: int | None, feat_dim: int, n_ids: int,
             n_cams: int, seed: int, grl_scale: float = 1.0) -> "ReIDModel":
        rng = np.random.default_rng(seed)
        dims = (d_in, feat_dim) if not d_hidden else (d_in, d_hidden, feat_dim)
        return cls(EncoderParams.init(dims, rng),
                   IdentityClassifier.init(feat_dim, n_ids, rng),
                   CameraClassifier.init(feat_dim, n_cams, rng, grl_scale))

    @property
    def feat_dim(self) -> int:
        return self.encoder.out_dim

    def named_params(self) -> dict[str, Tensor]:
        return {t.name: t for t in self.encoder.params() + self.id_cls.params() + self.cam_cls.params()}

    def represent(self, frames: np.ndarray | Tensor, sizes: Sequence[int]) -> Tensor:
        """Tracklet (or clip) representations g from stacked frames."""
        x = frames if isinstance(frames, Tensor) else Tensor(frames)
        return dc.group_mean(self.encoder.forward(x), sizes)

    def embed(self, frame_sets: Sequence[np.ndarray]) -> np.ndarray:
        """Gradient-free representations for a list of (n_frames, d_in) arrays."""
        if not frame_sets:
            return np.zeros((0, self.feat_dim))
        sizes = [len(f) for f in frame_sets]
        if min(sizes) < 1:
            raise EmptyTracklet("tracklet with no frames")
        h = np.concatenate(frame_sets, axis=0)
        if h.shape[1] != self.encoder.d_in:
            raise DimMismatch(f"frames have dim {h.shape[1]}, encoder expects {self.encoder.d_in}")
        last = len(self.encoder.weights) - 1
        for i, (w, b) in enumerate(zip(self.encoder.weights, self.encoder.biases)):
            h = h @ w.data + b.data
            if i < last:
                h = np.tanh(h)
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        return np.add.reduceat(h, starts, axis=0) / np.asarray(sizes)[:, None]

    def copy(self) -> "ReIDModel":
        other = ReIDModel(
            EncoderParams([Tensor(w.data.copy(), True, w.name) for w in self.encoder.weights],
                          [Tensor(b.data.copy(), True, b.name) for b in self.encoder.biases]),
            IdentityClassifier(Tensor(self.id_cls.W.data.copy(), True, "id.W"),
                               Tensor(self.id_cls.b.data.copy(), True, "id.b")),
            CameraClassifier(Tensor(self.cam_cls.W.data.copy(), True, "cam.W"),
                             Tensor(self.cam_cls.b.data.copy(), True, "cam.b"),
                             self.cam_cls.grl_scale),
            dict(self.meta))
        return other


# --------------------------------------------------------------- checkpoint
#
# Plain text, full float precision (repr round-trips exactly):
#   cawcl-checkpoint 1
#   grl_scale <float>
#   params <count>
#   <name> <rows> <cols>
#   <row values separated by spaces>   (rows lines)
#   ...


def save_checkpoint(model: ReIDModel, path: str | Path) -> None:
    params = model.named_params()
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}",
             f"grl_scale {model.cam_cls.grl_scale!r}",
             f"params {len(params)}"]
    for name, t in params.items():
        r, c = t.shape
        lines.append(f"{name} {r} {c}")
        for row in t.data:
            lines.append(" ".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path: str | Path) -> ReIDModel:
    it = iter(Path(path).read_text().splitlines())
    magic, version = next(it).split()
    if magic != CHECKPOINT_MAGIC or int(version) != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    _, grl_scale = next(it).split()
    _, count = next(it).split()
    tensors: dict[str, Tensor] = {}
    for _ in range(int(count)):
        name, r, c = next(it).split()
        data = np.array([[float(v) for v in next(it).split()] for _ in range(int(r))])
        if data.shape != (int(r), int(c)):
            raise ValueError(f"{path}: bad shape for {name}")
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    n_layers = sum(1 for k in tensors if k.startswith("enc.w"))
    enc = EncoderParams([tensors[f"enc.w{i}"] for i in range(n_layers)],
                        [tensors[f"enc.b{i}"] for i in range(n_layers)])
    return ReIDModel(enc, IdentityClassifier(tensors["id.W"], tensors["id.b"]),
                     CameraClassifier(tensors["cam.W"], tensors["cam.b"], float(grl_scale)))
