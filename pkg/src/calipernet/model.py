"""CoordConv-augmented FCN8-style network for two-class endpoint maps."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import ProbabilityMap, Tensor


@dataclass
class ModelConfig:
    input_size: tuple[int, int] = (128, 128)
    encoder_channels: list[int] = field(default_factory=lambda: [16, 32, 64])
    num_classes: int = 2
    dropout_rate: float = 0.1
    seed: int = 0
    coordconv: bool = True
    norm_epsilon: float = 1e-5

    def validate(self) -> None:
        h, w = self.input_size
        if h < 8 or w < 8 or h % 8 or w % 8:
            raise ValueError(f"input_size: both sides must be multiples of 8, got {self.input_size}")
        if len(self.encoder_channels) != 3 or any(c < 1 for c in self.encoder_channels):
            raise ValueError(
                f"encoder_channels: need exactly 3 positive widths, got {self.encoder_channels}"
            )
        if self.num_classes < 2:
            raise ValueError(f"num_classes: must be >= 2, got {self.num_classes}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate: must be in [0, 1), got {self.dropout_rate}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["input_size"] = tuple(d["input_size"])
        d["encoder_channels"] = list(d["encoder_channels"])
        return cls(**d)


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p.data = np.array(state[k], dtype=T.DTYPE)

    def copy(self) -> "Model":
        return Model(
            ModelConfig.from_dict(self.config.to_dict()),
            {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()},
        )


def coordconv_augment(x: Tensor) -> Tensor:
    """Append normalised row and column coordinate channels, each in [-1, 1]."""
    h, w = x.shape[:2]
    return T.concat_channels(x, Tensor(coordinate_channels(h, w)))


def coordinate_channels(h: int, w: int) -> np.ndarray:
    rows = 2.0 * np.arange(h) / (h - 1) - 1.0 if h > 1 else np.zeros(1)
    cols = 2.0 * np.arange(w) / (w - 1) - 1.0 if w > 1 else np.zeros(1)
    out = np.empty((h, w, 2), dtype=T.DTYPE)
    out[:, :, 0] = rows[:, None]
    out[:, :, 1] = cols[None, :]
    return out


def parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in declared (checkpoint) order."""
    shapes = []
    c_prev = 1 + (2 if config.coordconv else 0)
    for s, c in enumerate(config.encoder_channels, start=1):
        shapes += [
            (f"stage{s}.conv1.weight", (3, 3, c_prev, c)),
            (f"stage{s}.conv1.bias", (c,)),
            (f"stage{s}.norm1.gamma", (c,)),
            (f"stage{s}.norm1.beta", (c,)),
            (f"stage{s}.conv2.weight", (3, 3, c, c)),
            (f"stage{s}.conv2.bias", (c,)),
            (f"stage{s}.norm2.gamma", (c,)),
            (f"stage{s}.norm2.beta", (c,)),
            (f"stage{s}.down.weight", (3, 3, c, c)),
            (f"stage{s}.down.bias", (c,)),
        ]
        c_prev = c
    for s, c in enumerate(config.encoder_channels, start=1):
        shapes += [
            (f"score{s}.weight", (1, 1, c, config.num_classes)),
            (f"score{s}.bias", (config.num_classes,)),
        ]
    return shapes


def build_model(config: ModelConfig, rng: Optional[np.random.Generator] = None) -> Model:
    """Initialise a model deterministically from ``config.seed`` (or ``rng``).

    Encoder kernels get He fan-in scaling; score heads start at zero so an
    untrained network predicts a uniform map.
    """
    config.validate()
    if rng is None:
        rng = np.random.default_rng(config.seed)
    params: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config):
        if name.endswith(".gamma"):
            data = np.ones(shape)
        elif name.endswith(".weight") and not name.startswith("score"):
            fan_in = shape[0] * shape[1] * shape[2]
            data = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return Model(config, params)


def forward(
    model: Model,
    image: Tensor,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Logits (h x w x num_classes) for an h x w x 1 image."""
    cfg = model.config
    if not isinstance(image, Tensor):
        image = Tensor(image)
    if image.data.ndim == 2:
        image = Tensor(image.data[:, :, None])
    if tuple(image.shape[:2]) != tuple(cfg.input_size) or image.shape[2] != 1:
        raise ValueError(
            f"forward: expected image of shape {tuple(cfg.input_size)} x 1, got {image.shape}"
        )
    if training and cfg.dropout_rate > 0 and rng is None:
        raise ValueError("forward: training with dropout needs an rng")
    p = model.params
    eps = cfg.norm_epsilon

    x = coordconv_augment(image) if cfg.coordconv else image
    features = []
    for s in range(1, 4):
        x = T.conv2d(x, p[f"stage{s}.conv1.weight"], p[f"stage{s}.conv1.bias"], 1, 1)
        x = T.relu(T.channel_norm(x, p[f"stage{s}.norm1.gamma"], p[f"stage{s}.norm1.beta"], eps))
        x = T.conv2d(x, p[f"stage{s}.conv2.weight"], p[f"stage{s}.conv2.bias"], 1, 1)
        x = T.relu(T.channel_norm(x, p[f"stage{s}.norm2.gamma"], p[f"stage{s}.norm2.beta"], eps))
        x = T.conv2d(x, p[f"stage{s}.down.weight"], p[f"stage{s}.down.bias"], 2, 1)
        x = T.spatial_dropout(x, cfg.dropout_rate, rng, training)
        features.append(x)

    scores = [
        T.conv2d(f, p[f"score{s}.weight"], p[f"score{s}.bias"], 1, 0)
        for s, f in enumerate(features, start=1)
    ]
    fused = T.add(T.bilinear_upsample(scores[2], 2), scores[1])
    fused = T.add(T.bilinear_upsample(fused, 2), scores[0])
    return T.bilinear_upsample(fused, 2)


def predict_probs(model: Model, image: Tensor) -> ProbabilityMap:
    return T.softmax_channels(forward(model, image, training=False))


# ---------------------------------------------------------------------------
# checkpoints
#
# A checkpoint is an uncompressed .npz archive holding
#   __format__   "calipernet-checkpoint-v1"
#   __config__   JSON echo of ModelConfig
#   __seed__     int64 scalar (config seed at build time)
#   __names__    parameter names in declared order
#   p000 ...     float64 parameter arrays in that same order

CHECKPOINT_FORMAT = "calipernet-checkpoint-v1"


def save_checkpoint(model: Model, path, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(model.params)
    arrays = {f"p{i:03d}": model.params[n].data for i, n in enumerate(names)}
    meta = {"extra": extra or {}}
    with open(path, "wb") as fh:
        np.savez(
            fh,
            __format__=np.array(CHECKPOINT_FORMAT),
            __config__=np.array(json.dumps(model.config.to_dict(), sort_keys=True)),
            __meta__=np.array(json.dumps(meta, sort_keys=True)),
            __seed__=np.array(model.config.seed, dtype=np.int64),
            __names__=np.array(names),
            **arrays,
        )
    return path


def load_checkpoint(path) -> Model:
    with np.load(Path(path), allow_pickle=False) as z:
        if str(z["__format__"]) != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        config = ModelConfig.from_dict(json.loads(str(z["__config__"])))
        names = [str(n) for n in z["__names__"]]
        expected = [n for n, _ in parameter_shapes(config)]
        if names != expected:
            raise ValueError(f"{path}: parameter list does not match its config")
        params = {
            n: Tensor(np.array(z[f"p{i:03d}"]), requires_grad=True, name=n)
            for i, n in enumerate(names)
        }
    return Model(config, params)
