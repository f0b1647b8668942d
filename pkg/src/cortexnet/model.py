"""Recurrent vision network built from discriminative/generative block pairs.

The network stacks L levels. On the way up, level n convolves the
concatenation of the level below's output with that level's own feedback
tensor from the previous step. On the way down, transposed convolutions
rebuild the frame; each generative block (except the lowest) superposes the
lateral branch taken right after the matching discriminative convolution,
and its output becomes next step's feedback for the same level. The lowest
generative output is the next-frame prediction; the top discriminative
output is pooled into an embedding and classified by a linear head.

Feedback is delayed exactly one step and starts as zeros, so the first step
after a reset is purely feed-forward.
"""

from __future__ import annotations

import io
import struct
from collections import OrderedDict
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .serial import FormatError, read_named_tensors, write_named_tensors

CHECKPOINT_MAGIC = b"CXCK"
CHECKPOINT_VERSION = 1

DEFAULT_FEATURE_MAPS = (3, 32, 64, 128, 256)


class CheckpointError(RuntimeError):
    """Unreadable or incompatible checkpoint file."""


def default_feature_maps(depth: int) -> tuple[int, ...]:
    """3, 32, 64, 128, 256, then 256 repeated for deeper stacks."""
    maps = list(DEFAULT_FEATURE_MAPS)
    while len(maps) < depth + 1:
        maps.append(maps[-1])
    return tuple(maps[: depth + 1])


@dataclass(frozen=True)
class LayerSpec:
    """Static architecture description: depth, feature ladder, input side,
    classifier width, and whether per-sample normalization is inserted."""

    depth: int
    feature_maps: tuple[int, ...]
    side: int
    classes: int
    norm: bool = True

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if len(self.feature_maps) != self.depth + 1:
            raise ValueError(f"need {self.depth + 1} feature map counts, got {len(self.feature_maps)}")
        if self.feature_maps[0] != 3:
            raise ValueError("feature_maps[0] must be 3 (RGB input)")
        if any(f < 1 for f in self.feature_maps):
            raise ValueError("feature map counts must be >= 1")
        if self.side % (1 << self.depth):
            raise ValueError(f"input side {self.side} not divisible by 2^{self.depth}")
        if self.classes < 1:
            raise ValueError("classifier width must be >= 1")

    @staticmethod
    def make(depth: int, side: int, classes: int, feature_maps=None, norm: bool = True) -> "LayerSpec":
        maps = tuple(feature_maps) if feature_maps else default_feature_maps(depth)
        return LayerSpec(depth, maps, side, classes, norm)


@dataclass
class ModelState:
    """Per-batch-row feedback tensors g_n from the previous step (n = 2..L)
    plus an age counter of frames seen since the last reset."""

    feedback: "OrderedDict[int, T.Tensor]"
    ages: np.ndarray

    @staticmethod
    def zeros(spec: LayerSpec, batch: int, dtype=np.float32) -> "ModelState":
        fb: OrderedDict[int, T.Tensor] = OrderedDict()
        for n in range(2, spec.depth + 1):
            side = spec.side >> (n - 1)
            fb[n] = T.as_tensor(np.zeros((batch, spec.feature_maps[n - 1], side, side), dtype=dtype))
        return ModelState(fb, np.zeros(batch, dtype=np.int64))

    @property
    def batch(self) -> int:
        return self.ages.shape[0]

    def reset_rows(self, mask: np.ndarray) -> "ModelState":
        """Zero the feedback of selected rows; other rows are untouched."""
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (self.batch,):
            raise T.ShapeError(f"reset mask length {mask.shape} for batch {self.batch}")
        if not mask.any():
            return self
        fb = OrderedDict((n, T.zero_rows(t, mask)) for n, t in self.feedback.items())
        ages = self.ages.copy()
        ages[mask] = 0
        return ModelState(fb, ages)

    def detached(self) -> "ModelState":
        """Same values, no recorded ancestry: the chunk-boundary barrier."""
        return ModelState(
            OrderedDict((n, t.detach()) for n, t in self.feedback.items()),
            self.ages.copy(),
        )

    def aged(self) -> np.ndarray:
        return self.ages


@dataclass
class StepOutput:
    """One recurrence step: predicted next frame, embedding, logits, and the
    feedback state to feed into the following step."""

    prediction: T.Tensor
    embedding: T.Tensor
    logits: T.Tensor
    state: ModelState


class CortexModel:
    """Parameters for L discriminative/generative block pairs and a linear
    classifier head, with the step functions that wire them together."""

    def __init__(self, spec: LayerSpec, rng: np.random.Generator | int | None = 0, dtype=np.float32):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.spec = spec
        self.dtype = dtype
        f = spec.feature_maps
        p: OrderedDict[str, T.Tensor] = OrderedDict()
        for n in range(1, spec.depth + 1):
            c_in = f[0] if n == 1 else 2 * f[n - 1]
            p[f"d{n}.w"] = T.uniform_init(rng, (f[n], c_in, 3, 3), c_in * 9, dtype)
            p[f"d{n}.b"] = T.parameter(np.zeros(f[n], dtype=dtype))
            if spec.norm:
                p[f"d{n}.ng"] = T.parameter(np.ones(f[n], dtype=dtype))
                p[f"d{n}.nb"] = T.parameter(np.zeros(f[n], dtype=dtype))
        for n in range(1, spec.depth + 1):
            p[f"g{n}.w"] = T.uniform_init(rng, (f[n], f[n - 1], 3, 3), f[n] * 9, dtype)
            p[f"g{n}.b"] = T.parameter(np.zeros(f[n - 1], dtype=dtype))
            # the lowest generative block is the raw output head: no norm
            if spec.norm and n >= 2:
                p[f"g{n}.ng"] = T.parameter(np.ones(f[n - 1], dtype=dtype))
                p[f"g{n}.nb"] = T.parameter(np.zeros(f[n - 1], dtype=dtype))
        p["head.w"] = T.uniform_init(rng, (spec.classes, f[spec.depth]), f[spec.depth], dtype)
        p["head.b"] = T.parameter(np.zeros(spec.classes, dtype=dtype))
        self.params = p

    # -- parameter access ---------------------------------------------------

    def named_parameters(self) -> "OrderedDict[str, T.Tensor]":
        return self.params

    def parameters(self) -> list[T.Tensor]:
        return list(self.params.values())

    def init_state(self, batch: int) -> ModelState:
        return ModelState.zeros(self.spec, batch, self.dtype)

    # -- forward passes -----------------------------------------------------

    def _up_path(self, x: T.Tensor, feedback: "OrderedDict[int, T.Tensor] | None"):
        """Discriminative ladder. Returns (block outputs, lateral branches)."""
        spec = self.spec
        d_out: list[T.Tensor] = []
        lateral: list[T.Tensor] = []
        cur = x
        for n in range(1, spec.depth + 1):
            if n == 1:
                inp = cur
            else:
                fb = feedback[n] if feedback is not None else None
                if fb is None:
                    fb = T.as_tensor(np.zeros(cur.shape, dtype=cur.data.dtype))
                inp = T.concat_channels(cur, fb)
            y = T.conv2d(inp, self.params[f"d{n}.w"], self.params[f"d{n}.b"])
            if spec.norm:
                y = T.feature_norm(y, self.params[f"d{n}.ng"], self.params[f"d{n}.nb"])
            lateral.append(y)
            cur = T.relu(y)
            d_out.append(cur)
        return d_out, lateral

    def _head(self, top: T.Tensor) -> tuple[T.Tensor, T.Tensor]:
        emb = T.global_avg_pool(top)
        logits = T.linear(emb, self.params["head.w"], self.params["head.b"])
        return emb, logits

    def forward_step(self, x: T.Tensor, state: ModelState) -> StepOutput:
        """One recurrence step on a (B,3,R,R) frame batch."""
        spec = self.spec
        self._check_input(x)
        if state.batch != x.shape[0]:
            raise T.ShapeError(f"state batch {state.batch} != input batch {x.shape[0]}")
        d_out, lateral = self._up_path(x, state.feedback)

        new_fb: OrderedDict[int, T.Tensor] = OrderedDict()
        u = d_out[-1]
        prediction = None
        for n in range(spec.depth, 0, -1):
            z = T.conv_transpose2d(u, self.params[f"g{n}.w"], self.params[f"g{n}.b"])
            if n >= 2:
                if spec.norm:
                    z = T.feature_norm(z, self.params[f"g{n}.ng"], self.params[f"g{n}.nb"])
                g = T.relu(T.add(z, lateral[n - 2]))
                new_fb[n] = g
                u = g
            else:
                prediction = z
        emb, logits = self._head(d_out[-1])
        # feedback dict ordered by level for deterministic traversal
        ordered = OrderedDict(sorted(new_fb.items()))
        return StepOutput(prediction, emb, logits, ModelState(ordered, state.ages + 1))

    def feedforward_logits(self, x: T.Tensor) -> T.Tensor:
        """Discriminative branch only: zero feedback, no state update."""
        self._check_input(x)
        d_out, _ = self._up_path(x, None)
        _, logits = self._head(d_out[-1])
        return logits

    def static_logits(self, x: T.Tensor, state: ModelState) -> T.Tensor:
        """Logits from a second up-path pass with the feedback detached, so
        gradients reach this step's parameters but never earlier steps."""
        self._check_input(x)
        detached = state.detached()
        d_out, _ = self._up_path(x, detached.feedback)
        _, logits = self._head(d_out[-1])
        return logits

    def _check_input(self, x: T.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != self.spec.side or x.shape[3] != self.spec.side:
            raise T.ShapeError(
                f"expected input (B,3,{self.spec.side},{self.spec.side}), got {x.shape}"
            )

    # -- surgery ------------------------------------------------------------

    def replace_classifier(self, classes: int, rng: np.random.Generator | int | None = 0) -> "CortexModel":
        """Fresh linear head of the requested width; every other parameter is
        carried over bit-exactly (tensors are shared, not copied)."""
        if classes < 1:
            raise ValueError("classifier width must be >= 1")
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        new_spec = replace(self.spec, classes=classes)
        out = CortexModel.__new__(CortexModel)
        out.spec = new_spec
        out.dtype = self.dtype
        out.params = OrderedDict(self.params)
        f_top = self.spec.feature_maps[self.spec.depth]
        out.params["head.w"] = T.uniform_init(rng, (classes, f_top), f_top, self.dtype)
        out.params["head.b"] = T.parameter(np.zeros(classes, dtype=self.dtype))
        return out


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _pack_spec(spec: LayerSpec, epoch: int) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", spec.depth))
    buf.write(struct.pack(f"<{spec.depth + 1}I", *spec.feature_maps))
    buf.write(struct.pack("<IIBI", spec.side, spec.classes, int(spec.norm), epoch))
    return buf.getvalue()


def _unpack_spec(stream) -> tuple[LayerSpec, int]:
    (depth,) = struct.unpack("<I", stream.read(4))
    maps = struct.unpack(f"<{depth + 1}I", stream.read(4 * (depth + 1)))
    side, classes, norm, epoch = struct.unpack("<IIBI", stream.read(13))
    return LayerSpec(depth, maps, side, classes, bool(norm)), epoch


def save_checkpoint(path, model: CortexModel, optimizer=None, epoch: int = 0) -> None:
    """Write model parameters (and optimizer momentum, when given) so that a
    save -> load -> save round trip is byte-identical."""
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, p in model.named_parameters().items():
        tensors[name] = p.data
    if optimizer is not None:
        for name, buf in optimizer.state_tensors().items():
            tensors[f"opt.{name}"] = buf
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<B", CHECKPOINT_VERSION))
        fh.write(_pack_spec(model.spec, epoch))
        write_named_tensors(fh, tensors)


def load_checkpoint(path, model: CortexModel | None = None):
    """Read a checkpoint; returns (model, optimizer_buffers, epoch).

    With ``model`` given, parameters are loaded into it and its spec must
    match the stored one exactly. No state is mutated on failure.
    """
    try:
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != CHECKPOINT_MAGIC:
                raise CheckpointError(f"bad checkpoint magic {magic!r}")
            (version,) = struct.unpack("<B", fh.read(1))
            if version != CHECKPOINT_VERSION:
                raise CheckpointError(f"unsupported checkpoint version {version}")
            spec, epoch = _unpack_spec(fh)
            tensors = read_named_tensors(fh)
    except (struct.error, FormatError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc

    if model is None:
        model = CortexModel(spec, rng=0)
    elif model.spec != spec:
        raise CheckpointError(f"checkpoint spec {spec} does not match model spec {model.spec}")

    params = model.named_parameters()
    opt_buffers: dict[str, np.ndarray] = {}
    staged: dict[str, np.ndarray] = {}
    for name, arr in tensors.items():
        if name.startswith("opt."):
            opt_buffers[name[4:]] = arr
            continue
        if name not in params:
            raise CheckpointError(f"checkpoint has unknown parameter {name!r}")
        if arr.shape != params[name].data.shape:
            raise CheckpointError(f"parameter {name!r} shape mismatch")
        staged[name] = arr
    missing = set(params) - set(staged)
    if missing:
        raise CheckpointError(f"checkpoint missing parameters: {sorted(missing)}")
    for name, arr in staged.items():
        params[name].data = arr.astype(model.dtype, copy=False)
        params[name].grad = None
    return model, opt_buffers, epoch
