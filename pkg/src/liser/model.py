"""CNN-LSTM student with supervised, speech-distill and video-distill heads."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .audio import N_FRAMES, N_MELS

N_FILTERS = 64
HIDDEN = 64
HEAD_HIDDEN = 32
# (kernel, pool) per conv block; first axis is frequency, second is time
BLOCKS = (((3, 3), (2, 2)), ((3, 3), (4, 2)), ((3, 1), (4, 1)))


def trunk_shape(freq: int = N_MELS, time: int = N_FRAMES) -> tuple[int, int]:
    for _, (pf, pt) in BLOCKS:
        freq, time = freq // pf, time // pt
    return freq, time


class HeadLogits(NamedTuple):
    sup: T.Tensor
    sd: T.Tensor
    vd: T.Tensor


@dataclass
class StudentParams:
    n_speech: int
    n_video: int
    tensors: dict = field(default_factory=dict)  # name -> Tensor (trainable)
    buffers: dict = field(default_factory=dict)  # name -> ndarray (batch-norm running stats)

    def __getitem__(self, name) -> T.Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def copy(self) -> "StudentParams":
        return StudentParams(
            self.n_speech, self.n_video,
            {k: T.Tensor(v.data.copy(), requires_grad=True) for k, v in self.tensors.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def arrays(self) -> dict[str, np.ndarray]:
        """Every block, trainable and buffers, in a fixed order."""
        out = {k: v.data for k, v in self.tensors.items()}
        out.update(self.buffers)
        return out

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.arrays().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


def _shapes(n_speech: int, n_video: int) -> list[tuple[str, tuple, int]]:
    """(name, shape, fan_in) per trainable tensor; fan_in 0 means zero init, -1 means ones."""
    layout = []
    cin = 1
    for b, ((kh, kw), _) in enumerate(BLOCKS, start=1):
        layout += [
            (f"conv{b}.weight", (N_FILTERS, cin, kh, kw), cin * kh * kw),
            (f"conv{b}.bias", (N_FILTERS,), 0),
            (f"bn{b}.gamma", (N_FILTERS,), -1),
            (f"bn{b}.beta", (N_FILTERS,), 0),
        ]
        cin = N_FILTERS
    freq, _ = trunk_shape()
    d = N_FILTERS * freq
    layout += [
        ("lstm.w_ih", (4 * HIDDEN, d), d),
        ("lstm.w_hh", (4 * HIDDEN, HIDDEN), HIDDEN),
        ("lstm.b_ih", (4 * HIDDEN,), 0),
        ("lstm.b_hh", (4 * HIDDEN,), 0),
        ("sup.weight", (n_speech, HIDDEN), HIDDEN),
        ("sup.bias", (n_speech,), 0),
    ]
    for head, k in (("sd", n_speech), ("vd", n_video)):
        layout += [
            (f"{head}.fc1.weight", (HEAD_HIDDEN, HIDDEN), HIDDEN),
            (f"{head}.fc1.bias", (HEAD_HIDDEN,), 0),
            (f"{head}.fc2.weight", (k, HEAD_HIDDEN), HEAD_HIDDEN),
            (f"{head}.fc2.bias", (k,), 0),
        ]
    return layout


def init_student(n_speech: int = 8, n_video: int = 7, seed: int = 0) -> StudentParams:
    if n_speech < 2 or n_video < 2:
        raise ValueError("need at least two speech and two video classes")
    rng = np.random.default_rng(seed)
    params = StudentParams(n_speech, n_video)
    for name, shape, fan_in in _shapes(n_speech, n_video):
        if fan_in > 0:
            bound = 1.0 / np.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        elif fan_in == -1:
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params.tensors[name] = T.Tensor(data, requires_grad=True)
    for b in range(1, len(BLOCKS) + 1):
        params.buffers[f"bn{b}.running_mean"] = np.zeros(N_FILTERS)
        params.buffers[f"bn{b}.running_var"] = np.ones(N_FILTERS)
    return params


def param_count(params: StudentParams) -> int:
    return sum(t.data.size for t in params.tensors.values())


def forward(params: StudentParams, batch, mode: str = "eval", update_stats: bool = True) -> HeadLogits:
    """Logits of all three heads for an N x 1 x 64 x 90 batch.

    ``update_stats=False`` keeps the running batch-norm statistics untouched
    in train mode (used by gradient checks).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = T.as_tensor(batch)
    if x.ndim != 4 or x.shape[1:] != (1, N_MELS, N_FRAMES):
        raise ValueError(f"expected N x 1 x {N_MELS} x {N_FRAMES} input, got {x.shape}")
    p = params.tensors
    training = mode == "train"
    for b, (_, pool) in enumerate(BLOCKS, start=1):
        x = T.conv2d(x, p[f"conv{b}.weight"], p[f"conv{b}.bias"])
        rm = params.buffers[f"bn{b}.running_mean"] if (update_stats or not training) else None
        rv = params.buffers[f"bn{b}.running_var"] if (update_stats or not training) else None
        x = T.batchnorm2d(x, p[f"bn{b}.gamma"], p[f"bn{b}.beta"], training, rm, rv)
        # relu commutes with max-pooling; pooling first touches 4x less memory
        x = T.relu(T.maxpool2d(x, pool))
    n, c, freq, time = x.shape
    # LSTM step t sees channels x frequency at pooled time t
    seq = T.reshape(T.transpose(x, (0, 3, 1, 2)), (n, time, c * freq))
    h, _ = T.lstm(seq, p["lstm.w_ih"], p["lstm.w_hh"], p["lstm.b_ih"], p["lstm.b_hh"])
    sup = T.linear(h, p["sup.weight"], p["sup.bias"])
    heads = []
    for head in ("sd", "vd"):
        z = T.relu(T.linear(h, p[f"{head}.fc1.weight"], p[f"{head}.fc1.bias"]))
        heads.append(T.linear(z, p[f"{head}.fc2.weight"], p[f"{head}.fc2.bias"]))
    return HeadLogits(sup, *heads)
