"""The four HEDN sub-networks and their wiring.

Layout (all dense layers; ``D_in`` input features, ``C`` classes)::

    f  feature extractor     D_in -> 64 ReLU -> 64 ReLU
    g  prototype head        64 -> 32 ReLU BN -> 64
    h  emotion classifier    64 -> 32 ReLU -> 64 ReLU -> C
    d  domain discriminator  64 -> 64 ReLU Dropout -> 1 Sigmoid

``d`` sits behind a gradient reversal layer: identity forward, gradient
scaled by ``-lambda`` on the way back into ``f``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from .diffmath import (
    BatchNorm1d,
    Dense,
    Dropout,
    ReLU,
    Sequential,
    ShapeError,
    Sigmoid,
)

FEATURE_DIM = 64
BOTTLENECK_DIM = 32
EMBED_DIM = 64

CHECKPOINT_MAGIC = b"HEDN"
CHECKPOINT_VERSION = 1


class GradientReversal:
    def __init__(self, lam: float = 1.0):
        self.lam = lam

    def forward(self, x):
        return x

    def backward(self, grad_out):
        return -self.lam * grad_out


def feature_extractor(d_in: int, rng) -> Sequential:
    return Sequential(Dense(d_in, FEATURE_DIM, rng), ReLU(),
                      Dense(FEATURE_DIM, FEATURE_DIM, rng), ReLU())


def prototype_head(rng, bn_momentum=0.1, bn_eps=1e-5) -> Sequential:
    return Sequential(Dense(FEATURE_DIM, BOTTLENECK_DIM, rng), ReLU(),
                      BatchNorm1d(BOTTLENECK_DIM, bn_momentum, bn_eps),
                      Dense(BOTTLENECK_DIM, EMBED_DIM, rng))


def emotion_classifier(n_classes: int, rng) -> Sequential:
    return Sequential(Dense(FEATURE_DIM, 32, rng), ReLU(),
                      Dense(32, 64, rng), ReLU(),
                      Dense(64, n_classes, rng))


def domain_discriminator(rng, dropout_p: float, dropout_rng) -> Sequential:
    return Sequential(Dense(FEATURE_DIM, 64, rng), ReLU(),
                      Dropout(dropout_p, dropout_rng),
                      Dense(64, 1, rng), Sigmoid())


@dataclass
class HednModel:
    d_in: int
    n_classes: int
    f: Sequential
    g: Sequential
    h: Sequential
    d: Sequential
    seed: int = 0

    def parts(self) -> list[Sequential]:
        return [self.f, self.g, self.h, self.d]

    def train(self, mode: bool = True) -> None:
        for p in self.parts():
            p.train(mode)

    def eval(self) -> None:
        self.train(False)

    def params(self) -> list[np.ndarray]:
        return [p for part in self.parts() for p in part.params()]

    def buffers(self) -> list[np.ndarray]:
        return [b for part in self.parts() for b in part.buffers()]

    def copy_state(self) -> list[np.ndarray]:
        return [a.copy() for a in self.params() + self.buffers()]


def init_model(d_in: int, n_classes: int, seed: int = 42, dropout_p: float = 0.5,
               bn_momentum: float = 0.1, bn_eps: float = 1e-5) -> HednModel:
    if d_in < 1:
        raise ShapeError(f"input dimension must be >= 1, got {d_in}")
    if n_classes < 2:
        raise ShapeError(f"need at least 2 classes, got {n_classes}")
    init_ss, drop_ss = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(init_ss)
    return HednModel(
        d_in=d_in,
        n_classes=n_classes,
        f=feature_extractor(d_in, rng),
        g=prototype_head(rng, bn_momentum, bn_eps),
        h=emotion_classifier(n_classes, rng),
        d=domain_discriminator(rng, dropout_p, np.random.default_rng(drop_ss)),
        seed=seed,
    )


def count_parameters(model) -> int:
    """Trainable parameters: dense weights and biases plus BN affine terms.
    Running statistics are not counted."""
    return int(sum(p.size for p in model.params()))


def _set_mode(net: Sequential, train: bool) -> None:
    if net.training != train:
        net.train(train)


def forward_features(model: HednModel, x, train: bool = False) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.d_in:
        raise ShapeError(f"expected input of width {model.d_in}, got shape {x.shape}")
    _set_mode(model.f, train)
    return model.f.forward(x)


def forward_embedding(model: HednModel, feats, train: bool = False) -> np.ndarray:
    _set_mode(model.g, train)
    return model.g.forward(feats)


def forward_class_logits(model: HednModel, feats, train: bool = False) -> np.ndarray:
    _set_mode(model.h, train)
    return model.h.forward(feats)


def forward_domain(model: HednModel, feats, train: bool = False) -> np.ndarray:
    """Discriminator probabilities, shape ``(B,)``. The GRL is an identity on
    the forward pass; see :func:`backward_domain`."""
    if feats.shape[1] != FEATURE_DIM:
        raise ShapeError(f"discriminator expects width {FEATURE_DIM}, got {feats.shape[1]}")
    _set_mode(model.d, train)
    return model.d.forward(feats)[:, 0]


def backward_domain(model: HednModel, grad_prob, grl_lambda: float) -> np.ndarray:
    """Backpropagate ``dL/dprob`` through ``d`` (accumulating its gradients
    with positive sign) and return the reversed gradient for the features."""
    grad = model.d.backward(np.asarray(grad_prob, dtype=np.float64)[:, None])
    return GradientReversal(grl_lambda).backward(grad)


def embed(model: HednModel, x) -> np.ndarray:
    """Eval-mode ``g(f(x))``."""
    return forward_embedding(model, forward_features(model, x, False), False)


def predict_logits(model: HednModel, x) -> np.ndarray:
    return forward_class_logits(model, forward_features(model, x, False), False)


# --------------------------------------------------------------------------
# Serialisation
# --------------------------------------------------------------------------


def write_model(fh: BinaryIO, model: HednModel) -> None:
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<III", CHECKPOINT_VERSION, model.d_in, model.n_classes))
    for arr in model.params() + model.buffers():
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_model(fh: BinaryIO) -> HednModel:
    magic = fh.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"not a HEDN checkpoint (magic {magic!r})")
    version, d_in, n_classes = struct.unpack("<III", fh.read(12))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    model = init_model(d_in, n_classes, seed=0)
    for arr in model.params() + model.buffers():
        raw = fh.read(arr.size * 8)
        if len(raw) != arr.size * 8:
            raise ValueError("truncated checkpoint")
        arr[...] = np.frombuffer(raw, dtype="<f8").reshape(arr.shape)
    return model
