"""Frozen random convolutional image embedder.

Stands in for a large pretrained image encoder: a small conv stack with
fixed seeded weights mapping renders to L2-normalized vectors. It is
never trained; what matters is that it is deterministic, smooth (sine
nonlinearity), differentiable with respect to pixels, and discriminative
enough for directional losses in its embedding space to mean something.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor

_KERNEL = 3
_STRIDE = 2
_PAD = 1


def _im2col_indices(height, width, channels):
    """Flat gather indices turning an image into 3x3/stride-2 patches.

    Out-of-bounds taps point at one extra zero slot appended past the
    flattened image, which implements zero padding with a plain gather.
    """
    out_h = (height + 2 * _PAD - _KERNEL) // _STRIDE + 1
    out_w = (width + 2 * _PAD - _KERNEL) // _STRIDE + 1
    zero_slot = height * width * channels

    oi, oj = np.meshgrid(np.arange(out_h), np.arange(out_w), indexing="ij")
    ki, kj = np.meshgrid(np.arange(_KERNEL), np.arange(_KERNEL), indexing="ij")
    rows = oi.reshape(-1, 1) * _STRIDE + ki.reshape(-1) - _PAD  # (out, 9)
    cols = oj.reshape(-1, 1) * _STRIDE + kj.reshape(-1) - _PAD
    valid = (rows >= 0) & (rows < height) & (cols >= 0) & (cols < width)
    base = np.where(valid, (rows * width + cols) * channels, zero_slot)
    idx = np.where(
        valid[:, :, None],
        base[:, :, None] + np.arange(channels),
        zero_slot,
    )
    return idx.reshape(out_h * out_w, _KERNEL * _KERNEL * channels), out_h, out_w


class FeatureEmbedder:
    """Seeded, immutable conv stack: image -> unit vector of d_emb reals."""

    def __init__(self, resolution=64, d_emb=128, seed=0):
        self.resolution = int(resolution)
        self.d_emb = int(d_emb)
        self.seed = int(seed)
        channels = (3, 16, 32, 64, 64)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))

        self._indices = []
        self._layers = []
        h = w = self.resolution
        for c_in, c_out in zip(channels[:-1], channels[1:]):
            idx, h, w = _im2col_indices(h, w, c_in)
            fan_in = _KERNEL * _KERNEL * c_in
            weight = rng.uniform(-1.0, 1.0, (fan_in, c_out)) * np.sqrt(6.0 / fan_in)
            bias = rng.uniform(-1.0, 1.0, c_out) / np.sqrt(fan_in)
            for arr in (idx, weight, bias):
                arr.setflags(write=False)
            self._indices.append(idx)
            self._layers.append((weight, bias))
        if h * w < 1:
            raise ValueError("FeatureEmbedder: resolution too small for the stack")

        head_w = rng.uniform(-1.0, 1.0, (channels[-1], self.d_emb))
        head_w = head_w * np.sqrt(6.0 / channels[-1])
        head_b = rng.uniform(-1.0, 1.0, self.d_emb) / np.sqrt(channels[-1])
        head_w.setflags(write=False)
        head_b.setflags(write=False)
        self._head = (head_w, head_b)

    def embed(self, img):
        """Embed one (res, res, 3) image; differentiable wrt its pixels."""
        img = as_tensor(img)
        expected = (self.resolution, self.resolution, 3)
        if img.shape != expected:
            raise ValueError(
                f"embed: image shape {img.shape} does not match {expected}"
            )
        zero = Tensor(np.zeros(1))
        x = img.reshape(-1)
        for idx, (weight, bias) in zip(self._indices, self._layers):
            patches = ad.concat([x, zero])[idx]
            x = ad.sin(patches @ Tensor(weight) + Tensor(bias)).reshape(-1)
        pooled = x.reshape(-1, self._layers[-1][0].shape[1]).mean(axis=0)
        head_w, head_b = self._head
        return ad.normalize(pooled @ Tensor(head_w) + Tensor(head_b), axis=-1)


def embed(embedder: FeatureEmbedder, img):
    return embedder.embed(img)


def cos(a, b):
    """Dot product; equals cosine similarity for the unit vectors embed emits."""
    return (as_tensor(a) * as_tensor(b)).sum()
