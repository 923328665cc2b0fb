"""Speech adapter: temporal average-pool downsampler plus a projection into
the backbone embedding dimension."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AdapterParams:
    w_proj: np.ndarray  # D_enc x H
    b_proj: np.ndarray  # H
    downsample_factor: int = 4

    def __post_init__(self):
        if self.downsample_factor < 1:
            raise ValueError("downsample_factor must be >= 1")


def make_adapter(
    encoder_dim: int = 64,
    hidden_dim: int = 64,
    downsample_factor: int = 4,
    seed: int = 0,
    dtype=np.float32,
    proj_std: float | None = None,
) -> AdapterParams:
    from .encoder import PROJ_STD

    rng = np.random.default_rng([seed, 12])
    w = rng.normal(0.0, proj_std if proj_std is not None else PROJ_STD, (encoder_dim, hidden_dim))
    return AdapterParams(
        w_proj=w.astype(dtype),
        b_proj=np.zeros(hidden_dim, dtype=dtype),
        downsample_factor=downsample_factor,
    )


def downsample(seq: np.ndarray, factor: int) -> np.ndarray:
    """Average consecutive non-overlapping windows of `factor` rows; a final
    partial window is averaged over its actual length. Output has exactly
    ceil(T / factor) rows."""
    seq = np.asarray(seq)
    if seq.ndim != 2 or seq.shape[0] < 1:
        raise ValueError(f"cannot downsample empty or non-2-D sequence of shape {seq.shape}")
    if factor < 1:
        raise ValueError("factor must be >= 1")
    n_rows = seq.shape[0]
    starts = np.arange(0, n_rows, factor)
    sums = np.add.reduceat(seq, starts, axis=0)
    counts = np.minimum(starts + factor, n_rows) - starts
    return sums / counts[:, None].astype(seq.dtype)


def project(seq: np.ndarray, params: AdapterParams) -> np.ndarray:
    seq = np.asarray(seq)
    if seq.ndim != 2:
        raise ValueError(f"expected a 2-D sequence, got shape {seq.shape}")
    if seq.shape[1] != params.w_proj.shape[0]:
        raise ValueError(
            f"sequence width {seq.shape[1]} does not match projection rows "
            f"{params.w_proj.shape[0]}"
        )
    return seq @ params.w_proj + params.b_proj
