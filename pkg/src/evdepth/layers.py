"""Parameter containers and initializers shared by the network blocks.

Kernels draw from uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)); biases start at
zero. Offset-predicting heads and gating convs are zero-initialized so every
deformable path degenerates to a standard convolution at step 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .autodiff import Variable, conv2d


@dataclass
class ConvParams:
    w: Variable
    b: Variable | None = None

    def named(self, prefix: str) -> Iterator[tuple[str, Variable]]:
        yield f"{prefix}.w", self.w
        if self.b is not None:
            yield f"{prefix}.b", self.b

    def apply(self, x, stride: int = 1, pad: int = 1) -> Variable:
        return conv2d(x, self.w, self.b, stride=stride, pad=pad)


def conv_init(rng: np.random.Generator, c_out: int, c_in: int, k: int = 3,
              zero: bool = False, bias: bool = True,
              dtype=np.float32) -> ConvParams:
    fan_in = c_in * k * k
    if zero:
        w = np.zeros((c_out, c_in, k, k), dtype=dtype)
    else:
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(c_out, c_in, k, k)).astype(dtype)
    b = Variable(np.zeros(c_out, dtype=dtype), requires_grad=True) if bias else None
    return ConvParams(Variable(w, requires_grad=True), b)


def kernel_init(rng: np.random.Generator, c_out: int, c_in: int, k: int = 3,
                dtype=np.float32) -> Variable:
    """Bias-free kernel for the deformable redistribution paths."""
    bound = 1.0 / np.sqrt(c_in * k * k)
    w = rng.uniform(-bound, bound, size=(c_out, c_in, k, k)).astype(dtype)
    return Variable(w, requires_grad=True)


def deconv_init(rng: np.random.Generator, c_in: int, c_out: int,
                dtype=np.float32) -> ConvParams:
    fan_in = c_in * 4
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(c_in, c_out, 2, 2)).astype(dtype)
    b = Variable(np.zeros(c_out, dtype=dtype), requires_grad=True)
    return ConvParams(Variable(w, requires_grad=True), b)


def scalar_param(value: float = 0.0, dtype=np.float32) -> Variable:
    return Variable(np.asarray(value, dtype=dtype), requires_grad=True)
