"""Differentiable operations with hand-written backward passes.

Everything the model zoo needs: dense layers, sigmoid/relu, softmax with
fused cross-entropy, inverted dropout, an LSTM with backprop through
time, and a central-finite-difference gradient checker.  Layers cache
their forward inputs, accumulate parameter gradients on ``backward``,
and return the gradient with respect to their input.

Arrays are plain numpy ndarrays.  float32 is the training default;
gradient verification requires float64.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Callable, Sequence

import numpy as np

from sarv.errors import DataError, NumericsError, SarvError

EPS_LOG = 1e-12


class GradCheckError(SarvError):
    """A gradient check could not be evaluated (non-finite op output)."""


def require_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values in {what}")


class Parameter:
    """A named value array with a same-shaped gradient buffer."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def zero_grads(params: Sequence[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], dtype) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable elementwise logistic function."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Dense:
    """Affine map ``x @ W + b`` with row-broadcast bias."""

    def __init__(self, input_size: int, output_size: int, rng: np.random.Generator,
                 dtype=np.float32, name: str = "dense"):
        self.name = name
        self.input_size = input_size
        self.W = Parameter(f"{name}.W", glorot_uniform(rng, (input_size, output_size), dtype))
        self.b = Parameter(f"{name}.b", np.zeros(output_size, dtype=dtype))
        self._x: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.input_size:
            raise ValueError(
                f"{self.name}: input shape {x.shape} does not match "
                f"weight shape {self.W.value.shape}"
            )
        self._x = x
        out = x @ self.W.value + self.b.value
        require_finite(out, self.name)
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        self.W.grad += self._x.T @ dout
        self.b.grad += dout.sum(axis=0)
        return dout @ self.W.value.T

    def params(self) -> list[Parameter]:
        return [self.W, self.b]


class Sigmoid:
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._out = sigmoid(x)
        return self._out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return dout * self._out * (1.0 - self._out)

    def params(self) -> list[Parameter]:
        return []


class Relu:
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return np.maximum(x, 0)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return dout * self._mask

    def params(self) -> list[Parameter]:
        return []


ACTIVATIONS = {"sigmoid": Sigmoid, "relu": Relu}


class Dropout:
    """Inverted dropout: scale survivors at train time, identity at eval."""

    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self._scale: np.ndarray | None = None

    def forward(self, x: np.ndarray, mode: str = "train",
                rng: np.random.Generator | None = None) -> np.ndarray:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        if mode == "eval" or self.rate == 0.0:
            self._scale = None
            return x
        if rng is None:
            raise ValueError("train-mode dropout needs an rng")
        keep = rng.random(x.shape) >= self.rate
        self._scale = keep.astype(x.dtype) / (1.0 - self.rate)
        return x * self._scale

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._scale is None:
            return dout
        return dout * self._scale

    def params(self) -> list[Parameter]:
        return []


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise max-shifted softmax; each row sums to 1."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)
    require_finite(out, "softmax")
    return out


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels out of range [0, {num_classes})")
    return np.eye(num_classes, dtype=dtype)[labels]


def _validate_one_hot(targets: np.ndarray) -> None:
    ok = np.all((targets == 0) | (targets == 1)) and np.all(targets.sum(axis=1) == 1)
    if not ok:
        raise ValueError("targets must be exact one-hot rows")


def cross_entropy(probs: np.ndarray, targets: np.ndarray) -> float:
    """Mean over the batch of ``-sum_c target * log(prob + eps)``."""
    if probs.shape != targets.shape:
        raise ValueError(f"probs shape {probs.shape} != targets shape {targets.shape}")
    _validate_one_hot(targets)
    batch = probs.shape[0]
    loss = float(-(targets * np.log(probs + EPS_LOG)).sum() / batch)
    if not np.isfinite(loss):
        raise NumericsError("non-finite cross-entropy loss")
    return loss


def softmax_xent_grad(probs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Gradient of mean cross-entropy w.r.t. the pre-softmax logits."""
    return (probs - targets) / probs.shape[0]


class Lstm:
    """Single-layer LSTM reading out the hidden state at each row's last real step.

    Gates follow the standard recurrence: ``i, f, o`` sigmoid and
    candidate ``g`` tanh over the concatenated ``[x_t, h_{t-1}]``, with
    ``c_t = f*c_{t-1} + i*g`` and ``h_t = o*tanh(c_t)``.  Each gate has
    its own ``[input_size + hidden_size, hidden_size]`` weight matrix.
    Steps at or beyond a row's length are computed but never read, so
    padded content cannot influence the output or the gradients.
    """

    GATES = ("i", "f", "g", "o")

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator,
                 dtype=np.float32, name: str = "lstm", forget_bias: float = 1.0):
        self.name = name
        self.input_size = input_size
        self.hidden_size = hidden_size
        concat = input_size + hidden_size
        self.W = {
            g: Parameter(f"{name}.W_{g}", glorot_uniform(rng, (concat, hidden_size), dtype))
            for g in self.GATES
        }
        self.b = {
            g: Parameter(f"{name}.b_{g}", np.zeros(hidden_size, dtype=dtype))
            for g in self.GATES
        }
        self.b["f"].value += forget_bias
        self._cache: list[dict[str, np.ndarray]] = []
        self._lengths: np.ndarray | None = None
        self._seq_shape: tuple[int, ...] | None = None

    def forward(self, seq: np.ndarray, lengths: np.ndarray) -> np.ndarray:
        if seq.ndim != 3 or seq.shape[2] != self.input_size:
            raise ValueError(
                f"{self.name}: sequence shape {seq.shape} does not match "
                f"input size {self.input_size}"
            )
        batch, steps, _ = seq.shape
        lengths = np.asarray(lengths, dtype=np.int64)
        if lengths.shape != (batch,):
            raise ValueError(f"{self.name}: lengths shape {lengths.shape} != ({batch},)")
        if np.any(lengths < 1) or np.any(lengths > steps):
            raise ValueError(f"{self.name}: lengths must lie in [1, {steps}]")

        dtype = seq.dtype
        h = np.zeros((batch, self.hidden_size), dtype=dtype)
        c = np.zeros((batch, self.hidden_size), dtype=dtype)
        self._cache = []
        self._lengths = lengths
        self._seq_shape = seq.shape
        h_stack = np.empty((batch, steps, self.hidden_size), dtype=dtype)
        for t in range(steps):
            xh = np.concatenate([seq[:, t, :], h], axis=1)
            i = sigmoid(xh @ self.W["i"].value + self.b["i"].value)
            f = sigmoid(xh @ self.W["f"].value + self.b["f"].value)
            g = np.tanh(xh @ self.W["g"].value + self.b["g"].value)
            o = sigmoid(xh @ self.W["o"].value + self.b["o"].value)
            c_prev = c
            c = f * c_prev + i * g
            tc = np.tanh(c)
            h = o * tc
            h_stack[:, t, :] = h
            self._cache.append(
                {"xh": xh, "i": i, "f": f, "g": g, "o": o, "c_prev": c_prev, "c": c, "tc": tc}
            )
        out = h_stack[np.arange(batch), lengths - 1]
        require_finite(out, self.name)
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        batch, steps, _ = self._seq_shape
        lengths = self._lengths
        dtype = dout.dtype
        dseq = np.zeros(self._seq_shape, dtype=dtype)
        dh = np.zeros((batch, self.hidden_size), dtype=dtype)
        dc = np.zeros((batch, self.hidden_size), dtype=dtype)
        for t in range(steps - 1, -1, -1):
            step = self._cache[t]
            # Inject the readout gradient exactly at each row's last real step.
            at_readout = (lengths - 1 == t)[:, None]
            dh_t = dh + np.where(at_readout, dout, 0)
            i, f, g, o = step["i"], step["f"], step["g"], step["o"]
            tc = step["tc"]
            do = dh_t * tc
            dc_t = dc + dh_t * o * (1.0 - tc * tc)
            di = dc_t * g
            dg = dc_t * i
            df = dc_t * step["c_prev"]
            dc = dc_t * f
            da = {
                "i": di * i * (1.0 - i),
                "f": df * f * (1.0 - f),
                "g": dg * (1.0 - g * g),
                "o": do * o * (1.0 - o),
            }
            xh = step["xh"]
            dxh = np.zeros_like(xh)
            for gate in self.GATES:
                self.W[gate].grad += xh.T @ da[gate]
                self.b[gate].grad += da[gate].sum(axis=0)
                dxh += da[gate] @ self.W[gate].value.T
            dseq[:, t, :] = dxh[:, : self.input_size]
            dh = dxh[:, self.input_size:]
        return dseq

    def params(self) -> list[Parameter]:
        return [self.W[g] for g in self.GATES] + [self.b[g] for g in self.GATES]


class OneHotDense:
    """Trained dense layer over one-hot integer ids (table lookup + bias).

    Used as the input projection of the character channel: each char id
    in ``[0, num_ids)`` selects a learned row.  Ids are not
    differentiable, so ``backward`` only accumulates parameter grads.
    """

    def __init__(self, num_ids: int, width: int, rng: np.random.Generator,
                 dtype=np.float32, name: str = "onehot"):
        self.name = name
        self.num_ids = num_ids
        self.W = Parameter(f"{name}.W", glorot_uniform(rng, (num_ids, width), dtype))
        self.b = Parameter(f"{name}.b", np.zeros(width, dtype=dtype))
        self._ids: np.ndarray | None = None

    def forward(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.num_ids):
            raise ValueError(f"{self.name}: ids out of range [0, {self.num_ids})")
        self._ids = ids
        out = self.W.value[ids] + self.b.value
        require_finite(out, self.name)
        return out

    def backward(self, dout: np.ndarray) -> None:
        np.add.at(self.W.grad, self._ids, dout)
        self.b.grad += dout.reshape(-1, dout.shape[-1]).sum(axis=0)
        return None

    def params(self) -> list[Parameter]:
        return [self.W, self.b]


LossFn = Callable[[list[np.ndarray], bool], tuple[float, list[np.ndarray] | None]]


def grad_check(
    fn: LossFn,
    arrays: list[np.ndarray],
    h: float = 1e-6,
    sample_per_array: int | None = None,
    seed: int = 0,
    floor: float = 1e-8,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn(arrays, want_grad)`` evaluates a scalar loss from the given
    arrays (which it must read fresh on every call) and, when asked,
    returns analytic gradients aligned with ``arrays``.  All arrays must
    be float64.  When ``sample_per_array`` is set, large arrays are
    checked on a deterministic random coordinate subset instead of
    exhaustively.  ``floor`` bounds the relative-error denominator from
    below, so coordinates whose gradient magnitude sits under it are in
    effect held to an absolute tolerance of ``tol * floor`` (central
    differences carry ~``eps/h`` roundoff regardless of the gradient's
    size).
    """
    for arr in arrays:
        if arr.dtype != np.float64:
            raise ValueError("grad_check requires float64 arrays")
    loss0, grads = fn(arrays, True)
    if not np.isfinite(loss0):
        raise GradCheckError("non-finite loss at the unperturbed point")
    rng = np.random.default_rng(seed)
    max_err = 0.0
    for k, arr in enumerate(arrays):
        n = arr.size
        if sample_per_array is not None and n > sample_per_array:
            coords = rng.choice(n, size=sample_per_array, replace=False)
        else:
            coords = np.arange(n)
        grad_flat = grads[k].reshape(-1)
        for idx in coords:
            multi = np.unravel_index(idx, arr.shape)
            orig = arr[multi]
            arr[multi] = orig + h
            lp, _ = fn(arrays, False)
            arr[multi] = orig - h
            lm, _ = fn(arrays, False)
            arr[multi] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise GradCheckError(f"non-finite loss at array {k}, coordinate {multi}")
            numeric = (lp - lm) / (2.0 * h)
            analytic = float(grad_flat[idx])
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            max_err = max(max_err, err)
    return max_err


# ---------------------------------------------------------------------------
# Checkpoint format: versioned binary container + plain-text manifest.
#
#   magic   8 bytes  b"SARVCKP1"
#   u32     number of metadata entries
#   entry   u16 key length, key utf-8, u32 value length, value utf-8
#   u32     number of parameters
#   param   u16 name length, name utf-8
#           u8  dtype code (4 = little-endian float32, 8 = float64)
#           u8  ndim, then u32 per dimension
#           raw row-major little-endian values
#
# The side-car "<file>.manifest.txt" lists names/shapes/dtypes plus the
# sha256 of the binary file.
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SARVCKP1"
_DTYPE_CODES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def save_checkpoint(path, params: Sequence[Parameter], meta: dict[str, str]) -> str:
    """Write parameters and metadata; returns the content hash."""
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", len(meta))
    for key in sorted(meta):
        kb, vb = key.encode("utf-8"), str(meta[key]).encode("utf-8")
        blob += struct.pack("<H", len(kb)) + kb
        blob += struct.pack("<I", len(vb)) + vb
    blob += struct.pack("<I", len(params))
    for p in params:
        nb = p.name.encode("utf-8")
        code = 8 if p.value.dtype == np.float64 else 4
        blob += struct.pack("<H", len(nb)) + nb
        blob += struct.pack("<BB", code, p.value.ndim)
        for dim in p.value.shape:
            blob += struct.pack("<I", dim)
        blob += np.ascontiguousarray(p.value, dtype=_DTYPE_CODES[code]).tobytes()
    digest = hashlib.sha256(bytes(blob)).hexdigest()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))
    lines = [f"format {CHECKPOINT_MAGIC.decode()}"]
    lines += [f"meta {k}={meta[k]}" for k in sorted(meta)]
    lines += [
        f"param {p.name} shape={','.join(map(str, p.value.shape))} "
        f"dtype=float{64 if p.value.dtype == np.float64 else 32}"
        for p in params
    ]
    lines.append(f"sha256 {digest}")
    with open(str(path) + ".manifest.txt", "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return digest


def load_checkpoint(path, verify: bool = True) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Read a checkpoint; verifies the manifest hash unless disabled."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if verify:
        try:
            with open(str(path) + ".manifest.txt", "r", encoding="utf-8") as fh:
                manifest = fh.read()
        except OSError as exc:
            raise DataError(f"checkpoint manifest missing for {path}: {exc}") from exc
        recorded = None
        for line in manifest.splitlines():
            if line.startswith("sha256 "):
                recorded = line.split(" ", 1)[1].strip()
        if recorded != hashlib.sha256(blob).hexdigest():
            raise DataError(f"checkpoint hash mismatch for {path}")
    view = memoryview(blob)
    if bytes(view[:8]) != CHECKPOINT_MAGIC:
        raise DataError(f"{path} is not a checkpoint (bad magic)")
    off = 8

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, view, off)
        off += size
        return vals

    def take_str(len_fmt):
        nonlocal off
        (n,) = take(len_fmt)
        s = bytes(view[off:off + n]).decode("utf-8")
        off += n
        return s

    meta: dict[str, str] = {}
    (n_meta,) = take("<I")
    for _ in range(n_meta):
        key = take_str("<H")
        meta[key] = take_str("<I")
    arrays: dict[str, np.ndarray] = {}
    (n_params,) = take("<I")
    for _ in range(n_params):
        name = take_str("<H")
        code, ndim = take("<BB")
        if code not in _DTYPE_CODES:
            raise DataError(f"{path}: unknown dtype code {code} for {name}")
        shape = tuple(take("<I")[0] for _ in range(ndim))
        dtype = _DTYPE_CODES[code]
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * dtype.itemsize
        arr = np.frombuffer(view[off:off + nbytes], dtype=dtype).reshape(shape).copy()
        off += nbytes
        arrays[name] = arr
    return arrays, meta
