"""Dense float64 tensors with hand-derived backward rules.

The model graph here is static and shallow, so there is no general
autodiff machinery: every forward op computes its value and pushes a
single hand-written backward closure onto a linear tape. Calling
``Tape.backward`` replays the closures in reverse order, accumulating
into ``Tensor.grad``. Analytic gradients are verified independently by
the central-difference harness at the bottom of this module.

All arithmetic is 64-bit; every created tensor is checked for finite
values so divergence surfaces immediately instead of propagating NaNs.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operands with incompatible shapes; message names both shapes."""


class NonFiniteError(ValueError):
    """A tensor value or gradient stopped being finite."""


class CheckpointError(ValueError):
    """Malformed checkpoint bytes."""


class Tensor:
    """A dense float64 array plus an optional gradient of the same shape."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor contains non-finite values")
        self.data = arr
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.data.shape})"


def _acc(t: Tensor, g: np.ndarray) -> None:
    """Accumulate ``g`` into ``t.grad``, allocating on first use."""
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


class Tape:
    """Linear record of backward closures, replayed in reverse order."""

    def __init__(self) -> None:
        self._backs: list = []

    def record(self, back) -> None:
        self._backs.append(back)

    def backward(self, out: Tensor, seed: float = 1.0) -> None:
        """Seed ``out`` (a scalar) with ``seed`` and replay the tape."""
        if out.data.shape != ():
            raise ShapeError(
                f"backward expects a scalar output, got shape {out.data.shape}"
            )
        out.grad = np.asarray(seed, dtype=np.float64)
        for back in reversed(self._backs):
            back()


# ---------------------------------------------------------------------------
# Primitive ops: forward value plus one hand-derived backward closure each.
# ``tape=None`` runs forward only (evaluation mode).
# ---------------------------------------------------------------------------


def matmul(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")
    out = Tensor(a.data @ b.data)
    if tape is not None:
        def back():
            g = out.grad
            _acc(a, g @ b.data.T)
            _acc(b, a.data.T @ g)
        tape.record(back)
    return out


def matvec(tape: Tape | None, a: Tensor, x: Tensor) -> Tensor:
    if a.data.ndim != 2 or x.data.ndim != 1 or a.data.shape[1] != x.data.shape[0]:
        raise ShapeError(f"matvec: incompatible shapes {a.data.shape} and {x.data.shape}")
    out = Tensor(a.data @ x.data)
    if tape is not None:
        def back():
            g = out.grad
            _acc(a, np.outer(g, x.data))
            _acc(x, a.data.T @ g)
        tape.record(back)
    return out


def vecmat(tape: Tape | None, x: Tensor, a: Tensor) -> Tensor:
    if x.data.ndim != 1 or a.data.ndim != 2 or x.data.shape[0] != a.data.shape[0]:
        raise ShapeError(f"vecmat: incompatible shapes {x.data.shape} and {a.data.shape}")
    out = Tensor(x.data @ a.data)
    if tape is not None:
        def back():
            g = out.grad
            _acc(x, a.data @ g)
            _acc(a, np.outer(x.data, g))
        tape.record(back)
    return out


def dot(tape: Tape | None, x: Tensor, y: Tensor) -> Tensor:
    if x.data.shape != y.data.shape or x.data.ndim != 1:
        raise ShapeError(f"dot: incompatible shapes {x.data.shape} and {y.data.shape}")
    out = Tensor(x.data @ y.data)
    if tape is not None:
        def back():
            g = out.grad
            _acc(x, g * y.data)
            _acc(y, g * x.data)
        tape.record(back)
    return out


def add(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: incompatible shapes {a.data.shape} and {b.data.shape}")
    out = Tensor(a.data + b.data)
    if tape is not None:
        def back():
            _acc(a, out.grad)
            _acc(b, out.grad)
        tape.record(back)
    return out


def sub(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub: incompatible shapes {a.data.shape} and {b.data.shape}")
    out = Tensor(a.data - b.data)
    if tape is not None:
        def back():
            _acc(a, out.grad)
            _acc(b, -out.grad)
        tape.record(back)
    return out


def add_rowvec(tape: Tape | None, a: Tensor, v: Tensor) -> Tensor:
    """Add a vector to every row of a matrix."""
    if a.data.ndim != 2 or v.data.ndim != 1 or a.data.shape[1] != v.data.shape[0]:
        raise ShapeError(f"add_rowvec: incompatible shapes {a.data.shape} and {v.data.shape}")
    out = Tensor(a.data + v.data[None, :])
    if tape is not None:
        def back():
            g = out.grad
            _acc(a, g)
            _acc(v, g.sum(axis=0))
        tape.record(back)
    return out


def sub_rowvec(tape: Tape | None, a: Tensor, v: Tensor) -> Tensor:
    """Subtract a vector from every row of a matrix."""
    if a.data.ndim != 2 or v.data.ndim != 1 or a.data.shape[1] != v.data.shape[0]:
        raise ShapeError(f"sub_rowvec: incompatible shapes {a.data.shape} and {v.data.shape}")
    out = Tensor(a.data - v.data[None, :])
    if tape is not None:
        def back():
            g = out.grad
            _acc(a, g)
            _acc(v, -g.sum(axis=0))
        tape.record(back)
    return out


def scale(tape: Tape | None, x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data * c)
    if tape is not None:
        def back():
            _acc(x, out.grad * c)
        tape.record(back)
    return out


def affine(tape: Tape | None, x: Tensor, mul: float, shift: float) -> Tensor:
    """Elementwise ``mul * x + shift`` with constant coefficients."""
    out = Tensor(x.data * mul + shift)
    if tape is not None:
        def back():
            _acc(x, out.grad * mul)
        tape.record(back)
    return out


def mul_elem(tape: Tape | None, x: Tensor, mask: np.ndarray) -> Tensor:
    """Elementwise multiply by a constant array (dropout / padding masks)."""
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != x.data.shape and m.ndim != 0:
        try:
            m = np.broadcast_to(m, x.data.shape)
        except ValueError:
            raise ShapeError(
                f"mul_elem: incompatible shapes {x.data.shape} and {np.asarray(mask).shape}"
            ) from None
    out = Tensor(x.data * m)
    if tape is not None:
        def back():
            _acc(x, out.grad * m)
        tape.record(back)
    return out


def tanh(tape: Tape | None, x: Tensor) -> Tensor:
    out = Tensor(np.tanh(x.data))
    if tape is not None:
        def back():
            _acc(x, out.grad * (1.0 - out.data ** 2))
        tape.record(back)
    return out


def concat(tape: Tape | None, parts: list[Tensor]) -> Tensor:
    """Concatenate 1-d tensors."""
    if not parts:
        raise ShapeError("concat: empty part list")
    for p in parts:
        if p.data.ndim != 1:
            raise ShapeError(f"concat: expected 1-d parts, got shape {p.data.shape}")
    out = Tensor(np.concatenate([p.data for p in parts]))
    if tape is not None:
        offsets = np.cumsum([0] + [p.data.shape[0] for p in parts])
        def back():
            g = out.grad
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                _acc(p, g[lo:hi])
        tape.record(back)
    return out


def concat_cols(tape: Tape | None, mats: list[Tensor]) -> Tensor:
    """Concatenate 2-d tensors along columns (same row count)."""
    if not mats:
        raise ShapeError("concat_cols: empty matrix list")
    rows = mats[0].data.shape[0]
    for m in mats:
        if m.data.ndim != 2 or m.data.shape[0] != rows:
            raise ShapeError(
                f"concat_cols: incompatible shapes {mats[0].data.shape} and {m.data.shape}"
            )
    out = Tensor(np.concatenate([m.data for m in mats], axis=1))
    if tape is not None:
        offsets = np.cumsum([0] + [m.data.shape[1] for m in mats])
        def back():
            g = out.grad
            for m, lo, hi in zip(mats, offsets[:-1], offsets[1:]):
                _acc(m, g[:, lo:hi])
        tape.record(back)
    return out


def stack_rows(tape: Tape | None, vecs: list[Tensor]) -> Tensor:
    """Stack 1-d tensors into the rows of a matrix."""
    if not vecs:
        raise ShapeError("stack_rows: empty vector list")
    n = vecs[0].data.shape
    for v in vecs:
        if v.data.ndim != 1 or v.data.shape != n:
            raise ShapeError(f"stack_rows: incompatible shapes {n} and {v.data.shape}")
    out = Tensor(np.stack([v.data for v in vecs]))
    if tape is not None:
        def back():
            g = out.grad
            for i, v in enumerate(vecs):
                _acc(v, g[i])
        tape.record(back)
    return out


def transpose(tape: Tape | None, x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {x.data.shape}")
    out = Tensor(x.data.T.copy())
    if tape is not None:
        def back():
            _acc(x, out.grad.T)
        tape.record(back)
    return out


def gather_rows(tape: Tape | None, table: Tensor, indices) -> Tensor:
    """Select rows of an embedding table; backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.int64)
    if table.data.ndim != 2 or idx.ndim != 1:
        raise ShapeError(
            f"gather_rows: expected matrix and index vector, got {table.data.shape} and {idx.shape}"
        )
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for table {table.data.shape}")
    out = Tensor(table.data[idx])
    if tape is not None:
        def back():
            g = table.ensure_grad()
            np.add.at(g, idx, out.grad)
        tape.record(back)
    return out


def gather_row(tape: Tape | None, table: Tensor, i: int) -> Tensor:
    """Select one row of a matrix as a vector; backward scatter-adds."""
    if table.data.ndim != 2:
        raise ShapeError(f"gather_row: expected a matrix, got shape {table.data.shape}")
    if not 0 <= i < table.data.shape[0]:
        raise ShapeError(f"gather_row: row {i} out of range for shape {table.data.shape}")
    out = Tensor(table.data[i].copy())
    if tape is not None:
        def back():
            g = table.ensure_grad()
            g[i] += out.grad
        tape.record(back)
    return out


def pick(tape: Tape | None, x: Tensor, i: int) -> Tensor:
    """Select one component of a vector as a scalar."""
    if x.data.ndim != 1:
        raise ShapeError(f"pick: expected a vector, got shape {x.data.shape}")
    if not 0 <= i < x.data.shape[0]:
        raise ShapeError(f"pick: index {i} out of range for shape {x.data.shape}")
    out = Tensor(x.data[i])
    if tape is not None:
        def back():
            g = x.ensure_grad()
            g[i] += out.grad
        tape.record(back)
    return out


def softmax(tape: Tape | None, x: Tensor) -> Tensor:
    """Numerically stable softmax over a vector (max subtraction)."""
    if x.data.ndim != 1:
        raise ShapeError(f"softmax: expected a vector, got shape {x.data.shape}")
    if x.data.shape[0] == 0:
        raise ShapeError("softmax: empty input")
    e = np.exp(x.data - x.data.max())
    out = Tensor(e / e.sum())
    if tape is not None:
        def back():
            g = out.grad
            _acc(x, (g - g @ out.data) * out.data)
        tape.record(back)
    return out


def log_softmax(tape: Tape | None, x: Tensor) -> Tensor:
    if x.data.ndim != 1:
        raise ShapeError(f"log_softmax: expected a vector, got shape {x.data.shape}")
    if x.data.shape[0] == 0:
        raise ShapeError("log_softmax: empty input")
    shifted = x.data - x.data.max()
    out = Tensor(shifted - np.log(np.exp(shifted).sum()))
    if tape is not None:
        def back():
            g = out.grad
            _acc(x, g - np.exp(out.data) * g.sum())
        tape.record(back)
    return out


def max_over_time(tape: Tape | None, x: Tensor, row_mask=None) -> Tensor:
    """Per-column max over the rows of a (time, features) matrix.

    Ties resolve to the lowest row index. ``row_mask`` restricts pooling
    to the marked rows (used to keep padding out of the max).
    """
    if x.data.ndim != 2:
        raise ShapeError(f"max_over_time: expected a matrix, got shape {x.data.shape}")
    if row_mask is None:
        rows = np.arange(x.data.shape[0])
    else:
        rows = np.nonzero(np.asarray(row_mask))[0]
    if rows.size == 0:
        raise ShapeError("max_over_time: no rows to pool over")
    sub_data = x.data[rows]
    local_arg = sub_data.argmax(axis=0)
    arg = rows[local_arg]
    cols = np.arange(x.data.shape[1])
    out = Tensor(x.data[arg, cols])
    if tape is not None:
        def back():
            g = x.ensure_grad()
            np.add.at(g, (arg, cols), out.grad)
        tape.record(back)
    return out


def window_concat(tape: Tape | None, x: Tensor, k: int) -> Tensor:
    """Sliding-window concatenation with zero padding.

    Row t of the output is the concatenation of rows t-(k-1)/2 .. t+(k-1)/2
    of ``x``, with out-of-range rows treated as zero, so output length
    equals input length. ``k`` must be odd.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"window_concat: expected a matrix, got shape {x.data.shape}")
    if k < 1 or k % 2 == 0:
        raise ShapeError(f"window_concat: window size must be odd and positive, got {k}")
    t, d = x.data.shape
    pad = (k - 1) // 2
    padded = np.zeros((t + 2 * pad, d))
    padded[pad:pad + t] = x.data
    out = Tensor(np.concatenate([padded[o:o + t] for o in range(k)], axis=1))
    if tape is not None:
        def back():
            g = out.grad
            acc = np.zeros((t + 2 * pad, d))
            for o in range(k):
                acc[o:o + t] += g[:, o * d:(o + 1) * d]
            _acc(x, acc[pad:pad + t])
        tape.record(back)
    return out


def row_l2norms(tape: Tape | None, x: Tensor) -> Tensor:
    """Euclidean norm of each row. Zero rows get zero gradient."""
    if x.data.ndim != 2:
        raise ShapeError(f"row_l2norms: expected a matrix, got shape {x.data.shape}")
    norms = np.sqrt((x.data ** 2).sum(axis=1))
    out = Tensor(norms)
    if tape is not None:
        def back():
            g = out.grad
            coef = np.where(norms > 0.0, g / np.where(norms > 0.0, norms, 1.0), 0.0)
            _acc(x, coef[:, None] * x.data)
        tape.record(back)
    return out


def row_l1norms(tape: Tape | None, x: Tensor) -> Tensor:
    """Absolute-value norm of each row; subgradient sign(x) at zero is 0."""
    if x.data.ndim != 2:
        raise ShapeError(f"row_l1norms: expected a matrix, got shape {x.data.shape}")
    out = Tensor(np.abs(x.data).sum(axis=1))
    if tape is not None:
        def back():
            _acc(x, out.grad[:, None] * np.sign(x.data))
        tape.record(back)
    return out


# ---------------------------------------------------------------------------
# Parameters and the SGD update.
# ---------------------------------------------------------------------------

LR_GROUPS = ("kg", "net")


class ParamSlot:
    """A named trainable tensor assigned to one of two learning-rate groups."""

    __slots__ = ("name", "value", "group")

    def __init__(self, name: str, value: Tensor, group: str):
        if group not in LR_GROUPS:
            raise ValueError(f"unknown learning-rate group {group!r}")
        self.name = name
        self.value = value
        self.group = group
        value.ensure_grad()

    @property
    def grad(self) -> np.ndarray:
        return self.value.ensure_grad()

    def zero_grad(self) -> None:
        self.value.ensure_grad()[:] = 0.0

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"ParamSlot({self.name!r}, shape={self.value.shape}, group={self.group!r})"


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()


def sgd_step(params, lr_kg: float, lr_net: float) -> None:
    """Apply ``value <- value - lr * grad`` per group, then zero the grads."""
    for p in params:
        g = p.grad
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient in parameter {p.name!r}")
        lr = lr_kg if p.group == "kg" else lr_net
        p.value.data -= lr * g
        g[:] = 0.0


# ---------------------------------------------------------------------------
# Central-difference gradient checking.
# ---------------------------------------------------------------------------


@dataclass
class FDEntry:
    param: str
    index: int
    analytic: float
    numeric: float
    rel_err: float
    ok: bool


@dataclass
class FDReport:
    entries: list[FDEntry] = field(default_factory=list)

    @property
    def failures(self) -> list[FDEntry]:
        return [e for e in self.entries if not e.ok]

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def max_rel_err(self) -> float:
        return max((e.rel_err for e in self.entries), default=0.0)

    def summary(self) -> str:
        return (
            f"{len(self.entries)} coordinates checked, "
            f"{len(self.failures)} failed, max relative error {self.max_rel_err:.3e}"
        )


def finite_difference_check(
    loss_fn,
    params,
    epsilon: float = 1e-4,
    tolerance: float = 1e-3,
    coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> FDReport:
    """Compare analytic gradients against central differences.

    ``loss_fn`` must be a deterministic zero-argument callable that zeroes
    the parameter grads, runs forward and backward, and returns the loss
    as a float. Each sampled coordinate is perturbed by +/- epsilon and
    the relative error |analytic - numeric| / max(1, |numeric|) is
    compared against ``tolerance``. Failures are listed in the report,
    never raised.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    zero_grads(params)
    loss_fn()
    analytic = {p.name: p.grad.copy() for p in params}
    report = FDReport()
    for p in params:
        size = p.value.data.size
        if coords_per_param is None or size <= coords_per_param:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=coords_per_param, replace=False)
        flat = p.value.data.reshape(-1)
        for i in coords:
            i = int(i)
            orig = flat[i]
            flat[i] = orig + epsilon
            loss_plus = loss_fn()
            flat[i] = orig - epsilon
            loss_minus = loss_fn()
            flat[i] = orig
            numeric = (loss_plus - loss_minus) / (2.0 * epsilon)
            ana = float(analytic[p.name].reshape(-1)[i])
            rel = abs(ana - numeric) / max(1.0, abs(numeric))
            report.entries.append(
                FDEntry(p.name, i, ana, numeric, rel, rel <= tolerance)
            )
    zero_grads(params)
    return report


# ---------------------------------------------------------------------------
# Named-tensor checkpoint container.
#
# Layout: magic, one JSON metadata line (config hash, training-stage tag,
# record count), then per record: name length (u32 LE), name bytes, rank
# (u32 LE), dims (u32 LE each), raw little-endian float64 values.
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"NTC1\n"


def config_fingerprint(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def checkpoint_bytes(params, config_hash: str = "", stage: str = "") -> bytes:
    chunks = [CHECKPOINT_MAGIC]
    params = list(params)
    meta = json.dumps(
        {"config_hash": config_hash, "records": len(params), "stage": stage},
        sort_keys=True,
    )
    chunks.append(meta.encode("utf-8") + b"\n")
    for p in params:
        name = p.name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name)))
        chunks.append(name)
        dims = p.value.data.shape
        chunks.append(struct.pack("<I", len(dims)))
        for d in dims:
            chunks.append(struct.pack("<I", d))
        chunks.append(p.value.data.astype("<f8").tobytes())
    return b"".join(chunks)


def save_checkpoint(path, params, config_hash: str = "", stage: str = "") -> None:
    data = checkpoint_bytes(params, config_hash=config_hash, stage=stage)
    with open(path, "wb") as fh:
        fh.write(data)


def parse_checkpoint(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    """Decode checkpoint bytes into (metadata, name -> array)."""
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError("bad checkpoint magic")
    pos = len(CHECKPOINT_MAGIC)
    nl = data.find(b"\n", pos)
    if nl < 0:
        raise CheckpointError("missing checkpoint metadata line")
    try:
        meta = json.loads(data[pos:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"bad checkpoint metadata: {exc}") from None
    pos = nl + 1
    arrays: dict[str, np.ndarray] = {}
    for _ in range(int(meta.get("records", 0))):
        if pos + 4 > len(data):
            raise CheckpointError("truncated checkpoint record")
        (name_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        end = pos + 8 * count
        if end > len(data):
            raise CheckpointError(f"truncated values for record {name!r}")
        arr = np.frombuffer(data[pos:end], dtype="<f8").astype(np.float64)
        arrays[name] = arr.reshape(dims)
        pos = end
    if pos != len(data):
        raise CheckpointError("trailing bytes after final checkpoint record")
    return meta, arrays


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


def restore_params(params, arrays: dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into matching parameter slots."""
    for p in params:
        if p.name not in arrays:
            raise CheckpointError(f"checkpoint is missing parameter {p.name!r}")
        arr = arrays[p.name]
        if arr.shape != p.value.data.shape:
            raise CheckpointError(
                f"parameter {p.name!r}: checkpoint shape {arr.shape} "
                f"does not match model shape {p.value.data.shape}"
            )
        p.value.data[...] = arr
        p.zero_grad()
