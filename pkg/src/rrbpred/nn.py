"""Small feed-forward network engine with hand-written reverse mode and Adam."""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT = "rrb-checkpoint/1"
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class CheckpointError(RuntimeError):
    pass


class StaleTapeError(RuntimeError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple
    hidden_activation: str = "relu"
    output_activation: str = "none"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ValueError(f"invalid layer widths {widths}")
        if self.hidden_activation != "relu":
            raise ValueError("hidden activation must be relu")
        if self.output_activation not in ("none", "tanh"):
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        object.__setattr__(self, "layer_widths", widths)

    def to_dict(self):
        return {"layer_widths": list(self.layer_widths), "hidden_activation": self.hidden_activation,
                "output_activation": self.output_activation}


@dataclass(eq=False)
class MlpBundle:
    """Weights, biases, gradient accumulators and Adam moments of one MLP."""

    spec: MlpSpec
    seed: int
    weights: list
    biases: list
    grad_w: list = field(default_factory=list)
    grad_b: list = field(default_factory=list)
    m_w: list = field(default_factory=list)
    m_b: list = field(default_factory=list)
    v_w: list = field(default_factory=list)
    v_b: list = field(default_factory=list)
    step: int = 0
    version: int = 0

    def __post_init__(self):
        for name in ("grad", "m", "v"):
            for kind, arrs in (("w", self.weights), ("b", self.biases)):
                attr = f"{name}_{kind}"
                if not getattr(self, attr):
                    setattr(self, attr, [np.zeros_like(a) for a in arrs])

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def zero_grad(self):
        for g in self.grad_w + self.grad_b:
            g.fill(0.0)

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(np.sum(g * g) for g in self.grad_w + self.grad_b)))

    def param_norm(self) -> float:
        return float(np.sqrt(sum(np.sum(p * p) for p in self.weights + self.biases)))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.weights + self.biases)

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.weights + self.biases])

    def copy(self) -> "MlpBundle":
        c = [a.copy() for a in self.weights], [a.copy() for a in self.biases]
        return MlpBundle(self.spec, self.seed, *c)


@dataclass
class Tape:
    inputs: list
    pre: list
    output: np.ndarray
    version: int
    owner: int


def init_params(spec: MlpSpec, seed: int) -> MlpBundle:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for fan_in, fan_out in zip(spec.layer_widths[:-1], spec.layer_widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        ws.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    return MlpBundle(spec, seed, ws, bs)


def forward(params: MlpBundle, x) -> tuple[np.ndarray, Tape]:
    """Apply the network to a vector or a batch of row vectors."""
    h = np.asarray(x, dtype=float)
    if h.shape[-1] != params.spec.layer_widths[0]:
        raise ValueError(f"input width {h.shape[-1]} != {params.spec.layer_widths[0]}")
    inputs, pre = [], []
    last = params.n_layers - 1
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ W.T + b
        pre.append(z)
        if k < last:
            h = np.maximum(z, 0.0)
        elif params.spec.output_activation == "tanh":
            h = np.tanh(z)
        else:
            h = z
    return h, Tape(inputs, pre, h, params.version, id(params))


def backward(params: MlpBundle, tape: Tape, output_grad) -> np.ndarray:
    """Accumulate parameter gradients (summed over the batch) and return d(loss)/d(input)."""
    if tape.owner != id(params) or tape.version != params.version:
        raise StaleTapeError("tape was recorded against different or since-updated parameters")
    g = np.asarray(output_grad, dtype=float)
    last = params.n_layers - 1
    if params.spec.output_activation == "tanh":
        g = g * (1.0 - tape.output**2)
    for k in range(last, -1, -1):
        if k < last:
            g = g * (tape.pre[k] > 0.0)
        h = tape.inputs[k]
        if g.ndim == 1:
            params.grad_w[k] += np.outer(g, h)
            params.grad_b[k] += g
        else:
            params.grad_w[k] += g.T @ h
            params.grad_b[k] += g.sum(axis=0)
        g = g @ params.weights[k]
    return g


def adam_step(params: MlpBundle, lr: float) -> MlpBundle:
    """Bias-corrected Adam update in place; clears the gradient buffers."""
    params.step += 1
    t = params.step
    c1 = 1.0 - ADAM_BETA1**t
    c2 = 1.0 - ADAM_BETA2**t
    for p, g, m, v in zip(params.weights + params.biases, params.grad_w + params.grad_b,
                          params.m_w + params.m_b, params.v_w + params.v_b):
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    params.zero_grad()
    params.version += 1
    return params


def numerical_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (``x`` is perturbed in place and restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def relative_error(a, b, floor: float = 1e-8) -> float:
    """Largest entrywise ``|a - b| / (|a| + |b|)``; the denominator never drops below ``floor``."""
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(floor, np.abs(a) + np.abs(b))))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(bundles: dict, path, metadata: dict | None = None) -> None:
    """Write named bundles to a versioned ``.npz`` archive (exact float64 round trip)."""
    arrays = {}
    meta = {"format": CHECKPOINT_FORMAT, "bundles": {}, "metadata": metadata or {}}
    for name, b in bundles.items():
        meta["bundles"][name] = {"spec": b.spec.to_dict(), "seed": b.seed, "step": b.step}
        for k in range(b.n_layers):
            for tag, src in (("W", b.weights), ("b", b.biases), ("mW", b.m_w), ("mb", b.m_b),
                             ("vW", b.v_w), ("vb", b.v_b)):
                arrays[f"{name}/{tag}{k}"] = src[k]
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    # fixed entry timestamps keep identical checkpoints byte-identical
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for key, arr in arrays.items():
            entry = io.BytesIO()
            np.lib.format.write_array(entry, np.ascontiguousarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(key + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), entry.getvalue())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path, with_metadata: bool = False):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    try:
        with np.load(io.BytesIO(raw), allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
    except (zipfile.BadZipFile, ValueError, OSError, EOFError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
    if "__meta__" not in data:
        raise CheckpointError(f"{path}: missing header")
    meta = json.loads(data["__meta__"].tobytes().decode())
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: format {meta.get('format')!r} != {CHECKPOINT_FORMAT!r}")
    bundles = {}
    for name, info in meta["bundles"].items():
        spec = MlpSpec(tuple(info["spec"]["layer_widths"]), info["spec"]["hidden_activation"],
                       info["spec"]["output_activation"])
        n = len(spec.layer_widths) - 1
        try:
            get = lambda tag: [data[f"{name}/{tag}{k}"].copy() for k in range(n)]  # noqa: E731
            b = MlpBundle(spec, info["seed"], get("W"), get("b"), m_w=get("mW"), m_b=get("mb"),
                          v_w=get("vW"), v_b=get("vb"), step=info["step"])
        except KeyError as exc:
            raise CheckpointError(f"{path}: missing array {exc}") from exc
        for k, W in enumerate(b.weights):
            if W.shape != (spec.layer_widths[k + 1], spec.layer_widths[k]):
                raise CheckpointError(f"{path}: {name} layer {k} shape {W.shape} does not match spec")
        bundles[name] = b
    return (bundles, meta["metadata"]) if with_metadata else bundles
