"""Small classifiers with two independent forward routes.

Each model exposes `logits`, a plain-numpy forward used for evaluation,
and `graph_logits`, which builds the same function on an autodiff tape
for training and attribution. The two routes share parameters but not
code: the plain convolution is shift-and-add over kernel offsets while
the tape uses windowed contraction, and plain pooling is a direct max
while the tape records argmax masks. Agreement between them is a
standing cross-check, not an accident of shared implementation.

Parameters are stored float32 and promoted to float64 inside either
route; training quantizes back to float32 after every update so a saved
checkpoint reproduces the run that wrote it bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from . import autodiff as ag
from .seeding import seed_stream


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


_PLAIN_ACT = {"relu": lambda x: np.maximum(x, 0.0), "softplus": _softplus}
_GRAPH_ACT = {"relu": ag.relu, "softplus": ag.softplus}


def _conv_plain(x, k, pad):
    """Shift-and-add convolution, deliberately unlike the tape kernel."""
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = h + 2 * pad - kh + 1
    wo = w + 2 * pad - kw + 1
    out = np.zeros((n, o, ho, wo))
    for u in range(kh):
        for v in range(kw):
            out += np.einsum("nchw,oc->nohw", x[:, :, u : u + ho, v : v + wo], k[:, :, u, v])
    return out


def _pool_plain(x):
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))


class MLP:
    """Fully connected classifier over flattened inputs."""

    kind = "mlp"

    def __init__(self, in_shape, hidden, classes, activation="relu", seed=0):
        if activation not in _PLAIN_ACT:
            raise ValueError(f"unknown activation {activation!r}")
        self.in_shape = tuple(int(s) for s in in_shape)
        self.hidden = [int(h) for h in hidden]
        self.classes = int(classes)
        self.activation = activation
        self.params: dict[str, np.ndarray] = {}
        rng = seed_stream(seed, "init", self.kind)
        dims = [int(np.prod(self.in_shape))] + self.hidden + [self.classes]
        for i, (din, dout) in enumerate(zip(dims, dims[1:])):
            std = np.sqrt(2.0 / din)
            self.params[f"w{i}"] = (rng.normal(size=(din, dout)) * std).astype(np.float32)
            self.params[f"b{i}"] = np.zeros(dout, dtype=np.float32)

    def config(self):
        return {
            "kind": self.kind,
            "in_shape": list(self.in_shape),
            "hidden": self.hidden,
            "classes": self.classes,
            "activation": self.activation,
        }

    def logits(self, x: np.ndarray) -> np.ndarray:
        act = _PLAIN_ACT[self.activation]
        h = np.asarray(x, dtype=np.float64).reshape(x.shape[0], -1)
        n_layers = len(self.hidden) + 1
        for i in range(n_layers):
            h = h @ self.params[f"w{i}"].astype(np.float64) + self.params[f"b{i}"].astype(np.float64)
            if i < n_layers - 1:
                h = act(h)
        return h

    def bind(self, graph: ag.Graph) -> dict[str, ag.Var]:
        return {name: graph.var(arr, name) for name, arr in self.params.items()}

    def graph_logits(self, x: ag.Var, pv: dict[str, ag.Var]) -> ag.Var:
        act = _GRAPH_ACT[self.activation]
        h = ag.flatten(x) if len(x.shape) > 2 else x
        n_layers = len(self.hidden) + 1
        for i in range(n_layers):
            h = ag.affine(h, pv[f"w{i}"], pv[f"b{i}"])
            if i < n_layers - 1:
                h = act(h)
        return h


class CNN:
    """Two padded 3x3 conv blocks with 2x2 pooling, then a linear head."""

    kind = "cnn"

    def __init__(self, in_shape, channels, classes, activation="relu", seed=0):
        if activation not in _PLAIN_ACT:
            raise ValueError(f"unknown activation {activation!r}")
        c, h, w = in_shape
        if h % 4 or w % 4:
            raise ValueError(f"two pooling stages need dims divisible by 4, got {h}x{w}")
        self.in_shape = (int(c), int(h), int(w))
        self.channels = [int(ch) for ch in channels]
        if len(self.channels) != 2:
            raise ValueError("expected exactly two conv stages")
        self.classes = int(classes)
        self.activation = activation
        self.params = {}
        rng = seed_stream(seed, "init", self.kind)
        c1, c2 = self.channels
        for name, shape, fan in [
            ("k1", (c1, c, 3, 3), c * 9),
            ("k2", (c2, c1, 3, 3), c1 * 9),
        ]:
            std = np.sqrt(2.0 / fan)
            self.params[name] = (rng.normal(size=shape) * std).astype(np.float32)
            self.params[name.replace("k", "cb")] = np.zeros(shape[0], dtype=np.float32)
        feat = c2 * (h // 4) * (w // 4)
        self.params["w"] = (rng.normal(size=(feat, classes)) * np.sqrt(2.0 / feat)).astype(np.float32)
        self.params["b"] = np.zeros(classes, dtype=np.float32)

    def config(self):
        return {
            "kind": self.kind,
            "in_shape": list(self.in_shape),
            "channels": self.channels,
            "classes": self.classes,
            "activation": self.activation,
        }

    def logits(self, x: np.ndarray) -> np.ndarray:
        act = _PLAIN_ACT[self.activation]
        h = np.asarray(x, dtype=np.float64)
        p = {k: v.astype(np.float64) for k, v in self.params.items()}
        h = act(_conv_plain(h, p["k1"], 1) + p["cb1"][None, :, None, None])
        h = _pool_plain(h)
        h = act(_conv_plain(h, p["k2"], 1) + p["cb2"][None, :, None, None])
        h = _pool_plain(h)
        return h.reshape(h.shape[0], -1) @ p["w"] + p["b"]

    def bind(self, graph: ag.Graph) -> dict[str, ag.Var]:
        return {name: graph.var(arr, name) for name, arr in self.params.items()}

    def graph_logits(self, x: ag.Var, pv: dict[str, ag.Var]) -> ag.Var:
        act = _GRAPH_ACT[self.activation]
        h = ag.maxpool2(act(ag.conv_bias(x, pv["k1"], pv["cb1"], 1)))
        h = ag.maxpool2(act(ag.conv_bias(h, pv["k2"], pv["cb2"], 1)))
        return ag.affine(ag.flatten(h), pv["w"], pv["b"])


class LinearScore:
    """One linear score wrapped as two-class logits [0, s].

    Class 1 wins exactly when the score is positive, and the class-1
    "logit" is the raw score, which keeps closed-form gradient checks
    one line long.
    """

    kind = "linear"

    def __init__(self, in_shape, seed=0):
        self.in_shape = tuple(int(s) for s in in_shape)
        self.classes = 2
        self.activation = "linear"
        d = int(np.prod(self.in_shape))
        rng = seed_stream(seed, "init", self.kind)
        self.params = {
            "w": (rng.normal(size=(d, 1)) / np.sqrt(d)).astype(np.float32),
            "b": np.zeros(1, dtype=np.float32),
        }

    @classmethod
    def from_arrays(cls, w, b, in_shape=None) -> "LinearScore":
        """Wrap explicit weights without narrowing their precision."""
        w = np.asarray(w, dtype=np.float64).reshape(-1, 1)
        m = cls.__new__(cls)
        m.in_shape = tuple(in_shape) if in_shape is not None else (w.shape[0],)
        m.classes = 2
        m.activation = "linear"
        m.params = {"w": w, "b": np.atleast_1d(np.asarray(b, dtype=np.float64))}
        return m

    @property
    def w(self) -> np.ndarray:
        return self.params["w"].astype(np.float64).reshape(-1)

    @property
    def b(self) -> float:
        return float(self.params["b"][0])

    def config(self):
        return {"kind": self.kind, "in_shape": list(self.in_shape)}

    def score(self, x: np.ndarray) -> np.ndarray:
        flat = np.asarray(x, dtype=np.float64).reshape(x.shape[0], -1)
        return flat @ self.params["w"].astype(np.float64) + self.params["b"].astype(np.float64)

    def logits(self, x: np.ndarray) -> np.ndarray:
        s = self.score(x)
        return np.concatenate([np.zeros_like(s), s], axis=1)

    def bind(self, graph: ag.Graph) -> dict[str, ag.Var]:
        return {name: graph.var(arr, name) for name, arr in self.params.items()}

    def graph_logits(self, x: ag.Var, pv: dict[str, ag.Var]) -> ag.Var:
        flat = ag.flatten(x) if len(x.shape) > 2 else x
        s = ag.affine(flat, pv["w"], pv["b"])
        lift = x.graph.const(np.array([[0.0, 1.0]]))
        return ag.matmul(s, lift)


Model = MLP | CNN | LinearScore


def build_model(config: dict, seed: int = 0) -> Model:
    kind = config.get("kind")
    if kind == "mlp":
        return MLP(config["in_shape"], config["hidden"], config["classes"],
                   config.get("activation", "relu"), seed)
    if kind == "cnn":
        return CNN(config["in_shape"], config["channels"], config["classes"],
                   config.get("activation", "relu"), seed)
    if kind == "linear":
        return LinearScore(config["in_shape"], seed)
    raise ValueError(f"unknown model kind {kind!r}")


def predict(model: Model, x: np.ndarray) -> np.ndarray:
    return np.argmax(model.logits(x), axis=1)


def class_score(model: Model, x: np.ndarray, y: int) -> float:
    """Logit of class y for a single input."""
    if not 0 <= int(y) < model.classes:
        raise ValueError(f"class {y} out of range for {model.classes} classes")
    return float(model.logits(np.asarray(x)[None])[0, int(y)])


def linearize(model: Model, x: np.ndarray, y: int) -> LinearScore:
    """First-order Taylor surrogate of the class-y logit at x.

    The weights are the input gradient, the bias absorbs the residual so
    the surrogate's score equals the model's at x itself.
    """
    if not 0 <= int(y) < model.classes:
        raise ValueError(f"class {y} out of range for {model.classes} classes")
    x = np.asarray(x, dtype=np.float64)
    graph = ag.Graph()
    xv = graph.var(x[None])
    logits = model.graph_logits(xv, model.bind(graph))
    score = ag.sum_all(ag.picked_rows(logits, np.array([int(y)])))
    (gx,) = ag.grad(score, [xv])
    if not np.all(np.isfinite(gx)):
        raise FloatingPointError("non-finite input gradient at linearization point")
    w = gx.reshape(-1)
    b = score.item() - float(w @ x.reshape(-1))
    return LinearScore.from_arrays(w, b, in_shape=x.shape)


# ---------------------------------------------------------------------------
# Checkpoints: magic, version, length-prefixed JSON header, fp32 payload.
# The header carries a SHA-256 of the payload, so a single flipped byte in
# the weights is caught on load rather than silently degrading a model.

_MAGIC = b"IGDC"
_VERSION = 1


class IntegrityError(ValueError):
    """Checkpoint bytes do not match their recorded digest or framing."""


def save_checkpoint(path, model: Model, extra: dict | None = None) -> None:
    names = list(model.params)
    payload = b"".join(
        np.ascontiguousarray(model.params[n].astype("<f4")).tobytes() for n in names
    )
    header = {
        "model": model.config(),
        "params": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(payload)


def load_checkpoint(path) -> tuple[Model, dict]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _MAGIC:
        raise IntegrityError("bad magic; not a checkpoint file")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != _VERSION:
        raise IntegrityError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise IntegrityError("truncated header")
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    payload = raw[16 + hlen :]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise IntegrityError("payload digest mismatch")
    model = build_model(header["model"])
    offset = 0
    for rec in header["params"]:
        shape = tuple(rec["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        model.params[rec["name"]] = arr.reshape(shape).astype(np.float32)
        offset += count * 4
    if offset != len(payload):
        raise IntegrityError("payload length does not match declared shapes")
    return model, header["extra"]
