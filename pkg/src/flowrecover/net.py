"""GRU encoder + dense head that emits sparse ODE coefficients.

Shapes used throughout:

* batch data: (B, C, k) with C = n_states + n_inputs channels, k timesteps
* hidden state: (B, V)
* head output: (B, P) with P = n_states * term_count + q

The head output is split into raw coefficients (first n*T entries, one
block per equation) and q input shifts.  Raw coefficients are multiplied by
a fixed per-output ``coef_scale`` (ones by default) before thresholding.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

TRAINABLE = ("Wz", "Wr", "Wh", "Uz", "Ur", "Uh", "bz", "br", "bh", "W1", "b1", "W2", "b2")
_MAGIC = b"FRNP"
_VERSION = 1


class NetShapeError(ValueError):
    pass


@dataclass
class RecoveryNetParams:
    n_states: int
    n_inputs: int
    hidden: int
    term_count: int
    q: int
    tau: float
    seed: int
    weights: dict[str, np.ndarray]
    coef_scale: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.coef_scale is None:
            self.coef_scale = np.ones(self.n_states * self.term_count)
        self.coef_scale = np.asarray(self.coef_scale, dtype=float)

    @property
    def channels(self) -> int:
        return self.n_states + self.n_inputs

    @property
    def n_coef(self) -> int:
        return self.n_states * self.term_count

    @property
    def out_width(self) -> int:
        return self.n_coef + self.q

    @property
    def dense_hidden(self) -> int:
        return self.weights["W1"].shape[0]

    def __getitem__(self, name):
        return self.weights[name]

    def copy(self) -> "RecoveryNetParams":
        return RecoveryNetParams(self.n_states, self.n_inputs, self.hidden, self.term_count, self.q, self.tau,
                                 self.seed, {k: v.copy() for k, v in self.weights.items()}, self.coef_scale.copy())

    def n_parameters(self) -> int:
        return sum(w.size for w in self.weights.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weights[k].ravel() for k in TRAINABLE])

    def set_flat(self, vec) -> None:
        pos = 0
        for k in TRAINABLE:
            w = self.weights[k]
            self.weights[k] = np.asarray(vec[pos:pos + w.size], dtype=float).reshape(w.shape).copy()
            pos += w.size

    def checksum(self) -> str:
        h = hashlib.sha1()
        for k in TRAINABLE:
            h.update(np.ascontiguousarray(self.weights[k]).tobytes())
        h.update(self.coef_scale.tobytes())
        return h.hexdigest()

    def header(self) -> dict:
        return {
            "n_states": self.n_states, "n_inputs": self.n_inputs, "hidden": self.hidden,
            "term_count": self.term_count, "q": self.q, "tau": self.tau, "seed": self.seed,
            "shapes": {k: list(self.weights[k].shape) for k in TRAINABLE},
        }

    def to_bytes(self) -> bytes:
        """Versioned blob: magic, version, header length, JSON header, float64 payload."""
        head = json.dumps(self.header(), sort_keys=True).encode()
        payload = b"".join(np.ascontiguousarray(self.weights[k], dtype="<f8").tobytes() for k in TRAINABLE)
        payload += np.ascontiguousarray(self.coef_scale, dtype="<f8").tobytes()
        return _MAGIC + struct.pack("<II", _VERSION, len(head)) + head + payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> "RecoveryNetParams":
        if blob[:4] != _MAGIC:
            raise ValueError("not a parameter blob")
        version, hlen = struct.unpack("<II", blob[4:12])
        if version != _VERSION:
            raise ValueError(f"unsupported parameter blob version {version}")
        head = json.loads(blob[12:12 + hlen])
        pos = 12 + hlen
        weights = {}
        for k in TRAINABLE:
            shape = tuple(head["shapes"][k])
            size = int(np.prod(shape))
            weights[k] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).astype(float)
            pos += 8 * size
        n_coef = head["n_states"] * head["term_count"]
        scale = np.frombuffer(blob, dtype="<f8", count=n_coef, offset=pos).astype(float)
        return cls(head["n_states"], head["n_inputs"], head["hidden"], head["term_count"], head["q"], head["tau"],
                   head["seed"], weights, scale)

    def summary(self) -> str:
        lines = [f"seed: {self.seed}", f"tau: {self.tau:.4g}", f"parameters: {self.n_parameters()}"]
        lines += [f"{k}: {'x'.join(map(str, self.weights[k].shape))}" for k in TRAINABLE]
        return "\n".join(lines) + "\n"


def init_params(n_states: int, n_inputs: int, hidden: int, term_count: int, q: int = 0, tau: float = 1e-3,
                seed: int = 0, dense_hidden: int | None = None, out_scale: float = 1.0) -> RecoveryNetParams:
    """Seeded initialisation.

    GRU and first dense layer weights are uniform in +-1/sqrt(V), the output
    layer in +-out_scale/sqrt(dense_hidden); all biases start at zero.
    """
    if hidden < 1:
        raise NetShapeError("hidden size must be >= 1")
    dense_hidden = dense_hidden or hidden
    rng = np.random.default_rng(seed)
    C = n_states + n_inputs
    P = n_states * term_count + q
    a = 1.0 / np.sqrt(hidden)
    w = {}
    for g in "zrh":
        w["W" + g] = rng.uniform(-a, a, (hidden, C))
        w["U" + g] = rng.uniform(-a, a, (hidden, hidden))
    for g in "zrh":
        w["b" + g] = np.zeros(hidden)
    w["W1"] = rng.uniform(-a, a, (dense_hidden, hidden))
    w["b1"] = np.zeros(dense_hidden)
    a2 = out_scale / np.sqrt(dense_hidden)
    w["W2"] = rng.uniform(-a2, a2, (P, dense_hidden))
    w["b2"] = np.zeros(P)
    return RecoveryNetParams(n_states, n_inputs, hidden, term_count, q, tau, seed, w)


@dataclass
class NetTape:
    checksum: str
    inputs: np.ndarray  # (B, C, k)
    h: np.ndarray  # (k+1, B, V), h[0] = 0
    z: np.ndarray
    r: np.ndarray
    hc: np.ndarray
    a1: np.ndarray | None = None
    z1: np.ndarray | None = None
    out: np.ndarray | None = None


def gru_forward(params: RecoveryNetParams, batch) -> tuple[np.ndarray, NetTape]:
    """Run the GRU over the time axis; returns the final hidden state (B, V)."""
    x = np.asarray(getattr(batch, "data", batch), dtype=float)
    if x.ndim != 3 or x.shape[1] != params.channels:
        raise NetShapeError(f"batch must be (B, {params.channels}, k), got {x.shape}")
    B, _, k = x.shape
    w = params.weights
    V = params.hidden
    hs = np.zeros((k + 1, B, V))
    zs = np.empty((k, B, V))
    rs = np.empty((k, B, V))
    hcs = np.empty((k, B, V))
    h = hs[0]
    for t in range(k):
        xt = x[:, :, t]
        z = expit(xt @ w["Wz"].T + h @ w["Uz"].T + w["bz"])
        r = expit(xt @ w["Wr"].T + h @ w["Ur"].T + w["br"])
        hc = np.tanh(xt @ w["Wh"].T + (r * h) @ w["Uh"].T + w["bh"])
        h = (1.0 - z) * h + z * hc
        zs[t], rs[t], hcs[t], hs[t + 1] = z, r, hc, h
    return h, NetTape(params.checksum(), x, hs, zs, rs, hcs)


def dense_forward(params: RecoveryNetParams, hidden: np.ndarray, tape: NetTape | None = None):
    """MLP head: ReLU hidden layer, linear output.

    Returns ``(raw_coefficients (B, n*T), shifts (B, q), tape)``.
    """
    w = params.weights
    hidden = np.asarray(hidden, dtype=float)
    if hidden.ndim != 2 or hidden.shape[1] != params.hidden:
        raise NetShapeError(f"hidden must be (B, {params.hidden}), got {hidden.shape}")
    a1 = hidden @ w["W1"].T + w["b1"]
    z1 = np.maximum(a1, 0.0)
    out = z1 @ w["W2"].T + w["b2"]
    if tape is None:
        tape = NetTape(params.checksum(), None, hidden[None], None, None, None)
    tape.a1, tape.z1, tape.out = a1, z1, out
    nc = params.n_coef
    return out[:, :nc] * params.coef_scale, out[:, nc:], tape


def forward(params: RecoveryNetParams, batch):
    h, tape = gru_forward(params, batch)
    return dense_forward(params, h, tape)


def threshold_dropout(raw, tau: float) -> np.ndarray:
    """Zero every entry with magnitude below ``tau``; others pass unchanged."""
    if tau < 0:
        raise ValueError("tau must be non-negative")
    raw = np.asarray(raw, dtype=float)
    return np.where(np.abs(raw) < tau, 0.0, raw)


def dropout_mask(raw, tau: float) -> np.ndarray:
    """Gradient mask of :func:`threshold_dropout` (1 on the kept support)."""
    return (np.abs(np.asarray(raw, dtype=float)) >= tau).astype(float)


def top_p_dropout(raw, p: int) -> np.ndarray:
    """Keep the ``p`` largest-magnitude entries (ties resolved by index)."""
    raw = np.asarray(raw, dtype=float)
    keep = np.zeros(raw.shape, dtype=bool)
    if p > 0:
        order = np.argsort(-np.abs(raw.ravel()), kind="stable")[:p]
        keep.ravel()[order] = True
    return np.where(keep, raw, 0.0)


def net_backward(params: RecoveryNetParams, tape: NetTape, d_coef, d_shift=None, gru: bool = True) -> dict:
    """Reverse pass for gradients on the raw coefficients and shifts.

    ``d_coef`` is dL/d(raw coefficients) with shape (B, n*T).  Returns a
    dict of parameter gradients keyed like ``params.weights``.
    """
    if tape.checksum != params.checksum():
        raise NetShapeError("tape was recorded with different parameters")
    w = params.weights
    d_coef = np.asarray(d_coef, dtype=float)
    B = d_coef.shape[0]
    if d_shift is None:
        d_shift = np.zeros((B, params.q))
    d_out = np.concatenate([d_coef * params.coef_scale, np.asarray(d_shift, dtype=float).reshape(B, params.q)], axis=1)
    hidden = tape.h[-1]
    grads = {k: np.zeros_like(v) for k, v in w.items()}
    grads["W2"] = d_out.T @ tape.z1
    grads["b2"] = d_out.sum(axis=0)
    d_a1 = (d_out @ w["W2"]) * (tape.a1 > 0.0)
    grads["W1"] = d_a1.T @ hidden
    grads["b1"] = d_a1.sum(axis=0)
    dh = d_a1 @ w["W1"]
    if not gru or tape.inputs is None:
        return grads

    x = tape.inputs
    k = x.shape[2]
    for t in range(k - 1, -1, -1):
        xt = x[:, :, t]
        hp = tape.h[t]
        z, r, hc = tape.z[t], tape.r[t], tape.hc[t]
        dz = dh * (hc - hp)
        dhc = dh * z
        dh_prev = dh * (1.0 - z)
        dah = dhc * (1.0 - hc * hc)
        grads["Wh"] += dah.T @ xt
        grads["Uh"] += dah.T @ (r * hp)
        grads["bh"] += dah.sum(axis=0)
        drh = dah @ w["Uh"]
        dr = drh * hp
        dh_prev += drh * r
        dar = dr * r * (1.0 - r)
        grads["Wr"] += dar.T @ xt
        grads["Ur"] += dar.T @ hp
        grads["br"] += dar.sum(axis=0)
        dh_prev += dar @ w["Ur"]
        daz = dz * z * (1.0 - z)
        grads["Wz"] += daz.T @ xt
        grads["Uz"] += daz.T @ hp
        grads["bz"] += daz.sum(axis=0)
        dh_prev += daz @ w["Uz"]
        dh = dh_prev
    return grads


def flatten_grads(grads: dict) -> np.ndarray:
    return np.concatenate([grads[k].ravel() for k in TRAINABLE])
