"""Time-indexed energy model with an explicit log-normalizer head.

The unnormalized log-density is ``log q(t, x) = F(t) - U(t, x)`` with

* ``U(t, x) = x . net1(t, x) + net2(t, x)``, two tanh MLPs sharing the
  input ``[tau(t), x]``,
* ``F(t) = w . tau(t) + b``, a linear head over the same time features,
* ``tau`` a fixed sinusoidal embedding with geometrically spaced
  frequencies from 1 to 1000.

The dot-product form keeps U linear in x at initialization, which makes
early score matching well behaved.  Graphs are built once per batch
shape and reused with rebound leaves; parameters always enter as leaves
so one graph serves every optimization step.
"""

from __future__ import annotations

import json
import struct
from typing import Optional

import numpy as np

from . import autodiff as ad

__all__ = ["EnergyModel", "time_embedding", "load_checkpoint"]

_MAGIC = b"EBDL"
_VERSION = 1


def time_embedding(t, m: int = 16) -> np.ndarray:
    """Sinusoidal features of scalar time: (sin, cos) pairs at m frequencies.

    Frequencies are 10**(3k/(m-1)) for k = 0..m-1, i.e. geometric from 1
    to 1000; every feature stays in [-1, 1].  Returns (B, 2m).
    """
    t = np.atleast_1d(np.asarray(t, dtype=np.float64)).reshape(-1, 1)
    k = np.arange(m, dtype=np.float64)
    omega = 10.0 ** (3.0 * k / (m - 1))
    angles = t * omega[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def _init_params(d: int, width: int, depth: int, m: int, seed: int) -> dict:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    params: dict = {}
    in_dim = 2 * m + d
    for net, out_dim in (("dot", d), ("sca", 1)):
        sizes = [in_dim] + [width] * (depth - 1) + [out_dim]
        for i in range(depth):
            fan_in = sizes[i]
            bound = 1.0 / np.sqrt(fan_in)
            params[f"{net}.W{i}"] = rng.uniform(-bound, bound, size=(sizes[i], sizes[i + 1]))
            params[f"{net}.b{i}"] = np.zeros(sizes[i + 1])
    bound = 1.0 / np.sqrt(2 * m)
    params["fhead.w"] = rng.uniform(-bound, bound, size=(2 * m, 1))
    params["fhead.b"] = np.zeros(1)
    return params


class EnergyModel:
    """log q(t, x) = F(t) - U(t, x) over R^d, parameterized by two MLPs."""

    def __init__(
        self,
        d: int,
        width: int = 64,
        depth: int = 4,
        m: int = 16,
        seed: int = 0,
        params: Optional[dict] = None,
    ):
        if depth < 2:
            raise ValueError(f"depth must be at least 2 linear layers, got {depth}")
        self.d = int(d)
        self.width = int(width)
        self.depth = int(depth)
        self.m = int(m)
        self.seed = int(seed)
        self.params = params if params is not None else _init_params(d, width, depth, m, seed)
        self.param_names = list(self.params.keys())
        self.param_leaves = {
            name: ad.leaf(name, self.params[name].shape) for name in self.param_names
        }
        self._graphs: dict = {}
        self._programs: dict = {}

    # -- graph construction -----------------------------------------------

    def _mlp(self, net: str, inputs: ad.Node) -> ad.Node:
        h = inputs
        batch = inputs.shape[0]
        for i in range(self.depth):
            w = self.param_leaves[f"{net}.W{i}"]
            b = self.param_leaves[f"{net}.b{i}"]
            h = ad.add(ad.matmul(h, w), ad.broadcast_to(b, (batch, w.shape[1])))
            if i < self.depth - 1:
                h = ad.tanh(h)
        return h

    def build_lp(self, batch: int, tag: str = "") -> dict:
        """Nodes computing log q for a (batch, d) block; memoized per (batch, tag).

        Returns {"te", "x", "lp"}; te is the precomputed embedding leaf of
        shape (batch, 2m), lp has shape (batch, 1).  Distinct tags create
        distinct input leaves over the same parameter leaves, so several
        time points of one batch can live in a single graph.
        """
        key = (batch, tag)
        if key in self._graphs:
            return self._graphs[key]
        te = ad.leaf(f"te{tag}", (batch, 2 * self.m))
        x = ad.leaf(f"x{tag}", (batch, self.d))
        joint = ad.concat([te, x], axis=1)
        dot = ad.reduce_sum(ad.mul(x, self._mlp("dot", joint)), axis=1, keepdims=True)
        energy = ad.add(dot, self._mlp("sca", joint))
        f_w = self.param_leaves["fhead.w"]
        f_b = self.param_leaves["fhead.b"]
        fhead = ad.add(ad.matmul(te, f_w), ad.broadcast_to(f_b, (batch, 1)))
        graph = {"te": te, "x": x, "lp": ad.sub(fhead, energy), "energy": energy}
        self._graphs[key] = graph
        return graph

    def _program(self, batch: int, kind: str) -> tuple:
        key = (batch, kind)
        if key in self._programs:
            return self._programs[key]
        graph = self.build_lp(batch)
        if kind == "lp":
            prog = ad.Program([graph["lp"]])
        elif kind == "score":
            score = ad.grad(ad.reduce_sum(graph["lp"]), [graph["x"]])[0]
            prog = ad.Program([graph["lp"], score])
        else:  # pragma: no cover - internal
            raise ValueError(kind)
        entry = (prog, graph)
        self._programs[key] = entry
        return entry

    def bind_params(self, env: dict) -> dict:
        env.update(self.params)
        return env

    def _env(self, t, x: np.ndarray) -> dict:
        te = time_embedding(t, self.m)
        if te.shape[0] == 1 and x.shape[0] > 1:
            te = np.repeat(te, x.shape[0], axis=0)
        return self.bind_params({"te": te, "x": np.asarray(x, dtype=np.float64)})

    # -- numpy-facing evaluation -------------------------------------------

    def log_density(self, t, x) -> np.ndarray:
        """Unnormalized log-density at (t, x); t is a scalar or per-row vector."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        prog, _ = self._program(x.shape[0], "lp")
        (lp,) = prog.run(self._env(t, x))
        return lp[:, 0]

    def score(self, t, x) -> np.ndarray:
        """Gradient of log q with respect to x, row-wise."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        prog, _ = self._program(x.shape[0], "score")
        _, s = prog.run(self._env(t, x))
        return s

    def time_derivative(self, t: float, x, h: float = 1e-3) -> np.ndarray:
        """Central difference of log q in t; t +- h must stay inside [0, 1]."""
        t = float(t)
        if t - h < 0.0 or t + h > 1.0:
            raise ValueError(f"time derivative stencil [{t - h}, {t + h}] leaves [0, 1]")
        hi = self.log_density(t + h, x)
        lo = self.log_density(t - h, x)
        return (hi - lo) / (2.0 * h)

    # -- persistence ---------------------------------------------------------

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def save_checkpoint(self, path) -> None:
        """Binary layout: magic, version byte, u32 header length, JSON header,
        then float64 little-endian parameter blocks in header order."""
        header = {
            "d": self.d,
            "width": self.width,
            "depth": self.depth,
            "m": self.m,
            "seed": self.seed,
            "shapes": {name: list(self.params[name].shape) for name in self.param_names},
        }
        blob = json.dumps(header).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(bytes([_VERSION]))
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            for name in self.param_names:
                fh.write(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())


def load_checkpoint(path) -> EnergyModel:
    """Rebuild a model from :meth:`EnergyModel.save_checkpoint`."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise ValueError(f"not a model checkpoint: bad magic {raw[:4]!r}")
    if raw[4] != _VERSION:
        raise ValueError(f"unsupported checkpoint version {raw[4]}")
    (hlen,) = struct.unpack("<I", raw[5:9])
    header = json.loads(raw[9 : 9 + hlen].decode("utf-8"))
    offset = 9 + hlen
    params: dict = {}
    for name, shape in header["shapes"].items():
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        block = np.frombuffer(raw, dtype="<f8", count=size, offset=offset)
        params[name] = block.reshape(shape).astype(np.float64)
        offset += size * 8
    if offset != len(raw):
        raise ValueError(f"checkpoint has {len(raw) - offset} trailing bytes")
    return EnergyModel(
        d=header["d"],
        width=header["width"],
        depth=header["depth"],
        m=header["m"],
        seed=header["seed"],
        params=params,
    )
