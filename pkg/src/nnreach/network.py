"""Feedforward ReLU controllers and their plain-text model format.

Format::

    # comments are allowed anywhere
    layers=2
    sizes=2,3,1
    W
    0.5,-1.0
    ...            (one comma-separated row per output unit)
    b
    0.0,0.1,0.2
    W
    ...

Hidden layers use ReLU, the output layer is linear.  Inputs are raw state
units; there are no normalisation constants in the file.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TextIO

import numpy as np

# Action index tables shared by the controllers, MDPs and dynamics.
MOUNTAIN_CAR_ACTIONS = (-1, 0, 1)


class NetworkFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Network:
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        ws = tuple(np.array(w, dtype=float, ndmin=2) for w in self.weights)
        bs = tuple(np.array(b, dtype=float, ndmin=1) for b in self.biases)
        if not ws or len(ws) != len(bs):
            raise ValueError("a network needs one bias vector per weight matrix")
        for k, (w, b) in enumerate(zip(ws, bs)):
            if b.shape != (w.shape[0],):
                raise ValueError(f"layer {k}: bias has {b.size} entries, expected {w.shape[0]}")
            if k and w.shape[1] != ws[k - 1].shape[0]:
                raise ValueError(f"layer {k}: expects {w.shape[1]} inputs, previous layer has {ws[k - 1].shape[0]}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {k}: non-finite parameter")
            w.setflags(write=False)
            b.setflags(write=False)
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_outputs(self) -> int:
        return self.weights[-1].shape[0]

    def __call__(self, x):
        return evaluate(self, x)


def evaluate(net: Network, x) -> np.ndarray:
    """Network outputs for one input vector or a batch of row vectors."""
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    h = np.atleast_2d(arr)
    if h.shape[1] != net.n_inputs:
        raise ValueError(f"expected {net.n_inputs} inputs, got {h.shape[1]}")
    if not np.all(np.isfinite(h)):
        raise ValueError("network inputs must be finite")
    last = len(net.weights) - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w.T + b
        if k < last:
            h = np.maximum(h, 0.0)
    return h[0] if single else h


def argmax_action(outputs) -> int:
    """Index of the largest output; ties go to the lowest index."""
    y = np.asarray(outputs, dtype=float)
    if y.size == 0:
        raise ValueError("empty output vector")
    if np.any(np.isnan(y)):
        raise ValueError("output vector contains NaN")
    return int(np.argmax(y))


def argmax_actions(outputs) -> np.ndarray:
    y = np.atleast_2d(np.asarray(outputs, dtype=float))
    if np.any(np.isnan(y)):
        raise ValueError("output matrix contains NaN")
    return np.argmax(y, axis=1)


def random_network(sizes, rng: np.random.Generator, scale: float = 1.0) -> Network:
    """He-style random initialisation, mostly for tests and training."""
    ws, bs = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        ws.append(rng.normal(0.0, scale * np.sqrt(2.0 / n_in), size=(n_out, n_in)))
        bs.append(rng.normal(0.0, 0.1 * scale, size=n_out))
    return Network(tuple(ws), tuple(bs))


def _fmt(values) -> str:
    return ",".join(repr(float(v)) for v in values)


def save_network(net: Network, stream: TextIO, header=()) -> None:
    for line in header:
        stream.write(f"# {line}\n")
    stream.write(f"layers={len(net.weights)}\n")
    stream.write("sizes=" + ",".join(str(n) for n in net.layer_sizes) + "\n")
    for w, b in zip(net.weights, net.biases):
        stream.write("W\n")
        for row in w:
            stream.write(_fmt(row) + "\n")
        stream.write("b\n")
        stream.write(_fmt(b) + "\n")


def load_network(stream: TextIO) -> Network:
    lines = []
    for lineno, raw in enumerate(stream, 1):
        text = raw.split("#", 1)[0].strip()
        if text:
            lines.append((lineno, text))
    pos = 0

    def take(what):
        nonlocal pos
        if pos >= len(lines):
            last = lines[-1][0] if lines else 0
            raise NetworkFormatError(f"line {last}: file ends before {what}")
        item = lines[pos]
        pos += 1
        return item

    def floats(lineno, text, n, what):
        try:
            vals = [float(v) for v in text.split(",")]
        except ValueError:
            raise NetworkFormatError(f"line {lineno}: {what} has a non-numeric entry") from None
        if len(vals) != n:
            raise NetworkFormatError(f"line {lineno}: {what} has {len(vals)} values, expected {n}")
        if not all(np.isfinite(vals)):
            raise NetworkFormatError(f"line {lineno}: {what} has a non-finite value")
        return vals

    lineno, text = take("layers=")
    if not text.startswith("layers="):
        raise NetworkFormatError(f"line {lineno}: expected layers=<L>")
    n_layers = int(text[7:])
    lineno, text = take("sizes=")
    if not text.startswith("sizes="):
        raise NetworkFormatError(f"line {lineno}: expected sizes=<n0,...>")
    sizes = [int(v) for v in text[6:].split(",")]
    if len(sizes) != n_layers + 1:
        raise NetworkFormatError(f"line {lineno}: {len(sizes)} sizes given for {n_layers} layers")
    ws, bs = [], []
    for k in range(n_layers):
        lineno, text = take(f"layer {k} weights")
        if text != "W":
            raise NetworkFormatError(f"line {lineno}: layer {k}: expected 'W'")
        rows = []
        for r in range(sizes[k + 1]):
            lineno, text = take(f"layer {k} weight row {r}")
            if text == "b":
                raise NetworkFormatError(f"line {lineno}: layer {k}: only {r} weight rows, expected {sizes[k + 1]}")
            rows.append(floats(lineno, text, sizes[k], f"layer {k} weight row {r}"))
        lineno, text = take(f"layer {k} bias")
        if text != "b":
            raise NetworkFormatError(f"line {lineno}: layer {k}: expected 'b' after {sizes[k + 1]} weight rows")
        lineno, text = take(f"layer {k} bias values")
        bs.append(floats(lineno, text, sizes[k + 1], f"layer {k} bias"))
        ws.append(rows)
    if pos != len(lines):
        raise NetworkFormatError(f"line {lines[pos][0]}: unexpected content after the last layer")
    return Network(tuple(np.array(w) for w in ws), tuple(np.array(b) for b in bs))
