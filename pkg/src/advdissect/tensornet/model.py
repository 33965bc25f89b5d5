"""Feed-forward model over named layers, splittable at any layer.

The model runs as the composition tail ∘ head around any named cut point:
forward_to gives the head, forward_from the tail, and both share the
exact code path of forward, so composing them reproduces forward
bit-identically.
"""

from __future__ import annotations

import hashlib
import json
import struct
from contextlib import contextmanager

import numpy as np

from ..rng import TAG_MODEL_INIT, substream
from . import tensor as T
from .layers import (
    Conv2d,
    Dense,
    Flatten,
    GlobalAvgPool,
    MaxPool2d,
    ReLU,
    init_params,
    layer_from_dict,
    layer_to_dict,
    output_shape,
)
from .tensor import NonFiniteError, ShapeError, Tensor

MAGIC = b"TNET"
FORMAT_VERSION = 1


class ModelConfigError(Exception):
    pass


class UnknownLayerError(KeyError):
    pass


class ModelFormatError(Exception):
    pass


class Model:
    """Ordered layer graph with per-layer parameters and named cut points."""

    def __init__(self, layers, input_shape, seed: int = 0, _init: bool = True):
        layers = list(layers)
        if not layers:
            raise ModelConfigError("model needs at least one layer")
        names = [l.name for l in layers]
        if len(set(names)) != len(names):
            raise ModelConfigError("layer names must be unique")
        if not isinstance(layers[-1], Dense):
            raise ModelConfigError("final layer must be dense (produces the logit vector)")

        self.layers = layers
        self.input_shape = tuple(input_shape)
        self._index = {name: i for i, name in enumerate(names)}

        # walk shapes once; construction fails on the offending layer
        self._out_shapes = []
        shape = self.input_shape
        for layer in layers:
            shape = output_shape(layer, shape)
            self._out_shapes.append(shape)
        self.num_classes = layers[-1].out_features

        self.params = {}
        if _init:
            for i, layer in enumerate(layers):
                in_shape = self.input_shape if i == 0 else self._out_shapes[i - 1]
                p = init_params(layer, in_shape, substream(seed, TAG_MODEL_INIT, i))
                if p:
                    self.params[layer.name] = p

    # -- execution ----------------------------------------------------------

    def _apply(self, layer, t: Tensor) -> Tensor:
        if isinstance(layer, Conv2d):
            p = self.params[layer.name]
            return T.conv2d(t, p["w"], p["b"], stride=layer.stride, padding=layer.padding)
        if isinstance(layer, ReLU):
            return T.relu(t)
        if isinstance(layer, MaxPool2d):
            return T.maxpool2d(t, size=layer.size, stride=layer.stride)
        if isinstance(layer, GlobalAvgPool):
            return T.global_avg_pool(t)
        if isinstance(layer, Flatten):
            return T.flatten2d(t)
        if isinstance(layer, Dense):
            p = self.params[layer.name]
            return T.dense(t, p["w"], p["b"])
        raise TypeError(f"unknown layer type {type(layer)!r}")

    def _run(self, t: Tensor, lo: int, hi: int) -> Tensor:
        for layer in self.layers[lo:hi]:
            try:
                t = self._apply(layer, t)
            except ShapeError as e:
                raise ShapeError(f"layer {layer.name!r}: {e}") from e
        return t

    def _check_input(self, x: Tensor):
        if x.data.shape[1:] != self.input_shape:
            raise ShapeError(
                f"input shape {x.data.shape[1:]} does not match model input {self.input_shape}"
            )

    def forward(self, x) -> Tensor:
        """Full forward pass; x is a batch (B, C, H, W). Returns logits (B, num_classes)."""
        x = T.as_tensor(x)
        self._check_input(x)
        logits = self._run(x, 0, len(self.layers))
        if not np.all(np.isfinite(logits.data)):
            raise NonFiniteError("forward produced non-finite logits")
        return logits

    def layer_index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise UnknownLayerError(f"no layer named {name!r}") from None

    def layer_output_shape(self, name: str) -> tuple:
        return self._out_shapes[self.layer_index(name)]

    def forward_to(self, layer: str, x) -> Tensor:
        """Run the head up to and including `layer`."""
        x = T.as_tensor(x)
        self._check_input(x)
        return self._run(x, 0, self.layer_index(layer) + 1)

    def forward_from(self, layer: str, a) -> Tensor:
        """Run the tail after `layer`, starting from that layer's output."""
        a = T.as_tensor(a)
        idx = self.layer_index(layer)
        expect = self._out_shapes[idx]
        if a.data.shape[1:] != expect:
            raise ShapeError(
                f"activation shape {a.data.shape[1:]} does not match output {expect} of layer {layer!r}"
            )
        return self._run(a, idx + 1, len(self.layers))

    def forward_collect(self, x, layer_names) -> dict:
        """One inference pass returning {name: activation array} for the named layers."""
        x = T.as_tensor(x)
        self._check_input(x)
        wanted = {name: self.layer_index(name) for name in layer_names}
        taps = {}
        t = x
        for i, layer in enumerate(self.layers):
            t = self._apply(layer, t)
            for name, idx in wanted.items():
                if idx == i:
                    taps[name] = t.data.copy()
        return taps

    # -- convenience heads ---------------------------------------------------

    def predict_proba(self, x) -> np.ndarray:
        return T.softmax(self.forward(x).data)

    def predict(self, x) -> np.ndarray:
        return self.forward(x).data.argmax(axis=1)

    def grad_input(self, x, labels, loss: str = "cross_entropy") -> np.ndarray:
        """Gradient of the summed per-sample loss w.r.t. every input element."""
        if loss != "cross_entropy":
            raise ValueError(f"unsupported loss {loss!r}")
        labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        if np.any(labels >= self.num_classes) or np.any(labels < 0):
            raise ValueError("label out of range")
        xt = Tensor(x, requires_grad=True)
        with self.frozen():
            logits = self.forward(xt)
            obj = T.cross_entropy_with_logits(logits, labels, reduction="sum")
            obj.backward()
        return xt.grad

    # -- parameter management --------------------------------------------------

    def parameters(self):
        for layer in self.layers:
            p = self.params.get(layer.name)
            if p:
                yield p["w"]
                yield p["b"]

    def zero_grads(self):
        for p in self.parameters():
            p.zero_grad()

    @contextmanager
    def frozen(self):
        """Temporarily stop tracking parameter gradients (pure inference/attacks)."""
        saved = [(p, p.requires_grad) for p in self.parameters()]
        for p, _ in saved:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, flag in saved:
                p.requires_grad = flag

    def state_checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    # -- serialization ----------------------------------------------------------

    def save(self, path):
        header = {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [layer_to_dict(l) for l in self.layers],
        }
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("B", FORMAT_VERSION))
            f.write(struct.pack("<I", len(hbytes)))
            f.write(hbytes)
            for p in self.parameters():
                f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "Model":
        with open(path, "rb") as f:
            blob = f.read()
        if len(blob) < 9 or blob[:4] != MAGIC:
            raise ModelFormatError("bad magic: not a model file")
        version = blob[4]
        if version != FORMAT_VERSION:
            raise ModelFormatError(f"unsupported format version {version}")
        hlen = struct.unpack("<I", blob[5:9])[0]
        try:
            header = json.loads(blob[9:9 + hlen])
        except ValueError as e:
            raise ModelFormatError(f"corrupt header: {e}") from e
        layers = [layer_from_dict(d) for d in header["layers"]]
        model = cls(layers, tuple(header["input_shape"]), _init=False)

        off = 9 + hlen
        shape = model.input_shape
        for i, layer in enumerate(layers):
            in_shape = model.input_shape if i == 0 else model._out_shapes[i - 1]
            if isinstance(layer, (Conv2d, Dense)):
                if isinstance(layer, Conv2d):
                    wshape = (layer.out_channels, in_shape[0], layer.kernel_size, layer.kernel_size)
                    bshape = (layer.out_channels,)
                else:
                    wshape = (layer.out_features, in_shape[0])
                    bshape = (layer.out_features,)
                n_w, n_b = int(np.prod(wshape)), int(np.prod(bshape))
                need = (n_w + n_b) * 8
                if off + need > len(blob):
                    raise ModelFormatError("truncated weight payload")
                w = np.frombuffer(blob, dtype="<f8", count=n_w, offset=off).reshape(wshape)
                off += n_w * 8
                b = np.frombuffer(blob, dtype="<f8", count=n_b, offset=off).reshape(bshape)
                off += n_b * 8
                model.params[layer.name] = {
                    "w": Tensor(w.copy(), requires_grad=True),
                    "b": Tensor(b.copy(), requires_grad=True),
                }
            shape = model._out_shapes[i]
        if off != len(blob):
            raise ModelFormatError("trailing bytes after weight payload")
        return model
