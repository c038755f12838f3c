"""Binary network serialization (little-endian "MNDL" container).

Layout:

    magic   4 bytes  b"MNDL"
    version u32      (currently 1)
    layers  u32      layer count
    per layer:
        tag     u8   1=Conv2d 2=MaxPool 3=ReLU 4=Flatten 5=Dense
        hyperparameters, u32 each:
            Conv2d:  in_channels, out_channels, kernel, stride
            MaxPool: size, stride
            ReLU:    (none)
            Flatten: (none)
            Dense:   in_units, out_units
        parameter tensors (Conv2d: weights then bias; Dense: weights then
        bias), each encoded as: ndim u32, dims u32 * ndim, data float32.

Weights round-trip bit-exactly as float32; float64 networks are cast on
save. Errors report the byte offset where parsing failed.
"""

import struct

import numpy as np

from .errors import FormatError
from .nn import Conv2d, Dense, Flatten, MaxPool, Network, ReLU

MAGIC = b"MNDL"
VERSION = 1

_TAG_CONV = 1
_TAG_POOL = 2
_TAG_RELU = 3
_TAG_FLATTEN = 4
_TAG_DENSE = 5


def _pack_tensor(arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    out = [struct.pack("<I", arr.ndim)]
    out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.append(arr.tobytes())
    return b"".join(out)


def save_network(network, path):
    chunks = [MAGIC, struct.pack("<II", VERSION, len(network.layers))]
    for layer in network.layers:
        if isinstance(layer, Conv2d):
            chunks.append(struct.pack("<BIIII", _TAG_CONV, layer.in_channels,
                                      layer.out_channels, layer.kernel, layer.stride))
            chunks.append(_pack_tensor(layer.params["w"]))
            chunks.append(_pack_tensor(layer.params["b"]))
        elif isinstance(layer, MaxPool):
            chunks.append(struct.pack("<BII", _TAG_POOL, layer.size, layer.stride))
        elif isinstance(layer, ReLU):
            chunks.append(struct.pack("<B", _TAG_RELU))
        elif isinstance(layer, Flatten):
            chunks.append(struct.pack("<B", _TAG_FLATTEN))
        elif isinstance(layer, Dense):
            chunks.append(struct.pack("<BII", _TAG_DENSE, layer.in_units, layer.out_units))
            chunks.append(_pack_tensor(layer.params["w"]))
            chunks.append(_pack_tensor(layer.params["b"]))
        else:
            raise ValueError(f"cannot serialize layer type {type(layer).__name__}")
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(
                f"truncated file while reading {what}: expected {n} bytes at "
                f"offset {self.pos}, only {len(self.data) - self.pos} available",
                offset=self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def u8(self, what):
        return self.take(1, what)[0]

    def tensor(self, what):
        ndim = self.u32(f"{what} ndim")
        if ndim > 8:
            raise FormatError(f"implausible tensor rank {ndim} for {what}",
                              offset=self.pos - 4)
        shape = struct.unpack(f"<{ndim}I", self.take(4 * ndim, f"{what} dims"))
        count = int(np.prod(shape)) if ndim else 1
        raw = self.take(4 * count, f"{what} data")
        return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def load_network(path, dtype=np.float32, class_count=None):
    """Load an MNDL file. The trailing Dense layer defines class_count
    unless overridden."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic: not an MNDL model file", offset=0)
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}", offset=4)
    n_layers = r.u32("layer count")
    layers = []
    for i in range(n_layers):
        tag = r.u8(f"layer {i} tag")
        if tag == _TAG_CONV:
            cin = r.u32("in_channels")
            cout = r.u32("out_channels")
            k = r.u32("kernel")
            s = r.u32("stride")
            layer = Conv2d(cin, cout, k, s, dtype=dtype)
            layer.params["w"] = r.tensor("conv weights").astype(dtype)
            layer.params["b"] = r.tensor("conv bias").astype(dtype)
            if layer.params["w"].shape != (cout, cin, k, k):
                raise FormatError(
                    f"conv weight shape {layer.params['w'].shape} does not match "
                    f"header ({cout}, {cin}, {k}, {k})", offset=r.pos)
        elif tag == _TAG_POOL:
            layer = MaxPool(r.u32("pool size"), r.u32("pool stride"))
        elif tag == _TAG_RELU:
            layer = ReLU()
        elif tag == _TAG_FLATTEN:
            layer = Flatten()
        elif tag == _TAG_DENSE:
            n_in = r.u32("in_units")
            n_out = r.u32("out_units")
            layer = Dense(n_in, n_out, dtype=dtype)
            layer.params["w"] = r.tensor("dense weights").astype(dtype)
            layer.params["b"] = r.tensor("dense bias").astype(dtype)
        else:
            raise FormatError(f"unknown layer tag {tag}", offset=r.pos - 1)
        layers.append(layer)
    if r.pos != len(r.data):
        raise FormatError(f"{len(r.data) - r.pos} trailing bytes after last layer",
                          offset=r.pos)
    if class_count is None:
        if not layers or not isinstance(layers[-1], Dense):
            raise FormatError("model does not end in a Dense layer", offset=r.pos)
        class_count = layers[-1].out_units
    return Network(layers, input_shape=None, class_count=class_count)
