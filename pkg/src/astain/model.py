"""Mitosis patch classifier and its bifurcated domain-classification branch.

Layer plan of the classifier (valid convolutions, 2x2 max-pool per block)::

    63 -conv4-> 60 -pool-> 30 -conv3-> 28 -pool-> 14 -conv3-> 12 -pool-> 6
       -conv3-> 4 -pool-> 2  -> flatten 64 -> fc 64 -> BN -> ReLU -> fc 2

The domain branch reads the post-pool activations of blocks 2 and 4.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from . import _kernels as K
from . import tensor as T
from .tensor import Parameter, RunningStats, ShapeError

PATCH = 63
FEATURES = 16
HIDDEN = 64
STRIDE = 16
OFFSET = PATCH // 2
TAP2_SHAPE = (FEATURES, 14, 14)
TAP4_SHAPE = (FEATURES, 2, 2)


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class ConvBlock:
    """conv -> batch-norm -> 2x2 max-pool -> ReLU on channels-last activations.

    Pooling before the ReLU gives the same values and gradients as ReLU before
    pooling (both are monotone) and touches a quarter of the memory.
    """

    def __init__(self, name: str, cin: int, cout: int, k: int):
        self.name = name
        self.kernel = Parameter(f"{name}.weight", np.zeros((cout, cin, k, k)))
        self.bias = Parameter(f"{name}.bias", np.zeros(cout))
        self.gamma = Parameter(f"{name}.bn.gamma", np.ones(cout))
        self.beta = Parameter(f"{name}.bn.beta", np.zeros(cout))
        self.running = RunningStats(cout)
        self._cache = None

    @property
    def parameters(self):
        return [self.kernel, self.bias, self.gamma, self.beta]

    def init(self, rng: np.random.Generator) -> None:
        cout, cin, kh, kw = self.kernel.value.shape
        self.kernel.value[...] = _he(rng, self.kernel.value.shape, cin * kh * kw)
        self.bias.value[...] = 0.0
        self.gamma.value[...] = 1.0
        self.beta.value[...] = 0.0
        self.running.reset()

    def _kmat(self):
        # matches the (row offset, col offset, channel) column order of im2col
        cout = self.kernel.value.shape[0]
        return self.kernel.value.transpose(0, 2, 3, 1).reshape(cout, -1)

    def forward(self, x, mode="train", update_running=True, input_grad=True, crop=False):
        """``x`` is ``[B,H,W,Cin]``; returns ``[B,(H-k+1)//2,(W-k+1)//2,Cout]``."""
        b, h, w, c = x.shape
        cout, cin, kh, kw = self.kernel.value.shape
        if c != cin or h < kh or w < kw:
            raise ShapeError(f"{self.name}: cannot apply {kh}x{kw}x{cin} kernel to input {x.shape}")
        ho, wo = h - kh + 1, w - kw + 1
        if not crop and (ho % 2 or wo % 2):
            raise ShapeError(f"{self.name}: max-pool needs even extents, got {ho}x{wo}")
        cols = K.im2col(np.ascontiguousarray(x), kh, kw)
        z = cols @ self._kmat().T
        z += self.bias.value
        if mode == "train":
            mean, var = K.batch_moments(z)
            if update_running:
                self.running.update(mean, var)
        elif mode == "infer":
            if not self.running.initialized:
                raise RuntimeError(f"{self.name}: infer mode requires initialized running statistics")
            mean, var = self.running.mean, self.running.var
        else:
            raise ValueError(f"unknown mode {mode!r}")
        inv_std = 1.0 / np.sqrt(var + T.BN_EPS)
        out, arg = K.bn_pool_relu(z, b, ho, wo, mean, inv_std, self.gamma.value, self.beta.value)
        self._cache = (x.shape, cols, z, out, arg, mean, inv_std, mode, input_grad)
        return out

    def backward(self, grad):
        xshape, cols, z, out, arg, mean, inv_std, mode, input_grad = self._cache
        cout, cin, kh, kw = self.kernel.value.shape
        b, h, w, c = xshape
        dz, dgamma, dbeta = K.bn_pool_relu_backward(
            np.ascontiguousarray(grad), out, arg, z, h - kh + 1, w - kw + 1,
            mean, inv_std, self.gamma.value, mode == "train")
        self.kernel.grad += (dz.T @ cols).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
        self.bias.grad += dz.sum(axis=0)
        self.gamma.grad += dgamma
        self.beta.grad += dbeta
        if not input_grad:
            return None
        dcols = dz @ self._kmat()
        return K.col2im(dcols, b, h, w, c, kh, kw)


def _nhwc(x):
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def _nchw(x):
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


class DenseHead:
    """flatten(64) -> fc 64 -> BN -> ReLU -> fc ``outputs``."""

    def __init__(self, name: str, inputs: int, outputs: int):
        self.fc1_w = Parameter(f"{name}.fc1.weight", np.zeros((HIDDEN, inputs)))
        self.fc1_b = Parameter(f"{name}.fc1.bias", np.zeros(HIDDEN))
        self.gamma = Parameter(f"{name}.fc1.bn.gamma", np.ones(HIDDEN))
        self.beta = Parameter(f"{name}.fc1.bn.beta", np.zeros(HIDDEN))
        self.fc2_w = Parameter(f"{name}.fc2.weight", np.zeros((outputs, HIDDEN)))
        self.fc2_b = Parameter(f"{name}.fc2.bias", np.zeros(outputs))
        self.running = RunningStats(HIDDEN)
        self._cache = None

    @property
    def parameters(self):
        return [self.fc1_w, self.fc1_b, self.gamma, self.beta, self.fc2_w, self.fc2_b]

    def init(self, rng: np.random.Generator) -> None:
        self.fc1_w.value[...] = _he(rng, self.fc1_w.value.shape, self.fc1_w.value.shape[1])
        self.fc2_w.value[...] = _he(rng, self.fc2_w.value.shape, HIDDEN)
        for p in (self.fc1_b, self.beta, self.fc2_b):
            p.value[...] = 0.0
        self.gamma.value[...] = 1.0
        self.running.reset()

    def forward(self, flat, mode="train", update_running=True):
        z, c1 = T.fully_connected(flat, self.fc1_w.value, self.fc1_b.value)
        z, c2 = T.batchnorm(z, self.gamma.value, self.beta.value, mode, self.running, update_running)
        z, c3 = T.relu(z)
        logits, c4 = T.fully_connected(z, self.fc2_w.value, self.fc2_b.value)
        self._cache = (c1, c2, c3, c4)
        return logits

    def backward(self, dlogits):
        c1, c2, c3, c4 = self._cache
        g, dw2, db2 = T.fully_connected_backward(dlogits, c4)
        g = T.relu_backward(g, c3)
        g, dgamma, dbeta = T.batchnorm_backward(g, c2)
        dflat, dw1, db1 = T.fully_connected_backward(g, c1)
        self.fc1_w.grad += dw1
        self.fc1_b.grad += db1
        self.gamma.grad += dgamma
        self.beta.grad += dbeta
        self.fc2_w.grad += dw2
        self.fc2_b.grad += db2
        return dflat

    def dense(self, grid):
        """Apply the head at every position of a [B,16,h,w] grid (fc1 as a 2x2 conv, fc2 as 1x1)."""
        w1 = self.fc1_w.value.reshape(HIDDEN, FEATURES, 2, 2)
        z, _ = T.conv2d(grid, w1, self.fc1_b.value)
        z, _ = T.batchnorm(z, self.gamma.value, self.beta.value, "infer", self.running)
        z, _ = T.relu(z)
        w2 = self.fc2_w.value[:, :, None, None]
        logits, _ = T.conv2d(z, w2, self.fc2_b.value)
        return logits


@dataclass
class ForwardTrace:
    class_probabilities: np.ndarray
    logits: np.ndarray
    tap2: np.ndarray
    tap4: np.ndarray


class MitosisClassifier:
    """Four conv blocks plus a two-layer dense head producing P(mitosis) per 63x63 patch."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.blocks = [
            ConvBlock("conv1", 3, FEATURES, 4),
            ConvBlock("conv2", FEATURES, FEATURES, 3),
            ConvBlock("conv3", FEATURES, FEATURES, 3),
            ConvBlock("conv4", FEATURES, FEATURES, 3),
        ]
        self.head = DenseHead("head", FEATURES * 2 * 2, 2)
        self.reinit(seed)

    def reinit(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        for b in self.blocks:
            b.init(rng)
        self.head.init(rng)

    @property
    def parameters(self) -> list[Parameter]:
        return [p for b in self.blocks for p in b.parameters] + self.head.parameters

    @property
    def running_stats(self) -> dict[str, RunningStats]:
        out = {f"{b.name}.bn": b.running for b in self.blocks}
        out["head.fc1.bn"] = self.head.running
        return out

    def zero_grad(self) -> None:
        for p in self.parameters:
            p.zero_grad()

    def forward(self, x: np.ndarray, mode: str = "train", update_running: bool = True,
                input_grad: bool = False) -> ForwardTrace:
        if x.ndim != 4 or x.shape[1:] != (3, PATCH, PATCH):
            raise ShapeError(f"classifier expects [B,3,{PATCH},{PATCH}] input, got {x.shape}")
        z = self.blocks[0].forward(_nhwc(x), mode, update_running, input_grad=input_grad)
        z = self.blocks[1].forward(z, mode, update_running)
        tap2 = z
        z = self.blocks[2].forward(z, mode, update_running)
        tap4 = _nchw(self.blocks[3].forward(z, mode, update_running))
        logits = self.head.forward(tap4.reshape(len(x), -1), mode, update_running)
        return ForwardTrace(T.softmax(logits), logits, _nchw(tap2), tap4)

    def backward(self, dlogits=None, dtap2=None, dtap4=None):
        """Accumulate parameter gradients from any combination of upstream signals.

        Returns the input gradient when the forward pass ran with ``input_grad``.
        """
        g = None
        if dlogits is not None:
            g = self.head.backward(dlogits).reshape((-1,) + TAP4_SHAPE)
        if dtap4 is not None:
            g = dtap4 if g is None else g + dtap4
        if g is None and dtap2 is None:
            return None
        if g is not None:
            g = self.blocks[3].backward(_nhwc(g))
            g = self.blocks[2].backward(g)
        if dtap2 is not None:
            g = _nhwc(dtap2) if g is None else g + _nhwc(dtap2)
        g = self.blocks[1].backward(g)
        dx = self.blocks[0].backward(g)
        return None if dx is None else _nchw(dx)

    def features(self, x: np.ndarray) -> np.ndarray:
        """Flattened post-ReLU/post-pool block-4 activations (infer mode), shape [B,64]."""
        return self.forward(x, "infer").tap4.reshape(len(x), -1)

    def dense_logits(self, image: np.ndarray) -> np.ndarray:
        """Infer-mode logits over a [B,3,H,W] image at stride 16; returns [B,2,h,w]."""
        if image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"dense inference expects [B,3,H,W], got {image.shape}")
        if image.shape[2] < PATCH or image.shape[3] < PATCH:
            raise ShapeError(f"image {image.shape[2]}x{image.shape[3]} smaller than a {PATCH}x{PATCH} patch")
        z = _nhwc(image)
        for b in self.blocks:
            z = b.forward(z, "infer", input_grad=False, crop=True)
        return self.head.dense(_nchw(z))


class DomainBranch:
    """Mirror of classifier blocks 3-4 applied to tap2, fused with tap4, then a dense head over D domains."""

    def __init__(self, n_domains: int, seed: int = 0, fusion: str = "sum"):
        if n_domains < 2:
            raise ValueError(f"domain branch needs at least 2 domains, got {n_domains}")
        if fusion not in ("sum", "concat"):
            raise ValueError(f"unknown fusion {fusion!r}")
        self.n_domains = n_domains
        self.fusion = fusion
        self.seed = seed
        self.blocks = [
            ConvBlock("domain.conv3", FEATURES, FEATURES, 3),
            ConvBlock("domain.conv4", FEATURES, FEATURES, 3),
        ]
        width = FEATURES * 4 * (2 if fusion == "concat" else 1)
        self.head = DenseHead("domain.head", width, n_domains)
        self.reinit(seed)

    def reinit(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        for b in self.blocks:
            b.init(rng)
        self.head.init(rng)

    @property
    def parameters(self) -> list[Parameter]:
        return [p for b in self.blocks for p in b.parameters] + self.head.parameters

    @property
    def running_stats(self) -> dict[str, RunningStats]:
        out = {f"{b.name}.bn": b.running for b in self.blocks}
        out["domain.head.fc1.bn"] = self.head.running
        return out

    def zero_grad(self) -> None:
        for p in self.parameters:
            p.zero_grad()

    def forward(self, tap2: np.ndarray, tap4: np.ndarray, mode: str = "train") -> np.ndarray:
        """Domain logits, shape [B, D]."""
        if tap2.shape[1:] != TAP2_SHAPE or tap4.shape[1:] != TAP4_SHAPE or len(tap2) != len(tap4):
            raise ShapeError(f"domain branch expects taps [B,{TAP2_SHAPE}] and [B,{TAP4_SHAPE}], "
                             f"got {tap2.shape} and {tap4.shape}")
        z = self.blocks[0].forward(_nhwc(tap2), mode)
        z = _nchw(self.blocks[1].forward(z, mode))
        fused = z + tap4 if self.fusion == "sum" else np.concatenate([z, tap4], axis=1)
        return self.head.forward(fused.reshape(len(tap2), -1), mode)

    def backward(self, dlogits: np.ndarray):
        """Accumulate θ_D gradients; returns ``(dtap2, dtap4)`` for the classifier."""
        g = self.head.backward(dlogits)
        if self.fusion == "sum":
            g = g.reshape((-1,) + TAP4_SHAPE)
            dtap4 = g
        else:
            g = g.reshape(-1, 2 * FEATURES, 2, 2)
            g, dtap4 = g[:, :FEATURES], g[:, FEATURES:]
        g = self.blocks[1].backward(_nhwc(g))
        dtap2 = _nchw(self.blocks[0].backward(g))
        return dtap2, np.ascontiguousarray(dtap4)


def build_mitosis_classifier(seed: int) -> MitosisClassifier:
    return MitosisClassifier(seed)


def build_domain_branch(n_domains: int, seed: int, fusion: str = "sum") -> DomainBranch:
    return DomainBranch(n_domains, seed, fusion)


def forward_domain(branch: DomainBranch, trace: ForwardTrace, mode: str = "train") -> np.ndarray:
    """Domain probabilities for the taps of a classifier forward pass."""
    return T.softmax(branch.forward(trace.tap2, trace.tap4, mode))


def reinit_domain_branch(branch: DomainBranch, seed: int) -> None:
    branch.reinit(seed)


def parameter_count(net) -> int:
    return sum(p.value.size for p in net.parameters)


# --------------------------------------------------------------------------
# checkpoint container
# --------------------------------------------------------------------------

MAGIC = b"DANNCKPT"
VERSION = 1


class CheckpointError(Exception):
    """Base class for unreadable checkpoints."""


class CheckpointFormatError(CheckpointError):
    """Bad magic string or unsupported version."""


class CheckpointTruncatedError(CheckpointError):
    """File ends before the declared content."""


def state_dict(model: MitosisClassifier, branch: DomainBranch | None = None) -> dict[str, np.ndarray]:
    """Ordered name -> array mapping; running statistics use the ``rs.`` prefix."""
    out = {}
    nets = [model] + ([branch] if branch is not None else [])
    for net in nets:
        for p in net.parameters:
            out[p.name] = p.value
    for net in nets:
        for name, rs in net.running_stats.items():
            if rs.initialized:
                out[f"rs.{name}.mean"] = rs.mean
                out[f"rs.{name}.var"] = rs.var
    return out


def write_state(entries: dict[str, np.ndarray], fh: BinaryIO, meta: dict | None = None) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<I", VERSION))
    fh.write(struct.pack("<I", len(entries)))
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointTruncatedError(f"checkpoint truncated: wanted {n} bytes, got {len(buf)}")
    return buf


def read_state(fh: BinaryIO) -> dict[str, np.ndarray]:
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointFormatError(f"not a checkpoint: magic {magic!r} != {MAGIC!r}")
    (version,) = struct.unpack("<I", _read(fh, 4))
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (count,) = struct.unpack("<I", _read(fh, 4))
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", _read(fh, 4))
        name = _read(fh, n).decode("utf-8")
        (rank,) = struct.unpack("<I", _read(fh, 4))
        shape = struct.unpack(f"<{rank}I", _read(fh, 4 * rank))
        size = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(_read(fh, 8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if fh.read(1):
        raise CheckpointFormatError("trailing bytes after checkpoint entries")
    return out


def checkpoint_bytes(model: MitosisClassifier, branch: DomainBranch | None = None) -> bytes:
    buf = io.BytesIO()
    write_state(state_dict(model, branch), buf)
    return buf.getvalue()


def load_state(entries: dict[str, np.ndarray], fusion: str = "sum"):
    """Rebuild ``(model, branch_or_None)`` from a state mapping."""
    model = MitosisClassifier(seed=0)
    branch = None
    if "domain.head.fc2.bias" in entries:
        n_domains = entries["domain.head.fc2.bias"].shape[0]
        if entries["domain.head.fc1.weight"].shape[1] == 2 * FEATURES * 4:
            fusion = "concat"
        branch = DomainBranch(n_domains, seed=0, fusion=fusion)
    for net in [model] + ([branch] if branch is not None else []):
        for p in net.parameters:
            if p.name not in entries:
                raise CheckpointFormatError(f"checkpoint lacks parameter {p.name!r}")
            if entries[p.name].shape != p.value.shape:
                raise CheckpointFormatError(
                    f"parameter {p.name!r} has shape {entries[p.name].shape}, expected {p.value.shape}")
            p.value[...] = entries[p.name]
        for name, rs in net.running_stats.items():
            key = f"rs.{name}"
            if f"{key}.mean" in entries:
                rs.mean = entries[f"{key}.mean"].copy()
                rs.var = entries[f"{key}.var"].copy()
            else:
                rs.reset()
    return model, branch
