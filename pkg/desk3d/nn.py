"""Neural building blocks, parameter storage, optimizer, EMA and checkpoints."""

import contextlib
import hashlib
import json
import logging
import math
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import gradcore as G
from .exceptions import Desk3DCheckpointError, Desk3DGradientError, Desk3DValidationError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "DESK3D-CHECKPOINT 1"


class ParamStore:
    """Named map of parameter tensors with optimizer moments and an EMA shadow.

    Parameters are registered by the blocks that own them; names are dotted
    paths such as ``blocks.0.attn.q.weight``.
    """

    def __init__(self) -> None:
        self.params: Dict[str, G.Tensor] = {}
        self.ema_shadow: Optional[Dict[str, np.ndarray]] = None
        self.step_count = 0
        self._moments: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}

    def add(self, name: str, value: np.ndarray, requires_grad: bool = True) -> G.Tensor:
        """Register a new parameter.

        Raises:
            Desk3DValidationError: If the name is already taken or contains whitespace
        """
        if name in self.params:
            raise Desk3DValidationError(f"Parameter '{name}' is already registered")
        if not name or any(ch.isspace() for ch in name):
            raise Desk3DValidationError(f"Invalid parameter name: {name!r}")
        tensor = G.Tensor(np.asarray(value, dtype=np.float32), requires_grad=requires_grad, name=name)
        self.params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> G.Tensor:
        return self.params[name]

    def __contains__(self, name: object) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def names(self, prefix: str = "", exclude: Optional[str] = None) -> List[str]:
        return [n for n in self.params if n.startswith(prefix) and not (exclude and n.startswith(exclude))]

    def num_parameters(self, prefix: str = "") -> int:
        return sum(self.params[name].size for name in self.names(prefix))

    def zero_grads(self) -> None:
        for tensor in self.params.values():
            tensor.grad = None if not tensor.requires_grad else np.zeros_like(tensor.data)

    def freeze(self, prefix: str = "", exclude: Optional[str] = None) -> None:
        """Stop gradient flow into parameters matching ``prefix`` (minus those matching ``exclude``)."""
        for name in self.names(prefix, exclude):
            self.params[name].requires_grad = False
            self.params[name].grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: tensor.data.copy() for name, tensor in self.params.items()}

    def load_state_dict(self, arrays: Mapping[str, np.ndarray], strict: bool = True) -> None:
        """Copy values into registered parameters.

        Raises:
            Desk3DCheckpointError: On missing or unexpected names, or shape mismatch
        """
        missing = [name for name in self.params if name not in arrays]
        unexpected = [name for name in arrays if name not in self.params]
        if strict and (missing or unexpected):
            raise Desk3DCheckpointError(f"Checkpoint mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, value in arrays.items():
            if name not in self.params:
                continue
            target = self.params[name]
            if target.shape != tuple(value.shape):
                raise Desk3DCheckpointError(
                    f"Shape mismatch for '{name}': checkpoint {tuple(value.shape)} vs model {target.shape}"
                )
            target.data[...] = value

    def checksum(self, prefix: str = "", exclude: Optional[str] = None) -> str:
        """SHA-256 over sorted names and little-endian float32 bytes of matching parameters."""
        digest = hashlib.sha256()
        for name in sorted(self.names(prefix, exclude)):
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(self.params[name].data, dtype="<f4").tobytes())
        return digest.hexdigest()

    @contextlib.contextmanager
    def use_ema(self) -> Iterator[None]:
        """Temporarily swap EMA values into the parameters (no-op without a shadow)."""
        if self.ema_shadow is None:
            yield
            return
        saved = self.state_dict()
        self.load_state_dict(self.ema_shadow, strict=False)
        try:
            yield
        finally:
            self.load_state_dict(saved, strict=False)


def optimizer_step(
    store: ParamStore,
    lr: float = 1e-3,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """Apply one bias-corrected adaptive-moment update to every trainable parameter.

    Gradients are left untouched; call ``store.zero_grads()`` before the next step.

    Raises:
        Desk3DGradientError: If a trainable parameter has no gradient
    """
    trainable = [(name, p) for name, p in store.params.items() if p.requires_grad]
    for name, param in trainable:
        if param.grad is None:
            raise Desk3DGradientError(f"Parameter '{name}' has no gradient; run backward() before optimizer_step()")
    beta1, beta2 = betas
    store.step_count += 1
    t = store.step_count
    correction1 = 1.0 - beta1**t
    correction2 = 1.0 - beta2**t
    for name, param in trainable:
        grad = param.grad
        assert grad is not None
        m, v = store._moments.get(name, (np.zeros_like(param.data), np.zeros_like(param.data)))
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        store._moments[name] = (m, v)
        update = (m / correction1) / (np.sqrt(v / correction2) + eps)
        param.data -= (lr * update).astype(param.data.dtype)


def ema_update(store: ParamStore, decay: float) -> None:
    """Update the EMA shadow; the first call initializes it as a copy of the parameters.

    Raises:
        Desk3DValidationError: If decay is outside [0, 1)
    """
    if not 0.0 <= decay < 1.0:
        raise Desk3DValidationError(f"EMA decay must lie in [0, 1), got {decay}")
    if store.ema_shadow is None:
        store.ema_shadow = store.state_dict()
        return
    for name, tensor in store.params.items():
        shadow = store.ema_shadow.get(name)
        if shadow is None or shadow.shape != tensor.data.shape:
            store.ema_shadow[name] = tensor.data.copy()
            continue
        shadow *= decay
        shadow += (1.0 - decay) * tensor.data


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------


def uniform_init(rng: np.random.Generator, fan_in: int, shape: Tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Linear:
    """Affine map ``x @ W + b`` over the last axis."""

    def __init__(
        self,
        store: ParamStore,
        name: str,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        zero_init: bool = False,
        bias: bool = True,
    ) -> None:
        shape = (in_features, out_features)
        weight = np.zeros(shape, dtype=np.float32) if zero_init else uniform_init(rng, in_features, shape)
        self.weight = store.add(f"{name}.weight", weight)
        self.bias: Optional[G.Tensor] = None
        if bias:
            if zero_init:
                initial = np.zeros(out_features, np.float32)
            else:
                initial = uniform_init(rng, in_features, (out_features,))
            self.bias = store.add(f"{name}.bias", initial)
        self.in_features = in_features
        self.out_features = out_features

    def __call__(self, x: G.Operand) -> G.Tensor:
        x = G.as_tensor(x)
        squeeze = x.ndim == 1
        if squeeze:
            x = x.reshape(1, -1)
        y = G.matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y.reshape(self.out_features) if squeeze else y


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, dim: int, eps: float = 1e-5) -> None:
        self.gain = store.add(f"{name}.gain", np.ones(dim, np.float32))
        self.bias = store.add(f"{name}.bias", np.zeros(dim, np.float32))
        self.eps = eps

    def __call__(self, x: G.Operand) -> G.Tensor:
        return G.layer_norm(x, self.gain, self.bias, self.eps)


class MLP:
    """Stack of Linear layers with SiLU between them (none after the last)."""

    def __init__(
        self,
        store: ParamStore,
        name: str,
        dims: Sequence[int],
        rng: np.random.Generator,
        zero_last: bool = False,
    ) -> None:
        if len(dims) < 2:
            raise Desk3DValidationError(f"MLP needs at least input and output dims, got {list(dims)}")
        count = len(dims) - 1
        self.layers = [
            Linear(store, f"{name}.{i}", dims[i], dims[i + 1], rng, zero_init=zero_last and i == count - 1)
            for i in range(count)
        ]

    def __call__(self, x: G.Operand) -> G.Tensor:
        h = G.as_tensor(x)
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = G.silu(h)
        return h


class MultiHeadAttention:
    """Multi-head attention over token sequences shaped ``[..., n, dim]``.

    Without ``context`` this is self-attention; with it, queries come from ``x``
    and keys/values from ``context``.
    """

    def __init__(
        self,
        store: ParamStore,
        name: str,
        dim: int,
        heads: int,
        rng: np.random.Generator,
        context_dim: Optional[int] = None,
        zero_out: bool = False,
    ) -> None:
        if dim % heads != 0:
            raise Desk3DValidationError(f"dim {dim} is not divisible by heads {heads}")
        ctx = context_dim or dim
        self.heads = heads
        self.dim = dim
        self.q = Linear(store, f"{name}.q", dim, dim, rng)
        self.k = Linear(store, f"{name}.k", ctx, dim, rng)
        self.v = Linear(store, f"{name}.v", ctx, dim, rng)
        self.out = Linear(store, f"{name}.out", dim, dim, rng, zero_init=zero_out)

    def _split(self, x: G.Tensor) -> G.Tensor:
        lead, n = x.shape[:-2], x.shape[-2]
        head_dim = self.dim // self.heads
        x = x.reshape(lead + (n, self.heads, head_dim))
        k = len(lead)
        return G.transpose(x, tuple(range(k)) + (k + 1, k, k + 2))

    def _merge(self, x: G.Tensor) -> G.Tensor:
        lead = x.shape[:-3]
        k = len(lead)
        n = x.shape[-2]
        x = G.transpose(x, tuple(range(k)) + (k + 1, k, k + 2))
        return x.reshape(lead + (n, self.dim))

    def __call__(self, x: G.Operand, context: Optional[G.Operand] = None) -> G.Tensor:
        x = G.as_tensor(x)
        source = x if context is None else G.as_tensor(context)
        q = self._split(self.q(x))
        k = self._split(self.k(source))
        v = self._split(self.v(source))
        return self.out(self._merge(G.attention(q, k, v)))


class TransformerBlock:
    """Pre-norm block: self-attention, optional cross-attention, MLP; all residual.

    ``cond`` (broadcastable to the token shape) is added to the tokens before
    the first normalization.
    """

    def __init__(
        self,
        store: ParamStore,
        name: str,
        dim: int,
        heads: int,
        rng: np.random.Generator,
        cross_attention: bool = False,
        mlp_ratio: int = 2,
    ) -> None:
        self.norm1 = LayerNorm(store, f"{name}.norm1", dim)
        self.attn = MultiHeadAttention(store, f"{name}.attn", dim, heads, rng)
        self.cross: Optional[MultiHeadAttention] = None
        self.norm_cross: Optional[LayerNorm] = None
        if cross_attention:
            self.norm_cross = LayerNorm(store, f"{name}.norm_cross", dim)
            self.cross = MultiHeadAttention(store, f"{name}.cross", dim, heads, rng)
        self.norm2 = LayerNorm(store, f"{name}.norm2", dim)
        self.mlp = MLP(store, f"{name}.mlp", [dim, dim * mlp_ratio, dim], rng)

    def __call__(
        self, x: G.Operand, cond: Optional[G.Operand] = None, context: Optional[G.Operand] = None
    ) -> G.Tensor:
        h = G.as_tensor(x)
        if cond is not None:
            h = h + cond
        h = h + self.attn(self.norm1(h))
        if self.cross is not None and self.norm_cross is not None:
            if context is None:
                raise Desk3DValidationError("Cross-attention block called without context tokens")
            h = h + self.cross(self.norm_cross(h), context)
        return h + self.mlp(self.norm2(h))


def sinusoidal_embedding(values: np.ndarray, dim: int, max_period: float = 1000.0) -> np.ndarray:
    """Standard sin/cos embedding of scalar values, shape ``[len(values), dim]``."""
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / max(half, 1))
    args = np.asarray(values, dtype=np.float64).reshape(-1, 1) * freqs.reshape(1, -1)
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb.astype(np.float32)


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------


def save_checkpoint(
    path: Union[str, Path], arrays: Mapping[str, np.ndarray], meta: Optional[Mapping[str, str]] = None
) -> None:
    """Write named float32 arrays to a flat binary container.

    Layout: a UTF-8 text header (magic line, ``byteorder little``, one
    ``meta`` line holding a JSON object, one ``array <name> <shape> <offset>
    <nbytes>`` line per array in sorted name order, then ``end``) followed by
    the concatenated little-endian float32 payloads. Offsets are relative to
    the first payload byte; shapes are comma-separated (empty for scalars).

    Raises:
        Desk3DCheckpointError: If the file cannot be written
    """
    lines = [CHECKPOINT_MAGIC, "byteorder little", "meta " + json.dumps(dict(meta or {}), sort_keys=True)]
    payload: List[bytes] = []
    offset = 0
    for name in sorted(arrays):
        if any(ch.isspace() for ch in name):
            raise Desk3DCheckpointError(f"Array name contains whitespace: {name!r}")
        blob = np.ascontiguousarray(arrays[name], dtype="<f4").tobytes()
        shape = ",".join(str(int(s)) for s in np.shape(arrays[name]))
        lines.append(f"array {name} {shape or '-'} {offset} {len(blob)}")
        payload.append(blob)
        offset += len(blob)
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as handle:
            handle.write(header)
            for blob in payload:
                handle.write(blob)
    except OSError as err:
        raise Desk3DCheckpointError(f"Cannot write checkpoint {path}: {err}") from err
    logger.debug("Saved checkpoint %s (%d arrays, %d bytes)", path, len(payload), offset)


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Dict[str, str]]:
    """Read a container written by :func:`save_checkpoint`.

    Returns:
        ``(arrays, meta)``

    Raises:
        Desk3DCheckpointError: If the file is missing, truncated or malformed
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as err:
        raise Desk3DCheckpointError(f"Cannot read checkpoint {path}: {err}") from err
    marker = raw.find(b"\nend\n")
    if not raw.startswith(CHECKPOINT_MAGIC.encode("utf-8")) or marker < 0:
        raise Desk3DCheckpointError(f"Not a desk3d checkpoint: {path}")
    data_start = marker + len(b"\nend\n")
    arrays: Dict[str, np.ndarray] = {}
    meta: Dict[str, str] = {}
    try:
        for line in raw[:marker].decode("utf-8").split("\n")[1:]:
            fields = line.split(" ")
            if fields[0] == "byteorder" and fields[1] != "little":
                raise Desk3DCheckpointError(f"Unsupported byte order in {path}: {fields[1]}")
            if fields[0] == "meta":
                meta = {str(k): str(v) for k, v in json.loads(line[len("meta ") :]).items()}
            elif fields[0] == "array":
                name, shape_text, offset, nbytes = fields[1], fields[2], int(fields[3]), int(fields[4])
                shape = () if shape_text == "-" else tuple(int(s) for s in shape_text.split(","))
                chunk = raw[data_start + offset : data_start + offset + nbytes]
                if len(chunk) != nbytes:
                    raise Desk3DCheckpointError(f"Checkpoint {path} is truncated at array '{name}'")
                arrays[name] = np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(shape)
    except (ValueError, IndexError, UnicodeDecodeError) as err:
        raise Desk3DCheckpointError(f"Malformed checkpoint header in {path}: {err}") from err
    return arrays, meta


EMA_PREFIX = "ema:"


def save_store(path: Union[str, Path], store: ParamStore, meta: Optional[Mapping[str, str]] = None) -> None:
    """Checkpoint a parameter store; EMA values are stored under ``ema:``-prefixed names."""
    arrays = store.state_dict()
    if store.ema_shadow is not None:
        arrays.update({EMA_PREFIX + name: value for name, value in store.ema_shadow.items()})
    full_meta = dict(meta or {})
    full_meta["step_count"] = str(store.step_count)
    save_checkpoint(path, arrays, full_meta)


def load_store(path: Union[str, Path], store: ParamStore) -> Dict[str, str]:
    """Restore parameters (and the EMA shadow, when present) saved by :func:`save_store`.

    Returns:
        The checkpoint metadata
    """
    arrays, meta = load_checkpoint(path)
    raw = {k: v for k, v in arrays.items() if not k.startswith(EMA_PREFIX)}
    shadow = {k[len(EMA_PREFIX) :]: v.copy() for k, v in arrays.items() if k.startswith(EMA_PREFIX)}
    store.load_state_dict(raw, strict=True)
    store.ema_shadow = shadow or None
    store.step_count = int(meta.get("step_count", "0"))
    return meta
