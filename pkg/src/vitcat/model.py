"""Dual-path vision transformer with cross-attention fusion.

One L x N_c request history is patched two ways.  The time-series (TS) path
turns every content column into a token; the multi-content (MC) path turns
every block of ``t_s`` consecutive rows into a token.  Each path is an
independent pre-norm transformer encoder with a class token.  A fusion block
combines the two token sequences and a layer-normed linear head with sigmoid
output scores every content.

Parameters are plain float64 arrays keyed by dotted names; functions below take
either arrays (constants) or :class:`~vitcat.tensor.Tensor` leaves bound on a
tape.
"""
from __future__ import annotations

import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from vitcat import tensor as T
from vitcat.pipeline import topk_indices
from vitcat.seeding import rng_stream
from vitcat.tensor import GradTape, Tensor

FUSIONS = ("cross_attention", "fully_connected", "self_attention")
ACTIVATIONS = ("gelu", "relu")

CKPT_MAGIC = b"VCKP"
CKPT_VERSION = 1

# (layers, d, mlp layers, mlp size, heads) for the six reference variants
REFERENCE_VARIANTS = {
    1: (1, 25, 1, 128, 5),
    2: (1, 50, 1, 128, 5),
    3: (1, 50, 1, 128, 4),
    4: (1, 50, 1, 64, 5),
    5: (1, 50, 2, 64, 5),
    6: (2, 50, 1, 128, 5),
}


@dataclass(frozen=True)
class ViTConfig:
    l_history: int = 8
    n_contents: int = 4
    t_s: int = 2
    d_model: int = 6
    n_heads: int = 2
    n_layers: int = 1
    mlp_size: int = 8
    mlp_layers: int = 1
    k_top: int = 1
    fusion: str = "cross_attention"
    activation: str = "gelu"

    def __post_init__(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type == "int" and (not isinstance(v, (int, np.integer)) or v < 1):
                raise ValueError(f"{f.name} must be a positive integer, got {v!r}")
        if self.n_heads > self.d_model:
            raise ValueError("n_heads cannot exceed d_model")
        if self.l_history % self.t_s:
            raise ValueError(f"l_history={self.l_history} is not divisible by t_s={self.t_s}")
        if self.t_s > self.l_history // 2:
            raise ValueError("t_s must be at most l_history / 2")
        if self.k_top > self.n_contents:
            raise ValueError("k_top cannot exceed n_contents")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @classmethod
    def variant(cls, model_id: int, **overrides) -> ViTConfig:
        """One of the six reference variants (layers, d, MLP depth/size, heads)."""
        layers, d, mlp_layers, mlp_size, heads = REFERENCE_VARIANTS[model_id]
        return cls(
            **{
                "n_layers": layers,
                "d_model": d,
                "mlp_layers": mlp_layers,
                "mlp_size": mlp_size,
                "n_heads": heads,
                **overrides,
            }
        )

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> ViTConfig:
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition("=")
            if key not in kinds:
                raise ValueError(f"unknown config key {key!r}")
            kw[key] = int(value) if kinds[key] == "int" else value
        return cls(**kw)


@dataclass(frozen=True)
class PatchSpec:
    mode: str
    patch_rows: int
    patch_cols: int
    n_patches: int

    @property
    def patch_size(self) -> int:
        return self.patch_rows * self.patch_cols


def patch_specs(config: ViTConfig) -> dict[str, PatchSpec]:
    L, n_c, ts = config.l_history, config.n_contents, config.t_s
    return {
        "ts": PatchSpec("time_based", L, 1, n_c),
        "mc": PatchSpec("content_time", ts, n_c, L // ts),
    }


# -- patching --------------------------------------------------------------

def patch_time_based(x: np.ndarray) -> np.ndarray:
    """One patch per content: row j is column j of ``x`` (length L)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("input must be an L x N_c matrix")
    return np.ascontiguousarray(x.T)


def patch_content_time(x: np.ndarray, t_s: int) -> np.ndarray:
    """One patch per ``t_s`` rows, flattened row-major to length ``t_s * N_c``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("input must be an L x N_c matrix")
    L, n_c = x.shape
    if t_s < 1 or L % t_s:
        raise ValueError(f"history length {L} is not divisible by t_s={t_s}")
    if t_s > L // 2:
        raise ValueError("t_s must be at most L / 2")
    return x.reshape(L // t_s, t_s * n_c).copy()


def unpatch_time_based(patches: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(patches).T)


def unpatch_content_time(patches: np.ndarray, t_s: int) -> np.ndarray:
    patches = np.asarray(patches)
    return patches.reshape(patches.shape[0] * t_s, patches.shape[1] // t_s)


# -- building blocks -------------------------------------------------------

def embed(patches, proj, pos, cls) -> Tensor:
    """Prepend the class token to the projected patches and add positions."""
    tokens = T.matmul(T._as_tensor(patches), proj)
    return T.add(T.concat_rows([cls, tokens]), pos)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """``softmax(q k^T / sqrt(d_h)) v``; also returns the attention weights."""
    if q.shape[1] != k.shape[1]:
        raise ValueError("query and key widths differ")
    if k.shape[0] != v.shape[0]:
        raise ValueError("key and value token counts differ")
    logits = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(q.shape[1]))
    weights = T.softmax_rows(logits)
    return T.matmul(weights, v), weights


def self_attention(z: Tensor, w_qkv: Tensor) -> Tensor:
    w_qkv = T._as_tensor(w_qkv)
    if w_qkv.shape[0] != z.shape[1] or w_qkv.shape[1] % 3:
        raise ValueError(f"qkv weights {w_qkv.shape} do not fit tokens of width {z.shape[1]}")
    dh = w_qkv.shape[1] // 3
    qkv = T.matmul(z, w_qkv)
    q = T.slice_cols(qkv, 0, dh)
    k = T.slice_cols(qkv, dh, 2 * dh)
    v = T.slice_cols(qkv, 2 * dh, 3 * dh)
    return scaled_dot_attention(q, k, v)[0]


def multihead_attention(z: Tensor, head_weights, w_msa) -> Tensor:
    heads = [self_attention(z, w) for w in head_weights]
    cat = heads[0] if len(heads) == 1 else T.concat_cols(heads)
    return T.matmul(cat, w_msa)


def _activate(a: Tensor, activation: str) -> Tensor:
    return T.gelu(a) if activation == "gelu" else T.relu(a)


def mlp(z: Tensor, layer: Mapping[str, Tensor], activation: str = "gelu") -> Tensor:
    h = z
    i = 0
    while f"mlp{i}.w" in layer:
        h = _activate(T.add(T.matmul(h, layer[f"mlp{i}.w"]), layer[f"mlp{i}.b"]), activation)
        i += 1
    return T.add(T.matmul(h, layer["mlp_out.w"]), layer["mlp_out.b"])


def encoder_layer(z: Tensor, layer: Mapping[str, Tensor], activation: str = "gelu") -> Tensor:
    """Pre-norm block: ``z + MSA(LN(z))`` then ``z' + MLP(LN(z'))``.

    ``layer`` holds the weights of one block with the prefix stripped
    (``ln1.gamma``, ``head0.qkv``, ``msa_out``, ``mlp0.w`` ...).
    """
    heads = []
    while f"head{len(heads)}.qkv" in layer:
        heads.append(layer[f"head{len(heads)}.qkv"])
    a = T.layer_norm(z, layer["ln1.gamma"], layer["ln1.beta"])
    z1 = T.add(multihead_attention(a, heads, layer["msa_out"]), z)
    b = T.layer_norm(z1, layer["ln2.gamma"], layer["ln2.beta"])
    return T.add(mlp(b, layer, activation), z1)


def cross_attention_fuse(z_ts: Tensor, z_mc: Tensor, w_q, w_k, w_v, w_out=None) -> Tensor:
    """Attend from TS-path tokens (queries) to MC-path tokens (keys/values)."""
    if z_ts.shape[1] != z_mc.shape[1]:
        raise ValueError(f"path widths differ: {z_ts.shape[1]} vs {z_mc.shape[1]}")
    out, _ = scaled_dot_attention(
        T.matmul(z_ts, w_q), T.matmul(z_mc, w_k), T.matmul(z_mc, w_v)
    )
    return out if w_out is None else T.matmul(out, w_out)


def classify_head(z0: Tensor, gamma, beta, w, b) -> Tensor:
    return T.sigmoid(T.add(T.matmul(T.layer_norm(z0, gamma, beta), w), b))


# -- parameters ------------------------------------------------------------

def param_shapes(config: ViTConfig) -> OrderedDict[str, tuple[int, int]]:
    d, dh, h = config.d_model, config.d_head, config.n_heads
    shapes: OrderedDict[str, tuple[int, int]] = OrderedDict()
    for path, spec in patch_specs(config).items():
        shapes[f"{path}.patch_proj"] = (spec.patch_size, d)
        shapes[f"{path}.pos"] = (spec.n_patches + 1, d)
        shapes[f"{path}.cls"] = (1, d)
        for i in range(config.n_layers):
            p = f"{path}.layer{i}."
            shapes[p + "ln1.gamma"] = (1, d)
            shapes[p + "ln1.beta"] = (1, d)
            for j in range(h):
                shapes[p + f"head{j}.qkv"] = (d, 3 * dh)
            shapes[p + "msa_out"] = (h * dh, d)
            shapes[p + "ln2.gamma"] = (1, d)
            shapes[p + "ln2.beta"] = (1, d)
            width = d
            for m in range(config.mlp_layers):
                shapes[p + f"mlp{m}.w"] = (width, config.mlp_size)
                shapes[p + f"mlp{m}.b"] = (1, config.mlp_size)
                width = config.mlp_size
            shapes[p + "mlp_out.w"] = (width, d)
            shapes[p + "mlp_out.b"] = (1, d)
    if config.fusion == "cross_attention":
        for name in ("q", "k", "v"):
            shapes[f"fuse.{name}"] = (d, dh)
        shapes["fuse.out"] = (dh, d)
    elif config.fusion == "self_attention":
        shapes["fuse.qkv"] = (d, 3 * dh)
        shapes["fuse.out"] = (dh, d)
    else:
        shapes["fuse.w"] = (2 * d, d)
        shapes["fuse.b"] = (1, d)
    shapes["head.ln.gamma"] = (1, d)
    shapes["head.ln.beta"] = (1, d)
    shapes["head.w"] = (d, config.n_contents)
    shapes["head.b"] = (1, config.n_contents)
    return shapes


def count_params(config: ViTConfig) -> int:
    return sum(r * c for r, c in param_shapes(config).values())


def init_params(config: ViTConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Glorot-uniform projections, N(0, 0.02) class/position tokens, unit norms."""
    rng = rng_stream(seed, "init")
    params = {}
    for name, (r, c) in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            params[name] = np.ones((r, c))
        elif leaf in ("beta", "b"):
            params[name] = np.zeros((r, c))
        elif leaf in ("pos", "cls"):
            params[name] = rng.normal(0.0, 0.02, size=(r, c))
        else:
            bound = math.sqrt(6.0 / (r + c))
            params[name] = rng.uniform(-bound, bound, size=(r, c))
    return params


def bind_params(params: Mapping[str, np.ndarray], tape: GradTape | None = None) -> dict[str, Tensor]:
    """Wrap arrays as tape leaves (or constants when ``tape`` is None)."""
    if tape is None:
        return {n: Tensor(a, name=n) for n, a in params.items()}
    return {n: tape.watch(a, name=n) for n, a in params.items()}


def _sub(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def encode_path(patches, params: Mapping[str, Tensor], path: str, config: ViTConfig) -> Tensor:
    z = embed(patches, params[f"{path}.patch_proj"], params[f"{path}.pos"], params[f"{path}.cls"])
    for i in range(config.n_layers):
        z = encoder_layer(z, _sub(params, f"{path}.layer{i}."), config.activation)
    return z


def fuse(z_ts: Tensor, z_mc: Tensor, params: Mapping[str, Tensor], fusion: str) -> Tensor:
    """Fused 1 x d class representation for the chosen fusion block."""
    if fusion == "cross_attention":
        fused = cross_attention_fuse(
            z_ts, z_mc, params["fuse.q"], params["fuse.k"], params["fuse.v"], params["fuse.out"]
        )
        return T.slice_rows(fused, 0, 1)
    if fusion == "self_attention":
        tokens = T.concat_rows([z_ts, z_mc])
        return T.matmul(T.slice_rows(self_attention(tokens, params["fuse.qkv"]), 0, 1), params["fuse.out"])
    if fusion == "fully_connected":
        cls = T.concat_cols([T.slice_rows(z_ts, 0, 1), T.slice_rows(z_mc, 0, 1)])
        return T.add(T.matmul(cls, params["fuse.w"]), params["fuse.b"])
    raise ValueError(f"unknown fusion {fusion!r}")


def forward(x, params: Mapping, config: ViTConfig) -> Tensor:
    """Per-content popularity scores (1 x N_c, in (0, 1)) for one history.

    ``params`` maps names to arrays or to tensors from :func:`bind_params`.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (config.l_history, config.n_contents):
        raise ValueError(
            f"history shape {x.shape} does not match "
            f"({config.l_history}, {config.n_contents})"
        )
    p = {n: (v if isinstance(v, Tensor) else Tensor(v)) for n, v in params.items()}
    z_ts = encode_path(patch_time_based(x), p, "ts", config)
    z_mc = encode_path(patch_content_time(x, config.t_s), p, "mc", config)
    z0 = fuse(z_ts, z_mc, p, config.fusion)
    return classify_head(z0, p["head.ln.gamma"], p["head.ln.beta"], p["head.w"], p["head.b"])


# -- model wrapper and checkpoints ----------------------------------------

@dataclass
class ViTCAT:
    config: ViTConfig
    params: dict[str, np.ndarray]
    input_scale: float = 1.0

    @classmethod
    def initialize(cls, config: ViTConfig, seed: int = 0) -> ViTCAT:
        return cls(config, init_params(config, seed))

    def n_params(self) -> int:
        return sum(a.size for a in self.params.values())

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64) * self.input_scale
        return forward(x, self.params, self.config).data[0]

    def choose(self, history, k: int | None = None) -> np.ndarray:
        k = self.config.k_top if k is None else k
        return topk_indices(self.predict(history), k)

    def save(self, path: str | Path) -> None:
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path: str | Path, config: ViTConfig | None = None) -> ViTCAT:
        return load_checkpoint(path, config)


def save_checkpoint(model: ViTCAT, path: str | Path) -> None:
    cfg = model.config.to_text().encode("utf-8")
    tensors = list(model.params.items()) + [("input_scale", np.array([[model.input_scale]]))]
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(cfg)) + cfg)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path, config: ViTConfig | None = None) -> ViTCAT:
    """Read a checkpoint; if ``config`` is given it must equal the stored one."""
    blob = Path(path).read_bytes()
    if blob[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, clen = struct.unpack_from("<II", blob, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    stored = ViTConfig.from_text(blob[off : off + clen].decode("utf-8"))
    off += clen
    if config is not None and config != stored:
        raise ValueError(f"{path}: checkpoint config does not match the requested config")
    (n,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors = {}
    for _ in range(n):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        count = int(np.prod(dims))
        tensors[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(dims).copy()
        off += 8 * count
    scale = float(tensors.pop("input_scale", np.ones((1, 1)))[0, 0])
    expected = param_shapes(stored)
    if list(tensors) != list(expected) or any(
        tensors[k].shape != s for k, s in expected.items()
    ):
        raise ValueError(f"{path}: tensors do not match the stored config")
    return ViTCAT(stored, tensors, scale)


def with_fusion(config: ViTConfig, fusion: str) -> ViTConfig:
    return replace(config, fusion=fusion)
