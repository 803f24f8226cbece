"""Forward pass of the attention-gated encoder-decoder detector.

Layout (channels-first, spatial ``n_r x n_a_pad``)::

    stem? -> enc1 = input
             enc2..4 = conv+GN+SiLU(maxpool(prev))
    dec4 = enc4
    dec3..1 = conv+GN+SiLU(skip ++ upconv(prev)),  skip = CBAM(enc) or enc
    neck = Res3(Res2(Res1(dec1)))  with Res_k(M) = SiLU(M + conv(conv_dil_k(M)))
    heads = classification (sigmoid confidences), regression (8 params)

Weights live in a flat ``{path: array}`` dict so checkpoints stay trivial.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import ops
from ._atomic import atomic_write_bytes

N_PARAMS = 8
PARAM_NAMES = ("dx", "dy", "dz", "log_l", "log_w", "log_h", "sin_yaw", "cos_yaw")
CLS_PRIOR_BIAS = -2.19

CKPT_MAGIC = b"RADENETW"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    n_de: int = 101
    n_r: int = 256
    n_a_pad: int = 112
    n_d: int = 64
    n_cls: int = 5
    feature_dim: int = 128
    use_cbam: bool = True
    use_dilated_neck: bool = True
    use_expanded_heads: bool = True
    use_input_stem: bool = False
    use_feature_expansion: bool = False
    groupnorm_groups: int = 32
    cbam_reduction: int = 16
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_r % 8 or self.n_a_pad % 8:
            raise ValueError("n_r and n_a_pad must be divisible by 8")
        if min(self.n_de, self.n_r, self.n_a_pad, self.n_cls) < 1:
            raise ValueError("dimensions must be positive")
        if not 0 < self.n_d < self.n_de:
            raise ValueError("n_d must split n_de into two non-empty blocks")
        if self.feature_dim not in (128, 256):
            raise ValueError("feature_dim must be 128 or 256")
        # the expansion toggle and the 256-channel width are the same switch
        if self.use_feature_expansion:
            object.__setattr__(self, "feature_dim", 256)
        elif self.feature_dim == 256:
            object.__setattr__(self, "use_feature_expansion", True)
        if self.groupnorm_groups < 1 or self.cbam_reduction < 1:
            raise ValueError("groupnorm_groups and cbam_reduction must be positive")
        if self.use_cbam and self.n_de < self.cbam_reduction:
            raise ValueError(
                f"CBAM needs at least {self.cbam_reduction} channels at the first skip, got {self.n_de}"
            )

    def stage_channels(self, s: int) -> int:
        return self.n_de * 2 ** (s - 1)

    def stage_shape(self, s: int) -> tuple[int, int, int]:
        f = 2 ** (s - 1)
        return (self.stage_channels(s), self.n_r // f, self.n_a_pad // f)

    def canonical_text(self) -> str:
        """Architecture-defining fields; the init seed is deliberately excluded."""
        items = [(f.name, getattr(self, f.name)) for f in fields(self) if f.name != "seed"]
        return ";".join(f"{k}={int(v) if isinstance(v, bool) else v}" for k, v in items)

    def fingerprint(self) -> int:
        digest = hashlib.sha256(self.canonical_text().encode()).digest()
        return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True, eq=False)
class HeadOutputs:
    conf: np.ndarray  # (n_cls, n_r, n_a_pad), in [0, 1]
    params: np.ndarray  # (8, n_r, n_a_pad)

    def __post_init__(self) -> None:
        if self.conf.ndim != 3 or self.params.ndim != 3 or self.params.shape[0] != N_PARAMS:
            raise ValueError("conf must be (n_cls, H, W) and params (8, H, W)")
        if self.conf.shape[1:] != self.params.shape[1:]:
            raise ValueError("conf and params spatial shapes differ")


@dataclass(frozen=True)
class Checkpoint:
    fingerprint: int
    blobs: dict


def _layer_specs(cfg: NetworkConfig) -> list[tuple[str, tuple[int, ...], str, int]]:
    """(path, shape, init kind, fan_in) for every weight in canonical order."""
    specs: list[tuple[str, tuple[int, ...], str, int]] = []

    def conv(name, cout, cin, k, bias_init="zero"):
        specs.append((f"{name}.weight", (cout, cin, k, k), "he", cin * k * k))
        specs.append((f"{name}.bias", (cout,), bias_init, 0))

    def gn(name, c):
        specs.append((f"{name}.weight", (c,), "one", 0))
        specs.append((f"{name}.bias", (c,), "zero", 0))

    if cfg.use_input_stem:
        n_e = cfg.n_de - cfg.n_d
        conv("stem.rad", cfg.n_d, cfg.n_d, 3)
        conv("stem.rae", n_e, n_e, 3)
    for s in (2, 3, 4):
        conv(f"enc{s}.conv", cfg.stage_channels(s), cfg.stage_channels(s - 1), 3)
        gn(f"enc{s}.gn", cfg.stage_channels(s))
    if cfg.use_cbam:
        for s in (1, 2, 3):
            c = cfg.stage_channels(s)
            d = c // cfg.cbam_reduction
            specs.append((f"cbam{s}.fc1.weight", (d, c), "he", c))
            specs.append((f"cbam{s}.fc1.bias", (d,), "zero", 0))
            specs.append((f"cbam{s}.fc2.weight", (c, d), "he", d))
            specs.append((f"cbam{s}.fc2.bias", (c,), "zero", 0))
            conv(f"cbam{s}.spatial", 1, 2, 7)
    for s in (3, 2, 1):
        cin, cskip = cfg.stage_channels(s + 1), cfg.stage_channels(s)
        cout = cfg.feature_dim if s == 1 else cskip
        specs.append((f"dec{s}.up.weight", (cin, cskip, 2, 2), "he", cin))
        specs.append((f"dec{s}.up.bias", (cskip,), "zero", 0))
        conv(f"dec{s}.conv", cout, 2 * cskip, 3)
        gn(f"dec{s}.gn", cout)
    f = cfg.feature_dim
    if cfg.use_dilated_neck:
        for k in (1, 2, 3):
            conv(f"neck{k}.dil", f, f, 3)
            conv(f"neck{k}.conv", f, f, 3)
    if cfg.use_expanded_heads:
        conv("cls.0", f, f, 3)
        conv("cls.1", f, f, 3)
        conv("cls.2", cfg.n_cls, f, 3, bias_init="prior")
        conv("reg.0", f, f, 3)
        conv("reg.1", f, f, 3)
        conv("reg.2", N_PARAMS, f, 3)
    else:
        conv("cls.0", cfg.n_cls, f, 1, bias_init="prior")
        conv("reg.0", N_PARAMS, f, 1)
    return specs


def init_weights(cfg: NetworkConfig) -> dict[str, np.ndarray]:
    """Seeded He-uniform weights, zero biases, prior bias on the class logits."""
    rng = np.random.default_rng(cfg.seed)
    out: dict[str, np.ndarray] = {}
    for path, shape, kind, fan_in in _layer_specs(cfg):
        if kind == "he":
            bound = np.sqrt(6.0 / fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        elif kind == "one":
            arr = np.ones(shape)
        elif kind == "prior":
            arr = np.full(shape, CLS_PRIOR_BIAS)
        else:
            arr = np.zeros(shape)
        out[path] = arr.astype(np.float32)
    return out


def normalize_input(x: np.ndarray) -> np.ndarray:
    peak = float(np.max(x)) if x.size else 0.0
    x = x.astype(np.float32, copy=True)
    if peak > 0:
        x /= np.float32(peak)
    return x


class DetectorNet:
    """Inference-only network over a fixed weight dict."""

    def __init__(self, cfg: NetworkConfig, weights: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        if weights is None:
            weights = init_weights(cfg)
        self._check_weights(weights)
        self.weights = {k: np.asarray(v, dtype=np.float32) for k, v in weights.items()}
        for v in self.weights.values():
            v.flags.writeable = False

    def _check_weights(self, weights: dict) -> None:
        specs = {p: shape for p, shape, _, _ in _layer_specs(self.cfg)}
        missing = sorted(set(specs) - set(weights))
        extra = sorted(set(weights) - set(specs))
        if missing or extra:
            raise CheckpointError(f"weight set mismatch: missing={missing} extra={extra}")
        for p, shape in specs.items():
            if tuple(weights[p].shape) != shape:
                raise CheckpointError(f"{p}: shape {weights[p].shape} != expected {shape}")

    # -- helpers ------------------------------------------------------------

    def _conv(self, name, x, dilation=1):
        return ops.conv2d(x, self.weights[f"{name}.weight"], self.weights[f"{name}.bias"], dilation)

    def _gn(self, name, x):
        c = x.shape[0]
        groups = ops.group_count(c, self.cfg.groupnorm_groups)
        return ops.group_norm(x, groups, self.weights[f"{name}.weight"], self.weights[f"{name}.bias"])

    def param_count(self, prefix: str | tuple[str, ...] = "") -> int:
        return sum(v.size for k, v in self.weights.items() if k.startswith(prefix))

    # -- stages -------------------------------------------------------------

    def stem_forward(self, x: np.ndarray) -> np.ndarray:
        if not self.cfg.use_input_stem:
            return x
        nd = self.cfg.n_d
        rad = ops.silu(self._conv("stem.rad", x[:nd]))
        rae = ops.silu(self._conv("stem.rae", x[nd:]))
        return np.concatenate([rad, rae], axis=0)

    def encoder_forward(self, x: np.ndarray) -> list[np.ndarray]:
        cfg = self.cfg
        if x.shape != cfg.stage_shape(1):
            raise ValueError(f"input shape {x.shape} != expected {cfg.stage_shape(1)}")
        maps = [np.asarray(x, dtype=np.float32)]
        for s in (2, 3, 4):
            y = self._conv(f"enc{s}.conv", ops.maxpool2(maps[-1]))
            maps.append(ops.silu(self._gn(f"enc{s}.gn", y)))
        return maps

    def cbam(self, m: np.ndarray, s: int, return_maps: bool = False):
        """Channel then spatial attention for the skip at stage ``s``."""
        w = self.weights
        c = m.shape[0]
        if c // self.cfg.cbam_reduction < 1:
            raise ValueError(f"{c} channels is below the CBAM reduction bound")
        w1, b1 = w[f"cbam{s}.fc1.weight"], w[f"cbam{s}.fc1.bias"]
        w2, b2 = w[f"cbam{s}.fc2.weight"], w[f"cbam{s}.fc2.bias"]

        def mlp(v):
            return w2 @ ops.relu(w1 @ v + b1) + b2

        flat = m.reshape(c, -1)
        a_c = ops.gate(mlp(flat.mean(axis=1)) + mlp(flat.max(axis=1)))
        m1 = m * a_c[:, None, None]
        pooled = np.stack([m1.mean(axis=0), m1.max(axis=0)])
        a_s = ops.gate(self._conv(f"cbam{s}.spatial", pooled))
        out = m1 * a_s
        if return_maps:
            return out, m1, a_c, a_s[0]
        return out

    def decoder_forward(self, enc: list[np.ndarray]) -> np.ndarray:
        cfg = self.cfg
        for s, m in enumerate(enc, start=1):
            if m.shape != cfg.stage_shape(s):
                raise ValueError(f"encoder map {s} has shape {m.shape}, expected {cfg.stage_shape(s)}")
        dec = enc[3]
        for s in (3, 2, 1):
            skip = self.cbam(enc[s - 1], s) if cfg.use_cbam else enc[s - 1]
            up = ops.conv_transpose2x2(dec, self.weights[f"dec{s}.up.weight"], self.weights[f"dec{s}.up.bias"])
            if up.shape != skip.shape:
                raise ValueError(f"upsampled {up.shape} does not match skip {skip.shape}")
            y = self._conv(f"dec{s}.conv", np.concatenate([skip, up], axis=0))
            dec = ops.silu(self._gn(f"dec{s}.gn", y))
        return dec

    def neck_forward(self, m: np.ndarray) -> np.ndarray:
        if not self.cfg.use_dilated_neck:
            return m
        for k in (1, 2, 3):
            inner = self._conv(f"neck{k}.dil", m, dilation=k)
            m = ops.silu(m + self._conv(f"neck{k}.conv", inner))
        return m

    def heads_forward(self, m: np.ndarray) -> HeadOutputs:
        if self.cfg.use_expanded_heads:
            c = m
            for i in range(3):
                c = ops.sigmoid(self._conv(f"cls.{i}", c))
            r = ops.silu(self._conv("reg.0", m))
            r = ops.silu(self._conv("reg.1", r))
            r = self._conv("reg.2", r)
        else:
            c = ops.sigmoid(self._conv("cls.0", m))
            r = self._conv("reg.0", m)
        return HeadOutputs(conf=c, params=r)

    def backbone_forward(self, x: np.ndarray) -> np.ndarray:
        return self.decoder_forward(self.encoder_forward(self.stem_forward(x)))

    def forward(self, x: np.ndarray, normalize: bool = True) -> HeadOutputs:
        """Projection ``(n_de, n_r, n_a_pad)`` -> head outputs."""
        if normalize:
            x = normalize_input(x)
        return self.heads_forward(self.neck_forward(self.backbone_forward(x)))

    __call__ = forward

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(self.cfg.fingerprint(), dict(self.weights))

    @classmethod
    def from_checkpoint(cls, cfg: NetworkConfig, ckpt: Checkpoint) -> "DetectorNet":
        if ckpt.fingerprint != cfg.fingerprint():
            raise CheckpointError(
                f"checkpoint fingerprint {ckpt.fingerprint:016x} does not match config {cfg.fingerprint():016x}"
            )
        return cls(cfg, ckpt.blobs)


def receptive_growth(cfg: NetworkConfig) -> int:
    """Pixels per axis added to the receptive field by the neck."""
    if not cfg.use_dilated_neck:
        return 0
    return sum(k * 2 + 2 for k in (1, 2, 3))


# --- checkpoint file --------------------------------------------------------


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    names = sorted(ckpt.blobs)
    table = []
    payload = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(ckpt.blobs[name], dtype="<f4")
        raw = name.encode("utf-8")
        table.append(struct.pack("<H", len(raw)) + raw)
        table.append(struct.pack("<H", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        table.append(struct.pack("<Q", offset))
        payload.append(arr.tobytes())
        offset += arr.nbytes
    head = CKPT_MAGIC + struct.pack("<HQI", CKPT_VERSION, ckpt.fingerprint, len(names))
    return head + b"".join(table) + b"".join(payload)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError("checkpoint truncated")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(8) != CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version, fp, count = struct.unpack("<HQI", take(14))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    entries = []
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<H", take(2))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        (offset,) = struct.unpack("<Q", take(8))
        entries.append((name, dims, offset))
    base = pos
    blobs = {}
    for name, dims, offset in entries:
        if name in blobs:
            raise CheckpointError(f"duplicate blob {name}")
        nbytes = 4 * int(np.prod(dims))
        start = base + offset
        if start + nbytes > len(buf):
            raise CheckpointError(f"blob {name} runs past end of file")
        arr = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=start).reshape(dims)
        blobs[name] = arr.astype(np.float32)
    return Checkpoint(fp, blobs)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    atomic_write_bytes(Path(path), encode_checkpoint(ckpt))


def load_checkpoint(path: str | Path, cfg: NetworkConfig | None = None) -> Checkpoint:
    ckpt = decode_checkpoint(Path(path).read_bytes())
    if cfg is not None and ckpt.fingerprint != cfg.fingerprint():
        raise CheckpointError("checkpoint fingerprint does not match the configured network")
    return ckpt


def config_dict(cfg: NetworkConfig) -> dict:
    return asdict(cfg)
