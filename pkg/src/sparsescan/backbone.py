"""Four-stage recurrent backbone over sparsified event tokens.

Each timestep embeds a voxel grid into patch tokens, then runs four
stages. A stage applies a sparse multi-direction scan block, a token
mixer (a sparse MLP in the early stages, a global channel-interaction
block in the late ones), and a convolutional LSTM whose state persists
across timesteps; the stage output is the mixer output plus the LSTM
response. Between stages, features are merged 2x2 and projected, and the
keep mask and score map are max-pooled to the coarser grid.

Sparse blocks compute only at kept token positions and pass discarded
positions through bit-unchanged. All parameters live in plain float64
arrays; checkpoints serialize them as one flat little-endian blob plus a
JSON manifest mapping names to byte offsets and shapes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields, is_dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .event_io import VoxelGrid
from .flops import NULL_METER, FlopsMeter
from .nn import conv2d_same, depthwise_conv2d, gelu, layer_norm, patchify, sigmoid, silu
from .s6 import S6Params, init_s6_params, s6_forward
from .scan_order import IplConfig, invert, ipl_order
from .sparsify import TokenSet, gather_tokens, kept_ratio
from .stca import downsample_map, max_pool2d


@dataclass(frozen=True)
class BackboneConfig:
    height: int = 64
    width: int = 64
    patch: int = 4
    bins: int = 10
    channels: tuple[int, ...] = (32, 64, 128, 256)
    n_state: int = 16
    inner_expand: int = 4
    mlp_expand: int = 4
    ipl_k: tuple[int, ...] = (2, 2, 2, 2)
    gci_stages: tuple[int, ...] = (3, 4)   # 1-indexed

    @property
    def n_stages(self) -> int:
        return len(self.channels)

    def grid(self, stage: int) -> tuple[int, int]:
        """Token grid (rows, cols) of a 0-indexed stage."""
        f = self.patch * (1 << stage)
        return self.height // f, self.width // f

    def validate(self) -> None:
        if self.patch < 1 or self.bins < 1 or self.n_state < 1:
            raise ConfigError("patch, bins and n_state must be positive")
        if self.inner_expand < 1 or self.mlp_expand < 1:
            raise ConfigError("expansion factors must be positive")
        if len(self.ipl_k) != self.n_stages:
            raise ConfigError("need one IPL window size per stage")
        for s in range(self.n_stages):
            f = self.patch * (1 << s)
            if self.height % f or self.width % f:
                raise ConfigError(f"stage {s + 1} grid does not divide {self.height}x{self.width}")
            gh, gw = self.grid(s)
            if gh % self.ipl_k[s] or gw % self.ipl_k[s]:
                raise ConfigError(f"IPL window {self.ipl_k[s]} does not tile stage {s + 1} grid")
        for g in self.gci_stages:
            if not 1 <= g <= self.n_stages:
                raise ConfigError(f"GCI stage {g} out of range")


@dataclass
class LayerNormParams:
    gain: np.ndarray
    bias: np.ndarray


@dataclass
class Ss2dParams:
    norm: LayerNormParams
    w_in: np.ndarray       # (D, C)
    b_in: np.ndarray
    w_gate: np.ndarray     # (D, C)
    b_gate: np.ndarray
    dw_kernel: np.ndarray  # (D, 3, 3)
    dw_bias: np.ndarray
    s6_fwd: S6Params
    s6_bwd: S6Params
    s6_ipl: S6Params
    w_out: np.ndarray      # (C, D)
    b_out: np.ndarray
    ipl_k: int = 2


@dataclass
class MlpParams:
    norm: LayerNormParams
    w1: np.ndarray         # (E, C)
    b1: np.ndarray
    w2: np.ndarray         # (C, E)
    b2: np.ndarray


@dataclass
class GciParams:
    w_pre: np.ndarray      # (C, C)
    b_pre: np.ndarray
    dw_kernel: np.ndarray  # (C, 3, 3)
    dw_bias: np.ndarray
    s6_fwd: S6Params       # lanes = flattened spatial size, sequence = channels
    s6_bwd: S6Params
    w_mix: np.ndarray      # (C, C)
    b_mix: np.ndarray
    w_out: np.ndarray      # (C, C)
    b_out: np.ndarray


@dataclass
class ConvLstmParams:
    w_x: np.ndarray        # (4C, C, 3, 3), gate order i, f, g, o
    w_h: np.ndarray        # (4C, C, 3, 3)
    bias: np.ndarray       # (4C,)


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray


@dataclass
class StageParams:
    ss2d: Ss2dParams
    mixer: MlpParams | GciParams
    lstm: ConvLstmParams
    down_w: np.ndarray | None    # (C_next, 4C)
    down_b: np.ndarray | None


@dataclass
class BackboneParams:
    w_embed: np.ndarray    # (C1, 2B * P * P)
    b_embed: np.ndarray
    stages: list[StageParams]


def _linear_init(rng, out_dim, in_dim):
    return rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(out_dim, in_dim))


def init_backbone_params(cfg: BackboneConfig, seed: int = 0) -> BackboneParams:
    cfg.validate()
    rng = np.random.default_rng(seed)
    c1 = cfg.channels[0]
    in_dim = 2 * cfg.bins * cfg.patch * cfg.patch
    stages = []
    for s, c in enumerate(cfg.channels):
        d = cfg.inner_expand * c
        ss2d = Ss2dParams(
            norm=LayerNormParams(np.ones(c), np.zeros(c)),
            w_in=_linear_init(rng, d, c), b_in=np.zeros(d),
            w_gate=_linear_init(rng, d, c), b_gate=np.zeros(d),
            dw_kernel=rng.normal(0.0, 1.0 / 3.0, size=(d, 3, 3)), dw_bias=np.zeros(d),
            s6_fwd=init_s6_params(d, cfg.n_state, rng),
            s6_bwd=init_s6_params(d, cfg.n_state, rng),
            s6_ipl=init_s6_params(d, cfg.n_state, rng),
            w_out=_linear_init(rng, c, d), b_out=np.zeros(c),
            ipl_k=cfg.ipl_k[s],
        )
        if (s + 1) in cfg.gci_stages:
            gh, gw = cfg.grid(s)
            lanes = gh * gw
            mixer = GciParams(
                w_pre=_linear_init(rng, c, c), b_pre=np.zeros(c),
                dw_kernel=rng.normal(0.0, 1.0 / 3.0, size=(c, 3, 3)), dw_bias=np.zeros(c),
                s6_fwd=init_s6_params(lanes, cfg.n_state, rng),
                s6_bwd=init_s6_params(lanes, cfg.n_state, rng),
                w_mix=_linear_init(rng, c, c), b_mix=np.zeros(c),
                w_out=_linear_init(rng, c, c), b_out=np.zeros(c),
            )
        else:
            e = cfg.mlp_expand * c
            mixer = MlpParams(
                norm=LayerNormParams(np.ones(c), np.zeros(c)),
                w1=_linear_init(rng, e, c), b1=np.zeros(e),
                w2=_linear_init(rng, c, e), b2=np.zeros(c),
            )
        bias = np.zeros(4 * c)
        bias[c:2 * c] = 1.0   # forget gate starts open
        lstm = ConvLstmParams(
            w_x=rng.normal(0.0, 1.0 / np.sqrt(9 * c), size=(4 * c, c, 3, 3)),
            w_h=rng.normal(0.0, 1.0 / np.sqrt(9 * c), size=(4 * c, c, 3, 3)),
            bias=bias,
        )
        if s + 1 < cfg.n_stages:
            cn = cfg.channels[s + 1]
            down_w, down_b = _linear_init(rng, cn, 4 * c), np.zeros(cn)
        else:
            down_w = down_b = None
        stages.append(StageParams(ss2d=ss2d, mixer=mixer, lstm=lstm,
                                  down_w=down_w, down_b=down_b))
    return BackboneParams(w_embed=_linear_init(rng, c1, in_dim),
                          b_embed=np.zeros(c1), stages=stages)


def init_lstm_states(cfg: BackboneConfig, dtype=np.float64) -> list[LstmState]:
    out = []
    for s, c in enumerate(cfg.channels):
        gh, gw = cfg.grid(s)
        out.append(LstmState(h=np.zeros((c, gh, gw), dtype=dtype),
                             c=np.zeros((c, gh, gw), dtype=dtype)))
    return out


def patch_embed(values: np.ndarray, patch: int, w: np.ndarray, b: np.ndarray,
                meter: FlopsMeter = NULL_METER, label: str = "embed") -> np.ndarray:
    """Project non-overlapping P x P voxel patches to tokens, (C1, H/P, W/P)."""
    col = patchify(values, patch)
    if col.shape[1] != w.shape[1]:
        raise ShapeError(f"embedding expects {w.shape[1]} inputs per patch, got {col.shape[1]}")
    tok = col @ w.T + b
    meter.macs(label, col.shape[0] * col.shape[1] * w.shape[0])
    meter.elem(label, col.shape[0] * w.shape[0])
    _, h, wd = values.shape
    return tok.T.reshape(w.shape[0], h // patch, wd // patch)


def _sparse_depthwise(tokens: np.ndarray, coords: np.ndarray, grid_shape, kernel, bias):
    """3x3 depthwise pass over kept positions; missing neighbors read as 0."""
    n, d = tokens.shape
    h, w = grid_shape
    idx = np.full((h, w), -1, dtype=np.int64)
    idx[coords[:, 0], coords[:, 1]] = np.arange(n)
    out = tokens * kernel[:, 1, 1]
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            ny = coords[:, 0] + dy
            nx = coords[:, 1] + dx
            ok = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
            j = np.full(n, -1, dtype=np.int64)
            j[ok] = idx[ny[ok], nx[ok]]
            hit = j >= 0
            if hit.any():
                out[hit] += tokens[j[hit]] * kernel[:, 1 + dy, 1 + dx]
    return out + bias


def sparse_ss2d(x: np.ndarray, keep: np.ndarray, scores: np.ndarray, p: Ss2dParams,
                meter: FlopsMeter = NULL_METER, label: str = "ss2d",
                parallel: bool = False) -> np.ndarray:
    """Multi-direction selective scan over kept tokens, passthrough elsewhere.

    Kept tokens are normalized, projected, depthwise-mixed, serialized
    forward, backward and in IPL order through three scan blocks, merged
    by sum, gated, projected back, and added residually at their
    positions. Discarded positions return bit-equal to the input.
    """
    if keep.shape != x.shape[1:] or scores.shape != x.shape[1:]:
        raise ShapeError("keep mask and score map must match the token grid")
    ts = gather_tokens(x, keep)
    n = len(ts)
    if n == 0:
        return x.copy()
    c = x.shape[0]
    d = p.w_in.shape[0]
    t = layer_norm(ts.tokens, p.norm.gain, p.norm.bias)
    meter.elem(label, 8 * n * c)
    pre = t @ p.w_in.T + p.b_in
    gate = silu(t @ p.w_gate.T + p.b_gate)
    meter.macs(label, 2 * n * c * d)
    meter.elem(label, 3 * n * d)
    u = silu(_sparse_depthwise(pre, ts.coords, ts.grid_shape, p.dw_kernel, p.dw_bias))
    meter.macs(label, 9 * n * d)
    meter.elem(label, 2 * n * d)
    fwd = np.arange(n, dtype=np.int64)
    orders = (fwd, fwd[::-1].copy(), ipl_order(ts, scores, IplConfig(p.ipl_k)))
    params = (p.s6_fwd, p.s6_bwd, p.s6_ipl)
    acc = np.zeros_like(u)
    for perm, sp in zip(orders, params):
        y, _ = s6_forward(u[perm], sp, parallel=parallel, meter=meter, label=label)
        acc += y[invert(perm)]
    meter.elem(label, 3 * n * d)
    upd = (acc * gate) @ p.w_out.T + p.b_out
    meter.macs(label, n * d * c)
    meter.elem(label, n * d + n * c)
    out = x.copy()
    rows, cols = ts.coords[:, 0], ts.coords[:, 1]
    out[:, rows, cols] = x[:, rows, cols] + upd.T
    meter.elem(label, n * c)
    return out


def sparse_mlp(x: np.ndarray, keep: np.ndarray, p: MlpParams,
               meter: FlopsMeter = NULL_METER, label: str = "mlp") -> np.ndarray:
    """Two-layer token MLP on kept tokens only, passthrough elsewhere."""
    if keep.shape != x.shape[1:]:
        raise ShapeError("keep mask must match the token grid")
    ts = gather_tokens(x, keep)
    n = len(ts)
    if n == 0:
        return x.copy()
    c = x.shape[0]
    e = p.w1.shape[0]
    t = layer_norm(ts.tokens, p.norm.gain, p.norm.bias)
    meter.elem(label, 8 * n * c)
    hmid = gelu(t @ p.w1.T + p.b1)
    meter.macs(label, n * c * e)
    meter.elem(label, 2 * n * e)
    upd = hmid @ p.w2.T + p.b2
    meter.macs(label, n * e * c)
    meter.elem(label, n * c)
    out = x.copy()
    rows, cols = ts.coords[:, 0], ts.coords[:, 1]
    out[:, rows, cols] = x[:, rows, cols] + upd.T
    meter.elem(label, n * c)
    return out


def bidi_channel_scan(x: np.ndarray, s6_fwd: S6Params, s6_bwd: S6Params,
                      meter: FlopsMeter = NULL_METER, label: str = "gci",
                      parallel: bool = False) -> np.ndarray:
    """Scan the channel axis in both directions and sum.

    The sequence elements are whole channels: x is flattened to (C, H*W)
    so each step carries one channel's spatial layout as its lane vector.
    """
    c, h, w = x.shape
    seq = x.reshape(c, h * w)
    yf, _ = s6_forward(seq, s6_fwd, parallel=parallel, meter=meter, label=label)
    yb, _ = s6_forward(seq[::-1], s6_bwd, parallel=parallel, meter=meter, label=label)
    y = yf + yb[::-1]
    meter.elem(label, c * h * w)
    return y.reshape(c, h, w)


def gci_forward(x: np.ndarray, p: GciParams, meter: FlopsMeter = NULL_METER,
                label: str = "gci", parallel: bool = False) -> np.ndarray:
    """Global channel interaction on the dense map.

    Branch 1 projects, depthwise-mixes (edge padding, so constant fields
    pass through a sum-normalized kernel unchanged) and channel-scans the
    map; branch 2 is a pointwise 1x1 channel mix of the input. The output
    projection of their sum is added residually.
    """
    c, h, w = x.shape
    s = h * w
    flat = x.reshape(c, s)
    pre = (p.w_pre @ flat + p.b_pre[:, None]).reshape(c, h, w)
    meter.macs(label, s * c * c)
    meter.elem(label, s * c)
    b1_in = silu(depthwise_conv2d(pre, p.dw_kernel, p.dw_bias, pad_mode="edge"))
    meter.macs(label, 9 * s * c)
    meter.elem(label, 2 * s * c)
    b1 = bidi_channel_scan(b1_in, p.s6_fwd, p.s6_bwd, meter, label, parallel)
    b2 = p.w_mix @ flat + p.b_mix[:, None]
    meter.macs(label, s * c * c)
    meter.elem(label, s * c)
    merged = b1.reshape(c, s) + b2
    meter.elem(label, s * c)
    upd = p.w_out @ merged + p.b_out[:, None]
    meter.macs(label, s * c * c)
    meter.elem(label, s * c)
    out = x + upd.reshape(c, h, w)
    meter.elem(label, s * c)
    return out


def convlstm_step(x: np.ndarray, state: LstmState, p: ConvLstmParams,
                  meter: FlopsMeter = NULL_METER, label: str = "lstm"):
    """One convolutional LSTM step with 3x3 gates. Returns (h', new state)."""
    c, h, w = x.shape
    cout = p.bias.size // 4
    gates = conv2d_same(x, p.w_x) + conv2d_same(state.h, p.w_h) + p.bias[:, None, None]
    meter.macs(label, h * w * 9 * c * 4 * cout + h * w * 9 * cout * 4 * cout)
    meter.elem(label, h * w * 4 * cout)
    gi, gf, gg, go = (gates[i * cout:(i + 1) * cout] for i in range(4))
    c_new = sigmoid(gf) * state.c + sigmoid(gi) * np.tanh(gg)
    h_new = sigmoid(go) * np.tanh(c_new)
    meter.elem(label, 9 * h * w * cout)
    return h_new, LstmState(h=h_new, c=c_new)


def downsample_features(x: np.ndarray, w: np.ndarray, b: np.ndarray,
                        meter: FlopsMeter = NULL_METER, label: str = "down") -> np.ndarray:
    """Merge 2x2 token neighborhoods and project to the next stage width."""
    col = patchify(x, 2)
    y = col @ w.T + b
    meter.macs(label, col.shape[0] * col.shape[1] * w.shape[0])
    meter.elem(label, col.shape[0] * w.shape[0])
    _, h, wd = x.shape
    return y.T.reshape(w.shape[0], h // 2, wd // 2)


def stage_keep_maps(keep: np.ndarray, n_stages: int) -> list[np.ndarray]:
    """Keep mask per stage: the input mask, then successive 2x downsamples."""
    maps = [keep]
    for _ in range(n_stages - 1):
        maps.append(downsample_map(maps[-1], 2))
    return maps


def stage_kept_ratios(keep: np.ndarray, n_stages: int) -> list[float]:
    return [kept_ratio(m) for m in stage_keep_maps(keep, n_stages)]


def backbone_forward(voxels, keep: np.ndarray, scores: np.ndarray,
                     cfg: BackboneConfig, params: BackboneParams,
                     states: list[LstmState] | None = None,
                     meter: FlopsMeter = NULL_METER, parallel: bool = False):
    """Run the backbone over a sequence of voxel grids.

    Returns (outputs, states): one list of per-stage feature maps per
    timestep, and the updated LSTM states.
    """
    cfg.validate()
    grid0 = cfg.grid(0)
    if keep.shape != grid0 or scores.shape != grid0:
        raise ShapeError(f"keep mask and scores must have shape {grid0}")
    if states is None:
        states = init_lstm_states(cfg, dtype=params.w_embed.dtype)
    outputs = []
    for vox in voxels:
        values = vox.values if isinstance(vox, VoxelGrid) else np.asarray(vox)
        if values.shape != (2 * cfg.bins, cfg.height, cfg.width):
            raise ShapeError(f"voxel grid shape {values.shape} does not match config")
        x = patch_embed(values, cfg.patch, params.w_embed, params.b_embed, meter)
        k_map, s_map = keep, scores
        stage_outs = []
        for s, sp in enumerate(params.stages):
            tag = f"stage{s + 1}"
            x = sparse_ss2d(x, k_map, s_map, sp.ss2d, meter, f"{tag}.ss2d", parallel)
            if isinstance(sp.mixer, GciParams):
                x = gci_forward(x, sp.mixer, meter, f"{tag}.gci", parallel)
            else:
                x = sparse_mlp(x, k_map, sp.mixer, meter, f"{tag}.mlp")
            x, states[s] = convlstm_step(x, states[s], sp.lstm, meter, f"{tag}.lstm")
            stage_outs.append(x)
            if sp.down_w is not None:
                x = downsample_features(x, sp.down_w, sp.down_b, meter, f"{tag}.down")
                k_map = downsample_map(k_map, 2)
                s_map = max_pool2d(s_map, 2)
        outputs.append(stage_outs)
    return outputs, states


def iter_arrays(obj, prefix=""):
    """Yield (dotted name, array) for every ndarray leaf, in field order."""
    if isinstance(obj, np.ndarray):
        yield prefix, obj
    elif is_dataclass(obj):
        for f in fields(obj):
            yield from iter_arrays(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from iter_arrays(item, f"{prefix}[{i}]")
    # scalars and None carry no learnable state


def map_arrays(obj, fn):
    """Rebuild a parameter tree with fn applied to every ndarray leaf."""
    if isinstance(obj, np.ndarray):
        return fn(obj)
    if is_dataclass(obj):
        return replace(obj, **{f.name: map_arrays(getattr(obj, f.name), fn) for f in fields(obj)})
    if isinstance(obj, list):
        return [map_arrays(v, fn) for v in obj]
    if isinstance(obj, tuple):
        return tuple(map_arrays(v, fn) for v in obj)
    return obj


def cast_params(params: BackboneParams, dtype) -> BackboneParams:
    return map_arrays(params, lambda a: a.astype(dtype))


def save_checkpoint(params: BackboneParams, path: str | Path) -> None:
    """Write parameters as flat little-endian float64 plus a JSON manifest."""
    path = Path(path)
    entries = []
    offset = 0
    chunks = []
    for name, arr in iter_arrays(params):
        data = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "offset": offset, "shape": list(arr.shape)})
        chunks.append(data.tobytes())
        offset += len(chunks[-1])
    path.write_bytes(b"".join(chunks))
    manifest = {"format": "sparsescan-checkpoint-v1", "dtype": "<f8", "entries": entries}
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=1))


def load_checkpoint(path: str | Path, cfg: BackboneConfig) -> BackboneParams:
    """Restore parameters saved by save_checkpoint into a cfg-shaped tree."""
    path = Path(path)
    manifest_path = Path(str(path) + ".json")
    if not manifest_path.exists():
        raise FormatError(f"missing checkpoint manifest {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("dtype") != "<f8":
        raise FormatError(f"unsupported checkpoint dtype {manifest.get('dtype')!r}")
    blob = path.read_bytes()
    params = init_backbone_params(cfg, seed=0)
    slots = dict(iter_arrays(params))
    seen = set()
    for entry in manifest["entries"]:
        name, off, shape = entry["name"], entry["offset"], tuple(entry["shape"])
        if name not in slots:
            raise FormatError(f"checkpoint entry {name!r} has no slot in this config")
        if slots[name].shape != shape:
            raise FormatError(f"checkpoint entry {name!r} shape {shape} != {slots[name].shape}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape)
        np.copyto(slots[name], arr)
        seen.add(name)
    missing = set(slots) - seen
    if missing:
        raise FormatError(f"checkpoint is missing entries: {sorted(missing)[:3]}...")
    return params
