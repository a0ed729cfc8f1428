"""Network configuration, tied parameter store, stage networks, checkpoints.

A network is a stack of convolution layers (each: one or more conv+ReLU
blocks, then an optional max-pool) topped, at stage ``n``, by ``n``
deconvolution layers. Deconvolution layer ``j`` unpools with the switches of
convolution layer ``L + 1 - j`` and runs that layer's blocks in reverse
order with adjoint (tied) kernels and its own biases. The top convolution
output and every deconvolution output are normalized, expanded to the
finest resolution, concatenated and fed to the class-map head.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from tiedseg import layers as L
from tiedseg.errors import CheckpointFormatError, ConfigError, ShapeError, StateError
from tiedseg.tensor import DTYPE

TASKS = ("multi-label", "binary")


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass
class BlockSpec:
    filters: int
    kh: int = 3
    kw: int = 3
    stride: int = 1


@dataclass
class PoolSpec:
    kh: int = 2
    kw: int = 2
    stride: int = 2


@dataclass
class ConvLayerSpec:
    blocks: list[BlockSpec]
    pool: PoolSpec | None = field(default_factory=PoolSpec)


@dataclass
class NetworkConfig:
    conv_layers: list[ConvLayerSpec]
    deconv_stages: int
    num_classes: int
    input_size: tuple[int, int]
    in_channels: int = 1
    task: str = "multi-label"
    s: float = 5.0
    tied_flip: bool = True
    head_kernel: int = 1
    loss_link: str = "identity"
    norm_scope: str = "plane"
    frozen: list[str] = field(default_factory=list)
    name: str = ""

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.validate()

    @property
    def num_conv_layers(self) -> int:
        return len(self.conv_layers)

    def partner(self, j: int) -> int:
        """Index (1-based) of the conv layer tied with deconv layer ``j``."""
        return self.num_conv_layers + 1 - j

    @property
    def tie_map(self) -> dict[int, int]:
        return {j: self.partner(j) for j in range(1, self.deconv_stages + 1)}

    def validate(self) -> None:
        if not self.conv_layers:
            raise ConfigError("at least one convolution layer is required")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.task == "binary" and self.num_classes != 2:
            raise ConfigError("binary task needs num_classes == 2")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.s <= 0:
            raise ConfigError("s must be positive")
        if self.head_kernel % 2 == 0:
            raise ConfigError("head_kernel must be odd")
        if self.norm_scope not in L.NORM_SCOPES:
            raise ConfigError(f"unknown norm_scope {self.norm_scope!r}")
        if self.loss_link not in ("identity", "logistic"):
            raise ConfigError(f"unknown loss_link {self.loss_link!r}")
        for i, layer in enumerate(self.conv_layers, 1):
            if not layer.blocks:
                raise ConfigError(f"conv{i} has no blocks")
            for b in layer.blocks:
                if b.kh % 2 == 0 or b.kw % 2 == 0:
                    raise ConfigError(f"conv{i}: kernel sizes must be odd")
                if b.stride != 1:
                    raise ConfigError(f"conv{i}: only stride 1 is supported")
            if layer.pool is not None and (layer.pool.kh, layer.pool.kw) != (layer.pool.stride,) * 2:
                raise ConfigError(f"conv{i}: pool window must equal its stride")
        pooled = sum(1 for layer in self.conv_layers if layer.pool is not None)
        if not 0 <= self.deconv_stages <= pooled:
            raise ConfigError(f"deconv_stages={self.deconv_stages} exceeds pooled conv layers ({pooled})")
        for j in range(1, self.deconv_stages + 1):
            if self.conv_layers[self.partner(j) - 1].pool is None:
                raise ConfigError(f"deconv{j} partner conv{self.partner(j)} has no pool to unpool")
        total = int(np.prod([layer.pool.stride for layer in self.conv_layers if layer.pool]))
        h, w = self.input_size
        if h % total or w % total:
            raise ConfigError(f"input size {self.input_size} not divisible by total pool stride {total}")

    def spatial_after(self, i: int) -> tuple[int, int]:
        """Spatial size of conv layer ``i``'s output (after its pool)."""
        h, w = self.input_size
        for layer in self.conv_layers[:i]:
            if layer.pool is not None:
                h //= layer.pool.stride
                w //= layer.pool.stride
        return h, w

    def stacked_shape(self, stage: int) -> tuple[int, int, int]:
        """(channels, h, w) of the stacked feature map at ``stage``."""
        lc = self.num_conv_layers
        channels = self.conv_layers[-1].blocks[-1].filters
        h, w = self.spatial_after(lc)
        for j in range(1, stage + 1):
            k = self.partner(j)
            channels += self._in_channels(k)
            h, w = self.spatial_after(k - 1)
        return channels, h, w

    def _in_channels(self, i: int) -> int:
        return self.in_channels if i == 1 else self.conv_layers[i - 2].blocks[-1].filters

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetworkConfig":
        d = dict(d)
        tie_map = d.pop("tie_map", None)
        try:
            layers = []
            for spec in d.pop("conv_layers"):
                pool = spec.get("pool", {})
                layers.append(
                    ConvLayerSpec(
                        blocks=[BlockSpec(**b) for b in spec["blocks"]],
                        pool=None if pool is None else PoolSpec(**pool),
                    )
                )
            cfg = cls(conv_layers=layers, **d)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed network config: {exc}") from exc
        if tie_map is not None:
            given = {int(k): int(v) for k, v in tie_map.items()}
            if given != cfg.tie_map:
                raise ConfigError(f"tie_map {given} must be j -> L_c+1-j, i.e. {cfg.tie_map}")
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["tie_map"] = {str(k): v for k, v in self.tie_map.items()}
        return d

    @classmethod
    def load(cls, path) -> "NetworkConfig":
        path = Path(path)
        if not path.exists() and path.suffix == ".json":
            preset = resources.files("tiedseg") / "presets" / path.name
            if preset.is_file():
                return cls.from_dict(json.loads(preset.read_text()))
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def load_preset(name: str) -> NetworkConfig:
    """Shipped architectures: ``tb``, ``voc16`` and ``synth``."""
    text = (resources.files("tiedseg") / "presets" / f"{name}.json").read_text()
    return NetworkConfig.from_dict(json.loads(text))


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------


class TiedParamStore:
    """Independent parameters plus deconvolution kernels tied to them.

    A tied kernel owns no storage: ``get`` returns the adjoint view of its
    partner, and gradients accumulated against the view are mapped back
    onto the partner's accumulator.
    """

    def __init__(self, tied_flip: bool = True):
        self.tied_flip = tied_flip
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.ties: dict[str, str] = {}

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.ties:
            raise ConfigError(f"{name} is a tied view and cannot own storage")
        self.params[name] = np.ascontiguousarray(value, dtype=DTYPE)
        self.grads[name] = np.zeros_like(self.params[name])

    def tie(self, view_name: str, partner: str) -> None:
        if partner not in self.params:
            raise ConfigError(f"cannot tie {view_name}: partner {partner} not registered")
        self.ties[view_name] = partner

    def get(self, name: str) -> np.ndarray:
        if name in self.ties:
            return make_tied_view(self, name)
        try:
            return self.params[name]
        except KeyError:
            raise ConfigError(f"unknown parameter {name}") from None

    def accumulate(self, name: str, g: np.ndarray) -> None:
        if name in self.ties:
            self.grads[self.ties[name]] += L.adjoint_kernel(g, self.tied_flip)
        else:
            self.grads[name] += g

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def names(self) -> list[str]:
        return list(self.params)

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}


def make_tied_view(store: TiedParamStore, deconv_name: str) -> np.ndarray:
    """Adjoint view of the partner kernel; reflects later writes to it."""
    try:
        partner = store.ties[deconv_name]
    except KeyError:
        raise ConfigError(f"no tie registered for {deconv_name}") from None
    return L.adjoint_kernel(store.params[partner], store.tied_flip)


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    out_c, in_c, kh, kw = shape
    a = np.sqrt(6.0 / (in_c * kh * kw + out_c * kh * kw))
    return rng.uniform(-a, a, size=shape)


# --------------------------------------------------------------------------
# stage network
# --------------------------------------------------------------------------


@dataclass
class _Block:
    name: str  # e.g. conv3_2 / deconv1_2
    weight: str  # parameter name (possibly a tied view)
    bias: str


def _matches(name: str, patterns: Iterable[str]) -> bool:
    for p in patterns:
        if name == p or name.startswith(p + ".") or name.startswith(p + "_"):
            return True
    return False


class StageNet:
    """The network at a given deconvolution stage (0 = no deconvolution)."""

    def __init__(self, config: NetworkConfig, stage: int, store: TiedParamStore):
        if not 0 <= stage <= config.deconv_stages:
            raise ConfigError(f"stage {stage} outside 0..{config.deconv_stages}")
        self.config = config
        self.stage = stage
        self.store = store
        self.conv_blocks: list[list[_Block]] = []
        for i, layer in enumerate(config.conv_layers, 1):
            self.conv_blocks.append(
                [_Block(f"conv{i}_{b}", f"conv{i}_{b}.weight", f"conv{i}_{b}.bias") for b in range(1, len(layer.blocks) + 1)]
            )
        self.deconv_blocks: list[list[_Block]] = []
        for j in range(1, stage + 1):
            k = config.partner(j)
            nb = len(config.conv_layers[k - 1].blocks)
            self.deconv_blocks.append(
                [_Block(f"deconv{j}_{b}", f"deconv{j}_{b}.weight", f"deconv{j}_{b}.bias") for b in range(nb, 0, -1)]
            )
        self.trainable: set[str] = {n for n in store.names() if not _matches(n, config.frozen)}
        self._cache: dict | None = None
        self.outputs: dict[str, np.ndarray] = {}

    # ---- parameters ---------------------------------------------------------

    def param_names(self) -> list[str]:
        return self.store.names()

    def set_trainable(self, names: Iterable[str]) -> None:
        names = set(names)
        unknown = names - set(self.store.names())
        if unknown:
            raise ConfigError(f"unknown parameters {sorted(unknown)}")
        self.trainable = names - {n for n in names if _matches(n, self.config.frozen)}

    def load_state(self, params: Mapping[str, np.ndarray], exclude: Iterable[str] = ()) -> list[str]:
        """Copy matching parameters (same name and shape); return their names."""
        loaded = []
        for name, value in params.items():
            if name in self.store.params and not _matches(name, exclude):
                if self.store.params[name].shape == value.shape:
                    self.store.params[name][...] = value
                    loaded.append(name)
        return loaded

    # ---- forward ------------------------------------------------------------

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (y_pred of shape (n, K), per-pixel class maps)."""
        cfg = self.config
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, *cfg.input_size):
            raise ShapeError(f"input shape {x.shape} does not match config (n, {cfg.in_channels}, {cfg.input_size})")
        st = self.store
        cache: dict = {"conv": [], "deconv": [], "switches": []}
        outputs: dict[str, np.ndarray] = {}
        h = x
        for i, (layer, blocks) in enumerate(zip(cfg.conv_layers, self.conv_blocks), 1):
            recs = []
            for blk, spec in zip(blocks, layer.blocks):
                try:
                    cols = L.im2col(h, spec.kh, spec.kw)
                    pre = L.conv_forward(h, st.get(blk.weight), st.get(blk.bias), cols=cols)
                except ShapeError as exc:
                    raise ShapeError(f"{blk.name}: {exc}") from exc
                recs.append((h, cols, pre))
                h = L.relu(pre)
            sw = None
            if layer.pool is not None:
                p = layer.pool
                h, sw = L.maxpool_forward(h, (p.kh, p.kw), (p.stride, p.stride))
            cache["conv"].append(recs)
            cache["switches"].append(sw)
            outputs[f"conv{i}"] = h
        maps = [h]
        for j, blocks in enumerate(self.deconv_blocks, 1):
            k = cfg.partner(j)
            sw = cache["switches"][k - 1]
            try:
                h = L.unpool_forward(h, sw)
            except ShapeError as exc:
                raise ShapeError(f"deconv{j} unpool: {exc}") from exc
            recs = []
            specs = list(reversed(cfg.conv_layers[k - 1].blocks))
            for blk, spec in zip(blocks, specs):
                cols = L.im2col(h, spec.kh, spec.kw)
                pre = L.deconv_forward(h, st.get(blk.weight), st.get(blk.bias), cols=cols)
                recs.append((h, cols, pre))
                h = L.relu(pre)
            cache["deconv"].append(recs)
            outputs[f"deconv{j}"] = h
            maps.append(h)
        th, tw = maps[-1].shape[2:]
        stacked = L.concat_maps([L.expand_map(L.normalize_map(m, scope=cfg.norm_scope), th, tw) for m in maps])
        hk = cfg.head_kernel
        head_cols = L.im2col(stacked, hk, hk)
        logits = L.classmap_forward(stacked, st.get("head.weight"), st.get("head.bias"))
        if cfg.task == "binary":
            act = L.relu(logits)
        else:
            act = L.channel_softmax(logits)
        y = L.lse_pool(act, cfg.s)
        cache.update(maps=maps, stacked=stacked, head_cols=head_cols, logits=logits, act=act)
        self._cache = cache
        self.outputs = outputs
        return y, act

    # ---- backward -----------------------------------------------------------

    def _any_trainable(self, blocks: Iterable[_Block]) -> bool:
        for blk in blocks:
            w = self.store.ties.get(blk.weight, blk.weight)
            if w in self.trainable or blk.bias in self.trainable:
                return True
        return False

    def _acc(self, name: str, g: np.ndarray) -> None:
        key = self.store.ties.get(name, name)
        if key in self.trainable:
            self.store.accumulate(name, g)

    def backward(self, d_y: np.ndarray) -> None:
        """Accumulate parameter gradients of the last forward into the store."""
        if self._cache is None:
            raise StateError("backward called before forward")
        cfg, st, c = self.config, self.store, self._cache
        d_act = L.lse_pool_backward(c["act"], cfg.s, d_y)
        if cfg.task == "binary":
            d_logits = L.relu_backward(c["logits"], d_act)
        else:
            d_logits = L.channel_softmax_backward(c["act"], d_act)
        conv_flat = [blk for blocks in self.conv_blocks for blk in blocks]
        conv_train = self._any_trainable(conv_flat)
        head = L.conv_backward(
            c["stacked"], st.get("head.weight"), d_logits, c["head_cols"],
            need_input=conv_train or self._any_trainable([b for bl in self.deconv_blocks for b in bl]),
        )
        self._acc("head.weight", head.d_weight)
        self._acc("head.bias", head.d_bias)
        if head.d_input is None:
            return

        maps = c["maps"]
        counts = [m.shape[1] for m in maps]
        d_maps = []
        for m, dm in zip(maps, L.split_channels(head.d_input, counts)):
            de = L.expand_map_backward(dm, m.shape[2], m.shape[3])
            d_maps.append(L.normalize_map_backward(m, de, scope=cfg.norm_scope))

        # deconvolution path, top stage first
        for j in range(len(self.deconv_blocks), 0, -1):
            blocks = self.deconv_blocks[j - 1]
            below = self._any_trainable([b for bl in self.deconv_blocks[: j - 1] for b in bl]) or conv_train
            g = d_maps[j]
            recs = c["deconv"][j - 1]
            for bi in range(len(blocks) - 1, -1, -1):
                blk = blocks[bi]
                x_in, cols, pre = recs[bi]
                g = L.relu_backward(pre, g)
                need = below or bi > 0
                lg = L.deconv_backward(x_in, st.get(blk.weight), g, cols, need_input=need)
                self._acc(blk.weight, lg.d_weight)
                self._acc(blk.bias, lg.d_bias)
                g = lg.d_input
                if g is None:
                    break
            if g is None:
                break
            sw = c["switches"][cfg.partner(j) - 1]
            d_maps[j - 1] = d_maps[j - 1] + L.unpool_backward(g, sw)

        if not conv_train:
            return
        g = d_maps[0]
        for i in range(len(self.conv_blocks), 0, -1):
            sw = c["switches"][i - 1]
            if sw is not None:
                g = L.maxpool_backward(g, sw)
            blocks = self.conv_blocks[i - 1]
            recs = c["conv"][i - 1]
            for bi in range(len(blocks) - 1, -1, -1):
                blk = blocks[bi]
                x_in, cols, pre = recs[bi]
                g = L.relu_backward(pre, g)
                earlier = [b for bl in self.conv_blocks[: i - 1] for b in bl] + blocks[:bi]
                need = self._any_trainable(earlier)
                lg = L.conv_backward(x_in, st.get(blk.weight), g, cols, need_input=need)
                self._acc(blk.weight, lg.d_weight)
                self._acc(blk.bias, lg.d_bias)
                g = lg.d_input
                if g is None:
                    return

    def clear_cache(self) -> None:
        self._cache = None


def build(
    config: NetworkConfig,
    stage: int,
    rng: np.random.Generator,
    params: Mapping[str, np.ndarray] | None = None,
    exclude: Iterable[str] = (),
) -> StageNet:
    """Create the stage network with fresh parameters, then load ``params``.

    Fresh draws happen for every parameter in a fixed order, so the result
    depends only on (config, stage, rng state) and the loaded values.
    """
    if not 0 <= stage <= config.deconv_stages:
        raise ConfigError(f"stage {stage} outside 0..{config.deconv_stages}")
    store = TiedParamStore(config.tied_flip)
    in_c = config.in_channels
    for i, layer in enumerate(config.conv_layers, 1):
        for b, spec in enumerate(layer.blocks, 1):
            shape = (spec.filters, in_c, spec.kh, spec.kw)
            store.add(f"conv{i}_{b}.weight", glorot_uniform(rng, shape))
            store.add(f"conv{i}_{b}.bias", np.zeros(spec.filters))
            in_c = spec.filters
    for j in range(1, stage + 1):
        k = config.partner(j)
        for b in range(len(config.conv_layers[k - 1].blocks), 0, -1):
            partner = f"conv{k}_{b}.weight"
            store.tie(f"deconv{j}_{b}.weight", partner)
            store.add(f"deconv{j}_{b}.bias", np.zeros(store.params[partner].shape[1]))
    channels, _, _ = config.stacked_shape(stage)
    hk = config.head_kernel
    store.add("head.weight", glorot_uniform(rng, (config.num_classes, channels, hk, hk)))
    store.add("head.bias", np.zeros(config.num_classes))
    net = StageNet(config, stage, store)
    if params is not None:
        net.load_state(params, exclude=exclude)
    return net


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

MAGIC = b"DSTK"
VERSION = 1


def _dims4(a: np.ndarray) -> tuple[int, int, int, int]:
    if a.ndim > 4:
        raise ShapeError(f"cannot store rank-{a.ndim} array")
    return tuple(a.shape) + (1,) * (4 - a.ndim)


def save_checkpoint(params, path) -> None:
    """Write independent parameters (tied views are never serialized)."""
    if isinstance(params, TiedParamStore):
        params = params.params
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(params))]
    for name, value in params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<4I", *_dims4(value)))
        chunks.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def _read(buf: bytes, off: int, n: int, what: str) -> bytes:
    if off + n > len(buf):
        raise CheckpointFormatError(f"truncated {what}", off)
    return buf[off: off + n]


def read_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if _read(buf, 0, 4, "magic") != MAGIC:
        raise CheckpointFormatError("bad magic, not a checkpoint", 0)
    version, count = struct.unpack("<HI", _read(buf, 4, 6, "header"))
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version}", 4)
    off = 10
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _read(buf, off, 2, "name length"))
        off += 2
        try:
            name = _read(buf, off, nlen, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointFormatError("name is not utf-8", off) from None
        off += nlen
        dims = struct.unpack("<4I", _read(buf, off, 16, "dims"))
        off += 16
        size = int(np.prod(dims)) * 8
        arr = np.frombuffer(_read(buf, off, size, f"payload of {name}"), dtype="<f8").astype(DTYPE)
        off += size
        arr = arr.reshape(dims)
        if name.endswith(".bias"):
            arr = arr.reshape(dims[0])
        out[name] = arr
    if off != len(buf):
        raise CheckpointFormatError("trailing bytes after last record", off)
    return out


def load_checkpoint(path, tied_flip: bool = True) -> TiedParamStore:
    store = TiedParamStore(tied_flip)
    for name, value in read_checkpoint(path).items():
        store.add(name, value)
    return store
