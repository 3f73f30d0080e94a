"""Two-branch scene classifier: global pooled features plus selected local features.

Each modality has its own small conv backbone. The global branch pools the
final map and applies an FC layer (+ ReLU) whose activations feed the fusion
layer, with a separate N-way head for the auxiliary loss. The local branch
runs keypoint selection over a feature pyramid. The fused vector
``[G_rgb, G_d, E_rgb, E_d]`` goes through one FC layer to the class logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import layers, losses, selection
from .config import ModelConfig, format_run_config, parse_run_config
from .errors import BadConfig, BadMagic, ShapeMismatch, StaleCache, TruncatedFile
from .layers import LayerCache, ParamTensor
from .losses import LossBundle, ViHead
from .selection import KeypointSet, SelectedFeatures
from .tensor import Rng, Tensor, as_tensor, decode_tensor, encode_tensor

MODALITIES = ("rgb", "d")


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered architecture manifest: parameter path -> shape."""
    shapes: dict[str, tuple[int, ...]] = {}
    for mod in MODALITIES:
        cin = config.in_channels
        for i, cout in enumerate(config.channels, start=1):
            shapes[f"{mod}.block{i}.conv.w"] = (cout, cin, 3, 3)
            shapes[f"{mod}.block{i}.conv.b"] = (cout,)
            cin = cout
    cf = config.feature_channels
    for mod in MODALITIES:
        shapes[f"{mod}.global.w"] = (config.global_dim, cf)
        shapes[f"{mod}.global.b"] = (config.global_dim,)
        shapes[f"{mod}.aux.w"] = (config.num_classes, config.global_dim)
        shapes[f"{mod}.aux.b"] = (config.num_classes,)
    fused = 2 * config.global_dim
    if config.dlfs is not None:
        shapes.update(selection.dlfs_param_shapes(config.dlfs, cf))
        s = config.vi_pool
        for i, k in enumerate(config.dlfs.ks):
            shapes[f"vi.s{i}.w"] = (config.num_classes, k, s, s)
            shapes[f"vi.s{i}.b"] = (config.num_classes,)
            shapes[f"vi.s{i}.log_sigma"] = (config.num_classes,)
        fused += 2 * config.dlfs.total_k * cf
    shapes["fuse.w"] = (config.num_classes, fused)
    shapes["fuse.b"] = (config.num_classes,)
    return shapes


def _fans(shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 4:
        rf = shape[2] * shape[3]
        return shape[1] * rf, shape[0] * rf
    return shape[1], shape[0]


class ModelParams:
    """Named :class:`ParamTensor` map plus the config it was built for.

    ``version`` increases whenever the values change through an optimizer
    step, which invalidates outstanding forward caches.
    """

    def __init__(self, config: ModelConfig, tensors: dict[str, ParamTensor]):
        expected = param_shapes(config)
        if list(tensors) != list(expected):
            missing = set(expected) ^ set(tensors)
            raise ShapeMismatch(f"parameter set differs from manifest: {sorted(missing)[:5]}")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ShapeMismatch(f"{name}: {tensors[name].shape} != {shape}")
        self.config = config
        self.tensors = tensors
        self.version = 0

    def __getitem__(self, name: str) -> ParamTensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self) -> dict[str, Tensor]:
        return {k: p.value for k, p in self.tensors.items()}

    def zero_grad(self) -> None:
        for p in self.tensors.values():
            p.zero_grad()

    def count(self) -> int:
        return sum(p.value.size for p in self.tensors.values())


def init_params(config: ModelConfig, rng: Rng) -> ModelParams:
    """Glorot-uniform weights, zero biases, ``log_sigma = 0``."""
    tensors = {}
    for idx, (name, shape) in enumerate(param_shapes(config).items()):
        if name.endswith((".b", ".log_sigma")):
            value = np.zeros(shape)
        else:
            fan_in, fan_out = _fans(shape)
            a = np.sqrt(6.0 / (fan_in + fan_out))
            value = rng.substream(idx).uniform(-a, a, shape)
        tensors[name] = ParamTensor(value)
    return ModelParams(config, tensors)


# ---------------------------------------------------------------------------
# forward


@dataclass
class ForwardResult:
    logits: Tensor  # (B, N)
    g_rgb_logits: Tensor
    g_d_logits: Tensor
    selected: SelectedFeatures | None
    keypoints: list[KeypointSet]
    grouped: list[Tensor]  # M per scale, (B, K, h, w)
    f_rgb: Tensor
    f_d: Tensor
    fused_dim: int
    cache: LayerCache = field(repr=False)


def _backbone(config: ModelConfig, v: dict, mod: str, x: Tensor):
    recs = []
    last = len(config.channels)
    for i in range(1, last + 1):
        x, cc = layers.conv2d(x, v[f"{mod}.block{i}.conv.w"], v[f"{mod}.block{i}.conv.b"], 1, 1)
        x, rc = layers.relu(x)
        pc = None
        if i < last:
            x, pc = layers.max_pool(x, x.shape[-1] // 2)
        recs.append((cc, rc, pc))
    return x, recs


def model_forward(params: ModelParams, x_rgb, x_d) -> ForwardResult:
    """Full forward pass on a batch ``(B, C, H, W)`` (a single sample gets B = 1)."""
    config = params.config
    x_rgb = as_tensor(x_rgb)
    x_d = as_tensor(x_d)
    if x_rgb.ndim == 3:
        x_rgb, x_d = x_rgb[None], x_d[None]
    want = (config.in_channels, *config.input_size)
    if x_rgb.shape[1:] != want or x_d.shape != x_rgb.shape:
        raise ShapeMismatch(f"inputs {x_rgb.shape}/{x_d.shape}, expected (B, {want})")
    v = params.values()
    B = x_rgb.shape[0]
    f = {}
    rec: dict = {"version": params.version}
    gvec, glog = {}, {}
    for mod, x in zip(MODALITIES, (x_rgb, x_d)):
        f[mod], rec[f"{mod}.backbone"] = _backbone(config, v, mod, x)
        pooled, rec[f"{mod}.gap"] = layers.global_avg_pool(f[mod])
        a, rec[f"{mod}.global"] = layers.fully_connected(pooled, v[f"{mod}.global.w"], v[f"{mod}.global.b"])
        gvec[mod], rec[f"{mod}.global_relu"] = layers.relu(a)
        glog[mod], rec[f"{mod}.aux"] = layers.fully_connected(gvec[mod], v[f"{mod}.aux.w"], v[f"{mod}.aux.b"])
    parts = [gvec["rgb"], gvec["d"]]
    selected, kps, grouped = None, [], []
    if config.dlfs is not None:
        selected, kps, rec["dlfs"] = selection.dlfs_forward(f["rgb"], f["d"], config.dlfs, v)
        grouped = [kp.grouped for kp in kps]
        parts += [selected.e_rgb.reshape(B, -1), selected.e_d.reshape(B, -1)]
    fused = np.concatenate(parts, axis=1)
    logits, rec["fuse"] = layers.fully_connected(fused, v["fuse.w"], v["fuse.b"])
    rec["splits"] = [p.shape[1] for p in parts]
    cache = LayerCache("model", **rec)
    return ForwardResult(
        logits=logits,
        g_rgb_logits=glog["rgb"],
        g_d_logits=glog["d"],
        selected=selected,
        keypoints=kps,
        grouped=grouped,
        f_rgb=f["rgb"],
        f_d=f["d"],
        fused_dim=fused.shape[1],
        cache=cache,
    )


# ---------------------------------------------------------------------------
# losses


@dataclass
class LossGrads:
    """Gradients of the weighted total w.r.t. the forward outputs."""

    logits: Tensor | None = None
    g_rgb_logits: Tensor | None = None
    g_d_logits: Tensor | None = None
    e_rgb: Tensor | None = None
    e_d: Tensor | None = None
    grouped: list | None = None
    params: dict[str, Tensor] = field(default_factory=dict)


@dataclass(frozen=True)
class LossTerms:
    """Weights and on/off switches for the four training signals."""

    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 0.1
    use_cls: bool = True
    use_aux: bool = True
    use_vi: bool = True
    use_corr: bool = True


def mine_triplets(labels, rng: Rng) -> np.ndarray:
    """One random positive and negative per anchor; anchors lacking either are skipped."""
    labels = np.asarray(labels)
    out = []
    for i, y in enumerate(labels):
        pos = [j for j in range(len(labels)) if j != i and labels[j] == y]
        neg = [j for j in range(len(labels)) if labels[j] != y]
        if not pos or not neg:
            continue
        out.append((i, rng.choice(pos), rng.choice(neg)))
    return np.asarray(out, dtype=np.int64).reshape(-1, 3)


def vi_head(params: ModelParams, scale: int) -> ViHead:
    return ViHead(
        params[f"vi.s{scale}.w"].value,
        params[f"vi.s{scale}.b"].value,
        params[f"vi.s{scale}.log_sigma"].value,
    )


def _triplet_term(e: Tensor, trip: np.ndarray, margin: float):
    a, p, n = trip[:, 0], trip[:, 1], trip[:, 2]
    loss, cache = losses.triplet_corr_loss(e[a], e[p], e[n], margin)

    def backward(scale: float) -> Tensor:
        ga, gp, gn = losses.triplet_corr_loss_backward(cache, scale)
        g = np.zeros_like(e)
        np.add.at(g, a, ga)
        np.add.at(g, p, gp)
        np.add.at(g, n, gn)
        return g

    return loss, backward


def compute_losses(
    params: ModelParams,
    out: ForwardResult,
    labels,
    terms: LossTerms = LossTerms(),
    triplets: np.ndarray | None = None,
) -> tuple[LossBundle, LossGrads]:
    """Assemble ``L_cls + l1 L_aux + l2 L_VI + l3 L_C`` and its output gradients.

    Disabled terms report 0 and contribute no gradient. The selection losses
    are summed over pyramid scales; the correlation term is
    ``triplet(rgb) + triplet(d) + multimodal``.
    """
    config = params.config
    labels = np.asarray(labels, dtype=np.int64)
    grads = LossGrads()
    l_cls = l_aux = l_vi = l_c = 0.0
    if terms.use_cls:
        l_cls, cc = layers.cross_entropy(out.logits, labels)
        grads.logits = layers.cross_entropy_backward(cc, 1.0)
    if terms.use_aux and terms.lambda1:
        l_aux, ac = losses.aux_ce_loss(out.g_rgb_logits, out.g_d_logits, labels)
        grads.g_rgb_logits, grads.g_d_logits = losses.aux_ce_loss_backward(ac, terms.lambda1)
    elif terms.use_aux:
        l_aux, _ = losses.aux_ce_loss(out.g_rgb_logits, out.g_d_logits, labels)
    local = config.dlfs is not None
    if local and terms.use_vi:
        grads.grouped = []
        for i, m in enumerate(out.grouped):
            lv, vc = losses.vi_loss(m, labels, vi_head(params, i))
            l_vi += lv
            gm, gw, gb, gls = losses.vi_loss_backward(vc, terms.lambda2)
            grads.grouped.append(gm)
            grads.params[f"vi.s{i}.w"] = gw
            grads.params[f"vi.s{i}.b"] = gb
            grads.params[f"vi.s{i}.log_sigma"] = gls
    if local and terms.use_corr:
        sel = out.selected
        g_rgb = np.zeros_like(sel.e_rgb)
        g_d = np.zeros_like(sel.e_d)
        start = 0
        for k, (er, ed) in zip(sel.ks, sel.per_scale()):
            sl = slice(start, start + k)
            start += k
            lm, mc = losses.multimodal_corr_loss(er, ed)
            l_c += lm
            gr, gd = losses.multimodal_corr_loss_backward(mc, terms.lambda3)
            g_rgb[:, sl] += gr
            g_d[:, sl] += gd
            if triplets is not None and len(triplets):
                lt, back = _triplet_term(er, triplets, config.margin)
                l_c += lt
                g_rgb[:, sl] += back(terms.lambda3)
                lt, back = _triplet_term(ed, triplets, config.margin)
                l_c += lt
                g_d[:, sl] += back(terms.lambda3)
        grads.e_rgb, grads.e_d = g_rgb, g_d
    bundle = losses.total_loss(l_cls, l_aux, l_vi, l_c, terms.lambda1, terms.lambda2, terms.lambda3)
    return bundle, grads


# ---------------------------------------------------------------------------
# backward


def _backbone_backward(config: ModelConfig, mod: str, recs, g: Tensor, acc: dict) -> None:
    for i in reversed(range(1, len(config.channels) + 1)):
        cc, rc, pc = recs[i - 1]
        if pc is not None:
            g = layers.max_pool_backward(pc, g)
        g = layers.relu_backward(rc, g)
        g, gw, gb = layers.conv2d_backward(cc, g, input_grad=i > 1)
        acc[f"{mod}.block{i}.conv.w"] = gw
        acc[f"{mod}.block{i}.conv.b"] = gb


def model_backward(params: ModelParams, cache: LayerCache, grads: LossGrads) -> None:
    """Accumulate parameter gradients (``+=`` into ``ParamTensor.grad``)."""
    c = cache.take("model")
    if c.version != params.version:
        raise StaleCache("parameters changed since this forward pass")
    config = params.config
    acc: dict[str, Tensor] = dict(grads.params)
    splits = np.cumsum(c.splits)[:-1]
    B = c.fuse.x.shape[0]
    if grads.logits is not None:
        gh, acc["fuse.w"], acc["fuse.b"] = layers.fully_connected_backward(c.fuse, grads.logits)
        pieces = np.split(gh, splits, axis=1)
    else:
        pieces = [np.zeros((B, n)) for n in c.splits]
    gf = {}
    for idx, mod in enumerate(MODALITIES):
        gg = pieces[idx]
        aux_grad = grads.g_rgb_logits if mod == "rgb" else grads.g_d_logits
        if aux_grad is not None:
            g2, acc[f"{mod}.aux.w"], acc[f"{mod}.aux.b"] = layers.fully_connected_backward(c.__dict__[f"{mod}.aux"], aux_grad)
            gg = gg + g2
        ga = layers.relu_backward(c.__dict__[f"{mod}.global_relu"], gg)
        gp, acc[f"{mod}.global.w"], acc[f"{mod}.global.b"] = layers.fully_connected_backward(c.__dict__[f"{mod}.global"], ga)
        gf[mod] = layers.global_avg_pool_backward(c.__dict__[f"{mod}.gap"], gp)
    if config.dlfs is not None:
        ks = config.dlfs.total_k
        cf = config.feature_channels
        ge_rgb = pieces[2].reshape(B, ks, cf)
        ge_d = pieces[3].reshape(B, ks, cf)
        if grads.e_rgb is not None:
            ge_rgb = ge_rgb + grads.e_rgb
            ge_d = ge_d + grads.e_d
        g_rgb, g_d, gd = selection.dlfs_backward(c.dlfs, ge_rgb, ge_d, grads.grouped)
        acc.update(gd)
        gf["rgb"] = gf["rgb"] + g_rgb
        gf["d"] = gf["d"] + g_d
    for mod in MODALITIES:
        _backbone_backward(config, mod, c.__dict__[f"{mod}.backbone"], gf[mod], acc)
    for name, g in acc.items():
        params[name].grad += g


def train_step_grads(params, x_rgb, x_d, labels, terms=LossTerms(), triplets=None):
    """Forward, loss assembly and backward on one batch; grads are accumulated."""
    out = model_forward(params, x_rgb, x_d)
    bundle, grads = compute_losses(params, out, labels, terms, triplets)
    model_backward(params, out.cache, grads)
    return bundle, out


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class TrainState:
    epoch: int = -1  # last completed epoch
    step: int = 0
    best_mca: float = -1.0
    best_epoch: int = -1


CONFIG_RECORD = "@config"
STATE_RECORD = "@state"


def _text_record(text: str) -> Tensor:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def _record_text(t: Tensor) -> str:
    return t.astype(np.uint8).tobytes().decode("utf-8")


def encode_checkpoint(params: ModelParams, state: TrainState | None = None) -> bytes:
    """Manifest of ``path<TAB>offset`` lines, a blank line, then DTEN records.

    Offsets count from the first byte after the blank line. The records are
    every parameter value, the model config as UTF-8 bytes, and a trailing
    optimizer record ``[epoch, step, best_mca, best_epoch, m..., v...]``.
    """
    state = state or TrainState()
    records = [(name, p.value) for name, p in params.items()]
    records.append((CONFIG_RECORD, _text_record(format_run_config(params.config))))
    opt = [np.array([state.epoch, state.step, state.best_mca, state.best_epoch], dtype=np.float64)]
    opt += [p.adam_m.ravel() for p in params.tensors.values()]
    opt += [p.adam_v.ravel() for p in params.tensors.values()]
    records.append((STATE_RECORD, np.concatenate(opt)))
    blobs = [encode_tensor(t) for _, t in records]
    lines, offset = [], 0
    for (name, _), blob in zip(records, blobs):
        lines.append(f"{name}\t{offset}\n")
        offset += len(blob)
    return ("".join(lines) + "\n").encode("utf-8") + b"".join(blobs)


def decode_checkpoint(buf: bytes, config: ModelConfig | None = None) -> tuple[ModelParams, TrainState]:
    end = buf.find(b"\n\n")
    if end < 0:
        raise BadMagic("no checkpoint manifest terminator")
    try:
        header = buf[:end].decode("utf-8")
    except UnicodeDecodeError:
        raise BadMagic("manifest is not UTF-8") from None
    base = end + 2
    entries = []
    for line in header.split("\n"):
        parts = line.split("\t")
        if len(parts) != 2 or not parts[1].isdigit():
            raise BadMagic(f"bad manifest line {line!r}")
        entries.append((parts[0], int(parts[1])))
    recs = {}
    for name, off in entries:
        if base + off > len(buf):
            raise TruncatedFile(f"record {name} beyond end of file")
        recs[name], _ = decode_tensor(buf, base + off)
    if CONFIG_RECORD not in recs or STATE_RECORD not in recs or entries[-1][0] != STATE_RECORD:
        raise BadMagic("checkpoint lacks config or trailing optimizer record")
    stored, _ = parse_run_config(_record_text(recs[CONFIG_RECORD]))
    config = config or stored
    expected = param_shapes(config)
    names = [n for n, _ in entries if not n.startswith("@")]
    if names != list(expected):
        raise ShapeMismatch("checkpoint parameters do not match the model config")
    tensors = {}
    for name in names:
        if recs[name].shape != expected[name]:
            raise ShapeMismatch(f"{name}: stored {recs[name].shape}, config wants {expected[name]}")
        tensors[name] = ParamTensor(recs[name])
    opt = recs[STATE_RECORD]
    total = sum(int(np.prod(s)) for s in expected.values())
    if opt.shape != (4 + 2 * total,):
        raise ShapeMismatch("optimizer record size does not match parameters")
    state = TrainState(int(opt[0]), int(opt[1]), float(opt[2]), int(opt[3]))
    pos = 4
    for attr in ("adam_m", "adam_v"):
        for p in tensors.values():
            n = p.value.size
            setattr(p, attr, opt[pos : pos + n].reshape(p.value.shape).copy())
            pos += n
    for p in tensors.values():
        p.step_count = state.step
    return ModelParams(config, tensors), state


def save_checkpoint(path, params: ModelParams, state: TrainState | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(params, state))


def load_checkpoint(path, config: ModelConfig | None = None) -> tuple[ModelParams, TrainState]:
    return decode_checkpoint(Path(path).read_bytes(), config)


def build_model(config: ModelConfig, seed: int) -> ModelParams:
    if not isinstance(config, ModelConfig):
        raise BadConfig("expected a ModelConfig")
    return init_params(config, Rng(seed, stream=1))
