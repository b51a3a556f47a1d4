"""Mini vision transformer with capturable attention and mid-network token masks.

Pre-norm blocks (LN -> MHSA -> residual, LN -> MLP -> residual), CLS token at
index 0, learned positional embeddings added before layer 0. Any layer's
post-softmax attention can be captured, and from a prune layer onward the
network can either run full-size with sentinel-masked attention or gather the
kept tokens into a shorter sequence; both paths agree on kept-token outputs.

Masking semantics: scores of pruned *columns* are set to the -65000 sentinel
before softmax (kept tokens then assign them exactly zero probability after
the exponential underflows), and post-softmax rows of pruned *queries* are
explicitly zeroed, so pruned positions contribute nothing to the attention
output. An all-ones mask short-circuits and is bitwise identical to the
unmasked path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError, DimensionError
from .rng import Rng
from .sparsify import PruneConfig, plan

PRUNE_SENTINEL = -65000.0  # underflows to exact zero probability after softmax


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    embed_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    mlp_ratio: int = 4
    num_classes: int = 8
    dropout: float = 0.0    # fixed at 0 here; heavier regularization is out of scope
    drop_path: float = 0.0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ContractError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ContractError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.dropout != 0.0 or self.drop_path != 0.0:
            raise ContractError("dropout/drop_path are fixed at 0 in this implementation")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size**2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


def toy_config(**overrides) -> ModelConfig:
    """32px images, patch 4 (64 patches), d=64, 4 heads, 4 layers, 8 classes."""
    return replace(ModelConfig(), **overrides) if overrides else ModelConfig()


def deit_small_config(**overrides) -> ModelConfig:
    cfg = ModelConfig(
        image_size=224, patch_size=16, channels=3, embed_dim=384,
        num_layers=12, num_heads=6, mlp_ratio=4, num_classes=1000,
    )
    return replace(cfg, **overrides) if overrides else cfg


@dataclass
class AttentionRecord:
    """Post-softmax (and post-zeroing, if masked) attention at one layer.

    probs has shape [B, H, T, T]; index a sample to get the per-image record.
    """

    layer: int
    probs: Tensor


@dataclass
class PrunePlan:
    """Externally supplied masks: apply from prune_layer + 1 onward."""

    masks: np.ndarray        # [T] shared or [B, T] per sample; 1 = keep
    prune_layer: int
    exec_mode: str = "masked"


@dataclass
class ForwardOutput:
    logits: Tensor
    records: list[AttentionRecord] = field(default_factory=list)
    kept_mask: np.ndarray | None = None   # [B, T]
    kept_counts: np.ndarray | None = None  # [B]
    densities: np.ndarray | None = None    # [B], kept / (N+1)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = config.embed_dim
    patch_in = config.channels * config.patch_size**2
    shapes: dict[str, tuple[int, ...]] = {
        "patch.weight": (patch_in, d),
        "patch.bias": (d,),
        "cls": (1, 1, d),
        "pos": (1, config.num_tokens, d),
    }
    for i in range(config.num_layers):
        pre = f"blocks.{i}."
        shapes[pre + "ln1.gamma"] = (d,)
        shapes[pre + "ln1.beta"] = (d,)
        shapes[pre + "qkv.weight"] = (d, 3 * d)
        shapes[pre + "qkv.bias"] = (3 * d,)
        shapes[pre + "proj.weight"] = (d, d)
        shapes[pre + "proj.bias"] = (d,)
        shapes[pre + "ln2.gamma"] = (d,)
        shapes[pre + "ln2.beta"] = (d,)
        shapes[pre + "fc1.weight"] = (d, config.mlp_ratio * d)
        shapes[pre + "fc1.bias"] = (config.mlp_ratio * d,)
        shapes[pre + "fc2.weight"] = (config.mlp_ratio * d, d)
        shapes[pre + "fc2.bias"] = (d,)
    shapes["norm.gamma"] = (d,)
    shapes["norm.beta"] = (d,)
    shapes["head.weight"] = (d, config.num_classes)
    shapes["head.bias"] = (config.num_classes,)
    return shapes


def init_params(config: ModelConfig, rng: Rng, dtype=np.float32, init_std: float = 0.02) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(("bias", "beta")):
            data = np.zeros(shape, dtype=dtype)
        elif name.endswith("gamma"):
            data = np.ones(shape, dtype=dtype)
        else:
            data = rng.normal(shape, std=init_std, dtype=dtype)
        params[name] = Tensor(data, requires_grad=True)
    return params


class VisionTransformer:
    def __init__(
        self,
        config: ModelConfig,
        rng: Rng | None = None,
        dtype=np.float32,
        params: dict[str, Tensor] | None = None,
    ):
        self.config = config
        self.dtype = np.dtype(dtype).type
        if params is not None:
            expected = param_shapes(config)
            for name, shape in expected.items():
                if name not in params or params[name].shape != shape:
                    raise DimensionError(f"parameter {name} missing or misshaped for config")
            self.params = params
        else:
            self.params = init_params(config, rng or Rng(0), dtype=self.dtype)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- forward ---------------------------------------------------------

    def __call__(self, images, **kwargs) -> ForwardOutput:
        return self.forward(images, **kwargs)

    def forward(
        self,
        images,
        prune: PruneConfig | PrunePlan | None = None,
        capture_layers: tuple[int, ...] = (),
        apply_sparsification: bool = True,
    ) -> ForwardOutput:
        """Run the network, optionally sparsifying tokens after the prune layer.

        prune may be a PruneConfig (masks planned from attention captured at
        the prune layer) or a PrunePlan (masks supplied by the caller). With
        apply_sparsification=False the plan is still computed and reported but
        execution stays dense (the dense half of alternating training).
        """
        cfg = self.config
        x = self._embed(images)
        batch = x.shape[0]
        t = cfg.num_tokens

        if prune is None or (isinstance(prune, PruneConfig) and prune.strategy == "none" and not capture_layers):
            x, records = self._run_layers(x, 0, cfg.num_layers, None, set(capture_layers))
            return ForwardOutput(logits=self._head(x), records=records)

        if isinstance(prune, PrunePlan):
            p_layer = prune.prune_layer
            exec_mode = prune.exec_mode
            masks = self._normalize_masks(prune.masks, batch, t)
            planning = False
        else:
            p_layer = prune.prune_layer
            exec_mode = prune.exec_mode
            masks = None
            planning = True
        if not 0 <= p_layer < cfg.num_layers:
            raise ContractError(f"prune_layer {p_layer} outside [0, {cfg.num_layers})")

        wanted = set(capture_layers)
        head_captures = wanted | ({p_layer} if planning else set())
        x, records = self._run_layers(x, 0, p_layer + 1, None, head_captures)

        densities = None
        if planning:
            # the record at the prune layer stays in the output: distillation
            # and density logging both read it
            rec = next(r for r in records if r.layer == p_layer)
            masks, densities = plan(rec.probs.data, prune)
        masks = self._normalize_masks(masks, batch, t)
        if densities is None:
            densities = masks.sum(axis=1) / t
        kept_counts = masks.sum(axis=1).astype(np.int64)

        if not apply_sparsification or bool(masks.all()):
            x, tail = self._run_layers(x, p_layer + 1, cfg.num_layers, None, wanted)
            records += tail
            return ForwardOutput(self._head(x), records, masks, kept_counts, densities)

        if exec_mode == "masked":
            x, tail = self._run_layers(x, p_layer + 1, cfg.num_layers, masks, wanted)
            records += tail
            return ForwardOutput(self._head(x), records, masks, kept_counts, densities)

        # compacted execution
        if np.all(masks == masks[0]):
            kept = np.flatnonzero(masks[0])
            xg = x[:, kept]
            xg, tail = self._run_layers(xg, p_layer + 1, cfg.num_layers, None, wanted)
            records += tail
            return ForwardOutput(self._head(xg), records, masks, kept_counts, densities)
        logits = self._compacted_buckets(x, masks, p_layer)
        return ForwardOutput(Tensor(logits), records, masks, kept_counts, densities)

    def plan_only(self, images, prune: PruneConfig) -> tuple[np.ndarray, np.ndarray]:
        """Masks and densities from the prune layer without running the tail.

        Cheap path for density statistics and mask visualization: embeds, runs
        layers 0..P, plans, and stops.
        """
        if not 0 <= prune.prune_layer < self.config.num_layers:
            raise ContractError(f"prune_layer {prune.prune_layer} outside [0, {self.config.num_layers})")
        with ag.no_grad():
            x = self._embed(images)
            x, records = self._run_layers(x, 0, prune.prune_layer + 1, None, {prune.prune_layer})
            return plan(records[-1].probs.data, prune)

    # -- pieces ------------------------------------------------------------

    def _embed(self, images) -> Tensor:
        cfg = self.config
        imgs = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        if imgs.ndim != 4 or imgs.shape[1] != cfg.channels or imgs.shape[2] != cfg.image_size or imgs.shape[3] != cfg.image_size:
            raise DimensionError(
                f"expected images [B, {cfg.channels}, {cfg.image_size}, {cfg.image_size}], got {imgs.shape}"
            )
        patches = ag.extract_patches(imgs, cfg.patch_size)
        x = ag.linear(patches, self.params["patch.weight"], self.params["patch.bias"])
        cls = ag.expand(self.params["cls"], (imgs.shape[0], 1, cfg.embed_dim))
        x = ag.concat([cls, x], axis=1)
        return x + self.params["pos"]

    def _normalize_masks(self, masks, batch: int, t: int) -> np.ndarray:
        if masks is None:
            raise ContractError("sparse execution requested without a token mask")
        m = np.asarray(masks)
        if m.ndim == 1:
            m = np.broadcast_to(m, (batch, t)).copy()
        if m.shape != (batch, t):
            raise DimensionError(f"mask shape {np.asarray(masks).shape} does not match batch {batch} x tokens {t}")
        if not np.all(m[:, 0] == 1):
            raise ContractError("CLS token (position 0) must never be pruned")
        return m.astype(np.uint8)

    def _run_layers(
        self,
        x: Tensor,
        start: int,
        end: int,
        masks: np.ndarray | None,
        capture: set[int],
    ) -> tuple[Tensor, list[AttentionRecord]]:
        records = []
        for i in range(start, end):
            x, probs = self._block(i, x, masks, i in capture)
            if probs is not None:
                records.append(AttentionRecord(layer=i, probs=probs))
        return x, records

    def _block(self, i: int, x: Tensor, masks: np.ndarray | None, capture: bool):
        p = self.params
        pre = f"blocks.{i}."
        cfg = self.config
        b, t, d = x.shape
        h_count, dh = cfg.num_heads, cfg.head_dim

        h = ag.layer_norm(x, p[pre + "ln1.gamma"], p[pre + "ln1.beta"])
        qkv = ag.linear(h, p[pre + "qkv.weight"], p[pre + "qkv.bias"])
        q = qkv[..., :d].reshape(b, t, h_count, dh).transpose(0, 2, 1, 3)
        k = qkv[..., d:2 * d].reshape(b, t, h_count, dh).transpose(0, 2, 1, 3)
        v = qkv[..., 2 * d:].reshape(b, t, h_count, dh).transpose(0, 2, 1, 3)

        scores = ag.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        if masks is not None:
            col_keep = masks[:, None, None, :].astype(bool)
            scores = ag.where(col_keep, scores, np.asarray(PRUNE_SENTINEL, dtype=scores.dtype))
            probs = ag.softmax(scores, axis=-1)
            row_keep = Tensor(masks[:, None, :, None].astype(probs.dtype))
            probs = probs * row_keep
        else:
            probs = ag.softmax(scores, axis=-1)

        ctx = ag.matmul(probs, v).transpose(0, 2, 1, 3).reshape(b, t, d)
        x = x + ag.linear(ctx, p[pre + "proj.weight"], p[pre + "proj.bias"])

        h2 = ag.layer_norm(x, p[pre + "ln2.gamma"], p[pre + "ln2.beta"])
        mid = ag.gelu(ag.linear(h2, p[pre + "fc1.weight"], p[pre + "fc1.bias"]))
        x = x + ag.linear(mid, p[pre + "fc2.weight"], p[pre + "fc2.bias"])
        return x, (probs if capture else None)

    def _head(self, x: Tensor) -> Tensor:
        xn = ag.layer_norm(x, self.params["norm.gamma"], self.params["norm.beta"])
        cls = xn[:, 0]
        return ag.linear(cls, self.params["head.weight"], self.params["head.bias"])

    def _compacted_buckets(self, x: Tensor, masks: np.ndarray, p_layer: int) -> np.ndarray:
        """Per-sample compaction, bucketed by kept count. Inference only."""
        cfg = self.config
        counts = masks.sum(axis=1)
        logits = np.empty((x.shape[0], cfg.num_classes), dtype=x.data.dtype)
        with ag.no_grad():
            for count in np.unique(counts):
                rows = np.flatnonzero(counts == count)
                idx = np.stack([np.flatnonzero(masks[r]) for r in rows])
                xb = ag.take_tokens(x[rows.tolist()], idx)
                xb, _ = self._run_layers(xb, p_layer + 1, cfg.num_layers, None, set())
                logits[rows] = self._head(xb).data
        return logits
