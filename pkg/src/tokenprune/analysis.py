"""Analytic FLOP accounting, density statistics, sensitivity sweeps, and
wall-clock throughput benchmarking.

FLOP convention: one multiply-accumulate counts as one FLOP, the convention
under which a 12-layer, 384-dim, 197-token model comes out at 4.6 GFLOPs.
Token scoring and selection cost is counted as zero: it is O(H*T^2) additions
at a single layer, under 0.1% of the total.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ContractError, DimensionError
from .model import ModelConfig, VisionTransformer
from .sparsify import PruneConfig, round_half_up
from .training import evaluate

FLOP_CONVENTION = "1 multiply-accumulate = 1 FLOP"


@dataclass(frozen=True)
class FlopReport:
    patch_embed: int
    attention: tuple[int, ...]      # per layer
    mlp: tuple[int, ...]            # per layer
    head: int
    tokens_per_layer: tuple[int, ...]
    convention: str = FLOP_CONVENTION

    @property
    def total(self) -> int:
        return self.patch_embed + sum(self.attention) + sum(self.mlp) + self.head

    def reduction_vs(self, dense: "FlopReport") -> float:
        """Percentage of FLOPs saved relative to a dense report."""
        return 100.0 * (1.0 - self.total / dense.total)

    def table(self) -> str:
        lines = [
            f"convention: {self.convention}",
            f"{'component':<14} {'tokens':>7} {'flops':>15}",
            f"{'patch_embed':<14} {'-':>7} {self.patch_embed:>15,}",
        ]
        for i, (a, m, t) in enumerate(zip(self.attention, self.mlp, self.tokens_per_layer)):
            lines.append(f"{'layer %02d attn' % i:<14} {t:>7} {a:>15,}")
            lines.append(f"{'layer %02d mlp' % i:<14} {t:>7} {m:>15,}")
        lines.append(f"{'head':<14} {'-':>7} {self.head:>15,}")
        lines.append(f"{'total':<14} {'-':>7} {self.total:>15,}")
        return "\n".join(lines)

    def csv(self) -> str:
        rows = ["component,layer,tokens,flops"]
        rows.append(f"patch_embed,,,{self.patch_embed}")
        for i, (a, m, t) in enumerate(zip(self.attention, self.mlp, self.tokens_per_layer)):
            rows.append(f"attention,{i},{t},{a}")
            rows.append(f"mlp,{i},{t},{m}")
        rows.append(f"head,,,{self.head}")
        rows.append(f"total,,,{self.total}")
        return "\n".join(rows) + "\n"


def flops(config: ModelConfig, tokens_per_layer: Sequence[int]) -> FlopReport:
    """Exact MAC counts for a forward pass with the given per-layer token counts.

    Per layer with T_l tokens: attention = 4*T_l*d^2 + 2*T_l^2*d (QKV + output
    projections, score and context products), MLP = 2*mlp_ratio*T_l*d^2.
    """
    t_full = config.num_tokens
    counts = [int(t) for t in tokens_per_layer]
    if len(counts) != config.num_layers:
        raise DimensionError(f"need {config.num_layers} per-layer token counts, got {len(counts)}")
    if any(t < 1 or t > t_full for t in counts):
        raise ContractError(f"token counts must lie in [1, {t_full}]")
    d = config.embed_dim
    attn = tuple(4 * t * d * d + 2 * t * t * d for t in counts)
    mlp = tuple(2 * config.mlp_ratio * t * d * d for t in counts)
    patch = config.num_patches * (config.channels * config.patch_size**2) * d
    head = d * config.num_classes
    return FlopReport(
        patch_embed=patch, attention=attn, mlp=mlp, head=head,
        tokens_per_layer=tuple(counts),
    )


def dense_schedule(config: ModelConfig) -> list[int]:
    return [config.num_tokens] * config.num_layers


def uniform_schedule(config: ModelConfig, prune_layer: int, density: float) -> list[int]:
    """Per-layer token counts for uniform post-prune density: layers before
    ``prune_layer`` run all T tokens, layers from it onward run
    round(density * T) (half-up, clamped to [1, T])."""
    if not 0 <= prune_layer < config.num_layers:
        raise ContractError(f"prune_layer {prune_layer} outside [0, {config.num_layers})")
    t_full = config.num_tokens
    t_sparse = min(max(round_half_up(density * t_full), 1), t_full)
    return [t_full] * prune_layer + [t_sparse] * (config.num_layers - prune_layer)


def execution_schedule(config: ModelConfig, prune_layer: int, kept_tokens: int) -> list[int]:
    """Per-layer counts as the network actually executes a mask: the prune
    layer itself still runs dense (its attention feeds the scores); layers
    after it run on the kept tokens."""
    t_full = config.num_tokens
    return [t_full] * (prune_layer + 1) + [int(kept_tokens)] * (config.num_layers - prune_layer - 1)


# -- density statistics --------------------------------------------------


@dataclass
class DensityStats:
    densities: np.ndarray
    hist_counts: np.ndarray
    hist_edges: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.densities.mean())

    @property
    def std(self) -> float:
        return float(self.densities.std())

    def csv(self) -> str:
        out = ["sample,density"]
        out += [f"{i},{d:.6f}" for i, d in enumerate(self.densities)]
        return "\n".join(out) + "\n"


def density_stats(
    model: VisionTransformer,
    images: np.ndarray,
    prune: PruneConfig,
    batch_size: int = 256,
    bins: int = 10,
) -> DensityStats:
    """Per-sample kept-token densities over a dataset (plan only, no tail)."""
    if prune.strategy == "none":
        raise ContractError("density_stats needs an active value or mass strategy")
    dens = []
    for start in range(0, images.shape[0], batch_size):
        _, d = model.plan_only(images[start:start + batch_size], prune)
        dens.append(np.atleast_1d(d))
    densities = np.concatenate(dens)
    counts, edges = np.histogram(densities, bins=bins, range=(0.0, 1.0))
    return DensityStats(densities=densities, hist_counts=counts, hist_edges=edges)


# -- sensitivity sweep -----------------------------------------------------


@dataclass(frozen=True)
class SweepCell:
    prune_layer: int
    threshold: float     # mass threshold or target density, per strategy
    accuracy: float
    mean_density: float
    flops_exact: int     # mean per-sample from actual execution schedules
    flops_mean_density: int


@dataclass
class SweepResult:
    strategy: str
    cells: list[SweepCell] = field(default_factory=list)

    def csv(self) -> str:
        rows = ["prune_layer,threshold,accuracy,mean_density,flops_exact,flops_mean_density"]
        for c in self.cells:
            rows.append(
                f"{c.prune_layer},{c.threshold:.4f},{c.accuracy:.6f},"
                f"{c.mean_density:.6f},{c.flops_exact},{c.flops_mean_density}"
            )
        return "\n".join(rows) + "\n"

    def cell(self, prune_layer: int, threshold: float) -> SweepCell:
        for c in self.cells:
            if c.prune_layer == prune_layer and abs(c.threshold - threshold) < 1e-9:
                return c
        raise KeyError((prune_layer, threshold))


def sensitivity_sweep(
    model: VisionTransformer,
    images: np.ndarray,
    labels: np.ndarray,
    prune_layers: Sequence[int],
    thresholds: Sequence[float],
    strategy: str = "mass",
    exec_mode: str = "masked",
    score_kind: str = "column_sum",
    batch_size: int = 256,
) -> SweepResult:
    """Accuracy/density/FLOPs over a (prune layer x threshold) grid, no retraining."""
    cfg = model.config
    result = SweepResult(strategy=strategy)
    for p in prune_layers:
        for th in thresholds:
            if strategy == "mass":
                pc = PruneConfig(strategy="mass", mass_threshold=th, prune_layer=p,
                                 exec_mode=exec_mode, score_kind=score_kind)
            else:
                pc = PruneConfig(strategy="value", density=th, prune_layer=p,
                                 exec_mode=exec_mode, score_kind=score_kind)
            acc, mean_density = evaluate(model, images, labels, prune=pc, batch_size=batch_size)
            kept_mean = mean_density * cfg.num_tokens
            per_sample = flops(cfg, execution_schedule(cfg, p, round(kept_mean))).total
            from_mean = flops(cfg, uniform_schedule(cfg, p + 1, mean_density)).total
            result.cells.append(SweepCell(
                prune_layer=p, threshold=float(th), accuracy=acc,
                mean_density=mean_density, flops_exact=per_sample,
                flops_mean_density=from_mean,
            ))
    return result


# -- throughput --------------------------------------------------------------


@dataclass(frozen=True)
class ThroughputStat:
    median: float
    mean: float
    std: float

    def __str__(self):
        return f"{self.median:.2f} im/s (mean {self.mean:.2f} +/- {self.std:.2f})"


@dataclass
class BenchmarkResult:
    batch_size: int
    repetitions: int
    stats: dict[str, ThroughputStat]

    def speedup(self, mode: str, over: str = "dense") -> float:
        return self.stats[mode].median / self.stats[over].median


def benchmark(
    model: VisionTransformer,
    prune: PruneConfig,
    batch_size: int = 4,
    repetitions: int = 20,
    warmup: int = 3,
    rng_seed: int = 0,
) -> BenchmarkResult:
    """Median-of-runs images/second for the dense, masked, and compacted paths.

    Wall clock on CPU; absolute numbers are machine-dependent, orderings and
    ratios are the meaningful output. Warmup runs are excluded.
    """
    from .rng import Rng

    cfg = model.config
    images = Rng(rng_seed).normal(
        (batch_size, cfg.channels, cfg.image_size, cfg.image_size), std=1.0, dtype=model.dtype
    )
    modes = {
        "dense": None,
        "masked": replace(prune, exec_mode="masked"),
        "compacted": replace(prune, exec_mode="compacted"),
    }
    from .autograd import no_grad

    stats = {}
    for name, pc in modes.items():
        times = []
        for rep in range(warmup + repetitions):
            t0 = time.perf_counter()
            with no_grad():
                model.forward(images, prune=pc)
            dt = time.perf_counter() - t0
            if rep >= warmup:
                times.append(dt)
        arr = np.asarray(times)
        stats[name] = ThroughputStat(
            median=batch_size / float(np.median(arr)),
            mean=float((batch_size / arr).mean()),
            std=float((batch_size / arr).std()),
        )
    return BenchmarkResult(batch_size=batch_size, repetitions=repetitions, stats=stats)
