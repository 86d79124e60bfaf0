"""Minimal MLP trainer with interchangeable dropout strategies.

One weight layer is h = relu(W a + b); the final layer is softmax with
cross-entropy loss. Dropout applies to hidden layers only, in one of four
modes:

* none: plain dense training.
* conventional: per-unit, per-sample Bernoulli mask after the activation,
  scaled by 1/(1-rate) while training.
* row: a sampled periodic pattern drops whole rows of W. Kept rows are
  computed with the row-skipping kernel, the bias is added to kept rows
  only, and kept outputs are scaled by the sampled period.
* tile: the pattern drops fixed-size tiles of W. The skipped product is
  scaled by the period before the (unscaled) bias is added.

With rescaling on, every mode preserves the dense pre-activation in
expectation over the sampling distribution. Dropped positions receive
exactly zero gradient, and multiply-accumulate work is counted per layer
for both the forward and backward passes.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from . import patterns
from .distsearch import PatternDistribution, to_json_dict as distribution_to_json
from .gemm import LayerCounters, dense_gemm, row_skip_gemm, tile_skip_gemm
from .patterns import DEFAULT_TILE_SHAPE, MaskGeometry, PatternKind, kept_tile_indices, tile_bounds
from .report import RunReport
from .sampler import GENERATOR_ID, RngState, SampledPattern, sample_pattern


class DropoutMode(str, Enum):
    NONE = "none"
    CONVENTIONAL = "conventional"
    ROW = "row"
    TILE = "tile"


STRUCTURED_MODES = (DropoutMode.ROW, DropoutMode.TILE)

# rng stream ids; keep stable so runs replay bit-for-bit
STREAM_INIT = 0
STREAM_SHUFFLE = 1
STREAM_MASKS = 2
STREAM_PATTERN_BASE = 10


class DivergenceError(RuntimeError):
    """Loss left the finite range during training."""

    def __init__(self, iteration: int, loss: float):
        super().__init__(f"non-finite loss {loss} at iteration {iteration}")
        self.iteration = iteration
        self.loss = loss


@dataclass
class TrainConfig:
    layer_sizes: list[int]
    epochs: int = 5
    batch_size: int = 128
    learning_rate: float = 0.01
    momentum: float = 0.9
    mode: DropoutMode = DropoutMode.NONE
    rate: float = 0.0
    rescale: bool = True
    tile_shape: tuple[int, int] = DEFAULT_TILE_SHAPE
    distribution: PatternDistribution | None = None
    seed: int = 0

    def __post_init__(self):
        if len(self.layer_sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if any(s < 1 for s in self.layer_sizes):
            raise ValueError("layer sizes must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.mode == DropoutMode.CONVENTIONAL and not 0.0 <= self.rate < 1.0:
            raise ValueError(f"conventional rate {self.rate} outside [0, 1)")
        if self.mode in STRUCTURED_MODES and self.distribution is None:
            raise ValueError(f"mode {self.mode.value} needs a pattern distribution")


@dataclass
class DropoutContext:
    """Concrete dropout decisions for one forward/backward pass.

    Training samples a fresh context per iteration; gradient tests can pin
    one and differentiate through it. pattern_scale is the inverted-dropout
    factor for structured modes: the reciprocal marginal keep rate
    1/(1 - p_g) of the sampling distribution. A constant factor keeps the
    ensemble expectation of the pre-activation equal to the dense
    pre-activation for every unit while bounding the per-draw amplification
    (scaling by the sampled period instead destabilizes small nets).
    """

    mode: DropoutMode
    rate: float = 0.0
    rescale: bool = True
    pattern_scale: float = 1.0
    tile_shape: tuple[int, int] = DEFAULT_TILE_SHAPE
    patterns: list[SampledPattern] | None = None
    masks: list[np.ndarray] | None = None


def inference_context() -> DropoutContext:
    return DropoutContext(mode=DropoutMode.NONE)


def glorot_uniform_params(sizes: list[int], seed: int, dtype=np.float32):
    """Weight matrices (out, in) and zero biases, drawn from the init stream."""
    rng = RngState(seed, stream=STREAM_INIT)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        u = rng.uniforms(fan_out * fan_in).reshape(fan_out, fan_in)
        weights.append(((u * 2.0 - 1.0) * limit).astype(dtype))
        biases.append(np.zeros((fan_out, 1), dtype=dtype))
    return weights, biases


def _onehot(labels: np.ndarray, classes: int, dtype) -> np.ndarray:
    out = np.zeros((classes, len(labels)), dtype=dtype)
    out[labels, np.arange(len(labels))] = 1
    return out


class MlpModel:
    """Fully connected net; activations are column-major (features, batch)."""

    def __init__(self, sizes: list[int], weights: list[np.ndarray], biases: list[np.ndarray]):
        self.sizes = list(sizes)
        self.weights = weights
        self.biases = biases

    @classmethod
    def initialize(cls, sizes: list[int], seed: int, dtype=np.float32) -> "MlpModel":
        w, b = glorot_uniform_params(sizes, seed, dtype)
        return cls(sizes, w, b)

    @property
    def dtype(self):
        return self.weights[0].dtype

    @property
    def layer_count(self) -> int:
        return len(self.weights)

    @property
    def hidden_layer_count(self) -> int:
        return len(self.weights) - 1

    def forward_train(self, x: np.ndarray, ctx: DropoutContext, counters: LayerCounters | None = None):
        """Activations plus per-layer caches needed by the backward pass."""
        caches = []
        a = x
        last = self.layer_count - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            ctr = counters.layer(l) if counters is not None else None
            cache = {"a_in": a}
            if l == last:
                z = dense_gemm(w, a, ctr) + b
                z -= z.max(axis=0, keepdims=True)
                ez = np.exp(z)
                probs = ez / ez.sum(axis=0, keepdims=True)
                cache["probs"] = probs
                a = probs
            elif ctx.mode == DropoutMode.ROW and ctx.patterns is not None:
                sampled = ctx.patterns[l]
                pat = sampled.pattern
                kept = patterns.kept_row_indices(MaskGeometry(w.shape[0], w.shape[1]), pat)
                z = row_skip_gemm(w, a, pat, ctr)
                z[kept] += b[kept]
                h = np.maximum(z, 0)
                scale = ctx.pattern_scale if ctx.rescale else 1.0
                if scale != 1.0:
                    h[kept] *= self.dtype.type(scale)
                cache.update(z=z, kept=kept, pattern=pat)
                a = h
            elif ctx.mode == DropoutMode.TILE and ctx.patterns is not None:
                sampled = ctx.patterns[l]
                pat = sampled.pattern
                z = tile_skip_gemm(w, a, pat, ctr)
                scale = ctx.pattern_scale if ctx.rescale else 1.0
                if scale != 1.0:
                    z *= self.dtype.type(scale)
                z += b
                h = np.maximum(z, 0)
                cache.update(z=z, pattern=pat)
                a = h
            else:
                z = dense_gemm(w, a, ctr) + b
                h = np.maximum(z, 0)
                if ctx.mode == DropoutMode.CONVENTIONAL and ctx.masks is not None:
                    scale = 1.0 / (1.0 - ctx.rate) if ctx.rescale else 1.0
                    scaled_mask = ctx.masks[l].astype(self.dtype) * self.dtype.type(scale)
                    h = h * scaled_mask
                    cache["scaled_mask"] = scaled_mask
                cache["z"] = z
                a = h
            cache["out"] = a
            caches.append(cache)
        return caches

    def loss_and_grads(self, x: np.ndarray, labels: np.ndarray, ctx: DropoutContext,
                       fwd_counters: LayerCounters | None = None,
                       bwd_counters: LayerCounters | None = None):
        """Mean cross-entropy and parameter gradients for one batch."""
        caches = self.forward_train(x, ctx, fwd_counters)
        probs = caches[-1]["probs"]
        batch = x.shape[1]
        picked = probs[labels, np.arange(batch)]
        loss = float(-np.log(np.clip(picked, 1e-30, None)).mean())

        grads_w = [None] * self.layer_count
        grads_b = [None] * self.layer_count
        delta = (probs - _onehot(labels, self.sizes[-1], probs.dtype)) / probs.dtype.type(batch)

        da = None
        for l in range(self.layer_count - 1, -1, -1):
            w = self.weights[l]
            cache = caches[l]
            a_in = cache["a_in"]
            ctr = bwd_counters.layer(l) if bwd_counters is not None else None
            m, k = w.shape

            if l == self.layer_count - 1:
                grads_w[l] = np.dot(delta, a_in.T)
                grads_b[l] = delta.sum(axis=1, keepdims=True)
                if l > 0:
                    da = np.dot(w.T, delta)
                if ctr is not None:
                    macs = m * k * batch * (2 if l > 0 else 1)
                    ctr.add(macs, macs * w.itemsize)
                continue

            pat = cache.get("pattern")
            if pat is not None and pat.kind == PatternKind.ROW:
                kept = cache["kept"]
                scale = self.dtype.type(ctx.pattern_scale if ctx.rescale else 1.0)
                dz_kept = da[kept] * (cache["z"][kept] > 0) * scale
                gw = np.zeros_like(w)
                gb = np.zeros_like(self.biases[l])
                if len(kept):
                    gw[kept] = np.dot(dz_kept, a_in.T)
                    gb[kept] = dz_kept.sum(axis=1, keepdims=True)
                grads_w[l], grads_b[l] = gw, gb
                if l > 0:
                    da = np.dot(w[kept].T, dz_kept) if len(kept) else np.zeros((k, batch), dtype=self.dtype)
                if ctr is not None:
                    macs = len(kept) * k * batch * (2 if l > 0 else 1)
                    ctr.add(macs, macs * w.itemsize)
            elif pat is not None and pat.kind == PatternKind.TILE:
                scale = self.dtype.type(ctx.pattern_scale if ctx.rescale else 1.0)
                delta_h = da * (cache["z"] > 0)
                dz = delta_h * scale
                gw = np.zeros_like(w)
                gb = delta_h.sum(axis=1, keepdims=True)
                da_next = np.zeros((k, batch), dtype=self.dtype) if l > 0 else None
                geom = MaskGeometry(m, k)
                kept_elems = 0
                for tile_id in kept_tile_indices(geom, pat):
                    r0, r1, c0, c1 = tile_bounds(geom, pat, tile_id)
                    gw[r0:r1, c0:c1] = np.dot(dz[r0:r1], a_in[c0:c1].T)
                    if da_next is not None:
                        da_next[c0:c1] += np.dot(w[r0:r1, c0:c1].T, dz[r0:r1])
                    kept_elems += (r1 - r0) * (c1 - c0)
                grads_w[l], grads_b[l] = gw, gb
                if l > 0:
                    da = da_next
                if ctr is not None:
                    macs = kept_elems * batch * (2 if l > 0 else 1)
                    ctr.add(macs, macs * w.itemsize)
            else:
                da_post = da
                if "scaled_mask" in cache:
                    da_post = da * cache["scaled_mask"]
                dz = da_post * (cache["z"] > 0)
                grads_w[l] = np.dot(dz, a_in.T)
                grads_b[l] = dz.sum(axis=1, keepdims=True)
                if l > 0:
                    da = np.dot(w.T, dz)
                if ctr is not None:
                    macs = m * k * batch * (2 if l > 0 else 1)
                    ctr.add(macs, macs * w.itemsize)
        return loss, grads_w, grads_b

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Class indices from a dense forward pass (no dropout)."""
        a = x
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = np.dot(w, a) + b
            a = z if l == self.layer_count - 1 else np.maximum(z, 0)
        return np.argmax(a, axis=0)


def save_checkpoint(model: MlpModel, path: str | Path) -> None:
    """JSON checkpoint; float32 values survive the round trip exactly."""
    payload = {
        "schema_version": 1,
        "sizes": model.sizes,
        "dtype": model.dtype.name,
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
    }
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path: str | Path) -> MlpModel:
    payload = json.loads(Path(path).read_text())
    dtype = np.dtype(payload["dtype"])
    weights = [np.array(w, dtype=dtype) for w in payload["weights"]]
    biases = [np.array(b, dtype=dtype) for b in payload["biases"]]
    return MlpModel(payload["sizes"], weights, biases)


def accuracy(model: MlpModel, images: np.ndarray, labels: np.ndarray, batch_size: int = 512) -> float:
    hits = 0
    for start in range(0, len(images), batch_size):
        x = np.ascontiguousarray(images[start:start + batch_size].T, dtype=model.dtype)
        hits += int((model.predict(x) == labels[start:start + batch_size]).sum())
    return hits / len(images)


def _sample_context(cfg: TrainConfig, model: MlpModel, pattern_rngs, mask_rng, iteration: int,
                    batch: int) -> DropoutContext:
    ctx = DropoutContext(mode=cfg.mode, rate=cfg.rate, rescale=cfg.rescale, tile_shape=cfg.tile_shape)
    if cfg.mode in STRUCTURED_MODES:
        kind = PatternKind.ROW if cfg.mode == DropoutMode.ROW else PatternKind.TILE
        ctx.pattern_scale = 1.0 / (1.0 - cfg.distribution.achieved_rate)
        ctx.patterns = [
            sample_pattern(cfg.distribution, kind, pattern_rngs[l], cfg.tile_shape,
                           iteration=iteration, layer_id=l)
            for l in range(model.hidden_layer_count)
        ]
    elif cfg.mode == DropoutMode.CONVENTIONAL:
        ctx.masks = [
            mask_rng.uniforms(model.sizes[l + 1] * batch).reshape(model.sizes[l + 1], batch) >= cfg.rate
            for l in range(model.hidden_layer_count)
        ]
    return ctx


def _check_pattern_capacity(cfg: TrainConfig) -> None:
    if cfg.mode not in STRUCTURED_MODES or cfg.distribution is None:
        return
    kind = PatternKind.ROW if cfg.mode == DropoutMode.ROW else PatternKind.TILE
    for l in range(len(cfg.layer_sizes) - 2):
        geom = MaskGeometry(cfg.layer_sizes[l + 1], cfg.layer_sizes[l])
        cap = patterns.max_period(geom, kind, cfg.tile_shape)
        if cfg.distribution.max_period > cap:
            raise ValueError(
                f"distribution period {cfg.distribution.max_period} exceeds capacity {cap} "
                f"for hidden layer {l} ({geom.rows}x{geom.cols} {kind.value})"
            )


def train(cfg: TrainConfig, train_images: np.ndarray, train_labels: np.ndarray,
          test_images: np.ndarray, test_labels: np.ndarray) -> tuple[MlpModel, RunReport]:
    """SGD with momentum over shuffled minibatches; returns the model and a report.

    All stochastic choices come from counter-based streams keyed by the
    seed, so identical inputs replay identical runs. Raises
    DivergenceError as soon as the training loss goes non-finite.
    """
    _check_pattern_capacity(cfg)
    start_time = time.perf_counter()
    model = MlpModel.initialize(cfg.layer_sizes, cfg.seed)
    vel_w = [np.zeros_like(w) for w in model.weights]
    vel_b = [np.zeros_like(b) for b in model.biases]

    shuffle_rng = RngState(cfg.seed, stream=STREAM_SHUFFLE)
    mask_rng = RngState(cfg.seed, stream=STREAM_MASKS)
    pattern_rngs = [RngState(cfg.seed, stream=STREAM_PATTERN_BASE + l)
                    for l in range(model.hidden_layer_count)]

    fwd = LayerCounters()
    bwd = LayerCounters()
    hist: list[dict[int, int]] = [{} for _ in range(model.hidden_layer_count)]
    dense_fwd = [0] * model.layer_count
    dense_bwd = [0] * model.layer_count

    n = len(train_images)
    epoch_test_acc: list[float] = []
    iteration = 0
    for _ in range(cfg.epochs):
        order = np.argsort(shuffle_rng.uniforms(n), kind="stable")
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = np.ascontiguousarray(train_images[idx].T, dtype=model.dtype)
            y = train_labels[idx]
            batch = len(idx)

            ctx = _sample_context(cfg, model, pattern_rngs, mask_rng, iteration, batch)
            if ctx.patterns is not None:
                for l, sp in enumerate(ctx.patterns):
                    hist[l][sp.pattern.period] = hist[l].get(sp.pattern.period, 0) + 1

            # a diverging run hits inf/nan mid-forward; the loss check below
            # is the reporting path, so numpy's warnings are just noise here
            with np.errstate(over="ignore", invalid="ignore"):
                loss, gw, gb = model.loss_and_grads(x, y, ctx, fwd, bwd)
            if not math.isfinite(loss):
                raise DivergenceError(iteration, loss)
            for l in range(model.layer_count):
                m, k = model.weights[l].shape
                dense_fwd[l] += m * k * batch
                dense_bwd[l] += m * k * batch * (2 if l > 0 else 1)
                vel_w[l] = cfg.momentum * vel_w[l] - cfg.learning_rate * gw[l]
                vel_b[l] = cfg.momentum * vel_b[l] - cfg.learning_rate * gb[l]
                model.weights[l] += vel_w[l]
                model.biases[l] += vel_b[l]
            iteration += 1
        epoch_test_acc.append(accuracy(model, test_images, test_labels))

    hidden = range(model.hidden_layer_count)
    fwd_macs = [fwd.layer(l).macs for l in range(model.layer_count)]
    bwd_macs = [bwd.layer(l).macs for l in range(model.layer_count)]
    hidden_actual = sum(fwd_macs[l] + bwd_macs[l] for l in hidden)
    hidden_dense = sum(dense_fwd[l] + dense_bwd[l] for l in hidden)
    out_l = model.layer_count - 1
    macs = {
        "hidden_forward": sum(fwd_macs[l] for l in hidden),
        "hidden_backward": sum(bwd_macs[l] for l in hidden),
        "hidden": hidden_actual,
        "output": fwd_macs[out_l] + bwd_macs[out_l],
        "total": hidden_actual + fwd_macs[out_l] + bwd_macs[out_l],
        "dense_hidden_forward": sum(dense_fwd[l] for l in hidden),
        "dense_hidden_backward": sum(dense_bwd[l] for l in hidden),
        "dense_hidden": hidden_dense,
        "dense_output": dense_fwd[out_l] + dense_bwd[out_l],
        "dense_total": hidden_dense + dense_fwd[out_l] + dense_bwd[out_l],
    }
    bytes_fetched = {
        "hidden": sum(fwd.layer(l).bytes_fetched + bwd.layer(l).bytes_fetched for l in hidden),
        "output": fwd.layer(out_l).bytes_fetched + bwd.layer(out_l).bytes_fetched,
    }
    bytes_fetched["total"] = bytes_fetched["hidden"] + bytes_fetched["output"]

    config_echo = {
        "layer_sizes": list(cfg.layer_sizes),
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "learning_rate": cfg.learning_rate,
        "momentum": cfg.momentum,
        "mode": cfg.mode.value,
        "rate": cfg.rate,
        "rescale": cfg.rescale,
        "tile_shape": list(cfg.tile_shape),
        "seed": cfg.seed,
        "n_train": n,
        "n_test": len(test_images),
        "dtype": str(model.dtype),
    }
    if cfg.distribution is not None:
        config_echo["distribution"] = distribution_to_json(cfg.distribution)

    report = RunReport(
        mode=cfg.mode.value,
        seed=cfg.seed,
        config=config_echo,
        generator=GENERATOR_ID,
        epoch_test_acc=epoch_test_acc,
        final_test_acc=epoch_test_acc[-1] if epoch_test_acc else 0.0,
        final_train_acc=accuracy(model, train_images, train_labels),
        macs=macs,
        bytes_fetched=bytes_fetched,
        mac_ratio_hidden=hidden_actual / hidden_dense if hidden_dense else 1.0,
        wall_clock_s=time.perf_counter() - start_time,
        pattern_histogram={f"layer_{l}": {str(p): c for p, c in sorted(hist[l].items())}
                           for l in range(model.hidden_layer_count)},
    )
    return model, report
