"""Training loop, metrics, checkpoints, ablations and sensitivity sweeps."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import prompt as prompt_lib
from .data import (
    NumericWindow,
    SyntheticDataset,
    chronological_split,
    count_windows,
    fit_normalizer,
    NormalizationStats,
)
from .graph import GraphError, build_graph
from .model import AblationFlags, ModelConfig, SolarVLM
from .providers import FileProvider, StubImageProvider, StubTextProvider

logger = logging.getLogger(__name__)

ABLATION_SETTINGS = [
    ("Full", AblationFlags()),
    ("Time-Series Encoder Only", AblationFlags(ts_only=True)),
    ("Without Text Encoder", AblationFlags(no_text=True)),
    ("Without Visual Encoder", AblationFlags(no_visual=True)),
    ("Without Graph Learner", AblationFlags(no_graph=True)),
    ("Without Cross-Site Attention", AblationFlags(no_cross_site=True)),
]

SWEEP_GRIDS = {
    "history_length": [12, 24, 48, 96, 192, 288, 384],
    "patch_length": [4, 8, 10, 12, 16, 18, 20, 24],
    "num_images": [2, 4, 6, 8, 10, 12, 14, 16],
    "knn_k": [1, 2, 3, 4, 5, 6, 7],
}
SWEEP_FIELDS = {
    "history_length": "seq_len",
    "patch_length": "patch_len",
    "num_images": "num_images",
    "knn_k": "knn_k",
}


class NumericalDivergence(RuntimeError):
    def __init__(self, batch_index, epoch, loss):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch_index}")
        self.batch_index = batch_index
        self.epoch = epoch


@dataclass
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 1e-4
    epochs: int = 50
    seed: int = 0
    horizon: int = 48
    window_stride: int = 1
    max_steps: int = 0  # 0 = no cap
    grad_clip: float = 5.0  # 0 disables clipping
    shuffle: bool = True
    split_ratios: tuple = (0.7, 0.1, 0.2)

    def __post_init__(self):
        bad = [
            k
            for k in ("batch_size", "window_stride", "horizon")
            if not isinstance(getattr(self, k), int) or getattr(self, k) < 1
        ]
        if self.learning_rate < 0:
            bad.append("learning_rate")
        if self.epochs < 0:
            bad.append("epochs")
        if bad:
            raise ValueError(f"invalid training settings: {', '.join(bad)}")
        self.split_ratios = tuple(self.split_ratios)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def regression_metrics(pred, true):
    """Return ``(mse, mae, r2)``; ``r2`` is ``None`` when the target has zero variance."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    true = np.asarray(true, dtype=np.float64).ravel()
    err = pred - true
    mse = float(np.mean(err**2))
    mae = float(np.mean(np.abs(err)))
    ss_tot = float(np.sum((true - true.mean()) ** 2))
    if ss_tot == 0.0:
        warnings.warn("target has zero variance; R^2 is undefined", RuntimeWarning, stacklevel=2)
        return mse, mae, None
    return mse, mae, 1.0 - float(np.sum(err**2)) / ss_tot


@dataclass
class MetricReport:
    mse: float
    mae: float
    r2: float | None
    per_site: list  # [M, 3]
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_predictions(cls, pred, true, **metadata):
        """``pred``/``true`` are ``[N, M, T]`` arrays."""
        mse, mae, r2 = regression_metrics(pred, true)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            per_site = [list(regression_metrics(pred[:, i], true[:, i])) for i in range(pred.shape[1])]
        return cls(mse, mae, r2, per_site, dict(metadata))

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# Data preparation
# ---------------------------------------------------------------------------


def config_hash(*parts) -> str:
    blob = json.dumps([p if isinstance(p, dict) else asdict(p) for p in parts], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def make_providers(cfg: ModelConfig, seed: int):
    if cfg.provider == "stub":
        return StubTextProvider(cfg.d_text, seed + 101), StubImageProvider(cfg.d_v, seed + 202)
    if cfg.provider == "file":
        text, image = FileProvider(cfg.text_embeddings), FileProvider(cfg.image_embeddings)
        for p, want, name in ((text, cfg.d_text, "d_text"), (image, cfg.d_v, "d_v")):
            if p.dim != want:
                raise ValueError(f"{p.path}: embedding dimension {p.dim} does not match {name}={want}")
        return text, image
    raise ValueError(f"unknown provider {cfg.provider!r}")


@dataclass
class PreparedData:
    """Normalized tensors plus window indices and frozen embeddings for one run."""

    dataset: SyntheticDataset
    stats: NormalizationStats
    bins: prompt_lib.BinEdges
    x: torch.Tensor  # [M, steps, D] normalized
    starts: dict  # split -> np.ndarray of window start steps
    seq_len: int
    horizon: int
    num_images: int
    power_index: int
    text: dict  # split -> tensor [n, M, d_text] or None
    images: torch.Tensor | None  # [M, steps, d_v]
    providers: tuple

    def num_windows(self, split):
        return len(self.starts[split])

    def batch(self, split, idx):
        s = torch.as_tensor(self.starts[split][idx], dtype=torch.long)
        L, T = self.seq_len, self.horizon
        steps = s[:, None] + torch.arange(L)[None, :]  # [B, L]
        x = self.x[:, steps].permute(1, 0, 2, 3)  # [B, M, L, D]
        tsteps = s[:, None] + L + torch.arange(T)[None, :]
        y = self.x[:, tsteps, self.power_index].permute(1, 0, 2)  # [B, M, T]
        text = self.text[split][torch.as_tensor(idx)] if self.text.get(split) is not None else None
        images = None
        if self.images is not None:
            k = self.num_images
            isteps = (s[:, None] + L - k + torch.arange(k)[None, :]).clamp(min=0)
            images = self.images[:, isteps].permute(1, 0, 2, 3)  # [B, M, k, d_v]
        return x, y, text, images


def _split_starts(bounds, seq_len, horizon, stride, min_origin):
    a, b = bounds
    first = max(a, min_origin - seq_len)
    n = count_windows(b - first, seq_len, horizon, stride)
    return first + np.arange(n) * stride


def prepare_data(
    dataset: SyntheticDataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    flags: AblationFlags = AblationFlags(),
    providers=None,
) -> PreparedData:
    """Split, normalize, window and embed ``dataset`` for one configuration.

    Providers are only invoked for the modalities the ablation flags keep.
    """
    steps = dataset.num_steps
    bounds = chronological_split(steps, train_cfg.split_ratios)
    raw = dataset.series
    stats = fit_normalizer(raw[:, bounds.train[0] : bounds.train[1]])
    bins = prompt_lib.fit_bins(raw[:, bounds.train[0] : bounds.train[1]], dataset.feature_names)
    x = torch.as_tensor(stats.apply(raw), dtype=torch.float32)
    L, T = model_cfg.seq_len, train_cfg.horizon
    # text prompts summarize at least the long context before the forecast origin
    min_origin = prompt_lib.CONTEXT_LONG_STEPS if flags.needs_text else 0
    starts = {
        name: _split_starts(getattr(bounds, name), L, T, train_cfg.window_stride, min_origin)
        for name in ("train", "val", "test")
    }
    if providers is None:
        providers = make_providers(model_cfg, train_cfg.seed)
    text_p, image_p = providers

    text = {}
    if flags.needs_text:
        ctx = max(L, prompt_lib.CONTEXT_LONG_STEPS)
        for name, ss in starts.items():
            rows = []
            for s in ss:
                origin = s + L
                lo = origin - ctx
                win = NumericWindow(raw[:, lo:origin], dataset.timestamps[lo:origin], list(dataset.feature_names))
                now = int(dataset.timestamps[origin - 1])
                per_site = []
                for i, site in enumerate(dataset.sites):
                    fields = prompt_lib.extract_fields(win, site, now, T, bins, site_index=i)
                    per_site.append(text_p.embed_text(site.site_id, now, prompt_lib.render_prompt(fields)))
                rows.append(np.stack(per_site))
            text[name] = (
                torch.as_tensor(np.stack(rows), dtype=torch.float32)
                if rows
                else torch.zeros(0, len(dataset.sites), model_cfg.d_text)
            )
    images = None
    if flags.needs_images:
        emb = np.stack(
            [
                np.stack(
                    [
                        image_p.embed_image(site.site_id, int(t), float(dataset.cloud_cover[i, j]))
                        for j, t in enumerate(dataset.timestamps)
                    ]
                )
                for i, site in enumerate(dataset.sites)
            ]
        )
        images = torch.as_tensor(emb, dtype=torch.float32)
    return PreparedData(
        dataset,
        stats,
        bins,
        x,
        starts,
        L,
        T,
        model_cfg.num_images,
        list(dataset.feature_names).index("power"),
        text,
        images,
        providers,
    )


# ---------------------------------------------------------------------------
# Model construction and checkpoints
# ---------------------------------------------------------------------------


def build_model(model_cfg: ModelConfig, sites, horizon: int, flags: AblationFlags, seed: int) -> SolarVLM:
    torch.manual_seed(seed)
    graph = build_graph(sites, model_cfg.knn_k, model_cfg.earth_radius_km)
    return SolarVLM(model_cfg, graph, horizon, flags)


def save_checkpoint(path, model: SolarVLM, train_cfg: TrainConfig, sites, stats: NormalizationStats | None = None, extra=None):
    payload = {
        "state_dict": model.state_dict(),
        "model_config": model.cfg.to_dict(),
        "train_config": asdict(train_cfg),
        "flags": model.flags.to_dict(),
        "horizon": model.horizon,
        "sites": [asdict(s) for s in sites],
        "normalization": stats.to_dict() if stats is not None else None,
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path):
    """Return ``(model, payload)``; the model is in eval mode."""
    from .data import SiteMetadata

    payload = torch.load(path, map_location="cpu", weights_only=False)
    cfg = ModelConfig(**payload["model_config"])
    sites = [SiteMetadata(**s) for s in payload["sites"]]
    graph = build_graph(sites, cfg.knn_k, cfg.earth_radius_km)
    model = SolarVLM(cfg, graph, payload["horizon"], AblationFlags(**payload["flags"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload


# ---------------------------------------------------------------------------
# Training and evaluation
# ---------------------------------------------------------------------------


class TraceWriter:
    """JSONL diagnostics sink: gates and attention maps of the first sample per batch."""

    def __init__(self, path):
        self.fh = open(path, "a")

    def write(self, phase, epoch, batch, out):
        d = out.diagnostics
        rec = {"phase": phase, "epoch": epoch, "batch": batch}
        if "theta" in d:
            rec["theta"] = d["theta"][0].tolist()
        if "cross_site_attention" in d:
            rec["cross_site_attention"] = d["cross_site_attention"][0].mean(0).tolist()
        if "gat_alpha" in d:
            rec["gat_alpha"] = [a[0].tolist() for a in d["gat_alpha"]]
        if "text_gamma" in d:
            rec["text_gamma"] = d["text_gamma"][0].tolist()
        self.fh.write(json.dumps(rec) + "\n")

    def close(self):
        self.fh.close()


@torch.no_grad()
def predict_split(model: SolarVLM, data: PreparedData, split: str, batch_size: int = 64, trace: TraceWriter | None = None):
    """Return ``(pred, true)`` arrays ``[N, M, T]`` on the normalized scale."""
    was_training = model.training
    model.eval()
    preds, trues = [], []
    n = data.num_windows(split)
    for b, lo in enumerate(range(0, n, batch_size)):
        idx = np.arange(lo, min(lo + batch_size, n))
        x, y, text, images = data.batch(split, idx)
        out = model(x, text, images, diagnostics=trace is not None)
        if trace is not None:
            trace.write(split, None, b, out)
        preds.append(out.p_final.numpy())
        trues.append(y.numpy())
    model.train(was_training)
    if not preds:
        m = data.x.shape[0]
        return np.zeros((0, m, data.horizon)), np.zeros((0, m, data.horizon))
    return np.concatenate(preds), np.concatenate(trues)


def evaluate(model: SolarVLM, data: PreparedData, split: str = "test", trace: TraceWriter | None = None, **metadata) -> MetricReport:
    if model.horizon != data.horizon:
        raise ValueError(f"checkpoint horizon {model.horizon} does not match data horizon {data.horizon}")
    pred, true = predict_split(model, data, split, trace=trace)
    if len(pred) == 0:
        raise ValueError(f"split {split!r} has no windows")
    return MetricReport.from_predictions(pred, true, split=split, windows=len(pred), **metadata)


@dataclass
class TrainResult:
    model: SolarVLM
    history: list
    best_epoch: int
    best_val: float
    steps: int
    wall_time: float


def train(
    model: SolarVLM,
    data: PreparedData,
    cfg: TrainConfig,
    trace: TraceWriter | None = None,
    on_epoch: Callable | None = None,
) -> TrainResult:
    """Adam on MSE of normalized power, keeping the best-validation state."""
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    n = data.num_windows("train")
    if n == 0:
        raise ValueError("training split has no windows")
    has_val = data.num_windows("val") > 0
    history = []
    best_state = copy.deepcopy(model.state_dict())
    best_val, best_epoch = math.inf, 0
    steps = 0
    t0 = time.time()
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = torch.randperm(n, generator=gen).numpy() if cfg.shuffle else np.arange(n)
        total, count = 0.0, 0
        for b, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo : lo + cfg.batch_size]
            x, y, text, images = data.batch("train", idx)
            out = model(x, text, images, diagnostics=trace is not None)
            loss = torch.mean((out.p_final - y) ** 2)
            if not torch.isfinite(loss):
                raise NumericalDivergence(b, epoch, loss.item())
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            if trace is not None:
                trace.write("train", epoch, b, out)
            total += loss.item() * len(idx)
            count += len(idx)
            steps += 1
            if cfg.max_steps and steps >= cfg.max_steps:
                break
        train_loss = total / count
        if has_val:
            pred, true = predict_split(model, data, "val")
            val = float(np.mean((pred - true) ** 2))
        else:
            val = train_loss
        history.append({"epoch": epoch, "train_loss": train_loss, "val_mse": val, "steps": steps})
        logger.info("epoch %d: train %.5f val %.5f", epoch, train_loss, val)
        if on_epoch is not None:
            on_epoch(history[-1])
        if val < best_val:
            best_val, best_epoch = val, epoch
            best_state = copy.deepcopy(model.state_dict())
        if cfg.max_steps and steps >= cfg.max_steps:
            break
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, history, best_epoch, best_val, steps, time.time() - t0)


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


@dataclass
class RunOutcome:
    result: TrainResult
    report: MetricReport
    data: PreparedData


def run_experiment(
    dataset: SyntheticDataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    flags: AblationFlags = AblationFlags(),
    trace: TraceWriter | None = None,
    split: str = "test",
) -> RunOutcome:
    data = prepare_data(dataset, model_cfg, train_cfg, flags)
    model = build_model(model_cfg, dataset.sites, train_cfg.horizon, flags, train_cfg.seed)
    result = train(model, data, train_cfg, trace)
    report = evaluate(
        result.model,
        data,
        split,
        trace=trace,
        config_hash=config_hash(model_cfg, train_cfg, flags),
        seed=train_cfg.seed,
        wall_time=result.wall_time,
        best_epoch=result.best_epoch,
        text_calls=data.providers[0].calls,
        image_calls=data.providers[1].calls,
    )
    return RunOutcome(result, report, data)


def _row(report: MetricReport, **extra):
    row = dict(extra)
    row.update(
        config_hash=report.metadata.get("config_hash"),
        mse=report.mse,
        mae=report.mae,
        r2=report.r2,
        runtime=report.metadata.get("wall_time"),
    )
    return row


def run_ablation(dataset: SyntheticDataset, model_cfg: ModelConfig, train_cfg: TrainConfig, settings=None):
    """One run per ablation setting with identical seed and data."""
    rows, reports = [], []
    for name, flags in settings or ABLATION_SETTINGS:
        out = run_experiment(dataset, model_cfg, train_cfg, flags)
        rows.append(
            _row(
                out.report,
                setting=name,
                provider_calls=out.data.providers[0].calls + out.data.providers[1].calls,
            )
        )
        reports.append(out.report)
    return rows, reports


def validate_sweep_value(axis: str, value, dataset: SyntheticDataset, model_cfg: ModelConfig, train_cfg: TrainConfig):
    """Return ``None`` if the value is usable, else a human-readable reason."""
    if axis not in SWEEP_FIELDS:
        return f"unknown axis {axis!r}"
    if not isinstance(value, int) or value < 1:
        return f"{axis} must be a positive integer"
    cfg = replace(model_cfg, **{SWEEP_FIELDS[axis]: value})
    if cfg.patch_len > cfg.seq_len:
        return f"patch length {cfg.patch_len} exceeds history length {cfg.seq_len}"
    if cfg.knn_k >= len(dataset.sites):
        return f"K={cfg.knn_k} needs more than {cfg.knn_k} stations, have {len(dataset.sites)}"
    bounds = chronological_split(dataset.num_steps, train_cfg.split_ratios)
    for name in ("train", "test"):
        a, b = getattr(bounds, name)
        if count_windows(b - a, cfg.seq_len, train_cfg.horizon, train_cfg.window_stride) == 0:
            return f"{name} split too short for L={cfg.seq_len}, T={train_cfg.horizon}"
    return None


def run_sweep(
    dataset: SyntheticDataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    axis: str,
    values: Sequence[int] | None = None,
    flags: AblationFlags = AblationFlags(),
):
    """One training run per axis value, all else fixed; rows sorted by value."""
    if axis not in SWEEP_GRIDS:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_GRIDS)}")
    values = sorted(SWEEP_GRIDS[axis] if values is None else values)
    rows = []
    for v in values:
        reason = validate_sweep_value(axis, v, dataset, model_cfg, train_cfg)
        if reason is not None:
            logger.warning("skipping %s=%s: %s", axis, v, reason)
            rows.append({"axis": axis, "value": v, "status": "skipped", "reason": reason})
            continue
        cfg = replace(model_cfg, **{SWEEP_FIELDS[axis]: v})
        try:
            out = run_experiment(dataset, cfg, train_cfg, flags)
        except (GraphError, prompt_lib.PromptError) as exc:
            logger.warning("skipping %s=%s: %s", axis, v, exc)
            rows.append({"axis": axis, "value": v, "status": "skipped", "reason": str(exc)})
            continue
        rows.append(_row(out.report, axis=axis, value=v, status="ok", reason=""))
    return rows


def write_rows_csv(path, rows, columns=None):
    import csv

    columns = columns or list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in columns})


def write_rows_jsonl(path, rows):
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, default=str) + "\n")
