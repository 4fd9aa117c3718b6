"""Two-phase domain-adaptive training: warm-up with global alignment, then the full objective."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .alignment import center_aware_loss, center_aware_map, global_alignment_loss, overall_objective
from .assignment import LevelTargets, assign_targets
from .config import ConfigError, ExperimentConfig, config_from_dict
from .evaluation import MetricsReport, evaluate_map, postprocess, size_buckets_for
from .losses import detection_loss
from .network import DomainAdaptiveDetector
from .synth import Dataset, SplitData, make_split, read_dataset

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class NumericError(RuntimeError):
    pass


class DataError(RuntimeError):
    pass


def torch_dtype(cfg: ExperimentConfig) -> torch.dtype:
    return torch.float64 if cfg.train.dtype == "float64" else torch.float32


def build_model(cfg: ExperimentConfig) -> DomainAdaptiveDetector:
    torch.manual_seed(cfg.train.seed)
    m = cfg.model
    model = DomainAdaptiveDetector(
        num_classes=len(cfg.data.class_names), channels=m.channels, widths=m.widths, stem=m.stem,
        head_convs=m.head_convs, disc_convs=m.disc_convs, strides=m.strides, prior=m.prior,
        backbone_norm=m.backbone_norm,
    )
    return model.to(torch_dtype(cfg))


def build_optimizer(cfg: ExperimentConfig, model) -> torch.optim.SGD:
    t = cfg.train
    return torch.optim.SGD(model.parameters(), lr=t.lr, momentum=t.momentum, weight_decay=t.weight_decay)


@dataclass
class TrainState:
    step: int
    model: DomainAdaptiveDetector
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    warmup_steps: int
    running: dict = field(default_factory=dict)

    @property
    def phase(self) -> str:
        return "warmup" if self.step < self.warmup_steps else "full"


@dataclass
class StepReport:
    step: int
    phase: str
    cls: float
    reg: float
    ctr: float
    det: float
    ga: float
    ca: Optional[float]
    total: float
    alpha: float
    beta: float
    ga_levels: list = field(default_factory=list)
    ca_levels: list = field(default_factory=list)

    def to_record(self) -> dict:
        return dict(self.__dict__)


def init_state(cfg: ExperimentConfig) -> TrainState:
    model = build_model(cfg)
    return TrainState(0, model, build_optimizer(cfg, model), np.random.default_rng(cfg.train.seed),
                      cfg.train.warmup)


# ---------------------------------------------------------------- targets


class PackedTargets:
    """Assignment targets for a whole split, flattened across levels for fast batch gathering."""

    def __init__(self, annotations, cfg: ExperimentConfig):
        spec = cfg.model.pyramid()
        size = cfg.data.image_size
        self.sizes = spec.feature_sizes(size, size)
        n = len(annotations)
        total = sum(h * w for h, w in self.sizes)
        self.cls = np.empty((n, total), dtype=np.int64)
        self.ctr = np.empty((n, total), dtype=np.float64)
        self.reg = np.empty((n, total, 4), dtype=np.float64)
        for i, ann in enumerate(annotations):
            levels = assign_targets(ann.gts(), spec, ann.width, ann.height, len(cfg.data.class_names))
            self.cls[i] = np.concatenate([t.cls_target.reshape(-1) for t in levels])
            self.ctr[i] = np.concatenate([t.ctr_target.reshape(-1) for t in levels])
            self.reg[i] = np.concatenate([t.reg_target.reshape(-1, 4) for t in levels])

    def batch(self, idx, dtype) -> list[LevelTargets]:
        out, start = [], 0
        n = len(idx)
        for h, w in self.sizes:
            sl = slice(start, start + h * w)
            cls = torch.from_numpy(self.cls[idx, sl].reshape(n, h, w))
            out.append(LevelTargets(
                cls_target=cls,
                ctr_target=torch.from_numpy(self.ctr[idx, sl].reshape(n, h, w)).to(dtype),
                reg_target=torch.from_numpy(self.reg[idx, sl].reshape(n, h, w, 4)).to(dtype),
                pos_mask=cls >= 0,
            ))
            start += h * w
        return out


def stack_targets(per_image: Sequence[Sequence[LevelTargets]], dtype=torch.float64) -> list[LevelTargets]:
    """Batch numpy per-image targets into per-level tensors."""
    out = []
    for lv in range(len(per_image[0])):
        ts = [img[lv] for img in per_image]
        cls = torch.from_numpy(np.stack([t.cls_target for t in ts]))
        out.append(LevelTargets(
            cls_target=cls,
            ctr_target=torch.from_numpy(np.stack([t.ctr_target for t in ts])).to(dtype),
            reg_target=torch.from_numpy(np.stack([t.reg_target for t in ts])).to(dtype),
            pos_mask=cls >= 0,
        ))
    return out


def images_to_tensor(images: np.ndarray, dtype) -> torch.Tensor:
    """(N, H, W, 3) uint8 or float -> (N, 3, H, W) in [0, 1]."""
    x = torch.from_numpy(np.ascontiguousarray(images))
    x = x.to(dtype) / 255.0 if images.dtype == np.uint8 else x.to(dtype)
    return x.permute(0, 3, 1, 2).contiguous()


# ---------------------------------------------------------------- step


def train_step(state: TrainState, source_batch, target_batch, cfg: ExperimentConfig):
    """One momentum-SGD update on a (labelled source, unlabelled target) pair of batches.

    ``source_batch`` is ``(images, per-level targets)``; ``target_batch`` is
    the image tensor alone.
    """
    if not isinstance(target_batch, torch.Tensor):
        raise TypeError("target batch must be an image tensor only; target annotations are never used in training")
    src_images, targets = source_batch
    lc = cfg.loss
    model = state.model
    warm = state.phase == "warmup"
    alpha = lc.alpha_warmup if warm else lc.alpha
    beta = 0.0 if warm else lc.beta
    use_ca = lc.use_ca and not warm
    levels = [lv - 3 for lv in lc.align_levels]

    ns = src_images.shape[0]
    feats = model.backbone(torch.cat([src_images, target_batch]))
    if use_ca:
        outs = [model.head(f, i) for i, f in enumerate(feats)]
        src_outs = [_slice_outputs(o, slice(0, ns)) for o in outs]
    else:
        outs = None
        src_outs = [model.head(f[:ns], i) for i, f in enumerate(feats)]

    for o in src_outs:
        if not (torch.isfinite(o.cls_logits).all() and torch.isfinite(o.ctr_logits).all()):
            raise NumericError(f"non-finite head outputs at step {state.step}")
    det = detection_loss(src_outs, targets, lc.focal_gamma, lc.focal_alpha, lc.centerness_weighted_iou)
    ga_levels = []
    if lc.use_ga:
        ga_levels = [global_alignment_loss(feats[i][:ns], feats[i][ns:], model.disc_ga[i], lc.grl_ga)
                     for i in levels]
    ca_levels = []
    if use_ca:
        for i in levels:
            m = center_aware_map(outs[i].cls_logits, outs[i].ctr_logits, lc.delta)
            ca_levels.append(center_aware_loss(feats[i][:ns], feats[i][ns:], m[:ns], m[ns:],
                                               model.disc_ca[i], lc.grl_ca, lc.detach_center_map))
    total = overall_objective(det, ga_levels, ca_levels, alpha, beta)
    if not torch.isfinite(total):
        raise NumericError(f"non-finite loss at step {state.step}: {float(total)}")

    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    if cfg.train.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.train.grad_clip)
    state.optimizer.step()

    report = StepReport(
        step=state.step, phase="warmup" if warm else "full",
        cls=det.cls.item(), reg=det.reg.item(), ctr=det.ctr.item(), det=det.total.item(),
        ga=float(sum(x.item() for x in ga_levels)), ca=(sum(x.item() for x in ca_levels) if use_ca else None),
        total=total.item(), alpha=alpha, beta=beta,
        ga_levels=[x.item() for x in ga_levels], ca_levels=[x.item() for x in ca_levels],
    )
    state.step += 1
    return state, report


def _slice_outputs(o, sl):
    return type(o)(o.cls_logits[sl], o.ctr_logits[sl], o.reg_raw[sl], o.reg[sl])


# ---------------------------------------------------------------- data


@dataclass
class TrainData:
    source: SplitData  # labelled split used for supervision
    target: np.ndarray  # unlabelled target-train images only
    evaluation: SplitData


def load_data(cfg: ExperimentConfig, splits=None, workers: int = 1) -> Dataset:
    """Read the dataset from ``cfg.data.root`` or generate it in memory."""
    d = cfg.data
    wanted = splits or [cfg.train.source_split, "target-train", cfg.eval.split]
    wanted = list(dict.fromkeys(wanted))
    if d.root:
        ds = read_dataset(d.root, wanted)
        if ds.meta.get("data_hash") not in (None, cfg.data_hash()):
            raise DataError(f"dataset at {d.root} was generated with different data settings "
                            f"({ds.meta.get('data_hash')} vs {cfg.data_hash()})")
        missing = [s for s in wanted if s not in ds.splits]
        if missing:
            raise DataError(f"dataset at {d.root} lacks splits {missing}")
        return ds
    params = d.gen_params()
    counts = d.split_counts()
    out = {}
    for s in wanted:
        images, anns = make_split(s, counts[s], d.seed, params, workers)
        out[s] = SplitData(s, images, anns)
    return Dataset(None, out, {"data_hash": cfg.data_hash()})


def training_data(cfg: ExperimentConfig, ds: Dataset) -> TrainData:
    # Only images cross over from the target-train split.
    return TrainData(ds[cfg.train.source_split], ds["target-train"].images, ds[cfg.eval.split])


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(state: TrainState, cfg: ExperimentConfig, path) -> Path:
    """One ``.npz`` archive: ``param/<name>`` and ``momentum/<name>`` arrays plus a JSON ``meta`` entry."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {}
    names = {id(p): n for n, p in state.model.named_parameters()}
    for n, p in state.model.named_parameters():
        arrays[f"param/{n}"] = p.detach().cpu().numpy()
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            buf = state.optimizer.state.get(p, {}).get("momentum_buffer")
            if buf is not None:
                arrays[f"momentum/{names[id(p)]}"] = buf.detach().cpu().numpy()
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "step": state.step,
        "warmup_steps": state.warmup_steps,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "seed": cfg.train.seed,
        "rng_state": state.rng.bit_generator.state,
    }
    arrays["meta"] = np.array(json.dumps(meta, default=_json_default))
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)
    return path


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    raise TypeError(type(o))


def read_checkpoint_meta(path) -> dict:
    with np.load(path, allow_pickle=False) as z:
        if "meta" not in z.files:
            raise DataError(f"{path}: not a checkpoint archive")
        meta = json.loads(str(z["meta"]))
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: checkpoint format {meta.get('format_version')}, expected {CHECKPOINT_VERSION}")
    return meta


def load_checkpoint(path, cfg: ExperimentConfig | None = None) -> tuple[TrainState, ExperimentConfig]:
    """Rebuild the training state. ``cfg``, when given, must match the stored snapshot's model and loss settings."""
    meta = read_checkpoint_meta(path)
    stored = config_from_dict(meta["config"])
    if cfg is not None:
        if cfg.hash("model") != stored.hash("model") or cfg.data_hash() != stored.data_hash():
            raise ConfigError(f"checkpoint {path} was trained with different model or data settings")
    else:
        cfg = stored
    state = init_state(cfg)
    with np.load(path, allow_pickle=False) as z:
        params = dict(state.model.named_parameters())
        for n, p in params.items():
            key = f"param/{n}"
            if key not in z.files:
                raise DataError(f"{path}: missing parameter {n}")
            arr = z[key]
            if tuple(arr.shape) != tuple(p.shape):
                raise DataError(f"{path}: shape mismatch for {n}: {arr.shape} vs {tuple(p.shape)}")
            with torch.no_grad():
                p.copy_(torch.from_numpy(arr))
        for n, p in params.items():
            key = f"momentum/{n}"
            if key in z.files:
                state.optimizer.state[p]["momentum_buffer"] = torch.from_numpy(z[key].copy()).to(p.dtype)
    state.step = int(meta["step"])
    state.warmup_steps = int(meta["warmup_steps"])
    state.rng.bit_generator.state = meta["rng_state"]
    return state, cfg


# ---------------------------------------------------------------- evaluation


def predict(model, images: np.ndarray, cfg: ExperimentConfig, ids: Sequence[str]) -> dict:
    spec = cfg.model.pyramid()
    e = cfg.eval
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    preds = {}
    with torch.no_grad():
        for start in range(0, len(images), e.batch_size):
            chunk = images[start:start + e.batch_size]
            _, outs = model(images_to_tensor(chunk, dtype))
            for j in range(len(chunk)):
                h, w = chunk.shape[1:3]
                preds[ids[start + j]] = postprocess(outs, spec, w, h, e.score_thresh, e.topk,
                                                    e.nms_iou, e.max_dets, index=j)
    model.train(was_training)
    return preds


def evaluate_split(model, split: SplitData, cfg: ExperimentConfig) -> MetricsReport:
    ids = [a.image_id for a in split.annotations]
    preds = predict(model, split.images, cfg, ids)
    gts = {a.image_id: a for a in split.annotations}
    return evaluate_map(preds, gts, len(cfg.data.class_names),
                        size_buckets=size_buckets_for(cfg.data.image_size), max_dets=cfg.eval.max_dets)


# ---------------------------------------------------------------- fit


def run_steps(state: TrainState, data: TrainData, packed: PackedTargets, cfg: ExperimentConfig, until: int,
              on_step=None):
    dtype = torch_dtype(cfg)
    bs = cfg.train.batch_size
    n_src, n_tgt = len(data.source.images), len(data.target)
    if n_src == 0 or n_tgt == 0:
        raise DataError("training needs non-empty labelled and unlabelled splits")
    while state.step < until:
        si = np.sort(state.rng.choice(n_src, size=min(bs, n_src), replace=False))
        ti = np.sort(state.rng.choice(n_tgt, size=min(bs, n_tgt), replace=False))
        src = (images_to_tensor(data.source.images[si], dtype), packed.batch(si, dtype))
        tgt = images_to_tensor(data.target[ti], dtype)
        state, report = train_step(state, src, tgt, cfg)
        if on_step:
            on_step(state, report)
    return state


def fit(cfg: ExperimentConfig, out_dir, resume=None, data: TrainData | None = None,
        log_every: int = 50) -> dict:
    """Train to ``total_steps``, checkpointing and appending one metrics record per evaluation.

    Returns the final metrics record.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(cfg.train.threads)
    if data is None:
        data = training_data(cfg, load_data(cfg))
    packed = PackedTargets(data.source.annotations, cfg)
    if resume:
        state, _ = load_checkpoint(resume, cfg)
    else:
        state = init_state(cfg)
        save_checkpoint(state, cfg, out_dir / "checkpoint_000000.npz")

    metrics_path = out_dir / "metrics.jsonl"
    window: list[StepReport] = []
    t0 = time.time()

    def record(step_state, label="eval"):
        rep = evaluate_split(step_state.model, data.evaluation, cfg)
        losses = {}
        if window:
            for k in ("cls", "reg", "ctr", "det", "ga", "total"):
                losses[k] = float(np.mean([getattr(r, k) for r in window]))
            cas = [r.ca for r in window if r.ca is not None]
            losses["ca"] = float(np.mean(cas)) if cas else None
        rec = {"kind": label, "step": step_state.step, "phase": step_state.phase, "losses": losses,
               "split": cfg.eval.split, "metrics": rep.to_record(), "config_hash": cfg.hash(),
               "seed": cfg.train.seed, "elapsed_s": round(time.time() - t0, 1)}
        with open(metrics_path, "a") as fh:
            fh.write(json.dumps(rec) + "\n")
        window.clear()
        return rec

    def on_step(st, report):
        window.append(report)
        if log_every and st.step % log_every == 0:
            log.info("step %d [%s] det %.4f ga %.4f ca %s", st.step, report.phase, report.det, report.ga,
                     "-" if report.ca is None else f"{report.ca:.4f}")
        if cfg.train.checkpoint_every and st.step % cfg.train.checkpoint_every == 0:
            save_checkpoint(st, cfg, out_dir / f"checkpoint_{st.step:06d}.npz")
        if cfg.train.eval_every and st.step % cfg.train.eval_every == 0 and st.step < cfg.train.total_steps:
            record(st)

    if cfg.train.total_steps <= state.step:
        return {}
    state = run_steps(state, data, packed, cfg, cfg.train.total_steps, on_step)
    save_checkpoint(state, cfg, out_dir / f"checkpoint_{state.step:06d}.npz")
    save_checkpoint(state, cfg, out_dir / "checkpoint_last.npz")
    return record(state, "final")
