"""Optimizer, schedules and the pretrain / fine-tune / probe loops."""
from __future__ import annotations

import csv
import itertools
import math
import queue
import threading
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from . import augment as aug
from .contrastive import DEFAULT_TAU, build_nt_xent, build_peclr
from .encoder import Checkpoint, EncoderConfig, Model, swap_head_for_pose
from .geometry import apply_to_points
from .ndiff import Graph, NonFiniteError
from .pose import build_pose_losses, lift_predictions, metrics, MetricReport
from .seeding import substream
from .synthhand import HandDataset

BETA1, BETA2, EPS = 0.9, 0.999, 1e-8
LARS_CLIP = 10.0


class TrainingError(RuntimeError):
    """Non-finite loss or gradient; carries the step for diagnostics."""

    def __init__(self, msg, step=None):
        super().__init__(msg)
        self.step = step


def lr_for_batch(batch_size: int) -> float:
    return math.sqrt(batch_size) * 1e-4


# -- optimizer -------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    lars: bool = True
    weight_decay: float = 1e-6

    @classmethod
    def zeros(cls, params, lars=True, weight_decay=1e-6) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0, lars, weight_decay)

    def to_dict(self) -> dict:
        return {"step": self.step, "lars": self.lars, "weight_decay": self.weight_decay,
                "m": self.m, "v": self.v}

    @classmethod
    def from_dict(cls, d: dict, params) -> "OptimizerState":
        if not d.get("m"):
            return cls.zeros(params, d.get("lars", True), d.get("weight_decay", 1e-6))
        return cls(d["m"], d["v"], int(d["step"]), bool(d["lars"]), float(d["weight_decay"]))


def _lars_applies(p: np.ndarray) -> bool:
    # biases are excluded from trust scaling and decay
    return p.ndim > 1


def adam_lars_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: OptimizerState,
                   lr: float):
    """One Adam update, optionally wrapped with a per-layer LARS trust ratio.

    Returns new ``(params, state)``; inputs are not modified.
    """
    t = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    bc1, bc2 = 1 - BETA1 ** t, 1 - BETA2 ** t
    for k in sorted(params):
        w, g = params[k], grads[k]
        if g.shape != w.shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, parameter {w.shape}")
        m = BETA1 * state.m[k] + (1 - BETA1) * g
        v = BETA2 * state.v[k] + (1 - BETA2) * g * g
        u = (m / bc1) / (np.sqrt(v / bc2) + EPS)
        if state.lars and _lars_applies(w):
            u = u + state.weight_decay * w
            wn, un = float(np.linalg.norm(w)), float(np.linalg.norm(u))
            eta = wn / (un + state.weight_decay * wn) if wn > 0 and un > 0 else 1.0
            u = min(max(eta, 0.0), LARS_CLIP) * u
        new_p[k] = w - lr * u
        new_m[k], new_v[k] = m, v
    return new_p, OptimizerState(new_m, new_v, t, state.lars, state.weight_decay)


# -- schedule ------------------------------------------------------------------------

@dataclass
class Schedule:
    base_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if self.total_steps < 1 or self.warmup_steps < 0 or self.warmup_steps > self.total_steps:
            raise ValueError(f"bad schedule {self}")

    @classmethod
    def from_epochs(cls, base_lr, warmup_epochs, total_epochs, steps_per_epoch) -> "Schedule":
        return cls(base_lr, int(warmup_epochs * steps_per_epoch), max(1, int(total_epochs * steps_per_epoch)))


def lr_at(schedule: Schedule, step: int) -> float:
    """Linear ramp from 0 over the warmup, then cosine decay to 0 at ``total_steps``."""
    s = schedule
    if not 0 <= step <= s.total_steps:
        raise ValueError(f"step {step} outside [0, {s.total_steps}]")
    if step < s.warmup_steps:
        return s.base_lr * step / s.warmup_steps
    span = s.total_steps - s.warmup_steps
    if span == 0:
        return s.base_lr
    frac = (step - s.warmup_steps) / span
    return s.base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


# -- shared helpers --------------------------------------------------------------------

def _finite(x, what, step):
    if not np.all(np.isfinite(x)):
        raise TrainingError(f"non-finite {what} at step {step}", step)


def _grads_finite(grads, step):
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {k} at step {step}", step)


class _TraceWriter:
    def __init__(self, path: Optional[Path], fields):
        self.rows: List[dict] = []
        self.fields = list(fields)
        self.fh = None
        if path is not None:
            path = Path(path)
            path.parent.mkdir(parents=True, exist_ok=True)
            self.fh = path.open("w", newline="")
            self.writer = csv.DictWriter(self.fh, fieldnames=self.fields, lineterminator="\n")
            self.writer.writeheader()

    def add(self, row):
        row = {k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()}
        self.rows.append(row)
        if self.fh:
            self.writer.writerow(row)
            self.fh.flush()

    def close(self):
        if self.fh:
            self.fh.close()


class _Prefetcher:
    """Background batch producer handing work over a bounded queue."""

    def __init__(self, make, n, depth):
        self.q: queue.Queue = queue.Queue(maxsize=max(1, depth))
        self._stop = threading.Event()
        self.t = threading.Thread(target=self._run, args=(make, n), daemon=True)
        self.t.start()

    def _run(self, make, n):
        for i in range(n):
            if self._stop.is_set():
                return
            try:
                item = make(i)
            except Exception as e:  # surfaced on the consumer side
                self.q.put(e)
                return
            self.q.put(item)

    def get(self):
        item = self.q.get()
        if isinstance(item, Exception):
            raise item
        return item

    def close(self):
        self._stop.set()
        while self.t.is_alive():
            try:
                self.q.get_nowait()
            except queue.Empty:
                self.t.join(timeout=0.05)


def _batches(make, n, prefetch):
    if prefetch <= 0:
        for i in range(n):
            yield make(i)
        return
    pf = _Prefetcher(make, n, prefetch)
    try:
        for _ in range(n):
            yield pf.get()
    finally:
        pf.close()


# -- pretraining ------------------------------------------------------------------------

@dataclass
class PretrainConfig:
    objective: str = "peclr"                 # or "simclr"
    translation_mode: str = "normalized"     # or "direct"
    model: EncoderConfig = field(default_factory=EncoderConfig)
    augment: aug.AugmentConfig = field(default_factory=aug.pretrain_config)
    batch_size: int = 64
    epochs: float = 100
    warmup_epochs: float = 10
    lr: Optional[float] = None               # None -> sqrt(batch) * 1e-4
    lars: bool = True
    weight_decay: float = 1e-6
    tau: float = DEFAULT_TAU
    seed: int = 0
    dataset_weights: Optional[Sequence[float]] = None
    prefetch: int = 0

    def __post_init__(self):
        if self.objective not in ("simclr", "peclr"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.translation_mode not in ("normalized", "direct"):
            raise ValueError(f"unknown translation mode {self.translation_mode!r}")
        if self.model.head != "projection":
            raise ValueError("pretraining needs a projection head")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")

    @property
    def base_lr(self) -> float:
        return lr_for_batch(self.batch_size) if self.lr is None else float(self.lr)


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    trace: List[dict]

    @property
    def losses(self) -> np.ndarray:
        return np.array([float(r["loss"]) for r in self.trace])


def _as_list(datasets) -> List[HandDataset]:
    return list(datasets) if isinstance(datasets, (list, tuple)) else [datasets]


def sample_indices(sizes: Sequence[int], batch: int, step: int, seed: int, weights=None):
    """Weighted draw of ``(dataset, index)`` pairs, balancing datasets by default."""
    rng = substream(seed, "shuffle", step)
    k = len(sizes)
    w = np.ones(k) if weights is None else np.asarray(weights, dtype=np.float64)
    p_ds = w / w.sum()
    ds = rng.choice(k, size=batch, p=p_ds)
    idx = np.array([rng.integers(0, sizes[d]) for d in ds])
    return ds, idx


def _epoch_order(n, epoch, seed):
    return substream(seed, "shuffle", epoch).permutation(n)


def two_views(images: np.ndarray, cfg: aug.AugmentConfig, seed: int, step: int):
    """Interleaved views ``(2B, H, W, 3)`` and their specs."""
    side = images.shape[1]
    views, specs = [], []
    for i, img in enumerate(images):
        img = img.astype(np.float64)
        for v in (0, 1):
            spec = aug.sample_transform(substream(seed, "augment", step, i, v), cfg, side)
            views.append(aug.apply(spec, img))
            specs.append(spec)
    return np.stack(views), specs


def contrastive_step(model: Model, views: np.ndarray, specs, cfg: PretrainConfig):
    """Loss and parameter gradients for one batch of interleaved views."""
    z = model.run(views)["out"]
    g = Graph()
    zi = g.input("z", z.shape)
    if cfg.objective == "peclr":
        geo = [s.geometric for s in specs]
        loss = build_peclr(g, zi, geo, cfg.tau, views.shape[1], cfg.translation_mode)
    else:
        loss = build_nt_xent(g, zi, cfg.tau)
    g.output("loss", loss)
    val = float(g.forward({"z": z})["loss"])
    dz = g.backward({"loss": 1.0})["z"]
    return val, model.backward(len(views), dz)


def pretrain(cfg: PretrainConfig, datasets, trace_path=None, init: Optional[Model] = None) -> PretrainResult:
    dss = _as_list(datasets)
    if not dss or any(len(d) == 0 for d in dss):
        raise ValueError("pretraining needs non-empty datasets")
    for d in dss:
        if d.size != cfg.model.input_side:
            raise ValueError(f"dataset images are {d.size}px, model expects {cfg.model.input_side}px")
    total_images = sum(len(d) for d in dss)
    steps_per_epoch = max(1, total_images // cfg.batch_size)
    sched = Schedule.from_epochs(cfg.base_lr, cfg.warmup_epochs, cfg.epochs, steps_per_epoch)
    model = init.clone() if init is not None else Model.init(cfg.model, cfg.seed)
    state = OptimizerState.zeros(model.params, cfg.lars, cfg.weight_decay)
    B = min(cfg.batch_size, total_images)

    def make(step):
        epoch = step // steps_per_epoch
        if len(dss) == 1:
            order = _epoch_order(len(dss[0]), epoch, cfg.seed)
            k = step % steps_per_epoch
            imgs = dss[0].images[order[k * B:(k + 1) * B]]
        else:
            ds, idx = sample_indices([len(d) for d in dss], B, step, cfg.seed, cfg.dataset_weights)
            imgs = np.stack([dss[d].images[i] for d, i in zip(ds, idx)])
        return two_views(imgs, cfg.augment, cfg.seed, step)

    trace = _TraceWriter(trace_path, ("step", "epoch", "lr", "loss"))
    try:
        for step, (views, specs) in enumerate(_batches(make, sched.total_steps, cfg.prefetch)):
            lr = lr_at(sched, step + 1)
            try:
                loss, grads = contrastive_step(model, views, specs, cfg)
            except NonFiniteError as e:
                raise TrainingError(f"non-finite value at step {step}: {e}", step) from e
            _finite(loss, "loss", step)
            _grads_finite(grads, step)
            new_params, state = adam_lars_step(model.params, grads, state, lr)
            model.params.update(new_params)
            trace.add({"step": step, "epoch": step // steps_per_epoch, "lr": lr, "loss": loss})
    finally:
        trace.close()
    meta = {"objective": cfg.objective, "translation_mode": cfg.translation_mode,
            "seed": cfg.seed, "augment": list(cfg.augment.enabled)}
    ck = Checkpoint(cfg.model, model.params, state.to_dict(), sched.total_steps, None, meta)
    return PretrainResult(ck, trace.rows)


# -- fine-tuning -----------------------------------------------------------------------

@dataclass
class FinetuneConfig:
    label_fraction: float = 1.0
    epochs: float = 50
    batch_size: int = 128
    lr: float = 5e-4
    warmup_epochs: float = 0
    heldout_fraction: float = 0.1
    augment: aug.AugmentConfig = field(default_factory=aug.finetune_config)
    model: EncoderConfig = field(default_factory=lambda: EncoderConfig(head="pose"))
    seed: int = 0
    d_weight: float = 1.0
    eval_every: int = 1
    prefetch: int = 0

    def __post_init__(self):
        if not 0 < self.label_fraction <= 1:
            raise ValueError(f"label_fraction must lie in (0, 1], got {self.label_fraction}")
        if not 0 < self.heldout_fraction < 1:
            raise ValueError("heldout_fraction must lie in (0, 1)")


@dataclass
class FinetuneResult:
    model: Model
    reports: List[MetricReport]
    trace: List[dict]
    init: str

    @property
    def final(self) -> MetricReport:
        return self.reports[-1]


def split_indices(ds: HandDataset, label_fraction: float, heldout_fraction: float = 0.1):
    """Deterministic split: the last ``heldout_fraction`` is held out, training
    uses the labeled prefix of the rest truncated to ``label_fraction``."""
    n = len(ds)
    n_test = max(1, int(round(n * heldout_fraction)))
    test = np.arange(n - n_test, n)
    pool = np.flatnonzero(ds.labeled[:n - n_test])
    n_train = max(1, int(math.floor(len(pool) * label_fraction)))
    if len(pool) == 0:
        raise ValueError("no labeled samples outside the held-out split")
    return pool[:n_train], test


def augment_labeled(img, j2d, cfg: aug.AugmentConfig, rng):
    """Apply a fine-tune augmentation and move the 2D labels with it."""
    spec = aug.sample_transform(rng, cfg, img.shape[0])
    return aug.apply(spec, img.astype(np.float64)), apply_to_points(spec.geometric, j2d)


def bone_length(J3D, ref_bone=(9, 0)):
    n, m = ref_bone
    return np.linalg.norm(J3D[..., n, :] - J3D[..., m, :], axis=-1)


def evaluate(model: Model, ds: HandDataset, aligned: bool = False) -> MetricReport:
    j2d, d_r = model.predict_pose(ds.images.astype(np.float64))
    J3D = lift_predictions(j2d, d_r, ds.K, bone_length(ds.J3D))
    return metrics(J3D, ds.J3D, "3d", aligned, pred_2d=j2d, gt_2d=ds.J2D)


def _pose_graph(model: Model, batch: int, d_weight: float):
    g = Graph()
    out = g.input("out", (batch, 63))
    gt = g.input("gt", (batch, 63))
    sel2 = np.zeros((63, 42))
    sel2[np.arange(42), np.arange(42)] = 1.0
    seld = np.zeros((63, 20))
    seld[np.arange(43, 63), np.arange(20)] = 1.0  # root depth is pinned, not trained
    l2d, ldr = build_pose_losses(g, g.matmul(out, sel2), g.matmul(out, seld),
                                 g.matmul(gt, sel2), g.matmul(gt, seld))
    g.output("l2d", l2d)
    g.output("ldr", ldr)
    g.output("loss", g.add(l2d, g.mul(ldr, float(d_weight))))
    return g


def finetune(cfg: FinetuneConfig, dataset: HandDataset, checkpoint: Optional[Checkpoint] = None,
             trace_path=None) -> FinetuneResult:
    if checkpoint is not None:
        ck = swap_head_for_pose(checkpoint, cfg.seed) if checkpoint.config.head == "projection" else checkpoint
        model = ck.model().clone()
        init = "checkpoint"
    else:
        model = Model.init(replace(cfg.model, head="pose"), cfg.seed)
        init = "none"
    if dataset.size != model.cfg.input_side:
        raise ValueError(f"dataset images are {dataset.size}px, model expects {model.cfg.input_side}px")
    train_idx, test_idx = split_indices(dataset, cfg.label_fraction, cfg.heldout_fraction)
    test = dataset.subset(test_idx)
    B = min(cfg.batch_size, len(train_idx))
    steps_per_epoch = max(1, len(train_idx) // B)
    sched = Schedule.from_epochs(cfg.lr, cfg.warmup_epochs, cfg.epochs, steps_per_epoch)
    state = OptimizerState.zeros(model.params, lars=False, weight_decay=0.0)
    lossg = _pose_graph(model, B, cfg.d_weight)

    def make(step):
        epoch = step // steps_per_epoch
        order = train_idx[_epoch_order(len(train_idx), epoch, cfg.seed + 1)]
        k = step % steps_per_epoch
        idx = order[k * B:(k + 1) * B]
        imgs, gts = [], []
        for i, j in enumerate(idx):
            im, j2 = augment_labeled(dataset.images[j], dataset.J2D[j], cfg.augment,
                                     substream(cfg.seed, "augment", step, i))
            imgs.append(im)
            gts.append(np.concatenate([j2.reshape(-1), dataset.d_r[j]]))
        return np.stack(imgs), np.stack(gts)

    fields = ("step", "epoch", "lr", "loss", "l2d", "ldr", "epe", "pa_epe", "auc", "epe_2d")
    trace = _TraceWriter(trace_path, fields)
    reports = []
    try:
        for step, (imgs, gt) in enumerate(_batches(make, sched.total_steps, cfg.prefetch)):
            lr = lr_at(sched, step + 1)
            out = model.run(imgs)["out"]
            vals = lossg.forward({"out": out, "gt": gt})
            _finite(vals["loss"], "loss", step)
            dout = lossg.backward({"loss": 1.0})["out"]
            grads = model.backward(B, dout)
            _grads_finite(grads, step)
            new_params, state = adam_lars_step(model.params, grads, state, lr)
            model.params.update(new_params)
            row = {"step": step, "epoch": step // steps_per_epoch, "lr": lr, "loss": float(vals["loss"]),
                   "l2d": float(vals["l2d"]), "ldr": float(vals["ldr"]),
                   "epe": "", "pa_epe": "", "auc": "", "epe_2d": ""}
            end_epoch = (step + 1) % steps_per_epoch == 0 or step + 1 == sched.total_steps
            epoch_no = step // steps_per_epoch + 1
            if end_epoch and (epoch_no % cfg.eval_every == 0 or step + 1 == sched.total_steps):
                rep = evaluate(model, test)
                reports.append(rep)
                row.update(epe=rep.epe, pa_epe=rep.pa_epe, auc=rep.auc, epe_2d=rep.epe_2d)
            trace.add(row)
    finally:
        trace.close()
    return FinetuneResult(model, reports, trace.rows, init)


# -- frozen-encoder probe ----------------------------------------------------------------

@dataclass
class ProbeConfig:
    hidden: int = 256
    epochs: int = 50
    batch_size: int = 128
    lr: float = 1e-3
    heldout_fraction: float = 0.25
    seed: int = 0


@dataclass
class ProbeResult:
    epe_2d: float
    epe_3d: float
    report: MetricReport


def _standardize(train, test):
    mu, sd = train.mean(axis=0), train.std(axis=0)
    # dead units in the training split would blow up held-out inputs
    sd = np.where(sd > 1e-6, sd, 1.0)
    return (train - mu) / sd, (test - mu) / sd


def probe(model: Model, dataset: HandDataset, cfg: ProbeConfig = ProbeConfig()) -> ProbeResult:
    """Two-layer MLP on frozen encoder features predicting the 2.5D pose."""
    n = len(dataset)
    n_test = max(1, int(round(n * cfg.heldout_fraction)))
    tr, te = np.arange(n - n_test), np.arange(n - n_test, n)
    feats = model.features(dataset.images.astype(np.float64))
    x_tr, x_te = _standardize(feats[tr], feats[te])
    side = dataset.size
    # targets in roughly unit range: centred/scaled pixels and d_r / 10 cm
    y = np.concatenate([(dataset.J2D.reshape(n, -1) - side / 2) / (side / 2), dataset.d_r[:, 1:] / 10.0], axis=1)
    rng = substream(cfg.seed, "probe")
    d_in, d_out = x_tr.shape[1], y.shape[1]
    lim1, lim2 = math.sqrt(6.0 / d_in), math.sqrt(6.0 / cfg.hidden)
    params = {"p1.w": rng.uniform(-lim1, lim1, (d_in, cfg.hidden)), "p1.b": np.zeros(cfg.hidden),
              "p2.w": rng.uniform(-lim2, lim2, (cfg.hidden, d_out)) * 0.1, "p2.b": np.zeros(d_out)}
    B = min(cfg.batch_size, len(tr))
    g = Graph(params)
    xi, yi = g.input("x", (B, d_in)), g.input("y", (B, d_out))
    pred = g.dense(g.relu(g.dense(xi, g.param("p1.w"), g.param("p1.b"))), g.param("p2.w"), g.param("p2.b"))
    g.output("loss", g.mean(g.abs(g.sub(pred, yi))))
    steps_per_epoch = max(1, len(tr) // B)
    sched = Schedule(cfg.lr, 0, cfg.epochs * steps_per_epoch)
    state = OptimizerState.zeros(params, lars=False, weight_decay=0.0)
    for step in range(sched.total_steps):
        if step % steps_per_epoch == 0:
            order = substream(cfg.seed, "probe", step // steps_per_epoch).permutation(len(tr))
        k = step % steps_per_epoch
        b = order[k * B:(k + 1) * B]
        g.forward({"x": x_tr[b], "y": y[tr][b]})
        grads = g.backward({"loss": 1.0}, wrt_inputs=False)
        new, state = adam_lars_step(params, {k2: grads[k2] for k2 in params}, state, lr_at(sched, step + 1))
        params.update(new)
    h = np.maximum(x_te @ params["p1.w"] + params["p1.b"], 0)
    out = h @ params["p2.w"] + params["p2.b"]
    j2d = out[:, :42].reshape(-1, 21, 2) * (side / 2) + side / 2
    d_r = np.concatenate([np.zeros((len(te), 1)), out[:, 42:] * 10.0], axis=1)
    test = dataset.subset(te)
    J3D = lift_predictions(j2d, d_r, test.K, bone_length(test.J3D))
    rep = metrics(J3D, test.J3D, "3d", pred_2d=j2d, gt_2d=test.J2D)
    return ProbeResult(rep.epe_2d, rep.epe, rep)


# -- composition search ----------------------------------------------------------------

def composition_key(names) -> str:
    return "+".join(n for n in aug.TRANSFORM_NAMES if n in set(names))


def composition_search(candidates: Sequence[str], cfg: PretrainConfig, unlabeled, labeled,
                       probe_cfg: ProbeConfig = ProbeConfig()) -> List[dict]:
    """Pretrain once per non-empty subset of ``candidates`` and rank by probe 3D EPE."""
    cands = list(dict.fromkeys(candidates))
    if not 1 <= len(cands) <= 5:
        raise ValueError("composition search takes 1 to 5 candidates")
    unknown = set(cands) - set(aug.TRANSFORM_NAMES)
    if unknown:
        raise ValueError(f"unknown transforms: {sorted(unknown)}")
    rows = []
    for r in range(1, len(cands) + 1):
        for subset in itertools.combinations(cands, r):
            run_cfg = replace(cfg, augment=cfg.augment.only(subset))
            res = pretrain(run_cfg, unlabeled)
            pr = probe(res.checkpoint.model(), labeled, probe_cfg)
            rows.append({"composition": composition_key(subset), "epe_3d": pr.epe_3d, "epe_2d": pr.epe_2d,
                         "final_loss": float(res.losses[-1])})
    rows.sort(key=lambda r: (r["epe_3d"], r["composition"]))
    for rank, r in enumerate(rows, 1):
        r["rank"] = rank
    return rows


def config_dict(cfg) -> dict:
    """JSON-friendly echo of a config dataclass."""
    def conv(v):
        if isinstance(v, tuple):
            return list(v)
        return v
    return {k: (config_dict(v) if hasattr(v, "__dataclass_fields__") else conv(v))
            for k, v in asdict(cfg).items()}
