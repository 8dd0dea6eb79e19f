"""Source pretraining, per-epoch pseudo-labelling and joint optimisation."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from . import diffcore as dc
from .config import ConfigError, TrainConfig
from .datagen import Clip, Dataset, GenConfig, generate, sample_frames, split_clips
from .diffcore import NonFiniteLoss, Tensor, normalize_rows
from .evaluation import MetricsReport, retrieval_report
from .losses import (BatchView, LossWeights, camera_ce, camera_confusion, check_finite,
                     identity_ce, pair_losses, total_loss, weighted_pair_sum)
from .membank import CENTROID, MemoryBank, rebuild
from .model import ReIDModel
from .pseudo import ClusterAssignment, ClusterParams, assign_pseudo_labels
from .selfpaced import floor_gamma, kth_neighbor_radius, optimal_weight

log = logging.getLogger(__name__)


# ------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: dict[int, int] = field(default_factory=dict)
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState,
              lr: float, weight_decay: float = 0.0) -> None:
    """Bias-corrected Adam with decoupled weight decay, in place on ``params``.

    Step counts are kept per parameter so a parameter that sits out a step
    keeps its own bias correction.
    """
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise dc.ShapeMismatch(f"grad {g.shape} vs param {p.shape}")
        key = id(p)
        if key not in state.m:
            state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
            state.t[key] = 0
        state.t[key] += 1
        t = state.t[key]
        m = state.m[key] = state.beta1 * state.m[key] + (1.0 - state.beta1) * g
        v = state.v[key] = state.beta2 * state.v[key] + (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Learning rate for 1-based ``epoch``: decayed once after each listed epoch."""
    n = sum(1 for e in config.lr_decay_epochs if epoch > e)
    return config.lr * config.lr_decay ** n


# ---------------------------------------------------------------- samples


@dataclass
class SampleSet:
    """Clip-level training samples of one domain."""

    frames: list[np.ndarray]          # full clip frames, for embedding
    clips: list[Clip]
    owner: np.ndarray                 # index of the parent tracklet within the domain
    ids: np.ndarray                   # 0-based identity (source) or true person id (target)
    cams: np.ndarray

    def __len__(self) -> int:
        return len(self.clips)


def build_samples(tracklets, n_clips: int, id_map: dict[int, int] | None = None) -> SampleSet:
    frames, clips, owner, ids, cams = [], [], [], [], []
    for ti, t in enumerate(tracklets):
        for c in split_clips(t, n_clips):
            frames.append(t.frames[c.frame_indices])
            clips.append(c)
            owner.append(ti)
            ids.append(id_map[t.person_id] if id_map is not None else t.person_id)
            cams.append(t.camera)
    return SampleSet(frames, clips, np.array(owner), np.array(ids), np.array(cams))


def tracklet_reps(model: ReIDModel, samples: SampleSet, n_tracklets: int) -> np.ndarray:
    """Clip representations averaged back to one row per tracklet."""
    clip_reps = model.embed(samples.frames)
    out = np.zeros((n_tracklets, clip_reps.shape[1]))
    np.add.at(out, samples.owner, clip_reps)
    return out / np.bincount(samples.owner, minlength=n_tracklets)[:, None]


# ------------------------------------------------------------------ state


@dataclass
class EpochState:
    epoch: int
    gamma: float
    assignment: ClusterAssignment | None = None
    bank: MemoryBank | None = None
    bank_version: int = 0
    losses: dict[str, float] = field(default_factory=dict)


@dataclass
class Trainer:
    config: TrainConfig
    dataset: Dataset
    model: ReIDModel = None
    reports: list[MetricsReport] = field(default_factory=list)
    refreshes: int = 0

    def __post_init__(self):
        cfg = self.config
        src, tgt = self.dataset.source, self.dataset.target
        if not src or not tgt:
            raise ConfigError("dataset needs both source and target tracklets")
        self.source_tracklets, self.target_tracklets = src, tgt
        self.id_map = {p: i for i, p in enumerate(sorted({t.person_id for t in src}))}
        self.src = build_samples(src, cfg.n_clips, self.id_map)
        self.tgt = build_samples(tgt, cfg.n_clips)
        self.tgt_ids = np.array([t.person_id for t in tgt])
        self.tgt_cams = np.array([t.camera for t in tgt])
        n_cams = self.dataset.n_cameras("target")
        if self.model is None:
            self.model = ReIDModel.init(self.dataset.d_in, cfg.d_hidden, cfg.feat_dim,
                                        len(self.id_map), max(n_cams, 2), cfg.seed, cfg.grl_scale)
        self.rng = np.random.default_rng([cfg.seed, 1])
        self.adam = AdamState(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        self.state = EpochState(0, cfg.gamma0)
        self.weights = LossWeights(cfg.delta1, cfg.delta2, cfg.delta3)
        self.cluster_params = ClusterParams(cfg.cluster_k, cfg.cluster_eps, cfg.min_pts)

    # -------------------------------------------------------------- pieces

    def _frames(self, samples: SampleSet, idx: Iterable[int]) -> np.ndarray:
        n = self.config.n_chunks
        return np.concatenate([samples.frames[i][sample_frames(
            Clip(0, 0, np.arange(len(samples.frames[i]))), n, self.rng)] for i in idx])

    def _step(self, loss: Tensor, lr: float) -> None:
        params = [p for p in loss.tape() if p._backward is None]
        for p in params:
            p.zero_grad()
        loss.backward()
        adam_step(params, [p.grad for p in params], self.adam, lr, self.config.weight_decay)

    def evaluate(self, epoch: int, losses: dict | None = None) -> MetricsReport:
        reps = tracklet_reps(self.model, self.tgt, len(self.target_tracklets))
        return retrieval_report(reps, self.tgt_ids, self.tgt_cams, epoch, losses)

    # ------------------------------------------------------------ pretrain

    def pretrain_source(self) -> ReIDModel:
        """Identity cross-entropy on source samples for ``warmup_epochs``."""
        cfg = self.config
        n = len(self.src)
        for _ in range(cfg.warmup_epochs):
            order = self.rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                g = self.model.represent(self._frames(self.src, idx), [cfg.n_chunks] * len(idx))
                batch = BatchView(g, self.src.ids[idx], np.full(len(idx), -1))
                loss = check_finite("identity", identity_ce(batch, self.model.id_cls))
                self._step(dc.scale(loss, cfg.delta1), cfg.warmup_lr)
        return self.model

    # ---------------------------------------------------------- per epoch

    def refresh(self) -> None:
        """Pseudo-label the target samples, rebuild the bank and set the pace."""
        cfg = self.config
        st = self.state
        tgt_reps = normalize_rows(self.model.embed(self.tgt.frames))
        st.assignment = assign_pseudo_labels(tgt_reps, self.cluster_params)
        src_feats = src_labels = None
        if cfg.source_keys:
            src_feats = normalize_rows(self.model.embed(self.src.frames))
            src_labels = self.src.ids
        st.bank = rebuild(tgt_reps, st.assignment, cfg.momentum, src_feats, src_labels)
        st.bank_version += 1
        self.refreshes += 1
        if cfg.contrastive == "knn_weighted" and cfg.pace == "knn":
            st.gamma = self.knn_gamma(tgt_reps)

    def _allowed(self, bank: MemoryBank, target_samples: np.ndarray, n_source: int) -> np.ndarray:
        allowed = np.ones((n_source + len(target_samples), len(bank)), dtype=bool)
        for r, s in enumerate(target_samples):
            k = bank.key_of_target(int(s))
            if bank.kinds[k] != CENTROID:
                allowed[n_source + r, k] = False
        return allowed

    def knn_gamma(self, tgt_reps: np.ndarray) -> float:
        """Largest k-th smallest pair loss between a target sample and the target keys."""
        bank = self.state.bank
        samples = np.arange(len(tgt_reps))
        allowed = self._allowed(bank, samples, 0)
        l = pair_losses(Tensor(tgt_reps), bank.keys, allowed, self.config.temperature).data
        tk = np.zeros(len(bank), dtype=bool)
        tk[bank.target_keys] = True
        l = np.where(allowed & tk[None, :], l, np.nan)
        k = min(self.config.knn_k, int(tk.sum()) - 1)
        return floor_gamma(float(kth_neighbor_radius(l, max(k, 1)).max()))

    def contrastive_term(self, q: Tensor, src_idx, tgt_idx) -> Tensor:
        cfg, st = self.config, self.state
        bank = st.bank
        n_src = len(src_idx) if cfg.source_keys else 0
        rows = np.concatenate([np.arange(len(src_idx))[:n_src],
                               len(src_idx) + np.arange(len(tgt_idx))])
        queries = dc.rows(q, rows)
        allowed = self._allowed(bank, tgt_idx, n_src)
        l = pair_losses(queries, bank.keys, allowed, cfg.temperature)

        w = np.zeros(l.shape)
        for r in range(n_src):
            w[r, bank.key_of_source(int(self.src.ids[src_idx[r]]))] = 1.0
        tgt_cols = bank.target_keys
        gamma = None
        for r, s in enumerate(tgt_idx):
            row = n_src + r
            if cfg.contrastive == "plain":
                k = bank.key_of_target(int(s))
                if bank.kinds[k] == CENTROID:
                    w[row, k] = 1.0
            else:
                cols = tgt_cols[allowed[row, tgt_cols]]
                w[row, cols] = optimal_weight(l.data[row, cols], st.gamma)
        if cfg.contrastive == "knn_weighted":
            gamma = st.gamma
        return weighted_pair_sum(l, w, len(rows), gamma, allowed)

    def train_step(self, src_idx: np.ndarray, tgt_idx: np.ndarray, lr: float) -> dict[str, float]:
        cfg, st, model = self.config, self.state, self.model
        frames = np.concatenate([self._frames(self.src, src_idx), self._frames(self.tgt, tgt_idx)])
        n_rows = len(src_idx) + len(tgt_idx)
        g = model.represent(frames, [cfg.n_chunks] * n_rows)
        batch = BatchView(g, np.concatenate([self.src.ids[src_idx], np.full(len(tgt_idx), -1)]),
                          np.concatenate([np.full(len(src_idx), -1), self.tgt.cams[tgt_idx]]))
        zero = Tensor(0.0)
        ce = identity_ce(batch, model.id_cls) if cfg.delta1 > 0 else zero
        if cfg.camera_loss == "ce" and cfg.delta2 > 0:
            cam = camera_ce(batch, model.cam_cls)
        elif cfg.camera_loss == "confusion" and cfg.delta2 > 0:
            cam = camera_confusion(batch, model.cam_cls)
        else:
            cam = zero
        q = dc.l2_normalize_rows(g)
        if cfg.contrastive != "none" and cfg.delta3 > 0:
            contr = self.contrastive_term(q, src_idx, tgt_idx)
        else:
            contr = zero
        for name, term in (("identity", ce), ("camera", cam), ("contrastive", contr)):
            check_finite(name, term)
        loss = total_loss((ce, cam, contr), self.weights)
        if loss.requires_grad:
            self._step(loss, lr)

        qd = q.data
        for r, i in enumerate(tgt_idx):
            st.bank.update_target(int(i), qd[len(src_idx) + r])
        if cfg.source_keys:
            for r, i in enumerate(src_idx):
                st.bank.update_source(int(self.src.ids[i]), qd[r])
        return {"ce": ce.item(), "cam": cam.item(), "contr": contr.item()}

    def train_epoch(self) -> MetricsReport:
        cfg, st = self.config, self.state
        st.epoch += 1
        self.refresh()
        lr = lr_at(cfg, st.epoch)
        half = cfg.batch_size // 2
        tgt_order = self.rng.permutation(len(self.tgt))
        src_stream = itertools.chain.from_iterable(
            self.rng.permutation(len(self.src)) for _ in itertools.count())
        sums = {"ce": 0.0, "cam": 0.0, "contr": 0.0}
        steps = 0
        for start in range(0, len(tgt_order), half):
            tgt_idx = tgt_order[start:start + half]
            src_idx = np.fromiter(itertools.islice(src_stream, cfg.batch_size - half), dtype=np.int64)
            parts = self.train_step(src_idx, tgt_idx, lr)
            for k in sums:
                sums[k] += parts[k]
            steps += 1
        st.losses = {k: v / steps for k, v in sums.items()}
        if cfg.contrastive == "knn_weighted" and cfg.pace == "growth":
            st.gamma = (1.0 + cfg.alpha) * st.gamma
        report = self.evaluate(st.epoch, st.losses)
        self.reports.append(report)
        log.debug("epoch %d lr %.2g gamma %.4g clusters %d rank1 %.3f probe %.3f",
                  st.epoch, lr, st.gamma, st.assignment.n_clusters, report.rank1,
                  report.camera_probe_accuracy)
        return report

    def fit(self, on_report: Callable[[MetricsReport], None] | None = None) -> list[MetricsReport]:
        self.pretrain_source()
        first = self.evaluate(0)
        self.reports.append(first)
        if on_report:
            on_report(first)
        for _ in range(self.config.epochs):
            report = self.train_epoch()
            if on_report:
                on_report(report)
        return self.reports


def train(config: TrainConfig, dataset: Dataset, on_report=None) -> Trainer:
    trainer = Trainer(config, dataset)
    trainer.fit(on_report)
    return trainer


# --------------------------------------------------------------- ablation


@dataclass(frozen=True)
class AblationSuite:
    """A grid of config overrides run over the same seeds.

    Each seed drives both data generation (from ``gen``) and training,
    unless ``dataset`` is given, in which case only training is reseeded.
    """

    base: TrainConfig = TrainConfig()
    grid: tuple[tuple[str, tuple], ...] = ()
    seeds: tuple[int, ...] = (0,)
    gen: GenConfig = GenConfig()
    dataset: Dataset | None = None

    def cells(self) -> list[dict]:
        if not self.grid:
            raise ConfigError("ablation grid is empty")
        names = [k for k, _ in self.grid]
        return [dict(zip(names, combo)) for combo in itertools.product(*(v for _, v in self.grid))]


def run_cell(suite: AblationSuite, cell: dict, seed: int) -> dict:
    cfg = TrainConfig.from_mapping({**cell, "seed": seed}, suite.base)
    data = suite.dataset if suite.dataset is not None else generate(replace(suite.gen, seed=seed))
    trainer = train(cfg, data)
    final = trainer.reports[-1]
    return {**cell, "seed": seed, "rank1": final.rank[1], "rank5": final.rank[5],
            "rank10": final.rank[10], "mAP": final.mAP,
            "camera_probe_acc": final.camera_probe_accuracy,
            "samples": len(trainer.tgt) + len(trainer.src)}


def run_ablation(suite: AblationSuite, skip: Callable[[dict, int], dict | None] | None = None,
                 on_row: Callable[[dict], None] | None = None) -> list[dict]:
    """Run every (cell, seed) pair; ``skip`` may return a cached row instead."""
    rows = []
    for cell in suite.cells():
        for seed in suite.seeds:
            row = skip(cell, seed) if skip else None
            if row is None:
                row = run_cell(suite, cell, seed)
            rows.append(row)
            if on_row:
                on_row(row)
    return rows


METRIC_COLUMNS = ("rank1", "rank5", "rank10", "mAP", "camera_probe_acc")


def summarize(rows: list[dict], cell_keys: Sequence[str]) -> list[dict]:
    """One row per cell, in first-seen order: metric means over seeds plus
    population std in ``<metric>_std`` columns. The seed column reads
    ``summary``."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in cell_keys), []).append(r)
    out = []
    for key, rs in groups.items():
        row = dict(zip(cell_keys, key))
        row["seed"] = "summary"
        for m in METRIC_COLUMNS:
            vals = [r[m] for r in rs]
            row[m] = float(np.mean(vals))
            row[m + "_std"] = float(np.std(vals))
        out.append(row)
    return out


def ablation_csv(rows: list[dict], cell_keys: Sequence[str]) -> str:
    """Per-seed rows and summary rows share one header; std cells are blank
    on per-seed rows."""
    std_cols = [m + "_std" for m in METRIC_COLUMNS]
    header = list(cell_keys) + ["seed", *METRIC_COLUMNS, *std_cols]
    lines = [",".join(header)]
    for r in rows:
        vals = [str(r[k]) for k in cell_keys] + [str(r["seed"])]
        vals += [f"{float(r[m]):.6g}" for m in METRIC_COLUMNS]
        vals += [f"{float(r[m]):.6g}" if m in r else "" for m in std_cols]
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"
