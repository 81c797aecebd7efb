"""Alternating optimization loop: pseudo-label, score, select, retrain, model by model.

Per iteration and per model ``j`` (ascending id):

1. fuse the detections of the participating models over the unlabeled pool
2. turn them into pseudo labels, dropping discarded images for this iteration
3. compute model ``j``'s class-conditional losses on those pseudo labels
4. update ``V^j`` in closed form with the other selections fixed
5. retrain model ``j`` on the labeled images plus its selected pseudo-labeled images

After every model has been visited the pace targets grow. The loop stops at
``max_iterations``, when no selection changed, or when every model has
selected the whole pool.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .curriculum import (
    CurriculumConfig,
    Discarded,
    PseudoLabelSet,
    class_losses,
    class_thresholds,
    generate_pseudo_labels,
)
from .data import DatasetSplit, ProposalConfig, SceneSpec, sample_initial_labels
from .detector import DetectionOutput, DetectorModel, TrainingError, fuse, train
from .evaluate import APResult, CorLocResult, PseudoQuality, average_precision, corloc, pseudo_quality
from .features import ProposalBank
from .geometry import BBox, ScoredBox, nms_indices
from .selector import PaceState, SelectionMatrix, advance_pace, gamma_matrix, objective, update_v

log = logging.getLogger(__name__)

MODES = ("spl_single", "spl_ensemble", "mspld")


@dataclass
class ModelSpec:
    family: str
    view: list[int]


@dataclass
class RunConfig:
    models: list[ModelSpec]
    mode: str = "mspld"
    k: int = 3
    max_iterations: int = 6
    seed: int = 0
    proposal_seed: int = 0
    gamma: float | None = None  # None: 0.2 / (m - 1)
    row_rule: str = "margin"
    test_nms_iou: float = 0.3
    min_det_score: float = 1e-3
    neg_iou: float = 0.3  # background proposals overlap every annotation below this
    neg_per_image: int = 24
    pseudo_negatives: bool = False  # sample background from pseudo-labeled images too
    train_all_classes: bool = False  # keep every pseudo box of a selected image, not just the selected class
    workers: int = 1
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    proposals: ProposalConfig = field(default_factory=ProposalConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not self.models:
            raise ValueError("at least one model is required")
        if self.mode == "mspld" and len(self.models) < 2:
            raise ValueError("mspld mode needs at least two models")
        if self.mode == "spl_single" and len(self.models) != 1:
            raise ValueError("spl_single mode runs exactly one model")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")

    @property
    def m(self) -> int:
        return len(self.models)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        obj = dict(obj)
        obj["models"] = [ModelSpec(**m) for m in obj["models"]]
        obj["curriculum"] = CurriculumConfig(**obj.get("curriculum", {}))
        obj["proposals"] = ProposalConfig(**obj.get("proposals", {}))
        obj["scene"] = SceneSpec(**obj.get("scene", {}))
        return cls(**obj)

    def single(self, j: int) -> "RunConfig":
        """The spl_single configuration running only model ``j``."""
        return replace(self, models=[self.models[j]], mode="spl_single")


@dataclass
class ModelTrace:
    model_id: int
    selected_images: int
    pseudo_boxes: int
    img_precision: float
    img_recall: float
    ins_precision: float
    ins_recall: float
    test_map: float
    corloc: float


@dataclass
class IterationTrace:
    iteration: int
    targets: list[int]  # per-class pace targets this iteration selected against
    per_model: list[ModelTrace]
    test_map: float
    corloc: float
    objective: float | None
    block_objectives: list[tuple[float | None, float]] = field(default_factory=list)
    discarded: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunResult:
    config: RunConfig
    data: DatasetSplit
    traces: list[IterationTrace]  # iteration 0 is the supervised initialization
    models: list[DetectorModel]
    selections: list[SelectionMatrix]
    pseudo: list[dict[int, PseudoLabelSet]]  # selected pseudo labels per model
    history: list[list[DetectorModel]]  # models after each traced iteration

    @property
    def final(self) -> IterationTrace:
        return self.traces[-1]


def _map(fn: Callable, items: Sequence, workers: int) -> list:
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def prepare_split(data: DatasetSplit, config: RunConfig) -> DatasetSplit:
    if data.labeled_ids:
        return data
    return sample_initial_labels(data, config.k, config.seed)


def initial_models(config: RunConfig, data: DatasetSplit, model_ids: Sequence[int] | None = None) -> list[DetectorModel]:
    d = data.images[0].feature_grid.shape[2] if data.images else 1
    ids = range(config.m) if model_ids is None else model_ids
    return [
        DetectorModel(j, spec.family, tuple(spec.view), data.num_classes, d, seed=config.seed * 1009 + j,
                      neg_iou=config.neg_iou, neg_per_image=config.neg_per_image)
        for j, spec in zip(ids, config.models)
    ]


# -- evaluation helpers ------------------------------------------------------

def detect(models: Sequence[DetectorModel], bank: ProposalBank, image_id: int,
           nms_iou: float, min_score: float) -> list[ScoredBox]:
    """Fused, per-class NMS'd detections of ``models`` on one image."""
    boxes, feats = bank.get(image_id)
    scores = np.mean([m.score_features(feats) for m in models], axis=0) if len(models) > 1 \
        else models[0].score_features(feats)
    out = []
    for c in range(scores.shape[1]):
        for n in nms_indices(boxes, scores[:, c], nms_iou, bank.overlaps(image_id)):
            if scores[n, c] >= min_score:
                out.append(ScoredBox(BBox.from_seq(boxes[n]), c, float(scores[n, c])))
    return out


def top_detections(models: Sequence[DetectorModel], bank: ProposalBank, image_id: int) -> dict[int, BBox]:
    boxes, feats = bank.get(image_id)
    scores = np.mean([m.score_features(feats) for m in models], axis=0)
    if len(boxes) == 0:
        return {}
    # argmax keeps the lowest proposal index on ties
    return {c: BBox.from_seq(boxes[int(np.argmax(scores[:, c]))]) for c in range(scores.shape[1])}


def evaluate_models(models: Sequence[DetectorModel], data: DatasetSplit, bank: ProposalBank,
                    config: RunConfig) -> tuple[APResult, CorLocResult]:
    test = sorted(data.test_ids)
    dets = {i: detect(models, bank, i, config.test_nms_iou, config.min_det_score) for i in test}
    ap = average_precision(dets, {i: data[i].objects for i in test}, data.num_classes)
    trainval = [i for i in sorted(data.trainval_ids) if data[i].objects]
    tops = {i: top_detections(models, bank, i) for i in trainval}
    cl = corloc(tops, {i: data[i].objects for i in trainval}, data.num_classes)
    return ap, cl


def _quality(pseudo: dict[int, PseudoLabelSet], data: DatasetSplit) -> PseudoQuality:
    gts = {i: data[i].objects for i in data.unlabeled_ids}
    return pseudo_quality({i: p.annotations for i, p in pseudo.items()}, gts)


# -- the loop ------------------------------------------------------------------

class _Loop:
    def __init__(self, config: RunConfig, data: DatasetSplit):
        self.config = config
        self.data = data
        self.C = data.num_classes
        self.bank = ProposalBank(data, config.proposals, config.proposal_seed)
        self.labeled = [(img, img.objects) for img in data.subset(data.labeled_ids)]
        self.unl = sorted(data.unlabeled_ids)
        self.u = len(self.unl)
        m = config.m
        if config.mode == "mspld":
            self.gamma = gamma_matrix(m, config.gamma)
        else:
            self.gamma = np.zeros((m, m))
        self.curriculum = config.curriculum
        self.negatives_from = None if config.pseudo_negatives else frozenset(data.labeled_ids)

    def train(self, model: DetectorModel, pseudo: dict[int, PseudoLabelSet]) -> DetectorModel:
        pool = list(self.labeled)
        for i in sorted(pseudo):
            p = pseudo[i]
            if not isinstance(p, PseudoLabelSet):
                raise AssertionError("discarded image reached the training pool")
            pool.append((self.data[i], p.annotations))
        try:
            return train(model, pool, self.bank, self.negatives_from)
        except TrainingError as e:
            raise TrainingError(f"training failed ({e}); labeled set is {sorted(self.data.labeled_ids)}") from None

    def score_pool(self, model: DetectorModel) -> list[DetectionOutput]:
        def one(i):
            boxes, feats = self.bank.get(i)
            return DetectionOutput(i, model.score_features(feats), boxes)
        return _map(one, self.unl, self.config.workers)

    def trace(self, iteration: int, models, selections, pseudo, targets, objective_value, blocks, discarded):
        per_model = []
        for j, model in enumerate(models):
            ap, cl = evaluate_models([model], self.data, self.bank, self.config)
            q = _quality(pseudo[j], self.data)
            per_model.append(ModelTrace(
                model.model_id, len(pseudo[j]), int(sum(len(p) for p in pseudo[j].values())),
                q.img_precision, q.img_recall, q.ins_precision, q.ins_recall, ap.mean, cl.mean,
            ))
        if len(models) > 1:
            ap, cl = evaluate_models(models, self.data, self.bank, self.config)
            test_map, cl_mean = ap.mean, cl.mean
        else:
            test_map, cl_mean = per_model[0].test_map, per_model[0].corloc
        return IterationTrace(iteration, list(targets), per_model, test_map, cl_mean, objective_value,
                              blocks, discarded)

    def run(self, checkpoint_dir: Path | None = None, resume: dict | None = None,
            on_trace: Callable[[IterationTrace], None] | None = None) -> RunResult:
        cfg, C, u = self.config, self.C, self.u
        m = cfg.m
        if resume is None:
            models = [self.train(mdl, {}) for mdl in initial_models(cfg, self.data)]
            selections = [SelectionMatrix.zeros(j, u, C) for j in range(m)]
            pseudo: list[dict[int, PseudoLabelSet]] = [{} for _ in range(m)]
            losses = np.full((m, u, C), np.inf)
            lambdas = np.zeros((m, C))
            pace = PaceState(1, (cfg.k,) * C, self.gamma)
            thresholds = cfg.curriculum.class_specific_thresholds
            start = 1
            traces = [self.trace(0, models, selections, pseudo, pace.targets, 0.0, [], 0)]
            history = [list(models)]
            if on_trace:
                on_trace(traces[-1])
        else:
            models, selections, pseudo, losses, lambdas, pace, thresholds, traces, history = _restore(resume, self)
            start = traces[-1].iteration + 1
        outputs = [self.score_pool(mdl) for mdl in models]
        stopped = resume is not None and resume.get("stopped", False)

        for iteration in range(start, cfg.max_iterations + 1):
            if stopped:
                break
            previous = [s.v.copy() for s in selections]
            blocks = []
            discarded = 0
            for j in range(m):
                group = range(m) if cfg.mode == "mspld" else [j]
                fused = [fuse([outputs[g][n] for g in group]) for n in range(u)]
                if thresholds is None:
                    thresholds = class_thresholds(fused, C, cfg.curriculum.threshold_quantile)
                ccfg = replace(cfg.curriculum, class_specific_thresholds=list(thresholds))
                labels = _map(lambda f: generate_pseudo_labels(f, ccfg, self.bank.overlaps(f.image_id)),
                              fused, cfg.workers)
                discarded = sum(isinstance(p, Discarded) for p in labels)

                lj = np.full((u, C), np.inf)
                for n, p in enumerate(labels):
                    if isinstance(p, PseudoLabelSet):
                        lj[n] = class_losses(outputs[j][n].scores[p.source, p.class_ids], p.class_ids, C)
                losses[j] = lj
                others = [selections[k] for k in range(m) if k != j]
                new = update_v(j, losses, replace(pace, gamma=self.gamma), others, cfg.row_rule)
                before_sel = list(selections)
                before_lam = lambdas.copy()
                before_lam[j] = new.thresholds
                try:
                    before = objective(losses, before_sel, before_lam, self.gamma)
                except ValueError:
                    before = None  # old selection hits a class the new pseudo labels dropped
                selections[j] = new
                lambdas[j] = new.thresholds
                after = objective(losses, selections, lambdas, self.gamma)
                blocks.append((before, after))

                if cfg.train_all_classes:
                    pseudo[j] = {self.unl[n]: labels[n] for n in new.selected_rows}
                else:
                    pseudo[j] = {self.unl[n]: labels[n].restrict(np.flatnonzero(new.v[n]))
                                 for n in new.selected_rows}
                models[j] = self.train(models[j], pseudo[j])
                outputs[j] = self.score_pool(models[j])

            used = pace.targets
            pace = advance_pace(pace)
            traces.append(self.trace(iteration, models, selections, pseudo, used,
                                     objective(losses, selections, lambdas, self.gamma), blocks, discarded))
            history.append(list(models))
            if on_trace:
                on_trace(traces[-1])
            unchanged = all(np.array_equal(p, s.v) for p, s in zip(previous, selections))
            exhausted = all(len(s.selected_rows) == u for s in selections)
            stopped = unchanged or exhausted
            if checkpoint_dir is not None:
                save_checkpoint(checkpoint_dir / f"iter_{iteration:02d}.json", models, selections, pseudo,
                                losses, lambdas, pace, thresholds, traces, stopped)
            if stopped:
                log.info("converged after iteration %d (unchanged=%s, exhausted=%s)", iteration, unchanged, exhausted)
                break

        return RunResult(cfg, self.data, traces, models, selections, pseudo, history)


def run(config: RunConfig, data: DatasetSplit, checkpoint_dir: str | Path | None = None,
        resume: dict | None = None, on_trace: Callable[[IterationTrace], None] | None = None) -> RunResult:
    """Run one configuration. ``spl_ensemble`` delegates to :func:`run_ensemble_baseline`."""
    data = prepare_split(data, config)
    if config.mode == "spl_ensemble":
        return run_ensemble_baseline(config, data)
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)
    return _Loop(config, data).run(ckpt, resume, on_trace)


def run_ensemble_baseline(config: RunConfig, data: DatasetSplit,
                          singles: Sequence[RunResult] | None = None) -> RunResult:
    """Independent single-model runs, fused only at test time.

    ``singles`` may carry already computed ``spl_single`` runs of each model.
    """
    data = prepare_split(data, config)
    if singles is None:
        singles = [run(config.single(j), data) for j in range(config.m)]
    bank = ProposalBank(data, config.proposals, config.proposal_seed)
    length = max(len(s.history) for s in singles)
    traces, history = [], []
    for t in range(length):
        models = [replace(s.history[min(t, len(s.history) - 1)][0], model_id=j) for j, s in enumerate(singles)]
        ap, cl = evaluate_models(models, data, bank, config)
        per_model = [s.traces[min(t, len(s.traces) - 1)].per_model[0] for s in singles]
        per_model = [replace(pm, model_id=j) for j, pm in enumerate(per_model)]
        traces.append(IterationTrace(t, singles[0].traces[min(t, len(singles[0].traces) - 1)].targets,
                                     per_model, ap.mean, cl.mean, None))
        history.append(models)
    return RunResult(
        config, data, traces, history[-1],
        [replace(s.selections[0], model_id=j) for j, s in enumerate(singles)],
        [s.pseudo[0] for s in singles], history,
    )


# -- checkpoints ------------------------------------------------------------------

def _enc(x: np.ndarray):
    return [[None if not np.isfinite(v) else float(v) for v in row] for row in x]


def _dec(rows) -> np.ndarray:
    return np.array([[np.inf if v is None else v for v in row] for row in rows], dtype=float)


def save_checkpoint(path: Path, models, selections, pseudo, losses, lambdas, pace, thresholds, traces, stopped):
    state = {
        "models": [mdl.to_dict() for mdl in models],
        "selections": [s.v.tolist() for s in selections],
        "pseudo": [
            {str(i): {"boxes": p.boxes.tolist(), "class_ids": p.class_ids.tolist(),
                      "scores": p.scores.tolist(), "source": p.source.tolist()} for i, p in pj.items()}
            for pj in pseudo
        ],
        "losses": [_enc(lj) for lj in losses],
        "lambdas": lambdas.tolist(),
        "pace": pace.to_dict(),
        "thresholds": None if thresholds is None else list(thresholds),
        "traces": [t.to_dict() for t in traces],
        "stopped": stopped,
    }
    path.write_text(json.dumps(state), encoding="utf-8")


def load_checkpoint(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def trace_from_dict(obj: dict) -> IterationTrace:
    obj = dict(obj)
    obj["per_model"] = [ModelTrace(**pm) for pm in obj["per_model"]]
    obj["block_objectives"] = [tuple(b) for b in obj["block_objectives"]]
    return IterationTrace(**obj)


def _restore(state: dict, loop: _Loop):
    models = [DetectorModel.from_dict(d) for d in state["models"]]
    selections = [SelectionMatrix(j, np.asarray(v, dtype=np.int8).reshape(loop.u, loop.C))
                  for j, v in enumerate(state["selections"])]
    pseudo = [
        {int(i): PseudoLabelSet(int(i), np.asarray(p["boxes"], dtype=float).reshape(-1, 4),
                                np.asarray(p["class_ids"], dtype=int), np.asarray(p["scores"], dtype=float),
                                np.asarray(p["source"], dtype=int)) for i, p in pj.items()}
        for pj in state["pseudo"]
    ]
    losses = np.stack([_dec(lj).reshape(loop.u, loop.C) for lj in state["losses"]])
    lambdas = np.asarray(state["lambdas"], dtype=float)
    pace = PaceState.from_dict(state["pace"])
    thresholds = state["thresholds"]
    traces = [trace_from_dict(t) for t in state["traces"]]
    history = [models]
    return models, selections, pseudo, losses, lambdas, pace, thresholds, traces, history
