"""Noisy-student orchestration: teacher training, pseudo-label generation
with confidence/top-k/exclusivity filtering, mixed-batch student training,
and the iteration chain with per-iteration reports.

Every random stream is counter-based (seed plus stream/step tags), so any
run is a pure function of (config, seed) and training can resume from a
checkpoint bit-exactly using only the saved step counter and optimizer
state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as F
from .arch import MakNet, build_maknet
from .checkpoint import (
    checkpoint_id,
    load_checkpoint,
    model_tensors,
    restore_model_tensors,
    save_checkpoint,
)
from .config import RunConfig, parse_config
from .data import LabelOntology, Sample, augment, load_samples
from .metrics import EvalResult, score_matrix_metrics
from .optim import FocalLossConfig, focal_loss, inverse_frequency_weights, ranger
from .tensor import Tensor, no_grad

__all__ = [
    "PseudoLabelRecord",
    "IterationReport",
    "pseudo_label_filter",
    "Trainer",
    "SemisupData",
    "load_semisup_data",
    "batch_scores",
    "evaluate_samples",
    "pseudo_label_pool",
    "train_teacher",
    "train_student",
    "noisy_student_iterate",
    "write_pseudo_labels",
    "read_pseudo_labels",
    "summary_table",
]

TOP_K = 15
CONFIDENCE_CUTOFF = 0.5


@dataclass(frozen=True)
class PseudoLabelRecord:
    sample_id: str
    retained: tuple[int, ...]  # ascending label ids
    confidences: tuple[float, ...]  # aligned with retained
    iteration: int
    checkpoint: str


def pseudo_label_filter(
    scores: np.ndarray, ontology: LabelOntology
) -> tuple[int, ...]:
    """Keep labels with confidence > 0.5 among the top 15 predictions, then
    resolve ontology-exclusive conflicts greedily by descending score
    (score ties prefer the lower label id)."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(len(scores)), -scores))
    candidates = [
        int(i) for i in order[:TOP_K] if scores[i] > CONFIDENCE_CUTOFF
    ]
    kept: list[int] = []
    for label in candidates:  # already sorted by (-score, id)
        if all(not ontology.excludes(label, other) for other in kept):
            kept.append(label)
    return tuple(sorted(kept))


def write_pseudo_labels(path, records: list[PseudoLabelRecord]) -> None:
    """`sample_id<TAB>label:conf,...` per line; empty field = filtered out."""
    lines = []
    for r in records:
        field = ",".join(
            f"{label}:{conf:.6f}" for label, conf in zip(r.retained, r.confidences)
        )
        lines.append(f"{r.sample_id}\t{field}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_pseudo_labels(path, iteration: int = 0, checkpoint: str = "") -> list[PseudoLabelRecord]:
    records = []
    for raw in Path(path).read_text().splitlines():
        if not raw.strip():
            continue
        sample_id, field = raw.split("\t", 1)
        if field:
            pairs = [chunk.split(":") for chunk in field.split(",")]
            retained = tuple(int(a) for a, _ in pairs)
            confs = tuple(float(b) for _, b in pairs)
        else:
            retained, confs = (), ()
        records.append(
            PseudoLabelRecord(sample_id, retained, confs, iteration, checkpoint)
        )
    return records


# ----------------------------------------------------------------------
# deterministic training loop


class Trainer:
    """Mixed-batch trainer with counter-based rng streams.

    Teacher mode (`pseudo_samples=None`): plain batches from the labeled
    pool, no noise. Student mode: each step concatenates `batch` labeled and
    `batch` pseudo-labeled samples (2B total) and applies augmentation noise
    plus dropout to every input.
    """

    def __init__(
        self,
        model: MakNet,
        cfg: RunConfig,
        labeled: list[Sample],
        pseudo_samples: list[Sample] | None = None,
        noise: bool = False,
        seed: int = 0,
        batch: int | None = None,
    ):
        if not labeled:
            raise ValueError("labeled pool is empty")
        if pseudo_samples is not None and not pseudo_samples:
            raise ValueError("student training requires a non-empty pseudo pool")
        self.model = model
        self.cfg = cfg
        self.labeled = labeled
        self.pseudo = pseudo_samples
        self.noise = noise
        self.seed = seed
        self.batch = batch if batch is not None else cfg["semisup"]["batch"]
        self.step = 0
        self.dtype = model.config.np_dtype()
        self.aug_cfg = cfg.augment_config()

        targets = np.stack([s.labels for s in labeled])
        if cfg["optim"]["label_weighting"] == "inverse_frequency":
            weights = inverse_frequency_weights(
                targets,
                clip=(cfg["optim"]["weight_clip_lo"], cfg["optim"]["weight_clip_hi"]),
            )
        else:
            weights = None
        self.loss_cfg = FocalLossConfig(
            gamma=cfg["optim"]["focal_gamma"], label_weights=weights
        )
        self.opt = ranger(model.parameters(), cfg.ranger_config(student=noise))
        if not noise:
            model.set_dropout_p(0.0)
        self._perm_cache: dict[tuple[int, int], np.ndarray] = {}

    # counter-based draws --------------------------------------------------
    def _perm(self, pool_tag: int, epoch: int, n: int) -> np.ndarray:
        key = (pool_tag, epoch)
        if key not in self._perm_cache:
            if len(self._perm_cache) > 4:
                self._perm_cache.clear()
            rng = np.random.default_rng([self.seed, 31, pool_tag, epoch])
            self._perm_cache[key] = rng.permutation(n)
        return self._perm_cache[key]

    def _draw(self, pool: list[Sample], pool_tag: int, count: int) -> list[Sample]:
        n = len(pool)
        out = []
        for t in range(count):
            gidx = self.step * count + t
            epoch, pos = divmod(gidx, n)
            out.append(pool[self._perm(pool_tag, epoch, n)[pos]])
        return out

    def _assemble(self, samples: list[Sample]) -> tuple[Tensor, np.ndarray]:
        images = []
        targets = []
        for slot, sample in enumerate(samples):
            img = sample.image.astype(np.float64)
            if self.noise:
                rng = np.random.default_rng([self.seed, 32, self.step, slot])
                img = augment(img, rng, self.aug_cfg, training=True)
            images.append(img / 255.0)
            targets.append(sample.labels)
        x = Tensor(np.stack(images).astype(self.dtype))
        return x, np.stack(targets)

    def step_once(self) -> float:
        batch = self._draw(self.labeled, 0, self.batch)
        if self.pseudo is not None:
            batch = batch + self._draw(self.pseudo, 1, self.batch)
        x, y = self._assemble(batch)
        if self.noise:
            self.model.set_noise_rng(np.random.default_rng([self.seed, 33, self.step]))
        self.model.train()
        self.opt.zero_grad()
        scores = self.model.scores(x)
        loss = focal_loss(scores, y, self.loss_cfg)
        loss.backward()
        self.opt.step()
        self.step += 1
        return loss.item()

    def run(self, total_steps: int) -> list[float]:
        losses = []
        while self.step < total_steps:
            losses.append(self.step_once())
        return losses

    # checkpoint plumbing ---------------------------------------------------
    def train_state(self) -> dict[str, np.ndarray]:
        state = self.opt.state_arrays()
        state["trainer.step"] = np.array([self.step], dtype=np.float64)
        return state

    def load_train_state(self, state: dict[str, np.ndarray]) -> None:
        self.opt.load_state_arrays(state)
        self.step = int(state["trainer.step"][0])


# ----------------------------------------------------------------------
# data plumbing


@dataclass
class SemisupData:
    labeled: list[Sample]
    unlabeled: list[Sample]
    val: list[Sample]
    test: list[Sample]
    ontology: LabelOntology


def load_semisup_data(cfg: RunConfig) -> SemisupData:
    root = cfg.data_root()
    num_labels = cfg["model"]["num_labels"]
    for name in ("labeled.tsv", "unlabeled.tsv", "val.tsv", "test.tsv", "ontology.txt"):
        if not (root / name).exists():
            raise FileNotFoundError(
                f"dataset file {root / name} missing; run gen-data first"
            )
    return SemisupData(
        labeled=load_samples(root, root / "labeled.tsv", num_labels, "labeled"),
        unlabeled=load_samples(root, root / "unlabeled.tsv", num_labels, "unlabeled"),
        val=load_samples(root, root / "val.tsv", num_labels, "labeled"),
        test=load_samples(root, root / "test.tsv", num_labels, "labeled"),
        ontology=LabelOntology.load(root / "ontology.txt"),
    )


def batch_scores(model: MakNet, samples: list[Sample], batch_size: int) -> np.ndarray:
    """Inference-mode sigmoid scores, deterministic over manifest order."""
    model.eval()
    dtype = model.config.np_dtype()
    chunks = []
    with no_grad():
        for i in range(0, len(samples), batch_size):
            block = samples[i : i + batch_size]
            x = Tensor(
                np.stack([s.image for s in block]).astype(dtype) / dtype(255.0)
            )
            chunks.append(model.scores(x).data.astype(np.float64))
    return np.concatenate(chunks, axis=0)


def evaluate_samples(
    model: MakNet, samples: list[Sample], batch_size: int, threshold: float = 0.5
) -> EvalResult:
    scores = batch_scores(model, samples, batch_size)
    truths = np.stack([s.labels for s in samples])
    return score_matrix_metrics(scores, truths, threshold)


def pseudo_label_pool(
    model: MakNet,
    unlabeled: list[Sample],
    ontology: LabelOntology,
    batch_size: int,
    iteration: int,
    checkpoint: str,
) -> list[PseudoLabelRecord]:
    """One record per unlabeled sample, in manifest order. Samples whose
    retained set is empty keep their record but are excluded from training."""
    scores = batch_scores(model, unlabeled, batch_size)
    records = []
    for sample, row in zip(unlabeled, scores):
        retained = pseudo_label_filter(row, ontology)
        confs = tuple(float(row[label]) for label in retained)
        records.append(
            PseudoLabelRecord(sample.stem, retained, confs, iteration, checkpoint)
        )
    return records


def pseudo_records_to_samples(
    records: list[PseudoLabelRecord],
    unlabeled: list[Sample],
    num_labels: int,
) -> list[Sample]:
    by_stem = {s.stem: s for s in unlabeled}
    out = []
    for r in records:
        if not r.retained:
            continue
        base = by_stem[r.sample_id]
        labels = np.zeros(num_labels, dtype=np.float64)
        labels[list(r.retained)] = 1.0
        out.append(Sample(stem=base.stem, image=base.image, labels=labels,
                          source="pseudo"))
    return out


# ----------------------------------------------------------------------
# teacher / student / iteration chain


def teacher_total_steps(cfg: RunConfig, n_labeled: int) -> int:
    epochs = cfg["semisup"]["teacher_epochs"]
    batch = cfg["semisup"]["teacher_batch"]
    return math.ceil(epochs * n_labeled / batch)


def train_teacher(
    cfg: RunConfig,
    data: SemisupData,
    max_steps: int | None = None,
    resume: dict | None = None,
) -> tuple[MakNet, Trainer]:
    """Teacher sees labeled data only and trains without noise (augmentation
    off, dropout off)."""
    model = build_maknet(cfg.model_config(), seed=cfg.seed)
    trainer = Trainer(
        model,
        cfg,
        data.labeled,
        pseudo_samples=None,
        noise=False,
        seed=cfg.seed,
        batch=cfg["semisup"]["teacher_batch"],
    )
    if resume is not None:
        restore_model_tensors(model, resume["tensors"])
        trainer.load_train_state(resume["train_state"])
    total = teacher_total_steps(cfg, len(data.labeled))
    if max_steps is not None:
        total = min(total, max_steps)
    trainer.run(total)
    return model, trainer


def train_student(
    cfg: RunConfig,
    data: SemisupData,
    records: list[PseudoLabelRecord],
    iteration: int,
) -> tuple[MakNet, Trainer]:
    """Student re-initializes from scratch each iteration and trains on
    mixed labeled + pseudo-labeled batches with noise applied to all inputs."""
    pool = pseudo_records_to_samples(records, data.unlabeled, cfg["model"]["num_labels"])
    if not pool:
        raise ValueError("no pseudo-labeled samples survive the filter")
    model = build_maknet(cfg.model_config(), seed=cfg.seed + 1000 * iteration)
    trainer = Trainer(
        model,
        cfg,
        data.labeled,
        pseudo_samples=pool,
        noise=True,
        seed=cfg.seed + 1000 * iteration,
        batch=cfg["semisup"]["batch"],
    )
    trainer.run(cfg["semisup"]["student_steps"])
    return model, trainer


@dataclass
class IterationReport:
    iteration: int
    role: str  # "teacher" or "student"
    checkpoint: str
    pseudo_labeler: str | None
    val: EvalResult
    test: EvalResult
    pseudo_total: int = 0
    pseudo_kept: int = 0
    pseudo_mean_labels: float = 0.0

    def to_text(self) -> str:
        lines = [
            f"iteration = {self.iteration}",
            f"role = {self.role}",
            f"checkpoint = {self.checkpoint}",
            f"pseudo_labeler = {self.pseudo_labeler or '-'}",
            f"pseudo.total = {self.pseudo_total}",
            f"pseudo.kept = {self.pseudo_kept}",
            f"pseudo.mean_labels = {self.pseudo_mean_labels:.6f}",
        ]
        for split in ("val", "test"):
            res: EvalResult = getattr(self, split)
            for key in ("auc", "f1", "precision", "recall"):
                v = getattr(res, f"macro_{key}")
                lines.append(f"{split}.{key} = " + (f"{v:.6f}" if v is not None else "-"))
        text = "\n".join(lines) + "\n\n"
        text += self.val.table(title="val per-label") + "\n"
        text += self.test.table(title="test per-label")
        return text


def summary_table(reports: list[IterationReport]) -> str:
    """Iteration summary shaped like the per-iteration results table:
    AUC / F1 / precision / recall for each split."""
    header = (
        f"{'iteration':<12}"
        f"{'val_auc':>9}{'val_f1':>9}{'val_prec':>10}{'val_recall':>12}"
        f"{'test_auc':>10}{'test_f1':>9}{'test_prec':>11}{'test_recall':>13}"
    )
    lines = [header]

    def fmt(v):
        return f"{v:.4f}" if v is not None else "-"

    for r in reports:
        tag = f"{r.iteration} (teacher)" if r.role == "teacher" else str(r.iteration)
        lines.append(
            f"{tag:<12}"
            f"{fmt(r.val.macro_auc):>9}{fmt(r.val.macro_f1):>9}"
            f"{fmt(r.val.macro_precision):>10}{fmt(r.val.macro_recall):>12}"
            f"{fmt(r.test.macro_auc):>10}{fmt(r.test.macro_f1):>9}"
            f"{fmt(r.test.macro_precision):>11}{fmt(r.test.macro_recall):>13}"
        )
    return "\n".join(lines) + "\n"


def noisy_student_iterate(
    cfg: RunConfig, out_dir, n_iterations: int
) -> list[IterationReport]:
    """Run the full chain: teacher (iteration 0), then n student iterations,
    each pseudo-labeled by the previous model. Persists checkpoints,
    pseudo-label files, and per-iteration reports under `out_dir`."""
    if n_iterations < 1:
        raise ValueError("need at least one student iteration")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = load_semisup_data(cfg)
    eval_batch = cfg["semisup"]["eval_batch"]
    model_text = cfg.section_text("model")

    model, trainer = train_teacher(cfg, data)
    reports: list[IterationReport] = []
    ckpt_path = out_dir / "checkpoint-0.maknet"
    save_checkpoint(ckpt_path, model_text, model_tensors(model),
                    trainer.train_state())
    ckpt = checkpoint_id(ckpt_path)
    reports.append(
        IterationReport(
            iteration=0,
            role="teacher",
            checkpoint=ckpt,
            pseudo_labeler=None,
            val=evaluate_samples(model, data.val, eval_batch),
            test=evaluate_samples(model, data.test, eval_batch),
        )
    )
    (out_dir / "report-0.txt").write_text(reports[0].to_text())

    labeler_model, labeler_ckpt = model, ckpt
    for i in range(1, n_iterations + 1):
        records = pseudo_label_pool(
            labeler_model, data.unlabeled, data.ontology, eval_batch, i, labeler_ckpt
        )
        write_pseudo_labels(out_dir / f"pseudo-{i}.txt", records)
        kept = [r for r in records if r.retained]
        student, s_trainer = train_student(cfg, data, records, i)
        ckpt_path = out_dir / f"checkpoint-{i}.maknet"
        save_checkpoint(ckpt_path, model_text, model_tensors(student),
                        s_trainer.train_state())
        student_ckpt = checkpoint_id(ckpt_path)
        report = IterationReport(
            iteration=i,
            role="student",
            checkpoint=student_ckpt,
            pseudo_labeler=labeler_ckpt,
            val=evaluate_samples(student, data.val, eval_batch),
            test=evaluate_samples(student, data.test, eval_batch),
            pseudo_total=len(records),
            pseudo_kept=len(kept),
            pseudo_mean_labels=(
                float(np.mean([len(r.retained) for r in kept])) if kept else 0.0
            ),
        )
        (out_dir / f"report-{i}.txt").write_text(report.to_text())
        reports.append(report)
        labeler_model, labeler_ckpt = student, student_ckpt

    (out_dir / "summary.txt").write_text(summary_table(reports))
    return reports


def build_model_from_checkpoint(path, expected_model_digest: str | None = None) -> MakNet:
    """Rebuild a model from the config text embedded in a checkpoint."""
    payload = load_checkpoint(path, expected_model_digest)
    cfg = parse_config(payload["model_config_text"])
    model = build_maknet(cfg.model_config(), seed=0)
    restore_model_tensors(model, payload["tensors"])
    return model
