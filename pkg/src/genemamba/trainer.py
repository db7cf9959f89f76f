"""Desk-scale training loop, checkpoint/resume, and classifier fine-tuning."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.metrics import accuracy_score, f1_score
from torch import nn

from genemamba import checkpoint as ckpt_io
from genemamba.bimamba import GeneMamba, ModelConfig, build_model, cell_embedding, make_batch
from genemamba.corpus import TokenizedDataset
from genemamba.errors import ConfigError, DataError, InputError, NumericError
from genemamba.objectives import LossConfig, PathwaySet, batch_loss

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 1
    max_steps: int = 0  # 0: run for `epochs` full passes
    seed: int = 0
    gamma: float = 0.1
    tau: float = 0.1
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_interval: int = 0
    d_model: int = 64
    n_layers: int = 2
    d_state: int = 8
    expand: int = 2
    d_conv: int = 4

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError("lr must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.clip_norm < 0:
            raise ConfigError("clip_norm must be >= 0 (0 disables clipping)")
        LossConfig(self.gamma, self.tau)

    def model_config(self, vocab_size: int, max_len: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            d_model=self.d_model,
            n_layers=self.n_layers,
            d_state=self.d_state,
            expand=self.expand,
            d_conv=self.d_conv,
            max_len=max_len + 1,
        )

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.gamma, self.tau)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in fields:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            out[key] = int(value) if fields[key] in ("int", int) else float(value)
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}") from None
    return out


def load_config(path, **overrides) -> TrainConfig:
    values = parse_config_text(Path(path).read_text(encoding="utf-8"), str(path)) if path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


def format_log_record(step: int, l_lang: float, l_path: float, total: float) -> str:
    return f"step={step} l_lang={l_lang!r} l_pathway={l_path!r} total={total!r}"


def parse_log(path) -> list[dict]:
    rows = []
    for line in Path(path).read_text().splitlines():
        rec = dict(item.split("=", 1) for item in line.split())
        rows.append({k: (int(v) if k == "step" else float(v)) for k, v in rec.items()})
    return rows


@dataclass
class StepRecord:
    step: int
    l_lang: float
    l_pathway: float
    total: float


class Trainer:
    """Adam training on next-gene NLL plus weighted pathway InfoNCE.

    The batch order is a pure function of (seed, epoch), so a run resumed
    from a checkpoint follows exactly the same trajectory as an
    uninterrupted one.
    """

    def __init__(
        self,
        config: TrainConfig,
        dataset: TokenizedDataset,
        vocab_size: int,
        pathways: PathwaySet | None = None,
        model: GeneMamba | None = None,
    ):
        if len(dataset) == 0:
            raise InputError("training dataset is empty")
        self.config = config
        self.dataset = dataset
        self.pathways = pathways
        self.model = model or build_model(config.model_config(vocab_size, dataset.max_len), config.seed)
        self.optimizer = torch.optim.Adam(
            self.model.parameters(),
            lr=config.lr,
            betas=(config.beta1, config.beta2),
            eps=config.adam_eps,
            foreach=False,
        )
        self.step = 0
        self.history: list[StepRecord] = []

    @property
    def batches_per_epoch(self) -> int:
        return math.ceil(len(self.dataset) / self.config.batch_size)

    @property
    def total_steps(self) -> int:
        if self.config.max_steps > 0:
            return self.config.max_steps
        return self.config.epochs * self.batches_per_epoch

    def batch_indices(self, step: int) -> np.ndarray:
        epoch, k = divmod(step, self.batches_per_epoch)
        perm = np.random.default_rng([self.config.seed, epoch]).permutation(len(self.dataset))
        bs = self.config.batch_size
        return np.sort(perm[k * bs : (k + 1) * bs])

    def train_step(self) -> StepRecord:
        idx = self.batch_indices(self.step)
        tokens, mask = make_batch([self.dataset.sequences[i] for i in idx])
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        losses = batch_loss(self.model, tokens, mask, self.pathways, self.config.loss)
        if not torch.isfinite(losses.total):
            raise NumericError(f"non-finite loss at step {self.step}")
        losses.total.backward()
        if self.config.clip_norm > 0:
            nn.utils.clip_grad_norm_(self.model.parameters(), self.config.clip_norm)
        for name, p in self.model.named_parameters():
            if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
                raise NumericError(f"non-finite gradient for {name} at step {self.step}")
        self.optimizer.step()
        rec = StepRecord(self.step, losses.lang.item(), losses.pathway.item(), losses.total.item())
        self.history.append(rec)
        self.step += 1
        return rec

    def run(self, steps: int | None = None, log_path=None, checkpoint_path=None) -> list[StepRecord]:
        """Train until ``steps`` more updates (default: to the configured end)."""
        end = self.total_steps if steps is None else self.step + steps
        records = []
        log = open(log_path, "a", encoding="utf-8") if log_path else None
        try:
            while self.step < end:
                rec = self.train_step()
                records.append(rec)
                if log:
                    log.write(format_log_record(rec.step, rec.l_lang, rec.l_pathway, rec.total) + "\n")
                    log.flush()
                interval = self.config.checkpoint_interval
                if checkpoint_path and interval > 0 and self.step % interval == 0:
                    self.save(checkpoint_path)
        finally:
            if log:
                log.close()
        if checkpoint_path:
            self.save(checkpoint_path)
        return records

    # -- checkpointing -----------------------------------------------------

    def to_checkpoint(self) -> ckpt_io.Checkpoint:
        ck = ckpt_io.model_checkpoint(
            self.model, kind="pretrain", train=self.config.to_dict(), step=self.step
        )
        names = {id(p): n for n, p in self.model.named_parameters()}
        for group in self.optimizer.param_groups:
            for p in group["params"]:
                st = self.optimizer.state.get(p)
                if not st:
                    continue
                n = names[id(p)]
                ck.tensors[f"adam.{n}.exp_avg"] = st["exp_avg"]
                ck.tensors[f"adam.{n}.exp_avg_sq"] = st["exp_avg_sq"]
                ck.tensors[f"adam.{n}.step"] = torch.as_tensor(float(st["step"]))
        return ck

    def save(self, path) -> None:
        ckpt_io.write(self.to_checkpoint(), path)

    @classmethod
    def resume(cls, path, dataset, pathways=None, config: TrainConfig | None = None) -> "Trainer":
        ck = ckpt_io.read(path)
        saved = TrainConfig(**ck.meta.get("train", {}))
        config = config or saved
        model = ckpt_io.restore_model(ck, config.model_config(ck.meta["model"]["vocab_size"], dataset.max_len))
        trainer = cls(config, dataset, model.config.vocab_size, pathways, model)
        trainer.step = int(ck.meta.get("step", 0))
        params = dict(model.named_parameters())
        for n, p in params.items():
            if f"adam.{n}.step" not in ck.tensors:
                continue
            trainer.optimizer.state[p] = {
                "step": torch.tensor(ck.tensors[f"adam.{n}.step"].item(), dtype=torch.float32),
                "exp_avg": ck.tensors[f"adam.{n}.exp_avg"].clone(),
                "exp_avg_sq": ck.tensors[f"adam.{n}.exp_avg_sq"].clone(),
            }
        return trainer


def train(config: TrainConfig, dataset: TokenizedDataset, vocab_size: int, pathways=None,
          checkpoint_path=None, log_path=None) -> Trainer:
    trainer = Trainer(config, dataset, vocab_size, pathways)
    trainer.run(log_path=log_path, checkpoint_path=checkpoint_path)
    return trainer


# -- classifier fine-tuning ---------------------------------------------------


class ClassifierHead(nn.Module):
    """Two-layer perceptron on the CLS embedding."""

    def __init__(self, d_model: int, hidden: int, n_classes: int):
        super().__init__()
        if n_classes < 2:
            raise InputError("a classifier needs at least two classes")
        self.fc1 = nn.Linear(d_model, hidden)
        self.fc2 = nn.Linear(hidden, n_classes)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


def stratified_split(labels, test_fraction: float = 0.1, seed: int = 0):
    """Per-class shuffle-and-cut; classes with fewer than two cells train only."""
    labels = list(labels)
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for cls in sorted(set(labels)):
        idx = np.array([i for i, y in enumerate(labels) if y == cls])
        if idx.size < 2:
            logger.warning("class %r has %d cell(s); kept on the training side", cls, idx.size)
            train_idx.extend(idx.tolist())
            continue
        idx = rng.permutation(idx)
        n_test = max(1, int(round(test_fraction * idx.size)))
        n_test = min(n_test, idx.size - 1)
        test_idx.extend(idx[:n_test].tolist())
        train_idx.extend(idx[n_test:].tolist())
    return sorted(train_idx), sorted(test_idx)


@dataclass
class FinetuneConfig:
    label_column: str = "celltype"
    partition_column: str = "partition"
    hidden: int = 64
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 16
    seed: int = 0
    test_fraction: float = 0.1
    clip_norm: float = 1.0


@dataclass
class FinetuneResult:
    model: GeneMamba
    head: ClassifierHead
    classes: list[str]
    train_idx: list[int]
    test_idx: list[int]
    report: dict = field(default_factory=dict)

    def predict(self, dataset: TokenizedDataset, batch_size: int = 64) -> list[str]:
        logits = _classify(self.model, self.head, dataset.sequences, batch_size)
        return [self.classes[i] for i in logits.argmax(-1).tolist()]

    def to_checkpoint(self) -> ckpt_io.Checkpoint:
        ck = ckpt_io.model_checkpoint(
            self.model,
            kind="classifier",
            classes=self.classes,
            head_hidden=self.head.fc1.out_features,
            report=self.report,
        )
        for k, v in self.head.state_dict().items():
            ck.tensors[f"head.{k}"] = v
        return ck

    def save(self, path) -> None:
        ckpt_io.write(self.to_checkpoint(), path)


def load_classifier(path):
    ck = ckpt_io.read(path)
    if ck.meta.get("kind") != "classifier":
        raise DataError(f"{path} is not a classifier checkpoint")
    model = ckpt_io.restore_model(ck)
    classes = ck.meta["classes"]
    head = ClassifierHead(model.config.d_model, ck.meta["head_hidden"], len(classes)).double()
    head.load_state_dict(ck.subset("head."))
    return model, head, classes


def _classify(model, head, sequences, batch_size):
    model.eval()
    out = []
    with torch.no_grad():
        for a in range(0, len(sequences), batch_size):
            tokens, mask = make_batch(sequences[a : a + batch_size])
            out.append(head(cell_embedding(model, tokens, mask, "cls")))
    return torch.cat(out)


def finetune_classifier(model: GeneMamba, dataset: TokenizedDataset, cfg: FinetuneConfig) -> FinetuneResult:
    """Supervised cross-entropy on CLS embeddings; the backbone is trained too."""
    if cfg.label_column not in dataset.labels:
        raise InputError(f"dataset has no {cfg.label_column!r} label column")
    labels = dataset.labels[cfg.label_column]
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise InputError("fine-tuning needs at least two classes")
    y_all = np.array([classes.index(v) for v in labels])

    part = dataset.labels.get(cfg.partition_column)
    if part and set(part) <= {"train", "test"} and "train" in part:
        train_idx = [i for i, p in enumerate(part) if p == "train"]
        test_idx = [i for i, p in enumerate(part) if p == "test"]
    else:
        train_idx, test_idx = stratified_split(labels, cfg.test_fraction, cfg.seed)

    torch.manual_seed(cfg.seed)
    head = ClassifierHead(model.config.d_model, cfg.hidden, len(classes)).double()
    params = list(model.parameters()) + list(head.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr, foreach=False)
    rng = np.random.default_rng(cfg.seed)
    train_arr = np.array(train_idx)
    for _ in range(cfg.epochs):
        model.train()
        order = rng.permutation(train_arr)
        for a in range(0, len(order), cfg.batch_size):
            idx = np.sort(order[a : a + cfg.batch_size])
            tokens, mask = make_batch([dataset.sequences[i] for i in idx])
            logits = head(cell_embedding(model, tokens, mask, "cls"))
            loss = F.cross_entropy(logits, torch.as_tensor(y_all[idx]))
            if not torch.isfinite(loss):
                raise NumericError("non-finite fine-tuning loss")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.clip_norm > 0:
                nn.utils.clip_grad_norm_(params, cfg.clip_norm)
            opt.step()

    result = FinetuneResult(model, head, classes, train_idx, test_idx)
    eval_idx = test_idx or train_idx
    pred = _classify(model, head, [dataset.sequences[i] for i in eval_idx], 64).argmax(-1).numpy()
    truth = y_all[eval_idx]
    result.report = {
        "accuracy": float(accuracy_score(truth, pred)),
        "macro_f1": float(f1_score(truth, pred, average="macro", labels=np.unique(truth), zero_division=0)),
        "n_train": len(train_idx),
        "n_test": len(test_idx),
        "evaluated_on": "test" if test_idx else "train",
    }
    return result
