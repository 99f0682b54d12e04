"""One training job: fixed optimization budget, periodic validation, and a
success verdict under the loss-threshold or perfect-accuracy criterion.

Runs are deterministic functions of their fingerprint: data, initialization,
and batch order all derive from (master_seed, grid seed) through keyed
splits, so identical fingerprints reproduce identical trajectories.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from statebench import autodiff as ad
from statebench import models as md
from statebench.errors import ConfigurationError, DivergedError
from statebench.formats import EncodedBatch, Vocabulary, encode_split
from statebench.seeding import derive_seed
from statebench.taskgen import Split

CRITERIA = ("loss", "accuracy")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20000
    batch: int = 64
    lr: float = 1e-3
    seed: int = 10  # grid seed; init/shuffle streams derive from it
    eval_every: int = 250
    criterion: str = "loss"
    epsilon: float = 1e-4
    early_stop_on_success: bool = True
    grad_clip: float | None = None  # off-default safety valve
    max_wall_seconds: float | None = None

    def __post_init__(self):
        if self.steps < 0 or self.batch <= 0 or self.eval_every <= 0:
            raise ConfigurationError("steps/batch/eval_every must be positive")
        if self.epsilon <= 0:
            raise ConfigurationError("epsilon must be positive")
        if self.criterion not in CRITERIA:
            raise ConfigurationError(f"unknown criterion {self.criterion!r}")


@dataclass
class RunRecord:
    fingerprint: str
    trajectory: list[tuple[int, float, float]]  # (step, val_loss, val_acc)
    best_val_loss: float
    status: str  # success | no_success | diverged
    wall_time: float
    config: dict = field(default_factory=dict)
    truncated: bool = False

    @property
    def success(self) -> bool:
        return self.status == "success"

    def to_json(self) -> dict:
        return {
            "kind": "run",
            "fingerprint": self.fingerprint,
            "trajectory": [[int(s), float(l), float(a)] for s, l, a in self.trajectory],
            "best_val_loss": float(self.best_val_loss),
            "status": self.status,
            "wall_time": float(self.wall_time),
            "config": self.config,
            "truncated": self.truncated,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RunRecord":
        return cls(
            fingerprint=obj["fingerprint"],
            trajectory=[tuple(t) for t in obj["trajectory"]],
            best_val_loss=obj["best_val_loss"],
            status=obj["status"],
            wall_time=obj["wall_time"],
            config=obj.get("config", {}),
            truncated=obj.get("truncated", False),
        )


class _BatchStream:
    """Cycles a seeded shuffle of the train rows, reshuffling each epoch."""

    def __init__(self, n: int, batch: int, rng: np.random.Generator):
        self.n = n
        self.batch = batch
        self.rng = rng
        self.perm = rng.permutation(n)
        self.pos = 0

    def next_rows(self) -> np.ndarray:
        out = np.empty(self.batch, dtype=np.int64)
        filled = 0
        while filled < self.batch:
            take = min(self.batch - filled, self.n - self.pos)
            out[filled:filled + take] = self.perm[self.pos:self.pos + take]
            filled += take
            self.pos += take
            if self.pos == self.n:
                self.perm = self.rng.permutation(self.n)
                self.pos = 0
        return out


def _batch_views(batch: EncodedBatch, rows: np.ndarray):
    width = int(batch.enc_lengths[rows].max())
    return (
        batch.input_ids[rows, :width],
        batch.target_ids[rows, :width],
        batch.loss_mask[rows, :width],
    )


def evaluate(model_spec: md.ModelSpec, params: dict[str, np.ndarray],
             val: EncodedBatch, chunk: int = 512) -> tuple[float, float]:
    """Teacher-forced validation loss and exact-match accuracy.

    Loss is the mean NLL over every supervised position in the set; accuracy
    counts an example only when all of its supervised argmaxes are correct.
    """
    if len(val) == 0:
        raise ConfigurationError("validation set is empty")
    consts = {k: ad.constant(v) for k, v in params.items()}
    nll_sum = 0.0
    n_sup = 0
    n_correct = 0
    order = np.argsort(val.enc_lengths, kind="stable")  # batch like lengths together
    for start in range(0, len(val), chunk):
        rows = order[start:start + chunk]
        ids, targets, mask = _batch_views(val, rows)
        logits = md.forward(model_spec, consts, ids, pad_id=val.vocab.pad)
        loss = ad.masked_cross_entropy(logits, targets, mask)
        count = int(mask.sum())
        nll_sum += float(loss.data) * count
        n_sup += count
        pred = logits.data.argmax(axis=-1)
        ok = np.logical_or(~mask, pred == targets).all(axis=1)
        n_correct += int(ok.sum())
    return nll_sum / n_sup, n_correct / len(val)


def _criterion_met(cfg: TrainConfig, val_loss: float, val_acc: float) -> bool:
    if cfg.criterion == "loss":
        return val_loss <= cfg.epsilon
    return val_acc == 1.0


def train_run(model_spec: md.ModelSpec, splits: tuple[Split, Split], fmt: str,
              cfg: TrainConfig, master_seed: int, fingerprint: str = "",
              config_echo: dict | None = None) -> RunRecord:
    """Train for cfg.steps Adam steps, validating every cfg.eval_every.

    Success is declared the first time the criterion holds; with
    early_stop_on_success the run ends there (the verdict is a min over the
    trajectory either way). NaN loss or gradients mark the run diverged.
    """
    record, _ = train_run_keeping_params(
        model_spec, splits, fmt, cfg, master_seed, fingerprint, config_echo
    )
    return record


def train_run_keeping_params(
        model_spec: md.ModelSpec, splits: tuple[Split, Split], fmt: str,
        cfg: TrainConfig, master_seed: int, fingerprint: str = "",
        config_echo: dict | None = None
) -> tuple[RunRecord, dict[str, np.ndarray]]:
    """train_run variant that also hands back the final parameter arrays."""
    train_split, val_split = splits
    if len(train_split) == 0:
        raise ConfigurationError("training set is empty")
    vocab = Vocabulary.for_group(train_split.group)
    train = encode_split(train_split, fmt, vocab)
    val = encode_split(val_split, fmt, vocab)

    init_seed = derive_seed(master_seed, "init", cfg.seed)
    shuffle_seed = derive_seed(master_seed, "shuffle", cfg.seed)

    arrays = md.init_params(model_spec, init_seed)
    layout = md.param_layout(arrays)
    vector = md.flatten_params(arrays)
    opt = ad.adam_init(vector.size, lr=cfg.lr)
    stream = _BatchStream(len(train), cfg.batch,
                          np.random.default_rng(shuffle_seed))

    t0 = time.perf_counter()
    trajectory: list[tuple[int, float, float]] = []
    status = "no_success"
    truncated = False

    def run_eval(step: int) -> bool:
        views = md.view_params(vector, layout)
        val_loss, val_acc = evaluate(model_spec, views, val)
        if not np.isfinite(val_loss):
            return False
        trajectory.append((step, val_loss, val_acc))
        return _criterion_met(cfg, val_loss, val_acc)

    try:
        if run_eval(0):
            status = "success"
        step = 0
        while step < cfg.steps and not (status == "success" and cfg.early_stop_on_success):
            rows = stream.next_rows()
            # tiny train sets repeat rows inside one batch; collapsing them to
            # weighted uniques computes the identical loss and gradient
            uniq, counts = np.unique(rows, return_counts=True)
            ids, targets, mask = _batch_views(train, uniq)
            tape = ad.Tape()
            leaves = {
                name: tape.leaf(vector[off:off + int(np.prod(shape))].reshape(shape))
                for name, shape, off in layout
            }
            logits = md.forward(model_spec, leaves, ids, pad_id=vocab.pad)
            loss = ad.masked_cross_entropy(
                logits, targets, mask,
                row_weights=None if len(uniq) == len(rows) else counts,
            )
            if not np.isfinite(loss.data):
                raise DivergedError("NaN training loss")
            ad.backward(tape, loss)
            grads = md.gather_grads(leaves, layout)
            if cfg.grad_clip is not None:
                norm = float(np.linalg.norm(grads))
                if norm > cfg.grad_clip:
                    grads *= cfg.grad_clip / norm
            vector = ad.adam_update(vector, grads, opt)
            step += 1
            if step % cfg.eval_every == 0 or step == cfg.steps:
                if run_eval(step) and status != "success":
                    status = "success"
                if cfg.max_wall_seconds is not None and \
                        time.perf_counter() - t0 > cfg.max_wall_seconds:
                    truncated = status != "success"
                    break
    except DivergedError:
        status = "diverged"

    if not trajectory:
        # diverged before the first finite evaluation
        trajectory.append((0, float("inf"), 0.0))
    best = min(l for _, l, _ in trajectory)
    record = RunRecord(
        fingerprint=fingerprint,
        trajectory=trajectory,
        best_val_loss=best,
        status=status,
        wall_time=time.perf_counter() - t0,
        config=dict(config_echo or {}),
        truncated=truncated,
    )
    return record, {name: vector[off:off + int(np.prod(shape))].reshape(shape).copy()
                    for name, shape, off in layout}
