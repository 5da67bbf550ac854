"""ADADELTA updates with weight decay and the Siamese training loop."""
import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import container
from .errors import DegenerateMarginError, DimensionError, NumericAbort, RoleError
from .model import model_from_parts, model_tensors, siamese_forward_backward

log = logging.getLogger(__name__)


@dataclass
class AdadeltaState:
    """Hyperparameters and per-parameter running averages of g**2 and dx**2."""

    lr: float = 0.01
    rho: float = 0.9
    eps: float = 1e-6
    weight_decay: float = 0.001
    # parameter-name prefix -> learning-rate multiplier, e.g. {"stn.": 0.1}
    lr_scales: dict = field(default_factory=dict)
    sq_grad: dict = field(default_factory=dict)
    sq_update: dict = field(default_factory=dict)
    steps: int = 0

    def hyperparams(self):
        return {"lr": self.lr, "rho": self.rho, "eps": self.eps, "weight_decay": self.weight_decay,
                "lr_scales": dict(self.lr_scales)}

    def lr_for(self, name):
        for prefix, factor in self.lr_scales.items():
            if name.startswith(prefix):
                return self.lr * factor
        return self.lr


def decays(name):
    """Weight decay applies to conv and fc weights only."""
    return name.endswith(".weight")


def adadelta_step(params, grads, state):
    """Update ``params`` in place from ``grads``; returns ``params``."""
    rho, eps = state.rho, state.eps
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        g = g.astype(p.dtype, copy=False)
        if state.weight_decay and decays(name):
            g = g + state.weight_decay * p
        sq_g = state.sq_grad.setdefault(name, np.zeros_like(p))
        sq_dx = state.sq_update.setdefault(name, np.zeros_like(p))
        sq_g *= rho
        sq_g += (1 - rho) * g * g
        dx = -(np.sqrt(sq_dx + eps) / np.sqrt(sq_g + eps)) * g
        sq_dx *= rho
        sq_dx += (1 - rho) * dx * dx
        p += state.lr_for(name) * dx
    state.steps += 1
    return params


@dataclass
class TrainSchedule:
    epochs: int = 40
    batch_size: int = 100
    shuffle_seed: int = 0
    margin: float = 1.0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 for batch statistics")


@dataclass
class TrainResult:
    model: object
    state: AdadeltaState
    trace: list
    epoch: int


def train(model, dataset, schedule, state=None, start_epoch=0, trace=None, checkpoint_path=None):
    """Minimise the mean contrastive loss over ``dataset`` for ``schedule.epochs`` epochs.

    ``dataset`` is a :class:`patchdesc.data.PairDataset` with role
    ``train``.  Epochs ``start_epoch .. epochs-1`` are run, so a run resumed
    from a checkpoint continues exactly where it stopped.
    """
    if dataset.role != "train":
        raise RoleError(f"cannot train on a pair list with role {dataset.role!r}")
    if not schedule.margin > 0:
        raise DegenerateMarginError(f"margin must be resolved to a positive value, got {schedule.margin}")
    state = AdadeltaState() if state is None else state
    trace = [] if trace is None else list(trace)
    model.train()
    iteration = len(trace)
    for epoch in range(start_epoch, schedule.epochs):
        for batch in dataset.batches(schedule.batch_size, schedule.shuffle_seed, epoch, train=True):
            loss, grads, _ = siamese_forward_backward(model, batch.x1, batch.x2, batch.labels, schedule.margin)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise NumericAbort(
                    f"non-finite loss at iteration {iteration} (epoch {epoch}, pairs {batch.ids[:8].tolist()}...)",
                    iteration=iteration, batch_ids=batch.ids,
                )
            adadelta_step(model.params, grads, state)
            trace.append((iteration, epoch, loss))
            iteration += 1
        done = epoch + 1
        log.info("epoch %d: mean loss %.5f", done, np.mean([t[2] for t in trace if t[1] == epoch] or [np.nan]))
        if checkpoint_path and schedule.checkpoint_every and done % schedule.checkpoint_every == 0:
            save_checkpoint(str(checkpoint_path).format(epoch=done), model, state, done, trace, schedule)
    return TrainResult(model, state, trace, max(start_epoch, schedule.epochs))


def write_loss_trace(trace, path, comments=()):
    """CSV of (iteration, epoch, mean_loss); ``comments`` become leading ``#`` lines."""
    with open(path, "w", newline="") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "epoch", "mean_loss"])
        for it, ep, loss in trace:
            w.writerow([it, ep, repr(float(loss))])


def save_checkpoint(path, model, state, epoch, trace, schedule=None, metadata=None):
    """Model tensors plus the optimizer section, enough to resume bit-exactly."""
    tensors = model_tensors(model)
    tensors.update({f"optim/sq_grad/{k}": v for k, v in state.sq_grad.items()})
    tensors.update({f"optim/sq_update/{k}": v for k, v in state.sq_update.items()})
    meta = dict(model.metadata)
    if metadata:
        meta.update(metadata)
    meta.update({
        "kind": "checkpoint",
        "input_shape": list(model.input_shape),
        "epoch": epoch,
        "optimizer": {**state.hyperparams(), "steps": state.steps},
        "trace": [[int(i), int(e), float(l)] for i, e, l in trace],
    })
    if schedule is not None:
        meta["schedule"] = asdict(schedule)
    container.write_container(path, model.spec.render(), model.mode, meta, tensors)


def load_checkpoint(path):
    """Returns ``(model, state, epoch, trace, metadata)``."""
    arch, mode, meta, tensors = container.read_container(path)
    model = model_from_parts(arch, mode, meta, tensors)
    for key in ("epoch", "optimizer", "trace", "schedule"):
        model.metadata.pop(key, None)
    opt = meta.get("optimizer", {})
    state = AdadeltaState(lr=opt.get("lr", 0.01), rho=opt.get("rho", 0.9), eps=opt.get("eps", 1e-6),
                          weight_decay=opt.get("weight_decay", 0.001), lr_scales=dict(opt.get("lr_scales", {})),
                          steps=opt.get("steps", 0))
    for name, value in tensors.items():
        if name.startswith("optim/sq_grad/"):
            state.sq_grad[name[len("optim/sq_grad/"):]] = value
        elif name.startswith("optim/sq_update/"):
            state.sq_update[name[len("optim/sq_update/"):]] = value
    trace = [tuple(t) for t in meta.get("trace", [])]
    return model, state, meta.get("epoch", 0), trace, meta
