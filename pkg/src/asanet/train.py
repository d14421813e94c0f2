"""Optimization loop: per-group optimizers, learning-rate and PMI-weight
schedules, CSV loss logging, and bit-exact checkpointing.

Network parameters take adaptive-moment steps (lr 3e-4, weight decay 5e-4
folded into the gradient, betas 0.9/0.999); weight decay skips batch-norm
affine parameters and the enhancement blend scalars. The class centers take
plain gradient-descent steps at lr 0.5 and are never decayed.

The PMI weight starts at its low value and is raised, once and permanently,
at the first epoch boundary where the previous epoch's mean attribute BCE
drops below the threshold.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses as L
from . import tensor as T
from .data import PKBatchSampler, SyntheticDataset, make_batch
from .errors import ConfigError, FormatError, NonFiniteError
from .losses import CenterBank, LossWeights
from .model import AsaNet, ModelConfig
from .nn import ParamRegistry
from .tensor import Tape

LOG_HEADER = "step,xent,wrt,cent,bce,pmi,lambda_pmi,total"

# Weight decay exemptions within the network group, by name suffix.
_NO_DECAY_SUFFIXES = (".gamma", ".beta", ".alpha")


@dataclass
class Schedule:
    total_epochs: int = 60
    decay_epochs: tuple[int, ...] = (20, 40)
    decay_factor: float = 0.1

    def __post_init__(self):
        self.decay_epochs = tuple(self.decay_epochs)
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ConfigError("decay epochs must be strictly increasing")
        if any(e >= self.total_epochs for e in self.decay_epochs):
            raise ConfigError("decay epochs must precede the final epoch")


def lr_at(epoch: int, schedule: Schedule, base_lr: float) -> float:
    """Piecewise-constant rate: one decay factor per boundary passed."""
    if epoch < 0:
        raise ConfigError("epoch must be non-negative")
    decays = sum(1 for boundary in schedule.decay_epochs if boundary <= epoch)
    return base_lr * schedule.decay_factor**decays


@dataclass
class OptimConfig:
    lr: float = 3e-4
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    center_lr: float = 0.5


class Optimizer:
    """Adaptive moments for the network group, plain SGD for the centers."""

    def __init__(self, registry: ParamRegistry, config: OptimConfig | None = None):
        self.registry = registry
        self.config = config or OptimConfig()
        self.step_count = 0
        self.moments = {
            name: (np.zeros_like(e.tensor.data), np.zeros_like(e.tensor.data))
            for name, e in registry.items()
            if e.group == "network"
        }

    def step(self, lr: float | None = None) -> None:
        """Apply one update from the accumulated gradients, then clear them."""
        cfg = self.config
        lr = cfg.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - cfg.beta1**t
        bc2 = 1.0 - cfg.beta2**t
        for name, entry in self.registry.items():
            grad = entry.tensor.grad
            if grad is None:
                grad = np.zeros_like(entry.tensor.data)
            if not np.isfinite(grad).all():
                raise NonFiniteError(f"non-finite gradient for {name}")
            if entry.group == "centers":
                entry.tensor.data -= cfg.center_lr * grad
                continue
            if entry.decay and not name.endswith(_NO_DECAY_SUFFIXES):
                grad = grad + cfg.weight_decay * entry.tensor.data
            m, v = self.moments[name]
            m *= cfg.beta1
            m += (1 - cfg.beta1) * grad
            v *= cfg.beta2
            v += (1 - cfg.beta2) * grad * grad
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            entry.tensor.data -= lr * update
        self.registry.zero_grad()

    def state_dict(self) -> dict:
        return {
            "step_count": self.step_count,
            "moments": {n: (m.copy(), v.copy()) for n, (m, v) in self.moments.items()},
        }

    def load_state(self, state: dict) -> None:
        self.step_count = int(state["step_count"])
        for name, (m, v) in self.moments.items():
            src_m, src_v = state["moments"][name]
            m[...] = src_m
            v[...] = src_v


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def save_checkpoint(path, registry: ParamRegistry, optimizer: Optimizer | None,
                    rng_state: dict | None, meta: dict) -> None:
    """Write manifest.json + weights.bin (+ optim.bin) into a directory.

    weights.bin holds every parameter as little-endian float64 in manifest
    order; buffers (batch-norm running stats), the RNG state and trainer
    metadata are JSON values inside the manifest.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    params = []
    blobs = []
    offset = 0
    for name, entry in registry.items():
        data = np.ascontiguousarray(entry.tensor.data, dtype="<f8")
        params.append({
            "name": name,
            "shape": list(entry.tensor.data.shape),
            "group": entry.group,
            "offset": offset,
        })
        blobs.append(data.tobytes())
        offset += data.nbytes
    manifest = {
        "format": 1,
        "params": params,
        "total_bytes": offset,
        "buffers": {n: b.tolist() for n, b in registry.buffers().items()},
        "rng_state": rng_state,
        "meta": meta,
    }
    if optimizer is not None:
        manifest["optim"] = {
            "step_count": optimizer.step_count,
            "names": list(optimizer.moments),
        }
        with open(path / "optim.bin", "wb") as fh:
            for name in optimizer.moments:
                m, v = optimizer.moments[name]
                fh.write(np.ascontiguousarray(m, dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    with open(path / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    (path / "weights.bin").write_bytes(b"".join(blobs))


def read_checkpoint(path) -> dict:
    """Parse and fully validate a checkpoint directory before use."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read checkpoint manifest at {path}: {exc}") from exc
    try:
        raw = (path / "weights.bin").read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint weights at {path}: {exc}") from exc
    if len(raw) != manifest.get("total_bytes"):
        raise FormatError(
            f"weights.bin has {len(raw)} bytes, manifest declares {manifest.get('total_bytes')}"
        )
    params = {}
    for rec in manifest["params"]:
        shape = tuple(rec["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = rec["offset"]
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=start)
        params[rec["name"]] = arr.reshape(shape)
    state = {
        "manifest": manifest,
        "params": params,
        "buffers": {n: np.asarray(v, dtype=np.float64) for n, v in manifest["buffers"].items()},
        "rng_state": manifest.get("rng_state"),
        "meta": manifest.get("meta", {}),
        "optim": None,
    }
    if "optim" in manifest:
        try:
            raw_opt = (path / "optim.bin").read_bytes()
        except OSError as exc:
            raise FormatError(f"cannot read optimizer state at {path}: {exc}") from exc
        moments = {}
        pos = 0
        for name in manifest["optim"]["names"]:
            shape = tuple(next(r["shape"] for r in manifest["params"] if r["name"] == name))
            count = int(np.prod(shape)) if shape else 1
            need = 2 * count * 8
            if pos + need > len(raw_opt):
                raise FormatError("optim.bin is truncated")
            m = np.frombuffer(raw_opt, dtype="<f8", count=count, offset=pos).reshape(shape)
            v = np.frombuffer(raw_opt, dtype="<f8", count=count, offset=pos + count * 8).reshape(shape)
            moments[name] = (m.copy(), v.copy())
            pos += need
        state["optim"] = {"step_count": manifest["optim"]["step_count"], "moments": moments}
    return state


def load_checkpoint(path, registry: ParamRegistry,
                    optimizer: Optimizer | None = None) -> dict:
    """Restore a checkpoint into an existing registry (and optimizer).

    The file is fully validated first; a truncated or inconsistent checkpoint
    raises FormatError without touching any state.
    """
    state = read_checkpoint(path)
    if set(state["params"]) != {n for n, _ in registry.items()}:
        raise FormatError("checkpoint parameter names do not match the model")
    for name, entry in registry.items():
        if state["params"][name].shape != entry.tensor.data.shape:
            raise FormatError(f"checkpoint shape mismatch for {name}")
    registry.load_state({"params": state["params"], "buffers": state["buffers"]})
    if optimizer is not None and state["optim"] is not None:
        optimizer.load_state(state["optim"])
    return state


def build_model_from_checkpoint(path) -> tuple[AsaNet, CenterBank, dict]:
    """Reconstruct the network (and its center bank) a checkpoint was saved from."""
    state = read_checkpoint(path)
    meta = state["meta"]
    if "model" not in meta:
        raise FormatError("checkpoint metadata lacks the model configuration")
    model = AsaNet(ModelConfig.from_dict(meta["model"]), seed=0)
    bank = CenterBank(model.registry, model.config.num_identities, model.config.final_width)
    load_checkpoint(path, model.registry)
    return model, bank, state


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainSettings:
    batch_p: int = 8
    batch_k: int = 4
    passes_per_epoch: int = 1
    checkpoint_every: int = 20
    use_pmi: bool = True
    use_bce: bool = True
    seed: int = 7


@dataclass
class TrainResult:
    checkpoint_dir: Path
    log_path: Path
    steps: int
    epochs: int
    final_losses: dict
    lambda_history: list = field(default_factory=list)


class Trainer:
    def __init__(self, dataset: SyntheticDataset, model: AsaNet,
                 weights: LossWeights, optim_config: OptimConfig,
                 schedule: Schedule, settings: TrainSettings, out_dir):
        self.dataset = dataset
        self.model = model
        self.weights = weights
        self.schedule = schedule
        self.settings = settings
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)

        groups = dataset.train_groups()
        if model.config.num_identities != len(groups):
            raise ConfigError(
                f"model classifies {model.config.num_identities} identities but the "
                f"training split has {len(groups)}"
            )
        self.bank = CenterBank(model.registry, model.config.num_identities,
                               model.config.final_width)
        self.optimizer = Optimizer(model.registry, optim_config)
        self.rng = np.random.default_rng(np.random.SeedSequence([settings.seed, 0x5A0]))
        self.sampler = PKBatchSampler(groups, settings.batch_p, settings.batch_k, self.rng)

        self.epoch = 0
        self.global_step = 0
        self.lambda_pmi = weights.lambda_pmi_low if settings.use_pmi else 0.0
        self.pmi_raised = False
        self.log_path = self.out_dir / "losses.csv"

    # -- one batch ----------------------------------------------------------

    def train_step(self, batch, lr: float) -> dict:
        self.model.train_mode()
        with Tape() as tape:
            out = self.model.forward_batch(batch.frames)
            triplets = L.pmi_mine(out.ir_attr_feat, batch.identities)
            attr_prob = T.concat([out.re_attr_prob, out.ir_attr_prob], axis=1)
            attr_labels = np.concatenate([batch.re_labels, batch.ir_labels], axis=1)
            components = {
                "xent": L.xent_label_smooth(out.id_logits, batch.identities,
                                            self.weights.smoothing_eps),
                "wrt": L.wrt_loss(out.final_feat, batch.identities),
                "cent": L.center_loss(out.final_feat, batch.identities, self.bank),
                "bce": L.bce_attributes(attr_prob, attr_labels),
                "pmi": L.pmi_loss(triplets, out.final_feat),
            }
            weights = self.weights
            if not self.settings.use_bce:
                weights = LossWeights(**{**weights.__dict__, "lambda_bce": 0.0})
            total, report = L.total_loss(components, weights, lambda_pmi=self.lambda_pmi)
            tape.backward(total)
        self.optimizer.step(lr)
        return report

    # -- full run -----------------------------------------------------------

    def run(self, resume_from=None) -> TrainResult:
        base_lr = self.optimizer.config.lr
        if resume_from is not None:
            self._restore(resume_from)
        mode = "a" if resume_from is not None else "w"
        report = {}
        with open(self.log_path, mode) as log:
            if mode == "w":
                log.write(LOG_HEADER + "\n")
            while self.epoch < self.schedule.total_epochs:
                lr = lr_at(self.epoch, self.schedule, base_lr)
                epoch_bce = []
                for _ in range(self.settings.passes_per_epoch):
                    for batch_idx in self.sampler.epoch():
                        batch = make_batch(self.dataset, batch_idx,
                                           self.model.config.frames_per_clip, self.rng)
                        try:
                            report = self.train_step(batch, lr)
                        except NonFiniteError as exc:
                            raise NonFiniteError(
                                f"step {self.global_step}: {exc}"
                            ) from exc
                        epoch_bce.append(report["bce"])
                        log.write(
                            f"{self.global_step},{report['xent']:.10g},"
                            f"{report['wrt']:.10g},{report['cent']:.10g},"
                            f"{report['bce']:.10g},{report['pmi']:.10g},"
                            f"{report['lambda_pmi']:.10g},{report['total']:.10g}\n"
                        )
                        self.global_step += 1
                self.epoch += 1
                # one-way schedule switch on the previous epoch's mean BCE
                if (self.settings.use_pmi and not self.pmi_raised
                        and float(np.mean(epoch_bce)) < self.weights.bce_threshold):
                    self.lambda_pmi = self.weights.lambda_pmi_high
                    self.pmi_raised = True
                if (self.settings.checkpoint_every > 0
                        and self.epoch % self.settings.checkpoint_every == 0
                        and self.epoch < self.schedule.total_epochs):
                    self._save(self.out_dir / "checkpoints" / f"epoch_{self.epoch:04d}")
        final_dir = self.out_dir / "checkpoint"
        self._save(final_dir)
        return TrainResult(
            checkpoint_dir=final_dir,
            log_path=self.log_path,
            steps=self.global_step,
            epochs=self.epoch,
            final_losses=report,
        )

    def _trainer_meta(self) -> dict:
        return {
            "model": self.model.config.to_dict(),
            "epoch": self.epoch,
            "global_step": self.global_step,
            "lambda_pmi": self.lambda_pmi,
            "pmi_raised": self.pmi_raised,
            "seed": self.settings.seed,
        }

    def _save(self, path) -> None:
        save_checkpoint(path, self.model.registry, self.optimizer,
                        rng_state=self.rng.bit_generator.state,
                        meta=self._trainer_meta())

    def _restore(self, path) -> None:
        state = load_checkpoint(path, self.model.registry, self.optimizer)
        meta = state["meta"]
        self.epoch = int(meta["epoch"])
        self.global_step = int(meta["global_step"])
        self.lambda_pmi = float(meta["lambda_pmi"])
        self.pmi_raised = bool(meta["pmi_raised"])
        self.rng.bit_generator.state = state["rng_state"]


def train(dataset: SyntheticDataset, model: AsaNet, out_dir, *,
          weights: LossWeights | None = None,
          optim_config: OptimConfig | None = None,
          schedule: Schedule | None = None,
          settings: TrainSettings | None = None,
          resume_from=None) -> TrainResult:
    """Train a model on a dataset and leave a checkpoint + losses.csv behind."""
    trainer = Trainer(dataset, model, weights or LossWeights(),
                      optim_config or OptimConfig(), schedule or Schedule(),
                      settings or TrainSettings(), out_dir)
    return trainer.run(resume_from=resume_from)
