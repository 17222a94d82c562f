"""Training loop, contaminated evaluation and the binary checkpoint format."""

from __future__ import annotations

import csv
import io
import json
import struct
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..metrics import load_balance, router_instability
from ..numerics import RngStream, as_generator, sample_gaussian
from .config import ModelConfig
from .data import GmmTask
from .model import MoeModel
from .optim import Adam

# stream ids under the run seed
DATA_STREAM = 1
EVAL_STREAM = 2
NOISE_STREAM = 3

TRACE_COLUMNS = ("step", "loss", "aux_loss", "load_balance", "instability")


class DivergenceError(FloatingPointError):
    def __init__(self, step: int, trace: "TrainTrace", what: str):
        super().__init__(f"training diverged at step {step}: non-finite {what}")
        self.step = step
        self.trace = trace


@dataclass
class TrainTrace:
    step: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    aux_loss: list = field(default_factory=list)
    load_balance: list = field(default_factory=list)
    instability: list = field(default_factory=list)
    ms_per_step: list = field(default_factory=list)
    eval_steps: list = field(default_factory=list)
    eval_loss: list = field(default_factory=list)

    def __len__(self):
        return len(self.step)

    def to_csv(self) -> str:
        """Per-step series. Wall-clock lives in ``timing_csv`` so this stays reproducible."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for row in zip(self.step, self.loss, self.aux_loss, self.load_balance, self.instability):
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
        return buf.getvalue()

    def eval_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("step", "eval_loss"))
        for s, v in zip(self.eval_steps, self.eval_loss):
            w.writerow([s, repr(float(v))])
        return buf.getvalue()

    def timing_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("step", "ms_per_step"))
        for s, v in zip(self.step, self.ms_per_step):
            w.writerow([s, f"{v:.4f}"])
        return buf.getvalue()


def heldout_set(task: GmmTask, seed: int, n: int):
    return task.sample(RngStream(seed, EVAL_STREAM), n)


def train(config: ModelConfig, task: GmmTask, steps: int, batch_size: int = 256, eval_every: int = 10,
          eval_n: int = 2048, model: Optional[MoeModel] = None,
          on_step: Optional[Callable] = None):
    """Run Adam on the task and return ``(model, trace)``.

    Each step draws a fresh batch from the run's data stream, so two configs
    with the same seed see the same data. The held-out loss is recorded at
    step 0 and every ``eval_every`` steps after an update.
    """
    if steps < 0 or batch_size < 1 or eval_every < 1:
        raise ValueError("steps must be >= 0, batch_size and eval_every >= 1")
    if model is None:
        model = MoeModel(config, task.d, task.d_out)
    opt = Adam.from_config(config.optimizer)
    data = RngStream(config.seed, DATA_STREAM).generator()
    x_ev, y_ev, _ = heldout_set(task, config.seed, eval_n)
    trace = TrainTrace()

    def record_eval(step):
        v = model.task_loss(x_ev, y_ev)
        if not np.isfinite(v):
            raise DivergenceError(step, trace, "eval loss")
        trace.eval_steps.append(step)
        trace.eval_loss.append(v)

    record_eval(0)
    for step in range(1, steps + 1):
        t0 = time.perf_counter()
        x, y, _ = task.sample(data, batch_size)
        try:
            mse, aux, grads, fw = model.loss_and_grads(x, y)
        except FloatingPointError as exc:
            raise DivergenceError(step, trace, str(exc)) from exc
        if not (np.isfinite(mse) and np.isfinite(aux)):
            raise DivergenceError(step, trace, "training loss")
        opt.step(model.params, grads)
        dt = 1e3 * (time.perf_counter() - t0)
        decs = fw.decisions
        trace.step.append(step)
        trace.loss.append(mse)
        trace.aux_loss.append(aux)
        trace.load_balance.append(load_balance(decs, config.E).mean)
        trace.instability.append(
            float(np.mean([router_instability(decs[i - 1], decs[i]) for i in range(1, len(decs))]))
            if len(decs) > 1 else 0.0)
        trace.ms_per_step.append(dt)
        if step % eval_every == 0:
            record_eval(step)
        if on_step is not None:
            on_step(step, trace)
    return model, trace


def contaminate(x, rng, noise_scale: float = 0.0, cov_eps=None):
    """Add zero-mean Gaussian noise: isotropic ``noise_scale`` or a full ``cov_eps``."""
    x = np.asarray(x, dtype=np.float64)
    if cov_eps is not None:
        return x + sample_gaussian(rng, np.zeros(x.shape[1]), cov_eps, x.shape[0])
    if noise_scale == 0.0:
        return x.copy()
    return x + noise_scale * as_generator(rng).standard_normal(x.shape)


def evaluate(model: MoeModel, task: GmmTask, noise_scale: float = 0.0, cov_eps=None, n: int = 4096,
             seed: Optional[int] = None) -> dict:
    """Held-out loss on clean inputs and on a noisy copy of the same inputs.

    Only the inputs are perturbed; targets stay clean. The noise draw is keyed
    by ``seed`` (default: the model's seed) so paired models see identical noise.
    """
    seed = model.config.seed if seed is None else seed
    x, y, _ = heldout_set(task, seed, n)
    xn = contaminate(x, RngStream(seed, NOISE_STREAM), noise_scale, cov_eps)
    clean = model.task_loss(x, y)
    noisy = model.task_loss(xn, y)
    return {"clean_loss": clean, "contaminated_loss": noisy, "gap": noisy - clean}


# ---------------------------------------------------------------------------
# checkpoint: magic, format version, config json, then named float64 arrays
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"ACMOECKP"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: MoeModel):
    with open(path, "wb") as f:
        f.write(dumps_checkpoint(model))


def dumps_checkpoint(model: MoeModel) -> bytes:
    meta = json.dumps({"config": model.config.to_dict(), "d_in": model.d_in, "d_out": model.d_out},
                      sort_keys=True).encode()
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(meta)), meta,
           struct.pack("<I", len(model.params))]
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        key = name.encode()
        out.append(struct.pack("<HB", len(key), arr.ndim) + key)
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def load_checkpoint(path) -> MoeModel:
    with open(path, "rb") as f:
        return loads_checkpoint(f.read())


def loads_checkpoint(blob: bytes) -> MoeModel:
    try:
        return _loads(blob)
    except CheckpointError:
        raise
    except (struct.error, ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc


def _loads(blob: bytes) -> MoeModel:
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    pos = 8
    version, meta_len = struct.unpack_from("<II", blob, pos)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos += 8
    meta = json.loads(blob[pos:pos + meta_len])
    pos += meta_len
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    params = {}
    for _ in range(count):
        klen, ndim = struct.unpack_from("<HB", blob, pos)
        pos += 3
        name = blob[pos:pos + klen].decode()
        pos += klen
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        size = int(np.prod(shape, dtype=np.int64)) * 8
        if pos + size > len(blob):
            raise CheckpointError(f"truncated data for {name}")
        params[name] = np.frombuffer(blob, "<f8", size // 8, pos).reshape(shape).astype(np.float64)
        pos += size
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last array")
    config = ModelConfig(**meta["config"])
    return MoeModel(config, meta["d_in"], meta["d_out"], params)


# ---------------------------------------------------------------------------
# paired standard-vs-adaptive comparison
# ---------------------------------------------------------------------------


def paired_race(base: ModelConfig, task: GmmTask, seeds, steps: int, batch_size: int = 256,
                eval_every: int = 10, window: int = 10, plateau_factor: float = 1.2,
                noise_scale: float = 0.5, on_run: Optional[Callable] = None) -> dict:
    """Train standard routing and ``base``'s adaptive routing on the same seeds.

    The shared threshold is ``plateau_factor`` times the median (over every run
    of both modes) of the final trailing-mean eval loss, so it sits just above
    the level both modes reach. A run that never reaches it counts as
    ``steps + 1``. The contaminated-minus-clean gap is taken at ``noise_scale``
    on each seed's held-out set with identical noise for both modes.
    """
    from dataclasses import replace

    from ..metrics import steps_to_threshold, trailing_mean

    modes = {"standard": replace(base, placement="none"), "ac": base}
    runs = {name: [] for name in modes}
    for seed in seeds:
        for name, cfg in modes.items():
            cfg = replace(cfg, seed=seed)
            model, trace = train(cfg, task, steps, batch_size, eval_every)
            ev = evaluate(model, task, noise_scale)
            runs[name].append({"seed": seed, "trace": trace, "eval": ev})
            if on_run is not None:
                on_run(name, seed, trace, ev)
    finals = [trailing_mean(r["trace"].eval_loss, window)[-1] for rs in runs.values() for r in rs]
    threshold = plateau_factor * float(np.median(finals))
    out = {"threshold": threshold, "runs": runs}
    for name, rs in runs.items():
        reached = [steps_to_threshold(r["trace"], threshold, window) for r in rs]
        counted = [steps + 1 if s is None else s for s in reached]
        out[name] = {
            "steps_to_threshold": reached,
            "median_steps": float(np.median(counted)),
            "mean_gap": float(np.mean([r["eval"]["gap"] for r in rs])),
        }
    return out
