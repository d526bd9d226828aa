"""Self-supervised training of the deep decomposer.

Each iteration draws one subject (epoch-wise seeded shuffle), predicts its
networks, evaluates the substituted factorization loss on the in-mask voxels,
backpropagates and applies one Adam step.
"""

import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .factorization import substituted_loss_graph
from .model import ModelConfig, check_extents, forward_graph, init_params, model_input, param_shapes

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"FNCK1\n"
# Relative ridge on VV^T in the training loss. It acts as a penalty on the
# time courses: with 1e-8 the network learns near-duplicate maps whose small
# differences, amplified by an ill-conditioned inverse, stand in for the
# networks it failed to separate.
TRAIN_RIDGE = 0.1
# Sparsity weight for training. Inputs are scaled to unit Frobenius norm, so
# the data fit is O(1) and a weight of 1e-3 lets single-voxel networks (Hoyer
# ratio near 1) win over real ones on low-SNR subjects.
TRAIN_LAMBDA = 3e-4
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, truncated or incompatible checkpoint."""


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, layers):
        self.layers = list(layers)
        super().__init__(f"non-finite gradient in {', '.join(self.layers)}")


class TrainingHalted(FloatingPointError):
    """The loss became NaN or Inf."""

    def __init__(self, iteration, subject, checkpoint=None):
        self.iteration = iteration
        self.subject = subject
        self.checkpoint = checkpoint
        msg = f"non-finite loss at iteration {iteration} (subject {subject})"
        if checkpoint:
            msg += f"; last state written to {checkpoint}"
        super().__init__(msg)


@dataclass(frozen=True)
class TrainConfig:
    lam: float = TRAIN_LAMBDA
    lr: float = 1e-4
    iterations: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0
    ridge: float = TRAIN_RIDGE

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.ridge < 0:
            raise ValueError("ridge must be nonnegative")

    @classmethod
    def from_dict(cls, cfg):
        known = {f.name for f in fields(cls)}
        unknown = set(cfg) - known
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        return cls(**cfg)

    def to_dict(self):
        return asdict(self)


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    subject: str
    data_fit: float
    sparsity: float
    total: float


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns new ``(params, state)``."""
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradientError(bad)
    step = state.step + 1
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k].astype(p.dtype, copy=False)
        m = beta1 * state.m[k] + (1 - beta1) * g
        v = beta2 * state.v[k] + (1 - beta2) * (g * g)
        update = (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
        new_params[k] = (p - update).astype(p.dtype, copy=False)
        new_m[k] = m.astype(p.dtype, copy=False)
        new_v[k] = v.astype(p.dtype, copy=False)
    return new_params, AdamState(new_m, new_v, step)


def subject_order(n, seed, epoch):
    return np.random.default_rng([seed, epoch]).permutation(n)


def subject_at(iteration, n, seed):
    """Subject index for the 0-based ``iteration``."""
    return int(subject_order(n, seed, iteration // n)[iteration % n])


def loss_and_grads(params, x, dm, config, lam, ridge=TRAIN_RIDGE):
    tape = ad.Tape()
    nodes = {k: tape.parameter(v, name=k) for k, v in params.items()}
    V = forward_graph(tape, nodes, x, dm.index, config)
    total, fit, sparsity = substituted_loss_graph(dm.X, ad.astype(V, np.float64), lam, ridge)
    grads = tape.backward(total)
    return (float(fit.value), float(sparsity.value), float(total.value)), grads


def prepare_subjects(volumes, config):
    """Network inputs and data matrices for every subject (shared extents and
    mask required)."""
    if not volumes:
        raise ValueError("dataset is empty")
    spatial = volumes[0].spatial
    mask = volumes[0].full_mask()
    prepared = []
    for v in volumes:
        if v.spatial != spatial or not np.array_equal(v.full_mask(), mask):
            raise ValueError("all subjects must share spatial extents and mask")
        prepared.append(model_input(v, mask, config.normalize))
    check_extents(spatial)
    return prepared


def train(volumes, model_config, train_config, ids=None, params=None, state=None,
          start_iteration=0, checkpoint_dir=None, prepared=None):
    """Optimize the model on ``volumes``.

    Passing ``params``, ``state`` and ``start_iteration`` from a checkpoint
    resumes a run; the remaining trace is identical to the uninterrupted one.

    Returns ``(params, state, trace)`` with one :class:`TraceRow` per
    iteration performed.
    """
    ids = list(ids) if ids is not None else [f"sub-{i:03d}" for i in range(len(volumes))]
    prepared = prepared if prepared is not None else prepare_subjects(volumes, model_config)
    n = len(prepared)
    tc = train_config
    if params is None:
        params = init_params(model_config, tc.seed)
    if state is None:
        state = AdamState.zeros_like(params)
    trace = []
    last_ckpt = None
    for it in range(start_iteration, tc.iterations):
        idx = subject_at(it, n, tc.seed)
        x, dm = prepared[idx]
        (fit, sparsity, total), grads = loss_and_grads(params, x, dm, model_config, tc.lam, tc.ridge)
        if not np.isfinite(total):
            raise TrainingHalted(it + 1, ids[idx], last_ckpt)
        params, state = adam_step(params, grads, state, tc.lr, tc.beta1, tc.beta2, tc.adam_eps)
        trace.append(TraceRow(it + 1, ids[idx], fit, sparsity, total))
        if (it + 1) % 100 == 0:
            log.info("iteration %d total %.6g", it + 1, total)
        if checkpoint_dir is not None and tc.checkpoint_every and (it + 1) % tc.checkpoint_every == 0:
            last_ckpt = Path(checkpoint_dir) / f"iter-{it + 1:06d}.fnck"
            save_checkpoint(last_ckpt, params, state, model_config, tc, it + 1)
    return params, state, trace


def write_trace(path, trace):
    with open(path, "w") as fh:
        fh.write("iteration\tsubject\tdata_fit\tsparsity\ttotal\n")
        for r in trace:
            fh.write(f"{r.iteration}\t{r.subject}\t{r.data_fit!r}\t{r.sparsity!r}\t{r.total!r}\n")


def read_trace(path):
    rows = []
    with open(path) as fh:
        next(fh)
        for line in fh:
            it, sub, fit, sp, tot = line.rstrip("\n").split("\t")
            rows.append(TraceRow(int(it), sub, float(fit), float(sp), float(tot)))
    return rows


# checkpoints

def save_checkpoint(path, params, state, model_config, train_config=None, iteration=0):
    """Header line with names, shapes and configs, then a little-endian float32
    blob holding the parameters followed by the Adam moments."""
    tensors, blobs = [], []
    for group, src in (("param", params), ("adam_m", state.m), ("adam_v", state.v)):
        for name, arr in src.items():
            tensors.append({"group": group, "name": name, "shape": list(arr.shape)})
            blobs.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    header = {
        "version": CHECKPOINT_VERSION,
        "model": model_config.to_dict(),
        "train": train_config.to_dict() if train_config is not None else None,
        "seed": train_config.seed if train_config is not None else None,
        "iteration": int(iteration),
        "adam_step": int(state.step),
        "tensors": tensors,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for b in blobs:
            fh.write(b)


def load_checkpoint(path, expected_config=None):
    """Read a checkpoint written by :func:`save_checkpoint`.

    Returns a dict with ``params``, ``state``, ``model_config``,
    ``train_config``, ``iteration``. With ``expected_config`` the stored
    shapes must match that configuration layer by layer.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    nl = raw.find(b"\n", len(CHECKPOINT_MAGIC))
    if nl < 0:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[len(CHECKPOINT_MAGIC):nl])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: version {header.get('version')} != {CHECKPOINT_VERSION}")
    model_config = ModelConfig.from_dict(header["model"])
    sizes = [int(np.prod(t["shape"])) for t in header["tensors"]]
    payload = raw[nl + 1:]
    if len(payload) != 4 * sum(sizes):
        ends = np.cumsum(sizes) * 4
        cut = int(np.searchsorted(ends, len(payload), side="right"))
        where = ""
        if len(payload) < ends[-1]:
            t = header["tensors"][cut]
            where = f"; first incomplete tensor {t['group']}:{t['name']}"
        raise CheckpointError(
            f"{path}: payload has {len(payload)} bytes, header implies {4 * sum(sizes)}{where}")
    groups = {"param": {}, "adam_m": {}, "adam_v": {}}
    offset = 0
    for t, size in zip(header["tensors"], sizes):
        arr = np.frombuffer(payload, dtype="<f4", count=size, offset=offset).reshape(t["shape"])
        groups[t["group"]][t["name"]] = arr.astype(np.float32)
        offset += 4 * size
    if expected_config is not None:
        want = param_shapes(expected_config)
        have = {k: tuple(v.shape) for k, v in groups["param"].items()}
        diffs = [f"{k}: checkpoint {have.get(k)} vs expected {want.get(k)}"
                 for k in sorted(set(want) | set(have)) if want.get(k) != have.get(k)]
        if diffs:
            raise CheckpointError(f"{path}: shape mismatch\n  " + "\n  ".join(diffs))
    train_config = TrainConfig.from_dict(header["train"]) if header.get("train") else None
    return {
        "params": groups["param"],
        "state": AdamState(groups["adam_m"], groups["adam_v"], header["adam_step"]),
        "model_config": model_config,
        "train_config": train_config,
        "iteration": header["iteration"],
    }
