"""Command line entry point: ``fndecomp {synth,train,infer,nmf,eval}``.

Every command reads an optional JSON config with the sections ``cohort``,
``model``, ``train``, ``nmf`` and ``eval``; flags override file values and
the fully resolved config is written next to the outputs. Exit codes: 0 on
success, 2 for input or configuration errors, 3 for numerical failures.
"""

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import (
    CohortSpec, Volume4D, flatten, fns_to_volume, generate_cohort, load_volume, read_manifest, save_volume,
    subject_id, volume_to_fns, write_manifest,
)
from .evaluation import (
    DEFAULT_ALPHAS, extract_features, fn_label_map, match_fns, nested_cv_predict, write_prediction_report,
)
from .factorization import nmf_decompose
from .model import ModelConfig, predict_fns
from .tensor import NonFiniteError
from .trainer import (
    TrainConfig, TrainingHalted, load_checkpoint, prepare_subjects, read_trace, save_checkpoint, train,
    write_trace,
)

log = logging.getLogger("fndecomp")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class InputError(ValueError):
    """Bad paths, ids or configuration; reported with exit code 2."""


@dataclass
class NMFSettings:
    n_networks: int = 17
    lam: float = 1e-3
    max_iters: int = 1000
    tol: float = 1e-6
    normalize: str = "unit"
    seed: int = 0


@dataclass
class EvalSettings:
    outer_folds: int = 2
    inner_folds: int = 2
    repetitions: int = 100
    alphas: list = field(default_factory=lambda: [float(a) for a in DEFAULT_ALPHAS])
    seed: int = 0


SECTIONS = {"cohort": CohortSpec, "model": ModelConfig, "train": TrainConfig, "nmf": NMFSettings,
            "eval": EvalSettings}


def _section_dict(obj):
    return obj.to_dict() if hasattr(obj, "to_dict") else asdict(obj)


def load_config(path=None):
    """Read a config file into a dict of section objects; unknown sections or
    keys raise :class:`InputError`."""
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise InputError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: invalid JSON ({exc})") from None
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise InputError(f"unknown config sections: {sorted(unknown)}")
    out = {}
    for name, cls in SECTIONS.items():
        values = raw.get(name, {})
        known = {f.name for f in fields(cls)}
        bad = set(values) - known
        if bad:
            raise InputError(f"unknown {name} keys: {sorted(bad)}")
        try:
            out[name] = cls.from_dict(values) if hasattr(cls, "from_dict") else cls(**values)
        except (TypeError, ValueError) as exc:
            raise InputError(f"invalid {name} config: {exc}") from None
    return out


def _override(obj, **changes):
    changes = {k: v for k, v in changes.items() if v is not None}
    if not changes:
        return obj
    d = _section_dict(obj)
    d.update(changes)
    cls = type(obj)
    try:
        return cls.from_dict(d) if hasattr(cls, "from_dict") else cls(**d)
    except (TypeError, ValueError) as exc:
        raise InputError(str(exc)) from None


def resolve(args):
    cfg = load_config(args.config)
    cfg["cohort"] = _override(cfg["cohort"], seed=args.seed, k_true=args.k)
    cfg["model"] = _override(cfg["model"], n_networks=args.k)
    cfg["train"] = _override(cfg["train"], seed=args.seed, lam=args.lam, iterations=args.iters)
    cfg["nmf"] = _override(cfg["nmf"], seed=args.seed, lam=args.lam, n_networks=args.k, max_iters=args.iters)
    cfg["eval"] = _override(cfg["eval"], seed=args.seed)
    return cfg


def write_resolved(out, cfg, command):
    doc = {"command": command, **{k: _section_dict(v) for k, v in cfg.items()}}
    (out / "config.resolved.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _read_volume(path):
    if not Path(path).is_file():
        raise InputError(f"volume not found: {path}")
    return load_volume(path)


def gather_inputs(items):
    """Expand positional inputs (FNV1 files or manifests) to
    ``[(id, path, covariate), ...]`` in the given order."""
    out = []
    for item in items:
        p = Path(item)
        if p.suffix == ".fnv":
            out.append((subject_id(p), str(p), None))
        elif p.is_file():
            out.extend((subject_id(v), v, c) for v, c in read_manifest(p))
        else:
            raise InputError(f"input not found: {item}")
    if not out:
        raise InputError("no input volumes given")
    ids = [i for i, _, _ in out]
    dup = sorted({i for i in ids if ids.count(i) > 1})
    if dup:
        raise InputError(f"duplicate subject ids: {dup}")
    return out


def _write_matrix(path, M, header=None):
    with open(path, "w") as fh:
        if header:
            fh.write("\t".join(header) + "\n")
        for row in np.atleast_2d(M):
            fh.write("\t".join(repr(float(x)) for x in row) + "\n")


# commands

def cmd_synth(args, cfg):
    out = Path(args.out)
    spec = cfg["cohort"]
    cohort = generate_cohort(spec)
    (out / "subjects").mkdir(parents=True, exist_ok=True)
    (out / "truth").mkdir(exist_ok=True)
    entries = []
    for sid, vol, truth in zip(cohort.ids, cohort.volumes, cohort.truth):
        vpath = out / "subjects" / f"{sid}.fnv"
        save_volume(vpath, vol)
        save_volume(out / "truth" / f"{sid}_fns.fnv", fns_to_volume(truth.V, cohort.mask))
        K = truth.U.shape[1]
        _write_matrix(out / "truth" / f"{sid}_timecourses.tsv", truth.U, [f"fn{k}" for k in range(K)])
        entries.append((vpath, truth.covariate))
    write_manifest(out / "manifest.tsv", entries)
    write_resolved(out, {"cohort": spec}, "synth")
    print(f"wrote {len(entries)} subjects to {out}")


def cmd_train(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = gather_inputs(args.inputs)
    ids = [i for i, _, _ in inputs]
    volumes = [_read_volume(p) for _, p, _ in inputs]
    model_cfg, train_cfg = cfg["model"], cfg["train"]
    params = state = None
    start = 0
    previous = []
    if args.checkpoint:
        ck = _load_checkpoint(args.checkpoint, model_cfg)
        params, state, start = ck["params"], ck["state"], ck["iteration"]
        trace_path = out / "loss_trace.tsv"
        if trace_path.is_file():
            previous = [r for r in read_trace(trace_path) if r.iteration <= start]
    try:
        prepared = prepare_subjects(volumes, model_cfg)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    ckdir = out / "checkpoints" if train_cfg.checkpoint_every else None
    params, state, trace = train(volumes, model_cfg, train_cfg, ids=ids, params=params, state=state,
                                 start_iteration=start, checkpoint_dir=ckdir, prepared=prepared)
    trace = previous + trace
    save_checkpoint(out / "checkpoint.fnck", params, state, model_cfg, train_cfg, train_cfg.iterations)
    write_trace(out / "loss_trace.tsv", trace)
    write_resolved(out, {"model": model_cfg, "train": train_cfg}, "train")
    last = trace[-1].total if trace else float("nan")
    print(f"trained {train_cfg.iterations} iterations; final total loss {last:.6g}")


def _load_checkpoint(path, expected=None):
    if not Path(path).is_file():
        raise InputError(f"checkpoint not found: {path}")
    return load_checkpoint(path, expected)


def cmd_infer(args, cfg):
    if not args.checkpoint:
        raise InputError("infer needs --checkpoint")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ck = _load_checkpoint(args.checkpoint)
    model_cfg = ck["model_config"]
    timings = []
    for sid, path, _ in gather_inputs(args.inputs):
        vol = _read_volume(path)
        t0 = time.perf_counter()
        fns = predict_fns(vol, ck["params"], model_cfg)
        seconds = time.perf_counter() - t0
        save_volume(out / f"{sid}_fns.fnv", fns)
        labels = fn_label_map(fns.values, vol.mask).astype(np.float32)
        save_volume(out / f"{sid}_labels.fnv", Volume4D(labels, mask=vol.mask, kind="labels"))
        timings.append((sid, seconds))
    with open(out / "timing.tsv", "w") as fh:
        fh.write("subject\tseconds\n")
        for sid, s in timings:
            fh.write(f"{sid}\t{s:.6f}\n")
        secs = np.array([s for _, s in timings])
        fh.write(f"# mean\t{secs.mean():.6f}\n# sd\t{secs.std():.6f}\n")
    write_resolved(out, {"model": model_cfg}, "infer")
    print(f"inferred {len(timings)} subjects in {secs.sum():.2f} s")


def cmd_nmf(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    s = cfg["nmf"]
    matches = []
    for sid, path, _ in gather_inputs(args.inputs):
        vol = _read_volume(path)
        X = flatten(vol, normalize=s.normalize).X
        if not 1 <= s.n_networks <= min(X.shape):
            raise InputError(f"{sid}: K={s.n_networks} must lie in [1, min(T, S)] = [1, {min(X.shape)}]")
        U, V, trace = nmf_decompose(X, s.n_networks, s.lam, s.max_iters, s.tol, seed=s.seed)
        mask = vol.full_mask()
        save_volume(out / f"{sid}_fns.fnv", fns_to_volume(V, mask))
        _write_matrix(out / f"{sid}_timecourses.tsv", U, [f"fn{k}" for k in range(s.n_networks)])
        with open(out / f"{sid}_trace.tsv", "w") as fh:
            fh.write("sweep\tobjective\n")
            for i, total in enumerate(trace):
                fh.write(f"{i}\t{total!r}\n")
        truth_path = Path(path).parent.parent / "truth" / f"{sid}_fns.fnv"
        if truth_path.is_file():
            Vt = volume_to_fns(load_volume(truth_path), mask)
            if Vt.shape == V.shape:
                matches.append((sid, match_fns(V, Vt)))
    if matches:
        write_match_report(out / "match_report.tsv", matches)
    write_resolved(out, {"nmf": s}, "nmf")
    summary = f"; mean matched r {np.mean([m.mean_correlation for _, m in matches]):.4f}" if matches else ""
    print(f"decomposed {len(list(out.glob('*_fns.fnv')))} subjects{summary}")


def write_match_report(path, matches):
    with open(path, "w") as fh:
        fh.write("subject\tmean_r\tcorrelations\tpermutation\n")
        for sid, m in matches:
            corr = ",".join(repr(float(c)) for c in m.correlations)
            perm = ",".join(str(int(p)) for p in m.permutation)
            fh.write(f"{sid}\t{m.mean_correlation!r}\t{corr}\t{perm}\n")
        fh.write(f"# cohort_mean_r\t{float(np.mean([m.mean_correlation for _, m in matches]))!r}\n")


def _fn_files(directory):
    d = Path(directory)
    if not d.is_dir():
        raise InputError(f"not a directory: {directory}")
    return {p.name[: -len("_fns.fnv")]: p for p in sorted(d.glob("*_fns.fnv"))}


def cmd_eval(args, cfg):
    if not args.pred:
        raise InputError("eval needs --pred")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pred = _fn_files(args.pred)
    ids = sorted(pred)
    covariates = None
    if args.manifest:
        if not Path(args.manifest).is_file():
            raise InputError(f"manifest not found: {args.manifest}")
        entries = {subject_id(v): c for v, c in read_manifest(args.manifest)}
        missing = [i for i in entries if i not in pred]
        if missing:
            raise InputError(f"subjects in the manifest without predictions: {missing}")
        ids = list(entries)
        covariates = np.array([entries[i] for i in ids], dtype=float) if None not in entries.values() else None
    if not ids:
        raise InputError(f"no *_fns.fnv files in {args.pred}")
    stacks = {i: volume_to_fns(load_volume(pred[i])) for i in ids}

    if args.truth:
        truth = _fn_files(args.truth)
        missing = [i for i in ids if i not in truth]
        if missing:
            raise InputError(f"subjects missing from the truth directory: {missing}")
        matches = []
        for i in ids:
            Vt = volume_to_fns(load_volume(truth[i]))
            if Vt.shape != stacks[i].shape:
                raise InputError(f"{i}: prediction {stacks[i].shape} and truth {Vt.shape} differ in shape")
            matches.append((i, match_fns(stacks[i], Vt)))
        write_match_report(out / "match_report.tsv", matches)
        print(f"mean matched r {np.mean([m.mean_correlation for _, m in matches]):.4f} over {len(ids)} subjects")

    if covariates is not None:
        e = cfg["eval"]
        # networks are aligned to the first subject so features line up across subjects
        ref = stacks[ids[0]]
        feats = []
        for i in ids:
            order = np.argsort(match_fns(stacks[i], ref).permutation)
            feats.append(extract_features(stacks[i][order]))
        y = covariates
        if args.shuffle:
            y = np.random.default_rng(e.seed).permutation(y)
        report = nested_cv_predict(np.stack(feats), y, e.outer_folds, e.inner_folds, e.repetitions,
                                   e.alphas, e.seed)
        write_prediction_report(out / "prediction_report.tsv", report)
        print(f"prediction r {report.mean_r:.4f} +/- {report.sd_r:.4f}, "
              f"MAE {report.mean_mae:.4f} +/- {report.sd_mae:.4f}")
    write_resolved(out, {"eval": cfg["eval"]}, "eval")


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "infer": cmd_infer, "nmf": cmd_nmf, "eval": cmd_eval}


def build_parser():
    parser = argparse.ArgumentParser(prog="fndecomp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="seed for every random choice of the command")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--checkpoint", help="checkpoint to resume from (train) or to apply (infer)")
    common.add_argument("--lambda", dest="lam", type=float, help="sparsity weight")
    common.add_argument("--k", type=int, help="number of networks")
    common.add_argument("--iters", type=int, help="training iterations or NMF sweeps")
    sub.add_parser("synth", parents=[common], help="write a synthetic cohort")
    for name, text in (("train", "train the deep decomposer"), ("infer", "predict networks with a checkpoint"),
                       ("nmf", "per-subject sparse semi-NMF")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("inputs", nargs="+", help="FNV1 volumes or manifests")
    p = sub.add_parser("eval", parents=[common], help="score predictions and run the prediction protocol")
    p.add_argument("--pred", help="directory of <id>_fns.fnv predictions")
    p.add_argument("--truth", help="directory of <id>_fns.fnv ground truth")
    p.add_argument("--manifest", help="manifest with covariates for the prediction protocol")
    p.add_argument("--shuffle", action="store_true", help="permute covariates (null control)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        COMMANDS[args.command](args, cfg)
    except (TrainingHalted, NonFiniteError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"fndecomp {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        print(f"fndecomp {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
