"""``f4flow`` command-line front end.

Exit codes: 0 success, 1 runtime error, 2 bad flags. Every file is written
atomically (temp file + rename), so a failed command leaves no partial
outputs behind.
"""
from __future__ import annotations

import argparse
import glob
import logging
import math
import os
import sys
import warnings
import zlib
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from . import __version__
from .autodiff import upsample2_array
from .config import SEED_ENV, ConfigError, ExperimentConfig
from .ensemble import (DescriptorError, EnsembleDescriptor, LoadedModel, load_any, write_descriptor)
from .evaluate import (OracleStub, TrilinearStub, evaluate_patches, export_report, export_slice,
                       recover_native_eval)
from .models import F4DW_VERSION, load_model, save_params
from .patches import (COMPARTMENT_CODES, F4DP_VERSION, PatchSet, assign_models, augment_rotations,
                      extract_patches, read_dataset, split_from_assignment, write_dataset)
from .phantoms import FAMILIES, PhantomSpec, generate_sequence, read_manifest, write_manifest
from .pipeline import derive_seed, draw_snr
from .synth import NOISE_AFTER_CROP, NOISE_BEFORE_CROP, NoiseSpec, SynthPair, synthesize_pair
from .training import (TrainingDivergedError, bootstrap_dataset, member_seeds, train_base, train_meta,
                       write_log)
from .volume import (F4DV_VERSION, FlowSample, VectorField, VolumeFormatError, VolumeGrid, _atomic_write,
                     read_sample, write_sample)

log = logging.getLogger("f4flow")

STUBS = ("oracle-stub", "trilinear-stub")


class UsageError(Exception):
    """Bad flag combination detected after parsing (exit code 2)."""


# -- small helpers -------------------------------------------------------------------

def _snr_range(text: str) -> Tuple[float, float]:
    try:
        lo, hi = (float(t) for t in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected A:B, got {text!r}") from None
    if not 0 < lo <= hi:
        raise argparse.ArgumentTypeError("SNR bounds must satisfy 0 < A <= B")
    return lo, hi


def _ratios(text: str) -> Tuple[int, int, int]:
    try:
        parts = tuple(int(t) for t in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a:b:c, got {text!r}") from None
    if len(parts) != 3 or min(parts) < 0 or sum(parts) == 0:
        raise argparse.ArgumentTypeError("ratios must be three non-negative integers")
    return parts


def _resolve_seed(flag: Optional[int], default: int = 0) -> int:
    """Explicit flag, else the F4FLOW_SEED environment variable, else ``default``."""
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer") from None
    return default


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode())


def _rel(path: str, start: str) -> str:
    return os.path.relpath(path, start)


# -- stages (shared by the subcommands and `run`) ------------------------------------

def stage_phantom(family: str, out: str, frames: int = 1, seed: int = 0, grid: int = 48,
                  dx: float = 1.5, models: int = 1) -> List[str]:
    """Write frames and one manifest per phantom model; returns manifest paths."""
    os.makedirs(out, exist_ok=True)
    manifests = []
    for i in range(models):
        spec = PhantomSpec(family, grid=VolumeGrid(grid, grid, grid, dx),
                           seed=derive_seed(seed, FAMILIES.index(family), i))
        name = f"{family}-m{i}"
        rows = []
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            seq = generate_sequence(spec, frames)
        for frame in seq:
            fname = f"{name}_f{frame.frame:03d}.f4v"
            write_sample(os.path.join(out, fname), frame)
            rows.append((fname, frame.compartment, frame.frame, frame.venc))
        path = os.path.join(out, f"{name}.manifest")
        write_manifest(path, rows, model=name)
        manifests.append(path)
    return manifests


def stage_synth(manifest: str, snr: Tuple[float, float], out: str, seed: int = 0,
                noise_order: str = NOISE_BEFORE_CROP) -> str:
    """Write hr/lr volume pairs plus a ``.pairs`` manifest with per-frame sigma."""
    model, rows = read_manifest(manifest)
    if model is None:
        model = os.path.splitext(os.path.basename(manifest))[0]
    if not rows:
        raise ValueError(f"manifest {manifest} lists no frames")
    os.makedirs(out, exist_ok=True)
    rng = np.random.default_rng(derive_seed(seed, _name_key(model)))
    lines = [f"# model {model}"]
    for path, compartment, frame, venc in rows:
        sample = read_sample(path, venc, compartment, frame)
        s = draw_snr(rng, snr)
        pair = synthesize_pair(sample, NoiseSpec(s, derive_seed(seed, _name_key(model), frame)),
                               noise_order=noise_order)
        hr_name = f"{model}_f{frame:03d}.hr.f4v"
        lr_name = f"{model}_f{frame:03d}.lr.f4v"
        write_sample(os.path.join(out, hr_name), pair.hr)
        write_sample(os.path.join(out, lr_name), pair.lr)
        lines.append(f"{hr_name} {lr_name} {compartment} {frame} {venc:g} {pair.sigma!r} {s!r}")
    out_manifest = os.path.join(out, f"{model}.pairs")
    _atomic_write(out_manifest, ("\n".join(lines) + "\n").encode())
    return out_manifest


def read_pairs(path):
    """Parse a ``.pairs`` manifest into ``(model, [(hr, lr, compartment, frame, venc, sigma)])``."""
    base = os.path.dirname(os.path.abspath(path))
    model, rows = None, []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) == 2 and parts[0] == "model":
                    model = parts[1]
                continue
            hr, lr, comp, frame, venc, sigma = line.split()[:6]
            rows.append((os.path.join(base, hr), os.path.join(base, lr), comp, int(frame), float(venc),
                         float(sigma)))
    return model, rows


def split_manifest_path(dataset: str) -> str:
    return dataset + ".split"


def write_split_manifest(path: str, names: Dict[int, str], assignment: Dict[int, str],
                         compartments: Dict[int, str]) -> None:
    lines = ["# model_name id split compartment"]
    for mid in sorted(names):
        lines.append(f"{names[mid]} {mid} {assignment.get(mid, 'none')} {compartments[mid]}")
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


def read_split_manifest(path: str):
    """Returns ``{id: (name, split, compartment)}``."""
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            name, mid, split, comp = line.split()
            out[int(mid)] = (name, split, comp)
    return out


def stage_patch(in_dir: str, out: str, stride: int = 6, min_fluid: float = 0.05, rotations: int = 0,
                ratios=(6, 2, 2), seed: int = 0) -> Tuple[PatchSet, int, int]:
    """Extract, augment and split patches from every ``.pairs`` manifest in ``in_dir``."""
    manifests = sorted(glob.glob(os.path.join(in_dir, "*.pairs")))
    if not manifests:
        raise FileNotFoundError(f"no .pairs manifests in {in_dir}")
    parsed = [read_pairs(m) for m in manifests]
    names = sorted(m for m, _ in parsed)
    ids = {name: i for i, name in enumerate(names)}
    sets, kept, rejected = [], 0, 0
    comps: Dict[int, str] = {}
    for model, rows in parsed:
        mid = ids[model]
        for hr_path, lr_path, comp, frame, venc, sigma in rows:
            comps[mid] = comp
            hr = read_sample(hr_path, venc, comp, frame)
            lr = read_sample(lr_path, venc, comp, frame)
            ps, k, r = extract_patches(SynthPair(hr, lr, sigma), stride=stride, min_fluid_frac=min_fluid,
                                       source_model=mid, return_counts=True)
            sets.append(ps)
            kept += k
            rejected += r
    patches = PatchSet.concatenate(sets)
    if rotations and len(patches):
        patches = augment_rotations(patches, rotations, derive_seed(seed, 99))
    assignment: Dict[int, str] = {}
    present = {int(m): int(c) for m, c in zip(*np.unique(patches.source_model, return_counts=True))}
    if len(present) >= 3:
        assignment = assign_models(present, ratios, seed)
    elif present:
        assignment = {m: "test" for m in present}
    write_dataset(out, patches)
    write_split_manifest(split_manifest_path(out), {i: n for n, i in ids.items()}, assignment, comps)
    return patches, kept, rejected


def load_split(dataset: str):
    """Dataset plus ``(train, validation, test)`` and the id -> name map."""
    ps = read_dataset(dataset)
    info = read_split_manifest(split_manifest_path(dataset))
    split = split_from_assignment(ps, {mid: s for mid, (_, s, _) in info.items()})
    return ps, split, {mid: name for mid, (name, _, _) in info.items()}


def _models_in(ps: PatchSet, names: Dict[int, str]) -> List[str]:
    return sorted({names[int(m)] for m in np.unique(ps.source_model)})


def stage_train(dataset: str, cfg: ExperimentConfig, out: str, bootstrap: Optional[int] = None,
                compartment: Optional[str] = None, seed: Optional[int] = None,
                block_kind: Optional[str] = None) -> LoadedModel:
    ps, split, names = load_split(dataset)
    train, val, _ = split.apply(ps)
    compartment = compartment or cfg["train"]["compartment"] or None
    if compartment:
        if compartment not in COMPARTMENT_CODES:
            raise UsageError(f"unknown compartment {compartment!r}")
        train = train.select_compartment(compartment)
        sub = val.select_compartment(compartment)
        val = sub if len(sub) else val
    if bootstrap is not None:
        train = bootstrap_dataset(train, bootstrap)
    if not len(train) or not len(val):
        raise ValueError("training and validation splits must be non-empty")
    seed = cfg.seed if seed is None else seed
    spec = cfg.model_spec(seed=seed, block_kind=block_kind)
    tcfg = cfg.train_config(seed=seed)
    log.info("training %s on %d patches (%d validation)", spec.to_line(), len(train), len(val))
    res = train_base(train, val, spec, tcfg, progress=lambda r: log.info(
        "epoch %d lr %.3g train %.6g val %.6g", r.epoch, r.lr, r.train_loss, r.val_loss))
    extras = {"train_models": ",".join(_models_in(train, names)), "data": os.path.basename(dataset)}
    save_params(out, res.model.params, spec, extras)
    write_log(out + ".log.csv", res.log)
    cfg.write(out + ".config.ini")
    return LoadedModel("base", [res.model], train_models=set(extras["train_models"].split(",")))


def stage_meta(members: Sequence[str], dataset: str, cfg: ExperimentConfig, out: str,
               seed: Optional[int] = None) -> str:
    loaded = [load_any(m) for m in members]
    bases = [lm.members[0] for lm in loaded]
    ps, split, names = load_split(dataset)
    train, val, _ = split.apply(ps)
    seed = cfg.seed if seed is None else seed
    spec = cfg.meta_spec(len(bases), seed=seed)
    tcfg = cfg.train_config(seed=seed, epochs=cfg["ensemble"]["meta_epochs"])
    res = train_meta(bases, spec, train, val, tcfg, progress=lambda r: log.info(
        "meta epoch %d train %.6g val %.6g", r.epoch, r.train_loss, r.val_loss))
    seen = set(_models_in(train, names))
    for lm in loaded:
        seen |= lm.train_models or set()
    save_params(out, res.model.params, spec, {"train_models": ",".join(sorted(seen)),
                                              "data": os.path.basename(dataset)})
    write_log(out + ".log.csv", res.log)
    cfg.write(out + ".config.ini")
    return out


def _check_unseen(model: LoadedModel, eval_models: Set[str]) -> None:
    if model.train_models is None:
        log.warning("model does not record its training models; unseen-domain check skipped")
        return
    overlap = sorted(model.train_models & eval_models)
    if overlap:
        raise ValueError(f"evaluation data overlaps training models: {', '.join(overlap)}")
    log.info("unseen-domain check: %d evaluation models disjoint from %d training models",
             len(eval_models), len(model.train_models))


def _resolve_model(spec: str) -> Tuple[Optional[LoadedModel], str]:
    if spec in STUBS:
        return None, spec
    lm = load_any(spec)
    return lm, os.path.basename(spec)


def stage_eval(model_spec: str, data: str, protocol: str, report: str, split_name: str = "test",
               slices: bool = False, snr: Optional[float] = None, stride: int = 8, rim: int = 4) -> list:
    model, name = _resolve_model(model_spec)
    reports = []
    slice_dir = report + ".slices"
    if protocol == "test":
        ps, split, names = load_split(data)
        if split_name == "all":
            sub = ps
        else:
            sub = {"train": split.apply(ps)[0], "validation": split.apply(ps)[1],
                   "test": split.apply(ps)[2]}[split_name]
        if not len(sub):
            raise ValueError(f"the {split_name} split of {data} is empty")
        if model is not None:
            _check_unseen(model, set(_models_in(sub, names)))
        if name == "oracle-stub":
            pred = sub.hr_vel
        elif name == "trilinear-stub":
            pred = upsample2_array(sub.lr_vel, axes=(2, 3, 4))
        else:
            pred = model.predict_arrays(sub.lr_vel, sub.lr_mag, sub.venc)
        for label in sub.compartment_labels():
            idx = np.flatnonzero(sub.compartment == COMPARTMENT_CODES[label])
            reports.append(evaluate_patches(pred[idx], sub[idx], name, label))
        if len(sub.compartment_labels()) > 1:
            reports.append(evaluate_patches(pred, sub, name, "all"))
        if slices:
            os.makedirs(slice_dir, exist_ok=True)
            p0 = pred[0].astype(np.float32)
            hr = VectorField.from_array(VolumeGrid(*p0.shape[1:][::-1], 1.0), p0)
            export_slice(hr, "z", hr.grid.nz // 2, os.path.join(slice_dir, f"{name}_patch0_z.pgm"))
    elif protocol == "recover-native":
        manifests = sorted(glob.glob(os.path.join(data, "*.manifest"))) if os.path.isdir(data) else [data]
        if not manifests:
            raise FileNotFoundError(f"no phantom manifests in {data}")
        eval_models = set()
        samples: List[Tuple[str, FlowSample]] = []
        for m in manifests:
            mname, rows = read_manifest(m)
            eval_models.add(mname or os.path.basename(m))
            for path, comp, frame, venc in rows:
                samples.append((f"{mname}_f{frame:03d}", read_sample(path, venc, comp, frame)))
        if model is not None:
            _check_unseen(model, eval_models)
        noise = NoiseSpec(snr) if snr is not None else None
        for label, native in samples:
            if name == "oracle-stub":
                pred = OracleStub(native.velocity)
            elif name == "trilinear-stub":
                pred = TrilinearStub()
            else:
                pred = model
            rep = recover_native_eval(native, pred, noise, model_name=name, stride=stride, rim=rim)
            reports.append(rep)
            if slices:
                os.makedirs(slice_dir, exist_ok=True)
                export_slice(native.velocity, "z", native.grid.nz // 2,
                             os.path.join(slice_dir, f"{label}_native_z.pgm"))
    else:
        raise UsageError(f"unknown protocol {protocol!r}")
    export_report(reports, report)
    return reports


# -- subcommands ---------------------------------------------------------------------

def cmd_phantom(a) -> int:
    seed = _resolve_seed(a.seed)
    paths = stage_phantom(a.family, a.out, a.frames, seed, a.grid, a.dx, a.models)
    for p in paths:
        print(p)
    return 0


def cmd_synth(a) -> int:
    seed = _resolve_seed(a.seed)
    print(stage_synth(a.input, a.snr, a.out, seed, a.noise_order))
    return 0


def cmd_patch(a) -> int:
    seed = _resolve_seed(a.seed)
    ps, kept, rejected = stage_patch(a.input, a.out, a.stride, a.min_fluid, a.rotations, a.ratios, seed)
    print(f"windows kept {kept} rejected {rejected}; patches written {len(ps)}")
    if not len(ps):
        print("warning: no window met the fluid threshold; dataset is empty", file=sys.stderr)
    return 0


def _load_config(path: Optional[str]) -> ExperimentConfig:
    return ExperimentConfig.load(path) if path else ExperimentConfig.from_text("")


def cmd_train(a) -> int:
    cfg = _load_config(a.spec)
    if not os.path.exists(a.data):
        raise FileNotFoundError(f"dataset {a.data} not found")
    seed = a.seed if a.seed is not None else None
    stage_train(a.data, cfg, a.out, a.bootstrap, a.compartment, seed)
    print(a.out)
    return 0


def cmd_ensemble(a) -> int:
    members = [m for m in a.members.split(",") if m]
    if not members:
        raise UsageError("--members lists no models")
    if a.kind == "stacking" and not a.meta and not a.train_meta:
        raise UsageError("stacking needs --meta or --train-meta")
    if a.kind == "bagging" and (a.meta or a.train_meta):
        raise UsageError("bagging takes no meta-learner")
    out_dir = os.path.dirname(os.path.abspath(a.out))
    meta = a.meta
    if a.train_meta:
        if not a.data:
            raise UsageError("--train-meta needs --data")
        cfg = _load_config(a.spec)
        meta_path = os.path.splitext(os.path.abspath(a.out))[0] + ".meta.f4w"
        stage_meta(members, a.data, cfg, meta_path, a.seed)
        meta = meta_path
    for m in members + ([meta] if meta else []):
        if not os.path.exists(m):
            raise FileNotFoundError(f"model {m} not found")
    desc = EnsembleDescriptor(a.kind, tuple(_rel(os.path.abspath(m), out_dir) for m in members),
                              _rel(os.path.abspath(meta), out_dir) if meta else None)
    write_descriptor(a.out, desc)
    load_any(a.out)
    print(a.out)
    return 0


def cmd_eval(a) -> int:
    reports = stage_eval(a.model, a.data, a.protocol, a.report, a.split, a.slices, a.snr)
    for r in reports:
        print(f"{r.model} {r.domain}: RE={r.re:.4f} n_fluid={r.n_fluid}")
    return 0


def run_experiment(cfg: ExperimentConfig, out: str) -> Dict[str, str]:
    """Whole pipeline from one resolved config; returns the main output paths."""
    os.makedirs(out, exist_ok=True)
    cfg.write(os.path.join(out, "config.ini"))
    seed = cfg.seed
    p, s, q, e, ev = cfg["phantom"], cfg["synth"], cfg["patch"], cfg["ensemble"], cfg["eval"]
    outputs: Dict[str, str] = {}
    for group, families in (("train", p["families"]), ("unseen", p["eval_families"])):
        if not families:
            continue
        phantom_dir = os.path.join(out, group, "phantoms")
        synth_dir = os.path.join(out, group, "synth")
        for fam in families:
            for m in stage_phantom(fam, phantom_dir, p["n_frames"], seed, p["grid"], p["dx"], p["n_models"]):
                stage_synth(m, tuple(s["snr"]), synth_dir, seed, s["noise_order"])
        data = os.path.join(out, f"{group}.f4p")
        stage_patch(synth_dir, data, q["stride"], q["min_fluid"], q["rotations"], tuple(q["ratios"]), seed)
        outputs[f"{group}_data"] = data
    data = outputs["train_data"]
    if e["kind"] == "none":
        model_path = os.path.join(out, "model.f4w")
        stage_train(data, cfg, model_path)
    else:
        n = e["n_base"]
        seeds = member_seeds(seed, n)
        kinds = e["block_kinds"] or (None,) * n
        if len(kinds) != n:
            raise ConfigError("[ensemble] block_kinds needs one entry per member")
        members = []
        if e["base_data"] == "compartmentalized":
            ps, split, _ = load_split(data)
            labels = split.apply(ps)[0].compartment_labels()
            if len(labels) != n:
                raise ConfigError(f"compartmentalized ensembles need n_base = {len(labels)}")
        for i in range(n):
            path = os.path.join(out, f"member{i}.f4w")
            if e["base_data"] == "compartmentalized":
                stage_train(data, cfg, path, compartment=labels[i], seed=seeds[i], block_kind=kinds[i])
            else:
                stage_train(data, cfg, path, bootstrap=seeds[i], seed=seeds[i], block_kind=kinds[i])
            members.append(path)
        meta = None
        if e["kind"] == "stacking":
            meta = os.path.join(out, "meta.f4w")
            stage_meta(members, data, cfg, meta)
        model_path = os.path.join(out, "ensemble.txt")
        write_descriptor(model_path, EnsembleDescriptor(
            e["kind"], tuple(os.path.basename(m) for m in members), os.path.basename(meta) if meta else None))
    outputs["model"] = model_path
    if "test" in ev["protocols"]:
        outputs["report_test"] = os.path.join(out, "report_test.csv")
        stage_eval(model_path, data, "test", outputs["report_test"], "test", ev["slices"],
                   stride=ev["stride"], rim=ev["rim"])
        if "unseen_data" in outputs:
            outputs["report_unseen"] = os.path.join(out, "report_unseen.csv")
            stage_eval(model_path, outputs["unseen_data"], "test", outputs["report_unseen"], "all",
                       ev["slices"], stride=ev["stride"], rim=ev["rim"])
    if "recover-native" in ev["protocols"] and p["eval_families"]:
        outputs["report_recover"] = os.path.join(out, "report_recover.csv")
        stage_eval(model_path, os.path.join(out, "unseen", "phantoms"), "recover-native",
                   outputs["report_recover"], stride=ev["stride"], rim=ev["rim"])
    return outputs


def cmd_run(a) -> int:
    cfg = ExperimentConfig.load(a.config)
    outputs = run_experiment(cfg, a.out)
    for k in sorted(outputs):
        print(f"{k} {outputs[k]}")
    return 0


# -- parser --------------------------------------------------------------------------

def version_text() -> str:
    return (f"f4flow {__version__} (F4DV v{F4DV_VERSION}, F4DP v{F4DP_VERSION}, F4DW v{F4DW_VERSION})")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="f4flow", description="Ensemble super-resolution for synthetic 4D flow MRI.")
    ap.add_argument("--version", action="version", version=version_text())
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    ap.add_argument("--jobs", type=int, default=1, help="worker count (runs are sequential and identical for any value)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate analytic phantom frames")
    p.add_argument("--family", required=True, choices=FAMILIES)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=1)
    p.add_argument("--models", type=int, default=1)
    p.add_argument("--grid", type=int, default=48)
    p.add_argument("--dx", type=float, default=1.5)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("synth", help="make noisy low-resolution twins of phantom frames")
    p.add_argument("--in", dest="input", required=True, help="phantom manifest")
    p.add_argument("--snr", type=_snr_range, required=True, help="A:B, drawn uniformly per frame")
    p.add_argument("--out", required=True)
    p.add_argument("--noise-order", choices=(NOISE_BEFORE_CROP, NOISE_AFTER_CROP), default=NOISE_BEFORE_CROP)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("patch", help="extract, augment and split training patches")
    p.add_argument("--in", dest="input", required=True, help="directory of .pairs manifests")
    p.add_argument("--out", required=True)
    p.add_argument("--stride", type=int, default=6)
    p.add_argument("--min-fluid", type=float, default=0.05)
    p.add_argument("--rotations", type=int, default=0)
    p.add_argument("--ratios", type=_ratios, default=(6, 2, 2))
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_patch)

    p = sub.add_parser("train", help="train one base network")
    p.add_argument("--data", required=True)
    p.add_argument("--spec", help="experiment config (model/train sections)")
    p.add_argument("--out", required=True)
    p.add_argument("--bootstrap", type=int, metavar="SEED")
    p.add_argument("--compartment", choices=sorted(COMPARTMENT_CODES))
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ensemble", help="assemble a bagging or stacking ensemble")
    p.add_argument("--kind", required=True, choices=("bagging", "stacking"))
    p.add_argument("--members", required=True, help="comma-separated .f4w paths, order preserved")
    p.add_argument("--meta")
    p.add_argument("--train-meta", action="store_true")
    p.add_argument("--data", help="dataset for --train-meta")
    p.add_argument("--spec", help="experiment config for --train-meta")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("eval", help="evaluate a model, ensemble or stub")
    p.add_argument("--model", required=True, help=".f4w, ensemble descriptor, oracle-stub or trilinear-stub")
    p.add_argument("--data", required=True)
    p.add_argument("--protocol", choices=("test", "recover-native"), default="test")
    p.add_argument("--split", choices=("train", "validation", "test", "all"), default="test")
    p.add_argument("--snr", type=float, help="noise level for recover-native (default noise-free)")
    p.add_argument("--report", required=True)
    p.add_argument("--slices", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", help="run the whole pipeline from one config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"f4flow: error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        print(f"f4flow: training diverged: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, VolumeFormatError, DescriptorError, KeyError) as exc:
        print(f"f4flow: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
