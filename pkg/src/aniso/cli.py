"""Command-line entry point: ``aniso {nads,synth,grid,cross-section,report}``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, datagen, diagnostics, experiments, models, nad
from .config import ConfigError, ExperimentConfig, load

log = logging.getLogger("aniso")

MANIFEST = "manifest.txt"
REPORT_MANIFEST = "manifest.report.txt"  # lets a report share a grid's output directory
PAPER_SCALE = {"model": {"height": 32, "width": 32},
               "data": {"n_train": 10000, "n_test": 10000, "cifar_train": 50000}}


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, cfg: ExperimentConfig | None, command: str, inputs: dict[str, Path],
                   run_seeds: dict[str, dict[str, int]] | None = None, filename: str = MANIFEST) -> Path:
    """key = value listing of the config digest, run seeds, and input/output digests."""
    lines = [f"command = {command}", f"toolkit_version = {__version__}"]
    if cfg is not None:
        lines.append(f"config_digest = {cfg.digest}")
    for run_id, seeds in (run_seeds or {}).items():
        lines.append(f"seeds.{run_id} = " + " ".join(f"{k}:{v}" for k, v in seeds.items()))
    for name, path in sorted(inputs.items()):
        lines.append(f"input.{name} = {file_digest(path)}")
    for path in sorted(p for p in out.rglob("*") if p.is_file() and p.name not in (MANIFEST, REPORT_MANIFEST)):
        lines.append(f"output.{path.relative_to(out).as_posix()} = {file_digest(path)}")
    target = out / filename
    target.write_text("\n".join(lines) + "\n")
    return target


def read_manifest(path) -> dict[str, str]:
    entries = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            key, _, value = line.partition(" = ")
            entries[key] = value
    return entries


def effective_config(args) -> ExperimentConfig:
    cfg = load(args.config)
    if args.seeds is not None:
        cfg = cfg.with_values(experiment={"seeds": args.seeds})
    if args.paper_scale or cfg["experiment"]["paper_scale"]:
        cfg = cfg.with_values(experiment={"paper_scale": True}, **PAPER_SCALE)
    return cfg


def _inputs(cfg: ExperimentConfig, args, with_basis: bool = True, cifar: bool = False) -> dict[str, Path]:
    inputs = {"config": Path(args.config)}
    if with_basis:
        inputs["nad_file"] = cfg.resolve(cfg["data"]["nad_file"])
    if cifar:
        src = datagen.Cifar10Source(cfg.resolve(cfg["data"]["cifar_dir"]))
        for p in (*src.files("train"), *src.files("test")):
            inputs[f"cifar.{p.name}"] = p
    return inputs


# ---------------------------------------------------------------------------
# subcommands


def cmd_nads(args) -> int:
    cfg = effective_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = cfg.model_spec(1)
    log.info("estimating gradient covariance for %s %s", spec.family, spec.input_shape)
    cov = nad.estimate_covariance(spec, cfg.nad_config(), threads=args.threads)
    basis = nad.eigendecompose(cov)
    nad.save_basis(out / "nad_basis.nad", basis)
    with open(out / "eigenvalues.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "eigenvalue"])
        w.writerows([k, repr(float(lam))] for k, lam in enumerate(basis.eigenvalues, start=1))
    write_manifest(out, cfg, "nads", _inputs(cfg, args, with_basis=False))
    return 0


def cmd_synth(args) -> int:
    cfg = effective_config(args)
    out = Path(args.out)
    (out / "data").mkdir(parents=True, exist_ok=True)
    basis = experiments.load_config_basis(cfg)
    cifar = bool(cfg["data"]["cifar_dir"])
    keys = [k for k in experiments.grid_keys(cfg, cifar) if k.seed_index == 0]
    master = cfg["experiment"]["master_seed"]
    for key in keys:
        build = experiments.cifar_synth_data if cifar else experiments.linear_linear_data
        for split in build(cfg, basis, key):
            datagen.save_dataset(out / "data" / f"{key.run_id}.{split.split}.bin", split)
    seeds = {k.run_id: k.seeds(master) for k in keys}
    write_manifest(out, cfg, "synth", _inputs(cfg, args, cifar=cifar), seeds)
    return 0


def cmd_grid(args) -> int:
    cfg = effective_config(args)
    kind = cfg.kind
    if kind not in ("train-linear-linear", "train-cifar-synth"):
        raise ConfigError(f"grid needs experiment.kind train-linear-linear or train-cifar-synth, got {kind}")
    cifar = kind == "train-cifar-synth"
    out = Path(args.out)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    basis = experiments.load_config_basis(cfg)
    results = experiments.run_grid(cfg, basis, threads=args.threads, cifar=cifar)
    rows = [r.row() for r in results] + experiments.mean_rows(results)
    diagnostics.write_ablation_csv(out / "ablation.csv", rows)
    for r in results:
        r.train_report.write_csv(out / "runs" / f"{r.key.run_id}.train.csv")
        if r.status != "ok":
            log.warning("run %s: %s", r.key.run_id, r.status)
    master = cfg["experiment"]["master_seed"]
    write_manifest(out, cfg, "grid", _inputs(cfg, args, cifar=cifar),
                   {r.key.run_id: r.key.seeds(master) for r in results})
    return 0


TILT_HEADER = ["run_id", "nad_idx_1", "nad_idx_2", "seed", "tilt_deg", "n1", "n2", "n1_dominant"]


def cmd_cross_section(args) -> int:
    cfg = effective_config(args)
    out = Path(args.out)
    (out / "cross_sections").mkdir(parents=True, exist_ok=True)
    basis = experiments.load_config_basis(cfg)
    results = experiments.run_grid(cfg, basis, threads=args.threads, keep_params=True)
    d, cs_cfg = cfg["data"], cfg["cross_section"]
    spec = cfg.model_spec(2)
    rows = []
    for r in results:
        if r.params is None:
            raise RuntimeError(f"run {r.key.run_id} {r.status}; no trained model to cross-section")
        k = r.key
        plane = diagnostics.PlaneSpec.for_channels(nad.nad_vector(basis, k.nad_idx_1), nad.nad_vector(basis, k.nad_idx_2),
                                                   d["epsilon_1"], d["epsilon_2"], resolution=cs_cfg["resolution"])
        if cs_cfg["half_range"] is not None:
            plane = diagnostics.PlaneSpec(plane.u1, plane.u2, half_range=cs_cfg["half_range"],
                                          resolution=cs_cfg["resolution"])
        cs = diagnostics.cross_section(spec, r.params, plane)
        stem = out / "cross_sections" / k.run_id
        diagnostics.write_cross_section_csv(f"{stem}.csv", cs)
        diagnostics.write_pgm(f"{stem}.pgm", cs)
        models.save_params(f"{stem}.params", spec, r.params)
        n1, n2 = diagnostics.boundary_normal(spec, r.params, plane)
        rows.append([k.run_id, k.nad_idx_1, k.nad_idx_2, k.seed_index, f"{cs.tilt_deg:.4f}",
                     repr(n1), repr(n2), str(abs(n1) > abs(n2)).lower()])
    with open(out / "tilt.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TILT_HEADER)
        w.writerows(rows)
    master = cfg["experiment"]["master_seed"]
    write_manifest(out, cfg, "cross-section", _inputs(cfg, args),
                   {r.key.run_id: r.key.seeds(master) for r in results})
    return 0


METRICS = ("acc_both", "acc_b1", "acc_b2")


def accuracy_matrices(grid_csv) -> tuple[list[str], list[str], dict[str, np.ndarray]]:
    """Seed-averaged accuracies as (row labels = nad_idx_1, column labels = nad_idx_2, matrices)."""
    with open(grid_csv, newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if r["seed"] == "mean"]
    if not rows:
        raise ValueError(f"{grid_csv}: no seed-averaged rows")

    def order(labels):
        return sorted(set(labels), key=lambda s: (s != "-", int(s) if s.lstrip("-").isdigit() else 0))

    firsts = order(r["nad_idx_1"] for r in rows)
    seconds = order(r["nad_idx_2"] for r in rows)
    mats = {m: np.full((len(firsts), len(seconds)), np.nan) for m in METRICS}
    for r in rows:
        a, b = firsts.index(r["nad_idx_1"]), seconds.index(r["nad_idx_2"])
        for m in METRICS:
            mats[m][a, b] = float(r[m])
    return firsts, seconds, mats


def heatmap(mat: np.ndarray, cell: int = 8) -> np.ndarray:
    """Gray levels 0..255 for accuracies 0..1 (NaN -> 0), each cell drawn as cell x cell pixels."""
    levels = np.rint(np.clip(np.nan_to_num(mat, nan=0.0), 0, 1) * 255).astype(np.uint8)
    return np.kron(levels, np.ones((cell, cell), dtype=np.uint8))


def cmd_report(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid_csv = Path(args.grid_csv) if args.grid_csv else out / "ablation.csv"
    firsts, seconds, mats = accuracy_matrices(grid_csv)
    for m, mat in mats.items():
        with open(out / f"report_{m}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["nad_idx_1\\nad_idx_2", *seconds])
            w.writerows([first, *(diagnostics._fmt(x) for x in row)] for first, row in zip(firsts, mat))
        diagnostics.write_pgm_image(out / f"report_{m}.pgm", heatmap(mat))
    write_manifest(out, None, "report", {"grid_csv": grid_csv}, filename=REPORT_MANIFEST)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aniso", description="NAD estimation and underspecified-task experiments")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, needs_config=True, help=None):
        p = sub.add_parser(name, help=help)
        if needs_config:
            p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seeds", type=int, default=None, help="override experiment.seeds")
        p.add_argument("--threads", type=int, default=1, help="worker threads")
        p.add_argument("--paper-scale", action="store_true", help="32x32 inputs and full sample counts")
        p.set_defaults(func=func)
        return p

    add("nads", cmd_nads, help="estimate the NAD basis of a model")
    add("synth", cmd_synth, help="write the datasets of each grid point")
    add("grid", cmd_grid, help="train over a NAD index grid and write ablation accuracies")
    add("cross-section", cmd_cross_section, help="train and write decision-boundary cross-sections")
    rep = add("report", cmd_report, needs_config=False, help="aggregate a grid CSV into matrices and heatmaps")
    rep.add_argument("grid_csv", nargs="?", help="grid CSV (default: OUT/ablation.csv)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    if args.threads < 1:
        print("aniso: error: --threads must be at least 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ConfigError, datagen.DatasetError, nad.NadError, diagnostics.NoBoundaryError,
            FileNotFoundError, RuntimeError) as exc:
        print(f"aniso: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
