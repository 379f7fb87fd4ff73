"""Grid runs: build a dataset per (NAD index pair, seed), train, and measure.

A grid point is identified by its NAD indices, not its position in the index
lists, and every random stream of a run is derived from
``(master seed, purpose tag, i, j, seed index)``. Growing a grid therefore
leaves the results of existing points untouched.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from threadpoolctl import threadpool_limits

from . import datagen, diagnostics, models, nad, training
from .config import ConfigError, ExperimentConfig
from .seeding import derived_seed

CIFAR_INDEX = 0  # stands in for nad_idx_1 in seed keys when block 1 is CIFAR-10


@dataclass(frozen=True)
class RunKey:
    nad_idx_1: int | None  # None: block 1 is binarized CIFAR-10
    nad_idx_2: int
    seed_index: int

    @property
    def run_id(self) -> str:
        first = "cifar" if self.nad_idx_1 is None else f"i{self.nad_idx_1}"
        return f"{first}-j{self.nad_idx_2}-s{self.seed_index}"

    def seed(self, master: int, purpose: str) -> int:
        i = CIFAR_INDEX if self.nad_idx_1 is None else self.nad_idx_1
        return derived_seed(master, f"grid:{purpose}", i, self.nad_idx_2, self.seed_index)

    def seeds(self, master: int) -> dict[str, int]:
        return {p: self.seed(master, p) for p in ("data1", "data2", "pair", "init", "shuffle")}


@dataclass
class RunResult:
    key: RunKey
    ablation: diagnostics.AblationReport | None
    train_report: training.TrainReport
    params: models.ParamVector | None
    status: str

    def row(self) -> list:
        k = self.key
        first = "-" if k.nad_idx_1 is None else k.nad_idx_1
        if self.ablation is None:
            accs = ["nan"] * 3
            return [k.run_id, first, k.nad_idx_2, k.seed_index, *accs, self.status]
        return [*self.ablation.row(k.run_id, first, k.nad_idx_2, k.seed_index), self.status]


def check_basis(cfg: ExperimentConfig, basis: nad.NadBasis) -> None:
    """The basis must come from the single-channel version of the configured model."""
    m = cfg["model"]
    if (basis.height, basis.width) != (m["height"], m["width"]):
        raise ConfigError(f"NAD basis is {basis.height}x{basis.width}, config expects {m['height']}x{m['width']}")
    expected = cfg.model_spec(1).hash
    if basis.spec_hash != expected:
        raise ConfigError(f"NAD basis was estimated for model {basis.spec_hash[:12]}, config model is {expected[:12]}")


def load_config_basis(cfg: ExperimentConfig) -> nad.NadBasis:
    if not cfg["data"]["nad_file"]:
        raise ConfigError("data.nad_file is required; estimate one with the `nads` subcommand")
    basis = nad.load_basis(cfg.resolve(cfg["data"]["nad_file"]))
    check_basis(cfg, basis)
    return basis


def grid_keys(cfg: ExperimentConfig, cifar: bool = False) -> list[RunKey]:
    d = cfg["data"]
    firsts = [None] if cifar else list(d["nad_idx_1"])
    return [RunKey(i, j, s) for i in firsts for j in d["nad_idx_2"] for s in range(cfg["experiment"]["seeds"])]


# ---------------------------------------------------------------------------
# datasets


def _linsep(cfg: ExperimentConfig, basis: nad.NadBasis, index: int, eps: float, seed: int,
            n_train: int, n_test: int) -> tuple[datagen.DatasetHandle, datagen.DatasetHandle]:
    m, d = cfg["model"], cfg["data"]
    spec = datagen.LinSepSpec(nad.nad_vector(basis, index), eps, d["sigma"], n_train, n_test,
                              m["height"], m["width"], seed=seed)
    return datagen.linsep_splits(spec)


def linear_linear_data(cfg: ExperimentConfig, basis: nad.NadBasis, key: RunKey):
    """Train/test splits of D(v_i) + D(v_j) stacked along channels."""
    d, master = cfg["data"], cfg["experiment"]["master_seed"]
    a = _linsep(cfg, basis, key.nad_idx_1, d["epsilon_1"], key.seed(master, "data1"), d["n_train"], d["n_test"])
    b = _linsep(cfg, basis, key.nad_idx_2, d["epsilon_2"], key.seed(master, "data2"), d["n_train"], d["n_test"])
    pair = key.seed(master, "pair")
    return datagen.concat_channels(a[0], b[0], pair), datagen.concat_channels(a[1], b[1], pair)


@lru_cache(maxsize=2)
def _binarized_cifar(directory: str) -> tuple[datagen.DatasetHandle, datagen.DatasetHandle]:
    train, test = datagen.load_cifar10(directory)
    return datagen.binarize_cifar(train), datagen.binarize_cifar(test)


def cifar_blocks(cfg: ExperimentConfig, seed_index: int):
    """Normalized binarized CIFAR-10 (train subset, full test) for one seed index."""
    d = cfg["data"]
    if not d["cifar_dir"]:
        raise ConfigError("data.cifar_dir is required for train-cifar-synth")
    if (cfg["model"]["height"], cfg["model"]["width"]) != (32, 32):
        raise ConfigError("CIFAR-10 runs need model.height = model.width = 32")
    train, test = _binarized_cifar(str(cfg.resolve(d["cifar_dir"])))
    subset_seed = derived_seed(cfg["experiment"]["master_seed"], "grid:subset", seed_index)
    if d["cifar_train"] < len(train):
        train = datagen.balanced_subset(train, d["cifar_train"], seed=subset_seed)
    train = datagen.normalize(train, d["normalize"])
    stats = train.provenance.get("normalization")
    test = datagen.normalize(test, d["normalize"], stats=stats)
    return train, test


def cifar_synth_data(cfg: ExperimentConfig, basis: nad.NadBasis, key: RunKey):
    """Binarized CIFAR-10 in channels 0-2 and D(v_j) in channel 3."""
    c_train, c_test = cifar_blocks(cfg, key.seed_index)
    master = cfg["experiment"]["master_seed"]
    # both blocks are exactly balanced, so same-label pairing always succeeds
    s_train, s_test = _linsep(cfg, basis, key.nad_idx_2, cfg["data"]["epsilon_2"],
                              key.seed(master, "data2"), len(c_train), len(c_test))
    pair = key.seed(master, "pair")
    return datagen.concat_channels(c_train, s_train, pair), datagen.concat_channels(c_test, s_test, pair)


# ---------------------------------------------------------------------------
# training


def run_point(cfg: ExperimentConfig, basis: nad.NadBasis, key: RunKey, keep_params: bool = False) -> RunResult:
    master = cfg["experiment"]["master_seed"]
    if key.nad_idx_1 is None:
        train_set, test_set = cifar_synth_data(cfg, basis, key)
    else:
        train_set, test_set = linear_linear_data(cfg, basis, key)
    spec = cfg.model_spec(train_set.channels)
    params = models.build(spec, models.InitScheme(seed=key.seed(master, "init")))
    tcfg = cfg.train_config(shuffle_seed=key.seed(master, "shuffle"))
    try:
        trained, report = training.train(spec, params, train_set, tcfg)
    except training.DivergenceError as exc:
        return RunResult(key, None, exc.report, None, f"diverged@{exc.step}")
    abl = diagnostics.ablation_eval(spec, trained, test_set)
    return RunResult(key, abl, report, trained if keep_params else None, "ok")


def run_grid(cfg: ExperimentConfig, basis: nad.NadBasis, threads: int = 1, cifar: bool = False,
             keep_params: bool = False) -> list[RunResult]:
    """All runs of the grid, returned in grid order whatever the worker count."""
    keys = grid_keys(cfg, cifar)
    if cifar:
        _binarized_cifar.cache_clear()
        cifar_blocks(cfg, 0)  # load once before fanning out
    with threadpool_limits(limits=1):
        if threads <= 1:
            return [run_point(cfg, basis, k, keep_params) for k in keys]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda k: run_point(cfg, basis, k, keep_params), keys))


def mean_rows(results: list[RunResult]) -> list[list]:
    """One seed-averaged row per grid point, over the runs that did not diverge."""
    groups: dict[tuple, list[RunResult]] = {}
    for r in results:
        groups.setdefault((r.key.nad_idx_1, r.key.nad_idx_2), []).append(r)
    rows = []
    for (i, j), runs in groups.items():
        ok = [r.ablation for r in runs if r.ablation is not None]
        first = "-" if i is None else i
        run_id = f"{'cifar' if i is None else f'i{i}'}-j{j}-mean"
        if ok:
            accs = [float(np.mean([getattr(a, f) for a in ok])) for f in ("acc_both", "acc_block1", "acc_block2")]
        else:
            accs = [math.nan] * 3
        rows.append([run_id, first, j, "mean", *(diagnostics._fmt(a) for a in accs), f"ok {len(ok)}/{len(runs)}"])
    return rows
