"""Command-line entry points: ``synthetic``, ``toy`` and ``ntk``.

Every command reads an optional JSON config (unknown keys are rejected),
writes CSV arrays and JSON reports into ``--out``, and exits with
0 on success, 2 on a config error, 3 on divergence, 4 on a failed check.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .datagen import DEFAULT_RHO, make_cos_dataset, make_gaussian_pair_client, make_offdiag_cov
from .federation import (
    FEDBN,
    STRATEGIES,
    ClientState,
    DivergenceError,
    FederationConfig,
    run_federation,
)
from .model.mlp import init_mlp
from .model.theory import init_theory
from .model.toy import toy_mse, toy_mse_surface
from .numerics import make_rng, write_matrix_csv
from . import ntk

log = logging.getLogger("fedbn_sim")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_VERIFY = 4


class ConfigError(ValueError):
    pass


def _build(cls, doc: dict):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


@dataclass(frozen=True)
class SyntheticConfig:
    N: int = 2
    E: int = 1
    T: int = 600
    lr: float = 1e-5
    batch_size: int | None = None
    mu: float = 1e-2
    seed: int = 0
    loss: str = "cross_entropy"
    reduction: str = "sum"
    d: int = 10
    M: int = 200
    test_M: int = 200
    rho: float = DEFAULT_RHO
    hidden: int = 100
    alpha: float = 10.0

    def __post_init__(self):
        for name in ("N", "d", "M", "test_M", "hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.M < 2 or self.test_M < 2:
            raise ValueError("M and test_M must be at least 2")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        make_offdiag_cov(self.d, self.rho)
        self.federation(FEDBN)  # validates the remaining fields

    def federation(self, strategy: str) -> FederationConfig:
        return FederationConfig(
            N=self.N, E=self.E, T=self.T, lr=self.lr, batch_size=self.batch_size,
            strategy=strategy, mu=self.mu, seed=self.seed, loss=self.loss,
            model_kind="mlp", reduction=self.reduction,
        )


@dataclass(frozen=True)
class ToyConfig:
    w_true: float = 2.0
    w_min: float = 0.001
    w_max: float = 12.0
    w_num: int = 600
    gamma_min: float = 0.001
    gamma_max: float = 4.0
    gamma_num: int = 400
    x_stds: tuple = (1.0, 3.0)
    n: int = 1000
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "x_stds", tuple(float(s) for s in self.x_stds))
        if not self.x_stds or any(s <= 0 for s in self.x_stds):
            raise ValueError("x_stds must be a nonempty list of positive numbers")
        if self.w_num < 1 or self.gamma_num < 1:
            raise ValueError("grids must be nonempty")
        if not 0 < self.gamma_min <= self.gamma_max:
            raise ValueError("gamma grid must be positive and increasing")
        if self.w_min > self.w_max:
            raise ValueError("w grid must be increasing")
        if self.n < 2 or self.noise_std < 0:
            raise ValueError("need n >= 2 and noise_std >= 0")

    def w_grid(self) -> np.ndarray:
        return np.linspace(self.w_min, self.w_max, self.w_num)

    def gamma_grid(self) -> np.ndarray:
        return np.linspace(self.gamma_min, self.gamma_max, self.gamma_num)


@dataclass(frozen=True)
class NtkConfig:
    m: int = 4096
    d: int = 10
    N: int = 2
    M: int = 5
    alpha: float = 2.0
    K: int = 200_000
    eta: float = 1e-4
    seed: int = 0
    rho: float = DEFAULT_RHO
    steps: int = 200

    def __post_init__(self):
        for name in ("m", "d", "N", "K", "steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.M < 2:
            raise ValueError("M must be at least 2")
        if not (self.alpha > 0 and self.eta > 0):
            raise ValueError("alpha and eta must be positive")
        make_offdiag_cov(self.d, self.rho)


def _load_doc(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return doc


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="ascii")


def _with_seed(doc: dict, seed: int | None) -> dict:
    return doc if seed is None else {**doc, "seed": seed}


# -- shared experiment builders ------------------------------------------------

def synthetic_clients(cfg: SyntheticConfig):
    """Clients alternate between identity and off-diagonal covariance."""
    base = [np.eye(cfg.d), make_offdiag_cov(cfg.d, cfg.rho)]
    train = [make_gaussian_pair_client(i, base[i % 2], cfg.M, make_rng(cfg.seed, 1, i)) for i in range(cfg.N)]
    test = [make_gaussian_pair_client(i, base[i % 2], cfg.test_M, make_rng(cfg.seed, 3, i)) for i in range(cfg.N)]
    return train, test


def run_synthetic(cfg: SyntheticConfig, strategies=STRATEGIES):
    """Run each strategy on identical data and initial weights."""
    train, test = synthetic_clients(cfg)
    init = init_mlp(cfg.d, cfg.hidden, 2, cfg.alpha, make_rng(cfg.seed, 0))
    out = {}
    for strategy in strategies:
        clients = [ClientState(i, init.copy(), train[i], make_rng(cfg.seed, 2, i)) for i in range(cfg.N)]
        out[strategy] = run_federation(cfg.federation(strategy), clients, test)
    return out


def theory_problem(cfg: NtkConfig, M: int | None = None, stream: int = 0):
    """Centered Gaussian-pair samples stacked in client order, plus an init."""
    M = cfg.M if M is None else M
    base = [np.eye(cfg.d), make_offdiag_cov(cfg.d, cfg.rho)]
    ds = [
        make_gaussian_pair_client(i, base[i % 2], M, make_rng(cfg.seed, 10 + stream, i), center=True)
        for i in range(cfg.N)
    ]
    X = np.vstack([c.features for c in ds])
    y = np.concatenate([c.labels for c in ds])
    ids = np.repeat(np.arange(cfg.N), M)
    covs = [c.cov for c in ds]
    params = init_theory(cfg.m, cfg.d, cfg.N, cfg.alpha, make_rng(cfg.seed, 20 + stream))
    return params, X, y, ids, covs


def toy_comparison(cfg: ToyConfig):
    """Per-client error surfaces and the averaged-vs-local BN comparison.

    Each client's normalization scale is its local std; its weight is the
    grid minimizer at that scale. The report compares the averaged weight
    with the client's own scale against the averaged weight with the
    averaged scale.
    """
    w_grid, g_grid = cfg.w_grid(), cfg.gamma_grid()
    data = [make_cos_dataset(cfg.w_true, s, cfg.noise_std, cfg.n, make_rng(cfg.seed, 30, i))
            for i, s in enumerate(cfg.x_stds)]
    surfaces = [toy_mse_surface(ds, w_grid, g_grid) for ds in data]
    gamma_star = [ds.local_std for ds in data]
    w_star = [float(w_grid[np.argmin(toy_mse_surface(ds, w_grid, [g])[:, 0])]) for ds, g in zip(data, gamma_star)]
    w_bar = float(np.mean(w_star))
    g_bar = float(np.mean(gamma_star))
    clients = []
    for i, ds in enumerate(data):
        local = toy_mse(ds, w_bar, gamma_star[i])
        averaged = toy_mse(ds, w_bar, g_bar)
        clients.append({
            "client": i,
            "x_std": cfg.x_stds[i],
            "w_star": w_star[i],
            "gamma_star": gamma_star[i],
            "loss_wbar_gamma_local": local,
            "loss_wbar_gamma_bar": averaged,
            "local_bn_better": bool(local < averaged),
        })
    report = {
        "w_bar": w_bar,
        "gamma_bar": g_bar,
        "clients": clients,
        "degenerate": len(data) == 1,
        "all_local_bn_better": all(c["local_bn_better"] for c in clients),
    }
    return surfaces, report


# -- commands ------------------------------------------------------------------------

def cmd_synthetic(args) -> int:
    cfg = _build(SyntheticConfig, _with_seed(_load_doc(args.config), args.seed))
    strategies = STRATEGIES if args.strategy is None else (args.strategy,)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        results = run_synthetic(cfg, strategies)
    except DivergenceError as exc:
        log.error("%s", exc)
        return EXIT_DIVERGED
    summary = {"config": asdict(cfg), "strategies": {}}
    for strategy, (trace, _) in results.items():
        trace.write_csv(out / f"trace_{strategy}.csv")
        last = [r for r in trace.records if r.epoch == cfg.T]
        summary["strategies"][strategy] = {
            key: float(np.mean([getattr(r, key) for r in last]))
            for key in ("train_loss", "train_acc", "test_loss", "test_acc")
        }
    _write_json(out / "summary.json", summary)
    return EXIT_OK


def cmd_toy(args) -> int:
    doc = _with_seed(_load_doc(args.config), args.seed)
    cfg = _build(ToyConfig, doc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    surfaces, report = toy_comparison(cfg)
    for i, surf in enumerate(surfaces):
        write_matrix_csv(out / f"surface_client{i}.csv", surf)
    report["config"] = {**asdict(cfg), "x_stds": list(cfg.x_stds)}
    _write_json(out / "comparison.json", report)
    return EXIT_OK


def cmd_ntk(args) -> int:
    cfg = _build(NtkConfig, _with_seed(_load_doc(args.config), args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params, X, y, ids, covs = theory_problem(cfg)

    g_mc = ntk.gram_aux_mc(X, ids, cfg.alpha, cfg.K, make_rng(cfg.seed, 40), ntk.GAVG)
    gbn_mc = ntk.gram_aux_mc(X, ids, cfg.alpha, cfg.K, make_rng(cfg.seed, 40), ntk.GBN)
    mc_report = ntk.min_eig_compare(g_mc, gbn_mc)
    g_fin = ntk.gram_finite(params, X, ids, covs, ntk.GAVG)
    gbn_fin = ntk.gram_finite(params, X, ids, covs, ntk.GBN)
    fin_report = ntk.min_eig_compare(g_fin, gbn_fin)
    lam = ntk.lambda_matrix(params, X, ids, covs, fedbn=False)
    lam_bn = ntk.lambda_matrix(params, X, ids, covs, fedbn=True)

    for name, mat in (
        ("G_inf_avg", g_mc), ("G_inf_bn", gbn_mc), ("G_avg", g_fin), ("G_bn", gbn_fin),
        ("Lambda_avg", lam), ("Lambda_bn", lam_bn),
    ):
        mat.write_csv(out / f"{name}.csv")

    one_step = {
        "fedavg": ntk.one_step_ntk_check(params, X, y, ids, covs, cfg.eta, fedbn=False),
        "fedbn": ntk.one_step_ntk_check(params, X, y, ids, covs, cfg.eta, fedbn=True),
    }
    decay = ntk.decay_experiment(params, X, y, ids, covs, cfg.steps)
    ordering = mc_report["ordering_holds"] and fin_report["ordering_holds"]
    verdict = {
        "config": asdict(cfg),
        "K": cfg.K,
        "seed": cfg.seed,
        "mc": mc_report,
        "finite": fin_report,
        "one_step": one_step,
        "decay": {"eta": decay["eta"], **{k: decay[k]["report"] for k in ("fedavg", "fedbn")}},
        "ordering_holds": ordering,
    }
    _write_json(out / "verdict.json", verdict)
    return EXIT_OK if ordering else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedbn-sim", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, func, help_ in (
        ("synthetic", cmd_synthetic, "FedAvg/FedProx/FedBN/SingleSet on Gaussian-pair clients"),
        ("toy", cmd_toy, "cosine toy error surfaces"),
        ("ntk", cmd_ntk, "Gram-matrix and convergence checks"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON config; defaults are used for missing fields")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override the config seed")
        if name == "synthetic":
            p.add_argument("--strategy", choices=STRATEGIES, help="run a single strategy")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and args.seed < 0:
        log.error("config error: seed must be non-negative")
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
