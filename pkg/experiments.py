"""Monte Carlo experiments: Behrens-Fisher with contamination, the conditional
independence study, the sigma sweep and the exchangeability validity suite.

Each (grid point, replication) pair is one work item. Its dataset comes from
a seed that ignores the method, so every method sees the same data; each
method then draws its own randomness from split_seed(master, experiment,
method, grid index, replication). Rows are sorted before they leave the
runner, so output does not depend on the number of workers.
"""

import hashlib
import logging
import time
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor, as_completed
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, ValidationError, model_validator
from scipy import stats

from crt import CrtProblem, CrtSettings, debiased_lasso_pvalue, run_crt
from errors import ConfigError, DimensionError
from estimators import SolverOptions
from models import BehrensFisherModel, CustomModel, LOG_2PI
from samplers import AcssSettings, run_acss

logger = logging.getLogger(__name__)

ROW_COLUMNS = ["experiment", "method", "grid", "rep", "seed", "pval", "reject", "error", "ms"]
FORMATS = ("csv", "json", "svg-lines", "xlsx")

METHODS = {
    "behrens-fisher": ("acss-mle", "acss-mtle", "acss-mtle-o", "t-test", "oracle-t-test"),
    "ci-test": (
        "oracle-crt",
        "css",
        "acss-ols",
        "acss-lasso",
        "acss-scad",
        "acss-mcp",
        "acss-group-scad",
        "acss-iht",
        "debiased-lasso-baseline",
    ),
    "sigma-sweep": ("acss-lasso", "acss-scad", "acss-mcp", "acss-group-scad", "acss-iht", "acss-ols"),
    "validity-suite": ("singleton-unweighted", "singleton-weighted", "css-crt", "oracle-crt"),
}

DEFAULT_GRIDS = {
    "behrens-fisher": [round(0.1 * k, 1) for k in range(11)],
    "ci-test": [round(0.2 * k, 1) for k in range(6)],
    "sigma-sweep": [0.2, 0.5, 0.7, 1.0, 1.5],
    "validity-suite": [0.0],
}

ACSS_CRT_ESTIMATORS = {
    "acss-lasso": "lasso",
    "acss-scad": "scad",
    "acss-mcp": "mcp",
    "acss-group-scad": "group-scad",
    "acss-iht": "iht",
}


class ExperimentConfig(BaseModel):
    experiment: Literal["behrens-fisher", "ci-test", "sigma-sweep", "validity-suite"]
    replications: int = Field(500, ge=0)
    master_seed: int = Field(20230901, ge=0, lt=2**64)
    alpha: float = Field(0.1, gt=0.0, lt=1.0)
    grid: Optional[List[float]] = None
    methods: Optional[List[str]] = None
    M: int = Field(200, ge=1)

    # behrens-fisher
    n0: int = Field(50, ge=2)
    n1: int = Field(50, ge=2)
    mu0: float = 0.0
    gamma0: float = Field(1.0, gt=0.0)
    gamma1: float = Field(2.0, gt=0.0)
    contaminated: int = Field(5, ge=0)
    contamination_shift: float = 3.0
    h: int = Field(45, ge=1)
    bf_sigma: float = Field(6.0, gt=0.0)
    proposal: Literal["sphere-vmf", "iid-model"] = "sphere-vmf"
    statistic: Literal["mean-difference", "abs-mean-difference"] = "mean-difference"
    include_hessian_det: bool = True

    # ci-test and sigma-sweep
    n: int = Field(50, ge=2)
    d: int = Field(200, ge=1)
    nu: float = Field(1.0, gt=0.0)
    theta_value: float = 1.5
    support: int = Field(5, ge=1)
    xi_coef: float = 0.2
    beta: float = 0.0
    unlabeled: int = Field(0, ge=0)
    ci_sigma: float = Field(0.7, gt=0.0)
    lambda_scale: float = Field(1.0, gt=0.0)
    ci_statistic: Literal["distilled", "ytilde-inner-product"] = "distilled"
    ci_M: Optional[int] = Field(None, ge=1)
    group_size: int = Field(5, ge=1)
    kkt_tol: float = Field(1e-6, gt=0.0)
    max_iter: int = Field(5000, ge=1)

    # validity-suite
    validity_k: int = Field(10, ge=1)
    validity_n: int = Field(30, ge=2)
    validity_d: int = Field(5, ge=1)
    alphas: List[float] = Field(default_factory=lambda: [0.05, 0.1, 0.2])

    output: Optional[str] = None
    format: Literal["csv", "json", "svg-lines", "xlsx"] = "csv"
    timing: bool = False
    threads: int = Field(1, ge=1)
    executor: Literal["process", "thread"] = "process"

    @model_validator(mode="after")
    def fill_defaults(self):
        if self.grid is None:
            self.grid = list(DEFAULT_GRIDS[self.experiment])
        if not self.grid:
            raise ValueError("grid must not be empty")
        if self.methods is None:
            self.methods = default_methods(self)
        unknown = [m for m in self.methods if m not in METHODS[self.experiment]]
        if unknown:
            raise ValueError(f"unknown methods for {self.experiment}: {unknown}")
        if self.experiment == "behrens-fisher":
            if self.h > self.n0 or self.contaminated >= self.n0:
                raise ValueError(f"need h <= n0 and contaminated < n0, got h={self.h}, m={self.contaminated}")
        if self.experiment in ("ci-test", "sigma-sweep") and self.support > self.d:
            raise ValueError(f"support {self.support} exceeds d={self.d}")
        if self.experiment == "sigma-sweep" and min(self.grid) <= 0:
            raise ValueError("sigma-sweep grid values must be positive")
        return self

    @property
    def solver(self) -> SolverOptions:
        return SolverOptions(max_iter=self.max_iter, kkt_tol=self.kkt_tol)


def default_methods(config: ExperimentConfig) -> List[str]:
    if config.experiment == "behrens-fisher":
        return ["acss-mle", "acss-mtle", "t-test", "oracle-t-test"]
    if config.experiment == "ci-test":
        methods = ["oracle-crt", "acss-lasso", "acss-scad", "acss-mcp", "acss-group-scad", "acss-iht"]
        if config.n + config.unlabeled > config.d:
            methods[1:1] = ["css", "acss-ols"]
        return methods + ["debiased-lasso-baseline"]
    if config.experiment == "sigma-sweep":
        return ["acss-mcp", "acss-iht"]
    return list(METHODS["validity-suite"])


class ExperimentRow(BaseModel):
    experiment: str
    method: str
    grid: float
    rep: int
    seed: int
    pval: float
    reject: bool
    error: str = ""
    ms: float = 0.0


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except ValidationError as exc:
        raise ConfigError(f"invalid config {path}: {exc}") from exc


def split_seed(master_seed: int, *keys) -> int:
    """Counter-style seed for a tuple of keys, independent of execution order."""
    digest = hashlib.sha256(repr((int(master_seed),) + tuple(keys)).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & (2**63 - 1)


def simulate_behrens_fisher(config: ExperimentConfig, mu1: float, rng) -> np.ndarray:
    """Group 0 then group 1; the first `contaminated` points of group 0 are shift + |t_1|."""
    x0 = config.mu0 + np.sqrt(config.gamma0) * rng.standard_normal(config.n0)
    m = config.contaminated
    x0[:m] = config.contamination_shift + np.abs(rng.standard_t(1, size=m))
    x1 = mu1 + np.sqrt(config.gamma1) * rng.standard_normal(config.n1)
    return np.concatenate([x0, x1])


def simulate_ci(
    config: ExperimentConfig, beta: float, rng, n=None, d=None, support=None, unlabeled=None
) -> CrtProblem:
    """Z standard normal, X | Z ~ N(Z theta0, nu^2), Y ~ N(beta X + xi_coef * sum of support columns, 1)."""
    n = n or config.n
    d = d or config.d
    support = min(support or config.support, d)
    theta0 = np.zeros(d)
    theta0[:support] = config.theta_value
    Z = rng.standard_normal((n, d))
    X = Z @ theta0 + config.nu * rng.standard_normal(n)
    Y = beta * X + config.xi_coef * Z[:, :support].sum(axis=1) + rng.standard_normal(n)
    unlabeled = config.unlabeled if unlabeled is None else unlabeled
    Xu = Zu = None
    if unlabeled:
        Zu = rng.standard_normal((unlabeled, d))
        Xu = Zu @ theta0 + config.nu * rng.standard_normal(unlabeled)
    return CrtProblem(X, Y, Z, Xu, Zu, config.nu)


def true_theta(config: ExperimentConfig, d=None, support=None) -> np.ndarray:
    d = d or config.d
    theta0 = np.zeros(d)
    theta0[: min(support or config.support, d)] = config.theta_value
    return theta0


def singleton_model(k: int, theta0: float = 0.0) -> CustomModel:
    """x_1..x_k i.i.d. N(theta, 1) with the parameter space the single point theta0."""
    return CustomModel(
        1,
        k,
        neg_loglik=lambda theta, x: 0.5 * k * LOG_2PI + 0.5 * float(np.sum((x - theta[0]) ** 2)),
        score=lambda theta, x: np.array([float(np.sum(theta[0] - x))]),
        hessian=lambda theta, x: np.array([[float(k)]]),
        sampler=lambda theta, rng: theta[0] + rng.standard_normal(k),
        pointwise=lambda theta, x: -0.5 * LOG_2PI - 0.5 * (x - theta[0]) ** 2,
        domain=lambda theta: np.isclose(theta[0], theta0),
    )


class ExperimentRunner:
    """Runs the grid x replications product in-process or on a bounded worker pool."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.method_order = {m: i for i, m in enumerate(config.methods)}

    def work_items(self):
        return [(gi, value, rep) for gi, value in enumerate(self.config.grid) for rep in range(self.config.replications)]

    def _simulate(self, grid_index: int, value: float, rep: int):
        cfg = self.config
        rng = np.random.default_rng(split_seed(cfg.master_seed, cfg.experiment, "data", grid_index, rep))
        if cfg.experiment == "behrens-fisher":
            return simulate_behrens_fisher(cfg, value, rng)
        if cfg.experiment == "ci-test":
            return simulate_ci(cfg, value, rng)
        if cfg.experiment == "sigma-sweep":
            return simulate_ci(cfg, cfg.beta, rng)
        return {
            "singleton": rng.standard_normal(cfg.validity_k),
            "crt": simulate_ci(cfg, 0.0, rng, n=cfg.validity_n, d=cfg.validity_d, unlabeled=0),
        }

    def _behrens_fisher_pvalue(self, method: str, x: np.ndarray, seed: int) -> float:
        cfg = self.config
        x0, x1 = x[: cfg.n0], x[cfg.n0 :]
        if method == "t-test":
            return float(stats.ttest_ind(x1, x0, equal_var=False, alternative="greater").pvalue)
        if method == "oracle-t-test":
            return float(stats.ttest_ind(x1, x0[cfg.contaminated :], equal_var=False, alternative="greater").pvalue)
        settings = AcssSettings(
            estimator="penalized" if method == "acss-mle" else "mtle",
            sigma=cfg.bf_sigma,
            M=cfg.M,
            proposal=cfg.proposal,
            statistic=cfg.statistic,
            h=cfg.h if method == "acss-mtle" else cfg.n0 - cfg.contaminated,
            include_hessian_det=cfg.include_hessian_det,
        )
        return run_acss(BehrensFisherModel(cfg.n0, cfg.n1), x, settings, seed).pval

    def _crt_pvalue(self, method: str, problem: CrtProblem, sigma: float, seed: int, M=None) -> float:
        cfg = self.config
        if method == "debiased-lasso-baseline":
            return debiased_lasso_pvalue(problem, cfg.lambda_scale, opts=cfg.solver)
        common = dict(
            sigma=sigma,
            statistic=cfg.ci_statistic,
            M=M,
            lambda_scale=cfg.lambda_scale,
            group_size=cfg.group_size,
            sparsity=cfg.support,
            solver=cfg.solver,
        )
        if method == "oracle-crt":
            settings = CrtSettings(mechanism="oracle", estimator="oracle", theta0=true_theta(cfg, problem.d), **common)
        elif method in ("css", "css-crt"):
            settings = CrtSettings(mechanism="css", estimator="ols", **common)
        elif method == "acss-ols":
            settings = CrtSettings(mechanism="acss-ols", estimator="ols", **common)
        else:
            settings = CrtSettings(mechanism="acss-gaussian", estimator=ACSS_CRT_ESTIMATORS[method], **common)
        return run_crt(problem, settings, seed).pval

    def _validity_pvalue(self, method: str, data: dict, seed: int) -> float:
        cfg = self.config
        if method.startswith("singleton"):
            settings = AcssSettings(
                estimator="fixed",
                theta_fixed=np.zeros(1),
                M=cfg.M,
                proposal="iid-model",
                statistic="max",
                weighted=method == "singleton-weighted",
            )
            return run_acss(singleton_model(cfg.validity_k), data["singleton"], settings, seed).pval
        problem = data["crt"]
        return self._crt_pvalue(method, problem, cfg.ci_sigma, seed, M=cfg.M)

    def run_method(self, method: str, data, value: float, seed: int) -> float:
        experiment = self.config.experiment
        if experiment == "behrens-fisher":
            return self._behrens_fisher_pvalue(method, data, seed)
        if experiment == "ci-test":
            return self._crt_pvalue(method, data, self.config.ci_sigma, seed, self.config.ci_M)
        if experiment == "sigma-sweep":
            return self._crt_pvalue(method, data, value, seed, self.config.ci_M)
        return self._validity_pvalue(method, data, seed)

    def _row(self, method, value, rep, seed, pval=1.0, error="", ms=0.0) -> ExperimentRow:
        reject = bool(not error and pval <= self.config.alpha)
        return ExperimentRow(
            experiment=self.config.experiment,
            method=method,
            grid=value,
            rep=rep,
            seed=seed,
            pval=pval,
            reject=reject,
            error=error,
            ms=ms,
        )

    def run_item(self, grid_index: int, value: float, rep: int) -> List[ExperimentRow]:
        cfg = self.config
        seeds = {m: split_seed(cfg.master_seed, cfg.experiment, m, grid_index, rep) for m in cfg.methods}
        try:
            data = self._simulate(grid_index, value, rep)
        except Exception as exc:
            logger.error(f"simulation failed at grid={value}, rep={rep}: {exc}")
            return [self._row(m, value, rep, seeds[m], error=type(exc).__name__) for m in cfg.methods]
        rows = []
        for method in cfg.methods:
            start = time.perf_counter()
            try:
                pval = self.run_method(method, data, value, seeds[method])
                error = ""
            except Exception as exc:
                logger.error(f"{method} failed at grid={value}, rep={rep}: {exc}")
                pval, error = 1.0, type(exc).__name__
            ms = round(1000.0 * (time.perf_counter() - start), 3) if cfg.timing else 0.0
            rows.append(self._row(method, value, rep, seeds[method], pval, error, ms))
        return rows

    def _pool(self, workers: int):
        if self.config.executor == "thread":
            return ThreadPoolExecutor(max_workers=workers)
        return ProcessPoolExecutor(max_workers=workers)

    def run(self, threads: Optional[int] = None) -> List[ExperimentRow]:
        items = self.work_items()
        workers = threads or self.config.threads
        logger.info(
            f"{self.config.experiment}: {len(items)} work items x {len(self.config.methods)} methods"
            f" on {workers} {self.config.executor if workers > 1 else 'in-process'} workers"
        )
        rows: List[ExperimentRow] = []
        if workers == 1:
            for done, item in enumerate(items, start=1):
                rows.extend(self.run_item(*item))
                if done % 100 == 0:
                    logger.info(f"finished {done}/{len(items)} work items")
        else:
            with self._pool(workers) as executor:
                future_to_item = {executor.submit(self.run_item, *item): item for item in items}
                for done, future in enumerate(as_completed(future_to_item), start=1):
                    rows.extend(future.result())
                    if done % 100 == 0:
                        logger.info(f"finished {done}/{len(items)} work items")
        grid_index = {value: i for i, value in enumerate(self.config.grid)}
        rows.sort(key=lambda r: (self.method_order[r.method], grid_index[r.grid], r.rep))
        failed = sum(1 for r in rows if r.error)
        if failed:
            logger.warning(f"{failed} of {len(rows)} rows carry an error code")
        return rows


def run_experiment(config: ExperimentConfig, threads: Optional[int] = None) -> List[ExperimentRow]:
    return ExperimentRunner(config).run(threads)


def rows_frame(rows: Sequence[ExperimentRow]) -> pd.DataFrame:
    return pd.DataFrame([r.model_dump() for r in rows], columns=ROW_COLUMNS)


def summarize(rows: Sequence[ExperimentRow], alpha: float) -> pd.DataFrame:
    """Rejection rate at alpha and its binomial SE per (method, grid); error rows are counted, not rated."""
    if not rows:
        raise DimensionError("no rows to summarize")
    frame = rows_frame(rows)
    order = {m: i for i, m in enumerate(dict.fromkeys(frame["method"]))}
    frame["ok"] = frame["error"] == ""
    frame["hit"] = frame["ok"] & (frame["pval"] <= alpha)
    table = (
        frame.groupby(["method", "grid"], sort=False)
        .agg(reps=("ok", "sum"), rejections=("hit", "sum"), errors=("ok", lambda s: int((~s).sum())))
        .reset_index()
    )
    reps = table["reps"].clip(lower=1)
    table["rate"] = np.where(table["reps"] > 0, table["rejections"] / reps, np.nan)
    table["se"] = np.sqrt(table["rate"] * (1.0 - table["rate"]) / reps)
    table["order"] = table["method"].map(order)
    table = table.sort_values(["order", "grid"]).drop(columns="order").reset_index(drop=True)
    return table[["method", "grid", "reps", "rejections", "rate", "se", "errors"]]


def check_super_uniformity(rows: Sequence[ExperimentRow], alphas: Sequence[float]) -> pd.DataFrame:
    """Pass/fail of P(pval <= alpha) <= alpha + 2 SE per method, SE the binomial SE at the nominal level."""
    records = []
    for alpha in alphas:
        for _, r in summarize(rows, alpha).iterrows():
            bound = alpha + 2.0 * np.sqrt(alpha * (1.0 - alpha) / max(r["reps"], 1))
            records.append(
                {
                    "method": r["method"],
                    "alpha": alpha,
                    "rate": r["rate"],
                    "bound": bound,
                    "passed": bool(r["reps"] > 0 and r["errors"] == 0 and r["rate"] <= bound),
                }
            )
    return pd.DataFrame(records, columns=["method", "alpha", "rate", "bound", "passed"])


def _plot_lines(table: pd.DataFrame, alpha: float, path: Path):
    fig, ax = plt.subplots(figsize=(7, 4.5))
    try:
        for method, part in table.groupby("method", sort=False):
            (line,) = ax.plot(part["grid"], part["rate"], marker="o", label=method)
            line.set_gid(f"method-{method}")
        ax.axhline(alpha, linestyle="--", color="gray", gid="alpha-reference")
        ax.set_xlabel("grid")
        ax.set_ylabel("rejection rate")
        ax.set_ylim(-0.02, 1.02)
        ax.legend(loc="best", fontsize="small")
        fig.savefig(path, format="svg")
    finally:
        plt.close(fig)


def emit(rows_or_table: Union[Sequence[ExperimentRow], pd.DataFrame], fmt: str, path, alpha: float = 0.1):
    """Write rows or a summary table as csv, json, xlsx or an SVG line chart."""
    if fmt not in FORMATS:
        raise ConfigError(f"unknown format {fmt!r}; choose from {FORMATS}")
    path = Path(path)
    if isinstance(rows_or_table, pd.DataFrame):
        frame = rows_or_table
        is_rows = False
    else:
        frame = rows_frame(rows_or_table)
        is_rows = True
    try:
        if fmt == "csv":
            frame.to_csv(path, index=False)
        elif fmt == "json":
            frame.to_json(path, orient="records", indent=2)
        elif fmt == "xlsx":
            frame.to_excel(path, index=False, engine="openpyxl")
        else:
            table = summarize(rows_or_table, alpha) if is_rows and len(frame) else frame
            _plot_lines(table, alpha, path)
    except OSError as exc:
        raise OSError(f"cannot write {fmt} output to {path}: {exc}") from exc
    logger.info(f"wrote {len(frame)} records to {path} ({fmt})")


def read_rows(path) -> List[ExperimentRow]:
    """Parse a CSV written by emit back into rows."""
    frame = pd.read_csv(path, keep_default_na=False, dtype={"error": str}, float_precision="round_trip")
    return [ExperimentRow(**record) for record in frame.to_dict(orient="records")]
