"""End-to-end pipeline: configuration, stages and the artifact manifest.

Stages run in a fixed order and each writes its artifacts as soon as it
finishes, so a failure leaves earlier outputs in place. Every stage draws
its randomness from ``stage_seed(master, stage)``, a SeedSequence keyed by
the master seed and the stage's position in ``STAGES``; a stage therefore
reproduces bit for bit whether it runs alone or as part of ``run``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import operator
import re
from dataclasses import dataclass, field
from importlib import resources
from os import PathLike
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (
    SCORE_COLUMNS,
    SES_COLUMN,
    FeatureTable,
    dump_schema,
    load_schema,
    load_table,
    stratified_undersampled_folds,
    summarize_groups,
    undersample,
    write_table,
)
from .dependence import odds_ratio_transform, partial_dependence, write_curve_csv
from .explain import (
    beeswarm_export,
    global_importance,
    local_profiles,
    shap_interactions,
    shap_matrix,
    write_beeswarm_csv,
)
from .gbt import BoostedEnsemble, GbtParams, fit_gbt, grid_search
from .indicators import INDICATORS, build_all, default_cutoffs, rates_table, write_indicator_report, write_rates_csv
from .linear import LinearParams
from .metrics import spearman
from .svg import render_svg
from .synth import SynthConfig, synth_generate

log = logging.getLogger(__name__)

STAGES = ("synth", "indicators", "summarize", "grid-search", "fit", "explain", "depend", "subsample", "report")

DEFAULT_DEPENDENCE = ("CovidBKGD_Closeddays", "CovidBKGD_PropStudRemoteL", "CovidBKGD_BarrierRemoteLAll",
                      "StudBKGD_Curiosity", "StudBKGD_Perseverance")

_FILTER = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*(==|!=|<=|>=|<|>)\s*(-?[0-9.eE+-]+)\s*$")
_OPS = {"==": operator.eq, "!=": operator.ne, "<": operator.lt, "<=": operator.le, ">": operator.gt,
        ">=": operator.ge}


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def stage_seed(master: int, stage: str) -> int:
    return int(np.random.SeedSequence([master, STAGES.index(stage)]).generate_state(1)[0])


def reference_config() -> dict:
    with resources.files("resilience").joinpath("data/reference_config.json").open(encoding="utf-8") as fh:
        return json.load(fh)


@dataclass(frozen=True)
class RowFilter:
    column: str
    op: str
    value: float

    @classmethod
    def parse(cls, text: str) -> "RowFilter":
        m = _FILTER.match(text)
        if not m:
            raise ConfigError(f"cannot parse filter {text!r}; expected '<feature> <op> <number>'")
        try:
            value = float(m.group(3))
        except ValueError:
            raise ConfigError(f"filter {text!r} has a non-numeric value") from None
        return cls(m.group(1), m.group(2), value)

    def mask(self, table: FeatureTable) -> np.ndarray:
        col = table.column(self.column)
        return ~np.isnan(col) & _OPS[self.op](col, self.value)

    def __str__(self):
        return f"{self.column} {self.op} {self.value:g}"


@dataclass
class PipelineConfig:
    seed: int = 0
    output_dir: str = "out"
    input: dict | None = None
    synth: SynthConfig | None = None
    cutoffs: dict[str, float] = field(default_factory=default_cutoffs)
    weighted_quintiles: bool = False
    per_country_rho: bool = False
    indicators: tuple[str, ...] = INDICATORS
    folds: int = 5
    grid: tuple = ()
    top_n: int = 25
    beeswarm_features: int = 10
    local_top_k: int = 10
    dependence_features: tuple[str, ...] = DEFAULT_DEPENDENCE
    dependence_indicators: tuple[str, ...] = ("SAR2",)
    subsample_indicator: str = "SAR1"
    subsample_arms: tuple[tuple[str, RowFilter], ...] = ()
    threads: int = 1
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, d: dict, *, base_dir: str | PathLike | None = None) -> "PipelineConfig":
        d = copy.deepcopy(d)
        known = {"seed", "output_dir", "input", "synth", "indicators", "model", "explain", "subsample", "threads"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        if ("input" in d) == ("synth" in d):
            raise ConfigError("config needs exactly one of 'input' or 'synth'")
        cfg = cls(seed=int(d.get("seed", 0)), output_dir=str(d.get("output_dir", "out")),
                  threads=int(d.get("threads", 1)), raw=d)
        if "input" in d:
            inp = dict(d["input"])
            for k in ("data", "schema"):
                if k not in inp:
                    raise ConfigError(f"input block lacks {k!r}")
                if base_dir is not None and not Path(inp[k]).is_absolute():
                    inp[k] = str(Path(base_dir) / inp[k])
            cfg.input = inp
        else:
            try:
                cfg.synth = SynthConfig.from_dict(d["synth"])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"synth block: {exc}") from None

        ind = d.get("indicators", {})
        if ind.get("cutoffs") is not None:
            cfg.cutoffs = {k: float(v) for k, v in ind["cutoffs"].items()}
            if set(cfg.cutoffs) != set(SCORE_COLUMNS):
                raise ConfigError(f"cutoffs must name exactly {list(SCORE_COLUMNS)}")
        cfg.weighted_quintiles = bool(ind.get("weighted_quintiles", False))
        cfg.per_country_rho = bool(ind.get("per_country_rho", False))
        cfg.indicators = tuple(ind.get("names", INDICATORS))

        model = d.get("model", {})
        cfg.folds = int(model.get("folds", 5))
        grid = []
        try:
            for g in model.get("gbt", [{}]):
                grid.append(GbtParams(**g))
            for g in model.get("logit", []):
                grid.append(LinearParams(**g))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"model grid: {exc}") from None
        cfg.grid = tuple(grid)

        ex = d.get("explain", {})
        cfg.top_n = int(ex.get("top_n", 25))
        cfg.beeswarm_features = int(ex.get("beeswarm_features", 10))
        cfg.local_top_k = int(ex.get("local_top_k", 10))
        cfg.dependence_features = tuple(ex.get("dependence_features", DEFAULT_DEPENDENCE))
        cfg.dependence_indicators = tuple(ex.get("dependence_indicators", ("SAR2",)))

        sub = d.get("subsample", {})
        cfg.subsample_indicator = sub.get("indicator", "SAR1")
        arms = sub.get("arms", [{"label": "public", "filter": "SchBKGD_Private == 0"},
                                {"label": "private", "filter": "SchBKGD_Private == 1"}])
        if len(arms) != 2:
            raise ConfigError("subsample block needs exactly two arms")
        cfg.subsample_arms = tuple((str(a["label"]), RowFilter.parse(a["filter"])) for a in arms)
        return cfg

    @classmethod
    def load(cls, path: str | PathLike) -> "PipelineConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(d, base_dir=Path(path).parent)

    def feature_names(self) -> list[str]:
        if self.synth is not None:
            return self.synth.feature_names()
        try:
            return [s.name for s in load_schema(self.input["schema"])]
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read schema: {exc}") from None

    def validate(self) -> None:
        """Fail fast on anything that would otherwise break a later stage."""
        names = set(self.feature_names())
        if self.folds < 2:
            raise ConfigError("folds must be at least 2")
        for ind in self.indicators + self.dependence_indicators + (self.subsample_indicator,):
            if ind not in INDICATORS:
                raise ConfigError(f"unknown indicator {ind!r}")
        if not self.grid:
            raise ConfigError("model grid is empty")
        if not any(isinstance(g, GbtParams) for g in self.grid):
            raise ConfigError("model grid needs at least one gbt point (the explained model)")
        unknown = [f for f in self.dependence_features if f not in names]
        unknown += [flt.column for _, flt in self.subsample_arms if flt.column not in names]
        if unknown:
            raise ConfigError(f"unknown features in config: {unknown}")
        if self.top_n < 1 or self.local_top_k < 1 or self.beeswarm_features < 1:
            raise ConfigError("top_n, local_top_k and beeswarm_features must be positive")


# artifacts


def sha256_of(path: str | PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, config: PipelineConfig) -> Path:
    """Hash every artifact under ``out`` (except the manifest itself), sorted by path."""
    entries = []
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            entries.append({"path": p.relative_to(out).as_posix(), "bytes": p.stat().st_size, "sha256": sha256_of(p)})
    manifest = {
        "version": __version__,
        "seed": config.seed,
        "config_sha256": hashlib.sha256(json.dumps(config.raw, sort_keys=True).encode()).hexdigest(),
        "stage_seeds": {s: stage_seed(config.seed, s) for s in STAGES},
        "artifacts": entries,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


# stages


@dataclass
class _State:
    table: FeatureTable | None = None
    labels: object = None
    grids: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict)
    shap: dict = field(default_factory=dict)


class Pipeline:
    def __init__(self, config: PipelineConfig):
        config.validate()
        self.cfg = config
        self.out = Path(config.output_dir)
        self.state = _State()
        self.artifacts: list[str] = []

    def _path(self, name: str) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.artifacts.append(name)
        return p

    def _svg(self, name: str, data, kind: str, title: str) -> None:
        self._path(name).write_text(render_svg(data, kind, title), encoding="utf-8")

    def run(self, until: str = "report") -> list[str]:
        self.out.mkdir(parents=True, exist_ok=True)
        for stage in STAGES[:STAGES.index(until) + 1]:
            log.info("stage %s", stage)
            try:
                getattr(self, "_" + stage.replace("-", "_"))(stage_seed(self.cfg.seed, stage))
            except Exception as exc:  # reported with the stage name, artifacts so far stay on disk
                raise StageError(stage, exc) from exc
        return self.artifacts

    # stage bodies

    def _synth(self, seed):
        cfg = self.cfg
        if cfg.synth is not None:
            table, truth = synth_generate(cfg.synth, seed=seed)
            write_table(table, self._path("data/table.csv"))
            dump_schema(list(table.schema), self._path("data/schema.json"))
            truth.to_json(self._path("data/latent_truth.json"))
        else:
            schema = load_schema(cfg.input["schema"])
            table = load_table(cfg.input["data"], schema, weight_column=cfg.input.get("weight_column"),
                               extra_columns=SCORE_COLUMNS + (SES_COLUMN,),
                               missing_sentinel=cfg.input.get("missing_sentinel", ""))
        self.state.table = table

    def _indicators(self, seed):
        t = self.state.table
        labels = build_all(t, self.cfg.cutoffs, weighted=self.cfg.weighted_quintiles,
                           per_country_rho=self.cfg.per_country_rho)
        self.state.labels = labels
        write_rates_csv(rates_table(t, labels), self._path("tables/indicator_rates.csv"))
        write_indicator_report(t, labels, self._path("tables/indicator_labels.csv"))
        labels.fit.dump(self._path("models/multilevel_fit.json"))

    def _working(self):
        labels = self.state.labels
        return self.state.table.subset(np.flatnonzero(labels.working))

    def _summarize(self, seed):
        work = self._working()
        for ind in self.cfg.indicators:
            y = self.state.labels.labels(ind)
            if y.all() or not y.any():
                log.warning("%s has a single class in the working sample; summary skipped", ind)
                continue
            summarize_groups(work, y).to_csv(self._path(f"tables/summary_{ind}.csv"),
                                             labels=("not_resilient", "resilient"))

    def _grid_search(self, seed):
        work = self._working()
        for i, ind in enumerate(self.cfg.indicators):
            y = self.state.labels.labels(ind).astype(int)
            folds = stratified_undersampled_folds(y, k=self.cfg.folds, seed=seed + i)
            res = grid_search(work, y, list(self.cfg.grid), folds)
            self.state.grids[ind] = res
            res.to_csv(self._path(f"tables/grid_{ind}.csv"))

    def _best_gbt(self, ind) -> GbtParams:
        res = self.state.grids[ind]
        return next(r.params for r in res.ranked() if isinstance(r.params, GbtParams))

    def _fit(self, seed):
        work = self._working()
        for i, ind in enumerate(self.cfg.indicators):
            y = self.state.labels.labels(ind)
            rows = undersample(y.astype(int), seed=seed + i)
            model = fit_gbt(work.subset(rows), y[rows], self._best_gbt(ind))
            self.state.models[ind] = model
            model.dump(self._path(f"models/gbt_{ind}.json"))

    def _explain(self, seed):
        work = self._working()
        for ind in self.cfg.indicators:
            model: BoostedEnsemble = self.state.models[ind]
            s = shap_matrix(model, work)
            self.state.shap[ind] = s
            s.to_csv(self._path(f"explain/shap_{ind}.csv"))
            rank = global_importance(s)
            rank.to_csv(self._path(f"explain/importance_{ind}.csv"), top_n=self.cfg.top_n)
            top = rank.top(self.cfg.top_n)
            self._svg(f"figures/importance_{ind}.svg", {"features": [n for n, _ in top],
                      "values": [v for _, v in top]}, "importance-bar",
                      f"{ind}: mean |SHAP| (top {len(top)})")
            bees = [n for n, _ in rank.top(self.cfg.beeswarm_features)]
            recs = beeswarm_export(s, work, bees)
            write_beeswarm_csv(recs, self._path(f"explain/beeswarm_{ind}.csv"))
            self._svg(f"figures/beeswarm_{ind}.svg", {"records": recs}, "beeswarm", f"{ind}: SHAP beeswarm")
            prof = local_profiles(s, work, top_k=self.cfg.local_top_k)
            prof.to_csv(self._path(f"explain/local_profiles_{ind}.csv"))
            self._svg(f"figures/local_profiles_{ind}.svg", {"profiles": [
                {"label": lab, "row_key": p.row_key, "total": p.total, "contributions": p.contributions}
                for lab, p in (("max", prof.max_profile), ("min", prof.min_profile))]},
                "local-profile", f"{ind}: highest and lowest SHAP profiles")
            rows = [prof.max_profile.row, prof.min_profile.row]
            inter = shap_interactions(model, work.values[rows], row_keys=[work.student_ids[r] for r in rows])
            for j, lab in enumerate(("max", "min")):
                inter.row_to_csv(j, self._path(f"explain/interactions_{ind}_{lab}.csv"))

    def _depend(self, seed):
        work = self._working()
        for ind in self.cfg.dependence_indicators:
            model = self.state.models.get(ind)
            if model is None:
                continue
            for feat in self.cfg.dependence_features:
                curve = partial_dependence(model, work, feat)
                write_curve_csv(curve, self._path(f"dependence/{ind}_{feat}.csv"))
                ors = odds_ratio_transform(curve)
                self._svg(f"figures/dependence_{ind}_{feat}.svg",
                          {"feature": feat, "grid": curve.grid.tolist(), "values": ors.values.tolist(),
                           "unit": f"odds ratio (reference p = {ors.reference_probability:.3f})",
                           "reference": 1.0}, "pdp-curve", f"{ind}: partial dependence on {feat}")

    def _subsample(self, seed):
        ind = self.cfg.subsample_indicator
        t, labels = self.state.table, self.state.labels
        params = self._best_gbt(ind) if ind in self.state.grids else next(
            g for g in self.cfg.grid if isinstance(g, GbtParams))
        ranks = []
        for i, (label, flt) in enumerate(self.cfg.subsample_arms):
            mask = labels.working & flt.mask(t)
            sub = t.subset(np.flatnonzero(mask))
            y = labels.sar[ind][mask]
            if y.all() or not y.any():
                raise ValueError(f"subsample arm {label!r} ({flt}) has a single class for {ind}")
            rows = undersample(y.astype(int), seed=seed + i)
            model = fit_gbt(sub.subset(rows), y[rows], params)
            ranks.append(global_importance(shap_matrix(model, sub)))
        top_a = [n for n, _ in ranks[0].top(self.cfg.top_n)]
        top_b = {n for n, _ in ranks[1].top(self.cfg.top_n)}
        shared = [n for n in top_a if n in top_b]
        names = list(ranks[0].feature_names)
        a = [float(ranks[0].mean_abs[names.index(n)]) for n in shared]
        b = [float(ranks[1].mean_abs[names.index(n)]) for n in shared]
        rho, p = spearman(a, b) if len(shared) >= 3 else (float("nan"), float("nan"))
        (la, fa), (lb, fb) = self.cfg.subsample_arms
        stats = {"indicator": ind, "arms": {la: str(fa), lb: str(fb)}, "shared_features": len(shared),
                 "spearman_rho": None if rho != rho else rho, "p_value": None if p != p else p}
        self._path(f"tables/paired_importance_{ind}.json").write_text(json.dumps(stats, indent=2) + "\n",
                                                                       encoding="utf-8")
        with open(self._path(f"tables/paired_importance_{ind}.csv"), "w", encoding="utf-8") as fh:
            fh.write(f"feature,mean_abs_shap_{la},mean_abs_shap_{lb}\n")
            for n, x, z in zip(shared, a, b):
                fh.write(f"{n},{x!r},{z!r}\n")
        self._svg(f"figures/paired_importance_{ind}.svg",
                  {"features": shared, "a": a, "b": b, "labels": (la, lb), "rho": None if rho != rho else rho},
                  "paired-importance", f"{ind}: {la} vs {lb} feature importance")

    def _report(self, seed):
        lines = [f"resilience {__version__} pipeline report", f"seed: {self.cfg.seed}", ""]
        for ind, res in self.state.grids.items():
            best = res.best
            lines.append(f"{ind}: best {best.params.label()} mean AUROC {best.mean_auroc:.4f} "
                         f"mean AUPRC {best.mean_auprc:.4f}")
        self._path("report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        write_manifest(self.out, self.cfg)
        self.artifacts.append("manifest.json")


def run(config: PipelineConfig, until: str = "report") -> Path:
    """Run the stages up to ``until``; returns the output directory."""
    Pipeline(config).run(until)
    return Path(config.output_dir)
