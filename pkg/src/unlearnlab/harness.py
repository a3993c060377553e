"""Experiment orchestration: configs, the generate-train-unlearn-evaluate
pipeline, report tables, and run manifests.

A run is a pure function of (config file, master seed): every random draw is
seeded from the master seed plus a fixed per-role offset, and every reported
number (including the Time column, which counts backward passes rather than
wall seconds) is derived from those seeds alone. Running the same config twice
therefore produces byte-identical tables.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from . import biasgen as bg
from . import cobum as cb
from . import fairness_eval as fe
from . import model as md
from . import unlearn as ul

# Sub-seed derivation: master seed plus one offset per role. Strategies add
# 100 * (position in the config's strategy list) so reordering the list is
# the only way to change a strategy's stream.
SEED_DATA = 1000
SEED_BASELINE = 2000
SEED_GOLD = 3000
SEED_STRATEGY = 4000
SEED_COUNTERFACTUAL = 5000

STRATEGY_LABELS = {
    "gradient_ascent": "GA",
    "lora": "LoRA",
    "scrub": "SCRUB",
    "fmd": "FMD",
}

COUNTERFACTUAL_MODES = {"patch": "mask_patch", "pose": "rebalance_bins"}

TABLE_COLUMNS = (
    "Method",
    "FA ↓",
    "RA ↑",
    "TA ↑",
    "DP% ↑",
    "EO% ↑",
    "MIA ↓",
    "Time ↓",
    "Co-BUM ↑",
)

# Columns where smaller is better; the rest are larger-is-better.
_MINIMIZED = {"FA ↓", "MIA ↓", "Time ↓"}


class UserError(Exception):
    """Operator mistake (bad flag value, missing file); exit code 2."""


class ConfigError(UserError):
    """Malformed or inconsistent experiment config."""


# ---------------------------------------------------------------------------
# Config schema.
# ---------------------------------------------------------------------------

_SCENARIO_PARAMS = {
    "patch": {
        "n_per_class": int, "n_classes": int, "target_class": int,
        "patch_fraction": float, "marker_value": float,
        "d_s": int, "d_b": int, "class_sep": float,
        "confuser_class": int, "confuser_scale": float,
    },
    "attribute": {
        "n": int, "corr_ratio": float,
        "d_s": int, "d_b": int, "label_sep": float, "group_sep": float,
    },
    "pose": {
        "n": int, "n_classes": int, "skew": float,
        "d_s": int, "d_b": int, "class_sep": float, "scale_sigma": float,
    },
}

_SCENARIO_REQUIRED = {
    "patch": ("n_per_class", "n_classes", "target_class", "patch_fraction",
              "marker_value"),
    "attribute": ("n", "corr_ratio"),
    "pose": ("n", "n_classes", "skew"),
}

_STRATEGY_PARAMS = {
    "eta": float, "alpha": float, "beta": float, "rank": int, "steps": int,
    "damping": float, "finetune_steps": int, "hessian_scope": str,
}

_COBUM_PARAMS = {
    "alpha_u": float, "alpha_f": float, "alpha_q": float, "alpha_p": float,
    "alpha_e": float, "gamma": float, "kappa": float, "epsilon": float,
}


@dataclass
class ExperimentConfig:
    """One scenario experiment: data recipe, model, training, strategies."""

    name: str
    kind: str
    scenario_params: dict
    hidden: int = 32
    head: str = "softmax"
    train_epochs: int = 40
    train_batch_size: int = 64
    train_learning_rate: float = 3e-3
    strategies: tuple = ()
    strategy_params: dict = field(default_factory=dict)
    cobum_params: cb.CoBumParams = field(default_factory=cb.CoBumParams)


def _typed(section: str, key: str, raw: str, want):
    try:
        if want is int:
            return int(raw)
        if want is float:
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {e}") from e


def _parse_section(cp, section: str, schema: dict, skip=()) -> dict:
    out = {}
    for key, raw in cp.items(section):
        if key in skip:
            continue
        if key not in schema:
            raise ConfigError(f"[{section}] has unknown key {key!r}")
        out[key] = _typed(section, key, raw, schema[key])
    return out


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read(path)
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from e
    if not cp.has_section("scenario"):
        raise ConfigError(f"{path}: missing [scenario] section")

    kind = cp.get("scenario", "kind", fallback=None)
    if kind not in _SCENARIO_PARAMS:
        known = ", ".join(sorted(_SCENARIO_PARAMS))
        raise ConfigError(f"{path}: unknown scenario kind {kind!r} (known: {known})")

    raw_strategies = cp.get("scenario", "strategies", fallback="")
    strategies = tuple(raw_strategies.replace(",", " ").split())
    for name in strategies:
        if name == "hard":
            raise ConfigError(
                "'hard' runs implicitly as the gold reference; list only "
                "post-hoc strategies")
        if name not in STRATEGY_LABELS:
            known = ", ".join(STRATEGY_LABELS)
            raise ConfigError(f"unknown strategy {name!r} (known: {known})")
    if "fmd" in strategies and kind not in COUNTERFACTUAL_MODES:
        raise ConfigError(
            f"fmd needs a counterfactual recipe; none exists for {kind!r}")

    scen = _parse_section(cp, "scenario", _SCENARIO_PARAMS[kind],
                          skip=("kind", "strategies"))
    missing = [k for k in _SCENARIO_REQUIRED[kind] if k not in scen]
    if missing:
        raise ConfigError(f"[scenario] ({kind}) missing keys: {', '.join(missing)}")

    cfg = ExperimentConfig(name=path.stem, kind=kind, scenario_params=scen,
                           strategies=strategies)

    if cp.has_section("model"):
        mp = _parse_section(cp, "model", {"hidden": int, "head": str})
        cfg.hidden = mp.get("hidden", cfg.hidden)
        cfg.head = mp.get("head", cfg.head)
    if cfg.head not in ("softmax", "sigmoid"):
        raise ConfigError(f"[model] head must be softmax or sigmoid, got {cfg.head!r}")
    if cfg.head == "sigmoid" and _n_classes(cfg) != 2:
        raise ConfigError("[model] sigmoid head requires a binary scenario")
    if cfg.hidden < 1:
        raise ConfigError(f"[model] hidden must be >= 1, got {cfg.hidden}")

    if cp.has_section("train"):
        tp = _parse_section(cp, "train", {
            "epochs": int, "batch_size": int, "learning_rate": float})
        cfg.train_epochs = tp.get("epochs", cfg.train_epochs)
        cfg.train_batch_size = tp.get("batch_size", cfg.train_batch_size)
        cfg.train_learning_rate = tp.get("learning_rate", cfg.train_learning_rate)
    if cfg.train_epochs < 1 or cfg.train_batch_size < 1 or cfg.train_learning_rate <= 0:
        raise ConfigError("[train] needs epochs >= 1, batch_size >= 1, learning_rate > 0")

    for name in strategies:
        params = (_parse_section(cp, name, _STRATEGY_PARAMS)
                  if cp.has_section(name) else {})
        try:
            ul.StrategyConfig(strategy=name, seed=0, **params)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"[{name}]: {e}") from e
        cfg.strategy_params[name] = params

    if cp.has_section("cobum"):
        raw = _parse_section(cp, "cobum", _COBUM_PARAMS)
        kwargs = {("alpha_" + k[-1].upper() if k.startswith("alpha_") else k): v
                  for k, v in raw.items()}
        try:
            cfg.cobum_params = cb.CoBumParams(**kwargs)
        except ValueError as e:
            raise ConfigError(f"[cobum]: {e}") from e

    known = {"scenario", "model", "train", "cobum", *strategies}
    extra = [s for s in cp.sections() if s not in known]
    if extra:
        raise ConfigError(f"{path}: unknown sections {extra} "
                          "(strategy sections need the strategy listed)")
    return cfg


def _n_classes(cfg: ExperimentConfig) -> int:
    if cfg.kind == "attribute":
        return 2
    return int(cfg.scenario_params["n_classes"])


# ---------------------------------------------------------------------------
# Pipeline stages.
# ---------------------------------------------------------------------------

def build_bundle(cfg: ExperimentConfig, master_seed: int) -> bg.DataBundle:
    seed = master_seed + SEED_DATA
    p = dict(cfg.scenario_params)
    if cfg.kind == "patch":
        return bg.gen_patch_bias(
            p.pop("n_per_class"), p.pop("n_classes"), p.pop("target_class"),
            p.pop("patch_fraction"), p.pop("marker_value"), seed=seed, **p)
    if cfg.kind == "attribute":
        return bg.gen_attribute_bias(p.pop("n"), p.pop("corr_ratio"), seed=seed, **p)
    return bg.gen_pose_bias(p.pop("n"), p.pop("n_classes"), p.pop("skew"),
                            seed=seed, **p)


def model_arch(cfg: ExperimentConfig, bundle: bg.DataBundle) -> list:
    out_dim = 1 if cfg.head == "sigmoid" else bundle.n_classes
    return [bundle.d_s + bundle.d_b, cfg.hidden, out_dim]


def _train_config(cfg: ExperimentConfig, seed: int) -> md.TrainConfig:
    return md.TrainConfig(epochs=cfg.train_epochs, batch_size=cfg.train_batch_size,
                          learning_rate=cfg.train_learning_rate, seed=seed)


def train_baseline(cfg: ExperimentConfig, bundle: bg.DataBundle,
                   master_seed: int) -> tuple:
    """Biased reference model M_0; returns (model, wall_seconds, cost_units)."""
    X, y, _, _ = bg.stack(bundle.train)
    model = md.init_model(model_arch(cfg, bundle), cfg.head,
                          master_seed + SEED_BASELINE)
    model, wall = md.train(model, (X, y), _train_config(cfg, master_seed + SEED_BASELINE))
    return model, wall, float(cfg.train_epochs * len(bundle.train))


def run_strategy(name: str, cfg: ExperimentConfig, bundle: bg.DataBundle,
                 baseline: md.ModelParams, gold: md.ModelParams,
                 master_seed: int) -> ul.UnlearnResult:
    """Dispatch one post-hoc strategy against the shared baseline/gold pair."""
    position = cfg.strategies.index(name)
    scfg = ul.StrategyConfig(strategy=name,
                             seed=master_seed + SEED_STRATEGY + 100 * position,
                             **cfg.strategy_params[name])
    if name == "gradient_ascent":
        return ul.gradient_ascent(baseline, bundle, scfg)
    if name == "lora":
        return ul.lora_unlearn(baseline, bundle, scfg)
    if name == "scrub":
        return ul.scrub_unlearn(baseline, gold, bundle, scfg)
    d_c = bg.build_counterfactual(bundle, COUNTERFACTUAL_MODES[cfg.kind],
                                  seed=master_seed + SEED_COUNTERFACTUAL)
    pairs = None
    if cfg.kind == "patch" and scfg.finetune_steps > 0:
        # mask_patch keeps row order, so originals pair up positionally.
        pairs = list(zip(bg.forget_samples(bundle), d_c))
    return ul.fmd_unlearn(baseline, d_c, scfg, bundle=bundle, pairs=pairs)


# ---------------------------------------------------------------------------
# Table emission.
# ---------------------------------------------------------------------------

@dataclass
class TableRow:
    """One table line: an evaluated method, or a strategy that failed."""

    method: str
    report: fe.EvalReport | None = None
    cobum_score: float | None = None
    error: str | None = None

    @property
    def is_strategy(self) -> bool:
        return self.method not in ("Baseline", "Hard")


def _fmt_drop(value) -> str:
    # None: the row is its own reference point. NaN: the baseline had no gap.
    if value is None:
        return "0.00"
    if math.isnan(value):
        return "--"
    return f"{value:.2f}"


def _row_cells(row: TableRow) -> dict:
    if row.error is not None:
        return {col: "failed" for col in TABLE_COLUMNS[1:]}
    r = row.report
    cells = {
        "FA ↓": f"{r.fa:.4f}",
        "RA ↑": f"{r.ra:.4f}",
        "TA ↑": f"{r.ta:.4f}",
        "DP% ↑": _fmt_drop(r.dp_drop_pct),
        "EO% ↑": _fmt_drop(r.eo_drop_pct),
        "MIA ↓": f"{r.mia_auc:.4f}",
        "Time ↓": f"{r.time_units:.0f}",
    }
    cells["Co-BUM ↑"] = ("--" if row.cobum_score is None
                              else f"{row.cobum_score:.4f}")
    return cells


def _best_cells(rows: list) -> dict:
    """column -> set of eligible row indices holding the best value."""
    best = {}
    eligible = [i for i, row in enumerate(rows)
                if row.is_strategy and row.error is None]
    for col in TABLE_COLUMNS[1:]:
        values = {}
        for i in eligible:
            cell = _row_cells(rows[i])[col]
            if cell == "--":
                continue
            values[i] = float(cell)
        if not values:
            continue
        pick = min(values.values()) if col in _MINIMIZED else max(values.values())
        best[col] = {i for i, v in values.items() if v == pick}
    return best


def emit_table(rows: list, fmt: str, path) -> Path:
    """Write the method-by-metric table as csv, json, or markdown."""
    if not rows:
        raise ValueError("emit_table needs at least one row")
    if fmt not in ("csv", "json", "markdown"):
        raise ValueError(f"unknown table format {fmt!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    if fmt == "csv":
        lines = [",".join(TABLE_COLUMNS)]
        for row in rows:
            cells = _row_cells(row)
            lines.append(",".join([row.method] + [cells[c] for c in TABLE_COLUMNS[1:]]))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    elif fmt == "json":
        payload = {"columns": list(TABLE_COLUMNS), "rows": []}
        for row in rows:
            cells = _row_cells(row)
            entry = {"Method": row.method}
            for col in TABLE_COLUMNS[1:]:
                cell = cells[col]
                entry[col] = cell if cell in ("--", "failed") else float(cell)
            payload["rows"].append(entry)
        path.write_text(json.dumps(payload, indent=2, ensure_ascii=False) + "\n",
                        encoding="utf-8")
    else:
        best = _best_cells(rows)
        lines = ["| " + " | ".join(TABLE_COLUMNS) + " |",
                 "|" + "|".join(" --- " for _ in TABLE_COLUMNS) + "|"]
        for i, row in enumerate(rows):
            cells = _row_cells(row)
            rendered = [row.method]
            for col in TABLE_COLUMNS[1:]:
                cell = cells[col]
                if i in best.get(col, ()) and cell not in ("--", "failed"):
                    cell = f"**{cell}**"
                rendered.append(cell)
            lines.append("| " + " | ".join(rendered) + " |")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Report (de)serialization. NaN is not valid JSON, so it round-trips as null.
# ---------------------------------------------------------------------------

def report_to_dict(report: fe.EvalReport) -> dict:
    out = {}
    for key, value in dataclasses.asdict(report).items():
        if isinstance(value, float) and math.isnan(value):
            value = None
        out[key] = value
    return out


def report_from_dict(data: dict) -> fe.EvalReport:
    fields = {f.name for f in dataclasses.fields(fe.EvalReport)}
    unknown = set(data) - fields
    if unknown:
        raise ValueError(f"report has unknown fields: {sorted(unknown)}")
    kwargs = {k: (float("nan") if v is None and k not in ("dp_drop_pct", "eo_drop_pct")
                  else v)
              for k, v in data.items()}
    return fe.EvalReport(**kwargs)


def load_report(path) -> fe.EvalReport:
    path = Path(path)
    if not path.exists():
        raise UserError(f"report file not found: {path}")
    return report_from_dict(json.loads(path.read_text()))


# ---------------------------------------------------------------------------
# The full pipeline.
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    """What a run produced and how long each stage took."""

    config_path: str | None
    config_sha256: str
    master_seed: int
    tool_version: str
    out_dir: str
    stage_seconds: dict = field(default_factory=dict)
    checkpoints: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)
    failed_strategies: dict = field(default_factory=dict)
    failed_stage: str | None = None

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2,
                                   ensure_ascii=False) + "\n", encoding="utf-8")
        return path


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run_experiment(cfg: ExperimentConfig, master_seed: int, out_dir,
                   config_path=None) -> RunManifest:
    """generate -> baseline -> gold -> strategies -> evaluate -> Co-BUM -> emit.

    Each strategy restarts from the persisted baseline checkpoint, so sibling
    strategies never see each other's updates. A failing strategy becomes a
    "failed" table row; a failing stage aborts the run but leaves the manifest
    and any partial artifacts behind.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.json"
    if manifest_path.exists():
        raise UserError(f"{out} already holds a run (manifest.json exists); "
                        "pick a fresh output directory")

    manifest = RunManifest(
        config_path=str(config_path) if config_path else None,
        config_sha256=_sha256(config_path) if config_path else
        hashlib.sha256(repr(cfg).encode()).hexdigest(),
        master_seed=master_seed,
        tool_version=__version__,
        out_dir=str(out),
    )

    def stage(name, fn):
        t0 = time.perf_counter()
        try:
            result = fn()
        except Exception:
            manifest.failed_stage = name
            manifest.stage_seconds[name] = time.perf_counter() - t0
            manifest.write(manifest_path)
            raise
        manifest.stage_seconds[name] = time.perf_counter() - t0
        return result

    def _generate():
        bundle = build_bundle(cfg, master_seed)
        bundle_path = out / "bundle.csv"
        bg.save_bundle(bundle, bundle_path)
        manifest.reports["bundle"] = str(bundle_path)
        return bundle

    bundle = stage("generate", _generate)
    arch = model_arch(cfg, bundle)

    def _baseline():
        model, wall, units = train_baseline(cfg, bundle, master_seed)
        ckpt = out / "baseline.ckpt"
        md.save_checkpoint(model, ckpt)
        manifest.checkpoints["baseline"] = str(ckpt)
        return model, wall, units

    baseline, baseline_wall, baseline_units = stage("baseline", _baseline)

    def _gold():
        result = ul.hard_unlearn(bundle, _train_config(cfg, master_seed + SEED_GOLD),
                                 arch, head=cfg.head)
        ckpt = out / "gold.ckpt"
        md.save_checkpoint(result.model, ckpt)
        manifest.checkpoints["gold"] = str(ckpt)
        return result

    gold_result = stage("gold", _gold)

    def _strategies():
        results = {}
        for name in cfg.strategies:
            # Fresh copies from disk: strategies must not share live objects.
            base_copy = md.load_checkpoint(manifest.checkpoints["baseline"])
            gold_copy = md.load_checkpoint(manifest.checkpoints["gold"])
            try:
                result = run_strategy(name, cfg, bundle, base_copy, gold_copy,
                                      master_seed)
            except Exception as e:
                manifest.failed_strategies[name] = f"{type(e).__name__}: {e}"
                continue
            ckpt = out / f"{name}.ckpt"
            md.save_checkpoint(result.model, ckpt)
            manifest.checkpoints[name] = str(ckpt)
            results[name] = result
        return results

    strategy_results = stage("strategies", _strategies)

    def _evaluate():
        base_report = fe.evaluate_model(baseline, bundle,
                                        wall_time_seconds=baseline_wall,
                                        time_units=baseline_units)
        reports = {"baseline": base_report}
        reports["gold"] = fe.evaluate_model(
            gold_result.model, bundle,
            wall_time_seconds=gold_result.wall_time_seconds,
            time_units=gold_result.cost_units, baseline=base_report)
        for name, result in strategy_results.items():
            reports[name] = fe.evaluate_model(
                result.model, bundle,
                wall_time_seconds=result.wall_time_seconds,
                time_units=result.cost_units, baseline=base_report)
        eval_path = out / "eval_reports.json"
        eval_path.write_text(json.dumps(
            {name: report_to_dict(r) for name, r in reports.items()},
            indent=2) + "\n", encoding="utf-8")
        manifest.reports["eval_json"] = str(eval_path)
        return reports

    reports = stage("evaluate", _evaluate)

    def _cobum():
        scores = {}
        for name in strategy_results:
            scored = cb.score_reports(reports[name], reports["gold"],
                                      reports["baseline"], cfg.cobum_params,
                                      fa_floor=cfg.cobum_params.epsilon)
            scores[name] = scored
        cobum_path = out / "cobum.json"
        cobum_path.write_text(json.dumps(
            {name: {"raw": s.raw, "clamped": s.clamped, "composite": s.composite}
             for name, s in scores.items()}, indent=2) + "\n", encoding="utf-8")
        manifest.reports["cobum_json"] = str(cobum_path)
        return scores

    scores = stage("cobum", _cobum)

    def _emit():
        rows = [TableRow("Baseline", reports["baseline"]),
                TableRow("Hard", reports["gold"])]
        for name in cfg.strategies:
            label = STRATEGY_LABELS[name]
            if name in manifest.failed_strategies:
                rows.append(TableRow(label, error=manifest.failed_strategies[name]))
            else:
                rows.append(TableRow(label, reports[name],
                                     cobum_score=scores[name].composite))
        for fmt, suffix in (("csv", "csv"), ("json", "json"), ("markdown", "md")):
            target = emit_table(rows, fmt, out / f"results.{suffix}")
            manifest.reports[fmt] = str(target)
        return rows

    stage("emit", _emit)
    manifest.write(manifest_path)
    return manifest
