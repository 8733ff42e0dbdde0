"""Benchmark format, loader, ablation modes, runner and results tables."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from .config import RunConfig
from .controller import AnimationRequest, StagePlan, Transcript, Transition, pga_enhance, plan_animation, sia_decompose
from .controller.backends import CompletionBackend, make_backend
from .errors import BenchmarkLoadError
from .injection import ACTIVE, Strategy
from .metrics import MetricsReport, evaluate

log = logging.getLogger(__name__)


class Category(str, Enum):
    MATERIAL = "material"
    NON_RIGID = "non_rigid"
    HYBRID = "hybrid"


CATEGORY_LABELS = {Category.MATERIAL: "Material", Category.NON_RIGID: "Non-rigid", Category.HYBRID: "Hybrid"}
REFERENCE_SPLIT = {Category.MATERIAL: 70, Category.NON_RIGID: 70, Category.HYBRID: 60}
TABLE_COLUMNS = ("PIC", "LPIPS_T", "LPIPS_M", "CLIP Score (frame)", "CLIP Score (text)", "PPL", "Runtime")
_REPORT_FIELDS = ("pic", "lpips_total", "lpips_max_endpoint", "clip_frame", "clip_text", "ppl", "runtime_seconds")


@dataclass
class BenchmarkEntry:
    id: str
    category: Category
    description: str
    stage_prompts: Optional[list[str]] = None
    image_path: Optional[str] = None
    n_t: Optional[int] = None
    n_f: int = 12
    seed: int = 0

    def to_json(self) -> dict:
        out = {"id": self.id, "category": self.category.value, "description": self.description, "n_f": self.n_f,
               "seed": self.seed}
        for key in ("stage_prompts", "image_path", "n_t"):
            if getattr(self, key) is not None:
                out[key] = getattr(self, key)
        return out


@dataclass
class BenchmarkSet:
    entries: list[BenchmarkEntry]
    declared_counts: Optional[dict] = None
    path: Optional[Path] = None

    def counts(self) -> dict[Category, int]:
        out = {c: 0 for c in Category}
        for e in self.entries:
            out[e.category] += 1
        return out

    def validate(self) -> None:
        seen = set()
        for e in self.entries:
            if e.id in seen:
                raise BenchmarkLoadError(f"duplicate id {e.id!r}")
            seen.add(e.id)
        if self.declared_counts is not None and self.declared_counts != self.counts():
            raise BenchmarkLoadError(f"declared counts {_fmt_counts(self.declared_counts)} do not match "
                                     f"actual {_fmt_counts(self.counts())}")


def _fmt_counts(counts) -> str:
    return "{" + ", ".join(f"{Category(k).value}: {v}" for k, v in counts.items()) + "}"


def _parse_counts(raw, line: int) -> dict[Category, int]:
    try:
        counts = {Category(k): int(v) for k, v in raw.items()}
    except (ValueError, AttributeError, TypeError) as exc:
        raise BenchmarkLoadError(f"bad declared_counts: {exc}", line) from None
    return {c: counts.get(c, 0) for c in Category}


def validate_reference_split(counts) -> None:
    """Raise unless ``counts`` equals the reference split (70 material, 70 non-rigid, 60 hybrid)."""
    got = {c: 0 for c in Category}
    for k, v in counts.items():
        got[Category(k)] = int(v)
    if got != REFERENCE_SPLIT:
        raise BenchmarkLoadError(f"category counts {_fmt_counts(got)} differ from the reference split "
                                 f"{_fmt_counts(REFERENCE_SPLIT)}")


def parse_entry(data: dict, line: int = 0, base: Optional[Path] = None) -> BenchmarkEntry:
    if not isinstance(data, dict):
        raise BenchmarkLoadError("entry must be a JSON object", line)
    required = ("id", "category", "description")
    missing = [k for k in required if k not in data]
    if missing:
        raise BenchmarkLoadError(f"missing fields {missing}", line)
    allowed = set(required) | {"stage_prompts", "image_path", "n_t", "n_f", "seed"}
    extra = set(data) - allowed
    if extra:
        raise BenchmarkLoadError(f"unknown fields {sorted(extra)}", line)
    try:
        category = Category(data["category"])
    except ValueError:
        raise BenchmarkLoadError(f"category {data['category']!r} is not one of "
                                 f"{[c.value for c in Category]}", line) from None
    if not isinstance(data["description"], str) or not data["description"].strip():
        raise BenchmarkLoadError("description must be a non-empty string", line)
    prompts = data.get("stage_prompts")
    if prompts is not None and (not isinstance(prompts, list) or len(prompts) < 2
                                or not all(isinstance(p, str) and p.strip() for p in prompts)):
        raise BenchmarkLoadError("stage_prompts must be a list of at least two non-empty strings", line)
    n_f = data.get("n_f", 12)
    if not isinstance(n_f, int) or n_f < 2:
        raise BenchmarkLoadError("n_f must be an integer >= 2", line)
    n_t = data.get("n_t")
    if n_t is not None and (not isinstance(n_t, int) or n_t < 1):
        raise BenchmarkLoadError("n_t must be a positive integer", line)
    if prompts is not None and n_t is not None and len(prompts) != n_t + 1:
        raise BenchmarkLoadError(f"n_t={n_t} needs {n_t + 1} stage prompts, got {len(prompts)}", line)
    image = data.get("image_path")
    if image is not None and base is not None and not Path(image).is_absolute():
        image = str(base / image)
    return BenchmarkEntry(str(data["id"]), category, data["description"].strip(), prompts, image, n_t, n_f,
                          int(data.get("seed", 0)))


def load_benchmark(path) -> BenchmarkSet:
    """Load a JSONL set; an optional first line ``{"meta": {"declared_counts": {...}}}`` declares counts."""
    path = Path(path)
    if not path.exists():
        raise BenchmarkLoadError(f"benchmark file {path} does not exist")
    entries: list[BenchmarkEntry] = []
    declared = None
    seen: dict[str, int] = {}
    for lineno, text in enumerate(path.read_text().splitlines(), start=1):
        if not text.strip():
            continue
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise BenchmarkLoadError(f"invalid JSON: {exc.msg}", lineno) from None
        if isinstance(data, dict) and set(data) == {"meta"}:
            if entries or declared is not None:
                raise BenchmarkLoadError("meta line must come first", lineno)
            declared = _parse_counts(data["meta"].get("declared_counts", {}), lineno)
            continue
        entry = parse_entry(data, lineno, path.parent)
        if entry.id in seen:
            raise BenchmarkLoadError(f"duplicate id {entry.id!r} (first seen on line {seen[entry.id]})", lineno)
        seen[entry.id] = lineno
        entries.append(entry)
    bset = BenchmarkSet(entries, declared, path)
    bset.validate()
    return bset


def bundled_set(name: str = "sample") -> Path:
    return Path(str(resources.files("animweave").joinpath("data", f"{name}.jsonl")))


# -- ablation ------------------------------------------------------------------------------------


@dataclass(frozen=True)
class AblationMode:
    disabled: frozenset = frozenset()

    COMPONENTS = ("FAI", "KVAI", "DAI", "ICA")

    @classmethod
    def parse(cls, text: Optional[str]) -> "AblationMode":
        if text is None or text.strip().lower() in ("", "none", "full"):
            return cls()
        parts = set()
        for tok in text.split(","):
            name = tok.strip()
            if name.lower().startswith("w/o-"):
                name = name[4:]
            name = name.upper()
            if name not in cls.COMPONENTS:
                raise ValueError(f"unknown ablation component {tok!r}; expected w/o-FAI, w/o-KVAI, w/o-DAI or w/o-ICA")
            parts.add(name)
        return cls(frozenset(parts))

    @property
    def label(self) -> str:
        return "full" if not self.disabled else ",".join(f"w/o-{d}" for d in self.COMPONENTS if d in self.disabled)

    def strategy_for(self, strategy: Strategy) -> Strategy:
        if "ICA" in self.disabled:
            strategy = Strategy.DAI
        if strategy.value in self.disabled:
            strategy = Strategy.NONE
        return strategy

    def apply(self, plan: StagePlan) -> StagePlan:
        if not self.disabled:
            return plan
        transitions = []
        for t in plan.transitions:
            s = self.strategy_for(t.strategy)
            source = t.source if s is t.strategy and "ICA" not in self.disabled else f"ablation:{self.label}"
            transitions.append(Transition(t.index, s, source, t.rationale))
        return replace(plan, transitions=transitions)


# -- running -----------------------------------------------------------------------------------


@dataclass
class EntryResult:
    entry: BenchmarkEntry
    report: Optional[MetricsReport] = None
    strategies: list[str] = field(default_factory=list)
    error: Optional[str] = None
    run_dir: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.report is not None


@dataclass
class BenchmarkResults:
    entries: list[EntryResult]
    ablation: AblationMode
    config_hash: str
    runtime_probe: Optional[dict] = None

    def successful(self, category: Optional[Category] = None) -> list[EntryResult]:
        return [r for r in self.entries if r.ok and (category is None or r.entry.category is category)]

    def aggregate(self, category: Optional[Category] = None) -> Optional[dict]:
        rows = self.successful(category)
        if not rows:
            return None
        out = {}
        for name in _REPORT_FIELDS:
            vals = [getattr(r.report, name) for r in rows if getattr(r.report, name) is not None]
            out[name] = float(np.mean(vals)) if vals else None
        out["n"] = len(rows)
        return out

    def summary(self) -> dict:
        return {
            "ablation": self.ablation.label,
            "config_hash": self.config_hash,
            "overall": self.aggregate(),
            "categories": {c.value: self.aggregate(c) for c in Category},
            "failures": {r.entry.id: r.error for r in self.entries if not r.ok},
            "runtime_probe": self.runtime_probe,
        }


def _frame_alphas(records: list[dict]) -> list[tuple[int, float]]:
    return [(r["stage"], r["alpha"]) for r in records]


def _load_image(path: str) -> np.ndarray:
    from PIL import Image

    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def run_entry(entry: BenchmarkEntry, generator, backend: CompletionBackend, ablation: AblationMode,
              out_dir: Optional[Path], cap: int = 6) -> EntryResult:
    from .generator import write_run

    result = EntryResult(entry)
    try:
        image = _load_image(entry.image_path) if entry.image_path else None
        request = AnimationRequest(entry.description, image, entry.n_t, entry.n_f, entry.seed)
        transcript = Transcript()
        override = "DAI" if "ICA" in ablation.disabled else None
        plan = plan_animation(request, backend, cap, override, entry.stage_prompts, transcript)
        plan = ablation.apply(plan)
        result.strategies = [s.value for s in plan.strategies()]
        run_dir = out_dir / entry.id if out_dir is not None else None
        t0 = time.perf_counter()
        anim = generator.generate_animation(request, plan, None)
        runtime = time.perf_counter() - t0
        result.report = evaluate(anim.frames, anim.initial_image, plan.prompts, _frame_alphas(anim.records), runtime)
        if run_dir is not None:
            write_run(anim, run_dir, generator.config, generator.schedule)
            transcript.dump(run_dir / "transcripts")
            result.report.write(run_dir / "metrics.json")
            result.run_dir = str(run_dir)
    except Exception as exc:  # recorded, the run continues
        log.exception("entry %s failed", entry.id)
        result.error = f"{type(exc).__name__}: {exc}"
    return result


def runtime_probe(generator, n_frames: int = 16, seed: int = 0) -> dict[str, float]:
    """Seconds to generate one ``n_frames`` stage per strategy, from a fixed synthetic image."""
    size = generator.backbone.descriptor.image_size
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    image = np.stack([xx, yy, 0.5 * np.ones_like(xx)], -1).astype(np.float32)
    out = {}
    for strategy in ACTIVE:
        t0 = time.perf_counter()
        generator.generate_stage(0, image, ("a wooden sculpture", "a golden sculpture"), strategy, seed, n_frames)
        out[strategy.value] = time.perf_counter() - t0
    return out


def run_benchmark(bset: BenchmarkSet, config: RunConfig, ablation: Optional[AblationMode] = None,
                  out_dir=None, backbone=None, backend: Optional[CompletionBackend] = None, jobs: int = 1,
                  probe: bool = False) -> BenchmarkResults:
    from .backbone import load_backbone
    from .generator import AnimationGenerator

    ablation = ablation or AblationMode()
    backbone = backbone or load_backbone(config.backbone, config.weights)
    backend = backend or make_backend(config.llm_backend, config.llm_model, config.llm_timeout,
                                      config.llm_max_retries)
    generator = AnimationGenerator(backbone, config)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    def work(entry):
        return run_entry(entry, generator, backend, ablation, out_dir, config.n_t_cap)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, bset.entries))
    else:
        results = [work(e) for e in bset.entries]
    out = BenchmarkResults(results, ablation, config.hash(), runtime_probe(generator) if probe else None)
    if out_dir is not None:
        (out_dir / "summary.json").write_text(json.dumps(out.summary(), indent=2, sort_keys=True))
    return out


# -- tables -----------------------------------------------------------------------------------


def _cell(value, digits: int = 3) -> str:
    return "-" if value is None else f"{value:.{digits}f}"


def _runtime_cell(agg: dict, probe: Optional[dict]) -> str:
    if probe:
        kv = max(probe.get("KVAI", 0.0), probe.get("DAI", 0.0))
        return f"{probe.get('FAI', 0.0):.1f}s/{kv:.1f}s"
    return "-" if agg.get("runtime_seconds") is None else f"{agg['runtime_seconds']:.1f}s"


def table_rows(results: BenchmarkResults, per_entry: bool = True) -> list[dict]:
    if not results.entries:
        raise ValueError("no results to tabulate")
    rows = []

    def row(label, agg, probe=None):
        return {"Row": label, "PIC": _cell(agg["pic"]), "LPIPS_T": _cell(agg["lpips_total"]),
                "LPIPS_M": _cell(agg["lpips_max_endpoint"]), "CLIP Score (frame)": _cell(agg["clip_frame"]),
                "CLIP Score (text)": _cell(agg["clip_text"]), "PPL": _cell(agg["ppl"]),
                "Runtime": _runtime_cell(agg, probe)}

    if per_entry:
        for r in results.entries:
            if r.ok:
                rows.append(row(r.entry.id, {k: getattr(r.report, k) for k in _REPORT_FIELDS}))
            else:
                rows.append(dict({c: "-" for c in TABLE_COLUMNS}, Row=f"{r.entry.id} (failed)"))
    for c in Category:
        agg = results.aggregate(c)
        if agg is not None:
            rows.append(row(CATEGORY_LABELS[c], agg))
    overall = results.aggregate()
    if overall is not None:
        rows.append(row(f"Overall ({results.ablation.label})", overall, results.runtime_probe))
    return rows


def emit_table(results: BenchmarkResults, fmt: str = "markdown", path=None, per_entry: bool = True) -> str:
    rows = table_rows(results, per_entry)
    header = ("Row",) + TABLE_COLUMNS
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        text = buf.getvalue()
    elif fmt == "markdown":
        lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
        lines += ["| " + " | ".join(r[h] for h in header) + " |" for r in rows]
        text = "\n".join(lines) + "\n"
    else:
        raise ValueError(f"unknown table format {fmt!r}; expected 'csv' or 'markdown'")
    if path is not None:
        Path(path).write_text(text)
    return text


def _cells(line: str) -> list[str]:
    return [c.strip() for c in line.strip("|").split("|")]


def parse_markdown_table(text: str) -> list[dict]:
    """Inverse of ``emit_table(fmt="markdown")``: rows as dicts, numeric cells as floats."""
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if len(lines) < 2:
        raise ValueError("not a markdown table")
    header = _cells(lines[0])
    rows = []
    for ln in lines[2:]:
        cells = _cells(ln)
        if len(cells) != len(header):
            raise ValueError(f"row has {len(cells)} cells, header has {len(header)}")
        row = {}
        for h, c in zip(header, cells):
            try:
                row[h] = float(c) if h not in ("Row", "Runtime") else c
            except ValueError:
                row[h] = None if c == "-" else c
        rows.append(row)
    return rows


# -- expansion -------------------------------------------------------------------------------


def expand_descriptions(seeds: list[dict], backend: CompletionBackend, n_f: int = 12, cap: int = 6) -> list[BenchmarkEntry]:
    """Turn ``{"category", "description"[, "id", "n_t"]}`` seeds into full entries using the planning agents.

    The stage prompts come from decomposition; the enhancement agent is run
    once per entry so a failing backend is caught at expansion time.
    """
    out = []
    for i, seed in enumerate(seeds):
        category = Category(seed["category"])
        prompts = sia_decompose(seed["description"], seed.get("n_t"), backend, cap)
        pga_enhance(prompts[0], backend)
        out.append(BenchmarkEntry(seed.get("id") or f"{category.value}-{i:03d}", category, seed["description"],
                                  prompts, None, len(prompts) - 1, n_f, int(seed.get("seed", i))))
    return out


def write_benchmark(entries: list[BenchmarkEntry], path, declare_counts: bool = True) -> Path:
    path = Path(path)
    lines = []
    if declare_counts:
        counts = {c.value: 0 for c in Category}
        for e in entries:
            counts[e.category.value] += 1
        lines.append(json.dumps({"meta": {"declared_counts": counts}}))
    lines += [json.dumps(e.to_json()) for e in entries]
    path.write_text("\n".join(lines) + "\n")
    return path
