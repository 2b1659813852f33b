"""Command-line pipeline: ingest -> embed -> trajectory -> analyze -> render.

Settings resolve as ``flag > environment (DYNTRAJ_*) > config file > default``.
Exit status: 0 success, 1 usage error, 2 validation failure, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

from . import __version__
from .analytics import MetricConfig, compute_report
from .embedding import TrainingConfig, embedding_paths, load_embeddings, save_embeddings, train_series
from .errors import NumericError, ValidationError
from .graph import (
    DynamicGraph,
    EventLog,
    discretize_events,
    parse_manifest,
    parse_snapshots,
    read_manifest,
    validate,
)
from .projection import ProjectionConfig, TsneConfig
from .provenance import file_sha256, fingerprint
from .render import PlotSpec, emit_html, emit_svg, plot_metrics
from .trajectory import AlignmentConfig, TrajectorySet, compute_trajectories, select_anchors

log = logging.getLogger("dyntraj")

ENV_PREFIX = "DYNTRAJ_"
STAGES = ("ingest", "embed", "trajectory", "analyze", "render")

GRAPH_FILE = "graph.json"
EMB_DIR = "embeddings"
TRAJ_FILE = "trajectories.json"
METRICS_CSV = "metrics.csv"
METRICS_JSON = "metrics_summary.json"
METRICS_PNG = "metrics.png"
SVG_FILE = "trajectories.svg"
HTML_FILE = "trajectories.html"

_TRAIN_KEYS = [f.name for f in fields(TrainingConfig) if f.name not in ("seed", "threads")]
_TSNE_KEYS = [f.name for f in fields(TsneConfig) if f.name != "seed"]
_ALIGN_KEYS = [f.name for f in fields(AlignmentConfig) if f.name not in ("anchor_seed", "threads")]
_METRIC_KEYS = [f.name for f in fields(MetricConfig)]
_RENDER_KEYS = [f.name for f in fields(PlotSpec)]

DEFAULTS = {
    "seed": 42,
    "threads": 1,
    "out_dir": "out",
    "input": {"manifest": None, "edge_lists": None, "event_log": None, "interval": None, "directed": False},
    "training": {
        **{k: getattr(TrainingConfig(), k) for k in _TRAIN_KEYS},
        "node_targets": None,
        "edge_targets": False,
    },
    "embeddings": {"paths": None, "binary": False},
    "projection": {"method": "tsne", **{k: getattr(TsneConfig(), k) for k in _TSNE_KEYS}},
    "alignment": {k: getattr(AlignmentConfig(), k) for k in _ALIGN_KEYS},
    "metrics": {k: getattr(MetricConfig(), k) for k in _METRIC_KEYS},
    "render": {k: copy.deepcopy(getattr(PlotSpec(), k)) for k in _RENDER_KEYS},
}

# config keys that hold filesystem paths (resolved against the config file's folder)
_PATH_KEYS = {"input.manifest", "input.edge_lists", "input.event_log", "training.node_targets", "embeddings.paths", "out_dir"}

# (flag, config key, argparse kwargs)
FLAGS = [
    ("--out-dir", "out_dir", {"help": "artifact directory"}),
    ("--seed", "seed", {"type": int, "help": "random seed used by every stage"}),
    ("--threads", "threads", {"type": int, "help": "worker threads; 1 = deterministic"}),
    ("--manifest", "input.manifest", {"help": "JSON manifest of edge-list files"}),
    ("--edges", "input.edge_lists", {"nargs": "+", "help": "edge-list files, one per snapshot"}),
    ("--events", "input.event_log", {"help": "JSON-lines event log"}),
    ("--interval", "input.interval", {"type": float, "help": "bucket width for --events"}),
    ("--directed", "input.directed", {"type": "bool"}),
    ("--dim", "training.d", {"type": int}),
    ("--epochs", "training.epochs", {"type": int}),
    ("--lr", "training.learning_rate", {"type": float}),
    ("--min-lr", "training.min_learning_rate", {"type": float}),
    ("--negatives", "training.negatives", {"type": int}),
    ("--walks-per-node", "training.walks_per_node", {"type": int}),
    ("--walk-length", "training.walk_length", {"type": int}),
    ("--window", "training.window", {"type": int}),
    ("--batch-size", "training.batch_size", {"type": int}),
    ("--lambda-link", "training.lambda_link", {"type": float}),
    ("--lambda-node", "training.lambda_node", {"type": float}),
    ("--lambda-edge", "training.lambda_edge", {"type": float}),
    ("--node-targets", "training.node_targets", {"help": "JSON {snapshot index: {label: value}}"}),
    ("--edge-targets", "training.edge_targets", {"type": "bool"}),
    ("--embeddings", "embeddings.paths", {"nargs": "+", "help": "externally trained embedding files or folder"}),
    ("--binary", "embeddings.binary", {"type": "bool"}),
    ("--method", "projection.method", {"choices": ["pca", "tsne"]}),
    ("--perplexity", "projection.perplexity", {"type": float}),
    ("--tsne-iterations", "projection.iterations", {"type": int}),
    ("--tsne-lr", "projection.learning_rate", {"type": float}),
    ("--early-exaggeration", "projection.early_exaggeration", {"type": float}),
    ("--early-exaggeration-iters", "projection.early_exaggeration_iters", {"type": int}),
    ("--momentum-initial", "projection.momentum_initial", {"type": float}),
    ("--momentum-final", "projection.momentum_final", {"type": float}),
    ("--momentum-switch", "projection.momentum_switch", {"type": int}),
    ("--min-gain", "projection.min_gain", {"type": float}),
    ("--k", "alignment.k", {"type": int}),
    ("--alpha", "alignment.alpha", {"type": float}),
    ("--aggregation", "alignment.aggregation", {"choices": ["mean", "similarity_softmax"]}),
    ("--tau", "alignment.tau", {"type": float}),
    ("--anchors", "alignment.anchor_strategy", {"choices": ["auto", "all_v0", "top_degree", "random"]}),
    ("--anchor-cap", "alignment.anchor_cap", {"type": int}),
    ("--reference-t", "alignment.reference_t", {"type": int}),
    ("--n", "metrics.n", {"type": int, "help": "Jaccard depth"}),
    ("--m", "metrics.m", {"type": int, "help": "RBO depth"}),
    ("--p", "metrics.p", {"type": float, "help": "RBO damping"}),
    ("--space", "metrics.space", {"choices": ["raw_embedding", "projected_2d"]}),
    ("--movement", "metrics.movement", {"choices": ["raw", "unit_normalized", "projected"]}),
    ("--width", "render.width", {"type": int}),
    ("--height", "render.height", {"type": int}),
    ("--highlight", "render.highlight", {"nargs": "*"}),
    ("--colors", "render.colors", {"type": json.loads, "help": 'JSON {"label": "#RRGGBB"}'}),
    ("--background-color", "render.background_color", {}),
    ("--background-opacity", "render.background_opacity", {"type": float}),
    ("--anchor-radius", "render.anchor_radius", {"type": float}),
    ("--show-timestamps", "render.show_timestamps", {"type": "bool"}),
    ("--stride", "render.stride", {"type": int}),
]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _bool(text: str) -> bool:
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _dest(key: str) -> str:
    return "opt__" + key.replace(".", "__")


def _get(cfg: dict, key: str):
    node = cfg
    for part in key.split("."):
        node = node[part]
    return node


def _set(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    node = cfg
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "colors":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _known_keys(d: dict, prefix: str = "") -> set[str]:
    keys = set()
    for k, v in d.items():
        full = f"{prefix}{k}"
        keys.add(full)
        if isinstance(v, dict) and k != "colors":
            keys |= _known_keys(v, full + ".")
    return keys


def _resolve_paths(cfg: dict, base: Path) -> None:
    for key in _PATH_KEYS:
        try:
            val = _get(cfg, key)
        except KeyError:
            continue
        if val is None:
            continue
        if isinstance(val, list):
            _set(cfg, key, [str((base / v).resolve()) for v in val])
        else:
            _set(cfg, key, str((base / val).resolve()))


def load_config(path: str | None) -> tuple[dict, dict]:
    """Read a JSON config; return ``(merged with defaults, raw user document)``."""
    if path is None:
        return copy.deepcopy(DEFAULTS), {}
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"config file not found: {p}")
    try:
        user = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{p}: invalid JSON: {exc}") from exc
    if not isinstance(user, dict):
        raise ValidationError(f"{p}: config must be a JSON object")
    unknown = _known_keys(user) - _known_keys(DEFAULTS)
    # render.colors holds free-form label keys
    unknown = {k for k in unknown if not k.startswith("render.colors.")}
    if unknown:
        raise ValidationError(f"{p}: unknown config keys {sorted(unknown)}")
    cfg = _merge(DEFAULTS, user)
    _resolve_paths(cfg, p.parent)
    return cfg, user


def _env_overrides(environ) -> dict:
    out = {}
    keys = {k.upper().replace(".", "__"): k for k in _known_keys(DEFAULTS)}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = keys.get(name[len(ENV_PREFIX) :])
        if key is None:
            continue
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def resolve(args: argparse.Namespace, environ=None) -> dict:
    """Effective configuration for a parsed command line."""
    cfg, user = load_config(getattr(args, "config", None))
    for key, val in _env_overrides(os.environ if environ is None else environ).items():
        if key in _PATH_KEYS and val is not None:
            val = [str(Path(v).resolve()) for v in val] if isinstance(val, list) else str(Path(val).resolve())
        _set(cfg, key, val)
    for _, key, _ in FLAGS:
        val = getattr(args, _dest(key), None)
        if val is None:
            continue
        if key in _PATH_KEYS:
            val = [str(Path(v).resolve()) for v in val] if isinstance(val, list) else str(Path(val).resolve())
        _set(cfg, key, val)
    if cfg["seed"] is None:
        raise ValidationError("seed is unset; provide --seed or a config value")
    if "training" in user and user.get("embeddings", {}).get("paths"):
        raise ValidationError("config gives both a training section and external embedding paths; choose one")
    return cfg


# -- typed stage configs ------------------------------------------------------------------


def training_config(cfg: dict) -> TrainingConfig:
    t = cfg["training"]
    return TrainingConfig(**{k: t[k] for k in _TRAIN_KEYS}, seed=cfg["seed"], threads=cfg["threads"])


def projection_config(cfg: dict) -> ProjectionConfig:
    p = cfg["projection"]
    return ProjectionConfig(p["method"], TsneConfig(**{k: p[k] for k in _TSNE_KEYS}, seed=cfg["seed"]))


def alignment_config(cfg: dict) -> AlignmentConfig:
    a = cfg["alignment"]
    return AlignmentConfig(**{k: a[k] for k in _ALIGN_KEYS}, anchor_seed=cfg["seed"], threads=cfg["threads"])


def metric_config(cfg: dict) -> MetricConfig:
    return MetricConfig(**cfg["metrics"])


def plot_spec(cfg: dict) -> PlotSpec:
    r = cfg["render"]
    return PlotSpec(**{k: copy.deepcopy(r[k]) for k in _RENDER_KEYS})


# -- provenance -----------------------------------------------------------------------------


def _write_sidecar(artifact: Path, stage: str, cfg: dict, inputs: dict[str, Path], outputs: list[Path]) -> Path:
    doc = {
        "tool": "dyntraj",
        "version": __version__,
        "stage": stage,
        "artifact": artifact.name,
        "config": cfg,
        "config_hash": fingerprint(cfg, 64),
        "inputs": {role: {"path": str(p), "sha256": file_sha256(p)} for role, p in sorted(inputs.items())},
        "outputs": {p.name: file_sha256(p) for p in outputs},
    }
    side = artifact.with_name(artifact.name + ".prov.json")
    side.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return side


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise ValidationError(f"missing {what}: {path}")
    return path


# -- stages -------------------------------------------------------------------------------------


def stage_ingest(cfg: dict, out_dir: Path) -> Path:
    inp = cfg["input"]
    sources = [k for k in ("manifest", "edge_lists", "event_log") if inp.get(k)]
    if len(sources) != 1:
        raise ValidationError("give exactly one of input.manifest, input.edge_lists, input.event_log")
    inputs: dict[str, Path] = {}
    if inp.get("manifest"):
        inputs["manifest"] = _require(Path(inp["manifest"]), "manifest")
        g = parse_manifest(inputs["manifest"], inp["directed"], threads=cfg["threads"])
        for i, (p, _) in enumerate(read_manifest(inputs["manifest"])):
            inputs[f"edge_list_{i:04d}"] = p
    elif inp.get("edge_lists"):
        for i, p in enumerate(inp["edge_lists"]):
            inputs[f"edge_list_{i:04d}"] = _require(Path(p), "edge-list file")
        g = parse_snapshots([inputs[k] for k in sorted(inputs)], inp["directed"], threads=cfg["threads"])
    else:
        if inp.get("interval") is None:
            raise ValidationError("input.interval is required with an event log")
        inputs["event_log"] = _require(Path(inp["event_log"]), "event log")
        g = discretize_events(EventLog.read_jsonl(inputs["event_log"]), inp["interval"], inp["directed"])
    report = validate(g)
    if not report["ok"]:
        raise ValidationError("graph validation failed: " + "; ".join(report["breaches"][:5]))
    for w in report["warnings"]:
        log.warning(w)
    out = out_dir / GRAPH_FILE
    g.save(out)
    _write_sidecar(out, "ingest", cfg, inputs, [out])
    return out


def _node_targets(path):
    if not path:
        return None
    data = json.loads(_require(Path(path), "node targets").read_text(encoding="utf-8"))
    return {int(t): {str(k): float(v) for k, v in vals.items()} for t, vals in data.items()}


def stage_embed(cfg: dict, out_dir: Path, graph_path: Path | None = None) -> Path:
    graph_path = _require(graph_path or out_dir / GRAPH_FILE, "graph artifact")
    g = DynamicGraph.load(graph_path)
    inputs = {"graph": graph_path}
    out = out_dir / EMB_DIR
    ext = cfg["embeddings"]["paths"]
    if ext:
        paths = embedding_paths(ext[0]) if len(ext) == 1 else [Path(p) for p in ext]
        for i, p in enumerate(paths):
            inputs[f"embedding_{i:04d}"] = _require(p, "embedding file")
        series = load_embeddings(paths, g)
    else:
        t = cfg["training"]
        if t.get("node_targets"):
            inputs["node_targets"] = Path(t["node_targets"])
        series = train_series(g, training_config(cfg), _node_targets(t.get("node_targets")), bool(t["edge_targets"]))
    if out.exists():
        for old in out.glob("emb_*"):
            old.unlink()
    written = save_embeddings(series, out, binary=bool(cfg["embeddings"]["binary"]))
    _write_sidecar(out, "embed", cfg, inputs, written)
    return out


def stage_trajectory(cfg: dict, out_dir: Path, graph_path: Path | None = None, emb_dir: Path | None = None) -> Path:
    graph_path = _require(graph_path or out_dir / GRAPH_FILE, "graph artifact")
    emb_dir = _require(emb_dir or out_dir / EMB_DIR, "embeddings artifact")
    g = DynamicGraph.load(graph_path)
    series = load_embeddings(emb_dir, g)
    acfg = alignment_config(cfg)
    anchors = select_anchors(g, series, acfg, projection_config(cfg))
    traj = compute_trajectories(g, series, anchors, acfg)
    out = out_dir / TRAJ_FILE
    traj.save(out)
    _write_sidecar(out, "trajectory", cfg, {"graph": graph_path, "embeddings": emb_dir}, [out])
    return out


def stage_analyze(cfg: dict, out_dir: Path, emb_dir: Path | None = None, traj_path: Path | None = None) -> Path:
    emb_dir = _require(emb_dir or out_dir / EMB_DIR, "embeddings artifact")
    mcfg = metric_config(cfg)
    series = load_embeddings(emb_dir)
    inputs = {"embeddings": emb_dir}
    traj = None
    if mcfg.space == "projected_2d" or mcfg.movement == "projected":
        traj_path = _require(traj_path or out_dir / TRAJ_FILE, "trajectory artifact")
        traj = TrajectorySet.load(traj_path)
        inputs["trajectories"] = traj_path
    report = compute_report(series, mcfg, traj)
    csv_path, json_path, png_path = out_dir / METRICS_CSV, out_dir / METRICS_JSON, out_dir / METRICS_PNG
    report.export_csv(csv_path)
    report.export_summary(json_path)
    plot_metrics(report, png_path, [m.timestamp_label for m in series.matrices])
    _write_sidecar(csv_path, "analyze", cfg, inputs, [csv_path, json_path, png_path])
    return csv_path


def stage_render(cfg: dict, out_dir: Path, traj_path: Path | None = None) -> Path:
    traj_path = _require(traj_path or out_dir / TRAJ_FILE, "trajectory artifact")
    traj = TrajectorySet.load(traj_path)
    spec = plot_spec(cfg)
    svg, page = out_dir / SVG_FILE, out_dir / HTML_FILE
    emit_svg(traj, spec, svg)
    emit_html(traj, spec, page)
    _write_sidecar(svg, "render", cfg, {"trajectories": traj_path}, [svg, page])
    return svg


def run_pipeline(cfg: dict) -> dict[str, Path]:
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    return {
        "graph": stage_ingest(cfg, out_dir),
        "embeddings": stage_embed(cfg, out_dir),
        "trajectories": stage_trajectory(cfg, out_dir),
        "metrics": stage_analyze(cfg, out_dir),
        "svg": stage_render(cfg, out_dir),
    }


def replay(sidecar, out_dir) -> Path:
    """Re-run the stage recorded in a provenance sidecar, writing into ``out_dir``.

    Input files must still hash to the recorded digests.
    """
    doc = json.loads(_require(Path(sidecar), "sidecar").read_text(encoding="utf-8"))
    for role, rec in doc["inputs"].items():
        p = _require(Path(rec["path"]), f"{role} input")
        if file_sha256(p) != rec["sha256"]:
            raise ValidationError(f"{role} input {p} changed since the artifact was produced")
    cfg = doc["config"]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    inp = {role: Path(rec["path"]) for role, rec in doc["inputs"].items()}
    stage = doc["stage"]
    if stage == "ingest":
        return stage_ingest(cfg, out_dir)
    if stage == "embed":
        return stage_embed(cfg, out_dir, inp["graph"])
    if stage == "trajectory":
        return stage_trajectory(cfg, out_dir, inp["graph"], inp["embeddings"])
    if stage == "analyze":
        return stage_analyze(cfg, out_dir, inp["embeddings"], inp.get("trajectories"))
    if stage == "render":
        return stage_render(cfg, out_dir, inp["trajectories"])
    raise ValidationError(f"unknown stage {stage!r} in sidecar")


# -- argument parsing -------------------------------------------------------------------------


def _add_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON pipeline config")
    for flag, key, kw in FLAGS:
        kw = dict(kw)
        if kw.get("type") == "bool":
            kw["type"] = _bool
            kw.setdefault("nargs", "?")
            kw["const"] = True
        p.add_argument(flag, dest=_dest(key), default=None, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dyntraj", allow_abbrev=False, description="Embedding trajectories for discrete-time dynamic graphs.")
    parser.add_argument("--version", action="version", version=f"dyntraj {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    helps = {
        "ingest": "parse edge lists or an event log into graph.json",
        "embed": "train (or import) per-snapshot embeddings",
        "trajectory": "align all snapshots into the anchor frame",
        "analyze": "structural-change metrics (CSV, JSON summary, figure)",
        "render": "trajectory SVG and self-contained HTML",
        "pipeline": "run every stage in order",
    }
    for name, h in helps.items():
        _add_flags(sub.add_parser(name, help=h, allow_abbrev=False))
    rp = sub.add_parser("replay", help="regenerate an artifact from its provenance sidecar")
    rp.add_argument("sidecar")
    rp.add_argument("--out-dir", dest="replay_out", required=True)
    ep = sub.add_parser("example", help="write the bundled 30-node demo dataset and config")
    ep.add_argument("directory")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    if not args.command:
        parser.print_usage(sys.stderr)
        return 1
    try:
        if args.command == "example":
            from .synthetic import copy_bundled

            print(copy_bundled(args.directory))
            return 0
        if args.command == "replay":
            print(replay(args.sidecar, args.replay_out))
            return 0
        cfg = resolve(args)
        out_dir = Path(cfg["out_dir"])
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "pipeline":
            for name, path in run_pipeline(cfg).items():
                print(f"{name}\t{path}")
        else:
            stage = {
                "ingest": stage_ingest,
                "embed": stage_embed,
                "trajectory": stage_trajectory,
                "analyze": stage_analyze,
                "render": stage_render,
            }[args.command]
            print(stage(cfg, out_dir))
        return 0
    except NumericError as exc:
        print(f"dyntraj: numeric failure: {exc}", file=sys.stderr)
        return 3
    except (ValidationError, OSError, json.JSONDecodeError) as exc:
        print(f"dyntraj: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
