"""rational-anon command line: anonymize, evaluate, compare, simulate, validate, replay."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

from . import __version__, agents, econ, metrics
from .domain import (
    DEFAULT_GENERATION,
    DEFAULT_MAX_ITERATIONS,
    ROLES,
    Document,
    Mode,
    RoleGeneration,
    RunConfig,
    StopReason,
    canonical_json,
    load_schema,
    validate_document,
)
from .gateway import BackendDescriptor, Cassette, GatewayError, GenerationParams, open_backend
from .orchestrator import LOOP_ROLES, read_trajectory, run_corpus, write_config

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("rational_anon")

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG, EXIT_DATA, EXIT_MISMATCH = 0, 1, 2, 3, 4
EVAL_ROLES = ("judge", "adversary")
ENV_PREFIX = "RATIONAL_ANON_"


class ConfigError(ValueError):
    pass


class DatasetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


def _resolve(base: Path, p: str | None) -> str | None:
    if p is None:
        return None
    path = Path(p).expanduser()
    return str(path if path.is_absolute() else (base / path).resolve())


def _descriptor(role: str, table: Mapping[str, Any], base: Path) -> BackendDescriptor:
    env = os.environ
    base_url = env.get(f"{ENV_PREFIX}{role.upper()}_BASE_URL", table.get("base_url"))
    model = env.get(f"{ENV_PREFIX}{role.upper()}_MODEL", table.get("model"))
    responses = table.get("responses")
    return BackendDescriptor(
        kind=table.get("kind", "live"),
        base_url=base_url,
        model_name=model,
        cassette_path=_resolve(base, table.get("cassette")),
        api_key_env=table.get("api_key_env"),
        responses=tuple(responses) if responses is not None else None,
    )


def load_config(path: str | Path, mode: str | None = None, seed: int | None = None) -> RunConfig:
    """Parse a TOML run config. Role tables hold endpoint and sampling keys."""
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config {path} is not valid TOML: {exc}") from exc
    base = path.resolve().parent
    try:
        endpoints, generation = {}, {}
        for role in ROLES:
            table = data.get(role)
            if table is None:
                continue
            endpoints[role] = _descriptor(role, table, base)
            default = DEFAULT_GENERATION[role]
            generation[role] = RoleGeneration(
                float(table.get("temperature", default.temperature)),
                table.get("top_p", default.top_p),
                int(table.get("max_tokens", default.max_tokens)),
            )
        schema_id = data.get("schema", "personal_reddit")
        load_schema(schema_id)
        templates = {r: _resolve(base, p) for r, p in data.get("templates", {}).items()}
        unknown = set(templates) - set(agents.TEMPLATE_ROLES)
        if unknown:
            raise ConfigError(f"unknown template roles {sorted(unknown)}")
        return RunConfig(
            mode=Mode(mode or data.get("mode", "rlaa")),
            max_iterations=int(data.get("max_iterations", DEFAULT_MAX_ITERATIONS.get(schema_id, 10))),
            role_endpoints=endpoints,
            role_generation=generation,
            schema_id=schema_id,
            prompt_template_paths=templates,
            retry_limit=int(data.get("retry_limit", 3)),
            seed=int(seed if seed is not None else data.get("seed", 0)),
        )
    except ConfigError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"invalid config {path}: {exc}") from exc


def _require_roles(config: RunConfig, roles: Sequence[str]) -> None:
    missing = [r for r in roles if r not in config.role_endpoints]
    if missing:
        raise ConfigError(f"config has no endpoint for roles: {', '.join(missing)}")


def _open_backends(config: RunConfig, roles: Sequence[str], record_dir: Path | None = None):
    cache: dict[str, Cassette] = {}
    out = {}
    for role in roles:
        desc = config.role_endpoints[role]
        if record_dir is not None and desc.kind != "replay":
            desc = replace(desc, record_to=str(record_dir / f"{role}.json"))
        out[role] = open_backend(desc, retry_limit=config.retry_limit, cassettes=cache)
    return out


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def _document_from_line(obj: Any) -> Document:
    if not isinstance(obj, dict):
        raise ValueError("line is not a JSON object")
    missing = [k for k in ("id", "text", "attributes", "schema") if k not in obj]
    if missing:
        raise ValueError(f"missing keys {missing}")
    if not isinstance(obj["attributes"], dict):
        raise ValueError("attributes must be an object")
    return Document(str(obj["id"]), obj["text"], obj["attributes"], obj["schema"])


def scan_dataset(path: str | Path) -> tuple[list[Document], list[tuple[int, str]]]:
    """Read a JSONL dataset. Returns documents and (line number, problem) pairs.

    Raises DatasetError when the file is unreadable or a line is not JSON.
    """
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise DatasetError(f"cannot read dataset {path}: {exc}") from exc
    docs, problems, seen = [], [], set()
    schemas: dict[str, Any] = {}
    for lineno, line in enumerate(raw.splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"line {lineno} is not JSON: {exc}") from exc
        try:
            doc = _document_from_line(obj)
        except ValueError as exc:
            problems.append((lineno, str(exc)))
            continue
        if doc.id in seen:
            problems.append((lineno, f"duplicate id {doc.id}"))
        seen.add(doc.id)
        if doc.schema_id not in schemas:
            try:
                schemas[doc.schema_id] = load_schema(doc.schema_id)
            except (KeyError, ValueError):
                schemas[doc.schema_id] = None
        schema = schemas[doc.schema_id]
        if schema is None:
            problems.append((lineno, f"unknown schema {doc.schema_id}"))
            continue
        problems += [(lineno, v) for v in validate_document(doc, schema)]
        docs.append(doc)
    if not docs and not problems:
        raise DatasetError(f"dataset {path} is empty")
    return docs, problems


def load_dataset(path: str | Path) -> list[Document]:
    docs, problems = scan_dataset(path)
    if problems:
        lineno, msg = problems[0]
        raise DatasetError(f"line {lineno}: {msg} ({len(problems)} problem(s))")
    return docs


# ---------------------------------------------------------------------------
# Run directories
# ---------------------------------------------------------------------------


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _template_bytes(role: str, path: str | None) -> bytes:
    if path:
        return Path(path).read_bytes()
    return (resources.files("rational_anon") / "prompts" / f"{role}.txt").read_bytes()


def _new_run_id(config: RunConfig, dataset_digest: str) -> str:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
    h = hashlib.sha256((canonical_json(config.to_dict()) + dataset_digest + stamp).encode()).hexdigest()
    return f"{stamp}-{h[:8]}"


def _write_csv(path: Path, rows: Sequence[Sequence[str]]) -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


def _read_json(path: Path) -> Any:
    return json.loads(path.read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _progress(done: int, total: int, outcome) -> None:
    traj = outcome.trajectory
    print(f"[{done}/{total}] {traj.document_id}: {traj.stop_reason.value} after {len(traj.records)} step(s)",
          file=sys.stderr)


def _anonymize(docs, dataset_bytes: bytes, config: RunConfig, out: Path, run_id: str | None,
               parallelism: int, record: bool) -> tuple[Path, int]:
    roles = ("attacker", "anonymizer") if config.mode is Mode.GREEDY else LOOP_ROLES
    _require_roles(config, roles)
    templates = agents.load_templates(config.prompt_template_paths)
    digest = hashlib.sha256(dataset_bytes).hexdigest()
    run_id = run_id or _new_run_id(config, digest)
    run_dir = out / run_id
    run_dir.mkdir(parents=True, exist_ok=False)
    manifest = {
        "run_id": run_id,
        "created_at": datetime.now(timezone.utc).isoformat(),
        "version": __version__,
        "mode": config.mode.value,
        "config": config.to_dict(),
        "dataset_digest": digest,
        "n_documents": len(docs),
        "template_hashes": {
            r: git_blob_hash(_template_bytes(r, config.prompt_template_paths.get(r))) for r in agents.TEMPLATE_ROLES
        },
    }
    with (run_dir / "manifest.json").open("x", encoding="utf-8") as fh:
        fh.write(canonical_json(manifest))
    write_config(run_dir, config)
    (run_dir / "dataset.jsonl").write_bytes(dataset_bytes)
    backends = _open_backends(config, roles, run_dir / "cassettes" if record else None)
    try:
        outcomes = run_corpus(docs, config, backends, parallelism, templates, _progress, out_dir=run_dir)
    finally:
        for b in backends.values():
            b.close()
    failures = sum(1 for o in outcomes if o.trajectory.stop_reason is StopReason.AGENT_FAILURE)
    return run_dir, failures


def cmd_anonymize(args) -> int:
    if not args.config:
        print("error: --config is required", file=sys.stderr)
        return EXIT_CONFIG
    try:
        config = load_config(args.config, args.mode, args.seed)
        if args.max_iterations:
            config = replace(config, max_iterations=args.max_iterations)
        roles = ("attacker", "anonymizer") if config.mode is Mode.GREEDY else LOOP_ROLES
        _require_roles(config, roles)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        dataset_bytes = Path(args.dataset).read_bytes()
        docs = load_dataset(args.dataset)
    except (OSError, DatasetError) as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_DATA
    try:
        run_dir, failures = _anonymize(
            docs, dataset_bytes, config, Path(args.out), args.run_id, args.parallelism, args.record_cassettes
        )
    except (GatewayError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(run_dir)
    if failures:
        print(f"{failures} document(s) stopped on an agent failure", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def _evaluate(run_dir: Path, config: RunConfig, per_step: bool, parallelism: int, record: bool) -> int:
    _require_roles(config, EVAL_ROLES)
    docs = load_dataset(run_dir / "dataset.jsonl")
    traj_dir = run_dir / "trajectories"
    paths = [traj_dir / f"{d.id}.json" for d in docs]
    missing = [p.name for p in paths if not p.is_file()]
    if missing:
        raise FileNotFoundError(f"missing trajectories: {', '.join(missing)}")
    run_cfg = RunConfig.from_dict(_read_json(run_dir / "config.json"))
    templates = agents.load_templates(run_cfg.prompt_template_paths)
    backends = _open_backends(config, EVAL_ROLES, run_dir / "cassettes" if record else None)
    judge_gen, adv_gen = config.generation("judge"), config.generation("adversary")

    def one(pair):
        doc, path = pair
        traj = read_trajectory(path).trajectory
        return metrics.evaluate_trajectory(
            traj, doc, backends["judge"], backends["adversary"], load_schema(doc.schema_id),
            templates=templates, per_step=per_step,
            judge_params=GenerationParams(judge_gen.temperature, judge_gen.top_p, judge_gen.max_tokens),
            adversary_params=GenerationParams(adv_gen.temperature, adv_gen.top_p, adv_gen.max_tokens),
            retry_limit=config.retry_limit,
        )

    try:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            records = list(pool.map(one, zip(docs, paths)))
    finally:
        for b in backends.values():
            b.close()
    eval_dir = run_dir / "eval"
    eval_dir.mkdir(exist_ok=True)
    for r in records:
        (eval_dir / f"{r.doc_id}.json").write_text(canonical_json(r.to_dict()), encoding="utf-8")
    summary = metrics.summarize(records)
    summary["dataset_digest"] = hashlib.sha256((run_dir / "dataset.jsonl").read_bytes()).hexdigest()
    summary["mode"] = run_cfg.mode.value
    summary["per_step"] = per_step
    (run_dir / "summary.json").write_text(canonical_json(summary), encoding="utf-8")
    _write_csv(run_dir / "mrs.csv", metrics.mrs_csv_rows(records))
    return summary["n_final_missing"]


def cmd_evaluate(args) -> int:
    run_dir = Path(args.run_dir)
    if not (run_dir / "manifest.json").is_file() or not (run_dir / "trajectories").is_dir():
        print(f"error: {run_dir} has no manifest or trajectories", file=sys.stderr)
        return EXIT_DATA
    try:
        if args.config:
            config = load_config(args.config, seed=args.seed)
        else:
            config = RunConfig.from_dict(_read_json(run_dir / "config.json"))
        _require_roles(config, EVAL_ROLES)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        missing = _evaluate(run_dir, config, args.per_step, args.parallelism, args.record_cassettes)
    except (FileNotFoundError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except GatewayError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(run_dir / "summary.json")
    if missing:
        print(f"{missing} document(s) lack final scores", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def _delta(a, b):
    if a is None or b is None:
        return None
    return b - a


def compare_summaries(a: Mapping[str, Any], b: Mapping[str, Any]) -> dict[str, Any]:
    """Column deltas (b - a) and the rationality gain of b over baseline a."""
    report: dict[str, Any] = {
        "baseline": {k: a.get(k) for k in metrics.TABLE_COLUMNS},
        "candidate": {k: b.get(k) for k in metrics.TABLE_COLUMNS},
        "delta": {k: _delta(a.get(k), b.get(k)) for k in metrics.TABLE_COLUMNS},
    }
    mrs_a = a["mrs"]["final_cumulative_macro"]
    mrs_b = b["mrs"]["final_cumulative_macro"]
    report["final_cumulative_mrs"] = {"baseline": mrs_a, "candidate": mrs_b}
    try:
        report["rationality_gain_pct"] = metrics.rationality_gain(mrs_a, mrs_b) if mrs_b is not None else None
    except (metrics.DomainError, TypeError):
        report["rationality_gain_pct"] = None
    return report


def cmd_compare(args) -> int:
    a_dir, b_dir = Path(args.run_a), Path(args.run_b)
    try:
        sa, sb = _read_json(a_dir / "summary.json"), _read_json(b_dir / "summary.json")
    except (OSError, ValueError) as exc:
        print(f"error: both runs must be evaluated first ({exc})", file=sys.stderr)
        return EXIT_DATA
    if sa.get("dataset_digest") != sb.get("dataset_digest"):
        print("error: runs were made on different datasets", file=sys.stderr)
        return EXIT_MISMATCH
    report = compare_summaries(sa, sb)
    report["runs"] = {"baseline": a_dir.name, "candidate": b_dir.name}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.json").write_text(canonical_json(report), encoding="utf-8")
    rows = [["iteration", "run", "cumulative_mrs"]]
    for label, s in (("baseline", sa), ("candidate", sb)):
        for i, v in enumerate(s["mrs"]["cumulative_macro_series"], 1):
            rows.append([str(i), label, "inf" if math.isinf(v) else repr(v)])
    _write_csv(out / "mrs_plot.csv", rows)
    gain = report["rationality_gain_pct"]
    for k in metrics.TABLE_COLUMNS:
        d = report["delta"][k]
        print(f"{k:6s} {'n/a' if d is None else f'{d:+.4f}'}")
    print(f"rationality gain: {'n/a' if gain is None else f'{gain:.1f}%'}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    try:
        configs = econ.load_sim_configs(args.sim_config)
        if args.seed is not None:
            configs = [replace(c, seed=args.seed) for c in configs]
    except econ.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    results = [econ.simulate(c) for c in configs]
    rows = econ.sweep(configs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "sweep.csv", econ.sweep_csv_rows(rows))
    _write_csv(out / "series.csv", econ.series_csv_rows(results))
    for r in rows:
        print(f"p={r.config.arbitrator_accuracy:g}: greedy MRS {r.greedy_final_mrs:.4f}, "
              f"arbitrated MRS {r.arbitrated_final_mrs:.4f} (stop at {r.arbitrated_stop})")
    return EXIT_OK


def cmd_validate(args) -> int:
    try:
        docs, problems = scan_dataset(args.dataset)
    except DatasetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    for lineno, msg in problems:
        print(f"line {lineno}: {msg}")
    if problems:
        return EXIT_PARTIAL
    print(f"{len(docs)} document(s) OK")
    return EXIT_OK


def cmd_replay(args) -> int:
    """Re-run a recorded run from its cassettes into a fresh directory."""
    src = Path(args.run_dir)
    cassettes = src / "cassettes"
    try:
        config = RunConfig.from_dict(_read_json(src / "config.json"))
        endpoints = {}
        for role, desc in config.role_endpoints.items():
            recorded = cassettes / f"{role}.json"
            if recorded.is_file():
                desc = BackendDescriptor("replay", model_name=desc.model_name, cassette_path=str(recorded))
            endpoints[role] = desc
        config = replace(config, role_endpoints=endpoints)
        dataset_bytes = (src / "dataset.jsonl").read_bytes()
        docs = load_dataset(src / "dataset.jsonl")
    except (OSError, ValueError) as exc:
        print(f"error: cannot replay {src}: {exc}", file=sys.stderr)
        return EXIT_DATA
    try:
        run_dir, failures = _anonymize(docs, dataset_bytes, config, Path(args.out), args.run_id,
                                       args.parallelism, False)
        # roles that were never called left no cassette; their original endpoint stays
        if (src / "summary.json").is_file():
            per_step = _read_json(src / "summary.json").get("per_step", False)
            _evaluate(run_dir, config, per_step, args.parallelism, False)
    except (ConfigError, GatewayError, OSError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(run_dir)
    return EXIT_PARTIAL if failures else EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _positive(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run config")
    common.add_argument("--out", default="runs", help="output directory (default: runs)")
    common.add_argument("--parallelism", type=_positive, default=1)
    common.add_argument("--mode", choices=[m.value for m in Mode])
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="rational-anon", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("anonymize", parents=[common], help="run the anonymization loop over a dataset")
    a.add_argument("dataset")
    a.add_argument("--run-id")
    a.add_argument("--max-iterations", type=_positive)
    a.add_argument("--record-cassettes", action="store_true", help="save every model reply for replay")
    a.set_defaults(func=cmd_anonymize)

    e = sub.add_parser("evaluate", parents=[common], help="score a finished run")
    e.add_argument("run_dir")
    e.add_argument("--per-step", action="store_true", help="also attack and judge intermediate texts")
    e.add_argument("--record-cassettes", action="store_true")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("compare", parents=[common], help="compare two evaluated runs (baseline first)")
    c.add_argument("run_a")
    c.add_argument("run_b")
    c.set_defaults(func=cmd_compare, out="comparison")

    s = sub.add_parser("simulate", parents=[common], help="run the leak-economy simulator")
    s.add_argument("sim_config", nargs="?", help="simulator TOML (default: bundled)")
    s.set_defaults(func=cmd_simulate, out="simulation")

    v = sub.add_parser("validate", parents=[common], help="check a JSONL dataset")
    v.add_argument("dataset")
    v.set_defaults(func=cmd_validate)

    r = sub.add_parser("replay", parents=[common], help="re-run a recorded run from its cassettes")
    r.add_argument("run_dir")
    r.add_argument("--run-id")
    r.set_defaults(func=cmd_replay)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
