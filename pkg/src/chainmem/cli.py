"""Command line entry point: ``chainmem {validate,annotate,eval,replay,report,synth}``.

Exit codes: 0 success, 1 data or validation failure, 2 configuration or
I/O error, 3 backend failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .annotation import Annotator, JudgeRubric, ProvenanceLog, annotate_corpus
from .backend import Backend, BackendError, MockBackend, OpenAICompatibleBackend, \
    RecordingBackend
from .config import CliConfig, load_config
from .episodes import DatasetError, iter_episodes, load_dataset, save_annotated, \
    validate_episode
from .evaluation import EmptyTraceError, MatchConfig, evaluate
from .orchestrator import ABLATIONS, ConfigError, EpisodeRun, RunConfig, run_corpus
from .perception import StageError
from .fixtures import record_fixture_scripts
from .synth import make_corpus, write_screens
from .templates import PromptTemplates
from .traces import read_trace, read_trace_lines, run_lines

log = logging.getLogger("chainmem")

EXIT_OK, EXIT_DATA, EXIT_CONFIG, EXIT_BACKEND = 0, 1, 2, 3


def _err(msg: str) -> None:
    print(f"chainmem: {msg}", file=sys.stderr)


# -- shared option groups ----------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--seed", type=int, default=0, help="seed for anything randomized")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_dataset(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", required=True, help="episode JSONL file or directory")
    p.add_argument("--screens-root", help="directory screenshot paths are relative to")


def _add_backend(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("backends")
    g.add_argument("--backend-url", help="decision backend base URL (default: $COM_BACKEND_URL)")
    g.add_argument("--backend-model")
    g.add_argument("--mock-script", help="replay responses from a recorded mock script")
    g.add_argument("--perception-url")
    g.add_argument("--perception-model")
    g.add_argument("--perception-same", action="store_true",
                   help="use the decision backend for perception too")
    g.add_argument("--record-script", help="record all backend responses to this script")


def _add_run(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run")
    g.add_argument("--memory-mode", choices=("annotated", "generated"))
    g.add_argument("--ablate", action="append", choices=("stm", "ltm", "screeninfo"),
                   default=[], help="disable a memory component (repeatable)")
    g.add_argument("--ablation-row", choices=tuple(ABLATIONS),
                   help="set all three memory switches to one ablation row")
    g.add_argument("--use-screeninfo", action="store_true",
                   help="include screen information in the decision prompt")
    g.add_argument("--stm-capacity", type=int)
    g.add_argument("--workers", type=int)
    g.add_argument("--prompt-dir", help="directory of prompt templates")
    g.add_argument("--self-rollout", action="store_true",
                   help="feed predictions instead of ground truth into the next step")


def _apply_flags(cfg: CliConfig, args: argparse.Namespace) -> CliConfig:
    pairs = {
        "screens_root": "run.screens_root", "memory_mode": "run.memory_mode",
        "stm_capacity": "run.stm_capacity", "workers": "run.workers",
        "prompt_dir": "run.prompt_dir", "backend_url": "backend.url",
        "backend_model": "backend.model", "mock_script": "backend.mock_script",
        "perception_url": "perception.url", "perception_model": "perception.model",
    }
    for attr, key in pairs.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg.set(key, value)
    row = getattr(args, "ablation_row", None)
    if row:
        info, stm, ltm = ABLATIONS[row]
        cfg.set("run.use_screen_info", info)
        cfg.set("run.use_stm", stm)
        cfg.set("run.use_ltm", ltm)
    for name in getattr(args, "ablate", []):
        cfg.set({"stm": "run.use_stm", "ltm": "run.use_ltm",
                 "screeninfo": "run.use_screen_info"}[name], False)
    if getattr(args, "use_screeninfo", False):
        if "screeninfo" in args.ablate:
            raise ConfigError("--use-screeninfo conflicts with --ablate screeninfo")
        cfg.set("run.use_screen_info", True)
    if getattr(args, "perception_same", False):
        cfg.set("perception.same_as_decision", True)
    if getattr(args, "self_rollout", False):
        cfg.set("run.teacher_forcing", False)
    return cfg


def _screens_root(cfg: CliConfig, dataset: str) -> str:
    """Screenshots default to living next to the dataset."""
    if cfg.run.screens_root:
        return cfg.run.screens_root
    path = Path(dataset)
    return str(path if path.is_dir() else path.parent)


def _make_backend(section, label: str) -> Backend | None:
    if section.mock_script:
        return MockBackend.from_file(section.mock_script)
    if section.url:
        if not section.model:
            raise ConfigError(f"{label} backend URL given without a model name")
        return OpenAICompatibleBackend(section.url, section.model,
                                       os.environ.get(section.api_key_env),
                                       max_attempts=section.max_attempts,
                                       timeout=section.timeout,
                                       max_in_flight=section.max_in_flight)
    return None


def build_run_config(cfg: CliConfig) -> RunConfig:
    decision = _make_backend(cfg.backend, "decision")
    if decision is None:
        raise ConfigError("no decision backend: pass --backend-url/--backend-model "
                          "or --mock-script")
    if cfg.perception.same_as_decision or (cfg.backend.mock_script and not cfg.perception.url
                                           and not cfg.perception.mock_script):
        perception = decision
    else:
        perception = _make_backend(cfg.perception, "perception")
    r = cfg.run
    templates = PromptTemplates(r.prompt_dir) if r.prompt_dir else PromptTemplates()
    return RunConfig(
        memory_mode=r.memory_mode, stm_capacity=r.stm_capacity,
        decision_prompt=r.decision_prompt, decision_backend=decision,
        perception_backend=perception, use_stm=r.use_stm, use_ltm=r.use_ltm,
        use_screen_info=r.use_screen_info, teacher_forcing=r.teacher_forcing,
        screens_root=r.screens_root, templates=templates,
    )


def _match_config(cfg: CliConfig) -> MatchConfig:
    m = cfg.match
    try:
        return MatchConfig(m.click_radius, m.type_match, m.type_threshold)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _with_recording(run: RunConfig, path: str | None) -> tuple[RunConfig, RecordingBackend | None]:
    if not path:
        return run, None
    decision = RecordingBackend(run.decision_backend)
    perception = run.perception_backend
    if perception is run.decision_backend:
        perception = decision
    elif perception is not None:
        perception = RecordingBackend(perception)
    return replace(run, decision_backend=decision, perception_backend=perception), decision


def _dump_recordings(run: RunConfig, path: str) -> None:
    recorders = {id(b): b for b in (run.decision_backend, run.perception_backend)
                 if isinstance(b, RecordingBackend)}
    for i, rec in enumerate(recorders.values()):
        rec.dump(path, merge=i > 0)


# -- commands ----------------------------------------------------------------

def cmd_validate(args: argparse.Namespace) -> int:
    cfg = _apply_flags(load_config(args.config), args)
    cfg.run.screens_root = _screens_root(cfg, args.dataset)
    bad = 0
    n = 0
    warnings = 0
    try:
        for e in iter_episodes(args.dataset):
            n += 1
            report = validate_episode(e, cfg.run.stm_capacity, cfg.run.screens_root)
            for v in report.violations:
                _err(f"episode {e.id}: {v}")
            for w in report.warnings:
                _err(f"warning: episode {e.id}: {w}")
            warnings += len(report.warnings)
            if not report.ok or (args.strict_screenshots and report.warnings):
                bad += 1
    except DatasetError as exc:
        _err(str(exc))
        return EXIT_DATA
    print(f"{n} episodes, {bad} with violations, {warnings} screenshot warnings",
          file=sys.stderr)
    return EXIT_DATA if bad else EXIT_OK


def _split_trace_lines(path: Path) -> dict[str, list[str]]:
    """Raw lines of complete episodes in an existing trace, keyed by episode id."""
    done: dict[str, list[str]] = {}
    if not path.exists():
        return done
    current: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            eid = row["episode_id"]
            if row.get("incomplete"):
                current.pop(eid, None)
                continue
            current.setdefault(eid, []).append(line.rstrip("\n"))
    done.update(current)
    return done


def _run_eval(args: argparse.Namespace, out: Path) -> tuple[int, list[EpisodeRun] | None]:
    cfg = _apply_flags(load_config(args.config), args)
    cfg.run.screens_root = _screens_root(cfg, args.dataset)
    match = _match_config(cfg)
    run = build_run_config(cfg)
    run, _ = _with_recording(run, getattr(args, "record_script", None))
    episodes = load_dataset(args.dataset, cfg.run.screens_root)
    out.mkdir(parents=True, exist_ok=True)
    trace_path = out / "trace.jsonl"
    reuse = _split_trace_lines(trace_path) if getattr(args, "resume", False) else {}
    todo = [e for e in episodes if e.id not in reuse]
    runs = {r.episode_id: r for r in run_corpus(run, todo, workers=cfg.run.workers)}
    if getattr(args, "record_script", None):
        _dump_recordings(run, args.record_script)
    timings = getattr(args, "trace_timings", False)
    with open(trace_path, "w", encoding="utf-8", newline="\n") as fh:
        for e in episodes:
            lines = reuse.get(e.id) or run_lines(runs[e.id], timings)
            for line in lines:
                fh.write(line + "\n")
    failed = [r for r in runs.values() if not r.complete]
    try:
        report = evaluate(read_trace(trace_path), match)
    except EmptyTraceError:
        _err(f"no episode completed; partial traces kept in {trace_path}")
        return (EXIT_BACKEND if failed else EXIT_DATA), list(runs.values())
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True)
                                     + "\n", encoding="utf-8")
    print(report.table())
    if failed:
        _err(f"{len(failed)} episode(s) incomplete; partial traces kept in {trace_path}")
        return EXIT_BACKEND, list(runs.values())
    return EXIT_OK, list(runs.values())


def cmd_eval(args: argparse.Namespace) -> int:
    code, _ = _run_eval(args, Path(args.out))
    return code


def cmd_replay(args: argparse.Namespace) -> int:
    if args.backend_url or args.perception_url:
        raise ConfigError("replay runs against a mock script only")
    out = Path(args.out)
    code, _ = _run_eval(args, out)
    if code != EXIT_OK:
        return code
    expected = Path(args.trace).read_bytes()
    actual = (out / "trace.jsonl").read_bytes()
    if expected != actual:
        _err(f"replayed trace differs from {args.trace}")
        return EXIT_DATA
    print("replay matches recorded trace", file=sys.stderr)
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    match = _match_config(cfg)
    try:
        for path in args.traces:
            if not read_trace_lines(path):
                _err(f"{path}: trace is empty")
                return EXIT_DATA
        report = evaluate(read_trace(*args.traces), match)
    except (DatasetError, EmptyTraceError) as exc:
        _err(str(exc))
        return EXIT_DATA
    print(report.table())
    if args.json:
        Path(args.json).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
                                   encoding="utf-8")
    return EXIT_OK


def cmd_annotate(args: argparse.Namespace) -> int:
    cfg = _apply_flags(load_config(args.config), args)
    a = cfg.annotate
    for attr, key in (("candidates", "annotate.candidates"), ("temperature", "annotate.temperature"),
                      ("judge_url", "annotate.judge_url"), ("judge_model", "annotate.judge_model"),
                      ("judge_mock_script", "annotate.judge_mock_script"),
                      ("rubric_dir", "annotate.rubric_dir")):
        if getattr(args, attr, None) is not None:
            cfg.set(key, getattr(args, attr))
    cfg.run.screens_root = _screens_root(cfg, args.dataset)
    gen = _make_backend(cfg.backend, "generation")
    if gen is None:
        raise ConfigError("no generation backend: pass --backend-url/--backend-model "
                          "or --mock-script")
    if a.judge_mock_script:
        judge: Backend = MockBackend.from_file(a.judge_mock_script)
    elif a.judge_url:
        judge = OpenAICompatibleBackend(a.judge_url, a.judge_model or cfg.backend.model or "",
                                        os.environ.get(cfg.backend.api_key_env))
    else:
        judge = gen
    recorder = None
    if args.record_script:
        recorder = RecordingBackend(gen)
        judge = recorder if judge is gen else RecordingBackend(judge)
        gen = recorder
    episodes = load_dataset(args.dataset, cfg.run.screens_root)
    provenance = ProvenanceLog()
    annotator = Annotator(gen, judge, JudgeRubric.load(a.rubric_dir), a.candidates,
                          a.temperature, cfg.run.stm_capacity, cfg.run.screens_root,
                          PromptTemplates(cfg.run.prompt_dir) if cfg.run.prompt_dir
                          else PromptTemplates(), on_candidates=provenance)
    annotated = annotate_corpus(episodes, annotator, workers=cfg.run.workers)
    if recorder is not None:
        recorder.dump(args.record_script, merge=False)
        if isinstance(judge, RecordingBackend) and judge is not recorder:
            judge.dump(args.record_script, merge=True)
    save_annotated(annotated, args.out)
    prov_path = args.provenance or str(Path(args.out).with_suffix("")) + ".provenance.jsonl"
    provenance.dump(prov_path, [e.id for e in episodes])
    print(f"annotated {len(annotated)} episodes -> {args.out} (provenance: {prov_path})",
          file=sys.stderr)
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    episodes = make_corpus(args.seed, args.episodes, args.mean_steps)
    save_annotated(episodes, out / "episodes.jsonl")
    write_screens(episodes, out)
    if args.with_scripts:
        record_fixture_scripts(out, episodes)
    print(f"wrote {len(episodes)} episodes, {sum(len(e) for e in episodes)} steps to {out}",
          file=sys.stderr)
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chainmem",
                                     description="Memory-augmented GUI agent harness.",
                                     epilog="exit codes: 0 ok, 1 data, 2 config or I/O, 3 backend")
    parser.add_argument("--version", action="version", version=f"chainmem {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a corpus against the episode schema")
    _add_common(p)
    _add_dataset(p)
    p.add_argument("--stm-capacity", type=int)
    p.add_argument("--strict-screenshots", action="store_true",
                   help="treat missing screenshots as violations")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("annotate", help="generate judged memory annotations")
    _add_common(p)
    _add_dataset(p)
    _add_backend(p)
    p.add_argument("--out", required=True, help="annotated JSONL output")
    p.add_argument("--provenance", help="candidates/scores sidecar (default: next to --out)")
    p.add_argument("--candidates", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--judge-url")
    p.add_argument("--judge-model")
    p.add_argument("--judge-mock-script")
    p.add_argument("--rubric-dir")
    p.add_argument("--stm-capacity", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--prompt-dir")
    p.set_defaults(func=cmd_annotate)

    for name, func, helptext in (("eval", cmd_eval, "run the agent over a corpus and score it"),
                                 ("replay", cmd_replay, "rerun against a mock script and "
                                                        "compare with a recorded trace")):
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        _add_dataset(p)
        _add_backend(p)
        _add_run(p)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--trace-timings", action="store_true",
                       help="include per-stage timings in the trace")
        if name == "eval":
            p.add_argument("--resume", action="store_true",
                           help="keep complete episodes already in OUT/trace.jsonl")
        else:
            p.add_argument("--trace", required=True, help="recorded trace to compare with")
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="recompute metrics from trace files")
    p.add_argument("traces", nargs="+")
    p.add_argument("--config")
    p.add_argument("--json", help="also write the report JSON here")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth", help="write a synthetic corpus with screenshots")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--mean-steps", type=float, default=15.4)
    p.add_argument("--with-scripts", action="store_true",
                   help="also record oracle mock scripts for eval and annotate")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return EXIT_CONFIG
    except DatasetError as exc:
        _err(str(exc))
        return EXIT_DATA
    except (BackendError, StageError) as exc:
        _err(f"backend failure: {exc}")
        return EXIT_BACKEND
    except OSError as exc:
        _err(f"I/O error: {exc}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
