"""Build the checked-in synthetic fixture corpus and its mock scripts.

Layout written under ``out``::

    episodes.jsonl                 raw corpus (no memory annotations)
    screens/<episode>/step_NN.png  tiny placeholder screenshots
    annotate_script.jsonl          oracle replies for the annotation pipeline
    episodes_annotated.jsonl       corpus annotated from that script
    episodes_annotated.provenance.jsonl
    eval_script.jsonl              oracle replies for every eval configuration

Annotation and evaluation get separate scripts because the digest ignores
decoding settings: a compare prompt sampled three ways during annotation
has the same digest as its greedy twin during evaluation.
"""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

from .annotation import Annotator, JudgeRubric, ProvenanceLog, annotate_corpus
from .backend import RecordingBackend
from .episodes import Episode, save_annotated
from .orchestrator import ABLATIONS, RunConfig, run_corpus
from .synth import SyntheticOracle, make_corpus, write_screens

FIXTURE_SEED = 20250101
FIXTURE_EPISODES = 10
FIXTURE_MEAN_STEPS = 15.4


def record_fixture_scripts(out: str | Path, episodes: list[Episode]) -> list[Episode]:
    """Record oracle scripts for ``episodes`` and return the annotated corpus."""
    out = Path(out)
    oracle = SyntheticOracle(episodes)
    root = str(out)

    rec = RecordingBackend(oracle.backend())
    provenance = ProvenanceLog()
    annotator = Annotator(rec, rec, JudgeRubric.load(), screens_root=root,
                          on_candidates=provenance)
    annotated = annotate_corpus(episodes, annotator)
    rec.dump(out / "annotate_script.jsonl", merge=False)
    save_annotated(annotated, out / "episodes_annotated.jsonl")
    provenance.dump(out / "episodes_annotated.provenance.jsonl", [e.id for e in episodes])

    rec = RecordingBackend(oracle.backend())
    base = RunConfig(decision_backend=rec, perception_backend=rec, screens_root=root)
    run_corpus(base, episodes)
    for row in ABLATIONS:
        run_corpus(base.ablated(row), episodes)
    annotated_cfg = replace(base, memory_mode="annotated")
    run_corpus(annotated_cfg, annotated)
    for row in ABLATIONS:
        run_corpus(annotated_cfg.ablated(row), annotated)
    rec.dump(out / "eval_script.jsonl", merge=False)
    return annotated


def build_fixture_corpus(out: str | Path, seed: int = FIXTURE_SEED,
                         n_episodes: int = FIXTURE_EPISODES,
                         mean_steps: float = FIXTURE_MEAN_STEPS) -> list[Episode]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    episodes = make_corpus(seed, n_episodes, mean_steps)
    save_annotated(episodes, out / "episodes.jsonl")
    write_screens(episodes, out)
    record_fixture_scripts(out, episodes)
    return episodes
