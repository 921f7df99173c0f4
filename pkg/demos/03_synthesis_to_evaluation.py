"""From sampled paths to curated, evaluated trajectories, fully offline.

Run with ``python3 demos/03_synthesis_to_evaluation.py``.
"""

from __future__ import annotations

import json

from kgwalk.config import load_config
from kgwalk.crw import sample_corpus
from kgwalk.curation import contamination_check, evaluate, split_by_rejection
from kgwalk.datasets import fixture_path
from kgwalk.gateway import StubGateway
from kgwalk.runtime import run_episode
from kgwalk.synth import run_synthesis

# %% Configuration drives the store, the stub gateway and the walk settings
cfg = load_config(fixture_path("case_study.yaml"))
store = cfg.build_store()
gateway = cfg.build_gateway()
toolbox = cfg.build_toolbox(store, gateway)
corpus = sample_corpus(store, cfg.walk_config(store), cfg.walk.n)
for p in corpus.paths:
    print("path:", " -> ".join(f"{s.head} [{s.relation}]" for s in p.steps), "->", p.answer)

# %% Synthesis: question, quality score, simulated tool feedback, thoughts
result = run_synthesis(corpus.paths, toolbox, gateway, cfg.synth_config())
print(f"emitted {result.emitted}, dropped {result.dropped}, quarantined {result.quarantined}")
for traj in result.trajectories():
    print("Q:", traj.question)
    print("   answers:", traj.final_answers, "quality:", traj.metadata.get("quality"))

# %% Rejection sampling keeps correct answers that the observations support
accepted, rejected = split_by_rejection(result.trajectories())
print(f"accepted {len(accepted)}, rejected {[d.reasons for _, d in rejected]}")

# %% Rollouts with the scripted policy, then EM, F1 and Pass@k
questions = [json.loads(l) for l in fixture_path("case_study.questions.jsonl").read_text().splitlines() if l.strip()]
runs = []
for q in questions:
    for r in range(4):
        runs.append(run_episode(toolbox, gateway, q["question"], q["topic_entities"], cfg.runtime_config(),
                                qid=q["qid"], gold_answers=q["answers"], metadata={"run": r}))
report = evaluate(runs, ks=(1, 2, 4))
print(json.dumps(report.aggregates, indent=2))

# %% Contamination screen against a held-out question list
# The held-out list contains the case-study question itself, so every
# synthesized question above is flagged; the unrelated one is not.
tests = [l for l in fixture_path("test_questions.txt").read_text().splitlines() if l and not l.startswith("#")]
synth = {t.qid: t.question for t in result.trajectories()}
synth["unrelated"] = "Which river flows past the ferry terminal at Penrith?"
report = contamination_check(StubGateway(), synth, {"heldout": tests})
print(report.render_table())
print("excluded:", report.excluded)
