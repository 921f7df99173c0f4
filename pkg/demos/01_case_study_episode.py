"""Walk through one agent episode on the bundled 1946 World Series graph.

Run with ``python3 demos/01_case_study_episode.py``. Everything is offline:
the policy is a scripted stub that replays a fixed sequence of turns.
"""

from __future__ import annotations

from kgwalk.datasets import fixture_path, load_fixture
from kgwalk.gateway import StubGateway, StubScript
from kgwalk.runtime import run_episode, trajectory_to_json
from kgwalk.toolbox import Toolbox

# %% The graph and the two tools
store = load_fixture("case_study")
print(store.stats())
toolbox = Toolbox(store)

question = "Where is the home stadium of the team who won the 1946 World Series championship?"
rels = toolbox.get_relations("1946 World Series", question, k=5)
print("top relations by BM25 against the question:")
for row in rels.to_dict()["relations"]:
    print("  ", row)

triples = toolbox.get_triples("1946 World Series", ["sports.sports_championship_event.champion"])
print(triples.to_dict())

# %% A full think/act/observe episode
policy = StubGateway(StubScript.from_file(fixture_path("case_study.stub.yaml")))
traj = run_episode(toolbox, policy, question, ["1946 World Series"], gold_answers=["Busch Stadium"])
for i, turn in enumerate(traj.turns, 1):
    print(f"--- turn {i}")
    print(turn.agent_text())
    if turn.observation is not None:
        print(turn.observation)
print("final answers:", traj.final_answers, "truncated:", traj.truncated)

# %% Loss mask: the trainer learns only from agent text
data = traj.text.encode("utf-8")
for span in traj.loss_mask:
    snippet = data[span.start:span.end].decode("utf-8").strip().replace("\n", " ")
    print(f"{span.role:7s} [{span.start:5d}, {span.end:5d})  {snippet[:60]}")
target = sum(s.end - s.start for s in traj.loss_mask if s.role == "target")
print(f"{target} of {len(data)} bytes carry loss")

# %% One JSON line per trajectory on disk
print(trajectory_to_json(traj)[:200], "...")
