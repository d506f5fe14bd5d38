"""Why feeding misalignment cases back to the optimizer matters.

In ``CoordinationWorld`` the upstream planner can win its own judgment by
polishing its output while giving the downstream solver nothing to work with.
Those samples are stored as misalignment cases and shown to the optimizer
again, marked as such. The scripted optimizer reacts to the mark by fixing
coordination. Switching the injection off leaves it polishing forever.
"""

from jointprompt import Gateway, Hyperparams, OptimizerRunState
from jointprompt.search import run
from jointprompt.worlds import CoordinationWorld


def planner_rates(misalignment_sampling: bool) -> list:
    world = CoordinationWorld()
    hp = Hyperparams(misalignment_sampling=misalignment_sampling)
    state = OptimizerRunState.initial(world.graph(), world.initial_prompts(), hp, rng_seed=0)
    _, records = run(state, world.pool(), Gateway(world.profiles(), handlers=world.handlers()))
    return [r["misalignment_rate"] for r in records if r["type"] == "round" and r["agent"] == "a1"]


def show(label, rates):
    print(f"{label:<12}", " ".join(f"{x:.2f}" for x in rates))


print("planner misalignment rate per optimization depth (1..9)")
show("injected", planner_rates(True))
show("ablated", planner_rates(False))
