"""Stop a run part way, save a checkpoint, and finish it later.

Resuming happens at round granularity. Against a deterministic backend the
resumed run ends in exactly the state an uninterrupted run would reach.
"""

import tempfile
from pathlib import Path

from jointprompt import Gateway, Hyperparams, Optimizer, OptimizerRunState
from jointprompt.checkpoint import checkpoint_load, checkpoint_save
from jointprompt.worlds import ChainWorld

world = ChainWorld()


def fresh_optimizer(state=None):
    gateway = Gateway(world.profiles(), handlers=world.handlers())
    state = state or OptimizerRunState.initial(world.graph(), world.initial_prompts(), Hyperparams(), 7)
    return Optimizer(state, world.pool(), gateway), gateway


with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "checkpoint.json"

    first, gateway = fresh_optimizer()
    first.run(max_steps=5)
    checkpoint_save(first.state, path, gateway_stats=gateway.stats())
    s = first.state
    print(f"paused at epoch {s.epoch}, agent #{s.agent_index}, {s.rounds_done} rounds into the visit")

    resumed, _ = fresh_optimizer(checkpoint_load(path))
    resumed.run()

    straight, _ = fresh_optimizer()
    straight.run()
    print("resumed run equals uninterrupted run:", resumed.state == straight.state)
