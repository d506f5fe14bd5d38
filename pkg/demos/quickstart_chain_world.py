"""Optimize a two-agent chain against a scripted world with known prompt qualities.

Every backend role (agents, optimizer, judge) is played by ``ChainWorld``, so
this runs offline in well under a second. At the end we compare the found
prompt pair with a brute-force search over all 64 pairs.
"""

from jointprompt import Gateway, Hyperparams, OptimizerRunState
from jointprompt.search import run
from jointprompt.worlds import ChainWorld

world = ChainWorld()
gateway = Gateway(world.profiles(), handlers=world.handlers())

# Start from version 0 of each agent's prompt, with the default schedule:
# 3 epochs, 3 rounds per visit, beam width 2.
state = OptimizerRunState.initial(world.graph(), world.initial_prompts(), Hyperparams(), rng_seed=0)
final, records = run(state, world.pool(), gateway)

print("anchor changes, round by round:")
for r in records:
    if r["anchor_changed"]:
        version = world.parse_prompt(r["anchor_prompt"])[1]
        print(f"  epoch {r['epoch']} {r['type']:<7} {r['agent']} -> {version}")

found = final.prompt_config
best = world.exhaustive_optimum()
print("found    :", {a: world.parse_prompt(p)[1] for a, p in found.items()})
print("optimum  :", {a: world.parse_prompt(p)[1] for a, p in best.items()})
print("quality  :", world.config_quality(found.to_dict()), "of", world.config_quality(best.to_dict()))
print("backend calls:", gateway.total_backend_calls())
