import os
import tempfile

from simtransfer import eap
from simtransfer.eap.config import apply_overrides, from_dict, to_dict

SMALL = [
    "env.max_steps=200",
    "ppo.rollout_steps_per_update=1024",
    "eap.pretrain_budget=50000",
    "eap.iterations=20",
    "eval.n_episodes=5",
]

root = tempfile.mkdtemp(prefix="simtransfer-")


def config(method, *overrides):
    base = eap.default_config("cartpole", method)
    return from_dict(
        apply_overrides(to_dict(base),
                        SMALL + [f"run.output_dir={root}"] + list(overrides)))


# Error-aware policy first: the baseline reuses its population and budget
eap_run = eap.run_training(config("eap"))
eap.run_evaluation(eap_run)

dr_run = eap.run_training(config("dr", f"baseline.match_run={eap_run}"))
eap.run_evaluation(dr_run)

comparison = eap.compare_runs([eap_run, dr_run], os.path.join(root, "compare"))
print(comparison.table)
print(comparison.audit)
print("figures written to", os.path.join(root, "compare"))
