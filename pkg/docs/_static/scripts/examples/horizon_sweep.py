import tempfile

from simtransfer import eap
from simtransfer.eap.ablation import ablation_frame
from simtransfer.eap.config import apply_overrides, from_dict, to_dict

base = from_dict(
    apply_overrides(to_dict(eap.default_config("cartpole", "eap")), [
        "env.max_steps=200",
        "ppo.rollout_steps_per_update=1024",
        "eap.pretrain_budget=50000",
        "eap.iterations=10",
    ]))

spec = eap.AblationSpec("horizon", values=[1, 3, 5, 8], seeds=[0, 1])
output = tempfile.mkdtemp(prefix="simtransfer-horizon-")
table = eap.run_ablation(spec, base, n_workers=2, output_dir=output)

print(ablation_frame(table).to_string(index=False))
print("curve written to", output + "/ablation.svg")
