# move the user-facing API into the simtransfer.eap namespace
from .errors import (Error, ConfigurationError, ContractError, DimensionError,
                     NonFiniteError, ParityError, CheckpointError)
from .dynamics import (ParamSpec, DynamicsParams, PerturbationSpec,
                       EnvDescriptor, EnvInstance, get_descriptor,
                       override_descriptor, remap_split, integrate)
from .population import (EnvPopulation, sample_population, save_population,
                         load_population, population_hash)
from .networks import (FeedforwardNet, BottleneckNet, GaussianPolicyHead,
                       AdamState, forward, backward, gaussian_sample,
                       gaussian_mean, optimizer_step, clip_grad_norm,
                       finite_difference_gradients)
from .ppo import (Transition, RolloutBuffer, PPOConfig, PPOStats, PPOLearner,
                  compute_gae, clipped_surrogate, surrogate_objective,
                  ppo_update)
from .rollouts import (collect_rollouts, constant_tail_input)
from .error_prediction import (ErrorFnConfig, ErrorSample, ErrorDataset,
                               ErrorPredictor, predict_error, error_loss,
                               collect_error_data, train_error_fn)
from .eap import (EAPState, build_eap_state, pretrain_reference,
                  error_aware_input, generate_rollouts, refresh_error_fn,
                  train_eap)
from .baselines import (BaselineKind, BaselineState, baseline_test_input,
                        train_baseline)
from .evaluation import (PolicyBundle, evaluate_zero_shot, normalized_return,
                         estimate_return_bounds, aggregate_seeds,
                         compare_methods, budget_audit)
from .ablation import (AblationSpec, load_ablation_spec, run_ablation)
from .config import (ExperimentConfig, RngStreams, default_config, load_config,
                     dump_config)
from .experiment import (run_training, run_evaluation, run_experiment,
                         compare_runs)
