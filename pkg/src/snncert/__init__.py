"""Certified robustness toolkit for leaky integrate-and-fire spiking networks."""

__version__ = "0.1.0"

from .attack import AttackConfig, AttackResult, attack_digital, attack_spike, evaluate
from .gradients import AdamState, GradientTape, Surrogate, backprop, loss_value, sgd_step
from .input_box import (SpikeInputBox, bound_digital, bound_spike,
                        bound_spike_batch, derive_seed, rng_for, sample_digital)
from .interval_bounds import IntervalBounds, run_intervals
from .linear_bounds import (backward_bounds, concretize, identity_spec,
                            is_certified, lower_bounds, margin_lower_bounds,
                            margin_spec)
from .network import (LifParams, Layer, Network, SimTrace, forward, init_network,
                      load_checkpoint, predict, rate_logits, save_checkpoint)
from .oracle import enumerate_box, monte_carlo_box, relaxation_grid_check
from .training import (EpochMetrics, TrainConfig, accuracy, eps_at, robust_loss,
                       train_natural, train_robust, verified_error)
