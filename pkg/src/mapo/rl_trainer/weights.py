"""All scalar coefficients of the joint RL objective in one place.

alpha1..alpha3 weight the combined policy loss, beta_kl scales the
KL-to-reference penalty, beta1..beta3 weight the SFT-approximating
combination, pretrain_coef scales the generalization loss, and
gamma1..gamma3 weight the joint objective. The unreported combination
weights default to 1.0. The remaining values carry the published
hyperparameter defaults.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields


@dataclass
class LossWeights:
    alpha1: float = 1.0
    alpha2: float = 1.0
    alpha3: float = 1.0
    beta_kl: float = 1.0
    beta1: float = 1.0
    beta2: float = 1.0
    beta3: float = 1.0
    pretrain_coef: float = 1.0
    gamma1: float = 1.0
    gamma2: float = 1.0
    gamma3: float = 1.0
    discount_gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_epsilon: float = 0.2
    entropy_coef: float = 0.005
    value_coef: float = 0.5
    ppo_epochs: int = 20
    max_grad_norm: float = 0.5
    mini_batch_size: int = 32
    lambda_pos: float = 1.0
    lambda_neg: float = 1.0

    def validate(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if not math.isfinite(value):
                raise ValueError(f"{f.name} must be finite")
        if not 0.0 < self.discount_gamma <= 1.0:
            raise ValueError("discount_gamma must be in (0, 1]")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must be in [0, 1]")
        if self.clip_epsilon <= 0:
            raise ValueError("clip_epsilon must be > 0")
        if self.ppo_epochs < 1 or self.mini_batch_size < 1:
            raise ValueError("ppo_epochs and mini_batch_size must be >= 1")
