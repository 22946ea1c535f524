"""
Hypothesis generators for property-based testing.
Random latents, messages, return-estimator inputs, locality masks and
environment rollouts.
"""
from typing import Optional

import numpy as np
from hypothesis import strategies as st

import sys
sys.path.insert(0, '.')
from communication import Message


# =============================================================================
# LATENTS AND MESSAGES
# =============================================================================

@st.composite
def latent_indices(draw, n_groups: int = 32, n_classes: int = 32) -> tuple:
    """One class index per group"""
    return tuple(draw(st.lists(st.integers(0, n_classes - 1), min_size=n_groups, max_size=n_groups)))


@st.composite
def power_of_two_codec_shape(draw, max_groups: int = 40, max_log_classes: int = 6) -> tuple:
    """(n_groups, n_classes) with a power-of-two class count, including payloads that need padding"""
    n_groups = draw(st.integers(1, max_groups))
    n_classes = 2 ** draw(st.integers(1, max_log_classes))
    return n_groups, n_classes


@st.composite
def messages(draw, n_groups: int = 32, n_classes: int = 32, max_agents: int = 2**16) -> Message:
    return Message(
        agent_id=draw(st.integers(0, max_agents - 1)),
        step=draw(st.integers(0, 2**32 - 1)),
        z_indices=draw(latent_indices(n_groups, n_classes)),
        action=draw(st.integers(0, 255)),
        alive=draw(st.booleans()),
    )


# =============================================================================
# RETURN ESTIMATORS
# =============================================================================

@st.composite
def reward_sequences(draw, max_length: int = 8, max_agents: int = 3) -> dict:
    """
    Rewards [T, n], values [T+1, n] and discounts [T, n].

    Discounts mix gamma-like values with exact zeros so that termination
    inside the sequence is exercised.
    """
    T = draw(st.integers(1, max_length))
    n = draw(st.integers(1, max_agents))
    finite = st.floats(-10.0, 10.0, allow_nan=False, allow_infinity=False, width=32)
    rewards = np.array(draw(st.lists(finite, min_size=T * n, max_size=T * n)), dtype=np.float64).reshape(T, n)
    values = np.array(draw(st.lists(finite, min_size=(T + 1) * n, max_size=(T + 1) * n)),
                      dtype=np.float64).reshape(T + 1, n)
    discount = st.one_of(st.just(0.0), st.floats(0.5, 1.0, allow_nan=False))
    discounts = np.array(draw(st.lists(discount, min_size=T * n, max_size=T * n)), dtype=np.float64).reshape(T, n)
    lam = draw(st.floats(0.0, 1.0, allow_nan=False))
    return {"rewards": rewards, "values": values, "discounts": discounts, "lam": lam}


# =============================================================================
# MASKS
# =============================================================================

@st.composite
def locality_masks(draw, n_agents: int, symmetric: bool = False) -> np.ndarray:
    """Boolean [n, n] 'i hears j' matrix with a true diagonal"""
    bits = draw(st.lists(st.booleans(), min_size=n_agents * n_agents, max_size=n_agents * n_agents))
    mask = np.array(bits, dtype=bool).reshape(n_agents, n_agents)
    if symmetric:
        mask = mask | mask.T
    return mask | np.eye(n_agents, dtype=bool)


@st.composite
def action_masks(draw, n_actions: int, batch: Optional[int] = None) -> np.ndarray:
    """Masks with at least one available action per row"""
    rows = batch or 1
    out = np.zeros((rows, n_actions), dtype=bool)
    for r in range(rows):
        bits = draw(st.lists(st.booleans(), min_size=n_actions, max_size=n_actions))
        out[r] = bits
        if not out[r].any():
            out[r, draw(st.integers(0, n_actions - 1))] = True
    return out if batch else out[0]


# =============================================================================
# ROLLOUTS
# =============================================================================

seeds = st.integers(min_value=0, max_value=2**31 - 1)
