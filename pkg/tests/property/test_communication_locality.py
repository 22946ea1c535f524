"""
Property-based tests for the communication block.

Property: an agent's feature never depends on agents outside its locality
mask, at any depth, and the single-agent inference path reproduces the
batched forward pass row for row.
"""
import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import sys
sys.path.insert(0, '.')
from communication import CommBlock
from core import bootstrap_latent
from tests.generators import locality_masks

LATENT = 8
ACTIONS = 3

torch.manual_seed(0)
BLOCK = CommBlock(LATENT, ACTIONS, d_model=16, n_layers=2, dropout=0.0).eval()


def _inputs(seed: int, n: int):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(n, LATENT, generator=g)
    a = torch.randint(0, ACTIONS, (n,), generator=g)
    return z, a


@pytest.mark.property
@settings(max_examples=60, deadline=None)
@given(data=st.data(), n=st.integers(2, 5), seed=st.integers(0, 2**16))
def test_unheard_agents_have_no_influence(data, n, seed):
    """
    Property: changing the input of agents outside mask[i] leaves agent i's feature unchanged.
    """
    mask = torch.from_numpy(data.draw(locality_masks(n)))
    z, a = _inputs(seed, n)
    with torch.no_grad():
        before = BLOCK(z, a, None, mask)
        z2, a2 = z.clone(), a.clone()
        g = torch.Generator().manual_seed(seed + 1)
        z2 += torch.randn(n, LATENT, generator=g)
        a2 = (a2 + 1) % ACTIONS
        for i in range(n):
            # Restore everything agent i can hear
            mixed_z = torch.where(mask[i].unsqueeze(-1), z, z2)
            mixed_a = torch.where(mask[i], a, a2)
            after = BLOCK(mixed_z, mixed_a, None, mask)
            # PROPERTY: locality invariance
            assert torch.allclose(before[i], after[i], atol=1e-6)


@pytest.mark.property
@settings(max_examples=60, deadline=None)
@given(data=st.data(), n=st.integers(2, 5), seed=st.integers(0, 2**16))
def test_single_agent_path_matches_batched_forward(data, n, seed):
    """
    Property: encode_agent on the heard rows, with bootstrap rows elsewhere, equals row i
    of the batched forward pass.
    """
    mask = torch.from_numpy(data.draw(locality_masks(n)))
    z, a = _inputs(seed, n)
    boot = bootstrap_latent(2, 4, (n,))
    with torch.no_grad():
        batched = BLOCK(z, a, None, mask)
        for i in range(n):
            heard = mask[i]
            rows_z = torch.where(heard.unsqueeze(-1), z, boot)
            rows_a = torch.where(heard, a, torch.zeros_like(a))
            single = BLOCK.encode_agent(rows_z, rows_a, heard, i)
            assert torch.allclose(single, batched[i], atol=1e-5)


@pytest.mark.property
@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 6), seed=st.integers(0, 2**16), perm_seed=st.integers(0, 2**16))
def test_without_positions_agents_are_interchangeable(n, seed, perm_seed):
    """
    Property: with no positional encoding and full connectivity, permuting the agents
    permutes the features.
    """
    torch.manual_seed(1)
    block = CommBlock(LATENT, ACTIONS, d_model=16, n_layers=2, dropout=0.0,
                      use_positional_encoding=False).eval()
    z, a = _inputs(seed, n)
    perm = torch.from_numpy(np.random.default_rng(perm_seed).permutation(n))
    with torch.no_grad():
        out = block(z, a)
        permuted = block(z[perm], a[perm])
    assert torch.allclose(out[perm], permuted, atol=1e-5)
