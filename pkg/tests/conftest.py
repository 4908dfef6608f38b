import numpy as np
import pytest

from cfrec import simulator
from cfrec.dataset import Interaction, leave_one_out_split
from cfrec.models import AttnSeqModel, MfModel


@pytest.fixture(scope="session")
def small_split():
    """Leave-one-out split of a small synthetic log (catalog large enough for
    the 100-negative protocol)."""
    world = simulator.gen_world(30, 160, d_star=8, scale=1.5, seed=7)
    policy = simulator.gen_policy(160, 1.0, 0.5, seed=7)
    log = simulator.gen_observational(world, policy, 20, seed=7)
    return leave_one_out_split(log, num_users=30, num_items=160, seed=7)


@pytest.fixture(scope="session")
def tiny_log():
    """One user with four positives and a sprinkle of negatives, one light user."""
    rows = [
        Interaction.from_rating(0, 0, 5, 1),
        Interaction.from_rating(0, 1, 4, 2),
        Interaction.from_rating(0, 2, 2, 3),
        Interaction.from_rating(0, 3, 5, 4),
        Interaction.from_rating(0, 4, 4, 5),
        Interaction.from_rating(1, 2, 5, 1),
    ]
    return rows


@pytest.fixture
def mf_model():
    return MfModel.init(6, 15, d=5, seed=3)


@pytest.fixture
def attn_model():
    return AttnSeqModel.init(6, 15, d=5, seed=4)
