from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asdkit.dataset import RoleAssignment
from asdkit.errors import ConfigurationError
from asdkit.sampler import ROLE_ANOMALOUS, ROLE_NORMAL, ROLE_PSEUDO, BatchLayout, make_epoch


def roles_with(n_normal, n_pseudo, n_anomalous=0, n_contaminated=0):
    return RoleAssignment(
        target_type="t",
        normal_ids=[f"n{i}" for i in range(n_normal)],
        pseudo_anomalous_ids=[f"p{i}" for i in range(n_pseudo)],
        real_anomalous_ids=[f"a{i}" for i in range(n_anomalous)],
        contaminated_ids=[f"c{i}" for i in range(n_contaminated)],
        seed=0,
    )


class TestBatchLayout:
    def test_odd_batch_rejected(self):
        with pytest.raises(ConfigurationError):
            BatchLayout(7)

    def test_normal_slots(self):
        assert BatchLayout(128).normal_slots == 64


class TestMakeEpoch:
    def test_batch_count_matches_ceiling(self):
        # oracle: 1000 normal clips at 64 per batch -> ceil(1000/64) = 16
        roles = roles_with(1000, 50)
        batches = make_epoch(roles, 128, np.random.default_rng(0))
        assert len(batches) == 16

    def test_half_normal_half_pseudo_without_anomalies(self):
        roles = roles_with(200, 30)
        for batch in make_epoch(roles, 128, np.random.default_rng(1)):
            counts = Counter(role for _, role in batch)
            assert counts[ROLE_NORMAL] == 64
            assert counts[ROLE_PSEUDO] == 64
            assert ROLE_ANOMALOUS not in counts

    def test_single_anomaly_slot_when_pool_nonempty(self):
        roles = roles_with(200, 30, n_anomalous=1)
        for batch in make_epoch(roles, 128, np.random.default_rng(2)):
            counts = Counter(role for _, role in batch)
            assert counts[ROLE_NORMAL] == 64
            assert counts[ROLE_PSEUDO] == 63
            assert counts[ROLE_ANOMALOUS] == 1
            anomaly_ids = [cid for cid, role in batch if role == ROLE_ANOMALOUS]
            assert anomaly_ids == ["a0"]

    def test_epoch_covers_every_normal_clip(self):
        roles = roles_with(150, 10)
        batches = make_epoch(roles, 64, np.random.default_rng(3))
        normal_multiset = Counter(
            cid for batch in batches for cid, role in batch if role == ROLE_NORMAL
        )
        assert set(normal_multiset) == set(roles.normal_ids)
        excess = sum(normal_multiset.values()) - len(roles.normal_ids)
        assert 0 <= excess < 32

    def test_contaminated_clips_count_as_normal(self):
        roles = roles_with(60, 10, n_contaminated=4)
        batches = make_epoch(roles, 64, np.random.default_rng(4))
        seen = {cid for batch in batches for cid, role in batch if role == ROLE_NORMAL}
        assert {f"c{i}" for i in range(4)} <= seen

    def test_deterministic_given_seed(self):
        roles = roles_with(100, 20, n_anomalous=3)
        a = make_epoch(roles, 32, np.random.default_rng(7))
        b = make_epoch(roles, 32, np.random.default_rng(7))
        assert a == b

    def test_small_normal_pool_rejected(self):
        with pytest.raises(ConfigurationError):
            make_epoch(roles_with(10, 5), 64, np.random.default_rng(0))

    def test_empty_pseudo_pool_rejected(self):
        with pytest.raises(ConfigurationError):
            make_epoch(roles_with(100, 0), 64, np.random.default_rng(0))

    @given(
        n_normal=st.integers(min_value=8, max_value=400),
        n_pseudo=st.integers(min_value=1, max_value=50),
        n_anomalous=st.integers(min_value=0, max_value=5),
        batch_size=st.sampled_from([8, 16, 64, 128]),
        seed=st.integers(min_value=0, max_value=2**31 - 1),
    )
    @settings(max_examples=60, deadline=None)
    def test_batch_composition_invariants(self, n_normal, n_pseudo, n_anomalous, batch_size, seed):
        half = batch_size // 2
        if n_normal < half:
            return
        roles = roles_with(n_normal, n_pseudo, n_anomalous)
        batches = make_epoch(roles, batch_size, np.random.default_rng(seed))
        assert len(batches) == -(-n_normal // half)
        normal_multiset = Counter()
        for batch in batches:
            assert len(batch) == batch_size
            counts = Counter(role for _, role in batch)
            assert counts[ROLE_NORMAL] == half
            assert counts[ROLE_ANOMALOUS] == (1 if n_anomalous else 0)
            normal_multiset.update(cid for cid, role in batch if role == ROLE_NORMAL)
        assert set(normal_multiset) == set(roles.normal_ids)
        assert sum(normal_multiset.values()) - n_normal < half
