import numpy as np
import pytest

from inforank.data import Dataset, Document, QueryGroup, SlotSpec, SynthConfig, generate_synthetic


def make_group(qid, labels, user=(0.0,), n_item=2, start_id=0):
    docs = tuple(
        Document(start_id + k, np.array([float(k % 3), 0.5 * k][:n_item]), int(y)) for k, y in enumerate(labels)
    )
    return QueryGroup(qid, np.asarray(user, dtype=np.float64), docs)


USER_SCHEMA = (SlotSpec("categorical", 2, "u0"),)
ITEM_SCHEMA = (SlotSpec("categorical", 3, "i0"), SlotSpec("real", 0, "i1"))


@pytest.fixture
def tiny_dataset():
    groups = (make_group(0, [0, 1, 2, 0]), make_group(1, [3, 0, 1], user=(1.0,), start_id=10),
              make_group(2, [0, 0, 0], start_id=20))
    return Dataset(groups, 4, USER_SCHEMA, ITEM_SCHEMA)


@pytest.fixture(scope="session")
def small_synth():
    cfg = SynthConfig(n_queries=40, docs_per_query=8, n_items=60)
    return generate_synthetic(cfg, 3)


# ---------------------------------------------------------------------------
# gradient-check instance shared by the training and acceptance tests

GRAD_SCHEMA = (SlotSpec("categorical", 3, "a"), SlotSpec("real", 0, "b"), SlotSpec("categorical", 4, "c"),
               SlotSpec("real", 0, "d"), SlotSpec("categorical", 6, "position"))


def gradcheck_instance(seed=1, batch=8, two_tower=True):
    """Random model (d=4, H=2, N=5 slots) with spread-out weights so the CMI term is active, plus a batch."""
    from inforank.model import init_params

    rng = np.random.default_rng(seed)
    X = np.stack([rng.integers(0, 3, batch), rng.normal(size=batch), rng.integers(0, 4, batch),
                  rng.normal(size=batch), rng.integers(1, 6, batch)], 1).astype(np.float64)
    c = rng.integers(0, 2, batch).astype(np.float64)
    o = np.maximum(c, rng.integers(0, 2, batch)).astype(np.float64)
    schema = GRAD_SCHEMA if two_tower else GRAD_SCHEMA[:-1]
    p = init_params(schema, dim=4, n_heads=2, two_tower=two_tower, seed=3)
    for k, v in p.values.items():
        is_bias = "/b" in k or k.startswith("b_") or k.startswith("real_b")
        p.values[k] = np.array(v * 2 + rng.normal(scale=0.1 if is_bias else 0.8, size=v.shape))
    return p, (X, c, o)


def finite_difference_errors(objective, params, grads, step=1e-5):
    """Per-parameter relative error ||a - n|| / max(||a||, ||n||, 1e-12) against central differences."""
    out = {}
    for k, v in params.values.items():
        num = np.zeros_like(v)
        it = np.nditer(v, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = v[i]
            v[i] = old + step
            fp = objective(params)
            v[i] = old - step
            fm = objective(params)
            v[i] = old
            num[i] = (fp - fm) / (2 * step)
        a = grads[k]
        out[k] = float(np.linalg.norm(a - num) / max(np.linalg.norm(a), np.linalg.norm(num), 1e-12))
    return out


# ---------------------------------------------------------------------------
# acceptance summary: one pass/fail line per criterion at the end of the run

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
