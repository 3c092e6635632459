from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from tdsdvfs.costmodel import CommModel, CostModelError, KernelCost, message_duration, task_duration
from tdsdvfs.dag import TaskKind, TaskRef
from tdsdvfs.power import GEAR_TABLES

from .oracles import cholesky_loop_flops

TABLE = GEAR_TABLES["opteron-2218"]


def test_duration_definition():
    cost = KernelCost({TaskKind.FACTORIZE: 2.4e9})
    assert task_duration(cost, TaskRef.factorize(1), 2.4) == pytest.approx(1.0)
    assert task_duration(cost, TaskRef.factorize(1), 1.2) == pytest.approx(2.0)


def test_cholesky_factorize_b200():
    cost = KernelCost.for_factorization("cholesky", 200)
    assert cost.cycles(TaskRef.factorize(1)) == Fraction(200**3, 3)
    assert task_duration(cost, TaskRef.factorize(1), 1.0) == pytest.approx(2.667e-3, rel=1e-3)


@pytest.mark.parametrize("b", range(1, 9))
def test_factorize_flops_leading_term(b):
    # the loop count is b^3/3 plus lower-order terms b^2/2 + b/6
    assert cholesky_loop_flops(b) == Fraction(b**3, 3) + Fraction(b**2, 2) + Fraction(b, 6)


def test_kernel_counts():
    b = 4
    c = KernelCost.for_factorization("cholesky", b).cycles_per_block
    assert c == {TaskKind.FACTORIZE: Fraction(64, 3), TaskKind.SOLVE: 64, TaskKind.UPDATE1: 128, TaskKind.UPDATE2: 64}
    lu = KernelCost.for_factorization("lu", b).cycles_per_block
    qr = KernelCost.for_factorization("qr", b).cycles_per_block
    assert lu[TaskKind.FACTORIZE] == Fraction(128, 3) and qr[TaskKind.FACTORIZE] == 128
    for costs in (c, lu, qr):
        assert costs[TaskKind.UPDATE1] >= costs[TaskKind.UPDATE2]


def test_cost_validation():
    with pytest.raises(CostModelError):
        KernelCost({TaskKind.SOLVE: 0})
    with pytest.raises(CostModelError):
        KernelCost({TaskKind.SOLVE: 1}, memory_fraction=0.3)
    with pytest.raises(CostModelError):
        KernelCost({TaskKind.SOLVE: 1}).cycles(TaskRef.factorize(1))
    with pytest.raises(CostModelError):
        KernelCost.for_factorization("svd", 4)


@given(st.sampled_from(TABLE.gears))
def test_cycle_conservation(gear):
    cost = KernelCost.for_factorization("lu", 64)
    t = TaskRef.update1(3, 2, 1)
    assert task_duration(cost, t, TABLE.f_h) * TABLE.f_h == pytest.approx(task_duration(cost, t, gear.frequency) * gear.frequency)


def test_message_frequency_insensitive_without_cpu_share():
    comm = CommModel(cpu_bound_fraction=0.0)
    assert message_duration(comm, 1000, TABLE.f_h, TABLE) == message_duration(comm, 1000, TABLE.f_l, TABLE)


def test_message_startup_doubles_at_half_frequency():
    comm = CommModel(latency_startup=1e-5, cpu_bound_fraction=1.0)
    assert message_duration(comm, 0, TABLE.f_h / 2, TABLE) == pytest.approx(2e-5)


def test_message_payload_term():
    comm = CommModel(block_size=128)
    assert comm.bytes_per_block == 131072
    assert comm.bytes_per_block / comm.bytes_per_second == pytest.approx(1.048576e-3)


@given(st.floats(0, 1), st.integers(0, 10**7), st.integers(0, 10**7))
def test_message_monotone(frac, a, b):
    comm = CommModel(cpu_bound_fraction=frac)
    fs = sorted(g.frequency for g in TABLE.gears)
    d = [message_duration(comm, a, f, TABLE) for f in fs]
    assert all(x >= y for x, y in zip(d, d[1:]))
    lo, hi = sorted((a, b))
    assert message_duration(comm, lo, 2.2, TABLE) <= message_duration(comm, hi, 2.2, TABLE)


def test_comm_validation():
    with pytest.raises(CostModelError):
        CommModel(cpu_bound_fraction=1.5)
    with pytest.raises(CostModelError):
        message_duration(CommModel(), -1, 2.4, TABLE)
