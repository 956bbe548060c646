"""The acceptance gate: one test per criterion, each printing its verdict line.

Shared artifacts live in the session-scoped SuiteContext from conftest, so
criteria reuse solves regardless of execution order.
"""

import json

import pytest

from kamflow import acceptance


def _run(ctx, cid):
    res = acceptance.ALL_CRITERIA[cid](ctx)
    print()
    print(res.line())
    assert res.passed, json.dumps(res.details, indent=2, default=str)
    return res


def test_criterion_01_pendulum_alpha_transition(ctx):
    _run(ctx, 1)


def test_criterion_02_pendulum_weak_kam(ctx):
    _run(ctx, 2)


def test_criterion_03_free_system(ctx):
    _run(ctx, 3)


def test_criterion_04_semiflow_identities(ctx):
    _run(ctx, 4)


def test_criterion_05_conley_identity(ctx):
    _run(ctx, 5)


def test_criterion_06_time1_fixed_points(ctx):
    _run(ctx, 6)


def test_criterion_07_nearly_integrable_scaling(ctx):
    _run(ctx, 7)


def test_criterion_08_aubry_barrier(ctx):
    _run(ctx, 8)


def test_criterion_09_singular_components_meet_crit(ctx):
    _run(ctx, 9)


def test_criterion_10_twist_suite(ctx):
    _run(ctx, 10)


def test_criterion_11_sing_near_aubry(ctx):
    _run(ctx, 11)
