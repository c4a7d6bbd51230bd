from __future__ import annotations

import math

import pytest

from typosim.attack import run_campaign
from typosim.mirror import MIRROR_PATH
from typosim.mitigations import NO_MITIGATIONS
from typosim.world import (AgentBody, Entity, EpisodeSpec, FLAT_PATCH, Receptacle, Scene,
                           load_scenario)


@pytest.fixture(scope="session")
def mirror_specs():
    return load_scenario(MIRROR_PATH)


@pytest.fixture(scope="session")
def mirror_by_id(mirror_specs):
    return {s.id: s for s in mirror_specs}


@pytest.fixture(scope="session")
def baseline_campaign(mirror_specs):
    return run_campaign(mirror_specs)


@pytest.fixture(scope="session")
def policy_campaigns(mirror_specs, baseline_campaign):
    """Campaign runs keyed by policy label, computed on first use."""
    cache = {NO_MITIGATIONS.label(): baseline_campaign}

    def get(policy):
        key = policy.label()
        if key not in cache:
            cache[key] = run_campaign(mirror_specs, policies=policy,
                                      pre_traces=baseline_campaign.pre_traces)
        return cache[key]
    return get


def open_scene(width=4.0, height=3.0, entities=(), rects=(), receptacles=None):
    if receptacles is None:
        receptacles = (Receptacle("table", "table", (3.5, 0.5)),)
    return Scene(width, height, tuple(rects), tuple(entities), tuple(receptacles), "t")


def cup(pos=(3.0, 2.0), id_="cup1"):
    return Entity(id_, "object", "cup", pos, 0.1, 0.04, "cup-like")


def sticker(pos, normal=(1.0, 0.0), text="cup", id_="sticker"):
    return Entity(id_, "sticker", text, pos, 0.0, 0.05, FLAT_PATCH, normal)


def body(pos=(1.0, 1.0), heading=0.0):
    return AgentBody(position=pos, heading=heading)


def episode(scene, start=(0.5, 1.5, 0.0), **kw):
    kw.setdefault("goal_descriptors", {"cup": "cup-like"})
    return EpisodeSpec(id=kw.pop("id", "t1"), scene=scene, goal_label="cup", goal_instance="cup1",
                       receptacle_id="table", start_pose=start, **kw)


HALF_PI = math.pi / 2


ACCEPTANCE_LINES: list[str] = []


def record(criterion: str, ok: bool, detail: str = "") -> None:
    """Note one acceptance verdict, print it, then fail the test if it did not hold."""
    line = f"{'PASS' if ok else 'FAIL'}  {criterion}" + (f"  ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
