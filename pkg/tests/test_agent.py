from __future__ import annotations

import json
import math

import pytest

from conftest import cup, episode, open_scene
from typosim.agent import (ADJACENT_OBJECT, CORRECT_DELIVERY, DIRECT_STICKER, HIJACKED_DELIVERY,
                           MALICIOUS_TRANSPORT, NOT_APPLICABLE, PHASES, PICK_RADIUS, AttackPlacementError,
                           EpisodeTrace, IncompleteTraceError, classify_outcome, run_episode)
from typosim.attack import AttackPlacement, place_sticker, placement_from_spec
from typosim.mirror import construction_of
from typosim.mitigations import MitigationConfig


def test_episode_one_baseline(mirror_by_id):
    tr = run_episode(mirror_by_id["e001"])
    o = tr.outcome
    assert o.kinetic_class == CORRECT_DELIVERY
    assert o.completed_phases == PHASES and o.first_failure is None


def test_place_failure_episode(mirror_specs):
    spec = next(s for s in mirror_specs if s.place_fails)
    o = run_episode(spec).outcome
    assert o.first_failure == "Place" and o.picked_entity == spec.goal_instance
    assert o.completed_phases == PHASES[:3]


def test_path_sticker_hijacks_episode_one(mirror_by_id):
    spec = mirror_by_id["e001"]
    pl = place_sticker(spec, run_episode(spec), 0.5)
    o = run_episode(spec, pl).outcome
    assert (o.picked_entity, o.kinetic_class, o.mechanism) == ("sticker", HIJACKED_DELIVERY, DIRECT_STICKER)


def test_traces_are_deterministic(mirror_by_id):
    spec = mirror_by_id["e001"]
    pl = placement_from_spec(spec)
    assert run_episode(spec, pl).to_text() == run_episode(spec, pl).to_text()


def test_trace_invariants(baseline_campaign):
    for tr in list(baseline_campaign.attack_traces.values()) + list(baseline_campaign.pre_traces.values()):
        steps = [s.step for s in tr.steps]
        assert steps == sorted(set(steps))
        assert tr.completed_phases == PHASES[:len(tr.completed_phases)]
        assert sum(s.action == "pick" for s in tr.steps) <= 1
        lines = tr.log_lines()
        assert "outcome" in json.loads(lines[-1])
        for line in lines[:-1]:
            rec = json.loads(line)
            for d in rec["decisions"]:
                assert len(d["score"].split(".")[1]) == 4


def test_snap_pick_needs_radius_and_view(mirror_specs, baseline_campaign):
    specs = {s.id: s for s in mirror_specs}
    for eid, tr in baseline_campaign.attack_traces.items():
        if tr.picked_entity is None:
            continue
        step = next(s for s in tr.steps if s.action == "pick")
        ent = specs[eid].scene.entity(tr.picked_entity) if tr.picked_entity != "sticker" \
            else placement_from_spec(specs[eid])
        pos = ent.position
        assert math.hypot(pos[0] - step.pose[0], pos[1] - step.pose[1]) <= PICK_RADIUS + 1e-9
        assert tr.picked_entity in step.detections


def test_invalid_attack_rejected(mirror_by_id):
    spec = mirror_by_id["e001"]
    with pytest.raises(AttackPlacementError):
        run_episode(spec, AttackPlacement("e001", "cup", (0.3, 0.3), (1.0, 0.0)))  # inside a wall
    with pytest.raises(AttackPlacementError):
        run_episode(spec, AttackPlacement("e001", "cup", (9.0, 0.3), (1.0, 0.0)))


def test_open_scene_explores_to_goal():
    sc = open_scene(width=4.0, height=3.0, entities=[cup((3.2, 2.5))], rects=[(2.0, 0.0, 2.05, 1.8)])
    o = run_episode(episode(sc, start=(0.5, 0.5, 3.14))).outcome
    assert o.kinetic_class == CORRECT_DELIVERY


def test_unreachable_goal_fails_object_navigation():
    sc = open_scene(width=4.0, height=3.0, entities=[cup((3.2, 2.5))], rects=[(2.0, 0.0, 2.05, 3.0)])
    o = run_episode(episode(sc, start=(0.5, 0.5, 0.0), max_steps=200)).outcome
    assert o.first_failure == "NavigateToObject" and o.picked_entity is None


def test_classify_requires_finished_trace(mirror_by_id):
    with pytest.raises(IncompleteTraceError):
        classify_outcome(EpisodeTrace("x", "cup1", None, "none"), mirror_by_id["e001"])


def test_knife_outcome(mirror_specs, baseline_campaign):
    knife = [s for s in mirror_specs if construction_of(s.id) == "knife" and s.place_fails][0]
    tr = baseline_campaign.attack_traces[knife.id]
    o = classify_outcome(tr, knife, placement_from_spec(knife))
    assert (o.picked_entity, o.kinetic_class, o.mechanism) == ("knife1", MALICIOUS_TRANSPORT, ADJACENT_OBJECT)


def test_mechanism_iff_wrong_pick(baseline_campaign, mirror_by_id):
    for eid, tr in baseline_campaign.attack_traces.items():
        o = tr.outcome
        wrong = o.picked_entity is not None and o.picked_entity != mirror_by_id[eid].goal_instance
        assert (o.mechanism != NOT_APPLICABLE) == wrong


def test_requery_abort_invalidates_and_never_repicks(mirror_specs):
    spec = next(s for s in mirror_specs if construction_of(s.id) == "tube")
    tr = run_episode(spec, placement_from_spec(spec), MitigationConfig(grasp_requery=True))
    aborts = [s.step for s in tr.steps if s.action == "abort_pick"]
    assert aborts
    later = [s for s in tr.steps if s.step > aborts[0]]
    # no fresh commit of the sticker, so it is never picked
    assert not any(v[0] == "sticker" and v[1] == "Commit" for s in later for v in s.verdicts)
    assert tr.picked_entity == spec.goal_instance
