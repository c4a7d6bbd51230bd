from __future__ import annotations

import math

import pytest

from conftest import body, cup, open_scene, sticker
from typosim import perception as P
from typosim.world import Entity

KNIFE = Entity("knife1", "object", "knife", (0.8, 0.965), 0.02, 0.03, "blade-like")


def _knife_scene():
    return open_scene(entities=[sticker((0.5, 1.0)), KNIFE])


def _oracle_occlusion(eye, target, blocker):
    """Count sample rays passing within the blocker radius, by plain vector algebra."""
    ex, ey = eye
    tx, ty = target.position
    d = math.hypot(tx - ex, ty - ey)
    px, py = -(ty - ey) / d, (tx - ex) / d
    n = 0
    for k in range(9):
        t = -1 + k / 4
        qx, qy = tx + px * t * target.footprint_radius, ty + py * t * target.footprint_radius
        vx, vy = qx - ex, qy - ey
        L2 = vx * vx + vy * vy
        s = max(0.0, min(1.0, ((blocker.position[0] - ex) * vx + (blocker.position[1] - ey) * vy) / L2))
        dist = math.hypot(blocker.position[0] - (ex + s * vx), blocker.position[1] - (ey + s * vy))
        n += dist < blocker.footprint_radius
    return n / 9


def test_score_bands():
    assert P.goal_object_score(2.5, 0.0) == pytest.approx(0.29)
    assert P.goal_object_score(0.0, 0.0) == pytest.approx(0.30)
    assert P.goal_object_score(6.0, 0.0) == pytest.approx(0.28)
    assert P.goal_text_score(1.0) == pytest.approx(0.30)
    assert P.goal_text_score(0.0) == pytest.approx(0.26)
    assert P.other_score(0.0) == pytest.approx(0.17)
    assert P.other_score(0.999999) < 0.25 + 1e-6


def test_unit_hash_stable_and_seeded():
    a = P.unit_hash("book1", "cup", 0)
    assert 0.0 <= a < 1.0
    assert a == P.unit_hash("book1", "cup", 0)
    assert a != P.unit_hash("book1", "cup", 1)


def test_legibility_cosine():
    s = sticker((1.0, 1.0), normal=(1.0, 0.0))
    assert P.legibility(s, (2.0, 1.0), 0.0) == pytest.approx(1.0)
    assert P.legibility(s, (2.0, 2.0), 0.0) == pytest.approx(math.sqrt(0.5))
    assert P.legibility(s, (0.0, 1.0), 0.0) == 0.0
    assert P.legibility(s, (2.0, 1.0), 0.5) == pytest.approx(0.5)


def test_knife_occlusion_matches_oracle():
    sc = _knife_scene()
    eye = (2.0, 1.0)
    s = sc.entity("sticker")
    occ = P.occlusion_fraction(sc, eye, s)
    assert occ == pytest.approx(_oracle_occlusion(eye, s, KNIFE))
    assert occ == pytest.approx(4 / 9)


def test_knife_crop_fires_via_background_sticker():
    sc = _knife_scene()
    dets, decisions = P.sense(sc, body((2.0, 1.0), math.pi), "cup", seed=0)
    by = {d.crop.primary.instance_id: d for d in decisions}
    knife = by["knife1"]
    assert knife.crop.contains_text
    assert [o.instance_id for o, _ in knife.crop.background] == ["sticker"]
    assert knife.driving_entity == "sticker" and knife.fired
    assert knife.score == pytest.approx(0.26 + 0.04 * 5 / 9)
    assert by["sticker"].fired


def test_propose_respects_fov_and_range():
    sc = open_scene(entities=[cup((3.0, 1.0)), cup((0.5, 1.0), "cup2")])
    ids = {d.instance_id for d in P.propose(sc, body((1.0, 1.0), 0.0))}
    assert ids == {"cup1"}
    far = open_scene(width=7.0, entities=[cup((6.5, 1.0))])
    assert P.propose(far, body((1.0, 1.0), 0.0)) == []


def test_fully_occluded_not_proposed():
    sc = open_scene(entities=[cup((3.0, 1.0))], rects=[(2.0, 0.0, 2.05, 3.0)])
    assert P.propose(sc, body((1.0, 1.0), 0.0)) == []


def _crop(dets):
    return P.Crop(primary=dets[0][0], primary_legibility=dets[0][1], background=tuple(dets[1:]))


def _det(id_, kind="object", label="book", dist=1.0, text=None):
    return P.Detection(id_, 0.0, dist, (-0.1, 0.1), 0.0, label, kind, text)


def test_score_crop_ties_go_to_lower_id():
    d = P.score_crop(_crop([(_det("b"), 0.0), (_det("a", kind="sticker", label="sticker", text="cup"), 0.5)]),
                     "cup")
    assert d.score == pytest.approx(0.28)
    # exactly the threshold never fires
    sticker_only = P.score_crop(_crop([(_det("s", "sticker", "sticker", text="cup"), 0.5)]), "cup")
    assert sticker_only.score == 0.28 and not sticker_only.fired
    a = P.score_crop(_crop([(_det("z", label="cup"), 0.0), (_det("y", label="cup", dist=1.0), 0.0)]), "cup")
    assert a.driving_entity == "y"


def test_score_crop_rejects_empty_goal():
    with pytest.raises(ValueError):
        P.score_crop(_crop([(_det("a"), 0.0)]), "")


def test_threshold_strict():
    c = _crop([(_det("c", label="cup", dist=0.0), 0.0)])
    assert not P.score_crop(c, "cup", theta=0.30).fired
    assert P.score_crop(c, "cup", theta=0.2999).fired


def test_sweep_regimes():
    decisions = []
    for id_, label, dist in (("g", "cup", 1.0), ("o1", "book", 1.0), ("o2", "pen", 1.0)):
        decisions.append(P.score_crop(_crop([(_det(id_, label=label, dist=dist), 0.0)]), "cup"))
    rows = P.threshold_sweep(decisions, [0.16, 0.20, 0.28, 0.30, 0.31])
    regimes = [r.regime for r in rows]
    assert regimes[0] == P.REGIME_ALL
    assert regimes[2:] == [P.REGIME_INTENDED, P.REGIME_CEILING, P.REGIME_NEVER]
    with pytest.raises(ValueError):
        P.threshold_sweep(decisions, [])
    assert "regime" in P.format_sweep(rows)
