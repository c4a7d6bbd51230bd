"""One test per acceptance criterion; each prints a PASS/FAIL line."""

from __future__ import annotations

import itertools
import json
import math
import time

import numpy as np
import pytest
from scipy import ndimage

from conftest import cup, episode, open_scene, record
from typosim.agent import (ADJACENT_OBJECT, CORRECT_DELIVERY, DIRECT_STICKER, NAV_OBJECT, NAV_RECEPTACLE,
                           PHASES, PICK, PLACE, EpisodeTrace, run_episode)
from typosim.attack import FULL, PARTIAL, filter_attributable, placement_from_spec
from typosim.cli import main
from typosim.mirror import construction_of
from typosim.mitigations import MitigationConfig, MultiView, all_combinations
from typosim.perception import (REGIME_ALL, REGIME_CEILING, REGIME_DISTRACTOR, REGIME_INTENDED,
                                REGIME_NEVER)
from typosim.planner import dijkstra8, fmm_solve
from typosim.world import cell_center, wrap_pi

THETAS = "0.16,0.20,0.28,0.30,0.31"


def _files(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def cli_campaign(tmp_path_factory):
    out = tmp_path_factory.mktemp("campaign")
    t0 = time.perf_counter()
    code = main(["campaign", "--scenario", "mirror59", "--attack", "on", "--out", str(out)])
    return code, out, time.perf_counter() - t0


def test_c1_table_two(cli_campaign, capsys):
    code, out, elapsed = cli_campaign
    doc = json.loads((out / "report.json").read_text())
    last = (out / "report.txt").read_text().strip().splitlines()[-1].split()
    sizes = (len(doc["partition"]["full_success"]), len(doc["partition"]["partial_success"]))
    ok = (code == 0 and sizes == (10, 49)
          and doc["successes"] == {FULL: 7, PARTIAL: 33, "combined": 40}
          and doc["asr"] == {"full": round(7 / 10, 6), "partial": round(33 / 49, 6), "combined": round(40 / 59, 6)}
          and last == ["Combined", "59", "40", "67.8%"] and elapsed < 60.0)
    record("1 ASR table 7/10, 33/49, 40/59, < 60 s", ok, f"{' '.join(last)}, {elapsed:.1f} s")


def test_c2_mechanism_split(baseline_campaign, mirror_by_id):
    rep = baseline_campaign.report
    counts = rep.mechanism_counts
    adjacent_ok = True
    for r in rep.results:
        if r.mechanism != ADJACENT_OBJECT:
            continue
        spec = mirror_by_id[r.episode_id]
        tr = baseline_campaign.attack_traces[r.episode_id]
        primary = spec.scene.entity(r.picked_entity)
        crops = [d.crop for s in tr.steps for d in s.fired if d.crop.primary.instance_id == r.picked_entity]
        adjacent_ok &= primary.class_label == "knife" and bool(crops) and all(
            any(o.kind == "sticker" and leg > 0.5 for o, leg in c.background) for c in crops)
    ok = counts[DIRECT_STICKER] == 37 and counts[ADJACENT_OBJECT] == 3 and rep.successes() == 40 and adjacent_ok
    record("2 mechanism split 37 direct / 3 adjacent", ok,
           f"{counts[DIRECT_STICKER]} direct, {counts[ADJACENT_OBJECT]} adjacent")


def test_c3_regime_sweep(tmp_path, capsys):
    out = tmp_path / "sweep"
    code = main(["sweep", "--scenario", "mirror59", "--thetas", THETAS, "--out", str(out)])
    rows = json.loads((out / "report.json").read_text())["rows"]
    got = [r["regime"] for r in rows]
    want = [REGIME_ALL, REGIME_DISTRACTOR, REGIME_INTENDED, REGIME_CEILING, REGIME_NEVER]
    record("3 threshold regimes at " + THETAS, code == 0 and got == want, ", ".join(got))


def _in_fov(pose, point, fov=math.pi / 2, rng=5.0):
    dx, dy = point[0] - pose[0], point[1] - pose[1]
    return math.hypot(dx, dy) <= rng and abs(wrap_pi(math.atan2(dy, dx) - pose[2])) <= fov / 2


def _poisoned_centroid(tr, picked, target):
    """Centroid of the written cluster nearest the final target, from trace writes."""
    cells = {tuple(c) for s in tr.steps for c in s.writes
             if any(d.crop.primary.instance_id == picked for d in s.fired)}
    if not cells:
        return None
    arr = np.array(sorted(cells))
    lo = arr.min(axis=0)
    grid = np.zeros(tuple(arr.max(axis=0) - lo + 1), bool)
    grid[tuple((arr - lo).T)] = True
    lab, n = ndimage.label(grid, structure=np.ones((3, 3, 3)))
    best = None
    for k in range(1, n + 1):
        members = np.argwhere(lab == k) + lo
        xy = np.array([cell_center(int(c[0]), int(c[1])) for c in members]).mean(axis=0)
        d = math.hypot(xy[0] - target[0], xy[1] - target[1])
        if best is None or d < best[0]:
            best = (d, tuple(xy))
    return best[1]


def test_c4_persistence(baseline_campaign, mirror_by_id):
    long_gap, cone_clear = [], []
    all_cached = True
    for r in baseline_campaign.report.results:
        if not r.success:
            continue
        tr = baseline_campaign.attack_traces[r.episode_id]
        o = tr.outcome
        pick = next(s for s in tr.steps if s.action == "pick")
        centroid = _poisoned_centroid(tr, o.picked_entity, pick.target)
        # the pick-time navigation target is the stored centroid, not a live detection
        all_cached &= centroid is not None and math.dist(centroid, pick.target) < 1e-6
        if o.pick_from_cache_gap is not None and o.pick_from_cache_gap >= 10:
            spec = mirror_by_id[r.episode_id]
            pos = placement_from_spec(spec).position
            last = pick.step - o.pick_from_cache_gap
            between = [s for s in tr.steps if last < s.step < pick.step]
            # out of view: the sensor's visible set (cone, range, not fully blocked) lacks the sticker
            if all("sticker" not in s.detections for s in between) and \
                    all(s.target is not None and math.dist(s.target, centroid) < 1e-6 for s in between):
                long_gap.append(r.episode_id)
                if not any(_in_fov(s.pose, pos) for s in between):
                    cone_clear.append(r.episode_id)
    tube = sorted(e for e in long_gap if construction_of(e) == "tube")
    ok = len(long_gap) >= 5 and all_cached
    record("4 cache persistence: >= 5 gaps >= 10, all successes use the stored centroid", ok,
           f"{len(long_gap)} long-gap episodes ({len(tube)} tube, {len(cone_clear)} also outside the bare "
           f"view cone), cached target in every success")


def test_c5_no_effect_equivalence(baseline_campaign):
    failures = [r for r in baseline_campaign.report.results if not r.success]
    same = [r.episode_id for r in failures
            if baseline_campaign.attack_traces[r.episode_id].to_text()
            == baseline_campaign.pre_traces[r.episode_id].to_text()]
    record("5 19 designed failures bit-identical to pre-attack", len(failures) == 19 and len(same) == 19,
           f"{len(same)}/{len(failures)} identical")


def test_c6_fmm_oracle():
    t0 = time.perf_counter()
    worst_lo = worst_hi = -math.inf
    for seed in range(100):
        rng = np.random.default_rng(seed)
        blocked = rng.random((64, 64)) < 0.2
        src = (32, 32)
        blocked[src] = False
        T = fmm_solve(blocked, src).T
        D = dijkstra8(blocked, src)
        reach = np.isfinite(T)
        assert np.array_equal(reach, np.isfinite(D))
        ix, iy = np.nonzero(reach)
        euclid = np.hypot(ix - src[0], iy - src[1])
        worst_lo = max(worst_lo, float(np.max(euclid - T[reach])))
        worst_hi = max(worst_hi, float(np.max(T[reach] - D[reach])))
    hand = fmm_solve(np.zeros((3, 3), bool), (0, 0), diagonal=False).T[1, 1]
    elapsed = time.perf_counter() - t0
    ok = worst_lo <= 1e-6 and worst_hi <= 1e-6 and abs(hand - (1 + 1 / math.sqrt(2))) < 1e-9 and elapsed < 30.0
    record("6 FMM bounds on 100 grids, hand value, < 30 s", ok,
           f"max euclid excess {worst_lo:.2e}, max dijkstra excess {worst_hi:.2e}, {elapsed:.1f} s")


MULTIVIEW = MitigationConfig(multi_view=MultiView(3, 0.26))


def test_c7a_multiview(policy_campaigns, mirror_specs, baseline_campaign):
    run = policy_campaigns(MULTIVIEW)
    full = baseline_campaign.report.partition.full_success
    specs = {s.id: s for s in mirror_specs}
    benign = [run_episode(specs[e], None, MULTIVIEW).outcome.kinetic_class for e in full]
    ok = run.report.asr_combined == 0.0 and len(full) == 10 and all(k == CORRECT_DELIVERY for k in benign)
    record("7a multi-view ASR 0, 10 benign E_f still delivered", ok,
           f"ASR {run.report.asr_combined:.3f}, {benign.count(CORRECT_DELIVERY)}/10 delivered")


def test_c7b_anomaly(policy_campaigns):
    rep = policy_campaigns(MitigationConfig(anomaly_gate=True)).report
    direct = rep.mechanism_counts[DIRECT_STICKER]
    record("7b anomaly gate allows 0 direct sticker picks", direct == 0, f"{direct} direct picks")


def test_c7c_monotone_safety(policy_campaigns):
    combos = all_combinations()
    asr = {c.label(): policy_campaigns(c).report.asr_combined for c in combos}

    def flags(c):
        return (c.multi_view is not None, c.anomaly_gate, c.grasp_requery)

    bad = [(a.label(), b.label()) for a, b in itertools.product(combos, combos)
           if all(x <= y for x, y in zip(flags(a), flags(b))) and asr[b.label()] > asr[a.label()]]
    detail = ", ".join(f"{k} {v:.3f}" for k, v in asr.items())
    record("7c monotone safety over 8 combinations", len(combos) == 8 and not bad, detail)


def _synthetic(eid, kind):
    tr = EpisodeTrace(eid, "cup1", None, "none", finished=True)
    if kind == "full":
        tr.completed_phases, tr.picked_entity = PHASES, "cup1"
    elif kind == PLACE:
        tr.completed_phases, tr.first_failure, tr.picked_entity = PHASES[:3], PLACE, "cup1"
    elif kind == NAV_RECEPTACLE:
        tr.completed_phases, tr.first_failure, tr.picked_entity = PHASES[:2], NAV_RECEPTACLE, "cup1"
    elif kind == PICK:
        tr.completed_phases, tr.first_failure = PHASES[:1], PICK
    else:
        tr.completed_phases, tr.first_failure = (), NAV_OBJECT
    return tr


def test_c8_attributability_filter():
    kinds = ["full", PLACE, NAV_OBJECT, PICK, NAV_RECEPTACLE]
    sc = open_scene(entities=[cup()])
    specs, traces, want = [], {}, {k: [] for k in kinds}
    for i in range(20):
        eid = f"s{i:02d}"
        kind = kinds[(i * 3) % 5]
        specs.append(episode(sc, id=eid))
        traces[eid] = _synthetic(eid, kind)
        want[kind].append(eid)
    part = filter_attributable(specs, traces)
    ok = (part.full_success == want["full"] and part.partial_success == want[PLACE]
          and part.excluded == {k: want[k] for k in (NAV_OBJECT, PICK, NAV_RECEPTACLE)})
    record("8 filter partitions 20 synthetic traces", ok,
           f"{FULL} {len(part.full_success)}, {PARTIAL} {len(part.partial_success)}, "
           + ", ".join(f"{k} {len(v)}" for k, v in sorted(part.excluded.items())))


def test_c9_determinism(tmp_path, cli_campaign, capsys):
    commands = [
        ["run", "--scenario", "mirror59", "--episode", "e006", "--mitigations", "requery"],
        ["filter", "--scenario", "mirror59"],
        ["sweep", "--scenario", "mirror59", "--thetas", THETAS, "--seed", "3"],
    ]
    mismatched = []
    for n, argv in enumerate(commands):
        runs = []
        for rep in ("a", "b"):
            out = tmp_path / f"{n}{rep}"
            assert main(argv + ["--out", str(out)]) == 0
            runs.append(_files(out))
        for f in runs:
            f.pop("manifest.json")
        if runs[0] != runs[1]:
            mismatched.append(argv[0])
    _, first, _ = cli_campaign
    again = tmp_path / "campaign2"
    assert main(["campaign", "--scenario", "mirror59", "--attack", "on", "--out", str(again)]) == 0
    a, b = _files(first), _files(again)
    a.pop("manifest.json"), b.pop("manifest.json")
    if a != b:
        mismatched.append("campaign")
    record("9 byte-identical outputs across repeated runs", not mismatched,
           "run, filter, sweep, campaign" if not mismatched else "differs: " + ", ".join(mismatched))
