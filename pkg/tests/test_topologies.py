from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snow.core import AUDIO, VIDEO
from snow.topologies import (
    CallError,
    CallPlan,
    Connection,
    ProtocolViolation,
    TopologyModel,
    add_party_multi,
    census,
    establish,
    golden_lines,
    hangup,
    start_call,
    new_setup,
    default_profiles,
)

GOLDEN = Path(__file__).parent / "golden"
M = TopologyModel
PEERS = "ABCDEFGHI"


def plan(model, n=3):
    return CallPlan("call-1", model, "A", tuple(PEERS[1:n]))


def test_census_three_party():
    want = {
        M.MESH: (3, {"A": 2, "B": 2, "C": 2}, 0),
        M.SFU: (3, {"A": 3, "B": 2, "C": 1}, 0),
        M.MCU: (3, {"A": 3, "B": 2, "C": 1}, 1),
        M.MCUTWO: (2, {"A": 2, "B": 1, "C": 1}, 2),
        M.MCUMULTI: (2, {"A": 2, "B": 1, "C": 1}, 1),
    }
    for model, (total, per_peer, merges) in want.items():
        c = census(establish(plan(model)))
        assert c.total == total, model
        assert c.per_peer_connections == per_peer, model
        assert c.merges["A"] == merges and c.merges["B"] == c.merges["C"] == 0, model


def test_mesh_encodes_local_video_twice_everywhere():
    assert census(establish(plan(M.MESH))).video_encodes == {"A": 2, "B": 2, "C": 2}


@settings(max_examples=7, deadline=None)
@given(st.integers(3, 9), st.integers(0, 1000))
def test_census_mcumulti_n_party(n, seed):
    call = establish(plan(M.MCUMULTI, n), seed=seed)
    c = census(call)
    assert c.total == n - 1
    assert c.per_peer_connections["A"] == n - 1
    assert all(c.per_peer_connections[p] == 1 for p in PEERS[1:n])
    assert c.merges == {p: (1 if p == "A" else 0) for p in PEERS[:n]}


@pytest.mark.parametrize("model", [M.MESH, M.SFU, M.MCU, M.MCUTWO])
def test_fixed_arity_models_reject_other_sizes(model):
    for n in (2, 4):
        with pytest.raises(CallError):
            establish(plan(model, n))


def test_mcumulti_party_cap():
    with pytest.raises(CallError):
        CallPlan("c", M.MCUMULTI, "A", tuple("BCDEFGHIJ")).check_arity()


def test_plan_rejects_initiator_among_others():
    with pytest.raises(CallError):
        CallPlan("c", M.MESH, "A", ("A", "B"))


@pytest.mark.parametrize("model", list(M))
def test_golden_trace(model):
    call = establish(plan(model), seed=1)
    want = (GOLDEN / f"{model.value.lower()}.trace").read_text().splitlines()
    assert golden_lines(call) == want


@pytest.mark.parametrize("model", list(M))
@pytest.mark.parametrize("seed", [0, 7, 99])
def test_golden_trace_seed_independent(model, seed):
    assert golden_lines(establish(plan(model), seed=seed)) == golden_lines(establish(plan(model), seed=1))


def test_establish_deterministic_with_times():
    a = [r.line() for r in establish(plan(M.SFU), seed=3).trace]
    b = [r.line() for r in establish(plan(M.SFU), seed=3).trace]
    assert a == b


def _records(call, kind):
    return [r for r in call.trace if r.kind == kind]


def _connected_at(call, label):
    return call.conn(label).times["connected"]


@pytest.mark.parametrize("model", [M.SFU, M.MCU])
def test_conn_c_waits_for_conn_b_media(model):
    call = establish(plan(model), seed=4)
    conn_c = call.conn("conn-C")
    assert conn_c.times["offered"] > _connected_at(call, "conn-B")


def test_mesh_gating_order():
    call = establish(plan(M.MESH), seed=4)
    ab, ac, cb = call.conn("conn-AB"), call.conn("conn-AC"), call.conn("conn-CB")
    assert ac.times["offered"] > ab.times["answered"]
    assert cb.times["offered"] >= ac.times["offered"]
    # B only accepted C's call because it had been told to expect it
    assert [o.discharged is not None for o in call.obligations] == [True, True]
    assert {(o.peer, o.kind, o.target) for o in call.obligations} == {
        ("B", "expect-call", "C"),
        ("C", "call-party", "B"),
    }


def test_mesh_rejects_unannounced_call():
    setup = new_setup(default_profiles("ABC"))
    call = start_call(plan(M.MESH), setup)
    stray = Connection("C-B#9", "C", "B", "stray", {"C": [], "B": []}, {})
    with pytest.raises(ProtocolViolation):
        call.procedure.accept("B", stray, {})


def test_obligation_discharged_twice_is_a_violation():
    call = establish(plan(M.MESH))
    with pytest.raises(ProtocolViolation):
        call.discharge("B", "expect-call", "C")


@pytest.mark.parametrize("model", [M.MCUTWO, M.MCUMULTI])
def test_no_renegotiation_after_last_answer(model):
    call = establish(plan(model, 3))
    sdp = [r for r in call.trace if r.kind in ("offer", "answer")]
    assert sdp[-1].kind == "answer"
    last = sdp[-1].t
    call.sim.run(call.sim.now + 5000)
    assert [r for r in call.trace if r.kind in ("offer", "answer") and r.t > last] == []


def _sees(call, peer):
    # let the last connection's media travel through every merge
    call.sim.run(call.sim.now + 1000)
    return call.received_composition(peer)


@pytest.mark.parametrize("model", list(M))
def test_everyone_sees_everyone_else(model):
    call = establish(plan(model))
    for p in "ABC":
        seen = {o for o, k in _sees(call, p) if k == VIDEO}
        assert seen >= set("ABC") - {p}, (model, p, seen)


@pytest.mark.parametrize("model", [M.SFU, M.MCU, M.MCUTWO])
def test_non_initiators_never_see_themselves(model):
    call = establish(plan(model))
    for p in "BC":
        assert {o for o, _ in _sees(call, p)} == set("ABC") - {p}


@given(st.integers(3, 9))
@settings(max_examples=7, deadline=None)
def test_mcumulti_self_view(n):
    call = establish(plan(M.MCUMULTI, n))
    everyone = set(PEERS[:n])
    for p in PEERS[1:n]:
        assert {o for o, k in _sees(call, p) if k == VIDEO} == everyone
        # echo-back: the shared merge carries the receiver's own audio
        assert (p, AUDIO) in _sees(call, p)
    m = next(iter(call.merges.values()))
    assert {o for o, _ in call.graph.composition_of(m.out_stream.id, call.sim.now)} == everyone


def test_audio_excludes_self_removes_echo():
    call = establish(plan(M.MCUMULTI, 4), audio_excludes_self=True)
    for p in "BCD":
        comp = _sees(call, p)
        assert (p, AUDIO) not in comp
        assert {o for o, k in comp if k == AUDIO} == set("ABCD") - {p}
        assert (p, VIDEO) in comp


def test_sfu_third_party_gets_four_tracks_mcu_two():
    sfu = establish(plan(M.SFU))
    mcu = establish(plan(M.MCU))
    assert [len(s.tracks) for s in sfu.received_streams("C")] == [4]
    assert [len(s.tracks) for s in mcu.received_streams("C")] == [2]
    assert mcu.graph.composition_of(mcu.received_streams("C")[0].id, mcu.sim.now) == {
        (o, k) for o in "AB" for k in (VIDEO, AUDIO)
    }


def test_sfu_conn_c_is_one_way():
    call = establish(plan(M.SFU))
    conn_c = call.conn("conn-C")
    assert conn_c.sends["B"] == []
    assert call.graph.composition_of(conn_c.remote["B"].id, call.sim.now) == {("C", VIDEO), ("C", AUDIO)}


def test_mcutwo_merge_contents():
    call = establish(plan(M.MCUTWO))
    m1, m2 = call.merges.values()
    now = call.sim.now
    assert {o for o, _ in call.graph.composition_of(m1.out_stream.id, now)} == {"A", "C"}
    assert {o for o, _ in call.graph.composition_of(m2.out_stream.id, now)} == {"A", "B"}


def test_add_party_to_mcumulti():
    call = establish(plan(M.MCUMULTI))
    add_party_multi(call, "D")
    call.sim.run()
    assert census(call).total == 3
    assert {o for o, k in _sees(call, "D") if k == VIDEO} == set("ABCD")
    with pytest.raises(CallError):
        add_party_multi(call, "D")
    with pytest.raises(CallError):
        add_party_multi(establish(plan(M.MCU)), "D")


def _parties(model, n):
    return PEERS[:n]


hangup_cases = [(m, 3, leaver) for m in M for leaver in "ABC"] + [(M.MCUMULTI, 5, leaver) for leaver in "ABE"]


@pytest.mark.parametrize("model,n,leaver", hangup_cases)
def test_hangup_continuation_rule(model, n, leaver):
    call = establish(plan(model, n), seed=2)
    t0 = call.sim.now
    hangup(call, leaver)
    call.sim.run(t0 + 2000)
    remaining = [p for p in PEERS[:n] if p != leaver]
    continues = leaver != "A" and len(remaining) >= 2
    assert (call.ended_at is None) == continues
    assert call.failed is None
    if not continues:
        assert call.open_connections() == []
        return
    assert all(not c.involves(leaver) for c in call.open_connections())
    # merges prune the leaver within one path latency
    lat = max(call.network.path_latency(a, b) for a in remaining for b in remaining if a != b)
    for p in remaining:
        seen = {o for o, _ in call.received_composition(p, at=t0 + lat + 1e-6)}
        assert leaver not in seen
        assert seen >= set(remaining) - {p}, (p, seen)


def test_hangup_unknown_party():
    with pytest.raises(CallError):
        hangup(establish(plan(M.MESH)), "Z")


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(list(M)), st.integers(0, 10_000))
def test_establish_never_fails(model, seed):
    call = establish(plan(model), seed=seed)
    assert call.failed is None and call.established_at is not None
    assert all(c.phase == "connected" for c in call.connections.values())
