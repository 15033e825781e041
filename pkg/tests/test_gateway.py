import random

import numpy as np
import pytest

from sics.cloud import Cloud
from sics.composer import BoxSpec, NetworkConfig
from sics.equivalence import compute_ecs
from sics.gateway import (
    FieldPool,
    FlowTable,
    Gateway,
    GatewayError,
    HeaderCipher,
    PaddingError,
    UnknownPoolIndex,
    UpdateTimeout,
    parse_key,
)
from sics.harness import SicsSystem
from sics.header import FIVE_TUPLE, ChainRequirement, MatchSpec, MiddleboxRule
from sics.reference import ReferencePipeline
from sics.scenario import load_scenario
from sics.wire import FRAME_OVERHEAD, MAGIC, TUNNEL_OVERHEAD, FramingError, SicsPacket, tunnel_frame

KEY = "000102030405060708090a0b0c0d0e0f"


def simple_config(extra_rules=()):
    fw = BoxSpec("fw", [MiddleboxRule(MatchSpec.parse({"dstPort": 23}), 10, "DENY"), *extra_rules], "ALLOW")
    mon = BoxSpec("mon", [MiddleboxRule(MatchSpec.parse({"proto": 17}), 1, "COUNT")], "ALLOW", stateful=True)
    reqs = [ChainRequirement(MatchSpec.parse({"srcIp": "10.0.0.0/8"}), ("fw", "mon"), 1)]
    return NetworkConfig(FIVE_TUPLE, {"fw": fw, "mon": mon}, reqs)


def h(src="10.1.2.3", sport=1000, dst="192.0.2.1", dport=80, proto=6):
    import ipaddress
    return FIVE_TUPLE.pack((int(ipaddress.IPv4Address(src)), sport, int(ipaddress.IPv4Address(dst)), dport, proto))


# -- cipher -----------------------------------------------------------------------------

def test_block_cipher_known_answer():
    c = HeaderCipher(parse_key(KEY), header_bits=128)
    pt = int("00112233445566778899aabbccddeeff", 16)
    assert c.encrypt(pt).hex() == "69c4e0d86a7b0430d8cdb78070b4c55a"
    assert c.decrypt(bytes.fromhex("69c4e0d86a7b0430d8cdb78070b4c55a")) == pt


def test_header_cipher_is_deterministic_and_injective():
    c = HeaderCipher(parse_key(KEY))
    rng = random.Random(0)
    hs = [rng.getrandbits(104) for _ in range(5000)]
    cts = c.encrypt_many(hs)
    assert cts == [c.encrypt(x) for x in hs]
    assert len(set(cts)) == len(set(hs))
    assert all(c.decrypt(ct) == x for ct, x in zip(cts, hs))


def test_padding_violation_detected():
    c = HeaderCipher(parse_key(KEY))
    raw = HeaderCipher(parse_key(KEY), header_bits=128)
    bad = raw.encrypt((5 << 24) | 1)
    with pytest.raises(PaddingError):
        c.decrypt(bad)


@pytest.mark.parametrize("key", ["00", "zz" * 16, "00" * 17])
def test_bad_keys(key):
    with pytest.raises(GatewayError):
        parse_key(key)


# -- wire format ------------------------------------------------------------------------

def test_frame_layout_byte_for_byte():
    ct = bytes(range(16))
    frame = SicsPacket(0x1234, 0x0007, ct, b"hello").to_bytes()
    assert frame == MAGIC + b"\x12\x34" + b"\x00\x07" + ct + b"\x00\x05" + b"hello"
    assert len(frame) == FRAME_OVERHEAD + 5 == 31
    base = tunnel_frame(ct, b"hello")
    assert (len(frame) - len(base)) * 8 == 32
    assert TUNNEL_OVERHEAD == 22


def test_gateway_frames_cost_exactly_32_bits():
    gw = Gateway(simple_config(), KEY, Cloud())
    rng = random.Random(1)
    for n in (0, 1, 100, 1400):
        payload = bytes(rng.getrandbits(8) for _ in range(n))
        x = rng.getrandbits(104)
        frame = gw.egress_encode(x, payload)
        assert len(frame) - len(tunnel_frame(gw.cipher.encrypt(x), payload)) == 4
        assert gw.ingress_decode(frame) == (x, payload)


@pytest.mark.parametrize("mutate", [
    lambda f: b"XICS" + f[4:],
    lambda f: f[:10],
    lambda f: f + b"x",
])
def test_framing_errors_dropped_and_counted(mutate):
    gw = Gateway(simple_config(), KEY, Cloud())
    frame = mutate(gw.egress_encode(h()))
    with pytest.raises(FramingError):
        gw.ingress_decode(frame)
    assert gw.receive(frame) is None
    assert gw.counters["decode_errors"] == 1


def test_unknown_pool_index():
    gw = Gateway(simple_config(), KEY, Cloud())
    pkt = SicsPacket.from_bytes(gw.egress_encode(h()))
    pkt.pool_index = 999
    with pytest.raises(UnknownPoolIndex):
        gw.ingress_decode(pkt.to_bytes())
    assert gw.receive(pkt.to_bytes()) is None


def test_cloud_counts_bad_frames():
    cloud = Cloud()
    gw = Gateway(simple_config(), KEY, cloud)
    cloud.inject(b"junk", 0)
    (d,) = list(cloud.delivered)
    assert d.frame is None and d.reason == "framing" and cloud.counters["framing"] == 1
    assert gw is not None


# -- flow table and field pool ----------------------------------------------------------

def test_flow_table_lifecycle():
    ft = FlowTable(idle_timeout=10)
    ft.insert(1, 5, 0.0)
    ft.insert(2, 5, 0.0)
    assert ft.lookup(1, 5.0) == 5 and ft.pinned() == {5}
    assert ft.expire(12.0) == 1          # flow 2 idled out; flow 1 was refreshed at 5.0
    assert ft.lookup(2, 12.0) is None
    assert ft.terminate(1) and not ft.terminate(1)
    assert ft.pinned() == set() and len(ft) == 0


def test_field_pool_indexes():
    pool = FieldPool()
    a = pool.transition(0, "srcIp", 7)
    b = pool.transition(a, "srcPort", 9)
    assert a != 0 and b not in (0, a)
    assert pool.transition(0, "srcIp", 7) == a
    assert pool.transition(b, "srcIp", 7) == b
    bits = FIVE_TUPLE.pack((1, 2, 3, 4, 5))
    assert FIVE_TUPLE.unpack(pool.restore(bits, b, FIVE_TUPLE)) == (7, 9, 3, 4, 5)
    assert pool.restore(bits, 0, FIVE_TUPLE) == bits
    maps = pool.reachable([("srcIp", 7), ("srcIp", 8)])
    assert maps[("srcIp", 8)][maps[("srcIp", 7)][0]] == pool.intern({"srcIp": 8})


# -- updates ------------------------------------------------------------------------------

def function_signature(gw, headers):
    """Per header: the set of registered predicate keys holding it, via the current classifier."""
    return [frozenset(gw.classifier.members[gw.classifier.classify(x)]) for x in headers]


def true_signature(gw, headers):
    e = gw.engine
    return [frozenset(k for k, p in gw.preds.items() if e.evaluate(p, x)) for x in headers]


def test_rule_insert_matches_recompute():
    gw = Gateway(simple_config(), KEY, Cloud())
    rule = MiddleboxRule(MatchSpec.parse({"dstPort": "8000-8999", "srcIp": "10.3.0.0/16"}), 20, "DENY")
    rep = gw.insert_rule("fw", rule)
    assert rep.records and rep.epoch == 1
    rng = random.Random(2)
    hs = [rng.getrandbits(104) for _ in range(3000)] + [h(src="10.3.1.1", dport=8080)] * 3
    assert function_signature(gw, hs) == true_signature(gw, hs)
    fresh = compute_ecs(gw.engine, gw.preds)
    assert len(fresh.classes) == len(gw.classifier.classes)


def test_noop_update_is_empty():
    gw = Gateway(simple_config(), KEY, Cloud())
    same = gw.cfg.boxes["fw"].rules[0]
    rep = gw.insert_rule("fw", same)
    assert rep.empty and rep.plan.empty and gw.epoch == 0


def test_unknown_targets_rejected():
    gw = Gateway(simple_config(), KEY, Cloud())
    any_rule = MiddleboxRule(MatchSpec.parse({}), 1, "DENY")
    with pytest.raises(GatewayError):
        gw.insert_rule("ghost", any_rule)
    with pytest.raises(GatewayError):
        gw.delete_rule("fw", any_rule)
    with pytest.raises(GatewayError):
        gw.delete_chain(ChainRequirement(MatchSpec.parse({}), ("fw",), 99))


def test_flow_keeps_label_across_update():
    cloud = Cloud()
    gw = Gateway(simple_config(), KEY, cloud)
    x = h(src="10.3.1.1", dport=8080)
    first = SicsPacket.from_bytes(gw.egress_encode(x)).label
    gw.insert_rule("fw", MiddleboxRule(MatchSpec.parse({"srcIp": "10.3.0.0/16"}), 20, "DENY"))
    again = SicsPacket.from_bytes(gw.egress_encode(x)).label
    assert again == first
    # a new flow in the same region gets the new configuration's label
    y = h(src="10.3.9.9", dport=8081)
    assert SicsPacket.from_bytes(gw.egress_encode(y)).label != first
    # the pinned flow still sees the old behavior end to end
    ref_old = ReferencePipeline(simple_config())
    ref_new = ReferencePipeline(gw.cfg)
    system = SicsSystem.__new__(SicsSystem)
    system.cloud, system.gateway, system.layout = cloud, gw, FIVE_TUPLE
    d = cloud.process_all([(0, gw.egress_encode(x)), (1, gw.egress_encode(y))])
    assert system.outcome(d[0]) == ref_old.run(FIVE_TUPLE.unpack(x))
    assert system.outcome(d[1]) == ref_new.run(FIVE_TUPLE.unpack(y))
    # ending the flow lets it pick up the new label
    gw.end_flow(x)
    assert SicsPacket.from_bytes(gw.egress_encode(x)).label == gw.classifier.classify(x)


def test_lost_acknowledgement_rolls_back():
    cloud = Cloud()
    gw = Gateway(simple_config(), KEY, cloud, ack_budget=10_000)
    before_labels = dict(gw.classifier.classes)
    before_cfg = gw.cfg
    cloud.lose_batches = 1
    rule = MiddleboxRule(MatchSpec.parse({"srcIp": "10.3.0.0/16"}), 20, "DENY")
    with pytest.raises(UpdateTimeout):
        gw.insert_rule("fw", rule)
    assert gw.classifier.classes == before_labels and gw.cfg is before_cfg and gw.epoch == 0
    assert gw.counters["update_timeouts"] == 1
    gw.insert_rule("fw", rule)
    rng = random.Random(3)
    hs = [rng.getrandbits(104) for _ in range(500)] + [h(src="10.3.1.1")]
    got = SicsSystem.__new__(SicsSystem)
    got.cloud, got.gateway, got.layout = cloud, gw, FIVE_TUPLE
    ref = ReferencePipeline(gw.cfg)
    assert got.run(hs) == [ref.run(FIVE_TUPLE.unpack(x)) for x in hs]


def test_nat_round_trip_restores_public_address():
    sc = load_scenario(__file__.rsplit("/", 2)[0] + "/scenarios/nat.json")
    system = SicsSystem(sc.config, sc.key)
    rng = random.Random(4)
    hs = system.trace(1000, rng)
    outs = system.run(hs)
    ref = ReferencePipeline(sc.config).run_batch(np.array([FIVE_TUPLE.unpack(x) for x in hs]))
    assert outs == ref
    rewritten = [o for o, x in zip(outs, hs) if o.header is not None and o.header[0] != FIVE_TUPLE.unpack(x)[0]]
    assert rewritten and {o.header[0] for o in rewritten} <= {0xCB00710A, 0xCB00710B}


def test_update_buffers_then_flushes():
    cloud = Cloud()
    gw = Gateway(simple_config(), KEY, cloud)
    gw.updating = True
    gw.send(h(), pid=7)
    assert not cloud.queue and len(gw.buffer) == 1
    gw.updating = False
    gw._flush()
    cloud.run()
    assert [d.pid for d in cloud.delivered] == [7]
