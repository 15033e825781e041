import random

import numpy as np
import pytest

from sics.bdd import BddEngine
from sics.composer import BoxSpec, NetworkConfig, compose_config
from sics.header import FIVE_TUPLE, ChainRequirement, MatchSpec, MiddleboxRule
from sics.reference import Outcome, ReferencePipeline, first_match_index
from sics.scenario import random_config


def test_hand_built_walk():
    nat = BoxSpec("nat", [MiddleboxRule(MatchSpec.parse({"srcIp": "10.0.0.0/8"}), 5, "REWRITE(srcIp=1.2.3.4)")],
                  "ALLOW")
    fw = BoxSpec("fw", [MiddleboxRule(MatchSpec.parse({"srcIp": "1.2.3.4", "dstPort": 22}), 5, "DENY")], "ALLOW")
    reqs = [ChainRequirement(MatchSpec.parse({"dstPort": "0-1023"}), ("nat", "fw"), 2),
            ChainRequirement(MatchSpec.parse({"srcIp": "10.0.0.0/8", "dstPort": 8080}), ("nat", "fw"), 1)]
    ref = ReferencePipeline(NetworkConfig(FIVE_TUPLE, {"nat": nat, "fw": fw}, reqs))
    src = 10 << 24 | 5
    pub = 1 << 24 | 2 << 16 | 3 << 8 | 4
    rw = ("nat", "REWRITE(srcIp=1.2.3.4)")
    assert ref.run((src, 1, 9, 80, 6)) == Outcome((rw, ("fw", "ALLOW")), (pub, 1, 9, 80, 6))
    assert ref.run((src, 1, 9, 22, 6)) == Outcome((rw, ("fw", "DENY")), None)
    # forwarding after the rewrite uses the new header, which no longer matches the 10/8 chain
    assert ref.run((src, 1, 9, 8080, 6)) == Outcome((rw,), (pub, 1, 9, 8080, 6))
    assert ref.run((7, 1, 9, 8080, 6)) == Outcome((), (7, 1, 9, 8080, 6))


@pytest.mark.parametrize("seed", range(12))
def test_batch_equals_scalar(seed):
    rng = random.Random(seed)
    cfg = random_config(rng, 6, 4, 60, patches=True)
    ref = ReferencePipeline(cfg)
    H = np.array([[rng.getrandbits(f.width) for f in FIVE_TUPLE.fields] for _ in range(800)], dtype=np.int64)
    assert ref.run_batch(H) == [ref.run(tuple(int(v) for v in row)) for row in H]


def test_first_match_index_against_loop():
    rng = random.Random(3)
    cfg = random_config(rng, 1, 1, 300, transformers=False)
    rules = next(iter(cfg.boxes.values())).rules
    H = np.array([[rng.getrandbits(f.width) for f in FIVE_TUPLE.fields] for _ in range(500)], dtype=np.int64)
    got = first_match_index(rules, H, FIVE_TUPLE, chunk=8)
    for row, g in zip(H, got):
        vals = tuple(int(v) for v in row)
        want = next((i for i, r in enumerate(rules) if r.match.matches(vals)), len(rules))
        assert g == want


@pytest.mark.parametrize("seed", range(10))
def test_walk_agrees_with_composed_forwarding(seed):
    """Without rewrites or patches the reference's box order equals the composed table walk."""
    rng = random.Random(seed)
    cfg = random_config(rng, 6, 5, 30, transformers=False)
    engine = BddEngine(FIVE_TUPLE.width)
    net = compose_config(engine, cfg)
    ref = ReferencePipeline(cfg)
    for _ in range(400):
        x = rng.getrandbits(FIVE_TUPLE.width)
        out = ref.run(FIVE_TUPLE.unpack(x))
        boxes = [p.box for p in net.walk(x)]
        seen = [b for b, _ in out.hops]
        if out.header is None:
            assert seen == boxes[:len(seen)]
        else:
            assert seen == boxes
