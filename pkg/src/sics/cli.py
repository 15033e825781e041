"""Command-line front end: ``sics build|check|bench|replay|gen``."""

from __future__ import annotations

import argparse
import json
import logging
import random
import sys
from pathlib import Path

from . import harness
from .gateway import GatewayError, parse_key
from .header import HeaderError, ruleset_to_json
from .scenario import (
    Scenario,
    ScenarioError,
    load_scenario,
    make_vocabulary,
    random_config,
    scenario_to_json,
    synthetic_rules,
)

log = logging.getLogger("sics")


def _emit(text: str, out: str | None):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _dump(obj, out: str | None):
    _emit(json.dumps(obj, indent=2, sort_keys=True) + "\n", out)


def _scenario(args) -> Scenario:
    if args.scenario:
        sc = load_scenario(args.scenario)
    elif getattr(args, "synthetic", None) is not None:
        sc = Scenario(harness.synthetic_config(args.synthetic, args.seed))
    else:
        raise ScenarioError("give --scenario FILE or --synthetic N")
    if args.key:
        sc.key = args.key
    if args.label_width:
        sc.label_width = args.label_width
    if getattr(args, "packets", None):
        sc.trace_count = args.packets
    if args.seed is not None and not args.scenario:
        sc.trace_seed = args.seed
    parse_key(sc.key)
    return sc


def cmd_build(args) -> int:
    sc = _scenario(args)
    system = harness.SicsSystem(sc.config, sc.key, sc.label_width)
    gw = system.gateway
    stats = {"boxes": len(sc.config.boxes), "chains": len(sc.config.requirements),
             "rules": sum(len(b.rules) for b in sc.config.boxes.values()),
             "predicates": len(gw.preds), "classes": len(gw.classifier.classes),
             "provision_records": gw.provision_records, "memory_bytes": gw.memory_bytes()}
    if args.timings:
        stats["timings_ms"] = gw.timings
    _dump(stats, args.out)
    return 0


def cmd_check(args) -> int:
    if args.fuzz:
        reports = harness.fuzz_equivalence(args.fuzz, args.seed or 0, args.packets or 10_000)
        out = {"scenarios": len(reports), "packets": sum(r.packets for r in reports),
               "mismatches": sum(len(r.mismatches) for r in reports),
               "failing": [i for i, r in enumerate(reports) if not r.ok]}
        _dump(out, args.out)
        return 0 if not out["mismatches"] else 1
    rep = harness.check_scenario(_scenario(args))
    _dump(harness.equivalence_to_json(rep, args.timings), args.out)
    return 0 if rep.ok else 1


def cmd_bench(args) -> int:
    sizes = [int(s) for s in str(args.sizes).split(",") if s.strip()]
    rows = harness.run_benchmarks(sizes, args.seed or 0)
    _emit(harness.rows_to_csv(rows), args.out)
    return 0


def cmd_replay(args) -> int:
    sc = _scenario(args)
    rep = harness.replay_scenario(sc, barrier=not args.unsafe)
    _dump(harness.replay_to_json(rep, timings=True), args.out)
    return 0 if rep.consistent else 1


def cmd_gen(args) -> int:
    rng = random.Random(args.seed or 0)
    if args.kind == "rules":
        vocab = make_vocabulary(rng, 8, 0.5)
        _dump(ruleset_to_json(synthetic_rules(rng, args.count, vocab)), args.out)
    elif args.kind == "scenario":
        cfg = random_config(rng, args.boxes, args.chains, args.count, patches=True)
        _dump(scenario_to_json(Scenario(cfg, trace_seed=rng.getrandbits(16))), args.out)
    else:
        sc = _scenario(args)
        system = harness.SicsSystem(sc.config, sc.key, sc.label_width)
        headers = system.trace(args.count, rng, sc.distribution)
        lines = "".join(json.dumps(list(sc.config.layout.unpack(h))) + "\n" for h in headers)
        _emit(lines, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file whose keys supply defaults for these flags")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--label-width", type=int, default=None, dest="label_width")
    common.add_argument("--key", help="AES-128 key as 32 hex digits")
    common.add_argument("--out", help="write output here instead of stdout")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sics", description="Label-based outsourced middlebox pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build", parents=[common], help="compose, classify and print stats")
    b.add_argument("--scenario")
    b.add_argument("--synthetic", type=int, help="use N synthetic rules instead of a scenario")
    b.add_argument("--timings", action="store_true")
    b.set_defaults(func=cmd_build)

    c = sub.add_parser("check", parents=[common], help="equivalence run against the plaintext pipeline")
    c.add_argument("--scenario")
    c.add_argument("--synthetic", type=int)
    c.add_argument("--fuzz", type=int, help="check N random scenarios instead")
    c.add_argument("--packets", type=int)
    c.add_argument("--timings", action="store_true")
    c.set_defaults(func=cmd_check)

    be = sub.add_parser("bench", parents=[common], help="benchmark CSV")
    be.add_argument("--sizes", default="0,1000,10000")
    be.set_defaults(func=cmd_bench)

    r = sub.add_parser("replay", parents=[common], help="replay a scenario's event script")
    r.add_argument("--scenario")
    r.add_argument("--synthetic", type=int)
    r.add_argument("--packets", type=int)
    r.add_argument("--unsafe", action="store_true", help="apply updates without the drain barrier")
    r.set_defaults(func=cmd_replay)

    g = sub.add_parser("gen", parents=[common], help="synthetic rulesets, scenarios or traces")
    g.add_argument("kind", choices=["rules", "scenario", "trace"])
    g.add_argument("--count", type=int, default=1000)
    g.add_argument("--boxes", type=int, default=5)
    g.add_argument("--chains", type=int, default=3)
    g.add_argument("--scenario", help="scenario to draw a trace from")
    g.add_argument("--synthetic", type=int)
    g.set_defaults(func=cmd_gen)
    return p


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            defaults = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read --config: {exc}")
        given = vars(parser.parse_args(argv))
        for k, v in defaults.items():
            k = k.replace("-", "_")
            if given.get(k) is None:
                setattr(args, k, v)
    return args


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ScenarioError, HeaderError, GatewayError, harness.HarnessError, ValueError) as exc:
        print(f"sics: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
