"""Command-line entry points: train, run, experiment, verify.

Config files are YAML with a `schema_version: 1` header and optional
sections (defaults apply to anything omitted):

    schema_version: 1
    train:     {seed, epochs, epsilon, learning_rate, c_target, itc,
                lambda_seed, hinge}
    pipeline:  {d_k, d_v, gate_temperature, mask_temperature, ...}
    scenario:  {seed, frames, channels, height, width, ...}   # see harness
    net:       {loss_rate, latency_ms, frame_period_ms, full_link_mbps}
    checkpoint: path      # written by train, read by run/experiment
    out_dir: path
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import fields

import numpy as np
import yaml

from .grids import Rng, new_feature_grid
from .harness import (EXPERIMENTS, HarnessError, Scenario, ScenarioConfig,
                      experiment_suite, generate_scenario,
                      scenario_config_from_yaml, run_episode,
                      write_episode_csv)
from .model import PipelineConfig, SelectionModel, soft_selection
from .netsim import NetworkConfig
from .protocol import (ChannelMask, Pose, decode_request, encode_request,
                       lossless_pack, lossless_unpack, quantize, dequantize)
from .training import (TrainConfig, grad_check, initial_lagrange_state,
                       load_checkpoint, proposition1_test, save_checkpoint,
                       train, write_metrics_csv)
from .uncertainty import quantile_threshold


def _load_config(path) -> dict:
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict) or doc.get("schema_version") != 1:
        raise HarnessError(f"{path}: expected schema_version: 1")
    return doc


def _section(doc: dict, name: str, cls):
    body = dict(doc.get(name) or {})
    known = {f.name for f in fields(cls)}
    unknown = set(body) - known
    if unknown:
        raise HarnessError(f"unknown {name} keys {sorted(unknown)}")
    if cls is NetworkConfig and isinstance(body.get("latency_ms"), list):
        body["latency_ms"] = tuple(body["latency_ms"])
    return cls(**body)


def _scenario_from_config(doc: dict) -> Scenario:
    body = dict(doc.get("scenario") or {})
    seed = int(body.pop("seed", 0))
    for key in ("agent_poses", "junctions"):
        if key in body:
            body[key] = tuple(tuple(v) if isinstance(v, list) else v
                              for v in body[key])
    return generate_scenario(seed, ScenarioConfig(**body))


def cmd_train(args) -> int:
    doc = _load_config(args.config)
    train_body = dict(doc.get("train") or {})
    c_target = float(train_body.pop("c_target", 0.04))
    itc = int(train_body.pop("itc", 5))
    lambda_seed = float(train_body.pop("lambda_seed", 0.01))
    cfg = TrainConfig(**train_body)
    pipeline = _section(doc, "pipeline", PipelineConfig)
    scenario = _scenario_from_config(doc)
    out_dir = doc.get("out_dir", ".")
    os.makedirs(out_dir, exist_ok=True)

    model = SelectionModel(scenario.cfg.channels, scenario.cfg.height,
                           scenario.cfg.width, pipeline, Rng(cfg.seed))
    frames = [scenario.frame_sample(t) for t in range(scenario.frames)]
    state = initial_lagrange_state(c_target, itc, lambda_seed)
    history, state = train(model, frames, cfg, state)
    write_metrics_csv(os.path.join(out_dir, "training_metrics.csv"), history)
    ckpt = doc.get("checkpoint", os.path.join(out_dir, "model.ckpt"))
    save_checkpoint(ckpt, model, state)
    last = history[-1]
    print(f"trained {cfg.epochs} epochs: task_loss={last.task_loss:.4f} "
          f"fraction={last.fraction_selected:.4f} lambda={last.lam:.4f}")
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_run(args) -> int:
    seed, cfg = scenario_config_from_yaml(args.scenario)
    scenario = generate_scenario(seed, cfg)
    model, _state = load_checkpoint(args.checkpoint)
    net = None
    if args.loss_rate or args.latency_ms:
        net = NetworkConfig(loss_rate=args.loss_rate,
                            latency_ms=args.latency_ms)
    os.makedirs(args.out, exist_ok=True)
    metrics = run_episode(scenario, model, net=net, seed=args.seed)
    path = os.path.join(args.out, "episode.csv")
    write_episode_csv(path, metrics)
    print(f"episode: {len(metrics.rows)} frames, "
          f"mean fraction {metrics.fractions().mean():.4f}, "
          f"iou dyn/stat {metrics.mean_iou_dynamic():.4f}/"
          f"{metrics.mean_iou_static():.4f}")
    print(f"metrics: {path}")
    return 0


def cmd_experiment(args) -> int:
    doc = _load_config(args.config)
    scenario = _scenario_from_config(doc)
    ckpt = doc.get("checkpoint")
    if not ckpt or not os.path.exists(ckpt):
        print(f"error: checkpoint {ckpt!r} not found (train first)",
              file=sys.stderr)
        return 2
    model, _state = load_checkpoint(ckpt)
    net = _section(doc, "net", NetworkConfig)
    out_dir = doc.get("out_dir", ".")
    summary = experiment_suite(args.name, scenario, model, out_dir,
                               base_net=net, seed=args.seed)
    print(f"experiment {args.name}: {summary['csv']}")
    if "correlation" in summary:
        print(f"adaptation correlation: {summary['correlation']}")
    return 0


def _verify_line(name: str, ok: bool, detail: str = "") -> bool:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f" ({detail})" if detail else ""))
    return ok


def cmd_verify(_args) -> int:
    ok = True
    rng = Rng(2024)

    # Gradient check on a small soft pipeline.
    worst = 0.0
    for s in range(3):
        sub = Rng(100 + s)
        model = SelectionModel(4, 3, 3, PipelineConfig(d_k=8, d_v=8), sub)
        g = sub.substream(9).generator
        scores = new_feature_grid(4, 3, 3, np.abs(g.normal(size=36)))
        feats = new_feature_grid(4, 3, 3, g.normal(size=36))

        def loss_fn(vec, model=model, scores=scores, feats=feats):
            saved = model.param_vector()
            model.set_param_vector(vec)
            out, grads = soft_selection(model, scores, feats)
            gvec = model.grad_vector(grads)
            model.set_param_vector(saved)
            return out, gvec

        worst = max(worst, grad_check(loss_fn, model.param_vector(), 1e-5))
    ok &= _verify_line("gradient check (3 seeds)", worst < 1e-4,
                       f"max rel err {worst:.2e}")

    # Epsilon-greedy bias scaling.
    rows = proposition1_test([0.6, -0.8, 0.4], [0.0, 0.5, 1.0], 100_000,
                             rng.substream(1))
    ok &= _verify_line(
        "bias scales by (1 - epsilon)", all(r.within_3se for r in rows),
        ", ".join(f"eps={r.epsilon}: {r.measured_bias_norm:.4f}"
                  f"~{r.predicted_bias_norm:.4f}" for r in rows))

    # Wire roundtrips.
    g = rng.substream(2).generator
    good = True
    for _ in range(2000):
        c = int(g.integers(1, 200))
        mask = ChannelMask(g.random(c) < 0.5)
        pose = Pose(float(g.normal()), float(g.normal()), float(g.normal()))
        msg = decode_request(encode_request(int(g.integers(0, 2**32)),
                                            int(g.integers(0, 2**63)),
                                            mask, pose))
        good &= msg.mask == mask
    ok &= _verify_line("request wire roundtrip (2000 msgs)", good)

    good = True
    for _ in range(500):
        n = int(g.integers(1, 400))
        bits = int(g.choice([1, 4, 8]))
        codes = g.integers(0, 1 << bits, n).astype(np.uint8)
        back = lossless_unpack(lossless_pack(codes, bits), n, bits)
        good &= np.array_equal(codes, back)
    ok &= _verify_line("lossless pack/unpack identity (500 arrays)", good)

    good = True
    for _ in range(500):
        vals = g.normal(size=int(g.integers(1, 300)))
        codes, scale, zero = quantize(vals, 8)
        good &= float(np.max(np.abs(dequantize(codes, scale, zero) - vals))) \
            <= scale / 2 + 1e-9
    ok &= _verify_line("quantize error bound (500 arrays)", good)

    good = True
    for _ in range(2000):
        n = int(g.integers(1, 60))
        vals = np.abs(g.normal(size=n))
        level = float(g.uniform(0.01, 1.0))
        grid = new_feature_grid(n, 1, 1, vals)
        mine = quantile_threshold(grid, level)
        srt = np.sort(vals)
        oracle = srt[min(max(int(np.ceil(level * n)), 1), n) - 1]
        good &= mine == oracle
    ok &= _verify_line("nearest-rank quantile oracle (2000 arrays)", good)

    print("verify:", "all checks passed" if ok else "FAILURES above")
    return 0 if ok else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="coopertrim",
        description="Adaptive feature-selection simulator for cooperative perception")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train thresholds and task head")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("run", help="run one episode with a trained checkpoint")
    p.add_argument("--scenario", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--loss-rate", type=float, default=0.0)
    p.add_argument("--latency-ms", type=float, default=0.0)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("experiment", help="run a named sweep")
    p.add_argument("name", choices=EXPERIMENTS)
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_experiment)

    p = sub.add_parser("verify", help="self-checks: gradients, bias, wire, quantiles")
    p.set_defaults(fn=cmd_verify)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
