"""``crrec`` command line: ingest, pretrain, train-crr, evaluate, synth, verify.

Exit codes: 0 success, 1 verification failure, 2 config error, 3 data
error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint
from .config import RunConfig, load_config, resolve_output, write_manifest
from .crr import CURVE_FIELDS as CRR_CURVE_FIELDS
from .crr import CrrTrainer, make_critic
from .data import Dataset, ingest, parse_log, write_log
from .errors import ConfigError, CrrecError, DataError
from .metrics import evaluate_policy, write_sample_csv
from .networks import PolicyNetwork, load_network, save_network
from .oracle import AffineRule, generate_synthetic_sessions, optimal_policy, random_mdp
from .pretrain import CURVE_FIELDS as PRETRAIN_CURVE_FIELDS
from .pretrain import export_embeddings, pretrain, write_curve
from .substrate import set_threads
from .verify import SUITES, run_suite

log = logging.getLogger("crrec")


def _add_common(p, data=True):
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config field (repeatable)")
    p.add_argument("--seed", type=int, help="seed for every stage (overrides the config)")
    if data:
        p.add_argument("--data", required=True, help="processed dataset directory")
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="crrec", description=__doc__.splitlines()[0])
    ap.add_argument("--threads", type=int, help="cap intra-op threads; 1 gives bitwise-deterministic runs")
    ap.add_argument("--log-level", default="INFO")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="raw CSV log -> processed transitions + catalog")
    _add_common(p, data=False)
    p.add_argument("--in", dest="input", help="raw ratings or sessions CSV")

    p = sub.add_parser("pretrain", help="stage 1 next-item prediction")
    _add_common(p)

    p = sub.add_parser("train-crr", help="stage 2 CRR")
    _add_common(p)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--init", help="stage-1 policy checkpoint")
    g.add_argument("--no-init", action="store_true", help="random initialisation (CRR-only)")
    p.add_argument("--resume", action="store_true", help="continue from OUT/state.ckpt if present")

    p = sub.add_parser("evaluate", help="HR@10 / NDCG@10 report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("test", "valid", "train"), default="test")
    p.add_argument("--pool", choices=("rand", "all", "both"), default="both")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--samples", help="optional per-sample rank CSV path")

    p = sub.add_parser("synth", help="synthetic generators")
    p.add_argument("--kind", choices=("sessions", "tabular"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--items", type=int, default=200)
    p.add_argument("--actors", type=int, default=2000)
    p.add_argument("--length", type=int, default=20)
    p.add_argument("--noise", type=float, default=0.2)
    p.add_argument("--schema", choices=("sessions", "ratings"), default="sessions")
    p.add_argument("--purchase-prob", type=float, default=0.1)
    p.add_argument("--mult", type=int, default=7)
    p.add_argument("--shift", type=int, default=3)
    p.add_argument("--states", type=int, default=5)
    p.add_argument("--actions", type=int, default=4)
    p.add_argument("--gamma", type=float, default=0.9)

    p = sub.add_parser("verify", help="run an oracle/property suite")
    p.add_argument("--suite", choices=tuple(SUITES) + ("all",), required=True)
    return ap


def _config(args) -> RunConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides += [f"run.seed={args.seed}", f"pretrain.seed={args.seed}", f"crr.seed={args.seed}"]
    return load_config(args.config, overrides)


def _require(path, what):
    if not Path(path).exists():
        raise DataError(f"{what} not found", location=str(path))
    return Path(path)


def cmd_ingest(args, cfg: RunConfig) -> int:
    src = args.input or cfg.data.input
    if not src:
        raise ConfigError("no input log given (--in or data.input)", field="data.input")
    _require(src, "input log")
    out = resolve_output(args.out)
    records = parse_log(src, cfg.data.schema)
    schema = "sessions" if isinstance(records[0].feedback, str) else "ratings"
    ds = ingest(records, cfg.data.window, cfg.data.reward_spec(schema), cfg.data.split_spec,
                cfg.data.emit_cold_start)
    ds.save(out)
    write_manifest(out, "ingest", cfg, {"input": src})
    print(f"items {ds.n_items} train {len(ds.train)} valid {len(ds.valid)} test {len(ds.test)}")
    return 0


def _load_dataset(path) -> Dataset:
    return Dataset.load(_require(path, "dataset directory"))


def _new_policy(cfg: RunConfig, ds: Dataset, seed: int) -> PolicyNetwork:
    torch.manual_seed(seed)
    n = cfg.network
    return PolicyNetwork(ds.n_items, ds.window, n.dim, n.n_blocks, n.n_heads, cfg.pretrain.dropout,
                         n.head_layers)


def cmd_pretrain(args, cfg: RunConfig) -> int:
    ds = _load_dataset(args.data)
    out = resolve_output(args.out)
    out.mkdir(parents=True, exist_ok=True)
    policy = _new_policy(cfg, ds, cfg.pretrain.seed)
    res = pretrain(policy, ds.train, ds.valid, cfg.pretrain, ds.history())
    save_network(out / "policy.ckpt", res.policy,
                 {"best_epoch": res.best_epoch, "best_val_hr10": res.best_hr10})
    checkpoint.save_checkpoint(out / "embeddings.ckpt", {"item_emb": export_embeddings(res.policy)},
                               {"n_items": ds.n_items})
    write_curve(out / "curve.csv", res.curve, PRETRAIN_CURVE_FIELDS)
    write_manifest(out, "pretrain", cfg, {"data": args.data})
    print(f"best epoch {res.best_epoch} val HR@10 {res.best_hr10:.4f}")
    return 0


def _load_policy(path, ds: Dataset) -> PolicyNetwork:
    net, _ = load_network(_require(path, "checkpoint"))
    if not isinstance(net, torch.nn.Module) or not hasattr(net, "n_items"):
        raise DataError("not a policy checkpoint", location=str(path))
    if net.n_items != ds.n_items or net.window != ds.window:
        raise DataError(f"checkpoint is for {net.n_items} items / window {net.window}, dataset has "
                        f"{ds.n_items} / {ds.window}", location=str(path))
    return net


def cmd_train_crr(args, cfg: RunConfig) -> int:
    ds = _load_dataset(args.data)
    out = resolve_output(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.no_init:
        policy = _new_policy(cfg, ds, cfg.crr.seed)
        inputs = {"data": args.data}
    else:
        policy = _load_policy(args.init, ds)
        inputs = {"data": args.data, "init": args.init}
    c = cfg.critic
    critic = make_critic(policy, c.hidden, c.n_layers, c.head_layers, c.dropout, cfg.crr.seed)
    trainer = CrrTrainer(policy, critic, ds.train, cfg.crr, ds.valid, ds.history())
    state = out / "state.ckpt"
    if args.resume and state.exists():
        trainer.load_state(state)
        log.info("resumed at iteration %d", trainer.iteration)
    res = trainer.train(on_eval=lambda t: t.save_state(state))
    save_network(out / "policy.ckpt", res.policy, {"best_iteration": res.best_iteration,
                                                   "best_val_hr10": res.best_hr10})
    save_network(out / "critic.ckpt", trainer.critic.online)
    write_curve(out / "curve.csv", res.curve, CRR_CURVE_FIELDS)
    write_manifest(out, "train-crr", cfg, inputs)
    print(f"best iteration {res.best_iteration} val HR@10 {res.best_hr10:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    ds = _load_dataset(args.data)
    policy = _load_policy(args.checkpoint, ds)
    pools = ("all", "rand") if args.pool == "both" else (args.pool,)
    rep, (pos, rank_all, rank_rand) = evaluate_policy(
        policy, getattr(ds, args.split), ds.history(), pools, seed=args.seed, return_ranks=True)
    out = resolve_output(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(rep.to_json())
    if args.samples:
        write_sample_csv(resolve_output(args.samples), pos, rank_all, rank_rand)
    print(rep.to_json(), end="")
    return 0


def cmd_synth(args) -> int:
    rng = np.random.default_rng(args.seed)
    out = resolve_output(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.kind == "sessions":
        if args.items < 1 or args.actors < 1 or args.length < 1 or not 0 <= args.noise <= 1:
            raise ConfigError("items, actors, length must be >= 1 and noise in [0, 1]", field="synth")
        rule = AffineRule(args.items, args.mult, args.shift)
        recs = generate_synthetic_sessions(rule, args.actors, args.length, args.noise, rng, args.schema,
                                           args.purchase_prob)
        write_log(out, recs, args.schema)
        print(f"wrote {len(recs)} records")
    else:
        mdp = random_mdp(args.states, args.actions, args.gamma, rng)
        doc = json.loads(mdp.to_json())
        doc["optimal_policy"] = optimal_policy(mdp).tolist()
        out.write_text(json.dumps(doc, indent=1) + "\n")
        print(f"wrote {args.states}x{args.actions} MDP")
    return 0


def cmd_verify(args) -> int:
    names = tuple(SUITES) if args.suite == "all" else (args.suite,)
    ok = True
    for name in names:
        for check in run_suite(name):
            print(check.line())
            ok &= check.ok
    return 0 if ok else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command in ("ingest", "pretrain", "train-crr"):
            cfg = _config(args)
            set_threads(args.threads if args.threads is not None else cfg.run.threads)
            handler = {"ingest": cmd_ingest, "pretrain": cmd_pretrain, "train-crr": cmd_train_crr}
            return handler[args.command](args, cfg)
        set_threads(args.threads if args.threads is not None else 1)
        return {"evaluate": cmd_evaluate, "synth": cmd_synth, "verify": cmd_verify}[args.command](args)
    except CrrecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
